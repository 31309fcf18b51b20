#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdfd/data.hpp"
#include "gdfd/losses.hpp"
#include "gdfd/nn.hpp"
#include "gdfd/stats.hpp"

namespace gdfd {

struct GenTrainConfig {
    long steps = 10000;
    std::size_t batch = 8;
    double lr = 0.001; // Adam, constant
    LossWeights<float> weights;
    ObjectiveMode mode = ObjectiveMode::Both;
    std::uint64_t seed = 0;
};

// A generator together with the classes it owns and the targets it was
// trained against. Conditioning width always equals the subset size.
struct TrainedGenerator {
    GeneratorModel<float> model;
    std::vector<int> subset;
    MomentTargets<float> targets;
    std::vector<double> loss; // objective value at the start of each step
};

// Trains one generator against a frozen teacher. `arch` supplies the
// latent/base geometry; conditioning width, output channels and target size
// are derived from the subset and the teacher.
TrainedGenerator train_generator(ClassifierModel<float>& teacher,
                                 const MomentTargets<float>& targets,
                                 const std::vector<int>& class_subset, const GeneratorConfig& arch,
                                 const GenTrainConfig& cfg);

struct EnsembleHandle {
    ClassAssignment assignment;
    LatentSpec latent;
    std::vector<TrainedGenerator> members;
};

// Trains one member per assignment subset. Member i always runs with seed
// derive_seed(cfg.seed, i), so worker count and completion order cannot
// change the result. Member failures are rethrown with the member id.
EnsembleHandle train_ensemble(ClassifierModel<float>& teacher, const ClassAssignment& assignment,
                              const std::vector<MomentTargets<float>>& per_subset_targets,
                              const GeneratorConfig& arch, const GenTrainConfig& cfg,
                              int workers = 1);

struct EnsembleSample {
    Tensorf images; // B x C x H x W
    std::vector<int> labels;        // intended global class per sample
    std::vector<int> generator_ids; // member that produced each sample
};

// Uniform member choice, uniform label within the member's subset, fresh
// latent draw per sample; generators run in eval mode.
EnsembleSample sample_ensemble(EnsembleHandle& ensemble, std::size_t batch, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Image sources (distillation inputs and coverage probes)
// ---------------------------------------------------------------------------

// Stateful stream of image batches in [-1, 1]. Sources carry labels only as
// side metadata, never into a loss: distillation consumes images alone.
struct ImageSource {
    virtual ~ImageSource() = default;
    virtual Tensorf next(std::size_t batch) = 0;
};

class EnsembleSource : public ImageSource {
public:
    EnsembleSource(EnsembleHandle& ensemble, std::uint64_t seed)
        : ensemble_(ensemble), seed_(seed) {}
    Tensorf next(std::size_t batch) override;

private:
    EnsembleHandle& ensemble_;
    std::uint64_t seed_;
    std::uint64_t counter_ = 0;
};

class NoiseSource : public ImageSource {
public:
    NoiseSource(int channels, int size, std::uint64_t seed)
        : channels_(channels), size_(size), rng_(seed) {}
    Tensorf next(std::size_t batch) override;

private:
    int channels_, size_;
    Rng rng_;
};

// Cycles through a dataset with a reshuffle at every epoch boundary.
class DatasetSource : public ImageSource {
public:
    DatasetSource(Dataset data, std::uint64_t seed);
    Tensorf next(std::size_t batch) override;

private:
    Dataset data_;
    Rng rng_;
    std::vector<std::size_t> order_;
    std::size_t pos_ = 0;

    void reshuffle();
};

// ---------------------------------------------------------------------------
// Mode-collapse diagnostics
// ---------------------------------------------------------------------------

struct CoverageReport {
    std::vector<long> histogram;        // teacher-argmax counts per class
    double coverage = 0.0;              // fraction of classes with >= 1 hit
    std::vector<double> class_variance; // mean per-pixel variance within each class
};

CoverageReport class_coverage(ClassifierModel<float>& teacher, ImageSource& source,
                              std::size_t n_samples);

// Fraction of a member's samples whose teacher prediction falls inside the
// member's own subset. Below ~0.9 is worth flagging, not failing.
double subset_hit_rate(ClassifierModel<float>& teacher, EnsembleHandle& ensemble, int member,
                       std::size_t n_samples, std::uint64_t seed);

// ---------------------------------------------------------------------------
// Persistence: one checkpoint per member plus a manifest
// ---------------------------------------------------------------------------

// Writes dir/gen<i>.gdfd per member and dir/ensemble.gdfd referencing them;
// returns the manifest path. Loss histories are run artifacts and are not
// part of the persisted state.
std::string save_ensemble(EnsembleHandle& ensemble, const std::string& dir);
EnsembleHandle load_ensemble(const std::string& manifest_path);

} // namespace gdfd
