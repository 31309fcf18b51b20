#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "gdfd/data.hpp"
#include "gdfd/losses.hpp"
#include "gdfd/nn.hpp"

namespace gdfd {

// Balanced partition of the class ids over k generators: contiguous runs,
// sizes differing by at most one, optional seeded shuffle of the class
// order before splitting.
struct ClassAssignment {
    int class_count = 0;
    int k = 0;
    std::vector<int> generator_of;         // class id -> owning generator
    std::vector<std::vector<int>> subsets; // generator id -> owned classes
};

ClassAssignment group_classes(int class_count, int k, std::uint64_t seed = 0,
                              bool shuffle = false);

// Copies the running moments out of every BN layer, in registry order.
template <typename T>
MomentTargets<T> extract_running_moments(ClassifierModel<T>& teacher);

// Batch moments of the BN inputs over `images`, measured with a
// statistics-only pass: running buffers, parameters and the frozen flag
// are all left exactly as found.
template <typename T>
MomentTargets<T> measure_batch_moments(ClassifierModel<T>& teacher, const Tensor<T>& images,
                                       MomentProvenance provenance);

// Moments of the first n_per_class images of `class_id` in the dataset.
template <typename T>
MomentTargets<T> estimate_class_moments_from_data(ClassifierModel<T>& teacher, const Dataset& data,
                                                  int class_id, std::size_t n_per_class = 100);

struct SynthConfig {
    long steps = 600;
    double lr = 0.05;
    std::uint64_t seed = 0;
};

template <typename T>
struct SynthResult {
    Tensor<T> images;          // B x C x H x W, clamped to [-1, 1]
    std::vector<double> loss;  // objective value at the start of each step
};

// Optimizes a pixel batch directly against the image objective with Adam;
// the teacher must be frozen and only the pixels receive updates.
template <typename T>
SynthResult<T> synthesize_images_direct(ClassifierModel<T>& teacher, const std::vector<int>& labels,
                                        const MomentTargets<T>& targets,
                                        const LossWeights<T>& weights, const SynthConfig& cfg);

// Synthesizes n images of one class against the running-stat targets, then
// measures their per-layer moments.
template <typename T>
MomentTargets<T> estimate_class_moments_datafree(ClassifierModel<T>& teacher, int class_id,
                                                 std::size_t n, const LossWeights<T>& weights,
                                                 const SynthConfig& cfg);

// Group variants for ensemble members that own several classes: one
// statistics pass over n_per_class samples of every subset class (subset
// order), or over n_images synthesized with labels cycling through the
// subset. A singleton subset reduces to the per-class estimate.
template <typename T>
MomentTargets<T> estimate_group_moments_from_data(ClassifierModel<T>& teacher, const Dataset& data,
                                                  const std::vector<int>& subset,
                                                  std::size_t n_per_class = 100);

template <typename T>
MomentTargets<T> estimate_group_moments_datafree(ClassifierModel<T>& teacher,
                                                 const std::vector<int>& subset,
                                                 std::size_t n_images,
                                                 const LossWeights<T>& weights,
                                                 const SynthConfig& cfg);

// Checkpoint embedding: tensors `<prefix>/<layer>/mean|var` plus provenance
// and layer-count metadata under the same prefix.
template <typename T>
void add_moments(Checkpoint& ck, const std::string& prefix, const MomentTargets<T>& targets);

template <typename T>
MomentTargets<T> read_moments(const Checkpoint& ck, const std::string& prefix);

template <typename T>
void save_moments(const MomentTargets<T>& targets, const std::string& path);

template <typename T>
MomentTargets<T> load_moments(const std::string& path);

} // namespace gdfd
