#pragma once

#include <vector>

#include "gdfd/nn.hpp"
#include "gdfd/tensor.hpp"

namespace gdfd {

template <typename T>
struct LossWeights {
    T lambda_t = T(6e-3);   // total-variation weight
    T lambda_l2 = T(1.5e-5); // image-norm weight
    T lambda_s = T(10);      // moment-matching weight
    T tau = T(3);            // distillation temperature

    void validate() const {
        if (lambda_t < T(0) || lambda_l2 < T(0) || lambda_s < T(0))
            throw ParamError("loss weights must be non-negative");
        if (!(tau > T(0))) throw ParamError("temperature must be positive");
    }
};

enum class MomentProvenance { Running, PerClassReal, PerClassDatafree, PerGroup };

const char* provenance_name(MomentProvenance p);
MomentProvenance provenance_from_name(const std::string& s);

// Per-layer target moments a synthetic batch should reproduce.
template <typename T>
struct MomentTargets {
    struct Layer {
        std::vector<T> mean, var;
    };
    std::vector<Layer> layers;
    MomentProvenance provenance = MomentProvenance::Running;
};

// Which part of the image objective is active; the loss-ablation runs train
// generators with only one of the two terms.
enum class ObjectiveMode { Both, InceptionismOnly, MomentOnly };

// cross-entropy + lambda_t * TV + lambda_l2 * image norm
template <typename T>
Var inceptionism_loss(Tape<T>& tape, Var teacher_logits, const std::vector<int>& labels,
                      Var images, const LossWeights<T>& w);

// unsquared ||mean - target_mean||_2 + unsquared ||var - target_var||_2
template <typename T>
Var moment_l2(Tape<T>& tape, Var mean, Var var, const std::vector<T>& target_mean,
              const std::vector<T>& target_var);

// plain-value counterpart used for diagnostics (no tape involved)
template <typename T>
T moment_l2_value(const std::vector<T>& mean, const std::vector<T>& var,
                  const std::vector<T>& target_mean, const std::vector<T>& target_var);

// lambda_s * sum over layers of moment_l2(captured, target)
template <typename T>
Var moment_matching_loss(Tape<T>& tape, const std::vector<BnCapture>& captured,
                         const MomentTargets<T>& targets, T lambda_s);

template <typename T>
struct ImageLossParts {
    Var total;
    Var ce, tv, l2, moment; // invalid when the mode leaves a term out
    Var logits;
};

// One frozen-teacher train-mode forward over `images`, combining the
// inceptionism and moment-matching terms per `mode`.
template <typename T>
ImageLossParts<T> image_loss(Tape<T>& tape, ClassifierModel<T>& teacher, Var images,
                             const std::vector<int>& labels, const MomentTargets<T>& targets,
                             const LossWeights<T>& w, ObjectiveMode mode = ObjectiveMode::Both);

// Monte-Carlo generator objective on one (z, y) batch. Labels are global
// class ids and must lie in class_subset; the generator is conditioned on
// the label's index within the subset.
template <typename T>
ImageLossParts<T> generator_objective(Tape<T>& tape, GeneratorModel<T>& gen,
                                      ClassifierModel<T>& teacher, const Tensor<T>& z,
                                      const std::vector<int>& labels,
                                      const std::vector<int>& class_subset,
                                      const MomentTargets<T>& targets, const LossWeights<T>& w,
                                      ObjectiveMode mode = ObjectiveMode::Both);

} // namespace gdfd
