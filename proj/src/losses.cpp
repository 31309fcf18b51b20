#include "gdfd/losses.hpp"

#include <algorithm>
#include <cmath>

namespace gdfd {

const char* provenance_name(MomentProvenance p) {
    switch (p) {
    case MomentProvenance::Running: return "running";
    case MomentProvenance::PerClassReal: return "per_class_real";
    case MomentProvenance::PerClassDatafree: return "per_class_datafree";
    case MomentProvenance::PerGroup: return "per_group";
    }
    return "running";
}

MomentProvenance provenance_from_name(const std::string& s) {
    if (s == "running") return MomentProvenance::Running;
    if (s == "per_class_real") return MomentProvenance::PerClassReal;
    if (s == "per_class_datafree") return MomentProvenance::PerClassDatafree;
    if (s == "per_group") return MomentProvenance::PerGroup;
    throw DataError("unknown moment provenance '" + s + "'");
}

template <typename T>
Var inceptionism_loss(Tape<T>& tape, Var teacher_logits, const std::vector<int>& labels,
                      Var images, const LossWeights<T>& w) {
    w.validate();
    Var total = tape.cross_entropy(teacher_logits, labels);
    if (w.lambda_t != T(0)) total = tape.add(total, tape.scale(tape.tv_loss(images), w.lambda_t));
    if (w.lambda_l2 != T(0))
        total = tape.add(total, tape.scale(tape.l2_image_loss(images), w.lambda_l2));
    return total;
}

template <typename T>
Var moment_l2(Tape<T>& tape, Var mean, Var var, const std::vector<T>& target_mean,
              const std::vector<T>& target_var) {
    const Tensor<T>& mv = tape.value(mean);
    const Tensor<T>& vv = tape.value(var);
    if (mv.numel() != target_mean.size() || vv.numel() != target_var.size())
        throw ShapeError("moment_l2: channel count mismatch (" + std::to_string(mv.numel()) +
                         " captured vs " + std::to_string(target_mean.size()) + " target)");
    Var tm = tape.constant(Tensor<T>({target_mean.size()}, target_mean));
    Var tv = tape.constant(Tensor<T>({target_var.size()}, target_var));
    return tape.add(tape.l2_norm(tape.sub(mean, tm)), tape.l2_norm(tape.sub(var, tv)));
}

template <typename T>
T moment_l2_value(const std::vector<T>& mean, const std::vector<T>& var,
                  const std::vector<T>& target_mean, const std::vector<T>& target_var) {
    if (mean.size() != target_mean.size() || var.size() != target_var.size())
        throw ShapeError("moment_l2: channel count mismatch");
    T m2 = 0, v2 = 0;
    for (std::size_t i = 0; i < mean.size(); ++i) {
        const T d = mean[i] - target_mean[i];
        m2 += d * d;
    }
    for (std::size_t i = 0; i < var.size(); ++i) {
        const T d = var[i] - target_var[i];
        v2 += d * d;
    }
    return std::sqrt(m2) + std::sqrt(v2);
}

template <typename T>
Var moment_matching_loss(Tape<T>& tape, const std::vector<BnCapture>& captured,
                         const MomentTargets<T>& targets, T lambda_s) {
    if (captured.size() != targets.layers.size())
        throw ContractError("moment matching: registry mismatch (" +
                            std::to_string(captured.size()) + " captured layers vs " +
                            std::to_string(targets.layers.size()) + " target layers)");
    if (captured.empty()) throw ContractError("moment matching: no captured layers");
    Var total;
    for (std::size_t l = 0; l < captured.size(); ++l) {
        Var term =
            moment_l2(tape, captured[l].mean, captured[l].var, targets.layers[l].mean,
                      targets.layers[l].var);
        total = total.valid() ? tape.add(total, term) : term;
    }
    return tape.scale(total, lambda_s);
}

template <typename T>
ImageLossParts<T> image_loss(Tape<T>& tape, ClassifierModel<T>& teacher, Var images,
                             const std::vector<int>& labels, const MomentTargets<T>& targets,
                             const LossWeights<T>& w, ObjectiveMode mode) {
    if (!teacher.frozen) throw ContractError("image_loss: teacher must be frozen");
    w.validate();
    std::vector<BnCapture> captures;
    ImageLossParts<T> parts;
    parts.logits = classifier_forward(tape, teacher, images, Mode::Train, &captures);

    if (mode != ObjectiveMode::MomentOnly) {
        parts.ce = tape.cross_entropy(parts.logits, labels);
        parts.total = parts.ce;
        if (w.lambda_t != T(0)) {
            parts.tv = tape.tv_loss(images);
            parts.total = tape.add(parts.total, tape.scale(parts.tv, w.lambda_t));
        }
        if (w.lambda_l2 != T(0)) {
            parts.l2 = tape.l2_image_loss(images);
            parts.total = tape.add(parts.total, tape.scale(parts.l2, w.lambda_l2));
        }
    }
    if (mode != ObjectiveMode::InceptionismOnly) {
        parts.moment = moment_matching_loss(tape, captures, targets, w.lambda_s);
        parts.total = parts.total.valid() ? tape.add(parts.total, parts.moment) : parts.moment;
    }
    return parts;
}

template <typename T>
ImageLossParts<T> generator_objective(Tape<T>& tape, GeneratorModel<T>& gen,
                                      ClassifierModel<T>& teacher, const Tensor<T>& z,
                                      const std::vector<int>& labels,
                                      const std::vector<int>& class_subset,
                                      const MomentTargets<T>& targets, const LossWeights<T>& w,
                                      ObjectiveMode mode) {
    if (class_subset.size() != static_cast<std::size_t>(gen.cfg.class_count))
        throw ContractError("generator objective: subset size " +
                            std::to_string(class_subset.size()) +
                            " does not match generator conditioning K=" +
                            std::to_string(gen.cfg.class_count));
    std::vector<int> local(labels.size());
    for (std::size_t i = 0; i < labels.size(); ++i) {
        auto it = std::find(class_subset.begin(), class_subset.end(), labels[i]);
        if (it == class_subset.end())
            throw ContractError("generator objective: label " + std::to_string(labels[i]) +
                                " is outside this generator's class subset");
        local[i] = static_cast<int>(it - class_subset.begin());
    }
    Var images = generator_forward(tape, gen, z, local, Mode::Train);
    return image_loss(tape, teacher, images, labels, targets, w, mode);
}

template struct LossWeights<float>;
template struct LossWeights<double>;
template struct MomentTargets<float>;
template struct MomentTargets<double>;

template Var inceptionism_loss<float>(Tape<float>&, Var, const std::vector<int>&, Var,
                                      const LossWeights<float>&);
template Var inceptionism_loss<double>(Tape<double>&, Var, const std::vector<int>&, Var,
                                       const LossWeights<double>&);
template Var moment_l2<float>(Tape<float>&, Var, Var, const std::vector<float>&,
                              const std::vector<float>&);
template Var moment_l2<double>(Tape<double>&, Var, Var, const std::vector<double>&,
                               const std::vector<double>&);
template float moment_l2_value<float>(const std::vector<float>&, const std::vector<float>&,
                                      const std::vector<float>&, const std::vector<float>&);
template double moment_l2_value<double>(const std::vector<double>&, const std::vector<double>&,
                                        const std::vector<double>&, const std::vector<double>&);
template Var moment_matching_loss<float>(Tape<float>&, const std::vector<BnCapture>&,
                                         const MomentTargets<float>&, float);
template Var moment_matching_loss<double>(Tape<double>&, const std::vector<BnCapture>&,
                                          const MomentTargets<double>&, double);
template ImageLossParts<float> image_loss<float>(Tape<float>&, ClassifierModel<float>&, Var,
                                                 const std::vector<int>&,
                                                 const MomentTargets<float>&,
                                                 const LossWeights<float>&, ObjectiveMode);
template ImageLossParts<double> image_loss<double>(Tape<double>&, ClassifierModel<double>&, Var,
                                                   const std::vector<int>&,
                                                   const MomentTargets<double>&,
                                                   const LossWeights<double>&, ObjectiveMode);
template ImageLossParts<float> generator_objective<float>(Tape<float>&, GeneratorModel<float>&,
                                                          ClassifierModel<float>&,
                                                          const Tensor<float>&,
                                                          const std::vector<int>&,
                                                          const std::vector<int>&,
                                                          const MomentTargets<float>&,
                                                          const LossWeights<float>&, ObjectiveMode);
template ImageLossParts<double> generator_objective<double>(
    Tape<double>&, GeneratorModel<double>&, ClassifierModel<double>&, const Tensor<double>&,
    const std::vector<int>&, const std::vector<int>&, const MomentTargets<double>&,
    const LossWeights<double>&, ObjectiveMode);

} // namespace gdfd
