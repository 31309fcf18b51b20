#include "gdfd/stats.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>
#include <string>
#include <utility>

#include "gdfd/optim.hpp"

namespace gdfd {

// ---------------------------------------------------------------------------
// Class grouping
// ---------------------------------------------------------------------------

ClassAssignment group_classes(int class_count, int k, std::uint64_t seed, bool shuffle) {
    if (class_count < 1)
        throw ParamError("group_classes: need at least one class, got " +
                         std::to_string(class_count));
    if (k < 1 || k > class_count)
        throw ParamError("group_classes: generator count " + std::to_string(k) +
                         " outside [1, " + std::to_string(class_count) + "]");

    std::vector<int> order(static_cast<std::size_t>(class_count));
    std::iota(order.begin(), order.end(), 0);
    if (shuffle) {
        Rng rng(seed);
        for (std::size_t i = order.size(); i > 1; --i)
            std::swap(order[i - 1], order[rng.below(i)]);
    }

    ClassAssignment out;
    out.class_count = class_count;
    out.k = k;
    out.generator_of.assign(static_cast<std::size_t>(class_count), -1);
    const int base = class_count / k;
    const int rem = class_count % k;
    std::size_t pos = 0;
    for (int g = 0; g < k; ++g) {
        const int take = base + (g < rem ? 1 : 0);
        std::vector<int> subset(order.begin() + static_cast<long>(pos),
                                order.begin() + static_cast<long>(pos) + take);
        std::sort(subset.begin(), subset.end());
        for (int c : subset) out.generator_of[static_cast<std::size_t>(c)] = g;
        out.subsets.push_back(std::move(subset));
        pos += static_cast<std::size_t>(take);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Moment estimation
// ---------------------------------------------------------------------------

namespace {

// Restores the frozen flag on scope exit so measurement passes can borrow
// an unfrozen teacher without leaving a trace.
template <typename T>
struct FrozenGuard {
    ClassifierModel<T>& model;
    bool saved;
    explicit FrozenGuard(ClassifierModel<T>& m) : model(m), saved(m.frozen) { m.frozen = true; }
    ~FrozenGuard() { model.frozen = saved; }
};

template <typename T>
Tensor<T> cast_images(const Tensorf& src) {
    if constexpr (std::is_same_v<T, float>) {
        return src;
    } else {
        Tensor<T> out(src.shape);
        for (std::size_t i = 0; i < src.data.size(); ++i)
            out.data[i] = static_cast<T>(src.data[i]);
        return out;
    }
}

} // namespace

template <typename T>
MomentTargets<T> extract_running_moments(ClassifierModel<T>& teacher) {
    const auto registry = teacher.bn_registry();
    if (registry.empty())
        throw ContractError("extract_running_moments: model has no batch-norm layers");
    MomentTargets<T> out;
    out.provenance = MomentProvenance::Running;
    for (BatchNormState<T>* bn : registry)
        out.layers.push_back({bn->running_mean.data, bn->running_var.data});
    return out;
}

template <typename T>
MomentTargets<T> measure_batch_moments(ClassifierModel<T>& teacher, const Tensor<T>& images,
                                       MomentProvenance provenance) {
    if (teacher.bn_registry().empty())
        throw ContractError("measure_batch_moments: model has no batch-norm layers");
    FrozenGuard<T> guard(teacher);
    Tape<T> tape;
    std::vector<BnCapture> captures;
    (void)classifier_forward(tape, teacher, images, Mode::Train, &captures);
    MomentTargets<T> out;
    out.provenance = provenance;
    for (const BnCapture& cap : captures)
        out.layers.push_back({tape.value(cap.mean).data, tape.value(cap.var).data});
    return out;
}

template <typename T>
MomentTargets<T> estimate_class_moments_from_data(ClassifierModel<T>& teacher, const Dataset& data,
                                                  int class_id, std::size_t n_per_class) {
    if (n_per_class < 2)
        throw ParamError("estimate_class_moments_from_data: need n_per_class >= 2, got " +
                         std::to_string(n_per_class));
    if (class_id < 0 || class_id >= data.class_count)
        throw ParamError("estimate_class_moments_from_data: class " + std::to_string(class_id) +
                         " outside [0, " + std::to_string(data.class_count) + ")");
    std::vector<std::size_t> idx;
    for (std::size_t i = 0; i < data.size() && idx.size() < n_per_class; ++i)
        if (data.labels[i] == class_id) idx.push_back(i);
    if (idx.size() < n_per_class)
        throw DataError("estimate_class_moments_from_data: class " + std::to_string(class_id) +
                        " has " + std::to_string(idx.size()) + " images, need " +
                        std::to_string(n_per_class));
    Tensor<T> batch = cast_images<T>(data.gather(idx));
    return measure_batch_moments(teacher, batch, MomentProvenance::PerClassReal);
}

// ---------------------------------------------------------------------------
// Direct synthesis
// ---------------------------------------------------------------------------

template <typename T>
SynthResult<T> synthesize_images_direct(ClassifierModel<T>& teacher, const std::vector<int>& labels,
                                        const MomentTargets<T>& targets,
                                        const LossWeights<T>& weights, const SynthConfig& cfg) {
    if (cfg.steps < 1)
        throw ParamError("synthesize_images_direct: need steps >= 1, got " +
                         std::to_string(cfg.steps));
    if (labels.size() < 2)
        throw ParamError("synthesize_images_direct: need a batch of >= 2 labels, got " +
                         std::to_string(labels.size()));
    if (!(cfg.lr > 0.0)) throw ParamError("synthesize_images_direct: learning rate must be positive");
    for (int l : labels)
        if (l < 0 || l >= teacher.cfg.class_count)
            throw ParamError("synthesize_images_direct: label " + std::to_string(l) +
                             " outside [0, " + std::to_string(teacher.cfg.class_count) + ")");

    Rng rng(cfg.seed);
    const Shape shape = {labels.size(), static_cast<std::size_t>(teacher.cfg.in_channels),
                         static_cast<std::size_t>(teacher.cfg.input_size),
                         static_cast<std::size_t>(teacher.cfg.input_size)};
    Tensor<T> px = Tensor<T>::randn(shape, rng);
    for (T& v : px.data) v *= T(0.1);
    px.set_requires_grad(true);

    SynthResult<T> out;
    out.loss.reserve(static_cast<std::size_t>(cfg.steps));
    AdamState<T> opt({&px});
    for (long s = 0; s < cfg.steps; ++s) {
        px.zero_grad();
        Tape<T> tape;
        Var iv = tape.leaf(&px);
        auto parts = image_loss(tape, teacher, iv, labels, targets, weights, ObjectiveMode::Both);
        const T lv = tape.value(parts.total).data[0];
        if (!std::isfinite(static_cast<double>(lv)))
            throw DivergenceError("synthesize_images_direct: non-finite objective at step " +
                                      std::to_string(s),
                                  s);
        out.loss.push_back(static_cast<double>(lv));
        tape.backward(parts.total);
        adam_step<T>({&px}, opt, static_cast<T>(cfg.lr));
    }
    px.set_requires_grad(false);
    px.grad.clear();
    for (T& v : px.data) v = std::clamp(v, T(-1), T(1));
    out.images = std::move(px);
    return out;
}

template <typename T>
MomentTargets<T> estimate_class_moments_datafree(ClassifierModel<T>& teacher, int class_id,
                                                 std::size_t n, const LossWeights<T>& weights,
                                                 const SynthConfig& cfg) {
    if (n < 2)
        throw ParamError("estimate_class_moments_datafree: need n >= 2, got " + std::to_string(n));
    const MomentTargets<T> running = extract_running_moments(teacher);
    const std::vector<int> labels(n, class_id);
    SynthResult<T> synth = synthesize_images_direct(teacher, labels, running, weights, cfg);
    return measure_batch_moments(teacher, synth.images, MomentProvenance::PerClassDatafree);
}

template <typename T>
MomentTargets<T> estimate_group_moments_from_data(ClassifierModel<T>& teacher, const Dataset& data,
                                                  const std::vector<int>& subset,
                                                  std::size_t n_per_class) {
    if (subset.empty()) throw ParamError("estimate_group_moments_from_data: empty subset");
    if (subset.size() == 1)
        return estimate_class_moments_from_data(teacher, data, subset[0], n_per_class);
    if (n_per_class < 2)
        throw ParamError("estimate_group_moments_from_data: need n_per_class >= 2, got " +
                         std::to_string(n_per_class));
    std::vector<std::size_t> idx;
    for (int c : subset) {
        if (c < 0 || c >= data.class_count)
            throw ParamError("estimate_group_moments_from_data: class " + std::to_string(c) +
                             " outside [0, " + std::to_string(data.class_count) + ")");
        std::size_t found = 0;
        for (std::size_t i = 0; i < data.size() && found < n_per_class; ++i)
            if (data.labels[i] == c) {
                idx.push_back(i);
                ++found;
            }
        if (found < n_per_class)
            throw DataError("estimate_group_moments_from_data: class " + std::to_string(c) +
                            " has " + std::to_string(found) + " images, need " +
                            std::to_string(n_per_class));
    }
    Tensor<T> batch = cast_images<T>(data.gather(idx));
    return measure_batch_moments(teacher, batch, MomentProvenance::PerGroup);
}

template <typename T>
MomentTargets<T> estimate_group_moments_datafree(ClassifierModel<T>& teacher,
                                                 const std::vector<int>& subset,
                                                 std::size_t n_images,
                                                 const LossWeights<T>& weights,
                                                 const SynthConfig& cfg) {
    if (subset.empty()) throw ParamError("estimate_group_moments_datafree: empty subset");
    if (subset.size() == 1)
        return estimate_class_moments_datafree(teacher, subset[0], n_images, weights, cfg);
    if (n_images < 2)
        throw ParamError("estimate_group_moments_datafree: need n_images >= 2, got " +
                         std::to_string(n_images));
    std::vector<int> labels(n_images);
    for (std::size_t i = 0; i < n_images; ++i) labels[i] = subset[i % subset.size()];
    const MomentTargets<T> running = extract_running_moments(teacher);
    SynthResult<T> synth = synthesize_images_direct(teacher, labels, running, weights, cfg);
    return measure_batch_moments(teacher, synth.images, MomentProvenance::PerGroup);
}

// ---------------------------------------------------------------------------
// Serialization
// ---------------------------------------------------------------------------

template <typename T>
void add_moments(Checkpoint& ck, const std::string& prefix, const MomentTargets<T>& targets) {
    ck.set_meta(prefix + "/provenance", provenance_name(targets.provenance));
    ck.set_meta(prefix + "/layers", std::to_string(targets.layers.size()));
    for (std::size_t i = 0; i < targets.layers.size(); ++i) {
        const auto& layer = targets.layers[i];
        const std::string base = prefix + "/" + std::to_string(i) + "/";
        ck.add(base + "mean", Tensor<T>({layer.mean.size()}, layer.mean));
        ck.add(base + "var", Tensor<T>({layer.var.size()}, layer.var));
    }
}

template <typename T>
MomentTargets<T> read_moments(const Checkpoint& ck, const std::string& prefix) {
    MomentTargets<T> out;
    out.provenance = provenance_from_name(ck.meta(prefix + "/provenance"));
    const std::string count_text = ck.meta(prefix + "/layers");
    std::size_t count = 0;
    try {
        count = static_cast<std::size_t>(std::stoull(count_text));
    } catch (const std::exception&) {
        throw DataError("moments: bad layer count '" + count_text + "'");
    }
    for (std::size_t i = 0; i < count; ++i) {
        const std::string base = prefix + "/" + std::to_string(i) + "/";
        typename MomentTargets<T>::Layer layer;
        if constexpr (std::is_same_v<T, float>) {
            layer.mean = ck.get_f32(base + "mean").data;
            layer.var = ck.get_f32(base + "var").data;
        } else {
            layer.mean = ck.get_f64(base + "mean").data;
            layer.var = ck.get_f64(base + "var").data;
        }
        out.layers.push_back(std::move(layer));
    }
    return out;
}

template <typename T>
void save_moments(const MomentTargets<T>& targets, const std::string& path) {
    Checkpoint ck;
    ck.set_meta("kind", "moments");
    add_moments(ck, "moments", targets);
    save_checkpoint(ck, path);
}

template <typename T>
MomentTargets<T> load_moments(const std::string& path) {
    Checkpoint ck = load_checkpoint(path);
    if (ck.find_meta("kind") == nullptr || ck.meta("kind") != "moments")
        throw DataError("load_moments: " + path + " is not a moments checkpoint");
    return read_moments<T>(ck, "moments");
}

template MomentTargets<float> extract_running_moments(ClassifierModel<float>&);
template MomentTargets<double> extract_running_moments(ClassifierModel<double>&);
template MomentTargets<float> measure_batch_moments(ClassifierModel<float>&, const Tensor<float>&,
                                                    MomentProvenance);
template MomentTargets<double> measure_batch_moments(ClassifierModel<double>&,
                                                     const Tensor<double>&, MomentProvenance);
template MomentTargets<float> estimate_class_moments_from_data(ClassifierModel<float>&,
                                                               const Dataset&, int, std::size_t);
template MomentTargets<double> estimate_class_moments_from_data(ClassifierModel<double>&,
                                                                const Dataset&, int, std::size_t);
template SynthResult<float> synthesize_images_direct(ClassifierModel<float>&,
                                                     const std::vector<int>&,
                                                     const MomentTargets<float>&,
                                                     const LossWeights<float>&, const SynthConfig&);
template SynthResult<double> synthesize_images_direct(ClassifierModel<double>&,
                                                      const std::vector<int>&,
                                                      const MomentTargets<double>&,
                                                      const LossWeights<double>&,
                                                      const SynthConfig&);
template MomentTargets<float> estimate_class_moments_datafree(ClassifierModel<float>&, int,
                                                              std::size_t,
                                                              const LossWeights<float>&,
                                                              const SynthConfig&);
template MomentTargets<double> estimate_class_moments_datafree(ClassifierModel<double>&, int,
                                                               std::size_t,
                                                               const LossWeights<double>&,
                                                               const SynthConfig&);
template MomentTargets<float> estimate_group_moments_from_data(ClassifierModel<float>&,
                                                               const Dataset&,
                                                               const std::vector<int>&,
                                                               std::size_t);
template MomentTargets<double> estimate_group_moments_from_data(ClassifierModel<double>&,
                                                                const Dataset&,
                                                                const std::vector<int>&,
                                                                std::size_t);
template MomentTargets<float> estimate_group_moments_datafree(ClassifierModel<float>&,
                                                              const std::vector<int>&, std::size_t,
                                                              const LossWeights<float>&,
                                                              const SynthConfig&);
template MomentTargets<double> estimate_group_moments_datafree(ClassifierModel<double>&,
                                                               const std::vector<int>&,
                                                               std::size_t,
                                                               const LossWeights<double>&,
                                                               const SynthConfig&);
template void add_moments(Checkpoint&, const std::string&, const MomentTargets<float>&);
template void add_moments(Checkpoint&, const std::string&, const MomentTargets<double>&);
template MomentTargets<float> read_moments(const Checkpoint&, const std::string&);
template MomentTargets<double> read_moments(const Checkpoint&, const std::string&);
template void save_moments(const MomentTargets<float>&, const std::string&);
template void save_moments(const MomentTargets<double>&, const std::string&);
template MomentTargets<float> load_moments(const std::string&);
template MomentTargets<double> load_moments(const std::string&);

} // namespace gdfd
