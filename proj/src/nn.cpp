#include "gdfd/nn.hpp"

#include <cmath>

namespace gdfd {

template <typename T>
Var batchnorm_forward(Tape<T>& tape, Var x, BatchNormState<T>& bn, Mode mode, bool update_running,
                      std::vector<BnCapture>* captures) {
    const Tensor<T>& xv = tape.value(x);
    if (xv.shape.size() != 4 || xv.shape[1] != bn.channels()) {
        throw ShapeError("batchnorm: input " + shape_str(xv.shape) + " does not match " +
                         std::to_string(bn.channels()) + " channels");
    }
    Var g = tape.leaf(&bn.gamma);
    Var b = tape.leaf(&bn.beta);
    if (mode == Mode::Eval) {
        Var rm = tape.constant(bn.running_mean);
        Var rv = tape.constant(bn.running_var);
        return tape.bn_normalize(x, rm, rv, g, b, bn.eps);
    }
    auto [mean, var] = tape.channel_moments(x);
    const Tensor<T>& mv = tape.value(mean);
    const Tensor<T>& vv = tape.value(var);
    bn.last_batch_mean.data = mv.data;
    bn.last_batch_var.data = vv.data;
    if (update_running) {
        const T m = bn.momentum;
        for (std::size_t c = 0; c < bn.channels(); ++c) {
            bn.running_mean.data[c] = m * bn.running_mean.data[c] + (T(1) - m) * mv.data[c];
            bn.running_var.data[c] = m * bn.running_var.data[c] + (T(1) - m) * vv.data[c];
        }
    }
    if (captures) captures->push_back(BnCapture{mean, var});
    return tape.bn_normalize(x, mean, var, g, b, bn.eps);
}

// ---------------------------------------------------------------------------
// Classifier
// ---------------------------------------------------------------------------

namespace {

// He-style fan-in initialization
template <typename T>
void init_he(Tensor<T>& w, std::size_t fan_in, Rng& rng) {
    const T stddev = static_cast<T>(std::sqrt(2.0 / static_cast<double>(fan_in)));
    for (T& v : w.data) v = static_cast<T>(rng.normal()) * stddev;
}

constexpr int kClassifierBaseWidths[3] = {12, 24, 48};

std::size_t scaled_width(int base, double width) {
    const long w = std::lround(static_cast<double>(base) * width);
    return static_cast<std::size_t>(w < 1 ? 1 : w);
}

} // namespace

template <typename T>
std::vector<Tensor<T>*> ClassifierModel<T>::parameters() {
    std::vector<Tensor<T>*> out;
    for (auto& blk : blocks) {
        out.push_back(&blk.kernel);
        out.push_back(&blk.bias);
        out.push_back(&blk.bn.gamma);
        out.push_back(&blk.bn.beta);
    }
    out.push_back(&head_w);
    out.push_back(&head_b);
    return out;
}

template <typename T>
std::vector<BatchNormState<T>*> ClassifierModel<T>::bn_registry() {
    std::vector<BatchNormState<T>*> out;
    for (auto& blk : blocks) out.push_back(&blk.bn);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> ClassifierModel<T>::named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + "/";
        out.emplace_back(p + "kernel", &blocks[i].kernel);
        out.emplace_back(p + "bias", &blocks[i].bias);
        out.emplace_back(p + "bn/gamma", &blocks[i].bn.gamma);
        out.emplace_back(p + "bn/beta", &blocks[i].bn.beta);
        out.emplace_back(p + "bn/running_mean", &blocks[i].bn.running_mean);
        out.emplace_back(p + "bn/running_var", &blocks[i].bn.running_var);
    }
    out.emplace_back("head/weight", &head_w);
    out.emplace_back("head/bias", &head_b);
    return out;
}

template <typename T>
void ClassifierModel<T>::set_requires_grad(bool on) {
    for (Tensor<T>* p : parameters()) p->set_requires_grad(on);
}

template <typename T>
void ClassifierModel<T>::freeze() {
    frozen = true;
    set_requires_grad(false);
}

template <typename T>
ClassifierModel<T> build_classifier(const ClassifierConfig& cfg, std::uint64_t seed) {
    if (cfg.input_size != 16 && cfg.input_size != 32)
        throw ConfigError("classifier: input_size must be 16 or 32, got " +
                          std::to_string(cfg.input_size));
    if (cfg.class_count < 2)
        throw ConfigError("classifier: need at least 2 classes, got " +
                          std::to_string(cfg.class_count));
    if (cfg.in_channels < 1) throw ConfigError("classifier: in_channels must be positive");
    if (cfg.width <= 0.0) throw ConfigError("classifier: width must be positive");

    ClassifierModel<T> model;
    model.cfg = cfg;
    Rng rng(seed);
    std::size_t in_ch = static_cast<std::size_t>(cfg.in_channels);
    for (int i = 0; i < 3; ++i) {
        const std::size_t out_ch = scaled_width(kClassifierBaseWidths[i], cfg.width);
        ConvBlock<T> blk(out_ch, in_ch, 3);
        init_he(blk.kernel, in_ch * 9, rng);
        model.blocks.push_back(std::move(blk));
        in_ch = out_ch;
    }
    model.head_w = Tensor<T>::zeros({in_ch, static_cast<std::size_t>(cfg.class_count)});
    init_he(model.head_w, in_ch, rng);
    model.head_b = Tensor<T>::zeros({static_cast<std::size_t>(cfg.class_count)});
    return model;
}

template <typename T>
Var classifier_forward(Tape<T>& tape, ClassifierModel<T>& model, Var images, Mode mode,
                       std::vector<BnCapture>* captures) {
    const Tensor<T>& xv = tape.value(images);
    const std::size_t c = static_cast<std::size_t>(model.cfg.in_channels);
    const std::size_t s = static_cast<std::size_t>(model.cfg.input_size);
    if (xv.shape.size() != 4 || xv.shape[1] != c || xv.shape[2] != s || xv.shape[3] != s)
        throw ShapeError("classifier: batch " + shape_str(xv.shape) + " does not match model input " +
                         std::to_string(c) + "x" + std::to_string(s) + "x" + std::to_string(s));
    if (mode == Mode::Train && xv.shape[0] < 2)
        throw ParamError("classifier: train-mode forward needs batch size >= 2");

    const bool update = mode == Mode::Train && !model.frozen;
    Var h = images;
    for (auto& blk : model.blocks) {
        h = tape.conv2d(h, tape.leaf(&blk.kernel), tape.leaf(&blk.bias), 1, 1);
        h = batchnorm_forward(tape, h, blk.bn, mode, update, captures);
        h = tape.leaky_relu(h, T(0.2));
        h = tape.avgpool2x2(h);
    }
    Var pooled = tape.global_avg_pool(h);
    return tape.linear(pooled, tape.leaf(&model.head_w), tape.leaf(&model.head_b));
}

template <typename T>
Var classifier_forward(Tape<T>& tape, ClassifierModel<T>& model, const Tensor<T>& images,
                       Mode mode, std::vector<BnCapture>* captures) {
    return classifier_forward(tape, model, tape.constant(images), mode, captures);
}

// ---------------------------------------------------------------------------
// Generator
// ---------------------------------------------------------------------------

template <typename T>
std::vector<Tensor<T>*> GeneratorModel<T>::parameters() {
    std::vector<Tensor<T>*> out{&fc_w, &fc_b, &bn0.gamma, &bn0.beta};
    for (auto& blk : blocks) {
        out.push_back(&blk.kernel);
        out.push_back(&blk.bias);
        out.push_back(&blk.bn.gamma);
        out.push_back(&blk.bn.beta);
    }
    out.push_back(&out_kernel);
    out.push_back(&out_bias);
    return out;
}

template <typename T>
std::vector<BatchNormState<T>*> GeneratorModel<T>::bn_registry() {
    std::vector<BatchNormState<T>*> out{&bn0};
    for (auto& blk : blocks) out.push_back(&blk.bn);
    return out;
}

template <typename T>
std::vector<std::pair<std::string, Tensor<T>*>> GeneratorModel<T>::named_tensors() {
    std::vector<std::pair<std::string, Tensor<T>*>> out;
    out.emplace_back("fc/weight", &fc_w);
    out.emplace_back("fc/bias", &fc_b);
    out.emplace_back("bn0/gamma", &bn0.gamma);
    out.emplace_back("bn0/beta", &bn0.beta);
    out.emplace_back("bn0/running_mean", &bn0.running_mean);
    out.emplace_back("bn0/running_var", &bn0.running_var);
    for (std::size_t i = 0; i < blocks.size(); ++i) {
        const std::string p = "block" + std::to_string(i) + "/";
        out.emplace_back(p + "kernel", &blocks[i].kernel);
        out.emplace_back(p + "bias", &blocks[i].bias);
        out.emplace_back(p + "bn/gamma", &blocks[i].bn.gamma);
        out.emplace_back(p + "bn/beta", &blocks[i].bn.beta);
        out.emplace_back(p + "bn/running_mean", &blocks[i].bn.running_mean);
        out.emplace_back(p + "bn/running_var", &blocks[i].bn.running_var);
    }
    out.emplace_back("out/kernel", &out_kernel);
    out.emplace_back("out/bias", &out_bias);
    return out;
}

template <typename T>
void GeneratorModel<T>::set_requires_grad(bool on) {
    for (Tensor<T>* p : parameters()) p->set_requires_grad(on);
}

template <typename T>
GeneratorModel<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed) {
    if (cfg.latent_dim < 1) throw ConfigError("generator: latent_dim must be positive");
    if (cfg.class_count < 1) throw ConfigError("generator: class_count must be positive");
    if (cfg.base_size < 1 || cfg.base_channels < 1)
        throw ConfigError("generator: base size/channels must be positive");
    int n_blocks = 0;
    int s = cfg.base_size;
    while (s < cfg.target_size) {
        s *= 2;
        ++n_blocks;
    }
    if (s != cfg.target_size)
        throw ConfigError("generator: target_size " + std::to_string(cfg.target_size) +
                          " is not base_size " + std::to_string(cfg.base_size) +
                          " times a power of 2");

    GeneratorModel<T> gen;
    gen.cfg = cfg;
    Rng rng(seed);
    const std::size_t in_dim = static_cast<std::size_t>(cfg.latent_dim + cfg.class_count);
    const std::size_t base_ch = static_cast<std::size_t>(cfg.base_channels);
    const std::size_t base_sp = static_cast<std::size_t>(cfg.base_size);
    gen.bn0 = BatchNormState<T>(base_ch);
    gen.fc_w = Tensor<T>::zeros({in_dim, base_ch * base_sp * base_sp});
    init_he(gen.fc_w, in_dim, rng);
    gen.fc_b = Tensor<T>::zeros({base_ch * base_sp * base_sp});

    // intermediate blocks keep base_channels; the last one narrows to
    // min(base_channels, 64) before the output convolution
    std::size_t in_ch = base_ch;
    for (int i = 0; i < n_blocks; ++i) {
        const std::size_t out_ch =
            (i == n_blocks - 1) ? std::min<std::size_t>(base_ch, 64) : base_ch;
        GenBlock<T> blk(out_ch, in_ch, 3);
        init_he(blk.kernel, in_ch * 9, rng);
        gen.blocks.push_back(std::move(blk));
        in_ch = out_ch;
    }
    gen.out_kernel = Tensor<T>::zeros({static_cast<std::size_t>(cfg.out_channels), in_ch, 3, 3});
    init_he(gen.out_kernel, in_ch * 9, rng);
    gen.out_bias = Tensor<T>::zeros({static_cast<std::size_t>(cfg.out_channels)});
    return gen;
}

template <typename T>
Var generator_forward(Tape<T>& tape, GeneratorModel<T>& gen, Var z, const std::vector<int>& labels,
                      Mode mode) {
    const Tensor<T>& zv = tape.value(z);
    const std::size_t ld = static_cast<std::size_t>(gen.cfg.latent_dim);
    if (zv.shape.size() != 2 || zv.shape[1] != ld)
        throw ShapeError("generator: latent batch " + shape_str(zv.shape) + " does not match dim " +
                         std::to_string(ld));
    const std::size_t bsz = zv.shape[0];
    if (labels.size() != bsz)
        throw ShapeError("generator: label count " + std::to_string(labels.size()) +
                         " does not match batch " + std::to_string(bsz));
    const int k = gen.cfg.class_count;
    Tensor<T> onehot({bsz, static_cast<std::size_t>(k)});
    for (std::size_t i = 0; i < bsz; ++i) {
        if (labels[i] < 0 || labels[i] >= k)
            throw ParamError("generator: label " + std::to_string(labels[i]) +
                             " out of range for K=" + std::to_string(k));
        onehot.data[i * static_cast<std::size_t>(k) + static_cast<std::size_t>(labels[i])] = T(1);
    }

    Var cat = tape.concat_cols(z, tape.constant(std::move(onehot)));
    Var h = tape.linear(cat, tape.leaf(&gen.fc_w), tape.leaf(&gen.fc_b));
    const std::size_t bsp = static_cast<std::size_t>(gen.cfg.base_size);
    h = tape.reshape(h, {bsz, static_cast<std::size_t>(gen.cfg.base_channels), bsp, bsp});
    const bool update = mode == Mode::Train;
    h = batchnorm_forward(tape, h, gen.bn0, mode, update, nullptr);
    h = tape.leaky_relu(h, T(0.2));
    for (auto& blk : gen.blocks) {
        h = tape.upsample2x(h);
        h = tape.conv2d(h, tape.leaf(&blk.kernel), tape.leaf(&blk.bias), 1, 1);
        h = batchnorm_forward(tape, h, blk.bn, mode, update, nullptr);
        h = tape.leaky_relu(h, T(0.2));
    }
    h = tape.conv2d(h, tape.leaf(&gen.out_kernel), tape.leaf(&gen.out_bias), 1, 1);
    return tape.tanh_op(h);
}

template <typename T>
Var generator_forward(Tape<T>& tape, GeneratorModel<T>& gen, const Tensor<T>& z,
                      const std::vector<int>& labels, Mode mode) {
    return generator_forward(tape, gen, tape.constant(z), labels, mode);
}

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

template <typename T>
Tensor<T> sample_latent(const LatentSpec& spec, std::size_t batch, Rng& rng) {
    return Tensor<T>::randn({batch, static_cast<std::size_t>(spec.dim)}, rng);
}

std::vector<int> sample_labels(const LabelPrior& prior, std::size_t batch, Rng& rng) {
    if (prior.subset.empty()) throw ParamError("label prior: empty class subset");
    std::vector<int> out(batch);
    for (std::size_t i = 0; i < batch; ++i)
        out[i] = prior.subset[static_cast<std::size_t>(rng.below(prior.subset.size()))];
    return out;
}

template struct BatchNormState<float>;
template struct BatchNormState<double>;
template struct ClassifierModel<float>;
template struct ClassifierModel<double>;
template struct GeneratorModel<float>;
template struct GeneratorModel<double>;

template Var batchnorm_forward<float>(Tape<float>&, Var, BatchNormState<float>&, Mode, bool,
                                      std::vector<BnCapture>*);
template Var batchnorm_forward<double>(Tape<double>&, Var, BatchNormState<double>&, Mode, bool,
                                       std::vector<BnCapture>*);
template ClassifierModel<float> build_classifier<float>(const ClassifierConfig&, std::uint64_t);
template ClassifierModel<double> build_classifier<double>(const ClassifierConfig&, std::uint64_t);
template Var classifier_forward<float>(Tape<float>&, ClassifierModel<float>&, Var, Mode,
                                       std::vector<BnCapture>*);
template Var classifier_forward<double>(Tape<double>&, ClassifierModel<double>&, Var, Mode,
                                        std::vector<BnCapture>*);
template Var classifier_forward<float>(Tape<float>&, ClassifierModel<float>&, const Tensor<float>&,
                                       Mode, std::vector<BnCapture>*);
template Var classifier_forward<double>(Tape<double>&, ClassifierModel<double>&,
                                        const Tensor<double>&, Mode, std::vector<BnCapture>*);
template GeneratorModel<float> build_generator<float>(const GeneratorConfig&, std::uint64_t);
template GeneratorModel<double> build_generator<double>(const GeneratorConfig&, std::uint64_t);
template Var generator_forward<float>(Tape<float>&, GeneratorModel<float>&, Var,
                                      const std::vector<int>&, Mode);
template Var generator_forward<double>(Tape<double>&, GeneratorModel<double>&, Var,
                                       const std::vector<int>&, Mode);
template Var generator_forward<float>(Tape<float>&, GeneratorModel<float>&, const Tensor<float>&,
                                      const std::vector<int>&, Mode);
template Var generator_forward<double>(Tape<double>&, GeneratorModel<double>&,
                                       const Tensor<double>&, const std::vector<int>&, Mode);
template Tensor<float> sample_latent<float>(const LatentSpec&, std::size_t, Rng&);
template Tensor<double> sample_latent<double>(const LatentSpec&, std::size_t, Rng&);

} // namespace gdfd
