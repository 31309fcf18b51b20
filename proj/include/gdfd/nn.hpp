#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gdfd/tensor.hpp"

namespace gdfd {

enum class Mode { Train, Eval };

// Learned scale/shift plus running moments of one batch-norm layer. The
// batch moments captured by the most recent train-mode forward are kept
// both as plain values (for statistic estimation) and as tape variables
// (via BnCapture) so losses can differentiate through them.
template <typename T>
struct BatchNormState {
    Tensor<T> gamma, beta;
    Tensor<T> running_mean, running_var;
    Tensor<T> last_batch_mean, last_batch_var;
    T eps = T(1e-5);
    T momentum = T(0.9);

    BatchNormState() : BatchNormState(0) {}
    explicit BatchNormState(std::size_t channels)
        : gamma(Tensor<T>::full({channels}, T(1))),
          beta(Tensor<T>::zeros({channels})),
          running_mean(Tensor<T>::zeros({channels})),
          running_var(Tensor<T>::full({channels}, T(1))),
          last_batch_mean(Tensor<T>::zeros({channels})),
          last_batch_var(Tensor<T>::zeros({channels})) {}

    std::size_t channels() const { return gamma.dim(0); }
};

struct BnCapture {
    Var mean;
    Var var;
};

// One BN application. Train mode normalizes by batch moments (and appends
// them to `captures` when given); running buffers move by
// r <- momentum*r + (1-momentum)*batch only when update_running is set.
// Eval mode normalizes by the running buffers and captures nothing.
template <typename T>
Var batchnorm_forward(Tape<T>& tape, Var x, BatchNormState<T>& bn, Mode mode, bool update_running,
                      std::vector<BnCapture>* captures);

// ---------------------------------------------------------------------------
// Classifier (teacher / student)
// ---------------------------------------------------------------------------

struct ClassifierConfig {
    double width = 1.0; // multiplies the per-block base channel counts
    int class_count = 10;
    int in_channels = 1;
    int input_size = 16; // 16 or 32
};

template <typename T>
struct ConvBlock {
    Tensor<T> kernel, bias;
    BatchNormState<T> bn;

    ConvBlock(std::size_t out_ch, std::size_t in_ch, std::size_t k)
        : kernel(Tensor<T>::zeros({out_ch, in_ch, k, k})), bias(Tensor<T>::zeros({out_ch})),
          bn(out_ch) {}
};

template <typename T>
struct ClassifierModel {
    ClassifierConfig cfg;
    bool frozen = false;
    std::vector<ConvBlock<T>> blocks;
    Tensor<T> head_w, head_b;

    std::vector<Tensor<T>*> parameters();
    std::vector<BatchNormState<T>*> bn_registry();
    // (name, tensor) pairs covering parameters and BN buffers, stable order
    std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();
    void set_requires_grad(bool on);
    void freeze();
};

template <typename T>
ClassifierModel<T> build_classifier(const ClassifierConfig& cfg, std::uint64_t seed);

template <typename T>
Var classifier_forward(Tape<T>& tape, ClassifierModel<T>& model, Var images, Mode mode,
                       std::vector<BnCapture>* captures = nullptr);

template <typename T>
Var classifier_forward(Tape<T>& tape, ClassifierModel<T>& model, const Tensor<T>& images,
                       Mode mode, std::vector<BnCapture>* captures = nullptr);

// ---------------------------------------------------------------------------
// Conditional generator
// ---------------------------------------------------------------------------

struct GeneratorConfig {
    int latent_dim = 1024;
    int class_count = 10; // width of the one-hot conditioning (1 for per-class)
    int out_channels = 3;
    int target_size = 32;
    int base_size = 8;      // spatial size after the initial linear+reshape
    int base_channels = 128;
};

template <typename T>
struct GenBlock {
    Tensor<T> kernel, bias;
    BatchNormState<T> bn;

    GenBlock(std::size_t out_ch, std::size_t in_ch, std::size_t k)
        : kernel(Tensor<T>::zeros({out_ch, in_ch, k, k})), bias(Tensor<T>::zeros({out_ch})),
          bn(out_ch) {}
};

template <typename T>
struct GeneratorModel {
    GeneratorConfig cfg;
    Tensor<T> fc_w, fc_b;
    BatchNormState<T> bn0;
    std::vector<GenBlock<T>> blocks; // upsample2x + conv + BN + LeakyReLU each
    Tensor<T> out_kernel, out_bias;

    std::vector<Tensor<T>*> parameters();
    std::vector<BatchNormState<T>*> bn_registry();
    std::vector<std::pair<std::string, Tensor<T>*>> named_tensors();
    void set_requires_grad(bool on);
};

template <typename T>
GeneratorModel<T> build_generator(const GeneratorConfig& cfg, std::uint64_t seed);

// labels are local conditioning indices in [0, cfg.class_count)
template <typename T>
Var generator_forward(Tape<T>& tape, GeneratorModel<T>& gen, Var z, const std::vector<int>& labels,
                      Mode mode);

template <typename T>
Var generator_forward(Tape<T>& tape, GeneratorModel<T>& gen, const Tensor<T>& z,
                      const std::vector<int>& labels, Mode mode);

// ---------------------------------------------------------------------------
// Priors
// ---------------------------------------------------------------------------

struct LatentSpec {
    int dim = 1024; // standard normal prior
};

template <typename T>
Tensor<T> sample_latent(const LatentSpec& spec, std::size_t batch, Rng& rng);

struct LabelPrior {
    std::vector<int> subset; // uniform over these labels
};

std::vector<int> sample_labels(const LabelPrior& prior, std::size_t batch, Rng& rng);

extern template struct BatchNormState<float>;
extern template struct BatchNormState<double>;
extern template struct ClassifierModel<float>;
extern template struct ClassifierModel<double>;
extern template struct GeneratorModel<float>;
extern template struct GeneratorModel<double>;

} // namespace gdfd
