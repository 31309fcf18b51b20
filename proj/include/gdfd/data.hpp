#pragma once

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "gdfd/nn.hpp"
#include "gdfd/tensor.hpp"

namespace gdfd {

// ---------------------------------------------------------------------------
// Datasets
// ---------------------------------------------------------------------------

struct Dataset {
    Tensorf images; // N x C x H x W, values in [-1, 1]
    std::vector<int> labels;
    int class_count = 0;
    std::string split;

    std::size_t size() const { return labels.size(); }
    // gather a batch (images + labels) by sample index
    Tensorf gather(const std::vector<std::size_t>& idx) const;
    std::vector<int> gather_labels(const std::vector<std::size_t>& idx) const;
    void validate() const;
};

// Procedural dataset of K geometric archetype classes with seeded jitter
// and pixel noise. Classes are balanced to within one sample.
std::pair<Dataset, Dataset> gen_toy_dataset(std::uint64_t seed, std::size_t n_train,
                                            std::size_t n_test, int class_count = 10,
                                            int size = 16, int channels = 1);

// IDX (MNIST-style) reader; pixels map [0,255] -> [-1,1] via x/127.5 - 1.
Dataset load_idx(const std::string& images_path, const std::string& labels_path);

// ---------------------------------------------------------------------------
// Image export
// ---------------------------------------------------------------------------

enum class ImageFormat { Pgm, Ppm };

// Binary P5/P6, maxval 255; value mapping round half-up of (x+1)/2*255,
// clamped. image is C x H x W with C matching the format.
void write_image(const Tensorf& image, const std::string& path, ImageFormat format);

// Tiles N x C x H x W into a ceil(N/cols) x cols grid image (missing cells
// filled with -1) and writes it as one file.
void write_image_grid(const Tensorf& images, std::size_t cols, const std::string& path,
                      ImageFormat format);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

struct CheckpointTensor {
    std::string name;
    std::uint8_t dtype = 0; // 0 = f32, 1 = f64
    Shape dims;
    std::vector<float> f32;
    std::vector<double> f64;
};

struct Checkpoint {
    std::vector<std::pair<std::string, std::string>> metadata; // insertion order
    std::vector<CheckpointTensor> tensors;

    void set_meta(const std::string& key, const std::string& value);
    const std::string* find_meta(const std::string& key) const;
    // missing key -> data error
    const std::string& meta(const std::string& key) const;

    void add(const std::string& name, const Tensor<float>& t);
    void add(const std::string& name, const Tensor<double>& t);
    const CheckpointTensor* find(const std::string& name) const;
    // missing name or dtype mismatch -> data error
    Tensorf get_f32(const std::string& name) const;
    Tensord get_f64(const std::string& name) const;
};

void save_checkpoint(const Checkpoint& ckpt, const std::string& path);
Checkpoint load_checkpoint(const std::string& path);

// Model snapshots: architecture config in metadata, weights and BN buffers
// as named tensors. Loading rebuilds the model and restores values
// bit-exactly.
void save_classifier(ClassifierModel<float>& model, const std::string& path,
                     std::vector<std::pair<std::string, std::string>> extra_meta = {});
ClassifierModel<float> load_classifier(const std::string& path);
void save_generator(GeneratorModel<float>& gen, const std::string& path,
                    std::vector<std::pair<std::string, std::string>> extra_meta = {});
GeneratorModel<float> load_generator(const std::string& path);

// ---------------------------------------------------------------------------
// Metrics CSV
// ---------------------------------------------------------------------------

// Writes header + rows, each cell formatted %.17g so reruns are
// byte-identical.
void write_csv(const std::string& path, const std::string& header,
               const std::vector<std::vector<double>>& rows);

// ---------------------------------------------------------------------------
// Run configuration
// ---------------------------------------------------------------------------

struct RunConfig {
    std::uint64_t seed = 0;

    // dataset
    int classes = 10;
    int image_size = 16;
    int channels = 1;
    int train_count = 5000;
    int test_count = 1000;

    // classifier widths
    double teacher_width = 1.0;
    double student_width = 0.5;

    // supervised training (teacher and student baselines)
    long teacher_steps = 2000;
    int teacher_batch = 32;
    double teacher_lr = 0.05;

    // generator architecture
    int latent_dim = 32;
    int gen_base_size = 4;
    int gen_base_channels = 16;

    // generator training
    long gen_steps = 1200;
    int gen_batch = 8;
    double gen_lr = 0.001;

    // loss weights
    double lambda_t = 6e-3;
    double lambda_l2 = 1.5e-5;
    double lambda_s = 10.0;
    double tau = 3.0;

    // Adam
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;

    // distillation
    long distill_steps = 3000;
    int distill_batch = 32;
    double distill_lr = 0.05;
    long warmup_steps = 200;
    long decay_interval = 100;
    double decay = 0.977;
    double momentum = 0.9;
    long eval_every = 200;

    // statistic estimation
    int stats_per_class = 100;
    long synth_steps = 600;
    int synth_batch = 32;
    double synth_lr = 0.05;

    // ensembles
    int generators = 1;
    int workers = 1;
};

// `key = value` lines with # comments; precedence CLI override > file >
// default. Unknown keys and malformed values are rejected with the line
// number (overrides report "command line" instead).
RunConfig parse_config(const std::string& file_text,
                       const std::vector<std::pair<std::string, std::string>>& overrides = {});

// Convenience: read the file (empty path -> defaults) then apply overrides.
RunConfig load_config(const std::string& path,
                      const std::vector<std::pair<std::string, std::string>>& overrides = {});

// All config keys in declaration order with %.17g-formatted current values;
// used for run manifests and round-trip tests.
std::vector<std::pair<std::string, std::string>> config_items(const RunConfig& cfg);

} // namespace gdfd
