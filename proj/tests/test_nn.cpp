#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "gdfd/nn.hpp"

using namespace gdfd;

namespace {

template <typename T>
bool tensors_equal(const Tensor<T>& a, const Tensor<T>& b) {
    return a.shape == b.shape &&
           std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(T)) == 0;
}

template <typename T, typename M>
std::vector<Tensor<T>> snapshot(M& model) {
    std::vector<Tensor<T>> out;
    for (auto& [name, t] : model.named_tensors()) out.push_back(*t);
    return out;
}

} // namespace

TEST_CASE("batchnorm_forward worked examples") {
    SUBCASE("captured moments and running update") {
        BatchNormState<double> bn(1);
        Tape<double> tape;
        Var x = tape.constant(Tensord({1, 1, 1, 2}, {1, 3}));
        std::vector<BnCapture> caps;
        (void)batchnorm_forward(tape, x, bn, Mode::Train, true, &caps);
        REQUIRE(caps.size() == 1);
        CHECK(tape.value(caps[0].mean).data[0] == doctest::Approx(2.0));
        CHECK(tape.value(caps[0].var).data[0] == doctest::Approx(1.0));
        CHECK(bn.last_batch_mean.data[0] == doctest::Approx(2.0));
        CHECK(bn.last_batch_var.data[0] == doctest::Approx(1.0));
        // running (0,1), momentum 0.9, batch (2,1) -> (0.2, 1.0)
        CHECK(bn.running_mean.data[0] == doctest::Approx(0.2));
        CHECK(bn.running_var.data[0] == doctest::Approx(1.0));
    }
    SUBCASE("train without update leaves running untouched") {
        BatchNormState<double> bn(1);
        Tape<double> tape;
        Var x = tape.constant(Tensord({1, 1, 1, 2}, {1, 3}));
        (void)batchnorm_forward(tape, x, bn, Mode::Train, false, nullptr);
        CHECK(bn.running_mean.data[0] == 0.0);
        CHECK(bn.running_var.data[0] == 1.0);
    }
    SUBCASE("eval normalizes by running stats and captures nothing") {
        BatchNormState<double> bn(1);
        bn.running_mean.data[0] = 2.0;
        bn.running_var.data[0] = 1.0;
        Tape<double> tape;
        Var x = tape.constant(Tensord({1, 1, 1, 2}, {1, 3}));
        std::vector<BnCapture> caps;
        Var y = batchnorm_forward(tape, x, bn, Mode::Eval, true, &caps);
        CHECK(caps.empty());
        CHECK(tape.value(y).data[0] == doctest::Approx(-1.0).epsilon(1e-4));
        CHECK(tape.value(y).data[1] == doctest::Approx(1.0).epsilon(1e-4));
        CHECK(bn.running_mean.data[0] == 2.0);
    }
    SUBCASE("standardized batch passes through with gamma 1 beta 0") {
        BatchNormState<double> bn(1);
        Tape<double> tape;
        // mean 0, variance 1 channel
        Var x = tape.constant(Tensord({1, 1, 1, 2}, {-1, 1}));
        Var y = batchnorm_forward(tape, x, bn, Mode::Train, true, nullptr);
        CHECK(tape.value(y).data[0] == doctest::Approx(-1.0).epsilon(1e-4));
        CHECK(tape.value(y).data[1] == doctest::Approx(1.0).epsilon(1e-4));
    }
}

TEST_CASE("classifier construction contract") {
    ClassifierConfig cfg;
    cfg.width = 1.0;
    cfg.class_count = 10;
    cfg.in_channels = 1;
    cfg.input_size = 16;

    SUBCASE("deterministic initialization") {
        auto a = build_classifier<float>(cfg, 7);
        auto b = build_classifier<float>(cfg, 7);
        auto na = a.named_tensors();
        auto nb = b.named_tensors();
        REQUIRE(na.size() == nb.size());
        for (std::size_t i = 0; i < na.size(); ++i) {
            CHECK(na[i].first == nb[i].first);
            CHECK(tensors_equal(*na[i].second, *nb[i].second));
        }
        auto c = build_classifier<float>(cfg, 8);
        CHECK_FALSE(tensors_equal(*c.named_tensors()[0].second, *na[0].second));
    }
    SUBCASE("fresh running moments are (0, 1)") {
        auto m = build_classifier<float>(cfg, 7);
        REQUIRE(m.bn_registry().size() == 3);
        for (auto* bn : m.bn_registry()) {
            for (float v : bn->running_mean.data) CHECK(v == 0.f);
            for (float v : bn->running_var.data) CHECK(v == 1.f);
        }
    }
    SUBCASE("channel widths follow the multiplier") {
        auto m = build_classifier<float>(cfg, 7);
        CHECK(m.blocks[0].kernel.shape == Shape{12, 1, 3, 3});
        CHECK(m.blocks[1].kernel.shape == Shape{24, 12, 3, 3});
        CHECK(m.blocks[2].kernel.shape == Shape{48, 24, 3, 3});
        CHECK(m.head_w.shape == Shape{48, 10});
        ClassifierConfig half = cfg;
        half.width = 0.5;
        auto s = build_classifier<float>(half, 7);
        CHECK(s.blocks[0].kernel.shape == Shape{6, 1, 3, 3});
        CHECK(s.blocks[2].kernel.shape == Shape{24, 12, 3, 3});
    }
    SUBCASE("config validation") {
        ClassifierConfig bad = cfg;
        bad.input_size = 24;
        CHECK_THROWS_AS(build_classifier<float>(bad, 1), ConfigError);
        bad = cfg;
        bad.class_count = 1;
        CHECK_THROWS_AS(build_classifier<float>(bad, 1), ConfigError);
    }
}

TEST_CASE("classifier forward contract") {
    ClassifierConfig cfg;
    cfg.input_size = 16;
    auto model = build_classifier<float>(cfg, 3);
    Rng rng(99);
    Tensorf batch = Tensorf::randn({4, 1, 16, 16}, rng);

    SUBCASE("logit shape") {
        Tape<float> tape;
        Var logits = classifier_forward(tape, model, batch, Mode::Eval);
        CHECK(tape.value(logits).shape == Shape{4, 10});
    }
    SUBCASE("eval leaves running stats unchanged, train captures one pair per layer") {
        auto before = snapshot<float>(model);
        Tape<float> tape;
        (void)classifier_forward(tape, model, batch, Mode::Eval);
        auto after = snapshot<float>(model);
        for (std::size_t i = 0; i < before.size(); ++i) CHECK(tensors_equal(before[i], after[i]));

        std::vector<BnCapture> caps;
        Tape<float> tape2;
        (void)classifier_forward(tape2, model, batch, Mode::Train, &caps);
        CHECK(caps.size() == 3);
        // unfrozen train-mode forward moved the running buffers
        bool moved = false;
        for (auto* bn : model.bn_registry())
            for (float v : bn->running_mean.data) moved = moved || v != 0.f;
        CHECK(moved);
    }
    SUBCASE("frozen teacher gets no gradient and no stat updates") {
        auto teacher = build_classifier<float>(cfg, 3);
        teacher.freeze();
        auto before = snapshot<float>(teacher);
        Tape<float> tape;
        Var logits = classifier_forward(tape, teacher, batch, Mode::Train);
        tape.backward(tape.cross_entropy(logits, {0, 1, 2, 3}));
        auto after = snapshot<float>(teacher);
        for (std::size_t i = 0; i < before.size(); ++i) CHECK(tensors_equal(before[i], after[i]));
        for (Tensorf* p : teacher.parameters()) CHECK(p->grad.empty());
    }
    SUBCASE("train mode needs batch of at least 2") {
        Tape<float> tape;
        Tensorf one = Tensorf::zeros({1, 1, 16, 16});
        CHECK_THROWS_AS(classifier_forward(tape, model, one, Mode::Train), ParamError);
    }
    SUBCASE("input shape mismatch") {
        Tape<float> tape;
        Tensorf wrong = Tensorf::zeros({4, 3, 16, 16});
        CHECK_THROWS_AS(classifier_forward(tape, model, wrong, Mode::Eval), ShapeError);
    }
}

TEST_CASE("generator construction follows the architecture table") {
    SUBCASE("32x32 conditional generator") {
        GeneratorConfig cfg; // defaults: 1024 latent, K=10, C=3, 32 from 8x8x128
        auto g = build_generator<float>(cfg, 5);
        CHECK(g.fc_w.shape == Shape{1034, 8 * 8 * 128});
        REQUIRE(g.blocks.size() == 2);
        CHECK(g.blocks[0].kernel.shape == Shape{128, 128, 3, 3});
        CHECK(g.blocks[1].kernel.shape == Shape{64, 128, 3, 3});
        CHECK(g.out_kernel.shape == Shape{3, 64, 3, 3});
        Rng rng(2);
        Tensorf z = sample_latent<float>({cfg.latent_dim}, 2, rng);
        Tape<float> tape;
        Var img = generator_forward(tape, g, z, {0, 9}, Mode::Train);
        CHECK(tape.value(img).shape == Shape{2, 3, 32, 32});
        for (float v : tape.value(img).data) {
            CHECK(v > -1.f);
            CHECK(v < 1.f);
        }
    }
    SUBCASE("per-class 16x16 generator") {
        GeneratorConfig cfg;
        cfg.class_count = 1;
        cfg.out_channels = 1;
        cfg.target_size = 16;
        auto g = build_generator<float>(cfg, 5);
        REQUIRE(g.blocks.size() == 1);
        CHECK(g.blocks[0].kernel.shape == Shape{64, 128, 3, 3});
        CHECK(g.fc_w.shape == Shape{1025, 8 * 8 * 128});
        Rng rng(2);
        Tensorf z = sample_latent<float>({cfg.latent_dim}, 2, rng);
        Tape<float> tape;
        Var img = generator_forward(tape, g, z, {0, 0}, Mode::Train);
        CHECK(tape.value(img).shape == Shape{2, 1, 16, 16});
    }
    SUBCASE("deep 64-channel variant keeps its width") {
        GeneratorConfig cfg;
        cfg.latent_dim = 512;
        cfg.base_size = 7;
        cfg.base_channels = 64;
        cfg.target_size = 7 * 32; // five upsampling blocks
        auto g = build_generator<float>(cfg, 5);
        REQUIRE(g.blocks.size() == 5);
        for (auto& blk : g.blocks) CHECK(blk.kernel.shape == Shape{64, 64, 3, 3});
    }
    SUBCASE("bad size factorization") {
        GeneratorConfig cfg;
        cfg.target_size = 24;
        CHECK_THROWS_AS(build_generator<float>(cfg, 1), ConfigError);
        cfg.target_size = 4; // below base_size
        CHECK_THROWS_AS(build_generator<float>(cfg, 1), ConfigError);
    }
}

TEST_CASE("generator forward contract") {
    GeneratorConfig cfg;
    cfg.latent_dim = 32;
    cfg.class_count = 10;
    cfg.out_channels = 1;
    cfg.target_size = 16;
    cfg.base_size = 4;
    cfg.base_channels = 16;
    auto g = build_generator<float>(cfg, 11);
    Rng rng(4);
    Tensorf z = sample_latent<float>({cfg.latent_dim}, 3, rng);

    SUBCASE("determinism across tapes") {
        Tape<float> t1, t2;
        const auto& a = t1.value(generator_forward(t1, g, z, {1, 2, 3}, Mode::Train));
        const auto& b = t2.value(generator_forward(t2, g, z, {1, 2, 3}, Mode::Train));
        CHECK(std::memcmp(a.data.data(), b.data.data(), a.data.size() * sizeof(float)) == 0);
    }
    SUBCASE("label out of range") {
        Tape<float> tape;
        CHECK_THROWS_AS(generator_forward(tape, g, z, {0, 10, 1}, Mode::Train), ParamError);
    }
    SUBCASE("conditioning width is latent_dim + K") {
        CHECK(g.fc_w.dim(0) == 32 + 10);
    }
    SUBCASE("changing the label changes the image") {
        Tape<float> tape;
        const auto a = tape.value(generator_forward(tape, g, z, {0, 0, 0}, Mode::Train));
        const auto b = tape.value(generator_forward(tape, g, z, {7, 7, 7}, Mode::Train));
        double diff = 0;
        for (std::size_t i = 0; i < a.numel(); ++i)
            diff += (a.data[i] - b.data[i]) * (a.data[i] - b.data[i]);
        CHECK(diff > 0.0);
    }
    SUBCASE("per-member parameter identity is disjoint") {
        auto g2 = build_generator<float>(cfg, 12);
        for (std::size_t i = 0; i < g.parameters().size(); ++i)
            CHECK(g.parameters()[i] != g2.parameters()[i]);
    }
}

TEST_CASE("latent and label priors") {
    SUBCASE("latent moments approach the standard normal") {
        Rng rng(1234);
        LatentSpec spec{8};
        Tensord z = sample_latent<double>(spec, 20000, rng);
        for (std::size_t d = 0; d < 8; ++d) {
            double m = 0;
            for (std::size_t i = 0; i < 20000; ++i) m += z.data[i * 8 + d];
            m /= 20000;
            double v = 0;
            for (std::size_t i = 0; i < 20000; ++i) {
                const double c = z.data[i * 8 + d] - m;
                v += c * c;
            }
            v /= 20000;
            CHECK(std::abs(m) < 0.03);
            CHECK(std::abs(v - 1.0) < 0.05);
        }
    }
    SUBCASE("labels are uniform over the subset") {
        Rng rng(77);
        LabelPrior prior{{2, 5, 7}};
        auto labels = sample_labels(prior, 3000, rng);
        int counts[3] = {0, 0, 0};
        for (int l : labels) {
            const bool in = l == 2 || l == 5 || l == 7;
            CHECK(in);
            if (l == 2) ++counts[0];
            if (l == 5) ++counts[1];
            if (l == 7) ++counts[2];
        }
        // 3-sigma binomial bound around 1000
        const double sigma = std::sqrt(3000.0 * (1.0 / 3.0) * (2.0 / 3.0));
        for (int c : counts) CHECK(std::abs(c - 1000.0) < 3.0 * sigma);
        CHECK_THROWS_AS(sample_labels(LabelPrior{{}}, 4, rng), ParamError);
    }
}
