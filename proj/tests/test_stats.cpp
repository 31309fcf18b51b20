#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <vector>

#include "gdfd/stats.hpp"

using namespace gdfd;

namespace {

ClassifierModel<float> toy_teacher(std::uint64_t seed, bool frozen) {
    ClassifierConfig cfg;
    cfg.width = 0.25;
    cfg.class_count = 4;
    cfg.input_size = 16;
    auto model = build_classifier<float>(cfg, seed);
    if (frozen) model.freeze();
    return model;
}

std::vector<std::vector<float>> snapshot(ClassifierModel<float>& m) {
    std::vector<std::vector<float>> out;
    for (auto& [name, t] : m.named_tensors()) out.push_back(t->data);
    return out;
}

bool targets_equal(const MomentTargets<float>& a, const MomentTargets<float>& b) {
    if (a.layers.size() != b.layers.size()) return false;
    for (std::size_t i = 0; i < a.layers.size(); ++i)
        if (a.layers[i].mean != b.layers[i].mean || a.layers[i].var != b.layers[i].var)
            return false;
    return true;
}

// Reference forward pass written as plain loops. Loop nests and reduction
// orders follow the canonical orders the library pins down, so the moments
// must agree bit for bit, not just approximately.
struct RefActivations {
    std::vector<std::vector<float>> mean, var;
};

RefActivations reference_moments(ClassifierModel<float>& m, const Tensorf& batch) {
    const long B = static_cast<long>(batch.shape[0]);
    std::vector<float> x = batch.data;
    long C = static_cast<long>(batch.shape[1]);
    long H = static_cast<long>(batch.shape[2]);
    long W = static_cast<long>(batch.shape[3]);
    RefActivations out;

    for (auto& blk : m.blocks) {
        const long F = static_cast<long>(blk.kernel.shape[0]);
        const long ks = 3, pad = 1;
        std::vector<float> conv(static_cast<std::size_t>(B * F * H * W));
        for (long b = 0; b < B; ++b)
            for (long f = 0; f < F; ++f) {
                float* oplane = conv.data() + static_cast<std::size_t>((b * F + f) * H * W);
                const float bias = blk.bias.data[static_cast<std::size_t>(f)];
                for (long i = 0; i < H * W; ++i) oplane[i] = bias;
                for (long cc = 0; cc < C; ++cc) {
                    const float* xplane = x.data() + static_cast<std::size_t>((b * C + cc) * H * W);
                    const float* kplane =
                        blk.kernel.data.data() + static_cast<std::size_t>((f * C + cc) * ks * ks);
                    for (long ky = 0; ky < ks; ++ky)
                        for (long kx = 0; kx < ks; ++kx) {
                            const float wv = kplane[ky * ks + kx];
                            for (long oy = 0; oy < H; ++oy) {
                                const long iy = oy - pad + ky;
                                if (iy < 0 || iy >= H) continue;
                                for (long ox = 0; ox < W; ++ox) {
                                    const long ix = ox - pad + kx;
                                    if (ix < 0 || ix >= W) continue;
                                    oplane[oy * W + ox] += wv * xplane[iy * W + ix];
                                }
                            }
                        }
                }
            }

        const long sp = H * W;
        const float invn = 1.0f / static_cast<float>(B * sp);
        std::vector<float> mean(static_cast<std::size_t>(F)), var(static_cast<std::size_t>(F));
        for (long cc = 0; cc < F; ++cc) {
            float acc = 0;
            for (long b = 0; b < B; ++b) {
                const float* p = conv.data() + static_cast<std::size_t>((b * F + cc) * sp);
                for (long i = 0; i < sp; ++i) acc += p[i];
            }
            mean[static_cast<std::size_t>(cc)] = acc * invn;
        }
        for (long cc = 0; cc < F; ++cc) {
            const float mu = mean[static_cast<std::size_t>(cc)];
            float acc = 0;
            for (long b = 0; b < B; ++b) {
                const float* p = conv.data() + static_cast<std::size_t>((b * F + cc) * sp);
                for (long i = 0; i < sp; ++i) {
                    const float d = p[i] - mu;
                    acc += d * d;
                }
            }
            var[static_cast<std::size_t>(cc)] = acc * invn;
        }
        out.mean.push_back(mean);
        out.var.push_back(var);

        // normalize with the just-computed batch moments, activate, pool
        std::vector<float> next(static_cast<std::size_t>(B * F * (H / 2) * (W / 2)));
        for (long b = 0; b < B; ++b)
            for (long cc = 0; cc < F; ++cc) {
                const float inv = 1.0f / std::sqrt(var[static_cast<std::size_t>(cc)] + blk.bn.eps);
                const float g = blk.bn.gamma.data[static_cast<std::size_t>(cc)] * inv;
                const float shift = blk.bn.beta.data[static_cast<std::size_t>(cc)] -
                                    mean[static_cast<std::size_t>(cc)] * g;
                std::vector<float> act(static_cast<std::size_t>(sp));
                const float* p = conv.data() + static_cast<std::size_t>((b * F + cc) * sp);
                for (long i = 0; i < sp; ++i) {
                    const float v = p[i] * g + shift;
                    act[static_cast<std::size_t>(i)] = v >= 0.0f ? v : 0.2f * v;
                }
                float* q = next.data() + static_cast<std::size_t>((b * F + cc) * (H / 2) * (W / 2));
                for (long y = 0; y < H / 2; ++y)
                    for (long xx = 0; xx < W / 2; ++xx) {
                        const float* r0 = act.data() + static_cast<std::size_t>(2 * y * W + 2 * xx);
                        const float* r1 = r0 + W;
                        q[y * (W / 2) + xx] = (r0[0] + r0[1] + r1[0] + r1[1]) * 0.25f;
                    }
            }
        x = std::move(next);
        C = F;
        H /= 2;
        W /= 2;
    }
    return out;
}

} // namespace

TEST_CASE("class grouping") {
    SUBCASE("contiguous balanced groups") {
        ClassAssignment a = group_classes(100, 10);
        REQUIRE(a.subsets.size() == 10);
        std::vector<int> first(10);
        std::iota(first.begin(), first.end(), 0);
        CHECK(a.subsets[0] == first);
        for (const auto& s : a.subsets) CHECK(s.size() == 10);
        CHECK(a.subsets[9].front() == 90);
        CHECK(a.subsets[9].back() == 99);
    }
    SUBCASE("singletons when k equals the class count") {
        ClassAssignment a = group_classes(10, 10);
        for (int c = 0; c < 10; ++c) {
            CHECK(a.generator_of[static_cast<std::size_t>(c)] == c);
            CHECK(a.subsets[static_cast<std::size_t>(c)] == std::vector<int>{c});
        }
    }
    SUBCASE("remainder spreads over the first groups") {
        ClassAssignment a = group_classes(10, 3);
        REQUIRE(a.subsets.size() == 3);
        CHECK(a.subsets[0].size() == 4);
        CHECK(a.subsets[1].size() == 3);
        CHECK(a.subsets[2].size() == 3);
        CHECK(a.subsets[0] == std::vector<int>{0, 1, 2, 3});
        CHECK(a.subsets[1] == std::vector<int>{4, 5, 6});
        CHECK(a.subsets[2] == std::vector<int>{7, 8, 9});
    }
    SUBCASE("every grouping is a partition") {
        for (auto [K, k] : {std::pair{10, 1}, {10, 4}, {17, 5}, {7, 7}, {23, 2}}) {
            ClassAssignment a = group_classes(K, k);
            CHECK(a.k == k);
            std::vector<int> seen;
            std::size_t lo = 1000, hi = 0;
            for (int g = 0; g < k; ++g) {
                const auto& s = a.subsets[static_cast<std::size_t>(g)];
                CHECK(!s.empty());
                lo = std::min(lo, s.size());
                hi = std::max(hi, s.size());
                for (int c : s) {
                    seen.push_back(c);
                    CHECK(a.generator_of[static_cast<std::size_t>(c)] == g);
                }
            }
            std::sort(seen.begin(), seen.end());
            std::vector<int> want(static_cast<std::size_t>(K));
            std::iota(want.begin(), want.end(), 0);
            CHECK(seen == want);
            CHECK(hi - lo <= 1);
        }
    }
    SUBCASE("shuffled mode still partitions") {
        ClassAssignment a = group_classes(10, 3, 5, true);
        ClassAssignment b = group_classes(10, 3, 5, true);
        CHECK(a.generator_of == b.generator_of);
        CHECK(a.generator_of != group_classes(10, 3).generator_of);
        std::vector<int> seen;
        for (const auto& s : a.subsets) seen.insert(seen.end(), s.begin(), s.end());
        std::sort(seen.begin(), seen.end());
        std::vector<int> want(10);
        std::iota(want.begin(), want.end(), 0);
        CHECK(seen == want);
    }
    SUBCASE("invalid parameters") {
        CHECK_THROWS_AS(group_classes(10, 11), ParamError);
        CHECK_THROWS_AS(group_classes(10, 0), ParamError);
        CHECK_THROWS_AS(group_classes(0, 1), ParamError);
    }
}

TEST_CASE("running moment extraction") {
    SUBCASE("fresh model yields the init moments") {
        auto m = toy_teacher(11, false);
        MomentTargets<float> t = extract_running_moments(m);
        CHECK(t.provenance == MomentProvenance::Running);
        REQUIRE(t.layers.size() == 3);
        CHECK(t.layers[0].mean.size() == 3);
        CHECK(t.layers[1].mean.size() == 6);
        CHECK(t.layers[2].mean.size() == 12);
        for (const auto& layer : t.layers) {
            for (float v : layer.mean) CHECK(v == 0.0f);
            for (float v : layer.var) CHECK(v == 1.0f);
        }
    }
    SUBCASE("copies the current running buffers exactly") {
        auto m = toy_teacher(11, false);
        Rng rng(2);
        Tensorf batch = Tensorf::randn({5, 1, 16, 16}, rng);
        {
            Tape<float> tape;
            (void)classifier_forward(tape, m, batch, Mode::Train);
        }
        MomentTargets<float> t = extract_running_moments(m);
        auto reg = m.bn_registry();
        REQUIRE(t.layers.size() == reg.size());
        for (std::size_t i = 0; i < reg.size(); ++i) {
            CHECK(t.layers[i].mean == reg[i]->running_mean.data);
            CHECK(t.layers[i].var == reg[i]->running_var.data);
        }
    }
    SUBCASE("a model without batch norm is rejected") {
        ClassifierModel<float> bare;
        CHECK_THROWS_AS(extract_running_moments(bare), ContractError);
    }
}

TEST_CASE("per-class moments from data") {
    auto [train, test] = gen_toy_dataset(5, 80, 8, 4);
    (void)test;

    SUBCASE("brute-force forward reproduces the targets bit for bit") {
        auto m = toy_teacher(11, false);
        MomentTargets<float> got = estimate_class_moments_from_data(m, train, 2, 6);
        CHECK(got.provenance == MomentProvenance::PerClassReal);
        REQUIRE(got.layers.size() == 3);

        std::vector<std::size_t> idx;
        for (std::size_t i = 0; i < train.size() && idx.size() < 6; ++i)
            if (train.labels[i] == 2) idx.push_back(i);
        REQUIRE(idx.size() == 6);
        RefActivations want = reference_moments(m, train.gather(idx));
        for (std::size_t l = 0; l < 3; ++l) {
            CHECK(got.layers[l].mean == want.mean[l]);
            CHECK(got.layers[l].var == want.var[l]);
        }
        // and they are not the init running stats
        CHECK(moment_l2_value(got.layers[0].mean, got.layers[0].var,
                              std::vector<float>(3, 0.0f), std::vector<float>(3, 1.0f)) > 0.0f);
    }
    SUBCASE("teacher is left untouched, frozen or not") {
        auto m = toy_teacher(11, false);
        auto before = snapshot(m);
        (void)estimate_class_moments_from_data(m, train, 1, 8);
        CHECK(snapshot(m) == before);
        CHECK_FALSE(m.frozen);

        auto f = toy_teacher(11, true);
        auto fbefore = snapshot(f);
        (void)estimate_class_moments_from_data(f, train, 1, 8);
        CHECK(snapshot(f) == fbefore);
        CHECK(f.frozen);
    }
    SUBCASE("repeat calls agree exactly") {
        auto m = toy_teacher(11, false);
        MomentTargets<float> a = estimate_class_moments_from_data(m, train, 3, 10);
        MomentTargets<float> b = estimate_class_moments_from_data(m, train, 3, 10);
        CHECK(targets_equal(a, b));
    }
    SUBCASE("constant-zero images pin every layer's moments exactly") {
        // zero input makes each conv output its bias everywhere, which BN
        // maps back to exact zeros; so mean == bias and variance == 0 at
        // every layer. Quarter-integer biases keep all the sums exact.
        Dataset rep;
        rep.images = Tensorf::zeros({4, 1, 16, 16});
        rep.labels = {1, 1, 1, 1};
        rep.class_count = 4;
        rep.split = "train";
        auto m = toy_teacher(11, false);
        for (std::size_t b = 0; b < m.blocks.size(); ++b)
            for (std::size_t c = 0; c < m.blocks[b].bias.numel(); ++c)
                m.blocks[b].bias.data[c] =
                    0.25f * static_cast<float>(c + 1) - 0.5f * static_cast<float>(b);
        MomentTargets<float> t = estimate_class_moments_from_data(m, rep, 1, 4);
        REQUIRE(t.layers.size() == 3);
        for (std::size_t b = 0; b < 3; ++b) {
            CHECK(t.layers[b].mean == m.blocks[b].bias.data);
            for (float v : t.layers[b].var) CHECK(v == 0.0f);
        }
    }
    SUBCASE("errors") {
        auto m = toy_teacher(11, false);
        CHECK_THROWS_AS(estimate_class_moments_from_data(m, train, 0, 1), ParamError);
        CHECK_THROWS_AS(estimate_class_moments_from_data(m, train, 7, 4), ParamError);
        CHECK_THROWS_AS(estimate_class_moments_from_data(m, train, 0, 100), DataError);
    }
}

TEST_CASE("direct synthesis") {
    auto m = toy_teacher(3, true);
    MomentTargets<float> targets = extract_running_moments(m);
    LossWeights<float> w;
    SynthConfig cfg;
    cfg.steps = 40;
    cfg.lr = 0.05;
    cfg.seed = 7;
    const std::vector<int> labels = {0, 1, 2, 3, 0, 1};

    SUBCASE("optimizes the objective and stays in range") {
        auto before = snapshot(m);
        SynthResult<float> r = synthesize_images_direct(m, labels, targets, w, cfg);
        CHECK(r.images.shape == Shape{6, 1, 16, 16});
        REQUIRE(r.loss.size() == 40);
        for (double l : r.loss) CHECK(std::isfinite(l));
        CHECK(r.loss.back() < r.loss.front());
        for (float v : r.images.data) {
            CHECK(v >= -1.0f);
            CHECK(v <= 1.0f);
        }
        CHECK(snapshot(m) == before);
        CHECK(m.frozen);
    }
    SUBCASE("deterministic per seed") {
        SynthResult<float> a = synthesize_images_direct(m, labels, targets, w, cfg);
        SynthResult<float> b = synthesize_images_direct(m, labels, targets, w, cfg);
        CHECK(std::memcmp(a.images.data.data(), b.images.data.data(),
                          a.images.numel() * sizeof(float)) == 0);
        CHECK(a.loss == b.loss);
        SynthConfig other = cfg;
        other.seed = 8;
        SynthResult<float> c = synthesize_images_direct(m, labels, targets, w, other);
        CHECK(std::memcmp(a.images.data.data(), c.images.data.data(),
                          a.images.numel() * sizeof(float)) != 0);
    }
    SUBCASE("contract violations") {
        SynthConfig bad = cfg;
        bad.steps = 0;
        CHECK_THROWS_AS(synthesize_images_direct(m, labels, targets, w, bad), ParamError);
        bad = cfg;
        bad.lr = 0.0;
        CHECK_THROWS_AS(synthesize_images_direct(m, labels, targets, w, bad), ParamError);
        CHECK_THROWS_AS(synthesize_images_direct(m, {0}, targets, w, cfg), ParamError);
        CHECK_THROWS_AS(synthesize_images_direct(m, {0, 4}, targets, w, cfg), ParamError);
        auto hot = toy_teacher(3, false);
        CHECK_THROWS_AS(synthesize_images_direct(hot, labels, targets, w, cfg), ContractError);
    }
}

TEST_CASE("data-free class moments") {
    auto m = toy_teacher(3, true);
    LossWeights<float> w;
    SynthConfig cfg;
    cfg.steps = 30;
    cfg.seed = 5;

    SUBCASE("structure and provenance") {
        auto before = snapshot(m);
        MomentTargets<float> t = estimate_class_moments_datafree(m, 2, 4, w, cfg);
        CHECK(t.provenance == MomentProvenance::PerClassDatafree);
        auto reg = m.bn_registry();
        REQUIRE(t.layers.size() == reg.size());
        for (std::size_t i = 0; i < reg.size(); ++i)
            CHECK(t.layers[i].mean.size() == reg[i]->channels());
        CHECK(snapshot(m) == before);
    }
    SUBCASE("deterministic") {
        MomentTargets<float> a = estimate_class_moments_datafree(m, 1, 4, w, cfg);
        MomentTargets<float> b = estimate_class_moments_datafree(m, 1, 4, w, cfg);
        CHECK(targets_equal(a, b));
    }
    SUBCASE("errors") {
        CHECK_THROWS_AS(estimate_class_moments_datafree(m, 1, 1, w, cfg), ParamError);
    }
}

TEST_CASE("moment serialization") {
    auto m = toy_teacher(11, false);
    Rng rng(6);
    Tensorf batch = Tensorf::randn({4, 1, 16, 16}, rng);
    MomentTargets<float> t = measure_batch_moments(m, batch, MomentProvenance::PerClassReal);

    SUBCASE("file round trip is exact") {
        save_moments(t, "tmp_moments.gdfd");
        MomentTargets<float> back = load_moments<float>("tmp_moments.gdfd");
        CHECK(back.provenance == t.provenance);
        CHECK(targets_equal(back, t));
    }
    SUBCASE("embedded round trip under a prefix") {
        Checkpoint ck;
        add_moments(ck, "gen0/targets", t);
        MomentTargets<float> back = read_moments<float>(ck, "gen0/targets");
        CHECK(targets_equal(back, t));
        CHECK(ck.meta("gen0/targets/provenance") == "per_class_real");
        CHECK_THROWS_AS(read_moments<float>(ck, "gen1/targets"), DataError);
    }
    SUBCASE("doubles round trip too") {
        MomentTargets<double> td;
        td.provenance = MomentProvenance::PerGroup;
        td.layers.push_back({{0.5, -1.25}, {2.0, 0.125}});
        save_moments(td, "tmp_moments64.gdfd");
        MomentTargets<double> back = load_moments<double>("tmp_moments64.gdfd");
        CHECK(back.provenance == MomentProvenance::PerGroup);
        CHECK(back.layers[0].mean == td.layers[0].mean);
        CHECK(back.layers[0].var == td.layers[0].var);
    }
    SUBCASE("wrong kind is rejected") {
        Checkpoint ck;
        ck.set_meta("kind", "classifier");
        save_checkpoint(ck, "tmp_notmoments.gdfd");
        CHECK_THROWS_AS(load_moments<float>("tmp_notmoments.gdfd"), DataError);
    }
}

TEST_CASE("group moment estimation") {
    auto m = toy_teacher(11, true);
    auto [train, test] = gen_toy_dataset(5, 80, 8, 4);

    SUBCASE("singleton group reduces to the per-class estimate") {
        auto g = estimate_group_moments_from_data(m, train, {2}, 6);
        auto c = estimate_class_moments_from_data(m, train, 2, 6);
        CHECK(targets_equal(g, c));
        CHECK(g.provenance == MomentProvenance::PerClassReal);
    }

    SUBCASE("pair group measures the concatenated per-class gathers") {
        auto g = estimate_group_moments_from_data(m, train, {0, 3}, 6);
        CHECK(g.provenance == MomentProvenance::PerGroup);
        std::vector<std::size_t> idx;
        for (int c : {0, 3})
            for (std::size_t i = 0, found = 0; i < train.size() && found < 6; ++i)
                if (train.labels[i] == c) {
                    idx.push_back(i);
                    ++found;
                }
        auto want = measure_batch_moments(m, train.gather(idx), MomentProvenance::PerGroup);
        CHECK(targets_equal(g, want));
    }

    SUBCASE("datafree group cycles the subset and stays deterministic") {
        SynthConfig sc;
        sc.steps = 12;
        sc.seed = 9;
        LossWeights<float> w;
        auto a = estimate_group_moments_datafree(m, {1, 2}, 4, w, sc);
        auto b = estimate_group_moments_datafree(m, {1, 2}, 4, w, sc);
        CHECK(a.provenance == MomentProvenance::PerGroup);
        CHECK(targets_equal(a, b));
        CHECK(a.layers.size() == m.bn_registry().size());
        auto single = estimate_group_moments_datafree(m, {2}, 4, w, sc);
        CHECK(single.provenance == MomentProvenance::PerClassDatafree);
    }

    SUBCASE("rejects empty subsets and starved classes") {
        CHECK_THROWS_AS(estimate_group_moments_from_data(m, train, {}, 6), ParamError);
        CHECK_THROWS_AS(estimate_group_moments_from_data(m, train, {0, 9}, 6), ParamError);
        CHECK_THROWS_AS(estimate_group_moments_from_data(m, train, {0, 1}, 60), DataError);
        SynthConfig sc;
        sc.steps = 4;
        CHECK_THROWS_AS(estimate_group_moments_datafree(m, {0, 1}, 1, LossWeights<float>{}, sc),
                        ParamError);
    }
}
