#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <cmath>
#include <cstring>
#include <vector>

#include "gdfd/tensor.hpp"
#include "support/fd.hpp"

using namespace gdfd;

namespace {

template <typename T>
Tensor<T> make_randn(Shape s, Rng& rng) {
    return Tensor<T>::randn(std::move(s), rng);
}

// randn pushed away from zero, for ops with a kink at the origin
template <typename T>
Tensor<T> make_randn_nudged(Shape s, Rng& rng, T margin) {
    Tensor<T> t = Tensor<T>::randn(std::move(s), rng);
    for (T& v : t.data) v += (v >= T(0) ? margin : -margin);
    return t;
}

template <typename T>
Tensor<T> make_positive(Shape s, Rng& rng, T floor_v) {
    Tensor<T> t(std::move(s));
    for (T& v : t.data) v = floor_v + static_cast<T>(rng.uniform());
    return t;
}

} // namespace

TEST_CASE("tensor basics") {
    Tensorf t({2, 3});
    CHECK(t.numel() == 6);
    CHECK(t.shape == Shape{2, 3});
    CHECK_THROWS_AS(Tensorf({2, 2}, {1.f, 2.f, 3.f}), ShapeError);
    t.set_requires_grad(true);
    CHECK(t.grad.size() == 6);
    t.grad[0] = 5.f;
    t.zero_grad();
    CHECK(t.grad[0] == 0.f);
    CHECK(t.all_finite());
    t.data[3] = std::numeric_limits<float>::quiet_NaN();
    CHECK_FALSE(t.all_finite());
}

TEST_CASE("linear worked examples") {
    Tape<double> tape;
    SUBCASE("zero weight") {
        Var x = tape.constant(Tensord({1, 2}, {1, 1}));
        Var w = tape.constant(Tensord({2, 2}, {0, 0, 0, 0}));
        Var b = tape.constant(Tensord({2}, {0, 0}));
        const auto& o = tape.value(tape.linear(x, w, b));
        CHECK(o.data[0] == 0.0);
        CHECK(o.data[1] == 0.0);
    }
    SUBCASE("identity weight") {
        Var x = tape.constant(Tensord({1, 2}, {1, 2}));
        Var w = tape.constant(Tensord({2, 2}, {1, 0, 0, 1}));
        Var b = tape.constant(Tensord({2}, {0, 0}));
        const auto& o = tape.value(tape.linear(x, w, b));
        CHECK(o.data[0] == doctest::Approx(1.0));
        CHECK(o.data[1] == doctest::Approx(2.0));
    }
    SUBCASE("hand multiply") {
        Var x = tape.constant(Tensord({1, 2}, {1, 2}));
        Var w = tape.constant(Tensord({2, 2}, {1, 1, 1, -1}));
        Var b = tape.constant(Tensord({2}, {1, 0}));
        const auto& o = tape.value(tape.linear(x, w, b));
        CHECK(o.data[0] == doctest::Approx(4.0));
        CHECK(o.data[1] == doctest::Approx(-1.0));
    }
    SUBCASE("shape mismatch") {
        Var x = tape.constant(Tensord({1, 3}, {1, 2, 3}));
        Var w = tape.constant(Tensord({2, 2}, {1, 0, 0, 1}));
        Var b = tape.constant(Tensord({2}, {0, 0}));
        CHECK_THROWS_AS(tape.linear(x, w, b), ShapeError);
    }
}

TEST_CASE("conv2d worked examples") {
    Tape<double> tape;
    SUBCASE("scalar kernel doubles") {
        Var x = tape.constant(Tensord::full({1, 1, 2, 2}, 1.0));
        Var k = tape.constant(Tensord({1, 1, 1, 1}, {2}));
        Var b = tape.constant(Tensord({1}, {0}));
        const auto& o = tape.value(tape.conv2d(x, k, b, 1, 0));
        CHECK(o.shape == Shape{1, 1, 2, 2});
        for (double v : o.data) CHECK(v == doctest::Approx(2.0));
    }
    SUBCASE("zero kernel leaves bias") {
        Rng rng(11);
        Var x = tape.constant(make_randn<double>({2, 3, 4, 4}, rng));
        Var k = tape.constant(Tensord::zeros({1, 3, 3, 3}));
        Var b = tape.constant(Tensord({1}, {3}));
        const auto& o = tape.value(tape.conv2d(x, k, b, 1, 1));
        for (double v : o.data) CHECK(v == doctest::Approx(3.0));
    }
    SUBCASE("all-ones kernel sums the window") {
        Tensord xt({1, 1, 3, 3});
        for (int i = 0; i < 9; ++i) xt.data[static_cast<std::size_t>(i)] = i + 1;
        Var x = tape.constant(std::move(xt));
        Var k = tape.constant(Tensord::full({1, 1, 3, 3}, 1.0));
        Var b = tape.constant(Tensord({1}, {0}));
        const auto& o = tape.value(tape.conv2d(x, k, b, 1, 0));
        CHECK(o.shape == Shape{1, 1, 1, 1});
        CHECK(o.data[0] == doctest::Approx(45.0));
    }
    SUBCASE("non-integral output size") {
        Var x = tape.constant(Tensord::zeros({1, 1, 6, 6}));
        Var k = tape.constant(Tensord::zeros({1, 1, 3, 3}));
        Var b = tape.constant(Tensord({1}, {0}));
        CHECK_THROWS_AS(tape.conv2d(x, k, b, 2, 1), ShapeError);
    }
    SUBCASE("even kernel rejected") {
        Var x = tape.constant(Tensord::zeros({1, 1, 4, 4}));
        Var k = tape.constant(Tensord::zeros({1, 1, 2, 2}));
        Var b = tape.constant(Tensord({1}, {0}));
        CHECK_THROWS_AS(tape.conv2d(x, k, b, 1, 0), ParamError);
    }
}

TEST_CASE("activation worked examples") {
    Tape<double> tape;
    Var x = tape.constant(Tensord({3}, {0.0, -2.0, 1.5}));
    const auto& lr = tape.value(tape.leaky_relu(x, 0.2));
    CHECK(lr.data[0] == 0.0);
    CHECK(lr.data[1] == doctest::Approx(-0.4));
    CHECK(lr.data[2] == doctest::Approx(1.5));

    Tensord zt({1}, {0.0});
    zt.set_requires_grad(true);
    Var z = tape.leaf(&zt);
    Var th = tape.tanh_op(z);
    CHECK(tape.value(th).data[0] == 0.0);
    tape.backward(tape.sum(th));
    CHECK(zt.grad[0] == doctest::Approx(1.0));
}

TEST_CASE("upsample2x worked examples") {
    Tape<double> tape;
    SUBCASE("single pixel") {
        Var x = tape.constant(Tensord({1, 1, 1, 1}, {5}));
        const auto& o = tape.value(tape.upsample2x(x));
        CHECK(o.shape == Shape{1, 1, 2, 2});
        for (double v : o.data) CHECK(v == 5.0);
    }
    SUBCASE("block pattern") {
        Var x = tape.constant(Tensord({1, 1, 2, 2}, {1, 2, 3, 4}));
        const auto& o = tape.value(tape.upsample2x(x));
        std::vector<double> want = {1, 1, 2, 2, 1, 1, 2, 2, 3, 3, 4, 4, 3, 3, 4, 4};
        CHECK(o.data == want);
    }
    SUBCASE("backward sums the block") {
        Tensord xt({1, 1, 2, 2}, {1, 2, 3, 4});
        xt.set_requires_grad(true);
        Var x = tape.leaf(&xt);
        tape.backward(tape.sum(tape.upsample2x(x)));
        for (double g : xt.grad) CHECK(g == doctest::Approx(4.0));
    }
}

TEST_CASE("upsample then avgpool is the identity") {
    Rng rng(42);
    for (Shape s : {Shape{2, 3, 4, 4}, Shape{1, 1, 1, 1}, Shape{3, 2, 5, 7}}) {
        Tensorf xt = make_randn<float>(s, rng);
        Tape<float> tape;
        Var x = tape.constant(xt);
        const auto& back = tape.value(tape.avgpool2x2(tape.upsample2x(x)));
        CHECK(back.shape == xt.shape);
        for (std::size_t i = 0; i < xt.numel(); ++i) CHECK(back.data[i] == doctest::Approx(xt.data[i]));
    }
    Tape<float> tape;
    Var odd = tape.constant(Tensorf::zeros({1, 1, 3, 3}));
    CHECK_THROWS_AS(tape.avgpool2x2(odd), ShapeError);
}

TEST_CASE("softmax_temp worked examples") {
    Tape<double> tape;
    SUBCASE("symmetry") {
        Var x = tape.constant(Tensord({1, 2}, {0, 0}));
        const auto& o = tape.value(tape.softmax_temp(x, 7.0));
        CHECK(o.data[0] == doctest::Approx(0.5));
        CHECK(o.data[1] == doctest::Approx(0.5));
    }
    SUBCASE("closed form") {
        Var x = tape.constant(Tensord({1, 2}, {std::log(2.0), 0.0}));
        const auto& o = tape.value(tape.softmax_temp(x, 1.0));
        CHECK(o.data[0] == doctest::Approx(2.0 / 3.0));
        CHECK(o.data[1] == doctest::Approx(1.0 / 3.0));
    }
    SUBCASE("high temperature flattens") {
        Var x = tape.constant(Tensord({1, 2}, {10, 0}));
        const auto& o = tape.value(tape.softmax_temp(x, 1e6));
        CHECK(o.data[0] == doctest::Approx(0.5).epsilon(1e-5));
        CHECK(o.data[1] == doctest::Approx(0.5).epsilon(1e-5));
    }
    SUBCASE("temperature must be positive") {
        Var x = tape.constant(Tensord({1, 2}, {1, 2}));
        CHECK_THROWS_AS(tape.softmax_temp(x, 0.0), ParamError);
        CHECK_THROWS_AS(tape.softmax_temp(x, -1.0), ParamError);
    }
}

TEST_CASE("softmax_temp rows are distributions") {
    Rng rng(123);
    for (int trial = 0; trial < 50; ++trial) {
        Tape<float> tape;
        Var x = tape.constant(make_randn<float>({4, 7}, rng));
        const auto& o = tape.value(tape.softmax_temp(x, 3.0f));
        for (std::size_t r = 0; r < 4; ++r) {
            float s = 0;
            for (std::size_t c = 0; c < 7; ++c) {
                const float p = o.data[r * 7 + c];
                CHECK(p >= 0.f);
                CHECK(p <= 1.f);
                s += p;
            }
            CHECK(s == doctest::Approx(1.0f).epsilon(1e-6));
        }
    }
}

TEST_CASE("channel_moments worked example") {
    Tape<double> tape;
    // one channel holding {1, 3}: biased moments are mean 2, variance 1
    Tensord xt({1, 1, 1, 2}, {1, 3});
    Var x = tape.constant(xt);
    auto [mean, var] = tape.channel_moments(x);
    CHECK(tape.value(mean).data[0] == doctest::Approx(2.0));
    CHECK(tape.value(var).data[0] == doctest::Approx(1.0));

    Var degenerate = tape.constant(Tensord::zeros({1, 3, 1, 1}));
    CHECK_THROWS_AS(tape.channel_moments(degenerate), ParamError);
}

TEST_CASE("bn_normalize on standardized input is the identity") {
    Rng rng(5);
    Tape<double> tape;
    Tensord xt = make_randn<double>({2, 2, 3, 3}, rng);
    // standardize each channel exactly
    for (std::size_t c = 0; c < 2; ++c) {
        double m = 0, n = 0;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 9; ++i) {
                m += xt.data[(b * 2 + c) * 9 + i];
                n += 1;
            }
        m /= n;
        double v = 0;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 9; ++i) {
                const double d = xt.data[(b * 2 + c) * 9 + i] - m;
                v += d * d;
            }
        v /= n;
        for (std::size_t b = 0; b < 2; ++b)
            for (std::size_t i = 0; i < 9; ++i)
                xt.data[(b * 2 + c) * 9 + i] = (xt.data[(b * 2 + c) * 9 + i] - m) / std::sqrt(v);
    }
    Var x = tape.constant(xt);
    auto [mean, var] = tape.channel_moments(x);
    Var gamma = tape.constant(Tensord::full({2}, 1.0));
    Var beta = tape.constant(Tensord::zeros({2}));
    const auto& o = tape.value(tape.bn_normalize(x, mean, var, gamma, beta, 1e-5));
    for (std::size_t i = 0; i < xt.numel(); ++i)
        CHECK(o.data[i] == doctest::Approx(xt.data[i]).epsilon(1e-4));
}

TEST_CASE("backward worked examples") {
    SUBCASE("sum of squares") {
        Tensord xt({1}, {3.0});
        xt.set_requires_grad(true);
        Tape<double> tape;
        Var x = tape.leaf(&xt);
        tape.backward(tape.sum(tape.mul(x, x)));
        CHECK(xt.grad[0] == doctest::Approx(6.0));
    }
    SUBCASE("constant function has zero grads") {
        Tensord xt({3}, {1, 2, 3});
        xt.set_requires_grad(true);
        Tape<double> tape;
        (void)tape.leaf(&xt);
        Var c = tape.constant_scalar(5.0);
        tape.backward(c);
        for (double g : xt.grad) CHECK(g == 0.0);
    }
    SUBCASE("non-scalar output is a contract error") {
        Tape<double> tape;
        Var x = tape.constant(Tensord({2}, {1, 2}));
        CHECK_THROWS_AS(tape.backward(x), ContractError);
    }
    SUBCASE("foreign variable is a tape error") {
        Tape<double> a;
        Tape<double> b;
        Var x = a.constant(Tensord({1}, {1}));
        (void)x;
        Var nothing;
        CHECK_THROWS_AS(b.backward(nothing), TapeError);
        Var later = a.constant(Tensord({1}, {2}));
        CHECK_THROWS_AS(b.value(later), TapeError);
    }
    SUBCASE("grads accumulate across backward calls") {
        Tensord xt({1}, {3.0});
        xt.set_requires_grad(true);
        Tape<double> tape;
        Var x = tape.leaf(&xt);
        Var loss = tape.sum(tape.mul(x, x));
        tape.backward(loss);
        tape.backward(loss);
        CHECK(xt.grad[0] == doctest::Approx(12.0));
        xt.zero_grad();
        tape.backward(loss);
        CHECK(xt.grad[0] == doctest::Approx(6.0));
    }
}

TEST_CASE("fused loss ops match hand values") {
    Tape<double> tape;
    SUBCASE("kd_loss zero at equality and hand KL") {
        Var t = tape.constant(Tensord({1, 2}, {0.3, -0.8}));
        CHECK(tape.value(tape.kd_loss(t, t, 3.0)).data[0] == doctest::Approx(0.0));
        // probabilities (0.5,0.5) vs (0.25,0.75) at tau=1 via log-probability logits
        Var a = tape.constant(Tensord({1, 2}, {std::log(0.5), std::log(0.5)}));
        Var b = tape.constant(Tensord({1, 2}, {std::log(0.25), std::log(0.75)}));
        CHECK(tape.value(tape.kd_loss(a, b, 1.0)).data[0] ==
              doctest::Approx(0.5 * std::log(2.0) + 0.5 * std::log(2.0 / 3.0)).epsilon(1e-9));
    }
    SUBCASE("cross_entropy closed forms") {
        Var sharp = tape.constant(Tensord({1, 3}, {40, 0, 0}));
        CHECK(tape.value(tape.cross_entropy(sharp, {0})).data[0] == doctest::Approx(0.0).epsilon(1e-6));
        Var uniform = tape.constant(Tensord({1, 4}, {0.7, 0.7, 0.7, 0.7}));
        CHECK(tape.value(tape.cross_entropy(uniform, {2})).data[0] == doctest::Approx(std::log(4.0)));
        Var x = tape.constant(Tensord({1, 3}, {0.1, -2.0, 1.4}));
        Var shifted = tape.constant(Tensord({1, 3}, {100.1, 98.0, 101.4}));
        CHECK(tape.value(tape.cross_entropy(x, {1})).data[0] ==
              doctest::Approx(tape.value(tape.cross_entropy(shifted, {1})).data[0]));
        CHECK_THROWS_AS(tape.cross_entropy(x, {3}), ParamError);
    }
    SUBCASE("tv_loss hand values") {
        CHECK(tape.value(tape.tv_loss(tape.constant(Tensord::full({2, 3, 4, 4}, 0.7)))).data[0] ==
              doctest::Approx(0.0));
        CHECK(tape.value(tape.tv_loss(tape.constant(Tensord({1, 1, 1, 2}, {0, 1})))).data[0] ==
              doctest::Approx(1.0));
        CHECK(tape.value(tape.tv_loss(tape.constant(Tensord({1, 1, 2, 2}, {0, 1, 1, 0})))).data[0] ==
              doctest::Approx(4.0));
    }
    SUBCASE("l2_image_loss hand values") {
        CHECK(tape.value(tape.l2_image_loss(tape.constant(Tensord::zeros({2, 1, 3, 3})))).data[0] ==
              doctest::Approx(0.0));
        CHECK(tape.value(tape.l2_image_loss(tape.constant(Tensord::full({1, 1, 2, 2}, 1.0)))).data[0] ==
              doctest::Approx(4.0));
    }
    SUBCASE("gaussian_kl hand values") {
        auto kl1 = [&](double mh, double vh, double m, double v) {
            Var a = tape.constant(Tensord({1}, {mh}));
            Var b = tape.constant(Tensord({1}, {vh}));
            Var c = tape.constant(Tensord({1}, {m}));
            Var d = tape.constant(Tensord({1}, {v}));
            return tape.value(tape.gaussian_kl(a, b, c, d)).data[0];
        };
        CHECK(kl1(0, 1, 0, 1) == doctest::Approx(0.0));
        CHECK(kl1(0, 1, 1, 1) == doctest::Approx(0.5));
        CHECK(kl1(0, 4, 0, 1) == doctest::Approx(std::log(0.5) + 1.5));
        Var a = tape.constant(Tensord({1}, {0.0}));
        Var bad = tape.constant(Tensord({1}, {-1.0}));
        Var c = tape.constant(Tensord({1}, {0.0}));
        Var d = tape.constant(Tensord({1}, {1.0}));
        CHECK_THROWS_AS(tape.gaussian_kl(a, bad, c, d), ParamError);
        CHECK_THROWS_AS(tape.gaussian_kl(a, d, c, bad), ParamError);
    }
    SUBCASE("kd_loss sends no gradient to the teacher") {
        Tensord tt({2, 3}, {1, 0, -1, 0.5, 0.2, -0.3});
        Tensord st({2, 3}, {0.2, 0.1, 0, -0.5, 1.2, 0.3});
        tt.set_requires_grad(true);
        st.set_requires_grad(true);
        Tape<double> g;
        g.backward(g.kd_loss(g.leaf(&tt), g.leaf(&st), 3.0));
        double teacher_sum = 0, student_sum = 0;
        for (double v : tt.grad) teacher_sum += std::abs(v);
        for (double v : st.grad) student_sum += std::abs(v);
        CHECK(teacher_sum == 0.0);
        CHECK(student_sum > 0.0);
    }
}

// every differentiable op in a small graph against central differences
namespace {

template <typename T>
struct OpCheckStats {
    int seeds_run = 0;
    double worst = 0;
};

template <typename T>
void run_op_gradchecks(double h, double tol) {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        Rng rng(seed * 7919);
        // shared weighting constants make the reductions non-uniform
        auto wsum = [&](Tape<T>& tape, Var v, Tensor<T> cw) {
            return tape.sum(tape.mul(v, tape.constant(std::move(cw))));
        };

        { // linear
            Tensor<T> x = make_randn<T>({2, 3}, rng), w = make_randn<T>({3, 4}, rng),
                      b = make_randn<T>({4}, rng);
            Tensor<T> cw = make_randn<T>({2, 4}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.linear(t.leaf(&x), t.leaf(&w), t.leaf(&b)), cw); },
                {&x, &w, &b}, h);
            CHECK(rep.max_rel < tol);
        }
        { // conv2d stride 1 pad 1, and stride 2 pad 1
            Tensor<T> x = make_randn<T>({1, 2, 4, 4}, rng), k = make_randn<T>({2, 2, 3, 3}, rng),
                      b = make_randn<T>({2}, rng);
            Tensor<T> cw = make_randn<T>({1, 2, 4, 4}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    return wsum(t, t.conv2d(t.leaf(&x), t.leaf(&k), t.leaf(&b), 1, 1), cw);
                },
                {&x, &k, &b}, h);
            CHECK(rep.max_rel < tol);

            Tensor<T> x2 = make_randn<T>({1, 1, 5, 5}, rng), k2 = make_randn<T>({1, 1, 3, 3}, rng),
                      b2 = make_randn<T>({1}, rng);
            Tensor<T> cw2 = make_randn<T>({1, 1, 3, 3}, rng);
            auto rep2 = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    return wsum(t, t.conv2d(t.leaf(&x2), t.leaf(&k2), t.leaf(&b2), 2, 1), cw2);
                },
                {&x2, &k2, &b2}, h);
            CHECK(rep2.max_rel < tol);
        }
        { // channel_moments (both outputs)
            Tensor<T> x = make_randn<T>({2, 2, 3, 3}, rng);
            Tensor<T> cm = make_randn<T>({2}, rng), cv = make_randn<T>({2}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    auto [m, v] = t.channel_moments(t.leaf(&x));
                    return t.add(wsum(t, m, cm), wsum(t, v, cv));
                },
                {&x}, h);
            CHECK(rep.max_rel < tol);
        }
        { // bn_normalize w.r.t. all five inputs
            Tensor<T> x = make_randn<T>({2, 2, 3, 3}, rng);
            Tensor<T> mean = make_randn<T>({2}, rng);
            Tensor<T> var = make_positive<T>({2}, rng, T(0.3));
            Tensor<T> gamma = make_randn<T>({2}, rng), beta = make_randn<T>({2}, rng);
            Tensor<T> cw = make_randn<T>({2, 2, 3, 3}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    return wsum(t,
                                t.bn_normalize(t.leaf(&x), t.leaf(&mean), t.leaf(&var),
                                               t.leaf(&gamma), t.leaf(&beta), T(1e-5)),
                                cw);
                },
                {&x, &mean, &var, &gamma, &beta}, h);
            CHECK(rep.max_rel < tol);
        }
        { // leaky_relu, input kept away from the kink
            Tensor<T> x = make_randn_nudged<T>({2, 8}, rng, T(0.2));
            Tensor<T> cw = make_randn<T>({2, 8}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.leaky_relu(t.leaf(&x), T(0.2)), cw); }, {&x}, h);
            CHECK(rep.max_rel < tol);
        }
        { // tanh
            Tensor<T> x = make_randn<T>({2, 8}, rng);
            Tensor<T> cw = make_randn<T>({2, 8}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.tanh_op(t.leaf(&x)), cw); }, {&x}, h);
            CHECK(rep.max_rel < tol);
        }
        { // upsample / avgpool / global_avg_pool
            Tensor<T> x = make_randn<T>({1, 2, 2, 2}, rng);
            Tensor<T> cw = make_randn<T>({1, 2, 4, 4}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.upsample2x(t.leaf(&x)), cw); }, {&x}, h);
            CHECK(rep.max_rel < tol);

            Tensor<T> y = make_randn<T>({1, 2, 4, 4}, rng);
            Tensor<T> cw2 = make_randn<T>({1, 2, 2, 2}, rng);
            auto rep2 = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.avgpool2x2(t.leaf(&y)), cw2); }, {&y}, h);
            CHECK(rep2.max_rel < tol);

            Tensor<T> z = make_randn<T>({2, 3, 4, 4}, rng);
            Tensor<T> cw3 = make_randn<T>({2, 3}, rng);
            auto rep3 = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.global_avg_pool(t.leaf(&z)), cw3); }, {&z}, h);
            CHECK(rep3.max_rel < tol);
        }
        { // softmax_temp
            Tensor<T> x = make_randn<T>({2, 5}, rng);
            Tensor<T> cw = make_randn<T>({2, 5}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return wsum(t, t.softmax_temp(t.leaf(&x), T(3)), cw); }, {&x}, h);
            CHECK(rep.max_rel < tol);
        }
        { // reshape + concat_cols
            Tensor<T> a = make_randn<T>({2, 3}, rng), b = make_randn<T>({2, 4}, rng);
            Tensor<T> cw = make_randn<T>({14}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    return wsum(t, t.reshape(t.concat_cols(t.leaf(&a), t.leaf(&b)), {14}), cw);
                },
                {&a, &b}, h);
            CHECK(rep.max_rel < tol);
        }
        { // add / sub / mul / scale chain
            Tensor<T> a = make_randn<T>({2, 3}, rng), b = make_randn<T>({2, 3}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    Var va = t.leaf(&a), vb = t.leaf(&b);
                    return t.sum(t.mul(t.add(va, vb), t.sub(va, t.scale(vb, T(0.7)))));
                },
                {&a, &b}, h);
            CHECK(rep.max_rel < tol);
        }
        { // l2_norm
            Tensor<T> v = make_randn_nudged<T>({6}, rng, T(0.1));
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return t.scale(t.l2_norm(t.leaf(&v)), T(1.3)); }, {&v}, h);
            CHECK(rep.max_rel < tol);
        }
        { // kd_loss (student side)
            Tensor<T> tl = make_randn<T>({3, 4}, rng), sl = make_randn<T>({3, 4}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return t.kd_loss(t.constant(tl), t.leaf(&sl), T(3)); }, {&sl}, h);
            CHECK(rep.max_rel < tol);
        }
        { // cross_entropy
            Tensor<T> x = make_randn<T>({3, 4}, rng);
            std::vector<int> labels = {0, 3, 1};
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return t.cross_entropy(t.leaf(&x), labels); }, {&x}, h);
            CHECK(rep.max_rel < tol);
        }
        { // tv_loss and l2_image_loss
            Tensor<T> x = make_randn<T>({2, 1, 3, 4}, rng);
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return t.tv_loss(t.leaf(&x)); }, {&x}, h);
            CHECK(rep.max_rel < tol);
            auto rep2 = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) { return t.l2_image_loss(t.leaf(&x)); }, {&x}, h);
            CHECK(rep2.max_rel < tol);
        }
        { // gaussian_kl w.r.t. all four arguments
            Tensor<T> mh = make_randn<T>({3}, rng);
            Tensor<T> vh = make_positive<T>({3}, rng, T(0.3));
            Tensor<T> m = make_randn<T>({3}, rng);
            Tensor<T> v = make_positive<T>({3}, rng, T(0.3));
            auto rep = fdcheck::check_gradients<T>(
                [&](Tape<T>& t) {
                    return t.gaussian_kl(t.leaf(&mh), t.leaf(&vh), t.leaf(&m), t.leaf(&v));
                },
                {&mh, &vh, &m, &v}, h);
            CHECK(rep.max_rel < tol);
        }
    }
}

} // namespace

TEST_CASE("per-op gradients match finite differences (f32)") {
    run_op_gradchecks<float>(1e-2, 1e-3);
}

TEST_CASE("per-op gradients match finite differences (f64)") {
    run_op_gradchecks<double>(1e-5, 1e-6);
}

namespace {

// one graph touching every op, used for the composite f64 check and the
// bit-determinism check
struct CompositeGraph {
    Tensord x, convk, convb, gamma, beta, w1, b1, w2, b2;
    Tensord mu_hat, var_hat, mu2, var2, vvec, pvec, qvec;
    Tensord cw_sm, cw_th, cw_cc, teacher;
    std::vector<int> labels{0, 2};

    explicit CompositeGraph(std::uint64_t seed) {
        Rng rng(seed);
        x = Tensord::randn({2, 2, 6, 6}, rng);
        convk = Tensord::randn({3, 2, 3, 3}, rng, 0.4);
        convb = Tensord::randn({3}, rng, 0.2);
        gamma = Tensord::randn({3}, rng, 0.3);
        for (double& g : gamma.data) g += 1.0;
        beta = Tensord::randn({3}, rng, 0.2);
        w1 = Tensord::randn({3, 4}, rng, 0.5);
        b1 = Tensord::randn({4}, rng, 0.2);
        w2 = Tensord::randn({27, 4}, rng, 0.3);
        b2 = Tensord::randn({4}, rng, 0.2);
        mu_hat = Tensord::randn({3}, rng);
        var_hat = make_positive<double>({3}, rng, 0.3);
        mu2 = Tensord::randn({3}, rng);
        var2 = make_positive<double>({3}, rng, 0.3);
        vvec = make_randn_nudged<double>({5}, rng, 0.1);
        pvec = Tensord::randn({4}, rng);
        qvec = Tensord::randn({4}, rng);
        cw_sm = Tensord::randn({2, 4}, rng);
        cw_th = Tensord::randn({2, 4}, rng);
        cw_cc = Tensord::randn({2, 7}, rng);
        teacher = Tensord::randn({2, 4}, rng);
    }

    std::vector<Tensord*> params() {
        return {&x,  &convk, &convb,   &gamma, &beta, &w1,   &b1,   &w2,
                &b2, &mu_hat, &var_hat, &mu2,   &var2, &vvec, &pvec, &qvec};
    }

    Var build(Tape<double>& t) {
        Var vx = t.leaf(&x);
        Var h1 = t.conv2d(vx, t.leaf(&convk), t.leaf(&convb), 1, 1);
        auto [bm, bv] = t.channel_moments(h1);
        Var y1 = t.bn_normalize(h1, bm, bv, t.leaf(&gamma), t.leaf(&beta), 1e-5);
        Var act = t.leaky_relu(y1, 0.2);
        Var pooled = t.avgpool2x2(act);
        Var up = t.upsample2x(pooled);
        Var tv = t.tv_loss(up);
        Var l2i = t.l2_image_loss(up);
        Var gap = t.global_avg_pool(pooled);
        Var logits1 = t.linear(gap, t.leaf(&w1), t.leaf(&b1));
        Var ce = t.cross_entropy(logits1, labels);
        Var flat = t.reshape(pooled, {2, 27});
        Var logits2 = t.linear(flat, t.leaf(&w2), t.leaf(&b2));
        Var sm = t.softmax_temp(logits2, 2.5);
        Var s_sm = t.sum(t.mul(sm, t.constant(cw_sm)));
        Var th = t.tanh_op(logits1);
        Var s_th = t.sum(t.mul(th, t.constant(cw_th)));
        Var kd = t.kd_loss(t.constant(teacher), logits2, 3.0);
        Var gkl = t.gaussian_kl(t.leaf(&mu_hat), t.leaf(&var_hat), t.leaf(&mu2), t.leaf(&var2));
        Var l2n = t.l2_norm(t.leaf(&vvec));
        Var cc = t.concat_cols(gap, logits1);
        Var s_cc = t.sum(t.mul(cc, t.constant(cw_cc)));
        Var diff = t.sub(t.leaf(&pvec), t.leaf(&qvec));
        Var s_diff = t.sum(t.mul(diff, diff));
        Var total = t.add(ce, t.scale(tv, 0.01));
        total = t.add(total, t.scale(l2i, 0.05));
        total = t.add(total, s_sm);
        total = t.add(total, s_th);
        total = t.add(total, t.scale(kd, 0.5));
        total = t.add(total, t.scale(gkl, 0.2));
        total = t.add(total, l2n);
        total = t.add(total, s_cc);
        total = t.add(total, t.scale(s_diff, 0.3));
        return total;
    }
};

} // namespace

TEST_CASE("composite graph gradients match finite differences (f64)") {
    for (std::uint64_t seed = 1; seed <= 20; ++seed) {
        CompositeGraph g(seed * 104729);
        auto rep = fdcheck::check_gradients<double>([&](Tape<double>& t) { return g.build(t); },
                                                    g.params(), 1e-5);
        INFO("seed ", seed, " worst rel ", rep.max_rel, " analytic ", rep.worst_analytic, " fd ",
             rep.worst_fd);
        CHECK(rep.max_rel < 1e-6);
    }
}

TEST_CASE("forward and backward are bit-deterministic") {
    auto run_once = [](std::vector<double>* grads_out) {
        CompositeGraph g(31337);
        for (Tensord* p : g.params()) p->set_requires_grad(true);
        Tape<double> t;
        Var loss = g.build(t);
        t.backward(loss);
        double lv = t.value(loss).data[0];
        for (Tensord* p : g.params())
            grads_out->insert(grads_out->end(), p->grad.begin(), p->grad.end());
        return lv;
    };
    std::vector<double> g1, g2;
    const double l1 = run_once(&g1);
    const double l2 = run_once(&g2);
    CHECK(std::memcmp(&l1, &l2, sizeof(double)) == 0);
    REQUIRE(g1.size() == g2.size());
    CHECK(std::memcmp(g1.data(), g2.data(), g1.size() * sizeof(double)) == 0);
}

TEST_CASE("reshape and concat reject bad shapes") {
    Tape<float> tape;
    Var a = tape.constant(Tensorf::zeros({2, 3}));
    Var b = tape.constant(Tensorf::zeros({3, 3}));
    CHECK_THROWS_AS(tape.reshape(a, {7}), ShapeError);
    CHECK_THROWS_AS(tape.concat_cols(a, b), ShapeError);
    CHECK_THROWS_AS(tape.add(a, b), ShapeError);
    CHECK_THROWS_AS(tape.sub(a, b), ShapeError);
    CHECK_THROWS_AS(tape.mul(a, b), ShapeError);
}
