#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "embattr/layers.hpp"

using namespace embattr;

TEST_CASE("conv2d 1x1 identity kernel is the identity map") {
    Rng rng(1);
    Tensor x = Tensor::normal({2, 1, 4, 4}, rng);
    Tensor w = Tensor::from({1, 1, 1, 1}, {1.0});
    Tensor y = conv2d(x, w, 1, 0);
    auto xd = x.data();
    auto yd = y.data();
    for (std::size_t i = 0; i < xd.size(); ++i) CHECK(yd[i] == xd[i]);
}

TEST_CASE("conv2d known value and shape errors") {
    // 2x2 input, 2x2 kernel of ones, no padding -> sum of the window
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor w = Tensor::from({1, 1, 2, 2}, {1, 1, 1, 1});
    CHECK(conv2d(x, w, 1, 0).item() == 10.0);

    Tensor wbad = Tensor::from({1, 3, 1, 1}, {1, 1, 1});
    CHECK_THROWS_WITH_AS(conv2d(x, wbad, 1, 0).item(),
                         doctest::Contains("input channels 1 do not match weight channels 3"),
                         std::invalid_argument);
}

TEST_CASE("maxpool values and ceil mode") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    CHECK(maxpool2d(x, 2, 2).item() == 4.0);

    Rng rng(5);
    Tensor z = Tensor::normal({1, 1, 7, 7}, rng);
    CHECK(maxpool2d(z, 2, 2, false).dim(2) == 3);
    CHECK(maxpool2d(z, 2, 2, true).dim(2) == 4);
}

TEST_CASE("upsample nearest block replication preserves block values and mean") {
    Tensor x = Tensor::from({1, 1, 2, 2}, {1, 2, 3, 4});
    Tensor u = upsample_nearest(x, 4, 4);
    CHECK(u.at({0, 0, 0, 0}) == 1);
    CHECK(u.at({0, 0, 1, 1}) == 1);
    CHECK(u.at({0, 0, 0, 2}) == 2);
    CHECK(u.at({0, 0, 3, 3}) == 4);
    CHECK(mean(u).item() == doctest::Approx(mean(x).item()));
    CHECK_THROWS_AS(upsample_nearest(x, 1, 1), std::invalid_argument);
}

TEST_CASE("every layer kind passes the finite-difference gradient check") {
    Rng rng(11);
    const double tol = 1e-4;
    SUBCASE("conv2d w.r.t. input and weight") {
        Tensor x = Tensor::normal({2, 2, 6, 6}, rng);
        Tensor w = Tensor::normal({3, 2, 3, 3}, rng);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv2d(t, w, 1, 1))); }, x) < tol);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv2d(x, t, 1, 1))); }, w) < tol);
        // strided
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(conv2d(t, w, 2, 1))); }, x) < tol);
    }
    SUBCASE("conv2d_transposed w.r.t. input and weight") {
        Tensor x = Tensor::normal({2, 3, 4, 4}, rng);
        Tensor w = Tensor::normal({3, 2, 3, 3}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor& t) { return sum(square(conv2d_transposed(t, w, 1, 1))); }, x) < tol);
        CHECK(finite_diff_check(
                  [&](const Tensor& t) { return sum(square(conv2d_transposed(x, t, 1, 1))); }, w) < tol);
    }
    SUBCASE("maxpool") {
        Tensor x = Tensor::normal({2, 2, 6, 6}, rng);
        CHECK(finite_diff_check([](const Tensor& t) { return sum(square(maxpool2d(t, 2, 2))); }, x) < tol);
    }
    SUBCASE("upsample") {
        Tensor x = Tensor::normal({2, 2, 3, 3}, rng);
        CHECK(finite_diff_check([](const Tensor& t) { return sum(square(upsample_nearest(t, 6, 6))); }, x) < tol);
    }
    SUBCASE("linear relu softplus sigmoid flatten as layers") {
        Rng lr(12);
        Layer lin;
        lin.spec = LayerSpec::linear(3);
        lin.name = "l";
        lin.init({5}, lr);
        LayerForwardOptions lo;
        Tensor x = Tensor::normal({2, 5}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor& t) { return sum(square(layer_forward(lin, t, lo))); }, x) < tol);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(relu(t))); }, x) < 2e-4);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(softplus(t))); }, x) < tol);
        CHECK(finite_diff_check([&](const Tensor& t) { return sum(square(sigmoid(t))); }, x) < tol);
    }
    SUBCASE("batchnorm training mode") {
        Layer bn;
        bn.spec = LayerSpec::batchnorm();
        bn.name = "bn";
        Rng br(13);
        bn.init({3}, br);
        LayerForwardOptions lo;
        lo.training = true;
        lo.update_running_stats = false;
        Tensor x = Tensor::normal({4, 3, 2, 2}, rng);
        // weight positions so the loss is not constant under standardization
        Tensor r = Tensor::normal({4, 3, 2, 2}, rng);
        CHECK(finite_diff_check(
                  [&](const Tensor& t) {
                      return sum(square(mul(layer_forward(bn, t, lo), r)));
                  },
                  x) < tol);
        CHECK(finite_diff_check(
                  [&](const Tensor& t) {
                      Layer b2 = bn;
                      b2.gamma = t;
                      return sum(square(mul(layer_forward(b2, x, lo), r)));
                  },
                  bn.gamma) < tol);
    }
}

TEST_CASE("conv2d and conv2d_transposed are adjoint") {
    // <conv(x), y> == <x, convT(y)> with shared weights
    Rng rng(17);
    Tensor x = Tensor::normal({2, 3, 6, 6}, rng);
    Tensor w = Tensor::normal({4, 3, 3, 3}, rng);  // conv weight [Co,Ci,K,K]
    Tensor y = Tensor::normal({2, 4, 6, 6}, rng);
    const double lhs = sum(mul(conv2d(x, w, 1, 1), y)).item();
    // transposed conv with weight layout [Ci=4 -> Co=3]: same array, adjoint roles
    Tensor wt = w;  // [4,3,3,3] read as conv2d_transposed weight [Cin=4, Cout=3]
    const double rhs = sum(mul(x, conv2d_transposed(y, wt, 1, 1))).item();
    CHECK(lhs == doctest::Approx(rhs).epsilon(1e-8));
}

TEST_CASE("batchnorm training output is standardized before affine") {
    Layer bn;
    bn.spec = LayerSpec::batchnorm();
    bn.name = "bn";
    Rng br(19);
    bn.init({2}, br);
    LayerForwardOptions lo;
    lo.training = true;
    Rng rng(23);
    // large-variance input so the eps in the denominator is negligible
    Tensor x = mul(Tensor::normal({8, 2, 5, 5}, rng), 20.0);
    Tensor y = layer_forward(bn, x, lo);
    for (int c = 0; c < 2; ++c) {
        double s = 0, s2 = 0;
        long n = 0;
        auto yd = y.data();
        for (int b = 0; b < 8; ++b)
            for (int k = 0; k < 25; ++k) {
                const double v = yd[(b * 2 + c) * 25 + k];
                s += v;
                s2 += v * v;
                ++n;
            }
        const double m = s / n;
        const double var = s2 / n - m * m;
        CHECK(std::abs(m) < 1e-6);
        CHECK(std::abs(var - 1.0) < 1e-6);
    }
}

TEST_CASE("batchnorm eval mode uses running statistics") {
    Layer bn;
    bn.spec = LayerSpec::batchnorm();
    bn.name = "bn";
    Rng br(29);
    bn.init({1}, br);
    bn.running_mean.mutable_data()[0] = 2.0;
    bn.running_var.mutable_data()[0] = 4.0;
    LayerForwardOptions lo;  // eval
    Tensor x = Tensor::from({1, 1, 1, 2}, {2.0, 4.0});
    Tensor y = layer_forward(bn, x, lo);
    CHECK(y.at({0, 0, 0, 0}) == doctest::Approx(0.0).epsilon(1e-9));
    CHECK(y.at({0, 0, 0, 1}) == doctest::Approx(1.0).epsilon(1e-3));  // (4-2)/sqrt(4+eps)
}

TEST_CASE("losses") {
    SUBCASE("mse of identical tensors is zero; mean convention") {
        Rng rng(31);
        Tensor x = Tensor::normal({3, 4}, rng);
        CHECK(loss_mse(x, x).item() == 0.0);
        Tensor a = Tensor::from({2}, {0, 1});
        Tensor b = Tensor::from({2}, {1, 1});
        CHECK(loss_mse(a, b).item() == doctest::Approx(0.5));
        CHECK_THROWS_AS(loss_mse(a, Tensor::zeros({3})).item(), std::invalid_argument);
    }
    SUBCASE("cross entropy of uniform logits is ln(10)") {
        Tensor logits = Tensor::zeros({4, 10});
        std::vector<int> labels{0, 3, 7, 9};
        CHECK(loss_cross_entropy(logits, labels).item() == doctest::Approx(std::log(10.0)));
    }
    SUBCASE("cross entropy label range") {
        Tensor logits = Tensor::zeros({1, 10});
        std::vector<int> bad{10};
        CHECK_THROWS_WITH_AS(loss_cross_entropy(logits, bad).item(),
                             doctest::Contains("label 10 out of range"), std::invalid_argument);
    }
    SUBCASE("cross entropy gradient check") {
        Rng rng(37);
        Tensor logits = Tensor::normal({3, 5}, rng);
        std::vector<int> labels{1, 0, 4};
        CHECK(finite_diff_check(
                  [&](const Tensor& t) { return loss_cross_entropy(t, labels); }, logits) < 1e-4);
    }
}

TEST_CASE("adam") {
    SUBCASE("zero gradient leaves parameters unchanged") {
        Tensor p = Tensor::from({2}, {1.0, -2.0});
        Tensor g = Tensor::zeros({2});
        Adam opt(1e-3);
        Tensor* pp = &p;
        opt.step(std::span<Tensor* const>(&pp, 1), std::span<const Tensor>(&g, 1));
        CHECK(p.at({0}) == 1.0);
        CHECK(p.at({1}) == -2.0);
    }
    SUBCASE("first step from zero state with unit gradient is about -lr") {
        Tensor p = Tensor::from({1}, {0.0});
        Tensor g = Tensor::from({1}, {1.0});
        Adam opt(1e-3);
        Tensor* pp = &p;
        opt.step(std::span<Tensor* const>(&pp, 1), std::span<const Tensor>(&g, 1));
        CHECK(p.item() == doctest::Approx(-1e-3).epsilon(1e-6));
    }
    SUBCASE("constant gradient step size approaches lr * sign(g)") {
        Tensor p = Tensor::from({1}, {0.0});
        Tensor g = Tensor::from({1}, {-0.5});
        Adam opt(1e-3);
        Tensor* pp = &p;
        double prev = 0;
        for (int i = 0; i < 500; ++i) {
            prev = p.item();
            opt.step(std::span<Tensor* const>(&pp, 1), std::span<const Tensor>(&g, 1));
        }
        CHECK(p.item() - prev == doctest::Approx(1e-3).epsilon(1e-3));
    }
}
