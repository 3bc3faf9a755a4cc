#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "embattr/tensor.hpp"

using namespace embattr;

TEST_CASE("elementwise ops on small tensors") {
    Tensor a = Tensor::from({2}, {1, 2});
    Tensor b = Tensor::from({2}, {3, 4});
    Tensor s = add(a, b);
    CHECK(s.at({0}) == 4.0);
    CHECK(s.at({1}) == 6.0);

    Tensor z = mul(a, Tensor::zeros({2}));
    CHECK(z.at({0}) == 0.0);
    CHECK(z.at({1}) == 0.0);

    CHECK_THROWS_WITH_AS(add(Tensor::zeros({2, 3}), Tensor::zeros({2, 4})).item(),
                         doctest::Contains("dim 1: 3 vs 4"), std::invalid_argument);
}

TEST_CASE("matmul identity and mismatch error") {
    Tensor eye = Tensor::from({3, 3}, {1, 0, 0, 0, 1, 0, 0, 0, 1});
    Tensor m = Tensor::from({3, 2}, {1, 2, 3, 4, 5, 6});
    Tensor r = matmul(eye, m);
    for (int i = 0; i < 3; ++i)
        for (int j = 0; j < 2; ++j) CHECK(r.at({i, j}) == m.at({i, j}));
    CHECK_THROWS_AS(matmul(m, m), std::invalid_argument);
}

TEST_CASE("broadcasting add/mul with channel vectors") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor row = Tensor::from({1, 3}, {10, 20, 30});
    Tensor y = add(x, row);
    CHECK(y.at({0, 0}) == 11);
    CHECK(y.at({1, 2}) == 36);

    Tensor c = Tensor::from({2, 1}, {2, 3});
    Tensor z = mul(x, c);
    CHECK(z.at({0, 2}) == 6);
    CHECK(z.at({1, 0}) == 12);
}

TEST_CASE("simple gradients") {
    SUBCASE("d(x^2)/dx at 3 is 6") {
        Tensor x = Tensor::scalar(3.0);
        x.set_requires_grad(true);
        Tensor y = square(x);
        Tensor g = grad(y, x);
        CHECK(g.item() == doctest::Approx(6.0));
    }
    SUBCASE("d softplus / dx at 0 is 0.5") {
        Tensor x = Tensor::scalar(0.0);
        x.set_requires_grad(true);
        Tensor g = grad(softplus(x), x);
        CHECK(g.item() == doctest::Approx(0.5));
    }
    SUBCASE("second derivative of x^3 at 2 is 12") {
        Tensor x = Tensor::scalar(2.0);
        x.set_requires_grad(true);
        Tensor y = mul(square(x), x);
        Tensor g1 = grad(y, x, {.create_graph = true});
        Tensor g2 = grad(g1, x);
        CHECK(g2.item() == doctest::Approx(12.0));
    }
    SUBCASE("non-scalar output rejected") {
        Tensor x = Tensor::from({2}, {1, 2});
        x.set_requires_grad(true);
        CHECK_THROWS_AS(grad(square(x), x), std::invalid_argument);
    }
    SUBCASE("unreachable wrt yields zeros") {
        Tensor x = Tensor::scalar(1.0);
        Tensor u = Tensor::from({3}, {1, 2, 3});
        x.set_requires_grad(true);
        u.set_requires_grad(true);
        Tensor g = grad(square(x), u);
        CHECK(g.shape() == Shape{3});
        for (int i = 0; i < 3; ++i) CHECK(g.at({i}) == 0.0);
    }
}

TEST_CASE("gradient linearity over a batch") {
    Rng rng(7);
    Tensor x = Tensor::normal({4, 5}, rng);
    x.set_requires_grad(true);
    Tensor total = sum(mul(square(x), 0.5));
    Tensor g_total = grad(total, x);
    // per-sample gradients sum to the batch gradient by construction of sum
    auto xd = x.data();
    for (int i = 0; i < 4; ++i)
        for (int j = 0; j < 5; ++j) CHECK(g_total.at({i, j}) == doctest::Approx(xd[i * 5 + j]));
}

TEST_CASE("finite differences validate primitive gradients") {
    Rng rng(42);
    SUBCASE("sum of squares") {
        Tensor x = Tensor::normal({8}, rng);
        const double err = finite_diff_check([](const Tensor& t) { return sum(square(t)); }, x);
        CHECK(err < 1e-4);
    }
    SUBCASE("constant function has zero gradient") {
        Tensor x = Tensor::normal({4}, rng);
        const double err = finite_diff_check([](const Tensor&) { return Tensor::scalar(5.0); }, x);
        CHECK(err == 0.0);
    }
    SUBCASE("100 random trials over a mixed expression") {
        for (int trial = 0; trial < 100; ++trial) {
            Tensor x = Tensor::normal({6}, rng);
            auto f = [](const Tensor& t) {
                Tensor a = softplus(t);
                Tensor b = sigmoid(mul(t, 0.7));
                return sum(mul(a, b)) + mean(square(t));
            };
            CHECK(finite_diff_check(f, x) < 1e-4);
        }
    }
    SUBCASE("matmul") {
        Tensor x = Tensor::normal({3, 4}, rng);
        Tensor w = Tensor::normal({4, 2}, rng);
        auto f = [&](const Tensor& t) { return sum(square(matmul(t, w))); };
        CHECK(finite_diff_check(f, x) < 1e-4);
    }
    SUBCASE("reductions with axes, min/max") {
        Tensor x = Tensor::normal({3, 4, 2}, rng);
        auto f = [](const Tensor& t) {
            Tensor m = mean(t, {0, 2}, true);
            Tensor r = reduce_max(t, {1}, false);
            return sum(square(m)) + sum(r) + sum(reduce_min(t, {0, 1, 2}, false));
        };
        CHECK(finite_diff_check(f, x) < 1e-4);
    }
    SUBCASE("exp log sqrt abs div") {
        Tensor x = Tensor::uniform({6}, 0.5, 2.0, rng);
        auto f = [](const Tensor& t) {
            return sum(div(exp(log(sqrt(t))), add(abs(t), 1.0)));
        };
        CHECK(finite_diff_check(f, x) < 1e-4);
    }
    SUBCASE("broadcasting binary ops") {
        Tensor x = Tensor::normal({2, 3, 2, 2}, rng);
        Tensor c = Tensor::normal({1, 3, 1, 1}, rng);
        c.set_requires_grad(true);
        auto f = [&](const Tensor& t) { return sum(square(mul(add(t, c.detach()), c.detach()))); };
        CHECK(finite_diff_check(f, x) < 1e-4);
    }
    SUBCASE("logsumexp rows") {
        Tensor x = Tensor::normal({4, 5}, rng);
        auto f = [](const Tensor& t) { return sum(logsumexp_rows(t)); };
        CHECK(finite_diff_check(f, x) < 1e-4);
    }
    SUBCASE("crop and pad") {
        Tensor x = Tensor::normal({2, 1, 5, 5}, rng);
        auto f = [](const Tensor& t) {
            return sum(square(pad2d(crop2d(t, 1, 1, 3, 3), 0, 1, 0, 1)));
        };
        CHECK(finite_diff_check(f, x) < 1e-4);
    }
}

TEST_CASE("double backprop matches finite differences of the analytic gradient") {
    Rng rng(3);
    Tensor x0 = Tensor::normal({5}, rng);
    // g(x) = d/dx [ sum(softplus(x)^2) ]; check grad of sum(g) by finite differences
    auto grad_sum = [](const Tensor& t) {
        Tensor tt = t;
        if (!tt.requires_grad()) tt.set_requires_grad(true);
        Tensor y = sum(square(softplus(tt)));
        Tensor g = grad(y, tt, {.create_graph = true});
        return sum(g);
    };
    CHECK(finite_diff_check(grad_sum, x0, 1e-5) < 1e-3);
}

TEST_CASE("reshape and broadcast_to round trips") {
    Tensor x = Tensor::from({2, 3}, {1, 2, 3, 4, 5, 6});
    Tensor r = reshape(x, {3, 2});
    CHECK(r.at({2, 1}) == 6);
    CHECK_THROWS_AS(reshape(x, {4, 2}), std::invalid_argument);

    Tensor b = broadcast_to(Tensor::from({1, 3}, {1, 2, 3}), {2, 3});
    CHECK(b.at({1, 2}) == 3);
}

TEST_CASE("gather and scatter adjoint pair") {
    auto idx = std::make_shared<std::vector<std::int64_t>>(std::vector<std::int64_t>{2, 0, 2});
    Tensor x = Tensor::from({3}, {10, 20, 30});
    x.set_requires_grad(true);
    Tensor g = index_gather(x, idx, {3});
    CHECK(g.at({0}) == 30);
    CHECK(g.at({1}) == 10);
    Tensor gr = grad(sum(g), x);
    CHECK(gr.at({0}) == 1);
    CHECK(gr.at({1}) == 0);
    CHECK(gr.at({2}) == 2);
}

TEST_CASE("tensors stay finite and clone/detach semantics hold") {
    Tensor x = Tensor::from({2}, {1, 2});
    x.set_requires_grad(true);
    Tensor d = x.detach();
    CHECK(!d.requires_grad());
    Tensor c = x.clone();
    c.mutable_data()[0] = 99;
    CHECK(x.at({0}) == 1.0);  // deep copy
    CHECK(d.at({0}) == 1.0);
    CHECK(x.all_finite());
}
