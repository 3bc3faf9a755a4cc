#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "embattr/aggregation.hpp"
#include "embattr/rng.hpp"

using namespace embattr;

TEST_CASE("aggregator worked examples") {
    const std::vector<double> x1{-1, 1, 0, 0};
    const std::vector<double> x2{1, 1, 1, 0};
    CHECK(aggregate(x1, Aggregator::Mean) == 0.0);
    CHECK(aggregate(x1, Aggregator::Var) == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(aggregate(x2, Aggregator::Var) == doctest::Approx(1.0 / 4.0).epsilon(1e-15));
    CHECK(aggregate(x2, Aggregator::Mean) == doctest::Approx(3.0 / 4.0).epsilon(1e-15));
    CHECK(aggregate(x1, Aggregator::MeanAbs) == doctest::Approx(0.5).epsilon(1e-15));
    CHECK_THROWS_AS(aggregate(std::vector<double>{}, Aggregator::Mean), std::invalid_argument);
    // single element: sample variance defined as zero
    CHECK(aggregate(std::vector<double>{3.0}, Aggregator::Var) == 0.0);
}

TEST_CASE("appendix inequality: Var <= E(1-E) <= E on [0,1] multisets") {
    Rng rng(123);
    for (int trial = 0; trial < 20000; ++trial) {
        const int n = 1 + static_cast<int>(rng.uniform_int(16));
        std::vector<double> v(static_cast<std::size_t>(n));
        for (auto& x : v) x = rng.uniform();
        const double e = aggregate(v, Aggregator::MeanAbs);
        const double var = variance_population(v);
        CHECK(var <= e * (1 - e) + 1e-12);
        CHECK(e * (1 - e) <= e + 1e-12);
    }
    // equality only at the all-zero multiset
    std::vector<double> zeros(5, 0.0);
    CHECK(variance_population(zeros) == 0.0);
    CHECK(aggregate(zeros, Aggregator::MeanAbs) == 0.0);
}

TEST_CASE("normalize") {
    Map2D m(1, 3);
    m.v = {0, 5, 10};
    Map2D n = normalize(m);
    CHECK(n.v[0] == 0.0);
    CHECK(n.v[1] == doctest::Approx(0.5));
    CHECK(n.v[2] == 1.0);

    Map2D c(2, 2);
    c.v = {3, 3, 3, 3};
    Map2D nc = normalize(c);
    for (double v : nc.v) CHECK(v == 0.0);  // constant map convention

    Map2D already(1, 2);
    already.v = {0, 1};
    Map2D na = normalize(already);
    CHECK(na.v[0] == 0.0);
    CHECK(na.v[1] == 1.0);
}

TEST_CASE("normalize is invariant under positive affine transforms") {
    Rng rng(7);
    for (int trial = 0; trial < 200; ++trial) {
        Map2D m(4, 4);
        for (auto& v : m.v) v = rng.normal();
        const double a = rng.uniform(0.1, 5.0);
        const double b = rng.uniform(-3.0, 3.0);
        Map2D t = m;
        for (auto& v : t.v) v = a * v + b;
        Map2D n1 = normalize(m), n2 = normalize(t);
        for (std::size_t i = 0; i < n1.v.size(); ++i)
            CHECK(n1.v[i] == doctest::Approx(n2.v[i]).epsilon(1e-9));
    }
}

TEST_CASE("upscale") {
    Map2D one(1, 1);
    one.v = {0.7};
    Map2D big = upscale(one, 3, 5);
    for (double v : big.v) CHECK(v == 0.7);

    Map2D m(2, 2);
    m.v = {1, 2, 3, 4};
    Map2D u = upscale(m, 4, 4);
    CHECK(u.at(0, 0) == 1);
    CHECK(u.at(1, 1) == 1);
    CHECK(u.at(0, 3) == 2);
    CHECK(u.at(3, 0) == 3);
    CHECK(u.at(3, 3) == 4);

    // integral factor preserves the mean exactly
    Map2D s(7, 7);
    Rng rng(9);
    for (auto& v : s.v) v = rng.uniform();
    Map2D up = upscale(s, 28, 28);
    double m1 = 0, m2 = 0;
    for (double v : s.v) m1 += v;
    for (double v : up.v) m2 += v;
    CHECK(m1 / 49 == doctest::Approx(m2 / 784).epsilon(1e-12));

    CHECK_THROWS_AS(upscale(s, 5, 5), std::invalid_argument);
}

TEST_CASE("sparsity") {
    Map2D onehot(3, 3);
    onehot.v.assign(9, 0.0);
    onehot.v[4] = 5.0;
    CHECK(sparsity(onehot) == doctest::Approx(1.0 / 9.0));

    Map2D constant(2, 2);
    constant.v.assign(4, 2.5);
    CHECK(sparsity(constant) == 0.0);

    Map2D checker(2, 2);
    checker.v = {0, 1, 1, 0};
    CHECK(sparsity(checker) == doctest::Approx(0.5));

    // sparsity is always within [0,1]
    Rng rng(17);
    for (int t = 0; t < 200; ++t) {
        Map2D m(5, 5);
        for (auto& v : m.v) v = rng.normal() * 10;
        const double s = sparsity(m, true);
        CHECK(s >= 0.0);
        CHECK(s <= 1.0);
    }
}

TEST_CASE("channel aggregation on tensors") {
    // 2-channel stack {a, -a}: Mean cancels, MeanAbs keeps |a|
    Tensor a = Tensor::from({1, 2, 1, 2}, {1.0, -2.0, -1.0, 2.0});
    std::vector<Tensor> stack{a};
    auto m = channel_aggregate(stack, Aggregator::Mean);
    CHECK(m[0].at({0, 0, 0, 0}) == 0.0);
    CHECK(m[0].at({0, 0, 0, 1}) == 0.0);
    auto ab = channel_aggregate(stack, Aggregator::MeanAbs);
    CHECK(ab[0].at({0, 0, 0, 0}) == 1.0);
    CHECK(ab[0].at({0, 0, 0, 1}) == 2.0);

    // single channel: identity for Mean/MeanAbs-on-positives, zero for Var
    Tensor one = Tensor::from({1, 1, 1, 2}, {3.0, 4.0});
    std::vector<Tensor> s1{one};
    CHECK(channel_aggregate(s1, Aggregator::Mean)[0].at({0, 0, 0, 1}) == 4.0);
    CHECK(channel_aggregate(s1, Aggregator::Var)[0].at({0, 0, 0, 1}) == 0.0);

    // all-zero stack aggregates to zero under every aggregator
    Tensor z = Tensor::zeros({1, 3, 2, 2});
    std::vector<Tensor> sz{z};
    for (auto agg : {Aggregator::Mean, Aggregator::MeanAbs, Aggregator::Var}) {
        Tensor out = channel_aggregate(sz, agg)[0];
        for (double v : out.data()) CHECK(v == 0.0);
    }
}

TEST_CASE("embedding aggregation") {
    Tensor m1 = Tensor::from({1, 1, 1, 2}, {1.0, 2.0});
    // singleton with Mean: unchanged
    auto r = embedding_aggregate({m1}, Aggregator::Mean);
    CHECK(r.at({0, 0, 0, 0}) == 1.0);
    // identical maps with Var: zero map
    auto rv = embedding_aggregate({m1, m1, m1}, Aggregator::Var);
    for (double v : rv.data()) CHECK(v == 0.0);
    // indicator maps under Mean: uniform 1/N
    const int n = 4;
    std::vector<Tensor> ind;
    for (int i = 0; i < n; ++i) {
        std::vector<double> v(n, 0.0);
        v[static_cast<std::size_t>(i)] = 1.0;
        ind.push_back(Tensor::from({1, 1, 1, n}, std::move(v)));
    }
    auto u = embedding_aggregate(ind, Aggregator::Mean);
    for (double v : u.data()) CHECK(v == doctest::Approx(1.0 / n));
}

TEST_CASE("mean channel and embedding aggregation commute") {
    Rng rng(21);
    std::vector<Tensor> stack;
    for (int i = 0; i < 5; ++i) stack.push_back(Tensor::normal({2, 3, 4, 4}, rng));
    Tensor ce = embedding_aggregate(channel_aggregate(stack, Aggregator::Mean), Aggregator::Mean);
    // dims first: aggregate across i at full channel resolution, then channels
    Tensor dims_first = embedding_aggregate(stack, Aggregator::Mean);
    Tensor ec = channel_aggregate({dims_first}, Aggregator::Mean)[0];
    auto a = ce.data();
    auto b = ec.data();
    for (std::size_t i = 0; i < a.size(); ++i) CHECK(a[i] == doctest::Approx(b[i]).epsilon(1e-12));
}

TEST_CASE("normalize_per_sample handles degenerate slices") {
    Tensor maps = Tensor::from({2, 1, 1, 3}, {1, 2, 3, 5, 5, 5});
    Tensor n = normalize_per_sample(maps);
    CHECK(n.at({0, 0, 0, 0}) == 0.0);
    CHECK(n.at({0, 0, 0, 1}) == doctest::Approx(0.5));
    CHECK(n.at({0, 0, 0, 2}) == 1.0);
    // constant slice -> zeros
    CHECK(n.at({1, 0, 0, 0}) == 0.0);
    CHECK(n.at({1, 0, 0, 2}) == 0.0);
}

TEST_CASE("scalar and tensor aggregation agree") {
    Rng rng(33);
    Tensor t = Tensor::normal({1, 6, 1, 4}, rng);
    auto td = t.data();
    for (auto agg : {Aggregator::Mean, Aggregator::MeanAbs, Aggregator::Var}) {
        Tensor ca = channel_aggregate({t}, agg)[0];
        for (int p = 0; p < 4; ++p) {
            std::vector<double> col;
            for (int c = 0; c < 6; ++c) col.push_back(td[c * 4 + p]);
            CHECK(ca.at({0, 0, 0, p}) == doctest::Approx(aggregate(col, agg)).epsilon(1e-12));
        }
    }
}
