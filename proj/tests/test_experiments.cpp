#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>

#include "embattr/experiments.hpp"
#include "embattr/synthdigits.hpp"

using namespace embattr;

TEST_CASE("spearman") {
    std::vector<double> inc{1, 2, 3, 4, 5};
    std::vector<double> dec{5, 4, 3, 2, 1};
    CHECK(spearman(inc, inc) == doctest::Approx(1.0));
    CHECK(spearman(inc, dec) == doctest::Approx(-1.0));

    std::vector<double> xs{1, 2, 3};
    std::vector<double> ys{1, 3, 2};
    CHECK(spearman(xs, ys) == doctest::Approx(0.5));

    std::vector<double> flat{2, 2, 2};
    CHECK(std::isnan(spearman(flat, xs)));

    CHECK_THROWS_AS(spearman(std::vector<double>{1}, std::vector<double>{1}), std::invalid_argument);

    // invariant under strictly monotone transforms
    Rng rng(5);
    std::vector<double> a(12), b(12);
    for (auto& v : a) v = rng.normal();
    for (auto& v : b) v = rng.normal();
    const double base = spearman(a, b);
    std::vector<double> at(a);
    for (auto& v : at) v = std::exp(2.0 * v) + 3.0;
    std::vector<double> bt(b);
    for (auto& v : bt) v = std::atan(v);
    CHECK(spearman(at, bt) == doctest::Approx(base).epsilon(1e-12));
}

TEST_CASE("drift at lambda zero is exactly zero and the grid keeps its identity row") {
    Dataset data = synth_digits(40, 71);
    Network net = build_model({ModelName::DriftAe, 0, 23});
    DriftSpec spec;
    spec.lambda_grid = {0.3, 0.0, 0.1};  // unsorted, contains 0
    spec.samples = 4;
    spec.seed = 5;
    ScoreConfig cfg;
    cfg.seed = 9;
    DriftResult res = run_drift(net, data, spec, cfg);
    REQUIRE(res.rows.size() == 3);
    CHECK(res.rows[0].lambda == 0.0);
    CHECK(res.rows[0].mean_rel_diff == 0.0);  // bitwise: x_0 == x, same noise draw

    DriftSpec no_zero;
    no_zero.lambda_grid = {0.2, 0.4};
    no_zero.samples = 2;
    DriftResult res2 = run_drift(net, data, no_zero, cfg);
    CHECK(res2.rows[0].lambda == 0.0);  // identity reference inserted
}

TEST_CASE("layer randomization rows and controls") {
    Dataset test = synth_digits(300, 81);
    Network base = build_model({ModelName::MnistCnn, 5, 29});
    ScoreConfig cfg;
    cfg.seed = 13;
    RandomizationResult res = run_layer_randomization(base, test, cfg, 17, 4);
    REQUIRE(res.rows.size() == 6);  // none, conv1, bn1, conv2, bn2, all
    CHECK(res.rows.front().layer == "none");
    CHECK(res.rows.back().layer == "all");
    const double base_acc = evaluate_accuracy(base, test);
    CHECK(res.rows.front().accuracy == doctest::Approx(base_acc));
    for (const auto& row : res.rows) {
        CHECK(row.avg_noise_score >= 0.0);
        CHECK(row.avg_noise_score <= 1.0);
    }
}

TEST_CASE("variance curves stay below the bound for trained and untrained") {
    Dataset data = synth_digits(40, 91);
    Network a = build_model({ModelName::ConstrainedAe, 5, 31});
    Network b = build_model({ModelName::ConstrainedAe, 5, 32});
    ScoreConfig cfg;
    cfg.seed = 3;
    cfg.samples = 4;
    cfg.binarize = 0.5;
    auto rows = run_variance_curves(a, b, data, cfg);
    REQUIRE(rows.size() == 2);
    for (const auto& r : rows) {
        CHECK(r.trained >= 0.0);
        CHECK(r.trained <= 0.25 + 1e-15);
        CHECK(r.untrained >= 0.0);
        CHECK(r.untrained <= 0.25 + 1e-15);
    }
}

TEST_CASE("sparsity study emits all scheme combinations and the variance map is sparser") {
    Dataset data = synth_digits(20, 101);
    Network net = build_model({ModelName::ConstrainedAe, 4, 33});
    std::vector<int> idx{0, 1, 2};
    Tensor xb = data.batch(idx);
    SparsityResult res = sparsity_study(net, xb, {0, 1}, SaliencyMethod::ActivationsTimesGradients);
    CHECK(res.rows.size() == 18);  // 2 probes x 9 aggregator combinations
    for (const auto& r : res.rows) {
        CHECK(r.sparsity >= 0.0);
        CHECK(r.sparsity <= 1.0);
    }
    CHECK(res.var_sparser_than_abs);

    // an all-zero stack degenerates to sparsity 0 for every scheme
    std::vector<Tensor> zero_stack(4, Tensor::zeros({1, 3, 7, 7}));
    for (auto c : {Aggregator::Mean, Aggregator::MeanAbs, Aggregator::Var})
        for (auto e : {Aggregator::Mean, Aggregator::MeanAbs, Aggregator::Var}) {
            AttributionStack st;
            st.per_dim = zero_stack;
            Tensor raw = stack_to_raw_maps(st, c, e, 28, 28);
            CHECK(sparsity(to_map(raw, 0), e == Aggregator::Mean) == 0.0);
        }
}

TEST_CASE("constrained loss equals plain loss when coefficients vanish") {
    Dataset data = synth_digits(80, 111);
    Network net = build_model({ModelName::ConstrainedAe, 3, 35});
    net.set_trainable(true);
    std::vector<int> idx{0, 1, 2, 3};
    Tensor xb = data.batch(idx);
    auto yb = data.batch_labels(idx);
    Rng nr(1);
    ConstraintCfg zero;
    Tensor l0 = constrained_loss(net, xb, yb, zero, true, nr);
    ConstraintCfg active;
    active.lambda1 = 0.5;
    active.lambda2 = 0.5;
    Tensor l1 = constrained_loss(net, xb, yb, active, false, nr);  // not applied this step
    CHECK(l0.item() == l1.item());

    Tensor l2 = constrained_loss(net, xb, yb, active, true, nr);
    CHECK(l2.item() < l0.item());  // score terms subtract
    CHECK(std::isfinite(l2.item()));
}

TEST_CASE("constrained loss gradient passes finite differences on a reduced model") {
    // 8x8 inputs keep the double-backprop check cheap
    Network net;
    net.input_shape = {1, 8, 8};
    Rng rng(55);
    Shape cur = net.input_shape;
    push_layer(net.trunk, LayerSpec::conv2d(2, 3, 1, 1), "conv1", cur, rng);
    push_layer(net.trunk, LayerSpec::batchnorm(), "bn1", cur, rng);
    push_layer(net.trunk, LayerSpec::softplus(), "sp1", cur, rng);
    net.probes.push_back({"conv1", 2});
    push_layer(net.trunk, LayerSpec::flatten(), "flatten", cur, rng);
    push_layer(net.trunk, LayerSpec::linear(3), "fc", cur, rng);
    Shape ccur = cur;
    push_layer(net.classifier, LayerSpec::linear(10), "cls", ccur, rng);
    Shape dcur = cur;
    push_layer(net.decoder, LayerSpec::linear(64), "dec", dcur, rng);
    net.set_trainable(true);

    Rng xr(7);
    Tensor xb = Tensor::uniform({2, 1, 8, 8}, 0, 1, xr);
    std::vector<int> yb{3, 7};
    ConstraintCfg cc;
    cc.lambda1 = 0.3;
    cc.lambda2 = 0.2;
    cc.probe = 0;

    auto params = net.named_parameters();
    for (const char* pname : {"conv1.weight", "fc.weight"}) {
        Tensor* w = nullptr;
        for (auto& [n, t] : params)
            if (n == pname) w = t;
        REQUIRE(w != nullptr);
        Tensor w0 = w->clone();
        auto f = [&](const Tensor& t) {
            *w = t;
            if (!w->requires_grad()) w->set_requires_grad(true);
            Rng nr(99);  // same noise draw every evaluation
            return constrained_loss(net, xb, yb, cc, true, nr);
        };
        CHECK(finite_diff_check(f, w0, 1e-5) < 1e-3);
        *w = w0;
        w->set_requires_grad(true);
    }
}
