#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdio>
#include <filesystem>

#include "embattr/models.hpp"
#include "embattr/network.hpp"

using namespace embattr;

namespace {

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST_CASE("drift_ae shapes: probes, bottleneck, reconstruction") {
    Network net = build_model({ModelName::DriftAe, 0, 5});
    CHECK(net.probe_count() == 3);
    CHECK(net.probe_shape(0) == Shape{8, 14, 14});
    CHECK(net.probe_shape(1) == Shape{4, 7, 7});
    CHECK(net.probe_shape(2) == Shape{2, 4, 4});
    CHECK(net.embedding_dim() == 32);

    Rng rng(3);
    Tensor x = Tensor::uniform({2, 1, 28, 28}, 0, 1, rng);
    auto res = net.forward(x);
    CHECK(res.reconstruction.shape() == Shape{2, 1, 28, 28});
    // sigmoid output bounds
    for (double v : res.reconstruction.data()) {
        CHECK(v >= 0.0);
        CHECK(v <= 1.0);
    }
}

TEST_CASE("constrained_ae shapes") {
    Network net = build_model({ModelName::ConstrainedAe, 10, 5});
    CHECK(net.embedding_dim() == 10);
    CHECK(net.probe_count() == 2);
    CHECK(net.probe_shape(1) == Shape{4, 28, 28});
    Rng rng(3);
    Tensor x = Tensor::uniform({3, 1, 28, 28}, 0, 1, rng);
    auto res = net.forward(x);
    CHECK(res.logits.shape() == Shape{3, 10});
    CHECK(res.reconstruction.shape() == Shape{3, 784});
    CHECK(res.embedding.shape() == Shape{3, 10});

    Network cnn = build_model({ModelName::MnistCnn, 10, 5});
    CHECK(cnn.has_classifier());
    CHECK(!cnn.has_decoder());
}

TEST_CASE("forward validates input shape and probe ids") {
    Network net = build_model({ModelName::ConstrainedAe, 5, 1});
    Rng rng(1);
    Tensor bad = Tensor::uniform({2, 1, 14, 14}, 0, 1, rng);
    CHECK_THROWS_AS(net.forward(bad), std::invalid_argument);
    Network::ForwardOptions fo;
    fo.capture = {7};
    Tensor ok = Tensor::uniform({1, 1, 28, 28}, 0, 1, rng);
    CHECK_THROWS_WITH_AS(net.forward(ok, fo), doctest::Contains("unknown probe 7"),
                         std::invalid_argument);
}

TEST_CASE("same seed rebuild is bit-identical; different seed differs") {
    Network a = build_model({ModelName::ConstrainedAe, 5, 42});
    Network b = build_model({ModelName::ConstrainedAe, 5, 42});
    Network c = build_model({ModelName::ConstrainedAe, 5, 43});
    auto pa = a.named_parameters();
    auto pb = b.named_parameters();
    auto pc = c.named_parameters();
    REQUIRE(pa.size() == pb.size());
    bool any_diff_c = false;
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto da = pa[i].second->data();
        auto db = pb[i].second->data();
        auto dc = pc[i].second->data();
        for (std::size_t j = 0; j < da.size(); ++j) {
            CHECK(da[j] == db[j]);
            if (da[j] != dc[j]) any_diff_c = true;
        }
    }
    CHECK(any_diff_c);
}

TEST_CASE("checkpoint round trip is exact and validates") {
    Network net = build_model({ModelName::DriftAe, 0, 7});
    const std::string path = temp_path("embattr_test_ckpt.bin");
    net.save_checkpoint(path);

    Network other = build_model({ModelName::DriftAe, 0, 8});
    other.load_checkpoint(path);
    auto pa = net.named_state();
    auto pb = other.named_state();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto da = pa[i].second->data();
        auto db = pb[i].second->data();
        REQUIRE(da.size() == db.size());
        for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == db[j]);
    }

    Network wrong = build_model({ModelName::ConstrainedAe, 5, 1});
    CHECK_THROWS_AS(wrong.load_checkpoint(path), std::runtime_error);

    // corrupt magic
    {
        std::FILE* f = std::fopen(path.c_str(), "r+b");
        std::fputc('X', f);
        std::fclose(f);
        CHECK_THROWS_WITH_AS(net.load_checkpoint(path), doctest::Contains("bad magic"),
                             std::runtime_error);
    }
    std::filesystem::remove(path);
}

TEST_CASE("clone is deep and layer reinit touches only the target") {
    Network base = build_model({ModelName::MnistCnn, 10, 11});
    Network copy = base.clone();
    Rng rng(99);
    copy.reinit_layer("conv2", rng);

    Network base2 = build_model({ModelName::MnistCnn, 10, 11});
    auto pa = base.named_parameters();
    auto pb = copy.named_parameters();
    auto pr = base2.named_parameters();
    for (std::size_t i = 0; i < pa.size(); ++i) {
        auto da = pa[i].second->data();
        auto db = pb[i].second->data();
        auto dr = pr[i].second->data();
        const bool is_target = pa[i].first.rfind("conv2.", 0) == 0;
        bool identical = true;
        for (std::size_t j = 0; j < da.size(); ++j)
            if (da[j] != db[j]) identical = false;
        CHECK(identical == !is_target);
        // base itself untouched by the clone's surgery
        for (std::size_t j = 0; j < da.size(); ++j) CHECK(da[j] == dr[j]);
    }
    CHECK_THROWS_AS(copy.reinit_layer("nope", rng), std::invalid_argument);
}

TEST_CASE("stop-gradient capture cuts the graph at the probe") {
    Network net = build_model({ModelName::ConstrainedAe, 5, 3});
    net.set_trainable(true);
    Rng rng(5);
    Tensor x = Tensor::uniform({2, 1, 28, 28}, 0, 1, rng);
    Network::ForwardOptions fo;
    fo.capture = {1};
    fo.capture_stop_gradient = true;
    fo.with_classifier = false;
    fo.with_decoder = false;
    auto res = net.forward(x, fo);
    Tensor loss = sum(square(res.embedding));
    // conv1 weight is below the cut: gradient must be zero
    Tensor gw1 = grad(loss, *net.named_parameters()[0].second);
    bool all_zero = true;
    for (double v : gw1.data())
        if (v != 0) all_zero = false;
    CHECK(all_zero);
    // probe itself gets a gradient
    Tensor gp = grad(loss, res.captured[0]);
    bool any = false;
    for (double v : gp.data())
        if (v != 0) any = true;
    CHECK(any);
}
