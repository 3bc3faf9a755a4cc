#include "embattr/models.hpp"

#include <cmath>
#include <iostream>
#include <numeric>
#include <stdexcept>

namespace embattr {

const char* model_name_str(ModelName m) {
    switch (m) {
        case ModelName::DriftAe: return "drift_ae";
        case ModelName::ConstrainedAe: return "constrained_ae";
        case ModelName::MnistCnn: return "mnist_cnn";
    }
    return "?";
}

std::optional<ModelName> model_from_name(const std::string& s) {
    if (s == "drift_ae") return ModelName::DriftAe;
    if (s == "constrained_ae") return ModelName::ConstrainedAe;
    if (s == "mnist_cnn") return ModelName::MnistCnn;
    return std::nullopt;
}

int default_epochs(const ModelRecipe& r) {
    if (r.name == ModelName::DriftAe) return 5;
    switch (r.bottleneck) {
        case 2: return 20;
        case 3: return 15;
        case 5: return 10;
        case 10: return 5;
        default: return 10;
    }
}

namespace {

void build_constrained_encoder(Network& net, int bottleneck, Shape& cur, Rng& rng) {
    push_layer(net.trunk, LayerSpec::conv2d(8, 5, 1, 2), "conv1", cur, rng);
    push_layer(net.trunk, LayerSpec::batchnorm(), "bn1", cur, rng);
    push_layer(net.trunk, LayerSpec::softplus(), "sp1", cur, rng);
    net.probes.push_back({"conv1", static_cast<int>(net.trunk.size()) - 1});
    push_layer(net.trunk, LayerSpec::conv2d(4, 5, 1, 2), "conv2", cur, rng);
    push_layer(net.trunk, LayerSpec::batchnorm(), "bn2", cur, rng);
    push_layer(net.trunk, LayerSpec::softplus(), "sp2", cur, rng);
    net.probes.push_back({"conv2", static_cast<int>(net.trunk.size()) - 1});
    push_layer(net.trunk, LayerSpec::flatten(), "flatten", cur, rng);
    push_layer(net.trunk, LayerSpec::linear(bottleneck), "fc", cur, rng);
}

}  // namespace

Network build_model(const ModelRecipe& r) {
    Rng rng(r.seed);
    Network net;
    net.input_shape = {1, 28, 28};
    Shape cur = net.input_shape;

    switch (r.name) {
        case ModelName::DriftAe: {
            const int enc_units[3] = {8, 4, 2};
            for (int i = 0; i < 3; ++i) {
                const std::string n = std::to_string(i + 1);
                push_layer(net.trunk, LayerSpec::conv2d(enc_units[i], 5, 1, 2), "conv" + n, cur, rng);
                push_layer(net.trunk, LayerSpec::batchnorm(), "bn" + n, cur, rng);
                push_layer(net.trunk, LayerSpec::relu(), "relu" + n, cur, rng);
                push_layer(net.trunk, LayerSpec::maxpool(2, /*ceil_mode=*/true), "pool" + n, cur, rng);
                net.probes.push_back({"conv" + n, static_cast<int>(net.trunk.size()) - 1});
            }
            // bottleneck [2,4,4] = 32 dims; decoder upsamples back to 32x32 and crops
            Shape dcur = cur;
            push_layer(net.decoder, LayerSpec::upsample_x2(), "up1", dcur, rng);
            push_layer(net.decoder, LayerSpec::conv2d(4, 5, 1, 2), "dec1", dcur, rng);
            push_layer(net.decoder, LayerSpec::batchnorm(), "dbn1", dcur, rng);
            push_layer(net.decoder, LayerSpec::relu(), "drelu1", dcur, rng);
            push_layer(net.decoder, LayerSpec::upsample_x2(), "up2", dcur, rng);
            push_layer(net.decoder, LayerSpec::conv2d(8, 5, 1, 2), "dec2", dcur, rng);
            push_layer(net.decoder, LayerSpec::batchnorm(), "dbn2", dcur, rng);
            push_layer(net.decoder, LayerSpec::relu(), "drelu2", dcur, rng);
            push_layer(net.decoder, LayerSpec::upsample_x2(), "up3", dcur, rng);
            push_layer(net.decoder, LayerSpec::conv2d(1, 5, 1, 2), "dec3", dcur, rng);
            push_layer(net.decoder, LayerSpec::sigmoid_out(), "dsig", dcur, rng);
            push_layer(net.decoder, LayerSpec::center_crop(28, 28), "dcrop", dcur, rng);
            break;
        }
        case ModelName::ConstrainedAe: {
            build_constrained_encoder(net, r.bottleneck, cur, rng);
            Shape ccur = cur;
            push_layer(net.classifier, LayerSpec::linear(10), "cls", ccur, rng);
            Shape dcur = cur;
            push_layer(net.decoder, LayerSpec::linear(32), "dec1", dcur, rng);
            push_layer(net.decoder, LayerSpec::relu(), "drelu", dcur, rng);
            push_layer(net.decoder, LayerSpec::linear(28 * 28), "dec2", dcur, rng);
            break;
        }
        case ModelName::MnistCnn: {
            build_constrained_encoder(net, r.bottleneck, cur, rng);
            Shape ccur = cur;
            push_layer(net.classifier, LayerSpec::linear(10), "cls", ccur, rng);
            break;
        }
    }
    return net;
}

double evaluate_accuracy(Network& net, const Dataset& data, int batch_size) {
    if (!net.has_classifier())
        throw std::invalid_argument("evaluate_accuracy: network has no classifier head");
    autograd::NoGradGuard ng;
    Network::ForwardOptions fo;
    fo.with_decoder = false;
    std::int64_t correct = 0;
    for (int off = 0; off < data.count; off += batch_size) {
        const int n = std::min(batch_size, data.count - off);
        std::vector<int> idx(static_cast<std::size_t>(n));
        std::iota(idx.begin(), idx.end(), off);
        Tensor xb = data.batch(idx);
        auto res = net.forward(xb, fo);
        const std::int64_t k = res.logits.dim(1);
        auto lg = res.logits.data();
        for (int j = 0; j < n; ++j) {
            std::int64_t best = 0;
            for (std::int64_t c = 1; c < k; ++c)
                if (lg[j * k + c] > lg[j * k + best]) best = c;
            if (best == data.labels[static_cast<std::size_t>(off + j)]) ++correct;
        }
    }
    return 100.0 * static_cast<double>(correct) / static_cast<double>(data.count);
}

TrainResult train_model(Network& net, const Dataset& train, const Dataset& test,
                        const TrainConfig& cfg) {
    if (cfg.epochs < 1) throw std::invalid_argument("train_model: epochs must be >= 1");
    if (cfg.batch_size < 1) throw std::invalid_argument("train_model: batch_size must be >= 1");

    net.set_trainable(true);
    auto params = net.parameters();
    std::vector<Tensor> wrt;
    wrt.reserve(params.size());
    for (auto* p : params) wrt.push_back(*p);

    Adam adam(cfg.lr);
    Rng shuffle_rng = Rng(cfg.seed).stream(1);
    Rng noise_rng = Rng(cfg.seed).stream(2);
    const ConstraintCfg ccfg = cfg.constraint.value_or(ConstraintCfg{});

    std::vector<int> order(static_cast<std::size_t>(train.count));
    std::iota(order.begin(), order.end(), 0);

    TrainResult result;
    long step = 0;
    for (int ep = 0; ep < cfg.epochs; ++ep) {
        shuffle_rng.shuffle(order);
        double loss_sum = 0;
        long batches = 0;
        for (std::size_t off = 0; off < order.size(); off += static_cast<std::size_t>(cfg.batch_size)) {
            const std::size_t n =
                std::min<std::size_t>(static_cast<std::size_t>(cfg.batch_size), order.size() - off);
            std::span<const int> idx(order.data() + off, n);
            Tensor xb = train.batch(idx);
            const std::vector<int> yb = train.batch_labels(idx);

            const bool apply = cfg.constraint.has_value() && ccfg.active() &&
                               (step % static_cast<long>(ccfg.period) == 0);
            Tensor loss = constrained_loss(net, xb, yb, ccfg, apply, noise_rng);
            const double lv = loss.item();
            if (!std::isfinite(lv))
                throw std::runtime_error("train_model: training diverged (non-finite loss) at step " +
                                         std::to_string(step));
            auto grads = grad(loss, wrt);
            adam.step(params, grads);
            loss_sum += lv;
            ++batches;
            ++step;
        }
        EpochStats st;
        st.epoch = ep + 1;
        st.train_loss = loss_sum / static_cast<double>(batches);
        st.test_accuracy =
            net.has_classifier() ? evaluate_accuracy(net, test) : std::nan("");
        if (cfg.log_to_stderr) {
            std::cerr << "epoch " << st.epoch << "/" << cfg.epochs << " loss " << st.train_loss
                      << " acc " << st.test_accuracy << "\n";
        }
        result.log.push_back(st);
    }
    return result;
}

}  // namespace embattr
