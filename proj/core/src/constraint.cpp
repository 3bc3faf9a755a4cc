#include "embattr/constraint.hpp"

#include <stdexcept>

namespace embattr {

void ConstraintCfg::validate() const {
    if (lambda1 < 0 || lambda2 < 0)
        throw std::invalid_argument("constraint: lambda coefficients must be >= 0");
    if (period < 1) throw std::invalid_argument("constraint: period must be >= 1");
}

namespace {

Tensor flat_embedding(const Tensor& emb) {
    if (emb.ndim() == 2) return emb;
    return reshape(emb, {emb.dim(0), emb.numel() / emb.dim(0)});
}

}  // namespace

Tensor constrained_loss(Network& net, const Tensor& xb, std::span<const int> yb,
                        const ConstraintCfg& cfg, bool apply_scores, Rng& noise_rng) {
    cfg.validate();
    const bool use_scores = apply_scores && cfg.active();

    Network::ForwardOptions fo;
    fo.training = true;
    if (use_scores) fo.capture = {cfg.probe};
    auto res = net.forward(xb, fo);

    Tensor loss;
    if (res.reconstruction.defined()) {
        Tensor target = xb.detach();
        if (target.shape() != res.reconstruction.shape())
            target = reshape(target, res.reconstruction.shape());
        loss = loss_mse(res.reconstruction, target);
    }
    if (res.logits.defined()) {
        Tensor ce = loss_cross_entropy(res.logits, yb);
        loss = loss.defined() ? add(loss, ce) : ce;
    }
    if (!loss.defined())
        throw std::invalid_argument("constrained_loss: network has neither decoder nor classifier");

    if (!use_scores) return loss;

    AttributionStack stack_x =
        attribute_from_forward(flat_embedding(res.embedding), res.captured[0], cfg.probe,
                               cfg.method, /*differentiable=*/true);

    if (cfg.lambda2 > 0) {
        Tensor v = variance_score_term(stack_x, cfg.channel_agg);
        loss = sub(loss, mul(v, cfg.lambda2));
    }

    if (cfg.lambda1 > 0) {
        Tensor x_noise = Tensor::uniform(xb.shape(), 0.0, 1.0, noise_rng);
        Network::ForwardOptions fn;
        fn.training = true;
        fn.update_running_stats = false;  // noise batches do not pollute BN state
        fn.with_classifier = false;
        fn.with_decoder = false;
        fn.capture = {cfg.probe};
        auto rn = net.forward(x_noise, fn);
        AttributionStack stack_n =
            attribute_from_forward(flat_embedding(rn.embedding), rn.captured[0], cfg.probe,
                                   cfg.method, /*differentiable=*/true);
        const int h = static_cast<int>(net.input_shape[net.input_shape.size() - 2]);
        const int w = static_cast<int>(net.input_shape[net.input_shape.size() - 1]);
        Tensor mx = stack_to_maps(stack_x, cfg.channel_agg, cfg.embedding_agg, h, w);
        Tensor mn = stack_to_maps(stack_n, cfg.channel_agg, cfg.embedding_agg, h, w);
        Tensor n_term = mean(abs(sub(mx, mn)));
        loss = sub(loss, mul(n_term, cfg.lambda1));
    }
    return loss;
}

}  // namespace embattr
