#include "embattr/saliency.hpp"

#include <memory>
#include <stdexcept>

namespace embattr {

const char* saliency_method_name(SaliencyMethod m) {
    switch (m) {
        case SaliencyMethod::VanillaGradients: return "vanilla";
        case SaliencyMethod::ActivationsTimesGradients: return "actxgrad";
        case SaliencyMethod::GradCAM: return "gradcam";
    }
    return "?";
}

std::optional<SaliencyMethod> saliency_method_from_name(const std::string& s) {
    if (s == "vanilla" || s == "gradients") return SaliencyMethod::VanillaGradients;
    if (s == "actxgrad" || s == "activations_x_gradients") return SaliencyMethod::ActivationsTimesGradients;
    if (s == "gradcam" || s == "grad-cam") return SaliencyMethod::GradCAM;
    return std::nullopt;
}

namespace {

Tensor as_bchw(const Tensor& act) {
    // dense activations [B,F] are treated as single-channel 1xF maps
    if (act.ndim() == 4) return act;
    if (act.ndim() == 2) return reshape(act, {act.dim(0), 1, 1, act.dim(1)});
    throw std::invalid_argument("attribute: unsupported probe activation shape " +
                                shape_str(act.shape()));
}

}  // namespace

AttributionStack attribute_from_forward(const Tensor& embedding, const Tensor& probe_act, int probe,
                                        SaliencyMethod method, bool differentiable) {
    if (embedding.ndim() != 2)
        throw std::invalid_argument("attribute: embedding must be [B,N], got " +
                                    shape_str(embedding.shape()));
    const std::int64_t B = embedding.dim(0), N = embedding.dim(1);

    AttributionStack stack;
    stack.probe = probe;
    stack.method = method;
    stack.per_dim.reserve(static_cast<std::size_t>(N));

    const bool spatial = probe_act.ndim() == 4 && probe_act.dim(2) * probe_act.dim(3) > 1;
    if (method == SaliencyMethod::GradCAM && !spatial)
        throw std::invalid_argument("gradcam: probe activation " + shape_str(probe_act.shape()) +
                                    " is not spatial");

    GradOptions gopt;
    gopt.create_graph = differentiable;

    for (std::int64_t i = 0; i < N; ++i) {
        auto idx = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(B));
        for (std::int64_t b = 0; b < B; ++b) (*idx)[static_cast<std::size_t>(b)] = b * N + i;
        Tensor target = sum(index_gather(embedding, idx, {B}));
        Tensor g = grad(target, probe_act, gopt);
        Tensor g4 = as_bchw(g);
        switch (method) {
            case SaliencyMethod::VanillaGradients:
                stack.per_dim.push_back(g4);
                break;
            case SaliencyMethod::ActivationsTimesGradients: {
                Tensor act = as_bchw(differentiable ? probe_act : probe_act.detach());
                stack.per_dim.push_back(mul(act, g4));
                break;
            }
            case SaliencyMethod::GradCAM: {
                Tensor act = as_bchw(differentiable ? probe_act : probe_act.detach());
                Tensor alpha = mean(g4, {2, 3}, true);            // [B,C,1,1]
                Tensor weighted = sum(mul(act, alpha), {1}, true);  // [B,1,H,W]
                stack.per_dim.push_back(relu(weighted));
                break;
            }
        }
    }
    return stack;
}

AttributionStack attribute_batch(Network& net, const Tensor& x, int probe, SaliencyMethod method,
                                 const AttributeOptions& opts) {
    Network::ForwardOptions fo;
    fo.training = opts.training;
    fo.update_running_stats = opts.update_running_stats;
    fo.with_classifier = false;
    fo.with_decoder = false;
    fo.capture = {probe};
    fo.capture_stop_gradient = !opts.differentiable;
    auto res = net.forward(x, fo);

    Tensor emb = res.embedding;
    if (emb.ndim() != 2) emb = reshape(emb, {emb.dim(0), emb.numel() / emb.dim(0)});
    return attribute_from_forward(emb, res.captured[0], probe, method, opts.differentiable);
}

AttributionStack attribute(Network& net, const Tensor& x, int probe, SaliencyMethod method) {
    Tensor xb = x;
    if (xb.ndim() == net.input_shape.size()) {
        Shape s = xb.shape();
        s.insert(s.begin(), 1);
        xb = reshape(xb.detach(), s);
    }
    return attribute_batch(net, xb, probe, method, {});
}

}  // namespace embattr
