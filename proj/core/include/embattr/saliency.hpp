#pragma once

#include <optional>
#include <string>
#include <vector>

#include "embattr/network.hpp"
#include "embattr/tensor.hpp"

namespace embattr {

enum class SaliencyMethod { VanillaGradients, ActivationsTimesGradients, GradCAM };

const char* saliency_method_name(SaliencyMethod m);
std::optional<SaliencyMethod> saliency_method_from_name(const std::string& s);

// Raw per-embedding-dimension attributions at a probe layer: one tensor per
// dimension i, each [B, C_p, H_p, W_p] (GradCAM collapses C_p to 1). One
// backward pass per dimension.
struct AttributionStack {
    std::vector<Tensor> per_dim;
    int probe = 0;
    SaliencyMethod method = SaliencyMethod::VanillaGradients;

    std::size_t dims() const { return per_dim.size(); }
};

struct AttributeOptions {
    bool differentiable = false;  // attributions stay in the graph (create_graph gradients)
    bool training = false;        // batchnorm mode; analysis uses evaluation mode
    bool update_running_stats = false;
};

// x is a batch [B,...input]; per-sample results are independent in
// evaluation mode. The non-differentiable path cuts the graph at the probe,
// so no gradient work happens below it.
AttributionStack attribute_batch(Network& net, const Tensor& x, int probe, SaliencyMethod method,
                                 const AttributeOptions& opts = {});

// Stack from an already-computed forward pass (used inside the training
// constraint where the forward is shared with the loss).
AttributionStack attribute_from_forward(const Tensor& embedding, const Tensor& probe_act, int probe,
                                        SaliencyMethod method, bool differentiable);

// single sample convenience
AttributionStack attribute(Network& net, const Tensor& x, int probe, SaliencyMethod method);

}  // namespace embattr
