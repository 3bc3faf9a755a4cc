#pragma once

#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "embattr/rng.hpp"
#include "embattr/tensor.hpp"

namespace embattr {

// ---- differentiable layer kernels ----
// x [B,Ci,H,W], w [Co,Ci,K,K]
Tensor conv2d(const Tensor& x, const Tensor& w, int stride, int padding);
// fused per-channel bias
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& bias, int stride, int padding);
// x [B,Ci,H,W], w [Ci,Co,K,K]; output (H-1)*S - 2P + K
Tensor conv2d_transposed(const Tensor& x, const Tensor& w, int stride, int padding);
Tensor maxpool2d(const Tensor& x, int kernel, int stride, bool ceil_mode = false);
Tensor upsample_nearest(const Tensor& x, int out_h, int out_w);

// mean over all elements; shapes must match exactly
Tensor loss_mse(const Tensor& pred, const Tensor& target);
// logits [B,K], labels in [0,K)
Tensor loss_cross_entropy(const Tensor& logits, std::span<const int> labels);

// ---- layer specs (U/K/S/P notation) ----
enum class LayerKind {
    Conv2d,
    Conv2dTransposed,
    Linear,
    BatchNorm,
    MaxPool,
    UpsampleNN,
    ReLU,
    Softplus,
    Sigmoid,
    Flatten,
    CenterCrop,
};

const char* layer_kind_name(LayerKind k);

struct LayerSpec {
    LayerKind kind;
    int units = 0;    // U: conv out channels / linear out features
    int kernel = 1;   // K
    int stride = 1;   // S
    int padding = 0;  // P
    bool ceil_mode = false;
    int out_h = 0, out_w = 0;  // CenterCrop target; UpsampleNN uses factor 2

    static LayerSpec conv2d(int u, int k, int s, int p);
    static LayerSpec conv2d_transposed(int u, int k, int s, int p);
    static LayerSpec linear(int u);
    static LayerSpec batchnorm();
    static LayerSpec maxpool(int k, bool ceil_mode = false);
    static LayerSpec upsample_x2();
    static LayerSpec relu();
    static LayerSpec softplus();
    static LayerSpec sigmoid_out();
    static LayerSpec flatten();
    static LayerSpec center_crop(int h, int w);

    void validate() const;  // K,S >= 1; P >= 0; U >= 1 where applicable
};

// Layer instance: spec + resolved parameter tensors. in_shape is the
// batchless input shape recorded when the layer was initialized.
struct Layer {
    LayerSpec spec;
    std::string name;
    Shape in_shape;

    Tensor weight, bias;               // conv / linear
    Tensor gamma, beta;                // batchnorm affine
    Tensor running_mean, running_var;  // batchnorm state, never graph nodes

    bool has_params() const;
    std::vector<std::pair<std::string, Tensor*>> named_params();      // trainable
    std::vector<std::pair<std::string, Tensor*>> named_state();       // trainable + running
    void init(const Shape& in, Rng& rng);                             // allocates parameters
};

Shape layer_output_shape(const LayerSpec& spec, const Shape& in);

struct LayerForwardOptions {
    bool training = false;
    bool update_running_stats = true;  // batchnorm, training mode only
    double bn_momentum = 0.1;
    double bn_eps = 1e-5;
};

Tensor layer_forward(Layer& layer, const Tensor& x, const LayerForwardOptions& opts);

// ---- optimizer ----
class Adam {
public:
    explicit Adam(double lr = 1e-3, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);
    void step(std::span<Tensor* const> params, std::span<const Tensor> grads);
    double lr() const { return lr_; }

private:
    double lr_, beta1_, beta2_, eps_;
    long t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

}  // namespace embattr
