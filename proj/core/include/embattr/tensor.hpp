#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "embattr/rng.hpp"

namespace embattr {

using Shape = std::vector<std::int64_t>;

std::int64_t numel_of(const Shape& s);
std::string shape_str(const Shape& s);

namespace autograd {
struct Node;
}

// Dense f64 tensor participating in a dynamically recorded computation
// graph. Value semantics with shared storage; a tensor "requires grad"
// exactly when it carries a graph node. Graphs are confined to one thread.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(Shape s);
    static Tensor ones(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);
    static Tensor from(Shape s, std::vector<double> v);
    static Tensor uniform(Shape s, double lo, double hi, Rng& rng);
    static Tensor normal(Shape s, Rng& rng);

    bool defined() const { return storage_ != nullptr; }
    const Shape& shape() const { return shape_; }
    std::size_t ndim() const { return shape_.size(); }
    std::int64_t dim(std::size_t i) const { return shape_[i]; }
    std::int64_t numel() const;

    std::span<const double> data() const;
    // Direct storage access; used for leaf/parameter edits between steps and
    // by op kernels. Does not invalidate or touch the recorded graph.
    std::span<double> mutable_data();

    double item() const;
    double at(std::initializer_list<std::int64_t> idx) const;

    bool requires_grad() const { return node_ != nullptr; }
    Tensor& set_requires_grad(bool on);
    Tensor detach() const;
    Tensor clone() const;

    bool all_finite() const;

    const std::shared_ptr<autograd::Node>& node() const { return node_; }

private:
    std::shared_ptr<std::vector<double>> storage_;
    Shape shape_;
    std::shared_ptr<autograd::Node> node_;

    friend Tensor make_tensor(Shape s, std::shared_ptr<std::vector<double>> storage,
                              std::shared_ptr<autograd::Node> n);
};

namespace autograd {

// One backward callback per node; returns one gradient per parent (an
// undefined Tensor for parents that do not require grad).
using BackwardFn = std::function<std::vector<Tensor>(const Tensor& upstream)>;

struct Node {
    const char* op = "leaf";
    std::uint64_t seq = 0;  // creation order; parents always precede children
    std::vector<Tensor> parents;
    BackwardFn backward;
};

// Records a node for `out` when grad mode is on and any parent carries one.
// This is the extension point layer kernels use to define new primitives.
Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents, BackwardFn backward);

bool grad_enabled();

// True when a gradient for this parent is wanted by the running grad() call.
// Backward callbacks use this to skip parents pruned from the active
// output->wrt paths (and any parent without a node).
bool parent_needed(const Tensor& parent);

struct NoGradGuard {
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

}  // namespace autograd

struct GradOptions {
    bool create_graph = false;
};

// Reverse-mode gradient of a scalar output w.r.t. `wrt`. Tensors not
// reachable from `output` yield zero gradients. With create_graph the
// returned tensors are themselves differentiable graph nodes.
std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt,
                         GradOptions opt = {});
std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt,
                         GradOptions opt = {});
Tensor grad(const Tensor& output, const Tensor& wrt, GradOptions opt = {});

// ---- elementwise (numpy-style broadcasting) ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor neg(const Tensor& a);

Tensor add(const Tensor& a, double c);
Tensor sub(const Tensor& a, double c);
Tensor mul(const Tensor& a, double c);
Tensor div(const Tensor& a, double c);

Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor sigmoid(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor square(const Tensor& x);
Tensor abs(const Tensor& x);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator+(const Tensor& a, double c) { return add(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return sub(a, c); }
inline Tensor operator*(const Tensor& a, double c) { return mul(a, c); }
inline Tensor operator/(const Tensor& a, double c) { return div(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul(a, c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [m,k] x [k,n]
Tensor transpose(const Tensor& a);                // 2-D

// ---- reductions ----
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor reduce_max(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor reduce_min(const Tensor& x, std::vector<int> axes, bool keepdim = false);
Tensor logsumexp_rows(const Tensor& x);  // [B,K] -> [B]

// ---- shape ----
Tensor reshape(const Tensor& x, Shape s);
Tensor broadcast_to(const Tensor& x, const Shape& s);
Tensor sum_to_shape(const Tensor& g, const Shape& s);  // adjoint of broadcast_to
Tensor crop2d(const Tensor& x, int top, int left, int out_h, int out_w);
Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right);

// ---- indexed access (shared index array; adjoint pair) ----
// gather: out[i] = x[idx[i]]; scatter: out[idx[i]] += x[i]
Tensor index_gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> idx,
                    Shape out_shape);
Tensor index_scatter(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> idx,
                     Shape out_shape);

// Max over coordinates of |analytic - central difference| / (|analytic| + eps).
double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5);

// internal: wraps existing storage without copying (op kernel plumbing)
Tensor make_tensor(Shape s, std::shared_ptr<std::vector<double>> storage,
                   std::shared_ptr<autograd::Node> n);

}  // namespace embattr
