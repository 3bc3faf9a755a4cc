#include "embattr/tensor.hpp"

#include "fastmath.hpp"

#if defined(__GLIBC__)
#include <malloc.h>
#endif

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <numeric>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <unordered_map>
#include <unordered_set>

namespace embattr {

std::int64_t numel_of(const Shape& s) {
    std::int64_t n = 1;
    for (auto d : s) n *= d;
    return n;
}

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << "[";
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << "]";
    return os.str();
}

namespace {

// Tensor buffers churn at megabytes per op; without this glibc hands every
// large free back to the OS (mmap/munmap plus page faults on reuse).
#if defined(__GLIBC__)
const bool g_malloc_tuned = [] {
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    return true;
}();
#endif

void check_shape_valid(const Shape& s, const char* who) {
    for (auto d : s) {
        if (d <= 0) throw std::invalid_argument(std::string(who) + ": non-positive dim in shape " + shape_str(s));
    }
}

thread_local std::uint64_t g_seq = 0;
thread_local int g_nograd_depth = 0;

std::uint64_t next_seq() { return ++g_seq; }

// active grad() call's needed-node set; nested calls save/restore
thread_local const std::unordered_set<const autograd::Node*>* g_needed = nullptr;

struct NeededScope {
    const std::unordered_set<const autograd::Node*>* saved;
    explicit NeededScope(const std::unordered_set<const autograd::Node*>* s) : saved(g_needed) {
        g_needed = s;
    }
    ~NeededScope() { g_needed = saved; }
};

}  // namespace

Tensor make_tensor(Shape s, std::shared_ptr<std::vector<double>> storage,
                   std::shared_ptr<autograd::Node> n) {
    Tensor t;
    t.shape_ = std::move(s);
    t.storage_ = std::move(storage);
    t.node_ = std::move(n);
    return t;
}

namespace autograd {

bool grad_enabled() { return g_nograd_depth == 0; }

bool parent_needed(const Tensor& parent) {
    if (!parent.node()) return false;
    if (!g_needed) return true;
    return g_needed->count(parent.node().get()) > 0;
}

NoGradGuard::NoGradGuard() { ++g_nograd_depth; }
NoGradGuard::~NoGradGuard() { --g_nograd_depth; }

Tensor make_op(const char* op, Shape shape, std::vector<double> data,
               std::vector<Tensor> parents, BackwardFn backward) {
    if (static_cast<std::int64_t>(data.size()) != numel_of(shape))
        throw std::logic_error(std::string(op) + ": result size " + std::to_string(data.size()) +
                               " does not match shape " + shape_str(shape));
    std::shared_ptr<Node> node;
    if (grad_enabled()) {
        bool any = false;
        for (const auto& p : parents)
            if (p.requires_grad()) { any = true; break; }
        if (any) {
            node = std::make_shared<Node>();
            node->op = op;
            node->seq = next_seq();
            node->parents = std::move(parents);
            node->backward = std::move(backward);
        }
    }
    return make_tensor(std::move(shape), std::make_shared<std::vector<double>>(std::move(data)),
                       std::move(node));
}

}  // namespace autograd

// ---------------------------------------------------------------------------
// Tensor basics

Tensor Tensor::zeros(Shape s) { return full(std::move(s), 0.0); }
Tensor Tensor::ones(Shape s) { return full(std::move(s), 1.0); }

Tensor Tensor::full(Shape s, double v) {
    check_shape_valid(s, "full");
    auto n = numel_of(s);
    return make_tensor(std::move(s), std::make_shared<std::vector<double>>(n, v), nullptr);
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::from(Shape s, std::vector<double> v) {
    check_shape_valid(s, "from");
    if (static_cast<std::int64_t>(v.size()) != numel_of(s))
        throw std::invalid_argument("Tensor::from: " + std::to_string(v.size()) +
                                    " values for shape " + shape_str(s));
    return make_tensor(std::move(s), std::make_shared<std::vector<double>>(std::move(v)), nullptr);
}

Tensor Tensor::uniform(Shape s, double lo, double hi, Rng& rng) {
    check_shape_valid(s, "uniform");
    std::vector<double> v(static_cast<std::size_t>(numel_of(s)));
    for (auto& x : v) x = rng.uniform(lo, hi);
    return from(std::move(s), std::move(v));
}

Tensor Tensor::normal(Shape s, Rng& rng) {
    check_shape_valid(s, "normal");
    std::vector<double> v(static_cast<std::size_t>(numel_of(s)));
    for (auto& x : v) x = rng.normal();
    return from(std::move(s), std::move(v));
}

std::int64_t Tensor::numel() const { return storage_ ? static_cast<std::int64_t>(storage_->size()) : 0; }

std::span<const double> Tensor::data() const {
    if (!storage_) throw std::logic_error("Tensor::data on undefined tensor");
    return {storage_->data(), storage_->size()};
}

std::span<double> Tensor::mutable_data() {
    if (!storage_) throw std::logic_error("Tensor::mutable_data on undefined tensor");
    return {storage_->data(), storage_->size()};
}

double Tensor::item() const {
    if (numel() != 1)
        throw std::invalid_argument("Tensor::item: tensor has shape " + shape_str(shape_) +
                                    ", expected a single element");
    return (*storage_)[0];
}

double Tensor::at(std::initializer_list<std::int64_t> idx) const {
    if (idx.size() != shape_.size())
        throw std::invalid_argument("Tensor::at: " + std::to_string(idx.size()) + " indices for shape " +
                                    shape_str(shape_));
    std::int64_t off = 0;
    std::size_t d = 0;
    for (auto i : idx) {
        if (i < 0 || i >= shape_[d])
            throw std::out_of_range("Tensor::at: index " + std::to_string(i) + " out of range for dim " +
                                    std::to_string(d) + " of " + shape_str(shape_));
        off = off * shape_[d] + i;
        ++d;
    }
    return (*storage_)[static_cast<std::size_t>(off)];
}

Tensor& Tensor::set_requires_grad(bool on) {
    if (on) {
        if (!storage_) throw std::logic_error("set_requires_grad on undefined tensor");
        if (!node_) {
            node_ = std::make_shared<autograd::Node>();
            node_->op = "leaf";
            node_->seq = next_seq();
        }
    } else {
        node_.reset();
    }
    return *this;
}

Tensor Tensor::detach() const { return make_tensor(shape_, storage_, nullptr); }

Tensor Tensor::clone() const {
    if (!storage_) return {};
    return make_tensor(shape_, std::make_shared<std::vector<double>>(*storage_), nullptr);
}

bool Tensor::all_finite() const {
    if (!storage_) return true;
    for (double v : *storage_)
        if (!std::isfinite(v)) return false;
    return true;
}

// ---------------------------------------------------------------------------
// Broadcasting

namespace {

struct BroadcastPlan {
    Shape out;
    std::vector<std::int64_t> stride_a, stride_b;  // per out dim; 0 on broadcast dims
    bool same = false;
};

BroadcastPlan broadcast_plan(const char* op, const Shape& a, const Shape& b) {
    BroadcastPlan p;
    if (a == b) {
        p.out = a;
        p.same = true;
        return p;
    }
    const std::size_t nd = std::max(a.size(), b.size());
    p.out.resize(nd);
    std::vector<std::int64_t> da(nd, 1), db(nd, 1);
    for (std::size_t i = 0; i < a.size(); ++i) da[nd - a.size() + i] = a[i];
    for (std::size_t i = 0; i < b.size(); ++i) db[nd - b.size() + i] = b[i];
    for (std::size_t i = 0; i < nd; ++i) {
        if (da[i] == db[i] || da[i] == 1 || db[i] == 1) {
            p.out[i] = std::max(da[i], db[i]);
        } else {
            throw std::invalid_argument(std::string(op) + ": shapes " + shape_str(a) + " and " +
                                        shape_str(b) + " are not broadcast-compatible (dim " +
                                        std::to_string(i) + ": " + std::to_string(da[i]) + " vs " +
                                        std::to_string(db[i]) + ")");
        }
    }
    p.stride_a.assign(nd, 0);
    p.stride_b.assign(nd, 0);
    std::int64_t sa = 1, sb = 1;
    for (std::size_t i = nd; i-- > 0;) {
        p.stride_a[i] = (da[i] == 1) ? 0 : sa;
        p.stride_b[i] = (db[i] == 1) ? 0 : sb;
        sa *= da[i];
        sb *= db[i];
    }
    return p;
}

template <typename F>
std::vector<double> binary_kernel(const char* op, const Tensor& a, const Tensor& b, F f,
                                  Shape* out_shape) {
    BroadcastPlan p = broadcast_plan(op, a.shape(), b.shape());
    *out_shape = p.out;
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    const std::int64_t n = numel_of(p.out);
    std::vector<double> out(static_cast<std::size_t>(n));
    if (p.same) {
        for (std::int64_t i = 0; i < n; ++i) out[i] = f(pa[i], pb[i]);
        return out;
    }
    const std::size_t nd = p.out.size();
    const std::int64_t inner = p.out[nd - 1];
    const std::int64_t ia = p.stride_a[nd - 1], ib = p.stride_b[nd - 1];
    std::vector<std::int64_t> ctr(nd, 0);
    std::int64_t offa = 0, offb = 0;
    for (std::int64_t base = 0; base < n; base += inner) {
        double* po = out.data() + base;
        const double* qa = pa + offa;
        const double* qb = pb + offb;
        if (ia == 1 && ib == 1) {
            for (std::int64_t j = 0; j < inner; ++j) po[j] = f(qa[j], qb[j]);
        } else if (ia == 1 && ib == 0) {
            const double vb = *qb;
            for (std::int64_t j = 0; j < inner; ++j) po[j] = f(qa[j], vb);
        } else if (ia == 0 && ib == 1) {
            const double va = *qa;
            for (std::int64_t j = 0; j < inner; ++j) po[j] = f(va, qb[j]);
        } else {
            for (std::int64_t j = 0; j < inner; ++j) po[j] = f(qa[j * ia], qb[j * ib]);
        }
        // odometer over all dims but the innermost
        for (std::size_t d = nd - 1; d-- > 0;) {
            ++ctr[d];
            offa += p.stride_a[d];
            offb += p.stride_b[d];
            if (ctr[d] < p.out[d]) break;
            ctr[d] = 0;
            offa -= p.out[d] * p.stride_a[d];
            offb -= p.out[d] * p.stride_b[d];
        }
    }
    return out;
}

template <typename F>
std::vector<double> unary_kernel(const Tensor& x, F f) {
    auto in = x.data();
    std::vector<double> out(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) out[i] = f(in[i]);
    return out;
}

std::vector<int> broadcast_reduce_axes(const Shape& from /*bigger*/, const Shape& to) {
    // axes of `from` that must be summed to recover `to`
    std::vector<int> axes;
    const std::size_t nd = from.size();
    const std::size_t off = nd - to.size();
    for (std::size_t i = 0; i < nd; ++i) {
        const std::int64_t td = (i < off) ? 1 : to[i - off];
        if (from[i] != td) axes.push_back(static_cast<int>(i));
        else if (i < off) axes.push_back(static_cast<int>(i));  // leading singleton to drop
    }
    return axes;
}

}  // namespace

Tensor sum_to_shape(const Tensor& g, const Shape& s) {
    if (g.shape() == s) return g;
    auto axes = broadcast_reduce_axes(g.shape(), s);
    Tensor r = sum(g, axes, /*keepdim=*/true);
    return reshape(r, s);
}

// ---------------------------------------------------------------------------
// Elementwise binary

Tensor add(const Tensor& a, const Tensor& b) {
    Shape os;
    auto data = binary_kernel("add", a, b, [](double x, double y) { return x + y; }, &os);
    Shape as = a.shape(), bs = b.shape();
    return autograd::make_op("add", std::move(os), std::move(data), {a, b},
                             [a, b, as, bs](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor ga = autograd::parent_needed(a) ? sum_to_shape(g, as) : Tensor{};
                                 Tensor gb = autograd::parent_needed(b) ? sum_to_shape(g, bs) : Tensor{};
                                 return {ga, gb};
                             });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    Shape os;
    auto data = binary_kernel("sub", a, b, [](double x, double y) { return x - y; }, &os);
    Shape as = a.shape(), bs = b.shape();
    return autograd::make_op("sub", std::move(os), std::move(data), {a, b},
                             [a, b, as, bs](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor ga = autograd::parent_needed(a) ? sum_to_shape(g, as) : Tensor{};
                                 Tensor gb = autograd::parent_needed(b) ? sum_to_shape(neg(g), bs) : Tensor{};
                                 return {ga, gb};
                             });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    Shape os;
    auto data = binary_kernel("mul", a, b, [](double x, double y) { return x * y; }, &os);
    Shape as = a.shape(), bs = b.shape();
    return autograd::make_op("mul", std::move(os), std::move(data), {a, b},
                             [a, b, as, bs](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor ga = autograd::parent_needed(a) ? sum_to_shape(mul(g, b), as) : Tensor{};
                                 Tensor gb = autograd::parent_needed(b) ? sum_to_shape(mul(g, a), bs) : Tensor{};
                                 return {ga, gb};
                             });
}

Tensor div(const Tensor& a, const Tensor& b) {
    Shape os;
    auto data = binary_kernel("div", a, b, [](double x, double y) { return x / y; }, &os);
    Shape as = a.shape(), bs = b.shape();
    return autograd::make_op("div", std::move(os), std::move(data), {a, b},
                             [a, b, as, bs](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor ga = autograd::parent_needed(a) ? sum_to_shape(div(g, b), as) : Tensor{};
                                 Tensor gb;
                                 if (autograd::parent_needed(b))
                                     gb = sum_to_shape(neg(div(mul(g, a), mul(b, b))), bs);
                                 return {ga, gb};
                             });
}

Tensor neg(const Tensor& a) {
    auto data = unary_kernel(a, [](double x) { return -x; });
    return autograd::make_op("neg", a.shape(), std::move(data), {a},
                             [](const Tensor& g) -> std::vector<Tensor> { return {neg(g)}; });
}

Tensor add(const Tensor& a, double c) {
    auto data = unary_kernel(a, [c](double x) { return x + c; });
    return autograd::make_op("addc", a.shape(), std::move(data), {a},
                             [](const Tensor& g) -> std::vector<Tensor> { return {g}; });
}

Tensor sub(const Tensor& a, double c) { return add(a, -c); }

Tensor mul(const Tensor& a, double c) {
    auto data = unary_kernel(a, [c](double x) { return x * c; });
    return autograd::make_op("mulc", a.shape(), std::move(data), {a},
                             [c](const Tensor& g) -> std::vector<Tensor> { return {mul(g, c)}; });
}

Tensor div(const Tensor& a, double c) { return mul(a, 1.0 / c); }

// ---------------------------------------------------------------------------
// Elementwise unary

Tensor relu(const Tensor& x) {
    auto in = x.data();
    std::vector<double> out(in.size());
    auto mask = std::make_shared<std::vector<double>>(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        const bool pos = in[i] > 0;
        out[i] = pos ? in[i] : 0.0;
        (*mask)[i] = pos ? 1.0 : 0.0;
    }
    Shape s = x.shape();
    return autograd::make_op("relu", x.shape(), std::move(out), {x},
                             [mask, s](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor m = make_tensor(s, mask, nullptr);
                                 return {mul(g, m)};
                             });
}

Tensor softplus(const Tensor& x) {
    auto in = x.data();
    const std::int64_t n = static_cast<std::int64_t>(in.size());
    std::vector<double> out(in.size());
    auto tsave = std::make_shared<std::vector<double>>(in.size());  // exp(-|x|)
    double* __restrict po = out.data();
    double* __restrict pt = tsave->data();
    const double* __restrict px = in.data();
#pragma omp parallel for schedule(static) if (n > (1 << 17))
    for (std::int64_t i = 0; i < n; ++i) {
        const double t = detail::fast_exp(-std::abs(px[i]));
        pt[i] = t;
        po[i] = (px[i] > 0 ? px[i] : 0.0) + detail::fast_log1p01(t);
    }
    return autograd::make_op(
        "softplus", x.shape(), std::move(out), {x},
        [x, tsave](const Tensor& g) -> std::vector<Tensor> {
            if (autograd::grad_enabled()) return {mul(g, sigmoid(x))};
            // fast path, bitwise identical to mul(g, sigmoid(x))
            auto gd = g.data();
            auto xd = x.data();
            std::vector<double> out(gd.size());
            const std::int64_t m = static_cast<std::int64_t>(gd.size());
            const double* __restrict pt = tsave->data();
#pragma omp parallel for schedule(static) if (m > (1 << 17))
            for (std::int64_t i = 0; i < m; ++i) {
                const double s = xd[i] >= 0 ? 1.0 / (1.0 + pt[i]) : pt[i] / (1.0 + pt[i]);
                out[i] = gd[i] * s;
            }
            return {make_tensor(x.shape(), std::make_shared<std::vector<double>>(std::move(out)),
                                nullptr)};
        });
}

Tensor sigmoid(const Tensor& x) {
    auto in = x.data();
    const std::int64_t n = static_cast<std::int64_t>(in.size());
    std::vector<double> out(in.size());
    double* __restrict po = out.data();
    const double* __restrict px = in.data();
#pragma omp parallel for schedule(static) if (n > (1 << 17))
    for (std::int64_t i = 0; i < n; ++i) po[i] = detail::fast_sigmoid(px[i]);
    auto ssave = std::make_shared<std::vector<double>>(out);
    return autograd::make_op(
        "sigmoid", x.shape(), std::move(out), {x},
        [x, ssave](const Tensor& g) -> std::vector<Tensor> {
            if (autograd::grad_enabled()) {
                Tensor s = sigmoid(x);
                return {mul(g, mul(s, add(neg(s), 1.0)))};
            }
            auto gd = g.data();
            std::vector<double> out(gd.size());
            const std::int64_t m = static_cast<std::int64_t>(gd.size());
            const double* __restrict ps = ssave->data();
#pragma omp parallel for schedule(static) if (m > (1 << 17))
            for (std::int64_t i = 0; i < m; ++i) out[i] = gd[i] * (ps[i] * ((-ps[i]) + 1.0));
            return {make_tensor(x.shape(), std::make_shared<std::vector<double>>(std::move(out)),
                                nullptr)};
        });
}

Tensor exp(const Tensor& x) {
    auto in = x.data();
    const std::int64_t n = static_cast<std::int64_t>(in.size());
    std::vector<double> out(in.size());
    double* __restrict po = out.data();
    const double* __restrict px = in.data();
#pragma omp parallel for schedule(static) if (n > (1 << 17))
    for (std::int64_t i = 0; i < n; ++i) po[i] = detail::fast_exp(px[i]);
    auto esave = std::make_shared<std::vector<double>>(out);
    return autograd::make_op(
        "exp", x.shape(), std::move(out), {x},
        [x, esave](const Tensor& g) -> std::vector<Tensor> {
            if (autograd::grad_enabled()) return {mul(g, exp(x))};
            auto gd = g.data();
            std::vector<double> out(gd.size());
            for (std::size_t i = 0; i < gd.size(); ++i) out[i] = gd[i] * (*esave)[i];
            return {make_tensor(x.shape(), std::make_shared<std::vector<double>>(std::move(out)),
                                nullptr)};
        });
}

Tensor log(const Tensor& x) {
    auto data = unary_kernel(x, [](double v) { return std::log(v); });
    return autograd::make_op("log", x.shape(), std::move(data), {x},
                             [x](const Tensor& g) -> std::vector<Tensor> { return {div(g, x)}; });
}

Tensor sqrt(const Tensor& x) {
    auto data = unary_kernel(x, [](double v) { return std::sqrt(v); });
    return autograd::make_op("sqrt", x.shape(), std::move(data), {x},
                             [x](const Tensor& g) -> std::vector<Tensor> {
                                 return {mul(div(g, sqrt(x)), 0.5)};
                             });
}

Tensor square(const Tensor& x) {
    auto data = unary_kernel(x, [](double v) { return v * v; });
    return autograd::make_op("square", x.shape(), std::move(data), {x},
                             [x](const Tensor& g) -> std::vector<Tensor> {
                                 return {mul(mul(g, x), 2.0)};
                             });
}

Tensor abs(const Tensor& x) {
    auto in = x.data();
    std::vector<double> out(in.size());
    auto sgn = std::make_shared<std::vector<double>>(in.size());
    for (std::size_t i = 0; i < in.size(); ++i) {
        out[i] = std::abs(in[i]);
        (*sgn)[i] = in[i] > 0 ? 1.0 : (in[i] < 0 ? -1.0 : 0.0);
    }
    Shape s = x.shape();
    return autograd::make_op("abs", x.shape(), std::move(out), {x},
                             [sgn, s](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor m = make_tensor(s, sgn, nullptr);
                                 return {mul(g, m)};
                             });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor transpose(const Tensor& a) {
    if (a.ndim() != 2)
        throw std::invalid_argument("transpose: expected 2-D tensor, got " + shape_str(a.shape()));
    const std::int64_t m = a.dim(0), n = a.dim(1);
    const double* pa = a.data().data();
    std::vector<double> out(static_cast<std::size_t>(m * n));
    for (std::int64_t i = 0; i < m; ++i)
        for (std::int64_t j = 0; j < n; ++j) out[j * m + i] = pa[i * n + j];
    return autograd::make_op("transpose", {n, m}, std::move(out), {a},
                             [](const Tensor& g) -> std::vector<Tensor> { return {transpose(g)}; });
}

Tensor matmul(const Tensor& a, const Tensor& b) {
    if (a.ndim() != 2 || b.ndim() != 2)
        throw std::invalid_argument("matmul: expected 2-D tensors, got " + shape_str(a.shape()) +
                                    " and " + shape_str(b.shape()));
    if (a.dim(1) != b.dim(0))
        throw std::invalid_argument("matmul: inner dims differ, " + shape_str(a.shape()) + " x " +
                                    shape_str(b.shape()));
    const std::int64_t m = a.dim(0), k = a.dim(1), n = b.dim(1);
    const double* pa = a.data().data();
    const double* pb = b.data().data();
    std::vector<double> out(static_cast<std::size_t>(m * n), 0.0);
    for (std::int64_t i = 0; i < m; ++i) {
        double* po = out.data() + i * n;
        const double* ra = pa + i * k;
        for (std::int64_t l = 0; l < k; ++l) {
            const double v = ra[l];
            const double* rb = pb + l * n;
            for (std::int64_t j = 0; j < n; ++j) po[j] += v * rb[j];
        }
    }
    return autograd::make_op("matmul", {m, n}, std::move(out), {a, b},
                             [a, b](const Tensor& g) -> std::vector<Tensor> {
                                 Tensor ga = autograd::parent_needed(a) ? matmul(g, transpose(b)) : Tensor{};
                                 Tensor gb = autograd::parent_needed(b) ? matmul(transpose(a), g) : Tensor{};
                                 return {ga, gb};
                             });
}

// ---------------------------------------------------------------------------
// Reductions

namespace {

struct ReducePrep {
    Shape keep_shape;    // input shape with reduced dims set to 1
    Shape out_shape;     // keepdim ? keep_shape : squeezed
    std::vector<std::int64_t> out_stride;  // per input dim, 0 on reduced dims
    std::int64_t out_n = 1;
};

ReducePrep reduce_prep(const char* op, const Shape& in, const std::vector<int>& axes, bool keepdim) {
    const std::size_t nd = in.size();
    std::vector<char> red(nd, 0);
    for (int a : axes) {
        if (a < 0 || static_cast<std::size_t>(a) >= nd)
            throw std::invalid_argument(std::string(op) + ": axis " + std::to_string(a) +
                                        " out of range for shape " + shape_str(in));
        red[static_cast<std::size_t>(a)] = 1;
    }
    ReducePrep p;
    p.keep_shape.resize(nd);
    for (std::size_t i = 0; i < nd; ++i) p.keep_shape[i] = red[i] ? 1 : in[i];
    if (keepdim) {
        p.out_shape = p.keep_shape;
    } else {
        for (std::size_t i = 0; i < nd; ++i)
            if (!red[i]) p.out_shape.push_back(in[i]);
        if (p.out_shape.empty()) p.out_shape = {1};
    }
    p.out_stride.assign(nd, 0);
    std::int64_t s = 1;
    for (std::size_t i = nd; i-- > 0;) {
        if (!red[i]) {
            p.out_stride[i] = s;
            s *= in[i];
        }
    }
    p.out_n = numel_of(p.keep_shape);
    return p;
}

// walks input linearly, streaming each element to its output slot
template <typename F>
void reduce_walk(const Shape& in, const std::vector<std::int64_t>& out_stride, F visit) {
    const std::size_t nd = in.size();
    const std::int64_t n = numel_of(in);
    std::vector<std::int64_t> ctr(nd, 0);
    std::int64_t ooff = 0;
    for (std::int64_t flat = 0; flat < n; ++flat) {
        visit(flat, ooff);
        for (std::size_t d = nd; d-- > 0;) {
            ++ctr[d];
            ooff += out_stride[d];
            if (ctr[d] < in[d]) break;
            ctr[d] = 0;
            ooff -= in[d] * out_stride[d];
        }
    }
}

}  // namespace

namespace {

struct ReducePattern {
    enum Kind { Suffix, SingleReduced, SingleKept, Generic } kind = Generic;
    std::int64_t outer = 1, mid = 1, inner = 1;
};

// decomposes the reduction into nested contiguous loops where possible
ReducePattern classify_reduce(const Shape& in, const std::vector<int>& axes) {
    const std::size_t nd = in.size();
    std::vector<char> red(nd, 0);
    for (int a : axes) red[static_cast<std::size_t>(a)] = 1;
    ReducePattern p;
    // reduced dims form a suffix (or everything)
    {
        std::size_t first_red = nd;
        bool contiguous_suffix = true;
        for (std::size_t i = 0; i < nd; ++i)
            if (red[i]) { first_red = i; break; }
        for (std::size_t i = first_red; i < nd; ++i)
            if (!red[i]) { contiguous_suffix = false; break; }
        if (contiguous_suffix) {
            p.kind = ReducePattern::Suffix;
            for (std::size_t i = 0; i < first_red; ++i) p.outer *= in[i];
            for (std::size_t i = first_red; i < nd; ++i) p.inner *= in[i];
            return p;
        }
    }
    // exactly one reduced axis: outer x mid(reduced) x inner
    if (axes.size() == 1) {
        const std::size_t a = static_cast<std::size_t>(axes[0]);
        p.kind = ReducePattern::SingleReduced;
        for (std::size_t i = 0; i < a; ++i) p.outer *= in[i];
        p.mid = in[a];
        for (std::size_t i = a + 1; i < nd; ++i) p.inner *= in[i];
        return p;
    }
    // exactly one kept axis: outer(reduced) x mid(kept) x inner(reduced)
    {
        std::size_t kept = nd, kept_count = 0;
        for (std::size_t i = 0; i < nd; ++i)
            if (!red[i]) { kept = i; ++kept_count; }
        if (kept_count == 1) {
            p.kind = ReducePattern::SingleKept;
            for (std::size_t i = 0; i < kept; ++i) p.outer *= in[i];
            p.mid = in[kept];
            for (std::size_t i = kept + 1; i < nd; ++i) p.inner *= in[i];
            return p;
        }
    }
    return p;
}

}  // namespace

Tensor sum(const Tensor& x, std::vector<int> axes, bool keepdim) {
    ReducePrep p = reduce_prep("sum", x.shape(), axes, keepdim);
    const double* __restrict px = x.data().data();
    std::vector<double> out(static_cast<std::size_t>(p.out_n), 0.0);
    const ReducePattern rp = classify_reduce(x.shape(), axes);
    switch (rp.kind) {
        case ReducePattern::Suffix: {
            for (std::int64_t o = 0; o < rp.outer; ++o) {
                double acc = 0;
                const double* __restrict row = px + o * rp.inner;
#pragma omp simd reduction(+ : acc)
                for (std::int64_t i = 0; i < rp.inner; ++i) acc += row[i];
                out[static_cast<std::size_t>(o)] = acc;
            }
            break;
        }
        case ReducePattern::SingleReduced: {
            // out[o*inner + i] = sum_m x[(o*mid + m)*inner + i]
            for (std::int64_t o = 0; o < rp.outer; ++o) {
                double* __restrict orow = out.data() + o * rp.inner;
                for (std::int64_t m = 0; m < rp.mid; ++m) {
                    const double* __restrict row = px + (o * rp.mid + m) * rp.inner;
                    for (std::int64_t i = 0; i < rp.inner; ++i) orow[i] += row[i];
                }
            }
            break;
        }
        case ReducePattern::SingleKept: {
            // out[m] = sum_o sum_i x[(o*mid + m)*inner + i]
            for (std::int64_t m = 0; m < rp.mid; ++m) {
                double acc = 0;
                for (std::int64_t o = 0; o < rp.outer; ++o) {
                    const double* __restrict row = px + (o * rp.mid + m) * rp.inner;
#pragma omp simd reduction(+ : acc)
                    for (std::int64_t i = 0; i < rp.inner; ++i) acc += row[i];
                }
                out[static_cast<std::size_t>(m)] = acc;
            }
            break;
        }
        case ReducePattern::Generic:
            reduce_walk(x.shape(), p.out_stride, [&](std::int64_t i, std::int64_t o) {
                out[static_cast<std::size_t>(o)] += px[i];
            });
            break;
    }
    Shape xs = x.shape();
    Shape keep = p.keep_shape;
    return autograd::make_op("sum", p.out_shape, std::move(out), {x},
                             [xs, keep](const Tensor& g) -> std::vector<Tensor> {
                                 return {broadcast_to(reshape(g, keep), xs)};
                             });
}

Tensor sum(const Tensor& x) {
    std::vector<int> axes(x.ndim());
    std::iota(axes.begin(), axes.end(), 0);
    return sum(x, std::move(axes), false);
}

Tensor mean(const Tensor& x, std::vector<int> axes, bool keepdim) {
    std::int64_t cnt = 1;
    for (int a : axes) cnt *= x.dim(static_cast<std::size_t>(a));
    return mul(sum(x, std::move(axes), keepdim), 1.0 / static_cast<double>(cnt));
}

Tensor mean(const Tensor& x) { return mul(sum(x), 1.0 / static_cast<double>(x.numel())); }

namespace {

Tensor extreme_reduce(const char* op, const Tensor& x, std::vector<int> axes, bool keepdim,
                      bool is_max) {
    ReducePrep p = reduce_prep(op, x.shape(), axes, keepdim);
    const double* px = x.data().data();
    std::vector<double> out(static_cast<std::size_t>(p.out_n),
                            is_max ? -std::numeric_limits<double>::infinity()
                                   : std::numeric_limits<double>::infinity());
    auto argi = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(p.out_n), -1);
    const ReducePattern rp = classify_reduce(x.shape(), axes);
    if (rp.kind == ReducePattern::Suffix) {
        for (std::int64_t o = 0; o < rp.outer; ++o) {
            const double* row = px + o * rp.inner;
            double best = row[0];
            std::int64_t bi = 0;
            for (std::int64_t i = 1; i < rp.inner; ++i) {
                const bool better = is_max ? (row[i] > best) : (row[i] < best);
                if (better) {
                    best = row[i];
                    bi = i;
                }
            }
            out[static_cast<std::size_t>(o)] = best;
            (*argi)[static_cast<std::size_t>(o)] = o * rp.inner + bi;
        }
    } else {
        reduce_walk(x.shape(), p.out_stride, [&](std::int64_t i, std::int64_t o) {
            const auto oo = static_cast<std::size_t>(o);
            const bool better = is_max ? (px[i] > out[oo]) : (px[i] < out[oo]);
            if (better || (*argi)[oo] < 0) {
                out[oo] = px[i];
                (*argi)[oo] = i;
            }
        });
    }
    Shape xs = x.shape();
    return autograd::make_op(op, p.out_shape, std::move(out), {x},
                             [argi, xs](const Tensor& g) -> std::vector<Tensor> {
                                 return {index_scatter(g, argi, xs)};
                             });
}

}  // namespace

Tensor reduce_max(const Tensor& x, std::vector<int> axes, bool keepdim) {
    return extreme_reduce("reduce_max", x, std::move(axes), keepdim, true);
}

Tensor reduce_min(const Tensor& x, std::vector<int> axes, bool keepdim) {
    return extreme_reduce("reduce_min", x, std::move(axes), keepdim, false);
}

Tensor logsumexp_rows(const Tensor& x) {
    if (x.ndim() != 2)
        throw std::invalid_argument("logsumexp_rows: expected 2-D tensor, got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), k = x.dim(1);
    const double* px = x.data().data();
    std::vector<double> out(static_cast<std::size_t>(b));
    for (std::int64_t i = 0; i < b; ++i) {
        const double* row = px + i * k;
        double m = row[0];
        for (std::int64_t j = 1; j < k; ++j) m = std::max(m, row[j]);
        double s = 0;
        for (std::int64_t j = 0; j < k; ++j) s += std::exp(row[j] - m);
        out[static_cast<std::size_t>(i)] = m + std::log(s);
    }
    return autograd::make_op(
        "logsumexp_rows", {b}, std::move(out), {x}, [x, b, k](const Tensor& g) -> std::vector<Tensor> {
            Tensor lse = reshape(logsumexp_rows(x), {b, 1});
            Tensor sm = exp(sub(x, broadcast_to(lse, x.shape())));
            return {mul(broadcast_to(reshape(g, {b, 1}), x.shape()), sm)};
        });
}

// ---------------------------------------------------------------------------
// Shape ops

Tensor reshape(const Tensor& x, Shape s) {
    check_shape_valid(s, "reshape");
    if (numel_of(s) != x.numel())
        throw std::invalid_argument("reshape: cannot view " + shape_str(x.shape()) + " as " +
                                    shape_str(s));
    Shape xs = x.shape();
    // copies data; graphs stay simple and storage stays immutable per node
    std::vector<double> out(x.data().begin(), x.data().end());
    return autograd::make_op("reshape", std::move(s), std::move(out), {x},
                             [xs](const Tensor& g) -> std::vector<Tensor> {
                                 return {reshape(g, xs)};
                             });
}

Tensor broadcast_to(const Tensor& x, const Shape& s) {
    if (x.shape() == s) return x;
    Shape os;
    Tensor zero = Tensor::zeros(s);
    auto data = binary_kernel("broadcast_to", x, zero, [](double a, double) { return a; }, &os);
    if (os != s)
        throw std::invalid_argument("broadcast_to: cannot broadcast " + shape_str(x.shape()) +
                                    " to " + shape_str(s));
    Shape xs = x.shape();
    return autograd::make_op("broadcast_to", os, std::move(data), {x},
                             [xs](const Tensor& g) -> std::vector<Tensor> {
                                 return {sum_to_shape(g, xs)};
                             });
}

Tensor crop2d(const Tensor& x, int top, int left, int out_h, int out_w) {
    if (x.ndim() != 4)
        throw std::invalid_argument("crop2d: expected [B,C,H,W], got " + shape_str(x.shape()));
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    if (top < 0 || left < 0 || top + out_h > h || left + out_w > w)
        throw std::invalid_argument("crop2d: window " + std::to_string(out_h) + "x" +
                                    std::to_string(out_w) + "+" + std::to_string(top) + "+" +
                                    std::to_string(left) + " exceeds " + shape_str(x.shape()));
    const double* px = x.data().data();
    std::vector<double> out(static_cast<std::size_t>(b * c * out_h * out_w));
    std::size_t o = 0;
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* plane = px + bc * h * w;
        for (int i = 0; i < out_h; ++i) {
            const double* row = plane + (top + i) * w + left;
            for (int j = 0; j < out_w; ++j) out[o++] = row[j];
        }
    }
    const int bot = static_cast<int>(h) - top - out_h;
    const int right = static_cast<int>(w) - left - out_w;
    return autograd::make_op("crop2d", {b, c, out_h, out_w}, std::move(out), {x},
                             [top, bot, left, right](const Tensor& g) -> std::vector<Tensor> {
                                 return {pad2d(g, top, bot, left, right)};
                             });
}

Tensor pad2d(const Tensor& x, int top, int bottom, int left, int right) {
    if (x.ndim() != 4)
        throw std::invalid_argument("pad2d: expected [B,C,H,W], got " + shape_str(x.shape()));
    if (top < 0 || bottom < 0 || left < 0 || right < 0)
        throw std::invalid_argument("pad2d: negative padding");
    const std::int64_t b = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
    const std::int64_t oh = h + top + bottom, ow = w + left + right;
    const double* px = x.data().data();
    std::vector<double> out(static_cast<std::size_t>(b * c * oh * ow), 0.0);
    for (std::int64_t bc = 0; bc < b * c; ++bc) {
        const double* src = px + bc * h * w;
        double* dst = out.data() + bc * oh * ow;
        for (std::int64_t i = 0; i < h; ++i)
            std::memcpy(dst + (i + top) * ow + left, src + i * w, sizeof(double) * static_cast<std::size_t>(w));
    }
    const int ih = static_cast<int>(h), iw = static_cast<int>(w);
    return autograd::make_op("pad2d", {b, c, oh, ow}, std::move(out), {x},
                             [top, left, ih, iw](const Tensor& g) -> std::vector<Tensor> {
                                 return {crop2d(g, top, left, ih, iw)};
                             });
}

// ---------------------------------------------------------------------------
// Indexed gather / scatter

Tensor index_gather(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> idx,
                    Shape out_shape) {
    if (static_cast<std::int64_t>(idx->size()) != numel_of(out_shape))
        throw std::invalid_argument("index_gather: index count " + std::to_string(idx->size()) +
                                    " does not match shape " + shape_str(out_shape));
    const double* px = x.data().data();
    const std::int64_t xn = x.numel();
    std::vector<double> out(idx->size());
    for (std::size_t i = 0; i < idx->size(); ++i) {
        const std::int64_t j = (*idx)[i];
        if (j < 0 || j >= xn)
            throw std::out_of_range("index_gather: index " + std::to_string(j) + " out of range " +
                                    std::to_string(xn));
        out[i] = px[j];
    }
    Shape xs = x.shape();
    return autograd::make_op("index_gather", std::move(out_shape), std::move(out), {x},
                             [idx, xs](const Tensor& g) -> std::vector<Tensor> {
                                 return {index_scatter(g, idx, xs)};
                             });
}

Tensor index_scatter(const Tensor& x, std::shared_ptr<const std::vector<std::int64_t>> idx,
                     Shape out_shape) {
    if (static_cast<std::int64_t>(idx->size()) != x.numel())
        throw std::invalid_argument("index_scatter: index count " + std::to_string(idx->size()) +
                                    " does not match input " + shape_str(x.shape()));
    const double* px = x.data().data();
    const std::int64_t on = numel_of(out_shape);
    std::vector<double> out(static_cast<std::size_t>(on), 0.0);
    for (std::size_t i = 0; i < idx->size(); ++i) {
        const std::int64_t j = (*idx)[i];
        if (j < 0 || j >= on)
            throw std::out_of_range("index_scatter: index " + std::to_string(j) + " out of range " +
                                    std::to_string(on));
        out[static_cast<std::size_t>(j)] += px[i];
    }
    Shape xs = x.shape();
    return autograd::make_op("index_scatter", std::move(out_shape), std::move(out), {x},
                             [idx, xs](const Tensor& g) -> std::vector<Tensor> {
                                 return {index_gather(g, idx, xs)};
                             });
}

// ---------------------------------------------------------------------------
// grad

namespace {

using autograd::Node;

void collect_reachable(Node* root, std::vector<Node*>& order) {
    std::unordered_set<Node*> seen;
    std::vector<Node*> stack{root};
    seen.insert(root);
    while (!stack.empty()) {
        Node* n = stack.back();
        stack.pop_back();
        order.push_back(n);
        for (const auto& p : n->parents) {
            if (p.node() && seen.insert(p.node().get()).second) stack.push_back(p.node().get());
        }
    }
}

}  // namespace

std::vector<Tensor> grad(const Tensor& output, std::span<const Tensor> wrt, GradOptions opt) {
    if (!output.defined()) throw std::invalid_argument("grad: undefined output");
    if (output.numel() != 1)
        throw std::invalid_argument("grad: output must be a scalar, got shape " +
                                    shape_str(output.shape()));
    std::vector<Tensor> results(wrt.size());
    auto zero_fill = [&](std::size_t i) { results[i] = Tensor::zeros(wrt[i].shape()); };

    if (!output.node()) {
        for (std::size_t i = 0; i < wrt.size(); ++i) zero_fill(i);
        return results;
    }

    std::vector<Node*> order;
    collect_reachable(output.node().get(), order);
    // creation order is a topological order: ascending = parents first
    std::sort(order.begin(), order.end(), [](Node* a, Node* b) { return a->seq < b->seq; });

    // prune to nodes that can still reach a wrt node via parent edges
    std::unordered_set<const Node*> needed;
    for (const auto& t : wrt)
        if (t.node()) needed.insert(t.node().get());
    for (Node* n : order) {
        if (needed.count(n)) continue;
        for (const auto& p : n->parents) {
            if (p.node() && needed.count(p.node().get())) {
                needed.insert(n);
                break;
            }
        }
    }

    std::unordered_map<Node*, Tensor> adjoint;
    if (needed.count(output.node().get()))
        adjoint.emplace(output.node().get(), Tensor::scalar(1.0));

    std::optional<autograd::NoGradGuard> ng;
    if (!opt.create_graph) ng.emplace();

    NeededScope needed_scope(&needed);
    for (auto rit = order.rbegin(); rit != order.rend(); ++rit) {
        Node* n = *rit;
        auto it = adjoint.find(n);
        if (it == adjoint.end() || !n->backward) continue;
        std::vector<Tensor> gs = n->backward(it->second);
        if (gs.size() != n->parents.size())
            throw std::logic_error(std::string("grad: op '") + n->op + "' returned " +
                                   std::to_string(gs.size()) + " grads for " +
                                   std::to_string(n->parents.size()) + " parents");
        for (std::size_t i = 0; i < gs.size(); ++i) {
            const Tensor& p = n->parents[i];
            if (!p.node() || !gs[i].defined()) continue;
            if (!needed.count(p.node().get())) continue;
            auto [pit, inserted] = adjoint.try_emplace(p.node().get(), gs[i]);
            if (!inserted) pit->second = add(pit->second, gs[i]);
        }
    }

    for (std::size_t i = 0; i < wrt.size(); ++i) {
        if (!wrt[i].node()) {
            zero_fill(i);
            continue;
        }
        auto it = adjoint.find(wrt[i].node().get());
        if (it == adjoint.end()) zero_fill(i);
        else results[i] = it->second;
    }
    return results;
}

std::vector<Tensor> grad(const Tensor& output, const std::vector<Tensor>& wrt, GradOptions opt) {
    return grad(output, std::span<const Tensor>(wrt.data(), wrt.size()), opt);
}

Tensor grad(const Tensor& output, const Tensor& wrt, GradOptions opt) {
    std::vector<Tensor> v{wrt};
    return grad(output, std::span<const Tensor>(v.data(), 1), opt)[0];
}

// ---------------------------------------------------------------------------
// finite differences

double finite_diff_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps) {
    if (eps <= 0) throw std::invalid_argument("finite_diff_check: eps must be positive");
    Tensor xg = x.clone();
    xg.set_requires_grad(true);
    Tensor y = f(xg);
    if (y.numel() != 1)
        throw std::invalid_argument("finite_diff_check: f must return a scalar, got " +
                                    shape_str(y.shape()));
    Tensor analytic = grad(y, xg);

    Tensor xp = x.clone();
    auto xd = xp.mutable_data();
    auto ga = analytic.data();
    double max_err = 0.0;
    for (std::size_t i = 0; i < xd.size(); ++i) {
        const double orig = xd[i];
        xd[i] = orig + eps;
        const double fp = f(xp).item();
        xd[i] = orig - eps;
        const double fm = f(xp).item();
        xd[i] = orig;
        const double fd = (fp - fm) / (2.0 * eps);
        const double err = std::abs(ga[i] - fd) / (std::abs(ga[i]) + eps);
        max_err = std::max(max_err, err);
    }
    return max_err;
}

}  // namespace embattr
