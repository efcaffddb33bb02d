#include "pano/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <unordered_set>

#include "pano/errors.hpp"
#include "pano/util.hpp"

namespace pano {

using detail::TensorImpl;
using Impl = std::shared_ptr<TensorImpl>;

namespace {

thread_local int g_no_grad_depth = 0;

std::size_t checked_numel(const std::vector<int>& shape) {
    std::size_t n = 1;
    for (int e : shape) {
        if (e <= 0) throw DimensionError("tensor extent must be positive, got shape " + shape_str(shape));
        n *= static_cast<std::size_t>(e);
    }
    return n;
}

Impl make_leaf(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    auto impl = std::make_shared<TensorImpl>();
    const std::size_t n = checked_numel(shape);
    if (data.size() != n)
        throw DimensionError("data length " + std::to_string(data.size()) +
                             " does not match shape " + shape_str(shape));
    impl->shape = std::move(shape);
    impl->data = std::move(data);
    impl->requires_grad = requires_grad;
    return impl;
}

bool track(const std::initializer_list<Impl>& inputs) {
    if (g_no_grad_depth > 0) return false;
    for (const auto& in : inputs)
        if (in && in->requires_grad) return true;
    return false;
}

// Creates the output node and, when tracking, wires parents + backward rule.
Impl make_node(std::vector<int> shape, std::size_t n, const char* op,
               std::initializer_list<Impl> inputs,
               std::function<void(TensorImpl&)> backward_fn) {
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = std::move(shape);
    impl->data.assign(n, 0.0f);
    impl->op = op;
    if (track(inputs)) {
        impl->requires_grad = true;
        impl->parents.assign(inputs.begin(), inputs.end());
        impl->backward_fn = std::move(backward_fn);
    }
    return impl;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
    if (a.shape() != b.shape())
        throw DimensionError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) +
                             " vs " + shape_str(b.shape()));
}

void check_defined(const Tensor& t, const char* op) {
    if (!t.defined()) throw DimensionError(std::string(op) + ": undefined tensor");
}

}  // namespace

NoGradGuard::NoGradGuard() { ++g_no_grad_depth; }
NoGradGuard::~NoGradGuard() { --g_no_grad_depth; }
bool grad_enabled() { return g_no_grad_depth == 0; }

// ---- Tensor basics ----

Tensor Tensor::wrap(Impl impl) {
    Tensor t;
    t.impl_ = std::move(impl);
    return t;
}

Tensor Tensor::zeros(std::vector<int> shape, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<float>(n, 0.0f), requires_grad));
}

Tensor Tensor::full(std::vector<int> shape, float value, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    return wrap(make_leaf(std::move(shape), std::vector<float>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<float> data, bool requires_grad) {
    return wrap(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(float value) { return from_data({}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, std::mt19937& rng, float stddev, bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    std::normal_distribution<float> dist(0.0f, stddev);
    std::vector<float> data(n);
    for (auto& v : data) v = dist(rng);
    return wrap(make_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::uniform(std::vector<int> shape, std::mt19937& rng, float lo, float hi,
                       bool requires_grad) {
    const std::size_t n = checked_numel(shape);
    std::uniform_real_distribution<float> dist(lo, hi);
    std::vector<float> data(n);
    for (auto& v : data) v = dist(rng);
    return wrap(make_leaf(std::move(shape), std::move(data), requires_grad));
}

const std::vector<int>& Tensor::shape() const {
    check_defined(*this, "shape");
    return impl_->shape;
}

int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int i) const {
    const auto& s = shape();
    if (i < 0 || i >= static_cast<int>(s.size()))
        throw DimensionError("dim index " + std::to_string(i) + " out of range for " + shape_str(s));
    return s[i];
}

std::size_t Tensor::numel() const {
    check_defined(*this, "numel");
    return impl_->data.size();
}

std::span<const float> Tensor::data() const {
    check_defined(*this, "data");
    return impl_->data;
}

std::span<float> Tensor::raw_data() {
    check_defined(*this, "raw_data");
    return impl_->data;
}

bool Tensor::requires_grad() const { return impl_ && impl_->requires_grad; }

std::span<const float> Tensor::grad() const {
    check_defined(*this, "grad");
    return impl_->grad;
}

void Tensor::zero_grad() {
    check_defined(*this, "zero_grad");
    std::fill(impl_->grad.begin(), impl_->grad.end(), 0.0f);
}

float Tensor::item() const {
    if (numel() != 1)
        throw DimensionError("item() on non-scalar tensor " + shape_str(shape()));
    return impl_->data[0];
}

float Tensor::at(int i) const {
    if (rank() != 1) throw DimensionError("at(i) needs rank 1, got " + shape_str(shape()));
    return impl_->data[static_cast<std::size_t>(i)];
}

float Tensor::at(int i, int j) const {
    if (rank() != 2) throw DimensionError("at(i,j) needs rank 2, got " + shape_str(shape()));
    return impl_->data[static_cast<std::size_t>(i) * dim(1) + j];
}

float Tensor::at(int i, int j, int k) const {
    if (rank() != 3) throw DimensionError("at(i,j,k) needs rank 3, got " + shape_str(shape()));
    return impl_->data[(static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k];
}

float Tensor::at(int i, int j, int k, int l) const {
    if (rank() != 4) throw DimensionError("at(i,j,k,l) needs rank 4, got " + shape_str(shape()));
    return impl_->data[((static_cast<std::size_t>(i) * dim(1) + j) * dim(2) + k) * dim(3) + l];
}

Tensor Tensor::detach() const {
    check_defined(*this, "detach");
    auto impl = std::make_shared<TensorImpl>();
    impl->shape = impl_->shape;
    impl->data = impl_->data;  // copy; detached view must not alias a live tape buffer
    impl->requires_grad = false;
    return wrap(std::move(impl));
}

Tensor Tensor::clone(bool requires_grad) const {
    check_defined(*this, "clone");
    return from_data(impl_->shape, impl_->data, requires_grad);
}

void Tensor::backward() {
    check_defined(*this, "backward");
    if (numel() != 1)
        throw DimensionError("backward() requires a scalar root, got " + shape_str(shape()));
    if (!impl_->requires_grad) return;

    // Iterative post-order DFS: every reachable node exactly once.
    std::vector<TensorImpl*> order;
    std::unordered_set<TensorImpl*> visited;
    struct Frame {
        TensorImpl* node;
        std::size_t next;
    };
    std::vector<Frame> stack{{impl_.get(), 0}};
    visited.insert(impl_.get());
    while (!stack.empty()) {
        Frame& f = stack.back();
        if (f.next < f.node->parents.size()) {
            TensorImpl* p = f.node->parents[f.next++].get();
            if (p && p->requires_grad && visited.insert(p).second) stack.push_back({p, 0});
        } else {
            order.push_back(f.node);
            stack.pop_back();
        }
    }

    impl_->ensure_grad();
    impl_->grad[0] += 1.0f;
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        TensorImpl* node = *it;
        if (node->backward_fn) {
            node->ensure_grad();
            node->backward_fn(*node);
        }
    }
}

// ---- elementwise ----

namespace {

Tensor binary_elementwise(const Tensor& a, const Tensor& b, const char* op,
                          float (*fwd)(float, float),
                          void (*bwd)(float g, float av, float bv, float& ga, float& gb)) {
    check_defined(a, op);
    check_defined(b, op);
    check_same_shape(a, b, op);
    Impl ia = a.impl(), ib = b.impl();
    const std::size_t n = a.numel();
    auto out = make_node(a.shape(), n, op, {ia, ib}, [ia, ib, bwd](TensorImpl& self) {
        const bool ga = ia->requires_grad, gb = ib->requires_grad;
        if (ga) ia->ensure_grad();
        if (gb) ib->ensure_grad();
        float dummy = 0.0f;
        for (std::size_t i = 0; i < self.data.size(); ++i) {
            bwd(self.grad[i], ia->data[i], ib->data[i], ga ? ia->grad[i] : dummy,
                gb ? ib->grad[i] : dummy);
        }
    });
    for (std::size_t i = 0; i < n; ++i) out->data[i] = fwd(ia->data[i], ib->data[i]);
    return Tensor::wrap(out);
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "add", [](float x, float y) { return x + y; },
        [](float g, float, float, float& ga, float& gb) {
            ga += g;
            gb += g;
        });
}

Tensor sub(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "sub", [](float x, float y) { return x - y; },
        [](float g, float, float, float& ga, float& gb) {
            ga += g;
            gb -= g;
        });
}

Tensor mul(const Tensor& a, const Tensor& b) {
    return binary_elementwise(
        a, b, "mul", [](float x, float y) { return x * y; },
        [](float g, float av, float bv, float& ga, float& gb) {
            ga += g * bv;
            gb += g * av;
        });
}

Tensor add_scalar(const Tensor& a, float s) {
    check_defined(a, "add_scalar");
    Impl ia = a.impl();
    auto out = make_node(a.shape(), a.numel(), "add_scalar", {ia}, [ia](TensorImpl& self) {
        ia->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += self.grad[i];
    });
    for (std::size_t i = 0; i < a.numel(); ++i) out->data[i] = ia->data[i] + s;
    return Tensor::wrap(out);
}

Tensor mul_scalar(const Tensor& a, float s) {
    check_defined(a, "mul_scalar");
    Impl ia = a.impl();
    auto out = make_node(a.shape(), a.numel(), "mul_scalar", {ia}, [ia, s](TensorImpl& self) {
        ia->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += self.grad[i] * s;
    });
    for (std::size_t i = 0; i < a.numel(); ++i) out->data[i] = ia->data[i] * s;
    return Tensor::wrap(out);
}

Tensor log(const Tensor& a) {
    check_defined(a, "log");
    Impl ia = a.impl();
    auto out = make_node(a.shape(), a.numel(), "log", {ia}, [ia](TensorImpl& self) {
        ia->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += self.grad[i] / ia->data[i];
    });
    for (std::size_t i = 0; i < a.numel(); ++i) {
        const float v = ia->data[i];
        if (!(v > 0.0f))
            throw NumericError("log: non-positive input " + std::to_string(v) + " at index " +
                               std::to_string(i));
        out->data[i] = std::log(v);
    }
    return Tensor::wrap(out);
}

Tensor relu(const Tensor& a) {
    check_defined(a, "relu");
    Impl ia = a.impl();
    auto out = make_node(a.shape(), a.numel(), "relu", {ia}, [ia](TensorImpl& self) {
        ia->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i)
            if (ia->data[i] > 0.0f) ia->grad[i] += self.grad[i];
    });
    for (std::size_t i = 0; i < a.numel(); ++i) out->data[i] = std::max(0.0f, ia->data[i]);
    return Tensor::wrap(out);
}

// ---- reductions ----

Tensor sum(const Tensor& a) {
    check_defined(a, "sum");
    Impl ia = a.impl();
    auto out = make_node({}, 1, "sum", {ia}, [ia](TensorImpl& self) {
        ia->ensure_grad();
        const float g = self.grad[0];
        for (auto& gi : ia->grad) gi += g;
    });
    double acc = 0.0;
    for (float v : ia->data) acc += v;
    out->data[0] = static_cast<float>(acc);
    return Tensor::wrap(out);
}

Tensor mean(const Tensor& a) {
    check_defined(a, "mean");
    return mul_scalar(sum(a), 1.0f / static_cast<float>(a.numel()));
}

Tensor mse(const Tensor& a, const Tensor& b) {
    check_defined(a, "mse");
    check_defined(b, "mse");
    check_same_shape(a, b, "mse");
    Impl ia = a.impl(), ib = b.impl();
    const std::size_t n = a.numel();
    auto out = make_node({}, 1, "mse", {ia, ib}, [ia, ib, n](TensorImpl& self) {
        const float g = self.grad[0];
        const float scale = 2.0f / static_cast<float>(n);
        const bool ga = ia->requires_grad, gb = ib->requires_grad;
        if (ga) ia->ensure_grad();
        if (gb) ib->ensure_grad();
        for (std::size_t i = 0; i < n; ++i) {
            const float d = g * scale * (ia->data[i] - ib->data[i]);
            if (ga) ia->grad[i] += d;
            if (gb) ib->grad[i] -= d;
        }
    });
    double acc = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double d = static_cast<double>(ia->data[i]) - ib->data[i];
        acc += d * d;
    }
    out->data[0] = static_cast<float>(acc / static_cast<double>(n));
    return Tensor::wrap(out);
}

// ---- linear algebra ----

Tensor matmul(const Tensor& a, const Tensor& b) {
    check_defined(a, "matmul");
    check_defined(b, "matmul");
    if (a.rank() != 2 || b.rank() != 2)
        throw DimensionError("matmul: rank-2 tensors required, got " + shape_str(a.shape()) +
                             " and " + shape_str(b.shape()));
    const int M = a.dim(0), K = a.dim(1), K2 = b.dim(0), N = b.dim(1);
    if (K != K2)
        throw DimensionError("matmul: inner extents differ, " + shape_str(a.shape()) + " x " +
                             shape_str(b.shape()));
    Impl ia = a.impl(), ib = b.impl();
    auto out = make_node({M, N}, static_cast<std::size_t>(M) * N, "matmul", {ia, ib},
                         [ia, ib, M, K, N](TensorImpl& self) {
                             if (ia->requires_grad) {
                                 ia->ensure_grad();
                                 // dA = G * B^T
                                 for (int m = 0; m < M; ++m)
                                     for (int k = 0; k < K; ++k) {
                                         double acc = 0.0;
                                         for (int j = 0; j < N; ++j)
                                             acc += static_cast<double>(self.grad[m * N + j]) *
                                                    ib->data[k * N + j];
                                         ia->grad[m * K + k] += static_cast<float>(acc);
                                     }
                             }
                             if (ib->requires_grad) {
                                 ib->ensure_grad();
                                 // dB = A^T * G
                                 for (int k = 0; k < K; ++k)
                                     for (int j = 0; j < N; ++j) {
                                         double acc = 0.0;
                                         for (int m = 0; m < M; ++m)
                                             acc += static_cast<double>(ia->data[m * K + k]) *
                                                    self.grad[m * N + j];
                                         ib->grad[k * N + j] += static_cast<float>(acc);
                                     }
                             }
                         });
    for (int m = 0; m < M; ++m)
        for (int j = 0; j < N; ++j) {
            double acc = 0.0;
            for (int k = 0; k < K; ++k)
                acc += static_cast<double>(ia->data[m * K + k]) * ib->data[k * N + j];
            out->data[m * N + j] = static_cast<float>(acc);
        }
    return Tensor::wrap(out);
}

Tensor transpose(const Tensor& a) {
    check_defined(a, "transpose");
    if (a.rank() != 2)
        throw DimensionError("transpose: rank-2 tensor required, got " + shape_str(a.shape()));
    const int M = a.dim(0), N = a.dim(1);
    Impl ia = a.impl();
    auto out = make_node({N, M}, a.numel(), "transpose", {ia}, [ia, M, N](TensorImpl& self) {
        ia->ensure_grad();
        for (int i = 0; i < N; ++i)
            for (int j = 0; j < M; ++j) ia->grad[j * N + i] += self.grad[i * M + j];
    });
    for (int i = 0; i < M; ++i)
        for (int j = 0; j < N; ++j) out->data[j * M + i] = ia->data[i * N + j];
    return Tensor::wrap(out);
}

Tensor reshape(const Tensor& a, std::vector<int> new_shape) {
    check_defined(a, "reshape");
    const std::size_t n = checked_numel(new_shape);
    if (n != a.numel())
        throw DimensionError("reshape: element count mismatch, " + shape_str(a.shape()) + " -> " +
                             shape_str(new_shape));
    Impl ia = a.impl();
    auto out = make_node(std::move(new_shape), n, "reshape", {ia}, [ia](TensorImpl& self) {
        ia->ensure_grad();
        for (std::size_t i = 0; i < self.data.size(); ++i) ia->grad[i] += self.grad[i];
    });
    out->data = ia->data;
    return Tensor::wrap(out);
}

Tensor softmax_rows(const Tensor& a) {
    check_defined(a, "softmax_rows");
    if (a.rank() != 2)
        throw DimensionError("softmax_rows: rank-2 tensor required, got " + shape_str(a.shape()));
    const int R = a.dim(0), C = a.dim(1);
    Impl ia = a.impl();
    auto out = make_node(a.shape(), a.numel(), "softmax_rows", {ia}, [ia, R, C](TensorImpl& self) {
        ia->ensure_grad();
        for (int r = 0; r < R; ++r) {
            const float* y = &self.data[static_cast<std::size_t>(r) * C];
            const float* g = &self.grad[static_cast<std::size_t>(r) * C];
            double dot = 0.0;
            for (int c = 0; c < C; ++c) dot += static_cast<double>(g[c]) * y[c];
            for (int c = 0; c < C; ++c)
                ia->grad[static_cast<std::size_t>(r) * C + c] +=
                    y[c] * (g[c] - static_cast<float>(dot));
        }
    });
    for (int r = 0; r < R; ++r) {
        const float* x = &ia->data[static_cast<std::size_t>(r) * C];
        float m = x[0];
        for (int c = 1; c < C; ++c) m = std::max(m, x[c]);
        double s = 0.0;
        std::vector<double> e(C);
        for (int c = 0; c < C; ++c) {
            e[c] = std::exp(static_cast<double>(x[c]) - m);
            s += e[c];
        }
        for (int c = 0; c < C; ++c)
            out->data[static_cast<std::size_t>(r) * C + c] = static_cast<float>(e[c] / s);
    }
    return Tensor::wrap(out);
}

// ---- structural ----

Tensor concat_width(const std::vector<Tensor>& parts) {
    if (parts.empty()) throw DimensionError("concat_width: empty input list");
    for (const auto& p : parts) check_defined(p, "concat_width");
    const int C = parts[0].dim(0), H = parts[0].dim(1);
    int W = 0;
    std::vector<Impl> impls;
    std::vector<int> widths;
    for (const auto& p : parts) {
        if (p.rank() != 3 || p.dim(0) != C || p.dim(1) != H)
            throw DimensionError("concat_width: incompatible part " + shape_str(p.shape()) +
                                 " vs leading " + shape_str(parts[0].shape()));
        impls.push_back(p.impl());
        widths.push_back(p.dim(2));
        W += p.dim(2);
    }

    auto out = std::make_shared<TensorImpl>();
    out->shape = {C, H, W};
    out->data.assign(static_cast<std::size_t>(C) * H * W, 0.0f);
    out->op = "concat_width";
    bool needs = grad_enabled();
    if (needs) {
        needs = false;
        for (const auto& im : impls) needs = needs || im->requires_grad;
    }
    if (needs) {
        out->requires_grad = true;
        out->parents.assign(impls.begin(), impls.end());
        out->backward_fn = [impls, widths, C, H, W](TensorImpl& self) {
            int off = 0;
            for (std::size_t p = 0; p < impls.size(); ++p) {
                const int wp = widths[p];
                if (impls[p]->requires_grad) {
                    impls[p]->ensure_grad();
                    for (int c = 0; c < C; ++c)
                        for (int h = 0; h < H; ++h)
                            for (int w = 0; w < wp; ++w)
                                impls[p]->grad[(static_cast<std::size_t>(c) * H + h) * wp + w] +=
                                    self.grad[(static_cast<std::size_t>(c) * H + h) * W + off + w];
                }
                off += wp;
            }
        };
    }
    int off = 0;
    for (std::size_t p = 0; p < impls.size(); ++p) {
        const int wp = widths[p];
        for (int c = 0; c < C; ++c)
            for (int h = 0; h < H; ++h)
                std::copy_n(&impls[p]->data[(static_cast<std::size_t>(c) * H + h) * wp], wp,
                            &out->data[(static_cast<std::size_t>(c) * H + h) * W + off]);
        off += wp;
    }
    return Tensor::wrap(out);
}

Tensor slice_width(const Tensor& a, int w0, int w1) {
    check_defined(a, "slice_width");
    if (a.rank() != 3)
        throw DimensionError("slice_width: rank-3 tensor required, got " + shape_str(a.shape()));
    const int C = a.dim(0), H = a.dim(1), W = a.dim(2);
    if (w0 < 0 || w1 > W || w0 >= w1)
        throw DimensionError("slice_width: bad column range [" + std::to_string(w0) + "," +
                             std::to_string(w1) + ") for width " + std::to_string(W));
    const int ow = w1 - w0;
    Impl ia = a.impl();
    auto out = make_node({C, H, ow}, static_cast<std::size_t>(C) * H * ow, "slice_width", {ia},
                         [ia, C, H, W, w0, ow](TensorImpl& self) {
                             ia->ensure_grad();
                             for (int c = 0; c < C; ++c)
                                 for (int h = 0; h < H; ++h)
                                     for (int w = 0; w < ow; ++w)
                                         ia->grad[(static_cast<std::size_t>(c) * H + h) * W + w0 + w] +=
                                             self.grad[(static_cast<std::size_t>(c) * H + h) * ow + w];
                         });
    for (int c = 0; c < C; ++c)
        for (int h = 0; h < H; ++h)
            std::copy_n(&ia->data[(static_cast<std::size_t>(c) * H + h) * W + w0], ow,
                        &out->data[(static_cast<std::size_t>(c) * H + h) * ow]);
    return Tensor::wrap(out);
}

Tensor select_batch(const Tensor& a, int n) {
    check_defined(a, "select_batch");
    if (a.rank() != 4)
        throw DimensionError("select_batch: rank-4 tensor required, got " + shape_str(a.shape()));
    const int N = a.dim(0), C = a.dim(1), H = a.dim(2), W = a.dim(3);
    if (n < 0 || n >= N)
        throw DimensionError("select_batch: index " + std::to_string(n) + " out of range for N=" +
                             std::to_string(N));
    const std::size_t sz = static_cast<std::size_t>(C) * H * W;
    const std::size_t off = static_cast<std::size_t>(n) * sz;
    Impl ia = a.impl();
    auto out = make_node({C, H, W}, sz, "select_batch", {ia}, [ia, off, sz](TensorImpl& self) {
        ia->ensure_grad();
        for (std::size_t i = 0; i < sz; ++i) ia->grad[off + i] += self.grad[i];
    });
    std::copy_n(&ia->data[off], sz, out->data.begin());
    return Tensor::wrap(out);
}

Tensor row_select(const Tensor& a, const std::vector<int>& rows) {
    check_defined(a, "row_select");
    if (a.rank() != 2)
        throw DimensionError("row_select: rank-2 tensor required, got " + shape_str(a.shape()));
    const int K = a.dim(0), C = a.dim(1);
    for (int r : rows)
        if (r < 0 || r >= K)
            throw DimensionError("row_select: row " + std::to_string(r) + " out of range for K=" +
                                 std::to_string(K));
    if (rows.empty()) throw DimensionError("row_select: empty row list");
    Impl ia = a.impl();
    const int R = static_cast<int>(rows.size());
    auto out = make_node({R, C}, static_cast<std::size_t>(R) * C, "row_select", {ia},
                         [ia, rows, C](TensorImpl& self) {
                             ia->ensure_grad();
                             for (std::size_t i = 0; i < rows.size(); ++i)
                                 for (int c = 0; c < C; ++c)
                                     ia->grad[static_cast<std::size_t>(rows[i]) * C + c] +=
                                         self.grad[i * C + c];
                         });
    for (std::size_t i = 0; i < rows.size(); ++i)
        std::copy_n(&ia->data[static_cast<std::size_t>(rows[i]) * C], C, &out->data[i * C]);
    return Tensor::wrap(out);
}

// ---- conv net ops ----

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
    check_defined(x, "conv2d");
    check_defined(w, "conv2d");
    check_defined(b, "conv2d");
    if (x.rank() != 4 || w.rank() != 4 || b.rank() != 1)
        throw DimensionError("conv2d: expected x[N,C,H,W], w[OC,C,kh,kw], b[OC], got " +
                             shape_str(x.shape()) + ", " + shape_str(w.shape()) + ", " +
                             shape_str(b.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    const int OC = w.dim(0), kh = w.dim(2), kw = w.dim(3);
    if (w.dim(1) != C || b.dim(0) != OC)
        throw DimensionError("conv2d: channel mismatch, x " + shape_str(x.shape()) + " w " +
                             shape_str(w.shape()) + " b " + shape_str(b.shape()));
    if (stride < 1) throw DimensionError("conv2d: stride must be >= 1");
    const int OH = (H + 2 * pad - kh) / stride + 1;
    const int OW = (W + 2 * pad - kw) / stride + 1;
    if (OH < 1 || OW < 1)
        throw DimensionError("conv2d: kernel larger than padded input");

    Impl ix = x.impl(), iw = w.impl(), ib = b.impl();
    auto backward = [ix, iw, ib, N, C, H, W, OC, kh, kw, OH, OW, stride, pad](TensorImpl& self) {
        const float* g = self.grad.data();
        if (ix->requires_grad) {
            ix->ensure_grad();
            parallel_for(static_cast<std::size_t>(N), [&](std::size_t n) {
                for (int oc = 0; oc < OC; ++oc)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow) {
                            const float gv =
                                g[((n * OC + oc) * OH + oh) * OW + ow];
                            if (gv == 0.0f) continue;
                            for (int ic = 0; ic < C; ++ic)
                                for (int i = 0; i < kh; ++i) {
                                    const int ih = oh * stride - pad + i;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int j = 0; j < kw; ++j) {
                                        const int iw_ = ow * stride - pad + j;
                                        if (iw_ < 0 || iw_ >= W) continue;
                                        ix->grad[((n * C + ic) * H + ih) * W + iw_] +=
                                            gv * iw->data[((static_cast<std::size_t>(oc) * C + ic) * kh + i) * kw + j];
                                    }
                                }
                        }
            });
        }
        if (iw->requires_grad) {
            iw->ensure_grad();
            parallel_for(static_cast<std::size_t>(OC), [&](std::size_t oc) {
                for (int ic = 0; ic < C; ++ic)
                    for (int i = 0; i < kh; ++i)
                        for (int j = 0; j < kw; ++j) {
                            double acc = 0.0;
                            for (int n = 0; n < N; ++n)
                                for (int oh = 0; oh < OH; ++oh) {
                                    const int ih = oh * stride - pad + i;
                                    if (ih < 0 || ih >= H) continue;
                                    for (int ow = 0; ow < OW; ++ow) {
                                        const int iw_ = ow * stride - pad + j;
                                        if (iw_ < 0 || iw_ >= W) continue;
                                        acc += static_cast<double>(
                                                   g[((static_cast<std::size_t>(n) * OC + oc) * OH + oh) * OW + ow]) *
                                               ix->data[((static_cast<std::size_t>(n) * C + ic) * H + ih) * W + iw_];
                                    }
                                }
                            iw->grad[((oc * C + ic) * kh + i) * kw + j] += static_cast<float>(acc);
                        }
            });
        }
        if (ib->requires_grad) {
            ib->ensure_grad();
            for (int oc = 0; oc < OC; ++oc) {
                double acc = 0.0;
                for (int n = 0; n < N; ++n)
                    for (int oh = 0; oh < OH; ++oh)
                        for (int ow = 0; ow < OW; ++ow)
                            acc += g[((static_cast<std::size_t>(n) * OC + oc) * OH + oh) * OW + ow];
                ib->grad[oc] += static_cast<float>(acc);
            }
        }
    };

    auto out = make_node({N, OC, OH, OW}, static_cast<std::size_t>(N) * OC * OH * OW, "conv2d",
                         {ix, iw, ib}, backward);
    parallel_for(static_cast<std::size_t>(N) * OC, [&](std::size_t noc) {
        const int n = static_cast<int>(noc) / OC;
        const int oc = static_cast<int>(noc) % OC;
        for (int oh = 0; oh < OH; ++oh)
            for (int ow = 0; ow < OW; ++ow) {
                double acc = ib->data[oc];
                for (int ic = 0; ic < C; ++ic)
                    for (int i = 0; i < kh; ++i) {
                        const int ih = oh * stride - pad + i;
                        if (ih < 0 || ih >= H) continue;
                        const float* xrow = &ix->data[((static_cast<std::size_t>(n) * C + ic) * H + ih) * W];
                        const float* wrow = &iw->data[((static_cast<std::size_t>(oc) * C + ic) * kh + i) * kw];
                        for (int j = 0; j < kw; ++j) {
                            const int iw_ = ow * stride - pad + j;
                            if (iw_ < 0 || iw_ >= W) continue;
                            acc += static_cast<double>(xrow[iw_]) * wrow[j];
                        }
                    }
                out->data[((static_cast<std::size_t>(n) * OC + oc) * OH + oh) * OW + ow] =
                    static_cast<float>(acc);
            }
    });
    return Tensor::wrap(out);
}

Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w) {
    check_defined(x, "upsample_bilinear");
    if (x.rank() != 4)
        throw DimensionError("upsample_bilinear: rank-4 tensor required, got " +
                             shape_str(x.shape()));
    if (out_h < 1 || out_w < 1) throw DimensionError("upsample_bilinear: bad output size");
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);

    // Half-pixel source coordinates, one (i0,i1,frac) table per axis.
    auto build = [](int in, int out) {
        std::vector<int> lo(out), hi(out);
        std::vector<float> fr(out);
        const double scale = static_cast<double>(in) / out;
        for (int o = 0; o < out; ++o) {
            double s = (o + 0.5) * scale - 0.5;
            s = std::min(std::max(s, 0.0), static_cast<double>(in - 1));
            const int l = static_cast<int>(s);
            lo[o] = l;
            hi[o] = std::min(l + 1, in - 1);
            fr[o] = static_cast<float>(s - l);
        }
        return std::tuple{lo, hi, fr};
    };
    auto [ylo, yhi, yfr] = build(H, out_h);
    auto [xlo, xhi, xfr] = build(W, out_w);

    Impl ix = x.impl();
    auto out = make_node({N, C, out_h, out_w}, static_cast<std::size_t>(N) * C * out_h * out_w,
                         "upsample_bilinear", {ix},
                         [ix, N, C, H, W, out_h, out_w, ylo, yhi, yfr, xlo, xhi, xfr](TensorImpl& self) {
                             ix->ensure_grad();
                             parallel_for(static_cast<std::size_t>(N) * C, [&](std::size_t nc) {
                                 float* gx = &ix->grad[nc * H * W];
                                 const float* g = &self.grad[nc * out_h * out_w];
                                 for (int oy = 0; oy < out_h; ++oy) {
                                     const float fy = yfr[oy];
                                     for (int ox = 0; ox < out_w; ++ox) {
                                         const float fx = xfr[ox];
                                         const float gv = g[oy * out_w + ox];
                                         gx[ylo[oy] * W + xlo[ox]] += gv * (1 - fy) * (1 - fx);
                                         gx[ylo[oy] * W + xhi[ox]] += gv * (1 - fy) * fx;
                                         gx[yhi[oy] * W + xlo[ox]] += gv * fy * (1 - fx);
                                         gx[yhi[oy] * W + xhi[ox]] += gv * fy * fx;
                                     }
                                 }
                             });
                         });
    parallel_for(static_cast<std::size_t>(N) * C, [&](std::size_t nc) {
        const float* src = &ix->data[nc * H * W];
        float* dst = &out->data[nc * out_h * out_w];
        for (int oy = 0; oy < out_h; ++oy) {
            const float fy = yfr[oy];
            const float* r0 = &src[ylo[oy] * W];
            const float* r1 = &src[yhi[oy] * W];
            for (int ox = 0; ox < out_w; ++ox) {
                const float fx = xfr[ox];
                const float top = r0[xlo[ox]] * (1 - fx) + r0[xhi[ox]] * fx;
                const float bot = r1[xlo[ox]] * (1 - fx) + r1[xhi[ox]] * fx;
                dst[oy * out_w + ox] = top * (1 - fy) + bot * fy;
            }
        }
    });
    return Tensor::wrap(out);
}

Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const std::vector<float>& running_mean, const std::vector<float>& running_var,
                   bool train_mode, float eps, BatchStats* batch_stats_out) {
    check_defined(x, "batchnorm2d");
    check_defined(gamma, "batchnorm2d");
    check_defined(beta, "batchnorm2d");
    if (x.rank() != 4)
        throw DimensionError("batchnorm2d: rank-4 tensor required, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1), H = x.dim(2), W = x.dim(3);
    if (gamma.rank() != 1 || gamma.dim(0) != C || beta.rank() != 1 || beta.dim(0) != C)
        throw DimensionError("batchnorm2d: affine parameters must have length C=" +
                             std::to_string(C));
    if (!train_mode &&
        (running_mean.size() != static_cast<std::size_t>(C) ||
         running_var.size() != static_cast<std::size_t>(C)))
        throw DimensionError("batchnorm2d: running statistics must have length C=" +
                             std::to_string(C));

    Impl ix = x.impl(), ig = gamma.impl(), ibt = beta.impl();
    const std::size_t plane = static_cast<std::size_t>(H) * W;
    const std::size_t M = static_cast<std::size_t>(N) * plane;

    std::vector<float> mu(C), var(C);
    if (train_mode) {
        for (int c = 0; c < C; ++c) {
            double s = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = &ix->data[(static_cast<std::size_t>(n) * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) s += p[i];
            }
            mu[c] = static_cast<float>(s / static_cast<double>(M));
            double v = 0.0;
            for (int n = 0; n < N; ++n) {
                const float* p = &ix->data[(static_cast<std::size_t>(n) * C + c) * plane];
                for (std::size_t i = 0; i < plane; ++i) {
                    const double d = p[i] - mu[c];
                    v += d * d;
                }
            }
            var[c] = static_cast<float>(v / static_cast<double>(M));
        }
        if (batch_stats_out) {
            batch_stats_out->mean = mu;
            batch_stats_out->var = var;
        }
    } else {
        mu = running_mean;
        var = running_var;
    }

    std::vector<float> inv_std(C);
    for (int c = 0; c < C; ++c) inv_std[c] = 1.0f / std::sqrt(var[c] + eps);

    auto backward = [ix, ig, ibt, N, C, plane, M, mu, inv_std, train_mode](TensorImpl& self) {
        // xhat is recomputed from saved mean / inv_std.
        std::vector<double> sum_g(C, 0.0), sum_gx(C, 0.0);
        for (int c = 0; c < C; ++c) {
            for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) {
                    const double g = self.grad[base + i];
                    const double xhat = (ix->data[base + i] - mu[c]) * inv_std[c];
                    sum_g[c] += g;
                    sum_gx[c] += g * xhat;
                }
            }
        }
        if (ig->requires_grad) {
            ig->ensure_grad();
            for (int c = 0; c < C; ++c) ig->grad[c] += static_cast<float>(sum_gx[c]);
        }
        if (ibt->requires_grad) {
            ibt->ensure_grad();
            for (int c = 0; c < C; ++c) ibt->grad[c] += static_cast<float>(sum_g[c]);
        }
        if (ix->requires_grad) {
            ix->ensure_grad();
            const double invM = 1.0 / static_cast<double>(M);
            for (int c = 0; c < C; ++c) {
                const double gscale = ig->data[c] * inv_std[c];
                for (int n = 0; n < N; ++n) {
                    const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                    for (std::size_t i = 0; i < plane; ++i) {
                        const double g = self.grad[base + i];
                        if (train_mode) {
                            const double xhat = (ix->data[base + i] - mu[c]) * inv_std[c];
                            ix->grad[base + i] += static_cast<float>(
                                gscale * (g - invM * sum_g[c] - xhat * invM * sum_gx[c]));
                        } else {
                            ix->grad[base + i] += static_cast<float>(gscale * g);
                        }
                    }
                }
            }
        }
    };

    auto out = make_node(x.shape(), x.numel(), "batchnorm2d", {ix, ig, ibt}, backward);
    for (int c = 0; c < C; ++c) {
        const float a = ig->data[c] * inv_std[c];
        const float b2 = ibt->data[c] - a * mu[c];
        for (int n = 0; n < N; ++n) {
            const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
            for (std::size_t i = 0; i < plane; ++i) out->data[base + i] = a * ix->data[base + i] + b2;
        }
    }
    return Tensor::wrap(out);
}

Tensor channel_mean(const Tensor& x) {
    check_defined(x, "channel_mean");
    if (x.rank() != 4)
        throw DimensionError("channel_mean: rank-4 tensor required, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const std::size_t M = static_cast<std::size_t>(N) * plane;
    Impl ix = x.impl();
    auto out = make_node({C}, C, "channel_mean", {ix}, [ix, N, C, plane, M](TensorImpl& self) {
        ix->ensure_grad();
        for (int c = 0; c < C; ++c) {
            const float g = self.grad[c] / static_cast<float>(M);
            for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i) ix->grad[base + i] += g;
            }
        }
    });
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* p = &ix->data[(static_cast<std::size_t>(n) * C + c) * plane];
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        out->data[c] = static_cast<float>(s / static_cast<double>(M));
    }
    return Tensor::wrap(out);
}

Tensor channel_var(const Tensor& x) {
    check_defined(x, "channel_var");
    if (x.rank() != 4)
        throw DimensionError("channel_var: rank-4 tensor required, got " + shape_str(x.shape()));
    const int N = x.dim(0), C = x.dim(1);
    const std::size_t plane = static_cast<std::size_t>(x.dim(2)) * x.dim(3);
    const std::size_t M = static_cast<std::size_t>(N) * plane;

    Impl ix = x.impl();
    std::vector<float> mu(C);
    for (int c = 0; c < C; ++c) {
        double s = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* p = &ix->data[(static_cast<std::size_t>(n) * C + c) * plane];
            for (std::size_t i = 0; i < plane; ++i) s += p[i];
        }
        mu[c] = static_cast<float>(s / static_cast<double>(M));
    }
    // d var / dx_i = 2 (x_i - mu) / M; the mean-term contribution cancels.
    auto out = make_node({C}, C, "channel_var", {ix}, [ix, N, C, plane, M, mu](TensorImpl& self) {
        ix->ensure_grad();
        for (int c = 0; c < C; ++c) {
            const float g = self.grad[c] * 2.0f / static_cast<float>(M);
            for (int n = 0; n < N; ++n) {
                const std::size_t base = (static_cast<std::size_t>(n) * C + c) * plane;
                for (std::size_t i = 0; i < plane; ++i)
                    ix->grad[base + i] += g * (ix->data[base + i] - mu[c]);
            }
        }
    });
    for (int c = 0; c < C; ++c) {
        double v = 0.0;
        for (int n = 0; n < N; ++n) {
            const float* p = &ix->data[(static_cast<std::size_t>(n) * C + c) * plane];
            for (std::size_t i = 0; i < plane; ++i) {
                const double d = p[i] - mu[c];
                v += d * d;
            }
        }
        out->data[c] = static_cast<float>(v / static_cast<double>(M));
    }
    return Tensor::wrap(out);
}

// ---- classification ----

Tensor cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                     std::uint8_t ignore_id) {
    check_defined(logits, "cross_entropy");
    int N = 1, K = 0;
    std::size_t pixels = 0;
    if (logits.rank() == 3) {
        K = logits.dim(0);
        pixels = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
    } else if (logits.rank() == 4) {
        N = logits.dim(0);
        K = logits.dim(1);
        pixels = static_cast<std::size_t>(logits.dim(2)) * logits.dim(3);
    } else {
        throw DimensionError("cross_entropy: logits must be [K,H,W] or [N,K,H,W], got " +
                             shape_str(logits.shape()));
    }
    if (K < 2) throw DimensionError("cross_entropy: needs at least 2 classes");
    if (labels.size() != static_cast<std::size_t>(N) * pixels)
        throw DimensionError("cross_entropy: label count " + std::to_string(labels.size()) +
                             " does not match " + std::to_string(N * pixels) + " pixels");

    Impl ix = logits.impl();
    // Count + validate targets first.
    std::size_t valid = 0;
    for (std::size_t i = 0; i < labels.size(); ++i) {
        const std::uint8_t y = labels[i];
        if (y == ignore_id) continue;
        if (y >= K)
            throw DataError("cross_entropy: class id " + std::to_string(int(y)) +
                            " out of range for K=" + std::to_string(K));
        ++valid;
    }
    if (valid == 0) throw DataError("cross_entropy: all target pixels are ignored");

    std::vector<std::uint8_t> ylab(labels.begin(), labels.end());
    auto out = make_node({}, 1, "cross_entropy", {ix},
                         [ix, ylab, ignore_id, N, K, pixels, valid](TensorImpl& self) {
                             ix->ensure_grad();
                             const float gscale = self.grad[0] / static_cast<float>(valid);
                             for (int n = 0; n < N; ++n)
                                 for (std::size_t p = 0; p < pixels; ++p) {
                                     const std::uint8_t y = ylab[n * pixels + p];
                                     if (y == ignore_id) continue;
                                     const std::size_t base =
                                         static_cast<std::size_t>(n) * K * pixels + p;
                                     double m = ix->data[base];
                                     for (int k = 1; k < K; ++k)
                                         m = std::max(m, static_cast<double>(ix->data[base + k * pixels]));
                                     double s = 0.0;
                                     for (int k = 0; k < K; ++k)
                                         s += std::exp(ix->data[base + k * pixels] - m);
                                     for (int k = 0; k < K; ++k) {
                                         const double soft =
                                             std::exp(ix->data[base + k * pixels] - m) / s;
                                         ix->grad[base + k * pixels] += static_cast<float>(
                                             gscale * (soft - (k == y ? 1.0 : 0.0)));
                                     }
                                 }
                         });
    double loss = 0.0;
    for (int n = 0; n < N; ++n)
        for (std::size_t p = 0; p < pixels; ++p) {
            const std::uint8_t y = labels[n * pixels + p];
            if (y == ignore_id) continue;
            const std::size_t base = static_cast<std::size_t>(n) * K * pixels + p;
            double m = ix->data[base];
            for (int k = 1; k < K; ++k)
                m = std::max(m, static_cast<double>(ix->data[base + k * pixels]));
            double s = 0.0;
            for (int k = 0; k < K; ++k) s += std::exp(ix->data[base + k * pixels] - m);
            loss += m + std::log(s) - ix->data[base + y * pixels];
        }
    out->data[0] = static_cast<float>(loss / static_cast<double>(valid));
    return Tensor::wrap(out);
}

std::vector<std::uint8_t> argmax_channel(const Tensor& logits) {
    check_defined(logits, "argmax_channel");
    if (logits.rank() != 3)
        throw DimensionError("argmax_channel: logits must be [K,H,W], got " +
                             shape_str(logits.shape()));
    const int K = logits.dim(0);
    const std::size_t pixels = static_cast<std::size_t>(logits.dim(1)) * logits.dim(2);
    auto d = logits.data();
    std::vector<std::uint8_t> out(pixels);
    for (std::size_t p = 0; p < pixels; ++p) {
        int best = 0;
        float bv = d[p];
        for (int k = 1; k < K; ++k) {
            const float v = d[k * pixels + p];
            if (v > bv) {  // ties keep the lowest class index
                bv = v;
                best = k;
            }
        }
        out[p] = static_cast<std::uint8_t>(best);
    }
    return out;
}

Tensor masked_average_pool(const Tensor& f, const Tensor& onehot,
                           std::vector<std::uint8_t>* present_out) {
    check_defined(f, "masked_average_pool");
    check_defined(onehot, "masked_average_pool");
    if (f.rank() != 3 || onehot.rank() != 3)
        throw DimensionError("masked_average_pool: expected f[C,h,w] and onehot[K,h,w]");
    const int C = f.dim(0), h = f.dim(1), w = f.dim(2);
    const int K = onehot.dim(0);
    if (onehot.dim(1) != h || onehot.dim(2) != w)
        throw DimensionError("masked_average_pool: spatial mismatch, f " + shape_str(f.shape()) +
                             " vs mask " + shape_str(onehot.shape()));
    const std::size_t pixels = static_cast<std::size_t>(h) * w;

    Impl iff = f.impl(), im = onehot.impl();
    std::vector<std::size_t> count(K, 0);
    for (int k = 0; k < K; ++k) {
        const float* mk = &im->data[static_cast<std::size_t>(k) * pixels];
        for (std::size_t p = 0; p < pixels; ++p)
            if (mk[p] != 0.0f) ++count[k];
    }
    if (present_out) {
        present_out->assign(K, 0);
        for (int k = 0; k < K; ++k) (*present_out)[k] = count[k] > 0 ? 1 : 0;
    }

    auto out = make_node({K, C}, static_cast<std::size_t>(K) * C, "masked_average_pool",
                         {iff, im}, [iff, im, count, K, C, pixels](TensorImpl& self) {
                             if (!iff->requires_grad) return;  // mask is a constant
                             iff->ensure_grad();
                             for (int k = 0; k < K; ++k) {
                                 if (count[k] == 0) continue;
                                 const float inv = 1.0f / static_cast<float>(count[k]);
                                 const float* mk = &im->data[static_cast<std::size_t>(k) * pixels];
                                 for (int c = 0; c < C; ++c) {
                                     const float gv = self.grad[static_cast<std::size_t>(k) * C + c] * inv;
                                     if (gv == 0.0f) continue;
                                     float* gf = &iff->grad[static_cast<std::size_t>(c) * pixels];
                                     for (std::size_t p = 0; p < pixels; ++p)
                                         if (mk[p] != 0.0f) gf[p] += gv;
                                 }
                             }
                         });
    for (int k = 0; k < K; ++k) {
        if (count[k] == 0) continue;
        const float* mk = &im->data[static_cast<std::size_t>(k) * pixels];
        for (int c = 0; c < C; ++c) {
            const float* fc = &iff->data[static_cast<std::size_t>(c) * pixels];
            double acc = 0.0;
            for (std::size_t p = 0; p < pixels; ++p)
                if (mk[p] != 0.0f) acc += fc[p];
            out->data[static_cast<std::size_t>(k) * C + c] =
                static_cast<float>(acc / static_cast<double>(count[k]));
        }
    }
    return Tensor::wrap(out);
}

void assert_finite(const Tensor& t, const std::string& what) {
    for (float v : t.data())
        if (!std::isfinite(v)) throw NumericError(what + ": non-finite value encountered");
}

}  // namespace pano
