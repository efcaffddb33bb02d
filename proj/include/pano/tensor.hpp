#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <random>
#include <span>
#include <string>
#include <vector>

namespace pano {

namespace detail {

// One tape node. Holds the value buffer, the lazily allocated gradient
// buffer, and the closure that pushes gradients to the parents. The tape is
// acyclic by construction: an op's output node is created after its inputs.
struct TensorImpl {
    std::vector<int> shape;
    std::vector<float> data;
    std::vector<float> grad;  // sized on first accumulation
    bool requires_grad = false;
    const char* op = "leaf";
    std::vector<std::shared_ptr<TensorImpl>> parents;
    std::function<void(TensorImpl&)> backward_fn;

    std::size_t numel() const { return data.size(); }
    void ensure_grad() {
        if (grad.size() != data.size()) grad.assign(data.size(), 0.0f);
    }
};

}  // namespace detail

// Disables tape recording on the current thread while alive. Forward math is
// unaffected; outputs are plain constants.
class NoGradGuard {
public:
    NoGradGuard();
    ~NoGradGuard();
    NoGradGuard(const NoGradGuard&) = delete;
    NoGradGuard& operator=(const NoGradGuard&) = delete;
};

bool grad_enabled();

// Dense rank-N float32 tensor with reverse-mode gradients. Value semantics
// over a shared buffer: copies alias the same storage. Data is written at
// construction and treated as read-only afterwards, so tensors are safe to
// share across threads for reading; a tape and its gradients belong to the
// thread that ran the forward pass.
class Tensor {
public:
    Tensor() = default;

    static Tensor zeros(std::vector<int> shape, bool requires_grad = false);
    static Tensor full(std::vector<int> shape, float value, bool requires_grad = false);
    static Tensor from_data(std::vector<int> shape, std::vector<float> data,
                            bool requires_grad = false);
    static Tensor scalar(float value);
    static Tensor randn(std::vector<int> shape, std::mt19937& rng, float stddev = 1.0f,
                        bool requires_grad = false);
    static Tensor uniform(std::vector<int> shape, std::mt19937& rng, float lo, float hi,
                          bool requires_grad = false);

    bool defined() const { return impl_ != nullptr; }
    const std::vector<int>& shape() const;
    int rank() const;
    int dim(int i) const;
    std::size_t numel() const;

    std::span<const float> data() const;
    // Mutable view of the buffer. For leaf construction and optimizer
    // updates only; never call on a tensor that is part of a live tape.
    std::span<float> raw_data();

    bool requires_grad() const;
    std::span<const float> grad() const;
    void zero_grad();

    float item() const;  // scalar tensors only
    float at(int i) const;
    float at(int i, int j) const;
    float at(int i, int j, int k) const;
    float at(int i, int j, int k, int l) const;

    // Same data buffer, detached from the tape and not requiring grad.
    Tensor detach() const;
    // Deep copy of the data into a fresh leaf.
    Tensor clone(bool requires_grad = false) const;

    // Reverse sweep from a scalar root. Each tape node is visited exactly
    // once; gradients accumulate into every node that requires grad.
    void backward();

    std::shared_ptr<detail::TensorImpl> impl() const { return impl_; }
    static Tensor wrap(std::shared_ptr<detail::TensorImpl> impl);

private:
    std::shared_ptr<detail::TensorImpl> impl_;
};

// ---- elementwise ----
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor add_scalar(const Tensor& a, float s);
Tensor mul_scalar(const Tensor& a, float s);
Tensor log(const Tensor& a);  // natural log; input must be positive
Tensor relu(const Tensor& a);

// ---- reductions (f64 accumulation) ----
Tensor sum(const Tensor& a);   // -> scalar
Tensor mean(const Tensor& a);  // -> scalar
Tensor mse(const Tensor& a, const Tensor& b);  // mean of squared difference -> scalar

// ---- linear algebra ----
Tensor matmul(const Tensor& a, const Tensor& b);  // [MxK]x[KxN] -> [MxN]
Tensor transpose(const Tensor& a);                // [MxN] -> [NxM]
Tensor reshape(const Tensor& a, std::vector<int> new_shape);
// Row-wise softmax, stabilized by subtracting the row max.
Tensor softmax_rows(const Tensor& a);  // [RxC] -> [RxC]

// ---- structural ----
Tensor concat_width(const std::vector<Tensor>& parts);      // rank-3 [C,H,Wi]
Tensor slice_width(const Tensor& a, int w0, int w1);        // rank-3, cols [w0,w1)
Tensor select_batch(const Tensor& a, int n);                // [N,C,H,W] -> [C,H,W]
Tensor row_select(const Tensor& a, const std::vector<int>& rows);  // [K,C] -> [|rows|,C]

// ---- conv net ops ----
Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad);
Tensor upsample_bilinear(const Tensor& x, int out_h, int out_w);  // [N,C,H,W]

struct BatchStats {
    std::vector<float> mean;
    std::vector<float> var;  // biased
};

// Train mode normalizes by per-channel batch statistics (over batch and
// spatial dims) and optionally reports them; eval mode uses the supplied
// running statistics as constants.
Tensor batchnorm2d(const Tensor& x, const Tensor& gamma, const Tensor& beta,
                   const std::vector<float>& running_mean, const std::vector<float>& running_var,
                   bool train_mode, float eps = 1e-5f, BatchStats* batch_stats_out = nullptr);

// Per-channel mean / biased variance over batch and spatial dims. [N,C,H,W] -> [C]
Tensor channel_mean(const Tensor& x);
Tensor channel_var(const Tensor& x);

// ---- classification ----
inline constexpr std::uint8_t kIgnoreId = 255;

// Mean softmax cross-entropy over non-ignored pixels. logits [K,H,W] or
// [N,K,H,W]; labels row-major, length = spatial pixel count.
Tensor cross_entropy(const Tensor& logits, std::span<const std::uint8_t> labels,
                     std::uint8_t ignore_id = kIgnoreId);

// Per-pixel argmax over the class axis, ties toward the lowest index.
// logits [K,H,W] -> H*W class ids.
std::vector<std::uint8_t> argmax_channel(const Tensor& logits);

// Masked average pooling: out[k] = mean of f[:,p] over pixels p with
// onehot[k,p] == 1. f [C,h,w], onehot [K,h,w] (constant mask). Classes with
// no pixels get a zero row and present_out[k] = 0.
Tensor masked_average_pool(const Tensor& f, const Tensor& onehot,
                           std::vector<std::uint8_t>* present_out = nullptr);

// Throws NumericError when any element is not finite.
void assert_finite(const Tensor& t, const std::string& what);

}  // namespace pano
