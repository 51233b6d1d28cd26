#pragma once

#include <cstddef>
#include <functional>
#include <memory>
#include <span>
#include <string>
#include <vector>

#include "gslf/errors.hpp"

namespace gslf {

class Rng;

namespace detail {
struct TensorImpl {
  std::vector<std::size_t> shape;
  std::vector<double> data;
  std::vector<double> grad;  // same length as data while requires_grad is set
  bool requires_grad = false;
};
}  // namespace detail

/// Dense row-major double-precision tensor with shared storage.
///
/// Copying a Tensor copies a handle to the same storage; clone() copies the
/// payload. Gradients live next to the data and are accumulated by
/// GradTape::backward.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<std::size_t> shape, bool requires_grad = false);
  static Tensor full(std::vector<std::size_t> shape, double value,
                     bool requires_grad = false);
  static Tensor from(std::vector<std::size_t> shape, std::vector<double> values,
                     bool requires_grad = false);
  static Tensor scalar(double value, bool requires_grad = false);
  static Tensor gaussian(std::vector<std::size_t> shape, Rng& rng, double stddev,
                         bool requires_grad = false);
  static Tensor identity(std::size_t n);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<std::size_t>& shape() const;
  std::size_t rank() const { return shape().size(); }
  std::size_t dim(std::size_t axis) const;
  std::size_t numel() const;

  /// 2-D conveniences; throw unless rank() == 2.
  std::size_t rows() const { return dim(0); }
  std::size_t cols() const { return dim(1); }
  double& at(std::size_t r, std::size_t c);
  double at(std::size_t r, std::size_t c) const;

  std::span<double> values();
  std::span<const double> values() const;

  /// Value of a one-element tensor.
  double value() const;

  bool requires_grad() const;
  /// Enabling allocates a zero gradient buffer; disabling releases it.
  void set_requires_grad(bool on);
  std::span<const double> grad() const;
  void zero_grad();

  /// Deep copy; the copy does not track gradients.
  Tensor clone() const;

  bool same_storage(const Tensor& other) const { return impl_ == other.impl_; }

  /// Stable identity of the underlying storage (optimizer bookkeeping).
  const detail::TensorImpl* key() const { return impl_.get(); }

 private:
  friend struct OpAccess;
  explicit Tensor(std::shared_ptr<detail::TensorImpl> impl) : impl_(std::move(impl)) {}
  detail::TensorImpl& impl() const;

  std::shared_ptr<detail::TensorImpl> impl_;
};

/// Records executed operations so gradients can be pulled back in reverse
/// execution order, which is a reverse topological order of the data-flow
/// graph; every recorded node is visited exactly once.
///
/// Scope one tape per training step: operations executed while a tape is
/// alive on the current thread are recorded onto the innermost tape.
///
/// Contract: backward() may be called at most once per tape. A second call
/// throws ValidationError; rebuild the forward computation under a fresh tape
/// to differentiate again.
class GradTape {
 public:
  GradTape();
  ~GradTape();
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  /// Seeds d(loss)/d(loss) = 1 and accumulates gradients into every tracked
  /// tensor reachable from loss. Tracked tensors not reachable from loss keep
  /// their (zero, unless previously accumulated) gradients.
  void backward(const Tensor& loss);

  std::size_t recorded_ops() const { return nodes_.size(); }
  bool consumed() const { return consumed_; }

 private:
  friend struct OpAccess;
  std::vector<std::function<void()>> nodes_;
  bool consumed_ = false;
};

/// True while some GradTape is alive on this thread.
bool grad_recording();

/// Free-function form of GradTape::backward on the innermost active tape.
void backward(const Tensor& loss);

// ---------------------------------------------------------------------------
// Operations. All record gradient rules onto the active tape when any input
// tracks gradients.
// ---------------------------------------------------------------------------

/// [m x k] . [k x n] -> [m x n]. Gradients dA = dC.B^T, dB = A^T.dC.
Tensor matmul(const Tensor& a, const Tensor& b);

Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& x, double factor);

/// [R x C] + bias[C], broadcast over rows.
Tensor add_bias(const Tensor& x, const Tensor& bias);

/// x[batch*S x D] + pos[S x D], the position table tiled over the batch.
Tensor add_position(const Tensor& x, const Tensor& pos, std::size_t batch);

/// Elementwise max(0, x). Subgradient at exactly 0 is 0.
Tensor relu(const Tensor& x);

/// Sum of all entries, as a scalar tensor.
Tensor sum(const Tensor& x);

/// [R x D] -> [R/group x D], averaging each run of `group` consecutive rows.
Tensor mean_pool_rows(const Tensor& x, std::size_t group);

/// Per-row normalization over the last dimension with learned gain and bias.
/// Variance is the biased (1/N) estimate.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps);

Tensor softmax_rows(const Tensor& x);

/// Mean over the batch of -log softmax(logits)[label]; max-subtraction
/// stabilized. Labels must lie in [0, C).
Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels);

/// sqrt(sum of squares). Gradient is x/|x| for x != 0 and 0 at the origin.
Tensor frobenius_norm(const Tensor& x);

/// Fused multi-head self-attention. q, k, v are [batch*seq x dim] with dim
/// divisible by heads; rows of one sample's sequence are consecutive.
Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t batch, std::size_t seq, std::size_t heads);

/// Inverted dropout: keeps entries with probability 1-p, scaling by 1/(1-p).
/// p == 0 returns x unchanged.
Tensor dropout(const Tensor& x, double p, Rng& rng);

/// Max discrepancy between the analytic gradient of f at x and central
/// differences (f(x+h) - f(x-h)) / 2h, taken componentwise. Each component is
/// scored as |analytic - numeric| / max(|analytic|, |numeric|, 1). f must map
/// x to a scalar and must be deterministic.
double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h);

std::string shape_str(const std::vector<std::size_t>& shape);

}  // namespace gslf
