#pragma once

#include <cstdint>
#include <functional>
#include <initializer_list>
#include <memory>
#include <stdexcept>
#include <string>
#include <vector>

namespace hst {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Deterministic random stream. Uses splitmix64 plus a hand-rolled Box-Muller
/// so that results do not depend on the standard library's distribution
/// implementations.
class RandomStream {
 public:
  explicit RandomStream(uint64_t seed) : state_(seed) {}

  uint64_t next_u64();
  /// Uniform in [0, 1).
  double uniform();
  double uniform(double lo, double hi);
  /// Standard normal.
  double normal();
  /// Uniform integer in [lo, hi] inclusive.
  int uniform_int(int lo, int hi);
  /// Derive an independent stream (for per-scene / per-worker determinism).
  RandomStream fork(uint64_t stream_id) const;

 private:
  uint64_t state_;
  bool have_spare_ = false;
  double spare_ = 0.0;
};

struct TensorImpl;

/// Dense row-major double tensor with reverse-mode differentiation.
/// Copies are shallow; tensors are immutable after construction except for
/// explicit in-place optimizer updates through mutable_values().
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(std::vector<int> shape);
  static Tensor full(std::vector<int> shape, double value);
  static Tensor from_data(std::vector<int> shape, std::vector<double> data);
  static Tensor scalar(double value);
  static Tensor randn(std::vector<int> shape, RandomStream& rng, double stddev = 1.0);
  static Tensor rand_uniform(std::vector<int> shape, RandomStream& rng, double lo, double hi);

  bool defined() const { return impl_ != nullptr; }
  const std::vector<int>& shape() const;
  int rank() const;
  int dim(int axis) const;  // negative axes allowed
  int64_t size() const;

  const std::vector<double>& values() const;
  std::vector<double>& mutable_values();  // in-place update hook for optimizers
  double item() const;                    // scalar tensors only
  double at(std::initializer_list<int> idx) const;

  bool requires_grad() const;
  Tensor& set_requires_grad(bool enable);
  const std::vector<double>& grad() const;
  std::vector<double>& mutable_grad();
  void zero_grad();

  std::shared_ptr<TensorImpl> impl() const { return impl_; }

 private:
  explicit Tensor(std::shared_ptr<TensorImpl> impl) : impl_(std::move(impl)) {}
  std::shared_ptr<TensorImpl> impl_;
  friend Tensor make_op_result(std::vector<int>, std::vector<double>,
                               const std::vector<Tensor>&,
                               std::function<void(TensorImpl&)>, const char*);
};

/// Boolean mask, broadcastable (right-aligned, numpy rules) against tensor
/// shapes. true means "valid / attendable".
struct Mask {
  std::vector<int> shape;
  std::vector<uint8_t> data;

  Mask() = default;
  Mask(std::vector<int> s, std::vector<uint8_t> d);
  static Mask ones(std::vector<int> shape);
  bool empty() const { return data.empty(); }
  int64_t size() const { return static_cast<int64_t>(data.size()); }
};

/// Thread-local gradient recording switch, RAII-disabled for inference.
bool grad_enabled();
class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool saved_;
};

// Elementwise with broadcasting.
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor div(const Tensor& a, const Tensor& b);
Tensor arctan2(const Tensor& y, const Tensor& x);

// Elementwise unary.
Tensor neg(const Tensor& x);
Tensor exp(const Tensor& x);
Tensor log(const Tensor& x);
Tensor sqrt(const Tensor& x);
Tensor abs(const Tensor& x);
Tensor gelu(const Tensor& x);
Tensor relu(const Tensor& x);
Tensor softplus(const Tensor& x);
Tensor clamp_min(const Tensor& x, double lo);

// Scalar arithmetic.
Tensor add_scalar(const Tensor& x, double c);
Tensor mul_scalar(const Tensor& x, double c);

// Reductions.
Tensor sum(const Tensor& x);
Tensor sum(const Tensor& x, int axis, bool keepdim = false);
Tensor mean(const Tensor& x);
Tensor logsumexp(const Tensor& x, int axis, bool keepdim = false);

// Shape ops.
Tensor reshape(const Tensor& x, std::vector<int> new_shape);  // one -1 allowed
Tensor permute(const Tensor& x, std::vector<int> perm);
Tensor slice(const Tensor& x, int axis, int start, int length);
Tensor concat(const std::vector<Tensor>& xs, int axis);
Tensor gather_rows(const Tensor& x, const std::vector<int>& indices);

/// Batched matrix product: a [..., p, q] x b [..., q, r] -> [..., p, r] with
/// broadcastable leading dimensions.
Tensor matmul(const Tensor& a, const Tensor& b);

/// Numerically stable softmax along `axis`; rows sum to 1.
Tensor softmax(const Tensor& x, int axis);
Tensor log_softmax(const Tensor& x, int axis);

/// Softmax over the last axis where only mask-true entries participate.
/// Masked entries get exactly 0; rows with no valid entry are all-zero.
/// The mask broadcasts right-aligned against x's shape.
Tensor masked_softmax(const Tensor& x, const Mask& valid);

/// Normalization along `axis` to zero mean / unit variance (eps = 1e-5)
/// followed by the affine transform gain * x + bias. gain/bias have the
/// length of the normalized axis.
Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis = -1);

/// Inverted dropout; identity when rate <= 0.
Tensor dropout(const Tensor& x, double rate, RandomStream& rng);

/// Reverse-mode sweep from a scalar root. Accumulates into .grad of every
/// reachable tensor with requires_grad.
void backward(const Tensor& root);

inline Tensor operator+(const Tensor& a, const Tensor& b) { return add(a, b); }
inline Tensor operator-(const Tensor& a, const Tensor& b) { return sub(a, b); }
inline Tensor operator*(const Tensor& a, const Tensor& b) { return mul(a, b); }
inline Tensor operator/(const Tensor& a, const Tensor& b) { return div(a, b); }
inline Tensor operator*(const Tensor& a, double c) { return mul_scalar(a, c); }
inline Tensor operator*(double c, const Tensor& a) { return mul_scalar(a, c); }
inline Tensor operator+(const Tensor& a, double c) { return add_scalar(a, c); }
inline Tensor operator-(const Tensor& a, double c) { return add_scalar(a, -c); }
inline Tensor operator-(const Tensor& a) { return neg(a); }

std::string shape_str(const std::vector<int>& shape);

}  // namespace hst
