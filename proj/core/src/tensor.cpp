#include "hst/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <numeric>
#include <unordered_set>

namespace hst {

// ---------------------------------------------------------------------------
// RandomStream
// ---------------------------------------------------------------------------

uint64_t RandomStream::next_u64() {
  // splitmix64
  uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
  z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
  z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
  return z ^ (z >> 31);
}

double RandomStream::uniform() {
  return static_cast<double>(next_u64() >> 11) * 0x1.0p-53;
}

double RandomStream::uniform(double lo, double hi) {
  return lo + (hi - lo) * uniform();
}

double RandomStream::normal() {
  if (have_spare_) {
    have_spare_ = false;
    return spare_;
  }
  double u1 = 0.0;
  do {
    u1 = uniform();
  } while (u1 <= 0.0);
  const double u2 = uniform();
  const double mag = std::sqrt(-2.0 * std::log(u1));
  const double two_pi = 6.283185307179586476925286766559;
  spare_ = mag * std::sin(two_pi * u2);
  have_spare_ = true;
  return mag * std::cos(two_pi * u2);
}

int RandomStream::uniform_int(int lo, int hi) {
  if (hi < lo) throw Error("uniform_int: empty range");
  const uint64_t span = static_cast<uint64_t>(hi - lo) + 1;
  return lo + static_cast<int>(next_u64() % span);
}

RandomStream RandomStream::fork(uint64_t stream_id) const {
  RandomStream seeder(state_ ^ (0xA5A5A5A5A5A5A5A5ULL + stream_id * 0x9E3779B97F4A7C15ULL));
  return RandomStream(seeder.next_u64());
}

// ---------------------------------------------------------------------------
// TensorImpl
// ---------------------------------------------------------------------------

struct TensorImpl {
  std::vector<int> shape;
  std::vector<double> data;
  std::vector<double> grad;
  bool requires_grad = false;
  std::vector<std::shared_ptr<TensorImpl>> parents;
  std::function<void(TensorImpl&)> backward_fn;

  void ensure_grad() {
    if (grad.size() != data.size()) grad.assign(data.size(), 0.0);
  }
};

namespace {

thread_local bool g_grad_enabled = true;

int64_t shape_numel(const std::vector<int>& shape) {
  int64_t n = 1;
  for (int d : shape) {
    if (d <= 0) throw Error("tensor shape must have positive dimensions, got " + shape_str(shape));
    n *= d;
  }
  return n;
}

int norm_axis(int axis, int rank) {
  int a = axis < 0 ? axis + rank : axis;
  if (a < 0 || a >= rank) {
    throw Error("axis " + std::to_string(axis) + " out of range for rank " + std::to_string(rank));
  }
  return a;
}

void check_finite(const std::vector<double>& v, const char* op) {
  for (double x : v) {
    if (!std::isfinite(x)) {
      throw Error(std::string("operation '") + op + "' produced a non-finite value");
    }
  }
}

std::vector<int64_t> row_major_strides(const std::vector<int>& shape) {
  std::vector<int64_t> s(shape.size());
  int64_t acc = 1;
  for (int d = static_cast<int>(shape.size()) - 1; d >= 0; --d) {
    s[d] = acc;
    acc *= shape[d];
  }
  return s;
}

std::vector<int> broadcast_shape(const std::vector<int>& a, const std::vector<int>& b,
                                 const char* op) {
  const int ra = static_cast<int>(a.size()), rb = static_cast<int>(b.size());
  const int r = std::max(ra, rb);
  std::vector<int> out(r);
  for (int d = 0; d < r; ++d) {
    const int da = d < r - ra ? 1 : a[d - (r - ra)];
    const int db = d < r - rb ? 1 : b[d - (r - rb)];
    if (da != db && da != 1 && db != 1) {
      throw Error(std::string(op) + ": shapes " + shape_str(a) + " and " + shape_str(b) +
                  " are not broadcastable");
    }
    out[d] = std::max(da, db);
  }
  return out;
}

/// Per-out-axis element strides into an input broadcast against out_shape
/// (0 on broadcast axes). Input shape is right-aligned.
std::vector<int64_t> broadcast_strides(const std::vector<int>& in_shape,
                                       const std::vector<int>& out_shape) {
  const int ri = static_cast<int>(in_shape.size());
  const int ro = static_cast<int>(out_shape.size());
  const auto in_strides = row_major_strides(in_shape);
  std::vector<int64_t> s(ro, 0);
  for (int d = 0; d < ri; ++d) {
    const int od = d + (ro - ri);
    s[od] = (in_shape[d] == 1 && out_shape[od] != 1) ? 0 : in_strides[d];
  }
  return s;
}

/// Odometer over out_shape driving two broadcast input offsets.
template <typename F>
void for_each_bcast2(const std::vector<int>& out_shape, const std::vector<int64_t>& sa,
                     const std::vector<int64_t>& sb, F&& f) {
  const int r = static_cast<int>(out_shape.size());
  const int64_t n = shape_numel(out_shape);
  std::vector<int> idx(r, 0);
  int64_t oa = 0, ob = 0;
  for (int64_t i = 0; i < n; ++i) {
    f(i, oa, ob);
    for (int d = r - 1; d >= 0; --d) {
      idx[d]++;
      oa += sa[d];
      ob += sb[d];
      if (idx[d] < out_shape[d]) break;
      idx[d] = 0;
      oa -= sa[d] * out_shape[d];
      ob -= sb[d] * out_shape[d];
    }
  }
}

}  // namespace

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ", ";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

bool grad_enabled() { return g_grad_enabled; }

NoGradGuard::NoGradGuard() : saved_(g_grad_enabled) { g_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { g_grad_enabled = saved_; }

// ---------------------------------------------------------------------------
// Tensor basics
// ---------------------------------------------------------------------------

Tensor make_op_result(std::vector<int> shape, std::vector<double> data,
                      const std::vector<Tensor>& parents,
                      std::function<void(TensorImpl&)> backward_fn, const char* op) {
  check_finite(data, op);
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  if (g_grad_enabled) {
    bool needs = false;
    for (const auto& p : parents) {
      if (p.defined() && p.requires_grad()) needs = true;
    }
    if (needs) {
      impl->requires_grad = true;
      for (const auto& p : parents) impl->parents.push_back(p.impl());
      impl->backward_fn = std::move(backward_fn);
    }
  }
  return Tensor(std::move(impl));
}

Tensor Tensor::zeros(std::vector<int> shape) {
  const int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(std::vector<int> shape, double value) {
  const int64_t n = shape_numel(shape);
  return from_data(std::move(shape), std::vector<double>(n, value));
}

Tensor Tensor::from_data(std::vector<int> shape, std::vector<double> data) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw Error("from_data: shape " + shape_str(shape) + " does not match data length " +
                std::to_string(data.size()));
  }
  check_finite(data, "from_data");
  auto impl = std::make_shared<TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(data);
  return Tensor(std::move(impl));
}

Tensor Tensor::scalar(double value) { return from_data({1}, {value}); }

Tensor Tensor::randn(std::vector<int> shape, RandomStream& rng, double stddev) {
  const int64_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& x : d) x = rng.normal() * stddev;
  return from_data(std::move(shape), std::move(d));
}

Tensor Tensor::rand_uniform(std::vector<int> shape, RandomStream& rng, double lo, double hi) {
  const int64_t n = shape_numel(shape);
  std::vector<double> d(n);
  for (auto& x : d) x = rng.uniform(lo, hi);
  return from_data(std::move(shape), std::move(d));
}

static TensorImpl& deref(const std::shared_ptr<TensorImpl>& p) {
  if (!p) throw Error("operation on an undefined tensor");
  return *p;
}

const std::vector<int>& Tensor::shape() const { return deref(impl_).shape; }
int Tensor::rank() const { return static_cast<int>(shape().size()); }

int Tensor::dim(int axis) const {
  const auto& s = shape();
  return s[norm_axis(axis, static_cast<int>(s.size()))];
}

int64_t Tensor::size() const { return static_cast<int64_t>(deref(impl_).data.size()); }
const std::vector<double>& Tensor::values() const { return deref(impl_).data; }
std::vector<double>& Tensor::mutable_values() { return deref(impl_).data; }

double Tensor::item() const {
  const auto& d = values();
  if (d.size() != 1) throw Error("item() on tensor of shape " + shape_str(shape()));
  return d[0];
}

double Tensor::at(std::initializer_list<int> idx) const {
  const auto& s = shape();
  if (idx.size() != s.size()) {
    throw Error("at(): index rank " + std::to_string(idx.size()) + " vs tensor rank " +
                std::to_string(s.size()));
  }
  const auto strides = row_major_strides(s);
  int64_t off = 0;
  int d = 0;
  for (int i : idx) {
    if (i < 0 || i >= s[d]) throw Error("at(): index out of bounds");
    off += strides[d] * i;
    ++d;
  }
  return values()[off];
}

bool Tensor::requires_grad() const { return deref(impl_).requires_grad; }

Tensor& Tensor::set_requires_grad(bool enable) {
  deref(impl_).requires_grad = enable;
  if (enable) deref(impl_).ensure_grad();
  return *this;
}

const std::vector<double>& Tensor::grad() const {
  auto& impl = deref(impl_);
  const_cast<TensorImpl&>(impl).ensure_grad();
  return impl.grad;
}

std::vector<double>& Tensor::mutable_grad() {
  auto& impl = deref(impl_);
  impl.ensure_grad();
  return impl.grad;
}

void Tensor::zero_grad() {
  auto& impl = deref(impl_);
  impl.ensure_grad();
  std::fill(impl.grad.begin(), impl.grad.end(), 0.0);
}

Mask::Mask(std::vector<int> s, std::vector<uint8_t> d) : shape(std::move(s)), data(std::move(d)) {
  if (shape_numel(shape) != static_cast<int64_t>(data.size())) {
    throw Error("mask shape " + shape_str(shape) + " does not match data length");
  }
}

Mask Mask::ones(std::vector<int> shape) {
  const int64_t n = shape_numel(shape);
  return Mask(std::move(shape), std::vector<uint8_t>(n, 1));
}

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <typename FwdFn, typename DaFn, typename DbFn>
static Tensor binary_op(const char* op, const Tensor& a, const Tensor& b, FwdFn fwd, DaFn da,
                        DbFn db) {
  const auto out_shape = broadcast_shape(a.shape(), b.shape(), op);
  const auto sa = broadcast_strides(a.shape(), out_shape);
  const auto sb = broadcast_strides(b.shape(), out_shape);
  const int64_t n = shape_numel(out_shape);
  std::vector<double> out(n);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (a.shape() == b.shape()) {
    for (int64_t i = 0; i < n; ++i) out[i] = fwd(av[i], bv[i]);
  } else {
    for_each_bcast2(out_shape, sa, sb,
                    [&](int64_t i, int64_t oa, int64_t ob) { out[i] = fwd(av[oa], bv[ob]); });
  }
  auto ai = a.impl();
  auto bi = b.impl();
  auto backward = [ai, bi, sa, sb, out_shape, da, db](TensorImpl& self) {
    const bool ga = ai->requires_grad, gb = bi->requires_grad;
    if (ga) ai->ensure_grad();
    if (gb) bi->ensure_grad();
    for_each_bcast2(out_shape, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
      const double gy = self.grad[i];
      if (ga) ai->grad[oa] += gy * da(ai->data[oa], bi->data[ob], self.data[i]);
      if (gb) bi->grad[ob] += gy * db(ai->data[oa], bi->data[ob], self.data[i]);
    });
  };
  return make_op_result(out_shape, std::move(out), {a, b}, std::move(backward), op);
}

template <typename FwdFn, typename DFn>
static Tensor unary_op(const char* op, const Tensor& x, FwdFn fwd, DFn dfn) {
  const auto& xv = x.values();
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) out[i] = fwd(xv[i]);
  auto xi = x.impl();
  auto backward = [xi, dfn](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < self.data.size(); ++i) {
      xi->grad[i] += self.grad[i] * dfn(xi->data[i], self.data[i]);
    }
  };
  return make_op_result(x.shape(), std::move(out), {x}, std::move(backward), op);
}

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double out) { return -out / y; });
}

Tensor arctan2(const Tensor& y, const Tensor& x) {
  return binary_op(
      "arctan2", y, x, [](double yy, double xx) { return std::atan2(yy, xx); },
      [](double yy, double xx, double) { return xx / (xx * xx + yy * yy); },
      [](double yy, double xx, double) { return -yy / (xx * xx + yy * yy); });
}

Tensor neg(const Tensor& x) {
  return unary_op(
      "neg", x, [](double v) { return -v; }, [](double, double) { return -1.0; });
}

Tensor exp(const Tensor& x) {
  return unary_op(
      "exp", x, [](double v) { return std::exp(v); }, [](double, double out) { return out; });
}

Tensor log(const Tensor& x) {
  return unary_op(
      "log", x, [](double v) { return std::log(v); }, [](double v, double) { return 1.0 / v; });
}

Tensor sqrt(const Tensor& x) {
  return unary_op(
      "sqrt", x, [](double v) { return std::sqrt(v); },
      [](double, double out) { return 0.5 / out; });
}

Tensor abs(const Tensor& x) {
  return unary_op(
      "abs", x, [](double v) { return std::abs(v); },
      [](double v, double) { return v >= 0.0 ? 1.0 : -1.0; });
}

Tensor gelu(const Tensor& x) {
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  constexpr double inv_sqrt2pi = 0.39894228040143267794;
  return unary_op(
      "gelu", x,
      [=](double v) { return 0.5 * v * (1.0 + std::erf(v * inv_sqrt2)); },
      [=](double v, double) {
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        return cdf + v * inv_sqrt2pi * std::exp(-0.5 * v * v);
      });
}

Tensor relu(const Tensor& x) {
  return unary_op(
      "relu", x, [](double v) { return v > 0.0 ? v : 0.0; },
      [](double v, double) { return v > 0.0 ? 1.0 : 0.0; });
}

Tensor softplus(const Tensor& x) {
  return unary_op(
      "softplus", x,
      [](double v) { return v > 30.0 ? v : std::log1p(std::exp(std::min(v, 30.0))); },
      [](double v, double) { return 1.0 / (1.0 + std::exp(-v)); });
}

Tensor clamp_min(const Tensor& x, double lo) {
  return unary_op(
      "clamp_min", x, [=](double v) { return v < lo ? lo : v; },
      [=](double v, double) { return v >= lo ? 1.0 : 0.0; });
}

Tensor add_scalar(const Tensor& x, double c) {
  return unary_op(
      "add_scalar", x, [=](double v) { return v + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& x, double c) {
  return unary_op(
      "mul_scalar", x, [=](double v) { return v * c; }, [=](double, double) { return c; });
}

// ---------------------------------------------------------------------------
// Reductions
// ---------------------------------------------------------------------------

Tensor sum(const Tensor& x) {
  const auto& xv = x.values();
  double s = 0.0;
  for (double v : xv) s += v;
  auto xi = x.impl();
  auto backward = [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    const double g = self.grad[0];
    for (auto& gx : xi->grad) gx += g;
  };
  return make_op_result({1}, {s}, {x}, std::move(backward), "sum");
}

Tensor mean(const Tensor& x) {
  const double inv = 1.0 / static_cast<double>(x.size());
  return mul_scalar(sum(x), inv);
}

namespace {

struct AxisSplit {
  int64_t outer, len, inner;
};

AxisSplit axis_split(const std::vector<int>& shape, int axis) {
  AxisSplit s{1, shape[axis], 1};
  for (int d = 0; d < axis; ++d) s.outer *= shape[d];
  for (int d = axis + 1; d < static_cast<int>(shape.size()); ++d) s.inner *= shape[d];
  return s;
}

std::vector<int> reduced_shape(const std::vector<int>& shape, int axis, bool keepdim) {
  std::vector<int> out = shape;
  if (keepdim) {
    out[axis] = 1;
  } else {
    out.erase(out.begin() + axis);
    if (out.empty()) out.push_back(1);
  }
  return out;
}

}  // namespace

Tensor sum(const Tensor& x, int axis, bool keepdim) {
  const int a = norm_axis(axis, x.rank());
  const auto sp = axis_split(x.shape(), a);
  auto out_shape = reduced_shape(x.shape(), a, keepdim);
  std::vector<double> out(sp.outer * sp.inner, 0.0);
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t k = 0; k < sp.len; ++k) {
      const double* src = &xv[(o * sp.len + k) * sp.inner];
      double* dst = &out[o * sp.inner];
      for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
    }
  }
  auto xi = x.impl();
  auto backward = [xi, sp](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t k = 0; k < sp.len; ++k) {
        double* dst = &xi->grad[(o * sp.len + k) * sp.inner];
        const double* src = &self.grad[o * sp.inner];
        for (int64_t i = 0; i < sp.inner; ++i) dst[i] += src[i];
      }
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), {x}, std::move(backward), "sum_axis");
}

Tensor logsumexp(const Tensor& x, int axis, bool keepdim) {
  const int a = norm_axis(axis, x.rank());
  const auto sp = axis_split(x.shape(), a);
  auto out_shape = reduced_shape(x.shape(), a, keepdim);
  std::vector<double> out(sp.outer * sp.inner);
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      double m = -HUGE_VAL;
      for (int64_t k = 0; k < sp.len; ++k) m = std::max(m, xv[(o * sp.len + k) * sp.inner + i]);
      double s = 0.0;
      for (int64_t k = 0; k < sp.len; ++k) s += std::exp(xv[(o * sp.len + k) * sp.inner + i] - m);
      out[o * sp.inner + i] = m + std::log(s);
    }
  }
  auto xi = x.impl();
  auto backward = [xi, sp](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const double y = self.data[o * sp.inner + i];
        const double gy = self.grad[o * sp.inner + i];
        for (int64_t k = 0; k < sp.len; ++k) {
          const int64_t off = (o * sp.len + k) * sp.inner + i;
          xi->grad[off] += gy * std::exp(xi->data[off] - y);
        }
      }
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), {x}, std::move(backward),
                        "logsumexp");
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

Tensor reshape(const Tensor& x, std::vector<int> new_shape) {
  int64_t known = 1;
  int infer = -1;
  for (int d = 0; d < static_cast<int>(new_shape.size()); ++d) {
    if (new_shape[d] == -1) {
      if (infer >= 0) throw Error("reshape: more than one -1 dimension");
      infer = d;
    } else {
      known *= new_shape[d];
    }
  }
  if (infer >= 0) {
    if (known == 0 || x.size() % known != 0) {
      throw Error("reshape: cannot infer dimension for " + shape_str(x.shape()));
    }
    new_shape[infer] = static_cast<int>(x.size() / known);
  }
  if (shape_numel(new_shape) != x.size()) {
    throw Error("reshape: size mismatch between " + shape_str(x.shape()) + " and " +
                shape_str(new_shape));
  }
  auto xi = x.impl();
  auto backward = [xi](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i];
  };
  return make_op_result(std::move(new_shape), x.values(), {x}, std::move(backward), "reshape");
}

Tensor permute(const Tensor& x, std::vector<int> perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw Error("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  std::vector<int> out_shape(r);
  for (int d = 0; d < r; ++d) {
    const int p = norm_axis(perm[d], r);
    if (seen[p]) throw Error("permute: duplicate axis");
    seen[p] = true;
    perm[d] = p;
    out_shape[d] = x.shape()[p];
  }
  const auto in_strides = row_major_strides(x.shape());
  std::vector<int64_t> gather(r);
  for (int d = 0; d < r; ++d) gather[d] = in_strides[perm[d]];
  const int64_t n = x.size();
  std::vector<double> out(n);
  const auto& xv = x.values();
  {
    std::vector<int> idx(r, 0);
    int64_t src = 0;
    for (int64_t i = 0; i < n; ++i) {
      out[i] = xv[src];
      for (int d = r - 1; d >= 0; --d) {
        idx[d]++;
        src += gather[d];
        if (idx[d] < out_shape[d]) break;
        idx[d] = 0;
        src -= gather[d] * out_shape[d];
      }
    }
  }
  auto xi = x.impl();
  auto backward = [xi, gather, out_shape, r](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    std::vector<int> idx(r, 0);
    int64_t src = 0;
    const int64_t n2 = static_cast<int64_t>(self.grad.size());
    for (int64_t i = 0; i < n2; ++i) {
      xi->grad[src] += self.grad[i];
      for (int d = r - 1; d >= 0; --d) {
        idx[d]++;
        src += gather[d];
        if (idx[d] < out_shape[d]) break;
        idx[d] = 0;
        src -= gather[d] * out_shape[d];
      }
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), {x}, std::move(backward), "permute");
}

Tensor slice(const Tensor& x, int axis, int start, int length) {
  const int a = norm_axis(axis, x.rank());
  const auto& shape = x.shape();
  if (start < 0 || length <= 0 || start + length > shape[a]) {
    throw Error("slice: range [" + std::to_string(start) + ", " + std::to_string(start + length) +
                ") out of bounds for axis length " + std::to_string(shape[a]));
  }
  const auto sp = axis_split(shape, a);
  std::vector<int> out_shape = shape;
  out_shape[a] = length;
  std::vector<double> out(sp.outer * length * sp.inner);
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    std::memcpy(&out[o * length * sp.inner], &xv[(o * sp.len + start) * sp.inner],
                sizeof(double) * length * sp.inner);
  }
  auto xi = x.impl();
  auto backward = [xi, sp, start, length](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o) {
      const double* src = &self.grad[o * length * sp.inner];
      double* dst = &xi->grad[(o * sp.len + start) * sp.inner];
      for (int64_t i = 0; i < length * sp.inner; ++i) dst[i] += src[i];
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), {x}, std::move(backward), "slice");
}

Tensor concat(const std::vector<Tensor>& xs, int axis) {
  if (xs.empty()) throw Error("concat: no inputs");
  const int r = xs[0].rank();
  const int a = norm_axis(axis, r);
  int total = 0;
  for (const auto& t : xs) {
    if (t.rank() != r) throw Error("concat: rank mismatch");
    for (int d = 0; d < r; ++d) {
      if (d != a && t.shape()[d] != xs[0].shape()[d]) {
        throw Error("concat: shape mismatch between " + shape_str(xs[0].shape()) + " and " +
                    shape_str(t.shape()));
      }
    }
    total += t.shape()[a];
  }
  std::vector<int> out_shape = xs[0].shape();
  out_shape[a] = total;
  const auto sp = axis_split(out_shape, a);
  std::vector<double> out(shape_numel(out_shape));
  int64_t off = 0;
  for (const auto& t : xs) {
    const int64_t len = t.shape()[a];
    const auto& tv = t.values();
    for (int64_t o = 0; o < sp.outer; ++o) {
      std::memcpy(&out[(o * sp.len + off) * sp.inner], &tv[o * len * sp.inner],
                  sizeof(double) * len * sp.inner);
    }
    off += len;
  }
  std::vector<std::shared_ptr<TensorImpl>> impls;
  std::vector<int64_t> lens;
  for (const auto& t : xs) {
    impls.push_back(t.impl());
    lens.push_back(t.shape()[a]);
  }
  auto backward = [impls, lens, sp](TensorImpl& self) {
    int64_t off2 = 0;
    for (size_t j = 0; j < impls.size(); ++j) {
      const int64_t len = lens[j];
      if (impls[j]->requires_grad) {
        impls[j]->ensure_grad();
        for (int64_t o = 0; o < sp.outer; ++o) {
          const double* src = &self.grad[(o * sp.len + off2) * sp.inner];
          double* dst = &impls[j]->grad[o * len * sp.inner];
          for (int64_t i = 0; i < len * sp.inner; ++i) dst[i] += src[i];
        }
      }
      off2 += len;
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), xs, std::move(backward), "concat");
}

Tensor gather_rows(const Tensor& x, const std::vector<int>& indices) {
  if (x.rank() < 1) throw Error("gather_rows: rank-0 input");
  const int64_t rows = x.shape()[0];
  const int64_t rest = x.size() / rows;
  for (int i : indices) {
    if (i < 0 || i >= rows) throw Error("gather_rows: index out of bounds");
  }
  std::vector<int> out_shape = x.shape();
  out_shape[0] = static_cast<int>(indices.size());
  std::vector<double> out(indices.size() * rest);
  const auto& xv = x.values();
  for (size_t j = 0; j < indices.size(); ++j) {
    std::memcpy(&out[j * rest], &xv[indices[j] * rest], sizeof(double) * rest);
  }
  auto xi = x.impl();
  auto backward = [xi, indices, rest](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t j = 0; j < indices.size(); ++j) {
      const double* src = &self.grad[j * rest];
      double* dst = &xi->grad[indices[j] * rest];
      for (int64_t i = 0; i < rest; ++i) dst[i] += src[i];
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), {x}, std::move(backward),
                        "gather_rows");
}

// ---------------------------------------------------------------------------
// Matmul
// ---------------------------------------------------------------------------

namespace {

// C(p x r) += A(p x q) B(q x r)
void mm_nn(const double* A, const double* B, double* C, int64_t p, int64_t q, int64_t r) {
  for (int64_t i = 0; i < p; ++i) {
    double* c = C + i * r;
    const double* a = A + i * q;
    for (int64_t k = 0; k < q; ++k) {
      const double av = a[k];
      const double* b = B + k * r;
      for (int64_t j = 0; j < r; ++j) c[j] += av * b[j];
    }
  }
}

// C(p x r) += A(p x q) B(r x q)^T
void mm_nt(const double* A, const double* B, double* C, int64_t p, int64_t q, int64_t r) {
  for (int64_t i = 0; i < p; ++i) {
    const double* a = A + i * q;
    double* c = C + i * r;
    for (int64_t j = 0; j < r; ++j) {
      const double* b = B + j * q;
      double s = 0.0;
      for (int64_t k = 0; k < q; ++k) s += a[k] * b[k];
      c[j] += s;
    }
  }
}

// C(p x r) += A(q x p)^T B(q x r)
void mm_tn(const double* A, const double* B, double* C, int64_t p, int64_t q, int64_t r) {
  for (int64_t k = 0; k < q; ++k) {
    const double* a = A + k * p;
    const double* b = B + k * r;
    for (int64_t i = 0; i < p; ++i) {
      const double av = a[i];
      double* c = C + i * r;
      for (int64_t j = 0; j < r; ++j) c[j] += av * b[j];
    }
  }
}

}  // namespace

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() < 2 || b.rank() < 2) {
    throw Error("matmul: inputs must have rank >= 2, got " + shape_str(a.shape()) + " and " +
                shape_str(b.shape()));
  }
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const int64_t p = as[as.size() - 2], q = as[as.size() - 1];
  const int64_t q2 = bs[bs.size() - 2], r = bs[bs.size() - 1];
  if (q != q2) {
    throw Error("matmul: inner dimensions of " + shape_str(as) + " and " + shape_str(bs) +
                " do not match");
  }
  std::vector<int> a_batch(as.begin(), as.end() - 2), b_batch(bs.begin(), bs.end() - 2);
  const auto batch = broadcast_shape(a_batch, b_batch, "matmul");
  auto sa = broadcast_strides(a_batch, batch);
  auto sb = broadcast_strides(b_batch, batch);
  // convert to per-batch matrix strides
  for (auto& s : sa) s *= p * q;
  for (auto& s : sb) s *= q * r;
  std::vector<int> out_shape = batch;
  out_shape.push_back(static_cast<int>(p));
  out_shape.push_back(static_cast<int>(r));
  const int64_t nbatch = shape_numel(batch.empty() ? std::vector<int>{1} : batch);
  std::vector<double> out(nbatch * p * r, 0.0);
  const auto& av = a.values();
  const auto& bv = b.values();
  if (batch.empty()) {
    mm_nn(av.data(), bv.data(), out.data(), p, q, r);
  } else {
    for_each_bcast2(batch, sa, sb, [&](int64_t i, int64_t oa, int64_t ob) {
      mm_nn(&av[oa], &bv[ob], &out[i * p * r], p, q, r);
    });
  }
  auto ai = a.impl();
  auto bi = b.impl();
  auto backward = [ai, bi, sa, sb, batch, p, q, r](TensorImpl& self) {
    const bool ga = ai->requires_grad, gb = bi->requires_grad;
    if (ga) ai->ensure_grad();
    if (gb) bi->ensure_grad();
    auto body = [&](int64_t i, int64_t oa, int64_t ob) {
      const double* gy = &self.grad[i * p * r];
      if (ga) mm_nt(gy, &bi->data[ob], &ai->grad[oa], p, r, q);
      if (gb) mm_tn(&ai->data[oa], gy, &bi->grad[ob], q, p, r);
    };
    if (batch.empty()) {
      body(0, 0, 0);
    } else {
      for_each_bcast2(batch, sa, sb, body);
    }
  };
  return make_op_result(std::move(out_shape), std::move(out), {a, b}, std::move(backward),
                        "matmul");
}

// ---------------------------------------------------------------------------
// Softmax family
// ---------------------------------------------------------------------------

Tensor softmax(const Tensor& x, int axis) {
  const int a = norm_axis(axis, x.rank());
  const auto sp = axis_split(x.shape(), a);
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      double m = -HUGE_VAL;
      for (int64_t k = 0; k < sp.len; ++k) m = std::max(m, xv[(o * sp.len + k) * sp.inner + i]);
      double s = 0.0;
      for (int64_t k = 0; k < sp.len; ++k) {
        const int64_t off = (o * sp.len + k) * sp.inner + i;
        out[off] = std::exp(xv[off] - m);
        s += out[off];
      }
      const double inv = 1.0 / s;
      for (int64_t k = 0; k < sp.len; ++k) out[(o * sp.len + k) * sp.inner + i] *= inv;
    }
  }
  auto xi = x.impl();
  auto backward = [xi, sp](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        double dot = 0.0;
        for (int64_t k = 0; k < sp.len; ++k) {
          const int64_t off = (o * sp.len + k) * sp.inner + i;
          dot += self.data[off] * self.grad[off];
        }
        for (int64_t k = 0; k < sp.len; ++k) {
          const int64_t off = (o * sp.len + k) * sp.inner + i;
          xi->grad[off] += self.data[off] * (self.grad[off] - dot);
        }
      }
    }
  };
  return make_op_result(x.shape(), std::move(out), {x}, std::move(backward), "softmax");
}

Tensor log_softmax(const Tensor& x, int axis) {
  const int a = norm_axis(axis, x.rank());
  const auto sp = axis_split(x.shape(), a);
  std::vector<double> out(x.size());
  const auto& xv = x.values();
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      double m = -HUGE_VAL;
      for (int64_t k = 0; k < sp.len; ++k) m = std::max(m, xv[(o * sp.len + k) * sp.inner + i]);
      double s = 0.0;
      for (int64_t k = 0; k < sp.len; ++k) s += std::exp(xv[(o * sp.len + k) * sp.inner + i] - m);
      const double lse = m + std::log(s);
      for (int64_t k = 0; k < sp.len; ++k) {
        const int64_t off = (o * sp.len + k) * sp.inner + i;
        out[off] = xv[off] - lse;
      }
    }
  }
  auto xi = x.impl();
  auto backward = [xi, sp](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        double gsum = 0.0;
        for (int64_t k = 0; k < sp.len; ++k) {
          gsum += self.grad[(o * sp.len + k) * sp.inner + i];
        }
        for (int64_t k = 0; k < sp.len; ++k) {
          const int64_t off = (o * sp.len + k) * sp.inner + i;
          xi->grad[off] += self.grad[off] - std::exp(self.data[off]) * gsum;
        }
      }
    }
  };
  return make_op_result(x.shape(), std::move(out), {x}, std::move(backward), "log_softmax");
}

Tensor masked_softmax(const Tensor& x, const Mask& valid) {
  const auto& shape = x.shape();
  const int r = x.rank();
  if (static_cast<int>(valid.shape.size()) > r) {
    throw Error("masked_softmax: mask rank exceeds tensor rank");
  }
  // validate broadcastability (throws with both shapes on mismatch)
  broadcast_shape(shape, valid.shape, "masked_softmax");
  const auto ms = broadcast_strides(valid.shape, shape);
  const int64_t L = shape[r - 1];
  const int64_t rows = x.size() / L;
  // mask offset for each element: iterate rows x L via odometer
  std::vector<double> out(x.size(), 0.0);
  std::vector<uint8_t> row_mask(x.size());  // per-element validity, materialized
  {
    const auto& mv = valid.data;
    std::vector<int> idx(r, 0);
    int64_t mo = 0;
    const int64_t n = x.size();
    for (int64_t i = 0; i < n; ++i) {
      row_mask[i] = mv[mo];
      for (int d = r - 1; d >= 0; --d) {
        idx[d]++;
        mo += ms[d];
        if (idx[d] < shape[d]) break;
        idx[d] = 0;
        mo -= ms[d] * shape[d];
      }
    }
  }
  const auto& xv = x.values();
  for (int64_t row = 0; row < rows; ++row) {
    const int64_t base = row * L;
    double m = -HUGE_VAL;
    for (int64_t k = 0; k < L; ++k) {
      if (row_mask[base + k]) m = std::max(m, xv[base + k]);
    }
    if (m == -HUGE_VAL) continue;  // no valid key: output row stays zero
    double s = 0.0;
    for (int64_t k = 0; k < L; ++k) {
      if (row_mask[base + k]) {
        out[base + k] = std::exp(xv[base + k] - m);
        s += out[base + k];
      }
    }
    const double inv = 1.0 / s;
    for (int64_t k = 0; k < L; ++k) {
      if (row_mask[base + k]) out[base + k] *= inv;
    }
  }
  auto xi = x.impl();
  auto backward = [xi, row_mask, rows, L](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (int64_t row = 0; row < rows; ++row) {
      const int64_t base = row * L;
      double dot = 0.0;
      for (int64_t k = 0; k < L; ++k) {
        if (row_mask[base + k]) dot += self.data[base + k] * self.grad[base + k];
      }
      for (int64_t k = 0; k < L; ++k) {
        if (row_mask[base + k]) {
          xi->grad[base + k] += self.data[base + k] * (self.grad[base + k] - dot);
        }
      }
    }
  };
  return make_op_result(shape, std::move(out), {x}, std::move(backward), "masked_softmax");
}

// ---------------------------------------------------------------------------
// Layer norm
// ---------------------------------------------------------------------------

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, int axis) {
  constexpr double eps = 1e-5;
  const int a = norm_axis(axis, x.rank());
  const auto sp = axis_split(x.shape(), a);
  if (gain.size() != sp.len || bias.size() != sp.len) {
    throw Error("layer_norm: gain/bias length must equal normalized axis length " +
                std::to_string(sp.len));
  }
  const auto& xv = x.values();
  const auto& gv = gain.values();
  const auto& bv = bias.values();
  std::vector<double> out(x.size());
  std::vector<double> xhat(x.size());
  std::vector<double> inv_sigma(sp.outer * sp.inner);
  for (int64_t o = 0; o < sp.outer; ++o) {
    for (int64_t i = 0; i < sp.inner; ++i) {
      double mu = 0.0;
      for (int64_t k = 0; k < sp.len; ++k) mu += xv[(o * sp.len + k) * sp.inner + i];
      mu /= static_cast<double>(sp.len);
      double var = 0.0;
      for (int64_t k = 0; k < sp.len; ++k) {
        const double d = xv[(o * sp.len + k) * sp.inner + i] - mu;
        var += d * d;
      }
      var /= static_cast<double>(sp.len);
      const double is = 1.0 / std::sqrt(var + eps);
      inv_sigma[o * sp.inner + i] = is;
      for (int64_t k = 0; k < sp.len; ++k) {
        const int64_t off = (o * sp.len + k) * sp.inner + i;
        xhat[off] = (xv[off] - mu) * is;
        out[off] = xhat[off] * gv[k] + bv[k];
      }
    }
  }
  auto xi = x.impl();
  auto gi = gain.impl();
  auto bi = bias.impl();
  auto backward = [xi, gi, bi, sp, xhat, inv_sigma](TensorImpl& self) {
    const bool gx = xi->requires_grad, gg = gi->requires_grad, gb = bi->requires_grad;
    if (gx) xi->ensure_grad();
    if (gg) gi->ensure_grad();
    if (gb) bi->ensure_grad();
    const double n = static_cast<double>(sp.len);
    for (int64_t o = 0; o < sp.outer; ++o) {
      for (int64_t i = 0; i < sp.inner; ++i) {
        const double is = inv_sigma[o * sp.inner + i];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (int64_t k = 0; k < sp.len; ++k) {
          const int64_t off = (o * sp.len + k) * sp.inner + i;
          const double gy = self.grad[off];
          const double dxhat = gy * gi->data[k];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat[off];
          if (gg) gi->grad[k] += gy * xhat[off];
          if (gb) bi->grad[k] += gy;
        }
        if (gx) {
          for (int64_t k = 0; k < sp.len; ++k) {
            const int64_t off = (o * sp.len + k) * sp.inner + i;
            const double dxhat = self.grad[off] * gi->data[k];
            xi->grad[off] +=
                is * (dxhat - (sum_dxhat + xhat[off] * sum_dxhat_xhat) / n);
          }
        }
      }
    }
  };
  return make_op_result(x.shape(), std::move(out), {x, gain, bias}, std::move(backward),
                        "layer_norm");
}

Tensor dropout(const Tensor& x, double rate, RandomStream& rng) {
  if (rate <= 0.0) return x;
  if (rate >= 1.0) throw Error("dropout: rate must be < 1");
  const double scale = 1.0 / (1.0 - rate);
  const auto& xv = x.values();
  std::vector<double> keep(xv.size());
  std::vector<double> out(xv.size());
  for (size_t i = 0; i < xv.size(); ++i) {
    keep[i] = rng.uniform() >= rate ? scale : 0.0;
    out[i] = xv[i] * keep[i];
  }
  auto xi = x.impl();
  auto backward = [xi, keep](TensorImpl& self) {
    if (!xi->requires_grad) return;
    xi->ensure_grad();
    for (size_t i = 0; i < self.grad.size(); ++i) xi->grad[i] += self.grad[i] * keep[i];
  };
  return make_op_result(x.shape(), std::move(out), {x}, std::move(backward), "dropout");
}

// ---------------------------------------------------------------------------
// Backward sweep
// ---------------------------------------------------------------------------

void backward(const Tensor& root) {
  if (!root.defined()) throw Error("backward: undefined tensor");
  if (root.size() != 1) {
    throw Error("backward: root must be a scalar, got shape " + shape_str(root.shape()));
  }
  if (!root.requires_grad()) {
    throw Error("backward: root does not require grad (is grad recording enabled?)");
  }
  // iterative post-order DFS over the parent DAG
  std::vector<TensorImpl*> topo;
  std::unordered_set<TensorImpl*> visited;
  std::vector<std::pair<TensorImpl*, size_t>> stack;
  stack.emplace_back(root.impl().get(), 0);
  visited.insert(root.impl().get());
  while (!stack.empty()) {
    auto& [node, child] = stack.back();
    if (child < node->parents.size()) {
      TensorImpl* next = node->parents[child++].get();
      if (next->requires_grad && !visited.count(next)) {
        visited.insert(next);
        stack.emplace_back(next, 0);
      }
    } else {
      topo.push_back(node);
      stack.pop_back();
    }
  }
  auto* root_impl = root.impl().get();
  root_impl->ensure_grad();
  root_impl->grad[0] += 1.0;
  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    if ((*it)->backward_fn) (*it)->backward_fn(**it);
  }
}

}  // namespace hst
