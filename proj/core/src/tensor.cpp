#include "gslf/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <limits>
#include <sstream>

#include "gslf/rng.hpp"

namespace gslf {

namespace {

thread_local std::vector<GradTape*> g_tape_stack;

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (std::size_t d : shape) {
    n *= d;
  }
  return n;
}

void check_shape(const std::vector<std::size_t>& shape) {
  for (std::size_t d : shape) {
    if (d == 0) {
      throw ValidationError("tensor dimensions must be positive, got " + shape_str(shape));
    }
  }
}

void ensure_grad(detail::TensorImpl& impl) {
  if (impl.grad.size() != impl.data.size()) {
    impl.grad.assign(impl.data.size(), 0.0);
  }
}

// c (m x n) += a (m x k) . b (k x n)
void matmul_nn(const double* a, const double* b, double* c, std::size_t m,
               std::size_t k, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * k;
    double* crow = c + i * n;
    for (std::size_t p = 0; p < k; ++p) {
      const double aip = arow[p];
      const double* brow = b + p * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += aip * brow[j];
      }
    }
  }
}

// c (m x n) += a (m x inner) . b (n x inner)^T
void matmul_nt(const double* a, const double* b, double* c, std::size_t m,
               std::size_t inner, std::size_t n) {
  for (std::size_t i = 0; i < m; ++i) {
    const double* arow = a + i * inner;
    double* crow = c + i * n;
    for (std::size_t j = 0; j < n; ++j) {
      const double* brow = b + j * inner;
      double acc = 0.0;
      for (std::size_t p = 0; p < inner; ++p) {
        acc += arow[p] * brow[p];
      }
      crow[j] += acc;
    }
  }
}

// c (m x n) += a (inner x m)^T . b (inner x n)
void matmul_tn(const double* a, const double* b, double* c, std::size_t inner,
               std::size_t m, std::size_t n) {
  for (std::size_t p = 0; p < inner; ++p) {
    const double* arow = a + p * m;
    const double* brow = b + p * n;
    for (std::size_t i = 0; i < m; ++i) {
      const double api = arow[i];
      double* crow = c + i * n;
      for (std::size_t j = 0; j < n; ++j) {
        crow[j] += api * brow[j];
      }
    }
  }
}

void softmax_row(const double* z, double* p, std::size_t n) {
  double zmax = z[0];
  for (std::size_t j = 1; j < n; ++j) {
    zmax = std::max(zmax, z[j]);
  }
  double denom = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    p[j] = std::exp(z[j] - zmax);
    denom += p[j];
  }
  for (std::size_t j = 0; j < n; ++j) {
    p[j] /= denom;
  }
}

}  // namespace

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i > 0) {
      os << 'x';
    }
    os << shape[i];
  }
  os << ']';
  return os.str();
}

// ---------------------------------------------------------------------------
// Tensor
// ---------------------------------------------------------------------------

detail::TensorImpl& Tensor::impl() const {
  if (!impl_) {
    throw ValidationError("operation on an undefined tensor");
  }
  return *impl_;
}

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  check_shape(shape);
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->data.assign(shape_numel(shape), 0.0);
  impl->shape = std::move(shape);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  std::fill(t.impl().data.begin(), t.impl().data.end(), value);
  return t;
}

Tensor Tensor::from(std::vector<std::size_t> shape, std::vector<double> values,
                    bool requires_grad) {
  check_shape(shape);
  if (values.size() != shape_numel(shape)) {
    throw ValidationError("tensor data length " + std::to_string(values.size()) +
                          " does not match shape " + shape_str(shape));
  }
  auto impl = std::make_shared<detail::TensorImpl>();
  impl->shape = std::move(shape);
  impl->data = std::move(values);
  Tensor t(std::move(impl));
  t.set_requires_grad(requires_grad);
  return t;
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return from({1}, {value}, requires_grad);
}

Tensor Tensor::gaussian(std::vector<std::size_t> shape, Rng& rng, double stddev,
                        bool requires_grad) {
  Tensor t = zeros(std::move(shape), requires_grad);
  for (double& v : t.impl().data) {
    v = rng.gaussian(0.0, stddev);
  }
  return t;
}

Tensor Tensor::identity(std::size_t n) {
  Tensor t = zeros({n, n});
  for (std::size_t i = 0; i < n; ++i) {
    t.impl().data[i * n + i] = 1.0;
  }
  return t;
}

const std::vector<std::size_t>& Tensor::shape() const { return impl().shape; }

std::size_t Tensor::dim(std::size_t axis) const {
  const auto& s = shape();
  if (axis >= s.size()) {
    throw ValidationError("axis " + std::to_string(axis) + " out of range for " +
                          shape_str(s));
  }
  return s[axis];
}

std::size_t Tensor::numel() const { return impl().data.size(); }

double& Tensor::at(std::size_t r, std::size_t c) {
  if (rank() != 2 || r >= rows() || c >= cols()) {
    throw ValidationError("invalid 2-D access (" + std::to_string(r) + "," +
                          std::to_string(c) + ") into " + shape_str(shape()));
  }
  return impl().data[r * cols() + c];
}

double Tensor::at(std::size_t r, std::size_t c) const {
  return const_cast<Tensor*>(this)->at(r, c);
}

std::span<double> Tensor::values() { return impl().data; }

std::span<const double> Tensor::values() const { return impl().data; }

double Tensor::value() const {
  if (numel() != 1) {
    throw ValidationError("value() requires a one-element tensor, got " +
                          shape_str(shape()));
  }
  return impl().data[0];
}

bool Tensor::requires_grad() const { return impl().requires_grad; }

void Tensor::set_requires_grad(bool on) {
  auto& im = impl();
  im.requires_grad = on;
  if (on) {
    ensure_grad(im);
  } else {
    im.grad.clear();
    im.grad.shrink_to_fit();
  }
}

std::span<const double> Tensor::grad() const {
  const auto& im = impl();
  if (!im.requires_grad) {
    throw ValidationError("gradient requested for a tensor that does not track gradients");
  }
  return im.grad;
}

void Tensor::zero_grad() {
  auto& im = impl();
  std::fill(im.grad.begin(), im.grad.end(), 0.0);
}

Tensor Tensor::clone() const {
  auto impl2 = std::make_shared<detail::TensorImpl>();
  impl2->shape = impl().shape;
  impl2->data = impl().data;
  return Tensor(std::move(impl2));
}

// ---------------------------------------------------------------------------
// GradTape
// ---------------------------------------------------------------------------

GradTape::GradTape() { g_tape_stack.push_back(this); }

GradTape::~GradTape() { g_tape_stack.pop_back(); }

bool grad_recording() { return !g_tape_stack.empty(); }

void GradTape::backward(const Tensor& loss) {
  if (consumed_) {
    throw ValidationError(
        "backward() already ran on this tape; re-run the forward computation "
        "under a fresh tape to differentiate again");
  }
  if (loss.numel() != 1) {
    throw ValidationError("backward() requires a scalar root, got " +
                          shape_str(loss.shape()));
  }
  consumed_ = true;
  if (!loss.requires_grad()) {
    // Root is detached from every tracked tensor; all gradients stay as-is.
    return;
  }
  const_cast<detail::TensorImpl*>(loss.key())->grad[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) {
    (*it)();
  }
}

void backward(const Tensor& loss) {
  if (g_tape_stack.empty()) {
    throw ValidationError("backward() called with no active GradTape");
  }
  g_tape_stack.back()->backward(loss);
}

// ---------------------------------------------------------------------------
// Op plumbing
// ---------------------------------------------------------------------------

struct OpAccess {
  static detail::TensorImpl* impl(const Tensor& t) { return t.impl_.get(); }
  static std::shared_ptr<detail::TensorImpl> share(const Tensor& t) { return t.impl_; }

  // Marks `out` as tracked and queues the pull function when recording is
  // active and at least one input is tracked.
  static void record(std::initializer_list<const Tensor*> inputs, Tensor& out,
                     std::function<void()> pull) {
    if (g_tape_stack.empty()) {
      return;
    }
    bool tracked = false;
    for (const Tensor* in : inputs) {
      if (in->requires_grad()) {
        tracked = true;
        break;
      }
    }
    if (!tracked) {
      return;
    }
    out.set_requires_grad(true);
    for (const Tensor* in : inputs) {
      if (in->requires_grad()) {
        ensure_grad(*impl(*in));
      }
    }
    g_tape_stack.back()->nodes_.push_back(std::move(pull));
  }
};

namespace {

void require_2d(const Tensor& t, const char* who) {
  if (t.rank() != 2) {
    throw ValidationError(std::string(who) + " requires a 2-D tensor, got " +
                          shape_str(t.shape()));
  }
}

void require_same_shape(const Tensor& a, const Tensor& b, const char* who) {
  if (a.shape() != b.shape()) {
    throw ValidationError(std::string(who) + " shape mismatch: " + shape_str(a.shape()) +
                          " vs " + shape_str(b.shape()));
  }
}

}  // namespace

// ---------------------------------------------------------------------------
// Operations
// ---------------------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_2d(a, "matmul");
  require_2d(b, "matmul");
  const std::size_t m = a.rows(), k = a.cols(), n = b.cols();
  if (b.rows() != k) {
    throw ValidationError("matmul inner dimension mismatch: " + shape_str(a.shape()) +
                          " x " + shape_str(b.shape()));
  }
  Tensor out = Tensor::zeros({m, n});
  matmul_nn(a.values().data(), b.values().data(), out.values().data(), m, k, n);
  OpAccess::record({&a, &b}, out,
                   [ai = OpAccess::share(a), bi = OpAccess::share(b),
                    oi = OpAccess::share(out), m, k, n] {
                     if (ai->requires_grad) {
                       matmul_nt(oi->grad.data(), bi->data.data(), ai->grad.data(), m, n, k);
                     }
                     if (bi->requires_grad) {
                       matmul_tn(ai->data.data(), oi->grad.data(), bi->grad.data(), m, k, n);
                     }
                   });
  return out;
}

Tensor add(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "add");
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = av[i] + bv[i];
  }
  OpAccess::record({&a, &b}, out,
                   [ai = OpAccess::share(a), bi = OpAccess::share(b),
                    oi = OpAccess::share(out)] {
                     const std::size_t n = oi->grad.size();
                     if (ai->requires_grad) {
                       for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
                     }
                     if (bi->requires_grad) {
                       for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i];
                     }
                   });
  return out;
}

Tensor sub(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "sub");
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = av[i] - bv[i];
  }
  OpAccess::record({&a, &b}, out,
                   [ai = OpAccess::share(a), bi = OpAccess::share(b),
                    oi = OpAccess::share(out)] {
                     const std::size_t n = oi->grad.size();
                     if (ai->requires_grad) {
                       for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i];
                     }
                     if (bi->requires_grad) {
                       for (std::size_t i = 0; i < n; ++i) bi->grad[i] -= oi->grad[i];
                     }
                   });
  return out;
}

Tensor mul(const Tensor& a, const Tensor& b) {
  require_same_shape(a, b, "mul");
  Tensor out = Tensor::zeros(a.shape());
  const auto av = a.values(), bv = b.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = av[i] * bv[i];
  }
  OpAccess::record({&a, &b}, out,
                   [ai = OpAccess::share(a), bi = OpAccess::share(b),
                    oi = OpAccess::share(out)] {
                     const std::size_t n = oi->grad.size();
                     if (ai->requires_grad) {
                       for (std::size_t i = 0; i < n; ++i) ai->grad[i] += oi->grad[i] * bi->data[i];
                     }
                     if (bi->requires_grad) {
                       for (std::size_t i = 0; i < n; ++i) bi->grad[i] += oi->grad[i] * ai->data[i];
                     }
                   });
  return out;
}

Tensor scale(const Tensor& x, double factor) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = xv[i] * factor;
  }
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out), factor] {
                     for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                       xi->grad[i] += oi->grad[i] * factor;
                     }
                   });
  return out;
}

Tensor add_bias(const Tensor& x, const Tensor& bias) {
  require_2d(x, "add_bias");
  if (bias.rank() != 1 || bias.dim(0) != x.cols()) {
    throw ValidationError("add_bias shape mismatch: " + shape_str(x.shape()) + " + " +
                          shape_str(bias.shape()));
  }
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({r, c});
  const auto xv = x.values(), bv = bias.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < r; ++i) {
    for (std::size_t j = 0; j < c; ++j) {
      ov[i * c + j] = xv[i * c + j] + bv[j];
    }
  }
  OpAccess::record({&x, &bias}, out,
                   [xi = OpAccess::share(x), bi = OpAccess::share(bias),
                    oi = OpAccess::share(out), r, c] {
                     if (xi->requires_grad) {
                       for (std::size_t i = 0; i < r * c; ++i) xi->grad[i] += oi->grad[i];
                     }
                     if (bi->requires_grad) {
                       for (std::size_t i = 0; i < r; ++i) {
                         for (std::size_t j = 0; j < c; ++j) {
                           bi->grad[j] += oi->grad[i * c + j];
                         }
                       }
                     }
                   });
  return out;
}

Tensor add_position(const Tensor& x, const Tensor& pos, std::size_t batch) {
  require_2d(x, "add_position");
  require_2d(pos, "add_position");
  const std::size_t s = pos.rows(), d = pos.cols();
  if (x.rows() != batch * s || x.cols() != d) {
    throw ValidationError("add_position shape mismatch: " + shape_str(x.shape()) +
                          " vs " + std::to_string(batch) + " tiles of " +
                          shape_str(pos.shape()));
  }
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values(), pv = pos.values();
  auto ov = out.values();
  for (std::size_t b = 0; b < batch; ++b) {
    const std::size_t base = b * s * d;
    for (std::size_t i = 0; i < s * d; ++i) {
      ov[base + i] = xv[base + i] + pv[i];
    }
  }
  OpAccess::record({&x, &pos}, out,
                   [xi = OpAccess::share(x), pi = OpAccess::share(pos),
                    oi = OpAccess::share(out), batch, s, d] {
                     if (xi->requires_grad) {
                       for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                         xi->grad[i] += oi->grad[i];
                       }
                     }
                     if (pi->requires_grad) {
                       for (std::size_t b = 0; b < batch; ++b) {
                         const std::size_t base = b * s * d;
                         for (std::size_t i = 0; i < s * d; ++i) {
                           pi->grad[i] += oi->grad[base + i];
                         }
                       }
                     }
                   });
  return out;
}

Tensor relu(const Tensor& x) {
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    ov[i] = xv[i] > 0.0 ? xv[i] : 0.0;
  }
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out)] {
                     for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                       if (xi->data[i] > 0.0) {
                         xi->grad[i] += oi->grad[i];
                       }
                     }
                   });
  return out;
}

Tensor sum(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) {
    acc += v;
  }
  Tensor out = Tensor::scalar(acc);
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out)] {
                     const double g = oi->grad[0];
                     for (double& gi : xi->grad) {
                       gi += g;
                     }
                   });
  return out;
}

Tensor mean_pool_rows(const Tensor& x, std::size_t group) {
  require_2d(x, "mean_pool_rows");
  const std::size_t r = x.rows(), c = x.cols();
  if (group == 0 || r % group != 0) {
    throw ValidationError("mean_pool_rows: row count " + std::to_string(r) +
                          " is not a multiple of group " + std::to_string(group));
  }
  const std::size_t out_rows = r / group;
  Tensor out = Tensor::zeros({out_rows, c});
  const auto xv = x.values();
  auto ov = out.values();
  const double inv = 1.0 / static_cast<double>(group);
  for (std::size_t i = 0; i < out_rows; ++i) {
    for (std::size_t g = 0; g < group; ++g) {
      const double* row = xv.data() + (i * group + g) * c;
      for (std::size_t j = 0; j < c; ++j) {
        ov[i * c + j] += row[j];
      }
    }
    for (std::size_t j = 0; j < c; ++j) {
      ov[i * c + j] *= inv;
    }
  }
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out), out_rows, group, c,
                    inv] {
                     for (std::size_t i = 0; i < out_rows; ++i) {
                       for (std::size_t g = 0; g < group; ++g) {
                         double* row = xi->grad.data() + (i * group + g) * c;
                         for (std::size_t j = 0; j < c; ++j) {
                           row[j] += oi->grad[i * c + j] * inv;
                         }
                       }
                     }
                   });
  return out;
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias, double eps) {
  require_2d(x, "layer_norm");
  const std::size_t r = x.rows(), c = x.cols();
  if (gain.rank() != 1 || gain.dim(0) != c || bias.rank() != 1 || bias.dim(0) != c) {
    throw ValidationError("layer_norm parameter shapes " + shape_str(gain.shape()) +
                          ", " + shape_str(bias.shape()) + " do not match row width " +
                          std::to_string(c));
  }
  Tensor out = Tensor::zeros({r, c});
  auto xhat = std::make_shared<std::vector<double>>(r * c);
  auto inv_std = std::make_shared<std::vector<double>>(r);
  const auto xv = x.values(), gv = gain.values(), bv = bias.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < r; ++i) {
    const double* row = xv.data() + i * c;
    double mean = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      mean += row[j];
    }
    mean /= static_cast<double>(c);
    double var = 0.0;
    for (std::size_t j = 0; j < c; ++j) {
      const double d = row[j] - mean;
      var += d * d;
    }
    var /= static_cast<double>(c);
    const double istd = 1.0 / std::sqrt(var + eps);
    (*inv_std)[i] = istd;
    for (std::size_t j = 0; j < c; ++j) {
      const double xh = (row[j] - mean) * istd;
      (*xhat)[i * c + j] = xh;
      ov[i * c + j] = gv[j] * xh + bv[j];
    }
  }
  OpAccess::record(
      {&x, &gain, &bias}, out,
      [xi = OpAccess::share(x), gi = OpAccess::share(gain), bi = OpAccess::share(bias),
       oi = OpAccess::share(out), xhat, inv_std, r, c] {
        for (std::size_t i = 0; i < r; ++i) {
          const double* go = oi->grad.data() + i * c;
          const double* xh = xhat->data() + i * c;
          if (gi->requires_grad) {
            for (std::size_t j = 0; j < c; ++j) {
              gi->grad[j] += go[j] * xh[j];
            }
          }
          if (bi->requires_grad) {
            for (std::size_t j = 0; j < c; ++j) {
              bi->grad[j] += go[j];
            }
          }
          if (xi->requires_grad) {
            // dxhat = go * gain; dx = istd * (dxhat - mean(dxhat) - xhat * mean(dxhat*xhat))
            double mean_dxh = 0.0, mean_dxh_xh = 0.0;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = go[j] * gi->data[j];
              mean_dxh += dxh;
              mean_dxh_xh += dxh * xh[j];
            }
            mean_dxh /= static_cast<double>(c);
            mean_dxh_xh /= static_cast<double>(c);
            const double istd = (*inv_std)[i];
            double* gx = xi->grad.data() + i * c;
            for (std::size_t j = 0; j < c; ++j) {
              const double dxh = go[j] * gi->data[j];
              gx[j] += istd * (dxh - mean_dxh - xh[j] * mean_dxh_xh);
            }
          }
        }
      });
  return out;
}

Tensor softmax_rows(const Tensor& x) {
  require_2d(x, "softmax_rows");
  const std::size_t r = x.rows(), c = x.cols();
  Tensor out = Tensor::zeros({r, c});
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < r; ++i) {
    softmax_row(xv.data() + i * c, ov.data() + i * c, c);
  }
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out), r, c] {
                     for (std::size_t i = 0; i < r; ++i) {
                       const double* p = oi->data.data() + i * c;
                       const double* go = oi->grad.data() + i * c;
                       double dot = 0.0;
                       for (std::size_t j = 0; j < c; ++j) {
                         dot += p[j] * go[j];
                       }
                       double* gx = xi->grad.data() + i * c;
                       for (std::size_t j = 0; j < c; ++j) {
                         gx[j] += p[j] * (go[j] - dot);
                       }
                     }
                   });
  return out;
}

Tensor softmax_cross_entropy(const Tensor& logits, const std::vector<int>& labels) {
  require_2d(logits, "softmax_cross_entropy");
  const std::size_t b = logits.rows(), c = logits.cols();
  if (labels.size() != b) {
    throw ValidationError("softmax_cross_entropy: " + std::to_string(labels.size()) +
                          " labels for " + std::to_string(b) + " rows");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (labels[i] < 0 || static_cast<std::size_t>(labels[i]) >= c) {
      throw ValidationError("label " + std::to_string(labels[i]) + " at row " +
                            std::to_string(i) + " outside [0, " + std::to_string(c) + ")");
    }
  }
  auto probs = std::make_shared<std::vector<double>>(b * c);
  const auto zv = logits.values();
  double loss = 0.0;
  for (std::size_t i = 0; i < b; ++i) {
    const double* z = zv.data() + i * c;
    double* p = probs->data() + i * c;
    softmax_row(z, p, c);
    loss -= std::log(p[labels[i]]);
  }
  loss /= static_cast<double>(b);
  Tensor out = Tensor::scalar(loss);
  OpAccess::record({&logits}, out,
                   [zi = OpAccess::share(logits), oi = OpAccess::share(out), probs,
                    labels, b, c] {
                     const double g = oi->grad[0] / static_cast<double>(b);
                     for (std::size_t i = 0; i < b; ++i) {
                       const double* p = probs->data() + i * c;
                       double* gz = zi->grad.data() + i * c;
                       for (std::size_t j = 0; j < c; ++j) {
                         gz[j] += g * (p[j] - (static_cast<std::size_t>(labels[i]) == j ? 1.0 : 0.0));
                       }
                     }
                   });
  return out;
}

Tensor frobenius_norm(const Tensor& x) {
  double acc = 0.0;
  for (double v : x.values()) {
    acc += v * v;
  }
  const double norm = std::sqrt(acc);
  Tensor out = Tensor::scalar(norm);
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out), norm] {
                     if (norm == 0.0) {
                       return;  // subgradient 0 at the origin
                     }
                     const double g = oi->grad[0] / norm;
                     for (std::size_t i = 0; i < xi->grad.size(); ++i) {
                       xi->grad[i] += g * xi->data[i];
                     }
                   });
  return out;
}

Tensor multihead_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                           std::size_t batch, std::size_t seq, std::size_t heads) {
  require_2d(q, "multihead_attention");
  require_same_shape(q, k, "multihead_attention");
  require_same_shape(q, v, "multihead_attention");
  const std::size_t rows = q.rows(), dim = q.cols();
  if (heads == 0 || dim % heads != 0) {
    throw ValidationError("attention dim " + std::to_string(dim) +
                          " not divisible by heads " + std::to_string(heads));
  }
  if (rows != batch * seq) {
    throw ValidationError("attention expects " + std::to_string(batch * seq) +
                          " rows, got " + shape_str(q.shape()));
  }
  const std::size_t hd = dim / heads;
  const double scale = 1.0 / std::sqrt(static_cast<double>(hd));

  Tensor out = Tensor::zeros({rows, dim});
  auto probs = std::make_shared<std::vector<double>>(batch * heads * seq * seq);
  const double* qv = q.values().data();
  const double* kv = k.values().data();
  const double* vv = v.values().data();
  double* ov = out.values().data();

  std::vector<double> scores(seq);
  for (std::size_t b = 0; b < batch; ++b) {
    for (std::size_t h = 0; h < heads; ++h) {
      const std::size_t col0 = h * hd;
      double* pblock = probs->data() + (b * heads + h) * seq * seq;
      for (std::size_t i = 0; i < seq; ++i) {
        const double* qrow = qv + (b * seq + i) * dim + col0;
        for (std::size_t j = 0; j < seq; ++j) {
          const double* krow = kv + (b * seq + j) * dim + col0;
          double acc = 0.0;
          for (std::size_t p = 0; p < hd; ++p) {
            acc += qrow[p] * krow[p];
          }
          scores[j] = acc * scale;
        }
        double* prow = pblock + i * seq;
        softmax_row(scores.data(), prow, seq);
        double* orow = ov + (b * seq + i) * dim + col0;
        for (std::size_t j = 0; j < seq; ++j) {
          const double pij = prow[j];
          const double* vrow = vv + (b * seq + j) * dim + col0;
          for (std::size_t p = 0; p < hd; ++p) {
            orow[p] += pij * vrow[p];
          }
        }
      }
    }
  }

  OpAccess::record(
      {&q, &k, &v}, out,
      [qi = OpAccess::share(q), ki = OpAccess::share(k), vi = OpAccess::share(v),
       oi = OpAccess::share(out), probs, batch, seq, heads, hd, dim, scale] {
        std::vector<double> dp(seq), ds(seq);
        for (std::size_t b = 0; b < batch; ++b) {
          for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t col0 = h * hd;
            const double* pblock = probs->data() + (b * heads + h) * seq * seq;
            for (std::size_t i = 0; i < seq; ++i) {
              const double* go = oi->grad.data() + (b * seq + i) * dim + col0;
              const double* prow = pblock + i * seq;
              // dV += P^T dO ; dP = dO V^T
              double dot = 0.0;
              for (std::size_t j = 0; j < seq; ++j) {
                const double* vrow = vi->data.data() + (b * seq + j) * dim + col0;
                double acc = 0.0;
                for (std::size_t p = 0; p < hd; ++p) {
                  acc += go[p] * vrow[p];
                }
                dp[j] = acc;
                dot += acc * prow[j];
                if (vi->requires_grad) {
                  double* gv = vi->grad.data() + (b * seq + j) * dim + col0;
                  const double pij = prow[j];
                  for (std::size_t p = 0; p < hd; ++p) {
                    gv[p] += pij * go[p];
                  }
                }
              }
              // softmax backward, then dQ += dS.K*scale and dK += dS^T.Q*scale
              for (std::size_t j = 0; j < seq; ++j) {
                ds[j] = prow[j] * (dp[j] - dot) * scale;
              }
              const double* qrow = qi->data.data() + (b * seq + i) * dim + col0;
              double* gq = qi->requires_grad
                               ? qi->grad.data() + (b * seq + i) * dim + col0
                               : nullptr;
              for (std::size_t j = 0; j < seq; ++j) {
                const double dsj = ds[j];
                const double* krow = ki->data.data() + (b * seq + j) * dim + col0;
                if (gq != nullptr) {
                  for (std::size_t p = 0; p < hd; ++p) {
                    gq[p] += dsj * krow[p];
                  }
                }
                if (ki->requires_grad) {
                  double* gk = ki->grad.data() + (b * seq + j) * dim + col0;
                  for (std::size_t p = 0; p < hd; ++p) {
                    gk[p] += dsj * qrow[p];
                  }
                }
              }
            }
          }
        }
      });
  return out;
}

Tensor dropout(const Tensor& x, double p, Rng& rng) {
  if (p < 0.0 || p >= 1.0) {
    throw ValidationError("dropout rate must lie in [0, 1), got " + std::to_string(p));
  }
  if (p == 0.0) {
    return x;
  }
  const double keep_scale = 1.0 / (1.0 - p);
  auto mask = std::make_shared<std::vector<double>>(x.numel());
  Tensor out = Tensor::zeros(x.shape());
  const auto xv = x.values();
  auto ov = out.values();
  for (std::size_t i = 0; i < ov.size(); ++i) {
    const double m = rng.uniform() >= p ? keep_scale : 0.0;
    (*mask)[i] = m;
    ov[i] = xv[i] * m;
  }
  OpAccess::record({&x}, out,
                   [xi = OpAccess::share(x), oi = OpAccess::share(out), mask] {
                     for (std::size_t i = 0; i < oi->grad.size(); ++i) {
                       xi->grad[i] += oi->grad[i] * (*mask)[i];
                     }
                   });
  return out;
}

double grad_check(const std::function<Tensor(const Tensor&)>& f, Tensor x, double h) {
  if (h <= 0.0) {
    throw ValidationError("grad_check step must be positive");
  }
  const bool had_grad = x.requires_grad();
  x.set_requires_grad(true);
  x.zero_grad();
  std::vector<double> analytic;
  {
    GradTape tape;
    Tensor y = f(x);
    if (y.numel() != 1) {
      throw ValidationError("grad_check requires a scalar-valued function");
    }
    tape.backward(y);
    analytic.assign(x.grad().begin(), x.grad().end());
  }
  x.set_requires_grad(had_grad);

  double worst = 0.0;
  auto xv = x.values();
  for (std::size_t i = 0; i < xv.size(); ++i) {
    const double saved = xv[i];
    xv[i] = saved + h;
    const double fp = f(x).value();
    xv[i] = saved - h;
    const double fm = f(x).value();
    xv[i] = saved;
    const double numeric = (fp - fm) / (2.0 * h);
    const double denom = std::max({std::abs(analytic[i]), std::abs(numeric), 1.0});
    worst = std::max(worst, std::abs(analytic[i] - numeric) / denom);
  }
  return worst;
}

}  // namespace gslf
