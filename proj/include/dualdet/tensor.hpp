#pragma once

// Dense double-precision tensor with a dynamic reverse-mode gradient graph.
//
// Every op returns a new Tensor whose node keeps shared ownership of its
// inputs, so a graph lives exactly as long as the handle to its output.
// Parameters are leaf tensors created with `requires_grad`; they survive
// across steps while the per-step graph above them is released.

#include <cblas.h>

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <functional>
#include <memory>
#include <numeric>
#include <random>
#include <span>
#include <sstream>
#include <string>
#include <unordered_set>
#include <utility>
#include <vector>

#include "dualdet/error.hpp"

namespace dualdet::ad {

using Shape = std::vector<std::size_t>;

inline std::size_t numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), std::size_t{1}, std::multiplies<>{});
}

inline std::string to_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

struct Node {
  Shape shape;
  std::vector<double> value;
  std::vector<double> grad;  // empty until backward touches the node
  bool requires_grad = false;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  std::function<void(Node&)> backward;

  std::vector<double>& grad_buffer() {
    if (grad.size() != value.size()) grad.assign(value.size(), 0.0);
    return grad;
  }
};

class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::shared_ptr<Node> n) : node_(std::move(n)) {}

  Tensor(Shape shape, std::vector<double> values, bool requires_grad = false)
      : node_(std::make_shared<Node>()) {
    if (numel(shape) != values.size())
      throw ShapeError("tensor: shape " + to_string(shape) + " does not hold " +
                       std::to_string(values.size()) + " values");
    node_->shape = std::move(shape);
    node_->value = std::move(values);
    node_->requires_grad = requires_grad;
  }

  static Tensor zeros(Shape shape, bool requires_grad = false) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, 0.0), requires_grad);
  }
  static Tensor filled(Shape shape, double v) {
    const std::size_t n = numel(shape);
    return Tensor(std::move(shape), std::vector<double>(n, v));
  }
  static Tensor scalar(double v, bool requires_grad = false) {
    return Tensor(Shape{}, {v}, requires_grad);
  }

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::size_t size() const { return node_->value.size(); }
  std::size_t dim(std::size_t i) const { return node_->shape.at(i); }
  bool requires_grad() const { return node_->requires_grad; }

  std::span<const double> values() const { return node_->value; }
  std::span<double> mutable_values() { return node_->value; }
  double item() const {
    if (size() != 1) throw ShapeError("item: tensor of shape " + to_string(shape()) + " is not scalar");
    return node_->value[0];
  }
  double operator[](std::size_t i) const { return node_->value[i]; }

  /// Gradient after backward; all zeros if nothing flowed into this tensor.
  std::span<const double> grad() const { return node_->grad_buffer(); }
  void zero_grad() { std::fill(node_->grad.begin(), node_->grad.end(), 0.0); }

  Node& node() const { return *node_; }
  const std::shared_ptr<Node>& node_ptr() const { return node_; }

 private:
  std::shared_ptr<Node> node_;
};

namespace detail {
inline thread_local bool grad_disabled = false;
}  // namespace detail

/// While alive, ops on this thread record no graph (inference mode).
class NoGradGuard {
 public:
  NoGradGuard() : previous_(detail::grad_disabled) { detail::grad_disabled = true; }
  ~NoGradGuard() { detail::grad_disabled = previous_; }
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool previous_;
};

namespace detail {

inline Tensor make_result(Shape shape, std::vector<double> value, const char* op,
                          std::vector<std::shared_ptr<Node>> parents,
                          std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value = std::move(value);
  n->op = op;
  n->requires_grad = !grad_disabled && std::any_of(parents.begin(), parents.end(),
                                                   [](const auto& p) { return p->requires_grad; });
  if (n->requires_grad) {
    n->parents = std::move(parents);
    n->backward = std::move(backward);
  }
  return Tensor(std::move(n));
}

inline void require_same_shape(const char* op, const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape())
    throw ShapeError(std::string(op) + ": shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
}

// Elementwise binary op with scalar-tensor broadcasting only.
template <class F, class DA, class DB>
Tensor binary(const char* op, const Tensor& a, const Tensor& b, F f, DA da, DB db) {
  const bool a_scalar = a.size() == 1 && b.size() != 1;
  const bool b_scalar = b.size() == 1 && a.size() != 1;
  if (!a_scalar && !b_scalar) require_same_shape(op, a, b);
  const Shape shape = a_scalar ? b.shape() : a.shape();
  const std::size_t n = numel(shape);
  const auto& av = a.node().value;
  const auto& bv = b.node().value;
  std::vector<double> out(n);
  for (std::size_t i = 0; i < n; ++i) out[i] = f(av[a_scalar ? 0 : i], bv[b_scalar ? 0 : i]);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return make_result(shape, std::move(out), op, {pa, pb},
                     [pa, pb, a_scalar, b_scalar, da, db](Node& self) {
                       const std::size_t n = self.value.size();
                       const auto& av = pa->value;
                       const auto& bv = pb->value;
                       if (pa->requires_grad) {
                         auto& g = pa->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
                           g[a_scalar ? 0 : i] += self.grad[i] * da(x, y, self.value[i]);
                         }
                       }
                       if (pb->requires_grad) {
                         auto& g = pb->grad_buffer();
                         for (std::size_t i = 0; i < n; ++i) {
                           const double x = av[a_scalar ? 0 : i], y = bv[b_scalar ? 0 : i];
                           g[b_scalar ? 0 : i] += self.grad[i] * db(x, y, self.value[i]);
                         }
                       }
                     });
}

// Elementwise unary op; `d(x, y)` is dy/dx given input x and output y.
template <class F, class D>
Tensor unary(const char* op, const Tensor& a, F f, D d) {
  const auto& av = a.node().value;
  std::vector<double> out(av.size());
  for (std::size_t i = 0; i < av.size(); ++i) out[i] = f(av[i]);
  auto pa = a.node_ptr();
  return make_result(a.shape(), std::move(out), op, {pa}, [pa, d](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i] * d(pa->value[i], self.value[i]);
  });
}

}  // namespace detail

inline Tensor add(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "add", a, b, [](double x, double y) { return x + y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return 1.0; });
}
inline Tensor sub(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "sub", a, b, [](double x, double y) { return x - y; },
      [](double, double, double) { return 1.0; }, [](double, double, double) { return -1.0; });
}
inline Tensor mul(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "mul", a, b, [](double x, double y) { return x * y; },
      [](double, double y, double) { return y; }, [](double x, double, double) { return x; });
}
inline Tensor div(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "div", a, b, [](double x, double y) { return x / y; },
      [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}
/// Elementwise min; the gradient goes to `a` on ties.
inline Tensor minimum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "minimum", a, b, [](double x, double y) { return std::min(x, y); },
      [](double x, double y, double) { return x <= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x <= y ? 0.0 : 1.0; });
}
/// Elementwise max; the gradient goes to `a` on ties.
inline Tensor maximum(const Tensor& a, const Tensor& b) {
  return detail::binary(
      "maximum", a, b, [](double x, double y) { return std::max(x, y); },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

inline Tensor add(const Tensor& a, double s) {
  return detail::unary(
      "add_scalar", a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}
inline Tensor mul(const Tensor& a, double s) {
  return detail::unary(
      "mul_scalar", a, [s](double x) { return x * s; }, [s](double, double) { return s; });
}
inline Tensor neg(const Tensor& a) { return mul(a, -1.0); }
/// s - a
inline Tensor rsub(double s, const Tensor& a) {
  return detail::unary(
      "rsub", a, [s](double x) { return s - x; }, [](double, double) { return -1.0; });
}

inline Tensor exp(const Tensor& a) {
  return detail::unary(
      "exp", a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}
inline Tensor log(const Tensor& a) {
  return detail::unary(
      "log", a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}
inline Tensor sigmoid(const Tensor& a) {
  return detail::unary(
      "sigmoid", a, [](double x) { return 1.0 / (1.0 + std::exp(-x)); },
      [](double, double y) { return y * (1.0 - y); });
}
inline Tensor relu(const Tensor& a) {
  return detail::unary(
      "relu", a, [](double x) { return x > 0 ? x : 0.0; },
      [](double x, double) { return x > 0 ? 1.0 : 0.0; });
}
inline Tensor abs(const Tensor& a) {
  return detail::unary(
      "abs", a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}
inline Tensor sqrt(const Tensor& a) {
  return detail::unary(
      "sqrt", a, [](double x) { return std::sqrt(x); },
      [](double, double y) { return 0.5 / y; });
}
/// a^e for a > 0 (or e a nonnegative integer).
inline Tensor pow(const Tensor& a, double e) {
  return detail::unary(
      "pow", a, [e](double x) { return std::pow(x, e); },
      [e](double x, double) { return e == 0 ? 0.0 : e * std::pow(x, e - 1); });
}
/// Clamp into [lo, hi]; zero gradient where the clamp is active.
inline Tensor clamp(const Tensor& a, double lo, double hi) {
  return detail::unary(
      "clamp", a, [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

inline Tensor sum(const Tensor& a) {
  double s = 0;
  for (double v : a.values()) s += v;
  auto pa = a.node_ptr();
  return detail::make_result(Shape{}, {s}, "sum", {pa}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (double& gi : g) gi += self.grad[0];
  });
}

inline Tensor mean(const Tensor& a) {
  if (a.size() == 0) throw ShapeError("mean: empty tensor");
  return mul(sum(a), 1.0 / static_cast<double>(a.size()));
}

inline Tensor reshape(const Tensor& a, Shape shape) {
  if (numel(shape) != a.size())
    throw ShapeError("reshape: cannot view " + to_string(a.shape()) + " as " + to_string(shape));
  auto pa = a.node_ptr();
  return detail::make_result(std::move(shape), a.node().value, "reshape", {pa}, [pa](Node& self) {
    auto& g = pa->grad_buffer();
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[i];
  });
}

/// Rows [begin, end) along the leading axis.
inline Tensor slice(const Tensor& a, std::size_t begin, std::size_t end) {
  if (a.shape().empty() || begin > end || end > a.dim(0))
    throw ShapeError("slice: range [" + std::to_string(begin) + "," + std::to_string(end) +
                     ") invalid for shape " + to_string(a.shape()));
  Shape shape = a.shape();
  const std::size_t row = a.size() / shape[0];
  shape[0] = end - begin;
  std::vector<double> out(a.node().value.begin() + begin * row, a.node().value.begin() + end * row);
  auto pa = a.node_ptr();
  return detail::make_result(std::move(shape), std::move(out), "slice", {pa},
                             [pa, begin, row](Node& self) {
                               auto& g = pa->grad_buffer();
                               for (std::size_t i = 0; i < self.grad.size(); ++i)
                                 g[begin * row + i] += self.grad[i];
                             });
}

/// out[i] = a.flat[index[i]], shaped as `shape`. Backward scatter-adds.
inline Tensor gather(const Tensor& a, std::vector<std::size_t> index, Shape shape) {
  if (numel(shape) != index.size())
    throw ShapeError("gather: " + std::to_string(index.size()) + " indices for shape " +
                     to_string(shape));
  const auto& av = a.node().value;
  std::vector<double> out(index.size());
  for (std::size_t i = 0; i < index.size(); ++i) {
    if (index[i] >= av.size())
      throw ShapeError("gather: index " + std::to_string(index[i]) + " out of range for " +
                       to_string(a.shape()));
    out[i] = av[index[i]];
  }
  auto pa = a.node_ptr();
  auto idx = std::make_shared<std::vector<std::size_t>>(std::move(index));
  return detail::make_result(std::move(shape), std::move(out), "gather", {pa},
                             [pa, idx](Node& self) {
                               auto& g = pa->grad_buffer();
                               for (std::size_t i = 0; i < idx->size(); ++i)
                                 g[(*idx)[i]] += self.grad[i];
                             });
}

/// Concatenate the flattened inputs into one 1-D tensor.
inline Tensor concat(const std::vector<Tensor>& parts) {
  std::vector<double> out;
  std::vector<std::shared_ptr<Node>> parents;
  for (const auto& p : parts) {
    out.insert(out.end(), p.values().begin(), p.values().end());
    parents.push_back(p.node_ptr());
  }
  const std::size_t n = out.size();
  auto ps = parents;
  return detail::make_result(Shape{n}, std::move(out), "concat", std::move(parents),
                             [ps](Node& self) {
                               std::size_t off = 0;
                               for (const auto& p : ps) {
                                 if (p->requires_grad) {
                                   auto& g = p->grad_buffer();
                                   for (std::size_t i = 0; i < g.size(); ++i) g[i] += self.grad[off + i];
                                 }
                                 off += p->value.size();
                               }
                             });
}

/// [m,k] x [k,n] -> [m,n]
inline Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: shape mismatch " + to_string(a.shape()) + " vs " +
                     to_string(b.shape()));
  const int m = static_cast<int>(a.dim(0)), k = static_cast<int>(a.dim(1)),
            n = static_cast<int>(b.dim(1));
  std::vector<double> out(static_cast<std::size_t>(m) * n, 0.0);
  if (m && n && k)
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, m, n, k, 1.0, a.values().data(), k,
                b.values().data(), n, 0.0, out.data(), n);
  auto pa = a.node_ptr(), pb = b.node_ptr();
  return detail::make_result(Shape{a.dim(0), b.dim(1)}, std::move(out), "matmul", {pa, pb},
                             [pa, pb, m, k, n](Node& self) {
                               if (!(m && n && k)) return;
                               if (pa->requires_grad)  // dA = dC B^T
                                 cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, m, k, n, 1.0,
                                             self.grad.data(), n, pb->value.data(), n, 1.0,
                                             pa->grad_buffer().data(), k);
                               if (pb->requires_grad)  // dB = A^T dC
                                 cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, k, n, m, 1.0,
                                             pa->value.data(), k, self.grad.data(), n, 1.0,
                                             pb->grad_buffer().data(), n);
                             });
}

struct Conv2dOptions {
  std::size_t stride = 1;
  std::size_t padding = 0;
};

namespace detail {

struct ConvGeometry {
  std::size_t batch, cin, h, w, cout, k, stride, pad, oh, ow;
  std::size_t cols() const { return cin * k * k; }
  std::size_t positions() const { return oh * ow; }
};

// Unfold one image [cin,h,w] into [cin*k*k, oh*ow] with zero padding.
inline void im2col(const ConvGeometry& g, const double* img, double* col) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        double* row = col + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            const bool in = iy >= 0 && ix >= 0 && iy < static_cast<long>(g.h) &&
                            ix < static_cast<long>(g.w);
            row[oy * g.ow + ox] = in ? img[(c * g.h + iy) * g.w + ix] : 0.0;
          }
        }
      }
}

inline void col2im(const ConvGeometry& g, const double* col, double* img) {
  const std::size_t P = g.positions();
  for (std::size_t c = 0; c < g.cin; ++c)
    for (std::size_t ky = 0; ky < g.k; ++ky)
      for (std::size_t kx = 0; kx < g.k; ++kx) {
        const double* row = col + ((c * g.k + ky) * g.k + kx) * P;
        for (std::size_t oy = 0; oy < g.oh; ++oy) {
          const long iy = static_cast<long>(oy * g.stride + ky) - static_cast<long>(g.pad);
          if (iy < 0 || iy >= static_cast<long>(g.h)) continue;
          for (std::size_t ox = 0; ox < g.ow; ++ox) {
            const long ix = static_cast<long>(ox * g.stride + kx) - static_cast<long>(g.pad);
            if (ix < 0 || ix >= static_cast<long>(g.w)) continue;
            img[(c * g.h + iy) * g.w + ix] += row[oy * g.ow + ox];
          }
        }
      }
}

}  // namespace detail

/// 2-D cross-correlation with zero padding.
/// input [N,Cin,H,W] (or [Cin,H,W]), weight [Cout,Cin,k,k], bias [Cout] (optional).
inline Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
                     Conv2dOptions opt = {}) {
  const bool batched = input.shape().size() == 4;
  if ((!batched && input.shape().size() != 3) || weight.shape().size() != 4 ||
      weight.dim(2) != weight.dim(3))
    throw ShapeError("conv2d: expected input [N,C,H,W] or [C,H,W] and kernel [Co,Ci,k,k], got " +
                     to_string(input.shape()) + " and " + to_string(weight.shape()));
  detail::ConvGeometry g{};
  g.batch = batched ? input.dim(0) : 1;
  g.cin = input.dim(batched ? 1 : 0);
  g.h = input.dim(batched ? 2 : 1);
  g.w = input.dim(batched ? 3 : 2);
  g.cout = weight.dim(0);
  g.k = weight.dim(2);
  g.stride = opt.stride;
  g.pad = opt.padding;
  if (weight.dim(1) != g.cin)
    throw ShapeError("conv2d: input channels " + to_string(input.shape()) +
                     " do not match kernel " + to_string(weight.shape()));
  if (bias.defined() && bias.size() != g.cout)
    throw ShapeError("conv2d: bias " + to_string(bias.shape()) + " does not match kernel " +
                     to_string(weight.shape()));
  if (g.stride == 0 || g.h + 2 * g.pad < g.k || g.w + 2 * g.pad < g.k)
    throw ShapeError("conv2d: kernel " + to_string(weight.shape()) + " does not fit input " +
                     to_string(input.shape()));
  g.oh = (g.h + 2 * g.pad - g.k) / g.stride + 1;
  g.ow = (g.w + 2 * g.pad - g.k) / g.stride + 1;

  const std::size_t J = g.cols(), P = g.positions(), in_img = g.cin * g.h * g.w,
                    out_img = g.cout * P;
  auto cols = std::make_shared<std::vector<double>>(g.batch * J * P);
  std::vector<double> out(g.batch * out_img, 0.0);
  const double* x = input.values().data();
  const double* wv = weight.values().data();
  for (std::size_t n = 0; n < g.batch; ++n) {
    double* col = cols->data() + n * J * P;
    detail::im2col(g, x + n * in_img, col);
    double* o = out.data() + n * out_img;
    if (bias.defined())
      for (std::size_t c = 0; c < g.cout; ++c) std::fill(o + c * P, o + (c + 1) * P, bias[c]);
    cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasNoTrans, static_cast<int>(g.cout),
                static_cast<int>(P), static_cast<int>(J), 1.0, wv, static_cast<int>(J), col,
                static_cast<int>(P), 1.0, o, static_cast<int>(P));
  }

  Shape shape = batched ? Shape{g.batch, g.cout, g.oh, g.ow} : Shape{g.cout, g.oh, g.ow};
  std::vector<std::shared_ptr<Node>> parents{input.node_ptr(), weight.node_ptr()};
  if (bias.defined()) parents.push_back(bias.node_ptr());
  auto pi = input.node_ptr(), pw = weight.node_ptr();
  auto pb = bias.defined() ? bias.node_ptr() : nullptr;
  return detail::make_result(
      std::move(shape), std::move(out), "conv2d", std::move(parents),
      [pi, pw, pb, g, cols](Node& self) {
        const std::size_t J = g.cols(), P = g.positions(), in_img = g.cin * g.h * g.w,
                          out_img = g.cout * P;
        std::vector<double> dcol(pi->requires_grad ? J * P : 0);
        for (std::size_t n = 0; n < g.batch; ++n) {
          const double* dout = self.grad.data() + n * out_img;
          const double* col = cols->data() + n * J * P;
          if (pw->requires_grad)  // dW += dOut col^T
            cblas_dgemm(CblasRowMajor, CblasNoTrans, CblasTrans, static_cast<int>(g.cout),
                        static_cast<int>(J), static_cast<int>(P), 1.0, dout, static_cast<int>(P),
                        col, static_cast<int>(P), 1.0, pw->grad_buffer().data(),
                        static_cast<int>(J));
          if (pb && pb->requires_grad) {
            auto& gb = pb->grad_buffer();
            for (std::size_t c = 0; c < g.cout; ++c)
              for (std::size_t p = 0; p < P; ++p) gb[c] += dout[c * P + p];
          }
          if (pi->requires_grad) {  // dCol = W^T dOut, folded back into the image
            cblas_dgemm(CblasRowMajor, CblasTrans, CblasNoTrans, static_cast<int>(J),
                        static_cast<int>(P), static_cast<int>(g.cout), 1.0, pw->value.data(),
                        static_cast<int>(J), dout, static_cast<int>(P), 0.0, dcol.data(),
                        static_cast<int>(P));
            detail::col2im(g, dcol.data(), pi->grad_buffer().data() + n * in_img);
          }
        }
      });
}

inline Tensor conv2d(const Tensor& input, const Tensor& weight, Conv2dOptions opt = {}) {
  return conv2d(input, weight, Tensor{}, opt);
}

/// Nodes reachable from `root` that carry gradients, in topological order
/// (inputs before outputs). Each node appears once.
inline std::vector<Node*> topological_order(const Tensor& root) {
  std::vector<Node*> order;
  std::unordered_set<Node*> seen;
  std::vector<std::pair<Node*, std::size_t>> stack{{&root.node(), 0}};
  seen.insert(&root.node());
  while (!stack.empty()) {
    auto& [n, next] = stack.back();
    if (next < n->parents.size()) {
      Node* p = n->parents[next++].get();
      if (p->requires_grad && seen.insert(p).second) stack.emplace_back(p, 0);
    } else {
      order.push_back(n);
      stack.pop_back();
    }
  }
  return order;
}

/// Reverse-mode sweep from a scalar loss. Leaf gradients accumulate, so
/// parameters should be zeroed between steps.
inline void backward(const Tensor& loss) {
  if (loss.size() != 1)
    throw ShapeError("backward: loss must be scalar, got shape " + to_string(loss.shape()));
  if (!loss.requires_grad()) return;
  const auto order = topological_order(loss);
  for (Node* n : order)
    if (n->backward) n->grad.assign(n->value.size(), 0.0);
  loss.node().grad_buffer()[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it)
    if ((*it)->backward) (*it)->backward(**it);
}

/// Maximum relative error between the analytic gradient of scalar `f` at `x`
/// and central differences, over `samples` coordinates (all if 0 or more
/// than x holds). Error per coordinate: |a - n| / max(1e-8, |a| + |n|).
inline double grad_check(const std::function<Tensor(const Tensor&)>& f, const Tensor& x,
                         double eps = 1e-5, std::size_t samples = 0, unsigned seed = 0) {
  Tensor probe(x.shape(), std::vector<double>(x.values().begin(), x.values().end()), true);
  Tensor y = f(probe);
  backward(y);
  const std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  std::vector<std::size_t> coords(probe.size());
  std::iota(coords.begin(), coords.end(), 0);
  if (samples > 0 && samples < coords.size()) {
    std::mt19937 rng(seed);
    std::shuffle(coords.begin(), coords.end(), rng);
    coords.resize(samples);
  }
  double worst = 0;
  for (std::size_t i : coords) {
    std::vector<double> v(x.values().begin(), x.values().end());
    v[i] = x[i] + eps;
    const double up = f(Tensor(x.shape(), v)).item();
    v[i] = x[i] - eps;
    const double down = f(Tensor(x.shape(), v)).item();
    const double numeric = (up - down) / (2 * eps);
    const double err =
        std::abs(analytic[i] - numeric) / std::max(1e-8, std::abs(analytic[i]) + std::abs(numeric));
    worst = std::max(worst, err);
  }
  return worst;
}

}  // namespace dualdet::ad
