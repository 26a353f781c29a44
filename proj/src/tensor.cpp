#include "kvla/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <stdexcept>

namespace kvla {

namespace {

void check_all_finite(std::span<const double> values, const char* op) {
  for (double v : values) {
    if (!std::isfinite(v)) {
      throw std::domain_error(std::string("non-finite value in ") + op);
    }
  }
}

[[noreturn]] void fail_shape(const char* op, const Shape& a, const Shape& b) {
  throw std::invalid_argument(std::string(op) + ": incompatible shapes " +
                              shape_str(a) + " and " + shape_str(b));
}

// Sorting the addends makes the sum a function of the value multiset only.
// Ties (including -0/+0) are ordered totally so the result is deterministic.
double multiset_sum(std::vector<double>& addends) {
  std::sort(addends.begin(), addends.end(), [](double x, double y) {
    if (x != y) return x < y;
    return std::signbit(x) && !std::signbit(y);
  });
  double s = 0.0;
  for (double v : addends) s += v;
  return s;
}

double stable_sigmoid(double x) {
  if (x >= 0.0) {
    return 1.0 / (1.0 + std::exp(-x));
  }
  const double e = std::exp(x);
  return e / (1.0 + e);
}

}  // namespace

std::size_t shape_numel(const Shape& shape) {
  std::size_t n = 1;
  for (std::size_t e : shape) n *= e;
  return n;
}

std::string shape_str(const Shape& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) s += "x";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

// ---- Tensor ----------------------------------------------------------------

Tensor Tensor::zeros(Shape shape, bool requires_grad) {
  return full(std::move(shape), 0.0, requires_grad);
}

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive");
  }
  Tensor t;
  t.data_ = std::make_shared<Data>();
  t.data_->shape = std::move(shape);
  t.data_->values.assign(shape_numel(t.data_->shape), value);
  t.data_->requires_grad = requires_grad;
  if (requires_grad) t.data_->grad.assign(t.data_->values.size(), 0.0);
  check_all_finite(t.data_->values, "tensor construction");
  return t;
}

Tensor Tensor::from_values(Shape shape, std::vector<double> values,
                           bool requires_grad) {
  for (std::size_t e : shape) {
    if (e == 0) throw std::invalid_argument("tensor extents must be positive");
  }
  if (shape_numel(shape) != values.size()) {
    throw std::invalid_argument("tensor value count does not match shape " +
                                shape_str(shape));
  }
  Tensor t;
  t.data_ = std::make_shared<Data>();
  t.data_->shape = std::move(shape);
  t.data_->values = std::move(values);
  t.data_->requires_grad = requires_grad;
  if (requires_grad) t.data_->grad.assign(t.data_->values.size(), 0.0);
  check_all_finite(t.data_->values, "tensor construction");
  return t;
}

Tensor Tensor::scalar(double value) { return from_values({1}, {value}); }

const Shape& Tensor::shape() const { return data_->shape; }
std::size_t Tensor::size() const { return data_->values.size(); }
std::size_t Tensor::rank() const { return data_->shape.size(); }
bool Tensor::requires_grad() const { return data_ && data_->requires_grad; }

std::span<const double> Tensor::values() const { return data_->values; }
std::span<double> Tensor::values_mut() { return data_->values; }

std::span<const double> Tensor::grad() const { return data_->grad; }
std::span<double> Tensor::grad_mut() { return data_->grad; }

void Tensor::zero_grad() {
  std::fill(data_->grad.begin(), data_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (size() != 1) {
    throw std::invalid_argument("item() requires a one-element tensor, got " +
                                shape_str(shape()));
  }
  return data_->values[0];
}

// ---- Tape ------------------------------------------------------------------

void Tape::backward(const Tensor& loss) {
  if (!loss.defined() || loss.size() != 1) {
    throw std::invalid_argument("backward requires a scalar loss");
  }
  if (nodes_.empty()) {
    throw std::invalid_argument("backward on an empty tape");
  }
  if (!loss.requires_grad()) {
    throw std::invalid_argument("backward on a loss that requires no grad");
  }
  Tensor seed = loss;
  seed.grad_mut()[0] += 1.0;
  for (auto it = nodes_.rbegin(); it != nodes_.rend(); ++it) (*it)();
  nodes_.clear();
}

// ---- helpers for op construction -------------------------------------------

namespace {

struct Broadcast {
  // big indexes run over the output; small repeats with period `inner`.
  bool swapped = false;  // true when a was the smaller operand
  std::size_t inner = 0;
};

Broadcast resolve_broadcast(const char* op, const Shape& a, const Shape& b) {
  if (a == b) return {false, shape_numel(b)};
  auto suffix = [](const Shape& big, const Shape& small) {
    if (small.size() > big.size()) return false;
    return std::equal(small.rbegin(), small.rend(), big.rbegin());
  };
  if (suffix(a, b)) return {false, shape_numel(b)};
  if (suffix(b, a)) return {true, shape_numel(a)};
  fail_shape(op, a, b);
}

Tensor make_output(Shape shape, std::vector<double> values, bool track) {
  return Tensor::from_values(std::move(shape), std::move(values), track);
}

bool tracking(Tape* tape, const Tensor& a) {
  return tape != nullptr && a.requires_grad();
}
bool tracking(Tape* tape, const Tensor& a, const Tensor& b) {
  return tape != nullptr && (a.requires_grad() || b.requires_grad());
}

void require_defined(const char* op, const Tensor& t) {
  if (!t.defined()) {
    throw std::invalid_argument(std::string(op) + ": undefined tensor");
  }
}

}  // namespace

// ---- elementwise ------------------------------------------------------------

namespace {

enum class BinKind { Add, Sub, Mul };

Tensor binary_op(BinKind kind, const char* name, const Tensor& a,
                 const Tensor& b, Tape* tape) {
  require_defined(name, a);
  require_defined(name, b);
  const Broadcast bc = resolve_broadcast(name, a.shape(), b.shape());
  const Tensor& big = bc.swapped ? b : a;
  const Tensor& small = bc.swapped ? a : b;
  const std::size_t n = big.size();
  const std::size_t inner = bc.inner;

  std::vector<double> out(n);
  auto bv = big.values();
  auto sv = small.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double x = bc.swapped ? sv[i % inner] : bv[i];
    const double y = bc.swapped ? bv[i] : sv[i % inner];
    switch (kind) {
      case BinKind::Add: out[i] = x + y; break;
      case BinKind::Sub: out[i] = x - y; break;
      case BinKind::Mul: out[i] = x * y; break;
    }
  }
  check_all_finite(out, name);

  const bool track = tracking(tape, a, b);
  Tensor result = make_output(big.shape(), std::move(out), track);
  if (track) {
    Tensor ca = a, cb = b;
    tape->record([kind, ca, cb, result, bc]() mutable {
      auto g = result.grad();
      const std::size_t inner = bc.inner;
      auto accumulate = [&](Tensor& target, bool is_small, double sign,
                            const Tensor* other) {
        if (!target.requires_grad()) return;
        auto tg = target.grad_mut();
        for (std::size_t i = 0; i < g.size(); ++i) {
          double contrib = sign * g[i];
          if (other != nullptr) {
            const bool other_is_small = (other->size() != g.size());
            contrib = g[i] * (other_is_small ? other->values()[i % inner]
                                             : other->values()[i]);
          }
          tg[is_small ? (i % inner) : i] += contrib;
        }
      };
      switch (kind) {
        case BinKind::Add:
          accumulate(ca, ca.size() != g.size(), 1.0, nullptr);
          accumulate(cb, cb.size() != g.size(), 1.0, nullptr);
          break;
        case BinKind::Sub:
          accumulate(ca, ca.size() != g.size(), 1.0, nullptr);
          accumulate(cb, cb.size() != g.size(), -1.0, nullptr);
          break;
        case BinKind::Mul:
          accumulate(ca, ca.size() != g.size(), 1.0, &cb);
          accumulate(cb, cb.size() != g.size(), 1.0, &ca);
          break;
      }
    });
  }
  return result;
}

Tensor unary_op(const char* name, const Tensor& a, Tape* tape,
                const std::function<double(double)>& fwd,
                const std::function<double(double, double)>& dfdx_from_xy) {
  require_defined(name, a);
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(av[i]);
  check_all_finite(out, name);
  const bool track = tracking(tape, a);
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tensor ca = a;
    tape->record([ca, result, dfdx_from_xy]() mutable {
      auto g = result.grad();
      auto y = result.values();
      auto x = ca.values();
      auto tg = ca.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) {
        tg[i] += g[i] * dfdx_from_xy(x[i], y[i]);
      }
    });
  }
  return result;
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b, Tape* tape) {
  return binary_op(BinKind::Add, "add", a, b, tape);
}
Tensor sub(const Tensor& a, const Tensor& b, Tape* tape) {
  return binary_op(BinKind::Sub, "sub", a, b, tape);
}
Tensor mul(const Tensor& a, const Tensor& b, Tape* tape) {
  return binary_op(BinKind::Mul, "mul", a, b, tape);
}

Tensor scale(const Tensor& a, double factor, Tape* tape) {
  if (!std::isfinite(factor)) {
    throw std::domain_error("scale: non-finite factor");
  }
  return unary_op(
      "scale", a, tape, [factor](double x) { return x * factor; },
      [factor](double, double) { return factor; });
}

Tensor sigmoid(const Tensor& a, Tape* tape) {
  return unary_op(
      "sigmoid", a, tape, [](double x) { return stable_sigmoid(x); },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor relu(const Tensor& a, Tape* tape) {
  return unary_op(
      "relu", a, tape, [](double x) { return x > 0.0 ? x : 0.0; },
      [](double x, double) { return x > 0.0 ? 1.0 : 0.0; });
}

Tensor exp(const Tensor& a, Tape* tape) {
  return unary_op(
      "exp", a, tape, [](double x) { return std::exp(x); },
      [](double, double y) { return y; });
}

Tensor log(const Tensor& a, Tape* tape) {
  require_defined("log", a);
  for (double v : a.values()) {
    if (v <= 0.0) throw std::domain_error("log of non-positive value");
  }
  return unary_op(
      "log", a, tape, [](double x) { return std::log(x); },
      [](double x, double) { return 1.0 / x; });
}

// ---- shape ------------------------------------------------------------------

Tensor reshape(const Tensor& a, Shape shape, Tape* tape) {
  require_defined("reshape", a);
  if (shape_numel(shape) != a.size()) {
    fail_shape("reshape", a.shape(), shape);
  }
  std::vector<double> out(a.values().begin(), a.values().end());
  const bool track = tracking(tape, a);
  Tensor result = make_output(std::move(shape), std::move(out), track);
  if (track) {
    Tensor ca = a;
    tape->record([ca, result]() mutable {
      auto g = result.grad();
      auto tg = ca.grad_mut();
      for (std::size_t i = 0; i < g.size(); ++i) tg[i] += g[i];
    });
  }
  return result;
}

Tensor transpose(const Tensor& a, Tape* tape) {
  require_defined("transpose", a);
  if (a.rank() != 2) {
    throw std::invalid_argument("transpose requires a 2-D tensor, got " +
                                shape_str(a.shape()));
  }
  const std::size_t rows = a.shape()[0], cols = a.shape()[1];
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t r = 0; r < rows; ++r) {
    for (std::size_t c = 0; c < cols; ++c) out[c * rows + r] = av[r * cols + c];
  }
  const bool track = tracking(tape, a);
  Tensor result = make_output({cols, rows}, std::move(out), track);
  if (track) {
    Tensor ca = a;
    tape->record([ca, result, rows, cols]() mutable {
      auto g = result.grad();
      auto tg = ca.grad_mut();
      for (std::size_t r = 0; r < rows; ++r) {
        for (std::size_t c = 0; c < cols; ++c) {
          tg[r * cols + c] += g[c * rows + r];
        }
      }
    });
  }
  return result;
}

Tensor gather_rows(const Tensor& a, const std::vector<std::size_t>& rows,
                   Tape* tape) {
  require_defined("gather_rows", a);
  if (a.rank() < 1 || a.rank() > 2) {
    throw std::invalid_argument("gather_rows requires a 1-D or 2-D tensor");
  }
  if (rows.empty()) {
    throw std::invalid_argument("gather_rows with empty index list");
  }
  const std::size_t n = a.shape()[0];
  const std::size_t width = a.rank() == 2 ? a.shape()[1] : 1;
  for (std::size_t r : rows) {
    if (r >= n) throw std::invalid_argument("gather_rows index out of range");
  }
  std::vector<double> out(rows.size() * width);
  auto av = a.values();
  for (std::size_t i = 0; i < rows.size(); ++i) {
    for (std::size_t c = 0; c < width; ++c) {
      out[i * width + c] = av[rows[i] * width + c];
    }
  }
  Shape shape = a.rank() == 2 ? Shape{rows.size(), width} : Shape{rows.size()};
  const bool track = tracking(tape, a);
  Tensor result = make_output(std::move(shape), std::move(out), track);
  if (track) {
    Tensor ca = a;
    std::vector<std::size_t> idx = rows;
    tape->record([ca, result, idx, width]() mutable {
      auto g = result.grad();
      auto tg = ca.grad_mut();
      for (std::size_t i = 0; i < idx.size(); ++i) {
        for (std::size_t c = 0; c < width; ++c) {
          tg[idx[i] * width + c] += g[i * width + c];
        }
      }
    });
  }
  return result;
}

// ---- linear algebra ----------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b, Tape* tape) {
  require_defined("matmul", a);
  require_defined("matmul", b);
  if (a.rank() != 2 || b.rank() != 2 || a.shape()[1] != b.shape()[0]) {
    fail_shape("matmul", a.shape(), b.shape());
  }
  const std::size_t m = a.shape()[0], k = a.shape()[1], n = b.shape()[1];
  std::vector<double> out(m * n, 0.0);
  auto av = a.values();
  auto bv = b.values();
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t p = 0; p < k; ++p) {
      const double x = av[i * k + p];
      const double* brow = &bv[p * n];
      double* orow = &out[i * n];
      for (std::size_t j = 0; j < n; ++j) orow[j] += x * brow[j];
    }
  }
  check_all_finite(out, "matmul");
  const bool track = tracking(tape, a, b);
  Tensor result = make_output({m, n}, std::move(out), track);
  if (track) {
    Tensor ca = a, cb = b;
    tape->record([ca, cb, result, m, k, n]() mutable {
      auto g = result.grad();
      if (ca.requires_grad()) {
        auto tg = ca.grad_mut();
        auto bv2 = cb.values();
        for (std::size_t i = 0; i < m; ++i) {
          for (std::size_t p = 0; p < k; ++p) {
            double acc = 0.0;
            const double* grow = &g[i * n];
            const double* brow = &bv2[p * n];
            for (std::size_t j = 0; j < n; ++j) acc += grow[j] * brow[j];
            tg[i * k + p] += acc;
          }
        }
      }
      if (cb.requires_grad()) {
        auto tg = cb.grad_mut();
        auto av2 = ca.values();
        for (std::size_t p = 0; p < k; ++p) {
          for (std::size_t i = 0; i < m; ++i) {
            const double x = av2[i * k + p];
            const double* grow = &g[i * n];
            double* trow = &tg[p * n];
            for (std::size_t j = 0; j < n; ++j) trow[j] += x * grow[j];
          }
        }
      }
    });
  }
  return result;
}

// ---- normalization / reductions ----------------------------------------------

namespace {

struct AxisSplit {
  std::size_t outer, extent, inner;
};

AxisSplit split_axis(const Shape& shape, std::size_t axis) {
  if (axis >= shape.size()) {
    throw std::invalid_argument("axis " + std::to_string(axis) +
                                " out of range for " + shape_str(shape));
  }
  AxisSplit s{1, shape[axis], 1};
  for (std::size_t i = 0; i < axis; ++i) s.outer *= shape[i];
  for (std::size_t i = axis + 1; i < shape.size(); ++i) s.inner *= shape[i];
  return s;
}

}  // namespace

Tensor softmax(const Tensor& a, std::size_t axis, Tape* tape) {
  require_defined("softmax", a);
  const AxisSplit s = split_axis(a.shape(), axis);
  std::vector<double> out(a.size());
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      const std::size_t base = o * s.extent * s.inner + in;
      double mx = av[base];
      for (std::size_t j = 1; j < s.extent; ++j) {
        mx = std::max(mx, av[base + j * s.inner]);
      }
      double denom = 0.0;
      for (std::size_t j = 0; j < s.extent; ++j) {
        const double e = std::exp(av[base + j * s.inner] - mx);
        out[base + j * s.inner] = e;
        denom += e;
      }
      for (std::size_t j = 0; j < s.extent; ++j) {
        out[base + j * s.inner] /= denom;
      }
    }
  }
  check_all_finite(out, "softmax");
  const bool track = tracking(tape, a);
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tensor ca = a;
    tape->record([ca, result, s]() mutable {
      auto g = result.grad();
      auto y = result.values();
      auto tg = ca.grad_mut();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t base = o * s.extent * s.inner + in;
          double dot = 0.0;
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t ix = base + j * s.inner;
            dot += g[ix] * y[ix];
          }
          for (std::size_t j = 0; j < s.extent; ++j) {
            const std::size_t ix = base + j * s.inner;
            tg[ix] += y[ix] * (g[ix] - dot);
          }
        }
      }
    });
  }
  return result;
}

Tensor layer_norm(const Tensor& a, const Tensor& gain, const Tensor& bias,
                  double eps, Tape* tape) {
  require_defined("layer_norm", a);
  require_defined("layer_norm", gain);
  require_defined("layer_norm", bias);
  if (eps <= 0.0) throw std::invalid_argument("layer_norm: eps must be > 0");
  if (a.rank() < 1) throw std::invalid_argument("layer_norm: rank >= 1");
  const std::size_t width = a.shape().back();
  if (gain.shape() != Shape{width} || bias.shape() != Shape{width}) {
    fail_shape("layer_norm", a.shape(), gain.shape());
  }
  const std::size_t rows = a.size() / width;
  std::vector<double> out(a.size());
  std::vector<double> inv_std(rows), mean(rows);
  auto av = a.values();
  auto gv = gain.values();
  auto bv = bias.values();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = &av[r * width];
    double mu = 0.0;
    for (std::size_t c = 0; c < width; ++c) mu += x[c];
    mu /= static_cast<double>(width);
    double var = 0.0;
    for (std::size_t c = 0; c < width; ++c) var += (x[c] - mu) * (x[c] - mu);
    var /= static_cast<double>(width);
    const double inv = 1.0 / std::sqrt(var + eps);
    mean[r] = mu;
    inv_std[r] = inv;
    for (std::size_t c = 0; c < width; ++c) {
      out[r * width + c] = (x[c] - mu) * inv * gv[c] + bv[c];
    }
  }
  check_all_finite(out, "layer_norm");
  const bool track = tape != nullptr && (a.requires_grad() ||
                                         gain.requires_grad() ||
                                         bias.requires_grad());
  Tensor result = make_output(a.shape(), std::move(out), track);
  if (track) {
    Tensor ca = a, cg = gain, cb = bias;
    tape->record([ca, cg, cb, result, mean, inv_std, width]() mutable {
      auto g = result.grad();
      auto av2 = ca.values();
      auto gv2 = cg.values();
      const std::size_t rows = ca.size() / width;
      const double dw = static_cast<double>(width);
      for (std::size_t r = 0; r < rows; ++r) {
        const double* x = &av2[r * width];
        const double* go = &g[r * width];
        const double mu = mean[r];
        const double inv = inv_std[r];
        double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
        for (std::size_t c = 0; c < width; ++c) {
          const double xhat = (x[c] - mu) * inv;
          const double dxhat = go[c] * gv2[c];
          sum_dxhat += dxhat;
          sum_dxhat_xhat += dxhat * xhat;
          if (cg.requires_grad()) cg.grad_mut()[c] += go[c] * xhat;
          if (cb.requires_grad()) cb.grad_mut()[c] += go[c];
        }
        if (ca.requires_grad()) {
          auto tg = ca.grad_mut();
          for (std::size_t c = 0; c < width; ++c) {
            const double xhat = (x[c] - mu) * inv;
            const double dxhat = go[c] * gv2[c];
            tg[r * width + c] +=
                inv * (dxhat - sum_dxhat / dw - xhat * sum_dxhat_xhat / dw);
          }
        }
      }
    });
  }
  return result;
}

namespace {

Tensor reduce_impl(const char* name, const Tensor& a,
                   std::optional<std::size_t> axis, Tape* tape, bool mean) {
  require_defined(name, a);
  if (!axis.has_value()) {
    const double denom = mean ? static_cast<double>(a.size()) : 1.0;
    double total = 0.0;
    for (double v : a.values()) total += v;
    total /= denom;
    const bool track = tracking(tape, a);
    Tensor result = make_output({1}, {total}, track);
    check_all_finite(result.values(), name);
    if (track) {
      Tensor ca = a;
      tape->record([ca, result, denom]() mutable {
        const double g = result.grad()[0] / denom;
        auto tg = ca.grad_mut();
        for (std::size_t i = 0; i < tg.size(); ++i) tg[i] += g;
      });
    }
    return result;
  }
  const AxisSplit s = split_axis(a.shape(), *axis);
  if (s.extent == 0) throw std::invalid_argument("empty reduction axis");
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != *axis) out_shape.push_back(a.shape()[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  const double denom = mean ? static_cast<double>(s.extent) : 1.0;
  std::vector<double> out(s.outer * s.inner, 0.0);
  auto av = a.values();
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t j = 0; j < s.extent; ++j) {
      for (std::size_t in = 0; in < s.inner; ++in) {
        out[o * s.inner + in] += av[(o * s.extent + j) * s.inner + in];
      }
    }
  }
  for (double& v : out) v /= denom;
  check_all_finite(out, name);
  const bool track = tracking(tape, a);
  Tensor result = make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    Tensor ca = a;
    tape->record([ca, result, s, denom]() mutable {
      auto g = result.grad();
      auto tg = ca.grad_mut();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t j = 0; j < s.extent; ++j) {
          for (std::size_t in = 0; in < s.inner; ++in) {
            tg[(o * s.extent + j) * s.inner + in] +=
                g[o * s.inner + in] / denom;
          }
        }
      }
    });
  }
  return result;
}

}  // namespace

Tensor reduce_sum(const Tensor& a, std::optional<std::size_t> axis,
                  Tape* tape) {
  return reduce_impl("reduce_sum", a, axis, tape, false);
}

Tensor reduce_mean(const Tensor& a, std::optional<std::size_t> axis,
                   Tape* tape) {
  return reduce_impl("reduce_mean", a, axis, tape, true);
}

MaxReduce reduce_max(const Tensor& a, std::optional<std::size_t> axis,
                     Tape* tape) {
  require_defined("reduce_max", a);
  MaxReduce mr;
  auto av = a.values();
  if (!axis.has_value()) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < av.size(); ++i) {
      if (av[i] > av[best]) best = i;
    }
    mr.argmax = {best};
    const bool track = tracking(tape, a);
    mr.values = make_output({1}, {av[best]}, track);
    if (track) {
      Tensor ca = a;
      Tensor res = mr.values;
      tape->record([ca, res, best]() mutable {
        ca.grad_mut()[best] += res.grad()[0];
      });
    }
    return mr;
  }
  const AxisSplit s = split_axis(a.shape(), *axis);
  Shape out_shape;
  for (std::size_t i = 0; i < a.rank(); ++i) {
    if (i != *axis) out_shape.push_back(a.shape()[i]);
  }
  if (out_shape.empty()) out_shape = {1};
  std::vector<double> out(s.outer * s.inner);
  mr.argmax.resize(out.size());
  for (std::size_t o = 0; o < s.outer; ++o) {
    for (std::size_t in = 0; in < s.inner; ++in) {
      std::size_t best = 0;
      double bv = av[(o * s.extent) * s.inner + in];
      for (std::size_t j = 1; j < s.extent; ++j) {
        const double v = av[(o * s.extent + j) * s.inner + in];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[o * s.inner + in] = bv;
      mr.argmax[o * s.inner + in] = best;
    }
  }
  const bool track = tracking(tape, a);
  mr.values = make_output(std::move(out_shape), std::move(out), track);
  if (track) {
    Tensor ca = a;
    Tensor res = mr.values;
    std::vector<std::size_t> idx = mr.argmax;
    tape->record([ca, res, idx, s]() mutable {
      auto g = res.grad();
      auto tg = ca.grad_mut();
      for (std::size_t o = 0; o < s.outer; ++o) {
        for (std::size_t in = 0; in < s.inner; ++in) {
          const std::size_t flat = o * s.inner + in;
          tg[(o * s.extent + idx[flat]) * s.inner + in] += g[flat];
        }
      }
    });
  }
  return mr;
}

// ---- structured ops -----------------------------------------------------------

Tensor conv2d(const Tensor& input, const Tensor& weight, const Tensor& bias,
              std::size_t stride, std::size_t pad, Tape* tape) {
  require_defined("conv2d", input);
  require_defined("conv2d", weight);
  require_defined("conv2d", bias);
  if (input.rank() != 3 || weight.rank() != 4) {
    throw std::invalid_argument("conv2d expects [C,H,W] input and "
                                "[Co,Ci,kh,kw] weight");
  }
  const std::size_t ci = input.shape()[0], h = input.shape()[1],
                    w = input.shape()[2];
  const std::size_t co = weight.shape()[0], kh = weight.shape()[2],
                    kw = weight.shape()[3];
  if (weight.shape()[1] != ci) fail_shape("conv2d", input.shape(), weight.shape());
  if (bias.shape() != Shape{co}) fail_shape("conv2d", weight.shape(), bias.shape());
  if (stride == 0) throw std::invalid_argument("conv2d: stride must be >= 1");
  if (h + 2 * pad < kh || w + 2 * pad < kw) {
    throw std::invalid_argument("conv2d: kernel larger than padded input");
  }
  const std::size_t oh = (h + 2 * pad - kh) / stride + 1;
  const std::size_t ow = (w + 2 * pad - kw) / stride + 1;

  std::vector<double> out(co * oh * ow, 0.0);
  auto xv = input.values();
  auto wv = weight.values();
  auto bv = bias.values();
  for (std::size_t c = 0; c < co; ++c) {
    for (std::size_t oy = 0; oy < oh; ++oy) {
      for (std::size_t ox = 0; ox < ow; ++ox) {
        double acc = bv[c];
        for (std::size_t ic = 0; ic < ci; ++ic) {
          for (std::size_t ky = 0; ky < kh; ++ky) {
            const long iy = static_cast<long>(oy * stride + ky) -
                            static_cast<long>(pad);
            if (iy < 0 || iy >= static_cast<long>(h)) continue;
            for (std::size_t kx = 0; kx < kw; ++kx) {
              const long ix = static_cast<long>(ox * stride + kx) -
                              static_cast<long>(pad);
              if (ix < 0 || ix >= static_cast<long>(w)) continue;
              acc += xv[(ic * h + iy) * w + ix] *
                     wv[((c * ci + ic) * kh + ky) * kw + kx];
            }
          }
        }
        out[(c * oh + oy) * ow + ox] = acc;
      }
    }
  }
  check_all_finite(out, "conv2d");
  const bool track = tape != nullptr &&
                     (input.requires_grad() || weight.requires_grad() ||
                      bias.requires_grad());
  Tensor result = make_output({co, oh, ow}, std::move(out), track);
  if (track) {
    Tensor cx = input, cw = weight, cb = bias;
    tape->record([cx, cw, cb, result, stride, pad, ci, h, w, co, kh, kw, oh,
                  ow]() mutable {
      auto g = result.grad();
      auto xv2 = cx.values();
      auto wv2 = cw.values();
      for (std::size_t c = 0; c < co; ++c) {
        for (std::size_t oy = 0; oy < oh; ++oy) {
          for (std::size_t ox = 0; ox < ow; ++ox) {
            const double go = g[(c * oh + oy) * ow + ox];
            if (cb.requires_grad()) cb.grad_mut()[c] += go;
            for (std::size_t ic = 0; ic < ci; ++ic) {
              for (std::size_t ky = 0; ky < kh; ++ky) {
                const long iy = static_cast<long>(oy * stride + ky) -
                                static_cast<long>(pad);
                if (iy < 0 || iy >= static_cast<long>(h)) continue;
                for (std::size_t kx = 0; kx < kw; ++kx) {
                  const long ix = static_cast<long>(ox * stride + kx) -
                                  static_cast<long>(pad);
                  if (ix < 0 || ix >= static_cast<long>(w)) continue;
                  const std::size_t xi = (ic * h + iy) * w + ix;
                  const std::size_t wi = ((c * ci + ic) * kh + ky) * kw + kx;
                  if (cx.requires_grad()) cx.grad_mut()[xi] += go * wv2[wi];
                  if (cw.requires_grad()) cw.grad_mut()[wi] += go * xv2[xi];
                }
              }
            }
          }
        }
      }
    });
  }
  return result;
}

Tensor to_patch_matrix(const Tensor& chw, Tape* tape) {
  require_defined("to_patch_matrix", chw);
  if (chw.rank() != 3) {
    throw std::invalid_argument("to_patch_matrix expects a [C,h,w] tensor");
  }
  const std::size_t c = chw.shape()[0], h = chw.shape()[1], w = chw.shape()[2];
  std::vector<double> out(chw.size());
  auto xv = chw.values();
  for (std::size_t ch = 0; ch < c; ++ch) {
    for (std::size_t y = 0; y < h; ++y) {
      for (std::size_t x = 0; x < w; ++x) {
        out[(y * w + x) * c + ch] = xv[(ch * h + y) * w + x];
      }
    }
  }
  const bool track = tracking(tape, chw);
  Tensor result = make_output({h * w, c}, std::move(out), track);
  if (track) {
    Tensor cc = chw;
    tape->record([cc, result, c, h, w]() mutable {
      auto g = result.grad();
      auto tg = cc.grad_mut();
      for (std::size_t ch = 0; ch < c; ++ch) {
        for (std::size_t y = 0; y < h; ++y) {
          for (std::size_t x = 0; x < w; ++x) {
            tg[(ch * h + y) * w + x] += g[(y * w + x) * c + ch];
          }
        }
      }
    });
  }
  return result;
}

AttentionResult scaled_dot_attention(const Tensor& q, const Tensor& k,
                                     const Tensor& v, double scale,
                                     bool order_invariant_keys, Tape* tape) {
  require_defined("attention", q);
  require_defined("attention", k);
  require_defined("attention", v);
  if (q.rank() != 2 || k.rank() != 2 || v.rank() != 2 ||
      q.shape()[1] != k.shape()[1] || k.shape()[0] != v.shape()[0]) {
    fail_shape("attention", q.shape(), k.shape());
  }
  const std::size_t nq = q.shape()[0], dh = q.shape()[1];
  const std::size_t nk = k.shape()[0], dv = v.shape()[1];

  auto qv = q.values();
  auto kv = k.values();
  auto vv = v.values();

  std::vector<double> weights(nq * nk);
  std::vector<double> out(nq * dv, 0.0);
  std::vector<double> addends;
  for (std::size_t i = 0; i < nq; ++i) {
    double* wrow = &weights[i * nk];
    for (std::size_t j = 0; j < nk; ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < dh; ++p) s += qv[i * dh + p] * kv[j * dh + p];
      wrow[j] = s * scale;
    }
    double mx = wrow[0];
    for (std::size_t j = 1; j < nk; ++j) mx = std::max(mx, wrow[j]);
    double denom;
    if (order_invariant_keys) {
      addends.resize(nk);
      for (std::size_t j = 0; j < nk; ++j) {
        wrow[j] = std::exp(wrow[j] - mx);
        addends[j] = wrow[j];
      }
      denom = multiset_sum(addends);
    } else {
      denom = 0.0;
      for (std::size_t j = 0; j < nk; ++j) {
        wrow[j] = std::exp(wrow[j] - mx);
        denom += wrow[j];
      }
    }
    for (std::size_t j = 0; j < nk; ++j) wrow[j] /= denom;
    for (std::size_t c = 0; c < dv; ++c) {
      if (order_invariant_keys) {
        addends.resize(nk);
        for (std::size_t j = 0; j < nk; ++j) {
          addends[j] = wrow[j] * vv[j * dv + c];
        }
        out[i * dv + c] = multiset_sum(addends);
      } else {
        double acc = 0.0;
        for (std::size_t j = 0; j < nk; ++j) acc += wrow[j] * vv[j * dv + c];
        out[i * dv + c] = acc;
      }
    }
  }
  check_all_finite(weights, "attention");
  check_all_finite(out, "attention");

  const bool track = tape != nullptr &&
                     (q.requires_grad() || k.requires_grad() ||
                      v.requires_grad());
  AttentionResult res;
  res.output = make_output({nq, dv}, std::move(out), track);
  res.weights = Tensor::from_values({nq, nk}, weights);
  if (track) {
    Tensor cq = q, ck = k, cv = v;
    Tensor output = res.output;
    std::vector<double> w_copy = std::move(weights);
    tape->record([cq, ck, cv, output, w_copy, scale, nq, nk, dh,
                  dv]() mutable {
      auto g = output.grad();
      auto qv2 = cq.values();
      auto kv2 = ck.values();
      auto vv2 = cv.values();
      std::vector<double> dw(nk);
      std::vector<double> ds(nk);
      for (std::size_t i = 0; i < nq; ++i) {
        const double* wrow = &w_copy[i * nk];
        const double* grow = &g[i * dv];
        // dV += W^T * dO, dW = dO * V^T
        double dot = 0.0;
        for (std::size_t j = 0; j < nk; ++j) {
          double acc = 0.0;
          for (std::size_t c = 0; c < dv; ++c) acc += grow[c] * vv2[j * dv + c];
          dw[j] = acc;
          dot += acc * wrow[j];
          if (cv.requires_grad()) {
            auto tv = cv.grad_mut();
            for (std::size_t c = 0; c < dv; ++c) {
              tv[j * dv + c] += wrow[j] * grow[c];
            }
          }
        }
        for (std::size_t j = 0; j < nk; ++j) {
          ds[j] = wrow[j] * (dw[j] - dot);
        }
        for (std::size_t j = 0; j < nk; ++j) {
          const double dsj = ds[j] * scale;
          if (cq.requires_grad()) {
            auto tq = cq.grad_mut();
            for (std::size_t p = 0; p < dh; ++p) {
              tq[i * dh + p] += dsj * kv2[j * dh + p];
            }
          }
          if (ck.requires_grad()) {
            auto tk = ck.grad_mut();
            for (std::size_t p = 0; p < dh; ++p) {
              tk[j * dh + p] += dsj * qv2[i * dh + p];
            }
          }
        }
      }
    });
  }
  return res;
}

Tensor bce_with_logits_mean(const Tensor& logits,
                            const std::vector<double>& targets, Tape* tape) {
  require_defined("bce_with_logits", logits);
  if (logits.rank() != 1 || logits.size() != targets.size()) {
    throw std::invalid_argument("bce_with_logits: logits/targets mismatch");
  }
  const std::size_t n = targets.size();
  if (n == 0) return Tensor::scalar(0.0);
  for (double y : targets) {
    if (y != 0.0 && y != 1.0) {
      throw std::invalid_argument("bce_with_logits: targets must be 0 or 1");
    }
  }
  auto zv = logits.values();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double z = zv[i];
    total += std::max(z, 0.0) - z * targets[i] + std::log1p(std::exp(-std::abs(z)));
  }
  total /= static_cast<double>(n);
  if (!std::isfinite(total)) throw std::domain_error("bce_with_logits: non-finite");
  const bool track = tracking(tape, logits);
  Tensor result = make_output({1}, {total}, track);
  if (track) {
    Tensor cz = logits;
    std::vector<double> y = targets;
    tape->record([cz, result, y, n]() mutable {
      const double g = result.grad()[0] / static_cast<double>(n);
      auto zv2 = cz.values();
      auto tg = cz.grad_mut();
      for (std::size_t i = 0; i < n; ++i) {
        tg[i] += g * (stable_sigmoid(zv2[i]) - y[i]);
      }
    });
  }
  return result;
}

Tensor position_contrast_mean(const Tensor& preds, const Tensor& bank,
                              const std::vector<ContrastEntry>& entries,
                              bool take_log, Tape* tape) {
  require_defined("position_contrast", preds);
  require_defined("position_contrast", bank);
  if (preds.rank() != 2 || bank.rank() != 2 ||
      preds.shape()[1] != bank.shape()[1]) {
    fail_shape("position_contrast", preds.shape(), bank.shape());
  }
  if (entries.empty()) return Tensor::scalar(0.0);
  const std::size_t d = preds.shape()[1];
  const std::size_t bank_rows = bank.shape()[0];
  auto pv = preds.values();
  auto bv = bank.values();

  // Per entry: softmax over {positive, negatives...} of the inner products.
  std::vector<std::vector<double>> probs(entries.size());
  double total = 0.0;
  for (std::size_t e = 0; e < entries.size(); ++e) {
    const ContrastEntry& en = entries[e];
    if (en.row >= preds.shape()[0] || en.positive >= bank_rows) {
      throw std::invalid_argument("position_contrast: index out of range");
    }
    std::vector<double> z(1 + en.negatives.size());
    auto dot_bank = [&](std::size_t bank_row) {
      double acc = 0.0;
      const double* p = &pv[en.row * d];
      const double* b = &bv[bank_row * d];
      for (std::size_t c = 0; c < d; ++c) acc += p[c] * b[c];
      return acc;
    };
    z[0] = dot_bank(en.positive);
    for (std::size_t u = 0; u < en.negatives.size(); ++u) {
      if (en.negatives[u] >= bank_rows) {
        throw std::invalid_argument("position_contrast: index out of range");
      }
      z[1 + u] = dot_bank(en.negatives[u]);
    }
    double mx = z[0];
    for (double x : z) mx = std::max(mx, x);
    double denom = 0.0;
    std::vector<double>& s = probs[e];
    s.resize(z.size());
    for (std::size_t j = 0; j < z.size(); ++j) {
      s[j] = std::exp(z[j] - mx);
      denom += s[j];
    }
    for (double& x : s) x /= denom;
    total += take_log ? -std::log(s[0]) : -s[0];
  }
  total /= static_cast<double>(entries.size());
  if (!std::isfinite(total)) {
    throw std::domain_error("position_contrast: non-finite");
  }
  const bool track = tracking(tape, preds);
  Tensor result = make_output({1}, {total}, track);
  if (track) {
    Tensor cp = preds;
    Tensor cbk = bank;
    std::vector<ContrastEntry> ents = entries;
    tape->record([cp, cbk, ents, probs, take_log, result, d]() mutable {
      const double g = result.grad()[0] / static_cast<double>(ents.size());
      auto bv2 = cbk.values();
      auto tg = cp.grad_mut();
      for (std::size_t e = 0; e < ents.size(); ++e) {
        const ContrastEntry& en = ents[e];
        const std::vector<double>& s = probs[e];
        for (std::size_t j = 0; j < s.size(); ++j) {
          // d(-log s0)/dz_j = s_j - [j==0]; d(-s0)/dz_j = -s0*([j==0] - s_j)
          const double dz =
              take_log ? (s[j] - (j == 0 ? 1.0 : 0.0))
                       : (-s[0] * ((j == 0 ? 1.0 : 0.0) - s[j]));
          const std::size_t bank_row = j == 0 ? en.positive : en.negatives[j - 1];
          const double* b = &bv2[bank_row * d];
          double* prow = &tg[en.row * d];
          const double coef = g * dz;
          for (std::size_t c = 0; c < d; ++c) prow[c] += coef * b[c];
        }
      }
    });
  }
  return result;
}

// ---- verification --------------------------------------------------------------

double finite_diff_check(
    const std::function<Tensor(Tape&, const Tensor&)>& f, const Tensor& x,
    double eps) {
  if (eps <= 0.0) throw std::invalid_argument("finite_diff_check: eps <= 0");
  std::vector<double> base(x.values().begin(), x.values().end());
  Tensor probe = Tensor::from_values(x.shape(), base, true);
  Tape tape;
  Tensor loss = f(tape, probe);
  tape.backward(loss);
  std::vector<double> analytic(probe.grad().begin(), probe.grad().end());

  auto eval = [&](const std::vector<double>& vals) {
    Tensor t = Tensor::from_values(x.shape(), vals, false);
    Tape scratch;
    return f(scratch, t).item();
  };

  double max_rel = 0.0;
  std::vector<double> work = base;
  for (std::size_t i = 0; i < base.size(); ++i) {
    work[i] = base[i] + eps;
    const double hi = eval(work);
    work[i] = base[i] - eps;
    const double lo = eval(work);
    work[i] = base[i];
    const double central = (hi - lo) / (2.0 * eps);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - central) / denom);
  }
  return max_rel;
}

double param_finite_diff_check(Tensor param,
                               const std::function<Tensor(Tape*)>& build_loss,
                               double eps) {
  if (!param.requires_grad()) {
    throw std::invalid_argument("param_finite_diff_check: not a parameter");
  }
  param.zero_grad();
  Tape tape;
  Tensor loss = build_loss(&tape);
  tape.backward(loss);
  std::vector<double> analytic(param.grad().begin(), param.grad().end());
  param.zero_grad();

  auto vals = param.values_mut();
  double max_rel = 0.0;
  for (std::size_t i = 0; i < vals.size(); ++i) {
    const double orig = vals[i];
    vals[i] = orig + eps;
    const double hi = build_loss(nullptr).item();
    vals[i] = orig - eps;
    const double lo = build_loss(nullptr).item();
    vals[i] = orig;
    const double central = (hi - lo) / (2.0 * eps);
    const double denom =
        std::max({std::abs(analytic[i]), std::abs(central), 1e-8});
    max_rel = std::max(max_rel, std::abs(analytic[i] - central) / denom);
  }
  return max_rel;
}

}  // namespace kvla
