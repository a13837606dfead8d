#include "spikesr/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>
#include <numbers>
#include <numeric>

namespace spikesr::ops {

using detail::Node;

namespace {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

void strict(std::initializer_list<const Tensor*> ts, const char* op) {
  if (!strict_mode()) return;
  for (const Tensor* t : ts) detail::check_finite(*t, op);
}

bool wants(const Node& out, std::size_t i) {
  return i < out.parents.size() && out.parents[i] && out.parents[i]->requires_grad;
}

std::vector<double>& pgrad(Node& out, std::size_t i) {
  out.parents[i]->ensure_grad();
  return out.parents[i]->grad;
}

const std::vector<double>& pdata(const Node& out, std::size_t i) { return out.parents[i]->data; }

[[noreturn]] void shape_fail(const char* op, const Shape& a, const Shape& b) {
  throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
}

Shape broadcast_shape(const Shape& a, const Shape& b, const char* op) {
  const std::size_t r = std::max(a.size(), b.size());
  Shape out(r);
  for (std::size_t i = 0; i < r; ++i) {
    const std::int64_t ea = i < r - a.size() ? 1 : a[i - (r - a.size())];
    const std::int64_t eb = i < r - b.size() ? 1 : b[i - (r - b.size())];
    if (ea != eb && ea != 1 && eb != 1) shape_fail(op, a, b);
    out[i] = std::max(ea, eb);
  }
  return out;
}

// For every flat index of `out`, the flat offset into a tensor of shape `in`
// that broadcasts to `out`. Also serves as the reduction map for sums.
std::vector<std::int64_t> broadcast_offsets(const Shape& out, const Shape& in) {
  const std::size_t r = out.size();
  std::vector<std::int64_t> stride(r, 0);
  std::int64_t s = 1;
  for (std::size_t k = 0; k < in.size(); ++k) {
    const std::size_t i = in.size() - 1 - k;
    const std::size_t o = r - 1 - k;
    stride[o] = in[i] == 1 ? 0 : s;
    s *= in[i];
  }
  const std::int64_t n = shape_numel(out);
  std::vector<std::int64_t> offs(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(r, 0);
  std::int64_t cur = 0;
  for (std::int64_t f = 0; f < n; ++f) {
    offs[static_cast<std::size_t>(f)] = cur;
    for (std::size_t k = r; k-- > 0;) {
      if (++idx[k] < out[k]) {
        cur += stride[k];
        break;
      }
      cur -= stride[k] * (out[k] - 1);
      idx[k] = 0;
    }
  }
  return offs;
}

template <class F, class DA, class DB>
Tensor binary_op(const Tensor& a, const Tensor& b, const char* name, F f, DA da, DB db) {
  strict({&a, &b}, name);
  const auto& x = a.values();
  const auto& y = b.values();
  if (a.shape() == b.shape()) {
    std::vector<double> out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i], y[i]);
    return detail::make_result(a.shape(), std::move(out), name, {a, b}, [da, db](Node& o) {
      const auto& xv = pdata(o, 0);
      const auto& yv = pdata(o, 1);
      if (wants(o, 0)) {
        auto& g = pgrad(o, 0);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * da(xv[i], yv[i], o.data[i]);
      }
      if (wants(o, 1)) {
        auto& g = pgrad(o, 1);
        for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * db(xv[i], yv[i], o.data[i]);
      }
    });
  }
  Shape os = broadcast_shape(a.shape(), b.shape(), name);
  auto oa = broadcast_offsets(os, a.shape());
  auto ob = broadcast_offsets(os, b.shape());
  std::vector<double> out(oa.size());
  for (std::size_t i = 0; i < out.size(); ++i)
    out[i] = f(x[static_cast<std::size_t>(oa[i])], y[static_cast<std::size_t>(ob[i])]);
  Shape as = a.shape(), bs = b.shape();
  return detail::make_result(os, std::move(out), name, {a, b}, [da, db, os, as, bs](Node& o) {
    auto oa2 = broadcast_offsets(os, as);
    auto ob2 = broadcast_offsets(os, bs);
    const auto& xv = pdata(o, 0);
    const auto& yv = pdata(o, 1);
    const bool wa = wants(o, 0), wb = wants(o, 1);
    std::vector<double>* ga = wa ? &pgrad(o, 0) : nullptr;
    std::vector<double>* gb = wb ? &pgrad(o, 1) : nullptr;
    for (std::size_t i = 0; i < o.grad.size(); ++i) {
      const auto ia = static_cast<std::size_t>(oa2[i]);
      const auto ib = static_cast<std::size_t>(ob2[i]);
      if (wa) (*ga)[ia] += o.grad[i] * da(xv[ia], yv[ib], o.data[i]);
      if (wb) (*gb)[ib] += o.grad[i] * db(xv[ia], yv[ib], o.data[i]);
    }
  });
}

// d(x, y) is the derivative given input x and output y.
template <class F, class D>
Tensor unary_op(const Tensor& a, const char* name, F f, D d) {
  strict({&a}, name);
  const auto& x = a.values();
  std::vector<double> out(x.size());
  for (std::size_t i = 0; i < x.size(); ++i) out[i] = f(x[i]);
  return detail::make_result(a.shape(), std::move(out), name, {a}, [d](Node& o) {
    if (!wants(o, 0)) return;
    const auto& xv = pdata(o, 0);
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i] * d(xv[i], o.data[i]);
  });
}

std::int64_t reflect_index(std::int64_t i, std::int64_t n) {
  if (n == 1) return 0;
  const std::int64_t period = 2 * (n - 1);
  i %= period;
  if (i < 0) i += period;
  return i < n ? i : period - i;
}

int norm_axis(int axis, int rank) {
  if (axis < 0) axis += rank;
  if (axis < 0 || axis >= rank) throw ShapeError("axis out of range");
  return axis;
}

void require_rank(const Tensor& t, int r, const char* op) {
  if (t.rank() != r)
    throw ShapeError(std::string(op) + ": expected rank " + std::to_string(r) + ", got " + shape_str(t.shape()));
}

}  // namespace

// ---------------------------------------------------------------------------
// Elementwise

Tensor add(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Tensor sub(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Tensor mul(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Tensor div(const Tensor& a, const Tensor& b) {
  return binary_op(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double x, double y, double) { return -x / (y * y); });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary_op(a, "add_scalar", [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor mul_scalar(const Tensor& a, double c) {
  return unary_op(a, "mul_scalar", [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor rsub_scalar(double c, const Tensor& a) {
  return unary_op(a, "rsub_scalar", [c](double x) { return c - x; }, [](double, double) { return -1.0; });
}

Tensor neg(const Tensor& a) { return mul_scalar(a, -1.0); }

Tensor exp(const Tensor& a) {
  return unary_op(a, "exp", [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor log(const Tensor& a) {
  return unary_op(a, "log", [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Tensor sqrt(const Tensor& a) {
  return unary_op(a, "sqrt", [](double x) { return std::sqrt(x); }, [](double, double y) { return 0.5 / y; });
}

Tensor square(const Tensor& a) {
  return unary_op(a, "square", [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Tensor abs(const Tensor& a) {
  return unary_op(
      a, "abs", [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Tensor sigmoid(const Tensor& a) {
  return unary_op(
      a, "sigmoid",
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Tensor gelu(const Tensor& a) {
  // Exact (erf) form.
  constexpr double inv_sqrt2 = 0.70710678118654752440;
  const double inv_sqrt_2pi = 1.0 / std::sqrt(2.0 * std::numbers::pi);
  return unary_op(
      a, "gelu", [](double x) { return 0.5 * x * (1.0 + std::erf(x * inv_sqrt2)); },
      [inv_sqrt_2pi](double x, double) {
        return 0.5 * (1.0 + std::erf(x * inv_sqrt2)) + x * inv_sqrt_2pi * std::exp(-0.5 * x * x);
      });
}

Tensor clamp(const Tensor& a, double lo, double hi) {
  return unary_op(
      a, "clamp", [lo, hi](double x) { return std::clamp(x, lo, hi); },
      [lo, hi](double x, double) { return (x >= lo && x <= hi) ? 1.0 : 0.0; });
}

Tensor spike(const Tensor& a, double width, bool relaxed) {
  const double k = std::numbers::pi * width / 2.0;
  auto surrogate = [width, k](double x, double) {
    const double z = k * x;
    return width / (2.0 * (1.0 + z * z));
  };
  if (relaxed) {
    return unary_op(
        a, "spike_relaxed", [k](double x) { return std::atan(k * x) / std::numbers::pi + 0.5; }, surrogate);
  }
  return unary_op(a, "spike", [](double x) { return x >= 0.0 ? 1.0 : 0.0; }, surrogate);
}

Tensor straight_through(const Tensor& hard, const Tensor& soft) {
  if (hard.shape() != soft.shape()) shape_fail("straight_through", hard.shape(), soft.shape());
  strict({&hard, &soft}, "straight_through");
  return detail::make_result(hard.shape(), hard.values(), "straight_through", {soft}, [](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor masked_fill(const Tensor& a, const std::vector<std::uint8_t>& mask, double value) {
  if (static_cast<std::int64_t>(mask.size()) != a.numel())
    throw ShapeError("masked_fill: mask size does not match " + shape_str(a.shape()));
  strict({&a}, "masked_fill");
  std::vector<double> out = a.values();
  for (std::size_t i = 0; i < out.size(); ++i)
    if (mask[i]) out[i] = value;
  return detail::make_result(a.shape(), std::move(out), "masked_fill", {a}, [mask](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i)
      if (!mask[i]) g[i] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Reductions

Tensor sum(const Tensor& a) {
  strict({&a}, "sum");
  double s = 0.0;
  for (double v : a.data()) s += v;
  return detail::make_result({}, {s}, "sum", {a}, [](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (double& v : g) v += o.grad[0];
  });
}

Tensor mean(const Tensor& a) {
  if (a.numel() == 0) throw ShapeError("mean of empty tensor");
  return mul_scalar(sum(a), 1.0 / static_cast<double>(a.numel()));
}

Tensor sum_axes(const Tensor& a, std::vector<int> axes, bool keepdim) {
  strict({&a}, "sum_axes");
  Shape kshape = a.shape();
  for (int& ax : axes) {
    ax = norm_axis(ax, a.rank());
    if (a.shape()[static_cast<std::size_t>(ax)] == 0) throw ShapeError("sum_axes: empty reduction axis");
    kshape[static_cast<std::size_t>(ax)] = 1;
  }
  auto offs = broadcast_offsets(a.shape(), kshape);
  std::vector<double> out(static_cast<std::size_t>(shape_numel(kshape)), 0.0);
  const auto& x = a.values();
  for (std::size_t i = 0; i < x.size(); ++i) out[static_cast<std::size_t>(offs[i])] += x[i];
  Shape oshape;
  if (keepdim) {
    oshape = kshape;
  } else {
    for (std::size_t i = 0; i < kshape.size(); ++i)
      if (std::find(axes.begin(), axes.end(), static_cast<int>(i)) == axes.end()) oshape.push_back(kshape[i]);
  }
  Shape ashape = a.shape();
  return detail::make_result(oshape, std::move(out), "sum_axes", {a}, [ashape, kshape](Node& o) {
    if (!wants(o, 0)) return;
    auto offs2 = broadcast_offsets(ashape, kshape);
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[static_cast<std::size_t>(offs2[i])];
  });
}

Tensor mean_axes(const Tensor& a, std::vector<int> axes, bool keepdim) {
  std::int64_t count = 1;
  for (int ax : axes) count *= a.dim(ax);
  if (count == 0) throw ShapeError("mean_axes: empty reduction axis");
  return mul_scalar(sum_axes(a, std::move(axes), keepdim), 1.0 / static_cast<double>(count));
}

// ---------------------------------------------------------------------------
// Structural

Tensor reshape(const Tensor& a, Shape shape) {
  std::int64_t infer = -1, known = 1;
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (shape[i] == -1) {
      if (infer >= 0) throw ShapeError("reshape: more than one inferred extent");
      infer = static_cast<std::int64_t>(i);
    } else {
      known *= shape[i];
    }
  }
  if (infer >= 0) {
    if (known == 0 || a.numel() % known) shape_fail("reshape", a.shape(), shape);
    shape[static_cast<std::size_t>(infer)] = a.numel() / known;
  }
  if (shape_numel(shape) != a.numel()) shape_fail("reshape", a.shape(), shape);
  return detail::make_result(shape, a.values(), "reshape", {a}, [](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < g.size(); ++i) g[i] += o.grad[i];
  });
}

Tensor permute(const Tensor& a, std::vector<int> order) {
  const int r = a.rank();
  if (static_cast<int>(order.size()) != r) throw ShapeError("permute: order rank mismatch");
  std::vector<std::int64_t> in_stride(static_cast<std::size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i)
    in_stride[static_cast<std::size_t>(i)] =
        in_stride[static_cast<std::size_t>(i + 1)] * a.shape()[static_cast<std::size_t>(i + 1)];
  Shape oshape(static_cast<std::size_t>(r));
  std::vector<std::int64_t> stride(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) {
    const int src = norm_axis(order[static_cast<std::size_t>(i)], r);
    oshape[static_cast<std::size_t>(i)] = a.shape()[static_cast<std::size_t>(src)];
    stride[static_cast<std::size_t>(i)] = in_stride[static_cast<std::size_t>(src)];
  }
  const std::int64_t n = a.numel();
  auto map = std::make_shared<std::vector<std::int64_t>>(static_cast<std::size_t>(n));
  std::vector<std::int64_t> idx(static_cast<std::size_t>(r), 0);
  std::int64_t cur = 0;
  for (std::int64_t f = 0; f < n; ++f) {
    (*map)[static_cast<std::size_t>(f)] = cur;
    for (int k = r - 1; k >= 0; --k) {
      const auto ku = static_cast<std::size_t>(k);
      if (++idx[ku] < oshape[ku]) {
        cur += stride[ku];
        break;
      }
      cur -= stride[ku] * (oshape[ku] - 1);
      idx[ku] = 0;
    }
  }
  std::vector<double> out(static_cast<std::size_t>(n));
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[static_cast<std::size_t>((*map)[i])];
  return detail::make_result(oshape, std::move(out), "permute", {a}, [map](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[static_cast<std::size_t>((*map)[i])] += o.grad[i];
  });
}

Tensor narrow(const Tensor& a, int axis, std::int64_t start, std::int64_t length) {
  axis = norm_axis(axis, a.rank());
  const auto& s = a.shape();
  if (start < 0 || length < 0 || start + length > s[static_cast<std::size_t>(axis)])
    throw ShapeError("narrow: range out of bounds for " + shape_str(s));
  std::int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= s[static_cast<std::size_t>(i)];
  for (std::size_t i = static_cast<std::size_t>(axis) + 1; i < s.size(); ++i) inner *= s[i];
  const std::int64_t full = s[static_cast<std::size_t>(axis)];
  Shape os = s;
  os[static_cast<std::size_t>(axis)] = length;
  std::vector<double> out(static_cast<std::size_t>(outer * length * inner));
  const auto& x = a.values();
  for (std::int64_t o = 0; o < outer; ++o)
    std::copy_n(x.begin() + (o * full + start) * inner, length * inner, out.begin() + o * length * inner);
  return detail::make_result(os, std::move(out), "narrow", {a}, [=](Node& nd) {
    if (!wants(nd, 0)) return;
    auto& g = pgrad(nd, 0);
    for (std::int64_t o = 0; o < outer; ++o)
      for (std::int64_t i = 0; i < length * inner; ++i)
        g[static_cast<std::size_t>((o * full + start) * inner + i)] +=
            nd.grad[static_cast<std::size_t>(o * length * inner + i)];
  });
}

Tensor concat(const std::vector<Tensor>& parts, int axis) {
  if (parts.empty()) throw ShapeError("concat of no tensors");
  const Shape& s0 = parts[0].shape();
  axis = norm_axis(axis, static_cast<int>(s0.size()));
  const auto au = static_cast<std::size_t>(axis);
  Shape os = s0;
  os[au] = 0;
  std::vector<std::int64_t> extents;
  for (const auto& p : parts) {
    const Shape& s = p.shape();
    if (s.size() != s0.size()) shape_fail("concat", s0, s);
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != au && s[i] != s0[i]) shape_fail("concat", s0, s);
    strict({&p}, "concat");
    extents.push_back(s[au]);
    os[au] += s[au];
  }
  std::int64_t outer = 1, inner = 1;
  for (std::size_t i = 0; i < au; ++i) outer *= s0[i];
  for (std::size_t i = au + 1; i < s0.size(); ++i) inner *= s0[i];
  const std::int64_t total = os[au];
  std::vector<double> out(static_cast<std::size_t>(shape_numel(os)));
  std::int64_t base = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const auto& x = parts[k].values();
    const std::int64_t e = extents[k];
    for (std::int64_t o = 0; o < outer; ++o)
      std::copy_n(x.begin() + o * e * inner, e * inner, out.begin() + (o * total + base) * inner);
    base += e;
  }
  return detail::make_result(os, std::move(out), "concat", parts, [=](Node& nd) {
    std::int64_t b = 0;
    for (std::size_t k = 0; k < extents.size(); ++k) {
      const std::int64_t e = extents[k];
      if (wants(nd, k)) {
        auto& g = pgrad(nd, k);
        for (std::int64_t o = 0; o < outer; ++o)
          for (std::int64_t i = 0; i < e * inner; ++i)
            g[static_cast<std::size_t>(o * e * inner + i)] += nd.grad[static_cast<std::size_t>((o * total + b) * inner + i)];
      }
      b += e;
    }
  });
}

Tensor expand(const Tensor& a, Shape shape) {
  Shape bs = broadcast_shape(a.shape(), shape, "expand");
  if (bs != shape) shape_fail("expand", a.shape(), shape);
  if (a.shape() == shape) return a;
  auto offs = broadcast_offsets(shape, a.shape());
  std::vector<double> out(offs.size());
  const auto& x = a.values();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = x[static_cast<std::size_t>(offs[i])];
  Shape as = a.shape();
  return detail::make_result(shape, std::move(out), "expand", {a}, [shape, as](Node& o) {
    if (!wants(o, 0)) return;
    auto offs2 = broadcast_offsets(shape, as);
    auto& g = pgrad(o, 0);
    for (std::size_t i = 0; i < o.grad.size(); ++i) g[static_cast<std::size_t>(offs2[i])] += o.grad[i];
  });
}

// ---------------------------------------------------------------------------
// Linear algebra

Tensor matmul(const Tensor& a, const Tensor& b) {
  require_rank(a, 2, "matmul");
  require_rank(b, 2, "matmul");
  const auto m = a.dim(0), k = a.dim(1), n = b.dim(1);
  if (b.dim(0) != k) shape_fail("matmul", a.shape(), b.shape());
  strict({&a, &b}, "matmul");
  std::vector<double> out(static_cast<std::size_t>(m * n));
  MapMat(out.data(), m, n).noalias() = CMapMat(a.values().data(), m, k) * CMapMat(b.values().data(), k, n);
  add_macs(static_cast<std::uint64_t>(m * k * n));
  return detail::make_result({m, n}, std::move(out), "matmul", {a, b}, [m, k, n](Node& o) {
    CMapMat g(o.grad.data(), m, n);
    if (wants(o, 0)) MapMat(pgrad(o, 0).data(), m, k).noalias() += g * CMapMat(pdata(o, 1).data(), k, n).transpose();
    if (wants(o, 1)) MapMat(pgrad(o, 1).data(), k, n).noalias() += CMapMat(pdata(o, 0).data(), m, k).transpose() * g;
  });
}

Tensor bmm(const Tensor& a, const Tensor& b) {
  require_rank(a, 3, "bmm");
  require_rank(b, 3, "bmm");
  const auto bs = a.dim(0), m = a.dim(1), k = a.dim(2), n = b.dim(2);
  if (b.dim(0) != bs || b.dim(1) != k) shape_fail("bmm", a.shape(), b.shape());
  strict({&a, &b}, "bmm");
  std::vector<double> out(static_cast<std::size_t>(bs * m * n));
  for (std::int64_t i = 0; i < bs; ++i)
    MapMat(out.data() + i * m * n, m, n).noalias() =
        CMapMat(a.values().data() + i * m * k, m, k) * CMapMat(b.values().data() + i * k * n, k, n);
  add_macs(static_cast<std::uint64_t>(bs * m * k * n));
  return detail::make_result({bs, m, n}, std::move(out), "bmm", {a, b}, [bs, m, k, n](Node& o) {
    for (std::int64_t i = 0; i < bs; ++i) {
      CMapMat g(o.grad.data() + i * m * n, m, n);
      if (wants(o, 0))
        MapMat(pgrad(o, 0).data() + i * m * k, m, k).noalias() +=
            g * CMapMat(pdata(o, 1).data() + i * k * n, k, n).transpose();
      if (wants(o, 1))
        MapMat(pgrad(o, 1).data() + i * k * n, k, n).noalias() +=
            CMapMat(pdata(o, 0).data() + i * m * k, m, k).transpose() * g;
    }
  });
}

Tensor transpose_last2(const Tensor& a) {
  std::vector<int> order(static_cast<std::size_t>(a.rank()));
  std::iota(order.begin(), order.end(), 0);
  if (a.rank() < 2) throw ShapeError("transpose_last2 needs rank >= 2");
  std::swap(order[order.size() - 1], order[order.size() - 2]);
  return permute(a, order);
}

Tensor softmax_lastdim(const Tensor& a) {
  if (a.rank() < 1 || a.dim(-1) == 0) throw ShapeError("softmax over empty axis");
  strict({&a}, "softmax");
  const auto n = a.dim(-1);
  const auto rows = a.numel() / n;
  const auto& x = a.values();
  std::vector<double> out(x.size());
  for (std::int64_t r = 0; r < rows; ++r) {
    const double* xr = x.data() + r * n;
    double* yr = out.data() + r * n;
    const double mx = *std::max_element(xr, xr + n);
    double s = 0.0;
    for (std::int64_t j = 0; j < n; ++j) s += (yr[j] = std::exp(xr[j] - mx));
    for (std::int64_t j = 0; j < n; ++j) yr[j] /= s;
  }
  return detail::make_result(a.shape(), std::move(out), "softmax", {a}, [rows, n](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::int64_t r = 0; r < rows; ++r) {
      const double* y = o.data.data() + r * n;
      const double* gy = o.grad.data() + r * n;
      double dot = 0.0;
      for (std::int64_t j = 0; j < n; ++j) dot += gy[j] * y[j];
      for (std::int64_t j = 0; j < n; ++j) g[static_cast<std::size_t>(r * n + j)] += y[j] * (gy[j] - dot);
    }
  });
}

// ---------------------------------------------------------------------------
// Convolution

namespace {

struct ConvGeom {
  std::int64_t n, cin, h, w, cout, kh, kw, ho, wo;
  int stride, pad;
  PadMode mode;
  std::int64_t K() const { return cin * kh * kw; }
  std::int64_t P() const { return ho * wo; }
  bool pointwise() const { return kh == 1 && kw == 1 && stride == 1 && pad == 0; }
};

// Source index of an input tap, or -1 for zero padding.
std::int64_t tap_index(std::int64_t i, std::int64_t n, PadMode mode) {
  if (i >= 0 && i < n) return i;
  if (mode == PadMode::zero) return -1;
  return reflect_index(i, n);
}

void im2col(const ConvGeom& g, const double* x, double* cols) {
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ki = 0; ki < g.kh; ++ki)
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.P();
        const double* xc = x + c * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = tap_index(oy * g.stride - g.pad + ki, g.h, g.mode);
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = tap_index(ox * g.stride - g.pad + kj, g.w, g.mode);
            row[oy * g.wo + ox] = (iy < 0 || ix < 0) ? 0.0 : xc[iy * g.w + ix];
          }
        }
      }
}

void col2im(const ConvGeom& g, const double* cols, double* dx) {
  for (std::int64_t c = 0; c < g.cin; ++c)
    for (std::int64_t ki = 0; ki < g.kh; ++ki)
      for (std::int64_t kj = 0; kj < g.kw; ++kj) {
        const double* row = cols + ((c * g.kh + ki) * g.kw + kj) * g.P();
        double* dc = dx + c * g.h * g.w;
        for (std::int64_t oy = 0; oy < g.ho; ++oy) {
          const std::int64_t iy = tap_index(oy * g.stride - g.pad + ki, g.h, g.mode);
          if (iy < 0) continue;
          for (std::int64_t ox = 0; ox < g.wo; ++ox) {
            const std::int64_t ix = tap_index(ox * g.stride - g.pad + kj, g.w, g.mode);
            if (ix >= 0) dc[iy * g.w + ix] += row[oy * g.wo + ox];
          }
        }
      }
}

}  // namespace

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad, PadMode mode) {
  require_rank(x, 4, "conv2d");
  require_rank(w, 4, "conv2d");
  ConvGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3), 0, 0, stride, pad, mode};
  if (w.dim(1) != g.cin)
    throw ShapeError("conv2d: channel mismatch, input " + shape_str(x.shape()) + " vs weight " + shape_str(w.shape()));
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("conv2d: kernel extent must be odd, got " + shape_str(w.shape()));
  if (stride < 1 || pad < 0) throw ShapeError("conv2d: invalid stride/pad");
  if (b.defined() && (b.rank() != 1 || b.dim(0) != g.cout))
    throw ShapeError("conv2d: bias shape " + shape_str(b.shape()) + " vs weight " + shape_str(w.shape()));
  g.ho = (g.h + 2 * pad - g.kh) / stride + 1;
  g.wo = (g.w + 2 * pad - g.kw) / stride + 1;
  if (g.ho < 1 || g.wo < 1) throw ShapeError("conv2d: empty output for input " + shape_str(x.shape()));
  strict({&x, &w, &b}, "conv2d");

  const auto K = g.K(), P = g.P();
  std::vector<double> out(static_cast<std::size_t>(g.n * g.cout * P));
  std::vector<double> cols(g.pointwise() ? 0 : static_cast<std::size_t>(K * P));
  CMapMat W(w.values().data(), g.cout, K);
  for (std::int64_t i = 0; i < g.n; ++i) {
    const double* xi = x.values().data() + i * g.cin * g.h * g.w;
    const double* ci = xi;
    if (!g.pointwise()) {
      im2col(g, xi, cols.data());
      ci = cols.data();
    }
    MapMat O(out.data() + i * g.cout * P, g.cout, P);
    O.noalias() = W * CMapMat(ci, K, P);
    if (b.defined())
      for (std::int64_t c = 0; c < g.cout; ++c) O.row(c).array() += b.values()[static_cast<std::size_t>(c)];
  }
  add_macs(static_cast<std::uint64_t>(g.n * g.cout * K * P));

  return detail::make_result({g.n, g.cout, g.ho, g.wo}, std::move(out), "conv2d", {x, w, b}, [g](Node& o) {
    const auto K = g.K(), P = g.P();
    const auto& xv = pdata(o, 0);
    const auto& wv = pdata(o, 1);
    const bool wx = wants(o, 0), ww = wants(o, 1), wb = wants(o, 2);
    std::vector<double> cols(static_cast<std::size_t>(K * P));
    CMapMat W(wv.data(), g.cout, K);
    for (std::int64_t i = 0; i < g.n; ++i) {
      CMapMat G(o.grad.data() + i * g.cout * P, g.cout, P);
      const double* xi = xv.data() + i * g.cin * g.h * g.w;
      if (ww) {
        const double* ci = xi;
        if (!g.pointwise()) {
          im2col(g, xi, cols.data());
          ci = cols.data();
        }
        MapMat(pgrad(o, 1).data(), g.cout, K).noalias() += G * CMapMat(ci, K, P).transpose();
      }
      if (wb) {
        auto& gb = pgrad(o, 2);
        for (std::int64_t c = 0; c < g.cout; ++c) gb[static_cast<std::size_t>(c)] += G.row(c).sum();
      }
      if (wx) {
        double* dxi = pgrad(o, 0).data() + i * g.cin * g.h * g.w;
        if (g.pointwise()) {
          MapMat(dxi, K, P).noalias() += W.transpose() * G;
        } else {
          MapMat(cols.data(), K, P).noalias() = W.transpose() * G;
          col2im(g, cols.data(), dxi);
        }
      }
    }
  });
}

Tensor pad_to(const Tensor& x, std::int64_t h, std::int64_t w) {
  require_rank(x, 4, "pad_to");
  const auto n = x.dim(0), c = x.dim(1), ih = x.dim(2), iw = x.dim(3);
  if (h < ih || w < iw) throw ShapeError("pad_to: target smaller than input " + shape_str(x.shape()));
  if (h == ih && w == iw) return x;
  std::vector<std::int64_t> map(static_cast<std::size_t>(h * w));
  for (std::int64_t y = 0; y < h; ++y)
    for (std::int64_t xx = 0; xx < w; ++xx) map[static_cast<std::size_t>(y * w + xx)] = reflect_index(y, ih) * iw + reflect_index(xx, iw);
  std::vector<double> out(static_cast<std::size_t>(n * c * h * w));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < n * c; ++p)
    for (std::int64_t q = 0; q < h * w; ++q)
      out[static_cast<std::size_t>(p * h * w + q)] = xv[static_cast<std::size_t>(p * ih * iw + map[static_cast<std::size_t>(q)])];
  return detail::make_result({n, c, h, w}, std::move(out), "pad_to", {x}, [=](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::int64_t p = 0; p < n * c; ++p)
      for (std::int64_t q = 0; q < h * w; ++q)
        g[static_cast<std::size_t>(p * ih * iw + map[static_cast<std::size_t>(q)])] += o.grad[static_cast<std::size_t>(p * h * w + q)];
  });
}

Tensor crop(const Tensor& x, std::int64_t h, std::int64_t w) {
  require_rank(x, 4, "crop");
  if (h == x.dim(2) && w == x.dim(3)) return x;
  return narrow(narrow(x, 2, 0, h), 3, 0, w);
}

// ---------------------------------------------------------------------------
// Resampling

Tensor pixel_shuffle(const Tensor& x, int r) {
  require_rank(x, 4, "pixel_shuffle");
  if (r < 1) throw ShapeError("pixel_shuffle: factor must be >= 1");
  const auto n = x.dim(0), cr = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (cr % (r * r)) throw ShapeError("pixel_shuffle: channels " + std::to_string(cr) + " not divisible by r^2 = " + std::to_string(r * r));
  const auto c = cr / (r * r);
  // (n, c, r, r, h, w) -> (n, c, h, r, w, r)
  Tensor t = reshape(x, {n * c, r, r, h, w});
  t = permute(t, {0, 3, 1, 4, 2});
  return reshape(t, {n, c, h * r, w * r});
}

Tensor pixel_unshuffle(const Tensor& x, int r) {
  require_rank(x, 4, "pixel_unshuffle");
  const auto n = x.dim(0), c = x.dim(1), hr = x.dim(2), wr = x.dim(3);
  if (r < 1 || hr % r || wr % r) throw ShapeError("pixel_unshuffle: extents not divisible by factor");
  const auto h = hr / r, w = wr / r;
  Tensor t = reshape(x, {n * c, h, r, w, r});
  t = permute(t, {0, 2, 4, 1, 3});
  return reshape(t, {n, c * r * r, h, w});
}

namespace {
struct LinTap {
  std::int64_t i0, i1;
  double l;  // weight of i1
};

std::vector<LinTap> linear_taps(std::int64_t in, std::int64_t out) {
  std::vector<LinTap> taps(static_cast<std::size_t>(out));
  const double ratio = static_cast<double>(in) / static_cast<double>(out);
  for (std::int64_t o = 0; o < out; ++o) {
    double src = (static_cast<double>(o) + 0.5) * ratio - 0.5;
    if (src < 0) src = 0;
    auto i0 = static_cast<std::int64_t>(std::floor(src));
    if (i0 > in - 1) i0 = in - 1;
    const std::int64_t i1 = std::min(i0 + 1, in - 1);
    taps[static_cast<std::size_t>(o)] = {i0, i1, src - static_cast<double>(i0)};
  }
  return taps;
}
}  // namespace

Tensor bilinear_resize(const Tensor& x, std::int64_t out_h, std::int64_t out_w) {
  require_rank(x, 4, "bilinear_resize");
  if (out_h < 1 || out_w < 1) throw ShapeError("bilinear_resize: degenerate output size");
  strict({&x}, "bilinear_resize");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (out_h == h && out_w == w) return x;
  auto ty = linear_taps(h, out_h);
  auto tx = linear_taps(w, out_w);
  std::vector<double> out(static_cast<std::size_t>(n * c * out_h * out_w));
  const auto& xv = x.values();
  for (std::int64_t p = 0; p < n * c; ++p) {
    const double* src = xv.data() + p * h * w;
    double* dst = out.data() + p * out_h * out_w;
    for (std::int64_t oy = 0; oy < out_h; ++oy) {
      const auto& a = ty[static_cast<std::size_t>(oy)];
      for (std::int64_t ox = 0; ox < out_w; ++ox) {
        const auto& b = tx[static_cast<std::size_t>(ox)];
        const double top = (1 - b.l) * src[a.i0 * w + b.i0] + b.l * src[a.i0 * w + b.i1];
        const double bot = (1 - b.l) * src[a.i1 * w + b.i0] + b.l * src[a.i1 * w + b.i1];
        dst[oy * out_w + ox] = (1 - a.l) * top + a.l * bot;
      }
    }
  }
  add_macs(static_cast<std::uint64_t>(4 * n * c * out_h * out_w));
  return detail::make_result({n, c, out_h, out_w}, std::move(out), "bilinear_resize", {x}, [=](Node& o) {
    if (!wants(o, 0)) return;
    auto& g = pgrad(o, 0);
    for (std::int64_t p = 0; p < n * c; ++p) {
      double* dsrc = g.data() + p * h * w;
      const double* gd = o.grad.data() + p * out_h * out_w;
      for (std::int64_t oy = 0; oy < out_h; ++oy) {
        const auto& a = ty[static_cast<std::size_t>(oy)];
        for (std::int64_t ox = 0; ox < out_w; ++ox) {
          const auto& b = tx[static_cast<std::size_t>(ox)];
          const double gv = gd[oy * out_w + ox];
          dsrc[a.i0 * w + b.i0] += gv * (1 - a.l) * (1 - b.l);
          dsrc[a.i0 * w + b.i1] += gv * (1 - a.l) * b.l;
          dsrc[a.i1 * w + b.i0] += gv * a.l * (1 - b.l);
          dsrc[a.i1 * w + b.i1] += gv * a.l * b.l;
        }
      }
    }
  });
}

Tensor bilinear_resize_scale(const Tensor& x, double scale) {
  require_rank(x, 4, "bilinear_resize");
  if (!(scale > 0)) throw ShapeError("bilinear_resize: scale must be positive");
  const auto oh = static_cast<std::int64_t>(std::floor(static_cast<double>(x.dim(2)) * scale));
  const auto ow = static_cast<std::int64_t>(std::floor(static_cast<double>(x.dim(3)) * scale));
  return bilinear_resize(x, oh, ow);
}

Tensor avg_pool2d(const Tensor& x, int k) {
  require_rank(x, 4, "avg_pool2d");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (k < 1 || h % k || w % k) throw ShapeError("avg_pool2d: extents of " + shape_str(x.shape()) + " not divisible by window");
  const auto oh = h / k, ow = w / k;
  Tensor t = reshape(x, {n * c, oh, k, ow, k});
  t = sum_axes(t, {2, 4}, false);
  return reshape(mul_scalar(t, 1.0 / static_cast<double>(k * k)), {n, c, oh, ow});
}

// ---------------------------------------------------------------------------
// Deformable convolution

namespace {

struct Bilinear {
  std::int64_t y0, x0;
  double ly, lx;
};

inline double pixel_or_zero(const double* img, std::int64_t h, std::int64_t w, std::int64_t y, std::int64_t x) {
  return (y >= 0 && y < h && x >= 0 && x < w) ? img[y * w + x] : 0.0;
}

inline Bilinear locate(double py, double px) {
  const double fy = std::floor(py), fx = std::floor(px);
  return {static_cast<std::int64_t>(fy), static_cast<std::int64_t>(fx), py - fy, px - fx};
}

inline double sample(const double* img, std::int64_t h, std::int64_t w, const Bilinear& b) {
  const double v00 = pixel_or_zero(img, h, w, b.y0, b.x0);
  const double v01 = pixel_or_zero(img, h, w, b.y0, b.x0 + 1);
  const double v10 = pixel_or_zero(img, h, w, b.y0 + 1, b.x0);
  const double v11 = pixel_or_zero(img, h, w, b.y0 + 1, b.x0 + 1);
  return (1 - b.ly) * ((1 - b.lx) * v00 + b.lx * v01) + b.ly * ((1 - b.lx) * v10 + b.lx * v11);
}

struct DeformGeom {
  std::int64_t n, c, h, w, cout, kh, kw;
  std::int64_t K() const { return kh * kw; }
  std::int64_t P() const { return h * w; }
};

// Sampling positions for image i, tap m, pixel p.
inline Bilinear deform_pos(const DeformGeom& g, const double* off, std::int64_t m, std::int64_t p) {
  const std::int64_t oy = p / g.w, ox = p % g.w;
  const std::int64_t ki = m / g.kw, kj = m % g.kw;
  const double dy = off[(2 * m) * g.P() + p];
  const double dx = off[(2 * m + 1) * g.P() + p];
  const double py = static_cast<double>(oy - (g.kh - 1) / 2 + ki) + dy;
  const double px = static_cast<double>(ox - (g.kw - 1) / 2 + kj) + dx;
  return locate(py, px);
}

void deform_cols(const DeformGeom& g, const double* x, const double* off, double* cols) {
  for (std::int64_t m = 0; m < g.K(); ++m)
    for (std::int64_t p = 0; p < g.P(); ++p) {
      const Bilinear b = deform_pos(g, off, m, p);
      for (std::int64_t ch = 0; ch < g.c; ++ch) cols[(ch * g.K() + m) * g.P() + p] = sample(x + ch * g.P(), g.h, g.w, b);
    }
}

}  // namespace

Tensor deform_conv2d(const Tensor& x, const Tensor& offsets, const Tensor& w, const Tensor& b) {
  require_rank(x, 4, "deform_conv2d");
  require_rank(offsets, 4, "deform_conv2d");
  require_rank(w, 4, "deform_conv2d");
  DeformGeom g{x.dim(0), x.dim(1), x.dim(2), x.dim(3), w.dim(0), w.dim(2), w.dim(3)};
  if (w.dim(1) != g.c) throw ShapeError("deform_conv2d: channel mismatch " + shape_str(x.shape()) + " vs " + shape_str(w.shape()));
  if (g.kh % 2 == 0 || g.kw % 2 == 0) throw ShapeError("deform_conv2d: kernel must be odd");
  const Shape want_off{g.n, 2 * g.K(), g.h, g.w};
  if (offsets.shape() != want_off) shape_fail("deform_conv2d offsets", offsets.shape(), want_off);
  if (b.defined() && (b.rank() != 1 || b.dim(0) != g.cout)) throw ShapeError("deform_conv2d: bias shape");
  strict({&x, &offsets, &w, &b}, "deform_conv2d");

  const auto CK = g.c * g.K(), P = g.P();
  std::vector<double> out(static_cast<std::size_t>(g.n * g.cout * P));
  std::vector<double> cols(static_cast<std::size_t>(CK * P));
  CMapMat W(w.values().data(), g.cout, CK);
  for (std::int64_t i = 0; i < g.n; ++i) {
    deform_cols(g, x.values().data() + i * g.c * P, offsets.values().data() + i * 2 * g.K() * P, cols.data());
    MapMat O(out.data() + i * g.cout * P, g.cout, P);
    O.noalias() = W * CMapMat(cols.data(), CK, P);
    if (b.defined())
      for (std::int64_t c = 0; c < g.cout; ++c) O.row(c).array() += b.values()[static_cast<std::size_t>(c)];
  }
  add_macs(static_cast<std::uint64_t>(g.n * g.cout * CK * P + 4 * g.n * CK * P));

  return detail::make_result({g.n, g.cout, g.h, g.w}, std::move(out), "deform_conv2d", {x, offsets, w, b}, [g](Node& o) {
    const auto CK = g.c * g.K(), P = g.P();
    const auto& xv = pdata(o, 0);
    const auto& ov = pdata(o, 1);
    CMapMat W(pdata(o, 2).data(), g.cout, CK);
    const bool wx = wants(o, 0), woff = wants(o, 1), ww = wants(o, 2), wb = wants(o, 3);
    std::vector<double> cols(static_cast<std::size_t>(CK * P));
    std::vector<double> dcols(static_cast<std::size_t>(CK * P));
    for (std::int64_t i = 0; i < g.n; ++i) {
      const double* xi = xv.data() + i * g.c * P;
      const double* oi = ov.data() + i * 2 * g.K() * P;
      CMapMat G(o.grad.data() + i * g.cout * P, g.cout, P);
      if (ww) {
        deform_cols(g, xi, oi, cols.data());
        MapMat(pgrad(o, 2).data(), g.cout, CK).noalias() += G * CMapMat(cols.data(), CK, P).transpose();
      }
      if (wb) {
        auto& gb = pgrad(o, 3);
        for (std::int64_t c = 0; c < g.cout; ++c) gb[static_cast<std::size_t>(c)] += G.row(c).sum();
      }
      if (!wx && !woff) continue;
      MapMat(dcols.data(), CK, P).noalias() = W.transpose() * G;
      double* dxi = wx ? pgrad(o, 0).data() + i * g.c * P : nullptr;
      double* doi = woff ? pgrad(o, 1).data() + i * 2 * g.K() * P : nullptr;
      for (std::int64_t m = 0; m < g.K(); ++m)
        for (std::int64_t p = 0; p < P; ++p) {
          const Bilinear bl = deform_pos(g, oi, m, p);
          double gy = 0.0, gx = 0.0;
          for (std::int64_t ch = 0; ch < g.c; ++ch) {
            const double d = dcols[static_cast<std::size_t>((ch * g.K() + m) * P + p)];
            if (d == 0.0) continue;
            const double* img = xi + ch * P;
            if (wx) {
              double* dimg = dxi + ch * P;
              const std::int64_t ys[2] = {bl.y0, bl.y0 + 1};
              const std::int64_t xs[2] = {bl.x0, bl.x0 + 1};
              const double wy[2] = {1 - bl.ly, bl.ly};
              const double wxw[2] = {1 - bl.lx, bl.lx};
              for (int a = 0; a < 2; ++a)
                for (int c2 = 0; c2 < 2; ++c2)
                  if (ys[a] >= 0 && ys[a] < g.h && xs[c2] >= 0 && xs[c2] < g.w) dimg[ys[a] * g.w + xs[c2]] += d * wy[a] * wxw[c2];
            }
            if (woff) {
              const double v00 = pixel_or_zero(img, g.h, g.w, bl.y0, bl.x0);
              const double v01 = pixel_or_zero(img, g.h, g.w, bl.y0, bl.x0 + 1);
              const double v10 = pixel_or_zero(img, g.h, g.w, bl.y0 + 1, bl.x0);
              const double v11 = pixel_or_zero(img, g.h, g.w, bl.y0 + 1, bl.x0 + 1);
              gy += d * ((1 - bl.lx) * (v10 - v00) + bl.lx * (v11 - v01));
              gx += d * ((1 - bl.ly) * (v01 - v00) + bl.ly * (v11 - v10));
            }
          }
          if (woff) {
            doi[(2 * m) * P + p] += gy;
            doi[(2 * m + 1) * P + p] += gx;
          }
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Windowed attention

namespace {

struct WindowGeom {
  std::int64_t n, d, h, w;
  int win;
  std::int64_t nwy() const { return (h + win - 1) / win; }
  std::int64_t nwx() const { return (w + win - 1) / win; }
};

// Flat spatial indices of the tokens inside window (wy, wx).
std::vector<std::int64_t> window_tokens(const WindowGeom& g, std::int64_t wy, std::int64_t wx) {
  std::vector<std::int64_t> t;
  const std::int64_t y1 = std::min(g.h, (wy + 1) * g.win), x1 = std::min(g.w, (wx + 1) * g.win);
  for (std::int64_t y = wy * g.win; y < y1; ++y)
    for (std::int64_t x = wx * g.win; x < x1; ++x) t.push_back(y * g.w + x);
  return t;
}

void gather_tokens(const double* src, std::int64_t d, std::int64_t P, const std::vector<std::int64_t>& tok, RowMat& m) {
  m.resize(static_cast<Eigen::Index>(tok.size()), d);
  for (std::size_t r = 0; r < tok.size(); ++r)
    for (std::int64_t c = 0; c < d; ++c) m(static_cast<Eigen::Index>(r), c) = src[c * P + tok[r]];
}

void scatter_add_tokens(const RowMat& m, std::int64_t d, std::int64_t P, const std::vector<std::int64_t>& tok, double* dst) {
  for (std::size_t r = 0; r < tok.size(); ++r)
    for (std::int64_t c = 0; c < d; ++c) dst[c * P + tok[r]] += m(static_cast<Eigen::Index>(r), c);
}

void softmax_rows(RowMat& s) {
  for (Eigen::Index r = 0; r < s.rows(); ++r) {
    const double mx = s.row(r).maxCoeff();
    s.row(r) = (s.row(r).array() - mx).exp();
    s.row(r) /= s.row(r).sum();
  }
}

}  // namespace

Tensor window_attention(const Tensor& q, const Tensor& k, const Tensor& v, int window) {
  require_rank(q, 4, "window_attention");
  if (k.shape() != q.shape()) shape_fail("window_attention", q.shape(), k.shape());
  if (v.shape() != q.shape()) shape_fail("window_attention", q.shape(), v.shape());
  if (window < 1) throw ShapeError("window_attention: window must be >= 1");
  strict({&q, &k, &v}, "window_attention");
  WindowGeom g{q.dim(0), q.dim(1), q.dim(2), q.dim(3), window};
  const auto P = g.h * g.w;
  const double scale = 1.0 / std::sqrt(static_cast<double>(g.d));
  std::vector<double> out(static_cast<std::size_t>(q.numel()), 0.0);
  RowMat Q, K, V, S, O;
  std::uint64_t macs = 0;
  for (std::int64_t i = 0; i < g.n; ++i) {
    const std::int64_t off = i * g.d * P;
    for (std::int64_t wy = 0; wy < g.nwy(); ++wy)
      for (std::int64_t wx = 0; wx < g.nwx(); ++wx) {
        auto tok = window_tokens(g, wy, wx);
        gather_tokens(q.values().data() + off, g.d, P, tok, Q);
        gather_tokens(k.values().data() + off, g.d, P, tok, K);
        gather_tokens(v.values().data() + off, g.d, P, tok, V);
        S.noalias() = (Q * K.transpose()) * scale;
        softmax_rows(S);
        O.noalias() = S * V;
        scatter_add_tokens(O, g.d, P, tok, out.data() + off);
        macs += 2 * tok.size() * tok.size() * static_cast<std::uint64_t>(g.d);
      }
  }
  add_macs(macs);
  return detail::make_result(q.shape(), std::move(out), "window_attention", {q, k, v}, [g, scale](Node& o) {
    const auto P = g.h * g.w;
    RowMat Q, K, V, S, G, dP, dS, tmp;
    const bool wq = wants(o, 0), wk = wants(o, 1), wv = wants(o, 2);
    for (std::int64_t i = 0; i < g.n; ++i) {
      const std::int64_t off = i * g.d * P;
      for (std::int64_t wy = 0; wy < g.nwy(); ++wy)
        for (std::int64_t wx = 0; wx < g.nwx(); ++wx) {
          auto tok = window_tokens(g, wy, wx);
          gather_tokens(pdata(o, 0).data() + off, g.d, P, tok, Q);
          gather_tokens(pdata(o, 1).data() + off, g.d, P, tok, K);
          gather_tokens(pdata(o, 2).data() + off, g.d, P, tok, V);
          gather_tokens(o.grad.data() + off, g.d, P, tok, G);
          S.noalias() = (Q * K.transpose()) * scale;
          softmax_rows(S);
          if (wv) {
            tmp.noalias() = S.transpose() * G;
            scatter_add_tokens(tmp, g.d, P, tok, pgrad(o, 2).data() + off);
          }
          if (!wq && !wk) continue;
          dP.noalias() = G * V.transpose();
          dS = S.array() * (dP.colwise() - (dP.array() * S.array()).rowwise().sum().matrix()).array();
          if (wq) {
            tmp.noalias() = (dS * K) * scale;
            scatter_add_tokens(tmp, g.d, P, tok, pgrad(o, 0).data() + off);
          }
          if (wk) {
            tmp.noalias() = (dS.transpose() * Q) * scale;
            scatter_add_tokens(tmp, g.d, P, tok, pgrad(o, 1).data() + off);
          }
        }
    }
  });
}

// ---------------------------------------------------------------------------
// Patch grid ops

Tensor patch_descriptors(const Tensor& x, int grid, int pool) {
  require_rank(x, 4, "patch_descriptors");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  if (grid < 1 || pool < 1) throw ShapeError("patch_descriptors: grid and pool must be >= 1");
  if (h % grid || w % grid) throw ShapeError("patch_descriptors: " + shape_str(x.shape()) + " not divisible into grid " + std::to_string(grid));
  const auto ph = h / grid, pw = w / grid;
  if (ph % pool || pw % pool) throw ShapeError("patch_descriptors: patch not divisible by pool size");
  // (n, c, g, pool, cell, g, pool, cell) -> mean over cells -> (n, g, g, c, pool, pool)
  const auto ch = ph / pool, cw = pw / pool;
  Tensor t = avg_pool2d(x, 1);
  if (ch != cw) throw ShapeError("patch_descriptors: non-square pooling cells");
  if (ch > 1) t = avg_pool2d(x, static_cast<int>(ch));
  // t: (n, c, g*pool, g*pool)
  t = reshape(t, {n * c, grid, pool, grid, pool});
  t = permute(t, {0, 1, 3, 2, 4});  // (n*c, gy, gx, py, px)
  t = reshape(t, {n, c, grid * grid, pool * pool});
  t = permute(t, {0, 2, 1, 3});  // (n, g*g, c, pool*pool)
  return reshape(t, {n, static_cast<std::int64_t>(grid) * grid, c * pool * pool});
}

Tensor patch_mix(const Tensor& x, const Tensor& weights, int grid) {
  require_rank(x, 4, "patch_mix");
  require_rank(weights, 3, "patch_mix");
  const auto n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  const std::int64_t np = static_cast<std::int64_t>(grid) * grid;
  if (grid < 1 || h % grid || w % grid) throw ShapeError("patch_mix: " + shape_str(x.shape()) + " not divisible into grid");
  if (weights.shape() != Shape{n, np, np}) shape_fail("patch_mix", weights.shape(), Shape{n, np, np});
  const auto ph = h / grid, pw = w / grid;
  // (n, c, gy, ph, gx, pw) -> (n, gy*gx, c*ph*pw)
  Tensor t = reshape(x, {n * c, grid, ph, grid, pw});
  t = permute(t, {0, 1, 3, 2, 4});
  t = reshape(t, {n, c, np, ph * pw});
  t = permute(t, {0, 2, 1, 3});
  t = reshape(t, {n, np, c * ph * pw});
  Tensor mixed = bmm(weights, t);  // (n, np, c*ph*pw)
  mixed = reshape(mixed, {n, np, c, ph * pw});
  mixed = permute(mixed, {0, 2, 1, 3});
  mixed = reshape(mixed, {n * c, grid, grid, ph, pw});
  mixed = permute(mixed, {0, 1, 3, 2, 4});
  return reshape(mixed, {n, c, h, w});
}

}  // namespace spikesr::ops
