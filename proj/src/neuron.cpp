#include "spikesr/neuron.hpp"

#include <cmath>
#include <stdexcept>

#include "spikesr/ops.hpp"

namespace spikesr {

void LifParams::validate() const {
  if (!(tau > 1.0)) throw std::invalid_argument("LIF tau must exceed 1");
  if (!(v_threshold > v_reset)) throw std::invalid_argument("LIF threshold must exceed reset potential");
  if (!(surrogate_width > 0)) throw std::invalid_argument("LIF surrogate width must be positive");
}

LifState lif_rest(const Shape& shape, const LifParams& p) { return {Tensor::full(shape, p.v_reset)}; }

LifStepResult lif_step(const Tensor& x_t, const LifState& state, const LifParams& p, bool relaxed) {
  if (x_t.shape() != state.v.shape())
    throw ShapeError("lif_step: input " + shape_str(x_t.shape()) + " vs membrane " + shape_str(state.v.shape()));
  const Tensor& v = state.v;
  Tensor h = ops::add(v, ops::mul_scalar(ops::sub(x_t, ops::add_scalar(v, -p.v_reset)), 1.0 / p.tau));
  for (double e : h.data())
    if (!std::isfinite(e)) throw NonFiniteError("lif_step: non-finite membrane potential");
  Tensor s = ops::spike(ops::add_scalar(h, -p.v_threshold), p.surrogate_width, relaxed);
  Tensor v_next = ops::mul(h, ops::rsub_scalar(1.0, s));
  if (p.v_reset != 0.0) v_next = ops::add(v_next, ops::mul_scalar(s, p.v_reset));
  return {s, {v_next}};
}

Tensor lif_sequence(const Tensor& x, const LifParams& p, bool relaxed) {
  if (x.rank() < 2) throw ShapeError("lif_sequence expects a leading time axis, got " + shape_str(x.shape()));
  const auto T = x.dim(0);
  Shape step_shape(x.shape().begin() + 1, x.shape().end());
  Shape one_shape = x.shape();
  one_shape[0] = 1;
  LifState st = lif_rest(step_shape, p);
  std::vector<Tensor> spikes;
  spikes.reserve(static_cast<std::size_t>(T));
  for (std::int64_t t = 0; t < T; ++t) {
    Tensor xt = ops::reshape(ops::narrow(x, 0, t, 1), step_shape);
    auto r = lif_step(xt, st, p, relaxed);
    st = r.state;
    spikes.push_back(ops::reshape(r.spikes, one_shape));
  }
  return T == 1 ? spikes.front() : ops::concat(spikes, 0);
}

Tensor Lif::forward(const Tensor& x, RunContext& ctx) const {
  Tensor s = lif_sequence(x, p_, ctx.relaxed);
  if (ctx.trace) {
    SpikeRecord r{path(), 0.0, s.numel(), static_cast<int>(s.dim(-2)), static_cast<int>(s.dim(-1)), {}};
    const std::size_t hw = static_cast<std::size_t>(r.height) * r.width;
    r.map.assign(hw, 0.0);
    const auto d = s.data();
    for (std::size_t i = 0; i < d.size(); ++i) {
      r.ones += d[i];
      r.map[i % hw] += d[i];
    }
    const double planes = static_cast<double>(d.size() / hw);
    for (double& v : r.map) v /= planes;
    ctx.trace->push_back(std::move(r));
  }
  return s;
}

Tdbn::Tdbn(int channels, double v_threshold, TdbnParams p) : channels_(channels), v_threshold_(v_threshold), p_(p) {
  if (!(p.eps > 0)) throw std::invalid_argument("tdBN eps must be positive");
  gamma = Tensor::full({channels}, 1.0);
  beta = Tensor::zeros({channels});
  running_mean = Tensor::zeros({channels});
  running_var = Tensor::full({channels}, 1.0);
  register_parameter("gamma", &gamma);
  register_parameter("beta", &beta);
  register_buffer("running_mean", &running_mean);
  register_buffer("running_var", &running_var);
}

Tensor Tdbn::forward(const Tensor& x, bool training) {
  if (x.rank() != 5 || x.dim(2) != channels_)
    throw ShapeError("tdBN expects (T,B," + std::to_string(channels_) + ",H,W), got " + shape_str(x.shape()));
  const Shape cshape{1, 1, channels_, 1, 1};
  const std::vector<int> axes{0, 1, 3, 4};
  Tensor mu, var;
  if (training) {
    const std::int64_t n = x.numel() / channels_;
    if (n < 2) throw std::invalid_argument("tdBN: need at least two elements per channel in training mode");
    mu = ops::mean_axes(x, axes);
    var = ops::mean_axes(ops::square(ops::sub(x, mu)), axes);
    auto rm = running_mean.mutable_data();
    auto rv = running_var.mutable_data();
    const double unbias = static_cast<double>(n) / static_cast<double>(n - 1);
    for (int c = 0; c < channels_; ++c) {
      rm[c] = (1 - p_.momentum) * rm[c] + p_.momentum * mu.values()[c];
      rv[c] = (1 - p_.momentum) * rv[c] + p_.momentum * var.values()[c] * unbias;
    }
  } else {
    mu = ops::reshape(running_mean.detach(), cshape);
    var = ops::reshape(running_var.detach(), cshape);
  }
  Tensor xhat = ops::div(ops::sub(x, mu), ops::sqrt(ops::add_scalar(var, p_.eps)));
  Tensor scale = ops::mul_scalar(ops::reshape(gamma, cshape), p_.alpha * v_threshold_);
  return ops::add(ops::mul(xhat, scale), ops::reshape(beta, cshape));
}

ImagePlane spike_rate_probe(const ImagePlane& image, const LifParams& p, int T, double scale) {
  if (T < 1) throw std::invalid_argument("spike_rate_probe: T must be >= 1");
  p.validate();
  ImagePlane rate(image.width, image.height, 1);
  for (std::size_t i = 0; i < image.plane_size(); ++i) {
    double x = 0;
    for (int c = 0; c < image.channels; ++c) x += image.values[c * image.plane_size() + i];
    x = x / image.channels * scale;
    double v = p.v_reset;
    int fired = 0;
    for (int t = 0; t < T; ++t) {
      const double h = v + (x - (v - p.v_reset)) / p.tau;
      if (h >= p.v_threshold) {
        ++fired;
        v = p.v_reset;
      } else {
        v = h;
      }
    }
    rate.values[i] = static_cast<double>(fired) / T;
  }
  return rate;
}

}  // namespace spikesr
