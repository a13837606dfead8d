#pragma once

#include "spikesr/image.hpp"
#include "spikesr/module.hpp"
#include "spikesr/tensor.hpp"

namespace spikesr {

struct LifParams {
  double tau = 2.0;
  double v_threshold = 1.0;
  double v_reset = 0.0;
  double surrogate_width = 2.0;

  void validate() const;
};

struct LifState {
  Tensor v;  // membrane potential, (B, C, H, W)
};

struct LifStepResult {
  Tensor spikes;
  LifState state;
};

LifState lif_rest(const Shape& shape, const LifParams& p);

/// One step of the decay-input LIF with hard reset:
///   H = V + (x - (V - v_reset)) / tau
///   s = [H >= v_threshold]
///   V' = v_reset where s = 1, else H
LifStepResult lif_step(const Tensor& x_t, const LifState& state, const LifParams& p, bool relaxed = false);

/// Runs LIF over the leading time axis of (T, ...) from rest; returns spikes.
Tensor lif_sequence(const Tensor& x, const LifParams& p, bool relaxed = false);

/// LIF layer; records its firing rate into RunContext::trace.
class Lif : public Module {
 public:
  explicit Lif(LifParams p = {}) : p_(p) { p_.validate(); }
  Tensor forward(const Tensor& x, RunContext& ctx) const;
  const LifParams& params() const { return p_; }

 private:
  LifParams p_;
};

struct TdbnParams {
  double alpha = 1.0;
  double eps = 1e-5;
  double momentum = 0.1;
};

/// Threshold-dependent batch norm over (T, B, C, H, W), per channel:
///   y = alpha * v_threshold * (x - mu) / sqrt(var + eps) * gamma + beta
/// with statistics over (T, B, H, W).
class Tdbn : public Module {
 public:
  Tdbn(int channels, double v_threshold = 1.0, TdbnParams p = {});
  Tensor forward(const Tensor& x, bool training);

  Tensor gamma, beta;
  Tensor running_mean, running_var;

 private:
  int channels_;
  double v_threshold_;
  TdbnParams p_;
};

/// Per-pixel firing rate when each pixel value (times `scale`, averaged over
/// channels) is injected as a constant current for T steps from rest.
ImagePlane spike_rate_probe(const ImagePlane& image, const LifParams& p, int T, double scale = 1.0);

}  // namespace spikesr
