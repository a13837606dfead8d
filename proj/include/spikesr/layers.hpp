#pragma once

#include <cstdint>
#include <random>

#include "spikesr/module.hpp"
#include "spikesr/ops.hpp"

namespace spikesr {

/// Kaiming-uniform with a = sqrt(5): U(-1/sqrt(fan_in), 1/sqrt(fan_in)).
void kaiming_uniform(Tensor& t, std::int64_t fan_in, std::mt19937_64& rng);

/// (T, B, C, H, W) -> (T*B, C, H, W) and back.
Tensor fold_time(const Tensor& x);
Tensor unfold_time(const Tensor& x, std::int64_t T);

/// Mean over the given axes, keeping them as size-1 extents.
Tensor global_avg_pool(const Tensor& x, std::vector<int> axes);

class Conv2d : public Module {
 public:
  Conv2d(int cin, int cout, int kernel, std::mt19937_64& rng, bool bias = true,
         ops::PadMode mode = ops::PadMode::reflect);

  Tensor forward(const Tensor& x) const;  // (N, C, H, W)
  Tensor forward_seq(const Tensor& x) const;  // (T, B, C, H, W), time folded into batch

  /// Multiply-accumulates for one image of extent h x w.
  std::uint64_t macs(std::int64_t h, std::int64_t w) const;

  int in_channels() const { return cin_; }
  int out_channels() const { return cout_; }
  int kernel() const { return k_; }

  Tensor weight;
  Tensor bias;

 private:
  int cin_, cout_, k_;
  ops::PadMode mode_;
};

/// y = x W^T + b on (N, in).
class Linear : public Module {
 public:
  Linear(int in, int out, std::mt19937_64& rng, bool bias = true);
  Tensor forward(const Tensor& x) const;
  std::uint64_t macs(std::int64_t rows) const { return static_cast<std::uint64_t>(rows * in_ * out_); }

  Tensor weight;
  Tensor bias;

 private:
  int in_, out_;
};

/// Per-pixel two-layer perceptron on NCHW maps: in -> hidden (GELU) -> out.
class Mlp : public Module {
 public:
  Mlp(int in, int hidden, int out, std::mt19937_64& rng);
  Tensor forward(const Tensor& x) const;
  std::uint64_t macs(std::int64_t h, std::int64_t w) const;

 private:
  Conv2d* fc1_;
  Conv2d* fc2_;
};

}  // namespace spikesr
