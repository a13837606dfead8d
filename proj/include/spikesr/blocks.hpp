#pragma once

#include "spikesr/dsa.hpp"
#include "spikesr/layers.hpp"
#include "spikesr/neuron.hpp"

namespace spikesr {

enum class ChannelAttn { hda, ta_ca, none };
enum class SpatialAttn { dsa, sa, none };

struct BlockConfig {
  int channels = 64;
  int scb_kernel = 1;
  bool scb_lif_first = true;  // LIF -> Conv -> tdBN; otherwise Conv -> tdBN -> LIF
  LifParams lif;
  TdbnParams tdbn;
  int hda_hidden = 4;
  int hda_kernel = 3;
  int ta_kernel = 3;
  int sa_kernel = 7;
  int ca_reduction = 4;
  ChannelAttn channel_attn = ChannelAttn::hda;
  SpatialAttn spatial_attn = SpatialAttn::dsa;
  DsaConfig dsa;
};

/// Spiking conv block on (T, B, C, H, W).
class Scb : public Module {
 public:
  Scb(const BlockConfig& cfg, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, RunContext& ctx);
  std::uint64_t macs(std::int64_t h, std::int64_t w, std::int64_t T) const { return T * conv->macs(h, w); }

  Lif* lif;
  Conv2d* conv;
  Tdbn* bn;

 private:
  bool lif_first_;
};

/// Hybrid dimension attention: the per-sample (T x C) map of spatial means is
/// filtered jointly over time and channel by a small 2-D conv stack
/// (1 -> hidden -> 1, GELU between, zero padding); its sigmoid gates u.
class Hda : public Module {
 public:
  Hda(int hidden, int kernel, std::mt19937_64& rng);
  Tensor gate(const Tensor& u) const;  // (T, B, C, 1, 1)
  Tensor forward(const Tensor& u) const { return ops::mul(u, gate(u)); }
  std::uint64_t macs(std::int64_t T, std::int64_t C) const { return T * (conv1->macs(1, C) + conv2->macs(1, C)); }

  Conv2d* conv1;
  Conv2d* conv2;
};

/// Per-(t, b) scalar gate from the mean over (C, H, W), filtered along T by a
/// zero-padded 1-D kernel.
class TemporalAttention : public Module {
 public:
  TemporalAttention(int kernel, std::mt19937_64& rng);
  Tensor gate(const Tensor& y) const;  // (T, B, 1, 1, 1)

  Tensor weight, bias;

 private:
  int k_;
};

/// Squeeze-excitation over channels: mean over (T, H, W), C -> C/r -> C.
class ChannelAttention : public Module {
 public:
  ChannelAttention(int channels, int reduction, std::mt19937_64& rng);
  Tensor gate(const Tensor& y) const;  // (1, B, C, 1, 1)
  std::uint64_t macs() const { return fc1->macs(1) + fc2->macs(1); }

  Linear* fc1;
  Linear* fc2;
};

/// Spatial gate: channel-mean map -> k x k conv (1 -> 1) -> sigmoid.
/// per_step: one map per time step; otherwise the map also averages over T.
class SpatialAttention : public Module {
 public:
  SpatialAttention(int kernel, std::mt19937_64& rng);
  Tensor gate(const Tensor& y, bool per_step) const;  // (T or 1, B, 1, H, W)
  std::uint64_t macs(std::int64_t h, std::int64_t w) const { return conv->macs(h, w); }

  Conv2d* conv;
};

/// Fusion block: (T, B, C, H, W) -> (B, C, H, W).
///   Y1 = sigma(TA(y)) * y,  Y2 = sigma(SA(y)) * (1 - Y1),  out = mean_T(Y1 + Y2)
class FusionBlock : public Module {
 public:
  FusionBlock(int ta_kernel, int sa_kernel, std::mt19937_64& rng);
  Tensor forward(const Tensor& y) const;
  std::uint64_t macs(std::int64_t h, std::int64_t w) const { return sa->macs(h, w); }

  TemporalAttention* ta;
  SpatialAttention* sa;
};

/// Spiking attention block: out = x + A(SCB(SCB(x)) + tdBN(Conv3x3(x))),
/// A = spatial attention after channel attention.
class Sab : public Module {
 public:
  Sab(const BlockConfig& cfg, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, RunContext& ctx);
  std::uint64_t macs(std::int64_t h, std::int64_t w, std::int64_t T) const;

  Scb *scb1, *scb2;
  Conv2d* conv;
  Tdbn* bn;
  Hda* hda = nullptr;
  TemporalAttention* ta = nullptr;
  ChannelAttention* ca = nullptr;
  SpatialAttention* sa = nullptr;
  Dsa* dsa = nullptr;
};

/// Spiking attention group: out = x + SCB(SAB_n(...SAB_1(x))).
class Sag : public Module {
 public:
  Sag(const BlockConfig& cfg, int num_sab, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, RunContext& ctx);
  std::uint64_t macs(std::int64_t h, std::int64_t w, std::int64_t T) const;

  std::vector<Sab*> sabs;
  Scb* tail;
};

}  // namespace spikesr
