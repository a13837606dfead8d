#pragma once

#include <cstdint>
#include <vector>

#include "spikesr/layers.hpp"
#include "spikesr/module.hpp"

namespace spikesr {

struct DsaConfig {
  int channels = 64;
  int embed = 32;        // cross-attention embedding dimension d
  int mlp_hidden = 100;
  int grid = 4;          // g x g patches
  int pool = 1;          // descriptor cells per patch side
  int window = 16;       // attention window side
  bool use_dconv = true;
  bool use_pyramid = true;
  bool deform_over_input = false;  // deform F instead of the matched map
  bool cosine = false;
  double gumbel_tau = 1.0;
};

struct PatchMatch {
  std::vector<std::int64_t> indices;  // (N, g*g) best match of every patch
  Tensor one_hot;                      // (N, g*g, g*g) selection weights
};

/// Fused patch similarity (N, g*g, g*g). Per level: dot products of patch
/// descriptors, rows softmaxed. Two levels (1.0 and 0.5) are multiplied, the
/// diagonal zeroed and rows renormalized. A single level masks its diagonal.
Tensor pyramid_similarity(const Tensor& F, int grid, int pool, bool use_pyramid, bool cosine = false);

/// softmax((log S + noise) / tau) with the diagonal excluded; noise (N,P,P).
Tensor gumbel_softmax_weights(const Tensor& S, const Tensor& noise, double tau);

/// Hard patch selection. Training: Gumbel-softmax over log S with
/// straight-through one-hot (soft forward when ctx.relaxed). Eval: argmax.
/// The diagonal is never selected.
PatchMatch gumbel_select(const Tensor& S, double tau, RunContext& ctx);

/// Slot i of the result holds patch indices[i] of F (weighted by one_hot).
Tensor assemble_matched(const Tensor& F, const PatchMatch& match, int grid);

/// Deformable 3x3 alignment with offsets predicted from concat(F, F_bar).
class DeformAlign : public Module {
 public:
  DeformAlign(int channels, std::mt19937_64& rng, bool over_input = false);
  Tensor forward(const Tensor& F_bar, const Tensor& F) const;
  std::uint64_t macs(std::int64_t h, std::int64_t w) const;

  Conv2d* offset_conv;
  Tensor weight, bias;

 private:
  int channels_;
  bool over_input_;
};

/// V_bar = proj(softmax(Q K^T / sqrt d) V) within windows; out = MLP(F + V_bar).
class CrossAttentionFuse : public Module {
 public:
  CrossAttentionFuse(int channels, int embed, int mlp_hidden, int window, std::mt19937_64& rng);
  Tensor forward(const Tensor& F, const Tensor& F_d, const Tensor& F_bar) const;
  std::uint64_t macs(std::int64_t h, std::int64_t w) const;

 private:
  Conv2d *q_, *k_, *v_, *proj_;
  Mlp* mlp_;
  int embed_, window_;
};

class Dsa : public Module {
 public:
  Dsa(const DsaConfig& cfg, std::mt19937_64& rng);
  Tensor forward(const Tensor& x, RunContext& ctx) const;  // (N, C, H, W)
  /// Analytic multiply-accumulates for one image of extent h x w.
  std::uint64_t macs(std::int64_t h, std::int64_t w) const;
  /// Extents after internal padding.
  std::pair<std::int64_t, std::int64_t> padded_extent(std::int64_t h, std::int64_t w) const;

 private:
  DsaConfig cfg_;
  DeformAlign* align_ = nullptr;
  CrossAttentionFuse* fuse_;
};

}  // namespace spikesr
