#include "spikesr/dsa.hpp"

#include <cmath>
#include <limits>

namespace spikesr {

namespace {

std::vector<std::uint8_t> diagonal_mask(std::int64_t n, std::int64_t p) {
  std::vector<std::uint8_t> m(static_cast<std::size_t>(n * p * p), 0);
  for (std::int64_t b = 0; b < n; ++b)
    for (std::int64_t i = 0; i < p; ++i) m[static_cast<std::size_t>((b * p + i) * p + i)] = 1;
  return m;
}

Tensor level_similarity(const Tensor& F, int grid, int pool, bool cosine, bool mask_self) {
  Tensor E = ops::patch_descriptors(F, grid, pool);  // (N, P, D)
  if (cosine) {
    Tensor norm = ops::sqrt(ops::add_scalar(ops::sum_axes(ops::square(E), {2}), 1e-12));
    E = ops::div(E, norm);
  }
  Tensor S = ops::bmm(E, ops::transpose_last2(E));
  const auto n = S.dim(0), p = S.dim(1);
  if (!mask_self) return ops::softmax_lastdim(S);
  return ops::softmax_lastdim(ops::masked_fill(S, diagonal_mask(n, p), -1e30));
}

}  // namespace

Tensor pyramid_similarity(const Tensor& F, int grid, int pool, bool use_pyramid, bool cosine) {
  if (F.rank() != 4) throw ShapeError("pyramid_similarity expects (N,C,H,W), got " + shape_str(F.shape()));
  if (static_cast<std::int64_t>(grid) * grid < 2) throw std::invalid_argument("pyramid_similarity: grid must hold at least two patches");
  if (!use_pyramid) return level_similarity(F, grid, pool, cosine, true);
  // Levels keep their self terms so the product retains direct matches.
  Tensor S0 = level_similarity(F, grid, pool, cosine, false);
  if (F.dim(2) / 2 < grid * pool || F.dim(3) / 2 < grid * pool)
    throw ShapeError("pyramid_similarity: grid larger than the coarse level of " + shape_str(F.shape()));
  Tensor coarse = ops::bilinear_resize(F, F.dim(2) / 2, F.dim(3) / 2);
  Tensor S1 = level_similarity(coarse, grid, pool, cosine, false);
  Tensor S = ops::bmm(S0, S1);
  const auto p = S.dim(1);
  std::vector<double> keep(static_cast<std::size_t>(p * p), 1.0);
  for (std::int64_t i = 0; i < p; ++i) keep[static_cast<std::size_t>(i * p + i)] = 0.0;
  S = ops::mul(S, Tensor::from({p, p}, std::move(keep)));
  return ops::div(S, ops::sum_axes(S, {2}));
}

Tensor gumbel_softmax_weights(const Tensor& S, const Tensor& noise, double tau) {
  if (!(tau > 0)) throw std::invalid_argument("gumbel_select: temperature must be positive");
  const auto n = S.dim(0), p = S.dim(1);
  Tensor logits = ops::masked_fill(ops::log(ops::add_scalar(S, 1e-12)), diagonal_mask(n, p), -1e30);
  return ops::softmax_lastdim(ops::mul_scalar(ops::add(logits, noise), 1.0 / tau));
}

PatchMatch gumbel_select(const Tensor& S, double tau, RunContext& ctx) {
  if (S.rank() != 3 || S.dim(1) != S.dim(2)) throw ShapeError("gumbel_select expects (N,P,P), got " + shape_str(S.shape()));
  if (!(tau > 0)) throw std::invalid_argument("gumbel_select: temperature must be positive");
  const auto n = S.dim(0), p = S.dim(1);
  if (p < 2) throw std::invalid_argument("gumbel_select: every row is fully masked");

  auto argmax_offdiag = [p](const double* row, std::int64_t i) {
    std::int64_t best = -1;
    for (std::int64_t j = 0; j < p; ++j)
      if (j != i && (best < 0 || row[j] > row[best])) best = j;
    return best;
  };

  PatchMatch m;
  m.indices.resize(static_cast<std::size_t>(n * p));
  auto hard_from = [&](const Tensor& scores) {
    std::vector<double> oh(static_cast<std::size_t>(n * p * p), 0.0);
    for (std::int64_t r = 0; r < n * p; ++r) {
      const std::int64_t j = argmax_offdiag(scores.values().data() + r * p, r % p);
      m.indices[static_cast<std::size_t>(r)] = j;
      oh[static_cast<std::size_t>(r * p + j)] = 1.0;
    }
    return Tensor::from({n, p, p}, std::move(oh));
  };

  if (!ctx.training) {
    m.one_hot = hard_from(S);
    return m;
  }
  std::uniform_real_distribution<double> u(std::numeric_limits<double>::min(), 1.0);
  std::vector<double> g(static_cast<std::size_t>(n * p * p));
  for (double& v : g) v = -std::log(-std::log(u(ctx.rng)));
  Tensor y = gumbel_softmax_weights(S, Tensor::from({n, p, p}, std::move(g)), tau);
  Tensor hard = hard_from(y);
  m.one_hot = ctx.relaxed ? y : ops::straight_through(hard, y);
  return m;
}

Tensor assemble_matched(const Tensor& F, const PatchMatch& match, int grid) {
  return ops::patch_mix(F, match.one_hot, grid);
}

DeformAlign::DeformAlign(int channels, std::mt19937_64& rng, bool over_input)
    : channels_(channels), over_input_(over_input) {
  offset_conv = register_module("offset", std::make_unique<Conv2d>(2 * channels, 18, 3, rng));
  // Offsets start at zero so training begins from a plain convolution.
  for (double& v : offset_conv->weight.mutable_data()) v = 0.0;
  for (double& v : offset_conv->bias.mutable_data()) v = 0.0;
  weight = Tensor::zeros({channels, channels, 3, 3});
  bias = Tensor::zeros({channels});
  kaiming_uniform(weight, 9LL * channels, rng);
  kaiming_uniform(bias, 9LL * channels, rng);
  register_parameter("weight", &weight);
  register_parameter("bias", &bias);
}

Tensor DeformAlign::forward(const Tensor& F_bar, const Tensor& F) const {
  Tensor offsets = offset_conv->forward(ops::concat({F, F_bar}, 1));
  return ops::deform_conv2d(over_input_ ? F : F_bar, offsets, weight, bias);
}

std::uint64_t DeformAlign::macs(std::int64_t h, std::int64_t w) const {
  const auto hw = static_cast<std::uint64_t>(h * w);
  const auto c = static_cast<std::uint64_t>(channels_);
  return offset_conv->macs(h, w) + c * c * 9 * hw + 4 * c * 9 * hw;
}

CrossAttentionFuse::CrossAttentionFuse(int channels, int embed, int mlp_hidden, int window, std::mt19937_64& rng)
    : embed_(embed), window_(window) {
  q_ = register_module("q", std::make_unique<Conv2d>(channels, embed, 1, rng));
  k_ = register_module("k", std::make_unique<Conv2d>(channels, embed, 1, rng));
  v_ = register_module("v", std::make_unique<Conv2d>(channels, embed, 1, rng));
  proj_ = register_module("proj", std::make_unique<Conv2d>(embed, channels, 1, rng));
  mlp_ = register_module("mlp", std::make_unique<Mlp>(channels, mlp_hidden, channels, rng));
}

Tensor CrossAttentionFuse::forward(const Tensor& F, const Tensor& F_d, const Tensor& F_bar) const {
  if (F_d.shape() != F_bar.shape() || F.shape() != F_bar.shape())
    throw ShapeError("cross_attention_fuse: token count mismatch " + shape_str(F_d.shape()) + " vs " + shape_str(F_bar.shape()));
  Tensor att = ops::window_attention(q_->forward(F_d), k_->forward(F_bar), v_->forward(F_bar), window_);
  return mlp_->forward(ops::add(F, proj_->forward(att)));
}

std::uint64_t CrossAttentionFuse::macs(std::int64_t h, std::int64_t w) const {
  std::uint64_t attn = 0;
  for (std::int64_t y = 0; y < h; y += window_)
    for (std::int64_t x = 0; x < w; x += window_) {
      const auto l = static_cast<std::uint64_t>(std::min<std::int64_t>(window_, h - y) * std::min<std::int64_t>(window_, w - x));
      attn += 2 * l * l * static_cast<std::uint64_t>(embed_);
    }
  return q_->macs(h, w) + k_->macs(h, w) + v_->macs(h, w) + proj_->macs(h, w) + mlp_->macs(h, w) + attn;
}

Dsa::Dsa(const DsaConfig& cfg, std::mt19937_64& rng) : cfg_(cfg) {
  if (cfg.grid < 2) throw std::invalid_argument("DSA grid must be >= 2");
  if (cfg.use_dconv) align_ = register_module("align", std::make_unique<DeformAlign>(cfg.channels, rng, cfg.deform_over_input));
  fuse_ = register_module("fuse", std::make_unique<CrossAttentionFuse>(cfg.channels, cfg.embed, cfg.mlp_hidden, cfg.window, rng));
}

std::pair<std::int64_t, std::int64_t> Dsa::padded_extent(std::int64_t h, std::int64_t w) const {
  const std::int64_t mult = static_cast<std::int64_t>(cfg_.grid) * cfg_.pool * (cfg_.use_pyramid ? 2 : 1);
  return {(h + mult - 1) / mult * mult, (w + mult - 1) / mult * mult};
}

Tensor Dsa::forward(const Tensor& x, RunContext& ctx) const {
  if (x.rank() != 4) throw ShapeError("DSA expects (N,C,H,W), got " + shape_str(x.shape()));
  const auto h = x.dim(2), w = x.dim(3);
  const auto [hp, wp] = padded_extent(h, w);
  Tensor F = ops::pad_to(x, hp, wp);
  Tensor S = pyramid_similarity(F, cfg_.grid, cfg_.pool, cfg_.use_pyramid, cfg_.cosine);
  PatchMatch m = gumbel_select(S, cfg_.gumbel_tau, ctx);
  if (ctx.matches) ctx.matches->push_back({path(), cfg_.grid, m.indices, S.detach()});
  Tensor F_bar = assemble_matched(F, m, cfg_.grid);
  Tensor F_d = align_ ? align_->forward(F_bar, F) : F_bar;
  return ops::crop(fuse_->forward(F, F_d, F_bar), h, w);
}

std::uint64_t Dsa::macs(std::int64_t h, std::int64_t w) const {
  const auto [hp, wp] = padded_extent(h, w);
  const auto P = static_cast<std::uint64_t>(cfg_.grid) * cfg_.grid;
  const auto C = static_cast<std::uint64_t>(cfg_.channels);
  const auto D = C * cfg_.pool * cfg_.pool;
  std::uint64_t m = P * P * D;  // level-0 similarity
  if (cfg_.use_pyramid) {
    m += 4 * C * static_cast<std::uint64_t>((hp / 2) * (wp / 2));  // bilinear downsample
    m += P * P * D + P * P * P;                                     // level-1 similarity, fusion
  }
  m += P * C * static_cast<std::uint64_t>(hp * wp);  // patch assembly
  if (align_) m += align_->macs(hp, wp);
  return m + fuse_->macs(hp, wp);
}

}  // namespace spikesr
