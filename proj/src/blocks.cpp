#include "spikesr/blocks.hpp"

namespace spikesr {

Scb::Scb(const BlockConfig& cfg, std::mt19937_64& rng) : lif_first_(cfg.scb_lif_first) {
  lif = register_module("lif", std::make_unique<Lif>(cfg.lif));
  conv = register_module("conv", std::make_unique<Conv2d>(cfg.channels, cfg.channels, cfg.scb_kernel, rng));
  bn = register_module("bn", std::make_unique<Tdbn>(cfg.channels, cfg.lif.v_threshold, cfg.tdbn));
}

Tensor Scb::forward(const Tensor& x, RunContext& ctx) {
  if (lif_first_) return bn->forward(conv->forward_seq(lif->forward(x, ctx)), ctx.training);
  return lif->forward(bn->forward(conv->forward_seq(x), ctx.training), ctx);
}

Hda::Hda(int hidden, int kernel, std::mt19937_64& rng) {
  conv1 = register_module("conv1", std::make_unique<Conv2d>(1, hidden, kernel, rng, true, ops::PadMode::zero));
  conv2 = register_module("conv2", std::make_unique<Conv2d>(hidden, 1, kernel, rng, true, ops::PadMode::zero));
}

Tensor Hda::gate(const Tensor& u) const {
  if (u.rank() != 5) throw ShapeError("HDA expects (T,B,C,H,W), got " + shape_str(u.shape()));
  const auto T = u.dim(0), B = u.dim(1), C = u.dim(2);
  Tensor d = ops::mean_axes(u, {3, 4}, false);                          // (T, B, C)
  d = ops::reshape(ops::permute(d, {1, 0, 2}), {B, 1, T, C});           // one T x C map per sample
  Tensor g = ops::sigmoid(conv2->forward(ops::gelu(conv1->forward(d))));  // (B, 1, T, C)
  return ops::reshape(ops::permute(ops::reshape(g, {B, T, C}), {1, 0, 2}), {T, B, C, 1, 1});
}

TemporalAttention::TemporalAttention(int kernel, std::mt19937_64& rng) : k_(kernel) {
  if (kernel % 2 == 0) throw std::invalid_argument("temporal attention kernel must be odd");
  weight = Tensor::zeros({kernel});
  bias = Tensor::zeros({1});
  kaiming_uniform(weight, kernel, rng);
  kaiming_uniform(bias, kernel, rng);
  register_parameter("weight", &weight);
  register_parameter("bias", &bias);
}

Tensor TemporalAttention::gate(const Tensor& y) const {
  const auto T = y.dim(0), B = y.dim(1);
  const std::int64_t pad = k_ / 2;
  Tensor a = ops::mean_axes(y, {2, 3, 4}, false);  // (T, B)
  Tensor zeros = Tensor::zeros({pad, B});
  Tensor ap = pad ? ops::concat({zeros, a, zeros}, 0) : a;
  Tensor acc = ops::expand(bias, {T, B});
  for (int k = 0; k < k_; ++k) acc = ops::add(acc, ops::mul(ops::narrow(ap, 0, k, T), ops::narrow(weight, 0, k, 1)));
  return ops::reshape(ops::sigmoid(acc), {T, B, 1, 1, 1});
}

ChannelAttention::ChannelAttention(int channels, int reduction, std::mt19937_64& rng) {
  const int hidden = std::max(1, channels / reduction);
  fc1 = register_module("fc1", std::make_unique<Linear>(channels, hidden, rng));
  fc2 = register_module("fc2", std::make_unique<Linear>(hidden, channels, rng));
}

Tensor ChannelAttention::gate(const Tensor& y) const {
  const auto B = y.dim(1), C = y.dim(2);
  Tensor d = ops::mean_axes(y, {0, 3, 4}, false);  // (B, C)
  Tensor g = ops::sigmoid(fc2->forward(ops::gelu(fc1->forward(d))));
  return ops::reshape(g, {1, B, C, 1, 1});
}

SpatialAttention::SpatialAttention(int kernel, std::mt19937_64& rng) {
  conv = register_module("conv", std::make_unique<Conv2d>(1, 1, kernel, rng));
}

Tensor SpatialAttention::gate(const Tensor& y, bool per_step) const {
  const auto T = y.dim(0), B = y.dim(1), H = y.dim(3), W = y.dim(4);
  if (per_step) {
    Tensor m = ops::mean_axes(y, {2});  // (T, B, 1, H, W)
    return unfold_time(ops::sigmoid(conv->forward(fold_time(m))), T);
  }
  Tensor m = ops::reshape(ops::mean_axes(y, {0, 2}), {B, 1, H, W});
  return ops::reshape(ops::sigmoid(conv->forward(m)), {1, B, 1, H, W});
}

FusionBlock::FusionBlock(int ta_kernel, int sa_kernel, std::mt19937_64& rng) {
  ta = register_module("ta", std::make_unique<TemporalAttention>(ta_kernel, rng));
  sa = register_module("sa", std::make_unique<SpatialAttention>(sa_kernel, rng));
}

Tensor FusionBlock::forward(const Tensor& y) const {
  if (y.rank() != 5 || y.dim(0) < 1) throw ShapeError("fusion block expects (T,B,C,H,W), got " + shape_str(y.shape()));
  Tensor y1 = ops::mul(ta->gate(y), y);
  Tensor y2 = ops::mul(sa->gate(y, false), ops::rsub_scalar(1.0, y1));
  return ops::mean_axes(ops::add(y1, y2), {0}, false);
}

Sab::Sab(const BlockConfig& cfg, std::mt19937_64& rng) {
  scb1 = register_module("scb1", std::make_unique<Scb>(cfg, rng));
  scb2 = register_module("scb2", std::make_unique<Scb>(cfg, rng));
  conv = register_module("conv", std::make_unique<Conv2d>(cfg.channels, cfg.channels, 3, rng));
  bn = register_module("bn", std::make_unique<Tdbn>(cfg.channels, cfg.lif.v_threshold, cfg.tdbn));
  switch (cfg.channel_attn) {
    case ChannelAttn::hda:
      hda = register_module("hda", std::make_unique<Hda>(cfg.hda_hidden, cfg.hda_kernel, rng));
      break;
    case ChannelAttn::ta_ca:
      ta = register_module("ta", std::make_unique<TemporalAttention>(cfg.ta_kernel, rng));
      ca = register_module("ca", std::make_unique<ChannelAttention>(cfg.channels, cfg.ca_reduction, rng));
      break;
    case ChannelAttn::none:
      break;
  }
  switch (cfg.spatial_attn) {
    case SpatialAttn::dsa: {
      DsaConfig d = cfg.dsa;
      d.channels = cfg.channels;
      dsa = register_module("dsa", std::make_unique<Dsa>(d, rng));
      break;
    }
    case SpatialAttn::sa:
      sa = register_module("sa", std::make_unique<SpatialAttention>(cfg.sa_kernel, rng));
      break;
    case SpatialAttn::none:
      break;
  }
}

Tensor Sab::forward(const Tensor& x, RunContext& ctx) {
  Tensor u = ops::add(scb2->forward(scb1->forward(x, ctx), ctx), bn->forward(conv->forward_seq(x), ctx.training));
  if (hda) u = hda->forward(u);
  if (ta) u = ops::mul(ops::mul(u, ta->gate(u)), ca->gate(u));
  if (dsa) u = unfold_time(dsa->forward(fold_time(u), ctx), x.dim(0));
  if (sa) u = ops::mul(u, sa->gate(u, true));
  return ops::add(x, u);
}

std::uint64_t Sab::macs(std::int64_t h, std::int64_t w, std::int64_t T) const {
  const auto C = conv->out_channels();
  std::uint64_t m = scb1->macs(h, w, T) + scb2->macs(h, w, T) + T * conv->macs(h, w);
  if (hda) m += hda->macs(T, C);
  if (ca) m += ca->macs();
  if (dsa) m += T * dsa->macs(h, w);
  if (sa) m += T * sa->macs(h, w);
  return m;
}

Sag::Sag(const BlockConfig& cfg, int num_sab, std::mt19937_64& rng) {
  for (int i = 0; i < num_sab; ++i)
    sabs.push_back(register_module("sab" + std::to_string(i), std::make_unique<Sab>(cfg, rng)));
  tail = register_module("scb", std::make_unique<Scb>(cfg, rng));
}

Tensor Sag::forward(const Tensor& x, RunContext& ctx) {
  Tensor y = x;
  for (Sab* s : sabs) y = s->forward(y, ctx);
  return ops::add(x, tail->forward(y, ctx));
}

std::uint64_t Sag::macs(std::int64_t h, std::int64_t w, std::int64_t T) const {
  std::uint64_t m = tail->macs(h, w, T);
  for (const Sab* s : sabs) m += s->macs(h, w, T);
  return m;
}

}  // namespace spikesr
