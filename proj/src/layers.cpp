#include "spikesr/layers.hpp"

#include <cmath>

namespace spikesr {

void kaiming_uniform(Tensor& t, std::int64_t fan_in, std::mt19937_64& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  std::uniform_real_distribution<double> u(-bound, bound);
  for (double& v : t.mutable_data()) v = u(rng);
}

Tensor fold_time(const Tensor& x) {
  if (x.rank() != 5) throw ShapeError("fold_time expects (T,B,C,H,W), got " + shape_str(x.shape()));
  return ops::reshape(x, {x.dim(0) * x.dim(1), x.dim(2), x.dim(3), x.dim(4)});
}

Tensor unfold_time(const Tensor& x, std::int64_t T) {
  if (x.rank() != 4 || T < 1 || x.dim(0) % T) throw ShapeError("unfold_time: bad shape " + shape_str(x.shape()));
  return ops::reshape(x, {T, x.dim(0) / T, x.dim(1), x.dim(2), x.dim(3)});
}

Tensor global_avg_pool(const Tensor& x, std::vector<int> axes) { return ops::mean_axes(x, std::move(axes), true); }

Conv2d::Conv2d(int cin, int cout, int kernel, std::mt19937_64& rng, bool with_bias, ops::PadMode mode)
    : cin_(cin), cout_(cout), k_(kernel), mode_(mode) {
  if (kernel % 2 == 0) throw ShapeError("Conv2d: kernel must be odd");
  const std::int64_t fan_in = static_cast<std::int64_t>(cin) * kernel * kernel;
  weight = Tensor::zeros({cout, cin, kernel, kernel});
  kaiming_uniform(weight, fan_in, rng);
  register_parameter("weight", &weight);
  if (with_bias) {
    bias = Tensor::zeros({cout});
    kaiming_uniform(bias, fan_in, rng);
    register_parameter("bias", &bias);
  }
}

Tensor Conv2d::forward(const Tensor& x) const { return ops::conv2d(x, weight, bias, 1, k_ / 2, mode_); }

Tensor Conv2d::forward_seq(const Tensor& x) const { return unfold_time(forward(fold_time(x)), x.dim(0)); }

std::uint64_t Conv2d::macs(std::int64_t h, std::int64_t w) const {
  return static_cast<std::uint64_t>(cout_) * cin_ * k_ * k_ * static_cast<std::uint64_t>(h * w);
}

Linear::Linear(int in, int out, std::mt19937_64& rng, bool with_bias) : in_(in), out_(out) {
  weight = Tensor::zeros({out, in});
  kaiming_uniform(weight, in, rng);
  register_parameter("weight", &weight);
  if (with_bias) {
    bias = Tensor::zeros({out});
    kaiming_uniform(bias, in, rng);
    register_parameter("bias", &bias);
  }
}

Tensor Linear::forward(const Tensor& x) const {
  Tensor y = ops::matmul(x, ops::transpose_last2(weight));
  return bias.defined() ? ops::add(y, bias) : y;
}

Mlp::Mlp(int in, int hidden, int out, std::mt19937_64& rng) {
  if (hidden <= 0) throw std::invalid_argument("Mlp: hidden width must be positive");
  fc1_ = register_module("fc1", std::make_unique<Conv2d>(in, hidden, 1, rng));
  fc2_ = register_module("fc2", std::make_unique<Conv2d>(hidden, out, 1, rng));
}

Tensor Mlp::forward(const Tensor& x) const { return fc2_->forward(ops::gelu(fc1_->forward(x))); }

std::uint64_t Mlp::macs(std::int64_t h, std::int64_t w) const { return fc1_->macs(h, w) + fc2_->macs(h, w); }

}  // namespace spikesr
