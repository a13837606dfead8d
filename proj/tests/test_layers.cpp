#include <cmath>

#include "doctest.h"
#include "gradcheck.hpp"
#include "spikesr/layers.hpp"

using namespace spikesr;
using testutil::gradcheck;
using testutil::project;
using testutil::randn;

TEST_CASE("pixel_shuffle index formula and bijection") {
  auto x = randn({2, 12, 3, 4}, 1);
  CHECK(ops::pixel_shuffle(x, 1).values() == x.values());
  auto y = ops::pixel_shuffle(Tensor::from({1, 4, 1, 1}, {1, 2, 3, 4}), 2);
  CHECK(y.shape() == Shape{1, 1, 2, 2});
  CHECK(y.values() == std::vector<double>{1, 2, 3, 4});
  auto s = ops::pixel_shuffle(x, 2);
  CHECK(s.shape() == Shape{2, 3, 6, 8});
  // out(b,c,rh+i,rw+j) = in(b, c r^2 + i r + j, h, w)
  for (int c = 0; c < 3; ++c)
    for (int h = 0; h < 3; ++h)
      for (int w = 0; w < 4; ++w)
        for (int i = 0; i < 2; ++i)
          for (int j = 0; j < 2; ++j) CHECK(s.at({1, c, 2 * h + i, 2 * w + j}) == x.at({1, c * 4 + i * 2 + j, h, w}));
  CHECK(ops::pixel_unshuffle(s, 2).values() == x.values());
  CHECK_THROWS_AS(ops::pixel_shuffle(Tensor::zeros({1, 3, 2, 2}), 2), ShapeError);
}

TEST_CASE("bilinear_resize constants, identity, ramp oracle") {
  auto c = Tensor::full({1, 2, 5, 7}, 0.37);
  for (double s : {0.5, 1.7, 3.0}) {
    auto y = ops::bilinear_resize_scale(c, s);
    for (double v : y.data()) CHECK(v == doctest::Approx(0.37).epsilon(1e-15));
  }
  auto x = randn({1, 1, 5, 6}, 2);
  CHECK(ops::bilinear_resize_scale(x, 1.0).values() == x.values());

  // Bilinear reproduces an affine ramp exactly at the sampled positions
  // src = (o + 0.5) * 2 - 0.5.
  std::vector<double> ramp(16);
  for (int y = 0; y < 4; ++y)
    for (int xx = 0; xx < 4; ++xx) ramp[y * 4 + xx] = 4.0 * y + xx;
  auto r = ops::bilinear_resize_scale(Tensor::from({1, 1, 4, 4}, ramp), 0.5);
  REQUIRE(r.shape() == Shape{1, 1, 2, 2});
  for (int i = 0; i < 2; ++i)
    for (int j = 0; j < 2; ++j) CHECK(r.at({0, 0, i, j}) == doctest::Approx(4.0 * (2 * i + 0.5) + (2 * j + 0.5)).epsilon(1e-14));
  CHECK_THROWS_AS(ops::bilinear_resize_scale(Tensor::zeros({1, 1, 2, 2}), 0.2), ShapeError);
}

TEST_CASE("softmax, sigmoid and pooling basics") {
  auto u = ops::softmax_lastdim(Tensor::full({1, 5}, 3.0));
  for (double v : u.data()) CHECK(v == doctest::Approx(0.2).epsilon(1e-15));
  CHECK(ops::sigmoid(Tensor::scalar(0.0)).item() == 0.5);
  CHECK(global_avg_pool(Tensor::from({1, 1, 2, 2}, {1, 3, 5, 7}), {2, 3}).item() == 4.0);
  CHECK_THROWS_AS(ops::mean_axes(Tensor::zeros({2, 0}), {1}), ShapeError);
  CHECK_THROWS_AS(ops::softmax_lastdim(Tensor::zeros({2, 0})), ShapeError);
}

TEST_CASE("softmax rows sum to one and ignore row shifts") {
  auto x = randn({6, 9}, 3, 5.0);
  auto y = ops::softmax_lastdim(x);
  for (int r = 0; r < 6; ++r) {
    double s = 0;
    for (int j = 0; j < 9; ++j) s += y.at({r, j});
    CHECK(std::abs(s - 1.0) < 1e-12);
  }
  auto shifted = ops::softmax_lastdim(ops::add(x, Tensor::from({6, 1}, {1, -2, 30, 4, 0.5, -7})));
  CHECK(testutil::max_abs_diff(y, shifted) < 1e-12);
}

TEST_CASE("bilinear_resize preserves the mean of a constant image exactly") {
  auto c = Tensor::full({1, 1, 8, 8}, 0.25);
  auto y = ops::bilinear_resize(c, 5, 11);
  double m = 0;
  for (double v : y.data()) m += v;
  CHECK(m / static_cast<double>(y.numel()) == 0.25);
}

TEST_CASE("Conv2d parameter count and MLP formula") {
  std::mt19937_64 rng(0);
  Conv2d conv(3, 64, 3, rng);
  CHECK(conv.num_parameters() == 1792);
  CHECK(conv.macs(10, 10) == 3u * 64 * 9 * 100);

  Mlp mlp(3, 5, 2, rng);
  auto x = randn({1, 3, 2, 2}, 4);
  auto y = mlp.forward(x);
  auto params = mlp.parameters();
  REQUIRE(params.size() == 4);
  const Tensor &w1 = *params[0].tensor, &b1 = *params[1].tensor, &w2 = *params[2].tensor, &b2 = *params[3].tensor;
  for (int p = 0; p < 4; ++p) {
    const int yy = p / 2, xx = p % 2;
    std::vector<double> h(5);
    for (int k = 0; k < 5; ++k) {
      double s = b1.values()[k];
      for (int c = 0; c < 3; ++c) s += w1.at({k, c, 0, 0}) * x.at({0, c, yy, xx});
      h[k] = 0.5 * s * (1.0 + std::erf(s / std::sqrt(2.0)));
    }
    for (int o = 0; o < 2; ++o) {
      double s = b2.values()[o];
      for (int k = 0; k < 5; ++k) s += w2.at({o, k, 0, 0}) * h[k];
      CHECK(y.at({0, o, yy, xx}) == doctest::Approx(s).epsilon(1e-12));
    }
  }
  CHECK_THROWS(Mlp(3, 0, 3, rng));
}

TEST_CASE("Linear layer and its gradient") {
  std::mt19937_64 rng(1);
  Linear lin(4, 3, rng);
  auto x = randn({5, 4}, 5, 1.0, true);
  auto r = gradcheck([&](const std::vector<Tensor>& in) { return project(lin.forward(in[0])); }, {x, lin.weight, lin.bias});
  CHECK(r.rel_error < 1e-6);
}

TEST_CASE("fold and unfold time round-trip") {
  auto x = randn({3, 2, 4, 5, 5}, 6);
  auto f = fold_time(x);
  CHECK(f.shape() == Shape{6, 4, 5, 5});
  CHECK(unfold_time(f, 3).values() == x.values());
  CHECK_THROWS_AS(unfold_time(f, 4), ShapeError);
}
