#include <cmath>
#include <sstream>

#include "doctest.h"
#include "gradcheck.hpp"
#include "spikesr/data.hpp"
#include "spikesr/metrics.hpp"
#include "spikesr/model.hpp"

using namespace spikesr;

namespace {

ImagePlane random_image(int w, int h, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImagePlane img(w, h, c);
  for (double& v : img.values) v = u(rng);
  return img;
}

double psnr_oracle(const ImagePlane& a, const ImagePlane& b) {
  auto ya = rgb_to_y(a), yb = rgb_to_y(b);
  std::vector<double> d;
  for (std::size_t i = 0; i < ya.values.size(); ++i) d.push_back(ya.values[i] - yb.values[i]);
  double sq = 0;
  for (double v : d) sq += v * v;
  return 10 * std::log10(d.size() / sq);
}

// Direct 2-D windowed SSIM on a single plane.
double ssim_oracle(const ImagePlane& a, const ImagePlane& b) {
  double g[11][11], gs = 0;
  for (int i = 0; i < 11; ++i)
    for (int j = 0; j < 11; ++j) gs += g[i][j] = std::exp(-((i - 5.0) * (i - 5.0) + (j - 5.0) * (j - 5.0)) / 4.5);
  double acc = 0;
  int n = 0;
  for (int y = 0; y + 11 <= a.height; ++y)
    for (int x = 0; x + 11 <= a.width; ++x, ++n) {
      double mx = 0, my = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          mx += g[i][j] / gs * a.at(0, y + i, x + j);
          my += g[i][j] / gs * b.at(0, y + i, x + j);
        }
      double vx = 0, vy = 0, cv = 0;
      for (int i = 0; i < 11; ++i)
        for (int j = 0; j < 11; ++j) {
          const double dx = a.at(0, y + i, x + j) - mx, dy = b.at(0, y + i, x + j) - my;
          vx += g[i][j] / gs * dx * dx;
          vy += g[i][j] / gs * dy * dy;
          cv += g[i][j] / gs * dx * dy;
        }
      const double c1 = 1e-4, c2 = 9e-4;
      acc += (2 * mx * my + c1) * (2 * cv + c2) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return acc / n;
}

}  // namespace

TEST_CASE("PSNR closed forms") {
  auto a = random_image(9, 7, 3, 1);
  CHECK(psnr(a, a) == kPsnrCap);
  ImagePlane x(8, 8, 1, 0.2), y(8, 8, 1, 0.3);
  CHECK(psnr(x, y) == doctest::Approx(20.0).epsilon(1e-12));
  CHECK(psnr(y, x) == psnr(x, y));
  CHECK_THROWS(psnr(x, ImagePlane(8, 9, 1)));
}

TEST_CASE("PSNR matches the two-pass oracle on random pairs") {
  for (int i = 0; i < 50; ++i) {
    auto a = random_image(12, 10, 3, 100 + i), b = random_image(12, 10, 3, 200 + i);
    CHECK(psnr(a, b) == doctest::Approx(psnr_oracle(a, b)).epsilon(1e-9));
  }
}

TEST_CASE("PSNR border crop ignores the frame") {
  auto a = random_image(16, 16, 1, 2);
  auto b = a;
  for (int x = 0; x < 16; ++x) b.at(0, 0, x) = 1.0 - b.at(0, 0, x);
  CHECK(psnr(a, b, 4) == kPsnrCap);
  CHECK(psnr(a, b, 0) < 40.0);
}

TEST_CASE("SSIM identities and oracles") {
  auto a = random_image(20, 18, 3, 3);
  CHECK(ssim(a, a) == 1.0);

  ImagePlane cb(16, 16, 1), inv(16, 16, 1);
  for (int y = 0; y < 16; ++y)
    for (int x = 0; x < 16; ++x) {
      cb.at(0, y, x) = (x + y) % 2;
      inv.at(0, y, x) = 1.0 - cb.at(0, y, x);
    }
  CHECK(ssim(cb, inv) < 0.0);
  CHECK(ssim(cb, inv) == doctest::Approx(ssim_oracle(cb, inv)).epsilon(1e-9));

  const double c = 0.4;
  ImagePlane p(12, 12, 1, c), q(12, 12, 1, c + 0.1);
  const double lum = (2 * c * (c + 0.1) + 1e-4) / (c * c + (c + 0.1) * (c + 0.1) + 1e-4);
  CHECK(ssim(p, q) == doctest::Approx(lum).epsilon(1e-9));

  for (int i = 0; i < 50; ++i) {
    auto x = random_image(14, 13, 1, 300 + i), y = random_image(14, 13, 1, 400 + i);
    const double s = ssim(x, y);
    CHECK(s == doctest::Approx(ssim_oracle(x, y)).epsilon(1e-9));
    CHECK((s >= -1.0 && s <= 1.0));
  }
}

TEST_CASE("metrics are per image") {
  auto a = random_image(16, 16, 3, 4), b = random_image(16, 16, 3, 5);
  auto c = random_image(16, 16, 3, 6), d = random_image(16, 16, 3, 7);
  std::vector<ImageMetrics> rows{{"a", psnr(a, b), ssim(a, b)}, {"c", psnr(c, d), ssim(c, d)}};
  std::ostringstream os;
  write_metrics_csv(os, rows);
  std::istringstream is(os.str());
  std::string line;
  std::vector<std::string> lines;
  while (std::getline(is, line)) lines.push_back(line);
  REQUIRE(lines.size() == 4);
  CHECK(lines[0] == "path,psnr,ssim");
  CHECK(lines[3].rfind("mean,", 0) == 0);
}

TEST_CASE("spike statistics") {
  std::vector<SpikeRecord> tr{{"a", 2, 10, 0, 0, {}}, {"b", 0, 5, 0, 0, {}}, {"a", 3, 10, 0, 0, {}}};
  auto s = spike_stats(tr);
  REQUIRE(s.size() == 2);
  CHECK(s[0].layer == "a");
  CHECK(s[0].rate == 0.25);
  CHECK(s[1].rate == 0.0);

  ModelConfig cfg = preset("toy");
  SpikeSR model(cfg);
  for (double& v : model.shallow->bias.mutable_data()) v = 0.0;
  std::vector<SpikeRecord> trace;
  RunContext ctx;
  ctx.trace = &trace;
  model.forward(Tensor::zeros({1, 3, 16, 16}), ctx);
  REQUIRE(!trace.empty());
  CHECK(trace[0].rate() == 0.0);
  trace.clear();
  model.forward(testutil::randn({1, 3, 16, 16}, 1, 3.0), ctx);
  for (auto& l : spike_stats(trace)) CHECK((l.rate >= 0.0 && l.rate <= 1.0));
  CHECK(trace[0].map.size() == 256u);
}
