#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>

#include "doctest.h"
#include "spikesr/data.hpp"

using namespace spikesr;
namespace fs = std::filesystem;

namespace {

ImagePlane random_image(int w, int h, int c, std::uint64_t seed) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(0.0, 1.0);
  ImagePlane img(w, h, c);
  for (double& v : img.values) v = u(rng);
  return img;
}

double max_diff(const ImagePlane& a, const ImagePlane& b) {
  REQUIRE(a.values.size() == b.values.size());
  double m = 0;
  for (std::size_t i = 0; i < a.values.size(); ++i) m = std::max(m, std::abs(a.values[i] - b.values[i]));
  return m;
}

// Keys cubic with a = -0.5, written out piecewise.
double keys(double x) {
  x = std::abs(x);
  if (x <= 1) return 1.5 * x * x * x - 2.5 * x * x + 1;
  if (x < 2) return -0.5 * x * x * x + 2.5 * x * x - 4 * x + 2;
  return 0;
}

int reflect_sym(int j, int n) {
  if (j < 0) return reflect_sym(-1 - j, n);
  if (j >= n) return reflect_sym(2 * n - 1 - j, n);
  return j;
}

// Direct 2-D evaluation of the antialiased cubic resampler.
ImagePlane resize_oracle(const ImagePlane& img, int ow, int oh) {
  auto weights = [](int in, int out, int i) {
    const double s = double(out) / in, k = std::min(s, 1.0);
    const double u = (i + 0.5) / s - 0.5;
    std::vector<std::pair<int, double>> w;
    double tot = 0;
    for (int j = -4 * in; j < 5 * in; ++j) {
      const double v = k * keys((u - j) * k);
      if (v != 0) {
        w.push_back({reflect_sym(j, in), v});
        tot += v;
      }
    }
    for (auto& p : w) p.second /= tot;
    return w;
  };
  ImagePlane out(ow, oh, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < oh; ++y)
      for (int x = 0; x < ow; ++x) {
        double v = 0;
        for (auto [jy, wy] : weights(img.height, oh, y))
          for (auto [jx, wx] : weights(img.width, ow, x)) v += wy * wx * img.at(c, jy, jx);
        out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
  return out;
}

fs::path scratch(const std::string& name) {
  auto p = fs::temp_directory_path() / ("spikesr_data_" + name);
  fs::remove_all(p);
  fs::create_directories(p);
  return p;
}

}  // namespace

TEST_CASE("cubic kernel: interpolating and partition of unity") {
  CHECK(cubic_kernel(0) == 1.0);
  CHECK(cubic_kernel(1) == 0.0);
  CHECK(cubic_kernel(2) == 0.0);
  CHECK(cubic_kernel(-2.5) == 0.0);
  for (double t : {0.1, 0.25, 0.5, 0.9})
    CHECK(cubic_kernel(t + 1) + cubic_kernel(t) + cubic_kernel(t - 1) + cubic_kernel(t - 2) == doctest::Approx(1.0).epsilon(1e-14));
}

TEST_CASE("bicubic: constant stays constant, scale 1 is identity") {
  ImagePlane c(13, 9, 3, 0.37);
  for (auto [w, h] : {std::pair{3, 2}, {52, 36}, {20, 7}})
    for (double v : bicubic_resize(c, w, h).values) CHECK(v == doctest::Approx(0.37).epsilon(1e-12));
  auto img = random_image(11, 7, 3, 1);
  CHECK(max_diff(bicubic_scale(img, 1.0), img) < 1e-12);
  CHECK_THROWS_AS(bicubic_resize(img, 0, 4), DataError);
}

TEST_CASE("bicubic: 8x8 ramp at 0.25 and random images match the direct oracle") {
  ImagePlane ramp(8, 8, 1);
  for (int y = 0; y < 8; ++y)
    for (int x = 0; x < 8; ++x) ramp.at(0, y, x) = (x + 2 * y) / 21.0;
  CHECK(max_diff(bicubic_scale(ramp, 0.25), resize_oracle(ramp, 2, 2)) < 1e-12);
  auto img = random_image(17, 12, 3, 2);
  CHECK(max_diff(bicubic_resize(img, 5, 4), resize_oracle(img, 5, 4)) < 1e-12);
  CHECK(max_diff(bicubic_resize(img, 40, 29), resize_oracle(img, 40, 29)) < 1e-12);
}

TEST_CASE("bicubic downscale reproduces a linear ramp away from the borders") {
  ImagePlane ramp(64, 4, 1);
  for (int y = 0; y < 4; ++y)
    for (int x = 0; x < 64; ++x) ramp.at(0, y, x) = x / 63.0;
  auto lr = bicubic_resize(ramp, 16, 4);
  for (int i = 2; i < 14; ++i) CHECK(lr.at(0, 1, i) == doctest::Approx((4 * i + 1.5) / 63.0).epsilon(1e-12));
}

TEST_CASE("degradation is deterministic and stays in [0,1]") {
  auto hr = random_image(37, 29, 3, 3);
  auto a = degrade(hr, 4), b = degrade(hr, 4);
  CHECK(a.width == 9);
  CHECK(a.height == 7);
  CHECK(a.values == b.values);
  for (double v : a.values) CHECK((v >= 0.0 && v <= 1.0));
  for (double v : bicubic_scale(a, 4).values) CHECK((v >= 0.0 && v <= 1.0));
}

TEST_CASE("rgb_to_y") {
  ImagePlane px(1, 1, 3, 0.0);
  CHECK(rgb_to_y(px).values[0] == doctest::Approx(16.0 / 255).epsilon(1e-15));
  px.values = {1, 1, 1};
  CHECK(rgb_to_y(px).values[0] == doctest::Approx(235.0 / 255).epsilon(1e-12));
  px.values = {0, 1, 0};
  CHECK(rgb_to_y(px).values[0] == doctest::Approx((128.553 + 16) / 255).epsilon(1e-15));
  ImagePlane gray(2, 2, 1, 0.3);
  CHECK(rgb_to_y(gray).values == gray.values);
}

TEST_CASE("patch pairs are aligned and deterministic") {
  auto t = prepare_image(random_image(160, 128, 3, 4), 4);
  std::mt19937_64 r1(7), r2(7);
  for (int i = 0; i < 20; ++i) {
    auto p = sample_patch_pair(t, 16, 4, r1);
    auto q = sample_patch_pair(t, 16, 4, r2);
    CHECK(p.x == q.x);
    CHECK(p.lr.values == q.lr.values);
    CHECK(p.hr.values == crop_image(t.hr, 4 * p.x, 4 * p.y, 64, 64).values);
    // LR pixel i has its centre at HR coordinate 4 i + 1.5 inside the HR crop.
    CHECK(p.lr.values == crop_image(t.lr, p.x, p.y, 16, 16).values);
    auto redo = degrade(p.hr, 4);
    for (int y = 3; y < 13; ++y)
      for (int x = 3; x < 13; ++x) CHECK(redo.at(1, y, x) == doctest::Approx(p.lr.at(1, y, x)).epsilon(1e-12));
  }
  auto small = prepare_image(random_image(60, 80, 3, 5), 4);
  CHECK_THROWS_AS(sample_patch_pair(small, 16, 4, r1), DataError);
}

TEST_CASE("crop positions are uniform (chi-square)") {
  auto t = prepare_image(random_image(76, 68, 3, 6), 4);  // LR 19x17, 16-pixel patches: 4 x 2 positions
  std::mt19937_64 rng(8);
  std::vector<double> counts(8, 0.0);
  const int n = 10000;
  for (int i = 0; i < n; ++i) {
    auto p = sample_patch_pair(t, 16, 4, rng);
    counts[p.y * 4 + p.x] += 1;
  }
  double chi2 = 0;
  for (double c : counts) chi2 += (c - n / 8.0) * (c - n / 8.0) / (n / 8.0);
  CHECK(chi2 < 24.32);  // 7 dof, p = 0.001
}

TEST_CASE("dihedral group laws and pixel alignment") {
  auto img = random_image(6, 4, 2, 9);
  CHECK(dihedral(dihedral(dihedral(dihedral(img, 1), 1), 1), 1).values == img.values);
  CHECK(dihedral(dihedral(img, 2), 2).values == img.values);
  CHECK(dihedral(dihedral(img, 4), 4).values == img.values);
  CHECK(dihedral(dihedral(img, 1), 3).values == img.values);
  auto r = dihedral(img, 1);
  CHECK(r.width == 4);
  CHECK(r.height == 6);
  CHECK(r.at(1, 0, 0) == img.at(1, 0, 5));
  for (int k = 0; k < 8; ++k) {
    int seen = 0;
    for (int j = 0; j < 8; ++j) seen += dihedral(img, k).values == dihedral(img, j).values;
    CHECK(seen == 1);
  }
  CHECK_THROWS(dihedral(img, 8));
}

TEST_CASE("augmentation commutes with degradation") {
  auto hr = random_image(32, 32, 3, 10);
  for (int k = 0; k < 8; ++k) CHECK(max_diff(degrade(dihedral(hr, k), 4), dihedral(degrade(hr, 4), k)) < 1e-12);

  auto t = prepare_image(random_image(64, 64, 3, 11), 4);
  std::mt19937_64 rng(12);
  for (int i = 0; i < 16; ++i) {
    auto p = augment(sample_patch_pair(t, 8, 4, rng), rng);
    auto redo = degrade(p.hr, 4);
    for (int y = 3; y < 5; ++y)
      for (int x = 3; x < 5; ++x) CHECK(redo.at(0, y, x) == doctest::Approx(p.lr.at(0, y, x)).epsilon(1e-12));
  }
}

TEST_CASE("PNG round trip quantizes to 8 bits") {
  auto dir = scratch("png");
  auto img = random_image(7, 5, 3, 13);
  write_png((dir / "a.png").string(), img);
  auto back = read_png((dir / "a.png").string());
  CHECK(back.channels == 3);
  CHECK(back.width == 7);
  for (std::size_t i = 0; i < img.values.size(); ++i) CHECK(back.values[i] == std::round(img.values[i] * 255) / 255);
  auto g = random_image(3, 3, 1, 14);
  write_png((dir / "g.png").string(), g);
  CHECK(read_png((dir / "g.png").string()).channels == 1);
  CHECK_THROWS_AS(read_png((dir / "missing.png").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("manifests") {
  auto dir = scratch("manifest");
  for (int i = 0; i < 3; ++i) write_png((dir / ("img" + std::to_string(i) + ".png")).string(), random_image(40 + 8 * i, 40 + 8 * i, 3, 20 + i));
  {
    std::ofstream m(dir / "train.txt");
    m << "# three images\nsplit=val\nscale=4\nimg0.png\nimg1.png\n\nimg2.png\n";
  }
  auto m = read_manifest((dir / "train.txt").string());
  CHECK(m.split == "val");
  CHECK(m.scale == 4);
  REQUIRE(m.entries.size() == 3);
  CHECK(m.full_path(1) == (dir / "img1.png").string());
  write_manifest((dir / "copy.txt").string(), m);
  CHECK(read_manifest((dir / "copy.txt").string()).entries == m.entries);
  CHECK(scan_directory(dir.string()).entries == m.entries);

  auto imgs = load_images(m, 48);  // img0 is too small and skipped
  REQUIRE(imgs.size() == 2);
  CHECK(imgs[0].hr.width == 48);
  CHECK(imgs[0].lr.width == 12);

  { std::ofstream e(dir / "empty.txt"); e << "split=train\n"; }
  CHECK_THROWS_AS(read_manifest((dir / "empty.txt").string()), DataError);
  fs::remove_all(dir);
}

TEST_CASE("batches are a function of (seed, step) and the loader preserves order") {
  std::vector<TrainImage> imgs;
  for (int i = 0; i < 3; ++i) imgs.push_back(prepare_image(random_image(48, 48, 3, 30 + i), 4));
  BatchSpec spec;
  spec.batch = 2;
  spec.lr_patch = 6;
  spec.seed = 5;
  auto a = make_batch(imgs, spec, 3), b = make_batch(imgs, spec, 3), c = make_batch(imgs, spec, 4);
  CHECK(a.lr.shape() == Shape{2, 3, 6, 6});
  CHECK(a.hr.shape() == Shape{2, 3, 24, 24});
  CHECK(a.lr.values() == b.lr.values());
  CHECK(a.lr.values() != c.lr.values());
  BatchLoader loader(imgs, spec, 2, 3, 4);
  for (std::int64_t s = 2; s < 12; ++s) {
    auto got = loader.next();
    CHECK(got.step == s);
    CHECK(got.hr.values() == make_batch(imgs, spec, s).hr.values());
  }
}

TEST_CASE("SPIKESR_THREADS caps the worker count") {
  setenv("SPIKESR_THREADS", "3", 1);
  CHECK(worker_count() == 3);
  setenv("SPIKESR_THREADS", "0", 1);
  CHECK(worker_count() >= 1);
  unsetenv("SPIKESR_THREADS");
}
