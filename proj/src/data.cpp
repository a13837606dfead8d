#include "spikesr/data.hpp"

#include <png.h>

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>

namespace spikesr {

namespace fs = std::filesystem;

ImagePlane read_png(const std::string& path) {
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  if (!png_image_begin_read_from_file(&im, path.c_str())) throw DataError("cannot read PNG " + path + ": " + im.message);
  const bool color = (im.format & PNG_FORMAT_FLAG_COLOR) != 0;
  im.format = color ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const int c = color ? 3 : 1;
  std::vector<png_byte> buf(PNG_IMAGE_SIZE(im));
  if (!png_image_finish_read(&im, nullptr, buf.data(), 0, nullptr)) {
    std::string msg = im.message;
    png_image_free(&im);
    throw DataError("cannot decode PNG " + path + ": " + msg);
  }
  ImagePlane out(static_cast<int>(im.width), static_cast<int>(im.height), c);
  const std::size_t n = out.plane_size();
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < c; ++k) out.values[k * n + i] = buf[i * c + k] / 255.0;
  return out;
}

void write_png(const std::string& path, const ImagePlane& img) {
  if (img.channels != 1 && img.channels != 3) throw DataError("write_png: 1 or 3 channels required");
  png_image im{};
  im.version = PNG_IMAGE_VERSION;
  im.width = static_cast<png_uint_32>(img.width);
  im.height = static_cast<png_uint_32>(img.height);
  im.format = img.channels == 3 ? PNG_FORMAT_RGB : PNG_FORMAT_GRAY;
  const std::size_t n = img.plane_size();
  std::vector<png_byte> buf(n * img.channels);
  for (std::size_t i = 0; i < n; ++i)
    for (int k = 0; k < img.channels; ++k)
      buf[i * img.channels + k] =
          static_cast<png_byte>(std::lround(std::clamp(img.values[k * n + i], 0.0, 1.0) * 255.0));
  if (!png_image_write_to_file(&im, path.c_str(), 0, buf.data(), 0, nullptr))
    throw DataError("cannot write PNG " + path + ": " + im.message);
}

double cubic_kernel(double x) {
  const double a = -0.5;
  x = std::abs(x);
  if (x <= 1) return ((a + 2) * x - (a + 3)) * x * x + 1;
  if (x < 2) return ((a * x - 5 * a) * x + 8 * a) * x - 4 * a;
  return 0.0;
}

namespace {

int mirror(int j, int n) {
  while (j < 0 || j >= n) j = j < 0 ? -j - 1 : 2 * n - j - 1;
  return j;
}

struct Taps {
  std::vector<int> index;
  std::vector<double> weight;
};

std::vector<Taps> contributions(int in, int out) {
  const double scale = static_cast<double>(out) / in;
  const double s = std::min(scale, 1.0);
  const double half = 2.0 / s;
  std::vector<Taps> taps(static_cast<std::size_t>(out));
  for (int i = 0; i < out; ++i) {
    const double u = (i + 0.5) / scale - 0.5;
    double total = 0;
    for (int j = static_cast<int>(std::floor(u - half)); j <= static_cast<int>(std::ceil(u + half)); ++j) {
      const double w = s * cubic_kernel((u - j) * s);
      if (w == 0.0) continue;
      taps[i].index.push_back(mirror(j, in));
      taps[i].weight.push_back(w);
      total += w;
    }
    for (double& w : taps[i].weight) w /= total;
  }
  return taps;
}

}  // namespace

ImagePlane bicubic_resize(const ImagePlane& img, int out_w, int out_h) {
  if (out_w < 1 || out_h < 1 || img.width < 1 || img.height < 1)
    throw DataError("bicubic_resize: degenerate size " + std::to_string(out_w) + "x" + std::to_string(out_h));
  const auto tx = contributions(img.width, out_w);
  const auto ty = contributions(img.height, out_h);
  ImagePlane mid(out_w, img.height, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < img.height; ++y)
      for (int x = 0; x < out_w; ++x) {
        double v = 0;
        for (std::size_t k = 0; k < tx[x].index.size(); ++k) v += tx[x].weight[k] * img.at(c, y, tx[x].index[k]);
        mid.at(c, y, x) = v;
      }
  ImagePlane out(out_w, out_h, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int y = 0; y < out_h; ++y)
      for (int x = 0; x < out_w; ++x) {
        double v = 0;
        for (std::size_t k = 0; k < ty[y].index.size(); ++k) v += ty[y].weight[k] * mid.at(c, ty[y].index[k], x);
        out.at(c, y, x) = std::clamp(v, 0.0, 1.0);
      }
  return out;
}

ImagePlane bicubic_scale(const ImagePlane& img, double scale) {
  return bicubic_resize(img, static_cast<int>(std::lround(img.width * scale)),
                        static_cast<int>(std::lround(img.height * scale)));
}

ImagePlane crop_image(const ImagePlane& img, int x, int y, int w, int h) {
  if (x < 0 || y < 0 || w < 1 || h < 1 || x + w > img.width || y + h > img.height)
    throw DataError("crop outside image");
  ImagePlane out(w, h, img.channels);
  for (int c = 0; c < img.channels; ++c)
    for (int r = 0; r < h; ++r)
      std::copy_n(&img.values[(static_cast<std::size_t>(c) * img.height + y + r) * img.width + x], w, &out.at(c, r, 0));
  return out;
}

ImagePlane mod_crop(const ImagePlane& img, int scale) {
  const int w = img.width - img.width % scale, h = img.height - img.height % scale;
  if (w < scale || h < scale) throw DataError("image smaller than the scale factor");
  return w == img.width && h == img.height ? img : crop_image(img, 0, 0, w, h);
}

ImagePlane degrade(const ImagePlane& hr, int scale) {
  ImagePlane m = mod_crop(hr, scale);
  return bicubic_resize(m, m.width / scale, m.height / scale);
}

ImagePlane rgb_to_y(const ImagePlane& img) {
  if (img.channels == 1) return img;
  if (img.channels != 3) throw DataError("rgb_to_y: expected 3 channels");
  ImagePlane y(img.width, img.height, 1);
  const std::size_t n = img.plane_size();
  for (std::size_t i = 0; i < n; ++i)
    y.values[i] = (65.481 * img.values[i] + 128.553 * img.values[n + i] + 24.966 * img.values[2 * n + i] + 16.0) / 255.0;
  return y;
}

ImagePlane dihedral(const ImagePlane& img, int k) {
  if (k < 0 || k >= 8) throw std::invalid_argument("dihedral index must be in [0, 8)");
  ImagePlane cur = img;
  for (int r = 0; r < k % 4; ++r) {
    // Counter-clockwise quarter turn: out(y, x) = in(x, W - 1 - y).
    ImagePlane rot(cur.height, cur.width, cur.channels);
    for (int c = 0; c < cur.channels; ++c)
      for (int y = 0; y < rot.height; ++y)
        for (int x = 0; x < rot.width; ++x) rot.at(c, y, x) = cur.at(c, x, cur.width - 1 - y);
    cur = std::move(rot);
  }
  if (k >= 4)
    for (int c = 0; c < cur.channels; ++c)
      for (int y = 0; y < cur.height; ++y) {
        double* row = &cur.at(c, y, 0);
        std::reverse(row, row + cur.width);
      }
  return cur;
}

TrainImage prepare_image(ImagePlane hr, int scale, std::string path) {
  TrainImage t;
  t.path = std::move(path);
  t.hr = mod_crop(hr, scale);
  t.lr = bicubic_resize(t.hr, t.hr.width / scale, t.hr.height / scale);
  return t;
}

PatchPair sample_patch_pair(const TrainImage& img, int lr_patch, int scale, std::mt19937_64& rng) {
  if (img.lr.width < lr_patch || img.lr.height < lr_patch)
    throw DataError("image " + img.path + " too small for a " + std::to_string(lr_patch * scale) + " HR patch");
  std::uniform_int_distribution<int> ux(0, img.lr.width - lr_patch), uy(0, img.lr.height - lr_patch);
  PatchPair p;
  p.x = ux(rng);
  p.y = uy(rng);
  p.lr = crop_image(img.lr, p.x, p.y, lr_patch, lr_patch);
  p.hr = crop_image(img.hr, p.x * scale, p.y * scale, lr_patch * scale, lr_patch * scale);
  return p;
}

PatchPair augment(PatchPair pair, std::mt19937_64& rng) {
  const int k = std::uniform_int_distribution<int>(0, 7)(rng);
  pair.lr = dihedral(pair.lr, k);
  pair.hr = dihedral(pair.hr, k);
  return pair;
}

std::string DatasetManifest::full_path(std::size_t i) const {
  const fs::path p(entries.at(i));
  return p.is_absolute() ? p.string() : (fs::path(root) / p).string();
}

DatasetManifest read_manifest(const std::string& path, const std::string& root) {
  std::ifstream in(path);
  if (!in) throw DataError("cannot open manifest " + path);
  DatasetManifest m;
  m.root = root.empty() ? fs::absolute(path).parent_path().string() : root;
  std::string line;
  while (std::getline(in, line)) {
    line.erase(0, line.find_first_not_of(" \t\r"));
    line.erase(line.find_last_not_of(" \t\r") + 1);
    if (line.empty() || line[0] == '#') continue;
    if (line.rfind("split=", 0) == 0) {
      m.split = line.substr(6);
      if (m.split != "train" && m.split != "val" && m.split != "test") throw DataError("manifest: unknown split " + m.split);
    } else if (line.rfind("scale=", 0) == 0) {
      m.scale = std::stoi(line.substr(6));
    } else {
      m.entries.push_back(line);
    }
  }
  if (m.entries.empty()) throw DataError("manifest " + path + " lists no images");
  return m;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write manifest " + path);
  out << "split=" << m.split << "\nscale=" << m.scale << "\n";
  for (const auto& e : m.entries) out << e << "\n";
}

DatasetManifest scan_directory(const std::string& root, const std::string& split, int scale) {
  DatasetManifest m;
  m.root = root;
  m.split = split;
  m.scale = scale;
  if (!fs::is_directory(root)) throw DataError("not a directory: " + root);
  for (const auto& e : fs::recursive_directory_iterator(root)) {
    auto ext = e.path().extension().string();
    std::transform(ext.begin(), ext.end(), ext.begin(), [](unsigned char ch) { return std::tolower(ch); });
    if (e.is_regular_file() && ext == ".png") m.entries.push_back(fs::relative(e.path(), root).string());
  }
  std::sort(m.entries.begin(), m.entries.end());
  if (m.entries.empty()) throw DataError("no PNG files under " + root);
  return m;
}

int worker_count() {
  if (const char* env = std::getenv("SPIKESR_THREADS")) {
    const int n = std::atoi(env);
    if (n >= 1) return n;
  }
  return std::max(1u, std::thread::hardware_concurrency());
}

std::vector<TrainImage> load_images(const DatasetManifest& m, int min_hr_side) {
  const std::size_t n = m.entries.size();
  std::vector<TrainImage> slots(n);
  std::vector<std::string> errors(n);
  std::atomic<std::size_t> next{0};
  auto work = [&] {
    for (std::size_t i; (i = next++) < n;) {
      try {
        ImagePlane img = read_png(m.full_path(i));
        if (img.channels != 3) throw DataError("expected an RGB image");
        if (img.width < min_hr_side || img.height < min_hr_side)
          throw DataError("smaller than " + std::to_string(min_hr_side) + " pixels");
        slots[i] = prepare_image(std::move(img), m.scale, m.full_path(i));
      } catch (const std::exception& e) {
        errors[i] = e.what();
      }
    }
  };
  const int w = std::min<int>(worker_count(), static_cast<int>(n));
  std::vector<std::thread> pool;
  for (int t = 1; t < w; ++t) pool.emplace_back(work);
  work();
  for (auto& t : pool) t.join();
  std::vector<TrainImage> out;
  for (std::size_t i = 0; i < n; ++i) {
    if (errors[i].empty())
      out.push_back(std::move(slots[i]));
    else
      std::cerr << "warning: skipping " << m.full_path(i) << ": " << errors[i] << "\n";
  }
  return out;
}

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream) {
  // splitmix64 finalizer over the pair.
  std::uint64_t z = seed + 0x9e3779b97f4a7c15ULL * (stream + 1);
  z = (z ^ (z >> 30)) * 0xbf58476d1ce4e5b9ULL;
  z = (z ^ (z >> 27)) * 0x94d049bb133111ebULL;
  return z ^ (z >> 31);
}

Batch make_batch(const std::vector<TrainImage>& images, const BatchSpec& spec, std::int64_t step) {
  if (images.empty()) throw DataError("no training images");
  std::mt19937_64 rng(mix_seed(spec.seed, static_cast<std::uint64_t>(step)));
  std::uniform_int_distribution<std::size_t> pick(0, images.size() - 1);
  std::vector<ImagePlane> lr, hr;
  for (int b = 0; b < spec.batch; ++b) {
    PatchPair p = sample_patch_pair(images[pick(rng)], spec.lr_patch, spec.scale, rng);
    if (spec.augment) p = augment(std::move(p), rng);
    lr.push_back(std::move(p.lr));
    hr.push_back(std::move(p.hr));
  }
  return {step, images_to_tensor(lr), images_to_tensor(hr)};
}

BatchLoader::BatchLoader(const std::vector<TrainImage>& images, BatchSpec spec, std::int64_t first_step, int workers,
                         std::size_t capacity)
    : images_(images), spec_(spec), capacity_(std::max<std::size_t>(1, capacity)), next_claim_(first_step),
      next_out_(first_step) {
  if (spec.batch < 1) throw std::invalid_argument("batch size must be >= 1");
  const int n = workers > 0 ? workers : worker_count();
  for (int i = 0; i < n; ++i) threads_.emplace_back([this] { run(); });
}

BatchLoader::~BatchLoader() {
  {
    std::lock_guard<std::mutex> lk(mu_);
    stop_ = true;
  }
  cv_.notify_all();
  for (auto& t : threads_) t.join();
}

void BatchLoader::run() {
  for (;;) {
    std::int64_t step;
    {
      std::unique_lock<std::mutex> lk(mu_);
      cv_.wait(lk, [&] { return stop_ || next_claim_ - next_out_ < static_cast<std::int64_t>(capacity_); });
      if (stop_) return;
      step = next_claim_++;
    }
    Batch b;
    std::string err;
    try {
      b = make_batch(images_, spec_, step);
    } catch (const std::exception& e) {
      err = e.what();
    }
    {
      std::lock_guard<std::mutex> lk(mu_);
      if (!err.empty() && error_.empty()) error_ = err;
      ready_[step] = std::move(b);
    }
    cv_.notify_all();
  }
}

Batch BatchLoader::next() {
  std::unique_lock<std::mutex> lk(mu_);
  cv_.wait(lk, [&] { return !error_.empty() || ready_.count(next_out_); });
  if (!error_.empty()) throw DataError(error_);
  Batch b = std::move(ready_[next_out_]);
  ready_.erase(next_out_++);
  lk.unlock();
  cv_.notify_all();
  return b;
}

}  // namespace spikesr
