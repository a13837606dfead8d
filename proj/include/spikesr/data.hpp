#pragma once

#include <condition_variable>
#include <cstdint>
#include <map>
#include <mutex>
#include <random>
#include <stdexcept>
#include <string>
#include <thread>
#include <vector>

#include "spikesr/image.hpp"

namespace spikesr {

struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// 8-bit PNG, gray or RGB (alpha is dropped; 16-bit is reduced to 8).
ImagePlane read_png(const std::string& path);
void write_png(const std::string& path, const ImagePlane& img);

/// Cubic convolution kernel with a = -0.5.
double cubic_kernel(double x);

/// Separable bicubic resampling (a = -0.5, pixel-centre alignment, symmetric
/// borders). Downscaling widens the kernel by 1/scale (antialiasing). Output is
/// clamped to [0,1].
ImagePlane bicubic_resize(const ImagePlane& img, int out_w, int out_h);
/// Output extents round(w * scale), round(h * scale).
ImagePlane bicubic_scale(const ImagePlane& img, double scale);

/// Crops the bottom/right so both extents are multiples of `scale`.
ImagePlane mod_crop(const ImagePlane& img, int scale);
/// LR counterpart of an HR image: bicubic downscale of mod_crop(hr).
ImagePlane degrade(const ImagePlane& hr, int scale);

/// BT.601 luma: (65.481 R + 128.553 G + 24.966 B + 16) / 255. Single-channel
/// input is returned unchanged.
ImagePlane rgb_to_y(const ImagePlane& img);

ImagePlane crop_image(const ImagePlane& img, int x, int y, int w, int h);

/// Dihedral transform k in [0, 8): rotate k % 4 quarter turns
/// counter-clockwise, then flip horizontally when k >= 4.
ImagePlane dihedral(const ImagePlane& img, int k);

struct TrainImage {
  std::string path;
  ImagePlane hr;  // mod-cropped
  ImagePlane lr;
};
TrainImage prepare_image(ImagePlane hr, int scale, std::string path = {});

struct PatchPair {
  ImagePlane lr;
  ImagePlane hr;
  int x = 0;  // LR crop origin
  int y = 0;
};

/// Aligned crops: LR window at (x, y) of side lr_patch and the HR window at
/// (scale x, scale y) of side scale * lr_patch. Throws DataError when the
/// image is too small.
PatchPair sample_patch_pair(const TrainImage& img, int lr_patch, int scale, std::mt19937_64& rng);
/// Applies one random dihedral transform to both members.
PatchPair augment(PatchPair pair, std::mt19937_64& rng);

/// Text manifest: optional `split=` and `scale=` header lines, `#` comments,
/// then one image path per line relative to `root`.
struct DatasetManifest {
  std::string root;
  std::string split = "train";
  int scale = 4;
  std::vector<std::string> entries;

  std::string full_path(std::size_t i) const;
};
/// Reads a manifest. `root` defaults to the manifest's directory.
DatasetManifest read_manifest(const std::string& path, const std::string& root = {});
void write_manifest(const std::string& path, const DatasetManifest& m);
/// Lists the PNG files under `root` (sorted) as a manifest.
DatasetManifest scan_directory(const std::string& root, const std::string& split = "train", int scale = 4);

/// Decodes and degrades every entry. Unreadable files and images smaller than
/// `min_hr_side` are skipped with a warning on stderr. Decoding runs on
/// `worker_count()` threads; output order follows the manifest.
std::vector<TrainImage> load_images(const DatasetManifest& m, int min_hr_side = 0);

/// SPIKESR_THREADS when set (>= 1), else the hardware concurrency.
int worker_count();

struct Batch {
  std::int64_t step = 0;
  Tensor lr;  // (B, 3, p, p)
  Tensor hr;  // (B, 3, scale p, scale p)
};

struct BatchSpec {
  int batch = 4;
  int lr_patch = 64;
  int scale = 4;
  bool augment = true;
  std::uint64_t seed = 0;
};

/// The batch for `step` is a pure function of (images, spec, step): its RNG
/// is seeded from (seed, step).
Batch make_batch(const std::vector<TrainImage>& images, const BatchSpec& spec, std::int64_t step);

/// Prefetches consecutive batches on worker threads into a bounded buffer
/// and hands them out in step order.
class BatchLoader {
 public:
  BatchLoader(const std::vector<TrainImage>& images, BatchSpec spec, std::int64_t first_step, int workers = 0,
              std::size_t capacity = 8);
  ~BatchLoader();
  BatchLoader(const BatchLoader&) = delete;
  BatchLoader& operator=(const BatchLoader&) = delete;

  Batch next();

 private:
  void run();

  const std::vector<TrainImage>& images_;
  BatchSpec spec_;
  std::size_t capacity_;
  std::int64_t next_claim_;
  std::int64_t next_out_;
  bool stop_ = false;
  std::mutex mu_;
  std::condition_variable cv_;
  std::map<std::int64_t, Batch> ready_;
  std::string error_;
  std::vector<std::thread> threads_;
};

std::uint64_t mix_seed(std::uint64_t seed, std::uint64_t stream);

}  // namespace spikesr
