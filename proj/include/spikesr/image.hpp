#pragma once

#include <cstdint>
#include <vector>

#include "spikesr/tensor.hpp"

namespace spikesr {

/// Planar raster (channel-major, then rows) with values in [0,1].
struct ImagePlane {
  int width = 0;
  int height = 0;
  int channels = 0;
  std::vector<double> values;

  ImagePlane() = default;
  ImagePlane(int w, int h, int c, double fill = 0.0)
      : width(w), height(h), channels(c), values(static_cast<std::size_t>(w) * h * c, fill) {}

  double& at(int c, int y, int x) { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  double at(int c, int y, int x) const { return values[(static_cast<std::size_t>(c) * height + y) * width + x]; }
  std::size_t plane_size() const { return static_cast<std::size_t>(width) * height; }
};

/// (1, C, H, W) tensor view of an image.
Tensor image_to_tensor(const ImagePlane& img);
/// Batch of images with equal extents -> (B, C, H, W).
Tensor images_to_tensor(const std::vector<ImagePlane>& imgs);
/// Image b of a (B, C, H, W) tensor, clamped to [0,1].
ImagePlane tensor_to_image(const Tensor& t, std::int64_t b = 0);

}  // namespace spikesr
