#include "spikesr/image.hpp"

#include <algorithm>

namespace spikesr {

Tensor image_to_tensor(const ImagePlane& img) { return images_to_tensor({img}); }

Tensor images_to_tensor(const std::vector<ImagePlane>& imgs) {
  if (imgs.empty()) throw ShapeError("images_to_tensor: empty batch");
  const auto& f = imgs.front();
  std::vector<double> v;
  v.reserve(imgs.size() * f.values.size());
  for (const auto& im : imgs) {
    if (im.width != f.width || im.height != f.height || im.channels != f.channels)
      throw ShapeError("images_to_tensor: images differ in extents");
    v.insert(v.end(), im.values.begin(), im.values.end());
  }
  return Tensor::from({static_cast<std::int64_t>(imgs.size()), f.channels, f.height, f.width}, std::move(v));
}

ImagePlane tensor_to_image(const Tensor& t, std::int64_t b) {
  if (t.rank() != 4) throw ShapeError("tensor_to_image expects (B,C,H,W), got " + shape_str(t.shape()));
  ImagePlane img(static_cast<int>(t.dim(3)), static_cast<int>(t.dim(2)), static_cast<int>(t.dim(1)));
  const auto n = static_cast<std::int64_t>(img.values.size());
  for (std::int64_t i = 0; i < n; ++i)
    img.values[static_cast<std::size_t>(i)] = std::clamp(t.values()[static_cast<std::size_t>(b * n + i)], 0.0, 1.0);
  return img;
}

}  // namespace spikesr
