#include "spikesr/metrics.hpp"

#include <cmath>
#include <iomanip>
#include <map>
#include <stdexcept>

#include "spikesr/data.hpp"

namespace spikesr {

namespace {

ImagePlane luma_cropped(const ImagePlane& img, int border) {
  ImagePlane y = rgb_to_y(img);
  if (border == 0) return y;
  if (2 * border >= y.width || 2 * border >= y.height) throw std::invalid_argument("border crop removes the whole image");
  return crop_image(y, border, border, y.width - 2 * border, y.height - 2 * border);
}

void check_pair(const ImagePlane& a, const ImagePlane& b) {
  if (a.width != b.width || a.height != b.height || a.channels != b.channels)
    throw std::invalid_argument("metric inputs differ in size: " + std::to_string(a.width) + "x" +
                                std::to_string(a.height) + "x" + std::to_string(a.channels) + " vs " +
                                std::to_string(b.width) + "x" + std::to_string(b.height) + "x" +
                                std::to_string(b.channels));
}

std::vector<double> gaussian_window() {
  std::vector<double> g(11);
  double s = 0;
  for (int i = 0; i < 11; ++i) s += g[i] = std::exp(-((i - 5) * (i - 5)) / (2 * 1.5 * 1.5));
  for (double& v : g) v /= s;
  return g;
}

}  // namespace

double mse_y(const ImagePlane& a, const ImagePlane& b, int border) {
  check_pair(a, b);
  const ImagePlane ya = luma_cropped(a, border), yb = luma_cropped(b, border);
  double s = 0;
  for (std::size_t i = 0; i < ya.values.size(); ++i) {
    const double d = ya.values[i] - yb.values[i];
    s += d * d;
  }
  return s / static_cast<double>(ya.values.size());
}

double psnr(const ImagePlane& a, const ImagePlane& b, int border) {
  const double m = mse_y(a, b, border);
  if (m == 0.0) return kPsnrCap;
  return std::min(kPsnrCap, 10.0 * std::log10(1.0 / m));
}

double ssim(const ImagePlane& a, const ImagePlane& b, int border) {
  check_pair(a, b);
  const ImagePlane x = luma_cropped(a, border), y = luma_cropped(b, border);
  if (x.width < 11 || x.height < 11) throw std::invalid_argument("ssim needs at least 11x11 pixels");
  const double c1 = 0.01 * 0.01, c2 = 0.03 * 0.03;
  const auto g = gaussian_window();
  const int W = x.width, H = x.height, ow = W - 10, oh = H - 10;
  // Separable filtering of x, y, x^2, y^2, xy along rows then columns.
  std::vector<std::vector<double>> rows(5, std::vector<double>(static_cast<std::size_t>(H) * ow));
  for (int r = 0; r < H; ++r)
    for (int c = 0; c < ow; ++c) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < 11; ++k) {
        const double u = x.at(0, r, c + k), v = y.at(0, r, c + k);
        s[0] += g[k] * u;
        s[1] += g[k] * v;
        s[2] += g[k] * u * u;
        s[3] += g[k] * v * v;
        s[4] += g[k] * u * v;
      }
      for (int q = 0; q < 5; ++q) rows[q][static_cast<std::size_t>(r) * ow + c] = s[q];
    }
  double total = 0;
  for (int r = 0; r < oh; ++r)
    for (int c = 0; c < ow; ++c) {
      double s[5] = {0, 0, 0, 0, 0};
      for (int k = 0; k < 11; ++k)
        for (int q = 0; q < 5; ++q) s[q] += g[k] * rows[q][static_cast<std::size_t>(r + k) * ow + c];
      const double mx = s[0], my = s[1];
      const double vx = s[2] - mx * mx, vy = s[3] - my * my, cxy = s[4] - mx * my;
      total += ((2 * mx * my + c1) * (2 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
    }
  return total / (static_cast<double>(oh) * ow);
}

std::vector<LayerRate> spike_stats(const std::vector<SpikeRecord>& trace) {
  std::vector<LayerRate> out;
  std::map<std::string, std::size_t> slot;
  for (const auto& r : trace) {
    auto [it, fresh] = slot.emplace(r.layer, out.size());
    if (fresh) out.push_back({r.layer, 0.0, 0.0, 0});
    auto& l = out[it->second];
    l.ones += r.ones;
    l.total += r.total;
  }
  for (auto& l : out) l.rate = l.total ? l.ones / static_cast<double>(l.total) : 0.0;
  return out;
}

void write_metrics_csv(std::ostream& out, const std::vector<ImageMetrics>& rows) {
  out << "path,psnr,ssim\n" << std::setprecision(10);
  double p = 0, s = 0;
  for (const auto& r : rows) {
    out << r.path << ',' << r.psnr << ',' << r.ssim << '\n';
    p += r.psnr;
    s += r.ssim;
  }
  const double n = rows.empty() ? 1.0 : static_cast<double>(rows.size());
  out << "mean," << p / n << ',' << s / n << '\n';
}

}  // namespace spikesr
