#pragma once

#include <ostream>
#include <string>
#include <vector>

#include "spikesr/image.hpp"
#include "spikesr/module.hpp"

namespace spikesr {

constexpr double kPsnrCap = 100.0;

/// Mean squared error between two planes of equal extents after removing
/// `border` pixels from every side. RGB inputs are compared on Y.
double mse_y(const ImagePlane& a, const ImagePlane& b, int border = 0);
/// 10 log10(1 / MSE), capped at 100 dB.
double psnr(const ImagePlane& a, const ImagePlane& b, int border = 0);
/// Single-scale SSIM on Y: 11x11 Gaussian window (sigma 1.5),
/// C1 = 0.01^2, C2 = 0.03^2, averaged over valid window positions.
double ssim(const ImagePlane& a, const ImagePlane& b, int border = 0);

struct LayerRate {
  std::string layer;
  double rate = 0.0;
  double ones = 0.0;
  std::int64_t total = 0;
};
/// Firing fraction per LIF layer; repeated layer names are merged.
std::vector<LayerRate> spike_stats(const std::vector<SpikeRecord>& trace);

struct ImageMetrics {
  std::string path;
  double psnr = 0.0;
  double ssim = 0.0;
};
/// Header, one row per image, then an aggregate row of the means.
void write_metrics_csv(std::ostream& out, const std::vector<ImageMetrics>& rows);

}  // namespace spikesr
