#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include "spikesr/data.hpp"
#include "spikesr/metrics.hpp"
#include "spikesr/model.hpp"

namespace spikesr {

struct AdamConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Parameters without a gradient are skipped.
class Adam {
 public:
  Adam(std::vector<NamedTensor> params, AdamConfig cfg = {});

  void step();
  void zero_grad();
  std::int64_t steps() const { return t_; }
  const AdamConfig& config() const { return cfg_; }

  /// Moments as "adam.m.<param>", "adam.v.<param>" plus "adam.t".
  std::vector<std::pair<std::string, Tensor>> state() const;
  void load_state(const Checkpoint& ck);

  const std::vector<double>& first_moment(std::size_t i) const { return m_[i]; }
  const std::vector<double>& second_moment(std::size_t i) const { return v_[i]; }

 private:
  std::vector<NamedTensor> params_;
  AdamConfig cfg_;
  std::vector<std::vector<double>> m_, v_;
  std::int64_t t_ = 0;
};

/// Scales all gradients so their global L2 norm is at most max_norm.
/// Returns the norm before scaling.
double clip_grad_norm(const std::vector<NamedTensor>& params, double max_norm);

enum class LossKind { l1, l2 };
Tensor reconstruction_loss(const Tensor& sr, const Tensor& hr, LossKind kind);

struct TrainConfig {
  std::string variant = "full";
  std::string data_root;
  std::string manifest;      // defaults to every PNG under data_root
  std::string val_manifest;  // optional
  std::string out = "run";
  std::uint64_t seed = 0;
  int epochs = 1000;
  std::int64_t steps = 0;  // > 0 overrides epochs
  int batch = 4;
  int patch = 64;  // LR patch side
  double lr = 1e-4;
  std::string loss = "l1";
  double clip = 0.0;  // global-norm clipping, 0 disables
  bool augment = true;
  std::int64_t checkpoint_every = 1000;
  std::int64_t val_every = 0;
  std::int64_t log_every = 10;
  int time_steps = 0;          // 0 keeps the model default
  bool deterministic = false;  // 64-bit checkpoints
  std::string resume;
  std::map<std::string, std::string> model;  // "model.<key>" overrides

  void set(const std::string& key, const std::string& value);
  void validate() const;
  std::string to_text() const;
  /// key=value lines; '#' starts a comment.
  static TrainConfig from_file(const std::string& path);
  void merge_text(const std::string& text);

  ModelConfig model_config() const;
  LossKind loss_kind() const;
};

struct LogRow {
  std::int64_t step = 0;
  std::int64_t epoch = 0;
  double loss = 0.0;
  double val_psnr = -1.0;  // < 0 when not evaluated
};

/// Super-resolves one image with the model in eval mode.
ImagePlane super_resolve(SpikeSR& model, const ImagePlane& lr, int time_steps = 0);

/// PSNR/SSIM on Y against each image's HR, cropping `border` pixels per side
/// (negative: the model scale).
std::vector<ImageMetrics> evaluate(SpikeSR& model, const std::vector<TrainImage>& images, int time_steps = 0,
                                   int border = -1);
/// Same protocol with bicubic upsampling in place of the model.
std::vector<ImageMetrics> evaluate_bicubic(const std::vector<TrainImage>& images, int scale, int border = -1);
double mean_psnr(const std::vector<ImageMetrics>& rows);

class Trainer {
 public:
  Trainer(TrainConfig cfg, std::vector<TrainImage> train, std::vector<TrainImage> val = {});

  /// Loads model, optimizer and step counter from a checkpoint.
  void resume(const std::string& path);

  /// One optimization step on the batch for the current step; returns the loss.
  double step();
  /// Runs to the configured step budget, writing log.csv and checkpoints into
  /// cfg.out. `on_row` observes every logged row.
  void run(const std::function<void(const LogRow&)>& on_row = {});

  void save(const std::string& path) const;

  SpikeSR& model() { return *model_; }
  Adam& optimizer() { return *adam_; }
  std::int64_t current_step() const { return step_; }
  std::int64_t total_steps() const;
  std::int64_t steps_per_epoch() const;
  const TrainConfig& config() const { return cfg_; }

 private:
  double step_on(const Batch& b);

  TrainConfig cfg_;
  std::vector<TrainImage> train_, val_;
  std::unique_ptr<SpikeSR> model_;
  std::unique_ptr<Adam> adam_;
  BatchSpec spec_;
  std::int64_t step_ = 0;
};

}  // namespace spikesr
