#pragma once

#include <cstdint>
#include <memory>
#include <string>
#include <vector>

#include "spikesr/blocks.hpp"

namespace spikesr {

struct ModelConfig {
  std::string variant = "full";
  int channels = 64;
  int ca_embed = 32;
  int mlp_hidden = 100;
  int num_sag = 4;
  int num_sab = 2;
  int time_steps = 4;
  int scale = 4;
  int dsa_grid = 4;
  int dsa_pool = 1;
  int attn_window = 16;
  int scb_kernel = 1;
  bool scb_lif_first = true;
  int hda_hidden = 4;
  int hda_kernel = 3;
  int ta_kernel = 3;
  int sa_kernel = 7;
  int ca_reduction = 4;
  std::string channel_attn = "hda";  // hda | ta_ca | none
  std::string spatial_attn = "dsa";  // dsa | sa | none
  bool use_dconv = true;
  bool use_pyramid = true;
  bool deform_over_input = false;
  bool cosine_similarity = false;
  double gumbel_tau = 1.0;
  LifParams lif;
  TdbnParams tdbn;
  std::uint64_t seed = 0;

  void validate() const;
  /// Sets one field from its text form; throws on unknown keys.
  void set(const std::string& key, const std::string& value);
  /// key=value lines, one per field.
  std::string to_text() const;
  static ModelConfig from_text(const std::string& text);
  BlockConfig block_config() const;
};

/// Named presets: s, m, full (= spikesr), baseline, variant_a, variant_b, toy.
ModelConfig preset(const std::string& name);

class SpikeSR : public Module {
 public:
  explicit SpikeSR(const ModelConfig& cfg);

  /// lr: (B, 3, h, w) -> (B, 3, scale*h, scale*w). time_steps <= 0 uses the
  /// configured T. Output is clamped to [0,1] outside training.
  Tensor forward(const Tensor& lr, RunContext& ctx, int time_steps = 0);

  /// Analytic multiply-accumulate count for one image.
  std::uint64_t macs(std::int64_t h, std::int64_t w, std::int64_t T) const;

  const ModelConfig& config() const { return cfg_; }

  Conv2d* shallow;
  std::vector<Sag*> sags;
  FusionBlock* fb;
  Conv2d* head;
  Conv2d* tail;

 private:
  ModelConfig cfg_;
};

struct ComplexityReport {
  std::int64_t params = 0;
  std::uint64_t macs = 0;
  // Reported "FLOPs" follow the multiply-accumulate convention (one MAC
  // counted once); flops_2x counts multiply and add separately.
  double flops() const { return static_cast<double>(macs); }
  double flops_2x() const { return 2.0 * static_cast<double>(macs); }
};

std::int64_t count_params(const ModelConfig& cfg);
ComplexityReport count_complexity(const ModelConfig& cfg, std::int64_t h, std::int64_t w, std::int64_t T);

std::unique_ptr<SpikeSR> build_variant(const std::string& name, std::uint64_t seed = 0);

// ---------------------------------------------------------------------------
// Checkpoints

struct CheckpointMeta {
  std::int64_t epoch = 0;
  std::int64_t step = 0;
  std::uint64_t seed = 0;
};

struct Checkpoint {
  ModelConfig config;
  CheckpointMeta meta;
  std::vector<std::pair<std::string, Tensor>> tensors;

  const Tensor* find(const std::string& name) const;
};

/// Writes parameters, buffers and `extra` tensors (e.g. optimizer moments)
/// to `path` via a temporary file and rename. value_bytes: 4 (f32) or 8 (f64).
void save_checkpoint(const std::string& path, SpikeSR& model, const CheckpointMeta& meta,
                     const std::vector<std::pair<std::string, Tensor>>& extra = {}, int value_bytes = 4);
Checkpoint read_checkpoint(const std::string& path);
/// Copies parameters and buffers from `ck` into `model` (names and shapes must match).
void load_into(SpikeSR& model, const Checkpoint& ck);
/// Builds a model from the stored config and loads its tensors.
std::unique_ptr<SpikeSR> load_model(const std::string& path);

}  // namespace spikesr
