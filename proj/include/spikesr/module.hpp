#pragma once

#include <cstdint>
#include <memory>
#include <random>
#include <string>
#include <vector>

#include "spikesr/tensor.hpp"

namespace spikesr {

/// One entry per LIF layer evaluated during a forward pass.
struct SpikeRecord {
  std::string layer;
  double ones = 0.0;      // number of emitted spikes
  std::int64_t total = 0;  // number of neuron-steps
  // Per-pixel firing rate averaged over time, batch and channels.
  int height = 0;
  int width = 0;
  std::vector<double> map;
  double rate() const { return total ? ones / static_cast<double>(total) : 0.0; }
};

/// Patch matching observed by one DSA call (diagnostics).
struct MatchRecord {
  std::string layer;
  int grid = 0;
  std::vector<std::int64_t> indices;  // (N, grid*grid)
  Tensor similarity;                   // (N, grid*grid, grid*grid)
};

/// Per-forward settings and private state.
struct RunContext {
  bool training = false;
  // Replace hard spikes and hard selections by their smooth relaxations
  // (used by finite-difference checks).
  bool relaxed = false;
  std::mt19937_64 rng{0};
  std::vector<SpikeRecord>* trace = nullptr;
  std::vector<MatchRecord>* matches = nullptr;

  static RunContext train(std::uint64_t seed) {
    RunContext c;
    c.training = true;
    c.rng.seed(seed);
    return c;
  }
  static RunContext eval() { return RunContext{}; }
};

struct NamedTensor {
  std::string name;
  Tensor* tensor;
};

/// Parameter and buffer registry. Modules are pinned in memory (held by
/// unique_ptr) so registered member addresses stay valid.
class Module {
 public:
  Module() = default;
  virtual ~Module() = default;
  Module(const Module&) = delete;
  Module& operator=(const Module&) = delete;

  std::vector<NamedTensor> parameters();
  std::vector<NamedTensor> buffers();
  std::int64_t num_parameters();

  /// Assigns dotted names ("sag0.sab1.scb0.lif") to this subtree.
  void assign_paths(const std::string& prefix);
  const std::string& path() const { return path_; }

 protected:
  void register_parameter(std::string name, Tensor* t);
  void register_buffer(std::string name, Tensor* t);
  template <class M>
  M* register_module(std::string name, std::unique_ptr<M> m) {
    M* raw = m.get();
    children_.push_back({std::move(name), std::move(m)});
    return raw;
  }

 private:
  void collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out);

  std::string path_;
  std::vector<NamedTensor> params_;
  std::vector<NamedTensor> buffers_;
  std::vector<std::pair<std::string, std::unique_ptr<Module>>> children_;
};

}  // namespace spikesr
