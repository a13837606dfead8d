#pragma once

#include <cstdint>
#include <functional>
#include <memory>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace spikesr {

using Shape = std::vector<std::int64_t>;

std::string shape_str(const Shape& s);
std::int64_t shape_numel(const Shape& s);

struct ShapeError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct NonFiniteError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

struct Node {
  Shape shape;
  std::vector<double> data;
  std::vector<double> grad;  // empty until first accumulation
  bool requires_grad = false;
  bool is_leaf = true;
  const char* op = "leaf";
  std::vector<std::shared_ptr<Node>> parents;
  // Reads this->grad and accumulates into the parents' grads.
  std::function<void(Node&)> backward;

  void ensure_grad() {
    if (grad.empty()) grad.assign(data.size(), 0.0);
  }
};

}  // namespace detail

/// Dense row-major tensor of doubles with an optional gradient.
///
/// Tensors share their storage node on copy. Values are immutable once an
/// op has consumed them; only leaves (parameters) are updated in place by the
/// optimizer, between graph constructions.
class Tensor {
 public:
  Tensor() = default;

  static Tensor zeros(Shape shape, bool requires_grad = false);
  static Tensor full(Shape shape, double value, bool requires_grad = false);
  static Tensor from(Shape shape, std::vector<double> values, bool requires_grad = false);
  static Tensor scalar(double v, bool requires_grad = false);

  bool defined() const { return node_ != nullptr; }
  const Shape& shape() const { return node_->shape; }
  std::int64_t dim(int axis) const;
  int rank() const { return static_cast<int>(node_->shape.size()); }
  std::int64_t numel() const { return static_cast<std::int64_t>(node_->data.size()); }

  std::span<const double> data() const& { return node_->data; }
  std::span<const double> data() const&& = delete;  // would dangle
  // In-place access; callers must not mutate tensors that a live graph reads.
  std::span<double> mutable_data() { return node_->data; }
  const std::vector<double>& values() const& { return node_->data; }
  std::vector<double> values() const&& { return node_->data; }

  bool requires_grad() const { return node_->requires_grad; }
  void set_requires_grad(bool on);
  bool has_grad() const { return !node_->grad.empty(); }
  std::span<const double> grad() const { return node_->grad; }
  std::span<double> mutable_grad();
  void zero_grad();

  double item() const;
  double at(std::initializer_list<std::int64_t> index) const;

  // Same values, no history.
  Tensor detach() const;
  Tensor clone() const;

  const char* op_name() const { return node_->op; }

  // Graph plumbing for op implementations.
  const std::shared_ptr<detail::Node>& node() const { return node_; }
  explicit Tensor(std::shared_ptr<detail::Node> n) : node_(std::move(n)) {}

 private:
  std::shared_ptr<detail::Node> node_;
};

/// Reverse-mode sweep from a scalar root; leaf grads accumulate.
void backward(const Tensor& root);

bool grad_enabled();

class NoGradGuard {
 public:
  NoGradGuard();
  ~NoGradGuard();
  NoGradGuard(const NoGradGuard&) = delete;
  NoGradGuard& operator=(const NoGradGuard&) = delete;

 private:
  bool prev_;
};

/// Strict mode: every op rejects non-finite inputs.
bool strict_mode();
class StrictModeGuard {
 public:
  explicit StrictModeGuard(bool on = true);
  ~StrictModeGuard();
  StrictModeGuard(const StrictModeGuard&) = delete;
  StrictModeGuard& operator=(const StrictModeGuard&) = delete;

 private:
  bool prev_;
};

/// Multiply-accumulate counter fed by the heavy primitives (conv, matmul,
/// attention, resampling). Thread-local; used to cross-check the analytic
/// complexity model.
std::uint64_t mac_counter();
void reset_mac_counter();
void add_macs(std::uint64_t n);

namespace detail {

void check_finite(const Tensor& t, const char* op);

// Creates the output node and wires it to its inputs when any of them needs a
// gradient and recording is enabled.
Tensor make_result(Shape shape, std::vector<double> data, const char* op,
                   std::vector<Tensor> inputs, std::function<void(Node&)> backward_fn);

inline bool needs_grad(const std::vector<Tensor>& inputs) {
  if (!grad_enabled()) return false;
  for (const auto& t : inputs)
    if (t.defined() && t.requires_grad()) return true;
  return false;
}

}  // namespace detail

}  // namespace spikesr
