#include "spikesr/tensor.hpp"

#include <cmath>
#include <sstream>
#include <unordered_set>

namespace spikesr {

namespace {
thread_local bool t_grad_enabled = true;
thread_local bool t_strict = false;
thread_local std::uint64_t t_macs = 0;
}  // namespace

std::string shape_str(const Shape& s) {
  std::ostringstream os;
  os << '(';
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (i) os << ',';
    os << s[i];
  }
  os << ')';
  return os.str();
}

std::int64_t shape_numel(const Shape& s) {
  std::int64_t n = 1;
  for (auto e : s) n *= e;
  return n;
}

static void validate_shape(const Shape& shape) {
  if (shape.size() > 5) throw ShapeError("tensor rank above 5: " + shape_str(shape));
  for (auto e : shape)
    if (e < 0) throw ShapeError("negative extent in shape " + shape_str(shape));
}

Tensor Tensor::zeros(Shape shape, bool requires_grad) { return full(std::move(shape), 0.0, requires_grad); }

Tensor Tensor::full(Shape shape, double value, bool requires_grad) {
  validate_shape(shape);
  auto n = std::make_shared<detail::Node>();
  n->data.assign(static_cast<std::size_t>(shape_numel(shape)), value);
  n->shape = std::move(shape);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::from(Shape shape, std::vector<double> values, bool requires_grad) {
  validate_shape(shape);
  if (static_cast<std::int64_t>(values.size()) != shape_numel(shape))
    throw ShapeError("value count " + std::to_string(values.size()) + " does not match shape " +
                     shape_str(shape));
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(values);
  n->requires_grad = requires_grad;
  return Tensor(std::move(n));
}

Tensor Tensor::scalar(double v, bool requires_grad) { return from({}, {v}, requires_grad); }

std::int64_t Tensor::dim(int axis) const {
  const int r = rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("axis out of range for shape " + shape_str(shape()));
  return node_->shape[static_cast<std::size_t>(axis)];
}

void Tensor::set_requires_grad(bool on) {
  if (!node_->is_leaf) throw std::logic_error("requires_grad can only be set on leaves");
  node_->requires_grad = on;
}

std::span<double> Tensor::mutable_grad() {
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  if (!node_->grad.empty()) std::fill(node_->grad.begin(), node_->grad.end(), 0.0);
}

double Tensor::item() const {
  if (numel() != 1) throw ShapeError("item() on tensor of shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::initializer_list<std::int64_t> index) const {
  if (static_cast<int>(index.size()) != rank())
    throw ShapeError("index rank mismatch for shape " + shape_str(shape()));
  std::int64_t off = 0;
  int i = 0;
  for (auto v : index) {
    const auto e = node_->shape[static_cast<std::size_t>(i++)];
    if (v < 0 || v >= e) throw std::out_of_range("index out of range");
    off = off * e + v;
  }
  return node_->data[static_cast<std::size_t>(off)];
}

Tensor Tensor::detach() const {
  auto n = std::make_shared<detail::Node>();
  n->shape = node_->shape;
  n->data = node_->data;
  return Tensor(std::move(n));
}

Tensor Tensor::clone() const {
  Tensor t = detach();
  t.node_->requires_grad = node_->requires_grad && node_->is_leaf;
  return t;
}

void backward(const Tensor& root) {
  if (!root.defined()) throw std::invalid_argument("backward on undefined tensor");
  if (root.numel() != 1) throw ShapeError("backward root must be scalar, got " + shape_str(root.shape()));
  if (!root.requires_grad()) return;

  // Iterative post-order DFS gives a topological order (parents first).
  // Owning references: clearing parents below would otherwise free nodes that
  // are still queued.
  std::vector<std::shared_ptr<detail::Node>> order;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<std::shared_ptr<detail::Node>, std::size_t>> stack;
  stack.emplace_back(root.node(), 0);
  seen.insert(root.node().get());
  while (!stack.empty()) {
    auto& [node, next] = stack.back();
    if (next < node->parents.size()) {
      std::shared_ptr<detail::Node> p = node->parents[next++];
      if (p && p->requires_grad && !seen.count(p.get())) {
        seen.insert(p.get());
        stack.emplace_back(std::move(p), 0);
      }
    } else {
      order.push_back(std::move(node));
      stack.pop_back();
    }
  }

  root.node()->ensure_grad();
  root.node()->grad[0] += 1.0;
  for (auto it = order.rbegin(); it != order.rend(); ++it) {
    detail::Node* n = it->get();
    if (n->is_leaf || !n->backward) continue;
    n->ensure_grad();
    n->backward(*n);
    // Release the graph behind this node; intermediate grads are dropped too.
    n->backward = nullptr;
    n->parents.clear();
    std::vector<double>().swap(n->grad);
  }
}

bool grad_enabled() { return t_grad_enabled; }

NoGradGuard::NoGradGuard() : prev_(t_grad_enabled) { t_grad_enabled = false; }
NoGradGuard::~NoGradGuard() { t_grad_enabled = prev_; }

bool strict_mode() { return t_strict; }
StrictModeGuard::StrictModeGuard(bool on) : prev_(t_strict) { t_strict = on; }
StrictModeGuard::~StrictModeGuard() { t_strict = prev_; }

std::uint64_t mac_counter() { return t_macs; }
void reset_mac_counter() { t_macs = 0; }
void add_macs(std::uint64_t n) { t_macs += n; }

namespace detail {

void check_finite(const Tensor& t, const char* op) {
  if (!t.defined()) return;
  for (double v : t.data())
    if (!std::isfinite(v))
      throw NonFiniteError(std::string("non-finite input to ") + op + " (shape " + shape_str(t.shape()) + ")");
}

Tensor make_result(Shape shape, std::vector<double> data, const char* op, std::vector<Tensor> inputs,
                   std::function<void(Node&)> backward_fn) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->op = op;
  n->is_leaf = false;
  if (needs_grad(inputs)) {
    n->requires_grad = true;
    n->parents.reserve(inputs.size());
    for (auto& t : inputs) n->parents.push_back(t.defined() ? t.node() : nullptr);
    n->backward = std::move(backward_fn);
  }
  return Tensor(std::move(n));
}

}  // namespace detail

}  // namespace spikesr
