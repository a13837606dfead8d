#include "spikesr/module.hpp"

namespace spikesr {

void Module::register_parameter(std::string name, Tensor* t) {
  t->set_requires_grad(true);
  params_.push_back({std::move(name), t});
}

void Module::register_buffer(std::string name, Tensor* t) { buffers_.push_back({std::move(name), t}); }

void Module::collect(const std::string& prefix, bool params, std::vector<NamedTensor>& out) {
  for (auto& nt : params ? params_ : buffers_) out.push_back({prefix + nt.name, nt.tensor});
  for (auto& [name, child] : children_) child->collect(prefix + name + ".", params, out);
}

std::vector<NamedTensor> Module::parameters() {
  std::vector<NamedTensor> out;
  collect("", true, out);
  return out;
}

std::vector<NamedTensor> Module::buffers() {
  std::vector<NamedTensor> out;
  collect("", false, out);
  return out;
}

std::int64_t Module::num_parameters() {
  std::int64_t n = 0;
  for (auto& p : parameters()) n += p.tensor->numel();
  return n;
}

void Module::assign_paths(const std::string& prefix) {
  path_ = prefix;
  for (auto& [name, child] : children_) child->assign_paths(prefix.empty() ? name : prefix + "." + name);
}

}  // namespace spikesr
