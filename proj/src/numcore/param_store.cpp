#include "loraloop/numcore/param_store.hpp"

#include <cmath>
#include <stdexcept>

namespace loraloop::num {

Tensor& ParamStore::add(const std::string& name, Tensor init, bool trainable) {
  if (index_.count(name)) throw std::invalid_argument("duplicate parameter name '" + name + "'");
  init.require_finite("parameter '" + name + "'");
  index_[name] = entries_.size();
  Entry e;
  e.name = name;
  e.trainable = trainable;
  e.m.assign(init.size(), 0.0);
  e.v.assign(init.size(), 0.0);
  e.value = std::move(init);
  entries_.push_back(std::move(e));
  return entries_.back().value;
}

bool ParamStore::contains(const std::string& name) const { return index_.count(name) != 0; }

ParamStore::Entry& ParamStore::entry(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second];
}

const ParamStore::Entry& ParamStore::entry(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("unknown parameter '" + name + "'");
  return entries_[it->second];
}

Tensor& ParamStore::get(const std::string& name) { return entry(name).value; }
const Tensor& ParamStore::get(const std::string& name) const { return entry(name).value; }

std::vector<std::string> ParamStore::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& e : entries_) out.push_back(e.name);
  return out;
}

std::size_t ParamStore::parameter_count() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

void ParamStore::set_trainable(const std::string& name, bool trainable) {
  entry(name).trainable = trainable;
}

bool ParamStore::trainable(const std::string& name) const { return entry(name).trainable; }

void ParamStore::append_rows(const std::string& name, const Tensor& rows) {
  auto& e = entry(name);
  if (e.value.rank() != 2 || rows.cols() != e.value.cols()) {
    throw ShapeError("append_rows: cannot append " + shape_string(rows.shape()) + " to '" + name +
                     "' " + shape_string(e.value.shape()));
  }
  std::vector<double> values(e.value.values().begin(), e.value.values().end());
  values.insert(values.end(), rows.values().begin(), rows.values().end());
  const auto new_rows = e.value.shape()[0] + rows.size() / rows.cols();
  e.value = Tensor(Shape{new_rows, e.value.cols()}, std::move(values));
  e.m.resize(e.value.size(), 0.0);
  e.v.resize(e.value.size(), 0.0);
}

void ParamStore::assign(const std::string& name, const Tensor& value) {
  auto& e = entry(name);
  if (e.value.shape() != value.shape()) {
    throw ShapeError("assign: '" + name + "' has shape " + shape_string(e.value.shape()) +
                     ", got " + shape_string(value.shape()));
  }
  e.value = Tensor(value.shape(), value.data());
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.value.zero_grad();
}

void ParamStore::clear_grad() {
  for (auto& e : entries_) e.value.clear_grad();
}

void ParamStore::reset_optimizer() {
  for (auto& e : entries_) {
    std::fill(e.m.begin(), e.m.end(), 0.0);
    std::fill(e.v.begin(), e.v.end(), 0.0);
  }
  steps_ = 0;
}

void adamw_step(ParamStore& store, const AdamWConfig& config) {
  std::string missing;
  for (const auto& e : store.entries_) {
    if (e.trainable && !e.value.has_grad()) missing += (missing.empty() ? "" : ", ") + e.name;
  }
  if (!missing.empty()) throw std::logic_error("adamw_step: missing gradient for " + missing);

  store.steps_ += 1;
  const double t = static_cast<double>(store.steps_);
  const double bc1 = 1.0 - std::pow(config.beta1, t);
  const double bc2 = 1.0 - std::pow(config.beta2, t);
  const double decay = 1.0 - config.lr * config.weight_decay;
  for (auto& e : store.entries_) {
    if (!e.trainable) continue;
    auto p = e.value.values();
    const auto g = e.value.grad();
    for (std::size_t i = 0; i < p.size(); ++i) {
      e.m[i] = config.beta1 * e.m[i] + (1.0 - config.beta1) * g[i];
      e.v[i] = config.beta2 * e.v[i] + (1.0 - config.beta2) * g[i] * g[i];
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      p[i] = p[i] * decay - config.lr * mhat / (std::sqrt(vhat) + config.eps);
    }
    e.value.require_finite("adamw_step: parameter '" + e.name + "'");
  }
}

}  // namespace loraloop::num
