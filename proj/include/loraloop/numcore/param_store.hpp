#pragma once

#include <cstddef>
#include <cstdint>
#include <deque>
#include <map>
#include <string>
#include <vector>

#include "loraloop/numcore/tensor.hpp"

namespace loraloop::num {

struct AdamWConfig {
  double lr = 1e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double weight_decay = 1e-2;
  double eps = 1e-8;
};

/// Named parameters plus their AdamW moments. Iteration order is insertion
/// order, which is also the checkpoint order.
class ParamStore {
 public:
  ParamStore() = default;
  ParamStore(const ParamStore&) = default;
  ParamStore& operator=(const ParamStore&) = default;
  ParamStore(ParamStore&&) noexcept = default;
  ParamStore& operator=(ParamStore&&) noexcept = default;

  Tensor& add(const std::string& name, Tensor init, bool trainable = true);
  [[nodiscard]] bool contains(const std::string& name) const;
  Tensor& get(const std::string& name);
  [[nodiscard]] const Tensor& get(const std::string& name) const;
  [[nodiscard]] std::vector<std::string> names() const;
  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
  [[nodiscard]] std::size_t parameter_count() const;

  void set_trainable(const std::string& name, bool trainable);
  [[nodiscard]] bool trainable(const std::string& name) const;

  /// Appends rows to a rank-2 parameter; its moment arrays grow with zeros.
  void append_rows(const std::string& name, const Tensor& rows);
  /// Replaces the value of an existing parameter with a same-shaped tensor.
  void assign(const std::string& name, const Tensor& value);

  void zero_grad();
  void clear_grad();
  [[nodiscard]] std::uint64_t step_count() const noexcept { return steps_; }
  /// Drops moments and the step counter (e.g. when a new task starts a fresh optimizer).
  void reset_optimizer();

  template <class F>
  void for_each(F&& f) {
    for (auto& e : entries_) f(e.name, e.value);
  }
  template <class F>
  void for_each(F&& f) const {
    for (const auto& e : entries_) f(e.name, e.value);
  }

  friend void adamw_step(ParamStore& store, const AdamWConfig& config);

 private:
  struct Entry {
    std::string name;
    Tensor value;
    bool trainable = true;
    std::vector<double> m;
    std::vector<double> v;
  };
  Entry& entry(const std::string& name);
  [[nodiscard]] const Entry& entry(const std::string& name) const;

  std::deque<Entry> entries_;
  std::map<std::string, std::size_t> index_;
  std::uint64_t steps_ = 0;
};

/// One AdamW update with decoupled weight decay over every trainable
/// parameter. All trainable parameters must carry a gradient.
void adamw_step(ParamStore& store, const AdamWConfig& config = {});

}  // namespace loraloop::num
