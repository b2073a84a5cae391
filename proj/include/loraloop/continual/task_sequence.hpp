#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "loraloop/data.hpp"
#include "loraloop/taskgen/specs.hpp"

namespace loraloop::continual {

/// One task: its classes (label i names classes[i]), the domain its images
/// come from, and disjoint train/test splits.
struct TaskData {
  std::string name;
  std::vector<std::string> classes;
  std::vector<taskgen::ClassSpec> specs;
  taskgen::DomainSpec domain;
  Dataset train;
  Dataset test;
};

/// Base pool C₀ (pretraining distribution) followed by tasks 1..n.
struct TaskSequence {
  TaskData base;
  std::vector<TaskData> tasks;
  /// Hash of the parameters that produced the suite; runs are comparable
  /// only when their suites share it.
  std::uint64_t fingerprint = 0;

  [[nodiscard]] std::size_t task_count() const noexcept { return tasks.size(); }
  /// Column j of the accuracy matrix: 0 is the base pool, j ≥ 1 is task j.
  [[nodiscard]] const TaskData& column(std::size_t j) const { return j == 0 ? base : tasks.at(j - 1); }
  [[nodiscard]] std::vector<std::string> all_classes() const;
};

}  // namespace loraloop::continual
