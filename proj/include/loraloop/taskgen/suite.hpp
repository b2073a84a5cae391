#pragma once

#include <cstdint>
#include <filesystem>
#include <string>

#include "loraloop/continual/task_sequence.hpp"
#include "loraloop/numcore/tensor.hpp"
#include "loraloop/taskgen/specs.hpp"

namespace loraloop::taskgen {

enum class GapProfile { mild, hard };

GapProfile parse_gap_profile(const std::string& s);
const char* to_string(GapProfile p);

struct SuiteConfig {
  std::uint64_t seed = 1;
  std::size_t n_tasks = 5;
  std::size_t classes_per_task = 8;
  std::size_t base_classes = 12;
  std::size_t train_per_class = 100;
  std::size_t test_per_class = 50;
  GapProfile profile = GapProfile::hard;
};

/// Every class the pattern grid can express, in grid order.
std::vector<ClassSpec> class_grid();

/// Domain of task `task` (1-based) out of `n_tasks`; strength grows with the
/// task index under the hard profile.
DomainSpec task_domain(GapProfile profile, std::size_t task, std::size_t n_tasks);

/// Renders one 16x16 image in [0,1] as a [256] tensor: pattern first, then the
/// domain transform. Pattern jitter and domain randomness come from separate
/// streams of `seed`, so the same seed gives the same pattern under any domain.
num::Tensor render_sample(const ClassSpec& cls, const DomainSpec& domain, std::uint64_t seed);

continual::TaskSequence make_suite(const SuiteConfig& config);

std::uint64_t suite_fingerprint(const SuiteConfig& config);

/// Writes PGM images and a JSON manifest for every split of every task.
void dump_suite(const continual::TaskSequence& suite, const std::filesystem::path& dir);

}  // namespace loraloop::taskgen
