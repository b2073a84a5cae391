#pragma once

#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "loraloop/data.hpp"
#include "loraloop/generator/diffusion.hpp"
#include "loraloop/numcore/rng.hpp"
#include "loraloop/vlm/dual_encoder.hpp"

namespace loraloop::selection {

struct ScoredItem {
  std::size_t id = 0;
  std::string class_name;
  double confidence = 0.0;
};

enum class Policy { top, bottom, middle, random, top_and_bottom };

Policy parse_policy(const std::string& name);
const char* to_string(Policy p);

/// Positions of `items` ordered by (-confidence, position).
std::vector<std::size_t> rank_descending(std::span<const ScoredItem> items);

/// Positions chosen by `policy` (returned ids are `items[pos].id`). Ties are
/// always broken by lower position.
///   top / bottom   highest / lowest `budget`
///   middle         descending ranks ⌊(n-budget)/2⌋ .. ⌊(n-budget)/2⌋+budget-1
///   random         uniform without replacement from `rng`
///   top_and_bottom budget-budget/2 highest plus budget/2 lowest, disjoint
std::vector<std::size_t> select_policy(std::span<const ScoredItem> items, std::size_t budget, Policy policy,
                                       num::RngStream& rng);

/// Scores each candidate with the frozen `scorer` (filling `confidence`) and
/// keeps the k best, best first.
std::vector<gen::GeneratedCandidate> sample_topk(std::vector<gen::GeneratedCandidate> candidates, std::size_t k,
                                                 const vlm::DualEncoder& scorer);

/// Like sample_topk but with any selection policy (used by the filtering ablation).
std::vector<gen::GeneratedCandidate> filter_candidates(std::vector<gen::GeneratedCandidate> candidates, std::size_t k,
                                                       const vlm::DualEncoder& scorer, Policy policy,
                                                       num::RngStream& rng);

/// Per class, l/2 highest- and l/2 lowest-confidence training examples under
/// `model` (or `l` chosen by another policy). Labels index `class_names`.
LabeledBatch select_lora_data(const vlm::DualEncoder& model, const Dataset& data,
                              std::span<const std::string> class_names, std::size_t l,
                              Policy policy = Policy::top_and_bottom, num::RngStream* rng = nullptr);

struct ReplayEntry {
  num::Tensor sample;
  std::string class_name;
  std::string prompt;
  double confidence = 0.0;
  std::string generator;  // "base" or an adapter name
  std::uint64_t seed = 0;
};

/// Synthetic replay for one task: at most k entries per class, each scored by
/// the frozen model of the previous round.
struct ReplaySet {
  std::vector<ReplayEntry> entries;

  [[nodiscard]] bool empty() const noexcept { return entries.empty(); }
  [[nodiscard]] std::size_t size() const noexcept { return entries.size(); }
  /// Distinct classes in entry order.
  [[nodiscard]] std::vector<std::string> classes() const;
  /// Images [size, pixels] with labels indexing `classes()`.
  [[nodiscard]] LabeledBatch as_batch() const;

  void save(const std::filesystem::path& dir) const;
};

}  // namespace loraloop::selection
