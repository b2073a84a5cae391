#include "loraloop/selection/select.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <map>
#include <numeric>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "loraloop/io/pgm.hpp"

namespace loraloop::selection {

Policy parse_policy(const std::string& name) {
  if (name == "top") return Policy::top;
  if (name == "bottom") return Policy::bottom;
  if (name == "middle") return Policy::middle;
  if (name == "random") return Policy::random;
  if (name == "top_and_bottom") return Policy::top_and_bottom;
  throw std::invalid_argument("unknown selection policy '" + name + "'");
}

const char* to_string(Policy p) {
  switch (p) {
    case Policy::top: return "top";
    case Policy::bottom: return "bottom";
    case Policy::middle: return "middle";
    case Policy::random: return "random";
    case Policy::top_and_bottom: return "top_and_bottom";
  }
  return "?";
}

std::vector<std::size_t> rank_descending(std::span<const ScoredItem> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].confidence > items[b].confidence; });
  return order;
}

namespace {

std::vector<std::size_t> rank_ascending(std::span<const ScoredItem> items) {
  std::vector<std::size_t> order(items.size());
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(),
                   [&](std::size_t a, std::size_t b) { return items[a].confidence < items[b].confidence; });
  return order;
}

std::vector<ScoredItem> score(const std::vector<gen::GeneratedCandidate>& candidates, const vlm::DualEncoder& scorer,
                              std::vector<double>& conf) {
  std::vector<num::Tensor> rows;
  std::vector<text::TokenSeq> prompts;
  rows.reserve(candidates.size());
  for (const auto& c : candidates) {
    rows.push_back(c.sample);
    prompts.push_back(scorer.tokenize_prompt(c.prompt));
  }
  conf = vlm::confidences(scorer, num::stack_rows(rows), prompts);
  std::vector<ScoredItem> items;
  for (std::size_t i = 0; i < candidates.size(); ++i) {
    if (!std::isfinite(conf[i])) throw num::NumericError("non-finite confidence for candidate " + std::to_string(i));
    items.push_back({i, candidates[i].class_name, conf[i]});
  }
  return items;
}

}  // namespace

std::vector<std::size_t> select_policy(std::span<const ScoredItem> items, std::size_t budget, Policy policy,
                                       num::RngStream& rng) {
  const std::size_t n = items.size();
  if (budget > n)
    throw std::invalid_argument("select_policy: budget " + std::to_string(budget) + " exceeds " + std::to_string(n) +
                                " items");
  std::vector<std::size_t> pos;
  switch (policy) {
    case Policy::top: {
      auto order = rank_descending(items);
      pos.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budget));
      break;
    }
    case Policy::bottom: {
      auto order = rank_ascending(items);
      pos.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(budget));
      break;
    }
    case Policy::middle: {
      auto order = rank_descending(items);
      const std::size_t start = (n - budget) / 2;
      pos.assign(order.begin() + static_cast<std::ptrdiff_t>(start),
                 order.begin() + static_cast<std::ptrdiff_t>(start + budget));
      break;
    }
    case Policy::random: {
      auto perm = rng.permutation(n);
      pos.assign(perm.begin(), perm.begin() + static_cast<std::ptrdiff_t>(budget));
      break;
    }
    case Policy::top_and_bottom: {
      const std::size_t n_bottom = budget / 2;
      const std::size_t n_top = budget - n_bottom;
      auto desc = rank_descending(items);
      pos.assign(desc.begin(), desc.begin() + static_cast<std::ptrdiff_t>(n_top));
      std::vector<bool> taken(n, false);
      for (auto p : pos) taken[p] = true;
      std::size_t added = 0;
      for (auto p : rank_ascending(items)) {
        if (added == n_bottom) break;
        if (taken[p]) continue;
        pos.push_back(p);
        taken[p] = true;
        ++added;
      }
      break;
    }
  }
  std::vector<std::size_t> ids;
  ids.reserve(pos.size());
  for (auto p : pos) ids.push_back(items[p].id);
  return ids;
}

std::vector<gen::GeneratedCandidate> filter_candidates(std::vector<gen::GeneratedCandidate> candidates, std::size_t k,
                                                       const vlm::DualEncoder& scorer, Policy policy,
                                                       num::RngStream& rng) {
  if (candidates.empty()) throw std::invalid_argument("sample_topk: no candidates");
  if (k == 0) throw std::invalid_argument("sample_topk: k must be at least 1");
  std::vector<double> conf;
  auto items = score(candidates, scorer, conf);
  for (std::size_t i = 0; i < candidates.size(); ++i) candidates[i].confidence = conf[i];
  const auto ids = select_policy(items, std::min(k, candidates.size()), policy, rng);
  std::vector<gen::GeneratedCandidate> out;
  out.reserve(ids.size());
  for (auto id : ids) out.push_back(candidates[id]);
  return out;
}

std::vector<gen::GeneratedCandidate> sample_topk(std::vector<gen::GeneratedCandidate> candidates, std::size_t k,
                                                 const vlm::DualEncoder& scorer) {
  num::RngStream unused(0, 0);
  return filter_candidates(std::move(candidates), k, scorer, Policy::top, unused);
}

LabeledBatch select_lora_data(const vlm::DualEncoder& model, const Dataset& data,
                              std::span<const std::string> class_names, std::size_t l, Policy policy,
                              num::RngStream* rng) {
  if (l == 0) throw std::invalid_argument("select_lora_data: l must be positive");
  if (policy == Policy::top_and_bottom && l % 2 != 0)
    throw std::invalid_argument("select_lora_data: l must be even for top_and_bottom, got " + std::to_string(l));
  if (policy == Policy::random && rng == nullptr) throw std::invalid_argument("select_lora_data: random policy needs an rng");
  std::vector<text::TokenSeq> prompts;
  prompts.reserve(data.size());
  for (auto label : data.labels) prompts.push_back(model.prompt_tokens(class_names[label]));
  const auto conf = vlm::confidences(model, data.images, prompts);

  num::RngStream fallback(0, 0);
  std::vector<std::size_t> chosen;
  for (std::size_t c = 0; c < class_names.size(); ++c) {
    const auto rows = data.rows_of(c);
    if (rows.size() < l)
      throw std::invalid_argument("select_lora_data: class '" + class_names[c] + "' has " + std::to_string(rows.size()) +
                                  " examples, needs " + std::to_string(l));
    std::vector<ScoredItem> items;
    for (auto r : rows) items.push_back({r, class_names[c], conf[r]});
    auto ids = select_policy(items, l, policy, rng ? *rng : fallback);
    chosen.insert(chosen.end(), ids.begin(), ids.end());
  }
  return data.subset(chosen);
}

std::vector<std::string> ReplaySet::classes() const {
  std::vector<std::string> out;
  for (const auto& e : entries)
    if (std::find(out.begin(), out.end(), e.class_name) == out.end()) out.push_back(e.class_name);
  return out;
}

LabeledBatch ReplaySet::as_batch() const {
  if (entries.empty()) throw std::invalid_argument("ReplaySet: empty");
  const auto cls = classes();
  LabeledBatch b;
  std::vector<num::Tensor> rows;
  for (const auto& e : entries) {
    rows.push_back(e.sample);
    b.labels.push_back(static_cast<std::size_t>(std::find(cls.begin(), cls.end(), e.class_name) - cls.begin()));
  }
  b.images = num::stack_rows(rows);
  return b;
}

void ReplaySet::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest = nlohmann::json::array();
  for (std::size_t i = 0; i < entries.size(); ++i) {
    const auto& e = entries[i];
    std::ostringstream name;
    name << "replay_" << std::setw(4) << std::setfill('0') << i << ".pgm";
    io::write_pgm(dir / name.str(), e.sample, 16);
    manifest.push_back({{"file", name.str()},
                        {"class", e.class_name},
                        {"prompt", e.prompt},
                        {"confidence", e.confidence},
                        {"generator", e.generator},
                        {"seed", e.seed}});
  }
  std::ofstream out(dir / "manifest.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "manifest.json").string());
  out << manifest.dump(2) << '\n';
}

}  // namespace loraloop::selection
