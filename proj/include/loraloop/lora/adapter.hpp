#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "loraloop/data.hpp"
#include "loraloop/generator/diffusion.hpp"
#include "loraloop/numcore/param_store.hpp"

namespace loraloop::lora {

struct LoraConfig {
  std::size_t rank = 4;
  double alpha = 4.0;  // scale = alpha / rank
  std::vector<std::string> targets{gen::kDenoiserLayers.begin(), gen::kDenoiserLayers.end()};
};

/// Low-rank update ΔW = (α/r)·A·B for each targeted denoiser layer, with
/// A [d_out, r] and B [r, d_in]. B starts at zero, so a fresh adapter is a
/// no-op. Parameters are named "<layer>.A" and "<layer>.B".
class LoraAdapter {
 public:
  LoraAdapter(const gen::GeneratorModel& base, LoraConfig config, std::uint64_t seed);

  [[nodiscard]] std::size_t rank() const noexcept { return config_.rank; }
  [[nodiscard]] double scale() const noexcept { return config_.alpha / static_cast<double>(config_.rank); }
  [[nodiscard]] const LoraConfig& config() const noexcept { return config_; }
  [[nodiscard]] const std::vector<std::string>& targets() const noexcept { return config_.targets; }
  [[nodiscard]] num::ParamStore& params() noexcept { return params_; }
  [[nodiscard]] const num::ParamStore& params() const noexcept { return params_; }

  num::Tensor& a(const std::string& layer) { return params_.get(layer + ".A"); }
  num::Tensor& b(const std::string& layer) { return params_.get(layer + ".B"); }
  [[nodiscard]] const num::Tensor& a(const std::string& layer) const { return params_.get(layer + ".A"); }
  [[nodiscard]] const num::Tensor& b(const std::string& layer) const { return params_.get(layer + ".B"); }

  /// Σ over targeted layers of r·(d_in + d_out).
  [[nodiscard]] std::size_t storage_reals() const;

  /// Binds A and B (as parameters when `trainable`) for every targeted layer.
  gen::LayerDeltas bind(num::Tape& tape, bool trainable);
  [[nodiscard]] gen::LayerDeltas bind(num::Tape& tape) const;

 private:
  LoraConfig config_;
  num::ParamStore params_;
};

/// Checks that every targeted layer exists in `base` and that A, B conform to
/// its shape; throws ShapeError naming the layer otherwise.
void check_compatible(const gen::GeneratorModel& base, const LoraAdapter& adapter);

/// Sampling view computing with W₀ + (α/r)·A·B on targeted layers. Borrows
/// both the base and the adapter.
gen::GeneratorView apply_adapter(const gen::GeneratorModel& base, const LoraAdapter& adapter,
                                 std::string label = "adapter");

/// W₀ + (α/r)·A·B for one layer (W₀ alone if the layer is not targeted).
num::Tensor effective_weight(const gen::GeneratorModel& base, const LoraAdapter& adapter, const std::string& layer);

struct AdapterFinetuneConfig {
  LoraConfig lora;
  std::size_t epochs = 100;
  std::size_t batch = 64;
  /// Passes over the exemplars inside one epoch, each with fresh timesteps and noise.
  std::size_t repeats = 1;
  double cond_dropout = 0.0;
  num::AdamWConfig opt{};
};

/// Trains only the adapter factors on the denoising loss over `data`; the base
/// model is bound as constants and never modified.
LoraAdapter finetune_adapter(const gen::GeneratorModel& base, const LabeledBatch& data,
                             std::span<const std::string> class_names, const AdapterFinetuneConfig& config,
                             num::RngStream& rng, std::vector<double>* history = nullptr);

/// Ordered (adapter, class set) pairs with pairwise-disjoint class sets.
class AdapterRegistry {
 public:
  struct Entry {
    LoraAdapter adapter;
    std::vector<std::string> classes;
    std::string name;
  };

  /// Appends an entry; overlapping class sets are rejected.
  void register_adapter(LoraAdapter adapter, std::vector<std::string> classes, std::string name);
  /// Entry whose class set contains `class_name`, or nullptr.
  [[nodiscard]] const Entry* find(const std::string& class_name) const;
  [[nodiscard]] std::size_t size() const noexcept { return entries_.size(); }
  [[nodiscard]] const std::vector<Entry>& entries() const noexcept { return entries_; }
  [[nodiscard]] std::size_t storage_reals() const;

  /// Writes <name>.llcp per adapter plus registry.json mapping classes to files.
  void save(const std::filesystem::path& dir) const;
  static AdapterRegistry load(const std::filesystem::path& dir, const gen::GeneratorModel& base);

 private:
  std::vector<Entry> entries_;
};

/// The adapted view if some registered class set contains `class_name`,
/// otherwise the base generator.
gen::GeneratorView select_generator(const AdapterRegistry& registry, const gen::GeneratorModel& base,
                                    const std::string& class_name);

}  // namespace loraloop::lora
