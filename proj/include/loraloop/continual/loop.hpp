#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include "loraloop/continual/metrics.hpp"
#include "loraloop/continual/task_sequence.hpp"
#include "loraloop/distill/gift.hpp"
#include "loraloop/generator/diffusion.hpp"
#include "loraloop/lora/adapter.hpp"
#include "loraloop/selection/select.hpp"
#include "loraloop/vlm/dual_encoder.hpp"

namespace loraloop::continual {

// ---------------------------------------------------------------------------
// Pretrained starting point: f⁰ and the frozen base generator, both trained
// on the base pool only.

struct PretrainSettings {
  vlm::DualEncoderConfig vlm{};
  vlm::PretrainConfig vlm_train{};
  gen::GeneratorConfig generator{};
  gen::GeneratorTrainConfig generator_train{.epochs = 100};

  /// Stable text form of every field; used as the cache key.
  [[nodiscard]] std::string describe() const;
};

struct Pretrained {
  vlm::DualEncoder vlm;
  gen::GeneratorModel generator;
};

/// Trains (or, when `cache_dir` holds a matching entry, loads) f⁰ and G_φ.
/// Every suite class is registered in both vocabularies before training.
Pretrained pretrain_models(const TaskSequence& seq, const PretrainSettings& settings, std::uint64_t seed,
                           const std::optional<std::filesystem::path>& cache_dir = std::nullopt);

// ---------------------------------------------------------------------------

enum class Method { lora_loop, zero_shot, continual_finetune, l2_anchor, real_replay, frozen_generator_replay };

Method parse_method(const std::string& name);
const char* to_string(Method m);

struct LoopConfig {
  // VLM finetuning per task.
  std::size_t steps = 300;
  std::size_t batch = 32;
  num::AdamWConfig opt{.lr = 1e-3, .weight_decay = 1e-2};
  /// Share of each batch drawn from replay when replay is active.
  double replay_fraction = 0.5;

  // Algorithm switches.
  bool replay = true;  // synthetic replay at all
  bool lft = true;     // LoRA finetuning of the generator
  bool sf = true;      // confidence filtering of candidates

  distill::LossWeights weights{};
  double importance_decay = 0.99;
  /// Gradient passes of f^{i-1} over replay batches that refresh the
  /// importance EMA before it is frozen for task i.
  std::size_t importance_batches = 16;

  std::size_t m_pre = 8;
  std::size_t k = 1;
  std::size_t l = 2;
  selection::Policy filter_policy = selection::Policy::top;
  selection::Policy lora_policy = selection::Policy::top_and_bottom;
  double guidance = 3.0;  // desk scale; the published setting is 7.5
  lora::AdapterFinetuneConfig adapter{.lora = {}, .epochs = 100, .batch = 64, .repeats = 16, .cond_dropout = 0.0,
                                      .opt = {.lr = 1e-2, .weight_decay = 1e-2}};

  // Baselines.
  double l2_lambda = 0.1;
  std::size_t real_per_class = 2;

  // Evaluation.
  bool class_incremental = false;
  bool transfer_includes_row0 = true;
};

/// Bytes needed to keep `per_class` real images for each of `classes` classes.
std::size_t real_replay_bytes(std::size_t classes, std::size_t per_class, std::size_t pixels,
                              std::size_t bytes_per_value = sizeof(double));
/// Bytes of every adapter factor in the registry.
std::size_t adapter_bytes(const lora::AdapterRegistry& registry, std::size_t bytes_per_value = sizeof(double));

struct TaskRecord {
  std::size_t task = 0;
  selection::ReplaySet replay;
  LabeledBatch lora_data;
  std::vector<double> adapter_history;
};

struct RunResult {
  vlm::DualEncoder model;
  AccuracyMatrix matrix;
  MetricsReport report;
  lora::AdapterRegistry registry;
  distill::LossLog losses;
  std::vector<TaskRecord> tasks;
  std::vector<std::string> pool;
  std::size_t replay_storage_bytes = 0;
  std::size_t adapter_storage_bytes = 0;
};

/// Called after each task with the model f^i and the run state so far.
using TaskObserver = std::function<void(std::size_t task, const RunResult& state)>;

/// Per task: (1) generate and filter replay with f^{i-1},
/// (2) finetune with the GIFT objective, (3) pick D_lora with f^i and train
/// and register an adapter, (4) grow the class pool. Evaluates a matrix row
/// after every task.
RunResult run_lora_loop(const TaskSequence& seq, const Pretrained& start, const LoopConfig& config, std::uint64_t seed,
                        const TaskObserver& observer = {});

/// Baselines share the loop's RNG streams, so a loop with every replay and
/// regularisation switch off reproduces continual_finetune exactly.
RunResult run_baseline(const TaskSequence& seq, const Pretrained& start, Method kind, const LoopConfig& config,
                       std::uint64_t seed, const TaskObserver& observer = {});

RunResult run_method(const TaskSequence& seq, const Pretrained& start, Method method, const LoopConfig& config,
                     std::uint64_t seed, const TaskObserver& observer = {});

/// Accuracy of `model` on column j under the configured protocol.
double evaluate_column(const vlm::DualEncoder& model, const TaskSequence& seq, std::size_t column,
                       bool class_incremental);

}  // namespace loraloop::continual
