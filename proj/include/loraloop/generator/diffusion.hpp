#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <optional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraloop/data.hpp"
#include "loraloop/numcore/checkpoint.hpp"
#include "loraloop/numcore/param_store.hpp"
#include "loraloop/numcore/rng.hpp"
#include "loraloop/numcore/tape.hpp"
#include "loraloop/text/prompt.hpp"

namespace loraloop::gen {

/// Linear β schedule over t = 1..T. ᾱ(0) = 1 is the clean end, so valid
/// diffusion times are 0..T and training draws t from 1..T.
class NoiseSchedule {
 public:
  NoiseSchedule(std::size_t steps, double beta_start, double beta_end);

  [[nodiscard]] std::size_t steps() const noexcept { return betas_.size(); }
  [[nodiscard]] double beta(std::size_t t) const;
  [[nodiscard]] double alpha(std::size_t t) const { return 1.0 - beta(t); }
  [[nodiscard]] double alpha_bar(std::size_t t) const;

 private:
  std::vector<double> betas_;      // betas_[t-1] = β_t
  std::vector<double> alpha_bar_;  // alpha_bar_[t] = Π_{s≤t} (1-β_s), alpha_bar_[0] = 1
};

/// √ᾱ_t·x0 + √(1-ᾱ_t)·noise.
num::Tensor q_sample(const NoiseSchedule& schedule, const num::Tensor& x0, std::size_t t, const num::Tensor& noise);

struct GeneratorConfig {
  std::size_t pixels = 256;
  std::size_t hidden = 128;
  std::size_t time_dim = 16;
  std::size_t cond_dim = 16;
  std::size_t steps = 50;
  // A 1e-4..0.02 ramp only reaches ᾱ_T ≈ 0.6 in 50 steps; this one ends near pure noise.
  double beta_start = 2e-3;
  double beta_end = 0.4;
  double sigma_data = 0.5;  // data scale assumed by the output preconditioning
  std::string prompt = "a photo of a {c}";
};

/// Weight matrices of the denoiser MLP, in forward order. These are the
/// layers low-rank adapters may target.
inline constexpr std::array<const char*, 3> kDenoiserLayers{"den.w1", "den.w2", "den.w3"};
inline constexpr std::array<const char*, 3> kDenoiserBiases{"den.b1", "den.b2", "den.b3"};

/// Class-conditional ε-prediction MLP. The condition of a class is the mean of
/// its name-token rows in `cond.table`; row 0 is the unconditional embedding.
class GeneratorModel {
 public:
  GeneratorModel(GeneratorConfig config, std::uint64_t seed);

  [[nodiscard]] const GeneratorConfig& config() const noexcept { return config_; }
  [[nodiscard]] const NoiseSchedule& schedule() const noexcept { return schedule_; }
  [[nodiscard]] const text::PromptTemplate& prompt() const noexcept { return prompt_; }
  [[nodiscard]] const text::Vocabulary& vocabulary() const noexcept { return vocab_; }
  [[nodiscard]] num::ParamStore& params() noexcept { return params_; }
  [[nodiscard]] const num::ParamStore& params() const noexcept { return params_; }

  /// Adds the name tokens of every class to the condition table.
  void register_classes(std::span<const std::string> class_names);
  [[nodiscard]] bool knows(std::string_view class_name) const;
  /// Condition-table rows of a class; unknown tokens are an error.
  [[nodiscard]] std::vector<std::size_t> condition_rows(std::string_view class_name) const;

  void load(std::vector<std::string> vocabulary, const num::NamedTensors& tensors);

 private:
  GeneratorConfig config_;
  std::uint64_t seed_;
  NoiseSchedule schedule_;
  text::PromptTemplate prompt_;
  text::Vocabulary vocab_;
  num::ParamStore params_;
};

/// A bound low-rank update: the layer computes W₀ + scale·A·B.
struct LowRankDelta {
  num::Var a;  // [d_out, r]
  num::Var b;  // [r, d_in]
  double scale = 1.0;
};
using LayerDeltas = std::array<std::optional<LowRankDelta>, kDenoiserLayers.size()>;
using DeltaBinder = std::function<LayerDeltas(num::Tape&)>;

/// Base generator plus an optional weight delta. Cheap to copy; the base is
/// borrowed, never modified.
struct GeneratorView {
  const GeneratorModel* base = nullptr;
  DeltaBinder delta;
  std::string label = "base";
};

GeneratorView base_view(const GeneratorModel& model);

struct BoundDenoiser {
  const NoiseSchedule* schedule = nullptr;
  double sigma_data = 0.5;
  std::array<num::Var, 3> w;
  std::array<num::Var, 3> b;
  num::Var table;
  LayerDeltas deltas;
};

/// Binds the base weights as constants (plus the view's delta, if any).
BoundDenoiser bind_view(const GeneratorView& view, num::Tape& tape);
/// Binds the base weights as trainable parameters.
BoundDenoiser bind_trainable(GeneratorModel& model, num::Tape& tape);

/// Sinusoidal embedding of integer times: [t.size(), dim].
num::Tensor time_embedding(std::span<const std::size_t> t, std::size_t dim);

/// Row i averages the table rows conds[i] (row 0 alone = unconditional).
num::Tensor condition_pooling(std::span<const std::vector<std::size_t>> conds, std::size_t table_rows);

/// ε̂ for x_t (model space, [-1,1] data scale) at per-row times. The MLP output
/// F is preconditioned: with σ² = (1-ᾱ)/ᾱ and data scale σ_d, the implied
/// denoised estimate is c_skip·x_t/√ᾱ + c_out·F, so at moderate noise the MLP
/// predicts a clean pattern instead of having to copy 256-d noise through its
/// 128-wide hidden layers.
num::Var predict_noise(const BoundDenoiser& den, num::Var x_t, std::span<const std::size_t> t,
                       std::span<const std::vector<std::size_t>> conds);

/// Model-space scaling of [0,1] images.
num::Tensor to_model_space(const num::Tensor& images);
num::Tensor to_image_space(const num::Tensor& x);

/// One draw of the denoising objective's randomness for a batch.
struct DenoiseDraw {
  num::Tensor x_t;
  num::Tensor noise;
  std::vector<std::size_t> t;
  std::vector<std::vector<std::size_t>> conds;  // after condition dropout
  std::vector<bool> dropped;
};

/// x0 in [0,1] image space; conds are per-row condition rows.
DenoiseDraw draw_denoise_inputs(const NoiseSchedule& schedule, const num::Tensor& x0,
                                std::span<const std::vector<std::size_t>> conds, num::RngStream& rng,
                                double cond_dropout);

using NoisePredictor = std::function<num::Tensor(const DenoiseDraw&)>;

/// Mean squared error between `predict(draw)` and the drawn noise.
double denoise_loss(const NoiseSchedule& schedule, const NoisePredictor& predict, const num::Tensor& x0,
                    std::span<const std::vector<std::size_t>> conds, num::RngStream& rng,
                    double cond_dropout = 0.1);

num::Var denoise_loss(const BoundDenoiser& den, const NoiseSchedule& schedule, const num::Tensor& x0,
                      std::span<const std::vector<std::size_t>> conds, num::RngStream& rng,
                      double cond_dropout = 0.1);

/// Per-row condition rows for a labelled batch.
std::vector<std::vector<std::size_t>> batch_conditions(const GeneratorModel& model, const LabeledBatch& batch,
                                                       std::span<const std::string> class_names);

struct GeneratorTrainConfig {
  std::size_t epochs = 200;
  std::size_t batch = 64;
  double cond_dropout = 0.1;
  num::AdamWConfig opt{.lr = 2e-3, .weight_decay = 1e-2};
};

/// Trains the base denoiser; returns the mean loss of each epoch. A
/// non-finite value aborts with the epoch and step in the message.
std::vector<double> train_generator(GeneratorModel& model, const Dataset& data,
                                    std::span<const std::string> class_names,
                                    const GeneratorTrainConfig& config, num::RngStream& rng);

/// Mean denoising loss over `data` with a fixed-seed draw (no dropout).
double evaluate_denoise_loss(const GeneratorView& view, const Dataset& data,
                             std::span<const std::string> class_names, std::uint64_t seed);

struct GeneratedCandidate {
  num::Tensor sample;  // [pixels] in [0,1]
  std::string prompt;  // T(c)
  std::string class_name;
  std::uint64_t seed = 0;
  std::optional<double> confidence;
};

struct SampleRequest {
  std::string class_name;  // empty = unconditional
  std::uint64_t seed = 0;
};

/// Called once per denoising step t (T..1) with the unconditional, conditional
/// and guided noise predictions for the whole batch.
using StepObserver = std::function<void(std::size_t t, const num::Tensor& eps_uncond, const num::Tensor& eps_cond,
                                        const num::Tensor& eps_guided)>;

/// Ancestral sampling with classifier-free guidance ε̂ = (1-s)·ε_u + s·ε_c.
/// Each request owns an RNG stream derived from its seed, so a sample does not
/// depend on what else is in the batch.
std::vector<GeneratedCandidate> sample_batch(const GeneratorView& view, std::span<const SampleRequest> requests,
                                             double guidance, const StepObserver& observer = {});

GeneratedCandidate sample_cfg(const GeneratorView& view, const std::string& class_name, double guidance,
                              std::uint64_t seed);

/// Unconditional ancestral sampling; rows are in request order.
num::Tensor sample_unconditional(const GeneratorView& view, std::span<const std::uint64_t> seeds,
                                 const StepObserver& observer = {});

void save_generator(const std::filesystem::path& dir, const GeneratorModel& model);
void load_generator(const std::filesystem::path& dir, GeneratorModel& model);

}  // namespace loraloop::gen
