#pragma once

#include <map>
#include <memory>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "loraloop/data.hpp"
#include "loraloop/numcore/param_store.hpp"
#include "loraloop/numcore/tape.hpp"
#include "loraloop/text/prompt.hpp"
#include "loraloop/vlm/dual_encoder.hpp"

namespace loraloop::distill {

/// Frozen copy of the previous round's model f^{i-1}.
class TeacherSnapshot {
 public:
  explicit TeacherSnapshot(const vlm::DualEncoder& model)
      : model_(std::make_shared<const vlm::DualEncoder>(model)) {}

  [[nodiscard]] const vlm::DualEncoder& model() const noexcept { return *model_; }
  [[nodiscard]] vlm::BoundEncoder bind(num::Tape& tape) const { return model_->bind_frozen(tape); }

 private:
  std::shared_ptr<const vlm::DualEncoder> model_;
};

struct LossWeights {
  double cd = 1.0;
  double ita = 0.5;
  double awc = 10.0;
  bool use_cd = true;
  bool use_ita = true;
  bool use_awc = true;

  [[nodiscard]] bool cd_on() const noexcept { return use_cd && cd != 0.0; }
  [[nodiscard]] bool ita_on() const noexcept { return use_ita && ita != 0.0; }
  [[nodiscard]] bool awc_on() const noexcept { return use_awc && awc != 0.0; }
  [[nodiscard]] bool any() const noexcept { return cd_on() || ita_on() || awc_on(); }
};

/// Per-parameter importance for the anchored penalty. A running EMA of
/// squared gradients is refreshed every step; the penalty weights are the
/// EMA as it stood at the last task boundary, frozen together with the anchor.
class ImportanceMap {
 public:
  explicit ImportanceMap(double decay = 0.99) : decay_(decay) {}

  /// Task boundary: anchor at the current values and freeze the running EMA
  /// as the penalty weights. New parameters start at zero importance.
  void reset_anchor(const num::ParamStore& params);
  /// running ← decay·running + (1-decay)·g² for every parameter with a
  /// gradient. When the gradients include λ·loss_awc, pass λ as `awc_weight`:
  /// its analytic gradient 2λ·imp·(θ−anchor) is removed first so the penalty
  /// does not feed back into the importance.
  void update(const num::ParamStore& params, double awc_weight = 0.0);

  [[nodiscard]] double decay() const noexcept { return decay_; }
  [[nodiscard]] bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  /// Penalty weights (frozen at the last boundary).
  [[nodiscard]] const num::Tensor& importance(const std::string& name) const { return entries_.at(name).importance; }
  [[nodiscard]] const num::Tensor& running(const std::string& name) const { return entries_.at(name).running; }
  [[nodiscard]] const num::Tensor& anchor(const std::string& name) const { return entries_.at(name).anchor; }
  /// Sets penalty weights, running EMA and anchor of one parameter.
  void set(const std::string& name, num::Tensor importance, num::Tensor anchor);
  [[nodiscard]] std::vector<std::string> names() const;

 private:
  struct Entry {
    num::Tensor importance;
    num::Tensor running;
    num::Tensor anchor;
  };
  double decay_;
  std::map<std::string, Entry> entries_;
};

/// KL(p ‖ q) for two discrete distributions.
double kl_divergence(std::span<const double> p, std::span<const double> q);

/// Mean over replay images of KL(p_teacher ‖ p_student) of the class
/// distributions over `pool`. The teacher is bound as constants.
num::Var loss_cd(num::Tape& tape, const vlm::BoundEncoder& student, const vlm::BoundEncoder& teacher,
                 const num::Tensor& replay_images, std::span<const std::string> pool);

/// Symmetric image↔prompt contrastive loss; row i of `images` matches
/// `prompts[i]`. Needs at least two pairs.
num::Var loss_ita(num::Tape& tape, const vlm::BoundEncoder& student, const num::Tensor& images,
                  std::span<const text::TokenSeq> prompts);

/// Σ importance ⊙ (θ − anchor)² over every bound parameter the map knows.
num::Var loss_awc(num::Tape& tape, const vlm::BoundEncoder& student, const ImportanceMap& importance);

/// Replay images labelled into `pool` (labels index `pool`).
struct ReplayBatch {
  LabeledBatch batch;
  std::vector<std::string> pool;
};

struct GiftTerms {
  num::Var total;
  double ce = 0.0;
  double cd = 0.0;
  double ita = 0.0;
  double awc = 0.0;
  /// Value of `total`, kept so the terms outlive the tape.
  double value = 0.0;
};

/// CE(task batch) + λ_CD·L_CD + λ_ITA·L_ITA + λ_AWC·L_AWC. Disabled terms are
/// never built on the tape. L_ITA uses the first replay row of each distinct
/// class and is skipped when the batch has fewer than two classes.
GiftTerms compute_gift_loss(num::Tape& tape, const vlm::BoundEncoder& student, const TeacherSnapshot* teacher,
                            const LabeledBatch& task_batch, std::span<const std::string> task_classes,
                            const ReplayBatch* replay, const LossWeights& weights, const ImportanceMap* importance);

/// Per-step CSV rows: step, ce, cd, ita, awc, total.
class LossLog {
 public:
  void add(std::size_t step, const GiftTerms& terms);
  void write_csv(std::ostream& out) const;
  [[nodiscard]] std::size_t size() const noexcept { return rows_.size(); }

 private:
  struct Row {
    std::size_t step;
    double ce, cd, ita, awc, total;
  };
  std::vector<Row> rows_;
};

}  // namespace loraloop::distill
