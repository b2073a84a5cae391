#include "loraloop/distill/gift.hpp"

#include <cmath>
#include <iomanip>
#include <stdexcept>

namespace loraloop::distill {

namespace {

std::vector<text::TokenSeq> pool_prompts(const vlm::DualEncoder& model, std::span<const std::string> pool) {
  std::vector<text::TokenSeq> out;
  out.reserve(pool.size());
  for (const auto& c : pool) out.push_back(model.prompt_tokens(c));
  return out;
}

}  // namespace

void ImportanceMap::reset_anchor(const num::ParamStore& params) {
  params.for_each([&](const std::string& name, const num::Tensor& value) {
    auto it = entries_.find(name);
    if (it == entries_.end() || it->second.running.shape() != value.shape()) {
      num::Tensor zero(value.shape(), std::vector<double>(value.size(), 0.0));
      entries_[name] = Entry{zero, zero, value};
    } else {
      it->second.importance = it->second.running;
      it->second.anchor = value;
    }
  });
}

void ImportanceMap::update(const num::ParamStore& params, double awc_weight) {
  params.for_each([&](const std::string& name, const num::Tensor& value) {
    if (!value.has_grad()) return;
    auto it = entries_.find(name);
    if (it == entries_.end()) return;
    auto& e = it->second;
    if (e.running.shape() != value.shape())
      throw num::ShapeError("importance for " + name + " has shape " + num::shape_string(e.running.shape()));
    const auto g = value.grad();
    for (std::size_t k = 0; k < e.running.size(); ++k) {
      const double data_grad = g[k] - 2.0 * awc_weight * e.importance[k] * (value[k] - e.anchor[k]);
      e.running[k] = decay_ * e.running[k] + (1.0 - decay_) * data_grad * data_grad;
    }
  });
}

void ImportanceMap::set(const std::string& name, num::Tensor importance, num::Tensor anchor) {
  if (importance.shape() != anchor.shape())
    throw num::ShapeError("importance and anchor for " + name + " differ in shape");
  for (std::size_t k = 0; k < importance.size(); ++k)
    if (!(importance[k] >= 0.0)) throw std::invalid_argument("importance for " + name + " must be nonnegative");
  entries_[name] = Entry{importance, importance, std::move(anchor)};
}

std::vector<std::string> ImportanceMap::names() const {
  std::vector<std::string> out;
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

double kl_divergence(std::span<const double> p, std::span<const double> q) {
  if (p.size() != q.size()) throw num::ShapeError("kl_divergence: length mismatch");
  double kl = 0.0;
  for (std::size_t i = 0; i < p.size(); ++i)
    if (p[i] > 0.0) kl += p[i] * (std::log(p[i]) - std::log(q[i]));
  return kl;
}

num::Var loss_cd(num::Tape& tape, const vlm::BoundEncoder& student, const vlm::BoundEncoder& teacher,
                 const num::Tensor& replay_images, std::span<const std::string> pool) {
  if (pool.empty()) throw std::invalid_argument("loss_cd: empty class pool");
  if (replay_images.rows() == 0) throw std::invalid_argument("loss_cd: empty replay batch");
  const double n = static_cast<double>(replay_images.rows());

  auto t_logits = vlm::class_logits(teacher, vlm::encode_image(teacher, tape.constant(replay_images)),
                                    vlm::encode_text(teacher, pool_prompts(*teacher.model, pool)));
  const num::Tensor p = num::softmax(t_logits).value();
  double entropy_part = 0.0;  // Σ p log p
  for (std::size_t k = 0; k < p.size(); ++k)
    if (p[k] > 0.0) entropy_part += p[k] * std::log(p[k]);

  auto s_logits = vlm::class_logits(student, vlm::encode_image(student, tape.constant(replay_images)),
                                    vlm::encode_text(student, pool_prompts(*student.model, pool)));
  auto cross = num::sum(num::mul(tape.constant(p), num::log_softmax(s_logits)));
  return num::scale(num::sub(tape.constant(num::Tensor::scalar(entropy_part)), cross), 1.0 / n);
}

num::Var loss_ita(num::Tape& tape, const vlm::BoundEncoder& student, const num::Tensor& images,
                  std::span<const text::TokenSeq> prompts) {
  if (images.rows() != prompts.size()) throw num::ShapeError("loss_ita: images and prompts differ in count");
  if (prompts.size() < 2) throw std::invalid_argument("loss_ita: contrastive loss needs at least two pairs");
  auto sim = vlm::class_logits(student, vlm::encode_image(student, tape.constant(images)),
                               vlm::encode_text(student, prompts));
  std::vector<std::size_t> diag(prompts.size());
  for (std::size_t i = 0; i < diag.size(); ++i) diag[i] = i;
  auto i2t = num::cross_entropy(sim, diag);
  auto t2i = num::cross_entropy(num::transpose(sim), diag);
  return num::scale(num::add(i2t, t2i), 0.5);
}

num::Var loss_awc(num::Tape& tape, const vlm::BoundEncoder& student, const ImportanceMap& importance) {
  num::Var total;
  for (const auto& [name, var] : student.named) {
    if (!importance.contains(name)) continue;
    const auto& imp = importance.importance(name);
    if (imp.shape() != var.shape())
      throw num::ShapeError("loss_awc: importance for " + name + " is " + num::shape_string(imp.shape()) +
                            ", parameter is " + num::shape_string(var.shape()));
    auto term = num::sum(num::mul(tape.constant_ref(imp),
                                  num::square(num::sub(var, tape.constant_ref(importance.anchor(name))))));
    total = total.valid() ? num::add(total, term) : term;
  }
  if (!total.valid()) return tape.constant(num::Tensor::scalar(0.0));
  return total;
}

GiftTerms compute_gift_loss(num::Tape& tape, const vlm::BoundEncoder& student, const TeacherSnapshot* teacher,
                            const LabeledBatch& task_batch, std::span<const std::string> task_classes,
                            const ReplayBatch* replay, const LossWeights& weights, const ImportanceMap* importance) {
  GiftTerms out;
  out.total = vlm::supervised_loss(tape, student, task_batch, task_classes);
  out.ce = out.total.value().item();
  const bool have_replay = replay != nullptr && !replay->batch.empty();

  if (weights.cd_on() && have_replay) {
    if (teacher == nullptr) throw std::invalid_argument("compute_gift_loss: distillation needs a teacher");
    auto teacher_enc = teacher->bind(tape);
    auto cd = loss_cd(tape, student, teacher_enc, replay->batch.images, replay->pool);
    out.cd = cd.value().item();
    out.total = num::add(out.total, num::scale(cd, weights.cd));
  }
  if (weights.ita_on() && have_replay) {
    std::vector<std::size_t> rows;
    std::vector<bool> seen(replay->pool.size(), false);
    for (std::size_t r = 0; r < replay->batch.size(); ++r) {
      const auto label = replay->batch.labels[r];
      if (seen.at(label)) continue;
      seen[label] = true;
      rows.push_back(r);
    }
    if (rows.size() >= 2) {
      std::vector<text::TokenSeq> prompts;
      for (auto r : rows) prompts.push_back(student.model->prompt_tokens(replay->pool[replay->batch.labels[r]]));
      auto ita = loss_ita(tape, student, replay->batch.images.gather_rows(rows), prompts);
      out.ita = ita.value().item();
      out.total = num::add(out.total, num::scale(ita, weights.ita));
    }
  }
  if (weights.awc_on()) {
    if (importance == nullptr) throw std::invalid_argument("compute_gift_loss: AWC needs an importance map");
    auto awc = loss_awc(tape, student, *importance);
    out.awc = awc.value().item();
    out.total = num::add(out.total, num::scale(awc, weights.awc));
  }
  out.value = out.total.value().item();
  return out;
}

void LossLog::add(std::size_t step, const GiftTerms& terms) {
  rows_.push_back({step, terms.ce, terms.cd, terms.ita, terms.awc, terms.value});
}

void LossLog::write_csv(std::ostream& out) const {
  out << "step,ce,cd,ita,awc,total\n" << std::setprecision(17);
  for (const auto& r : rows_)
    out << r.step << ',' << r.ce << ',' << r.cd << ',' << r.ita << ',' << r.awc << ',' << r.total << '\n';
}

}  // namespace loraloop::distill
