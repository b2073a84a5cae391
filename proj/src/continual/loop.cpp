#include "loraloop/continual/loop.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <sstream>
#include <stdexcept>

#include "loraloop/numcore/rng.hpp"

namespace loraloop::continual {

namespace {

void describe_opt(std::ostream& out, const char* name, const num::AdamWConfig& o) {
  out << name << ".lr=" << o.lr << ' ' << name << ".beta1=" << o.beta1 << ' ' << name << ".beta2=" << o.beta2 << ' '
      << name << ".wd=" << o.weight_decay << ' ' << name << ".eps=" << o.eps << '\n';
}

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

/// Wraps a failing sub-step with the task index and a step label.
template <class F>
auto stage(std::size_t task, const char* label, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const std::exception& e) {
    throw std::runtime_error("task " + std::to_string(task) + ", " + label + ": " + e.what());
  }
}

}  // namespace

std::string PretrainSettings::describe() const {
  std::ostringstream out;
  out << std::setprecision(17);
  out << "vlm.pixels=" << vlm.pixels << " hidden=" << vlm.hidden << " embed=" << vlm.embed_dim
      << " token=" << vlm.token_dim << " text_hidden=" << vlm.text_hidden << " tau=" << vlm.init_tau
      << " tau_min=" << vlm.tau_min << " tau_max=" << vlm.tau_max << " learn_tau=" << vlm.learn_tau
      << " prompt=" << vlm.prompt << '\n';
  out << "vlm_train.steps=" << vlm_train.steps << " batch=" << vlm_train.batch << '\n';
  describe_opt(out, "vlm_train.opt", vlm_train.opt);
  out << "gen.pixels=" << generator.pixels << " hidden=" << generator.hidden << " time=" << generator.time_dim
      << " cond=" << generator.cond_dim << " steps=" << generator.steps << " beta=" << generator.beta_start << ".."
      << generator.beta_end << " sigma_data=" << generator.sigma_data << " prompt=" << generator.prompt << '\n';
  out << "gen_train.epochs=" << generator_train.epochs << " batch=" << generator_train.batch
      << " dropout=" << generator_train.cond_dropout << '\n';
  describe_opt(out, "gen_train.opt", generator_train.opt);
  return out.str();
}

Pretrained pretrain_models(const TaskSequence& seq, const PretrainSettings& settings, std::uint64_t seed,
                           const std::optional<std::filesystem::path>& cache_dir) {
  Pretrained out{vlm::DualEncoder(settings.vlm, seed), gen::GeneratorModel(settings.generator, seed)};
  const auto classes = seq.all_classes();
  out.vlm.register_classes(classes);
  out.generator.register_classes(classes);

  std::filesystem::path entry;
  if (cache_dir) {
    const auto key = num::fnv1a(settings.describe() + "|suite=" + std::to_string(seq.fingerprint) +
                                "|seed=" + std::to_string(seed));
    entry = *cache_dir / hex64(key);
    if (std::filesystem::exists(entry / "complete")) {
      vlm::load_encoder(entry, out.vlm);
      gen::load_generator(entry, out.generator);
      return out;
    }
  }

  num::RngStream vlm_rng(seed, num::stream_id("pretrain.vlm"));
  vlm::pretrain(out.vlm, seq.base.train, seq.base.classes, settings.vlm_train, vlm_rng);
  num::RngStream gen_rng(seed, num::stream_id("pretrain.gen"));
  gen::train_generator(out.generator, seq.base.train, seq.base.classes, settings.generator_train, gen_rng);

  if (cache_dir) {
    const auto tmp = entry.string() + ".tmp";
    std::filesystem::remove_all(tmp);
    vlm::save_encoder(tmp, out.vlm, classes);
    gen::save_generator(tmp, out.generator);
    { std::ofstream(std::filesystem::path(tmp) / "complete") << settings.describe(); }
    std::error_code ec;
    std::filesystem::rename(tmp, entry, ec);
    if (ec) std::filesystem::remove_all(tmp);  // another writer got there first
  }
  return out;
}

Method parse_method(const std::string& name) {
  if (name == "lora_loop") return Method::lora_loop;
  if (name == "zero_shot") return Method::zero_shot;
  if (name == "continual_finetune") return Method::continual_finetune;
  if (name == "l2_anchor") return Method::l2_anchor;
  if (name == "real_replay") return Method::real_replay;
  if (name == "frozen_generator_replay") return Method::frozen_generator_replay;
  throw std::invalid_argument("unknown method '" + name + "'");
}

const char* to_string(Method m) {
  switch (m) {
    case Method::lora_loop: return "lora_loop";
    case Method::zero_shot: return "zero_shot";
    case Method::continual_finetune: return "continual_finetune";
    case Method::l2_anchor: return "l2_anchor";
    case Method::real_replay: return "real_replay";
    case Method::frozen_generator_replay: return "frozen_generator_replay";
  }
  return "?";
}

std::size_t real_replay_bytes(std::size_t classes, std::size_t per_class, std::size_t pixels,
                              std::size_t bytes_per_value) {
  return classes * per_class * pixels * bytes_per_value;
}

std::size_t adapter_bytes(const lora::AdapterRegistry& registry, std::size_t bytes_per_value) {
  return registry.storage_reals() * bytes_per_value;
}

double evaluate_column(const vlm::DualEncoder& model, const TaskSequence& seq, std::size_t column,
                       bool class_incremental) {
  const auto& data = seq.column(column);
  if (!class_incremental) return vlm::evaluate_accuracy(model, data.test, data.classes);
  const auto all = seq.all_classes();
  LabeledBatch remapped = data.test;
  for (auto& label : remapped.labels)
    label = static_cast<std::size_t>(std::find(all.begin(), all.end(), data.classes.at(label)) - all.begin());
  return vlm::evaluate_accuracy(model, remapped, all);
}

namespace {

struct Plan {
  bool train = true;
  bool synthetic = false;
  bool real = false;
  bool lft = false;
  bool sf = false;
  bool l2 = false;
  distill::LossWeights weights{.cd = 0.0, .ita = 0.0, .awc = 0.0, .use_cd = false, .use_ita = false, .use_awc = false};
};

Plan make_plan(Method method, const LoopConfig& cfg) {
  Plan p;
  switch (method) {
    case Method::lora_loop:
      p.synthetic = cfg.replay;
      p.lft = cfg.lft;
      p.sf = cfg.sf;
      p.weights = cfg.weights;
      break;
    case Method::zero_shot:
      p.train = false;
      break;
    case Method::continual_finetune:
      break;
    case Method::l2_anchor:
      p.l2 = true;
      break;
    case Method::real_replay:
      p.real = true;
      p.weights = cfg.weights;
      break;
    case Method::frozen_generator_replay:
      p.synthetic = true;
      p.weights = cfg.weights;
      break;
  }
  return p;
}

selection::ReplaySet synthesize_replay(const std::vector<std::string>& pool, const gen::GeneratorModel& generator,
                                       const lora::AdapterRegistry& registry, const distill::TeacherSnapshot& scorer,
                                       const Plan& plan, const LoopConfig& cfg, num::RngStream& gen_rng,
                                       num::RngStream& filter_rng) {
  selection::ReplaySet replay;
  const std::size_t m = plan.sf ? cfg.m_pre : cfg.k;
  const auto policy = plan.sf ? cfg.filter_policy : selection::Policy::random;
  for (const auto& c : pool) {
    const auto view = plan.lft ? lora::select_generator(registry, generator, c) : gen::base_view(generator);
    std::vector<gen::SampleRequest> requests;
    for (std::size_t r = 0; r < m; ++r) requests.push_back({c, gen_rng.next_u64()});
    auto candidates = gen::sample_batch(view, requests, cfg.guidance);
    auto kept = selection::filter_candidates(std::move(candidates), cfg.k, scorer.model(), policy, filter_rng);
    for (auto& cand : kept)
      replay.entries.push_back({std::move(cand.sample), c, cand.prompt, cand.confidence.value_or(0.0),
                                view.label.empty() ? "base" : view.label, cand.seed});
  }
  return replay;
}

/// Draws `n` replay rows: a pool class uniformly, then one of its entries.
distill::ReplayBatch draw_replay(const selection::ReplaySet& replay, const std::vector<std::string>& pool,
                                 std::size_t n, num::RngStream& rng) {
  std::vector<std::vector<std::size_t>> by_class(pool.size());
  for (std::size_t e = 0; e < replay.entries.size(); ++e) {
    const auto it = std::find(pool.begin(), pool.end(), replay.entries[e].class_name);
    if (it == pool.end()) throw std::logic_error("replay entry outside the class pool: " + replay.entries[e].class_name);
    by_class[static_cast<std::size_t>(it - pool.begin())].push_back(e);
  }
  std::vector<std::size_t> present;
  for (std::size_t c = 0; c < pool.size(); ++c)
    if (!by_class[c].empty()) present.push_back(c);
  distill::ReplayBatch out;
  out.pool = pool;
  std::vector<num::Tensor> rows;
  for (std::size_t r = 0; r < n; ++r) {
    const auto c = present[rng.index(present.size())];
    const auto e = by_class[c][rng.index(by_class[c].size())];
    rows.push_back(replay.entries[e].sample);
    out.batch.labels.push_back(c);
  }
  out.batch.images = num::stack_rows(rows);
  return out;
}

/// Feeds the importance EMA with cross-entropy gradients of the current model
/// on replay batches labelled over the pool; no parameter moves.
void estimate_importance(vlm::DualEncoder& model, const selection::ReplaySet& replay,
                         const std::vector<std::string>& pool, std::size_t batches, std::size_t batch_size,
                         distill::ImportanceMap& importance, num::RngStream& rng) {
  if (!importance.contains(model.params().names().front())) importance.reset_anchor(model.params());
  auto& params = model.params();
  for (std::size_t b = 0; b < batches; ++b) {
    const auto rb = draw_replay(replay, pool, batch_size, rng);
    params.zero_grad();
    num::Tape tape;
    auto enc = model.bind_trainable(tape);
    tape.backward(vlm::supervised_loss(tape, enc, rb.batch, pool));
    importance.update(params);
  }
  params.clear_grad();
}

void add_real_exemplars(selection::ReplaySet& buffer, const TaskData& data, std::size_t per_class,
                        num::RngStream& rng) {
  for (std::size_t c = 0; c < data.classes.size(); ++c) {
    const auto rows = data.train.rows_of(c);
    if (rows.size() < per_class)
      throw std::invalid_argument("class '" + data.classes[c] + "' has fewer than " + std::to_string(per_class) +
                                  " training images");
    const auto perm = rng.permutation(rows.size());
    for (std::size_t r = 0; r < per_class; ++r) {
      const auto row = rows[perm[r]];
      const std::size_t one[] = {row};
      auto img = data.train.images.gather_rows(one);
      buffer.entries.push_back({num::Tensor::vector(std::vector<double>(img.values().begin(), img.values().end())),
                                data.classes[c], "", 0.0, "real", 0});
    }
  }
}

RunResult run_core(const TaskSequence& seq, const Pretrained& start, Method method, const LoopConfig& cfg,
                   std::uint64_t seed, const TaskObserver& observer) {
  const Plan plan = make_plan(method, cfg);
  if (cfg.batch == 0) throw std::invalid_argument("batch must be positive");
  if (plan.synthetic && (cfg.k == 0 || (plan.sf && cfg.m_pre < cfg.k)))
    throw std::invalid_argument("replay needs 1 ≤ k ≤ M_pre");
  if (!(cfg.replay_fraction >= 0.0 && cfg.replay_fraction < 1.0))
    throw std::invalid_argument("replay_fraction must lie in [0, 1)");

  const std::size_t n = seq.task_count();
  RunResult res{start.vlm, AccuracyMatrix(n), {}, {}, {}, {}, seq.base.classes, 0, 0};
  auto& model = res.model;
  const auto& generator = start.generator;

  for (std::size_t j = 0; j <= n; ++j) res.matrix.set(0, j, evaluate_column(model, seq, j, cfg.class_incremental));

  distill::ImportanceMap importance(cfg.importance_decay);
  distill::ImportanceMap l2_anchor(1.0);
  if (plan.l2) {
    model.params().for_each([&](const std::string& name, const num::Tensor& v) {
      l2_anchor.set(name, num::Tensor(v.shape(), std::vector<double>(v.size(), 1.0)), v);
    });
  }
  selection::ReplaySet real_buffer;
  num::RngStream real_rng(seed, num::stream_id("loop.real"));
  if (plan.real) add_real_exemplars(real_buffer, seq.base, cfg.real_per_class, real_rng);

  std::size_t global_step = 0;
  for (std::size_t i = 1; i <= n; ++i) {
    const auto& task = seq.tasks[i - 1];
    TaskRecord record;
    record.task = i;

    if (plan.train) {
      const distill::TeacherSnapshot teacher(model);  // f^{i-1}
      num::RngStream gen_rng(seed, num::stream_id("loop.generate", {i}));
      num::RngStream filter_rng(seed, num::stream_id("loop.filter", {i}));
      num::RngStream batch_rng(seed, num::stream_id("loop.batch", {i}));
      num::RngStream replay_rng(seed, num::stream_id("loop.replay", {i}));

      // (1) replay set for every class in the pool
      if (plan.synthetic) {
        record.replay = stage(i, "replay generation", [&] {
          return synthesize_replay(res.pool, generator, res.registry, teacher, plan, cfg, gen_rng, filter_rng);
        });
      } else if (plan.real) {
        record.replay = real_buffer;
      }
      const bool mixing = !record.replay.empty();

      // (2) finetune f^{i-1} → f^i
      stage(i, "vlm finetuning", [&] {
        model.params().reset_optimizer();
        if (plan.weights.awc_on()) {
          if (mixing) {
            num::RngStream importance_rng(seed, num::stream_id("loop.importance", {i}));
            estimate_importance(model, record.replay, res.pool, cfg.importance_batches,
                                std::max<std::size_t>(2, cfg.batch / 2), importance, importance_rng);
          }
          importance.reset_anchor(model.params());
        }
        const std::size_t n_replay =
            mixing ? std::max<std::size_t>(2, static_cast<std::size_t>(std::lround(cfg.batch * cfg.replay_fraction)))
                   : 0;
        const std::size_t n_task = std::max<std::size_t>(1, cfg.batch - std::min(n_replay, cfg.batch - 1));
        const std::size_t take = std::min(n_task, task.train.size());
        std::vector<std::size_t> order;
        std::size_t cursor = task.train.size();
        vlm::AfterBackward hook;
        if (plan.weights.awc_on()) hook = [&](const num::ParamStore& p) { importance.update(p, plan.weights.awc); };
        for (std::size_t s = 0; s < cfg.steps; ++s, ++global_step) {
          if (cursor + take > order.size()) {
            order = batch_rng.permutation(task.train.size());
            cursor = 0;
          }
          const auto task_batch = task.train.subset(std::span<const std::size_t>(order.data() + cursor, take));
          cursor += take;
          std::optional<distill::ReplayBatch> replay_batch;
          if (mixing) replay_batch = draw_replay(record.replay, res.pool, n_replay, replay_rng);
          distill::GiftTerms terms;
          vlm::train_step(
              model,
              [&](num::Tape& tape, const vlm::BoundEncoder& enc) {
                terms = distill::compute_gift_loss(tape, enc, &teacher, task_batch, task.classes,
                                                   replay_batch ? &*replay_batch : nullptr, plan.weights, &importance);
                if (plan.l2) {
                  auto l2 = distill::loss_awc(tape, enc, l2_anchor);
                  terms.awc = l2.value().item();
                  terms.total = num::add(terms.total, num::scale(l2, cfg.l2_lambda));
                  terms.value = terms.total.value().item();
                }
                return terms.total;
              },
              cfg.opt, hook);
          res.losses.add(global_step, terms);
        }
      });

      // (3) LoRA data from f^i, then an adapter for this task's classes
      if (plan.lft) {
        num::RngStream select_rng(seed, num::stream_id("loop.lora_select", {i}));
        num::RngStream adapter_rng(seed, num::stream_id("loop.adapter", {i}));
        stage(i, "lora finetuning", [&] {
          record.lora_data =
              selection::select_lora_data(model, task.train, task.classes, cfg.l, cfg.lora_policy, &select_rng);
          auto adapter = lora::finetune_adapter(generator, record.lora_data, task.classes, cfg.adapter, adapter_rng,
                                                &record.adapter_history);
          res.registry.register_adapter(std::move(adapter), task.classes, "adapter_task" + std::to_string(i));
        });
      }
    }

    // (4) grow the pool
    res.pool.insert(res.pool.end(), task.classes.begin(), task.classes.end());
    if (plan.real) add_real_exemplars(real_buffer, task, cfg.real_per_class, real_rng);

    for (std::size_t j = 0; j <= n; ++j)
      res.matrix.set(i, j, plan.train ? evaluate_column(model, seq, j, cfg.class_incremental) : res.matrix.at(0, j));
    res.tasks.push_back(std::move(record));
    if (observer) observer(i, res);
  }

  res.report = compute_metrics(res.matrix, cfg.transfer_includes_row0);
  if (plan.real) {
    std::size_t classes = real_buffer.classes().size();
    res.replay_storage_bytes = real_replay_bytes(classes, cfg.real_per_class, generator.config().pixels);
  }
  res.adapter_storage_bytes = adapter_bytes(res.registry);
  return res;
}

}  // namespace

RunResult run_lora_loop(const TaskSequence& seq, const Pretrained& start, const LoopConfig& config, std::uint64_t seed,
                        const TaskObserver& observer) {
  return run_core(seq, start, Method::lora_loop, config, seed, observer);
}

RunResult run_baseline(const TaskSequence& seq, const Pretrained& start, Method kind, const LoopConfig& config,
                       std::uint64_t seed, const TaskObserver& observer) {
  if (kind == Method::lora_loop) throw std::invalid_argument("run_baseline: lora_loop is not a baseline");
  return run_core(seq, start, kind, config, seed, observer);
}

RunResult run_method(const TaskSequence& seq, const Pretrained& start, Method method, const LoopConfig& config,
                     std::uint64_t seed, const TaskObserver& observer) {
  return run_core(seq, start, method, config, seed, observer);
}

}  // namespace loraloop::continual
