// Acceptance checks. Prints one PASS/FAIL line per criterion and exits
// nonzero if any fails.
//
//   acceptance [work_dir] [ids]
//
// ids is an optional comma-separated subset, e.g. "5,6".
//
// work_dir/cache keeps pretrained models between invocations; work_dir/runs is
// rebuilt every time.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <iostream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "../support/gradcheck.hpp"
#include "loraloop/cli/commands.hpp"
#include "loraloop/continual/metrics.hpp"
#include "loraloop/numcore/checkpoint.hpp"
#include "loraloop/selection/select.hpp"

namespace fs = std::filesystem;
using namespace loraloop;
using num::Tensor;

namespace {

struct Outcome {
  bool pass = false;
  std::string detail;
};

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) { return std::chrono::duration<double>(Clock::now() - t0).count(); }

std::string fmt(double v, int digits = 4) {
  std::ostringstream s;
  s << std::setprecision(digits) << v;
  return s.str();
}

std::string slurp(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k] != b[k]) return false;
  return true;
}

double mean_of(const std::vector<double>& v) { return std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size()); }

// ---- desk-scale runs shared by several criteria ---------------------------

class Runs {
 public:
  Runs(fs::path work, std::vector<std::uint64_t> seeds) : work_(std::move(work)), seeds_(std::move(seeds)) {
    fs::remove_all(work_ / "runs");
  }

  [[nodiscard]] const std::vector<std::uint64_t>& seeds() const { return seeds_; }

  cli::ExperimentConfig config(const std::string& method, const std::vector<std::string>& extra = {}) const {
    std::vector<std::string> sets{"experiment.method=" + method, "experiment.cache_dir=" + (work_ / "cache").string()};
    sets.insert(sets.end(), extra.begin(), extra.end());
    return cli::load_config(LL_CONFIG_DIR "/desk_defaults.cfg", sets);
  }

  /// Run directory for (variant, seed); executed on first use.
  fs::path get(const std::string& variant, const cli::ExperimentConfig& config, std::uint64_t seed) {
    const auto key = variant + "#" + std::to_string(seed);
    if (auto it = dirs_.find(key); it != dirs_.end()) return it->second;
    const auto t0 = Clock::now();
    const auto dir = cli::execute_run(config, seed, work_ / "runs" / variant);
    std::cerr << "  ran " << variant << " seed " << seed << " in " << fmt(seconds_since(t0), 3) << " s\n";
    return dirs_[key] = dir;
  }

  std::vector<cli::MetricsRecord> all(const std::string& variant, const cli::ExperimentConfig& config) {
    std::vector<cli::MetricsRecord> out;
    for (auto s : seeds_) out.push_back(cli::read_metrics(get(variant, config, s)));
    return out;
  }

  [[nodiscard]] const fs::path& work() const { return work_; }

 private:
  fs::path work_;
  std::vector<std::uint64_t> seeds_;
  std::map<std::string, fs::path> dirs_;
};

std::vector<double> field(const std::vector<cli::MetricsRecord>& runs, double continual::MetricsReport::*f) {
  std::vector<double> out;
  for (const auto& r : runs) out.push_back(r.report.*f);
  return out;
}

// ---- criteria --------------------------------------------------------------

Outcome gradients() {
  const auto t0 = Clock::now();
  num::RngStream rng(77, 1);
  double worst = 0.0;
  std::size_t entries = 0;
  for (int net = 0; net < 25; ++net) {
    std::vector<Tensor> params;
    auto build = testing::random_network(rng, params);
    const auto r = testing::check_gradients(build, params);
    worst = std::max(worst, r.max_rel_error);
    entries += r.checked;
  }
  const double t = seconds_since(t0);
  return {worst < 1e-4 && t < 10.0, "max relative error " + fmt(worst, 3) + " over 25 networks (" +
                                        std::to_string(entries) + " entries), " + fmt(t, 3) + " s"};
}

Outcome probabilities() {
  vlm::DualEncoder model({}, 31);
  const std::vector<std::string> classes{"stripes-f1-p0", "dots-f2-p1", "rings-f3-p2", "checker-f4-p0",
                                         "gradient-f2-p3", "blobs-f1-p1"};
  model.register_classes(classes);
  num::RngStream rng(31, 2);
  Tensor x({1000, 256});
  for (auto& v : x.values()) v = rng.uniform();
  const auto p = vlm::class_probabilities(model, x, classes);
  double worst = 0.0;
  for (std::size_t i = 0; i < p.rows(); ++i) {
    double s = 0.0;
    for (std::size_t c = 0; c < p.cols(); ++c) s += p.at(i, c);
    worst = std::max(worst, std::abs(s - 1.0));
  }
  const auto base = vlm::predict(model, x, classes);
  std::size_t changed = 0;
  for (double tau : {0.01, 0.1, 1.0, 10.0, 100.0}) {
    model.params().get("log_tau")[0] = std::log(tau);
    const auto pred = vlm::predict(model, x, classes);
    for (std::size_t i = 0; i < pred.size(); ++i) changed += pred[i] != base[i];
  }
  return {worst <= 1e-9 && changed == 0, "max |row sum - 1| " + fmt(worst, 3) + ", argmax changes across 5 temperatures: " +
                                             std::to_string(changed) + " of 5000"};
}

gen::GeneratorModel random_generator(std::uint64_t seed, const std::vector<std::string>& classes) {
  gen::GeneratorConfig c;
  c.pixels = 16;
  c.hidden = 24;
  c.time_dim = 8;
  c.cond_dim = 8;
  c.steps = 20;
  gen::GeneratorModel m(c, seed);
  m.register_classes(classes);
  num::RngStream rng(seed, 99);
  for (const char* name : gen::kDenoiserBiases) {
    auto& b = m.params().get(name);
    for (std::size_t k = 0; k < b.size(); ++k) b[k] = 0.1 * rng.normal();
  }
  return m;
}

Outcome lora_noop(Runs& runs) {
  const auto dir = runs.get("lora_loop", runs.config("lora_loop"), runs.seeds().front());
  const auto run = cli::load_run(dir);
  gen::GeneratorModel base(run.config.pretrain.generator, run.seed);
  gen::load_generator(dir / "generator", base);
  const auto before = num::checkpoint_hash(base.params());

  const lora::LoraAdapter fresh(base, run.config.loop_config().adapter.lora, 9);
  const auto base_view = gen::base_view(base);
  const auto adapted = lora::apply_adapter(base, fresh);
  const auto& classes = run.seq.tasks[0].classes;
  std::size_t mismatched = 0;
  for (std::uint64_t s = 0; s < 16; ++s) {
    const std::vector<gen::SampleRequest> req{{classes[s % classes.size()], s}};
    std::vector<Tensor> trajectory;
    gen::sample_batch(base_view, req, 7.5, [&](std::size_t, const Tensor&, const Tensor&, const Tensor& eg) {
      trajectory.push_back(eg);
    });
    std::size_t step = 0;
    const auto b = gen::sample_batch(adapted, req, 7.5, [&](std::size_t, const Tensor&, const Tensor&, const Tensor& eg) {
      if (!bit_equal(trajectory.at(step++), eg)) ++mismatched;
    });
    const auto a = gen::sample_cfg(base_view, req[0].class_name, 7.5, s);
    if (!bit_equal(a.sample, b[0].sample)) ++mismatched;
  }

  // Finetune an adapter on real task data and check the base is untouched.
  auto cfg = run.config.loop_config().adapter;
  cfg.epochs = 5;
  num::RngStream rng(9, 3);
  const auto tuned = lora::finetune_adapter(base, run.seq.tasks[0].train, classes, cfg, rng);
  const auto after = num::checkpoint_hash(base.params());
  const auto registry = lora::AdapterRegistry::load(dir / "adapters", base);
  const auto after_load = num::checkpoint_hash(base.params());
  const bool same_disk = num::checkpoint_hash(base.params()) == [&] {
    gen::GeneratorModel fresh_load(run.config.pretrain.generator, run.seed);
    gen::load_generator(dir / "generator", fresh_load);
    return num::checkpoint_hash(fresh_load.params());
  }();
  (void)tuned;
  (void)registry;
  const bool pass = mismatched == 0 && before == after && after == after_load && same_disk;
  return {pass, "16 seeds, " + std::to_string(mismatched) + " differing steps or samples; base hash " +
                    (before == after && same_disk ? "unchanged" : "CHANGED") + " after finetuning"};
}

Outcome cfg_identities() {
  const std::vector<std::string> classes{"stripes-f1-p0", "dots-f2-p1", "rings-f3-p2"};
  std::size_t models = 0, steps = 0, bad = 0;
  for (std::uint64_t seed = 1; seed <= 10; ++seed) {
    const auto model = random_generator(seed, classes);
    const auto view = gen::base_view(model);
    std::vector<gen::SampleRequest> req;
    for (std::uint64_t k = 0; k < 4; ++k) req.push_back({classes[k % 3], seed * 10 + k});
    gen::sample_batch(view, req, 1.0, [&](std::size_t, const Tensor&, const Tensor& ec, const Tensor& eg) {
      ++steps;
      bad += !bit_equal(eg, ec);
    });
    gen::sample_batch(view, req, 0.0, [&](std::size_t, const Tensor& eu, const Tensor&, const Tensor& eg) {
      ++steps;
      bad += !bit_equal(eg, eu);
    });
    const auto guided = gen::sample_batch(view, req, 0.0);
    std::vector<std::uint64_t> seeds;
    for (const auto& r : req) seeds.push_back(r.seed);
    const auto uncond = gen::sample_unconditional(view, seeds);
    for (std::size_t i = 0; i < req.size(); ++i)
      for (std::size_t p = 0; p < uncond.cols(); ++p) bad += guided[i].sample[p] != uncond.at(i, p);
    ++models;
  }
  return {bad == 0, std::to_string(models) + " random models, " + std::to_string(steps) + " guided steps, " +
                        std::to_string(bad) + " inexact"};
}

Outcome selection_oracles() {
  using selection::Policy;
  num::RngStream gen(404, 1);
  std::size_t bad = 0;
  auto as_set = [](std::vector<std::size_t> v) {
    std::sort(v.begin(), v.end());
    return v;
  };
  vlm::DualEncoder scorer({}, 12);
  const std::vector<std::string> classes{"stripes-f1-p0", "dots-f2-p1"};
  scorer.register_classes(classes);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 1 + gen.index(64);
    std::vector<selection::ScoredItem> items;
    for (std::size_t i = 0; i < n; ++i)
      items.push_back({i, "c", std::floor(gen.uniform() * 6.0) / 5.0 - 0.5});  // coarse: many ties
    std::vector<std::size_t> desc(n), asc(n);
    std::iota(desc.begin(), desc.end(), 0);
    std::iota(asc.begin(), asc.end(), 0);
    std::stable_sort(desc.begin(), desc.end(), [&](auto a, auto b) { return items[a].confidence > items[b].confidence; });
    std::stable_sort(asc.begin(), asc.end(), [&](auto a, auto b) { return items[a].confidence < items[b].confidence; });
    const std::size_t budget = gen.index(n + 1);
    num::RngStream rng(trial, 2);

    bad += selection::select_policy(items, budget, Policy::top, rng) != std::vector(desc.begin(), desc.begin() + budget);
    bad += as_set(selection::select_policy(items, budget, Policy::bottom, rng)) !=
           as_set({asc.begin(), asc.begin() + budget});
    const std::size_t lo = (n - budget) / 2;
    bad += as_set(selection::select_policy(items, budget, Policy::middle, rng)) !=
           as_set({desc.begin() + lo, desc.begin() + lo + budget});
    const auto tb = selection::select_policy(items, budget, Policy::top_and_bottom, rng);
    const std::size_t n_top = budget - budget / 2;
    std::vector<std::size_t> expect(desc.begin(), desc.begin() + n_top);
    for (auto i : asc) {
      if (expect.size() == budget) break;
      if (std::find(desc.begin(), desc.begin() + n_top, i) == desc.begin() + n_top) expect.push_back(i);
    }
    bad += as_set(tb) != as_set(expect);
    num::RngStream r1(trial, 3), r2(trial, 3);
    const auto rnd = selection::select_policy(items, budget, Policy::random, r1);
    const auto rnd_sorted = as_set(rnd);
    bad += rnd != selection::select_policy(items, budget, Policy::random, r2) || rnd.size() != budget ||
           std::adjacent_find(rnd_sorted.begin(), rnd_sorted.end()) != rnd_sorted.end();

    // sample_topk against scores computed here.
    if (trial % 10 == 0) {
      std::vector<gen::GeneratedCandidate> cands;
      const std::size_t m = 1 + gen.index(16);
      for (std::size_t i = 0; i < m; ++i) {
        Tensor img({256});
        for (auto& v : img.values()) v = std::floor(gen.uniform() * 2.0);  // binary images: duplicates tie
        cands.push_back({img, scorer.prompt().fill(classes[i % 2]), classes[i % 2], i, std::nullopt});
      }
      std::vector<std::pair<double, std::size_t>> keyed;
      for (std::size_t i = 0; i < m; ++i)
        keyed.push_back({-vlm::confidence(scorer, cands[i].sample, scorer.prompt_tokens(cands[i].class_name)), i});
      std::sort(keyed.begin(), keyed.end());
      const std::size_t k = 1 + gen.index(m);
      const auto kept = selection::sample_topk(cands, k, scorer);
      for (std::size_t i = 0; i < k; ++i) bad += kept[i].seed != keyed[i].second;
    }
  }
  return {bad == 0, "1000 instances (n <= 64, tied scores), " + std::to_string(bad) + " mismatches"};
}

Outcome metric_oracle() {
  using continual::AccuracyMatrix;
  // Rows are models 0..3, columns are the base pool and tasks 1..3.
  const double a[4][4] = {{0.75, 0.25, 0.5, 0.25},
                          {0.5, 1.0, 0.25, 0.5},
                          {0.5, 1.0, 0.75, 0.75},
                          {0.25, 0.5, 1.0, 0.75}};
  AccuracyMatrix m(3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) m.set(i, j, a[i][j]);
  const auto r = continual::compute_metrics(m);
  // By hand; every value is a short binary fraction, so equality is exact.
  const std::vector<double> transfer{0.25, 0.375, 0.5}, avg{0.6875, 0.625, 0.5625}, last{0.5, 1.0, 0.75};
  bool ok = r.transfer == transfer && r.avg == avg && r.last == last && r.mean_transfer == 0.375 &&
            r.mean_avg == 0.625 && r.mean_last == 0.75 && r.base_initial == 0.75 && r.base_last == 0.25 &&
            r.base_avg == 0.5;

  AccuracyMatrix two(2);
  for (std::size_t i = 0; i < 3; ++i)
    for (std::size_t j = 0; j < 3; ++j) two.set(i, j, 0.3);
  two.set(0, 2, 0.5);
  two.set(1, 2, 0.6);
  two.set(2, 2, 0.9);
  const auto r2 = continual::compute_metrics(two);
  auto close = [](double x, double hand) { return std::abs(x - hand) <= 1e-15 * std::abs(hand); };
  ok = ok && close(r2.transfer[1], 0.55) && close(r2.avg[1], 2.0 / 3.0) && r2.last[1] == 0.9;

  AccuracyMatrix c(3);
  for (std::size_t i = 0; i < 4; ++i)
    for (std::size_t j = 0; j < 4; ++j) c.set(i, j, 0.7);
  const auto rc = continual::compute_metrics(c);
  for (std::size_t j = 0; j < 3; ++j) ok = ok && rc.last[j] == 0.7 && rc.avg[j] == 0.7 && rc.transfer[j] == 0.7;
  return {ok, "3-task hand fixture, 2-task column example and constant matrix"};
}

Outcome baseline_equivalence(Runs& runs) {
  const std::vector<std::string> off{"loop.replay=false", "loop.lft=false",   "loop.sf=false",
                                     "loss.use_cd=false", "loss.use_ita=false", "loss.use_awc=false"};
  const auto seed = runs.seeds().front();
  const auto loop = runs.get("loop_off", runs.config("lora_loop", off), seed);
  const auto ft = runs.get("continual_finetune", runs.config("continual_finetune"), seed);
  const auto n = cli::load_run(ft).seq.task_count();
  const auto ckpt = fs::path("checkpoints") / ("task_" + std::to_string(n)) / "encoder.llcp";
  const bool weights = slurp(loop / ckpt) == slurp(ft / ckpt);
  const bool matrix = slurp(loop / "matrix.csv") == slurp(ft / "matrix.csv");
  return {weights && matrix, std::string("final encoder ") + (weights ? "bit-identical" : "DIFFERS") + ", accuracy matrix " +
                                 (matrix ? "identical" : "DIFFERS")};
}

std::vector<double> bootstrap_means(const std::vector<double>& d, std::size_t resamples, std::uint64_t seed) {
  num::RngStream rng(seed, 1);
  std::vector<double> out;
  for (std::size_t b = 0; b < resamples; ++b) {
    double s = 0.0;
    for (std::size_t i = 0; i < d.size(); ++i) s += d[rng.index(d.size())];
    out.push_back(s / static_cast<double>(d.size()));
  }
  std::sort(out.begin(), out.end());
  return out;
}

Outcome domain_gap(Runs& runs) {
  const auto t0 = Clock::now();
  const auto config = runs.config("lora_loop");
  std::vector<double> diffs, base_conf, adapted_conf;
  for (auto seed : runs.seeds()) {
    const auto dir = runs.get("lora_loop", config, seed);
    const auto run = cli::load_run(dir);
    gen::GeneratorModel generator(run.config.pretrain.generator, seed);
    gen::load_generator(dir / "generator", generator);
    const auto registry = lora::AdapterRegistry::load(dir / "adapters", generator);
    const std::size_t n = run.seq.task_count();
    std::vector<vlm::DualEncoder> scorers;  // f^i: the model that chose task i's LoRA data
    for (std::size_t t = 1; t <= n; ++t) {
      scorers.emplace_back(run.config.pretrain.vlm, seed);
      vlm::load_encoder(dir / "checkpoints" / ("task_" + std::to_string(t)), scorers.back());
    }
    const auto base = gen::base_view(generator);
    for (std::size_t k = 0; k < 32; ++k) {
      const std::size_t task = k % n;
      const auto& classes = run.seq.tasks[task].classes;
      const auto& cls = classes[(k / n) % classes.size()];
      const auto* entry = registry.find(cls);
      if (entry == nullptr) return {false, "no adapter registered for " + cls};
      const auto adapted = lora::apply_adapter(generator, entry->adapter, entry->name);
      const auto s = num::stream_id("acceptance-gap", {seed, k});
      const auto& scorer = scorers[task];
      const auto prompt = scorer.prompt_tokens(cls);
      const double cb = vlm::confidence(scorer, gen::sample_cfg(base, cls, run.config.loop.guidance, s).sample, prompt);
      const double ca = vlm::confidence(scorer, gen::sample_cfg(adapted, cls, run.config.loop.guidance, s).sample, prompt);
      base_conf.push_back(cb);
      adapted_conf.push_back(ca);
      diffs.push_back(ca - cb);
    }
  }
  const auto boot = bootstrap_means(diffs, 10000, 8);
  const double lower = boot[static_cast<std::size_t>(0.025 * boot.size())];
  const double t = seconds_since(t0);
  const bool pass = mean_of(adapted_conf) > mean_of(base_conf) && lower > 0.0 && t < 600.0;
  return {pass, "mean confidence adapted " + fmt(mean_of(adapted_conf)) + " vs base " + fmt(mean_of(base_conf)) +
                    ", paired diff " + fmt(mean_of(diffs)) + " (95% bootstrap lower " + fmt(lower, 3) + ", n=" +
                    std::to_string(diffs.size()) + "), " + fmt(t, 3) + " s"};
}

Outcome method_ordering(Runs& runs) {
  const auto t0 = Clock::now();
  const double ll = mean_of(field(runs.all("lora_loop", runs.config("lora_loop")), &continual::MetricsReport::mean_last));
  const double fg = mean_of(field(runs.all("frozen_generator_replay", runs.config("frozen_generator_replay")),
                                  &continual::MetricsReport::mean_last));
  const double ft = mean_of(
      field(runs.all("continual_finetune", runs.config("continual_finetune")), &continual::MetricsReport::mean_last));
  const bool pass = ll >= fg && ll - ft >= 0.05 && fg - ft >= 0.05 && seconds_since(t0) < 1800.0;
  return {pass, "mean Last: lora_loop " + fmt(100 * ll) + ", frozen generator " + fmt(100 * fg) + ", finetune " +
                    fmt(100 * ft) + " over " + std::to_string(runs.seeds().size()) + " seeds"};
}

Outcome stability(Runs& runs) {
  const auto ll = runs.all("lora_loop", runs.config("lora_loop"));
  const auto ft = runs.all("continual_finetune", runs.config("continual_finetune"));
  const double t_ll = mean_of(field(ll, &continual::MetricsReport::mean_transfer));
  const double t_ft = mean_of(field(ft, &continual::MetricsReport::mean_transfer));
  const double drop_ll = mean_of(field(ll, &continual::MetricsReport::base_initial)) -
                         mean_of(field(ll, &continual::MetricsReport::base_last));
  const double drop_ft = mean_of(field(ft, &continual::MetricsReport::base_initial)) -
                         mean_of(field(ft, &continual::MetricsReport::base_last));
  const bool transfer_ok = t_ll >= t_ft;
  const bool retain_ok = drop_ll <= 0.05;
  const bool ft_ok = drop_ft > drop_ll;
  return {transfer_ok && retain_ok && ft_ok,
          "Transfer lora_loop " + fmt(100 * t_ll) + " vs finetune " + fmt(100 * t_ft) + (transfer_ok ? " ok" : " FAIL") +
              "; base-pool drop lora_loop " + fmt(100 * drop_ll) + " pts" + (retain_ok ? " ok" : " FAIL (limit 5)") +
              ", finetune " + fmt(100 * drop_ft) + " pts" + (ft_ok ? " ok" : " FAIL")};
}

Outcome filter_ordering(Runs& runs) {
  const double top =
      mean_of(field(runs.all("lora_loop", runs.config("lora_loop")), &continual::MetricsReport::mean_last));
  const double bottom = mean_of(field(runs.all("filter_bottom", runs.config("lora_loop", {"loop.filter_policy=bottom"})),
                                      &continual::MetricsReport::mean_last));
  return {top >= bottom, "mean Last: top " + fmt(100 * top) + ", bottom " + fmt(100 * bottom)};
}

Outcome storage(Runs& runs) {
  const auto seed = runs.seeds().front();
  const auto rr_cfg = runs.config("real_replay");
  const auto rr = cli::read_metrics(runs.get("real_replay", rr_cfg, seed));
  const auto& s = rr_cfg.suite;
  const std::size_t pool = s.base_classes + s.n_tasks * s.classes_per_task;
  const std::size_t pixels = rr_cfg.pretrain.generator.pixels;
  const std::size_t real_expected = pool * rr_cfg.loop.real_per_class * pixels * sizeof(double);

  const auto ll_cfg = runs.config("lora_loop");
  const auto ll = cli::read_metrics(runs.get("lora_loop", ll_cfg, seed));
  const auto& g = ll_cfg.pretrain.generator;
  const std::size_t r = ll_cfg.loop.adapter.lora.rank;
  const std::size_t in1 = g.pixels + g.time_dim + g.cond_dim;
  const std::size_t per_adapter = r * ((in1 + g.hidden) + (g.hidden + g.hidden) + (g.hidden + g.pixels));
  const std::size_t adapter_expected = s.n_tasks * per_adapter * sizeof(double);

  const auto rr_json = nlohmann::json::parse(slurp(runs.get("real_replay", rr_cfg, seed) / "metrics.json"));
  const auto ll_json = nlohmann::json::parse(slurp(runs.get("lora_loop", ll_cfg, seed) / "metrics.json"));
  const bool pass = rr.storage.real_bytes() == real_expected &&
                    rr_json["storage"]["real_replay_bytes"].get<std::size_t>() == real_expected &&
                    ll.storage.adapter_bytes() == adapter_expected &&
                    ll_json["storage"]["adapter_bytes"].get<std::size_t>() == adapter_expected &&
                    rr.storage.adapter_bytes() == 0 && ll.storage.real_bytes() == 0;
  return {pass, "real replay " + std::to_string(rr.storage.real_bytes()) + " B (formula " + std::to_string(real_expected) +
                    "), adapters " + std::to_string(ll.storage.adapter_bytes()) + " B (formula " +
                    std::to_string(adapter_expected) + ")"};
}

Outcome determinism(Runs& runs) {
  const auto seed = runs.seeds().front();
  const auto config = runs.config("lora_loop");
  const auto first = runs.get("lora_loop", config, seed);
  const auto second = cli::execute_run(config, seed, runs.work() / "runs" / "repeat");
  const bool same = slurp(first / "metrics.json") == slurp(second / "metrics.json");
  const bool matrix = slurp(first / "matrix.csv") == slurp(second / "matrix.csv");
  return {same && matrix, std::string("metrics.json ") + (same ? "byte-identical" : "DIFFERS") + " across two runs of seed " +
                              std::to_string(seed)};
}

}  // namespace

int main(int argc, char** argv) {
  const fs::path work = argc > 1 ? fs::path(argv[1]) : fs::path("acceptance_work");
  fs::create_directories(work);
  Runs runs(work, {1, 2, 3, 4, 5});

  struct Criterion {
    int id;
    const char* name;
    std::function<Outcome()> check;
  };
  const std::vector<Criterion> criteria{
      {1, "gradient correctness", gradients},
      {2, "class probability contract", probabilities},
      {3, "LoRA no-op identity", [&] { return lora_noop(runs); }},
      {4, "guidance identities", cfg_identities},
      {5, "selection oracles", selection_oracles},
      {6, "metric oracle", metric_oracle},
      {7, "baseline equivalence", [&] { return baseline_equivalence(runs); }},
      {8, "domain-gap closure", [&] { return domain_gap(runs); }},
      {9, "method ordering", [&] { return method_ordering(runs); }},
      {10, "stability", [&] { return stability(runs); }},
      {11, "filtering-policy ordering", [&] { return filter_ordering(runs); }},
      {12, "storage accounting", [&] { return storage(runs); }},
      {13, "determinism", [&] { return determinism(runs); }},
  };

  std::vector<int> only;
  if (argc > 2) {
    std::istringstream in(argv[2]);
    for (std::string id; std::getline(in, id, ',');) only.push_back(std::stoi(id));
  }

  std::vector<std::string> lines;
  int failed = 0;
  std::size_t attempted = 0;
  const auto t0 = Clock::now();
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    ++attempted;
    Outcome o;
    try {
      o = c.check();
    } catch (const std::exception& e) {
      o = {false, std::string("exception: ") + e.what()};
    }
    failed += !o.pass;
    std::ostringstream line;
    line << "criterion " << std::setw(2) << c.id << " " << (o.pass ? "PASS" : "FAIL") << "  " << c.name << ": "
         << o.detail;
    lines.push_back(line.str());
    std::cout << line.str() << std::endl;
  }
  std::cout << (attempted - failed) << "/" << attempted << " criteria passed in "
            << fmt(seconds_since(t0), 4) << " s\n";
  std::ofstream summary(work / "summary.txt");
  for (const auto& l : lines) summary << l << '\n';
  return failed == 0 ? 0 : 1;
}
