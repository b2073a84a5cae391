#include <cmath>
#include <set>
#include <sstream>

#include "doctest.h"
#include "loraloop/continual/loop.hpp"
#include "loraloop/numcore/checkpoint.hpp"
#include "loraloop/taskgen/suite.hpp"

using namespace loraloop;
using namespace loraloop::continual;

namespace {

AccuracyMatrix fill(std::size_t n, double v) {
  AccuracyMatrix m(n);
  for (std::size_t i = 0; i <= n; ++i)
    for (std::size_t j = 0; j <= n; ++j) m.set(i, j, v);
  return m;
}

bool same_report(const MetricsReport& a, const MetricsReport& b) {
  auto eq = [](double x, double y) { return (std::isnan(x) && std::isnan(y)) || x == y; };
  auto veq = [&](const std::vector<double>& x, const std::vector<double>& y) {
    if (x.size() != y.size()) return false;
    for (std::size_t i = 0; i < x.size(); ++i)
      if (!eq(x[i], y[i])) return false;
    return true;
  };
  return veq(a.transfer, b.transfer) && veq(a.avg, b.avg) && veq(a.last, b.last) &&
         eq(a.mean_transfer, b.mean_transfer) && eq(a.mean_last, b.mean_last) && eq(a.base_last, b.base_last);
}

// Small suite and short pretraining shared by the loop tests.
struct TinyWorld {
  TaskSequence seq;
  Pretrained start;
  LoopConfig config;

  static const TinyWorld& get() {
    static const TinyWorld w = build();
    return w;
  }

 private:
  static TinyWorld build() {
    taskgen::SuiteConfig sc;
    sc.n_tasks = 2;
    sc.classes_per_task = 2;
    sc.base_classes = 6;
    sc.train_per_class = 12;
    sc.test_per_class = 25;
    auto seq = taskgen::make_suite(sc);
    PretrainSettings ps;
    ps.vlm_train.steps = 400;
    ps.vlm_train.batch = 16;
    ps.generator.hidden = 48;
    ps.generator.steps = 10;
    ps.generator_train.epochs = 10;
    ps.generator_train.batch = 16;
    auto start = pretrain_models(seq, ps, 5);
    LoopConfig c;
    c.steps = 12;
    c.batch = 8;
    c.m_pre = 2;
    c.importance_batches = 2;
    c.adapter.epochs = 3;
    c.adapter.repeats = 2;
    c.adapter.batch = 8;
    return TinyWorld{std::move(seq), std::move(start), c};
  }
};

}  // namespace

TEST_CASE("metrics oracles") {
  SUBCASE("hand-averaged column") {
    AccuracyMatrix m = fill(2, 0.3);
    m.set(0, 2, 0.5);
    m.set(1, 2, 0.6);
    m.set(2, 2, 0.9);
    const auto r = compute_metrics(m);
    CHECK(r.transfer[1] == doctest::Approx(0.55).epsilon(1e-15));
    CHECK(r.avg[1] == doctest::Approx(2.0 / 3.0).epsilon(1e-15));
    CHECK(r.last[1] == 0.9);
    CHECK(r.transfer[0] == doctest::Approx(0.3));
    CHECK(r.mean_last == doctest::Approx(0.6));

    const auto without = compute_metrics(m, false);
    CHECK(std::isnan(without.transfer[0]));
    CHECK(without.transfer[1] == 0.6);
    CHECK(without.mean_transfer == 0.6);
  }
  SUBCASE("constant matrix") {
    const auto r = compute_metrics(fill(3, 0.7));
    for (std::size_t j = 0; j < 3; ++j) {
      CHECK(r.transfer[j] == doctest::Approx(0.7).epsilon(1e-15));
      CHECK(r.avg[j] == doctest::Approx(0.7).epsilon(1e-15));
      CHECK(r.last[j] == 0.7);
    }
    CHECK(r.base_initial == 0.7);
    CHECK(r.base_last == 0.7);
  }
  SUBCASE("permuting task columns permutes the metrics") {
    AccuracyMatrix m(3), p(3);
    const std::size_t perm[] = {0, 3, 1, 2};
    for (std::size_t i = 0; i <= 3; ++i)
      for (std::size_t j = 0; j <= 3; ++j) m.set(i, j, 0.1 * static_cast<double>(i + 1) + 0.05 * static_cast<double>(j));
    for (std::size_t i = 0; i <= 3; ++i)
      for (std::size_t j = 0; j <= 3; ++j) p.set(i, j, m.at(i, perm[j]));
    const auto a = compute_metrics(m, false);
    const auto b = compute_metrics(p, false);
    for (std::size_t j = 1; j <= 3; ++j) {
      CHECK(b.avg[j - 1] == a.avg[perm[j] - 1]);
      CHECK(b.last[j - 1] == a.last[perm[j] - 1]);
    }
  }
  SUBCASE("incomplete matrices are rejected") {
    AccuracyMatrix m(1);
    m.set(0, 0, 0.5);
    m.set(0, 1, 0.5);
    CHECK_THROWS(compute_metrics(m));
    CHECK_THROWS(m.set(1, 0, 1.5));
    CHECK_THROWS(m.at(1, 1));
    CHECK(m.filled_rows() == 1);
  }
  SUBCASE("csv round trip") {
    auto m = fill(2, 0.25);
    m.set(2, 1, 1.0 / 3.0);
    std::stringstream s;
    m.write_csv(s);
    CHECK(AccuracyMatrix::read_csv(s) == m);
  }
}

TEST_CASE("storage byte formulas") {
  CHECK(real_replay_bytes(40, 2, 256) == 163840);
  CHECK(real_replay_bytes(40, 2, 256, 1) == 20480);
  const auto& w = TinyWorld::get();
  lora::AdapterRegistry reg;
  reg.register_adapter(lora::LoraAdapter(w.start.generator, {}, 1), {"x"}, "a");
  CHECK(adapter_bytes(reg) == reg.storage_reals() * 8);
  CHECK(adapter_bytes(reg, 2) == reg.storage_reals() * 2);
}

TEST_CASE("method names round trip") {
  for (auto m : {Method::lora_loop, Method::zero_shot, Method::continual_finetune, Method::l2_anchor,
                 Method::real_replay, Method::frozen_generator_replay})
    CHECK(parse_method(to_string(m)) == m);
  CHECK_THROWS(parse_method("ewc"));
}

TEST_CASE("an empty sequence returns the starting model") {
  const auto& w = TinyWorld::get();
  TaskSequence empty = w.seq;
  empty.tasks.clear();
  const auto r = run_lora_loop(empty, w.start, w.config, 1);
  CHECK(r.matrix.n_tasks() == 0);
  CHECK(r.matrix.filled_rows() == 1);
  CHECK(num::checkpoint_hash(r.model.params()) == num::checkpoint_hash(w.start.vlm.params()));
  CHECK(r.registry.size() == 0);
}

TEST_CASE("lora loop structure and determinism") {
  const auto& w = TinyWorld::get();
  std::vector<std::size_t> seen;
  const auto r = run_lora_loop(w.seq, w.start, w.config, 3, [&](std::size_t task, const RunResult& s) {
    seen.push_back(task);
    CHECK(s.matrix.row_filled(task));
  });
  CHECK(seen == std::vector<std::size_t>{1, 2});
  REQUIRE(r.registry.size() == 2);
  for (std::size_t i = 0; i < 2; ++i) {
    const auto& classes = r.registry.entries()[i].classes;
    CHECK(std::set<std::string>(classes.begin(), classes.end()) ==
          std::set<std::string>(w.seq.tasks[i].classes.begin(), w.seq.tasks[i].classes.end()));
  }
  CHECK(r.pool.size() == 6 + 2 + 2);
  // Replay of task 2 covers every class of the pool before it, k per class.
  CHECK(r.tasks[1].replay.size() == 8 * w.config.k);
  CHECK(r.tasks[1].lora_data.size() == 2 * w.config.l);
  CHECK(r.adapter_storage_bytes == adapter_bytes(r.registry));
  CHECK(r.losses.size() == 2 * w.config.steps);

  const auto again = run_lora_loop(w.seq, w.start, w.config, 3);
  CHECK(again.matrix == r.matrix);
  CHECK(same_report(again.report, r.report));
  CHECK(num::checkpoint_hash(again.model.params()) == num::checkpoint_hash(r.model.params()));
}

TEST_CASE("loop without replay or regularisation equals plain finetuning") {
  const auto& w = TinyWorld::get();
  LoopConfig c = w.config;
  c.replay = false;
  c.lft = false;
  c.sf = false;
  c.weights.use_cd = c.weights.use_ita = c.weights.use_awc = false;
  const auto loop = run_lora_loop(w.seq, w.start, c, 4);
  const auto ft = run_baseline(w.seq, w.start, Method::continual_finetune, c, 4);
  CHECK(num::checkpoint_hash(loop.model.params()) == num::checkpoint_hash(ft.model.params()));
  CHECK(loop.matrix == ft.matrix);
  CHECK_THROWS(run_baseline(w.seq, w.start, Method::lora_loop, c, 4));
}

TEST_CASE("baselines") {
  const auto& w = TinyWorld::get();
  const auto zs = run_method(w.seq, w.start, Method::zero_shot, w.config, 6);
  for (std::size_t i = 1; i <= 2; ++i)
    for (std::size_t j = 0; j <= 2; ++j) CHECK(zs.matrix.at(i, j) == zs.matrix.at(0, j));

  const auto ft = run_method(w.seq, w.start, Method::continual_finetune, w.config, 6);
  for (std::size_t j = 0; j <= 2; ++j) CHECK(ft.matrix.at(0, j) == zs.matrix.at(0, j));
  CHECK(ft.registry.size() == 0);

  LoopConfig stiff = w.config;
  stiff.l2_lambda = 1e6;
  const auto l2 = run_method(w.seq, w.start, Method::l2_anchor, stiff, 6);
  CHECK(std::abs(l2.report.mean_last - zs.report.mean_last) <= 0.01);

  const auto rr = run_method(w.seq, w.start, Method::real_replay, w.config, 6);
  CHECK(rr.replay_storage_bytes == 10 * 2 * 256 * 8);
  CHECK(rr.registry.size() == 0);

  const auto fg = run_method(w.seq, w.start, Method::frozen_generator_replay, w.config, 6);
  CHECK(fg.registry.size() == 0);
  for (const auto& e : fg.tasks[1].replay.entries) CHECK(e.generator == "base");
}
