#include "loraloop/cli/commands.hpp"

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <fstream>
#include <iomanip>
#include <map>
#include <mutex>
#include <sstream>
#include <thread>

#include "loraloop/io/pgm.hpp"
#include "loraloop/numcore/rng.hpp"
#include "loraloop/taskgen/suite.hpp"

namespace fs = std::filesystem;
using nlohmann::json;

namespace loraloop::cli {

namespace {

json number_or_null(double v) { return std::isfinite(v) ? json(v) : json(nullptr); }
double number_from(const json& j) { return j.is_null() ? std::nan("") : j.get<double>(); }

std::vector<double> numbers_from(const json& j) {
  std::vector<double> out;
  for (const auto& v : j) out.push_back(number_from(v));
  return out;
}

json numbers_to(const std::vector<double>& v) {
  json out = json::array();
  for (double x : v) out.push_back(number_or_null(x));
  return out;
}

void write_text(const fs::path& path, const std::string& text) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  out << text;
  if (!out) throw std::runtime_error("write failed: " + path.string());
}

json read_json(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  return json::parse(in);
}

bool uses_generator(continual::Method m) {
  return m == continual::Method::lora_loop || m == continual::Method::frozen_generator_replay;
}

std::string checkpoint_name(std::size_t task) { return task == 0 ? "f0" : "task_" + std::to_string(task); }

void save_batch_pgm(const fs::path& dir, const LabeledBatch& batch, std::span<const std::string> classes) {
  fs::create_directories(dir);
  json manifest = json::array();
  for (std::size_t r = 0; r < batch.size(); ++r) {
    std::ostringstream name;
    name << "sample_" << std::setw(4) << std::setfill('0') << r << ".pgm";
    const std::vector<std::size_t> row{r};
    io::write_pgm(dir / name.str(), batch.images.gather_rows(row), 16);
    manifest.push_back({{"file", name.str()}, {"class", classes[batch.labels[r]]}});
  }
  write_text(dir / "manifest.json", manifest.dump(2) + "\n");
}

double mean(const std::vector<double>& v) {
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += x;
      ++n;
    }
  return n ? s / static_cast<double>(n) : std::nan("");
}

double stdev(const std::vector<double>& v) {
  const double m = mean(v);
  double s = 0.0;
  std::size_t n = 0;
  for (double x : v)
    if (std::isfinite(x)) {
      s += (x - m) * (x - m);
      ++n;
    }
  return n > 1 ? std::sqrt(s / static_cast<double>(n - 1)) : 0.0;
}

}  // namespace

std::string run_dir_name(const ExperimentConfig& config, std::uint64_t seed) {
  return hex64(config.hash()) + "-s" + std::to_string(seed);
}

std::size_t StorageRecord::real_bytes() const {
  return continual::real_replay_bytes(real_classes, real_per_class, pixels, bytes_per_value);
}

MetricsRecord make_metrics_record(const ExperimentConfig& config, std::uint64_t seed,
                                  const continual::TaskSequence& seq, const continual::RunResult& result) {
  MetricsRecord m;
  m.method = continual::to_string(config.method);
  m.seed = seed;
  m.config_hash = hex64(config.hash());
  m.suite_hash = hex64(config.suite_hash());
  m.suite_fingerprint = hex64(seq.fingerprint);
  m.class_incremental = config.loop.class_incremental;
  m.report = result.report;
  const std::size_t n = result.matrix.n_tasks();
  for (std::size_t i = 0; i <= n; ++i) {
    std::vector<double> row;
    for (std::size_t j = 0; j <= n; ++j) row.push_back(result.matrix.at(i, j));
    m.matrix.push_back(std::move(row));
  }
  m.storage.pixels = config.pretrain.generator.pixels;
  if (config.method == continual::Method::real_replay) {
    m.storage.real_classes = result.pool.size();
    m.storage.real_per_class = config.loop.real_per_class;
  }
  m.storage.adapter_reals = result.registry.storage_reals();
  if (m.storage.real_bytes() != result.replay_storage_bytes || m.storage.adapter_bytes() != result.adapter_storage_bytes)
    throw std::logic_error("storage accounting disagrees with the run result");
  return m;
}

json to_json(const MetricsRecord& m) {
  json tasks = json::array();
  for (std::size_t j = 0; j < m.report.last.size(); ++j)
    tasks.push_back({{"task", j + 1},
                     {"transfer", number_or_null(m.report.transfer[j])},
                     {"avg", number_or_null(m.report.avg[j])},
                     {"last", number_or_null(m.report.last[j])}});
  json matrix = json::array();
  for (const auto& row : m.matrix) matrix.push_back(numbers_to(row));
  return {
      {"schema_version", m.schema_version},
      {"method", m.method},
      {"seed", m.seed},
      {"config_hash", m.config_hash},
      {"suite_hash", m.suite_hash},
      {"suite_fingerprint", m.suite_fingerprint},
      {"protocol", m.class_incremental ? "class_incremental" : "task_incremental"},
      {"transfer_includes_row0", m.report.transfer_includes_row0},
      {"tasks", tasks},
      {"mean",
       {{"transfer", number_or_null(m.report.mean_transfer)},
        {"avg", number_or_null(m.report.mean_avg)},
        {"last", number_or_null(m.report.mean_last)}}},
      {"base",
       {{"initial", number_or_null(m.report.base_initial)},
        {"last", number_or_null(m.report.base_last)},
        {"avg", number_or_null(m.report.base_avg)}}},
      {"matrix", matrix},
      {"storage",
       {{"real_classes", m.storage.real_classes},
        {"real_per_class", m.storage.real_per_class},
        {"pixels", m.storage.pixels},
        {"bytes_per_value", m.storage.bytes_per_value},
        {"real_replay_bytes", m.storage.real_bytes()},
        {"adapter_reals", m.storage.adapter_reals},
        {"adapter_bytes", m.storage.adapter_bytes()}}},
  };
}

MetricsRecord metrics_from_json(const json& j) {
  MetricsRecord m;
  m.schema_version = j.at("schema_version").get<int>();
  if (m.schema_version != kMetricsSchemaVersion)
    throw std::runtime_error("unsupported metrics schema version " + std::to_string(m.schema_version));
  m.method = j.at("method").get<std::string>();
  m.seed = j.at("seed").get<std::uint64_t>();
  m.config_hash = j.at("config_hash").get<std::string>();
  m.suite_hash = j.at("suite_hash").get<std::string>();
  m.suite_fingerprint = j.at("suite_fingerprint").get<std::string>();
  m.class_incremental = j.at("protocol").get<std::string>() == "class_incremental";
  m.report.transfer_includes_row0 = j.at("transfer_includes_row0").get<bool>();
  for (const auto& t : j.at("tasks")) {
    m.report.transfer.push_back(number_from(t.at("transfer")));
    m.report.avg.push_back(number_from(t.at("avg")));
    m.report.last.push_back(number_from(t.at("last")));
  }
  const auto& mean_j = j.at("mean");
  m.report.mean_transfer = number_from(mean_j.at("transfer"));
  m.report.mean_avg = number_from(mean_j.at("avg"));
  m.report.mean_last = number_from(mean_j.at("last"));
  const auto& base = j.at("base");
  m.report.base_initial = number_from(base.at("initial"));
  m.report.base_last = number_from(base.at("last"));
  m.report.base_avg = number_from(base.at("avg"));
  for (const auto& row : j.at("matrix")) m.matrix.push_back(numbers_from(row));
  const auto& s = j.at("storage");
  m.storage.real_classes = s.at("real_classes").get<std::size_t>();
  m.storage.real_per_class = s.at("real_per_class").get<std::size_t>();
  m.storage.pixels = s.at("pixels").get<std::size_t>();
  m.storage.bytes_per_value = s.at("bytes_per_value").get<std::size_t>();
  m.storage.adapter_reals = s.at("adapter_reals").get<std::size_t>();
  return m;
}

MetricsRecord read_metrics(const fs::path& run_dir) { return metrics_from_json(read_json(run_dir / "metrics.json")); }

continual::Pretrained pretrain_for(const ExperimentConfig& config, const continual::TaskSequence& seq,
                                   std::uint64_t seed) {
  std::optional<fs::path> cache;
  if (!config.cache_dir.empty()) cache = fs::path(config.cache_dir);
  return continual::pretrain_models(seq, config.pretrain, seed, cache);
}

fs::path execute_run(const ExperimentConfig& config, std::uint64_t seed, const fs::path& out_root, std::ostream* log,
                     const continual::Pretrained* start) {
  const auto name = run_dir_name(config, seed);
  const auto final_dir = out_root / name;
  if (fs::exists(final_dir))
    throw RunExistsError(final_dir.string() + ": run directory exists; refusing to overwrite a completed run");
  fs::create_directories(out_root);
  const auto tmp = out_root / (".partial-" + name);
  fs::remove_all(tmp);
  fs::create_directories(tmp);

  const auto t0 = std::chrono::steady_clock::now();
  const auto seq = taskgen::make_suite(config.suite_for(seed));
  std::optional<continual::Pretrained> owned;
  if (start == nullptr) {
    owned.emplace(pretrain_for(config, seq, seed));
    start = &*owned;
  }

  write_text(tmp / "config.cfg", "# resolved configuration\n" + config.to_text());
  vlm::save_encoder(tmp / "checkpoints" / checkpoint_name(0), start->vlm, seq.base.classes);

  const bool trains = config.method != continual::Method::zero_shot;
  auto observer = [&](std::size_t task, const continual::RunResult& state) {
    if (trains) vlm::save_encoder(tmp / "checkpoints" / checkpoint_name(task), state.model, state.pool);
    const auto& rec = state.tasks.back();
    if (!rec.replay.empty()) rec.replay.save(tmp / "replay" / ("task_" + std::to_string(task)));
    if (!rec.lora_data.empty())
      save_batch_pgm(tmp / "lora_data" / ("task_" + std::to_string(task)), rec.lora_data,
                     seq.tasks[task - 1].classes);
    if (log) {
      *log << "seed " << seed << " " << continual::to_string(config.method) << " task " << task << "/"
           << seq.task_count() << ":";
      for (std::size_t j = 0; j <= seq.task_count(); ++j)
        *log << ' ' << std::fixed << std::setprecision(3) << state.matrix.at(task, j);
      *log << std::defaultfloat << '\n' << std::flush;
    }
  };
  const auto result = continual::run_method(seq, *start, config.method, config.loop_config(), seed, observer);

  if (uses_generator(config.method)) gen::save_generator(tmp / "generator", start->generator);
  if (result.registry.size() > 0) result.registry.save(tmp / "adapters");
  {
    std::ofstream out(tmp / "matrix.csv");
    result.matrix.write_csv(out);
  }
  {
    std::ofstream out(tmp / "losses.csv");
    result.losses.write_csv(out);
  }
  const auto metrics = make_metrics_record(config, seed, seq, result);
  write_text(tmp / "metrics.json", to_json(metrics).dump(2) + "\n");

  std::vector<std::string> files;
  for (const auto& e : fs::recursive_directory_iterator(tmp))
    if (e.is_regular_file()) files.push_back(fs::relative(e.path(), tmp).generic_string());
  std::sort(files.begin(), files.end());
  const double elapsed = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  json checkpoints = json::array();
  for (std::size_t t = 0; t <= seq.task_count(); ++t)
    if (fs::exists(tmp / "checkpoints" / checkpoint_name(t))) checkpoints.push_back("checkpoints/" + checkpoint_name(t));
  json adapters = json::array();
  for (const auto& e : result.registry.entries())
    adapters.push_back({{"name", e.name}, {"classes", e.classes}, {"reals", e.adapter.storage_reals()}});
  const json manifest{
      {"schema_version", kMetricsSchemaVersion},
      {"tool", "loraloop"},
      {"config_hash", hex64(config.hash())},
      {"suite_hash", hex64(config.suite_hash())},
      {"suite_fingerprint", hex64(seq.fingerprint)},
      {"seed", seed},
      {"method", continual::to_string(config.method)},
      {"pretrain_cache", config.cache_dir.empty() ? json(nullptr) : json(config.cache_dir)},
      {"elapsed_seconds", elapsed},
      {"checkpoints", checkpoints},
      {"adapters", adapters},
      {"files", files},
  };
  write_text(tmp / "run_manifest.json", manifest.dump(2) + "\n");

  std::error_code ec;
  fs::rename(tmp, final_dir, ec);
  if (ec) {
    fs::remove_all(tmp);
    if (fs::exists(final_dir))
      throw RunExistsError(final_dir.string() + ": run directory appeared while running; refusing to overwrite");
    throw std::runtime_error("cannot finalise " + final_dir.string() + ": " + ec.message());
  }
  return final_dir;
}

// ---- report --------------------------------------------------------------

std::vector<ReportRow> build_report(const std::vector<std::pair<std::string, MetricsRecord>>& runs,
                                    std::size_t reference) {
  if (runs.empty()) throw std::invalid_argument("report needs at least one run");
  if (reference >= runs.size()) throw std::invalid_argument("reference run index out of range");
  const auto& ref = runs[reference].second;
  std::vector<ReportRow> rows;
  for (const auto& [label, m] : runs) {
    if (m.suite_hash != ref.suite_hash)
      throw std::invalid_argument("run " + label + " uses a different task suite (suite hash " + m.suite_hash +
                                  ", reference " + ref.suite_hash + ")");
    if (m.class_incremental != ref.class_incremental)
      throw std::invalid_argument("run " + label + " uses a different evaluation protocol");
    ReportRow r{label, m};
    r.d_transfer = m.report.mean_transfer - ref.report.mean_transfer;
    r.d_avg = m.report.mean_avg - ref.report.mean_avg;
    r.d_last = m.report.mean_last - ref.report.mean_last;
    rows.push_back(std::move(r));
  }
  return rows;
}

void write_report_markdown(std::ostream& out, const std::vector<ReportRow>& rows, std::size_t reference) {
  auto pts = [](double v) {
    std::ostringstream s;
    s << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
  };
  auto delta = [](double v) {
    std::ostringstream s;
    s << std::showpos << std::fixed << std::setprecision(2) << 100.0 * v;
    return s.str();
  };
  out << "| run | method | seed | Transfer | Δ | Avg | Δ | Last | Δ | storage (bytes) |\n"
      << "|---|---|---|---|---|---|---|---|---|---|\n";
  for (std::size_t i = 0; i < rows.size(); ++i) {
    const auto& r = rows[i];
    const auto& rep = r.metrics.report;
    out << "| " << r.label << (i == reference ? " (ref)" : "") << " | " << r.metrics.method << " | "
        << r.metrics.seed << " | " << pts(rep.mean_transfer) << " | " << delta(r.d_transfer) << " | "
        << pts(rep.mean_avg) << " | " << delta(r.d_avg) << " | " << pts(rep.mean_last) << " | " << delta(r.d_last)
        << " | " << r.metrics.storage.total_bytes() << " |\n";
  }
}

void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows) {
  out << "run,method,seed,transfer,d_transfer,avg,d_avg,last,d_last,real_replay_bytes,adapter_bytes\n"
      << std::setprecision(17);
  for (const auto& r : rows) {
    const auto& rep = r.metrics.report;
    out << r.label << ',' << r.metrics.method << ',' << r.metrics.seed << ',' << rep.mean_transfer << ','
        << r.d_transfer << ',' << rep.mean_avg << ',' << r.d_avg << ',' << rep.mean_last << ',' << r.d_last << ','
        << r.metrics.storage.real_bytes() << ',' << r.metrics.storage.adapter_bytes() << '\n';
  }
}

// ---- ablation ------------------------------------------------------------

std::pair<KeyValues, std::vector<GridAxis>> split_grid(const KeyValues& kv) {
  KeyValues base;
  std::vector<GridAxis> axes;
  for (const auto& [key, entry] : kv.entries()) {
    if (key.rfind("grid.", 0) != 0) {
      base.set(key, entry);
      continue;
    }
    GridAxis axis{key.substr(5), {}};
    std::istringstream in(entry.value);
    std::string v;
    while (std::getline(in, v, '|')) {
      const auto b = v.find_first_not_of(" \t");
      const auto e = v.find_last_not_of(" \t");
      if (b == std::string::npos) throw ConfigError(entry.where() + ": empty grid value for " + axis.key);
      axis.values.push_back(v.substr(b, e - b + 1));
    }
    if (axis.key == "experiment.seeds") throw ConfigError(entry.where() + ": seeds cannot be a grid axis");
    ExperimentConfig probe;
    for (const auto& value : axis.values) apply_key(probe, axis.key, ConfigEntry{value, entry.source, entry.line});
    axes.push_back(std::move(axis));
  }
  return {base, axes};
}

std::size_t worker_limit() {
  if (const char* env = std::getenv("LORALOOP_WORKERS")) {
    try {
      const long v = std::stol(env);
      if (v >= 1) return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
    }
  }
  return std::max<std::size_t>(1, std::thread::hardware_concurrency());
}

std::vector<AblationCell> run_ablation(const KeyValues& base, const std::vector<GridAxis>& axes, const fs::path& out_dir,
                                       std::size_t workers, std::ostream* log) {
  // Cartesian product, first axis slowest.
  std::vector<AblationCell> cells(1);
  for (const auto& axis : axes) {
    std::vector<AblationCell> next;
    for (const auto& c : cells)
      for (const auto& v : axis.values) {
        auto n = c;
        n.values.push_back(v);
        next.push_back(std::move(n));
      }
    cells = std::move(next);
  }

  std::vector<std::optional<ExperimentConfig>> configs(cells.size());
  for (std::size_t c = 0; c < cells.size(); ++c) {
    KeyValues kv = base;
    for (std::size_t a = 0; a < axes.size(); ++a) kv.set(axes[a].key, ConfigEntry{cells[c].values[a], "grid", a + 1});
    try {
      configs[c] = build_config(kv);
    } catch (const std::exception& e) {
      cells[c].errors.push_back(e.what());
    }
  }
  const auto seeds = build_config(base).seeds;
  std::mutex mu;

  for (auto seed : seeds) {
    // Pretrained models shared by every cell with the same suite and pretraining knobs.
    std::map<std::string, std::shared_ptr<const continual::Pretrained>> pretrained;
    std::vector<std::shared_ptr<const continual::Pretrained>> start(cells.size());
    for (std::size_t c = 0; c < cells.size(); ++c) {
      if (!configs[c]) continue;
      const auto key = configs[c]->pretrain.describe() + hex64(configs[c]->suite_hash());
      auto it = pretrained.find(key);
      if (it == pretrained.end()) {
        try {
          const auto seq = taskgen::make_suite(configs[c]->suite_for(seed));
          it = pretrained.emplace(key, std::make_shared<const continual::Pretrained>(pretrain_for(*configs[c], seq, seed)))
                   .first;
        } catch (const std::exception& e) {
          cells[c].errors.push_back("seed " + std::to_string(seed) + ": pretraining: " + e.what());
          continue;
        }
      }
      start[c] = it->second;
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&] {
      for (std::size_t c = next++; c < cells.size(); c = next++) {
        if (!start[c]) continue;
        std::ostringstream cell_name;
        cell_name << "cell_" << std::setw(3) << std::setfill('0') << c;
        const auto cell_dir = out_dir / cell_name.str();
        try {
          fs::path run_dir;
          try {
            run_dir = execute_run(*configs[c], seed, cell_dir, nullptr, start[c].get());
          } catch (const RunExistsError&) {
            run_dir = cell_dir / run_dir_name(*configs[c], seed);  // completed earlier; reuse
          }
          auto m = read_metrics(run_dir);
          std::lock_guard lock(mu);
          cells[c].runs.push_back(std::move(m));
          if (log) *log << cell_name.str() << " seed " << seed << ": Last " << cells[c].runs.back().report.mean_last << '\n';
        } catch (const std::exception& e) {
          std::lock_guard lock(mu);
          cells[c].errors.push_back("seed " + std::to_string(seed) + ": " + e.what());
          if (log) *log << cell_name.str() << " seed " << seed << ": failed: " << e.what() << '\n';
        }
      }
    };
    const std::size_t n_threads = std::max<std::size_t>(1, std::min(workers, cells.size()));
    std::vector<std::thread> pool;
    for (std::size_t t = 1; t < n_threads; ++t) pool.emplace_back(worker);
    worker();
    for (auto& t : pool) t.join();
  }
  for (auto& c : cells)
    std::sort(c.runs.begin(), c.runs.end(), [](const MetricsRecord& a, const MetricsRecord& b) { return a.seed < b.seed; });
  return cells;
}

void write_ablation_csv(std::ostream& out, const std::vector<GridAxis>& axes, const std::vector<AblationCell>& cells) {
  for (const auto& a : axes) out << a.key << ',';
  out << "seeds,transfer_mean,transfer_std,avg_mean,avg_std,last_mean,last_std,status\n" << std::setprecision(17);
  for (const auto& c : cells) {
    for (const auto& v : c.values) out << v << ',';
    std::vector<double> t, a, l;
    for (const auto& r : c.runs) {
      t.push_back(r.report.mean_transfer);
      a.push_back(r.report.mean_avg);
      l.push_back(r.report.mean_last);
    }
    out << c.runs.size() << ',';
    if (c.runs.empty()) {
      out << ",,,,,,";
    } else {
      out << mean(t) << ',' << stdev(t) << ',' << mean(a) << ',' << stdev(a) << ',' << mean(l) << ',' << stdev(l) << ',';
    }
    if (c.errors.empty()) {
      out << "ok";
    } else {
      std::string msg = "error: " + c.errors.front();
      std::replace(msg.begin(), msg.end(), ',', ';');
      std::replace(msg.begin(), msg.end(), '\n', ' ');
      out << '"' << msg << '"';
    }
    out << '\n';
  }
}

// ---- checkpoints ---------------------------------------------------------

LoadedRun load_run(const fs::path& run_dir) {
  LoadedRun r;
  r.config = load_config(run_dir / "config.cfg");
  r.seed = read_json(run_dir / "run_manifest.json").at("seed").get<std::uint64_t>();
  r.seq = taskgen::make_suite(r.config.suite_for(r.seed));
  return r;
}

std::vector<double> rescore_checkpoint(const fs::path& run_dir, const LoadedRun& run, std::size_t task) {
  const auto dir = run_dir / "checkpoints" / checkpoint_name(task);
  if (!fs::exists(dir)) throw std::runtime_error("no checkpoint " + dir.string());
  vlm::DualEncoder model(run.config.pretrain.vlm, run.seed);
  vlm::load_encoder(dir, model);
  std::vector<double> row;
  for (std::size_t j = 0; j <= run.seq.task_count(); ++j)
    row.push_back(continual::evaluate_column(model, run.seq, j, run.config.loop.class_incremental));
  return row;
}

std::vector<PreviewSample> generate_preview(const fs::path& run_dir, const std::string& class_name, std::size_t count,
                                            const fs::path& out_dir) {
  const auto run = load_run(run_dir);
  if (!fs::exists(run_dir / "generator")) throw std::runtime_error(run_dir.string() + ": no generator checkpoint");
  gen::GeneratorModel generator(run.config.pretrain.generator, run.seed);
  gen::load_generator(run_dir / "generator", generator);
  lora::AdapterRegistry registry;
  if (fs::exists(run_dir / "adapters")) registry = lora::AdapterRegistry::load(run_dir / "adapters", generator);

  std::size_t last = 0;
  while (fs::exists(run_dir / "checkpoints" / checkpoint_name(last + 1))) ++last;
  vlm::DualEncoder model(run.config.pretrain.vlm, run.seed);
  const auto pool = vlm::load_encoder(run_dir / "checkpoints" / checkpoint_name(last), model);
  if (std::find(pool.begin(), pool.end(), class_name) == pool.end())
    throw std::invalid_argument("class '" + class_name + "' is not in the run's class pool");

  const auto* entry = registry.find(class_name);
  fs::create_directories(out_dir);
  const auto prompt = model.prompt_tokens(class_name);
  std::vector<PreviewSample> samples;
  std::vector<double> base_conf, adapted_conf;
  auto emit = [&](const gen::GeneratorView& view, const std::string& tag, std::size_t k, std::vector<double>& sink) {
    const std::uint64_t seed = num::stream_id("preview", {k});
    const auto c = gen::sample_cfg(view, class_name, run.config.loop.guidance, seed);
    std::ostringstream name;
    name << tag << '_' << std::setw(3) << std::setfill('0') << k << ".pgm";
    io::write_pgm(out_dir / name.str(), c.sample, 16);
    const double conf = vlm::confidence(model, c.sample, prompt);
    sink.push_back(conf);
    samples.push_back({name.str(), view.label, seed, conf});
  };
  const auto base = gen::base_view(generator);
  for (std::size_t k = 0; k < count; ++k) emit(base, "base", k, base_conf);
  if (entry != nullptr) {
    const auto adapted = lora::apply_adapter(generator, entry->adapter, entry->name);
    for (std::size_t k = 0; k < count; ++k) emit(adapted, "adapted", k, adapted_conf);
  }

  json list = json::array();
  for (const auto& s : samples)
    list.push_back({{"file", s.file}, {"generator", s.generator}, {"seed", s.seed}, {"confidence", s.confidence}});
  const json manifest{
      {"class", class_name},
      {"count", count},
      {"adapter", entry ? json(entry->name) : json(nullptr)},
      {"scorer", checkpoint_name(last)},
      {"mean_confidence",
       {{"base", base_conf.empty() ? json(nullptr) : json(mean(base_conf))},
        {"adapted", adapted_conf.empty() ? json(nullptr) : json(mean(adapted_conf))}}},
      {"samples", list},
  };
  write_text(out_dir / "manifest.json", manifest.dump(2) + "\n");
  return samples;
}

}  // namespace loraloop::cli
