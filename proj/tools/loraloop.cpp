// loraloop command-line front end.
//
// Exit codes: 0 success, 1 runtime failure, 2 invalid configuration or usage.

#include <cmath>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>

#include "CLI11.hpp"
#include "loraloop/cli/commands.hpp"
#include "loraloop/taskgen/suite.hpp"

namespace fs = std::filesystem;
using namespace loraloop;
using namespace loraloop::cli;

namespace {

constexpr int kOk = 0;
constexpr int kFailed = 1;
constexpr int kBadInput = 2;

int cmd_run(const std::string& config_path, const std::vector<std::string>& sets, const std::string& out,
            std::optional<std::uint64_t> seed) {
  const auto config = load_config(config_path, sets);
  const auto seeds = seed ? std::vector<std::uint64_t>{*seed} : config.seeds;
  int status = kOk;
  for (auto s : seeds) {
    try {
      std::cout << execute_run(config, s, out, &std::cerr).string() << '\n';
    } catch (const RunExistsError& e) {
      std::cerr << "error: " << e.what() << '\n';
      status = kFailed;
    }
  }
  return status;
}

int cmd_ablate(const std::string& config_path, const std::vector<std::string>& sets, const std::string& out,
               std::size_t workers) {
  auto kv = KeyValues::load(config_path);
  for (std::size_t i = 0; i < sets.size(); ++i) kv.set_override(sets[i], i + 1);
  const auto [base, axes] = split_grid(kv);
  build_config(base);
  if (axes.empty()) throw ConfigError(config_path + ": no grid.<key> axes");
  const std::size_t cap = std::min(workers == 0 ? worker_limit() : workers, worker_limit());
  const auto cells = run_ablation(base, axes, out, cap, &std::cerr);
  fs::create_directories(out);
  std::ofstream csv(fs::path(out) / "ablation.csv");
  write_ablation_csv(csv, axes, cells);
  write_ablation_csv(std::cout, axes, cells);
  std::size_t failed = 0;
  for (const auto& c : cells) failed += c.errors.empty() ? 0 : 1;
  if (failed) std::cerr << failed << " of " << cells.size() << " cells reported errors\n";
  return failed == cells.size() ? kFailed : kOk;
}

int cmd_report(const std::vector<std::string>& dirs, const std::string& reference, const std::string& csv_path) {
  std::vector<std::pair<std::string, MetricsRecord>> runs;
  std::size_t ref = 0;
  for (std::size_t i = 0; i < dirs.size(); ++i) {
    runs.emplace_back(fs::path(dirs[i]).lexically_normal().filename().string(), read_metrics(dirs[i]));
    if (!reference.empty() && fs::equivalent(dirs[i], reference)) ref = i;
  }
  if (!reference.empty() && !fs::equivalent(dirs[ref], reference)) {
    runs.emplace_back(fs::path(reference).lexically_normal().filename().string(), read_metrics(reference));
    ref = runs.size() - 1;
  }
  const auto rows = build_report(runs, ref);
  write_report_markdown(std::cout, rows, ref);
  if (!csv_path.empty()) {
    std::ofstream out(csv_path);
    if (!out) throw std::runtime_error("cannot write " + csv_path);
    write_report_csv(out, rows);
  }
  return kOk;
}

int cmd_eval(const std::string& run_dir, std::size_t task) {
  const auto run = load_run(run_dir);
  if (task > run.seq.task_count()) throw std::invalid_argument("task " + std::to_string(task) + " out of range");
  const auto row = rescore_checkpoint(run_dir, run, task);
  std::ifstream in(fs::path(run_dir) / "matrix.csv");
  const auto stored = continual::AccuracyMatrix::read_csv(in);
  double worst = 0.0;
  std::cout << "column,rescored,stored\n" << std::setprecision(17);
  for (std::size_t j = 0; j < row.size(); ++j) {
    const double s = stored.at(task, j);
    worst = std::max(worst, std::abs(row[j] - s));
    std::cout << j << ',' << row[j] << ',' << s << '\n';
  }
  if (worst > 1e-12) {
    std::cerr << "rescored accuracies differ from matrix.csv by up to " << worst << '\n';
    return kFailed;
  }
  return kOk;
}

int cmd_preview(const std::string& run_dir, const std::string& class_name, std::size_t count, const std::string& out) {
  const auto samples = generate_preview(run_dir, class_name, count, out);
  for (const auto& s : samples) std::cout << s.file << ' ' << s.generator << ' ' << s.confidence << '\n';
  return kOk;
}

int cmd_taskgen_dump(const std::string& config_path, const std::vector<std::string>& sets, std::uint64_t seed,
                     const std::string& out) {
  const auto config = load_config(config_path, sets);
  const auto seq = taskgen::make_suite(config.suite_for(seed));
  taskgen::dump_suite(seq, out);
  std::cout << out << ": " << seq.task_count() << " tasks, suite " << hex64(config.suite_hash()) << ", fingerprint "
            << hex64(seq.fingerprint) << '\n';
  return kOk;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Continual VLM finetuning with LoRA-adapted generative replay"};
  app.require_subcommand(1);

  std::string config_path, out, reference, csv_path, run_dir, class_name;
  std::vector<std::string> sets, dirs;
  std::optional<std::uint64_t> seed;
  std::uint64_t dump_seed = 1;
  std::size_t count = 8, task = 0, workers = 0;

  auto* run = app.add_subcommand("run", "Run one experiment configuration for each seed");
  run->add_option("config", config_path, "Configuration file")->required();
  run->add_option("--set", sets, "Override, key=value (repeatable)");
  run->add_option("--out", out, "Output root")->default_val("runs");
  run->add_option("--seed", seed, "Run only this seed");

  auto* ablate = app.add_subcommand("ablate", "Run a grid of configurations (grid.<key> = a | b)");
  ablate->add_option("config", config_path, "Grid configuration file")->required();
  ablate->add_option("--set", sets, "Override, key=value (repeatable)");
  ablate->add_option("--out", out, "Output directory")->required();
  ablate->add_option("--workers", workers, "Concurrent cells (0 = LORALOOP_WORKERS or all cores)");

  auto* report = app.add_subcommand("report", "Tabulate runs with deltas against a reference run");
  report->add_option("runs", dirs, "Run directories")->required()->check(CLI::ExistingDirectory);
  report->add_option("--reference", reference, "Reference run (default: the first)")->check(CLI::ExistingDirectory);
  report->add_option("--csv", csv_path, "Also write a CSV table");

  auto* preview = app.add_subcommand("gen-preview", "Sample a class from the base and adapted generators");
  preview->add_option("run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  preview->add_option("--class", class_name, "Class name")->required();
  preview->add_option("--count", count, "Samples per generator")->default_val(8);
  preview->add_option("--out", out, "Output directory")->required();

  auto* eval = app.add_subcommand("eval", "Re-score a saved checkpoint and compare with matrix.csv");
  eval->add_option("run", run_dir, "Run directory")->required()->check(CLI::ExistingDirectory);
  eval->add_option("--task", task, "Checkpoint (0 = pretrained)")->required();

  auto* show = app.add_subcommand("config", "Print a configuration with every key resolved");
  show->add_option("config", config_path, "Configuration file")->required();
  show->add_option("--set", sets, "Override, key=value (repeatable)");

  auto* taskgen_cmd = app.add_subcommand("taskgen", "Task suite utilities");
  taskgen_cmd->require_subcommand(1);
  auto* dump = taskgen_cmd->add_subcommand("dump", "Write the suite's classes, domains and example images");
  dump->add_option("--config", config_path, "Configuration file")->required();
  dump->add_option("--set", sets, "Override, key=value (repeatable)");
  dump->add_option("--seed", dump_seed, "Suite seed")->default_val(1);
  dump->add_option("--out", out, "Output directory")->required();

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return kBadInput;
  }

  try {
    if (run->parsed()) return cmd_run(config_path, sets, out, seed);
    if (ablate->parsed()) return cmd_ablate(config_path, sets, out, workers);
    if (report->parsed()) return cmd_report(dirs, reference, csv_path);
    if (preview->parsed()) return cmd_preview(run_dir, class_name, count, out);
    if (eval->parsed()) return cmd_eval(run_dir, task);
    if (show->parsed()) {
      const auto config = load_config(config_path, sets);
      std::cout << config.to_text() << "# hash " << hex64(config.hash()) << '\n';
      return kOk;
    }
    if (dump->parsed()) return cmd_taskgen_dump(config_path, sets, dump_seed, out);
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << '\n';
    return kBadInput;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return kFailed;
  }
  return kBadInput;
}
