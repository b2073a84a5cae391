#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <ostream>
#include <stdexcept>
#include <string>
#include <vector>

#include "json.hpp"
#include "loraloop/cli/config.hpp"
#include "loraloop/continual/loop.hpp"

namespace loraloop::cli {

inline constexpr int kMetricsSchemaVersion = 1;

/// The run directory already holds a completed run.
class RunExistsError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// "<config hash>-s<seed>".
std::string run_dir_name(const ExperimentConfig& config, std::uint64_t seed);

/// Storage inputs kept next to the metrics so reports can recompute bytes.
struct StorageRecord {
  std::size_t real_classes = 0;
  std::size_t real_per_class = 0;
  std::size_t pixels = 0;
  std::size_t bytes_per_value = sizeof(double);
  std::size_t adapter_reals = 0;

  [[nodiscard]] std::size_t real_bytes() const;
  [[nodiscard]] std::size_t adapter_bytes() const { return adapter_reals * bytes_per_value; }
  [[nodiscard]] std::size_t total_bytes() const { return real_bytes() + adapter_bytes(); }
};

/// Contents of metrics.json.
struct MetricsRecord {
  int schema_version = kMetricsSchemaVersion;
  std::string method;
  std::uint64_t seed = 0;
  std::string config_hash;
  std::string suite_hash;
  std::string suite_fingerprint;
  bool class_incremental = false;
  continual::MetricsReport report;
  std::vector<std::vector<double>> matrix;
  StorageRecord storage;
};

MetricsRecord make_metrics_record(const ExperimentConfig& config, std::uint64_t seed,
                                  const continual::TaskSequence& seq, const continual::RunResult& result);
nlohmann::json to_json(const MetricsRecord& m);
/// Throws on an unknown schema version or missing fields.
MetricsRecord metrics_from_json(const nlohmann::json& j);
MetricsRecord read_metrics(const std::filesystem::path& run_dir);

/// Pretrains (or loads from the configured cache) the starting models.
continual::Pretrained pretrain_for(const ExperimentConfig& config, const continual::TaskSequence& seq,
                                   std::uint64_t seed);

/// Runs one seed into `<out_root>/<run_dir_name>` (written to a temporary
/// directory, then renamed). Refuses with RunExistsError if the directory
/// exists. `start` skips pretraining when given. Returns the run directory.
std::filesystem::path execute_run(const ExperimentConfig& config, std::uint64_t seed,
                                  const std::filesystem::path& out_root, std::ostream* log = nullptr,
                                  const continual::Pretrained* start = nullptr);

// ---- report --------------------------------------------------------------

struct ReportRow {
  std::string label;
  MetricsRecord metrics;
  double d_transfer = 0.0, d_avg = 0.0, d_last = 0.0;
};

/// Signed deltas against `reference`; all runs must share the suite hash.
std::vector<ReportRow> build_report(const std::vector<std::pair<std::string, MetricsRecord>>& runs,
                                    std::size_t reference);
void write_report_markdown(std::ostream& out, const std::vector<ReportRow>& rows, std::size_t reference);
void write_report_csv(std::ostream& out, const std::vector<ReportRow>& rows);

// ---- ablation ------------------------------------------------------------

struct GridAxis {
  std::string key;
  std::vector<std::string> values;
};

/// Splits `grid.<key> = v1 | v2 | ...` lines from the base configuration.
/// Axes come back sorted by key.
std::pair<KeyValues, std::vector<GridAxis>> split_grid(const KeyValues& kv);

struct AblationCell {
  std::vector<std::string> values;  // one per axis
  std::vector<MetricsRecord> runs;  // one per seed that succeeded
  std::vector<std::string> errors;
};

/// Runs every grid cell over the configured seeds. Cells that fail are
/// recorded and the grid continues. `workers` caps concurrent cells.
std::vector<AblationCell> run_ablation(const KeyValues& base, const std::vector<GridAxis>& axes,
                                       const std::filesystem::path& out_dir, std::size_t workers,
                                       std::ostream* log = nullptr);
void write_ablation_csv(std::ostream& out, const std::vector<GridAxis>& axes, const std::vector<AblationCell>& cells);

/// Worker cap: LORALOOP_WORKERS if set (≥ 1), else the hardware concurrency.
std::size_t worker_limit();

// ---- checkpoints ---------------------------------------------------------

struct LoadedRun {
  ExperimentConfig config;
  std::uint64_t seed = 0;
  continual::TaskSequence seq;
};

/// Reads config.cfg and the manifest of a run directory and rebuilds its suite.
LoadedRun load_run(const std::filesystem::path& run_dir);

/// Re-scores checkpoint `task` of a run on every column.
std::vector<double> rescore_checkpoint(const std::filesystem::path& run_dir, const LoadedRun& run, std::size_t task);

struct PreviewSample {
  std::string file;
  std::string generator;
  std::uint64_t seed = 0;
  double confidence = 0.0;
};

/// Writes `count` base and `count` adapted samples of `class_name` with
/// confidences under the final model. Returns the manifest entries.
std::vector<PreviewSample> generate_preview(const std::filesystem::path& run_dir, const std::string& class_name,
                                            std::size_t count, const std::filesystem::path& out_dir);

}  // namespace loraloop::cli
