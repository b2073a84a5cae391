#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <stdexcept>
#include <string>
#include <vector>

#include "loraloop/continual/loop.hpp"
#include "loraloop/taskgen/suite.hpp"

namespace loraloop::cli {

/// Invalid configuration. The message starts with "<source>:<line>:" when the
/// problem can be pinned to a line.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

struct ConfigEntry {
  std::string value;
  std::string source;
  std::size_t line = 0;

  [[nodiscard]] std::string where() const { return source + ":" + std::to_string(line); }
};

/// Flat `key = value` text with dotted keys and `#` comments. A line
/// `include = <path>` pulls in another file (relative to the including one)
/// whose keys the following lines may override.
class KeyValues {
 public:
  static KeyValues parse(std::istream& in, const std::string& source,
                         const std::filesystem::path& base_dir = std::filesystem::path("."), int depth = 0);
  static KeyValues load(const std::filesystem::path& path, int depth = 0);

  /// Parses "key=value" (command-line override).
  void set_override(const std::string& assignment, std::size_t index);
  void set(const std::string& key, ConfigEntry entry) { entries_[key] = std::move(entry); }
  [[nodiscard]] const std::map<std::string, ConfigEntry>& entries() const noexcept { return entries_; }

 private:
  std::map<std::string, ConfigEntry> entries_;
};

struct ExperimentConfig {
  continual::Method method = continual::Method::lora_loop;
  std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  /// Suite parameters; the suite seed is the run seed.
  taskgen::SuiteConfig suite{};
  continual::PretrainSettings pretrain{};
  continual::LoopConfig loop{};
  /// LoRA α; unset means α = r.
  std::optional<double> lora_alpha;
  /// Pretrained-model cache shared across runs (empty = none).
  std::string cache_dir;

  /// Every key with its resolved value, one `key = value` per line, sorted.
  [[nodiscard]] std::string to_text() const;
  /// Hash of every key except `experiment.seeds`.
  [[nodiscard]] std::uint64_t hash() const;
  /// Hash of the suite keys only; runs are comparable when it matches.
  [[nodiscard]] std::uint64_t suite_hash() const;
  [[nodiscard]] taskgen::SuiteConfig suite_for(std::uint64_t seed) const;
  /// `loop` with α resolved.
  [[nodiscard]] continual::LoopConfig loop_config() const;
};

/// Keys that every configuration must set.
const std::vector<std::string>& required_keys();
/// Every accepted key, sorted.
std::vector<std::string> known_keys();

/// Applies `kv` on top of the built-in defaults. Unknown keys, malformed
/// values and missing required keys throw ConfigError.
ExperimentConfig build_config(const KeyValues& kv);
/// Applies one key to an existing configuration.
void apply_key(ExperimentConfig& config, const std::string& key, const ConfigEntry& entry);

/// load + overrides + build_config.
ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides = {});

std::string hex64(std::uint64_t v);

}  // namespace loraloop::cli
