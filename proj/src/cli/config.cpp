#include "loraloop/cli/config.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <fstream>
#include <functional>
#include <iomanip>
#include <sstream>

#include "loraloop/numcore/rng.hpp"

namespace loraloop::cli {

namespace {

std::string trim(std::string_view s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string_view::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return std::string(s.substr(b, e - b + 1));
}

bool valid_key(const std::string& key) {
  if (key.empty()) return false;
  return std::all_of(key.begin(), key.end(), [](char c) {
    return (c >= 'a' && c <= 'z') || (c >= '0' && c <= '9') || c == '_' || c == '.';
  });
}

std::vector<std::string> split(const std::string& s, char sep) {
  std::vector<std::string> out;
  std::string cur;
  std::istringstream in(s);
  while (std::getline(in, cur, sep)) out.push_back(trim(cur));
  return out;
}

// ---- value parsing -------------------------------------------------------

std::size_t parse_value(const std::string& v, std::size_t*) {
  std::size_t out = 0;
  const auto [end, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || end != v.data() + v.size()) throw std::invalid_argument("expected a nonnegative integer");
  return out;
}

double parse_value(const std::string& v, double*) {
  std::size_t used = 0;
  double out = 0.0;
  try {
    out = std::stod(v, &used);
  } catch (const std::exception&) {
    throw std::invalid_argument("expected a number");
  }
  if (used != v.size() || !std::isfinite(out)) throw std::invalid_argument("expected a finite number");
  return out;
}

bool parse_value(const std::string& v, bool*) {
  if (v == "true" || v == "on" || v == "yes" || v == "1") return true;
  if (v == "false" || v == "off" || v == "no" || v == "0") return false;
  throw std::invalid_argument("expected true or false");
}

std::string parse_value(const std::string& v, std::string*) { return v; }

continual::Method parse_value(const std::string& v, continual::Method*) { return continual::parse_method(v); }
selection::Policy parse_value(const std::string& v, selection::Policy*) { return selection::parse_policy(v); }
taskgen::GapProfile parse_value(const std::string& v, taskgen::GapProfile*) { return taskgen::parse_gap_profile(v); }

std::vector<std::string> parse_value(const std::string& v, std::vector<std::string>*) {
  auto parts = split(v, ',');
  if (parts.empty()) throw std::invalid_argument("expected a comma-separated list");
  for (const auto& p : parts)
    if (p.empty()) throw std::invalid_argument("empty list element");
  return parts;
}

/// "1,2,5" or "1..5".
std::vector<std::uint64_t> parse_value(const std::string& v, std::vector<std::uint64_t>*) {
  std::vector<std::uint64_t> out;
  const auto dots = v.find("..");
  if (dots != std::string::npos) {
    const auto lo = parse_value(trim(v.substr(0, dots)), static_cast<std::size_t*>(nullptr));
    const auto hi = parse_value(trim(v.substr(dots + 2)), static_cast<std::size_t*>(nullptr));
    if (hi < lo) throw std::invalid_argument("empty seed range");
    for (auto s = lo; s <= hi; ++s) out.push_back(s);
    return out;
  }
  for (const auto& p : parse_value(v, static_cast<std::vector<std::string>*>(nullptr)))
    out.push_back(parse_value(p, static_cast<std::size_t*>(nullptr)));
  return out;
}

// ---- value formatting ----------------------------------------------------

std::string format_value(std::size_t v) { return std::to_string(v); }
std::string format_value(double v) {
  char buf[64];
  const auto [end, ec] = std::to_chars(buf, buf + sizeof buf, v);
  return std::string(buf, end);
}
std::string format_value(bool v) { return v ? "true" : "false"; }
std::string format_value(const std::string& v) { return v; }
std::string format_value(continual::Method v) { return continual::to_string(v); }
std::string format_value(selection::Policy v) { return selection::to_string(v); }
std::string format_value(taskgen::GapProfile v) { return taskgen::to_string(v); }
std::string format_value(const std::vector<std::string>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + v[i];
  return out;
}
std::string format_value(const std::vector<std::uint64_t>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

// ---- key table -----------------------------------------------------------

struct Field {
  std::string key;
  std::function<void(ExperimentConfig&, const std::string&)> set;
  std::function<std::string(const ExperimentConfig&)> get;
};

template <class Acc>
Field field(std::string key, Acc acc) {
  using T = std::remove_cvref_t<decltype(acc(std::declval<ExperimentConfig&>()))>;
  return Field{std::move(key), [acc](ExperimentConfig& c, const std::string& v) {
                 acc(c) = parse_value(v, static_cast<T*>(nullptr));
               },
               [acc](const ExperimentConfig& c) { return format_value(acc(c)); }};
}

#define LL_FIELD(key, path) field(key, [](auto& c) -> auto& { return c.path; })

const std::vector<Field>& fields() {
  static const std::vector<Field> table = [] {
    std::vector<Field> f{
        LL_FIELD("experiment.method", method),
        LL_FIELD("experiment.seeds", seeds),
        LL_FIELD("experiment.cache_dir", cache_dir),

        LL_FIELD("suite.n_tasks", suite.n_tasks),
        LL_FIELD("suite.classes_per_task", suite.classes_per_task),
        LL_FIELD("suite.base_classes", suite.base_classes),
        LL_FIELD("suite.train_per_class", suite.train_per_class),
        LL_FIELD("suite.test_per_class", suite.test_per_class),
        LL_FIELD("suite.profile", suite.profile),

        LL_FIELD("vlm.hidden", pretrain.vlm.hidden),
        LL_FIELD("vlm.embed_dim", pretrain.vlm.embed_dim),
        LL_FIELD("vlm.token_dim", pretrain.vlm.token_dim),
        LL_FIELD("vlm.text_hidden", pretrain.vlm.text_hidden),
        LL_FIELD("vlm.init_tau", pretrain.vlm.init_tau),
        LL_FIELD("vlm.tau_min", pretrain.vlm.tau_min),
        LL_FIELD("vlm.tau_max", pretrain.vlm.tau_max),
        LL_FIELD("vlm.learn_tau", pretrain.vlm.learn_tau),
        LL_FIELD("vlm.prompt", pretrain.vlm.prompt),
        LL_FIELD("vlm.pretrain.steps", pretrain.vlm_train.steps),
        LL_FIELD("vlm.pretrain.batch", pretrain.vlm_train.batch),
        LL_FIELD("vlm.pretrain.lr", pretrain.vlm_train.opt.lr),
        LL_FIELD("vlm.pretrain.weight_decay", pretrain.vlm_train.opt.weight_decay),

        LL_FIELD("generator.hidden", pretrain.generator.hidden),
        LL_FIELD("generator.time_dim", pretrain.generator.time_dim),
        LL_FIELD("generator.cond_dim", pretrain.generator.cond_dim),
        LL_FIELD("generator.steps", pretrain.generator.steps),
        LL_FIELD("generator.beta_start", pretrain.generator.beta_start),
        LL_FIELD("generator.beta_end", pretrain.generator.beta_end),
        LL_FIELD("generator.sigma_data", pretrain.generator.sigma_data),
        LL_FIELD("generator.prompt", pretrain.generator.prompt),
        LL_FIELD("generator.pretrain.epochs", pretrain.generator_train.epochs),
        LL_FIELD("generator.pretrain.batch", pretrain.generator_train.batch),
        LL_FIELD("generator.pretrain.cond_dropout", pretrain.generator_train.cond_dropout),
        LL_FIELD("generator.pretrain.lr", pretrain.generator_train.opt.lr),
        LL_FIELD("generator.pretrain.weight_decay", pretrain.generator_train.opt.weight_decay),

        LL_FIELD("train.steps", loop.steps),
        LL_FIELD("train.batch", loop.batch),
        LL_FIELD("train.lr", loop.opt.lr),
        LL_FIELD("train.beta1", loop.opt.beta1),
        LL_FIELD("train.beta2", loop.opt.beta2),
        LL_FIELD("train.weight_decay", loop.opt.weight_decay),
        LL_FIELD("train.replay_fraction", loop.replay_fraction),

        LL_FIELD("loop.replay", loop.replay),
        LL_FIELD("loop.lft", loop.lft),
        LL_FIELD("loop.sf", loop.sf),
        LL_FIELD("loop.m_pre", loop.m_pre),
        LL_FIELD("loop.k", loop.k),
        LL_FIELD("loop.l", loop.l),
        LL_FIELD("loop.filter_policy", loop.filter_policy),
        LL_FIELD("loop.lora_policy", loop.lora_policy),
        LL_FIELD("loop.guidance", loop.guidance),
        LL_FIELD("loop.importance_decay", loop.importance_decay),
        LL_FIELD("loop.importance_batches", loop.importance_batches),

        LL_FIELD("loss.cd", loop.weights.cd),
        LL_FIELD("loss.ita", loop.weights.ita),
        LL_FIELD("loss.awc", loop.weights.awc),
        LL_FIELD("loss.use_cd", loop.weights.use_cd),
        LL_FIELD("loss.use_ita", loop.weights.use_ita),
        LL_FIELD("loss.use_awc", loop.weights.use_awc),

        LL_FIELD("lora.rank", loop.adapter.lora.rank),
        LL_FIELD("lora.targets", loop.adapter.lora.targets),
        LL_FIELD("lora.epochs", loop.adapter.epochs),
        LL_FIELD("lora.batch", loop.adapter.batch),
        LL_FIELD("lora.repeats", loop.adapter.repeats),
        LL_FIELD("lora.cond_dropout", loop.adapter.cond_dropout),
        LL_FIELD("lora.lr", loop.adapter.opt.lr),
        LL_FIELD("lora.beta1", loop.adapter.opt.beta1),
        LL_FIELD("lora.beta2", loop.adapter.opt.beta2),
        LL_FIELD("lora.weight_decay", loop.adapter.opt.weight_decay),

        LL_FIELD("baseline.l2_lambda", loop.l2_lambda),
        LL_FIELD("baseline.real_per_class", loop.real_per_class),

        LL_FIELD("eval.class_incremental", loop.class_incremental),
        LL_FIELD("eval.transfer_includes_row0", loop.transfer_includes_row0),
    };
    // α is either a number or "rank" (scale 1 whatever the rank).
    f.push_back(Field{"lora.alpha",
                      [](ExperimentConfig& c, const std::string& v) {
                        if (v == "rank") {
                          c.lora_alpha.reset();
                          return;
                        }
                        const double a = parse_value(v, static_cast<double*>(nullptr));
                        if (!(a > 0.0)) throw std::invalid_argument("expected a positive number or 'rank'");
                        c.lora_alpha = a;
                      },
                      [](const ExperimentConfig& c) {
                        return c.lora_alpha ? format_value(*c.lora_alpha) : std::string("rank");
                      }});
    std::sort(f.begin(), f.end(), [](const Field& a, const Field& b) { return a.key < b.key; });
    return f;
  }();
  return table;
}

#undef LL_FIELD

const Field* find_field(const std::string& key) {
  const auto& f = fields();
  auto it = std::lower_bound(f.begin(), f.end(), key, [](const Field& a, const std::string& k) { return a.key < k; });
  return it != f.end() && it->key == key ? &*it : nullptr;
}

std::string text_without(const ExperimentConfig& c, const std::vector<std::string>& skip,
                         const std::string& prefix = "") {
  std::string out;
  for (const auto& f : fields()) {
    if (std::find(skip.begin(), skip.end(), f.key) != skip.end()) continue;
    if (!prefix.empty() && f.key.rfind(prefix, 0) != 0) continue;
    out += f.key + " = " + f.get(c) + "\n";
  }
  return out;
}

}  // namespace

std::string hex64(std::uint64_t v) {
  std::ostringstream s;
  s << std::hex << std::setw(16) << std::setfill('0') << v;
  return s.str();
}

KeyValues KeyValues::parse(std::istream& in, const std::string& source, const std::filesystem::path& base_dir,
                           int depth) {
  if (depth > 8) throw ConfigError(source + ": include nesting too deep");
  KeyValues kv;
  std::map<std::string, std::size_t> seen_here;
  std::string raw;
  std::size_t line = 0;
  while (std::getline(in, raw)) {
    ++line;
    const auto hash = raw.find('#');
    const auto text = trim(hash == std::string::npos ? raw : raw.substr(0, hash));
    if (text.empty()) continue;
    const std::string where = source + ":" + std::to_string(line);
    const auto eq = text.find('=');
    if (eq == std::string::npos) throw ConfigError(where + ": expected 'key = value'");
    const auto key = trim(text.substr(0, eq));
    const auto value = trim(text.substr(eq + 1));
    if (!valid_key(key)) throw ConfigError(where + ": malformed key '" + key + "'");
    if (key == "include") {
      if (value.empty()) throw ConfigError(where + ": include needs a path");
      const auto path = base_dir / value;
      KeyValues inner;
      try {
        inner = load(path, depth + 1);
      } catch (const ConfigError& e) {
        throw ConfigError(where + ": in include: " + e.what());
      }
      for (const auto& [k, e] : inner.entries_) kv.entries_[k] = e;
      continue;
    }
    if (auto it = seen_here.find(key); it != seen_here.end())
      throw ConfigError(where + ": duplicate key '" + key + "' (first set on line " + std::to_string(it->second) + ")");
    seen_here[key] = line;
    kv.entries_[key] = ConfigEntry{value, source, line};
  }
  return kv;
}

KeyValues KeyValues::load(const std::filesystem::path& path, int depth) {
  std::ifstream in(path);
  if (!in) throw ConfigError(path.string() + ": cannot open config file");
  return parse(in, path.string(), path.parent_path(), depth);
}

void KeyValues::set_override(const std::string& assignment, std::size_t index) {
  const std::string source = "--set";
  const auto eq = assignment.find('=');
  const std::string where = source + ":" + std::to_string(index);
  if (eq == std::string::npos) throw ConfigError(where + ": expected key=value, got '" + assignment + "'");
  const auto key = trim(assignment.substr(0, eq));
  const auto value = trim(assignment.substr(eq + 1));
  if (!valid_key(key) || key == "include") throw ConfigError(where + ": malformed key '" + key + "'");
  entries_[key] = ConfigEntry{value, source, index};
}

const std::vector<std::string>& required_keys() {
  static const std::vector<std::string> keys{"experiment.method", "experiment.seeds"};
  return keys;
}

std::vector<std::string> known_keys() {
  std::vector<std::string> out;
  for (const auto& f : fields()) out.push_back(f.key);
  return out;
}

void apply_key(ExperimentConfig& config, const std::string& key, const ConfigEntry& entry) {
  const auto* f = find_field(key);
  if (f == nullptr) throw ConfigError(entry.where() + ": unknown key '" + key + "'");
  try {
    f->set(config, entry.value);
  } catch (const std::exception& e) {
    throw ConfigError(entry.where() + ": bad value '" + entry.value + "' for " + key + ": " + e.what());
  }
}

ExperimentConfig build_config(const KeyValues& kv) {
  ExperimentConfig c;
  for (const auto& [key, entry] : kv.entries()) apply_key(c, key, entry);
  for (const auto& key : required_keys()) {
    if (!kv.entries().count(key)) {
      const std::string source = kv.entries().empty() ? std::string("config") : kv.entries().begin()->second.source;
      throw ConfigError(source + ": missing required key '" + key + "'");
    }
  }
  auto fail = [&](const std::string& key, const std::string& why) {
    const auto it = kv.entries().find(key);
    const std::string where = it != kv.entries().end() ? it->second.where() : std::string("config:0");
    throw ConfigError(where + ": " + key + " " + why);
  };
  if (c.seeds.empty()) fail("experiment.seeds", "must list at least one seed");
  if (c.loop.adapter.lora.rank == 0) fail("lora.rank", "must be positive");
  if (c.loop.l == 0) fail("loop.l", "must be positive");
  if (c.loop.lora_policy == selection::Policy::top_and_bottom && c.loop.l % 2 != 0)
    fail("loop.l", "must be even under the top_and_bottom policy");
  if (c.loop.k == 0 || c.loop.m_pre < c.loop.k) fail("loop.k", "must satisfy 1 <= k <= m_pre");
  if (c.loop.batch == 0) fail("train.batch", "must be positive");
  if (!(c.loop.replay_fraction > 0.0 && c.loop.replay_fraction < 1.0))
    fail("train.replay_fraction", "must lie strictly between 0 and 1");
  if (c.suite.n_tasks == 0) fail("suite.n_tasks", "must be positive");
  return c;
}

ExperimentConfig load_config(const std::filesystem::path& path, const std::vector<std::string>& overrides) {
  auto kv = KeyValues::load(path);
  for (std::size_t i = 0; i < overrides.size(); ++i) kv.set_override(overrides[i], i + 1);
  return build_config(kv);
}

std::string ExperimentConfig::to_text() const { return text_without(*this, {}); }

std::uint64_t ExperimentConfig::hash() const {
  return num::fnv1a(text_without(*this, {"experiment.seeds", "experiment.cache_dir"}));
}

continual::LoopConfig ExperimentConfig::loop_config() const {
  auto l = loop;
  l.adapter.lora.alpha = lora_alpha.value_or(static_cast<double>(l.adapter.lora.rank));
  return l;
}

std::uint64_t ExperimentConfig::suite_hash() const { return num::fnv1a(text_without(*this, {}, "suite.")); }

taskgen::SuiteConfig ExperimentConfig::suite_for(std::uint64_t seed) const {
  auto s = suite;
  s.seed = seed;
  return s;
}

}  // namespace loraloop::cli
