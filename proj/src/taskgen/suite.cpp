#include "loraloop/taskgen/suite.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numbers>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "loraloop/io/pgm.hpp"
#include "loraloop/numcore/rng.hpp"

namespace loraloop::taskgen {

namespace {

constexpr double kPi = std::numbers::pi;

double frac(double x) { return x - std::floor(x); }

struct Jitter {
  double phase, ox, oy, cx, cy, amp;
};

Jitter draw_jitter(num::RngStream& rng) {
  Jitter j{};
  j.phase = 2.0 * kPi * rng.uniform();
  j.ox = rng.uniform();
  j.oy = rng.uniform();
  j.cx = 0.16 * (rng.uniform() - 0.5);
  j.cy = 0.16 * (rng.uniform() - 0.5);
  j.amp = 0.75 + 0.15 * rng.uniform();
  return j;
}

/// Pattern value in [0,1] at continuous coordinates (u, v) ∈ [0,1)².
double pattern(const ClassSpec& c, const Jitter& j, double u, double v) {
  const double k = c.frequency + 1.0;
  switch (c.family) {
    case Family::stripes: {
      const double th = c.variant * kPi / 3.0;
      return 0.5 + 0.5 * std::sin(2.0 * kPi * k * (u * std::cos(th) + v * std::sin(th)) + j.phase);
    }
    case Family::dots: {
      static constexpr double radius[] = {0.2, 0.3, 0.4};
      const double dx = frac(u * k + j.ox) - 0.5;
      const double dy = frac(v * k + j.oy) - 0.5;
      const double d = std::sqrt(dx * dx + dy * dy);
      const double r = radius[c.variant];
      return std::clamp((r + 0.06 - d) / 0.12, 0.0, 1.0);
    }
    case Family::checker: {
      static constexpr double aspect[] = {1.0, 2.0, 0.5};
      const double ny = std::max(1.0, k * aspect[c.variant]);
      const auto a = static_cast<long>(std::floor(u * k + j.ox));
      const auto b = static_cast<long>(std::floor(v * ny + j.oy));
      return ((a + b) % 2 + 2) % 2 == 0 ? 1.0 : 0.0;
    }
    case Family::rings: {
      static constexpr double threshold[] = {0.6, 0.0, -0.6};
      const double du = u - 0.5 - j.cx;
      const double dv = v - 0.5 - j.cy;
      const double d = std::sqrt(du * du + dv * dv);
      const double s = std::sin(2.0 * kPi * k * d + j.phase);
      return std::clamp((s - threshold[c.variant]) * 2.5 + 0.5, 0.0, 1.0);
    }
    case Family::gradient: {
      static constexpr double angle[] = {0.0, kPi / 2.0, kPi / 4.0};
      const double th = angle[c.variant];
      double proj = u * std::cos(th) + v * std::sin(th);
      if (c.variant == 2) proj /= std::numbers::sqrt2;
      return frac(c.frequency * proj + j.phase / (2.0 * kPi));
    }
  }
  return 0.5;
}

}  // namespace

const char* family_name(Family f) {
  switch (f) {
    case Family::stripes: return "stripes";
    case Family::dots: return "dots";
    case Family::checker: return "checker";
    case Family::rings: return "rings";
    case Family::gradient: return "gradient";
  }
  return "?";
}

ClassSpec make_class(Family family, int frequency, int variant) {
  if (frequency < 1 || frequency > kFrequencies || variant < 0 || variant >= kVariants) {
    throw std::invalid_argument("class parameters out of range");
  }
  ClassSpec c;
  c.family = family;
  c.frequency = frequency;
  c.variant = variant;
  c.name = std::string(family_name(family)) + "-f" + std::to_string(frequency) + "-p" +
           std::to_string(variant);
  return c;
}

bool DomainSpec::is_identity() const {
  return contrast == 1.0 && gamma == 1.0 && !invert && noise == 0.0 && occlusion == 0.0 &&
         std::all_of(rotations_deg.begin(), rotations_deg.end(), [](double a) { return a == 0.0; });
}

GapProfile parse_gap_profile(const std::string& s) {
  if (s == "mild") return GapProfile::mild;
  if (s == "hard") return GapProfile::hard;
  throw std::invalid_argument("unknown gap profile '" + s + "' (expected mild or hard)");
}

const char* to_string(GapProfile p) { return p == GapProfile::mild ? "mild" : "hard"; }

std::vector<ClassSpec> class_grid() {
  std::vector<ClassSpec> out;
  for (std::size_t f = 0; f < kFamilyCount; ++f)
    for (int k = 1; k <= kFrequencies; ++k)
      for (int p = 0; p < kVariants; ++p) out.push_back(make_class(static_cast<Family>(f), k, p));
  return out;
}

DomainSpec task_domain(GapProfile profile, std::size_t task, std::size_t n_tasks) {
  DomainSpec d;
  if (profile == GapProfile::mild) {
    d.noise = 0.02;
    return d;
  }
  const double s = static_cast<double>(task) / static_cast<double>(std::max<std::size_t>(n_tasks, 1));
  d.invert = task % 2 == 1;
  d.gamma = task % 2 == 0 ? 1.0 + 1.5 * s : 1.0;
  d.contrast = 1.0 - 0.4 * s;
  d.noise = 0.03 + 0.07 * s;
  const double sign = task % 2 == 1 ? 1.0 : -1.0;
  d.rotations_deg = {sign * (20.0 + 40.0 * s)};
  d.occlusion = 0.3 * s;
  return d;
}

num::Tensor render_sample(const ClassSpec& cls, const DomainSpec& domain, std::uint64_t seed) {
  num::RngStream pattern_rng(seed, num::stream_id("pattern"));
  num::RngStream domain_rng(seed, num::stream_id("domain"));
  const auto jitter = draw_jitter(pattern_rng);

  const auto& rots = domain.rotations_deg;
  const double angle = rots.empty() ? 0.0 : rots[rots.size() == 1 ? 0 : domain_rng.index(rots.size())];
  const double ca = std::cos(angle * kPi / 180.0);
  const double sa = std::sin(angle * kPi / 180.0);

  num::Tensor img(num::Shape{kPixels});
  constexpr double side = static_cast<double>(kImageSide);
  for (std::size_t y = 0; y < kImageSide; ++y) {
    for (std::size_t x = 0; x < kImageSide; ++x) {
      double u = (static_cast<double>(x) + 0.5) / side;
      double v = (static_cast<double>(y) + 0.5) / side;
      if (angle != 0.0) {
        const double du = u - 0.5, dv = v - 0.5;
        u = 0.5 + ca * du + sa * dv;
        v = 0.5 - sa * du + ca * dv;
      }
      const double val = pattern(cls, jitter, u, v);
      img[y * kImageSide + x] = cls.base_intensity + jitter.amp * (val - 0.5);
    }
  }

  if (domain.contrast != 1.0 || domain.gamma != 1.0 || domain.invert) {
    for (auto& p : img.values()) {
      double q = std::clamp(0.5 + domain.contrast * (p - 0.5), 0.0, 1.0);
      if (domain.gamma != 1.0) q = std::pow(q, domain.gamma);
      p = domain.invert ? 1.0 - q : q;
    }
  }
  if (domain.occlusion > 0.0 && domain_rng.uniform() < domain.occlusion) {
    constexpr std::size_t patch = 6;
    const auto ox = domain_rng.index(kImageSide - patch + 1);
    const auto oy = domain_rng.index(kImageSide - patch + 1);
    for (std::size_t y = oy; y < oy + patch; ++y)
      for (std::size_t x = ox; x < ox + patch; ++x) img[y * kImageSide + x] = 0.5;
  }
  if (domain.noise > 0.0) {
    for (auto& p : img.values()) p += domain.noise * domain_rng.normal();
  }
  for (auto& p : img.values()) p = std::clamp(p, 0.0, 1.0);
  return img;
}

std::uint64_t suite_fingerprint(const SuiteConfig& c) {
  return num::stream_id("suite-v1", {c.seed, c.n_tasks, c.classes_per_task, c.base_classes,
                                     c.train_per_class, c.test_per_class,
                                     static_cast<std::uint64_t>(c.profile)});
}

namespace {

Dataset render_split(const std::vector<ClassSpec>& specs, const std::vector<std::size_t>& global_ids,
                     const DomainSpec& domain, std::uint64_t seed, std::size_t split,
                     std::size_t per_class) {
  Dataset out;
  std::vector<double> values;
  values.reserve(specs.size() * per_class * kPixels);
  for (std::size_t c = 0; c < specs.size(); ++c) {
    for (std::size_t j = 0; j < per_class; ++j) {
      const auto sample_seed = num::stream_id("sample", {seed, global_ids[c], split, j});
      const auto img = render_sample(specs[c], domain, sample_seed);
      values.insert(values.end(), img.values().begin(), img.values().end());
      out.labels.push_back(c);
    }
  }
  out.images = num::Tensor(num::Shape{specs.size() * per_class, kPixels}, std::move(values));
  return out;
}

continual::TaskData build_task(std::string name, const std::vector<ClassSpec>& grid,
                               const std::vector<std::size_t>& ids, const DomainSpec& domain,
                               const SuiteConfig& config) {
  continual::TaskData t;
  t.name = std::move(name);
  t.domain = domain;
  for (auto id : ids) {
    t.specs.push_back(grid[id]);
    t.classes.push_back(grid[id].name);
  }
  t.train = render_split(t.specs, ids, domain, config.seed, 0, config.train_per_class);
  t.test = render_split(t.specs, ids, domain, config.seed, 1, config.test_per_class);
  return t;
}

}  // namespace

continual::TaskSequence make_suite(const SuiteConfig& config) {
  if (config.train_per_class < 2 || config.test_per_class < 1) {
    throw std::invalid_argument("suite needs at least 2 train and 1 test sample per class");
  }
  if (config.classes_per_task < 2 || config.base_classes < 2) {
    throw std::invalid_argument("tasks and the base pool need at least 2 classes each");
  }
  const auto grid = class_grid();
  const auto needed = config.base_classes + config.n_tasks * config.classes_per_task;
  if (needed > grid.size()) {
    throw std::invalid_argument("pattern grid exhausted: suite needs " + std::to_string(needed) +
                                " classes, the grid has " + std::to_string(grid.size()));
  }

  num::RngStream rng(config.seed, num::stream_id("suite-classes"));
  const auto order = rng.permutation(grid.size());

  // The base pool covers every family / frequency / variant token so that
  // prompts of later classes only use tokens seen during pretraining.
  std::set<std::string> covered;
  std::vector<std::size_t> base_ids;
  std::vector<bool> used(grid.size(), false);
  auto tokens_of = [&](std::size_t id) {
    const auto& c = grid[id];
    return std::vector<std::string>{family_name(c.family), "f" + std::to_string(c.frequency),
                                    "p" + std::to_string(c.variant)};
  };
  for (auto id : order) {
    const auto toks = tokens_of(id);
    if (std::any_of(toks.begin(), toks.end(), [&](const auto& t) { return !covered.count(t); })) {
      covered.insert(toks.begin(), toks.end());
      base_ids.push_back(id);
      used[id] = true;
    }
  }
  if (base_ids.size() > config.base_classes) {
    throw std::invalid_argument("base pool of " + std::to_string(config.base_classes) +
                                " classes cannot cover the token grid (needs " +
                                std::to_string(base_ids.size()) + ")");
  }
  for (auto id : order) {
    if (base_ids.size() == config.base_classes) break;
    if (!used[id]) {
      base_ids.push_back(id);
      used[id] = true;
    }
  }
  std::vector<std::size_t> rest;
  for (auto id : order)
    if (!used[id]) rest.push_back(id);

  continual::TaskSequence seq;
  seq.fingerprint = suite_fingerprint(config);
  seq.base = build_task("base", grid, base_ids, DomainSpec{}, config);
  for (std::size_t i = 0; i < config.n_tasks; ++i) {
    std::vector<std::size_t> ids(rest.begin() + static_cast<std::ptrdiff_t>(i * config.classes_per_task),
                                 rest.begin() + static_cast<std::ptrdiff_t>((i + 1) * config.classes_per_task));
    seq.tasks.push_back(build_task("task" + std::to_string(i + 1), grid, ids,
                                   task_domain(config.profile, i + 1, config.n_tasks), config));
  }
  return seq;
}

void dump_suite(const continual::TaskSequence& suite, const std::filesystem::path& dir) {
  namespace fs = std::filesystem;
  fs::create_directories(dir);
  nlohmann::json manifest;
  manifest["fingerprint"] = suite.fingerprint;
  manifest["image_side"] = kImageSide;
  auto& tasks = manifest["tasks"] = nlohmann::json::array();
  for (std::size_t j = 0; j <= suite.task_count(); ++j) {
    const auto& task = suite.column(j);
    nlohmann::json t;
    t["name"] = task.name;
    t["classes"] = task.classes;
    t["domain"] = {{"contrast", task.domain.contrast}, {"gamma", task.domain.gamma},
                   {"invert", task.domain.invert},     {"noise", task.domain.noise},
                   {"rotations_deg", task.domain.rotations_deg},
                   {"occlusion", task.domain.occlusion}};
    for (const char* split : {"train", "test"}) {
      const auto& data = std::string(split) == "train" ? task.train : task.test;
      const auto sub = fs::path(task.name) / split;
      fs::create_directories(dir / sub);
      auto& files = t[split] = nlohmann::json::array();
      std::vector<std::size_t> counter(task.classes.size(), 0);
      for (std::size_t r = 0; r < data.size(); ++r) {
        const auto label = data.labels[r];
        const auto file = sub / (task.classes[label] + "_" + std::to_string(counter[label]++) + ".pgm");
        io::write_pgm(dir / file, data.images.slice_rows(r, r + 1), kImageSide);
        files.push_back({{"file", file.generic_string()}, {"label", label}, {"class", task.classes[label]}});
      }
    }
    tasks.push_back(std::move(t));
  }
  std::ofstream(dir / "manifest.json") << manifest.dump(2) << '\n';
}

}  // namespace loraloop::taskgen

namespace loraloop::continual {

std::vector<std::string> TaskSequence::all_classes() const {
  std::vector<std::string> out = base.classes;
  for (const auto& t : tasks) out.insert(out.end(), t.classes.begin(), t.classes.end());
  return out;
}

}  // namespace loraloop::continual
