#include "loraloop/lora/adapter.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <set>
#include <stdexcept>

#include "json.hpp"
#include "loraloop/numcore/checkpoint.hpp"

namespace loraloop::lora {

namespace {

std::size_t layer_index(const std::string& layer) {
  for (std::size_t i = 0; i < gen::kDenoiserLayers.size(); ++i)
    if (layer == gen::kDenoiserLayers[i]) return i;
  throw std::invalid_argument("adapter targets unknown layer '" + layer + "'");
}

}  // namespace

LoraAdapter::LoraAdapter(const gen::GeneratorModel& base, LoraConfig config, std::uint64_t seed)
    : config_(std::move(config)) {
  if (config_.rank == 0) throw std::invalid_argument("LoRA rank must be positive");
  if (config_.targets.empty()) throw std::invalid_argument("LoRA adapter needs at least one target layer");
  num::RngStream rng(seed, num::stream_id("lora.init"));
  const double stddev = 1.0 / std::sqrt(static_cast<double>(config_.rank));
  for (const auto& layer : config_.targets) {
    (void)layer_index(layer);
    const auto& w = base.params().get(layer);
    const std::size_t d_out = w.rows(), d_in = w.cols();
    if (config_.rank > std::min(d_out, d_in))
      throw std::invalid_argument("LoRA rank " + std::to_string(config_.rank) + " exceeds min dimension of " + layer +
                                  " " + num::shape_string(w.shape()));
    std::vector<double> a(d_out * config_.rank);
    for (auto& v : a) v = rng.normal() * stddev;
    params_.add(layer + ".A", num::Tensor({d_out, config_.rank}, std::move(a)));
    params_.add(layer + ".B", num::Tensor({config_.rank, d_in}, std::vector<double>(config_.rank * d_in, 0.0)));
  }
}

std::size_t LoraAdapter::storage_reals() const {
  std::size_t total = 0;
  for (const auto& layer : config_.targets) total += a(layer).size() + b(layer).size();
  return total;
}

gen::LayerDeltas LoraAdapter::bind(num::Tape& tape, bool trainable) {
  gen::LayerDeltas out;
  for (const auto& layer : config_.targets) {
    auto& A = a(layer);
    auto& B = b(layer);
    out[layer_index(layer)] = gen::LowRankDelta{trainable ? tape.param(A) : tape.constant_ref(A),
                                                trainable ? tape.param(B) : tape.constant_ref(B), scale()};
  }
  return out;
}

gen::LayerDeltas LoraAdapter::bind(num::Tape& tape) const {
  gen::LayerDeltas out;
  for (const auto& layer : config_.targets)
    out[layer_index(layer)] = gen::LowRankDelta{tape.constant_ref(a(layer)), tape.constant_ref(b(layer)), scale()};
  return out;
}

void check_compatible(const gen::GeneratorModel& base, const LoraAdapter& adapter) {
  for (const auto& layer : adapter.targets()) {
    (void)layer_index(layer);
    const auto& w = base.params().get(layer);
    const auto& A = adapter.a(layer);
    const auto& B = adapter.b(layer);
    if (A.rows() != w.rows() || B.cols() != w.cols() || A.cols() != B.rows())
      throw num::ShapeError("adapter layer " + layer + ": A " + num::shape_string(A.shape()) + " and B " +
                            num::shape_string(B.shape()) + " do not conform to W " + num::shape_string(w.shape()));
  }
}

gen::GeneratorView apply_adapter(const gen::GeneratorModel& base, const LoraAdapter& adapter, std::string label) {
  check_compatible(base, adapter);
  const LoraAdapter* ptr = &adapter;
  return gen::GeneratorView{&base, [ptr](num::Tape& tape) { return ptr->bind(tape); }, std::move(label)};
}

num::Tensor effective_weight(const gen::GeneratorModel& base, const LoraAdapter& adapter, const std::string& layer) {
  check_compatible(base, adapter);
  num::Tensor w = base.params().get(layer);
  const auto& targets = adapter.targets();
  if (std::find(targets.begin(), targets.end(), layer) == targets.end()) return w;
  const auto& A = adapter.a(layer);
  const auto& B = adapter.b(layer);
  const double s = adapter.scale();
  for (std::size_t i = 0; i < w.rows(); ++i) {
    for (std::size_t j = 0; j < w.cols(); ++j) {
      double acc = 0.0;
      for (std::size_t k = 0; k < adapter.rank(); ++k) acc += A.at(i, k) * B.at(k, j);
      w.at(i, j) += s * acc;
    }
  }
  return w;
}

LoraAdapter finetune_adapter(const gen::GeneratorModel& base, const LabeledBatch& data,
                             std::span<const std::string> class_names, const AdapterFinetuneConfig& config,
                             num::RngStream& rng, std::vector<double>* history) {
  if (data.empty()) throw std::invalid_argument("finetune_adapter: no exemplars");
  LoraAdapter adapter(base, config.lora, rng.next_u64());
  const auto conds = gen::batch_conditions(base, data, class_names);
  const std::size_t batch = std::max<std::size_t>(1, std::min(config.batch, data.size()));
  LoraAdapter* ptr = &adapter;
  const gen::GeneratorView view{&base, [ptr](num::Tape& tape) { return ptr->bind(tape, true); }, "training"};
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t rep = 0; rep < config.repeats; ++rep) {
      const auto order = rng.permutation(data.size());
      for (std::size_t start = 0; start < order.size(); start += batch, ++steps) {
        const std::span<const std::size_t> rows(order.data() + start, std::min(batch, order.size() - start));
        std::vector<std::vector<std::size_t>> sub_conds;
        for (auto r : rows) sub_conds.push_back(conds[r]);
        adapter.params().zero_grad();
        try {
          num::Tape tape;
          auto den = gen::bind_view(view, tape);
          auto loss = gen::denoise_loss(den, base.schedule(), data.images.gather_rows(rows), sub_conds, rng,
                                        config.cond_dropout);
          total += loss.value().item();
          tape.backward(loss);
          num::adamw_step(adapter.params(), config.opt);
        } catch (const num::NumericError& e) {
          throw num::NumericError("adapter finetuning diverged at epoch " + std::to_string(epoch) + ": " + e.what());
        }
        adapter.params().clear_grad();
      }
    }
    if (history) history->push_back(total / static_cast<double>(std::max<std::size_t>(steps, 1)));
  }
  return adapter;
}

void AdapterRegistry::register_adapter(LoraAdapter adapter, std::vector<std::string> classes, std::string name) {
  if (classes.empty()) throw std::invalid_argument("register_adapter: empty class set");
  std::set<std::string> seen;
  for (const auto& c : classes) {
    if (!seen.insert(c).second) throw std::invalid_argument("register_adapter: duplicate class '" + c + "'");
    if (const auto* e = find(c))
      throw std::invalid_argument("register_adapter: class '" + c + "' already covered by adapter '" + e->name + "'");
  }
  for (const auto& e : entries_)
    if (e.name == name) throw std::invalid_argument("register_adapter: duplicate adapter name '" + name + "'");
  entries_.push_back(Entry{std::move(adapter), std::move(classes), std::move(name)});
}

const AdapterRegistry::Entry* AdapterRegistry::find(const std::string& class_name) const {
  for (const auto& e : entries_)
    if (std::find(e.classes.begin(), e.classes.end(), class_name) != e.classes.end()) return &e;
  return nullptr;
}

std::size_t AdapterRegistry::storage_reals() const {
  std::size_t total = 0;
  for (const auto& e : entries_) total += e.adapter.storage_reals();
  return total;
}

void AdapterRegistry::save(const std::filesystem::path& dir) const {
  std::filesystem::create_directories(dir);
  nlohmann::json manifest;
  manifest["adapters"] = nlohmann::json::array();
  manifest["classes"] = nlohmann::json::object();
  for (const auto& e : entries_) {
    const std::string file = e.name + ".llcp";
    num::save_checkpoint(dir / file, num::to_named(e.adapter.params()));
    manifest["adapters"].push_back({{"name", e.name},
                                    {"file", file},
                                    {"rank", e.adapter.rank()},
                                    {"alpha", e.adapter.config().alpha},
                                    {"targets", e.adapter.targets()},
                                    {"classes", e.classes},
                                    {"storage_reals", e.adapter.storage_reals()}});
    for (const auto& c : e.classes) manifest["classes"][c] = file;
  }
  std::ofstream out(dir / "registry.json");
  if (!out) throw std::runtime_error("cannot write " + (dir / "registry.json").string());
  out << manifest.dump(2) << '\n';
}

AdapterRegistry AdapterRegistry::load(const std::filesystem::path& dir, const gen::GeneratorModel& base) {
  std::ifstream in(dir / "registry.json");
  if (!in) throw std::runtime_error("cannot read " + (dir / "registry.json").string());
  const auto manifest = nlohmann::json::parse(in);
  AdapterRegistry reg;
  for (const auto& a : manifest.at("adapters")) {
    LoraConfig cfg;
    cfg.rank = a.at("rank").get<std::size_t>();
    cfg.alpha = a.at("alpha").get<double>();
    cfg.targets = a.at("targets").get<std::vector<std::string>>();
    LoraAdapter adapter(base, cfg, 0);
    num::restore(adapter.params(), num::load_checkpoint(dir / a.at("file").get<std::string>()));
    check_compatible(base, adapter);
    reg.register_adapter(std::move(adapter), a.at("classes").get<std::vector<std::string>>(),
                         a.at("name").get<std::string>());
  }
  return reg;
}

gen::GeneratorView select_generator(const AdapterRegistry& registry, const gen::GeneratorModel& base,
                                    const std::string& class_name) {
  if (const auto* e = registry.find(class_name)) return apply_adapter(base, e->adapter, e->name);
  return gen::base_view(base);
}

}  // namespace loraloop::lora
