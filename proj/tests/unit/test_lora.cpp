#include <filesystem>
#include <string>

#include "doctest.h"
#include "loraloop/lora/adapter.hpp"
#include "loraloop/numcore/checkpoint.hpp"

using namespace loraloop;
using namespace loraloop::lora;
using num::Tensor;

namespace {

const std::vector<std::string> kClasses{"stripes-f1-p0", "dots-f2-p1", "rings-f3-p2"};

gen::GeneratorConfig tiny_config() {
  gen::GeneratorConfig c;
  c.pixels = 16;
  c.hidden = 24;
  c.time_dim = 8;
  c.cond_dim = 8;
  c.steps = 10;
  return c;
}

gen::GeneratorModel tiny_model(std::uint64_t seed) {
  gen::GeneratorModel m(tiny_config(), seed);
  m.register_classes(kClasses);
  return m;
}

bool bit_equal(const Tensor& a, const Tensor& b) {
  if (a.shape() != b.shape()) return false;
  for (std::size_t k = 0; k < a.size(); ++k)
    if (a[k] != b[k]) return false;
  return true;
}

LabeledBatch stripes(std::size_t n) {
  LabeledBatch d;
  std::vector<double> px;
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t p = 0; p < 16; ++p) px.push_back(p % 2 ? 0.8 : 0.2);
  d.images = Tensor({n, 16}, px);
  d.labels.assign(n, 0);
  return d;
}

}  // namespace

TEST_CASE("fresh adapter is a bit-exact no-op") {
  const auto base = tiny_model(1);
  const LoraAdapter adapter(base, {}, 7);
  for (const char* layer : gen::kDenoiserLayers) {
    CHECK(bit_equal(effective_weight(base, adapter, layer), base.params().get(layer)));
    CHECK(adapter.b(layer).size() > 0);
  }
  const auto adapted = apply_adapter(base, adapter);
  for (std::uint64_t seed = 0; seed < 16; ++seed) {
    const auto a = gen::sample_cfg(gen::base_view(base), kClasses[seed % 3], 7.5, seed);
    const auto b = gen::sample_cfg(adapted, kClasses[seed % 3], 7.5, seed);
    CHECK(bit_equal(a.sample, b.sample));
  }
}

TEST_CASE("effective weight oracles") {
  SUBCASE("two by two hand product") {
    gen::GeneratorConfig c = tiny_config();
    c.hidden = 2;
    gen::GeneratorModel base(c, 2);
    base.params().get("den.w2") = Tensor({2, 2}, {1, 0, 0, 1});
    LoraAdapter adapter(base, {.rank = 1, .alpha = 1.0, .targets = {"den.w2"}}, 3);
    adapter.a("den.w2") = Tensor({2, 1}, {1, 0});
    adapter.b("den.w2") = Tensor({1, 2}, {2, 3});
    const auto w = effective_weight(base, adapter, "den.w2");
    CHECK(w.at(0, 0) == 3.0);
    CHECK(w.at(0, 1) == 3.0);
    CHECK(w.at(1, 0) == 0.0);
    CHECK(w.at(1, 1) == 1.0);
    // Untargeted layers pass through.
    CHECK(bit_equal(effective_weight(base, adapter, "den.w1"), base.params().get("den.w1")));
  }
  SUBCASE("full rank identity factor adds the scaled delta") {
    const auto base = tiny_model(4);
    const std::size_t d = 24;
    LoraAdapter adapter(base, {.rank = d, .alpha = 12.0, .targets = {"den.w2"}}, 5);
    std::vector<double> eye(d * d, 0.0), delta(d * d);
    for (std::size_t i = 0; i < d; ++i) eye[i * d + i] = 1.0;
    num::RngStream rng(4, 1);
    for (auto& v : delta) v = rng.normal();
    adapter.a("den.w2") = Tensor({d, d}, eye);
    adapter.b("den.w2") = Tensor({d, d}, delta);
    const auto w = effective_weight(base, adapter, "den.w2");
    const auto& w0 = base.params().get("den.w2");
    for (std::size_t k = 0; k < w.size(); ++k) CHECK(w[k] == w0[k] + 0.5 * delta[k]);
  }
}

TEST_CASE("adapter shape errors") {
  const auto base = tiny_model(5);
  CHECK_THROWS(LoraAdapter(base, {.rank = 0}, 1));
  CHECK_THROWS(LoraAdapter(base, {.rank = 17}, 1));  // den.w3 is 16 x 24
  CHECK_THROWS(LoraAdapter(base, {.rank = 2, .alpha = 2.0, .targets = {"den.w9"}}, 1));

  gen::GeneratorConfig wide = tiny_config();
  wide.hidden = 32;
  gen::GeneratorModel other(wide, 5);
  other.register_classes(kClasses);
  const LoraAdapter adapter(base, {}, 1);
  try {
    check_compatible(other, adapter);
    FAIL("mismatch not detected");
  } catch (const num::ShapeError& e) {
    CHECK(std::string(e.what()).find("den.w") != std::string::npos);
  }
}

TEST_CASE("storage cost follows the rank formula") {
  const auto base = tiny_model(6);
  // den.w1 24x32, den.w2 24x24, den.w3 16x24
  const LoraAdapter adapter(base, {.rank = 3, .alpha = 3.0}, 1);
  CHECK(adapter.storage_reals() == 3 * ((32 + 24) + (24 + 24) + (24 + 16)));
  std::size_t counted = 0;
  adapter.params().for_each([&](const std::string&, const Tensor& t) { counted += t.size(); });
  CHECK(adapter.storage_reals() == counted);
}

TEST_CASE("adapter finetuning") {
  const auto base = tiny_model(7);
  const auto before = num::checkpoint_hash(base.params());
  const auto data = stripes(4);
  const std::vector<std::string> classes{kClasses[0]};

  SUBCASE("zero epochs returns a no-op") {
    num::RngStream rng(7, 1);
    AdapterFinetuneConfig cfg;
    cfg.epochs = 0;
    const auto adapter = finetune_adapter(base, data, classes, cfg, rng);
    for (const char* layer : gen::kDenoiserLayers)
      CHECK(bit_equal(effective_weight(base, adapter, layer), base.params().get(layer)));
  }
  SUBCASE("training moves only the factors and lowers the loss") {
    num::RngStream rng(7, 2);
    AdapterFinetuneConfig cfg;
    cfg.epochs = 60;
    cfg.repeats = 4;
    cfg.opt.lr = 3e-3;
    std::vector<double> history;
    const auto adapter = finetune_adapter(base, data, classes, cfg, rng, &history);
    CHECK(num::checkpoint_hash(base.params()) == before);
    REQUIRE(history.size() == 60);
    const auto base_loss = gen::evaluate_denoise_loss(gen::base_view(base), data, classes, 3);
    const auto tuned_loss = gen::evaluate_denoise_loss(apply_adapter(base, adapter), data, classes, 3);
    CHECK(tuned_loss < base_loss);
  }
  SUBCASE("empty data is rejected") {
    num::RngStream rng(7, 3);
    CHECK_THROWS(finetune_adapter(base, LabeledBatch{}, classes, AdapterFinetuneConfig{}, rng));
  }
}

TEST_CASE("adapter registry lookup") {
  const auto base = tiny_model(8);
  AdapterRegistry reg;
  CHECK(reg.find("stripes-f1-p0") == nullptr);
  CHECK(select_generator(reg, base, "stripes-f1-p0").label == "base");

  LoraAdapter a1(base, {}, 1);
  LoraAdapter a2(base, {}, 2);
  a2.b("den.w3")[0] = 0.5;
  reg.register_adapter(a1, {"stripes-f1-p0"}, "adapter_1");
  reg.register_adapter(a2, {"dots-f2-p1"}, "adapter_2");
  REQUIRE(reg.find("dots-f2-p1") != nullptr);
  CHECK(reg.find("dots-f2-p1")->name == "adapter_2");
  CHECK(reg.find("stripes-f1-p0")->name == "adapter_1");
  CHECK(reg.find("rings-f3-p2") == nullptr);
  CHECK(select_generator(reg, base, "dots-f2-p1").label == "adapter_2");
  CHECK(select_generator(reg, base, "rings-f3-p2").label == "base");

  CHECK_THROWS(reg.register_adapter(a1, {"rings-f3-p2", "dots-f2-p1"}, "adapter_3"));
  CHECK_THROWS(reg.register_adapter(a1, {"rings-f3-p2"}, "adapter_1"));
  CHECK_THROWS(reg.register_adapter(a1, {}, "adapter_4"));
  CHECK(reg.size() == 2);
  CHECK(reg.storage_reals() == a1.storage_reals() + a2.storage_reals());

  // The lookup result samples with its own adapter.
  const auto via_registry = gen::sample_cfg(select_generator(reg, base, "dots-f2-p1"), "dots-f2-p1", 7.5, 9);
  const auto direct = gen::sample_cfg(apply_adapter(base, a2), "dots-f2-p1", 7.5, 9);
  CHECK(bit_equal(via_registry.sample, direct.sample));
}

TEST_CASE("adapter registry save and load") {
  const auto base = tiny_model(9);
  AdapterRegistry reg;
  LoraAdapter a(base, {.rank = 2, .alpha = 2.0}, 4);
  a.b("den.w1")[3] = -0.25;
  reg.register_adapter(a, {"stripes-f1-p0", "rings-f3-p2"}, "adapter_task1");
  const auto dir = std::filesystem::temp_directory_path() / "loraloop_registry_roundtrip";
  std::filesystem::remove_all(dir);
  reg.save(dir);
  CHECK(std::filesystem::exists(dir / "adapter_task1.llcp"));
  CHECK(std::filesystem::exists(dir / "registry.json"));
  const auto loaded = AdapterRegistry::load(dir, base);
  REQUIRE(loaded.size() == 1);
  CHECK(loaded.find("rings-f3-p2")->name == "adapter_task1");
  CHECK(loaded.entries()[0].adapter.rank() == 2);
  CHECK(num::checkpoint_hash(loaded.entries()[0].adapter.params()) == num::checkpoint_hash(a.params()));
  std::filesystem::remove_all(dir);
}
