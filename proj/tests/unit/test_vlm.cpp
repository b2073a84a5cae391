#include <cmath>
#include <filesystem>

#include "doctest.h"
#include "loraloop/numcore/checkpoint.hpp"
#include "loraloop/taskgen/suite.hpp"
#include "loraloop/vlm/dual_encoder.hpp"

using namespace loraloop;
using namespace loraloop::vlm;
using num::Tensor;

namespace {

Tensor filled(const num::Shape& shape, double v) {
  return Tensor(shape, std::vector<double>(num::shape_size(shape), v));
}

Tensor random_images(std::size_t n, std::size_t pixels, std::uint64_t seed) {
  num::RngStream rng(seed, 7);
  std::vector<double> v(n * pixels);
  for (auto& x : v) x = rng.uniform();
  return Tensor({n, pixels}, std::move(v));
}

// Bright left half for class 0, bright right half for class 1.
LabeledBatch separable_set(std::size_t n, std::uint64_t seed) {
  num::RngStream rng(seed, 11);
  LabeledBatch b;
  std::vector<double> v(n * 256);
  for (std::size_t i = 0; i < n; ++i) {
    const std::size_t label = i % 2;
    for (std::size_t p = 0; p < 256; ++p) {
      const bool left = (p % 16) < 8;
      const double base = (left == (label == 0)) ? 0.8 : 0.2;
      v[i * 256 + p] = base + 0.05 * rng.normal();
    }
    b.labels.push_back(label);
  }
  b.images = Tensor({n, 256}, std::move(v));
  return b;
}

std::vector<double> straight_line_embedding(const DualEncoder& m, std::span<const double> x) {
  auto layer = [&](std::span<const double> in, const std::string& w, const std::string& b, bool relu) {
    const auto& W = m.params().get(w);
    const auto& B = m.params().get(b);
    std::vector<double> out(W.rows());
    for (std::size_t o = 0; o < W.rows(); ++o) {
      double acc = B[o];
      for (std::size_t i = 0; i < W.cols(); ++i) acc += W.at(o, i) * in[i];
      out[o] = relu ? std::max(0.0, acc) : acc;
    }
    return out;
  };
  auto h1 = layer(x, "img.w1", "img.b1", true);
  auto h2 = layer(h1, "img.w2", "img.b2", true);
  return layer(h2, "img.w3", "img.b3", false);
}

const std::vector<std::string> kTwo{"stripes-f1-p0", "dots-f2-p1"};

}  // namespace

TEST_CASE("cosine oracles") {
  const std::vector<double> a{1, 0}, b{1, 1}, c{0, 3};
  CHECK(cosine(a, a) == doctest::Approx(1.0));
  CHECK(cosine(a, c) == doctest::Approx(0.0));
  CHECK(cosine(a, b) == doctest::Approx(1.0 / std::sqrt(2.0)).epsilon(1e-12));
  CHECK_THROWS_AS(cosine(a, std::vector<double>{0, 0}), num::NumericError);

  num::RngStream rng(5, 1);
  for (int trial = 0; trial < 50; ++trial) {
    std::vector<double> z(8), w(8), zs(8), ws(8);
    const double alpha = 0.01 + 10 * rng.uniform(), beta = 0.01 + 10 * rng.uniform();
    for (int i = 0; i < 8; ++i) {
      z[i] = rng.normal();
      w[i] = rng.normal();
      zs[i] = alpha * z[i];
      ws[i] = beta * w[i];
    }
    CHECK(cosine(zs, ws) == doctest::Approx(cosine(z, w)).epsilon(1e-12));
  }
}

TEST_CASE("class logits follow the cosine softmax") {
  DualEncoder model({}, 1);
  num::Tape tape;
  BoundEncoder enc;
  enc.log_tau = tape.constant(Tensor::scalar(0.0));
  auto z = tape.constant(Tensor::matrix(1, 2, {2.0, 0.0}));
  auto w = tape.constant(Tensor::matrix(2, 2, {0.8, 0.6, 0.2, std::sqrt(0.96)}));
  auto p = num::softmax(class_logits(enc, z, w)).value();
  CHECK(p[0] == doctest::Approx(1.0 / (1.0 + std::exp(-0.6))).epsilon(1e-12));
  CHECK(p[0] == doctest::Approx(0.64566).epsilon(1e-4));

  double prev_max = 1.0;
  for (double tau : {0.1, 1.0, 10.0}) {
    num::Tape t2;
    BoundEncoder e2;
    e2.log_tau = t2.constant(Tensor::scalar(std::log(tau)));
    auto q = num::softmax(class_logits(e2, t2.constant(z.value()), t2.constant(w.value()))).value();
    CHECK(q[0] < prev_max);
    CHECK(q[0] > 0.5);
    prev_max = q[0];
  }
  CHECK(prev_max == doctest::Approx(0.5).epsilon(0.05));
}

TEST_CASE("image encoder forward pass") {
  SUBCASE("zero weights give a zero embedding") {
    DualEncoder model({}, 2);
    model.params().for_each([](const std::string& name, Tensor& t) {
      if (name.starts_with("img.")) t = filled(t.shape(), 0.0);
    });
    auto z = encode_image(model, random_images(3, 256, 1));
    for (double v : z.values()) CHECK(v == 0.0);
  }
  SUBCASE("identity weights on a 2-pixel input") {
    DualEncoderConfig cfg;
    cfg.pixels = 2;
    cfg.hidden = 2;
    cfg.embed_dim = 2;
    DualEncoder model(cfg, 2);
    for (const char* w : {"img.w1", "img.w2", "img.w3"}) model.params().assign(w, Tensor::identity(2));
    for (const char* b : {"img.b1", "img.b2", "img.b3"}) model.params().assign(b, filled({1, 2}, 0.0));
    auto z = encode_image(model, Tensor::matrix(1, 2, {3.0, 4.0}));
    CHECK(z[0] == 3.0);
    CHECK(z[1] == 4.0);
  }
  SUBCASE("matches a straight-line evaluation") {
    DualEncoder model({}, 9);
    auto x = random_images(4, 256, 2);
    auto z = encode_image(model, x);
    for (std::size_t r = 0; r < 4; ++r) {
      auto ref = straight_line_embedding(model, x.values().subspan(r * 256, 256));
      for (std::size_t k = 0; k < ref.size(); ++k) CHECK(z.at(r, k) == doctest::Approx(ref[k]).epsilon(1e-12));
    }
  }
  SUBCASE("wrong pixel count") {
    DualEncoder model({}, 9);
    CHECK_THROWS_AS(encode_image(model, random_images(2, 100, 1)), num::ShapeError);
  }
}

TEST_CASE("class probabilities") {
  DualEncoder model({}, 4);
  const std::vector<std::string> classes{"stripes-f1-p0", "dots-f2-p1", "rings-f3-p2", "checker-f4-p0"};
  model.register_classes(classes);
  auto x = random_images(20, 256, 3);
  auto p = class_probabilities(model, x, classes);
  REQUIRE(p.rows() == 20);
  REQUIRE(p.cols() == 4);
  for (std::size_t i = 0; i < 20; ++i) {
    double s = 0;
    for (std::size_t c = 0; c < 4; ++c) s += p.at(i, c);
    CHECK(std::abs(s - 1.0) < 1e-9);
  }

  const std::vector<std::string> same{"stripes-f1-p0", "stripes-f1-p0", "stripes-f1-p0"};
  auto u = class_probabilities(model, x, same);
  for (double v : u.values()) CHECK(v == doctest::Approx(1.0 / 3.0).epsilon(1e-12));

  SUBCASE("argmax is invariant to temperature") {
    auto base = predict(model, x, classes);
    for (double tau : {0.1, 1.0, 10.0}) {
      model.params().get("log_tau")[0] = std::log(tau);
      CHECK(predict(model, x, classes) == base);
    }
  }
  SUBCASE("unknown class tokens are rejected without growing the vocabulary") {
    const std::vector<std::string> unknown{"zigzag-f1-p0"};
    const auto v = model.vocabulary().size();
    CHECK_THROWS_AS(class_probabilities(model, x, unknown), std::invalid_argument);
    CHECK(model.vocabulary().size() == v);
  }
}

TEST_CASE("tokenizer grows the token table deterministically") {
  DualEncoder a({}, 5), b({}, 5);
  const auto v0 = a.vocabulary().size();
  const auto rows0 = a.params().get("txt.tok").rows();
  CHECK(rows0 == v0);
  auto seq = a.tokenize("stripes-f3-p0");
  CHECK(seq.size() == text::split_tokens(a.prompt().fill("stripes-f3-p0")).size());
  CHECK(a.vocabulary().size() == v0 + 3);
  CHECK(a.params().get("txt.tok").rows() == v0 + 3);

  b.tokenize("dots-f3-p2");
  b.tokenize("stripes-f3-p0");
  const auto& ta = a.params().get("txt.tok");
  const auto& tb = b.params().get("txt.tok");
  const auto id_a = *a.vocabulary().find("stripes");
  const auto id_b = *b.vocabulary().find("stripes");
  CHECK(id_a != id_b);
  for (std::size_t k = 0; k < ta.cols(); ++k) CHECK(ta.at(id_a, k) == tb.at(id_b, k));
}

TEST_CASE("confidence is the image/prompt cosine") {
  DualEncoder model({}, 6);
  auto prompt = model.tokenize("rings-f2-p1");
  auto x = random_images(1, 256, 4);
  auto z = encode_image(model, x);
  const std::vector<std::string> cls{"rings-f2-p1"};
  auto w = encode_text(model, cls);
  const double c = confidence(model, x, prompt);
  CHECK(c == doctest::Approx(cosine(z.values(), w.values())).epsilon(1e-12));
  CHECK(c >= -1.0);
  CHECK(c <= 1.0);
  const std::vector<text::TokenSeq> prompts{prompt};
  CHECK(confidences(model, x, prompts).front() == c);
}

TEST_CASE("finetune step") {
  DualEncoder model({}, 7);
  model.register_classes(kTwo);
  auto batch = separable_set(16, 1);

  SUBCASE("lr 0 leaves parameters bit-identical") {
    const auto before = num::checkpoint_hash(model.params());
    num::AdamWConfig opt;
    opt.lr = 0.0;
    finetune_step(model, batch, kTwo, opt);
    CHECK(num::checkpoint_hash(model.params()) == before);
  }
  SUBCASE("uniform probabilities over four classes give ln 4") {
    const std::vector<std::string> same(4, "stripes-f1-p0");
    LabeledBatch b4 = batch;
    for (std::size_t i = 0; i < b4.labels.size(); ++i) b4.labels[i] = i % 4;
    num::AdamWConfig opt;
    opt.lr = 0.0;
    CHECK(finetune_step(model, b4, same, opt) == doctest::Approx(std::log(4.0)).epsilon(1e-12));
  }
  SUBCASE("extra loss is added to the cross-entropy") {
    num::AdamWConfig opt;
    opt.lr = 0.0;
    const double plain = finetune_step(model, batch, kTwo, opt);
    const double with = finetune_step(model, batch, kTwo, opt, [](num::Tape& t, const BoundEncoder&) {
      return t.constant(Tensor::scalar(0.25));
    });
    CHECK(with == doctest::Approx(plain + 0.25).epsilon(1e-12));
  }
  SUBCASE("empty batch") {
    CHECK_THROWS(finetune_step(model, LabeledBatch{}, kTwo, {}));
  }
  SUBCASE("separable toy set reaches full training accuracy in 50 steps") {
    num::AdamWConfig opt;
    opt.lr = 1e-2;
    for (int s = 0; s < 50; ++s) finetune_step(model, batch, kTwo, opt);
    CHECK(evaluate_accuracy(model, batch, kTwo) == 1.0);
  }
  SUBCASE("temperature stays clamped") {
    model.params().get("log_tau")[0] = std::log(1e-6);
    num::AdamWConfig opt;
    opt.lr = 0.0;
    finetune_step(model, batch, kTwo, opt);
    CHECK(model.tau() == doctest::Approx(1e-3).epsilon(1e-12));
  }
  SUBCASE("frozen temperature is not updated") {
    model.set_learn_tau(false);
    const double tau = model.tau();
    num::AdamWConfig opt;
    opt.lr = 1e-2;
    for (int s = 0; s < 3; ++s) finetune_step(model, batch, kTwo, opt);
    CHECK(model.tau() == tau);
  }
}

TEST_CASE("evaluate accuracy") {
  DualEncoder model({}, 8);
  const std::vector<std::string> same{"dots-f1-p0", "dots-f1-p0", "dots-f1-p0"};
  model.register_classes(same);
  LabeledBatch zeros, others;
  zeros.images = random_images(6, 256, 5);
  zeros.labels.assign(6, 0);
  others.images = zeros.images;
  others.labels = {1, 2, 1, 2, 1, 2};
  CHECK(evaluate_accuracy(model, zeros, same) == 1.0);
  CHECK(evaluate_accuracy(model, others, same) == 0.0);

  const std::vector<std::string> classes{"stripes-f1-p0", "dots-f2-p1", "rings-f3-p2"};
  model.register_classes(classes);
  LabeledBatch mixed;
  mixed.images = random_images(10, 256, 6);
  mixed.labels = {0, 1, 2, 0, 1, 2, 0, 1, 2, 0};
  auto p = class_probabilities(model, mixed.images, classes);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < 10; ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < 3; ++c)
      if (p.at(i, c) > p.at(i, best)) best = c;
    hits += best == mixed.labels[i];
  }
  CHECK(evaluate_accuracy(model, mixed, classes) == doctest::Approx(hits / 10.0));
  CHECK_THROWS(evaluate_accuracy(model, LabeledBatch{}, classes));
}

TEST_CASE("encoder save and load") {
  DualEncoder model({}, 10);
  model.register_classes(kTwo);
  const auto dir = std::filesystem::temp_directory_path() / "loraloop_vlm_roundtrip";
  std::filesystem::remove_all(dir);
  save_encoder(dir, model, kTwo);

  DualEncoder other({}, 99);
  auto classes = load_encoder(dir, other);
  CHECK(classes == kTwo);
  CHECK(other.vocabulary().tokens() == model.vocabulary().tokens());
  CHECK(num::checkpoint_hash(other.params()) == num::checkpoint_hash(model.params()));
  auto x = random_images(3, 256, 1);
  CHECK(class_probabilities(other, x, kTwo) == class_probabilities(model, x, kTwo));
  std::filesystem::remove_all(dir);
}

TEST_CASE("pretraining on the base pool builds a usable prior") {
  taskgen::SuiteConfig cfg;
  cfg.seed = 2;
  cfg.train_per_class = 40;
  cfg.test_per_class = 10;
  auto suite = taskgen::make_suite(cfg);
  DualEncoder model({}, 3);
  model.register_classes(suite.all_classes());
  const double before = evaluate_accuracy(model, suite.base.test, suite.base.classes);
  num::RngStream rng(3, 1);
  PretrainConfig pc;
  pc.steps = 300;
  pretrain(model, suite.base.train, suite.base.classes, pc, rng);
  const double after = evaluate_accuracy(model, suite.base.test, suite.base.classes);
  MESSAGE("base accuracy " << before << " -> " << after);
  CHECK(after > 0.8);
  CHECK(after > before);
}
