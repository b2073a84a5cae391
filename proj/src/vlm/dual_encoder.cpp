#include "loraloop/vlm/dual_encoder.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace loraloop::vlm {

namespace {

constexpr const char* kOrder[] = {"img.w1", "img.b1", "img.w2", "img.b2", "img.w3", "img.b3",
                                  "txt.tok", "txt.w1", "txt.b1", "txt.w2", "txt.b2", "log_tau"};

num::Tensor gaussian(num::RngStream& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal() * stddev;
  return num::Tensor({rows, cols}, std::move(v));
}

num::Tensor zeros_row(std::size_t n) { return num::Tensor({1, n}, std::vector<double>(n, 0.0)); }

// Token rows depend only on the seed and the token text, so a vocabulary
// grown in a different order still gives every token the same embedding.
num::Tensor token_row(std::uint64_t seed, const std::string& token, std::size_t dim) {
  num::RngStream rng(seed, num::stream_id("vlm.token", {num::fnv1a(token)}));
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return num::Tensor({1, dim}, std::move(v));
}

BoundEncoder assemble(const DualEncoder& model, std::vector<std::pair<std::string, num::Var>> named) {
  BoundEncoder b;
  b.model = &model;
  auto at = [&](std::size_t i) { return named[i].second; };
  b.img_w1 = at(0);
  b.img_b1 = at(1);
  b.img_w2 = at(2);
  b.img_b2 = at(3);
  b.img_w3 = at(4);
  b.img_b3 = at(5);
  b.tokens = at(6);
  b.txt_w1 = at(7);
  b.txt_b1 = at(8);
  b.txt_w2 = at(9);
  b.txt_b2 = at(10);
  b.log_tau = at(11);
  b.named = std::move(named);
  return b;
}

// Mean-pooling matrix: row i averages the token rows of prompts[i].
num::Tensor pooling_matrix(std::span<const text::TokenSeq> prompts, std::size_t vocab) {
  if (prompts.empty()) throw std::invalid_argument("encode_text: no prompts");
  std::vector<double> p(prompts.size() * vocab, 0.0);
  for (std::size_t i = 0; i < prompts.size(); ++i) {
    if (prompts[i].empty()) throw std::invalid_argument("encode_text: empty prompt");
    const double w = 1.0 / static_cast<double>(prompts[i].size());
    for (auto t : prompts[i]) {
      if (t >= vocab) throw std::out_of_range("encode_text: token id out of range");
      p[i * vocab + t] += w;
    }
  }
  return num::Tensor({prompts.size(), vocab}, std::move(p));
}

std::vector<text::TokenSeq> prompts_for(const DualEncoder& model, std::span<const std::string> classes) {
  std::vector<text::TokenSeq> out;
  out.reserve(classes.size());
  for (const auto& c : classes) out.push_back(model.prompt_tokens(c));
  return out;
}

constexpr std::size_t kEvalChunk = 256;

}  // namespace

DualEncoder::DualEncoder(DualEncoderConfig config, std::uint64_t seed)
    : config_(std::move(config)), seed_(seed), prompt_(config_.prompt) {
  if (!(config_.init_tau > 0.0) || !(config_.tau_min > 0.0) || config_.tau_min > config_.tau_max)
    throw std::invalid_argument("DualEncoder: invalid temperature settings");
  const auto& c = config_;
  num::RngStream rng(seed, num::stream_id("vlm.init"));
  const auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  const auto lecun = [](std::size_t fan_in) { return std::sqrt(1.0 / static_cast<double>(fan_in)); };
  params_.add("img.w1", gaussian(rng, c.hidden, c.pixels, he(c.pixels)));
  params_.add("img.b1", zeros_row(c.hidden));
  params_.add("img.w2", gaussian(rng, c.hidden, c.hidden, he(c.hidden)));
  params_.add("img.b2", zeros_row(c.hidden));
  params_.add("img.w3", gaussian(rng, c.embed_dim, c.hidden, lecun(c.hidden)));
  params_.add("img.b3", zeros_row(c.embed_dim));

  // The table starts with the template's own tokens so it is never empty.
  std::vector<double> tok;
  for (const auto& t : text::split_tokens(prompt_.fill(""))) {
    if (vocab_.find(t)) continue;
    vocab_.add(t);
    auto row = token_row(seed_, t, c.token_dim);
    tok.insert(tok.end(), row.values().begin(), row.values().end());
  }
  if (vocab_.size() == 0) throw std::invalid_argument("DualEncoder: prompt template has no fixed tokens");
  params_.add("txt.tok", num::Tensor({vocab_.size(), c.token_dim}, std::move(tok)));
  params_.add("txt.w1", gaussian(rng, c.text_hidden, c.token_dim, lecun(c.token_dim)));
  params_.add("txt.b1", zeros_row(c.text_hidden));
  params_.add("txt.w2", gaussian(rng, c.embed_dim, c.text_hidden, lecun(c.text_hidden)));
  params_.add("txt.b2", zeros_row(c.embed_dim));
  params_.add("log_tau", num::Tensor::scalar(std::log(c.init_tau)), c.learn_tau);
  clamp_tau();
}

text::TokenSeq DualEncoder::tokenize(std::string_view class_name) {
  text::TokenSeq out;
  for (const auto& t : text::split_tokens(prompt_.fill(class_name))) {
    if (auto id = vocab_.find(t)) {
      out.push_back(*id);
      continue;
    }
    out.push_back(vocab_.add(t));
    params_.append_rows("txt.tok", token_row(seed_, t, config_.token_dim));
  }
  return out;
}

text::TokenSeq DualEncoder::prompt_tokens(std::string_view class_name) const {
  return tokenize_prompt(prompt_.fill(class_name));
}

text::TokenSeq DualEncoder::tokenize_prompt(std::string_view prompt) const {
  text::TokenSeq out;
  for (const auto& t : text::split_tokens(prompt)) {
    auto id = vocab_.find(t);
    if (!id) throw std::invalid_argument("unknown token '" + t + "' in prompt '" + std::string(prompt) + "'");
    out.push_back(*id);
  }
  if (out.empty()) throw std::invalid_argument("empty prompt");
  return out;
}

void DualEncoder::register_classes(std::span<const std::string> class_names) {
  for (const auto& c : class_names) tokenize(c);
}

double DualEncoder::tau() const { return std::exp(params_.get("log_tau").item()); }

void DualEncoder::clamp_tau() {
  auto& lt = params_.get("log_tau");
  lt[0] = std::clamp(lt.item(), std::log(config_.tau_min), std::log(config_.tau_max));
}

void DualEncoder::set_learn_tau(bool learn) {
  config_.learn_tau = learn;
  params_.set_trainable("log_tau", learn);
}

BoundEncoder DualEncoder::bind_trainable(num::Tape& tape) {
  std::vector<std::pair<std::string, num::Var>> named;
  for (const char* name : kOrder) {
    auto& t = params_.get(name);
    named.emplace_back(name, params_.trainable(name) ? tape.param(t) : tape.constant_ref(t));
  }
  return assemble(*this, std::move(named));
}

BoundEncoder DualEncoder::bind_frozen(num::Tape& tape) const {
  std::vector<std::pair<std::string, num::Var>> named;
  for (const char* name : kOrder) named.emplace_back(name, tape.constant_ref(params_.get(name)));
  return assemble(*this, std::move(named));
}

void DualEncoder::load(std::vector<std::string> vocabulary, const num::NamedTensors& tensors) {
  text::Vocabulary vocab;
  for (const auto& t : vocabulary) vocab.add(t);
  num::ParamStore store;
  for (const char* name : kOrder) {
    auto it = std::find_if(tensors.begin(), tensors.end(), [&](const auto& p) { return p.first == name; });
    if (it == tensors.end()) throw std::runtime_error(std::string("encoder checkpoint lacks ") + name);
    if (it->second.shape() != params_.get(name).shape() && std::string(name) != "txt.tok")
      throw num::ShapeError(std::string("encoder checkpoint: shape mismatch for ") + name + ": " +
                            num::shape_string(it->second.shape()) + " vs " +
                            num::shape_string(params_.get(name).shape()));
    store.add(name, it->second, params_.trainable(name));
  }
  if (tensors.size() != std::size(kOrder))
    throw std::runtime_error("encoder checkpoint has unexpected tensors");
  const auto& tok = store.get("txt.tok");
  if (tok.rank() != 2 || tok.rows() != vocab.size() || tok.cols() != config_.token_dim)
    throw num::ShapeError("encoder checkpoint: token table " + num::shape_string(tok.shape()) +
                          " does not match a vocabulary of " + std::to_string(vocab.size()));
  vocab_ = std::move(vocab);
  params_ = std::move(store);
}

num::Var encode_image(const BoundEncoder& e, num::Var images) {
  auto h = num::relu(num::linear(images, e.img_w1) + e.img_b1);
  h = num::relu(num::linear(h, e.img_w2) + e.img_b2);
  return num::linear(h, e.img_w3) + e.img_b3;
}

num::Var encode_text(const BoundEncoder& e, std::span<const text::TokenSeq> prompts) {
  auto& tape = e.tokens.tape();
  auto pool = tape.constant(pooling_matrix(prompts, e.tokens.value().rows()));
  auto pooled = num::matmul(pool, e.tokens);
  auto h = num::tanh(num::linear(pooled, e.txt_w1) + e.txt_b1);
  return num::linear(h, e.txt_w2) + e.txt_b2;
}

num::Var class_logits(const BoundEncoder& e, num::Var image_emb, num::Var text_emb) {
  auto sims = num::matmul(num::normalize_rows(image_emb), num::transpose(num::normalize_rows(text_emb)));
  return sims * num::exp(num::neg(e.log_tau));
}

double cosine(std::span<const double> a, std::span<const double> b) {
  if (a.size() != b.size())
    throw num::ShapeError("cosine: lengths " + std::to_string(a.size()) + " and " + std::to_string(b.size()));
  double dot = 0.0, na = 0.0, nb = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    dot += a[i] * b[i];
    na += a[i] * a[i];
    nb += b[i] * b[i];
  }
  if (na == 0.0 || nb == 0.0) throw num::NumericError("cosine: zero-norm embedding");
  return dot / (std::sqrt(na) * std::sqrt(nb));
}

num::Tensor encode_image(const DualEncoder& model, const num::Tensor& images) {
  std::vector<num::Tensor> parts;
  for (std::size_t r = 0; r < images.rows(); r += kEvalChunk) {
    num::Tape tape;
    auto enc = model.bind_frozen(tape);
    auto x = tape.constant(images.slice_rows(r, std::min(images.rows(), r + kEvalChunk)));
    parts.push_back(encode_image(enc, x).value());
  }
  return num::concat_rows(parts);
}

num::Tensor encode_text(const DualEncoder& model, std::span<const std::string> class_names) {
  num::Tape tape;
  auto enc = model.bind_frozen(tape);
  auto prompts = prompts_for(model, class_names);
  return encode_text(enc, prompts).value();
}

num::Tensor class_probabilities(const DualEncoder& model, const num::Tensor& images,
                                std::span<const std::string> class_names) {
  const auto prompts = prompts_for(model, class_names);
  std::vector<num::Tensor> parts;
  for (std::size_t r = 0; r < images.rows(); r += kEvalChunk) {
    num::Tape tape;
    auto enc = model.bind_frozen(tape);
    auto x = tape.constant(images.slice_rows(r, std::min(images.rows(), r + kEvalChunk)));
    auto logits = class_logits(enc, encode_image(enc, x), encode_text(enc, prompts));
    parts.push_back(num::softmax(logits).value());
  }
  return num::concat_rows(parts);
}

double confidence(const DualEncoder& model, const num::Tensor& sample, const text::TokenSeq& prompt) {
  const num::Tensor row = sample.rank() == 1 ? sample.reshaped({1, sample.size()}) : sample;
  if (row.rows() != 1) throw num::ShapeError("confidence: expected one sample, got " + num::shape_string(sample.shape()));
  const std::vector<text::TokenSeq> prompts{prompt};
  return confidences(model, row, prompts).front();
}

std::vector<double> confidences(const DualEncoder& model, const num::Tensor& samples,
                                std::span<const text::TokenSeq> prompts) {
  if (samples.rows() != prompts.size())
    throw num::ShapeError("confidences: " + std::to_string(samples.rows()) + " samples but " +
                          std::to_string(prompts.size()) + " prompts");
  std::vector<double> out;
  out.reserve(prompts.size());
  for (std::size_t r = 0; r < samples.rows(); r += kEvalChunk) {
    const std::size_t end = std::min(samples.rows(), r + kEvalChunk);
    num::Tape tape;
    auto enc = model.bind_frozen(tape);
    auto z = encode_image(enc, tape.constant(samples.slice_rows(r, end)));
    auto w = encode_text(enc, prompts.subspan(r, end - r));
    const auto& zv = z.value();
    const auto& wv = w.value();
    const std::size_t d = zv.cols();
    for (std::size_t i = 0; i < end - r; ++i)
      out.push_back(cosine(zv.values().subspan(i * d, d), wv.values().subspan(i * d, d)));
  }
  return out;
}

std::vector<std::size_t> predict(const DualEncoder& model, const num::Tensor& images,
                                 std::span<const std::string> class_names) {
  const auto probs = class_probabilities(model, images, class_names);
  std::vector<std::size_t> out(probs.rows());
  for (std::size_t i = 0; i < probs.rows(); ++i) {
    std::size_t best = 0;
    for (std::size_t c = 1; c < probs.cols(); ++c)
      if (probs.at(i, c) > probs.at(i, best)) best = c;
    out[i] = best;
  }
  return out;
}

double evaluate_accuracy(const DualEncoder& model, const Dataset& data,
                         std::span<const std::string> class_names) {
  if (data.empty()) throw std::invalid_argument("evaluate_accuracy: empty dataset");
  const auto pred = predict(model, data.images, class_names);
  std::size_t hits = 0;
  for (std::size_t i = 0; i < pred.size(); ++i) hits += pred[i] == data.labels[i];
  return static_cast<double>(hits) / static_cast<double>(pred.size());
}

double train_step(DualEncoder& model, const LossFn& loss, const num::AdamWConfig& opt,
                  const AfterBackward& after_backward) {
  auto& params = model.params();
  params.zero_grad();
  num::Tape tape;
  auto enc = model.bind_trainable(tape);
  auto total = loss(tape, enc);
  const double value = total.value().item();
  tape.backward(total);
  if (after_backward) after_backward(params);
  num::adamw_step(params, opt);
  params.clear_grad();
  model.clamp_tau();
  return value;
}

num::Var supervised_loss(num::Tape& tape, const BoundEncoder& enc, const LabeledBatch& batch,
                         std::span<const std::string> class_names) {
  if (batch.empty()) throw std::invalid_argument("supervised_loss: empty batch");
  for (auto l : batch.labels)
    if (l >= class_names.size()) throw std::out_of_range("supervised_loss: label outside class list");
  const auto prompts = prompts_for(*enc.model, class_names);
  auto logits = class_logits(enc, encode_image(enc, tape.constant_ref(batch.images)), encode_text(enc, prompts));
  return num::cross_entropy(logits, batch.labels);
}

double finetune_step(DualEncoder& model, const LabeledBatch& batch,
                     std::span<const std::string> class_names, const num::AdamWConfig& opt,
                     const LossFn& extra_loss) {
  return train_step(model, [&](num::Tape& tape, const BoundEncoder& enc) {
    auto l = supervised_loss(tape, enc, batch, class_names);
    if (extra_loss) {
      auto extra = extra_loss(tape, enc);
      if (extra.valid()) l = l + extra;
    }
    return l;
  }, opt);
}

void pretrain(DualEncoder& model, const Dataset& data, std::span<const std::string> class_names,
              const PretrainConfig& config, num::RngStream& rng) {
  if (data.empty()) throw std::invalid_argument("pretrain: empty dataset");
  model.register_classes(class_names);
  const std::size_t batch = std::min(config.batch, data.size());
  std::vector<std::size_t> order;
  std::size_t cursor = data.size();
  for (std::size_t step = 0; step < config.steps; ++step) {
    if (cursor + batch > order.size()) {
      order = rng.permutation(data.size());
      cursor = 0;
    }
    std::span<const std::size_t> rows(order.data() + cursor, batch);
    cursor += batch;
    finetune_step(model, data.subset(rows), class_names, config.opt);
  }
}

namespace {

void write_lines(const std::filesystem::path& path, std::span<const std::string> lines) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write " + path.string());
  for (const auto& l : lines) out << l << '\n';
}

std::vector<std::string> read_lines(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot read " + path.string());
  std::vector<std::string> out;
  for (std::string line; std::getline(in, line);)
    if (!line.empty()) out.push_back(line);
  return out;
}

}  // namespace

void save_encoder(const std::filesystem::path& dir, const DualEncoder& model,
                  std::span<const std::string> class_names) {
  std::filesystem::create_directories(dir);
  num::save_checkpoint(dir / "encoder.llcp", num::to_named(model.params()));
  write_lines(dir / "vocab.txt", model.vocabulary().tokens());
  write_lines(dir / "classes.txt", class_names);
}

std::vector<std::string> load_encoder(const std::filesystem::path& dir, DualEncoder& model) {
  model.load(read_lines(dir / "vocab.txt"), num::load_checkpoint(dir / "encoder.llcp"));
  return read_lines(dir / "classes.txt");
}

}  // namespace loraloop::vlm
