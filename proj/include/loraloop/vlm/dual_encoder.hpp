#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "loraloop/data.hpp"
#include "loraloop/numcore/checkpoint.hpp"
#include "loraloop/numcore/param_store.hpp"
#include "loraloop/numcore/rng.hpp"
#include "loraloop/numcore/tape.hpp"
#include "loraloop/text/prompt.hpp"

namespace loraloop::vlm {

struct DualEncoderConfig {
  std::size_t pixels = 256;
  std::size_t hidden = 64;       // image MLP width (two hidden layers)
  std::size_t embed_dim = 32;    // shared embedding size d_e
  std::size_t token_dim = 32;    // token embedding width
  std::size_t text_hidden = 64;  // text MLP width (one hidden layer)
  double init_tau = 0.07;
  double tau_min = 1e-3;
  double tau_max = 100.0;
  bool learn_tau = true;
  std::string prompt = "a photo of a {c}";
};

class DualEncoder;

/// Parameters of a DualEncoder bound onto a tape, either as trainable
/// parameters or as frozen constants.
struct BoundEncoder {
  const DualEncoder* model = nullptr;
  num::Var img_w1, img_b1, img_w2, img_b2, img_w3, img_b3;
  num::Var tokens, txt_w1, txt_b1, txt_w2, txt_b2;
  num::Var log_tau;
  /// (parameter name, bound var) in store order.
  std::vector<std::pair<std::string, num::Var>> named;
};

/// Toy CLIP: an MLP image tower and a token-pooling text tower that share an
/// embedding space, plus a learnable temperature stored as log τ.
class DualEncoder {
 public:
  DualEncoder(DualEncoderConfig config, std::uint64_t seed);

  [[nodiscard]] const DualEncoderConfig& config() const noexcept { return config_; }
  [[nodiscard]] const text::PromptTemplate& prompt() const noexcept { return prompt_; }
  [[nodiscard]] const text::Vocabulary& vocabulary() const noexcept { return vocab_; }
  [[nodiscard]] num::ParamStore& params() noexcept { return params_; }
  [[nodiscard]] const num::ParamStore& params() const noexcept { return params_; }
  [[nodiscard]] std::uint64_t seed() const noexcept { return seed_; }

  /// Tokenizes T(c); unseen tokens get fresh embedding rows.
  text::TokenSeq tokenize(std::string_view class_name);
  /// Tokenizes T(c) without growing the vocabulary; unknown tokens throw.
  [[nodiscard]] text::TokenSeq prompt_tokens(std::string_view class_name) const;
  /// Tokenizes an already filled prompt without growing the vocabulary.
  [[nodiscard]] text::TokenSeq tokenize_prompt(std::string_view prompt) const;
  void register_classes(std::span<const std::string> class_names);

  [[nodiscard]] double tau() const;
  void clamp_tau();
  void set_learn_tau(bool learn);

  BoundEncoder bind_trainable(num::Tape& tape);
  [[nodiscard]] BoundEncoder bind_frozen(num::Tape& tape) const;

  /// Replaces the vocabulary and every parameter (checkpoint restore).
  void load(std::vector<std::string> vocabulary, const num::NamedTensors& tensors);

 private:
  DualEncoderConfig config_;
  std::uint64_t seed_;
  text::PromptTemplate prompt_;
  text::Vocabulary vocab_;
  num::ParamStore params_;
};

// Taped building blocks.
num::Var encode_image(const BoundEncoder& enc, num::Var images);
num::Var encode_text(const BoundEncoder& enc, std::span<const text::TokenSeq> prompts);
/// cos(z, w) / τ for every (image, class) pair: [batch, classes].
num::Var class_logits(const BoundEncoder& enc, num::Var image_emb, num::Var text_emb);

// Gradient-free evaluation helpers.
/// Cosine similarity; a zero-norm operand is a NumericError.
double cosine(std::span<const double> a, std::span<const double> b);
num::Tensor encode_image(const DualEncoder& model, const num::Tensor& images);
num::Tensor encode_text(const DualEncoder& model, std::span<const std::string> class_names);
num::Tensor class_probabilities(const DualEncoder& model, const num::Tensor& images,
                                std::span<const std::string> class_names);
/// Cosine similarity between one sample's image embedding and a prompt's text embedding.
double confidence(const DualEncoder& model, const num::Tensor& sample, const text::TokenSeq& prompt);
/// Row-wise confidences: row i of `samples` against prompts[i].
std::vector<double> confidences(const DualEncoder& model, const num::Tensor& samples,
                                std::span<const text::TokenSeq> prompts);
/// Argmax class per row (ties go to the lowest class index).
std::vector<std::size_t> predict(const DualEncoder& model, const num::Tensor& images,
                                 std::span<const std::string> class_names);
double evaluate_accuracy(const DualEncoder& model, const Dataset& data,
                         std::span<const std::string> class_names);

using LossFn = std::function<num::Var(num::Tape&, const BoundEncoder&)>;
using AfterBackward = std::function<void(const num::ParamStore&)>;

/// Generic optimisation step: builds the loss, backpropagates, calls
/// `after_backward` with gradients populated, applies AdamW and clamps τ.
double train_step(DualEncoder& model, const LossFn& loss, const num::AdamWConfig& opt,
                  const AfterBackward& after_backward = {});

/// Cross-entropy over `class_names` plus an optional extra term built on the same tape.
double finetune_step(DualEncoder& model, const LabeledBatch& batch,
                     std::span<const std::string> class_names, const num::AdamWConfig& opt,
                     const LossFn& extra_loss = {});

num::Var supervised_loss(num::Tape& tape, const BoundEncoder& enc, const LabeledBatch& batch,
                         std::span<const std::string> class_names);

struct PretrainConfig {
  std::size_t steps = 1500;
  std::size_t batch = 64;
  num::AdamWConfig opt{.lr = 1e-3, .weight_decay = 1e-2};
};

/// Trains the model on the base pool so later tasks start from a zero-shot prior.
void pretrain(DualEncoder& model, const Dataset& data, std::span<const std::string> class_names,
              const PretrainConfig& config, num::RngStream& rng);

/// Writes encoder.llcp plus vocab.txt and classes.txt (one entry per line).
void save_encoder(const std::filesystem::path& dir, const DualEncoder& model,
                  std::span<const std::string> class_names);
/// Restores weights and vocabulary into `model`; returns the stored class list.
std::vector<std::string> load_encoder(const std::filesystem::path& dir, DualEncoder& model);

}  // namespace loraloop::vlm
