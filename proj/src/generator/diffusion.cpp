#include "loraloop/generator/diffusion.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <stdexcept>

namespace loraloop::gen {

namespace {

constexpr std::size_t kChunk = 128;

num::Tensor gaussian(num::RngStream& rng, std::size_t rows, std::size_t cols, double stddev) {
  std::vector<double> v(rows * cols);
  for (auto& x : v) x = rng.normal() * stddev;
  return num::Tensor({rows, cols}, std::move(v));
}

num::Tensor zeros_row(std::size_t n) { return num::Tensor({1, n}, std::vector<double>(n, 0.0)); }

num::Tensor token_row(std::uint64_t seed, const std::string& token, std::size_t dim) {
  num::RngStream rng(seed, num::stream_id("gen.token", {num::fnv1a(token)}));
  std::vector<double> v(dim);
  for (auto& x : v) x = rng.normal();
  return num::Tensor({1, dim}, std::move(v));
}

num::Var layer(const BoundDenoiser& d, std::size_t i, num::Var x) {
  auto y = num::linear(x, d.w[i]);
  if (d.deltas[i]) {
    const auto& delta = *d.deltas[i];
    auto low = num::linear(num::linear(x, delta.b), delta.a);
    y = y + (delta.scale == 1.0 ? low : num::scale(low, delta.scale));
  }
  return y + d.b[i];
}

std::vector<std::size_t> request_condition(const GeneratorModel& model, const SampleRequest& r) {
  if (r.class_name.empty()) return {0};
  return model.condition_rows(r.class_name);
}

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

// Runs the reverse process for up to kChunk requests. With `guided` false only
// the unconditional branch is evaluated.
std::vector<num::Tensor> reverse_chunk(const GeneratorView& view, std::span<const SampleRequest> requests,
                                       double guidance, bool guided, const StepObserver& observer) {
  const auto& model = *view.base;
  const auto& sched = model.schedule();
  const std::size_t n = requests.size();
  const std::size_t d = model.config().pixels;

  std::vector<num::RngStream> rngs;
  rngs.reserve(n);
  std::vector<std::vector<std::size_t>> conds;
  std::vector<double> x(n * d);
  for (std::size_t i = 0; i < n; ++i) {
    rngs.emplace_back(requests[i].seed, num::stream_id("gen.sample"));
    for (std::size_t k = 0; k < d; ++k) x[i * d + k] = rngs[i].normal();
  }
  std::vector<std::vector<std::size_t>> uncond(n, std::vector<std::size_t>{0});
  if (guided) {
    conds = uncond;
    for (const auto& r : requests) conds.push_back(request_condition(model, r));
  } else {
    conds = uncond;
  }
  const std::size_t rows = conds.size();

  for (std::size_t t = sched.steps(); t >= 1; --t) {
    num::Tape tape;
    auto den = bind_view(view, tape);
    std::vector<double> xin(rows * d);
    for (std::size_t r = 0; r < rows; ++r)
      std::copy_n(x.begin() + static_cast<std::ptrdiff_t>((r % n) * d), d, xin.begin() + static_cast<std::ptrdiff_t>(r * d));
    std::vector<std::size_t> ts(rows, t);
    auto eps_all = predict_noise(den, tape.constant(num::Tensor({rows, d}, std::move(xin))), ts, conds).value();

    num::Tensor eps_u = eps_all.slice_rows(0, n);
    num::Tensor eps_c = guided ? eps_all.slice_rows(n, 2 * n) : eps_u;
    num::Tensor eps = eps_u;
    if (guided) {
      auto e = eps.values();
      const auto eu = eps_u.values();
      const auto ec = eps_c.values();
      for (std::size_t k = 0; k < e.size(); ++k) e[k] = (1.0 - guidance) * eu[k] + guidance * ec[k];
    }
    if (observer) observer(t, eps_u, eps_c, eps);

    const double ab = sched.alpha_bar(t);
    const double ab_prev = sched.alpha_bar(t - 1);
    const double beta = sched.beta(t);
    const double c1 = beta * std::sqrt(ab_prev) / (1.0 - ab);
    const double c2 = (1.0 - ab_prev) * std::sqrt(sched.alpha(t)) / (1.0 - ab);
    const double sigma = std::sqrt(beta * (1.0 - ab_prev) / (1.0 - ab));
    const auto ev = eps.values();
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t k = 0; k < d; ++k) {
        const std::size_t j = i * d + k;
        double x0 = (x[j] - std::sqrt(1.0 - ab) * ev[j]) / std::sqrt(ab);
        x0 = std::clamp(x0, -1.0, 1.0);
        double next = c1 * x0 + c2 * x[j];
        if (t > 1) next += sigma * rngs[i].normal();
        x[j] = next;
      }
    }
  }

  std::vector<num::Tensor> out;
  out.reserve(n);
  for (std::size_t i = 0; i < n; ++i) {
    std::vector<double> img(d);
    for (std::size_t k = 0; k < d; ++k) img[k] = std::clamp((x[i * d + k] + 1.0) * 0.5, 0.0, 1.0);
    out.emplace_back(num::Shape{d}, std::move(img));
  }
  return out;
}

}  // namespace

NoiseSchedule::NoiseSchedule(std::size_t steps, double beta_start, double beta_end) {
  if (steps == 0) throw std::invalid_argument("NoiseSchedule: steps must be positive");
  if (!(beta_start > 0.0) || !(beta_end < 1.0) || beta_start > beta_end)
    throw std::invalid_argument("NoiseSchedule: need 0 < beta_start <= beta_end < 1");
  betas_.resize(steps);
  for (std::size_t i = 0; i < steps; ++i) {
    const double f = steps == 1 ? 0.0 : static_cast<double>(i) / static_cast<double>(steps - 1);
    betas_[i] = beta_start + f * (beta_end - beta_start);
  }
  alpha_bar_.resize(steps + 1);
  alpha_bar_[0] = 1.0;
  for (std::size_t t = 1; t <= steps; ++t) alpha_bar_[t] = alpha_bar_[t - 1] * (1.0 - betas_[t - 1]);
}

double NoiseSchedule::beta(std::size_t t) const {
  if (t < 1 || t > steps()) throw std::out_of_range("NoiseSchedule: t=" + std::to_string(t) + " outside 1.." + std::to_string(steps()));
  return betas_[t - 1];
}

double NoiseSchedule::alpha_bar(std::size_t t) const {
  if (t > steps()) throw std::out_of_range("NoiseSchedule: t=" + std::to_string(t) + " outside 0.." + std::to_string(steps()));
  return alpha_bar_[t];
}

num::Tensor q_sample(const NoiseSchedule& schedule, const num::Tensor& x0, std::size_t t, const num::Tensor& noise) {
  if (x0.shape() != noise.shape())
    throw num::ShapeError("q_sample: x0 " + num::shape_string(x0.shape()) + " vs noise " + num::shape_string(noise.shape()));
  const double ab = schedule.alpha_bar(t);
  const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
  num::Tensor out = x0;
  auto o = out.values();
  const auto n = noise.values();
  for (std::size_t i = 0; i < o.size(); ++i) o[i] = a * o[i] + s * n[i];
  return out;
}

GeneratorModel::GeneratorModel(GeneratorConfig config, std::uint64_t seed)
    : config_(std::move(config)),
      seed_(seed),
      schedule_(config_.steps, config_.beta_start, config_.beta_end),
      prompt_(config_.prompt) {
  const auto& c = config_;
  num::RngStream rng(seed, num::stream_id("gen.init"));
  const std::size_t in = c.pixels + c.time_dim + c.cond_dim;
  const auto he = [](std::size_t fan_in) { return std::sqrt(2.0 / static_cast<double>(fan_in)); };
  params_.add("den.w1", gaussian(rng, c.hidden, in, he(in)));
  params_.add("den.b1", zeros_row(c.hidden));
  params_.add("den.w2", gaussian(rng, c.hidden, c.hidden, he(c.hidden)));
  params_.add("den.b2", zeros_row(c.hidden));
  params_.add("den.w3", gaussian(rng, c.pixels, c.hidden, std::sqrt(1.0 / static_cast<double>(c.hidden))));
  params_.add("den.b3", zeros_row(c.pixels));
  params_.add("cond.table", token_row(seed_, "<uncond>", c.cond_dim));
}

void GeneratorModel::register_classes(std::span<const std::string> class_names) {
  for (const auto& name : class_names) {
    for (const auto& t : text::split_tokens(name)) {
      if (vocab_.find(t)) continue;
      vocab_.add(t);
      params_.append_rows("cond.table", token_row(seed_, t, config_.cond_dim));
    }
  }
}

bool GeneratorModel::knows(std::string_view class_name) const {
  const auto toks = text::split_tokens(class_name);
  return !toks.empty() && std::all_of(toks.begin(), toks.end(), [&](const auto& t) { return vocab_.find(t).has_value(); });
}

std::vector<std::size_t> GeneratorModel::condition_rows(std::string_view class_name) const {
  std::vector<std::size_t> rows;
  for (const auto& t : text::split_tokens(class_name)) {
    auto id = vocab_.find(t);
    if (!id) throw std::invalid_argument("generator: unknown class token '" + t + "' in '" + std::string(class_name) + "'");
    rows.push_back(*id + 1);
  }
  if (rows.empty()) throw std::invalid_argument("generator: empty class name");
  return rows;
}

void GeneratorModel::load(std::vector<std::string> vocabulary, const num::NamedTensors& tensors) {
  text::Vocabulary vocab;
  for (const auto& t : vocabulary) vocab.add(t);
  num::ParamStore store;
  for (const auto& [name, t] : tensors) {
    if (!params_.contains(name)) throw std::runtime_error("generator checkpoint: unexpected tensor " + name);
    if (name != "cond.table" && t.shape() != params_.get(name).shape())
      throw num::ShapeError("generator checkpoint: shape mismatch for " + name + ": " + num::shape_string(t.shape()) +
                            " vs " + num::shape_string(params_.get(name).shape()));
    store.add(name, t);
  }
  if (store.size() != params_.size()) throw std::runtime_error("generator checkpoint: missing tensors");
  const auto& table = store.get("cond.table");
  if (table.rows() != vocab.size() + 1 || table.cols() != config_.cond_dim)
    throw num::ShapeError("generator checkpoint: condition table " + num::shape_string(table.shape()) +
                          " does not match a vocabulary of " + std::to_string(vocab.size()));
  vocab_ = std::move(vocab);
  params_ = std::move(store);
}

GeneratorView base_view(const GeneratorModel& model) { return GeneratorView{&model, {}, "base"}; }

BoundDenoiser bind_view(const GeneratorView& view, num::Tape& tape) {
  if (view.base == nullptr) throw std::invalid_argument("bind_view: view has no base generator");
  const auto& p = view.base->params();
  BoundDenoiser d;
  d.schedule = &view.base->schedule();
  d.sigma_data = view.base->config().sigma_data;
  for (std::size_t i = 0; i < 3; ++i) {
    d.w[i] = tape.constant_ref(p.get(kDenoiserLayers[i]));
    d.b[i] = tape.constant_ref(p.get(kDenoiserBiases[i]));
  }
  d.table = tape.constant_ref(p.get("cond.table"));
  if (view.delta) d.deltas = view.delta(tape);
  return d;
}

BoundDenoiser bind_trainable(GeneratorModel& model, num::Tape& tape) {
  auto& p = model.params();
  BoundDenoiser d;
  d.schedule = &model.schedule();
  d.sigma_data = model.config().sigma_data;
  for (std::size_t i = 0; i < 3; ++i) {
    d.w[i] = tape.param(p.get(kDenoiserLayers[i]));
    d.b[i] = tape.param(p.get(kDenoiserBiases[i]));
  }
  d.table = tape.param(p.get("cond.table"));
  return d;
}

num::Tensor time_embedding(std::span<const std::size_t> t, std::size_t dim) {
  if (dim % 2 != 0) throw std::invalid_argument("time_embedding: dim must be even");
  const std::size_t half = dim / 2;
  std::vector<double> v(t.size() * dim);
  for (std::size_t r = 0; r < t.size(); ++r) {
    for (std::size_t i = 0; i < half; ++i) {
      const double freq = std::exp(-std::log(1000.0) * static_cast<double>(i) / static_cast<double>(half));
      const double a = static_cast<double>(t[r]) * freq;
      v[r * dim + i] = std::sin(a);
      v[r * dim + half + i] = std::cos(a);
    }
  }
  return num::Tensor({t.size(), dim}, std::move(v));
}

num::Tensor condition_pooling(std::span<const std::vector<std::size_t>> conds, std::size_t table_rows) {
  if (conds.empty()) throw std::invalid_argument("condition_pooling: empty batch");
  std::vector<double> p(conds.size() * table_rows, 0.0);
  for (std::size_t i = 0; i < conds.size(); ++i) {
    if (conds[i].empty()) throw std::invalid_argument("condition_pooling: empty condition");
    const double w = 1.0 / static_cast<double>(conds[i].size());
    for (auto r : conds[i]) {
      if (r >= table_rows) throw std::out_of_range("condition_pooling: row outside condition table");
      p[i * table_rows + r] += w;
    }
  }
  return num::Tensor({conds.size(), table_rows}, std::move(p));
}

num::Var predict_noise(const BoundDenoiser& den, num::Var x_t, std::span<const std::size_t> t,
                       std::span<const std::vector<std::size_t>> conds) {
  auto& tape = x_t.tape();
  const std::size_t rows = x_t.value().rows();
  if (t.size() != rows || conds.size() != rows)
    throw num::ShapeError("predict_noise: " + std::to_string(rows) + " rows but " + std::to_string(t.size()) +
                          " times and " + std::to_string(conds.size()) + " conditions");
  const std::size_t time_dim = den.w[0].value().cols() - x_t.value().cols() - den.table.value().cols();
  auto temb = tape.constant(time_embedding(t, time_dim));
  auto cond = num::matmul(tape.constant(condition_pooling(conds, den.table.value().rows())), den.table);
  const std::array<num::Var, 3> parts{x_t, temb, cond};
  auto h = num::relu(layer(den, 0, num::concat(parts, 1)));
  h = num::relu(layer(den, 1, h));
  const double sd = den.sigma_data;
  std::vector<double> cx(rows), cf(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double ab = den.schedule->alpha_bar(t[r]);
    const double sig = std::sqrt((1.0 - ab) / ab);
    cx[r] = sig / ((sig * sig + sd * sd) * std::sqrt(ab));
    cf[r] = -sd / std::sqrt(sig * sig + sd * sd);
  }
  return layer(den, 2, h) * tape.constant(num::Tensor({rows, 1}, std::move(cf))) +
         x_t * tape.constant(num::Tensor({rows, 1}, std::move(cx)));
}

num::Tensor to_model_space(const num::Tensor& images) {
  num::Tensor out = images;
  for (auto& v : out.values()) v = 2.0 * v - 1.0;
  return out;
}

num::Tensor to_image_space(const num::Tensor& x) {
  num::Tensor out = x;
  for (auto& v : out.values()) v = std::clamp((v + 1.0) * 0.5, 0.0, 1.0);
  return out;
}

DenoiseDraw draw_denoise_inputs(const NoiseSchedule& schedule, const num::Tensor& x0,
                                std::span<const std::vector<std::size_t>> conds, num::RngStream& rng,
                                double cond_dropout) {
  if (!(cond_dropout >= 0.0 && cond_dropout < 1.0)) throw std::invalid_argument("cond_dropout must be in [0,1)");
  const std::size_t n = x0.rows(), d = x0.cols();
  if (n == 0 || x0.size() == 0) throw std::invalid_argument("denoise_loss: empty batch");
  if (conds.size() != n) throw num::ShapeError("denoise_loss: conditions do not match the batch");
  DenoiseDraw draw;
  draw.t.resize(n);
  draw.dropped.resize(n);
  draw.conds.assign(conds.begin(), conds.end());
  for (std::size_t i = 0; i < n; ++i) {
    draw.t[i] = 1 + rng.index(schedule.steps());
    draw.dropped[i] = cond_dropout > 0.0 && rng.uniform() < cond_dropout;
    if (draw.dropped[i]) draw.conds[i] = {0};
  }
  std::vector<double> noise(n * d), xt(n * d);
  for (auto& z : noise) z = rng.normal();
  const auto xs = x0.values();
  for (std::size_t i = 0; i < n; ++i) {
    const double ab = schedule.alpha_bar(draw.t[i]);
    const double a = std::sqrt(ab), s = std::sqrt(1.0 - ab);
    for (std::size_t k = 0; k < d; ++k) xt[i * d + k] = a * (2.0 * xs[i * d + k] - 1.0) + s * noise[i * d + k];
  }
  draw.noise = num::Tensor({n, d}, std::move(noise));
  draw.x_t = num::Tensor({n, d}, std::move(xt));
  return draw;
}

double denoise_loss(const NoiseSchedule& schedule, const NoisePredictor& predict, const num::Tensor& x0,
                    std::span<const std::vector<std::size_t>> conds, num::RngStream& rng, double cond_dropout) {
  auto draw = draw_denoise_inputs(schedule, x0, conds, rng, cond_dropout);
  auto eps = predict(draw);
  if (eps.shape() != draw.noise.shape())
    throw num::ShapeError("denoise_loss: prediction " + num::shape_string(eps.shape()) + " vs noise " +
                          num::shape_string(draw.noise.shape()));
  double acc = 0.0;
  const auto e = eps.values(), z = draw.noise.values();
  for (std::size_t i = 0; i < e.size(); ++i) acc += (e[i] - z[i]) * (e[i] - z[i]);
  return acc / static_cast<double>(e.size());
}

num::Var denoise_loss(const BoundDenoiser& den, const NoiseSchedule& schedule, const num::Tensor& x0,
                      std::span<const std::vector<std::size_t>> conds, num::RngStream& rng, double cond_dropout) {
  auto& tape = den.w[0].tape();
  auto draw = draw_denoise_inputs(schedule, x0, conds, rng, cond_dropout);
  auto eps = predict_noise(den, tape.constant(std::move(draw.x_t)), draw.t, draw.conds);
  return num::mean(num::square(eps - tape.constant(std::move(draw.noise))));
}

std::vector<std::vector<std::size_t>> batch_conditions(const GeneratorModel& model, const LabeledBatch& batch,
                                                       std::span<const std::string> class_names) {
  std::vector<std::vector<std::size_t>> rows_by_class;
  rows_by_class.reserve(class_names.size());
  for (const auto& c : class_names) rows_by_class.push_back(model.condition_rows(c));
  std::vector<std::vector<std::size_t>> out;
  out.reserve(batch.size());
  for (auto l : batch.labels) out.push_back(rows_by_class.at(l));
  return out;
}

std::vector<double> train_generator(GeneratorModel& model, const Dataset& data,
                                    std::span<const std::string> class_names,
                                    const GeneratorTrainConfig& config, num::RngStream& rng) {
  std::vector<double> history;
  if (config.epochs == 0) return history;
  if (data.empty()) throw std::invalid_argument("train_generator: empty dataset");
  model.register_classes(class_names);
  const auto conds = batch_conditions(model, data, class_names);
  const std::size_t batch = std::max<std::size_t>(1, std::min(config.batch, data.size()));
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    const auto order = rng.permutation(data.size());
    double total = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += batch, ++steps) {
      const std::span<const std::size_t> rows(order.data() + start, std::min(batch, order.size() - start));
      auto sub = data.images.gather_rows(rows);
      std::vector<std::vector<std::size_t>> sub_conds;
      for (auto r : rows) sub_conds.push_back(conds[r]);
      model.params().zero_grad();
      try {
        num::Tape tape;
        auto den = bind_trainable(model, tape);
        auto loss = denoise_loss(den, model.schedule(), sub, sub_conds, rng, config.cond_dropout);
        total += loss.value().item();
        tape.backward(loss);
        num::adamw_step(model.params(), config.opt);
      } catch (const num::NumericError& e) {
        throw num::NumericError("generator training diverged at epoch " + std::to_string(epoch) + ", step " +
                                std::to_string(steps) + ": " + e.what());
      }
      model.params().clear_grad();
    }
    history.push_back(total / static_cast<double>(steps));
  }
  return history;
}

double evaluate_denoise_loss(const GeneratorView& view, const Dataset& data,
                             std::span<const std::string> class_names, std::uint64_t seed) {
  if (data.empty()) throw std::invalid_argument("evaluate_denoise_loss: empty dataset");
  const auto conds = batch_conditions(*view.base, data, class_names);
  num::RngStream rng(seed, num::stream_id("gen.eval"));
  double total = 0.0;
  for (std::size_t r = 0; r < data.size(); r += kChunk) {
    const std::size_t end = std::min(data.size(), r + kChunk);
    num::Tape tape;
    auto den = bind_view(view, tape);
    const std::span<const std::vector<std::size_t>> sub(conds.data() + r, end - r);
    auto loss = denoise_loss(den, view.base->schedule(), data.images.slice_rows(r, end), sub, rng, 0.0);
    total += loss.value().item() * static_cast<double>(end - r);
  }
  return total / static_cast<double>(data.size());
}

std::vector<GeneratedCandidate> sample_batch(const GeneratorView& view, std::span<const SampleRequest> requests,
                                             double guidance, const StepObserver& observer) {
  if (view.base == nullptr) throw std::invalid_argument("sample_batch: view has no base generator");
  if (!(guidance >= 0.0)) throw std::invalid_argument("sample_batch: guidance must be >= 0");
  for (const auto& r : requests)
    if (!r.class_name.empty()) (void)view.base->condition_rows(r.class_name);
  std::vector<GeneratedCandidate> out;
  out.reserve(requests.size());
  for (std::size_t start = 0; start < requests.size(); start += kChunk) {
    const auto chunk = requests.subspan(start, std::min(kChunk, requests.size() - start));
    auto samples = reverse_chunk(view, chunk, guidance, true, observer);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      GeneratedCandidate c;
      c.sample = std::move(samples[i]);
      c.class_name = chunk[i].class_name;
      c.prompt = view.base->prompt().fill(chunk[i].class_name);
      c.seed = chunk[i].seed;
      out.push_back(std::move(c));
    }
  }
  return out;
}

GeneratedCandidate sample_cfg(const GeneratorView& view, const std::string& class_name, double guidance,
                              std::uint64_t seed) {
  const SampleRequest req{class_name, seed};
  return std::move(sample_batch(view, std::span(&req, 1), guidance).front());
}

num::Tensor sample_unconditional(const GeneratorView& view, std::span<const std::uint64_t> seeds,
                                 const StepObserver& observer) {
  if (view.base == nullptr) throw std::invalid_argument("sample_unconditional: view has no base generator");
  if (seeds.empty()) throw std::invalid_argument("sample_unconditional: no seeds");
  std::vector<SampleRequest> requests;
  for (auto s : seeds) requests.push_back({"", s});
  std::vector<num::Tensor> rows;
  for (std::size_t start = 0; start < requests.size(); start += kChunk) {
    const auto chunk = std::span(requests).subspan(start, std::min(kChunk, requests.size() - start));
    for (auto& r : reverse_chunk(view, chunk, 0.0, false, observer)) rows.push_back(std::move(r));
  }
  return num::stack_rows(rows);
}

void save_generator(const std::filesystem::path& dir, const GeneratorModel& model) {
  std::filesystem::create_directories(dir);
  num::save_checkpoint(dir / "generator.llcp", num::to_named(model.params()));
  write_lines(dir / "generator_vocab.txt", model.vocabulary().tokens());
}

void load_generator(const std::filesystem::path& dir, GeneratorModel& model) {
  model.load(read_lines(dir / "generator_vocab.txt"), num::load_checkpoint(dir / "generator.llcp"));
}

}  // namespace loraloop::gen
