#include "audiosae/train.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <numeric>
#include <ostream>
#include <sstream>

namespace audiosae::train {

namespace {

std::string trim(const std::string& s) {
  const auto b = s.find_first_not_of(" \t\r");
  if (b == std::string::npos) return {};
  const auto e = s.find_last_not_of(" \t\r");
  return s.substr(b, e - b + 1);
}

bool parse_bool(const std::string& key, const std::string& v) {
  if (v == "true" || v == "1" || v == "yes") return true;
  if (v == "false" || v == "0" || v == "no") return false;
  throw ValidationError("config key '" + key + "' expects a boolean, got '" + v + "'");
}

double parse_double(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    const double out = std::stod(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "' expects a number, got '" + v + "'");
  }
}

std::uint64_t parse_uint(const std::string& key, const std::string& v) {
  try {
    std::size_t used = 0;
    if (!v.empty() && v.front() == '-') throw std::invalid_argument(v);
    const auto out = std::stoull(v, &used);
    if (used != v.size()) throw std::invalid_argument(v);
    return out;
  } catch (const std::exception&) {
    throw ValidationError("config key '" + key + "' expects a nonnegative integer, got '" + v + "'");
  }
}

}  // namespace

void TrainConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ValidationError("learning_rate must be > 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0) || !(beta2 >= 0.0 && beta2 < 1.0)) {
    throw ValidationError("Adam betas must lie in [0, 1)");
  }
  if (!(epsilon > 0.0)) throw ValidationError("epsilon must be > 0");
  if (total_steps == 0) throw ValidationError("total_steps must be > 0");
  if (!(decay_fraction > 0.0 && decay_fraction < 1.0)) throw ValidationError("decay_fraction must lie in (0, 1)");
  if (warmup_steps >= total_steps) throw ValidationError("warmup_steps must be < total_steps");
  if (batch_size == 0) throw ValidationError("batch_size must be > 0");
  if (k == 0) throw ValidationError("k must be >= 1");
  if (expansion == 0) throw ValidationError("expansion must be >= 1");
  if (k_start && *k_start < k) throw ValidationError("k_start must be >= k");
  if (buffer_batches == 0) throw ValidationError("buffer_batches must be > 0");
  if (log_every == 0 || alive_window == 0) throw ValidationError("log_every and alive_window must be > 0");
  if (activation == sae::ActivationKind::jump_relu) {
    throw ValidationError("JumpReLU is inference-only; train with batch_topk or topk");
  }
}

TrainConfig parse_config(std::istream& in) {
  TrainConfig c;
  std::string line;
  std::size_t line_no = 0;
  while (std::getline(in, line)) {
    ++line_no;
    if (const auto hash = line.find('#'); hash != std::string::npos) line.resize(hash);
    line = trim(line);
    if (line.empty()) continue;
    const auto eq = line.find('=');
    if (eq == std::string::npos) {
      throw ValidationError("config line " + std::to_string(line_no) + " is not 'key = value'");
    }
    const std::string key = trim(line.substr(0, eq));
    const std::string v = trim(line.substr(eq + 1));
    if (key == "learning_rate") c.learning_rate = parse_double(key, v);
    else if (key == "beta1") c.beta1 = parse_double(key, v);
    else if (key == "beta2") c.beta2 = parse_double(key, v);
    else if (key == "epsilon") c.epsilon = parse_double(key, v);
    else if (key == "total_steps") c.total_steps = parse_uint(key, v);
    else if (key == "warmup_steps") c.warmup_steps = parse_uint(key, v);
    else if (key == "decay_fraction") c.decay_fraction = parse_double(key, v);
    else if (key == "batch_size") c.batch_size = parse_uint(key, v);
    else if (key == "k") c.k = parse_uint(key, v);
    else if (key == "expansion") c.expansion = parse_uint(key, v);
    else if (key == "seed") c.seed = parse_uint(key, v);
    else if (key == "warmup_mode") {
      if (v == "anneal_k") c.warmup_mode = WarmupMode::anneal_k;
      else if (v == "none") c.warmup_mode = WarmupMode::none;
      else throw ValidationError("warmup_mode must be 'anneal_k' or 'none'");
    } else if (key == "k_start") c.k_start = parse_uint(key, v);
    else if (key == "activation") c.activation = sae::parse_activation_kind(v);
    else if (key == "input_normalization") c.input_normalization = parse_bool(key, v);
    else if (key == "buffer_batches") c.buffer_batches = parse_uint(key, v);
    else if (key == "pps_unit") c.pps_unit = store::parse_pps_unit(v);
    else if (key == "log_every") c.log_every = parse_uint(key, v);
    else if (key == "alive_window") c.alive_window = parse_uint(key, v);
    else throw ValidationError("unknown config key '" + key + "' on line " + std::to_string(line_no));
  }
  c.validate();
  return c;
}

TrainConfig load_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw ValidationError("cannot open config " + path.string());
  return parse_config(in);
}

std::string to_config_text(const TrainConfig& c) {
  std::ostringstream out;
  out.precision(17);
  out << "learning_rate = " << c.learning_rate << '\n'
      << "beta1 = " << c.beta1 << '\n'
      << "beta2 = " << c.beta2 << '\n'
      << "epsilon = " << c.epsilon << '\n'
      << "total_steps = " << c.total_steps << '\n'
      << "warmup_steps = " << c.warmup_steps << '\n'
      << "decay_fraction = " << c.decay_fraction << '\n'
      << "batch_size = " << c.batch_size << '\n'
      << "k = " << c.k << '\n'
      << "expansion = " << c.expansion << '\n'
      << "seed = " << c.seed << '\n'
      << "warmup_mode = " << (c.warmup_mode == WarmupMode::anneal_k ? "anneal_k" : "none") << '\n';
  if (c.k_start) out << "k_start = " << *c.k_start << '\n';
  out << "activation = " << sae::to_string(c.activation) << '\n'
      << "input_normalization = " << (c.input_normalization ? "true" : "false") << '\n'
      << "buffer_batches = " << c.buffer_batches << '\n'
      << "pps_unit = " << (c.pps_unit == store::PpsUnit::frames ? "frames" : "audios") << '\n'
      << "log_every = " << c.log_every << '\n'
      << "alive_window = " << c.alive_window << '\n';
  return out.str();
}

nlohmann::json to_json(const TrainConfig& c) {
  nlohmann::json j{{"learning_rate", c.learning_rate},
                   {"beta1", c.beta1},
                   {"beta2", c.beta2},
                   {"epsilon", c.epsilon},
                   {"total_steps", c.total_steps},
                   {"warmup_steps", c.warmup_steps},
                   {"decay_fraction", c.decay_fraction},
                   {"batch_size", c.batch_size},
                   {"k", c.k},
                   {"expansion", c.expansion},
                   {"seed", c.seed},
                   {"warmup_mode", c.warmup_mode == WarmupMode::anneal_k ? "anneal_k" : "none"},
                   {"activation", sae::to_string(c.activation)},
                   {"input_normalization", c.input_normalization},
                   {"buffer_batches", c.buffer_batches},
                   {"pps_unit", c.pps_unit == store::PpsUnit::frames ? "frames" : "audios"},
                   {"log_every", c.log_every},
                   {"alive_window", c.alive_window}};
  if (c.k_start) j["k_start"] = *c.k_start;
  return j;
}

double lr_at(const TrainConfig& config, std::size_t step) {
  if (step > config.total_steps) {
    throw ValidationError("step " + std::to_string(step) + " beyond total_steps");
  }
  const double total = static_cast<double>(config.total_steps);
  const double decay_start = total * (1.0 - config.decay_fraction);
  const double s = static_cast<double>(step);
  if (s <= decay_start) return config.learning_rate;
  return config.learning_rate * (total - s) / (total - decay_start);
}

std::size_t sparsity_k_at(const TrainConfig& config, std::size_t step, std::size_t latent_dim) {
  if (config.warmup_mode == WarmupMode::none || step >= config.warmup_steps) return config.k;
  const double start = static_cast<double>(config.k_start.value_or(latent_dim));
  const double target = static_cast<double>(config.k);
  const double t = static_cast<double>(step) / static_cast<double>(config.warmup_steps);
  return static_cast<std::size_t>(std::lround(start + (target - start) * t));
}

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> first,
                 std::span<float> second, std::uint64_t step, double lr, const AdamHyper& hyper) {
  if (param.size() != grad.size() || param.size() != first.size() || param.size() != second.size()) {
    throw ShapeError("adam_update: tensor sizes differ");
  }
  if (step == 0) throw ValidationError("adam_update: step counter starts at 1");
  for (float g : grad) {
    if (!std::isfinite(g)) throw RuntimeFailure("non-finite gradient passed to Adam");
  }
  const double bc1 = 1.0 - std::pow(hyper.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(hyper.beta2, static_cast<double>(step));
  for (std::size_t i = 0; i < param.size(); ++i) {
    const double g = grad[i];
    const double m = hyper.beta1 * first[i] + (1.0 - hyper.beta1) * g;
    const double v = hyper.beta2 * second[i] + (1.0 - hyper.beta2) * g * g;
    first[i] = static_cast<float>(m);
    second[i] = static_cast<float>(v);
    const double m_hat = m / bc1;
    const double v_hat = v / bc2;
    param[i] = static_cast<float>(param[i] - lr * m_hat / (std::sqrt(v_hat) + hyper.epsilon));
  }
}

namespace {

template <typename Tensor>
std::span<float> flat(Tensor& t) {
  return {t.data(), static_cast<std::size_t>(t.size())};
}
template <typename Tensor>
std::span<const float> flat(const Tensor& t) {
  return {t.data(), static_cast<std::size_t>(t.size())};
}

}  // namespace

AdamState AdamState::zeros_like(const sae::SaeModel& model) {
  AdamState s;
  for (auto* g : {&s.first, &s.second}) {
    g->encoder_weight = MatrixF::Zero(model.encoder_weight.rows(), model.encoder_weight.cols());
    g->encoder_bias = VectorF::Zero(model.encoder_bias.size());
    g->decoder_weight = MatrixF::Zero(model.decoder_weight.rows(), model.decoder_weight.cols());
    g->decoder_bias = VectorF::Zero(model.decoder_bias.size());
  }
  return s;
}

void adam_step(AdamState& state, sae::SaeModel& model, const sae::Gradients<float>& grads, double lr,
               const AdamHyper& hyper) {
  const std::uint64_t t = state.step + 1;
  adam_update(flat(model.encoder_weight), flat(grads.encoder_weight), flat(state.first.encoder_weight),
              flat(state.second.encoder_weight), t, lr, hyper);
  adam_update(flat(model.encoder_bias), flat(grads.encoder_bias), flat(state.first.encoder_bias),
              flat(state.second.encoder_bias), t, lr, hyper);
  adam_update(flat(model.decoder_weight), flat(grads.decoder_weight), flat(state.first.decoder_weight),
              flat(state.second.decoder_weight), t, lr, hyper);
  adam_update(flat(model.decoder_bias), flat(grads.decoder_bias), flat(state.first.decoder_bias),
              flat(state.second.decoder_bias), t, lr, hyper);
  state.step = t;
}

// ---------------------------------------------------------------------------
// Alive tracking
// ---------------------------------------------------------------------------

void AliveTracker::observe(const MatrixF& codes) {
  if (static_cast<std::size_t>(codes.cols()) != fired_.size()) throw ShapeError("alive tracker: width mismatch");
  for (Eigen::Index r = 0; r < codes.rows(); ++r) {
    for (Eigen::Index j = 0; j < codes.cols(); ++j) {
      if (codes(r, j) != 0.0f) fired_[static_cast<std::size_t>(j)] = true;
    }
  }
}

std::size_t AliveTracker::alive_count() const {
  return static_cast<std::size_t>(std::count(fired_.begin(), fired_.end(), true));
}

double AliveTracker::fraction() const {
  return fired_.empty() ? 0.0 : static_cast<double>(alive_count()) / static_cast<double>(fired_.size());
}

void AliveTracker::reset() { std::fill(fired_.begin(), fired_.end(), false); }

double alive_fraction(std::span<const MatrixF> codes) {
  if (codes.empty()) return 0.0;
  AliveTracker tracker(static_cast<std::size_t>(codes.front().cols()));
  for (const auto& c : codes) tracker.observe(c);
  return tracker.fraction();
}

// ---------------------------------------------------------------------------
// Sources
// ---------------------------------------------------------------------------

ShardSource::ShardSource(const std::vector<std::filesystem::path>& shards, const TrainConfig& config)
    : source_(shards, config.buffer_batches, config.batch_size, config.pps_unit, config.seed ^ 0x5eed5eedULL) {}

MatrixSource::MatrixSource(MatrixF frames, std::size_t batch_size, std::uint64_t seed)
    : frames_(std::move(frames)), batch_size_(batch_size), rng_(seed) {
  if (batch_size_ == 0 || static_cast<std::size_t>(frames_.rows()) < batch_size_) {
    throw RuntimeFailure("matrix source holds fewer frames than one batch");
  }
  order_.resize(static_cast<std::size_t>(frames_.rows()));
  std::iota(order_.begin(), order_.end(), std::size_t{0});
  cursor_ = order_.size();
}

MatrixF MatrixSource::next_batch() {
  if (cursor_ + batch_size_ > order_.size()) {
    std::shuffle(order_.begin(), order_.end(), rng_);
    cursor_ = 0;
  }
  MatrixF batch(static_cast<Eigen::Index>(batch_size_), frames_.cols());
  for (std::size_t b = 0; b < batch_size_; ++b) {
    batch.row(static_cast<Eigen::Index>(b)) = frames_.row(static_cast<Eigen::Index>(order_[cursor_ + b]));
  }
  cursor_ += batch_size_;
  return batch;
}

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

nlohmann::json to_json(const StepMetrics& m) {
  return {{"step", m.step}, {"loss", m.loss}, {"l0", m.l0}, {"alive", m.alive}, {"lr", m.lr}, {"k", m.k}};
}

sae::SaeModel init_model(const TrainConfig& config, std::size_t input_dim) {
  if (input_dim == 0) throw ValidationError("input dim must be > 0");
  const std::size_t latent = input_dim * config.expansion;
  sae::ActivationRule rule{config.activation, config.k, {}};
  auto model = sae::SaeModel::zeros(input_dim, latent, rule);
  model.input_normalization = config.input_normalization;

  store::Rng rng(config.seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  for (Eigen::Index j = 0; j < model.decoder_weight.cols(); ++j) {
    Eigen::VectorXd col(model.decoder_weight.rows());
    do {
      for (Eigen::Index i = 0; i < col.size(); ++i) col(i) = normal(rng);
    } while (col.norm() == 0.0);
    col.normalize();
    model.decoder_weight.col(j) = col.cast<float>();
  }
  model.encoder_weight = model.decoder_weight.transpose();
  return model;
}

Trainer::Trainer(TrainConfig config, std::size_t input_dim)
    : config_(std::move(config)),
      model_((config_.validate(), init_model(config_, input_dim))),
      adam_(AdamState::zeros_like(model_)),
      alive_(model_.latent_dim()) {}

namespace {

const char* kMomentNames[] = {"encoder_weight", "encoder_bias", "decoder_weight", "decoder_bias"};

void restore_moment(sae::Gradients<float>& g, const sae::Checkpoint& ck, const std::string& prefix) {
  auto get = [&](const char* name) -> const MatrixF& {
    const MatrixF* t = ck.find_extra(prefix + name);
    if (t == nullptr) throw ValidationError("checkpoint lacks optimizer tensor " + prefix + name);
    return *t;
  };
  auto check = [](const MatrixF& m, Eigen::Index rows, Eigen::Index cols) {
    if (m.rows() != rows || m.cols() != cols) throw ShapeError("optimizer tensor shape mismatch");
  };
  const MatrixF& ew = get("encoder_weight");
  check(ew, g.encoder_weight.rows(), g.encoder_weight.cols());
  g.encoder_weight = ew;
  const MatrixF& eb = get("encoder_bias");
  check(eb, g.encoder_bias.size(), 1);
  g.encoder_bias = eb.col(0);
  const MatrixF& dw = get("decoder_weight");
  check(dw, g.decoder_weight.rows(), g.decoder_weight.cols());
  g.decoder_weight = dw;
  const MatrixF& db = get("decoder_bias");
  check(db, g.decoder_bias.size(), 1);
  g.decoder_bias = db.col(0);
}

void append_moment(std::vector<sae::NamedTensor>& out, const sae::Gradients<float>& g, const std::string& prefix) {
  auto vec = [](const VectorF& v) {
    MatrixF m(v.size(), 1);
    m.col(0) = v;
    return m;
  };
  out.push_back({prefix + kMomentNames[0], g.encoder_weight});
  out.push_back({prefix + kMomentNames[1], vec(g.encoder_bias)});
  out.push_back({prefix + kMomentNames[2], g.decoder_weight});
  out.push_back({prefix + kMomentNames[3], vec(g.decoder_bias)});
}

}  // namespace

Trainer::Trainer(TrainConfig config, const sae::Checkpoint& checkpoint)
    : config_(std::move(config)),
      model_(checkpoint.model),
      adam_(AdamState::zeros_like(model_)),
      alive_(model_.latent_dim()) {
  config_.validate();
  restore_moment(adam_.first, checkpoint, "adam.first.");
  restore_moment(adam_.second, checkpoint, "adam.second.");
  adam_.step = checkpoint.metadata.at("optimizer_step").get<std::uint64_t>();
  zero_inputs_ = checkpoint.metadata.value("zero_inputs", std::size_t{0});
}

void Trainer::step(const MatrixF& batch) {
  if (steps_done() >= config_.total_steps) throw RuntimeFailure("training already finished");
  MatrixF X = batch;
  if (config_.input_normalization) zero_inputs_ += sae::normalize_rows(X);

  const std::size_t t = steps_done();
  const std::size_t k = std::min(sparsity_k_at(config_, t, model_.latent_dim()), model_.latent_dim());
  const auto trace = sae::forward(model_, X, k);
  if (!std::isfinite(trace.loss)) {
    throw RuntimeFailure("training diverged: loss is " + std::to_string(trace.loss) + " at step " +
                         std::to_string(t) + " (lr " + std::to_string(lr_at(config_, t)) + ")");
  }
  const auto grads = sae::backward(model_, X, trace);
  adam_step(adam_, model_, grads, lr_at(config_, t), {config_.beta1, config_.beta2, config_.epsilon});

  alive_.observe(trace.codes);
  interval_loss_ += trace.loss;
  std::size_t nonzero = 0;
  for (Eigen::Index i = 0; i < trace.codes.size(); ++i) nonzero += trace.codes.data()[i] != 0.0f;
  interval_l0_ += static_cast<double>(nonzero) / static_cast<double>(std::max<Eigen::Index>(X.rows(), 1));
  ++interval_steps_;

  const std::size_t done = steps_done();
  if (done % config_.log_every == 0 || done == config_.total_steps) flush_interval();
  if (done % config_.alive_window == 0) alive_.reset();
}

void Trainer::flush_interval() {
  if (interval_steps_ == 0) return;
  StepMetrics m;
  m.step = steps_done();
  m.loss = interval_loss_ / static_cast<double>(interval_steps_);
  m.l0 = interval_l0_ / static_cast<double>(interval_steps_);
  m.alive = alive_.fraction();
  m.lr = lr_at(config_, std::min(m.step, config_.total_steps));
  m.k = sparsity_k_at(config_, m.step, model_.latent_dim());
  history_.push_back(m);
  if (sink_ != nullptr) *sink_ << to_json(m).dump() << '\n';
  interval_loss_ = 0;
  interval_l0_ = 0;
  interval_steps_ = 0;
}

sae::Checkpoint Trainer::checkpoint() const {
  sae::Checkpoint ck;
  ck.model = model_;
  ck.metadata = {{"optimizer_step", adam_.step},
                 {"config", to_json(config_)},
                 {"zero_inputs", zero_inputs_},
                 {"warmup", config_.warmup_mode == WarmupMode::anneal_k ? "anneal_k" : "none"}};
  append_moment(ck.extra, adam_.first, "adam.first.");
  append_moment(ck.extra, adam_.second, "adam.second.");
  return ck;
}

sae::Checkpoint train(const TrainConfig& config, BatchSource& source, std::ostream* metrics_sink,
                      const std::optional<sae::Checkpoint>& resume_from) {
  Trainer trainer = resume_from ? Trainer(config, *resume_from) : Trainer(config, source.dim());
  if (trainer.model().input_dim() != source.dim()) {
    throw ShapeError("data dim " + std::to_string(source.dim()) + " does not match model dim " +
                     std::to_string(trainer.model().input_dim()));
  }
  trainer.set_metrics_sink(metrics_sink);
  source.skip(trainer.steps_done());
  while (trainer.steps_done() < config.total_steps) trainer.step(source.next_batch());
  return trainer.checkpoint();
}

}  // namespace audiosae::train
