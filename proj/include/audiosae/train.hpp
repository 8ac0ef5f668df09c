#pragma once

// SAE training: Adam with bias correction, constant learning rate with a
// linear decay to zero over the final fraction of steps, a linear warmup of
// the effective k, alive-feature tracking and resumable checkpoints.

#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "audiosae/activation_store.hpp"
#include "audiosae/sae.hpp"

namespace audiosae::train {

enum class WarmupMode { anneal_k, none };

struct TrainConfig {
  double learning_rate = 2e-4;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
  std::size_t total_steps = 200'000;
  std::size_t warmup_steps = 10'000;
  double decay_fraction = 0.2;
  std::size_t batch_size = 2500;
  std::size_t k = 50;
  std::size_t expansion = 8;
  std::uint64_t seed = 0;

  WarmupMode warmup_mode = WarmupMode::anneal_k;
  std::optional<std::size_t> k_start;  // defaults to the latent size D
  sae::ActivationKind activation = sae::ActivationKind::batch_topk;
  bool input_normalization = true;
  std::size_t buffer_batches = 100;
  store::PpsUnit pps_unit = store::PpsUnit::frames;
  std::size_t log_every = 100;
  std::size_t alive_window = 1000;

  void validate() const;
};

/// Flat "key = value" text, '#' starts a comment. Unknown keys are errors.
TrainConfig parse_config(std::istream& in);
TrainConfig load_config(const std::filesystem::path& path);
std::string to_config_text(const TrainConfig& config);
nlohmann::json to_json(const TrainConfig& config);

double lr_at(const TrainConfig& config, std::size_t step);
std::size_t sparsity_k_at(const TrainConfig& config, std::size_t step, std::size_t latent_dim);

// ---------------------------------------------------------------------------
// Adam
// ---------------------------------------------------------------------------

struct AdamHyper {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// One bias-corrected Adam update of a flat tensor; `step` is the 1-based
/// count including this update. Throws RuntimeFailure on non-finite grads.
void adam_update(std::span<float> param, std::span<const float> grad, std::span<float> first,
                 std::span<float> second, std::uint64_t step, double lr, const AdamHyper& hyper);

struct AdamState {
  sae::Gradients<float> first;
  sae::Gradients<float> second;
  std::uint64_t step = 0;

  static AdamState zeros_like(const sae::SaeModel& model);
};

void adam_step(AdamState& state, sae::SaeModel& model, const sae::Gradients<float>& grads, double lr,
               const AdamHyper& hyper);

// ---------------------------------------------------------------------------
// Alive features
// ---------------------------------------------------------------------------

class AliveTracker {
 public:
  explicit AliveTracker(std::size_t latent_dim) : fired_(latent_dim, false) {}
  void observe(const MatrixF& codes);
  [[nodiscard]] double fraction() const;
  [[nodiscard]] std::size_t alive_count() const;
  void reset();

 private:
  std::vector<bool> fired_;
};

/// Fraction of features with a nonzero code in any of the given batches.
double alive_fraction(std::span<const MatrixF> codes);

// ---------------------------------------------------------------------------
// Data sources
// ---------------------------------------------------------------------------

class BatchSource {
 public:
  virtual ~BatchSource() = default;
  [[nodiscard]] virtual std::size_t dim() const = 0;
  virtual MatrixF next_batch() = 0;
  virtual void skip(std::size_t batches) {
    for (std::size_t i = 0; i < batches; ++i) (void)next_batch();
  }
};

class ShardSource final : public BatchSource {
 public:
  ShardSource(const std::vector<std::filesystem::path>& shards, const TrainConfig& config);
  [[nodiscard]] std::size_t dim() const override { return source_.dim(); }
  MatrixF next_batch() override { return source_.next_batch(); }

 private:
  store::ShardBatchSource source_;
};

/// In-memory frames served through a shuffle buffer: each pass visits every
/// frame once in random order.
class MatrixSource final : public BatchSource {
 public:
  MatrixSource(MatrixF frames, std::size_t batch_size, std::uint64_t seed);
  [[nodiscard]] std::size_t dim() const override { return static_cast<std::size_t>(frames_.cols()); }
  MatrixF next_batch() override;

 private:
  MatrixF frames_;
  std::size_t batch_size_;
  store::Rng rng_;
  std::vector<std::size_t> order_;
  std::size_t cursor_ = 0;
};

// ---------------------------------------------------------------------------
// Trainer
// ---------------------------------------------------------------------------

struct StepMetrics {
  std::size_t step = 0;  // number of updates applied so far
  double loss = 0;       // mean over the logging interval
  double l0 = 0;         // mean nonzero codes per input
  double alive = 0;      // over the current alive window
  double lr = 0;
  std::size_t k = 0;
};

nlohmann::json to_json(const StepMetrics& metrics);

/// Decoder columns drawn from a Gaussian and scaled to unit norm, encoder set
/// to the decoder transpose, biases zero.
sae::SaeModel init_model(const TrainConfig& config, std::size_t input_dim);

class Trainer {
 public:
  Trainer(TrainConfig config, std::size_t input_dim);
  /// Continues from a checkpoint written by checkpoint(); optimizer moments
  /// and the step counter are restored.
  Trainer(TrainConfig config, const sae::Checkpoint& checkpoint);

  /// One optimizer update on a raw batch (normalized here if configured).
  void step(const MatrixF& batch);

  [[nodiscard]] std::size_t steps_done() const { return static_cast<std::size_t>(adam_.step); }
  [[nodiscard]] const sae::SaeModel& model() const { return model_; }
  [[nodiscard]] const TrainConfig& config() const { return config_; }
  [[nodiscard]] const std::vector<StepMetrics>& history() const { return history_; }
  [[nodiscard]] const AdamState& optimizer() const { return adam_; }
  [[nodiscard]] std::size_t zero_input_count() const { return zero_inputs_; }

  [[nodiscard]] sae::Checkpoint checkpoint() const;

  /// Called with each logged metrics record.
  void set_metrics_sink(std::ostream* sink) { sink_ = sink; }

 private:
  void flush_interval();

  TrainConfig config_;
  sae::SaeModel model_;
  AdamState adam_;
  AliveTracker alive_;
  std::vector<StepMetrics> history_;
  std::ostream* sink_ = nullptr;
  double interval_loss_ = 0;
  double interval_l0_ = 0;
  std::size_t interval_steps_ = 0;
  std::size_t zero_inputs_ = 0;
};

/// Runs until config.total_steps updates have been applied. When resuming,
/// the source is fast-forwarded past the batches already consumed so the run
/// matches an uninterrupted one.
sae::Checkpoint train(const TrainConfig& config, BatchSource& source, std::ostream* metrics_sink = nullptr,
                      const std::optional<sae::Checkpoint>& resume_from = std::nullopt);

}  // namespace audiosae::train
