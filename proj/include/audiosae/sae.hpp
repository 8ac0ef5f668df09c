#pragma once

// Sparse autoencoder: affine encoder, sparsifying activation, affine decoder,
// squared-error reconstruction loss and its analytic gradients.
//
// Shapes: X is B x d (one input per row), pre-activations and codes are B x D.
// Templated on the scalar so gradient checks can run in double while
// training and checkpoints stay in float.

#include <cstddef>
#include <filesystem>
#include <optional>
#include <span>
#include <string>
#include <utility>
#include <vector>

#include "json.hpp"

#include "audiosae/common.hpp"

namespace audiosae::sae {

enum class ActivationKind { batch_topk, topk, jump_relu };

std::string to_string(ActivationKind kind);
ActivationKind parse_activation_kind(const std::string& text);

struct ActivationRule {
  ActivationKind kind = ActivationKind::batch_topk;
  std::size_t k = 50;
  std::vector<double> thresholds;  // per-feature theta, JumpReLU only
};

/// How BatchTop-K pools at inference when several audios are encoded at once.
enum class Pooling { per_audio, per_batch };
Pooling parse_pooling(const std::string& text);

template <typename Scalar>
struct BasicSaeModel {
  RowMatrix<Scalar> encoder_weight;  // D x d
  Vector<Scalar> encoder_bias;       // D
  RowMatrix<Scalar> decoder_weight;  // d x D
  Vector<Scalar> decoder_bias;       // d
  ActivationRule rule;
  bool input_normalization = true;

  [[nodiscard]] std::size_t input_dim() const { return static_cast<std::size_t>(decoder_weight.rows()); }
  [[nodiscard]] std::size_t latent_dim() const { return static_cast<std::size_t>(encoder_weight.rows()); }

  /// Throws ValidationError on inconsistent shapes, non-finite parameters or
  /// negative JumpReLU thresholds.
  void validate() const;

  static BasicSaeModel zeros(std::size_t input_dim, std::size_t latent_dim, ActivationRule rule);

  template <typename Other>
  [[nodiscard]] BasicSaeModel<Other> cast() const {
    BasicSaeModel<Other> out;
    out.encoder_weight = encoder_weight.template cast<Other>();
    out.encoder_bias = encoder_bias.template cast<Other>();
    out.decoder_weight = decoder_weight.template cast<Other>();
    out.decoder_bias = decoder_bias.template cast<Other>();
    out.rule = rule;
    out.input_normalization = input_normalization;
    return out;
  }
};

using SaeModel = BasicSaeModel<float>;

template <typename Scalar>
struct NormalizedInput {
  Vector<Scalar> value;
  bool was_zero = false;
};

/// Scales x to unit Euclidean norm. A zero vector comes back unchanged with
/// was_zero set. Throws ValidationError on non-finite input.
template <typename Scalar>
NormalizedInput<Scalar> normalize_input(const Vector<Scalar>& x);

/// Row-wise normalize_input in place; returns the number of zero rows.
template <typename Scalar>
std::size_t normalize_rows(RowMatrix<Scalar>& X);

template <typename Scalar>
RowMatrix<Scalar> encode(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& X);

/// Keeps the k*B largest strictly positive entries of the whole batch.
/// Ties at the cut are resolved towards the lowest (row, feature) index.
template <typename Scalar>
RowMatrix<Scalar> batch_topk(const RowMatrix<Scalar>& pre, std::size_t k);

/// Same selection restricted to each row: min(k, positives) entries per row.
template <typename Scalar>
RowMatrix<Scalar> topk_per_row(const RowMatrix<Scalar>& pre, std::size_t k);

/// code_j = pre_j if pre_j > theta_j else 0.
template <typename Scalar>
RowMatrix<Scalar> jump_relu(const RowMatrix<Scalar>& pre, std::span<const double> thresholds);

/// Applies the model's rule; `k` overrides rule.k (used by the sparsity warmup).
template <typename Scalar>
RowMatrix<Scalar> activate(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& pre,
                           std::optional<std::size_t> k = std::nullopt);

template <typename Scalar>
RowMatrix<Scalar> decode(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& codes);

/// Mean over rows of the squared Euclidean reconstruction error.
template <typename Scalar>
Scalar loss(const RowMatrix<Scalar>& X, const RowMatrix<Scalar>& reconstruction);

template <typename Scalar>
struct ForwardTrace {
  RowMatrix<Scalar> pre;
  RowMatrix<Scalar> codes;
  RowMatrix<Scalar> reconstruction;
  Scalar loss = 0;
};

/// X must already carry the model's input convention (normalized if required).
template <typename Scalar>
ForwardTrace<Scalar> forward(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& X,
                             std::optional<std::size_t> k = std::nullopt);

template <typename Scalar>
struct Gradients {
  RowMatrix<Scalar> encoder_weight;
  Vector<Scalar> encoder_bias;
  RowMatrix<Scalar> decoder_weight;
  Vector<Scalar> decoder_bias;
};

/// Gradient of the loss with the sparsity support held fixed at the
/// selection made in `trace`.
template <typename Scalar>
Gradients<Scalar> backward(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& X,
                           const ForwardTrace<Scalar>& trace);

/// Inference path for analyses: applies the model's normalization, encodes
/// and activates. With Pooling::per_audio the BatchTop-K budget is k times
/// the audio's frame count and selection happens inside each audio.
MatrixF encode_codes(const SaeModel& model, const MatrixF& X, std::span<const FrameRange> audios,
                     Pooling pooling = Pooling::per_audio);

/// Full reconstruction x_hat(f(x)) of the (normalized) inputs.
MatrixF reconstruct(const SaeModel& model, const MatrixF& X, std::span<const FrameRange> audios,
                    Pooling pooling = Pooling::per_audio);

/// Applies the model's input convention to a copy of X.
MatrixF prepare_inputs(const SaeModel& model, const MatrixF& X);

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------
//
// File layout (little-endian):
//   "ASCK"  u32 version  u64 header_bytes  header JSON  tensor blob
// The header lists every tensor (name, rows, cols) in blob order; the blob
// holds row-major f32 data for encoder_weight, encoder_bias, decoder_weight,
// decoder_bias, then any extra tensors (optimizer moments, thresholds).

struct NamedTensor {
  std::string name;
  MatrixF value;
  friend bool operator==(const NamedTensor& a, const NamedTensor& b) {
    return a.name == b.name && a.value.rows() == b.value.rows() && a.value.cols() == b.value.cols() &&
           a.value == b.value;
  }
};

struct Checkpoint {
  SaeModel model;
  nlohmann::json metadata = nlohmann::json::object();
  std::vector<NamedTensor> extra;

  [[nodiscard]] const MatrixF* find_extra(const std::string& name) const;
};

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint);
Checkpoint load_checkpoint(const std::filesystem::path& path);

#define AUDIOSAE_SAE_EXTERN(S)                                                                               \
  extern template struct BasicSaeModel<S>;                                                                  \
  extern template NormalizedInput<S> normalize_input(const Vector<S>&);                                     \
  extern template std::size_t normalize_rows(RowMatrix<S>&);                                                \
  extern template RowMatrix<S> encode(const BasicSaeModel<S>&, const RowMatrix<S>&);                        \
  extern template RowMatrix<S> batch_topk(const RowMatrix<S>&, std::size_t);                               \
  extern template RowMatrix<S> topk_per_row(const RowMatrix<S>&, std::size_t);                             \
  extern template RowMatrix<S> jump_relu(const RowMatrix<S>&, std::span<const double>);                    \
  extern template RowMatrix<S> activate(const BasicSaeModel<S>&, const RowMatrix<S>&,                      \
                                        std::optional<std::size_t>);                                        \
  extern template RowMatrix<S> decode(const BasicSaeModel<S>&, const RowMatrix<S>&);                        \
  extern template S loss(const RowMatrix<S>&, const RowMatrix<S>&);                                         \
  extern template ForwardTrace<S> forward(const BasicSaeModel<S>&, const RowMatrix<S>&,                    \
                                          std::optional<std::size_t>);                                      \
  extern template Gradients<S> backward(const BasicSaeModel<S>&, const RowMatrix<S>&, const ForwardTrace<S>&);

AUDIOSAE_SAE_EXTERN(float)
AUDIOSAE_SAE_EXTERN(double)
#undef AUDIOSAE_SAE_EXTERN

}  // namespace audiosae::sae
