#include "audiosae/sae.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <fstream>

namespace audiosae::sae {

std::string to_string(ActivationKind kind) {
  switch (kind) {
    case ActivationKind::batch_topk: return "batch_topk";
    case ActivationKind::topk: return "topk";
    case ActivationKind::jump_relu: return "jump_relu";
  }
  return "unknown";
}

ActivationKind parse_activation_kind(const std::string& text) {
  if (text == "batch_topk" || text == "batchtopk") return ActivationKind::batch_topk;
  if (text == "topk") return ActivationKind::topk;
  if (text == "jump_relu" || text == "jumprelu") return ActivationKind::jump_relu;
  throw ValidationError("unknown activation rule '" + text + "'");
}

Pooling parse_pooling(const std::string& text) {
  if (text == "audio" || text == "per_audio") return Pooling::per_audio;
  if (text == "batch" || text == "per_batch") return Pooling::per_batch;
  throw ValidationError("pooling must be 'audio' or 'batch', got '" + text + "'");
}

template <typename Scalar>
void BasicSaeModel<Scalar>::validate() const {
  const auto D = encoder_weight.rows();
  const auto d = encoder_weight.cols();
  if (D <= 0 || d <= 0) throw ValidationError("SAE dimensions must be positive");
  if (encoder_bias.size() != D || decoder_weight.rows() != d || decoder_weight.cols() != D ||
      decoder_bias.size() != d) {
    throw ShapeError("SAE parameter shapes are inconsistent");
  }
  if (!encoder_weight.allFinite() || !encoder_bias.allFinite() || !decoder_weight.allFinite() ||
      !decoder_bias.allFinite()) {
    throw ValidationError("SAE parameters contain non-finite values");
  }
  if (rule.kind == ActivationKind::jump_relu) {
    if (rule.thresholds.size() != static_cast<std::size_t>(D)) {
      throw ShapeError("JumpReLU needs one threshold per feature");
    }
    for (double t : rule.thresholds) {
      if (!(t >= 0.0)) throw ValidationError("JumpReLU thresholds must be >= 0");
    }
  } else if (rule.k == 0) {
    throw ValidationError("top-k rules need k >= 1");
  }
}

template <typename Scalar>
BasicSaeModel<Scalar> BasicSaeModel<Scalar>::zeros(std::size_t input_dim, std::size_t latent_dim,
                                                   ActivationRule rule) {
  const auto d = static_cast<Eigen::Index>(input_dim);
  const auto D = static_cast<Eigen::Index>(latent_dim);
  BasicSaeModel m;
  m.encoder_weight = RowMatrix<Scalar>::Zero(D, d);
  m.encoder_bias = Vector<Scalar>::Zero(D);
  m.decoder_weight = RowMatrix<Scalar>::Zero(d, D);
  m.decoder_bias = Vector<Scalar>::Zero(d);
  m.rule = std::move(rule);
  return m;
}

template <typename Scalar>
NormalizedInput<Scalar> normalize_input(const Vector<Scalar>& x) {
  if (!x.allFinite()) throw ValidationError("cannot normalize a non-finite vector");
  const Scalar norm = x.norm();
  if (norm == Scalar(0)) return {x, true};
  return {x / norm, false};
}

template <typename Scalar>
std::size_t normalize_rows(RowMatrix<Scalar>& X) {
  if (!X.allFinite()) throw ValidationError("cannot normalize non-finite inputs");
  std::size_t zeros = 0;
  for (Eigen::Index r = 0; r < X.rows(); ++r) {
    const Scalar norm = X.row(r).norm();
    if (norm == Scalar(0)) {
      ++zeros;
    } else {
      X.row(r) /= norm;
    }
  }
  return zeros;
}

template <typename Scalar>
RowMatrix<Scalar> encode(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& X) {
  if (static_cast<std::size_t>(X.cols()) != model.input_dim()) {
    throw ShapeError("encode: input has " + std::to_string(X.cols()) + " columns, model expects " +
                     std::to_string(model.input_dim()));
  }
  RowMatrix<Scalar> pre = X * model.encoder_weight.transpose();
  pre.rowwise() += model.encoder_bias.transpose();
  return pre;
}

namespace {

// Strict total order: larger value first, then lower flat index.
template <typename Scalar>
struct Candidate {
  Scalar value;
  Eigen::Index index;
  bool operator<(const Candidate& o) const { return value > o.value || (value == o.value && index < o.index); }
};

template <typename Scalar>
void keep_largest(const Scalar* src, Scalar* dst, Eigen::Index n, std::size_t budget,
                  std::vector<Candidate<Scalar>>& scratch) {
  scratch.clear();
  for (Eigen::Index i = 0; i < n; ++i) {
    if (src[i] > Scalar(0)) scratch.push_back({src[i], i});
  }
  std::fill(dst, dst + n, Scalar(0));
  if (scratch.size() > budget) {
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<std::ptrdiff_t>(budget), scratch.end());
    scratch.resize(budget);
  }
  for (const auto& c : scratch) dst[c.index] = c.value;
}

}  // namespace

template <typename Scalar>
RowMatrix<Scalar> batch_topk(const RowMatrix<Scalar>& pre, std::size_t k) {
  RowMatrix<Scalar> codes(pre.rows(), pre.cols());
  std::vector<Candidate<Scalar>> scratch;
  keep_largest(pre.data(), codes.data(), pre.size(), k * static_cast<std::size_t>(pre.rows()), scratch);
  return codes;
}

template <typename Scalar>
RowMatrix<Scalar> topk_per_row(const RowMatrix<Scalar>& pre, std::size_t k) {
  RowMatrix<Scalar> codes(pre.rows(), pre.cols());
  std::vector<Candidate<Scalar>> scratch;
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    keep_largest(pre.row(r).data(), codes.row(r).data(), pre.cols(), k, scratch);
  }
  return codes;
}

template <typename Scalar>
RowMatrix<Scalar> jump_relu(const RowMatrix<Scalar>& pre, std::span<const double> thresholds) {
  if (thresholds.size() != static_cast<std::size_t>(pre.cols())) {
    throw ShapeError("jump_relu: one threshold per feature required");
  }
  RowMatrix<Scalar> codes(pre.rows(), pre.cols());
  for (Eigen::Index r = 0; r < pre.rows(); ++r) {
    for (Eigen::Index j = 0; j < pre.cols(); ++j) {
      const Scalar v = pre(r, j);
      codes(r, j) = static_cast<double>(v) > thresholds[static_cast<std::size_t>(j)] ? v : Scalar(0);
    }
  }
  return codes;
}

template <typename Scalar>
RowMatrix<Scalar> activate(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& pre,
                           std::optional<std::size_t> k) {
  const std::size_t kk = k.value_or(model.rule.k);
  switch (model.rule.kind) {
    case ActivationKind::batch_topk: return batch_topk(pre, kk);
    case ActivationKind::topk: return topk_per_row(pre, kk);
    case ActivationKind::jump_relu: return jump_relu(pre, std::span<const double>(model.rule.thresholds));
  }
  throw ValidationError("unknown activation rule");
}

template <typename Scalar>
RowMatrix<Scalar> decode(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& codes) {
  if (static_cast<std::size_t>(codes.cols()) != model.latent_dim()) {
    throw ShapeError("decode: codes have " + std::to_string(codes.cols()) + " columns, model expects " +
                     std::to_string(model.latent_dim()));
  }
  RowMatrix<Scalar> out = codes * model.decoder_weight.transpose();
  out.rowwise() += model.decoder_bias.transpose();
  return out;
}

template <typename Scalar>
Scalar loss(const RowMatrix<Scalar>& X, const RowMatrix<Scalar>& reconstruction) {
  if (X.rows() != reconstruction.rows() || X.cols() != reconstruction.cols()) {
    throw ShapeError("loss: shapes differ");
  }
  if (X.rows() == 0) return Scalar(0);
  return (X - reconstruction).squaredNorm() / static_cast<Scalar>(X.rows());
}

template <typename Scalar>
ForwardTrace<Scalar> forward(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& X,
                             std::optional<std::size_t> k) {
  ForwardTrace<Scalar> trace;
  trace.pre = encode(model, X);
  trace.codes = activate(model, trace.pre, k);
  trace.reconstruction = decode(model, trace.codes);
  trace.loss = loss(X, trace.reconstruction);
  return trace;
}

template <typename Scalar>
Gradients<Scalar> backward(const BasicSaeModel<Scalar>& model, const RowMatrix<Scalar>& X,
                           const ForwardTrace<Scalar>& trace) {
  if (X.rows() != trace.reconstruction.rows() || X.cols() != trace.reconstruction.cols()) {
    throw ShapeError("backward: trace does not match inputs");
  }
  const Scalar scale = Scalar(2) / static_cast<Scalar>(std::max<Eigen::Index>(X.rows(), 1));
  const RowMatrix<Scalar> resid = (trace.reconstruction - X) * scale;  // dL/dx_hat

  Gradients<Scalar> g;
  g.decoder_weight = resid.transpose() * trace.codes;
  g.decoder_bias = resid.colwise().sum().transpose();

  RowMatrix<Scalar> dpre = resid * model.decoder_weight;
  for (Eigen::Index i = 0; i < dpre.size(); ++i) {
    if (trace.codes.data()[i] == Scalar(0)) dpre.data()[i] = Scalar(0);
  }
  g.encoder_weight = dpre.transpose() * X;
  g.encoder_bias = dpre.colwise().sum().transpose();

  if (!g.encoder_weight.allFinite() || !g.encoder_bias.allFinite() || !g.decoder_weight.allFinite() ||
      !g.decoder_bias.allFinite()) {
    throw RuntimeFailure("backward produced non-finite gradients");
  }
  return g;
}

MatrixF prepare_inputs(const SaeModel& model, const MatrixF& X) {
  MatrixF out = X;
  if (model.input_normalization) normalize_rows(out);
  return out;
}

MatrixF encode_codes(const SaeModel& model, const MatrixF& X, std::span<const FrameRange> audios,
                     Pooling pooling) {
  const MatrixF inputs = prepare_inputs(model, X);
  const MatrixF pre = encode(model, inputs);
  if (pooling == Pooling::per_batch || model.rule.kind != ActivationKind::batch_topk || audios.empty()) {
    return activate(model, pre);
  }
  MatrixF codes = MatrixF::Zero(pre.rows(), pre.cols());
  for (const auto& a : audios) {
    if (a.end > static_cast<std::size_t>(pre.rows()) || a.start > a.end) {
      throw ShapeError("audio range exceeds the input frames");
    }
    const auto start = static_cast<Eigen::Index>(a.start);
    const auto n = static_cast<Eigen::Index>(a.size());
    if (n == 0) continue;
    const MatrixF block = pre.middleRows(start, n);
    codes.middleRows(start, n) = batch_topk(block, model.rule.k);
  }
  return codes;
}

MatrixF reconstruct(const SaeModel& model, const MatrixF& X, std::span<const FrameRange> audios,
                    Pooling pooling) {
  return decode(model, encode_codes(model, X, audios, pooling));
}

// ---------------------------------------------------------------------------
// Checkpoints
// ---------------------------------------------------------------------------

namespace {

constexpr char kCheckpointMagic[4] = {'A', 'S', 'C', 'K'};
constexpr std::uint32_t kCheckpointVersion = 1;

static_assert(std::endian::native == std::endian::little, "checkpoints assume a little-endian host");

MatrixF as_matrix(const VectorF& v) {
  MatrixF m(v.size(), 1);
  m.col(0) = v;
  return m;
}

}  // namespace

const MatrixF* Checkpoint::find_extra(const std::string& name) const {
  for (const auto& t : extra) {
    if (t.name == name) return &t.value;
  }
  return nullptr;
}

void save_checkpoint(const std::filesystem::path& path, const Checkpoint& checkpoint) {
  const SaeModel& m = checkpoint.model;
  m.validate();

  std::vector<NamedTensor> tensors{{"encoder_weight", m.encoder_weight},
                                   {"encoder_bias", as_matrix(m.encoder_bias)},
                                   {"decoder_weight", m.decoder_weight},
                                   {"decoder_bias", as_matrix(m.decoder_bias)}};
  if (m.rule.kind == ActivationKind::jump_relu) {
    MatrixF theta(static_cast<Eigen::Index>(m.rule.thresholds.size()), 1);
    for (std::size_t i = 0; i < m.rule.thresholds.size(); ++i) {
      theta(static_cast<Eigen::Index>(i), 0) = static_cast<float>(m.rule.thresholds[i]);
    }
    tensors.push_back({"jump_thresholds", theta});
  }
  for (const auto& t : checkpoint.extra) tensors.push_back(t);

  nlohmann::json header;
  header["d"] = m.input_dim();
  header["D"] = m.latent_dim();
  header["k"] = m.rule.k;
  header["activation"] = to_string(m.rule.kind);
  header["input_normalization"] = m.input_normalization;
  header["metadata"] = checkpoint.metadata;
  header["tensors"] = nlohmann::json::array();
  for (const auto& t : tensors) {
    header["tensors"].push_back({{"name", t.name}, {"rows", t.value.rows()}, {"cols", t.value.cols()}});
  }
  const std::string text = header.dump();

  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw RuntimeFailure("cannot write checkpoint " + path.string());
  const std::uint32_t version = kCheckpointVersion;
  const std::uint64_t header_bytes = text.size();
  out.write(kCheckpointMagic, 4);
  out.write(reinterpret_cast<const char*>(&version), sizeof(version));
  out.write(reinterpret_cast<const char*>(&header_bytes), sizeof(header_bytes));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& t : tensors) {
    out.write(reinterpret_cast<const char*>(t.value.data()),
              static_cast<std::streamsize>(t.value.size() * sizeof(float)));
  }
  if (!out) throw RuntimeFailure("failed writing checkpoint " + path.string());
}

Checkpoint load_checkpoint(const std::filesystem::path& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ValidationError("cannot open checkpoint " + path.string());
  char magic[4];
  std::uint32_t version = 0;
  std::uint64_t header_bytes = 0;
  in.read(magic, 4);
  in.read(reinterpret_cast<char*>(&version), sizeof(version));
  in.read(reinterpret_cast<char*>(&header_bytes), sizeof(header_bytes));
  if (!in || std::memcmp(magic, kCheckpointMagic, 4) != 0) {
    throw ValidationError(path.string() + " is not an SAE checkpoint");
  }
  if (version != kCheckpointVersion) throw ValidationError("unsupported checkpoint version");
  if (header_bytes > (1ull << 30)) throw ValidationError("checkpoint header too large");
  std::string text(header_bytes, '\0');
  in.read(text.data(), static_cast<std::streamsize>(header_bytes));
  if (!in) throw ValidationError("checkpoint header truncated");

  Checkpoint ck;
  std::vector<NamedTensor> tensors;
  try {
    const auto header = nlohmann::json::parse(text);
    ck.metadata = header.value("metadata", nlohmann::json::object());
    ck.model.rule.kind = parse_activation_kind(header.at("activation").get<std::string>());
    ck.model.rule.k = header.at("k").get<std::size_t>();
    ck.model.input_normalization = header.at("input_normalization").get<bool>();
    for (const auto& t : header.at("tensors")) {
      const auto rows = t.at("rows").get<Eigen::Index>();
      const auto cols = t.at("cols").get<Eigen::Index>();
      if (rows < 0 || cols < 0) throw ValidationError("negative tensor shape");
      MatrixF value(rows, cols);
      in.read(reinterpret_cast<char*>(value.data()), static_cast<std::streamsize>(value.size() * sizeof(float)));
      if (!in) throw ValidationError("checkpoint blob truncated at tensor " + t.at("name").get<std::string>());
      tensors.push_back({t.at("name").get<std::string>(), std::move(value)});
    }
  } catch (const nlohmann::json::exception& e) {
    throw ValidationError(std::string("malformed checkpoint header: ") + e.what());
  }
  if (in.peek() != std::char_traits<char>::eof()) throw ValidationError("trailing bytes after checkpoint blob");

  auto take = [&](const std::string& name) -> MatrixF {
    for (auto it = tensors.begin(); it != tensors.end(); ++it) {
      if (it->name == name) {
        MatrixF v = std::move(it->value);
        tensors.erase(it);
        return v;
      }
    }
    throw ValidationError("checkpoint lacks tensor " + name);
  };
  ck.model.encoder_weight = take("encoder_weight");
  ck.model.encoder_bias = take("encoder_bias").col(0);
  ck.model.decoder_weight = take("decoder_weight");
  ck.model.decoder_bias = take("decoder_bias").col(0);
  if (ck.model.rule.kind == ActivationKind::jump_relu) {
    const MatrixF theta = take("jump_thresholds");
    ck.model.rule.thresholds.assign(theta.data(), theta.data() + theta.size());
  }
  ck.extra = std::move(tensors);
  ck.model.validate();
  return ck;
}

#define AUDIOSAE_SAE_INSTANTIATE(S)                                                                    \
  template struct BasicSaeModel<S>;                                                                   \
  template NormalizedInput<S> normalize_input(const Vector<S>&);                                      \
  template std::size_t normalize_rows(RowMatrix<S>&);                                                 \
  template RowMatrix<S> encode(const BasicSaeModel<S>&, const RowMatrix<S>&);                         \
  template RowMatrix<S> batch_topk(const RowMatrix<S>&, std::size_t);                                \
  template RowMatrix<S> topk_per_row(const RowMatrix<S>&, std::size_t);                              \
  template RowMatrix<S> jump_relu(const RowMatrix<S>&, std::span<const double>);                     \
  template RowMatrix<S> activate(const BasicSaeModel<S>&, const RowMatrix<S>&, std::optional<std::size_t>); \
  template RowMatrix<S> decode(const BasicSaeModel<S>&, const RowMatrix<S>&);                         \
  template S loss(const RowMatrix<S>&, const RowMatrix<S>&);                                          \
  template ForwardTrace<S> forward(const BasicSaeModel<S>&, const RowMatrix<S>&, std::optional<std::size_t>); \
  template Gradients<S> backward(const BasicSaeModel<S>&, const RowMatrix<S>&, const ForwardTrace<S>&);

AUDIOSAE_SAE_INSTANTIATE(float)
AUDIOSAE_SAE_INSTANTIATE(double)

}  // namespace audiosae::sae
