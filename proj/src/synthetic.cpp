#include "audiosae/synthetic.hpp"

#include <algorithm>
#include <numeric>
#include <random>

namespace audiosae::synthetic {

MatrixF random_unit_atoms(std::size_t dim, std::size_t count, store::Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  MatrixF atoms(static_cast<Eigen::Index>(dim), static_cast<Eigen::Index>(count));
  for (Eigen::Index j = 0; j < atoms.cols(); ++j) {
    Eigen::VectorXd v(atoms.rows());
    do {
      for (Eigen::Index i = 0; i < v.size(); ++i) v(i) = normal(rng);
    } while (v.norm() == 0.0);
    atoms.col(j) = v.normalized().cast<float>();
  }
  return atoms;
}

MatrixF sample_planted(const MatrixF& atoms, std::size_t rows, const PlantedOptions& options, store::Rng& rng) {
  const auto n_atoms = static_cast<std::size_t>(atoms.cols());
  if (options.active_atoms > n_atoms) throw ValidationError("more active atoms than atoms");
  std::uniform_real_distribution<double> coef(options.min_coefficient, options.max_coefficient);
  std::normal_distribution<double> noise(0.0, options.noise_std);
  std::vector<std::size_t> ids(n_atoms);
  std::iota(ids.begin(), ids.end(), std::size_t{0});

  MatrixF out(static_cast<Eigen::Index>(rows), atoms.rows());
  for (std::size_t r = 0; r < rows; ++r) {
    // Partial Fisher-Yates for distinct atoms.
    for (std::size_t a = 0; a < options.active_atoms; ++a) {
      std::uniform_int_distribution<std::size_t> pick(a, n_atoms - 1);
      std::swap(ids[a], ids[pick(rng)]);
    }
    Eigen::VectorXd x = Eigen::VectorXd::Zero(atoms.rows());
    for (std::size_t a = 0; a < options.active_atoms; ++a) {
      x += coef(rng) * atoms.col(static_cast<Eigen::Index>(ids[a])).cast<double>();
    }
    for (Eigen::Index i = 0; i < x.size(); ++i) x(i) += noise(rng);
    out.row(static_cast<Eigen::Index>(r)) = x.cast<float>().transpose();
  }
  return out;
}

VectorD max_cosines(const MatrixF& atoms, const MatrixF& decoder) {
  if (atoms.rows() != decoder.rows()) throw ShapeError("atoms and decoder dims differ");
  Eigen::MatrixXd a = atoms.cast<double>();
  Eigen::MatrixXd w = decoder.cast<double>();
  for (Eigen::Index j = 0; j < a.cols(); ++j) a.col(j).normalize();
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    const double n = w.col(j).norm();
    if (n > 0) w.col(j) /= n;
  }
  const Eigen::MatrixXd cos = a.transpose() * w;
  VectorD best(a.cols());
  for (Eigen::Index i = 0; i < cos.rows(); ++i) best(i) = cos.row(i).maxCoeff();
  return best;
}

double recovered_fraction(const MatrixF& atoms, const MatrixF& decoder, double threshold) {
  const VectorD best = max_cosines(atoms, decoder);
  if (best.size() == 0) return 0.0;
  return static_cast<double>((best.array() > threshold).count()) / static_cast<double>(best.size());
}

store::ShardManifest make_manifest(const std::string& dataset, std::size_t frame_count,
                                   std::size_t frames_per_audio, const std::string& domain, double weight,
                                   double frame_rate) {
  if (frames_per_audio == 0) throw ValidationError("frames_per_audio must be > 0");
  store::ShardManifest m;
  m.dataset = dataset;
  m.weight = weight;
  m.frame_rate = frame_rate;
  for (std::size_t start = 0, i = 0; start < frame_count; start += frames_per_audio, ++i) {
    store::AudioSegment seg;
    seg.audio_id = dataset + "_" + std::to_string(i);
    seg.start = start;
    seg.end = std::min(frame_count, start + frames_per_audio);
    seg.domain = domain;
    m.segments.push_back(std::move(seg));
  }
  return m;
}

MatrixD random_orthogonal(std::size_t n, store::Rng& rng) {
  std::normal_distribution<double> normal(0.0, 1.0);
  Eigen::MatrixXd g(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(n));
  for (Eigen::Index i = 0; i < g.size(); ++i) g.data()[i] = normal(rng);
  Eigen::HouseholderQR<Eigen::MatrixXd> qr(g);
  Eigen::MatrixXd q = qr.householderQ();
  const Eigen::MatrixXd r = qr.matrixQR().triangularView<Eigen::Upper>();
  for (Eigen::Index j = 0; j < q.cols(); ++j) {
    if (r(j, j) < 0) q.col(j) = -q.col(j);
  }
  return q;
}

}  // namespace audiosae::synthetic
