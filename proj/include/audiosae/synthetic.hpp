#pragma once

// Synthetic data with known ground truth, used by the test suites and the
// `synth` CLI command when no extractor output is available.

#include <cstdint>
#include <filesystem>
#include <string>

#include "audiosae/activation_store.hpp"
#include "audiosae/common.hpp"

namespace audiosae::synthetic {

/// d x n matrix of random unit-norm columns.
MatrixF random_unit_atoms(std::size_t dim, std::size_t count, store::Rng& rng);

struct PlantedOptions {
  std::size_t active_atoms = 3;
  double min_coefficient = 0.5;
  double max_coefficient = 1.5;
  double noise_std = 0.01;  // per coordinate
};

/// Rows are nonnegative combinations of `active_atoms` distinct atoms plus
/// isotropic Gaussian noise.
MatrixF sample_planted(const MatrixF& atoms, std::size_t rows, const PlantedOptions& options, store::Rng& rng);

/// Max cosine between each planted atom and any decoder column (columns of
/// `decoder`, shape d x D).
VectorD max_cosines(const MatrixF& atoms, const MatrixF& decoder);

/// Fraction of planted atoms matched by some decoder column above `threshold`.
double recovered_fraction(const MatrixF& atoms, const MatrixF& decoder, double threshold);

/// Manifest splitting `frame_count` frames into audios of `frames_per_audio`
/// frames (the last one may be shorter), all tagged with `domain`.
store::ShardManifest make_manifest(const std::string& dataset, std::size_t frame_count,
                                   std::size_t frames_per_audio, const std::string& domain,
                                   double weight = 1.0, double frame_rate = 50.0);

/// Random orthogonal n x n matrix (QR of a Gaussian matrix, sign-fixed).
MatrixD random_orthogonal(std::size_t n, store::Rng& rng);

}  // namespace audiosae::synthetic
