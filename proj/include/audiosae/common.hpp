#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace audiosae {

// Activations and SAE parameters are stored frame-major, matching the shard layout.
template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using MatrixF = RowMatrix<float>;
using VectorF = Vector<float>;
using MatrixD = RowMatrix<double>;
using VectorD = Vector<double>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Bad user input: malformed files, shape mismatches, invalid arguments.
class ValidationError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public ValidationError {
 public:
  using ValidationError::ValidationError;
};

// Failures that happen while a well-formed job is running.
class RuntimeFailure : public Error {
 public:
  using Error::Error;
};

/// Half-open frame range [start, end) belonging to one audio.
struct FrameRange {
  std::size_t start = 0;
  std::size_t end = 0;
  [[nodiscard]] std::size_t size() const { return end - start; }
  friend bool operator==(const FrameRange&, const FrameRange&) = default;
};

/// Runs fn(i) for i in [0, n) on up to `workers` threads. Each index is
/// handled exactly once; callers write results into preallocated slots so
/// the outcome does not depend on scheduling.
void parallel_for(std::size_t n, std::size_t workers, const std::function<void(std::size_t)>& fn);

/// Worker count from AUDIOSAE_WORKERS, or 1 when unset or invalid.
std::size_t default_workers();

}  // namespace audiosae
