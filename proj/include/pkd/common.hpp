#pragma once

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <string_view>

#include <Eigen/Dense>
#include <Eigen/Sparse>

namespace pkd {

using Matrix = Eigen::MatrixXd;
using RowVector = Eigen::RowVectorXd;
using SparseMatrix = Eigen::SparseMatrix<double, Eigen::RowMajor>;

/// Every random draw in the library goes through an explicitly seeded engine.
using Rng = std::mt19937_64;

/// Lower clamp applied to every probability produced by the library.
inline constexpr double kProbFloor = 1e-12;

/// Mixes a base seed with a named stream so that independent stages draw
/// from decorrelated engines while staying reproducible.
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream);
std::uint64_t derive_seed(std::uint64_t seed, std::string_view stream, std::uint64_t index);

/// Shortest decimal text that parses back to the same double.
std::string format_double(double x);

/// Raised when an optimisation loop produces a non-finite loss or gradient.
class DivergenceError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Pipeline failure tagged with the stage that raised it.
class StageError : public std::runtime_error {
 public:
  StageError(std::string stage, const std::string& what)
      : std::runtime_error("[" + stage + "] " + what), stage_(std::move(stage)) {}
  const std::string& stage() const noexcept { return stage_; }

 private:
  std::string stage_;
};

}  // namespace pkd
