#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <random>
#include <stdexcept>
#include <string>
#include <vector>

namespace dw0 {

template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

using Shape = std::vector<int>;

std::string shape_str(const Shape& shape);
std::int64_t shape_numel(const Shape& shape);

// Error categories map onto CLI exit codes (1 usage, 2 data, 3 numeric).
struct UsageError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct DataError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

std::uint64_t splitmix64(std::uint64_t x);

/// Seeded generator with platform-independent uniform and normal draws.
/// std::*_distribution are implementation-defined, so conversions are done
/// here on top of the (standardized) mt19937_64 bit stream.
class Rng {
 public:
  explicit Rng(std::uint64_t seed = 0) : engine_(seed) {}

  std::uint64_t next_u64() { return engine_(); }
  double uniform();                       // [0, 1)
  double uniform(double lo, double hi);
  std::uint64_t below(std::uint64_t n);   // [0, n)
  double normal();

  static std::uint64_t derive(std::uint64_t master, std::uint64_t index) {
    return splitmix64(master ^ splitmix64(index + 0x9E3779B97F4A7C15ULL));
  }

 private:
  std::mt19937_64 engine_;
  bool has_spare_ = false;
  double spare_ = 0.0;
};

}  // namespace dw0
