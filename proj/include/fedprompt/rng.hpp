#ifndef FEDPROMPT_RNG_HPP
#define FEDPROMPT_RNG_HPP

#include <Eigen/Dense>
#include <cstdint>
#include <random>
#include <string_view>

#include "fedprompt/errors.hpp"

namespace fedprompt {

// splitmix64 finalizer. Scrambles a 64-bit word so that related inputs
// (base seed xor salt, consecutive indices) yield unrelated outputs.
inline std::uint64_t mix_bits(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

// FNV-1a hash of a label. Used to fork independent seed streams per
// component ("partition", "encoders", ...) from one master seed.
inline std::uint64_t hash_label(std::string_view label) {
  std::uint64_t h = 0xcbf29ce484222325ULL;
  for (char c : label) {
    h ^= static_cast<unsigned char>(c);
    h *= 0x100000001b3ULL;
  }
  return h;
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label) {
  return mix_bits(base ^ hash_label(label));
}

inline std::uint64_t derive_seed(std::uint64_t base, std::string_view label,
                                 std::uint64_t index) {
  return mix_bits(derive_seed(base, label) ^ mix_bits(index + 1));
}

// Matrix with i.i.d. N(0, stddev^2) entries, filled row by row so the
// layout of the draw is independent of Eigen's storage order.
inline Eigen::MatrixXd gaussian_matrix(Eigen::Index rows, Eigen::Index cols,
                                       double stddev, std::uint64_t seed) {
  if (rows < 1 || cols < 1) {
    throw ConfigError("gaussian_matrix: rows and cols must be positive");
  }
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> dist(0.0, 1.0);
  Eigen::MatrixXd m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) {
      m(i, j) = stddev * dist(rng);
    }
  }
  return m;
}

// Rows drawn i.i.d. Gaussian, each scaled to unit L2 norm.
inline Eigen::MatrixXd random_unit_rows(Eigen::Index rows, Eigen::Index cols,
                                        std::uint64_t seed) {
  Eigen::MatrixXd m = gaussian_matrix(rows, cols, 1.0, seed);
  for (Eigen::Index i = 0; i < rows; ++i) {
    double n = m.row(i).norm();
    if (n < 1e-300) {
      throw NumericalError("random_unit_rows: drew a zero row");
    }
    m.row(i) /= n;
  }
  return m;
}

}  // namespace fedprompt

#endif  // FEDPROMPT_RNG_HPP
