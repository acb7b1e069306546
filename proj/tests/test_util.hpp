#pragma once

// Shared helpers and independent oracles for the test suites.

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <span>
#include <string>
#include <vector>

#include "scei/model.hpp"

namespace scei::testing_util {

inline Matrix random_matrix(Eigen::Index rows, Eigen::Index cols, std::uint64_t seed,
                            double scale = 1.0) {
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  Matrix m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i)
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = n(rng);
  return m;
}

// Mean cross-entropy from forward() probabilities.
inline double cross_entropy(const ParamVector& p, const MlpArchitecture& arch, const Matrix& x,
                            std::span<const int> y) {
  const Matrix probs = forward(p, arch, x);
  double sum = 0.0;
  for (Eigen::Index i = 0; i < probs.rows(); ++i) sum -= std::log(probs(i, y[std::size_t(i)]));
  return sum / double(probs.rows());
}

inline ParamVector finite_difference_grad(const ParamVector& p, const MlpArchitecture& arch,
                                          const Matrix& x, std::span<const int> y, double eps) {
  ParamVector g(p.size());
  ParamVector q = p;
  for (std::size_t i = 0; i < p.size(); ++i) {
    q[i] = p[i] + eps;
    const double up = cross_entropy(q, arch, x, y);
    q[i] = p[i] - eps;
    const double down = cross_entropy(q, arch, x, y);
    q[i] = p[i];
    g[i] = (up - down) / (2.0 * eps);
  }
  return g;
}

// Elementwise |a-b| / max(|a|, |b|, floor). The floor keeps entries whose
// true value is ~0 from reporting finite-difference round-off as error.
inline double max_relative_error(const ParamVector& a, const ParamVector& b,
                                 double floor = 1e-6) {
  double worst = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) {
    const double denom = std::max({std::abs(a[i]), std::abs(b[i]), floor});
    worst = std::max(worst, std::abs(a[i] - b[i]) / denom);
  }
  return worst;
}

inline std::filesystem::path temp_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("scei_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace scei::testing_util
