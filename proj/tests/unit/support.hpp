#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <random>
#include <string>

#include "rnb/field.hpp"

namespace rnb::test {

inline ScalarField random_field(int h, int w, std::uint64_t seed, double lo = -1.0,
                                double hi = 1.0) {
  std::mt19937_64 rng(seed);
  std::uniform_real_distribution<double> u(lo, hi);
  ScalarField f(h, w);
  for (double& v : f.values()) v = u(rng);
  return f;
}

inline BinaryMask random_mask(int h, int w, std::uint64_t seed, double p = 0.5) {
  std::mt19937_64 rng(seed);
  std::bernoulli_distribution b(p);
  BinaryMask m(h, w);
  for (int i = 0; i < h; ++i) {
    for (int j = 0; j < w; ++j) m.set(i, j, b(rng));
  }
  return m;
}

inline BinaryMask rect(int h, int w, int r0, int c0, int r1, int c1) {
  BinaryMask m(h, w);
  for (int i = r0; i < r1; ++i) {
    for (int j = c0; j < c1; ++j) m.set(i, j, true);
  }
  return m;
}

inline double inner(const ScalarField& a, const ScalarField& b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

inline double max_abs_diff(const ScalarField& a, const ScalarField& b) {
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

inline ScalarField lin(double a, const ScalarField& f, double b, const ScalarField& g) {
  ScalarField out(f.height(), f.width());
  for (std::size_t i = 0; i < f.size(); ++i) out[i] = a * f[i] + b * g[i];
  return out;
}

inline std::filesystem::path fixture_dir() { return RNB_FIXTURE_DIR; }

// Fresh empty directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  const auto dir = std::filesystem::temp_directory_path() / ("rnb_test_" + name);
  std::filesystem::remove_all(dir);
  std::filesystem::create_directories(dir);
  return dir;
}

}  // namespace rnb::test
