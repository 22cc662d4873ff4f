#pragma once

#include <cmath>
#include <filesystem>
#include <string>
#include <vector>

#include "mia/autodiff.hpp"
#include "mia/rng.hpp"
#include "mia/text.hpp"

namespace mia::testing {

inline Tensor random_tensor(Shape shape, Rng& rng, double scale = 1.0) {
  Tensor t(std::move(shape));
  for (auto& v : t.values()) v = scale * rng.normal();
  return t;
}

inline double dot(const double* a, const double* b, std::size_t n) {
  double s = 0.0;
  for (std::size_t i = 0; i < n; ++i) s += a[i] * b[i];
  return s;
}

/// Plain cosine with the same epsilon on each norm as the library.
inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
  const double na = std::sqrt(dot(a.data(), a.data(), a.size())) + 1e-12;
  const double nb = std::sqrt(dot(b.data(), b.data(), b.size())) + 1e-12;
  return dot(a.data(), b.data(), a.size()) / (na * nb);
}

inline std::vector<double> softmax(const std::vector<double>& x) {
  double mx = x[0];
  for (double v : x) mx = std::max(mx, v);
  std::vector<double> e(x.size());
  double z = 0.0;
  for (std::size_t i = 0; i < x.size(); ++i) z += e[i] = std::exp(x[i] - mx);
  for (auto& v : e) v /= z;
  return e;
}

/// y = W x + b with W as [out, in].
inline std::vector<double> affine(const Tensor& w, const Tensor& b, const std::vector<double>& x) {
  std::vector<double> y(w.dim(0));
  for (std::size_t o = 0; o < w.dim(0); ++o) y[o] = dot(w.data() + o * w.dim(1), x.data(), x.size()) + b[o];
  return y;
}

inline std::vector<double> row(const Tensor& t, std::size_t r) {
  const std::size_t c = t.numel() / t.dim(0);
  return {t.data() + r * c, t.data() + (r + 1) * c};
}

/// Fresh scratch directory under the system temp dir.
inline std::filesystem::path scratch_dir(const std::string& name) {
  auto p = std::filesystem::temp_directory_path() / ("mia_test_" + name);
  std::filesystem::remove_all(p);
  std::filesystem::create_directories(p);
  return p;
}

inline text::Vocabulary small_vocab() {
  return text::Vocabulary({"red", "blue", "green", "yellow", "white", "black", "the", "a", "person", "man", "wears",
                           "has", "and", "with", "hat", "shirt", "pants", "cap", "shoes", "bag", "carries"});
}

}  // namespace mia::testing
