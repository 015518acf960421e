#pragma once

// Shared fixtures for the test binaries.

#include <cstdint>
#include <filesystem>
#include <cmath>
#include <random>
#include <string>

#include <unistd.h>

#include "resae/actstore.hpp"
#include "resae/corpus.hpp"
#include "resae/tensor.hpp"
#include "resae/tinylm.hpp"

namespace resae::test {

// Fresh directory under the system temp dir, removed on destruction.
class TempDir {
 public:
  explicit TempDir(const std::string& tag) {
    static int counter = 0;
    path_ = std::filesystem::temp_directory_path() /
            ("resae_" + tag + "_" + std::to_string(::getpid()) + "_" + std::to_string(counter++));
    std::filesystem::remove_all(path_);
    std::filesystem::create_directories(path_);
  }
  ~TempDir() {
    std::error_code ec;
    std::filesystem::remove_all(path_, ec);
  }
  TempDir(const TempDir&) = delete;
  TempDir& operator=(const TempDir&) = delete;

  const std::filesystem::path& path() const { return path_; }
  std::filesystem::path operator/(const std::string& name) const { return path_ / name; }

 private:
  std::filesystem::path path_;
};

template <typename M>
M random_matrix(Eigen::Index rows, Eigen::Index cols, std::mt19937_64& rng, double scale = 1.0) {
  std::normal_distribution<double> n(0.0, scale);
  M m(rows, cols);
  for (Eigen::Index i = 0; i < rows; ++i) {
    for (Eigen::Index j = 0; j < cols; ++j) m(i, j) = static_cast<typename M::Scalar>(n(rng));
  }
  return m;
}

inline LmConfig small_lm_config(int n_layers = 4, int d_model = 16, std::uint64_t seed = 7) {
  LmConfig c;
  c.n_layers = n_layers;
  c.d_model = d_model;
  c.n_heads = 2;
  c.d_ff = 4 * d_model;
  c.context_len = 32;
  c.seed = seed;
  return c;
}

inline Corpus small_corpus(int doc_len = 32, std::size_t n_docs = 256, std::uint64_t seed = 3) {
  SyntheticCorpusOptions o;
  o.doc_len = doc_len;
  o.n_docs = n_docs;
  o.seed = seed;
  return generate_synthetic_corpus(o);
}

// Shard with random shape, values, origins and (optionally) labels.
inline ActivationShard random_shard(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> n_layers(1, 4), d(1, 12), rows(1, 40), coin(0, 1), step(1, 3);
  ActivationShard s;
  int layer = std::uniform_int_distribution<int>(0, 2)(rng);
  for (int i = n_layers(rng); i > 0; --i) {
    s.layer_set.push_back(layer);
    layer += step(rng);
  }
  const Eigen::Index r = rows(rng), c = d(rng);
  for (std::size_t i = 0; i < s.layer_set.size(); ++i) s.data.push_back(random_matrix<Mat>(r, c, rng, 3.0));
  const bool labeled = coin(rng) == 1;
  std::uniform_int_distribution<std::uint32_t> u32;
  for (Eigen::Index i = 0; i < r; ++i) {
    s.origins.push_back({u32(rng), u32(rng)});
    if (labeled) s.labels.push_back(static_cast<std::int32_t>(u32(rng) % 7));
  }
  return s;
}

// Random affine-regression instance: y = x B + c + noise, with d <= 8 and
// rows <= 128; some instances are nearly collinear.
struct RidgeInstance {
  MatD x, y;
  double lambda = 0.0;
};

inline RidgeInstance random_ridge_instance(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 8);
  const Eigen::Index d = dim(rng);
  const Eigen::Index rows = std::uniform_int_distribution<Eigen::Index>(d + 2, 128)(rng);
  RidgeInstance r;
  r.x = random_matrix<MatD>(rows, d, rng, 2.0);
  if (d > 1 && std::uniform_int_distribution<int>(0, 3)(rng) == 0) {
    r.x.col(d - 1) = r.x.col(0) + 1e-3 * random_matrix<MatD>(rows, 1, rng);
  }
  const MatD b = random_matrix<MatD>(d, d, rng);
  const MatD noise = random_matrix<MatD>(rows, d, rng, 0.1);
  r.y = r.x * b + noise;
  r.y.rowwise() += random_matrix<MatD>(1, d, rng, 5.0).row(0);
  const double scale = std::uniform_real_distribution<double>(-4.0, 1.0)(rng);
  const MatD xc = r.x.rowwise() - r.x.colwise().mean();
  r.lambda = std::pow(10.0, scale) * xc.squaredNorm() / static_cast<double>(d);
  return r;
}

inline double rel_err(double got, double want) { return std::abs(got - want) / std::max(1e-12, std::abs(want)); }

template <typename A, typename B>
double rel_frobenius(const A& got, const B& want) {
  return (got - want).norm() / std::max(1e-300, static_cast<double>(want.norm()));
}

}  // namespace resae::test
