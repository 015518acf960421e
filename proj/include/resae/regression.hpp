#pragma once

// Cross-layer affine residualization: ridge-fitted maps between consecutive
// selected layers, anchor centering and per-block RMS scales.
//
// Everything here is computed in double precision. Activations come in as
// f32; residuals stay f64 so that prediction + residual reproduces the f32
// activation exactly.

#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "resae/actstore.hpp"
#include "resae/tensor.hpp"

namespace resae {

struct AffineMap {
  MatD a;  // d x d, maps a column vector h_prev to A h_prev
  VecD c;
  double ridge_lambda = 0.0;
  std::uint64_t n_fit_rows = 0;

  Eigen::Index dim() const { return a.rows(); }
};

// argmin over (A, c) of sum ||y - A x - c||^2 + lambda ||A||_F^2.
// The intercept is not penalized.
AffineMap fit_affine(const MatD& x, const MatD& y, double lambda);
AffineMap fit_affine(const Mat& x, const Mat& y, double lambda);

// lambda_scale * trace(Xc^T Xc) / d for the centered rows of x.
double scaled_ridge_lambda(const Mat& x, double lambda_scale);

// A h_prev + c for every row.
MatD predict(const AffineMap& map, const Mat& h_prev);
MatD predict(const AffineMap& map, const MatD& h_prev);

// h_next - (A h_prev + c)
MatD residualize(const Mat& h_next, const Mat& h_prev, const AffineMap& map);

// Inverse of residualize: (A h_prev + c) + residual, rounded to f32.
Mat add_prediction(const MatD& residual, const Mat& h_prev, const AffineMap& map);

MatD center_anchor(const Mat& h, const VecD& mu);

struct BlockScale {
  double sigma = 1.0;
  double epsilon = 0.0;
  double scale() const { return 1.0 / sigma; }
  bool operator==(const BlockScale&) const = default;
};

// sigma = sqrt(mean(||r||^2 / d) + eps), S = 1 / sigma
BlockScale fit_block_scale(const MatD& r, double epsilon);

double r_squared(const AffineMap& map, const Mat& x, const Mat& y);

enum class ChainKind : std::uint32_t { kRaw = 0, kResidual = 1 };

struct RegressionChain {
  ChainKind kind = ChainKind::kResidual;
  std::vector<int> layer_set;
  VecD anchor_mean;              // zero for raw chains
  std::vector<AffineMap> maps;   // layer_set[m] -> layer_set[m + 1]; empty for raw
  std::vector<BlockScale> scales;
  double epsilon = 1e-6;
  double lambda_scale = 1e-4;

  std::size_t num_blocks() const { return layer_set.size(); }
  Eigen::Index dim() const { return anchor_mean.size(); }
  void validate() const;
  bool operator==(const RegressionChain& other) const;
};

struct CalibrationOptions {
  double lambda_scale = 1e-4;
  double epsilon = 1e-6;
  double fit_fraction = 0.8;
};

struct CalibrationDiagnostics {
  std::vector<double> heldout_r2;  // one per consecutive pair
  Eigen::Index fit_rows = 0;
  Eigen::Index heldout_rows = 0;
};

// Concatenates the listed layers of every shard, rows in order.
std::vector<Mat> gather_layers(std::span<const ActivationShard> shards, std::span<const int> layers);

RegressionChain calibrate_chain(std::span<const ActivationShard> shards, std::span<const int> layer_set,
                                const CalibrationOptions& options = {},
                                CalibrationDiagnostics* diagnostics = nullptr);

// Raw baseline: only per-layer RMS scales of the unresidualized activations.
RegressionChain calibrate_raw_scales(std::span<const ActivationShard> shards,
                                     std::span<const int> layer_set, double epsilon = 1e-6);

// SAE training target for block m computed from clean activations:
//   residual chain: S_1 (h_1 - mu_1) for the anchor, S_m (h_m - A h_{m-1} - c) after
//   raw chain:      S_m h_m
MatD block_target(const RegressionChain& chain, std::size_t block, const Mat& h_block,
                  const Mat* h_prev);
Mat block_target(const RegressionChain& chain, std::size_t block, const ActivationShard& shard);

void save_chain(const RegressionChain& chain, const std::filesystem::path& path);
RegressionChain load_chain(const std::filesystem::path& path);

}  // namespace resae
