#include "resae/regression.hpp"

#include <cmath>
#include <string>

#include "resae/binio.hpp"

namespace resae {

AffineMap fit_affine(const MatD& x, const MatD& y, double lambda) {
  require(x.rows() == y.rows(), ErrorCode::kDimensionMismatch, "fit_affine: x and y not row-aligned");
  require(x.cols() == y.cols(), ErrorCode::kDimensionMismatch, "fit_affine: x and y widths differ");
  require(x.rows() >= x.cols(), ErrorCode::kInvalidArgument,
          "fit_affine: need rows >= d (" + std::to_string(x.rows()) + " < " + std::to_string(x.cols()) + ")");
  require(lambda >= 0.0 && std::isfinite(lambda), ErrorCode::kInvalidArgument,
          "fit_affine: lambda must be finite and >= 0");
  require(all_finite(x) && all_finite(y), ErrorCode::kNumerical, "fit_affine: non-finite input");

  const VecD x_mean = x.colwise().mean().transpose();
  const VecD y_mean = y.colwise().mean().transpose();
  const MatD xc = x.rowwise() - x_mean.transpose();
  const MatD yc = y.rowwise() - y_mean.transpose();

  MatD gram = xc.transpose() * xc;
  gram.diagonal().array() += lambda;
  const MatD rhs = xc.transpose() * yc;

  Eigen::LLT<MatD> llt(gram);
  bool ok = llt.info() == Eigen::Success;
  if (ok) {
    const VecD diag = llt.matrixL().toDenseMatrix().diagonal();
    ok = diag.minCoeff() > 1e-7 * diag.maxCoeff();
  }
  require(ok, ErrorCode::kNumerical,
          "fit_affine: regularized normal equations are singular (rank-deficient x; raise lambda)");

  AffineMap map;
  map.a = llt.solve(rhs).transpose();  // solves G A^T = Xc^T Yc
  map.c = y_mean - map.a * x_mean;
  map.ridge_lambda = lambda;
  map.n_fit_rows = static_cast<std::uint64_t>(x.rows());
  require(all_finite(map.a) && all_finite(map.c), ErrorCode::kNumerical, "fit_affine: non-finite solution");
  return map;
}

AffineMap fit_affine(const Mat& x, const Mat& y, double lambda) {
  return fit_affine(MatD(x.cast<double>()), MatD(y.cast<double>()), lambda);
}

double scaled_ridge_lambda(const Mat& x, double lambda_scale) {
  const MatD xd = x.cast<double>();
  const MatD xc = xd.rowwise() - xd.colwise().mean();
  return lambda_scale * xc.squaredNorm() / static_cast<double>(x.cols());
}

MatD predict(const AffineMap& map, const MatD& h_prev) {
  require(h_prev.cols() == map.dim(), ErrorCode::kDimensionMismatch, "predict: dimension mismatch");
  MatD out = h_prev * map.a.transpose();
  out.rowwise() += map.c.transpose();
  return out;
}

MatD predict(const AffineMap& map, const Mat& h_prev) {
  return predict(map, MatD(h_prev.cast<double>()));
}

MatD residualize(const Mat& h_next, const Mat& h_prev, const AffineMap& map) {
  require(h_next.rows() == h_prev.rows() && h_next.cols() == h_prev.cols(),
          ErrorCode::kDimensionMismatch, "residualize: h_next and h_prev not aligned");
  return h_next.cast<double>() - predict(map, h_prev);
}

Mat add_prediction(const MatD& residual, const Mat& h_prev, const AffineMap& map) {
  require(residual.rows() == h_prev.rows() && residual.cols() == h_prev.cols(),
          ErrorCode::kDimensionMismatch, "add_prediction: residual and h_prev not aligned");
  return (predict(map, h_prev) + residual).cast<float>();
}

MatD center_anchor(const Mat& h, const VecD& mu) {
  require(h.cols() == mu.size(), ErrorCode::kDimensionMismatch, "center_anchor: dimension mismatch");
  return h.cast<double>().rowwise() - mu.transpose();
}

BlockScale fit_block_scale(const MatD& r, double epsilon) {
  require(r.rows() >= 1, ErrorCode::kInvalidArgument, "fit_block_scale: no rows");
  require(epsilon > 0.0, ErrorCode::kInvalidArgument, "fit_block_scale: epsilon must be > 0");
  const double mean_sq = r.squaredNorm() / static_cast<double>(r.rows() * r.cols());
  return BlockScale{std::sqrt(mean_sq + epsilon), epsilon};
}

double r_squared(const AffineMap& map, const Mat& x, const Mat& y) {
  require(x.rows() == y.rows(), ErrorCode::kDimensionMismatch, "r_squared: rows not aligned");
  const MatD yd = y.cast<double>();
  const double ss_res = (yd - predict(map, x)).squaredNorm();
  const double ss_tot = (yd.rowwise() - yd.colwise().mean()).squaredNorm();
  require(ss_tot > 0.0, ErrorCode::kNumerical, "r_squared: held-out y has zero variance");
  return 1.0 - ss_res / ss_tot;
}

void RegressionChain::validate() const {
  require(!layer_set.empty(), ErrorCode::kInvalidArgument, "chain: empty layer set");
  for (std::size_t i = 1; i < layer_set.size(); ++i) {
    require(layer_set[i] > layer_set[i - 1], ErrorCode::kInvalidArgument,
            "chain: layer_set must be strictly increasing");
  }
  require(scales.size() == layer_set.size(), ErrorCode::kDimensionMismatch, "chain: one scale per block");
  for (const auto& s : scales) {
    require(s.sigma > 0.0 && std::isfinite(s.sigma), ErrorCode::kNumerical, "chain: scales must be positive");
  }
  if (kind == ChainKind::kResidual) {
    require(maps.size() + 1 == layer_set.size(), ErrorCode::kDimensionMismatch,
            "chain: residual chain needs M-1 maps");
    for (const auto& m : maps) {
      require(m.a.rows() == dim() && m.a.cols() == dim() && m.c.size() == dim(),
              ErrorCode::kDimensionMismatch, "chain: map dimension mismatch");
    }
  } else {
    require(maps.empty(), ErrorCode::kInvalidArgument, "chain: raw chain carries no maps");
  }
}

bool RegressionChain::operator==(const RegressionChain& o) const {
  if (kind != o.kind || layer_set != o.layer_set || scales != o.scales || epsilon != o.epsilon ||
      lambda_scale != o.lambda_scale || anchor_mean != o.anchor_mean || maps.size() != o.maps.size()) {
    return false;
  }
  for (std::size_t i = 0; i < maps.size(); ++i) {
    if (maps[i].a != o.maps[i].a || maps[i].c != o.maps[i].c || maps[i].ridge_lambda != o.maps[i].ridge_lambda ||
        maps[i].n_fit_rows != o.maps[i].n_fit_rows) {
      return false;
    }
  }
  return true;
}

std::vector<Mat> gather_layers(std::span<const ActivationShard> shards, std::span<const int> layers) {
  require(!shards.empty(), ErrorCode::kInvalidArgument, "no shards");
  Eigen::Index rows = 0;
  for (const auto& s : shards) rows += s.n_rows();
  const Eigen::Index d = shards.front().d_model();
  std::vector<Mat> out;
  for (int layer : layers) {
    Mat m(rows, d);
    Eigen::Index at = 0;
    for (const auto& s : shards) {
      require(s.d_model() == d, ErrorCode::kDimensionMismatch, "shards disagree on d_model");
      m.middleRows(at, s.n_rows()) = s.layer(layer);
      at += s.n_rows();
    }
    out.push_back(std::move(m));
  }
  return out;
}

RegressionChain calibrate_chain(std::span<const ActivationShard> shards, std::span<const int> layer_set,
                                const CalibrationOptions& options, CalibrationDiagnostics* diagnostics) {
  require(options.fit_fraction > 0.0 && options.fit_fraction <= 1.0, ErrorCode::kInvalidArgument,
          "calibrate_chain: fit_fraction must be in (0, 1]");
  std::vector<Mat> h = gather_layers(shards, layer_set);
  const Eigen::Index rows = h.front().rows();
  const Eigen::Index d = h.front().cols();
  const Eigen::Index fit_rows = std::max<Eigen::Index>(
      1, static_cast<Eigen::Index>(std::floor(static_cast<double>(rows) * options.fit_fraction)));
  const Eigen::Index held_rows = rows - fit_rows;
  require(fit_rows >= d, ErrorCode::kInvalidArgument,
          "calibrate_chain: fewer calibration rows than d_model");

  RegressionChain chain;
  chain.kind = ChainKind::kResidual;
  chain.layer_set.assign(layer_set.begin(), layer_set.end());
  chain.epsilon = options.epsilon;
  chain.lambda_scale = options.lambda_scale;

  const Mat anchor_fit = h[0].topRows(fit_rows);
  chain.anchor_mean = anchor_fit.cast<double>().colwise().mean().transpose();
  chain.scales.push_back(fit_block_scale(center_anchor(anchor_fit, chain.anchor_mean), options.epsilon));

  if (diagnostics != nullptr) {
    diagnostics->heldout_r2.clear();
    diagnostics->fit_rows = fit_rows;
    diagnostics->heldout_rows = held_rows;
  }
  for (std::size_t m = 0; m + 1 < h.size(); ++m) {
    const Mat x_fit = h[m].topRows(fit_rows);
    const Mat y_fit = h[m + 1].topRows(fit_rows);
    AffineMap map = fit_affine(x_fit, y_fit, scaled_ridge_lambda(x_fit, options.lambda_scale));
    chain.scales.push_back(fit_block_scale(residualize(y_fit, x_fit, map), options.epsilon));
    if (diagnostics != nullptr && held_rows >= 2) {
      diagnostics->heldout_r2.push_back(
          r_squared(map, h[m].bottomRows(held_rows), h[m + 1].bottomRows(held_rows)));
    }
    chain.maps.push_back(std::move(map));
  }
  chain.validate();
  return chain;
}

RegressionChain calibrate_raw_scales(std::span<const ActivationShard> shards,
                                     std::span<const int> layer_set, double epsilon) {
  std::vector<Mat> h = gather_layers(shards, layer_set);
  RegressionChain chain;
  chain.kind = ChainKind::kRaw;
  chain.layer_set.assign(layer_set.begin(), layer_set.end());
  chain.anchor_mean = VecD::Zero(h.front().cols());
  chain.epsilon = epsilon;
  chain.lambda_scale = 0.0;
  for (const Mat& m : h) chain.scales.push_back(fit_block_scale(m.cast<double>(), epsilon));
  chain.validate();
  return chain;
}

MatD block_target(const RegressionChain& chain, std::size_t block, const Mat& h_block, const Mat* h_prev) {
  require(block < chain.num_blocks(), ErrorCode::kOutOfRange, "block index out of range");
  const double s = chain.scales[block].scale();
  if (chain.kind == ChainKind::kRaw) return h_block.cast<double>() * s;
  if (block == 0) return center_anchor(h_block, chain.anchor_mean) * s;
  require(h_prev != nullptr, ErrorCode::kInvalidArgument, "residual target needs the previous layer");
  return residualize(h_block, *h_prev, chain.maps[block - 1]) * s;
}

Mat block_target(const RegressionChain& chain, std::size_t block, const ActivationShard& shard) {
  require(block < chain.num_blocks(), ErrorCode::kOutOfRange, "block index out of range");
  const Mat& h = shard.layer(chain.layer_set[block]);
  const Mat* prev = nullptr;
  if (chain.kind == ChainKind::kResidual && block > 0) prev = &shard.layer(chain.layer_set[block - 1]);
  return block_target(chain, block, h, prev).cast<float>();
}

// RCH1 layout (little-endian): "RCH1", u32 kind, u32 M, u32 layer[M], u32 d,
// f64 epsilon, f64 lambda_scale, f64 mu[d], u32 n_maps, per map
// {f64 A[d*d] row-major, f64 c[d], f64 lambda, u64 n_fit_rows}, per block
// {f64 sigma, f64 epsilon}.
void save_chain(const RegressionChain& chain, const std::filesystem::path& path) {
  chain.validate();
  binio::Writer w(path);
  w.magic("RCH1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(chain.kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(chain.layer_set.size()));
  for (int l : chain.layer_set) w.put<std::uint32_t>(static_cast<std::uint32_t>(l));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(chain.dim()));
  w.put<double>(chain.epsilon);
  w.put<double>(chain.lambda_scale);
  binio::put_matrix(w, chain.anchor_mean.transpose());
  w.put<std::uint32_t>(static_cast<std::uint32_t>(chain.maps.size()));
  for (const auto& m : chain.maps) {
    binio::put_matrix(w, m.a);
    binio::put_matrix(w, m.c.transpose());
    w.put<double>(m.ridge_lambda);
    w.put<std::uint64_t>(m.n_fit_rows);
  }
  for (const auto& s : chain.scales) {
    w.put<double>(s.sigma);
    w.put<double>(s.epsilon);
  }
  w.close();
}

RegressionChain load_chain(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("RCH1");
  RegressionChain chain;
  const auto kind = r.get<std::uint32_t>();
  require(kind <= 1, ErrorCode::kFormat, path.string() + ": unknown chain kind");
  chain.kind = static_cast<ChainKind>(kind);
  const auto m = r.get<std::uint32_t>();
  require(m >= 1 && m <= 4096, ErrorCode::kFormat, path.string() + ": implausible layer count");
  for (std::uint32_t i = 0; i < m; ++i) chain.layer_set.push_back(static_cast<int>(r.get<std::uint32_t>()));
  const auto d = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  require(d >= 1 && d <= 65536, ErrorCode::kFormat, path.string() + ": implausible dimension");
  chain.epsilon = r.get<double>();
  chain.lambda_scale = r.get<double>();
  chain.anchor_mean = binio::get_vector<double>(r, d);
  const auto n_maps = r.get<std::uint32_t>();
  require(n_maps < m, ErrorCode::kFormat, path.string() + ": too many maps");
  for (std::uint32_t i = 0; i < n_maps; ++i) {
    AffineMap map;
    map.a = binio::get_matrix<double>(r, d, d);
    map.c = binio::get_vector<double>(r, d);
    map.ridge_lambda = r.get<double>();
    map.n_fit_rows = r.get<std::uint64_t>();
    chain.maps.push_back(std::move(map));
  }
  for (std::uint32_t i = 0; i < m; ++i) {
    BlockScale s;
    s.sigma = r.get<double>();
    s.epsilon = r.get<double>();
    chain.scales.push_back(s);
  }
  r.expect_eof();
  try {
    chain.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, path.string() + ": " + e.what());
  }
  return chain;
}

}  // namespace resae
