#include "resae/sae.hpp"

#include <algorithm>
#include <cmath>
#include <random>
#include <string>
#include <tuple>

#include "resae/binio.hpp"

namespace resae {

template <typename T>
SaeParamsT<T> SaeParamsT<T>::init(Eigen::Index dict_size, Eigen::Index dim, int k, std::uint64_t seed) {
  require(dict_size >= 1 && dim >= 1, ErrorCode::kInvalidArgument, "SAE dimensions must be >= 1");
  require(k >= 1 && k <= dict_size, ErrorCode::kInvalidArgument, "SAE k must be in [1, N]");
  std::mt19937_64 rng(seed);
  std::normal_distribution<double> normal(0.0, 1.0);
  SaeParamsT p;
  p.w_enc.resize(dict_size, dim);
  for (Eigen::Index j = 0; j < dict_size; ++j) {
    VecD row(dim);
    for (Eigen::Index i = 0; i < dim; ++i) row(i) = normal(rng);
    row.normalize();
    p.w_enc.row(j) = row.transpose().cast<T>();
  }
  p.b_enc = VecT<T>::Zero(dict_size);
  p.w_dec = p.w_enc.transpose();
  p.b_dec = VecT<T>::Zero(dim);
  p.k = k;
  return p;
}

template <typename T>
void SaeParamsT<T>::validate() const {
  const Eigen::Index n = dict_size(), d = dim();
  require(n >= 1 && d >= 1, ErrorCode::kInvalidArgument, "SAE: empty parameters");
  require(b_enc.size() == n && w_dec.rows() == d && w_dec.cols() == n && b_dec.size() == d,
          ErrorCode::kDimensionMismatch, "SAE: inconsistent parameter shapes");
  require(k >= 1 && k <= n, ErrorCode::kInvalidArgument, "SAE: k must be in [1, N]");
  require(all_finite(w_enc) && all_finite(b_enc) && all_finite(w_dec) && all_finite(b_dec),
          ErrorCode::kNumerical, "SAE: non-finite parameters");
  for (Eigen::Index j = 0; j < n; ++j) {
    require(w_dec.col(j).squaredNorm() > T(0), ErrorCode::kNumerical,
            "SAE: decoder column " + std::to_string(j) + " is zero");
  }
}

template <typename T>
MatT<T> SparseCodesT<T>::dense() const {
  MatT<T> out = MatT<T>::Zero(rows, n_latents);
  for (Eigen::Index r = 0; r < rows; ++r) {
    for (std::size_t e = offset[static_cast<std::size_t>(r)]; e < offset[static_cast<std::size_t>(r) + 1]; ++e) {
      out(r, index[e]) = value[e];
    }
  }
  return out;
}

template <typename T>
MatT<T> pre_activations(const SaeParamsT<T>& sae, const MatT<T>& z) {
  require(z.cols() == sae.dim(), ErrorCode::kDimensionMismatch,
          "encode: input width " + std::to_string(z.cols()) + " != SAE dim " + std::to_string(sae.dim()));
  MatT<T> a = z * sae.w_enc.transpose();
  a.rowwise() += sae.b_enc.transpose();
  return a;
}

template <typename T>
SparseCodesT<T> topk_per_token(const MatT<T>& a, int k) {
  require(k >= 1, ErrorCode::kInvalidArgument, "k must be >= 1");
  SparseCodesT<T> codes;
  codes.rows = a.rows();
  codes.n_latents = a.cols();
  codes.offset.reserve(static_cast<std::size_t>(a.rows()) + 1);
  codes.index.reserve(static_cast<std::size_t>(a.rows()) * static_cast<std::size_t>(k));
  codes.value.reserve(codes.index.capacity());
  std::vector<std::int32_t> cand;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    cand.clear();
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (a(r, j) > T(0)) cand.push_back(static_cast<std::int32_t>(j));
    }
    if (cand.size() > static_cast<std::size_t>(k)) {
      auto better = [&a, r](std::int32_t i, std::int32_t j) {
        return a(r, i) > a(r, j) || (a(r, i) == a(r, j) && i < j);
      };
      std::nth_element(cand.begin(), cand.begin() + k, cand.end(), better);
      cand.resize(static_cast<std::size_t>(k));
      std::sort(cand.begin(), cand.end());
    }
    for (std::int32_t j : cand) {
      codes.index.push_back(j);
      codes.value.push_back(a(r, j));
    }
    codes.offset.push_back(codes.index.size());
  }
  return codes;
}

template <typename T>
SparseCodesT<T> topk_batch(const MatT<T>& a, int k, T* min_selected) {
  require(k >= 1, ErrorCode::kInvalidArgument, "k must be >= 1");
  struct Entry {
    T v;
    std::int32_t r, j;
  };
  std::vector<Entry> cand;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (Eigen::Index j = 0; j < a.cols(); ++j) {
      if (a(r, j) > T(0)) cand.push_back({a(r, j), static_cast<std::int32_t>(r), static_cast<std::int32_t>(j)});
    }
  }
  const std::size_t budget = static_cast<std::size_t>(a.rows()) * static_cast<std::size_t>(k);
  if (cand.size() > budget) {
    std::nth_element(cand.begin(), cand.begin() + static_cast<std::ptrdiff_t>(budget), cand.end(),
                     [](const Entry& x, const Entry& y) {
                       return std::tie(y.v, x.r, x.j) < std::tie(x.v, y.r, y.j);
                     });
    cand.resize(budget);
  }
  T lowest = 0;
  if (!cand.empty()) {
    lowest = cand.front().v;
    for (const Entry& e : cand) lowest = std::min(lowest, e.v);
  }
  if (min_selected != nullptr) *min_selected = lowest;
  std::sort(cand.begin(), cand.end(), [](const Entry& x, const Entry& y) { return std::tie(x.r, x.j) < std::tie(y.r, y.j); });

  SparseCodesT<T> codes;
  codes.rows = a.rows();
  codes.n_latents = a.cols();
  std::size_t e = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    for (; e < cand.size() && cand[e].r == r; ++e) {
      codes.index.push_back(cand[e].j);
      codes.value.push_back(cand[e].v);
    }
    codes.offset.push_back(codes.index.size());
  }
  return codes;
}

template <typename T>
SparseCodesT<T> threshold_codes(const MatT<T>& a, T threshold, int k) {
  MatT<T> masked = a;
  const T floor = std::max(threshold, T(0));
  masked = (masked.array() > floor).select(masked, T(0));
  return topk_per_token(masked, k);
}

template <typename T>
SparseCodesT<T> encode(const SaeParamsT<T>& sae, const MatT<T>& z) {
  const MatT<T> a = pre_activations(sae, z);
  if (sae.topk_mode == TopKMode::kBatch && sae.threshold > T(0)) return threshold_codes(a, sae.threshold, sae.k);
  return topk_per_token(a, sae.k);
}

template <typename T>
MatT<T> decode(const SaeParamsT<T>& sae, const SparseCodesT<T>& codes) {
  require(codes.n_latents == sae.dict_size(), ErrorCode::kDimensionMismatch, "decode: code width != N");
  MatT<T> out(codes.rows, sae.dim());
  out.rowwise() = sae.b_dec.transpose();
  for (Eigen::Index r = 0; r < codes.rows; ++r) {
    for (std::size_t e = codes.offset[static_cast<std::size_t>(r)]; e < codes.offset[static_cast<std::size_t>(r) + 1]; ++e) {
      out.row(r).noalias() += codes.value[e] * sae.w_dec.col(codes.index[e]).transpose();
    }
  }
  return out;
}

template <typename T>
double sae_loss(const MatT<T>& z, const MatT<T>& z_hat) {
  require(z.rows() == z_hat.rows() && z.cols() == z_hat.cols(), ErrorCode::kDimensionMismatch,
          "sae_loss: shape mismatch");
  require(z.rows() >= 1, ErrorCode::kInvalidArgument, "sae_loss: empty batch");
  double total = 0.0;
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    total += (z.row(r).template cast<double>() - z_hat.row(r).template cast<double>()).squaredNorm();
  }
  return total / static_cast<double>(z.rows() * z.cols());
}

template <typename T>
SaeGradT<T> backward(const SaeParamsT<T>& sae, const MatT<T>& z, const SparseCodesT<T>& codes,
                     const MatT<T>& z_hat) {
  require(z.rows() >= 1, ErrorCode::kInvalidArgument, "backward: empty batch");
  const Eigen::Index n = sae.dict_size(), d = sae.dim();
  SaeGradT<T> g;
  g.w_enc = MatT<T>::Zero(n, d);
  g.b_enc = VecT<T>::Zero(n);
  g.w_dec = ColMatT<T>::Zero(d, n);
  const MatT<T> dz = (z_hat - z) * (T(2) / static_cast<T>(d * z.rows()));
  g.b_dec = dz.colwise().sum().transpose();
  for (Eigen::Index r = 0; r < z.rows(); ++r) {
    for (std::size_t e = codes.offset[static_cast<std::size_t>(r)]; e < codes.offset[static_cast<std::size_t>(r) + 1]; ++e) {
      const std::int32_t j = codes.index[e];
      g.w_dec.col(j).noalias() += codes.value[e] * dz.row(r).transpose();
      const T df = dz.row(r).dot(sae.w_dec.col(j));
      g.b_enc(j) += df;
      g.w_enc.row(j).noalias() += df * z.row(r);
    }
  }
  return g;
}

template <typename T>
SaeGradT<T> backward(const SaeParamsT<T>& sae, const MatT<T>& z) {
  const SparseCodesT<T> codes = topk_per_token(pre_activations(sae, z), sae.k);
  return backward(sae, z, codes, decode(sae, codes));
}

#define RESAE_INSTANTIATE(T)                                                                     \
  template struct SaeParamsT<T>;                                                                 \
  template struct SparseCodesT<T>;                                                               \
  template MatT<T> pre_activations(const SaeParamsT<T>&, const MatT<T>&);                        \
  template SparseCodesT<T> topk_per_token(const MatT<T>&, int);                                  \
  template SparseCodesT<T> topk_batch(const MatT<T>&, int, T*);                                  \
  template SparseCodesT<T> threshold_codes(const MatT<T>&, T, int);                              \
  template SparseCodesT<T> encode(const SaeParamsT<T>&, const MatT<T>&);                         \
  template MatT<T> decode(const SaeParamsT<T>&, const SparseCodesT<T>&);                         \
  template double sae_loss(const MatT<T>&, const MatT<T>&);                                      \
  template SaeGradT<T> backward(const SaeParamsT<T>&, const MatT<T>&, const SparseCodesT<T>&,    \
                                const MatT<T>&);                                                 \
  template SaeGradT<T> backward(const SaeParamsT<T>&, const MatT<T>&);

RESAE_INSTANTIATE(float)
RESAE_INSTANTIATE(double)
#undef RESAE_INSTANTIATE

void TrainConfig::validate() const {
  require(lr > 0.0f, ErrorCode::kInvalidArgument, "TrainConfig: lr must be > 0");
  require(warmup_steps >= 0, ErrorCode::kInvalidArgument, "TrainConfig: warmup_steps must be >= 0");
  require(decay_fraction >= 0.0 && decay_fraction < 1.0, ErrorCode::kInvalidArgument,
          "TrainConfig: decay_fraction must be in [0, 1)");
  require(batch_rows >= 1 && total_rows >= 0, ErrorCode::kInvalidArgument,
          "TrainConfig: batch_rows must be >= 1 and total_rows >= 0");
  require(threshold_ema > 0.0 && threshold_ema < 1.0, ErrorCode::kInvalidArgument,
          "TrainConfig: threshold_ema must be in (0, 1)");
}

double learning_rate_at(const TrainConfig& config, std::int64_t step) {
  const std::int64_t steps = config.steps();
  double lr = config.lr;
  if (config.warmup_steps > 0 && step < config.warmup_steps) {
    lr *= static_cast<double>(step + 1) / config.warmup_steps;
  }
  const auto decay_steps = static_cast<std::int64_t>(std::floor(config.decay_fraction * static_cast<double>(steps)));
  const std::int64_t decay_start = steps - decay_steps;
  if (decay_steps > 0 && step >= decay_start) {
    lr *= static_cast<double>(steps - step) / static_cast<double>(decay_steps);
  }
  return lr;
}

AdamState AdamState::zeros_like(const SaeParams& sae) {
  AdamState s;
  for (SaeGrad* g : {&s.m, &s.v}) {
    g->w_enc = Mat::Zero(sae.w_enc.rows(), sae.w_enc.cols());
    g->b_enc = Vec::Zero(sae.b_enc.size());
    g->w_dec = ColMatT<float>::Zero(sae.w_dec.rows(), sae.w_dec.cols());
    g->b_dec = Vec::Zero(sae.b_dec.size());
  }
  return s;
}

void ThresholdEma::update(double value) {
  if (!initialized_) {
    value_ = value;
    initialized_ = true;
  } else {
    value_ = decay_ * value_ + (1.0 - decay_) * value;
  }
}

namespace {

template <typename P, typename G>
void adam_update(P& param, const G& grad, G& m, G& v, double lr, double bc1, double bc2) {
  constexpr float beta1 = 0.9f, beta2 = 0.999f, eps = 1e-8f;
  m.array() = beta1 * m.array() + (1.0f - beta1) * grad.array();
  v.array() = beta2 * v.array() + (1.0f - beta2) * grad.array().square();
  const float step = static_cast<float>(lr / bc1);
  const float inv_bc2 = static_cast<float>(1.0 / bc2);
  param.array() -= step * m.array() / ((v.array() * inv_bc2).sqrt() + eps);
}

}  // namespace

StepResult train_step(SaeParams& sae, AdamState& adam, const Mat& batch, double lr,
                      const TrainConfig& config, std::vector<std::uint64_t>* latent_counts) {
  StepResult result;
  const Mat a = pre_activations(sae, batch);
  float min_selected = 0.0f;
  const SparseCodes codes = config.topk_mode == TopKMode::kBatch ? topk_batch(a, sae.k, &min_selected)
                                                                 : topk_per_token(a, sae.k);
  const Mat z_hat = decode(sae, codes);
  result.loss = sae_loss(batch, z_hat);
  result.selection_threshold = min_selected;
  require(std::isfinite(result.loss), ErrorCode::kNumerical,
          "non-finite SAE loss at optimizer step " + std::to_string(adam.t) + " (lr=" + std::to_string(lr) +
              ", max |z|=" + std::to_string(batch.cwiseAbs().maxCoeff()) + ")");
  if (latent_counts != nullptr) {
    for (std::int32_t j : codes.index) ++(*latent_counts)[static_cast<std::size_t>(j)];
  }
  const SaeGrad g = backward(sae, batch, codes, z_hat);
  ++adam.t;
  const double bc1 = 1.0 - std::pow(0.9, static_cast<double>(adam.t));
  const double bc2 = 1.0 - std::pow(0.999, static_cast<double>(adam.t));
  adam_update(sae.w_enc, g.w_enc, adam.m.w_enc, adam.v.w_enc, lr, bc1, bc2);
  adam_update(sae.b_enc, g.b_enc, adam.m.b_enc, adam.v.b_enc, lr, bc1, bc2);
  adam_update(sae.w_dec, g.w_dec, adam.m.w_dec, adam.v.w_dec, lr, bc1, bc2);
  adam_update(sae.b_dec, g.b_dec, adam.m.b_dec, adam.v.b_dec, lr, bc1, bc2);
  return result;
}

namespace {

// Fills `batch` with exactly `rows` rows, rewinding the stream at its end.
void fill_batch(RowStream& stream, Mat& batch, Eigen::Index rows) {
  batch.resize(rows, stream.cols());
  Mat chunk;
  Eigen::Index have = 0;
  bool rewound = false;
  while (have < rows) {
    const Eigen::Index got = stream.next(chunk, rows - have);
    if (got == 0) {
      require(!rewound || have > 0, ErrorCode::kInvalidArgument, "row stream is empty");
      stream.rewind();
      rewound = true;
      continue;
    }
    batch.middleRows(have, got) = chunk;
    have += got;
    rewound = false;
  }
}

}  // namespace

SaeParams train_sae(RowStream& stream, const TrainConfig& config, const SaeInit& init, SaeTrainStats* stats) {
  config.validate();
  SaeParams sae = SaeParams::init(init.dict_size, stream.cols(), init.k, config.seed);
  sae.target_kind = init.target_kind;
  sae.block_index = init.block_index;
  sae.topk_mode = config.topk_mode;

  const std::int64_t steps = config.steps();
  SaeTrainStats local;
  SaeTrainStats& st = stats != nullptr ? *stats : local;
  st = SaeTrainStats{};
  st.steps = steps;
  st.latent_counts.assign(static_cast<std::size_t>(init.dict_size), 0);
  if (steps == 0) return sae;

  AdamState adam = AdamState::zeros_like(sae);
  ThresholdEma ema(config.threshold_ema);
  Mat batch;
  stream.rewind();
  {
    // Precondition: one full batch without wrapping.
    Mat probe;
    Eigen::Index have = 0, got = 0;
    while (have < config.batch_rows && (got = stream.next(probe, config.batch_rows - have)) > 0) have += got;
    require(have >= config.batch_rows, ErrorCode::kInvalidArgument,
            "row stream shorter than one batch (" + std::to_string(have) + " < " +
                std::to_string(config.batch_rows) + " rows)");
    stream.rewind();
  }
  st.loss_history.reserve(static_cast<std::size_t>(steps));
  for (std::int64_t step = 0; step < steps; ++step) {
    fill_batch(stream, batch, config.batch_rows);
    const StepResult r = train_step(sae, adam, batch, learning_rate_at(config, step), config, &st.latent_counts);
    st.loss_history.push_back(r.loss);
    if (config.topk_mode == TopKMode::kBatch) ema.update(r.selection_threshold);
  }
  if (config.topk_mode == TopKMode::kBatch) sae.threshold = static_cast<float>(ema.value());

  st.initial_loss = st.loss_history.front();
  const std::size_t tail = std::max<std::size_t>(1, st.loss_history.size() / 20);
  double sum = 0.0;
  for (std::size_t i = st.loss_history.size() - tail; i < st.loss_history.size(); ++i) sum += st.loss_history[i];
  st.final_loss = sum / static_cast<double>(tail);
  const auto dead = std::count(st.latent_counts.begin(), st.latent_counts.end(), 0u);
  st.dead_fraction = static_cast<double>(dead) / static_cast<double>(init.dict_size);
  return sae;
}

double batch_topk_threshold(const SaeParams& sae, RowStream& stream, Eigen::Index batch_rows, double decay) {
  require(sae.topk_mode == TopKMode::kBatch, ErrorCode::kState,
          "batch_topk_threshold called on a per-token SAE");
  require(batch_rows >= 1, ErrorCode::kInvalidArgument, "batch_rows must be >= 1");
  ThresholdEma ema(decay);
  Mat batch;
  stream.rewind();
  while (stream.next(batch, batch_rows) > 0) {
    float lowest = 0.0f;
    topk_batch(pre_activations(sae, batch), sae.k, &lowest);
    ema.update(lowest);
  }
  require(ema.initialized(), ErrorCode::kInvalidArgument, "batch_topk_threshold: empty stream");
  return ema.value();
}

// SAE1 layout (little-endian): "SAE1", u32 N, u32 d, u32 k, u32 target_kind,
// u32 block_index, u32 topk_mode, f32 threshold, then f32 W_e[N][d], b_e[N],
// W_d[d][N] (row-major), b_d[d].
void save_sae(const SaeParams& sae, const std::filesystem::path& path) {
  sae.validate();
  binio::Writer w(path);
  w.magic("SAE1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sae.dict_size()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sae.dim()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sae.k));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sae.target_kind));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sae.block_index));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(sae.topk_mode));
  w.put<float>(sae.threshold);
  binio::put_matrix(w, sae.w_enc);
  binio::put_matrix(w, sae.b_enc.transpose());
  binio::put_matrix(w, sae.w_dec);
  binio::put_matrix(w, sae.b_dec.transpose());
  w.close();
}

SaeParams load_sae(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("SAE1");
  SaeParams sae;
  const auto n = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  const auto d = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  sae.k = static_cast<int>(r.get<std::uint32_t>());
  const auto target = r.get<std::uint32_t>();
  sae.block_index = static_cast<int>(r.get<std::uint32_t>());
  const auto mode = r.get<std::uint32_t>();
  require(n >= 1 && n <= (1 << 24) && d >= 1 && d <= 65536 && target <= 1 && mode <= 1, ErrorCode::kFormat,
          path.string() + ": implausible SAE header");
  sae.target_kind = static_cast<TargetKind>(target);
  sae.topk_mode = static_cast<TopKMode>(mode);
  sae.threshold = r.get<float>();
  sae.w_enc = binio::get_matrix<float>(r, n, d);
  sae.b_enc = binio::get_vector<float>(r, n);
  sae.w_dec = binio::get_matrix<float>(r, d, n);
  sae.b_dec = binio::get_vector<float>(r, d);
  r.expect_eof();
  try {
    sae.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, path.string() + ": " + e.what());
  }
  return sae;
}

}  // namespace resae
