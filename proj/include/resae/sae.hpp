#pragma once

// TopK sparse autoencoder with hand-derived gradients.
//
//   a     = W_e z + b_e
//   f     = TopK_k(ReLU(a))
//   z_hat = W_d f + b_d
//   loss  = mean over rows of ||z - z_hat||^2 / d
//
// Gradients treat the TopK/ReLU selection as fixed at its forward value.

#include <cstdint>
#include <filesystem>
#include <vector>

#include "resae/actstore.hpp"
#include "resae/tensor.hpp"

namespace resae {

enum class TargetKind : std::uint32_t { kRaw = 0, kResidual = 1 };
enum class TopKMode : std::uint32_t { kPerToken = 0, kBatch = 1 };

template <typename T>
using ColMatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::ColMajor>;

template <typename T>
struct SaeParamsT {
  MatT<T> w_enc;     // N x d
  VecT<T> b_enc;     // N
  ColMatT<T> w_dec;  // d x N, one dictionary direction per column
  VecT<T> b_dec;     // d
  int k = 1;
  TargetKind target_kind = TargetKind::kRaw;
  int block_index = 0;
  TopKMode topk_mode = TopKMode::kPerToken;
  T threshold = 0;   // batch-mode inference threshold; 0 until estimated

  Eigen::Index dict_size() const { return w_enc.rows(); }
  Eigen::Index dim() const { return w_enc.cols(); }
  std::size_t num_parameters() const {
    return static_cast<std::size_t>(w_enc.size() + b_enc.size() + w_dec.size() + b_dec.size());
  }

  // Encoder rows uniform on the unit sphere, W_d = W_e^T, zero biases.
  static SaeParamsT init(Eigen::Index dict_size, Eigen::Index dim, int k, std::uint64_t seed);

  void validate() const;

  template <typename U>
  SaeParamsT<U> cast() const {
    SaeParamsT<U> out;
    out.w_enc = w_enc.template cast<U>();
    out.b_enc = b_enc.template cast<U>();
    out.w_dec = w_dec.template cast<U>();
    out.b_dec = b_dec.template cast<U>();
    out.k = k;
    out.target_kind = target_kind;
    out.block_index = block_index;
    out.topk_mode = topk_mode;
    out.threshold = static_cast<U>(threshold);
    return out;
  }

  bool operator==(const SaeParamsT& o) const {
    return w_enc == o.w_enc && b_enc == o.b_enc && w_dec == o.w_dec && b_dec == o.b_dec && k == o.k &&
           target_kind == o.target_kind && block_index == o.block_index && topk_mode == o.topk_mode &&
           threshold == o.threshold;
  }
};

using SaeParams = SaeParamsT<float>;

// Row-sparse code matrix: entries for row r live in [offset[r], offset[r+1]),
// sorted by latent index.
template <typename T>
struct SparseCodesT {
  Eigen::Index rows = 0;
  Eigen::Index n_latents = 0;
  std::vector<std::size_t> offset{0};
  std::vector<std::int32_t> index;
  std::vector<T> value;

  std::size_t nnz(Eigen::Index row) const {
    return offset[static_cast<std::size_t>(row) + 1] - offset[static_cast<std::size_t>(row)];
  }
  MatT<T> dense() const;
};

using SparseCodes = SparseCodesT<float>;

template <typename T>
MatT<T> pre_activations(const SaeParamsT<T>& sae, const MatT<T>& z);

// Exactly the k largest strictly positive entries of each row; ties go to the
// lower latent index. Rows with fewer than k positives keep all of them.
template <typename T>
SparseCodesT<T> topk_per_token(const MatT<T>& a, int k);

// The rows*k largest positive entries of the whole batch (ties: lower row,
// then lower latent index). `min_selected` receives the smallest selected
// value, or 0 if nothing was selected.
template <typename T>
SparseCodesT<T> topk_batch(const MatT<T>& a, int k, T* min_selected = nullptr);

// Batch-mode inference: entries above `threshold`, capped at k per row.
template <typename T>
SparseCodesT<T> threshold_codes(const MatT<T>& a, T threshold, int k);

// Inference-time encoding using the SAE's own topk_mode.
template <typename T>
SparseCodesT<T> encode(const SaeParamsT<T>& sae, const MatT<T>& z);

template <typename T>
MatT<T> decode(const SaeParamsT<T>& sae, const SparseCodesT<T>& codes);

template <typename T>
MatT<T> reconstruct(const SaeParamsT<T>& sae, const MatT<T>& z) {
  return decode(sae, encode(sae, z));
}

// Mean over rows of ||z - z_hat||^2 / d.
template <typename T>
double sae_loss(const MatT<T>& z, const MatT<T>& z_hat);

template <typename T>
struct SaeGradT {
  MatT<T> w_enc;
  VecT<T> b_enc;
  ColMatT<T> w_dec;
  VecT<T> b_dec;
};

using SaeGrad = SaeGradT<float>;

// Gradient of sae_loss(z, decode(codes)) with the selection in `codes` fixed.
template <typename T>
SaeGradT<T> backward(const SaeParamsT<T>& sae, const MatT<T>& z, const SparseCodesT<T>& codes,
                     const MatT<T>& z_hat);

// Convenience: forward with the per-token rule, then backward.
template <typename T>
SaeGradT<T> backward(const SaeParamsT<T>& sae, const MatT<T>& z);

struct TrainConfig {
  float lr = 3e-4f;
  int warmup_steps = 1000;
  double decay_fraction = 0.2;
  Eigen::Index batch_rows = 1024;
  std::int64_t total_rows = 5'000'000;
  std::uint64_t seed = 0;
  TopKMode topk_mode = TopKMode::kPerToken;
  double threshold_ema = 0.99;

  void validate() const;
  std::int64_t steps() const { return total_rows / batch_rows; }
};

// Peak rate during warmup ramp, flat middle, linear decay to zero over the
// final decay_fraction of steps.
double learning_rate_at(const TrainConfig& config, std::int64_t step);

struct AdamState {
  SaeGrad m, v;
  std::int64_t t = 0;
  static AdamState zeros_like(const SaeParams& sae);
};

// Exponential moving average of per-batch selection thresholds.
class ThresholdEma {
 public:
  explicit ThresholdEma(double decay) : decay_(decay) {}
  void update(double value);
  double value() const { return value_; }
  bool initialized() const { return initialized_; }

 private:
  double decay_;
  double value_ = 0.0;
  bool initialized_ = false;
};

struct StepResult {
  double loss = 0.0;
  double selection_threshold = 0.0;  // batch mode only
};

// One optimizer step on one block's parameters; touches nothing else.
StepResult train_step(SaeParams& sae, AdamState& adam, const Mat& batch, double lr,
                      const TrainConfig& config, std::vector<std::uint64_t>* latent_counts = nullptr);

struct SaeInit {
  Eigen::Index dict_size = 1024;
  int k = 32;
  TargetKind target_kind = TargetKind::kRaw;
  int block_index = 0;
};

struct SaeTrainStats {
  std::int64_t steps = 0;
  double initial_loss = 0.0;
  double final_loss = 0.0;  // mean over the last 5% of steps
  std::vector<double> loss_history;
  std::vector<std::uint64_t> latent_counts;
  double dead_fraction = 0.0;
};

SaeParams train_sae(RowStream& stream, const TrainConfig& config, const SaeInit& init,
                    SaeTrainStats* stats = nullptr);

// EMA estimate of the batch-mode selection threshold over a stream.
double batch_topk_threshold(const SaeParams& sae, RowStream& stream, Eigen::Index batch_rows,
                            double decay = 0.99);

void save_sae(const SaeParams& sae, const std::filesystem::path& path);
SaeParams load_sae(const std::filesystem::path& path);

}  // namespace resae
