#pragma once

// Byte-level decoder-only transformer with residual-stream hooks.
//
// Architecture: token + learned position embeddings, pre-norm blocks
// (LayerNorm -> causal multi-head attention -> add, LayerNorm -> GELU MLP ->
// add), final LayerNorm and an untied unembedding. No dropout.
//
// Hook point m is the residual stream after block m (post-block placement),
// or optionally the output of block m's first LayerNorm (the attention input).

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "resae/tensor.hpp"

namespace resae {

struct LmConfig {
  int n_layers = 8;
  int d_model = 64;
  int n_heads = 4;
  int d_ff = 256;
  int vocab_size = 256;
  int context_len = 128;
  std::uint64_t seed = 0;

  void validate() const;
  bool operator==(const LmConfig&) const = default;
};

enum class HookPlacement : std::uint8_t { kPostBlock = 0, kPostLayerNorm = 1 };

// A batch of equal-length byte sequences. Row r of every activation matrix is
// (sequence r / seq_len, position r % seq_len).
struct TokenBatch {
  int batch = 0;
  int seq_len = 0;
  std::vector<std::uint8_t> tokens;

  Eigen::Index rows() const { return static_cast<Eigen::Index>(batch) * seq_len; }
  void validate() const;
};

template <typename T>
using HookFnT = std::function<MatT<T>(int layer, const MatT<T>& arriving)>;

// Ordered (layer, write function) pairs. Layers must be strictly increasing.
template <typename T>
class HookSetT {
 public:
  struct Entry {
    int layer;
    HookFnT<T> fn;
  };

  HookSetT() = default;
  explicit HookSetT(HookPlacement placement) : placement_(placement) {}

  HookSetT& add(int layer, HookFnT<T> fn);

  const std::vector<Entry>& entries() const { return entries_; }
  HookPlacement placement() const { return placement_; }
  bool empty() const { return entries_.empty(); }

 private:
  HookPlacement placement_ = HookPlacement::kPostBlock;
  std::vector<Entry> entries_;
};

using HookFn = HookFnT<float>;
using HookSet = HookSetT<float>;

struct ZeroInit {};

template <typename T>
class TransformerT {
 public:
  explicit TransformerT(const LmConfig& config);

  const LmConfig& config() const { return config_; }

  std::span<T> parameters() { return params_; }
  std::span<const T> parameters() const { return params_; }
  std::size_t num_parameters() const { return params_.size(); }

  // Logits (rows x vocab). Hooks run synchronously in layer order.
  MatT<T> forward(const TokenBatch& tokens, const HookSetT<T>* hooks = nullptr) const;

  // Mean next-token NLL over every position that has a successor.
  double loss(const TokenBatch& tokens) const;

  // Same loss, with d(loss)/d(parameters) written to grad (overwritten).
  double loss_and_grad(const TokenBatch& tokens, std::span<T> grad) const;

  // Zero-initialized parameters; used when loading checkpoints.
  TransformerT(const LmConfig& config, ZeroInit);

  template <typename U>
  TransformerT<U> cast() const {
    TransformerT<U> out(config_, ZeroInit{});
    auto dst = out.parameters();
    for (std::size_t i = 0; i < params_.size(); ++i) dst[i] = static_cast<U>(params_[i]);
    return out;
  }

 private:
  struct Cache;
  MatT<T> run(const TokenBatch& tokens, const HookSetT<T>* hooks, Cache* cache) const;

  LmConfig config_;
  AlignedVector<T> params_;
};

using TinyLm = TransformerT<float>;

// Mean next-token NLL of logits against tokens (nats/token).
template <typename T>
double next_token_nll(const MatT<T>& logits, const TokenBatch& tokens);

struct CaptureResult {
  Mat logits;
  std::vector<Mat> activations;  // one (rows x d_model) matrix per requested layer
};

CaptureResult forward_capture(const TinyLm& lm, const TokenBatch& tokens,
                              std::span<const int> layers,
                              HookPlacement placement = HookPlacement::kPostBlock);

Mat forward_hooked(const TinyLm& lm, const TokenBatch& tokens, const HookSet& hooks);

double cross_entropy(const TinyLm& lm, const TokenBatch& tokens, const HookSet* hooks = nullptr);

struct TrainLmOptions {
  int steps = 20000;
  int batch_size = 8;
  float lr = 1e-3f;
  int warmup_steps = 200;
  float grad_clip = 1.0f;
  double heldout_fraction = 0.1;
  int eval_windows = 64;
};

struct TrainLmResult {
  double initial_heldout_ce = 0.0;
  double final_heldout_ce = 0.0;
  double final_train_loss = 0.0;
};

TinyLm train_lm(std::span<const std::uint8_t> corpus, const LmConfig& config,
                const TrainLmOptions& options, TrainLmResult* result = nullptr);

// Non-overlapping windows [first, first + count) of length seq_len.
TokenBatch corpus_windows(std::span<const std::uint8_t> corpus, int seq_len,
                          std::size_t first_window, std::size_t count);

double heldout_cross_entropy(const TinyLm& lm, std::span<const std::uint8_t> corpus,
                             double heldout_fraction, int max_windows);

void save_lm(const TinyLm& lm, const std::filesystem::path& path);
TinyLm load_lm(const std::filesystem::path& path);

}  // namespace resae
