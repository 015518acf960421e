#pragma once

// Original-space reconstruction and multi-layer replacement protocols.
//
// A stack pairs a chain (scales, and for residual stacks the anchor mean and
// affine maps) with one SAE per selected layer. Reconstruction recurses
// through the chain:
//   h_hat[1]   = mu_1 + z_hat[1] / S_1
//   h_hat[m+1] = A_m h_hat[m] + c_m + z_hat[m+1] / S_{m+1}
// Offline, z_hat[m+1] codes the clean residual S_{m+1} (h[m+1] - A_m h[m] - c_m),
// so reconstruction error carries forward through A_m. Online hooks instead
// residualize against the value written upstream, which cancels it.
// Raw stacks reconstruct each layer independently as z_hat[m] / S_m.

#include <cstddef>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "resae/regression.hpp"
#include "resae/sae.hpp"
#include "resae/tinylm.hpp"

namespace resae {

struct DictionaryStack {
  RegressionChain chain;
  std::vector<SaeParams> saes;

  ChainKind kind() const { return chain.kind; }
  const std::vector<int>& layer_set() const { return chain.layer_set; }
  std::size_t num_blocks() const { return chain.num_blocks(); }
  int k() const { return saes.empty() ? 0 : saes.front().k; }
  void validate() const;
};

// Stack directory: chain.rch plus sae_<m>.sae for every block m.
void save_stack(const DictionaryStack& stack, const std::filesystem::path& dir);
DictionaryStack load_stack(const std::filesystem::path& dir);

// Maps a block's normalized input z to its reconstruction z_hat. Kept in
// double so a pass-through codec reproduces the clean activations exactly;
// SAE codecs round to float internally.
using BlockCodec = std::function<MatD(std::size_t block, const MatD& z)>;

// The chain plus a codec: what every protocol below needs.
struct Replacer {
  const RegressionChain* chain = nullptr;
  BlockCodec codec;
  // Must match the placement the chain was calibrated on.
  HookPlacement placement = HookPlacement::kPostBlock;

  static Replacer from_stack(const DictionaryStack& stack, HookPlacement placement = HookPlacement::kPostBlock);
  // z_hat = z for every block.
  static Replacer perfect(const RegressionChain& chain, HookPlacement placement = HookPlacement::kPostBlock);
  // z_hat = 0 for every block (pure affine rollout for residual chains).
  static Replacer zero(const RegressionChain& chain, HookPlacement placement = HookPlacement::kPostBlock);
};

// Sorted block indices into chain.layer_set.
using BlockSet = std::vector<std::size_t>;
BlockSet all_blocks(const RegressionChain& chain);
// Parses "all" or a comma-separated list of layer ids.
BlockSet parse_block_subset(const RegressionChain& chain, const std::string& spec);

struct OfflineReconstruction {
  std::vector<Mat> h_hat;  // per selected block, original space (empty if not replaced)
  std::vector<MatD> z;      // normalized block inputs from clean activations
  std::vector<MatD> z_hat;  // codec outputs
};

// clean[m] is the clean activation of block m (layer chain.layer_set[m]).
// For a strict subset, a residual block whose predecessor is not replaced
// rolls forward from the clean predecessor.
OfflineReconstruction reconstruct_offline(const Replacer& replacer, std::span<const Mat> clean,
                                          const BlockSet& blocks);
OfflineReconstruction reconstruct_offline(const Replacer& replacer, std::span<const Mat> clean);

// u_m = S_m (arriving - (A_{m-1} prev + c_{m-1})), the residual input of an
// online hook at block m > 0.
MatD online_residual_input(const RegressionChain& chain, std::size_t block, const Mat& arriving,
                           const MatD& prev_written);
MatD online_residual_input(const RegressionChain& chain, std::size_t block, const MatD& arriving,
                           const MatD& prev_written);

// Hook events in the order they fired; used to verify ordering and which
// predecessor each residual hook conditioned on.
struct HookEvent {
  std::size_t block = 0;
  int layer = 0;
  Mat arriving;
  MatD conditioned_on;  // predecessor used in the affine prediction (residual, m > 0)
  Mat written;
};
using InterventionTrace = std::vector<HookEvent>;

enum class ReplaceMode { kTeacherForced, kOnline };

// Replacement hooks for one forward pass. The returned set keeps per-pass
// state (the retained h_hat chain) and must not be shared across passes.
HookSet online_hooks(const Replacer& replacer, const BlockSet& blocks, InterventionTrace* trace = nullptr);

double teacher_forced_ce(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                         const BlockSet& blocks, InterventionTrace* trace = nullptr);
double online_ce_raw(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                     const BlockSet& blocks, InterventionTrace* trace = nullptr);
double online_ce_resae(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                       const BlockSet& blocks, InterventionTrace* trace = nullptr);
// Dispatches on the chain kind for online mode.
double replaced_ce(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                   const BlockSet& blocks, ReplaceMode mode, InterventionTrace* trace = nullptr);

// Dedicated single-layer path, independent of the multi-layer orchestration.
double single_layer_ce(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                       std::size_t block, ReplaceMode mode);

}  // namespace resae
