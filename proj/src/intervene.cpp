#include "resae/intervene.hpp"

#include <algorithm>
#include <memory>
#include <optional>
#include <sstream>
#include <string>

namespace resae {

void DictionaryStack::validate() const {
  chain.validate();
  require(saes.size() == chain.num_blocks(), ErrorCode::kDimensionMismatch,
          "stack: one SAE per selected layer required");
  for (std::size_t m = 0; m < saes.size(); ++m) {
    require(saes[m].block_index == static_cast<int>(m), ErrorCode::kInvalidArgument,
            "stack: saes[m].block_index must equal m");
    require(saes[m].dim() == chain.dim(), ErrorCode::kDimensionMismatch, "stack: SAE dim != chain dim");
    const TargetKind want = chain.kind == ChainKind::kRaw ? TargetKind::kRaw : TargetKind::kResidual;
    require(saes[m].target_kind == want, ErrorCode::kInvalidArgument,
            "stack: SAE target kind does not match chain kind");
  }
}

void save_stack(const DictionaryStack& stack, const std::filesystem::path& dir) {
  stack.validate();
  std::filesystem::create_directories(dir);
  save_chain(stack.chain, dir / "chain.rch");
  for (std::size_t m = 0; m < stack.saes.size(); ++m) {
    save_sae(stack.saes[m], dir / ("sae_" + std::to_string(m) + ".sae"));
  }
}

DictionaryStack load_stack(const std::filesystem::path& dir) {
  DictionaryStack stack;
  stack.chain = load_chain(dir / "chain.rch");
  for (std::size_t m = 0; m < stack.chain.num_blocks(); ++m) {
    stack.saes.push_back(load_sae(dir / ("sae_" + std::to_string(m) + ".sae")));
  }
  stack.validate();
  return stack;
}

Replacer Replacer::from_stack(const DictionaryStack& stack, HookPlacement placement) {
  return Replacer{&stack.chain,
                  [&stack](std::size_t m, const MatD& z) {
                    return MatD(reconstruct(stack.saes[m], Mat(z.cast<float>())).cast<double>());
                  },
                  placement};
}

Replacer Replacer::perfect(const RegressionChain& chain, HookPlacement placement) {
  return Replacer{&chain, [](std::size_t, const MatD& z) { return z; }, placement};
}

Replacer Replacer::zero(const RegressionChain& chain, HookPlacement placement) {
  return Replacer{&chain, [](std::size_t, const MatD& z) { return MatD(MatD::Zero(z.rows(), z.cols())); }, placement};
}

BlockSet all_blocks(const RegressionChain& chain) {
  BlockSet b(chain.num_blocks());
  for (std::size_t m = 0; m < b.size(); ++m) b[m] = m;
  return b;
}

BlockSet parse_block_subset(const RegressionChain& chain, const std::string& spec) {
  if (spec == "all") return all_blocks(chain);
  BlockSet out;
  std::stringstream ss(spec);
  std::string item;
  while (std::getline(ss, item, ',')) {
    int layer = 0;
    try {
      layer = std::stoi(item);
    } catch (const std::exception&) {
      fail(ErrorCode::kInvalidArgument, "bad layer in subset: '" + item + "'");
    }
    const auto it = std::find(chain.layer_set.begin(), chain.layer_set.end(), layer);
    require(it != chain.layer_set.end(), ErrorCode::kOutOfRange,
            "layer " + std::to_string(layer) + " is not a selected layer of the stack");
    out.push_back(static_cast<std::size_t>(it - chain.layer_set.begin()));
  }
  std::sort(out.begin(), out.end());
  require(std::adjacent_find(out.begin(), out.end()) == out.end(), ErrorCode::kInvalidArgument,
          "duplicate layer in subset");
  return out;
}

namespace {

bool contains(const BlockSet& blocks, std::size_t m) {
  return std::binary_search(blocks.begin(), blocks.end(), m);
}

void check_blocks(const RegressionChain& chain, const BlockSet& blocks) {
  for (std::size_t i = 0; i < blocks.size(); ++i) {
    require(blocks[i] < chain.num_blocks(), ErrorCode::kOutOfRange, "block index out of range");
    require(i == 0 || blocks[i] > blocks[i - 1], ErrorCode::kInvalidArgument,
            "block subset must be strictly increasing");
  }
}

// One block's replacement. For residual blocks after the anchor, `target_prev`
// forms the SAE input z = S (h - A target_prev - c) and `base_prev` the affine
// part of the write, h_hat = A base_prev + c + z_hat / S. Offline
// reconstruction encodes the clean residual but rolls the prediction forward
// from the reconstructed predecessor; online hooks use the written
// predecessor for both.
struct BlockWrite {
  MatD z;
  MatD z_hat;
  Mat h_hat;
};

BlockWrite write_block(const Replacer& r, std::size_t m, const Mat& h, const Mat* base_prev,
                       const Mat* target_prev) {
  const RegressionChain& chain = *r.chain;
  const double s = chain.scales[m].scale();
  BlockWrite out;
  MatD base;
  if (chain.kind == ChainKind::kRaw) {
    out.z = h.cast<double>() * s;
  } else if (m == 0) {
    out.z = center_anchor(h, chain.anchor_mean) * s;
  } else {
    require(base_prev != nullptr && target_prev != nullptr, ErrorCode::kInternal,
            "residual write without predecessor");
    base = predict(chain.maps[m - 1], *base_prev);
    out.z = (h.cast<double>() - (target_prev == base_prev ? base : predict(chain.maps[m - 1], *target_prev))) * s;
  }
  out.z_hat = r.codec(m, out.z);
  require(out.z_hat.rows() == out.z.rows() && out.z_hat.cols() == out.z.cols(), ErrorCode::kDimensionMismatch,
          "codec returned wrong shape");
  MatD h_hat = out.z_hat / s;
  if (chain.kind == ChainKind::kResidual) {
    if (m == 0) {
      h_hat.rowwise() += chain.anchor_mean.transpose();
    } else {
      h_hat += base;
    }
  }
  out.h_hat = h_hat.cast<float>();
  return out;
}

BlockWrite write_block(const Replacer& r, std::size_t m, const Mat& h, const Mat* prev) {
  return write_block(r, m, h, prev, prev);
}

const Mat* predecessor(const RegressionChain& chain, std::size_t m, const Mat* prev) {
  return (chain.kind == ChainKind::kResidual && m > 0) ? prev : nullptr;
}

}  // namespace

OfflineReconstruction reconstruct_offline(const Replacer& replacer, std::span<const Mat> clean,
                                          const BlockSet& blocks) {
  const RegressionChain& chain = *replacer.chain;
  require(clean.size() == chain.num_blocks(), ErrorCode::kDimensionMismatch,
          "reconstruct_offline: one clean matrix per block required");
  check_blocks(chain, blocks);
  for (const Mat& c : clean) {
    require(c.rows() == clean.front().rows() && c.cols() == chain.dim(), ErrorCode::kDimensionMismatch,
            "reconstruct_offline: clean activations not row-aligned");
  }
  OfflineReconstruction out;
  out.h_hat.resize(clean.size());
  out.z.resize(clean.size());
  out.z_hat.resize(clean.size());
  for (std::size_t m : blocks) {
    const Mat* base_prev = nullptr;
    const Mat* target_prev = nullptr;
    if (chain.kind == ChainKind::kResidual && m > 0) {
      base_prev = contains(blocks, m - 1) ? &out.h_hat[m - 1] : &clean[m - 1];
      target_prev = &clean[m - 1];
    }
    BlockWrite w = write_block(replacer, m, clean[m], base_prev, target_prev);
    out.z[m] = std::move(w.z);
    out.z_hat[m] = std::move(w.z_hat);
    out.h_hat[m] = std::move(w.h_hat);
  }
  return out;
}

OfflineReconstruction reconstruct_offline(const Replacer& replacer, std::span<const Mat> clean) {
  return reconstruct_offline(replacer, clean, all_blocks(*replacer.chain));
}

MatD online_residual_input(const RegressionChain& chain, std::size_t block, const MatD& arriving,
                           const MatD& prev_written) {
  require(chain.kind == ChainKind::kResidual && block > 0 && block < chain.num_blocks(), ErrorCode::kInvalidArgument,
          "online_residual_input: needs a residual chain and block > 0");
  return (arriving - predict(chain.maps[block - 1], prev_written)) * chain.scales[block].scale();
}

MatD online_residual_input(const RegressionChain& chain, std::size_t block, const Mat& arriving,
                           const MatD& prev_written) {
  return online_residual_input(chain, block, MatD(arriving.cast<double>()), prev_written);
}

HookSet online_hooks(const Replacer& replacer, const BlockSet& blocks, InterventionTrace* trace) {
  const RegressionChain& chain = *replacer.chain;
  check_blocks(chain, blocks);
  struct State {
    std::vector<std::optional<Mat>> arriving;
    std::vector<std::optional<Mat>> written;
  };
  auto state = std::make_shared<State>();
  state->arriving.resize(chain.num_blocks());
  state->written.resize(chain.num_blocks());

  HookSet hooks(replacer.placement);
  for (std::size_t m = 0; m < chain.num_blocks(); ++m) {
    const bool replace = contains(blocks, m);
    const bool feeds_next = chain.kind == ChainKind::kResidual && contains(blocks, m + 1);
    if (!replace && !feeds_next) continue;
    hooks.add(chain.layer_set[m], [replacer, state, m, replace, trace](int layer, const Mat& arriving) -> Mat {
      const RegressionChain& ch = *replacer.chain;
      state->arriving[m] = arriving;
      if (!replace) return arriving;
      const Mat* prev = nullptr;
      if (ch.kind == ChainKind::kResidual && m > 0) {
        // Condition on what this pass wrote at the previous selected layer, or
        // on the activation that arrived there when it was not replaced.
        prev = state->written[m - 1] ? &*state->written[m - 1] : &*state->arriving[m - 1];
      }
      BlockWrite w = write_block(replacer, m, arriving, predecessor(ch, m, prev));
      if (trace != nullptr) {
        HookEvent ev;
        ev.block = m;
        ev.layer = layer;
        ev.arriving = arriving;
        if (prev != nullptr) ev.conditioned_on = prev->cast<double>();
        ev.written = w.h_hat;
        trace->push_back(std::move(ev));
      }
      state->written[m] = w.h_hat;
      return std::move(w.h_hat);
    });
  }
  return hooks;
}

double teacher_forced_ce(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                         const BlockSet& blocks, InterventionTrace* trace) {
  const RegressionChain& chain = *replacer.chain;
  check_blocks(chain, blocks);
  if (blocks.empty()) return cross_entropy(lm, tokens);
  const CaptureResult clean = forward_capture(lm, tokens, chain.layer_set, replacer.placement);
  const OfflineReconstruction rec = reconstruct_offline(replacer, clean.activations, blocks);
  HookSet hooks(replacer.placement);
  for (std::size_t m : blocks) {
    hooks.add(chain.layer_set[m], [&rec, &clean, &chain, m, trace](int layer, const Mat& arriving) -> Mat {
      if (trace != nullptr) {
        HookEvent ev;
        ev.block = m;
        ev.layer = layer;
        ev.arriving = arriving;
        if (chain.kind == ChainKind::kResidual && m > 0) ev.conditioned_on = clean.activations[m - 1].cast<double>();
        ev.written = rec.h_hat[m];
        trace->push_back(std::move(ev));
      }
      return rec.h_hat[m];
    });
  }
  return cross_entropy(lm, tokens, &hooks);
}

double online_ce_raw(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                     const BlockSet& blocks, InterventionTrace* trace) {
  require(replacer.chain->kind == ChainKind::kRaw, ErrorCode::kInvalidArgument, "online_ce_raw needs a raw stack");
  if (blocks.empty()) return cross_entropy(lm, tokens);
  const HookSet hooks = online_hooks(replacer, blocks, trace);
  return cross_entropy(lm, tokens, &hooks);
}

double online_ce_resae(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens,
                       const BlockSet& blocks, InterventionTrace* trace) {
  require(replacer.chain->kind == ChainKind::kResidual, ErrorCode::kInvalidArgument,
          "online_ce_resae needs a residual stack");
  if (blocks.empty()) return cross_entropy(lm, tokens);
  const HookSet hooks = online_hooks(replacer, blocks, trace);
  return cross_entropy(lm, tokens, &hooks);
}

double replaced_ce(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens, const BlockSet& blocks,
                   ReplaceMode mode, InterventionTrace* trace) {
  if (mode == ReplaceMode::kTeacherForced) return teacher_forced_ce(lm, replacer, tokens, blocks, trace);
  return replacer.chain->kind == ChainKind::kRaw ? online_ce_raw(lm, replacer, tokens, blocks, trace)
                                                 : online_ce_resae(lm, replacer, tokens, blocks, trace);
}

double single_layer_ce(const TinyLm& lm, const Replacer& replacer, const TokenBatch& tokens, std::size_t block,
                       ReplaceMode mode) {
  const RegressionChain& chain = *replacer.chain;
  require(block < chain.num_blocks(), ErrorCode::kOutOfRange, "block index out of range");
  const bool needs_prev = chain.kind == ChainKind::kResidual && block > 0;
  const int layer = chain.layer_set[block];
  HookSet hooks(replacer.placement);

  if (mode == ReplaceMode::kTeacherForced) {
    std::vector<int> layers;
    if (needs_prev) layers.push_back(chain.layer_set[block - 1]);
    layers.push_back(layer);
    const CaptureResult clean = forward_capture(lm, tokens, layers, replacer.placement);
    const Mat* prev = needs_prev ? &clean.activations.front() : nullptr;
    Mat written = write_block(replacer, block, clean.activations.back(), prev).h_hat;
    hooks.add(layer, [&written](int, const Mat&) { return written; });
    return cross_entropy(lm, tokens, &hooks);
  }

  // Online: nothing upstream is replaced, so the predecessor is whatever
  // arrives at the previous selected layer.
  Mat prev_arriving;
  if (needs_prev) {
    hooks.add(chain.layer_set[block - 1], [&prev_arriving](int, const Mat& arriving) {
      prev_arriving = arriving;
      return arriving;
    });
  }
  hooks.add(layer, [&](int, const Mat& arriving) {
    return write_block(replacer, block, arriving, needs_prev ? &prev_arriving : nullptr).h_hat;
  });
  return cross_entropy(lm, tokens, &hooks);
}

}  // namespace resae
