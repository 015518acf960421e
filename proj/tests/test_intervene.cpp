#include <random>

#include "doctest.h"
#include "resae/actstore.hpp"
#include "resae/intervene.hpp"
#include "support.hpp"

using namespace resae;
using resae::test::TempDir;

namespace {

// A small model with a residual and a raw chain fitted on its own activations.
struct Fixture {
  TinyLm lm{test::small_lm_config(4, 16, 13)};
  Corpus corpus = test::small_corpus(32, 64);
  std::vector<int> layers{0, 1, 3};
  RegressionChain residual;
  RegressionChain raw;
  TokenBatch tokens;

  explicit Fixture(HookPlacement placement = HookPlacement::kPostBlock) {
    CaptureOptions opt;
    opt.placement = placement;
    const auto shards = capture_corpus(lm, corpus, layers, 32 * 48, opt);
    residual = calibrate_chain(shards, layers);
    raw = calibrate_raw_scales(shards, layers);
    tokens = corpus_windows(corpus.bytes, 32, 48, 8);
  }
};

// Adds fixed Gaussian noise to one block's z and passes the others through.
BlockCodec noisy_codec(std::size_t noisy_block, double scale, std::uint64_t seed) {
  return [=](std::size_t block, const MatD& z) -> MatD {
    if (block != noisy_block) return z;
    std::mt19937_64 rng(seed);
    return z + test::random_matrix<MatD>(z.rows(), z.cols(), rng, scale);
  };
}

}  // namespace

TEST_CASE("a perfect codec reproduces the clean activations offline") {
  const Fixture f;
  const CaptureResult clean = forward_capture(f.lm, f.tokens, f.layers);
  for (const RegressionChain* chain : {&f.residual, &f.raw}) {
    const OfflineReconstruction rec = reconstruct_offline(Replacer::perfect(*chain), clean.activations);
    for (std::size_t m = 0; m < f.layers.size(); ++m) {
      // Exact, not approximate: the double round trip lands on the same float.
      CHECK((rec.h_hat[m].array() == clean.activations[m].array()).all());
    }
  }
}

TEST_CASE("a perfect codec leaves CE unchanged under every protocol") {
  for (HookPlacement placement : {HookPlacement::kPostBlock, HookPlacement::kPostLayerNorm}) {
    const Fixture f(placement);
    const double clean = cross_entropy(f.lm, f.tokens);
    for (const RegressionChain* chain : {&f.residual, &f.raw}) {
      const Replacer r = Replacer::perfect(*chain, placement);
      const BlockSet all = all_blocks(*chain);
      CHECK(std::abs(replaced_ce(f.lm, r, f.tokens, all, ReplaceMode::kTeacherForced) - clean) < 1e-5);
      CHECK(std::abs(replaced_ce(f.lm, r, f.tokens, all, ReplaceMode::kOnline) - clean) < 1e-5);
    }
  }
}

TEST_CASE("a zero codec changes CE") {
  const Fixture f;
  const double clean = cross_entropy(f.lm, f.tokens);
  const Replacer r = Replacer::zero(f.raw);
  CHECK(std::abs(replaced_ce(f.lm, r, f.tokens, all_blocks(f.raw), ReplaceMode::kOnline) - clean) > 1e-4);
}

TEST_CASE("online hooks fire in layer order and condition on the value written upstream") {
  const Fixture f;
  Replacer r{&f.residual, noisy_codec(0, 0.5, 1)};
  InterventionTrace trace;
  online_ce_resae(f.lm, r, f.tokens, all_blocks(f.residual), &trace);
  REQUIRE(trace.size() == 3);
  CHECK(trace[0].layer == 0);
  CHECK(trace[1].layer == 1);
  CHECK(trace[2].layer == 3);
  CHECK(trace[0].conditioned_on.size() == 0);
  CHECK(trace[1].conditioned_on == trace[0].written.cast<double>());
  CHECK(trace[2].conditioned_on == trace[1].written.cast<double>());
  // The noisy block wrote something other than what arrived.
  CHECK(trace[0].written != trace[0].arriving);
}

TEST_CASE("a subset conditions on what arrived at an unreplaced predecessor") {
  const Fixture f;
  Replacer r{&f.residual, noisy_codec(2, 0.5, 2)};
  InterventionTrace trace;
  online_ce_resae(f.lm, r, f.tokens, BlockSet{2}, &trace);
  REQUIRE(trace.size() == 1);
  const CaptureResult clean = forward_capture(f.lm, f.tokens, f.layers);
  CHECK(trace[0].block == 2u);
  CHECK(trace[0].conditioned_on == clean.activations[1].cast<double>());
  CHECK(trace[0].arriving == clean.activations[2]);

  // Offline, the same subset conditions on the clean predecessor.
  const OfflineReconstruction rec = reconstruct_offline(r, clean.activations, BlockSet{2});
  CHECK(rec.h_hat[0].size() == 0);
  CHECK(rec.h_hat[1].size() == 0);
  CHECK(rec.h_hat[2].rows() == clean.activations[2].rows());
}

TEST_CASE("online residual replacement cancels upstream error exactly") {
  // Block 0 writes a noisy value and block 1 passes z through. The
  // prediction from the noisy value cancels, so block 1 writes exactly
  // what arrived there.
  const Fixture f;
  Replacer r{&f.residual, noisy_codec(0, 1.0, 3)};
  InterventionTrace trace;
  online_ce_resae(f.lm, r, f.tokens, all_blocks(f.residual), &trace);
  REQUIRE(trace.size() == 3);
  for (std::size_t m : {1u, 2u}) {
    CHECK(test::rel_frobenius(trace[m].written.cast<double>(), trace[m].arriving.cast<double>()) < 1e-6);
  }
  const MatD u = online_residual_input(f.residual, 1, trace[1].arriving, trace[0].written.cast<double>());
  const MatD rebuilt = predict(f.residual.maps[0], MatD(trace[0].written.cast<double>())) + u / f.residual.scales[1].scale();
  CHECK(test::rel_frobenius(rebuilt, trace[1].arriving.cast<double>()) < 1e-6);
  CHECK_THROWS_AS(online_residual_input(f.residual, 0, trace[0].arriving, trace[0].written.cast<double>()), Error);
}

TEST_CASE("the dedicated single-layer path agrees with the multi-layer path") {
  const Fixture f;
  for (const RegressionChain* chain : {&f.residual, &f.raw}) {
    Replacer r{chain, noisy_codec(1, 0.3, 4)};
    for (std::size_t m = 0; m < chain->num_blocks(); ++m) {
      for (ReplaceMode mode : {ReplaceMode::kTeacherForced, ReplaceMode::kOnline}) {
        const double single = single_layer_ce(f.lm, r, f.tokens, m, mode);
        const double multi = replaced_ce(f.lm, r, f.tokens, BlockSet{m}, mode);
        CHECK(single == doctest::Approx(multi).epsilon(1e-9));
      }
    }
  }
}

TEST_CASE("protocol functions reject mismatched stacks") {
  const Fixture f;
  const BlockSet all = all_blocks(f.raw);
  CHECK_THROWS_AS(online_ce_resae(f.lm, Replacer::perfect(f.raw), f.tokens, all), Error);
  CHECK_THROWS_AS(online_ce_raw(f.lm, Replacer::perfect(f.residual), f.tokens, all), Error);
  CHECK_THROWS_AS(single_layer_ce(f.lm, Replacer::perfect(f.raw), f.tokens, 3, ReplaceMode::kOnline), Error);
}

TEST_CASE("block subsets are parsed by layer id") {
  const Fixture f;
  CHECK(parse_block_subset(f.residual, "all") == BlockSet{0, 1, 2});
  CHECK(parse_block_subset(f.residual, "3,0") == BlockSet{0, 2});
  CHECK(parse_block_subset(f.residual, "1") == BlockSet{1});
  CHECK_THROWS_AS(parse_block_subset(f.residual, "2"), Error);
  CHECK_THROWS_AS(parse_block_subset(f.residual, "x"), Error);
  CHECK(parse_block_subset(f.residual, "").empty());
}

TEST_CASE("stacks round-trip through a directory") {
  const Fixture f;
  TempDir dir("stack");
  DictionaryStack s;
  s.chain = f.residual;
  for (std::size_t m = 0; m < f.layers.size(); ++m) {
    SaeParams p = SaeParams::init(24, 16, 4, 100 + m);
    p.target_kind = TargetKind::kResidual;
    p.block_index = static_cast<int>(m);
    s.saes.push_back(p);
  }
  save_stack(s, dir.path());
  const DictionaryStack back = load_stack(dir.path());
  CHECK(back.chain == s.chain);
  REQUIRE(back.saes.size() == 3u);
  for (std::size_t m = 0; m < 3; ++m) CHECK(back.saes[m] == s.saes[m]);
  CHECK(back.k() == 4);

  // A stack whose SAEs disagree with the chain is rejected.
  s.saes.pop_back();
  CHECK_THROWS_AS(s.validate(), Error);
}

TEST_CASE("a zero codec on a residual chain is the pure affine rollout") {
  const Fixture f;
  const CaptureResult clean = forward_capture(f.lm, f.tokens, f.layers);
  const OfflineReconstruction rec = reconstruct_offline(Replacer::zero(f.residual), clean.activations);
  const Eigen::Index rows = clean.activations[0].rows();
  MatD expect = f.residual.anchor_mean.transpose().replicate(rows, 1);
  CHECK(rec.h_hat[0] == expect.cast<float>());
  for (std::size_t m = 1; m < f.layers.size(); ++m) {
    expect = predict(f.residual.maps[m - 1], MatD(rec.h_hat[m - 1].cast<double>()));
    CHECK(rec.h_hat[m] == expect.cast<float>());
  }
}

TEST_CASE("replacing no layers leaves CE at the clean value") {
  const Fixture f;
  const double clean = cross_entropy(f.lm, f.tokens);
  const Replacer r = Replacer::zero(f.residual);
  for (ReplaceMode mode : {ReplaceMode::kTeacherForced, ReplaceMode::kOnline}) {
    CHECK(replaced_ce(f.lm, r, f.tokens, BlockSet{}, mode) == clean);
  }
  CHECK(online_ce_raw(f.lm, Replacer::zero(f.raw), f.tokens, BlockSet{}) == clean);
}

TEST_CASE("with one block, online replacement equals teacher forcing") {
  const Fixture f;
  CaptureOptions opt;
  const std::vector<int> one{1};
  const auto shards = capture_corpus(f.lm, f.corpus, one, 32 * 48, opt);
  const RegressionChain residual = calibrate_chain(shards, one);
  const RegressionChain raw = calibrate_raw_scales(shards, one);
  for (const RegressionChain* chain : {&residual, &raw}) {
    const Replacer r{chain, noisy_codec(0, 0.5, 5)};
    const BlockSet all = all_blocks(*chain);
    const double teacher = replaced_ce(f.lm, r, f.tokens, all, ReplaceMode::kTeacherForced);
    const double online = replaced_ce(f.lm, r, f.tokens, all, ReplaceMode::kOnline);
    CHECK(std::abs(online - teacher) < 1e-5);
  }
}

TEST_CASE("offline reconstruction codes the clean residual and rolls errors forward") {
  const Fixture f;
  const CaptureResult clean = forward_capture(f.lm, f.tokens, f.layers);
  const std::vector<Mat>& h = clean.activations;
  // Only the anchor is noisy; later blocks pass their input through.
  const Replacer r{&f.residual, noisy_codec(0, 0.5, 6)};
  const OfflineReconstruction rec = reconstruct_offline(r, h);
  for (std::size_t m = 0; m < f.layers.size(); ++m) {
    const MatD want = block_target(f.residual, m, h[m], m > 0 ? &h[m - 1] : nullptr);
    CHECK((rec.z[m] - want).cwiseAbs().maxCoeff() < 1e-9);
  }
  // h_hat[m] = h[m] + A_{m-1} (h_hat[m-1] - h[m-1]): the anchor error propagates.
  for (std::size_t m = 1; m < f.layers.size(); ++m) {
    const MatD err_prev = rec.h_hat[m - 1].cast<double>() - h[m - 1].cast<double>();
    const MatD want = h[m].cast<double>() + err_prev * f.residual.maps[m - 1].a.transpose();
    CHECK(test::rel_frobenius(MatD(rec.h_hat[m].cast<double>()), want) < 1e-5);
    CHECK(err_prev.norm() > 0.0);
  }
}
