// Acceptance suite: one PASS/FAIL line per criterion.
//
// Criteria 1-7 are exact and fail the run. Criteria 8-12 are directional
// checks on the pinned desk-scale pipeline; they print the measured values
// and are marked FLAG when the expected trend is absent, without failing.

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <functional>
#include <limits>
#include <random>
#include <sstream>
#include <string>

#include "CLI11.hpp"
#include "gradcheck.hpp"
#include "json.hpp"
#include "oracles.hpp"
#include "resae/metrics.hpp"
#include "resae/pipeline.hpp"
#include "support.hpp"

using namespace resae;
namespace fs = std::filesystem;

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point start) {
  return std::chrono::duration<double>(Clock::now() - start).count();
}

struct Outcome {
  bool ok = false;
  std::string detail;
};

int hard_failures = 0;
int flags = 0;

void report(int id, const std::string& name, bool soft, const Outcome& o) {
  const char* tag = o.ok ? "PASS" : (soft ? "FLAG" : "FAIL");
  std::printf("[%s] %2d %-28s %s\n", tag, id, name.c_str(), o.detail.c_str());
  std::fflush(stdout);
  if (!o.ok) ++(soft ? flags : hard_failures);
}

// Runs a criterion, turning an unexpected exception into a failed outcome.
void run(int id, const std::string& name, bool soft, const std::function<Outcome()>& body) {
  Outcome o;
  try {
    o = body();
  } catch (const std::exception& e) {
    o = {false, std::string("error: ") + e.what()};
  }
  report(id, name, soft, o);
}

std::string fmt(const char* format, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
  char buf[256];
  std::snprintf(buf, sizeof(buf), format, a, b, c, d);
  return buf;
}

std::string read_bytes(const fs::path& p) {
  std::ifstream in(p, std::ios::binary);
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

// ---------------------------------------------------------------------------
// 1. Ridge oracle

Outcome ridge_oracle() {
  const auto start = Clock::now();
  std::mt19937_64 rng(20240611);
  double worst = 0.0;
  for (int i = 0; i < 20; ++i) {
    const test::RidgeInstance inst = test::random_ridge_instance(rng);
    const AffineMap got = fit_affine(inst.x, inst.y, inst.lambda);
    const oracle::Affine want = oracle::ridge_pinv(inst.x, inst.y, inst.lambda);
    worst = std::max(worst, test::rel_frobenius(got.a, want.a));
    worst = std::max(worst, test::rel_frobenius(got.c, want.c));
  }
  const double t = seconds_since(start);
  return {worst <= 1e-8 && t < 1.0, fmt("max rel err %.2e (tol 1e-8), %.3f s (limit 1 s)", worst, t)};
}

// ---------------------------------------------------------------------------
// 2. Telescoping identity with perfect codecs

Outcome telescoping() {
  const auto start = Clock::now();
  LmConfig config;  // default shape
  config.seed = 77;
  const TinyLm lm(config);
  SyntheticCorpusOptions co;
  co.doc_len = config.context_len;
  co.n_docs = 96;
  co.seed = 78;
  const Corpus corpus = generate_synthetic_corpus(co);
  const std::vector<int> layers{0, 2, 4, 6};
  const TokenBatch tokens = corpus_windows(corpus.bytes, config.context_len, 80, 8);

  double act_err = 0.0, ce_err = 0.0;
  for (HookPlacement placement : {HookPlacement::kPostBlock, HookPlacement::kPostLayerNorm}) {
    CaptureOptions capture;
    capture.placement = placement;
    const auto shards = capture_corpus(lm, corpus, layers, 64 * static_cast<std::size_t>(config.context_len), capture);
    const RegressionChain residual = calibrate_chain(shards, layers);
    const RegressionChain raw = calibrate_raw_scales(shards, layers);
    const CaptureResult clean = forward_capture(lm, tokens, layers, placement);
    const double ce_clean = cross_entropy(lm, tokens);

    for (const RegressionChain* chain : {&residual, &raw}) {
      const Replacer r = Replacer::perfect(*chain, placement);
      const BlockSet all = all_blocks(*chain);
      const OfflineReconstruction rec = reconstruct_offline(r, clean.activations);
      for (std::size_t m = 0; m < layers.size(); ++m) {
        act_err = std::max(act_err, test::rel_frobenius(rec.h_hat[m], clean.activations[m]));
      }
      for (ReplaceMode mode : {ReplaceMode::kTeacherForced, ReplaceMode::kOnline}) {
        InterventionTrace trace;
        const double ce = replaced_ce(lm, r, tokens, all, mode, &trace);
        ce_err = std::max(ce_err, std::abs(ce - ce_clean));
        for (const HookEvent& ev : trace) {
          act_err = std::max(act_err, test::rel_frobenius(ev.written, clean.activations[ev.block]));
        }
      }
    }
  }
  const double t = seconds_since(start);
  return {act_err <= 1e-4 && ce_err <= 1e-5 && t < 60.0,
          fmt("activation rel err %.2e (tol 1e-4), |dCE| %.2e (tol 1e-5), %.1f s", act_err, ce_err, t)};
}

// ---------------------------------------------------------------------------
// 3. Gradient checks

Outcome gradients() {
  const auto start = Clock::now();
  const test::GradCheck sae = test::sae_gradient_check(6, 12, 3, 5, 31);
  LmConfig c;
  c.n_layers = 2;
  c.d_model = 8;
  c.n_heads = 2;
  c.d_ff = 16;
  c.context_len = 6;
  c.seed = 32;
  const test::GradCheck lm = test::lm_gradient_check(c, 33, 200);
  const double t = seconds_since(start);
  const bool enough = sae.checked >= 100 && lm.checked == 200;
  return {enough && sae.max_rel_err <= 1e-4 && lm.max_rel_err <= 1e-4 && t < 60.0,
          fmt("SAE %.2e, LM %.2e (tol 1e-4), %.1f s", sae.max_rel_err, lm.max_rel_err, t) + ", " +
              std::to_string(sae.checked) + " SAE coords (" + std::to_string(sae.skipped_near_boundary) +
              " near a TopK boundary skipped)"};
}

// ---------------------------------------------------------------------------
// 4. OI identity on emitted reports, and OI({l}) == 0

bool oi_consistent(const InterventionReport& r, double& worst) {
  bool ok = true;
  for (const ProtocolResult* p : {&r.teacher, &r.online}) {
    double additive = 0.0, scale = std::abs(p->ce_joint) + std::abs(r.ce_clean);
    for (double ce : p->ce_single) {
      additive += ce - r.ce_clean;
      scale += std::abs(ce) + std::abs(r.ce_clean);
    }
    const double joint = p->ce_joint - r.ce_clean;
    const double err = std::abs(p->oi.oi - (joint - additive));
    worst = std::max(worst, err);
    ok = ok && err <= 8.0 * std::numeric_limits<double>::epsilon() * scale &&
         p->oi.oi == p->oi.delta_joint - p->oi.delta_additive;
  }
  return ok;
}

DictionaryStack one_block(const DictionaryStack& s, std::size_t m) {
  DictionaryStack out;
  out.chain.kind = s.chain.kind;
  out.chain.layer_set = {s.chain.layer_set[m]};
  out.chain.anchor_mean = s.chain.anchor_mean;
  out.chain.scales = {s.chain.scales[m]};
  out.chain.epsilon = s.chain.epsilon;
  out.chain.lambda_scale = s.chain.lambda_scale;
  out.saes = {s.saes[m]};
  out.saes[0].block_index = 0;
  return out;
}

Outcome oi_identity(const ExperimentConfig& config, const PipelineResult& result) {
  double worst = 0.0;
  bool ok = !result.reports.empty();
  int n = 0;
  for (const ComparisonReport& c : result.reports) {
    ok = oi_consistent(c.raw, worst) && ok;
    ok = oi_consistent(c.resae, worst) && ok;
    n += 2;
  }

  // Singleton stacks cut from the pinned run: every raw block, and the
  // residual anchor (the only block that stands alone in a residual chain).
  const TinyLm lm = load_lm(config.out_dir / "lm.tlm");
  const Corpus corpus = load_corpus(config.out_dir / "corpus.bin", config.lm.context_len);
  const WindowPlan plan = plan_windows(config);
  std::vector<TokenBatch> batches;
  for (std::size_t w = 0; w < 16; w += 8) batches.push_back(corpus_windows(corpus.bytes, config.lm.context_len, plan.eval_first + w, 8));
  const int k = config.k_list.back();
  const DictionaryStack raw = load_stack(config.out_dir / "stacks" / ("raw_k" + std::to_string(k)));
  const DictionaryStack res = load_stack(config.out_dir / "stacks" / ("resae_k" + std::to_string(k)));
  std::vector<DictionaryStack> singles;
  for (std::size_t m = 0; m < raw.num_blocks(); ++m) singles.push_back(one_block(raw, m));
  singles.push_back(one_block(res, 0));
  double max_single = 0.0;
  for (const DictionaryStack& s : singles) {
    s.validate();
    const Replacer r = Replacer::from_stack(s, config.placement);
    for (ReplaceMode mode : {ReplaceMode::kTeacherForced, ReplaceMode::kOnline}) {
      double ce_clean = 0.0;
      for (const auto& b : batches) ce_clean += cross_entropy(lm, b) / static_cast<double>(batches.size());
      const ProtocolResult p = evaluate_protocol(lm, r, batches, ce_clean, mode);
      max_single = std::max(max_single, std::abs(p.oi.oi));
      ok = ok && p.oi.oi == 0.0;
    }
  }
  return {ok, fmt("%.0f reports, max |OI - (dS - dAdd)| %.1e; %.0f singleton runs, max |OI| %.1e", n, worst,
                  2.0 * static_cast<double>(singles.size()), max_single)};
}

// ---------------------------------------------------------------------------
// 5. Sparsity contract

Outcome sparsity() {
  std::mt19937_64 rng(5150);
  Mat a = test::random_matrix<Mat>(10000, 96, rng);
  // Ties and rows with fewer than k positives.
  for (Eigen::Index r = 0; r < 10000; r += 97) a.row(r).head(40).setConstant(0.75f);
  for (Eigen::Index r = 1; r < 10000; r += 89) a.row(r) = -a.row(r).cwiseAbs();
  for (Eigen::Index r = 2; r < 10000; r += 83) {
    a.row(r) = -a.row(r).cwiseAbs();
    a(r, 5) = 1.0f;
    a(r, 50) = 1.0f;
  }
  const int k = 16;
  const SparseCodes codes = topk_per_token(a, k);
  long mismatched = 0;
  for (Eigen::Index r = 0; r < a.rows(); ++r) {
    std::vector<int> got(codes.index.begin() + static_cast<std::ptrdiff_t>(codes.offset[static_cast<std::size_t>(r)]),
                         codes.index.begin() + static_cast<std::ptrdiff_t>(codes.offset[static_cast<std::size_t>(r) + 1]));
    std::sort(got.begin(), got.end());
    if (got != oracle::topk_sorted(a.row(r), k)) ++mismatched;
  }

  // The contract on full encoders in both modes.
  long violations = 0;
  SaeParams sae = SaeParams::init(256, 32, 8, 3);
  sae.b_enc.setConstant(0.05f);
  const Mat z = test::random_matrix<Mat>(2000, 32, rng);
  for (TopKMode mode : {TopKMode::kPerToken, TopKMode::kBatch}) {
    sae.topk_mode = mode;
    sae.threshold = 0.1f;
    const SparseCodes c = encode(sae, z);
    for (Eigen::Index r = 0; r < z.rows(); ++r) {
      if (c.nnz(r) > static_cast<std::size_t>(sae.k)) ++violations;
    }
    for (float v : c.value) {
      if (!(v >= 0.0f)) ++violations;
    }
  }
  return {mismatched == 0 && violations == 0,
          fmt("%.0f/10000 rows differ from the sort oracle, %.0f contract violations", static_cast<double>(mismatched),
              static_cast<double>(violations))};
}

// ---------------------------------------------------------------------------
// 6. Propagation cancellation

Outcome cancellation() {
  LmConfig config;
  config.seed = 61;
  const TinyLm lm(config);
  SyntheticCorpusOptions co;
  co.doc_len = config.context_len;
  co.n_docs = 80;
  co.seed = 62;
  const Corpus corpus = generate_synthetic_corpus(co);
  const std::vector<int> layers{0, 2, 4, 6};
  const auto shards = capture_corpus(lm, corpus, layers, 64 * static_cast<std::size_t>(config.context_len));
  const RegressionChain chain = calibrate_chain(shards, layers);
  const CaptureResult clean = forward_capture(lm, corpus_windows(corpus.bytes, config.context_len, 70, 4), layers);

  std::mt19937_64 rng(63);
  double worst = 0.0;
  for (std::size_t m = 1; m < layers.size(); ++m) {
    const MatD prev = clean.activations[m - 1].cast<double>();
    const MatD delta = test::random_matrix<MatD>(prev.rows(), prev.cols(), rng, 0.5);
    const MatD shift = delta * chain.maps[m - 1].a.transpose();
    const MatD arriving = clean.activations[m].cast<double>();
    const MatD u = online_residual_input(chain, m, arriving, prev);
    const MatD u_moved = online_residual_input(chain, m, MatD(arriving + shift), MatD(prev + delta));
    worst = std::max(worst, test::rel_frobenius(u_moved, u));
  }
  return {worst <= 1e-6, fmt("max rel change in u_m %.2e (tol 1e-6)", worst)};
}

// ---------------------------------------------------------------------------
// 7. Serialization round trips

RegressionChain random_chain(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> coin(0, 1), dim(1, 8), blocks(1, 4), step(1, 3);
  RegressionChain c;
  c.kind = coin(rng) ? ChainKind::kResidual : ChainKind::kRaw;
  const Eigen::Index d = dim(rng);
  int layer = std::uniform_int_distribution<int>(0, 3)(rng);
  for (int i = blocks(rng); i > 0; --i, layer += step(rng)) c.layer_set.push_back(layer);
  c.anchor_mean = c.kind == ChainKind::kResidual ? VecD(test::random_matrix<MatD>(d, 1, rng)) : VecD::Zero(d);
  std::uniform_real_distribution<double> pos(0.1, 10.0);
  c.epsilon = pos(rng) * 1e-7;
  c.lambda_scale = pos(rng) * 1e-5;
  for (std::size_t m = 0; m < c.layer_set.size(); ++m) c.scales.push_back({pos(rng), c.epsilon});
  if (c.kind == ChainKind::kResidual) {
    for (std::size_t m = 0; m + 1 < c.layer_set.size(); ++m) {
      AffineMap map;
      map.a = test::random_matrix<MatD>(d, d, rng);
      map.c = test::random_matrix<MatD>(d, 1, rng);
      map.ridge_lambda = pos(rng);
      map.n_fit_rows = std::uniform_int_distribution<std::uint64_t>(1, 1u << 30)(rng);
      c.maps.push_back(map);
    }
  }
  return c;
}

SaeParams random_sae(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> dim(1, 12), coin(0, 1);
  const Eigen::Index d = dim(rng), n = dim(rng) + 1;
  const int k = std::uniform_int_distribution<int>(1, static_cast<int>(n))(rng);
  SaeParams s = SaeParams::init(n, d, k, rng());
  s.w_dec += test::random_matrix<Mat>(d, n, rng, 0.1);
  s.b_enc = test::random_matrix<Mat>(n, 1, rng);
  s.b_dec = test::random_matrix<Mat>(d, 1, rng);
  s.target_kind = coin(rng) ? TargetKind::kResidual : TargetKind::kRaw;
  s.block_index = std::uniform_int_distribution<int>(0, 5)(rng);
  s.topk_mode = coin(rng) ? TopKMode::kBatch : TopKMode::kPerToken;
  s.threshold = s.topk_mode == TopKMode::kBatch ? std::uniform_real_distribution<float>(0.0f, 2.0f)(rng) : 0.0f;
  return s;
}

TinyLm random_lm(std::mt19937_64& rng) {
  std::uniform_int_distribution<int> heads(1, 3), head_dim(1, 4), layers(1, 3), ctx(2, 16), ff(1, 32);
  LmConfig c;
  c.n_heads = heads(rng);
  c.d_model = c.n_heads * head_dim(rng);
  c.n_layers = layers(rng);
  c.d_ff = ff(rng);
  c.context_len = ctx(rng);
  c.seed = rng();
  return TinyLm(c);
}

template <typename T, typename Save, typename Load, typename Same>
bool round_trip(const T& value, const fs::path& a, const fs::path& b, Save save, Load load, Same same) {
  save(value, a);
  const T back = load(a);
  save(back, b);
  return same(back, value) && read_bytes(a) == read_bytes(b);
}

Outcome serialization() {
  test::TempDir dir("acceptance_io");
  std::mt19937_64 rng(777);
  int tlm = 0, ash = 0, rch = 0, sae = 0;
  for (int i = 0; i < 100; ++i) {
    tlm += round_trip(random_lm(rng), dir / "a.tlm", dir / "b.tlm", save_lm, load_lm, [](const TinyLm& x, const TinyLm& y) {
      return x.config() == y.config() &&
             std::equal(x.parameters().begin(), x.parameters().end(), y.parameters().begin(),
                        [](float p, float q) { return std::memcmp(&p, &q, sizeof(float)) == 0; });
    });
    ash += round_trip(test::random_shard(rng), dir / "a.ash", dir / "b.ash", write_shard, read_shard,
                      [](const ActivationShard& x, const ActivationShard& y) { return x == y; });
    rch += round_trip(random_chain(rng), dir / "a.rch", dir / "b.rch", save_chain, load_chain,
                      [](const RegressionChain& x, const RegressionChain& y) { return x == y; });
    sae += round_trip(random_sae(rng), dir / "a.sae", dir / "b.sae", save_sae, load_sae,
                      [](const SaeParams& x, const SaeParams& y) { return x == y; });
  }
  return {tlm == 100 && ash == 100 && rch == 100 && sae == 100,
          fmt("exact round trips: TLM1 %.0f/100, ASH1 %.0f/100, RCH1 %.0f/100", tlm, ash, rch) + ", SAE1 " +
              std::to_string(sae) + "/100"};
}

// ---------------------------------------------------------------------------
// 8-12. Directional checks on the pinned run

Outcome gap_trend(const PipelineResult& r) {
  std::vector<std::pair<int, double>> pts;
  for (const auto& p : r.layer_gap) pts.emplace_back(p.gap, p.mean_r2);
  std::sort(pts.begin(), pts.end());
  bool ok = pts.size() >= 2;
  std::string detail = "mean held-out R^2:";
  for (std::size_t i = 0; i < pts.size(); ++i) {
    detail += " gap " + std::to_string(pts[i].first) + " = " + fmt("%.4f", pts[i].second);
    if (i > 0) ok = ok && pts[i].second < pts[i - 1].second;
  }
  return {ok, detail};
}

Outcome ev_ordering(const PipelineResult& r) {
  bool ok = !r.reports.empty();
  std::string detail = "raw > resae(orig) > resae(resid):";
  for (const auto& c : r.reports) {
    const double a = c.raw.ev_original_mean, b = c.resae.ev_original_mean, d = c.resae.ev_residual_mean;
    ok = ok && a > b && b > d;
    detail += fmt(" k=%.0f %.3f/%.3f/%.3f", c.raw.k, a, b, d);
  }
  return {ok, detail};
}

Outcome redundancy(const PipelineResult& r) {
  int wins = 0;
  std::string detail;
  for (const auto& c : r.reports) {
    const bool w = c.resae.mean_max_cosine_mean <= c.raw.mean_max_cosine_mean;
    wins += w;
    detail += fmt(" k=%.0f %.3f vs %.3f", c.raw.k, c.resae.mean_max_cosine_mean, c.raw.mean_max_cosine_mean);
  }
  const int need = std::min<int>(3, static_cast<int>(r.reports.size()));
  return {!r.reports.empty() && wins >= need,
          "resae <= raw at " + std::to_string(wins) + "/" + std::to_string(r.reports.size()) + " k (resae vs raw):" +
              detail};
}

Outcome teacher_ce(const PipelineResult& r) {
  if (r.reports.empty()) return {false, "no reports"};
  const auto& c = *std::max_element(r.reports.begin(), r.reports.end(),
                                    [](const auto& x, const auto& y) { return x.raw.k < y.raw.k; });
  const double a = c.resae.teacher.oi.delta_joint, b = c.raw.teacher.oi.delta_joint;
  std::string detail = fmt("k=%.0f: resae %.4f vs raw %.4f nats;", c.raw.k, a, b);
  for (const auto& o : r.reports) {
    detail += fmt(" k=%.0f %.4f/%.4f", o.raw.k, o.resae.teacher.oi.delta_joint, o.raw.teacher.oi.delta_joint);
  }
  return {a <= b, detail};
}

Outcome online_oi(const PipelineResult& r) {
  bool ok = false, all = true;
  std::string detail = "|OI| resae vs raw:";
  for (const auto& c : r.reports) {
    const double a = std::abs(c.resae.online.oi.oi), b = std::abs(c.raw.online.oi.oi);
    detail += fmt(" k=%.0f %.4f/%.4f", c.raw.k, a, b);
    if (c.raw.k >= 32) {
      ok = true;
      all = all && a < b;
    }
  }
  return {ok && all, detail};
}

// ---------------------------------------------------------------------------
// Pinned baseline: the headline numbers of a previous run of the same config.
// Drift is informational; floating-point results may legitimately differ
// across compilers and instruction sets.

nlohmann::ordered_json baseline_values(const PipelineResult& r) {
  nlohmann::ordered_json j;
  for (const auto& p : r.layer_gap) j["gap" + std::to_string(p.gap) + ".mean_r2"] = p.mean_r2;
  for (const auto& c : r.reports) {
    for (const InterventionReport* rep : {&c.raw, &c.resae}) {
      const std::string prefix = rep->stack_id + ".";
      j[prefix + "ev_original_mean"] = rep->ev_original_mean;
      j[prefix + "mean_max_cosine_mean"] = rep->mean_max_cosine_mean;
      j[prefix + "teacher.delta_joint"] = rep->teacher.oi.delta_joint;
      j[prefix + "online.delta_joint"] = rep->online.oi.delta_joint;
      j[prefix + "online.oi"] = rep->online.oi.oi;
    }
  }
  return j;
}

void compare_baseline(const PipelineResult& r, const fs::path& path, double tolerance) {
  std::ifstream in(path);
  if (!in) {
    std::printf("[INFO]    baseline: %s not found\n", path.c_str());
    return;
  }
  const nlohmann::json want = nlohmann::json::parse(in);
  const nlohmann::ordered_json got = baseline_values(r);
  double worst = 0.0;
  std::string worst_key;
  std::size_t missing = 0;
  for (const auto& [key, value] : want.items()) {
    if (!got.contains(key)) {
      ++missing;
      continue;
    }
    const double d = std::abs(got[key].get<double>() - value.get<double>());
    if (d >= worst) {
      worst = d;
      worst_key = key;
    }
  }
  std::printf("[INFO]    baseline: %zu values, max |diff| %.3g at %s, %zu missing: %s\n", want.size(), worst,
              worst_key.c_str(), missing,
              (missing == 0 && worst <= tolerance) ? "matches" : "DRIFTED");
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance criteria 1-12"};
  std::string config_path, out_dir;
  bool skip_pipeline = false;
  app.add_option("--config", config_path, "pinned pipeline config")->required()->check(CLI::ExistingFile);
  app.add_option("--out-dir", out_dir, "pipeline output directory (overrides the config)");
  app.add_flag("--skip-pipeline", skip_pipeline, "only run criteria that need no pipeline");
  std::string baseline_path, write_baseline_path;
  double baseline_tolerance = 1e-6;
  app.add_option("--baseline", baseline_path, "pinned baseline JSON to compare the run against");
  app.add_option("--baseline-tolerance", baseline_tolerance)->capture_default_str();
  app.add_option("--write-baseline", write_baseline_path, "record this run's headline numbers as a baseline");
  CLI11_PARSE(app, argc, argv);

  run(1, "ridge oracle", false, ridge_oracle);
  run(2, "telescoping identity", false, telescoping);
  run(3, "gradient checks", false, gradients);
  run(5, "sparsity contract", false, sparsity);
  run(6, "propagation cancellation", false, cancellation);
  run(7, "serialization", false, serialization);

  if (!skip_pipeline) {
    ExperimentConfig config;
    PipelineResult result;
    bool have_run = false;
    try {
      config = load_config(config_path);
      if (!out_dir.empty()) config.out_dir = out_dir;
      const auto start = Clock::now();
      result = run_pipeline(config, [](const std::string& msg) { std::fprintf(stderr, "  %s\n", msg.c_str()); });
      std::printf("[INFO]    pinned pipeline: %.1f s (%zu stages run, %zu up to date) in %s\n", seconds_since(start),
                  result.executed_stages.size(), result.skipped_stages.size(), config.out_dir.c_str());
      have_run = true;
    } catch (const std::exception& e) {
      std::printf("[FAIL]    pinned pipeline: %s\n", e.what());
      ++hard_failures;
    }
    if (have_run) {
      run(4, "OI identity", false, [&] { return oi_identity(config, result); });
      run(8, "R^2 falls with layer gap", true, [&] { return gap_trend(result); });
      run(9, "EV ordering", true, [&] { return ev_ordering(result); });
      run(10, "decoder redundancy", true, [&] { return redundancy(result); });
      run(11, "teacher-forced dCE", true, [&] { return teacher_ce(result); });
      run(12, "online |OI|", true, [&] { return online_oi(result); });
      if (!baseline_path.empty()) compare_baseline(result, baseline_path, baseline_tolerance);
      if (!write_baseline_path.empty()) {
        std::ofstream(write_baseline_path) << baseline_values(result).dump(2) << '\n';
        std::printf("[INFO]    baseline written to %s\n", write_baseline_path.c_str());
      }
    }
  }

  std::printf("summary: %d hard failure(s), %d flagged directional check(s)\n", hard_failures, flags);
  return hard_failures == 0 ? 0 : 1;
}
