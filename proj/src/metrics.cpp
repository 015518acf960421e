#include "resae/metrics.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <map>
#include <numeric>
#include <sstream>

#include "json.hpp"

namespace resae {

namespace {

template <typename T>
double explained_variance_impl(const MatT<T>& clean, const MatT<T>& recon) {
  require(clean.rows() == recon.rows() && clean.cols() == recon.cols(), ErrorCode::kDimensionMismatch,
          "explained_variance: shape mismatch");
  require(clean.rows() >= 2, ErrorCode::kInvalidArgument, "explained_variance: need >= 2 rows");
  const MatD h = clean.template cast<double>();
  const double ss_err = (h - recon.template cast<double>()).squaredNorm();
  const double ss_tot = (h.rowwise() - h.colwise().mean()).squaredNorm();
  require(ss_tot > 0.0, ErrorCode::kNumerical, "explained_variance: clean activations have zero variance");
  return 1.0 - ss_err / ss_tot;
}

}  // namespace

double explained_variance(const Mat& clean, const Mat& recon) { return explained_variance_impl(clean, recon); }
double explained_variance(const MatD& clean, const MatD& recon) { return explained_variance_impl(clean, recon); }

OverInteraction overinteraction(double ce_clean, double ce_joint, std::span<const double> ce_singletons) {
  require(!ce_singletons.empty(), ErrorCode::kInvalidArgument, "overinteraction: no single-layer CEs");
  OverInteraction r;
  r.delta_joint = ce_joint - ce_clean;
  for (double ce : ce_singletons) r.delta_additive += ce - ce_clean;
  r.oi = r.delta_joint - r.delta_additive;
  return r;
}

namespace {

MatD unit_columns(const SaeParams& sae) {
  MatD w = sae.w_dec.cast<double>();
  for (Eigen::Index j = 0; j < w.cols(); ++j) {
    const double norm = w.col(j).norm();
    require(norm > 0.0, ErrorCode::kNumerical, "decoder column " + std::to_string(j) + " has zero norm");
    w.col(j) /= norm;
  }
  return w;
}

}  // namespace

double mean_max_decoder_cosine(const SaeParams& sae) {
  require(sae.dict_size() >= 2, ErrorCode::kInvalidArgument, "mean_max_decoder_cosine: need N >= 2");
  const MatD w = unit_columns(sae);
  const MatD gram = (w.transpose() * w).cwiseAbs();
  double total = 0.0;
  for (Eigen::Index j = 0; j < gram.rows(); ++j) {
    double best = 0.0;
    for (Eigen::Index i = 0; i < gram.cols(); ++i) {
      if (i != j) best = std::max(best, gram(j, i));
    }
    total += best;
  }
  return total / static_cast<double>(gram.rows());
}

double stack_mean_max_cosine(const DictionaryStack& stack) {
  require(!stack.saes.empty(), ErrorCode::kInvalidArgument, "empty stack");
  double total = 0.0;
  for (const auto& sae : stack.saes) total += mean_max_decoder_cosine(sae);
  return total / static_cast<double>(stack.saes.size());
}

double cross_dictionary_max_cosine(const SaeParams& a, const SaeParams& b) {
  const MatD gram = (unit_columns(a).transpose() * unit_columns(b)).cwiseAbs();
  return gram.rowwise().maxCoeff().mean();
}

ProbeResult sparse_probe_features(const MatD& features, std::span<const int> labels, const ProbeOptions& options) {
  const Eigen::Index n = features.rows();
  require(static_cast<Eigen::Index>(labels.size()) == n, ErrorCode::kDimensionMismatch,
          "sparse_probe: one label per feature row required");
  require(!labels.empty() && *std::min_element(labels.begin(), labels.end()) >= 0, ErrorCode::kInvalidArgument,
          "sparse_probe: labels must be nonnegative");
  const int n_classes = *std::max_element(labels.begin(), labels.end()) + 1;
  std::vector<int> distinct(labels.begin(), labels.end());
  std::sort(distinct.begin(), distinct.end());
  distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
  require(distinct.size() >= 2, ErrorCode::kInvalidArgument, "sparse_probe: need at least two classes");

  const Eigen::Index n_train = static_cast<Eigen::Index>(std::floor(static_cast<double>(n) * options.train_fraction));
  const Eigen::Index n_test = n - n_train;
  require(n_train >= 2 && n_test >= 1, ErrorCode::kInvalidArgument, "sparse_probe: too few sequences to split");

  // Rank latents on the train split.
  const Eigen::Index f = features.cols();
  MatD class_sum = MatD::Zero(n_classes, f);
  VecD class_count = VecD::Zero(n_classes);
  for (Eigen::Index i = 0; i < n_train; ++i) {
    class_sum.row(labels[static_cast<std::size_t>(i)]) += features.row(i);
    class_count(labels[static_cast<std::size_t>(i)]) += 1.0;
  }
  const RowVecT<double> total = class_sum.colwise().sum();
  std::vector<double> score(static_cast<std::size_t>(f), 0.0);
  for (int c = 0; c < n_classes; ++c) {
    const double in = class_count(c), out = static_cast<double>(n_train) - in;
    if (in == 0.0 || out == 0.0) continue;
    for (Eigen::Index j = 0; j < f; ++j) {
      const double diff = std::abs(class_sum(c, j) / in - (total(j) - class_sum(c, j)) / out);
      score[static_cast<std::size_t>(j)] = std::max(score[static_cast<std::size_t>(j)], diff);
    }
  }
  std::vector<Eigen::Index> order(static_cast<std::size_t>(f));
  std::iota(order.begin(), order.end(), 0);
  std::stable_sort(order.begin(), order.end(), [&score](Eigen::Index a, Eigen::Index b) {
    return score[static_cast<std::size_t>(a)] > score[static_cast<std::size_t>(b)];
  });

  ProbeResult result;
  result.n_classes = n_classes;
  result.n_train = static_cast<std::size_t>(n_train);
  result.n_test = static_cast<std::size_t>(n_test);
  for (int top : options.top_n) {
    require(top >= 1, ErrorCode::kInvalidArgument, "sparse_probe: top_n must be >= 1");
    const Eigen::Index width = std::min<Eigen::Index>(top, f);
    MatD x(n, width);
    for (Eigen::Index c = 0; c < width; ++c) x.col(c) = features.col(order[static_cast<std::size_t>(c)]);
    const RowVecT<double> mu = x.topRows(n_train).colwise().mean();
    x.rowwise() -= mu;
    RowVecT<double> sd = (x.topRows(n_train).array().square().colwise().sum() / static_cast<double>(n_train)).sqrt();
    for (Eigen::Index c = 0; c < width; ++c) {
      if (sd(c) > 0.0) x.col(c) /= sd(c);
    }

    MatD y = MatD::Zero(n_train, n_classes);
    for (Eigen::Index i = 0; i < n_train; ++i) y(i, labels[static_cast<std::size_t>(i)]) = 1.0;
    MatD w = MatD::Zero(width, n_classes);
    RowVecT<double> b = RowVecT<double>::Zero(n_classes);
    const auto xt = x.topRows(n_train);
    for (int step = 0; step < options.steps; ++step) {
      MatD logits = xt * w;
      logits.rowwise() += b;
      for (Eigen::Index i = 0; i < n_train; ++i) {
        const double mx = logits.row(i).maxCoeff();
        logits.row(i) = (logits.row(i).array() - mx).exp().matrix();
        logits.row(i) /= logits.row(i).sum();
      }
      const MatD err = (logits - y) / static_cast<double>(n_train);
      w -= options.lr * (xt.transpose() * err);
      b -= options.lr * err.colwise().sum();
    }
    MatD test_logits = x.bottomRows(n_test) * w;
    test_logits.rowwise() += b;
    std::size_t correct = 0;
    for (Eigen::Index i = 0; i < n_test; ++i) {
      Eigen::Index arg = 0;
      test_logits.row(i).maxCoeff(&arg);
      if (static_cast<int>(arg) == labels[static_cast<std::size_t>(n_train + i)]) ++correct;
    }
    result.top_n.push_back(top);
    result.accuracy.push_back(static_cast<double>(correct) / static_cast<double>(n_test));
  }
  return result;
}

MatD sequence_code_features(const DictionaryStack& stack, std::span<const ActivationShard> shards,
                            std::vector<int>* labels) {
  stack.validate();
  const Eigen::Index n_latents = stack.saes.front().dict_size();
  const std::size_t m_blocks = stack.num_blocks();
  std::map<std::uint32_t, std::size_t> seq_index;
  std::vector<std::uint32_t> seq_order;
  for (const auto& s : shards) {
    for (const auto& o : s.origins) {
      if (seq_index.emplace(o.sequence, seq_order.size()).second) seq_order.push_back(o.sequence);
    }
  }
  MatD feats = MatD::Zero(static_cast<Eigen::Index>(seq_order.size()), n_latents * static_cast<Eigen::Index>(m_blocks));
  VecD counts = VecD::Zero(feats.rows());
  if (labels != nullptr) labels->assign(seq_order.size(), -1);

  for (const auto& s : shards) {
    for (std::size_t m = 0; m < m_blocks; ++m) {
      const Mat z = block_target(stack.chain, m, s);
      const SparseCodes codes = encode(stack.saes[m], z);
      for (Eigen::Index r = 0; r < codes.rows; ++r) {
        const std::size_t row = seq_index[s.origins[static_cast<std::size_t>(r)].sequence];
        for (std::size_t e = codes.offset[static_cast<std::size_t>(r)]; e < codes.offset[static_cast<std::size_t>(r) + 1]; ++e) {
          feats(static_cast<Eigen::Index>(row), static_cast<Eigen::Index>(m) * n_latents + codes.index[e]) += codes.value[e];
        }
      }
    }
    for (std::size_t r = 0; r < s.origins.size(); ++r) {
      const std::size_t row = seq_index[s.origins[r].sequence];
      counts(static_cast<Eigen::Index>(row)) += 1.0;
      if (labels != nullptr && s.has_labels()) (*labels)[row] = s.labels[r];
    }
  }
  for (Eigen::Index i = 0; i < feats.rows(); ++i) feats.row(i) /= std::max(1.0, counts(i));
  return feats;
}

ProbeResult sparse_probe(const DictionaryStack& stack, std::span<const ActivationShard> labeled_shards,
                         const ProbeOptions& options) {
  for (const auto& s : labeled_shards) {
    require(s.has_labels(), ErrorCode::kInvalidArgument, "sparse_probe: shards must carry labels");
  }
  std::vector<int> labels;
  const MatD feats = sequence_code_features(stack, labeled_shards, &labels);
  return sparse_probe_features(feats, labels, options);
}

namespace {

std::vector<TokenBatch> eval_batches(const Corpus& corpus, int seq_len, const EvalOptions& options) {
  std::vector<TokenBatch> out;
  const std::size_t step = static_cast<std::size_t>(std::max(1, options.batch_windows));
  for (std::size_t w = 0; w < options.n_windows; w += step) {
    out.push_back(corpus_windows(corpus.bytes, seq_len, options.first_window + w,
                                 std::min(step, options.n_windows - w)));
  }
  return out;
}

double mean_over_batches(std::span<const TokenBatch> batches, const std::function<double(const TokenBatch&)>& ce) {
  double total = 0.0, weight = 0.0;
  for (const auto& b : batches) {
    const double w = static_cast<double>(b.batch);
    total += ce(b) * w;
    weight += w;
  }
  return total / weight;
}

std::string utc_timestamp() {
  std::time_t t = std::time(nullptr);
  if (const char* epoch = std::getenv("SOURCE_DATE_EPOCH")) t = static_cast<std::time_t>(std::strtoll(epoch, nullptr, 10));
  std::tm tm{};
  gmtime_r(&t, &tm);
  char buf[32];
  std::strftime(buf, sizeof(buf), "%Y-%m-%dT%H:%M:%SZ", &tm);
  return buf;
}

}  // namespace

ProtocolResult evaluate_protocol(const TinyLm& lm, const Replacer& replacer, std::span<const TokenBatch> batches,
                                 double ce_clean, ReplaceMode mode) {
  const BlockSet all = all_blocks(*replacer.chain);
  ProtocolResult r;
  r.ce_joint = mean_over_batches(batches, [&](const TokenBatch& b) { return replaced_ce(lm, replacer, b, all, mode); });
  for (std::size_t m : all) {
    r.ce_single.push_back(
        mean_over_batches(batches, [&](const TokenBatch& b) { return replaced_ce(lm, replacer, b, {m}, mode); }));
  }
  r.oi = overinteraction(ce_clean, r.ce_joint, r.ce_single);
  return r;
}

InterventionReport evaluate_stack(const TinyLm& lm, const DictionaryStack& stack, const Corpus& corpus,
                                  const EvalOptions& options, const std::string& stack_id) {
  stack.validate();
  require(options.n_windows >= 1, ErrorCode::kInvalidArgument, "evaluation needs at least one window");
  const int t = lm.config().context_len;
  const std::vector<TokenBatch> batches = eval_batches(corpus, t, options);
  const Replacer replacer = Replacer::from_stack(stack, options.placement);

  InterventionReport rep;
  rep.stack_id = stack_id;
  rep.kind = stack.kind();
  rep.layer_set = stack.layer_set();
  rep.k = stack.k();
  rep.dict_size = stack.saes.front().dict_size();
  rep.seed = options.seed;
  rep.timestamp = utc_timestamp();
  rep.eval_tokens = options.n_windows * static_cast<std::size_t>(t);

  rep.ce_clean = mean_over_batches(batches, [&](const TokenBatch& b) { return cross_entropy(lm, b); });
  rep.teacher = evaluate_protocol(lm, replacer, batches, rep.ce_clean, ReplaceMode::kTeacherForced);
  rep.online = evaluate_protocol(lm, replacer, batches, rep.ce_clean, ReplaceMode::kOnline);

  CaptureOptions cap;
  cap.first_window = options.first_window;
  cap.placement = options.placement;
  const std::vector<ActivationShard> shards =
      capture_corpus(lm, corpus, stack.layer_set(), options.n_windows * static_cast<std::size_t>(t), cap);
  const std::vector<Mat> clean = gather_layers(shards, stack.layer_set());
  const std::size_t m_blocks = stack.num_blocks();
  const Eigen::Index rows = clean.front().rows();
  std::vector<Mat> h_hat(m_blocks, Mat(rows, clean.front().cols()));
  std::vector<MatD> z(m_blocks, MatD(rows, clean.front().cols()));
  std::vector<MatD> z_hat(m_blocks, MatD(rows, clean.front().cols()));
  std::vector<std::vector<std::uint64_t>> counts(m_blocks, std::vector<std::uint64_t>(static_cast<std::size_t>(rep.dict_size), 0));
  constexpr Eigen::Index kChunk = 4096;
  for (Eigen::Index r0 = 0; r0 < rows; r0 += kChunk) {
    const Eigen::Index n = std::min(kChunk, rows - r0);
    std::vector<Mat> part;
    for (const Mat& c : clean) part.push_back(c.middleRows(r0, n));
    const OfflineReconstruction rec = reconstruct_offline(replacer, part);
    for (std::size_t m = 0; m < m_blocks; ++m) {
      h_hat[m].middleRows(r0, n) = rec.h_hat[m];
      z[m].middleRows(r0, n) = rec.z[m];
      z_hat[m].middleRows(r0, n) = rec.z_hat[m];
      for (std::int32_t j : encode(stack.saes[m], Mat(rec.z[m].cast<float>())).index) ++counts[m][static_cast<std::size_t>(j)];
    }
  }
  for (std::size_t m = 0; m < m_blocks; ++m) {
    rep.ev_original.push_back(explained_variance(clean[m], h_hat[m]));
    if (stack.kind() == ChainKind::kResidual) rep.ev_residual.push_back(explained_variance(z[m], z_hat[m]));
    rep.mean_max_cosine.push_back(mean_max_decoder_cosine(stack.saes[m]));
    if (m + 1 < m_blocks) rep.cross_layer_cosine.push_back(cross_dictionary_max_cosine(stack.saes[m], stack.saes[m + 1]));
    const auto dead = std::count(counts[m].begin(), counts[m].end(), 0u);
    rep.dead_fraction.push_back(static_cast<double>(dead) / static_cast<double>(rep.dict_size));
  }
  auto mean = [](const std::vector<double>& v) {
    return v.empty() ? 0.0 : std::accumulate(v.begin(), v.end(), 0.0) / static_cast<double>(v.size());
  };
  rep.ev_original_mean = mean(rep.ev_original);
  rep.ev_residual_mean = mean(rep.ev_residual);
  rep.mean_max_cosine_mean = mean(rep.mean_max_cosine);

  if (options.run_probe && corpus.labeled()) rep.probe = sparse_probe(stack, shards, options.probe);
  return rep;
}

ComparisonReport build_report(const TinyLm& lm, const DictionaryStack& raw_stack, const DictionaryStack& resae_stack,
                              const Corpus& corpus, const EvalOptions& options) {
  require(raw_stack.layer_set() == resae_stack.layer_set(), ErrorCode::kInvalidArgument,
          "build_report: stacks must share the layer set");
  require(raw_stack.k() == resae_stack.k(), ErrorCode::kInvalidArgument, "build_report: stacks must share k");
  ComparisonReport out;
  out.raw = evaluate_stack(lm, raw_stack, corpus, options, "raw");
  out.resae = evaluate_stack(lm, resae_stack, corpus, options, "resae");
  return out;
}

namespace {

using nlohmann::ordered_json;

ordered_json protocol_json(const ProtocolResult& p) {
  return ordered_json{{"ce_joint", p.ce_joint},
                      {"ce_single", p.ce_single},
                      {"delta_joint", p.oi.delta_joint},
                      {"delta_additive", p.oi.delta_additive},
                      {"oi", p.oi.oi}};
}

ordered_json report_json(const InterventionReport& r) {
  ordered_json j;
  j["stack_id"] = r.stack_id;
  j["kind"] = r.kind == ChainKind::kRaw ? "raw" : "resae";
  j["layer_set"] = r.layer_set;
  j["k"] = r.k;
  j["dict_size"] = r.dict_size;
  j["seed"] = r.seed;
  j["timestamp"] = r.timestamp;
  j["eval_tokens"] = r.eval_tokens;
  j["ev_original"] = {{"per_layer", r.ev_original}, {"mean", r.ev_original_mean}};
  if (r.kind == ChainKind::kResidual) j["ev_residual"] = {{"per_layer", r.ev_residual}, {"mean", r.ev_residual_mean}};
  j["ce_clean"] = r.ce_clean;
  j["teacher_forced"] = protocol_json(r.teacher);
  j["online"] = protocol_json(r.online);
  j["mean_max_decoder_cosine"] = {{"per_layer", r.mean_max_cosine}, {"mean", r.mean_max_cosine_mean}};
  j["cross_layer_decoder_cosine"] = r.cross_layer_cosine;
  j["dead_fraction"] = r.dead_fraction;
  if (!r.probe.top_n.empty()) {
    ordered_json p;
    for (std::size_t i = 0; i < r.probe.top_n.size(); ++i) p["top_" + std::to_string(r.probe.top_n[i])] = r.probe.accuracy[i];
    p["n_classes"] = r.probe.n_classes;
    p["n_train"] = r.probe.n_train;
    p["n_test"] = r.probe.n_test;
    j["sparse_probe"] = p;
  }
  return j;
}

}  // namespace

std::string report_to_json(const InterventionReport& report) { return report_json(report).dump(2) + "\n"; }

std::string comparison_to_json(const ComparisonReport& c) {
  ordered_json j;
  j["raw"] = report_json(c.raw);
  j["resae"] = report_json(c.resae);
  ordered_json d;
  d["ev_original_mean"] = c.resae.ev_original_mean - c.raw.ev_original_mean;
  d["teacher_forced_delta_ce"] = c.resae.teacher.oi.delta_joint - c.raw.teacher.oi.delta_joint;
  d["online_delta_ce"] = c.resae.online.oi.delta_joint - c.raw.online.oi.delta_joint;
  d["teacher_forced_oi"] = c.resae.teacher.oi.oi - c.raw.teacher.oi.oi;
  d["online_oi"] = c.resae.online.oi.oi - c.raw.online.oi.oi;
  d["online_abs_oi"] = std::abs(c.resae.online.oi.oi) - std::abs(c.raw.online.oi.oi);
  d["mean_max_decoder_cosine"] = c.resae.mean_max_cosine_mean - c.raw.mean_max_cosine_mean;
  if (!c.raw.probe.accuracy.empty() && c.raw.probe.accuracy.size() == c.resae.probe.accuracy.size()) {
    for (std::size_t i = 0; i < c.raw.probe.top_n.size(); ++i) {
      d["probe_top_" + std::to_string(c.raw.probe.top_n[i])] = c.resae.probe.accuracy[i] - c.raw.probe.accuracy[i];
    }
  }
  j["resae_minus_raw"] = d;
  return j.dump(2) + "\n";
}

namespace {

ProtocolResult protocol_from(const nlohmann::ordered_json& j) {
  ProtocolResult p;
  p.ce_joint = j.at("ce_joint").get<double>();
  p.ce_single = j.at("ce_single").get<std::vector<double>>();
  p.oi.delta_joint = j.at("delta_joint").get<double>();
  p.oi.delta_additive = j.at("delta_additive").get<double>();
  p.oi.oi = j.at("oi").get<double>();
  return p;
}

InterventionReport report_from(const nlohmann::ordered_json& j) {
  InterventionReport r;
  r.stack_id = j.at("stack_id").get<std::string>();
  r.kind = j.at("kind").get<std::string>() == "raw" ? ChainKind::kRaw : ChainKind::kResidual;
  r.layer_set = j.at("layer_set").get<std::vector<int>>();
  r.k = j.at("k").get<int>();
  r.dict_size = j.at("dict_size").get<Eigen::Index>();
  r.seed = j.at("seed").get<std::uint64_t>();
  r.timestamp = j.at("timestamp").get<std::string>();
  r.eval_tokens = j.at("eval_tokens").get<std::size_t>();
  r.ev_original = j.at("ev_original").at("per_layer").get<std::vector<double>>();
  r.ev_original_mean = j.at("ev_original").at("mean").get<double>();
  if (j.contains("ev_residual")) {
    r.ev_residual = j.at("ev_residual").at("per_layer").get<std::vector<double>>();
    r.ev_residual_mean = j.at("ev_residual").at("mean").get<double>();
  }
  r.ce_clean = j.at("ce_clean").get<double>();
  r.teacher = protocol_from(j.at("teacher_forced"));
  r.online = protocol_from(j.at("online"));
  r.mean_max_cosine = j.at("mean_max_decoder_cosine").at("per_layer").get<std::vector<double>>();
  r.mean_max_cosine_mean = j.at("mean_max_decoder_cosine").at("mean").get<double>();
  r.cross_layer_cosine = j.at("cross_layer_decoder_cosine").get<std::vector<double>>();
  r.dead_fraction = j.at("dead_fraction").get<std::vector<double>>();
  if (j.contains("sparse_probe")) {
    const auto& p = j.at("sparse_probe");
    for (const auto& [key, value] : p.items()) {
      if (key.rfind("top_", 0) == 0) {
        r.probe.top_n.push_back(std::stoi(key.substr(4)));
        r.probe.accuracy.push_back(value.get<double>());
      }
    }
    r.probe.n_classes = p.at("n_classes").get<int>();
    r.probe.n_train = p.at("n_train").get<std::size_t>();
    r.probe.n_test = p.at("n_test").get<std::size_t>();
  }
  return r;
}

}  // namespace

ComparisonReport comparison_from_json(std::string_view text) {
  try {
    const auto j = nlohmann::ordered_json::parse(text);
    return ComparisonReport{report_from(j.at("raw")), report_from(j.at("resae"))};
  } catch (const nlohmann::json::exception& e) {
    fail(ErrorCode::kFormat, std::string("malformed report: ") + e.what());
  }
}

std::string comparison_to_csv(const ComparisonReport& c) {
  std::ostringstream out;
  out.precision(10);
  out << "family,k,layer,ev_original,ev_residual,mean_max_cosine,dead_fraction,ce_single_teacher,ce_single_online\n";
  for (const InterventionReport* r : {&c.raw, &c.resae}) {
    for (std::size_t m = 0; m < r->layer_set.size(); ++m) {
      out << r->stack_id << ',' << r->k << ',' << r->layer_set[m] << ',' << r->ev_original[m] << ',';
      if (m < r->ev_residual.size()) out << r->ev_residual[m];
      out << ',' << r->mean_max_cosine[m] << ',' << r->dead_fraction[m] << ',' << r->teacher.ce_single[m] << ','
          << r->online.ce_single[m] << '\n';
    }
  }
  return out.str();
}

}  // namespace resae
