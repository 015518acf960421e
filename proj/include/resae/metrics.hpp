#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "resae/actstore.hpp"
#include "resae/corpus.hpp"
#include "resae/intervene.hpp"

namespace resae {

// 1 - sum ||h - h_hat||^2 / sum ||h - mean(h)||^2, mean taken over `clean`.
double explained_variance(const Mat& clean, const Mat& recon);
double explained_variance(const MatD& clean, const MatD& recon);

struct OverInteraction {
  double delta_joint = 0.0;     // CE(S) - CE(empty)
  double delta_additive = 0.0;  // sum of single-layer deltas
  double oi = 0.0;              // delta_joint - delta_additive
};

OverInteraction overinteraction(double ce_clean, double ce_joint, std::span<const double> ce_singletons);

// Mean over decoder columns of the largest |cosine| with any other column.
double mean_max_decoder_cosine(const SaeParams& sae);
double stack_mean_max_cosine(const DictionaryStack& stack);
// Diagnostic: mean over columns of `a` of the largest |cosine| with a column of `b`.
double cross_dictionary_max_cosine(const SaeParams& a, const SaeParams& b);

struct ProbeOptions {
  std::vector<int> top_n{1, 2, 5};
  double train_fraction = 0.8;
  int steps = 500;
  double lr = 0.1;
};

struct ProbeResult {
  std::vector<int> top_n;
  std::vector<double> accuracy;
  int n_classes = 0;
  std::size_t n_train = 0;
  std::size_t n_test = 0;
};

// features: one row per sequence. Latents are ranked on the train split by
// the largest |class mean - rest mean|; a softmax-regression probe is then
// fit on the top-n latents and scored on the held-out split.
ProbeResult sparse_probe_features(const MatD& features, std::span<const int> labels, const ProbeOptions& options = {});

// Per sequence: mean code activation over positions, concatenated over layers.
MatD sequence_code_features(const DictionaryStack& stack, std::span<const ActivationShard> shards,
                            std::vector<int>* labels);

ProbeResult sparse_probe(const DictionaryStack& stack, std::span<const ActivationShard> labeled_shards,
                         const ProbeOptions& options = {});

struct ProtocolResult {
  double ce_joint = 0.0;
  std::vector<double> ce_single;
  OverInteraction oi;
};

struct InterventionReport {
  std::string stack_id;
  ChainKind kind = ChainKind::kRaw;
  std::vector<int> layer_set;
  int k = 0;
  Eigen::Index dict_size = 0;
  std::vector<double> ev_original;
  double ev_original_mean = 0.0;
  std::vector<double> ev_residual;  // residual stacks only
  double ev_residual_mean = 0.0;
  double ce_clean = 0.0;
  ProtocolResult teacher;
  ProtocolResult online;
  std::vector<double> mean_max_cosine;
  double mean_max_cosine_mean = 0.0;
  std::vector<double> cross_layer_cosine;  // consecutive block pairs
  std::vector<double> dead_fraction;
  ProbeResult probe;
  std::uint64_t seed = 0;
  std::string timestamp;
  std::size_t eval_tokens = 0;
};

struct EvalOptions {
  std::size_t first_window = 0;
  std::size_t n_windows = 64;
  int batch_windows = 16;
  ProbeOptions probe;
  std::uint64_t seed = 0;
  bool run_probe = true;
  HookPlacement placement = HookPlacement::kPostBlock;
};

// CE(empty), CE(S) and CE({l}) under both protocols, EV, decoder cosine,
// dead latents and probing for one stack on the eval windows of `corpus`.
InterventionReport evaluate_stack(const TinyLm& lm, const DictionaryStack& stack, const Corpus& corpus,
                                  const EvalOptions& options, const std::string& stack_id);

// Runs one protocol over the eval windows and returns CE(S) and CE({l}).
ProtocolResult evaluate_protocol(const TinyLm& lm, const Replacer& replacer, std::span<const TokenBatch> batches,
                                 double ce_clean, ReplaceMode mode);

struct ComparisonReport {
  InterventionReport raw;
  InterventionReport resae;
};

ComparisonReport build_report(const TinyLm& lm, const DictionaryStack& raw_stack, const DictionaryStack& resae_stack,
                              const Corpus& corpus, const EvalOptions& options);

std::string report_to_json(const InterventionReport& report);
std::string comparison_to_json(const ComparisonReport& report);
// Inverse of comparison_to_json for the fields it writes.
ComparisonReport comparison_from_json(std::string_view text);
// One row per (family, layer).
std::string comparison_to_csv(const ComparisonReport& report);

}  // namespace resae
