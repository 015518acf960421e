#pragma once

// End-to-end raw-vs-residual comparison driven by a plain-text config.
//
// Config files are INI-like: `[section]` headers and `key = value` lines,
// `#` or `;` comments. Sections only group keys for readability; every key
// name is unique, so the CLI can expose each one as a flag of the same name.
//
// Output directory layout:
//   corpus.bin (+ .labels)      generated corpus, unless `corpus` names a file
//   lm.tlm                      trained checkpoint, unless `lm_checkpoint` is set
//   shards/calib, shards/train  ASH1 captures over disjoint window ranges
//   chains/resae.rch, chains/raw.rch, calibration.json
//   stacks/<family>_k<K>/       chain.rch + sae_<m>.sae + train_stats.json
//   reports/k<K>.json, reports/k<K>.csv
//   layer_gap.json              held-out R^2 per layer gap
//   manifest.txt                see write_manifest()

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "resae/metrics.hpp"

namespace resae {

struct ExperimentConfig {
  std::filesystem::path out_dir = "resae_out";
  std::uint64_t seed = 1;

  // Corpus: "synthetic" or a file path.
  std::string corpus = "synthetic";
  std::size_t n_docs = 4096;
  int n_classes = 4;

  LmConfig lm;
  std::filesystem::path lm_checkpoint;  // empty: train into out_dir/lm.tlm
  std::int64_t lm_steps = 3000;
  int lm_batch = 8;
  double lm_lr = 1e-3;
  HookPlacement placement = HookPlacement::kPostBlock;

  std::vector<int> layers{0, 2, 4, 6};
  double lambda_scale = 1e-4;
  double epsilon = 1e-6;
  std::size_t calib_tokens = 50'000;

  std::vector<int> k_list{8, 16, 32, 64};
  Eigen::Index dict_size = 1024;
  std::size_t train_tokens = 200'000;  // distinct captured rows
  std::int64_t sae_rows = 5'000'000;   // rows streamed per SAE (epochs over the capture)
  Eigen::Index batch_rows = 1024;
  double sae_lr = 3e-4;
  int warmup_steps = 1000;
  double decay_fraction = 0.2;
  TopKMode topk_mode = TopKMode::kPerToken;

  std::size_t eval_tokens = 32'768;
  std::vector<int> probe_top_n{1, 2, 5};
  std::vector<int> gaps{1, 2, 3};

  // Throws kInvalidArgument naming the offending key.
  void validate() const;
};

// Every recognised key with its current value, in file order.
std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& config);
// Applies one key; unknown keys and malformed values throw kInvalidArgument.
void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value);
// Parses config text on top of the defaults. Does not validate.
ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::filesystem::path& path);
std::string format_config(const ExperimentConfig& config);

// Window ranges used by each stage. Windows are non-overlapping context-length
// slices of the corpus; the three ranges are disjoint and in this order.
struct WindowPlan {
  std::size_t calib_first = 0, calib_count = 0;
  std::size_t train_first = 0, train_count = 0;
  std::size_t eval_first = 0, eval_count = 0;
};
WindowPlan plan_windows(const ExperimentConfig& config);

// Mean held-out R^2 of consecutive affine maps for evenly spaced layer sets
// {0, g, 2g, ...} below n_layers.
struct LayerGapPoint {
  int gap = 0;
  std::vector<int> layers;
  std::vector<double> heldout_r2;
  double mean_r2 = 0.0;
};
std::vector<LayerGapPoint> layer_gap_sweep(std::span<const ActivationShard> shards, int n_layers,
                                           std::span<const int> gaps, const CalibrationOptions& options);
std::string layer_gap_to_json(std::span<const LayerGapPoint> points);

// 64-bit FNV-1a over a file's bytes.
std::uint64_t file_hash(const std::filesystem::path& path);

// manifest.txt:
//   resae-manifest 1
//   stage <name> <input-key hex16>
//   file <stage> <hash hex16> <size> <path relative to out_dir>
// Stage lines come in execution order; each file line follows its stage.
struct ManifestFile {
  std::string path;  // relative, '/' separated
  std::uint64_t hash = 0;
  std::uintmax_t size = 0;
};
struct ManifestStage {
  std::string name;
  std::uint64_t key = 0;
  std::vector<ManifestFile> files;
};
struct Manifest {
  std::vector<ManifestStage> stages;
  const ManifestStage* find(std::string_view name) const;
};
void write_manifest(const Manifest& manifest, const std::filesystem::path& path);
Manifest read_manifest(const std::filesystem::path& path);

struct PipelineResult {
  std::vector<ComparisonReport> reports;  // one per k, in k_list order
  CalibrationDiagnostics calibration;
  std::vector<LayerGapPoint> layer_gap;
  std::vector<std::string> skipped_stages;
  std::vector<std::string> executed_stages;
};

using ProgressFn = std::function<void(const std::string& message)>;

// Runs every stage, skipping those whose recorded input key and output hashes
// still match. Errors are rethrown with the failing stage's name prefixed;
// artifacts of completed stages stay recorded in the manifest.
PipelineResult run_pipeline(const ExperimentConfig& config, const ProgressFn& progress = {});

}  // namespace resae
