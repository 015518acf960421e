#include "resae/resae.h"

#include <cstring>
#include <filesystem>
#include <fstream>
#include <new>
#include <string>

#include "json.hpp"
#include "resae/pipeline.hpp"

namespace fs = std::filesystem;
using namespace resae;

struct resae_lm {
  TinyLm model;
};

struct resae_config {
  ExperimentConfig config;
  mutable std::string scratch;
};

namespace {

thread_local std::string g_last_error;

resae_status to_status(ErrorCode code) {
  switch (code) {
    case ErrorCode::kOk: return RESAE_OK;
    case ErrorCode::kInvalidArgument: return RESAE_ERR_INVALID_ARGUMENT;
    case ErrorCode::kOutOfRange: return RESAE_ERR_OUT_OF_RANGE;
    case ErrorCode::kDimensionMismatch: return RESAE_ERR_DIMENSION_MISMATCH;
    case ErrorCode::kIo: return RESAE_ERR_IO;
    case ErrorCode::kFormat: return RESAE_ERR_FORMAT;
    case ErrorCode::kNumerical: return RESAE_ERR_NUMERICAL;
    case ErrorCode::kState: return RESAE_ERR_STATE;
    case ErrorCode::kInternal: return RESAE_ERR_INTERNAL;
  }
  return RESAE_ERR_INTERNAL;
}

// Runs `body`, translating exceptions into a status and the thread's last
// error message. Nothing escapes across the C boundary.
template <typename F>
resae_status guarded(F&& body) {
  try {
    body();
    g_last_error.clear();
    return RESAE_OK;
  } catch (const Error& e) {
    g_last_error = e.what();
    return to_status(e.code());
  } catch (const std::bad_alloc&) {
    g_last_error = "out of memory";
    return RESAE_ERR_INTERNAL;
  } catch (const std::filesystem::filesystem_error& e) {
    g_last_error = e.what();
    return RESAE_ERR_IO;
  } catch (const std::exception& e) {
    g_last_error = e.what();
    return RESAE_ERR_INTERNAL;
  } catch (...) {
    g_last_error = "unknown error";
    return RESAE_ERR_INTERNAL;
  }
}

const char* need_str(const char* s, const char* what) {
  require(s != nullptr && *s != '\0', ErrorCode::kInvalidArgument, std::string(what) + " must be a non-empty string");
  return s;
}

template <typename T>
void need_ptr(const T* p, const char* what) {
  require(p != nullptr, ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
}

std::vector<int> int_list(const int* values, size_t n, const char* what) {
  require(n == 0 || values != nullptr, ErrorCode::kInvalidArgument, std::string(what) + " must not be NULL");
  return std::vector<int>(values, values + n);
}

Corpus corpus_for(const resae_lm* lm, const char* path) {
  return load_corpus(need_str(path, "corpus_path"), lm->model.config().context_len);
}

void write_file(const fs::path& path, const std::string& text) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "write failed: " + path.string());
}

}  // namespace

extern "C" {

const char* resae_last_error(void) { return g_last_error.c_str(); }

const char* resae_status_name(resae_status status) {
  switch (status) {
    case RESAE_OK: return "ok";
    case RESAE_ERR_INVALID_ARGUMENT: return "invalid argument";
    case RESAE_ERR_OUT_OF_RANGE: return "out of range";
    case RESAE_ERR_DIMENSION_MISMATCH: return "dimension mismatch";
    case RESAE_ERR_IO: return "i/o error";
    case RESAE_ERR_FORMAT: return "format error";
    case RESAE_ERR_NUMERICAL: return "numerical error";
    case RESAE_ERR_STATE: return "state error";
    case RESAE_ERR_INTERNAL: return "internal error";
  }
  return "unknown status";
}

const char* resae_version(void) { return "0.1.0"; }

resae_status resae_gen_corpus(const char* path, size_t n_docs, int n_classes, int doc_len, uint64_t seed) {
  return guarded([&] {
    SyntheticCorpusOptions opt;
    opt.n_docs = n_docs;
    opt.n_classes = n_classes;
    opt.doc_len = doc_len;
    opt.seed = seed;
    save_corpus(generate_synthetic_corpus(opt), need_str(path, "path"));
  });
}

void resae_lm_default_options(resae_lm_options* o) {
  if (o == nullptr) return;
  const LmConfig c;
  const TrainLmOptions t;
  o->n_layers = c.n_layers;
  o->d_model = c.d_model;
  o->n_heads = c.n_heads;
  o->d_ff = c.d_ff;
  o->context_len = c.context_len;
  o->steps = t.steps;
  o->batch_size = t.batch_size;
  o->warmup_steps = t.warmup_steps;
  o->lr = t.lr;
  o->seed = c.seed;
}

resae_status resae_lm_train(const char* corpus_path, const resae_lm_options* o, resae_lm** out, double* heldout_ce) {
  return guarded([&] {
    need_ptr(o, "options");
    need_ptr(out, "out");
    LmConfig c;
    c.n_layers = o->n_layers;
    c.d_model = o->d_model;
    c.n_heads = o->n_heads;
    c.d_ff = o->d_ff;
    c.context_len = o->context_len;
    c.seed = o->seed;
    TrainLmOptions t;
    t.steps = o->steps;
    t.batch_size = o->batch_size;
    t.warmup_steps = o->warmup_steps;
    t.lr = static_cast<float>(o->lr);
    const Corpus corpus = load_corpus(need_str(corpus_path, "corpus_path"), c.context_len);
    TrainLmResult r;
    auto lm = std::make_unique<resae_lm>(resae_lm{train_lm(corpus.bytes, c, t, &r)});
    if (heldout_ce != nullptr) *heldout_ce = r.final_heldout_ce;
    *out = lm.release();
  });
}

resae_status resae_lm_load(const char* path, resae_lm** out) {
  return guarded([&] {
    need_ptr(out, "out");
    *out = new resae_lm{load_lm(need_str(path, "path"))};
  });
}

resae_status resae_lm_save(const resae_lm* lm, const char* path) {
  return guarded([&] {
    need_ptr(lm, "lm");
    save_lm(lm->model, need_str(path, "path"));
  });
}

void resae_lm_free(resae_lm* lm) { delete lm; }

resae_status resae_lm_shape(const resae_lm* lm, int* n_layers, int* d_model, int* context_len) {
  return guarded([&] {
    need_ptr(lm, "lm");
    const LmConfig& c = lm->model.config();
    if (n_layers != nullptr) *n_layers = c.n_layers;
    if (d_model != nullptr) *d_model = c.d_model;
    if (context_len != nullptr) *context_len = c.context_len;
  });
}

resae_status resae_lm_cross_entropy(const resae_lm* lm, const char* corpus_path, size_t first_window, size_t n_windows,
                                    double* out) {
  return guarded([&] {
    need_ptr(lm, "lm");
    need_ptr(out, "out");
    require(n_windows >= 1, ErrorCode::kInvalidArgument, "n_windows must be >= 1");
    const Corpus corpus = corpus_for(lm, corpus_path);
    const int t = lm->model.config().context_len;
    double total = 0.0;
    for (size_t w = 0; w < n_windows; w += 16) {
      const size_t n = std::min<size_t>(16, n_windows - w);
      total += cross_entropy(lm->model, corpus_windows(corpus.bytes, t, first_window + w, n)) * static_cast<double>(n);
    }
    *out = total / static_cast<double>(n_windows);
  });
}

resae_status resae_capture(const resae_lm* lm, const char* corpus_path, const int* layers, size_t n_layers,
                           size_t n_tokens, size_t first_window, resae_placement placement, const char* out_dir,
                           size_t* n_shards) {
  return guarded([&] {
    need_ptr(lm, "lm");
    const std::vector<int> ls = int_list(layers, n_layers, "layers");
    require(!ls.empty(), ErrorCode::kInvalidArgument, "at least one layer is required");
    for (int l : ls) {
      require(l >= 0 && l < lm->model.config().n_layers, ErrorCode::kOutOfRange, "layer " + std::to_string(l) + " out of range");
    }
    CaptureOptions opt;
    opt.first_window = first_window;
    opt.placement = placement == RESAE_POST_LAYERNORM ? HookPlacement::kPostLayerNorm : HookPlacement::kPostBlock;
    const Corpus corpus = corpus_for(lm, corpus_path);
    const auto shards = capture_corpus(lm->model, corpus, ls, n_tokens, opt);
    const auto paths = write_shards(shards, need_str(out_dir, "out_dir"));
    if (n_shards != nullptr) *n_shards = paths.size();
  });
}

namespace {

std::vector<ActivationShard> read_dir(const char* dir) {
  std::vector<ActivationShard> shards;
  for (const auto& p : list_shards(need_str(dir, "shard_dir"))) shards.push_back(read_shard(p));
  require(!shards.empty(), ErrorCode::kIo, std::string("no shards in ") + dir);
  return shards;
}

}  // namespace

resae_status resae_calibrate(const char* shard_dir, const int* layers, size_t n_layers, resae_chain_kind kind,
                             double lambda_scale, double epsilon, const char* out_path, double* heldout_r2) {
  return guarded([&] {
    const std::vector<int> ls = int_list(layers, n_layers, "layers");
    const auto shards = read_dir(shard_dir);
    RegressionChain chain;
    if (kind == RESAE_CHAIN_RAW) {
      chain = calibrate_raw_scales(shards, ls, epsilon);
    } else {
      CalibrationOptions opt;
      opt.lambda_scale = lambda_scale;
      opt.epsilon = epsilon;
      CalibrationDiagnostics diag;
      chain = calibrate_chain(shards, ls, opt, &diag);
      if (heldout_r2 != nullptr) std::copy(diag.heldout_r2.begin(), diag.heldout_r2.end(), heldout_r2);
    }
    save_chain(chain, need_str(out_path, "out_path"));
  });
}

void resae_sae_default_options(resae_sae_options* o) {
  if (o == nullptr) return;
  const TrainConfig t;
  const SaeInit i;
  o->dict_size = i.dict_size;
  o->k = i.k;
  o->lr = t.lr;
  o->warmup_steps = t.warmup_steps;
  o->decay_fraction = t.decay_fraction;
  o->batch_rows = t.batch_rows;
  o->total_rows = t.total_rows;
  o->seed = t.seed;
  o->topk_mode = RESAE_TOPK_PER_TOKEN;
}

resae_status resae_train_sae(const char* shard_dir, const char* chain_path, const int* layers, size_t n_layers,
                             int block, const resae_sae_options* o, const char* out_path, double* final_loss) {
  return guarded([&] {
    need_ptr(o, "options");
    const fs::path out = need_str(out_path, "out_path");
    const std::vector<fs::path> paths = list_shards(need_str(shard_dir, "shard_dir"));
    require(!paths.empty(), ErrorCode::kIo, std::string("no shards in ") + shard_dir);

    RegressionChain chain;
    if (chain_path == nullptr || std::strcmp(chain_path, "none") == 0) {
      std::vector<ActivationShard> shards;
      for (const auto& p : paths) shards.push_back(read_shard(p));
      std::vector<int> ls = int_list(layers, n_layers, "layers");
      if (ls.empty()) ls = shards.front().layer_set;
      chain = calibrate_raw_scales(shards, ls, 1e-6);
    } else {
      chain = load_chain(chain_path);
    }
    require(block >= 0 && static_cast<size_t>(block) < chain.num_blocks(), ErrorCode::kOutOfRange,
            "block " + std::to_string(block) + " outside the chain's " + std::to_string(chain.num_blocks()) + " blocks");

    const fs::path stack_dir = out.has_parent_path() ? out.parent_path() : fs::path(".");
    fs::create_directories(stack_dir);
    const fs::path stack_chain = stack_dir / "chain.rch";
    if (fs::exists(stack_chain)) {
      require(load_chain(stack_chain) == chain, ErrorCode::kState,
              stack_dir.string() + " already holds a different chain");
    } else {
      save_chain(chain, stack_chain);
    }

    const size_t m = static_cast<size_t>(block);
    ShardRowStream stream(paths, [&chain, m](const ActivationShard& s) { return block_target(chain, m, s); });
    TrainConfig tc;
    tc.lr = static_cast<float>(o->lr);
    tc.warmup_steps = o->warmup_steps;
    tc.decay_fraction = o->decay_fraction;
    tc.batch_rows = o->batch_rows;
    tc.total_rows = o->total_rows;
    tc.seed = o->seed;
    tc.topk_mode = o->topk_mode == RESAE_TOPK_BATCH ? TopKMode::kBatch : TopKMode::kPerToken;
    SaeInit init;
    init.dict_size = o->dict_size;
    init.k = o->k;
    init.target_kind = chain.kind == ChainKind::kRaw ? TargetKind::kRaw : TargetKind::kResidual;
    init.block_index = block;
    SaeTrainStats stats;
    const SaeParams sae = train_sae(stream, tc, init, &stats);
    save_sae(sae, out);
    if (final_loss != nullptr) *final_loss = stats.final_loss;
  });
}

resae_status resae_intervene(const resae_lm* lm, const char* stack_dir, const char* corpus_path,
                             const char* layers_subset, resae_mode mode, size_t n_tokens, size_t first_window,
                             const char* report_path, double* ce_clean, double* ce_replaced) {
  return guarded([&] {
    need_ptr(lm, "lm");
    const DictionaryStack stack = load_stack(need_str(stack_dir, "stack_dir"));
    const Corpus corpus = corpus_for(lm, corpus_path);
    const BlockSet blocks = parse_block_subset(stack.chain, layers_subset == nullptr ? "all" : layers_subset);
    const int t = lm->model.config().context_len;
    const size_t windows = (n_tokens + static_cast<size_t>(t) - 1) / static_cast<size_t>(t);
    require(windows >= 1, ErrorCode::kInvalidArgument, "n_tokens must be >= 1");
    const Replacer replacer = Replacer::from_stack(stack);
    const ReplaceMode rm = mode == RESAE_MODE_ONLINE ? ReplaceMode::kOnline : ReplaceMode::kTeacherForced;
    double clean = 0.0, replaced = 0.0;
    for (size_t w = 0; w < windows; w += 16) {
      const size_t n = std::min<size_t>(16, windows - w);
      const TokenBatch batch = corpus_windows(corpus.bytes, t, first_window + w, n);
      clean += cross_entropy(lm->model, batch) * static_cast<double>(n);
      replaced += replaced_ce(lm->model, replacer, batch, blocks, rm) * static_cast<double>(n);
    }
    clean /= static_cast<double>(windows);
    replaced /= static_cast<double>(windows);
    if (report_path != nullptr) {
      std::vector<int> layers;
      for (size_t m : blocks) layers.push_back(stack.layer_set()[m]);
      nlohmann::ordered_json j{{"stack", stack_dir},
                               {"kind", stack.kind() == ChainKind::kRaw ? "raw" : "resae"},
                               {"layer_set", stack.layer_set()},
                               {"replaced_layers", layers},
                               {"k", stack.k()},
                               {"mode", mode == RESAE_MODE_ONLINE ? "online" : "teacher"},
                               {"tokens", windows * static_cast<size_t>(t)},
                               {"first_window", first_window},
                               {"ce_clean", clean},
                               {"ce_replaced", replaced},
                               {"delta_ce", replaced - clean}};
      write_file(report_path, j.dump(2) + "\n");
    }
    if (ce_clean != nullptr) *ce_clean = clean;
    if (ce_replaced != nullptr) *ce_replaced = replaced;
  });
}

resae_status resae_eval(const resae_lm* lm, const char* raw_stack_dir, const char* resae_stack_dir,
                        const char* corpus_path, size_t n_tokens, size_t first_window, const char* out_path) {
  return guarded([&] {
    need_ptr(lm, "lm");
    const DictionaryStack raw = load_stack(need_str(raw_stack_dir, "raw_stack_dir"));
    const DictionaryStack resae = load_stack(need_str(resae_stack_dir, "resae_stack_dir"));
    const Corpus corpus = corpus_for(lm, corpus_path);
    const int t = lm->model.config().context_len;
    EvalOptions eo;
    eo.first_window = first_window;
    eo.n_windows = (n_tokens + static_cast<size_t>(t) - 1) / static_cast<size_t>(t);
    eo.run_probe = corpus.labeled();
    const ComparisonReport rep = build_report(lm->model, raw, resae, corpus, eo);
    fs::path out = need_str(out_path, "out_path");
    write_file(out, comparison_to_json(rep));
    write_file(fs::path(out).replace_extension(".csv"), comparison_to_csv(rep));
  });
}

resae_status resae_config_new(resae_config** out) {
  return guarded([&] {
    need_ptr(out, "out");
    *out = new resae_config{};
  });
}

resae_status resae_config_load(const char* path, resae_config** out) {
  return guarded([&] {
    need_ptr(out, "out");
    *out = new resae_config{load_config(need_str(path, "path")), {}};
  });
}

resae_status resae_config_set(resae_config* config, const char* key, const char* value) {
  return guarded([&] {
    need_ptr(config, "config");
    need_ptr(value, "value");
    set_config_value(config->config, need_str(key, "key"), value);
  });
}

size_t resae_config_key_count(void) { return config_entries(ExperimentConfig{}).size(); }

const char* resae_config_key_name(size_t index) {
  static const std::vector<std::pair<std::string, std::string>> entries = config_entries(ExperimentConfig{});
  return index < entries.size() ? entries[index].first.c_str() : nullptr;
}

resae_status resae_config_get(const resae_config* config, const char* key, const char** value) {
  return guarded([&] {
    need_ptr(config, "config");
    need_ptr(value, "value");
    const std::string k = need_str(key, "key");
    for (auto& [name, v] : config_entries(config->config)) {
      if (name == k) {
        config->scratch = v;
        *value = config->scratch.c_str();
        return;
      }
    }
    fail(ErrorCode::kInvalidArgument, "unknown config key '" + k + "'");
  });
}

resae_status resae_config_validate(const resae_config* config) {
  return guarded([&] {
    need_ptr(config, "config");
    config->config.validate();
  });
}

void resae_config_free(resae_config* config) { delete config; }

resae_status resae_run_pipeline(const resae_config* config, resae_progress_fn progress, void* user) {
  return guarded([&] {
    need_ptr(config, "config");
    ProgressFn fn;
    if (progress != nullptr) fn = [progress, user](const std::string& msg) { progress(msg.c_str(), user); };
    run_pipeline(config->config, fn);
  });
}

resae_status resae_layer_gap(const resae_lm* lm, const char* corpus_path, const int* gaps, size_t n_gaps,
                             size_t n_tokens, double lambda_scale, const char* out_path) {
  return guarded([&] {
    need_ptr(lm, "lm");
    const std::vector<int> gs = int_list(gaps, n_gaps, "gaps");
    require(!gs.empty(), ErrorCode::kInvalidArgument, "at least one gap is required");
    const Corpus corpus = corpus_for(lm, corpus_path);
    std::vector<int> all(static_cast<size_t>(lm->model.config().n_layers));
    for (size_t i = 0; i < all.size(); ++i) all[i] = static_cast<int>(i);
    const auto shards = capture_corpus(lm->model, corpus, all, n_tokens);
    CalibrationOptions opt;
    opt.lambda_scale = lambda_scale;
    const auto points = layer_gap_sweep(shards, lm->model.config().n_layers, gs, opt);
    write_file(need_str(out_path, "out_path"), layer_gap_to_json(points));
  });
}

}  // extern "C"
