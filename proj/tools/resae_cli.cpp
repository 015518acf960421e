// Command-line front end. Links only the C interface.

#include <algorithm>
#include <cstdio>
#include <memory>
#include <iostream>
#include <map>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "resae/resae.h"

namespace {

int report(resae_status st, const std::string& command) {
  if (st == RESAE_OK) return 0;
  std::cerr << "resae " << command << ": " << resae_status_name(st) << ": " << resae_last_error() << "\n";
  return static_cast<int>(st) == 0 ? 1 : static_cast<int>(st);
}

class LmHandle {
 public:
  LmHandle() = default;
  ~LmHandle() { resae_lm_free(lm_); }
  LmHandle(const LmHandle&) = delete;
  LmHandle& operator=(const LmHandle&) = delete;
  resae_lm** out() { return &lm_; }
  const resae_lm* get() const { return lm_; }

 private:
  resae_lm* lm_ = nullptr;
};

void print_progress(const char* message, void*) { std::cerr << message << "\n"; }

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Residualized sparse autoencoders on a tiny byte-level transformer"};
  app.require_subcommand(1);
  app.set_version_flag("--version", std::string(resae_version()));
  int rc = 0;

  // gen-corpus
  {
    auto* cmd = app.add_subcommand("gen-corpus", "Write a labeled synthetic corpus");
    auto out = std::make_shared<std::string>();
    auto docs = std::make_shared<std::size_t>(4096);
    auto classes = std::make_shared<int>(4);
    auto doc_len = std::make_shared<int>(128);
    auto seed = std::make_shared<std::uint64_t>(1);
    cmd->add_option("--out", *out, "Corpus path (labels go to <out>.labels)")->required();
    cmd->add_option("--docs", *docs, "Number of documents")->capture_default_str();
    cmd->add_option("--classes", *classes, "Number of topic classes")->capture_default_str();
    cmd->add_option("--doc-len", *doc_len, "Bytes per document (match the LM context length)")->capture_default_str();
    cmd->add_option("--seed", *seed)->capture_default_str();
    cmd->callback([=, &rc] { rc = report(resae_gen_corpus(out->c_str(), *docs, *classes, *doc_len, *seed), "gen-corpus"); });
  }

  // train-lm
  {
    auto* cmd = app.add_subcommand("train-lm", "Train the tiny language model");
    auto corpus = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto opt = std::make_shared<resae_lm_options>();
    resae_lm_default_options(opt.get());
    cmd->add_option("--corpus", *corpus)->required();
    cmd->add_option("--out", *out)->required();
    cmd->add_option("--steps", opt->steps)->capture_default_str();
    cmd->add_option("--seed", opt->seed)->capture_default_str();
    cmd->add_option("--n-layers", opt->n_layers)->capture_default_str();
    cmd->add_option("--d-model", opt->d_model)->capture_default_str();
    cmd->add_option("--n-heads", opt->n_heads)->capture_default_str();
    cmd->add_option("--d-ff", opt->d_ff)->capture_default_str();
    cmd->add_option("--context-len", opt->context_len)->capture_default_str();
    cmd->add_option("--batch", opt->batch_size)->capture_default_str();
    cmd->add_option("--warmup", opt->warmup_steps)->capture_default_str();
    cmd->add_option("--lr", opt->lr)->capture_default_str();
    cmd->callback([=, &rc] {
      LmHandle lm;
      double ce = 0.0;
      rc = report(resae_lm_train(corpus->c_str(), opt.get(), lm.out(), &ce), "train-lm");
      if (rc == 0) rc = report(resae_lm_save(lm.get(), out->c_str()), "train-lm");
      if (rc == 0) std::printf("held-out CE %.6f nats/token\n", ce);
    });
  }

  // capture
  {
    auto* cmd = app.add_subcommand("capture", "Capture residual-stream activations into shards");
    auto lm_path = std::make_shared<std::string>();
    auto corpus = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto layers = std::make_shared<std::vector<int>>();
    auto tokens = std::make_shared<std::size_t>(0);
    auto first = std::make_shared<std::size_t>(0);
    auto placement = std::make_shared<std::string>("post_block");
    cmd->add_option("--lm", *lm_path)->required();
    cmd->add_option("--corpus", *corpus)->required();
    cmd->add_option("--layers", *layers, "Comma-separated layer ids")->required()->delimiter(',');
    cmd->add_option("--tokens", *tokens)->required();
    cmd->add_option("--out", *out, "Shard directory")->required();
    cmd->add_option("--first-window", *first, "First context window of the corpus")->capture_default_str();
    cmd->add_option("--placement", *placement)->check(CLI::IsMember({"post_block", "post_ln"}))->capture_default_str();
    cmd->callback([=, &rc] {
      LmHandle lm;
      rc = report(resae_lm_load(lm_path->c_str(), lm.out()), "capture");
      std::size_t n = 0;
      if (rc == 0) {
        rc = report(resae_capture(lm.get(), corpus->c_str(), layers->data(), layers->size(), *tokens, *first,
                                  *placement == "post_ln" ? RESAE_POST_LAYERNORM : RESAE_POST_BLOCK, out->c_str(), &n),
                    "capture");
      }
      if (rc == 0) std::printf("wrote %zu shard(s) to %s\n", n, out->c_str());
    });
  }

  // calibrate
  {
    auto* cmd = app.add_subcommand("calibrate", "Fit the affine chain and block scales");
    auto shards = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto layers = std::make_shared<std::vector<int>>();
    auto lambda = std::make_shared<double>(1e-4);
    auto eps = std::make_shared<double>(1e-6);
    auto kind = std::make_shared<std::string>("residual");
    cmd->add_option("--shards", *shards)->required();
    cmd->add_option("--layers", *layers)->required()->delimiter(',');
    cmd->add_option("--lambda-scale", *lambda)->capture_default_str();
    cmd->add_option("--epsilon", *eps)->capture_default_str();
    cmd->add_option("--kind", *kind)->check(CLI::IsMember({"residual", "raw"}))->capture_default_str();
    cmd->add_option("--out", *out)->required();
    cmd->callback([=, &rc] {
      std::vector<double> r2(layers->size(), 0.0);
      const bool raw = *kind == "raw";
      rc = report(resae_calibrate(shards->c_str(), layers->data(), layers->size(),
                                  raw ? RESAE_CHAIN_RAW : RESAE_CHAIN_RESIDUAL, *lambda, *eps, out->c_str(), r2.data()),
                  "calibrate");
      if (rc == 0 && !raw) {
        for (std::size_t i = 0; i + 1 < layers->size(); ++i) {
          std::printf("layer %d -> %d: held-out R^2 %.6f\n", (*layers)[i], (*layers)[i + 1], r2[i]);
        }
      }
    });
  }

  // train-sae
  {
    auto* cmd = app.add_subcommand("train-sae", "Train one block's TopK SAE");
    auto shards = std::make_shared<std::string>();
    auto chain = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto layers = std::make_shared<std::vector<int>>();
    auto block = std::make_shared<int>(0);
    auto opt = std::make_shared<resae_sae_options>();
    auto mode = std::make_shared<std::string>("per_token");
    resae_sae_default_options(opt.get());
    cmd->add_option("--shards", *shards)->required();
    cmd->add_option("--chain", *chain, "Chain file, or 'none' for a raw SAE")->required();
    cmd->add_option("--layers", *layers, "Layer set of a raw chain (default: the shards' layers)")->delimiter(',');
    cmd->add_option("--block", *block)->required();
    cmd->add_option("--k", opt->k)->required();
    cmd->add_option("--dict-size", opt->dict_size)->capture_default_str();
    cmd->add_option("--rows", opt->total_rows, "Rows streamed during training")->capture_default_str();
    cmd->add_option("--batch-rows", opt->batch_rows)->capture_default_str();
    cmd->add_option("--lr", opt->lr)->capture_default_str();
    cmd->add_option("--warmup", opt->warmup_steps)->capture_default_str();
    cmd->add_option("--decay-fraction", opt->decay_fraction)->capture_default_str();
    cmd->add_option("--seed", opt->seed)->capture_default_str();
    cmd->add_option("--topk-mode", *mode)->check(CLI::IsMember({"per_token", "batch"}))->capture_default_str();
    cmd->add_option("--out", *out)->required();
    cmd->callback([=, &rc] {
      opt->topk_mode = *mode == "batch" ? RESAE_TOPK_BATCH : RESAE_TOPK_PER_TOKEN;
      double loss = 0.0;
      rc = report(resae_train_sae(shards->c_str(), chain->c_str(), layers->data(), layers->size(), *block, opt.get(),
                                  out->c_str(), &loss),
                  "train-sae");
      if (rc == 0) std::printf("final loss %.6f\n", loss);
    });
  }

  // intervene
  {
    auto* cmd = app.add_subcommand("intervene", "Replace selected layers and measure cross-entropy");
    auto lm_path = std::make_shared<std::string>();
    auto stack = std::make_shared<std::string>();
    auto corpus = std::make_shared<std::string>();
    auto subset = std::make_shared<std::string>("all");
    auto mode = std::make_shared<std::string>("teacher");
    auto tokens = std::make_shared<std::size_t>(0);
    auto first = std::make_shared<std::size_t>(0);
    auto report_path = std::make_shared<std::string>();
    cmd->add_option("--lm", *lm_path)->required();
    cmd->add_option("--stack", *stack)->required();
    cmd->add_option("--corpus", *corpus)->required();
    cmd->add_option("--layers-subset", *subset)->capture_default_str();
    cmd->add_option("--mode", *mode)->check(CLI::IsMember({"teacher", "online"}))->capture_default_str();
    cmd->add_option("--tokens", *tokens)->required();
    cmd->add_option("--first-window", *first)->capture_default_str();
    cmd->add_option("--report", *report_path);
    cmd->callback([=, &rc] {
      LmHandle lm;
      rc = report(resae_lm_load(lm_path->c_str(), lm.out()), "intervene");
      double clean = 0.0, replaced = 0.0;
      if (rc == 0) {
        rc = report(resae_intervene(lm.get(), stack->c_str(), corpus->c_str(), subset->c_str(),
                                    *mode == "online" ? RESAE_MODE_ONLINE : RESAE_MODE_TEACHER, *tokens, *first,
                                    report_path->empty() ? nullptr : report_path->c_str(), &clean, &replaced),
                    "intervene");
      }
      if (rc == 0) std::printf("CE clean %.6f  replaced %.6f  delta %.6f\n", clean, replaced, replaced - clean);
    });
  }

  // eval
  {
    auto* cmd = app.add_subcommand("eval", "Compare a raw and a residualized stack");
    auto lm_path = std::make_shared<std::string>();
    auto raw = std::make_shared<std::string>();
    auto resae = std::make_shared<std::string>();
    auto corpus = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto tokens = std::make_shared<std::size_t>(0);
    auto first = std::make_shared<std::size_t>(0);
    cmd->add_option("--lm", *lm_path)->required();
    cmd->add_option("--raw", *raw)->required();
    cmd->add_option("--resae", *resae)->required();
    cmd->add_option("--corpus", *corpus)->required();
    cmd->add_option("--tokens", *tokens)->required();
    cmd->add_option("--first-window", *first)->capture_default_str();
    cmd->add_option("--out", *out, "JSON report; the CSV goes next to it")->required();
    cmd->callback([=, &rc] {
      LmHandle lm;
      rc = report(resae_lm_load(lm_path->c_str(), lm.out()), "eval");
      if (rc == 0) {
        rc = report(resae_eval(lm.get(), raw->c_str(), resae->c_str(), corpus->c_str(), *tokens, *first, out->c_str()),
                    "eval");
      }
    });
  }

  // layer-gap
  {
    auto* cmd = app.add_subcommand("layer-gap", "Held-out R^2 of the affine maps per layer gap");
    auto lm_path = std::make_shared<std::string>();
    auto corpus = std::make_shared<std::string>();
    auto out = std::make_shared<std::string>();
    auto gaps = std::make_shared<std::vector<int>>(std::vector<int>{1, 2, 3});
    auto tokens = std::make_shared<std::size_t>(50'000);
    auto lambda = std::make_shared<double>(1e-4);
    cmd->add_option("--lm", *lm_path)->required();
    cmd->add_option("--corpus", *corpus)->required();
    cmd->add_option("--gaps", *gaps)->delimiter(',')->capture_default_str();
    cmd->add_option("--tokens", *tokens)->capture_default_str();
    cmd->add_option("--lambda-scale", *lambda)->capture_default_str();
    cmd->add_option("--out", *out)->required();
    cmd->callback([=, &rc] {
      LmHandle lm;
      rc = report(resae_lm_load(lm_path->c_str(), lm.out()), "layer-gap");
      if (rc == 0) {
        rc = report(resae_layer_gap(lm.get(), corpus->c_str(), gaps->data(), gaps->size(), *tokens, *lambda, out->c_str()),
                    "layer-gap");
      }
    });
  }

  // reproduce: every config key doubles as a flag of the same name.
  {
    auto* cmd = app.add_subcommand("reproduce", "Run the full raw-vs-residual pipeline");
    auto config_path = std::make_shared<std::string>();
    auto overrides = std::make_shared<std::map<std::string, std::string>>();
    cmd->add_option("--config", *config_path, "Config file (defaults apply to missing keys)");
    for (std::size_t i = 0; i < resae_config_key_count(); ++i) {
      const std::string key = resae_config_key_name(i);
      std::string dashed = key;
      std::replace(dashed.begin(), dashed.end(), '_', '-');
      const std::string names = dashed == key ? "--" + key : "--" + key + ",--" + dashed;
      cmd->add_option_function<std::string>(names, [overrides, key](const std::string& v) { (*overrides)[key] = v; },
                                            "Override config key " + key);
    }
    cmd->callback([=, &rc] {
      resae_config* cfg = nullptr;
      rc = report(config_path->empty() ? resae_config_new(&cfg) : resae_config_load(config_path->c_str(), &cfg),
                  "reproduce");
      for (const auto& [k, v] : *overrides) {
        if (rc == 0) rc = report(resae_config_set(cfg, k.c_str(), v.c_str()), "reproduce");
      }
      if (rc == 0) rc = report(resae_config_validate(cfg), "reproduce");
      if (rc == 0) rc = report(resae_run_pipeline(cfg, print_progress, nullptr), "reproduce");
      resae_config_free(cfg);
    });
  }

  CLI11_PARSE(app, argc, argv);
  return rc;
}
