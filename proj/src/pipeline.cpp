#include "resae/pipeline.hpp"

#include <fcntl.h>
#include <signal.h>
#include <unistd.h>

#include <algorithm>
#include <cerrno>
#include <charconv>
#include <cmath>
#include <cstring>
#include <fstream>
#include <numeric>
#include <optional>
#include <set>
#include <sstream>

#include "json.hpp"

namespace resae {
namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Config keys

namespace {

std::string trim(std::string_view s) {
  const auto first = s.find_first_not_of(" \t\r");
  if (first == std::string_view::npos) return {};
  const auto last = s.find_last_not_of(" \t\r");
  return std::string(s.substr(first, last - first + 1));
}

[[noreturn]] void bad_value(std::string_view key, std::string_view value, std::string_view expected) {
  fail(ErrorCode::kInvalidArgument,
       "config key '" + std::string(key) + "': cannot parse '" + std::string(value) + "' as " + std::string(expected));
}

double parse_double(std::string_view key, std::string_view text) {
  const std::string v = trim(text);
  double out = 0.0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) bad_value(key, text, "a number");
  return out;
}

// Integers also accept exponent notation ("5e6") when the value is integral.
std::int64_t parse_int(std::string_view key, std::string_view text) {
  const std::string v = trim(text);
  std::int64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec == std::errc() && ptr == v.data() + v.size()) return out;
  const double d = parse_double(key, text);
  if (d != std::floor(d) || std::abs(d) > 9.0e15) bad_value(key, text, "an integer");
  return static_cast<std::int64_t>(d);
}

std::uint64_t parse_u64(std::string_view key, std::string_view text) {
  const std::string v = trim(text);
  std::uint64_t out = 0;
  const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
  if (ec != std::errc() || ptr != v.data() + v.size()) bad_value(key, text, "an unsigned integer");
  return out;
}

std::vector<int> parse_int_list(std::string_view key, std::string_view text) {
  std::vector<int> out;
  std::string item;
  std::istringstream in{std::string(text)};
  while (std::getline(in, item, ',')) {
    if (trim(item).empty()) bad_value(key, text, "a comma-separated integer list");
    const std::int64_t v = parse_int(key, item);
    if (v < std::numeric_limits<int>::min() || v > std::numeric_limits<int>::max()) bad_value(key, text, "int range");
    out.push_back(static_cast<int>(v));
  }
  if (out.empty()) bad_value(key, text, "a non-empty integer list");
  return out;
}

bool parse_bool_like(std::string_view key, std::string_view text, std::string_view yes, std::string_view no) {
  const std::string v = trim(text);
  if (v == yes) return true;
  if (v == no) return false;
  bad_value(key, text, std::string(yes) + " or " + std::string(no));
}

std::string fmt_double(double v) {
  char buf[64];
  const auto r = std::to_chars(buf, buf + sizeof(buf), v);
  return std::string(buf, r.ptr);
}

std::string fmt_list(const std::vector<int>& v) {
  std::string out;
  for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + std::to_string(v[i]);
  return out;
}

template <typename To>
To narrow(std::string_view key, std::int64_t v) {
  if (v < static_cast<std::int64_t>(std::numeric_limits<To>::min()) ||
      (v > 0 && static_cast<std::uint64_t>(v) > static_cast<std::uint64_t>(std::numeric_limits<To>::max()))) {
    fail(ErrorCode::kInvalidArgument, "config key '" + std::string(key) + "': value out of range");
  }
  return static_cast<To>(v);
}

struct KeySpec {
  const char* section;
  const char* key;
  std::string (*get)(const ExperimentConfig&);
  void (*set)(ExperimentConfig&, std::string_view key, std::string_view value);
};

// clang-format off
const KeySpec kKeys[] = {
  {"run", "out_dir", [](const ExperimentConfig& c) { return c.out_dir.string(); },
   [](ExperimentConfig& c, std::string_view, std::string_view v) { c.out_dir = trim(v); }},
  {"run", "seed", [](const ExperimentConfig& c) { return std::to_string(c.seed); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.seed = parse_u64(k, v); }},

  {"data", "corpus", [](const ExperimentConfig& c) { return c.corpus; },
   [](ExperimentConfig& c, std::string_view, std::string_view v) { c.corpus = trim(v); }},
  {"data", "n_docs", [](const ExperimentConfig& c) { return std::to_string(c.n_docs); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.n_docs = narrow<std::size_t>(k, parse_int(k, v)); }},
  {"data", "n_classes", [](const ExperimentConfig& c) { return std::to_string(c.n_classes); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.n_classes = narrow<int>(k, parse_int(k, v)); }},

  {"lm", "lm_checkpoint", [](const ExperimentConfig& c) { return c.lm_checkpoint.string(); },
   [](ExperimentConfig& c, std::string_view, std::string_view v) { c.lm_checkpoint = trim(v); }},
  {"lm", "n_layers", [](const ExperimentConfig& c) { return std::to_string(c.lm.n_layers); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm.n_layers = narrow<int>(k, parse_int(k, v)); }},
  {"lm", "d_model", [](const ExperimentConfig& c) { return std::to_string(c.lm.d_model); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm.d_model = narrow<int>(k, parse_int(k, v)); }},
  {"lm", "n_heads", [](const ExperimentConfig& c) { return std::to_string(c.lm.n_heads); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm.n_heads = narrow<int>(k, parse_int(k, v)); }},
  {"lm", "d_ff", [](const ExperimentConfig& c) { return std::to_string(c.lm.d_ff); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm.d_ff = narrow<int>(k, parse_int(k, v)); }},
  {"lm", "context_len", [](const ExperimentConfig& c) { return std::to_string(c.lm.context_len); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm.context_len = narrow<int>(k, parse_int(k, v)); }},
  {"lm", "lm_steps", [](const ExperimentConfig& c) { return std::to_string(c.lm_steps); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm_steps = parse_int(k, v); }},
  {"lm", "lm_batch", [](const ExperimentConfig& c) { return std::to_string(c.lm_batch); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm_batch = narrow<int>(k, parse_int(k, v)); }},
  {"lm", "lm_lr", [](const ExperimentConfig& c) { return fmt_double(c.lm_lr); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lm_lr = parse_double(k, v); }},
  {"lm", "placement",
   [](const ExperimentConfig& c) { return std::string(c.placement == HookPlacement::kPostBlock ? "post_block" : "post_ln"); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) {
     c.placement = parse_bool_like(k, v, "post_block", "post_ln") ? HookPlacement::kPostBlock : HookPlacement::kPostLayerNorm;
   }},

  {"calibration", "layers", [](const ExperimentConfig& c) { return fmt_list(c.layers); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.layers = parse_int_list(k, v); }},
  {"calibration", "lambda_scale", [](const ExperimentConfig& c) { return fmt_double(c.lambda_scale); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.lambda_scale = parse_double(k, v); }},
  {"calibration", "epsilon", [](const ExperimentConfig& c) { return fmt_double(c.epsilon); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.epsilon = parse_double(k, v); }},
  {"calibration", "calib_tokens", [](const ExperimentConfig& c) { return std::to_string(c.calib_tokens); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.calib_tokens = narrow<std::size_t>(k, parse_int(k, v)); }},

  {"sae", "k", [](const ExperimentConfig& c) { return fmt_list(c.k_list); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.k_list = parse_int_list(k, v); }},
  {"sae", "dict_size", [](const ExperimentConfig& c) { return std::to_string(c.dict_size); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.dict_size = narrow<Eigen::Index>(k, parse_int(k, v)); }},
  {"sae", "train_tokens", [](const ExperimentConfig& c) { return std::to_string(c.train_tokens); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.train_tokens = narrow<std::size_t>(k, parse_int(k, v)); }},
  {"sae", "sae_rows", [](const ExperimentConfig& c) { return std::to_string(c.sae_rows); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.sae_rows = parse_int(k, v); }},
  {"sae", "batch_rows", [](const ExperimentConfig& c) { return std::to_string(c.batch_rows); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.batch_rows = narrow<Eigen::Index>(k, parse_int(k, v)); }},
  {"sae", "sae_lr", [](const ExperimentConfig& c) { return fmt_double(c.sae_lr); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.sae_lr = parse_double(k, v); }},
  {"sae", "warmup_steps", [](const ExperimentConfig& c) { return std::to_string(c.warmup_steps); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.warmup_steps = narrow<int>(k, parse_int(k, v)); }},
  {"sae", "decay_fraction", [](const ExperimentConfig& c) { return fmt_double(c.decay_fraction); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.decay_fraction = parse_double(k, v); }},
  {"sae", "topk_mode",
   [](const ExperimentConfig& c) { return std::string(c.topk_mode == TopKMode::kPerToken ? "per_token" : "batch"); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) {
     c.topk_mode = parse_bool_like(k, v, "per_token", "batch") ? TopKMode::kPerToken : TopKMode::kBatch;
   }},

  {"eval", "eval_tokens", [](const ExperimentConfig& c) { return std::to_string(c.eval_tokens); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.eval_tokens = narrow<std::size_t>(k, parse_int(k, v)); }},
  {"eval", "probe_top_n", [](const ExperimentConfig& c) { return fmt_list(c.probe_top_n); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.probe_top_n = parse_int_list(k, v); }},
  {"eval", "gaps", [](const ExperimentConfig& c) { return fmt_list(c.gaps); },
   [](ExperimentConfig& c, std::string_view k, std::string_view v) { c.gaps = parse_int_list(k, v); }},
};
// clang-format on

}  // namespace

void ExperimentConfig::validate() const {
  auto check = [](bool ok, const std::string& key, const std::string& why) {
    require(ok, ErrorCode::kInvalidArgument, "config key '" + key + "': " + why);
  };
  check(!out_dir.empty(), "out_dir", "must not be empty");
  check(!corpus.empty(), "corpus", "must be 'synthetic' or a file path");
  if (corpus == "synthetic") {
    check(n_docs >= 1, "n_docs", "must be >= 1");
    check(n_classes >= 2, "n_classes", "must be >= 2");
  }
  lm.validate();
  if (lm_checkpoint.empty()) {
    check(lm_steps >= 1, "lm_steps", "must be >= 1 when no checkpoint is given");
    check(lm_batch >= 1, "lm_batch", "must be >= 1");
    check(lm_lr > 0.0, "lm_lr", "must be positive");
  }
  check(!layers.empty(), "layers", "must name at least one layer");
  for (std::size_t i = 0; i < layers.size(); ++i) {
    check(layers[i] >= 0 && layers[i] < lm.n_layers, "layers",
          "layer " + std::to_string(layers[i]) + " outside [0, " + std::to_string(lm.n_layers) + ")");
    check(i == 0 || layers[i] > layers[i - 1], "layers", "must be strictly increasing");
  }
  check(lambda_scale >= 0.0, "lambda_scale", "must be >= 0");
  check(epsilon > 0.0, "epsilon", "must be positive");
  check(calib_tokens >= static_cast<std::size_t>(8 * lm.d_model), "calib_tokens",
        "must be at least 8 * d_model for a well-posed fit and a held-out split");
  check(!k_list.empty(), "k", "must list at least one sparsity");
  check(dict_size >= 2, "dict_size", "must be >= 2");
  for (int k : k_list) check(k >= 1 && k <= dict_size, "k", "each value must be in [1, dict_size]");
  check(batch_rows >= 1, "batch_rows", "must be >= 1");
  check(train_tokens >= static_cast<std::size_t>(batch_rows), "train_tokens", "must cover one batch");
  check(sae_rows >= batch_rows, "sae_rows", "must cover one batch");
  if (corpus == "synthetic") {
    const WindowPlan plan = plan_windows(*this);
    check(n_docs >= plan.eval_first + plan.eval_count, "n_docs",
          "the corpus needs " + std::to_string(plan.eval_first + plan.eval_count) +
              " documents to cover calib_tokens, train_tokens and eval_tokens");
  }
  check(sae_lr > 0.0, "sae_lr", "must be positive");
  check(warmup_steps >= 0, "warmup_steps", "must be >= 0");
  check(decay_fraction >= 0.0 && decay_fraction <= 1.0, "decay_fraction", "must be in [0, 1]");
  check(eval_tokens >= static_cast<std::size_t>(lm.context_len), "eval_tokens", "must cover one context window");
  for (int n : probe_top_n) check(n >= 1, "probe_top_n", "values must be >= 1");
  for (int g : gaps) check(g >= 1 && g < lm.n_layers, "gaps", "values must be in [1, n_layers)");
}

std::vector<std::pair<std::string, std::string>> config_entries(const ExperimentConfig& config) {
  std::vector<std::pair<std::string, std::string>> out;
  for (const KeySpec& k : kKeys) out.emplace_back(k.key, k.get(config));
  return out;
}

void set_config_value(ExperimentConfig& config, std::string_view key, std::string_view value) {
  std::string name(key);
  std::replace(name.begin(), name.end(), '-', '_');
  for (const KeySpec& k : kKeys) {
    if (name == k.key) {
      k.set(config, name, value);
      return;
    }
  }
  fail(ErrorCode::kInvalidArgument, "unknown config key '" + std::string(key) + "'");
}

ExperimentConfig parse_config(std::string_view text) {
  ExperimentConfig config;
  std::istringstream in{std::string(text)};
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    const std::string t = trim(line);
    if (t.empty() || t[0] == '#' || t[0] == ';') continue;
    if (t.front() == '[') {
      require(t.back() == ']', ErrorCode::kInvalidArgument, "config line " + std::to_string(lineno) + ": bad section");
      continue;
    }
    const auto eq = t.find('=');
    require(eq != std::string::npos, ErrorCode::kInvalidArgument,
            "config line " + std::to_string(lineno) + ": expected key = value");
    std::string value = trim(std::string_view(t).substr(eq + 1));
    if (const auto hash = value.find(" #"); hash != std::string::npos) value = trim(value.substr(0, hash));
    set_config_value(config, trim(std::string_view(t).substr(0, eq)), value);
  }
  return config;
}

ExperimentConfig load_config(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open config " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return parse_config(ss.str());
}

std::string format_config(const ExperimentConfig& config) {
  std::string out;
  std::string section;
  for (const KeySpec& k : kKeys) {
    if (section != k.section) {
      section = k.section;
      out += (out.empty() ? "[" : "\n[") + section + "]\n";
    }
    out += std::string(k.key) + " = " + k.get(config) + "\n";
  }
  return out;
}

WindowPlan plan_windows(const ExperimentConfig& config) {
  const std::size_t t = static_cast<std::size_t>(config.lm.context_len);
  auto windows = [t](std::size_t tokens) { return (tokens + t - 1) / t; };
  WindowPlan p;
  p.calib_count = windows(config.calib_tokens);
  p.train_first = p.calib_first + p.calib_count;
  p.train_count = windows(config.train_tokens);
  p.eval_first = p.train_first + p.train_count;
  p.eval_count = windows(config.eval_tokens);
  return p;
}

// ---------------------------------------------------------------------------
// Layer-gap sweep

std::vector<LayerGapPoint> layer_gap_sweep(std::span<const ActivationShard> shards, int n_layers,
                                           std::span<const int> gaps, const CalibrationOptions& options) {
  std::vector<LayerGapPoint> out;
  for (int g : gaps) {
    require(g >= 1 && g < n_layers, ErrorCode::kInvalidArgument, "layer gap must be in [1, n_layers)");
    LayerGapPoint p;
    p.gap = g;
    for (int l = 0; l < n_layers; l += g) p.layers.push_back(l);
    CalibrationDiagnostics diag;
    calibrate_chain(shards, p.layers, options, &diag);
    p.heldout_r2 = diag.heldout_r2;
    p.mean_r2 = std::accumulate(p.heldout_r2.begin(), p.heldout_r2.end(), 0.0) / static_cast<double>(p.heldout_r2.size());
    out.push_back(std::move(p));
  }
  return out;
}

std::string layer_gap_to_json(std::span<const LayerGapPoint> points) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (const auto& p : points) {
    j.push_back({{"gap", p.gap}, {"layers", p.layers}, {"heldout_r2", p.heldout_r2}, {"mean_r2", p.mean_r2}});
  }
  return j.dump(2) + "\n";
}

// ---------------------------------------------------------------------------
// Manifest

namespace {

constexpr std::uint64_t kFnvOffset = 0xcbf29ce484222325ULL;
constexpr std::uint64_t kFnvPrime = 0x100000001b3ULL;

std::uint64_t fnv1a(std::string_view bytes, std::uint64_t h = kFnvOffset) {
  for (unsigned char c : bytes) {
    h ^= c;
    h *= kFnvPrime;
  }
  return h;
}

std::string hex16(std::uint64_t v) {
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(v));
  return buf;
}

std::uint64_t parse_hex16(const std::string& s) {
  std::uint64_t v = 0;
  const auto [ptr, ec] = std::from_chars(s.data(), s.data() + s.size(), v, 16);
  require(ec == std::errc() && ptr == s.data() + s.size() && s.size() == 16, ErrorCode::kFormat,
          "manifest: bad hash '" + s + "'");
  return v;
}

}  // namespace

std::uint64_t file_hash(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::vector<char> buf(1 << 20);
  std::uint64_t h = kFnvOffset;
  while (in) {
    in.read(buf.data(), static_cast<std::streamsize>(buf.size()));
    h = fnv1a(std::string_view(buf.data(), static_cast<std::size_t>(in.gcount())), h);
  }
  return h;
}

const ManifestStage* Manifest::find(std::string_view name) const {
  for (const auto& s : stages) {
    if (s.name == name) return &s;
  }
  return nullptr;
}

void write_manifest(const Manifest& manifest, const fs::path& path) {
  const fs::path tmp = path.string() + ".tmp";
  {
    std::ofstream out(tmp, std::ios::trunc);
    require(out.good(), ErrorCode::kIo, "cannot write " + tmp.string());
    out << "resae-manifest 1\n";
    for (const auto& s : manifest.stages) {
      out << "stage " << s.name << ' ' << hex16(s.key) << '\n';
      for (const auto& f : s.files) out << "file " << s.name << ' ' << hex16(f.hash) << ' ' << f.size << ' ' << f.path << '\n';
    }
    require(out.good(), ErrorCode::kIo, "write failed: " + tmp.string());
  }
  fs::rename(tmp, path);
}

Manifest read_manifest(const fs::path& path) {
  std::ifstream in(path);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::string line;
  require(std::getline(in, line) && line == "resae-manifest 1", ErrorCode::kFormat, "manifest: bad header");
  Manifest m;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    std::istringstream ls(line);
    std::string tag, name, hash;
    ls >> tag >> name >> hash;
    if (tag == "stage") {
      m.stages.push_back({name, parse_hex16(hash), {}});
    } else if (tag == "file") {
      require(!m.stages.empty() && m.stages.back().name == name, ErrorCode::kFormat,
              "manifest: file line outside its stage");
      ManifestFile f;
      f.hash = parse_hex16(hash);
      ls >> f.size;
      ls.get();
      std::getline(ls, f.path);
      require(!ls.fail() && !f.path.empty(), ErrorCode::kFormat, "manifest: bad file line");
      m.stages.back().files.push_back(std::move(f));
    } else {
      fail(ErrorCode::kFormat, "manifest: unknown line '" + line + "'");
    }
  }
  return m;
}

// ---------------------------------------------------------------------------
// Pipeline

namespace {

std::uint64_t splitmix(std::uint64_t x) {
  x += 0x9e3779b97f4a7c15ULL;
  x = (x ^ (x >> 30)) * 0xbf58476d1ce4e5b9ULL;
  x = (x ^ (x >> 27)) * 0x94d049bb133111ebULL;
  return x ^ (x >> 31);
}

std::uint64_t derive_seed(std::uint64_t seed, std::uint64_t tag) { return splitmix(seed ^ splitmix(tag)); }

// Exclusive ownership of an output directory. A lock left by a process that
// no longer exists is taken over.
class DirLock {
 public:
  explicit DirLock(const fs::path& dir) : path_(dir / "pipeline.lock") {
    for (int attempt = 0; attempt < 2; ++attempt) {
      const int fd = ::open(path_.c_str(), O_CREAT | O_EXCL | O_WRONLY, 0644);
      if (fd >= 0) {
        const std::string pid = std::to_string(::getpid()) + "\n";
        const bool ok = ::write(fd, pid.data(), pid.size()) == static_cast<ssize_t>(pid.size());
        ::close(fd);
        require(ok, ErrorCode::kIo, "cannot write " + path_.string());
        return;
      }
      require(errno == EEXIST, ErrorCode::kIo, "cannot create " + path_.string() + ": " + std::strerror(errno));
      long owner = 0;
      std::ifstream(path_) >> owner;
      if (owner > 0 && (::kill(static_cast<pid_t>(owner), 0) == 0 || errno != ESRCH)) {
        fail(ErrorCode::kState, "output directory " + path_.parent_path().string() + " is locked by pid " +
                                    std::to_string(owner));
      }
      fs::remove(path_);
    }
    fail(ErrorCode::kState, "could not acquire " + path_.string());
  }
  ~DirLock() {
    std::error_code ec;
    fs::remove(path_, ec);
  }
  DirLock(const DirLock&) = delete;
  DirLock& operator=(const DirLock&) = delete;

 private:
  fs::path path_;
};

std::string read_text(const fs::path& path) {
  std::ifstream in(path, std::ios::binary);
  require(in.good(), ErrorCode::kIo, "cannot open " + path.string());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

void write_text(const fs::path& path, const std::string& text) {
  fs::create_directories(path.parent_path());
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.good(), ErrorCode::kIo, "cannot write " + path.string());
  out << text;
  require(out.good(), ErrorCode::kIo, "write failed: " + path.string());
}

std::vector<fs::path> files_under(const fs::path& dir) {
  std::vector<fs::path> out;
  for (const auto& e : fs::recursive_directory_iterator(dir)) {
    if (e.is_regular_file()) out.push_back(e.path());
  }
  std::sort(out.begin(), out.end());
  return out;
}

std::vector<ActivationShard> read_shard_dir(const fs::path& dir) {
  std::vector<ActivationShard> out;
  for (const auto& p : list_shards(dir)) out.push_back(read_shard(p));
  require(!out.empty(), ErrorCode::kIo, "no shards in " + dir.string());
  return out;
}

std::pair<std::uint32_t, std::uint32_t> sequence_range(std::span<const ActivationShard> shards) {
  std::uint32_t lo = std::numeric_limits<std::uint32_t>::max(), hi = 0;
  for (const auto& s : shards) {
    for (const auto& o : s.origins) {
      lo = std::min(lo, o.sequence);
      hi = std::max(hi, o.sequence);
    }
  }
  return {lo, hi};
}

// Runs f, prefixing any error with the stage it belongs to.
template <typename F>
auto in_stage(const std::string& name, F&& f) -> decltype(f()) {
  try {
    return f();
  } catch (const Error& e) {
    throw Error(e.code(), "stage " + name + ": " + e.what());
  } catch (const std::exception& e) {
    throw Error(ErrorCode::kInternal, "stage " + name + ": " + e.what());
  }
}

class StageRunner {
 public:
  StageRunner(fs::path out, const ProgressFn& progress, PipelineResult& result)
      : out_(std::move(out)), progress_(progress), result_(result) {
    const fs::path mpath = out_ / "manifest.txt";
    if (fs::exists(mpath)) {
      try {
        previous_ = read_manifest(mpath);
      } catch (const Error&) {
        previous_ = Manifest{};  // unreadable manifest: rebuild everything
      }
    }
  }

  // Runs `body` unless the previous manifest records `name` with `key` and
  // every listed file still matches. Returns true when the body ran.
  bool run(const std::string& name, std::uint64_t key, const std::function<std::vector<fs::path>()>& body) {
    if (const ManifestStage* old = previous_.find(name); old != nullptr && old->key == key && intact(*old)) {
      current_.stages.push_back(*old);
      write_manifest(current_, out_ / "manifest.txt");
      result_.skipped_stages.push_back(name);
      say("[" + name + "] up to date");
      return false;
    }
    say("[" + name + "] running");
    const std::vector<fs::path> files = in_stage(name, body);
    ManifestStage st{name, key, {}};
    for (const auto& f : files) {
      st.files.push_back({fs::relative(f, out_).generic_string(), file_hash(f), fs::file_size(f)});
    }
    current_.stages.push_back(std::move(st));
    write_manifest(current_, out_ / "manifest.txt");
    result_.executed_stages.push_back(name);
    return true;
  }

  void say(const std::string& msg) const {
    if (progress_) progress_(msg);
  }

 private:
  bool intact(const ManifestStage& st) const {
    for (const auto& f : st.files) {
      const fs::path p = out_ / f.path;
      std::error_code ec;
      if (!fs::is_regular_file(p, ec) || fs::file_size(p, ec) != f.size || file_hash(p) != f.hash) return false;
    }
    return true;
  }

  fs::path out_;
  const ProgressFn& progress_;
  PipelineResult& result_;
  Manifest previous_;
  Manifest current_;
};

std::string stats_to_json(std::span<const SaeTrainStats> stats) {
  nlohmann::ordered_json j = nlohmann::ordered_json::array();
  for (std::size_t m = 0; m < stats.size(); ++m) {
    j.push_back({{"block", m},
                 {"steps", stats[m].steps},
                 {"initial_loss", stats[m].initial_loss},
                 {"final_loss", stats[m].final_loss},
                 {"dead_fraction", stats[m].dead_fraction}});
  }
  return j.dump(2) + "\n";
}

}  // namespace

PipelineResult run_pipeline(const ExperimentConfig& config, const ProgressFn& progress) {
  config.validate();
  const fs::path out = config.out_dir;
  fs::create_directories(out);
  DirLock lock(out);

  PipelineResult result;
  StageRunner runner(out, progress, result);
  auto key_of = [](const std::string& text) { return fnv1a(text); };

  // config
  const std::string config_text = format_config(config);
  runner.run("config", key_of(config_text), [&] {
    write_text(out / "config.ini", config_text);
    return std::vector<fs::path>{out / "config.ini"};
  });

  // corpus
  const bool synthetic = config.corpus == "synthetic";
  const fs::path corpus_path = synthetic ? out / "corpus.bin" : fs::path(config.corpus);
  const std::uint64_t corpus_key =
      synthetic ? key_of("synthetic " + std::to_string(config.n_docs) + " " + std::to_string(config.n_classes) + " " +
                         std::to_string(config.lm.context_len) + " " + std::to_string(derive_seed(config.seed, 1)))
                : in_stage("corpus", [&] { return key_of("file " + hex16(file_hash(corpus_path))); });
  runner.run("corpus", corpus_key, [&] {
    if (!synthetic) return std::vector<fs::path>{};
    SyntheticCorpusOptions opt;
    opt.n_classes = config.n_classes;
    opt.doc_len = config.lm.context_len;
    opt.n_docs = config.n_docs;
    opt.seed = derive_seed(config.seed, 1);
    save_corpus(generate_synthetic_corpus(opt), corpus_path);
    return std::vector<fs::path>{corpus_path, corpus_path.string() + ".labels"};
  });
  const WindowPlan plan = plan_windows(config);
  const Corpus corpus = in_stage("corpus", [&] {
    Corpus c = load_corpus(corpus_path, config.lm.context_len);
    const std::size_t have = c.bytes.size() / static_cast<std::size_t>(config.lm.context_len);
    require(have >= plan.eval_first + plan.eval_count, ErrorCode::kInvalidArgument,
            "corpus has " + std::to_string(have) + " windows; calibration, training and eval need " +
                std::to_string(plan.eval_first + plan.eval_count));
    return c;
  });

  // lm
  const bool train_new = config.lm_checkpoint.empty();
  const fs::path lm_path = train_new ? out / "lm.tlm" : config.lm_checkpoint;
  std::ostringstream lm_desc;
  if (train_new) {
    lm_desc << "train " << hex16(corpus_key) << ' ' << config.lm.n_layers << ' ' << config.lm.d_model << ' '
            << config.lm.n_heads << ' ' << config.lm.d_ff << ' ' << config.lm.context_len << ' ' << config.lm_steps
            << ' ' << config.lm_batch << ' ' << fmt_double(config.lm_lr) << ' ' << derive_seed(config.seed, 2);
  } else {
    lm_desc << "checkpoint " << in_stage("lm", [&] { return hex16(file_hash(lm_path)); });
  }
  const std::uint64_t lm_key = key_of(lm_desc.str());
  runner.run("lm", lm_key, [&] {
    if (!train_new) return std::vector<fs::path>{};
    LmConfig lc = config.lm;
    lc.seed = derive_seed(config.seed, 2);
    TrainLmOptions opt;
    opt.steps = static_cast<int>(config.lm_steps);
    opt.batch_size = config.lm_batch;
    opt.lr = static_cast<float>(config.lm_lr);
    opt.warmup_steps = std::min<int>(200, std::max<int>(1, opt.steps / 10));
    TrainLmResult tr;
    const TinyLm trained = train_lm(corpus.bytes, lc, opt, &tr);
    save_lm(trained, lm_path);
    nlohmann::ordered_json j{{"steps", opt.steps},
                             {"initial_heldout_ce", tr.initial_heldout_ce},
                             {"final_heldout_ce", tr.final_heldout_ce},
                             {"final_train_loss", tr.final_train_loss}};
    write_text(out / "lm_train.json", j.dump(2) + "\n");
    return std::vector<fs::path>{lm_path, out / "lm_train.json"};
  });
  const TinyLm lm = load_lm(lm_path);
  const LmConfig& lc = lm.config();
  require(lc.context_len == config.lm.context_len, ErrorCode::kInvalidArgument,
          "checkpoint context_len " + std::to_string(lc.context_len) + " differs from config");
  for (int l : config.layers) {
    require(l < lc.n_layers, ErrorCode::kInvalidArgument, "layer " + std::to_string(l) + " beyond checkpoint depth");
  }

  // capture
  std::vector<int> calib_layers = config.layers;
  if (!config.gaps.empty()) {
    calib_layers.resize(static_cast<std::size_t>(lc.n_layers));
    std::iota(calib_layers.begin(), calib_layers.end(), 0);
  }
  const std::uint64_t capture_key =
      key_of(hex16(lm_key) + hex16(corpus_key) + " " + fmt_list(calib_layers) + " " + fmt_list(config.layers) + " " +
             std::to_string(plan.calib_count) + " " + std::to_string(plan.train_count) + " " +
             std::to_string(static_cast<int>(config.placement)));
  const fs::path calib_dir = out / "shards" / "calib";
  const fs::path train_dir = out / "shards" / "train";
  runner.run("capture", capture_key, [&] {
    const std::size_t t = static_cast<std::size_t>(lc.context_len);
    const std::size_t available = corpus.bytes.size() / t;
    require(plan.eval_first + plan.eval_count <= available, ErrorCode::kInvalidArgument,
            "corpus has " + std::to_string(available) + " windows; calibration, training and evaluation need " +
                std::to_string(plan.eval_first + plan.eval_count));
    std::vector<fs::path> files;
    for (const auto& [dir, first, count, layers] :
         {std::tuple{calib_dir, plan.calib_first, plan.calib_count, calib_layers},
          std::tuple{train_dir, plan.train_first, plan.train_count, config.layers}}) {
      fs::remove_all(dir);
      CaptureOptions opt;
      opt.first_window = first;
      opt.placement = config.placement;
      const auto shards = capture_corpus(lm, corpus, layers, count * t, opt);
      for (auto& p : write_shards(shards, dir)) files.push_back(p);
    }
    return files;
  });

  std::optional<std::vector<ActivationShard>> calib_shards, train_shards;
  auto calib = [&]() -> const std::vector<ActivationShard>& {
    if (!calib_shards) calib_shards = read_shard_dir(calib_dir);
    return *calib_shards;
  };
  auto train = [&]() -> const std::vector<ActivationShard>& {
    if (!train_shards) {
      train_shards = read_shard_dir(train_dir);
      const std::uint32_t calib_last = sequence_range(calib()).second;
      const auto [train_first, train_last] = sequence_range(*train_shards);
      require(calib_last < train_first && train_last < plan.eval_first, ErrorCode::kState,
              "calibration, training and evaluation windows overlap");
    }
    return *train_shards;
  };

  // calibrate
  CalibrationOptions copt;
  copt.lambda_scale = config.lambda_scale;
  copt.epsilon = config.epsilon;
  const std::uint64_t calib_key =
      key_of(hex16(capture_key) + " " + fmt_list(config.layers) + " " + fmt_double(config.lambda_scale) + " " +
             fmt_double(config.epsilon));
  const fs::path resae_chain_path = out / "chains" / "resae.rch";
  const fs::path raw_chain_path = out / "chains" / "raw.rch";
  runner.run("calibrate", calib_key, [&] {
    fs::create_directories(out / "chains");
    CalibrationDiagnostics diag;
    const RegressionChain resae_chain = calibrate_chain(calib(), config.layers, copt, &diag);
    const RegressionChain raw_chain = calibrate_raw_scales(calib(), config.layers, config.epsilon);
    save_chain(resae_chain, resae_chain_path);
    save_chain(raw_chain, raw_chain_path);
    nlohmann::ordered_json j{{"layers", config.layers},
                             {"heldout_r2", diag.heldout_r2},
                             {"fit_rows", diag.fit_rows},
                             {"heldout_rows", diag.heldout_rows}};
    write_text(out / "calibration.json", j.dump(2) + "\n");
    return std::vector<fs::path>{resae_chain_path, raw_chain_path, out / "calibration.json"};
  });
  {
    const auto j = nlohmann::json::parse(read_text(out / "calibration.json"));
    result.calibration.heldout_r2 = j.at("heldout_r2").get<std::vector<double>>();
    result.calibration.fit_rows = j.at("fit_rows").get<Eigen::Index>();
    result.calibration.heldout_rows = j.at("heldout_rows").get<Eigen::Index>();
  }

  // layer_gap
  if (!config.gaps.empty()) {
    runner.run("layer_gap", key_of(hex16(capture_key) + " " + fmt_list(config.gaps) + " " +
                                   fmt_double(config.lambda_scale) + " " + fmt_double(config.epsilon)),
               [&] {
                 const auto points = layer_gap_sweep(calib(), lc.n_layers, config.gaps, copt);
                 write_text(out / "layer_gap.json", layer_gap_to_json(points));
                 return std::vector<fs::path>{out / "layer_gap.json"};
               });
    for (const auto& p : nlohmann::json::parse(read_text(out / "layer_gap.json"))) {
      LayerGapPoint g;
      g.gap = p.at("gap").get<int>();
      g.layers = p.at("layers").get<std::vector<int>>();
      g.heldout_r2 = p.at("heldout_r2").get<std::vector<double>>();
      g.mean_r2 = p.at("mean_r2").get<double>();
      result.layer_gap.push_back(std::move(g));
    }
  }

  // per-k training and evaluation
  for (int k : config.k_list) {
    const std::string tag = "k" + std::to_string(k);
    const fs::path raw_dir = out / "stacks" / ("raw_" + tag);
    const fs::path resae_dir = out / "stacks" / ("resae_" + tag);
    std::ostringstream tdesc;
    tdesc << hex16(calib_key) << ' ' << k << ' ' << config.dict_size << ' ' << config.sae_rows << ' '
          << config.batch_rows << ' ' << fmt_double(config.sae_lr) << ' ' << config.warmup_steps << ' '
          << fmt_double(config.decay_fraction) << ' ' << static_cast<int>(config.topk_mode) << ' ' << config.seed;
    const std::uint64_t train_key = key_of(tdesc.str());
    runner.run("train_" + tag, train_key, [&] {
      std::vector<fs::path> files;
      for (const auto& [dir, chain_path] : {std::pair{raw_dir, raw_chain_path}, std::pair{resae_dir, resae_chain_path}}) {
        fs::remove_all(dir);
        DictionaryStack stack;
        stack.chain = load_chain(chain_path);
        std::vector<SaeTrainStats> stats(stack.num_blocks());
        for (std::size_t m = 0; m < stack.num_blocks(); ++m) {
          std::vector<Mat> parts;
          Eigen::Index rows = 0;
          for (const auto& s : train()) {
            parts.push_back(block_target(stack.chain, m, s));
            rows += parts.back().rows();
          }
          Mat targets(rows, lc.d_model);
          Eigen::Index at = 0;
          for (auto& p : parts) {
            targets.middleRows(at, p.rows()) = p;
            at += p.rows();
          }
          parts.clear();
          MatrixRowStream stream(std::move(targets));
          TrainConfig tc;
          tc.lr = static_cast<float>(config.sae_lr);
          tc.warmup_steps = config.warmup_steps;
          tc.decay_fraction = config.decay_fraction;
          tc.batch_rows = config.batch_rows;
          tc.total_rows = config.sae_rows;
          tc.seed = derive_seed(config.seed, 100 + m);
          tc.topk_mode = config.topk_mode;
          SaeInit init;
          init.dict_size = config.dict_size;
          init.k = k;
          init.target_kind = stack.kind() == ChainKind::kRaw ? TargetKind::kRaw : TargetKind::kResidual;
          init.block_index = static_cast<int>(m);
          stack.saes.push_back(train_sae(stream, tc, init, &stats[m]));
          runner.say("  " + dir.filename().string() + " block " + std::to_string(m) + ": loss " +
                     fmt_double(stats[m].initial_loss) + " -> " + fmt_double(stats[m].final_loss));
        }
        save_stack(stack, dir);
        write_text(dir / "train_stats.json", stats_to_json(stats));
        for (auto& f : files_under(dir)) files.push_back(f);
      }
      return files;
    });

    const fs::path report_json = out / "reports" / (tag + ".json");
    const fs::path report_csv = out / "reports" / (tag + ".csv");
    std::ostringstream edesc;
    edesc << hex16(train_key) << ' ' << plan.eval_first << ' ' << plan.eval_count << ' ' << fmt_list(config.probe_top_n);
    runner.run("eval_" + tag, key_of(edesc.str()), [&] {
      const DictionaryStack raw = load_stack(raw_dir);
      const DictionaryStack resae = load_stack(resae_dir);
      EvalOptions eo;
      eo.first_window = plan.eval_first;
      eo.n_windows = plan.eval_count;
      eo.probe.top_n = config.probe_top_n;
      eo.seed = config.seed;
      eo.run_probe = corpus.labeled();
      eo.placement = config.placement;
      const ComparisonReport rep = build_report(lm, raw, resae, corpus, eo);
      write_text(report_json, comparison_to_json(rep));
      write_text(report_csv, comparison_to_csv(rep));
      return std::vector<fs::path>{report_json, report_csv};
    });
    result.reports.push_back(comparison_from_json(read_text(report_json)));
  }
  return result;
}

}  // namespace resae
