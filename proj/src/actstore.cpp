#include "resae/actstore.hpp"

#include <algorithm>
#include <cstdio>
#include <string>

#include "resae/binio.hpp"

namespace resae {

namespace {
constexpr std::uint32_t kFlagLabels = 1u;
}

std::size_t ActivationShard::layer_slot(int layer) const {
  auto it = std::find(layer_set.begin(), layer_set.end(), layer);
  require(it != layer_set.end(), ErrorCode::kOutOfRange,
          "layer " + std::to_string(layer) + " not in shard");
  return static_cast<std::size_t>(it - layer_set.begin());
}

void ActivationShard::validate() const {
  require(!layer_set.empty(), ErrorCode::kInvalidArgument, "shard has no layers");
  require(data.size() == layer_set.size(), ErrorCode::kDimensionMismatch,
          "shard: one matrix per layer required");
  for (std::size_t i = 1; i < layer_set.size(); ++i) {
    require(layer_set[i] > layer_set[i - 1], ErrorCode::kInvalidArgument,
            "shard: layer_set must be strictly increasing");
  }
  for (const Mat& m : data) {
    require(m.rows() == n_rows() && m.cols() == d_model(), ErrorCode::kDimensionMismatch,
            "shard: per-layer matrices must share (n_rows, d_model)");
  }
  require(static_cast<Eigen::Index>(origins.size()) == n_rows(), ErrorCode::kDimensionMismatch,
          "shard: one origin per row required");
  require(labels.empty() || static_cast<Eigen::Index>(labels.size()) == n_rows(),
          ErrorCode::kDimensionMismatch, "shard: labels must be empty or one per row");
}

bool ActivationShard::operator==(const ActivationShard& other) const {
  if (layer_set != other.layer_set || origins != other.origins || labels != other.labels ||
      data.size() != other.data.size()) {
    return false;
  }
  for (std::size_t i = 0; i < data.size(); ++i) {
    if (data[i].rows() != other.data[i].rows() || data[i].cols() != other.data[i].cols()) return false;
    // Bitwise comparison so NaN payloads and signed zeros count.
    if (std::memcmp(data[i].data(), other.data[i].data(),
                    static_cast<std::size_t>(data[i].size()) * sizeof(float)) != 0) {
      return false;
    }
  }
  return true;
}

void write_shard(const ActivationShard& shard, const std::filesystem::path& path) {
  shard.validate();
  binio::Writer w(path);
  w.magic("ASH1");
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shard.layer_set.size()));
  for (int l : shard.layer_set) w.put<std::uint32_t>(static_cast<std::uint32_t>(l));
  w.put<std::uint64_t>(static_cast<std::uint64_t>(shard.n_rows()));
  w.put<std::uint32_t>(static_cast<std::uint32_t>(shard.d_model()));
  w.put<std::uint32_t>(shard.has_labels() ? kFlagLabels : 0u);
  for (const Mat& m : shard.data) binio::put_matrix(w, m);
  for (const RowOrigin& o : shard.origins) {
    w.put<std::uint32_t>(o.sequence);
    w.put<std::uint32_t>(o.position);
  }
  w.put_array<std::int32_t>(shard.labels);
  w.close();
}

ActivationShard read_shard(const std::filesystem::path& path) {
  binio::Reader r(path);
  r.expect_magic("ASH1");
  ActivationShard s;
  const auto n_layers = r.get<std::uint32_t>();
  require(n_layers >= 1 && n_layers <= 4096, ErrorCode::kFormat,
          path.string() + ": implausible layer count");
  for (std::uint32_t i = 0; i < n_layers; ++i) s.layer_set.push_back(static_cast<int>(r.get<std::uint32_t>()));
  const auto n_rows = static_cast<Eigen::Index>(r.get<std::uint64_t>());
  const auto d = static_cast<Eigen::Index>(r.get<std::uint32_t>());
  const auto flags = r.get<std::uint32_t>();
  require(n_rows >= 0 && n_rows <= (Eigen::Index{1} << 32) && d >= 1 && d <= 65536,
          ErrorCode::kFormat, path.string() + ": implausible shard dimensions");
  for (std::uint32_t i = 0; i < n_layers; ++i) s.data.push_back(binio::get_matrix<float>(r, n_rows, d));
  s.origins.resize(static_cast<std::size_t>(n_rows));
  for (auto& o : s.origins) {
    o.sequence = r.get<std::uint32_t>();
    o.position = r.get<std::uint32_t>();
  }
  if ((flags & kFlagLabels) != 0) {
    s.labels.resize(static_cast<std::size_t>(n_rows));
    r.get_array<std::int32_t>(s.labels);
  }
  r.expect_eof();
  try {
    s.validate();
  } catch (const Error& e) {
    fail(ErrorCode::kFormat, path.string() + ": " + e.what());
  }
  return s;
}

std::vector<ActivationShard> capture_corpus(const TinyLm& lm, const Corpus& corpus,
                                            std::span<const int> layer_set,
                                            std::size_t n_tokens, const CaptureOptions& options) {
  const int t = lm.config().context_len;
  require(n_tokens >= static_cast<std::size_t>(t), ErrorCode::kInvalidArgument,
          "capture needs at least one context window of tokens");
  require(options.max_rows >= t, ErrorCode::kInvalidArgument, "max_rows below context_len");
  for (std::size_t i = 0; i < layer_set.size(); ++i) {
    require(i == 0 || layer_set[i] > layer_set[i - 1], ErrorCode::kInvalidArgument,
            "layer_set must be strictly increasing");
  }
  require(!corpus.labeled() || corpus.doc_len == t, ErrorCode::kInvalidArgument,
          "labeled corpus documents must be context_len long");

  const std::size_t windows = (n_tokens + static_cast<std::size_t>(t) - 1) / static_cast<std::size_t>(t);
  const std::size_t available = corpus.bytes.size() / static_cast<std::size_t>(t);
  require(options.first_window + windows <= available, ErrorCode::kOutOfRange,
          "corpus too short: need windows [" + std::to_string(options.first_window) + ", " +
              std::to_string(options.first_window + windows) + "), have " + std::to_string(available));

  const std::size_t windows_per_shard = static_cast<std::size_t>(options.max_rows / t);
  std::vector<ActivationShard> shards;
  for (std::size_t w0 = 0; w0 < windows; w0 += windows_per_shard) {
    const std::size_t shard_windows = std::min(windows_per_shard, windows - w0);
    ActivationShard shard;
    shard.layer_set.assign(layer_set.begin(), layer_set.end());
    const Eigen::Index rows = static_cast<Eigen::Index>(shard_windows) * t;
    for (std::size_t i = 0; i < layer_set.size(); ++i) shard.data.emplace_back(rows, lm.config().d_model);
    for (std::size_t b0 = 0; b0 < shard_windows; b0 += static_cast<std::size_t>(options.batch_windows)) {
      const std::size_t cnt = std::min<std::size_t>(static_cast<std::size_t>(options.batch_windows), shard_windows - b0);
      const std::size_t first = options.first_window + w0 + b0;
      const TokenBatch batch = corpus_windows(corpus.bytes, t, first, cnt);
      CaptureResult cap = forward_capture(lm, batch, layer_set, options.placement);
      for (std::size_t i = 0; i < layer_set.size(); ++i) {
        shard.data[i].middleRows(static_cast<Eigen::Index>(b0) * t, batch.rows()) = cap.activations[i];
      }
      for (std::size_t s = 0; s < cnt; ++s) {
        for (int p = 0; p < t; ++p) {
          shard.origins.push_back({static_cast<std::uint32_t>(first + s), static_cast<std::uint32_t>(p)});
          if (corpus.labeled()) shard.labels.push_back(corpus.labels[first + s]);
        }
      }
    }
    shards.push_back(std::move(shard));
  }
  return shards;
}

std::vector<std::filesystem::path> write_shards(std::span<const ActivationShard> shards,
                                                const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  std::vector<std::filesystem::path> paths;
  for (std::size_t i = 0; i < shards.size(); ++i) {
    char name[32];
    std::snprintf(name, sizeof(name), "shard_%05zu.ash", i);
    paths.push_back(dir / name);
    write_shard(shards[i], paths.back());
  }
  return paths;
}

std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir) {
  require(std::filesystem::is_directory(dir), ErrorCode::kIo, "not a directory: " + dir.string());
  std::vector<std::filesystem::path> paths;
  for (const auto& e : std::filesystem::directory_iterator(dir)) {
    if (e.is_regular_file() && e.path().extension() == ".ash") paths.push_back(e.path());
  }
  std::sort(paths.begin(), paths.end());
  require(!paths.empty(), ErrorCode::kIo, "no .ash shards in " + dir.string());
  return paths;
}

Eigen::Index MatrixRowStream::next(Mat& out, Eigen::Index max_rows) {
  const Eigen::Index n = std::min(max_rows, rows_.rows() - cursor_);
  out = rows_.middleRows(cursor_, n);
  cursor_ += n;
  return n;
}

ShardRowStream::ShardRowStream(std::vector<std::filesystem::path> paths, Transform transform)
    : paths_(std::move(paths)), transform_(std::move(transform)) {
  require(!paths_.empty(), ErrorCode::kInvalidArgument, "ShardRowStream: no shards");
}

bool ShardRowStream::load_next() {
  if (file_ >= paths_.size()) return false;
  current_ = transform_(read_shard(paths_[file_++]));
  cols_ = current_.cols();
  cursor_ = 0;
  return true;
}

Eigen::Index ShardRowStream::next(Mat& out, Eigen::Index max_rows) {
  while (cursor_ >= current_.rows()) {
    if (!load_next()) {
      out.resize(0, cols());
      return 0;
    }
  }
  const Eigen::Index n = std::min(max_rows, current_.rows() - cursor_);
  out = current_.middleRows(cursor_, n);
  cursor_ += n;
  return n;
}

void ShardRowStream::rewind() {
  file_ = 0;
  current_.resize(0, 0);
  cursor_ = 0;
}

Eigen::Index ShardRowStream::cols() const {
  if (cols_ < 0) cols_ = transform_(read_shard(paths_.front())).cols();
  return cols_;
}

}  // namespace resae
