#pragma once

// ASH1 activation shards: position-aligned hidden states for a fixed set of
// layers, plus row provenance and optional class labels.
//
// File layout (little-endian):
//   "ASH1"
//   u32 layer_count, u32 layer_id[layer_count]
//   u64 n_rows, u32 d_model, u32 flags (bit 0: labels present)
//   f32 data[layer_count][n_rows][d_model]
//   u32 (sequence, position)[n_rows]
//   i32 label[n_rows]                         (only if flags bit 0)

#include <cstdint>
#include <filesystem>
#include <functional>
#include <span>
#include <vector>

#include "resae/corpus.hpp"
#include "resae/tensor.hpp"
#include "resae/tinylm.hpp"

namespace resae {

inline constexpr Eigen::Index kMaxShardRows = 65536;

struct RowOrigin {
  std::uint32_t sequence = 0;
  std::uint32_t position = 0;
  bool operator==(const RowOrigin&) const = default;
};

struct ActivationShard {
  std::vector<int> layer_set;
  std::vector<Mat> data;  // data[i] holds layer layer_set[i]
  std::vector<RowOrigin> origins;
  std::vector<std::int32_t> labels;  // empty or one per row

  Eigen::Index n_rows() const { return data.empty() ? 0 : data.front().rows(); }
  Eigen::Index d_model() const { return data.empty() ? 0 : data.front().cols(); }
  bool has_labels() const { return !labels.empty(); }

  // Position of `layer` inside layer_set; throws if absent.
  std::size_t layer_slot(int layer) const;
  const Mat& layer(int layer) const { return data[layer_slot(layer)]; }

  void validate() const;
  bool operator==(const ActivationShard& other) const;
};

void write_shard(const ActivationShard& shard, const std::filesystem::path& path);
ActivationShard read_shard(const std::filesystem::path& path);

// Captures documents [first_window, first_window + ceil(n_tokens / doc_len))
// of the corpus, context_len tokens each, into shards of at most max_rows rows.
struct CaptureOptions {
  std::size_t first_window = 0;
  Eigen::Index max_rows = kMaxShardRows;
  int batch_windows = 16;
  HookPlacement placement = HookPlacement::kPostBlock;
};

std::vector<ActivationShard> capture_corpus(const TinyLm& lm, const Corpus& corpus,
                                            std::span<const int> layer_set,
                                            std::size_t n_tokens,
                                            const CaptureOptions& options = {});

// Writes shard_00000.ash, shard_00001.ash, ... and returns the paths.
std::vector<std::filesystem::path> write_shards(std::span<const ActivationShard> shards,
                                                const std::filesystem::path& dir);
std::vector<std::filesystem::path> list_shards(const std::filesystem::path& dir);

// Pull-based row source. next() copies up to max_rows rows into `out` and
// returns the count (0 at end of stream).
class RowStream {
 public:
  virtual ~RowStream() = default;
  virtual Eigen::Index next(Mat& out, Eigen::Index max_rows) = 0;
  virtual void rewind() = 0;
  virtual Eigen::Index cols() const = 0;
};

class MatrixRowStream final : public RowStream {
 public:
  explicit MatrixRowStream(Mat rows) : rows_(std::move(rows)) {}
  Eigen::Index next(Mat& out, Eigen::Index max_rows) override;
  void rewind() override { cursor_ = 0; }
  Eigen::Index cols() const override { return rows_.cols(); }

 private:
  Mat rows_;
  Eigen::Index cursor_ = 0;
};

// Streams rows of transform(shard) across shard files, one shard resident at
// a time, in written order.
class ShardRowStream final : public RowStream {
 public:
  using Transform = std::function<Mat(const ActivationShard&)>;
  ShardRowStream(std::vector<std::filesystem::path> paths, Transform transform);

  Eigen::Index next(Mat& out, Eigen::Index max_rows) override;
  void rewind() override;
  Eigen::Index cols() const override;

 private:
  bool load_next();

  std::vector<std::filesystem::path> paths_;
  Transform transform_;
  std::size_t file_ = 0;
  Mat current_;
  Eigen::Index cursor_ = 0;
  mutable Eigen::Index cols_ = -1;
};

}  // namespace resae
