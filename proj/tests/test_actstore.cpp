#include <fstream>
#include <random>

#include "doctest.h"
#include "resae/actstore.hpp"
#include "support.hpp"

using namespace resae;
using resae::test::TempDir;

namespace {

std::string slurp(const std::filesystem::path& p) {
  std::ifstream in(p, std::ios::binary);
  return std::string(std::istreambuf_iterator<char>(in), {});
}

}  // namespace

TEST_CASE("ASH1 shards round-trip bit-exactly") {
  TempDir dir("ash");
  std::mt19937_64 rng(1);
  for (int i = 0; i < 20; ++i) {
    const ActivationShard s = test::random_shard(rng);
    write_shard(s, dir / "s.ash");
    const ActivationShard back = read_shard(dir / "s.ash");
    CHECK(back == s);
    write_shard(back, dir / "t.ash");
    CHECK(slurp(dir / "s.ash") == slurp(dir / "t.ash"));
  }
}

TEST_CASE("shard equality is bitwise") {
  std::mt19937_64 rng(2);
  ActivationShard a = test::random_shard(rng);
  ActivationShard b = a;
  b.data[0](0, 0) = -0.0f;
  a.data[0](0, 0) = 0.0f;
  CHECK_FALSE(a == b);
}

TEST_CASE("malformed shards are rejected") {
  TempDir dir("ash_bad");
  std::mt19937_64 rng(3);
  const ActivationShard s = test::random_shard(rng);
  write_shard(s, dir / "ok.ash");
  const auto size = std::filesystem::file_size(dir / "ok.ash");

  std::filesystem::copy_file(dir / "ok.ash", dir / "short.ash");
  std::filesystem::resize_file(dir / "short.ash", size - 1);
  CHECK_THROWS_AS(read_shard(dir / "short.ash"), Error);

  {
    std::ofstream f(dir / "long.ash", std::ios::binary);
    f << slurp(dir / "ok.ash") << 'x';
  }
  CHECK_THROWS_AS(read_shard(dir / "long.ash"), Error);

  std::string bytes = slurp(dir / "ok.ash");
  bytes[0] = 'B';
  {
    std::ofstream f(dir / "magic.ash", std::ios::binary);
    f << bytes;
  }
  try {
    read_shard(dir / "magic.ash");
    FAIL("expected a format error");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kFormat);
  }

  ActivationShard bad = s;
  bad.origins.pop_back();
  CHECK_THROWS_AS(write_shard(bad, dir / "bad.ash"), Error);
}

TEST_CASE("capture records window origins, labels and hook activations") {
  const LmConfig cfg = test::small_lm_config();
  const TinyLm lm(cfg);
  const Corpus corpus = test::small_corpus(32, 64);
  CaptureOptions opt;
  opt.first_window = 5;
  opt.batch_windows = 3;
  const std::vector<int> layers{1, 3};
  const auto shards = capture_corpus(lm, corpus, layers, 7 * 32 - 10, opt);
  REQUIRE(shards.size() == 1);
  const ActivationShard& s = shards[0];
  CHECK(s.n_rows() == 7 * 32);
  CHECK(s.layer_set == layers);
  for (Eigen::Index r = 0; r < s.n_rows(); ++r) {
    const std::size_t w = static_cast<std::size_t>(r / 32);
    CHECK(s.origins[static_cast<std::size_t>(r)].sequence == 5 + w);
    CHECK(s.origins[static_cast<std::size_t>(r)].position == static_cast<std::uint32_t>(r % 32));
    CHECK(s.labels[static_cast<std::size_t>(r)] == corpus.labels[5 + w]);
  }
  const CaptureResult direct = forward_capture(lm, corpus_windows(corpus.bytes, 32, 8, 2), layers);
  CHECK(s.layer(3).middleRows(3 * 32, 64) == direct.activations[1]);
}

TEST_CASE("capture splits at the shard row cap and rejects short corpora") {
  const TinyLm lm(test::small_lm_config());
  const Corpus corpus = test::small_corpus(32, 16);
  CaptureOptions opt;
  opt.max_rows = 3 * 32;
  const auto shards = capture_corpus(lm, corpus, std::vector<int>{0}, 10 * 32, opt);
  REQUIRE(shards.size() == 4);
  CHECK(shards[3].n_rows() == 32);
  CHECK(shards[3].origins.front().sequence == 9);
  opt.first_window = 10;
  try {
    capture_corpus(lm, corpus, std::vector<int>{0}, 10 * 32, opt);
    FAIL("expected out of range");
  } catch (const Error& e) {
    CHECK(e.code() == ErrorCode::kOutOfRange);
  }
  CHECK_THROWS_AS(capture_corpus(lm, corpus, std::vector<int>{2, 1}, 32), Error);
}

TEST_CASE("shard directories stream rows in written order") {
  TempDir dir("ash_stream");
  std::mt19937_64 rng(4);
  std::vector<ActivationShard> shards;
  for (int i = 0; i < 3; ++i) {
    ActivationShard s;
    s.layer_set = {2};
    s.data.push_back(test::random_matrix<Mat>(10 + i, 5, rng));
    for (Eigen::Index r = 0; r < s.data[0].rows(); ++r) s.origins.push_back({0, static_cast<std::uint32_t>(r)});
    shards.push_back(std::move(s));
  }
  const auto paths = write_shards(shards, dir.path());
  CHECK(list_shards(dir.path()) == paths);

  ShardRowStream stream(paths, [](const ActivationShard& s) { return s.layer(2); });
  CHECK(stream.cols() == 5);
  for (int pass = 0; pass < 2; ++pass) {
    Mat all(0, 5), chunk;
    while (stream.next(chunk, 4) > 0) {
      Mat grown(all.rows() + chunk.rows(), 5);
      grown << all, chunk;
      all = grown;
    }
    CHECK(all.rows() == 33);
    CHECK(all.topRows(10) == shards[0].data[0]);
    CHECK(all.bottomRows(12) == shards[2].data[0]);
    stream.rewind();
  }

  MatrixRowStream m(shards[1].data[0]);
  Mat chunk;
  CHECK(m.next(chunk, 8) == 8);
  CHECK(m.next(chunk, 8) == 3);
  CHECK(m.next(chunk, 8) == 0);
}

TEST_CASE("capturing one window yields one shard of context_len rows") {
  const LmConfig cfg = test::small_lm_config();
  const TinyLm lm(cfg);
  const Corpus corpus = test::small_corpus(32, 8);
  const std::vector<int> layers{0, 2};
  const auto shards = capture_corpus(lm, corpus, layers, static_cast<std::size_t>(cfg.context_len));
  REQUIRE(shards.size() == 1);
  CHECK(shards[0].n_rows() == cfg.context_len);
  const CaptureResult direct = forward_capture(lm, corpus_windows(corpus.bytes, 32, 0, 1), layers);
  CHECK(shards[0].layer(0) == direct.activations[0]);
  CHECK(shards[0].layer(2) == direct.activations[1]);
}
