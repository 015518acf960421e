#pragma once

#include <cstdint>
#include <filesystem>
#include <optional>
#include <vector>

namespace resae {

// Byte corpus made of fixed-length documents. When labels are present,
// labels[i] is the class of document i (bytes [i*doc_len, (i+1)*doc_len)).
struct Corpus {
  std::vector<std::uint8_t> bytes;
  std::vector<int> labels;
  int doc_len = 0;

  std::size_t num_docs() const { return doc_len > 0 ? bytes.size() / static_cast<std::size_t>(doc_len) : 0; }
  bool labeled() const { return !labels.empty(); }
};

struct SyntheticCorpusOptions {
  int n_classes = 4;
  int doc_len = 128;
  std::size_t n_docs = 4096;
  int words_per_topic = 32;
  std::uint64_t seed = 1;
};

// Documents drawn from per-topic word vocabularies and word-bigram chains,
// mixed with a shared pool of function words. The topic is the label.
Corpus generate_synthetic_corpus(const SyntheticCorpusOptions& options);

// Corpus bytes at `path`; labels from `path` + ".labels" when that file exists
// (first line: doc_len, then one label per line).
Corpus load_corpus(const std::filesystem::path& path, int default_doc_len);
void save_corpus(const Corpus& corpus, const std::filesystem::path& path);

}  // namespace resae
