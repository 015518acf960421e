#include "resae/corpus.hpp"

#include <fstream>
#include <iterator>
#include <random>
#include <string>

#include "resae/tensor.hpp"

namespace resae {

namespace {

const char* const kFunctionWords[] = {"the", "of", "and", "a", "to", "in", "is", "it", "on", "as"};

struct Topic {
  std::vector<std::string> words;
  std::vector<std::vector<int>> successors;
};

Topic make_topic(int index, int n_words, std::mt19937_64& rng) {
  // Each topic draws from its own 9-letter alphabet; alphabets overlap.
  std::string alphabet;
  for (int i = 0; i < 9; ++i) alphabet.push_back(static_cast<char>('a' + (index * 5 + i * 2) % 26));
  std::uniform_int_distribution<int> len_dist(3, 7);
  std::uniform_int_distribution<int> letter(0, static_cast<int>(alphabet.size()) - 1);
  std::uniform_int_distribution<int> word_pick(0, n_words - 1);
  Topic t;
  for (int w = 0; w < n_words; ++w) {
    std::string word;
    const int len = len_dist(rng);
    for (int i = 0; i < len; ++i) word.push_back(alphabet[static_cast<std::size_t>(letter(rng))]);
    t.words.push_back(word);
    std::vector<int> succ(3);
    for (int& s : succ) s = word_pick(rng);
    t.successors.push_back(succ);
  }
  return t;
}

}  // namespace

Corpus generate_synthetic_corpus(const SyntheticCorpusOptions& options) {
  require(options.n_classes >= 1 && options.doc_len >= 2 && options.words_per_topic >= 1,
          ErrorCode::kInvalidArgument, "invalid synthetic corpus options");
  std::mt19937_64 rng(options.seed);
  std::vector<Topic> topics;
  for (int c = 0; c < options.n_classes; ++c) topics.push_back(make_topic(c, options.words_per_topic, rng));

  std::uniform_int_distribution<int> class_dist(0, options.n_classes - 1);
  std::uniform_int_distribution<int> word_dist(0, options.words_per_topic - 1);
  std::uniform_int_distribution<int> succ_dist(0, 2);
  std::uniform_int_distribution<int> fn_dist(0, static_cast<int>(std::size(kFunctionWords)) - 1);
  std::uniform_real_distribution<double> unit(0.0, 1.0);

  Corpus out;
  out.doc_len = options.doc_len;
  out.bytes.reserve(options.n_docs * static_cast<std::size_t>(options.doc_len));
  out.labels.reserve(options.n_docs);
  const std::size_t len = static_cast<std::size_t>(options.doc_len);
  for (std::size_t d = 0; d < options.n_docs; ++d) {
    const int label = class_dist(rng);
    const Topic& topic = topics[static_cast<std::size_t>(label)];
    std::string doc;
    int word = word_dist(rng);
    while (doc.size() < len) {
      const double u = unit(rng);
      if (u < 0.25) {
        doc += kFunctionWords[fn_dist(rng)];
      } else {
        doc += topic.words[static_cast<std::size_t>(word)];
        word = u < 0.85 ? topic.successors[static_cast<std::size_t>(word)][static_cast<std::size_t>(succ_dist(rng))]
                        : word_dist(rng);
      }
      doc += unit(rng) < 0.1 ? ". " : " ";
    }
    doc.resize(len - 1);
    doc.push_back('\n');
    out.bytes.insert(out.bytes.end(), doc.begin(), doc.end());
    out.labels.push_back(label);
  }
  return out;
}

Corpus load_corpus(const std::filesystem::path& path, int default_doc_len) {
  std::ifstream in(path, std::ios::binary);
  require(in.is_open(), ErrorCode::kIo, "cannot open corpus: " + path.string());
  Corpus c;
  c.bytes.assign(std::istreambuf_iterator<char>(in), std::istreambuf_iterator<char>());
  c.doc_len = default_doc_len;
  std::filesystem::path label_path = path;
  label_path += ".labels";
  if (std::filesystem::exists(label_path)) {
    std::ifstream lin(label_path);
    require(static_cast<bool>(lin >> c.doc_len) && c.doc_len >= 1, ErrorCode::kFormat,
            "bad labels header: " + label_path.string());
    int label;
    while (lin >> label) c.labels.push_back(label);
    require(c.labels.size() == c.num_docs(), ErrorCode::kFormat,
            "label count does not match document count: " + label_path.string());
  }
  return c;
}

void save_corpus(const Corpus& corpus, const std::filesystem::path& path) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  require(out.is_open(), ErrorCode::kIo, "cannot write corpus: " + path.string());
  out.write(reinterpret_cast<const char*>(corpus.bytes.data()),
            static_cast<std::streamsize>(corpus.bytes.size()));
  require(out.good(), ErrorCode::kIo, "corpus write failed: " + path.string());
  if (corpus.labeled()) {
    std::filesystem::path label_path = path;
    label_path += ".labels";
    std::ofstream lout(label_path, std::ios::trunc);
    lout << corpus.doc_len << '\n';
    for (int l : corpus.labels) lout << l << '\n';
    require(lout.good(), ErrorCode::kIo, "label write failed: " + label_path.string());
  }
}

}  // namespace resae
