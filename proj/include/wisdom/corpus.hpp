#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "wisdom/types.hpp"

namespace wisdom {

enum class FeatureMode { kRaw, kLemma };
enum class DatasetFormat { kJsonl };

FeatureMode feature_mode_from_string(const std::string& s);
std::string to_string(FeatureMode mode);

// One record of a text classification corpus. label is 1..K, or 0 when the
// document is unlabeled.
struct Document {
  std::int64_t id = 0;
  std::string text;
  int label = 0;

  bool has_label() const { return label != 0; }
};

// Class-index order for a dataset; class k corresponds to names[k-1].
struct LabelMap {
  std::vector<std::string> names;

  int size() const { return static_cast<int>(names.size()); }
  int index_of(const std::string& name) const;  // 1..K; throws on unknown
  const std::string& name_of(int label) const;

  static LabelMap load(const std::string& path);
  void save(const std::string& path) const;
};

// surface form -> lemma; identity fallback for anything absent
using LemmaTable = std::map<std::string, std::string>;
LemmaTable load_lemma_table(const std::string& path);

// Lowercase, split on whitespace, strip leading/trailing non-alphanumeric
// bytes (UTF-8 continuation bytes count as word characters).
std::vector<std::string> tokenize(const std::string& text);

// Count-feature basis. Terms are unique and lexicographically sorted; when a
// term contains a space it denotes an adjacent token pair and its feature is
// the bigram count. Such phrase terms live in terms[unigram_count..).
struct Vocabulary {
  std::vector<std::string> terms;
  int unigram_count = 0;
  int min_df = 1;
  FeatureMode mode = FeatureMode::kRaw;
  LemmaTable lemmas;

  int size() const { return static_cast<int>(terms.size()); }
  int find(const std::string& term) const;  // index or -1

  // tokenize + lemma mapping as used when the vocabulary was built
  std::vector<std::string> analyze(const std::string& text) const;
};

std::vector<Document> load_dataset(const std::string& path,
                                   const LabelMap& labels,
                                   DatasetFormat format = DatasetFormat::kJsonl);

Vocabulary build_vocabulary(const std::vector<Document>& docs, int min_df,
                            FeatureMode mode, LemmaTable lemmas = {});

VecX featurize(const Document& doc, const Vocabulary& vocab);
MatX featurize_all(const std::vector<Document>& docs, const Vocabulary& vocab);

// Labeled pool split into supervised/validation halves plus the unlabeled
// remainder (labels dropped there). Feature matrices are attached separately
// once a vocabulary exists.
struct SplitCorpus {
  std::vector<Document> supervised;
  std::vector<Document> validation;
  std::vector<Document> unlabeled;
  int num_classes = 0;
  std::uint64_t seed = 0;
  std::vector<std::string> warnings;  // e.g. class missing from a half

  MatX xs, xv, xu;

  // supervised followed by validation; the LF induction input
  std::vector<Document> labeled() const;
};

SplitCorpus split_pool(const std::vector<Document>& docs,
                       double labeled_fraction, std::uint64_t seed,
                       int num_classes);

void attach_features(SplitCorpus& corpus, const Vocabulary& vocab);

void write_split_manifest(const SplitCorpus& corpus, const std::string& path);

}  // namespace wisdom
