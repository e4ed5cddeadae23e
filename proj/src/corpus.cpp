#include "wisdom/corpus.hpp"

#include <algorithm>
#include <cctype>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>
#include <unordered_set>

#include <json.hpp>

#include "wisdom/rng.hpp"

namespace wisdom {

using nlohmann::json;

FeatureMode feature_mode_from_string(const std::string& s) {
  if (s == "raw") return FeatureMode::kRaw;
  if (s == "lemma") return FeatureMode::kLemma;
  throw std::runtime_error("unknown feature mode: " + s);
}

std::string to_string(FeatureMode mode) {
  return mode == FeatureMode::kRaw ? "raw" : "lemma";
}

int LabelMap::index_of(const std::string& name) const {
  for (int k = 0; k < size(); ++k) {
    if (names[k] == name) return k + 1;
  }
  throw std::runtime_error("unknown label string: \"" + name + "\"");
}

const std::string& LabelMap::name_of(int label) const {
  if (label < 1 || label > size()) {
    throw std::runtime_error("label index out of range: " +
                             std::to_string(label));
  }
  return names[label - 1];
}

LabelMap LabelMap::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open label map: " + path);
  json j;
  try {
    in >> j;
  } catch (const json::exception& e) {
    throw std::runtime_error("label map parse error in " + path + ": " +
                             e.what());
  }
  if (!j.contains("labels") || !j["labels"].is_array()) {
    throw std::runtime_error("label map " + path +
                             " must contain a \"labels\" array");
  }
  LabelMap map;
  for (const auto& item : j["labels"]) {
    map.names.push_back(item.get<std::string>());
  }
  std::set<std::string> uniq(map.names.begin(), map.names.end());
  if (uniq.size() != map.names.size()) {
    throw std::runtime_error("label map " + path + " has duplicate labels");
  }
  if (map.names.empty()) {
    throw std::runtime_error("label map " + path + " is empty");
  }
  return map;
}

void LabelMap::save(const std::string& path) const {
  json j;
  j["labels"] = names;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write label map: " + path);
  out << j.dump(2) << "\n";
}

LemmaTable load_lemma_table(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open lemma table: " + path);
  LemmaTable table;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.empty()) continue;
    const auto tab = line.find('\t');
    if (tab == std::string::npos) {
      throw std::runtime_error("lemma table " + path + " line " +
                               std::to_string(lineno) + ": expected TAB");
    }
    table[line.substr(0, tab)] = line.substr(tab + 1);
  }
  return table;
}

namespace {

bool is_word_byte(unsigned char c) {
  // ASCII alphanumerics; bytes >= 0x80 are UTF-8 pieces and kept
  return (c >= 'a' && c <= 'z') || (c >= 'A' && c <= 'Z') ||
         (c >= '0' && c <= '9') || c >= 0x80;
}

}  // namespace

std::vector<std::string> tokenize(const std::string& text) {
  std::vector<std::string> tokens;
  std::size_t i = 0;
  const std::size_t n = text.size();
  while (i < n) {
    while (i < n && std::isspace(static_cast<unsigned char>(text[i]))) ++i;
    std::size_t j = i;
    while (j < n && !std::isspace(static_cast<unsigned char>(text[j]))) ++j;
    if (j > i) {
      std::size_t a = i, b = j;
      while (a < b && !is_word_byte(static_cast<unsigned char>(text[a]))) ++a;
      while (b > a && !is_word_byte(static_cast<unsigned char>(text[b - 1])))
        --b;
      if (b > a) {
        std::string tok = text.substr(a, b - a);
        for (char& c : tok) {
          if (c >= 'A' && c <= 'Z') c = static_cast<char>(c - 'A' + 'a');
        }
        tokens.push_back(std::move(tok));
      }
    }
    i = j;
  }
  return tokens;
}

int Vocabulary::find(const std::string& term) const {
  // terms are sorted within the unigram and phrase blocks
  const auto ub = terms.begin() + unigram_count;
  auto it = std::lower_bound(terms.begin(), ub, term);
  if (it != ub && *it == term) return static_cast<int>(it - terms.begin());
  it = std::lower_bound(ub, terms.end(), term);
  if (it != terms.end() && *it == term)
    return static_cast<int>(it - terms.begin());
  return -1;
}

std::vector<std::string> Vocabulary::analyze(const std::string& text) const {
  std::vector<std::string> tokens = tokenize(text);
  if (mode == FeatureMode::kLemma) {
    for (auto& tok : tokens) {
      const auto it = lemmas.find(tok);
      if (it != lemmas.end()) tok = it->second;
    }
  }
  return tokens;
}

std::vector<Document> load_dataset(const std::string& path,
                                   const LabelMap& labels,
                                   DatasetFormat format) {
  if (format != DatasetFormat::kJsonl) {
    throw std::runtime_error("unsupported dataset format");
  }
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open dataset: " + path);

  std::vector<Document> docs;
  std::unordered_set<std::int64_t> seen_ids;
  std::string line;
  int lineno = 0;
  while (std::getline(in, line)) {
    ++lineno;
    if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
    json j;
    try {
      j = json::parse(line);
    } catch (const json::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": parse error: " + e.what());
    }
    Document doc;
    try {
      doc.id = j.at("id").get<std::int64_t>();
      doc.text = j.at("text").get<std::string>();
    } catch (const json::exception& e) {
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": bad record: " + e.what());
    }
    if (j.contains("label") && !j["label"].is_null()) {
      if (!j["label"].is_string()) {
        throw std::runtime_error(path + " line " + std::to_string(lineno) +
                                 ": label must be a string or null");
      }
      try {
        doc.label = labels.index_of(j["label"].get<std::string>());
      } catch (const std::exception& e) {
        throw std::runtime_error(path + " line " + std::to_string(lineno) +
                                 ": " + e.what());
      }
    }
    const auto trimmed = doc.text.find_first_not_of(" \t\r\n");
    if (trimmed == std::string::npos) {
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": empty text");
    }
    if (!seen_ids.insert(doc.id).second) {
      throw std::runtime_error(path + " line " + std::to_string(lineno) +
                               ": duplicated id " + std::to_string(doc.id));
    }
    docs.push_back(std::move(doc));
  }
  return docs;
}

Vocabulary build_vocabulary(const std::vector<Document>& docs, int min_df,
                            FeatureMode mode, LemmaTable lemmas) {
  if (docs.empty()) throw std::runtime_error("build_vocabulary: no documents");
  if (min_df < 1) throw std::runtime_error("build_vocabulary: min_df must be >= 1");

  Vocabulary vocab;
  vocab.min_df = min_df;
  vocab.mode = mode;
  vocab.lemmas = std::move(lemmas);

  std::map<std::string, int> doc_freq;
  for (const auto& doc : docs) {
    const auto tokens = vocab.analyze(doc.text);
    std::set<std::string> uniq(tokens.begin(), tokens.end());
    for (const auto& t : uniq) ++doc_freq[t];
  }
  for (const auto& [term, df] : doc_freq) {
    if (df >= min_df) vocab.terms.push_back(term);
  }
  vocab.unigram_count = static_cast<int>(vocab.terms.size());
  if (vocab.terms.empty()) {
    throw std::runtime_error(
        "build_vocabulary: empty vocabulary (min_df too large?)");
  }
  return vocab;
}

VecX featurize(const Document& doc, const Vocabulary& vocab) {
  VecX x = VecX::Zero(vocab.size());
  const auto tokens = vocab.analyze(doc.text);
  for (const auto& tok : tokens) {
    const auto ub = vocab.terms.begin() + vocab.unigram_count;
    const auto it = std::lower_bound(vocab.terms.begin(), ub, tok);
    if (it != ub && *it == tok) x[it - vocab.terms.begin()] += 1.0;
  }
  if (vocab.unigram_count < vocab.size()) {
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      const std::string phrase = tokens[i] + " " + tokens[i + 1];
      const auto it = std::lower_bound(
          vocab.terms.begin() + vocab.unigram_count, vocab.terms.end(), phrase);
      if (it != vocab.terms.end() && *it == phrase)
        x[it - vocab.terms.begin()] += 1.0;
    }
  }
  return x;
}

MatX featurize_all(const std::vector<Document>& docs, const Vocabulary& vocab) {
  MatX x(static_cast<Eigen::Index>(docs.size()), vocab.size());
  for (std::size_t i = 0; i < docs.size(); ++i) {
    x.row(static_cast<Eigen::Index>(i)) = featurize(docs[i], vocab).transpose();
  }
  return x;
}

std::vector<Document> SplitCorpus::labeled() const {
  std::vector<Document> all = supervised;
  all.insert(all.end(), validation.begin(), validation.end());
  return all;
}

SplitCorpus split_pool(const std::vector<Document>& docs,
                       double labeled_fraction, std::uint64_t seed,
                       int num_classes) {
  if (!(labeled_fraction > 0.0 && labeled_fraction < 1.0)) {
    throw std::runtime_error("split_pool: labeled_fraction must be in (0,1)");
  }
  if (num_classes < 2) {
    throw std::runtime_error("split_pool: need at least 2 classes");
  }

  std::vector<std::vector<std::size_t>> by_class(
      static_cast<std::size_t>(num_classes));
  std::vector<bool> in_labeled(docs.size(), false);
  for (std::size_t i = 0; i < docs.size(); ++i) {
    const int y = docs[i].label;
    if (y < 0 || y > num_classes) {
      throw std::runtime_error("split_pool: label out of range for doc id " +
                               std::to_string(docs[i].id));
    }
    if (y > 0) by_class[static_cast<std::size_t>(y - 1)].push_back(i);
  }

  Rng rng(stream_seed(seed, kStreamSplit));

  // stratified: ceil(fraction * n_k) from each class, chosen by seeded
  // shuffle, so every populated class reaches the labeled pool
  std::vector<std::size_t> labeled_idx;
  for (auto& members : by_class) {
    if (members.empty()) continue;
    rng.shuffle(members);
    const auto take = static_cast<std::size_t>(std::ceil(
        labeled_fraction * static_cast<double>(members.size())));
    for (std::size_t t = 0; t < take && t < members.size(); ++t) {
      labeled_idx.push_back(members[t]);
      in_labeled[members[t]] = true;
    }
  }
  if (labeled_idx.empty()) {
    throw std::runtime_error("split_pool: no labeled documents in pool");
  }

  // half/half into supervised and validation; odd pool size favors the
  // supervised half
  rng.shuffle(labeled_idx);
  const std::size_t n_s = (labeled_idx.size() + 1) / 2;

  SplitCorpus corpus;
  corpus.num_classes = num_classes;
  corpus.seed = seed;
  for (std::size_t t = 0; t < labeled_idx.size(); ++t) {
    if (t < n_s) {
      corpus.supervised.push_back(docs[labeled_idx[t]]);
    } else {
      corpus.validation.push_back(docs[labeled_idx[t]]);
    }
  }
  for (std::size_t i = 0; i < docs.size(); ++i) {
    if (!in_labeled[i]) {
      Document d = docs[i];
      d.label = 0;
      corpus.unlabeled.push_back(std::move(d));
    }
  }

  for (int k = 1; k <= num_classes; ++k) {
    const auto has = [k](const std::vector<Document>& v) {
      return std::any_of(v.begin(), v.end(),
                         [k](const Document& d) { return d.label == k; });
    };
    if (!has(corpus.supervised)) {
      corpus.warnings.push_back("class " + std::to_string(k) +
                                " absent from supervised split");
    }
    if (!has(corpus.validation)) {
      corpus.warnings.push_back("class " + std::to_string(k) +
                                " absent from validation split");
    }
  }
  return corpus;
}

void attach_features(SplitCorpus& corpus, const Vocabulary& vocab) {
  corpus.xs = featurize_all(corpus.supervised, vocab);
  corpus.xv = featurize_all(corpus.validation, vocab);
  corpus.xu = featurize_all(corpus.unlabeled, vocab);
}

void write_split_manifest(const SplitCorpus& corpus, const std::string& path) {
  json j;
  j["seed"] = corpus.seed;
  auto ids = [](const std::vector<Document>& v) {
    std::vector<std::int64_t> out;
    out.reserve(v.size());
    for (const auto& d : v) out.push_back(d.id);
    return out;
  };
  j["supervised"] = ids(corpus.supervised);
  j["validation"] = ids(corpus.validation);
  j["unlabeled"] = ids(corpus.unlabeled);
  j["warnings"] = corpus.warnings;
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write split manifest: " + path);
  out << j.dump(2) << "\n";
}

}  // namespace wisdom
