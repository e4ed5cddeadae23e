#include "wisdom/lf.hpp"

#include <algorithm>
#include <fstream>
#include <map>
#include <set>
#include <stdexcept>

#include <json.hpp>

namespace wisdom {

using nlohmann::json;

Vocabulary with_bigram_terms(const Vocabulary& base,
                             const std::vector<Document>& docs, int min_df) {
  std::map<std::string, int> doc_freq;
  for (const auto& doc : docs) {
    const auto tokens = base.analyze(doc.text);
    std::set<std::string> uniq;
    for (std::size_t i = 0; i + 1 < tokens.size(); ++i) {
      if (base.find(tokens[i]) < 0 || base.find(tokens[i + 1]) < 0) continue;
      uniq.insert(tokens[i] + " " + tokens[i + 1]);
    }
    for (const auto& b : uniq) ++doc_freq[b];
  }
  Vocabulary vocab = base;
  vocab.terms.resize(static_cast<std::size_t>(vocab.unigram_count));
  for (const auto& [phrase, df] : doc_freq) {
    if (df >= min_df) vocab.terms.push_back(phrase);
  }
  return vocab;
}

namespace {

int term_word_arity(const Vocabulary& vocab, int term) {
  return vocab.terms[static_cast<std::size_t>(term)].find(' ') ==
                 std::string::npos
             ? 1
             : 2;
}

std::vector<int> fired_rows(const MatX& features,
                            const std::vector<int>& props) {
  std::vector<int> rows;
  for (Eigen::Index i = 0; i < features.rows(); ++i) {
    bool all = true;
    for (int p : props) {
      if (features(i, p) <= 0.0) {
        all = false;
        break;
      }
    }
    if (all) rows.push_back(static_cast<int>(i));
  }
  return rows;
}

// precision/coverage/majority target of a proposition set on a labeled corpus
struct CandidateStats {
  int target = 0;
  int fired = 0;
  int correct = 0;
  double precision = 0.0;
  double coverage = 0.0;
};

CandidateStats stats_on(const MatX& features, const std::vector<int>& labels,
                        const std::vector<int>& props, int num_classes,
                        int forced_target = 0) {
  CandidateStats st;
  std::vector<int> per_class(static_cast<std::size_t>(num_classes), 0);
  const auto rows = fired_rows(features, props);
  st.fired = static_cast<int>(rows.size());
  for (int i : rows) {
    ++per_class[static_cast<std::size_t>(labels[static_cast<std::size_t>(i)] - 1)];
  }
  if (forced_target > 0) {
    st.target = forced_target;
  } else {
    int best = 0;
    for (int k = 1; k < num_classes; ++k) {
      if (per_class[static_cast<std::size_t>(k)] >
          per_class[static_cast<std::size_t>(best)]) {
        best = k;
      }
    }
    st.target = best + 1;
  }
  st.correct = per_class[static_cast<std::size_t>(st.target - 1)];
  if (st.fired > 0) {
    st.precision = static_cast<double>(st.correct) / st.fired;
  }
  if (!labels.empty()) {
    st.coverage = static_cast<double>(st.fired) /
                  static_cast<double>(labels.size());
  }
  return st;
}

std::vector<int> labels_of(const std::vector<Document>& docs) {
  std::vector<int> labels;
  labels.reserve(docs.size());
  for (const auto& d : docs) {
    if (!d.has_label()) {
      throw std::runtime_error("LF induction expects labeled documents");
    }
    labels.push_back(d.label);
  }
  return labels;
}

std::vector<LabelingFunction> generate_candidates_impl(
    const MatX& features, const std::vector<int>& labels,
    const std::vector<bool>& covered, const Vocabulary& vocab, int max_arity,
    int min_firings, int num_classes) {
  // restrict to the uncovered rows for counting and majority votes
  std::vector<int> active;
  for (std::size_t i = 0; i < covered.size(); ++i) {
    if (!covered[i]) active.push_back(static_cast<int>(i));
  }
  MatX sub(static_cast<Eigen::Index>(active.size()), features.cols());
  std::vector<int> sub_labels(active.size());
  for (std::size_t r = 0; r < active.size(); ++r) {
    sub.row(static_cast<Eigen::Index>(r)) = features.row(active[r]);
    sub_labels[r] = labels[static_cast<std::size_t>(active[r])];
  }

  std::vector<LabelingFunction> candidates;
  for (int t = 0; t < vocab.size(); ++t) {
    if (term_word_arity(vocab, t) > max_arity) continue;
    const std::vector<int> props{t};
    const auto st = stats_on(sub, sub_labels, props, num_classes);
    if (st.fired < min_firings) continue;
    LabelingFunction lf;
    lf.id = static_cast<int>(candidates.size());
    lf.propositions = props;
    lf.target_class = st.target;
    lf.train_precision = st.precision;
    lf.train_coverage = st.coverage;
    candidates.push_back(std::move(lf));
  }
  return candidates;
}

double jaccard(const std::vector<int>& a, const std::vector<int>& b) {
  if (a.empty() && b.empty()) return 0.0;
  std::size_t ia = 0, ib = 0, inter = 0;
  while (ia < a.size() && ib < b.size()) {
    if (a[ia] == b[ib]) {
      ++inter;
      ++ia;
      ++ib;
    } else if (a[ia] < b[ib]) {
      ++ia;
    } else {
      ++ib;
    }
  }
  const std::size_t uni = a.size() + b.size() - inter;
  return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

std::optional<LabelingFunction> score_and_filter_impl(
    const std::vector<LabelingFunction>& candidates,
    const std::vector<std::vector<int>>& committed_fired, const MatX& features,
    const std::vector<int>& labels, int num_classes,
    const InductionConfig& config) {
  std::optional<LabelingFunction> best;
  double best_f1 = -1.0;
  std::vector<int> class_count(static_cast<std::size_t>(num_classes), 0);
  for (int y : labels) ++class_count[static_cast<std::size_t>(y - 1)];

  for (const auto& cand : candidates) {
    // evaluated on the full labeled set, with the candidate's target kept
    const auto st = stats_on(features, labels, cand.propositions, num_classes,
                             cand.target_class);
    if (st.fired == 0) continue;
    if (st.precision < config.min_precision) continue;

    const auto rows = fired_rows(features, cand.propositions);
    bool diverse = true;
    for (const auto& prev : committed_fired) {
      if (jaccard(rows, prev) > config.max_overlap) {
        diverse = false;
        break;
      }
    }
    if (!diverse) continue;

    // one-vs-rest F1 of the firings: fired docs predicted target, rest abstain
    const int tp = st.correct;
    const int fp = st.fired - st.correct;
    const int fn = class_count[static_cast<std::size_t>(st.target - 1)] - tp;
    const double denom = static_cast<double>(2 * tp + fp + fn);
    const double f1 = denom > 0.0 ? 2.0 * tp / denom : 0.0;
    if (f1 > best_f1) {
      best_f1 = f1;
      LabelingFunction lf = cand;
      lf.train_precision = st.precision;
      lf.train_coverage = st.coverage;
      best = lf;
    }
  }
  return best;
}

}  // namespace

std::vector<LabelingFunction> generate_candidates(
    const std::vector<Document>& labeled, const Vocabulary& vocab,
    int max_arity, int min_firings, int num_classes) {
  if (labeled.empty()) {
    throw std::runtime_error("generate_candidates: empty labeled set");
  }
  if (max_arity != 1 && max_arity != 2) {
    throw std::runtime_error("generate_candidates: max_arity must be 1 or 2");
  }
  const MatX features = featurize_all(labeled, vocab);
  const auto labels = labels_of(labeled);
  const std::vector<bool> covered(labeled.size(), false);
  return generate_candidates_impl(features, labels, covered, vocab, max_arity,
                                  min_firings, num_classes);
}

std::optional<LabelingFunction> score_and_filter(
    const std::vector<LabelingFunction>& candidates,
    const std::vector<LabelingFunction>& committed,
    const std::vector<Document>& labeled, const Vocabulary& vocab,
    const InductionConfig& config) {
  const MatX features = featurize_all(labeled, vocab);
  const auto labels = labels_of(labeled);
  int num_classes = 0;
  for (int y : labels) num_classes = std::max(num_classes, y);
  for (const auto& c : candidates) {
    num_classes = std::max(num_classes, c.target_class);
  }
  std::vector<std::vector<int>> committed_fired;
  committed_fired.reserve(committed.size());
  for (const auto& lf : committed) {
    committed_fired.push_back(fired_rows(features, lf.propositions));
  }
  return score_and_filter_impl(candidates, committed_fired, features, labels,
                               num_classes, config);
}

std::vector<LabelingFunction> snuba_induce(const std::vector<Document>& labeled,
                                           const Vocabulary& vocab,
                                           const InductionConfig& config,
                                           int num_classes) {
  if (labeled.empty()) {
    throw std::runtime_error("snuba_induce: empty labeled set");
  }
  const MatX features = featurize_all(labeled, vocab);
  const auto labels = labels_of(labeled);
  std::vector<bool> covered(labeled.size(), false);

  std::vector<LabelingFunction> committed;
  std::vector<std::vector<int>> committed_fired;

  for (int iter = 0; iter < config.max_iters; ++iter) {
    if (std::all_of(covered.begin(), covered.end(),
                    [](bool c) { return c; })) {
      break;
    }
    auto candidates = generate_candidates_impl(
        features, labels, covered, vocab, config.max_arity, config.min_firings,
        num_classes);
    auto winner = score_and_filter_impl(candidates, committed_fired, features,
                                        labels, num_classes, config);
    if (!winner) break;

    winner->id = static_cast<int>(committed.size());
    const auto rows = fired_rows(features, winner->propositions);
    for (int i : rows) {
      if (labels[static_cast<std::size_t>(i)] == winner->target_class) {
        covered[static_cast<std::size_t>(i)] = true;
      }
    }
    committed_fired.push_back(rows);
    committed.push_back(*winner);
  }

  if (committed.empty()) {
    throw std::runtime_error(
        "snuba_induce: no labeling function qualified; induction failed");
  }
  return committed;
}

TriggerMatrices apply_lfs(const std::vector<LabelingFunction>& lfs,
                          const MatX& features) {
  const auto n = features.rows();
  const auto m = static_cast<Eigen::Index>(lfs.size());
  TriggerMatrices tm;
  tm.l = MatX::Zero(n, m);
  tm.tau = MatXi::Zero(n, m);
  for (Eigen::Index j = 0; j < m; ++j) {
    const auto& lf = lfs[static_cast<std::size_t>(j)];
    for (int p : lf.propositions) {
      if (p < 0 || p >= features.cols()) {
        throw std::runtime_error(
            "apply_lfs: proposition index out of range; feature matrix does "
            "not match the inducing vocabulary");
      }
    }
    for (Eigen::Index i = 0; i < n; ++i) {
      bool all = true;
      for (int p : lf.propositions) {
        if (features(i, p) <= 0.0) {
          all = false;
          break;
        }
      }
      if (all) {
        tm.l(i, j) = 1.0;
        tm.tau(i, j) = lf.target_class;
      }
    }
  }
  return tm;
}

std::string lfs_to_json(const std::vector<LabelingFunction>& lfs,
                        const Vocabulary& vocab, const LabelMap& labels) {
  json arr = json::array();
  for (const auto& lf : lfs) {
    json j;
    j["id"] = lf.id;
    json props = json::array();
    for (int p : lf.propositions) {
      props.push_back(vocab.terms[static_cast<std::size_t>(p)]);
    }
    j["propositions"] = props;
    j["target_class"] = labels.name_of(lf.target_class);
    j["train_precision"] = lf.train_precision;
    j["train_coverage"] = lf.train_coverage;
    arr.push_back(std::move(j));
  }
  return arr.dump(2);
}

std::vector<LabelingFunction> lfs_from_json(const std::string& text,
                                            const Vocabulary& vocab,
                                            const LabelMap& labels) {
  json arr;
  try {
    arr = json::parse(text);
  } catch (const json::exception& e) {
    throw std::runtime_error(std::string("LF json parse error: ") + e.what());
  }
  std::vector<LabelingFunction> lfs;
  for (const auto& j : arr) {
    LabelingFunction lf;
    lf.id = j.at("id").get<int>();
    for (const auto& term : j.at("propositions")) {
      const int idx = vocab.find(term.get<std::string>());
      if (idx < 0) {
        throw std::runtime_error("LF proposition term not in vocabulary: " +
                                 term.get<std::string>());
      }
      lf.propositions.push_back(idx);
    }
    std::sort(lf.propositions.begin(), lf.propositions.end());
    lf.target_class = labels.index_of(j.at("target_class").get<std::string>());
    lf.train_precision = j.at("train_precision").get<double>();
    lf.train_coverage = j.at("train_coverage").get<double>();
    lfs.push_back(std::move(lf));
  }
  return lfs;
}

void save_lfs(const std::vector<LabelingFunction>& lfs, const Vocabulary& vocab,
              const LabelMap& labels, const std::string& path) {
  std::ofstream out(path);
  if (!out) throw std::runtime_error("cannot write LF file: " + path);
  out << lfs_to_json(lfs, vocab, labels) << "\n";
}

std::vector<LabelingFunction> load_lfs(const std::string& path,
                                       const Vocabulary& vocab,
                                       const LabelMap& labels) {
  std::ifstream in(path);
  if (!in) throw std::runtime_error("cannot open LF file: " + path);
  std::string text((std::istreambuf_iterator<char>(in)),
                   std::istreambuf_iterator<char>());
  return lfs_from_json(text, vocab, labels);
}

Vocabulary ensure_lf_terms(const Vocabulary& base,
                           const std::vector<std::string>& phrase_terms) {
  Vocabulary vocab = base;
  std::set<std::string> extra;
  for (const auto& t : phrase_terms) {
    if (vocab.find(t) < 0) extra.insert(t);
  }
  std::vector<std::string> phrases(
      vocab.terms.begin() + vocab.unigram_count, vocab.terms.end());
  phrases.insert(phrases.end(), extra.begin(), extra.end());
  std::sort(phrases.begin(), phrases.end());
  vocab.terms.resize(static_cast<std::size_t>(vocab.unigram_count));
  vocab.terms.insert(vocab.terms.end(), phrases.begin(), phrases.end());
  return vocab;
}

std::vector<int> lf_targets(const std::vector<LabelingFunction>& lfs) {
  std::vector<int> t;
  t.reserve(lfs.size());
  for (const auto& lf : lfs) t.push_back(lf.target_class);
  return t;
}

VecX quality_guides(const std::vector<LabelingFunction>& lfs, double floor) {
  VecX q(static_cast<Eigen::Index>(lfs.size()));
  for (std::size_t j = 0; j < lfs.size(); ++j) {
    double v = std::max(lfs[j].train_precision, floor);
    v = std::min(std::max(v, 1e-3), 1.0 - 1e-3);
    q[static_cast<Eigen::Index>(j)] = v;
  }
  return q;
}

}  // namespace wisdom
