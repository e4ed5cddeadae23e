#pragma once

#include <optional>
#include <string>
#include <vector>

#include "wisdom/corpus.hpp"
#include "wisdom/types.hpp"

namespace wisdom {

// A presence heuristic: fires on a document when every proposition term has a
// nonzero count. A proposition indexes the inducing vocabulary; phrase terms
// ("how long") require the two tokens adjacent, so a phrase heuristic has
// word arity 2 while still being one count column.
struct LabelingFunction {
  int id = 0;
  std::vector<int> propositions;  // term indices, ascending
  int target_class = 0;           // 1..K
  double train_precision = 0.0;
  double train_coverage = 0.0;
};

// l(i,j) = 1 iff LF j fires on row i; tau(i,j) = target class of LF j when
// fired and 0 otherwise.
struct TriggerMatrices {
  MatX l;
  MatXi tau;
};

struct InductionConfig {
  int max_iters = 40;
  double min_precision = 0.6;
  double max_overlap = 0.6;  // Jaccard ceiling between fired sets
  int min_firings = 3;
  int max_arity = 2;
};

// Appends adjacent-bigram phrase terms (document frequency >= min_df, both
// tokens already in the vocabulary) after the unigram block.
Vocabulary with_bigram_terms(const Vocabulary& base,
                             const std::vector<Document>& docs, int min_df);

std::vector<LabelingFunction> generate_candidates(
    const std::vector<Document>& labeled, const Vocabulary& vocab,
    int max_arity, int min_firings, int num_classes);

std::optional<LabelingFunction> score_and_filter(
    const std::vector<LabelingFunction>& candidates,
    const std::vector<LabelingFunction>& committed,
    const std::vector<Document>& labeled, const Vocabulary& vocab,
    const InductionConfig& config);

std::vector<LabelingFunction> snuba_induce(const std::vector<Document>& labeled,
                                           const Vocabulary& vocab,
                                           const InductionConfig& config,
                                           int num_classes);

TriggerMatrices apply_lfs(const std::vector<LabelingFunction>& lfs,
                          const MatX& features);

std::string lfs_to_json(const std::vector<LabelingFunction>& lfs,
                        const Vocabulary& vocab, const LabelMap& labels);
std::vector<LabelingFunction> lfs_from_json(const std::string& text,
                                            const Vocabulary& vocab,
                                            const LabelMap& labels);

void save_lfs(const std::vector<LabelingFunction>& lfs, const Vocabulary& vocab,
              const LabelMap& labels, const std::string& path);
std::vector<LabelingFunction> load_lfs(const std::string& path,
                                       const Vocabulary& vocab,
                                       const LabelMap& labels);

// Phrase terms referenced by stored LFs may be absent from a freshly built
// vocabulary; this re-appends them so stored LFs resolve.
Vocabulary ensure_lf_terms(const Vocabulary& base,
                           const std::vector<std::string>& phrase_terms);

std::vector<int> lf_targets(const std::vector<LabelingFunction>& lfs);

// quality guides: max(train precision, floor), clamped inside (0,1)
VecX quality_guides(const std::vector<LabelingFunction>& lfs, double floor);

}  // namespace wisdom
