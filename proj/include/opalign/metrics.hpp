#pragma once

#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "opalign/opinion.hpp"
#include "opalign/survey.hpp"

namespace opalign {

// Real-valued positions for a question's non-refusal options, survey order.
// Ordinal options map to 1..K; a hedge option maps to the mean of 1..K.
struct OrdinalSupport {
  std::string qid;
  std::vector<double> values;
};

OrdinalSupport ordinal_support(const Question& question);

// 1-D Wasserstein distance between two probability vectors on a shared
// support: sum over sorted unique support values of |F1 - F2| times the gap
// to the next value. Equals the optimal-transport cost.
double wasserstein_1d(std::span<const double> d1, std::span<const double> d2,
                      std::span<const double> support);

// One question's pair of distributions plus everything needed to score it.
struct QuestionPair {
  std::vector<double> d1;
  std::vector<double> d2;
  std::vector<double> support;
  int n = 0;  // answer-choice count excluding refusal; normalizer is n-1
};

QuestionPair make_question_pair(const OpinionDistribution& a,
                                const OpinionDistribution& b,
                                const Question& question);

// Similarity on a single question: 1 - WD / (n - 1).
double question_similarity(const QuestionPair& pair);

// Mean over questions of 1 - WD/(N-1); in [0,1], 1 iff identical everywhere.
double alignment(std::span<const QuestionPair> pairs);

// Alignment between a model's distributions and a human reference, computed
// over the questions present in both maps. Throws EmptySetError when the
// overlap with `questions` is empty.
double representativeness(const std::map<std::string, OpinionDistribution>& model_dists,
                          const std::map<std::string, OpinionDistribution>& reference_dists,
                          const std::vector<Question>& questions);

struct SteerabilityResult {
  double s = 0.0;                                  // mean of per-question best-context similarity
  std::map<std::string, double> per_context_mean;  // context -> mean similarity where evaluated
  std::map<std::string, int> argmax_count;         // context -> times it was the per-question best
  std::map<std::string, int> missing_context;      // context -> questions it was unavailable for
  int skipped_questions = 0;                       // questions with no context available at all
};

// Per-question max over the available steering contexts, then mean.
// `context_order` fixes tie-breaking (first declared wins).
SteerabilityResult steerability(
    const std::vector<std::string>& context_order,
    const std::map<std::string, std::map<std::string, OpinionDistribution>>& dists_by_context,
    const std::map<std::string, OpinionDistribution>& group_dists,
    const std::vector<Question>& questions);

// Sharpen a distribution: p_i proportional to p_i^(1/t), log-space with
// max-subtraction. Zero entries stay zero. Throws BadTemperatureError for
// t <= 0.
std::vector<double> temperature_scale(std::span<const double> probs, double t);

// Representativeness against temperature-sharpened group references.
double modal_representativeness(const std::map<std::string, OpinionDistribution>& model_dists,
                                const std::map<std::string, OpinionDistribution>& group_dists,
                                const std::vector<Question>& questions,
                                double t = 1e-3);

// Shannon entropy in nats, with 0*ln(0) = 0.
double entropy(std::span<const double> probs);

struct ConsistencyResult {
  double c = 0.0;
  std::string best_group;
  std::vector<std::string> per_topic_best;  // parallel to the topics input
};

// Fraction of topics whose best-aligned group matches the overall best group,
// where the overall best is the most frequent per-topic winner (topics
// weighted equally). `scores[g][t]` is group g's alignment on topic t. The
// result depends only on the per-topic argmax structure, so it is stable
// under any per-topic positive monotone rescaling of the scores. Argmax ties
// break by declaration order. Throws IncompleteMatrixError when the matrix is
// ragged or has non-finite entries.
ConsistencyResult consistency(const std::vector<std::string>& groups,
                              const std::vector<std::string>& topics,
                              const std::vector<std::vector<double>>& scores);

// Ratio of best to worst per-group score within one topic; >= 1.
// Throws DegenerateScoreError when any entry is <= 0.
double significance(std::span<const double> per_group_scores);

// Mean pairwise normalized Wasserstein distance across group distributions on
// one question; used to rank questions for the steering subset.
double contentiousness(const Question& question,
                       const std::vector<OpinionDistribution>& group_dists);

// ---- report payloads -------------------------------------------------------

struct GroupKey {
  std::string attribute;
  std::string group;
  auto operator<=>(const GroupKey&) const = default;
};

struct TopicBestGroup {
  std::string topic;
  std::string best_group;
  std::optional<double> alpha;  // absent when the ratio is degenerate
};

struct TotalMassStats {
  int n = 0;
  double mean = 0.0;
  double min = 0.0;
  double max = 0.0;
};

struct ProbeFailure {
  std::string qid;
  std::string context;
  std::string message;
};

// Everything computed for one model, ready for emission.
struct MetricReport {
  std::string model_id;
  std::optional<double> overall_r;
  std::map<GroupKey, double> group_r;        // default R per group, full question set
  std::map<GroupKey, double> modal_group_r;  // against sharpened references
  std::map<GroupKey, double> steer_default_r;  // default R on the steering subset
  std::map<GroupKey, SteerabilityResult> steer;
  std::map<std::string, ConsistencyResult> consistency_by_attribute;
  std::map<std::string, std::vector<TopicBestGroup>> topic_best_by_attribute;
  std::optional<double> mean_entropy;
  std::optional<double> refusal_rate;
  TotalMassStats mass_stats;
  std::optional<double> permuted_overall_r;               // robustness: permuted option order
  std::map<std::string, double> instruction_overall_r;    // robustness: variant -> R
  std::vector<ProbeFailure> failures;
};

}  // namespace opalign
