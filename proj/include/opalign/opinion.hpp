#pragma once

#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "opalign/survey.hpp"

namespace opalign {

enum class WeightingMode { SurveyWeights, Uniform };

std::string to_string(WeightingMode mode);
WeightingMode weighting_mode_from_string(const std::string& s);

// Either the whole panel or one (attribute, group) slice of it.
class GroupFilter {
 public:
  static GroupFilter all();
  static GroupFilter group(std::string attribute, std::string group);

  bool is_all() const { return !selector_.has_value(); }
  const std::string& attribute() const { return selector_->first; }
  const std::string& group() const { return selector_->second; }
  bool matches(const Respondent& r) const;
  std::string describe() const;

 private:
  std::optional<std::pair<std::string, std::string>> selector_;
};

struct Provenance {
  enum class Kind { HumanOverall, HumanGroup, Model };
  Kind kind = Kind::HumanOverall;
  std::string attribute;  // HumanGroup
  std::string group;      // HumanGroup
  std::string model_id;   // Model
  std::string context;    // Model: "default", "qa", "bio", "portray", ...

  static Provenance human_overall();
  static Provenance human_group(std::string attribute, std::string group);
  static Provenance model(std::string model_id, std::string context);
  std::string to_string() const;
};

// Probability vector over a question's non-refusal options (survey order),
// with refusal mass tracked separately. refusal_rate is nullopt when the
// question has no refusal option.
struct OpinionDistribution {
  std::string qid;
  std::vector<double> probs;
  std::optional<double> refusal_rate;
  Provenance provenance;

  void validate() const;  // throws InvariantError
};

// Weighted aggregation of panel answers into an opinion distribution.
// Respondents with MISSING answers are excluded; refusal choosers contribute
// only to refusal_rate; probs are renormalized over the non-refusal mass.
// Throws EmptyCellError when nobody in the filter answered and
// AllRefusedError when everyone who answered refused.
OpinionDistribution aggregate_distribution(const ResponsePanel& panel,
                                           const Question& question,
                                           const GroupFilter& filter,
                                           WeightingMode mode);

// Unweighted mean of per-question refusal rates over questions that have a
// refusal option (each per-question rate is itself respondent-weighted).
// Questions nobody in the filter answered are skipped.
double human_refusal_rate(const ResponsePanel& panel,
                          const std::vector<Question>& questions,
                          const GroupFilter& filter,
                          WeightingMode mode = WeightingMode::SurveyWeights);

struct BaselineResult {
  double value = 0.0;  // alignment between the two groups, in [0,1]
  int skipped = 0;     // questions one of the groups never answered
};

// Human-vs-human alignment baseline between two demographic groups.
BaselineResult group_alignment_baseline(const ResponsePanel& panel,
                                        const std::vector<Question>& questions,
                                        const GroupFilter& g1,
                                        const GroupFilter& g2,
                                        WeightingMode mode = WeightingMode::SurveyWeights);

// Delimited export: qid, provenance, refusal_rate, p_1..p_N (rows padded to
// the widest question).
std::string distributions_to_csv(const std::vector<OpinionDistribution>& dists);

}  // namespace opalign
