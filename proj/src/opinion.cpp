#include "opalign/opinion.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <sstream>

#include "opalign/errors.hpp"
#include "opalign/metrics.hpp"

namespace opalign {

std::string to_string(WeightingMode mode) {
  return mode == WeightingMode::SurveyWeights ? "survey_weights" : "uniform";
}

WeightingMode weighting_mode_from_string(const std::string& s) {
  if (s == "survey_weights") return WeightingMode::SurveyWeights;
  if (s == "uniform") return WeightingMode::Uniform;
  throw ConfigError("unknown weighting mode '" + s + "'");
}

GroupFilter GroupFilter::all() { return GroupFilter{}; }

GroupFilter GroupFilter::group(std::string attribute, std::string group) {
  GroupFilter f;
  f.selector_ = {std::move(attribute), std::move(group)};
  return f;
}

bool GroupFilter::matches(const Respondent& r) const {
  if (!selector_) return true;
  auto it = r.demographics.find(selector_->first);
  return it != r.demographics.end() && it->second == selector_->second;
}

std::string GroupFilter::describe() const {
  if (!selector_) return "ALL";
  return selector_->first + "=" + selector_->second;
}

Provenance Provenance::human_overall() { return Provenance{Kind::HumanOverall, {}, {}, {}, {}}; }

Provenance Provenance::human_group(std::string attribute, std::string group) {
  Provenance p;
  p.kind = Kind::HumanGroup;
  p.attribute = std::move(attribute);
  p.group = std::move(group);
  return p;
}

Provenance Provenance::model(std::string model_id, std::string context) {
  Provenance p;
  p.kind = Kind::Model;
  p.model_id = std::move(model_id);
  p.context = std::move(context);
  return p;
}

std::string Provenance::to_string() const {
  switch (kind) {
    case Kind::HumanOverall: return "human-overall";
    case Kind::HumanGroup: return "human-group(" + attribute + "=" + group + ")";
    case Kind::Model: return "model(" + model_id + "," + context + ")";
  }
  return "?";
}

void OpinionDistribution::validate() const {
  double total = 0.0;
  for (double p : probs) {
    if (!(p >= 0.0 && p <= 1.0 + 1e-12))
      throw InvariantError("distribution for '" + qid + "': probability out of [0,1]");
    total += p;
  }
  if (std::abs(total - 1.0) > 1e-9)
    throw InvariantError("distribution for '" + qid + "': probabilities sum to " +
                         std::to_string(total));
  if (refusal_rate && (*refusal_rate < 0.0 || *refusal_rate > 1.0 + 1e-12))
    throw InvariantError("distribution for '" + qid + "': refusal rate out of [0,1]");
}

OpinionDistribution aggregate_distribution(const ResponsePanel& panel,
                                           const Question& question,
                                           const GroupFilter& filter,
                                           WeightingMode mode) {
  // Option index -> slot in the non-refusal probability vector.
  std::vector<int> slot(question.options.size(), -1);
  int n = 0;
  for (std::size_t i = 0; i < question.options.size(); ++i)
    if (question.options[i].kind != OptionKind::Refusal) slot[i] = n++;

  std::vector<double> mass(static_cast<std::size_t>(n), 0.0);
  double refusal_mass = 0.0;
  double answered_mass = 0.0;
  bool any_answer = false;

  for (const auto& r : panel.respondents) {
    if (!filter.matches(r)) continue;
    auto answer = r.answer(question.qid);
    if (!answer) continue;  // MISSING: excluded from this question entirely
    auto idx = question.option_index(*answer);
    if (!idx) throw UnknownLabelError(question.qid, *answer);
    any_answer = true;
    double w = (mode == WeightingMode::SurveyWeights) ? r.weight : 1.0;
    answered_mass += w;
    if (question.options[*idx].kind == OptionKind::Refusal) {
      refusal_mass += w;
    } else {
      mass[static_cast<std::size_t>(slot[*idx])] += w;
    }
  }

  if (!any_answer || answered_mass <= 0.0)
    throw EmptyCellError("no respondent in " + filter.describe() + " answered '" +
                         question.qid + "'");

  double substantive_mass = answered_mass - refusal_mass;
  if (substantive_mass <= 0.0)
    throw AllRefusedError("every respondent in " + filter.describe() + " refused '" +
                          question.qid + "'");

  OpinionDistribution dist;
  dist.qid = question.qid;
  dist.provenance = filter.is_all()
                        ? Provenance::human_overall()
                        : Provenance::human_group(filter.attribute(), filter.group());
  dist.probs.resize(mass.size());
  for (std::size_t i = 0; i < mass.size(); ++i) dist.probs[i] = mass[i] / substantive_mass;
  if (question.has_refusal()) dist.refusal_rate = refusal_mass / answered_mass;
  dist.validate();
  return dist;
}

double human_refusal_rate(const ResponsePanel& panel,
                          const std::vector<Question>& questions,
                          const GroupFilter& filter,
                          WeightingMode mode) {
  bool any_refusal_option = false;
  double total = 0.0;
  int computed = 0;
  for (const auto& q : questions) {
    if (!q.has_refusal()) continue;
    any_refusal_option = true;
    try {
      auto dist = aggregate_distribution(panel, q, filter, mode);
      total += dist.refusal_rate.value_or(0.0);
      ++computed;
    } catch (const AllRefusedError&) {
      total += 1.0;
      ++computed;
    } catch (const EmptyCellError&) {
      // nobody in the filter answered; skip
    }
  }
  if (!any_refusal_option)
    throw NoRefusalOptionError("no question has a refusal option");
  if (computed == 0)
    throw EmptyCellError("no refusal-bearing question was answered in " + filter.describe());
  return total / computed;
}

BaselineResult group_alignment_baseline(const ResponsePanel& panel,
                                        const std::vector<Question>& questions,
                                        const GroupFilter& g1,
                                        const GroupFilter& g2,
                                        WeightingMode mode) {
  std::vector<QuestionPair> pairs;
  BaselineResult result;
  for (const auto& q : questions) {
    try {
      auto d1 = aggregate_distribution(panel, q, g1, mode);
      auto d2 = aggregate_distribution(panel, q, g2, mode);
      pairs.push_back(make_question_pair(d1, d2, q));
    } catch (const EmptyCellError&) {
      ++result.skipped;
    } catch (const AllRefusedError&) {
      ++result.skipped;
    }
  }
  if (pairs.empty())
    throw EmptyCellError("no question is computable for both groups");
  result.value = alignment(pairs);
  return result;
}

namespace {

std::string fixed6(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", v);
  return buf;
}

}  // namespace

std::string distributions_to_csv(const std::vector<OpinionDistribution>& dists) {
  std::size_t max_n = 0;
  for (const auto& d : dists) max_n = std::max(max_n, d.probs.size());

  std::ostringstream out;
  out << "qid,provenance,refusal_rate";
  for (std::size_t i = 1; i <= max_n; ++i) out << ",p_" << i;
  out << "\n";
  for (const auto& d : dists) {
    out << d.qid << "," << d.provenance.to_string() << ",";
    if (d.refusal_rate) out << fixed6(*d.refusal_rate);
    for (std::size_t i = 0; i < max_n; ++i) {
      out << ",";
      if (i < d.probs.size()) out << fixed6(d.probs[i]);
    }
    out << "\n";
  }
  return out.str();
}

}  // namespace opalign
