#include "opalign/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>

#include "opalign/errors.hpp"

namespace opalign {

OrdinalSupport ordinal_support(const Question& question) {
  int k = question.ordinal_count();
  OrdinalSupport support;
  support.qid = question.qid;
  int next_ordinal = 1;
  for (const auto& opt : question.options) {
    switch (opt.kind) {
      case OptionKind::Ordinal:
        support.values.push_back(static_cast<double>(next_ordinal++));
        break;
      case OptionKind::Hedge:
        // Hedge sits at the mean of the ordinal keys.
        support.values.push_back((1.0 + k) / 2.0);
        break;
      case OptionKind::Refusal:
        break;  // excluded from the metric space
    }
  }
  return support;
}

double wasserstein_1d(std::span<const double> d1, std::span<const double> d2,
                      std::span<const double> support) {
  if (d1.size() != d2.size() || d1.size() != support.size())
    throw SupportMismatchError("distribution/support sizes differ: " +
                               std::to_string(d1.size()) + ", " + std::to_string(d2.size()) +
                               ", " + std::to_string(support.size()));
  if (support.empty()) throw SupportMismatchError("empty support");

  std::vector<std::size_t> order(support.size());
  std::iota(order.begin(), order.end(), 0);
  std::sort(order.begin(), order.end(),
            [&](std::size_t a, std::size_t b) { return support[a] < support[b]; });

  // Merge mass sitting on equal support values (a hedge can coincide with an
  // ordinal position when K is odd).
  std::vector<double> values;
  std::vector<double> m1, m2;
  for (std::size_t idx : order) {
    if (!values.empty() && std::abs(support[idx] - values.back()) < 1e-12) {
      m1.back() += d1[idx];
      m2.back() += d2[idx];
    } else {
      values.push_back(support[idx]);
      m1.push_back(d1[idx]);
      m2.push_back(d2[idx]);
    }
  }

  double wd = 0.0;
  double f1 = 0.0, f2 = 0.0;
  for (std::size_t i = 0; i + 1 < values.size(); ++i) {
    f1 += m1[i];
    f2 += m2[i];
    wd += std::abs(f1 - f2) * (values[i + 1] - values[i]);
  }
  return wd;
}

QuestionPair make_question_pair(const OpinionDistribution& a, const OpinionDistribution& b,
                                const Question& question) {
  if (a.qid != question.qid || b.qid != question.qid)
    throw SupportMismatchError("distributions do not share question '" + question.qid + "'");
  auto support = ordinal_support(question);
  if (a.probs.size() != support.values.size() || b.probs.size() != support.values.size())
    throw SupportMismatchError("distribution length does not match support for '" +
                               question.qid + "'");
  QuestionPair pair;
  pair.d1 = a.probs;
  pair.d2 = b.probs;
  pair.support = support.values;
  pair.n = question.non_refusal_count();
  return pair;
}

double question_similarity(const QuestionPair& pair) {
  if (pair.n < 2)
    throw InvariantError("similarity needs at least 2 answer choices");
  double wd = wasserstein_1d(pair.d1, pair.d2, pair.support);
  return 1.0 - wd / (pair.n - 1);
}

double alignment(std::span<const QuestionPair> pairs) {
  if (pairs.empty()) throw EmptySetError("alignment over an empty question set");
  double total = 0.0;
  for (const auto& pair : pairs) total += question_similarity(pair);
  return total / static_cast<double>(pairs.size());
}

double representativeness(const std::map<std::string, OpinionDistribution>& model_dists,
                          const std::map<std::string, OpinionDistribution>& reference_dists,
                          const std::vector<Question>& questions) {
  std::vector<QuestionPair> pairs;
  for (const auto& q : questions) {
    auto m = model_dists.find(q.qid);
    auto r = reference_dists.find(q.qid);
    if (m == model_dists.end() || r == reference_dists.end()) continue;
    pairs.push_back(make_question_pair(m->second, r->second, q));
  }
  if (pairs.empty())
    throw EmptySetError("no question present in both distribution sets");
  return alignment(pairs);
}

SteerabilityResult steerability(
    const std::vector<std::string>& context_order,
    const std::map<std::string, std::map<std::string, OpinionDistribution>>& dists_by_context,
    const std::map<std::string, OpinionDistribution>& group_dists,
    const std::vector<Question>& questions) {
  SteerabilityResult result;
  std::map<std::string, double> context_total;
  std::map<std::string, int> context_n;

  double total = 0.0;
  int scored = 0;
  for (const auto& q : questions) {
    auto g = group_dists.find(q.qid);
    if (g == group_dists.end()) {
      ++result.skipped_questions;
      continue;
    }
    bool any = false;
    double best = -std::numeric_limits<double>::infinity();
    std::string best_context;
    for (const auto& ctx : context_order) {
      auto by_qid = dists_by_context.find(ctx);
      const OpinionDistribution* dist = nullptr;
      if (by_qid != dists_by_context.end()) {
        auto it = by_qid->second.find(q.qid);
        if (it != by_qid->second.end()) dist = &it->second;
      }
      if (dist == nullptr) {
        ++result.missing_context[ctx];
        continue;
      }
      double sim = question_similarity(make_question_pair(*dist, g->second, q));
      context_total[ctx] += sim;
      context_n[ctx] += 1;
      // Strict comparison: ties break toward the earlier-declared context.
      if (!any || sim > best) {
        best = sim;
        best_context = ctx;
        any = true;
      }
    }
    if (!any) {
      ++result.skipped_questions;
      continue;
    }
    total += best;
    ++scored;
    result.argmax_count[best_context] += 1;
  }
  if (scored == 0) throw EmptySetError("no question has any steered distribution");
  result.s = total / scored;
  for (const auto& [ctx, sum] : context_total)
    result.per_context_mean[ctx] = sum / context_n[ctx];
  return result;
}

std::vector<double> temperature_scale(std::span<const double> probs, double t) {
  if (!(t > 0.0)) throw BadTemperatureError("temperature must be positive");

  std::vector<double> scaled(probs.size());
  double max_log = -std::numeric_limits<double>::infinity();
  for (std::size_t i = 0; i < probs.size(); ++i) {
    scaled[i] = probs[i] > 0.0 ? std::log(probs[i]) / t
                               : -std::numeric_limits<double>::infinity();
    max_log = std::max(max_log, scaled[i]);
  }
  if (!std::isfinite(max_log))
    throw BadTemperatureError("cannot scale an all-zero distribution");

  double total = 0.0;
  for (auto& v : scaled) {
    v = std::isfinite(v) ? std::exp(v - max_log) : 0.0;
    total += v;
  }
  for (auto& v : scaled) v /= total;
  return scaled;
}

double modal_representativeness(const std::map<std::string, OpinionDistribution>& model_dists,
                                const std::map<std::string, OpinionDistribution>& group_dists,
                                const std::vector<Question>& questions,
                                double t) {
  std::map<std::string, OpinionDistribution> sharpened;
  for (const auto& [qid, dist] : group_dists) {
    OpinionDistribution modal = dist;
    modal.probs = temperature_scale(dist.probs, t);
    sharpened.emplace(qid, std::move(modal));
  }
  return representativeness(model_dists, sharpened, questions);
}

double entropy(std::span<const double> probs) {
  double h = 0.0;
  for (double p : probs)
    if (p > 0.0) h -= p * std::log(p);
  return h;
}

namespace {

// First index attaining the maximum; earlier declaration wins ties.
std::size_t argmax_first(const std::vector<double>& values) {
  std::size_t best = 0;
  for (std::size_t i = 1; i < values.size(); ++i)
    if (values[i] > values[best]) best = i;
  return best;
}

}  // namespace

ConsistencyResult consistency(const std::vector<std::string>& groups,
                              const std::vector<std::string>& topics,
                              const std::vector<std::vector<double>>& scores) {
  if (groups.empty() || topics.empty())
    throw IncompleteMatrixError("consistency needs at least one group and one topic");
  if (scores.size() != groups.size())
    throw IncompleteMatrixError("score matrix has " + std::to_string(scores.size()) +
                                " rows for " + std::to_string(groups.size()) + " groups");
  for (const auto& row : scores) {
    if (row.size() != topics.size())
      throw IncompleteMatrixError("ragged score matrix");
    for (double v : row)
      if (!std::isfinite(v)) throw IncompleteMatrixError("non-finite score entry");
  }

  // Per-topic winners, topics weighted equally. The overall best group is the
  // most frequent winner: a function of the argmax structure alone, so any
  // per-topic monotone rescaling of the scores leaves the result unchanged.
  std::vector<int> wins(groups.size(), 0);
  std::vector<std::size_t> winner(topics.size());
  for (std::size_t t = 0; t < topics.size(); ++t) {
    std::vector<double> column(groups.size());
    for (std::size_t g = 0; g < groups.size(); ++g) column[g] = scores[g][t];
    winner[t] = argmax_first(column);
    ++wins[winner[t]];
  }
  std::size_t best = 0;
  for (std::size_t g = 1; g < groups.size(); ++g)
    if (wins[g] > wins[best]) best = g;  // ties break by declaration order

  ConsistencyResult result;
  result.best_group = groups[best];
  int matches = 0;
  for (std::size_t t = 0; t < topics.size(); ++t) {
    result.per_topic_best.push_back(groups[winner[t]]);
    if (winner[t] == best) ++matches;
  }
  result.c = static_cast<double>(matches) / static_cast<double>(topics.size());
  return result;
}

double significance(std::span<const double> per_group_scores) {
  if (per_group_scores.empty())
    throw DegenerateScoreError("no group scores");
  double lo = per_group_scores[0], hi = per_group_scores[0];
  for (double v : per_group_scores) {
    if (!(v > 0.0)) throw DegenerateScoreError("nonpositive group score");
    lo = std::min(lo, v);
    hi = std::max(hi, v);
  }
  return hi / lo;
}

double contentiousness(const Question& question,
                       const std::vector<OpinionDistribution>& group_dists) {
  if (group_dists.size() < 2)
    throw EmptyCellError("contentiousness needs at least two group distributions");
  auto support = ordinal_support(question);
  double n = question.non_refusal_count();
  double total = 0.0;
  int pairs = 0;
  for (std::size_t i = 0; i < group_dists.size(); ++i) {
    for (std::size_t j = i + 1; j < group_dists.size(); ++j) {
      double wd = wasserstein_1d(group_dists[i].probs, group_dists[j].probs, support.values);
      total += wd / (n - 1.0);
      ++pairs;
    }
  }
  return total / pairs;
}

}  // namespace opalign
