// Acceptance suite: one check per release criterion, one PASS/FAIL line each.
// Exit code is the number of failed criteria.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <map>
#include <random>
#include <sstream>
#include <string>
#include <vector>

#include "opalign/errors.hpp"
#include "opalign/metrics.hpp"
#include "opalign/opinion.hpp"
#include "opalign/probe.hpp"
#include "opalign/report.hpp"
#include "opalign/survey.hpp"
#include "test_helpers.hpp"
#include "transport_oracle.hpp"

using namespace opalign;
namespace fs = std::filesystem;

namespace {

struct Failure : std::runtime_error {
  using std::runtime_error::runtime_error;
};

void require(bool ok, const std::string& detail) {
  if (!ok) throw Failure(detail);
}

std::string fmt(double v) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.3g", v);
  return buf;
}

// ---- criterion 1: closed-form WD vs LP transport oracle ------------------------

std::string criterion_wasserstein_oracle() {
  std::mt19937_64 rng(101);
  std::uniform_int_distribution<int> n_options(2, 5);
  double max_diff = 0.0;
  const int trials = 1000;
  for (int trial = 0; trial < trials; ++trial) {
    int total = n_options(rng);
    bool hedge = (trial % 2 == 1) && total > 2;
    Question q = helpers::make_question("q", hedge ? total - 1 : total, hedge);
    auto support = ordinal_support(q).values;
    auto d1 = helpers::random_distribution(rng, support.size());
    auto d2 = helpers::random_distribution(rng, support.size());
    double closed = wasserstein_1d(d1, d2, support);
    double lp = oracle::wasserstein_lp(d1, d2, support);
    max_diff = std::max(max_diff, std::abs(closed - lp));
  }
  require(max_diff < 1e-9, "max |closed - LP| = " + fmt(max_diff));
  return std::to_string(trials) + " pairs, max diff " + fmt(max_diff);
}

// ---- criterion 2: alignment bounds and extremes ---------------------------------

std::string criterion_alignment_bounds() {
  Question q4 = helpers::make_question("q", 4);
  auto pair_of = [&](const Question& q, std::vector<double> a, std::vector<double> b) {
    return make_question_pair(helpers::make_dist(q.qid, std::move(a)),
                              helpers::make_dist(q.qid, std::move(b)), q);
  };
  std::vector<QuestionPair> same = {pair_of(q4, {0.1, 0.2, 0.3, 0.4}, {0.1, 0.2, 0.3, 0.4})};
  require(std::abs(alignment(same) - 1.0) < 1e-12, "identical inputs must score 1");
  std::vector<QuestionPair> extreme = {pair_of(q4, {1, 0, 0, 0}, {0, 0, 0, 1})};
  require(std::abs(alignment(extreme)) < 1e-12, "opposite extremes must score 0");

  std::mt19937_64 rng(202);
  std::uniform_int_distribution<int> n_options(2, 5);
  const int trials = 10000;
  for (int trial = 0; trial < trials; ++trial) {
    int total = n_options(rng);
    bool hedge = (trial % 3 == 0) && total > 2;
    Question q = helpers::make_question("q", hedge ? total - 1 : total, hedge);
    std::vector<QuestionPair> pairs = {
        pair_of(q, helpers::random_distribution(rng, q.options.size()),
                helpers::random_distribution(rng, q.options.size()))};
    double a = alignment(pairs);
    require(a >= -1e-12 && a <= 1.0 + 1e-12, "alignment out of [0,1]: " + fmt(a));
  }
  return std::to_string(trials) + " random cases in [0,1], extremes exact";
}

// ---- shared probing harness ------------------------------------------------------

std::map<std::string, OpinionDistribution> probe_all(LogprobProvider& provider,
                                                     const std::vector<Question>& questions,
                                                     const SteeringContext& context) {
  std::map<std::string, OpinionDistribution> dists;
  for (const auto& q : questions) {
    auto spec = build_prompt(q, context, InstructionVariant::None,
                             identity_permutation(q.non_refusal_count()));
    auto result = query_logprobs(provider, spec, "accept", nullptr);
    std::vector<std::string> labels;
    for (const auto& [label, idx] : spec.label_map) labels.push_back(label);
    auto bounded = bound_missing_options(result, labels);
    dists.emplace(q.qid, extract_distribution(bounded.probs, q, spec.permutation,
                                              Provenance::model("accept", "default")));
  }
  return dists;
}

// ---- criterion 3: self-representativeness identity ------------------------------

std::string criterion_self_representativeness() {
  // 20-question fixture with genuinely disagreeing groups.
  Survey survey = helpers::fixture_survey(20);
  ResponsePanel panel = helpers::fixture_panel(survey, 120);
  std::map<std::string, OpinionDistribution> alpha;
  for (const auto& q : survey.questions)
    alpha.emplace(q.qid, aggregate_distribution(panel, q, GroupFilter::group("faction", "alpha"),
                                                WeightingMode::SurveyWeights));

  GroupMimicProvider mimic(survey.questions, alpha);
  auto model_dists = probe_all(mimic, survey.questions, SteeringContext{});
  double self_r = representativeness(model_dists, alpha, survey.questions);
  require(std::abs(self_r - 1.0) < 1e-6, "mimic against its own group: R = " + fmt(self_r));

  // Uniform model against a point-mass group on 3 ordinal options: R = 0.5.
  Survey point_survey;
  point_survey.survey_id = "point";
  for (int i = 0; i < 5; ++i)
    point_survey.questions.push_back(helpers::make_question("p" + std::to_string(i), 3));
  std::map<std::string, OpinionDistribution> extreme_group;
  for (const auto& q : point_survey.questions)
    extreme_group.emplace(q.qid, helpers::make_dist(q.qid, {1.0, 0.0, 0.0}));
  UniformProvider uniform;
  auto uniform_dists = probe_all(uniform, point_survey.questions, SteeringContext{});
  double disjoint_r = representativeness(uniform_dists, extreme_group, point_survey.questions);
  require(std::abs(disjoint_r - 0.5) < 1e-9,
          "uniform vs extreme point mass: R = " + fmt(disjoint_r) + ", want 0.5");
  return "self R = 1 within 1e-6 on 20 questions; uniform-vs-extreme R = 0.5";
}

// ---- criterion 4: steerability contract ------------------------------------------

std::string criterion_steerability() {
  // Point-mass group so the unsteered closed form is exact.
  Survey survey;
  survey.survey_id = "steer";
  DemographicAttribute attr{"faction", "Which faction do you belong to?", "faction",
                            {"alpha", "beta"}};
  survey.demographics.push_back(attr);
  for (int i = 0; i < 8; ++i)
    survey.questions.push_back(helpers::make_question("s" + std::to_string(i), 3));
  std::map<std::string, OpinionDistribution> beta_group;
  for (const auto& q : survey.questions)
    beta_group.emplace(q.qid, helpers::make_dist(q.qid, {1.0, 0.0, 0.0}));

  // Returns beta's distribution only when the steering text names the group.
  GroupMimicProvider steerable(survey.questions, beta_group, "beta");

  auto default_dists = probe_all(steerable, survey.questions, SteeringContext{});
  double default_r = representativeness(default_dists, beta_group, survey.questions);
  require(std::abs(default_r - 0.5) < 1e-9,
          "unsteered R = " + fmt(default_r) + ", want closed form 0.5");

  std::map<std::string, std::map<std::string, OpinionDistribution>> by_context;
  for (ContextKind kind : {ContextKind::QA, ContextKind::Bio, ContextKind::Portray}) {
    auto context = make_context(kind, attr, "beta");
    by_context[to_string(kind)] = probe_all(steerable, survey.questions, context);
  }
  auto result = steerability({"qa", "bio", "portray"}, by_context, beta_group, survey.questions);
  require(std::abs(result.s - 1.0) < 1e-6, "steered S = " + fmt(result.s) + ", want 1.0");

  // Max dominates every per-context mean on random fixtures.
  std::mt19937_64 rng(404);
  std::uniform_int_distribution<int> n_questions(1, 10);
  std::uniform_int_distribution<int> n_options(2, 5);
  for (int trial = 0; trial < 200; ++trial) {
    std::vector<Question> questions;
    std::map<std::string, OpinionDistribution> group;
    std::map<std::string, std::map<std::string, OpinionDistribution>> contexts;
    int nq = n_questions(rng);
    for (int i = 0; i < nq; ++i) {
      Question q = helpers::make_question("r" + std::to_string(i), n_options(rng));
      group.emplace(q.qid, helpers::make_dist(q.qid, helpers::random_distribution(
                                                         rng, q.options.size())));
      for (const auto& ctx : {"qa", "bio", "portray"})
        contexts[ctx].emplace(q.qid, helpers::make_dist(q.qid, helpers::random_distribution(
                                                                   rng, q.options.size())));
      questions.push_back(std::move(q));
    }
    auto random_result = steerability({"qa", "bio", "portray"}, contexts, group, questions);
    for (const auto& [ctx, mean] : random_result.per_context_mean)
      require(random_result.s >= mean - 1e-12,
              "S below the " + ctx + " mean on a random fixture");
  }
  return "S = 1 when steered, default R = 0.5, max dominates means on 200 fixtures";
}

// ---- criterion 5: consistency ------------------------------------------------------

std::string criterion_consistency() {
  auto xxy = consistency({"X", "Y"}, {"t1", "t2", "t3"},
                         {{0.9, 0.8, 0.3}, {0.5, 0.5, 0.7}});
  require(xxy.best_group == "X" && std::abs(xxy.c - 2.0 / 3.0) < 1e-15,
          "argmax pattern [X,X,Y]: C = " + fmt(xxy.c) + ", want 2/3");
  auto single = consistency({"X", "Y"}, {"t"}, {{0.4}, {0.2}});
  require(std::abs(single.c - 1.0) < 1e-15, "single topic must give C = 1");
  auto dominant = consistency({"X", "Y"}, {"t1", "t2"}, {{0.9, 0.9}, {0.1, 0.2}});
  require(std::abs(dominant.c - 1.0) < 1e-15, "dominant group must give C = 1");

  std::mt19937_64 rng(505);
  std::uniform_real_distribution<double> unit(0.01, 1.0);
  std::uniform_real_distribution<double> scale(0.05, 20.0);
  std::uniform_real_distribution<double> shift(0.0, 3.0);
  std::uniform_int_distribution<int> n_groups(2, 6);
  std::uniform_int_distribution<int> n_topics(1, 8);
  const int trials = 1000;
  for (int trial = 0; trial < trials; ++trial) {
    int groups = n_groups(rng), topics = n_topics(rng);
    std::vector<std::string> group_names, topic_names;
    for (int g = 0; g < groups; ++g) group_names.push_back("g" + std::to_string(g));
    for (int t = 0; t < topics; ++t) topic_names.push_back("t" + std::to_string(t));
    std::vector<std::vector<double>> scores(static_cast<std::size_t>(groups),
                                            std::vector<double>(static_cast<std::size_t>(topics)));
    for (auto& row : scores)
      for (auto& v : row) v = unit(rng);
    auto base = consistency(group_names, topic_names, scores);
    auto rescaled = scores;
    for (int t = 0; t < topics; ++t) {
      double a = scale(rng), b = shift(rng);
      for (int g = 0; g < groups; ++g)
        rescaled[static_cast<std::size_t>(g)][static_cast<std::size_t>(t)] =
            a * scores[static_cast<std::size_t>(g)][static_cast<std::size_t>(t)] + b;
    }
    auto after = consistency(group_names, topic_names, rescaled);
    require(std::abs(after.c - base.c) < 1e-15 && after.best_group == base.best_group,
            "C changed under a per-topic rescaling");
  }
  return "hand-enumerated values exact; invariant over " + std::to_string(trials) +
         " rescalings";
}

// ---- criterion 6: temperature scaling ----------------------------------------------

std::string criterion_temperature() {
  std::mt19937_64 rng(606);
  for (int trial = 0; trial < 500; ++trial) {
    auto probs = helpers::random_distribution(rng, 5);
    auto out = temperature_scale(probs, 1.0);
    for (std::size_t i = 0; i < probs.size(); ++i)
      require(std::abs(out[i] - probs[i]) < 1e-12, "T=1 is not the identity");
  }
  auto sharp = temperature_scale(std::vector<double>{0.6, 0.4}, 1e-3);
  require(sharp[0] >= 1.0 - 1e-9, "T=1e-3 max entry = " + fmt(sharp[0]));
  for (double t : {0.01, 0.1, 0.5, 1.0, 2.0}) {
    for (int trial = 0; trial < 200; ++trial) {
      auto probs = helpers::random_distribution(rng, 4);
      auto out = temperature_scale(probs, t);
      auto argmax = [](const std::vector<double>& v) {
        return std::distance(v.begin(), std::max_element(v.begin(), v.end()));
      };
      require(argmax(out) == argmax(probs), "argmax changed at T = " + fmt(t));
    }
  }
  return "identity at T=1, collapse at T=1e-3, argmax preserved across T";
}

// ---- criterion 7: missing-mass bound -------------------------------------------------

std::string criterion_missing_mass() {
  auto result_with = [](std::map<std::string, double> lp) {
    ProbeResult r;
    r.logprobs = std::move(lp);
    r.returned_top_k = static_cast<int>(r.logprobs.size());
    return r;
  };
  auto first = bound_missing_options(
      result_with({{"B", std::log(0.5)}, {"C", std::log(0.3)}}), {"A", "B", "C"});
  require(std::abs(first.probs.at("A") - 0.2) < 1e-12,
          "worked example 1: got " + fmt(first.probs.at("A")));
  auto second = bound_missing_options(
      result_with({{"B", std::log(0.6)}, {"C", std::log(0.35)}}), {"A", "B", "C"});
  require(std::abs(second.probs.at("A") - 0.05) < 1e-12,
          "worked example 2: got " + fmt(second.probs.at("A")));

  std::mt19937_64 rng(707);
  std::uniform_int_distribution<int> n_tokens(2, 8);
  const int trials = 2000;
  for (int trial = 0; trial < trials; ++trial) {
    int total = n_tokens(rng);
    auto truth = helpers::random_distribution(rng, static_cast<std::size_t>(total), false);
    std::vector<std::string> expected;
    ProbeResult r;
    std::uniform_real_distribution<double> keep(0.0, 1.0);
    bool any_kept = false;
    for (int i = 0; i < total; ++i) {
      std::string label(1, static_cast<char>('A' + i));
      expected.push_back(label);
      if (keep(rng) < 0.6 || (i + 1 == total && !any_kept)) {
        r.logprobs[label] = std::log(truth[static_cast<std::size_t>(i)]);
        any_kept = true;
      }
    }
    auto bounded = bound_missing_options(r, expected);
    double sum = 0.0;
    double p_min = 1.0;
    for (const auto& [token, lp] : r.logprobs) p_min = std::min(p_min, std::exp(lp));
    for (const auto& [label, p] : bounded.probs) {
      sum += p;
      if (!r.logprobs.count(label))
        require(p <= p_min + 1e-12, "bounded entry above the smallest returned probability");
    }
    require(sum <= 1.0 + 1e-9, "bounded map total = " + fmt(sum));
  }
  return "worked examples exact; totals <= 1+1e-9 over " + std::to_string(trials) +
         " partial results";
}

// ---- criterion 8: human aggregation ---------------------------------------------------

std::string criterion_human_aggregation() {
  Question q = helpers::make_question("q", 2);
  ResponsePanel panel;
  auto add = [&](const std::string& id, double w, const std::string& label) {
    Respondent r;
    r.id = id;
    r.weight = w;
    r.answers["q"] = label;
    panel.respondents.push_back(std::move(r));
  };
  add("r1", 0.5, "A");
  add("r2", 0.3, "A");
  add("r3", 0.2, "B");
  auto dist = aggregate_distribution(panel, q, GroupFilter::all(), WeightingMode::SurveyWeights);
  require(std::abs(dist.probs[0] - 0.8) < 1e-12 && std::abs(dist.probs[1] - 0.2) < 1e-12,
          "weighted fixture gave [" + fmt(dist.probs[0]) + ", " + fmt(dist.probs[1]) + "]");

  std::mt19937_64 rng(808);
  Survey survey = helpers::fixture_survey(6);
  const int trials = 30;
  for (int trial = 0; trial < trials; ++trial) {
    std::uniform_int_distribution<int> size(4, 200);
    ResponsePanel random_panel = helpers::fixture_panel(survey, size(rng), rng());
    for (const auto& question : survey.questions) {
      OpinionDistribution overall;
      try {
        overall = aggregate_distribution(random_panel, question, GroupFilter::all(),
                                         WeightingMode::SurveyWeights);
      } catch (const Error&) {
        continue;
      }
      std::vector<double> mixture(overall.probs.size(), 0.0);
      double total_mass = 0.0;
      for (const auto& group : {"alpha", "beta"}) {
        double substantive = 0.0;
        for (const auto& r : random_panel.respondents) {
          if (r.demographics.at("faction") != group) continue;
          auto answer = r.answer(question.qid);
          if (!answer) continue;
          auto idx = question.option_index(*answer);
          if (question.options[*idx].kind == OptionKind::Refusal) continue;
          substantive += r.weight;
        }
        if (substantive == 0.0) continue;
        auto dist_g = aggregate_distribution(random_panel, question,
                                             GroupFilter::group("faction", group),
                                             WeightingMode::SurveyWeights);
        for (std::size_t i = 0; i < mixture.size(); ++i)
          mixture[i] += substantive * dist_g.probs[i];
        total_mass += substantive;
      }
      for (std::size_t i = 0; i < mixture.size(); ++i)
        require(std::abs(mixture[i] / total_mass - overall.probs[i]) < 1e-9,
                "group mixture differs from overall on " + question.qid);
    }
  }
  return "weighted fixture exact; mixture property held on " + std::to_string(trials) +
         " random panels";
}

// ---- criterion 9: refusal channel ------------------------------------------------------

std::string criterion_refusal_channel() {
  Question q = helpers::make_question("q", 3, false, true);
  std::map<std::string, double> completed = {{"A", std::exp(-1.0)},
                                             {"B", std::exp(-2.0)},
                                             {"C", std::exp(-3.0)},
                                             {"D", std::exp(-4.0)}};
  auto dist = extract_distribution(completed, q, identity_permutation(3),
                                   Provenance::model("m", "default"));
  // Independent softmax oracle.
  double z = std::exp(-1.0) + std::exp(-2.0) + std::exp(-3.0);
  double z_all = z + std::exp(-4.0);
  std::vector<double> oracle_probs = {std::exp(-1.0) / z, std::exp(-2.0) / z,
                                      std::exp(-3.0) / z};
  for (std::size_t i = 0; i < 3; ++i)
    require(std::abs(dist.probs[i] - oracle_probs[i]) < 1e-4,
            "probs diverge from the softmax oracle");
  require(std::abs(dist.probs[0] - 0.6652) < 1e-4 && std::abs(dist.probs[1] - 0.2447) < 1e-4 &&
              std::abs(dist.probs[2] - 0.0900) < 1e-4,
          "probs diverge from the worked values");
  require(dist.refusal_rate.has_value() &&
              std::abs(*dist.refusal_rate - std::exp(-4.0) / z_all) < 1e-4,
          "refusal rate diverges from the softmax oracle");

  // Human refusal fixture: weights 0.5/0.5, answers [A, REFUSED] -> rate 0.5.
  Question hq = helpers::make_question("hq", 2, false, true);
  ResponsePanel panel;
  Respondent r1, r2;
  r1.id = "r1";
  r1.weight = 0.5;
  r1.answers["hq"] = "A";
  r2.id = "r2";
  r2.weight = 0.5;
  r2.answers["hq"] = "C";
  panel.respondents = {r1, r2};
  auto human = aggregate_distribution(panel, hq, GroupFilter::all(),
                                      WeightingMode::SurveyWeights);
  require(human.refusal_rate.has_value() && std::abs(*human.refusal_rate - 0.5) < 1e-15,
          "human refusal fixture: rate = " + fmt(human.refusal_rate.value_or(-1)));
  require(std::abs(human.probs[0] - 1.0) < 1e-15, "human probs must renormalize to one-hot");
  return "extraction matches the softmax oracle; human refusal counts exact";
}

// ---- criterion 10: hermetic end-to-end run ----------------------------------------------

std::string criterion_hermetic_run() {
  fs::path dir = fs::temp_directory_path() / "opalign_acceptance_run";
  fs::remove_all(dir);
  fs::create_directories(dir);
  Survey survey = helpers::fixture_survey(20);
  ResponsePanel panel = helpers::fixture_panel(survey, 120);
  std::ofstream(dir / "survey.json") << serialize_survey(survey);
  std::ofstream(dir / "microdata.csv") << helpers::panel_to_csv(survey, panel);

  std::ostringstream config_json;
  config_json << R"({
    "surveys": [")" << (dir / "survey.json").string() << R"("],
    "microdata": [")" << (dir / "microdata.csv").string() << R"("],
    "output_dir": ")" << (dir / "out").string() << R"(",
    "steering_subset_size": 6,
    "steering_groups": [
      {"attribute": "faction", "group": "alpha"},
      {"attribute": "faction", "group": "beta"}
    ],
    "robustness": {"permute": true, "seed": 99, "instruction_variants": ["general", "example"]},
    "concurrency": {"max_in_flight": 4},
    "models": [
      {"provider": "mock-uniform", "model_id": "uniform-1", "top_k": 8},
      {"provider": "mock-fixed", "model_id": "fixed-1", "top_k": 8,
       "fixed_logprobs": {"A": -0.3, "B": -1.9}},
      {"provider": "mock-mimic", "model_id": "mimic-alpha", "top_k": 8,
       "mimic": {"attribute": "faction", "group": "alpha"}}
    ]
  })";
  RunConfig config = RunConfig::from_json(config_json.str());

  auto started = std::chrono::steady_clock::now();
  RunResult first = run(config);
  double elapsed =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - started).count();
  require(elapsed < 60.0, "run took " + fmt(elapsed) + "s");
  require(first.provider_calls > 0, "cold run should hit the providers");

  const std::vector<std::string> tables = {
      "representativeness.csv", "steerability.csv", "consistency.csv",
      "topic_best_group.csv",   "refusal.csv",      "entropy.csv",
      "diagnostics.csv"};
  fs::path out = dir / "out";
  for (const auto& name : tables)
    require(fs::exists(out / name), "missing table " + name);

  std::map<std::string, std::string> before;
  for (const auto& entry : fs::directory_iterator(out)) {
    if (entry.path().extension() == ".jsonl") continue;  // cache is not an output
    std::ifstream in(entry.path(), std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    before[entry.path().filename().string()] = buf.str();
  }

  RunResult second = run(config);
  require(second.provider_calls == 0,
          "warm rerun made " + std::to_string(second.provider_calls) + " provider calls");
  for (const auto& [name, content] : before) {
    std::ifstream in(out / name, std::ios::binary);
    std::ostringstream buf;
    buf << in.rdbuf();
    require(buf.str() == content, "output " + name + " changed across reruns");
  }
  return "all 7 tables, " + fmt(elapsed) + "s cold, warm rerun byte-identical with 0 calls";
}

// ---- criterion 11: permutation equivariance ------------------------------------------------

std::string criterion_permutation_equivariance() {
  std::mt19937_64 rng(1111);
  Survey survey = helpers::fixture_survey(12);
  std::map<std::string, OpinionDistribution> targets;
  for (const auto& q : survey.questions)
    targets.emplace(
        q.qid,
        helpers::make_dist(q.qid,
                           helpers::random_distribution(
                               rng, static_cast<std::size_t>(q.non_refusal_count())),
                           q.has_refusal() ? std::optional<double>(0.07) : std::nullopt));
  GroupMimicProvider provider(survey.questions, targets);

  auto extract_via = [&](const Question& q, const std::vector<int>& perm) {
    auto spec = build_prompt(q, SteeringContext{}, InstructionVariant::None, perm);
    auto result = query_logprobs(provider, spec, "m", nullptr);
    std::vector<std::string> labels;
    for (const auto& [label, idx] : spec.label_map) labels.push_back(label);
    return extract_distribution(bound_missing_options(result, labels).probs, q,
                                spec.permutation, Provenance::model("m", "default"));
  };

  const int trials = 100;
  double max_diff = 0.0;
  for (int trial = 0; trial < trials; ++trial) {
    const Question& q =
        survey.questions[static_cast<std::size_t>(trial) % survey.questions.size()];
    int n = q.non_refusal_count();
    auto base = extract_via(q, identity_permutation(n));
    auto permuted = extract_via(q, seeded_permutation(rng(), q.qid, n));
    for (std::size_t i = 0; i < base.probs.size(); ++i)
      max_diff = std::max(max_diff, std::abs(base.probs[i] - permuted.probs[i]));
    if (base.refusal_rate)
      max_diff = std::max(max_diff, std::abs(*base.refusal_rate - *permuted.refusal_rate));
  }
  require(max_diff < 1e-12, "max un-permuted difference = " + fmt(max_diff));
  return std::to_string(trials) + " permutations, max diff " + fmt(max_diff);
}

}  // namespace

int main() {
  struct Criterion {
    int id;
    const char* name;
    std::function<std::string()> check;
  };
  const std::vector<Criterion> criteria = {
      {1, "wasserstein LP-oracle equivalence", criterion_wasserstein_oracle},
      {2, "alignment bounds and extremes", criterion_alignment_bounds},
      {3, "self-representativeness identity", criterion_self_representativeness},
      {4, "steerability contract", criterion_steerability},
      {5, "consistency values and rescaling invariance", criterion_consistency},
      {6, "temperature scaling", criterion_temperature},
      {7, "missing-mass bound", criterion_missing_mass},
      {8, "human aggregation", criterion_human_aggregation},
      {9, "refusal channel", criterion_refusal_channel},
      {10, "hermetic end-to-end run", criterion_hermetic_run},
      {11, "permutation equivariance", criterion_permutation_equivariance},
  };

  int failures = 0;
  auto suite_start = std::chrono::steady_clock::now();
  for (const auto& criterion : criteria) {
    auto start = std::chrono::steady_clock::now();
    std::string detail;
    bool ok = true;
    try {
      detail = criterion.check();
    } catch (const std::exception& e) {
      ok = false;
      detail = e.what();
    }
    double elapsed =
        std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    if (criterion.id == 1 && elapsed >= 30.0) {
      ok = false;
      detail += "; exceeded the 30s budget";
    }
    std::printf("[%s] %2d. %s (%s; %.2fs)\n", ok ? "PASS" : "FAIL", criterion.id,
                criterion.name, detail.c_str(), elapsed);
    if (!ok) ++failures;
  }
  double total =
      std::chrono::duration<double>(std::chrono::steady_clock::now() - suite_start).count();
  std::printf("%d/%zu criteria passed in %.2fs\n",
              static_cast<int>(criteria.size()) - failures, criteria.size(), total);
  return failures;
}
