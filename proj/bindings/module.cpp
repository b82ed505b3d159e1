#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "opalign/errors.hpp"
#include "opalign/metrics.hpp"
#include "opalign/opinion.hpp"
#include "opalign/probe.hpp"
#include "opalign/report.hpp"
#include "opalign/survey.hpp"

namespace py = pybind11;
using namespace opalign;

namespace {

py::dict report_to_dict(const MetricReport& report) {
  py::dict out;
  out["model_id"] = report.model_id;
  out["overall_r"] = report.overall_r;
  py::dict group_r;
  for (const auto& [key, value] : report.group_r)
    group_r[py::make_tuple(key.attribute, key.group)] = value;
  out["group_r"] = group_r;
  py::dict steer;
  for (const auto& [key, value] : report.steer)
    steer[py::make_tuple(key.attribute, key.group)] = value.s;
  out["steerability"] = steer;
  out["mean_entropy"] = report.mean_entropy;
  out["refusal_rate"] = report.refusal_rate;
  out["n_failures"] = report.failures.size();
  return out;
}

}  // namespace

PYBIND11_MODULE(_core, m) {
  m.doc() = "Opinion-alignment measurement core";

  // Translators run newest-first, so the base type goes in before the
  // specific ones.
  py::register_exception<Error>(m, "OpalignError");
  py::register_exception<SchemaError>(m, "SchemaError");
  py::register_exception<InvariantError>(m, "InvariantError");
  py::register_exception<UnknownTopicError>(m, "UnknownTopicError");
  py::register_exception<EmptyCellError>(m, "EmptyCellError");
  py::register_exception<AllRefusedError>(m, "AllRefusedError");
  py::register_exception<BadPermutationError>(m, "BadPermutationError");
  py::register_exception<SupportMismatchError>(m, "SupportMismatchError");
  py::register_exception<EmptySetError>(m, "EmptySetError");
  py::register_exception<BadTemperatureError>(m, "BadTemperatureError");
  py::register_exception<ConfigError>(m, "ConfigError");

  py::enum_<OptionKind>(m, "OptionKind")
      .value("ORDINAL", OptionKind::Ordinal)
      .value("HEDGE", OptionKind::Hedge)
      .value("REFUSAL", OptionKind::Refusal);

  py::class_<OptionSpec>(m, "OptionSpec")
      .def(py::init([](std::string label, std::string text, OptionKind kind) {
             return OptionSpec{std::move(label), std::move(text), kind};
           }),
           py::arg("label"), py::arg("text"), py::arg("kind") = OptionKind::Ordinal)
      .def_readwrite("label", &OptionSpec::label)
      .def_readwrite("text", &OptionSpec::text)
      .def_readwrite("kind", &OptionSpec::kind);

  py::class_<Question>(m, "Question")
      .def(py::init<>())
      .def_readwrite("qid", &Question::qid)
      .def_readwrite("text", &Question::text)
      .def_readwrite("options", &Question::options)
      .def_readwrite("topics", &Question::topics)
      .def_readwrite("survey_id", &Question::survey_id)
      .def("non_refusal_count", &Question::non_refusal_count)
      .def("has_refusal", &Question::has_refusal)
      .def("validate", &Question::validate);

  py::class_<DemographicAttribute>(m, "DemographicAttribute")
      .def(py::init<>())
      .def_readwrite("name", &DemographicAttribute::name)
      .def_readwrite("text", &DemographicAttribute::text)
      .def_readwrite("phrase", &DemographicAttribute::phrase)
      .def_readwrite("groups", &DemographicAttribute::groups);

  py::class_<Survey>(m, "Survey")
      .def_readonly("survey_id", &Survey::survey_id)
      .def_readonly("questions", &Survey::questions)
      .def_readonly("demographics", &Survey::demographics);

  py::class_<ResponsePanel>(m, "ResponsePanel")
      .def("__len__", [](const ResponsePanel& p) { return p.respondents.size(); });

  m.def("load_survey", &load_survey, py::arg("json_text"));
  m.def("load_survey_file", &load_survey_file, py::arg("path"));
  m.def("serialize_survey", &serialize_survey, py::arg("survey"));
  m.def("load_responses", &load_responses, py::arg("csv_text"), py::arg("survey"));
  m.def("load_responses_file", &load_responses_file, py::arg("path"), py::arg("survey"));
  m.def(
      "questions_for_topic",
      [](const std::vector<Question>& questions, const std::string& topic) {
        return questions_for_topic(questions, topic);
      },
      py::arg("questions"), py::arg("topic"));

  py::enum_<WeightingMode>(m, "WeightingMode")
      .value("SURVEY_WEIGHTS", WeightingMode::SurveyWeights)
      .value("UNIFORM", WeightingMode::Uniform);

  py::class_<GroupFilter>(m, "GroupFilter")
      .def_static("all", &GroupFilter::all)
      .def_static(
          "group",
          [](std::string attribute, std::string group) {
            return GroupFilter::group(std::move(attribute), std::move(group));
          },
          py::arg("attribute"), py::arg("group"));

  py::class_<OpinionDistribution>(m, "OpinionDistribution")
      .def_readonly("qid", &OpinionDistribution::qid)
      .def_readonly("probs", &OpinionDistribution::probs)
      .def_readonly("refusal_rate", &OpinionDistribution::refusal_rate)
      .def("provenance", [](const OpinionDistribution& d) { return d.provenance.to_string(); });

  m.def("aggregate_distribution", &aggregate_distribution, py::arg("panel"),
        py::arg("question"), py::arg("filter") = GroupFilter::all(),
        py::arg("mode") = WeightingMode::SurveyWeights);
  m.def("human_refusal_rate", &human_refusal_rate, py::arg("panel"), py::arg("questions"),
        py::arg("filter") = GroupFilter::all(),
        py::arg("mode") = WeightingMode::SurveyWeights);
  m.def(
      "group_alignment_baseline",
      [](const ResponsePanel& panel, const std::vector<Question>& questions,
         const GroupFilter& g1, const GroupFilter& g2, WeightingMode mode) {
        auto result = group_alignment_baseline(panel, questions, g1, g2, mode);
        return py::make_tuple(result.value, result.skipped);
      },
      py::arg("panel"), py::arg("questions"), py::arg("g1"), py::arg("g2"),
      py::arg("mode") = WeightingMode::SurveyWeights);

  m.def("ordinal_support",
        [](const Question& q) { return ordinal_support(q).values; }, py::arg("question"));
  m.def(
      "wasserstein_1d",
      [](const std::vector<double>& d1, const std::vector<double>& d2,
         const std::vector<double>& support) { return wasserstein_1d(d1, d2, support); },
      py::arg("d1"), py::arg("d2"), py::arg("support"));
  m.def(
      "alignment",
      [](const std::vector<std::tuple<std::vector<double>, std::vector<double>,
                                      std::vector<double>, int>>& raw) {
        std::vector<QuestionPair> pairs;
        for (const auto& [d1, d2, support, n] : raw)
          pairs.push_back({d1, d2, support, n});
        return alignment(pairs);
      },
      py::arg("pairs"),
      "Mean over (d1, d2, support, n) tuples of 1 - WD/(n-1).");
  m.def(
      "temperature_scale",
      [](const std::vector<double>& probs, double t) { return temperature_scale(probs, t); },
      py::arg("probs"), py::arg("t"));
  m.def(
      "entropy", [](const std::vector<double>& probs) { return entropy(probs); },
      py::arg("probs"));
  m.def(
      "consistency",
      [](const std::vector<std::string>& groups, const std::vector<std::string>& topics,
         const std::vector<std::vector<double>>& scores) {
        auto result = consistency(groups, topics, scores);
        return py::make_tuple(result.c, result.best_group, result.per_topic_best);
      },
      py::arg("groups"), py::arg("topics"), py::arg("scores"));
  m.def(
      "significance",
      [](const std::vector<double>& scores) { return significance(scores); },
      py::arg("per_group_scores"));
  m.def("contentiousness", &contentiousness, py::arg("question"), py::arg("group_dists"));

  py::enum_<ContextKind>(m, "ContextKind")
      .value("NONE", ContextKind::None)
      .value("QA", ContextKind::QA)
      .value("BIO", ContextKind::Bio)
      .value("PORTRAY", ContextKind::Portray);

  py::enum_<InstructionVariant>(m, "InstructionVariant")
      .value("NONE", InstructionVariant::None)
      .value("GENERAL", InstructionVariant::General)
      .value("EXAMPLE", InstructionVariant::Example);

  py::class_<SteeringContext>(m, "SteeringContext")
      .def(py::init<>())
      .def_readonly("kind", &SteeringContext::kind)
      .def_readonly("attribute", &SteeringContext::attribute)
      .def_readonly("group", &SteeringContext::group)
      .def_readonly("rendered_text", &SteeringContext::rendered_text);

  m.def(
      "make_context",
      [](ContextKind kind, const DemographicAttribute& attribute, const std::string& group) {
        return make_context(kind, attribute, group);
      },
      py::arg("kind"), py::arg("attribute"), py::arg("group"));
  m.def("instruction_text", &instruction_text, py::arg("variant"));

  py::class_<PromptSpec>(m, "PromptSpec")
      .def_readonly("qid", &PromptSpec::qid)
      .def_readonly("text", &PromptSpec::text)
      .def_readonly("permutation", &PromptSpec::permutation)
      .def_readonly("label_map", &PromptSpec::label_map);

  m.def("identity_permutation", &identity_permutation, py::arg("n"));
  m.def("seeded_permutation", &seeded_permutation, py::arg("seed"), py::arg("qid"),
        py::arg("n"));
  m.def("build_prompt", &build_prompt, py::arg("question"), py::arg("context"),
        py::arg("variant"), py::arg("permutation"));

  py::class_<ProbeResult>(m, "ProbeResult")
      .def(py::init([](std::map<std::string, double> logprobs, std::string model_id) {
             ProbeResult r;
             r.logprobs = std::move(logprobs);
             r.model_id = std::move(model_id);
             r.returned_top_k = static_cast<int>(r.logprobs.size());
             return r;
           }),
           py::arg("logprobs"), py::arg("model_id") = "mock")
      .def_readonly("logprobs", &ProbeResult::logprobs)
      .def_readonly("returned_top_k", &ProbeResult::returned_top_k);

  m.def(
      "bound_missing_options",
      [](const ProbeResult& result, const std::vector<std::string>& expected,
         const std::string& label_token_prefix) {
        auto bounded = bound_missing_options(result, expected, label_token_prefix);
        return py::make_tuple(bounded.probs, bounded.rescaled);
      },
      py::arg("result"), py::arg("expected_labels"), py::arg("label_token_prefix") = "");
  m.def(
      "extract_distribution",
      [](const std::map<std::string, double>& completed, const Question& question,
         const std::vector<int>& permutation, const std::string& model_id,
         const std::string& context) {
        return extract_distribution(completed, question, permutation,
                                    Provenance::model(model_id, context));
      },
      py::arg("completed_probs"), py::arg("question"), py::arg("permutation"),
      py::arg("model_id") = "model", py::arg("context") = "default");
  m.def("total_assigned_mass", &total_assigned_mass, py::arg("result"),
        py::arg("expected_labels"), py::arg("label_token_prefix") = "");

  m.def(
      "run",
      [](const std::string& config_path) {
        RunResult result = run(RunConfig::from_file(config_path));
        py::dict out;
        out["written_files"] = result.written_files;
        out["provider_calls"] = result.provider_calls;
        out["warnings"] = result.bundle.warnings;
        py::list reports;
        for (const auto& r : result.bundle.reports) reports.append(report_to_dict(r));
        out["reports"] = reports;
        return out;
      },
      py::arg("config_path"),
      "Run the full pipeline from a JSON config file; returns a result summary.");
}
