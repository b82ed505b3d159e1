#pragma once

#include <cstdint>
#include <map>
#include <memory>
#include <optional>
#include <string>
#include <vector>

#include "opalign/metrics.hpp"
#include "opalign/opinion.hpp"
#include "opalign/probe.hpp"
#include "opalign/survey.hpp"

namespace opalign {

struct ModelConfig {
  std::string provider;  // "mock-uniform" | "mock-fixed" | "mock-mimic" | "http"
  std::string model_id;
  int top_k = 20;
  // Scored-token policy: a label's logprob is read from the token
  // `label_token_prefix + label`, falling back to the bare label. Set to " "
  // for providers whose tokenizer emits a leading space.
  std::string label_token_prefix;

  // mock-mimic
  std::string mimic_attribute;
  std::string mimic_group;
  bool mimic_steered_only = false;

  // mock-fixed
  std::map<std::string, double> fixed_logprobs;

  // http
  HttpProviderConfig http;
};

struct RobustnessConfig {
  bool permute = false;
  std::uint64_t seed = 0;
  std::vector<InstructionVariant> instruction_variants;
};

struct ConcurrencyConfig {
  int max_in_flight = 1;
  double requests_per_second = 0.0;  // 0 = uncapped
};

struct BaselinePair {
  std::string attribute;
  std::string group1;
  std::string group2;
  std::string topic;  // empty = all questions
};

struct RunConfig {
  std::vector<std::string> survey_paths;
  std::vector<std::string> microdata_paths;  // parallel to survey_paths
  std::vector<ModelConfig> models;
  WeightingMode weighting_mode = WeightingMode::SurveyWeights;
  // Empty = the built-in default steering list, filtered to loaded attributes.
  std::vector<GroupKey> steering_groups;
  std::vector<ContextKind> contexts = {ContextKind::QA, ContextKind::Bio,
                                       ContextKind::Portray};
  int steering_subset_size = 500;
  RobustnessConfig robustness;
  std::string output_dir = "out";
  std::string cache_path;  // default: <output_dir>/probe_cache.jsonl
  ConcurrencyConfig concurrency;
  std::vector<BaselinePair> baseline_pairs;
  ContextTemplates templates;
  double modal_temperature = 1e-3;

  static RunConfig from_json(const std::string& json_text);
  static RunConfig from_file(const std::string& path);
  // Throws ConfigError for missing files or dangling references.
  void validate() const;
  std::string config_hash() const;
};

// The built-in default steering list (attribute, group) pairs.
std::vector<GroupKey> default_steering_groups();

// ---- pipeline stages ---------------------------------------------------------

struct Dataset {
  std::vector<Survey> surveys;
  std::vector<ResponsePanel> panels;  // parallel to surveys
  std::vector<Question> questions;    // merged across surveys, unique qids
  std::vector<DemographicAttribute> demographics;  // merged by name
  TopicTaxonomy taxonomy;
  std::map<std::string, std::size_t> survey_of_qid;

  const ResponsePanel& panel_for(const std::string& qid) const;
  const Question& question(const std::string& qid) const;
};

Dataset ingest(const RunConfig& config);

struct HumanData {
  std::map<std::string, OpinionDistribution> overall;  // qid -> distribution
  std::map<GroupKey, std::map<std::string, OpinionDistribution>> by_group;
  std::optional<double> overall_refusal_rate;
  std::map<GroupKey, double> group_refusal_rate;
  double mean_entropy = 0.0;
  std::vector<GroupKey> groups;  // declaration order across attributes
};

HumanData build_human_distributions(const Dataset& dataset, const RunConfig& config);

struct ModelProbeData {
  std::string model_id;
  std::map<std::string, OpinionDistribution> default_dists;  // qid ->
  // steering group -> context name -> qid -> distribution
  std::map<GroupKey, std::map<std::string, std::map<std::string, OpinionDistribution>>> steered;
  std::map<std::string, OpinionDistribution> permuted_dists;
  // instruction variant name -> qid -> distribution
  std::map<std::string, std::map<std::string, OpinionDistribution>> instruction_dists;
  std::vector<double> total_mass;  // per successful default probe
  std::vector<ProbeFailure> failures;
};

struct ProbePhaseResult {
  std::vector<ModelProbeData> models;
  std::vector<std::string> steering_subset;  // qids, contentiousness-ranked
  std::vector<GroupKey> steering_groups;     // resolved list actually used
  int provider_calls = 0;
};

ProbePhaseResult probe_models(const Dataset& dataset, const HumanData& humans,
                              const RunConfig& config, ProbeCache& cache);

std::vector<MetricReport> compute_metrics(const Dataset& dataset, const HumanData& humans,
                                          const ProbePhaseResult& probes,
                                          const RunConfig& config);

struct BaselineRow {
  BaselinePair pair;
  double value = 0.0;
  int skipped = 0;
};

struct ReportBundle {
  std::vector<MetricReport> reports;
  HumanData humans;
  std::vector<GroupKey> group_order;
  std::vector<std::string> attribute_order;
  std::vector<std::string> topic_order;
  std::vector<GroupKey> steering_groups;
  std::vector<BaselineRow> baselines;
  std::string config_hash;
  std::uint64_t permutation_seed = 0;
  bool permute = false;
  std::vector<std::string> instruction_variants;
  std::string templates_version;
  int steering_subset_count = 0;
  std::vector<std::string> warnings;
};

// Write the report tables under outdir and return the paths written:
// representativeness.csv, steerability.csv, consistency.csv,
// topic_best_group.csv, refusal.csv, entropy.csv, diagnostics.csv,
// manifest.json, plus modal/robustness/baseline tables when applicable.
std::vector<std::string> emit_tables(const ReportBundle& bundle, const std::string& outdir);

// Human distribution exports (the `humans` subcommand).
std::vector<std::string> emit_human_tables(const Dataset& dataset, const HumanData& humans,
                                           const RunConfig& config);

struct RunResult {
  ReportBundle bundle;
  std::vector<std::string> written_files;
  int provider_calls = 0;
};

// Full pipeline: ingest -> human distributions -> probe -> metrics -> emit.
// Partial probe failures are recorded per (model, question), never fatal.
RunResult run(const RunConfig& config);

// Fixed 6-decimal formatting used for every emitted float.
std::string format_fixed(double value);

std::string csv_escape(const std::string& field);

}  // namespace opalign
