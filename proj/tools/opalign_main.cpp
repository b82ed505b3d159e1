#include <cstdio>
#include <filesystem>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "opalign/errors.hpp"
#include "opalign/report.hpp"

namespace {

using namespace opalign;

struct CliOverrides {
  std::string config_path;
  std::vector<std::string> surveys;
  std::vector<std::string> microdata;
  std::string output_dir;
  std::string cache_path;
  std::string weighting;
  int subset_size = -1;
  int permute = -1;  // -1 unset, 0 off, 1 on
  std::uint64_t seed = 0;
  bool seed_set = false;
};

RunConfig load_config(const CliOverrides& cli) {
  RunConfig config;
  if (!cli.config_path.empty()) config = RunConfig::from_file(cli.config_path);
  if (!cli.surveys.empty()) config.survey_paths = cli.surveys;
  if (!cli.microdata.empty()) config.microdata_paths = cli.microdata;
  if (!cli.output_dir.empty()) config.output_dir = cli.output_dir;
  if (!cli.cache_path.empty()) config.cache_path = cli.cache_path;
  if (!cli.weighting.empty()) config.weighting_mode = weighting_mode_from_string(cli.weighting);
  if (cli.subset_size > 0) config.steering_subset_size = cli.subset_size;
  if (cli.permute >= 0) config.robustness.permute = cli.permute == 1;
  if (cli.seed_set) config.robustness.seed = cli.seed;
  return config;
}

void print_dataset_summary(const Dataset& dataset) {
  std::size_t respondents = 0;
  for (const auto& p : dataset.panels) respondents += p.respondents.size();
  std::cout << "surveys:     " << dataset.surveys.size() << "\n";
  std::cout << "questions:   " << dataset.questions.size() << "\n";
  std::cout << "respondents: " << respondents << "\n";
  std::cout << "attributes:  " << dataset.demographics.size() << "\n";
  std::cout << "topics:      " << dataset.taxonomy.topics().size() << "\n";
}

int cmd_ingest(const CliOverrides& cli) {
  RunConfig config = load_config(cli);
  Dataset dataset = ingest(config);
  print_dataset_summary(dataset);
  std::cout << "ok\n";
  return 0;
}

int cmd_humans(const CliOverrides& cli) {
  RunConfig config = load_config(cli);
  Dataset dataset = ingest(config);
  HumanData humans = build_human_distributions(dataset, config);
  auto files = emit_human_tables(dataset, humans, config);
  std::cout << "human distributions: " << humans.overall.size() << " overall, "
            << humans.groups.size() << " groups\n";
  for (const auto& f : files) std::cout << "wrote " << f << "\n";
  return 0;
}

ProbeCache open_cache(const RunConfig& config) {
  std::string path = config.cache_path.empty()
                         ? (std::filesystem::path(config.output_dir) / "probe_cache.jsonl").string()
                         : config.cache_path;
  std::filesystem::create_directories(std::filesystem::path(path).parent_path());
  return ProbeCache(path);
}

int cmd_probe(const CliOverrides& cli) {
  RunConfig config = load_config(cli);
  Dataset dataset = ingest(config);
  HumanData humans = build_human_distributions(dataset, config);
  ProbeCache cache = open_cache(config);
  ProbePhaseResult probes = probe_models(dataset, humans, config, cache);
  std::cout << "provider calls: " << probes.provider_calls << "\n";
  std::cout << "cache entries:  " << cache.size() << "\n";
  for (const auto& m : probes.models)
    std::cout << m.model_id << ": " << m.default_dists.size() << " default distributions, "
              << m.failures.size() << " failures\n";
  return 0;
}

int cmd_metrics(const CliOverrides& cli) {
  RunConfig config = load_config(cli);
  Dataset dataset = ingest(config);
  HumanData humans = build_human_distributions(dataset, config);
  ProbeCache cache = open_cache(config);
  ProbePhaseResult probes = probe_models(dataset, humans, config, cache);
  auto reports = compute_metrics(dataset, humans, probes, config);
  for (const auto& r : reports) {
    std::cout << r.model_id << ":";
    if (r.overall_r) std::cout << " R_overall=" << format_fixed(*r.overall_r);
    if (r.mean_entropy) std::cout << " entropy=" << format_fixed(*r.mean_entropy);
    if (r.refusal_rate) std::cout << " refusal=" << format_fixed(*r.refusal_rate);
    std::cout << " failures=" << r.failures.size() << "\n";
    for (const auto& [attr, c] : r.consistency_by_attribute)
      std::cout << "  consistency[" << attr << "]=" << format_fixed(c.c)
                << " best=" << c.best_group << "\n";
  }
  return 0;
}

int run_pipeline(const CliOverrides& cli) {
  RunConfig config = load_config(cli);
  RunResult result = run(config);
  std::cout << "provider calls: " << result.provider_calls << "\n";
  for (const auto& f : result.written_files) std::cout << "wrote " << f << "\n";
  for (const auto& w : result.bundle.warnings) std::cout << "warning: " << w << "\n";
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Survey-grounded measurement of language-model opinion alignment"};
  app.require_subcommand(1);

  CliOverrides cli;
  app.add_option("--config", cli.config_path, "Run configuration (JSON)");
  app.add_option("--survey", cli.surveys, "Survey schema path (repeatable)");
  app.add_option("--microdata", cli.microdata, "Microdata path (repeatable)");
  app.add_option("--out", cli.output_dir, "Output directory");
  app.add_option("--cache", cli.cache_path, "Probe cache path");
  app.add_option("--weighting", cli.weighting, "survey_weights or uniform");
  app.add_option("--subset-size", cli.subset_size, "Steering subset size");
  auto* seed_opt = app.add_option("--seed", cli.seed, "Permutation seed");
  app.add_flag("--permute,!--no-permute",
               [&cli](std::int64_t count) { cli.permute = count > 0 ? 1 : 0; },
               "Enable the permuted-option robustness run");

  auto* ingest_cmd = app.add_subcommand("ingest", "Validate surveys and microdata");
  auto* humans_cmd = app.add_subcommand("humans", "Write human opinion distributions");
  auto* probe_cmd = app.add_subcommand("probe", "Query providers and fill the cache");
  auto* metrics_cmd = app.add_subcommand("metrics", "Compute alignment metrics");
  auto* report_cmd = app.add_subcommand("report", "Compute metrics and emit report tables");
  auto* run_cmd = app.add_subcommand("run", "Full pipeline: ingest through report");
  for (auto* sub : {ingest_cmd, humans_cmd, probe_cmd, metrics_cmd, report_cmd, run_cmd})
    sub->fallthrough();  // global flags may follow the subcommand

  CLI11_PARSE(app, argc, argv);
  cli.seed_set = seed_opt->count() > 0;

  try {
    if (ingest_cmd->parsed()) return cmd_ingest(cli);
    if (humans_cmd->parsed()) return cmd_humans(cli);
    if (probe_cmd->parsed()) return cmd_probe(cli);
    if (metrics_cmd->parsed()) return cmd_metrics(cli);
    if (report_cmd->parsed() || run_cmd->parsed()) return run_pipeline(cli);
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
