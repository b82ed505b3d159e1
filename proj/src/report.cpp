#include "opalign/report.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <memory>
#include <mutex>
#include <numeric>
#include <set>
#include <sstream>
#include <thread>

#include <json.hpp>

#include "opalign/errors.hpp"

namespace opalign {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

constexpr const char* kToolVersion = "0.1.0";

}  // namespace

std::string format_fixed(double value) {
  char buf[32];
  std::snprintf(buf, sizeof(buf), "%.6f", value);
  return buf;
}

std::string csv_escape(const std::string& field) {
  bool needs_quote = field.find_first_of(",\"\n\r") != std::string::npos;
  if (!needs_quote) return field;
  std::string out = "\"";
  for (char c : field) {
    if (c == '"') out += "\"\"";
    out += c;
  }
  out += "\"";
  return out;
}

// ---- configuration -----------------------------------------------------------

std::vector<GroupKey> default_steering_groups() {
  return {
      {"CREGION", "Northeast"},
      {"CREGION", "South"},
      {"EDUCATION", "College graduate/some postgrad"},
      {"EDUCATION", "Less than high school"},
      {"SEX", "Male"},
      {"SEX", "Female"},
      {"POLIDEOLOGY", "Liberal"},
      {"POLIDEOLOGY", "Conservative"},
      {"POLIDEOLOGY", "Moderate"},
      {"INCOME", "$100,000 or more"},
      {"INCOME", "Less than $30,000"},
      {"POLPARTY", "Democrat"},
      {"POLPARTY", "Republican"},
      {"RACE", "Black"},
      {"RACE", "White"},
      {"RACE", "Asian"},
      {"RACE", "Hispanic"},
      {"RELIG", "Protestant"},
      {"RELIG", "Jewish"},
      {"RELIG", "Hindu"},
      {"RELIG", "Atheist"},
      {"RELIG", "Muslim"},
  };
}

RunConfig RunConfig::from_json(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("config is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw ConfigError("config must be a JSON object");

  RunConfig config;
  try {
    for (const auto& p : doc.value("surveys", json::array()))
      config.survey_paths.push_back(p.get<std::string>());
    for (const auto& p : doc.value("microdata", json::array()))
      config.microdata_paths.push_back(p.get<std::string>());

    for (const auto& jm : doc.value("models", json::array())) {
      ModelConfig model;
      model.provider = jm.at("provider").get<std::string>();
      model.model_id = jm.at("model_id").get<std::string>();
      model.top_k = jm.value("top_k", 20);
      model.label_token_prefix = jm.value("label_token_prefix", std::string{});
      if (jm.contains("mimic")) {
        const auto& mm = jm["mimic"];
        model.mimic_attribute = mm.value("attribute", std::string{});
        model.mimic_group = mm.value("group", std::string{});
        model.mimic_steered_only = mm.value("steered_only", false);
      }
      if (jm.contains("fixed_logprobs")) {
        for (const auto& [label, lp] : jm["fixed_logprobs"].items())
          model.fixed_logprobs[label] = lp.get<double>();
      }
      if (jm.contains("http")) {
        const auto& jh = jm["http"];
        model.http.host = jh.value("host", std::string{});
        model.http.path = jh.value("path", std::string{"/v1/logprobs"});
        model.http.api_key_env = jh.value("api_key_env", std::string{});
        model.http.timeout_seconds = jh.value("timeout_seconds", 30);
      }
      config.models.push_back(std::move(model));
    }

    config.weighting_mode =
        weighting_mode_from_string(doc.value("weighting_mode", std::string{"survey_weights"}));

    for (const auto& jg : doc.value("steering_groups", json::array()))
      config.steering_groups.push_back(
          {jg.at("attribute").get<std::string>(), jg.at("group").get<std::string>()});

    if (doc.contains("contexts")) {
      config.contexts.clear();
      for (const auto& c : doc["contexts"])
        config.contexts.push_back(context_kind_from_string(c.get<std::string>()));
    }

    config.steering_subset_size = doc.value("steering_subset_size", 500);

    if (doc.contains("robustness")) {
      const auto& jr = doc["robustness"];
      config.robustness.permute = jr.value("permute", false);
      config.robustness.seed = jr.value("seed", std::uint64_t{0});
      for (const auto& v : jr.value("instruction_variants", json::array()))
        config.robustness.instruction_variants.push_back(
            instruction_variant_from_string(v.get<std::string>()));
    }

    config.output_dir = doc.value("output_dir", std::string{"out"});
    config.cache_path = doc.value("cache_path", std::string{});

    if (doc.contains("concurrency")) {
      const auto& jc = doc["concurrency"];
      config.concurrency.max_in_flight = jc.value("max_in_flight", 1);
      config.concurrency.requests_per_second = jc.value("requests_per_second", 0.0);
    }

    for (const auto& jb : doc.value("baseline_pairs", json::array())) {
      BaselinePair pair;
      pair.attribute = jb.at("attribute").get<std::string>();
      pair.group1 = jb.at("group1").get<std::string>();
      pair.group2 = jb.at("group2").get<std::string>();
      pair.topic = jb.value("topic", std::string{});
      config.baseline_pairs.push_back(std::move(pair));
    }

    if (doc.contains("context_templates")) {
      const auto& jt = doc["context_templates"];
      config.templates.bio = jt.value("bio", config.templates.bio);
      config.templates.portray = jt.value("portray", config.templates.portray);
      config.templates.version = jt.value("version", config.templates.version);
    }

    config.modal_temperature = doc.value("modal_temperature", 1e-3);
  } catch (const json::exception& e) {
    throw ConfigError(std::string("bad config field: ") + e.what());
  }
  return config;
}

RunConfig RunConfig::from_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return from_json(buf.str());
}

void RunConfig::validate() const {
  if (survey_paths.empty()) throw ConfigError("config lists no surveys");
  if (survey_paths.size() != microdata_paths.size())
    throw ConfigError("surveys and microdata lists must be parallel");
  for (const auto& p : survey_paths)
    if (!fs::exists(p)) throw ConfigError("survey file '" + p + "' does not exist");
  for (const auto& p : microdata_paths)
    if (!fs::exists(p)) throw ConfigError("microdata file '" + p + "' does not exist");

  std::set<std::string> ids;
  for (const auto& m : models) {
    if (m.model_id.empty()) throw ConfigError("model with empty model_id");
    if (!ids.insert(m.model_id).second)
      throw ConfigError("duplicate model_id '" + m.model_id + "'");
    if (m.provider != "mock-uniform" && m.provider != "mock-fixed" &&
        m.provider != "mock-mimic" && m.provider != "http")
      throw ConfigError("model '" + m.model_id + "': unknown provider '" + m.provider + "'");
    if (m.provider == "mock-mimic" && (m.mimic_attribute.empty() || m.mimic_group.empty()))
      throw ConfigError("model '" + m.model_id + "': mock-mimic needs mimic.attribute and mimic.group");
    if (m.provider == "mock-fixed" && m.fixed_logprobs.empty())
      throw ConfigError("model '" + m.model_id + "': mock-fixed needs fixed_logprobs");
    if (m.provider == "http" && m.http.host.empty())
      throw ConfigError("model '" + m.model_id + "': http provider needs http.host");
    if (m.top_k < 1) throw ConfigError("model '" + m.model_id + "': top_k must be >= 1");
  }
  std::set<ContextKind> seen_contexts;
  for (ContextKind kind : contexts) {
    if (kind == ContextKind::None)
      throw ConfigError("contexts must name steering kinds (qa, bio, portray)");
    if (!seen_contexts.insert(kind).second)
      throw ConfigError("duplicate steering context '" + to_string(kind) + "'");
  }
  if (steering_subset_size < 1) throw ConfigError("steering_subset_size must be >= 1");
  if (concurrency.max_in_flight < 1) throw ConfigError("max_in_flight must be >= 1");
  if (concurrency.requests_per_second < 0.0)
    throw ConfigError("requests_per_second must be >= 0");
  if (!(modal_temperature > 0.0)) throw ConfigError("modal_temperature must be positive");
  if (output_dir.empty()) throw ConfigError("output_dir must be set");
}

std::string RunConfig::config_hash() const {
  json doc;
  doc["surveys"] = survey_paths;
  doc["microdata"] = microdata_paths;
  doc["models"] = json::array();
  for (const auto& m : models) {
    json jm = {{"provider", m.provider}, {"model_id", m.model_id}, {"top_k", m.top_k}};
    if (!m.label_token_prefix.empty()) jm["label_token_prefix"] = m.label_token_prefix;
    if (!m.mimic_attribute.empty())
      jm["mimic"] = {{"attribute", m.mimic_attribute},
                     {"group", m.mimic_group},
                     {"steered_only", m.mimic_steered_only}};
    if (!m.fixed_logprobs.empty()) jm["fixed_logprobs"] = m.fixed_logprobs;
    if (!m.http.host.empty())
      jm["http"] = {{"host", m.http.host}, {"path", m.http.path},
                    {"api_key_env", m.http.api_key_env}};
    doc["models"].push_back(std::move(jm));
  }
  doc["weighting_mode"] = to_string(weighting_mode);
  json groups = json::array();
  for (const auto& g : steering_groups)
    groups.push_back({{"attribute", g.attribute}, {"group", g.group}});
  doc["steering_groups"] = std::move(groups);
  json contexts_json = json::array();
  for (auto c : contexts) contexts_json.push_back(to_string(c));
  doc["contexts"] = std::move(contexts_json);
  doc["steering_subset_size"] = steering_subset_size;
  doc["robustness"] = {{"permute", robustness.permute}, {"seed", robustness.seed}};
  json variants = json::array();
  for (auto v : robustness.instruction_variants) variants.push_back(to_string(v));
  doc["robustness"]["instruction_variants"] = std::move(variants);
  json pairs = json::array();
  for (const auto& b : baseline_pairs)
    pairs.push_back({{"attribute", b.attribute}, {"group1", b.group1},
                     {"group2", b.group2}, {"topic", b.topic}});
  doc["baseline_pairs"] = std::move(pairs);
  doc["templates"] = {{"bio", templates.bio}, {"portray", templates.portray},
                      {"version", templates.version}};
  doc["modal_temperature"] = modal_temperature;
  return stable_hash(doc.dump());
}

// ---- ingest --------------------------------------------------------------------

const ResponsePanel& Dataset::panel_for(const std::string& qid) const {
  auto it = survey_of_qid.find(qid);
  if (it == survey_of_qid.end()) throw InvariantError("unknown qid '" + qid + "'");
  return panels[it->second];
}

const Question& Dataset::question(const std::string& qid) const {
  auto it = survey_of_qid.find(qid);
  if (it == survey_of_qid.end()) throw InvariantError("unknown qid '" + qid + "'");
  for (const auto& q : surveys[it->second].questions)
    if (q.qid == qid) return q;
  throw InvariantError("unknown qid '" + qid + "'");
}

Dataset ingest(const RunConfig& config) {
  config.validate();
  Dataset dataset;
  std::vector<std::string> declared_topics;
  for (std::size_t i = 0; i < config.survey_paths.size(); ++i) {
    Survey survey = load_survey_file(config.survey_paths[i]);
    ResponsePanel panel = load_responses_file(config.microdata_paths[i], survey);
    for (const auto& q : survey.questions) {
      if (dataset.survey_of_qid.count(q.qid))
        throw InvariantError("duplicate qid '" + q.qid + "' across surveys");
      dataset.survey_of_qid[q.qid] = i;
      dataset.questions.push_back(q);
    }
    for (const auto& attr : survey.demographics) {
      const DemographicAttribute* existing = nullptr;
      for (const auto& a : dataset.demographics)
        if (a.name == attr.name) existing = &a;
      if (existing == nullptr) {
        dataset.demographics.push_back(attr);
      } else if (existing->groups != attr.groups) {
        throw ConfigError("attribute '" + attr.name + "' declared differently across surveys");
      }
    }
    declared_topics.insert(declared_topics.end(), survey.declared_topics.begin(),
                           survey.declared_topics.end());
    dataset.surveys.push_back(std::move(survey));
    dataset.panels.push_back(std::move(panel));
  }
  dataset.taxonomy = TopicTaxonomy::build(dataset.questions, declared_topics);
  return dataset;
}

// ---- human distributions ----------------------------------------------------------

HumanData build_human_distributions(const Dataset& dataset, const RunConfig& config) {
  HumanData humans;
  for (const auto& attr : dataset.demographics)
    for (const auto& group : attr.groups) humans.groups.push_back({attr.name, group});

  for (const auto& q : dataset.questions) {
    const ResponsePanel& panel = dataset.panel_for(q.qid);
    try {
      humans.overall.emplace(
          q.qid, aggregate_distribution(panel, q, GroupFilter::all(), config.weighting_mode));
    } catch (const EmptyCellError&) {
    } catch (const AllRefusedError&) {
    }
    for (const auto& key : humans.groups) {
      try {
        humans.by_group[key].emplace(
            q.qid, aggregate_distribution(panel, q,
                                          GroupFilter::group(key.attribute, key.group),
                                          config.weighting_mode));
      } catch (const EmptyCellError&) {
      } catch (const AllRefusedError&) {
      }
    }
  }

  auto mean_refusal = [](const std::map<std::string, OpinionDistribution>& dists)
      -> std::optional<double> {
    double total = 0.0;
    int n = 0;
    for (const auto& [qid, d] : dists) {
      if (d.refusal_rate) {
        total += *d.refusal_rate;
        ++n;
      }
    }
    if (n == 0) return std::nullopt;
    return total / n;
  };
  humans.overall_refusal_rate = mean_refusal(humans.overall);
  for (const auto& key : humans.groups) {
    auto it = humans.by_group.find(key);
    if (it == humans.by_group.end()) continue;
    if (auto r = mean_refusal(it->second)) humans.group_refusal_rate[key] = *r;
  }

  double entropy_total = 0.0;
  for (const auto& [qid, d] : humans.overall) entropy_total += entropy(d.probs);
  humans.mean_entropy = humans.overall.empty() ? 0.0 : entropy_total / humans.overall.size();
  return humans;
}

// ---- probing -------------------------------------------------------------------------

namespace {

// Blocking token bucket; 0 rate = uncapped.
class TokenBucket {
 public:
  explicit TokenBucket(double per_second) : rate_(per_second), tokens_(per_second) {}

  void acquire() {
    if (rate_ <= 0.0) return;
    std::unique_lock<std::mutex> lock(mu_);
    for (;;) {
      refill();
      if (tokens_ >= 1.0) {
        tokens_ -= 1.0;
        return;
      }
      lock.unlock();
      std::this_thread::sleep_for(std::chrono::duration<double>((1.0 - tokens_) / rate_));
      lock.lock();
    }
  }

 private:
  void refill() {
    auto now = std::chrono::steady_clock::now();
    tokens_ = std::min(rate_, tokens_ + rate_ * std::chrono::duration<double>(now - last_).count());
    last_ = now;
  }

  double rate_;
  double tokens_;
  std::chrono::steady_clock::time_point last_ = std::chrono::steady_clock::now();
  std::mutex mu_;
};

void parallel_for(std::size_t n, int workers, const std::function<void(std::size_t)>& fn) {
  if (n == 0) return;
  workers = std::min<int>(workers, static_cast<int>(n));
  if (workers <= 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> threads;
  threads.reserve(static_cast<std::size_t>(workers));
  for (int w = 0; w < workers; ++w) {
    threads.emplace_back([&] {
      for (;;) {
        std::size_t i = next.fetch_add(1);
        if (i >= n) return;
        fn(i);
      }
    });
  }
  for (auto& t : threads) t.join();
}

enum class JobKind { Default, Steered, Permuted, Instruction };

struct ProbeJob {
  JobKind kind = JobKind::Default;
  std::string qid;
  GroupKey group;            // Steered
  std::string context_name;  // Steered: "qa"/"bio"/"portray"; else label for errors
  std::string variant_name;  // Instruction
  PromptSpec spec;
};

std::unique_ptr<LogprobProvider> make_provider(const ModelConfig& model,
                                               const Dataset& dataset,
                                               const HumanData& humans) {
  if (model.provider == "mock-uniform") return std::make_unique<UniformProvider>();
  if (model.provider == "mock-fixed") return std::make_unique<FixedMapProvider>(model.fixed_logprobs);
  if (model.provider == "mock-mimic") {
    GroupKey key{model.mimic_attribute, model.mimic_group};
    bool resolves = false;
    for (const auto& attr : dataset.demographics)
      if (attr.name == key.attribute && attr.group_index(key.group)) resolves = true;
    if (!resolves)
      throw ConfigError("model '" + model.model_id + "': mimic group " + key.attribute + "=" +
                        key.group + " does not resolve against the loaded demographics");
    std::map<std::string, OpinionDistribution> targets;
    if (auto it = humans.by_group.find(key); it != humans.by_group.end()) targets = it->second;
    std::optional<std::string> trigger;
    if (model.mimic_steered_only) trigger = key.group;
    return std::make_unique<GroupMimicProvider>(dataset.questions, std::move(targets),
                                                std::move(trigger));
  }
  if (model.provider == "http") return std::make_unique<HttpLogprobProvider>(model.http);
  throw ConfigError("unknown provider '" + model.provider + "'");
}

std::vector<std::string> presented_labels(const PromptSpec& spec) {
  std::vector<std::string> labels;
  labels.reserve(spec.label_map.size());
  for (const auto& [label, idx] : spec.label_map) labels.push_back(label);
  return labels;
}

std::vector<std::string> non_refusal_labels(const PromptSpec& spec, const Question& q) {
  std::vector<std::string> labels;
  auto refusal = q.refusal_index();
  for (const auto& [label, idx] : spec.label_map)
    if (!refusal || idx != static_cast<int>(*refusal)) labels.push_back(label);
  return labels;
}

}  // namespace

ProbePhaseResult probe_models(const Dataset& dataset, const HumanData& humans,
                              const RunConfig& config, ProbeCache& cache) {
  ProbePhaseResult phase;

  // Resolve the steering list. Explicit entries must resolve; the built-in
  // default list is filtered to whatever the loaded surveys define.
  bool using_defaults = config.steering_groups.empty();
  std::vector<GroupKey> candidates =
      using_defaults ? default_steering_groups() : config.steering_groups;
  for (const auto& key : candidates) {
    bool resolves = false;
    for (const auto& attr : dataset.demographics)
      if (attr.name == key.attribute && attr.group_index(key.group)) resolves = true;
    if (resolves) {
      phase.steering_groups.push_back(key);
    } else if (!using_defaults) {
      throw ConfigError("steering group " + key.attribute + "=" + key.group +
                        " does not resolve against the loaded demographics");
    }
  }

  // Contentiousness-ranked steering subset.
  std::vector<std::pair<double, std::size_t>> ranked;
  for (std::size_t i = 0; i < dataset.questions.size(); ++i) {
    const Question& q = dataset.questions[i];
    std::vector<OpinionDistribution> dists;
    for (const auto& key : phase.steering_groups) {
      auto by_group = humans.by_group.find(key);
      if (by_group == humans.by_group.end()) continue;
      auto it = by_group->second.find(q.qid);
      if (it != by_group->second.end()) dists.push_back(it->second);
    }
    if (dists.size() < 2) continue;
    ranked.emplace_back(contentiousness(q, dists), i);
  }
  std::sort(ranked.begin(), ranked.end(), [](const auto& a, const auto& b) {
    if (a.first != b.first) return a.first > b.first;
    return a.second < b.second;  // survey order breaks ties
  });
  std::size_t subset_size =
      std::min<std::size_t>(static_cast<std::size_t>(config.steering_subset_size), ranked.size());
  for (std::size_t i = 0; i < subset_size; ++i)
    phase.steering_subset.push_back(dataset.questions[ranked[i].second].qid);

  std::map<std::string, const DemographicAttribute*> attr_by_name;
  for (const auto& attr : dataset.demographics) attr_by_name[attr.name] = &attr;

  TokenBucket bucket(config.concurrency.requests_per_second);

  for (const auto& model_config : config.models) {
    auto provider = make_provider(model_config, dataset, humans);
    ModelProbeData data;
    data.model_id = model_config.model_id;

    // Deterministic job list: defaults, steered subset, robustness runs.
    std::vector<ProbeJob> jobs;
    for (const auto& q : dataset.questions) {
      ProbeJob job;
      job.kind = JobKind::Default;
      job.qid = q.qid;
      job.context_name = "default";
      job.spec = build_prompt(q, SteeringContext{}, InstructionVariant::None,
                              identity_permutation(q.non_refusal_count()));
      jobs.push_back(std::move(job));
    }
    for (const auto& key : phase.steering_groups) {
      const DemographicAttribute* attr = attr_by_name.at(key.attribute);
      for (ContextKind kind : config.contexts) {
        SteeringContext context = make_context(kind, *attr, key.group, config.templates);
        for (const auto& qid : phase.steering_subset) {
          const Question& q = dataset.question(qid);
          ProbeJob job;
          job.kind = JobKind::Steered;
          job.qid = qid;
          job.group = key;
          job.context_name = to_string(kind);
          job.spec = build_prompt(q, context, InstructionVariant::None,
                                  identity_permutation(q.non_refusal_count()));
          jobs.push_back(std::move(job));
        }
      }
    }
    if (config.robustness.permute) {
      for (const auto& q : dataset.questions) {
        ProbeJob job;
        job.kind = JobKind::Permuted;
        job.qid = q.qid;
        job.context_name = "permuted";
        job.spec = build_prompt(
            q, SteeringContext{}, InstructionVariant::None,
            seeded_permutation(config.robustness.seed, q.qid, q.non_refusal_count()));
        jobs.push_back(std::move(job));
      }
    }
    for (InstructionVariant variant : config.robustness.instruction_variants) {
      for (const auto& qid : phase.steering_subset) {
        const Question& q = dataset.question(qid);
        ProbeJob job;
        job.kind = JobKind::Instruction;
        job.qid = qid;
        job.variant_name = to_string(variant);
        job.context_name = "instruction:" + job.variant_name;
        job.spec = build_prompt(q, SteeringContext{}, variant,
                                identity_permutation(q.non_refusal_count()));
        jobs.push_back(std::move(job));
      }
    }

    struct JobOutcome {
      std::optional<OpinionDistribution> dist;
      std::optional<double> mass;
      std::optional<ProbeFailure> failure;
    };
    std::vector<JobOutcome> outcomes(jobs.size());

    QueryOptions query_options;
    query_options.top_k = model_config.top_k;

    parallel_for(jobs.size(), config.concurrency.max_in_flight, [&](std::size_t i) {
      const ProbeJob& job = jobs[i];
      const Question& q = dataset.question(job.qid);
      try {
        std::string key = cache_key(model_config.model_id, job.spec.text, query_options.top_k,
                                    provider->params_fingerprint());
        if (!cache.lookup(key)) bucket.acquire();
        ProbeResult result =
            query_logprobs(*provider, job.spec, model_config.model_id, &cache, query_options);
        auto bounded = bound_missing_options(result, presented_labels(job.spec),
                                             model_config.label_token_prefix);
        Provenance provenance = Provenance::model(
            model_config.model_id,
            job.kind == JobKind::Steered
                ? job.context_name + ":" + job.group.attribute + "=" + job.group.group
                : job.context_name);
        outcomes[i].dist =
            extract_distribution(bounded.probs, q, job.spec.permutation, provenance);
        if (job.kind == JobKind::Default)
          outcomes[i].mass = total_assigned_mass(result, non_refusal_labels(job.spec, q),
                                                 model_config.label_token_prefix);
      } catch (const std::exception& e) {
        outcomes[i].failure = ProbeFailure{job.qid, job.context_name, e.what()};
      }
    });

    for (std::size_t i = 0; i < jobs.size(); ++i) {
      const ProbeJob& job = jobs[i];
      JobOutcome& outcome = outcomes[i];
      if (outcome.failure) {
        data.failures.push_back(std::move(*outcome.failure));
        continue;
      }
      switch (job.kind) {
        case JobKind::Default:
          data.default_dists.emplace(job.qid, std::move(*outcome.dist));
          if (outcome.mass) data.total_mass.push_back(*outcome.mass);
          break;
        case JobKind::Steered:
          data.steered[job.group][job.context_name].emplace(job.qid, std::move(*outcome.dist));
          break;
        case JobKind::Permuted:
          data.permuted_dists.emplace(job.qid, std::move(*outcome.dist));
          break;
        case JobKind::Instruction:
          data.instruction_dists[job.variant_name].emplace(job.qid, std::move(*outcome.dist));
          break;
      }
    }
    phase.provider_calls += provider->call_count();
    phase.models.push_back(std::move(data));
  }
  return phase;
}

// ---- metrics --------------------------------------------------------------------------

namespace {

std::vector<Question> subset_questions(const Dataset& dataset,
                                       const std::vector<std::string>& qids) {
  std::vector<Question> out;
  out.reserve(qids.size());
  for (const auto& qid : qids) out.push_back(dataset.question(qid));
  return out;
}

}  // namespace

std::vector<MetricReport> compute_metrics(const Dataset& dataset, const HumanData& humans,
                                          const ProbePhaseResult& probes,
                                          const RunConfig& config) {
  std::vector<MetricReport> reports;
  auto steer_qs = subset_questions(dataset, probes.steering_subset);
  auto topics = dataset.taxonomy.topics();
  std::vector<std::vector<Question>> topic_questions;
  topic_questions.reserve(topics.size());
  for (const auto& topic : topics)
    topic_questions.push_back(questions_for_topic(dataset.questions, topic, dataset.taxonomy));

  for (const auto& data : probes.models) {
    MetricReport report;
    report.model_id = data.model_id;
    report.failures = data.failures;

    if (!data.total_mass.empty()) {
      report.mass_stats.n = static_cast<int>(data.total_mass.size());
      report.mass_stats.mean =
          std::accumulate(data.total_mass.begin(), data.total_mass.end(), 0.0) /
          static_cast<double>(data.total_mass.size());
      auto [lo, hi] = std::minmax_element(data.total_mass.begin(), data.total_mass.end());
      report.mass_stats.min = *lo;
      report.mass_stats.max = *hi;
    }

    if (data.default_dists.empty()) {
      reports.push_back(std::move(report));
      continue;
    }

    try {
      report.overall_r = representativeness(data.default_dists, humans.overall, dataset.questions);
    } catch (const EmptySetError&) {
    }

    for (const auto& key : humans.groups) {
      auto by_group = humans.by_group.find(key);
      if (by_group == humans.by_group.end()) continue;
      try {
        report.group_r[key] =
            representativeness(data.default_dists, by_group->second, dataset.questions);
        report.modal_group_r[key] = modal_representativeness(
            data.default_dists, by_group->second, dataset.questions, config.modal_temperature);
      } catch (const EmptySetError&) {
      }
    }

    std::vector<std::string> context_names;
    for (ContextKind kind : config.contexts) context_names.push_back(to_string(kind));
    for (const auto& key : probes.steering_groups) {
      auto by_group = humans.by_group.find(key);
      if (by_group == humans.by_group.end()) continue;
      try {
        report.steer_default_r[key] =
            representativeness(data.default_dists, by_group->second, steer_qs);
      } catch (const EmptySetError&) {
      }
      auto steered_it = data.steered.find(key);
      if (steered_it == data.steered.end()) continue;
      try {
        report.steer[key] =
            steerability(context_names, steered_it->second, by_group->second, steer_qs);
      } catch (const EmptySetError&) {
      }
    }

    // Per-attribute topic matrices for consistency and per-topic best groups.
    for (const auto& attr : dataset.demographics) {
      std::vector<std::vector<std::optional<double>>> matrix(attr.groups.size());
      for (std::size_t g = 0; g < attr.groups.size(); ++g) {
        matrix[g].resize(topics.size());
        auto by_group = humans.by_group.find({attr.name, attr.groups[g]});
        for (std::size_t t = 0; t < topics.size(); ++t) {
          if (by_group == humans.by_group.end()) continue;
          try {
            matrix[g][t] =
                representativeness(data.default_dists, by_group->second, topic_questions[t]);
          } catch (const EmptySetError&) {
          }
        }
      }
      // Keep topics computable for every group so the matrix is complete.
      std::vector<std::string> usable_topics;
      std::vector<std::size_t> usable_index;
      for (std::size_t t = 0; t < topics.size(); ++t) {
        bool complete = true;
        for (std::size_t g = 0; g < attr.groups.size(); ++g)
          if (!matrix[g][t]) complete = false;
        if (complete) {
          usable_topics.push_back(topics[t]);
          usable_index.push_back(t);
        }
      }
      if (usable_topics.empty()) continue;

      std::vector<std::vector<double>> scores(attr.groups.size());
      for (std::size_t g = 0; g < attr.groups.size(); ++g)
        for (std::size_t t : usable_index) scores[g].push_back(*matrix[g][t]);

      report.consistency_by_attribute[attr.name] =
          consistency(attr.groups, usable_topics, scores);

      std::vector<TopicBestGroup> best_rows;
      for (std::size_t t = 0; t < usable_topics.size(); ++t) {
        std::vector<double> column(attr.groups.size());
        for (std::size_t g = 0; g < attr.groups.size(); ++g) column[g] = scores[g][t];
        TopicBestGroup row;
        row.topic = usable_topics[t];
        std::size_t best = 0;
        for (std::size_t g = 1; g < column.size(); ++g)
          if (column[g] > column[best]) best = g;
        row.best_group = attr.groups[best];
        try {
          row.alpha = significance(column);
        } catch (const DegenerateScoreError&) {
        }
        best_rows.push_back(std::move(row));
      }
      report.topic_best_by_attribute[attr.name] = std::move(best_rows);
    }

    double entropy_total = 0.0;
    for (const auto& [qid, d] : data.default_dists) entropy_total += entropy(d.probs);
    report.mean_entropy = entropy_total / static_cast<double>(data.default_dists.size());

    double refusal_total = 0.0;
    int refusal_n = 0;
    for (const auto& [qid, d] : data.default_dists) {
      if (d.refusal_rate) {
        refusal_total += *d.refusal_rate;
        ++refusal_n;
      }
    }
    if (refusal_n > 0) report.refusal_rate = refusal_total / refusal_n;

    if (config.robustness.permute && !data.permuted_dists.empty()) {
      try {
        report.permuted_overall_r =
            representativeness(data.permuted_dists, humans.overall, dataset.questions);
      } catch (const EmptySetError&) {
      }
    }
    if (!config.robustness.instruction_variants.empty()) {
      try {
        report.instruction_overall_r["standard"] =
            representativeness(data.default_dists, humans.overall, steer_qs);
      } catch (const EmptySetError&) {
      }
      for (const auto& [variant, dists] : data.instruction_dists) {
        try {
          report.instruction_overall_r[variant] =
              representativeness(dists, humans.overall, steer_qs);
        } catch (const EmptySetError&) {
        }
      }
    }

    reports.push_back(std::move(report));
  }
  return reports;
}

// ---- emission -------------------------------------------------------------------------

namespace {

void write_file(const std::string& path, const std::string& content) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot write '" + path + "'");
  out << content;
  if (!out) throw IoError("failed while writing '" + path + "'");
}

std::string group_column(const GroupKey& key) {
  return key.attribute + ":" + key.group;
}

}  // namespace

std::vector<std::string> emit_tables(const ReportBundle& bundle, const std::string& outdir) {
  fs::create_directories(outdir);
  std::vector<std::string> written;
  auto emit = [&](const std::string& name, const std::string& content) {
    std::string path = (fs::path(outdir) / name).string();
    write_file(path, content);
    written.push_back(path);
  };

  json manifest;
  manifest["config_hash"] = bundle.config_hash;
  manifest["tool_version"] = kToolVersion;
  manifest["templates_version"] = bundle.templates_version;
  manifest["models"] = json::array();
  for (const auto& r : bundle.reports) manifest["models"].push_back(r.model_id);
  manifest["groups"] = static_cast<int>(bundle.group_order.size());
  manifest["topics"] = bundle.topic_order;
  manifest["steering_groups"] = json::array();
  for (const auto& g : bundle.steering_groups)
    manifest["steering_groups"].push_back(group_column(g));
  manifest["steering_subset_size"] = bundle.steering_subset_count;
  manifest["permute"] = bundle.permute;
  manifest["permutation_seed"] = bundle.permutation_seed;
  manifest["instruction_variants"] = bundle.instruction_variants;
  manifest["warnings"] = bundle.warnings;

  if (bundle.reports.empty()) {
    json warned = manifest;
    auto warnings = bundle.warnings;
    warnings.push_back("no models configured; metric tables were not emitted");
    warned["warnings"] = warnings;
    emit("manifest.json", warned.dump(2) + "\n");
    return written;
  }

  // representativeness.csv: model x {overall, groups...}
  {
    std::ostringstream out;
    out << "model_id,overall";
    for (const auto& g : bundle.group_order) out << "," << csv_escape(group_column(g));
    out << "\n";
    for (const auto& r : bundle.reports) {
      out << csv_escape(r.model_id) << ",";
      if (r.overall_r) out << format_fixed(*r.overall_r);
      for (const auto& g : bundle.group_order) {
        out << ",";
        auto it = r.group_r.find(g);
        if (it != r.group_r.end()) out << format_fixed(it->second);
      }
      out << "\n";
    }
    emit("representativeness.csv", out.str());
  }

  // steerability.csv: model x steering group
  {
    std::ostringstream out;
    out << "model_id,attribute,group,default_r,steerability";
    std::vector<std::string> contexts;
    for (const auto& r : bundle.reports)
      for (const auto& [g, s] : r.steer)
        for (const auto& [ctx, mean] : s.per_context_mean)
          if (std::find(contexts.begin(), contexts.end(), ctx) == contexts.end())
            contexts.push_back(ctx);
    std::sort(contexts.begin(), contexts.end());
    for (const auto& ctx : contexts) out << ",mean_" << ctx;
    out << "\n";
    for (const auto& r : bundle.reports) {
      for (const auto& g : bundle.steering_groups) {
        auto steer_it = r.steer.find(g);
        auto default_it = r.steer_default_r.find(g);
        if (steer_it == r.steer.end() && default_it == r.steer_default_r.end()) continue;
        out << csv_escape(r.model_id) << "," << csv_escape(g.attribute) << ","
            << csv_escape(g.group) << ",";
        if (default_it != r.steer_default_r.end()) out << format_fixed(default_it->second);
        out << ",";
        if (steer_it != r.steer.end()) out << format_fixed(steer_it->second.s);
        for (const auto& ctx : contexts) {
          out << ",";
          if (steer_it != r.steer.end()) {
            auto m = steer_it->second.per_context_mean.find(ctx);
            if (m != steer_it->second.per_context_mean.end()) out << format_fixed(m->second);
          }
        }
        out << "\n";
      }
    }
    emit("steerability.csv", out.str());
  }

  // consistency.csv
  {
    std::ostringstream out;
    out << "model_id,attribute,consistency,best_group\n";
    for (const auto& r : bundle.reports) {
      for (const auto& attr : bundle.attribute_order) {
        auto it = r.consistency_by_attribute.find(attr);
        if (it == r.consistency_by_attribute.end()) continue;
        out << csv_escape(r.model_id) << "," << csv_escape(attr) << ","
            << format_fixed(it->second.c) << "," << csv_escape(it->second.best_group) << "\n";
      }
    }
    emit("consistency.csv", out.str());
  }

  // topic_best_group.csv
  {
    std::ostringstream out;
    out << "model_id,attribute,topic,best_group,alpha\n";
    for (const auto& r : bundle.reports) {
      for (const auto& attr : bundle.attribute_order) {
        auto it = r.topic_best_by_attribute.find(attr);
        if (it == r.topic_best_by_attribute.end()) continue;
        for (const auto& row : it->second) {
          out << csv_escape(r.model_id) << "," << csv_escape(attr) << ","
              << csv_escape(row.topic) << "," << csv_escape(row.best_group) << ",";
          if (row.alpha) out << format_fixed(*row.alpha);
          out << "\n";
        }
      }
    }
    emit("topic_best_group.csv", out.str());
  }

  // refusal.csv: humans first, then models
  {
    std::ostringstream out;
    out << "subject,refusal_rate\n";
    out << "human-overall,";
    if (bundle.humans.overall_refusal_rate)
      out << format_fixed(*bundle.humans.overall_refusal_rate);
    out << "\n";
    for (const auto& r : bundle.reports) {
      out << csv_escape(r.model_id) << ",";
      if (r.refusal_rate) out << format_fixed(*r.refusal_rate);
      out << "\n";
    }
    emit("refusal.csv", out.str());
  }

  // entropy.csv
  {
    std::ostringstream out;
    out << "subject,mean_entropy\n";
    out << "human-overall," << format_fixed(bundle.humans.mean_entropy) << "\n";
    for (const auto& r : bundle.reports) {
      out << csv_escape(r.model_id) << ",";
      if (r.mean_entropy) out << format_fixed(*r.mean_entropy);
      out << "\n";
    }
    emit("entropy.csv", out.str());
  }

  // diagnostics.csv: total assigned mass stats and failure counts
  {
    std::ostringstream out;
    out << "model_id,n_default_probes,mean_total_mass,min_total_mass,max_total_mass,n_failures\n";
    for (const auto& r : bundle.reports) {
      out << csv_escape(r.model_id) << "," << r.mass_stats.n << ",";
      if (r.mass_stats.n > 0)
        out << format_fixed(r.mass_stats.mean) << "," << format_fixed(r.mass_stats.min) << ","
            << format_fixed(r.mass_stats.max);
      else
        out << ",,";
      out << "," << r.failures.size() << "\n";
    }
    emit("diagnostics.csv", out.str());
  }

  // modal_representativeness.csv
  {
    std::ostringstream out;
    out << "model_id";
    for (const auto& g : bundle.group_order) out << "," << csv_escape(group_column(g));
    out << "\n";
    for (const auto& r : bundle.reports) {
      out << csv_escape(r.model_id);
      for (const auto& g : bundle.group_order) {
        out << ",";
        auto it = r.modal_group_r.find(g);
        if (it != r.modal_group_r.end()) out << format_fixed(it->second);
      }
      out << "\n";
    }
    emit("modal_representativeness.csv", out.str());
  }

  if (bundle.permute) {
    std::ostringstream out;
    out << "model_id,standard_r,permuted_r,delta\n";
    for (const auto& r : bundle.reports) {
      out << csv_escape(r.model_id) << ",";
      if (r.overall_r) out << format_fixed(*r.overall_r);
      out << ",";
      if (r.permuted_overall_r) out << format_fixed(*r.permuted_overall_r);
      out << ",";
      if (r.overall_r && r.permuted_overall_r)
        out << format_fixed(*r.permuted_overall_r - *r.overall_r);
      out << "\n";
    }
    emit("robustness_permutation.csv", out.str());
  }

  if (!bundle.instruction_variants.empty()) {
    std::ostringstream out;
    out << "model_id,variant,overall_r\n";
    std::vector<std::string> variant_rows = {"standard"};
    variant_rows.insert(variant_rows.end(), bundle.instruction_variants.begin(),
                        bundle.instruction_variants.end());
    for (const auto& r : bundle.reports) {
      for (const auto& variant : variant_rows) {
        out << csv_escape(r.model_id) << "," << variant << ",";
        auto it = r.instruction_overall_r.find(variant);
        if (it != r.instruction_overall_r.end()) out << format_fixed(it->second);
        out << "\n";
      }
    }
    emit("robustness_instructions.csv", out.str());
  }

  if (!bundle.baselines.empty()) {
    std::ostringstream out;
    out << "attribute,group1,group2,topic,alignment,skipped\n";
    for (const auto& row : bundle.baselines) {
      out << csv_escape(row.pair.attribute) << "," << csv_escape(row.pair.group1) << ","
          << csv_escape(row.pair.group2) << "," << csv_escape(row.pair.topic) << ","
          << format_fixed(row.value) << "," << row.skipped << "\n";
    }
    emit("baselines.csv", out.str());
  }

  bool any_failure = false;
  for (const auto& r : bundle.reports) any_failure = any_failure || !r.failures.empty();
  if (any_failure) {
    std::ostringstream out;
    out << "model_id,qid,context,message\n";
    for (const auto& r : bundle.reports)
      for (const auto& f : r.failures)
        out << csv_escape(r.model_id) << "," << csv_escape(f.qid) << ","
            << csv_escape(f.context) << "," << csv_escape(f.message) << "\n";
    emit("errors.csv", out.str());
  }

  emit("manifest.json", manifest.dump(2) + "\n");
  return written;
}

std::vector<std::string> emit_human_tables(const Dataset& dataset, const HumanData& humans,
                                           const RunConfig& config) {
  fs::create_directories(config.output_dir);
  std::vector<std::string> written;

  std::vector<OpinionDistribution> overall;
  for (const auto& q : dataset.questions) {
    auto it = humans.overall.find(q.qid);
    if (it != humans.overall.end()) overall.push_back(it->second);
  }
  std::string overall_path = (fs::path(config.output_dir) / "humans_overall.csv").string();
  write_file(overall_path, distributions_to_csv(overall));
  written.push_back(overall_path);

  std::vector<OpinionDistribution> by_group;
  for (const auto& key : humans.groups) {
    auto group_it = humans.by_group.find(key);
    if (group_it == humans.by_group.end()) continue;
    for (const auto& q : dataset.questions) {
      auto it = group_it->second.find(q.qid);
      if (it != group_it->second.end()) by_group.push_back(it->second);
    }
  }
  std::string groups_path = (fs::path(config.output_dir) / "humans_groups.csv").string();
  write_file(groups_path, distributions_to_csv(by_group));
  written.push_back(groups_path);
  return written;
}

namespace {

std::vector<BaselineRow> compute_baselines(const Dataset& dataset, const RunConfig& config) {
  std::vector<BaselineRow> rows;
  for (const auto& pair : config.baseline_pairs) {
    std::vector<Question> questions =
        pair.topic.empty()
            ? dataset.questions
            : questions_for_topic(dataset.questions, pair.topic, dataset.taxonomy);
    // The baseline operation works over a single panel; evaluate per survey
    // and combine by computed-question count.
    double weighted = 0.0;
    int computed = 0;
    int skipped = 0;
    for (std::size_t s = 0; s < dataset.surveys.size(); ++s) {
      std::vector<Question> local;
      for (const auto& q : questions)
        if (dataset.survey_of_qid.at(q.qid) == s) local.push_back(q);
      if (local.empty()) continue;
      try {
        BaselineResult result = group_alignment_baseline(
            dataset.panels[s], local, GroupFilter::group(pair.attribute, pair.group1),
            GroupFilter::group(pair.attribute, pair.group2), config.weighting_mode);
        int n = static_cast<int>(local.size()) - result.skipped;
        weighted += result.value * n;
        computed += n;
        skipped += result.skipped;
      } catch (const EmptyCellError&) {
        skipped += static_cast<int>(local.size());
      }
    }
    if (computed == 0) continue;  // surfaced through the warnings list by run()
    rows.push_back({pair, weighted / computed, skipped});
  }
  return rows;
}

}  // namespace

RunResult run(const RunConfig& config) {
  config.validate();
  Dataset dataset = ingest(config);
  HumanData humans = build_human_distributions(dataset, config);

  fs::create_directories(config.output_dir);
  std::string cache_path = config.cache_path.empty()
                               ? (fs::path(config.output_dir) / "probe_cache.jsonl").string()
                               : config.cache_path;
  ProbeCache cache(cache_path);

  ProbePhaseResult probes = probe_models(dataset, humans, config, cache);
  std::vector<MetricReport> reports = compute_metrics(dataset, humans, probes, config);

  ReportBundle bundle;
  bundle.reports = std::move(reports);
  bundle.humans = humans;
  bundle.group_order = humans.groups;
  for (const auto& attr : dataset.demographics) bundle.attribute_order.push_back(attr.name);
  bundle.topic_order = dataset.taxonomy.topics();
  bundle.steering_groups = probes.steering_groups;
  bundle.baselines = compute_baselines(dataset, config);
  bundle.config_hash = config.config_hash();
  bundle.permutation_seed = config.robustness.seed;
  bundle.permute = config.robustness.permute;
  for (auto v : config.robustness.instruction_variants)
    bundle.instruction_variants.push_back(to_string(v));
  bundle.templates_version = config.templates.version;
  bundle.steering_subset_count = static_cast<int>(probes.steering_subset.size());
  if (bundle.baselines.size() < config.baseline_pairs.size())
    bundle.warnings.push_back("some baseline pairs had no computable question and were skipped");
  for (const auto& r : bundle.reports)
    if (r.overall_r == std::nullopt && !r.failures.empty())
      bundle.warnings.push_back("model '" + r.model_id + "' produced no usable probe results");

  RunResult result;
  result.written_files = emit_human_tables(dataset, humans, config);
  auto table_files = emit_tables(bundle, config.output_dir);
  result.written_files.insert(result.written_files.end(), table_files.begin(), table_files.end());
  result.bundle = std::move(bundle);
  result.provider_calls = probes.provider_calls;
  return result;
}

}  // namespace opalign
