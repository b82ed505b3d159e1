#include "opalign/probe.hpp"

#include <algorithm>
#include <cmath>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <limits>
#include <sstream>
#include <thread>

#include <httplib.h>
#include <json.hpp>

#include "opalign/errors.hpp"

namespace opalign {

using nlohmann::json;

std::string to_string(ContextKind kind) {
  switch (kind) {
    case ContextKind::None: return "default";
    case ContextKind::QA: return "qa";
    case ContextKind::Bio: return "bio";
    case ContextKind::Portray: return "portray";
  }
  return "default";
}

ContextKind context_kind_from_string(const std::string& s) {
  if (s == "default" || s == "none") return ContextKind::None;
  if (s == "qa") return ContextKind::QA;
  if (s == "bio") return ContextKind::Bio;
  if (s == "portray") return ContextKind::Portray;
  throw ConfigError("unknown steering context '" + s + "'");
}

std::string to_string(InstructionVariant variant) {
  switch (variant) {
    case InstructionVariant::None: return "none";
    case InstructionVariant::General: return "general";
    case InstructionVariant::Example: return "example";
  }
  return "none";
}

InstructionVariant instruction_variant_from_string(const std::string& s) {
  if (s == "none") return InstructionVariant::None;
  if (s == "general") return InstructionVariant::General;
  if (s == "example") return InstructionVariant::Example;
  throw ConfigError("unknown instruction variant '" + s + "'");
}

std::string instruction_text(InstructionVariant variant) {
  switch (variant) {
    case InstructionVariant::None:
      return {};
    case InstructionVariant::General:
      return "Please read the following multiple-choice question carefully and "
             "select ONE of the listed options.";
    case InstructionVariant::Example:
      return "Please read the multiple-choice question below carefully and select "
             "ONE of the listed options. Here is an example of the format:\n\n"
             "Question: Question_1\n"
             "A. Option_1\n"
             "B. Option_2\n"
             "C. Option_3\n"
             "Answer: C";
  }
  return {};
}

namespace {

std::string presented_label(std::size_t index) {
  if (index >= 26)
    throw InvariantError("cannot label more than 26 presented options");
  return std::string(1, static_cast<char>('A' + index));
}

std::string replace_all(std::string text, const std::string& from, const std::string& to) {
  std::size_t pos = 0;
  while ((pos = text.find(from, pos)) != std::string::npos) {
    text.replace(pos, from.size(), to);
    pos += to.size();
  }
  return text;
}

constexpr const char* kDefaultAttributeWording = "Which of these best describes you?";

}  // namespace

SteeringContext make_context(ContextKind kind, const DemographicAttribute& attribute,
                             const std::string& group, const ContextTemplates& templates) {
  SteeringContext ctx;
  ctx.kind = kind;
  if (kind == ContextKind::None) return ctx;

  ctx.attribute = attribute.name;
  ctx.group = group;
  auto group_idx = attribute.group_index(group);
  if (!group_idx)
    throw ConfigError("group '" + group + "' is not part of attribute '" + attribute.name + "'");

  switch (kind) {
    case ContextKind::QA: {
      // A prior multiple-choice exchange answering the demographic item.
      std::ostringstream out;
      out << "Question: "
          << (attribute.text.empty() ? kDefaultAttributeWording : attribute.text) << "\n";
      for (std::size_t i = 0; i < attribute.groups.size(); ++i)
        out << presented_label(i) << ". " << attribute.groups[i] << "\n";
      out << "Answer: " << presented_label(*group_idx);
      ctx.rendered_text = out.str();
      break;
    }
    case ContextKind::Bio:
      ctx.rendered_text =
          replace_all(replace_all(templates.bio, "{attribute}", attribute.phrase), "{group}", group);
      break;
    case ContextKind::Portray:
      ctx.rendered_text =
          replace_all(replace_all(templates.portray, "{attribute}", attribute.phrase), "{group}", group);
      break;
    case ContextKind::None:
      break;
  }
  if (ctx.rendered_text.find(group) == std::string::npos)
    throw InvariantError("steering context does not mention its group wording");
  return ctx;
}

std::string PromptSpec::presented_label_for(std::size_t original_index) const {
  for (const auto& [label, idx] : label_map)
    if (idx == static_cast<int>(original_index)) return label;
  return {};
}

std::vector<int> identity_permutation(int n) {
  std::vector<int> perm(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) perm[static_cast<std::size_t>(i)] = i;
  return perm;
}

namespace {

// SplitMix64; fixed algorithm so permutations do not depend on the platform's
// standard-library distributions.
struct SplitMix64 {
  std::uint64_t state;
  std::uint64_t next() {
    state += 0x9E3779B97F4A7C15ull;
    std::uint64_t z = state;
    z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ull;
    z = (z ^ (z >> 27)) * 0x94D049BB133111EBull;
    return z ^ (z >> 31);
  }
  // Uniform in [0, bound) by rejection.
  std::uint64_t bounded(std::uint64_t bound) {
    std::uint64_t threshold = (~bound + 1) % bound;  // 2^64 mod bound
    for (;;) {
      std::uint64_t r = next();
      if (r >= threshold) return r % bound;
    }
  }
};

std::uint64_t fnv1a(const std::string& payload) {
  std::uint64_t h = 1469598103934665603ull;
  for (unsigned char c : payload) {
    h ^= c;
    h *= 1099511628211ull;
  }
  return h;
}

}  // namespace

std::vector<int> seeded_permutation(std::uint64_t seed, const std::string& qid, int n) {
  auto perm = identity_permutation(n);
  SplitMix64 rng{seed ^ fnv1a(qid)};
  for (int i = n - 1; i > 0; --i) {
    auto j = static_cast<std::size_t>(rng.bounded(static_cast<std::uint64_t>(i) + 1));
    std::swap(perm[static_cast<std::size_t>(i)], perm[j]);
  }
  return perm;
}

std::string stable_hash(const std::string& payload) {
  std::uint64_t h = fnv1a(payload);
  char buf[17];
  std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
  return buf;
}

PromptSpec build_prompt(const Question& question, const SteeringContext& context,
                        InstructionVariant variant, const std::vector<int>& permutation) {
  const int n = question.non_refusal_count();
  if (static_cast<int>(permutation.size()) != n)
    throw BadPermutationError("permutation length " + std::to_string(permutation.size()) +
                              " does not match " + std::to_string(n) + " non-refusal options");
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (int p : permutation) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)])
      throw BadPermutationError("permutation is not a bijection over non-refusal positions");
    seen[static_cast<std::size_t>(p)] = true;
  }

  PromptSpec spec;
  spec.qid = question.qid;
  spec.context = context;
  spec.variant = variant;
  spec.permutation = permutation;

  // Presented order: permuted non-refusal options, then refusal (if any).
  std::vector<int> presented(permutation.begin(), permutation.end());
  if (auto refusal = question.refusal_index()) presented.push_back(static_cast<int>(*refusal));

  std::ostringstream out;
  if (context.kind != ContextKind::None) out << context.rendered_text << "\n\n";
  if (variant != InstructionVariant::None) out << instruction_text(variant) << "\n\n";
  out << "Question: " << question.text << "\n";
  for (std::size_t i = 0; i < presented.size(); ++i) {
    std::string label = presented_label(i);
    out << label << ". " << question.options[static_cast<std::size_t>(presented[i])].text << "\n";
    spec.label_map.emplace_back(std::move(label), presented[i]);
  }
  out << "Answer:";
  spec.text = out.str();
  return spec;
}

// ---- providers -----------------------------------------------------------------

ProviderResponse LogprobProvider::complete(const ProviderRequest& request) {
  calls_.fetch_add(1);
  ProviderResponse response = do_complete(request);
  // Log probabilities never exceed 0.
  for (auto& [token, lp] : response.logprobs) lp = std::min(lp, 0.0);
  return response;
}

ParsedPrompt parse_prompt(const std::string& prompt) {
  std::vector<std::string> lines;
  std::string line;
  std::istringstream in(prompt);
  while (std::getline(in, line)) lines.push_back(line);

  constexpr std::string_view kQuestionPrefix = "Question: ";
  std::size_t question_line = lines.size();
  for (std::size_t i = 0; i < lines.size(); ++i)
    if (lines[i].rfind(kQuestionPrefix, 0) == 0) question_line = i;
  if (question_line == lines.size())
    throw ProviderError("prompt has no question block");

  ParsedPrompt parsed;
  parsed.question_text = lines[question_line].substr(kQuestionPrefix.size());
  for (std::size_t i = 0; i < question_line; ++i) parsed.preamble += lines[i] + "\n";
  for (std::size_t i = question_line + 1; i < lines.size(); ++i) {
    const std::string& l = lines[i];
    if (l.rfind("Answer:", 0) == 0) break;
    auto dot = l.find(". ");
    if (dot == std::string::npos || dot == 0) continue;
    parsed.options.push_back({l.substr(0, dot), l.substr(dot + 2)});
  }
  return parsed;
}

FixedMapProvider::FixedMapProvider(std::map<std::string, double> logprobs)
    : logprobs_(std::move(logprobs)) {}

ProviderResponse FixedMapProvider::do_complete(const ProviderRequest&) {
  return {logprobs_};
}

ProviderResponse UniformProvider::do_complete(const ProviderRequest& request) {
  auto parsed = parse_prompt(request.prompt);
  if (parsed.options.empty()) throw ProviderError("prompt has no options to score");
  double lp = -std::log(static_cast<double>(parsed.options.size()));
  ProviderResponse response;
  for (const auto& opt : parsed.options) response.logprobs[opt.label] = lp;
  return response;
}

GroupMimicProvider::GroupMimicProvider(std::vector<Question> questions,
                                       std::map<std::string, OpinionDistribution> targets,
                                       std::optional<std::string> steer_trigger,
                                       std::map<std::string, OpinionDistribution> fallback)
    : questions_(std::move(questions)),
      targets_(std::move(targets)),
      steer_trigger_(std::move(steer_trigger)),
      fallback_(std::move(fallback)) {
  for (std::size_t i = 0; i < questions_.size(); ++i)
    by_text_.emplace(questions_[i].text, i);
}

ProviderResponse GroupMimicProvider::do_complete(const ProviderRequest& request) {
  auto parsed = parse_prompt(request.prompt);
  auto it = by_text_.find(parsed.question_text);
  if (it == by_text_.end())
    throw ProviderError("mimic provider does not know question '" + parsed.question_text + "'");
  const Question& question = questions_[it->second];

  bool steered = !steer_trigger_ ||
                 parsed.preamble.find(*steer_trigger_) != std::string::npos;
  const std::map<std::string, OpinionDistribution>& source = steered ? targets_ : fallback_;
  auto dist_it = source.find(question.qid);

  ProviderResponse response;
  if (dist_it == source.end()) {
    // No distribution configured for this branch: answer uniformly.
    double lp = -std::log(static_cast<double>(parsed.options.size()));
    for (const auto& opt : parsed.options) response.logprobs[opt.label] = lp;
    return response;
  }
  const OpinionDistribution& dist = dist_it->second;

  // Probability per original option; scores follow option text, so permuted
  // presentations permute the scores with them.
  std::map<std::string, double> prob_by_text;
  double refusal = dist.refusal_rate.value_or(0.0);
  std::size_t slot = 0;
  for (const auto& opt : question.options) {
    if (opt.kind == OptionKind::Refusal) {
      prob_by_text[opt.text] = refusal;
    } else {
      if (slot >= dist.probs.size())
        throw ProviderError("mimic distribution shorter than question options");
      prob_by_text[opt.text] = dist.probs[slot++] * (1.0 - refusal);
    }
  }

  for (const auto& opt : parsed.options) {
    auto p = prob_by_text.find(opt.text);
    if (p == prob_by_text.end())
      throw ProviderError("presented option text not in question '" + question.qid + "'");
    // Zero-probability tokens fall outside any top-k; omit them.
    if (p->second > 0.0) response.logprobs[opt.label] = std::log(p->second);
  }
  return response;
}

HttpLogprobProvider::HttpLogprobProvider(HttpProviderConfig config)
    : config_(std::move(config)) {}

std::string HttpLogprobProvider::params_fingerprint() const {
  return config_.host + config_.path;
}

ProviderResponse HttpLogprobProvider::do_complete(const ProviderRequest& request) {
  httplib::Client client(config_.host);
  client.set_connection_timeout(config_.timeout_seconds);
  client.set_read_timeout(config_.timeout_seconds);

  httplib::Headers headers;
  if (!config_.api_key_env.empty()) {
    const char* key = std::getenv(config_.api_key_env.c_str());
    if (key == nullptr || *key == '\0')
      throw AuthError("environment variable '" + config_.api_key_env + "' is not set");
    headers.emplace("Authorization", std::string("Bearer ") + key);
  }

  json body = {{"model_id", request.model_id},
               {"prompt", request.prompt},
               {"max_tokens", request.max_tokens},
               {"top_logprobs", request.top_logprobs}};
  auto res = client.Post(config_.path, headers, body.dump(), "application/json");
  if (!res)
    throw ProviderError("transport failure: " + httplib::to_string(res.error()),
                        /*transient=*/true);
  if (res->status == 401 || res->status == 403)
    throw AuthError("provider rejected credentials (status " + std::to_string(res->status) + ")");
  if (res->status == 429) throw RateLimitError("provider rate limit hit");
  if (res->status >= 500)
    throw ProviderError("provider server error " + std::to_string(res->status),
                        /*transient=*/true);
  if (res->status != 200)
    throw ProviderError("unexpected provider status " + std::to_string(res->status));

  try {
    json parsed = json::parse(res->body);
    ProviderResponse response;
    for (const auto& [token, lp] : parsed.at("logprobs").items())
      response.logprobs[token] = lp.get<double>();
    return response;
  } catch (const json::exception& e) {
    throw ProviderError(std::string("malformed provider response: ") + e.what());
  }
}

// ---- cache ------------------------------------------------------------------------

ProbeCache::ProbeCache(const std::string& path) : path_(path) {
  std::ifstream in(path);
  if (!in) return;  // nothing cached yet
  std::string line;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    try {
      json record = json::parse(line);
      ProbeResult result;
      result.model_id = record.at("model_id").get<std::string>();
      result.prompt_hash = record.at("prompt_hash").get<std::string>();
      result.returned_top_k = record.value("returned_top_k", 0);
      for (const auto& [token, lp] : record.at("logprobs").items())
        result.logprobs[token] = lp.get<double>();
      entries_[record.at("key").get<std::string>()] = std::move(result);
    } catch (const json::exception&) {
      // Torn tail line from an interrupted run; drop it and resume.
      continue;
    }
  }
}

std::optional<ProbeResult> ProbeCache::lookup(const std::string& key) const {
  std::lock_guard<std::mutex> lock(mu_);
  auto it = entries_.find(key);
  if (it == entries_.end()) return std::nullopt;
  return it->second;
}

void ProbeCache::put(const std::string& key, const ProbeResult& result) {
  std::lock_guard<std::mutex> lock(mu_);
  auto [it, inserted] = entries_.emplace(key, result);
  if (!inserted) return;
  if (path_.empty()) return;
  json record = {{"key", key},
                 {"model_id", result.model_id},
                 {"prompt_hash", result.prompt_hash},
                 {"logprobs", result.logprobs},
                 {"returned_top_k", result.returned_top_k},
                 {"timestamp", static_cast<std::int64_t>(std::time(nullptr))}};
  std::ofstream out(path_, std::ios::app);
  if (!out) throw IoError("cannot append to cache file '" + path_ + "'");
  out << record.dump() << "\n";
}

std::size_t ProbeCache::size() const {
  std::lock_guard<std::mutex> lock(mu_);
  return entries_.size();
}

std::string cache_key(const std::string& model_id, const std::string& prompt, int top_k,
                      const std::string& params_fingerprint) {
  return stable_hash(model_id + "\x1f" + prompt + "\x1f" + std::to_string(top_k) + "\x1f" +
                     params_fingerprint);
}

ProbeResult query_logprobs(LogprobProvider& provider, const PromptSpec& spec,
                           const std::string& model_id, ProbeCache* cache,
                           const QueryOptions& options) {
  std::string key = cache_key(model_id, spec.text, options.top_k, provider.params_fingerprint());
  if (cache != nullptr) {
    if (auto hit = cache->lookup(key)) return *hit;
  }

  ProviderRequest request{model_id, spec.text, 1, options.top_k};
  int attempt = 0;
  for (;;) {
    try {
      ProviderResponse response = provider.complete(request);
      ProbeResult result;
      result.prompt_hash = stable_hash(spec.text);
      result.model_id = model_id;
      result.logprobs = std::move(response.logprobs);
      result.returned_top_k = static_cast<int>(result.logprobs.size());
      if (cache != nullptr) cache->put(key, result);
      return result;
    } catch (const AuthError&) {
      throw;  // credentials do not heal with retries
    } catch (const ProviderError& e) {
      ++attempt;
      if (!e.transient || attempt >= options.max_retries) throw;
      std::this_thread::sleep_for(options.retry_backoff * (1 << (attempt - 1)));
    }
  }
}

// ---- extraction ----------------------------------------------------------------------

namespace {

// Scored-token lookup: prefer `prefix + label`, fall back to the bare label.
std::map<std::string, double>::const_iterator find_label_token(
    const std::map<std::string, double>& logprobs, const std::string& label,
    const std::string& prefix) {
  if (!prefix.empty()) {
    auto it = logprobs.find(prefix + label);
    if (it != logprobs.end()) return it;
  }
  return logprobs.find(label);
}

}  // namespace

BoundedMap bound_missing_options(const ProbeResult& result,
                                 const std::vector<std::string>& expected_labels,
                                 const std::string& label_token_prefix) {
  double p_assigned = 0.0;
  double p_min = std::numeric_limits<double>::infinity();
  for (const auto& [token, lp] : result.logprobs) {
    double p = std::exp(lp);
    p_assigned += p;
    p_min = std::min(p_min, p);
  }

  BoundedMap out;
  std::vector<std::string> missing;
  for (const auto& label : expected_labels) {
    auto it = find_label_token(result.logprobs, label, label_token_prefix);
    if (it != result.logprobs.end()) {
      out.probs[label] = std::exp(it->second);
    } else {
      missing.push_back(label);
    }
  }
  if (out.probs.empty())
    throw AllMissingError("none of the expected labels was returned");
  if (missing.empty()) return out;

  double p_missing = std::max(0.0, 1.0 - p_assigned);
  double bound = std::min(p_missing, p_min);
  double joint = bound * static_cast<double>(missing.size());
  double scale = 1.0;
  if (joint > p_missing && joint > 0.0) {
    // Several absent labels would jointly overdraw the missing mass.
    scale = p_missing / joint;
    out.rescaled = true;
  }
  for (const auto& label : missing) out.probs[label] = bound * scale;
  return out;
}

OpinionDistribution extract_distribution(const std::map<std::string, double>& completed_probs,
                                         const Question& question,
                                         const std::vector<int>& permutation,
                                         const Provenance& provenance) {
  const int n = question.non_refusal_count();
  if (static_cast<int>(permutation.size()) != n)
    throw BadPermutationError("permutation length does not match question options");
  std::vector<bool> seen(static_cast<std::size_t>(n), false);
  for (int p : permutation) {
    if (p < 0 || p >= n || seen[static_cast<std::size_t>(p)])
      throw BadPermutationError("permutation is not a bijection over non-refusal positions");
    seen[static_cast<std::size_t>(p)] = true;
  }

  // Work in log-space with max-subtraction; completed probabilities can be
  // tiny after bounding.
  std::vector<double> log_p(static_cast<std::size_t>(n));
  double max_log = -std::numeric_limits<double>::infinity();
  for (int i = 0; i < n; ++i) {
    auto it = completed_probs.find(presented_label(static_cast<std::size_t>(i)));
    if (it == completed_probs.end())
      throw InvariantError("completed map is missing non-refusal label '" +
                           presented_label(static_cast<std::size_t>(i)) + "'");
    log_p[static_cast<std::size_t>(i)] =
        it->second > 0.0 ? std::log(it->second) : -std::numeric_limits<double>::infinity();
    max_log = std::max(max_log, log_p[static_cast<std::size_t>(i)]);
  }

  double refusal_p = 0.0;
  if (question.has_refusal()) {
    auto it = completed_probs.find(presented_label(static_cast<std::size_t>(n)));
    if (it != completed_probs.end()) refusal_p = std::max(it->second, 0.0);
  }

  if (!std::isfinite(max_log))
    throw InvariantError("completed map assigns zero mass to every non-refusal option");

  double substantive = 0.0;
  std::vector<double> exp_p(static_cast<std::size_t>(n));
  for (int i = 0; i < n; ++i) {
    exp_p[static_cast<std::size_t>(i)] =
        std::isfinite(log_p[static_cast<std::size_t>(i)])
            ? std::exp(log_p[static_cast<std::size_t>(i)] - max_log)
            : 0.0;
    substantive += exp_p[static_cast<std::size_t>(i)];
  }

  OpinionDistribution dist;
  dist.qid = question.qid;
  dist.provenance = provenance;
  dist.probs.assign(static_cast<std::size_t>(n), 0.0);
  // Un-permute: presented position i holds the original option permutation[i].
  for (int i = 0; i < n; ++i)
    dist.probs[static_cast<std::size_t>(permutation[static_cast<std::size_t>(i)])] =
        exp_p[static_cast<std::size_t>(i)] / substantive;
  if (question.has_refusal()) {
    double total = substantive * std::exp(max_log) + refusal_p;
    dist.refusal_rate = total > 0.0 ? refusal_p / total : 0.0;
  }
  dist.validate();
  return dist;
}

double total_assigned_mass(const ProbeResult& result,
                           const std::vector<std::string>& expected_labels,
                           const std::string& label_token_prefix) {
  double total = 0.0;
  for (const auto& label : expected_labels) {
    auto it = find_label_token(result.logprobs, label, label_token_prefix);
    if (it != result.logprobs.end()) total += std::exp(it->second);
  }
  return total;
}

}  // namespace opalign
