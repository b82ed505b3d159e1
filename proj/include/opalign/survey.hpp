#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <set>
#include <string>
#include <vector>

namespace opalign {

enum class OptionKind { Ordinal, Hedge, Refusal };

std::string to_string(OptionKind kind);
OptionKind option_kind_from_string(const std::string& s);

// One answer choice as presented in a survey question.
struct OptionSpec {
  std::string label;  // short token used in prompts, e.g. "A"
  std::string text;   // option wording
  OptionKind kind = OptionKind::Ordinal;
};

struct Question {
  std::string qid;
  std::string text;
  std::vector<OptionSpec> options;  // presentation order
  std::vector<std::string> topics;
  std::string survey_id;

  // Count of non-refusal options (the normalization constant for alignment).
  int non_refusal_count() const;
  // Count of ordinal options.
  int ordinal_count() const;
  bool has_refusal() const;
  bool has_hedge() const;
  std::optional<std::size_t> refusal_index() const;
  std::optional<std::size_t> hedge_index() const;
  std::optional<std::size_t> option_index(const std::string& label) const;

  // Throws InvariantError when the option structure is malformed.
  void validate() const;
};

struct DemographicAttribute {
  std::string name;
  // Question wording used when rendering the QA steering block. Optional in
  // the schema; a generic fallback is substituted when absent.
  std::string text;
  // Short noun phrase ("political party") used in BIO steering text; defaults
  // to the lowercased attribute name.
  std::string phrase;
  std::vector<std::string> groups;  // declaration order matters for tie-breaks

  std::optional<std::size_t> group_index(const std::string& group) const;
};

struct Respondent {
  std::string id;
  double weight = 1.0;
  std::map<std::string, std::string> demographics;  // attribute -> group
  std::map<std::string, std::string> answers;       // qid -> label; absent = MISSING

  std::optional<std::string> answer(const std::string& qid) const;
};

struct ResponsePanel {
  std::vector<Respondent> respondents;
};

struct Survey {
  std::string survey_id;
  std::vector<Question> questions;
  std::vector<DemographicAttribute> demographics;
  // Topics declared in the document beyond those tagged on questions; a topic
  // may legitimately have no questions yet.
  std::vector<std::string> declared_topics;

  const Question* find_question(const std::string& qid) const;
  const DemographicAttribute* find_attribute(const std::string& name) const;
};

// Parse a survey definition document. Throws SchemaError for malformed input
// and InvariantError (with qid and reason) for structural violations.
Survey load_survey(const std::string& json_text);
Survey load_survey_file(const std::string& path);

// Canonical JSON rendering; load_survey(serialize_survey(s)) is semantically
// equal to s.
std::string serialize_survey(const Survey& survey);

// Parse respondent microdata (delimited table, header row:
// respondent_id, weight, <attribute columns...>, <qid columns...>).
ResponsePanel load_responses(const std::string& csv_text, const Survey& survey);
ResponsePanel load_responses_file(const std::string& path, const Survey& survey);

// The set of known topics: everything tagged on a question plus anything the
// document declared explicitly.
class TopicTaxonomy {
 public:
  static TopicTaxonomy build(const Survey& survey);
  static TopicTaxonomy build(const std::vector<Question>& questions,
                             const std::vector<std::string>& declared = {});

  bool contains(const std::string& topic) const;
  std::vector<std::string> topics() const;  // sorted

 private:
  std::set<std::string> topics_;
};

// Questions whose topic set contains `topic`. A question may appear under
// several topics. Throws UnknownTopicError when the topic is outside the
// taxonomy; an in-taxonomy topic with no tagged questions yields an empty set.
std::vector<Question> questions_for_topic(const std::vector<Question>& questions,
                                          const std::string& topic,
                                          const TopicTaxonomy& taxonomy);
std::vector<Question> questions_for_topic(const std::vector<Question>& questions,
                                          const std::string& topic);

}  // namespace opalign
