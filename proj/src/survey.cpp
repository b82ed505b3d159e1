#include "opalign/survey.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <sstream>
#include <unordered_set>

#include <json.hpp>

#include "opalign/errors.hpp"

namespace opalign {

using nlohmann::json;

std::string to_string(OptionKind kind) {
  switch (kind) {
    case OptionKind::Ordinal: return "ordinal";
    case OptionKind::Hedge: return "hedge";
    case OptionKind::Refusal: return "refusal";
  }
  return "ordinal";
}

OptionKind option_kind_from_string(const std::string& s) {
  if (s == "ordinal") return OptionKind::Ordinal;
  if (s == "hedge") return OptionKind::Hedge;
  if (s == "refusal") return OptionKind::Refusal;
  throw SchemaError("unknown option kind '" + s + "'");
}

int Question::non_refusal_count() const {
  int n = 0;
  for (const auto& o : options)
    if (o.kind != OptionKind::Refusal) ++n;
  return n;
}

int Question::ordinal_count() const {
  int k = 0;
  for (const auto& o : options)
    if (o.kind == OptionKind::Ordinal) ++k;
  return k;
}

bool Question::has_refusal() const { return refusal_index().has_value(); }
bool Question::has_hedge() const { return hedge_index().has_value(); }

std::optional<std::size_t> Question::refusal_index() const {
  for (std::size_t i = 0; i < options.size(); ++i)
    if (options[i].kind == OptionKind::Refusal) return i;
  return std::nullopt;
}

std::optional<std::size_t> Question::hedge_index() const {
  for (std::size_t i = 0; i < options.size(); ++i)
    if (options[i].kind == OptionKind::Hedge) return i;
  return std::nullopt;
}

std::optional<std::size_t> Question::option_index(const std::string& label) const {
  for (std::size_t i = 0; i < options.size(); ++i)
    if (options[i].label == label) return i;
  return std::nullopt;
}

void Question::validate() const {
  auto fail = [this](const std::string& reason) {
    throw InvariantError("question '" + qid + "': " + reason);
  };
  if (qid.empty()) fail("empty qid");
  if (topics.empty()) fail("topics must be non-empty");

  std::unordered_set<std::string> labels;
  int refusals = 0;
  int hedges = 0;
  for (const auto& o : options) {
    if (o.label.empty()) fail("option with empty label");
    if (!labels.insert(o.label).second) fail("duplicate option label '" + o.label + "'");
    if (o.kind == OptionKind::Refusal) ++refusals;
    if (o.kind == OptionKind::Hedge) ++hedges;
  }
  if (refusals > 1) fail("at most one refusal option is allowed");
  if (hedges > 1) fail("at most one hedge option is allowed");
  if (refusals == 1 && options.back().kind != OptionKind::Refusal)
    fail("refusal option must be last");
  if (hedges == 1) {
    // The hedge, when present, is the last non-refusal option.
    std::size_t last_non_refusal = options.size() - 1;
    if (refusals == 1) --last_non_refusal;
    if (options[last_non_refusal].kind != OptionKind::Hedge)
      fail("hedge option must be the last non-refusal option");
  }
  if (ordinal_count() < 2) fail("at least 2 ordinal options are required");
}

std::optional<std::size_t> DemographicAttribute::group_index(const std::string& group) const {
  for (std::size_t i = 0; i < groups.size(); ++i)
    if (groups[i] == group) return i;
  return std::nullopt;
}

std::optional<std::string> Respondent::answer(const std::string& qid) const {
  auto it = answers.find(qid);
  if (it == answers.end()) return std::nullopt;
  return it->second;
}

const Question* Survey::find_question(const std::string& qid) const {
  for (const auto& q : questions)
    if (q.qid == qid) return &q;
  return nullptr;
}

const DemographicAttribute* Survey::find_attribute(const std::string& name) const {
  for (const auto& a : demographics)
    if (a.name == name) return &a;
  return nullptr;
}

namespace {

std::string require_string(const json& obj, const char* key, const std::string& where) {
  if (!obj.contains(key) || !obj[key].is_string())
    throw SchemaError(where + ": missing or non-string field '" + key + "'");
  return obj[key].get<std::string>();
}

std::string lowercase(std::string s) {
  std::transform(s.begin(), s.end(), s.begin(),
                 [](unsigned char c) { return static_cast<char>(std::tolower(c)); });
  return s;
}

}  // namespace

Survey load_survey(const std::string& json_text) {
  json doc;
  try {
    doc = json::parse(json_text);
  } catch (const json::exception& e) {
    throw SchemaError(std::string("survey document is not valid JSON: ") + e.what());
  }
  if (!doc.is_object()) throw SchemaError("survey document must be a JSON object");

  Survey survey;
  survey.survey_id = require_string(doc, "survey_id", "survey");

  if (!doc.contains("questions") || !doc["questions"].is_array())
    throw SchemaError("survey: missing 'questions' array");

  std::unordered_set<std::string> seen_qids;
  for (const auto& jq : doc["questions"]) {
    if (!jq.is_object()) throw SchemaError("survey: question entries must be objects");
    Question q;
    q.survey_id = survey.survey_id;
    q.qid = require_string(jq, "qid", "question");
    q.text = require_string(jq, "text", "question '" + q.qid + "'");
    if (!jq.contains("topics") || !jq["topics"].is_array())
      throw SchemaError("question '" + q.qid + "': missing 'topics' array");
    for (const auto& t : jq["topics"]) {
      if (!t.is_string()) throw SchemaError("question '" + q.qid + "': topics must be strings");
      q.topics.push_back(t.get<std::string>());
    }
    if (!jq.contains("options") || !jq["options"].is_array())
      throw SchemaError("question '" + q.qid + "': missing 'options' array");
    for (const auto& jo : jq["options"]) {
      if (!jo.is_object()) throw SchemaError("question '" + q.qid + "': option entries must be objects");
      OptionSpec opt;
      opt.label = require_string(jo, "label", "question '" + q.qid + "' option");
      opt.text = require_string(jo, "text", "question '" + q.qid + "' option");
      opt.kind = option_kind_from_string(require_string(jo, "kind", "question '" + q.qid + "' option"));
      q.options.push_back(std::move(opt));
    }
    q.validate();
    if (!seen_qids.insert(q.qid).second)
      throw InvariantError("duplicate qid '" + q.qid + "'");
    survey.questions.push_back(std::move(q));
  }

  if (doc.contains("demographics")) {
    if (!doc["demographics"].is_array())
      throw SchemaError("survey: 'demographics' must be an array");
    std::unordered_set<std::string> seen_attrs;
    for (const auto& ja : doc["demographics"]) {
      DemographicAttribute attr;
      attr.name = require_string(ja, "name", "demographic attribute");
      if (!seen_attrs.insert(attr.name).second)
        throw InvariantError("duplicate demographic attribute '" + attr.name + "'");
      attr.text = ja.value("text", std::string{});
      attr.phrase = ja.value("phrase", lowercase(attr.name));
      if (!ja.contains("groups") || !ja["groups"].is_array())
        throw SchemaError("attribute '" + attr.name + "': missing 'groups' array");
      std::unordered_set<std::string> seen_groups;
      for (const auto& g : ja["groups"]) {
        if (!g.is_string())
          throw SchemaError("attribute '" + attr.name + "': groups must be strings");
        std::string group = g.get<std::string>();
        if (!seen_groups.insert(group).second)
          throw InvariantError("attribute '" + attr.name + "': duplicate group '" + group + "'");
        attr.groups.push_back(std::move(group));
      }
      survey.demographics.push_back(std::move(attr));
    }
  }

  if (doc.contains("topics")) {
    if (!doc["topics"].is_array()) throw SchemaError("survey: 'topics' must be an array");
    for (const auto& t : doc["topics"]) {
      if (!t.is_string()) throw SchemaError("survey: declared topics must be strings");
      survey.declared_topics.push_back(t.get<std::string>());
    }
  }

  return survey;
}

Survey load_survey_file(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open survey file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return load_survey(buf.str());
}

std::string serialize_survey(const Survey& survey) {
  json doc;
  doc["survey_id"] = survey.survey_id;
  doc["questions"] = json::array();
  for (const auto& q : survey.questions) {
    json jq;
    jq["qid"] = q.qid;
    jq["text"] = q.text;
    jq["topics"] = q.topics;
    jq["options"] = json::array();
    for (const auto& o : q.options) {
      jq["options"].push_back({{"label", o.label}, {"text", o.text}, {"kind", to_string(o.kind)}});
    }
    doc["questions"].push_back(std::move(jq));
  }
  doc["demographics"] = json::array();
  for (const auto& a : survey.demographics) {
    json ja;
    ja["name"] = a.name;
    if (!a.text.empty()) ja["text"] = a.text;
    ja["phrase"] = a.phrase;
    ja["groups"] = a.groups;
    doc["demographics"].push_back(std::move(ja));
  }
  if (!survey.declared_topics.empty()) doc["topics"] = survey.declared_topics;
  return doc.dump(2);
}

namespace {

// RFC-4180 style cells: quotes, escaped quotes, embedded separators/newlines.
std::vector<std::vector<std::string>> parse_csv(const std::string& text) {
  std::vector<std::vector<std::string>> rows;
  std::vector<std::string> row;
  std::string cell;
  bool in_quotes = false;
  bool cell_started = false;
  auto end_cell = [&] {
    row.push_back(std::move(cell));
    cell.clear();
    cell_started = false;
  };
  auto end_row = [&] {
    end_cell();
    if (row.size() > 1 || !row[0].empty()) rows.push_back(std::move(row));
    row.clear();
  };
  for (std::size_t i = 0; i < text.size(); ++i) {
    char c = text[i];
    if (in_quotes) {
      if (c == '"') {
        if (i + 1 < text.size() && text[i + 1] == '"') {
          cell += '"';
          ++i;
        } else {
          in_quotes = false;
        }
      } else {
        cell += c;
      }
      continue;
    }
    switch (c) {
      case '"':
        if (!cell_started && cell.empty()) {
          in_quotes = true;
          cell_started = true;
        } else {
          cell += c;
        }
        break;
      case ',': end_cell(); break;
      case '\r': break;
      case '\n': end_row(); break;
      default:
        cell += c;
        cell_started = true;
        break;
    }
  }
  if (!cell.empty() || !row.empty()) end_row();
  return rows;
}

}  // namespace

ResponsePanel load_responses(const std::string& csv_text, const Survey& survey) {
  auto rows = parse_csv(csv_text);
  if (rows.empty()) throw SchemaError("microdata: empty table");

  const auto& header = rows[0];
  if (header.size() < 2 || header[0] != "respondent_id" || header[1] != "weight")
    throw SchemaError("microdata: header must start with respondent_id, weight");

  // Columns matching a qid are answers; the rest are demographic attributes.
  struct ColumnRole {
    const Question* question = nullptr;
    std::string attribute;
  };
  std::vector<ColumnRole> roles(header.size());
  for (std::size_t c = 2; c < header.size(); ++c) {
    if (const Question* q = survey.find_question(header[c])) {
      roles[c].question = q;
    } else {
      roles[c].attribute = header[c];
    }
  }

  ResponsePanel panel;
  for (std::size_t r = 1; r < rows.size(); ++r) {
    const auto& cells = rows[r];
    if (cells.size() != header.size())
      throw SchemaError("microdata row " + std::to_string(r) + ": expected " +
                        std::to_string(header.size()) + " cells, got " +
                        std::to_string(cells.size()));
    Respondent resp;
    resp.id = cells[0];
    try {
      std::size_t pos = 0;
      resp.weight = std::stod(cells[1], &pos);
      if (pos != cells[1].size()) throw std::invalid_argument("trailing characters");
    } catch (const std::exception&) {
      throw SchemaError("microdata row " + std::to_string(r) + ": weight '" + cells[1] +
                        "' is not a number");
    }
    if (!std::isfinite(resp.weight))
      throw SchemaError("microdata row " + std::to_string(r) + ": weight must be finite");
    if (resp.weight < 0.0) throw NegativeWeightError(resp.id);

    for (std::size_t c = 2; c < cells.size(); ++c) {
      const std::string& value = cells[c];
      if (roles[c].question != nullptr) {
        if (value.empty()) continue;  // MISSING
        const Question& q = *roles[c].question;
        if (!q.option_index(value).has_value()) throw UnknownLabelError(q.qid, value);
        resp.answers[q.qid] = value;
      } else if (!value.empty()) {
        resp.demographics[roles[c].attribute] = value;
      }
    }
    panel.respondents.push_back(std::move(resp));
  }
  return panel;
}

ResponsePanel load_responses_file(const std::string& path, const Survey& survey) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open microdata file '" + path + "'");
  std::ostringstream buf;
  buf << in.rdbuf();
  return load_responses(buf.str(), survey);
}

TopicTaxonomy TopicTaxonomy::build(const Survey& survey) {
  return build(survey.questions, survey.declared_topics);
}

TopicTaxonomy TopicTaxonomy::build(const std::vector<Question>& questions,
                                   const std::vector<std::string>& declared) {
  TopicTaxonomy tax;
  for (const auto& q : questions) tax.topics_.insert(q.topics.begin(), q.topics.end());
  tax.topics_.insert(declared.begin(), declared.end());
  return tax;
}

bool TopicTaxonomy::contains(const std::string& topic) const {
  return topics_.count(topic) > 0;
}

std::vector<std::string> TopicTaxonomy::topics() const {
  return {topics_.begin(), topics_.end()};
}

std::vector<Question> questions_for_topic(const std::vector<Question>& questions,
                                          const std::string& topic,
                                          const TopicTaxonomy& taxonomy) {
  if (!taxonomy.contains(topic)) throw UnknownTopicError(topic);
  std::vector<Question> subset;
  for (const auto& q : questions)
    if (std::find(q.topics.begin(), q.topics.end(), topic) != q.topics.end())
      subset.push_back(q);
  return subset;
}

std::vector<Question> questions_for_topic(const std::vector<Question>& questions,
                                          const std::string& topic) {
  return questions_for_topic(questions, topic, TopicTaxonomy::build(questions));
}

}  // namespace opalign
