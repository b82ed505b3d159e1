#pragma once

#include <stdexcept>
#include <string>

namespace opalign {

// Base type for everything this library throws on purpose.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// ---- survey / ingestion ----------------------------------------------------

class SchemaError : public Error {
 public:
  using Error::Error;
};

class InvariantError : public Error {
 public:
  using Error::Error;
};

class UnknownLabelError : public Error {
 public:
  UnknownLabelError(const std::string& qid, const std::string& label)
      : Error("unknown option label '" + label + "' for question '" + qid + "'"),
        qid(qid),
        label(label) {}
  std::string qid;
  std::string label;
};

class NegativeWeightError : public Error {
 public:
  explicit NegativeWeightError(const std::string& respondent_id)
      : Error("negative weight for respondent '" + respondent_id + "'"),
        respondent_id(respondent_id) {}
  std::string respondent_id;
};

class UnknownTopicError : public Error {
 public:
  explicit UnknownTopicError(const std::string& topic)
      : Error("topic '" + topic + "' is not in the taxonomy"), topic(topic) {}
  std::string topic;
};

// ---- aggregation -----------------------------------------------------------

class EmptyCellError : public Error {
 public:
  using Error::Error;
};

class AllRefusedError : public Error {
 public:
  using Error::Error;
};

class NoRefusalOptionError : public Error {
 public:
  using Error::Error;
};

// ---- probing ---------------------------------------------------------------

class BadPermutationError : public Error {
 public:
  using Error::Error;
};

class ProviderError : public Error {
 public:
  explicit ProviderError(const std::string& what, bool transient = false)
      : Error(what), transient(transient) {}
  bool transient = false;
};

class AuthError : public ProviderError {
 public:
  explicit AuthError(const std::string& what) : ProviderError(what, false) {}
};

class RateLimitError : public ProviderError {
 public:
  explicit RateLimitError(const std::string& what) : ProviderError(what, true) {}
};

class AllMissingError : public Error {
 public:
  using Error::Error;
};

// ---- metrics ---------------------------------------------------------------

class SupportMismatchError : public Error {
 public:
  using Error::Error;
};

class EmptySetError : public Error {
 public:
  using Error::Error;
};

class BadTemperatureError : public Error {
 public:
  using Error::Error;
};

class IncompleteMatrixError : public Error {
 public:
  using Error::Error;
};

class DegenerateScoreError : public Error {
 public:
  using Error::Error;
};

// ---- orchestration ---------------------------------------------------------

class ConfigError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

}  // namespace opalign
