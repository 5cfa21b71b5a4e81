#pragma once

#include <stdexcept>
#include <string>

namespace ascore {

/// Base for every error raised by the library. `exit_code()` maps onto the
/// CLI convention: 1 for domain errors, 2 for usage and I/O problems.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual int exit_code() const noexcept { return 1; }
};

class IoError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class UsageError : public Error {
 public:
  using Error::Error;
  int exit_code() const noexcept override { return 2; }
};

class DatasetError : public Error {
 public:
  using Error::Error;
};

class NotFoundError : public Error {
 public:
  using Error::Error;
};

// gateway
class TransportError : public Error {
 public:
  using Error::Error;
};
class CredentialError : public Error {
 public:
  using Error::Error;
};
class ProtocolError : public Error {
 public:
  using Error::Error;
};

// extraction
class ExtractionParseError : public Error {
 public:
  using Error::Error;
};
class ExtractionError : public Error {
 public:
  using Error::Error;
};

// featurizer
class LabelParseError : public Error {
 public:
  using Error::Error;
};
class AggregationError : public Error {
 public:
  using Error::Error;
};
class FeaturizationError : public Error {
 public:
  using Error::Error;
};

class TrainingError : public Error {
 public:
  using Error::Error;
};

class MetricError : public Error {
 public:
  using Error::Error;
};

/// Artifacts built from different component sets were combined.
class StaleArtifactError : public Error {
 public:
  using Error::Error;
};

}  // namespace ascore
