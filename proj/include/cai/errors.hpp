#pragma once

#include <stdexcept>
#include <string>

namespace cai {

// Base for every error raised by the toolkit.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

// A softmax row with no finite entry.
class DegenerateRowError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

class EmptyDatasetError : public Error {
 public:
  using Error::Error;
};

class PairingError : public Error {
 public:
  using Error::Error;
};

class ClassImbalanceError : public Error {
 public:
  using Error::Error;
};

// Probe ranking and shift bank (or artifact and model) come from different models.
class ProvenanceError : public Error {
 public:
  using Error::Error;
};

class UsageError : public Error {
 public:
  using Error::Error;
};

}  // namespace cai
