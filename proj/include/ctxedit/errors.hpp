#pragma once

#include <stdexcept>
#include <string>

namespace ctxedit {

// Tensor shapes that do not fit an operation.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Inputs on which an operation is undefined (zero vector under normalization).
class DegenerateInputError : public std::domain_error {
 public:
  using std::domain_error::domain_error;
};

class VocabularyError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class GenerationError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// The three error families below map onto CLI exit codes 1, 2 and 3.
class ConfigError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class MissingArtifactError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class NumericalError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace ctxedit
