#pragma once

#include <stdexcept>
#include <string>

namespace lgm {

// Tensor extents or parameter shapes that do not fit together.
class ShapeError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Invalid model configuration (bad JSON, unknown keys, unpaired stages).
class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Unreadable or malformed input file.
class IoError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Diverged or otherwise broken training run.
class TrainingError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

}  // namespace lgm
