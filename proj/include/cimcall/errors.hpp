#pragma once

#include <stdexcept>
#include <string>

namespace cimcall {

struct PreconditionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct LibraryMissError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct TrainingDivergenceError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct StateError : std::logic_error {
  using std::logic_error::logic_error;
};

inline void require(bool ok, const std::string& msg) {
  if (!ok) throw PreconditionError(msg);
}

inline void require_dims(bool ok, const std::string& msg) {
  if (!ok) throw DimensionError(msg);
}

}  // namespace cimcall
