#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace kbflow {

struct Error : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct InvalidModel : Error {
  using Error::Error;
};

struct NotPSD : Error {
  using Error::Error;
};

struct SingularGramian : Error {
  using Error::Error;
};

struct NoStabilizingSolution : Error {
  using Error::Error;
};

struct StepSizeUnderflow : Error {
  using Error::Error;
};

struct BoundNotApplicable : Error {
  using Error::Error;
};

// Raised when a state entry becomes NaN/Inf. step is the grid index of the
// offending step.
struct NonFinite : Error {
  NonFinite(const std::string& what, std::size_t step_index, double time)
      : Error(what + " (step " + std::to_string(step_index) + ", t=" +
              std::to_string(time) + ")"),
        step(step_index),
        t(time) {}
  std::size_t step;
  double t;
};

}  // namespace kbflow
