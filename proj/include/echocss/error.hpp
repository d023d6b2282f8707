#pragma once

#include <stdexcept>
#include <string>

namespace echocss {

/// Violated precondition of a public operation (bad shapes, out-of-range
/// parameters, empty inputs).
struct ContractError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

/// Index arithmetic ran past the end of a sequence or clip.
struct IndexError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

/// A computation produced NaN/Inf or diverged.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

/// Dataset content does not satisfy the labeling invariants.
struct ValidationError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

namespace detail {

inline void require(bool ok, const std::string& what) {
  if (!ok) throw ContractError(what);
}

}  // namespace detail
}  // namespace echocss
