#pragma once

#include <stdexcept>
#include <string>

namespace crfuse {

// Shape disagreements between operands; message names both shapes.
struct DimensionError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// API misuse: scalar-ness, tape membership, empty negative sets.
struct ContractError : std::logic_error {
  using std::logic_error::logic_error;
};

// Out-of-range values (labels, alpha, fold counts).
struct RangeError : std::out_of_range {
  using std::out_of_range::out_of_range;
};

// Rejected user-supplied data (waveforms, lengths, sample rates).
struct InputError : std::invalid_argument {
  using std::invalid_argument::invalid_argument;
};

// Malformed binary/text files; message carries path and offset where known.
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

struct ConfigError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Non-finite losses, failed gradient probes.
struct NumericError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace crfuse
