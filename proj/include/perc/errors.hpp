#pragma once

#include <stdexcept>
#include <string>

namespace perc {

// Error taxonomy mirrored by the CLI exit codes.
struct IoError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// malformed bitstream, checkpoint or config bytes
struct FormatError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// model configuration does not match the data it is applied to
struct MismatchError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// NaN encountered in a training step; the step is aborted, not patched over
struct NanError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

}  // namespace perc
