#pragma once

#include <stdexcept>
#include <string>

namespace voxalign {

// One exception type per failure contract; everything derives from
// std::runtime_error so callers can catch broadly at the CLI boundary.

struct DegenerateInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BadRange : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BadFactor : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct ShapeMismatch : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct NotScalarLoss : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct BadConfig : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct CorruptCheckpoint : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct EmptyInput : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct IoError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Thrown when the training loss goes non-finite. Carries the most recent
// checkpoint that was written before the blow-up (may be empty).
struct DivergenceDetected : std::runtime_error {
    std::string last_checkpoint;
    DivergenceDetected(const std::string& msg, std::string ckpt)
        : std::runtime_error(msg), last_checkpoint(std::move(ckpt)) {}
};

}  // namespace voxalign
