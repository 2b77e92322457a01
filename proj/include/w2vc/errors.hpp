#pragma once

#include <stdexcept>
#include <string>

namespace w2vc {

// Error taxonomy mirrors the CLI exit codes: usage=1, data=2, numeric=3.
struct usage_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct data_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

struct numeric_error : std::runtime_error {
    using std::runtime_error::runtime_error;
};

// Shape/config problems are usage errors: the caller asked for something inconsistent.
struct shape_error : usage_error {
    using usage_error::usage_error;
};

struct config_error : usage_error {
    using usage_error::usage_error;
};

} // namespace w2vc
