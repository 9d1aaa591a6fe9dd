#pragma once

#include <stdexcept>

namespace mcmkd {

/// Invalid or inconsistent run configuration. CLI exit code 1.
struct ConfigError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Malformed, truncated, or inconsistent data file. CLI exit code 2.
struct DataFormatError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

/// Training produced non-finite losses or missed its accuracy floor. CLI exit code 3.
struct DivergenceError : std::runtime_error {
    using std::runtime_error::runtime_error;
};

}  // namespace mcmkd
