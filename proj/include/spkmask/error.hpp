#pragma once

#include <stdexcept>
#include <string>

namespace spkmask {

// Bad or unreadable input data: files, manifests, annotations.
class DataError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Invalid run configuration (unknown key, wrong type, out-of-range value).
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

} // namespace spkmask
