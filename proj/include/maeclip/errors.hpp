#pragma once

#include <stdexcept>
#include <string>

namespace maeclip {

// Error taxonomy. Dimension/index/contract errors indicate caller bugs,
// numeric errors indicate non-finite values, config/format/io errors
// indicate bad user input or files.
struct DimensionError : std::runtime_error {
    explicit DimensionError(const std::string& msg) : std::runtime_error("dimension error: " + msg) {}
};

struct IndexError : std::runtime_error {
    explicit IndexError(const std::string& msg) : std::runtime_error("index error: " + msg) {}
};

struct ContractError : std::runtime_error {
    explicit ContractError(const std::string& msg) : std::runtime_error("contract error: " + msg) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& msg) : std::runtime_error("numeric error: " + msg) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& msg) : std::runtime_error("config error: " + msg) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& msg) : std::runtime_error("format error: " + msg) {}
};

struct IoError : std::runtime_error {
    explicit IoError(const std::string& msg) : std::runtime_error("io error: " + msg) {}
};

}  // namespace maeclip
