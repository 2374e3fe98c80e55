#pragma once

#include <stdexcept>
#include <string>

namespace lrq {

// Error taxonomy; the CLI maps these onto exit codes
// (config -> 2, numeric/training -> 3, io/format -> 4).
struct dimension_error : std::runtime_error {
    explicit dimension_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct config_error : std::runtime_error {
    explicit config_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct numeric_error : std::runtime_error {
    explicit numeric_error(const std::string& msg) : std::runtime_error(msg) {}
};

struct io_error : std::runtime_error {
    explicit io_error(const std::string& msg) : std::runtime_error(msg) {}
};

}  // namespace lrq
