#pragma once

#include <cstdio>
#include <stdexcept>
#include <string>

namespace codl {

// Error categories map onto CLI exit codes: usage=1, config=2, data=3, numeric=4.
struct UsageError : std::runtime_error {
    explicit UsageError(const std::string& m) : std::runtime_error(m) {}
};

struct ConfigError : std::runtime_error {
    explicit ConfigError(const std::string& m) : std::runtime_error(m) {}
};

struct DataError : std::runtime_error {
    explicit DataError(const std::string& m) : std::runtime_error(m) {}
};

struct NumericError : std::runtime_error {
    explicit NumericError(const std::string& m) : std::runtime_error(m) {}
};

// Shape/contract violations inside the library.
struct ShapeError : std::runtime_error {
    explicit ShapeError(const std::string& m) : std::runtime_error(m) {}
};

struct FormatError : std::runtime_error {
    explicit FormatError(const std::string& m) : std::runtime_error(m) {}
};

inline void warn(const std::string& msg) {
    std::fprintf(stderr, "[codl] warning: %s\n", msg.c_str());
}

#define CODL_CHECK(cond, ex_type, msg)       \
    do {                                     \
        if (!(cond)) throw ex_type(msg);     \
    } while (0)

}  // namespace codl
