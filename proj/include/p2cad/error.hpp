#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace p2cad {

// Every failure in the library throws Error with a stable machine-parsable
// code ("ParseError", "ShapeError", ...) plus a human-readable detail.
class Error : public std::runtime_error {
public:
    Error(std::string code, const std::string& detail)
        : std::runtime_error(code + ": " + detail), code_(std::move(code)) {}

    const std::string& code() const noexcept { return code_; }

private:
    std::string code_;
};

[[noreturn]] inline void fail(const char* code, const std::string& detail) {
    throw Error(code, detail);
}

} // namespace p2cad
