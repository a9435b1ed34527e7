#pragma once

#include <stdexcept>
#include <string>

namespace clmm {

// Every error carries a short machine-parsable kind; the CLI prints
// "error: <kind>: <message>" and exits nonzero.
class Error : public std::runtime_error {
public:
    Error(std::string kind, const std::string& what)
        : std::runtime_error(what), kind_(std::move(kind)) {}
    const std::string& kind() const noexcept { return kind_; }

private:
    std::string kind_;
};

struct DimensionError : Error {
    explicit DimensionError(const std::string& w) : Error("dimension", w) {}
};
struct ConfigError : Error {
    explicit ConfigError(const std::string& w) : Error("config", w) {}
};
struct ContractError : Error {
    explicit ContractError(const std::string& w) : Error("contract", w) {}
};
struct LoadError : Error {
    explicit LoadError(const std::string& w) : Error("load", w) {}
};
struct IoError : Error {
    explicit IoError(const std::string& w) : Error("io", w) {}
};
struct IntegrityError : Error {
    explicit IntegrityError(const std::string& w) : Error("integrity", w) {}
};

} // namespace clmm
