// Error taxonomy shared by the library and the CLI. The kind string is the
// machine-readable tag the CLI prints; io/parse map to exit code 2, the rest
// to exit code 1.
#pragma once

#include <stdexcept>
#include <string>
#include <utility>

namespace bss {

class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& msg)
      : std::runtime_error(msg), kind_(std::move(kind)) {}
  const std::string& kind() const noexcept { return kind_; }

 private:
  std::string kind_;
};

struct ShapeError : Error {
  explicit ShapeError(const std::string& m) : Error("shape", m) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& m) : Error("config", m) {}
};

struct GraphError : Error {
  explicit GraphError(const std::string& m) : Error("graph", m) {}
};

// Singular systems, constant channels with lambda=0, and similar inputs the
// math cannot service.
struct DegenerateError : Error {
  explicit DegenerateError(const std::string& m) : Error("degenerate", m) {}
};

struct OracleError : Error {
  explicit OracleError(const std::string& m) : Error("oracle", m) {}
};

struct IoError : Error {
  explicit IoError(const std::string& m) : Error("io", m) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& m) : Error("parse", m) {}
};

}  // namespace bss
