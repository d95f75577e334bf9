#pragma once

#include <stdexcept>
#include <string>

namespace mlosr {

// Every exception thrown by the library carries a short machine-readable
// category ("dimension", "parse", ...). The CLI prints it on failure.
class Error : public std::runtime_error {
public:
  Error(std::string category, const std::string& what)
      : std::runtime_error(what), category_(std::move(category)) {}

  const std::string& category() const noexcept { return category_; }

private:
  std::string category_;
};

struct DimensionError : Error {
  explicit DimensionError(const std::string& what) : Error("dimension", what) {}
};

struct ParseError : Error {
  explicit ParseError(const std::string& what) : Error("parse", what) {}
};

struct ValidationError : Error {
  explicit ValidationError(const std::string& what) : Error("validation", what) {}
};

struct ContractError : Error {
  explicit ContractError(const std::string& what) : Error("contract", what) {}
};

struct IoError : Error {
  explicit IoError(const std::string& what) : Error("io", what) {}
};

struct ConfigError : Error {
  explicit ConfigError(const std::string& what) : Error("config", what) {}
};

}  // namespace mlosr
