#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pragmatix {

// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Utterance validation failures carry the offending token position.
class UtteranceError : public Error {
 public:
  UtteranceError(const std::string& what, std::size_t token_index)
      : Error(what + " at token " + std::to_string(token_index)),
        token_index_(token_index) {}
  std::size_t token_index() const { return token_index_; }

 private:
  std::size_t token_index_;
};

class DuplicateClaim : public UtteranceError {
 public:
  explicit DuplicateClaim(std::size_t index)
      : UtteranceError("duplicate claim", index) {}
};

class UnknownClaim : public UtteranceError {
 public:
  explicit UnknownClaim(std::size_t index)
      : UtteranceError("unknown claim", index) {}
};

class LengthExceeded : public UtteranceError {
 public:
  explicit LengthExceeded(std::size_t index)
      : UtteranceError("utterance length exceeded", index) {}
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t line = 0,
             std::string field = {})
      : Error(format(what, line, field)), line_(line), field_(std::move(field)) {}
  std::size_t line() const { return line_; }
  const std::string& field() const { return field_; }

 private:
  static std::string format(const std::string& what, std::size_t line,
                            const std::string& field) {
    std::string out = "parse error: " + what;
    if (line > 0) out += " (line " + std::to_string(line) + ")";
    if (!field.empty()) out += " [field '" + field + "']";
    return out;
  }
  std::size_t line_;
  std::string field_;
};

class SchemaMismatch : public Error {
 public:
  explicit SchemaMismatch(const std::string& what)
      : Error("schema mismatch: " + what) {}
};

class ConfigError : public Error {
 public:
  explicit ConfigError(const std::string& what)
      : Error("config error: " + what) {}
};

class DegenerateUtterance : public Error {
 public:
  explicit DegenerateUtterance(std::size_t utterance)
      : Error("utterance " + std::to_string(utterance) +
              " has zero mass in every world"),
        utterance_(utterance) {}
  std::size_t utterance() const { return utterance_; }

 private:
  std::size_t utterance_;
};

class DegenerateWorld : public Error {
 public:
  explicit DegenerateWorld(std::size_t world)
      : Error("world " + std::to_string(world) +
              " has zero mass under every utterance"),
        world_(world) {}
  std::size_t world() const { return world_; }

 private:
  std::size_t world_;
};

class NonFiniteLoss : public Error {
 public:
  explicit NonFiniteLoss(const std::string& where)
      : Error("non-finite loss in " + where) {}
};

class ShapeMismatch : public Error {
 public:
  explicit ShapeMismatch(const std::string& what)
      : Error("shape mismatch: " + what) {}
};

class ImpossibleUtterance : public Error {
 public:
  explicit ImpossibleUtterance(const std::string& what)
      : Error("impossible utterance: " + what) {}
};

}  // namespace pragmatix
