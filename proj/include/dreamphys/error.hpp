#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace dreamphys {

enum class ErrorKind {
  MalformedPly,
  EmptyScene,
  Schema,
  Range,
  Io,
  OutOfGrid,
  DegenerateF,
  BehindCamera,
  ShapeMismatch,
  StaleRecord,
  OutOfBounds,
  Transport,
  Protocol,
  NotDivisible,
  NonFiniteGradient,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::MalformedPly: return "MalformedPly";
    case ErrorKind::EmptyScene: return "EmptyScene";
    case ErrorKind::Schema: return "SchemaError";
    case ErrorKind::Range: return "RangeError";
    case ErrorKind::Io: return "IoError";
    case ErrorKind::OutOfGrid: return "OutOfGrid";
    case ErrorKind::DegenerateF: return "DegenerateF";
    case ErrorKind::BehindCamera: return "BehindCamera";
    case ErrorKind::ShapeMismatch: return "ShapeMismatch";
    case ErrorKind::StaleRecord: return "StaleRecord";
    case ErrorKind::OutOfBounds: return "OutOfBounds";
    case ErrorKind::Transport: return "Transport";
    case ErrorKind::Protocol: return "ProtocolError";
    case ErrorKind::NotDivisible: return "NotDivisible";
    case ErrorKind::NonFiniteGradient: return "NonFiniteGradient";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a kind so callers (the CLI in
/// particular) can map it to an exit code without string matching.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

 private:
  ErrorKind kind_;
};

[[noreturn]] inline void raise(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace dreamphys
