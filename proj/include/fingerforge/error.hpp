#ifndef FINGERFORGE_ERROR_HPP
#define FINGERFORGE_ERROR_HPP

#include <stdexcept>
#include <string>
#include <string_view>

namespace fingerforge {

enum class Errc {
  ClockUnavailable,
  InsufficientResolution,
  ScratchIOError,
  ProbeFailed,
  InvalidArgument,
  EnvTooShort,
  EmptyAfterCleaning,
  TooFewSamples,
  ShuffleForbidden,
  SchemaMismatch,
  SeriesTooShort,
  ShapeMismatch,
  NonFiniteActivation,
  DivergenceDetected,
  TooFewWindows,
  EmptySet,
  EmptyBatch,
  MissingModel,
  NeedTwoDevices,
  UnknownSchemaVersion,
  StorageFull,
  HashMismatch,
  CorruptModel,
  BatchTooShort,
  IOError,
};

constexpr std::string_view to_string(Errc code) {
  switch (code) {
    case Errc::ClockUnavailable: return "ClockUnavailable";
    case Errc::InsufficientResolution: return "InsufficientResolution";
    case Errc::ScratchIOError: return "ScratchIOError";
    case Errc::ProbeFailed: return "ProbeFailed";
    case Errc::InvalidArgument: return "InvalidArgument";
    case Errc::EnvTooShort: return "EnvTooShort";
    case Errc::EmptyAfterCleaning: return "EmptyAfterCleaning";
    case Errc::TooFewSamples: return "TooFewSamples";
    case Errc::ShuffleForbidden: return "ShuffleForbidden";
    case Errc::SchemaMismatch: return "SchemaMismatch";
    case Errc::SeriesTooShort: return "SeriesTooShort";
    case Errc::ShapeMismatch: return "ShapeMismatch";
    case Errc::NonFiniteActivation: return "NonFiniteActivation";
    case Errc::DivergenceDetected: return "DivergenceDetected";
    case Errc::TooFewWindows: return "TooFewWindows";
    case Errc::EmptySet: return "EmptySet";
    case Errc::EmptyBatch: return "EmptyBatch";
    case Errc::MissingModel: return "MissingModel";
    case Errc::NeedTwoDevices: return "NeedTwoDevices";
    case Errc::UnknownSchemaVersion: return "UnknownSchemaVersion";
    case Errc::StorageFull: return "StorageFull";
    case Errc::HashMismatch: return "HashMismatch";
    case Errc::CorruptModel: return "CorruptModel";
    case Errc::BatchTooShort: return "BatchTooShort";
    case Errc::IOError: return "IOError";
  }
  return "Unknown";
}

/// Every failure surfaced by the library carries one of the codes above.
class Error : public std::runtime_error {
 public:
  Error(Errc code, const std::string& what)
      : std::runtime_error(std::string(to_string(code)) + ": " + what), code_(code) {}

  Errc code() const noexcept { return code_; }

 private:
  Errc code_;
};

inline void require(bool condition, Errc code, const std::string& what) {
  if (!condition) throw Error(code, what);
}

}  // namespace fingerforge

#endif  // FINGERFORGE_ERROR_HPP
