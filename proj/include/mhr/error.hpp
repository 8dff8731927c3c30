#pragma once

#include <stdexcept>
#include <string>
#include <string_view>

namespace mhr {

enum class ErrorKind {
  InvalidArgument,
  NonFiniteValue,
  MissingValue,
  NoEvents,
  SingleArm,
  NonPositiveTime,
  RankDeficientDesign,
  MonotoneLikelihood,
  NonConvergence,
  SingularInformation,
  NoComparablePairs,
  Separation,
  RankDeficient,
  FoldWithoutEvents,
  ArmTooSmall,
  PsOutOfRange,
  NoInteriorSolution,
  SolverNonConvergence,
  BracketFailure,
  RateUnreachable,
  TooFewReplicates,
  ConfigParse,
  OutputUnwritable,
  CsvSchema,
};

constexpr std::string_view to_string(ErrorKind kind) {
  switch (kind) {
    case ErrorKind::InvalidArgument: return "InvalidArgument";
    case ErrorKind::NonFiniteValue: return "NonFiniteValue";
    case ErrorKind::MissingValue: return "MissingValue";
    case ErrorKind::NoEvents: return "NoEvents";
    case ErrorKind::SingleArm: return "SingleArm";
    case ErrorKind::NonPositiveTime: return "NonPositiveTime";
    case ErrorKind::RankDeficientDesign: return "RankDeficientDesign";
    case ErrorKind::MonotoneLikelihood: return "MonotoneLikelihood";
    case ErrorKind::NonConvergence: return "NonConvergence";
    case ErrorKind::SingularInformation: return "SingularInformation";
    case ErrorKind::NoComparablePairs: return "NoComparablePairs";
    case ErrorKind::Separation: return "Separation";
    case ErrorKind::RankDeficient: return "RankDeficient";
    case ErrorKind::FoldWithoutEvents: return "FoldWithoutEvents";
    case ErrorKind::ArmTooSmall: return "ArmTooSmall";
    case ErrorKind::PsOutOfRange: return "PsOutOfRange";
    case ErrorKind::NoInteriorSolution: return "NoInteriorSolution";
    case ErrorKind::SolverNonConvergence: return "SolverNonConvergence";
    case ErrorKind::BracketFailure: return "BracketFailure";
    case ErrorKind::RateUnreachable: return "RateUnreachable";
    case ErrorKind::TooFewReplicates: return "TooFewReplicates";
    case ErrorKind::ConfigParse: return "ConfigParse";
    case ErrorKind::OutputUnwritable: return "OutputUnwritable";
    case ErrorKind::CsvSchema: return "CsvSchema";
  }
  return "Unknown";
}

/// Every failure raised by the library carries a machine-readable kind.
class Error : public std::runtime_error {
 public:
  Error(ErrorKind kind, const std::string& message)
      : std::runtime_error(std::string(to_string(kind)) + ": " + message), kind_(kind), detail_(message) {}

  ErrorKind kind() const noexcept { return kind_; }
  /// Message without the kind prefix.
  const std::string& detail() const noexcept { return detail_; }

 private:
  ErrorKind kind_;
  std::string detail_;
};

[[noreturn]] inline void fail(ErrorKind kind, const std::string& message) {
  throw Error(kind, message);
}

}  // namespace mhr
