#pragma once

#include <cstdint>
#include <stdexcept>
#include <string>

namespace protoalign {

/// Failure categories. The CLI maps these onto process exit codes.
enum class ErrorKind { usage = 1, data = 2, numerical = 3 };

class Error : public std::runtime_error {
public:
  Error(ErrorKind kind, const std::string& what)
      : std::runtime_error(what), kind_(kind) {}

  ErrorKind kind() const noexcept { return kind_; }

private:
  ErrorKind kind_;
};

/// Bad arguments, dimension mismatches, missing labels, capacity problems.
class DataError : public Error {
public:
  explicit DataError(const std::string& what) : Error(ErrorKind::data, what) {}
};

/// Malformed file content. `offset` is a byte offset for binary formats and a
/// 1-based line number for text formats.
class FormatError : public DataError {
public:
  FormatError(const std::string& path, std::uint64_t offset, const std::string& what)
      : DataError(path + ": at offset " + std::to_string(offset) + ": " + what),
        offset_(offset) {}

  std::uint64_t offset() const noexcept { return offset_; }

private:
  std::uint64_t offset_;
};

/// Non-finite values, indefinite matrices, rank shortfalls, divergence.
class NumericalError : public Error {
public:
  explicit NumericalError(const std::string& what) : Error(ErrorKind::numerical, what) {}
};

class RankError : public NumericalError {
public:
  RankError(long requested, long rank)
      : NumericalError("requested dimension " + std::to_string(requested) +
                       " exceeds numerical rank " + std::to_string(rank)),
        rank_(rank) {}

  long rank() const noexcept { return rank_; }

private:
  long rank_;
};

class UsageError : public Error {
public:
  explicit UsageError(const std::string& what) : Error(ErrorKind::usage, what) {}
};

}  // namespace protoalign
