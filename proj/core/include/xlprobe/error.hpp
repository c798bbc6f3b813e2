#pragma once

#include <cstdint>
#include <filesystem>
#include <stdexcept>
#include <string>

namespace xlprobe {

/// Base class for every error raised by the library.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Caller-supplied data or arguments violate a documented precondition.
class InvalidInput : public Error {
 public:
  using Error::Error;
};

/// A file on disk does not conform to its format. Carries the file and the
/// byte offset (or 1-based line number for text files) of the problem.
class FormatError : public InvalidInput {
 public:
  FormatError(std::filesystem::path file, std::uint64_t offset, const std::string& what)
      : InvalidInput(file.string() + " @" + std::to_string(offset) + ": " + what),
        file_(std::move(file)),
        offset_(offset) {}

  const std::filesystem::path& file() const noexcept { return file_; }
  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::filesystem::path file_;
  std::uint64_t offset_;
};

/// Training produced a non-finite loss.
class DivergenceError : public Error {
 public:
  using Error::Error;
};

}  // namespace xlprobe
