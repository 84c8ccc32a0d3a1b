#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace vibik {

// Process exit codes used by the command-line front end.
enum class ExitCode : int { kOk = 0, kUsage = 1, kDataError = 2, kNumericalFailure = 3 };

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
  virtual ExitCode exit_code() const { return ExitCode::kDataError; }
};

class InsufficientData : public Error {
 public:
  explicit InsufficientData(const std::string& what) : Error("InsufficientData: " + what) {}
};

class InvalidValue : public Error {
 public:
  explicit InvalidValue(const std::string& what) : Error("InvalidValue: " + what) {}
};

class DimensionError : public Error {
 public:
  explicit DimensionError(const std::string& what) : Error("DimensionError: " + what) {}
};

class IndexError : public Error {
 public:
  explicit IndexError(const std::string& what) : Error("IndexError: " + what) {}
};

class NumericalFailure : public Error {
 public:
  NumericalFailure(const std::string& what, int iteration)
      : Error("NumericalFailure at iteration " + std::to_string(iteration) + ": " + what),
        iteration_(iteration) {}
  int iteration() const { return iteration_; }
  ExitCode exit_code() const override { return ExitCode::kNumericalFailure; }

 private:
  int iteration_;
};

class MissingImage : public Error {
 public:
  explicit MissingImage(const std::string& image_id)
      : Error("MissingImage: no embedding for image '" + image_id + "'"), image_id_(image_id) {}
  const std::string& image_id() const { return image_id_; }

 private:
  std::string image_id_;
};

class FormatError : public Error {
 public:
  explicit FormatError(const std::string& what) : Error("FormatError: " + what) {}
};

class UnsupportedVersion : public Error {
 public:
  explicit UnsupportedVersion(const std::string& what) : Error("UnsupportedVersion: " + what) {}
};

class CorruptFile : public Error {
 public:
  CorruptFile(const std::string& what, std::size_t offset)
      : Error("CorruptFile at byte " + std::to_string(offset) + ": " + what), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

class ValidationError : public Error {
 public:
  ValidationError(const std::string& what, std::size_t line)
      : Error("ValidationError" + (line ? " at line " + std::to_string(line) : std::string()) +
              ": " + what),
        line_(line) {}
  std::size_t line() const { return line_; }

 private:
  std::size_t line_;
};

}  // namespace vibik
