#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace pdl {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Tensor shapes that do not fit the requested operation.
class DimensionError : public Error {
 public:
  using Error::Error;
};

/// Malformed bracketed tree text. `offset` is the byte position of the fault.
class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t offset)
      : Error(what + " at offset " + std::to_string(offset)), offset_(offset) {}
  std::size_t offset() const { return offset_; }

 private:
  std::size_t offset_;
};

/// Gold attachment data that the stack machine cannot execute.
class SupervisionError : public Error {
 public:
  SupervisionError(const std::string& what, std::size_t position)
      : Error(what + " (position " + std::to_string(position) + ")"), position_(position) {}
  std::size_t position() const { return position_; }

 private:
  std::size_t position_;
};

/// An attachment target that is not the rightmost token of a stack constituent.
class AttachmentError : public Error {
 public:
  AttachmentError(const std::string& what, std::size_t step)
      : Error(what + " (step " + std::to_string(step) + ")"), step_(step) {}
  std::size_t step() const { return step_; }

 private:
  std::size_t step_;
};

/// Binary file with a bad magic number, version, or truncated payload.
class FormatError : public Error {
 public:
  using Error::Error;
};

/// Token or vocabulary inconsistencies between corpora and checkpoints.
class VocabError : public Error {
 public:
  using Error::Error;
};

/// Missing, unreadable or unwritable files.
class IoError : public Error {
 public:
  using Error::Error;
};

class ConfigError : public Error {
 public:
  using Error::Error;
};

}  // namespace pdl
