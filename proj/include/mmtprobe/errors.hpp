#pragma once

#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

namespace mmtprobe {

// Shape disagreement between operands.
class DimensionError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// An integer id or position outside its valid range.
class IndexError : public std::out_of_range {
 public:
  using std::out_of_range::out_of_range;
};

// A caller violated a documented precondition.
class ContractError : public std::logic_error {
 public:
  using std::logic_error::logic_error;
};

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

class AnnotationError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

// Malformed binary or text input. Carries the byte offset where parsing failed.
class FormatError : public std::runtime_error {
 public:
  FormatError(const std::string& what, std::uint64_t offset)
      : std::runtime_error(what + " (at byte offset " + std::to_string(offset) + ")"),
        offset_(offset) {}
  explicit FormatError(const std::string& what) : std::runtime_error(what), offset_(0) {}

  std::uint64_t offset() const noexcept { return offset_; }

 private:
  std::uint64_t offset_;
};

namespace detail {

template <typename T>
std::string shape_str(const std::vector<T>& shape) {
  std::ostringstream oss;
  oss << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) oss << 'x';
    oss << shape[i];
  }
  oss << ']';
  return oss.str();
}

}  // namespace detail
}  // namespace mmtprobe
