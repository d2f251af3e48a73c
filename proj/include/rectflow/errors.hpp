#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>

namespace rectflow {

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

// Shape mismatches, invalid arguments, malformed configs.
class InputError : public Error {
 public:
  using Error::Error;
};

// A non-finite value appeared. `layer` is the index of the offending layer
// inside the map being evaluated, or -1 when not attributable to a layer.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, int layer = -1)
      : Error(what), layer_(layer) {}
  int layer() const { return layer_; }

 private:
  int layer_;
};

// Cholesky failure of a Gram matrix or a non-SPD operator inside CG.
class ConditioningError : public Error {
 public:
  ConditioningError(const std::string& what, double smallest_pivot)
      : Error(what), smallest_pivot_(smallest_pivot) {}
  double smallest_pivot() const { return smallest_pivot_; }

 private:
  double smallest_pivot_;
};

// Missing or unreadable files.
class FileError : public Error {
 public:
  using Error::Error;
};

class UnsupportedError : public Error {
 public:
  using Error::Error;
};

class ParseError : public Error {
 public:
  ParseError(const std::string& what, std::size_t row, std::size_t column)
      : Error(what + " (row " + std::to_string(row) + ", column " +
              std::to_string(column) + ")"),
        row_(row),
        column_(column) {}
  std::size_t row() const { return row_; }
  std::size_t column() const { return column_; }

 private:
  std::size_t row_;
  std::size_t column_;
};

}  // namespace rectflow
