#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

#include <Eigen/Dense>

namespace isan {

using Vector = Eigen::VectorXd;
using Matrix = Eigen::MatrixXd;
using Index = Eigen::Index;

using TokenId = int;
using TokenSeq = std::vector<TokenId>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class VocabError : public Error {
 public:
  using Error::Error;
};

class ShapeError : public Error {
 public:
  using Error::Error;
};

class ArgumentError : public Error {
 public:
  using Error::Error;
};

class IoError : public Error {
 public:
  using Error::Error;
};

// Checkpoint or manifest does not match what the reader expects.
class FormatError : public Error {
 public:
  FormatError(const std::string& tensor, const std::string& what)
      : Error("tensor '" + tensor + "': " + what), tensor_(tensor) {}
  const std::string& tensor() const noexcept { return tensor_; }

 private:
  std::string tensor_;
};

// NaN/Inf or runaway values. step is the timestep (forward pass) or the
// optimizer step (training) at which the problem was detected, -1 if unknown.
class NumericError : public Error {
 public:
  NumericError(const std::string& what, long step = -1)
      : Error(step >= 0 ? what + " (at step " + std::to_string(step) + ")" : what),
        step_(step) {}
  long step() const noexcept { return step_; }

 private:
  long step_;
};

namespace detail {

inline void require_dim(Index got, Index want, const char* what) {
  if (got != want) {
    throw ShapeError(std::string(what) + ": expected dimension " + std::to_string(want) +
                     ", got " + std::to_string(got));
  }
}

}  // namespace detail

}  // namespace isan
