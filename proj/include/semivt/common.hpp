#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

namespace semivt {

using Index = Eigen::Index;

/// Dense row-major matrix; tokens are rows, channels are columns.
template <typename Scalar>
using Matrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

template <typename Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

template <typename Scalar>
using RowVector = Eigen::Matrix<Scalar, 1, Eigen::Dynamic>;

/// One video frame: channels x (height * width), planar.
using Frame = Matrix<float>;

class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

/// Shapes or settings that disagree with each other.
class ConfigError : public Error {
 public:
  using Error::Error;
};

/// Caller-supplied arguments outside the accepted domain.
class InputError : public Error {
 public:
  using Error::Error;
};

/// NaN/Inf encountered in logits, losses or gradients.
class NumericalError : public Error {
 public:
  using Error::Error;
};

/// Object used before it reached the required state.
class StateError : public Error {
 public:
  using Error::Error;
};

/// Malformed or inconsistent files on disk.
class DataError : public Error {
 public:
  using Error::Error;
};

/// Floor applied inside logarithms of probabilities.
inline constexpr double kLogEpsilon = 1e-12;

}  // namespace semivt
