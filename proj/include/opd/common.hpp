#pragma once

#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>

#include <Eigen/Dense>

namespace opd {

using Vec = Eigen::VectorXd;
using Mat = Eigen::MatrixXd;

// Base of every error thrown by the toolkit. The CLI maps these to exit code 1.
class Error : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

class IngestError : public Error {
 public:
  using Error::Error;
};

class FitError : public Error {
 public:
  using Error::Error;
};

class NumericalError : public Error {
 public:
  using Error::Error;
};

class FormatError : public Error {
 public:
  using Error::Error;
};

// Invalid or conflicting configuration. The CLI maps this to exit code 2.
class ConfigError : public Error {
 public:
  using Error::Error;
};

inline bool all_finite(const Eigen::Ref<const Mat>& m) { return m.allFinite(); }

// Rounds every entry to the nearest float32. Model parameters live on this grid
// so that checkpoints (f32 tensors) reload to bit-identical values.
inline void round_to_f32(Mat& m) {
  for (Eigen::Index i = 0; i < m.size(); ++i)
    m.data()[i] = static_cast<double>(static_cast<float>(m.data()[i]));
}

inline void round_to_f32(Vec& v) {
  for (Eigen::Index i = 0; i < v.size(); ++i)
    v[i] = static_cast<double>(static_cast<float>(v[i]));
}

}  // namespace opd
