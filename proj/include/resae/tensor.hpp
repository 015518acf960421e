#pragma once

#include <Eigen/Dense>

#include <cstdint>
#include <vector>
#include <span>
#include <stdexcept>
#include <string>

namespace resae {

// Row-major dense matrices: one row per token position.
template <typename T>
using MatT = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VecT = Eigen::Matrix<T, Eigen::Dynamic, 1>;
template <typename T>
using RowVecT = Eigen::Matrix<T, 1, Eigen::Dynamic>;

// Flat buffers that Eigen maps over. A fixed base alignment keeps the
// vectorized reduction order, and so the rounding, independent of where the
// allocator happens to place the buffer.
template <typename T>
using AlignedVector = std::vector<T, Eigen::aligned_allocator<T>>;

using Mat = MatT<float>;
using Vec = VecT<float>;
using MatD = MatT<double>;
using VecD = VecT<double>;

enum class ErrorCode : int {
  kOk = 0,
  kInvalidArgument = 1,
  kOutOfRange = 2,
  kDimensionMismatch = 3,
  kIo = 4,
  kFormat = 5,
  kNumerical = 6,
  kState = 7,
  kInternal = 99,
};

// Every error raised by the core carries a code that the C API surfaces.
class Error : public std::runtime_error {
 public:
  Error(ErrorCode code, const std::string& what)
      : std::runtime_error(what), code_(code) {}
  ErrorCode code() const noexcept { return code_; }

 private:
  ErrorCode code_;
};

[[noreturn]] inline void fail(ErrorCode code, const std::string& what) {
  throw Error(code, what);
}

inline void require(bool cond, ErrorCode code, const std::string& what) {
  if (!cond) fail(code, what);
}

template <typename T>
bool all_finite(const Eigen::DenseBase<T>& m) {
  return m.derived().allFinite();
}

}  // namespace resae
