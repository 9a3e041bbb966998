#pragma once

#include <Eigen/Dense>

#include <array>
#include <cstdint>
#include <stdexcept>
#include <string>

namespace ctxseg {

using Index = Eigen::Index;

// Row-major matrices throughout: rows are tokens/channels, data is GEMM-ready.
template <typename T>
using MatrixX = Eigen::Matrix<T, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <typename T>
using VectorX = Eigen::Matrix<T, Eigen::Dynamic, 1>;

using Vector3d = Eigen::Vector3d;

// Grid extents in (d, h, w) order, d slowest-varying.
using Shape3 = std::array<int, 3>;

inline std::int64_t voxels_of(const Shape3& s) {
  return std::int64_t{s[0]} * s[1] * s[2];
}

inline std::int64_t grid_index(const Shape3& s, int i, int j, int k) {
  return (std::int64_t{i} * s[1] + j) * s[2] + k;
}

inline bool operator==(const Shape3& a, const Shape3& b) {
  return a[0] == b[0] && a[1] == b[1] && a[2] == b[2];
}

inline std::string shape_str(const Shape3& s) {
  return std::to_string(s[0]) + "x" + std::to_string(s[1]) + "x" + std::to_string(s[2]);
}

// Error with a machine-readable kind; the CLI turns these into error records.
class Error : public std::runtime_error {
 public:
  Error(std::string kind, const std::string& message)
      : std::runtime_error(message), kind_(std::move(kind)) {}
  const std::string& kind() const { return kind_; }

 private:
  std::string kind_;
};

[[noreturn]] inline void fail(const std::string& kind, const std::string& message) {
  throw Error(kind, message);
}

inline void require(bool cond, const std::string& kind, const std::string& message) {
  if (!cond) fail(kind, message);
}

// Keeps large scratch buffers (im2col workspaces) on the heap instead of
// round-tripping through mmap on every layer call. Idempotent.
void tune_allocator();

}  // namespace ctxseg
