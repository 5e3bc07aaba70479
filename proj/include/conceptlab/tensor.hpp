#pragma once
#include <Eigen/Core>
#include <Eigen/StdVector>
#include <cassert>
#include <cstddef>
#include <vector>

namespace conceptlab {

using Mat = Eigen::MatrixXd;   // column-major
using Vec = Eigen::VectorXd;
using MatMap = Eigen::Map<Mat>;
using ConstMatMap = Eigen::Map<const Mat>;

// All hot numeric buffers share Eigen's SIMD alignment so that vectorized
// kernels take the same code path on every call; results are then bit-stable
// across runs and across resume/replay.
using DVec = std::vector<double, Eigen::aligned_allocator<double>>;

// Dense NCHW batch tensor. Row-major within an image: index (n, c, y, x).
struct Tensor {
  int n = 0, c = 0, h = 0, w = 0;
  DVec v;

  Tensor() = default;
  Tensor(int n_, int c_, int h_, int w_)
      : n(n_), c(c_), h(h_), w(w_), v(static_cast<size_t>(n_) * c_ * h_ * w_, 0.0) {}

  size_t size() const { return v.size(); }
  int plane() const { return h * w; }
  int per_image() const { return c * h * w; }

  double& at(int ni, int ci, int y, int x) {
    return v[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
  }
  double at(int ni, int ci, int y, int x) const {
    return v[((static_cast<size_t>(ni) * c + ci) * h + y) * w + x];
  }

  double* image(int ni) { return v.data() + static_cast<size_t>(ni) * per_image(); }
  const double* image(int ni) const { return v.data() + static_cast<size_t>(ni) * per_image(); }

  bool same_shape(const Tensor& o) const {
    return n == o.n && c == o.c && h == o.h && w == o.w;
  }

  void fill(double x) { std::fill(v.begin(), v.end(), x); }

  bool all_finite() const {
    for (double x : v)
      if (!std::isfinite(x)) return false;
    return true;
  }
};

}  // namespace conceptlab
