#pragma once

#include <complex>
#include <vector>

#include <Eigen/Dense>
#include <fftw3.h>

#include "sard/common.hpp"
#include "sard/kernels.hpp"

namespace sard {

// Abstract interaction operator: v -> W v. Lets the integrator run either on
// an explicit interaction matrix or on the FFT fast path for uniform grids.
struct InteractionOp {
  virtual ~InteractionOp() = default;
  virtual Eigen::VectorXd apply(const Eigen::VectorXd& v) const = 0;
  virtual int size() const = 0;
};

struct MatrixInteractionOp final : InteractionOp {
  const InteractionMatrix* W;
  explicit MatrixInteractionOp(const InteractionMatrix& w) : W(&w) {}
  Eigen::VectorXd apply(const Eigen::VectorXd& v) const override {
    return W->apply(v);
  }
  int size() const override { return W->rows(); }
};

// Cyclic kernel convolution on an n1 x n2 uniform torus grid (index
// i = iy*n1 + ix, cell centers, uniform cell area). Equals the dense
// interaction-matrix product to rounding error because the matrix is
// circulant on this grid.
class TorusConvolution final : public InteractionOp {
 public:
  TorusConvolution(int n1, int n2, double width, double height,
                   const KernelSpec& spec)
      : n1_(n1), n2_(n2), nc_(n2 * (n1 / 2 + 1)) {
    const double dx = width / n1, dy = height / n2;
    const double cell_area = dx * dy;
    const int n = n1 * n2;

    real_.resize(n);
    spec_buf_.resize(nc_);
    khat_.resize(nc_);

    plan_fwd_ = fftw_plan_dft_r2c_2d(n2_, n1_, real_.data(),
                                     reinterpret_cast<fftw_complex*>(spec_buf_.data()),
                                     FFTW_ESTIMATE);
    plan_bwd_ = fftw_plan_dft_c2r_2d(n2_, n1_,
                                     reinterpret_cast<fftw_complex*>(spec_buf_.data()),
                                     real_.data(), FFTW_ESTIMATE);

    // kernel samples at wrapped offsets, scaled by the uniform area weight
    for (int iy = 0; iy < n2; ++iy) {
      double oy = iy * dy;
      if (oy > 0.5 * height) oy -= height;
      for (int ix = 0; ix < n1; ++ix) {
        double ox = ix * dx;
        if (ox > 0.5 * width) ox -= width;
        real_[static_cast<std::size_t>(iy) * n1 + ix] =
            kernel_value(spec, std::hypot(ox, oy)) * cell_area;
      }
    }
    fftw_execute(plan_fwd_);
    const double scale = 1.0 / n;
    for (int k = 0; k < nc_; ++k) khat_[k] = spec_buf_[k] * scale;
  }

  TorusConvolution(const TorusConvolution&) = delete;
  TorusConvolution& operator=(const TorusConvolution&) = delete;

  ~TorusConvolution() override {
    fftw_destroy_plan(plan_fwd_);
    fftw_destroy_plan(plan_bwd_);
  }

  Eigen::VectorXd apply(const Eigen::VectorXd& v) const override {
    const int n = n1_ * n2_;
    if (static_cast<int>(v.size()) != n)
      throw DimensionMismatch("TorusConvolution: field size mismatch");
    std::copy(v.data(), v.data() + n, real_.begin());
    fftw_execute(plan_fwd_);
    for (int k = 0; k < nc_; ++k) spec_buf_[k] *= khat_[k];
    fftw_execute(plan_bwd_);
    return Eigen::Map<const Eigen::VectorXd>(real_.data(), n);
  }

  int size() const override { return n1_ * n2_; }

 private:
  int n1_, n2_, nc_;
  mutable std::vector<double> real_;
  mutable std::vector<std::complex<double>> spec_buf_;
  std::vector<std::complex<double>> khat_;
  fftw_plan plan_fwd_, plan_bwd_;
};

}  // namespace sard
