#pragma once

#include <cstdint>
#include <iosfwd>
#include <numbers>
#include <string>

#include <Eigen/Core>
#include <Eigen/SVD>

#include "dot/bessel.hpp"
#include "dot/core.hpp"
#include "dot/forward.hpp"
#include "dot/geometry.hpp"

namespace dot::rytov {

/// Free-space kernel of the 2D modified Helmholtz operator [Laplacian - alpha^2]:
/// G(r) = K0(alpha |r|) / (2 pi), i.e. (Laplacian - alpha^2) G = -delta.
template <typename T>
T greens_modified_helmholtz(T alpha, T distance) {
    if (!(alpha > T(0))) throw InvalidArgument("attenuation must be positive");
    if (!(distance > T(0))) throw NumericError("Green's function evaluated at its singularity");
    return bessel_k0(alpha * distance) / (T(2) * T(std::numbers::pi));
}

template <typename Derived>
typename Derived::Scalar greens_modified_helmholtz(typename Derived::Scalar alpha,
                                                   const Eigen::MatrixBase<Derived>& r) {
    return greens_modified_helmholtz(alpha, r.norm());
}

/// Homogeneous free-space fluence at `a` for a unit-position source at `b`:
/// U0(a, b) = (S0 / D) G(a - b). Symmetric in its arguments.
double background_fluence_greens(const geometry::DomainSpec& spec, const Point& a, const Point& b);

/// Rytov sensitivity matrix. Row i is the pair (detector l, source k) of the
/// layout, column j the voxel ordinal:
///   J_ij = dV_j G(d_l - r_j) U0(s_k, r_j) / (D U0(s_k, d_l)),
/// so that the log-amplitude fluctuation is psi_1 ~= -J dmu_a.
struct SensitivityMatrix {
    Matrix entries;
    geometry::VoxelGrid grid;
    geometry::ProbeLayout layout;
    double alpha0 = 0.0;

    Index rows() const { return entries.rows(); }
    Index cols() const { return entries.cols(); }
};

/// Probe-to-centroid distances below half a voxel side are clamped to it.
SensitivityMatrix assemble_jacobian(const geometry::DomainSpec& spec, const geometry::VoxelGrid& grid,
                                    const geometry::ProbeLayout& layout);

/// Binary layout (little-endian): "DOTJAC01", u64 M, u64 N, f64 alpha0,
/// u64 grid hash, then M*N f64 in row-major order.
void write_jacobian(const std::string& path, const SensitivityMatrix& J);
/// Reads a binary Jacobian and checks it against the grid and layout it is paired with.
SensitivityMatrix read_jacobian(const std::string& path, const geometry::VoxelGrid& grid,
                                const geometry::ProbeLayout& layout);
void write_jacobian_csv(std::ostream& os, const SensitivityMatrix& J);

struct RytovData {
    Vector values;  // log(u / u0), pair ordered
};

/// Elementwise log(u / u0). Throws InvalidArgument on non-positive fluence.
RytovData rytov_transform(const forward::MeasurementSet& m);

/// Tikhonov filter factor sigma / (sigma^2 + alpha).
template <typename T>
constexpr T tikhonov_filter(T sigma, T alpha) {
    return sigma / (sigma * sigma + alpha);
}

/// SVD of J kept for repeated filtered solves. The solution for alpha > 0 is
/// sum_i f_alpha(sigma_i) <u_i, y> v_i, the minimizer of
/// 1/2 |J x - y|^2 + alpha/2 |x|^2. For alpha = 0 it is the pseudoinverse
/// with singular values below 1e-12 sigma_max dropped.
class FilteredSvd {
public:
    explicit FilteredSvd(const Matrix& J);
    Vector solve(const Vector& y, double alpha) const;
    const Vector& singular_values() const { return sigma_; }

private:
    Matrix u_;
    Matrix v_;
    Vector sigma_;
};

Vector tikhonov_filtered_solve(const Matrix& J, const Vector& y, double alpha);

}  // namespace dot::rytov
