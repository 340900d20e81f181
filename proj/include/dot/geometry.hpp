#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <utility>
#include <vector>

#include <Eigen/Core>

#include "dot/core.hpp"

namespace dot::geometry {

/// Physical and acquisition parameters of the semidisk domain. Lengths in cm,
/// coefficients in cm^-1. Defaults reproduce the synthetic test setup: radius
/// 5 cm, mu_a0 = 0.01, (1-g) mu_s = 0.1, 19 sources 1 mm above the diameter and
/// 20 detectors on the arc.
struct DomainSpec {
    double radius = 5.0;
    double mu_a0 = 0.01;
    double reduced_scattering = 0.1;
    double accommodation = 1.0;
    double source_intensity = 1.0;
    int n_sources = 19;
    int n_detectors = 20;
    double source_inset = 0.1;
    // Upper bounds of the admissible parameter set.
    double mu_a_max = 1.0;
    double scattering_max = 100.0;

    /// Diffusion coefficient D = 1 / (3 (1-g) mu_s), in cm.
    double diffusion() const { return 1.0 / (3.0 * reduced_scattering); }
    /// Attenuation of the background modified Helmholtz operator, sqrt(mu_a0 / D).
    double attenuation() const;

    /// Throws InvalidArgument when an invariant is violated.
    void validate() const;
};

/// Square voxels whose centroid lies strictly inside the semidisk
/// {|r| < radius, y > 0}. Ordinals follow row-major order of the bounding box
/// [-R, R] x [0, R], rows counted from the diameter upwards.
class VoxelGrid {
public:
    VoxelGrid() = default;
    VoxelGrid(double radius, double side);

    Index size() const { return static_cast<Index>(cells_.size()); }
    double side() const { return side_; }
    double radius() const { return radius_; }
    double volume() const { return side_ * side_; }
    int rows() const { return rows_; }
    int cols() const { return cols_; }

    Point centroid(Index j) const { return centroids_.col(j); }
    /// 2 x N matrix of centroids.
    const Eigen::Matrix2Xd& centroids() const { return centroids_; }

    /// Ordinal of the voxel at lattice position (row, col), or -1 outside.
    Index ordinal(int row, int col) const;
    std::pair<int, int> cell(Index j) const { return cells_[static_cast<std::size_t>(j)]; }
    Point lattice_centroid(int row, int col) const;

    /// Hash of (radius, side, centroids); stamps files derived from this grid.
    std::uint64_t hash() const;

private:
    double radius_ = 0.0;
    double side_ = 0.0;
    int rows_ = 0;
    int cols_ = 0;
    Eigen::Matrix2Xd centroids_;
    std::vector<std::pair<int, int>> cells_;
    std::vector<Index> mask_;  // rows_ * cols_, -1 outside
};

VoxelGrid build_grid(const DomainSpec& spec, double side);

struct ProbeLayout {
    Eigen::Matrix2Xd sources;    // left to right along the diameter
    Eigen::Matrix2Xd detectors;  // counterclockwise from the rightmost one

    int n_sources() const { return static_cast<int>(sources.cols()); }
    int n_detectors() const { return static_cast<int>(detectors.cols()); }
    Index pairs() const { return sources.cols() * detectors.cols(); }

    /// Pair ordinal of (detector, source): detectors vary fastest.
    Index pair_index(int detector, int source) const {
        return static_cast<Index>(source) * detectors.cols() + detector;
    }
    /// Inverse of pair_index: returns (detector, source).
    std::pair<int, int> pair(Index i) const {
        const auto nd = detectors.cols();
        return {static_cast<int>(i % nd), static_cast<int>(i / nd)};
    }
};

ProbeLayout place_probes(const DomainSpec& spec);

struct ContrastRegion {
    Point center = Point::Zero();
    double radius = 0.0;
    int multiplier = 3;

    bool contains(const Point& p) const { return (p - center).norm() < radius; }
};

struct Phantom {
    VoxelGrid grid;
    double mu_a0 = 0.0;
    std::vector<ContrastRegion> regions;
    Vector mu_a;

    /// Absorption of the continuous phantom at an arbitrary point.
    double mu_a_at(const Point& p) const;
    /// Union of the regions' supports as a voxel mask.
    std::vector<bool> support() const;
};

/// Voxel absorption for the given regions; a voxel belongs to a region when
/// its centroid does.
Vector rasterize(const VoxelGrid& grid, double mu_a0, const std::vector<ContrastRegion>& regions);

Phantom make_phantom(const VoxelGrid& grid, double mu_a0, std::vector<ContrastRegion> regions);

/// Rejection-sampling parameters for random phantoms.
struct PhantomSampling {
    double min_radius = 0.5;
    double max_radius = 1.25;
    double boundary_margin = 0.25;
    int max_retries = 1000;
};

/// One or two non-overlapping disks with multipliers drawn from {3, 4, 5}.
/// Deterministic in `seed`.
Phantom sample_phantom(const DomainSpec& spec, const VoxelGrid& grid, std::uint64_t seed,
                       const PhantomSampling& sampling = {});

/// Plain-text phantom file: a header line `radius side N`, `# mu_a0 v` and
/// `# region cx cy r multiplier` comment lines, then `ordinal x y mu_a` per voxel.
void write_phantom(std::ostream& os, const Phantom& phantom);
void write_phantom(const std::string& path, const Phantom& phantom);
Phantom read_phantom(std::istream& is);
Phantom read_phantom(const std::string& path);

}  // namespace dot::geometry
