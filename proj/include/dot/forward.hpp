#pragma once

#include <array>
#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Core>
#include <Eigen/SparseCholesky>
#include <Eigen/SparseCore>

#include "dot/core.hpp"
#include "dot/geometry.hpp"

namespace dot::forward {

/// Conforming P1 triangulation of the semidisk.
struct FemMesh {
    Eigen::Matrix2Xd nodes;
    std::vector<std::array<int, 3>> triangles;     // counterclockwise
    std::vector<std::array<int, 2>> boundary_edges;
    double edge_length = 0.0;                      // nominal h

    Index node_count() const { return nodes.cols(); }
    Index triangle_count() const { return static_cast<Index>(triangles.size()); }
    double area(Index t) const;
    Point centroid(Index t) const;
};

/// Ring-structured triangulation: concentric half circles spaced by ~h, each
/// carrying nodes spaced by ~h along the arc, stitched into strips.
FemMesh build_semidisk_mesh(double radius, double edge_length);

/// Position inside a triangle in barycentric coordinates.
struct MeshPoint {
    Index triangle = -1;
    Eigen::Vector3d weights = Eigen::Vector3d::Zero();
};

/// Bucketed point location on a FemMesh. Points within `snap_tolerance` of the
/// mesh hull (e.g. on the true arc between polygonal boundary nodes) are
/// projected onto the nearest boundary edge.
class MeshLocator {
public:
    explicit MeshLocator(const FemMesh& mesh);
    std::optional<MeshPoint> find(const Point& p) const;
    /// Throws GeometryError when `p` is farther than `snap_tolerance` from the mesh.
    MeshPoint locate(const Point& p, double snap_tolerance) const;

private:
    const FemMesh* mesh_;
    Eigen::Vector2d lo_;
    double cell_ = 1.0;
    int nx_ = 1, ny_ = 1;
    std::vector<std::vector<int>> buckets_;
    std::vector<int> edge_owner_;  // triangle owning each boundary edge

    Eigen::Vector3d barycentric(Index t, const Point& p) const;
};

/// Piecewise-constant absorption per triangle, sampled at triangle centroids.
Vector element_absorption(const FemMesh& mesh, const geometry::Phantom& phantom);
Vector element_absorption(const FemMesh& mesh, double mu_a);

struct FluenceField {
    Vector values;          // nodal fluence
    int source_index = -1;  // -1 when the source is not a layout source

    double at(const FemMesh& mesh, const MeshPoint& p) const;
};

/// Factorized P1 system of -div(D grad u) + mu_a u = S0 delta(r - s) with
/// D du/dn + u / (2 A_c) = 0 on the boundary. One factorization serves any
/// number of sources.
class DiffusionSystem {
public:
    DiffusionSystem(const geometry::DomainSpec& spec, const FemMesh& mesh, const Vector& element_mu_a);

    /// The Dirac source is projected on the P1 basis of the containing triangle.
    FluenceField solve(const Point& source, int source_index = -1) const;
    Vector solve_load(const Vector& load) const;

    const Eigen::SparseMatrix<double>& matrix() const { return system_; }
    /// Ratio of extreme pivots of the LDL^T factorization.
    double pivot_ratio() const { return pivot_ratio_; }

private:
    const FemMesh* mesh_;
    MeshLocator locator_;
    double source_intensity_;
    Eigen::SparseMatrix<double> system_;
    Eigen::SimplicialLDLT<Eigen::SparseMatrix<double>> solver_;
    double pivot_ratio_ = 0.0;
};

FluenceField solve_diffusion(const geometry::DomainSpec& spec, const FemMesh& mesh,
                             const Vector& element_mu_a, const Point& source);

/// \int mu_a u over the domain (exact for P1 fields and piecewise-constant mu_a).
double absorbed_power(const FemMesh& mesh, const Vector& element_mu_a, const Vector& u);
/// \oint u / (2 A_c) over the boundary.
double boundary_loss(const FemMesh& mesh, double accommodation, const Vector& u);
/// L2 norm of a nodal field, or of a field difference.
double l2_norm(const FemMesh& mesh, const Vector& u);

struct MeasurementSet {
    geometry::ProbeLayout layout;
    Vector fluence;             // pair ordered, see ProbeLayout::pair_index
    Vector background_fluence;
    double noise_level = 0.0;
    std::uint64_t seed = 0;
};

/// Mesh, probes and the homogeneous solution shared by every simulated sample.
class ForwardModel {
public:
    /// `edge_length` is the nominal FEM edge (0.1 cm by default, finer than the
    /// reconstruction voxels).
    explicit ForwardModel(const geometry::DomainSpec& spec, double edge_length = 0.1);

    const geometry::DomainSpec& spec() const { return spec_; }
    const FemMesh& mesh() const { return mesh_; }
    const geometry::ProbeLayout& layout() const { return layout_; }
    const Vector& background() const { return background_; }

    /// Detector fluence for every pair under the given element absorption.
    Vector detector_fluence(const Vector& element_mu_a) const;

    /// Noise-free measurement of a phantom (or of the background when empty).
    MeasurementSet simulate(const std::optional<geometry::Phantom>& phantom) const;

private:
    geometry::DomainSpec spec_;
    FemMesh mesh_;
    geometry::ProbeLayout layout_;
    std::vector<MeshPoint> detector_points_;
    Vector background_;
};

MeasurementSet simulate_measurements(const geometry::DomainSpec& spec,
                                     const std::optional<geometry::Phantom>& phantom,
                                     std::uint64_t seed = 0);

/// How the nominal noise level p is read: relative standard deviation p, or
/// relative variance p (standard deviation sqrt(p)).
enum class NoiseReading { relative_std, relative_variance };

/// v <- v (1 + s xi), xi ~ N(0,1), redrawn while the result is not positive.
/// Background fluence is left untouched.
MeasurementSet add_noise(const MeasurementSet& m, double p, std::uint64_t seed,
                         NoiseReading reading = NoiseReading::relative_std);

/// CSV with a `# noise_level=<p> seed=<n>` header row, then
/// pair_index,detector,source,fluence,background_fluence.
void write_measurements(std::ostream& os, const MeasurementSet& m);
void write_measurements(const std::string& path, const MeasurementSet& m);
/// Probe coordinates are not stored; they are rebuilt from `spec`.
MeasurementSet read_measurements(std::istream& is, const geometry::DomainSpec& spec);
MeasurementSet read_measurements(const std::string& path, const geometry::DomainSpec& spec);

}  // namespace dot::forward
