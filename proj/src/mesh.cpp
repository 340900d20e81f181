#include <algorithm>
#include <cmath>
#include <limits>
#include <map>
#include <numbers>

#include "dot/forward.hpp"

namespace dot::forward {

double FemMesh::area(Index t) const {
    const auto& tri = triangles[static_cast<std::size_t>(t)];
    const Point a = nodes.col(tri[0]), b = nodes.col(tri[1]), c = nodes.col(tri[2]);
    const Point ab = b - a, ac = c - a;
    return 0.5 * (ab.x() * ac.y() - ab.y() * ac.x());
}

Point FemMesh::centroid(Index t) const {
    const auto& tri = triangles[static_cast<std::size_t>(t)];
    return (nodes.col(tri[0]) + nodes.col(tri[1]) + nodes.col(tri[2])) / 3.0;
}

FemMesh build_semidisk_mesh(double radius, double edge_length) {
    if (!(radius > 0.0) || !(edge_length > 0.0) || edge_length >= radius)
        throw InvalidArgument("mesh edge length must lie in (0, radius)");
    const int n_rings = std::max(1, static_cast<int>(std::ceil(radius / edge_length - 1e-9)));
    const double dr = radius / n_rings;

    std::vector<Point> pts{Point::Zero()};
    std::vector<std::vector<int>> rings(static_cast<std::size_t>(n_rings) + 1);
    rings[0] = {0};
    for (int i = 1; i <= n_rings; ++i) {
        const double r = i * dr;
        const int segments = std::max(2, static_cast<int>(std::ceil(std::numbers::pi * r / dr - 1e-9)));
        for (int k = 0; k <= segments; ++k) {
            const double theta = std::numbers::pi * k / segments;
            Point p(r * std::cos(theta), r * std::sin(theta));
            if (k == 0 || k == segments) p.y() = 0.0;
            rings[static_cast<std::size_t>(i)].push_back(static_cast<int>(pts.size()));
            pts.push_back(p);
        }
    }

    FemMesh mesh;
    mesh.edge_length = dr;
    mesh.nodes.resize(2, static_cast<Index>(pts.size()));
    for (std::size_t i = 0; i < pts.size(); ++i) mesh.nodes.col(static_cast<Index>(i)) = pts[i];

    const auto& first = rings[1];
    for (std::size_t k = 0; k + 1 < first.size(); ++k) mesh.triangles.push_back({0, first[k], first[k + 1]});

    for (int i = 2; i <= n_rings; ++i) {
        const auto& in = rings[static_cast<std::size_t>(i - 1)];
        const auto& out = rings[static_cast<std::size_t>(i)];
        const int ma = static_cast<int>(in.size()) - 1;
        const int mb = static_cast<int>(out.size()) - 1;
        int a = 0, b = 0;
        while (a < ma || b < mb) {
            const double next_a = a < ma ? double(a + 1) / ma : std::numeric_limits<double>::infinity();
            const double next_b = b < mb ? double(b + 1) / mb : std::numeric_limits<double>::infinity();
            if (next_b <= next_a) {
                mesh.triangles.push_back({in[static_cast<std::size_t>(a)], out[static_cast<std::size_t>(b)],
                                          out[static_cast<std::size_t>(b + 1)]});
                ++b;
            } else {
                mesh.triangles.push_back({in[static_cast<std::size_t>(a)], out[static_cast<std::size_t>(b)],
                                          in[static_cast<std::size_t>(a + 1)]});
                ++a;
            }
        }
    }

    const auto& arc = rings.back();
    for (std::size_t k = 0; k + 1 < arc.size(); ++k) mesh.boundary_edges.push_back({arc[k], arc[k + 1]});
    for (int i = 0; i < n_rings; ++i) {
        const auto& in = rings[static_cast<std::size_t>(i)];
        const auto& out = rings[static_cast<std::size_t>(i + 1)];
        mesh.boundary_edges.push_back({in.front(), out.front()});
        mesh.boundary_edges.push_back({out.back(), in.back()});
    }
    return mesh;
}

MeshLocator::MeshLocator(const FemMesh& mesh) : mesh_(&mesh) {
    lo_ = mesh.nodes.rowwise().minCoeff();
    const Eigen::Vector2d hi = mesh.nodes.rowwise().maxCoeff();
    cell_ = 2.0 * mesh.edge_length;
    nx_ = std::max(1, static_cast<int>(std::ceil((hi.x() - lo_.x()) / cell_)) + 1);
    ny_ = std::max(1, static_cast<int>(std::ceil((hi.y() - lo_.y()) / cell_)) + 1);
    buckets_.resize(static_cast<std::size_t>(nx_) * ny_);
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        Eigen::Vector2d bmin = mesh.nodes.col(tri[0]), bmax = bmin;
        for (int v = 1; v < 3; ++v) {
            bmin = bmin.cwiseMin(mesh.nodes.col(tri[v]));
            bmax = bmax.cwiseMax(mesh.nodes.col(tri[v]));
        }
        const int x0 = static_cast<int>((bmin.x() - lo_.x()) / cell_), x1 = static_cast<int>((bmax.x() - lo_.x()) / cell_);
        const int y0 = static_cast<int>((bmin.y() - lo_.y()) / cell_), y1 = static_cast<int>((bmax.y() - lo_.y()) / cell_);
        for (int y = y0; y <= std::min(y1, ny_ - 1); ++y)
            for (int x = x0; x <= std::min(x1, nx_ - 1); ++x)
                buckets_[static_cast<std::size_t>(y) * nx_ + x].push_back(static_cast<int>(t));
    }

    std::map<std::pair<int, int>, int> owner;
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        for (int v = 0; v < 3; ++v) {
            const int a = tri[v], b = tri[(v + 1) % 3];
            owner[{std::min(a, b), std::max(a, b)}] = static_cast<int>(t);
        }
    }
    for (const auto& e : mesh.boundary_edges)
        edge_owner_.push_back(owner.at({std::min(e[0], e[1]), std::max(e[0], e[1])}));
}

Eigen::Vector3d MeshLocator::barycentric(Index t, const Point& p) const {
    const auto& tri = mesh_->triangles[static_cast<std::size_t>(t)];
    const Point a = mesh_->nodes.col(tri[0]), b = mesh_->nodes.col(tri[1]), c = mesh_->nodes.col(tri[2]);
    const double det = (b.x() - a.x()) * (c.y() - a.y()) - (c.x() - a.x()) * (b.y() - a.y());
    const double l1 = ((b.x() - p.x()) * (c.y() - p.y()) - (c.x() - p.x()) * (b.y() - p.y())) / det;
    const double l2 = ((c.x() - p.x()) * (a.y() - p.y()) - (a.x() - p.x()) * (c.y() - p.y())) / det;
    return {l1, l2, 1.0 - l1 - l2};
}

std::optional<MeshPoint> MeshLocator::find(const Point& p) const {
    const int x = static_cast<int>(std::floor((p.x() - lo_.x()) / cell_));
    const int y = static_cast<int>(std::floor((p.y() - lo_.y()) / cell_));
    if (x < 0 || y < 0 || x >= nx_ || y >= ny_) return std::nullopt;
    constexpr double eps = 1e-12;
    for (int t : buckets_[static_cast<std::size_t>(y) * nx_ + x]) {
        const Eigen::Vector3d w = barycentric(t, p);
        if (w.minCoeff() >= -eps) return MeshPoint{t, w};
    }
    return std::nullopt;
}

MeshPoint MeshLocator::locate(const Point& p, double snap_tolerance) const {
    if (auto hit = find(p)) return *hit;
    double best = std::numeric_limits<double>::infinity();
    Point best_point = p;
    std::size_t best_edge = 0;
    for (std::size_t e = 0; e < mesh_->boundary_edges.size(); ++e) {
        const Point a = mesh_->nodes.col(mesh_->boundary_edges[e][0]);
        const Point b = mesh_->nodes.col(mesh_->boundary_edges[e][1]);
        const double s = std::clamp((p - a).dot(b - a) / (b - a).squaredNorm(), 0.0, 1.0);
        const Point q = a + s * (b - a);
        const double d = (p - q).norm();
        if (d < best) {
            best = d;
            best_point = q;
            best_edge = e;
        }
    }
    if (!(best <= snap_tolerance))
        throw GeometryError("point (" + std::to_string(p.x()) + ", " + std::to_string(p.y()) +
                            ") lies outside the mesh hull");
    const int t = edge_owner_[best_edge];
    Eigen::Vector3d w = barycentric(t, best_point).cwiseMax(0.0);
    w /= w.sum();
    return MeshPoint{t, w};
}

}  // namespace dot::forward
