#include <cmath>
#include <fstream>
#include <iomanip>
#include <random>
#include <sstream>

#include "dot/forward.hpp"

namespace dot::forward {

Vector element_absorption(const FemMesh& mesh, const geometry::Phantom& phantom) {
    Vector mu(mesh.triangle_count());
    for (Index t = 0; t < mesh.triangle_count(); ++t) mu[t] = phantom.mu_a_at(mesh.centroid(t));
    return mu;
}

Vector element_absorption(const FemMesh& mesh, double mu_a) {
    return Vector::Constant(mesh.triangle_count(), mu_a);
}

double FluenceField::at(const FemMesh& mesh, const MeshPoint& p) const {
    const auto& tri = mesh.triangles[static_cast<std::size_t>(p.triangle)];
    return p.weights[0] * values[tri[0]] + p.weights[1] * values[tri[1]] + p.weights[2] * values[tri[2]];
}

DiffusionSystem::DiffusionSystem(const geometry::DomainSpec& spec, const FemMesh& mesh,
                                 const Vector& element_mu_a)
    : mesh_(&mesh), locator_(mesh), source_intensity_(spec.source_intensity) {
    if (element_mu_a.size() != mesh.triangle_count())
        throw InvalidArgument("absorption field must have one value per triangle");
    if (!(element_mu_a.array() > 0.0).all()) throw InvalidArgument("absorption must be positive");
    const double diff = spec.diffusion();
    const double robin = 1.0 / (2.0 * spec.accommodation);

    std::vector<Eigen::Triplet<double>> entries;
    entries.reserve(static_cast<std::size_t>(mesh.triangle_count()) * 9 + mesh.boundary_edges.size() * 4);
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        const double area = mesh.area(t);
        if (!(area > 0.0)) throw GeometryError("degenerate triangle " + std::to_string(t));
        Eigen::Matrix<double, 2, 3> grad;
        for (int v = 0; v < 3; ++v) {
            const Point b = mesh.nodes.col(tri[(v + 1) % 3]);
            const Point c = mesh.nodes.col(tri[(v + 2) % 3]);
            grad.col(v) = Point(b.y() - c.y(), c.x() - b.x()) / (2.0 * area);
        }
        const Eigen::Matrix3d stiff = diff * area * grad.transpose() * grad;
        const double m = element_mu_a[t] * area / 12.0;
        for (int a = 0; a < 3; ++a)
            for (int b = 0; b < 3; ++b)
                entries.emplace_back(tri[a], tri[b], stiff(a, b) + m * (a == b ? 2.0 : 1.0));
    }
    for (const auto& e : mesh.boundary_edges) {
        const double len = (mesh.nodes.col(e[0]) - mesh.nodes.col(e[1])).norm();
        const double m = robin * len / 6.0;
        for (int a = 0; a < 2; ++a)
            for (int b = 0; b < 2; ++b) entries.emplace_back(e[a], e[b], m * (a == b ? 2.0 : 1.0));
    }
    system_.resize(mesh.node_count(), mesh.node_count());
    system_.setFromTriplets(entries.begin(), entries.end());
    solver_.compute(system_);
    if (solver_.info() != Eigen::Success)
        throw NumericError("diffusion system factorization failed");
    const Vector pivots = solver_.vectorD();
    pivot_ratio_ = pivots.cwiseAbs().maxCoeff() / pivots.cwiseAbs().minCoeff();
    if (!(pivots.minCoeff() > 0.0) || !std::isfinite(pivot_ratio_) || pivot_ratio_ > 1e14) {
        std::ostringstream msg;
        msg << "diffusion system is singular or ill-conditioned (pivot ratio " << pivot_ratio_ << ")";
        throw NumericError(msg.str());
    }
}

Vector DiffusionSystem::solve_load(const Vector& load) const {
    Vector u = solver_.solve(load);
    if (solver_.info() != Eigen::Success || !u.allFinite())
        throw NumericError("diffusion solve failed");
    return u;
}

FluenceField DiffusionSystem::solve(const Point& source, int source_index) const {
    const MeshPoint at = locator_.locate(source, 0.0);
    Vector load = Vector::Zero(mesh_->node_count());
    const auto& tri = mesh_->triangles[static_cast<std::size_t>(at.triangle)];
    for (int v = 0; v < 3; ++v) load[tri[v]] += source_intensity_ * at.weights[v];
    return FluenceField{solve_load(load), source_index};
}

FluenceField solve_diffusion(const geometry::DomainSpec& spec, const FemMesh& mesh,
                             const Vector& element_mu_a, const Point& source) {
    return DiffusionSystem(spec, mesh, element_mu_a).solve(source);
}

double absorbed_power(const FemMesh& mesh, const Vector& element_mu_a, const Vector& u) {
    double total = 0.0;
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        total += element_mu_a[t] * mesh.area(t) * (u[tri[0]] + u[tri[1]] + u[tri[2]]) / 3.0;
    }
    return total;
}

double boundary_loss(const FemMesh& mesh, double accommodation, const Vector& u) {
    double total = 0.0;
    for (const auto& e : mesh.boundary_edges) {
        const double len = (mesh.nodes.col(e[0]) - mesh.nodes.col(e[1])).norm();
        total += 0.5 * len * (u[e[0]] + u[e[1]]);
    }
    return total / (2.0 * accommodation);
}

double l2_norm(const FemMesh& mesh, const Vector& u) {
    double total = 0.0;
    for (Index t = 0; t < mesh.triangle_count(); ++t) {
        const auto& tri = mesh.triangles[static_cast<std::size_t>(t)];
        const Eigen::Vector3d v(u[tri[0]], u[tri[1]], u[tri[2]]);
        total += mesh.area(t) / 12.0 * (v.squaredNorm() + v.sum() * v.sum());
    }
    return std::sqrt(total);
}

ForwardModel::ForwardModel(const geometry::DomainSpec& spec, double edge_length)
    : spec_(spec), mesh_(build_semidisk_mesh(spec.radius, edge_length)), layout_(geometry::place_probes(spec)) {
    if (mesh_.edge_length > spec.source_inset + 1e-12)
        throw InvalidArgument("forward mesh does not resolve the sources (edge > source inset)");
    MeshLocator locator(mesh_);
    for (int l = 0; l < layout_.n_detectors(); ++l)
        detector_points_.push_back(locator.locate(layout_.detectors.col(l), mesh_.edge_length));
    background_ = detector_fluence(element_absorption(mesh_, spec_.mu_a0));
}

Vector ForwardModel::detector_fluence(const Vector& element_mu_a) const {
    const DiffusionSystem system(spec_, mesh_, element_mu_a);
    Vector out(layout_.pairs());
    for (int k = 0; k < layout_.n_sources(); ++k) {
        const FluenceField field = system.solve(layout_.sources.col(k), k);
        for (int l = 0; l < layout_.n_detectors(); ++l)
            out[layout_.pair_index(l, k)] = field.at(mesh_, detector_points_[static_cast<std::size_t>(l)]);
    }
    if (!(out.array() > 0.0).all()) throw NumericError("non-positive detector fluence");
    return out;
}

MeasurementSet ForwardModel::simulate(const std::optional<geometry::Phantom>& phantom) const {
    MeasurementSet m;
    m.layout = layout_;
    m.background_fluence = background_;
    m.fluence = phantom ? detector_fluence(element_absorption(mesh_, *phantom))
                        : detector_fluence(element_absorption(mesh_, spec_.mu_a0));
    return m;
}

MeasurementSet simulate_measurements(const geometry::DomainSpec& spec,
                                     const std::optional<geometry::Phantom>& phantom, std::uint64_t seed) {
    MeasurementSet m = ForwardModel(spec).simulate(phantom);
    m.seed = seed;
    return m;
}

MeasurementSet add_noise(const MeasurementSet& m, double p, std::uint64_t seed, NoiseReading reading) {
    if (!(p >= 0.0)) throw InvalidArgument("noise level must be non-negative");
    MeasurementSet out = m;
    out.noise_level = p;
    out.seed = seed;
    if (p == 0.0) return out;
    const double sigma = reading == NoiseReading::relative_std ? p : std::sqrt(p);
    std::mt19937_64 rng(seed);
    std::normal_distribution<double> normal(0.0, 1.0);
    for (Index i = 0; i < out.fluence.size(); ++i) {
        double v;
        do {
            v = m.fluence[i] * (1.0 + sigma * normal(rng));
        } while (!(v > 0.0));
        out.fluence[i] = v;
    }
    return out;
}

void write_measurements(std::ostream& os, const MeasurementSet& m) {
    os << std::setprecision(17);
    os << "# noise_level=" << m.noise_level << " seed=" << m.seed << '\n';
    os << "pair_index,detector,source,fluence,background_fluence\n";
    for (Index i = 0; i < m.fluence.size(); ++i) {
        const auto [l, k] = m.layout.pair(i);
        os << i << ',' << l << ',' << k << ',' << m.fluence[i] << ',' << m.background_fluence[i] << '\n';
    }
}

void write_measurements(const std::string& path, const MeasurementSet& m) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write measurement file " + path);
    write_measurements(os, m);
}

MeasurementSet read_measurements(std::istream& is, const geometry::DomainSpec& spec) {
    MeasurementSet m;
    m.layout = geometry::place_probes(spec);
    std::string line;
    if (!std::getline(is, line) || line.rfind("# noise_level=", 0) != 0)
        throw IoError("measurement file: missing noise/seed header");
    {
        const auto sp = line.find(" seed=");
        if (sp == std::string::npos) throw IoError("measurement file: missing seed");
        m.noise_level = std::stod(line.substr(14, sp - 14));
        m.seed = std::stoull(line.substr(sp + 6));
    }
    std::getline(is, line);  // column names
    const Index pairs = m.layout.pairs();
    m.fluence = Vector::Constant(pairs, std::nan(""));
    m.background_fluence = Vector::Constant(pairs, std::nan(""));
    Index rows = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        Index i = 0;
        int l = 0, k = 0;
        double u = 0.0, u0 = 0.0;
        char c1, c2, c3, c4;
        if (!(ls >> i >> c1 >> l >> c2 >> k >> c3 >> u >> c4 >> u0) || i < 0 || i >= pairs ||
            m.layout.pair_index(l, k) != i)
            throw IoError("measurement file: malformed row: " + line);
        m.fluence[i] = u;
        m.background_fluence[i] = u0;
        ++rows;
    }
    if (rows != pairs) throw IoError("measurement file: expected " + std::to_string(pairs) + " rows");
    return m;
}

MeasurementSet read_measurements(const std::string& path, const geometry::DomainSpec& spec) {
    std::ifstream is(path);
    if (!is) throw MissingPrerequisite("cannot open measurement file " + path);
    return read_measurements(is, spec);
}

}  // namespace dot::forward
