#include "dot/geometry.hpp"

#include <cmath>
#include <fstream>
#include <iomanip>
#include <numbers>
#include <random>
#include <sstream>

namespace dot::geometry {

double DomainSpec::attenuation() const { return std::sqrt(mu_a0 / diffusion()); }

void DomainSpec::validate() const {
    auto require = [](bool ok, const char* what) {
        if (!ok) throw InvalidArgument(std::string("invalid domain: ") + what);
    };
    require(radius > 0.0, "radius must be positive");
    require(mu_a0 > 0.0 && mu_a0 <= mu_a_max, "mu_a0 must lie in (0, mu_a_max]");
    require(reduced_scattering > 0.0 && reduced_scattering <= scattering_max,
            "reduced scattering must lie in (0, scattering_max]");
    require(accommodation > 0.0, "accommodation coefficient must be positive");
    require(source_intensity > 0.0, "source intensity must be positive");
    require(n_sources >= 1 && n_detectors >= 1, "need at least one source and one detector");
    require(source_inset > 0.0 && source_inset < radius, "source inset must lie in (0, radius)");
}

VoxelGrid::VoxelGrid(double radius, double side) : radius_(radius), side_(side) {
    if (!(radius > 0.0)) throw InvalidArgument("grid radius must be positive");
    if (!(side > 0.0) || !(side < radius)) throw InvalidArgument("voxel side must lie in (0, radius)");
    cols_ = static_cast<int>(std::ceil(2.0 * radius / side - 1e-9));
    rows_ = static_cast<int>(std::ceil(radius / side - 1e-9));
    mask_.assign(static_cast<std::size_t>(rows_) * cols_, -1);
    std::vector<Point> pts;
    for (int r = 0; r < rows_; ++r) {
        for (int c = 0; c < cols_; ++c) {
            const Point p = lattice_centroid(r, c);
            if (p.norm() < radius && p.y() > 0.0) {
                mask_[static_cast<std::size_t>(r) * cols_ + c] = static_cast<Index>(pts.size());
                cells_.emplace_back(r, c);
                pts.push_back(p);
            }
        }
    }
    if (pts.empty()) throw InvalidArgument("voxel side too coarse: grid is empty");
    centroids_.resize(2, static_cast<Index>(pts.size()));
    for (std::size_t j = 0; j < pts.size(); ++j) centroids_.col(static_cast<Index>(j)) = pts[j];
}

Point VoxelGrid::lattice_centroid(int row, int col) const {
    return {-radius_ + (col + 0.5) * side_, (row + 0.5) * side_};
}

Index VoxelGrid::ordinal(int row, int col) const {
    if (row < 0 || col < 0 || row >= rows_ || col >= cols_) return -1;
    return mask_[static_cast<std::size_t>(row) * cols_ + col];
}

std::uint64_t VoxelGrid::hash() const {
    std::uint64_t h = fnv1a(&radius_, sizeof radius_);
    h = fnv1a(&side_, sizeof side_, h);
    return fnv1a(centroids_.data(), sizeof(double) * static_cast<std::size_t>(centroids_.size()), h);
}

VoxelGrid build_grid(const DomainSpec& spec, double side) {
    spec.validate();
    return VoxelGrid(spec.radius, side);
}

ProbeLayout place_probes(const DomainSpec& spec) {
    spec.validate();
    ProbeLayout layout;
    const int ns = spec.n_sources;
    const int nd = spec.n_detectors;
    layout.sources.resize(2, ns);
    const double pitch = 2.0 * spec.radius / (ns + 1);
    for (int k = 0; k < ns; ++k)
        layout.sources.col(k) = Point(-spec.radius + (k + 1) * pitch, spec.source_inset);
    layout.detectors.resize(2, nd);
    for (int l = 0; l < nd; ++l) {
        const double theta = std::numbers::pi * (l + 0.5) / nd;
        layout.detectors.col(l) = spec.radius * Point(std::cos(theta), std::sin(theta));
    }
    return layout;
}

double Phantom::mu_a_at(const Point& p) const {
    for (const auto& r : regions)
        if (r.contains(p)) return r.multiplier * mu_a0;
    return mu_a0;
}

std::vector<bool> Phantom::support() const {
    std::vector<bool> inside(static_cast<std::size_t>(grid.size()), false);
    for (Index j = 0; j < grid.size(); ++j)
        for (const auto& r : regions)
            if (r.contains(grid.centroid(j))) inside[static_cast<std::size_t>(j)] = true;
    return inside;
}

Vector rasterize(const VoxelGrid& grid, double mu_a0, const std::vector<ContrastRegion>& regions) {
    Vector mu = Vector::Constant(grid.size(), mu_a0);
    for (Index j = 0; j < grid.size(); ++j) {
        for (const auto& r : regions) {
            if (r.contains(grid.centroid(j))) {
                mu[j] = r.multiplier * mu_a0;
                break;
            }
        }
    }
    return mu;
}

Phantom make_phantom(const VoxelGrid& grid, double mu_a0, std::vector<ContrastRegion> regions) {
    Phantom ph;
    ph.grid = grid;
    ph.mu_a0 = mu_a0;
    ph.regions = std::move(regions);
    ph.mu_a = rasterize(ph.grid, mu_a0, ph.regions);
    return ph;
}

Phantom sample_phantom(const DomainSpec& spec, const VoxelGrid& grid, std::uint64_t seed,
                       const PhantomSampling& sampling) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> ux(-spec.radius, spec.radius);
    std::uniform_real_distribution<double> uy(0.0, spec.radius);
    std::uniform_real_distribution<double> ur(sampling.min_radius, sampling.max_radius);
    std::uniform_int_distribution<int> count(1, 2);
    std::uniform_int_distribution<int> mult(3, 5);

    const int n = count(rng);
    const double margin = sampling.boundary_margin;
    for (int attempt = 0; attempt < sampling.max_retries; ++attempt) {
        std::vector<ContrastRegion> regions;
        bool ok = true;
        for (int i = 0; i < n && ok; ++i) {
            ContrastRegion reg;
            reg.center = Point(ux(rng), uy(rng));
            reg.radius = ur(rng);
            reg.multiplier = mult(rng);
            ok = reg.center.norm() + reg.radius < spec.radius - margin &&
                 reg.center.y() - reg.radius > margin;
            for (const auto& other : regions)
                ok = ok && (reg.center - other.center).norm() > reg.radius + other.radius + grid.side();
            regions.push_back(reg);
        }
        if (ok) return make_phantom(grid, spec.mu_a0, std::move(regions));
    }
    throw NumericError("phantom sampling exceeded " + std::to_string(sampling.max_retries) + " retries");
}

void write_phantom(std::ostream& os, const Phantom& ph) {
    os << std::setprecision(17);
    os << ph.grid.radius() << ' ' << ph.grid.side() << ' ' << ph.grid.size() << '\n';
    os << "# mu_a0 " << ph.mu_a0 << '\n';
    for (const auto& r : ph.regions)
        os << "# region " << r.center.x() << ' ' << r.center.y() << ' ' << r.radius << ' '
           << r.multiplier << '\n';
    for (Index j = 0; j < ph.grid.size(); ++j) {
        const Point c = ph.grid.centroid(j);
        os << j << ' ' << c.x() << ' ' << c.y() << ' ' << ph.mu_a[j] << '\n';
    }
}

void write_phantom(const std::string& path, const Phantom& phantom) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write phantom file " + path);
    write_phantom(os, phantom);
}

Phantom read_phantom(std::istream& is) {
    double radius = 0.0, side = 0.0;
    Index n = 0;
    std::string line;
    if (!std::getline(is, line)) throw IoError("phantom file: missing header");
    {
        std::istringstream hs(line);
        if (!(hs >> radius >> side >> n)) throw IoError("phantom file: malformed header");
    }
    Phantom ph;
    ph.grid = VoxelGrid(radius, side);
    if (ph.grid.size() != n) throw IoError("phantom file: voxel count does not match grid");
    ph.mu_a.resize(n);
    Index seen = 0;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::istringstream ls(line);
        if (line[0] == '#') {
            std::string hash, key;
            ls >> hash >> key;
            if (key == "mu_a0") {
                ls >> ph.mu_a0;
            } else if (key == "region") {
                ContrastRegion r;
                double cx = 0.0, cy = 0.0;
                if (!(ls >> cx >> cy >> r.radius >> r.multiplier))
                    throw IoError("phantom file: malformed region line");
                r.center = Point(cx, cy);
                ph.regions.push_back(r);
            }
            continue;
        }
        Index j = 0;
        double x = 0.0, y = 0.0, mu = 0.0;
        if (!(ls >> j >> x >> y >> mu) || j < 0 || j >= n)
            throw IoError("phantom file: malformed voxel line");
        ph.mu_a[j] = mu;
        ++seen;
    }
    if (seen != n) throw IoError("phantom file: expected " + std::to_string(n) + " voxels");
    if (!(ph.mu_a0 > 0.0)) throw IoError("phantom file: missing mu_a0");
    return ph;
}

Phantom read_phantom(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingPrerequisite("cannot open phantom file " + path);
    return read_phantom(is);
}

}  // namespace dot::geometry
