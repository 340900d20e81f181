#include "dot/rytov.hpp"

#include <algorithm>
#include <bit>
#include <cstring>
#include <fstream>
#include <iomanip>

namespace dot::rytov {

static_assert(std::endian::native == std::endian::little, "binary formats assume a little-endian host");

double background_fluence_greens(const geometry::DomainSpec& spec, const Point& a, const Point& b) {
    return spec.source_intensity / spec.diffusion() * greens_modified_helmholtz(spec.attenuation(), a - b);
}

SensitivityMatrix assemble_jacobian(const geometry::DomainSpec& spec, const geometry::VoxelGrid& grid,
                                    const geometry::ProbeLayout& layout) {
    spec.validate();
    SensitivityMatrix J;
    J.grid = grid;
    J.layout = layout;
    J.alpha0 = spec.attenuation();
    const double diff = spec.diffusion();
    const double s0 = spec.source_intensity;
    const double floor = 0.5 * grid.side();
    const double alpha = J.alpha0;
    auto fluence = [&](double distance) { return s0 / diff * greens_modified_helmholtz(alpha, distance); };

    const Index n = grid.size();
    // Kernel values from every probe to every centroid.
    Matrix g_det(layout.n_detectors(), n), u_src(layout.n_sources(), n);
    for (Index j = 0; j < n; ++j) {
        const Point r = grid.centroid(j);
        for (int l = 0; l < layout.n_detectors(); ++l)
            g_det(l, j) = greens_modified_helmholtz(alpha, std::max((layout.detectors.col(l) - r).norm(), floor));
        for (int k = 0; k < layout.n_sources(); ++k)
            u_src(k, j) = fluence(std::max((layout.sources.col(k) - r).norm(), floor));
    }
    J.entries.resize(layout.pairs(), n);
    for (int k = 0; k < layout.n_sources(); ++k) {
        for (int l = 0; l < layout.n_detectors(); ++l) {
            const double direct = fluence((layout.sources.col(k) - layout.detectors.col(l)).norm());
            J.entries.row(layout.pair_index(l, k)) =
                (grid.volume() / (diff * direct)) * g_det.row(l).cwiseProduct(u_src.row(k));
        }
    }
    return J;
}

namespace {
constexpr char kJacobianMagic[8] = {'D', 'O', 'T', 'J', 'A', 'C', '0', '1'};

template <typename T>
void put(std::ostream& os, T v) {
    os.write(reinterpret_cast<const char*>(&v), sizeof v);
}
template <typename T>
T get(std::istream& is) {
    T v{};
    if (!is.read(reinterpret_cast<char*>(&v), sizeof v)) throw IoError("jacobian file truncated");
    return v;
}
}  // namespace

void write_jacobian(const std::string& path, const SensitivityMatrix& J) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write jacobian file " + path);
    os.write(kJacobianMagic, sizeof kJacobianMagic);
    put<std::uint64_t>(os, static_cast<std::uint64_t>(J.rows()));
    put<std::uint64_t>(os, static_cast<std::uint64_t>(J.cols()));
    put<double>(os, J.alpha0);
    put<std::uint64_t>(os, J.grid.hash());
    const Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm = J.entries;
    os.write(reinterpret_cast<const char*>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size()));
}

SensitivityMatrix read_jacobian(const std::string& path, const geometry::VoxelGrid& grid,
                                const geometry::ProbeLayout& layout) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw MissingPrerequisite("cannot open jacobian file " + path + " (run `jacobian` first)");
    char magic[8];
    if (!is.read(magic, sizeof magic) || std::memcmp(magic, kJacobianMagic, sizeof magic) != 0)
        throw IoError("not a jacobian file: " + path);
    const auto m = get<std::uint64_t>(is);
    const auto n = get<std::uint64_t>(is);
    SensitivityMatrix J;
    J.alpha0 = get<double>(is);
    const auto hash = get<std::uint64_t>(is);
    if (static_cast<Index>(m) != layout.pairs() || static_cast<Index>(n) != grid.size() || hash != grid.hash())
        throw InvalidArgument("jacobian " + path + " was assembled for a different grid or probe layout");
    Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor> rm(m, n);
    if (!is.read(reinterpret_cast<char*>(rm.data()), static_cast<std::streamsize>(sizeof(double) * rm.size())))
        throw IoError("jacobian file truncated: " + path);
    J.entries = rm;
    J.grid = grid;
    J.layout = layout;
    return J;
}

void write_jacobian_csv(std::ostream& os, const SensitivityMatrix& J) {
    os << std::setprecision(17);
    for (Index i = 0; i < J.rows(); ++i) {
        for (Index j = 0; j < J.cols(); ++j) os << (j ? "," : "") << J.entries(i, j);
        os << '\n';
    }
}

RytovData rytov_transform(const forward::MeasurementSet& m) {
    if (m.fluence.size() != m.background_fluence.size())
        throw InvalidArgument("fluence and background sizes differ");
    if (!(m.fluence.array() > 0.0).all() || !(m.background_fluence.array() > 0.0).all())
        throw InvalidArgument("log-ratio undefined for non-positive fluence");
    return RytovData{(m.fluence.array() / m.background_fluence.array()).log().matrix()};
}

FilteredSvd::FilteredSvd(const Matrix& J) {
    Eigen::BDCSVD<Matrix> svd(J, Eigen::ComputeThinU | Eigen::ComputeThinV);
    if (svd.info() != Eigen::Success) throw NumericError("SVD of the sensitivity matrix failed");
    u_ = svd.matrixU();
    v_ = svd.matrixV();
    sigma_ = svd.singularValues();
}

Vector FilteredSvd::solve(const Vector& y, double alpha) const {
    if (!(alpha >= 0.0)) throw InvalidArgument("regularization weight must be non-negative");
    if (y.size() != u_.rows()) throw InvalidArgument("data length does not match the matrix rows");
    const double cutoff = 1e-12 * (sigma_.size() ? sigma_[0] : 0.0);
    Vector coeff = u_.transpose() * y;
    for (Index i = 0; i < sigma_.size(); ++i) {
        const double s = sigma_[i];
        coeff[i] *= alpha > 0.0 ? tikhonov_filter(s, alpha) : (s > cutoff ? 1.0 / s : 0.0);
    }
    return v_ * coeff;
}

Vector tikhonov_filtered_solve(const Matrix& J, const Vector& y, double alpha) {
    return FilteredSvd(J).solve(y, alpha);
}

}  // namespace dot::rytov
