#include <doctest.h>

#include <cmath>
#include <numbers>
#include <sstream>

#include "dot/geometry.hpp"

using namespace dot;
using namespace dot::geometry;

TEST_CASE("grid voxels lie strictly inside the semidisk") {
    DomainSpec spec;
    const auto grid = build_grid(spec, 0.25);
    REQUIRE(grid.size() > 0);
    for (Index j = 0; j < grid.size(); ++j) {
        const Point c = grid.centroid(j);
        CHECK(c.norm() < 5.0);
        CHECK(c.y() > 0.0);
    }
    CHECK(grid.volume() == doctest::Approx(0.0625));
}

TEST_CASE("grid size matches an independent lattice scan") {
    // Centroids of the [-R, R] x [0, R] lattice, counted without the grid class.
    const double R = 5.0, s = 0.25;
    Index expected = 0;
    for (double y = s / 2; y < R; y += s)
        for (double x = -R + s / 2; x < R; x += s)
            if (std::hypot(x, y) < R) ++expected;
    CHECK(build_grid(DomainSpec{}, s).size() == expected);
}

TEST_CASE("degenerate grid sides are rejected") {
    DomainSpec spec;
    CHECK_THROWS_AS(build_grid(spec, 0.0), InvalidArgument);
    CHECK_THROWS_AS(build_grid(spec, -0.1), InvalidArgument);
    CHECK_THROWS_AS(build_grid(spec, 2 * spec.radius), InvalidArgument);
}

TEST_CASE("mask and centroid lookup are inverse") {
    const auto grid = build_grid(DomainSpec{}, 0.25);
    for (Index j = 0; j < grid.size(); ++j) {
        const auto [r, c] = grid.cell(j);
        CHECK(grid.ordinal(r, c) == j);
        CHECK((grid.lattice_centroid(r, c) - grid.centroid(j)).norm() == 0.0);
    }
    CHECK(grid.ordinal(-1, 0) == -1);
    CHECK(grid.ordinal(0, grid.cols()) == -1);
}

TEST_CASE("default probe layout") {
    DomainSpec spec;
    const auto layout = place_probes(spec);
    REQUIRE(layout.n_sources() == 19);
    REQUIRE(layout.n_detectors() == 20);
    CHECK(layout.pairs() == 380);
    for (int k = 0; k < layout.n_sources(); ++k) CHECK(layout.sources(1, k) == doctest::Approx(0.1));
    for (int l = 0; l < layout.n_detectors(); ++l)
        CHECK(layout.detectors.col(l).norm() == doctest::Approx(5.0).epsilon(1e-12));

    // Recomputed spacings are all equal.
    const double d0 = layout.sources(0, 1) - layout.sources(0, 0);
    for (int k = 1; k + 1 < layout.n_sources(); ++k) {
        const double d = layout.sources(0, k + 1) - layout.sources(0, k);
        CHECK(std::abs(d - d0) <= 1e-12 * d0);
    }
    // Sources left to right, detectors counterclockwise from the right.
    for (int k = 1; k < layout.n_sources(); ++k) CHECK(layout.sources(0, k) > layout.sources(0, k - 1));
    for (int l = 1; l < layout.n_detectors(); ++l) {
        const double a0 = std::atan2(layout.detectors(1, l - 1), layout.detectors(0, l - 1));
        const double a1 = std::atan2(layout.detectors(1, l), layout.detectors(0, l));
        CHECK(a1 > a0);
    }
}

TEST_CASE("single detector sits at the top of the arc") {
    DomainSpec spec;
    spec.n_detectors = 1;
    const auto layout = place_probes(spec);
    REQUIRE(layout.n_detectors() == 1);
    CHECK(layout.detectors(0, 0) == doctest::Approx(0.0).epsilon(1e-12));
    CHECK(layout.detectors(1, 0) == doctest::Approx(5.0));
}

TEST_CASE("pair index is a bijection") {
    const auto layout = place_probes(DomainSpec{});
    std::vector<int> seen(static_cast<std::size_t>(layout.pairs()), 0);
    for (int k = 0; k < layout.n_sources(); ++k)
        for (int l = 0; l < layout.n_detectors(); ++l) {
            const Index i = layout.pair_index(l, k);
            REQUIRE(i >= 0);
            REQUIRE(i < layout.pairs());
            ++seen[static_cast<std::size_t>(i)];
            CHECK(layout.pair(i) == std::make_pair(l, k));
        }
    for (int s : seen) CHECK(s == 1);
}

TEST_CASE("domain validation") {
    DomainSpec spec;
    CHECK_NOTHROW(spec.validate());
    CHECK(spec.diffusion() == doctest::Approx(1.0 / 0.3));
    CHECK(spec.attenuation() == doctest::Approx(std::sqrt(0.003)));
    auto bad = spec;
    bad.radius = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = spec;
    bad.mu_a0 = 2.0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = spec;
    bad.source_inset = 6.0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
    bad = spec;
    bad.accommodation = 0;
    CHECK_THROWS_AS(bad.validate(), InvalidArgument);
}

TEST_CASE("phantom sampling is deterministic and respects the constraints") {
    DomainSpec spec;
    const auto grid = build_grid(spec, 0.25);
    const auto a = sample_phantom(spec, grid, 42);
    const auto b = sample_phantom(spec, grid, 42);
    CHECK(a.mu_a == b.mu_a);
    REQUIRE(a.regions.size() == b.regions.size());

    for (std::uint64_t seed = 0; seed < 300; ++seed) {
        const auto p = sample_phantom(spec, grid, seed);
        REQUIRE((p.regions.size() == 1 || p.regions.size() == 2));
        for (const auto& r : p.regions) {
            CHECK(r.center.norm() + r.radius < spec.radius);
            CHECK(r.center.y() - r.radius > 0.0);
            CHECK((r.multiplier >= 3 && r.multiplier <= 5));
        }
        if (p.regions.size() == 2) {
            const auto& r0 = p.regions[0];
            const auto& r1 = p.regions[1];
            CHECK((r0.center - r1.center).norm() > r0.radius + r1.radius);
        }
        CHECK(p.mu_a.minCoeff() >= spec.mu_a0);
        CHECK(p.mu_a.maxCoeff() <= 5 * spec.mu_a0);
        // Re-rasterizing the region list reproduces the map exactly.
        CHECK(rasterize(grid, spec.mu_a0, p.regions) == p.mu_a);
    }
}

TEST_CASE("multiplier frequencies are uniform") {
    DomainSpec spec;
    const auto grid = build_grid(spec, 0.5);  // coarser grid keeps the test quick
    int counts[3] = {0, 0, 0};
    int total = 0;
    for (std::uint64_t seed = 0; total < 10000; ++seed)
        for (const auto& r : sample_phantom(spec, grid, seed).regions) {
            ++counts[r.multiplier - 3];
            ++total;
        }
    const double n = total, p = 1.0 / 3.0, sigma = std::sqrt(n * p * (1 - p));
    double chi2 = 0;
    for (int c : counts) {
        CHECK(std::abs(c - n * p) <= 3 * sigma);
        chi2 += (c - n * p) * (c - n * p) / (n * p);
    }
    CHECK(chi2 < 13.8);  // 0.999 quantile, 2 degrees of freedom
}

TEST_CASE("rasterization counts a voxel by its centroid") {
    DomainSpec spec;
    const auto grid = build_grid(spec, 0.25);
    ContrastRegion r{Point(0.0, 2.5), 1.0, 4};
    const auto p = make_phantom(grid, spec.mu_a0, {r});
    for (Index j = 0; j < grid.size(); ++j) {
        const double expected = r.contains(grid.centroid(j)) ? 0.04 : 0.01;
        CHECK(p.mu_a[j] == doctest::Approx(expected));
    }
    const auto support = p.support();
    for (Index j = 0; j < grid.size(); ++j) CHECK(support[static_cast<std::size_t>(j)] == r.contains(grid.centroid(j)));
}

TEST_CASE("phantom file round trip") {
    DomainSpec spec;
    const auto grid = build_grid(spec, 0.25);
    const auto p = sample_phantom(spec, grid, 7);
    std::stringstream ss;
    write_phantom(ss, p);
    const auto q = read_phantom(ss);
    CHECK(q.mu_a == p.mu_a);
    CHECK(q.mu_a0 == p.mu_a0);
    CHECK(q.grid.size() == grid.size());
    CHECK(q.grid.hash() == grid.hash());
    REQUIRE(q.regions.size() == p.regions.size());
    for (std::size_t i = 0; i < p.regions.size(); ++i) {
        CHECK(q.regions[i].center == p.regions[i].center);
        CHECK(q.regions[i].radius == p.regions[i].radius);
        CHECK(q.regions[i].multiplier == p.regions[i].multiplier);
    }
}

TEST_CASE("malformed phantom files are rejected") {
    std::stringstream ss("5 0.25 3\n0 0 0 0.01\n");
    CHECK_THROWS(read_phantom(ss));
}
