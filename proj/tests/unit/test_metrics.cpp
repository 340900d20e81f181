#include <doctest.h>

#include <cmath>
#include <map>
#include <numeric>
#include <random>
#include <sstream>

#include "dot/metrics.hpp"

using namespace dot;
using namespace dot::metrics;

namespace {

const geometry::DomainSpec kSpec{};
const double kThreshold = 1.5 * kSpec.mu_a0;

// Labels from a plain union-find over lattice-adjacent supra-threshold voxels,
// canonicalized by the smallest ordinal of each class.
std::vector<int> union_find_labels(const Vector& mu, const geometry::VoxelGrid& grid, double threshold) {
    const auto n = static_cast<std::size_t>(grid.size());
    std::vector<std::size_t> parent(n);
    std::iota(parent.begin(), parent.end(), 0);
    auto find = [&](std::size_t a) {
        while (parent[a] != a) a = parent[a] = parent[parent[a]];
        return a;
    };
    for (Index j = 0; j < grid.size(); ++j) {
        if (!(mu[j] > threshold)) continue;
        const auto [r, c] = grid.cell(j);
        for (const auto& [dr, dc] : {std::pair{0, 1}, std::pair{1, 0}}) {
            const Index k = grid.ordinal(r + dr, c + dc);
            if (k >= 0 && mu[k] > threshold) parent[find(static_cast<std::size_t>(j))] = find(static_cast<std::size_t>(k));
        }
    }
    std::map<std::size_t, int> label_of_root;
    std::vector<int> labels(n, 0);
    for (std::size_t j = 0; j < n; ++j) {
        if (!(mu[static_cast<Index>(j)] > threshold)) continue;
        const auto root = find(j);
        auto it = label_of_root.find(root);
        if (it == label_of_root.end()) it = label_of_root.emplace(root, static_cast<int>(label_of_root.size()) + 1).first;
        labels[j] = it->second;
    }
    return labels;
}

// Random blotchy map: background plus thresholded smooth noise.
Vector blotchy(const geometry::VoxelGrid& grid, std::uint64_t seed) {
    std::mt19937_64 rng(seed);
    std::uniform_real_distribution<double> u(-5.0, 5.0), ur(0.3, 1.5);
    Vector mu = Vector::Constant(grid.size(), kSpec.mu_a0);
    for (int b = 0; b < 8; ++b) {
        const Point c(u(rng), std::abs(u(rng)));
        const double r = ur(rng);
        for (Index j = 0; j < grid.size(); ++j)
            if ((grid.centroid(j) - c).norm() < r) mu[j] += 0.01 * (1.0 + (j % 3));
    }
    return mu;
}

std::vector<bool> above(const SegmentedReconstruction& seg) {
    std::vector<bool> m(seg.labels.size());
    for (std::size_t j = 0; j < m.size(); ++j) m[j] = seg.labels[j] != 0;
    return m;
}

}  // namespace

TEST_CASE("segmentation of simple maps") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    const auto flat = segment(Vector::Constant(grid.size(), kSpec.mu_a0), grid, kThreshold);
    CHECK(flat.components.empty());
    for (int l : flat.labels) CHECK(l == 0);

    const geometry::ContrastRegion a{Point(-2.0, 2.0), 0.8, 3}, b{Point(2.0, 2.5), 1.0, 5};
    const auto ph = geometry::make_phantom(grid, kSpec.mu_a0, {a, b});
    const auto seg = segment(ph.mu_a, grid, kThreshold);
    REQUIRE(seg.components.size() == 2);
    Index in_a = 0, in_b = 0;
    for (Index j = 0; j < grid.size(); ++j) {
        in_a += a.contains(grid.centroid(j));
        in_b += b.contains(grid.centroid(j));
    }
    // Region a has the smaller ordinals (rows fill bottom to top, left to right).
    const auto& ca = seg.components[0].centroid.x() < 0 ? seg.components[0] : seg.components[1];
    const auto& cb = seg.components[0].centroid.x() < 0 ? seg.components[1] : seg.components[0];
    CHECK(static_cast<Index>(ca.voxels.size()) == in_a);
    CHECK(static_cast<Index>(cb.voxels.size()) == in_b);
    CHECK(ca.mean_mu_a == doctest::Approx(0.03));
    CHECK(cb.mean_mu_a == doctest::Approx(0.05));
    CHECK(seg.threshold == kThreshold);
    CHECK_THROWS_AS(segment(Vector::Zero(3), grid, kThreshold), InvalidArgument);
}

TEST_CASE("segmentation equals a union-find oracle") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    for (std::uint64_t seed = 0; seed < 30; ++seed) {
        const Vector mu = blotchy(grid, seed);
        const auto seg = segment(mu, grid, kThreshold);
        const auto oracle = union_find_labels(mu, grid, kThreshold);
        CHECK(seg.labels == oracle);
        for (std::size_t k = 0; k < seg.components.size(); ++k) {
            const auto& comp = seg.components[k];
            REQUIRE(!comp.voxels.empty());
            CHECK(std::is_sorted(comp.voxels.begin(), comp.voxels.end()));
            Point c = Point::Zero();
            double mean = 0.0;
            for (Index j : comp.voxels) {
                CHECK(mu[j] > kThreshold);
                CHECK(seg.labels[static_cast<std::size_t>(j)] == static_cast<int>(k) + 1);
                c += grid.centroid(j);
                mean += mu[j];
            }
            const double n = static_cast<double>(comp.voxels.size());
            CHECK((comp.centroid - c / n).norm() <= 1e-12);
            CHECK(comp.mean_mu_a == doctest::Approx(mean / n).epsilon(1e-12));
        }
    }
}

TEST_CASE("raising the threshold never adds voxels") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Vector mu = blotchy(grid, seed);
        auto prev = above(segment(mu, grid, 1.1 * kSpec.mu_a0));
        for (double t = 1.5; t < 5.0; t += 0.5) {
            const auto now = above(segment(mu, grid, t * kSpec.mu_a0));
            for (std::size_t j = 0; j < now.size(); ++j) CHECK((!now[j] || prev[j]));
            prev = now;
        }
    }
}

TEST_CASE("component assignment") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    // Perfect reconstruction: every component lands on its own region.
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto ph = geometry::sample_phantom(kSpec, grid, seed);
        const auto seg = segment(ph.mu_a, grid, kThreshold);
        const auto asg = assign_components(seg, ph.regions);
        REQUIRE(asg.size() == seg.components.size());
        for (std::size_t k = 0; k < asg.size(); ++k)
            CHECK(ph.regions[static_cast<std::size_t>(asg[k])].contains(grid.centroid(seg.components[k].voxels[0])));
    }

    // Tie: a component on the symmetry axis between two mirrored regions.
    const auto ph = geometry::make_phantom(grid, kSpec.mu_a0, {{Point(0.0, 2.0), 0.6, 4}});
    const auto seg = segment(ph.mu_a, grid, kThreshold);
    REQUIRE(seg.components.size() == 1);
    const std::vector<geometry::ContrastRegion> mirrored = {{Point(1.5, seg.components[0].centroid.y()), 0.5, 3},
                                                            {Point(-1.5, seg.components[0].centroid.y()), 0.5, 5}};
    CHECK(std::abs(seg.components[0].centroid.x()) <= 1e-12);
    CHECK(assign_components(seg, mirrored) == std::vector<int>{0});
    CHECK_THROWS_AS(assign_components(seg, {}), InvalidArgument);
}

TEST_CASE("assignment equals exhaustive distance minimization") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    std::mt19937_64 rng(3);
    std::uniform_real_distribution<double> u(-4.0, 4.0);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto seg = segment(blotchy(grid, seed + 100), grid, kThreshold);
        std::vector<geometry::ContrastRegion> regions;
        for (int r = 0; r < 4; ++r) regions.push_back({Point(u(rng), std::abs(u(rng))), 0.5, 3 + r % 3});
        const auto asg = assign_components(seg, regions);
        for (std::size_t k = 0; k < seg.components.size(); ++k) {
            std::vector<double> d;
            for (const auto& r : regions) d.push_back((seg.components[k].centroid - r.center).norm());
            const auto best = std::min_element(d.begin(), d.end()) - d.begin();
            CHECK(asg[k] == best);
        }
    }
}

TEST_CASE("ACR values") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    const auto ph = geometry::make_phantom(grid, kSpec.mu_a0, {{Point(0.5, 2.0), 1.0, 3}});
    auto ev = evaluate_sample(ph.mu_a, ph, kThreshold);
    REQUIRE(ev.regions.size() == 1);
    CHECK(ev.regions[0].multiplier == 3);
    CHECK(*ev.regions[0].acr == doctest::Approx(0.03));

    // Two voxels at 0.02 and 0.04 forming one component.
    Vector mu = Vector::Constant(grid.size(), kSpec.mu_a0);
    const auto j0 = ph.support();
    Index first = -1;
    for (Index j = 0; j < grid.size() && first < 0; ++j)
        if (j0[static_cast<std::size_t>(j)]) first = j;
    const auto [r, c] = grid.cell(first);
    const Index second = grid.ordinal(r, c + 1);
    REQUIRE(second >= 0);
    mu[first] = 0.02;
    mu[second] = 0.04;
    ev = evaluate_sample(mu, ph, kThreshold);
    CHECK(*ev.regions[0].acr == doctest::Approx(0.03));

    // No component: the region is reported missing.
    ev = evaluate_sample(Vector::Constant(grid.size(), kSpec.mu_a0), ph, kThreshold);
    CHECK_FALSE(ev.regions[0].acr.has_value());
    CHECK(ev.tpr == 0.0);
    CHECK(ev.precision == 0.0);

    // Clamped maps give ACR within the clamp range.
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
        const Vector m = (blotchy(grid, seed) * 2.0).cwiseMax(kSpec.mu_a0).cwiseMin(5 * kSpec.mu_a0);
        const auto truth = geometry::sample_phantom(kSpec, grid, seed);
        for (const auto& reg : evaluate_sample(m, truth, kThreshold).regions)
            if (reg.acr) {
                CHECK(*reg.acr >= kSpec.mu_a0);
                CHECK(*reg.acr <= 5 * kSpec.mu_a0);
            }
    }
}

TEST_CASE("TPR and precision") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    const auto ph = geometry::make_phantom(grid, kSpec.mu_a0, {{Point(1.0, 2.0), 1.0, 4}});
    auto seg = segment(ph.mu_a, grid, kThreshold);
    CHECK(tpr(seg, ph) == 1.0);
    CHECK(precision(seg, ph) == 1.0);
    const auto elsewhere = geometry::make_phantom(grid, kSpec.mu_a0, {{Point(-2.0, 2.0), 1.0, 4}});
    seg = segment(elsewhere.mu_a, grid, kThreshold);
    CHECK(tpr(seg, ph) == 0.0);
    CHECK(precision(seg, ph) == 0.0);
    const auto empty = geometry::make_phantom(grid, kSpec.mu_a0, {});
    CHECK_THROWS_AS(tpr(seg, empty), InvalidArgument);
}

TEST_CASE("TPR never grows under erosion of the mask") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
        const auto truth = geometry::sample_phantom(kSpec, grid, seed);
        Vector mu = blotchy(grid, seed + 7);
        for (Index j = 0; j < grid.size(); ++j)
            if (truth.mu_a[j] > kSpec.mu_a0 && j % 4) mu[j] = 0.03;
        double prev = tpr(segment(mu, grid, kThreshold), truth);
        for (int step = 0; step < 4; ++step) {
            // Erode: drop every above-threshold voxel with a sub-threshold 4-neighbour.
            Vector eroded = mu;
            for (Index j = 0; j < grid.size(); ++j) {
                if (!(mu[j] > kThreshold)) continue;
                const auto [r, c] = grid.cell(j);
                for (const auto& [dr, dc] : {std::pair{0, 1}, std::pair{1, 0}, std::pair{0, -1}, std::pair{-1, 0}}) {
                    const Index k = grid.ordinal(r + dr, c + dc);
                    if (k < 0 || !(mu[k] > kThreshold)) eroded[j] = kSpec.mu_a0;
                }
            }
            mu = eroded;
            const double now = tpr(segment(mu, grid, kThreshold), truth);
            CHECK(now <= prev);
            prev = now;
        }
    }
}

TEST_CASE("aggregation") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    std::vector<SampleEvaluation> evs;
    const std::vector<std::string> methods = {"zeta", "alpha"};
    for (const auto& m : methods)
        for (double noise : {0.03, 0.0})
            for (Index s = 0; s < 12; ++s) {
                const auto truth = geometry::sample_phantom(kSpec, grid, static_cast<std::uint64_t>(s));
                Vector rec = truth.mu_a;
                std::mt19937_64 rng(static_cast<std::uint64_t>(s) * 7 + (m == "zeta"));
                std::normal_distribution<double> nd(0.0, 0.004 + noise * 0.2);
                for (auto& v : rec) v += nd(rng);
                evs.push_back(evaluate_sample(rec, truth, kThreshold, s, m, noise));
            }

    const auto rows = aggregate(evs, methods);
    REQUIRE(rows.size() == methods.size() * 2);
    CHECK(rows[0].method == "zeta");
    CHECK(rows[0].noise == 0.0);
    CHECK(rows[1].noise == 0.03);
    CHECK(rows[2].method == "alpha");

    // Independent pass over the per-sample CSV.
    std::stringstream csv;
    write_sample_csv(csv, evs);
    std::map<std::tuple<std::string, double, int>, std::vector<double>> acr_of;
    std::map<std::pair<std::string, double>, std::map<long, double>> tpr_of;
    std::map<std::pair<std::string, double>, int> missing, total;
    std::string line;
    std::getline(csv, line);
    while (std::getline(csv, line)) {
        std::vector<std::string> f;
        std::stringstream ls(line);
        for (std::string cell; std::getline(ls, cell, ',');) f.push_back(cell);
        if (line.back() == ',') f.emplace_back();
        REQUIRE(f.size() == 8);
        const auto key = std::make_pair(f[1], std::stod(f[2]));
        ++total[key];
        if (f[5].empty())
            ++missing[key];
        else
            acr_of[{f[1], std::stod(f[2]), std::stoi(f[4])}].push_back(std::stod(f[5]));
        tpr_of[key][std::stol(f[0])] = std::stod(f[6]);
    }
    for (const auto& row : rows) {
        const auto key = std::make_pair(row.method, row.noise);
        CHECK(row.samples == 12);
        CHECK(row.regions == total[key]);
        CHECK(row.missed == missing[key]);
        double tsum = 0.0;
        for (const auto& [id, t] : tpr_of[key]) tsum += t;
        CHECK(row.tpr_mean == doctest::Approx(tsum / 12.0).epsilon(1e-12));
        for (int mult : {3, 4, 5}) {
            const auto& v = acr_of[{row.method, row.noise, mult}];
            const auto& b = row.bin(mult);
            REQUIRE(b.count == static_cast<Index>(v.size()));
            if (v.empty()) continue;
            double mean = 0.0;
            for (double x : v) mean += x;
            mean /= static_cast<double>(v.size());
            double var = 0.0;
            for (double x : v) var += (x - mean) * (x - mean);
            CHECK(b.mean == doctest::Approx(mean).epsilon(1e-12));
            CHECK(b.std == doctest::Approx(std::sqrt(var / static_cast<double>(v.size()))).epsilon(1e-9));
        }
    }

    // The CSV reader restores what was written.
    csv.clear();
    csv.seekg(0);
    const auto back = read_sample_csv(csv);
    REQUIRE(back.size() == evs.size());
    const auto rows2 = aggregate(back, methods);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        CHECK(rows2[i].tpr_mean == doctest::Approx(rows[i].tpr_mean).epsilon(1e-12));
        CHECK(rows2[i].bin(4).mean == doctest::Approx(rows[i].bin(4).mean).epsilon(1e-12));
    }

    // Table shape.
    std::stringstream table;
    write_table_csv(table, rows);
    int lines = 0;
    while (std::getline(table, line)) ++lines;
    CHECK(lines == 1 + static_cast<int>(rows.size()));

    // A single sample has zero spread.
    const auto one = aggregate({evs[0]});
    REQUIRE(one.size() == 1);
    CHECK(one[0].tpr_std == 0.0);
    CHECK(one[0].tpr_mean == evs[0].tpr);
    CHECK_THROWS_AS(aggregate({}), InvalidArgument);
}

TEST_CASE("PGM heatmap") {
    const auto grid = geometry::build_grid(kSpec, 0.25);
    const auto ph = geometry::make_phantom(grid, kSpec.mu_a0, {{Point(0.0, 2.0), 1.0, 5}});
    std::stringstream ss;
    write_pgm(ss, ph.mu_a, grid, kSpec.mu_a0);
    std::string magic;
    int w = 0, h = 0, maxval = 0;
    ss >> magic >> w >> h >> maxval;
    ss.get();
    CHECK(magic == "P5");
    CHECK(w == grid.cols());
    CHECK(h == grid.rows());
    CHECK(maxval == 255);
    std::string pixels((std::istreambuf_iterator<char>(ss)), std::istreambuf_iterator<char>());
    REQUIRE(pixels.size() == static_cast<std::size_t>(w * h));
    int n40 = 0, n255 = 0, n0 = 0;
    for (unsigned char p : pixels) {
        n40 += p == 40;
        n255 += p == 255;
        n0 += p == 0;
    }
    CHECK(n0 + n40 + n255 == w * h);
    CHECK(n255 == static_cast<int>(std::count(ph.mu_a.begin(), ph.mu_a.end(), 0.05)));
    CHECK(n0 == w * h - grid.size());
}
