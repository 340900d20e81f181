#include "dot/metrics.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <iomanip>
#include <istream>
#include <limits>
#include <map>
#include <ostream>
#include <sstream>

namespace dot::metrics {

SegmentedReconstruction segment(const Vector& mu_a, const geometry::VoxelGrid& grid, double threshold) {
    if (mu_a.size() != grid.size()) throw InvalidArgument("reconstruction length does not match the grid");
    SegmentedReconstruction seg;
    seg.threshold = threshold;
    seg.labels.assign(static_cast<std::size_t>(grid.size()), 0);
    std::vector<Index> stack;
    for (Index j = 0; j < grid.size(); ++j) {
        if (!(mu_a[j] > threshold) || seg.labels[static_cast<std::size_t>(j)] != 0) continue;
        const int label = static_cast<int>(seg.components.size()) + 1;
        Component comp;
        stack.assign(1, j);
        seg.labels[static_cast<std::size_t>(j)] = label;
        while (!stack.empty()) {
            const Index v = stack.back();
            stack.pop_back();
            comp.voxels.push_back(v);
            const auto [r, c] = grid.cell(v);
            const int nbr[4][2] = {{r - 1, c}, {r + 1, c}, {r, c - 1}, {r, c + 1}};
            for (const auto& rc : nbr) {
                const Index w = grid.ordinal(rc[0], rc[1]);
                if (w < 0 || !(mu_a[w] > threshold) || seg.labels[static_cast<std::size_t>(w)] != 0) continue;
                seg.labels[static_cast<std::size_t>(w)] = label;
                stack.push_back(w);
            }
        }
        std::sort(comp.voxels.begin(), comp.voxels.end());
        double sum = 0.0;
        for (Index v : comp.voxels) {
            comp.centroid += grid.centroid(v);
            sum += mu_a[v];
        }
        const auto n = static_cast<double>(comp.voxels.size());
        comp.centroid /= n;
        comp.mean_mu_a = sum / n;
        seg.components.push_back(std::move(comp));
    }
    return seg;
}

std::vector<int> assign_components(const SegmentedReconstruction& seg,
                                   const std::vector<geometry::ContrastRegion>& regions) {
    if (regions.empty()) throw InvalidArgument("ground truth has no contrast region");
    std::vector<int> out;
    out.reserve(seg.components.size());
    for (const auto& comp : seg.components) {
        int best = 0;
        double best_d = std::numeric_limits<double>::infinity();
        for (std::size_t r = 0; r < regions.size(); ++r) {
            const double d = (comp.centroid - regions[r].center).squaredNorm();
            if (d < best_d) {
                best_d = d;
                best = static_cast<int>(r);
            }
        }
        out.push_back(best);
    }
    return out;
}

std::vector<RegionAcr> acr(const SegmentedReconstruction& seg, const std::vector<int>& assignment,
                           const geometry::Phantom& truth) {
    if (assignment.size() != seg.components.size()) throw InvalidArgument("assignment does not match the components");
    std::vector<RegionAcr> out;
    for (std::size_t r = 0; r < truth.regions.size(); ++r) {
        double sum = 0.0;
        std::size_t n = 0;
        for (std::size_t c = 0; c < seg.components.size(); ++c) {
            if (assignment[c] != static_cast<int>(r)) continue;
            const auto& comp = seg.components[c];
            sum += comp.mean_mu_a * static_cast<double>(comp.voxels.size());
            n += comp.voxels.size();
        }
        RegionAcr ra;
        ra.region = static_cast<int>(r);
        ra.multiplier = truth.regions[r].multiplier;
        if (n > 0) ra.acr = sum / static_cast<double>(n);
        out.push_back(ra);
    }
    return out;
}

namespace {

std::pair<std::size_t, std::size_t> overlap_counts(const SegmentedReconstruction& seg,
                                                   const geometry::Phantom& truth, std::size_t& truth_count) {
    if (truth.regions.empty()) throw InvalidArgument("ground truth has no contrast region");
    const auto support = truth.support();
    if (support.size() != seg.labels.size()) throw InvalidArgument("segmentation does not match the phantom grid");
    std::size_t hit = 0, detected = 0;
    truth_count = 0;
    for (std::size_t j = 0; j < support.size(); ++j) {
        const bool on = seg.labels[j] != 0;
        truth_count += support[j];
        detected += on;
        hit += on && support[j];
    }
    if (truth_count == 0) throw InvalidArgument("ground-truth regions cover no voxel");
    return {hit, detected};
}

}  // namespace

double tpr(const SegmentedReconstruction& seg, const geometry::Phantom& truth) {
    std::size_t truth_count = 0;
    const auto [hit, detected] = overlap_counts(seg, truth, truth_count);
    (void)detected;
    return static_cast<double>(hit) / static_cast<double>(truth_count);
}

double precision(const SegmentedReconstruction& seg, const geometry::Phantom& truth) {
    std::size_t truth_count = 0;
    const auto [hit, detected] = overlap_counts(seg, truth, truth_count);
    return detected ? static_cast<double>(hit) / static_cast<double>(detected) : 0.0;
}

SampleEvaluation evaluate_sample(const Vector& recon, const geometry::Phantom& truth, double threshold,
                                 Index sample_id, const std::string& method, double noise) {
    const auto seg = segment(recon, truth.grid, threshold);
    SampleEvaluation e;
    e.sample_id = sample_id;
    e.method = method;
    e.noise = noise;
    e.tpr = tpr(seg, truth);
    e.precision = precision(seg, truth);
    e.regions = acr(seg, assign_components(seg, truth.regions), truth);
    return e;
}

const BinStats& AggregateRow::bin(int multiplier) const {
    for (const auto& b : bins)
        if (b.multiplier == multiplier) return b;
    throw InvalidArgument("no bin for multiplier " + std::to_string(multiplier));
}

namespace {

std::pair<double, double> mean_std(const std::vector<double>& v) {
    if (v.empty()) return {0.0, 0.0};
    double mean = 0.0;
    for (double x : v) mean += x;
    mean /= static_cast<double>(v.size());
    double var = 0.0;
    for (double x : v) var += (x - mean) * (x - mean);
    return {mean, std::sqrt(var / static_cast<double>(v.size()))};
}

}  // namespace

std::vector<AggregateRow> aggregate(const std::vector<SampleEvaluation>& samples,
                                    const std::vector<std::string>& method_order) {
    if (samples.empty()) throw InvalidArgument("nothing to aggregate");
    std::vector<std::string> methods = method_order;
    for (const auto& s : samples)
        if (std::find(methods.begin(), methods.end(), s.method) == methods.end()) methods.push_back(s.method);

    std::vector<AggregateRow> rows;
    for (const auto& method : methods) {
        std::vector<double> noises;
        for (const auto& s : samples)
            if (s.method == method && std::find(noises.begin(), noises.end(), s.noise) == noises.end())
                noises.push_back(s.noise);
        std::sort(noises.begin(), noises.end());
        for (double noise : noises) {
            AggregateRow row;
            row.method = method;
            row.noise = noise;
            std::vector<double> tprs, precs;
            std::map<int, std::vector<double>> per_bin{{3, {}}, {4, {}}, {5, {}}};
            for (const auto& s : samples) {
                if (s.method != method || s.noise != noise) continue;
                tprs.push_back(s.tpr);
                precs.push_back(s.precision);
                for (const auto& r : s.regions) {
                    ++row.regions;
                    if (r.acr) per_bin[r.multiplier].push_back(*r.acr);
                    else ++row.missed;
                }
            }
            row.samples = static_cast<Index>(tprs.size());
            std::tie(row.tpr_mean, row.tpr_std) = mean_std(tprs);
            row.precision_mean = mean_std(precs).first;
            for (const auto& [m, values] : per_bin) {
                BinStats b;
                b.multiplier = m;
                b.count = static_cast<Index>(values.size());
                std::tie(b.mean, b.std) = mean_std(values);
                row.bins.push_back(b);
            }
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

void write_sample_csv(std::ostream& os, const std::vector<SampleEvaluation>& samples) {
    os << "sample_id,method,noise,region_id,bin,acr,tpr,precision\n";
    os << std::setprecision(17);
    for (const auto& s : samples) {
        for (const auto& r : s.regions) {
            os << s.sample_id << ',' << s.method << ',' << s.noise << ',' << r.region << ',' << r.multiplier << ',';
            if (r.acr) os << *r.acr;
            os << ',' << s.tpr << ',' << s.precision << '\n';
        }
    }
}

std::vector<SampleEvaluation> read_sample_csv(std::istream& is) {
    std::string line;
    if (!std::getline(is, line) || line.rfind("sample_id,", 0) != 0) throw IoError("missing per-sample CSV header");
    std::vector<SampleEvaluation> out;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::vector<std::string> f;
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) f.push_back(cell);
        if (f.size() == 7) f.emplace_back();
        if (f.size() != 8) throw IoError("malformed per-sample CSV line: " + line);
        try {
            const Index id = std::stoll(f[0]);
            const double noise = std::stod(f[2]);
            if (out.empty() || out.back().sample_id != id || out.back().method != f[1] || out.back().noise != noise) {
                SampleEvaluation e;
                e.sample_id = id;
                e.method = f[1];
                e.noise = noise;
                e.tpr = std::stod(f[6]);
                e.precision = std::stod(f[7]);
                out.push_back(std::move(e));
            }
            RegionAcr r;
            r.region = std::stoi(f[3]);
            r.multiplier = std::stoi(f[4]);
            if (!f[5].empty()) r.acr = std::stod(f[5]);
            out.back().regions.push_back(r);
        } catch (const std::logic_error&) {
            throw IoError("malformed per-sample CSV line: " + line);
        }
    }
    return out;
}

void write_table_csv(std::ostream& os, const std::vector<AggregateRow>& rows) {
    os << "method,noise,samples";
    for (int m : {3, 4, 5}) os << ",acr" << m << "_mean,acr" << m << "_std,acr" << m << "_n";
    os << ",tpr,tpr_std,precision,missed_rate\n";
    os << std::scientific << std::setprecision(6);
    for (const auto& r : rows) {
        os << r.method << ',' << std::defaultfloat << r.noise << std::scientific << ',' << r.samples;
        for (int m : {3, 4, 5}) {
            const auto& b = r.bin(m);
            os << ',' << b.mean << ',' << b.std << ',' << b.count;
        }
        os << ',' << r.tpr_mean << ',' << r.tpr_std << ',' << r.precision_mean << ',' << r.missed_rate() << '\n';
    }
}

void write_pgm(std::ostream& os, const Vector& mu_a, const geometry::VoxelGrid& grid, double mu_a0) {
    if (mu_a.size() != grid.size()) throw InvalidArgument("map length does not match the grid");
    if (!(mu_a0 > 0.0)) throw InvalidArgument("background absorption must be positive");
    os << "P5\n" << grid.cols() << ' ' << grid.rows() << "\n255\n";
    for (int r = grid.rows() - 1; r >= 0; --r) {
        for (int c = 0; c < grid.cols(); ++c) {
            const Index j = grid.ordinal(r, c);
            unsigned char g = 0;
            if (j >= 0) {
                const double t = std::clamp((mu_a[j] - mu_a0) / (4.0 * mu_a0), 0.0, 1.0);
                g = static_cast<unsigned char>(std::lround(40.0 + 215.0 * t));
            }
            os.put(static_cast<char>(g));
        }
    }
}

void write_pgm(const std::string& path, const Vector& mu_a, const geometry::VoxelGrid& grid, double mu_a0) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot write " + path);
    write_pgm(os, mu_a, grid, mu_a0);
}

}  // namespace dot::metrics
