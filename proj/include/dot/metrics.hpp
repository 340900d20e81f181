#pragma once

#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "dot/core.hpp"
#include "dot/geometry.hpp"

namespace dot::metrics {

struct Component {
    std::vector<Index> voxels;  // ascending ordinals
    Point centroid = Point::Zero();
    double mean_mu_a = 0.0;
};

struct SegmentedReconstruction {
    std::vector<int> labels;  // per voxel, 0 = background, k = components[k - 1]
    std::vector<Component> components;
    double threshold = 0.0;
};

/// 4-connected components of {j : mu_a[j] > threshold} on the voxel lattice.
/// Components are numbered in order of their smallest voxel ordinal.
SegmentedReconstruction segment(const Vector& mu_a, const geometry::VoxelGrid& grid, double threshold);

/// Region index for every component: the region whose center is nearest the
/// component centroid, lowest index on ties. Throws InvalidArgument without regions.
std::vector<int> assign_components(const SegmentedReconstruction& seg,
                                   const std::vector<geometry::ContrastRegion>& regions);

struct RegionAcr {
    int region = 0;
    int multiplier = 0;
    std::optional<double> acr;  // empty when no component was assigned
};

/// Mean reconstructed absorption over all voxels of the components assigned to
/// each true region.
std::vector<RegionAcr> acr(const SegmentedReconstruction& seg, const std::vector<int>& assignment,
                           const geometry::Phantom& truth);

/// Fraction of true-region voxels that are above the threshold.
double tpr(const SegmentedReconstruction& seg, const geometry::Phantom& truth);
/// Fraction of supra-threshold voxels inside a true region (0 when none are).
double precision(const SegmentedReconstruction& seg, const geometry::Phantom& truth);

struct SampleEvaluation {
    Index sample_id = 0;
    std::string method;
    double noise = 0.0;
    double tpr = 0.0;
    double precision = 0.0;
    std::vector<RegionAcr> regions;
};

SampleEvaluation evaluate_sample(const Vector& recon, const geometry::Phantom& truth, double threshold,
                                 Index sample_id = 0, const std::string& method = {}, double noise = 0.0);

struct BinStats {
    int multiplier = 0;
    Index count = 0;  // regions with an assigned component
    double mean = 0.0;
    double std = 0.0;  // population standard deviation
};

struct AggregateRow {
    std::string method;
    double noise = 0.0;
    Index samples = 0;
    double tpr_mean = 0.0;
    double tpr_std = 0.0;
    double precision_mean = 0.0;
    std::vector<BinStats> bins;  // multipliers 3, 4, 5
    Index regions = 0;
    Index missed = 0;

    double missed_rate() const { return regions ? static_cast<double>(missed) / static_cast<double>(regions) : 0.0; }
    const BinStats& bin(int multiplier) const;
};

/// One row per (method, noise), methods in the order given, noise ascending.
/// Throws InvalidArgument on an empty input.
std::vector<AggregateRow> aggregate(const std::vector<SampleEvaluation>& samples,
                                    const std::vector<std::string>& method_order = {});

/// sample_id,method,noise,region_id,bin,acr,tpr,precision
/// One line per true region; acr is empty for missed regions.
void write_sample_csv(std::ostream& os, const std::vector<SampleEvaluation>& samples);
std::vector<SampleEvaluation> read_sample_csv(std::istream& is);

/// method,noise,samples,acr3_mean,acr3_std,acr3_n,acr4_...,acr5_...,tpr,tpr_std,precision,missed_rate
void write_table_csv(std::ostream& os, const std::vector<AggregateRow>& rows);

/// Binary PGM of a voxel map on its bounding lattice, top row at y = R.
/// Gray levels: 0 outside the domain; inside, 40 + 215 t with
/// t = clamp((mu_a - mu_a0) / (4 mu_a0), 0, 1), so mu_a0 -> 40 and 5 mu_a0 -> 255.
void write_pgm(std::ostream& os, const Vector& mu_a, const geometry::VoxelGrid& grid, double mu_a0);
void write_pgm(const std::string& path, const Vector& mu_a, const geometry::VoxelGrid& grid, double mu_a0);

}  // namespace dot::metrics
