#pragma once

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "dot/core.hpp"
#include "dot/forward.hpp"
#include "dot/geometry.hpp"
#include "dot/metrics.hpp"
#include "dot/nn.hpp"
#include "dot/variational.hpp"

namespace dot::pipeline {

inline constexpr const char* kCodeVersion = "dot-0.1.0";

/// Everything a run depends on. Serialized as `key = value` lines whose keys
/// carry their units; see write_config for the full key list.
struct ExperimentConfig {
    geometry::DomainSpec domain;
    double voxel_side = 0.25;  // cm
    double fem_edge = 0.1;     // cm
    forward::NoiseReading noise_reading = forward::NoiseReading::relative_std;

    Index train_samples = 300;
    Index test_samples = 50;
    std::vector<double> noise_levels{0.0, 0.01, 0.03, 0.05};
    std::vector<std::string> methods{"lsvd", "elasticnet", "bregman", "tikhonov"};
    std::uint64_t master_seed = 1;

    geometry::PhantomSampling sampling;

    nn::LsvdTrainConfig lsvd;
    /// Noise levels of the measurement copies the learned model trains on; the
    /// clean target of every copy is the noise-free measurement.
    std::vector<double> lsvd_train_noise{0.0};
    variational::ElasticNetConfig elastic_net;
    variational::BregmanOptions bregman;
    double tikhonov_alpha = 1e-4;

    double threshold_factor = 1.5;  // segmentation threshold in units of mu_a0
    Index heatmap_samples = 3;
    int threads = 1;

    /// Throws InvalidArgument naming the offending key.
    void validate() const;
    double threshold() const { return threshold_factor * domain.mu_a0; }
};

void write_config(std::ostream& os, const ExperimentConfig& cfg);
void write_config(const std::string& path, const ExperimentConfig& cfg);
/// Unknown keys and malformed values are InvalidArgument. Missing keys keep
/// their defaults.
ExperimentConfig parse_config(std::istream& is);
ExperimentConfig read_config(const std::string& path);
/// Applies one `key = value` assignment.
void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value);

enum class Split : std::uint8_t { train = 1, test = 2 };
const char* to_string(Split s);

/// Seed of sample `index` in `split`: derive_seed(master, split << 32 | index).
/// The phantom uses derive_seed(sample, 0), noise level k uses derive_seed(sample, 1 + k).
std::uint64_t sample_seed(std::uint64_t master, Split split, Index index);

/// Layout of a run directory. Paths are relative to `root`.
struct RunLayout {
    std::string root;

    std::string config() const;
    std::string manifest() const;
    std::string jacobian() const;
    std::string model() const;
    std::string phantom(Split split, Index index) const;
    std::string measurement(Split split, Index index, double noise) const;
    std::string reconstruction(const std::string& method, double noise, Index index) const;
    std::string samples_csv() const;
    std::string table_csv() const;
    std::string heatmap(const std::string& name) const;
};

/// Noise tag used in file names: the level in percent with three decimals (`0.010` -> `n1.000`).
std::string noise_tag(double noise);

struct ManifestEntry {
    Split split = Split::train;
    Index index = 0;
    std::uint64_t seed = 0;
    std::string phantom;
    std::vector<std::string> measurements;  // one per stored noise level, ascending
};

struct DatasetManifest {
    std::string code_version;
    std::uint64_t config_hash = 0;
    std::uint64_t master_seed = 0;
    std::vector<double> noise_levels;  // stored levels, always including 0
    std::vector<ManifestEntry> entries;

    /// Throws MissingPrerequisite if a referenced file does not exist.
    void check_files(const std::string& root) const;
};

void write_manifest(std::ostream& os, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

/// Hash of the serialized config and the code version tag.
std::uint64_t config_hash(const ExperimentConfig& cfg);

/// Levels for which measurement files exist: the configured and training ones plus 0.
std::vector<double> stored_noise_levels(const ExperimentConfig& cfg);

/// Voxel map file: `# <comment>` lines, a line `N`, then one value per line.
void write_voxel_map(const std::string& path, const Vector& v, const std::string& comment = {});
Vector read_voxel_map(const std::string& path);

/// Stage results returned to the command-line driver.
struct StageSummary {
    std::vector<std::string> lines;
};

DatasetManifest cmd_generate(const ExperimentConfig& cfg, const std::string& root);
StageSummary cmd_jacobian(const ExperimentConfig& cfg, const std::string& root);
StageSummary cmd_train(const ExperimentConfig& cfg, const std::string& root);
StageSummary cmd_reconstruct(const ExperimentConfig& cfg, const std::string& root);
StageSummary cmd_evaluate(const ExperimentConfig& cfg, const std::string& root);
StageSummary cmd_compare(const ExperimentConfig& cfg, const std::string& root);

/// Rytov data log(u/u0) of a measurement file, the input of the learned model.
Vector lsvd_features(const forward::MeasurementSet& m);

/// Reconstruct one measurement with a variational method; returns mu_a.
/// `method` is one of elasticnet, bregman, tikhonov.
Vector reconstruct_variational(const std::string& method, const Matrix& J, const Vector& rytov, double mu_a0,
                               const ExperimentConfig& cfg);

}  // namespace dot::pipeline
