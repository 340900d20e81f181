#include "dot/pipeline.hpp"

#include <algorithm>
#include <atomic>
#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <functional>
#include <iomanip>
#include <mutex>
#include <optional>
#include <sstream>
#include <thread>

#include "dot/rytov.hpp"

namespace dot::pipeline {

namespace fs = std::filesystem;

namespace {

std::string format_double(double v) {
    char buf[64];
    auto r = std::to_chars(buf, buf + sizeof buf, v);
    return std::string(buf, r.ptr);
}

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r");
    return s.substr(b, e - b + 1);
}

std::vector<std::string> split_list(const std::string& s) {
    std::vector<std::string> out;
    std::string item;
    std::istringstream is(s);
    while (std::getline(is, item, ',')) {
        item = trim(item);
        if (!item.empty()) out.push_back(item);
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto* end = v.data() + v.size();
    auto r = std::from_chars(v.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end || !std::isfinite(out))
        throw InvalidArgument("config key '" + key + "': not a number: '" + v + "'");
    return out;
}

template <typename I>
I parse_integer(const std::string& key, const std::string& v) {
    I out = 0;
    const auto* end = v.data() + v.size();
    auto r = std::from_chars(v.data(), end, out);
    if (r.ec != std::errc() || r.ptr != end)
        throw InvalidArgument("config key '" + key + "': not an integer: '" + v + "'");
    return out;
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw InvalidArgument("config key '" + key + "': expected true or false, got '" + v + "'");
}

std::string join_doubles(const std::vector<double>& v) {
    std::string out;
    for (std::size_t i = 0; i < v.size(); ++i) out += (i ? "," : "") + format_double(v[i]);
    return out;
}

struct Key {
    std::string name;
    std::function<std::string(const ExperimentConfig&)> get;
    std::function<void(ExperimentConfig&, const std::string&)> set;
};

template <typename F>
Key real_key(std::string name, F field) {
    return {name, [field](const ExperimentConfig& c) { return format_double(field(const_cast<ExperimentConfig&>(c))); },
            [field, name](ExperimentConfig& c, const std::string& v) { field(c) = parse_double(name, v); }};
}

template <typename I, typename F>
Key int_key(std::string name, F field) {
    return {name, [field](const ExperimentConfig& c) { return std::to_string(field(const_cast<ExperimentConfig&>(c))); },
            [field, name](ExperimentConfig& c, const std::string& v) { field(c) = parse_integer<I>(name, v); }};
}

void add_train_keys(std::vector<Key>& keys, const std::string& prefix, nn::TrainConfig nn::LsvdTrainConfig::*stage) {
    keys.push_back(real_key(prefix + "_learning_rate", [stage](ExperimentConfig& c) -> double& { return (c.lsvd.*stage).learning_rate; }));
    keys.push_back(int_key<int>(prefix + "_epochs", [stage](ExperimentConfig& c) -> int& { return (c.lsvd.*stage).epochs; }));
    keys.push_back(int_key<int>(prefix + "_batch_size", [stage](ExperimentConfig& c) -> int& { return (c.lsvd.*stage).batch_size; }));
    keys.push_back(int_key<std::uint64_t>(prefix + "_shuffle_seed",
                                          [stage](ExperimentConfig& c) -> std::uint64_t& { return (c.lsvd.*stage).seed; }));
}

const std::vector<Key>& config_keys() {
    static const std::vector<Key> keys = [] {
        using C = ExperimentConfig;
        std::vector<Key> k;
        k.push_back(real_key("radius_cm", [](C& c) -> double& { return c.domain.radius; }));
        k.push_back(real_key("mu_a0_per_cm", [](C& c) -> double& { return c.domain.mu_a0; }));
        k.push_back(real_key("reduced_scattering_per_cm", [](C& c) -> double& { return c.domain.reduced_scattering; }));
        k.push_back(real_key("accommodation", [](C& c) -> double& { return c.domain.accommodation; }));
        k.push_back(real_key("source_intensity", [](C& c) -> double& { return c.domain.source_intensity; }));
        k.push_back(int_key<int>("n_sources", [](C& c) -> int& { return c.domain.n_sources; }));
        k.push_back(int_key<int>("n_detectors", [](C& c) -> int& { return c.domain.n_detectors; }));
        k.push_back(real_key("source_inset_cm", [](C& c) -> double& { return c.domain.source_inset; }));
        k.push_back(real_key("mu_a_max_per_cm", [](C& c) -> double& { return c.domain.mu_a_max; }));
        k.push_back(real_key("scattering_max_per_cm", [](C& c) -> double& { return c.domain.scattering_max; }));
        k.push_back(real_key("voxel_side_cm", [](C& c) -> double& { return c.voxel_side; }));
        k.push_back(real_key("fem_edge_cm", [](C& c) -> double& { return c.fem_edge; }));
        k.push_back({"noise_reading",
                     [](const C& c) {
                         return std::string(c.noise_reading == forward::NoiseReading::relative_std ? "relative_std"
                                                                                                  : "relative_variance");
                     },
                     [](C& c, const std::string& v) {
                         if (v == "relative_std") c.noise_reading = forward::NoiseReading::relative_std;
                         else if (v == "relative_variance") c.noise_reading = forward::NoiseReading::relative_variance;
                         else throw InvalidArgument("config key 'noise_reading': expected relative_std or relative_variance");
                     }});
        k.push_back(int_key<Index>("train_samples", [](C& c) -> Index& { return c.train_samples; }));
        k.push_back(int_key<Index>("test_samples", [](C& c) -> Index& { return c.test_samples; }));
        k.push_back({"noise_levels", [](const C& c) { return join_doubles(c.noise_levels); },
                     [](C& c, const std::string& v) {
                         c.noise_levels.clear();
                         for (const auto& s : split_list(v)) c.noise_levels.push_back(parse_double("noise_levels", s));
                     }});
        k.push_back({"methods",
                     [](const C& c) {
                         std::string out;
                         for (std::size_t i = 0; i < c.methods.size(); ++i) out += (i ? "," : "") + c.methods[i];
                         return out;
                     },
                     [](C& c, const std::string& v) { c.methods = split_list(v); }});
        k.push_back(int_key<std::uint64_t>("master_seed", [](C& c) -> std::uint64_t& { return c.master_seed; }));

        k.push_back(real_key("phantom_min_radius_cm", [](C& c) -> double& { return c.sampling.min_radius; }));
        k.push_back(real_key("phantom_max_radius_cm", [](C& c) -> double& { return c.sampling.max_radius; }));
        k.push_back(real_key("phantom_boundary_margin_cm", [](C& c) -> double& { return c.sampling.boundary_margin; }));
        k.push_back(int_key<int>("phantom_max_retries", [](C& c) -> int& { return c.sampling.max_retries; }));

        k.push_back(int_key<Index>("lsvd_latent_dim", [](C& c) -> Index& { return c.lsvd.arch.latent_dim; }));
        k.push_back(int_key<int>("lsvd_bridge_layers", [](C& c) -> int& { return c.lsvd.arch.bridge_layers; }));
        k.push_back(int_key<Index>("lsvd_bridge_width", [](C& c) -> Index& { return c.lsvd.arch.bridge_width; }));
        k.push_back(int_key<int>("lsvd_denoiser_channels", [](C& c) -> int& { return c.lsvd.arch.denoiser_channels; }));
        k.push_back({"lsvd_data_scaling",
                     [](const C& c) {
                         return std::string(c.lsvd.data_scaling == nn::DataScaling::global ? "global" : "per_feature");
                     },
                     [](C& c, const std::string& v) {
                         if (v == "global") c.lsvd.data_scaling = nn::DataScaling::global;
                         else if (v == "per_feature") c.lsvd.data_scaling = nn::DataScaling::per_feature;
                         else throw InvalidArgument("config key 'lsvd_data_scaling': expected global or per_feature");
                     }});
        k.push_back({"lsvd_train_noise_levels", [](const C& c) { return join_doubles(c.lsvd_train_noise); },
                     [](C& c, const std::string& v) {
                         c.lsvd_train_noise.clear();
                         for (const auto& s : split_list(v))
                             c.lsvd_train_noise.push_back(parse_double("lsvd_train_noise_levels", s));
                     }});
        add_train_keys(k, "lsvd_dae", &nn::LsvdTrainConfig::data_ae);
        add_train_keys(k, "lsvd_sae", &nn::LsvdTrainConfig::signal_ae);
        add_train_keys(k, "lsvd_bridge", &nn::LsvdTrainConfig::bridge);
        add_train_keys(k, "lsvd_denoiser", &nn::LsvdTrainConfig::denoiser);
        k.push_back({"lsvd_use_denoiser", [](const C& c) { return std::string(c.lsvd.use_denoiser ? "true" : "false"); },
                     [](C& c, const std::string& v) { c.lsvd.use_denoiser = parse_bool("lsvd_use_denoiser", v); }});
        k.push_back(int_key<int>("lsvd_denoiser_folds", [](C& c) -> int& { return c.lsvd.denoiser_folds; }));
        k.push_back(int_key<std::uint64_t>("lsvd_init_seed", [](C& c) -> std::uint64_t& { return c.lsvd.init_seed; }));

        k.push_back(real_key("en_theta", [](C& c) -> double& { return c.elastic_net.theta; }));
        k.push_back({"en_cv_rule",
                     [](const C& c) {
                         return std::string(c.elastic_net.cv_rule == variational::CvRule::min_error ? "min_error"
                                                                                                    : "one_standard_error");
                     },
                     [](C& c, const std::string& v) {
                         if (v == "min_error") c.elastic_net.cv_rule = variational::CvRule::min_error;
                         else if (v == "one_standard_error") c.elastic_net.cv_rule = variational::CvRule::one_standard_error;
                         else throw InvalidArgument("config key 'en_cv_rule': expected min_error or one_standard_error");
                     }});
        k.push_back({"en_algorithm",
                     [](const C& c) {
                         return std::string(c.elastic_net.algorithm == variational::ElasticNetAlgorithm::coordinate_descent
                                                ? "coordinate_descent"
                                                : "proximal_gradient");
                     },
                     [](C& c, const std::string& v) {
                         if (v == "coordinate_descent") c.elastic_net.algorithm = variational::ElasticNetAlgorithm::coordinate_descent;
                         else if (v == "proximal_gradient") c.elastic_net.algorithm = variational::ElasticNetAlgorithm::proximal_gradient;
                         else throw InvalidArgument("config key 'en_algorithm': expected coordinate_descent or proximal_gradient");
                     }});
        k.push_back({"en_alpha_grid", [](const C& c) { return join_doubles(c.elastic_net.alpha_grid); },
                     [](C& c, const std::string& v) {
                         c.elastic_net.alpha_grid.clear();
                         for (const auto& s : split_list(v)) c.elastic_net.alpha_grid.push_back(parse_double("en_alpha_grid", s));
                     }});
        k.push_back(int_key<int>("en_cv_folds", [](C& c) -> int& { return c.elastic_net.cv_folds; }));
        k.push_back(int_key<int>("en_grid_points", [](C& c) -> int& { return c.elastic_net.grid_points; }));
        k.push_back(real_key("en_grid_span", [](C& c) -> double& { return c.elastic_net.grid_span; }));
        k.push_back(real_key("en_tolerance", [](C& c) -> double& { return c.elastic_net.tolerance; }));
        k.push_back(int_key<int>("en_max_iters", [](C& c) -> int& { return c.elastic_net.max_iters; }));

        k.push_back(int_key<int>("bregman_max_outer", [](C& c) -> int& { return c.bregman.max_outer; }));
        k.push_back(int_key<int>("bregman_inner_iters", [](C& c) -> int& { return c.bregman.inner_iters; }));
        k.push_back(real_key("bregman_alpha_factor", [](C& c) -> double& { return c.bregman.alpha_factor; }));
        k.push_back(real_key("bregman_step_factor", [](C& c) -> double& { return c.bregman.step_factor; }));

        k.push_back(real_key("tikhonov_alpha", [](C& c) -> double& { return c.tikhonov_alpha; }));
        k.push_back(real_key("threshold_mu_a0_units", [](C& c) -> double& { return c.threshold_factor; }));
        k.push_back(int_key<Index>("heatmap_samples", [](C& c) -> Index& { return c.heatmap_samples; }));
        k.push_back(int_key<int>("threads", [](C& c) -> int& { return c.threads; }));
        return k;
    }();
    return keys;
}

const std::vector<std::string> kMethods{"lsvd", "elasticnet", "bregman", "tikhonov"};

void ensure_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec || !fs::is_directory(p)) throw IoError("cannot create directory " + p.string() + ": " + ec.message());
}

void ensure_parent(const std::string& file) {
    const fs::path parent = fs::path(file).parent_path();
    if (!parent.empty()) ensure_dir(parent);
}

void require(const std::string& path, const std::string& what, const std::string& step) {
    if (!fs::exists(path)) throw MissingPrerequisite(what + " not found at " + path + "; run '" + step + "' first");
}

/// Runs body(i) for i in [0, n) on up to `threads` workers. The first failure
/// in index order is rethrown after all workers stop.
void parallel_for(Index n, int threads, const std::function<void(Index)>& body) {
    const int workers = static_cast<int>(std::min<Index>(std::max(threads, 1), std::max<Index>(n, 1)));
    if (workers <= 1) {
        for (Index i = 0; i < n; ++i) body(i);
        return;
    }
    std::atomic<Index> next{0};
    std::atomic<bool> failed{false};
    std::mutex mu;
    Index failed_at = n;
    std::exception_ptr failure;
    auto work = [&] {
        for (Index i = next++; i < n && !failed; i = next++) {
            try {
                body(i);
            } catch (...) {
                std::lock_guard<std::mutex> lock(mu);
                if (i < failed_at) {
                    failed_at = i;
                    failure = std::current_exception();
                }
                failed = true;
            }
        }
    };
    std::vector<std::thread> pool;
    for (int t = 0; t < workers; ++t) pool.emplace_back(work);
    for (auto& t : pool) t.join();
    if (failure) std::rethrow_exception(failure);
}

std::string rel(Split split, Index index, const std::string& suffix) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06lld", static_cast<long long>(index));
    return std::string("data/") + to_string(split) + "/" + buf + suffix;
}

std::string join(const std::string& root, const std::string& relpath) { return (fs::path(root) / relpath).string(); }

std::size_t level_index(const std::vector<double>& levels, double p) {
    for (std::size_t k = 0; k < levels.size(); ++k)
        if (levels[k] == p) return k;
    throw MissingPrerequisite("noise level " + format_double(p) + " is not in the dataset; rerun 'generate'");
}

DatasetManifest load_manifest(const ExperimentConfig& cfg, const std::string& root) {
    const RunLayout layout{root};
    require(layout.manifest(), "dataset manifest", "generate");
    DatasetManifest m = read_manifest(layout.manifest());
    Index train = 0, test = 0;
    for (const auto& e : m.entries) (e.split == Split::train ? train : test)++;
    if (train < cfg.train_samples || test < cfg.test_samples)
        throw MissingPrerequisite("dataset has fewer samples than the config asks for; rerun 'generate'");
    if (m.master_seed != cfg.master_seed)
        throw MissingPrerequisite("dataset was generated with another master seed; rerun 'generate'");
    return m;
}

const ManifestEntry& entry(const DatasetManifest& m, Split split, Index index) {
    for (const auto& e : m.entries)
        if (e.split == split && e.index == index) return e;
    throw MissingPrerequisite(std::string("sample ") + to_string(split) + " " + std::to_string(index) +
                              " missing from the manifest; rerun 'generate'");
}

geometry::VoxelGrid grid_of(const ExperimentConfig& cfg) { return geometry::build_grid(cfg.domain, cfg.voxel_side); }

}  // namespace

void ExperimentConfig::validate() const {
    try {
        domain.validate();
    } catch (const InvalidArgument& e) {
        throw InvalidArgument(std::string("domain: ") + e.what());
    }
    auto bad = [](const std::string& key, const std::string& why) { throw InvalidArgument("config key '" + key + "': " + why); };
    if (!(voxel_side > 0.0) || voxel_side >= domain.radius) bad("voxel_side_cm", "must be in (0, radius)");
    if (!(fem_edge > 0.0) || fem_edge >= domain.radius) bad("fem_edge_cm", "must be in (0, radius)");
    if (train_samples < 1) bad("train_samples", "must be at least 1");
    if (test_samples < 1) bad("test_samples", "must be at least 1");
    if (noise_levels.empty()) bad("noise_levels", "must not be empty");
    for (double p : noise_levels)
        if (!(p >= 0.0) || p >= 1.0) bad("noise_levels", "levels must lie in [0, 1)");
    for (std::size_t i = 1; i < noise_levels.size(); ++i)
        if (!(noise_levels[i] > noise_levels[i - 1])) bad("noise_levels", "levels must be strictly increasing");
    if (lsvd_train_noise.empty()) bad("lsvd_train_noise_levels", "must not be empty");
    for (double p : lsvd_train_noise)
        if (!(p >= 0.0) || p >= 1.0) bad("lsvd_train_noise_levels", "levels must lie in [0, 1)");
    if (methods.empty()) bad("methods", "must name at least one method");
    for (std::size_t i = 0; i < methods.size(); ++i) {
        if (std::find(kMethods.begin(), kMethods.end(), methods[i]) == kMethods.end())
            bad("methods", "unknown method '" + methods[i] + "' (expected lsvd, elasticnet, bregman or tikhonov)");
        if (std::find(methods.begin(), methods.begin() + static_cast<std::ptrdiff_t>(i), methods[i]) !=
            methods.begin() + static_cast<std::ptrdiff_t>(i))
            bad("methods", "duplicate method '" + methods[i] + "'");
    }
    if (!(sampling.min_radius > 0.0) || !(sampling.max_radius >= sampling.min_radius))
        bad("phantom_min_radius_cm", "need 0 < min radius <= max radius");
    if (!(sampling.boundary_margin >= 0.0)) bad("phantom_boundary_margin_cm", "must be non-negative");
    if (sampling.max_retries < 1) bad("phantom_max_retries", "must be at least 1");
    if (lsvd.arch.latent_dim < 1) bad("lsvd_latent_dim", "must be at least 1");
    if (lsvd.arch.bridge_layers < 1) bad("lsvd_bridge_layers", "must be at least 1");
    if (lsvd.arch.bridge_width < 1) bad("lsvd_bridge_width", "must be at least 1");
    if (lsvd.arch.denoiser_channels < 1) bad("lsvd_denoiser_channels", "must be at least 1");
    if (lsvd.denoiser_folds < 0 || lsvd.denoiser_folds == 1) bad("lsvd_denoiser_folds", "must be 0 or at least 2");
    const std::pair<const char*, const nn::TrainConfig*> stages[] = {
        {"lsvd_dae", &lsvd.data_ae}, {"lsvd_sae", &lsvd.signal_ae}, {"lsvd_bridge", &lsvd.bridge}, {"lsvd_denoiser", &lsvd.denoiser}};
    for (const auto& [name, tc] : stages) {
        try {
            tc->validate();
        } catch (const InvalidArgument& e) {
            bad(name, e.what());
        }
    }
    try {
        elastic_net.validate();
    } catch (const InvalidArgument& e) {
        bad("en_*", e.what());
    }
    if (bregman.max_outer < 1) bad("bregman_max_outer", "must be at least 1");
    if (bregman.inner_iters < 1) bad("bregman_inner_iters", "must be at least 1");
    if (!(bregman.alpha_factor > 0.0)) bad("bregman_alpha_factor", "must be positive");
    if (!(bregman.step_factor > 0.0) || bregman.step_factor > 1.0) bad("bregman_step_factor", "must be in (0, 1]");
    if (!(tikhonov_alpha >= 0.0)) bad("tikhonov_alpha", "must be non-negative");
    if (!(threshold_factor > 1.0)) bad("threshold_mu_a0_units", "threshold must exceed mu_a0");
    if (heatmap_samples < 0) bad("heatmap_samples", "must be non-negative");
    if (threads < 1) bad("threads", "must be at least 1");
}

void write_config(std::ostream& os, const ExperimentConfig& cfg) {
    os << "# dot experiment config; lengths in cm, coefficients in cm^-1, noise as a fraction\n";
    for (const auto& k : config_keys()) os << k.name << " = " << k.get(cfg) << '\n';
}

void write_config(const std::string& path, const ExperimentConfig& cfg) {
    ensure_parent(path);
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    write_config(os, cfg);
    if (!os) throw IoError("write failed: " + path);
}

void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& k : config_keys()) {
        if (k.name == key) {
            k.set(cfg, trim(value));
            return;
        }
    }
    throw InvalidArgument("unknown config key '" + key + "'");
}

ExperimentConfig parse_config(std::istream& is) {
    ExperimentConfig cfg;
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        line = trim(line);
        if (line.empty() || line[0] == '#') continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw InvalidArgument("config line " + std::to_string(lineno) + ": expected 'key = value'");
        set_config_value(cfg, trim(line.substr(0, eq)), line.substr(eq + 1));
    }
    return cfg;
}

ExperimentConfig read_config(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingPrerequisite("cannot open config " + path);
    return parse_config(is);
}

const char* to_string(Split s) { return s == Split::train ? "train" : "test"; }

std::uint64_t sample_seed(std::uint64_t master, Split split, Index index) {
    return derive_seed(master, (static_cast<std::uint64_t>(split) << 32) | static_cast<std::uint64_t>(index));
}

std::string noise_tag(double noise) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "n%.3f", noise * 100.0);
    return buf;
}

std::string RunLayout::config() const { return join(root, "config.txt"); }
std::string RunLayout::manifest() const { return join(root, "manifest.txt"); }
std::string RunLayout::jacobian() const { return join(root, "jacobian.bin"); }
std::string RunLayout::model() const { return join(root, "model.bin"); }
std::string RunLayout::phantom(Split split, Index index) const { return join(root, rel(split, index, ".phantom.txt")); }
std::string RunLayout::measurement(Split split, Index index, double noise) const {
    return join(root, rel(split, index, "." + noise_tag(noise) + ".csv"));
}
std::string RunLayout::reconstruction(const std::string& method, double noise, Index index) const {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%06lld.txt", static_cast<long long>(index));
    return join(root, "recon/" + method + "/" + noise_tag(noise) + "/" + buf);
}
std::string RunLayout::samples_csv() const { return join(root, "results/samples.csv"); }
std::string RunLayout::table_csv() const { return join(root, "results/table.csv"); }
std::string RunLayout::heatmap(const std::string& name) const { return join(root, "results/heatmaps/" + name + ".pgm"); }

void DatasetManifest::check_files(const std::string& root) const {
    for (const auto& e : entries) {
        if (!fs::exists(join(root, e.phantom))) throw MissingPrerequisite("manifest file missing: " + e.phantom);
        for (const auto& m : e.measurements)
            if (!fs::exists(join(root, m))) throw MissingPrerequisite("manifest file missing: " + m);
    }
}

void write_manifest(std::ostream& os, const DatasetManifest& m) {
    os << "# dot dataset manifest\n";
    os << "# sample seed = derive_seed(master_seed, split << 32 | index), split train=1 test=2\n";
    os << "# phantom seed = derive_seed(sample, 0); noise seed of level k = derive_seed(sample, 1 + k)\n";
    os << "code_version " << m.code_version << '\n';
    char hash[32];
    std::snprintf(hash, sizeof hash, "%016llx", static_cast<unsigned long long>(m.config_hash));
    os << "config_hash " << hash << '\n';
    os << "master_seed " << m.master_seed << '\n';
    os << "noise_levels";
    for (double p : m.noise_levels) os << ' ' << format_double(p);
    os << '\n';
    for (const auto& e : m.entries) {
        os << "sample " << to_string(e.split) << ' ' << e.index << ' ' << e.seed << ' ' << e.phantom;
        for (const auto& f : e.measurements) os << ' ' << f;
        os << '\n';
    }
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingPrerequisite("cannot open manifest " + path + "; run 'generate' first");
    DatasetManifest m;
    std::string line;
    int lineno = 0;
    auto fail = [&](const std::string& why) {
        throw IoError("manifest " + path + " line " + std::to_string(lineno) + ": " + why);
    };
    while (std::getline(is, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::istringstream ls(line);
        std::string tag;
        ls >> tag;
        if (tag == "code_version") {
            ls >> m.code_version;
        } else if (tag == "config_hash") {
            std::string h;
            ls >> h;
            m.config_hash = std::stoull(h, nullptr, 16);
        } else if (tag == "master_seed") {
            ls >> m.master_seed;
        } else if (tag == "noise_levels") {
            double p;
            while (ls >> p) m.noise_levels.push_back(p);
        } else if (tag == "sample") {
            ManifestEntry e;
            std::string split;
            ls >> split >> e.index >> e.seed >> e.phantom;
            if (split == "train") e.split = Split::train;
            else if (split == "test") e.split = Split::test;
            else fail("unknown split '" + split + "'");
            std::string f;
            while (ls >> f) e.measurements.push_back(f);
            if (e.measurements.size() != m.noise_levels.size()) fail("measurement count does not match noise levels");
            m.entries.push_back(std::move(e));
        } else {
            fail("unknown record '" + tag + "'");
        }
        if (ls.fail() && !ls.eof()) fail("malformed record");
    }
    if (m.code_version.empty()) throw IoError("manifest " + path + " has no code_version record");
    return m;
}

std::uint64_t config_hash(const ExperimentConfig& cfg) {
    ExperimentConfig c = cfg;
    c.threads = 1;  // outputs do not depend on the worker count
    std::ostringstream os;
    write_config(os, c);
    os << kCodeVersion;
    const std::string s = os.str();
    return fnv1a(s.data(), s.size());
}

std::vector<double> stored_noise_levels(const ExperimentConfig& cfg) {
    std::vector<double> v{0.0};
    v.insert(v.end(), cfg.noise_levels.begin(), cfg.noise_levels.end());
    v.insert(v.end(), cfg.lsvd_train_noise.begin(), cfg.lsvd_train_noise.end());
    std::sort(v.begin(), v.end());
    v.erase(std::unique(v.begin(), v.end()), v.end());
    return v;
}

void write_voxel_map(const std::string& path, const Vector& v, const std::string& comment) {
    ensure_parent(path);
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    if (!comment.empty()) os << "# " << comment << '\n';
    os << v.size() << '\n';
    for (Index i = 0; i < v.size(); ++i) os << format_double(v[i]) << '\n';
    if (!os) throw IoError("write failed: " + path);
}

Vector read_voxel_map(const std::string& path) {
    std::ifstream is(path);
    if (!is) throw MissingPrerequisite("cannot open voxel map " + path);
    std::string line;
    Index n = -1;
    while (std::getline(is, line)) {
        if (line.empty() || line[0] == '#') continue;
        n = parse_integer<Index>(path, trim(line));
        break;
    }
    if (n < 0) throw IoError("voxel map " + path + " has no length line");
    Vector v(n);
    for (Index i = 0; i < n; ++i) {
        if (!std::getline(is, line)) throw IoError("voxel map " + path + " is truncated");
        try {
            v[i] = parse_double(path, trim(line));
        } catch (const InvalidArgument&) {
            throw IoError("voxel map " + path + ": bad value on entry " + std::to_string(i));
        }
    }
    return v;
}

Vector lsvd_features(const forward::MeasurementSet& m) { return rytov::rytov_transform(m).values; }

Vector reconstruct_variational(const std::string& method, const Matrix& J, const Vector& rytov, double mu_a0,
                               const ExperimentConfig& cfg) {
    // Linearized data: psi = -J dmu, so the solvers see b = -psi.
    const Vector b = -rytov;
    Vector dmu;
    if (method == "elasticnet") {
        dmu = variational::elastic_net_solve(J, b, cfg.elastic_net).x;
    } else if (method == "bregman") {
        dmu = variational::bregman_l1(J, b, cfg.bregman).state.iterate;
    } else if (method == "tikhonov") {
        dmu = rytov::tikhonov_filtered_solve(J, b, cfg.tikhonov_alpha);
    } else {
        throw InvalidArgument("unknown variational method '" + method + "'");
    }
    return (dmu.array() + mu_a0).matrix();
}

DatasetManifest cmd_generate(const ExperimentConfig& cfg, const std::string& root) {
    cfg.validate();
    const RunLayout layout{root};
    ensure_dir(fs::path(root) / "data" / "train");
    ensure_dir(fs::path(root) / "data" / "test");
    write_config(layout.config(), cfg);

    const geometry::VoxelGrid grid = grid_of(cfg);
    const forward::ForwardModel model(cfg.domain, cfg.fem_edge);
    DatasetManifest m;
    m.code_version = kCodeVersion;
    m.config_hash = config_hash(cfg);
    m.master_seed = cfg.master_seed;
    m.noise_levels = stored_noise_levels(cfg);

    std::vector<std::pair<Split, Index>> samples;
    for (Index i = 0; i < cfg.train_samples; ++i) samples.emplace_back(Split::train, i);
    for (Index i = 0; i < cfg.test_samples; ++i) samples.emplace_back(Split::test, i);
    m.entries.resize(samples.size());

    parallel_for(static_cast<Index>(samples.size()), cfg.threads, [&](Index s) {
        const auto [split, index] = samples[static_cast<std::size_t>(s)];
        ManifestEntry& e = m.entries[static_cast<std::size_t>(s)];
        e.split = split;
        e.index = index;
        e.seed = sample_seed(cfg.master_seed, split, index);
        e.phantom = rel(split, index, ".phantom.txt");
        try {
            const auto phantom = geometry::sample_phantom(cfg.domain, grid, derive_seed(e.seed, 0), cfg.sampling);
            geometry::write_phantom(join(root, e.phantom), phantom);
            const auto clean = model.simulate(phantom);
            for (std::size_t k = 0; k < m.noise_levels.size(); ++k) {
                const double p = m.noise_levels[k];
                const auto noisy = forward::add_noise(clean, p, derive_seed(e.seed, 1 + k), cfg.noise_reading);
                e.measurements.push_back(rel(split, index, "." + noise_tag(p) + ".csv"));
                forward::write_measurements(join(root, e.measurements.back()), noisy);
            }
        } catch (const Error& err) {
            const std::string where = std::string(to_string(split)) + " sample " + std::to_string(index) + ": ";
            if (err.exit_code() == 3) throw NumericError(where + err.what());
            throw IoError(where + err.what());
        }
    });

    std::ofstream os(layout.manifest());
    if (!os) throw IoError("cannot write " + layout.manifest());
    write_manifest(os, m);
    if (!os) throw IoError("write failed: " + layout.manifest());
    return m;
}

StageSummary cmd_jacobian(const ExperimentConfig& cfg, const std::string& root) {
    cfg.validate();
    const RunLayout layout{root};
    load_manifest(cfg, root);
    const auto grid = grid_of(cfg);
    const auto J = rytov::assemble_jacobian(cfg.domain, grid, geometry::place_probes(cfg.domain));
    rytov::write_jacobian(layout.jacobian(), J);
    return {{"jacobian " + std::to_string(J.rows()) + " x " + std::to_string(J.cols()) + " -> " + layout.jacobian()}};
}

StageSummary cmd_train(const ExperimentConfig& cfg, const std::string& root) {
    cfg.validate();
    const RunLayout layout{root};
    const DatasetManifest m = load_manifest(cfg, root);
    const auto grid = grid_of(cfg);
    const Index copies = static_cast<Index>(cfg.lsvd_train_noise.size());
    std::vector<std::size_t> level_of_copy;
    for (double p : cfg.lsvd_train_noise) level_of_copy.push_back(level_index(m.noise_levels, p));
    const std::size_t clean_level = level_index(m.noise_levels, 0.0);

    nn::LsvdTrainingSet set;
    const Index n = cfg.train_samples;
    const Index pairs = static_cast<Index>(cfg.domain.n_sources) * cfg.domain.n_detectors;
    set.phantoms.resize(grid.size(), n);
    set.inputs.resize(pairs, n * copies);
    set.clean.resize(pairs, n * copies);
    set.phantom_of_input.resize(static_cast<std::size_t>(n * copies));
    parallel_for(n, cfg.threads, [&](Index s) {
        const ManifestEntry& e = entry(m, Split::train, s);
        const auto phantom = geometry::read_phantom(join(root, e.phantom));
        if (phantom.mu_a.size() != grid.size()) throw InvalidArgument("phantom grid does not match the config");
        set.phantoms.col(s) = phantom.mu_a;
        const Vector clean = lsvd_features(forward::read_measurements(join(root, e.measurements[clean_level]), cfg.domain));
        for (Index c = 0; c < copies; ++c) {
            const Index col = s * copies + c;
            const auto& file = e.measurements[level_of_copy[static_cast<std::size_t>(c)]];
            set.inputs.col(col) = lsvd_features(forward::read_measurements(join(root, file), cfg.domain));
            set.clean.col(col) = clean;
            set.phantom_of_input[static_cast<std::size_t>(col)] = s;
        }
    });

    nn::LsvdTrainReport report;
    const auto model = nn::train_lsvd(set, grid, cfg.domain.mu_a0, cfg.lsvd, &report);
    nn::save_model(layout.model(), model);
    StageSummary out;
    for (const auto& st : report.stages) {
        std::ostringstream os;
        os << st.stage << ": loss " << std::setprecision(4) << st.loss_history.front() << " -> "
           << st.loss_history.back() << " in " << std::fixed << std::setprecision(1) << st.wall_time << " s";
        out.lines.push_back(os.str());
    }
    out.lines.push_back("model -> " + layout.model());
    return out;
}

StageSummary cmd_reconstruct(const ExperimentConfig& cfg, const std::string& root) {
    cfg.validate();
    const RunLayout layout{root};
    const DatasetManifest m = load_manifest(cfg, root);
    const auto grid = grid_of(cfg);
    const auto probes = geometry::place_probes(cfg.domain);
    StageSummary out;

    for (const auto& method : cfg.methods) {
        std::optional<nn::LsvdModel> model;
        std::optional<rytov::SensitivityMatrix> J;
        std::optional<variational::ElasticNetSolver> en;
        std::optional<rytov::FilteredSvd> svd;
        if (method == "lsvd") {
            require(layout.model(), "trained model", "train");
            model = nn::load_model(layout.model());
            if (model->grid_side != grid.side() || model->grid_radius != grid.radius())
                throw InvalidArgument("model grid does not match the config; rerun 'train'");
        } else {
            require(layout.jacobian(), "Jacobian", "jacobian");
            J = rytov::read_jacobian(layout.jacobian(), grid, probes);
            if (method == "elasticnet") en.emplace(J->entries, cfg.elastic_net);
            if (method == "tikhonov") svd.emplace(J->entries);
        }
        const auto t0 = std::chrono::steady_clock::now();
        for (double p : cfg.noise_levels) {
            const std::size_t level = level_index(m.noise_levels, p);
            parallel_for(cfg.test_samples, cfg.threads, [&](Index s) {
                const ManifestEntry& e = entry(m, Split::test, s);
                const auto meas = forward::read_measurements(join(root, e.measurements[level]), cfg.domain);
                const Vector psi = lsvd_features(meas);
                Vector mu;
                if (model) {
                    mu = nn::infer(*model, psi);
                } else if (en) {
                    mu = (en->solve(-psi).x.array() + cfg.domain.mu_a0).matrix();
                } else if (svd) {
                    mu = (svd->solve(-psi, cfg.tikhonov_alpha).array() + cfg.domain.mu_a0).matrix();
                } else {
                    mu = reconstruct_variational(method, J->entries, psi, cfg.domain.mu_a0, cfg);
                }
                write_voxel_map(layout.reconstruction(method, p, s), mu,
                                method + " noise " + format_double(p) + " test sample " + std::to_string(s));
            });
        }
        const std::chrono::duration<double> dt = std::chrono::steady_clock::now() - t0;
        std::ostringstream os;
        os << method << ": " << cfg.test_samples * static_cast<Index>(cfg.noise_levels.size()) << " reconstructions in "
           << std::fixed << std::setprecision(1) << dt.count() << " s";
        out.lines.push_back(os.str());
    }
    return out;
}

StageSummary cmd_evaluate(const ExperimentConfig& cfg, const std::string& root) {
    cfg.validate();
    const RunLayout layout{root};
    const DatasetManifest m = load_manifest(cfg, root);
    const auto grid = grid_of(cfg);
    std::vector<geometry::Phantom> truth(static_cast<std::size_t>(cfg.test_samples));
    for (Index s = 0; s < cfg.test_samples; ++s)
        truth[static_cast<std::size_t>(s)] = geometry::read_phantom(join(root, entry(m, Split::test, s).phantom));

    std::vector<metrics::SampleEvaluation> all;
    for (const auto& method : cfg.methods) {
        for (double p : cfg.noise_levels) {
            std::vector<metrics::SampleEvaluation> ev(static_cast<std::size_t>(cfg.test_samples));
            parallel_for(cfg.test_samples, cfg.threads, [&](Index s) {
                const std::string file = layout.reconstruction(method, p, s);
                require(file, method + " reconstruction", "reconstruct");
                const Vector mu = read_voxel_map(file);
                if (mu.size() != grid.size()) throw InvalidArgument("reconstruction " + file + " does not match the grid");
                ev[static_cast<std::size_t>(s)] =
                    metrics::evaluate_sample(mu, truth[static_cast<std::size_t>(s)], cfg.threshold(), s, method, p);
            });
            all.insert(all.end(), ev.begin(), ev.end());
        }
    }
    ensure_parent(layout.samples_csv());
    std::ofstream os(layout.samples_csv());
    if (!os) throw IoError("cannot write " + layout.samples_csv());
    metrics::write_sample_csv(os, all);
    if (!os) throw IoError("write failed: " + layout.samples_csv());
    return {{std::to_string(all.size()) + " sample evaluations -> " + layout.samples_csv()}};
}

StageSummary cmd_compare(const ExperimentConfig& cfg, const std::string& root) {
    cfg.validate();
    const RunLayout layout{root};
    require(layout.samples_csv(), "per-sample results", "evaluate");
    std::ifstream is(layout.samples_csv());
    if (!is) throw IoError("cannot open " + layout.samples_csv());
    std::vector<metrics::SampleEvaluation> samples;
    for (auto& s : metrics::read_sample_csv(is)) {
        const bool method_ok = std::find(cfg.methods.begin(), cfg.methods.end(), s.method) != cfg.methods.end();
        const bool level_ok = std::find(cfg.noise_levels.begin(), cfg.noise_levels.end(), s.noise) != cfg.noise_levels.end();
        if (method_ok && level_ok && s.sample_id < cfg.test_samples) samples.push_back(std::move(s));
    }
    const auto rows = metrics::aggregate(samples, cfg.methods);
    if (rows.size() != cfg.methods.size() * cfg.noise_levels.size())
        throw MissingPrerequisite("per-sample results do not cover every method and noise level; rerun 'evaluate'");
    ensure_parent(layout.table_csv());
    {
        std::ofstream os(layout.table_csv());
        if (!os) throw IoError("cannot write " + layout.table_csv());
        metrics::write_table_csv(os, rows);
        if (!os) throw IoError("write failed: " + layout.table_csv());
    }

    StageSummary out;
    const Index heatmaps = std::min(cfg.heatmap_samples, cfg.test_samples);
    if (heatmaps > 0) {
        const DatasetManifest m = load_manifest(cfg, root);
        const auto grid = grid_of(cfg);
        ensure_parent(layout.heatmap("x"));
        char id[32];
        for (Index s = 0; s < heatmaps; ++s) {
            std::snprintf(id, sizeof id, "test%06lld", static_cast<long long>(s));
            const auto phantom = geometry::read_phantom(join(root, entry(m, Split::test, s).phantom));
            metrics::write_pgm(layout.heatmap(std::string("truth_") + id), phantom.mu_a, grid, cfg.domain.mu_a0);
            for (const auto& method : cfg.methods)
                for (double p : cfg.noise_levels) {
                    const std::string file = layout.reconstruction(method, p, s);
                    require(file, method + " reconstruction", "reconstruct");
                    metrics::write_pgm(layout.heatmap(method + "_" + noise_tag(p) + "_" + id), read_voxel_map(file), grid,
                                       cfg.domain.mu_a0);
                }
        }
    }
    for (const auto& r : rows) {
        char buf[256];
        std::snprintf(buf, sizeof buf, "%-10s noise %5.3f  TPR %.3f +- %.3f  precision %.3f  ACR 3/4/5 %.4f %.4f %.4f  missed %.2f",
                      r.method.c_str(), r.noise, r.tpr_mean, r.tpr_std, r.precision_mean, r.bin(3).mean, r.bin(4).mean,
                      r.bin(5).mean, r.missed_rate());
        out.lines.emplace_back(buf);
    }
    out.lines.push_back("table -> " + layout.table_csv());
    return out;
}

}  // namespace dot::pipeline
