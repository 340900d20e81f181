// Command-line driver for the reconstruction pipeline.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#ifdef __GLIBC__
#include <malloc.h>
#endif

#include <CLI11.hpp>

#include "dot/pipeline.hpp"
#include "dot/rytov.hpp"

using namespace dot;

namespace {

struct Globals {
    std::string config;
    std::optional<std::uint64_t> seed;
    std::string out;
    std::optional<int> threads;
    std::vector<std::string> overrides;
};

void add_globals(CLI::App* app, Globals& g) {
    app->add_option("--config", g.config, "Experiment config file (key = value lines)");
    app->add_option("--seed", g.seed, "Seed (master seed for pipeline stages)");
    app->add_option("--out", g.out, "Output file or run directory");
    app->add_option("--threads", g.threads, "Worker threads for per-sample stages");
    app->add_option("--set", g.overrides, "Config override key=value (repeatable)");
}

pipeline::ExperimentConfig load_config(const Globals& g) {
    pipeline::ExperimentConfig cfg = g.config.empty() ? pipeline::ExperimentConfig{} : pipeline::read_config(g.config);
    for (const auto& kv : g.overrides) {
        const auto eq = kv.find('=');
        if (eq == std::string::npos) throw InvalidArgument("--set expects key=value, got '" + kv + "'");
        pipeline::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
    }
    if (g.seed) cfg.master_seed = *g.seed;
    if (g.threads) cfg.threads = *g.threads;
    cfg.validate();
    return cfg;
}

std::string run_dir(const Globals& g) { return g.out.empty() ? std::string("run") : g.out; }

std::string need(const std::string& value, const std::string& flag) {
    if (value.empty()) throw InvalidArgument(flag + " is required");
    return value;
}

void print(const pipeline::StageSummary& s) {
    for (const auto& l : s.lines) std::cout << l << '\n';
}

void write_traces(const std::string& path, const variational::SolveTrace& trace) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "iterate,objective,residual_norm\n";
    char buf[96];
    for (std::size_t k = 0; k < trace.objective_values.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%zu,%.17g,%.17g\n", k, trace.objective_values[k], trace.residual_norms[k]);
        os << buf;
    }
}

void write_cv_curve(const std::string& path, const variational::ElasticNetResult& r) {
    std::ofstream os(path);
    if (!os) throw IoError("cannot write " + path);
    os << "alpha,cv_error,cv_se,selected\n";
    char buf[128];
    for (std::size_t k = 0; k < r.alpha_grid.size(); ++k) {
        std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g,%d\n", r.alpha_grid[k], r.cv_error[k], r.cv_se[k],
                      r.alpha_grid[k] == r.alpha ? 1 : 0);
        os << buf;
    }
}

}  // namespace

int main(int argc, char** argv) {
#ifdef __GLIBC__
    // Training and the solvers allocate many short-lived large buffers; keep
    // them on the heap instead of round-tripping through mmap.
    mallopt(M_MMAP_THRESHOLD, 1 << 30);
    mallopt(M_TRIM_THRESHOLD, 1 << 30);
    mallopt(M_TOP_PAD, 256 << 20);
#endif
    CLI::App app{"Diffuse optical tomography: data generation, learned and variational reconstruction, evaluation"};
    app.require_subcommand(1);
    Globals g;
    add_globals(&app, g);

    auto sub = [&](const char* name, const char* help) {
        CLI::App* s = app.add_subcommand(name, help);
        add_globals(s, g);
        return s;
    };

    std::optional<Index> n_train, n_test;
    CLI::App* generate = sub("generate", "Sample phantoms and simulate measurements for every noise level");
    generate->add_option("--train", n_train, "Training samples");
    generate->add_option("--test", n_test, "Test samples");

    CLI::App* phantom = sub("phantom", "Sample one phantom (--seed) and write it to --out");

    std::string phantom_file, data_file, model_file, jac_file, grid_file, trace_file, dataset_dir;
    double noise = 0.0;
    CLI::App* forward = sub("forward", "Simulate measurements of one phantom");
    forward->add_option("--phantom", phantom_file, "Phantom file")->required();
    forward->add_option("--noise", noise, "Noise level p");

    CLI::App* jacobian = sub("jacobian", "Assemble the Rytov sensitivity matrix");
    jacobian->add_option("--grid", grid_file, "Phantom or grid file; without it the run directory is used");
    bool jac_csv = false;
    jacobian->add_flag("--csv", jac_csv, "Write CSV instead of the binary format (single-file mode)");

    CLI::App* train = sub("train", "Train the learned model on a generated dataset (--seed sets the initialization seed)");
    train->add_option("--dataset", dataset_dir, "Run directory holding the dataset");

    CLI::App* infer = sub("infer", "Reconstruct one measurement file with a trained model");
    infer->add_option("--model", model_file, "Model file")->required();
    infer->add_option("--data", data_file, "Measurement file")->required();

    std::string method;
    std::optional<double> alpha, theta, alpha_factor;
    std::optional<int> cv_folds, max_outer, inner_iters;
    CLI::App* reconstruct = sub("reconstruct", "Reconstruct test data with every configured method, or one file with --data");
    reconstruct->add_option("--method", method, "bregman, elasticnet or tikhonov (single-file mode)");
    reconstruct->add_option("--jacobian", jac_file, "Jacobian file (single-file mode)");
    reconstruct->add_option("--data", data_file, "Measurement file (single-file mode)");
    reconstruct->add_option("--trace", trace_file, "Solver trace CSV (single-file mode)");
    reconstruct->add_option("--alpha", alpha, "Tikhonov alpha");
    reconstruct->add_option("--theta", theta, "Elastic-Net l1 weight");
    reconstruct->add_option("--cv-folds", cv_folds, "Elastic-Net cross-validation folds");
    reconstruct->add_option("--max-outer", max_outer, "Bregman outer iterations");
    reconstruct->add_option("--inner-iters", inner_iters, "Bregman inner forward-backward iterations");
    reconstruct->add_option("--alpha-factor", alpha_factor, "Bregman alpha as a multiple of |J^T y|_inf");

    CLI::App* evaluate = sub("evaluate", "Segment reconstructions and write per-sample metrics");
    CLI::App* compare = sub("compare", "Aggregate metrics into the comparison table and write heatmaps");
    CLI::App* run = sub("run", "generate, jacobian, train, reconstruct, evaluate and compare in sequence");
    CLI::App* config = sub("config", "Print the effective config");

    try {
        app.parse(argc, argv);
    } catch (const CLI::Success& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return InvalidArgument("").exit_code();
    }

    try {
        if (*config) {
            pipeline::ExperimentConfig cfg = load_config(g);
            if (g.out.empty()) pipeline::write_config(std::cout, cfg);
            else pipeline::write_config(g.out, cfg);
        } else if (*generate) {
            pipeline::ExperimentConfig cfg = load_config(g);
            if (n_train) cfg.train_samples = *n_train;
            if (n_test) cfg.test_samples = *n_test;
            const auto m = pipeline::cmd_generate(cfg, run_dir(g));
            std::cout << m.entries.size() << " samples, " << m.noise_levels.size() << " noise levels -> "
                      << run_dir(g) << '\n';
        } else if (*phantom) {
            const auto cfg = load_config(g);
            const auto grid = geometry::build_grid(cfg.domain, cfg.voxel_side);
            const auto p = geometry::sample_phantom(cfg.domain, grid, cfg.master_seed, cfg.sampling);
            if (g.out.empty()) geometry::write_phantom(std::cout, p);
            else geometry::write_phantom(g.out, p);
        } else if (*forward) {
            const auto cfg = load_config(g);
            const auto p = geometry::read_phantom(phantom_file);
            const forward::ForwardModel model(cfg.domain, cfg.fem_edge);
            const auto m = forward::add_noise(model.simulate(p), noise, cfg.master_seed, cfg.noise_reading);
            if (g.out.empty()) forward::write_measurements(std::cout, m);
            else forward::write_measurements(g.out, m);
        } else if (*jacobian) {
            const auto cfg = load_config(g);
            if (grid_file.empty()) {
                print(pipeline::cmd_jacobian(cfg, run_dir(g)));
            } else {
                const auto p = geometry::read_phantom(grid_file);
                const auto J = rytov::assemble_jacobian(cfg.domain, p.grid, geometry::place_probes(cfg.domain));
                const std::string out = need(g.out, "--out");
                if (jac_csv) {
                    std::ofstream os(out);
                    if (!os) throw IoError("cannot write " + out);
                    rytov::write_jacobian_csv(os, J);
                } else {
                    rytov::write_jacobian(out, J);
                }
            }
        } else if (*train) {
            pipeline::ExperimentConfig cfg = g.config.empty() && !dataset_dir.empty() &&
                                                     std::filesystem::exists(pipeline::RunLayout{dataset_dir}.config())
                                                 ? pipeline::read_config(pipeline::RunLayout{dataset_dir}.config())
                                                 : load_config(g);
            // The dataset's own config carries the master seed; --seed seeds the initialization here.
            for (const auto& kv : g.overrides) {
                const auto eq = kv.find('=');
                if (eq != std::string::npos) pipeline::set_config_value(cfg, kv.substr(0, eq), kv.substr(eq + 1));
            }
            if (g.seed) cfg.lsvd.init_seed = *g.seed;
            if (g.threads) cfg.threads = *g.threads;
            const std::string root = dataset_dir.empty() ? run_dir(g) : dataset_dir;
            print(pipeline::cmd_train(cfg, root));
            if (!dataset_dir.empty() && !g.out.empty()) {
                std::filesystem::copy_file(pipeline::RunLayout{root}.model(), g.out,
                                           std::filesystem::copy_options::overwrite_existing);
                std::cout << "model -> " << g.out << '\n';
            }
        } else if (*infer) {
            const auto model = nn::load_model(model_file);
            const auto cfg = load_config(g);
            const auto m = forward::read_measurements(data_file, cfg.domain);
            pipeline::write_voxel_map(need(g.out, "--out"), nn::infer(model, pipeline::lsvd_features(m)),
                                      "lsvd reconstruction of " + data_file);
        } else if (*reconstruct) {
            pipeline::ExperimentConfig cfg = load_config(g);
            if (alpha) cfg.tikhonov_alpha = *alpha;
            if (theta) cfg.elastic_net.theta = *theta;
            if (cv_folds) cfg.elastic_net.cv_folds = *cv_folds;
            if (max_outer) cfg.bregman.max_outer = *max_outer;
            if (inner_iters) cfg.bregman.inner_iters = *inner_iters;
            if (alpha_factor) cfg.bregman.alpha_factor = *alpha_factor;
            cfg.validate();
            if (data_file.empty()) {
                if (!method.empty()) cfg.methods = {method};
                print(pipeline::cmd_reconstruct(cfg, run_dir(g)));
            } else {
                const auto grid = geometry::build_grid(cfg.domain, cfg.voxel_side);
                const auto probes = geometry::place_probes(cfg.domain);
                const auto J = rytov::read_jacobian(need(jac_file, "--jacobian"), grid, probes);
                const auto m = forward::read_measurements(data_file, cfg.domain);
                const Vector b = -pipeline::lsvd_features(m);
                Vector dmu;
                if (method == "bregman") {
                    const auto r = variational::bregman_l1(J.entries, b, cfg.bregman);
                    dmu = r.state.iterate;
                    if (!trace_file.empty()) write_traces(trace_file, r.trace);
                } else if (method == "elasticnet") {
                    const auto r = variational::elastic_net_solve(J.entries, b, cfg.elastic_net);
                    dmu = r.x;
                    if (!trace_file.empty()) write_cv_curve(trace_file, r);
                } else if (method == "tikhonov") {
                    dmu = rytov::tikhonov_filtered_solve(J.entries, b, cfg.tikhonov_alpha);
                } else {
                    throw InvalidArgument("--method must be bregman, elasticnet or tikhonov");
                }
                pipeline::write_voxel_map(need(g.out, "--out"), (dmu.array() + cfg.domain.mu_a0).matrix(),
                                          method + " reconstruction of " + data_file);
            }
        } else if (*evaluate) {
            print(pipeline::cmd_evaluate(load_config(g), run_dir(g)));
        } else if (*compare) {
            print(pipeline::cmd_compare(load_config(g), run_dir(g)));
        } else if (*run) {
            const auto cfg = load_config(g);
            const std::string root = run_dir(g);
            pipeline::cmd_generate(cfg, root);
            std::cout << "generate: done\n";
            print(pipeline::cmd_jacobian(cfg, root));
            const bool lsvd = std::find(cfg.methods.begin(), cfg.methods.end(), "lsvd") != cfg.methods.end();
            if (lsvd) print(pipeline::cmd_train(cfg, root));
            print(pipeline::cmd_reconstruct(cfg, root));
            print(pipeline::cmd_evaluate(cfg, root));
            print(pipeline::cmd_compare(cfg, root));
        }
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << '\n';
        return e.exit_code();
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << '\n';
        return 1;
    }
    return 0;
}
