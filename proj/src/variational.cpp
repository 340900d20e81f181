#include "dot/variational.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <random>
#include <string>

namespace dot::variational {

namespace {

using Clock = std::chrono::steady_clock;

double seconds_since(Clock::time_point t0) {
    return std::chrono::duration<double>(Clock::now() - t0).count();
}

void record(SolveTrace& trace, const LeastSquares& ls, const Vector& x, double objective) {
    trace.objective_values.push_back(objective);
    trace.residual_norms.push_back((*ls.J * x - ls.y).norm());
}

// One forward-backward step in place; returns false on a non-finite iterate.
bool fb_step(const LeastSquares& ls, const Vector& shift, double threshold, double gamma, Vector& x) {
    Vector z = x - gamma * (ls.gram * x) + shift;
    x = soft_threshold(z, threshold);
    return x.allFinite();
}

}  // namespace

LeastSquares::LeastSquares(const Matrix& J_, const Vector& y_)
    : LeastSquares(J_, Matrix(J_.transpose() * J_), y_) {}

LeastSquares::LeastSquares(const Matrix& J_, const Matrix& gram_, const Vector& y_)
    : J(&J_), gram(gram_), jty(J_.transpose() * y_), y(y_) {
    if (y_.size() != J_.rows()) throw InvalidArgument("data length does not match the matrix rows");
    if (!y_.allFinite()) throw InvalidArgument("data vector is not finite");
}

double spectral_norm(const Matrix& gram, double rel_tol, int max_iters) {
    const Index n = gram.rows();
    if (n == 0) return 0.0;
    std::mt19937_64 rng(0x5eedULL);
    std::normal_distribution<double> normal;
    Vector v(n);
    for (Index i = 0; i < n; ++i) v[i] = normal(rng);
    v.normalize();
    double lambda = 0.0;
    for (int it = 0; it < max_iters; ++it) {
        Vector w = gram * v;
        const double next = v.dot(w);
        const double norm = w.norm();
        if (norm == 0.0) return 0.0;
        v = w / norm;
        if (it > 0 && std::abs(next - lambda) <= rel_tol * std::abs(next)) return next;
        lambda = next;
    }
    throw NumericError("power iteration for |J^T J| did not converge in " + std::to_string(max_iters) + " steps");
}

FbResult forward_backward_l1(const LeastSquares& ls, const Vector& p, double alpha, double gamma, int iters,
                             const std::optional<Vector>& start) {
    const auto t0 = Clock::now();
    const Index n = ls.gram.rows();
    if (p.size() != n) throw InvalidArgument("linear term has the wrong length");
    if (!(gamma > 0.0)) throw InvalidArgument("step size must be positive");
    if (!(alpha >= 0.0)) throw InvalidArgument("regularization weight must be non-negative");
    if (iters < 1) throw InvalidArgument("need at least one iteration");
    FbResult res;
    res.x = start ? *start : Vector::Zero(n);
    auto objective = [&](const Vector& x) {
        return ls.data_term(x) + alpha * x.lpNorm<1>() - alpha * p.dot(x);
    };
    record(res.trace, ls, res.x, objective(res.x));
    const Vector shift = gamma * (ls.jty + alpha * p);
    for (int it = 1; it <= iters; ++it) {
        if (!fb_step(ls, shift, gamma * alpha, gamma, res.x))
            throw DivergenceError("forward-backward diverged at iteration " + std::to_string(it));
        record(res.trace, ls, res.x, objective(res.x));
    }
    res.trace.wall_time = seconds_since(t0);
    return res;
}

FbResult forward_backward_l1(const Matrix& J, const Vector& y, const Vector& p, double alpha, double gamma,
                             int iters) {
    return forward_backward_l1(LeastSquares(J, y), p, alpha, gamma, iters);
}

double bregman_alpha(const Vector& jty, double factor) { return factor * jty.lpNorm<Eigen::Infinity>(); }

BregmanResult bregman_l1(const LeastSquares& ls, const BregmanOptions& options, std::optional<double> gram_norm) {
    const auto t0 = Clock::now();
    if (options.max_outer < 1 || options.inner_iters < 1) throw InvalidArgument("iteration counts must be positive");
    const Index n = ls.gram.rows();
    BregmanResult res;
    auto& st = res.state;
    st.iterate = Vector::Zero(n);
    st.subgradient = Vector::Zero(n);
    st.alpha = bregman_alpha(ls.jty, options.alpha_factor);
    const double norm = gram_norm ? *gram_norm : spectral_norm(ls.gram);
    if (!(norm > 0.0)) throw InvalidArgument("sensitivity matrix is zero");
    st.gamma = options.step_factor / norm;
    record(res.trace, ls, st.iterate, ls.data_term(st.iterate));

    if (st.alpha == 0.0) {
        // J^T y = 0: the zero vector is stationary for every outer step.
        for (int k = 0; k < options.max_outer; ++k) {
            record(res.trace, ls, st.iterate, ls.data_term(st.iterate));
            res.subgradient_sup.push_back(0.0);
        }
        st.outer_iter = options.max_outer;
        res.trace.wall_time = seconds_since(t0);
        return res;
    }

    for (int k = 0; k < options.max_outer; ++k) {
        const Vector shift = st.gamma * (ls.jty + st.alpha * st.subgradient);
        for (int l = 0; l < options.inner_iters; ++l) {
            if (!fb_step(ls, shift, st.gamma * st.alpha, st.gamma, st.iterate))
                throw DivergenceError("Bregman inner solve diverged at outer iteration " + std::to_string(k) +
                                      ", inner iteration " + std::to_string(l));
        }
        st.subgradient -= (ls.gram * st.iterate - ls.jty) / st.alpha;
        st.outer_iter = k + 1;
        record(res.trace, ls, st.iterate, ls.data_term(st.iterate));
        res.subgradient_sup.push_back(st.subgradient.lpNorm<Eigen::Infinity>());
    }
    res.trace.wall_time = seconds_since(t0);
    return res;
}

BregmanResult bregman_l1(const Matrix& J, const Vector& y, const BregmanOptions& options) {
    return bregman_l1(LeastSquares(J, y), options);
}

void ElasticNetConfig::validate() const {
    if (!(theta >= 0.0 && theta <= 1.0)) throw InvalidArgument("elastic-net theta must lie in [0, 1]");
    if (cv_folds < 2) throw InvalidArgument("cross validation needs at least two folds");
    if (alpha_grid.empty() && grid_points < 1) throw InvalidArgument("empty regularization grid");
    for (std::size_t i = 0; i < alpha_grid.size(); ++i) {
        if (!(alpha_grid[i] > 0.0)) throw InvalidArgument("regularization grid must be strictly positive");
        if (i > 0 && !(alpha_grid[i] < alpha_grid[i - 1]))
            throw InvalidArgument("regularization grid must be sorted descending");
    }
    if (!(tolerance > 0.0) || max_iters < 1) throw InvalidArgument("invalid stopping rule");
}

double elastic_net_objective(const LeastSquares& ls, const Vector& x, double alpha, double theta) {
    return ls.data_term(x) + alpha * (theta * x.lpNorm<1>() + (1.0 - theta) * x.squaredNorm());
}

Vector elastic_net_fixed(const LeastSquares& ls, double alpha, double theta, double tolerance, int max_iters,
                         const std::optional<Vector>& start, std::optional<double> gram_norm) {
    const Index n = ls.gram.rows();
    const double lipschitz = gram_norm ? *gram_norm : spectral_norm(ls.gram);
    Vector x = start ? *start : Vector::Zero(n);
    if (!(lipschitz > 0.0)) return x;
    const double step = 1.0 / lipschitz;
    const double shrink = 1.0 / (1.0 + 2.0 * step * alpha * (1.0 - theta));
    const double threshold = step * alpha * theta;
    Vector extrapolated = x;
    double t = 1.0;
    for (int it = 0; it < max_iters; ++it) {
        const Vector z = extrapolated - step * (ls.gram * extrapolated - ls.jty);
        Vector next = shrink * soft_threshold(z, threshold);
        if (!next.allFinite()) throw DivergenceError("elastic-net iteration diverged at " + std::to_string(it));
        const Vector delta = next - x;
        // Gradient-based restart keeps the accelerated scheme monotone in practice.
        if ((extrapolated - next).dot(delta) > 0.0) t = 1.0;
        const double t_next = 0.5 * (1.0 + std::sqrt(1.0 + 4.0 * t * t));
        extrapolated = next + ((t - 1.0) / t_next) * delta;
        t = t_next;
        x = std::move(next);
        if (delta.norm() <= tolerance * std::max(x.norm(), 1e-300)) break;
    }
    return x;
}

Vector elastic_net_cd(const LeastSquares& ls, double alpha, double theta, double tolerance, int max_sweeps,
                      const std::optional<Vector>& start) {
    const Index n = ls.gram.rows();
    Vector x = start ? *start : Vector::Zero(n);
    if (x.size() != n) throw InvalidArgument("start vector has the wrong length");
    Vector q = ls.gram * x;  // G x
    const double l1 = alpha * theta;
    const double l2 = 2.0 * alpha * (1.0 - theta);
    const double stop = tolerance * tolerance * std::max(ls.y.squaredNorm(), 1e-300);
    std::vector<char> active(static_cast<std::size_t>(n), 0);

    // One pass over the listed coordinates; returns the largest scaled squared change.
    auto sweep = [&](bool all) {
        double worst = 0.0;
        for (Index j = 0; j < n; ++j) {
            if (!all && !active[static_cast<std::size_t>(j)]) continue;
            const double h = ls.gram(j, j) + l2;
            if (!(h > 0.0)) continue;
            const double old = x[j];
            const double z = ls.jty[j] - q[j] + ls.gram(j, j) * old;
            const double next = (z > l1 ? z - l1 : (z < -l1 ? z + l1 : 0.0)) / h;
            if (next != old) {
                q += ls.gram.col(j) * (next - old);
                x[j] = next;
                worst = std::max(worst, h * (next - old) * (next - old));
            }
            if (next != 0.0) active[static_cast<std::size_t>(j)] = 1;
        }
        return worst;
    };

    int sweeps = 0;
    while (sweeps < max_sweeps) {
        ++sweeps;
        if (sweep(true) <= stop) break;
        while (sweeps < max_sweeps) {
            ++sweeps;
            if (sweep(false) <= stop) break;
        }
    }
    if (!x.allFinite()) throw DivergenceError("elastic-net coordinate descent produced a non-finite iterate");
    return x;
}

ElasticNetSolver::ElasticNetSolver(const Matrix& J, ElasticNetConfig config) : J_(&J), config_(std::move(config)) {
    config_.validate();
    gram_ = J.transpose() * J;
    gram_norm_ = spectral_norm(gram_);
    const Index m = J.rows();
    for (int f = 0; f < config_.cv_folds; ++f) {
        Fold fold;
        for (Index i = 0; i < m; ++i) (i % config_.cv_folds == f ? fold.held : fold.train).push_back(i);
        if (fold.held.empty() || fold.train.empty()) throw InvalidArgument("too few measurement rows for the folds");
        fold.J_train = J(fold.train, Eigen::all);
        fold.J_held = J(fold.held, Eigen::all);
        fold.gram = fold.J_train.transpose() * fold.J_train;
        fold.gram_norm = spectral_norm(fold.gram);
        folds_.push_back(std::move(fold));
    }
}

ElasticNetResult ElasticNetSolver::solve(const Vector& y) const {
    const Matrix& J = *J_;
    const LeastSquares full(J, gram_, y);
    ElasticNetResult res;
    res.alpha_grid = config_.alpha_grid;
    const double scale = full.jty.lpNorm<Eigen::Infinity>();
    if (res.alpha_grid.empty()) {
        if (scale == 0.0) {
            res.x = Vector::Zero(J.cols());
            return res;
        }
        const int n = config_.grid_points;
        for (int i = 0; i < n; ++i) {
            const double frac = n == 1 ? 0.0 : double(i) / (n - 1);
            res.alpha_grid.push_back(scale * std::pow(config_.grid_span, frac));
        }
    }
    if (res.alpha_grid.empty()) throw InvalidArgument("empty regularization grid");

    const auto fit = [&](const LeastSquares& ls, double alpha, const std::optional<Vector>& warm, double norm) {
        if (config_.algorithm == ElasticNetAlgorithm::coordinate_descent)
            return elastic_net_cd(ls, alpha, config_.theta, config_.tolerance, config_.max_iters, warm);
        return elastic_net_fixed(ls, alpha, config_.theta, config_.tolerance, config_.max_iters, warm, norm);
    };
    const std::size_t n_alpha = res.alpha_grid.size();
    std::vector<std::vector<double>> fold_error(folds_.size(), std::vector<double>(n_alpha, 0.0));
    for (std::size_t f = 0; f < folds_.size(); ++f) {
        const auto& fold = folds_[f];
        const Vector y_train = y(fold.train);
        const Vector y_held = y(fold.held);
        const LeastSquares ls(fold.J_train, fold.gram, y_train);
        std::optional<Vector> warm;
        for (std::size_t a = 0; a < n_alpha; ++a) {
            warm = fit(ls, res.alpha_grid[a], warm, fold.gram_norm);
            fold_error[f][a] = (fold.J_held * *warm - y_held).squaredNorm() / static_cast<double>(fold.held.size());
        }
    }
    const auto k = static_cast<double>(folds_.size());
    res.cv_error.assign(n_alpha, 0.0);
    res.cv_se.assign(n_alpha, 0.0);
    for (std::size_t a = 0; a < n_alpha; ++a) {
        for (const auto& e : fold_error) res.cv_error[a] += e[a] / k;
        double var = 0.0;
        for (const auto& e : fold_error) var += (e[a] - res.cv_error[a]) * (e[a] - res.cv_error[a]);
        res.cv_se[a] = std::sqrt(var / (k - 1.0) / k);
    }
    auto best = std::min_element(res.cv_error.begin(), res.cv_error.end()) - res.cv_error.begin();
    if (config_.cv_rule == CvRule::one_standard_error) {
        const double limit = res.cv_error[static_cast<std::size_t>(best)] + res.cv_se[static_cast<std::size_t>(best)];
        for (std::ptrdiff_t a = 0; a < best; ++a) {
            if (res.cv_error[static_cast<std::size_t>(a)] <= limit) {
                best = a;
                break;
            }
        }
    }
    res.alpha = res.alpha_grid[static_cast<std::size_t>(best)];

    std::optional<Vector> warm;
    for (std::size_t a = 0; a <= static_cast<std::size_t>(best); ++a)
        warm = fit(full, res.alpha_grid[a], warm, gram_norm_);
    res.x = *warm;
    return res;
}

ElasticNetResult elastic_net_solve(const Matrix& J, const Vector& y, const ElasticNetConfig& config) {
    return ElasticNetSolver(J, config).solve(y);
}

}  // namespace dot::variational
