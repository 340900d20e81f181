#pragma once

#include <cstdint>
#include <optional>
#include <vector>

#include <Eigen/Core>

#include "dot/core.hpp"

namespace dot::variational {

/// Componentwise soft_beta(v) = sign(v) max(0, |v| - beta), the prox of beta |.|_1.
template <typename Derived>
Eigen::Matrix<typename Derived::Scalar, Eigen::Dynamic, 1> soft_threshold(const Eigen::MatrixBase<Derived>& v,
                                                                          typename Derived::Scalar beta) {
    using S = typename Derived::Scalar;
    if (!(beta >= S(0))) throw InvalidArgument("soft threshold must be non-negative");
    return (v.array().sign() * (v.array().abs() - beta).max(S(0))).matrix();
}

/// Least-squares data term 1/2 |J x - y|^2 with its normal-equation pieces.
/// The Gram matrix depends only on J and can be shared across data vectors.
struct LeastSquares {
    LeastSquares(const Matrix& J, const Vector& y);
    LeastSquares(const Matrix& J, const Matrix& gram, const Vector& y);

    const Matrix* J;
    Matrix gram;  // J^T J
    Vector jty;   // J^T y
    Vector y;

    double data_term(const Vector& x) const { return 0.5 * (*J * x - y).squaredNorm(); }
};

struct SolveTrace {
    std::vector<double> objective_values;
    std::vector<double> residual_norms;  // |J x - y| per recorded iterate
    double wall_time = 0.0;              // seconds
};

/// Largest eigenvalue of a symmetric positive semidefinite matrix by power
/// iteration from a fixed pseudo-random start, to `rel_tol`. Throws NumericError
/// after `max_iters` steps without convergence.
double spectral_norm(const Matrix& gram, double rel_tol = 1e-6, int max_iters = 10000);

struct FbResult {
    Vector x;
    SolveTrace trace;  // iterate 0 (the start) through `iters`
};

/// Forward-backward iterations for 1/2 |Jx - y|^2 + alpha |x|_1 - alpha <p, x>:
///   z = (I - gamma J^T J) x + gamma (J^T y + alpha p),  x = soft_{gamma alpha}(z).
/// Requires gamma in (0, 1 / |J^T J|]. Throws DivergenceError on a non-finite iterate.
FbResult forward_backward_l1(const LeastSquares& ls, const Vector& p, double alpha, double gamma, int iters,
                             const std::optional<Vector>& start = std::nullopt);
FbResult forward_backward_l1(const Matrix& J, const Vector& y, const Vector& p, double alpha, double gamma,
                             int iters);

struct BregmanOptions {
    int max_outer = 100;
    int inner_iters = 50;
    double alpha_factor = 1.5;   // alpha = alpha_factor |J^T y|_inf
    double step_factor = 0.99;   // gamma = step_factor / |J^T J|
};

struct BregmanState {
    Vector iterate;
    Vector subgradient;
    int outer_iter = 0;
    double alpha = 0.0;
    double gamma = 0.0;
};

struct BregmanResult {
    BregmanState state;
    SolveTrace trace;                     // one entry per outer iterate, starting at the zero vector
    std::vector<double> subgradient_sup;  // |p^k|_inf after each outer step
};

/// Bregman iterations with l1 regularization and a truncated forward-backward
/// inner solver, warm-started at the previous outer iterate.
BregmanResult bregman_l1(const LeastSquares& ls, const BregmanOptions& options = {},
                         std::optional<double> gram_norm = std::nullopt);
BregmanResult bregman_l1(const Matrix& J, const Vector& y, const BregmanOptions& options = {});

/// 1.5 |J^T y|_inf for the default factor.
double bregman_alpha(const Vector& jty, double factor = 1.5);

enum class ElasticNetAlgorithm : std::uint8_t { coordinate_descent, proximal_gradient };

/// Grid value chosen from the CV curve: the minimizer, or the largest alpha
/// whose error is within one standard error of the minimum.
enum class CvRule : std::uint8_t { min_error, one_standard_error };

struct ElasticNetConfig {
    double theta = 0.5;
    CvRule cv_rule = CvRule::min_error;
    ElasticNetAlgorithm algorithm = ElasticNetAlgorithm::coordinate_descent;
    std::vector<double> alpha_grid;  // empty: log grid anchored at |J^T y|_inf
    int cv_folds = 5;
    int grid_points = 30;
    double grid_span = 1e-4;         // smallest / largest grid value
    double tolerance = 1e-7;         // relative change stopping rule
    int max_iters = 1000;           // iterations or sweeps per grid value

    void validate() const;
};

/// Proximal-gradient (accelerated, with restart) minimizer of
/// 1/2 |Jx - y|^2 + alpha (theta |x|_1 + (1 - theta) |x|_2^2) for one alpha.
/// `step` defaults to 1 / |J^T J|.
Vector elastic_net_fixed(const LeastSquares& ls, double alpha, double theta, double tolerance, int max_iters,
                         const std::optional<Vector>& start = std::nullopt,
                         std::optional<double> gram_norm = std::nullopt);

/// Cyclic coordinate descent on the same objective, using Gram-matrix updates
/// and sweeps restricted to the active set between full passes. Stops when
/// max_j (G_jj + 2 alpha (1 - theta)) dx_j^2 <= tolerance^2 |y|^2.
Vector elastic_net_cd(const LeastSquares& ls, double alpha, double theta, double tolerance, int max_sweeps,
                      const std::optional<Vector>& start = std::nullopt);

double elastic_net_objective(const LeastSquares& ls, const Vector& x, double alpha, double theta);

struct ElasticNetResult {
    Vector x;
    double alpha = 0.0;
    std::vector<double> alpha_grid;
    std::vector<double> cv_error;  // mean over folds of the held-out mean squared residual
    std::vector<double> cv_se;     // standard error of that mean
};

/// K-fold cross-validated Elastic-Net. Fold f holds out rows i with i % K == f.
/// Fold Gram matrices depend only on J and are built once per solver.
class ElasticNetSolver {
public:
    ElasticNetSolver(const Matrix& J, ElasticNetConfig config);
    ElasticNetResult solve(const Vector& y) const;

private:
    struct Fold {
        std::vector<Index> train, held;
        Matrix J_train, J_held;
        Matrix gram;
        double gram_norm = 0.0;
    };
    const Matrix* J_;
    ElasticNetConfig config_;
    Matrix gram_;
    double gram_norm_ = 0.0;
    std::vector<Fold> folds_;
};

ElasticNetResult elastic_net_solve(const Matrix& J, const Vector& y, const ElasticNetConfig& config = {});

}  // namespace dot::variational
