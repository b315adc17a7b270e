#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <vector>

#include <Eigen/Dense>

#include "taskattr/estimator.hpp"
#include "taskattr/models.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

using LinearOperator = std::function<Eigen::VectorXd(const Eigen::VectorXd&)>;

struct CgResult {
    Eigen::VectorXd x;
    std::size_t iterations = 0;
    double residual_norm = 0.0;
    bool converged = false;
};

/// Conjugate gradients for A x = b with A symmetric positive definite.
/// Stops when ||r|| <= tolerance * ||b||.
CgResult conjugate_gradient(const LinearOperator& apply, const Eigen::VectorXd& b, double tolerance = 1e-10,
                            std::size_t max_iterations = 1000);

struct InfluenceOptions {
    double damping = 1e-3;
    double tolerance = 1e-10;
    /// 0 picks 10 * d.
    std::size_t max_iterations = 0;
};

struct InfluenceResult {
    Eigen::VectorXd scores;
    /// false when CG hit the iteration limit; scores then come from the last iterate.
    bool converged = true;
    std::size_t iterations = 0;
    double residual_norm = 0.0;
};

/// score_k = -grad_F^T (H + damping I)^-1 s_k grad l_k / |s|, with H the
/// Hessian of the regularized training objective for s at params_star and
/// grad_F the gradient of the mean test loss. Sign follows the LOO
/// convention F(s) - F(s - e_k). One CG solve serves every task.
InfluenceResult influence_scores(const ModelParams& params_star, const TaskBundle& bundle, const SubsetVector& s,
                                 const InfluenceOptions& options = {});

/// sum_t eta_t <grad l_test(W_t), grad l_k(W_t)> over the checkpoints, using
/// data-loss gradients (no penalty) and the mean test gradient.
Eigen::VectorXd tracin_scores(std::span<const Checkpoint> trail, const TaskBundle& bundle,
                              std::span<const Sample> test_set);

struct TrakEnsemble {
    std::vector<ModelParams> models;
    ProjectionMatrix projection;
    /// Diagonal of Q; empty means the identity.
    Eigen::VectorXd q_weights;
    /// Ridge added to Phi Phi^T relative to its mean diagonal.
    double relative_jitter = 1e-8;
};

/// Members trained on all tasks with seeds derive_seed(trainer.seed, i).
TrakEnsemble build_trak_ensemble(const ModelSpec& spec, const TaskBundle& bundle, const TrainerConfig& trainer,
                                 std::size_t members, std::size_t projection_dim, std::uint64_t projection_seed,
                                 std::size_t jobs = 1);

/// Per member: Phi stacks the mean projected per-sample loss gradient of each
/// task (K x k), phi_test is the mean over the test set, and the scores are
/// phi_test^T Phi^T (Phi Phi^T + eps I)^-1 Q. Averaged over members.
Eigen::VectorXd trak_scores(const TrakEnsemble& ensemble, const TaskBundle& bundle, std::span<const Sample> test_set,
                            std::size_t jobs = 1);

struct TraceEstimate {
    double estimate = 0.0;
    double standard_error = 0.0;
};

/// Hutchinson estimator: mean of v^T A v over Rademacher probes. Probe i
/// draws from derive_seed(seed, i).
TraceEstimate hutchinson_trace(const LinearOperator& apply, std::size_t dim, std::size_t probes, std::uint64_t seed);

/// Trace of the regularized training-objective Hessian for s at params.
TraceEstimate hessian_trace(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s,
                            std::size_t probes, std::uint64_t seed);

/// Largest eigenvalue of a symmetric PSD operator by power iteration.
double top_eigenvalue(const LinearOperator& apply, std::size_t dim, std::size_t iterations = 200,
                      std::uint64_t seed = 0);

}  // namespace taskattr
