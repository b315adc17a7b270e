#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <vector>

#include <Eigen/Dense>

#include "taskattr/models.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

/// Dense Gaussian sketch P (k x d) with i.i.d. N(0, 1/k) entries, so that
/// E ||P v||^2 = ||v||^2. The identity variant skips the matrix entirely.
class ProjectionMatrix {
public:
    static ProjectionMatrix gaussian(std::size_t d, std::size_t k, std::uint64_t seed);
    static ProjectionMatrix identity(std::size_t d);

    std::size_t rows() const noexcept { return rows_; }
    std::size_t cols() const noexcept { return cols_; }
    bool is_identity() const noexcept { return identity_; }
    std::uint64_t seed() const noexcept { return seed_; }
    /// Empty for the identity variant.
    const Eigen::MatrixXd& matrix() const noexcept { return matrix_; }

    Eigen::VectorXd apply(const Eigen::VectorXd& v) const;
    /// Projects every row: (C x d) -> (C x k).
    Eigen::MatrixXd apply_rows(const Eigen::MatrixXd& rows) const;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    bool identity_ = false;
    std::uint64_t seed_ = 0;
    Eigen::MatrixXd matrix_;
};

/// Throws ConfigError unless 1 <= k <= d.
ProjectionMatrix build_projection(std::size_t d, std::size_t k, std::uint64_t seed, bool identity = false);

struct FeatureEntry {
    Eigen::VectorXd base_logits;  ///< f_{W0}(x)
    Eigen::MatrixXd grads;        ///< P * d f_{W0}(x) / dW, one row per class (C x k)
    int label = 0;
    int task = -1;                ///< -1 for test samples
};

/// Linearization of a model at W0: logits and projected logit gradients for
/// every train and test sample.
struct FeatureBank {
    std::size_t projected_dim = 0;
    std::size_t class_count = 0;
    std::vector<std::size_t> task_sizes;
    std::vector<FeatureEntry> train;
    std::vector<FeatureEntry> test;
    Metric metric = Metric::mean_test_loss;

    std::size_t task_count() const noexcept { return task_sizes.size(); }
    std::size_t size() const noexcept { return train.size() + test.size(); }
};

/// One pass over train then test samples. Full-dimension Jacobians are
/// projected immediately and discarded.
FeatureBank extract_features(const ModelParams& params0, const TaskBundle& bundle, const ProjectionMatrix& projection,
                             std::size_t jobs = 1);

struct GradexOptions {
    double tolerance = 1e-6;
    std::size_t max_iterations = 5000;
    std::size_t history = 10;
};

struct GradexSolution {
    Eigen::VectorXd z;
    double terminal_grad_norm = 0.0;
    double objective_value = 0.0;
    std::size_t iterations = 0;
    bool converged = false;
};

/// Objective of the linearized problem at z for subset s:
///   sum_k s_k / |s| * mean_{(x,y) in T_k} CE(f0(x) + G(x) z, y) + reg/2 ||z||^2.
double gradex_objective(const FeatureBank& bank, const SubsetVector& s, double reg_lambda, const Eigen::VectorXd& z,
                        Eigen::VectorXd* grad = nullptr);

/// Minimizes gradex_objective with L-BFGS and Armijo backtracking, starting
/// from z = 0. Stops when ||grad|| <= tolerance; otherwise returns with
/// converged = false after max_iterations.
GradexSolution gradex_solve(const FeatureBank& bank, const SubsetVector& s, double reg_lambda,
                            const GradexOptions& options = {});

/// Test metric of the linearized model f0(x) + G(x) z.
double gradex_test_metric(const FeatureBank& bank, const Eigen::VectorXd& z);

/// Estimated F(s): solve, then evaluate the linearized test metric.
double gradex_estimate(const FeatureBank& bank, const SubsetVector& s, double reg_lambda,
                       const GradexOptions& options = {});

/// Mean over test samples and classes of
///   |f_W(x) - f_W0(x) - <grad f_W0(x), W - W0>| / max(|f_W(x)|, 1e-8).
double approximation_error(const ModelParams& params0, const ModelParams& trained, const TaskBundle& bundle);

/// Writes <dir>/manifest.json plus train.csv / test.csv with one row per
/// (sample, class): sample,task,label,class,base_logit,g_0..g_{k-1}.
void save_feature_bank(const FeatureBank& bank, const std::filesystem::path& dir);
FeatureBank load_feature_bank(const std::filesystem::path& dir);

}  // namespace taskattr
