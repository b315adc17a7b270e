#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "taskattr/oracle.hpp"
#include "taskattr/surrogate.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

/// Throws NumericError when either input has zero variance.
double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y);
/// Ranks starting at 1; tied values share the mean of their ranks.
Eigen::VectorXd average_ranks(const Eigen::VectorXd& x);
/// Pearson correlation of average ranks.
double spearman(const Eigen::VectorXd& x, const Eigen::VectorXd& y);

/// Spearman between predicted and actual outcomes over the same subsets in
/// the same order. Throws ConfigError on misaligned datasets.
double lds(const SurrogateDataset& predicted, const SurrogateDataset& actual);
double lds(const Surrogate& model, const SurrogateDataset& holdout);
/// LDS of additive per-task scores: prediction(s) = sum_k s_k scores_k.
double lds(const Eigen::VectorXd& scores, const SurrogateDataset& holdout);

/// F(s) = f0 + g^T (s - 1) + 1/2 (s - 1)^T h (s - 1).
struct QuadraticGroundTruth {
    double f0 = 0.0;
    Eigen::VectorXd g;
    Eigen::MatrixXd h;

    std::size_t task_count() const noexcept { return static_cast<std::size_t>(g.size()); }
    void validate() const;
};

/// g ~ U[-1, 1]^K and symmetric h with entries U[-1, 1].
QuadraticGroundTruth random_quadratic(std::size_t task_count, std::uint64_t seed, double f0 = 0.0);

double eval_quadratic(const QuadraticGroundTruth& gt, const SubsetVector& s);

/// g + (p - 1) h 1 + (1 - 2p)/2 diag(h): the population OLS slope under
/// Bernoulli(p) sampling.
Eigen::VectorXd closed_form_slope(const QuadraticGroundTruth& gt, double p);

struct SlopeReport {
    Eigen::VectorXd beta_hat;
    Eigen::VectorXd beta_closed;
    double alpha_hat = 0.0;
    double l2_gap = 0.0;
    /// sqrt(K / m) * ||beta_closed||.
    double sampling_band = 0.0;
    /// Measured constant: l2_gap / sampling_band.
    double band_constant = 0.0;
    /// Mean squared OLS residual on the sample.
    double residual_mse = 0.0;
    std::size_t m = 0;
    double p = 0.0;
};

/// Draws m Bernoulli(p) subsets (subset i from derive_seed(seed, i); the
/// all-zero vector is kept since the quadratic is defined there), fits OLS
/// to the exact quadratic and compares with closed_form_slope.
SlopeReport verify_closed_form(const QuadraticGroundTruth& gt, double p, std::size_t m, std::uint64_t seed);

struct ResidualPrediction {
    double predicted_alpha = 0.0;
    double predicted_min_mse = 0.0;
    double var_q = 0.0;
    Eigen::VectorXd cov_xq;
};

/// Intercept and minimal OLS mean squared error for Bernoulli(p) sampling.
/// With v = p(1 - p):
///   Var[Q] = 1/4 [sum_i h_ii^2 v (1-2p)^2 + 4 sum_{i<j} h_ij^2 v^2]
///   Cov[s_k, Q] = 1/2 h_kk v (1 - 2p)
///   min_mse = Var[Q] - sum_k Cov[s_k, Q]^2 / v.
ResidualPrediction residual_formula(const QuadraticGroundTruth& gt, double p);

struct AttributionReport {
    std::string method;
    Eigen::VectorXd scores;
    std::optional<double> lds;
    std::optional<double> pearson_vs_loo;
    std::map<std::string, std::string> metadata;

    void validate(std::size_t task_count) const;
};

nlohmann::json to_json(const AttributionReport& report);
AttributionReport report_from_json(const nlohmann::json& doc);

struct EnsembleScores {
    /// NaN for tasks that appear in no subset.
    Eigen::VectorXd scores;
    std::vector<std::size_t> counts;
    std::vector<std::size_t> missing;
};

/// Scores task k by the mean prediction over the sampled subsets that
/// contain it. One set of subsets is shared by all tasks.
EnsembleScores ensemble_attribution(const Surrogate& model, std::size_t task_count, const SamplingConfig& sampling);

enum class Direction { min_loss, max_reward };

/// k tasks with the smallest (min_loss) or largest (max_reward) scores.
/// Ties go to the lower index.
SubsetVector select_top_k(const Eigen::VectorXd& scores, std::size_t k, Direction direction);

}  // namespace taskattr
