#pragma once

#include <cstddef>
#include <string>
#include <variant>
#include <vector>

#include <Eigen/Dense>

#include "taskattr/oracle.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

struct KernelSpec {
    enum class Kind { rbf, polynomial };

    Kind kind = Kind::rbf;
    double gamma = 1.0;  ///< rbf: exp(-gamma * ||a - b||^2)
    int degree = 1;      ///< polynomial: (a . b + c)^degree
    double c = 0.0;

    static KernelSpec rbf(double gamma) { return {Kind::rbf, gamma, 1, 0.0}; }
    static KernelSpec polynomial(int degree, double c = 0.0) { return {Kind::polynomial, 1.0, degree, c}; }
    /// rbf with gamma = 1 / K.
    static KernelSpec default_for(std::size_t task_count) {
        return rbf(1.0 / static_cast<double>(task_count));
    }

    void validate() const;
    std::string label() const;

    friend bool operator==(const KernelSpec&, const KernelSpec&) = default;
};

inline constexpr double kDefaultKrrLambda = 1e-1;

double kernel_value(const KernelSpec& spec, const SubsetVector& a, const SubsetVector& b);

/// Gram matrix G(i, j) = k(rows[i], cols[j]).
Eigen::MatrixXd gram_matrix(const KernelSpec& spec, const std::vector<SubsetVector>& rows,
                            const std::vector<SubsetVector>& cols);

struct LinearSurrogate {
    double alpha = 0.0;
    Eigen::VectorXd beta;
};

struct KernelSurrogate {
    std::vector<SubsetVector> anchors;
    Eigen::VectorXd theta;
    KernelSpec spec;
    double lambda = 0.0;
    /// Diagonal jitter added when the lambda = 0 factorization failed.
    double jitter = 0.0;
};

using Surrogate = std::variant<LinearSurrogate, KernelSurrogate>;

/// Ordinary least squares with intercept via column-pivoted QR.
/// Throws RankDeficient (naming the dependent columns) when m < K + 1 or
/// the design [1 | S] is rank deficient.
LinearSurrogate fit_linear(const SurrogateDataset& data);
LinearSurrogate fit_linear(const std::vector<SubsetVector>& subsets, const Eigen::VectorXd& y);

/// Kernel ridge regression: theta = (G + lambda I)^-1 y via Cholesky with
/// one step of iterative refinement. At lambda = 0 a failed factorization is
/// retried once with jitter 1e-10 * trace(G) / m, recorded in the result.
KernelSurrogate fit_krr(const SurrogateDataset& data, const KernelSpec& spec, double lambda);
KernelSurrogate fit_krr(const std::vector<SubsetVector>& subsets, const Eigen::VectorXd& y,
                        const KernelSpec& spec, double lambda);

double predict(const LinearSurrogate& model, const SubsetVector& s);
double predict(const KernelSurrogate& model, const SubsetVector& s);
double predict(const Surrogate& model, const SubsetVector& s);
Eigen::VectorXd predict_all(const Surrogate& model, const std::vector<SubsetVector>& subsets);

struct CvRow {
    KernelSpec spec;
    double lambda = 0.0;
    std::vector<double> fold_mse;
    double mean_mse = 0.0;
    bool excluded = false;  ///< a fold produced a non-finite error
};

struct CvResult {
    KernelSpec best_spec;
    double best_lambda = 0.0;
    double best_mse = 0.0;
    std::vector<CvRow> table;
};

/// k-fold CV over spec_grid x lambda_grid. Entry i goes to fold i % folds.
/// Ties go to the larger lambda, then the larger gamma.
CvResult cross_validate(const SurrogateDataset& data, const std::vector<KernelSpec>& spec_grid,
                        const std::vector<double>& lambda_grid, std::size_t folds = 5);

/// Root-mean-squared prediction error on `holdout`.
double residual_error(const Surrogate& model, const SurrogateDataset& holdout);

}  // namespace taskattr
