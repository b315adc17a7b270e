#include "taskattr/surrogate.hpp"

#include <cmath>
#include <limits>

#include "taskattr/errors.hpp"
#include "taskattr/log.hpp"

namespace taskattr {

void KernelSpec::validate() const {
    if (kind == Kind::rbf) {
        if (!(gamma > 0.0) || !std::isfinite(gamma)) throw ConfigError("rbf gamma must be > 0");
    } else {
        if (degree < 1 || degree > 3) throw ConfigError("polynomial degree must be 1, 2 or 3");
        if (!std::isfinite(c)) throw ConfigError("polynomial offset must be finite");
    }
}

std::string KernelSpec::label() const {
    if (kind == Kind::rbf) return "rbf(gamma=" + std::to_string(gamma) + ")";
    return "poly(degree=" + std::to_string(degree) + ",c=" + std::to_string(c) + ")";
}

double kernel_value(const KernelSpec& spec, const SubsetVector& a, const SubsetVector& b) {
    if (a.size() != b.size()) throw ConfigError("kernel_value: subset length mismatch");
    if (spec.kind == KernelSpec::Kind::rbf) {
        // ||a - b||^2 of binary vectors is their Hamming distance.
        return std::exp(-spec.gamma * static_cast<double>(a.hamming(b)));
    }
    return std::pow(static_cast<double>(a.dot(b)) + spec.c, spec.degree);
}

Eigen::MatrixXd gram_matrix(const KernelSpec& spec, const std::vector<SubsetVector>& rows,
                            const std::vector<SubsetVector>& cols) {
    Eigen::MatrixXd g(static_cast<Eigen::Index>(rows.size()), static_cast<Eigen::Index>(cols.size()));
    for (std::size_t i = 0; i < rows.size(); ++i) {
        for (std::size_t j = 0; j < cols.size(); ++j) {
            g(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(j)) = kernel_value(spec, rows[i], cols[j]);
        }
    }
    return g;
}

LinearSurrogate fit_linear(const std::vector<SubsetVector>& subsets, const Eigen::VectorXd& y) {
    if (subsets.empty()) throw ConfigError("fit_linear: empty dataset");
    if (static_cast<Eigen::Index>(subsets.size()) != y.size()) throw ConfigError("fit_linear: size mismatch");
    const auto k = static_cast<Eigen::Index>(subsets.front().size());
    const auto m = static_cast<Eigen::Index>(subsets.size());
    auto column_name = [](Eigen::Index col) {
        return col == 0 ? std::string("intercept") : "s_" + std::to_string(col - 1);
    };
    if (m < k + 1) {
        std::vector<std::string> all;
        for (Eigen::Index c = 0; c <= k; ++c) all.push_back(column_name(c));
        throw RankDeficient("fit_linear: need m >= K + 1 subsets (m = " + std::to_string(m) +
                                ", K = " + std::to_string(k) + ")",
                            std::move(all));
    }
    Eigen::MatrixXd design(m, k + 1);
    design.col(0).setOnes();
    for (Eigen::Index i = 0; i < m; ++i) {
        const auto& s = subsets[static_cast<std::size_t>(i)];
        if (static_cast<Eigen::Index>(s.size()) != k) throw ConfigError("fit_linear: ragged subsets");
        design.row(i).tail(k) = s.to_vector().transpose();
    }
    Eigen::ColPivHouseholderQR<Eigen::MatrixXd> qr(design);
    if (qr.rank() < k + 1) {
        // Columns pivoted past the numerical rank are the dependent ones.
        std::vector<std::string> degenerate;
        const auto& perm = qr.colsPermutation().indices();
        for (Eigen::Index r = qr.rank(); r < k + 1; ++r) degenerate.push_back(column_name(perm[r]));
        std::string joined;
        for (const auto& name : degenerate) joined += (joined.empty() ? "" : ", ") + name;
        throw RankDeficient("fit_linear: design is rank deficient (rank " + std::to_string(qr.rank()) + " of " +
                                std::to_string(k + 1) + "); dependent columns: " + joined,
                            std::move(degenerate));
    }
    const Eigen::VectorXd coef = qr.solve(y);
    LinearSurrogate out;
    out.alpha = coef[0];
    out.beta = coef.tail(k);
    if (!std::isfinite(out.alpha) || !out.beta.allFinite()) throw NumericError("fit_linear: non-finite coefficients");
    return out;
}

LinearSurrogate fit_linear(const SurrogateDataset& data) {
    data.validate();
    return fit_linear(data.subsets(), data.outcomes());
}

KernelSurrogate fit_krr(const std::vector<SubsetVector>& subsets, const Eigen::VectorXd& y,
                        const KernelSpec& spec, double lambda) {
    spec.validate();
    if (subsets.empty()) throw ConfigError("fit_krr: need m >= 1");
    if (!(lambda >= 0.0) || !std::isfinite(lambda)) throw ConfigError("fit_krr: lambda must be >= 0");
    if (static_cast<Eigen::Index>(subsets.size()) != y.size()) throw ConfigError("fit_krr: size mismatch");

    const Eigen::MatrixXd gram = gram_matrix(spec, subsets, subsets);
    if (!gram.allFinite()) throw NumericError("fit_krr: non-finite Gram matrix entries");
    const auto m = gram.rows();

    KernelSurrogate out;
    out.anchors = subsets;
    out.spec = spec;
    out.lambda = lambda;

    Eigen::MatrixXd system = gram;
    system.diagonal().array() += lambda;
    Eigen::LLT<Eigen::MatrixXd> llt(system);
    if (llt.info() != Eigen::Success) {
        if (lambda > 0.0) throw NumericError("fit_krr: Cholesky factorization failed");
        out.jitter = 1e-10 * gram.trace() / static_cast<double>(m);
        system.diagonal().array() += out.jitter;
        llt.compute(system);
        if (llt.info() != Eigen::Success) throw NumericError("fit_krr: Cholesky failed after jitter retry");
        log::warn("fit_krr: applied jitter " + std::to_string(out.jitter));
    }
    out.theta = llt.solve(y);
    out.theta += llt.solve(y - system * out.theta);
    if (!out.theta.allFinite()) throw NumericError("fit_krr: non-finite coefficients");
    return out;
}

KernelSurrogate fit_krr(const SurrogateDataset& data, const KernelSpec& spec, double lambda) {
    data.validate();
    return fit_krr(data.subsets(), data.outcomes(), spec, lambda);
}

double predict(const LinearSurrogate& model, const SubsetVector& s) {
    if (static_cast<Eigen::Index>(s.size()) != model.beta.size()) throw ConfigError("predict: subset length mismatch");
    return model.alpha + model.beta.dot(s.to_vector());
}

double predict(const KernelSurrogate& model, const SubsetVector& s) {
    double total = 0.0;
    for (std::size_t i = 0; i < model.anchors.size(); ++i) {
        total += model.theta[static_cast<Eigen::Index>(i)] * kernel_value(model.spec, model.anchors[i], s);
    }
    return total;
}

double predict(const Surrogate& model, const SubsetVector& s) {
    return std::visit([&](const auto& m) { return predict(m, s); }, model);
}

Eigen::VectorXd predict_all(const Surrogate& model, const std::vector<SubsetVector>& subsets) {
    Eigen::VectorXd out(static_cast<Eigen::Index>(subsets.size()));
    for (std::size_t i = 0; i < subsets.size(); ++i) out[static_cast<Eigen::Index>(i)] = predict(model, subsets[i]);
    return out;
}

CvResult cross_validate(const SurrogateDataset& data, const std::vector<KernelSpec>& spec_grid,
                        const std::vector<double>& lambda_grid, std::size_t folds) {
    if (spec_grid.empty() || lambda_grid.empty()) throw ConfigError("cross_validate: empty grid");
    if (folds < 2) throw ConfigError("cross_validate: need folds >= 2");
    if (data.size() < folds) throw ConfigError("cross_validate: need m >= folds");
    data.validate();

    const auto subsets = data.subsets();
    const auto y = data.outcomes();
    CvResult result;
    bool have_best = false;
    auto better = [](const CvRow& a, const CvRow& b) {
        // a strictly preferred over incumbent b.
        if (a.mean_mse != b.mean_mse) return a.mean_mse < b.mean_mse;
        if (a.lambda != b.lambda) return a.lambda > b.lambda;
        return a.spec.gamma > b.spec.gamma;
    };
    std::size_t best_row = 0;
    for (const auto& spec : spec_grid) {
        spec.validate();
        for (double lambda : lambda_grid) {
            CvRow row{spec, lambda, {}, 0.0, false};
            for (std::size_t f = 0; f < folds; ++f) {
                std::vector<SubsetVector> train_s, test_s;
                std::vector<double> train_y, test_y;
                for (std::size_t i = 0; i < subsets.size(); ++i) {
                    auto& dst_s = (i % folds == f) ? test_s : train_s;
                    auto& dst_y = (i % folds == f) ? test_y : train_y;
                    dst_s.push_back(subsets[i]);
                    dst_y.push_back(y[static_cast<Eigen::Index>(i)]);
                }
                double mse = std::numeric_limits<double>::quiet_NaN();
                try {
                    const auto model = fit_krr(train_s, Eigen::Map<const Eigen::VectorXd>(
                                                            train_y.data(), static_cast<Eigen::Index>(train_y.size())),
                                               spec, lambda);
                    double sum = 0.0;
                    for (std::size_t i = 0; i < test_s.size(); ++i) {
                        const double r = predict(model, test_s[i]) - test_y[i];
                        sum += r * r;
                    }
                    mse = sum / static_cast<double>(test_s.size());
                } catch (const NumericError&) {
                }
                row.fold_mse.push_back(mse);
                if (!std::isfinite(mse)) row.excluded = true;
            }
            if (row.excluded) {
                log::warn("cross_validate: excluding " + spec.label() + " lambda=" + std::to_string(lambda) +
                          " (non-finite fold error)");
                row.mean_mse = std::numeric_limits<double>::quiet_NaN();
            } else {
                double sum = 0.0;
                for (double v : row.fold_mse) sum += v;
                row.mean_mse = sum / static_cast<double>(folds);
            }
            result.table.push_back(row);
            if (!row.excluded && (!have_best || better(row, result.table[best_row]))) {
                best_row = result.table.size() - 1;
                have_best = true;
            }
        }
    }
    if (!have_best) throw NumericError("cross_validate: every grid point produced non-finite errors");
    result.best_spec = result.table[best_row].spec;
    result.best_lambda = result.table[best_row].lambda;
    result.best_mse = result.table[best_row].mean_mse;
    return result;
}

double residual_error(const Surrogate& model, const SurrogateDataset& holdout) {
    if (holdout.size() == 0) throw ConfigError("residual_error: empty holdout");
    double sum = 0.0;
    for (const auto& e : holdout.entries) {
        const double r = predict(model, e.s) - e.outcome;
        sum += r * r;
    }
    return std::sqrt(sum / static_cast<double>(holdout.size()));
}

}  // namespace taskattr
