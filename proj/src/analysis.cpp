#include "taskattr/analysis.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "taskattr/errors.hpp"
#include "taskattr/io.hpp"
#include "taskattr/log.hpp"
#include "taskattr/rng.hpp"

namespace taskattr {

double pearson(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != y.size()) throw ConfigError("correlation: length mismatch");
    if (x.size() < 2) throw ConfigError("correlation: need at least two points");
    const Eigen::ArrayXd a = x.array() - x.mean();
    const Eigen::ArrayXd b = y.array() - y.mean();
    const double sa = std::sqrt(a.square().sum());
    const double sb = std::sqrt(b.square().sum());
    if (!(sa > 0.0) || !(sb > 0.0)) throw NumericError("correlation undefined: zero variance");
    return std::clamp((a * b).sum() / (sa * sb), -1.0, 1.0);
}

Eigen::VectorXd average_ranks(const Eigen::VectorXd& x) {
    const auto n = static_cast<std::size_t>(x.size());
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return x[static_cast<Eigen::Index>(a)] < x[static_cast<Eigen::Index>(b)];
    });
    Eigen::VectorXd ranks(x.size());
    for (std::size_t i = 0; i < n;) {
        std::size_t j = i;
        while (j + 1 < n && x[static_cast<Eigen::Index>(order[j + 1])] == x[static_cast<Eigen::Index>(order[i])]) ++j;
        const double rank = 0.5 * static_cast<double>(i + j) + 1.0;
        for (std::size_t t = i; t <= j; ++t) ranks[static_cast<Eigen::Index>(order[t])] = rank;
        i = j + 1;
    }
    return ranks;
}

double spearman(const Eigen::VectorXd& x, const Eigen::VectorXd& y) {
    if (x.size() != y.size()) throw ConfigError("spearman: length mismatch");
    return pearson(average_ranks(x), average_ranks(y));
}

double lds(const SurrogateDataset& predicted, const SurrogateDataset& actual) {
    if (predicted.size() != actual.size()) throw ConfigError("lds: datasets differ in size");
    for (std::size_t i = 0; i < predicted.size(); ++i)
        if (!(predicted.entries[i].s == actual.entries[i].s))
            throw ConfigError("lds: subsets are misaligned at entry " + std::to_string(i));
    return spearman(predicted.outcomes(), actual.outcomes());
}

double lds(const Surrogate& model, const SurrogateDataset& holdout) {
    return spearman(predict_all(model, holdout.subsets()), holdout.outcomes());
}

double lds(const Eigen::VectorXd& scores, const SurrogateDataset& holdout) {
    if (static_cast<std::size_t>(scores.size()) != holdout.task_count) throw ConfigError("lds: score length != task count");
    Eigen::VectorXd pred(static_cast<Eigen::Index>(holdout.size()));
    for (std::size_t i = 0; i < holdout.size(); ++i)
        pred[static_cast<Eigen::Index>(i)] = holdout.entries[i].s.to_vector().dot(scores);
    return spearman(pred, holdout.outcomes());
}

void QuadraticGroundTruth::validate() const {
    if (h.rows() != g.size() || h.cols() != g.size()) throw ConfigError("quadratic: h must be K x K");
    if ((h - h.transpose()).cwiseAbs().maxCoeff() > 1e-12) throw ConfigError("quadratic: h must be symmetric");
    if (!std::isfinite(f0) || !g.allFinite() || !h.allFinite()) throw ConfigError("quadratic: non-finite entries");
}

QuadraticGroundTruth random_quadratic(std::size_t task_count, std::uint64_t seed, double f0) {
    Rng rng(seed);
    const auto K = static_cast<Eigen::Index>(task_count);
    QuadraticGroundTruth gt{f0, Eigen::VectorXd(K), Eigen::MatrixXd(K, K)};
    for (Eigen::Index i = 0; i < K; ++i) gt.g[i] = 2.0 * rng.uniform() - 1.0;
    for (Eigen::Index i = 0; i < K; ++i)
        for (Eigen::Index j = i; j < K; ++j) gt.h(i, j) = gt.h(j, i) = 2.0 * rng.uniform() - 1.0;
    return gt;
}

double eval_quadratic(const QuadraticGroundTruth& gt, const SubsetVector& s) {
    if (s.size() != gt.task_count()) throw ConfigError("quadratic: subset length != K");
    const Eigen::VectorXd x = s.to_vector().array() - 1.0;
    return gt.f0 + gt.g.dot(x) + 0.5 * x.dot(gt.h * x);
}

namespace {

void check_probability(double p) {
    if (!(p > 0.0 && p < 1.0)) throw ConfigError("p must lie in (0, 1)");
}

}  // namespace

Eigen::VectorXd closed_form_slope(const QuadraticGroundTruth& gt, double p) {
    gt.validate();
    check_probability(p);
    return gt.g + (p - 1.0) * gt.h.rowwise().sum() + 0.5 * (1.0 - 2.0 * p) * gt.h.diagonal();
}

SlopeReport verify_closed_form(const QuadraticGroundTruth& gt, double p, std::size_t m, std::uint64_t seed) {
    gt.validate();
    check_probability(p);
    const std::size_t K = gt.task_count();
    if (m < 10 * K) throw ConfigError("verify_closed_form: need m >= 10 K");
    std::vector<SubsetVector> subsets;
    subsets.reserve(m);
    Eigen::VectorXd y(static_cast<Eigen::Index>(m));
    std::vector<std::uint8_t> bits(K);
    for (std::size_t i = 0; i < m; ++i) {
        Rng rng(derive_seed(seed, i));
        for (auto& b : bits) b = rng.bernoulli(p) ? 1 : 0;
        subsets.emplace_back(bits);
        y[static_cast<Eigen::Index>(i)] = eval_quadratic(gt, subsets.back());
    }
    const auto fit = fit_linear(subsets, y);
    SlopeReport r;
    r.beta_hat = fit.beta;
    r.alpha_hat = fit.alpha;
    r.beta_closed = closed_form_slope(gt, p);
    r.l2_gap = (r.beta_hat - r.beta_closed).norm();
    r.sampling_band = std::sqrt(static_cast<double>(K) / static_cast<double>(m)) * r.beta_closed.norm();
    r.band_constant = r.sampling_band > 0.0 ? r.l2_gap / r.sampling_band : 0.0;
    double sse = 0.0;
    for (std::size_t i = 0; i < m; ++i) {
        const double e = y[static_cast<Eigen::Index>(i)] - predict(fit, subsets[i]);
        sse += e * e;
    }
    r.residual_mse = sse / static_cast<double>(m);
    r.m = m;
    r.p = p;
    return r;
}

ResidualPrediction residual_formula(const QuadraticGroundTruth& gt, double p) {
    gt.validate();
    check_probability(p);
    const auto K = gt.g.size();
    const double v = p * (1.0 - p);
    const double skew = 1.0 - 2.0 * p;
    double diag = 0.0;
    double off = 0.0;
    for (Eigen::Index i = 0; i < K; ++i) {
        diag += gt.h(i, i) * gt.h(i, i);
        for (Eigen::Index j = i + 1; j < K; ++j) off += gt.h(i, j) * gt.h(i, j);
    }
    ResidualPrediction r;
    r.var_q = 0.25 * (diag * v * skew * skew + 4.0 * off * v * v);
    r.cov_xq = 0.5 * gt.h.diagonal() * v * skew;
    r.predicted_min_mse = std::max(0.0, r.var_q - r.cov_xq.squaredNorm() / v);

    // alpha = E[F] - beta^T E[s] with beta the population slope.
    const Eigen::VectorXd mu_shift = Eigen::VectorXd::Constant(K, p - 1.0);
    const double mean_f = gt.f0 + gt.g.dot(mu_shift) + 0.5 * (mu_shift.dot(gt.h * mu_shift) + v * gt.h.trace());
    r.predicted_alpha = mean_f - p * closed_form_slope(gt, p).sum();
    return r;
}

void AttributionReport::validate(std::size_t task_count) const {
    if (static_cast<std::size_t>(scores.size()) != task_count)
        throw ConfigError("report '" + method + "': score length does not match the task count");
    if (lds && (*lds < -1.0 || *lds > 1.0)) throw ConfigError("report '" + method + "': lds outside [-1, 1]");
}

nlohmann::json to_json(const AttributionReport& report) {
    nlohmann::json scores = nlohmann::json::array();
    for (const double v : report.scores) scores.push_back(v);
    nlohmann::json doc = {{"method", report.method}, {"scores", scores}, {"metadata", report.metadata}};
    doc["lds"] = report.lds ? nlohmann::json(*report.lds) : nlohmann::json(nullptr);
    doc["pearson_vs_loo"] = report.pearson_vs_loo ? nlohmann::json(*report.pearson_vs_loo) : nlohmann::json(nullptr);
    return doc;
}

AttributionReport report_from_json(const nlohmann::json& doc) {
    try {
        AttributionReport r;
        r.method = doc.at("method").get<std::string>();
        const auto& scores = doc.at("scores");
        r.scores.resize(static_cast<Eigen::Index>(scores.size()));
        for (std::size_t i = 0; i < scores.size(); ++i)
            r.scores[static_cast<Eigen::Index>(i)] = scores[i].is_null() ? std::nan("") : scores[i].get<double>();
        if (doc.contains("lds") && !doc["lds"].is_null()) r.lds = doc["lds"].get<double>();
        if (doc.contains("pearson_vs_loo") && !doc["pearson_vs_loo"].is_null())
            r.pearson_vs_loo = doc["pearson_vs_loo"].get<double>();
        if (doc.contains("metadata"))
            for (const auto& [key, value] : doc["metadata"].items())
                r.metadata[key] = value.is_string() ? value.get<std::string>() : value.dump();
        return r;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("report JSON: ") + e.what());
    }
}

EnsembleScores ensemble_attribution(const Surrogate& model, std::size_t task_count, const SamplingConfig& sampling) {
    const auto subsets = sample_subsets(sampling, task_count);
    const auto pred = predict_all(model, subsets);
    EnsembleScores out;
    out.scores = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(task_count));
    out.counts.assign(task_count, 0);
    for (std::size_t i = 0; i < subsets.size(); ++i)
        for (std::size_t k = 0; k < task_count; ++k)
            if (subsets[i][k]) {
                out.scores[static_cast<Eigen::Index>(k)] += pred[static_cast<Eigen::Index>(i)];
                ++out.counts[k];
            }
    for (std::size_t k = 0; k < task_count; ++k) {
        if (out.counts[k] == 0) {
            out.missing.push_back(k);
            out.scores[static_cast<Eigen::Index>(k)] = std::nan("");
        } else {
            out.scores[static_cast<Eigen::Index>(k)] /= static_cast<double>(out.counts[k]);
        }
    }
    if (!out.missing.empty())
        log::warn("ensemble attribution: " + std::to_string(out.missing.size()) +
                  " task(s) never sampled; increase m or resample");
    return out;
}

SubsetVector select_top_k(const Eigen::VectorXd& scores, std::size_t k, Direction direction) {
    const auto K = static_cast<std::size_t>(scores.size());
    if (k < 1 || k > K) throw ConfigError("select_top_k: need 1 <= k <= K");
    std::vector<std::size_t> order(K);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        const double sa = scores[static_cast<Eigen::Index>(a)];
        const double sb = scores[static_cast<Eigen::Index>(b)];
        return direction == Direction::min_loss ? sa < sb : sa > sb;
    });
    auto out = SubsetVector::zeros(K);
    for (std::size_t i = 0; i < k; ++i) out.set(order[i], true);
    return out;
}

}  // namespace taskattr
