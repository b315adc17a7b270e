// Acceptance checks: one PASS/FAIL line per criterion. Criterion 7 (property
// suites) runs first; criteria 1-6 are skipped when it fails.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <regex>
#include <sstream>
#include <string>
#include <vector>

#include "taskattr/analysis.hpp"
#include "taskattr/baselines.hpp"
#include "taskattr/estimator.hpp"
#include "taskattr/io.hpp"
#include "taskattr/log.hpp"
#include "taskattr/oracle.hpp"
#include "taskattr/parallel.hpp"
#include "taskattr/pipeline.hpp"
#include "taskattr/rng.hpp"
#include "taskattr/surrogate.hpp"

using namespace taskattr;
namespace fs = std::filesystem;

namespace {

struct Outcome {
    bool pass = false;
    std::string detail;
};

struct Check {
    int id;
    std::string name;
    double budget_seconds;
    std::function<Outcome()> body;
};

std::string fmt(const char* pattern, double a, double b = 0.0, double c = 0.0, double d = 0.0) {
    char buf[256];
    std::snprintf(buf, sizeof buf, pattern, a, b, c, d);
    return buf;
}

Eigen::VectorXd random_vector(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Eigen::VectorXd v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

std::vector<SubsetVector> distinct_subsets(std::size_t k, std::size_t m, std::uint64_t seed) {
    std::vector<SubsetVector> out;
    Rng rng(seed);
    while (out.size() < m) {
        std::vector<std::uint8_t> bits(k);
        for (auto& b : bits) b = rng.bernoulli(0.5) ? 1 : 0;
        SubsetVector s(bits);
        if (std::find(out.begin(), out.end(), s) == out.end()) out.push_back(s);
    }
    return out;
}

Eigen::VectorXd permute(const Eigen::VectorXd& v, const std::vector<std::size_t>& order) {
    Eigen::VectorXd out(v.size());
    for (std::size_t i = 0; i < order.size(); ++i) out[static_cast<Eigen::Index>(i)] = v[static_cast<Eigen::Index>(order[i])];
    return out;
}

double max_rel(const Eigen::VectorXd& a, const Eigen::VectorXd& b) {
    return (a - b).cwiseAbs().maxCoeff() / std::max(1e-300, b.cwiseAbs().maxCoeff());
}

// ---- criterion 7 -----------------------------------------------------------

Outcome finite_differences() {
    double worst_grad = 0.0;
    double worst_hvp = 0.0;
    for (std::uint64_t trial = 0; trial < 40; ++trial) {
        Rng rng(derive_seed(7, trial));
        GaussianBundleConfig g;
        g.task_count = 1;
        g.samples_per_task = 4 + rng.below(6);
        g.feature_dim = 2 + rng.below(4);
        g.class_count = 2 + static_cast<int>(rng.below(3));
        g.test_samples = 5;
        g.seed = trial;
        const auto bundle = make_gaussian_bundle(g);
        const auto kind = trial % 2 == 0 ? ModelKind::logreg : ModelKind::mlp2;
        const auto spec = spec_for(bundle, kind, 2 + rng.below(4), 0.05 * rng.uniform());
        const ModelParams params{spec, random_vector(static_cast<Eigen::Index>(spec.parameter_count()), trial + 50, 0.5)};
        const std::span<const Sample> samples = bundle.tasks[0].samples;
        const auto analytic = loss_grad(params, samples).grad;
        const double h = 1e-5;
        Eigen::VectorXd numeric(analytic.size());
        Eigen::VectorXd probe = params.flat;
        for (Eigen::Index i = 0; i < probe.size(); ++i) {
            probe[i] += h;
            const double up = loss_grad({spec, probe}, samples).loss;
            probe[i] -= 2 * h;
            const double down = loss_grad({spec, probe}, samples).loss;
            probe[i] += h;
            numeric[i] = (up - down) / (2 * h);
        }
        worst_grad = std::max(worst_grad, (analytic - numeric).cwiseAbs().maxCoeff());
        const Eigen::VectorXd v = random_vector(analytic.size(), trial + 99);
        const Eigen::VectorXd fd =
            (loss_grad({spec, params.flat + 1e-4 * v}, samples).grad - loss_grad({spec, params.flat - 1e-4 * v}, samples).grad) / 2e-4;
        worst_hvp = std::max(worst_hvp, (hvp(params, samples, v) - fd).cwiseAbs().maxCoeff());
    }
    return {worst_grad < 1e-5 && worst_hvp < 1e-5, fmt("grad %.1e hvp %.1e", worst_grad, worst_hvp)};
}

Outcome gram_positive_definite() {
    double smallest = 1e300;
    for (const std::size_t m : {50, 200})
        for (const double gamma : {1.0 / 25.0, 1.0}) {
            const auto subsets = distinct_subsets(25, m, m);
            const Eigen::MatrixXd g = gram_matrix(KernelSpec::rbf(gamma), subsets, subsets);
            smallest = std::min(smallest, Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd>(g).eigenvalues().minCoeff());
        }
    return {smallest > 0.0, fmt("min eigenvalue %.2e", smallest)};
}

Outcome ols_orthogonality() {
    const auto subsets = distinct_subsets(8, 120, 3);
    const Eigen::VectorXd y = random_vector(120, 4);
    const auto fit = fit_linear(subsets, y);
    Eigen::VectorXd r(120);
    Eigen::MatrixXd x(120, 9);
    for (Eigen::Index i = 0; i < 120; ++i) {
        const auto& s = subsets[static_cast<std::size_t>(i)];
        x(i, 0) = 1.0;
        x.row(i).tail(8) = s.to_vector().transpose();
        r[i] = y[i] - predict(fit, s);
    }
    const double worst = (x.transpose() * r).cwiseAbs().maxCoeff();
    return {worst < 1e-10, fmt("max |X^T r| %.1e", worst)};
}

Outcome jl_band() {
    const auto p = build_projection(1024, 256, 12);
    int inside = 0;
    for (std::uint64_t i = 0; i < 1000; ++i) {
        const Eigen::VectorXd v = random_vector(1024, 20000 + i).normalized();
        const double ratio = p.apply(v).squaredNorm();
        if (ratio >= 0.75 && ratio <= 1.25) ++inside;
    }
    return {inside >= 950, fmt("%.0f/1000 inside [0.75, 1.25]", inside)};
}

Outcome equivariance() {
    GaussianBundleConfig g;
    g.task_count = 6;
    g.samples_per_task = 8;
    g.feature_dim = 3;
    g.class_count = 3;
    g.test_samples = 30;
    g.seed = 11;
    const auto bundle = make_gaussian_bundle(g);
    const std::vector<std::size_t> order{3, 0, 5, 1, 4, 2};
    const auto permuted = bundle.permuted(order);
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 1e-2);
    const auto all = SubsetVector::all_ones(6);
    TrainerConfig t;
    t.step_size = 1.0;
    t.iterations = 800;
    t.zero_init = true;
    const auto run = train(spec, bundle, all, t, true);
    const auto run_p = train(spec, permuted, all, t);

    const double inf = max_rel(permute(influence_scores(run.params, bundle, all).scores, order),
                               influence_scores(run_p.params, permuted, all).scores);
    const double tr = max_rel(permute(tracin_scores(run.trail, bundle, bundle.test), order),
                              tracin_scores(run.trail, permuted, permuted.test));
    const TrakEnsemble ensemble{{run.params}, build_projection(spec.parameter_count(), 8, 3), {}, 1e-8};
    const double tk = max_rel(permute(trak_scores(ensemble, bundle, bundle.test), order),
                              trak_scores(ensemble, permuted, permuted.test));
    const double lo = [&] {
        Oracle a(bundle, spec, t);
        Oracle b(permuted, spec, t);
        return max_rel(permute(loo_scores(a).scores, order), loo_scores(b).scores);
    }();
    const double worst = std::max({inf, tr, tk, lo});
    return {worst < 1e-8, fmt("influence %.1e tracin %.1e trak %.1e loo %.1e", inf, tr, tk, lo)};
}

Outcome hutchinson() {
    Eigen::Matrix2d a;
    a << 2, 1, 1, 3;
    const auto est = hutchinson_trace([&](const Eigen::VectorXd& v) { return Eigen::VectorXd(a * v); }, 2, 1000, 1);
    const double z = std::abs(est.estimate - 5.0) / est.standard_error;
    return {z <= 3.0, fmt("estimate %.4f (exact 5), %.2f SE", est.estimate, z)};
}

std::string stable_text(const fs::path& path) {
    static const std::regex runtime(R"("runtime_seconds":\s*"[^"]*")");
    auto text = std::regex_replace(read_text(path), runtime, "");
    return text;
}

Outcome pipeline_reproducibility() {
    const auto root = fs::temp_directory_path() / "taskattr_acceptance_jobs";
    fs::remove_all(root);
    const nlohmann::json doc = {
        {"seed", 9},
        {"bundle", {{"generator", "gaussian"}, {"task_count", 6}, {"samples_per_task", 10}, {"test_samples", 40},
                    {"feature_dim", 4}, {"class_count", 3}, {"label_noise", 0.2}}},
        {"model", {{"kind", "mlp2"}, {"hidden_dim", 4}, {"l2_penalty", 1e-2}}},
        {"trainer", {{"step_size", 0.5}, {"iterations", 100}}},
        {"sampling", {{"mode", "bernoulli"}, {"p", 0.5}, {"m", 50}}},
        {"surrogate", {{"kind", "kernel"}, {"lambda", "cv"}}},
        {"outcome", {{"source", "gradex"}, {"k", 16}}},
        {"baselines", {"influence", "tracin", "trak"}},
        {"hessian_trace", {{"probes", 10}}},
    };
    std::ostringstream sink;
    for (const auto& [name, jobs] : {std::pair{"serial", std::size_t{1}}, std::pair{"parallel", std::size_t{8}}}) {
        auto config = parse_config(doc);
        config.output_dir = root / name;
        run_attribute(config, jobs, sink);
        run_loo(config, jobs, sink);
    }
    std::size_t files = 0;
    std::size_t mismatches = 0;
    for (const auto& entry : fs::directory_iterator(root / "serial")) {
        if (!entry.is_regular_file()) continue;
        const auto other = root / "parallel" / entry.path().filename();
        ++files;
        if (!fs::exists(other) || stable_text(entry.path()) != stable_text(other)) ++mismatches;
    }
    fs::remove_all(root);
    return {files >= 8 && mismatches == 0, fmt("%.0f files compared, %.0f differ", files, mismatches)};
}

Outcome property_suites() {
    const std::vector<std::pair<std::string, std::function<Outcome()>>> parts{
        {"fd", finite_differences},        {"gram", gram_positive_definite}, {"ols", ols_orthogonality},
        {"jl", jl_band},                   {"perm", equivariance},           {"hutchinson", hutchinson},
        {"jobs", pipeline_reproducibility}};
    Outcome total{true, ""};
    for (const auto& [name, body] : parts) {
        const auto r = body();
        total.pass = total.pass && r.pass;
        total.detail += (total.detail.empty() ? "" : "; ") + name + (r.pass ? " ok " : " FAILED ") + "(" + r.detail + ")";
    }
    return total;
}

// ---- criteria 1-6 ----------------------------------------------------------

Outcome slope_criterion() {
    const auto gt = random_quadratic(10, 2024);
    const auto report = verify_closed_form(gt, 0.5, 50000, 1);
    const double bound = 0.05 * (report.beta_closed.norm() + 1.0);
    double small = 0.0;
    double large = 0.0;
    const std::uint64_t reps = 20;
    for (std::uint64_t r = 0; r < reps; ++r) {
        const double a = verify_closed_form(gt, 0.5, 500, 100 + r).l2_gap;
        const double b = verify_closed_form(gt, 0.5, 50000, 200 + r).l2_gap;
        small += a * a;
        large += b * b;
    }
    const double ratio = std::sqrt(small / large);
    return {report.l2_gap < bound && ratio >= 7.0 && ratio <= 13.0,
            fmt("gap %.4f < %.4f; rms gap ratio m=500/50000 %.2f in [7, 13]", report.l2_gap, bound, ratio)};
}

Outcome residual_error_formula() {
    const auto gt = random_quadratic(10, 2024);
    const auto predicted = residual_formula(gt, 0.5);
    const auto empirical = verify_closed_form(gt, 0.5, 100000, 3);
    const double rel = std::abs(empirical.residual_mse - predicted.predicted_min_mse) / predicted.predicted_min_mse;
    return {rel < 0.05, fmt("empirical %.5f predicted %.5f rel %.4f", empirical.residual_mse,
                            predicted.predicted_min_mse, rel)};
}

Outcome linear_regime_agreement() {
    GaussianBundleConfig g;
    g.task_count = 455;
    g.samples_per_task = 1;
    g.test_samples = 1;
    g.feature_dim = 30;
    g.class_count = 2;
    g.label_noise = 0.1;
    g.seed = 1;
    const auto bundle = make_gaussian_bundle(g);
    const std::size_t K = bundle.task_count();
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 1e-2);
    TrainerConfig t;
    t.step_size = 1.0;
    t.iterations = 1000;
    t.zero_init = true;
    Oracle oracle(bundle, spec, t);
    const auto jobs = default_jobs();

    std::vector<std::size_t> pick(K);
    for (std::size_t i = 0; i < K; ++i) pick[i] = i;
    Rng rng(99);
    for (std::size_t i = 0; i < 40; ++i) std::swap(pick[i], pick[i + rng.below(K - i)]);
    pick.resize(40);

    const auto full = oracle.train_on(SubsetVector::all_ones(K));
    const auto influence = influence_scores(full.params, bundle, SubsetVector::all_ones(K), {1e-3});
    std::vector<SubsetVector> removed;
    for (const auto k : pick) removed.push_back(SubsetVector::without(K, k));
    const double f_all = oracle.evaluate(SubsetVector::all_ones(K));
    const auto without = oracle.evaluate_many(removed, jobs);

    const auto data = build_surrogate_dataset(oracle, SamplingConfig::bernoulli(430.0 / 455.0, 1000, 5), OutcomeSource{}, jobs);
    const auto fit = fit_linear(data);

    Eigen::VectorXd loo(40), inf(40), lin(40);
    for (std::size_t i = 0; i < 40; ++i) {
        loo[static_cast<Eigen::Index>(i)] = f_all - without[i];
        inf[static_cast<Eigen::Index>(i)] = influence.scores[static_cast<Eigen::Index>(pick[i])];
        lin[static_cast<Eigen::Index>(i)] = fit.beta[static_cast<Eigen::Index>(pick[i])];
    }
    const double a = pearson(loo, inf);
    const double b = pearson(loo, lin);
    const double c = pearson(inf, lin);
    return {a > 0.9 && b > 0.9 && c > 0.9, fmt("pearson loo/if %.3f loo/ols %.3f if/ols %.3f", a, b, c)};
}

Outcome linearized_outcomes() {
    GaussianBundleConfig g;
    g.task_count = 8;
    g.samples_per_task = 40;
    g.test_samples = 200;
    g.feature_dim = 200;
    g.intrinsic_dim = 4;
    g.class_count = 4;
    g.separation = 3.0;
    g.label_noise = 0.1;
    g.seed = 7;
    const auto bundle = make_gaussian_bundle(g);
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 1e-2);
    TrainerConfig t;
    t.step_size = 1.0;
    t.iterations = 500;
    t.zero_init = true;
    Oracle oracle(bundle, spec, t);
    const auto jobs = default_jobs();
    const auto subsets = sample_subsets(SamplingConfig::bernoulli(0.5, 50, 3), bundle.task_count());
    const auto truth = build_surrogate_dataset(oracle, subsets, OutcomeSource{}, jobs);
    OutcomeSource exact;
    exact.kind = OutcomeSource::Kind::gradex;
    const auto identity = build_surrogate_dataset(oracle, subsets, exact, jobs);
    OutcomeSource sketched = exact;
    sketched.projection_dim = 256;
    sketched.projection_seed = 1;
    const auto projected = build_surrogate_dataset(oracle, subsets, sketched, jobs);
    double worst_identity = 0.0;
    double worst_projected = 0.0;
    for (std::size_t i = 0; i < subsets.size(); ++i) {
        const double f = truth.entries[i].outcome;
        worst_identity = std::max(worst_identity, std::abs(identity.entries[i].outcome - f) / std::abs(f));
        worst_projected = std::max(worst_projected, std::abs(projected.entries[i].outcome - f) / std::abs(f));
    }
    return {worst_identity < 0.01 && worst_projected < 0.05,
            fmt("max rel error identity %.2e (< 1%%), k=256 %.2e (< 5%%), d=%.0f", worst_identity, worst_projected,
                static_cast<double>(spec.parameter_count()))};
}

Outcome kernel_beats_linear() {
    const auto bundle = make_modular_bundle(29, ModularOp::quadratic, 3, 0.5, 1);
    const auto spec = spec_for(bundle, ModelKind::mlp2, 16, 1e-3);
    TrainerConfig t;
    t.step_size = 0.5;
    t.iterations = 700;
    t.seed = 3;
    Oracle oracle(bundle, spec, t);
    const auto jobs = default_jobs();
    const auto train = build_surrogate_dataset(oracle, SamplingConfig::bernoulli(0.5, 200, 11), OutcomeSource{}, jobs);
    const auto held = build_surrogate_dataset(oracle, SamplingConfig::bernoulli(0.5, 40, 12345), OutcomeSource{}, jobs);
    const std::vector<double> lambdas{1e-4, 1e-3, 1e-2, 1e-1, 1.0};
    std::vector<KernelSpec> rbf;
    for (const double gamma : {0.02, 0.05, 0.1, 0.2, 0.5, 1.0}) rbf.push_back(KernelSpec::rbf(gamma));
    const auto cv_rbf = cross_validate(train, rbf, lambdas);
    const auto cv_poly = cross_validate(train, {KernelSpec::polynomial(2, 1.0)}, lambdas);
    const Surrogate linear = fit_linear(train);
    const Surrogate kernel = fit_krr(train, cv_rbf.best_spec, cv_rbf.best_lambda);
    const Surrogate poly = fit_krr(train, cv_poly.best_spec, cv_poly.best_lambda);
    const double e_rbf = residual_error(kernel, held);
    const double e_poly = residual_error(poly, held);
    const double e_lin = residual_error(linear, held);
    const double gain = lds(kernel, held) - lds(linear, held);
    return {e_rbf < e_poly && e_poly < e_lin && gain > 0.05 && held.size() >= 20,
            fmt("rmse rbf %.4f < poly2 %.4f < linear %.4f; lds gain %.3f", e_rbf, e_poly, e_lin, gain)};
}

Outcome exact_interpolation() {
    const auto anchors = distinct_subsets(20, 100, 6);
    const Eigen::VectorXd y = random_vector(100, 7);
    const auto model = fit_krr(anchors, y, KernelSpec::default_for(20), 0.0);
    double worst = 0.0;
    for (std::size_t i = 0; i < anchors.size(); ++i) {
        const double target = y[static_cast<Eigen::Index>(i)];
        worst = std::max(worst, std::abs(predict(model, anchors[i]) - target) / std::max(std::abs(target), 1e-12));
    }
    return {worst < 1e-8, fmt("max relative error %.2e", worst)};
}

}  // namespace

int main() {
    log::set_level(log::Level::warn);
    const std::vector<Check> checks{
        {7, "property suites", 120.0, property_suites},
        {1, "OLS slope matches the closed form on a quadratic", 30.0, slope_criterion},
        {2, "minimal OLS error matches the residual formula", 60.0, residual_error_formula},
        {3, "LOO, influence and OLS agree on per-sample tasks", 600.0, linear_regime_agreement},
        {4, "linearized outcomes match retraining for logreg", 300.0, linearized_outcomes},
        {5, "kernel surrogate beats linear on interacting tasks", 1200.0, kernel_beats_linear},
        {6, "kernel ridge at lambda 0 interpolates", 1.0, exact_interpolation},
    };
    bool all = true;
    bool properties_ok = true;
    for (const auto& check : checks) {
        if (!properties_ok) {
            std::printf("C%d FAIL %s: skipped because criterion 7 failed\n", check.id, check.name.c_str());
            all = false;
            continue;
        }
        const auto start = std::chrono::steady_clock::now();
        Outcome r;
        try {
            r = check.body();
        } catch (const std::exception& e) {
            r = {false, std::string("exception: ") + e.what()};
        }
        const double seconds = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        const bool in_time = seconds < check.budget_seconds;
        const bool pass = r.pass && in_time;
        std::printf("C%d %s %s: %s; %.2f s (limit %.0f s)\n", check.id, pass ? "PASS" : "FAIL", check.name.c_str(),
                    r.detail.c_str(), seconds, check.budget_seconds);
        std::fflush(stdout);
        all = all && pass;
        if (check.id == 7) properties_ok = pass;
    }
    return all ? 0 : 1;
}
