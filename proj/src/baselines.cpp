#include "taskattr/baselines.hpp"

#include <cmath>
#include <limits>

#include "taskattr/errors.hpp"
#include "taskattr/log.hpp"
#include "taskattr/parallel.hpp"
#include "taskattr/rng.hpp"

namespace taskattr {

CgResult conjugate_gradient(const LinearOperator& apply, const Eigen::VectorXd& b, double tolerance,
                            std::size_t max_iterations) {
    CgResult out;
    out.x = Eigen::VectorXd::Zero(b.size());
    const double target = tolerance * b.norm();
    Eigen::VectorXd r = b;
    double rr = r.squaredNorm();
    if (std::sqrt(rr) <= target) {
        out.converged = true;
        out.residual_norm = std::sqrt(rr);
        return out;
    }
    Eigen::VectorXd p = r;
    for (out.iterations = 0; out.iterations < max_iterations; ++out.iterations) {
        const Eigen::VectorXd Ap = apply(p);
        const double curvature = p.dot(Ap);
        if (!(curvature > 0.0)) {
            log::warn("conjugate gradient: non-positive curvature; returning the current iterate");
            break;
        }
        const double alpha = rr / curvature;
        out.x += alpha * p;
        r -= alpha * Ap;
        const double rr_next = r.squaredNorm();
        if (std::sqrt(rr_next) <= target) {
            ++out.iterations;
            out.converged = true;
            rr = rr_next;
            break;
        }
        p = r + (rr_next / rr) * p;
        rr = rr_next;
    }
    out.residual_norm = std::sqrt(rr);
    return out;
}

InfluenceResult influence_scores(const ModelParams& params_star, const TaskBundle& bundle, const SubsetVector& s,
                                 const InfluenceOptions& options) {
    bundle.validate();
    if (s.size() != bundle.task_count()) throw ConfigError("influence: subset length does not match task count");
    if (s.empty_selection()) throw ConfigError("influence: subset selects no tasks");
    if (!(options.damping > 0.0)) throw ConfigError("influence: damping must be > 0");
    if (bundle.test.empty()) throw ConfigError("influence: bundle has no test samples");

    const auto d = params_star.size();
    const Eigen::VectorXd test_grad = data_loss_grad(params_star, make_batch(bundle.test)).grad;
    const auto batch = make_weighted_batch(bundle, s);
    const double shift = params_star.spec.l2_penalty + options.damping;
    const auto hessian = [&](const Eigen::VectorXd& v) -> Eigen::VectorXd {
        return data_hvp(params_star, batch, v) + shift * v;
    };
    const auto cg = conjugate_gradient(hessian, test_grad, options.tolerance,
                                       options.max_iterations == 0 ? 10 * d : options.max_iterations);
    InfluenceResult result;
    result.converged = cg.converged;
    result.iterations = cg.iterations;
    result.residual_norm = cg.residual_norm;
    if (!cg.converged)
        log::warn("influence: CG stopped after " + std::to_string(cg.iterations) +
                  " iterations (residual " + std::to_string(cg.residual_norm) + "); scores are partial");

    const double selected = static_cast<double>(s.count());
    result.scores = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bundle.task_count()));
    for (std::size_t k = 0; k < bundle.task_count(); ++k) {
        if (!s[k]) continue;
        const Eigen::VectorXd g = data_loss_grad(params_star, make_batch(bundle.tasks[k].samples)).grad;
        result.scores[static_cast<Eigen::Index>(k)] = -cg.x.dot(g) / selected;
    }
    return result;
}

Eigen::VectorXd tracin_scores(std::span<const Checkpoint> trail, const TaskBundle& bundle,
                              std::span<const Sample> test_set) {
    if (trail.empty()) throw ConfigError("tracin: checkpoint trail is empty");
    if (test_set.empty()) throw ConfigError("tracin: test set is empty");
    const auto test_batch = make_batch(test_set);
    std::vector<Batch> task_batches;
    for (const auto& t : bundle.tasks) task_batches.push_back(make_batch(t.samples));

    Eigen::VectorXd scores = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(bundle.task_count()));
    for (const auto& cp : trail) {
        if (!(cp.step_size > 0.0)) throw ConfigError("tracin: checkpoint step sizes must be positive");
        const Eigen::VectorXd g_test = data_loss_grad(cp.params, test_batch).grad;
        for (std::size_t k = 0; k < task_batches.size(); ++k)
            scores[static_cast<Eigen::Index>(k)] += cp.step_size * g_test.dot(data_loss_grad(cp.params, task_batches[k]).grad);
    }
    return scores;
}

TrakEnsemble build_trak_ensemble(const ModelSpec& spec, const TaskBundle& bundle, const TrainerConfig& trainer,
                                 std::size_t members, std::size_t projection_dim, std::uint64_t projection_seed,
                                 std::size_t jobs) {
    if (members == 0) throw ConfigError("trak: ensemble needs at least one member");
    const auto all = SubsetVector::all_ones(bundle.task_count());
    std::vector<ModelParams> models(members);
    parallel_for(members, jobs, [&](std::size_t i) {
        TrainerConfig t = trainer;
        t.seed = derive_seed(trainer.seed, i);
        models[i] = train(spec, bundle, all, t).params;
    });
    const auto d = spec.parameter_count();
    auto projection = projection_dim == 0 ? ProjectionMatrix::identity(d)
                                          : build_projection(d, projection_dim, projection_seed);
    return {std::move(models), std::move(projection), Eigen::VectorXd(), 1e-8};
}

namespace {

Eigen::VectorXd mean_projected_grad(const ModelParams& params, std::span<const Sample> samples,
                                    const ProjectionMatrix& projection) {
    Eigen::VectorXd total = Eigen::VectorXd::Zero(static_cast<Eigen::Index>(projection.rows()));
    for (const auto& sample : samples)
        total += projection.apply(data_loss_grad(params, make_batch(std::span<const Sample>(&sample, 1))).grad);
    return total / static_cast<double>(samples.size());
}

}  // namespace

Eigen::VectorXd trak_scores(const TrakEnsemble& ensemble, const TaskBundle& bundle, std::span<const Sample> test_set,
                            std::size_t jobs) {
    if (ensemble.models.empty()) throw ConfigError("trak: ensemble is empty");
    if (test_set.empty()) throw ConfigError("trak: test set is empty");
    const auto K = static_cast<Eigen::Index>(bundle.task_count());
    if (K < 1) throw ConfigError("trak: bundle has no tasks");
    Eigen::VectorXd q = ensemble.q_weights.size() == 0 ? Eigen::VectorXd::Ones(K) : ensemble.q_weights;
    if (q.size() != K) throw ConfigError("trak: q_weights length must equal the task count");
    if ((q.array() <= 0.0).any()) throw ConfigError("trak: q_weights must be positive");
    const auto& spec = ensemble.models.front().spec;
    for (const auto& m : ensemble.models)
        if (!(m.spec == spec)) throw ConfigError("trak: ensemble members must share a spec");
    if (ensemble.projection.cols() != spec.parameter_count())
        throw ConfigError("trak: projection width != parameter count");

    std::vector<Eigen::VectorXd> per_model(ensemble.models.size());
    parallel_for(ensemble.models.size(), jobs, [&](std::size_t i) {
        const auto& params = ensemble.models[i];
        Eigen::MatrixXd phi(K, static_cast<Eigen::Index>(ensemble.projection.rows()));
        for (Eigen::Index k = 0; k < K; ++k)
            phi.row(k) = mean_projected_grad(params, bundle.tasks[static_cast<std::size_t>(k)].samples,
                                             ensemble.projection).transpose();
        const Eigen::VectorXd phi_test = mean_projected_grad(params, test_set, ensemble.projection);
        Eigen::MatrixXd gram = phi * phi.transpose();
        const double scale = gram.trace() / static_cast<double>(K);
        if (!(scale > 0.0) || !std::isfinite(scale))
            throw RankDeficient("trak: task feature matrix is zero", {"phi"});
        gram.diagonal().array() += ensemble.relative_jitter * scale;
        const Eigen::LLT<Eigen::MatrixXd> llt(gram);
        if (llt.info() != Eigen::Success) throw RankDeficient("trak: Phi Phi^T is singular beyond jitter", {"phi"});
        // phi_test^T Phi^T (Phi Phi^T + eps I)^-1, then the diagonal Q.
        const Eigen::VectorXd row = llt.solve(phi * phi_test);
        per_model[i] = row.cwiseProduct(q);
    });
    Eigen::VectorXd mean = Eigen::VectorXd::Zero(K);
    for (const auto& v : per_model) mean += v;
    return mean / static_cast<double>(per_model.size());
}

TraceEstimate hutchinson_trace(const LinearOperator& apply, std::size_t dim, std::size_t probes, std::uint64_t seed) {
    if (probes == 0) throw ConfigError("hutchinson: probes must be >= 1");
    std::vector<double> samples(probes);
    for (std::size_t i = 0; i < probes; ++i) {
        Rng rng(derive_seed(seed, i));
        Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
        for (auto& x : v) x = rng.rademacher();
        samples[i] = v.dot(apply(v));
    }
    const Eigen::Map<const Eigen::ArrayXd> arr(samples.data(), static_cast<Eigen::Index>(probes));
    TraceEstimate out;
    out.estimate = arr.mean();
    if (probes < 2) {
        out.standard_error = std::numeric_limits<double>::infinity();
    } else {
        const double var = (arr - out.estimate).square().sum() / static_cast<double>(probes - 1);
        out.standard_error = std::sqrt(var / static_cast<double>(probes));
    }
    return out;
}

TraceEstimate hessian_trace(const ModelParams& params, const TaskBundle& bundle, const SubsetVector& s,
                            std::size_t probes, std::uint64_t seed) {
    if (s.empty_selection()) throw ConfigError("hessian_trace: subset selects no tasks");
    const auto batch = make_weighted_batch(bundle, s);
    const double l2 = params.spec.l2_penalty;
    return hutchinson_trace(
        [&](const Eigen::VectorXd& v) -> Eigen::VectorXd { return data_hvp(params, batch, v) + l2 * v; },
        params.size(), probes, seed);
}

double top_eigenvalue(const LinearOperator& apply, std::size_t dim, std::size_t iterations, std::uint64_t seed) {
    Rng rng(seed);
    Eigen::VectorXd v(static_cast<Eigen::Index>(dim));
    for (auto& x : v) x = rng.normal();
    v.normalize();
    double lambda = 0.0;
    for (std::size_t i = 0; i < iterations; ++i) {
        Eigen::VectorXd w = apply(v);
        lambda = v.dot(w);
        const double n = w.norm();
        if (n == 0.0) return 0.0;
        v = w / n;
    }
    return lambda;
}

}  // namespace taskattr
