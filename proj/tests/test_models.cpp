#include <doctest.h>

#include <cmath>

#include "fixtures.hpp"
#include "taskattr/baselines.hpp"
#include "taskattr/errors.hpp"
#include "taskattr/models.hpp"

using namespace taskattr;

namespace {

ModelSpec logreg_spec(std::size_t in, std::size_t classes, double l2 = 0.0) {
    return {ModelKind::logreg, in, 0, classes, l2};
}

ModelSpec mlp_spec(std::size_t in, std::size_t hidden, std::size_t classes, double l2 = 0.0) {
    return {ModelKind::mlp2, in, hidden, classes, l2};
}

// Two well separated blobs along the first axis.
TaskBundle separable() {
    TaskBundle b;
    b.class_count = 2;
    Rng rng(5);
    for (int k = 0; k < 2; ++k) {
        Task t{"T" + std::to_string(k), {}};
        for (int i = 0; i < 20; ++i) {
            const int label = i % 2;
            Eigen::VectorXd x(2);
            x << (label == 1 ? 2.0 : -2.0) + 0.3 * rng.normal(), 0.3 * rng.normal();
            t.samples.push_back({x, label});
        }
        b.tasks.push_back(t);
    }
    b.test = b.tasks[0].samples;
    return b;
}

}  // namespace

TEST_CASE("parameter counts") {
    CHECK(logreg_spec(4, 3).parameter_count() == 15);
    CHECK(mlp_spec(4, 5, 3).parameter_count() == 4 * 5 + 5 + 5 * 3 + 3);
    CHECK_THROWS_AS(logreg_spec(4, 1).validate(), ConfigError);
    CHECK_THROWS_AS(mlp_spec(4, 0, 3).validate(), ConfigError);
    CHECK_THROWS_AS((ModelSpec{ModelKind::logreg, 3, 0, 2, -1.0}).validate(), ConfigError);
}

TEST_CASE("initialization") {
    const auto spec = mlp_spec(6, 4, 3);
    const auto a = init_params(spec, 17);
    const auto b = init_params(spec, 17);
    CHECK(a.flat == b.flat);
    CHECK(a.flat != init_params(spec, 18).flat);
    CHECK(init_params(spec, 17, 0.0).flat.isZero(0.0));
    CHECK(init_params(logreg_spec(6, 3), 1, 1.0, true).flat.isZero(0.0));
    // Biases start at zero: logreg bias block is the tail.
    const auto lr = init_params(logreg_spec(6, 3), 2);
    CHECK(lr.flat.tail(3).isZero(0.0));
    CHECK_FALSE(lr.flat.head(18).isZero(0.0));
}

TEST_CASE("logits structure") {
    const Eigen::VectorXd x = fixtures::random_vector(4, 1);
    const auto spec = logreg_spec(4, 3);
    CHECK(logits(init_params(spec, 0, 0.0), x).isZero(0.0));

    const auto w1 = fixtures::random_params(spec, 2);
    const auto w2 = fixtures::random_params(spec, 3);
    const ModelParams mix{spec, 0.7 * w1.flat - 1.3 * w2.flat};
    CHECK((logits(mix, x) - (0.7 * logits(w1, x) - 1.3 * logits(w2, x))).norm() < 1e-12);

    const auto mspec = mlp_spec(4, 5, 3);
    auto m = fixtures::random_params(mspec, 4);
    m.flat.tail(5 * 3 + 3).setZero();
    CHECK(logits(m, x).isZero(0.0));
    CHECK(logits(m, fixtures::random_vector(4, 9, 10.0)).isZero(0.0));

    CHECK_THROWS_AS(logits(w1, Eigen::VectorXd::Zero(3)), ConfigError);
}

TEST_CASE("loss at zero parameters is log C") {
    const auto bundle = fixtures::gaussian(2, 10, 3, 4, 2);
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 0.5);
    const auto lg = loss_grad(init_params(spec, 0, 0.0), bundle.test);
    CHECK(lg.loss == doctest::Approx(std::log(4.0)).epsilon(1e-14));
}

TEST_CASE("loss gradient matches finite differences") {
    const auto bundle = fixtures::gaussian(1, 12, 5, 3, 4);
    const std::span<const Sample> samples = bundle.tasks[0].samples;
    for (const auto kind : {ModelKind::logreg, ModelKind::mlp2}) {
        const auto spec = spec_for(bundle, kind, 4, 0.05);
        const auto params = fixtures::random_params(spec, 7);
        const auto analytic = loss_grad(params, samples).grad;
        const auto numeric = fixtures::numeric_gradient(
            [&](const Eigen::VectorXd& w) { return loss_grad({spec, w}, samples).loss; }, params.flat, 1e-5);
        CHECK((analytic - numeric).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("penalty gradient is additive") {
    const auto bundle = fixtures::gaussian(1, 8, 3, 2, 5);
    auto spec = spec_for(bundle, ModelKind::mlp2, 3, 0.0);
    const auto params = fixtures::random_params(spec, 1);
    const auto plain = loss_grad(params, bundle.tasks[0].samples);
    spec.l2_penalty = 0.3;
    const ModelParams reg{spec, params.flat};
    const auto penalized = loss_grad(reg, bundle.tasks[0].samples);
    CHECK((penalized.grad - (plain.grad + 0.3 * params.flat)).norm() < 1e-12);
    CHECK(penalized.loss == doctest::Approx(plain.loss + 0.15 * params.flat.squaredNorm()));
}

TEST_CASE("logit gradients") {
    const auto spec = logreg_spec(3, 4);
    const auto params = fixtures::random_params(spec, 8);
    const Eigen::VectorXd x = fixtures::random_vector(3, 2);
    const auto grads = logit_grad(params, x);
    REQUIRE(grads.size() == 4);
    for (std::size_t c = 0; c < 4; ++c) {
        Eigen::VectorXd expected = Eigen::VectorXd::Zero(16);
        expected.segment(static_cast<Eigen::Index>(3 * c), 3) = x;
        expected[static_cast<Eigen::Index>(12 + c)] = 1.0;
        CHECK(grads[c] == expected);
    }
    const auto doubled = logit_grad(params, 2.0 * x);
    for (std::size_t c = 0; c < 4; ++c) {
        CHECK((doubled[c].head(12) - 2.0 * grads[c].head(12)).norm() == 0.0);
        CHECK(doubled[c].tail(4) == grads[c].tail(4));
    }

    const auto mspec = mlp_spec(3, 4, 3);
    const auto m = fixtures::random_params(mspec, 9);
    const auto jac = logit_jacobian(m, x);
    for (Eigen::Index c = 0; c < 3; ++c) {
        const auto numeric = fixtures::numeric_gradient(
            [&](const Eigen::VectorXd& w) { return logits({mspec, w}, x)[c]; }, m.flat, 1e-5);
        CHECK((jac.row(c).transpose() - numeric).cwiseAbs().maxCoeff() < 1e-6);
    }
}

TEST_CASE("hessian-vector products") {
    const auto bundle = fixtures::gaussian(1, 10, 4, 3, 6);
    const std::span<const Sample> samples = bundle.tasks[0].samples;
    for (const auto kind : {ModelKind::logreg, ModelKind::mlp2}) {
        const auto spec = spec_for(bundle, kind, 5, 0.02);
        const auto params = fixtures::random_params(spec, 3);
        const auto d = static_cast<Eigen::Index>(spec.parameter_count());
        CHECK(hvp(params, samples, Eigen::VectorXd::Zero(d)).isZero(0.0));

        const Eigen::VectorXd u = fixtures::random_vector(d, 11);
        const Eigen::VectorXd v = fixtures::random_vector(d, 12);
        CHECK(std::abs(v.dot(hvp(params, samples, u)) - u.dot(hvp(params, samples, v))) < 1e-10);

        const double h = 1e-4;
        const Eigen::VectorXd fd = (loss_grad({spec, params.flat + h * v}, samples).grad -
                                    loss_grad({spec, params.flat - h * v}, samples).grad) /
                                   (2.0 * h);
        CHECK((hvp(params, samples, v) - fd).cwiseAbs().maxCoeff() < 1e-5);
    }
}

TEST_CASE("gradients and HVPs agree with finite differences on 100 random instances") {
    int worst_grad = 0;
    int worst_hvp = 0;
    for (std::uint64_t trial = 0; trial < 100; ++trial) {
        Rng rng(derive_seed(77, trial));
        const auto kind = trial % 2 == 0 ? ModelKind::logreg : ModelKind::mlp2;
        const auto bundle = fixtures::gaussian(1, 3 + rng.below(5), 2 + rng.below(3),
                                               2 + static_cast<int>(rng.below(3)), trial);
        const auto spec = spec_for(bundle, kind, 2 + rng.below(3), 0.01 * rng.uniform());
        const auto params = fixtures::random_params(spec, trial + 1000);
        const std::span<const Sample> samples = bundle.tasks[0].samples;
        const auto g = loss_grad(params, samples).grad;
        const auto ng = fixtures::numeric_gradient(
            [&](const Eigen::VectorXd& w) { return loss_grad({spec, w}, samples).loss; }, params.flat, 1e-5);
        if ((g - ng).norm() > 1e-5 * std::max(1.0, g.norm())) ++worst_grad;

        const Eigen::VectorXd v = fixtures::random_vector(params.flat.size(), trial + 5000);
        const Eigen::VectorXd hv = hvp(params, samples, v);
        const Eigen::VectorXd fd = (loss_grad({spec, params.flat + 1e-4 * v}, samples).grad -
                                    loss_grad({spec, params.flat - 1e-4 * v}, samples).grad) /
                                   2e-4;
        if ((hv - fd).norm() > 1e-5 * std::max(1.0, hv.norm())) ++worst_hvp;
    }
    CHECK(worst_grad == 0);
    CHECK(worst_hvp == 0);
}

TEST_CASE("weighted batch matches task normalization") {
    const auto bundle = fixtures::gaussian(3, 5, 2, 2, 1);
    const auto batch = make_weighted_batch(bundle, SubsetVector::parse("101"));
    CHECK(batch.size() == 10);
    CHECK(batch.weights.sum() == doctest::Approx(1.0));
    CHECK(batch.weights[0] == doctest::Approx(0.1));
}

TEST_CASE("training converges on a separable problem") {
    const auto bundle = separable();
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 1e-2);
    TrainerConfig t;
    t.step_size = 0.5;
    t.iterations = 3000;
    const auto r = train(spec, bundle, SubsetVector::all_ones(2), t);
    CHECK(r.final_grad_norm < 1e-4);
    CHECK(r.final_loss < 0.2);
}

TEST_CASE("training on e_k equals training on task k alone") {
    const auto bundle = fixtures::gaussian(3, 9, 3, 3, 8);
    TaskBundle alone = bundle;
    alone.tasks = {bundle.tasks[1]};
    const auto spec = spec_for(bundle, ModelKind::mlp2, 4, 1e-3);
    TrainerConfig t;
    t.iterations = 50;
    const auto a = train(spec, bundle, SubsetVector::unit(3, 1), t);
    const auto b = train(spec, alone, SubsetVector::all_ones(1), t);
    CHECK((a.params.flat - b.params.flat).cwiseAbs().maxCoeff() < 1e-12);
}

TEST_CASE("training is deterministic and records a trail") {
    const auto bundle = fixtures::gaussian(2, 10, 3, 2, 9);
    const auto spec = spec_for(bundle, ModelKind::mlp2, 3, 1e-3);
    TrainerConfig t;
    t.iterations = 40;
    const auto a = train(spec, bundle, SubsetVector::all_ones(2), t, true);
    const auto b = train(spec, bundle, SubsetVector::all_ones(2), t, true);
    CHECK(a.params.flat == b.params.flat);
    // Default interval is max(1, 40 / 20) = 2 steps.
    CHECK(a.trail.size() == 20);
    for (const auto& cp : a.trail) CHECK(cp.step_size == t.step_size);
}

TEST_CASE("divergence raises with the iteration index") {
    const auto bundle = fixtures::gaussian(2, 10, 3, 2, 10);
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 1.0);
    TrainerConfig t;
    t.step_size = 1e300;
    t.iterations = 100;
    try {
        train(spec, bundle, SubsetVector::all_ones(2), t);
        FAIL("expected divergence");
    } catch (const TrainingDiverged& e) {
        CHECK(e.iteration() < 100);
    }
    CHECK_THROWS_AS(train(spec, bundle, SubsetVector::zeros(2), TrainerConfig{}), ConfigError);
}

TEST_CASE("training loss is non-increasing below 1/L") {
    const auto bundle = fixtures::gaussian(3, 15, 4, 3, 12, 0.3);
    const auto spec = spec_for(bundle, ModelKind::logreg, 0, 1e-2);
    const auto all = SubsetVector::all_ones(3);
    // Softmax curvature is bounded by the curvature at the origin up to a
    // factor of two, so 1 / (2 L0) is below 1 / L everywhere.
    const auto origin = init_params(spec, 0, 0.0);
    const double l0 = top_eigenvalue(
        [&](const Eigen::VectorXd& v) { return objective_hvp(origin, bundle, all, v); }, spec.parameter_count(), 300, 1);
    TrainerConfig t;
    t.step_size = 1.0 / (2.0 * l0);
    t.iterations = 1;
    auto params = init_params(spec, 4);
    double previous = objective_grad(params, bundle, all).loss;
    for (int i = 0; i < 200; ++i) {
        params = train_from(params, bundle, all, t).params;
        const double loss = objective_grad(params, bundle, all).loss;
        CHECK(loss <= previous + 1e-15);
        previous = loss;
    }
}

TEST_CASE("metrics") {
    const auto bundle = fixtures::gaussian(1, 4, 3, 4, 13, 0.0, 4000);
    const auto zero = init_params(spec_for(bundle, ModelKind::logreg, 0, 0.0), 0, 0.0);
    // Uniform logits predict class 0 everywhere: chance accuracy.
    CHECK(evaluate_metric(zero, bundle.test, Metric::mean_test_accuracy) == doctest::Approx(0.25).epsilon(0.1));
    CHECK(evaluate_metric(zero, bundle.test, Metric::mean_test_loss) == doctest::Approx(std::log(4.0)));
    CHECK(parse_metric("mean_test_accuracy") == Metric::mean_test_accuracy);
    CHECK_THROWS_AS(parse_metric("f1"), ConfigError);
}
