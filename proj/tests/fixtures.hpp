#pragma once

#include <cmath>
#include <cstdint>
#include <functional>
#include <vector>

#include <Eigen/Dense>

#include "taskattr/models.hpp"
#include "taskattr/rng.hpp"
#include "taskattr/tasks.hpp"

namespace fixtures {

using namespace taskattr;

inline TaskBundle gaussian(std::size_t tasks, std::size_t per_task, std::size_t dim, int classes, std::uint64_t seed,
                           double noise = 0.1, std::size_t test = 60) {
    GaussianBundleConfig g;
    g.task_count = tasks;
    g.samples_per_task = per_task;
    g.test_samples = test;
    g.feature_dim = dim;
    g.class_count = classes;
    g.separation = 2.0;
    g.label_noise = noise;
    g.seed = seed;
    return make_gaussian_bundle(g);
}

inline Eigen::VectorXd random_vector(Eigen::Index n, std::uint64_t seed, double scale = 1.0) {
    Rng rng(seed);
    Eigen::VectorXd v(n);
    for (auto& x : v) x = scale * rng.normal();
    return v;
}

inline ModelParams random_params(const ModelSpec& spec, std::uint64_t seed, double scale = 0.5) {
    return {spec, random_vector(static_cast<Eigen::Index>(spec.parameter_count()), seed, scale)};
}

/// Central-difference gradient of a scalar function.
inline Eigen::VectorXd numeric_gradient(const std::function<double(const Eigen::VectorXd&)>& f,
                                        const Eigen::VectorXd& x, double h) {
    Eigen::VectorXd g(x.size());
    Eigen::VectorXd probe = x;
    for (Eigen::Index i = 0; i < x.size(); ++i) {
        probe[i] = x[i] + h;
        const double up = f(probe);
        probe[i] = x[i] - h;
        const double down = f(probe);
        probe[i] = x[i];
        g[i] = (up - down) / (2.0 * h);
    }
    return g;
}

/// Two tasks of the same data: task 1 copies task 0.
inline TaskBundle with_duplicate(TaskBundle bundle, std::size_t source) {
    Task copy = bundle.tasks[source];
    copy.name += "_copy";
    bundle.tasks.push_back(std::move(copy));
    return bundle;
}

inline std::vector<std::size_t> reversed_order(std::size_t n) {
    std::vector<std::size_t> order(n);
    for (std::size_t i = 0; i < n; ++i) order[i] = n - 1 - i;
    return order;
}

}  // namespace fixtures
