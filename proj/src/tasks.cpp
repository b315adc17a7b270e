#include "taskattr/tasks.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "taskattr/errors.hpp"
#include "taskattr/log.hpp"
#include "taskattr/rng.hpp"

namespace taskattr {

SubsetVector::SubsetVector(std::vector<std::uint8_t> bits) : bits_(std::move(bits)) {
    for (auto& b : bits_) {
        if (b > 1) throw ConfigError("subset bits must be 0 or 1");
    }
}

SubsetVector SubsetVector::all_ones(std::size_t task_count) {
    return SubsetVector(std::vector<std::uint8_t>(task_count, 1));
}

SubsetVector SubsetVector::zeros(std::size_t task_count) {
    return SubsetVector(std::vector<std::uint8_t>(task_count, 0));
}

SubsetVector SubsetVector::unit(std::size_t task_count, std::size_t k) {
    auto s = zeros(task_count);
    s.set(k, true);
    return s;
}

SubsetVector SubsetVector::without(std::size_t task_count, std::size_t k) {
    auto s = all_ones(task_count);
    s.set(k, false);
    return s;
}

SubsetVector SubsetVector::parse(std::string_view text) {
    std::vector<std::uint8_t> bits;
    bits.reserve(text.size());
    for (char c : text) {
        if (c != '0' && c != '1') throw ConfigError("subset string must contain only '0'/'1'");
        bits.push_back(c == '1' ? 1 : 0);
    }
    return SubsetVector(std::move(bits));
}

std::size_t SubsetVector::count() const noexcept {
    return static_cast<std::size_t>(std::count(bits_.begin(), bits_.end(), std::uint8_t{1}));
}

std::size_t SubsetVector::hamming(const SubsetVector& other) const {
    if (other.size() != size()) throw ConfigError("subset length mismatch");
    std::size_t d = 0;
    for (std::size_t i = 0; i < bits_.size(); ++i) d += bits_[i] != other.bits_[i];
    return d;
}

std::size_t SubsetVector::dot(const SubsetVector& other) const {
    if (other.size() != size()) throw ConfigError("subset length mismatch");
    std::size_t d = 0;
    for (std::size_t i = 0; i < bits_.size(); ++i) d += bits_[i] & other.bits_[i];
    return d;
}

std::string SubsetVector::to_string() const {
    std::string out(bits_.size(), '0');
    for (std::size_t i = 0; i < bits_.size(); ++i) {
        if (bits_[i]) out[i] = '1';
    }
    return out;
}

Eigen::VectorXd SubsetVector::to_vector() const {
    Eigen::VectorXd v(static_cast<Eigen::Index>(bits_.size()));
    for (std::size_t i = 0; i < bits_.size(); ++i) v[static_cast<Eigen::Index>(i)] = bits_[i];
    return v;
}

std::string_view to_string(Metric metric) {
    switch (metric) {
        case Metric::mean_test_loss: return "mean_test_loss";
        case Metric::mean_test_accuracy: return "mean_test_accuracy";
    }
    return "mean_test_loss";
}

Metric parse_metric(std::string_view text) {
    if (text == "mean_test_loss") return Metric::mean_test_loss;
    if (text == "mean_test_accuracy") return Metric::mean_test_accuracy;
    throw ConfigError("unknown metric: " + std::string(text));
}

std::size_t TaskBundle::feature_dim() const {
    for (const auto& task : tasks) {
        if (!task.samples.empty()) return static_cast<std::size_t>(task.samples.front().features.size());
    }
    if (!test.empty()) return static_cast<std::size_t>(test.front().features.size());
    return 0;
}

std::size_t TaskBundle::total_train_samples() const noexcept {
    std::size_t n = 0;
    for (const auto& task : tasks) n += task.samples.size();
    return n;
}

void TaskBundle::validate() const {
    if (tasks.empty()) throw ConfigError("bundle has no tasks");
    if (class_count < 2) throw ConfigError("bundle needs at least 2 classes");
    const auto dim = static_cast<Eigen::Index>(feature_dim());
    if (dim == 0) throw ConfigError("bundle has zero-dimensional features");
    auto check = [&](const Sample& sample, const std::string& where) {
        if (sample.features.size() != dim) throw ConfigError("feature dimension mismatch in " + where);
        if (sample.label < 0 || sample.label >= class_count)
            throw ConfigError("label out of range in " + where);
        if (!sample.features.allFinite()) throw ConfigError("non-finite feature in " + where);
    };
    for (const auto& task : tasks) {
        if (task.samples.empty()) throw ConfigError("task '" + task.name + "' is empty");
        for (const auto& sample : task.samples) check(sample, "task '" + task.name + "'");
    }
    for (const auto& sample : test) check(sample, "test set");
}

TaskBundle TaskBundle::permuted(std::span<const std::size_t> order) const {
    if (order.size() != tasks.size()) throw ConfigError("permutation length mismatch");
    TaskBundle out;
    out.test = test;
    out.metric = metric;
    out.class_count = class_count;
    out.tasks.reserve(tasks.size());
    for (auto idx : order) out.tasks.push_back(tasks.at(idx));
    return out;
}

void SamplingConfig::validate(std::size_t task_count) const {
    if (m < 1) throw ConfigError("sampling: m must be >= 1");
    if (mode == Mode::bernoulli) {
        if (!(p > 0.0 && p < 1.0)) throw ConfigError("sampling: bernoulli p must lie in (0, 1)");
    } else {
        if (size < 1 || size > task_count)
            throw ConfigError("sampling: fixed_size c must satisfy 1 <= c <= K (c = " +
                              std::to_string(size) + ", K = " + std::to_string(task_count) + ")");
    }
}

std::vector<SubsetVector> sample_subsets(const SamplingConfig& config, std::size_t task_count) {
    if (task_count < 2) throw ConfigError("sampling needs K >= 2 tasks");
    config.validate(task_count);

    std::vector<SubsetVector> out;
    out.reserve(config.m);
    std::size_t rejections = 0;
    std::vector<std::size_t> index(task_count);
    for (std::size_t i = 0; i < config.m; ++i) {
        Rng rng(derive_seed(config.seed, i));
        std::vector<std::uint8_t> bits(task_count, 0);
        if (config.mode == SamplingConfig::Mode::bernoulli) {
            for (;;) {
                std::size_t on = 0;
                for (auto& b : bits) {
                    b = rng.bernoulli(config.p) ? 1 : 0;
                    on += b;
                }
                if (on > 0) break;
                ++rejections;
            }
        } else {
            // Partial Fisher-Yates: the first c entries are a uniform c-subset.
            std::iota(index.begin(), index.end(), std::size_t{0});
            for (std::size_t j = 0; j < config.size; ++j) {
                const auto pick = j + static_cast<std::size_t>(rng.below(task_count - j));
                std::swap(index[j], index[pick]);
                bits[index[j]] = 1;
            }
        }
        out.emplace_back(std::move(bits));
    }
    if (rejections > 0) {
        log::info("sample_subsets: rejected " + std::to_string(rejections) + " all-zero draws");
    }
    return out;
}

double weighted_loss(std::span<const double> task_losses, const SubsetVector& s) {
    if (task_losses.size() != s.size()) throw ConfigError("weighted_loss: length mismatch");
    const auto selected = s.count();
    if (selected == 0) throw ConfigError("weighted_loss: subset selects no tasks");
    double total = 0.0;
    for (std::size_t k = 0; k < s.size(); ++k) {
        if (s[k]) total += task_losses[k];
    }
    return total / static_cast<double>(selected);
}

std::string_view to_string(ModularOp op) {
    return op == ModularOp::addition ? "addition" : "quadratic";
}

ModularOp parse_modular_op(std::string_view text) {
    if (text == "addition") return ModularOp::addition;
    if (text == "quadratic") return ModularOp::quadratic;
    throw ConfigError("unknown modular op: " + std::string(text));
}

bool is_prime(int n) {
    if (n < 2) return false;
    for (int d = 2; d * d <= n; ++d) {
        if (n % d == 0) return false;
    }
    return true;
}

TaskBundle make_modular_bundle(int prime, ModularOp op, int groups, double train_fraction,
                               std::uint64_t seed) {
    if (!is_prime(prime)) throw ConfigError("modular generator: p must be prime");
    if (groups < 1 || groups > prime) throw ConfigError("modular generator: need 1 <= g <= p");
    if (!(train_fraction > 0.0 && train_fraction < 1.0))
        throw ConfigError("modular generator: train_fraction must lie in (0, 1)");
    const int stride = (prime + groups - 1) / groups;
    if (stride * (groups - 1) >= prime)
        throw ConfigError("modular generator: g = " + std::to_string(groups) +
                          " leaves an empty group for p = " + std::to_string(prime));

    const int dim = 2 * prime + 2;
    const int op_slot = 2 * prime + (op == ModularOp::addition ? 0 : 1);
    struct Equation {
        int a, b, c;
    };
    std::vector<Equation> equations;
    equations.reserve(static_cast<std::size_t>(prime) * prime);
    for (int a = 0; a < prime; ++a) {
        for (int b = 0; b < prime; ++b) {
            const long long value = op == ModularOp::addition
                                        ? static_cast<long long>(a) + b
                                        : static_cast<long long>(a) * a + static_cast<long long>(a) * b +
                                              static_cast<long long>(b) * b;
            equations.push_back({a, b, static_cast<int>(value % prime)});
        }
    }

    Rng rng(derive_seed(seed, 0));
    for (std::size_t i = equations.size(); i > 1; --i) {
        std::swap(equations[i - 1], equations[static_cast<std::size_t>(rng.below(i))]);
    }
    const auto train_count = static_cast<std::size_t>(std::llround(train_fraction * equations.size()));

    TaskBundle bundle;
    bundle.class_count = prime;
    bundle.metric = Metric::mean_test_loss;
    bundle.tasks.resize(static_cast<std::size_t>(groups) * groups);
    for (int i = 0; i < groups; ++i) {
        for (int j = 0; j < groups; ++j) {
            bundle.tasks[static_cast<std::size_t>(i * groups + j)].name =
                "G" + std::to_string(i) + "_" + std::to_string(j);
        }
    }
    auto encode = [&](const Equation& e) {
        Sample sample;
        sample.features = Eigen::VectorXd::Zero(dim);
        sample.features[e.a] = 1.0;
        sample.features[prime + e.b] = 1.0;
        sample.features[op_slot] = 1.0;
        sample.label = e.c;
        return sample;
    };
    // Emit train samples in (a, b) order within each group so the bundle does
    // not depend on the shuffle beyond the split itself.
    std::vector<Equation> train(equations.begin(), equations.begin() + static_cast<long>(train_count));
    std::vector<Equation> test(equations.begin() + static_cast<long>(train_count), equations.end());
    auto by_ab = [](const Equation& x, const Equation& y) { return x.a != y.a ? x.a < y.a : x.b < y.b; };
    std::sort(train.begin(), train.end(), by_ab);
    std::sort(test.begin(), test.end(), by_ab);
    for (const auto& e : train) {
        const int gi = e.a / stride;
        const int gj = e.b / stride;
        bundle.tasks[static_cast<std::size_t>(gi * groups + gj)].samples.push_back(encode(e));
    }
    for (const auto& e : test) bundle.test.push_back(encode(e));
    for (const auto& task : bundle.tasks) {
        if (task.samples.empty())
            throw ConfigError("modular generator: task " + task.name + " received no training samples");
    }
    return bundle;
}

TaskBundle make_gaussian_bundle(const GaussianBundleConfig& config) {
    if (config.task_count < 1 || config.samples_per_task < 1 || config.feature_dim < 1 ||
        config.class_count < 2)
        throw ConfigError("gaussian generator: counts must be positive and classes >= 2");
    if (config.label_noise < 0.0 || config.label_noise > 1.0)
        throw ConfigError("gaussian generator: label_noise must lie in [0, 1]");

    if (config.intrinsic_dim > config.feature_dim)
        throw ConfigError("gaussian generator: intrinsic_dim must not exceed feature_dim");

    const auto ambient = static_cast<Eigen::Index>(config.feature_dim);
    const auto dim = static_cast<Eigen::Index>(config.intrinsic_dim == 0 ? config.feature_dim : config.intrinsic_dim);
    Rng rng(derive_seed(config.seed, 0));
    // Orthonormal embedding of the latent space; skipped at full rank.
    Eigen::MatrixXd basis;
    if (dim < ambient) {
        Eigen::MatrixXd gauss(ambient, dim);
        for (Eigen::Index j = 0; j < dim; ++j)
            for (Eigen::Index i = 0; i < ambient; ++i) gauss(i, j) = rng.normal();
        basis = Eigen::HouseholderQR<Eigen::MatrixXd>(gauss).householderQ() * Eigen::MatrixXd::Identity(ambient, dim);
    }
    std::vector<Eigen::VectorXd> means;
    for (int c = 0; c < config.class_count; ++c) {
        Eigen::VectorXd mu(dim);
        for (Eigen::Index i = 0; i < dim; ++i) mu[i] = rng.normal();
        mu *= config.separation / std::max(mu.norm(), 1e-12);
        means.push_back(std::move(mu));
    }
    auto draw = [&](Rng& r) {
        Sample sample;
        const int c = static_cast<int>(r.below(static_cast<std::uint64_t>(config.class_count)));
        sample.features = means[static_cast<std::size_t>(c)];
        for (Eigen::Index i = 0; i < dim; ++i) sample.features[i] += r.normal();
        if (basis.size() > 0) sample.features = basis * sample.features;
        sample.label = c;
        if (r.uniform() < config.label_noise) {
            sample.label = static_cast<int>(r.below(static_cast<std::uint64_t>(config.class_count)));
        }
        return sample;
    };

    TaskBundle bundle;
    bundle.class_count = config.class_count;
    bundle.metric = Metric::mean_test_loss;
    for (std::size_t k = 0; k < config.task_count; ++k) {
        Rng task_rng(derive_seed(config.seed, 1 + k));
        Task task;
        task.name = "T" + std::to_string(k);
        for (std::size_t j = 0; j < config.samples_per_task; ++j) task.samples.push_back(draw(task_rng));
        bundle.tasks.push_back(std::move(task));
    }
    Rng test_rng(derive_seed(config.seed, 1 + config.task_count));
    for (std::size_t j = 0; j < config.test_samples; ++j) bundle.test.push_back(draw(test_rng));
    return bundle;
}

}  // namespace taskattr
