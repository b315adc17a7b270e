#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include <Eigen/Dense>

namespace taskattr {

/// Binary inclusion mask over K tasks. Index 0 is task 0.
///
/// The all-zero mask is representable (surrogate prediction is defined there)
/// but every operation that trains or evaluates a loss rejects it.
class SubsetVector {
public:
    SubsetVector() = default;
    explicit SubsetVector(std::vector<std::uint8_t> bits);

    static SubsetVector all_ones(std::size_t task_count);
    static SubsetVector zeros(std::size_t task_count);
    /// e_k: only task k selected.
    static SubsetVector unit(std::size_t task_count, std::size_t k);
    /// all-ones minus e_k.
    static SubsetVector without(std::size_t task_count, std::size_t k);
    /// Parses a '0'/'1' string.
    static SubsetVector parse(std::string_view text);

    std::size_t size() const noexcept { return bits_.size(); }
    bool operator[](std::size_t k) const { return bits_[k] != 0; }
    void set(std::size_t k, bool on) { bits_.at(k) = on ? 1 : 0; }

    std::size_t count() const noexcept;
    bool empty_selection() const noexcept { return count() == 0; }
    std::size_t hamming(const SubsetVector& other) const;
    std::size_t dot(const SubsetVector& other) const;

    std::string to_string() const;
    Eigen::VectorXd to_vector() const;
    const std::vector<std::uint8_t>& bits() const noexcept { return bits_; }

    friend bool operator==(const SubsetVector&, const SubsetVector&) = default;
    friend auto operator<=>(const SubsetVector&, const SubsetVector&) = default;

private:
    std::vector<std::uint8_t> bits_;
};

struct Sample {
    Eigen::VectorXd features;
    int label = 0;
};

struct Task {
    std::string name;
    std::vector<Sample> samples;
};

enum class Metric { mean_test_loss, mean_test_accuracy };

std::string_view to_string(Metric metric);
Metric parse_metric(std::string_view text);

/// K named training tasks plus a held-out test set.
struct TaskBundle {
    std::vector<Task> tasks;
    std::vector<Sample> test;
    Metric metric = Metric::mean_test_loss;
    int class_count = 0;

    std::size_t task_count() const noexcept { return tasks.size(); }
    std::size_t feature_dim() const;
    /// n in the weighted-loss notation: training samples summed over tasks.
    std::size_t total_train_samples() const noexcept;

    /// Throws ConfigError when tasks are empty, dimensions disagree or a
    /// label is out of range. Does not require K >= 2; callers that need it
    /// check it themselves.
    void validate() const;

    /// Bundle with tasks reordered: result.tasks[i] = tasks[order[i]].
    TaskBundle permuted(std::span<const std::size_t> order) const;
};

struct SamplingConfig {
    enum class Mode { bernoulli, fixed_size };

    Mode mode = Mode::bernoulli;
    double p = 0.5;          ///< inclusion probability (bernoulli)
    std::size_t size = 1;    ///< tasks per subset (fixed_size)
    std::size_t m = 1;       ///< number of subsets
    std::uint64_t seed = 0;

    static SamplingConfig bernoulli(double p, std::size_t m, std::uint64_t seed) {
        return {Mode::bernoulli, p, 1, m, seed};
    }
    static SamplingConfig fixed_size(std::size_t size, std::size_t m, std::uint64_t seed) {
        return {Mode::fixed_size, 0.5, size, m, seed};
    }

    void validate(std::size_t task_count) const;
};

/// Draws config.m subsets. Subset i is generated from derive_seed(seed, i),
/// all-zero Bernoulli draws are redrawn and fixed_size draws are uniform
/// size-c subsets.
std::vector<SubsetVector> sample_subsets(const SamplingConfig& config, std::size_t task_count);

/// (sum_j s_j)^-1 * sum_k s_k * task_losses[k].
double weighted_loss(std::span<const double> task_losses, const SubsetVector& s);

enum class ModularOp { addition, quadratic };

std::string_view to_string(ModularOp op);
ModularOp parse_modular_op(std::string_view text);

/// Grouped modular-arithmetic dataset: every (a, b) in [0, p)^2 with label
/// a + b or a^2 + ab + b^2 (mod p). Features are one-hot a | one-hot b |
/// operator slot, so the dimension is 2p + 2. Equation (a, b) belongs to
/// group (a / stride, b / stride) with stride = ceil(p / groups), giving
/// groups^2 tasks.
TaskBundle make_modular_bundle(int prime, ModularOp op, int groups, double train_fraction,
                               std::uint64_t seed);

/// Synthetic Gaussian-cluster classification data split into tasks of
/// near-equal size. Class c has a random mean of norm `separation`; samples
/// get unit isotropic noise and a `label_noise` fraction of random labels.
struct GaussianBundleConfig {
    std::size_t task_count = 4;
    std::size_t samples_per_task = 20;
    std::size_t test_samples = 100;
    std::size_t feature_dim = 10;
    int class_count = 2;
    double separation = 2.0;
    double label_noise = 0.0;
    /// Latent dimension embedded isometrically into feature_dim; 0 means full rank.
    std::size_t intrinsic_dim = 0;
    std::uint64_t seed = 0;
};

TaskBundle make_gaussian_bundle(const GaussianBundleConfig& config);

bool is_prime(int n);

}  // namespace taskattr
