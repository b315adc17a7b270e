#pragma once

#include <cstddef>
#include <filesystem>
#include <mutex>
#include <optional>
#include <string>
#include <unordered_map>
#include <vector>

#include <Eigen/Dense>

#include "taskattr/models.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

enum class Provenance { retrained, gradex };

std::string_view to_string(Provenance provenance);
Provenance parse_provenance(std::string_view text);

struct SurrogateEntry {
    SubsetVector s;
    double outcome = 0.0;
    Provenance provenance = Provenance::retrained;
};

/// Regression data (s, F(s)) for surrogate fitting.
struct SurrogateDataset {
    std::size_t task_count = 0;
    Metric metric = Metric::mean_test_loss;
    std::vector<SurrogateEntry> entries;

    std::size_t size() const noexcept { return entries.size(); }
    Eigen::VectorXd outcomes() const;
    std::vector<SubsetVector> subsets() const;
    /// Entries [begin, end) as a new dataset.
    SurrogateDataset slice(std::size_t begin, std::size_t end) const;

    /// Throws ConfigError on length mismatches or non-finite outcomes.
    void validate() const;
};

struct LooReport {
    double full_outcome = 0.0;
    /// F(all-ones - e_k) for every k.
    std::vector<double> without;
    /// full_outcome - without[k].
    Eigen::VectorXd scores;
};

/// Ground-truth F(s) by retraining, with a content-addressed result cache.
///
/// The in-memory cache is always on. With a cache directory, every
/// evaluation also lands in <dir>/<key>.json (written to a temp file and
/// renamed) and a line is appended to <dir>/index.tsv. Safe to call from
/// many threads.
class Oracle {
public:
    Oracle(TaskBundle bundle, ModelSpec spec, TrainerConfig trainer,
           std::optional<std::filesystem::path> cache_dir = std::nullopt);

    Oracle(const Oracle&) = delete;
    Oracle& operator=(const Oracle&) = delete;

    const TaskBundle& bundle() const noexcept { return bundle_; }
    const ModelSpec& spec() const noexcept { return spec_; }
    const TrainerConfig& trainer() const noexcept { return trainer_; }
    const std::string& bundle_hash() const noexcept { return bundle_hash_; }

    /// Cache key for s: hash of (bundle JSON, spec, trainer, bitstring).
    std::string cache_key(const SubsetVector& s) const;

    /// Trains on s and returns the bundle metric on the test set.
    double evaluate(const SubsetVector& s);
    std::vector<double> evaluate_many(const std::vector<SubsetVector>& subsets, std::size_t jobs);

    /// Trained parameters for s (not cached).
    TrainResult train_on(const SubsetVector& s, bool keep_trail = false) const;

    std::size_t cache_hits() const;
    std::size_t trainings() const;

private:
    std::optional<double> lookup(const std::string& key);
    void store(const std::string& key, const SubsetVector& s, double value);

    TaskBundle bundle_;
    ModelSpec spec_;
    TrainerConfig trainer_;
    std::optional<std::filesystem::path> cache_dir_;
    std::string bundle_hash_;
    std::string config_fingerprint_;

    mutable std::mutex mutex_;
    std::unordered_map<std::string, double> memory_;
    std::size_t hits_ = 0;
    std::size_t trainings_ = 0;
};

/// K + 1 retrainings: F(all-ones) and F(all-ones - e_k).
LooReport loo_scores(Oracle& oracle, std::size_t jobs = 1);

/// How outcomes are produced for a surrogate dataset.
struct OutcomeSource {
    enum class Kind { retrain, gradex };
    Kind kind = Kind::retrain;
    /// Required for gradex: projection and regression settings.
    std::size_t projection_dim = 0;  ///< 0 means identity projection
    std::uint64_t projection_seed = 0;
    std::optional<double> reg_lambda;  ///< defaults to the model's l2_penalty
    /// Expansion point W0 for gradex; defaults to the trainer's initialization.
    std::optional<ModelParams> anchor;
};

/// m subsets from `sampling`, each with an outcome from `source`.
SurrogateDataset build_surrogate_dataset(Oracle& oracle, const SamplingConfig& sampling,
                                         const OutcomeSource& source, std::size_t jobs = 1);

/// Outcomes for explicit subsets.
SurrogateDataset build_surrogate_dataset(Oracle& oracle, const std::vector<SubsetVector>& subsets,
                                         const OutcomeSource& source, std::size_t jobs = 1);

}  // namespace taskattr
