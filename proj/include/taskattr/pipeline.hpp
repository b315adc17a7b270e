#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskattr/analysis.hpp"
#include "taskattr/models.hpp"
#include "taskattr/oracle.hpp"
#include "taskattr/surrogate.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

struct SurrogateChoice {
    enum class Kind { linear, kernel };
    Kind kind = Kind::kernel;
    KernelSpec spec;
    /// nullopt selects (spec, lambda) by cross-validation.
    std::optional<double> lambda = kDefaultKrrLambda;
    std::vector<KernelSpec> cv_specs;
    std::vector<double> cv_lambdas;
    std::size_t cv_folds = 5;
};

/// Parsed configuration document. Component seeds that the document leaves
/// out are derived from `seed`, so a --seed override moves all of them.
struct PipelineConfig {
    nlohmann::json document;
    std::string config_hash;
    std::uint64_t seed = 0;

    nlohmann::json bundle;  ///< {"generator": ..., params} or {"path": ...}
    ModelKind model_kind = ModelKind::logreg;
    std::size_t hidden_dim = 16;
    double l2_penalty = 1e-2;
    TrainerConfig trainer;
    SamplingConfig sampling;
    double eval_split = 0.2;
    SurrogateChoice surrogate;
    OutcomeSource::Kind outcome_kind = OutcomeSource::Kind::retrain;
    std::size_t projection_dim = 0;
    std::uint64_t projection_seed = 0;
    std::optional<double> gradex_reg;
    bool anchor_full = false;  ///< linearize at the all-task model instead of the initialization
    SamplingConfig ensemble;
    std::vector<std::string> baselines;
    double damping = 1e-3;
    std::size_t trak_members = 3;
    std::size_t trak_dim = 0;
    std::size_t hessian_probes = 0;
    nlohmann::json theory;
    std::filesystem::path output_dir = "taskattr-out";
    bool use_cache = true;
};

/// Throws ConfigError on malformed or inconsistent settings. TASKATTRIB_OUT,
/// when set, replaces output_dir.
PipelineConfig parse_config(const nlohmann::json& document, std::optional<std::uint64_t> seed_override = std::nullopt,
                            const std::filesystem::path& base_dir = {});
PipelineConfig load_config(const std::filesystem::path& path, std::optional<std::uint64_t> seed_override = std::nullopt);

TaskBundle build_bundle(const PipelineConfig& config);
TaskBundle build_bundle(const nlohmann::json& source, std::uint64_t seed, const std::filesystem::path& base_dir = {});

struct AttributeResult {
    std::vector<AttributionReport> reports;
    SurrogateDataset train;
    SurrogateDataset holdout;
    Surrogate surrogate;
    std::vector<std::filesystem::path> files;
};

struct EvaluateRow {
    std::string method;
    double lds = 0.0;
    double pearson_vs_loo = 0.0;
    double runtime_seconds = 0.0;
};

struct TheoryRow {
    std::size_t m = 0;
    double mean_gap = 0.0;
    double sampling_band = 0.0;
    double band_constant = 0.0;
    double empirical_mse = 0.0;
    double predicted_mse = 0.0;
};

struct TheoryResult {
    double beta_closed_norm = 0.0;
    double predicted_alpha = 0.0;
    double predicted_min_mse = 0.0;
    std::vector<TheoryRow> rows;
};

std::filesystem::path run_generate(const PipelineConfig& config, std::ostream& out);
AttributeResult run_attribute(const PipelineConfig& config, std::size_t jobs, std::ostream& out);
AttributionReport run_loo(const PipelineConfig& config, std::size_t jobs, std::ostream& out);
std::vector<EvaluateRow> run_evaluate(const PipelineConfig& config, const std::vector<std::filesystem::path>& reports,
                                      std::size_t jobs, std::ostream& out);
TheoryResult run_verify_theory(const PipelineConfig& config, std::size_t jobs, std::ostream& out);

}  // namespace taskattr
