#include "taskattr/oracle.hpp"

#include <cmath>
#include <fstream>

#include "taskattr/errors.hpp"
#include "taskattr/estimator.hpp"
#include "taskattr/io.hpp"
#include "taskattr/log.hpp"
#include "taskattr/parallel.hpp"

namespace taskattr {

std::string_view to_string(Provenance provenance) {
    return provenance == Provenance::retrained ? "retrained" : "gradex";
}

Provenance parse_provenance(std::string_view text) {
    if (text == "retrained") return Provenance::retrained;
    if (text == "gradex") return Provenance::gradex;
    throw ConfigError("unknown provenance '" + std::string(text) + "'");
}

Eigen::VectorXd SurrogateDataset::outcomes() const {
    Eigen::VectorXd y(static_cast<Eigen::Index>(entries.size()));
    for (std::size_t i = 0; i < entries.size(); ++i) y[static_cast<Eigen::Index>(i)] = entries[i].outcome;
    return y;
}

std::vector<SubsetVector> SurrogateDataset::subsets() const {
    std::vector<SubsetVector> out;
    out.reserve(entries.size());
    for (const auto& e : entries) out.push_back(e.s);
    return out;
}

SurrogateDataset SurrogateDataset::slice(std::size_t begin, std::size_t end) const {
    if (begin > end || end > entries.size()) throw ConfigError("dataset slice out of range");
    SurrogateDataset out{task_count, metric, {}};
    out.entries.assign(entries.begin() + static_cast<long>(begin), entries.begin() + static_cast<long>(end));
    return out;
}

void SurrogateDataset::validate() const {
    for (std::size_t i = 0; i < entries.size(); ++i) {
        if (entries[i].s.size() != task_count)
            throw ConfigError("dataset entry " + std::to_string(i) + " has the wrong subset length");
        if (!std::isfinite(entries[i].outcome))
            throw ConfigError("dataset entry " + std::to_string(i) + " has a non-finite outcome");
    }
}

Oracle::Oracle(TaskBundle bundle, ModelSpec spec, TrainerConfig trainer, std::optional<std::filesystem::path> cache_dir)
    : bundle_(std::move(bundle)), spec_(spec), trainer_(trainer), cache_dir_(std::move(cache_dir)) {
    bundle_.validate();
    spec_.validate();
    trainer_.validate();
    if (spec_.input_dim != bundle_.feature_dim() || spec_.class_count != static_cast<std::size_t>(bundle_.class_count))
        throw ConfigError("oracle: model spec does not match the bundle dimensions");
    bundle_hash_ = content_hash(to_json(bundle_).dump());
    config_fingerprint_ = bundle_hash_ + "|" + to_json(spec_).dump() + "|" + to_json(trainer_).dump();
    if (cache_dir_) std::filesystem::create_directories(*cache_dir_);
}

std::string Oracle::cache_key(const SubsetVector& s) const {
    return content_hash(config_fingerprint_ + "|" + s.to_string());
}

std::optional<double> Oracle::lookup(const std::string& key) {
    {
        std::lock_guard lock(mutex_);
        if (const auto it = memory_.find(key); it != memory_.end()) {
            ++hits_;
            return it->second;
        }
    }
    if (!cache_dir_) return std::nullopt;
    const auto path = *cache_dir_ / (key + ".json");
    std::error_code ec;
    if (!std::filesystem::exists(path, ec)) return std::nullopt;
    try {
        const auto doc = nlohmann::json::parse(read_text(path));
        const double value = parse_double(doc.at("outcome").get<std::string>());
        std::lock_guard lock(mutex_);
        memory_.emplace(key, value);
        ++hits_;
        return value;
    } catch (const std::exception& e) {
        log::warn("ignoring unreadable cache entry " + path.string() + ": " + e.what());
        return std::nullopt;
    }
}

void Oracle::store(const std::string& key, const SubsetVector& s, double value) {
    std::lock_guard lock(mutex_);
    memory_.emplace(key, value);
    if (!cache_dir_) return;
    // The outcome is kept as a string so the value survives any JSON reader bit-exactly.
    const nlohmann::json doc = {
        {"key", key}, {"bundle_hash", bundle_hash_}, {"s", s.to_string()}, {"outcome", format_double(value)}};
    write_text_atomic(*cache_dir_ / (key + ".json"), doc.dump(2) + "\n");
    std::ofstream index(*cache_dir_ / "index.tsv", std::ios::app);
    index << key << '\t' << s.to_string() << '\t' << format_double(value) << '\n';
}

double Oracle::evaluate(const SubsetVector& s) {
    if (s.size() != bundle_.task_count()) throw ConfigError("oracle: subset length does not match task count");
    if (s.empty_selection()) throw ConfigError("oracle: subset selects no tasks");
    const auto key = cache_key(s);
    if (const auto cached = lookup(key)) return *cached;
    const auto result = train_on(s);
    const double value = evaluate_metric(result.params, bundle_.test, bundle_.metric);
    {
        std::lock_guard lock(mutex_);
        ++trainings_;
    }
    store(key, s, value);
    return value;
}

std::vector<double> Oracle::evaluate_many(const std::vector<SubsetVector>& subsets, std::size_t jobs) {
    std::vector<double> out(subsets.size());
    parallel_for(subsets.size(), jobs, [&](std::size_t i) { out[i] = evaluate(subsets[i]); });
    return out;
}

TrainResult Oracle::train_on(const SubsetVector& s, bool keep_trail) const {
    return train(spec_, bundle_, s, trainer_, keep_trail);
}

std::size_t Oracle::cache_hits() const {
    std::lock_guard lock(mutex_);
    return hits_;
}

std::size_t Oracle::trainings() const {
    std::lock_guard lock(mutex_);
    return trainings_;
}

LooReport loo_scores(Oracle& oracle, std::size_t jobs) {
    const std::size_t K = oracle.bundle().task_count();
    if (K < 2) throw ConfigError("loo_scores: need at least two tasks");
    std::vector<SubsetVector> subsets{SubsetVector::all_ones(K)};
    for (std::size_t k = 0; k < K; ++k) subsets.push_back(SubsetVector::without(K, k));
    const auto values = oracle.evaluate_many(subsets, jobs);
    LooReport report;
    report.full_outcome = values[0];
    report.without.assign(values.begin() + 1, values.end());
    report.scores.resize(static_cast<Eigen::Index>(K));
    for (std::size_t k = 0; k < K; ++k) report.scores[static_cast<Eigen::Index>(k)] = report.full_outcome - report.without[k];
    return report;
}

SurrogateDataset build_surrogate_dataset(Oracle& oracle, const SamplingConfig& sampling, const OutcomeSource& source,
                                         std::size_t jobs) {
    return build_surrogate_dataset(oracle, sample_subsets(sampling, oracle.bundle().task_count()), source, jobs);
}

SurrogateDataset build_surrogate_dataset(Oracle& oracle, const std::vector<SubsetVector>& subsets,
                                         const OutcomeSource& source, std::size_t jobs) {
    SurrogateDataset data{oracle.bundle().task_count(), oracle.bundle().metric, {}};
    std::vector<double> values;
    Provenance provenance = Provenance::retrained;
    if (source.kind == OutcomeSource::Kind::retrain) {
        values = oracle.evaluate_many(subsets, jobs);
    } else {
        provenance = Provenance::gradex;
        const auto& trainer = oracle.trainer();
        const ModelParams anchor = source.anchor ? *source.anchor
                                                 : init_params(oracle.spec(), trainer.seed, trainer.init_scale,
                                                               trainer.zero_init);
        if (!(anchor.spec == oracle.spec())) throw ConfigError("gradex anchor spec does not match the oracle");
        const auto d = anchor.size();
        const auto projection = source.projection_dim == 0
                                    ? ProjectionMatrix::identity(d)
                                    : build_projection(d, source.projection_dim, source.projection_seed);
        const auto bank = extract_features(anchor, oracle.bundle(), projection, jobs);
        const double reg = source.reg_lambda.value_or(oracle.spec().l2_penalty);
        for (const auto& s : subsets)
            if (s.size() != bank.task_count()) throw ConfigError("gradex: subset length does not match task count");
        values.resize(subsets.size());
        std::atomic<std::size_t> unconverged{0};
        parallel_for(subsets.size(), jobs, [&](std::size_t i) {
            const auto sol = gradex_solve(bank, subsets[i], reg);
            if (!sol.converged) unconverged.fetch_add(1);
            values[i] = gradex_test_metric(bank, sol.z);
        });
        if (unconverged.load() > 0)
            log::warn("gradex: " + std::to_string(unconverged.load()) + " of " + std::to_string(subsets.size()) +
                      " solves stopped at the iteration limit");
    }
    for (std::size_t i = 0; i < subsets.size(); ++i) data.entries.push_back({subsets[i], values[i], provenance});
    data.validate();
    return data;
}

}  // namespace taskattr
