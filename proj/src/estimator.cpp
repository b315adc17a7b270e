#include "taskattr/estimator.hpp"

#include <cmath>
#include <deque>
#include <fstream>
#include <sstream>

#include <nlohmann/json.hpp>

#include "taskattr/errors.hpp"
#include "taskattr/io.hpp"
#include "taskattr/parallel.hpp"
#include "taskattr/rng.hpp"

namespace taskattr {

ProjectionMatrix ProjectionMatrix::gaussian(std::size_t d, std::size_t k, std::uint64_t seed) {
    ProjectionMatrix p;
    p.rows_ = k;
    p.cols_ = d;
    p.seed_ = seed;
    p.matrix_.resize(static_cast<Eigen::Index>(k), static_cast<Eigen::Index>(d));
    const double scale = 1.0 / std::sqrt(static_cast<double>(k));
    // One stream per row keeps generation order-independent.
    for (std::size_t r = 0; r < k; ++r) {
        Rng rng(derive_seed(seed, r));
        for (std::size_t c = 0; c < d; ++c) {
            p.matrix_(static_cast<Eigen::Index>(r), static_cast<Eigen::Index>(c)) = scale * rng.normal();
        }
    }
    return p;
}

ProjectionMatrix ProjectionMatrix::identity(std::size_t d) {
    ProjectionMatrix p;
    p.rows_ = d;
    p.cols_ = d;
    p.identity_ = true;
    return p;
}

Eigen::VectorXd ProjectionMatrix::apply(const Eigen::VectorXd& v) const {
    if (static_cast<std::size_t>(v.size()) != cols_) throw ConfigError("projection: input length mismatch");
    if (identity_) return v;
    return matrix_ * v;
}

Eigen::MatrixXd ProjectionMatrix::apply_rows(const Eigen::MatrixXd& rows) const {
    if (static_cast<std::size_t>(rows.cols()) != cols_) throw ConfigError("projection: input length mismatch");
    if (identity_) return rows;
    return rows * matrix_.transpose();
}

ProjectionMatrix build_projection(std::size_t d, std::size_t k, std::uint64_t seed, bool identity) {
    if (identity) return ProjectionMatrix::identity(d);
    if (k < 1 || k > d)
        throw ConfigError("projection: need 1 <= k <= d (k = " + std::to_string(k) + ", d = " + std::to_string(d) + ")");
    return ProjectionMatrix::gaussian(d, k, seed);
}

FeatureBank extract_features(const ModelParams& params0, const TaskBundle& bundle, const ProjectionMatrix& projection,
                             std::size_t jobs) {
    bundle.validate();
    if (params0.spec.input_dim != bundle.feature_dim())
        throw ConfigError("extract_features: model input_dim does not match the bundle");
    if (projection.cols() != params0.size()) throw ConfigError("extract_features: projection width != parameter count");

    FeatureBank bank;
    bank.projected_dim = projection.rows();
    bank.class_count = params0.spec.class_count;
    bank.metric = bundle.metric;
    std::vector<const Sample*> samples;
    std::vector<int> owners;
    for (std::size_t k = 0; k < bundle.task_count(); ++k) {
        bank.task_sizes.push_back(bundle.tasks[k].samples.size());
        for (const auto& s : bundle.tasks[k].samples) {
            samples.push_back(&s);
            owners.push_back(static_cast<int>(k));
        }
    }
    const std::size_t train_count = samples.size();
    for (const auto& s : bundle.test) {
        samples.push_back(&s);
        owners.push_back(-1);
    }
    std::vector<FeatureEntry> entries(samples.size());
    parallel_for(samples.size(), jobs, [&](std::size_t i) {
        const auto& sample = *samples[i];
        FeatureEntry e;
        e.base_logits = logits(params0, sample.features);
        e.grads = projection.apply_rows(logit_jacobian(params0, sample.features));
        e.label = sample.label;
        e.task = owners[i];
        entries[i] = std::move(e);
    });
    bank.train.assign(std::make_move_iterator(entries.begin()),
                      std::make_move_iterator(entries.begin() + static_cast<long>(train_count)));
    bank.test.assign(std::make_move_iterator(entries.begin() + static_cast<long>(train_count)),
                     std::make_move_iterator(entries.end()));
    return bank;
}

namespace {

/// Cross-entropy of the linearized logits; accumulates weight * G^T (p - e_y)
/// into grad when given.
double linearized_ce(const FeatureEntry& e, const Eigen::VectorXd& z, double weight, Eigen::VectorXd* grad) {
    Eigen::VectorXd f = e.base_logits + e.grads * z;
    const double peak = f.maxCoeff();
    Eigen::VectorXd p = (f.array() - peak).exp();
    const double total = p.sum();
    const double loss = peak + std::log(total) - f[e.label];
    if (grad != nullptr) {
        p /= total;
        p[e.label] -= 1.0;
        grad->noalias() += weight * (e.grads.transpose() * p);
    }
    return loss;
}

void check_subset(const FeatureBank& bank, const SubsetVector& s) {
    if (s.size() != bank.task_count()) throw ConfigError("gradex: subset length does not match task count");
    if (s.count() == 0) throw ConfigError("gradex: subset selects no tasks");
}

}  // namespace

double gradex_objective(const FeatureBank& bank, const SubsetVector& s, double reg_lambda, const Eigen::VectorXd& z,
                        Eigen::VectorXd* grad) {
    check_subset(bank, s);
    const double selected = static_cast<double>(s.count());
    if (grad != nullptr) *grad = reg_lambda * z;
    double value = 0.5 * reg_lambda * z.squaredNorm();
    for (const auto& e : bank.train) {
        const auto task = static_cast<std::size_t>(e.task);
        if (!s[task]) continue;
        const double w = 1.0 / (selected * static_cast<double>(bank.task_sizes[task]));
        value += w * linearized_ce(e, z, w, grad);
    }
    return value;
}

GradexSolution gradex_solve(const FeatureBank& bank, const SubsetVector& s, double reg_lambda,
                            const GradexOptions& options) {
    check_subset(bank, s);
    if (!(reg_lambda >= 0.0) || !std::isfinite(reg_lambda)) throw ConfigError("gradex: reg_lambda must be >= 0");
    const auto k = static_cast<Eigen::Index>(bank.projected_dim);

    GradexSolution sol;
    sol.z = Eigen::VectorXd::Zero(k);
    Eigen::VectorXd grad;
    double value = gradex_objective(bank, s, reg_lambda, sol.z, &grad);

    std::deque<std::pair<Eigen::VectorXd, Eigen::VectorXd>> history;  // (step, grad change)
    Eigen::VectorXd next_grad;
    for (sol.iterations = 0; sol.iterations < options.max_iterations; ++sol.iterations) {
        if (grad.norm() <= options.tolerance) break;

        // Two-loop recursion for the quasi-Newton direction.
        Eigen::VectorXd q = grad;
        std::vector<double> alphas(history.size());
        for (std::size_t i = history.size(); i-- > 0;) {
            const auto& [step, dgrad] = history[i];
            alphas[i] = step.dot(q) / dgrad.dot(step);
            q -= alphas[i] * dgrad;
        }
        if (!history.empty()) {
            const auto& [step, dgrad] = history.back();
            q *= step.dot(dgrad) / dgrad.squaredNorm();
        }
        for (std::size_t i = 0; i < history.size(); ++i) {
            const auto& [step, dgrad] = history[i];
            const double beta = dgrad.dot(q) / dgrad.dot(step);
            q += (alphas[i] - beta) * step;
        }
        Eigen::VectorXd direction = -q;
        double slope = grad.dot(direction);
        if (!(slope < 0.0)) {
            history.clear();
            direction = -grad;
            slope = -grad.squaredNorm();
        }

        double t = 1.0;
        double next_value = 0.0;
        Eigen::VectorXd candidate;
        for (int tries = 0;; ++tries) {
            candidate = sol.z + t * direction;
            next_value = gradex_objective(bank, s, reg_lambda, candidate, &next_grad);
            if (std::isfinite(next_value) && next_value <= value + 1e-4 * t * slope) break;
            if (tries >= 60) break;
            t *= 0.5;
        }
        if (!(next_value <= value)) break;  // no progress possible at machine precision

        Eigen::VectorXd step = candidate - sol.z;
        Eigen::VectorXd dgrad = next_grad - grad;
        if (step.dot(dgrad) > 1e-12 * step.norm() * dgrad.norm()) {
            history.emplace_back(std::move(step), std::move(dgrad));
            if (history.size() > options.history) history.pop_front();
        }
        sol.z = std::move(candidate);
        grad = next_grad;
        value = next_value;
    }
    sol.objective_value = value;
    sol.terminal_grad_norm = grad.norm();
    sol.converged = sol.terminal_grad_norm <= options.tolerance;
    return sol;
}

double gradex_test_metric(const FeatureBank& bank, const Eigen::VectorXd& z) {
    if (bank.test.empty()) throw ConfigError("gradex: feature bank has no test samples");
    double total = 0.0;
    for (const auto& e : bank.test) {
        if (bank.metric == Metric::mean_test_loss) {
            total += linearized_ce(e, z, 0.0, nullptr);
        } else {
            Eigen::Index best = 0;
            (e.base_logits + e.grads * z).maxCoeff(&best);
            total += best == e.label ? 1.0 : 0.0;
        }
    }
    return total / static_cast<double>(bank.test.size());
}

double gradex_estimate(const FeatureBank& bank, const SubsetVector& s, double reg_lambda,
                       const GradexOptions& options) {
    return gradex_test_metric(bank, gradex_solve(bank, s, reg_lambda, options).z);
}

double approximation_error(const ModelParams& params0, const ModelParams& trained, const TaskBundle& bundle) {
    if (!(params0.spec == trained.spec)) throw ConfigError("approximation_error: parameter specs differ");
    if (bundle.test.empty()) throw ConfigError("approximation_error: bundle has no test samples");
    const Eigen::VectorXd delta = trained.flat - params0.flat;
    double total = 0.0;
    for (const auto& sample : bundle.test) {
        const Eigen::VectorXd f = logits(trained, sample.features);
        const Eigen::VectorXd f0 = logits(params0, sample.features);
        const Eigen::VectorXd linear = f0 + logit_jacobian(params0, sample.features) * delta;
        const Eigen::ArrayXd rel = (f - linear).array().abs() / f.array().abs().max(1e-8);
        total += rel.mean();
    }
    return total / static_cast<double>(bundle.test.size());
}

void save_feature_bank(const FeatureBank& bank, const std::filesystem::path& dir) {
    std::filesystem::create_directories(dir);
    nlohmann::json manifest = {
        {"format", "taskattr-feature-bank-v1"},
        {"projected_dim", bank.projected_dim},
        {"class_count", bank.class_count},
        {"task_sizes", bank.task_sizes},
        {"metric", std::string(to_string(bank.metric))},
        {"train_rows", bank.train.size() * bank.class_count},
        {"test_rows", bank.test.size() * bank.class_count},
        {"columns", "sample,task,label,class,base_logit,g_0..g_{k-1}"},
    };
    write_text_atomic(dir / "manifest.json", manifest.dump(2) + "\n");
    auto write_entries = [&](const std::vector<FeatureEntry>& entries, const std::filesystem::path& path) {
        std::ostringstream out;
        out << "sample,task,label,class,base_logit";
        for (std::size_t j = 0; j < bank.projected_dim; ++j) out << ",g_" << j;
        out << '\n';
        for (std::size_t i = 0; i < entries.size(); ++i) {
            const auto& e = entries[i];
            for (Eigen::Index c = 0; c < e.base_logits.size(); ++c) {
                out << i << ',' << e.task << ',' << e.label << ',' << c << ',' << format_double(e.base_logits[c]);
                for (Eigen::Index j = 0; j < e.grads.cols(); ++j) out << ',' << format_double(e.grads(c, j));
                out << '\n';
            }
        }
        write_text_atomic(path, out.str());
    };
    write_entries(bank.train, dir / "train.csv");
    write_entries(bank.test, dir / "test.csv");
}

FeatureBank load_feature_bank(const std::filesystem::path& dir) {
    const auto manifest = nlohmann::json::parse(read_text(dir / "manifest.json"));
    if (manifest.value("format", "") != "taskattr-feature-bank-v1") throw ConfigError("feature bank: unknown format");
    FeatureBank bank;
    bank.projected_dim = manifest.at("projected_dim").get<std::size_t>();
    bank.class_count = manifest.at("class_count").get<std::size_t>();
    bank.task_sizes = manifest.at("task_sizes").get<std::vector<std::size_t>>();
    bank.metric = parse_metric(manifest.at("metric").get<std::string>());
    const auto k = static_cast<Eigen::Index>(bank.projected_dim);
    const auto classes = static_cast<Eigen::Index>(bank.class_count);
    auto read_entries = [&](const std::filesystem::path& path) {
        std::vector<FeatureEntry> entries;
        const auto rows = read_csv(path);
        for (std::size_t r = 1; r < rows.size(); ++r) {
            const auto& row = rows[r];
            if (static_cast<Eigen::Index>(row.size()) != 5 + k) throw ConfigError("feature bank: bad row width");
            const auto sample = std::stoul(row[0]);
            const auto cls = static_cast<Eigen::Index>(std::stol(row[3]));
            if (sample == entries.size()) {
                FeatureEntry e;
                e.task = std::stoi(row[1]);
                e.label = std::stoi(row[2]);
                e.base_logits = Eigen::VectorXd::Zero(classes);
                e.grads = Eigen::MatrixXd::Zero(classes, k);
                entries.push_back(std::move(e));
            }
            if (sample + 1 != entries.size() || cls < 0 || cls >= classes)
                throw ConfigError("feature bank: rows out of order");
            auto& e = entries.back();
            e.base_logits[cls] = parse_double(row[4]);
            for (Eigen::Index j = 0; j < k; ++j) e.grads(cls, j) = parse_double(row[static_cast<std::size_t>(5 + j)]);
        }
        return entries;
    };
    bank.train = read_entries(dir / "train.csv");
    bank.test = read_entries(dir / "test.csv");
    return bank;
}

}  // namespace taskattr
