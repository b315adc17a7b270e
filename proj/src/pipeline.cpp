#include "taskattr/pipeline.hpp"

#include <chrono>
#include <cmath>
#include <cstdlib>
#include <ostream>

#include "taskattr/baselines.hpp"
#include "taskattr/errors.hpp"
#include "taskattr/estimator.hpp"
#include "taskattr/io.hpp"
#include "taskattr/log.hpp"
#include "taskattr/parallel.hpp"
#include "taskattr/rng.hpp"

namespace taskattr {

namespace fs = std::filesystem;
using nlohmann::json;

namespace {

// Stream indices for seeds the config leaves out.
enum SeedSlot : std::uint64_t { bundle_slot = 0, trainer_slot, sampling_slot, projection_slot, ensemble_slot,
                                hessian_slot, theory_slot, trak_slot };

std::uint64_t seed_or(const json& doc, std::uint64_t master, SeedSlot slot) {
    if (doc.is_object() && doc.contains("seed")) return doc.at("seed").get<std::uint64_t>();
    return derive_seed(master, slot);
}

SamplingConfig parse_sampling(const json& doc, std::uint64_t seed, std::size_t default_m) {
    SamplingConfig s;
    const auto mode = doc.value("mode", std::string("bernoulli"));
    if (mode == "bernoulli") {
        s.mode = SamplingConfig::Mode::bernoulli;
        s.p = doc.value("p", 0.5);
        if (!(s.p > 0.0 && s.p < 1.0)) throw ConfigError("sampling: p must lie in (0, 1)");
    } else if (mode == "fixed_size") {
        s.mode = SamplingConfig::Mode::fixed_size;
        s.size = doc.at("size").get<std::size_t>();
    } else {
        throw ConfigError("sampling: unknown mode '" + mode + "'");
    }
    s.m = doc.value("m", default_m);
    if (s.m < 1) throw ConfigError("sampling: m must be >= 1");
    s.seed = seed;
    return s;
}

double seconds_since(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

struct Context {
    TaskBundle bundle;
    ModelSpec spec;
    std::string bundle_hash;
};

Context make_context(const PipelineConfig& config) {
    Context ctx;
    ctx.bundle = build_bundle(config);
    if (ctx.bundle.task_count() < 2) throw ConfigError("bundle needs at least two tasks");
    ctx.spec = spec_for(ctx.bundle, config.model_kind, config.hidden_dim, config.l2_penalty);
    ctx.bundle_hash = content_hash(to_json(ctx.bundle).dump());
    return ctx;
}

std::optional<fs::path> cache_dir(const PipelineConfig& config) {
    if (!config.use_cache) return std::nullopt;
    return config.output_dir / "cache";
}

std::map<std::string, std::string> base_metadata(const PipelineConfig& config, const Context& ctx,
                                                 std::string_view command) {
    std::map<std::string, std::string> meta{
        {"config_hash", config.config_hash},
        {"seed", std::to_string(config.seed)},
        {"bundle_hash", ctx.bundle_hash},
        {"command", std::string(command)},
        {"metric", std::string(to_string(ctx.bundle.metric))},
        {"task_count", std::to_string(ctx.bundle.task_count())},
        {"model", std::string(to_string(ctx.spec.kind))},
    };
    if (config.bundle.value("generator", std::string()) == "modular")
        meta["model_note"] = std::string(to_string(ctx.spec.kind)) +
                             " on one-hot token features substitutes for a two-layer transformer";
    return meta;
}

/// Sign that turns a method's raw scores into the LOO orientation
/// F(all) - F(all - e_k).
double orientation(std::string_view method, Metric metric) {
    double sign = 1.0;
    if (method == "tracin" || method == "trak") sign = -1.0;
    const bool gradient_based = method == "influence" || method == "tracin" || method == "trak";
    if (gradient_based && metric == Metric::mean_test_accuracy) sign = -sign;
    return sign;
}

void write_report(const AttributionReport& report, const fs::path& path) {
    write_text_atomic(path, dump_json(to_json(report)));
}

void write_manifest(const PipelineConfig& config, std::string_view command, const std::vector<fs::path>& files) {
    json list = json::array();
    for (const auto& f : files) list.push_back(f.filename().string());
    const json doc = {{"config_hash", config.config_hash}, {"seed", config.seed}, {"command", std::string(command)},
                      {"files", list}, {"config", config.document}};
    write_text_atomic(config.output_dir / ("manifest_" + std::string(command) + ".json"), dump_json(doc));
}

std::vector<SubsetVector> holdout_subsets(const PipelineConfig& config, std::size_t task_count,
                                          std::vector<SubsetVector>* train_part) {
    auto subsets = sample_subsets(config.sampling, task_count);
    const auto holdout = static_cast<std::size_t>(std::llround(config.eval_split * static_cast<double>(subsets.size())));
    if (holdout < 3 || holdout >= subsets.size())
        throw ConfigError("eval_split leaves " + std::to_string(holdout) + " held-out and " +
                          std::to_string(subsets.size() - std::min(holdout, subsets.size())) +
                          " fitting subsets; need at least 3 and 1");
    const auto split = subsets.size() - holdout;
    if (train_part) train_part->assign(subsets.begin(), subsets.begin() + static_cast<long>(split));
    return {subsets.begin() + static_cast<long>(split), subsets.end()};
}

std::string cv_table_csv(const CvResult& cv) {
    std::size_t folds = 0;
    for (const auto& row : cv.table) folds = std::max(folds, row.fold_mse.size());
    std::string out = "kernel,lambda";
    for (std::size_t f = 0; f < folds; ++f) out += ",fold_" + std::to_string(f);
    out += ",mean_mse,excluded\n";
    for (const auto& row : cv.table) {
        out += csv_field(row.spec.label()) + "," + format_double(row.lambda);
        for (std::size_t f = 0; f < folds; ++f)
            out += "," + (f < row.fold_mse.size() ? format_double(row.fold_mse[f]) : std::string());
        out += "," + format_double(row.mean_mse) + "," + (row.excluded ? "1" : "0") + "\n";
    }
    return out;
}

}  // namespace

PipelineConfig parse_config(const json& document, std::optional<std::uint64_t> seed_override, const fs::path& base_dir) {
    if (!document.is_object()) throw ConfigError("config must be a JSON object");
    try {
        PipelineConfig c;
        c.document = document;
        c.seed = seed_override.value_or(document.value("seed", std::uint64_t{0}));
        c.document["seed"] = c.seed;
        c.config_hash = content_hash(c.document.dump());

        c.bundle = document.value("bundle", json::object());
        if (c.bundle.contains("path")) {
            fs::path p = c.bundle.at("path").get<std::string>();
            if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
            if (!fs::exists(p)) throw ConfigError("bundle path does not exist: " + p.string());
            c.bundle["path"] = p.string();
        } else if (!c.bundle.contains("generator")) {
            throw ConfigError("bundle: need a generator or a path");
        }

        const auto model = document.value("model", json::object());
        c.model_kind = parse_model_kind(model.value("kind", std::string("logreg")));
        c.hidden_dim = model.value("hidden_dim", c.model_kind == ModelKind::mlp2 ? std::size_t{16} : std::size_t{0});
        c.l2_penalty = model.value("l2_penalty", 1e-2);
        if (!(c.l2_penalty >= 0.0)) throw ConfigError("model: l2_penalty must be >= 0");

        const auto trainer = document.value("trainer", json::object());
        c.trainer = trainer_from_json(trainer);
        c.trainer.seed = seed_or(trainer, c.seed, trainer_slot);

        const auto sampling = document.value("sampling", json::object());
        c.sampling = parse_sampling(sampling, seed_or(sampling, c.seed, sampling_slot), 100);
        c.eval_split = document.value("eval_split", 0.2);
        if (!(c.eval_split > 0.0 && c.eval_split < 1.0)) throw ConfigError("eval_split must lie in (0, 1)");

        const auto surrogate = document.value("surrogate", json::object());
        const auto kind = surrogate.value("kind", std::string("kernel"));
        if (kind == "linear") {
            c.surrogate.kind = SurrogateChoice::Kind::linear;
        } else if (kind == "kernel") {
            c.surrogate.kind = SurrogateChoice::Kind::kernel;
            c.surrogate.spec = surrogate.contains("kernel") ? kernel_spec_from_json(surrogate.at("kernel"))
                                                            : KernelSpec::rbf(0.0);
            const auto lambda = surrogate.value("lambda", json(kDefaultKrrLambda));
            if (lambda.is_string()) {
                if (lambda.get<std::string>() != "cv") throw ConfigError("surrogate: lambda must be a number or \"cv\"");
                c.surrogate.lambda.reset();
            } else {
                c.surrogate.lambda = lambda.get<double>();
                if (!(*c.surrogate.lambda >= 0.0)) throw ConfigError("surrogate: lambda must be >= 0");
            }
            const auto cv = surrogate.value("cv", json::object());
            if (cv.contains("kernels"))
                for (const auto& k : cv.at("kernels")) c.surrogate.cv_specs.push_back(kernel_spec_from_json(k));
            if (cv.contains("gammas"))
                for (const auto& g : cv.at("gammas")) c.surrogate.cv_specs.push_back(KernelSpec::rbf(g.get<double>()));
            c.surrogate.cv_lambdas = cv.value("lambdas", std::vector<double>{1e-4, 1e-3, 1e-2, 1e-1, 1.0});
            c.surrogate.cv_folds = cv.value("folds", std::size_t{5});
            if (c.surrogate.cv_folds < 2) throw ConfigError("surrogate: cv folds must be >= 2");
        } else {
            throw ConfigError("surrogate: unknown kind '" + kind + "'");
        }

        const auto outcome = document.value("outcome", json::object());
        const auto source = outcome.value("source", std::string("retrain"));
        if (source == "retrain") {
            c.outcome_kind = OutcomeSource::Kind::retrain;
        } else if (source == "gradex") {
            c.outcome_kind = OutcomeSource::Kind::gradex;
            c.projection_dim = outcome.value("k", std::size_t{0});
            c.projection_seed = seed_or(outcome, c.seed, projection_slot);
            if (outcome.contains("reg_lambda")) c.gradex_reg = outcome.at("reg_lambda").get<double>();
            const auto anchor = outcome.value("anchor", std::string("init"));
            if (anchor != "init" && anchor != "full") throw ConfigError("outcome: anchor must be \"init\" or \"full\"");
            c.anchor_full = anchor == "full";
        } else {
            throw ConfigError("outcome: unknown source '" + source + "'");
        }

        const auto ensemble = document.value("ensemble", json::object());
        c.ensemble = parse_sampling(ensemble, seed_or(ensemble, c.seed, ensemble_slot), 2000);

        c.baselines = document.value("baselines", std::vector<std::string>{});
        for (const auto& b : c.baselines)
            if (b != "influence" && b != "tracin" && b != "trak") throw ConfigError("unknown baseline '" + b + "'");
        c.damping = document.value("influence", json::object()).value("damping", 1e-3);
        if (!(c.damping > 0.0)) throw ConfigError("influence: damping must be > 0");
        const auto trak = document.value("trak", json::object());
        c.trak_members = trak.value("members", std::size_t{3});
        c.trak_dim = trak.value("k", std::size_t{0});
        c.hessian_probes = document.value("hessian_trace", json::object()).value("probes", std::size_t{0});
        c.theory = document.value("theory", json::object());

        c.output_dir = document.value("output_dir", std::string("taskattr-out"));
        if (c.output_dir.is_relative() && !base_dir.empty()) c.output_dir = base_dir / c.output_dir;
        if (const char* env = std::getenv("TASKATTRIB_OUT"); env != nullptr && *env != '\0') c.output_dir = env;
        c.use_cache = document.value("cache", true);
        return c;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
}

PipelineConfig load_config(const fs::path& path, std::optional<std::uint64_t> seed_override) {
    json doc;
    try {
        doc = json::parse(read_text(path));
    } catch (const json::parse_error& e) {
        throw ConfigError("config " + path.string() + ": " + e.what());
    }
    return parse_config(doc, seed_override, path.parent_path());
}

TaskBundle build_bundle(const json& source, std::uint64_t seed, const fs::path& base_dir) {
    try {
        if (source.contains("path")) {
            fs::path p = source.at("path").get<std::string>();
            if (p.is_relative() && !base_dir.empty()) p = base_dir / p;
            return bundle_from_json(json::parse(read_text(p)));
        }
        const auto generator = source.at("generator").get<std::string>();
        const std::uint64_t bundle_seed = seed_or(source, seed, bundle_slot);
        TaskBundle bundle;
        if (generator == "modular") {
            bundle = make_modular_bundle(source.value("prime", 29), parse_modular_op(source.value("op", std::string("addition"))),
                                         source.value("groups", 2), source.value("train_fraction", 0.5), bundle_seed);
        } else if (generator == "gaussian") {
            GaussianBundleConfig g;
            g.task_count = source.value("task_count", g.task_count);
            g.samples_per_task = source.value("samples_per_task", g.samples_per_task);
            g.test_samples = source.value("test_samples", g.test_samples);
            g.feature_dim = source.value("feature_dim", g.feature_dim);
            g.intrinsic_dim = source.value("intrinsic_dim", g.intrinsic_dim);
            g.class_count = source.value("class_count", g.class_count);
            g.separation = source.value("separation", g.separation);
            g.label_noise = source.value("label_noise", g.label_noise);
            g.seed = bundle_seed;
            bundle = make_gaussian_bundle(g);
        } else {
            throw ConfigError("unknown generator '" + generator + "'");
        }
        if (source.contains("metric")) bundle.metric = parse_metric(source.at("metric").get<std::string>());
        return bundle;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bundle: ") + e.what());
    }
}

TaskBundle build_bundle(const PipelineConfig& config) { return build_bundle(config.bundle, config.seed); }

fs::path run_generate(const PipelineConfig& config, std::ostream& out) {
    const auto bundle = build_bundle(config);
    auto doc = to_json(bundle);
    doc["meta"] = {{"config_hash", config.config_hash}, {"seed", config.seed}};
    const auto path = config.output_dir / "bundle.json";
    write_text_atomic(path, dump_json(doc));
    write_manifest(config, "generate", {path});
    out << "tasks " << bundle.task_count() << "\n";
    for (const auto& t : bundle.tasks) out << "  " << t.name << " " << t.samples.size() << "\n";
    out << "train_samples " << bundle.total_train_samples() << "\ntest_samples " << bundle.test.size() << "\n";
    out << "wrote " << path.string() << "\n";
    return path;
}

AttributeResult run_attribute(const PipelineConfig& config, std::size_t jobs, std::ostream& out) {
    const auto ctx = make_context(config);
    const std::size_t K = ctx.bundle.task_count();
    Oracle oracle(ctx.bundle, ctx.spec, config.trainer, cache_dir(config));
    AttributeResult result;

    std::vector<SubsetVector> fit_subsets;
    const auto held = holdout_subsets(config, K, &fit_subsets);

    const auto start = std::chrono::steady_clock::now();
    OutcomeSource source;
    source.kind = config.outcome_kind;
    source.projection_dim = config.projection_dim;
    source.projection_seed = config.projection_seed;
    source.reg_lambda = config.gradex_reg;
    std::optional<ModelParams> anchor;
    if (source.kind == OutcomeSource::Kind::gradex) {
        anchor = config.anchor_full ? oracle.train_on(SubsetVector::all_ones(K)).params
                                    : init_params(ctx.spec, config.trainer.seed, config.trainer.init_scale,
                                                  config.trainer.zero_init);
        source.anchor = anchor;
    }
    result.train = build_surrogate_dataset(oracle, fit_subsets, source, jobs);
    const double outcome_seconds = seconds_since(start);
    result.holdout = build_surrogate_dataset(oracle, held, OutcomeSource{}, jobs);

    const auto fit_start = std::chrono::steady_clock::now();
    auto meta = base_metadata(config, ctx, "attribute");
    meta["outcome_source"] = source.kind == OutcomeSource::Kind::retrain ? "retrain" : "gradex";
    meta["fit_subsets"] = std::to_string(result.train.size());
    meta["holdout_subsets"] = std::to_string(result.holdout.size());
    meta["residual_error_unit"] = "rmse";
    std::string method;
    if (config.surrogate.kind == SurrogateChoice::Kind::linear) {
        method = "linear";
        result.surrogate = fit_linear(result.train);
    } else {
        method = "ksm";
        KernelSpec spec = config.surrogate.spec;
        if (spec.kind == KernelSpec::Kind::rbf && spec.gamma == 0.0) spec = KernelSpec::default_for(K);
        double lambda = config.surrogate.lambda.value_or(kDefaultKrrLambda);
        if (!config.surrogate.lambda) {
            auto grid = config.surrogate.cv_specs;
            if (grid.empty())
                for (const double f : {0.25, 0.5, 1.0, 2.0, 4.0}) grid.push_back(KernelSpec::rbf(f / static_cast<double>(K)));
            const auto cv = cross_validate(result.train, grid, config.surrogate.cv_lambdas, config.surrogate.cv_folds);
            spec = cv.best_spec;
            lambda = cv.best_lambda;
            const auto cv_path = config.output_dir / "cv_table.csv";
            write_text_atomic(cv_path, cv_table_csv(cv));
            result.files.push_back(cv_path);
            meta["cv_table"] = cv_path.filename().string();
            meta["cv_best_mse"] = format_double(cv.best_mse);
        }
        meta["kernel"] = spec.label();
        meta["gamma"] = format_double(spec.gamma);
        meta["lambda"] = format_double(lambda);
        result.surrogate = fit_krr(result.train, spec, lambda);
    }
    const auto ens = ensemble_attribution(result.surrogate, K, config.ensemble);
    if (!ens.missing.empty()) {
        std::string list;
        for (const auto k : ens.missing) list += (list.empty() ? "" : " ") + std::to_string(k);
        meta["missing_tasks"] = list;
    }
    const double fit_seconds = seconds_since(fit_start);

    if (source.kind == OutcomeSource::Kind::gradex) {
        double total = 0.0;
        const std::size_t probes = std::min<std::size_t>(5, held.size());
        for (std::size_t i = 0; i < probes; ++i)
            total += approximation_error(*anchor, train_from(*anchor, ctx.bundle, held[i], config.trainer).params,
                                         ctx.bundle);
        meta["approximation_error"] = format_double(total / static_cast<double>(probes));
        meta["projection_dim"] = std::to_string(config.projection_dim == 0 ? ctx.spec.parameter_count()
                                                                           : config.projection_dim);
    }

    AttributionReport report{method, ens.scores, lds(result.surrogate, result.holdout), std::nullopt, meta};
    report.metadata["residual_error"] = format_double(residual_error(result.surrogate, result.holdout));
    report.metadata["runtime_seconds"] = format_double(outcome_seconds + fit_seconds);

    const auto dataset_path = config.output_dir / "dataset.csv";
    const auto holdout_path = config.output_dir / "holdout.csv";
    const auto surrogate_path = config.output_dir / ("surrogate_" + method + ".json");
    write_text_atomic(dataset_path, dataset_to_csv(result.train));
    write_text_atomic(holdout_path, dataset_to_csv(result.holdout));
    auto sdoc = to_json(result.surrogate);
    sdoc["config_hash"] = config.config_hash;
    sdoc["seed"] = config.seed;
    write_text_atomic(surrogate_path, dump_json(sdoc));
    report.metadata["surrogate_path"] = surrogate_path.filename().string();
    report.metadata["dataset_path"] = dataset_path.filename().string();
    result.files.insert(result.files.end(), {dataset_path, holdout_path, surrogate_path});

    if (config.hessian_probes > 0) {
        const auto full = oracle.train_on(SubsetVector::all_ones(K)).params;
        const auto tr = hessian_trace(full, ctx.bundle, SubsetVector::all_ones(K), config.hessian_probes,
                                      derive_seed(config.seed, hessian_slot));
        report.metadata["hessian_trace"] = format_double(tr.estimate);
        report.metadata["hessian_trace_se"] = format_double(tr.standard_error);
    }
    result.reports.push_back(report);

    if (!config.baselines.empty()) {
        const auto all = SubsetVector::all_ones(K);
        const auto full = oracle.train_on(all, true);
        for (const auto& name : config.baselines) {
            const auto t0 = std::chrono::steady_clock::now();
            auto bmeta = base_metadata(config, ctx, "attribute");
            Eigen::VectorXd scores;
            if (name == "influence") {
                const auto r = influence_scores(full.params, ctx.bundle, all, {config.damping});
                scores = r.scores;
                bmeta["damping"] = format_double(config.damping);
                bmeta["cg_converged"] = r.converged ? "true" : "false";
                bmeta["cg_iterations"] = std::to_string(r.iterations);
            } else if (name == "tracin") {
                scores = tracin_scores(full.trail, ctx.bundle, ctx.bundle.test);
                bmeta["checkpoints"] = std::to_string(full.trail.size());
            } else {
                const auto ensemble = build_trak_ensemble(ctx.spec, ctx.bundle, config.trainer, config.trak_members,
                                                          config.trak_dim, derive_seed(config.seed, trak_slot), jobs);
                scores = trak_scores(ensemble, ctx.bundle, ctx.bundle.test, jobs);
                bmeta["members"] = std::to_string(config.trak_members);
            }
            const double sign = orientation(name, ctx.bundle.metric);
            bmeta["orientation"] = sign > 0 ? "1" : "-1";
            bmeta["runtime_seconds"] = format_double(seconds_since(t0));
            result.reports.push_back({name, scores, lds(Eigen::VectorXd(sign * scores), result.holdout), std::nullopt, bmeta});
        }
    }

    for (const auto& r : result.reports) {
        const auto path = config.output_dir / ("report_" + r.method + ".json");
        write_report(r, path);
        result.files.push_back(path);
        out << r.method << " lds " << format_double(r.lds.value_or(std::nan(""))) << "\n";
    }
    out << "residual_error_rmse " << report.metadata["residual_error"] << "\n";
    if (report.metadata.count("approximation_error"))
        out << "approximation_error " << report.metadata["approximation_error"] << "\n";
    write_manifest(config, "attribute", result.files);
    return result;
}

AttributionReport run_loo(const PipelineConfig& config, std::size_t jobs, std::ostream& out) {
    const auto ctx = make_context(config);
    Oracle oracle(ctx.bundle, ctx.spec, config.trainer, cache_dir(config));
    const auto start = std::chrono::steady_clock::now();
    const auto loo = loo_scores(oracle, jobs);
    auto meta = base_metadata(config, ctx, "loo");
    meta["full_outcome"] = format_double(loo.full_outcome);
    meta["runtime_seconds"] = format_double(seconds_since(start));
    AttributionReport report{"loo", loo.scores, std::nullopt, std::nullopt, meta};
    const auto path = config.output_dir / "report_loo.json";
    write_report(report, path);
    write_manifest(config, "loo", {path});
    out << "full_outcome " << format_double(loo.full_outcome) << "\n";
    for (std::size_t k = 0; k < ctx.bundle.task_count(); ++k)
        out << ctx.bundle.tasks[k].name << " " << format_double(loo.scores[static_cast<Eigen::Index>(k)]) << "\n";
    out << "wrote " << path.string() << "\n";
    return report;
}

std::vector<EvaluateRow> run_evaluate(const PipelineConfig& config, const std::vector<fs::path>& report_paths,
                                      std::size_t jobs, std::ostream& out) {
    if (report_paths.empty()) throw ConfigError("evaluate: no report paths given");
    std::vector<AttributionReport> reports;
    for (const auto& p : report_paths) {
        if (!fs::exists(p)) throw ConfigError("evaluate: report not found: " + p.string());
        reports.push_back(report_from_json(json::parse(read_text(p))));
    }
    const auto ctx = make_context(config);
    const std::size_t K = ctx.bundle.task_count();
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto it = reports[i].metadata.find("bundle_hash");
        if (it == reports[i].metadata.end() || it->second != ctx.bundle_hash)
            throw ConfigError("evaluate: bundle hash of " + report_paths[i].string() + " does not match the config");
        reports[i].validate(K);
    }

    Oracle oracle(ctx.bundle, ctx.spec, config.trainer, cache_dir(config));
    const auto holdout = build_surrogate_dataset(oracle, holdout_subsets(config, K, nullptr), OutcomeSource{}, jobs);

    Eigen::VectorXd loo;
    for (const auto& r : reports)
        if (r.method == "loo") loo = r.scores;
    if (loo.size() == 0) loo = loo_scores(oracle, jobs).scores;

    std::vector<EvaluateRow> rows;
    for (std::size_t i = 0; i < reports.size(); ++i) {
        const auto& r = reports[i];
        EvaluateRow row;
        row.method = r.method;
        const auto surrogate_it = r.metadata.find("surrogate_path");
        const auto orient_it = r.metadata.find("orientation");
        const double sign = orient_it != r.metadata.end() ? parse_double(orient_it->second) : 1.0;
        if (surrogate_it != r.metadata.end()) {
            const auto path = report_paths[i].parent_path() / surrogate_it->second;
            row.lds = lds(surrogate_from_json(json::parse(read_text(path))), holdout);
        } else {
            row.lds = lds(Eigen::VectorXd(sign * r.scores), holdout);
        }
        row.pearson_vs_loo = pearson(sign * r.scores, loo);
        const auto rt = r.metadata.find("runtime_seconds");
        row.runtime_seconds = rt != r.metadata.end() ? parse_double(rt->second) : std::nan("");
        rows.push_back(row);
    }

    std::string table = "method,lds,pearson_vs_loo,runtime_seconds,config_hash,seed\n";
    for (const auto& row : rows)
        table += csv_field(row.method) + "," + format_double(row.lds) + "," + format_double(row.pearson_vs_loo) + "," +
                 format_double(row.runtime_seconds) + "," + config.config_hash + "," + std::to_string(config.seed) + "\n";
    std::string scores = "task,name";
    for (const auto& r : reports) scores += "," + csv_field(r.method);
    scores += ",loo,config_hash,seed\n";
    for (std::size_t k = 0; k < K; ++k) {
        scores += std::to_string(k) + "," + csv_field(ctx.bundle.tasks[k].name);
        for (const auto& r : reports) scores += "," + format_double(r.scores[static_cast<Eigen::Index>(k)]);
        scores += "," + format_double(loo[static_cast<Eigen::Index>(k)]) + "," + config.config_hash + "," +
                  std::to_string(config.seed) + "\n";
    }
    const auto table_path = config.output_dir / "comparison.csv";
    const auto scores_path = config.output_dir / "scores.csv";
    write_text_atomic(table_path, table);
    write_text_atomic(scores_path, scores);
    write_manifest(config, "evaluate", {table_path, scores_path});
    out << table;
    return rows;
}

TheoryResult run_verify_theory(const PipelineConfig& config, std::size_t jobs, std::ostream& out) {
    const auto& t = config.theory;
    try {
        const std::size_t K = t.value("K", std::size_t{10});
        const double p = t.value("p", 0.5);
        const auto ms = t.value("m", std::vector<std::size_t>{500, 5000, 50000});
        const std::size_t replicates = t.value("replicates", std::size_t{10});
        if (replicates < 1 || ms.empty()) throw ConfigError("theory: need m values and replicates >= 1");
        const std::uint64_t seed = seed_or(t, config.seed, theory_slot);
        const auto gt = random_quadratic(K, derive_seed(seed, 0), t.value("f0", 0.0));

        TheoryResult result;
        const auto closed = closed_form_slope(gt, p);
        const auto residual = residual_formula(gt, p);
        result.beta_closed_norm = closed.norm();
        result.predicted_alpha = residual.predicted_alpha;
        result.predicted_min_mse = residual.predicted_min_mse;
        for (std::size_t mi = 0; mi < ms.size(); ++mi) {
            std::vector<SlopeReport> reps(replicates);
            parallel_for(replicates, jobs, [&](std::size_t r) {
                reps[r] = verify_closed_form(gt, p, ms[mi], derive_seed(seed, 1 + mi * replicates + r));
            });
            TheoryRow row;
            row.m = ms[mi];
            double sq = 0.0;
            for (const auto& r : reps) {
                sq += r.l2_gap * r.l2_gap;
                row.empirical_mse += r.residual_mse;
            }
            row.mean_gap = std::sqrt(sq / static_cast<double>(replicates));
            row.empirical_mse /= static_cast<double>(replicates);
            row.sampling_band = reps.front().sampling_band;
            row.band_constant = row.sampling_band > 0.0 ? row.mean_gap / row.sampling_band : 0.0;
            row.predicted_mse = residual.predicted_min_mse;
            result.rows.push_back(row);
        }
        std::string csv = "K,p,m,replicates,rms_l2_gap,sampling_band,band_constant,empirical_mse,predicted_min_mse,"
                          "predicted_alpha,config_hash,seed\n";
        for (const auto& row : result.rows)
            csv += std::to_string(K) + "," + format_double(p) + "," + std::to_string(row.m) + "," +
                   std::to_string(replicates) + "," + format_double(row.mean_gap) + "," +
                   format_double(row.sampling_band) + "," + format_double(row.band_constant) + "," +
                   format_double(row.empirical_mse) + "," + format_double(row.predicted_mse) + "," +
                   format_double(result.predicted_alpha) + "," + config.config_hash + "," +
                   std::to_string(config.seed) + "\n";
        const auto path = config.output_dir / "theory.csv";
        write_text_atomic(path, csv);
        write_manifest(config, "verify-theory", {path});
        out << csv;
        return result;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("theory: ") + e.what());
    }
}

}  // namespace taskattr
