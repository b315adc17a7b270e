// Command-line front end: taskattr <command> --config FILE [--jobs N] [--seed S]

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "taskattr/errors.hpp"
#include "taskattr/log.hpp"
#include "taskattr/parallel.hpp"
#include "taskattr/pipeline.hpp"

namespace {

constexpr int kExitNumeric = 1;
constexpr int kExitConfig = 2;

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Task attribution with linear and kernel surrogate models"};
    app.require_subcommand(1);

    std::string config_path;
    std::size_t jobs = taskattr::default_jobs();
    std::optional<std::uint64_t> seed;
    bool quiet = false;
    bool verbose = false;
    std::vector<std::string> report_paths;

    auto add_common = [&](CLI::App* cmd) {
        cmd->add_option("--config", config_path, "pipeline configuration (JSON)")->required();
        cmd->add_option("--jobs", jobs, "worker threads")->check(CLI::PositiveNumber);
        cmd->add_option("--seed", seed, "override the master seed");
        cmd->add_flag("--quiet", quiet, "only print warnings");
        cmd->add_flag("--verbose", verbose, "print debug messages");
    };
    auto* generate = app.add_subcommand("generate", "write the task bundle JSON");
    auto* attribute = app.add_subcommand("attribute", "sample subsets, fit a surrogate and write attribution reports");
    auto* evaluate = app.add_subcommand("evaluate", "compare reports by LDS and Pearson against LOO");
    auto* loo = app.add_subcommand("loo", "leave-one-out ground truth by K + 1 retrainings");
    auto* theory = app.add_subcommand("verify-theory", "closed-form OLS slope and residual checks on a quadratic");
    for (auto* cmd : {generate, attribute, evaluate, loo, theory}) add_common(cmd);
    evaluate->add_option("reports", report_paths, "report JSON files")->required();

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : kExitConfig;
    }
    if (quiet) taskattr::log::set_level(taskattr::log::Level::warn);
    if (verbose) taskattr::log::set_level(taskattr::log::Level::debug);

    try {
        const auto config = taskattr::load_config(config_path, seed);
        if (generate->parsed()) {
            taskattr::run_generate(config, std::cout);
        } else if (attribute->parsed()) {
            taskattr::run_attribute(config, jobs, std::cout);
        } else if (evaluate->parsed()) {
            std::vector<std::filesystem::path> paths(report_paths.begin(), report_paths.end());
            taskattr::run_evaluate(config, paths, jobs, std::cout);
        } else if (loo->parsed()) {
            taskattr::run_loo(config, jobs, std::cout);
        } else if (theory->parsed()) {
            taskattr::run_verify_theory(config, jobs, std::cout);
        }
    } catch (const taskattr::ConfigError& e) {
        std::cerr << "taskattr: configuration error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const taskattr::NumericError& e) {
        std::cerr << "taskattr: numeric failure: " << e.what() << '\n';
        return kExitNumeric;
    } catch (const std::filesystem::filesystem_error& e) {
        std::cerr << "taskattr: file error: " << e.what() << '\n';
        return kExitConfig;
    } catch (const std::exception& e) {
        std::cerr << "taskattr: " << e.what() << '\n';
        return kExitNumeric;
    }
    return 0;
}
