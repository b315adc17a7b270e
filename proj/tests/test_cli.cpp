#include <doctest.h>

#include <sys/wait.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <regex>
#include <string>

#include <nlohmann/json.hpp>

#include "taskattr/analysis.hpp"
#include "taskattr/io.hpp"

using namespace taskattr;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

std::string cli() {
    const char* path = std::getenv("TASKATTR_CLI");
    REQUIRE_MESSAGE(path != nullptr, "TASKATTR_CLI is not set");
    return path;
}

int run(const std::string& args, const std::string& env = {}) {
    const int status = std::system((env + " " + cli() + " " + args + " >/dev/null 2>&1").c_str());
    REQUIRE(WIFEXITED(status));
    return WEXITSTATUS(status);
}

fs::path workspace(const std::string& name) {
    const auto dir = fs::temp_directory_path() / ("taskattr_cli_" + name);
    fs::remove_all(dir);
    fs::create_directories(dir);
    return dir;
}

fs::path write_config(const fs::path& dir, const std::string& name, json doc) {
    const auto path = dir / name;
    std::ofstream(path) << doc.dump(2);
    return path;
}

json gaussian_config(const std::string& out) {
    return {
        {"seed", 5},
        {"bundle", {{"generator", "gaussian"}, {"task_count", 6}, {"samples_per_task", 12}, {"test_samples", 60},
                    {"feature_dim", 4}, {"class_count", 3}, {"label_noise", 0.2}}},
        {"model", {{"kind", "logreg"}, {"l2_penalty", 5e-2}}},
        {"trainer", {{"step_size", 1.0}, {"iterations", 400}, {"zero_init", true}}},
        {"sampling", {{"mode", "bernoulli"}, {"p", 0.5}, {"m", 60}}},
        {"eval_split", 0.25},
        {"surrogate", {{"kind", "kernel"}, {"lambda", "cv"}}},
        {"ensemble", {{"mode", "bernoulli"}, {"p", 0.5}, {"m", 2000}}},
        {"baselines", {"influence", "tracin", "trak"}},
        {"trak", {{"members", 2}, {"k", 10}}},
        {"output_dir", out},
    };
}

/// File contents with runtime measurements blanked out.
std::string stable_text(const fs::path& path) {
    static const std::regex runtime(R"("runtime_seconds":\s*"[^"]*")");
    std::string text = std::regex_replace(read_text(path), runtime, "\"runtime_seconds\":\"\"");
    if (path.filename() == "comparison.csv") {
        const auto rows = parse_csv(text);
        text.clear();
        for (const auto& row : rows) {
            for (std::size_t i = 0; i < row.size(); ++i)
                if (i != 3) text += row[i] + ",";
            text += "\n";
        }
    }
    return text;
}

}  // namespace

TEST_CASE("generate writes a reproducible modular bundle") {
    const auto dir = workspace("generate");
    const json doc = {{"seed", 3},
                      {"bundle", {{"generator", "modular"}, {"prime", 29}, {"groups", 2}, {"op", "addition"}}},
                      {"output_dir", "out"}};
    const auto config = write_config(dir, "config.json", doc);
    REQUIRE(run("generate --config " + config.string()) == 0);
    const auto bundle_path = dir / "out" / "bundle.json";
    const auto first = read_text(bundle_path);
    const auto bundle = bundle_from_json(json::parse(first));
    CHECK(bundle.task_count() == 4);
    std::size_t total = bundle.test.size();
    for (const auto& t : bundle.tasks) total += t.samples.size();
    CHECK(total == 841);
    CHECK(json::parse(first).at("meta").at("seed") == 3);

    REQUIRE(run("generate --config " + config.string()) == 0);
    CHECK(read_text(bundle_path) == first);
    REQUIRE(run("generate --seed 4 --config " + config.string()) == 0);
    CHECK(read_text(bundle_path) != first);
    fs::remove_all(dir);
}

TEST_CASE("configuration errors exit with code 2") {
    const auto dir = workspace("errors");
    const auto bad = write_config(dir, "bad.json", {{"bundle", {{"generator", "spiral"}}}, {"output_dir", "out"}});
    CHECK(run("generate --config " + bad.string()) == 2);
    CHECK(run("generate --config " + (dir / "absent.json").string()) == 2);
    CHECK(run("generate") == 2);
    CHECK(run("frobnicate --config " + bad.string()) == 2);
    const auto split = write_config(dir, "split.json", {{"bundle", {{"generator", "gaussian"}}}, {"eval_split", 1.5}});
    CHECK(run("attribute --config " + split.string()) == 2);

    const auto good = write_config(dir, "good.json", gaussian_config("out"));
    CHECK(run("evaluate --config " + good.string() + " " + (dir / "missing.json").string()) == 2);
    fs::remove_all(dir);
}

TEST_CASE("attribute, loo and evaluate") {
    const auto dir = workspace("pipeline");
    const auto config = write_config(dir, "config.json", gaussian_config("out"));
    REQUIRE(run("attribute --jobs 1 --config " + config.string()) == 0);
    REQUIRE(run("loo --jobs 1 --config " + config.string()) == 0);
    const auto out = dir / "out";
    for (const auto* name : {"dataset.csv", "holdout.csv", "cv_table.csv", "surrogate_ksm.json", "report_ksm.json",
                             "report_influence.json", "report_tracin.json", "report_trak.json", "report_loo.json",
                             "manifest_attribute.json", "manifest_loo.json"})
        CHECK_MESSAGE(fs::exists(out / name), name);

    const auto ksm = report_from_json(json::parse(read_text(out / "report_ksm.json")));
    CHECK(ksm.metadata.at("cv_table") == "cv_table.csv");
    CHECK(ksm.metadata.count("gamma") == 1);
    CHECK(ksm.metadata.count("lambda") == 1);
    CHECK(ksm.metadata.at("seed") == "5");
    CHECK(ksm.lds.has_value());

    const auto loo = out / "report_loo.json";
    REQUIRE(run("evaluate --config " + config.string() + " " + loo.string()) == 0);
    const auto rows = read_csv(out / "comparison.csv");
    REQUIRE(rows.size() == 2);
    CHECK(rows[0] == std::vector<std::string>{"method", "lds", "pearson_vs_loo", "runtime_seconds", "config_hash", "seed"});
    CHECK(rows[1][0] == "loo");
    CHECK(parse_double(rows[1][2]) == doctest::Approx(1.0).epsilon(1e-12));

    std::string all_reports;
    for (const auto* m : {"ksm", "influence", "tracin", "trak", "loo"}) all_reports += " " + (out / ("report_" + std::string(m) + ".json")).string();
    REQUIRE(run("evaluate --config " + config.string() + all_reports) == 0);
    const auto table = read_csv(out / "comparison.csv");
    CHECK(table.size() == 6);
    const auto scores = read_csv(out / "scores.csv");
    CHECK(scores.size() == 7);
    CHECK(scores[0][0] == "task");

    // A different seed builds a different bundle.
    CHECK(run("evaluate --seed 6 --config " + config.string() + " " + loo.string()) == 2);
    fs::remove_all(dir);
}

TEST_CASE("outputs do not depend on the worker count") {
    const auto dir = workspace("jobs");
    auto doc = gaussian_config("serial");
    doc["model"] = {{"kind", "mlp2"}, {"hidden_dim", 4}, {"l2_penalty", 1e-2}};
    doc["trainer"] = {{"step_size", 0.5}, {"iterations", 100}};
    doc["outcome"] = {{"source", "gradex"}, {"k", 16}};
    doc["hessian_trace"] = {{"probes", 20}};
    // One config for both runs, so the config hash matches; outputs are redirected.
    const auto config = write_config(dir, "config.json", doc);
    for (const auto& [target, jobs] : {std::pair{"serial", 1}, std::pair{"parallel", 8}}) {
        const auto env = "TASKATTRIB_OUT=" + (dir / target).string();
        REQUIRE(run("attribute --jobs " + std::to_string(jobs) + " --config " + config.string(), env) == 0);
        REQUIRE(run("loo --jobs " + std::to_string(jobs) + " --config " + config.string(), env) == 0);
    }
    std::size_t compared = 0;
    for (const auto& entry : fs::directory_iterator(dir / "serial")) {
        if (!entry.is_regular_file()) continue;
        const auto name = entry.path().filename();
        if (name.string().rfind("manifest_", 0) == 0) continue;
        REQUIRE(fs::exists(dir / "parallel" / name));
        CHECK_MESSAGE(stable_text(entry.path()) == stable_text(dir / "parallel" / name), name.string());
        ++compared;
    }
    CHECK(compared >= 8);
    fs::remove_all(dir);
}

TEST_CASE("linear surrogate scores follow the fitted slopes") {
    const auto dir = workspace("linear");
    auto doc = gaussian_config("out");
    doc["surrogate"] = {{"kind", "linear"}};
    doc["ensemble"] = {{"mode", "bernoulli"}, {"p", 0.5}, {"m", 20000}};
    doc.erase("baselines");
    const auto config = write_config(dir, "config.json", doc);
    REQUIRE(run("attribute --config " + config.string()) == 0);
    const auto report = report_from_json(json::parse(read_text(dir / "out" / "report_linear.json")));
    const auto model = std::get<LinearSurrogate>(surrogate_from_json(json::parse(read_text(dir / "out" / "surrogate_linear.json"))));
    CHECK(average_ranks(report.scores) == average_ranks(model.beta));
    fs::remove_all(dir);
}

TEST_CASE("retrained and linearized outcomes give similar LDS") {
    const auto dir = workspace("gradex");
    auto doc = gaussian_config("retrain");
    doc["surrogate"] = {{"kind", "linear"}};
    doc["sampling"] = {{"mode", "bernoulli"}, {"p", 0.5}, {"m", 100}};
    doc["trainer"] = {{"step_size", 1.0}, {"iterations", 2000}, {"zero_init", true}};
    doc.erase("baselines");
    const auto retrain = write_config(dir, "retrain.json", doc);
    doc["outcome"] = {{"source", "gradex"}};
    doc["output_dir"] = "gradex";
    const auto gradex = write_config(dir, "gradex.json", doc);
    REQUIRE(run("attribute --config " + retrain.string()) == 0);
    REQUIRE(run("attribute --config " + gradex.string()) == 0);
    const auto a = report_from_json(json::parse(read_text(dir / "retrain" / "report_linear.json")));
    const auto b = report_from_json(json::parse(read_text(dir / "gradex" / "report_linear.json")));
    CHECK(std::abs(*a.lds - *b.lds) < 0.05);
    CHECK(parse_double(b.metadata.at("approximation_error")) < 1e-10);
    fs::remove_all(dir);
}

TEST_CASE("verify-theory writes the theory table") {
    const auto dir = workspace("theory");
    const json doc = {{"seed", 2},
                      {"bundle", {{"generator", "gaussian"}}},
                      {"theory", {{"K", 5}, {"p", 0.5}, {"m", {200, 2000}}, {"replicates", 3}}},
                      {"output_dir", "out"}};
    const auto config = write_config(dir, "config.json", doc);
    REQUIRE(run("verify-theory --config " + config.string()) == 0);
    const auto rows = read_csv(dir / "out" / "theory.csv");
    REQUIRE(rows.size() == 3);
    CHECK(rows[0][2] == "m");
    CHECK(rows[0][4] == "rms_l2_gap");
    CHECK(parse_double(rows[2][4]) < parse_double(rows[1][4]));
    fs::remove_all(dir);
}
