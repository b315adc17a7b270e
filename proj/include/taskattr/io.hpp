#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include <nlohmann/json.hpp>

#include "taskattr/models.hpp"
#include "taskattr/oracle.hpp"
#include "taskattr/surrogate.hpp"
#include "taskattr/tasks.hpp"

namespace taskattr {

/// Shortest round-trip form is not used; every float is written with 17
/// significant digits so files are byte-stable across runs.
std::string format_double(double value);
double parse_double(std::string_view text);

std::uint64_t fnv1a64(std::string_view data);
std::string hex64(std::uint64_t value);
/// hex64(fnv1a64(data)).
std::string content_hash(std::string_view data);

std::string read_text(const std::filesystem::path& path);
/// Writes to a sibling temp file and renames it into place.
void write_text_atomic(const std::filesystem::path& path, std::string_view text);

/// RFC-4180 reader: quoted fields, doubled quotes, CRLF tolerated.
std::vector<std::vector<std::string>> parse_csv(std::string_view text);
std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path);
std::string csv_field(std::string_view field);

nlohmann::json to_json(const TaskBundle& bundle);
TaskBundle bundle_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const ModelSpec& spec);
ModelSpec model_spec_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const TrainerConfig& trainer);
TrainerConfig trainer_from_json(const nlohmann::json& doc);

/// {"spec":..., "flat":[...]}.
nlohmann::json to_json(const ModelParams& params);
ModelParams params_from_json(const nlohmann::json& doc);

nlohmann::json to_json(const KernelSpec& spec);
KernelSpec kernel_spec_from_json(const nlohmann::json& doc);

/// linear: {"kind":"linear","alpha","beta"}; kernel: {"kind":"kernel","spec",
/// "lambda","anchors","theta","jitter"}.
nlohmann::json to_json(const Surrogate& model);
Surrogate surrogate_from_json(const nlohmann::json& doc);

/// Header s_0..s_{K-1},outcome,provenance.
std::string dataset_to_csv(const SurrogateDataset& data);
SurrogateDataset dataset_from_csv(std::string_view text, Metric metric = Metric::mean_test_loss);

/// JSON text with exact floats: numbers are emitted through format_double.
std::string dump_json(const nlohmann::json& doc);

}  // namespace taskattr
