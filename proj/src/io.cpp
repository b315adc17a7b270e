#include "taskattr/io.hpp"

#include <cerrno>
#include <charconv>
#include <cstdio>
#include <fstream>
#include <sstream>
#include <thread>

#include "taskattr/errors.hpp"

namespace taskattr {

using nlohmann::json;

std::string format_double(double value) {
    if (std::isnan(value)) return "nan";
    if (std::isinf(value)) return value > 0 ? "inf" : "-inf";
    char buf[32];
    std::snprintf(buf, sizeof buf, "%.17g", value);
    return buf;
}

double parse_double(std::string_view text) {
    while (!text.empty() && (text.front() == ' ' || text.front() == '\t')) text.remove_prefix(1);
    while (!text.empty() && (text.back() == ' ' || text.back() == '\t' || text.back() == '\r')) text.remove_suffix(1);
    if (text == "nan") return std::numeric_limits<double>::quiet_NaN();
    if (text == "inf") return std::numeric_limits<double>::infinity();
    if (text == "-inf") return -std::numeric_limits<double>::infinity();
    double value = 0.0;
    const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
    if (ec != std::errc() || end != text.data() + text.size())
        throw ConfigError("not a number: '" + std::string(text) + "'");
    return value;
}

std::uint64_t fnv1a64(std::string_view data) {
    std::uint64_t h = 0xcbf29ce484222325ULL;
    for (const char c : data) {
        h ^= static_cast<unsigned char>(c);
        h *= 0x100000001b3ULL;
    }
    return h;
}

std::string hex64(std::uint64_t value) {
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(value));
    return buf;
}

std::string content_hash(std::string_view data) { return hex64(fnv1a64(data)); }

std::string read_text(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw ConfigError("cannot open " + path.string());
    std::ostringstream buf;
    buf << in.rdbuf();
    return buf.str();
}

void write_text_atomic(const std::filesystem::path& path, std::string_view text) {
    if (path.has_parent_path()) std::filesystem::create_directories(path.parent_path());
    const auto tid = std::hash<std::thread::id>{}(std::this_thread::get_id());
    auto tmp = path;
    tmp += ".tmp" + hex64(tid);
    {
        std::ofstream out(tmp, std::ios::binary | std::ios::trunc);
        if (!out) throw ConfigError("cannot write " + tmp.string());
        out.write(text.data(), static_cast<std::streamsize>(text.size()));
        if (!out) throw ConfigError("write failed for " + tmp.string());
    }
    std::filesystem::rename(tmp, path);
}

std::vector<std::vector<std::string>> parse_csv(std::string_view text) {
    std::vector<std::vector<std::string>> rows;
    std::vector<std::string> row;
    std::string field;
    bool quoted = false;
    bool any = false;
    for (std::size_t i = 0; i < text.size(); ++i) {
        const char c = text[i];
        if (quoted) {
            if (c == '"') {
                if (i + 1 < text.size() && text[i + 1] == '"') {
                    field += '"';
                    ++i;
                } else {
                    quoted = false;
                }
            } else {
                field += c;
            }
            continue;
        }
        if (c == '"') {
            quoted = true;
            any = true;
        } else if (c == ',') {
            row.push_back(std::move(field));
            field.clear();
            any = true;
        } else if (c == '\n' || c == '\r') {
            if (c == '\r' && i + 1 < text.size() && text[i + 1] == '\n') ++i;
            if (any || !field.empty()) {
                row.push_back(std::move(field));
                rows.push_back(std::move(row));
            }
            row.clear();
            field.clear();
            any = false;
        } else {
            field += c;
            any = true;
        }
    }
    if (quoted) throw ConfigError("csv: unterminated quoted field");
    if (any || !field.empty()) {
        row.push_back(std::move(field));
        rows.push_back(std::move(row));
    }
    return rows;
}

std::vector<std::vector<std::string>> read_csv(const std::filesystem::path& path) {
    return parse_csv(read_text(path));
}

std::string csv_field(std::string_view field) {
    if (field.find_first_of(",\"\r\n") == std::string_view::npos) return std::string(field);
    std::string out = "\"";
    for (const char c : field) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

namespace {

json vector_json(const Eigen::VectorXd& v) {
    json arr = json::array();
    for (Eigen::Index i = 0; i < v.size(); ++i) arr.push_back(v[i]);
    return arr;
}

Eigen::VectorXd vector_from(const json& arr) {
    if (!arr.is_array()) throw ConfigError("expected a numeric array");
    Eigen::VectorXd v(static_cast<Eigen::Index>(arr.size()));
    for (std::size_t i = 0; i < arr.size(); ++i) v[static_cast<Eigen::Index>(i)] = arr[i].get<double>();
    return v;
}

json samples_json(const std::vector<Sample>& samples) {
    json arr = json::array();
    for (const auto& s : samples) arr.push_back(json::array({vector_json(s.features), s.label}));
    return arr;
}

std::vector<Sample> samples_from(const json& arr) {
    std::vector<Sample> out;
    for (const auto& item : arr) {
        if (!item.is_array() || item.size() != 2) throw ConfigError("bundle: sample must be [features, label]");
        out.push_back({vector_from(item[0]), item[1].get<int>()});
    }
    return out;
}

void dump_into(const json& doc, std::string& out, int indent) {
    const std::string pad(static_cast<std::size_t>(indent + 2), ' ');
    switch (doc.type()) {
        case json::value_t::number_float:
            out += format_double(doc.get<double>());
            return;
        case json::value_t::object: {
            if (doc.empty()) {
                out += "{}";
                return;
            }
            out += "{\n";
            bool first = true;
            for (auto it = doc.begin(); it != doc.end(); ++it) {
                if (!first) out += ",\n";
                first = false;
                out += pad + json(it.key()).dump() + ": ";
                dump_into(it.value(), out, indent + 2);
            }
            out += "\n" + std::string(static_cast<std::size_t>(indent), ' ') + "}";
            return;
        }
        case json::value_t::array: {
            // Arrays of scalars stay on one line.
            bool flat = true;
            for (const auto& v : doc) flat = flat && !v.is_structured();
            if (doc.empty()) {
                out += "[]";
                return;
            }
            out += flat ? "[" : "[\n";
            bool first = true;
            for (const auto& v : doc) {
                if (!first) out += flat ? ", " : ",\n";
                first = false;
                if (!flat) out += pad;
                dump_into(v, out, indent + 2);
            }
            out += flat ? "]" : "\n" + std::string(static_cast<std::size_t>(indent), ' ') + "]";
            return;
        }
        default:
            out += doc.dump();
    }
}

}  // namespace

std::string dump_json(const json& doc) {
    std::string out;
    dump_into(doc, out, 0);
    out += '\n';
    return out;
}

json to_json(const TaskBundle& bundle) {
    json tasks = json::array();
    for (const auto& t : bundle.tasks) tasks.push_back({{"name", t.name}, {"samples", samples_json(t.samples)}});
    return {{"tasks", tasks},
            {"test", samples_json(bundle.test)},
            {"metric", std::string(to_string(bundle.metric))},
            {"class_count", bundle.class_count}};
}

TaskBundle bundle_from_json(const json& doc) {
    try {
        TaskBundle bundle;
        for (const auto& t : doc.at("tasks"))
            bundle.tasks.push_back({t.at("name").get<std::string>(), samples_from(t.at("samples"))});
        bundle.test = samples_from(doc.at("test"));
        bundle.metric = parse_metric(doc.value("metric", std::string("mean_test_loss")));
        if (doc.contains("class_count")) {
            bundle.class_count = doc.at("class_count").get<int>();
        } else {
            int top = 0;
            for (const auto& t : bundle.tasks)
                for (const auto& s : t.samples) top = std::max(top, s.label);
            for (const auto& s : bundle.test) top = std::max(top, s.label);
            bundle.class_count = std::max(2, top + 1);
        }
        bundle.validate();
        return bundle;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("bundle JSON: ") + e.what());
    }
}

json to_json(const ModelSpec& spec) {
    return {{"kind", std::string(to_string(spec.kind))},
            {"input_dim", spec.input_dim},
            {"hidden_dim", spec.hidden_dim},
            {"class_count", spec.class_count},
            {"l2_penalty", spec.l2_penalty}};
}

ModelSpec model_spec_from_json(const json& doc) {
    try {
        ModelSpec spec;
        spec.kind = parse_model_kind(doc.at("kind").get<std::string>());
        spec.input_dim = doc.at("input_dim").get<std::size_t>();
        spec.hidden_dim = doc.value("hidden_dim", std::size_t{0});
        spec.class_count = doc.at("class_count").get<std::size_t>();
        spec.l2_penalty = doc.value("l2_penalty", 0.0);
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("model spec JSON: ") + e.what());
    }
}

json to_json(const TrainerConfig& trainer) {
    return {{"step_size", trainer.step_size},
            {"iterations", trainer.iterations},
            {"seed", trainer.seed},
            {"init_scale", trainer.init_scale},
            {"zero_init", trainer.zero_init},
            {"checkpoint_interval", trainer.checkpoint_interval}};
}

TrainerConfig trainer_from_json(const json& doc) {
    try {
        TrainerConfig t;
        t.step_size = doc.value("step_size", t.step_size);
        t.iterations = doc.value("iterations", t.iterations);
        t.seed = doc.value("seed", t.seed);
        t.init_scale = doc.value("init_scale", t.init_scale);
        t.zero_init = doc.value("zero_init", t.zero_init);
        t.checkpoint_interval = doc.value("checkpoint_interval", t.checkpoint_interval);
        t.validate();
        return t;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("trainer JSON: ") + e.what());
    }
}

json to_json(const ModelParams& params) { return {{"spec", to_json(params.spec)}, {"flat", vector_json(params.flat)}}; }

ModelParams params_from_json(const json& doc) {
    try {
        ModelParams p{model_spec_from_json(doc.at("spec")), vector_from(doc.at("flat"))};
        if (p.size() != p.spec.parameter_count()) throw ConfigError("params JSON: flat length does not match spec");
        return p;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("params JSON: ") + e.what());
    }
}

json to_json(const KernelSpec& spec) {
    if (spec.kind == KernelSpec::Kind::rbf) return {{"kind", "rbf"}, {"gamma", spec.gamma}};
    return {{"kind", "polynomial"}, {"degree", spec.degree}, {"c", spec.c}};
}

KernelSpec kernel_spec_from_json(const json& doc) {
    try {
        const auto kind = doc.at("kind").get<std::string>();
        KernelSpec spec;
        if (kind == "rbf") {
            spec = KernelSpec::rbf(doc.at("gamma").get<double>());
        } else if (kind == "polynomial" || kind == "poly") {
            spec = KernelSpec::polynomial(doc.at("degree").get<int>(), doc.value("c", 0.0));
        } else {
            throw ConfigError("unknown kernel kind '" + kind + "'");
        }
        spec.validate();
        return spec;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("kernel JSON: ") + e.what());
    }
}

json to_json(const Surrogate& model) {
    if (const auto* lin = std::get_if<LinearSurrogate>(&model))
        return {{"kind", "linear"}, {"alpha", lin->alpha}, {"beta", vector_json(lin->beta)}};
    const auto& k = std::get<KernelSurrogate>(model);
    json anchors = json::array();
    for (const auto& a : k.anchors) anchors.push_back(a.to_string());
    return {{"kind", "kernel"},   {"spec", to_json(k.spec)},         {"lambda", k.lambda},
            {"anchors", anchors}, {"theta", vector_json(k.theta)}, {"jitter", k.jitter}};
}

Surrogate surrogate_from_json(const json& doc) {
    try {
        const auto kind = doc.value("kind", std::string(doc.contains("alpha") ? "linear" : "kernel"));
        if (kind == "linear") return LinearSurrogate{doc.at("alpha").get<double>(), vector_from(doc.at("beta"))};
        KernelSurrogate k;
        k.spec = kernel_spec_from_json(doc.at("spec"));
        k.lambda = doc.at("lambda").get<double>();
        for (const auto& a : doc.at("anchors")) k.anchors.push_back(SubsetVector::parse(a.get<std::string>()));
        k.theta = vector_from(doc.at("theta"));
        k.jitter = doc.value("jitter", 0.0);
        if (static_cast<std::size_t>(k.theta.size()) != k.anchors.size())
            throw ConfigError("kernel surrogate JSON: theta and anchors differ in length");
        return k;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("surrogate JSON: ") + e.what());
    }
}

std::string dataset_to_csv(const SurrogateDataset& data) {
    std::string out;
    for (std::size_t k = 0; k < data.task_count; ++k) out += "s_" + std::to_string(k) + ",";
    out += "outcome,provenance\n";
    for (const auto& e : data.entries) {
        for (std::size_t k = 0; k < e.s.size(); ++k) out += e.s[k] ? "1," : "0,";
        out += format_double(e.outcome) + "," + std::string(to_string(e.provenance)) + "\n";
    }
    return out;
}

SurrogateDataset dataset_from_csv(std::string_view text, Metric metric) {
    const auto rows = parse_csv(text);
    if (rows.empty() || rows[0].size() < 3) throw ConfigError("dataset CSV: missing header");
    SurrogateDataset data;
    data.metric = metric;
    data.task_count = rows[0].size() - 2;
    for (std::size_t r = 1; r < rows.size(); ++r) {
        const auto& row = rows[r];
        if (row.size() != data.task_count + 2) throw ConfigError("dataset CSV: bad row width at line " + std::to_string(r + 1));
        std::string bits;
        for (std::size_t k = 0; k < data.task_count; ++k) bits += row[k];
        data.entries.push_back({SubsetVector::parse(bits), parse_double(row[data.task_count]),
                                parse_provenance(row[data.task_count + 1])});
    }
    data.validate();
    return data;
}

}  // namespace taskattr
