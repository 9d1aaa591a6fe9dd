#include "mcmkd/config.hpp"

#include <charconv>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <ctime>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "json.hpp"
#include "mcmkd/archive.hpp"
#include "mcmkd/errors.hpp"
#include "mcmkd/task.hpp"

namespace mcmkd {

namespace {

enum class FieldType { kSize, kDouble, kString, kDoubleList, kU64List };

struct Field {
    const char* key;
    FieldType type;
    void* ptr;
};

/// Registry order is the canonical serialization order.
std::vector<Field> fields(ExperimentConfig& cfg) {
    return {
        {"patch", FieldType::kSize, &cfg.patch},
        {"window", FieldType::kSize, &cfg.window},
        {"grid_h", FieldType::kSize, &cfg.grid_h},
        {"grid_w", FieldType::kSize, &cfg.grid_w},
        {"channels", FieldType::kSize, &cfg.channels},
        {"n_slides", FieldType::kSize, &cfg.n_slides},
        {"class_balance", FieldType::kDouble, &cfg.class_balance},
        {"lesion_rate", FieldType::kDouble, &cfg.lesion_rate},
        {"noise_sigma", FieldType::kDouble, &cfg.noise_sigma},
        {"tissue_min_fraction", FieldType::kDouble, &cfg.tissue_min_fraction},
        {"lesion_dot_delta", FieldType::kDouble, &cfg.lesion_dot_delta},
        {"d_f", FieldType::kSize, &cfg.d_f},
        {"d_t", FieldType::kSize, &cfg.d_t},
        {"student_sigma", FieldType::kDouble, &cfg.student_sigma},
        {"teacher_sigma", FieldType::kDouble, &cfg.teacher_sigma},
        {"pretrain_samples", FieldType::kSize, &cfg.pretrain_samples},
        {"pretrain_holdout", FieldType::kSize, &cfg.pretrain_holdout},
        {"pretrain_batch", FieldType::kSize, &cfg.pretrain_batch},
        {"pretrain_max_epochs", FieldType::kSize, &cfg.pretrain_max_epochs},
        {"teacher_budget_multiplier", FieldType::kSize, &cfg.teacher_budget_multiplier},
        {"pretrain_lr", FieldType::kDouble, &cfg.pretrain_lr},
        {"tf_layers", FieldType::kSize, &cfg.tf_layers},
        {"tf_heads", FieldType::kSize, &cfg.tf_heads},
        {"tf_mlp_hidden", FieldType::kSize, &cfg.tf_mlp_hidden},
        {"predictor_hidden", FieldType::kSize, &cfg.predictor_hidden},
        {"mask_ratio", FieldType::kDouble, &cfg.mask_ratio},
        {"variant", FieldType::kString, &cfg.variant},
        {"ema_tau", FieldType::kDouble, &cfg.ema_tau},
        {"ft_lr", FieldType::kDouble, &cfg.ft_lr},
        {"ft_lrs", FieldType::kDoubleList, &cfg.ft_lrs},
        {"ft_batch", FieldType::kSize, &cfg.ft_batch},
        {"ft_epochs", FieldType::kSize, &cfg.ft_epochs},
        {"mil_hidden", FieldType::kSize, &cfg.mil_hidden},
        {"mil_epochs", FieldType::kSize, &cfg.mil_epochs},
        {"mil_accum", FieldType::kSize, &cfg.mil_accum},
        {"mil_lr", FieldType::kDouble, &cfg.mil_lr},
        {"split_train", FieldType::kDouble, &cfg.split_train},
        {"split_val", FieldType::kDouble, &cfg.split_val},
        {"split_test", FieldType::kDouble, &cfg.split_test},
        {"seeds", FieldType::kU64List, &cfg.seeds},
    };
}

std::string_view trim(std::string_view s) {
    while (!s.empty() && (s.front() == ' ' || s.front() == '\t' || s.front() == '\r')) {
        s.remove_prefix(1);
    }
    while (!s.empty() && (s.back() == ' ' || s.back() == '\t' || s.back() == '\r')) {
        s.remove_suffix(1);
    }
    return s;
}

std::size_t parse_size(std::string_view value, const char* key) {
    std::size_t out = 0;
    const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || end != value.data() + value.size()) {
        throw ConfigError(std::string("config: key \"") + key + "\" needs a non-negative integer, got \"" +
                          std::string(value) + "\"");
    }
    return out;
}

std::uint64_t parse_u64(std::string_view value, const char* key) {
    std::uint64_t out = 0;
    const auto [end, ec] = std::from_chars(value.data(), value.data() + value.size(), out);
    if (ec != std::errc() || end != value.data() + value.size()) {
        throw ConfigError(std::string("config: key \"") + key + "\" needs an unsigned integer, got \"" +
                          std::string(value) + "\"");
    }
    return out;
}

double parse_double(std::string_view value, const char* key) {
    const std::string owned(value);
    char* end = nullptr;
    const double out = std::strtod(owned.c_str(), &end);
    if (end != owned.c_str() + owned.size() || owned.empty()) {
        throw ConfigError(std::string("config: key \"") + key + "\" needs a number, got \"" + owned +
                          "\"");
    }
    return out;
}

std::vector<std::string_view> split_commas(std::string_view value) {
    std::vector<std::string_view> parts;
    while (true) {
        const std::size_t comma = value.find(',');
        if (comma == std::string_view::npos) {
            parts.push_back(trim(value));
            break;
        }
        parts.push_back(trim(value.substr(0, comma)));
        value.remove_prefix(comma + 1);
    }
    return parts;
}

void assign(const Field& field, std::string_view value) {
    switch (field.type) {
        case FieldType::kSize:
            *static_cast<std::size_t*>(field.ptr) = parse_size(value, field.key);
            break;
        case FieldType::kDouble:
            *static_cast<double*>(field.ptr) = parse_double(value, field.key);
            break;
        case FieldType::kString:
            *static_cast<std::string*>(field.ptr) = std::string(value);
            break;
        case FieldType::kDoubleList: {
            auto& list = *static_cast<std::vector<double>*>(field.ptr);
            list.clear();
            for (const std::string_view part : split_commas(value)) {
                list.push_back(parse_double(part, field.key));
            }
            break;
        }
        case FieldType::kU64List: {
            auto& list = *static_cast<std::vector<std::uint64_t>*>(field.ptr);
            list.clear();
            for (const std::string_view part : split_commas(value)) {
                list.push_back(parse_u64(part, field.key));
            }
            break;
        }
    }
}

std::string render(const Field& field) {
    switch (field.type) {
        case FieldType::kSize:
            return std::to_string(*static_cast<const std::size_t*>(field.ptr));
        case FieldType::kDouble:
            return format_g17(*static_cast<const double*>(field.ptr));
        case FieldType::kString:
            return *static_cast<const std::string*>(field.ptr);
        case FieldType::kDoubleList: {
            const auto& list = *static_cast<const std::vector<double>*>(field.ptr);
            std::string out;
            for (std::size_t i = 0; i < list.size(); ++i) {
                out += (i > 0 ? "," : "") + format_g17(list[i]);
            }
            return out;
        }
        case FieldType::kU64List: {
            const auto& list = *static_cast<const std::vector<std::uint64_t>*>(field.ptr);
            std::string out;
            for (std::size_t i = 0; i < list.size(); ++i) {
                out += (i > 0 ? "," : "") + std::to_string(list[i]);
            }
            return out;
        }
    }
    throw std::logic_error("config: unknown field type");
}

}  // namespace

ExperimentConfig parse_config(std::string_view text) {
    ExperimentConfig cfg;
    std::vector<Field> defs = fields(cfg);
    std::size_t line_no = 0;
    while (!text.empty()) {
        const std::size_t newline = text.find('\n');
        std::string_view line = newline == std::string_view::npos ? text : text.substr(0, newline);
        text.remove_prefix(newline == std::string_view::npos ? text.size() : newline + 1);
        ++line_no;
        line = trim(line);
        if (line.empty() || line.front() == '#') {
            continue;
        }
        const std::size_t eq = line.find('=');
        if (eq == std::string_view::npos) {
            throw ConfigError("config: line " + std::to_string(line_no) +
                              " is not a key=value pair: \"" + std::string(line) + "\"");
        }
        const std::string_view key = trim(line.substr(0, eq));
        const std::string_view value = trim(line.substr(eq + 1));
        bool known = false;
        for (const Field& field : defs) {
            if (key == field.key) {
                assign(field, value);
                known = true;
                break;
            }
        }
        if (!known) {
            throw ConfigError("config: unknown key \"" + std::string(key) + "\" on line " +
                              std::to_string(line_no));
        }
    }
    validate_config(cfg);
    return cfg;
}

ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw ConfigError("config: cannot open " + path);
    }
    std::ostringstream buffer;
    buffer << in.rdbuf();
    return parse_config(buffer.str());
}

std::string serialize_config(const ExperimentConfig& cfg) {
    auto& mutable_cfg = const_cast<ExperimentConfig&>(cfg);
    std::string out;
    for (const Field& field : fields(mutable_cfg)) {
        out += field.key;
        out += '=';
        out += render(field);
        out += '\n';
    }
    return out;
}

void validate_config(const ExperimentConfig& cfg) {
    const auto require = [](bool ok, const std::string& what) {
        if (!ok) {
            throw ConfigError("config: " + what);
        }
    };
    require(cfg.patch >= 4, "patch must be at least 4 pixels");
    require(cfg.window >= 2, "window must be at least 2 patches");
    require(cfg.grid_h >= cfg.window && cfg.grid_w >= cfg.window,
            "slide grid must fit at least one context window");
    require(cfg.channels == 3, "channels must be 3 (RGB rendering and tissue predicate)");
    require(cfg.n_slides >= 10, "n_slides must be at least 10");
    require(cfg.class_balance >= 0.0 && cfg.class_balance <= 1.0, "class_balance outside [0,1]");
    require(cfg.lesion_rate >= 0.0 && cfg.lesion_rate <= 1.0, "lesion_rate outside [0,1]");
    require(cfg.noise_sigma >= 0.0 && cfg.student_sigma >= 0.0 && cfg.teacher_sigma >= 0.0,
            "noise sigmas must be non-negative");
    require(cfg.tissue_min_fraction >= 0.0 && cfg.tissue_min_fraction <= 1.0,
            "tissue_min_fraction outside [0,1]");
    require(cfg.lesion_dot_delta >= 0.0 && cfg.lesion_dot_delta <= 0.5,
            "lesion_dot_delta outside [0,0.5]");
    require(cfg.d_f > 0 && cfg.d_t > 0, "feature dims must be positive");
    require(cfg.d_f < cfg.d_t, "d_f must be smaller than d_t (student/teacher capacity order)");
    require(cfg.pretrain_samples > 0 && cfg.pretrain_holdout > 0 && cfg.pretrain_batch > 0 &&
                cfg.pretrain_max_epochs > 0 && cfg.teacher_budget_multiplier > 0,
            "pretraining sizes must be positive");
    require(cfg.tf_layers > 0 && cfg.tf_heads > 0 && cfg.tf_mlp_hidden > 0,
            "transformer dims must be positive");
    require(cfg.d_f % cfg.tf_heads == 0, "d_f must be divisible by tf_heads");
    require(cfg.predictor_hidden > 0, "predictor_hidden must be positive");
    require(cfg.mask_ratio > 0.0 && cfg.mask_ratio < 1.0, "mask_ratio must lie inside (0,1)");
    parse_variant(cfg.variant);
    require(cfg.ema_tau >= 0.0 && cfg.ema_tau <= 1.0, "ema_tau outside [0,1]");
    require(!cfg.ft_lrs.empty(), "ft_lrs sweep list must be non-empty");
    require(cfg.ft_batch > 0 && cfg.ft_epochs > 0, "fine-tuning batch and epochs must be positive");
    require(cfg.mil_hidden > 0 && cfg.mil_epochs > 0 && cfg.mil_accum > 0,
            "MIL dims must be positive");
    require(std::abs(cfg.split_train + cfg.split_val + cfg.split_test - 1.0) < 1e-9 &&
                cfg.split_train > 0.0 && cfg.split_val > 0.0 && cfg.split_test > 0.0,
            "split fractions must be positive and sum to 1");
    require(!cfg.seeds.empty(), "seeds list must be non-empty");
}

std::uint64_t fnv1a64(std::string_view bytes) {
    std::uint64_t hash = 0xcbf29ce484222325ull;
    for (const char c : bytes) {
        hash ^= static_cast<std::uint8_t>(c);
        hash *= 0x100000001b3ull;
    }
    return hash;
}

std::string hash_hex(std::uint64_t hash) {
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(hash));
    return buf;
}

RunManifest make_manifest(const std::string& command, const ExperimentConfig& cfg,
                          std::uint64_t root_seed) {
    RunManifest manifest;
    manifest.command = command;
    manifest.root_seed = root_seed;
    manifest.config_text = serialize_config(cfg);
    manifest.content_hash = fnv1a64(command + "\n" + manifest.config_text + "\n" +
                                    std::to_string(root_seed));
    const auto now = std::chrono::system_clock::now();
    const std::time_t t = std::chrono::system_clock::to_time_t(now);
    char stamp[32];
    std::tm utc{};
    gmtime_r(&t, &utc);
    std::strftime(stamp, sizeof(stamp), "%Y-%m-%dT%H:%M:%SZ", &utc);
    manifest.created = stamp;
    return manifest;
}

void write_manifest(const std::string& path, const RunManifest& manifest) {
    nlohmann::json doc;
    doc["command"] = manifest.command;
    doc["root_seed"] = manifest.root_seed;
    doc["content_hash"] = hash_hex(manifest.content_hash);
    doc["created"] = manifest.created;
    doc["config"] = manifest.config_text;
    doc["derived_seeds"] = manifest.derived_seeds;
    nlohmann::json artifacts = nlohmann::json::object();
    for (const auto& [name, artifact_path] : manifest.artifacts) {
        artifacts[name] = artifact_path;
    }
    doc["artifacts"] = artifacts;
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataFormatError("cannot open for writing: " + path);
    }
    out << doc.dump(2) << '\n';
}

}  // namespace mcmkd
