#pragma once

#include <cmath>
#include <cstdint>
#include <fstream>
#include <functional>
#include <set>
#include <sstream>
#include <stdexcept>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "parvts/cost_model.hpp"
#include "parvts/scheduler.hpp"
#include "parvts/text.hpp"
#include "parvts/transformer.hpp"

namespace parvts {

// Validation failure attributable to one configuration key.
class ConfigError : public std::invalid_argument {
public:
    ConfigError(std::string key, const std::string& message)
        : std::invalid_argument(key + ": " + message), key_(std::move(key)) {}
    const std::string& key() const { return key_; }

private:
    std::string key_;
};

struct ExperimentConfig {
    ModelConfig model;
    std::size_t system_tokens = 4;
    std::size_t visual_tokens = 16;
    std::size_t question_tokens = 6;
    std::string saliency = "toy";  // "toy" or a path to a saliency file
    std::size_t keep_count = 6;
    ScheduleConfig schedule;
    std::vector<Strategy> strategies = {Strategy::ParVTSBatch};
    std::size_t decode_steps = 8;
    CostParams cost = CostParams::make(0.0, 3, 32, 64, 576, 1, 4096, 11008);
};

namespace detail {

inline std::uint64_t parse_u64(const std::string& key, const std::string& value) {
    std::uint64_t out = 0;
    const auto* end = value.data() + value.size();
    const auto res = std::from_chars(value.data(), end, out);
    if (value.empty() || res.ec != std::errc{} || res.ptr != end) {
        throw ConfigError(key, "expected a non-negative integer, got '" + value + "'");
    }
    return out;
}

inline std::size_t parse_count(const std::string& key, const std::string& value) {
    return static_cast<std::size_t>(parse_u64(key, value));
}

inline double parse_real(const std::string& key, const std::string& value) {
    double out = 0.0;
    const auto* end = value.data() + value.size();
    const auto res = std::from_chars(value.data(), end, out);
    if (value.empty() || res.ec != std::errc{} || res.ptr != end || !std::isfinite(out)) {
        throw ConfigError(key, "expected a finite number, got '" + value + "'");
    }
    return out;
}

inline std::vector<Strategy> parse_strategies(const std::string& key, const std::string& value) {
    std::vector<Strategy> out;
    for (const auto& part : split(value, ',')) {
        try {
            out.push_back(parse_strategy(trim(part)));
        } catch (const std::invalid_argument& e) {
            throw ConfigError(key, e.what());
        }
    }
    return out;
}

inline std::string join_strategies(const std::vector<Strategy>& s) {
    std::string out;
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) out += ",";
        out += to_string(s[i]);
    }
    return out;
}

struct ConfigField {
    std::string_view key;
    std::function<void(ExperimentConfig&, const std::string&)> set;
    std::function<std::string(const ExperimentConfig&)> get;
};

#define PARVTS_COUNT_FIELD(name, member)                                                                       \
    ConfigField {                                                                                              \
        name, [](ExperimentConfig& c, const std::string& v) { c.member = parse_count(name, v); },              \
            [](const ExperimentConfig& c) { return std::to_string(c.member); }                                 \
    }
#define PARVTS_REAL_FIELD(name, member)                                                                        \
    ConfigField {                                                                                              \
        name, [](ExperimentConfig& c, const std::string& v) { c.member = parse_real(name, v); },               \
            [](const ExperimentConfig& c) { return format_number(c.member); }                                  \
    }

// Every accepted key, in echo order.
inline const std::vector<ConfigField>& config_fields() {
    static const std::vector<ConfigField> fields = {
        PARVTS_COUNT_FIELD("model.layers", model.num_layers),
        PARVTS_COUNT_FIELD("model.hidden_dim", model.hidden_dim),
        PARVTS_COUNT_FIELD("model.heads", model.num_heads),
        PARVTS_COUNT_FIELD("model.mlp_dim", model.mlp_dim),
        PARVTS_COUNT_FIELD("model.vocab", model.vocab_size),
        ConfigField{"model.seed",
                    [](ExperimentConfig& c, const std::string& v) { c.model.master_seed = parse_u64("model.seed", v); },
                    [](const ExperimentConfig& c) { return std::to_string(c.model.master_seed); }},
        PARVTS_COUNT_FIELD("tokens.system", system_tokens),
        PARVTS_COUNT_FIELD("tokens.visual", visual_tokens),
        PARVTS_COUNT_FIELD("tokens.question", question_tokens),
        ConfigField{"schedule.strategy",
                    [](ExperimentConfig& c, const std::string& v) {
                        c.strategies = parse_strategies("schedule.strategy", v);
                        c.schedule.strategy = c.strategies.front();
                    },
                    [](const ExperimentConfig& c) { return join_strategies(c.strategies); }},
        PARVTS_COUNT_FIELD("schedule.migration_depth", schedule.migration_depth),
        PARVTS_REAL_FIELD("schedule.alpha", schedule.alpha),
        PARVTS_REAL_FIELD("schedule.beta", schedule.beta),
        PARVTS_COUNT_FIELD("schedule.joint_prefix", schedule.joint_prefix_layers),
        PARVTS_COUNT_FIELD("partition.keep_count", keep_count),
        ConfigField{"partition.saliency",
                    [](ExperimentConfig& c, const std::string& v) {
                        if (v.empty()) throw ConfigError("partition.saliency", "must be 'toy' or a file path");
                        c.saliency = v;
                    },
                    [](const ExperimentConfig& c) { return c.saliency; }},
        PARVTS_COUNT_FIELD("decode.steps", decode_steps),
        PARVTS_REAL_FIELD("cost.p", cost.p),
        PARVTS_COUNT_FIELD("cost.n", cost.n),
        PARVTS_COUNT_FIELD("cost.N", cost.N),
        ConfigField{"cost.L_text",
                    [](ExperimentConfig& c, const std::string& v) {
                        c.cost.L_text = parse_count("cost.L_text", v);
                        c.cost.L = c.cost.L_text + c.cost.L_img;
                    },
                    [](const ExperimentConfig& c) { return std::to_string(c.cost.L_text); }},
        ConfigField{"cost.L_img",
                    [](ExperimentConfig& c, const std::string& v) {
                        c.cost.L_img = parse_count("cost.L_img", v);
                        c.cost.L = c.cost.L_text + c.cost.L_img;
                    },
                    [](const ExperimentConfig& c) { return std::to_string(c.cost.L_img); }},
        PARVTS_COUNT_FIELD("cost.M", cost.M),
        PARVTS_COUNT_FIELD("cost.d", cost.d),
        PARVTS_COUNT_FIELD("cost.m", cost.m),
    };
    return fields;
}

#undef PARVTS_COUNT_FIELD
#undef PARVTS_REAL_FIELD

}  // namespace detail

inline void set_config_value(ExperimentConfig& cfg, const std::string& key, const std::string& value) {
    for (const auto& f : detail::config_fields()) {
        if (f.key == key) {
            f.set(cfg, value);
            return;
        }
    }
    throw ConfigError(key, "unknown key");
}

// "dotted.key=value", as given to --set.
inline void apply_override(ExperimentConfig& cfg, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos) {
        throw ConfigError(trim(assignment), "override must have the form key=value");
    }
    set_config_value(cfg, trim(assignment.substr(0, eq)), trim(assignment.substr(eq + 1)));
}

// Lines of `key = value`; '#' starts a comment line. Keys not set keep their defaults.
inline ExperimentConfig parse_config(std::istream& in, ExperimentConfig cfg = {}) {
    std::set<std::string> seen;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const std::string body = trim(line);
        if (body.empty() || body[0] == '#') continue;
        const auto eq = body.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("line " + std::to_string(line_no), "expected 'key = value'");
        }
        const std::string key = trim(body.substr(0, eq));
        if (!seen.insert(key).second) throw ConfigError(key, "duplicate key");
        set_config_value(cfg, key, trim(body.substr(eq + 1)));
    }
    return cfg;
}

inline ExperimentConfig load_config(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw ConfigError("config", "cannot open '" + path + "'");
    return parse_config(in);
}

inline std::vector<std::pair<std::string, std::string>> echo_config(const ExperimentConfig& cfg) {
    std::vector<std::pair<std::string, std::string>> out;
    for (const auto& f : detail::config_fields()) out.emplace_back(std::string(f.key), f.get(cfg));
    return out;
}

inline void validate_experiment(const ExperimentConfig& cfg) {
    const auto& m = cfg.model;
    if (m.num_layers < 1) throw ConfigError("model.layers", "must be >= 1");
    if (m.hidden_dim < 1) throw ConfigError("model.hidden_dim", "must be >= 1");
    if (m.num_heads < 1) throw ConfigError("model.heads", "must be >= 1");
    if (m.hidden_dim % m.num_heads != 0) throw ConfigError("model.hidden_dim", "must be divisible by model.heads");
    if (m.head_dim() % 2 != 0) throw ConfigError("model.heads", "hidden_dim / heads must be even");
    if (m.mlp_dim < 1) throw ConfigError("model.mlp_dim", "must be >= 1");
    if (m.vocab_size < 2) throw ConfigError("model.vocab", "must be >= 2");
    const std::size_t total = cfg.system_tokens + cfg.visual_tokens + cfg.question_tokens;
    if (total == 0) throw ConfigError("tokens", "prompt must contain at least one token");
    if (total + cfg.decode_steps > m.max_positions) throw ConfigError("tokens", "sequence exceeds max positions");
    if (cfg.keep_count > cfg.visual_tokens) {
        throw ConfigError("partition.keep_count", "exceeds tokens.visual (" + std::to_string(cfg.keep_count) + " > " +
                                                      std::to_string(cfg.visual_tokens) + ")");
    }
    if (cfg.strategies.empty()) throw ConfigError("schedule.strategy", "at least one strategy required");
    const auto& s = cfg.schedule;
    if (s.migration_depth < 1 || s.migration_depth > m.num_layers) {
        throw ConfigError("schedule.migration_depth", "must lie in [1, model.layers]");
    }
    if (s.joint_prefix_layers > s.migration_depth) {
        throw ConfigError("schedule.joint_prefix", "must not exceed schedule.migration_depth");
    }
    if (!(s.alpha >= 0.0)) throw ConfigError("schedule.alpha", "must be non-negative");
    if (!(s.beta >= 0.0)) throw ConfigError("schedule.beta", "must be non-negative");
    if (std::abs(s.alpha + s.beta - 1.0) > 1e-12) throw ConfigError("schedule.alpha", "alpha + beta must equal 1");
}

}  // namespace parvts
