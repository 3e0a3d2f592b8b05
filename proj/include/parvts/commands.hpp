#pragma once

#include <cmath>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "parvts/config.hpp"
#include "parvts/cost_model.hpp"
#include "parvts/harness.hpp"
#include "parvts/saliency.hpp"
#include "parvts/text.hpp"
#include "parvts/verify.hpp"

namespace parvts {

inline constexpr int kExitOk = 0;
inline constexpr int kExitValidation = 1;
inline constexpr int kExitInvariant = 2;

namespace detail {

inline void write_file(const std::string& path, const std::string& text) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw ConfigError("--out", "cannot write '" + path + "'");
    out << text;
}

// Maps exceptions onto the documented exit codes.
template <typename Fn>
int guarded(std::ostream& err, Fn&& fn) {
    try {
        return fn();
    } catch (const ConfigError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const FormatError& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::invalid_argument& e) {
        err << "error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        err << "internal error: " << e.what() << "\n";
        return kExitInvariant;
    }
}

}  // namespace detail

struct RunArgs {
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    std::string out_path = "report.txt";
};

inline ExperimentConfig resolve_config(const std::optional<std::string>& path,
                                       const std::vector<std::string>& overrides) {
    ExperimentConfig cfg = path ? load_config(*path) : ExperimentConfig{};
    for (const auto& o : overrides) apply_override(cfg, o);
    return cfg;
}

inline int cmd_run(const RunArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const ExperimentConfig cfg = resolve_config(args.config_path, args.overrides);
        const RunReport report = run_experiment(cfg);
        detail::write_file(args.out_path, format_report(report));
        // Summary of the first requested strategy.
        const Strategy primary = cfg.strategies.front();
        for (const auto& r : report.strategies) {
            if (r.strategy != primary) continue;
            out << "strategy=" << to_string(r.strategy) << " kept=" << r.tokens_subject << "/"
                << (r.tokens_subject + r.tokens_nonsubject) << " rho_prefill=" << format_number(r.rho_prefill)
                << " max_divergence=" << format_number(r.divergence_vs_vanilla.max_abs)
                << " report=" << args.out_path << "\n";
        }
        return kExitOk;
    });
}

struct CostArgs {
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    std::optional<std::string> preset;
    std::optional<double> p;
    std::optional<std::size_t> n, N, L, L_text, L_img, M, d, m;
};

inline CostParams resolve_cost_params(const CostArgs& a) {
    CostParams c = resolve_config(a.config_path, a.overrides).cost;
    if (a.preset) {
        const auto depth = lookup_migration_depth(*a.preset);
        if (!depth) throw ConfigError("--preset", "unknown backbone '" + *a.preset + "'");
        c.n = *depth;
    }
    if (a.p) c.p = *a.p;
    if (a.n) c.n = *a.n;
    if (a.N) c.N = *a.N;
    if (a.L_text) c.L_text = *a.L_text;
    if (a.L_img) c.L_img = *a.L_img;
    if (a.M) c.M = *a.M;
    if (a.d) c.d = *a.d;
    if (a.m) c.m = *a.m;
    c.L = c.L_text + c.L_img;
    if (a.L && *a.L != c.L) {
        throw ConfigError("--L", "L=" + std::to_string(*a.L) + " differs from L_text + L_img = " + std::to_string(c.L));
    }
    if (!(c.p >= 0.0 && c.p <= 1.0)) throw ConfigError("--p", "must lie in [0, 1]");
    if (c.N < 1) throw ConfigError("--N", "must be >= 1");
    if (c.n < 1 || c.n > c.N) throw ConfigError("--n", "must lie in [1, N]");
    if (c.L == 0) throw ConfigError("--L_text", "L_text + L_img must be positive");
    return c;
}

inline std::string format_cost(const CostParams& c, const CostReport& r) {
    std::ostringstream os;
    os << "p = " << format_number(c.p) << "\n"
       << "n = " << c.n << "\n"
       << "N = " << c.N << "\n"
       << "L = " << c.L << "\n"
       << "L_text = " << c.L_text << "\n"
       << "L_img = " << c.L_img << "\n"
       << "M = " << c.M << "\n"
       << "d = " << c.d << "\n"
       << "m = " << c.m << "\n"
       << "prefill_flops_vanilla = " << format_number(r.prefill_flops_vanilla) << "\n"
       << "prefill_flops_parvts = " << format_number(r.prefill_flops_parvts) << "\n"
       << "decoding_flops_vanilla = " << format_number(r.decoding_flops_vanilla) << "\n"
       << "decoding_flops_parvts = " << format_number(r.decoding_flops_parvts) << "\n"
       << "rho_prefill = " << format_number(r.rho_prefill) << "\n"
       << "rho_decoding = " << format_number(r.rho_decoding) << "\n";
    return os.str();
}

inline int cmd_cost(const CostArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const CostParams c = resolve_cost_params(args);
        out << format_cost(c, cost_report(c));
        return kExitOk;
    });
}

namespace detail {

// "a,b,c" or "start:stop:step" (stop inclusive).
inline std::vector<double> parse_axis(const std::string& key, const std::string& spec) {
    std::vector<double> out;
    if (trim(spec).empty()) throw ConfigError(key, "empty grid axis");
    const auto range = split(spec, ':');
    if (range.size() == 3) {
        const double start = parse_real(key, trim(range[0]));
        const double stop = parse_real(key, trim(range[1]));
        const double step = parse_real(key, trim(range[2]));
        if (!(step > 0.0) || stop < start) throw ConfigError(key, "malformed range '" + spec + "'");
        for (std::size_t i = 0;; ++i) {
            const double v = std::round((start + static_cast<double>(i) * step) * 1e12) / 1e12;
            if (v > stop + 1e-9) break;
            out.push_back(v);
            if (out.size() > 1'000'000) throw ConfigError(key, "range too large");
        }
        return out;
    }
    if (range.size() != 1) throw ConfigError(key, "malformed range '" + spec + "'");
    for (const auto& part : split(spec, ',')) out.push_back(parse_real(key, trim(part)));
    return out;
}

inline std::vector<std::size_t> to_counts(const std::string& key, const std::vector<double>& values) {
    std::vector<std::size_t> out;
    for (double v : values) {
        if (v < 0.0 || v != std::floor(v)) throw ConfigError(key, "expected non-negative integers");
        out.push_back(static_cast<std::size_t>(v));
    }
    return out;
}

}  // namespace detail

// Each entry is "key=spec" with key one of p, n, N, L_text, L_img, M, d, m.
inline CostGrid parse_grid(const std::vector<std::string>& specs, const CostParams& base) {
    if (specs.empty()) throw ConfigError("--grid", "grid spec is empty");
    CostGrid g = CostGrid::around(base);
    for (const auto& spec : specs) {
        const auto eq = spec.find('=');
        if (eq == std::string::npos) throw ConfigError("--grid", "expected key=values, got '" + spec + "'");
        const std::string key = trim(spec.substr(0, eq));
        const auto values = detail::parse_axis(key, spec.substr(eq + 1));
        if (key == "p") g.p = values;
        else if (key == "n") g.n = detail::to_counts(key, values);
        else if (key == "N") g.N = detail::to_counts(key, values);
        else if (key == "L_text") g.L_text = detail::to_counts(key, values);
        else if (key == "L_img") g.L_img = detail::to_counts(key, values);
        else if (key == "M") g.M = detail::to_counts(key, values);
        else if (key == "d") g.d = detail::to_counts(key, values);
        else if (key == "m") g.m = detail::to_counts(key, values);
        else throw ConfigError(key, "unknown grid axis");
    }
    return g;
}

struct SweepArgs {
    std::optional<std::string> config_path;
    std::vector<std::string> overrides;
    std::vector<std::string> grid;
    std::optional<std::string> out_path;
};

inline int cmd_sweep(const SweepArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const CostParams base = resolve_config(args.config_path, args.overrides).cost;
        const CostGrid grid = parse_grid(args.grid, base);
        std::vector<SweepRow> rows;
        try {
            rows = sweep_cost(grid);
        } catch (const std::invalid_argument& e) {
            throw ConfigError("--grid", e.what());
        }
        const std::string csv = format_sweep_csv(rows);
        if (args.out_path) {
            detail::write_file(*args.out_path, csv);
            out << "rows=" << rows.size() << " written to " << *args.out_path << "\n";
        } else {
            out << csv;
        }
        return kExitOk;
    });
}

struct VerifyArgs {
    std::optional<std::string> out_path;
    VerifyOptions options;
};

inline int cmd_verify(const VerifyArgs& args, std::ostream& out, std::ostream& err) {
    return detail::guarded(err, [&] {
        const VerifyReport report = run_verification(args.options);
        const std::string text = report.text();
        out << text;
        if (args.out_path) detail::write_file(*args.out_path, text);
        if (!report.all_passed()) {
            err << "verify: failed checks:";
            for (const auto& c : report.checks) {
                if (!c.passed) err << ' ' << c.id;
            }
            err << "\n";
            return kExitInvariant;
        }
        out << "all " << report.checks.size() << " checks passed\n";
        return kExitOk;
    });
}

}  // namespace parvts
