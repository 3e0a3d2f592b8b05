#pragma once

#include <algorithm>
#include <cmath>
#include <optional>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

namespace parvts {

// Inputs of the analytic FLOPs model. Only attention and FFN work is counted.
struct CostParams {
    double p = 0.0;            // pruning rate of visual tokens
    std::size_t n = 3;         // migration depth
    std::size_t N = 32;        // transformer layers
    std::size_t L = 0;         // prefill length; must equal L_text + L_img
    std::size_t L_text = 64;   // system + question tokens
    std::size_t L_img = 576;   // visual tokens
    std::size_t M = 1;         // generated tokens
    std::size_t d = 4096;      // hidden size
    std::size_t m = 11008;     // FFN intermediate size

    static CostParams make(double p, std::size_t n, std::size_t N, std::size_t L_text, std::size_t L_img,
                           std::size_t M, std::size_t d, std::size_t m) {
        return CostParams{p, n, N, L_text + L_img, L_text, L_img, M, d, m};
    }

    void validate() const {
        if (!(p >= 0.0 && p <= 1.0)) throw std::invalid_argument("CostParams: p must lie in [0, 1]");
        if (N < 1) throw std::invalid_argument("CostParams: N must be >= 1");
        if (n < 1 || n > N) throw std::invalid_argument("CostParams: n must lie in [1, N]");
        if (L != L_text + L_img) throw std::invalid_argument("CostParams: L must equal L_text + L_img");
    }

    // Tokens per layer after migration: L_text + (1 - p) L_img.
    double reduced_length() const {
        return static_cast<double>(L_text) + (1.0 - p) * static_cast<double>(L_img);
    }
};

struct CostReport {
    double prefill_flops_vanilla = 0.0;
    double decoding_flops_vanilla = 0.0;
    double prefill_flops_parvts = 0.0;
    double decoding_flops_parvts = 0.0;
    double rho_prefill = 1.0;
    double rho_decoding = 1.0;
};

// 4 d^2 L + 2 d L^2 + 2 m d L
inline double flops_layer(double d, double m, double L) {
    return 4.0 * d * d * L + 2.0 * d * L * L + 2.0 * m * d * L;
}

inline double prefill_flops_vanilla(const CostParams& c) {
    return static_cast<double>(c.N) * flops_layer(c.d, c.m, static_cast<double>(c.L));
}

enum class SumMode { Stepwise, Closed };

// Literal summation up to this many steps; beyond it the stepwise mode uses
// the arithmetic-series expression of the same sum.
inline constexpr std::size_t kLiteralSumLimit = 1'000'000;

// Decoding cost with a per-step KV length of cache_length + i - 1 (i = 1..M).
inline double decoding_flops_for_cache(double N, double d, double m, double cache_length, std::size_t M,
                                       SumMode mode) {
    const double Mf = static_cast<double>(M);
    if (mode == SumMode::Closed) {
        return N * Mf * (4.0 * d * d + 2.0 * d * (cache_length + (Mf - 1.0) / 2.0) + 2.0 * m * d);
    }
    if (M <= kLiteralSumLimit) {
        double total = 0.0;
        for (std::size_t i = 1; i <= M; ++i) {
            const double s_i = cache_length + static_cast<double>(i) - 1.0;
            total += N * (4.0 * d * d + 2.0 * d * s_i + 2.0 * m * d);
        }
        return total;
    }
    // sum_{i=1..M} S_i = M * cache_length + M (M - 1) / 2
    const double sum_s = Mf * cache_length + Mf * (Mf - 1.0) / 2.0;
    return N * (Mf * (4.0 * d * d + 2.0 * m * d) + 2.0 * d * sum_s);
}

inline double decoding_flops_vanilla(const CostParams& c, SumMode mode = SumMode::Closed) {
    return decoding_flops_for_cache(static_cast<double>(c.N), static_cast<double>(c.d), static_cast<double>(c.m),
                                    static_cast<double>(c.L), c.M, mode);
}

inline double prefill_flops_parvts(const CostParams& c) {
    const double d = static_cast<double>(c.d);
    const double m = static_cast<double>(c.m);
    return static_cast<double>(c.n) * flops_layer(d, m, static_cast<double>(c.L)) +
           static_cast<double>(c.N - c.n) * flops_layer(d, m, c.reduced_length());
}

inline double decoding_flops_parvts(const CostParams& c) {
    const double d = static_cast<double>(c.d);
    const double m = static_cast<double>(c.m);
    const double Mf = static_cast<double>(c.M);
    return static_cast<double>(c.N) * Mf *
           (4.0 * d * d + 2.0 * m * d + 2.0 * d * ((Mf - 1.0) / 2.0 + c.reduced_length()));
}

inline double speedup_prefill(const CostParams& c) {
    if (c.L == 0) throw std::invalid_argument("speedup_prefill: L must be positive");
    return prefill_flops_vanilla(c) / prefill_flops_parvts(c);
}

// (2d + m + L + (M-1)/2) / (2d + m + (M-1)/2 + L_text + (1-p) L_img)
inline double speedup_decoding(const CostParams& c) {
    const double base = 2.0 * static_cast<double>(c.d) + static_cast<double>(c.m);
    const double half = (static_cast<double>(c.M) - 1.0) / 2.0;
    const double num = base + (static_cast<double>(c.L) + half);
    const double den = base + (half + c.reduced_length());
    if (den <= 0.0) throw std::invalid_argument("speedup_decoding: degenerate parameters");
    return num / den;
}

inline CostReport cost_report(const CostParams& c) {
    c.validate();
    CostReport r;
    r.prefill_flops_vanilla = prefill_flops_vanilla(c);
    r.decoding_flops_vanilla = decoding_flops_vanilla(c);
    r.prefill_flops_parvts = prefill_flops_parvts(c);
    r.decoding_flops_parvts = decoding_flops_parvts(c);
    r.rho_prefill = speedup_prefill(c);
    r.rho_decoding = speedup_decoding(c);
    return r;
}

struct MigrationPreset {
    std::string_view backbone;
    std::string_view params;
    std::size_t depth;
};

inline const std::vector<MigrationPreset>& preset_migration_depths() {
    static const std::vector<MigrationPreset> table = {
        {"LLaVA-1.5", "7B", 3},    {"LLaVA-1.5", "13B", 3},  {"LLaVA-Next", "7B", 16}, {"LLaVA-Next", "13B", 16},
        {"Qwen2.5-VL", "3B", 18},  {"Qwen2.5-VL", "7B", 18}, {"Qwen3-VL", "2B", 10},   {"Qwen3-VL", "4B", 12},
        {"Qwen3-VL", "8B", 12},    {"InternVL2", "2B", 18},  {"InternVL2", "8B", 16},  {"InternVL2.5", "2B", 18},
        {"InternVL2.5", "8B", 16}, {"Video-LLaVA", "7B", 24},
    };
    return table;
}

// Lookup by "<backbone>-<params>", e.g. "LLaVA-1.5-7B".
inline std::optional<std::size_t> lookup_migration_depth(std::string_view name) {
    for (const auto& p : preset_migration_depths()) {
        const std::string key = std::string(p.backbone) + "-" + std::string(p.params);
        if (key == name) return p.depth;
    }
    return std::nullopt;
}

}  // namespace parvts
