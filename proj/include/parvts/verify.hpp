#pragma once

#include <array>
#include <chrono>
#include <cmath>
#include <limits>
#include <sstream>
#include <string>
#include <vector>

#include "parvts/cost_model.hpp"
#include "parvts/harness.hpp"
#include "parvts/oracle.hpp"
#include "parvts/scheduler.hpp"
#include "parvts/text.hpp"

namespace parvts {

struct CheckResult {
    std::string id;
    std::string name;
    bool passed = false;
    std::string detail;  // deterministic; no timings
    double seconds = 0.0;
};

struct VerifyOptions {
    FaultInjection fault = FaultInjection::None;
};

struct VerifyReport {
    std::vector<CheckResult> checks;

    bool all_passed() const {
        for (const auto& c : checks) {
            if (!c.passed) return false;
        }
        return !checks.empty();
    }

    std::string text() const {
        std::ostringstream os;
        for (const auto& c : checks) {
            os << (c.passed ? "PASS " : "FAIL ") << c.id << ' ' << c.name << ": " << c.detail << "\n";
        }
        return os.str();
    }
};

// Tolerances and limits of the acceptance checks.
inline constexpr double kOracleTolerance = 1e-6;
inline constexpr double kSystemIdentityTolerance = 1e-12;
inline constexpr double kCrossModeTolerance = 1e-9;
inline constexpr double kReductionTolerance = 1e-9;
inline constexpr double kDecodingRatioRelTolerance = 1e-12;
inline constexpr double kOracleTimeLimitSeconds = 30.0;
inline constexpr double kTable4TimeLimitSeconds = 1.0;
inline constexpr double kTable4PointTolerance = 0.10;

// A seeded scheduling scenario on the toy model.
struct Scenario {
    Model model;
    std::vector<std::size_t> ids;
    SequenceLayout layout;
    SaliencyScores saliency;
};

inline Scenario make_scenario(std::size_t layers, std::size_t dim, std::size_t visual, std::uint64_t seed,
                              std::size_t system = 3, std::size_t question = 5) {
    ModelConfig mc;
    mc.num_layers = layers;
    mc.hidden_dim = dim;
    mc.num_heads = std::max<std::size_t>(1, dim / 8);
    mc.mlp_dim = 2 * dim;
    mc.vocab_size = 64;
    mc.master_seed = seed;
    Scenario s{build_model(mc), {}, SequenceLayout::from_counts(system, visual, question), {}};
    s.ids = synthesize_tokens(seed, s.layout.output_start, mc.vocab_size);
    const std::vector<std::size_t> visual_ids(s.ids.begin() + static_cast<std::ptrdiff_t>(system),
                                              s.ids.begin() + static_cast<std::ptrdiff_t>(system + visual));
    s.saliency = toy_cls_attention(embed(s.model, visual_ids), derive_seed(seed, kSaliencySeedCounter));
    return s;
}

struct GridPoint {
    std::size_t layers, dim, visual, keep, depth;
    std::uint64_t seed;
};

// N in {2,4,6}, d in {16,32,64}, |V| in {8,16,32}, k in {1,|V|/2,|V|-1},
// n in {j+1, ceil(N/2), N} with j = 1 (duplicates removed).
inline std::vector<GridPoint> scheduler_grid() {
    std::vector<GridPoint> out;
    std::uint64_t seed = 100;
    for (std::size_t layers : {2, 4, 6}) {
        std::vector<std::size_t> depths;
        for (std::size_t n : {std::size_t{2}, (layers + 1) / 2, layers}) {
            if (std::find(depths.begin(), depths.end(), n) == depths.end()) depths.push_back(n);
        }
        for (std::size_t dim : {16, 32, 64})
            for (std::size_t visual : {8, 16, 32})
                for (std::size_t keep : {std::size_t{1}, visual / 2, visual - 1})
                    for (std::size_t n : depths) out.push_back({layers, dim, visual, keep, n, seed++});
    }
    return out;
}

namespace detail {

inline double elapsed(std::chrono::steady_clock::time_point start) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
}

inline double max_abs_aligned(const Matrix& a, const PositionMap& pa, const Matrix& b, const PositionMap& pb,
                              const PositionMap& wanted) {
    const auto [ra, rb] = align_rows(a, pa, b, pb, wanted);
    return compare_states(ra, rb).max_abs;
}

}  // namespace detail

// Criteria 1-3 and 5 share one pass over the scheduler grid.
inline std::vector<CheckResult> check_scheduler_grid(const VerifyOptions& opt) {
    const auto start = std::chrono::steady_clock::now();
    const auto grid = scheduler_grid();
    constexpr std::size_t kDecodeSteps = 4;

    double oracle_max = 0.0;
    double identity_max = 0.0;
    std::size_t identity_layers = 0;
    double cross_max = 0.0;
    double question_gap_max = 0.0;
    bool gap_finite = true;
    bool positions_match = true;
    std::size_t cache_violations = 0;
    double oracle_seconds = 0.0;

    for (const auto& g : grid) {
        const Scenario sc = make_scenario(g.layers, g.dim, g.visual, g.seed);
        const Partition part = partition_topk(sc.saliency, g.keep);
        ScheduleConfig cfg;
        cfg.migration_depth = g.depth;
        cfg.joint_prefix_layers = 1;
        cfg.fault = opt.fault;

        const auto t0 = std::chrono::steady_clock::now();
        cfg.strategy = Strategy::ParVTSBatch;
        PrefillResult batch = run_parvts_batch(sc.model, sc.ids, sc.layout, part, cfg);
        const OracleResult oracle = oracle_two_pass(sc.model, sc.ids, sc.layout, part, cfg);
        oracle_seconds += detail::elapsed(t0);
        if (oracle.positions != batch.positions) {
            positions_match = false;
        } else {
            oracle_max = std::max(oracle_max, compare_states(batch.hidden, oracle.hidden).max_abs);
        }
        for (double gap : batch.system_identity_gap) identity_max = std::max(identity_max, gap);
        identity_layers += batch.system_identity_gap.size();

        cfg.strategy = Strategy::ParVTSMasked;
        PrefillResult masked = run_parvts_masked(sc.model, sc.ids, sc.layout, part, cfg);
        const detail::Groups groups = detail::make_groups(sc.layout, part);
        const PositionMap sv = detail::merge({&groups.system, &groups.subject});
        cross_max = std::max(cross_max, detail::max_abs_aligned(batch.migration_state, batch.migration_positions,
                                                                masked.migration_state, masked.migration_positions, sv));
        const double q_gap = detail::max_abs_aligned(batch.migration_state, batch.migration_positions,
                                                     masked.migration_state, masked.migration_positions,
                                                     groups.question);
        gap_finite = gap_finite && std::isfinite(q_gap);
        question_gap_max = std::max(question_gap_max, q_gap);

        const std::size_t expected = sc.layout.system_span.size() + g.keep + sc.layout.question_span.size() +
                                     kDecodeSteps;
        for (PrefillResult* r : {&batch, &masked}) {
            const std::size_t first = argmax(logits_from_hidden(sc.model, r->hidden.row(r->hidden.rows() - 1)));
            greedy_decode(sc.model, r->cache, first, kDecodeSteps, sc.layout.output_start);
            for (std::size_t l = 0; l < r->cache.num_layers(); ++l) {
                if (r->cache.entries(l) != expected) ++cache_violations;
            }
            for (std::size_t p : groups.nonsubject) {
                if (r->cache.contains(p)) ++cache_violations;
            }
        }
    }

    const std::string configs = "configs=" + std::to_string(grid.size());
    std::vector<CheckResult> out;
    out.push_back({"C1", "oracle_equivalence",
                   positions_match && oracle_max <= kOracleTolerance && oracle_seconds < kOracleTimeLimitSeconds,
                   configs + " max_abs=" + format_number(oracle_max) + " tol=" + format_number(kOracleTolerance) +
                       (positions_match ? "" : " position-mismatch"),
                   oracle_seconds});
    out.push_back({"C2", "system_token_identity", identity_max <= kSystemIdentityTolerance && identity_layers > 0,
                   configs + " branch_layers=" + std::to_string(identity_layers) +
                       " max_abs=" + format_number(identity_max),
                   0.0});
    out.push_back({"C3", "cross_mode_rows", cross_max <= kCrossModeTolerance && gap_finite,
                   configs + " s_vsub_max_abs=" + format_number(cross_max) +
                       " question_gap_max=" + format_number(question_gap_max),
                   0.0});
    out.push_back({"C5", "kv_cache_pruning", cache_violations == 0,
                   configs + " decode_steps=" + std::to_string(kDecodeSteps) +
                       " violations=" + std::to_string(cache_violations),
                   detail::elapsed(start)});
    return out;
}

inline CheckResult check_reduction_chain() {
    const auto start = std::chrono::steady_clock::now();
    double worst = 0.0;
    std::size_t cases = 0;
    std::uint64_t seed = 900;
    for (std::size_t layers : {2, 4, 6}) {
        for (std::size_t dim : {16, 32}) {
            const Scenario sc = make_scenario(layers, dim, 12, seed++);
            const PrefillResult vanilla = run_vanilla(sc.model, sc.ids, sc.layout);
            const Partition all = partition_topk(sc.saliency, sc.saliency.size());
            const Partition none = partition_topk(sc.saliency, 0);

            auto compare = [&](const PrefillResult& r) {
                if (r.positions != vanilla.positions) {
                    worst = std::numeric_limits<double>::infinity();
                    return;
                }
                worst = std::max(worst, compare_states(r.hidden, vanilla.hidden).max_abs);
                ++cases;
            };
            ScheduleConfig cfg;
            cfg.joint_prefix_layers = 1;

            cfg.strategy = Strategy::ParVTSBatch;
            cfg.migration_depth = layers;
            cfg.alpha = 0.0;
            cfg.beta = 1.0;
            compare(run_parvts_batch(sc.model, sc.ids, sc.layout, all, cfg));
            const OracleResult o = oracle_two_pass(sc.model, sc.ids, sc.layout, all, cfg);
            if (o.positions == vanilla.positions) {
                worst = std::max(worst, compare_states(o.hidden, vanilla.hidden).max_abs);
            } else {
                worst = std::numeric_limits<double>::infinity();
            }

            cfg.strategy = Strategy::ParVTSMasked;
            cfg.migration_depth = cfg.joint_prefix_layers;
            cfg.alpha = cfg.beta = 0.5;
            compare(run_parvts_masked(sc.model, sc.ids, sc.layout, all, cfg));

            cfg.strategy = Strategy::SubjectFirst;
            cfg.migration_depth = layers;
            compare(run_subject_first(sc.model, sc.ids, sc.layout, all, cfg));

            cfg.strategy = Strategy::NonSubjectFirst;
            compare(run_nonsubject_first(sc.model, sc.ids, sc.layout, none, cfg));
        }
    }
    return {"C4", "reduction_chain", worst <= kReductionTolerance,
            "cases=" + std::to_string(cases) + " max_abs=" + format_number(worst), detail::elapsed(start)};
}

inline CheckResult check_cost_identities() {
    const auto start = std::chrono::steady_clock::now();
    Rng rng(20240601);
    std::size_t step_mismatch = 0;
    double ratio_err = 0.0;
    for (int i = 0; i < 100; ++i) {
        CostParams c = CostParams::make(static_cast<double>(rng.next_below(11)) / 10.0, 1, 1 + rng.next_below(64),
                                        rng.next_below(2049), rng.next_below(2049), rng.next_below(1001),
                                        1 + rng.next_below(4096), 1 + rng.next_below(16384));
        c.n = 1 + static_cast<std::size_t>(rng.next_below(c.N));
        if (decoding_flops_vanilla(c, SumMode::Stepwise) != decoding_flops_vanilla(c, SumMode::Closed)) {
            ++step_mismatch;
        }
        if (c.M >= 1 && c.L > 0) {
            const double direct = decoding_flops_vanilla(c) / decoding_flops_parvts(c);
            ratio_err = std::max(ratio_err, std::abs(direct - speedup_decoding(c)) / speedup_decoding(c));
        }
    }

    // 10 p x 5 n x 4 L_img x 5 L_text = 1000 points.
    std::size_t grid_points = 0;
    std::size_t below_one = 0;
    std::size_t equality_mismatch = 0;
    for (int pi = 0; pi < 10; ++pi)
        for (std::size_t n = 1; n <= 5; ++n)
            for (std::size_t l_img : {0, 16, 64, 576})
                for (std::size_t l_text : {1, 8, 40, 100, 300}) {
                    const double p = pi / 10.0;
                    const CostParams c = CostParams::make(p, n, 5, l_text, l_img, 16, 64, 172);
                    const double rho = speedup_prefill(c);
                    ++grid_points;
                    if (rho < 1.0) ++below_one;
                    const bool expect_equal = p == 0.0 || n == c.N || l_img == 0;
                    if ((rho == 1.0) != expect_equal) ++equality_mismatch;
                }

    const bool ok = step_mismatch == 0 && ratio_err <= kDecodingRatioRelTolerance && below_one == 0 &&
                    equality_mismatch == 0;
    return {"C6", "cost_identities", ok,
            "tuples=100 stepwise_mismatch=" + std::to_string(step_mismatch) +
                " max_ratio_rel_err=" + format_number(ratio_err) + " grid=" + std::to_string(grid_points) +
                " below_one=" + std::to_string(below_one) + " equality_mismatch=" + std::to_string(equality_mismatch),
            detail::elapsed(start)};
}

inline CheckResult check_monotonicity() {
    const auto start = std::chrono::steady_clock::now();
    constexpr std::size_t N = 32;
    std::size_t violations = 0;
    std::size_t comparisons = 0;
    for (int pi = 1; pi <= 10; ++pi) {
        const double p = pi / 10.0;
        for (std::size_t n = 1; n <= N; ++n) {
            for (std::size_t M = 1; M <= 64; ++M) {
                const CostParams c = CostParams::make(p, n, N, 64, 576, M, 4096, 11008);
                if (M < 64) {
                    CostParams next = c;
                    next.M = M + 1;
                    ++comparisons;
                    if (!(speedup_decoding(next) < speedup_decoding(c))) ++violations;
                }
                if (n < N) {
                    CostParams deeper = c;
                    deeper.n = n + 1;
                    comparisons += 2;
                    if (speedup_decoding(deeper) != speedup_decoding(c)) ++violations;
                    if (!(speedup_prefill(deeper) <= speedup_prefill(c))) ++violations;
                }
                if (pi < 10) {
                    CostParams more = c;
                    more.p = (pi + 1) / 10.0;
                    ++comparisons;
                    if (!(speedup_prefill(more) >= speedup_prefill(c))) ++violations;
                }
            }
        }
    }
    return {"C7", "monotonicity", violations == 0,
            "comparisons=" + std::to_string(comparisons) + " violations=" + std::to_string(violations),
            detail::elapsed(start)};
}

struct Table4Fit {
    std::size_t l_text = 0;
    std::array<double, 3> ratios{};
    double total_deviation = 0.0;
};

// Prefill FLOPs ratio (ParVTS / vanilla) for LLaVA-1.5-7B at the three
// token budgets, with L_text fitted over [10, 200].
inline Table4Fit fit_table4() {
    constexpr std::array<std::size_t, 3> kept = {161, 103, 46};
    constexpr std::array<double, 3> published = {0.4434, 0.3726, 0.3031};
    const std::size_t n = lookup_migration_depth("LLaVA-1.5-7B").value_or(0);
    Table4Fit best;
    best.total_deviation = std::numeric_limits<double>::infinity();
    for (std::size_t l_text = 10; l_text <= 200; ++l_text) {
        Table4Fit cur;
        cur.l_text = l_text;
        for (std::size_t i = 0; i < kept.size(); ++i) {
            const double p = 1.0 - static_cast<double>(kept[i]) / 576.0;
            const CostParams c = CostParams::make(p, n, 32, l_text, 576, 1, 4096, 11008);
            cur.ratios[i] = 1.0 / speedup_prefill(c);
            cur.total_deviation += std::abs(cur.ratios[i] - published[i]);
        }
        if (cur.total_deviation < best.total_deviation) best = cur;
    }
    return best;
}

inline CheckResult check_table4() {
    const auto start = std::chrono::steady_clock::now();
    constexpr std::array<double, 3> published = {0.4434, 0.3726, 0.3031};
    const Table4Fit fit = fit_table4();
    bool ok = fit.ratios[0] > fit.ratios[1] && fit.ratios[1] > fit.ratios[2];
    for (std::size_t i = 0; i < 3; ++i) ok = ok && std::abs(fit.ratios[i] - published[i]) <= kTable4PointTolerance;
    const double seconds = detail::elapsed(start);
    ok = ok && seconds < kTable4TimeLimitSeconds;
    return {"C8", "table4_flops_ratio", ok,
            "L_text=" + std::to_string(fit.l_text) + " ratios=" +
                format_list(std::vector<double>(fit.ratios.begin(), fit.ratios.end())) +
                " published=[0.4434, 0.3726, 0.3031]",
            seconds};
}

inline CheckResult check_presets() {
    struct Expected {
        const char* name;
        std::size_t depth;
    };
    static constexpr Expected expected[] = {
        {"LLaVA-1.5-7B", 3},     {"LLaVA-1.5-13B", 3},   {"LLaVA-Next-7B", 16},  {"LLaVA-Next-13B", 16},
        {"Qwen2.5-VL-3B", 18},   {"Qwen2.5-VL-7B", 18},  {"Qwen3-VL-2B", 10},    {"Qwen3-VL-4B", 12},
        {"Qwen3-VL-8B", 12},     {"InternVL2-2B", 18},   {"InternVL2-8B", 16},   {"InternVL2.5-2B", 18},
        {"InternVL2.5-8B", 16},  {"Video-LLaVA-7B", 24},
    };
    std::size_t mismatches = 0;
    for (const auto& e : expected) {
        if (lookup_migration_depth(e.name) != e.depth) ++mismatches;
    }
    const std::size_t size = preset_migration_depths().size();
    const bool ok = mismatches == 0 && size == std::size(expected) && !lookup_migration_depth("GPT-4V").has_value();
    return {"C9", "preset_table", ok,
            "entries=" + std::to_string(size) + " mismatches=" + std::to_string(mismatches), 0.0};
}

inline ExperimentConfig builtin_experiment() {
    ExperimentConfig cfg;
    cfg.model.num_layers = 4;
    cfg.model.hidden_dim = 32;
    cfg.model.num_heads = 4;
    cfg.model.mlp_dim = 64;
    cfg.model.master_seed = 7;
    cfg.visual_tokens = 16;
    cfg.keep_count = 6;
    cfg.schedule.migration_depth = 2;
    cfg.strategies = {Strategy::ParVTSBatch, Strategy::ParVTSMasked, Strategy::SubjectFirst,
                      Strategy::NonSubjectFirst};
    cfg.decode_steps = 8;
    return cfg;
}

inline CheckResult check_report_determinism() {
    const auto start = std::chrono::steady_clock::now();
    const std::string a = format_report(run_experiment(builtin_experiment()));
    const std::string b = format_report(run_experiment(builtin_experiment()));
    return {"C10", "report_determinism", a == b && !a.empty(),
            "bytes=" + std::to_string(a.size()) + (a == b ? " identical" : " differ"), detail::elapsed(start)};
}

inline VerifyReport run_verification(const VerifyOptions& opt = {}) {
    VerifyReport report;
    for (auto& c : check_scheduler_grid(opt)) report.checks.push_back(std::move(c));
    report.checks.push_back(check_reduction_chain());
    report.checks.push_back(check_cost_identities());
    report.checks.push_back(check_monotonicity());
    report.checks.push_back(check_table4());
    report.checks.push_back(check_presets());
    report.checks.push_back(check_report_determinism());
    std::stable_sort(report.checks.begin(), report.checks.end(), [](const CheckResult& a, const CheckResult& b) {
        return std::stoi(a.id.substr(1)) < std::stoi(b.id.substr(1));
    });
    return report;
}

}  // namespace parvts
