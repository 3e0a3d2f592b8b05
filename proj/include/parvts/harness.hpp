#pragma once

#include <algorithm>
#include <cstdint>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "parvts/config.hpp"
#include "parvts/cost_model.hpp"
#include "parvts/oracle.hpp"
#include "parvts/saliency.hpp"
#include "parvts/scheduler.hpp"
#include "parvts/text.hpp"
#include "parvts/transformer.hpp"

namespace parvts {

inline constexpr int kReportSchemaVersion = 1;

// Seed counters for experiment inputs; model weights use the low counters.
inline constexpr std::uint64_t kTokenSeedCounter = 1000;
inline constexpr std::uint64_t kSaliencySeedCounter = 1001;

struct StrategyReport {
    Strategy strategy = Strategy::Vanilla;
    std::size_t migration_depth = 0;
    double alpha = 0.0;
    double beta = 0.0;
    std::size_t tokens_subject = 0;
    std::size_t tokens_nonsubject = 0;
    std::vector<PhaseCount> phases;
    double prefill_flops = 0.0;
    double decoding_flops = 0.0;
    double rho_prefill = 1.0;
    double rho_decoding = 1.0;
    std::vector<std::size_t> cache_entries_per_layer;
    std::vector<std::size_t> decoded_ids;  // prefill prediction, then one per decode step
    double agreement_vs_vanilla = 1.0;
    StateDistance divergence_vs_vanilla;             // final question rows
    std::optional<StateDistance> divergence_vs_oracle;  // ParVTSBatch only
    std::optional<double> masked_batch_gap;          // question rows entering layer n+1
};

struct RunReport {
    ExperimentConfig config;
    std::vector<std::size_t> token_ids;
    Partition partition;
    std::vector<StrategyReport> strategies;
};

inline std::vector<std::size_t> synthesize_tokens(std::uint64_t master_seed, std::size_t count, std::size_t vocab) {
    Rng rng(derive_seed(master_seed, kTokenSeedCounter));
    std::vector<std::size_t> ids(count);
    for (auto& id : ids) id = static_cast<std::size_t>(rng.next_below(vocab));
    return ids;
}

// Analytic FLOPs for one strategy under the experiment's token counts.
inline void fill_costs(StrategyReport& r, const ExperimentConfig& cfg, const Partition& partition) {
    const std::size_t l_text = cfg.system_tokens + cfg.question_tokens;
    const CostParams params =
        CostParams::make(partition.pruning_rate, cfg.schedule.migration_depth, cfg.model.num_layers, l_text,
                         cfg.visual_tokens, cfg.decode_steps, cfg.model.hidden_dim, cfg.model.mlp_dim);
    const double vanilla_prefill = prefill_flops_vanilla(params);
    const double vanilla_decoding = decoding_flops_vanilla(params);
    const double d = static_cast<double>(params.d);
    const double m = static_cast<double>(params.m);
    switch (r.strategy) {
        case Strategy::Vanilla:
            r.prefill_flops = vanilla_prefill;
            r.decoding_flops = vanilla_decoding;
            break;
        case Strategy::ParVTSBatch:
        case Strategy::ParVTSMasked:
            r.prefill_flops = prefill_flops_parvts(params);
            r.decoding_flops = decoding_flops_parvts(params);
            break;
        case Strategy::SubjectFirst:
        case Strategy::NonSubjectFirst: {
            // Two stages with their own row counts; decoding sees each layer's cache.
            const bool subject_first = r.strategy == Strategy::SubjectFirst;
            const double first = static_cast<double>(subject_first ? partition.subject_indices.size()
                                                                   : partition.nonsubject_indices.size());
            const double second = static_cast<double>(cfg.visual_tokens) - first;
            const std::size_t n = params.n;
            r.prefill_flops = static_cast<double>(n) * flops_layer(d, m, static_cast<double>(l_text) + first) +
                              static_cast<double>(params.N - n) * flops_layer(d, m, static_cast<double>(l_text) + second);
            r.decoding_flops =
                decoding_flops_for_cache(static_cast<double>(n), d, m, static_cast<double>(l_text) + first, params.M,
                                         SumMode::Closed) +
                decoding_flops_for_cache(static_cast<double>(params.N - n), d, m,
                                         static_cast<double>(l_text) + second, params.M, SumMode::Closed);
            break;
        }
    }
    r.rho_prefill = vanilla_prefill / r.prefill_flops;
    r.rho_decoding = r.decoding_flops > 0.0 ? vanilla_decoding / r.decoding_flops : 1.0;
}

struct DecodedRun {
    PrefillResult prefill;
    std::vector<std::size_t> decoded_ids;
};

inline DecodedRun prefill_and_decode(const Model& model, std::span<const std::size_t> ids, const SequenceLayout& layout,
                                     const Partition& partition, const ScheduleConfig& schedule, std::size_t steps) {
    DecodedRun run{run_strategy(model, ids, layout, partition, schedule), {}};
    const auto& h = run.prefill.hidden;
    const std::size_t first = argmax(logits_from_hidden(model, h.row(h.rows() - 1)));
    run.decoded_ids.push_back(first);
    const auto emitted = greedy_decode(model, run.prefill.cache, first, steps, layout.output_start);
    run.decoded_ids.insert(run.decoded_ids.end(), emitted.begin(), emitted.end());
    return run;
}

inline PositionMap question_positions(const SequenceLayout& layout) {
    PositionMap out;
    for (std::size_t p = layout.question_span.begin; p < layout.question_span.end; ++p) out.push_back(p);
    return out;
}

inline RunReport run_experiment(const ExperimentConfig& cfg) {
    validate_experiment(cfg);
    const Model model = build_model(cfg.model);
    const SequenceLayout layout =
        SequenceLayout::from_counts(cfg.system_tokens, cfg.visual_tokens, cfg.question_tokens);

    RunReport report;
    report.config = cfg;
    report.token_ids = synthesize_tokens(cfg.model.master_seed, layout.output_start, cfg.model.vocab_size);

    SaliencyScores saliency;
    if (cfg.saliency == "toy") {
        if (cfg.visual_tokens > 0) {
            const std::vector<std::size_t> visual_ids(report.token_ids.begin() + static_cast<std::ptrdiff_t>(layout.visual_span.begin),
                                                      report.token_ids.begin() + static_cast<std::ptrdiff_t>(layout.visual_span.end));
            saliency = toy_cls_attention(embed(model, visual_ids),
                                         derive_seed(cfg.model.master_seed, kSaliencySeedCounter));
        }
    } else {
        saliency = load_saliency(cfg.saliency);
        if (saliency.size() != cfg.visual_tokens) {
            throw ConfigError("partition.saliency", "file holds " + std::to_string(saliency.size()) +
                                                        " scores but tokens.visual is " +
                                                        std::to_string(cfg.visual_tokens));
        }
    }
    report.partition = partition_topk(saliency, cfg.keep_count);
    const Partition& partition = report.partition;

    std::vector<Strategy> order{Strategy::Vanilla};
    for (Strategy s : cfg.strategies) {
        if (std::find(order.begin(), order.end(), s) == order.end()) order.push_back(s);
    }

    const PositionMap q_pos = question_positions(layout);
    ScheduleConfig schedule = cfg.schedule;

    std::optional<double> gap;
    if (std::any_of(order.begin(), order.end(), is_parvts)) {
        schedule.strategy = Strategy::ParVTSBatch;
        const auto batch = run_parvts_batch(model, report.token_ids, layout, partition, schedule);
        schedule.strategy = Strategy::ParVTSMasked;
        const auto masked = run_parvts_masked(model, report.token_ids, layout, partition, schedule);
        const auto [a, b] = align_rows(batch.migration_state, batch.migration_positions, masked.migration_state,
                                       masked.migration_positions, q_pos);
        gap = compare_states(a, b).max_abs;
    }

    DecodedRun vanilla;
    for (Strategy s : order) {
        schedule.strategy = s;
        DecodedRun run = prefill_and_decode(model, report.token_ids, layout, partition, schedule, cfg.decode_steps);
        if (s == Strategy::Vanilla) vanilla = run;

        StrategyReport r;
        r.strategy = s;
        r.migration_depth = schedule.migration_depth;
        r.alpha = schedule.alpha;
        r.beta = schedule.beta;
        r.tokens_subject = partition.subject_indices.size();
        r.tokens_nonsubject = partition.nonsubject_indices.size();
        r.phases = run.prefill.phases;
        fill_costs(r, cfg, partition);
        r.cache_entries_per_layer = run.prefill.cache.entries_per_layer();
        r.decoded_ids = run.decoded_ids;

        std::size_t agree = 0;
        for (std::size_t i = 0; i < r.decoded_ids.size(); ++i) {
            agree += r.decoded_ids[i] == vanilla.decoded_ids[i] ? 1 : 0;
        }
        r.agreement_vs_vanilla = static_cast<double>(agree) / static_cast<double>(r.decoded_ids.size());
        const auto [mine, base] = align_rows(run.prefill.hidden, run.prefill.positions, vanilla.prefill.hidden,
                                             vanilla.prefill.positions, q_pos);
        r.divergence_vs_vanilla = compare_states(mine, base);
        if (s == Strategy::ParVTSBatch) {
            const OracleResult o = oracle_two_pass(model, report.token_ids, layout, partition, schedule);
            r.divergence_vs_oracle = compare_states(run.prefill.hidden, o.hidden);
        }
        if (is_parvts(s)) r.masked_batch_gap = gap;
        report.strategies.push_back(std::move(r));
    }
    return report;
}

inline std::string format_report(const RunReport& report) {
    std::ostringstream os;
    os << "schema_version = " << kReportSchemaVersion << "\n";
    os << "config {\n";
    for (const auto& [key, value] : echo_config(report.config)) os << "  " << key << " = " << value << "\n";
    os << "}\n";
    for (const auto& r : report.strategies) {
        os << "strategy {\n";
        os << "  strategy = " << to_string(r.strategy) << "\n";
        os << "  n = " << r.migration_depth << "\n";
        os << "  alpha = " << format_number(r.alpha) << "\n";
        os << "  beta = " << format_number(r.beta) << "\n";
        os << "  tokens_subject = " << r.tokens_subject << "\n";
        os << "  tokens_nonsubject = " << r.tokens_nonsubject << "\n";
        os << "  prefill_flops = " << format_number(r.prefill_flops) << "\n";
        os << "  decoding_flops = " << format_number(r.decoding_flops) << "\n";
        os << "  rho_prefill = " << format_number(r.rho_prefill) << "\n";
        os << "  rho_decoding = " << format_number(r.rho_decoding) << "\n";
        os << "  cache_entries_per_layer = " << format_list(r.cache_entries_per_layer) << "\n";
        os << "  decoded_ids = " << format_list(r.decoded_ids) << "\n";
        os << "  agreement_vs_vanilla = " << format_number(r.agreement_vs_vanilla) << "\n";
        os << "  max_divergence_vs_vanilla = " << format_number(r.divergence_vs_vanilla.max_abs) << "\n";
        os << "  masked_batch_gap = " << (r.masked_batch_gap ? format_number(*r.masked_batch_gap) : "none") << "\n";
        os << "}\n";
    }
    return os.str();
}

// Cartesian grid over cost parameters; L is always L_text + L_img.
struct CostGrid {
    std::vector<double> p{0.0};
    std::vector<std::size_t> n{3};
    std::vector<std::size_t> N{32};
    std::vector<std::size_t> L_text{64};
    std::vector<std::size_t> L_img{576};
    std::vector<std::size_t> M{1};
    std::vector<std::size_t> d{4096};
    std::vector<std::size_t> m{11008};

    static CostGrid around(const CostParams& c) {
        return CostGrid{{c.p}, {c.n}, {c.N}, {c.L_text}, {c.L_img}, {c.M}, {c.d}, {c.m}};
    }
};

struct SweepRow {
    CostParams params;
    CostReport report;
};

inline std::vector<SweepRow> sweep_cost(const CostGrid& g) {
    if (g.p.empty() || g.n.empty() || g.N.empty() || g.L_text.empty() || g.L_img.empty() || g.M.empty() ||
        g.d.empty() || g.m.empty()) {
        throw std::invalid_argument("sweep_cost: every grid axis needs at least one value");
    }
    std::vector<SweepRow> rows;
    for (double p : g.p)
        for (std::size_t n : g.n)
            for (std::size_t N : g.N)
                for (std::size_t lt : g.L_text)
                    for (std::size_t li : g.L_img)
                        for (std::size_t M : g.M)
                            for (std::size_t d : g.d)
                                for (std::size_t m : g.m) {
                                    const CostParams c = CostParams::make(p, n, N, lt, li, M, d, m);
                                    rows.push_back({c, cost_report(c)});
                                }
    return rows;
}

inline constexpr const char* kSweepHeader =
    "p,n,N,L_text,L_img,M,d,m,prefill_flops_vanilla,prefill_flops_parvts,decoding_flops_vanilla,"
    "decoding_flops_parvts,rho_prefill,rho_decoding";

inline std::string format_sweep_csv(const std::vector<SweepRow>& rows) {
    std::ostringstream os;
    os << kSweepHeader << "\n";
    for (const auto& [c, r] : rows) {
        os << format_number(c.p) << ',' << c.n << ',' << c.N << ',' << c.L_text << ',' << c.L_img << ',' << c.M
           << ',' << c.d << ',' << c.m << ',' << format_number(r.prefill_flops_vanilla) << ','
           << format_number(r.prefill_flops_parvts) << ',' << format_number(r.decoding_flops_vanilla) << ','
           << format_number(r.decoding_flops_parvts) << ',' << format_number(r.rho_prefill) << ','
           << format_number(r.rho_decoding) << "\n";
    }
    return os.str();
}

}  // namespace parvts
