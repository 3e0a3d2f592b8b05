#pragma once

#include <algorithm>
#include <cmath>
#include <set>
#include <span>
#include <stdexcept>
#include <string>
#include <string_view>
#include <vector>

#include "parvts/numerics.hpp"
#include "parvts/saliency.hpp"
#include "parvts/transformer.hpp"

namespace parvts {

enum class Strategy { Vanilla, ParVTSBatch, ParVTSMasked, SubjectFirst, NonSubjectFirst };

inline std::string_view to_string(Strategy s) {
    switch (s) {
        case Strategy::Vanilla: return "Vanilla";
        case Strategy::ParVTSBatch: return "ParVTSBatch";
        case Strategy::ParVTSMasked: return "ParVTSMasked";
        case Strategy::SubjectFirst: return "SubjectFirst";
        case Strategy::NonSubjectFirst: return "NonSubjectFirst";
    }
    return "?";
}

inline Strategy parse_strategy(std::string_view name) {
    for (Strategy s : {Strategy::Vanilla, Strategy::ParVTSBatch, Strategy::ParVTSMasked, Strategy::SubjectFirst,
                       Strategy::NonSubjectFirst}) {
        if (name == to_string(s)) return s;
    }
    throw std::invalid_argument("unknown strategy '" + std::string(name) + "'");
}

inline bool is_parvts(Strategy s) { return s == Strategy::ParVTSBatch || s == Strategy::ParVTSMasked; }

// Deliberate defects for checking that verification catches them.
enum class FaultInjection { None, IgnoreBeta };

struct ScheduleConfig {
    Strategy strategy = Strategy::ParVTSBatch;
    std::size_t migration_depth = 2;  // n, counted in layers from the input
    double alpha = 0.5;               // weight of the non-subject branch
    double beta = 0.5;                // weight of the subject branch
    std::size_t joint_prefix_layers = 1;
    FaultInjection fault = FaultInjection::None;

    void validate(std::size_t num_layers) const {
        if (strategy == Strategy::Vanilla) return;
        if (migration_depth < 1 || migration_depth > num_layers) {
            throw std::invalid_argument("ScheduleConfig: migration_depth must lie in [1, " +
                                        std::to_string(num_layers) + "]");
        }
        if (joint_prefix_layers > migration_depth) {
            throw std::invalid_argument("ScheduleConfig: joint_prefix must not exceed migration_depth");
        }
        if (!(alpha >= 0.0) || !(beta >= 0.0) || std::abs(alpha + beta - 1.0) > 1e-12) {
            throw std::invalid_argument("ScheduleConfig: alpha and beta must be non-negative and sum to 1");
        }
    }
};

struct PhaseCount {
    std::string phase;
    LayerRange layers;
    std::size_t rows = 0;
};

struct PrefillResult {
    Matrix hidden;  // after the last layer, before the final norm
    PositionMap positions;
    KVCache cache;
    std::vector<PhaseCount> phases;

    // State entering layer n+1: fused state (batch), retained rows (masked),
    // or the post-ReplaceVision state (sequential). Empty for Vanilla.
    Matrix migration_state;
    PositionMap migration_positions;

    // Batch mode: max |S_non - S_sub| after each branch layer.
    std::vector<double> system_identity_gap;
    bool collapsed = false;
};

inline Matrix fuse_question_states(const Matrix& t_non, const Matrix& t_sub, double alpha, double beta) {
    if (t_non.rows() != t_sub.rows() || t_non.cols() != t_sub.cols()) {
        throw std::invalid_argument("fuse_question_states: shape mismatch");
    }
    if (!(alpha >= 0.0) || !(beta >= 0.0) || std::abs(alpha + beta - 1.0) > 1e-12) {
        throw std::invalid_argument("fuse_question_states: alpha and beta must be non-negative and sum to 1");
    }
    Matrix out(t_non.rows(), t_non.cols());
    for (std::size_t i = 0; i < out.data().size(); ++i) {
        out.data()[i] = alpha * t_non.data()[i] + beta * t_sub.data()[i];
    }
    return out;
}

inline KVCache prune_cache(const KVCache& cache, std::span<const std::size_t> drop_positions) {
    const std::set<std::size_t> drop(drop_positions.begin(), drop_positions.end());
    for (std::size_t p : drop) {
        if (!cache.contains(p)) {
            throw std::invalid_argument("prune_cache: position " + std::to_string(p) + " is not cached");
        }
    }
    KVCache out(cache.num_layers());
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        for (const auto& e : cache.layers[l]) {
            if (!drop.count(e.position)) out.layers[l].push_back(e);
        }
    }
    return out;
}

namespace detail {

struct Groups {
    PositionMap system, subject, nonsubject, question;
};

inline Groups make_groups(const SequenceLayout& layout, const Partition& partition) {
    Groups g;
    for (std::size_t p = layout.system_span.begin; p < layout.system_span.end; ++p) g.system.push_back(p);
    for (std::size_t i : partition.subject_indices) g.subject.push_back(layout.visual_span.begin + i);
    for (std::size_t i : partition.nonsubject_indices) g.nonsubject.push_back(layout.visual_span.begin + i);
    for (std::size_t p = layout.question_span.begin; p < layout.question_span.end; ++p) g.question.push_back(p);
    return g;
}

inline PositionMap merge(std::initializer_list<const PositionMap*> parts) {
    PositionMap out;
    for (const auto* p : parts) out.insert(out.end(), p->begin(), p->end());
    std::sort(out.begin(), out.end());
    return out;
}

inline PositionMap iota_positions(std::size_t n) {
    PositionMap out(n);
    for (std::size_t i = 0; i < n; ++i) out[i] = i;
    return out;
}

inline std::vector<std::size_t> ids_at(std::span<const std::size_t> token_ids, const PositionMap& positions) {
    std::vector<std::size_t> out;
    out.reserve(positions.size());
    for (std::size_t p : positions) out.push_back(token_ids[p]);
    return out;
}

// Row indices of `wanted` inside `positions` (both sorted).
inline std::vector<std::size_t> rows_of(const PositionMap& positions, const PositionMap& wanted) {
    std::vector<std::size_t> out;
    out.reserve(wanted.size());
    for (std::size_t w : wanted) {
        const auto it = std::lower_bound(positions.begin(), positions.end(), w);
        if (it == positions.end() || *it != w) {
            throw std::logic_error("rows_of: position " + std::to_string(w) + " not active");
        }
        out.push_back(static_cast<std::size_t>(it - positions.begin()));
    }
    return out;
}

// Causal pass, one layer at a time so each layer sees its own cache prefix.
inline Matrix run_causal(const Model& model, Matrix hidden, const PositionMap& positions, LayerRange range,
                         KVCache& cache, bool record) {
    for (std::size_t l = range.begin; l < range.end; ++l) {
        const BoolMatrix mask = causal_mask(key_positions(cache, l, positions), positions);
        hidden = run_layers(model, std::move(hidden), positions, {l, l + 1}, mask, cache, record);
    }
    return hidden;
}

inline void validate_inputs(const Model& model, std::span<const std::size_t> token_ids, const SequenceLayout& layout,
                            const Partition* partition, const ScheduleConfig* cfg) {
    layout.validate();
    if (token_ids.size() != layout.output_start) {
        throw std::invalid_argument("layout covers " + std::to_string(layout.output_start) + " tokens but " +
                                    std::to_string(token_ids.size()) + " ids were given");
    }
    if (token_ids.empty()) {
        throw std::invalid_argument("empty prompt");
    }
    if (partition) {
        if (partition->visual_count() != layout.visual_span.size()) {
            throw std::invalid_argument("partition size does not match the visual span");
        }
        std::vector<std::size_t> all(partition->subject_indices);
        all.insert(all.end(), partition->nonsubject_indices.begin(), partition->nonsubject_indices.end());
        std::sort(all.begin(), all.end());
        for (std::size_t i = 0; i < all.size(); ++i) {
            if (all[i] != i) throw std::invalid_argument("partition is not a split of the visual span");
        }
    }
    if (cfg) cfg->validate(model.config.num_layers);
}

inline PositionMap present_in_cache(const KVCache& cache, const PositionMap& candidates) {
    PositionMap out;
    for (std::size_t p : candidates) {
        if (cache.contains(p)) out.push_back(p);
    }
    return out;
}

inline double max_abs_rows(const Matrix& a, const Matrix& b, std::size_t count) {
    double gap = 0.0;
    for (std::size_t r = 0; r < count; ++r) {
        for (std::size_t c = 0; c < a.cols(); ++c) gap = std::max(gap, std::abs(a(r, c) - b(r, c)));
    }
    return gap;
}

// One sequential schedule: `first` visual group through layers [0, n), then
// ReplaceVision swaps in the layer-0 embeddings of `second` for [n, N).
inline PrefillResult run_sequential(const Model& model, std::span<const std::size_t> token_ids, const Groups& g,
                                    const PositionMap& first, const PositionMap& second, std::size_t n) {
    const std::size_t depth = model.config.num_layers;
    PrefillResult out;
    out.cache = KVCache(depth);

    const PositionMap stage1_pos = merge({&g.system, &first, &g.question});
    Matrix hidden = embed(model, ids_at(token_ids, stage1_pos));
    hidden = run_causal(model, std::move(hidden), stage1_pos, {0, n}, out.cache, true);
    out.phases.push_back({"stage1", {0, n}, stage1_pos.size()});

    if (n == depth) {
        out.migration_state = hidden;
        out.migration_positions = stage1_pos;
        out.hidden = std::move(hidden);
        out.positions = stage1_pos;
        return out;
    }

    const PositionMap stage2_pos = merge({&g.system, &second, &g.question});
    const Matrix incoming = embed(model, ids_at(token_ids, second));
    Matrix swapped(stage2_pos.size(), model.config.hidden_dim);
    std::size_t next_incoming = 0;
    for (std::size_t r = 0; r < stage2_pos.size(); ++r) {
        const std::size_t p = stage2_pos[r];
        const bool is_visual = std::binary_search(second.begin(), second.end(), p);
        const auto src = is_visual ? incoming.row(next_incoming++) : hidden.row(rows_of(stage1_pos, {p})[0]);
        std::copy(src.begin(), src.end(), swapped.row(r).begin());
    }
    out.migration_state = swapped;
    out.migration_positions = stage2_pos;
    out.hidden = run_causal(model, std::move(swapped), stage2_pos, {n, depth}, out.cache, true);
    out.positions = stage2_pos;
    out.phases.push_back({"stage2", {n, depth}, stage2_pos.size()});
    return out;
}

}  // namespace detail

inline PrefillResult run_vanilla(const Model& model, std::span<const std::size_t> token_ids,
                                 const SequenceLayout& layout) {
    detail::validate_inputs(model, token_ids, layout, nullptr, nullptr);
    const std::size_t depth = model.config.num_layers;
    PrefillResult out;
    out.cache = KVCache(depth);
    out.positions = detail::iota_positions(token_ids.size());
    out.hidden = detail::run_causal(model, embed(model, token_ids), out.positions, {0, depth}, out.cache, true);
    out.phases.push_back({"full", {0, depth}, token_ids.size()});
    return out;
}

// Two branches [S, V_non, T] and [S, V_sub, T] run layers (j, n] from the
// joint-prefix output; question rows are fused and [S, V_sub, T~] continues.
inline PrefillResult run_parvts_batch(const Model& model, std::span<const std::size_t> token_ids,
                                      const SequenceLayout& layout, const Partition& partition,
                                      const ScheduleConfig& cfg) {
    detail::validate_inputs(model, token_ids, layout, &partition, &cfg);
    const std::size_t depth = model.config.num_layers;
    const std::size_t j = cfg.joint_prefix_layers;
    const std::size_t n = cfg.migration_depth;
    const detail::Groups g = detail::make_groups(layout, partition);

    PrefillResult out;
    out.cache = KVCache(depth);
    const PositionMap all_pos = detail::iota_positions(token_ids.size());
    const Matrix joint = detail::run_causal(model, embed(model, token_ids), all_pos, {0, j}, out.cache, true);
    out.phases.push_back({"joint", {0, j}, all_pos.size()});

    const bool has_sub = !g.subject.empty();
    const bool has_non = !g.nonsubject.empty();
    out.collapsed = !(has_sub && has_non);

    const PositionMap sub_pos = detail::merge({&g.system, &g.subject, &g.question});
    const PositionMap non_pos = detail::merge({&g.system, &g.nonsubject, &g.question});
    Matrix sub = gather_rows(joint, std::span<const std::size_t>(detail::rows_of(all_pos, sub_pos)));
    Matrix non = gather_rows(joint, std::span<const std::size_t>(detail::rows_of(all_pos, non_pos)));

    // The subject branch (or the sole branch) owns the cache for (j, n].
    KVCache scratch(depth);
    for (std::size_t l = j; l < n; ++l) {
        if (has_sub) sub = detail::run_causal(model, std::move(sub), sub_pos, {l, l + 1}, out.cache, true);
        if (has_non) {
            non = detail::run_causal(model, std::move(non), non_pos, {l, l + 1}, has_sub ? scratch : out.cache,
                                     !has_sub);
        }
        if (has_sub && has_non) {
            out.system_identity_gap.push_back(detail::max_abs_rows(sub, non, g.system.size()));
        }
    }
    if (has_sub) out.phases.push_back({"branch_sub", {j, n}, sub_pos.size()});
    if (has_non) out.phases.push_back({"branch_non", {j, n}, non_pos.size()});

    const std::size_t t = g.question.size();
    auto question_rows = [t](const Matrix& m) {
        std::vector<std::size_t> idx;
        for (std::size_t r = m.rows() - t; r < m.rows(); ++r) idx.push_back(r);
        return gather_rows(m, std::span<const std::size_t>(idx));
    };
    Matrix fused;
    if (has_sub && has_non) {
        const Matrix t_non = question_rows(non);
        const Matrix t_sub = question_rows(sub);
        if (cfg.fault == FaultInjection::IgnoreBeta) {
            fused = Matrix(t, model.config.hidden_dim);
            for (std::size_t i = 0; i < fused.data().size(); ++i) fused.data()[i] = cfg.alpha * t_non.data()[i];
        } else {
            fused = fuse_question_states(t_non, t_sub, cfg.alpha, cfg.beta);
        }
    } else {
        fused = question_rows(has_sub ? sub : non);
    }

    // Continuation rows: S and V_sub from the base branch, then fused T.
    const Matrix& base = has_sub ? sub : non;
    const PositionMap& base_pos = has_sub ? sub_pos : non_pos;
    const PositionMap cont_pos = detail::merge({&g.system, &g.subject, &g.question});
    Matrix state(cont_pos.size(), model.config.hidden_dim);
    const std::size_t kept_prefix = cont_pos.size() - t;
    for (std::size_t r = 0; r < kept_prefix; ++r) {
        const auto src = base.row(detail::rows_of(base_pos, {cont_pos[r]})[0]);
        std::copy(src.begin(), src.end(), state.row(r).begin());
    }
    for (std::size_t r = 0; r < t; ++r) {
        std::copy(fused.row(r).begin(), fused.row(r).end(), state.row(kept_prefix + r).begin());
    }
    out.migration_state = state;
    out.migration_positions = cont_pos;

    out.hidden = detail::run_causal(model, std::move(state), cont_pos, {n, depth}, out.cache, true);
    out.positions = cont_pos;
    out.phases.push_back({"continuation", {n, depth}, cont_pos.size()});

    out.cache = prune_cache(out.cache, detail::present_in_cache(out.cache, g.nonsubject));
    return out;
}

// allowed(q, k): causal, no visibility between the two visual groups, and
// system rows only see system rows.
inline BoolMatrix exclusive_mask(std::span<const std::size_t> key_positions,
                                 std::span<const std::size_t> query_positions, const SequenceLayout& layout,
                                 const PositionMap& subject_positions) {
    auto is_subject = [&](std::size_t p) {
        return std::binary_search(subject_positions.begin(), subject_positions.end(), p);
    };
    BoolMatrix mask = causal_mask(key_positions, query_positions);
    for (std::size_t q = 0; q < query_positions.size(); ++q) {
        const std::size_t qp = query_positions[q];
        for (std::size_t k = 0; k < key_positions.size(); ++k) {
            if (!mask(q, k)) continue;
            const std::size_t kp = key_positions[k];
            if (layout.system_span.contains(qp) && !layout.system_span.contains(kp)) {
                mask(q, k) = 0;
            } else if (layout.visual_span.contains(qp) && layout.visual_span.contains(kp) &&
                       is_subject(qp) != is_subject(kp)) {
                mask(q, k) = 0;
            }
        }
    }
    return mask;
}

// Single sequence; the two visual groups are mutually invisible in layers
// (j, n], then non-subject rows and their cache entries are dropped.
inline PrefillResult run_parvts_masked(const Model& model, std::span<const std::size_t> token_ids,
                                       const SequenceLayout& layout, const Partition& partition,
                                       const ScheduleConfig& cfg) {
    detail::validate_inputs(model, token_ids, layout, &partition, &cfg);
    const std::size_t depth = model.config.num_layers;
    const std::size_t j = cfg.joint_prefix_layers;
    const std::size_t n = cfg.migration_depth;
    const detail::Groups g = detail::make_groups(layout, partition);

    PrefillResult out;
    out.cache = KVCache(depth);
    out.collapsed = g.subject.empty() || g.nonsubject.empty();
    const PositionMap all_pos = detail::iota_positions(token_ids.size());
    Matrix hidden = detail::run_causal(model, embed(model, token_ids), all_pos, {0, j}, out.cache, true);
    out.phases.push_back({"joint", {0, j}, all_pos.size()});

    for (std::size_t l = j; l < n; ++l) {
        const BoolMatrix mask = exclusive_mask(key_positions(out.cache, l, all_pos), all_pos, layout, g.subject);
        hidden = run_layers(model, std::move(hidden), all_pos, {l, l + 1}, mask, out.cache, true);
    }
    out.phases.push_back({"exclusive", {j, n}, all_pos.size()});

    const PositionMap kept_pos = detail::merge({&g.system, &g.subject, &g.question});
    Matrix kept = gather_rows(hidden, std::span<const std::size_t>(detail::rows_of(all_pos, kept_pos)));
    out.cache = prune_cache(out.cache, detail::present_in_cache(out.cache, g.nonsubject));
    out.migration_state = kept;
    out.migration_positions = kept_pos;

    out.hidden = detail::run_causal(model, std::move(kept), kept_pos, {n, depth}, out.cache, true);
    out.positions = kept_pos;
    out.phases.push_back({"continuation", {n, depth}, kept_pos.size()});
    return out;
}

inline PrefillResult run_subject_first(const Model& model, std::span<const std::size_t> token_ids,
                                       const SequenceLayout& layout, const Partition& partition,
                                       const ScheduleConfig& cfg) {
    detail::validate_inputs(model, token_ids, layout, &partition, &cfg);
    const detail::Groups g = detail::make_groups(layout, partition);
    auto out = detail::run_sequential(model, token_ids, g, g.subject, g.nonsubject, cfg.migration_depth);
    out.collapsed = g.subject.empty() || g.nonsubject.empty();
    return out;
}

inline PrefillResult run_nonsubject_first(const Model& model, std::span<const std::size_t> token_ids,
                                          const SequenceLayout& layout, const Partition& partition,
                                          const ScheduleConfig& cfg) {
    detail::validate_inputs(model, token_ids, layout, &partition, &cfg);
    const detail::Groups g = detail::make_groups(layout, partition);
    auto out = detail::run_sequential(model, token_ids, g, g.nonsubject, g.subject, cfg.migration_depth);
    out.collapsed = g.subject.empty() || g.nonsubject.empty();
    return out;
}

inline PrefillResult run_strategy(const Model& model, std::span<const std::size_t> token_ids,
                                  const SequenceLayout& layout, const Partition& partition,
                                  const ScheduleConfig& cfg) {
    switch (cfg.strategy) {
        case Strategy::Vanilla: return run_vanilla(model, token_ids, layout);
        case Strategy::ParVTSBatch: return run_parvts_batch(model, token_ids, layout, partition, cfg);
        case Strategy::ParVTSMasked: return run_parvts_masked(model, token_ids, layout, partition, cfg);
        case Strategy::SubjectFirst: return run_subject_first(model, token_ids, layout, partition, cfg);
        case Strategy::NonSubjectFirst: return run_nonsubject_first(model, token_ids, layout, partition, cfg);
    }
    throw std::logic_error("run_strategy: unhandled strategy");
}

}  // namespace parvts
