#pragma once

// Reference implementations used to check the scheduler. Nothing here calls
// run_layers, the KV cache, or the scheduler; only the model weights and the
// primitives in numerics.hpp are shared.

#include <algorithm>
#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "parvts/numerics.hpp"
#include "parvts/saliency.hpp"
#include "parvts/scheduler.hpp"
#include "parvts/transformer.hpp"

namespace parvts {

struct StateDistance {
    double max_abs = 0.0;
    double frobenius = 0.0;
};

inline StateDistance compare_states(const Matrix& a, const Matrix& b) {
    if (a.rows() != b.rows() || a.cols() != b.cols()) {
        throw std::invalid_argument("compare_states: shape mismatch");
    }
    StateDistance out;
    double sum_sq = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const double diff = a.data()[i] - b.data()[i];
        out.max_abs = std::max(out.max_abs, std::abs(diff));
        sum_sq += diff * diff;
    }
    out.frobenius = std::sqrt(sum_sq);
    return out;
}

namespace oracle {

inline Vector row_times(std::span<const double> x, const Matrix& w) {
    Vector out(w.cols(), 0.0);
    for (std::size_t c = 0; c < w.cols(); ++c) {
        double acc = 0.0;
        for (std::size_t r = 0; r < w.rows(); ++r) acc += x[r] * w(r, c);
        out[c] = acc;
    }
    return out;
}

// Token-by-token forward of a standalone causal sequence through layers
// [first, last). Each token attends to every token with a position <= its own.
inline Matrix reference_forward(const Model& model, const Matrix& input, const PositionMap& positions,
                                std::size_t first, std::size_t last) {
    const std::size_t rows = input.rows();
    const std::size_t dh = model.config.head_dim();
    const std::size_t heads = model.config.num_heads;
    Matrix x = input;
    for (std::size_t l = first; l < last; ++l) {
        const LayerWeights& w = model.layers[l];
        std::vector<Vector> q(rows), k(rows), v(rows);
        for (std::size_t t = 0; t < rows; ++t) {
            const Vector h = rms_norm(x.row(t), w.attn_gain);
            q[t] = rope_apply(row_times(h, w.w_query), dh, positions[t]);
            k[t] = rope_apply(row_times(h, w.w_key), dh, positions[t]);
            v[t] = row_times(h, w.w_value);
        }
        Matrix next = x;
        for (std::size_t t = 0; t < rows; ++t) {
            Vector ctx(model.config.hidden_dim, 0.0);
            for (std::size_t hd = 0; hd < heads; ++hd) {
                std::vector<double> logits;
                std::vector<std::size_t> seen;
                for (std::size_t s = 0; s < rows; ++s) {
                    if (positions[s] > positions[t]) continue;
                    double dot = 0.0;
                    for (std::size_t e = 0; e < dh; ++e) dot += q[t][hd * dh + e] * k[s][hd * dh + e];
                    logits.push_back(dot / std::sqrt(static_cast<double>(dh)));
                    seen.push_back(s);
                }
                const double top = *std::max_element(logits.begin(), logits.end());
                double z = 0.0;
                for (double& lg : logits) {
                    lg = std::exp(lg - top);
                    z += lg;
                }
                for (std::size_t i = 0; i < seen.size(); ++i) {
                    for (std::size_t e = 0; e < dh; ++e) ctx[hd * dh + e] += logits[i] / z * v[seen[i]][hd * dh + e];
                }
            }
            const Vector attn = row_times(ctx, w.w_out);
            for (std::size_t c = 0; c < attn.size(); ++c) next(t, c) += attn[c];

            const Vector h2 = rms_norm(next.row(t), w.mlp_gain);
            const Vector gate = row_times(h2, w.w_gate);
            const Vector up = row_times(h2, w.w_up);
            Vector act(gate.size());
            for (std::size_t i = 0; i < act.size(); ++i) act[i] = gate[i] / (1.0 + std::exp(-gate[i])) * up[i];
            const Vector down = row_times(act, w.w_down);
            for (std::size_t c = 0; c < down.size(); ++c) next(t, c) += down[c];
        }
        x = std::move(next);
    }
    return x;
}

}  // namespace oracle

struct OracleResult {
    Matrix hidden;
    PositionMap positions;
};

// Literal reading of the parallel formulation: joint prefix, two standalone
// prefills of [S, V_non, T] and [S, V_sub, T], weighted fusion of the question
// rows, then continuation of [S_sub, V_sub, T~].
inline OracleResult oracle_two_pass(const Model& model, std::span<const std::size_t> token_ids,
                                    const SequenceLayout& layout, const Partition& partition,
                                    const ScheduleConfig& cfg, bool subject_branch_first = false) {
    layout.validate();
    cfg.validate(model.config.num_layers);
    if (token_ids.size() != layout.output_start || partition.visual_count() != layout.visual_span.size()) {
        throw std::invalid_argument("oracle_two_pass: inputs do not match the layout");
    }
    const std::size_t depth = model.config.num_layers;
    const std::size_t j = cfg.joint_prefix_layers;
    const std::size_t n = cfg.migration_depth;
    const std::size_t total = token_ids.size();

    PositionMap all(total);
    for (std::size_t i = 0; i < total; ++i) all[i] = i;
    Matrix x0(total, model.config.hidden_dim);
    for (std::size_t i = 0; i < total; ++i) {
        const auto src = model.embedding.row(token_ids[i]);
        std::copy(src.begin(), src.end(), x0.row(i).begin());
    }
    const Matrix joint = oracle::reference_forward(model, x0, all, 0, j);

    auto branch_positions = [&](const std::vector<std::size_t>& visual) {
        PositionMap pos;
        for (std::size_t p = layout.system_span.begin; p < layout.system_span.end; ++p) pos.push_back(p);
        for (std::size_t i : visual) pos.push_back(layout.visual_span.begin + i);
        for (std::size_t p = layout.question_span.begin; p < layout.question_span.end; ++p) pos.push_back(p);
        return pos;
    };
    auto run_branch = [&](const PositionMap& pos) {
        Matrix in(pos.size(), model.config.hidden_dim);
        for (std::size_t r = 0; r < pos.size(); ++r) {
            std::copy(joint.row(pos[r]).begin(), joint.row(pos[r]).end(), in.row(r).begin());
        }
        return oracle::reference_forward(model, in, pos, j, n);
    };

    const PositionMap sub_pos = branch_positions(partition.subject_indices);
    const PositionMap non_pos = branch_positions(partition.nonsubject_indices);
    const bool has_sub = !partition.subject_indices.empty();
    const bool has_non = !partition.nonsubject_indices.empty();
    Matrix sub_out, non_out;
    if (subject_branch_first) {
        if (has_sub) sub_out = run_branch(sub_pos);
        if (has_non) non_out = run_branch(non_pos);
    } else {
        if (has_non) non_out = run_branch(non_pos);
        if (has_sub) sub_out = run_branch(sub_pos);
    }

    const std::size_t q_count = layout.question_span.size();
    const Matrix& base = has_sub ? sub_out : non_out;
    const PositionMap& base_pos = has_sub ? sub_pos : non_pos;

    OracleResult out;
    Matrix state(0, model.config.hidden_dim);
    for (std::size_t r = 0; r < base_pos.size(); ++r) {
        const std::size_t p = base_pos[r];
        const bool is_question = layout.question_span.contains(p);
        const bool is_visual = layout.visual_span.contains(p);
        if (is_visual && !has_sub) continue;
        if (!is_question) {
            state.append_row(base.row(r));
            out.positions.push_back(p);
            continue;
        }
        Vector row(model.config.hidden_dim);
        const std::size_t qi = r - (base_pos.size() - q_count);
        for (std::size_t c = 0; c < row.size(); ++c) {
            if (has_sub && has_non) {
                const double t_non = non_out(non_pos.size() - q_count + qi, c);
                const double t_sub = sub_out(sub_pos.size() - q_count + qi, c);
                row[c] = cfg.alpha * t_non + cfg.beta * t_sub;
            } else {
                row[c] = base(r, c);
            }
        }
        state.append_row(row);
        out.positions.push_back(p);
    }
    out.hidden = oracle::reference_forward(model, state, out.positions, n, depth);
    return out;
}

// Rows of `a` and `b` at each wanted position; both must contain all of them.
inline std::pair<Matrix, Matrix> align_rows(const Matrix& a, const PositionMap& a_pos, const Matrix& b,
                                            const PositionMap& b_pos, const PositionMap& wanted) {
    Matrix ra(0, a.cols()), rb(0, b.cols());
    for (std::size_t p : wanted) {
        const auto ia = std::lower_bound(a_pos.begin(), a_pos.end(), p);
        const auto ib = std::lower_bound(b_pos.begin(), b_pos.end(), p);
        if (ia == a_pos.end() || *ia != p || ib == b_pos.end() || *ib != p) {
            throw std::invalid_argument("align_rows: position " + std::to_string(p) + " missing");
        }
        ra.append_row(a.row(static_cast<std::size_t>(ia - a_pos.begin())));
        rb.append_row(b.row(static_cast<std::size_t>(ib - b_pos.begin())));
    }
    return {ra, rb};
}

}  // namespace parvts
