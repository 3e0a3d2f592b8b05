#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <cstring>
#include <optional>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "parvts/numerics.hpp"

namespace parvts {

struct ModelConfig {
    std::size_t num_layers = 4;
    std::size_t hidden_dim = 32;
    std::size_t num_heads = 4;
    std::size_t mlp_dim = 64;
    std::size_t vocab_size = 64;
    std::size_t max_positions = 4096;
    std::uint64_t master_seed = 7;

    std::size_t head_dim() const { return hidden_dim / num_heads; }

    void validate() const {
        if (num_layers < 1) throw std::invalid_argument("ModelConfig: num_layers must be >= 1");
        if (hidden_dim < 1 || num_heads < 1 || mlp_dim < 1 || max_positions < 1) {
            throw std::invalid_argument("ModelConfig: all dimensions must be >= 1");
        }
        if (vocab_size < 2) throw std::invalid_argument("ModelConfig: vocab_size must be >= 2");
        if (hidden_dim % num_heads != 0) {
            throw std::invalid_argument("ModelConfig: hidden_dim " + std::to_string(hidden_dim) +
                                        " is not divisible by num_heads " + std::to_string(num_heads));
        }
        if (head_dim() % 2 != 0) {
            throw std::invalid_argument("ModelConfig: head dimension must be even for rotary encoding");
        }
    }
};

// Half-open index range.
struct Span {
    std::size_t begin = 0;
    std::size_t end = 0;

    std::size_t size() const { return end - begin; }
    bool contains(std::size_t i) const { return i >= begin && i < end; }
};

// Segments of a prompt in order: system, visual, question; generated tokens
// start at output_start.
struct SequenceLayout {
    Span system_span;
    Span visual_span;
    Span question_span;
    std::size_t output_start = 0;

    static SequenceLayout from_counts(std::size_t system, std::size_t visual, std::size_t question) {
        SequenceLayout layout;
        layout.system_span = {0, system};
        layout.visual_span = {system, system + visual};
        layout.question_span = {system + visual, system + visual + question};
        layout.output_start = system + visual + question;
        return layout;
    }

    void validate() const {
        if (system_span.begin != 0 || system_span.end < system_span.begin ||
            visual_span.begin != system_span.end || visual_span.end < visual_span.begin ||
            question_span.begin != visual_span.end || question_span.end < question_span.begin ||
            output_start != question_span.end) {
            throw std::invalid_argument("SequenceLayout: spans must be contiguous and ordered system < visual < question");
        }
    }
};

// Original layout position of each active row.
using PositionMap = std::vector<std::size_t>;

inline void validate_positions(const PositionMap& positions, std::size_t max_positions) {
    for (std::size_t i = 0; i < positions.size(); ++i) {
        if (positions[i] >= max_positions) {
            throw std::invalid_argument("PositionMap: position " + std::to_string(positions[i]) +
                                        " exceeds max_positions");
        }
        if (i > 0 && positions[i] <= positions[i - 1]) {
            throw std::invalid_argument("PositionMap: positions must be strictly increasing");
        }
    }
}

struct KVEntry {
    std::size_t position = 0;
    Vector key;    // rotary-encoded, all heads concatenated
    Vector value;  // all heads concatenated
};

struct KVCache {
    std::vector<std::vector<KVEntry>> layers;

    KVCache() = default;
    explicit KVCache(std::size_t num_layers) : layers(num_layers) {}

    std::size_t num_layers() const { return layers.size(); }
    std::size_t entries(std::size_t layer) const { return layers.at(layer).size(); }

    std::vector<std::size_t> entries_per_layer() const {
        std::vector<std::size_t> out;
        out.reserve(layers.size());
        for (const auto& l : layers) out.push_back(l.size());
        return out;
    }

    PositionMap positions(std::size_t layer) const {
        PositionMap out;
        out.reserve(layers.at(layer).size());
        for (const auto& e : layers[layer]) out.push_back(e.position);
        return out;
    }

    bool contains(std::size_t position) const {
        for (const auto& l : layers) {
            for (const auto& e : l) {
                if (e.position == position) return true;
            }
        }
        return false;
    }
};

// Layers [begin, end), zero-based.
struct LayerRange {
    std::size_t begin = 0;
    std::size_t end = 0;

    bool empty() const { return begin >= end; }
};

struct LayerWeights {
    Vector attn_gain;
    Matrix w_query;
    Matrix w_key;
    Matrix w_value;
    Matrix w_out;
    Vector mlp_gain;
    Matrix w_gate;
    Matrix w_up;
    Matrix w_down;
};

struct Model {
    ModelConfig config;
    Matrix embedding;  // vocab x d
    std::vector<LayerWeights> layers;
    Vector final_gain;
    Matrix lm_head;  // d x vocab

    std::size_t parameter_count() const {
        std::size_t total = embedding.data().size() + final_gain.size() + lm_head.data().size();
        for (const auto& l : layers) {
            total += l.attn_gain.size() + l.mlp_gain.size();
            for (const Matrix* m : {&l.w_query, &l.w_key, &l.w_value, &l.w_out, &l.w_gate, &l.w_up, &l.w_down}) {
                total += m->data().size();
            }
        }
        return total;
    }

    // FNV-1a over the raw bytes of every parameter, in declaration order.
    std::uint64_t checksum() const {
        std::uint64_t h = 0xcbf29ce484222325ULL;
        auto mix = [&h](std::span<const double> values) {
            for (double v : values) {
                std::uint64_t bits = 0;
                std::memcpy(&bits, &v, sizeof bits);
                for (int b = 0; b < 8; ++b) {
                    h ^= (bits >> (8 * b)) & 0xffU;
                    h *= 0x100000001b3ULL;
                }
            }
        };
        mix(embedding.data());
        for (const auto& l : layers) {
            mix(l.attn_gain);
            for (const Matrix* m : {&l.w_query, &l.w_key, &l.w_value, &l.w_out}) mix(m->data());
            mix(l.mlp_gain);
            for (const Matrix* m : {&l.w_gate, &l.w_up, &l.w_down}) mix(m->data());
        }
        mix(final_gain);
        mix(lm_head.data());
        return h;
    }
};

namespace detail {

inline Matrix init_weight(std::uint64_t master, std::uint64_t counter, std::size_t rows, std::size_t cols) {
    Rng rng(derive_seed(master, counter));
    return seeded_uniform(rng, rows, cols, 1.0 / std::sqrt(static_cast<double>(rows)));
}

inline double silu(double x) { return x / (1.0 + std::exp(-x)); }

}  // namespace detail

// Weight seeds: counter 0 is the embedding table, layer l uses counters
// 1 + 7l .. 7 + 7l, and the output projection takes the next counter.
inline Model build_model(const ModelConfig& config) {
    config.validate();
    const std::size_t d = config.hidden_dim;
    const std::size_t m = config.mlp_dim;
    const std::uint64_t seed = config.master_seed;

    Model model;
    model.config = config;
    model.embedding = detail::init_weight(seed, 0, config.vocab_size, d);
    std::uint64_t counter = 1;
    model.layers.resize(config.num_layers);
    for (auto& layer : model.layers) {
        layer.attn_gain.assign(d, 1.0);
        layer.w_query = detail::init_weight(seed, counter++, d, d);
        layer.w_key = detail::init_weight(seed, counter++, d, d);
        layer.w_value = detail::init_weight(seed, counter++, d, d);
        layer.w_out = detail::init_weight(seed, counter++, d, d);
        layer.mlp_gain.assign(d, 1.0);
        layer.w_gate = detail::init_weight(seed, counter++, d, m);
        layer.w_up = detail::init_weight(seed, counter++, d, m);
        layer.w_down = detail::init_weight(seed, counter++, m, d);
    }
    model.final_gain.assign(d, 1.0);
    model.lm_head = detail::init_weight(seed, counter, d, config.vocab_size);
    return model;
}

inline Matrix embed(const Model& model, std::span<const std::size_t> token_ids) {
    Matrix out(token_ids.size(), model.config.hidden_dim);
    for (std::size_t i = 0; i < token_ids.size(); ++i) {
        if (token_ids[i] >= model.config.vocab_size) {
            throw std::invalid_argument("embed: token id " + std::to_string(token_ids[i]) + " out of range");
        }
        const auto src = model.embedding.row(token_ids[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

// allowed(q, k) iff key position <= query position.
inline BoolMatrix causal_mask(std::span<const std::size_t> key_positions,
                              std::span<const std::size_t> query_positions) {
    BoolMatrix mask(query_positions.size(), key_positions.size());
    for (std::size_t q = 0; q < query_positions.size(); ++q) {
        for (std::size_t k = 0; k < key_positions.size(); ++k) {
            mask(q, k) = key_positions[k] <= query_positions[q] ? 1 : 0;
        }
    }
    return mask;
}

// Keys visible at `layer`: cached entries followed by the active rows.
inline PositionMap key_positions(const KVCache& cache, std::size_t layer, const PositionMap& rows) {
    PositionMap keys = cache.positions(layer);
    keys.insert(keys.end(), rows.begin(), rows.end());
    return keys;
}

inline Matrix apply_rows(const Matrix& x, std::span<const double> gain) {
    Matrix out(x.rows(), x.cols());
    for (std::size_t r = 0; r < x.rows(); ++r) {
        const Vector n = rms_norm(x.row(r), gain);
        std::copy(n.begin(), n.end(), out.row(r).begin());
    }
    return out;
}

// Advances `hidden` through `layers`. Keys at each layer are that layer's
// cached entries followed by the active rows; `mask` is rows x (cached + rows)
// and is used for every layer in the range.
inline Matrix run_layers(const Model& model, Matrix hidden, const PositionMap& positions, LayerRange layers,
                         const BoolMatrix& mask, KVCache& cache, bool record_cache) {
    const auto& cfg = model.config;
    if (layers.empty()) {
        return hidden;
    }
    if (layers.end > cfg.num_layers) {
        throw std::invalid_argument("run_layers: layer range exceeds model depth");
    }
    if (hidden.rows() != positions.size()) {
        throw std::invalid_argument("run_layers: positions not aligned with hidden rows");
    }
    if (hidden.rows() > 0 && hidden.cols() != cfg.hidden_dim) {
        throw std::invalid_argument("run_layers: hidden width does not match model");
    }
    if (cache.num_layers() != cfg.num_layers) {
        throw std::invalid_argument("run_layers: cache depth does not match model");
    }
    validate_positions(positions, cfg.max_positions);

    const std::size_t rows = hidden.rows();
    const std::size_t d = cfg.hidden_dim;
    const std::size_t heads = cfg.num_heads;
    const std::size_t dh = cfg.head_dim();
    const double scale = 1.0 / std::sqrt(static_cast<double>(dh));

    for (std::size_t l = layers.begin; l < layers.end; ++l) {
        const LayerWeights& w = model.layers[l];
        const auto& cached = cache.layers[l];
        const std::size_t n_keys = cached.size() + rows;
        if (mask.rows() != rows || mask.cols() != n_keys) {
            throw std::invalid_argument("run_layers: mask shape does not match rows x (cached + rows) at layer " +
                                        std::to_string(l));
        }
        const PositionMap keys_pos = key_positions(cache, l, positions);
        for (std::size_t q = 0; q < rows; ++q) {
            for (std::size_t k = 0; k < n_keys; ++k) {
                if (mask(q, k) && keys_pos[k] > positions[q]) {
                    throw InvalidMaskError("run_layers: mask allows a later key at layer " + std::to_string(l));
                }
            }
        }

        const Matrix normed = apply_rows(hidden, w.attn_gain);
        Matrix query = matmul(normed, w.w_query);
        Matrix key = matmul(normed, w.w_key);
        const Matrix value = matmul(normed, w.w_value);
        for (std::size_t r = 0; r < rows; ++r) {
            const Vector rq = rope_apply(query.row(r), dh, positions[r]);
            const Vector rk = rope_apply(key.row(r), dh, positions[r]);
            std::copy(rq.begin(), rq.end(), query.row(r).begin());
            std::copy(rk.begin(), rk.end(), key.row(r).begin());
        }

        Matrix all_keys(n_keys, d);
        Matrix all_values(n_keys, d);
        for (std::size_t k = 0; k < cached.size(); ++k) {
            std::copy(cached[k].key.begin(), cached[k].key.end(), all_keys.row(k).begin());
            std::copy(cached[k].value.begin(), cached[k].value.end(), all_values.row(k).begin());
        }
        for (std::size_t r = 0; r < rows; ++r) {
            std::copy(key.row(r).begin(), key.row(r).end(), all_keys.row(cached.size() + r).begin());
            std::copy(value.row(r).begin(), value.row(r).end(), all_values.row(cached.size() + r).begin());
        }

        Matrix context(rows, d);
        Matrix scores(rows, n_keys);
        for (std::size_t h = 0; h < heads; ++h) {
            const std::size_t off = h * dh;
            for (std::size_t q = 0; q < rows; ++q) {
                for (std::size_t k = 0; k < n_keys; ++k) {
                    double dot = 0.0;
                    for (std::size_t t = 0; t < dh; ++t) {
                        dot += query(q, off + t) * all_keys(k, off + t);
                    }
                    scores(q, k) = dot * scale;
                }
            }
            const Matrix probs = masked_softmax_rows(scores, mask);
            for (std::size_t q = 0; q < rows; ++q) {
                for (std::size_t k = 0; k < n_keys; ++k) {
                    const double p = probs(q, k);
                    if (p == 0.0) continue;
                    for (std::size_t t = 0; t < dh; ++t) {
                        context(q, off + t) += p * all_values(k, off + t);
                    }
                }
            }
        }
        const Matrix attn = matmul(context, w.w_out);
        for (std::size_t i = 0; i < hidden.data().size(); ++i) {
            hidden.data()[i] += attn.data()[i];
        }

        const Matrix normed2 = apply_rows(hidden, w.mlp_gain);
        Matrix gate = matmul(normed2, w.w_gate);
        const Matrix up = matmul(normed2, w.w_up);
        for (std::size_t i = 0; i < gate.data().size(); ++i) {
            gate.data()[i] = detail::silu(gate.data()[i]) * up.data()[i];
        }
        const Matrix down = matmul(gate, w.w_down);
        for (std::size_t i = 0; i < hidden.data().size(); ++i) {
            hidden.data()[i] += down.data()[i];
        }

        if (record_cache) {
            auto& dst = cache.layers[l];
            if (!dst.empty() && rows > 0 && positions.front() <= dst.back().position) {
                throw std::invalid_argument("run_layers: recorded positions must follow cached positions at layer " +
                                            std::to_string(l));
            }
            for (std::size_t r = 0; r < rows; ++r) {
                dst.push_back(KVEntry{positions[r], Vector(key.row(r).begin(), key.row(r).end()),
                                      Vector(value.row(r).begin(), value.row(r).end())});
            }
        }
    }
    return hidden;
}

inline Vector logits_from_hidden(const Model& model, std::span<const double> row) {
    const Vector normed = rms_norm(row, model.final_gain);
    Vector out(model.config.vocab_size, 0.0);
    for (std::size_t c = 0; c < normed.size(); ++c) {
        const auto w = model.lm_head.row(c);
        for (std::size_t v = 0; v < out.size(); ++v) {
            out[v] += normed[c] * w[v];
        }
    }
    return out;
}

// Lowest index wins ties.
inline std::size_t argmax(std::span<const double> values) {
    return static_cast<std::size_t>(std::max_element(values.begin(), values.end()) - values.begin());
}

inline Vector decode_step(const Model& model, KVCache& cache, std::size_t token_id, std::size_t position) {
    if (cache.num_layers() != model.config.num_layers) {
        throw std::invalid_argument("decode_step: cache depth does not match model");
    }
    for (std::size_t l = 0; l < cache.num_layers(); ++l) {
        if (!cache.layers[l].empty() && cache.layers[l].back().position >= position) {
            throw std::invalid_argument("decode_step: position " + std::to_string(position) +
                                        " conflicts with cached position at layer " + std::to_string(l));
        }
    }
    const std::size_t ids[] = {token_id};
    Matrix x = embed(model, ids);
    const PositionMap pos{position};
    // Layers may hold different row sets, so each gets its own mask width.
    for (std::size_t l = 0; l < model.config.num_layers; ++l) {
        const BoolMatrix mask(1, cache.entries(l) + 1, 1);
        x = run_layers(model, std::move(x), pos, {l, l + 1}, mask, cache, true);
    }
    return logits_from_hidden(model, x.row(0));
}

// Next free position after everything in the cache.
inline std::size_t next_position(const KVCache& cache) {
    std::size_t next = 0;
    for (const auto& l : cache.layers) {
        if (!l.empty()) next = std::max(next, l.back().position + 1);
    }
    return next;
}

// Feeds start_token, then each argmax, for `steps` decode steps. Returns the
// `steps` emitted tokens.
inline std::vector<std::size_t> greedy_decode(const Model& model, KVCache& cache, std::size_t start_token,
                                              std::size_t steps,
                                              std::optional<std::size_t> first_position = std::nullopt) {
    std::vector<std::size_t> emitted;
    emitted.reserve(steps);
    std::size_t position = first_position.value_or(next_position(cache));
    std::size_t token = start_token;
    for (std::size_t i = 0; i < steps; ++i) {
        const Vector logits = decode_step(model, cache, token, position++);
        token = argmax(logits);
        emitted.push_back(token);
    }
    return emitted;
}

}  // namespace parvts
