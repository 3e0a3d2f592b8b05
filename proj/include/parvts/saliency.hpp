#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <numeric>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

#include "parvts/numerics.hpp"

namespace parvts {

class FormatError : public std::runtime_error {
public:
    FormatError(const std::string& what, std::size_t line)
        : std::runtime_error(what + " (line " + std::to_string(line) + ")"), line_(line) {}
    std::size_t line() const { return line_; }

private:
    std::size_t line_;
};

struct SaliencyScores {
    std::vector<double> values;  // one per visual token, visual-segment order

    std::size_t size() const { return values.size(); }
};

// Subject / non-subject split of the visual segment. Indices are relative to
// the start of the visual span.
struct Partition {
    std::vector<std::size_t> subject_indices;
    std::vector<std::size_t> nonsubject_indices;
    std::size_t keep_count = 0;
    double pruning_rate = 0.0;

    std::size_t visual_count() const { return subject_indices.size() + nonsubject_indices.size(); }

    // Same split with the roles of the two groups exchanged.
    Partition swapped() const {
        Partition out;
        out.subject_indices = nonsubject_indices;
        out.nonsubject_indices = subject_indices;
        out.keep_count = out.subject_indices.size();
        const auto total = visual_count();
        out.pruning_rate = total == 0 ? 0.0
                                      : 1.0 - static_cast<double>(out.keep_count) / static_cast<double>(total);
        return out;
    }
};

// Seeded single-head probe used as a stand-in for a vision encoder's [CLS] row.
struct ClsProbe {
    Vector cls;      // synthetic [CLS] embedding
    Matrix w_query;  // dim x dim
    Matrix w_key;    // dim x dim
};

inline ClsProbe make_cls_probe(std::size_t dim, std::uint64_t seed) {
    Rng rng(seed);
    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    ClsProbe probe;
    probe.cls = seeded_uniform(rng, 1, dim, 1.0).data();
    probe.w_query = seeded_uniform(rng, dim, dim, scale);
    probe.w_key = seeded_uniform(rng, dim, dim, scale);
    return probe;
}

// Attention row of the synthetic [CLS] query over all patches.
inline SaliencyScores toy_cls_attention(const Matrix& patch_embeddings, std::uint64_t seed) {
    if (patch_embeddings.rows() == 0 || patch_embeddings.cols() == 0) {
        throw std::invalid_argument("toy_cls_attention: empty patch set");
    }
    const std::size_t dim = patch_embeddings.cols();
    const ClsProbe probe = make_cls_probe(dim, seed);

    Matrix cls_row(1, dim);
    std::copy(probe.cls.begin(), probe.cls.end(), cls_row.row(0).begin());
    const Matrix query = matmul(cls_row, probe.w_query);
    const Matrix keys = matmul(patch_embeddings, probe.w_key);

    const double scale = 1.0 / std::sqrt(static_cast<double>(dim));
    Matrix scores(1, keys.rows());
    for (std::size_t p = 0; p < keys.rows(); ++p) {
        double dot = 0.0;
        for (std::size_t c = 0; c < dim; ++c) {
            dot += query(0, c) * keys(p, c);
        }
        scores(0, p) = dot * scale;
    }
    const BoolMatrix all(1, keys.rows(), 1);
    return SaliencyScores{masked_softmax_rows(scores, all).data()};
}

// Top-k by saliency; equal values prefer the lower index.
inline Partition partition_topk(const SaliencyScores& saliency, std::size_t keep_count) {
    const std::size_t total = saliency.size();
    if (keep_count > total) {
        throw std::invalid_argument("partition_topk: keep_count " + std::to_string(keep_count) +
                                    " exceeds visual token count " + std::to_string(total));
    }
    for (double v : saliency.values) {
        if (!std::isfinite(v)) {
            throw std::invalid_argument("partition_topk: non-finite saliency value");
        }
    }
    std::vector<std::size_t> order(total);
    std::iota(order.begin(), order.end(), std::size_t{0});
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
        return saliency.values[a] > saliency.values[b];
    });

    Partition out;
    out.subject_indices.assign(order.begin(), order.begin() + static_cast<std::ptrdiff_t>(keep_count));
    out.nonsubject_indices.assign(order.begin() + static_cast<std::ptrdiff_t>(keep_count), order.end());
    std::sort(out.subject_indices.begin(), out.subject_indices.end());
    std::sort(out.nonsubject_indices.begin(), out.nonsubject_indices.end());
    out.keep_count = keep_count;
    out.pruning_rate =
        total == 0 ? 0.0 : 1.0 - static_cast<double>(keep_count) / static_cast<double>(total);
    return out;
}

// One decimal float per line; blank lines and lines starting with '#' are skipped.
inline SaliencyScores parse_saliency(std::istream& in) {
    SaliencyScores out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        const auto first = line.find_first_not_of(" \t\r");
        if (first == std::string::npos || line[first] == '#') {
            continue;
        }
        const auto last = line.find_last_not_of(" \t\r");
        const std::string token = line.substr(first, last - first + 1);
        double value = 0.0;
        std::size_t consumed = 0;
        try {
            value = std::stod(token, &consumed);
        } catch (const std::exception&) {
            throw FormatError("saliency: cannot parse '" + token + "'", line_no);
        }
        if (consumed != token.size()) {
            throw FormatError("saliency: trailing characters in '" + token + "'", line_no);
        }
        if (!std::isfinite(value)) {
            throw FormatError("saliency: non-finite value '" + token + "'", line_no);
        }
        out.values.push_back(value);
    }
    return out;
}

inline SaliencyScores load_saliency(const std::string& path) {
    std::ifstream in(path);
    if (!in) {
        throw std::invalid_argument("saliency: cannot open " + path);
    }
    return parse_saliency(in);
}

}  // namespace parvts
