#pragma once

#include <cmath>
#include <cstddef>
#include <cstdint>
#include <initializer_list>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace parvts {

// Thrown when an attention mask leaves a query row with nothing to attend to,
// or violates causality.
class InvalidMaskError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// Dense row-major 2-D array.
template <typename T>
class BasicMatrix {
public:
    BasicMatrix() = default;
    BasicMatrix(std::size_t rows, std::size_t cols, T fill = T{})
        : rows_(rows), cols_(cols), data_(rows * cols, fill) {}

    BasicMatrix(std::initializer_list<std::initializer_list<T>> init) {
        rows_ = init.size();
        cols_ = rows_ ? init.begin()->size() : 0;
        data_.reserve(rows_ * cols_);
        for (const auto& row : init) {
            if (row.size() != cols_) {
                throw std::invalid_argument("BasicMatrix: ragged initializer");
            }
            data_.insert(data_.end(), row.begin(), row.end());
        }
    }

    std::size_t rows() const { return rows_; }
    std::size_t cols() const { return cols_; }
    bool empty() const { return data_.empty(); }

    T& operator()(std::size_t r, std::size_t c) { return data_[r * cols_ + c]; }
    const T& operator()(std::size_t r, std::size_t c) const { return data_[r * cols_ + c]; }

    std::span<T> row(std::size_t r) { return {data_.data() + r * cols_, cols_}; }
    std::span<const T> row(std::size_t r) const { return {data_.data() + r * cols_, cols_}; }

    std::vector<T>& data() { return data_; }
    const std::vector<T>& data() const { return data_; }

    void append_row(std::span<const T> values) {
        if (rows_ == 0 && data_.empty()) {
            cols_ = values.size();
        }
        if (values.size() != cols_) {
            throw std::invalid_argument("BasicMatrix::append_row: width mismatch");
        }
        data_.insert(data_.end(), values.begin(), values.end());
        ++rows_;
    }

    bool operator==(const BasicMatrix&) const = default;

private:
    std::size_t rows_ = 0;
    std::size_t cols_ = 0;
    std::vector<T> data_;
};

using Matrix = BasicMatrix<double>;
using BoolMatrix = BasicMatrix<std::uint8_t>;
using Vector = std::vector<double>;

// Rows of `m` selected by index, in the given order.
template <typename T>
BasicMatrix<T> gather_rows(const BasicMatrix<T>& m, std::span<const std::size_t> indices) {
    BasicMatrix<T> out(indices.size(), m.cols());
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const auto src = m.row(indices[i]);
        std::copy(src.begin(), src.end(), out.row(i).begin());
    }
    return out;
}

inline Matrix matmul(const Matrix& a, const Matrix& b) {
    if (a.cols() != b.rows()) {
        throw std::invalid_argument("matmul: dimension mismatch (" + std::to_string(a.rows()) + "x" +
                                    std::to_string(a.cols()) + " * " + std::to_string(b.rows()) + "x" +
                                    std::to_string(b.cols()) + ")");
    }
    Matrix out(a.rows(), b.cols());
    for (std::size_t i = 0; i < a.rows(); ++i) {
        auto out_row = out.row(i);
        for (std::size_t k = 0; k < a.cols(); ++k) {
            const double aik = a(i, k);
            const auto b_row = b.row(k);
            for (std::size_t j = 0; j < b.cols(); ++j) {
                out_row[j] += aik * b_row[j];
            }
        }
    }
    return out;
}

// Row-wise softmax restricted to allowed entries; blocked entries are exactly 0.
inline Matrix masked_softmax_rows(const Matrix& scores, const BoolMatrix& mask) {
    if (scores.rows() != mask.rows() || scores.cols() != mask.cols()) {
        throw std::invalid_argument("masked_softmax_rows: shape mismatch between scores and mask");
    }
    Matrix out(scores.rows(), scores.cols());
    for (std::size_t r = 0; r < scores.rows(); ++r) {
        const auto s = scores.row(r);
        const auto allowed = mask.row(r);
        double max_score = -INFINITY;
        bool any = false;
        for (std::size_t c = 0; c < s.size(); ++c) {
            if (allowed[c]) {
                max_score = any ? std::max(max_score, s[c]) : s[c];
                any = true;
            }
        }
        if (!any) {
            throw InvalidMaskError("masked_softmax_rows: row " + std::to_string(r) + " is fully blocked");
        }
        auto o = out.row(r);
        double total = 0.0;
        for (std::size_t c = 0; c < s.size(); ++c) {
            if (allowed[c]) {
                o[c] = std::exp(s[c] - max_score);
                total += o[c];
            }
        }
        for (auto& v : o) {
            v /= total;
        }
    }
    return out;
}

inline constexpr double kRmsNormEps = 1e-5;

inline Vector rms_norm(std::span<const double> x, std::span<const double> gain, double eps = kRmsNormEps) {
    if (x.size() != gain.size()) {
        throw std::invalid_argument("rms_norm: length mismatch");
    }
    if (!(eps > 0.0)) {
        throw std::invalid_argument("rms_norm: eps must be positive");
    }
    double sum_sq = 0.0;
    for (double v : x) {
        sum_sq += v * v;
    }
    const double mean_sq = x.empty() ? 0.0 : sum_sq / static_cast<double>(x.size());
    const double inv = 1.0 / std::sqrt(mean_sq + eps);
    Vector out(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) {
        out[i] = x[i] * inv * gain[i];
    }
    return out;
}

inline constexpr double kRopeThetaBase = 10000.0;

// Rotary encoding applied independently to each head of a head-split vector.
// Pair (2i, 2i+1) of a head rotates by position * theta_base^(-2i/head_dim).
inline Vector rope_apply(std::span<const double> vec, std::size_t head_dim, std::size_t position,
                         double theta_base = kRopeThetaBase) {
    if (head_dim == 0 || head_dim % 2 != 0) {
        throw std::invalid_argument("rope_apply: head dimension must be even and non-zero");
    }
    if (vec.size() % head_dim != 0) {
        throw std::invalid_argument("rope_apply: vector length is not a multiple of head dimension");
    }
    Vector out(vec.begin(), vec.end());
    if (position == 0) {
        return out;
    }
    const double pos = static_cast<double>(position);
    for (std::size_t base = 0; base < vec.size(); base += head_dim) {
        for (std::size_t i = 0; i < head_dim / 2; ++i) {
            const double freq =
                std::pow(theta_base, -2.0 * static_cast<double>(i) / static_cast<double>(head_dim));
            const double angle = pos * freq;
            const double c = std::cos(angle);
            const double s = std::sin(angle);
            const double x0 = vec[base + 2 * i];
            const double x1 = vec[base + 2 * i + 1];
            out[base + 2 * i] = x0 * c - x1 * s;
            out[base + 2 * i + 1] = x0 * s + x1 * c;
        }
    }
    return out;
}

// SplitMix64: bit-exact on every platform, unlike std distributions.
class Rng {
public:
    explicit Rng(std::uint64_t seed) : seed_(seed), state_(seed) {}

    std::uint64_t seed() const { return seed_; }

    std::uint64_t next_u64() {
        std::uint64_t z = (state_ += 0x9E3779B97F4A7C15ULL);
        z = (z ^ (z >> 30)) * 0xBF58476D1CE4E5B9ULL;
        z = (z ^ (z >> 27)) * 0x94D049BB133111EBULL;
        return z ^ (z >> 31);
    }

    // Uniform in [0, 1) with 53 random bits.
    double next_unit() { return static_cast<double>(next_u64() >> 11) * 0x1.0p-53; }

    // Uniform integer in [0, bound).
    std::uint64_t next_below(std::uint64_t bound) {
        if (bound == 0) {
            throw std::invalid_argument("Rng::next_below: bound must be positive");
        }
        return next_u64() % bound;
    }

private:
    std::uint64_t seed_;
    std::uint64_t state_;
};

// Child seed number `counter` of a master seed.
inline std::uint64_t derive_seed(std::uint64_t master, std::uint64_t counter) {
    Rng mix(master ^ (counter * 0xD1B54A32D192ED03ULL + 0x8CB92BA72F3D8DD7ULL));
    return mix.next_u64();
}

inline Matrix seeded_uniform(Rng& rng, std::size_t rows, std::size_t cols, double scale) {
    if (!(scale > 0.0)) {
        throw std::invalid_argument("seeded_uniform: scale must be positive");
    }
    Matrix out(rows, cols);
    for (auto& v : out.data()) {
        v = (2.0 * rng.next_unit() - 1.0) * scale;
    }
    return out;
}

inline bool all_finite(const Matrix& m) {
    for (double v : m.data()) {
        if (!std::isfinite(v)) {
            return false;
        }
    }
    return true;
}

}  // namespace parvts
