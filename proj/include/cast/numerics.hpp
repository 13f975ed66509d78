#ifndef CAST_NUMERICS_HPP
#define CAST_NUMERICS_HPP

#include <algorithm>
#include <cmath>
#include <compare>
#include <cstdint>
#include <limits>
#include <random>
#include <string>
#include <utility>
#include <vector>

#include "cast/error.hpp"

namespace cast {

using RealVector = std::vector<double>;

constexpr double kNegInf = -std::numeric_limits<double>::infinity();

// Dense row-major matrix of doubles. All accumulation in this library is
// done in 64-bit floats with fixed summation order.
struct RealMatrix {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    RealMatrix() = default;
    RealMatrix(std::size_t r, std::size_t c, double fill = 0.0)
        : rows(r), cols(c), data(r * c, fill) {}

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }

    bool same_shape(const RealMatrix& o) const {
        return rows == o.rows && cols == o.cols;
    }

    bool operator==(const RealMatrix& o) const {
        return rows == o.rows && cols == o.cols && data == o.data;
    }
};

// (layer, head) coordinate. Ordered lexicographically; this ordering is the
// canonical tie-break everywhere heads are ranked or enumerated.
struct HeadId {
    int layer = 0;
    int head = 0;

    auto operator<=>(const HeadId&) const = default;
};

inline std::string to_string(const HeadId& id) {
    return "(" + std::to_string(id.layer) + "," + std::to_string(id.head) + ")";
}

inline void ensure_finite(const RealVector& v, const char* what) {
    for (double x : v) {
        if (!std::isfinite(x)) {
            throw ShapeError(std::string(what) + ": non-finite entry");
        }
    }
}

inline void ensure_finite(const RealMatrix& m, const char* what) {
    for (double x : m.data) {
        if (!std::isfinite(x)) {
            throw ShapeError(std::string(what) + ": non-finite entry");
        }
    }
}

// Numerically stable softmax over one row of logits. -inf entries are the
// canonical mask sentinel and map to exactly 0.
inline RealVector softmax_row(const RealVector& logits) {
    if (logits.empty()) {
        throw ShapeError("softmax_row: empty input");
    }
    double mx = kNegInf;
    for (double x : logits) {
        if (std::isnan(x) || x == std::numeric_limits<double>::infinity()) {
            throw ShapeError("softmax_row: entries must be finite or -inf");
        }
        mx = std::max(mx, x);
    }
    if (mx == kNegInf) {
        throw DataError("softmax_row: degenerate row, all entries masked");
    }
    RealVector out(logits.size());
    double sum = 0.0;
    for (std::size_t i = 0; i < logits.size(); ++i) {
        out[i] = (logits[i] == kNegInf) ? 0.0 : std::exp(logits[i] - mx);
        sum += out[i];
    }
    for (double& x : out) {
        x /= sum;
    }
    return out;
}

// Keys sorted by value descending, exact ties broken by ascending (layer,
// head). Deterministic across runs and platforms.
inline std::vector<HeadId> topk_desc(const std::vector<std::pair<HeadId, double>>& values,
                                     std::size_t k) {
    if (k > values.size()) {
        throw ShapeError("topk_desc: k exceeds population size");
    }
    std::vector<std::pair<HeadId, double>> sorted = values;
    std::sort(sorted.begin(), sorted.end(), [](const auto& a, const auto& b) {
        if (a.second != b.second) {
            return a.second > b.second;
        }
        return a.first < b.first;
    });
    std::vector<HeadId> out;
    out.reserve(k);
    for (std::size_t i = 0; i < k; ++i) {
        out.push_back(sorted[i].first);
    }
    return out;
}

// out = a · B, a row vector of length B.rows.
inline void accumulate_row_times_matrix(const double* a, const RealMatrix& b,
                                        double* out) {
    for (std::size_t j = 0; j < b.cols; ++j) {
        out[j] = 0.0;
    }
    for (std::size_t i = 0; i < b.rows; ++i) {
        const double ai = a[i];
        const double* brow = b.row(i);
        for (std::size_t j = 0; j < b.cols; ++j) {
            out[j] += ai * brow[j];
        }
    }
}

inline RealMatrix matmul(const RealMatrix& a, const RealMatrix& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: inner dimensions differ");
    }
    RealMatrix out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        accumulate_row_times_matrix(a.row(i), b, out.row(i));
    }
    return out;
}

inline double dot(const double* a, const double* b, std::size_t n) {
    double s = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        s += a[i] * b[i];
    }
    return s;
}

inline double mean(const RealVector& v) {
    if (v.empty()) {
        throw ShapeError("mean: empty input");
    }
    double s = 0.0;
    for (double x : v) {
        s += x;
    }
    return s / static_cast<double>(v.size());
}

// Portable uniform in [0, 1). std::uniform_real_distribution is not
// bit-stable across standard libraries, so draws are built from raw bits.
inline double uniform_unit(std::mt19937_64& g) {
    return static_cast<double>(g() >> 11) * 0x1.0p-53;
}

inline double uniform_range(std::mt19937_64& g, double lo, double hi) {
    return lo + (hi - lo) * uniform_unit(g);
}

// Marsaglia polar method; deterministic given the generator state.
inline double normal_sample(std::mt19937_64& g) {
    while (true) {
        double u = 2.0 * uniform_unit(g) - 1.0;
        double v = 2.0 * uniform_unit(g) - 1.0;
        double s = u * u + v * v;
        if (s > 0.0 && s < 1.0) {
            return u * std::sqrt(-2.0 * std::log(s) / s);
        }
    }
}

inline int uniform_int(std::mt19937_64& g, int lo, int hi) {
    // inclusive range, rejection-free for desk-scale spans
    const std::uint64_t span = static_cast<std::uint64_t>(hi - lo + 1);
    return lo + static_cast<int>(g() % span);
}

} // namespace cast

#endif
