#ifndef CAST_PROBING_HPP
#define CAST_PROBING_HPP

#include <cmath>
#include <cstdint>
#include <map>
#include <numeric>
#include <random>
#include <vector>

#include "cast/model.hpp"
#include "cast/numerics.hpp"

namespace cast {

enum class ClassifierKind {
    MaxMargin, // hinge loss, SVM-style
    Logistic,
};

// Label convention is fixed: 0 = caption query, 1 = non-caption query.
struct ProbeSample {
    RealVector x;
    int label = 0;
};

using HeadDataset = std::vector<ProbeSample>;

struct PairSample {
    std::vector<int> visual;
    std::vector<int> caption_query;
    std::vector<int> noncaption_query;
};

struct ProbeTrainConfig {
    double lambda = 1e-2;
    int iterations = 500;
    double step = 0.1;
    double step_decay = 0.99;
};

struct HeadProbe {
    RealVector weights;
    double bias = 0.0;
    RealVector means;
    RealVector scales;
    double cv_accuracy = 0.0;
    ClassifierKind kind = ClassifierKind::MaxMargin;

    // Decision rule: 1 if w . z + b > 0, ties resolve to 0.
    int predict(const RealVector& x) const {
        double s = bias;
        for (std::size_t i = 0; i < weights.size(); ++i) {
            s += weights[i] * (x[i] - means[i]) / scales[i];
        }
        return s > 0.0 ? 1 : 0;
    }
};

struct HeadRanking {
    RealMatrix accuracy;           // L x H grid of probe accuracies
    std::vector<HeadId> ordered;   // all heads, best first
    std::vector<HeadId> selected;  // Top-K prefix
    int k = 0;
};

// One text-masked last-token output per pass, labelled by query type.
// Ordering is (pair index, label): caption sample then non-caption sample.
inline std::map<HeadId, HeadDataset> collect_probe_dataset(
    const ModelParams& params, const std::vector<PairSample>& pairs) {
    if (pairs.size() < 2) {
        throw DataError("collect_probe_dataset: need at least 2 pairs, got " +
                        std::to_string(pairs.size()));
    }
    std::map<HeadId, HeadDataset> datasets;
    const int H = params.spec.heads;
    for (const PairSample& pair : pairs) {
        auto [cap, non] = capture_paired_outputs(params, pair.visual, pair.caption_query,
                                                 pair.noncaption_query);
        for (int l = 0; l < params.spec.layers; ++l) {
            for (int h = 0; h < H; ++h) {
                const HeadId id{l, h};
                HeadDataset& ds = datasets[id];
                ds.push_back({cap.head(id, H).masked_output_last, 0});
                ds.push_back({non.head(id, H).masked_output_last, 1});
            }
        }
    }
    return datasets;
}

namespace detail {

struct Standardization {
    RealVector means;
    RealVector scales;
};

inline Standardization standardize_stats(const HeadDataset& samples) {
    const std::size_t dim = samples.front().x.size();
    const double n = static_cast<double>(samples.size());
    Standardization st;
    st.means.assign(dim, 0.0);
    st.scales.assign(dim, 0.0);
    for (const auto& s : samples) {
        for (std::size_t j = 0; j < dim; ++j) {
            st.means[j] += s.x[j];
        }
    }
    for (std::size_t j = 0; j < dim; ++j) {
        st.means[j] /= n;
    }
    for (const auto& s : samples) {
        for (std::size_t j = 0; j < dim; ++j) {
            const double dx = s.x[j] - st.means[j];
            st.scales[j] += dx * dx;
        }
    }
    for (std::size_t j = 0; j < dim; ++j) {
        st.scales[j] = std::sqrt(st.scales[j] / n);
        if (st.scales[j] <= 0.0) {
            st.scales[j] = 1.0; // zero-variance dimension, clamp
        }
    }
    return st;
}

// Loss and gradient of the regularized objective at (w, b) over z-scored
// features. Labels map to signs: label 1 -> +1, label 0 -> -1.
inline double probe_loss_grad(const std::vector<RealVector>& z,
                              const std::vector<int>& labels, const RealVector& w,
                              double b, ClassifierKind kind, double lambda,
                              RealVector* grad_w, double* grad_b) {
    const std::size_t n = z.size();
    const std::size_t dim = w.size();
    grad_w->assign(dim, 0.0);
    *grad_b = 0.0;
    double loss = 0.0;
    for (std::size_t i = 0; i < n; ++i) {
        const double s = labels[i] == 1 ? 1.0 : -1.0;
        const double f = dot(w.data(), z[i].data(), dim) + b;
        if (kind == ClassifierKind::MaxMargin) {
            const double margin = 1.0 - s * f;
            if (margin > 0.0) {
                loss += margin;
                for (std::size_t j = 0; j < dim; ++j) {
                    (*grad_w)[j] -= s * z[i][j];
                }
                *grad_b -= s;
            }
        } else {
            // log(1 + exp(-s f)) computed stably
            const double t = -s * f;
            loss += t > 0.0 ? t + std::log1p(std::exp(-t)) : std::log1p(std::exp(t));
            const double sigma = 1.0 / (1.0 + std::exp(s * f));
            for (std::size_t j = 0; j < dim; ++j) {
                (*grad_w)[j] -= s * sigma * z[i][j];
            }
            *grad_b -= s * sigma;
        }
    }
    const double inv_n = 1.0 / static_cast<double>(n);
    loss *= inv_n;
    for (std::size_t j = 0; j < dim; ++j) {
        (*grad_w)[j] = (*grad_w)[j] * inv_n + 2.0 * lambda * w[j];
        loss += lambda * w[j] * w[j];
    }
    *grad_b *= inv_n;
    return loss;
}

} // namespace detail

// Deterministic full-batch gradient descent on the regularized hinge or
// logistic objective over z-scored features.
inline HeadProbe train_probe(const HeadDataset& samples, ClassifierKind kind,
                             std::uint64_t seed, const ProbeTrainConfig& config = {}) {
    if (samples.empty()) {
        throw DataError("train_probe: empty dataset");
    }
    bool has0 = false;
    bool has1 = false;
    for (const auto& s : samples) {
        has0 |= s.label == 0;
        has1 |= s.label == 1;
    }
    if (!has0 || !has1) {
        throw DataError("train_probe: both labels must be present");
    }
    const std::size_t dim = samples.front().x.size();
    for (const auto& s : samples) {
        if (s.x.size() != dim) {
            throw ShapeError("train_probe: inconsistent feature dimensions");
        }
    }

    detail::Standardization st = detail::standardize_stats(samples);
    std::vector<RealVector> z(samples.size());
    std::vector<int> labels(samples.size());
    for (std::size_t i = 0; i < samples.size(); ++i) {
        z[i].resize(dim);
        for (std::size_t j = 0; j < dim; ++j) {
            z[i][j] = (samples[i].x[j] - st.means[j]) / st.scales[j];
        }
        labels[i] = samples[i].label;
    }

    std::mt19937_64 rng(seed);
    RealVector w(dim);
    for (double& x : w) {
        x = uniform_range(rng, -1e-3, 1e-3);
    }
    double b = 0.0;

    RealVector grad_w(dim);
    double grad_b = 0.0;
    double step = config.step;
    for (int it = 0; it < config.iterations; ++it) {
        detail::probe_loss_grad(z, labels, w, b, kind, config.lambda, &grad_w, &grad_b);
        for (std::size_t j = 0; j < dim; ++j) {
            w[j] -= step * grad_w[j];
        }
        b -= step * grad_b;
        step *= config.step_decay;
    }

    HeadProbe probe;
    probe.weights = std::move(w);
    probe.bias = b;
    probe.means = std::move(st.means);
    probe.scales = std::move(st.scales);
    probe.kind = kind;
    return probe;
}

inline double training_accuracy(const HeadProbe& probe, const HeadDataset& samples) {
    std::size_t correct = 0;
    for (const auto& s : samples) {
        correct += probe.predict(s.x) == s.label ? 1u : 0u;
    }
    return static_cast<double>(correct) / static_cast<double>(samples.size());
}

// Mean held-out accuracy over deterministic stratified folds. The i-th
// label-0 sample and the i-th label-1 sample (in dataset order) are kept in
// the same fold: probe datasets come in caption/non-caption pairs over one
// image, and splitting such a pair would leak its twin into training.
inline double cv_accuracy(const HeadDataset& samples, ClassifierKind kind, int folds,
                          std::uint64_t seed, const ProbeTrainConfig& config = {}) {
    if (folds < 2) {
        throw ArgumentError("cv_accuracy: folds must be >= 2");
    }
    std::vector<std::size_t> idx0;
    std::vector<std::size_t> idx1;
    for (std::size_t i = 0; i < samples.size(); ++i) {
        (samples[i].label == 0 ? idx0 : idx1).push_back(i);
    }
    if (idx0.size() < static_cast<std::size_t>(folds) ||
        idx1.size() < static_cast<std::size_t>(folds)) {
        throw DataError("cv_accuracy: need at least " + std::to_string(folds) +
                        " samples per class");
    }

    std::mt19937_64 rng(seed);
    auto shuffle = [&rng](std::vector<std::size_t>& v) {
        for (std::size_t i = v.size(); i > 1; --i) {
            std::size_t j = static_cast<std::size_t>(rng() % i);
            std::swap(v[i - 1], v[j]);
        }
    };

    const std::size_t paired = std::min(idx0.size(), idx1.size());
    std::vector<std::size_t> pair_order(paired);
    for (std::size_t i = 0; i < paired; ++i) {
        pair_order[i] = i;
    }
    shuffle(pair_order);

    std::vector<int> fold_of(samples.size(), 0);
    for (std::size_t i = 0; i < paired; ++i) {
        const int f = static_cast<int>(i % static_cast<std::size_t>(folds));
        fold_of[idx0[pair_order[i]]] = f;
        fold_of[idx1[pair_order[i]]] = f;
    }
    // leftover samples of the larger class spread round-robin
    std::vector<std::size_t> rest;
    for (std::size_t i = paired; i < idx0.size(); ++i) {
        rest.push_back(idx0[i]);
    }
    for (std::size_t i = paired; i < idx1.size(); ++i) {
        rest.push_back(idx1[i]);
    }
    shuffle(rest);
    for (std::size_t i = 0; i < rest.size(); ++i) {
        fold_of[rest[i]] = static_cast<int>(i % static_cast<std::size_t>(folds));
    }

    double acc_sum = 0.0;
    for (int f = 0; f < folds; ++f) {
        HeadDataset train;
        HeadDataset held;
        for (std::size_t i = 0; i < samples.size(); ++i) {
            (fold_of[i] == f ? held : train).push_back(samples[i]);
        }
        HeadProbe probe = train_probe(train, kind, seed + static_cast<std::uint64_t>(f) + 1,
                                      config);
        acc_sum += training_accuracy(probe, held);
    }
    return acc_sum / static_cast<double>(folds);
}

// Top-K selection over the accuracy grid with the canonical tie-break.
inline HeadRanking rank_heads(const RealMatrix& accuracy_grid, int k) {
    const int total = static_cast<int>(accuracy_grid.rows * accuracy_grid.cols);
    if (k < 0 || k > total) {
        throw ShapeError("rank_heads: K out of range [0, " + std::to_string(total) + "]");
    }
    std::vector<std::pair<HeadId, double>> values;
    values.reserve(static_cast<std::size_t>(total));
    for (std::size_t l = 0; l < accuracy_grid.rows; ++l) {
        for (std::size_t h = 0; h < accuracy_grid.cols; ++h) {
            const double a = accuracy_grid.at(l, h);
            if (!std::isfinite(a) || a < 0.0 || a > 1.0) {
                throw ArgumentError("rank_heads: accuracies must be finite in [0,1]");
            }
            values.push_back({HeadId{static_cast<int>(l), static_cast<int>(h)}, a});
        }
    }
    HeadRanking ranking;
    ranking.accuracy = accuracy_grid;
    ranking.ordered = topk_desc(values, values.size());
    ranking.selected.assign(ranking.ordered.begin(),
                            ranking.ordered.begin() + static_cast<std::size_t>(k));
    ranking.k = k;
    return ranking;
}

inline double overlap_ratio(const std::vector<HeadId>& set_a,
                            const std::vector<HeadId>& set_b, int k) {
    if (k < 1) {
        throw ArgumentError("overlap_ratio: k must be >= 1");
    }
    if (set_a.size() != static_cast<std::size_t>(k) ||
        set_b.size() != static_cast<std::size_t>(k)) {
        throw ArgumentError("overlap_ratio: both sets must have size k");
    }
    std::size_t shared = 0;
    for (const HeadId& a : set_a) {
        for (const HeadId& b : set_b) {
            if (a == b) {
                ++shared;
                break;
            }
        }
    }
    return static_cast<double>(shared) / static_cast<double>(k);
}

} // namespace cast

#endif
