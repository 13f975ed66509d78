#ifndef CAST_SHIFTVEC_HPP
#define CAST_SHIFTVEC_HPP

#include <map>
#include <string>
#include <vector>

#include "cast/model.hpp"
#include "cast/probing.hpp"

namespace cast {

// Per-head attention-output shift vectors: mean difference of the ORIGINAL
// last-token outputs between caption and non-caption passes. Covers every
// head in the grid so one estimation serves any K.
struct ShiftVectorSet {
    std::map<HeadId, RealVector> vectors;
    int pair_count = 0;
    std::vector<std::string> source_queries;
};

inline ShiftVectorSet estimate_shifts(const ModelParams& params,
                                      const std::vector<PairSample>& pairs) {
    if (pairs.empty()) {
        throw DataError("estimate_shifts: empty pair list");
    }
    const int H = params.spec.heads;
    const std::size_t d = static_cast<std::size_t>(params.spec.head_dim);
    ShiftVectorSet set;
    set.pair_count = static_cast<int>(pairs.size());
    for (int l = 0; l < params.spec.layers; ++l) {
        for (int h = 0; h < H; ++h) {
            set.vectors[HeadId{l, h}] = RealVector(d, 0.0);
        }
    }
    for (const PairSample& pair : pairs) {
        auto [cap, non] = capture_paired_outputs(params, pair.visual, pair.caption_query,
                                                 pair.noncaption_query);
        for (auto& [id, vec] : set.vectors) {
            const RealVector& oc = cap.head(id, H).output_last;
            const RealVector& on = non.head(id, H).output_last;
            for (std::size_t c = 0; c < d; ++c) {
                vec[c] += oc[c] - on[c];
            }
        }
    }
    const double inv_b = 1.0 / static_cast<double>(pairs.size());
    for (auto& [id, vec] : set.vectors) {
        for (double& x : vec) {
            x *= inv_b;
        }
    }
    return set;
}

// Sample-specific shift from exactly two forward passes on this sample's
// visual tokens.
inline ShiftVectorSet on_the_fly_shift(const ModelParams& params,
                                       const std::vector<int>& visual,
                                       const std::vector<int>& noncaption_query,
                                       const std::vector<int>& caption_query) {
    ShiftVectorSet set = estimate_shifts(
        params, {PairSample{visual, caption_query, noncaption_query}});
    set.source_queries = {"on-the-fly"};
    return set;
}

// Unweighted per-head mean of the input sets.
inline ShiftVectorSet ensemble_shifts(const std::vector<ShiftVectorSet>& sets) {
    if (sets.empty()) {
        throw DataError("ensemble_shifts: empty set list");
    }
    const ShiftVectorSet& first = sets.front();
    for (const ShiftVectorSet& s : sets) {
        if (s.vectors.size() != first.vectors.size()) {
            throw ArgumentError("ensemble_shifts: incompatible head grids");
        }
        auto it = first.vectors.begin();
        for (const auto& [id, vec] : s.vectors) {
            if (it->first != id || it->second.size() != vec.size()) {
                throw ArgumentError("ensemble_shifts: incompatible head grids");
            }
            ++it;
        }
    }
    ShiftVectorSet out;
    out.pair_count = first.pair_count;
    for (const auto& [id, vec] : first.vectors) {
        out.vectors[id] = RealVector(vec.size(), 0.0);
    }
    for (const ShiftVectorSet& s : sets) {
        for (const auto& [id, vec] : s.vectors) {
            RealVector& acc = out.vectors[id];
            for (std::size_t c = 0; c < vec.size(); ++c) {
                acc[c] += vec[c];
            }
        }
        for (const std::string& q : s.source_queries) {
            out.source_queries.push_back(q);
        }
    }
    const double inv = 1.0 / static_cast<double>(sets.size());
    for (auto& [id, vec] : out.vectors) {
        for (double& x : vec) {
            x *= inv;
        }
    }
    return out;
}

} // namespace cast

#endif
