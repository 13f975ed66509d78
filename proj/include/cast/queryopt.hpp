#ifndef CAST_QUERYOPT_HPP
#define CAST_QUERYOPT_HPP

#include <map>
#include <string>
#include <vector>

#include "cast/analysis.hpp"
#include "cast/model.hpp"
#include "cast/probing.hpp"
#include "cast/shiftvec.hpp"

namespace cast {

struct CaptionQuery {
    std::string id;
    std::vector<int> tokens;
};

struct CaptionQueryPool {
    std::vector<CaptionQuery> queries;

    void validate() const {
        if (queries.empty()) {
            throw ArgumentError("CaptionQueryPool: empty pool");
        }
        for (std::size_t i = 0; i < queries.size(); ++i) {
            for (std::size_t j = i + 1; j < queries.size(); ++j) {
                if (queries[i].id == queries[j].id) {
                    throw ArgumentError("CaptionQueryPool: duplicate id " + queries[i].id);
                }
            }
        }
    }
};

// Dataset-average L1 change of the per-sample visual-attention-mass grid
// when the sample's own (non-caption) query is replaced by the candidate
// caption query. The cost lives in attention-weight space even though
// steering lives in output space.
inline double shift_cost(const ModelParams& params,
                         const std::vector<VisualSample>& dataset,
                         const std::vector<int>& caption_query) {
    if (dataset.empty()) {
        throw DataError("shift_cost: empty dataset");
    }
    CaptureOptions capture;
    capture.attention = true;
    double total = 0.0;
    for (const VisualSample& s : dataset) {
        ForwardTrace cap =
            forward(params, SequenceInput{s.visual, caption_query}, nullptr, capture);
        ForwardTrace non =
            forward(params, SequenceInput{s.visual, s.query}, nullptr, capture);
        AttentionMassGrid gc = visual_mass(cap, params.spec);
        AttentionMassGrid gn = visual_mass(non, params.spec);
        for (std::size_t i = 0; i < gc.grid.data.size(); ++i) {
            total += std::abs(gc.grid.data[i] - gn.grid.data[i]);
        }
    }
    return total / static_cast<double>(dataset.size());
}

struct QueryCostRow {
    std::string id;
    double cost = 0.0;
    double va = 0.0; // VA% under this caption query
};

struct ShiftCostReport {
    std::vector<QueryCostRow> rows; // pool order
    std::string selected_id;        // argmin cost, ties to lowest id
};

inline ShiftCostReport select_optimized_query(const ModelParams& params,
                                              const std::vector<VisualSample>& dataset,
                                              const CaptionQueryPool& pool) {
    pool.validate();
    ShiftCostReport report;
    for (const CaptionQuery& q : pool.queries) {
        QueryCostRow row;
        row.id = q.id;
        row.cost = shift_cost(params, dataset, q.tokens);
        row.va = va_percent(params, dataset, q.tokens);
        report.rows.push_back(std::move(row));
    }
    const QueryCostRow* best = &report.rows.front();
    for (const QueryCostRow& row : report.rows) {
        if (row.cost < best->cost || (row.cost == best->cost && row.id < best->id)) {
            best = &row;
        }
    }
    report.selected_id = best->id;
    return report;
}

// Multi-query ensembling: probe datasets pooled across every pool query
// (caption label 0 each), shift vectors averaged across per-query
// estimates.
struct EnsembleResult {
    std::map<HeadId, HeadDataset> pooled_datasets;
    ShiftVectorSet shifts;
};

inline EnsembleResult build_ensemble(const ModelParams& params,
                                     const std::vector<VisualSample>& dataset,
                                     const CaptionQueryPool& pool) {
    pool.validate();
    if (pool.queries.size() < 2) {
        throw ArgumentError("build_ensemble: pool must contain at least 2 queries");
    }
    if (dataset.empty()) {
        throw DataError("build_ensemble: empty dataset");
    }
    EnsembleResult result;
    std::vector<ShiftVectorSet> sets;
    for (const CaptionQuery& q : pool.queries) {
        std::vector<PairSample> pairs;
        pairs.reserve(dataset.size());
        for (const VisualSample& s : dataset) {
            pairs.push_back(PairSample{s.visual, q.tokens, s.query});
        }
        std::map<HeadId, HeadDataset> per_query = collect_probe_dataset(params, pairs);
        for (auto& [id, ds] : per_query) {
            HeadDataset& pooled = result.pooled_datasets[id];
            pooled.insert(pooled.end(), ds.begin(), ds.end());
        }
        ShiftVectorSet set = estimate_shifts(params, pairs);
        set.source_queries = {q.id};
        sets.push_back(std::move(set));
    }
    result.shifts = ensemble_shifts(sets);
    return result;
}

} // namespace cast

#endif
