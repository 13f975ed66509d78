#ifndef CAST_ANALYSIS_HPP
#define CAST_ANALYSIS_HPP

#include <cstdio>
#include <fstream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include "cast/model.hpp"
#include "cast/numerics.hpp"

namespace cast {

// L x H grid of visual-attention mass (last-row attention weight summed
// over visual positions), either for one sample or aggregated over a
// dataset.
struct AttentionMassGrid {
    enum class Tag { PerSample, DatasetAggregate };
    RealMatrix grid;
    Tag tag = Tag::PerSample;
};

// One evaluation sample: an image plus the query it was collected with.
struct VisualSample {
    std::vector<int> visual;
    std::vector<int> query;
};

inline AttentionMassGrid visual_mass(const ForwardTrace& trace, const ModelSpec& spec) {
    AttentionMassGrid out;
    out.tag = AttentionMassGrid::Tag::PerSample;
    out.grid = RealMatrix(static_cast<std::size_t>(spec.layers),
                          static_cast<std::size_t>(spec.heads));
    if (trace.heads.size() != static_cast<std::size_t>(spec.head_count())) {
        throw DataError("visual_mass: trace does not cover the head grid");
    }
    for (int l = 0; l < spec.layers; ++l) {
        for (int h = 0; h < spec.heads; ++h) {
            const HeadTrace& ht = trace.head(HeadId{l, h}, spec.heads);
            if (ht.attn_last_row.empty()) {
                throw DataError("visual_mass: missing attention row for head " +
                                to_string(HeadId{l, h}));
            }
            double s = 0.0;
            for (int i = 0; i < trace.m; ++i) {
                s += ht.attn_last_row[static_cast<std::size_t>(i)];
            }
            out.grid.at(static_cast<std::size_t>(l), static_cast<std::size_t>(h)) = s;
        }
    }
    return out;
}

// Elementwise sum of per-sample visual-mass grids in fixed sample order.
// When override_query is set it replaces every sample's own query.
inline AttentionMassGrid dataset_mass(const ModelParams& params,
                                      const std::vector<VisualSample>& samples,
                                      const std::optional<std::vector<int>>& override_query
                                      = std::nullopt,
                                      const SteeringPlan* plan = nullptr) {
    if (samples.empty()) {
        throw DataError("dataset_mass: empty dataset");
    }
    CaptureOptions capture;
    capture.attention = true;
    AttentionMassGrid total;
    total.tag = AttentionMassGrid::Tag::DatasetAggregate;
    total.grid = RealMatrix(static_cast<std::size_t>(params.spec.layers),
                            static_cast<std::size_t>(params.spec.heads));
    for (const VisualSample& s : samples) {
        const std::vector<int>& q = override_query.has_value() ? *override_query : s.query;
        ForwardTrace t = forward(params, SequenceInput{s.visual, q}, plan, capture);
        AttentionMassGrid g = visual_mass(t, params.spec);
        for (std::size_t i = 0; i < total.grid.data.size(); ++i) {
            total.grid.data[i] += g.grid.data[i];
        }
    }
    return total;
}

// Head-wise and layer-wise relative change of visual-attention mass between
// two query conditions. Cells with zero reference mass are flagged
// undefined, never clamped.
struct ChangeRateReport {
    RealMatrix headwise;
    std::vector<std::uint8_t> headwise_defined;  // row-major, parallel to headwise
    RealVector layerwise;
    std::vector<std::uint8_t> layerwise_defined;
};

inline ChangeRateReport change_rates(const AttentionMassGrid& target,
                                     const AttentionMassGrid& ref) {
    if (!target.grid.same_shape(ref.grid)) {
        throw ShapeError("change_rates: grid shapes differ");
    }
    ChangeRateReport report;
    const std::size_t L = target.grid.rows;
    const std::size_t H = target.grid.cols;
    report.headwise = RealMatrix(L, H);
    report.headwise_defined.assign(L * H, 0);
    report.layerwise.assign(L, 0.0);
    report.layerwise_defined.assign(L, 0);
    for (std::size_t l = 0; l < L; ++l) {
        double tgt_sum = 0.0;
        double ref_sum = 0.0;
        for (std::size_t h = 0; h < H; ++h) {
            const double t = target.grid.at(l, h);
            const double r = ref.grid.at(l, h);
            tgt_sum += t;
            ref_sum += r;
            if (r != 0.0) {
                report.headwise.at(l, h) = (t - r) / r;
                report.headwise_defined[l * H + h] = 1;
            }
        }
        if (ref_sum != 0.0) {
            report.layerwise[l] = (tgt_sum - ref_sum) / ref_sum;
            report.layerwise_defined[l] = 1;
        }
    }
    return report;
}

// Average fraction of last-token attention on visual tokens, uniform over
// samples, layers, and heads.
inline double va_percent(const ModelParams& params, const std::vector<VisualSample>& samples,
                         const std::optional<std::vector<int>>& override_query = std::nullopt,
                         const SteeringPlan* plan = nullptr) {
    AttentionMassGrid agg = dataset_mass(params, samples, override_query, plan);
    double s = 0.0;
    for (double x : agg.grid.data) {
        s += x;
    }
    return s / (static_cast<double>(samples.size()) *
                static_cast<double>(agg.grid.data.size()));
}

namespace detail {

inline std::string format_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

} // namespace detail

inline void ensure_finite_grid_for_export(const RealMatrix& grid,
                                          const std::vector<std::uint8_t>& defined) {
    for (std::size_t i = 0; i < grid.data.size(); ++i) {
        const bool is_defined = defined.empty() || defined[i] != 0;
        if (is_defined && !std::isfinite(grid.data[i])) {
            throw ArgumentError("export_heatmap: non-finite value in defined cell");
        }
    }
}

// Delimiter-separated table, rows = layers, cols = heads, undefined cells
// rendered as NA. A sidecar metadata document goes to path + ".meta.json".
// Values round-trip at 17 significant digits.
inline void export_heatmap(const RealMatrix& grid,
                           const std::vector<std::uint8_t>& defined,
                           const std::string& path, const std::string& tag) {
    ensure_finite_grid_for_export(grid, defined);
    std::ofstream out(path);
    if (!out) {
        throw IoError("export_heatmap: cannot write " + path);
    }
    for (std::size_t l = 0; l < grid.rows; ++l) {
        for (std::size_t h = 0; h < grid.cols; ++h) {
            if (h > 0) {
                out << ',';
            }
            if (!defined.empty() && defined[l * grid.cols + h] == 0) {
                out << "NA";
            } else {
                out << detail::format_g17(grid.at(l, h));
            }
        }
        out << '\n';
    }
    if (!out) {
        throw IoError("export_heatmap: write failed for " + path);
    }
    out.close();
    std::ofstream meta(path + ".meta.json");
    if (!meta) {
        throw IoError("export_heatmap: cannot write sidecar for " + path);
    }
    meta << "{\"tag\":\"" << tag << "\",\"rows\":" << grid.rows
         << ",\"cols\":" << grid.cols << "}\n";
}

inline void export_heatmap(const AttentionMassGrid& grid, const std::string& path) {
    export_heatmap(grid.grid, {}, path,
                   grid.tag == AttentionMassGrid::Tag::PerSample ? "per-sample-mass"
                                                                 : "dataset-mass");
}

inline void export_heatmap(const ChangeRateReport& report, const std::string& path) {
    export_heatmap(report.headwise, report.headwise_defined, path, "head-change-rate");
}

// Loads a heatmap written by export_heatmap; NA cells come back as 0 with
// their defined flag cleared.
inline RealMatrix load_heatmap(const std::string& path,
                               std::vector<std::uint8_t>* defined = nullptr) {
    std::ifstream in(path);
    if (!in) {
        throw IoError("load_heatmap: cannot read " + path);
    }
    std::vector<std::vector<double>> rows;
    std::vector<std::vector<std::uint8_t>> flags;
    std::string line;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        rows.emplace_back();
        flags.emplace_back();
        std::stringstream ss(line);
        std::string cell;
        while (std::getline(ss, cell, ',')) {
            if (cell == "NA") {
                rows.back().push_back(0.0);
                flags.back().push_back(0);
            } else {
                rows.back().push_back(std::stod(cell));
                flags.back().push_back(1);
            }
        }
    }
    if (rows.empty()) {
        throw ParseError("load_heatmap: no data rows in " + path);
    }
    RealMatrix out(rows.size(), rows.front().size());
    if (defined != nullptr) {
        defined->assign(out.rows * out.cols, 1);
    }
    for (std::size_t l = 0; l < rows.size(); ++l) {
        if (rows[l].size() != out.cols) {
            throw ParseError("load_heatmap: ragged rows in " + path);
        }
        for (std::size_t h = 0; h < out.cols; ++h) {
            out.at(l, h) = rows[l][h];
            if (defined != nullptr) {
                (*defined)[l * out.cols + h] = flags[l][h];
            }
        }
    }
    return out;
}

} // namespace cast

#endif
