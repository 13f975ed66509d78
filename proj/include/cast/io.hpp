#ifndef CAST_IO_HPP
#define CAST_IO_HPP

#include <fstream>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "cast/digest.hpp"
#include "cast/model.hpp"
#include "cast/plan.hpp"
#include "cast/probing.hpp"
#include "cast/queryopt.hpp"
#include "cast/shiftvec.hpp"

namespace cast::io {

using nlohmann::json;

constexpr int kArtifactVersion = 1;

inline json parse_document(const std::string& text, const std::string& origin) {
    try {
        return json::parse(text);
    } catch (const json::parse_error& e) {
        throw ParseError("malformed document " + origin + " at byte " +
                         std::to_string(e.byte) + ": " + e.what());
    }
}

inline void check_header(const json& doc, const std::string& expected_format,
                         const std::string& origin) {
    if (!doc.is_object() || !doc.contains("format") || !doc["format"].is_string()) {
        throw ValidationError(origin + ": missing format tag");
    }
    const std::string format = doc["format"].get<std::string>();
    if (format != expected_format) {
        throw ValidationError(origin + ": wrong format tag '" + format + "', expected '" +
                              expected_format + "'");
    }
    if (!doc.contains("version") || !doc["version"].is_number_integer()) {
        throw ValidationError(origin + ": missing version");
    }
    const int version = doc["version"].get<int>();
    if (version != kArtifactVersion) {
        throw ValidationError(origin + ": unsupported version " + std::to_string(version) +
                              ", upgrade required (supported: " +
                              std::to_string(kArtifactVersion) + ")");
    }
}

inline std::string read_file(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw IoError("cannot open " + path);
    }
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

inline void write_file(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::binary);
    if (!out) {
        throw IoError("cannot write " + path);
    }
    out << content;
    if (!out) {
        throw IoError("write failed for " + path);
    }
}

// --- matrices and vectors ------------------------------------------------

inline json matrix_to_json(const RealMatrix& m) {
    return json{{"rows", m.rows}, {"cols", m.cols}, {"data", m.data}};
}

inline RealMatrix matrix_from_json(const json& j, const std::string& what) {
    if (!j.is_object() || !j.contains("rows") || !j.contains("cols") ||
        !j.contains("data")) {
        throw ValidationError(what + ": malformed matrix");
    }
    RealMatrix m;
    m.rows = j["rows"].get<std::size_t>();
    m.cols = j["cols"].get<std::size_t>();
    m.data = j["data"].get<std::vector<double>>();
    if (m.data.size() != m.rows * m.cols) {
        throw ValidationError(what + ": matrix data length mismatch");
    }
    return m;
}

// --- model ---------------------------------------------------------------

inline json spec_to_json(const ModelSpec& spec) {
    return json{{"layers", spec.layers},       {"heads", spec.heads},
                {"model_dim", spec.model_dim}, {"head_dim", spec.head_dim},
                {"vocab_visual", spec.vocab_visual}, {"vocab_text", spec.vocab_text},
                {"mlp_hidden", spec.mlp_hidden}, {"max_seq", spec.max_seq}};
}

inline ModelSpec spec_from_json(const json& j) {
    ModelSpec spec;
    spec.layers = j.at("layers").get<int>();
    spec.heads = j.at("heads").get<int>();
    spec.model_dim = j.at("model_dim").get<int>();
    spec.head_dim = j.at("head_dim").get<int>();
    spec.vocab_visual = j.at("vocab_visual").get<int>();
    spec.vocab_text = j.at("vocab_text").get<int>();
    spec.mlp_hidden = j.at("mlp_hidden").get<int>();
    spec.max_seq = j.at("max_seq").get<int>();
    spec.validate();
    return spec;
}

// Canonical digest binding probe/shift artifacts to the model they came
// from.
inline std::string spec_digest(const ModelSpec& spec) {
    return digest_hex(spec_to_json(spec).dump());
}

inline json model_to_json(const ModelParams& params) {
    params.validate();
    json layers = json::array();
    for (const LayerParams& layer : params.layers) {
        json heads = json::array();
        for (const HeadParams& h : layer.heads) {
            heads.push_back(json{{"w_q", matrix_to_json(h.w_q)},
                                 {"w_k", matrix_to_json(h.w_k)},
                                 {"w_v", matrix_to_json(h.w_v)}});
        }
        layers.push_back(json{{"heads", heads},
                              {"w_o", matrix_to_json(layer.w_o)},
                              {"mlp_w1", matrix_to_json(layer.mlp_w1)},
                              {"mlp_b1", layer.mlp_b1},
                              {"mlp_w2", matrix_to_json(layer.mlp_w2)},
                              {"mlp_b2", layer.mlp_b2}});
    }
    return json{{"format", "CAST-MODEL"},
                {"version", kArtifactVersion},
                {"spec", spec_to_json(params.spec)},
                {"visual_embed", matrix_to_json(params.visual_embed)},
                {"text_embed", matrix_to_json(params.text_embed)},
                {"pos_embed", matrix_to_json(params.pos_embed)},
                {"layers", layers},
                {"unembed", matrix_to_json(params.unembed)}};
}

inline ModelParams model_from_json(const json& doc, const std::string& origin) {
    check_header(doc, "CAST-MODEL", origin);
    ModelParams params;
    params.spec = spec_from_json(doc.at("spec"));
    params.visual_embed = matrix_from_json(doc.at("visual_embed"), origin);
    params.text_embed = matrix_from_json(doc.at("text_embed"), origin);
    params.pos_embed = matrix_from_json(doc.at("pos_embed"), origin);
    for (const json& jl : doc.at("layers")) {
        LayerParams layer;
        for (const json& jh : jl.at("heads")) {
            HeadParams h;
            h.w_q = matrix_from_json(jh.at("w_q"), origin);
            h.w_k = matrix_from_json(jh.at("w_k"), origin);
            h.w_v = matrix_from_json(jh.at("w_v"), origin);
            layer.heads.push_back(std::move(h));
        }
        layer.w_o = matrix_from_json(jl.at("w_o"), origin);
        layer.mlp_b1 = jl.at("mlp_b1").get<RealVector>();
        layer.mlp_w1 = matrix_from_json(jl.at("mlp_w1"), origin);
        layer.mlp_w2 = matrix_from_json(jl.at("mlp_w2"), origin);
        layer.mlp_b2 = jl.at("mlp_b2").get<RealVector>();
        params.layers.push_back(std::move(layer));
    }
    params.unembed = matrix_from_json(doc.at("unembed"), origin);
    params.validate();
    return params;
}

// --- probes ----------------------------------------------------------------

struct ProbeArtifact {
    std::string spec_digest;
    std::map<HeadId, HeadProbe> probes;

    // Accuracy grid reconstructed from the stored cross-validated scores.
    RealMatrix accuracy_grid(const ModelSpec& spec) const {
        RealMatrix grid(static_cast<std::size_t>(spec.layers),
                        static_cast<std::size_t>(spec.heads));
        for (const auto& [id, probe] : probes) {
            grid.at(static_cast<std::size_t>(id.layer),
                    static_cast<std::size_t>(id.head)) = probe.cv_accuracy;
        }
        return grid;
    }
};

inline json probes_to_json(const ProbeArtifact& artifact) {
    json heads = json::array();
    for (const auto& [id, probe] : artifact.probes) {
        heads.push_back(json{
            {"layer", id.layer},
            {"head", id.head},
            {"w", probe.weights},
            {"b", probe.bias},
            {"means", probe.means},
            {"scales", probe.scales},
            {"cv_accuracy", probe.cv_accuracy},
            {"kind", probe.kind == ClassifierKind::MaxMargin ? "maxmargin" : "logistic"}});
    }
    return json{{"format", "CAST-PROBES"},
                {"version", kArtifactVersion},
                {"spec_digest", artifact.spec_digest},
                {"heads", heads}};
}

inline ProbeArtifact probes_from_json(const json& doc, const std::string& origin) {
    check_header(doc, "CAST-PROBES", origin);
    ProbeArtifact artifact;
    artifact.spec_digest = doc.at("spec_digest").get<std::string>();
    for (const json& jh : doc.at("heads")) {
        HeadId id{jh.at("layer").get<int>(), jh.at("head").get<int>()};
        HeadProbe probe;
        probe.weights = jh.at("w").get<RealVector>();
        probe.bias = jh.at("b").get<double>();
        probe.means = jh.at("means").get<RealVector>();
        probe.scales = jh.at("scales").get<RealVector>();
        probe.cv_accuracy = jh.at("cv_accuracy").get<double>();
        const std::string kind = jh.at("kind").get<std::string>();
        if (kind == "maxmargin") {
            probe.kind = ClassifierKind::MaxMargin;
        } else if (kind == "logistic") {
            probe.kind = ClassifierKind::Logistic;
        } else {
            throw ValidationError(origin + ": unknown classifier kind '" + kind + "'");
        }
        artifact.probes[id] = std::move(probe);
    }
    return artifact;
}

// --- shifts ----------------------------------------------------------------

struct ShiftArtifact {
    std::string spec_digest;
    ShiftVectorSet set;
};

inline json shifts_to_json(const ShiftArtifact& artifact) {
    json heads = json::array();
    for (const auto& [id, vec] : artifact.set.vectors) {
        heads.push_back(json{{"layer", id.layer}, {"head", id.head}, {"s", vec}});
    }
    return json{{"format", "CAST-SHIFTS"},
                {"version", kArtifactVersion},
                {"spec_digest", artifact.spec_digest},
                {"pair_count", artifact.set.pair_count},
                {"query_ids", artifact.set.source_queries},
                {"heads", heads}};
}

inline ShiftArtifact shifts_from_json(const json& doc, const std::string& origin) {
    check_header(doc, "CAST-SHIFTS", origin);
    ShiftArtifact artifact;
    artifact.spec_digest = doc.at("spec_digest").get<std::string>();
    artifact.set.pair_count = doc.at("pair_count").get<int>();
    artifact.set.source_queries = doc.at("query_ids").get<std::vector<std::string>>();
    for (const json& jh : doc.at("heads")) {
        HeadId id{jh.at("layer").get<int>(), jh.at("head").get<int>()};
        artifact.set.vectors[id] = jh.at("s").get<RealVector>();
    }
    return artifact;
}

// --- plan --------------------------------------------------------------------

inline json plan_to_json(const SteeringPlan& plan) {
    json heads = json::array();
    for (const HeadId& id : plan.heads) {
        heads.push_back(json{{"layer", id.layer},
                             {"head", id.head},
                             {"s", plan.shifts.at(id)}});
    }
    return json{{"format", "CAST-PLAN"},
                {"version", kArtifactVersion},
                {"alpha", plan.alpha},
                {"k", plan.heads.size()},
                {"heads", heads},
                {"probe_digest", plan.probe_digest},
                {"shift_digest", plan.shift_digest}};
}

inline SteeringPlan plan_from_json(const json& doc, const std::string& origin) {
    check_header(doc, "CAST-PLAN", origin);
    SteeringPlan plan;
    plan.alpha = doc.at("alpha").get<double>();
    plan.probe_digest = doc.at("probe_digest").get<std::string>();
    plan.shift_digest = doc.at("shift_digest").get<std::string>();
    for (const json& jh : doc.at("heads")) {
        HeadId id{jh.at("layer").get<int>(), jh.at("head").get<int>()};
        plan.heads.push_back(id);
        plan.shifts[id] = jh.at("s").get<RealVector>();
    }
    std::sort(plan.heads.begin(), plan.heads.end());
    if (doc.at("k").get<std::size_t>() != plan.heads.size()) {
        throw ValidationError(origin + ": K does not match the stored head list");
    }
    return plan;
}

// --- pool ---------------------------------------------------------------------

inline json pool_to_json(const CaptionQueryPool& pool) {
    json queries = json::array();
    for (const CaptionQuery& q : pool.queries) {
        queries.push_back(json{{"id", q.id}, {"tokens", q.tokens}});
    }
    return json{{"format", "CAST-POOL"}, {"version", kArtifactVersion},
                {"queries", queries}};
}

inline CaptionQueryPool pool_from_json(const json& doc, const std::string& origin) {
    check_header(doc, "CAST-POOL", origin);
    CaptionQueryPool pool;
    for (const json& jq : doc.at("queries")) {
        pool.queries.push_back(
            CaptionQuery{jq.at("id").get<std::string>(), jq.at("tokens").get<std::vector<int>>()});
    }
    pool.validate();
    return pool;
}

// --- reports --------------------------------------------------------------------

inline json report_envelope(const std::string& kind, json payload,
                            const std::string& config_digest,
                            std::uint64_t seed) {
    return json{{"format", "CAST-REPORT"},
                {"version", kArtifactVersion},
                {"kind", kind},
                {"config_digest", config_digest},
                {"seed", seed},
                {"payload", std::move(payload)}};
}

// --- filesystem entry points -----------------------------------------------------

inline std::string dump_artifact(const json& doc) { return doc.dump(2) + "\n"; }

inline void save_json(const std::string& path, const json& doc) {
    write_file(path, dump_artifact(doc));
}

inline json load_json(const std::string& path) {
    return parse_document(read_file(path), path);
}

inline void save_model(const std::string& path, const ModelParams& params) {
    save_json(path, model_to_json(params));
}

inline ModelParams load_model(const std::string& path) {
    return model_from_json(load_json(path), path);
}

inline void save_probes(const std::string& path, const ProbeArtifact& artifact) {
    save_json(path, probes_to_json(artifact));
}

inline ProbeArtifact load_probes(const std::string& path) {
    return probes_from_json(load_json(path), path);
}

inline void save_shifts(const std::string& path, const ShiftArtifact& artifact) {
    save_json(path, shifts_to_json(artifact));
}

inline ShiftArtifact load_shifts(const std::string& path) {
    return shifts_from_json(load_json(path), path);
}

inline void save_plan(const std::string& path, const SteeringPlan& plan) {
    save_json(path, plan_to_json(plan));
}

inline SteeringPlan load_plan(const std::string& path) {
    return plan_from_json(load_json(path), path);
}

inline void save_pool(const std::string& path, const CaptionQueryPool& pool) {
    save_json(path, pool_to_json(pool));
}

inline CaptionQueryPool load_pool(const std::string& path) {
    return pool_from_json(load_json(path), path);
}

// Digest of the exact bytes save_json would write for this document.
inline std::string document_digest(const json& doc) {
    return digest_hex(dump_artifact(doc));
}

inline std::string file_digest(const std::string& path) {
    return digest_hex(read_file(path));
}

} // namespace cast::io

#endif
