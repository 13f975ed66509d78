#ifndef CAST_MODEL_HPP
#define CAST_MODEL_HPP

#include <atomic>
#include <cmath>
#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "cast/numerics.hpp"
#include "cast/plan.hpp"

namespace cast {

struct ModelSpec {
    int layers = 1;        // L
    int heads = 1;         // H
    int model_dim = 1;     // D = heads * head_dim
    int head_dim = 1;      // d
    int vocab_visual = 1;
    int vocab_text = 1;
    int mlp_hidden = 1;
    int max_seq = 16;

    void validate() const {
        if (layers < 1 || heads < 1 || model_dim < 1 || head_dim < 1) {
            throw ArgumentError("ModelSpec: all dimensions must be >= 1");
        }
        if (model_dim != heads * head_dim) {
            throw ArgumentError("ModelSpec: model_dim must equal heads * head_dim");
        }
        if (vocab_visual < 1 || vocab_text < 1 || mlp_hidden < 1 || max_seq < 1) {
            throw ArgumentError("ModelSpec: vocab/mlp/max_seq must be >= 1");
        }
    }

    int head_count() const { return layers * heads; }
};

struct HeadParams {
    RealMatrix w_q; // D x d
    RealMatrix w_k; // D x d
    RealMatrix w_v; // D x d
};

struct LayerParams {
    std::vector<HeadParams> heads;
    RealMatrix w_o;     // (H*d) x D, treated as H stacked d x D slices
    RealMatrix mlp_w1;  // D x mlp_hidden
    RealVector mlp_b1;  // mlp_hidden
    RealMatrix mlp_w2;  // mlp_hidden x D
    RealVector mlp_b2;  // D
};

struct ModelParams {
    ModelSpec spec;
    RealMatrix visual_embed; // vocab_visual x D
    RealMatrix text_embed;   // vocab_text x D
    RealMatrix pos_embed;    // max_seq x D
    std::vector<LayerParams> layers;
    RealMatrix unembed;      // D x vocab_text

    void validate() const;
};

// Zero-initialized parameter set with all shapes derived from the spec.
inline ModelParams zero_params(const ModelSpec& spec) {
    spec.validate();
    const auto D = static_cast<std::size_t>(spec.model_dim);
    const auto d = static_cast<std::size_t>(spec.head_dim);
    ModelParams p;
    p.spec = spec;
    p.visual_embed = RealMatrix(static_cast<std::size_t>(spec.vocab_visual), D);
    p.text_embed = RealMatrix(static_cast<std::size_t>(spec.vocab_text), D);
    p.pos_embed = RealMatrix(static_cast<std::size_t>(spec.max_seq), D);
    p.layers.resize(static_cast<std::size_t>(spec.layers));
    for (auto& layer : p.layers) {
        layer.heads.resize(static_cast<std::size_t>(spec.heads));
        for (auto& h : layer.heads) {
            h.w_q = RealMatrix(D, d);
            h.w_k = RealMatrix(D, d);
            h.w_v = RealMatrix(D, d);
        }
        layer.w_o = RealMatrix(static_cast<std::size_t>(spec.heads) * d, D);
        layer.mlp_w1 = RealMatrix(D, static_cast<std::size_t>(spec.mlp_hidden));
        layer.mlp_b1 = RealVector(static_cast<std::size_t>(spec.mlp_hidden), 0.0);
        layer.mlp_w2 = RealMatrix(static_cast<std::size_t>(spec.mlp_hidden), D);
        layer.mlp_b2 = RealVector(D, 0.0);
    }
    p.unembed = RealMatrix(D, static_cast<std::size_t>(spec.vocab_text));
    return p;
}

inline void ModelParams::validate() const {
    spec.validate();
    const auto D = static_cast<std::size_t>(spec.model_dim);
    const auto d = static_cast<std::size_t>(spec.head_dim);
    auto check = [](bool ok, const char* what) {
        if (!ok) {
            throw ShapeError(std::string("ModelParams: ") + what);
        }
    };
    check(visual_embed.rows == static_cast<std::size_t>(spec.vocab_visual) &&
              visual_embed.cols == D,
          "visual embedding shape mismatch");
    check(text_embed.rows == static_cast<std::size_t>(spec.vocab_text) &&
              text_embed.cols == D,
          "text embedding shape mismatch");
    check(pos_embed.rows == static_cast<std::size_t>(spec.max_seq) &&
              pos_embed.cols == D,
          "position embedding shape mismatch");
    check(layers.size() == static_cast<std::size_t>(spec.layers), "layer count mismatch");
    for (const auto& layer : layers) {
        check(layer.heads.size() == static_cast<std::size_t>(spec.heads),
              "head count mismatch");
        for (const auto& h : layer.heads) {
            check(h.w_q.rows == D && h.w_q.cols == d, "w_q shape mismatch");
            check(h.w_k.rows == D && h.w_k.cols == d, "w_k shape mismatch");
            check(h.w_v.rows == D && h.w_v.cols == d, "w_v shape mismatch");
        }
        check(layer.w_o.rows == static_cast<std::size_t>(spec.heads) * d &&
                  layer.w_o.cols == D,
              "w_o shape mismatch");
        check(layer.mlp_w1.rows == D &&
                  layer.mlp_w1.cols == static_cast<std::size_t>(spec.mlp_hidden),
              "mlp_w1 shape mismatch");
        check(layer.mlp_b1.size() == static_cast<std::size_t>(spec.mlp_hidden),
              "mlp_b1 length mismatch");
        check(layer.mlp_w2.rows == static_cast<std::size_t>(spec.mlp_hidden) &&
                  layer.mlp_w2.cols == D,
              "mlp_w2 shape mismatch");
        check(layer.mlp_b2.size() == D, "mlp_b2 length mismatch");
    }
    check(unembed.rows == D && unembed.cols == static_cast<std::size_t>(spec.vocab_text),
          "unembedding shape mismatch");
    ensure_finite(visual_embed, "visual_embed");
    ensure_finite(text_embed, "text_embed");
    ensure_finite(pos_embed, "pos_embed");
    ensure_finite(unembed, "unembed");
    for (const auto& layer : layers) {
        ensure_finite(layer.w_o, "w_o");
        ensure_finite(layer.mlp_w1, "mlp_w1");
        ensure_finite(layer.mlp_b1, "mlp_b1");
        ensure_finite(layer.mlp_w2, "mlp_w2");
        ensure_finite(layer.mlp_b2, "mlp_b2");
        for (const auto& h : layer.heads) {
            ensure_finite(h.w_q, "w_q");
            ensure_finite(h.w_k, "w_k");
            ensure_finite(h.w_v, "w_v");
        }
    }
}

// Visual tokens first, text tokens after; the model never reorders them.
struct SequenceInput {
    std::vector<int> visual;
    std::vector<int> text;

    std::size_t length() const { return visual.size() + text.size(); }
};

enum class MaskKind {
    Causal,
    // Causal, plus the last row places zero weight on every text position.
    CausalTextExcluded,
};

struct CaptureOptions {
    bool attention = false;        // last-row attention weights per head
    bool outputs = false;          // last-token original attention output O
    bool masked_outputs = false;   // last-token text-masked output
    bool final_hidden = false;
};

struct HeadTrace {
    RealVector attn_last_row;
    RealVector output_last;
    RealVector masked_output_last;
};

struct ForwardTrace {
    int m = 0;
    int n = 0;
    std::vector<HeadTrace> heads; // index = layer * H + head
    RealMatrix final_hidden;
    RealVector logits;

    const HeadTrace& head(const HeadId& id, int heads_per_layer) const {
        return heads[static_cast<std::size_t>(id.layer * heads_per_layer + id.head)];
    }
};

// Counts every full forward pass; used to verify the pass budget of the
// on-the-fly steering mode.
inline std::atomic<std::uint64_t>& forward_pass_counter() {
    static std::atomic<std::uint64_t> counter{0};
    return counter;
}

namespace detail {

inline void validate_input(const ModelParams& params, const SequenceInput& input) {
    const ModelSpec& spec = params.spec;
    if (input.visual.empty()) {
        throw ArgumentError("SequenceInput: at least one visual token required");
    }
    if (input.length() > static_cast<std::size_t>(spec.max_seq)) {
        throw ArgumentError("SequenceInput: length " + std::to_string(input.length()) +
                            " exceeds configured max " + std::to_string(spec.max_seq));
    }
    for (int t : input.visual) {
        if (t < 0 || t >= spec.vocab_visual) {
            throw ArgumentError("SequenceInput: visual token out of range");
        }
    }
    for (int t : input.text) {
        if (t < 0 || t >= spec.vocab_text) {
            throw ArgumentError("SequenceInput: text token out of range");
        }
    }
}

inline void validate_plan_against_spec(const SteeringPlan& plan, const ModelSpec& spec) {
    if (!std::isfinite(plan.alpha)) {
        throw ValidationError("SteeringPlan: alpha is not finite");
    }
    for (const HeadId& id : plan.heads) {
        if (id.layer < 0 || id.layer >= spec.layers || id.head < 0 ||
            id.head >= spec.heads) {
            throw ValidationError("SteeringPlan: head " + to_string(id) +
                                  " outside model grid");
        }
        auto it = plan.shifts.find(id);
        if (it == plan.shifts.end()) {
            throw ValidationError("SteeringPlan: head " + to_string(id) +
                                  " has no bound shift vector");
        }
        if (it->second.size() != static_cast<std::size_t>(spec.head_dim)) {
            throw ValidationError("SteeringPlan: shift length mismatch at head " +
                                  to_string(id));
        }
    }
}

} // namespace detail

// Single-head attention: causal scores scaled by 1/sqrt(d), row softmax,
// outputs = A * V. Under CausalTextExcluded the last row additionally masks
// every position beyond the visual prefix.
inline std::pair<RealVector, RealMatrix> head_attention(const RealMatrix& layer_input,
                                                        const HeadParams& head,
                                                        MaskKind mask,
                                                        std::size_t visual_len) {
    const std::size_t T = layer_input.rows;
    const std::size_t D = layer_input.cols;
    if (T == 0) {
        throw ShapeError("head_attention: empty input");
    }
    if (head.w_q.rows != D || head.w_k.rows != D || head.w_v.rows != D) {
        throw ShapeError("head_attention: projection rows do not match input width");
    }
    const std::size_t d = head.w_q.cols;
    if (head.w_k.cols != d || head.w_v.cols != d) {
        throw ShapeError("head_attention: projection widths differ");
    }
    if (visual_len > T) {
        throw ShapeError("head_attention: visual length exceeds sequence length");
    }

    RealMatrix q = matmul(layer_input, head.w_q);
    RealMatrix k = matmul(layer_input, head.w_k);
    RealMatrix v = matmul(layer_input, head.w_v);

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    RealMatrix outputs(T, d);
    RealVector last_row;

    for (std::size_t i = 0; i < T; ++i) {
        RealVector scores(T, kNegInf);
        for (std::size_t j = 0; j <= i; ++j) {
            scores[j] = dot(q.row(i), k.row(j), d) * scale;
        }
        if (mask == MaskKind::CausalTextExcluded && i == T - 1) {
            for (std::size_t j = visual_len; j < T; ++j) {
                scores[j] = kNegInf;
            }
        }
        RealVector weights = softmax_row(scores);
        for (std::size_t c = 0; c < d; ++c) {
            double s = 0.0;
            for (std::size_t j = 0; j <= i; ++j) {
                s += weights[j] * v.at(j, c);
            }
            outputs.at(i, c) = s;
        }
        if (i == T - 1) {
            last_row = std::move(weights);
        }
    }
    return {std::move(last_row), std::move(outputs)};
}

// Full forward pass over the residual stream. Steering (when a plan is
// given) adds alpha * S to every position's output of each selected head;
// captured O is always the pre-steering attention output. The text-masked
// output is computed for the last row as a side channel and never feeds the
// main pass.
inline ForwardTrace forward(const ModelParams& params, const SequenceInput& input,
                            const SteeringPlan* plan = nullptr,
                            const CaptureOptions& capture = {}) {
    detail::validate_input(params, input);
    if (plan != nullptr) {
        detail::validate_plan_against_spec(*plan, params.spec);
    }
    forward_pass_counter().fetch_add(1, std::memory_order_relaxed);

    const ModelSpec& spec = params.spec;
    const std::size_t T = input.length();
    const std::size_t D = static_cast<std::size_t>(spec.model_dim);
    const std::size_t d = static_cast<std::size_t>(spec.head_dim);
    const std::size_t H = static_cast<std::size_t>(spec.heads);
    const std::size_t m = input.visual.size();

    ForwardTrace trace;
    trace.m = static_cast<int>(m);
    trace.n = static_cast<int>(input.text.size());
    const bool need_heads = capture.attention || capture.outputs || capture.masked_outputs;
    if (need_heads) {
        trace.heads.resize(static_cast<std::size_t>(spec.layers) * H);
    }

    RealMatrix hidden(T, D);
    for (std::size_t i = 0; i < T; ++i) {
        const double* tok = i < m
            ? params.visual_embed.row(static_cast<std::size_t>(input.visual[i]))
            : params.text_embed.row(static_cast<std::size_t>(input.text[i - m]));
        const double* pos = params.pos_embed.row(i);
        double* out = hidden.row(i);
        for (std::size_t c = 0; c < D; ++c) {
            out[c] = tok[c] + pos[c];
        }
    }

    const double scale = 1.0 / std::sqrt(static_cast<double>(d));
    RealMatrix concat(T, H * d);

    for (int l = 0; l < spec.layers; ++l) {
        const LayerParams& layer = params.layers[static_cast<std::size_t>(l)];
        for (int h = 0; h < spec.heads; ++h) {
            const HeadParams& hp = layer.heads[static_cast<std::size_t>(h)];
            RealMatrix q = matmul(hidden, hp.w_q);
            RealMatrix k = matmul(hidden, hp.w_k);
            RealMatrix v = matmul(hidden, hp.w_v);

            RealMatrix outputs(T, d);
            RealVector last_weights;
            for (std::size_t i = 0; i < T; ++i) {
                RealVector scores(i + 1);
                for (std::size_t j = 0; j <= i; ++j) {
                    scores[j] = dot(q.row(i), k.row(j), d) * scale;
                }
                RealVector weights = softmax_row(scores);
                for (std::size_t c = 0; c < d; ++c) {
                    double s = 0.0;
                    for (std::size_t j = 0; j <= i; ++j) {
                        s += weights[j] * v.at(j, c);
                    }
                    outputs.at(i, c) = s;
                }
                if (i == T - 1 && need_heads) {
                    weights.resize(T, 0.0);
                    last_weights = std::move(weights);
                }
            }

            const HeadId id{l, h};
            if (need_heads) {
                HeadTrace& ht = trace.heads[static_cast<std::size_t>(l) * H +
                                            static_cast<std::size_t>(h)];
                if (capture.attention) {
                    ht.attn_last_row = last_weights;
                }
                if (capture.outputs) {
                    ht.output_last.assign(outputs.row(T - 1), outputs.row(T - 1) + d);
                }
                if (capture.masked_outputs) {
                    // text-excluded variant: last row only, text keys
                    // masked, renormalized over the visual prefix
                    RealVector masked_scores(m, kNegInf);
                    for (std::size_t j = 0; j < m; ++j) {
                        masked_scores[j] = dot(q.row(T - 1), k.row(j), d) * scale;
                    }
                    RealVector mw = softmax_row(masked_scores);
                    ht.masked_output_last.assign(d, 0.0);
                    for (std::size_t j = 0; j < m; ++j) {
                        for (std::size_t c = 0; c < d; ++c) {
                            ht.masked_output_last[c] += mw[j] * v.at(j, c);
                        }
                    }
                }
            }

            if (plan != nullptr && plan->alpha != 0.0 && plan->contains(id)) {
                outputs = apply_head_steering(outputs, *plan, id);
            }
            for (std::size_t i = 0; i < T; ++i) {
                double* dst = concat.row(i) + static_cast<std::size_t>(h) * d;
                const double* src = outputs.row(i);
                for (std::size_t c = 0; c < d; ++c) {
                    dst[c] = src[c];
                }
            }
        }

        // residual add of the multi-head output
        RealMatrix attn_out = matmul(concat, layer.w_o);
        for (std::size_t i = 0; i < T * D; ++i) {
            hidden.data[i] += attn_out.data[i];
        }

        // ReLU MLP with residual add
        for (std::size_t i = 0; i < T; ++i) {
            RealVector inner(static_cast<std::size_t>(spec.mlp_hidden));
            accumulate_row_times_matrix(hidden.row(i), layer.mlp_w1, inner.data());
            for (std::size_t c = 0; c < inner.size(); ++c) {
                inner[c] = std::max(0.0, inner[c] + layer.mlp_b1[c]);
            }
            RealVector delta(D);
            accumulate_row_times_matrix(inner.data(), layer.mlp_w2, delta.data());
            double* row = hidden.row(i);
            for (std::size_t c = 0; c < D; ++c) {
                row[c] += delta[c] + layer.mlp_b2[c];
            }
        }
    }

    trace.logits.assign(static_cast<std::size_t>(spec.vocab_text), 0.0);
    accumulate_row_times_matrix(hidden.row(T - 1), params.unembed, trace.logits.data());
    if (capture.final_hidden) {
        trace.final_hidden = std::move(hidden);
    }
    return trace;
}

inline int argmax_lowest(const RealVector& v) {
    std::size_t best = 0;
    for (std::size_t i = 1; i < v.size(); ++i) {
        if (v[i] > v[best]) {
            best = i;
        }
    }
    return static_cast<int>(best);
}

// Greedy decoding; the steering plan applies to every position of every
// forward pass, prefill and generated alike. Ties resolve to the lowest
// token id. Stops after max_new_tokens or upon emitting stop_token.
inline std::vector<int> greedy_decode(const ModelParams& params, const SequenceInput& input,
                                      const SteeringPlan* plan, int max_new_tokens,
                                      std::optional<int> stop_token = std::nullopt) {
    if (max_new_tokens < 1) {
        throw ArgumentError("greedy_decode: max_new_tokens must be >= 1");
    }
    SequenceInput current = input;
    std::vector<int> generated;
    for (int step = 0; step < max_new_tokens; ++step) {
        ForwardTrace t = forward(params, current, plan);
        int tok = argmax_lowest(t.logits);
        generated.push_back(tok);
        if (stop_token.has_value() && tok == *stop_token) {
            break;
        }
        if (current.length() >= static_cast<std::size_t>(params.spec.max_seq)) {
            break;
        }
        current.text.push_back(tok);
    }
    return generated;
}

// Runs the caption-query and non-caption-query passes over the same visual
// tokens, capturing original and text-masked last-token outputs for probing
// and shift estimation.
inline std::pair<ForwardTrace, ForwardTrace> capture_paired_outputs(
    const ModelParams& params, const std::vector<int>& visual,
    const std::vector<int>& caption_query, const std::vector<int>& noncaption_query) {
    CaptureOptions capture;
    capture.attention = true;
    capture.outputs = true;
    capture.masked_outputs = true;
    ForwardTrace cap = forward(params, SequenceInput{visual, caption_query}, nullptr, capture);
    ForwardTrace non = forward(params, SequenceInput{visual, noncaption_query}, nullptr, capture);
    return {std::move(cap), std::move(non)};
}

} // namespace cast

#endif
