#ifndef CAST_PIPELINE_HPP
#define CAST_PIPELINE_HPP

#include <filesystem>
#include <string>
#include <vector>

#include "cast/harness.hpp"
#include "cast/io.hpp"

namespace cast {

// End-to-end run configuration: one synthetic world plus the knobs of every
// pipeline stage. Everything is explicit; environment variables are never
// consulted.
struct RunConfig {
    SyntheticWorldSpec world;
    std::string model_path;   // when set, load this model instead of building
    int pairs = 32;           // probe/shift estimation pairs (B)
    double alpha = 1.5;
    int k = 6;
    int folds = 5;
    ClassifierKind classifier = ClassifierKind::MaxMargin;
    std::uint64_t seed = 1;
    int eval_size = 200;
    int caption_size = 20;
    int max_new = 8;
    std::vector<double> alpha_grid; // both grids nonempty -> grid-search stage
    std::vector<int> k_grid;
    std::string out_dir = "cast-out";
};

namespace io {

inline json world_to_json(const SyntheticWorldSpec& w) {
    return json{{"layers", w.layers},
                {"heads", w.heads},
                {"head_dim", w.head_dim},
                {"mlp_hidden", w.mlp_hidden},
                {"object_alphabet", w.object_alphabet},
                {"objects_per_image", w.objects_per_image},
                {"m_min", w.m_min},
                {"m_max", w.m_max},
                {"n_min", w.n_min},
                {"n_max", w.n_max},
                {"planted_count", w.planted_count},
                {"band_lo", w.band_lo},
                {"band_hi", w.band_hi},
                {"noise_level", w.noise_level},
                {"text_bias", w.text_bias},
                {"seed", w.seed},
                {"decode_margin", w.decode_margin}};
}

inline SyntheticWorldSpec world_from_json(const json& j) {
    SyntheticWorldSpec w;
    w.layers = j.at("layers").get<int>();
    w.heads = j.at("heads").get<int>();
    w.head_dim = j.at("head_dim").get<int>();
    w.mlp_hidden = j.at("mlp_hidden").get<int>();
    w.object_alphabet = j.at("object_alphabet").get<int>();
    w.objects_per_image = j.at("objects_per_image").get<int>();
    w.m_min = j.at("m_min").get<int>();
    w.m_max = j.at("m_max").get<int>();
    w.n_min = j.at("n_min").get<int>();
    w.n_max = j.at("n_max").get<int>();
    w.planted_count = j.at("planted_count").get<int>();
    w.band_lo = j.at("band_lo").get<int>();
    w.band_hi = j.at("band_hi").get<int>();
    w.noise_level = j.at("noise_level").get<double>();
    w.text_bias = j.at("text_bias").get<double>();
    w.seed = j.at("seed").get<std::uint64_t>();
    w.decode_margin = j.at("decode_margin").get<int>();
    w.validate();
    return w;
}

inline json config_to_json(const RunConfig& c) {
    return json{{"world", world_to_json(c.world)},
                {"model_path", c.model_path},
                {"pairs", c.pairs},
                {"alpha", c.alpha},
                {"k", c.k},
                {"folds", c.folds},
                {"classifier",
                 c.classifier == ClassifierKind::MaxMargin ? "maxmargin" : "logistic"},
                {"seed", c.seed},
                {"eval_size", c.eval_size},
                {"caption_size", c.caption_size},
                {"max_new", c.max_new},
                {"alpha_grid", c.alpha_grid},
                {"k_grid", c.k_grid},
                {"out_dir", c.out_dir}};
}

inline RunConfig config_from_json(const json& j) {
    RunConfig c;
    c.world = world_from_json(j.at("world"));
    c.model_path = j.at("model_path").get<std::string>();
    c.pairs = j.at("pairs").get<int>();
    c.alpha = j.at("alpha").get<double>();
    c.k = j.at("k").get<int>();
    c.folds = j.at("folds").get<int>();
    const std::string kind = j.at("classifier").get<std::string>();
    if (kind == "maxmargin") {
        c.classifier = ClassifierKind::MaxMargin;
    } else if (kind == "logistic") {
        c.classifier = ClassifierKind::Logistic;
    } else {
        throw ValidationError("config: unknown classifier '" + kind + "'");
    }
    c.seed = j.at("seed").get<std::uint64_t>();
    c.eval_size = j.at("eval_size").get<int>();
    c.caption_size = j.at("caption_size").get<int>();
    c.max_new = j.at("max_new").get<int>();
    c.alpha_grid = j.at("alpha_grid").get<std::vector<double>>();
    c.k_grid = j.at("k_grid").get<std::vector<int>>();
    c.out_dir = j.at("out_dir").get<std::string>();
    return c;
}

inline std::string config_digest(const RunConfig& c) {
    return digest_hex(config_to_json(c).dump());
}

} // namespace io

inline io::json eval_report_to_json(const EvalReport& r) {
    return io::json{{"accuracy", r.accuracy},   {"precision", r.precision},
                    {"recall", r.recall},       {"f1", r.f1},
                    {"yes_rate", r.yes_rate},   {"true_yes", r.true_yes},
                    {"false_yes", r.false_yes}, {"false_no", r.false_no},
                    {"true_no", r.true_no},     {"abstentions", r.abstentions},
                    {"total", r.total}};
}

inline io::json chair_report_to_json(const ChairReport& r) {
    return io::json{{"c_s", r.c_s},
                    {"c_i", r.c_i},
                    {"recall", r.recall},
                    {"mean_length", r.mean_length},
                    {"responses", r.responses}};
}

// Trains probes for every head, scoring each with stratified CV accuracy.
inline io::ProbeArtifact train_all_probes(const ModelParams& params,
                                          const std::map<HeadId, HeadDataset>& datasets,
                                          ClassifierKind kind, int folds,
                                          std::uint64_t seed) {
    io::ProbeArtifact artifact;
    artifact.spec_digest = io::spec_digest(params.spec);
    for (const auto& [id, dataset] : datasets) {
        const std::uint64_t head_seed =
            detail::mix_seed(seed, static_cast<std::uint64_t>(
                                       id.layer * params.spec.heads + id.head));
        HeadProbe probe = train_probe(dataset, kind, head_seed);
        probe.cv_accuracy = cv_accuracy(dataset, kind, folds, head_seed);
        artifact.probes[id] = std::move(probe);
    }
    return artifact;
}

struct PipelineResult {
    std::string config_digest;
    EvalReport baseline;
    EvalReport steered;
    ChairReport chair_baseline;
    ChairReport chair_steered;
    double recovery = 0.0;
    double va_baseline = 0.0;
    double va_caption = 0.0;
};

// Runs the full probe -> shift -> plan -> steer -> analyze staging, writing
// every intermediate artifact into config.out_dir. Re-running an identical
// config reproduces every output byte for byte.
inline PipelineResult run_pipeline(const RunConfig& config) {
    namespace fs = std::filesystem;
    const std::string cfg_digest = io::config_digest(config);
    std::string stage = "setup";
    try {
        fs::create_directories(config.out_dir);
        auto out = [&config](const std::string& name) {
            return (fs::path(config.out_dir) / name).string();
        };
        io::save_json(out("config.json"), io::config_to_json(config));

        stage = "model";
        PlantedModel model = build_planted_model(config.world);
        if (!config.model_path.empty()) {
            ModelParams loaded = io::load_model(config.model_path);
            if (io::spec_digest(loaded.spec) != io::spec_digest(model.params.spec)) {
                throw ValidationError("model " + config.model_path +
                                      " does not match the configured world");
            }
            model.params = std::move(loaded);
        }
        io::save_model(out("model.json"), model.params);

        stage = "probe";
        std::vector<PairSample> pairs =
            gen_probe_pairs(config.world, config.pairs, config.seed);
        std::map<HeadId, HeadDataset> datasets =
            collect_probe_dataset(model.params, pairs);
        io::ProbeArtifact probes = train_all_probes(model.params, datasets,
                                                    config.classifier, config.folds,
                                                    config.seed);
        io::save_probes(out("probes.json"), probes);
        HeadRanking ranking = rank_heads(probes.accuracy_grid(model.params.spec), config.k);

        stage = "shift";
        io::ShiftArtifact shifts;
        shifts.spec_digest = io::spec_digest(model.params.spec);
        shifts.set = estimate_shifts(model.params, pairs);
        io::save_shifts(out("shifts.json"), shifts);

        stage = "plan";
        SteeringPlan plan =
            build_plan(ranking, shifts.set, config.alpha, config.k,
                       io::file_digest(out("probes.json")),
                       io::file_digest(out("shifts.json")));
        io::save_plan(out("plan.json"), plan);

        stage = "eval";
        std::vector<DiscSample> dataset = gen_discriminative_dataset(
            config.world, config.eval_size, DiscSplit::BalancedRandom, config.seed);
        PipelineResult result;
        result.config_digest = cfg_digest;
        result.baseline = eval_discriminative(model.params, model.vocab, nullptr, dataset);
        result.steered = eval_discriminative(model.params, model.vocab, &plan, dataset);
        result.recovery = planted_recovery(ranking, model.planted, config.k);
        std::vector<CaptionSample> captions =
            gen_caption_dataset(config.world, config.caption_size, config.seed);
        CaptionQueryPool pool = caption_pool(config.world, 1);
        result.chair_baseline = eval_caption(model.params, model.vocab, nullptr, captions,
                                             pool.queries[0].tokens, config.max_new);
        result.chair_steered = eval_caption(model.params, model.vocab, &plan, captions,
                                            pool.queries[0].tokens, config.max_new);

        stage = "grid";
        if (!config.alpha_grid.empty() && !config.k_grid.empty()) {
            const int max_k =
                *std::max_element(config.k_grid.begin(), config.k_grid.end());
            HeadRanking grid_ranking =
                rank_heads(probes.accuracy_grid(model.params.spec), max_k);
            GridSearchResult grid = grid_search(
                model.params, model.vocab, grid_ranking, shifts.set, dataset,
                config.alpha_grid, config.k_grid, io::file_digest(out("probes.json")),
                io::file_digest(out("shifts.json")));
            io::json grid_payload{{"alphas", grid.alphas},
                                  {"ks", grid.ks},
                                  {"accuracy", grid.accuracy.data},
                                  {"best_alpha", grid.best_alpha},
                                  {"best_k", grid.best_k},
                                  {"best_accuracy", grid.best_accuracy},
                                  {"baseline_accuracy", grid.baseline_accuracy}};
            io::save_json(out("grid.json"),
                          io::report_envelope("grid-search", grid_payload, cfg_digest,
                                              config.seed));
            export_heatmap(grid.accuracy, {}, out("grid.csv"), "grid-accuracy");
        }

        stage = "analyze";
        std::vector<VisualSample> visuals;
        for (const DiscSample& s : dataset) {
            visuals.push_back(VisualSample{s.visual, s.query});
        }
        std::mt19937_64 qrng(detail::mix_seed(config.world.seed, 0xCAFE));
        std::vector<int> caption_query =
            make_caption_query(qrng, config.world, model.vocab);
        result.va_baseline = va_percent(model.params, visuals);
        result.va_caption = va_percent(model.params, visuals, caption_query);
        AttentionMassGrid mass_non = dataset_mass(model.params, visuals);
        AttentionMassGrid mass_cap = dataset_mass(model.params, visuals, caption_query);
        ChangeRateReport rates = change_rates(mass_cap, mass_non);
        export_heatmap(mass_non, out("mass_noncaption.csv"));
        export_heatmap(mass_cap, out("mass_caption.csv"));
        export_heatmap(rates, out("change_rates.csv"));

        stage = "report";
        io::json payload{{"baseline", eval_report_to_json(result.baseline)},
                         {"steered", eval_report_to_json(result.steered)},
                         {"chair_baseline", chair_report_to_json(result.chair_baseline)},
                         {"chair_steered", chair_report_to_json(result.chair_steered)},
                         {"planted_recovery", result.recovery},
                         {"va_baseline", result.va_baseline},
                         {"va_caption", result.va_caption},
                         {"spec_digest", io::spec_digest(model.params.spec)},
                         {"alpha", config.alpha},
                         {"k", config.k}};
        io::save_json(out("summary.json"),
                      io::report_envelope("pipeline-summary", payload, cfg_digest,
                                          config.seed));
        return result;
    } catch (const Error&) {
        throw;
    } catch (const std::exception& e) {
        throw Error("stage " + stage + ": " + e.what());
    }
}

struct VerifyReport {
    bool ok = true;
    std::vector<std::string> problems;
    int checked = 0;
};

// Re-validates a pipeline output bundle: artifact headers parse, the plan's
// provenance digests match the probe and shift files, and probe/shift spec
// digests match the model.
inline VerifyReport verify_bundle(const std::string& dir) {
    namespace fs = std::filesystem;
    VerifyReport report;
    auto complain = [&report](const std::string& msg) {
        report.ok = false;
        report.problems.push_back(msg);
    };
    auto path = [&dir](const std::string& name) {
        return (fs::path(dir) / name).string();
    };
    try {
        ModelParams params = io::load_model(path("model.json"));
        ++report.checked;
        const std::string expected_spec = io::spec_digest(params.spec);
        io::ProbeArtifact probes = io::load_probes(path("probes.json"));
        ++report.checked;
        if (probes.spec_digest != expected_spec) {
            complain("probes.json: spec digest mismatch");
        }
        io::ShiftArtifact shifts = io::load_shifts(path("shifts.json"));
        ++report.checked;
        if (shifts.spec_digest != expected_spec) {
            complain("shifts.json: spec digest mismatch");
        }
        SteeringPlan plan = io::load_plan(path("plan.json"));
        ++report.checked;
        if (plan.probe_digest != io::file_digest(path("probes.json"))) {
            complain("plan.json: probe provenance digest mismatch");
        }
        if (plan.shift_digest != io::file_digest(path("shifts.json"))) {
            complain("plan.json: shift provenance digest mismatch");
        }
        PlanValidation validation = validate_plan(plan, params.spec);
        for (const std::string& v : validation.violations) {
            complain("plan.json: " + v);
        }
        io::json summary = io::load_json(path("summary.json"));
        io::check_header(summary, "CAST-REPORT", path("summary.json"));
        ++report.checked;
        // the config digest is computed over the canonical single-line dump
        io::json config = io::load_json(path("config.json"));
        if (summary.at("config_digest").get<std::string>() !=
            cast::digest_hex(config.dump())) {
            complain("summary.json: config digest mismatch");
        }
        ++report.checked;
    } catch (const Error& e) {
        complain(e.what());
    }
    return report;
}

} // namespace cast

#endif
