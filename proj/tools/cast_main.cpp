// Command-line surface for the caption-guided attention steering pipeline:
// probe -> shift -> plan -> steer -> analyze -> search, plus artifact
// persistence and bundle verification.

#include <cstdio>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "cast/cast.hpp"

namespace {

using cast::io::json;

struct WorldOptions {
    cast::SyntheticWorldSpec world;
    std::string world_file;

    void add_flags(CLI::App* cmd) {
        cmd->add_option("--world", world_file, "world spec JSON file (overrides flags)");
        cmd->add_option("--layers", world.layers, "decoder layers");
        cmd->add_option("--heads", world.heads, "heads per layer");
        cmd->add_option("--head-dim", world.head_dim, "head width");
        cmd->add_option("--mlp-hidden", world.mlp_hidden, "MLP inner width");
        cmd->add_option("--objects", world.object_alphabet, "object alphabet size");
        cmd->add_option("--per-image", world.objects_per_image, "objects per image");
        cmd->add_option("--m-min", world.m_min, "min visual tokens");
        cmd->add_option("--m-max", world.m_max, "max visual tokens");
        cmd->add_option("--n-min", world.n_min, "min query tokens");
        cmd->add_option("--n-max", world.n_max, "max query tokens");
        cmd->add_option("--planted", world.planted_count, "planted head count");
        cmd->add_option("--band-lo", world.band_lo, "planted band start layer");
        cmd->add_option("--band-hi", world.band_hi, "planted band end layer (exclusive)");
        cmd->add_option("--noise", world.noise_level, "random-head weight scale");
        cmd->add_option("--text-bias", world.text_bias, "language-prior distractor strength");
        cmd->add_option("--world-seed", world.seed, "world construction seed");
    }

    cast::SyntheticWorldSpec resolve() const {
        if (!world_file.empty()) {
            return cast::io::world_from_json(cast::io::load_json(world_file));
        }
        cast::SyntheticWorldSpec w = world;
        w.validate();
        return w;
    }
};

cast::PlantedModel model_for(const WorldOptions& opts, const std::string& model_file) {
    cast::SyntheticWorldSpec world = opts.resolve();
    cast::PlantedModel model = cast::build_planted_model(world);
    if (!model_file.empty()) {
        cast::ModelParams loaded = cast::io::load_model(model_file);
        if (cast::io::spec_digest(loaded.spec) != cast::io::spec_digest(model.params.spec)) {
            throw cast::DataError("model file " + model_file +
                                  " does not match the world flags (spec digest differs)");
        }
        model.params = std::move(loaded);
    }
    return model;
}

cast::ClassifierKind parse_classifier(const std::string& name) {
    if (name == "maxmargin") {
        return cast::ClassifierKind::MaxMargin;
    }
    if (name == "logistic") {
        return cast::ClassifierKind::Logistic;
    }
    throw cast::ArgumentError("unknown classifier '" + name + "'");
}

json dataset_to_json(const std::map<cast::HeadId, cast::HeadDataset>& datasets, int pairs) {
    json heads = json::array();
    for (const auto& [id, ds] : datasets) {
        json samples = json::array();
        for (const cast::ProbeSample& s : ds) {
            samples.push_back(json{{"x", s.x}, {"y", s.label}});
        }
        heads.push_back(json{{"layer", id.layer}, {"head", id.head}, {"samples", samples}});
    }
    return json{{"pairs", pairs}, {"heads", heads}};
}

std::map<cast::HeadId, cast::HeadDataset> dataset_from_json(const json& payload) {
    std::map<cast::HeadId, cast::HeadDataset> datasets;
    for (const json& jh : payload.at("heads")) {
        cast::HeadId id{jh.at("layer").get<int>(), jh.at("head").get<int>()};
        cast::HeadDataset ds;
        for (const json& js : jh.at("samples")) {
            ds.push_back({js.at("x").get<cast::RealVector>(), js.at("y").get<int>()});
        }
        datasets[id] = std::move(ds);
    }
    return datasets;
}

cast::HeadRanking ranking_from_probes(const cast::io::ProbeArtifact& probes,
                                      const cast::ModelSpec& spec, int k) {
    return cast::rank_heads(probes.accuracy_grid(spec), k);
}

std::vector<cast::VisualSample> visuals_of(const std::vector<cast::DiscSample>& ds) {
    std::vector<cast::VisualSample> out;
    out.reserve(ds.size());
    for (const cast::DiscSample& s : ds) {
        out.push_back(cast::VisualSample{s.visual, s.query});
    }
    return out;
}

void print_eval(const char* label, const cast::EvalReport& r) {
    std::printf("%s: accuracy %.4f  f1 %.4f  precision %.4f  recall %.4f  yes-rate %.4f\n",
                label, r.accuracy, r.f1, r.precision, r.recall, r.yes_rate);
    std::printf("%s: confusion [gold-yes: %d yes / %d no] [gold-no: %d yes / %d no]"
                "  abstentions %d\n",
                label, r.true_yes, r.false_no, r.false_yes, r.true_no, r.abstentions);
}

// Digest of the effective command settings, embedded in every report so a
// bundle can be tied back to the invocation that produced it.
std::string settings_digest(const cast::SyntheticWorldSpec& world, json extra) {
    extra["world"] = cast::io::world_to_json(world);
    return cast::digest_hex(extra.dump());
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"caption-guided visual attention steering on a verifiable toy decoder"};
    app.require_subcommand(1);
    app.fallthrough(); // allow --seed/--alpha/--k/... after subcommand names

    std::uint64_t seed = 1;
    double alpha = 1.5;
    int k = 6;
    int folds = 5;
    std::string classifier = "maxmargin";
    app.add_option("--seed", seed, "dataset/training seed")->capture_default_str();
    app.add_option("--alpha", alpha, "steering intensity")->capture_default_str();
    app.add_option("--k", k, "number of steered heads")->capture_default_str();
    app.add_option("--folds", folds, "cross-validation folds")->capture_default_str();
    app.add_option("--classifier", classifier, "probe classifier: maxmargin|logistic")
        ->capture_default_str();

    // --- model ---
    auto* model_cmd = app.add_subcommand("model", "build or inspect models");
    auto* model_build = model_cmd->add_subcommand("build", "construct a planted model");
    WorldOptions mb_world;
    std::string mb_out = "model.json";
    mb_world.add_flags(model_build);
    model_build->add_option("--out", mb_out, "output model file");
    model_build->callback([&] {
        cast::PlantedModel model = cast::build_planted_model(mb_world.resolve());
        cast::io::save_model(mb_out, model.params);
        std::printf("model written to %s (spec digest %s)\n", mb_out.c_str(),
                    cast::io::spec_digest(model.params.spec).c_str());
        std::printf("planted heads:");
        for (const cast::HeadId& id : model.planted) {
            std::printf(" (%d,%d)", id.layer, id.head);
        }
        std::printf("\n");
    });

    auto* model_inspect = model_cmd->add_subcommand("inspect", "describe a model file");
    std::string mi_file;
    model_inspect->add_option("--model", mi_file, "model file")->required();
    model_inspect->callback([&] {
        cast::ModelParams params = cast::io::load_model(mi_file);
        const cast::ModelSpec& s = params.spec;
        std::printf("layers %d  heads %d  model_dim %d  head_dim %d\n", s.layers, s.heads,
                    s.model_dim, s.head_dim);
        std::printf("vocab_visual %d  vocab_text %d  mlp_hidden %d  max_seq %d\n",
                    s.vocab_visual, s.vocab_text, s.mlp_hidden, s.max_seq);
        std::printf("spec digest %s\n", cast::io::spec_digest(s).c_str());
        std::printf("file digest %s\n", cast::io::file_digest(mi_file).c_str());
    });

    // --- probe ---
    auto* probe_cmd = app.add_subcommand("probe", "caption-guided head probing");
    auto* probe_collect =
        probe_cmd->add_subcommand("collect", "collect per-head probe datasets");
    WorldOptions pc_world;
    std::string pc_model;
    std::string pc_out = "probe-dataset.json";
    int pc_pairs = 32;
    pc_world.add_flags(probe_collect);
    probe_collect->add_option("--model", pc_model, "model file (defaults to world build)");
    probe_collect->add_option("--pairs", pc_pairs, "number of caption/non-caption pairs");
    probe_collect->add_option("--out", pc_out, "output dataset file");
    probe_collect->callback([&] {
        cast::PlantedModel model = model_for(pc_world, pc_model);
        auto pairs = cast::gen_probe_pairs(model.world, pc_pairs, seed);
        auto datasets = cast::collect_probe_dataset(model.params, pairs);
        json payload = dataset_to_json(datasets, pc_pairs);
        payload["spec_digest"] = cast::io::spec_digest(model.params.spec);
        const std::string digest = settings_digest(
            model.world, json{{"pairs", pc_pairs}, {"seed", seed}});
        cast::io::save_json(pc_out,
                            cast::io::report_envelope("probe-dataset", payload, digest, seed));
        std::printf("probe dataset written to %s (%d pairs, %zu heads)\n", pc_out.c_str(),
                    pc_pairs, datasets.size());
    });

    auto* probe_train = probe_cmd->add_subcommand("train", "train and score probes");
    std::string pt_model;
    std::string pt_dataset;
    std::string pt_out = "probes.json";
    probe_train->add_option("--model", pt_model, "model file")->required();
    probe_train->add_option("--dataset", pt_dataset, "probe dataset file")->required();
    probe_train->add_option("--out", pt_out, "output probes file");
    probe_train->callback([&] {
        cast::ModelParams params = cast::io::load_model(pt_model);
        json doc = cast::io::load_json(pt_dataset);
        cast::io::check_header(doc, "CAST-REPORT", pt_dataset);
        if (doc.at("kind").get<std::string>() != "probe-dataset") {
            throw cast::ValidationError(pt_dataset + ": not a probe-dataset report");
        }
        const json& payload = doc.at("payload");
        if (payload.at("spec_digest").get<std::string>() !=
            cast::io::spec_digest(params.spec)) {
            throw cast::ValidationError(pt_dataset + ": spec digest mismatch with " +
                                        pt_model);
        }
        auto datasets = dataset_from_json(payload);
        cast::io::ProbeArtifact artifact = cast::train_all_probes(
            params, datasets, parse_classifier(classifier), folds, seed);
        cast::io::save_probes(pt_out, artifact);
        std::printf("probes written to %s (%zu heads)\n", pt_out.c_str(),
                    artifact.probes.size());
    });

    auto* probe_rank = probe_cmd->add_subcommand("rank", "rank heads by probe accuracy");
    std::string pr_probes;
    std::string pr_model;
    std::string pr_out;
    probe_rank->add_option("--probes", pr_probes, "probes file")->required();
    probe_rank->add_option("--model", pr_model, "model file")->required();
    probe_rank->add_option("--out", pr_out, "optional accuracy heatmap CSV");
    probe_rank->callback([&] {
        cast::ModelParams params = cast::io::load_model(pr_model);
        cast::io::ProbeArtifact probes = cast::io::load_probes(pr_probes);
        if (probes.spec_digest != cast::io::spec_digest(params.spec)) {
            throw cast::ValidationError(pr_probes + ": spec digest mismatch");
        }
        cast::HeadRanking ranking = ranking_from_probes(probes, params.spec, k);
        std::printf("top-%d heads:", k);
        for (const cast::HeadId& id : ranking.selected) {
            std::printf(" (%d,%d)", id.layer, id.head);
        }
        std::printf("\n");
        if (!pr_out.empty()) {
            cast::export_heatmap(ranking.accuracy, {}, pr_out, "probe-accuracy");
            std::printf("accuracy grid written to %s\n", pr_out.c_str());
        }
    });

    // --- shift ---
    auto* shift_cmd = app.add_subcommand("shift", "attention-output shift vectors");
    auto* shift_estimate = shift_cmd->add_subcommand("estimate", "estimate shift vectors");
    WorldOptions se_world;
    std::string se_model;
    std::string se_out = "shifts.json";
    int se_pairs = 32;
    se_world.add_flags(shift_estimate);
    shift_estimate->add_option("--model", se_model, "model file (defaults to world build)");
    shift_estimate->add_option("--pairs", se_pairs, "pair count");
    shift_estimate->add_option("--out", se_out, "output shifts file");
    shift_estimate->callback([&] {
        cast::PlantedModel model = model_for(se_world, se_model);
        auto pairs = cast::gen_probe_pairs(model.world, se_pairs, seed);
        cast::io::ShiftArtifact artifact;
        artifact.spec_digest = cast::io::spec_digest(model.params.spec);
        artifact.set = cast::estimate_shifts(model.params, pairs);
        cast::io::save_shifts(se_out, artifact);
        std::printf("shifts written to %s (B=%d)\n", se_out.c_str(), se_pairs);
    });

    auto* shift_ensemble =
        shift_cmd->add_subcommand("ensemble", "average multiple shift files");
    std::vector<std::string> sens_inputs;
    std::string sens_out = "shifts-ensemble.json";
    shift_ensemble->add_option("--inputs", sens_inputs, "input shift files")
        ->required()
        ->expected(-1);
    shift_ensemble->add_option("--out", sens_out, "output shifts file");
    shift_ensemble->callback([&] {
        std::vector<cast::ShiftVectorSet> sets;
        std::string spec_digest;
        for (const std::string& path : sens_inputs) {
            cast::io::ShiftArtifact a = cast::io::load_shifts(path);
            if (spec_digest.empty()) {
                spec_digest = a.spec_digest;
            } else if (spec_digest != a.spec_digest) {
                throw cast::ValidationError("shift ensemble: spec digest mismatch at " +
                                            path);
            }
            sets.push_back(std::move(a.set));
        }
        cast::io::ShiftArtifact out;
        out.spec_digest = spec_digest;
        out.set = cast::ensemble_shifts(sets);
        cast::io::save_shifts(sens_out, out);
        std::printf("ensembled %zu shift sets into %s\n", sets.size(), sens_out.c_str());
    });

    // --- plan ---
    auto* plan_cmd = app.add_subcommand("plan", "steering plans");
    auto* plan_build = plan_cmd->add_subcommand("build", "bind top-K heads to shifts");
    std::string pb_probes;
    std::string pb_shifts;
    std::string pb_model;
    std::string pb_out = "plan.json";
    plan_build->add_option("--probes", pb_probes, "probes file")->required();
    plan_build->add_option("--shifts", pb_shifts, "shifts file")->required();
    plan_build->add_option("--model", pb_model, "model file")->required();
    plan_build->add_option("--out", pb_out, "output plan file");
    plan_build->callback([&] {
        cast::ModelParams params = cast::io::load_model(pb_model);
        cast::io::ProbeArtifact probes = cast::io::load_probes(pb_probes);
        cast::io::ShiftArtifact shifts = cast::io::load_shifts(pb_shifts);
        const std::string expected = cast::io::spec_digest(params.spec);
        if (probes.spec_digest != expected || shifts.spec_digest != expected) {
            throw cast::ValidationError("plan build: probes/shifts do not match the model");
        }
        cast::HeadRanking ranking = ranking_from_probes(probes, params.spec, k);
        cast::SteeringPlan plan =
            cast::build_plan(ranking, shifts.set, alpha, k,
                             cast::io::file_digest(pb_probes),
                             cast::io::file_digest(pb_shifts));
        cast::io::save_plan(pb_out, plan);
        std::printf("plan written to %s (alpha %.3f, K %d)\n", pb_out.c_str(), alpha, k);
    });

    auto* plan_validate =
        plan_cmd->add_subcommand("validate", "check a plan against a model");
    std::string pv_plan;
    std::string pv_model;
    plan_validate->add_option("--plan", pv_plan, "plan file")->required();
    plan_validate->add_option("--model", pv_model, "model file")->required();
    plan_validate->callback([&] {
        cast::SteeringPlan plan = cast::io::load_plan(pv_plan);
        cast::ModelParams params = cast::io::load_model(pv_model);
        cast::PlanValidation report = cast::validate_plan(plan, params.spec);
        if (report.ok) {
            std::printf("plan ok (%zu heads, alpha %.3f)\n", plan.heads.size(), plan.alpha);
        } else {
            for (const std::string& v : report.violations) {
                std::printf("violation: %s\n", v.c_str());
            }
            throw cast::ValidationError("plan validation failed with " +
                                        std::to_string(report.violations.size()) +
                                        " violation(s)");
        }
    });

    // --- eval ---
    auto* eval_cmd = app.add_subcommand("eval", "harness evaluations");
    auto* eval_pope = eval_cmd->add_subcommand("pope", "binary object-presence accuracy");
    WorldOptions ep_world;
    std::string ep_model;
    std::string ep_plan;
    std::string ep_out;
    std::string ep_split = "random";
    int ep_size = 200;
    ep_world.add_flags(eval_pope);
    eval_pope->add_option("--model", ep_model, "model file (defaults to world build)");
    eval_pope->add_option("--plan", ep_plan, "steering plan file (optional)");
    eval_pope->add_option("--size", ep_size, "dataset size");
    eval_pope->add_option("--split", ep_split, "random|cooccurrence");
    eval_pope->add_option("--out", ep_out, "report file (optional)");
    eval_pope->callback([&] {
        cast::PlantedModel model = model_for(ep_world, ep_model);
        const cast::DiscSplit split = ep_split == "cooccurrence"
                                          ? cast::DiscSplit::CooccurrenceBiased
                                          : cast::DiscSplit::BalancedRandom;
        auto ds = cast::gen_discriminative_dataset(model.world, ep_size, split, seed);
        cast::SteeringPlan plan;
        const cast::SteeringPlan* plan_ptr = nullptr;
        if (!ep_plan.empty()) {
            plan = cast::io::load_plan(ep_plan);
            plan_ptr = &plan;
        }
        cast::EvalReport base =
            cast::eval_discriminative(model.params, model.vocab, nullptr, ds);
        print_eval("baseline", base);
        json payload{{"baseline", cast::eval_report_to_json(base)},
                     {"spec_digest", cast::io::spec_digest(model.params.spec)},
                     {"split", ep_split},
                     {"size", ep_size}};
        if (plan_ptr != nullptr) {
            cast::EvalReport steered =
                cast::eval_discriminative(model.params, model.vocab, plan_ptr, ds);
            print_eval("steered", steered);
            payload["steered"] = cast::eval_report_to_json(steered);
        }
        if (!ep_out.empty()) {
            const std::string digest = settings_digest(
                model.world, json{{"size", ep_size}, {"split", ep_split}, {"seed", seed}});
            cast::io::save_json(ep_out,
                                cast::io::report_envelope("pope", payload, digest, seed));
            std::printf("report written to %s\n", ep_out.c_str());
        }
    });

    auto* eval_chair = eval_cmd->add_subcommand("chair", "captioning hallucination metrics");
    WorldOptions ec_world;
    std::string ec_model;
    std::string ec_plan;
    std::string ec_out;
    int ec_size = 50;
    int ec_max_new = 8;
    ec_world.add_flags(eval_chair);
    eval_chair->add_option("--model", ec_model, "model file (defaults to world build)");
    eval_chair->add_option("--plan", ec_plan, "steering plan file (optional)");
    eval_chair->add_option("--size", ec_size, "dataset size");
    eval_chair->add_option("--max-new", ec_max_new, "max generated tokens");
    eval_chair->add_option("--out", ec_out, "report file (optional)");
    eval_chair->callback([&] {
        cast::PlantedModel model = model_for(ec_world, ec_model);
        auto ds = cast::gen_caption_dataset(model.world, ec_size, seed);
        cast::CaptionQueryPool pool = cast::caption_pool(model.world, 1);
        cast::SteeringPlan plan;
        const cast::SteeringPlan* plan_ptr = nullptr;
        if (!ec_plan.empty()) {
            plan = cast::io::load_plan(ec_plan);
            plan_ptr = &plan;
        }
        cast::ChairReport r = cast::eval_caption(model.params, model.vocab, plan_ptr, ds,
                                                 pool.queries[0].tokens, ec_max_new);
        std::printf("C_S %.4f  C_I %.4f  recall %.4f  mean length %.2f  (%d responses)\n",
                    r.c_s, r.c_i, r.recall, r.mean_length, r.responses);
        if (!ec_out.empty()) {
            json payload = cast::chair_report_to_json(r);
            payload["spec_digest"] = cast::io::spec_digest(model.params.spec);
            const std::string digest = settings_digest(
                model.world, json{{"size", ec_size}, {"max_new", ec_max_new}, {"seed", seed}});
            cast::io::save_json(ec_out,
                                cast::io::report_envelope("chair", payload, digest, seed));
            std::printf("report written to %s\n", ec_out.c_str());
        }
    });

    auto* eval_grid = eval_cmd->add_subcommand("grid", "alpha/K grid search");
    WorldOptions eg_world;
    std::string eg_model;
    std::string eg_probes;
    std::string eg_shifts;
    std::string eg_out;
    std::vector<double> eg_alphas{0.0, 0.5, 1.0, 1.5, 2.0};
    std::vector<int> eg_ks{0, 2, 4, 6};
    int eg_size = 200;
    eg_world.add_flags(eval_grid);
    eval_grid->add_option("--model", eg_model, "model file (defaults to world build)");
    eval_grid->add_option("--probes", eg_probes, "probes file")->required();
    eval_grid->add_option("--shifts", eg_shifts, "shifts file")->required();
    eval_grid->add_option("--alphas", eg_alphas, "alpha grid")->expected(-1);
    eval_grid->add_option("--ks", eg_ks, "K grid")->expected(-1);
    eval_grid->add_option("--size", eg_size, "dataset size");
    eval_grid->add_option("--out", eg_out, "report file (optional)");
    eval_grid->callback([&] {
        cast::PlantedModel model = model_for(eg_world, eg_model);
        cast::io::ProbeArtifact probes = cast::io::load_probes(eg_probes);
        cast::io::ShiftArtifact shifts = cast::io::load_shifts(eg_shifts);
        const int max_k = *std::max_element(eg_ks.begin(), eg_ks.end());
        cast::HeadRanking ranking = ranking_from_probes(probes, model.params.spec, max_k);
        auto ds = cast::gen_discriminative_dataset(model.world, eg_size,
                                                   cast::DiscSplit::BalancedRandom, seed);
        cast::GridSearchResult result = cast::grid_search(
            model.params, model.vocab, ranking, shifts.set, ds, eg_alphas, eg_ks,
            cast::io::file_digest(eg_probes), cast::io::file_digest(eg_shifts));
        std::printf("accuracy");
        for (double a : result.alphas) {
            std::printf("  a=%.2f", a);
        }
        std::printf("\n");
        for (std::size_t ki = 0; ki < result.ks.size(); ++ki) {
            std::printf("K=%-5d ", result.ks[ki]);
            for (std::size_t ai = 0; ai < result.alphas.size(); ++ai) {
                std::printf(" %.4f", result.accuracy.at(ki, ai));
            }
            std::printf("\n");
        }
        std::printf("best: alpha %.2f K %d accuracy %.4f (baseline %.4f)\n",
                    result.best_alpha, result.best_k, result.best_accuracy,
                    result.baseline_accuracy);
        if (!eg_out.empty()) {
            json payload{{"alphas", result.alphas},
                         {"ks", result.ks},
                         {"accuracy", result.accuracy.data},
                         {"best_alpha", result.best_alpha},
                         {"best_k", result.best_k},
                         {"best_accuracy", result.best_accuracy},
                         {"baseline_accuracy", result.baseline_accuracy},
                         {"spec_digest", cast::io::spec_digest(model.params.spec)}};
            const std::string digest = settings_digest(
                model.world, json{{"size", eg_size}, {"alphas", eg_alphas}, {"ks", eg_ks},
                                  {"seed", seed}});
            cast::io::save_json(
                eg_out, cast::io::report_envelope("grid-search", payload, digest, seed));
            cast::export_heatmap(result.accuracy, {}, eg_out + ".csv", "grid-accuracy");
            std::printf("report written to %s (table %s.csv)\n", eg_out.c_str(),
                        eg_out.c_str());
        }
    });

    auto* eval_latency = eval_cmd->add_subcommand("latency", "steering latency overhead");
    WorldOptions el_world;
    std::string el_model;
    std::string el_plan;
    std::string el_out;
    int el_reps = 30;
    int el_size = 8;
    el_world.add_flags(eval_latency);
    eval_latency->add_option("--model", el_model, "model file (defaults to world build)");
    eval_latency->add_option("--plan", el_plan, "steering plan file")->required();
    eval_latency->add_option("--reps", el_reps, "timing repetitions");
    eval_latency->add_option("--size", el_size, "dataset size");
    eval_latency->add_option("--out", el_out, "report file (optional)");
    eval_latency->callback([&] {
        cast::PlantedModel model = model_for(el_world, el_model);
        cast::SteeringPlan plan = cast::io::load_plan(el_plan);
        auto ds = cast::gen_discriminative_dataset(model.world, el_size,
                                                   cast::DiscSplit::BalancedRandom, seed);
        cast::LatencyReport r =
            cast::measure_latency(model.params, model.vocab, plan, ds, el_reps);
        std::printf("prefill: baseline %.4f ms  steered %.4f ms  ratio %.3f\n",
                    r.prefill_baseline_ms, r.prefill_steered_ms, r.prefill_ratio);
        std::printf("per-token: baseline %.4f ms  steered %.4f ms  ratio %.3f\n",
                    r.per_token_baseline_ms, r.per_token_steered_ms, r.per_token_ratio);
        std::printf("on-the-fly shift estimation: %d forward passes per sample\n",
                    r.otf_prefill_passes);
        if (!el_out.empty()) {
            json payload{{"prefill_baseline_ms", r.prefill_baseline_ms},
                         {"prefill_steered_ms", r.prefill_steered_ms},
                         {"prefill_ratio", r.prefill_ratio},
                         {"per_token_baseline_ms", r.per_token_baseline_ms},
                         {"per_token_steered_ms", r.per_token_steered_ms},
                         {"per_token_ratio", r.per_token_ratio},
                         {"otf_prefill_passes", r.otf_prefill_passes},
                         {"repetitions", r.repetitions}};
            payload["spec_digest"] = cast::io::spec_digest(model.params.spec);
            const std::string digest = settings_digest(
                model.world, json{{"reps", el_reps}, {"size", el_size}, {"seed", seed}});
            cast::io::save_json(el_out,
                                cast::io::report_envelope("latency", payload, digest, seed));
            std::printf("report written to %s\n", el_out.c_str());
        }
    });

    // --- analyze ---
    auto* analyze_cmd = app.add_subcommand("analyze", "attention-mass analytics");
    auto* an_mass = analyze_cmd->add_subcommand("mass", "dataset visual-mass grid");
    WorldOptions am_world;
    std::string am_model;
    std::string am_out = "mass.csv";
    std::string am_query = "noncaption";
    int am_size = 50;
    am_world.add_flags(an_mass);
    an_mass->add_option("--model", am_model, "model file (defaults to world build)");
    an_mass->add_option("--size", am_size, "dataset size");
    an_mass->add_option("--query", am_query, "caption|noncaption");
    an_mass->add_option("--out", am_out, "output CSV");
    an_mass->callback([&] {
        cast::PlantedModel model = model_for(am_world, am_model);
        auto ds = cast::gen_discriminative_dataset(model.world, am_size,
                                                   cast::DiscSplit::BalancedRandom, seed);
        auto samples = visuals_of(ds);
        cast::AttentionMassGrid grid;
        if (am_query == "caption") {
            cast::CaptionQueryPool pool = cast::caption_pool(model.world, 1);
            grid = cast::dataset_mass(model.params, samples, pool.queries[0].tokens);
        } else {
            grid = cast::dataset_mass(model.params, samples);
        }
        cast::export_heatmap(grid, am_out);
        std::printf("mass grid (%s queries) written to %s\n", am_query.c_str(),
                    am_out.c_str());
    });

    auto* an_rates =
        analyze_cmd->add_subcommand("rates", "caption/non-caption change rates");
    WorldOptions ar_world;
    std::string ar_model;
    std::string ar_out = "change_rates.csv";
    int ar_size = 50;
    double ar_threshold = 0.0;
    ar_world.add_flags(an_rates);
    an_rates->add_option("--model", ar_model, "model file (defaults to world build)");
    an_rates->add_option("--size", ar_size, "dataset size");
    an_rates->add_option("--threshold", ar_threshold,
                         "rate threshold for the enhanced-head fraction");
    an_rates->add_option("--out", ar_out, "output CSV");
    an_rates->callback([&] {
        cast::PlantedModel model = model_for(ar_world, ar_model);
        auto ds = cast::gen_discriminative_dataset(model.world, ar_size,
                                                   cast::DiscSplit::BalancedRandom, seed);
        auto samples = visuals_of(ds);
        cast::CaptionQueryPool pool = cast::caption_pool(model.world, 1);
        cast::AttentionMassGrid non = cast::dataset_mass(model.params, samples);
        cast::AttentionMassGrid cap =
            cast::dataset_mass(model.params, samples, pool.queries[0].tokens);
        cast::ChangeRateReport rates = cast::change_rates(cap, non);
        cast::export_heatmap(rates, ar_out);
        std::printf("layer-wise rates:");
        for (std::size_t l = 0; l < rates.layerwise.size(); ++l) {
            if (rates.layerwise_defined[l]) {
                std::printf(" %.4f", rates.layerwise[l]);
            } else {
                std::printf(" NA");
            }
        }
        std::size_t enhanced = 0;
        std::size_t defined = 0;
        for (std::size_t i = 0; i < rates.headwise.data.size(); ++i) {
            if (rates.headwise_defined[i] != 0) {
                ++defined;
                if (rates.headwise.data[i] > ar_threshold) {
                    ++enhanced;
                }
            }
        }
        std::printf("\nheads with rate > %.3f: %zu of %zu (%.2f%%)\n", ar_threshold,
                    enhanced, defined,
                    defined > 0 ? 100.0 * static_cast<double>(enhanced) /
                                      static_cast<double>(defined)
                                : 0.0);
        std::printf("head-wise grid written to %s\n", ar_out.c_str());
    });

    auto* an_va = analyze_cmd->add_subcommand("va", "average visual attention share");
    WorldOptions av_world;
    std::string av_model;
    std::string av_plan;
    int av_size = 50;
    av_world.add_flags(an_va);
    an_va->add_option("--model", av_model, "model file (defaults to world build)");
    an_va->add_option("--plan", av_plan, "steering plan file (optional)");
    an_va->add_option("--size", av_size, "dataset size");
    an_va->callback([&] {
        cast::PlantedModel model = model_for(av_world, av_model);
        auto ds = cast::gen_discriminative_dataset(model.world, av_size,
                                                   cast::DiscSplit::BalancedRandom, seed);
        auto samples = visuals_of(ds);
        cast::CaptionQueryPool pool = cast::caption_pool(model.world, 1);
        std::printf("VA%% (non-caption queries): %.4f\n",
                    cast::va_percent(model.params, samples));
        std::printf("VA%% (caption query %s): %.4f\n", pool.queries[0].id.c_str(),
                    cast::va_percent(model.params, samples, pool.queries[0].tokens));
        if (!av_plan.empty()) {
            cast::SteeringPlan plan = cast::io::load_plan(av_plan);
            std::printf("VA%% (non-caption queries, steered): %.4f\n",
                        cast::va_percent(model.params, samples, std::nullopt, &plan));
        }
    });

    auto* an_heatmap = analyze_cmd->add_subcommand("heatmap", "summarize a heatmap CSV");
    std::string ah_in;
    an_heatmap->add_option("--in", ah_in, "heatmap CSV")->required();
    an_heatmap->callback([&] {
        std::vector<std::uint8_t> defined;
        cast::RealMatrix grid = cast::load_heatmap(ah_in, &defined);
        double lo = 0.0;
        double hi = 0.0;
        double sum = 0.0;
        std::size_t count = 0;
        std::size_t undefined = 0;
        for (std::size_t i = 0; i < grid.data.size(); ++i) {
            if (defined[i] == 0) {
                ++undefined;
                continue;
            }
            if (count == 0 || grid.data[i] < lo) {
                lo = grid.data[i];
            }
            if (count == 0 || grid.data[i] > hi) {
                hi = grid.data[i];
            }
            sum += grid.data[i];
            ++count;
        }
        std::printf("%zux%zu grid: min %.6g  max %.6g  mean %.6g  undefined %zu\n",
                    grid.rows, grid.cols, lo, hi, count > 0 ? sum / count : 0.0,
                    undefined);
    });

    // --- query ---
    auto* query_cmd = app.add_subcommand("query", "caption-query pool tools");
    WorldOptions qc_world;
    std::string qc_model;
    std::string qc_pool;
    std::string qc_out;
    int qc_size = 24;
    int qc_pool_size = 16;
    auto run_query_report = [&] {
        cast::PlantedModel model = model_for(qc_world, qc_model);
        cast::CaptionQueryPool pool = qc_pool.empty()
                                          ? cast::caption_pool(model.world, qc_pool_size)
                                          : cast::io::load_pool(qc_pool);
        auto ds = cast::gen_discriminative_dataset(model.world, qc_size,
                                                   cast::DiscSplit::BalancedRandom, seed);
        auto samples = visuals_of(ds);
        cast::ShiftCostReport report =
            cast::select_optimized_query(model.params, samples, pool);
        std::printf("%-8s %10s %8s\n", "query", "cost", "VA%");
        for (const cast::QueryCostRow& row : report.rows) {
            std::printf("%-8s %10.4f %8.4f\n", row.id.c_str(), row.cost, row.va);
        }
        std::printf("optimized query: %s\n", report.selected_id.c_str());
        if (!qc_out.empty()) {
            json rows = json::array();
            for (const cast::QueryCostRow& row : report.rows) {
                rows.push_back(json{{"id", row.id}, {"cost", row.cost}, {"va", row.va}});
            }
            json payload{{"rows", rows},
                         {"selected", report.selected_id},
                         {"spec_digest", cast::io::spec_digest(model.params.spec)}};
            const std::string digest = settings_digest(
                model.world, json{{"size", qc_size}, {"seed", seed}});
            cast::io::save_json(
                qc_out, cast::io::report_envelope("query-cost", payload, digest, seed));
            std::printf("report written to %s\n", qc_out.c_str());
        }
    };
    auto* q_cost = query_cmd->add_subcommand("cost", "shift cost per pool query");
    qc_world.add_flags(q_cost);
    q_cost->add_option("--model", qc_model, "model file (defaults to world build)");
    q_cost->add_option("--pool", qc_pool, "pool file (defaults to a generated pool)");
    q_cost->add_option("--pool-size", qc_pool_size, "generated pool size");
    q_cost->add_option("--size", qc_size, "dataset size");
    q_cost->add_option("--out", qc_out, "report file (optional)");
    q_cost->callback(run_query_report);

    auto* q_optimize =
        query_cmd->add_subcommand("optimize", "select the minimal-cost query");
    q_optimize->add_option("--model", qc_model, "model file (defaults to world build)");
    q_optimize->add_option("--pool", qc_pool, "pool file (defaults to a generated pool)");
    q_optimize->add_option("--pool-size", qc_pool_size, "generated pool size");
    q_optimize->add_option("--size", qc_size, "dataset size");
    q_optimize->add_option("--out", qc_out, "report file (optional)");
    q_optimize->callback(run_query_report);

    // --- pipeline ---
    auto* pipeline_cmd = app.add_subcommand("pipeline", "end-to-end runs");
    auto* pipeline_run = pipeline_cmd->add_subcommand("run", "probe-shift-plan-eval run");
    WorldOptions plr_world;
    std::string plr_config;
    std::string plr_model;
    std::string plr_out_dir = "cast-out";
    int plr_pairs = 32;
    int plr_eval = 200;
    int plr_caption = 20;
    int plr_max_new = 8;
    std::vector<double> plr_alphas;
    std::vector<int> plr_ks;
    pipeline_run->add_option("--config", plr_config, "RunConfig JSON (overrides flags)");
    plr_world.add_flags(pipeline_run);
    pipeline_run->add_option("--model-path", plr_model,
                             "load this model instead of building one");
    pipeline_run->add_option("--pairs", plr_pairs, "probe/shift pair count");
    pipeline_run->add_option("--eval-size", plr_eval, "evaluation dataset size");
    pipeline_run->add_option("--caption-size", plr_caption, "caption eval dataset size");
    pipeline_run->add_option("--max-new", plr_max_new, "caption decode budget");
    pipeline_run->add_option("--alphas", plr_alphas, "optional grid-search alphas")
        ->expected(-1);
    pipeline_run->add_option("--ks", plr_ks, "optional grid-search K values")
        ->expected(-1);
    pipeline_run->add_option("--out-dir", plr_out_dir, "output bundle directory");
    pipeline_run->callback([&] {
        cast::RunConfig config;
        if (!plr_config.empty()) {
            config = cast::io::config_from_json(cast::io::load_json(plr_config));
        } else {
            config.world = plr_world.resolve();
            config.model_path = plr_model;
            config.pairs = plr_pairs;
            config.alpha = alpha;
            config.k = k;
            config.folds = folds;
            config.classifier = parse_classifier(classifier);
            config.seed = seed;
            config.eval_size = plr_eval;
            config.caption_size = plr_caption;
            config.max_new = plr_max_new;
            config.alpha_grid = plr_alphas;
            config.k_grid = plr_ks;
            config.out_dir = plr_out_dir;
        }
        cast::PipelineResult result = cast::run_pipeline(config);
        std::printf("config digest %s\n", result.config_digest.c_str());
        print_eval("baseline", result.baseline);
        print_eval("steered", result.steered);
        std::printf("planted recovery %.3f  VA%% baseline %.4f  VA%% caption %.4f\n",
                    result.recovery, result.va_baseline, result.va_caption);
        std::printf("chair baseline C_S %.3f C_I %.3f | steered C_S %.3f C_I %.3f\n",
                    result.chair_baseline.c_s, result.chair_baseline.c_i,
                    result.chair_steered.c_s, result.chair_steered.c_i);
        std::printf("bundle written to %s\n", config.out_dir.c_str());
    });

    // --- verify ---
    auto* verify_cmd = app.add_subcommand("verify", "re-validate a bundle's digests");
    std::string vf_dir;
    verify_cmd->add_option("--dir", vf_dir, "bundle directory")->required();
    verify_cmd->callback([&] {
        cast::VerifyReport report = cast::verify_bundle(vf_dir);
        std::printf("checked %d artifacts\n", report.checked);
        if (report.ok) {
            std::printf("bundle ok\n");
        } else {
            for (const std::string& p : report.problems) {
                std::printf("problem: %s\n", p.c_str());
            }
            throw cast::ValidationError("bundle verification failed");
        }
    });

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        return app.exit(e) == 0 ? 0 : 2;
    } catch (const cast::ArgumentError& e) {
        std::fprintf(stderr, "config error: %s\n", e.what());
        return 2;
    } catch (const cast::ValidationError& e) {
        std::fprintf(stderr, "validation error: %s\n", e.what());
        return 4;
    } catch (const cast::ParseError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const cast::IoError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const cast::DataError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const cast::ShapeError& e) {
        std::fprintf(stderr, "data error: %s\n", e.what());
        return 3;
    } catch (const cast::Error& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 4;
    }
    return 0;
}
