#include <catch2/catch_amalgamated.hpp>

#include <set>

#include "cast/harness.hpp"

using namespace cast;

namespace {

// Small planted world; cheap enough for exhaustive checks.
SyntheticWorldSpec small_world() {
    SyntheticWorldSpec w;
    w.layers = 5;
    w.heads = 4;
    w.head_dim = 16;
    w.object_alphabet = 8;
    w.objects_per_image = 2;
    w.m_min = 4;
    w.m_max = 8;
    w.n_min = 3;
    w.n_max = 5;
    w.planted_count = 2;
    w.band_lo = 2;
    w.band_hi = 3;
    return w;
}

RealMatrix accuracy_grid(const PlantedModel& model, const std::vector<PairSample>& pairs) {
    auto datasets = collect_probe_dataset(model.params, pairs);
    RealMatrix grid(static_cast<std::size_t>(model.world.layers),
                    static_cast<std::size_t>(model.world.heads));
    for (const auto& [id, ds] : datasets) {
        grid.at(static_cast<std::size_t>(id.layer), static_cast<std::size_t>(id.head)) =
            cv_accuracy(ds, ClassifierKind::MaxMargin, 5, 3);
    }
    return grid;
}

} // namespace

TEST_CASE("world spec validation rejects infeasible configurations") {
    SyntheticWorldSpec w = small_world();
    SECTION("planted count beyond band capacity") {
        w.planted_count = 5; // band [2,3) holds at most 4 heads
        REQUIRE_THROWS_AS(build_planted_model(w), ArgumentError);
    }
    SECTION("band outside the usable layers") {
        w.band_hi = 4; // collides with the functional layer (layers-2 = 3)
        REQUIRE_THROWS_AS(build_planted_model(w), ArgumentError);
    }
    SECTION("head width too small for the residual layout") {
        w.head_dim = 8;
        REQUIRE_THROWS_AS(build_planted_model(w), ArgumentError);
    }
}

TEST_CASE("same seed builds a bit-identical planted model") {
    SyntheticWorldSpec w = small_world();
    PlantedModel a = build_planted_model(w);
    PlantedModel b = build_planted_model(w);
    REQUIRE(a.planted == b.planted);
    REQUIRE(a.params.visual_embed == b.params.visual_embed);
    REQUIRE(a.params.text_embed == b.params.text_embed);
    for (std::size_t l = 0; l < a.params.layers.size(); ++l) {
        REQUIRE(a.params.layers[l].w_o == b.params.layers[l].w_o);
        for (std::size_t h = 0; h < a.params.layers[l].heads.size(); ++h) {
            REQUIRE(a.params.layers[l].heads[h].w_q == b.params.layers[l].heads[h].w_q);
        }
    }
    REQUIRE(a.params.unembed == b.params.unembed);
}

TEST_CASE("planted band {(2,0),(2,1)} dominates the visual-mass gap") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    REQUIRE(model.planted == std::vector<HeadId>{{2, 0}, {2, 1}});

    auto pairs = gen_probe_pairs(w, 16, 3);
    RealMatrix gap(static_cast<std::size_t>(w.layers), static_cast<std::size_t>(w.heads));
    CaptureOptions capture;
    capture.attention = true;
    for (const PairSample& p : pairs) {
        ForwardTrace tc = forward(model.params, SequenceInput{p.visual, p.caption_query},
                                  nullptr, capture);
        ForwardTrace tn = forward(model.params,
                                  SequenceInput{p.visual, p.noncaption_query}, nullptr,
                                  capture);
        AttentionMassGrid gc = visual_mass(tc, model.params.spec);
        AttentionMassGrid gn = visual_mass(tn, model.params.spec);
        for (std::size_t i = 0; i < gap.data.size(); ++i) {
            gap.data[i] += (gc.grid.data[i] - gn.grid.data[i]) / 16.0;
        }
    }
    double planted_min = 1e9;
    double nonplanted_max = -1e9;
    for (int l = 0; l < w.layers; ++l) {
        for (int h = 0; h < w.heads; ++h) {
            const double g = gap.at(static_cast<std::size_t>(l), static_cast<std::size_t>(h));
            const bool is_planted =
                std::find(model.planted.begin(), model.planted.end(), HeadId{l, h}) !=
                model.planted.end();
            if (is_planted) {
                planted_min = std::min(planted_min, g);
            } else {
                nonplanted_max = std::max(nonplanted_max, g);
            }
        }
    }
    REQUIRE(planted_min >= 5.0 * nonplanted_max);
}

TEST_CASE("null world probes are statistically indistinguishable") {
    SyntheticWorldSpec w = small_world();
    w.planted_count = 0;
    PlantedModel model = build_planted_model(w);
    REQUIRE(model.planted.empty());
    auto pairs = gen_probe_pairs(w, 24, 5);
    RealMatrix grid = accuracy_grid(model, pairs);
    for (double a : grid.data) {
        REQUIRE(a >= 0.35);
        REQUIRE(a <= 0.65);
    }
}

TEST_CASE("probing recovers the planted heads exactly") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    auto pairs = gen_probe_pairs(w, 24, 7);
    RealMatrix grid = accuracy_grid(model, pairs);
    HeadRanking ranking = rank_heads(grid, 2);
    REQUIRE(planted_recovery(ranking, model.planted, 2) == 1.0);
}

TEST_CASE("discriminative dataset generation is balanced and seeded") {
    SyntheticWorldSpec w = small_world();
    SECTION("odd sizes are rejected") {
        REQUIRE_THROWS_AS(gen_discriminative_dataset(w, 7, DiscSplit::BalancedRandom, 1),
                          ArgumentError);
    }
    SECTION("size 2 gives one yes and one no") {
        auto ds = gen_discriminative_dataset(w, 2, DiscSplit::BalancedRandom, 1);
        REQUIRE(ds[0].present);
        REQUIRE_FALSE(ds[1].present);
    }
    SECTION("label marginals are exactly one half") {
        auto ds = gen_discriminative_dataset(w, 200, DiscSplit::BalancedRandom, 2);
        int yes = 0;
        for (const auto& s : ds) {
            yes += s.present ? 1 : 0;
        }
        REQUIRE(yes == 100);
    }
    SECTION("same seed reproduces the dataset") {
        auto a = gen_discriminative_dataset(w, 50, DiscSplit::CooccurrenceBiased, 9);
        auto b = gen_discriminative_dataset(w, 50, DiscSplit::CooccurrenceBiased, 9);
        for (std::size_t i = 0; i < a.size(); ++i) {
            REQUIRE(a[i].visual == b[i].visual);
            REQUIRE(a[i].query == b[i].query);
            REQUIRE(a[i].present == b[i].present);
        }
    }
    SECTION("labels are recomputable from the visual tokens alone") {
        WorldVocab vocab{w.object_alphabet};
        for (DiscSplit split : {DiscSplit::BalancedRandom, DiscSplit::CooccurrenceBiased}) {
            auto ds = gen_discriminative_dataset(w, 60, split, 11);
            for (const auto& s : ds) {
                const bool actually_present =
                    std::find(s.visual.begin(), s.visual.end(), vocab.object(s.object)) !=
                    s.visual.end();
                REQUIRE(actually_present == s.present);
            }
        }
    }
}

TEST_CASE("make_eval_report reproduces hand-counted confusion matrices") {
    // 8 outcomes counted by hand: ty=2 fy=1 fn=2 tn=3
    std::vector<std::pair<bool, int>> outcomes{
        {true, 1}, {true, 1}, {true, 0}, {true, 0},
        {false, 1}, {false, 0}, {false, 0}, {false, 0},
    };
    EvalReport r = make_eval_report(outcomes);
    REQUIRE(r.true_yes == 2);
    REQUIRE(r.false_yes == 1);
    REQUIRE(r.false_no == 2);
    REQUIRE(r.true_no == 3);
    REQUIRE(r.total == 8);
    REQUIRE(r.accuracy == Catch::Approx(5.0 / 8.0).margin(1e-12));
    REQUIRE(r.precision == Catch::Approx(2.0 / 3.0).margin(1e-12));
    REQUIRE(r.recall == Catch::Approx(2.0 / 4.0).margin(1e-12));
    const double f1 = 2.0 * (2.0 / 3.0) * 0.5 / ((2.0 / 3.0) + 0.5);
    REQUIRE(r.f1 == Catch::Approx(f1).margin(1e-12));
    REQUIRE(r.yes_rate == Catch::Approx(3.0 / 8.0).margin(1e-12));

    // metric consistency: everything recomputable from the matrix
    const double tp = r.true_yes;
    const double fp = r.false_yes;
    const double fn = r.false_no;
    const double tn = r.true_no;
    REQUIRE(r.accuracy == Catch::Approx((tp + tn) / (tp + fp + fn + tn)).margin(1e-12));
    REQUIRE(r.f1 == Catch::Approx(2.0 * tp / (2.0 * tp + fp + fn)).margin(1e-12));
}

TEST_CASE("oracle-clean world answers perfectly") {
    SyntheticWorldSpec w = small_world();
    w.text_bias = 0.0;
    w.noise_level = 0.0;
    PlantedModel model = build_planted_model(w);
    auto ds = gen_discriminative_dataset(w, 60, DiscSplit::BalancedRandom, 3);
    EvalReport r = eval_discriminative(model.params, model.vocab, nullptr, ds);
    REQUIRE(r.accuracy == 1.0);
    REQUIRE(r.f1 == 1.0);
    REQUIRE(r.abstentions == 0);
}

TEST_CASE("constant-yes model shows the degenerate yes-bias pattern") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    std::fill(model.params.unembed.data.begin(), model.params.unembed.data.end(), 0.0);
    model.params.unembed.at(0, WorldVocab::yes) = 1.0; // constant coordinate
    auto ds = gen_discriminative_dataset(w, 80, DiscSplit::BalancedRandom, 5);
    EvalReport r = eval_discriminative(model.params, model.vocab, nullptr, ds);
    REQUIRE(r.accuracy == Catch::Approx(0.5));
    REQUIRE(r.recall == 1.0);
    REQUIRE(r.yes_rate == 1.0);
}

TEST_CASE("non-answer tokens count as abstentions") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    std::fill(model.params.unembed.data.begin(), model.params.unembed.data.end(), 0.0);
    model.params.unembed.at(0, model.vocab.filler(0)) = 1.0;
    auto ds = gen_discriminative_dataset(w, 20, DiscSplit::BalancedRandom, 5);
    EvalReport r = eval_discriminative(model.params, model.vocab, nullptr, ds);
    REQUIRE(r.abstentions == 20);
    REQUIRE(r.true_yes + r.false_yes + r.false_no + r.true_no == 20);
}

TEST_CASE("steering beats the baseline and matches a replayed decode") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    auto pairs = gen_probe_pairs(w, 24, 11);
    RealMatrix grid = accuracy_grid(model, pairs);
    HeadRanking ranking = rank_heads(grid, 2);
    ShiftVectorSet shifts = estimate_shifts(model.params, pairs);
    SteeringPlan plan = build_plan(ranking, shifts, 1.5, 2, "p", "s");

    auto ds = gen_discriminative_dataset(w, 120, DiscSplit::BalancedRandom, 13);
    EvalReport base = eval_discriminative(model.params, model.vocab, nullptr, ds);
    EvalReport steered = eval_discriminative(model.params, model.vocab, &plan, ds);
    REQUIRE(steered.accuracy > base.accuracy);

    // replay oracle: re-decode each sample independently and recount
    std::vector<std::pair<bool, int>> replay_base;
    std::vector<std::pair<bool, int>> replay_steered;
    for (const DiscSample& s : ds) {
        const SteeringPlan* variants[] = {nullptr, &plan};
        for (const SteeringPlan* p : variants) {
            std::vector<int> toks =
                greedy_decode(model.params, SequenceInput{s.visual, s.query}, p, 1);
            int answer = -1;
            if (toks.front() == WorldVocab::yes) {
                answer = 1;
            } else if (toks.front() == WorldVocab::no) {
                answer = 0;
            }
            (p == nullptr ? replay_base : replay_steered).push_back({s.present, answer});
        }
    }
    REQUIRE(make_eval_report(replay_base).accuracy == base.accuracy);
    REQUIRE(make_eval_report(replay_steered).accuracy == steered.accuracy);
}

TEST_CASE("caption decode emits the image's objects in canonical order") {
    SyntheticWorldSpec w = small_world();
    w.noise_level = 0.0; // exact ties
    PlantedModel model = build_planted_model(w);
    auto ds = gen_caption_dataset(w, 5, 7);
    std::mt19937_64 qrng(3);
    std::vector<int> query = make_caption_query(qrng, w, model.vocab);
    for (const CaptionSample& s : ds) {
        std::vector<int> toks = greedy_decode(model.params, SequenceInput{s.visual, query},
                                              nullptr, 8, WorldVocab::end);
        std::vector<int> expected;
        for (int o : s.truth) {
            expected.push_back(model.vocab.mention(o));
        }
        expected.push_back(WorldVocab::end);
        REQUIRE(toks == expected);
    }
}

TEST_CASE("chair_from_outcomes reproduces hand-counted values") {
    SECTION("exact responses are hallucination free") {
        std::vector<CaptionOutcome> rows{
            {{0, 1}, {0, 1}, 2},
            {{2}, {2}, 1},
        };
        ChairReport r = chair_from_outcomes(rows);
        REQUIRE(r.c_s == 0.0);
        REQUIRE(r.c_i == 0.0);
        REQUIRE(r.recall == 1.0);
        REQUIRE(r.mean_length == Catch::Approx(1.5));
    }
    SECTION("one fabricated object per response drives C_S to 1") {
        std::vector<CaptionOutcome> rows{
            {{0}, {0, 5}, 2},
            {{1, 2}, {1, 2, 6}, 3},
        };
        ChairReport r = chair_from_outcomes(rows);
        REQUIRE(r.c_s == 1.0);
        REQUIRE(r.c_i == Catch::Approx(2.0 / 5.0).margin(1e-12));
        REQUIRE(r.recall == 1.0);
    }
    SECTION("mixed batch counted by hand") {
        // r1: truth {0,1}, mentions {0,3}: 1 halluc, 1 covered, len 4
        // r2: truth {2},   mentions {}:    0 halluc, 0 covered, len 0
        // r3: truth {4,5}, mentions {4,5}: 0 halluc, 2 covered, len 2
        // r4: truth {6},   mentions {7,7}: dedupes to {7}: 1 halluc, len 3
        std::vector<CaptionOutcome> rows{
            {{0, 1}, {0, 3}, 4},
            {{2}, {}, 0},
            {{4, 5}, {4, 5}, 2},
            {{6}, {7, 7}, 3},
        };
        ChairReport r = chair_from_outcomes(rows);
        REQUIRE(r.c_s == Catch::Approx(2.0 / 4.0).margin(1e-12));
        REQUIRE(r.c_i == Catch::Approx(2.0 / 5.0).margin(1e-12)); // 2 halluc / 5 mentions
        REQUIRE(r.recall == Catch::Approx(3.0 / 6.0).margin(1e-12));
        REQUIRE(r.mean_length == Catch::Approx(9.0 / 4.0).margin(1e-12));
        REQUIRE(r.responses == 4);
    }
}

TEST_CASE("eval_caption on the clean world is hallucination free") {
    SyntheticWorldSpec w = small_world();
    w.noise_level = 0.0;
    PlantedModel model = build_planted_model(w);
    auto ds = gen_caption_dataset(w, 6, 9);
    std::mt19937_64 qrng(4);
    std::vector<int> query = make_caption_query(qrng, w, model.vocab);
    ChairReport r = eval_caption(model.params, model.vocab, nullptr, ds, query, 8);
    REQUIRE(r.c_s == 0.0);
    REQUIRE(r.c_i == 0.0);
    REQUIRE(r.recall == 1.0);
    REQUIRE(r.mean_length == Catch::Approx(2.0)); // objects_per_image mentions
}

TEST_CASE("grid search keeps the K=0 row at baseline and replays cellwise") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    auto pairs = gen_probe_pairs(w, 16, 15);
    RealMatrix grid = accuracy_grid(model, pairs);
    HeadRanking ranking = rank_heads(grid, 2);
    ShiftVectorSet shifts = estimate_shifts(model.params, pairs);
    auto ds = gen_discriminative_dataset(w, 60, DiscSplit::BalancedRandom, 17);

    std::vector<double> alphas{0.0, 1.0, 2.0};
    std::vector<int> ks{0, 1, 2};
    GridSearchResult result =
        grid_search(model.params, model.vocab, ranking, shifts, ds, alphas, ks);

    // K=0 row is the identity for every alpha
    for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
        REQUIRE(result.accuracy.at(0, ai) == result.baseline_accuracy);
    }
    // alpha=0 column is the identity for every K
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        REQUIRE(result.accuracy.at(ki, 0) == result.baseline_accuracy);
    }
    // every cell equals an independent single evaluation, bit-exact
    for (std::size_t ki = 0; ki < ks.size(); ++ki) {
        for (std::size_t ai = 0; ai < alphas.size(); ++ai) {
            SteeringPlan plan = build_plan(ranking, shifts, alphas[ai], ks[ki], "grid",
                                           "grid");
            EvalReport r = eval_discriminative(model.params, model.vocab, &plan, ds);
            REQUIRE(result.accuracy.at(ki, ai) == r.accuracy);
        }
    }

    SECTION("1x1 grid selects its only cell") {
        GridSearchResult one =
            grid_search(model.params, model.vocab, ranking, shifts, ds, {1.5}, {2});
        REQUIRE(one.best_alpha == 1.5);
        REQUIRE(one.best_k == 2);
        REQUIRE(one.best_accuracy == one.accuracy.at(0, 0));
    }
    SECTION("ties resolve to smaller alpha, then smaller K") {
        GridSearchResult tie =
            grid_search(model.params, model.vocab, ranking, shifts, ds, {0.0, 0.0}, {0, 1});
        REQUIRE(tie.best_alpha == 0.0);
        REQUIRE(tie.best_k == 0);
    }
}

TEST_CASE("planted_recovery formula cases") {
    RealMatrix grid(4, 4);
    std::mt19937_64 rng(19);
    for (double& x : grid.data) {
        x = uniform_unit(rng);
    }
    HeadRanking ranking = rank_heads(grid, 4);

    SECTION("perfect and disjoint rankings") {
        std::vector<HeadId> planted(ranking.ordered.begin(), ranking.ordered.begin() + 4);
        REQUIRE(planted_recovery(ranking, planted, 4) == 1.0);
        std::vector<HeadId> disjoint(ranking.ordered.end() - 4, ranking.ordered.end());
        REQUIRE(planted_recovery(ranking, disjoint, 4) == 0.0);
    }
    SECTION("randomized rankings land at the chance rate") {
        std::vector<HeadId> planted{{0, 0}, {1, 1}, {2, 2}};
        double total = 0.0;
        for (int s = 0; s < 100; ++s) {
            RealMatrix g(4, 4);
            std::mt19937_64 r2(static_cast<std::uint64_t>(s) + 1000);
            for (double& x : g.data) {
                x = uniform_unit(r2);
            }
            total += planted_recovery(rank_heads(g, 3), planted, 3);
        }
        const double expectation = 3.0 / 16.0; // k * planted / (L*H) / min(k, planted)
        REQUIRE(std::abs(total / 100.0 - expectation) <= 0.05);
    }
}

TEST_CASE("measure_latency reports near-unity ratios for an empty plan") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    SteeringPlan empty;
    auto ds = gen_discriminative_dataset(w, 4, DiscSplit::BalancedRandom, 21);
    LatencyReport r = measure_latency(model.params, model.vocab, empty, ds, 5, 2);
    REQUIRE(r.prefill_ratio > 0.5);
    REQUIRE(r.prefill_ratio < 1.5);
    REQUIRE(r.otf_prefill_passes == 2);
    REQUIRE_THROWS_AS(measure_latency(model.params, model.vocab, empty, ds, 2),
                      ArgumentError);
}

TEST_CASE("caption pool ids are unique and queries start with the flag token") {
    SyntheticWorldSpec w = small_world();
    CaptionQueryPool pool = caption_pool(w, 16);
    REQUIRE(pool.queries.size() == 16);
    pool.validate();
    std::set<int> lengths;
    for (const CaptionQuery& q : pool.queries) {
        REQUIRE(q.tokens.front() == WorldVocab::cap);
        lengths.insert(static_cast<int>(q.tokens.size()));
    }
    REQUIRE(lengths.size() > 1);
}

TEST_CASE("caption queries raise the visual attention share") {
    SyntheticWorldSpec w = small_world();
    PlantedModel model = build_planted_model(w);
    auto ds = gen_discriminative_dataset(w, 40, DiscSplit::BalancedRandom, 23);
    std::vector<VisualSample> samples;
    for (const DiscSample& s : ds) {
        samples.push_back(VisualSample{s.visual, s.query});
    }
    CaptionQueryPool pool = caption_pool(w, 4);
    const double va_non = va_percent(model.params, samples);
    const double va_cap = va_percent(model.params, samples, pool.queries[0].tokens);
    REQUIRE(va_cap > va_non);
}
