#include <catch2/catch_amalgamated.hpp>

#include <cstdio>
#include <filesystem>

#include "cast/analysis.hpp"
#include "support/random_model.hpp"

using namespace cast;

namespace {

ModelSpec small_spec() {
    ModelSpec spec;
    spec.layers = 2;
    spec.heads = 3;
    spec.head_dim = 2;
    spec.model_dim = 6;
    spec.vocab_visual = 5;
    spec.vocab_text = 6;
    spec.mlp_hidden = 2;
    spec.max_seq = 20;
    return spec;
}

std::string temp_path(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("visual mass is 1 for text-free inputs") {
    ModelParams params = testsupport::random_model(small_spec(), 5);
    CaptureOptions capture;
    capture.attention = true;
    ForwardTrace t = forward(params, SequenceInput{{0, 1, 2}, {}}, nullptr, capture);
    AttentionMassGrid g = visual_mass(t, params.spec);
    for (double x : g.grid.data) {
        REQUIRE(x == Catch::Approx(1.0).margin(1e-9));
    }
}

TEST_CASE("uniform attention gives visual mass m/(m+n)") {
    ModelSpec spec = small_spec();
    ModelParams params = zero_params(spec); // zero Q/K => uniform causal rows
    CaptureOptions capture;
    capture.attention = true;
    ForwardTrace t = forward(params, SequenceInput{{0, 1, 2}, {3, 4}}, nullptr, capture);
    AttentionMassGrid g = visual_mass(t, params.spec);
    for (double x : g.grid.data) {
        REQUIRE(x == Catch::Approx(3.0 / 5.0).margin(1e-12));
    }
}

TEST_CASE("visual mass matches a per-head summation oracle") {
    ModelParams params = testsupport::random_model(small_spec(), 15);
    CaptureOptions capture;
    capture.attention = true;
    SequenceInput input = testsupport::random_input(params.spec, 16, 4, 3);
    ForwardTrace t = forward(params, input, nullptr, capture);
    AttentionMassGrid g = visual_mass(t, params.spec);
    for (int l = 0; l < params.spec.layers; ++l) {
        for (int h = 0; h < params.spec.heads; ++h) {
            const HeadTrace& ht = t.head(HeadId{l, h}, params.spec.heads);
            double s = 0.0;
            for (int i = 0; i < 4; ++i) {
                s += ht.attn_last_row[static_cast<std::size_t>(i)];
            }
            REQUIRE(g.grid.at(static_cast<std::size_t>(l), static_cast<std::size_t>(h)) ==
                    Catch::Approx(s).margin(1e-12));
        }
    }
}

TEST_CASE("visual_mass requires captured attention rows") {
    ModelParams params = testsupport::random_model(small_spec(), 17);
    ForwardTrace t = forward(params, SequenceInput{{0, 1}, {2}});
    REQUIRE_THROWS_AS(visual_mass(t, params.spec), DataError);
}

TEST_CASE("dataset_mass accumulates per-sample grids in order") {
    ModelParams params = testsupport::random_model(small_spec(), 25);
    std::vector<VisualSample> samples;
    for (int i = 0; i < 5; ++i) {
        SequenceInput in = testsupport::random_input(params.spec, 26 + i, 3, 2);
        samples.push_back(VisualSample{in.visual, in.text});
    }

    SECTION("single sample equals visual_mass") {
        CaptureOptions capture;
        capture.attention = true;
        ForwardTrace t = forward(
            params, SequenceInput{samples[0].visual, samples[0].query}, nullptr, capture);
        AttentionMassGrid one = visual_mass(t, params.spec);
        AttentionMassGrid agg = dataset_mass(params, {samples[0]});
        REQUIRE(agg.grid == one.grid);
        REQUIRE(agg.tag == AttentionMassGrid::Tag::DatasetAggregate);
    }
    SECTION("two identical samples double the grid") {
        AttentionMassGrid one = dataset_mass(params, {samples[0]});
        AttentionMassGrid two = dataset_mass(params, {samples[0], samples[0]});
        for (std::size_t i = 0; i < one.grid.data.size(); ++i) {
            REQUIRE(two.grid.data[i] == Catch::Approx(2.0 * one.grid.data[i]).margin(1e-12));
        }
    }
    SECTION("matches the accumulation oracle over 5 samples") {
        AttentionMassGrid agg = dataset_mass(params, samples);
        RealMatrix expected(agg.grid.rows, agg.grid.cols);
        for (const VisualSample& s : samples) {
            AttentionMassGrid g = dataset_mass(params, {s});
            for (std::size_t i = 0; i < expected.data.size(); ++i) {
                expected.data[i] += g.grid.data[i];
            }
        }
        for (std::size_t i = 0; i < expected.data.size(); ++i) {
            REQUIRE(agg.grid.data[i] == Catch::Approx(expected.data[i]).margin(1e-12));
        }
    }
    SECTION("empty dataset is rejected") {
        REQUIRE_THROWS_AS(dataset_mass(params, {}), DataError);
    }
    SECTION("override query replaces every sample's own query") {
        std::vector<int> q{1, 2};
        AttentionMassGrid agg = dataset_mass(params, samples, q);
        std::vector<VisualSample> replaced = samples;
        for (auto& s : replaced) {
            s.query = q;
        }
        AttentionMassGrid expected = dataset_mass(params, replaced);
        REQUIRE(agg.grid == expected.grid);
    }
}

TEST_CASE("change rates cover the trivial and oracle cases") {
    AttentionMassGrid ref;
    ref.grid = RealMatrix(2, 2);
    std::mt19937_64 rng(35);
    for (double& x : ref.grid.data) {
        x = 0.5 + uniform_unit(rng);
    }

    SECTION("equal grids give zero rates") {
        ChangeRateReport r = change_rates(ref, ref);
        for (double x : r.headwise.data) {
            REQUIRE(x == 0.0);
        }
        for (double x : r.layerwise) {
            REQUIRE(x == 0.0);
        }
    }
    SECTION("doubling gives +1 rates") {
        AttentionMassGrid target = ref;
        for (double& x : target.grid.data) {
            x *= 2.0;
        }
        ChangeRateReport r = change_rates(target, ref);
        for (double x : r.headwise.data) {
            REQUIRE(x == Catch::Approx(1.0).margin(1e-12));
        }
        for (double x : r.layerwise) {
            REQUIRE(x == Catch::Approx(1.0).margin(1e-12));
        }
    }
    SECTION("random grids match the elementwise oracle") {
        AttentionMassGrid target;
        target.grid = RealMatrix(2, 2);
        for (double& x : target.grid.data) {
            x = 0.5 + uniform_unit(rng);
        }
        ChangeRateReport r = change_rates(target, ref);
        for (std::size_t l = 0; l < 2; ++l) {
            double ts = 0.0;
            double rs = 0.0;
            for (std::size_t h = 0; h < 2; ++h) {
                const double t = target.grid.at(l, h);
                const double rf = ref.grid.at(l, h);
                ts += t;
                rs += rf;
                REQUIRE(r.headwise.at(l, h) == Catch::Approx((t - rf) / rf).margin(1e-12));
            }
            REQUIRE(r.layerwise[l] == Catch::Approx((ts - rs) / rs).margin(1e-12));
        }
    }
    SECTION("zero reference cells are flagged undefined") {
        AttentionMassGrid zero_ref = ref;
        zero_ref.grid.at(0, 0) = 0.0;
        ChangeRateReport r = change_rates(ref, zero_ref);
        REQUIRE(r.headwise_defined[0] == 0);
        REQUIRE(r.headwise_defined[1] == 1);
    }
    SECTION("scale invariance") {
        AttentionMassGrid target;
        target.grid = RealMatrix(2, 2);
        for (double& x : target.grid.data) {
            x = 0.5 + uniform_unit(rng);
        }
        ChangeRateReport a = change_rates(target, ref);
        AttentionMassGrid target_scaled = target;
        AttentionMassGrid ref_scaled = ref;
        for (double& x : target_scaled.grid.data) {
            x *= 3.7;
        }
        for (double& x : ref_scaled.grid.data) {
            x *= 3.7;
        }
        ChangeRateReport b = change_rates(target_scaled, ref_scaled);
        for (std::size_t i = 0; i < a.headwise.data.size(); ++i) {
            REQUIRE(a.headwise.data[i] == Catch::Approx(b.headwise.data[i]).margin(1e-12));
        }
    }
    SECTION("shape mismatch is rejected") {
        AttentionMassGrid other;
        other.grid = RealMatrix(3, 2, 1.0);
        REQUIRE_THROWS_AS(change_rates(other, ref), ShapeError);
    }
}

TEST_CASE("va_percent stays in [0,1] and is 1 without text") {
    ModelParams params = testsupport::random_model(small_spec(), 45);
    std::vector<VisualSample> no_text{{{0, 1, 2}, {}}, {{2, 3}, {}}};
    REQUIRE(va_percent(params, no_text) == Catch::Approx(1.0).margin(1e-9));

    std::vector<VisualSample> mixed;
    for (int i = 0; i < 4; ++i) {
        SequenceInput in = testsupport::random_input(params.spec, 46 + i, 3, 2);
        mixed.push_back(VisualSample{in.visual, in.text});
    }
    const double va = va_percent(params, mixed);
    REQUIRE(va >= 0.0);
    REQUIRE(va <= 1.0);
}

TEST_CASE("uniform-attention model gives va_percent m/(m+n)") {
    ModelParams params = zero_params(small_spec());
    std::vector<VisualSample> samples{{{0, 1, 2}, {3, 4}}};
    REQUIRE(va_percent(params, samples) == Catch::Approx(3.0 / 5.0).margin(1e-12));
}

TEST_CASE("steering never changes attention weights in its own pass") {
    // steering perturbs head outputs after their attention is computed, so a
    // plan confined to the last layer leaves the whole grid untouched
    ModelParams params = testsupport::random_model(small_spec(), 55);
    SequenceInput input = testsupport::random_input(params.spec, 56, 4, 3);
    SteeringPlan plan;
    plan.alpha = 3.0;
    plan.heads = {HeadId{1, 0}, HeadId{1, 2}};
    plan.shifts[HeadId{1, 0}] = {0.5, -0.5};
    plan.shifts[HeadId{1, 2}] = {1.0, 2.0};

    CaptureOptions capture;
    capture.attention = true;
    ForwardTrace base = forward(params, input, nullptr, capture);
    ForwardTrace steered = forward(params, input, &plan, capture);
    AttentionMassGrid gb = visual_mass(base, params.spec);
    AttentionMassGrid gs = visual_mass(steered, params.spec);
    for (std::size_t i = 0; i < gb.grid.data.size(); ++i) {
        REQUIRE(gs.grid.data[i] == Catch::Approx(gb.grid.data[i]).margin(1e-12));
    }

    // below the steered layer the rows are bit-identical even for deep plans
    SteeringPlan deep;
    deep.alpha = 2.0;
    deep.heads = {HeadId{1, 1}};
    deep.shifts[HeadId{1, 1}] = {0.3, 0.3};
    ForwardTrace steered_deep = forward(params, input, &deep, capture);
    for (int h = 0; h < params.spec.heads; ++h) {
        REQUIRE(base.head(HeadId{0, h}, params.spec.heads).attn_last_row ==
                steered_deep.head(HeadId{0, h}, params.spec.heads).attn_last_row);
    }
}

TEST_CASE("heatmap files round-trip losslessly") {
    std::mt19937_64 rng(65);

    SECTION("1x1 grid") {
        RealMatrix g(1, 1);
        g.at(0, 0) = 0.12345678901234567;
        const std::string path = temp_path("cast_heatmap_1x1.csv");
        export_heatmap(g, {}, path, "test");
        RealMatrix back = load_heatmap(path);
        REQUIRE(back == g);
        std::remove(path.c_str());
        std::remove((path + ".meta.json").c_str());
    }
    SECTION("32x32 random grid") {
        RealMatrix g(32, 32);
        for (double& x : g.data) {
            x = normal_sample(rng) * std::pow(10.0, uniform_int(rng, -8, 8));
        }
        const std::string path = temp_path("cast_heatmap_32.csv");
        export_heatmap(g, {}, path, "test");
        RealMatrix back = load_heatmap(path);
        REQUIRE(back == g);
        std::remove(path.c_str());
        std::remove((path + ".meta.json").c_str());
    }
    SECTION("undefined cells render as NA") {
        RealMatrix g(2, 2, 1.5);
        std::vector<std::uint8_t> defined{1, 0, 1, 1};
        const std::string path = temp_path("cast_heatmap_na.csv");
        export_heatmap(g, defined, path, "test");
        std::vector<std::uint8_t> loaded_defined;
        RealMatrix back = load_heatmap(path, &loaded_defined);
        REQUIRE(loaded_defined == defined);
        REQUIRE(back.at(0, 1) == 0.0);
        REQUIRE(back.at(1, 1) == 1.5);
        std::remove(path.c_str());
        std::remove((path + ".meta.json").c_str());
    }
    SECTION("unwritable destination raises an io error") {
        RealMatrix g(1, 1, 0.0);
        REQUIRE_THROWS_AS(export_heatmap(g, {}, "/nonexistent-dir/x.csv", "t"), IoError);
    }
}
