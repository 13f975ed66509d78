#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "cast/harness.hpp"
#include "cast/io.hpp"
#include "support/random_model.hpp"

using namespace cast;

namespace {

std::string temp_file(const char* name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

struct FileGuard {
    std::string path;
    ~FileGuard() { std::remove(path.c_str()); }
};

ModelParams sample_model() {
    ModelSpec spec;
    spec.layers = 2;
    spec.heads = 2;
    spec.head_dim = 3;
    spec.model_dim = 6;
    spec.vocab_visual = 4;
    spec.vocab_text = 5;
    spec.mlp_hidden = 3;
    spec.max_seq = 12;
    return testsupport::random_model(spec, 77);
}

bool params_equal(const ModelParams& a, const ModelParams& b) {
    if (!(a.visual_embed == b.visual_embed) || !(a.text_embed == b.text_embed) ||
        !(a.pos_embed == b.pos_embed) || !(a.unembed == b.unembed)) {
        return false;
    }
    for (std::size_t l = 0; l < a.layers.size(); ++l) {
        const LayerParams& x = a.layers[l];
        const LayerParams& y = b.layers[l];
        if (!(x.w_o == y.w_o) || !(x.mlp_w1 == y.mlp_w1) || x.mlp_b1 != y.mlp_b1 ||
            !(x.mlp_w2 == y.mlp_w2) || x.mlp_b2 != y.mlp_b2) {
            return false;
        }
        for (std::size_t h = 0; h < x.heads.size(); ++h) {
            if (!(x.heads[h].w_q == y.heads[h].w_q) ||
                !(x.heads[h].w_k == y.heads[h].w_k) ||
                !(x.heads[h].w_v == y.heads[h].w_v)) {
                return false;
            }
            }
    }
    return true;
}

} // namespace

TEST_CASE("model files round-trip bit-exactly") {
    ModelParams params = sample_model();
    FileGuard guard{temp_file("cast_model.json")};
    io::save_model(guard.path, params);
    ModelParams loaded = io::load_model(guard.path);
    REQUIRE(params_equal(params, loaded));
    REQUIRE(loaded.spec.layers == params.spec.layers);
}

TEST_CASE("probe artifacts round-trip") {
    ModelParams params = sample_model();
    io::ProbeArtifact artifact;
    artifact.spec_digest = io::spec_digest(params.spec);
    std::mt19937_64 rng(3);
    for (int l = 0; l < 2; ++l) {
        for (int h = 0; h < 2; ++h) {
            HeadProbe probe;
            for (int i = 0; i < 3; ++i) {
                probe.weights.push_back(normal_sample(rng));
                probe.means.push_back(normal_sample(rng));
                probe.scales.push_back(1.0 + uniform_unit(rng));
            }
            probe.bias = normal_sample(rng);
            probe.cv_accuracy = uniform_unit(rng);
            probe.kind = h == 0 ? ClassifierKind::MaxMargin : ClassifierKind::Logistic;
            artifact.probes[HeadId{l, h}] = probe;
        }
    }
    FileGuard guard{temp_file("cast_probes.json")};
    io::save_probes(guard.path, artifact);
    io::ProbeArtifact loaded = io::load_probes(guard.path);
    REQUIRE(loaded.spec_digest == artifact.spec_digest);
    REQUIRE(loaded.probes.size() == artifact.probes.size());
    for (const auto& [id, probe] : artifact.probes) {
        const HeadProbe& lp = loaded.probes.at(id);
        REQUIRE(lp.weights == probe.weights);
        REQUIRE(lp.bias == probe.bias);
        REQUIRE(lp.means == probe.means);
        REQUIRE(lp.scales == probe.scales);
        REQUIRE(lp.cv_accuracy == probe.cv_accuracy);
        REQUIRE(lp.kind == probe.kind);
    }
    RealMatrix grid = loaded.accuracy_grid(params.spec);
    REQUIRE(grid.rows == 2);
    REQUIRE(grid.cols == 2);
}

TEST_CASE("shift artifacts round-trip including a 32x32 grid") {
    io::ShiftArtifact artifact;
    artifact.spec_digest = "feedbeef";
    artifact.set.pair_count = 7;
    artifact.set.source_queries = {"q1", "q2"};
    std::mt19937_64 rng(5);
    for (int l = 0; l < 32; ++l) {
        for (int h = 0; h < 32; ++h) {
            RealVector v(4);
            for (double& x : v) {
                x = normal_sample(rng) * std::pow(10.0, uniform_int(rng, -6, 6));
            }
            artifact.set.vectors[HeadId{l, h}] = std::move(v);
        }
    }
    FileGuard guard{temp_file("cast_shifts.json")};
    io::save_shifts(guard.path, artifact);
    io::ShiftArtifact loaded = io::load_shifts(guard.path);
    REQUIRE(loaded.spec_digest == artifact.spec_digest);
    REQUIRE(loaded.set.pair_count == 7);
    REQUIRE(loaded.set.source_queries == artifact.set.source_queries);
    REQUIRE(loaded.set.vectors.size() == artifact.set.vectors.size());
    for (const auto& [id, vec] : artifact.set.vectors) {
        REQUIRE(loaded.set.vectors.at(id) == vec); // bit-exact doubles
    }
}

TEST_CASE("plan files round-trip, including the empty plan") {
    SECTION("empty plan") {
        SteeringPlan plan;
        plan.alpha = 0.0;
        plan.probe_digest = "p";
        plan.shift_digest = "s";
        FileGuard guard{temp_file("cast_plan_empty.json")};
        io::save_plan(guard.path, plan);
        SteeringPlan loaded = io::load_plan(guard.path);
        REQUIRE(loaded.heads.empty());
        REQUIRE(loaded.alpha == 0.0);
        REQUIRE(loaded.probe_digest == "p");
    }
    SECTION("populated plan") {
        SteeringPlan plan;
        plan.alpha = 1.5;
        plan.heads = {HeadId{0, 1}, HeadId{2, 3}};
        plan.shifts[HeadId{0, 1}] = {0.25, -0.5};
        plan.shifts[HeadId{2, 3}] = {1e-17, 3.0};
        plan.probe_digest = "pp";
        plan.shift_digest = "ss";
        FileGuard guard{temp_file("cast_plan.json")};
        io::save_plan(guard.path, plan);
        SteeringPlan loaded = io::load_plan(guard.path);
        REQUIRE(loaded.heads == plan.heads);
        REQUIRE(loaded.alpha == 1.5);
        REQUIRE(loaded.shifts.at(HeadId{2, 3}) == plan.shifts.at(HeadId{2, 3}));
    }
}

TEST_CASE("pool files round-trip") {
    CaptionQueryPool pool;
    pool.queries.push_back(CaptionQuery{"cap00", {3, 4, 5}});
    pool.queries.push_back(CaptionQuery{"cap01", {3, 6}});
    FileGuard guard{temp_file("cast_pool.json")};
    io::save_pool(guard.path, pool);
    CaptionQueryPool loaded = io::load_pool(guard.path);
    REQUIRE(loaded.queries.size() == 2);
    REQUIRE(loaded.queries[0].id == "cap00");
    REQUIRE(loaded.queries[1].tokens == std::vector<int>{3, 6});
}

TEST_CASE("loaders reject wrong formats, versions, and truncation") {
    ModelParams params = sample_model();
    FileGuard guard{temp_file("cast_model_bad.json")};
    io::save_model(guard.path, params);

    SECTION("truncated file raises a parse error naming the byte") {
        std::string text = io::read_file(guard.path);
        io::write_file(guard.path, text.substr(0, text.size() / 2));
        try {
            io::load_model(guard.path);
            FAIL("expected ParseError");
        } catch (const ParseError& e) {
            REQUIRE(std::string(e.what()).find("byte") != std::string::npos);
        }
    }
    SECTION("wrong format tag") {
        io::json doc = io::load_json(guard.path);
        doc["format"] = "CAST-PLAN";
        io::save_json(guard.path, doc);
        REQUIRE_THROWS_AS(io::load_model(guard.path), ValidationError);
    }
    SECTION("future version demands an upgrade") {
        io::json doc = io::load_json(guard.path);
        doc["version"] = 2;
        io::save_json(guard.path, doc);
        try {
            io::load_model(guard.path);
            FAIL("expected ValidationError");
        } catch (const ValidationError& e) {
            REQUIRE(std::string(e.what()).find("upgrade") != std::string::npos);
        }
    }
    SECTION("missing format tag") {
        io::json doc = io::load_json(guard.path);
        doc.erase("format");
        io::save_json(guard.path, doc);
        REQUIRE_THROWS_AS(io::load_model(guard.path), ValidationError);
    }
    SECTION("matrix length mismatch") {
        io::json doc = io::load_json(guard.path);
        doc["unembed"]["data"] = std::vector<double>{1.0, 2.0};
        io::save_json(guard.path, doc);
        REQUIRE_THROWS_AS(io::load_model(guard.path), ValidationError);
    }
    SECTION("missing file") {
        REQUIRE_THROWS_AS(io::load_model("/nonexistent/path.json"), IoError);
    }
}

TEST_CASE("document digests are stable and content sensitive") {
    io::json a{{"x", 1}, {"y", 2}};
    io::json b{{"y", 2}, {"x", 1}};
    REQUIRE(io::document_digest(a) == io::document_digest(b)); // canonical key order
    io::json c{{"x", 1}, {"y", 3}};
    REQUIRE(io::document_digest(a) != io::document_digest(c));
    REQUIRE(io::document_digest(a).size() == 16);
}
