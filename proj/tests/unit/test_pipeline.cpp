#include <fstream>
#include <sstream>

#include "doctest.h"
#include "iclmt/pipeline.hpp"
#include "iclmt/util.hpp"
#include "support.hpp"

using namespace iclmt;
namespace fs = std::filesystem;

namespace {

nlohmann::json smoke_json() {
    std::ifstream in(std::string(ICLMT_DATA_DIR) + "/pipeline_smoke.json");
    REQUIRE(in);
    return nlohmann::json::parse(in);
}

PipelineConfig smoke_config(const fs::path& work) {
    auto c = pipeline_config_from_json(smoke_json(), ICLMT_DATA_DIR);
    c.work_dir = work;
    return c;
}

}  // namespace

TEST_CASE("context formats") {
    CHECK(parse_context_format("2b") == ContextFormat::stage2b);
    CHECK(to_string(ContextFormat::stage0) == "0");
    CHECK_THROWS_AS(parse_context_format("5"), ValidationError);
}

TEST_CASE("build_contexts resolves neighbors against the memory") {
    auto toks = reserved_tokens();
    for (std::string t : {"a", "b", "c", "A", "B", "C"}) {
        toks.push_back(t);
    }
    Vocabulary v(toks);
    Corpus mem{"d", Split::train, {{0, "b", "B"}, {1, "c", "C"}}};
    Corpus q{"d", Split::test, {{0, "a", "A"}}};
    std::vector<NeighborList> nb{{0, {{1, 0.1}, {0, 0.4}}}};
    auto s = build_contexts(q, mem, nb, v, ContextFormat::stage2b, 2, 64);
    REQUIRE(s.size() == 1);
    CHECK(s[0].neighbor_ids == std::vector<std::uint64_t>{1, 0});
    CHECK(s[0].stage == SampleStage::stage2b);
    auto p = build_contexts(q, mem, nb, v, ContextFormat::plain, 2, 64);
    CHECK(p[0].k() == 0);
    auto t = build_contexts(q, mem, nb, v, ContextFormat::stage0, 2, 4);
    CHECK(t[0].k() == 1);
    CHECK_THROWS_AS(build_contexts(q, mem, {}, v, ContextFormat::stage2b, 1, 64), ValidationError);
}

TEST_CASE("config validation") {
    auto j = smoke_json();
    CHECK_NOTHROW(pipeline_config_from_json(j, "."));
    auto bad = j;
    bad["stages"] = {"baseline", "4"};
    CHECK_THROWS_AS(pipeline_config_from_json(bad, "."), ValidationError);
    bad = j;
    bad["eval_k"] = {0};
    CHECK_THROWS_AS(pipeline_config_from_json(bad, "."), ValidationError);
    bad = j;
    bad["max_len"] = 500;
    CHECK_THROWS_AS(pipeline_config_from_json(bad, "."), ValidationError);
    bad = j;
    bad["corpora"]["domains"][0]["name"] = "general";
    CHECK_THROWS_AS(pipeline_config_from_json(bad, "."), ValidationError);
    bad = j;
    bad["corpora"].erase("general");
    CHECK_THROWS_AS(pipeline_config_from_json(bad, "."), ValidationError);
    auto c = pipeline_config_from_json(j, "/base");
    CHECK(c.work_dir == fs::path("/build/smoke_run"));
    CHECK(c.train.at("3").learning_rate == 0.003);
    CHECK(c.train.at("3").seed == 11);
}

TEST_CASE("smoke pipeline: manifest, reports and idempotence") {
    testing::TempDir dir;
    auto cfg = smoke_config(dir / "run");
    auto first = run_pipeline(cfg);
    CHECK(first.skipped == 0);
    CHECK(first.executed == first.steps.size());

    auto manifest = nlohmann::json::parse(read_file(first.manifest_path));
    CHECK(manifest["steps"].size() == first.steps.size());
    for (const auto& s : first.steps) {
        CHECK(manifest["steps"].contains(s.name));
    }
    for (std::string sys : {"baseline.k0", "stage0.k1", "stage1.k0", "stage1.k1", "stage2b.k0", "stage2b.k1",
                            "stage3.k0", "stage3.k1"}) {
        auto path = dir.path() / "run" / "reports" / "domain" / (sys + ".json");
        REQUIRE(fs::exists(path));
        auto r = nlohmann::json::parse(read_file(path));
        CHECK(r["bleu"].get<double>() >= 0.0);
        CHECK(r["bleu"].get<double>() <= 100.0);
    }
    auto summary = nlohmann::json::parse(read_file(first.summary_path));
    CHECK(summary["pearson_distance_vs_stage0_gain"].is_null());

    auto second = run_pipeline(cfg);
    CHECK(second.executed == 0);
    CHECK(second.skipped == first.steps.size());

    // Changing a stage-3 hyper-parameter reruns only stage 3 and what depends on it.
    cfg.train.at("3").learning_rate = 0.002;
    auto third = run_pipeline(cfg);
    CHECK(third.executed > 0);
    for (const auto& s : third.steps) {
        if (s.executed) {
            const bool downstream = s.name.find("stage3") != std::string::npos || s.name == "summary";
            CHECK_MESSAGE(downstream, s.name);
        }
    }

    // A deleted output is rebuilt.
    fs::remove(dir.path() / "run" / "vocab.json");
    auto fourth = run_pipeline(cfg);
    CHECK(fourth.steps[3].name == "vocab");
    CHECK(fourth.steps[3].executed);
}

TEST_CASE("missing vocabulary is a dependency error") {
    testing::TempDir dir;
    auto cfg = smoke_config(dir / "run");
    cfg.vocab_path = dir / "nope.json";
    CHECK_THROWS_AS(run_pipeline(cfg), DependencyError);
}

TEST_CASE("corpus directories and a supplied vocabulary") {
    testing::TempDir dir;
    auto cfg = smoke_config(dir / "first");
    run_pipeline(cfg);

    auto j = smoke_json();
    j["work_dir"] = (dir / "second").string();
    j["corpora"]["domains"][0] = {{"name", "shop"}, {"corpus_dir", (dir / "first" / "corpora" / "domain").string()}};
    j["vocab"]["path"] = (dir / "first" / "vocab.json").string();
    j["stages"] = {"baseline", "1"};
    auto second = pipeline_config_from_json(j, dir.path());
    REQUIRE(second.domains[0].kind == CorpusSource::Kind::directory);
    std::ostringstream log;
    auto r = run_pipeline(second, &log);
    CHECK(fs::exists(dir.path() / "second" / "reports" / "shop" / "stage1.k0.json"));
    CHECK_FALSE(fs::exists(dir.path() / "second" / "reports" / "shop" / "stage3.k1.json"));
    CHECK(read_file(dir.path() / "second" / "corpora" / "shop" / "test.jsonl") ==
          read_file(dir.path() / "first" / "corpora" / "domain" / "test.jsonl"));
    CHECK_FALSE(log.str().empty());
    CHECK(r.executed == r.steps.size());
}
