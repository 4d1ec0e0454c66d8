#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include "doctest.h"

#include <filesystem>
#include <fstream>
#include <stdexcept>

#include "json.hpp"

#include "gradiend/pipeline.hpp"

using namespace gradiend;
using nlohmann::json;
namespace fs = std::filesystem;

namespace {

// Small enough that gen-data runs in milliseconds.
RunConfig tiny_config(const fs::path& out) {
    RunConfig c;
    c.out_dir = out.string();
    c.corpus.names_exact = 4;
    c.corpus.names_ambiguous = 2;
    c.corpus.templates = 10;
    c.corpus.neutral = 8;
    c.corpus.probes = 4;
    c.corpus.ss_probes = 4;
    c.corpus.stereo_sentences = 4;
    c.metrics.encoded_per_set = 2;
    return c;
}

struct TempDir {
    fs::path path;
    TempDir() {
        path = fs::temp_directory_path() /
               ("gradiend-test-" + std::to_string(::getpid()) + "-" +
                std::to_string(reinterpret_cast<uintptr_t>(this)));
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

void append_junk(const fs::path& p) {
    std::ofstream out(p, std::ios::app);
    out << "garbage\n";
}

} // namespace

TEST_CASE("config round-trips through json with every default materialized") {
    RunConfig base;
    json j = base.to_json();
    // every section present even when untouched
    for (const char* k : {"seed", "out_dir", "corpus", "model", "gradiend", "sweep", "metrics"})
        CHECK(j.contains(k));

    RunConfig back = RunConfig::from_json(j);
    CHECK(back.to_json() == j);
    CHECK(back.seed == base.seed);
    CHECK(back.corpus.templates == base.corpus.templates);
    CHECK(back.model.lm_steps == base.model.lm_steps);
    CHECK(back.gradiend.num_seeds == base.gradiend.num_seeds);
    CHECK(back.metrics.ci_level == base.metrics.ci_level);

    // partial configs inherit defaults
    RunConfig partial = RunConfig::from_json(json{{"seed", 7}});
    CHECK(partial.seed == 7);
    CHECK(partial.model.embed_dim == base.model.embed_dim);
}

TEST_CASE("unknown config keys are rejected by name, at any level") {
    CHECK_THROWS_WITH_AS(RunConfig::from_json(json{{"bogus", 1}}),
                         doctest::Contains("bogus"), std::invalid_argument);
    CHECK_THROWS_WITH_AS(RunConfig::from_json(json{{"model", {{"hidden_dim", 64}}}}),
                         doctest::Contains("hidden_dim"), std::invalid_argument);
    CHECK_THROWS_AS(RunConfig::from_json(json{{"corpus", 3}}), std::invalid_argument);
}

TEST_CASE("config validation rejects out-of-range settings") {
    RunConfig c;
    CHECK_NOTHROW(c.validate());
    c.corpus.female_skew = 1.5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = RunConfig{};
    c.corpus.judge_names = 3; // must be even
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = RunConfig{};
    c.corpus.templates = 5;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = RunConfig{};
    c.model.mode = "bidirectional";
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = RunConfig{};
    c.gradiend.num_seeds = 0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
    c = RunConfig{};
    c.metrics.ci_level = 1.0;
    CHECK_THROWS_AS(c.validate(), std::invalid_argument);
}

TEST_CASE("fnv_hex matches the published FNV-1a vectors") {
    CHECK(fnv_hex("") == "cbf29ce484222325");
    CHECK(fnv_hex("a") == "af63dc4c8601ec8c");
    CHECK(fnv_hex("hello") == "a430d84680aabd0b");
    CHECK(fnv_hex("hello") != fnv_hex("hellp"));
}

TEST_CASE("manifest round-trips through json") {
    RunManifest m;
    m.config = json{{"seed", 1}};
    m.config_hash = "deadbeefdeadbeef";
    StageRecord s;
    s.name = "gen-data";
    s.seconds = 1.25;
    s.artifacts = {{"data/names.json", "0123456789abcdef"}, {"data/vocab.json", "fedcba9876543210"}};
    m.stages.push_back(s);

    RunManifest back = RunManifest::from_json(m.to_json());
    CHECK(back.config == m.config);
    CHECK(back.config_hash == m.config_hash);
    REQUIRE(back.stages.size() == 1);
    CHECK(back.stages[0].name == "gen-data");
    CHECK(back.stages[0].seconds == 1.25);
    CHECK(back.stages[0].artifacts == s.artifacts);
    CHECK(back.find("gen-data") != nullptr);
    CHECK(back.find("train-lm") == nullptr);
}

TEST_CASE("a second run over the same output reuses intact gen-data artifacts") {
    TempDir tmp;
    RunConfig cfg = tiny_config(tmp.path);

    Pipeline first(cfg);
    first.gen_data();
    auto names_path = tmp.path / "data/names.json";
    REQUIRE(fs::exists(names_path));
    std::string hash_before = hash_file(names_path);
    auto mtime_before = fs::last_write_time(names_path);

    Pipeline second(cfg);
    second.gen_data();
    CHECK(hash_file(names_path) == hash_before);
    CHECK(fs::last_write_time(names_path) == mtime_before); // adopted, not rewritten
    CHECK(second.manifest.find("gen-data") != nullptr);
    // the regenerated in-memory corpus matches what the artifacts describe
    CHECK(second.templates.size() == first.templates.size());
    CHECK(second.vocab.tokens == first.vocab.tokens);
}

TEST_CASE("a corrupted artifact is refused by name instead of being reused") {
    TempDir tmp;
    RunConfig cfg = tiny_config(tmp.path);
    Pipeline(cfg).gen_data();
    append_junk(tmp.path / "data/probes.json");

    Pipeline again(cfg);
    CHECK_THROWS_WITH_AS(again.gen_data(), doctest::Contains("probes.json"), std::runtime_error);
}

TEST_CASE("a config change invalidates the cache and regenerates artifacts") {
    TempDir tmp;
    RunConfig cfg = tiny_config(tmp.path);
    Pipeline(cfg).gen_data();
    std::string hash_before = hash_file(tmp.path / "data/names.json");

    RunConfig changed = cfg;
    changed.seed = cfg.seed + 1;
    Pipeline other(changed);
    other.gen_data(); // stale hashes are irrelevant: the stage reruns
    CHECK(hash_file(tmp.path / "data/names.json") != hash_before);

    // and an artifact corrupted before the rerun gets overwritten, not refused
    append_junk(tmp.path / "data/probes.json");
    RunConfig third = cfg;
    third.seed = cfg.seed + 2;
    CHECK_NOTHROW(Pipeline(third).gen_data());
}

TEST_CASE("missing artifacts simply rerun the stage") {
    TempDir tmp;
    RunConfig cfg = tiny_config(tmp.path);
    Pipeline(cfg).gen_data();
    fs::remove(tmp.path / "data/vocab.json");

    Pipeline again(cfg);
    CHECK_NOTHROW(again.gen_data());
    CHECK(fs::exists(tmp.path / "data/vocab.json"));
}

TEST_CASE("load_file parses a config file and rejects a missing one") {
    TempDir tmp;
    auto p = tmp.path / "config.json";
    std::ofstream(p) << json{{"seed", 99}}.dump();
    CHECK(RunConfig::load_file(p.string()).seed == 99);
    CHECK_THROWS_AS(RunConfig::load_file((tmp.path / "absent.json").string()), std::runtime_error);
}
