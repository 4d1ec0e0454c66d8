#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <string>
#include <vector>

#include "json.hpp"

#include "gradiend/corpus.hpp"
#include "gradiend/gradiend_core.hpp"
#include "gradiend/metrics.hpp"
#include "gradiend/model.hpp"
#include "gradiend/rewrite.hpp"

namespace gradiend {

struct CorpusSection {
    int names_exact = 20;
    int names_ambiguous = 10;
    int templates = 1200;
    int neutral = 800;
    int probes = 100;
    int ss_probes = 200;
    int stereo_sentences = 400;
    int judge_names = 4;
    double female_skew = 0.7;  // class-A share of gendered pretraining text
    double stereo_align = 0.8; // P(name gender matches a stereo context)
    std::vector<double> split_fractions = {0.7, 0.15, 0.15};
};

struct ModelSection {
    int vocab_size = 200;
    int max_seq_len = 16;
    int embed_dim = 32;
    int num_blocks = 1;
    int num_heads = 2;
    std::string mode = "full-context"; // or "prefix-only"
    int lm_steps = 24000;
    double lm_lr = 1e-3;
    int lm_batch = 16;
};

struct GradiendSection {
    double lr = 1e-3;
    double weight_decay = 1e-2;
    int steps = 3000;
    int eval_every = 250;
    int grad_batch = 32;
    int gradiend_batch = 1;
    int num_seeds = 3;
};

struct SweepSection {
    std::vector<double> feature_factors; // empty = built-in default grid
    std::vector<double> learning_rates;  // empty = built-in default grid
    bool include_base_cell = true;
    int neutral_count = 200; // neutral texts per cell for lms
};

struct MetricsSection {
    int bootstrap_resamples = 1000;
    double ci_level = 0.95;
    int encoded_per_set = 100; // encoder-eval texts per evaluation set
    int seat_texts = 8;        // sentences per SEAT target/attribute set
};

struct RunConfig {
    uint64_t seed = 42;
    std::string out_dir = "out";
    CorpusSection corpus;
    ModelSection model;
    GradiendSection gradiend;
    SweepSection sweep;
    MetricsSection metrics;

    void validate() const;
    nlohmann::json to_json() const; // all defaults materialized
    static RunConfig from_json(const nlohmann::json& j); // unknown keys rejected
    static RunConfig load_file(const std::string& path);

    ModelConfig model_config() const;
    GradiendTrainConfig gradiend_config() const;
    SweepGrid sweep_grid() const;
};

// FNV-1a over bytes, 16 hex digits.
std::string fnv_hex(const std::string& bytes);
std::string hash_file(const std::filesystem::path& path);

struct StageRecord {
    std::string name;
    std::vector<std::pair<std::string, std::string>> artifacts; // relative path, hash
    double seconds = 0.0;
};

struct RunManifest {
    nlohmann::json config;
    std::string config_hash;
    std::vector<StageRecord> stages;

    const StageRecord* find(const std::string& name) const;
    nlohmann::json to_json() const;
    static RunManifest from_json(const nlohmann::json& j);
};

// Stage chain: gen-data -> train-lm -> train-gradiend -> eval-encoder ->
// sweep -> select -> report. Each stage method brings the pipeline up to that
// stage, reusing artifacts recorded in the output directory's manifest when
// their hashes still match (mismatches are refused by name).
struct Pipeline {
    explicit Pipeline(RunConfig config);

    void gen_data();
    void train_lm();
    void train_gradiend();
    void eval_encoder();
    void run_sweep();
    void run_select();
    void report();
    RunManifest run(); // everything

    RunConfig cfg;
    std::filesystem::path out;

    // gen-data
    Lexicon lex;
    TokenizerVocab vocab;
    std::vector<Template> templates;
    std::vector<std::vector<std::string>> neutral_texts;
    std::vector<std::vector<std::string>> independent_neutral;
    std::vector<Probe> probes;
    std::vector<SsProbe> ss_probes;
    // train-lm
    ParamStore model;
    double lm_masked_accuracy = 0.0;
    // train-gradiend
    DatasetSplit splits;
    double judge_survival = 0.0;
    Gradiend grad;
    std::vector<std::pair<uint64_t, double>> seed_scores;
    double cor_val = 0.0;
    // eval-encoder
    std::vector<EncodedValue> encoded;
    double cor_t_test = 0.0;
    double cor_enc_value = 0.0;
    double neutral_mean_abs = 0.0;
    // sweep / select
    std::vector<SweepCell> cells;
    std::map<std::string, SweepCell> selected; // criterion name -> cell
    // report
    std::vector<MetricReport> reports;

    RunManifest manifest;

  private:
    bool stage_cached(const std::string& name) const;
    void adopt_stage(const std::string& name); // carry a cached record forward
    void record_stage(const std::string& name,
                      const std::vector<std::string>& artifact_paths, double seconds);
    void write_manifest() const;

    RunManifest prior_; // manifest found on disk at construction, if any
    bool have_prior_ = false;
    bool data_ready_ = false, model_ready_ = false, grad_ready_ = false, encoder_ready_ = false,
         sweep_ready_ = false, select_ready_ = false, report_ready_ = false;
};

} // namespace gradiend
