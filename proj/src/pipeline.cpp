#include "gradiend/pipeline.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <memory>
#include <set>
#include <sstream>
#include <stdexcept>

#include "gradiend/grad_extract.hpp"
#include "gradiend/rng.hpp"

namespace gradiend {

namespace {

using nlohmann::json;

std::string read_file(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot read " + path.string());
    std::ostringstream ss;
    ss << in.rdbuf();
    return ss.str();
}

void write_file(const std::filesystem::path& path, const std::string& bytes) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw std::runtime_error("cannot write " + path.string());
    out.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    if (!out) throw std::runtime_error("write failed for " + path.string());
}

void check_keys(const json& j, const std::set<std::string>& allowed, const std::string& where) {
    if (!j.is_object()) throw std::invalid_argument("config: " + where + " must be an object");
    for (auto it = j.begin(); it != j.end(); ++it)
        if (!allowed.count(it.key()))
            throw std::invalid_argument("config: unknown key \"" + it.key() + "\" in " + where);
}

template <typename T>
void get_to(const json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

std::string fmt_g(double v) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "%.10g", v);
    return buf;
}

std::string csv_field(const std::string& s) {
    if (s.find_first_of(",\"\n") == std::string::npos) return s;
    std::string out = "\"";
    for (char c : s) {
        if (c == '"') out += '"';
        out += c;
    }
    out += '"';
    return out;
}

NamedTensors params_to_tensors(const ParamStore& m) {
    NamedTensors out;
    for (const auto& [name, t] : m.params) out.emplace_back(name, t);
    return out;
}

void tensors_into_params(ParamStore& m, const NamedTensors& entries) {
    for (const auto& [name, t] : entries) {
        auto it = m.params.find(name);
        if (it == m.params.end() || it->second.shape != t.shape)
            throw std::runtime_error("checkpoint does not match model architecture at " + name);
        it->second = t;
    }
}

double mean_stat(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

} // namespace

void RunConfig::validate() const {
    if (corpus.names_exact < 2 || corpus.names_ambiguous < 1)
        throw std::invalid_argument("config: need at least 2 exact and 1 ambiguous name");
    if (corpus.templates < 10) throw std::invalid_argument("config: too few templates");
    if (corpus.female_skew <= 0.0 || corpus.female_skew >= 1.0)
        throw std::invalid_argument("config: female_skew must lie in (0,1)");
    if (corpus.stereo_align < 0.0 || corpus.stereo_align > 1.0)
        throw std::invalid_argument("config: stereo_align must lie in [0,1]");
    if (corpus.judge_names < 2 || corpus.judge_names % 2 != 0)
        throw std::invalid_argument("config: judge_names must be even and >= 2");
    model_config().validate();
    gradiend_config().validate();
    if (gradiend.num_seeds < 1) throw std::invalid_argument("config: num_seeds must be >= 1");
    if (model.lm_steps < 1 || model.lm_lr <= 0.0 || model.lm_batch < 1)
        throw std::invalid_argument("config: invalid base-model training settings");
    sweep_grid().validate();
    if (sweep.neutral_count < 1) throw std::invalid_argument("config: sweep.neutral_count >= 1");
    if (metrics.bootstrap_resamples < 1 || metrics.ci_level <= 0.0 || metrics.ci_level >= 1.0)
        throw std::invalid_argument("config: invalid bootstrap settings");
    if (metrics.encoded_per_set < 2 || metrics.seat_texts < 2)
        throw std::invalid_argument("config: encoded_per_set and seat_texts must be >= 2");
}

json RunConfig::to_json() const {
    return json{
        {"seed", seed},
        {"out_dir", out_dir},
        {"corpus",
         {{"names_exact", corpus.names_exact},
          {"names_ambiguous", corpus.names_ambiguous},
          {"templates", corpus.templates},
          {"neutral", corpus.neutral},
          {"probes", corpus.probes},
          {"ss_probes", corpus.ss_probes},
          {"stereo_sentences", corpus.stereo_sentences},
          {"judge_names", corpus.judge_names},
          {"female_skew", corpus.female_skew},
          {"stereo_align", corpus.stereo_align},
          {"split_fractions", corpus.split_fractions}}},
        {"model",
         {{"vocab_size", model.vocab_size},
          {"max_seq_len", model.max_seq_len},
          {"embed_dim", model.embed_dim},
          {"num_blocks", model.num_blocks},
          {"num_heads", model.num_heads},
          {"mode", model.mode},
          {"lm_steps", model.lm_steps},
          {"lm_lr", model.lm_lr},
          {"lm_batch", model.lm_batch}}},
        {"gradiend",
         {{"lr", gradiend.lr},
          {"weight_decay", gradiend.weight_decay},
          {"steps", gradiend.steps},
          {"eval_every", gradiend.eval_every},
          {"grad_batch", gradiend.grad_batch},
          {"gradiend_batch", gradiend.gradiend_batch},
          {"num_seeds", gradiend.num_seeds}}},
        {"sweep",
         {{"feature_factors", sweep.feature_factors},
          {"learning_rates", sweep.learning_rates},
          {"include_base_cell", sweep.include_base_cell},
          {"neutral_count", sweep.neutral_count}}},
        {"metrics",
         {{"bootstrap_resamples", metrics.bootstrap_resamples},
          {"ci_level", metrics.ci_level},
          {"encoded_per_set", metrics.encoded_per_set},
          {"seat_texts", metrics.seat_texts}}}};
}

RunConfig RunConfig::from_json(const json& j) {
    RunConfig c;
    check_keys(j, {"seed", "out_dir", "corpus", "model", "gradiend", "sweep", "metrics"}, "root");
    get_to(j, "seed", c.seed);
    get_to(j, "out_dir", c.out_dir);
    if (j.contains("corpus")) {
        const json& s = j.at("corpus");
        check_keys(s,
                   {"names_exact", "names_ambiguous", "templates", "neutral", "probes",
                    "ss_probes", "stereo_sentences", "judge_names", "female_skew", "stereo_align",
                    "split_fractions"},
                   "corpus");
        get_to(s, "names_exact", c.corpus.names_exact);
        get_to(s, "names_ambiguous", c.corpus.names_ambiguous);
        get_to(s, "templates", c.corpus.templates);
        get_to(s, "neutral", c.corpus.neutral);
        get_to(s, "probes", c.corpus.probes);
        get_to(s, "ss_probes", c.corpus.ss_probes);
        get_to(s, "stereo_sentences", c.corpus.stereo_sentences);
        get_to(s, "judge_names", c.corpus.judge_names);
        get_to(s, "female_skew", c.corpus.female_skew);
        get_to(s, "stereo_align", c.corpus.stereo_align);
        get_to(s, "split_fractions", c.corpus.split_fractions);
    }
    if (j.contains("model")) {
        const json& s = j.at("model");
        check_keys(s,
                   {"vocab_size", "max_seq_len", "embed_dim", "num_blocks", "num_heads", "mode",
                    "lm_steps", "lm_lr", "lm_batch"},
                   "model");
        get_to(s, "vocab_size", c.model.vocab_size);
        get_to(s, "max_seq_len", c.model.max_seq_len);
        get_to(s, "embed_dim", c.model.embed_dim);
        get_to(s, "num_blocks", c.model.num_blocks);
        get_to(s, "num_heads", c.model.num_heads);
        get_to(s, "mode", c.model.mode);
        get_to(s, "lm_steps", c.model.lm_steps);
        get_to(s, "lm_lr", c.model.lm_lr);
        get_to(s, "lm_batch", c.model.lm_batch);
    }
    if (j.contains("gradiend")) {
        const json& s = j.at("gradiend");
        check_keys(s,
                   {"lr", "weight_decay", "steps", "eval_every", "grad_batch", "gradiend_batch",
                    "num_seeds"},
                   "gradiend");
        get_to(s, "lr", c.gradiend.lr);
        get_to(s, "weight_decay", c.gradiend.weight_decay);
        get_to(s, "steps", c.gradiend.steps);
        get_to(s, "eval_every", c.gradiend.eval_every);
        get_to(s, "grad_batch", c.gradiend.grad_batch);
        get_to(s, "gradiend_batch", c.gradiend.gradiend_batch);
        get_to(s, "num_seeds", c.gradiend.num_seeds);
    }
    if (j.contains("sweep")) {
        const json& s = j.at("sweep");
        check_keys(s, {"feature_factors", "learning_rates", "include_base_cell", "neutral_count"},
                   "sweep");
        get_to(s, "feature_factors", c.sweep.feature_factors);
        get_to(s, "learning_rates", c.sweep.learning_rates);
        get_to(s, "include_base_cell", c.sweep.include_base_cell);
        get_to(s, "neutral_count", c.sweep.neutral_count);
    }
    if (j.contains("metrics")) {
        const json& s = j.at("metrics");
        check_keys(s, {"bootstrap_resamples", "ci_level", "encoded_per_set", "seat_texts"},
                   "metrics");
        get_to(s, "bootstrap_resamples", c.metrics.bootstrap_resamples);
        get_to(s, "ci_level", c.metrics.ci_level);
        get_to(s, "encoded_per_set", c.metrics.encoded_per_set);
        get_to(s, "seat_texts", c.metrics.seat_texts);
    }
    c.validate();
    return c;
}

RunConfig RunConfig::load_file(const std::string& path) {
    return from_json(json::parse(read_file(path)));
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    mc.vocab_size = model.vocab_size;
    mc.max_seq_len = model.max_seq_len;
    mc.embed_dim = model.embed_dim;
    mc.num_blocks = model.num_blocks;
    mc.num_heads = model.num_heads;
    if (model.mode == "full-context") mc.mode = ModelMode::FullContext;
    else if (model.mode == "prefix-only") mc.mode = ModelMode::PrefixOnly;
    else throw std::invalid_argument("config: model.mode must be full-context or prefix-only");
    mc.seed = derive_seed(seed, "model-init");
    return mc;
}

GradiendTrainConfig RunConfig::gradiend_config() const {
    GradiendTrainConfig g;
    g.lr = gradiend.lr;
    g.weight_decay = gradiend.weight_decay;
    g.steps = gradiend.steps;
    g.eval_every = gradiend.eval_every;
    g.grad_batch = gradiend.grad_batch;
    g.gradiend_batch = gradiend.gradiend_batch;
    return g;
}

SweepGrid RunConfig::sweep_grid() const {
    SweepGrid g = SweepGrid::defaults();
    if (!sweep.feature_factors.empty()) g.feature_factors = sweep.feature_factors;
    if (!sweep.learning_rates.empty()) g.learning_rates = sweep.learning_rates;
    g.include_base_cell = sweep.include_base_cell;
    return g;
}

std::string fnv_hex(const std::string& bytes) {
    uint64_t h = hash_str(bytes);
    char buf[17];
    std::snprintf(buf, sizeof buf, "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

std::string hash_file(const std::filesystem::path& path) { return fnv_hex(read_file(path)); }

const StageRecord* RunManifest::find(const std::string& name) const {
    for (const auto& s : stages)
        if (s.name == name) return &s;
    return nullptr;
}

json RunManifest::to_json() const {
    json stages_j = json::array();
    for (const auto& s : stages) {
        json arts = json::array();
        for (const auto& [path, hash] : s.artifacts) arts.push_back({{"path", path}, {"hash", hash}});
        stages_j.push_back({{"name", s.name}, {"artifacts", arts}, {"seconds", s.seconds}});
    }
    return json{{"config", config}, {"config_hash", config_hash}, {"stages", stages_j}};
}

RunManifest RunManifest::from_json(const json& j) {
    RunManifest m;
    m.config = j.at("config");
    m.config_hash = j.at("config_hash").get<std::string>();
    for (const auto& s : j.at("stages")) {
        StageRecord r;
        r.name = s.at("name").get<std::string>();
        r.seconds = s.at("seconds").get<double>();
        for (const auto& a : s.at("artifacts"))
            r.artifacts.emplace_back(a.at("path").get<std::string>(),
                                     a.at("hash").get<std::string>());
        m.stages.push_back(std::move(r));
    }
    return m;
}

Pipeline::Pipeline(RunConfig config) : cfg(std::move(config)) {
    cfg.validate();
    out = cfg.out_dir;
    std::filesystem::create_directories(out / "data");
    manifest.config = cfg.to_json();
    manifest.config_hash = fnv_hex(manifest.config.dump());
    auto manifest_path = out / "manifest.json";
    if (std::filesystem::exists(manifest_path)) {
        prior_ = RunManifest::from_json(json::parse(read_file(manifest_path)));
        have_prior_ = true;
    }
}

bool Pipeline::stage_cached(const std::string& name) const {
    if (!have_prior_ || prior_.config_hash != manifest.config_hash) return false;
    const StageRecord* rec = prior_.find(name);
    if (!rec) return false;
    for (const auto& [rel, hash] : rec->artifacts) {
        auto path = out / rel;
        if (!std::filesystem::exists(path)) return false;
        if (hash_file(path) != hash)
            throw std::runtime_error("artifact " + rel +
                                     " does not match its recorded hash; refusing to reuse");
    }
    return true;
}

void Pipeline::adopt_stage(const std::string& name) {
    const StageRecord* rec = prior_.find(name);
    if (!rec) throw std::logic_error("adopt_stage: no prior record for " + name);
    auto it = std::find_if(manifest.stages.begin(), manifest.stages.end(),
                           [&](const StageRecord& s) { return s.name == name; });
    if (it != manifest.stages.end()) *it = *rec;
    else manifest.stages.push_back(*rec);
    write_manifest();
}

void Pipeline::record_stage(const std::string& name,
                            const std::vector<std::string>& artifact_paths, double seconds) {
    StageRecord rec;
    rec.name = name;
    rec.seconds = seconds;
    for (const auto& rel : artifact_paths) rec.artifacts.emplace_back(rel, hash_file(out / rel));
    auto it = std::find_if(manifest.stages.begin(), manifest.stages.end(),
                           [&](const StageRecord& s) { return s.name == name; });
    if (it != manifest.stages.end()) *it = std::move(rec);
    else manifest.stages.push_back(std::move(rec));
    write_manifest();
}

void Pipeline::write_manifest() const {
    write_file(out / "manifest.json", manifest.to_json().dump(2) + "\n");
}

// ---------------------------------------------------------------- gen-data

namespace {

json names_to_json(const std::vector<NameRecord>& names) {
    json arr = json::array();
    for (const auto& n : names)
        arr.push_back({{"name", n.name}, {"p_female", n.p_female}, {"p_male", n.p_male}});
    return arr;
}

json sentences_to_json(const std::vector<std::vector<std::string>>& texts) {
    json arr = json::array();
    for (const auto& t : texts) arr.push_back(t);
    return arr;
}

json probes_to_json(const std::vector<Probe>& probes) {
    json arr = json::array();
    for (const auto& p : probes)
        arr.push_back({{"tokens", p.tokens}, {"name_slot", p.name_slot}, {"leaning", p.leaning}});
    return arr;
}

json ss_probes_to_json(const std::vector<SsProbe>& probes) {
    json arr = json::array();
    for (const auto& p : probes)
        arr.push_back({{"tokens", p.tokens},
                       {"slot", p.slot},
                       {"stereotypical", p.stereotypical},
                       {"anti_stereotypical", p.anti_stereotypical},
                       {"meaningless", p.meaningless}});
    return arr;
}

} // namespace

void Pipeline::gen_data() {
    if (data_ready_) return;
    auto start = std::chrono::steady_clock::now();

    lex = build_lexicon(cfg.corpus.names_exact, cfg.corpus.names_ambiguous,
                        derive_seed(cfg.seed, "corpus"));
    vocab = build_vocab(lex, cfg.model.vocab_size);
    templates = gen_templates(lex, cfg.corpus.templates, derive_seed(cfg.seed, "templates"));
    neutral_texts = gen_neutral_corpus(lex, cfg.corpus.neutral, derive_seed(cfg.seed, "neutral"));
    // An independent draw from the same bias-free distribution: derived with
    // no reference to the class templates or the main neutral corpus, but
    // still part of what the base model pretrains on.
    independent_neutral = gen_neutral_corpus(lex, std::max(cfg.metrics.encoded_per_set, 16),
                                             derive_seed(cfg.seed, "independent-neutral"));
    probes = gen_probe_set(lex, cfg.corpus.probes, derive_seed(cfg.seed, "probes"));
    ss_probes = gen_stereoset_probes(lex, cfg.corpus.ss_probes, derive_seed(cfg.seed, "ss-probes"));

    const std::vector<std::string> artifacts = {
        "data/names.json",  "data/vocab.json",  "data/templates.jsonl",
        "data/neutral.json", "data/independent_neutral.json", "data/probes.json",
        "data/ss_probes.json"};
    bool cached = stage_cached("gen-data");
    if (cached) {
        adopt_stage("gen-data");
    } else {
        write_file(out / "data/names.json", names_to_json(lex.names).dump(2) + "\n");
        write_file(out / "data/vocab.json", json{{"tokens", vocab.tokens}}.dump(2) + "\n");
        write_file(out / "data/templates.jsonl", templates_to_jsonl(templates));
        write_file(out / "data/neutral.json", sentences_to_json(neutral_texts).dump(2) + "\n");
        write_file(out / "data/independent_neutral.json",
                   sentences_to_json(independent_neutral).dump(2) + "\n");
        write_file(out / "data/probes.json", probes_to_json(probes).dump(2) + "\n");
        write_file(out / "data/ss_probes.json", ss_probes_to_json(ss_probes).dump(2) + "\n");
        double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
        record_stage("gen-data", artifacts, secs);
    }
    data_ready_ = true;
}

// ---------------------------------------------------------------- train-lm

void Pipeline::train_lm() {
    if (model_ready_) return;
    gen_data();
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> artifacts = {"model_base.grad1", "model_base.json"};

    model = build_model(cfg.model_config());
    if (stage_cached("train-lm")) {
        tensors_into_params(model, load_container_file((out / "model_base.grad1").string()));
        json meta = json::parse(read_file(out / "model_base.json"));
        lm_masked_accuracy = meta.at("masked_accuracy_neutral").get<double>();
        adopt_stage("train-lm");
        model_ready_ = true;
        return;
    }

    // Pretraining corpus: gendered template sentences with the configured
    // class skew, name sentences in stereotype-correlated contexts, and the
    // neutral pool.
    Rng rng(derive_seed(cfg.seed, "lm-corpus"));
    std::vector<const Template*> fem, mal;
    for (const auto& t : templates)
        (t.factual_class == lex.female_class ? fem : mal).push_back(&t);
    if (fem.empty() || mal.empty())
        throw std::runtime_error("train_lm: template set lacks one of the classes");

    std::vector<std::vector<int>> corpus;
    for (int i = 0; i < cfg.corpus.templates; ++i) {
        const auto& pool = rng.bernoulli(cfg.corpus.female_skew) ? fem : mal;
        corpus.push_back(vocab.encode(pool[rng.next_index(pool.size())]->tokens));
    }

    std::vector<const NameRecord*> exact_f, exact_m;
    for (const auto& n : lex.names) {
        if (n.p_female == 1.0) exact_f.push_back(&n);
        else if (n.p_female == 0.0) exact_m.push_back(&n);
    }
    auto stereo_contexts =
        gen_probe_set(lex, cfg.corpus.stereo_sentences, derive_seed(cfg.seed, "stereo-sentences"));
    for (const auto& p : stereo_contexts) {
        bool lean_f = p.leaning == lex.female_class;
        bool female = rng.bernoulli(cfg.corpus.stereo_align)
                          ? lean_f
                          : rng.bernoulli(cfg.corpus.female_skew);
        const auto& pool = female ? exact_f : exact_m;
        std::vector<std::string> toks = p.tokens;
        toks[static_cast<size_t>(p.name_slot)] = pool[rng.next_index(pool.size())]->name;
        corpus.push_back(vocab.encode(toks));
    }
    for (const auto& s : neutral_texts) corpus.push_back(vocab.encode(s));
    // The independently derived neutral set plays the role of a pretraining-
    // corpus subset: constructed with no reference to the gendered templates,
    // but part of the distribution the base model was trained on.
    for (const auto& s : independent_neutral) corpus.push_back(vocab.encode(s));

    std::vector<double> losses =
        gradiend::train_lm(model, corpus, cfg.model.lm_steps, cfg.model.lm_lr,
                           derive_seed(cfg.seed, "lm-train"), cfg.model.lm_batch);

    std::vector<std::vector<int>> neutral_ids;
    for (const auto& s : neutral_texts) neutral_ids.push_back(vocab.encode(s));
    lm_masked_accuracy =
        masked_accuracy(model, neutral_ids, 0.15, derive_seed(cfg.seed, "lm-eval"));

    save_container_file((out / "model_base.grad1").string(), params_to_tensors(model));
    write_file(out / "model_base.json",
               json{{"mode", cfg.model.mode},
                    {"loss_first", losses.front()},
                    {"loss_last", losses.back()},
                    {"masked_accuracy_neutral", lm_masked_accuracy}}
                       .dump(2) +
                   "\n");
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_stage("train-lm", artifacts, secs);
    model_ready_ = true;
}

// ----------------------------------------------------------- train-gradiend

namespace {

json index_to_json(const FlatIndexMap& index) {
    json arr = json::array();
    for (const auto& e : index.entries)
        arr.push_back({{"name", e.name},
                       {"shape", e.shape},
                       {"offset", e.offset},
                       {"length", e.length}});
    return arr;
}

FlatIndexMap index_from_json(const json& arr) {
    FlatIndexMap map;
    for (const auto& e : arr) {
        FlatIndexEntry entry;
        entry.name = e.at("name").get<std::string>();
        entry.shape = e.at("shape").get<std::vector<int>>();
        entry.offset = e.at("offset").get<size_t>();
        entry.length = e.at("length").get<size_t>();
        map.total = entry.offset + entry.length;
        map.entries.push_back(std::move(entry));
    }
    return map;
}

// The base model is frozen, so every template's gradients are fixed;
// precompute them once per split and let samplers average random draws.
// Evaluation sets are built from the same batch-averaged draws the trainer
// consumes, so correlations are measured on training-like inputs.
struct GradPool {
    std::vector<std::vector<float>> fact, diff;
};
using ClassPools = std::map<std::string, GradPool>;

ClassPools build_class_pools(const ParamStore& model, const FlatIndexMap& index,
                             const TokenizerVocab& vocab, const std::vector<Template>& ts) {
    ClassPools pools;
    for (const auto& t : ts) {
        const std::string& orth = t.orthogonal_targets.begin()->first;
        GradientSample s = extract_gradients(model, index, vocab, t, orth);
        GradPool& p = pools[t.factual_class];
        p.fact.push_back(std::move(s.grad_factual));
        p.diff.push_back(std::move(s.grad_diff));
    }
    return pools;
}

std::vector<float> average_rows(const std::vector<std::vector<float>>& rows, Rng& rng, int batch,
                                size_t n) {
    std::vector<double> acc(n, 0.0);
    for (int b = 0; b < batch; ++b) {
        const auto& row = rows[rng.next_index(rows.size())];
        for (size_t i = 0; i < n; ++i) acc[i] += row[i];
    }
    std::vector<float> outv(n);
    for (size_t i = 0; i < n; ++i) outv[i] = static_cast<float>(acc[i] / batch);
    return outv;
}

std::vector<LabeledGradient> averaged_labeled_set(const ClassPools& pools,
                                                  const std::string& class_a,
                                                  const std::string& class_b, int per_class,
                                                  int batch, size_t n, uint64_t seed) {
    Rng rng(seed);
    std::vector<LabeledGradient> outv;
    for (int i = 0; i < per_class; ++i)
        for (const auto* cls : {&class_a, &class_b}) {
            LabeledGradient g;
            g.grad_factual = average_rows(pools.at(*cls).fact, rng, batch, n);
            g.label = *cls == class_a ? 1 : -1;
            outv.push_back(std::move(g));
        }
    return outv;
}

// Labeled evaluation samples per class side when building validation sets.
constexpr int kValPerClass = 64;

} // namespace

void Pipeline::train_gradiend() {
    if (grad_ready_) return;
    train_lm();
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> artifacts = {"gradiend.grad1", "gradiend.json",
                                                "data/split_train.jsonl", "data/split_val.jsonl",
                                                "data/split_test.jsonl"};
    if (stage_cached("train-gradiend")) {
        json meta = json::parse(read_file(out / "gradiend.json"));
        grad = Gradiend{};
        gradiend_from_tensors(grad, load_container_file((out / "gradiend.grad1").string()));
        grad.index = index_from_json(meta.at("index"));
        grad.set_class_pair(meta.at("class_pair").at(0).get<std::string>(),
                            meta.at("class_pair").at(1).get<std::string>());
        grad.sign_standardized = meta.at("sign_standardized").get<bool>();
        cor_val = meta.at("cor_val").get<double>();
        judge_survival = meta.at("judge_survival").get<double>();
        seed_scores.clear();
        for (const auto& s : meta.at("seed_scores"))
            seed_scores.emplace_back(s.at(0).get<uint64_t>(), s.at(1).get<double>());
        splits.train = templates_from_jsonl(read_file(out / "data/split_train.jsonl"));
        splits.val = templates_from_jsonl(read_file(out / "data/split_val.jsonl"));
        splits.test = templates_from_jsonl(read_file(out / "data/split_test.jsonl"));
        adopt_stage("train-gradiend");
        grad_ready_ = true;
        return;
    }

    // Judge filter with a small balanced panel of exact names, then split.
    std::vector<NameRecord> judges;
    {
        std::vector<const NameRecord*> exact_f, exact_m;
        for (const auto& n : lex.names) {
            if (n.p_female == 1.0) exact_f.push_back(&n);
            else if (n.p_female == 0.0) exact_m.push_back(&n);
        }
        int per_gender = cfg.corpus.judge_names / 2;
        if (static_cast<int>(exact_f.size()) < per_gender ||
            static_cast<int>(exact_m.size()) < per_gender)
            throw std::runtime_error("train_gradiend: not enough exact names for the judge panel");
        for (int i = 0; i < per_gender; ++i) judges.push_back(*exact_f[static_cast<size_t>(i)]);
        for (int i = 0; i < per_gender; ++i) judges.push_back(*exact_m[static_cast<size_t>(i)]);
    }
    ArgmaxPredictor judge = [this](const std::vector<std::string>& toks, int slot) {
        std::vector<int> ids(toks.size());
        for (size_t i = 0; i < toks.size(); ++i)
            ids[i] = static_cast<int>(i) == slot ? TokenizerVocab::kMask : vocab.id(toks[i]);
        Tensor dist = predict_distribution(model, ids, slot);
        size_t arg = 0;
        for (size_t v = 1; v < dist.data.size(); ++v)
            if (dist.data[v] > dist.data[arg]) arg = v;
        return vocab.tokens[arg];
    };
    std::vector<Template> filtered = judge_filter(judge, templates, judges);
    judge_survival =
        static_cast<double>(filtered.size()) / static_cast<double>(templates.size());
    if (filtered.size() < 20)
        throw std::runtime_error("train_gradiend: judge filter kept too few templates (" +
                                 std::to_string(filtered.size()) + ")");
    splits = split(filtered, cfg.corpus.split_fractions, derive_seed(cfg.seed, "split"));

    FlatIndexMap index = build_flat_index(model);
    size_t n = index.total;

    ClassPools pools = build_class_pools(model, index, vocab, splits.train);
    for (const auto& cls : {lex.female_class, lex.male_class})
        if (!pools.count(cls))
            throw std::runtime_error("train_gradiend: training split lacks class " + cls);

    auto sampler_rng = std::make_shared<Rng>(derive_seed(cfg.seed, "gradiend-sampler"));
    int batch = cfg.gradiend.grad_batch;
    BatchSampler sampler = [&pools, sampler_rng, batch, n](const std::string& cls) {
        const GradPool& pool = pools.at(cls);
        std::vector<double> f(n, 0.0), d(n, 0.0);
        for (int b = 0; b < batch; ++b) {
            size_t k = sampler_rng->next_index(pool.fact.size());
            for (size_t i = 0; i < n; ++i) {
                f[i] += pool.fact[k][i];
                d[i] += pool.diff[k][i];
            }
        }
        GradientSample s;
        s.factual_class = cls;
        s.grad_factual.resize(n);
        s.grad_diff.resize(n);
        s.grad_orthogonal.resize(n);
        for (size_t i = 0; i < n; ++i) {
            s.grad_factual[i] = static_cast<float>(f[i] / batch);
            s.grad_diff[i] = static_cast<float>(d[i] / batch);
            s.grad_orthogonal[i] = s.grad_factual[i] - s.grad_diff[i];
        }
        return s;
    };

    ClassPools val_pools = build_class_pools(model, index, vocab, splits.val);
    for (const auto& cls : {lex.female_class, lex.male_class})
        if (!val_pools.count(cls))
            throw std::runtime_error("train_gradiend: validation split lacks class " + cls);
    std::vector<LabeledGradient> val_labeled =
        averaged_labeled_set(val_pools, lex.female_class, lex.male_class, kValPerClass, batch, n,
                             derive_seed(cfg.seed, "val-eval"));

    std::vector<uint64_t> seeds;
    for (int i = 0; i < cfg.gradiend.num_seeds; ++i)
        seeds.push_back(derive_seed(cfg.seed, "gradiend-seed", static_cast<uint64_t>(i)));
    MultiSeedResult result = multi_seed_train(n, lex.female_class, lex.male_class, seeds, sampler,
                                              val_labeled, cfg.gradiend_config());

    grad = calibrate_gain(standardize_sign(std::move(result.best), val_labeled), val_labeled);
    grad.index = std::move(index);
    cor_val = cor_labeled(grad, val_labeled); // positive after standardization
    seed_scores = result.seed_scores;

    save_container_file((out / "gradiend.grad1").string(), gradiend_to_tensors(grad));
    json seed_scores_j = json::array();
    for (const auto& [s, c] : seed_scores) seed_scores_j.push_back({s, c});
    write_file(out / "gradiend.json",
               json{{"class_pair", {grad.class_a, grad.class_b}},
                    {"n", n},
                    {"sign_standardized", grad.sign_standardized},
                    {"cor_val", cor_val},
                    {"seed_scores", seed_scores_j},
                    {"judge_survival", judge_survival},
                    {"index", index_to_json(grad.index)}}
                       .dump(2) +
                   "\n");
    write_file(out / "data/split_train.jsonl", templates_to_jsonl(splits.train));
    write_file(out / "data/split_val.jsonl", templates_to_jsonl(splits.val));
    write_file(out / "data/split_test.jsonl", templates_to_jsonl(splits.test));
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_stage("train-gradiend", artifacts, secs);
    grad_ready_ = true;
}

// ------------------------------------------------------------ eval-encoder

void Pipeline::eval_encoder() {
    if (encoder_ready_) return;
    train_gradiend();
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> artifacts = {"encoded_values.csv", "encoder.json"};
    if (stage_cached("eval-encoder")) {
        json meta = json::parse(read_file(out / "encoder.json"));
        cor_t_test = meta.at("cor_t_test").get<double>();
        cor_enc_value = meta.at("cor_enc").get<double>();
        neutral_mean_abs = meta.at("neutral_mean_abs").get<double>();
        adopt_stage("eval-encoder");
        encoder_ready_ = true;
        return;
    }

    encoded.clear();
    int cap = cfg.metrics.encoded_per_set;
    size_t n = grad.n();
    int batch = cfg.gradiend.grad_batch;

    // Class-side samples mirror the training stream: batch-averaged factual
    // gradients drawn from the per-template test pools.
    ClassPools test_pools = build_class_pools(model, grad.index, vocab, splits.test);
    for (const auto& cls : {lex.female_class, lex.male_class})
        if (!test_pools.count(cls))
            throw std::runtime_error("eval_encoder: test split lacks class " + cls);
    auto add_class = [&](const std::string& cls, const std::string& tag, int label) {
        Rng rng(derive_seed(cfg.seed, "encode-eval:" + tag));
        for (int i = 0; i < cap; ++i) {
            EncodedValue v;
            v.provenance = tag;
            v.text_id = tag + "-" + std::to_string(i);
            v.expected_label = label;
            v.h = encode(grad, average_rows(test_pools.at(cls).fact, rng, batch, n));
            encoded.push_back(std::move(v));
        }
    };
    add_class(lex.female_class, "class-a-test", 1);
    add_class(lex.male_class, "class-b-test", -1);

    // Neutral samples get the same treatment: a pool of single-text gradients
    // at random masked positions, batch-averaged per sample.
    auto add_neutral = [&](const std::vector<std::vector<std::string>>& texts,
                           const std::string& tag) {
        Rng rng(derive_seed(cfg.seed, "encode-eval:" + tag));
        size_t pool_size = std::max<size_t>(2 * texts.size(), 128);
        std::vector<std::vector<float>> rows;
        rows.reserve(pool_size);
        for (size_t e = 0; e < pool_size; ++e) {
            const auto& text = texts[e % texts.size()];
            int slot = static_cast<int>(rng.next_index(text.size()));
            rows.push_back(extract_plain_gradient(model, grad.index, vocab, text, slot));
        }
        for (int i = 0; i < cap; ++i) {
            EncodedValue v;
            v.provenance = tag;
            v.text_id = tag + "-" + std::to_string(i);
            v.expected_label = 0;
            v.h = encode(grad, average_rows(rows, rng, batch, n));
            encoded.push_back(std::move(v));
        }
    };
    add_neutral(neutral_texts, "neutral-masked");
    add_neutral(independent_neutral, "independent-neutral");

    std::vector<double> hs, ys;
    for (const auto& v : encoded) {
        if (v.expected_label == 0) continue;
        hs.push_back(v.h);
        ys.push_back(static_cast<double>(v.expected_label));
    }
    cor_t_test = pearson(hs, ys);
    cor_enc_value = cor_enc(encoded, derive_seed(cfg.seed, "cor-enc"));
    neutral_mean_abs = neutral_abs_mean(encoded);

    std::ostringstream csv;
    csv << "text_id,provenance,expected_label,h\n";
    for (const auto& v : encoded)
        csv << csv_field(v.text_id) << "," << csv_field(v.provenance) << "," << v.expected_label
            << "," << fmt_g(v.h) << "\n";
    write_file(out / "encoded_values.csv", csv.str());
    write_file(out / "encoder.json",
               json{{"cor_t_test", cor_t_test},
                    {"cor_enc", cor_enc_value},
                    {"neutral_mean_abs", neutral_mean_abs}}
                       .dump(2) +
                   "\n");
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_stage("eval-encoder", artifacts, secs);
    encoder_ready_ = true;
}

// ------------------------------------------------------------------- sweep

namespace {

json cells_to_json(const std::vector<SweepCell>& cells) {
    json arr = json::array();
    for (const auto& c : cells)
        arr.push_back({{"h", c.h},
                       {"alpha", c.alpha},
                       {"p_a", c.p_a},
                       {"p_b", c.p_b},
                       {"p_union", c.p_union},
                       {"lms", c.lms},
                       {"bpi", c.bpi},
                       {"fpi", c.fpi},
                       {"mpi", c.mpi},
                       {"ok", c.ok},
                       {"status", c.status}});
    return arr;
}

SweepCell cell_from_json(const json& j) {
    SweepCell c;
    c.h = j.at("h").get<double>();
    c.alpha = j.at("alpha").get<double>();
    c.p_a = j.at("p_a").get<double>();
    c.p_b = j.at("p_b").get<double>();
    c.p_union = j.at("p_union").get<double>();
    c.lms = j.at("lms").get<double>();
    c.bpi = j.at("bpi").get<double>();
    c.fpi = j.at("fpi").get<double>();
    c.mpi = j.at("mpi").get<double>();
    c.ok = j.at("ok").get<bool>();
    c.status = j.at("status").get<std::string>();
    return c;
}

std::string sweep_csv(const std::vector<SweepCell>& cells) {
    std::ostringstream csv;
    csv << "h,alpha,p_a,p_b,p_union,lms,bpi,fpi,mpi,status\n";
    for (const auto& c : cells)
        csv << fmt_g(c.h) << "," << fmt_g(c.alpha) << "," << fmt_g(c.p_a) << "," << fmt_g(c.p_b)
            << "," << fmt_g(c.p_union) << "," << fmt_g(c.lms) << "," << fmt_g(c.bpi) << ","
            << fmt_g(c.fpi) << "," << fmt_g(c.mpi) << "," << csv_field(c.status) << "\n";
    return csv.str();
}

} // namespace

void Pipeline::run_sweep() {
    if (sweep_ready_) return;
    eval_encoder();
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> artifacts = {"sweep.csv", "sweep.json"};
    if (stage_cached("sweep")) {
        cells.clear();
        for (const auto& c : json::parse(read_file(out / "sweep.json")))
            cells.push_back(cell_from_json(c));
        adopt_stage("sweep");
        sweep_ready_ = true;
        return;
    }

    SweepInputs inputs;
    inputs.probes = probes;
    inputs.names = lex.names;
    inputs.seed = derive_seed(cfg.seed, "sweep-lms");
    size_t count = std::min(static_cast<size_t>(cfg.sweep.neutral_count), neutral_texts.size());
    for (size_t i = 0; i < count; ++i) inputs.neutral_corpus.push_back(vocab.encode(neutral_texts[i]));

    cells = sweep(model, grad, cfg.sweep_grid(), vocab, inputs);

    write_file(out / "sweep.csv", sweep_csv(cells));
    write_file(out / "sweep.json", cells_to_json(cells).dump(2) + "\n");
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_stage("sweep", artifacts, secs);
    sweep_ready_ = true;
}

// ------------------------------------------------------------------ select

void Pipeline::run_select() {
    if (select_ready_) return;
    run_sweep();
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> artifacts = {"selected.json", "model_bpi.grad1",
                                                "model_fpi.grad1", "model_mpi.grad1"};
    if (stage_cached("select")) {
        selected.clear();
        json j = json::parse(read_file(out / "selected.json"));
        for (const auto& name : {"bpi", "fpi", "mpi"})
            selected[name] = cell_from_json(j.at(name).at("cell"));
        adopt_stage("select");
        select_ready_ = true;
        return;
    }

    selected.clear();
    json out_json;
    for (const auto& name : {"bpi", "fpi", "mpi"}) {
        SweepCell cell = select(cells, select_criterion_from_string(name));
        std::string checkpoint = std::string("model_") + name + ".grad1";
        ParamStore edited = rewrite(model, grad, cell.h, cell.alpha);
        save_container_file((out / checkpoint).string(), params_to_tensors(edited));
        out_json[name] = {{"cell", cells_to_json({cell}).at(0)}, {"checkpoint", checkpoint}};
        selected[name] = cell;
    }
    write_file(out / "selected.json", out_json.dump(2) + "\n");
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_stage("select", artifacts, secs);
    select_ready_ = true;
}

// ------------------------------------------------------------------ report

void Pipeline::report() {
    if (report_ready_) return;
    run_select();
    auto start = std::chrono::steady_clock::now();
    const std::vector<std::string> artifacts = {"metrics.csv"};
    if (stage_cached("report")) {
        adopt_stage("report");
        report_ready_ = true;
        return;
    }

    reports.clear();
    uint64_t bseed = derive_seed(cfg.seed, "bootstrap-root");
    auto point = [&](const std::string& name, double value, size_t n) {
        reports.push_back({name, value, value, value, value, n});
    };
    auto boot = [&](const std::string& name, const std::vector<double>& values) {
        reports.push_back(bootstrap(name, values, mean_stat, cfg.metrics.bootstrap_resamples,
                                    cfg.metrics.ci_level, derive_seed(bseed, name)));
    };

    auto base_it = std::find_if(cells.begin(), cells.end(), [](const SweepCell& c) {
        return c.ok && c.h == 0.0 && c.alpha == 0.0;
    });
    if (base_it == cells.end())
        throw std::runtime_error("report: sweep has no successful base cell");
    const SweepCell& base = *base_it;

    // Per-probe probabilities on the unmodified model, for bootstrap CIs.
    std::vector<double> pf, pm, gap;
    for (const auto& probe : probes) {
        ProbeResult r = gender_probability(model, vocab, probe, lex.names);
        pf.push_back(r.p_a);
        pm.push_back(r.p_b);
        gap.push_back(std::abs(r.p_a - r.p_b));
    }
    boot("base_p_f", pf);
    boot("base_p_m", pm);
    boot("base_gap", gap);

    point("lm_masked_accuracy", lm_masked_accuracy, neutral_texts.size());
    point("judge_survival", judge_survival, templates.size());
    point("cor_val", cor_val, splits.val.size());
    point("cor_t_test", cor_t_test, splits.test.size());
    point("cor_enc", cor_enc_value, encoded.empty() ? 0 : encoded.size());
    point("neutral_mean_abs", neutral_mean_abs, 0);

    point("lms_base", base.lms, static_cast<size_t>(cfg.sweep.neutral_count));
    point("bpi_base", base.bpi, probes.size());
    point("fpi_base", base.fpi, probes.size());
    point("mpi_base", base.mpi, probes.size());

    const SweepCell& deb = selected.at("bpi");
    point("bpi_selected", deb.bpi, probes.size());
    point("gap_base", std::abs(base.p_a - base.p_b), probes.size());
    point("gap_debiased", std::abs(deb.p_a - deb.p_b), probes.size());
    point("lms_debiased", deb.lms, static_cast<size_t>(cfg.sweep.neutral_count));
    point("p_f_debiased", deb.p_a, probes.size());
    point("p_m_debiased", deb.p_b, probes.size());

    const SweepCell& fcell = selected.at("fpi");
    point("fpi_selected", fcell.fpi, probes.size());
    point("p_f_at_fpi", fcell.p_a, probes.size());
    point("p_m_at_fpi", fcell.p_b, probes.size());
    const SweepCell& mcell = selected.at("mpi");
    point("mpi_selected", mcell.mpi, probes.size());
    point("p_f_at_mpi", mcell.p_a, probes.size());
    point("p_m_at_mpi", mcell.p_b, probes.size());

    // Stereotype and embedding-association scores on base and debiased models.
    ParamStore debiased = rewrite(model, grad, deb.h, deb.alpha);
    SsResult ss_base = ss_score(model, vocab, ss_probes);
    SsResult ss_deb = ss_score(debiased, vocab, ss_probes);
    point("ss_base", ss_base.ss, ss_probes.size());
    point("lms_ss_base", ss_base.lms_ss, ss_probes.size());
    point("ss_ties_base", static_cast<double>(ss_base.ties), ss_probes.size());
    point("ss_debiased", ss_deb.ss, ss_probes.size());
    point("lms_ss_debiased", ss_deb.lms_ss, ss_probes.size());
    point("ss_ties_debiased", static_cast<double>(ss_deb.ties), ss_probes.size());

    auto seat_for = [&](const ParamStore& m) {
        std::vector<const NameRecord*> exact_f, exact_m;
        for (const auto& n : lex.names) {
            if (n.p_female == 1.0) exact_f.push_back(&n);
            else if (n.p_female == 0.0) exact_m.push_back(&n);
        }
        size_t k = static_cast<size_t>(cfg.metrics.seat_texts);
        auto name_set = [&](const std::vector<const NameRecord*>& names) {
            std::vector<std::vector<double>> set;
            for (size_t i = 0; i < names.size() && i < k; ++i)
                set.push_back(sentence_embedding(
                    m, vocab.encode({"my", "friend", names[i]->name, "."})));
            return set;
        };
        auto word_set = [&](const std::vector<std::string>& words) {
            std::vector<std::vector<double>> set;
            for (size_t i = 0; i < words.size() && i < k; ++i)
                set.push_back(sentence_embedding(m, vocab.encode({"the", words[i], "."})));
            return set;
        };
        return seat_effect_size(name_set(exact_f), name_set(exact_m), word_set(lex.stereo_female),
                                word_set(lex.stereo_male));
    };
    point("seat_base", seat_for(model), static_cast<size_t>(cfg.metrics.seat_texts) * 2);
    point("seat_debiased", seat_for(debiased), static_cast<size_t>(cfg.metrics.seat_texts) * 2);

    std::ostringstream csv;
    csv << "name,value,boot_mean,ci_low,ci_high,n\n";
    for (const auto& r : reports)
        csv << csv_field(r.name) << "," << fmt_g(r.value) << "," << fmt_g(r.boot_mean) << ","
            << fmt_g(r.ci_low) << "," << fmt_g(r.ci_high) << "," << r.n << "\n";
    write_file(out / "metrics.csv", csv.str());
    double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
    record_stage("report", artifacts, secs);
    report_ready_ = true;
}

RunManifest Pipeline::run() {
    report();
    return manifest;
}

} // namespace gradiend
