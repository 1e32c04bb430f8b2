#include "iclmt/pipeline.hpp"

#include <algorithm>
#include <functional>
#include <set>
#include <sstream>
#include <unordered_map>

#include "iclmt/util.hpp"

namespace iclmt {

namespace fs = std::filesystem;

// ---------------------------------------------------------------------------
// Building blocks

std::string to_string(ContextFormat format) {
    switch (format) {
        case ContextFormat::plain: return "plain";
        case ContextFormat::stage0: return "0";
        case ContextFormat::stage2a: return "2a";
        case ContextFormat::stage2b: return "2b";
    }
    return "?";
}

ContextFormat parse_context_format(std::string_view name) {
    if (name == "plain") return ContextFormat::plain;
    if (name == "0" || name == "stage0") return ContextFormat::stage0;
    if (name == "2a" || name == "stage2a") return ContextFormat::stage2a;
    if (name == "2b" || name == "stage2b") return ContextFormat::stage2b;
    throw ValidationError("unknown context format '" + std::string(name) + "'");
}

std::vector<EncodedSample> build_contexts(const Corpus& queries, const Corpus& memory,
                                          std::span<const NeighborList> neighbors, const Vocabulary& vocab,
                                          ContextFormat format, std::size_t k, std::size_t max_len) {
    if (format == ContextFormat::stage0 && k == 0) {
        throw ValidationError("stage 0 contexts need k >= 1");
    }
    std::unordered_map<std::uint64_t, const NeighborList*> by_query;
    for (const auto& list : neighbors) {
        by_query[list.query_id] = &list;
    }
    std::vector<EncodedSample> out;
    out.reserve(queries.size());
    for (const auto& q : queries.pairs) {
        EncodedSample s;
        if (format == ContextFormat::plain || k == 0) {
            s = serialize_plain(q, vocab);
            if (format == ContextFormat::stage2b) {
                s.stage = SampleStage::stage2b;
            }
        } else {
            auto it = by_query.find(q.id);
            if (it == by_query.end()) {
                throw ValidationError("no neighbor list for query " + std::to_string(q.id));
            }
            const ContextExample ex = make_example(q, *it->second, memory, k);
            s = format == ContextFormat::stage0 ? serialize_stage0(ex, vocab)
                                                : serialize_stage2(ex, vocab, format == ContextFormat::stage2b);
        }
        out.push_back(truncate_to_budget(s, max_len));
    }
    return out;
}

std::vector<Hypothesis> decode_samples(const ModelParams& params, std::span<const EncodedSample> samples,
                                       const Vocabulary& vocab, std::size_t max_new) {
    std::vector<Hypothesis> out;
    out.reserve(samples.size());
    for (const auto& s : samples) {
        const InferenceInput in = inference_prefix(s);
        const DecodeResult r = greedy_decode(params, in.encoder_ids, in.decoder_prefix, max_new);
        out.push_back({s.query_id, decode(r.generated_ids, vocab), r.is_empty});
    }
    return out;
}

EvalReport evaluate_hypotheses(std::span<const Hypothesis> hyps, const Corpus& test,
                               std::span<const SubstitutionPair> wsa_pairs) {
    std::vector<std::string> h;
    std::vector<std::string> r;
    std::vector<char> empty;
    std::map<std::uint64_t, std::string> by_id;
    for (const auto& x : hyps) {
        h.push_back(x.text);
        r.push_back(test.at(x.id).target);
        empty.push_back(x.empty ? 1 : 0);
        by_id[x.id] = x.text;
    }
    if (hyps.empty()) {
        throw ValidationError("no hypotheses to evaluate");
    }
    EvalReport rep;
    rep.bleu = corpus_bleu(h, r);
    const auto n_empty = static_cast<std::size_t>(std::count(empty.begin(), empty.end(), 1));
    rep.empty_rate = static_cast<double>(n_empty) / static_cast<double>(hyps.size());
    rep.evaluated = hyps.size();
    rep.skipped = test.size() - hyps.size();
    if (!wsa_pairs.empty()) {
        rep.wsa = wsa(wsa_pairs, by_id);
        rep.wsa_segments = wsa_pairs.size();
    }
    return rep;
}

std::vector<std::string> segment_sources(const Corpus& corpus) {
    std::vector<std::string> out;
    out.reserve(corpus.size());
    for (const auto& p : corpus.pairs) {
        out.push_back(p.source);
    }
    return out;
}

// ---------------------------------------------------------------------------
// Configuration

bool PipelineConfig::runs(std::string_view stage) const {
    return std::find(stages.begin(), stages.end(), stage) != stages.end();
}

namespace {

const std::set<std::string> kKnownStages = {"baseline", "0", "1", "2a", "2b", "3"};

fs::path resolve(const fs::path& base, const std::string& p) {
    fs::path path(p);
    return (path.is_absolute() ? path : base / path).lexically_normal();
}

CorpusSource corpus_source_from_json(const nlohmann::json& j, const std::string& name, const fs::path& base,
                                     const nlohmann::json& language) {
    CorpusSource c;
    c.name = j.value("name", name);
    if (c.name.empty() || c.name.find('/') != std::string::npos) {
        throw ValidationError("invalid corpus name '" + c.name + "'");
    }
    c.settings = j;
    c.seed = j.value("seed", std::uint64_t{1});
    if (j.contains("ratios")) {
        const auto r = j.at("ratios").get<std::vector<double>>();
        if (r.size() != 3) {
            throw ValidationError("ratios must have three entries");
        }
        c.ratios = {r[0], r[1], r[2]};
    }
    if (j.contains("corpus_dir")) {
        c.kind = CorpusSource::Kind::directory;
        c.path = resolve(base, j.at("corpus_dir").get<std::string>());
    } else if (j.contains("templates")) {
        c.kind = CorpusSource::Kind::templates;
        c.path = resolve(base, j.at("templates").get<std::string>());
    } else {
        c.kind = CorpusSource::Kind::sampled;
        auto& s = c.sampler;
        s.language_seed = language.value("seed", s.language_seed);
        s.source_pool = language.value("source_pool", s.source_pool);
        s.target_pool = language.value("target_pool", s.target_pool);
        s.family_seed = j.value("family_seed", s.family_seed);
        s.id_prefix = j.value("id_prefix", c.name);
        s.families = j.value("families", s.families);
        s.values_per_family = j.value("values_per_family", s.values_per_family);
        s.min_words = j.value("min_words", s.min_words);
        s.max_words = j.value("max_words", s.max_words);
        c.settings["language"] = language;
    }
    return c;
}

}  // namespace

PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const fs::path& base_dir) {
    try {
        PipelineConfig c;
        c.work_dir = resolve(base_dir, j.value("work_dir", std::string("work")));
        c.seed = j.value("seed", c.seed);
        const nlohmann::json language = j.value("language", nlohmann::json::object());
        const auto& corpora = j.at("corpora");
        c.general = corpus_source_from_json(corpora.at("general"), "general", base_dir, language);
        if (corpora.contains("news")) {
            c.news = corpus_source_from_json(corpora.at("news"), "news", base_dir, language);
        }
        for (const auto& d : corpora.at("domains")) {
            c.domains.push_back(corpus_source_from_json(d, d.value("name", std::string()), base_dir, language));
        }
        if (c.domains.empty()) {
            throw ValidationError("at least one domain is required");
        }
        std::set<std::string> names{c.general.name};
        if (c.news && !names.insert(c.news->name).second) {
            throw ValidationError("duplicate corpus name '" + c.news->name + "'");
        }
        for (const auto& d : c.domains) {
            if (!names.insert(d.name).second) {
                throw ValidationError("duplicate corpus name '" + d.name + "'");
            }
        }
        if (j.contains("vocab")) {
            const auto& v = j.at("vocab");
            c.vocab_max_size = v.value("max_size", c.vocab_max_size);
            if (v.contains("path")) {
                c.vocab_path = resolve(base_dir, v.at("path").get<std::string>());
            }
        }
        if (j.contains("embedder")) {
            const auto& e = j.at("embedder");
            c.embedder.dimension = e.value("dimension", c.embedder.dimension);
            c.embedder.ngram_order = e.value("ngram_order", c.embedder.ngram_order);
            c.embedder.hash_seed = e.value("hash_seed", c.embedder.hash_seed);
        }
        if (j.contains("index")) {
            const auto& x = j.at("index");
            c.index.M = x.value("M", c.index.M);
            c.index.ef_construction = x.value("ef_construction", c.index.ef_construction);
            c.index.ef_search = x.value("ef_search", c.index.ef_search);
            c.index.seed = x.value("seed", c.index.seed);
            const std::string mode = x.value("mode", std::string("hnsw"));
            if (mode != "hnsw" && mode != "exact") {
                throw ValidationError("index mode must be 'hnsw' or 'exact'");
            }
            c.index.mode = mode == "hnsw" ? SearchMode::hnsw : SearchMode::exact;
        }
        if (j.contains("model")) {
            c.model = model_config_from_json(j.at("model"));
        }
        if (j.contains("adapters")) {
            c.adapters.bottleneck = j.at("adapters").value("bottleneck", c.adapters.bottleneck);
            c.adapter_seed = j.at("adapters").value("seed", c.adapter_seed);
        }
        c.train_k = j.value("train_k", c.train_k);
        c.eval_k = j.value("eval_k", c.eval_k);
        c.max_len = j.value("max_len", c.max_len);
        c.max_new = j.value("max_new", c.max_new);
        c.stages = j.value("stages", c.stages);
        for (const auto& s : c.stages) {
            if (!kKnownStages.count(s)) {
                throw ValidationError("unknown stage '" + s + "'");
            }
        }
        if (std::find(c.eval_k.begin(), c.eval_k.end(), 0) != c.eval_k.end() || c.eval_k.empty()) {
            throw ValidationError("eval_k entries must be positive");
        }
        if (c.train_k == 0) {
            throw ValidationError("train_k must be positive");
        }
        if (c.max_len < 2 || c.max_len > c.model.max_input) {
            throw ValidationError("max_len must lie in [2, model.max_input]");
        }
        const nlohmann::json train = j.value("train", nlohmann::json::object());
        for (const std::string s : {"baseline", "1", "2a", "2b", "3"}) {
            nlohmann::json tj = train.value(s, nlohmann::json::object());
            if (!tj.contains("seed")) {
                tj["seed"] = c.seed;
            }
            c.train[s] = train_config_from_json(tj, parse_train_stage(s));
        }
        return c;
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(std::string("pipeline config: ") + e.what());
    }
}

PipelineConfig load_pipeline_config(const fs::path& path) {
    const std::string text = read_file(path);
    nlohmann::json j;
    try {
        j = nlohmann::json::parse(text);
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("pipeline config " + path.string() + ": " + e.what());
    }
    return pipeline_config_from_json(j, path.parent_path());
}

// ---------------------------------------------------------------------------
// Runner

namespace {

constexpr std::array<Split, 3> kSplits = {Split::train, Split::validation, Split::test};

class Runner {
public:
    Runner(const PipelineConfig& config, std::ostream* log) : c_(config), log_(log) {
        fs::create_directories(c_.work_dir);
        manifest_path_ = c_.work_dir / "manifest.json";
        if (fs::exists(manifest_path_)) {
            try {
                manifest_ = nlohmann::json::parse(read_file(manifest_path_));
            } catch (const nlohmann::json::exception&) {
                manifest_ = nlohmann::json::object();
            }
        }
        if (!manifest_.is_object() || !manifest_.contains("steps")) {
            manifest_ = {{"version", 1}, {"steps", nlohmann::json::object()}};
        }
    }

    fs::path path(const std::string& rel) const { return c_.work_dir / rel; }

    std::string label(const fs::path& p) const {
        const fs::path rel = p.lexically_relative(c_.work_dir);
        if (!rel.empty() && *rel.begin() != "..") {
            return rel.generic_string();
        }
        return p.generic_string();
    }

    /// Runs `fn` unless the manifest shows identical inputs and intact outputs.
    void step(const std::string& name, const nlohmann::json& params, const std::vector<fs::path>& inputs,
              const std::vector<fs::path>& outputs, const std::function<void()>& fn) {
        nlohmann::json in = nlohmann::json::object();
        for (const auto& p : inputs) {
            if (!fs::exists(p)) {
                throw DependencyError("step '" + name + "' needs missing artifact " + p.string());
            }
            in[label(p)] = hash_file(p);
        }
        const std::string fingerprint = hex64(fnv1a(params.dump() + "\n" + in.dump()));
        auto& steps = manifest_["steps"];
        bool fresh = steps.contains(name) && steps[name].value("fingerprint", std::string()) == fingerprint;
        if (fresh) {
            const auto& recorded = steps[name].at("outputs");
            for (const auto& p : outputs) {
                const std::string key = label(p);
                if (!fs::exists(p) || !recorded.contains(key) || recorded[key] != hash_file(p)) {
                    fresh = false;
                    break;
                }
            }
        }
        if (fresh) {
            result_.steps.push_back({name, fingerprint, false});
            ++result_.skipped;
            if (log_) *log_ << "[skip] " << name << '\n';
            return;
        }
        if (log_) *log_ << "[run]  " << name << std::endl;
        for (const auto& p : outputs) {
            fs::create_directories(p.parent_path());
        }
        fn();
        nlohmann::json out = nlohmann::json::object();
        for (const auto& p : outputs) {
            if (!fs::exists(p)) {
                throw Error("step '" + name + "' did not produce " + p.string());
            }
            out[label(p)] = hash_file(p);
        }
        steps[name] = {{"fingerprint", fingerprint}, {"params", params}, {"inputs", in}, {"outputs", out}};
        write_file_atomic(manifest_path_, manifest_.dump(2) + "\n");
        result_.steps.push_back({name, fingerprint, true});
        ++result_.executed;
    }

    PipelineResult finish() {
        write_file_atomic(manifest_path_, manifest_.dump(2) + "\n");
        result_.manifest_path = manifest_path_;
        return result_;
    }

private:
    const PipelineConfig& c_;
    std::ostream* log_;
    fs::path manifest_path_;
    nlohmann::json manifest_;
    PipelineResult result_;
};

std::string corpus_rel(const std::string& name, Split split) {
    return "corpora/" + name + "/" + to_string(split) + ".jsonl";
}

Corpus load_work_corpus(const Runner& r, const std::string& name, Split split) {
    return load_corpus(r.path(corpus_rel(name, split)), name, split);
}

void write_text(const fs::path& p, const std::string& text) {
    write_file_atomic(p, text);
}

nlohmann::json embedder_json(const EmbedderConfig& e) {
    return {{"dimension", e.dimension}, {"ngram_order", e.ngram_order}, {"hash_seed", e.hash_seed}};
}

nlohmann::json index_json(const IndexConfig& x) {
    return {{"M", x.M},
            {"ef_construction", x.ef_construction},
            {"ef_search", x.ef_search},
            {"mode", x.mode == SearchMode::hnsw ? "hnsw" : "exact"},
            {"seed", x.seed}};
}

class PipelineRun {
public:
    PipelineRun(const PipelineConfig& c, std::ostream* log) : c_(c), r_(c, log) {
        k_max_ = c_.train_k;
        for (std::size_t k : c_.eval_k) {
            k_max_ = std::max(k_max_, k);
        }
    }

    PipelineResult run() {
        corpora();
        vocabulary();
        retrieval();
        contexts();
        training();
        evaluation();
        PipelineResult res = r_.finish();
        res.summary_path = r_.path("reports/summary.json");
        return res;
    }

private:
    // -- corpora ------------------------------------------------------------

    std::vector<const CorpusSource*> all_sources() const {
        std::vector<const CorpusSource*> out{&c_.general};
        if (c_.news) out.push_back(&*c_.news);
        for (const auto& d : c_.domains) out.push_back(&d);
        return out;
    }

    const CorpusSource& news() const { return c_.news ? *c_.news : c_.general; }

    void corpora() {
        for (const CorpusSource* src : all_sources()) {
            const CorpusSource& s = *src;
            std::vector<fs::path> outputs;
            for (Split sp : kSplits) outputs.push_back(r_.path(corpus_rel(s.name, sp)));
            std::vector<fs::path> inputs;
            if (s.kind == CorpusSource::Kind::directory) {
                for (Split sp : kSplits) inputs.push_back(corpus_file(s.path, sp));
            } else if (s.kind == CorpusSource::Kind::templates) {
                inputs.push_back(s.path);
            }
            if (s.kind != CorpusSource::Kind::directory) {
                outputs.push_back(r_.path("corpora/" + s.name + "/templates.json"));
            }
            nlohmann::json params = s.settings;
            params.erase("corpus_dir");
            params.erase("templates");
            r_.step("corpus/" + s.name, params, inputs, outputs, [&] {
                if (s.kind == CorpusSource::Kind::directory) {
                    for (Split sp : kSplits) {
                        Corpus corpus = load_corpus(corpus_file(s.path, sp), s.name, sp);
                        write_corpus(r_.path(corpus_rel(s.name, sp)), corpus);
                    }
                    return;
                }
                const std::vector<TemplateFamily> families =
                    s.kind == CorpusSource::Kind::templates ? load_families(s.path)
                                                             : sample_families(s.sampler, default_slot_lexicon());
                GeneratedCorpora g = generate(families, s.seed, s.ratios, s.name);
                write_corpus(r_.path(corpus_rel(s.name, Split::train)), g.train);
                write_corpus(r_.path(corpus_rel(s.name, Split::validation)), g.validation);
                write_corpus(r_.path(corpus_rel(s.name, Split::test)), g.test);
                write_text(r_.path("corpora/" + s.name + "/templates.json"), serialize_families(families));
            });
        }
    }

    // -- vocabulary ---------------------------------------------------------

    void vocabulary() {
        if (c_.vocab_path) {
            if (!fs::exists(*c_.vocab_path)) {
                throw DependencyError("vocabulary " + c_.vocab_path->string() + " does not exist");
            }
            vocab_file_ = *c_.vocab_path;
        } else {
            vocab_file_ = r_.path("vocab.json");
            std::vector<fs::path> inputs;
            for (const CorpusSource* s : all_sources()) {
                inputs.push_back(r_.path(corpus_rel(s->name, Split::train)));
            }
            r_.step("vocab", {{"max_size", c_.vocab_max_size}}, inputs, {vocab_file_}, [&] {
                std::vector<Corpus> corpora;
                for (const CorpusSource* s : all_sources()) {
                    corpora.push_back(load_work_corpus(r_, s->name, Split::train));
                }
                write_vocab(vocab_file_, build_vocab(corpora, c_.vocab_max_size));
            });
        }
        vocab_ = read_vocab(vocab_file_);
    }

    // -- embedding, index, retrieval -----------------------------------------

    std::vector<std::string> retrieval_corpora() const {
        std::vector<std::string> out;
        if (c_.runs("2a") || c_.runs("2b") || c_.runs("3")) {
            out.push_back(news().name);
        }
        for (const auto& d : c_.domains) {
            out.push_back(d.name);
        }
        return out;
    }

    static std::string vec_rel(const std::string& name, Split sp) {
        return "vectors/" + name + "." + to_string(sp) + ".vec";
    }

    static std::string neighbors_rel(const std::string& name, Split sp) {
        return "neighbors/" + name + "." + to_string(sp) + ".jsonl";
    }

    void retrieval() {
        const nlohmann::json emb = embedder_json(c_.embedder);
        for (const std::string& name : retrieval_corpora()) {
            for (Split sp : kSplits) {
                const fs::path out = r_.path(vec_rel(name, sp));
                r_.step("embed/" + name + "." + to_string(sp), {{"embedder", emb}},
                        {r_.path(corpus_rel(name, sp))}, {out, vector_manifest_path(out)}, [&, name, sp] {
                            const Corpus corpus = load_work_corpus(r_, name, sp);
                            const NgramHashEmbedder embedder(c_.embedder);
                            write_vectors(out, embed_all(embedder, segment_sources(corpus)));
                            nlohmann::json side = {{"embedder", embedder.describe()},
                                                   {"corpus", r_.label(r_.path(corpus_rel(name, sp)))},
                                                   {"count", corpus.size()}};
                            write_text(vector_manifest_path(out), side.dump(2) + "\n");
                        });
            }
            const fs::path index_file = r_.path("indices/" + name + ".hnsw");
            const fs::path train_vec = r_.path(vec_rel(name, Split::train));
            r_.step("index/" + name, {{"index", index_json(c_.index)}}, {train_vec}, {index_file}, [&] {
                auto vs = std::make_shared<const VectorSet>(read_vectors(train_vec));
                IndexConfig ic = c_.index;
                ic.k = std::min(ic.k, ic.ef_search);
                KnnIndex::build(vs, ic).save(index_file);
            });
            for (Split sp : kSplits) {
                const bool self = sp == Split::train;
                const fs::path out = r_.path(neighbors_rel(name, sp));
                const fs::path qvec = r_.path(vec_rel(name, sp));
                r_.step("retrieve/" + name + "." + to_string(sp), {{"k", k_max_}, {"exclude_self", self}},
                        {index_file, train_vec, qvec}, {out}, [&, out, qvec, self] {
                            auto vs = std::make_shared<const VectorSet>(read_vectors(train_vec));
                            const KnnIndex index = KnnIndex::load(index_file, vs);
                            const VectorSet queries = read_vectors(qvec);
                            write_neighbors(out, retrieve_all(index, queries, k_max_, self));
                        });
            }
        }
    }

    // -- contexts -----------------------------------------------------------

    fs::path contexts_file(const std::string& name, Split sp, ContextFormat f, std::size_t k) {
        const std::string rel = "contexts/" + name + "." + to_string(sp) + "." + to_string(f) + ".k" +
                                std::to_string(f == ContextFormat::plain ? 0 : k) + ".jsonl";
        const fs::path out = r_.path(rel);
        if (built_.insert(rel).second) {
            std::vector<fs::path> inputs{vocab_file_, r_.path(corpus_rel(name, sp))};
            if (f != ContextFormat::plain) {
                inputs.push_back(r_.path(corpus_rel(name, Split::train)));
                inputs.push_back(r_.path(neighbors_rel(name, sp)));
            }
            nlohmann::json params = {{"format", to_string(f)}, {"k", f == ContextFormat::plain ? 0 : k},
                                     {"max_len", c_.max_len}};
            r_.step("contexts/" + name + "." + to_string(sp) + "." + to_string(f) + ".k" +
                        std::to_string(f == ContextFormat::plain ? 0 : k),
                    params, inputs, {out}, [&, name, sp, f, k, out] {
                        const Corpus q = load_work_corpus(r_, name, sp);
                        std::vector<EncodedSample> samples;
                        if (f == ContextFormat::plain) {
                            samples = build_contexts(q, q, {}, vocab_, f, 0, c_.max_len);
                        } else {
                            const Corpus mem = load_work_corpus(r_, name, Split::train);
                            const auto nb = read_neighbors(r_.path(neighbors_rel(name, sp)));
                            samples = build_contexts(q, mem, nb, vocab_, f, k, c_.max_len);
                        }
                        write_samples(out, samples);
                    });
        }
        return out;
    }

    void contexts() {
        const std::string g = c_.general.name;
        for (Split sp : {Split::train, Split::validation}) {
            contexts_file(g, sp, ContextFormat::plain, 0);
            if (c_.runs("2b") || c_.runs("3")) contexts_file(news().name, sp, ContextFormat::stage2b, c_.train_k);
            if (c_.runs("2a")) contexts_file(news().name, sp, ContextFormat::stage2a, c_.train_k);
            for (const auto& d : c_.domains) {
                if (c_.runs("1")) contexts_file(d.name, sp, ContextFormat::plain, 0);
                if (c_.runs("3")) contexts_file(d.name, sp, ContextFormat::stage2b, c_.train_k);
            }
        }
        for (const auto& d : c_.domains) {
            contexts_file(d.name, Split::test, ContextFormat::plain, 0);
            for (std::size_t k : c_.eval_k) {
                if (c_.runs("0") || c_.runs("1")) contexts_file(d.name, Split::test, ContextFormat::stage0, k);
                if (c_.runs("2a") || c_.runs("2b") || c_.runs("3")) {
                    contexts_file(d.name, Split::test, ContextFormat::stage2b, k);
                }
            }
        }
    }

    // -- training -----------------------------------------------------------

    void train_step(const std::string& name, const std::string& stage, const std::optional<fs::path>& parent,
                    bool adapters, const fs::path& train_file, const fs::path& val_file, const fs::path& out) {
        const TrainConfig& tc = c_.train.at(stage);
        ModelConfig mc = c_.model;
        mc.vocab_size = vocab_.size();
        nlohmann::json params = {{"stage", stage}, {"train", to_json(tc)}, {"model", to_json(mc)},
                                 {"init_seed", c_.seed}};
        if (adapters) {
            params["adapters"] = {{"bottleneck", c_.adapters.bottleneck}, {"seed", c_.adapter_seed}};
        }
        std::vector<fs::path> inputs{vocab_file_, train_file, val_file};
        if (parent) inputs.push_back(*parent);
        const fs::path log_file = r_.path("logs/" + name + ".jsonl");
        r_.step("train/" + name, params, inputs, {out, log_file}, [&] {
            ModelParams model = parent ? load_checkpoint(*parent) : init_model(mc, c_.seed);
            if (adapters) {
                model = inject_adapters(std::move(model), c_.adapters, c_.adapter_seed);
            }
            const auto train = read_samples(train_file);
            const auto val = read_samples(val_file);
            TrainResult res = train_stage(model, train, val, tc);
            save_checkpoint(out, res.params);
            write_text(log_file, serialize_train_log(res.log));
        });
    }

    fs::path ckpt(const std::string& name) { return r_.path("checkpoints/" + name + ".ckpt"); }

    void training() {
        const std::string g = c_.general.name;
        const std::string n = news().name;
        train_step("baseline", "baseline", std::nullopt, false,
                   contexts_file(g, Split::train, ContextFormat::plain, 0),
                   contexts_file(g, Split::validation, ContextFormat::plain, 0), ckpt("baseline"));
        for (const std::string s : {"2a", "2b"}) {
            const bool needed = c_.runs(s) || (s == std::string("2b") && c_.runs("3"));
            if (!needed) continue;
            const ContextFormat f = parse_context_format(s);
            train_step("stage" + s, s, ckpt("baseline"), false, contexts_file(n, Split::train, f, c_.train_k),
                       contexts_file(n, Split::validation, f, c_.train_k), ckpt("stage" + s));
        }
        for (const auto& d : c_.domains) {
            if (c_.runs("1")) {
                train_step(d.name + "/stage1", "1", ckpt("baseline"), true,
                           contexts_file(d.name, Split::train, ContextFormat::plain, 0),
                           contexts_file(d.name, Split::validation, ContextFormat::plain, 0),
                           ckpt(d.name + "/stage1"));
            }
            if (c_.runs("3")) {
                train_step(d.name + "/stage3", "3", ckpt("stage2b"), true,
                           contexts_file(d.name, Split::train, ContextFormat::stage2b, c_.train_k),
                           contexts_file(d.name, Split::validation, ContextFormat::stage2b, c_.train_k),
                           ckpt(d.name + "/stage3"));
            }
        }
    }

    // -- decoding and evaluation --------------------------------------------

    struct System {
        std::string name;
        fs::path checkpoint;
        ContextFormat format;
        std::size_t k;
    };

    std::vector<System> systems(const CorpusSource& d) {
        std::vector<System> out;
        out.push_back({"baseline", ckpt("baseline"), ContextFormat::plain, 0});
        for (std::size_t k : c_.eval_k) {
            if (c_.runs("0")) out.push_back({"stage0", ckpt("baseline"), ContextFormat::stage0, k});
        }
        if (c_.runs("1")) {
            out.push_back({"stage1", ckpt(d.name + "/stage1"), ContextFormat::plain, 0});
            for (std::size_t k : c_.eval_k) {
                out.push_back({"stage1", ckpt(d.name + "/stage1"), ContextFormat::stage0, k});
            }
        }
        for (const std::string s : {"2a", "2b", "3"}) {
            if (!c_.runs(s)) continue;
            const fs::path cp = s == std::string("3") ? ckpt(d.name + "/stage3") : ckpt("stage" + s);
            out.push_back({"stage" + s, cp, ContextFormat::plain, 0});
            for (std::size_t k : c_.eval_k) {
                out.push_back({"stage" + s, cp, ContextFormat::stage2b, k});
            }
        }
        return out;
    }

    void evaluation() {
        std::vector<fs::path> report_files;
        for (const auto& d : c_.domains) {
            const fs::path test_nb = r_.path(neighbors_rel(d.name, Split::test));
            for (const System& s : systems(d)) {
                const std::string tag = d.name + "/" + s.name + ".k" + std::to_string(s.k);
                const fs::path ctx = contexts_file(d.name, Split::test, s.format, s.k);
                const fs::path hyp = r_.path("hyps/" + tag + ".jsonl");
                r_.step("decode/" + tag, {{"max_new", c_.max_new}}, {vocab_file_, s.checkpoint, ctx}, {hyp}, [&] {
                    const ModelParams model = load_checkpoint(s.checkpoint);
                    const auto samples = read_samples(ctx);
                    write_text(hyp, serialize_hypotheses(decode_samples(model, samples, vocab_, c_.max_new)));
                });
                const fs::path rep = r_.path("reports/" + tag + ".json");
                r_.step("eval/" + tag, {{"wsa_rule", "substitution"}},
                        {hyp, r_.path(corpus_rel(d.name, Split::test)), r_.path(corpus_rel(d.name, Split::train)),
                         test_nb},
                        {rep}, [&] {
                            const Corpus test = load_work_corpus(r_, d.name, Split::test);
                            const Corpus train = load_work_corpus(r_, d.name, Split::train);
                            const auto nb = read_neighbors(test_nb);
                            const auto pairs = word_substitution_segments(test, train, nb);
                            EvalReport report = evaluate_hypotheses(read_hypotheses(hyp), test, pairs);
                            report.system = s.name;
                            report.k = s.k;
                            for (std::size_t k : c_.eval_k) {
                                report.avg_cosine_distance[k] = avg_knn_distance(nb, k).mean;
                            }
                            report.metadata = {{"domain", d.name},
                                               {"format", to_string(s.format)},
                                               {"wsa_rule", "substitution"},
                                               {"wsa_context", "1-shot context (s', t') for query s"}};
                            write_text(rep, to_json(report).dump(2) + "\n");
                        });
                report_files.push_back(rep);
            }
            report_files.push_back(test_nb);
        }
        const fs::path out = r_.path("reports/summary.json");
        r_.step("summary", {{"eval_k", c_.eval_k}}, report_files, {out}, [&] { write_summary(out); });
    }

    void write_summary(const fs::path& out) {
        nlohmann::json domains = nlohmann::json::object();
        std::vector<double> dist1;
        std::vector<double> gain;
        for (const auto& d : c_.domains) {
            nlohmann::json dj = {{"systems", nlohmann::json::array()}};
            const auto nb = read_neighbors(r_.path(neighbors_rel(d.name, Split::test)));
            nlohmann::json dist = nlohmann::json::object();
            for (std::size_t k : c_.eval_k) {
                const DistanceStats st = avg_knn_distance(nb, k);
                dist[std::to_string(k)] = {{"mean", st.mean}, {"used", st.used}, {"skipped", st.skipped}};
            }
            dj["avg_cosine_distance"] = dist;
            dj["zero_distance_neighbors"] = count_zero_distance(nb);
            std::optional<double> base_bleu;
            std::optional<double> stage0_bleu;
            for (const System& s : systems(d)) {
                const std::string tag = d.name + "/" + s.name + ".k" + std::to_string(s.k);
                const auto rep = nlohmann::json::parse(read_file(r_.path("reports/" + tag + ".json")));
                dj["systems"].push_back({{"system", s.name},
                                         {"k", s.k},
                                         {"bleu", rep["bleu"]},
                                         {"empty_rate", rep["empty_rate"]},
                                         {"wsa", rep["wsa"]}});
                if (s.name == "baseline") base_bleu = rep["bleu"].get<double>();
                if (s.name == "stage0" && s.k == 1) stage0_bleu = rep["bleu"].get<double>();
            }
            if (base_bleu && stage0_bleu && nb.size() > 0) {
                dist1.push_back(avg_knn_distance(nb, 1).mean);
                gain.push_back(*stage0_bleu - *base_bleu);
            }
            domains[d.name] = dj;
        }
        nlohmann::json s = {{"domains", domains}};
        s["pearson_distance_vs_stage0_gain"] = nullptr;
        if (dist1.size() >= 2) {
            try {
                s["pearson_distance_vs_stage0_gain"] = pearson(dist1, gain);
            } catch (const ValidationError&) {
            }
        }
        write_text(out, s.dump(2) + "\n");
    }

    const PipelineConfig& c_;
    Runner r_;
    std::size_t k_max_ = 1;
    fs::path vocab_file_;
    Vocabulary vocab_;
    std::set<std::string> built_;
};

}  // namespace

PipelineResult run_pipeline(const PipelineConfig& config, std::ostream* log) {
    return PipelineRun(config, log).run();
}

}  // namespace iclmt
