// Command-line front end: one subcommand per pipeline operation.

#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>
#include <sstream>

#include "CLI11.hpp"
#include "iclmt/contextizer.hpp"
#include "iclmt/corpus.hpp"
#include "iclmt/embedder.hpp"
#include "iclmt/evaluator.hpp"
#include "iclmt/knn_index.hpp"
#include "iclmt/model.hpp"
#include "iclmt/pipeline.hpp"
#include "iclmt/synthgen.hpp"
#include "iclmt/tokenizer.hpp"
#include "iclmt/trainer.hpp"
#include "iclmt/util.hpp"

namespace fs = std::filesystem;
using namespace iclmt;

namespace {

constexpr int kExitValidation = 2;
constexpr int kExitDependency = 3;

void require_file(const fs::path& p) {
    if (!fs::exists(p)) {
        throw DependencyError("missing input " + p.string());
    }
}

nlohmann::json read_json(const fs::path& p) {
    try {
        return nlohmann::json::parse(read_file(p));
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError(p.string() + ": " + e.what());
    }
}

std::vector<std::size_t> parse_k_list(const std::string& text) {
    std::vector<std::size_t> out;
    std::stringstream ss(text);
    std::string item;
    while (std::getline(ss, item, ',')) {
        try {
            out.push_back(std::stoul(trim(item)));
        } catch (const std::exception&) {
            throw ValidationError("bad k value '" + item + "'");
        }
    }
    if (out.empty()) {
        throw ValidationError("empty k list");
    }
    return out;
}

/// A directory holding <split>.jsonl files is one domain; otherwise each
/// subdirectory is.
std::vector<fs::path> domain_dirs(const fs::path& dir) {
    require_file(dir);
    std::vector<fs::path> out;
    bool direct = false;
    for (Split sp : {Split::train, Split::validation, Split::test}) {
        direct = direct || fs::exists(corpus_file(dir, sp));
    }
    if (direct) {
        return {dir};
    }
    for (const auto& e : fs::directory_iterator(dir)) {
        if (e.is_directory()) {
            out.push_back(e.path());
        }
    }
    std::sort(out.begin(), out.end());
    return out;
}

std::vector<Corpus> load_tree(const fs::path& dir, std::initializer_list<Split> splits) {
    std::vector<Corpus> out;
    for (const auto& d : domain_dirs(dir)) {
        for (Split sp : splits) {
            if (fs::exists(corpus_file(d, sp))) {
                out.push_back(load_corpus_dir(d, sp));
            }
        }
    }
    return out;
}

void write_output(const fs::path& p, const std::string& text) {
    if (p.has_parent_path()) {
        fs::create_directories(p.parent_path());
    }
    write_file_atomic(p, text);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"In-context-learning toolkit for retrieval-augmented machine translation"};
    app.require_subcommand(1);

    // ingest
    std::string in_file, domain, split_name = "train", out_path;
    auto* ingest = app.add_subcommand("ingest", "Validate a JSONL corpus and store it under DIR/<domain>/<split>.jsonl");
    ingest->add_option("--in", in_file, "Input JSONL file")->required();
    ingest->add_option("--domain", domain, "Domain label")->required();
    ingest->add_option("--split", split_name, "train | validation | test")->required();
    ingest->add_option("--out", out_path, "Corpus root directory")->required();

    // stats
    std::string corpora_dir, report_path;
    auto* stats = app.add_subcommand("stats", "Segment counts per domain and split");
    stats->add_option("--corpora", corpora_dir, "Corpus root or domain directory")->required();
    stats->add_option("--report", report_path, "Write the table as JSON");

    // synth-gen
    std::string templates_path, ratios_text = "0.8,0.1,0.1", write_templates;
    std::uint64_t seed = 1;
    FamilySamplerConfig sampler;
    std::size_t sample_count = 0;
    auto* synth = app.add_subcommand("synth-gen", "Generate a synthetic corpus from template families");
    synth->add_option("--templates", templates_path, "JSON list of template families");
    synth->add_option("--seed", seed, "Split seed");
    synth->add_option("--ratios", ratios_text, "train,validation,test fractions");
    synth->add_option("--out", out_path, "Output domain directory")->required();
    synth->add_option("--domain", domain, "Domain label (default: directory name)");
    synth->add_option("--sample-families", sample_count, "Draw N random families instead of reading templates");
    synth->add_option("--language-seed", sampler.language_seed, "Seed of the shared word pools");
    synth->add_option("--family-seed", sampler.family_seed, "Seed of the family draw");
    synth->add_option("--values-per-family", sampler.values_per_family, "Slot values per family");
    synth->add_option("--write-templates", write_templates, "Also save the families used");

    // embed
    std::string corpus_dir, vectors_path;
    EmbedderConfig emb;
    auto* embed_cmd = app.add_subcommand("embed", "Embed the source side of a corpus split");
    embed_cmd->add_option("--corpus", corpus_dir, "Domain directory")->required();
    embed_cmd->add_option("--split", split_name, "Split to embed");
    embed_cmd->add_option("--out", out_path, "Vector file")->required();
    embed_cmd->add_option("--dim", emb.dimension, "Embedding dimension");
    embed_cmd->add_option("--order", emb.ngram_order, "Character n-gram order");
    embed_cmd->add_option("--hash-seed", emb.hash_seed, "Hash seed");

    // index build / query
    IndexConfig icfg;
    std::string mode = "hnsw", index_path, base_path;
    std::size_t k = 1;
    bool exclude_self = false;
    auto* index = app.add_subcommand("index", "Nearest-neighbor index");
    index->require_subcommand(1);
    auto* ibuild = index->add_subcommand("build", "Build an HNSW index over a vector file");
    ibuild->add_option("--vectors", vectors_path, "Vector file")->required();
    ibuild->add_option("--out", out_path, "Index file")->required();
    ibuild->add_option("--M", icfg.M, "Max links per node above layer 0");
    ibuild->add_option("--ef-construction", icfg.ef_construction, "Construction beam width");
    ibuild->add_option("--ef-search", icfg.ef_search, "Search beam width");
    ibuild->add_option("--k", icfg.k, "Default neighbor count");
    ibuild->add_option("--mode", mode, "hnsw | exact");
    ibuild->add_option("--seed", icfg.seed, "Level generator seed");
    auto* iquery = index->add_subcommand("query", "Retrieve neighbors for every vector of a file");
    iquery->add_option("--index", index_path, "Index file")->required();
    iquery->add_option("--vectors", vectors_path, "Query vectors")->required();
    iquery->add_option("--base", base_path, "Vectors the index was built over (default: --vectors)");
    iquery->add_option("--k", k, "Neighbors per query")->required();
    iquery->add_flag("--exclude-self", exclude_self, "Never return the query's own id");
    iquery->add_option("--out", out_path, "Neighbors JSONL")->required();

    // vocab build
    std::vector<std::string> vocab_corpora;
    std::size_t max_size = 4096;
    auto* vocab_cmd = app.add_subcommand("vocab", "Vocabulary");
    vocab_cmd->require_subcommand(1);
    auto* vbuild = vocab_cmd->add_subcommand("build", "Joint vocabulary over the train splits");
    vbuild->add_option("--corpora", vocab_corpora, "Corpus root or domain directories")->required();
    vbuild->add_option("--max-size", max_size, "Size including reserved tokens");
    vbuild->add_option("--out", out_path, "Vocabulary JSON")->required();

    // contexts build
    std::string neighbors_path, stage_name, vocab_path, memory_dir;
    std::size_t max_len = 256;
    auto* ctx = app.add_subcommand("contexts", "Serialized training/inference samples");
    ctx->require_subcommand(1);
    auto* cbuild = ctx->add_subcommand("build", "Serialize queries with their neighbors");
    cbuild->add_option("--corpus", corpus_dir, "Domain directory")->required();
    cbuild->add_option("--split", split_name, "Query split");
    cbuild->add_option("--memory", memory_dir, "Translation-memory domain directory (default: --corpus)");
    cbuild->add_option("--neighbors", neighbors_path, "Neighbors JSONL (not needed for plain)");
    cbuild->add_option("--stage", stage_name, "plain | 0 | 2a | 2b")->required();
    cbuild->add_option("--k", k, "Neighbors per sample");
    cbuild->add_option("--max-len", max_len, "Token budget per sequence");
    cbuild->add_option("--vocab", vocab_path, "Vocabulary JSON")->required();
    cbuild->add_option("--out", out_path, "Contexts JSONL")->required();

    // llm-prompt
    auto* prompt = app.add_subcommand("llm-prompt", "Emit few-shot prompts for an external LLM");
    prompt->add_option("--corpus", corpus_dir, "Domain directory")->required();
    prompt->add_option("--split", split_name, "Query split");
    prompt->add_option("--memory", memory_dir, "Translation-memory domain directory (default: --corpus)");
    prompt->add_option("--neighbors", neighbors_path, "Neighbors JSONL")->required();
    prompt->add_option("--k", k, "Examples per prompt")->required();
    prompt->add_option("--out", out_path, "Prompts JSONL")->required();

    // train
    std::string data_path, val_path, ckpt_in, config_path, log_path;
    auto* train = app.add_subcommand("train", "Train one stage");
    train->add_option("--stage", stage_name, "baseline | 1 | 2a | 2b | 3")->required();
    train->add_option("--data", data_path, "Training contexts")->required();
    train->add_option("--val", val_path, "Validation contexts");
    train->add_option("--checkpoint-in", ckpt_in, "Parent checkpoint (omit to initialize a baseline)");
    train->add_option("--config", config_path, "JSON with 'train', 'model', 'adapters' sections");
    train->add_option("--vocab", vocab_path, "Vocabulary (sets vocab_size for a fresh model)");
    train->add_option("--out", out_path, "Output checkpoint")->required();
    train->add_option("--log", log_path, "Training log JSONL (default: OUT.log.jsonl)");

    // decode
    std::string contexts_path;
    std::size_t max_new = 48;
    auto* dec = app.add_subcommand("decode", "Greedy-decode the inference prefix of every sample");
    dec->add_option("--checkpoint", ckpt_in, "Checkpoint")->required();
    dec->add_option("--contexts", contexts_path, "Contexts JSONL")->required();
    dec->add_option("--vocab", vocab_path, "Vocabulary JSON")->required();
    dec->add_option("--max-new", max_new, "Generation cap");
    dec->add_option("--out", out_path, "Hypotheses JSONL")->required();

    // eval
    std::string refs_path, hyps_path, k_list = "1,2,5";
    auto* eval = app.add_subcommand("eval", "BLEU and empty-translation rate");
    eval->add_option("--refs", refs_path, "Reference corpus JSONL")->required();
    eval->add_option("--hyps", hyps_path, "Hypotheses JSONL")->required();
    eval->add_option("--report", report_path, "Report JSON")->required();

    // distance-stats
    auto* dstats = app.add_subcommand("distance-stats", "Average cosine distance to the top-k neighbors");
    dstats->add_option("--neighbors", neighbors_path, "Neighbors JSONL")->required();
    dstats->add_option("--k", k_list, "Comma-separated k values");

    // wsa
    std::string test_dir, train_dir, rule = "substitution";
    auto* wsa_cmd = app.add_subcommand("wsa", "Word substitution accuracy");
    wsa_cmd->add_option("--test", test_dir, "Test domain directory")->required();
    wsa_cmd->add_option("--train", train_dir, "Train domain directory")->required();
    wsa_cmd->add_option("--neighbors", neighbors_path, "Test-vs-train neighbors JSONL")->required();
    wsa_cmd->add_option("--hyps", hyps_path, "Hypotheses JSONL")->required();
    wsa_cmd->add_option("--rule", rule, "substitution | edit-one");

    // pipeline run
    std::string work_dir;
    auto* pipe = app.add_subcommand("pipeline", "End-to-end experiment");
    pipe->require_subcommand(1);
    auto* prun = pipe->add_subcommand("run", "Run every configured step, skipping up-to-date ones");
    prun->add_option("--config", config_path, "Pipeline JSON")->required();
    prun->add_option("--work", work_dir, "Override the work directory");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return kExitValidation;
    }

    try {
        if (*ingest) {
            require_file(in_file);
            const Split sp = parse_split(split_name);
            const Corpus c = load_corpus(in_file, domain, sp);
            const fs::path out = corpus_file(fs::path(out_path) / domain, sp);
            fs::create_directories(out.parent_path());
            write_corpus(out, c);
            std::cout << "ingested " << c.size() << " pairs into " << out.string() << "\n";
        } else if (*stats) {
            const auto corpora = load_tree(corpora_dir, {Split::train, Split::validation, Split::test});
            const auto rows = corpus_stats(corpora);
            nlohmann::json j = nlohmann::json::array();
            std::cout << std::left << std::setw(20) << "domain" << std::setw(12) << "split" << std::right
                      << std::setw(10) << "segments" << std::setw(12) << "duplicates" << std::setw(16)
                      << "train_overlap" << "\n";
            for (const auto& r : rows) {
                std::cout << std::left << std::setw(20) << r.domain << std::setw(12) << to_string(r.split)
                          << std::right << std::setw(10) << r.segments << std::setw(12) << r.duplicate_pairs
                          << std::setw(16) << r.train_source_overlap << "\n";
                j.push_back({{"domain", r.domain},
                             {"split", to_string(r.split)},
                             {"segments", r.segments},
                             {"duplicate_pairs", r.duplicate_pairs},
                             {"train_source_overlap", r.train_source_overlap}});
            }
            if (!report_path.empty()) {
                write_output(report_path, j.dump(2) + "\n");
            }
        } else if (*synth) {
            std::vector<TemplateFamily> families;
            if (!templates_path.empty()) {
                require_file(templates_path);
                families = load_families(templates_path);
            } else if (sample_count > 0) {
                sampler.families = sample_count;
                sampler.id_prefix = fs::path(out_path).filename().string();
                families = sample_families(sampler, default_slot_lexicon());
            } else {
                throw ValidationError("synth-gen needs --templates or --sample-families");
            }
            const fs::path out(out_path);
            const std::string name = domain.empty() ? out.filename().string() : domain;
            const GeneratedCorpora g = generate(families, seed, parse_ratios(ratios_text), name);
            fs::create_directories(out);
            write_corpus(corpus_file(out, Split::train), g.train);
            write_corpus(corpus_file(out, Split::validation), g.validation);
            write_corpus(corpus_file(out, Split::test), g.test);
            if (!write_templates.empty()) {
                write_output(write_templates, serialize_families(families));
            }
            std::cout << "train " << g.train.size() << ", validation " << g.validation.size() << ", test "
                      << g.test.size() << "\n";
        } else if (*embed_cmd) {
            const Split sp = parse_split(split_name);
            require_file(corpus_file(corpus_dir, sp));
            const Corpus c = load_corpus_dir(corpus_dir, sp);
            const NgramHashEmbedder embedder(emb);
            const fs::path out(out_path);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            write_vectors(out, embed_all(embedder, segment_sources(c)));
            const nlohmann::json side = {{"embedder", embedder.describe()},
                                         {"corpus", corpus_file(corpus_dir, sp).string()},
                                         {"corpus_hash", hash_file(corpus_file(corpus_dir, sp))},
                                         {"count", c.size()}};
            write_file_atomic(vector_manifest_path(out), side.dump(2) + "\n");
        } else if (*ibuild) {
            require_file(vectors_path);
            if (mode != "hnsw" && mode != "exact") throw ValidationError("--mode must be hnsw or exact");
            icfg.mode = mode == "hnsw" ? SearchMode::hnsw : SearchMode::exact;
            auto vs = std::make_shared<const VectorSet>(read_vectors(vectors_path));
            const fs::path out(out_path);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            KnnIndex::build(vs, icfg).save(out);
        } else if (*iquery) {
            require_file(index_path);
            require_file(vectors_path);
            const std::string base = base_path.empty() ? vectors_path : base_path;
            require_file(base);
            auto vs = std::make_shared<const VectorSet>(read_vectors(base));
            const KnnIndex idx = KnnIndex::load(index_path, vs);
            const VectorSet queries = read_vectors(vectors_path);
            const auto lists = retrieve_all(idx, queries, k, exclude_self);
            write_output(out_path, serialize_neighbors(lists));
            std::cerr << "zero-distance neighbors: " << count_zero_distance(lists) << "\n";
        } else if (*vbuild) {
            std::vector<Corpus> corpora;
            for (const auto& d : vocab_corpora) {
                for (auto& c : load_tree(d, {Split::train})) corpora.push_back(std::move(c));
            }
            const Vocabulary v = build_vocab(corpora, max_size);
            write_output(out_path, serialize_vocab(v));
            std::cout << "vocabulary size " << v.size() << "\n";
        } else if (*cbuild) {
            require_file(vocab_path);
            const Split sp = parse_split(split_name);
            const ContextFormat f = parse_context_format(stage_name);
            const Vocabulary v = read_vocab(vocab_path);
            const Corpus q = load_corpus_dir(corpus_dir, sp);
            const fs::path mem_dir = memory_dir.empty() ? fs::path(corpus_dir) : fs::path(memory_dir);
            std::vector<EncodedSample> samples;
            if (f == ContextFormat::plain || k == 0) {
                samples = build_contexts(q, q, {}, v, f, 0, max_len);
            } else {
                if (neighbors_path.empty()) throw ValidationError("--neighbors is required for k > 0");
                require_file(neighbors_path);
                const Corpus mem = load_corpus_dir(mem_dir, Split::train);
                samples = build_contexts(q, mem, read_neighbors(neighbors_path), v, f, k, max_len);
            }
            write_output(out_path, serialize_samples(samples));
        } else if (*prompt) {
            require_file(neighbors_path);
            const Split sp = parse_split(split_name);
            const Corpus q = load_corpus_dir(corpus_dir, sp);
            const Corpus mem = load_corpus_dir(memory_dir.empty() ? fs::path(corpus_dir) : fs::path(memory_dir),
                                               Split::train);
            std::map<std::uint64_t, NeighborList> by_id;
            for (auto& l : read_neighbors(neighbors_path)) by_id[l.query_id] = l;
            std::ostringstream os;
            for (const auto& p : q.pairs) {
                auto it = by_id.find(p.id);
                if (it == by_id.end()) throw ValidationError("no neighbors for query " + std::to_string(p.id));
                const ContextExample ex = make_example(p, it->second, mem, k);
                os << nlohmann::json{{"query_id", p.id}, {"prompt", llm_prompt(ex)}}.dump() << "\n";
            }
            write_output(out_path, os.str());
        } else if (*train) {
            const TrainStage st = parse_train_stage(stage_name);
            require_file(data_path);
            nlohmann::json cfg = config_path.empty() ? nlohmann::json::object() : read_json(config_path);
            TrainConfig tc = train_config_from_json(cfg.value("train", nlohmann::json::object()), st);
            ModelParams model;
            if (!ckpt_in.empty()) {
                require_file(ckpt_in);
                model = load_checkpoint(ckpt_in);
            } else {
                if (st != TrainStage::baseline) {
                    throw ValidationError("stage " + to_string(st) + " needs --checkpoint-in");
                }
                if (vocab_path.empty()) throw ValidationError("a fresh model needs --vocab");
                require_file(vocab_path);
                ModelConfig mc = model_config_from_json(cfg.value("model", nlohmann::json::object()));
                mc.vocab_size = read_vocab(vocab_path).size();
                model = init_model(mc, cfg.value("init_seed", tc.seed));
            }
            if ((st == TrainStage::stage1 || st == TrainStage::stage3) && !model.has_adapters()) {
                const auto aj = cfg.value("adapters", nlohmann::json::object());
                model = inject_adapters(std::move(model), AdapterConfig{aj.value("bottleneck", std::size_t{16})},
                                        aj.value("seed", std::uint64_t{7}));
            }
            const auto data = read_samples(data_path);
            std::vector<EncodedSample> val;
            if (!val_path.empty()) {
                require_file(val_path);
                val = read_samples(val_path);
            }
            const TrainResult res = train_stage(model, data, val, tc);
            const fs::path out(out_path);
            if (out.has_parent_path()) fs::create_directories(out.parent_path());
            save_checkpoint(out, res.params);
            write_output(log_path.empty() ? out_path + ".log.jsonl" : log_path, serialize_train_log(res.log));
            std::cout << "steps " << res.steps << ", best step " << res.best_step;
            if (res.best_val_loss) std::cout << ", best validation loss " << *res.best_val_loss;
            std::cout << "\n";
        } else if (*dec) {
            require_file(ckpt_in);
            require_file(contexts_path);
            require_file(vocab_path);
            const ModelParams model = load_checkpoint(ckpt_in);
            const auto samples = read_samples(contexts_path);
            write_output(out_path, serialize_hypotheses(decode_samples(model, samples, read_vocab(vocab_path), max_new)));
        } else if (*eval) {
            require_file(refs_path);
            require_file(hyps_path);
            const Corpus refs = load_corpus(refs_path, "refs", Split::test);
            EvalReport rep = evaluate_hypotheses(read_hypotheses(hyps_path), refs, {});
            rep.system = fs::path(hyps_path).stem().string();
            write_output(report_path, to_json(rep).dump(2) + "\n");
            std::cout << "BLEU " << rep.bleu << ", empty rate " << rep.empty_rate << "\n";
        } else if (*dstats) {
            require_file(neighbors_path);
            const auto lists = read_neighbors(neighbors_path);
            nlohmann::json j = nlohmann::json::object();
            for (std::size_t kk : parse_k_list(k_list)) {
                const DistanceStats s = avg_knn_distance(lists, kk);
                j[std::to_string(kk)] = {{"mean", s.mean}, {"used", s.used}, {"skipped", s.skipped}};
            }
            std::cout << j.dump(2) << "\n";
        } else if (*wsa_cmd) {
            require_file(neighbors_path);
            require_file(hyps_path);
            if (rule != "substitution" && rule != "edit-one") throw ValidationError("--rule must be substitution or edit-one");
            const Corpus test = load_corpus_dir(test_dir, Split::test);
            const Corpus tr = load_corpus_dir(train_dir, Split::train);
            const auto pairs = word_substitution_segments(
                test, tr, read_neighbors(neighbors_path),
                rule == "substitution" ? OneWordRule::substitution : OneWordRule::edit_one);
            std::map<std::uint64_t, std::string> hyps;
            for (const auto& h : read_hypotheses(hyps_path)) hyps[h.id] = h.text;
            const double v = wsa(pairs, hyps);
            std::cout << nlohmann::json{{"wsa", v}, {"segments", pairs.size()}, {"rule", rule}}.dump() << "\n";
        } else if (*prun) {
            require_file(config_path);
            PipelineConfig pc = load_pipeline_config(config_path);
            if (!work_dir.empty()) pc.work_dir = fs::absolute(work_dir);
            const PipelineResult res = run_pipeline(pc, &std::cerr);
            std::cout << "executed " << res.executed << ", skipped " << res.skipped << "\n";
            std::cout << "summary: " << res.summary_path.string() << "\n";
        }
    } catch (const DependencyError& e) {
        std::cerr << "dependency error: " << e.what() << "\n";
        return kExitDependency;
    } catch (const ValidationError& e) {
        std::cerr << "validation error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const StateError& e) {
        std::cerr << "state error: " << e.what() << "\n";
        return kExitValidation;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
