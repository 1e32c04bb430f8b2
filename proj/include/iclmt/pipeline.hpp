#pragma once

#include <cstdint>
#include <filesystem>
#include <map>
#include <optional>
#include <ostream>
#include <span>
#include <string>
#include <vector>

#include "iclmt/contextizer.hpp"
#include "iclmt/corpus.hpp"
#include "iclmt/embedder.hpp"
#include "iclmt/evaluator.hpp"
#include "iclmt/knn_index.hpp"
#include "iclmt/model.hpp"
#include "iclmt/synthgen.hpp"
#include "iclmt/tokenizer.hpp"
#include "iclmt/trainer.hpp"
#include "json.hpp"

namespace iclmt {

// ---------------------------------------------------------------------------
// Building blocks shared by the pipeline and the command-line tool

enum class ContextFormat { plain, stage0, stage2a, stage2b };

std::string to_string(ContextFormat format);
/// Accepts "plain", "0", "2a", "2b".
ContextFormat parse_context_format(std::string_view name);

/// Serializes every query of `queries` with its first k neighbors from
/// `memory`, then truncates to `max_len`. `plain` ignores the neighbors.
/// Throws ValidationError if a query has no neighbor list (k > 0).
std::vector<EncodedSample> build_contexts(const Corpus& queries, const Corpus& memory,
                                          std::span<const NeighborList> neighbors, const Vocabulary& vocab,
                                          ContextFormat format, std::size_t k, std::size_t max_len);

/// Greedy-decodes the inference prefix of every sample.
std::vector<Hypothesis> decode_samples(const ModelParams& params, std::span<const EncodedSample> samples,
                                       const Vocabulary& vocab, std::size_t max_new);

/// BLEU, empty rate and (when `wsa_pairs` is non-empty) WSA of hypotheses
/// against the test corpus.
EvalReport evaluate_hypotheses(std::span<const Hypothesis> hyps, const Corpus& test,
                               std::span<const SubstitutionPair> wsa_pairs);

std::vector<std::string> segment_sources(const Corpus& corpus);

// ---------------------------------------------------------------------------
// Pipeline configuration

/// Where a corpus comes from: sampled template families, a template file,
/// or an existing corpus directory.
struct CorpusSource {
    enum class Kind { sampled, templates, directory };

    std::string name;
    Kind kind = Kind::sampled;
    FamilySamplerConfig sampler;
    std::filesystem::path path;
    SplitRatios ratios;
    std::uint64_t seed = 1;
    /// The raw JSON section; part of the corpus step fingerprint.
    nlohmann::json settings;
};

struct PipelineConfig {
    std::filesystem::path work_dir;
    std::uint64_t seed = 1;
    /// Plain pre-training data for the baseline.
    CorpusSource general;
    /// Out-of-domain data for stage 2; defaults to `general` when absent.
    std::optional<CorpusSource> news;
    /// Adaptation and test domains.
    std::vector<CorpusSource> domains;
    /// Pre-built vocabulary; built from the train splits when absent.
    std::optional<std::filesystem::path> vocab_path;
    std::size_t vocab_max_size = 4096;
    EmbedderConfig embedder;
    IndexConfig index;
    ModelConfig model;
    AdapterConfig adapters;
    std::uint64_t adapter_seed = 7;
    std::size_t train_k = 1;
    std::vector<std::size_t> eval_k{1};
    std::size_t max_len = 256;
    std::size_t max_new = 48;
    /// Subset of {"baseline", "0", "1", "2a", "2b", "3"}.
    std::vector<std::string> stages{"baseline", "0", "1", "2b", "3"};
    std::map<std::string, TrainConfig> train;

    bool runs(std::string_view stage) const;
};

/// Relative paths in the document resolve against `base_dir`.
PipelineConfig pipeline_config_from_json(const nlohmann::json& j, const std::filesystem::path& base_dir);
PipelineConfig load_pipeline_config(const std::filesystem::path& path);

// ---------------------------------------------------------------------------
// Running

struct StepRecord {
    std::string name;
    std::string fingerprint;
    bool executed = false;
};

struct PipelineResult {
    std::vector<StepRecord> steps;
    std::size_t executed = 0;
    std::size_t skipped = 0;
    std::filesystem::path manifest_path;
    std::filesystem::path summary_path;
};

/// Runs corpora -> vocab -> embed -> index -> retrieve -> contexts -> train ->
/// decode -> eval -> summary under `config.work_dir`. A step is skipped when
/// its fingerprint (parameters plus input content hashes) and output hashes
/// match the manifest. Throws DependencyError when an input artifact is absent.
PipelineResult run_pipeline(const PipelineConfig& config, std::ostream* log = nullptr);

}  // namespace iclmt
