#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <vector>

#include "iclmt/corpus.hpp"
#include "iclmt/knn_index.hpp"
#include "iclmt/tokenizer.hpp"

namespace iclmt {

/// A retrieved neighbor resolved to its translation-memory pair.
struct ContextNeighbor {
    SegmentPair pair;
    double distance = 0.0;
};

/// Query pair (s, t) plus its k neighbors. k = 0 is the 0-shot case.
struct ContextExample {
    SegmentPair query;
    std::vector<ContextNeighbor> neighbors;

    std::size_t k() const noexcept { return neighbors.size(); }
};

/// Resolves the first `k` entries of `list` against `memory`.
ContextExample make_example(const SegmentPair& query, const NeighborList& list, const Corpus& memory, std::size_t k);

enum class SampleStage { stage0, stage2a, stage2b };

std::string to_string(SampleStage stage);
SampleStage parse_sample_stage(std::string_view name);

/// Encoder/decoder token sequences with one loss-mask bit per predicted
/// decoder position (`loss_mask.size() == decoder_ids.size() - 1`).
///
/// Neighbor blocks are laid out most-distant first. `source_blocks[i]` and
/// `target_blocks[i]` are the token lengths of the i-th serialized block,
/// including its trailing `<sep>` for stage-2 formats. `neighbor_ids` lists
/// the neighbors in ascending distance order (s_1 first).
struct EncodedSample {
    TokenIds encoder_ids;
    TokenIds decoder_ids;
    std::vector<std::uint8_t> loss_mask;
    SampleStage stage = SampleStage::stage2a;
    std::uint64_t query_id = 0;
    std::vector<std::uint64_t> neighbor_ids;
    std::vector<std::size_t> source_blocks;
    std::vector<std::size_t> target_blocks;
    /// Length of the decoder prefix supplied at inference time.
    std::size_t prefix_length = 1;

    std::size_t k() const noexcept { return neighbor_ids.size(); }
    bool operator==(const EncodedSample&) const = default;
};

/// <bos> s_k ... s_1 s <eos> / <bos> t_k ... t_1 t <eos>, space joined.
/// The mask covers the predictions of t and <eos>. Throws ValidationError when k = 0.
EncodedSample serialize_stage0(const ContextExample& example, const Vocabulary& vocab);

/// <bos> s_k <sep> ... s_1 <sep> s <eos> / <bos> t_k <sep> ... t_1 <sep> t <eos>.
/// Unmasked (stage 2a): every prediction counts. Masked (stage 2b): only the
/// predictions of t's tokens and the terminal <eos>.
EncodedSample serialize_stage2(const ContextExample& example, const Vocabulary& vocab, bool masked);

/// The 0-shot training sample (<bos> s <eos> / <bos> t <eos>, full mask).
EncodedSample serialize_plain(const SegmentPair& pair, const Vocabulary& vocab);

enum class PrefixStyle { stage0, stage2 };

struct InferenceInput {
    TokenIds encoder_ids;
    TokenIds decoder_prefix;
};

InferenceInput inference_prefix(const ContextExample& example, const Vocabulary& vocab, PrefixStyle style);
/// Same, derived from an already serialized sample.
InferenceInput inference_prefix(const EncodedSample& sample);

/// "English: <src>\nGerman: <tgt>\n" per neighbor (most distant first), then
/// "English: <s>\nGerman:". Throws ValidationError when k = 0.
std::string llm_prompt(const ContextExample& example);

/// Drops whole neighbor blocks, most distant first, until both sequences fit
/// in `max_len`. Throws OverflowError if the bare query does not fit.
EncodedSample truncate_to_budget(const EncodedSample& sample, std::size_t max_len);

/// Teacher-forcing targets: decoder_ids shifted left by one.
TokenIds prediction_targets(const EncodedSample& sample);

std::string serialize_samples(std::span<const EncodedSample> samples);
void write_samples(const std::filesystem::path& path, std::span<const EncodedSample> samples);
std::vector<EncodedSample> read_samples(const std::filesystem::path& path);

}  // namespace iclmt
