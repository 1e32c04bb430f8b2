#pragma once

#include <cstdint>
#include <filesystem>
#include <istream>
#include <span>
#include <string>
#include <vector>

namespace iclmt {

enum class Split { train, validation, test };

std::string to_string(Split split);
/// Accepts "train", "validation" (or "valid"), "test".
Split parse_split(std::string_view name);

/// One source/target sentence pair. `id` is the pair's position in its split.
struct SegmentPair {
    std::uint64_t id = 0;
    std::string source;
    std::string target;

    bool operator==(const SegmentPair&) const = default;
};

struct Corpus {
    std::string domain;
    Split split = Split::train;
    std::vector<SegmentPair> pairs;

    std::size_t size() const noexcept { return pairs.size(); }
    const SegmentPair& at(std::uint64_t id) const;
};

/// Parses one-JSON-object-per-line records with "source" and "target" keys.
/// Ids are assigned 0..n-1 in file order; blank lines are skipped.
/// Throws ParseError (with line number) for malformed records and
/// ValidationError for fields that are empty after trimming.
Corpus parse_corpus(std::istream& in, std::string domain, Split split);
Corpus load_corpus(const std::filesystem::path& path, std::string domain, Split split);

std::string serialize_corpus(const Corpus& corpus);
void write_corpus(const std::filesystem::path& path, const Corpus& corpus);

/// Corpus directories hold one `<split>.jsonl` per split; the directory name is the domain.
std::filesystem::path corpus_file(const std::filesystem::path& domain_dir, Split split);
Corpus load_corpus_dir(const std::filesystem::path& domain_dir, Split split);

struct CorpusStatsRow {
    std::string domain;
    Split split = Split::train;
    std::size_t segments = 0;
    /// Pairs whose (source, target) already occurred earlier in the same split.
    std::size_t duplicate_pairs = 0;
    /// Non-train splits only: pairs whose source also occurs in the domain's train split.
    std::size_t train_source_overlap = 0;
};

std::vector<CorpusStatsRow> corpus_stats(std::span<const Corpus> corpora);

}  // namespace iclmt
