#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclmt/corpus.hpp"
#include "iclmt/knn_index.hpp"
#include "iclmt/model.hpp"
#include "json.hpp"

namespace iclmt {

/// mteval-v13a tokenization as used by standard corpus BLEU tooling.
std::vector<std::string> tokenize_13a(std::string_view line);

/// Corpus BLEU in [0, 100]: orders 1-4, clipped counts, brevity penalty,
/// no smoothing. Throws ValidationError on empty or mismatched lists.
double corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references);

double empty_rate(std::span<const DecodeResult> results);
double empty_rate(std::span<const bool> is_empty);

struct DistanceStats {
    double mean = 0.0;
    std::size_t used = 0;
    std::size_t skipped = 0;
};

/// Mean over queries of the mean distance to their top-k neighbors. Queries
/// with fewer than k neighbors are skipped and counted.
DistanceStats avg_knn_distance(std::span<const NeighborList> neighbors, std::size_t k);

enum class OneWordRule {
    /// Same token count, exactly one differing position.
    substitution,
    /// Additionally admits a single inserted or deleted token.
    edit_one,
};

/// True if the whitespace tokens of a and b differ by exactly one word under `rule`.
bool differs_by_one_word(std::string_view a, std::string_view b, OneWordRule rule = OneWordRule::substitution);

struct SubstitutionPair {
    SegmentPair test;
    SegmentPair neighbor;
};

/// Test pairs whose nearest train neighbor's source differs by exactly one word.
std::vector<SubstitutionPair> word_substitution_segments(const Corpus& test, const Corpus& train,
                                                         std::span<const NeighborList> neighbors,
                                                         OneWordRule rule = OneWordRule::substitution);

/// Fraction of selected pairs whose hypothesis equals the reference after
/// whitespace normalization. Throws ValidationError for a missing hypothesis
/// or an empty selection.
double wsa(std::span<const SubstitutionPair> selected, const std::map<std::uint64_t, std::string>& hypotheses);

/// Sample Pearson correlation. Throws ValidationError on length mismatch,
/// fewer than two points, or zero variance.
double pearson(std::span<const double> x, std::span<const double> y);

struct EvalReport {
    std::string system;
    std::size_t k = 0;
    double bleu = 0.0;
    double empty_rate = 0.0;
    std::optional<double> wsa;
    std::size_t wsa_segments = 0;
    std::map<std::size_t, double> avg_cosine_distance;
    std::optional<double> pearson_r;
    std::size_t evaluated = 0;
    std::size_t skipped = 0;
    nlohmann::json metadata = nlohmann::json::object();
};

nlohmann::json to_json(const EvalReport& report);

/// One hypothesis per line: {"id": N, "text": "...", "empty": bool}.
struct Hypothesis {
    std::uint64_t id = 0;
    std::string text;
    bool empty = false;
};

std::string serialize_hypotheses(std::span<const Hypothesis> hyps);
std::vector<Hypothesis> read_hypotheses(const std::filesystem::path& path);

}  // namespace iclmt
