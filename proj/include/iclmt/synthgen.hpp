#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "iclmt/corpus.hpp"

namespace iclmt {

struct SlotValue {
    std::string source;
    std::string target;

    bool operator==(const SlotValue&) const = default;
};

/// A sentence template with `{NAME}` slot markers on both sides. Every marker
/// is filled from `slot_values`; a family with several markers expands to the
/// Cartesian product of values.
struct TemplateFamily {
    std::string family_id;
    std::string pattern_source;
    std::string pattern_target;
    std::vector<SlotValue> slot_values;

    bool operator==(const TemplateFamily&) const = default;
};

struct SplitRatios {
    double train = 0.8;
    double validation = 0.1;
    double test = 0.1;
};

struct GeneratedCorpora {
    Corpus train;
    Corpus validation;
    Corpus test;
};

/// Distinct `{NAME}` markers in order of first appearance.
std::vector<std::string> slot_markers(std::string_view pattern);

/// Throws ValidationError on mismatched markers, empty slot lists or
/// multi-token slot words.
void validate_family(const TemplateFamily& family);

/// Instantiates every family and assigns whole instances to splits.
///
/// Per family the instances are shuffled with the seeded generator; the first
/// goes to train, the second (if any) to test, and the rest are drawn by
/// `ratios`. Every test and validation pair therefore has an in-family train
/// pair that differs only in slot words.
GeneratedCorpora generate(std::span<const TemplateFamily> families, std::uint64_t seed,
                          const SplitRatios& ratios, const std::string& domain = "synthetic");

SplitRatios parse_ratios(std::string_view text);

std::vector<TemplateFamily> parse_families(std::string_view json_text);
std::vector<TemplateFamily> load_families(const std::filesystem::path& path);
std::string serialize_families(std::span<const TemplateFamily> families);

/// Parameters for drawing random template families over a shared pseudo-word
/// lexicon. Families drawn with the same `language_seed` share word pools, so
/// corpora built from different `family_seed`s are lexically compatible but
/// structurally disjoint.
struct FamilySamplerConfig {
    std::uint64_t language_seed = 1;
    std::uint64_t family_seed = 1;
    std::string id_prefix = "f";
    std::size_t families = 10;
    std::size_t values_per_family = 4;
    std::size_t min_words = 4;
    std::size_t max_words = 7;
    std::size_t source_pool = 60;
    std::size_t target_pool = 60;
};

/// Built-in slot lexicon (English-like -> German-like single words).
std::vector<SlotValue> default_slot_lexicon();

std::vector<TemplateFamily> sample_families(const FamilySamplerConfig& config,
                                            std::span<const SlotValue> lexicon);

}  // namespace iclmt
