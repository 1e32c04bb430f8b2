#include "iclmt/synthgen.hpp"

#include <algorithm>
#include <cctype>
#include <cmath>
#include <set>

#include "iclmt/util.hpp"
#include "json.hpp"

namespace iclmt {

namespace {

bool is_marker_char(char c) {
    return std::isalnum(static_cast<unsigned char>(c)) || c == '_';
}

/// Splits a pattern into literal text and marker names (marker entries flagged).
struct Piece {
    std::string text;
    bool marker;
};

std::vector<Piece> tokenize_pattern(std::string_view pattern) {
    std::vector<Piece> pieces;
    std::string literal;
    std::size_t i = 0;
    while (i < pattern.size()) {
        if (pattern[i] == '{') {
            std::size_t j = i + 1;
            while (j < pattern.size() && is_marker_char(pattern[j])) {
                ++j;
            }
            if (j < pattern.size() && pattern[j] == '}' && j > i + 1) {
                if (!literal.empty()) {
                    pieces.push_back({literal, false});
                    literal.clear();
                }
                pieces.push_back({std::string(pattern.substr(i + 1, j - i - 1)), true});
                i = j + 1;
                continue;
            }
        }
        literal += pattern[i++];
    }
    if (!literal.empty()) {
        pieces.push_back({literal, false});
    }
    return pieces;
}

std::string instantiate(const std::vector<Piece>& pieces, const std::vector<std::string>& markers,
                        const std::vector<const SlotValue*>& values, bool source_side) {
    std::string out;
    for (const auto& piece : pieces) {
        if (!piece.marker) {
            out += piece.text;
            continue;
        }
        auto it = std::find(markers.begin(), markers.end(), piece.text);
        const SlotValue* v = values[static_cast<std::size_t>(it - markers.begin())];
        out += source_side ? v->source : v->target;
    }
    return out;
}

}  // namespace

std::vector<std::string> slot_markers(std::string_view pattern) {
    std::vector<std::string> markers;
    for (const auto& piece : tokenize_pattern(pattern)) {
        if (piece.marker && std::find(markers.begin(), markers.end(), piece.text) == markers.end()) {
            markers.push_back(piece.text);
        }
    }
    return markers;
}

void validate_family(const TemplateFamily& family) {
    auto src = slot_markers(family.pattern_source);
    auto tgt = slot_markers(family.pattern_target);
    std::set<std::string> src_set(src.begin(), src.end());
    std::set<std::string> tgt_set(tgt.begin(), tgt.end());
    if (src_set != tgt_set) {
        throw ValidationError("family '" + family.family_id + "': source and target slot markers differ");
    }
    if (src_set.empty()) {
        throw ValidationError("family '" + family.family_id + "': pattern has no slot marker");
    }
    if (family.slot_values.empty()) {
        throw ValidationError("family '" + family.family_id + "': no slot values");
    }
    for (const auto& v : family.slot_values) {
        for (const auto* word : {&v.source, &v.target}) {
            if (split_whitespace(*word).size() != 1 || trim(*word) != *word) {
                throw ValidationError("family '" + family.family_id + "': slot value '" + *word +
                                      "' is not a single whitespace-delimited token");
            }
        }
    }
}

GeneratedCorpora generate(std::span<const TemplateFamily> families, std::uint64_t seed,
                          const SplitRatios& ratios, const std::string& domain) {
    for (double r : {ratios.train, ratios.validation, ratios.test}) {
        if (!(r > 0.0)) {
            throw ValidationError("split ratios must be positive");
        }
    }
    if (std::abs(ratios.train + ratios.validation + ratios.test - 1.0) > 1e-9) {
        throw ValidationError("split ratios must sum to 1");
    }
    for (const auto& f : families) {
        validate_family(f);
    }

    GeneratedCorpora out{{domain, Split::train, {}}, {domain, Split::validation, {}}, {domain, Split::test, {}}};
    Rng rng(seed);
    for (const auto& family : families) {
        auto markers = slot_markers(family.pattern_source);
        auto src_pieces = tokenize_pattern(family.pattern_source);
        auto tgt_pieces = tokenize_pattern(family.pattern_target);

        // Cartesian product over markers, odometer order.
        std::vector<std::pair<std::string, std::string>> instances;
        std::vector<std::size_t> digits(markers.size(), 0);
        const std::size_t base = family.slot_values.size();
        while (true) {
            std::vector<const SlotValue*> values;
            for (auto d : digits) {
                values.push_back(&family.slot_values[d]);
            }
            instances.emplace_back(instantiate(src_pieces, markers, values, true),
                                   instantiate(tgt_pieces, markers, values, false));
            std::size_t pos = 0;
            while (pos < digits.size() && ++digits[pos] == base) {
                digits[pos++] = 0;
            }
            if (pos == digits.size()) {
                break;
            }
        }

        std::vector<std::size_t> order(instances.size());
        for (std::size_t i = 0; i < order.size(); ++i) {
            order[i] = i;
        }
        rng.shuffle(order);
        std::vector<Split> assignment(instances.size(), Split::train);
        for (std::size_t rank = 1; rank < order.size(); ++rank) {
            Split s = Split::test;
            if (rank > 1) {
                double u = rng.uniform();
                s = u < ratios.train ? Split::train
                    : u < ratios.train + ratios.validation ? Split::validation
                                                            : Split::test;
            }
            assignment[order[rank]] = s;
        }
        for (std::size_t i = 0; i < instances.size(); ++i) {
            Corpus& c = assignment[i] == Split::train ? out.train
                        : assignment[i] == Split::validation ? out.validation
                                                             : out.test;
            c.pairs.push_back({c.pairs.size(), trim(instances[i].first), trim(instances[i].second)});
        }
    }
    return out;
}

SplitRatios parse_ratios(std::string_view text) {
    std::vector<double> parts;
    std::string cur;
    for (char c : std::string(text) + ",") {
        if (c == ',') {
            try {
                std::size_t used = 0;
                parts.push_back(std::stod(cur, &used));
                if (used != trim(cur).size() && trim(cur) != cur.substr(0, used)) {
                    throw ValidationError("bad ratio '" + cur + "'");
                }
            } catch (const std::logic_error&) {
                throw ValidationError("bad ratio '" + cur + "'");
            }
            cur.clear();
        } else {
            cur += c;
        }
    }
    if (parts.size() != 3) {
        throw ValidationError("expected three comma-separated ratios");
    }
    return {parts[0], parts[1], parts[2]};
}

std::vector<TemplateFamily> parse_families(std::string_view json_text) {
    nlohmann::json doc;
    try {
        doc = nlohmann::json::parse(json_text);
    } catch (const nlohmann::json::parse_error& e) {
        throw ValidationError(std::string("template file: ") + e.what());
    }
    if (!doc.is_array()) {
        throw ValidationError("template file must hold a JSON list of families");
    }
    std::vector<TemplateFamily> families;
    for (const auto& item : doc) {
        try {
            TemplateFamily f;
            f.family_id = item.at("family_id").get<std::string>();
            f.pattern_source = item.at("source").get<std::string>();
            f.pattern_target = item.at("target").get<std::string>();
            for (const auto& v : item.at("slots")) {
                f.slot_values.push_back({v.at(0).get<std::string>(), v.at(1).get<std::string>()});
            }
            families.push_back(std::move(f));
        } catch (const nlohmann::json::exception& e) {
            throw ValidationError(std::string("template family: ") + e.what());
        }
    }
    return families;
}

std::vector<TemplateFamily> load_families(const std::filesystem::path& path) {
    return parse_families(read_file(path));
}

std::string serialize_families(std::span<const TemplateFamily> families) {
    nlohmann::json doc = nlohmann::json::array();
    for (const auto& f : families) {
        nlohmann::json slots = nlohmann::json::array();
        for (const auto& v : f.slot_values) {
            slots.push_back({v.source, v.target});
        }
        doc.push_back({{"family_id", f.family_id},
                       {"source", f.pattern_source},
                       {"target", f.pattern_target},
                       {"slots", slots}});
    }
    return doc.dump(1) + "\n";
}

std::vector<SlotValue> default_slot_lexicon() {
    return {{"men's", "Herren"}, {"women's", "Damen"}, {"kids'", "Kinder"}, {"red", "rot"},
            {"blue", "blau"},    {"green", "grün"},    {"black", "schwarz"}, {"white", "weiß"},
            {"small", "klein"},  {"large", "groß"},    {"new", "neu"},      {"old", "alt"},
            {"fast", "schnell"}, {"light", "leicht"},  {"soft", "weich"},   {"strong", "stark"}};
}

namespace {

std::vector<std::string> word_pool(Rng& rng, std::size_t count, std::span<const std::string_view> onsets,
                                   std::span<const std::string_view> nuclei, std::set<std::string>& taken) {
    std::vector<std::string> pool;
    while (pool.size() < count) {
        std::string w;
        std::size_t syllables = 2 + rng.below(2);
        for (std::size_t s = 0; s < syllables; ++s) {
            w += onsets[rng.below(onsets.size())];
            w += nuclei[rng.below(nuclei.size())];
        }
        if (taken.insert(w).second) {
            pool.push_back(w);
        }
    }
    return pool;
}

}  // namespace

std::vector<TemplateFamily> sample_families(const FamilySamplerConfig& config,
                                            std::span<const SlotValue> lexicon) {
    if (config.min_words == 0 || config.max_words < config.min_words) {
        throw ValidationError("sampler: need 0 < min_words <= max_words");
    }
    if (config.values_per_family == 0 || config.values_per_family > lexicon.size()) {
        throw ValidationError("sampler: values_per_family must be in [1, lexicon size]");
    }
    static constexpr std::string_view src_onsets[] = {"b", "d", "f", "g", "k", "l", "m", "n",
                                                      "p", "r", "s", "t", "v", "w", "br", "st"};
    static constexpr std::string_view src_nuclei[] = {"a", "e", "i", "o", "u", "ay", "ee", "oo"};
    static constexpr std::string_view tgt_onsets[] = {"sch", "z", "h", "k", "l", "m", "n", "pf",
                                                      "r", "s", "t", "w", "gr", "kl", "st", "b"};
    static constexpr std::string_view tgt_nuclei[] = {"a", "ä", "e", "ei", "au", "o", "ü", "ie"};

    Rng lang(config.language_seed);
    std::set<std::string> taken;
    for (const auto& v : lexicon) {
        taken.insert(v.source);
        taken.insert(v.target);
    }
    auto src_words = word_pool(lang, config.source_pool, src_onsets, src_nuclei, taken);
    auto tgt_words = word_pool(lang, config.target_pool, tgt_onsets, tgt_nuclei, taken);

    Rng rng(config.family_seed);
    std::set<std::string> seen_patterns;
    std::vector<TemplateFamily> families;
    while (families.size() < config.families) {
        auto draw = [&](const std::vector<std::string>& pool) {
            std::size_t n = config.min_words + rng.below(config.max_words - config.min_words + 1);
            std::vector<std::string> words;
            for (std::size_t i = 0; i < n; ++i) {
                words.push_back(pool[rng.below(pool.size())]);
            }
            words.insert(words.begin() + static_cast<std::ptrdiff_t>(rng.below(n + 1)), "{A}");
            std::string text;
            for (const auto& w : words) {
                text += (text.empty() ? "" : " ") + w;
            }
            return text;
        };
        TemplateFamily f;
        f.pattern_source = draw(src_words);
        f.pattern_target = draw(tgt_words);
        std::vector<std::size_t> idx(lexicon.size());
        for (std::size_t i = 0; i < idx.size(); ++i) {
            idx[i] = i;
        }
        rng.shuffle(idx);
        for (std::size_t i = 0; i < config.values_per_family; ++i) {
            f.slot_values.push_back(lexicon[idx[i]]);
        }
        if (!seen_patterns.insert(f.pattern_source).second) {
            continue;
        }
        f.family_id = config.id_prefix + std::to_string(families.size());
        families.push_back(std::move(f));
    }
    return families;
}

}  // namespace iclmt
