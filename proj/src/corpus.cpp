#include "iclmt/corpus.hpp"

#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "iclmt/util.hpp"
#include "json.hpp"

namespace iclmt {

std::string to_string(Split split) {
    switch (split) {
        case Split::train:
            return "train";
        case Split::validation:
            return "validation";
        case Split::test:
            return "test";
    }
    return "unknown";
}

Split parse_split(std::string_view name) {
    if (name == "train") {
        return Split::train;
    }
    if (name == "validation" || name == "valid") {
        return Split::validation;
    }
    if (name == "test") {
        return Split::test;
    }
    throw ValidationError("unknown split '" + std::string(name) + "'");
}

const SegmentPair& Corpus::at(std::uint64_t id) const {
    if (id >= pairs.size()) {
        throw ValidationError("pair id " + std::to_string(id) + " out of range for " + domain + "/" +
                              to_string(split));
    }
    return pairs[id];
}

Corpus parse_corpus(std::istream& in, std::string domain, Split split) {
    Corpus corpus{std::move(domain), split, {}};
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        nlohmann::json record;
        try {
            record = nlohmann::json::parse(line);
        } catch (const nlohmann::json::parse_error& e) {
            throw ParseError(line_no, std::string("invalid JSON: ") + e.what());
        }
        if (!record.is_object()) {
            throw ParseError(line_no, "record is not a JSON object");
        }
        for (const char* key : {"source", "target"}) {
            auto it = record.find(key);
            if (it == record.end() || !it->is_string()) {
                throw ParseError(line_no, std::string("missing string field '") + key + "'");
            }
        }
        SegmentPair pair{corpus.pairs.size(), trim(record["source"].get<std::string>()),
                         trim(record["target"].get<std::string>())};
        if (pair.source.empty() || pair.target.empty()) {
            throw ValidationError("line " + std::to_string(line_no) + ": empty " +
                                  (pair.source.empty() ? "source" : "target") + " after trimming");
        }
        corpus.pairs.push_back(std::move(pair));
    }
    return corpus;
}

Corpus load_corpus(const std::filesystem::path& path, std::string domain, Split split) {
    std::ifstream in(path);
    if (!in) {
        throw DependencyError("cannot open corpus file " + path.string());
    }
    return parse_corpus(in, std::move(domain), split);
}

std::string serialize_corpus(const Corpus& corpus) {
    std::string out;
    for (const auto& pair : corpus.pairs) {
        nlohmann::json record = {{"source", pair.source}, {"target", pair.target}};
        out += record.dump();
        out += '\n';
    }
    return out;
}

void write_corpus(const std::filesystem::path& path, const Corpus& corpus) {
    write_file_atomic(path, serialize_corpus(corpus));
}

std::filesystem::path corpus_file(const std::filesystem::path& domain_dir, Split split) {
    return domain_dir / (to_string(split) + ".jsonl");
}

Corpus load_corpus_dir(const std::filesystem::path& domain_dir, Split split) {
    auto dir = domain_dir;
    if (!dir.has_filename()) {
        dir = dir.parent_path();
    }
    return load_corpus(corpus_file(dir, split), dir.filename().string(), split);
}

std::vector<CorpusStatsRow> corpus_stats(std::span<const Corpus> corpora) {
    std::map<std::string, std::set<std::string>> train_sources;
    for (const auto& c : corpora) {
        if (c.split == Split::train) {
            auto& sources = train_sources[c.domain];
            for (const auto& p : c.pairs) {
                sources.insert(p.source);
            }
        }
    }

    std::vector<CorpusStatsRow> rows;
    for (const auto& c : corpora) {
        CorpusStatsRow row{c.domain, c.split, c.pairs.size(), 0, 0};
        std::set<std::pair<std::string, std::string>> seen;
        for (const auto& p : c.pairs) {
            if (!seen.emplace(p.source, p.target).second) {
                ++row.duplicate_pairs;
            }
        }
        if (c.split != Split::train) {
            auto it = train_sources.find(c.domain);
            if (it != train_sources.end()) {
                for (const auto& p : c.pairs) {
                    row.train_source_overlap += it->second.count(p.source);
                }
            }
        }
        rows.push_back(std::move(row));
    }
    return rows;
}

}  // namespace iclmt
