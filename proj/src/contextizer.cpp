#include "iclmt/contextizer.hpp"

#include <algorithm>
#include <fstream>
#include <numeric>

#include "iclmt/util.hpp"
#include "json.hpp"

namespace iclmt {

std::string to_string(SampleStage stage) {
    switch (stage) {
        case SampleStage::stage0:
            return "0";
        case SampleStage::stage2a:
            return "2a";
        case SampleStage::stage2b:
            return "2b";
    }
    return "?";
}

SampleStage parse_sample_stage(std::string_view name) {
    if (name == "0" || name == "stage0") {
        return SampleStage::stage0;
    }
    if (name == "2a" || name == "stage2a") {
        return SampleStage::stage2a;
    }
    if (name == "2b" || name == "stage2b") {
        return SampleStage::stage2b;
    }
    throw ValidationError("unknown sample stage '" + std::string(name) + "'");
}

ContextExample make_example(const SegmentPair& query, const NeighborList& list, const Corpus& memory, std::size_t k) {
    ContextExample ex{query, {}};
    for (std::size_t i = 0; i < list.neighbors.size() && i < k; ++i) {
        const auto& n = list.neighbors[i];
        ex.neighbors.push_back({memory.at(n.pair_id), n.distance});
    }
    return ex;
}

namespace {

/// Neighbors in serialization order: most distant first, ties by descending id
/// (the mirror of the ascending (distance, id) retrieval order).
std::vector<const ContextNeighbor*> most_distant_first(const ContextExample& ex) {
    std::vector<const ContextNeighbor*> order;
    for (const auto& n : ex.neighbors) {
        order.push_back(&n);
    }
    std::sort(order.begin(), order.end(), [](const ContextNeighbor* a, const ContextNeighbor* b) {
        return a->distance > b->distance || (a->distance == b->distance && a->pair.id > b->pair.id);
    });
    return order;
}

void append(TokenIds& out, const TokenIds& in) {
    out.insert(out.end(), in.begin(), in.end());
}

EncodedSample serialize(const ContextExample& ex, const Vocabulary& vocab, SampleStage stage) {
    const bool with_sep = stage != SampleStage::stage0;
    EncodedSample s;
    s.stage = stage;
    s.query_id = ex.query.id;
    s.encoder_ids.push_back(kBos);
    s.decoder_ids.push_back(kBos);
    auto order = most_distant_first(ex);
    for (const auto* n : order) {
        auto src = encode(n->pair.source, vocab);
        auto tgt = encode(n->pair.target, vocab);
        if (with_sep) {
            src.push_back(kSep);
            tgt.push_back(kSep);
        }
        s.source_blocks.push_back(src.size());
        s.target_blocks.push_back(tgt.size());
        append(s.encoder_ids, src);
        append(s.decoder_ids, tgt);
    }
    for (auto it = order.rbegin(); it != order.rend(); ++it) {
        s.neighbor_ids.push_back((*it)->pair.id);
    }
    s.prefix_length = s.decoder_ids.size();
    append(s.encoder_ids, encode(ex.query.source, vocab));
    s.encoder_ids.push_back(kEos);
    append(s.decoder_ids, encode(ex.query.target, vocab));
    s.decoder_ids.push_back(kEos);

    s.loss_mask.assign(s.decoder_ids.size() - 1, 1);
    if (stage != SampleStage::stage2a) {
        for (std::size_t j = 0; j + 1 < s.prefix_length; ++j) {
            s.loss_mask[j] = 0;
        }
    }
    return s;
}

}  // namespace

EncodedSample serialize_stage0(const ContextExample& example, const Vocabulary& vocab) {
    if (example.k() == 0) {
        throw ValidationError("stage 0 serialization requires at least one neighbor");
    }
    return serialize(example, vocab, SampleStage::stage0);
}

EncodedSample serialize_stage2(const ContextExample& example, const Vocabulary& vocab, bool masked) {
    return serialize(example, vocab, masked ? SampleStage::stage2b : SampleStage::stage2a);
}

EncodedSample serialize_plain(const SegmentPair& pair, const Vocabulary& vocab) {
    return serialize(ContextExample{pair, {}}, vocab, SampleStage::stage2a);
}

InferenceInput inference_prefix(const ContextExample& example, const Vocabulary& vocab, PrefixStyle style) {
    auto s = serialize(example, vocab, style == PrefixStyle::stage0 ? SampleStage::stage0 : SampleStage::stage2b);
    return inference_prefix(s);
}

InferenceInput inference_prefix(const EncodedSample& sample) {
    if (sample.prefix_length == 0 || sample.prefix_length > sample.decoder_ids.size()) {
        throw ValidationError("sample has an invalid prefix length");
    }
    return {sample.encoder_ids,
            TokenIds(sample.decoder_ids.begin(),
                     sample.decoder_ids.begin() + static_cast<std::ptrdiff_t>(sample.prefix_length))};
}

std::string llm_prompt(const ContextExample& example) {
    if (example.k() == 0) {
        throw ValidationError("the LLM prompt needs at least one example (k >= 1)");
    }
    std::string out;
    for (const auto* n : most_distant_first(example)) {
        out += "English: " + n->pair.source + "\nGerman: " + n->pair.target + "\n";
    }
    out += "English: " + example.query.source + "\nGerman:";
    return out;
}

EncodedSample truncate_to_budget(const EncodedSample& sample, std::size_t max_len) {
    const std::size_t src_ctx = std::accumulate(sample.source_blocks.begin(), sample.source_blocks.end(), std::size_t{0});
    const std::size_t tgt_ctx = std::accumulate(sample.target_blocks.begin(), sample.target_blocks.end(), std::size_t{0});
    if (sample.encoder_ids.size() - src_ctx > max_len || sample.decoder_ids.size() - tgt_ctx > max_len) {
        throw OverflowError("query " + std::to_string(sample.query_id) + " does not fit in " +
                            std::to_string(max_len) + " tokens even without context");
    }
    EncodedSample out = sample;
    while (out.encoder_ids.size() > max_len || out.decoder_ids.size() > max_len) {
        const auto sb = static_cast<std::ptrdiff_t>(out.source_blocks.front());
        const auto tb = static_cast<std::ptrdiff_t>(out.target_blocks.front());
        out.encoder_ids.erase(out.encoder_ids.begin() + 1, out.encoder_ids.begin() + 1 + sb);
        out.decoder_ids.erase(out.decoder_ids.begin() + 1, out.decoder_ids.begin() + 1 + tb);
        out.loss_mask.erase(out.loss_mask.begin(), out.loss_mask.begin() + tb);
        out.source_blocks.erase(out.source_blocks.begin());
        out.target_blocks.erase(out.target_blocks.begin());
        out.neighbor_ids.pop_back();
        out.prefix_length -= static_cast<std::size_t>(tb);
    }
    return out;
}

TokenIds prediction_targets(const EncodedSample& sample) {
    if (sample.decoder_ids.size() < 2) {
        return {};
    }
    return TokenIds(sample.decoder_ids.begin() + 1, sample.decoder_ids.end());
}

std::string serialize_samples(std::span<const EncodedSample> samples) {
    std::string out;
    for (const auto& s : samples) {
        nlohmann::json j = {{"encoder_ids", s.encoder_ids},
                            {"decoder_ids", s.decoder_ids},
                            {"loss_mask", s.loss_mask},
                            {"stage", to_string(s.stage)},
                            {"k", s.k()},
                            {"query_id", s.query_id},
                            {"neighbor_ids", s.neighbor_ids},
                            {"source_blocks", s.source_blocks},
                            {"target_blocks", s.target_blocks},
                            {"prefix_length", s.prefix_length}};
        out += j.dump();
        out += '\n';
    }
    return out;
}

void write_samples(const std::filesystem::path& path, std::span<const EncodedSample> samples) {
    write_file_atomic(path, serialize_samples(samples));
}

std::vector<EncodedSample> read_samples(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DependencyError("cannot open contexts file " + path.string());
    }
    std::vector<EncodedSample> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        try {
            auto j = nlohmann::json::parse(line);
            EncodedSample s;
            s.encoder_ids = j.at("encoder_ids").get<TokenIds>();
            s.decoder_ids = j.at("decoder_ids").get<TokenIds>();
            if (j.contains("loss_mask")) {
                s.loss_mask = j.at("loss_mask").get<std::vector<std::uint8_t>>();
            }
            s.stage = parse_sample_stage(j.at("stage").get<std::string>());
            s.query_id = j.at("query_id").get<std::uint64_t>();
            s.neighbor_ids = j.value("neighbor_ids", std::vector<std::uint64_t>{});
            s.source_blocks = j.value("source_blocks", std::vector<std::size_t>{});
            s.target_blocks = j.value("target_blocks", std::vector<std::size_t>{});
            s.prefix_length = j.value("prefix_length", std::size_t{1});
            if (j.contains("k") && j.at("k").get<std::size_t>() != s.neighbor_ids.size()) {
                throw ParseError(line_no, "k does not match neighbor_ids");
            }
            out.push_back(std::move(s));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line_no, e.what());
        }
    }
    return out;
}

}  // namespace iclmt
