#include "iclmt/tokenizer.hpp"

#include <algorithm>
#include <map>

#include "iclmt/util.hpp"
#include "json.hpp"

namespace iclmt {

namespace {

bool is_punct(char c) {
    return std::string_view(".,;:!?()[]{}\"").find(c) != std::string_view::npos;
}

bool is_opening(std::string_view tok) {
    return tok == "(" || tok == "[" || tok == "{";
}

bool is_closing(std::string_view tok) {
    return tok.size() == 1 && std::string_view(".,;:!?)]}").find(tok[0]) != std::string_view::npos;
}

}  // namespace

std::vector<std::string> word_tokens(std::string_view text) {
    std::vector<std::string> out;
    for (const auto& word : split_whitespace(text)) {
        std::size_t b = 0;
        std::size_t e = word.size();
        while (b < e && is_punct(word[b])) {
            out.emplace_back(1, word[b++]);
        }
        std::vector<std::string> trailing;
        while (e > b && is_punct(word[e - 1])) {
            trailing.emplace_back(1, word[--e]);
        }
        if (e > b) {
            out.push_back(word.substr(b, e - b));
        }
        out.insert(out.end(), trailing.rbegin(), trailing.rend());
    }
    return out;
}

std::string join_tokens(std::span<const std::string> tokens) {
    std::string out;
    bool glue_next = false;
    for (const auto& t : tokens) {
        if (!out.empty() && !glue_next && !is_closing(t)) {
            out += ' ';
        }
        out += t;
        glue_next = is_opening(t);
    }
    return out;
}

const std::vector<std::string>& reserved_tokens() {
    static const std::vector<std::string> reserved = {"<pad>", "<bos>", "<eos>", "<sep>", "<unk>"};
    return reserved;
}

bool is_reserved(TokenId id) {
    return id >= 0 && id < kReservedCount;
}

Vocabulary::Vocabulary() : Vocabulary(reserved_tokens()) {}

Vocabulary::Vocabulary(std::vector<std::string> tokens) : tokens_(std::move(tokens)) {
    const auto& reserved = reserved_tokens();
    if (tokens_.size() < reserved.size() || !std::equal(reserved.begin(), reserved.end(), tokens_.begin())) {
        throw ValidationError("vocabulary must start with the reserved tokens");
    }
    for (std::size_t i = 0; i < tokens_.size(); ++i) {
        if (!index_.emplace(tokens_[i], static_cast<TokenId>(i)).second) {
            throw ValidationError("duplicate vocabulary token '" + tokens_[i] + "'");
        }
    }
}

const std::string& Vocabulary::token(TokenId id) const {
    if (id < 0 || static_cast<std::size_t>(id) >= tokens_.size()) {
        throw ValidationError("token id " + std::to_string(id) + " out of range");
    }
    return tokens_[static_cast<std::size_t>(id)];
}

TokenId Vocabulary::id(std::string_view token) const {
    auto it = index_.find(std::string(token));
    if (it == index_.end() || is_reserved(it->second)) {
        return kUnk;
    }
    return it->second;
}

bool Vocabulary::contains(std::string_view token) const {
    return id(token) != kUnk;
}

Vocabulary build_vocab(std::span<const Corpus> corpora, std::size_t max_size) {
    if (max_size <= static_cast<std::size_t>(kReservedCount)) {
        throw ValidationError("vocabulary max_size must exceed the 5 reserved tokens");
    }
    std::map<std::string, std::size_t> freq;
    const auto& reserved = reserved_tokens();
    for (const auto& c : corpora) {
        for (const auto& p : c.pairs) {
            for (const auto* side : {&p.source, &p.target}) {
                for (auto& t : word_tokens(*side)) {
                    if (std::find(reserved.begin(), reserved.end(), t) == reserved.end()) {
                        ++freq[t];
                    }
                }
            }
        }
    }
    std::vector<std::pair<std::string, std::size_t>> ranked(freq.begin(), freq.end());
    std::stable_sort(ranked.begin(), ranked.end(),
                     [](const auto& a, const auto& b) { return a.second > b.second; });
    std::vector<std::string> tokens = reserved;
    for (const auto& [tok, n] : ranked) {
        if (tokens.size() >= max_size) {
            break;
        }
        tokens.push_back(tok);
    }
    return Vocabulary(std::move(tokens));
}

TokenIds encode(std::string_view text, const Vocabulary& vocab) {
    TokenIds ids;
    for (const auto& t : word_tokens(text)) {
        ids.push_back(vocab.id(t));
    }
    return ids;
}

std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab) {
    std::vector<std::string> toks;
    for (TokenId id : ids) {
        const auto& t = vocab.token(id);
        if (!is_reserved(id)) {
            toks.push_back(t);
        }
    }
    return join_tokens(toks);
}

std::string serialize_vocab(const Vocabulary& vocab) {
    nlohmann::json reserved = nlohmann::json::object();
    for (TokenId i = 0; i < kReservedCount; ++i) {
        reserved[reserved_tokens()[static_cast<std::size_t>(i)]] = i;
    }
    nlohmann::json doc = {{"reserved", reserved}, {"size", vocab.size()}, {"tokens", vocab.tokens()}};
    return doc.dump(1) + "\n";
}

void write_vocab(const std::filesystem::path& path, const Vocabulary& vocab) {
    write_file_atomic(path, serialize_vocab(vocab));
}

Vocabulary read_vocab(const std::filesystem::path& path) {
    try {
        auto doc = nlohmann::json::parse(read_file(path));
        for (const auto& [name, id] : doc.at("reserved").items()) {
            auto want = std::find(reserved_tokens().begin(), reserved_tokens().end(), name);
            if (want == reserved_tokens().end() || id.get<TokenId>() != want - reserved_tokens().begin()) {
                throw ValidationError("vocabulary file reserves '" + name + "' at an unexpected id");
            }
        }
        return Vocabulary(doc.at("tokens").get<std::vector<std::string>>());
    } catch (const nlohmann::json::exception& e) {
        throw ValidationError("vocabulary file " + path.string() + ": " + e.what());
    }
}

}  // namespace iclmt
