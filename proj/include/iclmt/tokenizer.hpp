#pragma once

#include <cstdint>
#include <filesystem>
#include <span>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "iclmt/corpus.hpp"

namespace iclmt {

using TokenId = std::int32_t;
using TokenIds = std::vector<TokenId>;

inline constexpr TokenId kPad = 0;
inline constexpr TokenId kBos = 1;
inline constexpr TokenId kEos = 2;
inline constexpr TokenId kSep = 3;
inline constexpr TokenId kUnk = 4;
inline constexpr TokenId kReservedCount = 5;

/// Word-level tokens: whitespace split, with leading and trailing punctuation
/// detached as separate tokens ("ASICS." -> "ASICS", ".").
std::vector<std::string> word_tokens(std::string_view text);

/// Joins tokens with single spaces, re-attaching closing punctuation to the
/// left and opening punctuation to the right.
std::string join_tokens(std::span<const std::string> tokens);

/// Joint source/target vocabulary with reserved ids 0..4.
class Vocabulary {
public:
    /// Starts with the reserved tokens only.
    Vocabulary();
    /// `tokens` must begin with the five reserved tokens in order.
    explicit Vocabulary(std::vector<std::string> tokens);

    std::size_t size() const noexcept { return tokens_.size(); }
    const std::string& token(TokenId id) const;
    /// `<unk>` for unknown strings (including literal reserved-token text).
    TokenId id(std::string_view token) const;
    bool contains(std::string_view token) const;
    const std::vector<std::string>& tokens() const noexcept { return tokens_; }

    bool operator==(const Vocabulary& o) const { return tokens_ == o.tokens_; }

private:
    std::vector<std::string> tokens_;
    std::unordered_map<std::string, TokenId> index_;
};

bool is_reserved(TokenId id);
const std::vector<std::string>& reserved_tokens();

/// Ranks tokens from both sides of every pair by frequency (desc), then
/// lexicographically, and keeps the top `max_size - 5`.
Vocabulary build_vocab(std::span<const Corpus> corpora, std::size_t max_size);

TokenIds encode(std::string_view text, const Vocabulary& vocab);
/// Drops reserved ids. Throws ValidationError for ids outside the vocabulary.
std::string decode(std::span<const TokenId> ids, const Vocabulary& vocab);

std::string serialize_vocab(const Vocabulary& vocab);
void write_vocab(const std::filesystem::path& path, const Vocabulary& vocab);
Vocabulary read_vocab(const std::filesystem::path& path);

}  // namespace iclmt
