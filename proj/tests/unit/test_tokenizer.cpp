#include "doctest.h"
#include "iclmt/tokenizer.hpp"
#include "iclmt/util.hpp"
#include "support.hpp"

using namespace iclmt;

namespace {

Corpus corpus_of(std::vector<std::pair<std::string, std::string>> rows) {
    Corpus c{"d", Split::train, {}};
    for (auto& [s, t] : rows) {
        c.pairs.push_back({c.pairs.size(), s, t});
    }
    return c;
}

}  // namespace

TEST_CASE("word tokens detach punctuation") {
    CHECK(word_tokens("Buy ASICS.") == std::vector<std::string>{"Buy", "ASICS", "."});
    CHECK(word_tokens("(size 42), men's") == std::vector<std::string>{"(", "size", "42", ")", ",", "men's"});
    CHECK(word_tokens("   ").empty());
    std::vector<std::string> toks{"(", "size", "42", ")", ",", "men's", "."};
    CHECK(join_tokens(toks) == "(size 42), men's.");
}

TEST_CASE("vocabulary orders by frequency then text") {
    std::vector<Corpus> cs{corpus_of({{"a b", "a"}})};
    auto v = build_vocab(cs, 100);
    REQUIRE(v.size() == 7);
    for (TokenId i = 0; i < kReservedCount; ++i) {
        CHECK(v.token(i) == reserved_tokens()[static_cast<std::size_t>(i)]);
    }
    CHECK(v.id("a") < v.id("b"));
    CHECK(v.token(kReservedCount) == "a");

    std::vector<Corpus> tie{corpus_of({{"z y", "x"}})};
    auto vt = build_vocab(tie, 100);
    CHECK(vt.token(5) == "x");
    CHECK(vt.token(7) == "z");
}

TEST_CASE("vocabulary size cap") {
    std::vector<Corpus> cs{corpus_of({{"a b c", "a b"}})};
    auto v = build_vocab(cs, 6);
    CHECK(v.size() == 6);
    CHECK(v.token(5) == "a");
    CHECK_THROWS_AS(build_vocab(cs, 4), ValidationError);
    CHECK(build_vocab(cs, 6) == v);
}

TEST_CASE("encode and decode") {
    std::vector<Corpus> cs{corpus_of({{"a b", "c"}})};
    auto v = build_vocab(cs, 100);
    auto ids = encode("a b", v);
    REQUIRE(ids.size() == 2);
    CHECK(decode(ids, v) == "a b");
    CHECK(encode("a zzz", v)[1] == kUnk);
    CHECK(encode("<eos>", v)[0] == kUnk);
    TokenIds wrapped{kBos, v.id("a"), kEos};
    CHECK(decode(wrapped, v) == "a");
    TokenIds bad{static_cast<TokenId>(v.size())};
    CHECK_THROWS_AS(decode(bad, v), ValidationError);
    CHECK_THROWS_AS(v.token(-1), ValidationError);
}

TEST_CASE("vocabulary files round trip") {
    testing::TempDir dir;
    std::vector<Corpus> cs{corpus_of({{"Größe 42", "size 42 ."}})};
    auto v = build_vocab(cs, 100);
    write_vocab(dir / "v.json", v);
    CHECK(read_vocab(dir / "v.json") == v);
    CHECK_THROWS_AS(Vocabulary(std::vector<std::string>{"a", "b"}), ValidationError);
}
