#include "iclmt/evaluator.hpp"

#include <algorithm>
#include <array>
#include <cmath>
#include <fstream>
#include <regex>
#include <sstream>
#include <unordered_map>

#include "iclmt/util.hpp"

namespace iclmt {

namespace {

void replace_all(std::string& s, std::string_view from, std::string_view to) {
    for (std::size_t pos = s.find(from); pos != std::string::npos; pos = s.find(from, pos + to.size())) {
        s.replace(pos, from.size(), to);
    }
}

using NgramCounts = std::unordered_map<std::string, std::size_t>;

NgramCounts count_ngrams(const std::vector<std::string>& toks, std::size_t n) {
    NgramCounts out;
    for (std::size_t i = 0; i + n <= toks.size(); ++i) {
        std::string key = toks[i];
        for (std::size_t j = 1; j < n; ++j) {
            key += ' ';
            key += toks[i + j];
        }
        ++out[key];
    }
    return out;
}

}  // namespace

std::vector<std::string> tokenize_13a(std::string_view input) {
    static const std::regex punct(R"(([\{-\~\[-\` -\&\(-\+\:-\@\/]))");
    static const std::regex period_comma_after(R"(([^0-9])([\.,]))");
    static const std::regex period_comma_before(R"(([\.,])([^0-9]))");
    static const std::regex dash_after_digit(R"(([0-9])(-))");

    std::string line(input);
    replace_all(line, "<skipped>", "");
    replace_all(line, "-\n", "");
    replace_all(line, "\n", " ");
    if (line.find('&') != std::string::npos) {
        replace_all(line, "&quot;", "\"");
        replace_all(line, "&amp;", "&");
        replace_all(line, "&lt;", "<");
        replace_all(line, "&gt;", ">");
    }
    line = " " + line + " ";
    line = std::regex_replace(line, punct, " $1 ");
    line = std::regex_replace(line, period_comma_after, "$1 $2 ");
    line = std::regex_replace(line, period_comma_before, " $1 $2");
    line = std::regex_replace(line, dash_after_digit, "$1 $2 ");
    return split_whitespace(line);
}

double corpus_bleu(std::span<const std::string> hypotheses, std::span<const std::string> references) {
    if (hypotheses.size() != references.size()) {
        throw ValidationError("BLEU needs one reference per hypothesis (" + std::to_string(hypotheses.size()) +
                              " vs " + std::to_string(references.size()) + ")");
    }
    if (hypotheses.empty()) {
        throw ValidationError("BLEU needs at least one segment");
    }
    constexpr std::size_t kOrder = 4;
    std::array<std::size_t, kOrder> matches{};
    std::array<std::size_t, kOrder> totals{};
    std::size_t hyp_len = 0;
    std::size_t ref_len = 0;
    for (std::size_t s = 0; s < hypotheses.size(); ++s) {
        const auto h = tokenize_13a(hypotheses[s]);
        const auto r = tokenize_13a(references[s]);
        hyp_len += h.size();
        ref_len += r.size();
        for (std::size_t n = 1; n <= kOrder; ++n) {
            const NgramCounts hc = count_ngrams(h, n);
            const NgramCounts rc = count_ngrams(r, n);
            for (const auto& [gram, c] : hc) {
                auto it = rc.find(gram);
                if (it != rc.end()) {
                    matches[n - 1] += std::min(c, it->second);
                }
            }
            if (h.size() >= n) {
                totals[n - 1] += h.size() - n + 1;
            }
        }
    }
    double log_sum = 0.0;
    for (std::size_t n = 0; n < kOrder; ++n) {
        if (totals[n] == 0 || matches[n] == 0) {
            return 0.0;
        }
        log_sum += std::log(static_cast<double>(matches[n]) / static_cast<double>(totals[n]));
    }
    const double bp = hyp_len < ref_len
                          ? std::exp(1.0 - static_cast<double>(ref_len) / static_cast<double>(hyp_len))
                          : 1.0;
    return 100.0 * bp * std::exp(log_sum / static_cast<double>(kOrder));
}

double empty_rate(std::span<const bool> is_empty) {
    if (is_empty.empty()) {
        throw ValidationError("empty_rate needs at least one result");
    }
    const auto n = static_cast<std::size_t>(std::count(is_empty.begin(), is_empty.end(), true));
    return static_cast<double>(n) / static_cast<double>(is_empty.size());
}

double empty_rate(std::span<const DecodeResult> results) {
    if (results.empty()) {
        throw ValidationError("empty_rate needs at least one result");
    }
    std::size_t n = 0;
    for (const auto& r : results) {
        n += r.is_empty ? 1 : 0;
    }
    return static_cast<double>(n) / static_cast<double>(results.size());
}

DistanceStats avg_knn_distance(std::span<const NeighborList> neighbors, std::size_t k) {
    if (k == 0) {
        throw ValidationError("k must be positive");
    }
    DistanceStats out;
    double total = 0.0;
    for (const auto& list : neighbors) {
        if (list.neighbors.size() < k) {
            ++out.skipped;
            continue;
        }
        double sum = 0.0;
        for (std::size_t i = 0; i < k; ++i) {
            sum += list.neighbors[i].distance;
        }
        total += sum / static_cast<double>(k);
        ++out.used;
    }
    if (out.used == 0) {
        throw ValidationError("no query has " + std::to_string(k) + " neighbors");
    }
    out.mean = total / static_cast<double>(out.used);
    return out;
}

bool differs_by_one_word(std::string_view a, std::string_view b, OneWordRule rule) {
    const auto ta = split_whitespace(a);
    const auto tb = split_whitespace(b);
    if (ta.size() == tb.size()) {
        std::size_t diff = 0;
        for (std::size_t i = 0; i < ta.size(); ++i) {
            diff += ta[i] != tb[i] ? 1 : 0;
        }
        return diff == 1;
    }
    if (rule == OneWordRule::substitution) {
        return false;
    }
    const auto& longer = ta.size() > tb.size() ? ta : tb;
    const auto& shorter = ta.size() > tb.size() ? tb : ta;
    if (longer.size() != shorter.size() + 1) {
        return false;
    }
    std::size_t i = 0;
    while (i < shorter.size() && longer[i] == shorter[i]) {
        ++i;
    }
    return std::equal(shorter.begin() + static_cast<std::ptrdiff_t>(i), shorter.end(),
                      longer.begin() + static_cast<std::ptrdiff_t>(i) + 1);
}

std::vector<SubstitutionPair> word_substitution_segments(const Corpus& test, const Corpus& train,
                                                         std::span<const NeighborList> neighbors, OneWordRule rule) {
    std::vector<SubstitutionPair> out;
    for (const auto& list : neighbors) {
        if (list.neighbors.empty()) {
            continue;
        }
        const SegmentPair& q = test.at(list.query_id);
        const SegmentPair& n = train.at(list.neighbors.front().pair_id);
        if (differs_by_one_word(q.source, n.source, rule)) {
            out.push_back({q, n});
        }
    }
    return out;
}

double wsa(std::span<const SubstitutionPair> selected, const std::map<std::uint64_t, std::string>& hypotheses) {
    if (selected.empty()) {
        throw ValidationError("no word-substitution segments to score");
    }
    std::size_t hits = 0;
    for (const auto& p : selected) {
        auto it = hypotheses.find(p.test.id);
        if (it == hypotheses.end()) {
            throw ValidationError("no hypothesis for test segment " + std::to_string(p.test.id));
        }
        if (split_whitespace(it->second) == split_whitespace(p.test.target)) {
            ++hits;
        }
    }
    return static_cast<double>(hits) / static_cast<double>(selected.size());
}

double pearson(std::span<const double> x, std::span<const double> y) {
    if (x.size() != y.size()) {
        throw ValidationError("pearson needs equal-length inputs");
    }
    if (x.size() < 2) {
        throw ValidationError("pearson needs at least two points");
    }
    const double n = static_cast<double>(x.size());
    double mx = 0.0;
    double my = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        mx += x[i];
        my += y[i];
    }
    mx /= n;
    my /= n;
    double sxy = 0.0;
    double sxx = 0.0;
    double syy = 0.0;
    for (std::size_t i = 0; i < x.size(); ++i) {
        sxy += (x[i] - mx) * (y[i] - my);
        sxx += (x[i] - mx) * (x[i] - mx);
        syy += (y[i] - my) * (y[i] - my);
    }
    if (sxx == 0.0 || syy == 0.0) {
        throw ValidationError("pearson is undefined for zero variance");
    }
    return std::clamp(sxy / std::sqrt(sxx * syy), -1.0, 1.0);
}

nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json dist = nlohmann::json::object();
    for (const auto& [k, v] : r.avg_cosine_distance) {
        dist[std::to_string(k)] = v;
    }
    return {{"system", r.system},
            {"k", r.k},
            {"bleu", r.bleu},
            {"empty_rate", r.empty_rate},
            {"wsa", r.wsa ? nlohmann::json(*r.wsa) : nlohmann::json(nullptr)},
            {"wsa_segments", r.wsa_segments},
            {"avg_cosine_distance", dist},
            {"pearson_r", r.pearson_r ? nlohmann::json(*r.pearson_r) : nlohmann::json(nullptr)},
            {"counts", {{"evaluated", r.evaluated}, {"skipped", r.skipped}}},
            {"metadata", r.metadata}};
}

std::string serialize_hypotheses(std::span<const Hypothesis> hyps) {
    std::ostringstream os;
    for (const auto& h : hyps) {
        os << nlohmann::json{{"id", h.id}, {"text", h.text}, {"empty", h.empty}}.dump() << '\n';
    }
    return os.str();
}

std::vector<Hypothesis> read_hypotheses(const std::filesystem::path& path) {
    std::istringstream in(read_file(path));
    std::vector<Hypothesis> out;
    std::string line;
    std::size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (trim(line).empty()) {
            continue;
        }
        try {
            const auto j = nlohmann::json::parse(line);
            out.push_back({j.at("id").get<std::uint64_t>(), j.at("text").get<std::string>(), j.value("empty", false)});
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(lineno, e.what());
        }
    }
    return out;
}

}  // namespace iclmt
