#include "iclmt/embedder.hpp"

#include <cmath>
#include <fstream>
#include <sstream>

#include "iclmt/util.hpp"

namespace iclmt {

namespace {

/// Splits UTF-8 text into code points (each kept as its byte sequence).
/// Invalid lead bytes are treated as single-byte code points.
std::vector<std::string> code_points(std::string_view s) {
    std::vector<std::string> out;
    std::size_t i = 0;
    while (i < s.size()) {
        auto c = static_cast<unsigned char>(s[i]);
        std::size_t len = c < 0x80 ? 1 : (c >> 5) == 0x6 ? 2 : (c >> 4) == 0xE ? 3 : (c >> 3) == 0x1E ? 4 : 1;
        len = std::min(len, s.size() - i);
        out.emplace_back(s.substr(i, len));
        i += len;
    }
    return out;
}

}  // namespace

NgramHashEmbedder::NgramHashEmbedder(EmbedderConfig config) : config_(config) {
    if (config_.dimension < 2) {
        throw ValidationError("embedder dimension must be >= 2");
    }
    if (config_.ngram_order == 0) {
        throw ValidationError("n-gram order must be positive");
    }
}

std::vector<std::string> NgramHashEmbedder::ngrams(std::string_view segment) const {
    std::vector<std::string> grams;
    for (const auto& word : split_whitespace(segment)) {
        auto cps = code_points("<" + word + ">");
        const std::size_t n = config_.ngram_order;
        if (cps.size() <= n) {
            std::string g;
            for (const auto& cp : cps) {
                g += cp;
            }
            grams.push_back(std::move(g));
            continue;
        }
        for (std::size_t i = 0; i + n <= cps.size(); ++i) {
            std::string g;
            for (std::size_t j = i; j < i + n; ++j) {
                g += cps[j];
            }
            grams.push_back(std::move(g));
        }
    }
    return grams;
}

std::size_t NgramHashEmbedder::bucket(std::string_view ngram) const {
    unsigned char seed_bytes[8];
    for (int i = 0; i < 8; ++i) {
        seed_bytes[i] = static_cast<unsigned char>(config_.hash_seed >> (8 * i));
    }
    std::uint64_t h = fnv1a(std::as_bytes(std::span<const unsigned char>(seed_bytes, 8)));
    h = fnv1a(ngram, h);
    return static_cast<std::size_t>(h % config_.dimension);
}

EmbeddingVector NgramHashEmbedder::embed(std::string_view segment) const {
    if (trim(segment).empty()) {
        throw ValidationError("cannot embed an empty segment");
    }
    std::vector<double> tf(config_.dimension, 0.0);
    for (const auto& g : ngrams(segment)) {
        tf[bucket(g)] += 1.0;
    }
    double norm = 0.0;
    for (double v : tf) {
        norm += v * v;
    }
    norm = std::sqrt(norm);
    EmbeddingVector out;
    out.values.resize(config_.dimension);
    for (std::size_t i = 0; i < tf.size(); ++i) {
        out.values[i] = static_cast<float>(tf[i] / norm);
    }
    return out;
}

nlohmann::json NgramHashEmbedder::describe() const {
    return {{"kind", "ngram-hash"},
            {"dimension", config_.dimension},
            {"ngram_order", config_.ngram_order},
            {"hash_seed", config_.hash_seed},
            {"hash", "fnv1a-64"}};
}

EmbeddingVector embed(std::string_view segment, const EmbedderConfig& config) {
    return NgramHashEmbedder(config).embed(segment);
}

double cosine_distance(std::span<const float> a, std::span<const float> b) {
    if (a.size() != b.size()) {
        throw ValidationError("cosine distance: dimension mismatch (" + std::to_string(a.size()) + " vs " +
                              std::to_string(b.size()) + ")");
    }
    double dot = 0.0;
    double na = 0.0;
    double nb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        const double x = a[i];
        const double y = b[i];
        dot += x * y;
        na += x * x;
        nb += y * y;
    }
    if (na == 0.0 || nb == 0.0) {
        throw ValidationError("cosine distance: zero-norm vector");
    }
    return 1.0 - dot / std::sqrt(na * nb);
}

double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b) {
    return cosine_distance(a.view(), b.view());
}

VectorSet::VectorSet(std::size_t dimension, std::vector<float> data)
    : dimension_(dimension), data_(std::move(data)) {
    if (dimension_ == 0 || data_.size() % dimension_ != 0) {
        throw ValidationError("vector data size is not a multiple of the dimension");
    }
}

std::span<const float> VectorSet::row(std::size_t i) const {
    if (i >= size()) {
        throw ValidationError("vector row " + std::to_string(i) + " out of range");
    }
    return std::span<const float>(data_).subspan(i * dimension_, dimension_);
}

void VectorSet::push_back(const EmbeddingVector& v) {
    if (dimension_ == 0) {
        dimension_ = v.dimension();
    }
    if (v.dimension() != dimension_) {
        throw ValidationError("vector dimension mismatch");
    }
    data_.insert(data_.end(), v.values.begin(), v.values.end());
}

VectorSet embed_all(const Embedder& embedder, std::span<const std::string> segments) {
    VectorSet set;
    for (const auto& s : segments) {
        set.push_back(embedder.embed(s));
    }
    return set;
}

void write_vectors(const std::filesystem::path& path, const VectorSet& vectors) {
    std::ostringstream os(std::ios::binary);
    write_u32(os, static_cast<std::uint32_t>(vectors.dimension()));
    write_u64(os, vectors.size());
    for (float v : vectors.data()) {
        write_f32(os, v);
    }
    write_file_atomic(path, os.str());
}

VectorSet read_vectors(const std::filesystem::path& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DependencyError("cannot open vector file " + path.string());
    }
    const std::uint32_t dim = read_u32(in);
    const std::uint64_t count = read_u64(in);
    if (dim == 0) {
        throw ValidationError("vector file has zero dimension");
    }
    std::vector<float> data(static_cast<std::size_t>(dim) * count);
    for (auto& v : data) {
        v = read_f32(in);
    }
    if (in.peek() != std::char_traits<char>::eof()) {
        throw ValidationError("trailing bytes in vector file " + path.string());
    }
    return VectorSet(dim, std::move(data));
}

std::filesystem::path vector_manifest_path(const std::filesystem::path& vector_file) {
    auto p = vector_file;
    p += ".json";
    return p;
}

}  // namespace iclmt
