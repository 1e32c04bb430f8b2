#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

namespace iclmt {

/// Fixed-dimension embedding of one source segment.
struct EmbeddingVector {
    std::vector<float> values;

    std::size_t dimension() const noexcept { return values.size(); }
    std::span<const float> view() const noexcept { return values; }
};

struct EmbedderConfig {
    std::size_t dimension = 256;
    std::size_t ngram_order = 3;
    std::uint64_t hash_seed = 0;
};

/// Segment embedder. Implementations must be deterministic and thread-safe.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::size_t dimension() const = 0;
    /// Throws ValidationError for segments that are empty after trimming.
    virtual EmbeddingVector embed(std::string_view segment) const = 0;
    virtual nlohmann::json describe() const = 0;
};

/// Character n-gram term frequencies hashed into `dimension` buckets with
/// seeded FNV-1a, then L2-normalized. Each whitespace word is wrapped in
/// boundary markers `<` and `>` before n-grams are taken over its code points.
class NgramHashEmbedder final : public Embedder {
public:
    explicit NgramHashEmbedder(EmbedderConfig config = {});

    std::size_t dimension() const override { return config_.dimension; }
    EmbeddingVector embed(std::string_view segment) const override;
    nlohmann::json describe() const override;

    const EmbedderConfig& config() const noexcept { return config_; }

    /// The n-grams (as UTF-8 strings) the embedder hashes for `segment`, in order.
    std::vector<std::string> ngrams(std::string_view segment) const;
    std::size_t bucket(std::string_view ngram) const;

private:
    EmbedderConfig config_;
};

EmbeddingVector embed(std::string_view segment, const EmbedderConfig& config);

/// 1 - a.b / (|a| |b|), accumulated in double. Symmetric bit-for-bit.
/// Throws ValidationError on dimension mismatch or a zero-norm input.
double cosine_distance(std::span<const float> a, std::span<const float> b);
double cosine_distance(const EmbeddingVector& a, const EmbeddingVector& b);

/// Row-major block of `count` vectors; row i embeds pair id i.
class VectorSet {
public:
    VectorSet() = default;
    VectorSet(std::size_t dimension, std::vector<float> data);

    std::size_t dimension() const noexcept { return dimension_; }
    std::size_t size() const noexcept { return dimension_ == 0 ? 0 : data_.size() / dimension_; }
    std::span<const float> row(std::size_t i) const;
    const std::vector<float>& data() const noexcept { return data_; }

    void push_back(const EmbeddingVector& v);

private:
    std::size_t dimension_ = 0;
    std::vector<float> data_;
};

/// Embeds segments in input order.
VectorSet embed_all(const Embedder& embedder, std::span<const std::string> segments);

/// Binary layout: [u32 D][u64 count][count x D little-endian f32].
void write_vectors(const std::filesystem::path& path, const VectorSet& vectors);
VectorSet read_vectors(const std::filesystem::path& path);

/// Sidecar manifest path for a vector file (`FILE.json`).
std::filesystem::path vector_manifest_path(const std::filesystem::path& vector_file);

}  // namespace iclmt
