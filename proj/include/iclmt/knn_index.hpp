#pragma once

#include <cstdint>
#include <filesystem>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "iclmt/embedder.hpp"

namespace iclmt {

struct Neighbor {
    std::uint64_t pair_id = 0;
    double distance = 0.0;

    bool operator==(const Neighbor&) const = default;
};

/// Neighbors of one query, ascending by (distance, pair_id).
struct NeighborList {
    std::uint64_t query_id = 0;
    std::vector<Neighbor> neighbors;

    bool operator==(const NeighborList&) const = default;
};

enum class SearchMode { exact, hnsw };

struct IndexConfig {
    std::size_t k = 5;
    std::size_t M = 16;
    std::size_t ef_construction = 200;
    std::size_t ef_search = 64;
    SearchMode mode = SearchMode::hnsw;
    /// Seeds the level generator.
    std::uint64_t seed = 42;
};

/// Throws ValidationError unless the list is sorted, ids are distinct and
/// `excluded` (if any) is absent.
void check_neighbor_list(const NeighborList& list, std::optional<std::uint64_t> excluded = std::nullopt);

/// Exhaustive scan; ties broken by ascending pair id.
NeighborList exact_knn(const VectorSet& vectors, std::span<const float> query, std::size_t k,
                       std::optional<std::uint64_t> exclude_id = std::nullopt, std::uint64_t query_id = 0);

/// Cosine-distance HNSW graph over a shared, immutable vector set. Built once,
/// then read-only: `query` may be called concurrently.
class KnnIndex {
public:
    /// Throws ValidationError for an empty vector set, zero vectors, or ef_search < k.
    static KnnIndex build(std::shared_ptr<const VectorSet> vectors, const IndexConfig& config);

    /// Returns min(k, available) neighbors; `exclude_id` is never returned.
    NeighborList query(std::span<const float> query, std::size_t k,
                       std::optional<std::uint64_t> exclude_id = std::nullopt, std::uint64_t query_id = 0) const;

    std::size_t size() const noexcept { return vectors_->size(); }
    std::size_t dimension() const noexcept { return vectors_->dimension(); }
    const IndexConfig& config() const noexcept { return config_; }
    const VectorSet& vectors() const noexcept { return *vectors_; }

    /// Top level of node `id` (0 when built in exact mode).
    std::size_t level(std::size_t id) const;
    /// Adjacency list of `id` at `layer`.
    std::span<const std::uint32_t> links(std::size_t id, std::size_t layer) const;

    void save(const std::filesystem::path& path) const;
    /// The vector set must be the one the index was built over.
    static KnnIndex load(const std::filesystem::path& path, std::shared_ptr<const VectorSet> vectors);

private:
    KnnIndex() = default;

    struct Candidate {
        double distance;
        std::uint32_t id;
        bool operator<(const Candidate& o) const {
            return distance < o.distance || (distance == o.distance && id < o.id);
        }
        bool operator>(const Candidate& o) const { return o < *this; }
    };

    double distance_to(std::span<const float> q, double q_norm, std::uint32_t id) const;
    double distance_between(std::uint32_t a, std::uint32_t b) const;
    std::vector<Candidate> search_layer(std::span<const float> q, double q_norm, std::vector<Candidate> entry,
                                        std::size_t ef, std::size_t layer) const;
    std::vector<std::uint32_t> select_neighbors(const std::vector<Candidate>& sorted, std::size_t m) const;
    void insert(std::uint32_t id, std::size_t level);
    void compute_norms();

    IndexConfig config_;
    std::shared_ptr<const VectorSet> vectors_;
    /// Squared L2 norms.
    std::vector<double> norms_;
    std::vector<std::vector<std::vector<std::uint32_t>>> links_;
    std::uint32_t entry_ = 0;
    std::size_t max_level_ = 0;
};

/// Queries every row of `queries`; row i gets query_id i and, with
/// `exclude_self`, never returns pair id i.
std::vector<NeighborList> retrieve_all(const KnnIndex& index, const VectorSet& queries, std::size_t k,
                                       bool exclude_self);

/// Neighbors at distance exactly 0 (duplicate texts are retained by design).
std::size_t count_zero_distance(std::span<const NeighborList> lists);

std::string serialize_neighbors(std::span<const NeighborList> lists);
void write_neighbors(const std::filesystem::path& path, std::span<const NeighborList> lists);
std::vector<NeighborList> read_neighbors(const std::filesystem::path& path);

}  // namespace iclmt
