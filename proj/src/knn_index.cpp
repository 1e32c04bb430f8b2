#include "iclmt/knn_index.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <queue>
#include <set>
#include <sstream>

#include "iclmt/util.hpp"
#include "json.hpp"

namespace iclmt {

namespace {

constexpr char kMagic[8] = {'I', 'C', 'L', 'H', 'N', 'S', 'W', '\0'};
constexpr std::uint32_t kVersion = 1;

// Squared L2 norm. Distances take sqrt(|a|^2 |b|^2) so that d(a, a) is exactly 0.
double squared_norm(std::span<const float> v) {
    double s = 0.0;
    for (float x : v) {
        s += static_cast<double>(x) * static_cast<double>(x);
    }
    return s;
}

double dot_of(std::span<const float> a, std::span<const float> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        s += static_cast<double>(a[i]) * static_cast<double>(b[i]);
    }
    return s;
}

bool neighbor_less(const Neighbor& a, const Neighbor& b) {
    return a.distance < b.distance || (a.distance == b.distance && a.pair_id < b.pair_id);
}

}  // namespace

void check_neighbor_list(const NeighborList& list, std::optional<std::uint64_t> excluded) {
    std::set<std::uint64_t> seen;
    for (std::size_t i = 0; i < list.neighbors.size(); ++i) {
        const auto& n = list.neighbors[i];
        if (!seen.insert(n.pair_id).second) {
            throw ValidationError("neighbor list of query " + std::to_string(list.query_id) + " repeats pair id " +
                                  std::to_string(n.pair_id));
        }
        if (excluded && n.pair_id == *excluded) {
            throw ValidationError("neighbor list of query " + std::to_string(list.query_id) +
                                  " contains the excluded id");
        }
        if (i > 0 && !neighbor_less(list.neighbors[i - 1], n)) {
            throw ValidationError("neighbor list of query " + std::to_string(list.query_id) +
                                  " is not strictly ordered by (distance, id)");
        }
    }
}

NeighborList exact_knn(const VectorSet& vectors, std::span<const float> query, std::size_t k,
                       std::optional<std::uint64_t> exclude_id, std::uint64_t query_id) {
    if (k == 0) {
        throw ValidationError("k must be at least 1");
    }
    if (query.size() != vectors.dimension()) {
        throw ValidationError("query dimension " + std::to_string(query.size()) + " does not match index dimension " +
                              std::to_string(vectors.dimension()));
    }
    std::vector<Neighbor> all;
    all.reserve(vectors.size());
    for (std::size_t i = 0; i < vectors.size(); ++i) {
        if (exclude_id && *exclude_id == i) {
            continue;
        }
        all.push_back({i, cosine_distance(query, vectors.row(i))});
    }
    const std::size_t take = std::min(k, all.size());
    std::partial_sort(all.begin(), all.begin() + static_cast<std::ptrdiff_t>(take), all.end(), neighbor_less);
    all.resize(take);
    return {query_id, std::move(all)};
}

void KnnIndex::compute_norms() {
    norms_.resize(vectors_->size());
    for (std::size_t i = 0; i < norms_.size(); ++i) {
        norms_[i] = squared_norm(vectors_->row(i));
        if (norms_[i] == 0.0) {
            throw ValidationError("vector " + std::to_string(i) + " has zero norm");
        }
    }
}

double KnnIndex::distance_to(std::span<const float> q, double q_norm, std::uint32_t id) const {
    return 1.0 - dot_of(q, vectors_->row(id)) / std::sqrt(q_norm * norms_[id]);
}

double KnnIndex::distance_between(std::uint32_t a, std::uint32_t b) const {
    return 1.0 - dot_of(vectors_->row(a), vectors_->row(b)) / std::sqrt(norms_[a] * norms_[b]);
}

std::size_t KnnIndex::level(std::size_t id) const {
    if (id >= size()) {
        throw ValidationError("node id out of range");
    }
    return links_.empty() ? 0 : links_[id].size() - 1;
}

std::span<const std::uint32_t> KnnIndex::links(std::size_t id, std::size_t layer) const {
    if (links_.empty() || layer > level(id)) {
        return {};
    }
    return links_[id][layer];
}

std::vector<KnnIndex::Candidate> KnnIndex::search_layer(std::span<const float> q, double q_norm,
                                                        std::vector<Candidate> entry, std::size_t ef,
                                                        std::size_t layer) const {
    std::vector<std::uint8_t> visited(size(), 0);
    std::priority_queue<Candidate, std::vector<Candidate>, std::greater<>> frontier;
    std::priority_queue<Candidate> best;
    for (const auto& c : entry) {
        if (visited[c.id]) {
            continue;
        }
        visited[c.id] = 1;
        frontier.push(c);
        best.push(c);
        if (best.size() > ef) {
            best.pop();
        }
    }
    while (!frontier.empty()) {
        Candidate c = frontier.top();
        frontier.pop();
        if (best.size() >= ef && best.top() < c) {
            break;
        }
        for (std::uint32_t nb : links_[c.id][layer]) {
            if (visited[nb]) {
                continue;
            }
            visited[nb] = 1;
            Candidate cand{distance_to(q, q_norm, nb), nb};
            if (best.size() < ef || cand < best.top()) {
                frontier.push(cand);
                best.push(cand);
                if (best.size() > ef) {
                    best.pop();
                }
            }
        }
    }
    std::vector<Candidate> out;
    out.reserve(best.size());
    while (!best.empty()) {
        out.push_back(best.top());
        best.pop();
    }
    std::reverse(out.begin(), out.end());
    return out;
}

std::vector<std::uint32_t> KnnIndex::select_neighbors(const std::vector<Candidate>& sorted, std::size_t m) const {
    // Diversity heuristic: keep a candidate only if it is closer to the base
    // point than to every neighbor already kept.
    std::vector<std::uint32_t> kept;
    for (const auto& c : sorted) {
        if (kept.size() >= m) {
            break;
        }
        bool good = true;
        for (std::uint32_t r : kept) {
            if (distance_between(c.id, r) < c.distance) {
                good = false;
                break;
            }
        }
        if (good) {
            kept.push_back(c.id);
        }
    }
    return kept;
}

void KnnIndex::insert(std::uint32_t id, std::size_t node_level) {
    links_[id].assign(node_level + 1, {});
    if (id == 0) {
        entry_ = 0;
        max_level_ = node_level;
        return;
    }
    auto q = vectors_->row(id);
    const double q_norm = norms_[id];
    Candidate ep{distance_to(q, q_norm, entry_), entry_};
    for (std::size_t layer = max_level_; layer > node_level; --layer) {
        bool changed = true;
        while (changed) {
            changed = false;
            for (std::uint32_t nb : links_[ep.id][layer]) {
                Candidate cand{distance_to(q, q_norm, nb), nb};
                if (cand < ep) {
                    ep = cand;
                    changed = true;
                }
            }
        }
    }
    std::vector<Candidate> entry{ep};
    for (std::size_t layer = std::min(node_level, max_level_) + 1; layer-- > 0;) {
        auto found = search_layer(q, q_norm, entry, config_.ef_construction, layer);
        auto selected = select_neighbors(found, config_.M);
        links_[id][layer] = selected;
        const std::size_t cap = layer == 0 ? 2 * config_.M : config_.M;
        for (std::uint32_t nb : selected) {
            auto& adj = links_[nb][layer];
            adj.push_back(id);
            if (adj.size() > cap) {
                std::vector<Candidate> cands;
                cands.reserve(adj.size());
                for (std::uint32_t x : adj) {
                    cands.push_back({distance_between(nb, x), x});
                }
                std::sort(cands.begin(), cands.end());
                adj = select_neighbors(cands, cap);
            }
        }
        entry = std::move(found);
    }
    if (node_level > max_level_) {
        max_level_ = node_level;
        entry_ = id;
    }
}

KnnIndex KnnIndex::build(std::shared_ptr<const VectorSet> vectors, const IndexConfig& config) {
    if (!vectors || vectors->size() == 0) {
        throw ValidationError("cannot build an index over an empty vector set");
    }
    if (config.k == 0 || config.M == 0 || config.ef_construction == 0 || config.ef_search == 0) {
        throw ValidationError("index parameters must be positive");
    }
    if (config.ef_search < config.k) {
        throw ValidationError("ef_search must be >= k");
    }
    if (vectors->size() > std::numeric_limits<std::uint32_t>::max()) {
        throw ValidationError("too many vectors for a 32-bit graph");
    }
    KnnIndex index;
    index.config_ = config;
    index.vectors_ = std::move(vectors);
    index.compute_norms();
    if (config.mode == SearchMode::exact) {
        return index;
    }
    const std::size_t n = index.size();
    index.links_.resize(n);
    Rng rng(config.seed);
    const double ml = 1.0 / std::log(static_cast<double>(std::max<std::size_t>(config.M, 2)));
    for (std::size_t i = 0; i < n; ++i) {
        const double u = 1.0 - rng.uniform();
        const auto lvl = static_cast<std::size_t>(std::floor(-std::log(u) * ml));
        index.insert(static_cast<std::uint32_t>(i), std::min<std::size_t>(lvl, 32));
    }
    return index;
}

NeighborList KnnIndex::query(std::span<const float> q, std::size_t k, std::optional<std::uint64_t> exclude_id,
                             std::uint64_t query_id) const {
    if (k == 0) {
        throw ValidationError("k must be at least 1");
    }
    if (q.size() != dimension()) {
        throw ValidationError("query dimension " + std::to_string(q.size()) + " does not match index dimension " +
                              std::to_string(dimension()));
    }
    const std::size_t ef = std::max(config_.ef_search, k + (exclude_id ? 1 : 0));
    if (config_.mode == SearchMode::exact || size() <= ef) {
        return exact_knn(*vectors_, q, k, exclude_id, query_id);
    }
    const double q_norm = squared_norm(q);
    if (q_norm == 0.0) {
        throw ValidationError("query vector has zero norm");
    }
    Candidate ep{distance_to(q, q_norm, entry_), entry_};
    for (std::size_t layer = max_level_; layer > 0; --layer) {
        bool changed = true;
        while (changed) {
            changed = false;
            for (std::uint32_t nb : links_[ep.id][layer]) {
                Candidate cand{distance_to(q, q_norm, nb), nb};
                if (cand < ep) {
                    ep = cand;
                    changed = true;
                }
            }
        }
    }
    auto found = search_layer(q, q_norm, {ep}, ef, 0);
    NeighborList out{query_id, {}};
    for (const auto& c : found) {
        if (exclude_id && c.id == *exclude_id) {
            continue;
        }
        if (out.neighbors.size() == k) {
            break;
        }
        out.neighbors.push_back({c.id, c.distance});
    }
    return out;
}

void KnnIndex::save(const std::filesystem::path& path) const {
    std::ostringstream os(std::ios::binary);
    os.write(kMagic, sizeof(kMagic));
    write_u32(os, kVersion);
    write_u32(os, static_cast<std::uint32_t>(dimension()));
    write_u64(os, size());
    write_u32(os, static_cast<std::uint32_t>(config_.M));
    write_u32(os, static_cast<std::uint32_t>(config_.ef_construction));
    write_u32(os, static_cast<std::uint32_t>(config_.ef_search));
    write_u32(os, static_cast<std::uint32_t>(config_.k));
    write_u8(os, config_.mode == SearchMode::hnsw ? 1 : 0);
    write_u64(os, config_.seed);
    write_u32(os, entry_);
    write_u32(os, static_cast<std::uint32_t>(max_level_));
    for (const auto& node : links_) {
        write_u32(os, static_cast<std::uint32_t>(node.size() - 1));
        for (const auto& adj : node) {
            write_u32(os, static_cast<std::uint32_t>(adj.size()));
            for (std::uint32_t x : adj) {
                write_u32(os, x);
            }
        }
    }
    write_file_atomic(path, os.str());
}

KnnIndex KnnIndex::load(const std::filesystem::path& path, std::shared_ptr<const VectorSet> vectors) {
    std::ifstream in(path, std::ios::binary);
    if (!in) {
        throw DependencyError("cannot open index file " + path.string());
    }
    char magic[8];
    in.read(magic, sizeof(magic));
    if (!in || !std::equal(magic, magic + 8, kMagic)) {
        throw ValidationError("not an index file: " + path.string());
    }
    if (read_u32(in) != kVersion) {
        throw ValidationError("unsupported index version");
    }
    const std::uint32_t dim = read_u32(in);
    const std::uint64_t count = read_u64(in);
    if (!vectors || vectors->dimension() != dim || vectors->size() != count) {
        throw ValidationError("index file does not match the supplied vectors");
    }
    KnnIndex index;
    index.config_.M = read_u32(in);
    index.config_.ef_construction = read_u32(in);
    index.config_.ef_search = read_u32(in);
    index.config_.k = read_u32(in);
    index.config_.mode = read_u8(in) ? SearchMode::hnsw : SearchMode::exact;
    index.config_.seed = read_u64(in);
    index.entry_ = read_u32(in);
    index.max_level_ = read_u32(in);
    index.vectors_ = std::move(vectors);
    index.compute_norms();
    if (index.config_.mode == SearchMode::hnsw) {
        index.links_.resize(count);
        for (auto& node : index.links_) {
            node.resize(static_cast<std::size_t>(read_u32(in)) + 1);
            for (auto& adj : node) {
                adj.resize(read_u32(in));
                for (auto& x : adj) {
                    x = read_u32(in);
                    if (x >= count) {
                        throw ValidationError("index file has an out-of-range link");
                    }
                }
            }
        }
    }
    return index;
}

std::vector<NeighborList> retrieve_all(const KnnIndex& index, const VectorSet& queries, std::size_t k,
                                       bool exclude_self) {
    std::vector<NeighborList> out;
    out.reserve(queries.size());
    for (std::size_t i = 0; i < queries.size(); ++i) {
        std::optional<std::uint64_t> ex;
        if (exclude_self) {
            ex = i;
        }
        out.push_back(index.query(queries.row(i), k, ex, i));
    }
    return out;
}

std::size_t count_zero_distance(std::span<const NeighborList> lists) {
    std::size_t n = 0;
    for (const auto& l : lists) {
        for (const auto& nb : l.neighbors) {
            n += nb.distance == 0.0 ? 1 : 0;
        }
    }
    return n;
}

std::string serialize_neighbors(std::span<const NeighborList> lists) {
    std::string out;
    for (const auto& l : lists) {
        nlohmann::json nbs = nlohmann::json::array();
        for (const auto& n : l.neighbors) {
            nbs.push_back({{"id", n.pair_id}, {"distance", n.distance}});
        }
        out += nlohmann::json{{"query_id", l.query_id}, {"neighbors", nbs}}.dump();
        out += '\n';
    }
    return out;
}

void write_neighbors(const std::filesystem::path& path, std::span<const NeighborList> lists) {
    write_file_atomic(path, serialize_neighbors(lists));
}

std::vector<NeighborList> read_neighbors(const std::filesystem::path& path) {
    std::ifstream in(path);
    if (!in) {
        throw DependencyError("cannot open neighbors file " + path.string());
    }
    std::vector<NeighborList> out;
    std::string line;
    std::size_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (trim(line).empty()) {
            continue;
        }
        try {
            auto j = nlohmann::json::parse(line);
            NeighborList l;
            l.query_id = j.at("query_id").get<std::uint64_t>();
            for (const auto& n : j.at("neighbors")) {
                l.neighbors.push_back({n.at("id").get<std::uint64_t>(), n.at("distance").get<double>()});
            }
            out.push_back(std::move(l));
        } catch (const nlohmann::json::exception& e) {
            throw ParseError(line_no, e.what());
        }
    }
    return out;
}

}  // namespace iclmt
