#pragma once

// Hierarchical Semantic IDs: residual K-means codebooks over item embeddings,
// the SID <-> item catalog (many items may collide on one SID), and a prefix
// trie used for constrained decoding and hallucination checks.

#include <compare>
#include <cstdint>
#include <map>
#include <memory>
#include <string>
#include <utility>
#include <vector>

namespace raddpo::sid {

struct SemanticId {
    std::vector<int> codes; // one code per level

    auto operator<=>(const SemanticId&) const = default;
    bool operator==(const SemanticId&) const = default;
};

struct Codebooks {
    size_t dim = 0;
    std::vector<size_t> sizes;              // per-level centroid counts
    std::vector<std::vector<double>> levels; // level l: sizes[l] x dim, row-major

    size_t num_levels() const { return sizes.size(); }
    const double* center(size_t level, size_t idx) const {
        return levels[level].data() + idx * dim;
    }
};

// Residual K-means: level l clusters the residuals left after subtracting the
// assigned centroids of levels < l. k-means++ init, Lloyd iterations until
// assignments are stable (max_iters cap), empty clusters re-seeded from the
// point farthest from its assigned centroid. Deterministic given seed.
Codebooks rq_kmeans_fit(const std::vector<std::vector<double>>& embeddings,
                        const std::vector<size_t>& sizes, uint64_t seed, size_t max_iters = 50);

// Greedy nearest-centroid residual assignment per level; ties broken by the
// lowest centroid index.
SemanticId encode(const std::vector<double>& embedding, const Codebooks& cb);

// Mean squared residual norm after quantizing with levels 0..l, for each l.
// Entry 0 is the error of the level-1 quantizer alone; adding levels can only
// keep or shrink the error.
std::vector<double> residual_errors(const std::vector<std::vector<double>>& embeddings,
                                    const Codebooks& cb);

class Trie {
public:
    Trie() = default;
    explicit Trie(std::vector<size_t> sizes) : sizes_(std::move(sizes)) {}

    void insert(const SemanticId& sid);

    // Valid next codes after `prefix`, ascending. Empty result means either
    // no catalog SID extends the prefix, or the prefix is already full-length.
    std::vector<int> continuations(const std::vector<int>& prefix) const;

    // Membership verdict for a full-length code sequence.
    bool contains(const std::vector<int>& codes) const;

    // True if some catalog SID starts with `prefix`.
    bool has_prefix(const std::vector<int>& prefix) const;

    const std::vector<size_t>& sizes() const { return sizes_; }

private:
    struct Node {
        std::map<int, std::unique_ptr<Node>> children;
        bool terminal = false;
    };
    void check_prefix(const std::vector<int>& prefix) const;
    const Node* walk(const std::vector<int>& prefix) const;

    Node root_;
    std::vector<size_t> sizes_;
};

// Item id is the index into the SID list. Immutable after construction.
class Catalog {
public:
    Catalog() = default;
    static Catalog from_items(std::vector<SemanticId> item_sids, std::vector<size_t> sizes);

    size_t num_items() const { return item_sids_.size(); }
    size_t num_unique_sids() const { return sid_to_items_.size(); }
    const SemanticId& sid_of(size_t item) const { return item_sids_.at(item); }
    const std::vector<SemanticId>& item_sids() const { return item_sids_; }

    // Items sharing the given SID (empty if the SID is not in the catalog).
    const std::vector<int>& items_with_sid(const SemanticId& sid) const;
    bool contains(const SemanticId& sid) const;

    const Trie& trie() const { return trie_; }
    const std::vector<size_t>& sizes() const { return sizes_; }
    const std::map<SemanticId, std::vector<int>>& sid_to_items() const { return sid_to_items_; }

private:
    std::vector<SemanticId> item_sids_;
    std::map<SemanticId, std::vector<int>> sid_to_items_;
    Trie trie_;
    std::vector<size_t> sizes_;
};

// Fraction of pairs sharing >= d+1 leading codes, for d = 0..levels-1.
std::vector<double> prefix_share_stats(const std::vector<std::pair<SemanticId, SemanticId>>& pairs,
                                       size_t levels);

// Persistence. Codebooks: versioned JSON dump of centroid matrices (doubles
// round-trip exactly). Catalog: versioned header line, then one comma-separated
// record per item: item_id,code_1,...,code_L.
void save_codebooks(const Codebooks& cb, const std::string& path);
Codebooks load_codebooks(const std::string& path);
void save_catalog(const Catalog& cat, const std::string& path);
Catalog load_catalog(const std::string& path);

} // namespace raddpo::sid
