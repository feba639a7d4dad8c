#pragma once

// Synthetic e-commerce session simulator: a latent query -> relevant-item map
// is sampled first; sessions draw tiered positives from it; negatives are
// exposed-unclicked or random items with controllable pseudo-negative rate and
// prefix-collision depths against the top-tier positive. The relevance map and
// per-negative pseudo flags form a hidden oracle used only by evaluation.

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "raddpo/packed.hpp"
#include "raddpo/sid.hpp"
#include "raddpo/vocab.hpp"

namespace raddpo::datagen {

enum class Tier { ordered, clicked };
enum class Origin { exposed_unclicked, random };

struct Positive {
    sid::SemanticId sid;
    Tier tier = Tier::clicked;
    int item = -1;
};

struct Negative {
    sid::SemanticId sid;
    Origin origin = Origin::exposed_unclicked;
    bool is_pseudo = false; // ground-truth bookkeeping, never shown to the trainer
    int item = -1;
};

struct Session {
    size_t query = 0;
    std::vector<int> prompt; // query token followed by history SID tokens
    std::vector<Positive> positives;
    std::vector<Negative> negatives;

    // The contrast anchor: the ordered positive if present, else the first.
    size_t wstar_index() const;
};

struct GenConfig {
    size_t sessions = 1000;
    size_t n_queries = 64;
    size_t n_negatives = 3;
    double pseudo_negative_rate = 0.2;
    // P(shared prefix depth >= 1), >= 2, >= 3 between a negative and y_w*.
    std::vector<double> prefix_share_targets = {0.346, 0.019, 0.004};
    size_t min_positives = 1;
    size_t max_positives = 3;
    double p_ordered = 0.6;         // chance the first positive is tier "ordered"
    size_t history_items = 2;       // previously clicked items in the prompt
    size_t max_history_tokens = 8;  // history token budget
    double exposed_fraction = 2.0 / 3.0; // exposed:random mix among true negatives
    double relevant_take = 0.5;     // fraction of a cluster that is relevant
    size_t noise_items = 6;         // extra relevant items outside the clusters
    uint64_t seed = 0;
    // Seed of the latent query->relevance world. Corpora sharing a map_seed
    // describe the same world with independent session draws (train/test
    // splits); when unset the world follows the corpus seed.
    std::optional<uint64_t> map_seed;

    uint64_t effective_map_seed() const { return map_seed.value_or(seed); }

    void validate() const;
};

struct Oracle {
    std::vector<std::vector<int>> relevant_items;    // per query, sorted item ids
    std::vector<std::vector<uint8_t>> pseudo_flags;  // per session, per negative
};

struct Corpus {
    std::vector<Session> sessions;
    Oracle oracle;
};

Corpus generate(const GenConfig& cfg, const sid::Catalog& catalog, const Vocab& vocab);

// One (prompt, y_w*, y_l) triple per negative, for pairwise baselines.
struct Triple {
    std::vector<int> prompt;
    sid::SemanticId y_w;
    sid::SemanticId y_l;
    size_t query = 0;
};
std::vector<Triple> split_for_pairwise(const std::vector<Session>& sessions);

// Packed training batch for one session: positives first, then negatives.
PackedBatch pack(const Session& s, const Vocab& vocab);

// Hierarchical synthetic item embeddings: a branching tree of Gaussian
// centers; the first prod(branching) items enumerate every leaf once, the rest
// sample leaves uniformly (collisions). Deterministic in the seed.
std::vector<std::vector<double>> synth_embeddings(size_t n_items, size_t dim,
                                                  const std::vector<size_t>& branching,
                                                  uint64_t seed);

// Corpus file: JSONL with a versioned header line; the hidden oracle (query
// relevance + pseudo flags) goes to a separate file the trainer never reads.
void save_corpus(const Corpus& corpus, const GenConfig& cfg, const Vocab& vocab,
                 const std::string& corpus_path, const std::string& oracle_path,
                 const std::string& catalog_hash);
std::vector<Session> load_corpus(const std::string& corpus_path, Vocab* vocab_out = nullptr,
                                 std::string* catalog_hash_out = nullptr);
Oracle load_oracle(const std::string& oracle_path);

} // namespace raddpo::datagen
