#pragma once

// Decode-and-score harness: beam-decodes each held-out session and reports
// SID-level and item-level Recall@K and MRR plus the per-decode hallucination
// rate, with a comparison renderer for method/ablation tables.

#include <cstdint>
#include <set>
#include <string>
#include <vector>

#include "raddpo/common.hpp"
#include "raddpo/datagen.hpp"
#include "raddpo/model.hpp"
#include "raddpo/sid.hpp"
#include "raddpo/vocab.hpp"

namespace raddpo::eval {

struct EvalConfig {
    std::vector<size_t> sid_ks = {8, 64, 128};
    // Empty: derived from catalog size ({10,100,500}, or {10,50,100} for
    // catalogs under 500 items, whose item ranks cannot reach the paper Ks).
    std::vector<size_t> item_ks;
    size_t width = 128; // beam width; must cover the largest SID-level K
    bool constrained = false;
    std::string method = "unnamed";
    std::string corpus_hash;
    std::vector<uint64_t> seeds;

    void validate() const;
};

struct EvalReport {
    std::string method;
    std::string corpus_hash;
    size_t width = 0;
    bool constrained = false;
    std::vector<uint64_t> seeds;

    std::vector<size_t> sid_ks;
    std::vector<size_t> item_ks;
    std::vector<double> sid_recall; // parallel to sid_ks
    std::vector<double> item_recall;
    double sid_mrr = 0.0;
    double item_mrr = 0.0;
    double hallucination_rate = 0.0; // per-decode

    size_t sessions_scored = 0;
    size_t sessions_skipped = 0; // sessions whose oracle relevance is empty
    size_t decodes = 0;
};

// |top-K of ranked ∩ relevant| / |relevant|. Set semantics: duplicates in the
// ranking cannot double-count.
template <class T>
double recall_at_k(const std::vector<T>& ranked, const std::set<T>& relevant, size_t k) {
    if (k == 0) throw ConfigError("recall_at_k: K must be at least 1");
    if (relevant.empty()) throw ConfigError("recall_at_k: relevant set is empty");
    std::set<T> top(ranked.begin(), ranked.begin() + std::min(k, ranked.size()));
    size_t hits = 0;
    for (const T& t : top) hits += relevant.count(t);
    return static_cast<double>(hits) / static_cast<double>(relevant.size());
}

// Beam-decode every session and aggregate metrics over sessions with a
// non-empty oracle relevance set. Hallucinated decodes (sequences that do not
// parse or are absent from the catalog trie) occupy ranks in both rankings
// but can never hit.
EvalReport evaluate(const model::Model& m, const Vocab& vocab,
                    const std::vector<datagen::Session>& sessions,
                    const datagen::Oracle& oracle, const sid::Catalog& catalog,
                    const EvalConfig& cfg);

std::string report_to_json(const EvalReport& r);
EvalReport report_from_json(const std::string& text);
void save_report(const EvalReport& r, const std::string& path);
EvalReport load_report(const std::string& path); // throws MissingInputError

struct CompareResult {
    std::string table;                // rows per method, Table-style column order
    std::vector<std::string> records; // one JSON object per report, with deltas
};

// Renders >=2 reports that share an eval corpus hash against a named baseline
// method. Every metric is reported absolute and as a delta vs. the baseline.
CompareResult compare(const std::vector<EvalReport>& reports, const std::string& baseline);

} // namespace raddpo::eval
