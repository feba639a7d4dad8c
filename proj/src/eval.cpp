#include "raddpo/eval.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <sstream>

#include <json.hpp>

namespace raddpo::eval {

using json = nlohmann::json;

namespace {

// Rank placeholder for a hallucinated decode: it occupies its position in the
// ranking but can never match a catalog SID (catalog codes are non-negative).
sid::SemanticId rank_sentinel(size_t rank) {
    return sid::SemanticId{{-1, -static_cast<int>(rank) - 1}};
}

std::vector<size_t> default_item_ks(const sid::Catalog& catalog) {
    if (catalog.num_items() < 500) return {10, 50, 100};
    return {10, 100, 500};
}

void require_ks(const std::vector<size_t>& ks, const char* label) {
    if (ks.empty()) throw ConfigError(std::string("eval config: ") + label + " must be non-empty");
    for (size_t k : ks)
        if (k == 0) throw ConfigError(std::string("eval config: ") + label + " entries must be >= 1");
}

std::vector<std::pair<std::string, double>> metric_columns(const EvalReport& r) {
    // Column order mirrors the comparison-table layout: hallucination first,
    // then the item-level group, then the SID-level group.
    std::vector<std::pair<std::string, double>> cols;
    cols.emplace_back("halluc", r.hallucination_rate);
    for (size_t i = 0; i < r.item_ks.size(); ++i)
        cols.emplace_back("item_recall@" + std::to_string(r.item_ks[i]), r.item_recall[i]);
    cols.emplace_back("item_mrr", r.item_mrr);
    for (size_t i = 0; i < r.sid_ks.size(); ++i)
        cols.emplace_back("sid_recall@" + std::to_string(r.sid_ks[i]), r.sid_recall[i]);
    cols.emplace_back("sid_mrr", r.sid_mrr);
    return cols;
}

std::string fmt(double v, bool delta) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), delta ? "%+.4f" : "%.4f", v);
    return buf;
}

} // namespace

void EvalConfig::validate() const {
    require_ks(sid_ks, "sid_ks");
    if (!item_ks.empty()) require_ks(item_ks, "item_ks");
    if (width == 0) throw ConfigError("eval config: width must be >= 1");
    const size_t max_sid_k = *std::max_element(sid_ks.begin(), sid_ks.end());
    if (width < max_sid_k)
        throw ConfigError("eval config: beam width " + std::to_string(width) +
                          " cannot fill SID recall@" + std::to_string(max_sid_k));
}

EvalReport evaluate(const model::Model& m, const Vocab& vocab,
                    const std::vector<datagen::Session>& sessions,
                    const datagen::Oracle& oracle, const sid::Catalog& catalog,
                    const EvalConfig& cfg) {
    cfg.validate();
    if (sessions.empty()) throw MissingInputError("evaluate: no sessions");
    if (catalog.num_items() == 0) throw MissingInputError("evaluate: empty catalog");

    EvalReport rep;
    rep.method = cfg.method;
    rep.corpus_hash = cfg.corpus_hash;
    rep.width = cfg.width;
    rep.constrained = cfg.constrained;
    rep.seeds = cfg.seeds;
    rep.sid_ks = cfg.sid_ks;
    rep.item_ks = cfg.item_ks.empty() ? default_item_ks(catalog) : cfg.item_ks;
    rep.sid_recall.assign(rep.sid_ks.size(), 0.0);
    rep.item_recall.assign(rep.item_ks.size(), 0.0);

    const sid::Trie* constraint = cfg.constrained ? &catalog.trie() : nullptr;
    size_t halluc = 0;

    for (const auto& s : sessions) {
        if (s.query >= oracle.relevant_items.size())
            throw ConfigError("evaluate: session query has no oracle relevance entry");
        const auto& rel_items_vec = oracle.relevant_items[s.query];
        if (rel_items_vec.empty()) {
            ++rep.sessions_skipped;
            continue;
        }
        const std::set<int> rel_items(rel_items_vec.begin(), rel_items_vec.end());
        std::set<sid::SemanticId> rel_sids;
        for (int item : rel_items_vec) rel_sids.insert(catalog.sid_of(item));

        auto beams = model::beam_search(m, vocab, s.prompt, cfg.width, constraint);
        rep.decodes += beams.size();

        std::vector<sid::SemanticId> ranked_sids;
        std::vector<int> ranked_items;
        std::set<int> seen_items;
        for (size_t rank = 0; rank < beams.size(); ++rank) {
            const auto& b = beams[rank];
            const bool valid = b.parses && catalog.contains(b.sid);
            if (!valid) ++halluc;
            ranked_sids.push_back(valid ? b.sid : rank_sentinel(rank));
            if (valid) {
                for (int item : catalog.items_with_sid(b.sid))
                    if (seen_items.insert(item).second) ranked_items.push_back(item);
            }
        }

        for (size_t i = 0; i < rep.sid_ks.size(); ++i)
            rep.sid_recall[i] += recall_at_k(ranked_sids, rel_sids, rep.sid_ks[i]);
        for (size_t i = 0; i < rep.item_ks.size(); ++i)
            rep.item_recall[i] += recall_at_k(ranked_items, rel_items, rep.item_ks[i]);
        for (size_t r = 0; r < ranked_sids.size(); ++r) {
            if (rel_sids.count(ranked_sids[r])) {
                rep.sid_mrr += 1.0 / static_cast<double>(r + 1);
                break;
            }
        }
        for (size_t r = 0; r < ranked_items.size(); ++r) {
            if (rel_items.count(ranked_items[r])) {
                rep.item_mrr += 1.0 / static_cast<double>(r + 1);
                break;
            }
        }
        ++rep.sessions_scored;
    }

    if (rep.sessions_scored == 0)
        throw ConfigError("evaluate: every session had an empty relevance set");
    const double n = static_cast<double>(rep.sessions_scored);
    for (double& v : rep.sid_recall) v /= n;
    for (double& v : rep.item_recall) v /= n;
    rep.sid_mrr /= n;
    rep.item_mrr /= n;
    rep.hallucination_rate =
        rep.decodes == 0 ? 0.0 : static_cast<double>(halluc) / static_cast<double>(rep.decodes);
    return rep;
}

std::string report_to_json(const EvalReport& r) {
    json j{{"format", "raddpo.report"},
           {"version", 1},
           {"method", r.method},
           {"corpus_hash", r.corpus_hash},
           {"width", r.width},
           {"constrained", r.constrained},
           {"seeds", r.seeds},
           {"sid_ks", r.sid_ks},
           {"item_ks", r.item_ks},
           {"sid_recall", r.sid_recall},
           {"item_recall", r.item_recall},
           {"sid_mrr", r.sid_mrr},
           {"item_mrr", r.item_mrr},
           {"hallucination_rate", r.hallucination_rate},
           {"sessions_scored", r.sessions_scored},
           {"sessions_skipped", r.sessions_skipped},
           {"decodes", r.decodes}};
    return j.dump();
}

EvalReport report_from_json(const std::string& text) {
    try {
        json j = json::parse(text);
        if (j.at("format") != "raddpo.report" || j.at("version") != 1)
            throw ConfigError("report: unrecognized format or version");
        EvalReport r;
        r.method = j.at("method");
        r.corpus_hash = j.at("corpus_hash");
        r.width = j.at("width");
        r.constrained = j.at("constrained");
        r.seeds = j.at("seeds").get<std::vector<uint64_t>>();
        r.sid_ks = j.at("sid_ks").get<std::vector<size_t>>();
        r.item_ks = j.at("item_ks").get<std::vector<size_t>>();
        r.sid_recall = j.at("sid_recall").get<std::vector<double>>();
        r.item_recall = j.at("item_recall").get<std::vector<double>>();
        r.sid_mrr = j.at("sid_mrr");
        r.item_mrr = j.at("item_mrr");
        r.hallucination_rate = j.at("hallucination_rate");
        r.sessions_scored = j.at("sessions_scored");
        r.sessions_skipped = j.at("sessions_skipped");
        r.decodes = j.at("decodes");
        if (r.sid_recall.size() != r.sid_ks.size() || r.item_recall.size() != r.item_ks.size())
            throw ConfigError("report: recall arrays do not match their K lists");
        return r;
    } catch (const json::exception& e) {
        throw ConfigError(std::string("report: malformed json: ") + e.what());
    }
}

void save_report(const EvalReport& r, const std::string& path) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingInputError("report: cannot open for writing: " + path);
    out << report_to_json(r) << '\n';
}

EvalReport load_report(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInputError("report: cannot open: " + path);
    std::string line;
    std::getline(in, line);
    return report_from_json(line);
}

CompareResult compare(const std::vector<EvalReport>& reports, const std::string& baseline) {
    if (reports.size() < 2) throw ConfigError("compare: need at least two reports");
    const EvalReport* base = nullptr;
    for (const auto& r : reports) {
        if (r.corpus_hash != reports.front().corpus_hash)
            throw HashMismatchError("compare: reports evaluate different corpora (" +
                                    r.corpus_hash + " vs " + reports.front().corpus_hash + ")");
        if (r.sid_ks != reports.front().sid_ks || r.item_ks != reports.front().item_ks)
            throw ConfigError("compare: reports use different K lists");
        if (!base && r.method == baseline) base = &r;
    }
    if (!base) throw ConfigError("compare: baseline method not found: " + baseline);

    const auto base_cols = metric_columns(*base);
    CompareResult out;

    size_t name_w = 6; // "method"
    for (const auto& r : reports) name_w = std::max(name_w, r.method.size());

    std::ostringstream table;
    table << std::string(name_w, ' ') << "  ";
    for (const auto& [name, v] : base_cols) table << name << "  ";
    table << '\n';
    for (const auto& r : reports) {
        table << r.method << std::string(name_w - r.method.size(), ' ') << "  ";
        const auto cols = metric_columns(r);
        for (size_t c = 0; c < cols.size(); ++c)
            table << fmt(cols[c].second, false)
                  << std::string(std::max<size_t>(cols[c].first.size(), 6) - 6 + 2, ' ');
        table << '\n';
    }
    table << "\ndeltas vs " << baseline << '\n';
    for (const auto& r : reports) {
        if (&r == base) continue;
        table << r.method << std::string(name_w - r.method.size(), ' ') << "  ";
        const auto cols = metric_columns(r);
        for (size_t c = 0; c < cols.size(); ++c)
            table << fmt(cols[c].second - base_cols[c].second, true)
                  << std::string(std::max<size_t>(cols[c].first.size(), 7) - 7 + 2, ' ');
        table << '\n';
    }
    out.table = table.str();

    for (const auto& r : reports) {
        const auto cols = metric_columns(r);
        json metrics = json::object(), deltas = json::object();
        for (size_t c = 0; c < cols.size(); ++c) {
            metrics[cols[c].first] = cols[c].second;
            deltas[cols[c].first] = cols[c].second - base_cols[c].second;
        }
        json rec{{"method", r.method},
                 {"corpus_hash", r.corpus_hash},
                 {"width", r.width},
                 {"is_baseline", &r == base},
                 {"metrics", metrics},
                 {"deltas", deltas}};
        out.records.push_back(rec.dump());
    }
    return out;
}

} // namespace raddpo::eval
