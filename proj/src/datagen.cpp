#include "raddpo/datagen.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <sstream>

#include <json.hpp>

#include "raddpo/common.hpp"
#include "raddpo/rng.hpp"

namespace raddpo::datagen {

using json = nlohmann::json;

namespace {

constexpr uint64_t kQueryStream = 0x71756572ull;   // latent relevance map
constexpr uint64_t kSessionStream = 0x73657373ull; // per-session draws
constexpr uint64_t kCenterStream = 0xCE47E500ull;  // embedding tree centers
constexpr uint64_t kItemStream = 0x17E30000ull;    // per-item embeddings

size_t sample_index(std::mt19937_64& g, size_t n) { return rngu::uniform_index(g, n); }

// Draw `take` distinct elements of `src` (uniformly, order of draw) via
// partial Fisher-Yates on a scratch copy.
std::vector<int> sample_distinct(std::mt19937_64& g, std::vector<int> src, size_t take) {
    take = std::min(take, src.size());
    std::vector<int> out;
    out.reserve(take);
    for (size_t i = 0; i < take; ++i) {
        size_t j = i + sample_index(g, src.size() - i);
        std::swap(src[i], src[j]);
        out.push_back(src[i]);
    }
    return out;
}

} // namespace

size_t Session::wstar_index() const {
    if (positives.empty()) throw ConfigError("session has no positives");
    for (size_t i = 0; i < positives.size(); ++i)
        if (positives[i].tier == Tier::ordered) return i;
    return 0;
}

void GenConfig::validate() const {
    if (sessions == 0) throw ConfigError("gen config: sessions must be positive");
    if (n_queries == 0) throw ConfigError("gen config: n_queries must be positive");
    if (pseudo_negative_rate < 0.0 || pseudo_negative_rate > 1.0)
        throw ConfigError("gen config: pseudo_negative_rate must lie in [0, 1]");
    if (min_positives == 0 || max_positives < min_positives)
        throw ConfigError("gen config: need 1 <= min_positives <= max_positives");
    if (p_ordered < 0.0 || p_ordered > 1.0)
        throw ConfigError("gen config: p_ordered must lie in [0, 1]");
    if (exposed_fraction < 0.0 || exposed_fraction > 1.0)
        throw ConfigError("gen config: exposed_fraction must lie in [0, 1]");
    if (relevant_take <= 0.0 || relevant_take > 1.0)
        throw ConfigError("gen config: relevant_take must lie in (0, 1]");
    if (prefix_share_targets.empty())
        throw ConfigError("gen config: prefix_share_targets must not be empty");
    double prev = 1.0;
    for (double t : prefix_share_targets) {
        if (t < 0.0 || t > 1.0 || t > prev)
            throw ConfigError("gen config: prefix_share_targets must be non-increasing in [0, 1]");
        prev = t;
    }
}

Corpus generate(const GenConfig& cfg, const sid::Catalog& catalog, const Vocab& vocab) {
    cfg.validate();
    const size_t levels = catalog.sizes().size();
    if (cfg.prefix_share_targets.size() != levels)
        throw ConfigError("gen config: prefix_share_targets must have one entry per SID level");
    if (cfg.n_queries > static_cast<size_t>(vocab.n_query_tokens))
        throw ConfigError("gen config: n_queries exceeds the vocab's query-token budget");
    if (vocab.level_sizes != catalog.sizes())
        throw ConfigError("gen config: vocab level sizes disagree with the catalog");

    const size_t n_items = catalog.num_items();
    if (n_items < 2) throw ConfigError("gen config: catalog must hold at least two items");

    // Group items by their level-1 code.
    std::map<int, std::vector<int>> clusters;
    for (size_t i = 0; i < n_items; ++i)
        clusters[catalog.sid_of(i).codes[0]].push_back(static_cast<int>(i));
    if (clusters.size() < 2 && cfg.prefix_share_targets[0] < 1.0)
        throw ConfigError("gen config: prefix share targets are infeasible — the catalog "
                          "has a single level-1 cluster, so every pair shares level 1");

    std::vector<int> cluster_codes;
    cluster_codes.reserve(clusters.size());
    for (const auto& [code, _] : clusters) cluster_codes.push_back(code);

    // Latent relevance map: each query covers a random subset of one or two
    // level-1 clusters plus a few noise items from outside, so relevant and
    // irrelevant items exist at every prefix depth.
    Corpus out;
    out.oracle.relevant_items.resize(cfg.n_queries);
    std::vector<std::vector<uint8_t>> rel_mask(cfg.n_queries, std::vector<uint8_t>(n_items, 0));
    for (size_t q = 0; q < cfg.n_queries; ++q) {
        auto g = rngu::derive(cfg.effective_map_seed(), kQueryStream + q);
        size_t n_clusters = (clusters.size() >= 2 && rngu::uniform01(g) < 0.5) ? 2 : 1;
        std::vector<int> chosen = sample_distinct(g, cluster_codes, n_clusters);
        std::vector<uint8_t> in_chosen(n_items, 0);
        std::vector<int> rel;
        for (int code : chosen) {
            const auto& members = clusters.at(code);
            for (int it : members) in_chosen[static_cast<size_t>(it)] = 1;
            size_t take = std::max<size_t>(1, static_cast<size_t>(
                                                  std::lround(cfg.relevant_take * static_cast<double>(members.size()))));
            for (int it : sample_distinct(g, members, take)) rel.push_back(it);
        }
        std::vector<int> outside;
        for (size_t it = 0; it < n_items; ++it)
            if (!in_chosen[it]) outside.push_back(static_cast<int>(it));
        for (int it : sample_distinct(g, outside, cfg.noise_items)) rel.push_back(it);
        std::sort(rel.begin(), rel.end());
        rel.erase(std::unique(rel.begin(), rel.end()), rel.end());
        for (int it : rel) rel_mask[q][static_cast<size_t>(it)] = 1;
        out.oracle.relevant_items[q] = std::move(rel);
    }

    // Prefix indices over the catalog for exact-depth negative draws.
    std::map<std::vector<int>, std::vector<int>> by_prefix; // depth 1..levels-1
    for (size_t i = 0; i < n_items; ++i) {
        const auto& codes = catalog.sid_of(i).codes;
        for (size_t d = 1; d < levels; ++d) {
            std::vector<int> key(codes.begin(), codes.begin() + static_cast<long>(d));
            by_prefix[key].push_back(static_cast<int>(i));
        }
    }
    auto items_with_prefix = [&](const std::vector<int>& key) -> const std::vector<int>& {
        static const std::vector<int> empty;
        auto it = by_prefix.find(key);
        return it == by_prefix.end() ? empty : it->second;
    };

    out.sessions.resize(cfg.sessions);
    out.oracle.pseudo_flags.resize(cfg.sessions);

    for (size_t si = 0; si < cfg.sessions; ++si) {
        auto g = rngu::derive(cfg.seed, kSessionStream + si);
        Session s;
        s.query = sample_index(g, cfg.n_queries);
        const auto& rel = out.oracle.relevant_items[s.query];
        const auto& mask = rel_mask[s.query];

        // Tiered positives.
        size_t span = cfg.max_positives - cfg.min_positives + 1;
        size_t n_pos = std::min(cfg.min_positives + sample_index(g, span), rel.size());
        bool has_ordered = rngu::uniform01(g) < cfg.p_ordered;
        std::vector<uint8_t> is_positive(n_items, 0);
        for (int it : sample_distinct(g, rel, n_pos)) {
            Positive p;
            p.item = it;
            p.sid = catalog.sid_of(static_cast<size_t>(it));
            p.tier = (s.positives.empty() && has_ordered) ? Tier::ordered : Tier::clicked;
            s.positives.push_back(std::move(p));
            is_positive[static_cast<size_t>(it)] = 1;
        }

        // Prompt: query token, then SID tokens of previously clicked items.
        std::vector<int> hist_pool;
        for (int it : rel)
            if (!is_positive[static_cast<size_t>(it)]) hist_pool.push_back(it);
        if (hist_pool.size() < cfg.history_items) hist_pool = rel;
        s.prompt.push_back(vocab.query_token(static_cast<int>(s.query)));
        for (int it : sample_distinct(g, hist_pool, cfg.history_items)) {
            auto toks = vocab.sid_tokens(catalog.sid_of(static_cast<size_t>(it)));
            s.prompt.insert(s.prompt.end(), toks.begin(), toks.end());
        }
        if (s.prompt.size() > 1 + cfg.max_history_tokens)
            s.prompt.resize(1 + cfg.max_history_tokens);

        const auto& wstar = s.positives[s.wstar_index()].sid.codes;

        // Candidates of exactly-depth-d shared prefix with y_w*, filtered to the
        // requested pool. Depth 0 lists everything outside wstar's level-1 code.
        auto exact_depth_candidates = [&](size_t d, bool pseudo) {
            std::vector<int> cand;
            auto admit = [&](int it) {
                if (is_positive[static_cast<size_t>(it)]) return;
                if (static_cast<bool>(mask[static_cast<size_t>(it)]) != pseudo) return;
                cand.push_back(it);
            };
            if (d == 0) {
                for (size_t it = 0; it < n_items; ++it)
                    if (catalog.sid_of(it).codes[0] != wstar[0]) admit(static_cast<int>(it));
            } else if (d == levels) {
                sid::SemanticId full;
                full.codes = wstar;
                for (int it : catalog.items_with_sid(full)) admit(it);
            } else {
                std::vector<int> key(wstar.begin(), wstar.begin() + static_cast<long>(d));
                for (int it : items_with_prefix(key))
                    if (catalog.sid_of(static_cast<size_t>(it)).codes[d] != wstar[d]) admit(it);
            }
            return cand;
        };
        auto any_pool_candidates = [&](bool pseudo) {
            std::vector<int> cand;
            for (size_t it = 0; it < n_items; ++it) {
                if (is_positive[it]) continue;
                if (static_cast<bool>(mask[it]) != pseudo) continue;
                cand.push_back(static_cast<int>(it));
            }
            return cand;
        };

        auto& flags = out.oracle.pseudo_flags[si];
        for (size_t ni = 0; ni < cfg.n_negatives; ++ni) {
            bool want = rngu::uniform01(g) < cfg.pseudo_negative_rate;
            double u = rngu::uniform01(g);
            size_t depth = 0;
            for (double t : cfg.prefix_share_targets) depth += (u < t) ? 1 : 0;

            // Exact depth in the requested pool first. Depth fidelity matters
            // more than the pool, so flip the pool before relaxing the depth —
            // but only when the rate leaves both pools in play; a pinned rate
            // of exactly 0 or 1 is a hard guarantee. Fallbacks are rare by
            // construction.
            const bool allow_flip =
                cfg.pseudo_negative_rate > 0.0 && cfg.pseudo_negative_rate < 1.0;
            std::vector<int> cand;
            bool pseudo = want;
            auto try_pick = [&](size_t d, bool p) {
                if (!cand.empty() || (p != want && !allow_flip)) return;
                cand = exact_depth_candidates(d, p);
                if (!cand.empty()) pseudo = p;
            };
            try_pick(depth, want);
            try_pick(depth, !want);
            for (size_t d = depth + 1; d <= levels; ++d) {
                try_pick(d, want);
                try_pick(d, !want);
            }
            if (cand.empty()) {
                cand = any_pool_candidates(want);
                pseudo = want;
            }
            if (cand.empty() && allow_flip) {
                cand = any_pool_candidates(!want);
                pseudo = !want;
            }
            if (cand.empty())
                throw ConfigError("gen config: cannot draw a negative — catalog too degenerate");

            Negative n;
            n.item = cand[sample_index(g, cand.size())];
            n.sid = catalog.sid_of(static_cast<size_t>(n.item));
            n.is_pseudo = pseudo;
            n.origin = pseudo ? Origin::exposed_unclicked
                              : (rngu::uniform01(g) < cfg.exposed_fraction ? Origin::exposed_unclicked
                                                                           : Origin::random);
            s.negatives.push_back(std::move(n));
            flags.push_back(pseudo ? 1 : 0);
        }

        out.sessions[si] = std::move(s);
    }
    return out;
}

std::vector<Triple> split_for_pairwise(const std::vector<Session>& sessions) {
    std::vector<Triple> out;
    for (const auto& s : sessions) {
        const auto& yw = s.positives[s.wstar_index()].sid;
        for (const auto& n : s.negatives) {
            Triple t;
            t.prompt = s.prompt;
            t.y_w = yw;
            t.y_l = n.sid;
            t.query = s.query;
            out.push_back(std::move(t));
        }
    }
    return out;
}

PackedBatch pack(const Session& s, const Vocab& vocab) {
    std::vector<std::vector<int>> cands;
    for (const auto& p : s.positives) cands.push_back(vocab.sid_tokens(p.sid));
    for (const auto& n : s.negatives) cands.push_back(vocab.sid_tokens(n.sid));
    return make_packed(s.prompt, cands, Vocab::kEos);
}

std::vector<std::vector<double>> synth_embeddings(size_t n_items, size_t dim,
                                                  const std::vector<size_t>& branching,
                                                  uint64_t seed) {
    if (n_items == 0 || dim == 0 || branching.empty())
        throw ConfigError("synth embeddings: need items, dimensions and branching levels");
    size_t n_leaves = 1;
    for (size_t b : branching) {
        if (b == 0) throw ConfigError("synth embeddings: branching factors must be positive");
        n_leaves *= b;
    }

    // Per-level digit offsets shared across parents — exactly the additive
    // structure residual quantization models. Scale shrinks with depth so the
    // levels separate cleanly.
    std::vector<std::vector<std::vector<double>>> offsets(branching.size());
    double spread = 10.0;
    double last_spread = spread;
    for (size_t l = 0; l < branching.size(); ++l) {
        auto g = rngu::derive(seed, kCenterStream + l);
        offsets[l].assign(branching[l], std::vector<double>(dim, 0.0));
        for (auto& c : offsets[l])
            for (auto& v : c) v = spread * rngu::normal(g);
        last_spread = spread;
        spread *= 0.3;
    }
    const double noise = 0.25 * last_spread;

    std::vector<std::vector<double>> out(n_items, std::vector<double>(dim, 0.0));
    for (size_t i = 0; i < n_items; ++i) {
        auto g = rngu::derive(seed, kItemStream + i);
        size_t leaf = (i < n_leaves) ? i : rngu::uniform_index(g, n_leaves);
        size_t stride = n_leaves;
        for (size_t l = 0; l < branching.size(); ++l) {
            stride /= branching[l];
            size_t digit = (leaf / stride) % branching[l];
            for (size_t d = 0; d < dim; ++d) out[i][d] += offsets[l][digit][d];
        }
        for (size_t d = 0; d < dim; ++d) out[i][d] += noise * rngu::normal(g);
    }
    return out;
}

namespace {

json session_to_json(const Session& s) {
    json jp = json::array();
    for (const auto& p : s.positives)
        jp.push_back({{"c", p.sid.codes}, {"t", p.tier == Tier::ordered ? 0 : 1}, {"i", p.item}});
    json jn = json::array();
    for (const auto& n : s.negatives)
        jn.push_back({{"c", n.sid.codes}, {"o", n.origin == Origin::exposed_unclicked ? 0 : 1}, {"i", n.item}});
    return json{{"q", s.query}, {"prompt", s.prompt}, {"pos", std::move(jp)}, {"neg", std::move(jn)}};
}

Session session_from_json(const json& j) {
    Session s;
    s.query = j.at("q").get<size_t>();
    s.prompt = j.at("prompt").get<std::vector<int>>();
    for (const auto& jp : j.at("pos")) {
        Positive p;
        p.sid.codes = jp.at("c").get<std::vector<int>>();
        p.tier = jp.at("t").get<int>() == 0 ? Tier::ordered : Tier::clicked;
        p.item = jp.at("i").get<int>();
        s.positives.push_back(std::move(p));
    }
    for (const auto& jn : j.at("neg")) {
        Negative n;
        n.sid.codes = jn.at("c").get<std::vector<int>>();
        n.origin = jn.at("o").get<int>() == 0 ? Origin::exposed_unclicked : Origin::random;
        n.item = jn.at("i").get<int>();
        s.negatives.push_back(std::move(n));
    }
    return s;
}

} // namespace

void save_corpus(const Corpus& corpus, const GenConfig& cfg, const Vocab& vocab,
                 const std::string& corpus_path, const std::string& oracle_path,
                 const std::string& catalog_hash) {
    {
        std::ofstream f(corpus_path, std::ios::binary);
        if (!f) throw ConfigError("cannot open corpus file for writing: " + corpus_path);
        json header{{"format", "raddpo.corpus"},
                    {"version", 1},
                    {"sessions", corpus.sessions.size()},
                    {"level_sizes", vocab.level_sizes},
                    {"n_query_tokens", vocab.n_query_tokens},
                    {"catalog_hash", catalog_hash},
                    {"seed", cfg.seed},
                    {"map_seed", cfg.effective_map_seed()},
                    {"n_negatives", cfg.n_negatives},
                    {"pseudo_negative_rate", cfg.pseudo_negative_rate}};
        f << header.dump() << '\n';
        for (const auto& s : corpus.sessions) f << session_to_json(s).dump() << '\n';
    }
    {
        std::ofstream f(oracle_path, std::ios::binary);
        if (!f) throw ConfigError("cannot open oracle file for writing: " + oracle_path);
        json header{{"format", "raddpo.oracle"},
                    {"version", 1},
                    {"n_queries", corpus.oracle.relevant_items.size()},
                    {"sessions", corpus.oracle.pseudo_flags.size()}};
        f << header.dump() << '\n';
        f << json{{"relevant", corpus.oracle.relevant_items}}.dump() << '\n';
        for (const auto& flags : corpus.oracle.pseudo_flags)
            f << json{{"p", flags}}.dump() << '\n';
    }
}

namespace {

json parse_line(const std::string& line, const std::string& path) {
    try {
        return json::parse(line);
    } catch (const json::exception& e) {
        throw ConfigError("malformed JSONL in " + path + ": " + e.what());
    }
}

std::ifstream open_input(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw MissingInputError("cannot open file: " + path);
    return f;
}

} // namespace

std::vector<Session> load_corpus(const std::string& corpus_path, Vocab* vocab_out,
                                 std::string* catalog_hash_out) {
    auto f = open_input(corpus_path);
    std::string line;
    if (!std::getline(f, line)) throw ConfigError("corpus file is empty: " + corpus_path);
    json header = parse_line(line, corpus_path);
    try {
        if (header.at("format").get<std::string>() != "raddpo.corpus")
            throw ConfigError("not a corpus file: " + corpus_path);
        if (header.at("version").get<int>() != 1)
            throw ConfigError("unsupported corpus version in " + corpus_path);
        if (vocab_out) {
            vocab_out->level_sizes = header.at("level_sizes").get<std::vector<size_t>>();
            vocab_out->n_query_tokens = header.at("n_query_tokens").get<int>();
        }
        if (catalog_hash_out) *catalog_hash_out = header.at("catalog_hash").get<std::string>();
        size_t expected = header.at("sessions").get<size_t>();
        std::vector<Session> out;
        out.reserve(expected);
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            out.push_back(session_from_json(parse_line(line, corpus_path)));
        }
        if (out.size() != expected)
            throw ConfigError("corpus session count mismatch in " + corpus_path);
        return out;
    } catch (const json::exception& e) {
        throw ConfigError("malformed corpus header in " + corpus_path + ": " + e.what());
    }
}

Oracle load_oracle(const std::string& oracle_path) {
    auto f = open_input(oracle_path);
    std::string line;
    if (!std::getline(f, line)) throw ConfigError("oracle file is empty: " + oracle_path);
    json header = parse_line(line, oracle_path);
    try {
        if (header.at("format").get<std::string>() != "raddpo.oracle")
            throw ConfigError("not an oracle file: " + oracle_path);
        if (header.at("version").get<int>() != 1)
            throw ConfigError("unsupported oracle version in " + oracle_path);
        Oracle out;
        if (!std::getline(f, line)) throw ConfigError("oracle file is truncated: " + oracle_path);
        out.relevant_items =
            parse_line(line, oracle_path).at("relevant").get<std::vector<std::vector<int>>>();
        if (out.relevant_items.size() != header.at("n_queries").get<size_t>())
            throw ConfigError("oracle query count mismatch in " + oracle_path);
        size_t expected = header.at("sessions").get<size_t>();
        while (std::getline(f, line)) {
            if (line.empty()) continue;
            out.pseudo_flags.push_back(
                parse_line(line, oracle_path).at("p").get<std::vector<uint8_t>>());
        }
        if (out.pseudo_flags.size() != expected)
            throw ConfigError("oracle session count mismatch in " + oracle_path);
        return out;
    } catch (const json::exception& e) {
        throw ConfigError("malformed oracle file " + oracle_path + ": " + e.what());
    }
}

} // namespace raddpo::datagen
