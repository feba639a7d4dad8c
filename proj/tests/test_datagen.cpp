#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <set>

#include "raddpo/common.hpp"
#include "raddpo/datagen.hpp"
#include "raddpo/sid.hpp"
#include "raddpo/vocab.hpp"

using namespace raddpo;
using namespace raddpo::datagen;

namespace {

size_t leaf_count(const std::vector<size_t>& sizes) {
    size_t n = 1;
    for (size_t s : sizes) n *= s;
    return n;
}

sid::SemanticId leaf_sid(size_t leaf, const std::vector<size_t>& sizes) {
    sid::SemanticId s;
    s.codes.resize(sizes.size());
    size_t stride = leaf_count(sizes);
    for (size_t l = 0; l < sizes.size(); ++l) {
        stride /= sizes[l];
        s.codes[l] = static_cast<int>((leaf / stride) % sizes[l]);
    }
    return s;
}

// Catalog enumerating every leaf SID once, plus `extra` repeated leading
// leaves so some SIDs map to multiple items.
sid::Catalog grid_catalog(const std::vector<size_t>& sizes, size_t extra) {
    size_t leaves = leaf_count(sizes);
    std::vector<sid::SemanticId> ids;
    for (size_t i = 0; i < leaves + extra; ++i)
        ids.push_back(leaf_sid(i < leaves ? i : (i - leaves) % leaves, sizes));
    return sid::Catalog::from_items(ids, sizes);
}

Vocab grid_vocab(const std::vector<size_t>& sizes, int n_queries) {
    Vocab v;
    v.level_sizes = sizes;
    v.n_query_tokens = n_queries;
    return v;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    REQUIRE(f.good());
    std::ostringstream ss;
    ss << f.rdbuf();
    return ss.str();
}

bool is_relevant(const Oracle& o, size_t query, int item) {
    const auto& rel = o.relevant_items.at(query);
    return std::binary_search(rel.begin(), rel.end(), item);
}

} // namespace

TEST_CASE("zero pseudo rate yields only irrelevant negatives") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 400;
    cfg.n_queries = 16;
    cfg.pseudo_negative_rate = 0.0;
    cfg.seed = 11;
    auto corpus = generate(cfg, catalog, vocab);
    REQUIRE(corpus.sessions.size() == 400);
    for (size_t si = 0; si < corpus.sessions.size(); ++si) {
        const auto& s = corpus.sessions[si];
        for (size_t ni = 0; ni < s.negatives.size(); ++ni) {
            CHECK_FALSE(s.negatives[ni].is_pseudo);
            CHECK_FALSE(is_relevant(corpus.oracle, s.query, s.negatives[ni].item));
            CHECK(corpus.oracle.pseudo_flags[si][ni] == 0);
        }
    }
}

TEST_CASE("depth-one target of 1.0 makes every negative share level 1") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 500;
    cfg.n_queries = 16;
    cfg.prefix_share_targets = {1.0, 0.0, 0.0};
    cfg.seed = 3;
    auto corpus = generate(cfg, catalog, vocab);
    size_t total = 0, deeper = 0;
    for (const auto& s : corpus.sessions) {
        const auto& w = s.positives[s.wstar_index()].sid.codes;
        for (const auto& n : s.negatives) {
            ++total;
            REQUIRE(n.sid.codes[0] == w[0]);
            if (n.sid.codes[1] == w[1]) ++deeper;
        }
    }
    REQUIRE(total == 500 * cfg.n_negatives);
    // Exact-depth draws ask for depth 1; deeper collisions only arise from
    // rare pool fallbacks.
    CHECK(static_cast<double>(deeper) / static_cast<double>(total) < 0.05);
}

TEST_CASE("measured pseudo and prefix-share rates track the config") {
    auto catalog = grid_catalog({8, 8, 8}, 88); // 512 leaves + 88 collisions
    auto vocab = grid_vocab({8, 8, 8}, 64);
    GenConfig cfg;
    cfg.sessions = 20000;
    cfg.n_queries = 64;
    cfg.pseudo_negative_rate = 0.2;
    cfg.seed = 2026;
    auto corpus = generate(cfg, catalog, vocab);

    size_t pseudo = 0, total = 0;
    std::vector<std::pair<sid::SemanticId, sid::SemanticId>> pairs;
    for (const auto& s : corpus.sessions) {
        const auto& w = s.positives[s.wstar_index()].sid;
        for (const auto& n : s.negatives) {
            ++total;
            pseudo += n.is_pseudo ? 1 : 0;
            pairs.emplace_back(w, n.sid);
        }
    }
    double pseudo_rate = static_cast<double>(pseudo) / static_cast<double>(total);
    CHECK(pseudo_rate == doctest::Approx(0.2).epsilon(0.1));
    CHECK(std::abs(pseudo_rate - 0.2) < 0.02);

    auto shares = sid::prefix_share_stats(pairs, 3);
    CHECK(std::abs(shares[0] - 0.346) < 0.02);
    CHECK(std::abs(shares[1] - 0.019) < 0.02);
    CHECK(shares[2] <= shares[1]);
}

TEST_CASE("oracle agrees with generated sessions") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 600;
    cfg.n_queries = 16;
    cfg.pseudo_negative_rate = 0.3;
    cfg.seed = 7;
    auto corpus = generate(cfg, catalog, vocab);
    size_t pseudo_seen = 0;
    for (size_t si = 0; si < corpus.sessions.size(); ++si) {
        const auto& s = corpus.sessions[si];
        for (const auto& p : s.positives) {
            CHECK(is_relevant(corpus.oracle, s.query, p.item));
            CHECK(catalog.sid_of(static_cast<size_t>(p.item)) == p.sid);
        }
        REQUIRE(corpus.oracle.pseudo_flags[si].size() == s.negatives.size());
        for (size_t ni = 0; ni < s.negatives.size(); ++ni) {
            const auto& n = s.negatives[ni];
            CHECK(n.is_pseudo == (corpus.oracle.pseudo_flags[si][ni] != 0));
            CHECK(n.is_pseudo == is_relevant(corpus.oracle, s.query, n.item));
            if (n.is_pseudo) {
                ++pseudo_seen;
                CHECK(n.origin == Origin::exposed_unclicked);
            }
        }
    }
    CHECK(pseudo_seen > 0);
}

TEST_CASE("session shape: tiers, prompt and anchor") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 300;
    cfg.n_queries = 16;
    cfg.min_positives = 2;
    cfg.max_positives = 3;
    cfg.seed = 5;
    auto corpus = generate(cfg, catalog, vocab);
    size_t ordered_sessions = 0;
    for (const auto& s : corpus.sessions) {
        REQUIRE(s.positives.size() >= 2);
        REQUIRE(s.positives.size() <= 3);
        for (size_t i = 1; i < s.positives.size(); ++i)
            CHECK(s.positives[i].tier == Tier::clicked);
        if (s.positives[0].tier == Tier::ordered) {
            ++ordered_sessions;
            CHECK(s.wstar_index() == 0);
        }
        REQUIRE(!s.prompt.empty());
        CHECK(s.prompt[0] >= vocab.query_offset());
        CHECK(s.prompt.size() <= 1 + cfg.max_history_tokens);
        for (size_t i = 1; i < s.prompt.size(); ++i) CHECK(vocab.is_any_level_token(s.prompt[i]));
    }
    double frac = static_cast<double>(ordered_sessions) / 300.0;
    CHECK(frac > 0.45);
    CHECK(frac < 0.75);
}

TEST_CASE("split_for_pairwise counts and anchors") {
    Session a;
    a.query = 2;
    a.prompt = {9};
    a.positives.push_back({sid::SemanticId{{1, 1}}, Tier::clicked, 0});
    a.positives.push_back({sid::SemanticId{{2, 2}}, Tier::ordered, 1});
    a.negatives.push_back({sid::SemanticId{{3, 3}}, Origin::random, false, 2});
    a.negatives.push_back({sid::SemanticId{{0, 3}}, Origin::exposed_unclicked, true, 3});

    Session b;
    b.query = 0;
    b.prompt = {8};
    b.positives.push_back({sid::SemanticId{{0, 1}}, Tier::clicked, 4});
    // no negatives -> contributes nothing

    auto triples = split_for_pairwise({a, b});
    REQUIRE(triples.size() == 2);
    CHECK(triples[0].y_w.codes == std::vector<int>{2, 2}); // the ordered positive wins
    CHECK(triples[0].y_l.codes == std::vector<int>{3, 3});
    CHECK(triples[1].y_l.codes == std::vector<int>{0, 3});
    CHECK(triples[0].prompt == a.prompt);
    CHECK(triples[0].query == 2);

    auto catalog = grid_catalog({4, 4}, 4);
    auto vocab = grid_vocab({4, 4}, 8);
    GenConfig cfg;
    cfg.sessions = 123;
    cfg.n_queries = 8;
    cfg.n_negatives = 3;
    cfg.prefix_share_targets = {0.3, 0.02};
    cfg.seed = 9;
    auto corpus = generate(cfg, catalog, vocab);
    CHECK(split_for_pairwise(corpus.sessions).size() == 123 * 3);
}

TEST_CASE("pack puts positives first and round-trips the session") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 40;
    cfg.n_queries = 16;
    cfg.min_positives = 2;
    cfg.max_positives = 2;
    cfg.seed = 21;
    auto corpus = generate(cfg, catalog, vocab);
    for (const auto& s : corpus.sessions) {
        auto batch = pack(s, vocab);
        REQUIRE(batch.num_segments == s.positives.size() + s.negatives.size());
        REQUIRE(batch.prompt_len() == s.prompt.size());
        for (size_t i = 0; i < s.prompt.size(); ++i) {
            CHECK(batch.tokens[i] == s.prompt[i]);
            CHECK(batch.target_mask[i] == 0);
        }
        for (size_t seg = 1; seg <= batch.num_segments; ++seg) {
            auto pos = batch.segment_positions(seg);
            const auto& want = seg <= s.positives.size()
                                   ? s.positives[seg - 1].sid
                                   : s.negatives[seg - 1 - s.positives.size()].sid;
            auto want_tokens = vocab.sid_tokens(want);
            want_tokens.push_back(Vocab::kEos);
            REQUIRE(pos.size() == want_tokens.size());
            for (size_t k = 0; k < pos.size(); ++k) {
                CHECK(batch.tokens[pos[k]] == want_tokens[k]);
                CHECK(batch.target_mask[pos[k]] == 1);
            }
        }
    }
}

TEST_CASE("same seed gives byte-identical corpus files, different seed differs") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 200;
    cfg.n_queries = 16;
    cfg.seed = 42;

    auto c1 = generate(cfg, catalog, vocab);
    auto c2 = generate(cfg, catalog, vocab);
    auto pa = temp_path("raddpo_corpus_a.jsonl");
    auto pb = temp_path("raddpo_corpus_b.jsonl");
    auto oa = temp_path("raddpo_oracle_a.jsonl");
    auto ob = temp_path("raddpo_oracle_b.jsonl");
    save_corpus(c1, cfg, vocab, pa, oa, "cafe");
    save_corpus(c2, cfg, vocab, pb, ob, "cafe");
    CHECK(slurp(pa) == slurp(pb));
    CHECK(slurp(oa) == slurp(ob));

    GenConfig other = cfg;
    other.seed = 43;
    auto c3 = generate(other, catalog, vocab);
    auto pc = temp_path("raddpo_corpus_c.jsonl");
    auto oc = temp_path("raddpo_oracle_c.jsonl");
    save_corpus(c3, other, vocab, pc, oc, "cafe");
    CHECK(slurp(pa) != slurp(pc));

    std::remove(pa.c_str());
    std::remove(pb.c_str());
    std::remove(pc.c_str());
    std::remove(oa.c_str());
    std::remove(ob.c_str());
    std::remove(oc.c_str());
}

TEST_CASE("a shared map_seed fixes the relevance world across corpus seeds") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig train;
    train.sessions = 300;
    train.n_queries = 16;
    train.seed = 11;
    train.map_seed = 77;

    GenConfig test = train;
    test.sessions = 120;
    test.seed = 999;

    auto ctrain = generate(train, catalog, vocab);
    auto ctest = generate(test, catalog, vocab);
    // Same latent world: identical per-query relevance sets...
    REQUIRE(ctrain.oracle.relevant_items.size() == ctest.oracle.relevant_items.size());
    for (size_t q = 0; q < ctrain.oracle.relevant_items.size(); ++q)
        CHECK(ctrain.oracle.relevant_items[q] == ctest.oracle.relevant_items[q]);
    // ...but independent session draws.
    bool any_differs = false;
    for (size_t i = 0; i < ctest.sessions.size() && !any_differs; ++i)
        any_differs = ctrain.sessions[i].prompt != ctest.sessions[i].prompt ||
                      ctrain.sessions[i].query != ctest.sessions[i].query;
    CHECK(any_differs);

    // Every session's positives stay inside the shared world's relevant set.
    for (const auto& s : ctest.sessions) {
        std::set<int> rel(ctest.oracle.relevant_items[s.query].begin(),
                          ctest.oracle.relevant_items[s.query].end());
        for (const auto& p : s.positives) CHECK(rel.count(p.item) == 1);
    }

    // Without map_seed the world follows the corpus seed, so it moves.
    GenConfig drift = train;
    drift.map_seed.reset();
    drift.seed = 999;
    auto cdrift = generate(drift, catalog, vocab);
    bool world_moved = false;
    for (size_t q = 0; q < cdrift.oracle.relevant_items.size() && !world_moved; ++q)
        world_moved = cdrift.oracle.relevant_items[q] != ctrain.oracle.relevant_items[q];
    CHECK(world_moved);
}

TEST_CASE("corpus files hide pseudo flags; loader restores everything else") {
    auto catalog = grid_catalog({4, 4, 4}, 16);
    auto vocab = grid_vocab({4, 4, 4}, 16);
    GenConfig cfg;
    cfg.sessions = 150;
    cfg.n_queries = 16;
    cfg.pseudo_negative_rate = 0.4;
    cfg.seed = 77;
    auto corpus = generate(cfg, catalog, vocab);
    auto cp = temp_path("raddpo_corpus_io.jsonl");
    auto op = temp_path("raddpo_oracle_io.jsonl");
    save_corpus(corpus, cfg, vocab, cp, op, "beefbeef");

    // Session lines must not carry pseudo flags (the header only records the
    // configured rate, which the trainer knows anyway).
    auto corpus_text = slurp(cp);
    CHECK(corpus_text.substr(corpus_text.find('\n') + 1).find("pseudo") == std::string::npos);

    Vocab loaded_vocab;
    std::string hash;
    auto sessions = load_corpus(cp, &loaded_vocab, &hash);
    CHECK(hash == "beefbeef");
    CHECK(loaded_vocab.level_sizes == vocab.level_sizes);
    CHECK(loaded_vocab.n_query_tokens == vocab.n_query_tokens);
    REQUIRE(sessions.size() == corpus.sessions.size());
    bool any_pseudo_in_memory = false;
    for (size_t i = 0; i < sessions.size(); ++i) {
        const auto& got = sessions[i];
        const auto& want = corpus.sessions[i];
        CHECK(got.query == want.query);
        CHECK(got.prompt == want.prompt);
        REQUIRE(got.positives.size() == want.positives.size());
        for (size_t k = 0; k < got.positives.size(); ++k) {
            CHECK(got.positives[k].sid == want.positives[k].sid);
            CHECK(got.positives[k].tier == want.positives[k].tier);
            CHECK(got.positives[k].item == want.positives[k].item);
        }
        REQUIRE(got.negatives.size() == want.negatives.size());
        for (size_t k = 0; k < got.negatives.size(); ++k) {
            CHECK(got.negatives[k].sid == want.negatives[k].sid);
            CHECK(got.negatives[k].origin == want.negatives[k].origin);
            CHECK(got.negatives[k].item == want.negatives[k].item);
            CHECK_FALSE(got.negatives[k].is_pseudo); // hidden from the corpus file
            any_pseudo_in_memory = any_pseudo_in_memory || want.negatives[k].is_pseudo;
        }
    }
    CHECK(any_pseudo_in_memory);

    auto oracle = load_oracle(op);
    REQUIRE(oracle.relevant_items.size() == corpus.oracle.relevant_items.size());
    CHECK(oracle.relevant_items == corpus.oracle.relevant_items);
    CHECK(oracle.pseudo_flags == corpus.oracle.pseudo_flags);

    std::remove(cp.c_str());
    std::remove(op.c_str());
}

TEST_CASE("IO rejects missing and malformed files") {
    CHECK_THROWS_AS((void)load_corpus(temp_path("raddpo_nope.jsonl")), MissingInputError);
    CHECK_THROWS_AS((void)load_oracle(temp_path("raddpo_nope.jsonl")), MissingInputError);

    auto bad = temp_path("raddpo_bad_corpus.jsonl");
    {
        std::ofstream f(bad);
        f << "{\"format\":\"raddpo.catalogue\",\"version\":1}\n";
    }
    CHECK_THROWS_AS((void)load_corpus(bad), ConfigError);
    {
        std::ofstream f(bad);
        f << "{\"format\":\"raddpo.corpus\",\"version\":1,\"sessions\":5,"
          << "\"level_sizes\":[4],\"n_query_tokens\":2,\"catalog_hash\":\"x\"}\n";
        // no session lines -> count mismatch
    }
    CHECK_THROWS_AS((void)load_corpus(bad), ConfigError);
    {
        std::ofstream f(bad);
        f << "this is not json\n";
    }
    CHECK_THROWS_AS((void)load_corpus(bad), ConfigError);
    std::remove(bad.c_str());
}

TEST_CASE("infeasible prefix targets and bad configs are rejected") {
    // All items share one level-1 cluster.
    std::vector<sid::SemanticId> ids;
    for (int i = 0; i < 8; ++i) ids.push_back(sid::SemanticId{{0, i % 4}});
    auto catalog = sid::Catalog::from_items(ids, {4, 4});
    auto vocab = grid_vocab({4, 4}, 4);
    GenConfig cfg;
    cfg.sessions = 10;
    cfg.n_queries = 4;
    cfg.prefix_share_targets = {0.346, 0.019};
    CHECK_THROWS_AS((void)generate(cfg, catalog, vocab), ConfigError);

    auto good_catalog = grid_catalog({4, 4}, 0);
    GenConfig bad = cfg;
    bad.prefix_share_targets = {0.1, 0.5}; // increasing
    CHECK_THROWS_AS((void)generate(bad, good_catalog, vocab), ConfigError);
    bad = cfg;
    bad.prefix_share_targets = {0.3};
    CHECK_THROWS_AS((void)generate(bad, good_catalog, vocab), ConfigError);
    bad = cfg;
    bad.pseudo_negative_rate = 1.5;
    CHECK_THROWS_AS((void)generate(bad, good_catalog, vocab), ConfigError);
    bad = cfg;
    bad.n_queries = 1000; // exceeds vocab query budget
    CHECK_THROWS_AS((void)generate(bad, good_catalog, vocab), ConfigError);
}

TEST_CASE("synthetic embeddings are deterministic and hierarchical") {
    auto e1 = synth_embeddings(48, 8, {4, 4}, 13);
    auto e2 = synth_embeddings(48, 8, {4, 4}, 13);
    REQUIRE(e1.size() == 48);
    REQUIRE(e1[0].size() == 8);
    CHECK(e1 == e2);
    auto e3 = synth_embeddings(48, 8, {4, 4}, 14);
    CHECK(e1 != e3);

    // Residual quantization on the synthetic tree recovers most leaves.
    auto cb = sid::rq_kmeans_fit(e1, {4, 4}, 1);
    std::set<std::vector<int>> unique;
    std::vector<sid::SemanticId> ids;
    for (const auto& e : e1) {
        auto s = sid::encode(e, cb);
        unique.insert(s.codes);
        ids.push_back(s);
    }
    CHECK(unique.size() >= 13); // 16 leaves, minor merges tolerated
    auto errs = sid::residual_errors(e1, cb);
    REQUIRE(errs.size() == 2);
    CHECK(errs[1] <= errs[0]);

    CHECK_THROWS_AS((void)synth_embeddings(0, 8, {4}, 1), ConfigError);
    CHECK_THROWS_AS((void)synth_embeddings(8, 8, {0}, 1), ConfigError);
}
