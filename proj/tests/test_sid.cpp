#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <random>
#include <set>

#include "raddpo/common.hpp"
#include "raddpo/rng.hpp"
#include "raddpo/sid.hpp"
#include "raddpo/vocab.hpp"

using namespace raddpo;
using sid::Codebooks;
using sid::SemanticId;

namespace {

std::vector<std::vector<double>> gaussian_blobs(const std::vector<std::vector<double>>& centers,
                                                size_t per_blob, double stddev, uint64_t seed,
                                                std::vector<int>* labels = nullptr) {
    auto rng = rngu::derive(seed, 0);
    std::vector<std::vector<double>> pts;
    for (size_t b = 0; b < centers.size(); ++b) {
        for (size_t i = 0; i < per_blob; ++i) {
            std::vector<double> p = centers[b];
            for (double& v : p) v += stddev * rngu::normal(rng);
            pts.push_back(std::move(p));
            if (labels) labels->push_back(static_cast<int>(b));
        }
    }
    return pts;
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

} // namespace

TEST_CASE("four square corners with four centroids: zero residual") {
    std::vector<std::vector<double>> pts = {{1, 1}, {1, -1}, {-1, 1}, {-1, -1}};
    Codebooks cb = sid::rq_kmeans_fit(pts, {4}, 7);
    std::set<SemanticId> codes;
    for (const auto& p : pts) {
        SemanticId s = sid::encode(p, cb);
        codes.insert(s);
        // Reconstruction is exact.
        const double* c = cb.center(0, static_cast<size_t>(s.codes[0]));
        for (size_t j = 0; j < 2; ++j) CHECK(c[j] == doctest::Approx(p[j]).epsilon(1e-12));
    }
    CHECK(codes.size() == 4); // each point its own centroid
    auto errs = sid::residual_errors(pts, cb);
    CHECK(errs[0] == doctest::Approx(0.0).epsilon(1e-18));
}

TEST_CASE("two separated blobs: level-1 codes recover blob membership") {
    std::vector<int> labels;
    auto pts = gaussian_blobs({{5, 5, 5, 5}, {-5, -5, -5, -5}}, 60, 0.3, 11, &labels);
    Codebooks cb = sid::rq_kmeans_fit(pts, {2, 2}, 3);
    // All points of one blob share a level-1 code, and the two blobs differ.
    int code_blob0 = sid::encode(pts[0], cb).codes[0];
    int code_blob1 = sid::encode(pts[60], cb).codes[0];
    CHECK(code_blob0 != code_blob1);
    for (size_t i = 0; i < pts.size(); ++i) {
        const int expect = labels[i] == 0 ? code_blob0 : code_blob1;
        CHECK(sid::encode(pts[i], cb).codes[0] == expect);
    }
}

TEST_CASE("mean squared residual is non-increasing across levels") {
    for (uint64_t seed : {1ull, 2ull, 3ull}) {
        auto rng = rngu::derive(seed, 99);
        std::vector<std::vector<double>> pts;
        for (size_t i = 0; i < 200; ++i) {
            std::vector<double> p(6);
            for (double& v : p) v = 3.0 * rngu::normal(rng);
            pts.push_back(std::move(p));
        }
        Codebooks cb = sid::rq_kmeans_fit(pts, {4, 4, 4}, seed);
        auto errs = sid::residual_errors(pts, cb);
        REQUIRE(errs.size() == 3);
        CHECK(errs[1] <= errs[0] + 1e-12);
        CHECK(errs[2] <= errs[1] + 1e-12);
    }
}

TEST_CASE("encode basics") {
    auto pts = gaussian_blobs({{2, 0}, {-2, 0}, {0, 3}}, 30, 0.2, 5);
    Codebooks cb = sid::rq_kmeans_fit(pts, {3, 2}, 5);

    SUBCASE("a centroid's own vector encodes to that centroid at level 1") {
        for (size_t c = 0; c < 3; ++c) {
            std::vector<double> v(cb.center(0, c), cb.center(0, c) + cb.dim);
            CHECK(sid::encode(v, cb).codes[0] == static_cast<int>(c));
        }
    }
    SUBCASE("deterministic: same input twice gives the same codes") {
        for (size_t i = 0; i < pts.size(); i += 13) {
            CHECK(sid::encode(pts[i], cb) == sid::encode(pts[i], cb));
        }
    }
    SUBCASE("dimension mismatch throws") {
        CHECK_THROWS_AS(sid::encode({1.0, 2.0, 3.0}, cb), ConfigError);
    }
    SUBCASE("two levels beat the level-1 quantizer alone on aggregate error") {
        double err_multi = 0.0, err_single = 0.0;
        for (const auto& p : pts) {
            SemanticId s = sid::encode(p, cb);
            std::vector<double> rec(cb.dim, 0.0);
            for (size_t l = 0; l < 2; ++l) {
                const double* c = cb.center(l, static_cast<size_t>(s.codes[l]));
                for (size_t j = 0; j < cb.dim; ++j) rec[j] += c[j];
            }
            const double* c1 = cb.center(0, static_cast<size_t>(s.codes[0]));
            for (size_t j = 0; j < cb.dim; ++j) {
                err_multi += (p[j] - rec[j]) * (p[j] - rec[j]);
                err_single += (p[j] - c1[j]) * (p[j] - c1[j]);
            }
        }
        CHECK(err_multi <= err_single + 1e-12);
    }
}

TEST_CASE("rq_kmeans_fit is deterministic in the seed and validates input") {
    auto pts = gaussian_blobs({{1, 1}, {-1, -1}}, 20, 0.5, 21);
    Codebooks a = sid::rq_kmeans_fit(pts, {2, 2}, 42);
    Codebooks b = sid::rq_kmeans_fit(pts, {2, 2}, 42);
    REQUIRE(a.levels.size() == b.levels.size());
    for (size_t l = 0; l < a.levels.size(); ++l) {
        REQUIRE(a.levels[l].size() == b.levels[l].size());
        for (size_t i = 0; i < a.levels[l].size(); ++i) CHECK(a.levels[l][i] == b.levels[l][i]);
    }

    CHECK_THROWS_AS(sid::rq_kmeans_fit({}, {2}, 1), ConfigError);
    CHECK_THROWS_AS(sid::rq_kmeans_fit(pts, {41}, 1), ConfigError); // size > point count
    auto bad = pts;
    bad[0][0] = std::numeric_limits<double>::quiet_NaN();
    CHECK_THROWS_AS(sid::rq_kmeans_fit(bad, {2}, 1), ConfigError);
}

TEST_CASE("trie agrees with a linear catalog scan") {
    auto rng = rngu::derive(77, 0);
    std::vector<SemanticId> sids;
    std::set<SemanticId> present;
    for (size_t i = 0; i < 120; ++i) {
        SemanticId s{{static_cast<int>(rngu::uniform_index(rng, 8)),
                      static_cast<int>(rngu::uniform_index(rng, 8)),
                      static_cast<int>(rngu::uniform_index(rng, 8))}};
        present.insert(s);
        sids.push_back(std::move(s));
    }
    sid::Catalog cat = sid::Catalog::from_items(sids, {8, 8, 8});

    SUBCASE("empty prefix lists exactly the present level-1 codes") {
        std::set<int> want;
        for (const auto& s : sids) want.insert(s.codes[0]);
        auto got = cat.trie().continuations({});
        CHECK(std::set<int>(got.begin(), got.end()) == want);
        CHECK(std::is_sorted(got.begin(), got.end()));
    }
    SUBCASE("1000 random membership queries match the scan exactly") {
        for (size_t q = 0; q < 1000; ++q) {
            SemanticId s{{static_cast<int>(rngu::uniform_index(rng, 8)),
                          static_cast<int>(rngu::uniform_index(rng, 8)),
                          static_cast<int>(rngu::uniform_index(rng, 8))}};
            const bool scan = present.count(s) > 0;
            CHECK(cat.trie().contains(s.codes) == scan);
            CHECK(cat.contains(s) == scan);
        }
    }
    SUBCASE("full catalog SID is terminal-true") {
        CHECK(cat.trie().contains(sids[0].codes));
    }
    SUBCASE("continuations only list codes that extend to catalog SIDs") {
        for (const auto& s : sids) {
            auto cont = cat.trie().continuations({s.codes[0], s.codes[1]});
            CHECK(std::find(cont.begin(), cont.end(), s.codes[2]) != cont.end());
            for (int c : cont) {
                CHECK(present.count(SemanticId{{s.codes[0], s.codes[1], c}}) > 0);
            }
        }
    }
    SUBCASE("code out of level range throws") {
        CHECK_THROWS_AS(cat.trie().continuations({8}), ConfigError);
        CHECK_THROWS_AS(cat.trie().contains({0, 0, -1}), ConfigError);
        CHECK_THROWS_AS(cat.trie().continuations({0, 0, 0, 0}), ConfigError);
    }
}

TEST_CASE("catalog preserves item collisions") {
    std::vector<SemanticId> sids = {{{0, 1, 2}}, {{0, 1, 2}}, {{3, 3, 3}}};
    sid::Catalog cat = sid::Catalog::from_items(sids, {4, 4, 4});
    CHECK(cat.num_items() == 3);
    CHECK(cat.num_unique_sids() == 2);
    CHECK(cat.items_with_sid({{0, 1, 2}}) == std::vector<int>{0, 1});
    CHECK(cat.items_with_sid({{1, 1, 1}}).empty());
}

TEST_CASE("prefix_share_stats") {
    using P = std::pair<SemanticId, SemanticId>;
    SUBCASE("identical pairs give all rates 1.0") {
        std::vector<P> pairs = {{{{1, 2, 3}}, {{1, 2, 3}}}, {{{0, 0, 0}}, {{0, 0, 0}}}};
        auto r = sid::prefix_share_stats(pairs, 3);
        CHECK(r == std::vector<double>{1.0, 1.0, 1.0});
    }
    SUBCASE("disjoint level-1 codes give all rates 0.0") {
        std::vector<P> pairs = {{{{1, 2, 3}}, {{2, 2, 3}}}, {{{0, 1, 1}}, {{3, 1, 1}}}};
        auto r = sid::prefix_share_stats(pairs, 3);
        CHECK(r == std::vector<double>{0.0, 0.0, 0.0});
    }
    SUBCASE("hand-computed mixture") {
        // depths: 3, 1, 0, 2  =>  >=1: 3/4, >=2: 2/4, >=3: 1/4
        std::vector<P> pairs = {{{{5, 1, 7}}, {{5, 1, 7}}},
                                {{{5, 1, 7}}, {{5, 2, 7}}},
                                {{{5, 1, 7}}, {{4, 1, 7}}},
                                {{{5, 1, 7}}, {{5, 1, 0}}}};
        auto r = sid::prefix_share_stats(pairs, 3);
        CHECK(r[0] == doctest::Approx(0.75));
        CHECK(r[1] == doctest::Approx(0.5));
        CHECK(r[2] == doctest::Approx(0.25));
    }
    SUBCASE("empty input throws") {
        CHECK_THROWS_AS(sid::prefix_share_stats({}, 3), ConfigError);
    }
}

TEST_CASE("codebook and catalog files round-trip") {
    auto pts = gaussian_blobs({{1, 0, 0}, {-1, 0, 0}}, 25, 0.4, 13);
    Codebooks cb = sid::rq_kmeans_fit(pts, {2, 3}, 9);
    const std::string cb_path = temp_path("raddpo_test_codebooks.json");
    sid::save_codebooks(cb, cb_path);
    Codebooks back = sid::load_codebooks(cb_path);
    CHECK(back.dim == cb.dim);
    CHECK(back.sizes == cb.sizes);
    for (size_t l = 0; l < cb.levels.size(); ++l) {
        REQUIRE(back.levels[l].size() == cb.levels[l].size());
        for (size_t i = 0; i < cb.levels[l].size(); ++i) {
            CHECK(back.levels[l][i] == cb.levels[l][i]); // exact round-trip
        }
    }

    std::vector<SemanticId> sids;
    for (const auto& p : pts) sids.push_back(sid::encode(p, cb));
    sid::Catalog cat = sid::Catalog::from_items(sids, {2, 3});
    const std::string cat_path = temp_path("raddpo_test_catalog.csv");
    sid::save_catalog(cat, cat_path);
    sid::Catalog cat2 = sid::load_catalog(cat_path);
    REQUIRE(cat2.num_items() == cat.num_items());
    for (size_t i = 0; i < cat.num_items(); ++i) CHECK(cat2.sid_of(i) == cat.sid_of(i));
    CHECK(cat2.num_unique_sids() == cat.num_unique_sids());

    SUBCASE("missing file raises the missing-input error") {
        CHECK_THROWS_AS(sid::load_codebooks(temp_path("raddpo_no_such_file.json")),
                        MissingInputError);
        CHECK_THROWS_AS(sid::load_catalog(temp_path("raddpo_no_such_file.csv")),
                        MissingInputError);
    }
    SUBCASE("corrupt header raises the config error") {
        const std::string bad = temp_path("raddpo_bad_catalog.csv");
        std::FILE* f = std::fopen(bad.c_str(), "w");
        std::fputs("catalogue,v9,levels=2,2,3\n", f);
        std::fclose(f);
        CHECK_THROWS_AS(sid::load_catalog(bad), ConfigError);
    }
}

TEST_CASE("SID token serialization: encode, serialize, parse is the identity") {
    Vocab vocab;
    vocab.level_sizes = {8, 8, 8};
    vocab.n_query_tokens = 4;
    CHECK(vocab.size() == 2 + 24 + 4);
    CHECK(vocab.level_offset(0) == 2);
    CHECK(vocab.level_offset(2) == 18);
    CHECK(vocab.query_token(0) == 26);

    auto rng = rngu::derive(31, 0);
    for (size_t i = 0; i < 200; ++i) {
        SemanticId s{{static_cast<int>(rngu::uniform_index(rng, 8)),
                      static_cast<int>(rngu::uniform_index(rng, 8)),
                      static_cast<int>(rngu::uniform_index(rng, 8))}};
        auto toks = vocab.sid_tokens(s);
        // Disjoint per-level ranges.
        CHECK(vocab.is_level_token(toks[0], 0));
        CHECK_FALSE(vocab.is_level_token(toks[0], 1));
        CHECK(vocab.parse_sid_tokens(toks) == s);
    }
    SUBCASE("malformed sequences are rejected") {
        sid::SemanticId out;
        CHECK_FALSE(vocab.try_parse_sid_tokens({2, 2, 2}, &out)); // level-1 token thrice
        CHECK_FALSE(vocab.try_parse_sid_tokens({2, 10}, &out));   // wrong length
        CHECK_THROWS_AS(vocab.parse_sid_tokens({Vocab::kEos, 10, 18}), ConfigError);
        CHECK_THROWS_AS(vocab.level_token(0, 8), ConfigError);
        CHECK_THROWS_AS(vocab.query_token(4), ConfigError);
    }
}
