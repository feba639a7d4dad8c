#include "raddpo/sid.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <sstream>

#include <json.hpp>

#include "raddpo/common.hpp"
#include "raddpo/rng.hpp"

namespace raddpo::sid {

namespace {

double sq_dist(const double* a, const double* b, size_t d) {
    double s = 0.0;
    for (size_t j = 0; j < d; ++j) {
        const double diff = a[j] - b[j];
        s += diff * diff;
    }
    return s;
}

// One K-means run on `points` (n x dim, row-major): k-means++ init, Lloyd
// until stable assignments, empty clusters re-seeded from the farthest point.
// Returns centers (k x dim) and fills `assign`.
std::vector<double> kmeans_single(const std::vector<double>& points, size_t n, size_t dim,
                                  size_t k, std::mt19937_64& rng, size_t max_iters,
                                  std::vector<int>& assign) {
    std::vector<double> centers(k * dim, 0.0);

    // k-means++: first center uniform, the rest sampled proportional to the
    // squared distance to the nearest chosen center.
    std::vector<double> d2(n, std::numeric_limits<double>::infinity());
    size_t first = rngu::uniform_index(rng, n);
    std::copy(points.begin() + first * dim, points.begin() + (first + 1) * dim, centers.begin());
    for (size_t c = 1; c < k; ++c) {
        double total = 0.0;
        for (size_t i = 0; i < n; ++i) {
            const double d = sq_dist(points.data() + i * dim, centers.data() + (c - 1) * dim, dim);
            d2[i] = std::min(d2[i], d);
            total += d2[i];
        }
        size_t pick = 0;
        if (total <= 0.0) {
            pick = rngu::uniform_index(rng, n); // all points identical to chosen centers
        } else {
            const double r = rngu::uniform01(rng) * total;
            double acc = 0.0;
            pick = n - 1;
            for (size_t i = 0; i < n; ++i) {
                acc += d2[i];
                if (acc >= r) {
                    pick = i;
                    break;
                }
            }
        }
        std::copy(points.begin() + pick * dim, points.begin() + (pick + 1) * dim,
                  centers.begin() + c * dim);
    }

    assign.assign(n, -1);
    std::vector<int> next(n, -1);
    std::vector<size_t> counts(k, 0);
    for (size_t it = 0; it < max_iters; ++it) {
        bool changed = false;
        for (size_t i = 0; i < n; ++i) {
            double best = std::numeric_limits<double>::infinity();
            int bi = 0;
            for (size_t c = 0; c < k; ++c) {
                const double d = sq_dist(points.data() + i * dim, centers.data() + c * dim, dim);
                if (d < best) { // strict < breaks ties toward the lowest index
                    best = d;
                    bi = static_cast<int>(c);
                }
            }
            next[i] = bi;
            changed = changed || next[i] != assign[i];
        }
        assign = next;
        if (!changed && it > 0) break;

        std::fill(centers.begin(), centers.end(), 0.0);
        std::fill(counts.begin(), counts.end(), 0);
        for (size_t i = 0; i < n; ++i) {
            double* c = centers.data() + static_cast<size_t>(assign[i]) * dim;
            const double* p = points.data() + i * dim;
            for (size_t j = 0; j < dim; ++j) c[j] += p[j];
            ++counts[static_cast<size_t>(assign[i])];
        }
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] == 0) continue;
            double* cc = centers.data() + c * dim;
            for (size_t j = 0; j < dim; ++j) cc[j] /= static_cast<double>(counts[c]);
        }
        // Re-seed empty clusters from the point farthest from its centroid.
        for (size_t c = 0; c < k; ++c) {
            if (counts[c] != 0) continue;
            double worst = -1.0;
            size_t wi = 0;
            for (size_t i = 0; i < n; ++i) {
                const double d = sq_dist(points.data() + i * dim,
                                         centers.data() + static_cast<size_t>(assign[i]) * dim, dim);
                if (d > worst) {
                    worst = d;
                    wi = i;
                }
            }
            std::copy(points.begin() + wi * dim, points.begin() + (wi + 1) * dim,
                      centers.begin() + c * dim);
            assign[wi] = static_cast<int>(c);
            counts[c] = 1;
        }
    }

    // Final assignment against the last centers so assign matches centers.
    for (size_t i = 0; i < n; ++i) {
        double best = std::numeric_limits<double>::infinity();
        int bi = 0;
        for (size_t c = 0; c < k; ++c) {
            const double d = sq_dist(points.data() + i * dim, centers.data() + c * dim, dim);
            if (d < best) {
                best = d;
                bi = static_cast<int>(c);
            }
        }
        assign[i] = bi;
    }
    return centers;
}

// K-means with restarts: several independent seeded runs, keeping the one
// with the lowest within-cluster squared error (first wins ties). Guards
// against the local optima a single k-means++ run regularly lands in.
constexpr size_t kKmeansRestarts = 8;

std::vector<double> kmeans(const std::vector<double>& points, size_t n, size_t dim, size_t k,
                           std::mt19937_64& rng, size_t max_iters, std::vector<int>& assign) {
    std::vector<double> best_centers;
    std::vector<int> best_assign;
    double best_sse = std::numeric_limits<double>::infinity();
    for (size_t r = 0; r < kKmeansRestarts; ++r) {
        std::vector<int> a;
        std::vector<double> centers = kmeans_single(points, n, dim, k, rng, max_iters, a);
        double sse = 0.0;
        for (size_t i = 0; i < n; ++i) {
            sse += sq_dist(points.data() + i * dim,
                           centers.data() + static_cast<size_t>(a[i]) * dim, dim);
        }
        if (sse < best_sse) {
            best_sse = sse;
            best_centers = std::move(centers);
            best_assign = std::move(a);
        }
    }
    assign = std::move(best_assign);
    return best_centers;
}

} // namespace

Codebooks rq_kmeans_fit(const std::vector<std::vector<double>>& embeddings,
                        const std::vector<size_t>& sizes, uint64_t seed, size_t max_iters) {
    if (embeddings.empty()) throw ConfigError("rq_kmeans_fit: empty embedding set");
    if (sizes.empty()) throw ConfigError("rq_kmeans_fit: no levels requested");
    const size_t n = embeddings.size();
    const size_t dim = embeddings[0].size();
    for (const auto& e : embeddings) {
        if (e.size() != dim) throw ConfigError("rq_kmeans_fit: inconsistent embedding dims");
        for (double v : e) {
            if (!std::isfinite(v)) throw ConfigError("rq_kmeans_fit: non-finite embedding");
        }
    }
    for (size_t k : sizes) {
        if (k == 0 || k > n) throw ConfigError("rq_kmeans_fit: level size must be in [1, count]");
    }

    Codebooks cb;
    cb.dim = dim;
    cb.sizes = sizes;

    std::vector<double> residuals(n * dim);
    for (size_t i = 0; i < n; ++i) {
        std::copy(embeddings[i].begin(), embeddings[i].end(), residuals.begin() + i * dim);
    }

    for (size_t l = 0; l < sizes.size(); ++l) {
        auto rng = rngu::derive(seed, l);
        std::vector<int> assign;
        cb.levels.push_back(kmeans(residuals, n, dim, sizes[l], rng, max_iters, assign));
        const std::vector<double>& centers = cb.levels.back();
        for (size_t i = 0; i < n; ++i) {
            const double* c = centers.data() + static_cast<size_t>(assign[i]) * dim;
            double* r = residuals.data() + i * dim;
            for (size_t j = 0; j < dim; ++j) r[j] -= c[j];
        }
    }
    return cb;
}

SemanticId encode(const std::vector<double>& embedding, const Codebooks& cb) {
    if (embedding.size() != cb.dim) throw ConfigError("encode: embedding dimension mismatch");
    SemanticId sid;
    sid.codes.reserve(cb.num_levels());
    std::vector<double> residual = embedding;
    for (size_t l = 0; l < cb.num_levels(); ++l) {
        double best = std::numeric_limits<double>::infinity();
        int bi = 0;
        for (size_t c = 0; c < cb.sizes[l]; ++c) {
            const double d = sq_dist(residual.data(), cb.center(l, c), cb.dim);
            if (d < best) {
                best = d;
                bi = static_cast<int>(c);
            }
        }
        sid.codes.push_back(bi);
        const double* cc = cb.center(l, static_cast<size_t>(bi));
        for (size_t j = 0; j < cb.dim; ++j) residual[j] -= cc[j];
    }
    return sid;
}

std::vector<double> residual_errors(const std::vector<std::vector<double>>& embeddings,
                                    const Codebooks& cb) {
    const size_t L = cb.num_levels();
    std::vector<double> errs(L, 0.0);
    for (const auto& e : embeddings) {
        std::vector<double> residual = e;
        for (size_t l = 0; l < L; ++l) {
            double best = std::numeric_limits<double>::infinity();
            int bi = 0;
            for (size_t c = 0; c < cb.sizes[l]; ++c) {
                const double d = sq_dist(residual.data(), cb.center(l, c), cb.dim);
                if (d < best) {
                    best = d;
                    bi = static_cast<int>(c);
                }
            }
            const double* cc = cb.center(l, static_cast<size_t>(bi));
            double err = 0.0;
            for (size_t j = 0; j < cb.dim; ++j) {
                residual[j] -= cc[j];
                err += residual[j] * residual[j];
            }
            errs[l] += err;
        }
    }
    const double inv = embeddings.empty() ? 0.0 : 1.0 / static_cast<double>(embeddings.size());
    for (double& e : errs) e *= inv;
    return errs;
}

void Trie::check_prefix(const std::vector<int>& prefix) const {
    if (prefix.size() > sizes_.size()) throw ConfigError("trie: prefix longer than level count");
    for (size_t l = 0; l < prefix.size(); ++l) {
        if (prefix[l] < 0 || static_cast<size_t>(prefix[l]) >= sizes_[l]) {
            throw ConfigError("trie: code out of level range");
        }
    }
}

void Trie::insert(const SemanticId& sid) {
    check_prefix(sid.codes);
    if (sid.codes.size() != sizes_.size()) throw ConfigError("trie: insert requires full-length SID");
    Node* cur = &root_;
    for (int code : sid.codes) {
        auto& child = cur->children[code];
        if (!child) child = std::make_unique<Node>();
        cur = child.get();
    }
    cur->terminal = true;
}

const Trie::Node* Trie::walk(const std::vector<int>& prefix) const {
    const Node* cur = &root_;
    for (int code : prefix) {
        auto it = cur->children.find(code);
        if (it == cur->children.end()) return nullptr;
        cur = it->second.get();
    }
    return cur;
}

std::vector<int> Trie::continuations(const std::vector<int>& prefix) const {
    check_prefix(prefix);
    std::vector<int> out;
    const Node* node = walk(prefix);
    if (!node) return out;
    out.reserve(node->children.size());
    for (const auto& [code, child] : node->children) out.push_back(code); // map: ascending
    return out;
}

bool Trie::contains(const std::vector<int>& codes) const {
    check_prefix(codes);
    if (codes.size() != sizes_.size()) return false;
    const Node* node = walk(codes);
    return node != nullptr && node->terminal;
}

bool Trie::has_prefix(const std::vector<int>& prefix) const {
    check_prefix(prefix);
    return walk(prefix) != nullptr;
}

Catalog Catalog::from_items(std::vector<SemanticId> item_sids, std::vector<size_t> sizes) {
    Catalog cat;
    cat.sizes_ = sizes;
    cat.trie_ = Trie(std::move(sizes));
    cat.item_sids_ = std::move(item_sids);
    for (size_t i = 0; i < cat.item_sids_.size(); ++i) {
        const SemanticId& sid = cat.item_sids_[i];
        if (sid.codes.size() != cat.sizes_.size()) {
            throw ConfigError("catalog: SID level count mismatch");
        }
        cat.sid_to_items_[sid].push_back(static_cast<int>(i));
        cat.trie_.insert(sid);
    }
    return cat;
}

const std::vector<int>& Catalog::items_with_sid(const SemanticId& sid) const {
    static const std::vector<int> kEmpty;
    auto it = sid_to_items_.find(sid);
    return it == sid_to_items_.end() ? kEmpty : it->second;
}

bool Catalog::contains(const SemanticId& sid) const {
    return sid_to_items_.find(sid) != sid_to_items_.end();
}

std::vector<double> prefix_share_stats(const std::vector<std::pair<SemanticId, SemanticId>>& pairs,
                                       size_t levels) {
    if (pairs.empty()) throw ConfigError("prefix_share_stats: empty pair list");
    std::vector<size_t> counts(levels, 0);
    for (const auto& [a, b] : pairs) {
        size_t depth = 0;
        const size_t lim = std::min({a.codes.size(), b.codes.size(), levels});
        while (depth < lim && a.codes[depth] == b.codes[depth]) ++depth;
        for (size_t d = 0; d < depth; ++d) ++counts[d];
    }
    std::vector<double> out(levels);
    for (size_t d = 0; d < levels; ++d) {
        out[d] = static_cast<double>(counts[d]) / static_cast<double>(pairs.size());
    }
    return out;
}

void save_codebooks(const Codebooks& cb, const std::string& path) {
    nlohmann::json j;
    j["format"] = "codebooks";
    j["version"] = 1;
    j["dim"] = cb.dim;
    j["sizes"] = cb.sizes;
    j["levels"] = cb.levels;
    std::ofstream out(path);
    if (!out) throw MissingInputError("cannot open for write: " + path);
    out << j.dump() << "\n";
}

Codebooks load_codebooks(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("cannot open: " + path);
    nlohmann::json j;
    try {
        in >> j;
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError("bad codebook file " + path + ": " + e.what());
    }
    if (j.value("format", "") != "codebooks" || j.value("version", 0) != 1) {
        throw ConfigError("unrecognized codebook file version: " + path);
    }
    Codebooks cb;
    cb.dim = j.at("dim").get<size_t>();
    cb.sizes = j.at("sizes").get<std::vector<size_t>>();
    cb.levels = j.at("levels").get<std::vector<std::vector<double>>>();
    if (cb.levels.size() != cb.sizes.size()) throw ConfigError("codebook level count mismatch");
    for (size_t l = 0; l < cb.levels.size(); ++l) {
        if (cb.levels[l].size() != cb.sizes[l] * cb.dim) {
            throw ConfigError("codebook matrix shape mismatch");
        }
    }
    return cb;
}

void save_catalog(const Catalog& cat, const std::string& path) {
    std::ofstream out(path);
    if (!out) throw MissingInputError("cannot open for write: " + path);
    out << "catalog,v1,levels=" << cat.sizes().size();
    for (size_t s : cat.sizes()) out << "," << s;
    out << "\n";
    for (size_t i = 0; i < cat.num_items(); ++i) {
        out << i;
        for (int c : cat.sid_of(i).codes) out << "," << c;
        out << "\n";
    }
}

Catalog load_catalog(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw MissingInputError("cannot open: " + path);
    std::string line;
    if (!std::getline(in, line)) throw ConfigError("empty catalog file: " + path);
    std::stringstream hs(line);
    std::string tag, ver, lv;
    std::getline(hs, tag, ',');
    std::getline(hs, ver, ',');
    std::getline(hs, lv, ',');
    if (tag != "catalog" || ver != "v1" || lv.rfind("levels=", 0) != 0) {
        throw ConfigError("unrecognized catalog header: " + path);
    }
    const size_t levels = static_cast<size_t>(std::stoul(lv.substr(7)));
    std::vector<size_t> sizes;
    std::string f;
    while (std::getline(hs, f, ',')) sizes.push_back(static_cast<size_t>(std::stoul(f)));
    if (sizes.size() != levels) throw ConfigError("catalog header level sizes mismatch: " + path);

    std::vector<SemanticId> sids;
    size_t expect = 0;
    while (std::getline(in, line)) {
        if (line.empty()) continue;
        std::stringstream ls(line);
        std::string field;
        std::getline(ls, field, ',');
        if (static_cast<size_t>(std::stoul(field)) != expect) {
            throw ConfigError("catalog item ids must be dense and ordered: " + path);
        }
        SemanticId sid;
        while (std::getline(ls, field, ',')) sid.codes.push_back(std::stoi(field));
        if (sid.codes.size() != levels) throw ConfigError("catalog record level mismatch: " + path);
        sids.push_back(std::move(sid));
        ++expect;
    }
    return Catalog::from_items(std::move(sids), std::move(sizes));
}

} // namespace raddpo::sid
