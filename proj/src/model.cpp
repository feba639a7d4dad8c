#include "raddpo/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>

#include "raddpo/rng.hpp"

namespace raddpo {

PackedBatch make_packed(const std::vector<int>& prompt_tokens,
                        const std::vector<std::vector<int>>& candidates, int eos_token) {
    if (prompt_tokens.empty()) throw ConfigError("make_packed: empty prompt");
    PackedBatch b;
    b.num_segments = candidates.size();
    const size_t P = prompt_tokens.size();
    for (size_t i = 0; i < P; ++i) {
        b.tokens.push_back(prompt_tokens[i]);
        b.segment_ids.push_back(0);
        b.position_ids.push_back(static_cast<int>(i));
        b.target_mask.push_back(0);
    }
    for (size_t c = 0; c < candidates.size(); ++c) {
        if (candidates[c].empty()) throw ConfigError("make_packed: empty candidate");
        std::vector<int> seg = candidates[c];
        seg.push_back(eos_token);
        for (size_t t = 0; t < seg.size(); ++t) {
            b.tokens.push_back(seg[t]);
            b.segment_ids.push_back(static_cast<int>(c + 1));
            b.position_ids.push_back(static_cast<int>(P + t));
            b.target_mask.push_back(1);
        }
    }
    return b;
}

void PackedBatch::validate(size_t max_seq_len) const {
    const size_t T = tokens.size();
    if (T == 0) throw ConfigError("packed batch: empty");
    if (segment_ids.size() != T || position_ids.size() != T || target_mask.size() != T) {
        throw ConfigError("packed batch: field length mismatch");
    }
    if (T > max_seq_len) throw ConfigError("packed batch: sequence overflow");
    if (segment_ids[0] != 0) throw ConfigError("packed batch: must start with the prompt");

    // Segment ids: a block of 0s, then contiguous nonempty blocks 1..m.
    int cur = 0;
    for (size_t i = 0; i < T; ++i) {
        const int s = segment_ids[i];
        if (s == cur) continue;
        if (s != cur + 1) throw ConfigError("packed batch: segment ids must be contiguous blocks");
        cur = s;
    }
    if (static_cast<size_t>(cur) != num_segments) {
        throw ConfigError("packed batch: num_segments mismatch");
    }

    // Position ids: prompt counts 0..P-1; every candidate restarts at P.
    const size_t P = prompt_len();
    size_t expect_pos = 0;
    int prev_seg = 0;
    for (size_t i = 0; i < T; ++i) {
        if (segment_ids[i] != prev_seg) {
            expect_pos = P;
            prev_seg = segment_ids[i];
        }
        if (position_ids[i] != static_cast<int>(expect_pos)) {
            throw ConfigError("packed batch: position ids must restart at prompt length");
        }
        ++expect_pos;
        if (static_cast<size_t>(position_ids[i]) >= max_seq_len) {
            throw ConfigError("packed batch: position id exceeds max_seq_len");
        }
    }

    // Target mask: false on the prompt, true on candidate tokens.
    for (size_t i = 0; i < T; ++i) {
        const bool is_prompt = segment_ids[i] == 0;
        if (is_prompt && target_mask[i]) {
            throw ConfigError("packed batch: target_mask set on a prompt token");
        }
        if (!is_prompt && !target_mask[i]) {
            throw ConfigError("packed batch: target_mask missing on a candidate token");
        }
    }
}

} // namespace raddpo

namespace raddpo::model {

using ad::Tape;
using ad::Tensor;
namespace ops = ad;

Model Model::init(const ModelConfig& cfg) {
    cfg.validate();
    Model m;
    m.cfg = cfg;
    auto rng = rngu::derive(cfg.seed, 0x6d6f64656cull); // parameter stream
    const double std0 = 0.02;
    m.tok_embed = Tensor::randn({cfg.vocab_size, cfg.d_model}, rng, std0);
    m.pos_embed = Tensor::randn({cfg.max_seq_len, cfg.d_model}, rng, std0);
    for (size_t l = 0; l < cfg.depth; ++l) {
        LayerParams lp;
        lp.wq = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std0);
        lp.wk = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std0);
        lp.wv = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std0);
        lp.wo = Tensor::randn({cfg.d_model, cfg.d_model}, rng, std0);
        lp.w1 = Tensor::randn({cfg.d_model, 4 * cfg.d_model}, rng, std0);
        lp.w2 = Tensor::randn({4 * cfg.d_model, cfg.d_model}, rng, std0);
        m.layers.push_back(std::move(lp));
    }
    m.lm_head = Tensor::randn({cfg.d_model, cfg.vocab_size}, rng, std0);
    return m;
}

std::vector<std::pair<std::string, Tensor*>> Model::named_params() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.emplace_back("tok_embed", &tok_embed);
    out.emplace_back("pos_embed", &pos_embed);
    for (size_t l = 0; l < layers.size(); ++l) {
        const std::string p = "layers." + std::to_string(l) + ".";
        out.emplace_back(p + "wq", &layers[l].wq);
        out.emplace_back(p + "wk", &layers[l].wk);
        out.emplace_back(p + "wv", &layers[l].wv);
        out.emplace_back(p + "wo", &layers[l].wo);
        out.emplace_back(p + "w1", &layers[l].w1);
        out.emplace_back(p + "w2", &layers[l].w2);
    }
    out.emplace_back("lm_head", &lm_head);
    return out;
}

std::vector<std::pair<std::string, const Tensor*>> Model::named_params() const {
    std::vector<std::pair<std::string, const Tensor*>> out;
    auto mut = const_cast<Model*>(this)->named_params();
    out.reserve(mut.size());
    for (auto& [name, t] : mut) out.emplace_back(name, t);
    return out;
}

size_t Model::num_scalar_params() const {
    size_t n = 0;
    for (const auto& [name, t] : named_params()) n += t->size();
    return n;
}

Model Model::clone() const {
    Model copy;
    copy.cfg = cfg;
    copy.tok_embed = tok_embed.clone();
    copy.pos_embed = pos_embed.clone();
    for (const LayerParams& l : layers) {
        copy.layers.push_back({l.wq.clone(), l.wk.clone(), l.wv.clone(), l.wo.clone(),
                               l.w1.clone(), l.w2.clone()});
    }
    copy.lm_head = lm_head.clone();
    return copy;
}

Bound bind(const Model& m, Tape* tape) {
    auto handle = [tape](const Tensor& t) { return tape ? tape->watch(t) : t; };
    Bound b;
    b.tok_embed = handle(m.tok_embed);
    b.pos_embed = handle(m.pos_embed);
    for (const LayerParams& l : m.layers) {
        b.layers.push_back({handle(l.wq), handle(l.wk), handle(l.wv), handle(l.wo), handle(l.w1),
                            handle(l.w2)});
    }
    b.lm_head = handle(m.lm_head);
    return b;
}

ForwardResult forward_packed(Tape* tape, const Bound& params, const ModelConfig& cfg,
                             const PackedBatch& batch) {
    batch.validate(cfg.max_seq_len);
    for (int t : batch.tokens) {
        if (t < 0 || static_cast<size_t>(t) >= cfg.vocab_size) {
            throw ConfigError("forward: unknown token id");
        }
    }
    const size_t H = cfg.n_heads;
    const double att_scale = 1.0 / std::sqrt(static_cast<double>(cfg.d_model / H));
    const std::vector<double> mask = batch.attention_mask();

    Tensor x = ops::add(tape, ops::rows(tape, params.tok_embed, batch.tokens),
                        ops::rows(tape, params.pos_embed, batch.position_ids));
    for (const LayerParams& L : params.layers) {
        Tensor h = ops::rmsnorm_rows(tape, x);
        Tensor q = ops::split_heads(tape, ops::matmul(tape, h, L.wq), H);
        Tensor k = ops::split_heads(tape, ops::matmul(tape, h, L.wk), H);
        Tensor v = ops::split_heads(tape, ops::matmul(tape, h, L.wv), H);
        Tensor scores = ops::scale(tape, ops::bmm_nt(tape, q, k), att_scale);
        Tensor probs = ops::masked_softmax_rows(tape, scores, mask);
        Tensor ctx = ops::merge_heads(tape, ops::bmm_nn(tape, probs, v));
        x = ops::add(tape, x, ops::matmul(tape, ctx, L.wo));
        Tensor h2 = ops::rmsnorm_rows(tape, x);
        Tensor mlp = ops::matmul(tape, ops::relu(tape, ops::matmul(tape, h2, L.w1)), L.w2);
        x = ops::add(tape, x, mlp);
    }
    Tensor hf = ops::rmsnorm_rows(tape, x);
    Tensor logits = ops::matmul(tape, hf, params.lm_head);
    return {ops::log_softmax_rows(tape, logits), hf};
}

Tensor candidate_token_logprobs(Tape* tape, const ForwardResult& fwd, const PackedBatch& batch,
                                size_t seg) {
    if (seg == 0 || seg > batch.num_segments) throw ConfigError("candidate segment out of range");
    const std::vector<size_t> positions = batch.segment_positions(seg);
    if (positions.empty()) throw ConfigError("empty candidate segment");
    const size_t V = fwd.logprobs.dim(1);
    std::vector<size_t> idx;
    idx.reserve(positions.size());
    size_t src = batch.last_prompt_position();
    for (size_t t = 0; t < positions.size(); ++t) {
        if (t > 0) src = positions[t - 1];
        idx.push_back(src * V + static_cast<size_t>(batch.tokens[positions[t]]));
    }
    return ops::select(tape, fwd.logprobs, idx);
}

Tensor candidate_logprob(Tape* tape, const ForwardResult& fwd, const PackedBatch& batch,
                         size_t seg) {
    return ops::sum(tape, candidate_token_logprobs(tape, fwd, batch, seg));
}

std::vector<double> eos_hidden(const ForwardResult& fwd, const PackedBatch& batch, size_t seg,
                               int eos_token) {
    if (seg == 0 || seg > batch.num_segments) throw ConfigError("candidate segment out of range");
    const std::vector<size_t> positions = batch.segment_positions(seg);
    if (positions.empty() || batch.tokens[positions.back()] != eos_token) {
        throw ConfigError("eos_hidden: segment has no EOS token");
    }
    const size_t d = fwd.hidden.dim(1);
    const size_t p = positions.back();
    std::vector<double> h(d);
    for (size_t j = 0; j < d; ++j) h[j] = fwd.hidden.at(p * d + j);
    return h;
}

namespace {

struct Beam {
    std::vector<int> tokens; // level tokens chosen so far
    std::vector<int> codes;  // decoded codes (parallel; -1 when not that level's token)
    double logprob = 0.0;
};

// Forward prompt + partial beams (no EOS appended) and return, per beam, the
// log-prob row at the position that predicts the beam's next token. Chunks
// beams so every packed sequence fits max_seq_len (exact: candidates are
// mutually invisible, so chunking changes nothing).
std::vector<std::vector<double>> next_token_rows(const Model& m, const Bound& params,
                                                 const std::vector<int>& prompt,
                                                 const std::vector<Beam>& beams, size_t depth) {
    const size_t V = m.cfg.vocab_size;
    const size_t P = prompt.size();
    const size_t seg_len = depth; // tokens per beam so far
    std::vector<std::vector<double>> rows;
    rows.reserve(beams.empty() ? 1 : beams.size());

    if (seg_len == 0) {
        // All beams share the same conditioning: the bare prompt.
        PackedBatch b;
        b.num_segments = 0;
        for (size_t i = 0; i < P; ++i) {
            b.tokens.push_back(prompt[i]);
            b.segment_ids.push_back(0);
            b.position_ids.push_back(static_cast<int>(i));
            b.target_mask.push_back(0);
        }
        ForwardResult fwd = forward_packed(nullptr, params, m.cfg, b);
        std::vector<double> row(V);
        const size_t last = b.last_prompt_position();
        for (size_t j = 0; j < V; ++j) row[j] = fwd.logprobs.at(last * V + j);
        const size_t n = beams.empty() ? 1 : beams.size();
        for (size_t i = 0; i < n; ++i) rows.push_back(row);
        return rows;
    }

    const size_t per_chunk = std::max<size_t>(1, (m.cfg.max_seq_len - P) / seg_len);
    for (size_t start = 0; start < beams.size(); start += per_chunk) {
        const size_t end = std::min(beams.size(), start + per_chunk);
        PackedBatch b;
        b.num_segments = end - start;
        for (size_t i = 0; i < P; ++i) {
            b.tokens.push_back(prompt[i]);
            b.segment_ids.push_back(0);
            b.position_ids.push_back(static_cast<int>(i));
            b.target_mask.push_back(0);
        }
        for (size_t i = start; i < end; ++i) {
            for (size_t t = 0; t < seg_len; ++t) {
                b.tokens.push_back(beams[i].tokens[t]);
                b.segment_ids.push_back(static_cast<int>(i - start + 1));
                b.position_ids.push_back(static_cast<int>(P + t));
                b.target_mask.push_back(1);
            }
        }
        ForwardResult fwd = forward_packed(nullptr, params, m.cfg, b);
        for (size_t i = start; i < end; ++i) {
            const std::vector<size_t> positions = b.segment_positions(i - start + 1);
            const size_t last = positions.back();
            std::vector<double> row(V);
            for (size_t j = 0; j < V; ++j) row[j] = fwd.logprobs.at(last * V + j);
            rows.push_back(std::move(row));
        }
    }
    return rows;
}

} // namespace

std::vector<ScoredSid> beam_search(const Model& m, const Vocab& vocab,
                                   const std::vector<int>& prompt_tokens, size_t width,
                                   const sid::Trie* constraint) {
    if (width == 0) throw ConfigError("beam_search: width must be >= 1");
    const size_t L = vocab.num_levels();
    const Bound params = bind(m, nullptr);

    // All level tokens of every level: the unconstrained per-step alphabet.
    std::vector<int> all_level_tokens;
    for (int t = 2; t < static_cast<int>(vocab.query_offset()); ++t) all_level_tokens.push_back(t);

    std::vector<Beam> beams(1); // one empty beam
    for (size_t depth = 0; depth < L; ++depth) {
        const auto rows = next_token_rows(m, params, prompt_tokens, beams, depth);
        std::vector<Beam> expanded;
        for (size_t i = 0; i < beams.size(); ++i) {
            std::vector<int> allowed;
            if (constraint) {
                for (int code : constraint->continuations(beams[i].codes)) {
                    allowed.push_back(vocab.level_token(depth, code));
                }
            } else {
                allowed = all_level_tokens;
            }
            for (int tok : allowed) {
                Beam nb = beams[i];
                nb.tokens.push_back(tok);
                nb.codes.push_back(constraint ? tok - static_cast<int>(vocab.level_offset(depth))
                                              : -1);
                nb.logprob += rows[i][static_cast<size_t>(tok)];
                expanded.push_back(std::move(nb));
            }
        }
        std::sort(expanded.begin(), expanded.end(), [](const Beam& a, const Beam& b) {
            if (a.logprob != b.logprob) return a.logprob > b.logprob;
            return a.tokens < b.tokens;
        });
        if (expanded.size() > width) expanded.resize(width);
        beams = std::move(expanded);
        if (beams.empty()) return {};
    }

    // Score EOS after the last level token.
    const auto rows = next_token_rows(m, params, prompt_tokens, beams, L);
    for (size_t i = 0; i < beams.size(); ++i) {
        beams[i].logprob += rows[i][static_cast<size_t>(Vocab::kEos)];
    }
    std::sort(beams.begin(), beams.end(), [](const Beam& a, const Beam& b) {
        if (a.logprob != b.logprob) return a.logprob > b.logprob;
        return a.tokens < b.tokens;
    });

    std::vector<ScoredSid> out;
    out.reserve(beams.size());
    for (const Beam& b : beams) {
        ScoredSid s;
        s.tokens = b.tokens;
        s.logprob = b.logprob;
        s.parses = vocab.try_parse_sid_tokens(b.tokens, &s.sid);
        out.push_back(std::move(s));
    }
    return out;
}

namespace {

void put_bytes(std::string& buf, const void* p, size_t n) {
    buf.append(static_cast<const char*>(p), n);
}

template <typename T>
void put_pod(std::string& buf, T v) {
    put_bytes(buf, &v, sizeof(T));
}

template <typename T>
T get_pod(const std::string& buf, size_t& off) {
    if (off + sizeof(T) > buf.size()) throw ConfigError("checkpoint: truncated file");
    T v;
    std::memcpy(&v, buf.data() + off, sizeof(T));
    off += sizeof(T);
    return v;
}

} // namespace

void save_checkpoint(const Model& m, const std::string& path) {
    std::string buf;
    buf.append("RDPK", 4);
    put_pod<uint32_t>(buf, 1); // version
    put_pod<uint64_t>(buf, m.cfg.vocab_size);
    put_pod<uint64_t>(buf, m.cfg.depth);
    put_pod<uint64_t>(buf, m.cfg.d_model);
    put_pod<uint64_t>(buf, m.cfg.n_heads);
    put_pod<uint64_t>(buf, m.cfg.max_seq_len);
    put_pod<uint64_t>(buf, m.cfg.seed);

    const auto params = m.named_params();
    put_pod<uint32_t>(buf, static_cast<uint32_t>(params.size()));
    for (const auto& [name, t] : params) {
        put_pod<uint32_t>(buf, static_cast<uint32_t>(name.size()));
        put_bytes(buf, name.data(), name.size());
        put_pod<uint32_t>(buf, static_cast<uint32_t>(t->ndim()));
        for (size_t i = 0; i < t->ndim(); ++i) put_pod<uint64_t>(buf, t->dim(i));
        put_bytes(buf, t->data(), t->size() * sizeof(double));
    }
    put_pod<uint64_t>(buf, fnv1a64(buf.data(), buf.size()));

    std::ofstream out(path, std::ios::binary);
    if (!out) throw MissingInputError("cannot open for write: " + path);
    out.write(buf.data(), static_cast<std::streamsize>(buf.size()));
    if (!out) throw MissingInputError("short write: " + path);
}

Model load_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw MissingInputError("cannot open: " + path);
    std::string buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 12 + 6 * 8 + 8) throw ConfigError("checkpoint: truncated file");

    const uint64_t stored_hash = [&] {
        uint64_t h;
        std::memcpy(&h, buf.data() + buf.size() - 8, 8);
        return h;
    }();
    if (fnv1a64(buf.data(), buf.size() - 8) != stored_hash) {
        throw HashMismatchError("checkpoint content hash mismatch: " + path);
    }

    size_t off = 0;
    if (buf.compare(0, 4, "RDPK") != 0) throw ConfigError("checkpoint: bad magic: " + path);
    off = 4;
    if (get_pod<uint32_t>(buf, off) != 1) throw ConfigError("checkpoint: unknown version: " + path);

    ModelConfig cfg;
    cfg.vocab_size = get_pod<uint64_t>(buf, off);
    cfg.depth = get_pod<uint64_t>(buf, off);
    cfg.d_model = get_pod<uint64_t>(buf, off);
    cfg.n_heads = get_pod<uint64_t>(buf, off);
    cfg.max_seq_len = get_pod<uint64_t>(buf, off);
    cfg.seed = get_pod<uint64_t>(buf, off);

    Model m = Model::init(cfg); // correct shapes; contents replaced below
    auto params = m.named_params();
    const uint32_t n = get_pod<uint32_t>(buf, off);
    if (n != params.size()) throw ConfigError("checkpoint: parameter count mismatch");
    for (auto& [name, t] : params) {
        const uint32_t name_len = get_pod<uint32_t>(buf, off);
        if (off + name_len > buf.size()) throw ConfigError("checkpoint: truncated file");
        const std::string stored_name = buf.substr(off, name_len);
        off += name_len;
        if (stored_name != name) throw ConfigError("checkpoint: parameter order mismatch");
        const uint32_t ndim = get_pod<uint32_t>(buf, off);
        if (ndim != t->ndim()) throw ConfigError("checkpoint: tensor rank mismatch");
        for (size_t i = 0; i < ndim; ++i) {
            if (get_pod<uint64_t>(buf, off) != t->dim(i)) {
                throw ConfigError("checkpoint: tensor shape mismatch");
            }
        }
        const size_t bytes = t->size() * sizeof(double);
        if (off + bytes > buf.size()) throw ConfigError("checkpoint: truncated file");
        std::memcpy(t->data(), buf.data() + off, bytes);
        off += bytes;
    }
    if (off + 8 != buf.size()) throw ConfigError("checkpoint: trailing bytes");
    return m;
}

} // namespace raddpo::model
