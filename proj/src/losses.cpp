#include "raddpo/losses.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

#include "raddpo/common.hpp"

namespace raddpo::losses {

using ad::Tensor;

void LossConfig::validate() const {
    if (!(beta > 0.0)) throw ConfigError("loss config: beta must be positive");
    if (!(lambda > 0.0)) throw ConfigError("loss config: lambda must be positive");
    if (gamma < 0.0) throw ConfigError("loss config: gamma must be non-negative");
    if (n_negatives == 0) throw ConfigError("loss config: n_negatives must be at least 1");
    if (sft_weight < 0.0) throw ConfigError("loss config: sft_weight must be non-negative");
}

size_t longest_common_prefix(const std::vector<int>& yw_tokens,
                             const std::vector<int>& yl_tokens) {
    if (yw_tokens.empty() || yl_tokens.empty())
        throw ConfigError("longest_common_prefix: empty token sequence");
    size_t k = 0;
    const size_t lim = std::min(yw_tokens.size(), yl_tokens.size());
    while (k < lim && yw_tokens[k] == yl_tokens[k]) ++k;
    return k;
}

PrefixMask make_prefix_mask(size_t k, size_t code_len) {
    if (k > code_len) throw ConfigError("prefix mask: k exceeds the code length");
    PrefixMask m;
    m.k = k;
    m.diff.assign(code_len + 1, 0); // one slot per code token plus EOS
    if (k < code_len) {
        for (size_t t = k; t <= code_len; ++t) m.diff[t] = 1;
    }
    // k == code_len: the negative equals the anchor; detach everything, EOS
    // included — penalizing an exact duplicate is pure noise.
    return m;
}

RewardStats::RewardStats(size_t capacity, size_t refresh_every)
    : buf_(capacity, 0.0), refresh_every_(refresh_every) {
    if (capacity == 0) throw ConfigError("reward stats: capacity must be positive");
    if (refresh_every == 0) throw ConfigError("reward stats: refresh interval must be positive");
}

void RewardStats::push(double sim) {
    buf_[head_] = sim;
    head_ = (head_ + 1) % buf_.size();
    ++inserted_;
    if (!warm_ && inserted_ >= buf_.size()) {
        warm_ = true;
        recompute(); // anchors become defined the moment the buffer fills
    }
}

void RewardStats::refresh_if_due(size_t step) {
    if (warm_ && step % refresh_every_ == 0) recompute();
}

std::vector<double> RewardStats::snapshot() const {
    const size_t n = std::min(inserted_, buf_.size());
    std::vector<double> out;
    out.reserve(n);
    // Oldest-first: when full, the element at head_ is the oldest.
    const size_t start = inserted_ >= buf_.size() ? head_ : 0;
    for (size_t i = 0; i < n; ++i) out.push_back(buf_[(start + i) % buf_.size()]);
    return out;
}

namespace {

// Linear-interpolation quantile at p * (M - 1) over a scratch copy, using
// nth_element rather than a full sort.
double quantile(std::vector<double>& scratch, double p) {
    const size_t m = scratch.size();
    const double pos = p * static_cast<double>(m - 1);
    const size_t lo = static_cast<size_t>(pos);
    const double frac = pos - static_cast<double>(lo);
    std::nth_element(scratch.begin(), scratch.begin() + static_cast<long>(lo), scratch.end());
    const double vlo = scratch[lo];
    if (frac == 0.0 || lo + 1 >= m) return vlo;
    const double vhi = *std::min_element(scratch.begin() + static_cast<long>(lo) + 1, scratch.end());
    return vlo + frac * (vhi - vlo);
}

} // namespace

void RewardStats::recompute() {
    std::vector<double> scratch = buf_;
    q25_ = quantile(scratch, 0.25);
    q50_ = quantile(scratch, 0.50);
    q75_ = quantile(scratch, 0.75);
}

double RewardStats::q25() const {
    if (!warm_) throw ConfigError("reward stats: anchors undefined before warm-up completes");
    return q25_;
}
double RewardStats::q50() const {
    if (!warm_) throw ConfigError("reward stats: anchors undefined before warm-up completes");
    return q50_;
}
double RewardStats::q75() const {
    if (!warm_) throw ConfigError("reward stats: anchors undefined before warm-up completes");
    return q75_;
}

void update_stats(RewardStats& stats, const std::vector<double>& sims, size_t step) {
    for (double s : sims) stats.push(s);
    stats.refresh_if_due(step);
}

Tensor sft_loss(ad::Tape* tape, const std::vector<Tensor>& pos_logprobs) {
    if (pos_logprobs.empty()) throw ConfigError("sft loss: empty positive set");
    Tensor stacked = ad::stack(tape, pos_logprobs);
    return ad::scale(tape, ad::mean(tape, stacked), -1.0);
}

Tensor detached_neg_logprob(ad::Tape* tape, const Tensor& token_logprobs,
                            const PrefixMask& mask) {
    if (mask.diff.size() != token_logprobs.size())
        throw ConfigError("detached_neg_logprob: mask does not match the token count");
    std::vector<Tensor> terms;
    terms.reserve(token_logprobs.size());
    for (size_t t = 0; t < token_logprobs.size(); ++t) {
        Tensor x = ad::select(tape, token_logprobs, {t});
        terms.push_back(mask.diff[t] ? x : ad::stop_gradient(x));
    }
    // stack + sum accumulates in the same order as a plain sum over the
    // original vector, so the forward value is bitwise-identical.
    return ad::sum(tape, ad::stack(tape, terms));
}

Tensor implicit_reward(ad::Tape* tape, const Tensor& logprob, size_t length) {
    if (length == 0) throw ConfigError("implicit reward: zero candidate length");
    return ad::scale(tape, logprob, 1.0 / static_cast<double>(length));
}

double cosine_sim(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size() || a.empty())
        throw ConfigError("cosine_sim: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) {
        std::fprintf(stderr, "warning: cosine_sim saw a zero-norm vector; returning 0\n");
        return 0.0;
    }
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

double penalty_weight(double sim, const RewardStats& stats, double lambda) {
    if (!stats.warm()) return 1.0; // warm-up: anchors undefined, weights neutral
    if (sim < stats.q25()) return 1.0;
    if (sim > stats.q75()) return 0.5;
    const double z = -lambda * (sim - stats.q50());
    return 0.5 + 0.5 / (1.0 + std::exp(-z));
}

Tensor pl_loss(ad::Tape* tape, const Tensor& r_w, const std::vector<Tensor>& r_neg,
               const std::vector<double>& weights, double beta) {
    if (r_neg.empty()) throw ConfigError("pl loss: empty negative set");
    if (weights.size() != r_neg.size())
        throw ConfigError("pl loss: one weight per negative required");
    if (!(beta > 0.0)) throw ConfigError("pl loss: beta must be positive");
    std::vector<Tensor> gaps;
    gaps.reserve(r_neg.size());
    for (size_t j = 0; j < r_neg.size(); ++j) {
        if (weights[j] < 0.0) throw ConfigError("pl loss: negative weight");
        gaps.push_back(ad::scale(tape, ad::sub(tape, r_w, r_neg[j]), weights[j]));
    }
    Tensor lse = ad::logsumexp(tape, ad::stack(tape, gaps));
    return ad::softplus(tape, ad::scale(tape, ad::scale(tape, lse, beta), -1.0));
}

TotalLossParts total_loss(ad::Tape* tape, const SessionOutputs& s, const LossConfig& cfg,
                          const RewardStats& stats) {
    cfg.validate();
    if (s.pos_logprobs.empty()) throw ConfigError("total loss: no positives");
    if (s.pos_logprobs.size() != s.pos_lengths.size())
        throw ConfigError("total loss: positive lengths missing");
    if (s.wstar >= s.pos_logprobs.size()) throw ConfigError("total loss: bad anchor index");
    const size_t n = s.neg_token_logprobs.size();
    if (n == 0) throw ConfigError("total loss: no negatives");
    if (s.neg_masks.size() != n || s.sims.size() != n)
        throw ConfigError("total loss: per-negative inputs disagree in count");

    TotalLossParts parts;
    if (cfg.enable_multilabel_sft) {
        parts.sft = sft_loss(tape, s.pos_logprobs);
    } else {
        parts.sft = sft_loss(tape, {s.pos_logprobs[s.wstar]});
    }

    Tensor r_w = implicit_reward(tape, s.pos_logprobs[s.wstar], s.pos_lengths[s.wstar]);
    std::vector<Tensor> r_neg;
    r_neg.reserve(n);
    parts.weights.reserve(n);
    for (size_t j = 0; j < n; ++j) {
        const Tensor& tok = s.neg_token_logprobs[j];
        Tensor lp = cfg.enable_tlgd ? detached_neg_logprob(tape, tok, s.neg_masks[j])
                                    : ad::sum(tape, tok);
        r_neg.push_back(implicit_reward(tape, lp, tok.size()));
        parts.weights.push_back(cfg.enable_rdrw ? penalty_weight(s.sims[j], stats, cfg.lambda)
                                                : 1.0);
    }
    parts.pl = pl_loss(tape, r_w, r_neg, parts.weights, cfg.beta);

    Tensor sft_term = cfg.sft_weight == 1.0 ? parts.sft : ad::scale(tape, parts.sft, cfg.sft_weight);
    parts.total = ad::add(tape, sft_term, parts.pl);
    return parts;
}

Tensor dpo_pair_loss(ad::Tape* tape, const Tensor& lp_w, const Tensor& lp_l, double ref_lp_w,
                     double ref_lp_l, double beta) {
    if (!(beta > 0.0)) throw ConfigError("dpo loss: beta must be positive");
    if (!std::isfinite(ref_lp_w) || !std::isfinite(ref_lp_l))
        throw ConfigError("dpo loss: non-finite reference log-probabilities");
    Tensor margin = ad::scale(tape, ad::sub(tape, lp_w, lp_l), beta);
    Tensor shifted = ad::add(tape, margin, Tensor::scalar(-beta * (ref_lp_w - ref_lp_l)));
    return ad::softplus(tape, ad::scale(tape, shifted, -1.0));
}

Tensor simpo_pair_loss(ad::Tape* tape, const Tensor& r_w, const Tensor& r_l, double beta,
                       double gamma) {
    if (!(beta > 0.0)) throw ConfigError("simpo loss: beta must be positive");
    if (gamma < 0.0) throw ConfigError("simpo loss: gamma must be non-negative");
    Tensor margin = ad::scale(tape, ad::sub(tape, r_w, r_l), beta);
    Tensor shifted = ad::add(tape, margin, Tensor::scalar(-gamma));
    return ad::softplus(tape, ad::scale(tape, shifted, -1.0));
}

} // namespace raddpo::losses
