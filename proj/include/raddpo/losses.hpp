#pragma once

// Training objectives: multi-label SFT, globally-contrasted preference loss
// with token-level gradient detachment on shared prefixes and
// similarity-quartile reward weighting, plus pairwise DPO and SimPO baselines.

#include <cstddef>
#include <vector>

#include "raddpo/ops.hpp"
#include "raddpo/tape.hpp"
#include "raddpo/tensor.hpp"

namespace raddpo::losses {

struct LossConfig {
    double beta = 1.0;   // contrast temperature
    double lambda = 12.0; // weight-curve steepness
    double gamma = 0.0;  // SimPO margin (baseline only)
    size_t n_negatives = 3;
    bool enable_tlgd = true;
    bool enable_rdrw = true;
    bool enable_multilabel_sft = true;
    double sft_weight = 1.0; // the combined loss keeps an implicit 1:1 by default

    void validate() const;
};

// Shared-prefix bookkeeping for one negative vs. the contrast anchor y_w*.
// diff covers the candidate tokens including EOS; diff[t] == 0 marks tokens
// whose gradient is detached. A negative identical to the anchor (k equal to
// the full code length) detaches everything, EOS included.
struct PrefixMask {
    size_t k = 0;
    std::vector<uint8_t> diff;
};

// k = number of equal leading tokens, EOS excluded from the comparison.
size_t longest_common_prefix(const std::vector<int>& yw_tokens,
                             const std::vector<int>& yl_tokens);
PrefixMask make_prefix_mask(size_t k, size_t code_len);

// Ring buffer of recent similarity scores with quartile anchors. Anchors are
// first computed when the buffer fills (warm) and refreshed every
// refresh_every steps from the buffer contents.
class RewardStats {
public:
    explicit RewardStats(size_t capacity = 4096, size_t refresh_every = 256);

    void push(double sim);
    void refresh_if_due(size_t step);

    bool warm() const { return warm_; }
    size_t inserted() const { return inserted_; }
    size_t capacity() const { return buf_.size(); }
    size_t refresh_every() const { return refresh_every_; }
    double q25() const;
    double q50() const;
    double q75() const;

    std::vector<double> snapshot() const; // buffer contents, insertion order

private:
    void recompute();

    std::vector<double> buf_;
    size_t head_ = 0;
    size_t inserted_ = 0;
    size_t refresh_every_;
    bool warm_ = false;
    double q25_ = 0.0, q50_ = 0.0, q75_ = 0.0;
};

// Convenience wrapper: push a batch of sims, then refresh anchors on schedule.
void update_stats(RewardStats& stats, const std::vector<double>& sims, size_t step);

// Negative mean of candidate log-probabilities over the positive set; no
// length normalization.
ad::Tensor sft_loss(ad::Tape* tape, const std::vector<ad::Tensor>& pos_logprobs);

// Sum of per-token log-probs of a negative, with tokens inside the shared
// prefix detached: the forward value is bitwise-equal to the plain sum, the
// backward pass only flows through differing-suffix tokens.
ad::Tensor detached_neg_logprob(ad::Tape* tape, const ad::Tensor& token_logprobs,
                                const PrefixMask& mask);

// Length-normalized implicit reward log pi(y|x) / |y| (length includes EOS).
ad::Tensor implicit_reward(ad::Tape* tape, const ad::Tensor& logprob, size_t length);

// Plain-double cosine similarity of (detached) hidden states; a zero-norm
// input yields 0 with a warning on stderr.
double cosine_sim(const std::vector<double>& a, const std::vector<double>& b);

// Piecewise weight: 1.0 below Q25, 0.5 above Q75, 0.5 + 0.5*sigma(-lambda*(sim-Q50))
// between; forced to 1.0 until the stats are warm.
double penalty_weight(double sim, const RewardStats& stats, double lambda);

// -log sigma(beta * log sum_j exp(w_j * (r_w - r_j))), stabilized.
ad::Tensor pl_loss(ad::Tape* tape, const ad::Tensor& r_w, const std::vector<ad::Tensor>& r_neg,
                   const std::vector<double>& weights, double beta);

// Everything total_loss needs from a packed session forward.
struct SessionOutputs {
    std::vector<ad::Tensor> pos_logprobs;       // scalar per positive (tokens + EOS)
    std::vector<size_t> pos_lengths;            // token counts including EOS
    size_t wstar = 0;                           // contrast anchor index
    std::vector<ad::Tensor> neg_token_logprobs; // per negative: [len incl EOS]
    std::vector<PrefixMask> neg_masks;          // prefix masks vs. y_w*
    std::vector<double> sims;                   // detached EOS-state cosine sims
};

struct TotalLossParts {
    ad::Tensor total;
    ad::Tensor sft;
    ad::Tensor pl;
    std::vector<double> weights; // per-negative penalty weights actually used
};

TotalLossParts total_loss(ad::Tape* tape, const SessionOutputs& s, const LossConfig& cfg,
                          const RewardStats& stats);

// Pairwise baselines.
ad::Tensor dpo_pair_loss(ad::Tape* tape, const ad::Tensor& lp_w, const ad::Tensor& lp_l,
                         double ref_lp_w, double ref_lp_l, double beta);
ad::Tensor simpo_pair_loss(ad::Tape* tape, const ad::Tensor& r_w, const ad::Tensor& r_l,
                           double beta, double gamma);

} // namespace raddpo::losses
