#pragma once

// Tiny decoder-only autoregressive model over the SID + prompt vocabulary.
// Pre-norm transformer blocks (RMSNorm, multi-head attention, ReLU MLP),
// learned absolute positional embeddings indexed by position ids, untied
// output head. Supports the packed multi-candidate forward pass and beam
// search (optionally trie-constrained).

#include <cstdint>
#include <string>
#include <utility>
#include <vector>

#include "raddpo/ops.hpp"
#include "raddpo/packed.hpp"
#include "raddpo/sid.hpp"
#include "raddpo/tape.hpp"
#include "raddpo/tensor.hpp"
#include "raddpo/vocab.hpp"

namespace raddpo::model {

struct ModelConfig {
    size_t vocab_size = 0;
    size_t depth = 2;
    size_t d_model = 64;
    size_t n_heads = 4;
    size_t max_seq_len = 64;
    uint64_t seed = 0;

    void validate() const {
        if (vocab_size < 3) throw ConfigError("model: vocab_size must cover PAD, EOS, and tokens");
        if (depth == 0 || d_model == 0 || n_heads == 0 || max_seq_len == 0) {
            throw ConfigError("model: depth, d_model, n_heads, max_seq_len must be positive");
        }
        if (d_model % n_heads != 0) throw ConfigError("model: d_model must divide by n_heads");
    }
};

struct LayerParams {
    ad::Tensor wq, wk, wv, wo; // [d, d]
    ad::Tensor w1;             // [d, 4d]
    ad::Tensor w2;             // [4d, d]
};

struct Model {
    ModelConfig cfg;
    ad::Tensor tok_embed; // [V, d]
    ad::Tensor pos_embed; // [max_seq_len, d]
    std::vector<LayerParams> layers;
    ad::Tensor lm_head; // [d, V]

    static Model init(const ModelConfig& cfg);

    // Fixed, documented parameter order (drives the optimizer, checkpoints,
    // and gradient flattening).
    std::vector<std::pair<std::string, ad::Tensor*>> named_params();
    std::vector<std::pair<std::string, const ad::Tensor*>> named_params() const;
    size_t num_scalar_params() const;

    Model clone() const; // deep copy (reference models, checkpooint snapshots)
};

// Parameter handles used by one forward pass: tracked (tape-watched) during
// training, plain during inference. Handles share storage with the Model.
struct Bound {
    ad::Tensor tok_embed, pos_embed, lm_head;
    std::vector<LayerParams> layers;
};

// Watch every parameter on the tape (pass nullptr for inference handles).
Bound bind(const Model& m, ad::Tape* tape);

struct ForwardResult {
    ad::Tensor logprobs; // [T, V] per-position log-softmax over the vocab
    ad::Tensor hidden;   // [T, d] final-layer hidden states (post final norm)
};

ForwardResult forward_packed(ad::Tape* tape, const Bound& params, const ModelConfig& cfg,
                             const PackedBatch& batch);

// Per-token log-probabilities of candidate segment `seg` (1-based), in order,
// EOS included. Token t's log-prob is read at its predecessor position (the
// last prompt position for the segment's first token).
ad::Tensor candidate_token_logprobs(ad::Tape* tape, const ForwardResult& fwd,
                                    const PackedBatch& batch, size_t seg);

// Sum of the segment's target token log-probs; log pi(y_seg | x).
ad::Tensor candidate_logprob(ad::Tape* tape, const ForwardResult& fwd, const PackedBatch& batch,
                             size_t seg);

// Final-layer hidden state at the segment's EOS position, detached.
std::vector<double> eos_hidden(const ForwardResult& fwd, const PackedBatch& batch, size_t seg,
                               int eos_token);

struct ScoredSid {
    std::vector<int> tokens;  // decoded level-token sequence (no EOS)
    double logprob = 0.0;     // total sequence log-prob including EOS
    bool parses = false;      // tokens form one code per level in order
    sid::SemanticId sid;      // valid iff parses
};

// Beam search over level-token sequences, one level per step, EOS scored after
// the last level. Unconstrained mode may emit arbitrary level-token sequences;
// with a trie every emitted sequence is a catalog SID. Results are sorted by
// log-prob descending (ties by token sequence) and capped at `width`.
std::vector<ScoredSid> beam_search(const Model& m, const Vocab& vocab,
                                   const std::vector<int>& prompt_tokens, size_t width,
                                   const sid::Trie* constraint);

// Versioned binary checkpoint with a trailing content hash; round-trips are
// bit-exact. Unknown magic/version raises ConfigError, a bad trailing hash
// raises HashMismatchError.
void save_checkpoint(const Model& m, const std::string& path);
Model load_checkpoint(const std::string& path);

} // namespace raddpo::model
