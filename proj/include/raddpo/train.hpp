#pragma once

// Two-stage training pipeline: SFT over positive paths, then preference
// alignment (the combined objective or a pairwise baseline) with a
// deterministic Adam loop, gradient clipping, divergence detection, metric
// traces, and checkpointing.

#include <cstdint>
#include <iosfwd>
#include <string>
#include <vector>

#include "raddpo/datagen.hpp"
#include "raddpo/losses.hpp"
#include "raddpo/model.hpp"
#include "raddpo/vocab.hpp"

namespace raddpo::train {

struct TrainConfig {
    enum class Stage { sft, align };
    enum class Method { rad_dpo, dpo, simpo, sft_only };

    Stage stage = Stage::align;
    Method method = Method::rad_dpo;
    double lr = 3e-4;
    size_t batch_size = 16; // sessions per step
    size_t steps = 3000;
    uint64_t seed = 0;
    losses::LossConfig loss;
    size_t checkpoint_every = 0; // 0: final checkpoint only
    double clip_norm = 1.0;      // global-norm gradient clip
    size_t stats_capacity = 4096;
    size_t stats_refresh = 256;

    void validate() const;
};

const char* method_name(TrainConfig::Method m);
TrainConfig::Method parse_method(const std::string& name);

struct StepRecord {
    size_t step = 0; // 1-based
    double loss = 0.0;
    double sft = 0.0;
    double pl = 0.0;
    bool warm = false;
    double q25 = 0.0, q50 = 0.0, q75 = 0.0; // zero until warm
    double w_mean = 1.0, w_min = 1.0, w_max = 1.0;
};

struct TrainResult {
    model::Model final_model;
    std::vector<StepRecord> curve;
    size_t param_sets = 1; // model parameter sets the method held
    size_t warm_step = 0;  // first step with warm reward stats (0: never)
    model::Model reference; // populated for method=dpo, untouched by training
    bool has_reference = false;
};

// Adam with bias correction; state is keyed by the model's fixed parameter
// order. No weight decay.
class Adam {
public:
    explicit Adam(double lr, double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

    // grads must be in named_params order; applies global-norm clipping first.
    void step(model::Model& m, std::vector<std::vector<double>>& grads, double clip_norm);
    size_t steps_taken() const { return t_; }

private:
    double lr_, b1_, b2_, eps_;
    size_t t_ = 0;
    std::vector<std::vector<double>> m_, v_;
};

// Everything total_loss needs, assembled from one packed session forward.
losses::SessionOutputs session_outputs(ad::Tape* tape, const model::Bound& bound,
                                       const model::ModelConfig& mc,
                                       const datagen::Session& s, const Vocab& vocab);

// Stage 1: minimizes the SFT loss over all positives of sampled sessions,
// starting from a fresh seeded initialization of `model_cfg`.
TrainResult run_sft(const TrainConfig& cfg, const std::vector<datagen::Session>& sessions,
                    const Vocab& vocab, const model::ModelConfig& model_cfg,
                    std::ostream* trace = nullptr, const std::string& checkpoint_dir = "");

// Stage 2: preference alignment starting from the SFT model. method=sft_only
// returns the initialization unchanged; dpo freezes a reference copy.
TrainResult run_alignment(const TrainConfig& cfg, const std::vector<datagen::Session>& sessions,
                          const Vocab& vocab, const model::Model& sft_init,
                          std::ostream* trace = nullptr, const std::string& checkpoint_dir = "");

} // namespace raddpo::train
