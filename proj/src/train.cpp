#include "raddpo/train.hpp"

#include <algorithm>
#include <cmath>
#include <ostream>

#include <json.hpp>

#include "raddpo/common.hpp"
#include "raddpo/rng.hpp"

namespace raddpo::train {

using ad::Tape;
using ad::Tensor;
using json = nlohmann::json;

namespace {

constexpr uint64_t kBatchStream = 0x62617463ull;

std::vector<const Tensor*> bound_param_ptrs(const model::Bound& b) {
    std::vector<const Tensor*> out{&b.tok_embed, &b.pos_embed};
    for (const auto& l : b.layers) {
        out.push_back(&l.wq);
        out.push_back(&l.wk);
        out.push_back(&l.wv);
        out.push_back(&l.wo);
        out.push_back(&l.w1);
        out.push_back(&l.w2);
    }
    out.push_back(&b.lm_head);
    return out;
}

std::vector<size_t> sample_batch(uint64_t seed, size_t step, size_t batch_size, size_t n) {
    auto g = rngu::derive(seed, kBatchStream + step);
    std::vector<size_t> idx(batch_size);
    for (auto& i : idx) i = rngu::uniform_index(g, n);
    return idx;
}

void write_trace_header(std::ostream* trace, const TrainConfig& cfg) {
    if (!trace) return;
    json j{{"format", "raddpo.trace"},
           {"version", 1},
           {"stage", cfg.stage == TrainConfig::Stage::sft ? "sft" : "align"},
           {"method", method_name(cfg.method)},
           {"steps", cfg.steps},
           {"batch_size", cfg.batch_size},
           {"lr", cfg.lr},
           {"seed", cfg.seed},
           {"tool_version", kToolVersion}};
    (*trace) << j.dump() << '\n';
}

void write_trace_record(std::ostream* trace, const StepRecord& r) {
    if (!trace) return;
    json j{{"step", r.step},       {"loss", r.loss},     {"sft", r.sft},
           {"pl", r.pl},           {"warm", r.warm},     {"q25", r.q25},
           {"q50", r.q50},         {"q75", r.q75},       {"w_mean", r.w_mean},
           {"w_min", r.w_min},     {"w_max", r.w_max}};
    (*trace) << j.dump() << '\n';
}

void maybe_checkpoint(const model::Model& m, const TrainConfig& cfg,
                      const std::string& checkpoint_dir, size_t step) {
    if (checkpoint_dir.empty() || cfg.checkpoint_every == 0) return;
    if (step % cfg.checkpoint_every != 0) return;
    model::save_checkpoint(m, checkpoint_dir + "/ckpt_step_" + std::to_string(step) + ".bin");
}

// Collect gradients in named-params order, then take one Adam step.
void apply_step(Tape& tape, const Tensor& loss, const model::Bound& bound, model::Model& m,
                Adam& adam, const TrainConfig& cfg, size_t step) {
    const double loss_value = loss.scalar_value();
    if (!std::isfinite(loss_value))
        throw TrainingDivergedError("non-finite loss", step);
    tape.backward(loss);
    std::vector<std::vector<double>> grads;
    for (const Tensor* p : bound_param_ptrs(bound)) grads.push_back(tape.grad_of(*p));
    adam.step(m, grads, cfg.clip_norm);
}

} // namespace

void TrainConfig::validate() const {
    if (!(lr > 0.0)) throw ConfigError("train config: lr must be positive");
    if (batch_size == 0) throw ConfigError("train config: batch_size must be positive");
    if (steps == 0 && method != Method::sft_only)
        throw ConfigError("train config: steps must be positive");
    if (!(clip_norm > 0.0)) throw ConfigError("train config: clip_norm must be positive");
    if (stats_capacity == 0 || stats_refresh == 0)
        throw ConfigError("train config: stats capacity and refresh must be positive");
    loss.validate();
}

const char* method_name(TrainConfig::Method m) {
    switch (m) {
        case TrainConfig::Method::rad_dpo: return "rad_dpo";
        case TrainConfig::Method::dpo: return "dpo";
        case TrainConfig::Method::simpo: return "simpo";
        case TrainConfig::Method::sft_only: return "sft_only";
    }
    throw ConfigError("train config: unknown method");
}

TrainConfig::Method parse_method(const std::string& name) {
    if (name == "rad_dpo") return TrainConfig::Method::rad_dpo;
    if (name == "dpo") return TrainConfig::Method::dpo;
    if (name == "simpo") return TrainConfig::Method::simpo;
    if (name == "sft_only") return TrainConfig::Method::sft_only;
    throw ConfigError("unknown method: " + name +
                      " (expected rad_dpo, dpo, simpo, or sft_only)");
}

Adam::Adam(double lr, double beta1, double beta2, double eps)
    : lr_(lr), b1_(beta1), b2_(beta2), eps_(eps) {
    if (!(lr > 0.0)) throw ConfigError("adam: lr must be positive");
}

void Adam::step(model::Model& m, std::vector<std::vector<double>>& grads, double clip_norm) {
    auto params = m.named_params();
    if (grads.size() != params.size())
        throw ConfigError("adam: gradient count does not match parameter count");
    if (m_.empty()) {
        for (const auto& g : grads) {
            m_.emplace_back(g.size(), 0.0);
            v_.emplace_back(g.size(), 0.0);
        }
    }

    double sq = 0.0;
    for (const auto& g : grads)
        for (double v : g) sq += v * v;
    const double norm = std::sqrt(sq);
    if (!std::isfinite(norm)) throw TrainingDivergedError("non-finite gradient norm", t_ + 1);
    const double scale = norm > clip_norm ? clip_norm / norm : 1.0;

    ++t_;
    const double bc1 = 1.0 - std::pow(b1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(b2_, static_cast<double>(t_));
    for (size_t i = 0; i < params.size(); ++i) {
        Tensor* p = params[i].second;
        if (grads[i].size() != p->size())
            throw ConfigError("adam: gradient shape mismatch for " + params[i].first);
        for (size_t j = 0; j < grads[i].size(); ++j) {
            const double g = grads[i][j] * scale;
            m_[i][j] = b1_ * m_[i][j] + (1.0 - b1_) * g;
            v_[i][j] = b2_ * v_[i][j] + (1.0 - b2_) * g * g;
            const double mhat = m_[i][j] / bc1;
            const double vhat = v_[i][j] / bc2;
            p->at(j) -= lr_ * mhat / (std::sqrt(vhat) + eps_);
        }
    }
}

losses::SessionOutputs session_outputs(Tape* tape, const model::Bound& bound,
                                       const model::ModelConfig& mc, const datagen::Session& s,
                                       const Vocab& vocab) {
    PackedBatch batch = datagen::pack(s, vocab);
    auto fwd = model::forward_packed(tape, bound, mc, batch);

    losses::SessionOutputs out;
    const size_t n_pos = s.positives.size();
    for (size_t i = 0; i < n_pos; ++i) {
        const size_t seg = 1 + i;
        out.pos_logprobs.push_back(model::candidate_logprob(tape, fwd, batch, seg));
        out.pos_lengths.push_back(batch.segment_positions(seg).size());
    }
    out.wstar = s.wstar_index();

    const auto yw_tokens = vocab.sid_tokens(s.positives[out.wstar].sid);
    const auto h_w = model::eos_hidden(fwd, batch, 1 + out.wstar, Vocab::kEos);
    for (size_t j = 0; j < s.negatives.size(); ++j) {
        const size_t seg = 1 + n_pos + j;
        out.neg_token_logprobs.push_back(model::candidate_token_logprobs(tape, fwd, batch, seg));
        const auto yl_tokens = vocab.sid_tokens(s.negatives[j].sid);
        const size_t k = losses::longest_common_prefix(yw_tokens, yl_tokens);
        out.neg_masks.push_back(losses::make_prefix_mask(k, yl_tokens.size()));
        out.sims.push_back(
            losses::cosine_sim(h_w, model::eos_hidden(fwd, batch, seg, Vocab::kEos)));
    }
    return out;
}

TrainResult run_sft(const TrainConfig& cfg, const std::vector<datagen::Session>& sessions,
                    const Vocab& vocab, const model::ModelConfig& model_cfg,
                    std::ostream* trace, const std::string& checkpoint_dir) {
    cfg.validate();
    if (cfg.stage != TrainConfig::Stage::sft)
        throw ConfigError("run_sft: config stage must be sft");
    model_cfg.validate();
    if (sessions.empty()) throw MissingInputError("run_sft: no sessions");

    TrainResult res;
    res.final_model = model::Model::init(model_cfg);
    Adam adam(cfg.lr);
    write_trace_header(trace, cfg);

    for (size_t step = 1; step <= cfg.steps; ++step) {
        auto idx = sample_batch(cfg.seed, step, cfg.batch_size, sessions.size());
        Tape tape;
        auto bound = model::bind(res.final_model, &tape);
        std::vector<Tensor> per_session;
        for (size_t i : idx) {
            const auto& s = sessions[i];
            std::vector<std::vector<int>> cands;
            for (const auto& p : s.positives) cands.push_back(vocab.sid_tokens(p.sid));
            PackedBatch batch = make_packed(s.prompt, cands, Vocab::kEos);
            auto fwd = model::forward_packed(&tape, bound, model_cfg, batch);
            std::vector<Tensor> pos_lps;
            for (size_t c = 1; c <= cands.size(); ++c)
                pos_lps.push_back(model::candidate_logprob(&tape, fwd, batch, c));
            per_session.push_back(losses::sft_loss(&tape, pos_lps));
        }
        Tensor loss = ad::mean(&tape, ad::stack(&tape, per_session));

        StepRecord rec;
        rec.step = step;
        rec.loss = rec.sft = loss.scalar_value();
        apply_step(tape, loss, bound, res.final_model, adam, cfg, step);
        res.curve.push_back(rec);
        write_trace_record(trace, rec);
        maybe_checkpoint(res.final_model, cfg, checkpoint_dir, step);
    }
    if (!checkpoint_dir.empty())
        model::save_checkpoint(res.final_model, checkpoint_dir + "/model_final.bin");
    return res;
}

namespace {

// Alignment step for the combined objective over whole sessions.
StepRecord rad_dpo_step(size_t step, const TrainConfig& cfg,
                        const std::vector<datagen::Session>& sessions,
                        const std::vector<size_t>& idx, const Vocab& vocab, model::Model& m,
                        losses::RewardStats& stats, Adam& adam) {
    Tape tape;
    auto bound = model::bind(m, &tape);
    std::vector<losses::SessionOutputs> outs;
    std::vector<double> batch_sims;
    for (size_t i : idx) {
        outs.push_back(session_outputs(&tape, bound, m.cfg, sessions[i], vocab));
        for (double s : outs.back().sims) batch_sims.push_back(s);
    }
    losses::update_stats(stats, batch_sims, step);

    std::vector<Tensor> totals;
    StepRecord rec;
    rec.step = step;
    double sft_sum = 0.0, pl_sum = 0.0;
    double w_sum = 0.0, w_min = 1.0, w_max = 0.0;
    size_t w_count = 0;
    for (const auto& so : outs) {
        auto parts = losses::total_loss(&tape, so, cfg.loss, stats);
        totals.push_back(parts.total);
        sft_sum += parts.sft.scalar_value();
        pl_sum += parts.pl.scalar_value();
        for (double w : parts.weights) {
            w_sum += w;
            w_min = std::min(w_min, w);
            w_max = std::max(w_max, w);
            ++w_count;
        }
    }
    Tensor loss = ad::mean(&tape, ad::stack(&tape, totals));
    rec.loss = loss.scalar_value();
    rec.sft = sft_sum / static_cast<double>(outs.size());
    rec.pl = pl_sum / static_cast<double>(outs.size());
    rec.warm = stats.warm();
    if (stats.warm()) {
        rec.q25 = stats.q25();
        rec.q50 = stats.q50();
        rec.q75 = stats.q75();
    }
    if (w_count > 0) {
        rec.w_mean = w_sum / static_cast<double>(w_count);
        rec.w_min = w_min;
        rec.w_max = w_max;
    }
    apply_step(tape, loss, bound, m, adam, cfg, step);
    return rec;
}

// Alignment step for pairwise baselines over decomposed (x, y_w, y_l) triples.
StepRecord pair_step(size_t step, const TrainConfig& cfg,
                     const std::vector<datagen::Session>& sessions,
                     const std::vector<size_t>& idx, const Vocab& vocab, model::Model& m,
                     const model::Model* reference, Adam& adam) {
    Tape tape;
    auto bound = model::bind(m, &tape);
    model::Bound ref_bound;
    if (reference) ref_bound = model::bind(*reference, nullptr);

    std::vector<Tensor> pair_losses;
    for (size_t i : idx) {
        const auto& s = sessions[i];
        const auto& yw = s.positives[s.wstar_index()].sid;
        for (const auto& neg : s.negatives) {
            std::vector<std::vector<int>> cands{vocab.sid_tokens(yw), vocab.sid_tokens(neg.sid)};
            PackedBatch batch = make_packed(s.prompt, cands, Vocab::kEos);
            auto fwd = model::forward_packed(&tape, bound, m.cfg, batch);
            Tensor lp_w = model::candidate_logprob(&tape, fwd, batch, 1);
            Tensor lp_l = model::candidate_logprob(&tape, fwd, batch, 2);
            if (cfg.method == TrainConfig::Method::dpo) {
                auto ref_fwd = model::forward_packed(nullptr, ref_bound, reference->cfg, batch);
                const double ref_w =
                    model::candidate_logprob(nullptr, ref_fwd, batch, 1).scalar_value();
                const double ref_l =
                    model::candidate_logprob(nullptr, ref_fwd, batch, 2).scalar_value();
                pair_losses.push_back(
                    losses::dpo_pair_loss(&tape, lp_w, lp_l, ref_w, ref_l, cfg.loss.beta));
            } else {
                const size_t len_w = batch.segment_positions(1).size();
                const size_t len_l = batch.segment_positions(2).size();
                Tensor rw = losses::implicit_reward(&tape, lp_w, len_w);
                Tensor rl = losses::implicit_reward(&tape, lp_l, len_l);
                pair_losses.push_back(
                    losses::simpo_pair_loss(&tape, rw, rl, cfg.loss.beta, cfg.loss.gamma));
            }
        }
    }
    if (pair_losses.empty()) throw ConfigError("alignment: batch produced no pairs");
    Tensor loss = ad::mean(&tape, ad::stack(&tape, pair_losses));

    StepRecord rec;
    rec.step = step;
    rec.loss = rec.pl = loss.scalar_value();
    apply_step(tape, loss, bound, m, adam, cfg, step);
    return rec;
}

} // namespace

TrainResult run_alignment(const TrainConfig& cfg, const std::vector<datagen::Session>& sessions,
                          const Vocab& vocab, const model::Model& sft_init, std::ostream* trace,
                          const std::string& checkpoint_dir) {
    cfg.validate();
    if (cfg.stage != TrainConfig::Stage::align)
        throw ConfigError("run_alignment: config stage must be align");

    TrainResult res;
    res.final_model = sft_init.clone();
    if (cfg.method == TrainConfig::Method::sft_only) {
        // The baseline "alignment" is the identity: emit the SFT model as-is.
        write_trace_header(trace, cfg);
        return res;
    }
    if (sessions.empty()) throw MissingInputError("run_alignment: no sessions");
    for (const auto& s : sessions) {
        if (s.positives.empty()) throw ConfigError("alignment: session without positives");
        if (s.negatives.empty()) throw ConfigError("alignment: session without negatives");
    }

    const bool is_dpo = cfg.method == TrainConfig::Method::dpo;
    if (is_dpo) {
        res.reference = sft_init.clone(); // frozen reference: the second parameter set
        res.has_reference = true;
    }
    res.param_sets = is_dpo ? 2 : 1;

    Adam adam(cfg.lr);
    losses::RewardStats stats(cfg.stats_capacity, cfg.stats_refresh);
    write_trace_header(trace, cfg);

    for (size_t step = 1; step <= cfg.steps; ++step) {
        auto idx = sample_batch(cfg.seed, step, cfg.batch_size, sessions.size());
        StepRecord rec;
        if (cfg.method == TrainConfig::Method::rad_dpo) {
            rec = rad_dpo_step(step, cfg, sessions, idx, vocab, res.final_model, stats, adam);
            if (res.warm_step == 0 && stats.warm()) res.warm_step = step;
        } else {
            rec = pair_step(step, cfg, sessions, idx, vocab, res.final_model,
                            is_dpo ? &res.reference : nullptr, adam);
        }
        res.curve.push_back(rec);
        write_trace_record(trace, rec);
        maybe_checkpoint(res.final_model, cfg, checkpoint_dir, step);
    }
    if (!checkpoint_dir.empty())
        model::save_checkpoint(res.final_model, checkpoint_dir + "/model_final.bin");
    return res;
}

} // namespace raddpo::train
