#pragma once

// Stage-2 network and trainer. The dual branch fuses per-modality encoder
// outputs with quality-guided weights and a bidirectional GRU; training
// updates an Auxiliary model by SGD and tracks it with an EMA Primary model
// that also acts as the distillation teacher.

#include <cmath>
#include <string>
#include <vector>

#include "clmm/encoder.hpp"
#include "clmm/log.hpp"
#include "clmm/optim.hpp"

namespace clmm {

struct DualBranchConfig {
    std::size_t gru_hidden = 128;  // per direction
    std::size_t mlp_hidden = 256;
    std::size_t num_classes = 0;
    double lambda_mix = 0.5;

    void validate() const {
        if (gru_hidden == 0 || mlp_hidden == 0) throw ConfigError("dual branch dims must be positive");
        if (num_classes < 2) throw ConfigError("need at least 2 classes");
        if (lambda_mix < 0.0 || lambda_mix > 1.0) throw ConfigError("lambda_mix must lie in [0,1]");
    }
};

struct GruParams {
    Tensor w_ih;  // [D x 3H], gate order (reset, update, candidate)
    Tensor w_hh;  // [H x 3H]
    Tensor b_ih;  // [3H]
    Tensor b_hh;  // [3H]

    static GruParams init(std::size_t input, std::size_t hidden, Rng& rng) {
        return {glorot_matrix(input, 3 * hidden, rng), glorot_matrix(hidden, 3 * hidden, rng),
                zeros_param({3 * hidden}), zeros_param({3 * hidden})};
    }
    std::size_t hidden() const { return w_hh.dim(0); }
};

struct DualBranchParams {
    std::vector<Tensor> score_w;  // per modality [D x 1]
    std::vector<Tensor> score_b;  // per modality [1]
    GruParams gru_fwd;
    GruParams gru_bwd;
    Tensor mlp_w1, mlp_b1;  // (2H + M·D) -> mlp_hidden
    Tensor mlp_w2, mlp_b2;  // mlp_hidden -> classes

    static DualBranchParams init(const EncoderConfig& enc, const DualBranchConfig& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t d_model = enc.feature_dim, m = enc.num_modalities();
        DualBranchParams p;
        for (std::size_t j = 0; j < m; ++j) {
            p.score_w.push_back(glorot_matrix(d_model, 1, rng));
            p.score_b.push_back(zeros_param({1}));
        }
        p.gru_fwd = GruParams::init(d_model, cfg.gru_hidden, rng);
        p.gru_bwd = GruParams::init(d_model, cfg.gru_hidden, rng);
        const std::size_t fused = 2 * cfg.gru_hidden + m * d_model;
        p.mlp_w1 = glorot_matrix(fused, cfg.mlp_hidden, rng);
        p.mlp_b1 = zeros_param({cfg.mlp_hidden});
        p.mlp_w2 = glorot_matrix(cfg.mlp_hidden, cfg.num_classes, rng);
        p.mlp_b2 = zeros_param({cfg.num_classes});
        return p;
    }

    std::size_t num_classes() const { return mlp_b2.numel(); }

    void append_refs(ParamRefs& refs, const std::string& prefix = "head") {
        for (std::size_t j = 0; j < score_w.size(); ++j) {
            refs.emplace_back(prefix + "/score" + std::to_string(j) + "/w", &score_w[j]);
            refs.emplace_back(prefix + "/score" + std::to_string(j) + "/b", &score_b[j]);
        }
        for (auto [name, g] : {std::pair{"gru_fwd", &gru_fwd}, std::pair{"gru_bwd", &gru_bwd}}) {
            const std::string base = prefix + "/" + name;
            refs.emplace_back(base + "/w_ih", &g->w_ih);
            refs.emplace_back(base + "/w_hh", &g->w_hh);
            refs.emplace_back(base + "/b_ih", &g->b_ih);
            refs.emplace_back(base + "/b_hh", &g->b_hh);
        }
        refs.emplace_back(prefix + "/mlp/w1", &mlp_w1);
        refs.emplace_back(prefix + "/mlp/b1", &mlp_b1);
        refs.emplace_back(prefix + "/mlp/w2", &mlp_w2);
        refs.emplace_back(prefix + "/mlp/b2", &mlp_b2);
    }
};

// ------------------------------------------------------------ quality weights

// β^QoM from unlabeled projected embeddings: embeddings[i][j] is sample i,
// modality j. score_j = mean_i cos(R_ij, mean_m R_im); β^QoM = softmax(score).
// Falls back to uniform when no sample has a usable consensus direction.
inline std::vector<double> qom_prior(const std::vector<std::vector<std::vector<double>>>& embeddings,
                                     std::size_t modalities) {
    if (modalities == 0) throw ContractError("qom_prior: no modalities");
    std::vector<double> score(modalities, 0.0);
    std::size_t used = 0;
    for (const auto& sample : embeddings) {
        if (sample.size() != modalities) {
            throw DimensionError("qom_prior: sample has " + std::to_string(sample.size()) + " modalities, expected " +
                                 std::to_string(modalities));
        }
        std::vector<double> mean(sample[0].size(), 0.0);
        for (const auto& r : sample)
            for (std::size_t i = 0; i < mean.size(); ++i) mean[i] += r[i] / static_cast<double>(modalities);
        double mnorm = 0.0;
        for (double v : mean) mnorm += v * v;
        if (std::sqrt(mnorm) < 1e-12) continue;
        bool ok = true;
        std::vector<double> cos(modalities);
        for (std::size_t j = 0; j < modalities; ++j) {
            double dotp = 0.0, rn = 0.0;
            for (std::size_t i = 0; i < mean.size(); ++i) {
                dotp += sample[j][i] * mean[i];
                rn += sample[j][i] * sample[j][i];
            }
            if (std::sqrt(rn) < 1e-12) {
                ok = false;
                break;
            }
            cos[j] = dotp / std::sqrt(rn * mnorm);
        }
        if (!ok) continue;
        for (std::size_t j = 0; j < modalities; ++j) score[j] += cos[j];
        ++used;
    }
    if (used == 0) {
        log::warn("qom_prior: degenerate embeddings, using uniform modality prior");
        return std::vector<double>(modalities, 1.0 / static_cast<double>(modalities));
    }
    for (double& s : score) s /= static_cast<double>(used);
    NoGradGuard guard;
    const Tensor prior = softmax(Tensor::vector(score));
    return std::vector<double>(prior.values().begin(), prior.values().end());
}

// Softmax over per-modality scores from mean-pooled Z_j.
inline Tensor attention_weights(const std::vector<Tensor>& z, const DualBranchParams& p) {
    std::vector<Tensor> logits;
    for (std::size_t j = 0; j < z.size(); ++j) {
        const Tensor pooled = reshape(mean_rows(z[j]), {1, z[j].dim(1)});
        logits.push_back(linear(pooled, p.score_w[j], p.score_b[j]));
    }
    return softmax(reshape(stack_rows(logits), {z.size()}));
}

// β = (1 − λ_mix)·β^Attn + λ_mix·β^QoM.
inline Tensor mix_quality_weights(const Tensor& attn, std::span<const double> qom, double lambda_mix) {
    if (lambda_mix < 0.0 || lambda_mix > 1.0) throw ConfigError("lambda_mix must lie in [0,1]");
    if (qom.size() != attn.numel()) throw DimensionError("quality prior length does not match modality count");
    std::vector<double> prior(qom.size());
    for (std::size_t j = 0; j < qom.size(); ++j) prior[j] = lambda_mix * qom[j];
    return add(scale(attn, 1.0 - lambda_mix), Tensor::vector(std::move(prior)));
}

inline Tensor quality_weights(const std::vector<Tensor>& z, const DualBranchParams& p, std::span<const double> qom,
                              double lambda_mix) {
    return mix_quality_weights(attention_weights(z, p), qom, lambda_mix);
}

// ------------------------------------------------------------------- Bi-GRU

// One GRU direction over seq[T x D] from a zero initial state:
//   r = σ(x W_ir + b_ir + h W_hr + b_hr)
//   u = σ(x W_iu + b_iu + h W_hu + b_hu)
//   n = tanh(x W_in + b_in + r ⊙ (h W_hn + b_hn))
//   h' = (1 − u) ⊙ n + u ⊙ h
inline Tensor gru_direction(const Tensor& seq, const GruParams& p, bool reverse) {
    const std::size_t steps = seq.dim(0), hidden = p.hidden();
    const Tensor xs = linear(seq, p.w_ih, p.b_ih);
    Tensor h = Tensor::zeros({1, hidden});
    std::vector<Tensor> outs(steps);
    for (std::size_t n = 0; n < steps; ++n) {
        const std::size_t t = reverse ? steps - 1 - n : n;
        const Tensor xt = slice_rows(xs, t, t + 1);
        const Tensor hh = linear(h, p.w_hh, p.b_hh);
        const Tensor r = sigmoid(add(slice_cols(xt, 0, hidden), slice_cols(hh, 0, hidden)));
        const Tensor u = sigmoid(add(slice_cols(xt, hidden, 2 * hidden), slice_cols(hh, hidden, 2 * hidden)));
        const Tensor cand = tanh(add(slice_cols(xt, 2 * hidden, 3 * hidden), mul(r, slice_cols(hh, 2 * hidden, 3 * hidden))));
        h = add(mul(affine(u, -1.0, 1.0), cand), mul(u, h));
        outs[t] = h;
    }
    return stack_rows(outs);
}

// seq[T x D] -> H^bi[T x 2H], forward states then backward states per row.
inline Tensor bigru_forward(const Tensor& seq, const GruParams& fwd, const GruParams& bwd) {
    if (seq.rank() != 2 || seq.dim(0) == 0) throw DimensionError("bigru: expected non-empty [T x D] sequence");
    return concat_cols({gru_direction(seq, fwd, false), gru_direction(seq, bwd, true)});
}

// Class logits from per-modality encoder outputs Z_j[S x D].
inline Tensor dual_branch_forward(const std::vector<Tensor>& z, const DualBranchParams& p, std::span<const double> qom,
                                  double lambda_mix) {
    if (z.size() != p.score_w.size()) {
        throw ContractError("dual branch: got " + std::to_string(z.size()) + " modalities, model has " +
                            std::to_string(p.score_w.size()) + " (missing modalities are not supported)");
    }
    const Tensor beta = quality_weights(z, p, qom, lambda_mix);
    std::vector<Tensor> scaled;
    for (std::size_t j = 0; j < z.size(); ++j) scaled.push_back(mul_scalar(z[j], select(beta, j)));
    const Tensor fused_seq = weighted_sum(z, beta);
    const Tensor hbi = bigru_forward(fused_seq, p.gru_fwd, p.gru_bwd);
    std::vector<Tensor> parts{hbi};
    parts.insert(parts.end(), scaled.begin(), scaled.end());
    const Tensor joined = concat_cols(parts);
    const Tensor pooled = reshape(mean_rows(joined), {1, joined.dim(1)});
    const Tensor hidden = silu(linear(pooled, p.mlp_w1, p.mlp_b1));
    const Tensor logits = linear(hidden, p.mlp_w2, p.mlp_b2);
    return reshape(logits, {logits.numel()});
}

// ------------------------------------------------------------------- models

// Encoder backbone plus dual-branch head; the unit that is EMA-tracked.
struct FinetuneModel {
    EncoderConfig encoder_cfg;
    DualBranchConfig head_cfg;
    EncoderParams encoder;
    DualBranchParams head;
    std::vector<double> qom;  // β^QoM, fixed during training

    static FinetuneModel init(const EncoderConfig& enc, const DualBranchConfig& head_cfg, Rng& rng) {
        FinetuneModel m;
        m.encoder_cfg = enc;
        m.head_cfg = head_cfg;
        m.encoder = EncoderParams::init(enc, rng);
        m.head = DualBranchParams::init(enc, head_cfg, rng);
        m.qom.assign(enc.num_modalities(), 1.0 / static_cast<double>(enc.num_modalities()));
        return m;
    }

    ParamRefs parameter_refs() {
        ParamRefs refs = encoder.parameter_refs();
        head.append_refs(refs);
        return refs;
    }

    Tensor logits(const std::vector<Tensor>& inputs) const {
        if (inputs.size() != encoder_cfg.num_modalities()) {
            throw ContractError("model expects " + std::to_string(encoder_cfg.num_modalities()) + " modalities, got " +
                                std::to_string(inputs.size()));
        }
        std::vector<Tensor> z;
        for (std::size_t j = 0; j < inputs.size(); ++j) z.push_back(encode(encoder, encoder_cfg, inputs[j], j));
        return dual_branch_forward(z, head, qom, head_cfg.lambda_mix);
    }

    std::size_t predict(const std::vector<Tensor>& inputs) const {
        NoGradGuard guard;
        const Tensor out = logits(inputs);
        const auto v = out.values();
        return static_cast<std::size_t>(std::max_element(v.begin(), v.end()) - v.begin());
    }
};

// ------------------------------------------------------- collaborative trainer

// KL(softmax(F_ξ) ‖ softmax(F_θ)): teacher = Primary logits (constant),
// student = Auxiliary logits. Gradient flows to the auxiliary logits only.
inline Tensor distill_loss(const Tensor& aux_logits, const Tensor& primary_logits) {
    if (aux_logits.numel() != primary_logits.numel()) {
        throw DimensionError("distill_loss: " + std::to_string(aux_logits.numel()) + " vs " +
                             std::to_string(primary_logits.numel()) + " classes");
    }
    std::vector<double> target;
    {
        NoGradGuard guard;
        const Tensor p = softmax(primary_logits.detach());
        target.assign(p.values().begin(), p.values().end());
    }
    return kl_to_target(target, aux_logits);
}

struct CollabConfig {
    double ema_cap = 0.9;         // α₀
    double distill_weight = 0.1;  // λ_distill
    bool collaborative = true;    // false: plain supervised fine-tuning, no EMA, no distillation
    SgdConfig sgd{1e-3, 0.9};
};

struct CollabState {
    FinetuneModel auxiliary;  // θ, trained by SGD
    FinetuneModel primary;    // θ_EMA, never receives gradients
    std::size_t step = 0;     // t
    CollabConfig cfg;
    Sgd optimizer{SgdConfig{1e-3, 0.9}};

    // Both models start from the same weights.
    static CollabState from(const FinetuneModel& init, const CollabConfig& cfg) {
        CollabState s;
        s.cfg = cfg;
        s.auxiliary = clone_model(init);
        s.primary = clone_model(init);
        for (auto& ref : s.primary.parameter_refs()) ref.second->set_requires_grad(false);
        s.optimizer = Sgd(cfg.sgd);
        return s;
    }

    // The model used for inference.
    const FinetuneModel& inference_model() const { return cfg.collaborative ? primary : auxiliary; }
};

// α for update number t (t starts at 1): min(1 − 1/(t+1), α₀).
inline double ema_momentum(std::size_t t, double cap) {
    return std::min(1.0 - 1.0 / (static_cast<double>(t) + 1.0), cap);
}

// θ_EMA ← α·θ_EMA + (1 − α)·θ after incrementing t. Returns α.
inline double ema_update(CollabState& state) {
    auto aux = named_parameters(state.auxiliary);
    auto ema = named_parameters(state.primary);
    if (aux.size() != ema.size()) throw ContractError("ema_update: parameter count drift between models");
    state.step += 1;
    const double alpha = ema_momentum(state.step, state.cfg.ema_cap);
    for (std::size_t i = 0; i < aux.size(); ++i) {
        if (aux[i].first != ema[i].first || aux[i].second.shape() != ema[i].second.shape()) {
            throw ContractError("ema_update: shape drift at " + aux[i].first);
        }
        auto dst = ema[i].second.mutable_values();
        const auto src = aux[i].second.values();
        for (std::size_t k = 0; k < dst.size(); ++k) dst[k] = alpha * dst[k] + (1.0 - alpha) * src[k];
    }
    return alpha;
}

struct LabeledExample {
    std::vector<Tensor> inputs;  // one [C_j x T_j] tensor per modality
    std::size_t label = 0;
};

struct StepReport {
    double ce = 0.0;
    double distill = 0.0;
    double total = 0.0;
    double alpha = 0.0;  // 0 when EMA is disabled
};

// One optimizer step on a labeled batch: L = mean CE(aux) + λ·mean KL(primary ‖ aux),
// backward into the Auxiliary, SGD, then EMA into the Primary.
inline StepReport finetune_step(CollabState& state, const std::vector<LabeledExample>& batch) {
    if (batch.empty()) throw ContractError("finetune_step: empty labeled batch");
    const double inv = 1.0 / static_cast<double>(batch.size());
    std::vector<Tensor> terms;
    StepReport rep;
    for (const auto& ex : batch) {
        const Tensor logits = state.auxiliary.logits(ex.inputs);
        const Tensor ce = cross_entropy(logits, ex.label);
        rep.ce += ce.item() * inv;
        Tensor term = ce;
        if (state.cfg.collaborative) {
            Tensor teacher;
            {
                NoGradGuard guard;
                teacher = state.primary.logits(ex.inputs);
            }
            const Tensor kl = distill_loss(logits, teacher);
            rep.distill += kl.item() * inv;
            term = add(ce, scale(kl, state.cfg.distill_weight));
        }
        terms.push_back(term);
    }
    const Tensor loss = scale(sum(stack_rows(terms)), inv);
    rep.total = loss.item();
    loss.backward();
    auto params = named_parameters(state.auxiliary);
    state.optimizer.step(params);
    if (state.cfg.collaborative) rep.alpha = ema_update(state);
    else state.step += 1;
    return rep;
}

} // namespace clmm
