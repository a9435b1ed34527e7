#pragma once

// Two-stage training drivers shared by the CLI and the acceptance suite.

#include <functional>
#include <numeric>
#include <string>
#include <vector>

#include "clmm/checkpoint.hpp"
#include "clmm/contrastive.hpp"
#include "clmm/data.hpp"
#include "clmm/finetune.hpp"
#include "clmm/metrics.hpp"

namespace clmm {

struct PretrainConfig {
    double learning_rate = 1e-2;
    double momentum = 0.0;
    std::size_t batch_size = 4;
    std::size_t epochs = 10;
    FusionConfig fusion;

    void validate() const {
        if (batch_size < 2) throw ConfigError("pretrain batch size must be >= 2 (no negatives otherwise)");
        fusion.validate();
    }
};

struct FinetuneConfig {
    double learning_rate = 1e-3;
    double momentum = 0.9;
    std::size_t batch_size = 4;
    std::size_t epochs = 30;
    double ema_cap = 0.9;
    double distill_weight = 0.1;
    bool collaborative = true;
    DualBranchConfig head;

    void validate() const {
        if (batch_size < 1) throw ConfigError("finetune batch size must be >= 1");
        if (!(ema_cap > 0.0 && ema_cap < 1.0)) throw ConfigError("ema cap must lie in (0,1)");
        if (distill_weight < 0.0) throw ConfigError("distill weight must be >= 0");
    }

    CollabConfig collab() const { return {ema_cap, distill_weight, collaborative, SgdConfig{learning_rate, momentum}}; }
};

// Architecture hyperparameters independent of the dataset's modalities.
struct ArchitectureConfig {
    std::vector<std::size_t> cnn_channels{64, 128, 256};
    std::size_t kernel = 5;
    std::size_t stride = 2;
    std::size_t feature_dim = 256;
    std::size_t heads = 4;
    double lambda_init = 0.8;
    std::size_t depth = 1;
    std::size_t proj_hidden = 256;
    std::size_t proj_dim = 128;

    EncoderConfig bind(std::vector<ModalitySpec> modalities) const {
        EncoderConfig e;
        e.modalities = std::move(modalities);
        e.cnn_channels = cnn_channels;
        e.kernel = kernel;
        e.stride = stride;
        e.feature_dim = feature_dim;
        e.heads = heads;
        e.lambda_init = lambda_init;
        e.depth = depth;
        e.proj_hidden = proj_hidden;
        e.proj_dim = proj_dim;
        e.validate();
        return e;
    }
};

// ------------------------------------------------------------------ stage 1

struct PretrainModel {
    EncoderConfig cfg;
    EncoderParams encoder;
    std::vector<ProjectionHead> heads;

    static PretrainModel init(const EncoderConfig& cfg, Rng& rng) {
        PretrainModel m;
        m.cfg = cfg;
        m.encoder = EncoderParams::init(cfg, rng);
        m.heads = init_projection_heads(cfg, rng);
        return m;
    }

    ParamRefs parameter_refs() {
        ParamRefs refs = encoder.parameter_refs();
        append_projection_refs(refs, heads);
        return refs;
    }

    // Unit-norm R_j for each modality of one window.
    std::vector<Tensor> embed(const std::vector<Tensor>& inputs) const {
        std::vector<Tensor> out;
        for (std::size_t j = 0; j < inputs.size(); ++j) out.push_back(project(heads[j], encode(encoder, cfg, inputs[j], j)));
        return out;
    }
};

// Stream ids keep every stochastic consumer independent of the others.
namespace stream {
inline constexpr std::uint64_t pretrain_epoch = 1'000'000;
inline constexpr std::uint64_t pretrain_batch = 2'000'000;
inline constexpr std::uint64_t finetune_epoch = 3'000'000;
inline constexpr std::uint64_t finetune_step = 4'000'000;
inline constexpr std::uint64_t init = 5'000'000;
} // namespace stream

// Contrastive loss of one batch of windows under a fixed set of fusion weights.
inline Tensor pretrain_batch_loss(const PretrainModel& model, const std::vector<MultimodalWindow>& batch,
                                  const WeightMatrix& weights, const FusionConfig& fusion) {
    std::vector<std::vector<Tensor>> embeddings;
    for (const auto& w : batch) embeddings.push_back(model.embed(w.tensors()));
    return contrastive_loss(build_views(embeddings, weights), fusion);
}

// Runs `cfg.epochs` epochs of contrastive training; returns epoch-mean losses.
// A trailing batch with fewer than 2 windows is skipped.
inline std::vector<double> pretrain(PretrainModel& model, const std::vector<MultimodalWindow>& windows,
                                    const PretrainConfig& cfg, const AugmentationConfig& aug, std::uint64_t seed,
                                    const std::function<void(std::size_t, double)>& on_epoch = {}) {
    cfg.validate();
    if (windows.size() < 2) throw ContractError("pretraining needs at least 2 unlabeled windows");
    Sgd opt({cfg.learning_rate, cfg.momentum});
    std::vector<double> losses;
    std::size_t batch_counter = 0;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng order_rng = Rng::derive(seed, stream::pretrain_epoch + epoch);
        std::vector<std::size_t> order(windows.size());
        std::iota(order.begin(), order.end(), 0);
        order_rng.shuffle(order.begin(), order.end());
        double total = 0.0;
        std::size_t batches = 0;
        for (std::size_t start = 0; start + 2 <= order.size(); start += cfg.batch_size) {
            const std::size_t end = std::min(order.size(), start + cfg.batch_size);
            if (end - start < 2) break;
            Rng rng = Rng::derive(seed, stream::pretrain_batch + batch_counter++);
            const auto weights = sample_fusion_weights(model.cfg.num_modalities(), cfg.fusion.views,
                                                       cfg.fusion.weight_lo, cfg.fusion.weight_hi, rng);
            std::vector<MultimodalWindow> batch;
            for (std::size_t i = start; i < end; ++i) batch.push_back(augment(windows[order[i]], aug, rng));
            const Tensor loss = pretrain_batch_loss(model, batch, weights, cfg.fusion);
            total += loss.item();
            ++batches;
            loss.backward();
            auto params = named_parameters(model);
            opt.step(params);
        }
        const double mean = batches ? total / static_cast<double>(batches) : 0.0;
        losses.push_back(mean);
        log::info("pretrain epoch ", epoch + 1, "/", cfg.epochs, " loss ", mean);
        if (on_epoch) on_epoch(epoch, mean);
    }
    return losses;
}

// Quality prior from unit-norm projected embeddings of unlabeled windows.
inline std::vector<double> estimate_qom(const PretrainModel& model, const std::vector<MultimodalWindow>& windows) {
    NoGradGuard guard;
    std::vector<std::vector<std::vector<double>>> emb;
    for (const auto& w : windows) {
        std::vector<std::vector<double>> per;
        for (const auto& r : model.embed(w.tensors())) per.emplace_back(r.values().begin(), r.values().end());
        emb.push_back(std::move(per));
    }
    return qom_prior(emb, model.cfg.num_modalities());
}

// ------------------------------------------------------------------ stage 2

// Fresh stage-2 model whose encoder is copied from the stage-1 encoder.
inline FinetuneModel finetune_model_from(const PretrainModel& pre, const DualBranchConfig& head_cfg, Rng& rng) {
    FinetuneModel m = FinetuneModel::init(pre.cfg, head_cfg, rng);
    PretrainModel src = pre;
    auto from = named_parameters(src.encoder);
    auto to = named_parameters(m.encoder);
    copy_values(from, to);
    return m;
}

inline LabeledExample to_example(const MultimodalWindow& w) {
    if (!w.label) throw ContractError("window '" + w.id + "' has no label");
    return {w.tensors(), *w.label};
}

inline std::size_t steps_per_epoch(std::size_t samples, std::size_t batch) { return (samples + batch - 1) / batch; }

// The labeled batch used at global step t: epoch-level permutation derived
// from (seed, epoch), then the t-th slice of it. Makes resumption exact.
inline std::vector<MultimodalWindow> finetune_batch_at(const std::vector<MultimodalWindow>& train, std::size_t batch,
                                                       std::size_t step, std::uint64_t seed, const AugmentationConfig& aug) {
    const std::size_t spe = steps_per_epoch(train.size(), batch);
    const std::size_t epoch = step / spe, pos = step % spe;
    Rng order_rng = Rng::derive(seed, stream::finetune_epoch + epoch);
    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    order_rng.shuffle(order.begin(), order.end());
    Rng aug_rng = Rng::derive(seed, stream::finetune_step + step);
    std::vector<MultimodalWindow> out;
    for (std::size_t i = pos * batch; i < std::min(train.size(), (pos + 1) * batch); ++i) {
        out.push_back(augment(train[order[i]], aug, aug_rng));
    }
    return out;
}

// Continues collaborative training from state.step until `total_steps`.
inline std::vector<StepReport> finetune(CollabState& state, const std::vector<MultimodalWindow>& train,
                                        const FinetuneConfig& cfg, const AugmentationConfig& aug, std::uint64_t seed,
                                        std::size_t total_steps,
                                        const std::function<void(std::size_t, const StepReport&)>& on_step = {}) {
    cfg.validate();
    if (train.empty()) throw ContractError("fine-tuning needs labeled windows");
    std::vector<StepReport> reports;
    while (state.step < total_steps) {
        const std::size_t t = state.step;
        std::vector<LabeledExample> batch;
        for (const auto& w : finetune_batch_at(train, cfg.batch_size, t, seed, aug)) batch.push_back(to_example(w));
        const StepReport rep = finetune_step(state, batch);
        reports.push_back(rep);
        log::debug("finetune step ", t + 1, " ce ", rep.ce, " distill ", rep.distill, " alpha ", rep.alpha);
        if (on_step) on_step(t, rep);
    }
    return reports;
}

inline ConfusionMatrix evaluate(const FinetuneModel& model, const std::vector<MultimodalWindow>& windows) {
    ConfusionMatrix cm(model.head.num_classes());
    for (const auto& w : windows) {
        if (!w.label) continue;
        cm.add(*w.label, model.predict(w.tensors()));
    }
    return cm;
}

// ------------------------------------------------------------ checkpointing

inline void put_normalizer(Checkpoint& ckpt, const ChannelNormalizer& norm) {
    for (std::size_t j = 0; j < norm.mean.size(); ++j) {
        ckpt.put("norm/mean/m" + std::to_string(j), Tensor::vector(norm.mean[j]));
        ckpt.put("norm/std/m" + std::to_string(j), Tensor::vector(norm.stddev[j]));
    }
}

inline ChannelNormalizer get_normalizer(const Checkpoint& ckpt, std::size_t modalities) {
    ChannelNormalizer n;
    for (std::size_t j = 0; j < modalities; ++j) {
        const auto& m = ckpt.get("norm/mean/m" + std::to_string(j));
        const auto& s = ckpt.get("norm/std/m" + std::to_string(j));
        n.mean.emplace_back(m.values().begin(), m.values().end());
        n.stddev.emplace_back(s.values().begin(), s.values().end());
    }
    return n;
}

inline Checkpoint stage1_checkpoint(PretrainModel& model, const ChannelNormalizer& norm) {
    Checkpoint ckpt;
    ckpt.stage = 1;
    put_params(ckpt, named_parameters(model));
    put_normalizer(ckpt, norm);
    return ckpt;
}

inline void restore_stage1(const Checkpoint& ckpt, PretrainModel& model) {
    if (ckpt.stage != 1) throw IntegrityError("expected a stage-1 checkpoint, got stage " + std::to_string(ckpt.stage));
    auto params = named_parameters(model);
    restore_params(ckpt, params);
}

// θ under "aux/", θ_EMA under "ema/", optimizer velocity under "opt/".
// Without collaboration there is no EMA model and "ema/" repeats θ, so
// "ema/" always holds the inference model.
inline Checkpoint stage2_checkpoint(CollabState& state, const ChannelNormalizer& norm) {
    Checkpoint ckpt;
    ckpt.stage = 2;
    auto aux = named_parameters(state.auxiliary);
    put_params(ckpt, aux, "aux/");
    put_params(ckpt, state.cfg.collaborative ? named_parameters(state.primary) : aux, "ema/");
    for (const auto& [name, t] : aux) {
        const auto it = state.optimizer.velocity().find(name);
        std::vector<double> v = it == state.optimizer.velocity().end() ? std::vector<double>(t.numel(), 0.0) : it->second;
        ckpt.put("opt/" + name, Tensor(t.shape(), std::move(v)));
    }
    ckpt.put("state/step", Tensor::scalar(static_cast<double>(state.step)));
    ckpt.put("state/qom", Tensor::vector(state.auxiliary.qom));
    put_normalizer(ckpt, norm);
    return ckpt;
}

inline void restore_stage2(const Checkpoint& ckpt, CollabState& state) {
    if (ckpt.stage != 2) throw IntegrityError("expected a stage-2 checkpoint, got stage " + std::to_string(ckpt.stage));
    auto aux = named_parameters(state.auxiliary);
    auto ema = named_parameters(state.primary);
    restore_params(ckpt, aux, "aux/");
    restore_params(ckpt, ema, "ema/");
    state.optimizer.velocity().clear();
    for (const auto& [name, t] : aux) {
        const auto& v = ckpt.get("opt/" + name);
        state.optimizer.velocity()[name].assign(v.values().begin(), v.values().end());
    }
    state.step = static_cast<std::size_t>(ckpt.get("state/step").item());
    const auto& q = ckpt.get("state/qom");
    state.auxiliary.qom.assign(q.values().begin(), q.values().end());
    state.primary.qom = state.auxiliary.qom;
}

// Number of classes a stage-2 checkpoint was trained for.
inline std::size_t checkpoint_classes(const Checkpoint& ckpt) { return ckpt.get("ema/head/mlp/b2").numel(); }

} // namespace clmm
