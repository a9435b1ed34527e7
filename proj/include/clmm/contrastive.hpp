#pragma once

// Fusion-based contrastive objective: random convex modality combinations
// form P views per sample; views of the same sample are positives, views of
// other samples negatives, and the lowest-similarity positives are treated as
// hard pairs whose numerator similarity is scaled by w_h.

#include <algorithm>
#include <cmath>
#include <limits>
#include <numeric>
#include <vector>

#include "clmm/ops.hpp"
#include "clmm/random.hpp"

namespace clmm {

struct FusionConfig {
    std::size_t views = 3;  // P
    double weight_lo = 0.1;
    double weight_hi = 0.9;
    double temperature = 0.07;
    double hard_ratio = 0.02;   // ρ
    double hard_weight = 0.9;   // w_h

    void validate() const {
        if (views == 0) throw ConfigError("fusion views must be >= 1");
        if (!(weight_lo > 0.0 && weight_lo < weight_hi && weight_hi < 1.0)) {
            throw ConfigError("fusion weight range must satisfy 0 < lo < hi < 1");
        }
        if (!(temperature > 0.0)) throw ConfigError("temperature must be positive");
        if (hard_ratio < 0.0 || hard_ratio > 1.0) throw ConfigError("hard ratio must lie in [0,1]");
        if (!(hard_weight > 0.0 && hard_weight <= 1.0)) throw ConfigError("hard weight must lie in (0,1]");
    }
};

// P x M fusion weights; row k holds a_{jk} for combination k.
struct WeightMatrix {
    std::size_t views = 0;
    std::size_t modalities = 0;
    std::vector<double> a;

    double at(std::size_t k, std::size_t j) const { return a[k * modalities + j]; }
    std::span<const double> row(std::size_t k) const {
        return std::span<const double>(a).subspan(k * modalities, modalities);
    }
};

// Entries uniform in [lo, hi), then each row normalized to sum to 1.
inline WeightMatrix sample_fusion_weights(std::size_t modalities, std::size_t views, double lo, double hi, Rng& rng) {
    if (!(lo < hi)) throw ConfigError("degenerate fusion weight range [" + std::to_string(lo) + ", " + std::to_string(hi) + "]");
    if (modalities == 0 || views == 0) throw ConfigError("fusion weights need at least one modality and one view");
    WeightMatrix w{views, modalities, std::vector<double>(views * modalities)};
    for (std::size_t k = 0; k < views; ++k) {
        double total = 0.0;
        for (std::size_t j = 0; j < modalities; ++j) {
            w.a[k * modalities + j] = rng.uniform(lo, hi);
            total += w.a[k * modalities + j];
        }
        for (std::size_t j = 0; j < modalities; ++j) w.a[k * modalities + j] /= total;
    }
    return w;
}

// V = Σ_j a_j R_j. No renormalization.
inline Tensor fuse(const std::vector<Tensor>& embeddings, std::span<const double> weights) {
    if (embeddings.size() != weights.size()) {
        throw DimensionError("fuse: " + std::to_string(embeddings.size()) + " modality embeddings but " +
                             std::to_string(weights.size()) + " weights");
    }
    return weighted_sum(embeddings, Tensor::vector(std::vector<double>(weights.begin(), weights.end())));
}

struct FusedViewBatch {
    Tensor views;                    // [(P·N) x D_proj], row s = sample s / P, combination s % P
    std::vector<std::size_t> owner;  // raw sample index of each view
    std::size_t num_samples = 0;
    std::size_t views_per_sample = 0;

    std::size_t size() const { return owner.size(); }
    std::vector<std::size_t> positives(std::size_t s) const {
        std::vector<std::size_t> out;
        for (std::size_t p = 0; p < owner.size(); ++p)
            if (p != s && owner[p] == owner[s]) out.push_back(p);
        return out;
    }
};

// embeddings[i][j] is R for sample i, modality j.
inline FusedViewBatch build_views(const std::vector<std::vector<Tensor>>& embeddings, const WeightMatrix& weights) {
    FusedViewBatch batch;
    batch.num_samples = embeddings.size();
    batch.views_per_sample = weights.views;
    std::vector<Tensor> rows;
    for (std::size_t i = 0; i < embeddings.size(); ++i) {
        for (std::size_t k = 0; k < weights.views; ++k) {
            rows.push_back(fuse(embeddings[i], weights.row(k)));
            batch.owner.push_back(i);
        }
    }
    batch.views = stack_rows(rows);
    return batch;
}

// n x n indicator of hard positive pairs (anchor row, positive column).
struct HardPairs {
    std::size_t n = 0;
    std::vector<char> mask;

    bool contains(std::size_t s, std::size_t p) const { return mask[s * n + p] != 0; }
    std::size_t count() const { return static_cast<std::size_t>(std::count(mask.begin(), mask.end(), 1)); }
};

inline double cosine_similarity(std::span<const double> a, std::span<const double> b) {
    double ab = 0.0, aa = 0.0, bb = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) {
        ab += a[i] * b[i];
        aa += a[i] * a[i];
        bb += b[i] * b[i];
    }
    const double denom = std::sqrt(aa * bb);
    return denom > 0.0 ? ab / denom : 0.0;
}

// Number of hard positives for an anchor with `positives` positives:
// floor(ρ·|P(s)|), at least one whenever ρ > 0.
inline std::size_t hard_count(std::size_t positives, double ratio) {
    if (ratio <= 0.0 || positives == 0) return 0;
    const auto k = static_cast<std::size_t>(std::floor(ratio * static_cast<double>(positives) + 1e-12));
    return std::min(positives, std::max<std::size_t>(k, 1));
}

// Per anchor, ranks its positives by cosine similarity (ascending, ties by
// index) and marks the lowest hard_count of them.
inline HardPairs select_hard_positives(const FusedViewBatch& batch, double ratio) {
    const std::size_t n = batch.size();
    const std::size_t d = batch.views.dim(1);
    const auto v = batch.views.values();
    HardPairs hp{n, std::vector<char>(n * n, 0)};
    for (std::size_t s = 0; s < n; ++s) {
        auto pos = batch.positives(s);
        const std::size_t k = hard_count(pos.size(), ratio);
        if (k == 0) continue;
        std::vector<std::pair<double, std::size_t>> ranked;
        for (std::size_t p : pos) ranked.emplace_back(cosine_similarity(v.subspan(s * d, d), v.subspan(p * d, d)), p);
        std::stable_sort(ranked.begin(), ranked.end(),
                         [](const auto& x, const auto& y) { return x.first < y.first; });
        for (std::size_t r = 0; r < k; ++r) hp.mask[s * n + ranked[r].second] = 1;
    }
    return hp;
}

// Weighted multi-positive InfoNCE on a precomputed similarity matrix sim[n x n]:
//   L = Σ_s −1/|P(s)| Σ_{p∈P(s)} [ w(s,p)·sim_sp/τ − log Σ_{a≠s} exp(sim_sa/τ) ]
// with w = w_h on hard pairs and 1 elsewhere. The denominator is unweighted.
inline Tensor weighted_contrastive_from_similarity(const Tensor& sim, const std::vector<std::size_t>& owner,
                                                   const HardPairs& hard, double hard_weight, double temperature) {
    const std::size_t n = owner.size();
    if (sim.rank() != 2 || sim.dim(0) != n || sim.dim(1) != n) {
        throw DimensionError("contrastive: similarity " + shape_str(sim.shape()) + " for " + std::to_string(n) + " views");
    }
    // d loss / d sim, accumulated alongside the value.
    std::vector<double> dsim(n * n, 0.0);
    double loss = 0.0;
    for (std::size_t s = 0; s < n; ++s) {
        double mx = -std::numeric_limits<double>::infinity();
        for (std::size_t a = 0; a < n; ++a)
            if (a != s) mx = std::max(mx, sim[s * n + a] / temperature);
        double z = 0.0;
        for (std::size_t a = 0; a < n; ++a)
            if (a != s) z += std::exp(sim[s * n + a] / temperature - mx);
        const double lse = mx + std::log(z);

        std::size_t npos = 0;
        for (std::size_t p = 0; p < n; ++p)
            if (p != s && owner[p] == owner[s]) ++npos;
        if (npos == 0) continue;
        const double inv = 1.0 / static_cast<double>(npos);
        for (std::size_t p = 0; p < n; ++p) {
            if (p == s || owner[p] != owner[s]) continue;
            const double w = hard.contains(s, p) ? hard_weight : 1.0;
            loss -= inv * (w * sim[s * n + p] / temperature - lse);
            dsim[s * n + p] -= inv * w / temperature;
        }
        // Each of the npos terms contributes +inv·softmax; they sum to one softmax.
        for (std::size_t a = 0; a < n; ++a)
            if (a != s) dsim[s * n + a] += std::exp(sim[s * n + a] / temperature - lse) / temperature;
    }
    return detail::make_result({}, {loss}, {sim}, [sim, dsim = std::move(dsim)](const std::vector<double>& g) {
        if (auto* gs = detail::grad_sink(sim)) {
            for (std::size_t i = 0; i < dsim.size(); ++i) (*gs)[i] += g[0] * dsim[i];
        }
    });
}

// Raw dot-product similarity matrix V·Vᵀ.
inline Tensor view_similarity(const FusedViewBatch& batch) { return matmul(batch.views, transpose(batch.views)); }

inline Tensor contrastive_loss(const FusedViewBatch& batch, const HardPairs& hard, const FusionConfig& cfg) {
    if (batch.num_samples < 2) throw ContractError("contrastive loss needs at least 2 raw samples (no negatives)");
    return weighted_contrastive_from_similarity(view_similarity(batch), batch.owner, hard, cfg.hard_weight,
                                                cfg.temperature);
}

// Selects hard pairs from the current embeddings, then evaluates the loss.
inline Tensor contrastive_loss(const FusedViewBatch& batch, const FusionConfig& cfg) {
    if (batch.num_samples < 2) throw ContractError("contrastive loss needs at least 2 raw samples (no negatives)");
    return contrastive_loss(batch, select_hard_positives(batch, cfg.hard_ratio), cfg);
}

// q_{s,p} = exp(w·V_s·V_p/τ) / Σ_{a≠s} exp(V_s·V_a/τ).
inline double positive_probability(const FusedViewBatch& batch, std::size_t s, std::size_t p, double weight,
                                   double temperature) {
    const std::size_t n = batch.size(), d = batch.views.dim(1);
    const auto v = batch.views.values();
    auto dotp = [&](std::size_t a, std::size_t b) {
        double acc = 0.0;
        for (std::size_t i = 0; i < d; ++i) acc += v[a * d + i] * v[b * d + i];
        return acc;
    };
    double mx = -std::numeric_limits<double>::infinity();
    for (std::size_t a = 0; a < n; ++a)
        if (a != s) mx = std::max(mx, dotp(s, a) / temperature);
    double z = 0.0;
    for (std::size_t a = 0; a < n; ++a)
        if (a != s) z += std::exp(dotp(s, a) / temperature - mx);
    return std::exp(weight * dotp(s, p) / temperature - mx) / z;
}

} // namespace clmm
