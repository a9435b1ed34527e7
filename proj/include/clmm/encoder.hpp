#pragma once

// Per-modality CNN front-end followed by multi-head differential attention,
// plus the contrastive projection heads used during pretraining.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "clmm/ops.hpp"
#include "clmm/params.hpp"

namespace clmm {

struct ModalitySpec {
    std::string name;
    std::size_t channels = 0;
    std::size_t window_len = 0;
};

struct EncoderConfig {
    std::vector<ModalitySpec> modalities;
    std::vector<std::size_t> cnn_channels{64, 128, 256};  // last entry must equal feature_dim
    std::size_t kernel = 5;
    std::size_t stride = 2;
    std::size_t feature_dim = 256;
    std::size_t heads = 4;
    double lambda_init = 0.8;
    std::size_t depth = 1;  // differential-attention blocks per modality
    std::size_t proj_hidden = 256;
    std::size_t proj_dim = 128;

    std::size_t num_modalities() const { return modalities.size(); }
    std::size_t head_dim() const { return feature_dim / heads; }
    std::size_t padding() const { return kernel / 2; }

    // Sequence length S produced by the conv stack for modality j.
    std::size_t sequence_length(std::size_t j) const {
        std::size_t t = modalities.at(j).window_len;
        for (std::size_t b = 0; b < cnn_channels.size(); ++b) {
            if (t + 2 * padding() < kernel) {
                throw ConfigError("modality '" + modalities[j].name + "': window too short for conv stack");
            }
            t = (t + 2 * padding() - kernel) / stride + 1;
        }
        return t;
    }

    void validate() const {
        if (modalities.size() < 2) throw ConfigError("encoder needs at least 2 modalities");
        if (heads == 0 || feature_dim % heads != 0) {
            throw ConfigError("feature_dim " + std::to_string(feature_dim) + " not divisible by heads " +
                              std::to_string(heads));
        }
        if (!(lambda_init > 0.0 && lambda_init < 1.0)) throw ConfigError("lambda_init must lie in (0,1)");
        if (cnn_channels.empty() || cnn_channels.back() != feature_dim) {
            throw ConfigError("last cnn channel count must equal feature_dim");
        }
        if (kernel == 0 || stride == 0) throw ConfigError("cnn kernel and stride must be positive");
        if (depth == 0) throw ConfigError("encoder depth must be >= 1");
        if (proj_hidden == 0 || proj_dim == 0) throw ConfigError("projection dims must be positive");
        for (const auto& m : modalities) {
            if (m.channels == 0 || m.window_len == 0) {
                throw ConfigError("modality '" + m.name + "' has zero channels or window length");
            }
        }
        // The dual branch concatenates modalities per timestep, so all
        // modalities must land on the same sequence grid.
        const std::size_t s0 = sequence_length(0);
        for (std::size_t j = 1; j < modalities.size(); ++j) {
            if (sequence_length(j) != s0) {
                throw ConfigError("modality '" + modalities[j].name + "' yields sequence length " +
                                  std::to_string(sequence_length(j)) + ", expected " + std::to_string(s0));
            }
        }
    }
};

struct ConvBlock {
    Tensor kernel;  // [C_out x C_in x K]
    Tensor bias;    // [C_out]
};

struct DiffAttentionParams {
    Tensor wq;      // [D x 2D]: per head i, columns [2di, 2di+d) -> Q1, [2di+d, 2d(i+1)) -> Q2
    Tensor wk;      // [D x 2D], same split as wq
    Tensor wv;      // [D x D]: head i uses columns [di, d(i+1))
    Tensor wo;      // [D x D]
    Tensor lambda;  // rank-0 learnable scalar
    Tensor norm_gain;
    Tensor norm_shift;
};

struct ModalityEncoder {
    std::vector<ConvBlock> cnn;
    std::vector<DiffAttentionParams> blocks;
};

struct ProjectionHead {
    Tensor w1, b1;  // D -> hidden
    Tensor w2, b2;  // hidden -> proj_dim
};

using ParamRefs = std::vector<std::pair<std::string, Tensor*>>;

struct EncoderParams {
    std::vector<ModalityEncoder> modalities;

    static EncoderParams init(const EncoderConfig& cfg, Rng& rng) {
        cfg.validate();
        const std::size_t d_model = cfg.feature_dim;
        EncoderParams p;
        for (const auto& spec : cfg.modalities) {
            ModalityEncoder m;
            std::size_t cin = spec.channels;
            for (std::size_t cout : cfg.cnn_channels) {
                m.cnn.push_back({glorot({cout, cin, cfg.kernel}, cin * cfg.kernel, cout * cfg.kernel, rng),
                                 zeros_param({cout})});
                cin = cout;
            }
            for (std::size_t l = 0; l < cfg.depth; ++l) {
                DiffAttentionParams a;
                a.wq = glorot_matrix(d_model, 2 * d_model, rng);
                a.wk = glorot_matrix(d_model, 2 * d_model, rng);
                a.wv = glorot_matrix(d_model, d_model, rng);
                a.wo = glorot_matrix(d_model, d_model, rng);
                a.lambda = Tensor::scalar(cfg.lambda_init, true);
                a.norm_gain = Tensor::full({d_model}, 1.0, true);
                a.norm_shift = zeros_param({d_model});
                m.blocks.push_back(std::move(a));
            }
            p.modalities.push_back(std::move(m));
        }
        return p;
    }

    ParamRefs parameter_refs(const std::string& prefix = "enc") {
        ParamRefs refs;
        for (std::size_t j = 0; j < modalities.size(); ++j) {
            const std::string base = prefix + "/m" + std::to_string(j);
            auto& m = modalities[j];
            for (std::size_t b = 0; b < m.cnn.size(); ++b) {
                refs.emplace_back(base + "/conv" + std::to_string(b) + "/kernel", &m.cnn[b].kernel);
                refs.emplace_back(base + "/conv" + std::to_string(b) + "/bias", &m.cnn[b].bias);
            }
            for (std::size_t l = 0; l < m.blocks.size(); ++l) {
                const std::string ab = base + "/attn" + std::to_string(l);
                auto& a = m.blocks[l];
                refs.emplace_back(ab + "/wq", &a.wq);
                refs.emplace_back(ab + "/wk", &a.wk);
                refs.emplace_back(ab + "/wv", &a.wv);
                refs.emplace_back(ab + "/wo", &a.wo);
                refs.emplace_back(ab + "/lambda", &a.lambda);
                refs.emplace_back(ab + "/norm_gain", &a.norm_gain);
                refs.emplace_back(ab + "/norm_shift", &a.norm_shift);
            }
        }
        return refs;
    }
};

inline std::vector<ProjectionHead> init_projection_heads(const EncoderConfig& cfg, Rng& rng) {
    std::vector<ProjectionHead> heads;
    for (std::size_t j = 0; j < cfg.num_modalities(); ++j) {
        heads.push_back({glorot_matrix(cfg.feature_dim, cfg.proj_hidden, rng), zeros_param({cfg.proj_hidden}),
                         glorot_matrix(cfg.proj_hidden, cfg.proj_dim, rng), zeros_param({cfg.proj_dim})});
    }
    return heads;
}

inline void append_projection_refs(ParamRefs& refs, std::vector<ProjectionHead>& heads) {
    for (std::size_t j = 0; j < heads.size(); ++j) {
        const std::string base = "proj/m" + std::to_string(j);
        refs.emplace_back(base + "/w1", &heads[j].w1);
        refs.emplace_back(base + "/b1", &heads[j].b1);
        refs.emplace_back(base + "/w2", &heads[j].w2);
        refs.emplace_back(base + "/b2", &heads[j].b2);
    }
}

// x[C x T_in] -> F[S x D]. SiLU between conv blocks, none after the last.
inline Tensor cnn_forward(const EncoderParams& params, const EncoderConfig& cfg, const Tensor& x, std::size_t j) {
    const auto& spec = cfg.modalities.at(j);
    if (x.rank() != 2 || x.dim(0) != spec.channels) {
        throw ConfigError("modality '" + spec.name + "' expects " + std::to_string(spec.channels) +
                          " channels, got input " + shape_str(x.shape()));
    }
    if (x.dim(1) != spec.window_len) {
        throw ConfigError("modality '" + spec.name + "' expects window length " + std::to_string(spec.window_len) +
                          ", got " + std::to_string(x.dim(1)));
    }
    const auto& blocks = params.modalities.at(j).cnn;
    Tensor h = x;
    for (std::size_t b = 0; b < blocks.size(); ++b) {
        h = conv1d(h, blocks[b].kernel, blocks[b].bias, cfg.stride, cfg.padding());
        if (b + 1 < blocks.size()) h = silu(h);
    }
    return transpose(h);
}

// (softmax(Q1K1ᵀ/√d) − λ·softmax(Q2K2ᵀ/√d)), the combined attention map.
inline Tensor differential_attention_map(const Tensor& q1, const Tensor& k1, const Tensor& q2, const Tensor& k2,
                                         const Tensor& lambda) {
    const double inv_sqrt_d = 1.0 / std::sqrt(static_cast<double>(q1.dim(1)));
    const Tensor a1 = softmax(scale(matmul(q1, transpose(k1)), inv_sqrt_d));
    const Tensor a2 = softmax(scale(matmul(q2, transpose(k2)), inv_sqrt_d));
    return sub(a1, mul_scalar(a2, lambda));
}

// One head before normalization: DiffAttn = map · V.
inline Tensor differential_attention_head(const Tensor& q1, const Tensor& k1, const Tensor& q2, const Tensor& k2,
                                          const Tensor& v, const Tensor& lambda) {
    return matmul(differential_attention_map(q1, k1, q2, k2, lambda), v);
}

// Multi-head differential attention block: F[S x D] -> Z[S x D]. Each head is
// RMS-normalized, heads are concatenated and projected by W^o, and the result
// is layer-normalized.
inline Tensor diff_attention(const DiffAttentionParams& p, const Tensor& features, std::size_t heads) {
    const std::size_t d_model = features.dim(1);
    const std::size_t d = d_model / heads;
    const Tensor q = matmul(features, p.wq);
    const Tensor k = matmul(features, p.wk);
    const Tensor v = matmul(features, p.wv);
    std::vector<Tensor> outs;
    outs.reserve(heads);
    for (std::size_t i = 0; i < heads; ++i) {
        const std::size_t base = 2 * d * i;
        const Tensor head = differential_attention_head(slice_cols(q, base, base + d), slice_cols(k, base, base + d),
                                                        slice_cols(q, base + d, base + 2 * d),
                                                        slice_cols(k, base + d, base + 2 * d),
                                                        slice_cols(v, d * i, d * (i + 1)), p.lambda);
        outs.push_back(rms_norm_rows(head));
    }
    const Tensor mixed = matmul(concat_cols(outs), p.wo);
    return layer_norm_rows(mixed, p.norm_gain, p.norm_shift);
}

// Unimodal representation Z[S x D] for modality j.
inline Tensor encode(const EncoderParams& params, const EncoderConfig& cfg, const Tensor& x, std::size_t j) {
    Tensor z = cnn_forward(params, cfg, x, j);
    for (const auto& block : params.modalities.at(j).blocks) z = diff_attention(block, z, cfg.heads);
    return z;
}

// R = Norm(P_j(mean-pool(Z))), a unit vector of length proj_dim.
inline Tensor project(const ProjectionHead& head, const Tensor& z) {
    const std::size_t d_model = z.dim(1);
    Tensor pooled = reshape(mean_rows(z), {1, d_model});
    Tensor h = silu(linear(pooled, head.w1, head.b1));
    Tensor out = linear(h, head.w2, head.b2);
    return l2_normalize(reshape(out, {out.numel()}));
}

} // namespace clmm
