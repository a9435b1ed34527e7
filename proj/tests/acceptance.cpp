// Acceptance runner. Prints one PASS/FAIL line per criterion and exits
// non-zero if any criterion fails. `clmm_acceptance N` runs criterion N only.

#include <chrono>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <functional>
#include <map>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include "clmm/config.hpp"
#include "test_util.hpp"

using namespace clmm;
using clmm::testing::gradient_error;
using clmm::testing::random_tensor;

namespace {

struct Verdict {
    bool pass = false;
    std::string detail;
};

std::string fmt(const char* f, double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, f, v);
    return buf;
}

Tensor readout(const Tensor& t, Rng& rng) { return dot(t, random_tensor(t.shape(), rng, -1, 1, false)); }

double seconds_since(std::chrono::steady_clock::time_point t0) {
    return std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
}

// ------------------------------------------------------------ criterion 1

Verdict gradient_fidelity() {
    const auto t0 = std::chrono::steady_clock::now();
    std::map<std::string, double> worst;
    auto record = [&](const std::string& name, double err) { worst[name] = std::max(worst[name], err); };

    EncoderConfig enc;
    enc.modalities = {{"a", 2, 16}, {"b", 3, 16}};
    enc.cnn_channels = {4, 8};
    enc.kernel = 3;
    enc.feature_dim = 8;
    enc.heads = 2;
    enc.proj_hidden = 6;
    enc.proj_dim = 4;

    for (std::uint64_t point = 0; point < 3; ++point) {
        Rng rng(100 + point);
        {
            Tensor x = random_tensor({3, 11}, rng), k = random_tensor({4, 3, 5}, rng), b = random_tensor({4}, rng);
            Rng probe(point);
            const Tensor dir = random_tensor({4, 6}, probe, -1, 1, false);
            record("conv1d", gradient_error([&] { return dot(conv1d(x, k, b, 2, 2), dir); }, {x, k, b}));
        }
        {
            auto params = EncoderParams::init(enc, rng);
            auto& blk = params.modalities[0].blocks[0];
            Tensor f = random_tensor({4, 8}, rng);
            const std::uint64_t s = rng.engine()();
            record("diff_attention", gradient_error(
                                         [&] {
                                             Rng probe(s);
                                             return readout(diff_attention(blk, f, enc.heads), probe);
                                         },
                                         {f, blk.wq, blk.wk, blk.wv, blk.wo, blk.lambda, blk.norm_gain, blk.norm_shift}));
        }
        {
            auto fwd = GruParams::init(4, 3, rng), bwd = GruParams::init(4, 3, rng);
            for (Tensor* b : {&fwd.b_ih, &fwd.b_hh, &bwd.b_ih, &bwd.b_hh}) *b = random_tensor(b->shape(), rng);
            Tensor seq = random_tensor({5, 4}, rng);
            const std::uint64_t s = rng.engine()();
            record("bigru", gradient_error(
                                [&] {
                                    Rng probe(s);
                                    return readout(bigru_forward(seq, fwd, bwd), probe);
                                },
                                {seq, fwd.w_ih, fwd.w_hh, fwd.b_ih, fwd.b_hh, bwd.w_ih, bwd.w_hh, bwd.b_ih, bwd.b_hh}));
        }
        {
            std::vector<std::vector<Tensor>> emb(3);
            std::vector<Tensor> wrt;
            for (auto& sample : emb)
                for (int j = 0; j < 2; ++j) {
                    sample.push_back(random_tensor({4}, rng));
                    wrt.push_back(sample.back());
                }
            const auto w = sample_fusion_weights(2, 3, 0.1, 0.9, rng);
            FusionConfig cfg;
            cfg.temperature = 0.5;
            cfg.hard_ratio = 0.5;
            const auto hard = select_hard_positives(build_views(emb, w), cfg.hard_ratio);
            record("contrastive", gradient_error([&] { return contrastive_loss(build_views(emb, w), hard, cfg); }, wrt));
        }
        {
            Tensor logits = random_tensor({5}, rng, -2, 2);
            record("cross_entropy", gradient_error([&] { return cross_entropy(logits, point % 5); }, {logits}));
            Tensor aux = random_tensor({5}, rng, -2, 2);
            const Tensor primary = random_tensor({5}, rng, -2, 2, false);
            record("distill", gradient_error([&] { return distill_loss(aux, primary); }, {aux}));
        }
        {
            DualBranchConfig head{3, 5, 3, 0.5};
            auto model = FinetuneModel::init(enc, head, rng);
            model.qom = {0.3, 0.7};
            const std::vector<Tensor> inputs{random_tensor({2, 16}, rng, -1, 1, false),
                                             random_tensor({3, 16}, rng, -1, 1, false)};
            std::vector<Tensor> wrt;
            for (auto& [n, t] : model.parameter_refs()) wrt.push_back(*t);
            record("finetune_model",
                   gradient_error([&] { return cross_entropy(model.logits(inputs), point % 3); }, wrt));
        }
    }
    const double elapsed = seconds_since(t0);
    double max_err = 0.0;
    std::ostringstream os;
    for (const auto& [name, err] : worst) {
        max_err = std::max(max_err, err);
        os << name << ' ' << fmt("%.1e", err) << ", ";
    }
    os << "time " << fmt("%.1f", elapsed) << " s";
    return {max_err < 1e-4 && elapsed < 60.0, os.str()};
}

// ------------------------------------------------------------ criterion 2

// Plain-loop softmax(QKᵀ/√d)·V.
std::vector<double> reference_attention(const Tensor& q, const Tensor& k, const Tensor& v) {
    const std::size_t s = q.dim(0), d = q.dim(1), dv = v.dim(1), n = k.dim(0);
    std::vector<double> out(s * dv, 0.0);
    for (std::size_t i = 0; i < s; ++i) {
        std::vector<double> score(n);
        double mx = -1e300;
        for (std::size_t j = 0; j < n; ++j) {
            double acc = 0.0;
            for (std::size_t c = 0; c < d; ++c) acc += q[i * d + c] * k[j * d + c];
            score[j] = acc / std::sqrt(static_cast<double>(d));
            mx = std::max(mx, score[j]);
        }
        double z = 0.0;
        for (double& x : score) z += (x = std::exp(x - mx));
        for (std::size_t j = 0; j < n; ++j)
            for (std::size_t c = 0; c < dv; ++c) out[i * dv + c] += score[j] / z * v[j * dv + c];
    }
    return out;
}

Verdict lambda_zero_reduction() {
    Rng rng(2);
    double worst = 0.0;
    for (int trial = 0; trial < 10; ++trial) {
        const std::size_t s = 2 + trial % 5, d = 1 + trial % 4;
        const Tensor q1 = random_tensor({s, d}, rng, -2, 2, false), k1 = random_tensor({s, d}, rng, -2, 2, false);
        const Tensor q2 = random_tensor({s, d}, rng, -2, 2, false), k2 = random_tensor({s, d}, rng, -2, 2, false);
        const Tensor v = random_tensor({s, d + 1}, rng, -2, 2, false);
        const Tensor got = differential_attention_head(q1, k1, q2, k2, v, Tensor::scalar(0.0));
        const auto want = reference_attention(q1, k1, v);
        for (std::size_t i = 0; i < want.size(); ++i) worst = std::max(worst, std::abs(got[i] - want[i]));
    }
    return {worst < 1e-12, "max abs diff " + fmt("%.1e", worst)};
}

// ------------------------------------------------------------ criterion 3

using Vec = std::vector<double>;

double dotv(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

FusedViewBatch manual_batch(const std::vector<Vec>& rows, std::vector<std::size_t> owner) {
    Vec flat;
    for (const auto& r : rows) flat.insert(flat.end(), r.begin(), r.end());
    FusedViewBatch b;
    b.views = Tensor({rows.size(), rows[0].size()}, flat);
    b.owner = std::move(owner);
    b.num_samples = std::set<std::size_t>(b.owner.begin(), b.owner.end()).size();
    b.views_per_sample = rows.size() / b.num_samples;
    return b;
}

// Hard positives of anchor s: the ⌊ρ|P|⌋ (at least one) positives with lowest cosine.
std::set<std::pair<std::size_t, std::size_t>> oracle_hard(const std::vector<Vec>& v, const std::vector<std::size_t>& owner,
                                                          double ratio) {
    std::set<std::pair<std::size_t, std::size_t>> hard;
    if (ratio <= 0.0) return hard;
    for (std::size_t s = 0; s < v.size(); ++s) {
        std::vector<std::pair<double, std::size_t>> pos;
        for (std::size_t p = 0; p < v.size(); ++p)
            if (p != s && owner[p] == owner[s])
                pos.emplace_back(dotv(v[s], v[p]) / std::sqrt(dotv(v[s], v[s]) * dotv(v[p], v[p])), p);
        if (pos.empty()) continue;
        std::stable_sort(pos.begin(), pos.end(), [](auto& a, auto& b) { return a.first < b.first; });
        const auto k = std::max<std::size_t>(1, static_cast<std::size_t>(std::floor(ratio * pos.size() + 1e-12)));
        for (std::size_t r = 0; r < std::min(k, pos.size()); ++r) hard.insert({s, pos[r].second});
    }
    return hard;
}

double oracle_loss(const std::vector<Vec>& v, const std::vector<std::size_t>& owner,
                   const std::set<std::pair<std::size_t, std::size_t>>& hard, double w_h, double tau) {
    double total = 0.0;
    for (std::size_t s = 0; s < v.size(); ++s) {
        double denom = 0.0;
        for (std::size_t a = 0; a < v.size(); ++a)
            if (a != s) denom += std::exp(dotv(v[s], v[a]) / tau);
        double term = 0.0;
        std::size_t npos = 0;
        for (std::size_t p = 0; p < v.size(); ++p) {
            if (p == s || owner[p] != owner[s]) continue;
            const double w = hard.count({s, p}) ? w_h : 1.0;
            term += std::log(std::exp(w * dotv(v[s], v[p]) / tau) / denom);
            ++npos;
        }
        if (npos) total -= term / static_cast<double>(npos);
    }
    return total;
}

Verdict loss_oracle() {
    Rng rng(3);
    double worst = 0.0;
    std::size_t cases = 0;
    for (std::size_t n = 2; n <= 4; ++n)
        for (std::size_t p = 1; p <= 3; ++p)
            for (double w_h : {1.0, 0.9, 0.5})
                for (double ratio : {0.0, 0.4, 1.0}) {
                    std::vector<Vec> rows;
                    std::vector<std::size_t> owner;
                    for (std::size_t i = 0; i < n; ++i)
                        for (std::size_t k = 0; k < p; ++k) {
                            rows.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
                            owner.push_back(i);
                        }
                    const auto batch = manual_batch(rows, owner);
                    FusionConfig cfg;
                    cfg.temperature = 0.5;
                    cfg.hard_ratio = ratio;
                    cfg.hard_weight = w_h;
                    const double got = contrastive_loss(batch, cfg).item();
                    const double want = oracle_loss(rows, owner, oracle_hard(rows, owner, ratio), w_h, cfg.temperature);
                    worst = std::max(worst, std::abs(got - want));
                    ++cases;
                }
    // One positive and one negative per anchor: each of the two anchors with a
    // positive contributes ln(1 + e⁻¹).
    const auto canon = manual_batch({{1, 0}, {1, 0}, {0, 1}}, {0, 0, 1});
    FusionConfig unit;
    unit.temperature = 1.0;
    unit.hard_ratio = 0.0;
    const double per_anchor = contrastive_loss(canon, unit).item() / 2.0;
    const double canon_err = std::abs(per_anchor - 0.31326);
    const bool ok = worst < 1e-9 && canon_err < 1e-5 && std::abs(per_anchor - std::log1p(std::exp(-1.0))) < 1e-12;
    return {ok, std::to_string(cases) + " batches, max diff " + fmt("%.1e", worst) + ", canonical " +
                    fmt("%.6f", per_anchor)};
}

// ------------------------------------------------------------ criterion 4

Verdict hard_positive_monotonicity() {
    Rng rng(4);
    std::size_t checked = 0, violations = 0;
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<Vec> rows;
        std::vector<std::size_t> owner;
        for (std::size_t i = 0; i < 4; ++i)
            for (std::size_t k = 0; k < 3; ++k) {
                rows.push_back({rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1), rng.uniform(0, 1)});
                owner.push_back(i);
            }
        const auto batch = manual_batch(rows, owner);
        const auto hard = select_hard_positives(batch, 0.5);
        const double tau = trial % 2 ? 0.07 : 0.5;
        for (std::size_t s = 0; s < batch.size(); ++s)
            for (std::size_t p = 0; p < batch.size(); ++p) {
                if (!hard.contains(s, p)) continue;
                ++checked;
                if (!(positive_probability(batch, s, p, 0.9, tau) < positive_probability(batch, s, p, 1.0, tau)))
                    ++violations;
            }
    }
    return {checked > 0 && violations == 0,
            std::to_string(checked) + " hard pairs, " + std::to_string(violations) + " violations"};
}

// ------------------------------------------------------- criteria 5 and 6

struct TinyCollab {
    CollabState state;
    std::vector<LabeledExample> batch;
};

TinyCollab tiny_collab(std::uint64_t seed) {
    EncoderConfig enc;
    enc.modalities = {{"a", 2, 16}, {"b", 3, 16}};
    enc.cnn_channels = {4, 8};
    enc.kernel = 3;
    enc.feature_dim = 8;
    enc.heads = 2;
    enc.proj_hidden = 6;
    enc.proj_dim = 4;
    Rng rng(seed);
    auto model = FinetuneModel::init(enc, DualBranchConfig{3, 5, 3, 0.5}, rng);
    TinyCollab t{CollabState::from(model, CollabConfig{}), {}};
    for (std::size_t i = 0; i < 3; ++i) {
        t.batch.push_back({{random_tensor({2, 16}, rng, -1, 1, false), random_tensor({3, 16}, rng, -1, 1, false)}, i});
    }
    return t;
}

Verdict ema_schedule() {
    auto t = tiny_collab(5);
    bool exact = true;
    std::ostringstream os;
    for (std::size_t step = 1; step <= 12; ++step) {
        const double alpha = finetune_step(t.state, t.batch).alpha;
        exact = exact && alpha == std::min(1.0 - 1.0 / (static_cast<double>(step) + 1.0), 0.9);
        if (step <= 4 || step >= 8) os << fmt("%.4f", alpha) << (step < 12 ? " " : "");
        if (step == 4) os << "... ";
    }
    const bool anchors = std::abs(ema_momentum(1, 0.9) - 0.5) < 1e-15 &&
                         std::abs(ema_momentum(2, 0.9) - 2.0 / 3.0) < 1e-15 && ema_momentum(8, 0.9) < 0.9 &&
                         ema_momentum(9, 0.9) == 0.9;
    return {exact && anchors, os.str()};
}

Verdict distill_identity() {
    auto t = tiny_collab(6);
    const double at_init = finetune_step(t.state, t.batch).distill;
    Rng rng(6);
    double min_kl = 1e300;
    for (int i = 0; i < 100; ++i) {
        const std::size_t k = 2 + i % 6;
        const double spread = 0.5 + i % 5;
        min_kl = std::min(min_kl, distill_loss(random_tensor({k}, rng, -spread, spread, false),
                                               random_tensor({k}, rng, -spread, spread, false))
                                      .item());
    }
    return {std::abs(at_init) <= 1e-12 && min_kl >= 0.0,
            "at init " + fmt("%.1e", at_init) + ", min over 100 pairs " + fmt("%.3e", min_kl)};
}

// ------------------------------------------------------- criteria 7 and 8

RunConfig desk_config() { return load_run_config(std::filesystem::path(CLMM_SOURCE_DIR) / "configs" / "desk.json"); }

struct Prepared {
    SplitResult parts;
    EncoderConfig enc;
    DualBranchConfig head;
    ChannelNormalizer norm;
    double oracle = 0.0;
};

Prepared prepare(const RunConfig& cfg, std::uint64_t seed) {
    Prepared p;
    Rng rng = Rng::derive(seed, 7);
    const auto data = synth_generate(cfg.synth, rng);
    p.oracle = clmm::testing::spectral_oracle_accuracy(data.windows, cfg.synth.class_freqs);
    p.parts = split(data.windows, cfg.split, rng);
    auto fit = p.parts.unlabeled;
    fit.insert(fit.end(), p.parts.train.begin(), p.parts.train.end());
    p.norm = ChannelNormalizer::fit(fit);
    p.norm.apply(p.parts.unlabeled);
    p.norm.apply(p.parts.train);
    p.norm.apply(p.parts.test);
    p.enc = cfg.encoder.bind(data.manifest.modality_specs());
    p.head = cfg.finetune.head;
    p.head.num_classes = data.manifest.classes.size();
    return p;
}

std::size_t total_steps(const RunConfig& cfg, const Prepared& p) {
    return cfg.finetune.epochs * steps_per_epoch(p.parts.train.size(), cfg.finetune.batch_size);
}

PretrainModel pretrained(const RunConfig& cfg, const Prepared& p, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, stream::init);
    auto model = PretrainModel::init(p.enc, rng);
    pretrain(model, p.parts.unlabeled, cfg.pretrain, cfg.augmentation, seed);
    return model;
}

CollabState finetuned(const RunConfig& cfg, const Prepared& p, const PretrainModel& pre, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, stream::init + 1);
    auto model = finetune_model_from(pre, p.head, rng);
    model.qom = estimate_qom(pre, p.parts.unlabeled);
    FinetuneConfig fc = cfg.finetune;
    fc.head = p.head;
    auto state = CollabState::from(model, fc.collab());
    finetune(state, p.parts.train, fc, cfg.augmentation, seed, total_steps(cfg, p));
    return state;
}

double test_accuracy(const CollabState& s, const Prepared& p) { return accuracy(evaluate(s.inference_model(), p.parts.test)); }

double scratch_baseline(const RunConfig& cfg, const Prepared& p, std::uint64_t seed) {
    Rng rng = Rng::derive(seed, stream::init + 2);
    auto model = FinetuneModel::init(p.enc, p.head, rng);
    FinetuneConfig fc = cfg.finetune;
    fc.head = p.head;
    fc.collaborative = false;
    auto state = CollabState::from(model, fc.collab());
    finetune(state, p.parts.train, fc, cfg.augmentation, seed, total_steps(cfg, p));
    return test_accuracy(state, p);
}

const std::vector<std::uint64_t> kSeeds{1, 2, 3};

double mean_of(const std::vector<double>& v) {
    double s = 0.0;
    for (double x : v) s += x;
    return s / static_cast<double>(v.size());
}

std::string listing(const std::vector<double>& v) {
    std::string s;
    for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "/" : "") + fmt("%.2f", v[i]);
    return s;
}

Verdict end_to_end() {
    const auto t0 = std::chrono::steady_clock::now();
    const RunConfig cfg = desk_config();
    std::vector<double> full, base;
    double min_oracle = 1.0;
    bool sizes_ok = true;
    for (auto seed : kSeeds) {
        const auto p = prepare(cfg, seed);
        min_oracle = std::min(min_oracle, p.oracle);
        sizes_ok = sizes_ok && p.parts.unlabeled.size() == 400 && p.parts.train.size() == 25 && p.parts.test.size() == 100;
        if (p.oracle < 0.99) continue;
        full.push_back(test_accuracy(finetuned(cfg, p, pretrained(cfg, p, seed), seed), p));
        base.push_back(scratch_baseline(cfg, p, seed));
    }
    const std::string head = "oracle min " + fmt("%.3f", min_oracle);
    if (min_oracle < 0.99 || !sizes_ok) return {false, head + (sizes_ok ? "" : ", unexpected split sizes")};
    const double f = mean_of(full), b = mean_of(base);
    return {f >= 0.85 && f - b >= 0.05, head + ", full " + listing(full) + " mean " + fmt("%.3f", f) + ", baseline " +
                                            listing(base) + " mean " + fmt("%.3f", b) + ", " +
                                            fmt("%.0f s", seconds_since(t0))};
}

Verdict ablation_direction() {
    const RunConfig cfg = desk_config();
    RunConfig no_hard = cfg;
    no_hard.pretrain.fusion.hard_weight = 1.0;
    RunConfig no_collab = cfg;
    no_collab.finetune.collaborative = false;
    std::vector<double> full, wh1, solo;
    for (auto seed : kSeeds) {
        const auto p = prepare(cfg, seed);
        const auto pre = pretrained(cfg, p, seed);
        full.push_back(test_accuracy(finetuned(cfg, p, pre, seed), p));
        solo.push_back(test_accuracy(finetuned(no_collab, p, pre, seed), p));
        wh1.push_back(test_accuracy(finetuned(no_hard, p, pretrained(no_hard, p, seed), seed), p));
    }
    const double d_hard = mean_of(wh1) - mean_of(full), d_collab = mean_of(solo) - mean_of(full);
    const double noise = 0.01 + 1e-12;
    return {d_hard <= noise && d_collab <= noise,
            "full " + listing(full) + ", w_h=1 " + listing(wh1) + " delta " + fmt("%+.3f", d_hard) +
                ", no collaboration " + listing(solo) + " delta " + fmt("%+.3f", d_collab)};
}

// ------------------------------------------------------------ criterion 9

MultimodalWindow random_window(Rng& rng) {
    MultimodalWindow w;
    for (std::size_t len : {32u, 48u, 20u}) {
        Signal s(2, len);
        for (double& v : s.values) v = rng.normal();
        w.modalities.push_back(s);
    }
    return w;
}

double max_diff(const MultimodalWindow& a, const MultimodalWindow& b) {
    double worst = 0.0;
    for (std::size_t j = 0; j < a.modalities.size(); ++j)
        for (std::size_t i = 0; i < a.modalities[j].values.size(); ++i)
            worst = std::max(worst, std::abs(a.modalities[j].values[i] - b.modalities[j].values[i]));
    return worst;
}

Verdict augmentation_consistency() {
    Rng rng(9);
    AugmentationConfig cfg;
    std::size_t draws = 0, mismatched = 0;
    for (int i = 0; i < 50; ++i) {
        const auto w = random_window(rng);
        for (bool warp : {true, false}) {
            AugmentTrace trace;
            const auto out = warp ? time_warp(w, cfg, rng, &trace) : random_crop(w, cfg, rng, &trace);
            ++draws;
            if (trace.per_modality.size() != w.modalities.size()) ++mismatched;
            for (const auto& d : trace.per_modality)
                if (d != trace.per_modality.front()) {
                    ++mismatched;
                    break;
                }
            if (out.modalities[2].length != w.modalities[2].length) ++mismatched;
        }
    }
    AugmentationConfig identity;
    identity.warp_lo = identity.warp_hi = 1.0;
    identity.crop_fraction = 1.0;
    double worst = 0.0;
    for (int i = 0; i < 20; ++i) {
        const auto w = random_window(rng);
        worst = std::max(worst, max_diff(time_warp(w, identity, rng), w));
        worst = std::max(worst, max_diff(random_crop(w, identity, rng), w));
    }
    return {mismatched == 0 && worst < 1e-9, std::to_string(draws) + " draws, " + std::to_string(mismatched) +
                                                 " inconsistent, identity max diff " + fmt("%.1e", worst)};
}

// ----------------------------------------------------------- criterion 10

Verdict metric_correctness() {
    const ConfusionMatrix uniform(2, {2, 3, 3, 2});
    const ConfusionMatrix skewed(2, {3, 1, 2, 4});
    const double acc = accuracy(uniform), f1 = macro_f1(skewed), kappa = cohen_kappa(uniform);
    bool ok = std::abs(acc - 0.4) < 1e-9 && std::abs(f1 - (2.0 / 3.0 + 8.0 / 11.0) / 2.0) < 1e-9 &&
              std::abs(f1 - 0.69697) < 1e-5 && std::abs(kappa + 0.2) < 1e-9;
    // Truth and prediction independent: counts are an outer product of marginals.
    Rng rng(10);
    double worst = 0.0;
    for (int trial = 0; trial < 20; ++trial) {
        const std::size_t k = 2 + trial % 4;
        std::vector<std::uint64_t> r(k), c(k), counts;
        for (auto& x : r) x = 1 + rng.index(6);
        for (auto& x : c) x = 1 + rng.index(6);
        for (auto a : r)
            for (auto b : c) counts.push_back(a * b);
        worst = std::max(worst, std::abs(cohen_kappa(ConfusionMatrix(k, counts))));
    }
    ok = ok && worst < 1e-9;
    return {ok, "accuracy " + fmt("%.4f", acc) + ", macro F1 " + fmt("%.5f", f1) + ", kappa " + fmt("%.4f", kappa) +
                    ", outer-product max |kappa| " + fmt("%.1e", worst)};
}

// ----------------------------------------------------------- criterion 11

RunConfig tiny_config() { return load_run_config(std::filesystem::path(CLMM_SOURCE_DIR) / "configs" / "tiny.json"); }

struct TinyRun {
    Prepared prep;
    CollabState state;
    ConfusionMatrix cm{1};
};

TinyRun tiny_run(const RunConfig& cfg) {
    TinyRun r{prepare(cfg, cfg.seed), {}, ConfusionMatrix(1)};
    r.state = finetuned(cfg, r.prep, pretrained(cfg, r.prep, cfg.seed), cfg.seed);
    r.cm = evaluate(r.state.inference_model(), r.prep.parts.test);
    return r;
}

Verdict determinism_and_serialization() {
    const RunConfig cfg = tiny_config();
    auto a = tiny_run(cfg);
    const auto b = tiny_run(cfg);
    const bool same_metrics = a.cm.counts() == b.cm.counts() && accuracy(a.cm) == accuracy(b.cm) &&
                              macro_f1(a.cm) == macro_f1(b.cm) && cohen_kappa(a.cm) == cohen_kappa(b.cm);

    const auto bytes = encode_checkpoint(stage2_checkpoint(a.state, a.prep.norm));
    const auto back = decode_checkpoint(bytes);
    Rng rng(0);
    auto restored = FinetuneModel::init(a.prep.enc, a.prep.head, rng);
    auto params = named_parameters(restored);
    restore_params(back, params, "ema/");
    const auto& q = back.get("state/qom");
    restored.qom.assign(q.values().begin(), q.values().end());
    double worst = 0.0;
    {
        NoGradGuard guard;
        for (const auto& w : a.prep.parts.test) {
            const Tensor x = a.state.inference_model().logits(w.tensors());
            const Tensor y = restored.logits(w.tensors());
            for (std::size_t i = 0; i < x.numel(); ++i) worst = std::max(worst, std::abs(x[i] - y[i]));
        }
    }
    const bool reencoded = encode_checkpoint(back) == bytes;

    std::size_t rejected = 0, tried = 0;
    for (std::size_t at : {std::size_t{5}, bytes.size() / 3, bytes.size() / 2, bytes.size() - 2}) {
        auto bad = bytes;
        bad[at] ^= 0x10;
        ++tried;
        try {
            decode_checkpoint(bad);
        } catch (const IntegrityError& e) {
            if (std::string(e.what()).find("CRC") != std::string::npos) ++rejected;
        }
    }
    return {same_metrics && worst <= 1e-12 && reencoded && rejected == tried,
            std::string("repeat run ") + (same_metrics ? "identical" : "differs") + ", round-trip logit diff " +
                fmt("%.1e", worst) + ", corrupted files rejected " + std::to_string(rejected) + "/" +
                std::to_string(tried)};
}

struct Criterion {
    int id;
    const char* name;
    std::function<Verdict()> run;
};

} // namespace

int main(int argc, char** argv) {
    const std::vector<Criterion> all{
        {1, "gradient fidelity", gradient_fidelity},
        {2, "lambda=0 reduction", lambda_zero_reduction},
        {3, "loss oracle equivalence", loss_oracle},
        {4, "hard-positive monotonicity", hard_positive_monotonicity},
        {5, "EMA schedule", ema_schedule},
        {6, "distillation identity", distill_identity},
        {7, "end-to-end synthetic benefit", end_to_end},
        {8, "ablation direction", ablation_direction},
        {9, "augmentation consistency", augmentation_consistency},
        {10, "metric correctness", metric_correctness},
        {11, "determinism and serialization", determinism_and_serialization},
    };
    const int only = argc > 1 ? std::atoi(argv[1]) : 0;
    int failures = 0;
    for (const auto& c : all) {
        if (only && c.id != only) continue;
        Verdict v;
        try {
            v = c.run();
        } catch (const std::exception& e) {
            v = {false, std::string("exception: ") + e.what()};
        }
        std::printf("criterion %2d %-30s %s  %s\n", c.id, c.name, v.pass ? "PASS" : "FAIL", v.detail.c_str());
        std::fflush(stdout);
        failures += v.pass ? 0 : 1;
    }
    return failures == 0 ? 0 : 1;
}
