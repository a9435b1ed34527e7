#include <gtest/gtest.h>

#include <algorithm>
#include <cmath>
#include <numeric>
#include <set>

#include "clmm/contrastive.hpp"
#include "test_util.hpp"

using namespace clmm;
using clmm::testing::gradient_error;
using clmm::testing::random_tensor;

namespace {

using Vec = std::vector<double>;

double dotv(const Vec& a, const Vec& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

std::vector<Vec> rows_of(const Tensor& t) {
    std::vector<Vec> out(t.dim(0));
    for (std::size_t r = 0; r < t.dim(0); ++r)
        for (std::size_t c = 0; c < t.dim(1); ++c) out[r].push_back(t.at(r, c));
    return out;
}

// Hard pairs by explicit sorting of each anchor's positives, written
// independently of the library.
std::set<std::pair<std::size_t, std::size_t>> oracle_hard(const std::vector<Vec>& v,
                                                          const std::vector<std::size_t>& owner, double rho) {
    std::set<std::pair<std::size_t, std::size_t>> hard;
    for (std::size_t s = 0; s < v.size(); ++s) {
        std::vector<std::pair<double, std::size_t>> pos;
        for (std::size_t p = 0; p < v.size(); ++p) {
            if (p == s || owner[p] != owner[s]) continue;
            pos.emplace_back(dotv(v[s], v[p]) / std::sqrt(dotv(v[s], v[s]) * dotv(v[p], v[p])), p);
        }
        if (rho <= 0.0 || pos.empty()) continue;
        std::size_t k = static_cast<std::size_t>(std::floor(rho * static_cast<double>(pos.size()) + 1e-12));
        k = std::clamp<std::size_t>(k, 1, pos.size());
        std::stable_sort(pos.begin(), pos.end(), [](auto& a, auto& b) { return a.first < b.first; });
        for (std::size_t r = 0; r < k; ++r) hard.insert({s, pos[r].second});
    }
    return hard;
}

// Direct transcription of the weighted loss with plain exp/log, no stabilization.
double oracle_loss(const std::vector<Vec>& v, const std::vector<std::size_t>& owner,
                   const std::set<std::pair<std::size_t, std::size_t>>& hard, double w_h, double tau) {
    double total = 0.0;
    for (std::size_t s = 0; s < v.size(); ++s) {
        double denom = 0.0;
        for (std::size_t a = 0; a < v.size(); ++a)
            if (a != s) denom += std::exp(dotv(v[s], v[a]) / tau);
        std::vector<std::size_t> pos;
        for (std::size_t p = 0; p < v.size(); ++p)
            if (p != s && owner[p] == owner[s]) pos.push_back(p);
        double term = 0.0;
        for (std::size_t p : pos) {
            const double w = hard.count({s, p}) ? w_h : 1.0;
            term += std::log(std::exp(w * dotv(v[s], v[p]) / tau) / denom);
        }
        if (!pos.empty()) total += -term / static_cast<double>(pos.size());
    }
    return total;
}

FusedViewBatch manual_batch(const std::vector<Vec>& views, std::vector<std::size_t> owner, bool requires_grad = false) {
    std::vector<double> flat;
    for (const auto& r : views) flat.insert(flat.end(), r.begin(), r.end());
    FusedViewBatch b;
    b.views = Tensor({views.size(), views[0].size()}, flat, requires_grad);
    b.owner = std::move(owner);
    b.num_samples = std::set<std::size_t>(b.owner.begin(), b.owner.end()).size();
    b.views_per_sample = views.size() / b.num_samples;
    return b;
}

std::vector<std::vector<Tensor>> random_embeddings(std::size_t n, std::size_t m, std::size_t d, Rng& rng,
                                                   double lo = -1.0) {
    std::vector<std::vector<Tensor>> out(n);
    for (auto& sample : out)
        for (std::size_t j = 0; j < m; ++j) sample.push_back(l2_normalize(random_tensor({d}, rng, lo, 1.0, false)));
    return out;
}

HardPairs to_mask(const std::set<std::pair<std::size_t, std::size_t>>& hard, std::size_t n) {
    HardPairs hp{n, std::vector<char>(n * n, 0)};
    for (auto [s, p] : hard) hp.mask[s * n + p] = 1;
    return hp;
}

} // namespace

TEST(FusionWeights, SingleModalityIsOne) {
    Rng rng(1);
    const auto w = sample_fusion_weights(1, 4, 0.1, 0.9, rng);
    for (double a : w.a) EXPECT_DOUBLE_EQ(a, 1.0);
}

TEST(FusionWeights, RowsSumToOne) {
    Rng rng(2);
    for (int trial = 0; trial < 20; ++trial) {
        const auto w = sample_fusion_weights(3, 5, 0.1, 0.9, rng);
        for (std::size_t k = 0; k < 5; ++k) {
            const auto row = w.row(k);
            EXPECT_NEAR(std::accumulate(row.begin(), row.end(), 0.0), 1.0, 1e-9);
        }
    }
}

TEST(FusionWeights, DeterministicUnderSeed) {
    Rng a(3), b(3);
    EXPECT_EQ(sample_fusion_weights(3, 3, 0.1, 0.9, a).a, sample_fusion_weights(3, 3, 0.1, 0.9, b).a);
}

TEST(FusionWeights, DegenerateRangeRejected) {
    Rng rng(4);
    EXPECT_THROW(sample_fusion_weights(2, 3, 0.5, 0.5, rng), ConfigError);
    EXPECT_THROW(sample_fusion_weights(2, 3, 0.9, 0.1, rng), ConfigError);
}

TEST(Fuse, OneHotSelectsModality) {
    const Tensor r1 = Tensor::vector({0.6, 0.8}), r2 = Tensor::vector({1, 0});
    const std::vector<double> a{1.0, 0.0};
    const Tensor v = fuse({r1, r2}, a);
    EXPECT_EQ(v[0], 0.6);
    EXPECT_EQ(v[1], 0.8);
}

TEST(Fuse, EqualWeightsAverage) {
    const std::vector<double> a{0.5, 0.5};
    const Tensor v = fuse({Tensor::vector({1, 0}), Tensor::vector({0, 1})}, a);
    EXPECT_DOUBLE_EQ(v[0], 0.5);
    EXPECT_DOUBLE_EQ(v[1], 0.5);
}

TEST(Fuse, LinearInEachModality) {
    Rng rng(5);
    const std::vector<double> a{0.3, 0.7};
    for (int trial = 0; trial < 5; ++trial) {
        const Tensor x = random_tensor({4}, rng, -1, 1, false), y = random_tensor({4}, rng, -1, 1, false);
        const Tensor r2 = random_tensor({4}, rng, -1, 1, false);
        const double c1 = rng.uniform(-2, 2), c2 = rng.uniform(-2, 2);
        const Tensor combo = add(scale(x, c1), scale(y, c2));
        // fuse(c1·x + c2·y, r2) − a2·r2 == c1·(fuse(x, r2) − a2·r2) + c2·(fuse(y, r2) − a2·r2)
        const Tensor lhs = sub(fuse({combo, r2}, a), scale(r2, a[1]));
        const Tensor rhs = add(scale(sub(fuse({x, r2}, a), scale(r2, a[1])), c1),
                               scale(sub(fuse({y, r2}, a), scale(r2, a[1])), c2));
        for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(lhs[i], rhs[i], 1e-12);
    }
}

TEST(Fuse, ModalityCountMismatch) {
    const std::vector<double> a{0.2, 0.3, 0.5};
    EXPECT_THROW(fuse({Tensor::vector({1, 0}), Tensor::vector({0, 1})}, a), DimensionError);
}

TEST(BuildViews, PositiveStructure) {
    Rng rng(6);
    const auto w = sample_fusion_weights(2, 3, 0.1, 0.9, rng);
    const auto batch = build_views(random_embeddings(4, 2, 5, rng), w);
    ASSERT_EQ(batch.size(), 12u);
    for (std::size_t s = 0; s < batch.size(); ++s) {
        const auto pos = batch.positives(s);
        EXPECT_EQ(pos.size(), 2u);
        for (std::size_t p : pos) EXPECT_EQ(batch.owner[p], batch.owner[s]);
    }
}

TEST(HardPositives, ZeroRatioSelectsNothing) {
    Rng rng(7);
    const auto batch = build_views(random_embeddings(3, 2, 4, rng), sample_fusion_weights(2, 3, 0.1, 0.9, rng));
    EXPECT_EQ(select_hard_positives(batch, 0.0).count(), 0u);
}

TEST(HardPositives, FullRatioSelectsEveryPositive) {
    Rng rng(8);
    const auto batch = build_views(random_embeddings(3, 2, 4, rng), sample_fusion_weights(2, 3, 0.1, 0.9, rng));
    const auto hp = select_hard_positives(batch, 1.0);
    EXPECT_EQ(hp.count(), batch.size() * 2);
    for (std::size_t s = 0; s < batch.size(); ++s)
        for (std::size_t p : batch.positives(s)) EXPECT_TRUE(hp.contains(s, p));
}

TEST(HardPositives, HalfRatioPicksLowestSimilarityPositive) {
    Rng rng(9);
    for (int trial = 0; trial < 10; ++trial) {
        const auto batch = build_views(random_embeddings(2, 3, 6, rng), sample_fusion_weights(3, 3, 0.1, 0.9, rng));
        const auto hp = select_hard_positives(batch, 0.5);
        const auto v = rows_of(batch.views);
        for (std::size_t s = 0; s < batch.size(); ++s) {
            const auto pos = batch.positives(s);
            ASSERT_EQ(pos.size(), 2u);
            auto cos = [&](std::size_t p) { return dotv(v[s], v[p]) / std::sqrt(dotv(v[s], v[s]) * dotv(v[p], v[p])); };
            const std::size_t lowest = cos(pos[0]) <= cos(pos[1]) ? pos[0] : pos[1];
            const std::size_t other = lowest == pos[0] ? pos[1] : pos[0];
            EXPECT_TRUE(hp.contains(s, lowest));
            EXPECT_FALSE(hp.contains(s, other));
        }
    }
}

TEST(HardPositives, CountRounding) {
    EXPECT_EQ(hard_count(2, 0.02), 1u);
    EXPECT_EQ(hard_count(10, 0.25), 2u);
    EXPECT_EQ(hard_count(4, 0.0), 0u);
    EXPECT_EQ(hard_count(0, 0.5), 0u);
    EXPECT_EQ(hard_count(3, 1.0), 3u);
}

TEST(ContrastiveLoss, CanonicalOnePositiveOneNegative) {
    // Anchors 0 and 1 each see one positive at similarity 1 and one negative at 0.
    const auto batch = manual_batch({{1, 0}, {1, 0}, {0, 1}}, {0, 0, 1});
    const HardPairs none{3, std::vector<char>(9, 0)};
    const double loss = weighted_contrastive_from_similarity(view_similarity(batch), batch.owner, none, 0.9, 1.0).item();
    EXPECT_NEAR(loss / 2.0, std::log(1.0 + std::exp(-1.0)), 1e-12);
    EXPECT_NEAR(loss / 2.0, 0.31326, 1e-5);
}

TEST(ContrastiveLoss, WeightedPositiveRaisesLoss) {
    const auto batch = manual_batch({{1, 0}, {1, 0}, {0, 1}}, {0, 0, 1});
    const HardPairs none{3, std::vector<char>(9, 0)};
    const HardPairs hard = to_mask({{0, 1}, {1, 0}}, 3);
    const double base = weighted_contrastive_from_similarity(view_similarity(batch), batch.owner, none, 0.9, 1.0).item();
    const double weighted = weighted_contrastive_from_similarity(view_similarity(batch), batch.owner, hard, 0.9, 1.0).item();
    const auto v = rows_of(batch.views);
    EXPECT_NEAR(weighted, oracle_loss(v, batch.owner, {{0, 1}, {1, 0}}, 0.9, 1.0), 1e-12);
    EXPECT_NEAR(weighted / 2.0, std::log(1.0 + std::exp(1.0)) - 0.9, 1e-12);
    EXPECT_GT(weighted, base);
}

TEST(ContrastiveLoss, IdenticalViewsGiveLogOfCandidates) {
    const std::vector<Vec> same(6, Vec{0.6, 0.8});
    const auto batch = manual_batch(same, {0, 0, 0, 1, 1, 1});
    FusionConfig cfg;
    cfg.temperature = 1.0;
    cfg.hard_weight = 1.0;
    EXPECT_NEAR(contrastive_loss(batch, cfg).item(), 6.0 * std::log(5.0), 1e-12);
}

TEST(ContrastiveLoss, MatchesBruteForceOracle) {
    Rng rng(10);
    for (std::size_t n = 2; n <= 4; ++n) {
        for (std::size_t p = 1; p <= 3; ++p) {
            for (double w_h : {1.0, 0.9, 0.5}) {
                for (double rho : {0.0, 0.02, 0.5, 1.0}) {
                    FusionConfig cfg;
                    cfg.views = p;
                    cfg.hard_weight = w_h;
                    cfg.hard_ratio = rho;
                    cfg.temperature = rng.uniform(0.07, 1.0);
                    const auto batch =
                        build_views(random_embeddings(n, 3, 5, rng), sample_fusion_weights(3, p, 0.1, 0.9, rng));
                    const auto v = rows_of(batch.views);
                    const auto hard = oracle_hard(v, batch.owner, rho);
                    const auto lib_hard = select_hard_positives(batch, rho);
                    EXPECT_EQ(lib_hard.count(), hard.size());
                    for (auto [s, q] : hard) EXPECT_TRUE(lib_hard.contains(s, q));
                    EXPECT_NEAR(contrastive_loss(batch, cfg).item(),
                                oracle_loss(v, batch.owner, hard, w_h, cfg.temperature), 1e-9)
                        << "N=" << n << " P=" << p << " w_h=" << w_h << " rho=" << rho;
                }
            }
        }
    }
}

TEST(ContrastiveLoss, UnitWeightOrZeroRatioIsUnweighted) {
    Rng rng(11);
    const auto batch = build_views(random_embeddings(3, 2, 4, rng), sample_fusion_weights(2, 3, 0.1, 0.9, rng));
    const auto v = rows_of(batch.views);
    FusionConfig a;
    a.hard_weight = 1.0;
    a.hard_ratio = 0.5;
    FusionConfig b;
    b.hard_ratio = 0.0;
    const double plain = oracle_loss(v, batch.owner, {}, 1.0, a.temperature);
    EXPECT_NEAR(contrastive_loss(batch, a).item(), plain, 1e-9);
    EXPECT_NEAR(contrastive_loss(batch, b).item(), plain, 1e-9);
}

TEST(ContrastiveLoss, HardWeightLowersPositiveProbability) {
    Rng rng(12);
    for (int trial = 0; trial < 10; ++trial) {
        // Nonnegative embeddings keep every positive similarity above zero.
        const auto batch =
            build_views(random_embeddings(4, 3, 6, rng, 0.0), sample_fusion_weights(3, 3, 0.1, 0.9, rng));
        const auto hp = select_hard_positives(batch, 0.5);
        for (std::size_t s = 0; s < batch.size(); ++s) {
            for (std::size_t p : batch.positives(s)) {
                if (!hp.contains(s, p)) continue;
                EXPECT_LT(positive_probability(batch, s, p, 0.9, 0.07), positive_probability(batch, s, p, 1.0, 0.07));
            }
        }
    }
}

TEST(ContrastiveLoss, InvariantToViewPermutation) {
    Rng rng(13);
    const auto batch = build_views(random_embeddings(3, 2, 4, rng), sample_fusion_weights(2, 3, 0.1, 0.9, rng));
    FusionConfig cfg;
    cfg.hard_ratio = 0.5;
    auto v = rows_of(batch.views);
    std::vector<std::size_t> perm(batch.size());
    std::iota(perm.begin(), perm.end(), 0);
    rng.shuffle(perm.begin(), perm.end());
    std::vector<Vec> pv;
    std::vector<std::size_t> po;
    for (std::size_t i : perm) {
        pv.push_back(v[i]);
        po.push_back(batch.owner[i]);
    }
    EXPECT_NEAR(contrastive_loss(manual_batch(pv, po), cfg).item(), contrastive_loss(batch, cfg).item(), 1e-10);
}

TEST(ContrastiveLoss, GradientMatchesFiniteDifferences) {
    Rng rng(14);
    for (int trial = 0; trial < 3; ++trial) {
        std::vector<Vec> rows;
        for (int r = 0; r < 6; ++r) rows.push_back({rng.uniform(-1, 1), rng.uniform(-1, 1), rng.uniform(-1, 1)});
        const auto batch = manual_batch(rows, {0, 0, 1, 1, 2, 2}, true);
        FusionConfig cfg;
        cfg.temperature = 0.5;
        cfg.hard_ratio = 0.5;
        const auto hard = select_hard_positives(batch, cfg.hard_ratio);
        EXPECT_LT(gradient_error([&] { return contrastive_loss(batch, hard, cfg); }, {batch.views}), 1e-4);
    }
}

TEST(ContrastiveLoss, GradientThroughFusion) {
    Rng rng(15);
    auto emb = random_embeddings(3, 2, 4, rng);
    std::vector<Tensor> wrt;
    for (auto& sample : emb)
        for (auto& r : sample) {
            r = r.clone();
            r.set_requires_grad(true);
            wrt.push_back(r);
        }
    const auto w = sample_fusion_weights(2, 3, 0.1, 0.9, rng);
    FusionConfig cfg;
    cfg.temperature = 0.3;
    const auto hard = select_hard_positives(build_views(emb, w), 0.5);
    EXPECT_LT(gradient_error([&] { return contrastive_loss(build_views(emb, w), hard, cfg); }, wrt), 1e-4);
}

TEST(ContrastiveLoss, SingleSampleRejected) {
    const auto batch = manual_batch({{1, 0}, {0, 1}}, {0, 0});
    EXPECT_THROW(contrastive_loss(batch, FusionConfig{}), ContractError);
}

TEST(FusionConfig, Validation) {
    FusionConfig cfg;
    EXPECT_NO_THROW(cfg.validate());
    cfg.temperature = 0.0;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.hard_weight = 1.5;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = {};
    cfg.weight_lo = 0.9;
    cfg.weight_hi = 0.1;
    EXPECT_THROW(cfg.validate(), ConfigError);
}
