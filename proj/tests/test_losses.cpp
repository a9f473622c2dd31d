#include "maeclip/losses.hpp"

#include <gtest/gtest.h>

#include <cmath>

#include "oracles.hpp"

using namespace maeclip;

namespace {

EmbeddingPair random_pair(int n, int d, Rng& rng, bool requires_grad = false) {
    EmbeddingPair p;
    p.x = l2_normalize(Tensor::randn({n, d}, rng, 1.0, requires_grad));
    p.y = l2_normalize(Tensor::randn({n, d}, rng, 1.0, requires_grad));
    return p;
}

}  // namespace

TEST(ContrastiveLoss, SinglePairIsZero) {
    Rng rng(61);
    auto pair = random_pair(1, 6, rng);
    auto losses = contrastive_loss(pair, Tensor::scalar(1.0));
    EXPECT_NEAR(losses.combined.item(), 0.0, 1e-12);
}

TEST(ContrastiveLoss, AllIdenticalEmbeddingsGiveLogN) {
    std::vector<double> v{0.6, 0.8};
    std::vector<double> data;
    for (int i = 0; i < 4; ++i) data.insert(data.end(), v.begin(), v.end());
    EmbeddingPair pair{Tensor::from_data(data, {4, 2}), Tensor::from_data(data, {4, 2})};
    auto losses = contrastive_loss(pair, Tensor::scalar(1.0));
    EXPECT_NEAR(losses.i2t.item(), std::log(4.0), 1e-12);
    EXPECT_NEAR(losses.t2i.item(), std::log(4.0), 1e-12);
}

TEST(ContrastiveLoss, TwoPairOrthonormalCase) {
    // Matched similarity 1, mismatched 0, sigma = 1:
    // l = -log(e / (e + 1)) per direction.
    EmbeddingPair pair{Tensor::from_data({1, 0, 0, 0, 0, 1, 0, 0}, {2, 4}),
                       Tensor::from_data({1, 0, 0, 0, 0, 1, 0, 0}, {2, 4})};
    auto losses = contrastive_loss(pair, Tensor::scalar(1.0));
    const double expected = 0.3132616875182228;  // -log(e/(e+1))
    EXPECT_NEAR(losses.i2t.item(), expected, 1e-12);
    EXPECT_NEAR(losses.t2i.item(), expected, 1e-12);
    EXPECT_NEAR(losses.combined.item(), expected, 1e-12);
}

TEST(ContrastiveLoss, MatchesScalarOracleOnRandomInstances) {
    Rng rng(62);
    for (int iter = 0; iter < 100; ++iter) {
        const int n = 1 + static_cast<int>(rng.uniform_index(8));
        const int d = 2 + static_cast<int>(rng.uniform_index(14));
        auto pair = random_pair(n, d, rng);
        const double inv_sigma = rng.uniform(0.5, 10.0);
        auto losses = contrastive_loss(pair, Tensor::scalar(inv_sigma));

        std::vector<double> logits(static_cast<size_t>(n) * n);
        for (int i = 0; i < n; ++i)
            for (int j = 0; j < n; ++j) {
                double s = 0.0;
                for (int k = 0; k < d; ++k) s += pair.x.at(i, k) * pair.y.at(j, k);
                logits[static_cast<size_t>(i) * n + j] = s * inv_sigma;
            }
        auto expect = oracle::contrastive(logits, n);
        EXPECT_NEAR(losses.i2t.item(), expect.i2t, 1e-12);
        EXPECT_NEAR(losses.t2i.item(), expect.t2i, 1e-12);
        EXPECT_NEAR(losses.combined.item(), 0.5 * (expect.i2t + expect.t2i), 1e-12);
        EXPECT_GE(losses.i2t.item(), 0.0);
        // Finite logits keep the loss strictly positive once real negatives exist.
        if (n >= 2) EXPECT_GT(losses.i2t.item(), 0.0);
    }
}

TEST(ContrastiveLoss, InvariantUnderPairPreservingPermutation) {
    Rng rng(63);
    auto pair = random_pair(6, 8, rng);
    std::vector<int> perm{4, 0, 5, 2, 1, 3};
    EmbeddingPair permuted{take_rows(pair.x, perm), take_rows(pair.y, perm)};
    auto a = contrastive_loss(pair, Tensor::scalar(10.0));
    auto b = contrastive_loss(permuted, Tensor::scalar(10.0));
    EXPECT_NEAR(a.i2t.item(), b.i2t.item(), 1e-12);
    EXPECT_NEAR(a.t2i.item(), b.t2i.item(), 1e-12);
}

TEST(ContrastiveLoss, MonotoneInMatchedSimilarity) {
    // x1 = cos(t) e1 + sin(t) e3 keeps every other logit fixed while the
    // matched similarity cos(t) moves.
    auto build = [](double theta) {
        EmbeddingPair pair{
            Tensor::from_data({std::cos(theta), 0, std::sin(theta), 0, 0, 1, 0, 0}, {2, 4}),
            Tensor::from_data({1, 0, 0, 0, 0, 1, 0, 0}, {2, 4})};
        return contrastive_loss(pair, Tensor::scalar(5.0)).i2t.item();
    };
    EXPECT_LT(build(0.2), build(0.7));
    EXPECT_LT(build(0.7), build(1.2));
}

TEST(PatchNormalize, ConstantAndTwoPoint) {
    Tensor constant = Tensor::full({8}, 0.4);
    Tensor zeroed = patch_normalize(constant);
    for (double v : zeroed.data()) EXPECT_NEAR(v, 0.0, 1e-9);

    Tensor two = Tensor::from_data({0.0, 2.0}, {2});
    Tensor out = patch_normalize(two, 1e-12);
    EXPECT_NEAR(out.data()[0], -1.0, 1e-9);
    EXPECT_NEAR(out.data()[1], 1.0, 1e-9);
}

TEST(PatchNormalize, RandomPatchStatistics) {
    Rng rng(64);
    Tensor patch = Tensor::randn({32}, rng, 2.0);
    const double eps = 1e-6;
    Tensor out = patch_normalize(patch, eps);
    double mean = 0.0;
    for (double v : out.data()) mean += v;
    mean /= static_cast<double>(out.numel());
    EXPECT_LT(std::abs(mean), 1e-10);
    double var = 0.0;
    for (double v : out.data()) var += (v - mean) * (v - mean);
    const double stddev = std::sqrt(var / static_cast<double>(out.numel()));
    // Population std of the input, recomputed independently.
    double imean = 0.0;
    for (double v : patch.data()) imean += v;
    imean /= static_cast<double>(patch.numel());
    double ivar = 0.0;
    for (double v : patch.data()) ivar += (v - imean) * (v - imean);
    const double istd = std::sqrt(ivar / static_cast<double>(patch.numel()));
    EXPECT_NEAR(stddev, istd / (istd + eps), 1e-9);
}

TEST(GenImageLoss, ExactCases) {
    Rng rng(65);
    Tensor targets = Tensor::randn({3, 8}, rng);
    Tensor normalized = patch_normalize(targets);
    EXPECT_NEAR(gen_image_loss(normalized, targets, true).item(), 0.0, 1e-12);

    Tensor preds = add(targets.detach(), Tensor::ones({3, 8}));
    EXPECT_NEAR(gen_image_loss(preds, targets, false).item(), 1.0, 1e-12);
}

TEST(GenImageLoss, MatchesScalarLoopOracle) {
    Rng rng(66);
    Tensor preds = Tensor::randn({3, 16}, rng);
    Tensor targets = Tensor::randn({3, 16}, rng);
    EXPECT_NEAR(gen_image_loss(preds, targets, false).item(), oracle::mse(preds.data(), targets.data()), 1e-12);
    Tensor norm_targets = patch_normalize(targets);
    EXPECT_NEAR(gen_image_loss(preds, targets, true).item(), oracle::mse(preds.data(), norm_targets.data()), 1e-12);
}

TEST(GenTextLoss, UniformAndSaturated) {
    Tensor uniform = Tensor::zeros({1, 256});
    EXPECT_NEAR(gen_text_loss(uniform, {17}).item(), std::log(256.0), 1e-12);

    std::vector<double> row(16, -30.0);
    row[5] = 30.0;
    EXPECT_NEAR(gen_text_loss(Tensor::from_data(row, {1, 16}), {5}).item(), 0.0, 1e-12);
}

TEST(GenTextLoss, MatchesScalarLoopOracle) {
    Rng rng(67);
    Tensor logits = Tensor::randn({5, 11}, rng);
    std::vector<int> targets{10, 3, 0, 7, 4};
    EXPECT_NEAR(gen_text_loss(logits, targets).item(), oracle::cross_entropy(logits.data(), targets, 5, 11), 1e-12);
}

TEST(TotalLoss, WeightArithmetic) {
    Rng rng(68);
    auto pair = random_pair(4, 8, rng);
    auto contrastive = contrastive_loss(pair, Tensor::scalar(10.0));

    auto zero_weights = total_loss(contrastive, Tensor::scalar(2.0), Tensor::scalar(4.0), 0.0, 0.0);
    EXPECT_NEAR(zero_weights.breakdown.total, zero_weights.breakdown.l_c, 1e-15);

    // l_c = 1, l_gen_i = 2, l_gen_t = 4, weights (0.1, 0.05) -> 1.4
    ContrastiveLosses unit{Tensor::scalar(1.0), Tensor::scalar(1.0), Tensor::scalar(1.0)};
    auto t = total_loss(unit, Tensor::scalar(2.0), Tensor::scalar(4.0), 0.1, 0.05);
    EXPECT_NEAR(t.breakdown.total, 1.4, 1e-12);
    EXPECT_NEAR(t.graph.item(), 1.4, 1e-12);

    EXPECT_THROW(total_loss(unit, std::nullopt, std::nullopt, -0.1, 0.0), ConfigError);
}

TEST(TotalLoss, BreakdownInvariants) {
    Rng rng(69);
    auto pair = random_pair(5, 6, rng);
    auto contrastive = contrastive_loss(pair, Tensor::scalar(7.0));
    Tensor gi = Tensor::scalar(0.37), gt = Tensor::scalar(1.21);
    auto t = total_loss(contrastive, gi, gt, 0.1, 0.05);
    const auto& b = t.breakdown;
    EXPECT_NEAR(b.l_c, 0.5 * (b.l_i2t + b.l_t2i), 1e-12);
    EXPECT_NEAR(b.total, b.l_c + b.w_i * b.l_gen_i + b.w_t * b.l_gen_t, 1e-12);
    EXPECT_GE(b.l_i2t, 0.0);
    EXPECT_GE(b.l_t2i, 0.0);
    EXPECT_GE(b.l_gen_i, 0.0);
    EXPECT_GE(b.l_gen_t, 0.0);
}

TEST(TotalLoss, GradientIsWeightedSumOfPerLossGradients) {
    // One shared parameter feeds all three losses through fixed random maps;
    // the total-loss gradient must equal the weighted sum of separately
    // backpropagated per-loss gradients.
    Rng rng(70);
    Tensor z = Tensor::randn({2, 6}, rng, 1.0, true);
    Tensor map_x = Tensor::randn({6, 4}, rng);
    Tensor map_y = Tensor::randn({6, 4}, rng);
    Tensor map_p = Tensor::randn({6, 5}, rng);
    Tensor map_l = Tensor::randn({6, 7}, rng);
    Tensor targets_p = Tensor::randn({2, 5}, rng);
    std::vector<int> targets_t{3, 0};

    auto build_losses = [&] {
        EmbeddingPair pair{l2_normalize(matmul(z, map_x)), l2_normalize(matmul(z, map_y))};
        auto contrastive = contrastive_loss(pair, Tensor::scalar(5.0));
        Tensor gi = gen_image_loss(matmul(z, map_p), targets_p, false);
        Tensor gt = gen_text_loss(matmul(z, map_l), targets_t);
        return std::make_tuple(contrastive, gi, gt);
    };

    Rng wrng(71);
    for (int iter = 0; iter < 10; ++iter) {
        const double w_i = iter == 0 ? 0.1 : wrng.uniform(0.0, 2.0);
        const double w_t = iter == 0 ? 0.05 : wrng.uniform(0.0, 2.0);

        z.clear_grad();
        auto [contrastive, gi, gt] = build_losses();
        backward(contrastive.combined);
        auto g_c = z.grad();

        z.clear_grad();
        std::tie(contrastive, gi, gt) = build_losses();
        backward(gi);
        auto g_i = z.grad();

        z.clear_grad();
        std::tie(contrastive, gi, gt) = build_losses();
        backward(gt);
        auto g_t = z.grad();

        z.clear_grad();
        std::tie(contrastive, gi, gt) = build_losses();
        auto t = total_loss(contrastive, gi, gt, w_i, w_t);
        backward(t.graph);
        auto g_total = z.grad();

        for (size_t k = 0; k < g_total.size(); ++k)
            EXPECT_NEAR(g_total[k], g_c[k] + w_i * g_i[k] + w_t * g_t[k], 1e-10);
    }
}

TEST(RandomMask, CountsAndDeterminism) {
    Rng a(72), b(72);
    MaskSpec ma = random_mask(MaskSpec::Modality::kImage, 196, 0.75, a);
    MaskSpec mb = random_mask(MaskSpec::Modality::kImage, 196, 0.75, b);
    EXPECT_EQ(ma.masked.size(), 147u);
    EXPECT_EQ(ma.kept.size(), 49u);
    EXPECT_EQ(ma.masked, mb.masked);
    EXPECT_EQ(ma.kept, mb.kept);
    ma.validate();

    Rng c(73);
    EXPECT_THROW(random_mask(MaskSpec::Modality::kImage, 16, 1.2, c), ConfigError);
    EXPECT_THROW(random_mask(MaskSpec::Modality::kImage, 16, 0.0, c), ConfigError);
}

TEST(RandomMask, MonteCarloFrequency) {
    Rng rng(74);
    const int n = 16, draws = 10000;
    std::vector<int> counts(n, 0);
    for (int d = 0; d < draws; ++d) {
        MaskSpec m = random_mask(MaskSpec::Modality::kImage, n, 0.5, rng);
        for (int i : m.masked) ++counts[i];
    }
    for (int i = 0; i < n; ++i) EXPECT_NEAR(counts[i] / static_cast<double>(draws), 0.5, 0.02);
}

TEST(SimilarityMask, TrivialAndTieCases) {
    MaskSpec dec = similarity_mask(MaskSpec::Modality::kImage, {4.0, 3.0, 2.0, 1.0}, 0.5);
    EXPECT_EQ(dec.masked, (std::vector<int>{0, 1}));

    MaskSpec ties = similarity_mask(MaskSpec::Modality::kImage, {1.0, 1.0, 1.0, 1.0}, 0.5);
    EXPECT_EQ(ties.masked, (std::vector<int>{0, 1}));
}

TEST(SimilarityMask, MatchesSortOracle) {
    Rng rng(75);
    for (int iter = 0; iter < 200; ++iter) {
        const int n = 4 + static_cast<int>(rng.uniform_index(29));
        std::vector<double> scores(n);
        for (auto& s : scores) s = rng.normal();
        if (iter % 3 == 0) scores[rng.uniform_index(n)] = scores[rng.uniform_index(n)];  // plant ties
        const double ratio = 0.25 + 0.5 * rng.uniform();
        MaskSpec m = similarity_mask(MaskSpec::Modality::kImage, scores, ratio);
        auto expect = oracle::top_k(scores, static_cast<int>(m.masked.size()));
        EXPECT_EQ(m.masked, expect);
    }
}

TEST(MaskableTokens, ExcludesSpecials) {
    std::vector<int> tokens{1, 101, 102, 0, 103, 2};  // BOS, a, b, PAD, c, EOS
    EXPECT_EQ(maskable_token_positions(tokens), (std::vector<int>{1, 2, 4}));
}

TEST(ElementwiseSimilarity, TrivialAndOracle) {
    Tensor ref = Tensor::from_data({0.6, 0.8}, {2});
    Tensor feats = Tensor::from_data({0.6, 0.8, -0.8, 0.6}, {2, 2});
    auto sims = elementwise_similarity(feats, ref);
    EXPECT_NEAR(sims[0], 1.0, 1e-9);
    EXPECT_NEAR(sims[1], 0.0, 1e-9);

    Rng rng(76);
    Tensor rf = Tensor::randn({8, 16}, rng);
    Tensor rr = l2_normalize(Tensor::randn({16}, rng));
    auto out = elementwise_similarity(rf, rr);
    for (int i = 0; i < 8; ++i) {
        double sq = 0.0, dp = 0.0;
        for (int j = 0; j < 16; ++j) {
            sq += rf.at(i, j) * rf.at(i, j);
            dp += rf.at(i, j) * rr.data()[j];
        }
        EXPECT_NEAR(out[i], dp / std::max(std::sqrt(sq), 1e-8), 1e-12);
    }
}

TEST(GenerativeLosses, OnlyMaskedPositionsContribute) {
    // The training path slices masked rows out of a full-length prediction;
    // perturbing the kept rows must leave both generative losses unchanged.
    Rng rng(77);
    const int n = 10, p = 6, vocab = 12;
    Tensor full_preds = Tensor::randn({n, p}, rng);
    Tensor full_logits = Tensor::randn({n, vocab}, rng);
    Tensor targets = Tensor::randn({4, p}, rng);
    std::vector<int> token_targets{2, 9, 5, 0};
    std::vector<int> masked{1, 4, 6, 9};
    std::vector<int> kept{0, 2, 3, 5, 7, 8};

    const double li = gen_image_loss(take_rows(full_preds, masked), targets, true).item();
    const double lt = gen_text_loss(take_rows(full_logits, masked), token_targets).item();

    auto perturb_rows = [&](const Tensor& t, const std::vector<int>& rows) {
        std::vector<double> data = t.data();
        for (int r : rows)
            for (int c = 0; c < t.cols(); ++c) data[static_cast<size_t>(r) * t.cols() + c] += rng.normal();
        return Tensor::from_data(data, t.shape());
    };
    Tensor preds2 = perturb_rows(full_preds, kept);
    Tensor logits2 = perturb_rows(full_logits, kept);
    EXPECT_DOUBLE_EQ(gen_image_loss(take_rows(preds2, masked), targets, true).item(), li);
    EXPECT_DOUBLE_EQ(gen_text_loss(take_rows(logits2, masked), token_targets).item(), lt);
}
