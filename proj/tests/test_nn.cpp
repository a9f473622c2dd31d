#include "maeclip/nn.hpp"

#include <gtest/gtest.h>

#include <cmath>
#include <map>

using namespace maeclip;

namespace {

TransformerConfig tiny_config(int depth = 2, int width = 8, int heads = 2) {
    TransformerConfig cfg;
    cfg.depth = depth;
    cfg.width = width;
    cfg.heads = heads;
    return cfg;
}

std::vector<Tensor> collect(TransformerParams& p) {
    std::vector<Tensor> out;
    p.visit("t", [&](const std::string&, Tensor& t, bool) { out.push_back(t); });
    return out;
}

}  // namespace

TEST(Attention, SingleTokenIsValueThenOutputProjection) {
    Rng rng(21);
    auto attn = AttentionParams::init(8, 1, rng);
    Tensor x = Tensor::randn({1, 8}, rng);
    Tensor out = multi_head_attention(x, attn, 2);
    Tensor expected = add_rowvec(matmul(add_rowvec(matmul(x, attn.wv), attn.bv), attn.wo), attn.bo);
    ASSERT_EQ(out.shape(), expected.shape());
    for (size_t i = 0; i < out.numel(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], expected.data()[i]);
}

TEST(Attention, IdenticalTokensGiveIdenticalOutputs) {
    Rng rng(22);
    auto attn = AttentionParams::init(8, 1, rng);
    std::vector<double> row(8);
    for (auto& v : row) v = rng.normal();
    std::vector<double> data;
    for (int i = 0; i < 5; ++i) data.insert(data.end(), row.begin(), row.end());
    Tensor x = Tensor::from_data(data, {5, 8});
    Tensor out = multi_head_attention(x, attn, 2);
    for (int i = 1; i < 5; ++i)
        for (int j = 0; j < 8; ++j) EXPECT_DOUBLE_EQ(out.at(i, j), out.at(0, j));
}

TEST(Attention, GradientCheck) {
    Rng rng(23);
    auto attn = AttentionParams::init(8, 4, rng);
    Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, 8}, rng);
    std::vector<Tensor> params{x, attn.wq, attn.bq, attn.wk, attn.bk, attn.wv, attn.bv, attn.wo, attn.bo};
    auto res = grad_check([&] { return sum(mul(multi_head_attention(x, attn, 2), w)); }, params);
    EXPECT_LT(res.max_rel_err, 1e-5);
}

TEST(Attention, BadHeadCountThrows) {
    Rng rng(24);
    auto attn = AttentionParams::init(8, 1, rng);
    Tensor x = Tensor::randn({2, 8}, rng);
    EXPECT_THROW(multi_head_attention(x, attn, 3), ConfigError);
}

TEST(TransformerLayer, ZeroOutputProjectionsGiveIdentity) {
    Rng rng(25);
    auto cfg = tiny_config(1);
    auto layer = LayerParams::init(cfg, rng);
    layer.attn.wo = Tensor::zeros({cfg.width, cfg.width}, true);
    layer.attn.bo = Tensor::zeros({cfg.width}, true);
    layer.mlp_w2 = Tensor::zeros({cfg.width * cfg.mlp_ratio, cfg.width}, true);
    layer.mlp_b2 = Tensor::zeros({cfg.width}, true);
    Tensor x = Tensor::randn({4, cfg.width}, rng);
    Tensor out = transformer_layer(x, layer, cfg.heads);
    for (size_t i = 0; i < x.numel(); ++i) EXPECT_DOUBLE_EQ(out.data()[i], x.data()[i]);
}

TEST(TransformerLayer, PreservesShape) {
    Rng rng(26);
    auto cfg = tiny_config();
    auto layer = LayerParams::init(cfg, rng);
    for (int s : {1, 3, 7, 16}) {
        Tensor x = Tensor::randn({s, cfg.width}, rng);
        Tensor out = transformer_layer(x, layer, cfg.heads);
        EXPECT_EQ(out.shape(), (std::vector<int>{s, cfg.width}));
    }
}

TEST(TransformerLayer, GradientCheck) {
    Rng rng(27);
    auto cfg = tiny_config(1);
    auto layer = LayerParams::init(cfg, rng);
    Tensor x = Tensor::randn({3, cfg.width}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, cfg.width}, rng);
    std::vector<Tensor> params{x, layer.ln1_g, layer.ln1_b, layer.attn.wq, layer.attn.wo,
                               layer.mlp_w1, layer.mlp_b1, layer.mlp_w2, layer.ln2_g};
    auto res = grad_check([&] { return sum(mul(transformer_layer(x, layer, cfg.heads), w)); }, params);
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(TransformerStack, ComposedGradientCheck) {
    Rng rng(28);
    auto cfg = tiny_config(4);
    auto stack = TransformerParams::init(cfg, rng);
    Tensor x = Tensor::randn({3, cfg.width}, rng, 1.0, true);
    Tensor w = Tensor::randn({3, cfg.width}, rng);
    std::vector<Tensor> params{x, stack.layers[0].attn.wq, stack.layers[1].mlp_w1, stack.layers[2].attn.wo,
                               stack.layers[3].ln1_g, stack.final_ln_g};
    // eps 1e-4: deep compositions need a larger step to keep central
    // differences above double-precision cancellation noise.
    auto res = grad_check([&] { return sum(mul(transformer_stack(x, stack, cfg.heads), w)); }, params, 1e-4, 16);
    EXPECT_LT(res.max_rel_err, 1e-4);
}

TEST(TransformerStack, PureFunctionOfInputs) {
    Rng rng(29);
    auto cfg = tiny_config();
    auto stack = TransformerParams::init(cfg, rng);
    Tensor x = Tensor::randn({5, cfg.width}, rng);
    Tensor a = transformer_stack(x, stack, cfg.heads);
    Tensor b = transformer_stack(x, stack, cfg.heads);
    EXPECT_EQ(a.data(), b.data());
}

TEST(Init, BiasesZeroGainsOne) {
    Rng rng(30);
    auto cfg = tiny_config();
    auto stack = TransformerParams::init(cfg, rng);
    stack.visit("t", [](const std::string& name, Tensor& t, bool) {
        const bool ln_gain = name.find("ln") != std::string::npos && name.back() == 'g';
        const bool is_bias = name.find("/b") != std::string::npos || name.find("_b") != std::string::npos;
        if (ln_gain) {
            for (double v : t.data()) EXPECT_EQ(v, 1.0) << name;
        } else if (is_bias) {
            for (double v : t.data()) EXPECT_EQ(v, 0.0) << name;
        }
    });
}

TEST(Init, SameSeedGivesBitIdenticalParams) {
    auto cfg = tiny_config();
    Rng rng_a(31), rng_b(31);
    auto a = TransformerParams::init(cfg, rng_a);
    auto b = TransformerParams::init(cfg, rng_b);
    auto ta = collect(a);
    auto tb = collect(b);
    ASSERT_EQ(ta.size(), tb.size());
    for (size_t i = 0; i < ta.size(); ++i) EXPECT_EQ(ta[i].data(), tb[i].data());
}

TEST(Init, WeightStdNearPointZeroTwo) {
    Rng rng(32);
    Tensor w = init_weight(512, 512, rng);
    double mean = 0.0;
    for (double v : w.data()) mean += v;
    mean /= static_cast<double>(w.numel());
    double var = 0.0;
    for (double v : w.data()) var += (v - mean) * (v - mean);
    var /= static_cast<double>(w.numel());
    EXPECT_NEAR(std::sqrt(var), 0.02, 0.002);
}

TEST(Init, ResidualProjectionsScaledDown) {
    Rng rng(33);
    TransformerConfig cfg = tiny_config(8, 64, 4);
    auto layer = LayerParams::init(cfg, rng);
    auto sample_std = [](const Tensor& t) {
        double mean = 0.0;
        for (double v : t.data()) mean += v;
        mean /= static_cast<double>(t.numel());
        double var = 0.0;
        for (double v : t.data()) var += (v - mean) * (v - mean);
        return std::sqrt(var / static_cast<double>(t.numel()));
    };
    const double expected = 0.02 / std::sqrt(16.0);
    EXPECT_NEAR(sample_std(layer.attn.wo), expected, expected * 0.25);
    EXPECT_NEAR(sample_std(layer.mlp_w2), expected, expected * 0.25);
}

TEST(PosEncoding2D, OriginIsAlternatingZeroOne) {
    auto pe = pos_encoding_2d(4, 4, 16);
    for (int k = 0; k < 16; k += 2) {
        EXPECT_DOUBLE_EQ(pe.table.at(0, k), 0.0);      // sin slots
        EXPECT_DOUBLE_EQ(pe.table.at(0, k + 1), 1.0);  // cos slots
    }
}

TEST(PosEncoding2D, Deterministic) {
    auto a = pos_encoding_2d(3, 5, 12);
    auto b = pos_encoding_2d(3, 5, 12);
    EXPECT_EQ(a.table.data(), b.table.data());
    EXPECT_FALSE(a.table.requires_grad());
}

TEST(PosEncoding2D, DistinctRowsUpTo16x16) {
    auto pe = pos_encoding_2d(16, 16, 16);
    const int n = 256;
    for (int a = 0; a < n; ++a)
        for (int b = a + 1; b < n; ++b) {
            bool same = true;
            for (int k = 0; k < 16 && same; ++k) same = pe.table.at(a, k) == pe.table.at(b, k);
            EXPECT_FALSE(same) << "rows " << a << " and " << b;
        }
}

TEST(PosEncoding2D, WidthNotDivisibleBy4Throws) {
    EXPECT_THROW(pos_encoding_2d(4, 4, 10), ConfigError);
}

TEST(Config, InvalidConfigsThrow) {
    TransformerConfig bad = tiny_config();
    bad.depth = 0;
    EXPECT_THROW(bad.validate(), ConfigError);
    bad = tiny_config();
    bad.width = 10;
    bad.heads = 4;
    EXPECT_THROW(bad.validate(), ConfigError);
}
