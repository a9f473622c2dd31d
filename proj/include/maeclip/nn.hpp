#pragma once

#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "maeclip/errors.hpp"
#include "maeclip/rng.hpp"
#include "maeclip/tensor.hpp"

namespace maeclip {

struct TransformerConfig {
    int depth = 2;
    int width = 64;
    int heads = 4;
    int mlp_ratio = 4;
    int vocab_size = 0;  // text stacks only
    int max_seq = 64;

    void validate() const {
        if (depth < 1) throw ConfigError("transformer depth must be >= 1");
        if (heads < 1 || width % heads != 0) throw ConfigError("width must be divisible by heads");
        if (mlp_ratio < 1) throw ConfigError("mlp_ratio must be >= 1");
    }
};

/// Visitor over named trainable tensors. `no_decay` marks parameters
/// excluded from weight decay (layernorm gains/biases, temperature).
using ParamVisitor = std::function<void(const std::string&, Tensor&, bool no_decay)>;

// --------------------------------------------------------------------------
// Initialization: normal(0, 0.02^2) weights, residual output projections
// scaled by 1/sqrt(2*depth), zero biases, unit layernorm gains.
// --------------------------------------------------------------------------

constexpr double kInitStd = 0.02;

inline Tensor init_weight(int rows, int cols, Rng& rng, double stddev = kInitStd) {
    return Tensor::randn({rows, cols}, rng, stddev, true);
}

inline Tensor init_vector(int n, Rng& rng, double stddev = kInitStd) {
    return Tensor::randn({n}, rng, stddev, true);
}

inline Tensor init_bias(int n) { return Tensor::zeros({n}, true); }

struct AttentionParams {
    Tensor wq, bq, wk, bk, wv, bv, wo, bo;

    static AttentionParams init(int width, int depth, Rng& rng) {
        AttentionParams p;
        p.wq = init_weight(width, width, rng);
        p.bq = init_bias(width);
        p.wk = init_weight(width, width, rng);
        p.bk = init_bias(width);
        p.wv = init_weight(width, width, rng);
        p.bv = init_bias(width);
        p.wo = init_weight(width, width, rng, kInitStd / std::sqrt(2.0 * depth));
        p.bo = init_bias(width);
        return p;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "/wq", wq, false);
        fn(prefix + "/bq", bq, false);
        fn(prefix + "/wk", wk, false);
        fn(prefix + "/bk", bk, false);
        fn(prefix + "/wv", wv, false);
        fn(prefix + "/bv", bv, false);
        fn(prefix + "/wo", wo, false);
        fn(prefix + "/bo", bo, false);
    }
};

struct LayerParams {
    Tensor ln1_g, ln1_b;
    AttentionParams attn;
    Tensor ln2_g, ln2_b;
    Tensor mlp_w1, mlp_b1, mlp_w2, mlp_b2;

    static LayerParams init(const TransformerConfig& cfg, Rng& rng) {
        LayerParams p;
        const int w = cfg.width;
        const int hidden = w * cfg.mlp_ratio;
        p.ln1_g = Tensor::ones({w}, true);
        p.ln1_b = init_bias(w);
        p.attn = AttentionParams::init(w, cfg.depth, rng);
        p.ln2_g = Tensor::ones({w}, true);
        p.ln2_b = init_bias(w);
        p.mlp_w1 = init_weight(w, hidden, rng);
        p.mlp_b1 = init_bias(hidden);
        p.mlp_w2 = init_weight(hidden, w, rng, kInitStd / std::sqrt(2.0 * cfg.depth));
        p.mlp_b2 = init_bias(w);
        return p;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "/ln1_g", ln1_g, true);
        fn(prefix + "/ln1_b", ln1_b, true);
        attn.visit(prefix + "/attn", fn);
        fn(prefix + "/ln2_g", ln2_g, true);
        fn(prefix + "/ln2_b", ln2_b, true);
        fn(prefix + "/mlp_w1", mlp_w1, false);
        fn(prefix + "/mlp_b1", mlp_b1, false);
        fn(prefix + "/mlp_w2", mlp_w2, false);
        fn(prefix + "/mlp_b2", mlp_b2, false);
    }
};

struct TransformerParams {
    std::vector<LayerParams> layers;
    Tensor final_ln_g, final_ln_b;

    static TransformerParams init(const TransformerConfig& cfg, Rng& rng) {
        cfg.validate();
        TransformerParams p;
        p.layers.reserve(cfg.depth);
        for (int i = 0; i < cfg.depth; ++i) p.layers.push_back(LayerParams::init(cfg, rng));
        p.final_ln_g = Tensor::ones({cfg.width}, true);
        p.final_ln_b = init_bias(cfg.width);
        return p;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        for (size_t i = 0; i < layers.size(); ++i) layers[i].visit(prefix + "/layer" + std::to_string(i), fn);
        fn(prefix + "/final_ln_g", final_ln_g, true);
        fn(prefix + "/final_ln_b", final_ln_b, true);
    }
};

// --------------------------------------------------------------------------
// Forward blocks
// --------------------------------------------------------------------------

constexpr double kLayernormEps = 1e-5;

/// Scaled dot-product multi-head attention. Queries come from `x`; keys and
/// values from `kv` when given (cross attention), otherwise from `x`. Full
/// bidirectional attention, no causal mask.
inline Tensor multi_head_attention(const Tensor& x, const AttentionParams& p, int heads,
                                   const Tensor* kv = nullptr) {
    const int d = x.cols();
    if (d % heads != 0) throw ConfigError("attention width not divisible by head count");
    const int hd = d / heads;
    const Tensor& src = kv ? *kv : x;
    Tensor q = add_rowvec(matmul(x, p.wq), p.bq);
    Tensor k = add_rowvec(matmul(src, p.wk), p.bk);
    Tensor v = add_rowvec(matmul(src, p.wv), p.bv);
    const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
    std::vector<Tensor> head_outs;
    head_outs.reserve(heads);
    for (int h = 0; h < heads; ++h) {
        Tensor qh = slice(q, 1, h * hd, (h + 1) * hd);
        Tensor kh = slice(k, 1, h * hd, (h + 1) * hd);
        Tensor vh = slice(v, 1, h * hd, (h + 1) * hd);
        Tensor att = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_hd));
        head_outs.push_back(matmul(att, vh));
    }
    Tensor merged = heads == 1 ? head_outs[0] : concat(head_outs, 1);
    return add_rowvec(matmul(merged, p.wo), p.bo);
}

inline Tensor mlp_block(const Tensor& x, const LayerParams& p) {
    Tensor h = gelu(add_rowvec(matmul(x, p.mlp_w1), p.mlp_b1));
    return add_rowvec(matmul(h, p.mlp_w2), p.mlp_b2);
}

/// Pre-layernorm residual layer: x + Attn(LN(x)), then + MLP(LN(.)).
inline Tensor transformer_layer(const Tensor& x, const LayerParams& p, int heads) {
    Tensor h = add(x, multi_head_attention(layernorm(x, p.ln1_g, p.ln1_b, kLayernormEps), p.attn, heads));
    return add(h, mlp_block(layernorm(h, p.ln2_g, p.ln2_b, kLayernormEps), p));
}

/// Layer stack followed by a final layernorm.
inline Tensor transformer_stack(const Tensor& x, const TransformerParams& p, int heads) {
    Tensor h = x;
    for (const auto& layer : p.layers) h = transformer_layer(h, layer, heads);
    return layernorm(h, p.final_ln_g, p.final_ln_b, kLayernormEps);
}

// --------------------------------------------------------------------------
// Positional encodings
// --------------------------------------------------------------------------

/// Interleaved sin/cos encoding of integer positions 0..count-1 into `width`
/// dims: pair k uses frequency 10000^(-2k/width).
inline std::vector<double> sincos_table(int count, int width) {
    if (width % 2 != 0) throw ConfigError("sincos width must be even");
    std::vector<double> table(static_cast<size_t>(count) * width);
    for (int pos = 0; pos < count; ++pos)
        for (int k = 0; k < width / 2; ++k) {
            const double omega = std::pow(10000.0, -2.0 * k / width);
            table[static_cast<size_t>(pos) * width + 2 * k] = std::sin(pos * omega);
            table[static_cast<size_t>(pos) * width + 2 * k + 1] = std::cos(pos * omega);
        }
    return table;
}

/// Fixed (non-trainable) 2-D positional encoding: row and column each get a
/// width/2 interleaved sin/cos encoding, concatenated per grid cell. Rows
/// are laid out in row-major grid order.
struct PosEncoding2D {
    int grid_h = 0;
    int grid_w = 0;
    Tensor table;  // (grid_h*grid_w) x width, requires_grad = false
};

inline PosEncoding2D pos_encoding_2d(int grid_h, int grid_w, int width) {
    if (width % 4 != 0) throw ConfigError("2d positional encoding width must be divisible by 4");
    const int half = width / 2;
    auto row_enc = sincos_table(grid_h, half);
    auto col_enc = sincos_table(grid_w, half);
    std::vector<double> table(static_cast<size_t>(grid_h) * grid_w * width);
    for (int i = 0; i < grid_h; ++i)
        for (int j = 0; j < grid_w; ++j) {
            double* out = table.data() + (static_cast<size_t>(i) * grid_w + j) * width;
            std::copy_n(row_enc.data() + static_cast<size_t>(i) * half, half, out);
            std::copy_n(col_enc.data() + static_cast<size_t>(j) * half, half, out + half);
        }
    return {grid_h, grid_w, Tensor::from_data(std::move(table), {grid_h * grid_w, width})};
}

}  // namespace maeclip
