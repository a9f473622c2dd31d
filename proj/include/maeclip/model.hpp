#pragma once

#include <cmath>
#include <optional>
#include <string>
#include <vector>

#include "maeclip/data.hpp"
#include "maeclip/errors.hpp"
#include "maeclip/nn.hpp"
#include "maeclip/tensor.hpp"

namespace maeclip {

enum class Pooling { kMAP, kGAP, kMAX };

inline Pooling parse_pooling(const std::string& s) {
    if (s == "map") return Pooling::kMAP;
    if (s == "gap") return Pooling::kGAP;
    if (s == "max") return Pooling::kMAX;
    throw ConfigError("unknown pooling '" + s + "' (expected map|gap|max)");
}

inline std::string pooling_name(Pooling p) {
    switch (p) {
        case Pooling::kMAP: return "map";
        case Pooling::kGAP: return "gap";
        default: return "max";
    }
}

struct MAECLIPConfig {
    int image_size = 32;
    int patch_size = 8;
    int channels = 3;
    TransformerConfig image_encoder{2, 64, 4, 4, 0, 0};
    TransformerConfig text_encoder{2, 64, 4, 4, 260, 64};
    TransformerConfig decoder{2, 64, 4, 4, 0, 0};
    int embed_dim = 64;
    Pooling pooling = Pooling::kGAP;
    double temperature_init = 0.07;
    double mask_ratio = 0.75;
    double w_i = 0.1;   // generative image loss weight
    double w_t = 0.05;  // generative text loss weight
    bool normalize_targets = true;

    int grid() const { return image_size / patch_size; }
    int n_patches() const { return grid() * grid(); }
    int patch_pixels() const { return patch_size * patch_size * channels; }

    void validate() const {
        if (image_size <= 0 || patch_size <= 0 || image_size % patch_size != 0)
            throw ConfigError("image_size must be a positive multiple of patch_size");
        if (mask_ratio <= 0.0 || mask_ratio >= 1.0) throw ConfigError("mask_ratio must lie in (0, 1)");
        if (temperature_init <= 0.0) throw ConfigError("temperature_init must be positive");
        if (embed_dim <= 0) throw ConfigError("embed_dim must be positive");
        if (w_i < 0.0 || w_t < 0.0) throw ConfigError("loss weights must be non-negative");
        if (text_encoder.vocab_size < Vocab::kReserved + 1) throw ConfigError("vocab_size too small");
        image_encoder.validate();
        text_encoder.validate();
        decoder.validate();
    }
};

/// Which positions of a sequence are visible to the masked encoder pass.
/// `kept` and `masked` are sorted, disjoint, and together cover [0, total).
struct MaskSpec {
    enum class Modality { kImage, kText };
    Modality modality = Modality::kImage;
    std::vector<int> kept;
    std::vector<int> masked;

    int total() const { return static_cast<int>(kept.size() + masked.size()); }

    void validate() const {
        std::vector<char> seen(total(), 0);
        auto mark = [&](const std::vector<int>& v) {
            int prev = -1;
            for (int i : v) {
                if (i <= prev) throw ContractError("mask positions must be strictly increasing");
                if (i < 0 || i >= total() || seen[i]) throw ContractError("mask positions must partition the range");
                seen[i] = 1;
                prev = i;
            }
        };
        mark(kept);
        mark(masked);
    }

    static MaskSpec all_visible(Modality m, int total) {
        MaskSpec s;
        s.modality = m;
        s.kept.resize(total);
        for (int i = 0; i < total; ++i) s.kept[i] = i;
        return s;
    }

    static MaskSpec from_masked(Modality m, int total, std::vector<int> masked_positions) {
        MaskSpec s;
        s.modality = m;
        std::sort(masked_positions.begin(), masked_positions.end());
        s.masked = std::move(masked_positions);
        size_t mi = 0;
        for (int i = 0; i < total; ++i) {
            if (mi < s.masked.size() && s.masked[mi] == i)
                ++mi;
            else
                s.kept.push_back(i);
        }
        s.validate();
        return s;
    }
};

/// A batch of l2-normalized embeddings; row j of x and y form a true pair.
struct EmbeddingPair {
    Tensor x;  // N x embed_dim image embeddings
    Tensor y;  // N x embed_dim text embeddings
};

// --------------------------------------------------------------------------
// Parameters
// --------------------------------------------------------------------------

/// Multihead attention pooling: one learned query scores the feature rows
/// per head (keys are a learned projection) and the output is the
/// softmax-weighted combination of the raw rows themselves. Identity values
/// keep the pooled vector inside the convex hull of the inputs, so a
/// sequence of identical rows pools to that row under every strategy.
struct MapPoolParams {
    Tensor query;  // 1 x width
    Tensor key_w;  // width x width
    Tensor key_b;  // width

    static MapPoolParams init(int width, Rng& rng) {
        MapPoolParams p;
        p.query = init_weight(1, width, rng);
        p.key_w = init_weight(width, width, rng);
        p.key_b = init_bias(width);
        return p;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "/query", query, false);
        fn(prefix + "/key_w", key_w, false);
        fn(prefix + "/key_b", key_b, false);
    }
};

struct ImageEncoderParams {
    Tensor patch_proj_w;  // patch_pixels x width
    Tensor patch_proj_b;
    PosEncoding2D pos;  // fixed
    TransformerParams trunk;
    std::optional<MapPoolParams> map_pool;
    Tensor proj;  // width x embed_dim, no bias

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "/patch_proj_w", patch_proj_w, false);
        fn(prefix + "/patch_proj_b", patch_proj_b, false);
        trunk.visit(prefix + "/trunk", fn);
        if (map_pool) map_pool->visit(prefix + "/map_pool", fn);
        fn(prefix + "/proj", proj, false);
    }
};

struct TextEncoderParams {
    Tensor token_embed;  // vocab x width
    Tensor pos_embed;    // max_seq x width, trainable 1-D encoding
    TransformerParams trunk;
    std::optional<MapPoolParams> map_pool;
    Tensor proj;  // width x embed_dim, no bias

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "/token_embed", token_embed, false);
        fn(prefix + "/pos_embed", pos_embed, false);
        trunk.visit(prefix + "/trunk", fn);
        if (map_pool) map_pool->visit(prefix + "/map_pool", fn);
        fn(prefix + "/proj", proj, false);
    }
};

struct DecoderParams {
    Tensor img_in_w, img_in_b;  // image encoder width -> decoder width
    Tensor txt_in_w, txt_in_b;  // text encoder width -> decoder width
    Tensor img_mask_token;      // 1 x decoder width, shared across positions
    Tensor txt_mask_token;      // 1 x decoder width
    Tensor img_modality;        // decoder width
    Tensor txt_modality;        // decoder width
    PosEncoding2D img_pos;      // fixed, decoder width
    Tensor txt_pos;             // max_seq x decoder width, trainable
    TransformerParams trunk;
    Tensor img_head_w, img_head_b;  // decoder width -> patch pixels
    Tensor txt_head_w, txt_head_b;  // decoder width -> vocab

    static DecoderParams init(const MAECLIPConfig& cfg, Rng& rng) {
        DecoderParams p;
        const int dw = cfg.decoder.width;
        p.img_in_w = init_weight(cfg.image_encoder.width, dw, rng);
        p.img_in_b = init_bias(dw);
        p.txt_in_w = init_weight(cfg.text_encoder.width, dw, rng);
        p.txt_in_b = init_bias(dw);
        p.img_mask_token = init_weight(1, dw, rng);
        p.txt_mask_token = init_weight(1, dw, rng);
        p.img_modality = init_vector(dw, rng);
        p.txt_modality = init_vector(dw, rng);
        p.img_pos = pos_encoding_2d(cfg.grid(), cfg.grid(), dw);
        p.txt_pos = init_weight(cfg.text_encoder.max_seq, dw, rng);
        p.trunk = TransformerParams::init(cfg.decoder, rng);
        p.img_head_w = init_weight(dw, cfg.patch_pixels(), rng);
        p.img_head_b = init_bias(cfg.patch_pixels());
        p.txt_head_w = init_weight(dw, cfg.text_encoder.vocab_size, rng);
        p.txt_head_b = init_bias(cfg.text_encoder.vocab_size);
        return p;
    }

    void visit(const std::string& prefix, const ParamVisitor& fn) {
        fn(prefix + "/img_in_w", img_in_w, false);
        fn(prefix + "/img_in_b", img_in_b, false);
        fn(prefix + "/txt_in_w", txt_in_w, false);
        fn(prefix + "/txt_in_b", txt_in_b, false);
        fn(prefix + "/img_mask_token", img_mask_token, false);
        fn(prefix + "/txt_mask_token", txt_mask_token, false);
        fn(prefix + "/img_modality", img_modality, false);
        fn(prefix + "/txt_modality", txt_modality, false);
        fn(prefix + "/txt_pos", txt_pos, false);
        trunk.visit(prefix + "/trunk", fn);
        fn(prefix + "/img_head_w", img_head_w, false);
        fn(prefix + "/img_head_b", img_head_b, false);
        fn(prefix + "/txt_head_w", txt_head_w, false);
        fn(prefix + "/txt_head_b", txt_head_b, false);
    }
};

/// Effective inverse temperature never exceeds this bound (CLIP convention).
constexpr double kMaxInverseTemperature = 100.0;

struct MAECLIPParams {
    ImageEncoderParams image;
    TextEncoderParams text;
    DecoderParams decoder;
    Tensor log_inv_temperature;  // single learnable scalar

    static MAECLIPParams init(const MAECLIPConfig& cfg, Rng& rng) {
        cfg.validate();
        MAECLIPParams p;
        p.image.patch_proj_w = init_weight(cfg.patch_pixels(), cfg.image_encoder.width, rng);
        p.image.patch_proj_b = init_bias(cfg.image_encoder.width);
        p.image.pos = pos_encoding_2d(cfg.grid(), cfg.grid(), cfg.image_encoder.width);
        p.image.trunk = TransformerParams::init(cfg.image_encoder, rng);
        if (cfg.pooling == Pooling::kMAP) p.image.map_pool = MapPoolParams::init(cfg.image_encoder.width, rng);
        p.image.proj = init_weight(cfg.image_encoder.width, cfg.embed_dim, rng);

        p.text.token_embed = init_weight(cfg.text_encoder.vocab_size, cfg.text_encoder.width, rng);
        p.text.pos_embed = init_weight(cfg.text_encoder.max_seq, cfg.text_encoder.width, rng);
        p.text.trunk = TransformerParams::init(cfg.text_encoder, rng);
        if (cfg.pooling == Pooling::kMAP) p.text.map_pool = MapPoolParams::init(cfg.text_encoder.width, rng);
        p.text.proj = init_weight(cfg.text_encoder.width, cfg.embed_dim, rng);

        p.decoder = DecoderParams::init(cfg, rng);
        p.log_inv_temperature = Tensor::scalar(std::log(1.0 / cfg.temperature_init), true);
        return p;
    }

    void visit_encoders(const ParamVisitor& fn) {
        image.visit("image", fn);
        text.visit("text", fn);
        fn("temperature/log_inv", log_inv_temperature, true);
    }

    void visit(const ParamVisitor& fn) {
        visit_encoders(fn);
        decoder.visit("decoder", fn);
    }

    std::vector<Tensor> all_tensors() {
        std::vector<Tensor> out;
        visit([&](const std::string&, Tensor& t, bool) { out.push_back(t); });
        return out;
    }
};

// --------------------------------------------------------------------------
// Forward passes
// --------------------------------------------------------------------------

/// Clamped inverse temperature 1/sigma as a differentiable scalar.
inline Tensor inverse_temperature(const MAECLIPParams& params) {
    return clamp_max(exp(params.log_inv_temperature), kMaxInverseTemperature);
}

/// Patch features of an image. With `visible` given, only kept patches are
/// embedded and passed through the trunk (masked pixel content never enters
/// the computation). Returns one row per visible patch.
inline Tensor encode_image(const MAECLIPConfig& cfg, const ImageEncoderParams& p, const Image& img,
                           const MaskSpec* visible = nullptr) {
    if (img.height != cfg.image_size || img.width != cfg.image_size || img.channels != cfg.channels)
        throw DimensionError("encode_image: image extents do not match the configured size");
    const int pp = cfg.patch_pixels();
    const int n = cfg.n_patches();
    Tensor patches = patchify(img, cfg.patch_size);
    std::vector<int> kept;
    if (visible) {
        if (visible->total() != n) throw ContractError("encode_image: mask does not cover the patch grid");
        kept = visible->kept;
    } else {
        kept.resize(n);
        for (int i = 0; i < n; ++i) kept[i] = i;
    }
    // Copy kept patch rows into a fresh constant so masked pixels are
    // provably invisible to the graph.
    std::vector<double> kept_data(kept.size() * static_cast<size_t>(pp));
    const auto& pv = patches.data();
    for (size_t i = 0; i < kept.size(); ++i)
        std::copy_n(pv.data() + static_cast<size_t>(kept[i]) * pp, pp, kept_data.data() + i * pp);
    Tensor x = Tensor::from_data(std::move(kept_data), {static_cast<int>(kept.size()), pp});

    std::vector<double> pos_rows(kept.size() * static_cast<size_t>(cfg.image_encoder.width));
    const auto& pos = p.pos.table.data();
    for (size_t i = 0; i < kept.size(); ++i)
        std::copy_n(pos.data() + static_cast<size_t>(kept[i]) * cfg.image_encoder.width, cfg.image_encoder.width,
                    pos_rows.data() + i * cfg.image_encoder.width);
    Tensor pos_t = Tensor::from_data(std::move(pos_rows), {static_cast<int>(kept.size()), cfg.image_encoder.width});

    Tensor embedded = add(add_rowvec(matmul(x, p.patch_proj_w), p.patch_proj_b), pos_t);
    return transformer_stack(embedded, p.trunk, cfg.image_encoder.heads);
}

/// Token features. With `visible` given, only kept token positions are
/// embedded (position encodings follow the original indices).
inline Tensor encode_text(const MAECLIPConfig& cfg, const TextEncoderParams& p, const std::vector<int>& tokens,
                          const MaskSpec* visible = nullptr) {
    const int t = static_cast<int>(tokens.size());
    if (t == 0) throw DimensionError("encode_text: empty token sequence");
    if (t > cfg.text_encoder.max_seq)
        throw DimensionError("encode_text: sequence length " + std::to_string(t) + " exceeds max_seq");
    for (int id : tokens)
        if (id < 0 || id >= cfg.text_encoder.vocab_size) throw IndexError("encode_text: token id out of range");
    std::vector<int> positions;
    if (visible) {
        if (visible->total() != t) throw ContractError("encode_text: mask does not cover the token sequence");
        positions = visible->kept;
    } else {
        positions.resize(t);
        for (int i = 0; i < t; ++i) positions[i] = i;
    }
    std::vector<int> ids(positions.size());
    for (size_t i = 0; i < positions.size(); ++i) ids[i] = tokens[positions[i]];
    Tensor embedded = add(take_rows(p.token_embed, ids), take_rows(p.pos_embed, positions));
    return transformer_stack(embedded, p.trunk, cfg.text_encoder.heads);
}

/// Aggregate per-position features into a single width-dim vector.
inline Tensor pool(const Tensor& features, Pooling strategy, const MapPoolParams* map_params, int heads) {
    if (features.rows() < 1) throw DimensionError("pool: need at least one feature row");
    switch (strategy) {
        case Pooling::kGAP: return mean_rows(features);
        case Pooling::kMAX: return max_rows(features);
        case Pooling::kMAP: {
            if (!map_params) throw ConfigError("pool: MAP pooling requires learned query parameters");
            const int d = features.cols();
            if (d % heads != 0) throw ConfigError("pool: width not divisible by head count");
            const int hd = d / heads;
            Tensor keys = add_rowvec(matmul(features, map_params->key_w), map_params->key_b);
            const double inv_sqrt_hd = 1.0 / std::sqrt(static_cast<double>(hd));
            std::vector<Tensor> head_outs;
            head_outs.reserve(heads);
            for (int h = 0; h < heads; ++h) {
                Tensor qh = slice(map_params->query, 1, h * hd, (h + 1) * hd);
                Tensor kh = slice(keys, 1, h * hd, (h + 1) * hd);
                Tensor vh = slice(features, 1, h * hd, (h + 1) * hd);
                Tensor weights = softmax_rows(scale(matmul(qh, transpose(kh)), inv_sqrt_hd));  // 1 x s
                head_outs.push_back(matmul(weights, vh));                                      // 1 x hd
            }
            Tensor merged = heads == 1 ? head_outs[0] : concat(head_outs, 1);
            return reshape(merged, {d});
        }
    }
    throw ConfigError("pool: unknown strategy");
}

/// Pooled feature -> shared embedding space, l2-normalized.
inline Tensor project_embedding(const Tensor& pooled, const Tensor& proj) {
    Tensor row = matmul(reshape(pooled, {1, pooled.shape()[0]}), proj);
    return l2_normalize(reshape(row, {proj.cols()}));
}

inline Tensor embed_image(const MAECLIPConfig& cfg, const ImageEncoderParams& p, const Image& img) {
    Tensor feats = encode_image(cfg, p, img);
    Tensor pooled = pool(feats, cfg.pooling, p.map_pool ? &*p.map_pool : nullptr, cfg.image_encoder.heads);
    return project_embedding(pooled, p.proj);
}

inline Tensor embed_text(const MAECLIPConfig& cfg, const TextEncoderParams& p, const std::vector<int>& tokens) {
    Tensor feats = encode_text(cfg, p, tokens);
    Tensor pooled = pool(feats, cfg.pooling, p.map_pool ? &*p.map_pool : nullptr, cfg.text_encoder.heads);
    return project_embedding(pooled, p.proj);
}

/// One image-text pair -> a pair of unit-norm embedding rows.
struct PairEmbedding {
    Tensor image;  // embed_dim
    Tensor text;   // embed_dim
};

inline PairEmbedding embed_pair(const MAECLIPConfig& cfg, const MAECLIPParams& params, const Image& img,
                                const std::vector<int>& tokens) {
    return {embed_image(cfg, params.image, img), embed_text(cfg, params.text, tokens)};
}

// --------------------------------------------------------------------------
// Cross-modality decoder
// --------------------------------------------------------------------------

struct DecodeResult {
    std::optional<Tensor> patch_preds;   // |masked image| x patch_pixels
    std::optional<Tensor> token_logits;  // |masked text| x vocab
};

namespace detail_model {

/// Reassemble a full-length sequence from kept-position features plus the
/// shared mask token at masked positions, then add positional rows (fixed
/// table data) and the modality embedding.
inline Tensor assemble_decoder_sequence(const Tensor& kept_feats, const MaskSpec& mask, const Tensor& mask_token,
                                        const Tensor& pos_rows, const Tensor& modality) {
    const int total = mask.total();
    Tensor full;
    if (mask.masked.empty()) {
        full = kept_feats;
    } else {
        const int v = static_cast<int>(mask.kept.size());
        Tensor mask_rows = take_rows(mask_token, std::vector<int>(mask.masked.size(), 0));
        Tensor stacked = concat({kept_feats, mask_rows}, 0);
        std::vector<int> perm(total);
        size_t ki = 0, mi = 0;
        for (int pos = 0; pos < total; ++pos) {
            if (ki < mask.kept.size() && mask.kept[ki] == pos)
                perm[pos] = static_cast<int>(ki++);
            else
                perm[pos] = v + static_cast<int>(mi++);
        }
        full = take_rows(stacked, perm);
    }
    return add_rowvec(add(full, pos_rows), modality);
}

}  // namespace detail_model

/// Joint decoder pass. `img_feats` / `txt_feats` hold encoder outputs for
/// the kept positions of each mask; masked positions are filled with each
/// modality's trainable mask token, positional encodings are re-added, a
/// per-modality embedding is added, and the joint sequence runs through the
/// decoder trunk. Outputs are projections of the decoder features at masked
/// positions only.
inline DecodeResult decode_cross_modal(const MAECLIPConfig& cfg, const DecoderParams& p, const Tensor& img_feats,
                                       const Tensor& txt_feats, const MaskSpec& img_mask, const MaskSpec& txt_mask) {
    if (img_feats.rows() != static_cast<int>(img_mask.kept.size()))
        throw ContractError("decode: image feature rows must match kept patch count");
    if (txt_feats.rows() != static_cast<int>(txt_mask.kept.size()))
        throw ContractError("decode: text feature rows must match kept token count");
    if (img_mask.total() != cfg.n_patches()) throw ContractError("decode: image mask does not cover the patch grid");
    const int n_img = img_mask.total();
    const int n_txt = txt_mask.total();
    if (n_txt > cfg.text_encoder.max_seq) throw ContractError("decode: text mask longer than max_seq");

    Tensor img_in = add_rowvec(matmul(img_feats, p.img_in_w), p.img_in_b);
    Tensor txt_in = add_rowvec(matmul(txt_feats, p.txt_in_w), p.txt_in_b);

    Tensor img_seq = detail_model::assemble_decoder_sequence(img_in, img_mask, p.img_mask_token, p.img_pos.table,
                                                             p.img_modality);
    std::vector<int> txt_positions(n_txt);
    for (int i = 0; i < n_txt; ++i) txt_positions[i] = i;
    Tensor txt_pos_rows = take_rows(p.txt_pos, txt_positions);
    Tensor txt_seq = detail_model::assemble_decoder_sequence(txt_in, txt_mask, p.txt_mask_token, txt_pos_rows,
                                                             p.txt_modality);

    Tensor joint = concat({img_seq, txt_seq}, 0);
    Tensor decoded = transformer_stack(joint, p.trunk, cfg.decoder.heads);

    DecodeResult result;
    if (!img_mask.masked.empty()) {
        Tensor rows = take_rows(decoded, img_mask.masked);  // image block occupies rows [0, n_img)
        result.patch_preds = add_rowvec(matmul(rows, p.img_head_w), p.img_head_b);
    }
    if (!txt_mask.masked.empty()) {
        std::vector<int> joint_rows(txt_mask.masked.size());
        for (size_t i = 0; i < txt_mask.masked.size(); ++i) joint_rows[i] = n_img + txt_mask.masked[i];
        Tensor rows = take_rows(decoded, joint_rows);
        result.token_logits = add_rowvec(matmul(rows, p.txt_head_w), p.txt_head_b);
    }
    return result;
}

/// Decoder feature at the BOS position of the text block with everything
/// visible (the VQA classification token).
inline Tensor decode_bos_feature(const MAECLIPConfig& cfg, const DecoderParams& p, const Tensor& img_feats,
                                 const Tensor& txt_feats) {
    const int n_img = cfg.n_patches();
    MaskSpec img_mask = MaskSpec::all_visible(MaskSpec::Modality::kImage, img_feats.rows());
    MaskSpec txt_mask = MaskSpec::all_visible(MaskSpec::Modality::kText, txt_feats.rows());
    Tensor img_in = add_rowvec(matmul(img_feats, p.img_in_w), p.img_in_b);
    Tensor txt_in = add_rowvec(matmul(txt_feats, p.txt_in_w), p.txt_in_b);
    Tensor img_seq = detail_model::assemble_decoder_sequence(img_in, img_mask, p.img_mask_token, p.img_pos.table,
                                                             p.img_modality);
    std::vector<int> txt_positions(txt_feats.rows());
    for (int i = 0; i < txt_feats.rows(); ++i) txt_positions[i] = i;
    Tensor txt_pos_rows = take_rows(p.txt_pos, txt_positions);
    Tensor txt_seq = detail_model::assemble_decoder_sequence(txt_in, txt_mask, p.txt_mask_token, txt_pos_rows,
                                                             p.txt_modality);
    Tensor decoded = transformer_stack(concat({img_seq, txt_seq}, 0), p.trunk, cfg.decoder.heads);
    return slice(decoded, 0, n_img, n_img + 1);  // 1 x decoder width
}

}  // namespace maeclip
