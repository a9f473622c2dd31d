#pragma once

#include <algorithm>
#include <cmath>
#include <numeric>
#include <optional>
#include <vector>

#include "maeclip/errors.hpp"
#include "maeclip/model.hpp"
#include "maeclip/rng.hpp"
#include "maeclip/tensor.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Contrastive (InfoNCE) losses
// --------------------------------------------------------------------------

struct ContrastiveLosses {
    Tensor i2t;       // image-to-text
    Tensor t2i;       // text-to-image
    Tensor combined;  // (i2t + t2i) / 2
};

/// Pairwise InfoNCE over a batch of unit-norm embedding rows. `inv_sigma`
/// is the (differentiable) inverse temperature 1/sigma applied to all
/// similarity logits; row j of each matrix is a matched pair, everything
/// else in the batch serves as a negative.
inline ContrastiveLosses contrastive_loss(const EmbeddingPair& pair, const Tensor& inv_sigma) {
    const int n = pair.x.rows();
    if (pair.y.rows() != n || pair.x.cols() != pair.y.cols())
        throw DimensionError("contrastive_loss: embedding matrices must have matching shapes");
    std::vector<int> diagonal(n);
    std::iota(diagonal.begin(), diagonal.end(), 0);
    Tensor logits = mul_scalar(matmul(pair.x, transpose(pair.y)), inv_sigma);
    ContrastiveLosses out;
    out.i2t = softmax_cross_entropy(logits, diagonal);
    out.t2i = softmax_cross_entropy(transpose(logits), diagonal);
    out.combined = scale(add(out.i2t, out.t2i), 0.5);
    return out;
}

// --------------------------------------------------------------------------
// Generative losses
// --------------------------------------------------------------------------

constexpr double kPatchNormEps = 1e-6;

/// Per-patch target normalization: (x - mean) / (std + eps) with population
/// std, each row independently. Targets carry no gradient; the result is a
/// fresh constant.
inline Tensor patch_normalize(const Tensor& target, double eps = kPatchNormEps) {
    if (eps <= 0.0) throw ConfigError("patch_normalize: eps must be positive");
    const bool vec = target.rank() == 1;
    const int rows = vec ? 1 : target.rows();
    const int cols = vec ? target.shape()[0] : target.cols();
    const auto& tv = target.data();
    std::vector<double> out(tv.size());
    for (int i = 0; i < rows; ++i) {
        const double* row = tv.data() + static_cast<size_t>(i) * cols;
        double mean = 0.0;
        for (int j = 0; j < cols; ++j) mean += row[j];
        mean /= cols;
        double var = 0.0;
        for (int j = 0; j < cols; ++j) var += (row[j] - mean) * (row[j] - mean);
        const double stddev = std::sqrt(var / cols);
        for (int j = 0; j < cols; ++j) out[static_cast<size_t>(i) * cols + j] = (row[j] - mean) / (stddev + eps);
    }
    return Tensor::from_data(std::move(out), target.shape());
}

/// Mean squared error over all masked pixel positions. `targets` holds raw
/// pixel rows (one per masked patch) and is normalized per patch first when
/// `normalize` is set.
inline Tensor gen_image_loss(const Tensor& preds, const Tensor& targets, bool normalize) {
    if (preds.shape() != targets.shape()) throw DimensionError("gen_image_loss: prediction/target shape mismatch");
    Tensor t = normalize ? patch_normalize(targets) : targets.detach();
    Tensor diff = sub(preds, t);
    return mean(mul(diff, diff));
}

/// Cross-entropy over the vocabulary, averaged over masked tokens.
inline Tensor gen_text_loss(const Tensor& logits, const std::vector<int>& targets) {
    return softmax_cross_entropy(logits, targets);
}

// --------------------------------------------------------------------------
// Total loss (weighted multitask sum)
// --------------------------------------------------------------------------

struct LossBreakdown {
    double l_i2t = 0.0;
    double l_t2i = 0.0;
    double l_c = 0.0;
    double l_gen_i = 0.0;
    double l_gen_t = 0.0;
    double w_i = 0.0;
    double w_t = 0.0;
    double total = 0.0;
};

struct TotalLoss {
    Tensor graph;  // scalar node for backward
    LossBreakdown breakdown;
};

/// total = (l_i2t + l_t2i)/2 + w_i * l_gen_i + w_t * l_gen_t. Generative
/// terms may be absent (contrastive-only modes), contributing zero.
inline TotalLoss total_loss(const ContrastiveLosses& contrastive, const std::optional<Tensor>& l_gen_i,
                            const std::optional<Tensor>& l_gen_t, double w_i, double w_t) {
    if (w_i < 0.0 || w_t < 0.0) throw ConfigError("total_loss: weights must be non-negative");
    TotalLoss out;
    out.graph = contrastive.combined;
    if (l_gen_i && w_i != 0.0) out.graph = add(out.graph, scale(*l_gen_i, w_i));
    if (l_gen_t && w_t != 0.0) out.graph = add(out.graph, scale(*l_gen_t, w_t));
    auto& b = out.breakdown;
    b.l_i2t = contrastive.i2t.item();
    b.l_t2i = contrastive.t2i.item();
    b.l_c = contrastive.combined.item();
    b.l_gen_i = l_gen_i ? l_gen_i->item() : 0.0;
    b.l_gen_t = l_gen_t ? l_gen_t->item() : 0.0;
    b.w_i = w_i;
    b.w_t = w_t;
    b.total = b.l_c + w_i * b.l_gen_i + w_t * b.l_gen_t;
    return out;
}

// --------------------------------------------------------------------------
// Masking strategies
// --------------------------------------------------------------------------

inline int masked_count(int candidates, double ratio) {
    if (ratio <= 0.0 || ratio >= 1.0) throw ConfigError("mask ratio must lie in (0, 1)");
    return static_cast<int>(std::lround(ratio * candidates));
}

/// Uniformly random mask over a candidate subset of [0, total).
inline MaskSpec random_subset_mask(MaskSpec::Modality modality, int total, const std::vector<int>& candidates,
                                   double ratio, Rng& rng) {
    const int m = masked_count(static_cast<int>(candidates.size()), ratio);
    std::vector<int> pool = candidates;
    rng.shuffle(pool);
    pool.resize(m);
    return MaskSpec::from_masked(modality, total, std::move(pool));
}

/// Uniformly random mask: exactly round(ratio * n) of n positions.
inline MaskSpec random_mask(MaskSpec::Modality modality, int n_positions, double ratio, Rng& rng) {
    std::vector<int> all(n_positions);
    std::iota(all.begin(), all.end(), 0);
    return random_subset_mask(modality, n_positions, all, ratio, rng);
}

/// Mask the candidates with the highest scores; ties break toward the lower
/// index. `scores[i]` belongs to `candidates[i]`.
inline MaskSpec similarity_subset_mask(MaskSpec::Modality modality, int total, const std::vector<int>& candidates,
                                       const std::vector<double>& scores, double ratio) {
    if (scores.size() != candidates.size())
        throw DimensionError("similarity mask: one score per candidate required");
    const int m = masked_count(static_cast<int>(candidates.size()), ratio);
    std::vector<int> order(candidates.size());
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    std::vector<int> masked(m);
    for (int i = 0; i < m; ++i) masked[i] = candidates[order[i]];
    return MaskSpec::from_masked(modality, total, std::move(masked));
}

inline MaskSpec similarity_mask(MaskSpec::Modality modality, const std::vector<double>& scores, double ratio) {
    std::vector<int> all(scores.size());
    std::iota(all.begin(), all.end(), 0);
    return similarity_subset_mask(modality, static_cast<int>(scores.size()), all, scores, ratio);
}

/// Token positions eligible for masking: content only, never the reserved
/// BOS/EOS/PAD/MASK ids.
inline std::vector<int> maskable_token_positions(const std::vector<int>& tokens) {
    std::vector<int> out;
    for (size_t i = 0; i < tokens.size(); ++i)
        if (tokens[i] >= Vocab::kReserved) out.push_back(static_cast<int>(i));
    return out;
}

// --------------------------------------------------------------------------
// Cross-modal similarity scores for similarity masking
// --------------------------------------------------------------------------

/// Cosine similarity of each row of `position_feats` (already projected to
/// the shared embedding space) against a unit-norm reference embedding.
/// Value-level: mask selection takes no gradient.
inline std::vector<double> elementwise_similarity(const Tensor& position_feats, const Tensor& reference,
                                                  double eps = 1e-8) {
    const int s = position_feats.rows();
    const int d = position_feats.cols();
    if (reference.rank() != 1 || reference.shape()[0] != d)
        throw DimensionError("elementwise_similarity: reference length must match feature width");
    const auto& fv = position_feats.data();
    const auto& rv = reference.data();
    std::vector<double> out(static_cast<size_t>(s));
    for (int i = 0; i < s; ++i) {
        const double* row = fv.data() + static_cast<size_t>(i) * d;
        double sq = 0.0, dp = 0.0;
        for (int j = 0; j < d; ++j) {
            sq += row[j] * row[j];
            dp += row[j] * rv[j];
        }
        out[i] = dp / std::max(std::sqrt(sq), eps);
    }
    return out;
}

/// Per-position features projected into the shared embedding space, as
/// plain values (detached from the graph).
inline Tensor project_positions(const Tensor& feats, const Tensor& proj) {
    return matmul(feats.detach(), proj.detach());
}

}  // namespace maeclip
