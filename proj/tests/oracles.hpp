// Test-only reference implementations. Everything here is written as plain
// scalar loops, independent of the library's tensor/op code paths, so the
// two can be checked against each other.
#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <numeric>
#include <vector>

namespace oracle {

// C[m x n] = A[m x k] * B[k x n], triple loop.
inline std::vector<double> matmul(const std::vector<double>& a, const std::vector<double>& b, int m, int k, int n) {
    std::vector<double> c(static_cast<size_t>(m) * n, 0.0);
    for (int i = 0; i < m; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int p = 0; p < k; ++p) s += a[i * k + p] * b[p * n + j];
            c[i * n + j] = s;
        }
    return c;
}

// Mean over rows of -log softmax(logits)[target].
inline double cross_entropy(const std::vector<double>& logits, const std::vector<int>& targets, int n, int classes) {
    double total = 0.0;
    for (int i = 0; i < n; ++i) {
        double mx = logits[i * classes];
        for (int j = 1; j < classes; ++j) mx = std::max(mx, logits[i * classes + j]);
        double denom = 0.0;
        for (int j = 0; j < classes; ++j) denom += std::exp(logits[i * classes + j] - mx);
        total += -(logits[i * classes + targets[i]] - mx - std::log(denom));
    }
    return total / n;
}

// Mean squared error over every element.
inline double mse(const std::vector<double>& pred, const std::vector<double>& target) {
    double s = 0.0;
    for (size_t i = 0; i < pred.size(); ++i) {
        const double d = pred[i] - target[i];
        s += d * d;
    }
    return s / static_cast<double>(pred.size());
}

// InfoNCE pair from an N x N similarity matrix (already divided by the
// temperature). Returns {image-to-text, text-to-image}.
struct ContrastivePair {
    double i2t;
    double t2i;
};
inline ContrastivePair contrastive(const std::vector<double>& logits, int n) {
    std::vector<int> diag(n);
    std::iota(diag.begin(), diag.end(), 0);
    const double i2t = cross_entropy(logits, diag, n, n);
    std::vector<double> t(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) t[j * n + i] = logits[i * n + j];
    const double t2i = cross_entropy(t, diag, n, n);
    return {i2t, t2i};
}

// Top-k indices by descending score, ties broken toward the lower index.
inline std::vector<int> top_k(const std::vector<double>& scores, int k) {
    std::vector<int> idx(scores.size());
    std::iota(idx.begin(), idx.end(), 0);
    std::stable_sort(idx.begin(), idx.end(), [&](int a, int b) { return scores[a] > scores[b]; });
    idx.resize(k);
    std::sort(idx.begin(), idx.end());
    return idx;
}

// Recall@k by brute-force ranking: for query row q of `query`, the rank of
// candidate row q in `keys` is the number of candidates scoring strictly
// higher, plus the number of equal-scoring candidates with lower index.
inline double recall_at_k(const std::vector<std::vector<double>>& query,
                          const std::vector<std::vector<double>>& keys, int k) {
    const int n = static_cast<int>(query.size());
    int hits = 0;
    for (int q = 0; q < n; ++q) {
        std::vector<double> sims(n);
        for (int c = 0; c < n; ++c) {
            double s = 0.0;
            for (size_t j = 0; j < query[q].size(); ++j) s += query[q][j] * keys[c][j];
            sims[c] = s;
        }
        int rank = 0;
        for (int c = 0; c < n; ++c) {
            if (c == q) continue;
            if (sims[c] > sims[q] || (sims[c] == sims[q] && c < q)) ++rank;
        }
        if (rank < k) ++hits;
    }
    return static_cast<double>(hits) / n;
}

// Mean IoU over classes present in gt, from explicit confusion counts.
inline double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
    std::vector<long> inter(num_classes, 0), pred_cnt(num_classes, 0), gt_cnt(num_classes, 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        ++pred_cnt[pred[i]];
        ++gt_cnt[gt[i]];
        if (pred[i] == gt[i]) ++inter[pred[i]];
    }
    double total = 0.0;
    int present = 0;
    for (int c = 0; c < num_classes; ++c) {
        if (gt_cnt[c] == 0) continue;
        const long uni = pred_cnt[c] + gt_cnt[c] - inter[c];
        total += static_cast<double>(inter[c]) / static_cast<double>(uni);
        ++present;
    }
    return present == 0 ? 0.0 : total / present;
}

// One AdamW step on a single scalar, decoupled decay.
struct AdamWScalar {
    double m = 0.0;
    double v = 0.0;
    int t = 0;
    double step(double p, double g, double lr, double beta1, double beta2, double eps, double wd) {
        ++t;
        m = beta1 * m + (1.0 - beta1) * g;
        v = beta2 * v + (1.0 - beta2) * g * g;
        const double mhat = m / (1.0 - std::pow(beta1, t));
        const double vhat = v / (1.0 - std::pow(beta2, t));
        return p * (1.0 - lr * wd) - lr * mhat / (std::sqrt(vhat) + eps);
    }
};

}  // namespace oracle
