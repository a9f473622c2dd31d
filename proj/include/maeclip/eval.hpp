#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "maeclip/config.hpp"
#include "maeclip/data.hpp"
#include "maeclip/losses.hpp"
#include "maeclip/model.hpp"
#include "maeclip/optim.hpp"
#include "maeclip/training.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Prompts
// --------------------------------------------------------------------------

/// Templates with one {} slot each, class names (possibly several aliases
/// per class), and optional background names for segmentation.
struct PromptSet {
    std::vector<std::string> templates;
    std::vector<std::vector<std::string>> classes;
    std::vector<std::string> background_names;

    void validate() const {
        if (templates.empty()) throw ConfigError("prompt set has no templates");
        for (const auto& t : templates) {
            const auto first = t.find("{}");
            if (first == std::string::npos || t.find("{}", first + 1) != std::string::npos)
                throw ConfigError("template '" + t + "' must contain exactly one {} slot");
        }
        if (classes.empty()) throw ConfigError("prompt set has no classes");
        for (const auto& c : classes)
            if (c.empty()) throw ConfigError("every class needs at least one name");
    }

    static PromptSet single_names(std::vector<std::string> templates, const std::vector<std::string>& names) {
        PromptSet p;
        p.templates = std::move(templates);
        for (const auto& n : names) p.classes.push_back({n});
        return p;
    }
};

/// One template per line; blank lines and # comments skipped.
inline std::vector<std::string> load_prompt_templates(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open prompt file " + path);
    std::vector<std::string> out;
    std::string line;
    while (std::getline(in, line)) {
        if (!line.empty() && line.back() == '\r') line.pop_back();
        if (line.empty() || line[0] == '#') continue;
        out.push_back(line);
    }
    if (out.empty()) throw ConfigError("prompt file " + path + " has no templates");
    return out;
}

inline std::string fill_template(const std::string& tmpl, const std::string& name) {
    const auto pos = tmpl.find("{}");
    if (pos == std::string::npos) throw ConfigError("template missing {} slot");
    std::string out = tmpl;
    out.replace(pos, 2, name);
    return out;
}

// --------------------------------------------------------------------------
// Class embeddings and zero-shot classification
// --------------------------------------------------------------------------

/// Prompt-ensembled text embedding of one name: embed each filled template,
/// l2-normalize each, average, re-normalize the mean.
inline Tensor name_embedding(const MAECLIPConfig& cfg, const MAECLIPParams& params, const std::string& name,
                             const std::vector<std::string>& templates, const Vocab& vocab) {
    if (templates.empty()) throw ConfigError("name_embedding: no templates");
    Tensor mean_emb;
    for (size_t i = 0; i < templates.size(); ++i) {
        Tensor e = embed_text(cfg, params.text, tokenize(fill_template(templates[i], name), vocab)).detach();
        mean_emb = i == 0 ? e : add(mean_emb, e);
    }
    return l2_normalize(scale(mean_emb, 1.0 / static_cast<double>(templates.size()))).detach();
}

/// K x embed_dim matrix of ensembled class embeddings, one row per class
/// (first alias of each class).
inline Tensor class_embeddings(const MAECLIPConfig& cfg, const MAECLIPParams& params, const PromptSet& prompts,
                               const Vocab& vocab) {
    prompts.validate();
    std::vector<Tensor> rows;
    for (const auto& aliases : prompts.classes)
        rows.push_back(reshape(name_embedding(cfg, params, aliases[0], prompts.templates, vocab), {1, cfg.embed_dim}));
    return (rows.size() == 1 ? rows[0] : concat(rows, 0)).detach();
}

/// Argmax over cosine similarities; ties go to the lowest class index.
inline int nearest_class(const std::vector<double>& embedding, const Tensor& class_embs) {
    const int k = class_embs.rows();
    const int d = class_embs.cols();
    int best = 0;
    double best_sim = -std::numeric_limits<double>::infinity();
    for (int c = 0; c < k; ++c) {
        double s = 0.0;
        for (int j = 0; j < d; ++j) s += embedding[j] * class_embs.at(c, j);
        if (s > best_sim) {
            best_sim = s;
            best = c;
        }
    }
    return best;
}

struct ZeroShotResult {
    std::vector<int> predictions;
    double accuracy = 0.0;
};

inline ZeroShotResult zero_shot_classify(const MAECLIPConfig& cfg, const MAECLIPParams& params,
                                         const std::vector<Image>& images, const Tensor& class_embs,
                                         const std::vector<int>& labels) {
    if (images.empty()) throw ContractError("zero_shot_classify: no images");
    ZeroShotResult out;
    int correct = 0;
    for (size_t i = 0; i < images.size(); ++i) {
        Tensor emb = embed_image(cfg, params.image, images[i]);
        const int pred = nearest_class(emb.data(), class_embs);
        out.predictions.push_back(pred);
        if (!labels.empty() && pred == labels[i]) ++correct;
    }
    out.accuracy = labels.empty() ? 0.0 : static_cast<double>(correct) / static_cast<double>(images.size());
    return out;
}

// --------------------------------------------------------------------------
// Linear probe
// --------------------------------------------------------------------------

struct ProbeConfig {
    int epochs = 40;  // one full-batch step per epoch
    double lr = 0.01;
    double weight_decay = 0.0;
    double heldout_fraction = 0.25;  // 0 evaluates on the training rows
    uint64_t seed = 11;
};

/// Accuracy of a linear softmax classifier trained with AdamW on frozen
/// features. Features are used as-is (no augmentation); the held-out split
/// is a deterministic function of the probe seed.
inline double linear_probe(const Tensor& features, const std::vector<int>& labels, const ProbeConfig& cfg) {
    const int n = features.rows();
    const int d = features.cols();
    if (static_cast<int>(labels.size()) != n) throw DimensionError("linear_probe: one label per feature row");
    const int num_classes = labels.empty() ? 0 : *std::max_element(labels.begin(), labels.end()) + 1;
    std::vector<int> distinct(labels.begin(), labels.end());
    std::sort(distinct.begin(), distinct.end());
    distinct.erase(std::unique(distinct.begin(), distinct.end()), distinct.end());
    if (distinct.size() < 2) throw ContractError("linear_probe: degenerate task with a single class");

    std::vector<int> order(n);
    std::iota(order.begin(), order.end(), 0);
    Rng split_rng(cfg.seed);
    split_rng.shuffle(order);
    const int heldout = static_cast<int>(std::lround(cfg.heldout_fraction * n));
    std::vector<int> eval_rows(order.begin(), order.begin() + heldout);
    std::vector<int> train_rows(order.begin() + heldout, order.end());
    if (train_rows.empty()) throw ContractError("linear_probe: empty training split");
    if (eval_rows.empty()) eval_rows = train_rows;

    Tensor train_x = take_rows(features, train_rows).detach();
    std::vector<int> train_y;
    for (int r : train_rows) train_y.push_back(labels[r]);

    Tensor w = Tensor::zeros({d, num_classes}, true);
    Tensor b = Tensor::zeros({num_classes}, true);
    AdamW opt({{"probe/w", w, false, 1.0}, {"probe/b", b, true, 1.0}},
              AdamWConfig{0.9, 0.98, 1e-6, cfg.weight_decay});
    for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
        opt.zero_grad();
        Tensor loss = softmax_cross_entropy(add_rowvec(matmul(train_x, w), b), train_y);
        backward(loss);
        opt.step(cfg.lr);
    }
    opt.zero_grad();

    Tensor eval_x = take_rows(features, eval_rows).detach();
    Tensor logits = add_rowvec(matmul(eval_x, w), b);
    int correct = 0;
    for (size_t i = 0; i < eval_rows.size(); ++i) {
        int best = 0;
        for (int c = 1; c < num_classes; ++c)
            if (logits.at(static_cast<int>(i), c) > logits.at(static_cast<int>(i), best)) best = c;
        if (best == labels[eval_rows[i]]) ++correct;
    }
    return static_cast<double>(correct) / static_cast<double>(eval_rows.size());
}

/// Pooled (pre-projection) image-encoder features for a set of images.
inline Tensor encoder_features(const MAECLIPConfig& cfg, const MAECLIPParams& params,
                               const std::vector<Image>& images) {
    std::vector<Tensor> rows;
    for (const auto& img : images) {
        Tensor f = encode_image(cfg, params.image, img);
        Tensor pooled = pool(f, cfg.pooling, params.image.map_pool ? &*params.image.map_pool : nullptr,
                             cfg.image_encoder.heads);
        rows.push_back(reshape(pooled, {1, cfg.image_encoder.width}).detach());
    }
    return (rows.size() == 1 ? rows[0] : concat(rows, 0)).detach();
}

// --------------------------------------------------------------------------
// Retrieval
// --------------------------------------------------------------------------

struct RetrievalReport {
    // recall[k] = {image-to-text, text-to-image}
    std::map<int, std::pair<double, double>> recall;
};

/// Recall@k by exhaustive cosine ranking. Row i of each matrix is a true
/// pair; equal scores rank the lower candidate index first.
inline RetrievalReport retrieval_eval(const Tensor& img_embs, const Tensor& txt_embs, const std::vector<int>& ks) {
    const int n = img_embs.rows();
    if (n == 0 || txt_embs.rows() != n || img_embs.cols() != txt_embs.cols())
        throw DimensionError("retrieval_eval: embedding matrices must be same-shape and non-empty");
    const int d = img_embs.cols();
    auto rank_of_true = [&](const Tensor& query, const Tensor& keys, int q) {
        std::vector<double> sims(n);
        for (int c = 0; c < n; ++c) {
            double s = 0.0;
            for (int j = 0; j < d; ++j) s += query.at(q, j) * keys.at(c, j);
            sims[c] = s;
        }
        int rank = 0;
        for (int c = 0; c < n; ++c) {
            if (c == q) continue;
            if (sims[c] > sims[q] || (sims[c] == sims[q] && c < q)) ++rank;
        }
        return rank;
    };
    RetrievalReport report;
    std::vector<int> i2t_ranks(n), t2i_ranks(n);
    for (int q = 0; q < n; ++q) {
        i2t_ranks[q] = rank_of_true(img_embs, txt_embs, q);
        t2i_ranks[q] = rank_of_true(txt_embs, img_embs, q);
    }
    for (int k : ks) {
        int hit_i2t = 0, hit_t2i = 0;
        for (int q = 0; q < n; ++q) {
            if (i2t_ranks[q] < k) ++hit_i2t;
            if (t2i_ranks[q] < k) ++hit_t2i;
        }
        report.recall[k] = {static_cast<double>(hit_i2t) / n, static_cast<double>(hit_t2i) / n};
    }
    return report;
}

/// Contrastive embeddings for a record set, one row per record.
inline EmbeddingPair embed_records(const MAECLIPConfig& cfg, const MAECLIPParams& params,
                                   const std::vector<PairRecord>& records) {
    std::vector<Tensor> xs, ys;
    for (const auto& r : records) {
        auto pair = embed_pair(cfg, params, r.image, r.tokens);
        xs.push_back(reshape(pair.image, {1, cfg.embed_dim}).detach());
        ys.push_back(reshape(pair.text, {1, cfg.embed_dim}).detach());
    }
    return {(xs.size() == 1 ? xs[0] : concat(xs, 0)).detach(), (ys.size() == 1 ? ys[0] : concat(ys, 0)).detach()};
}

// --------------------------------------------------------------------------
// Zero-shot segmentation
// --------------------------------------------------------------------------

struct SegmentationResult {
    int height = 0;
    int width = 0;
    std::vector<int> labels;  // row-major; 0 is background when background names exist
};

/// Ensembled alias embeddings per class, plus background-name embeddings.
struct SegmentPrompts {
    std::vector<std::vector<Tensor>> class_alias_embs;
    std::vector<Tensor> background_embs;
};

inline SegmentPrompts build_segment_prompts(const MAECLIPConfig& cfg, const MAECLIPParams& params,
                                            const PromptSet& prompts, const Vocab& vocab) {
    prompts.validate();
    SegmentPrompts out;
    for (const auto& aliases : prompts.classes) {
        std::vector<Tensor> embs;
        for (const auto& name : aliases) embs.push_back(name_embedding(cfg, params, name, prompts.templates, vocab));
        out.class_alias_embs.push_back(std::move(embs));
    }
    for (const auto& name : prompts.background_names)
        out.background_embs.push_back(name_embedding(cfg, params, name, prompts.templates, vocab));
    return out;
}

/// Bilinear sample of a patch-grid feature field at pixel (y, x). Patch
/// (r, c) anchors at pixel ((r+0.5)*patch, (c+0.5)*patch); queries outside
/// the anchor hull clamp to the edge.
inline std::vector<double> interpolate_patch_feature(const Tensor& grid_feats, int grid, double patch_size, double y,
                                                     double x) {
    const int e = grid_feats.cols();
    const double u = std::clamp((y - 0.5 * patch_size) / patch_size, 0.0, grid - 1.0);
    const double v = std::clamp((x - 0.5 * patch_size) / patch_size, 0.0, grid - 1.0);
    const int u0 = static_cast<int>(u), v0 = static_cast<int>(v);
    const int u1 = std::min(u0 + 1, grid - 1), v1 = std::min(v0 + 1, grid - 1);
    const double wu = u - u0, wv = v - v0;
    std::vector<double> out(static_cast<size_t>(e));
    for (int j = 0; j < e; ++j) {
        const double top = (1 - wv) * grid_feats.at(u0 * grid + v0, j) + wv * grid_feats.at(u0 * grid + v1, j);
        const double bot = (1 - wv) * grid_feats.at(u1 * grid + v0, j) + wv * grid_feats.at(u1 * grid + v1, j);
        out[j] = (1 - wu) * top + wu * bot;
    }
    return out;
}

/// Label every pixel of an (height x width) map from projected patch
/// features: max cosine similarity over class prompts, with a class's
/// aliases contributing their maximum. With background names present, a
/// best-matching background name labels the pixel 0 and classes shift to
/// 1-based.
inline SegmentationResult segment_from_features(const Tensor& projected, const SegmentPrompts& prompts, int height,
                                                int width, int grid, int patch_size) {
    SegmentationResult result;
    result.height = height;
    result.width = width;
    result.labels.resize(static_cast<size_t>(height) * width);
    const bool with_background = !prompts.background_embs.empty();
    const int e = projected.cols();
    for (int y = 0; y < height; ++y)
        for (int x = 0; x < width; ++x) {
            auto pixel_feat = interpolate_patch_feature(projected, grid, patch_size, y, x);
            double norm = 0.0;
            for (double f : pixel_feat) norm += f * f;
            norm = std::max(std::sqrt(norm), 1e-8);
            auto similarity = [&](const Tensor& emb) {
                double s = 0.0;
                for (int j = 0; j < e; ++j) s += pixel_feat[j] * emb.data()[j];
                return s / norm;
            };
            int best_label = 0;
            double best_sim = -std::numeric_limits<double>::infinity();
            for (size_t c = 0; c < prompts.class_alias_embs.size(); ++c) {
                double class_sim = -std::numeric_limits<double>::infinity();
                for (const auto& emb : prompts.class_alias_embs[c]) class_sim = std::max(class_sim, similarity(emb));
                if (class_sim > best_sim) {
                    best_sim = class_sim;
                    best_label = static_cast<int>(c) + (with_background ? 1 : 0);
                }
            }
            for (const auto& emb : prompts.background_embs) {
                const double s = similarity(emb);
                if (s > best_sim) {
                    best_sim = s;
                    best_label = 0;
                }
            }
            result.labels[static_cast<size_t>(y) * width + x] = best_label;
        }
    return result;
}

/// Per-pixel zero-shot labels for one image under a frozen model.
inline SegmentationResult zero_shot_segment(const MAECLIPConfig& cfg, const MAECLIPParams& params, const Image& image,
                                            const PromptSet& prompts, const Vocab& vocab) {
    Tensor feats = encode_image(cfg, params.image, image);
    Tensor projected = l2_normalize(matmul(feats.detach(), params.image.proj.detach())).detach();
    SegmentPrompts sp = build_segment_prompts(cfg, params, prompts, vocab);
    return segment_from_features(projected, sp, image.height, image.width, cfg.grid(), cfg.patch_size);
}

/// Mean over classes present in the ground truth of |pred n gt| / |pred u gt|.
inline double miou(const std::vector<int>& pred, const std::vector<int>& gt, int num_classes) {
    if (pred.size() != gt.size()) throw DimensionError("miou: label maps differ in size");
    std::vector<long> inter(num_classes, 0), pred_cnt(num_classes, 0), gt_cnt(num_classes, 0);
    for (size_t i = 0; i < pred.size(); ++i) {
        if (pred[i] < 0 || pred[i] >= num_classes || gt[i] < 0 || gt[i] >= num_classes)
            throw IndexError("miou: label outside [0, K)");
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

// --------------------------------------------------------------------------
// VQA decoder-classification finetuning
// --------------------------------------------------------------------------

struct VqaSample {
    Image image;
    std::vector<int> question_tokens;
    int answer = 0;
};

struct VqaConfig {
    int steps = 200;
    int batch_size = 8;
    double base_lr = 1e-3;
    double layer_decay = 0.65;  // layer l of D gets base_lr * decay^(D-l)
    double weight_decay = 0.01;
    uint64_t seed = 13;
};

struct VqaHead {
    DecoderParams decoder;
    Tensor head_w;  // decoder width x answers
    Tensor head_b;
    double accuracy = 0.0;
};

inline void set_trainable(MAECLIPParams& params, bool encoders_trainable) {
    params.visit_encoders([&](const std::string&, Tensor& t, bool) {
        t.node().requires_grad = encoders_trainable;
        t.node().needs_grad = encoders_trainable;
    });
}

/// Freeze the encoders, initialize a fresh decoder plus a linear answer
/// head over the decoder output at the text BOS position, and train with
/// layer-wise learning-rate decay. Returns the trained head and its
/// accuracy on the provided evaluation set.
inline VqaHead vqa_finetune(const MAECLIPConfig& cfg, MAECLIPParams& params, const std::vector<VqaSample>& train_set,
                            int answer_count, const VqaConfig& vcfg, const std::vector<VqaSample>& eval_set) {
    if (answer_count < 1) throw ConfigError("vqa_finetune: empty answer vocabulary");
    if (train_set.empty()) throw ContractError("vqa_finetune: empty training set");
    set_trainable(params, false);

    Rng rng(vcfg.seed);
    VqaHead out;
    out.decoder = DecoderParams::init(cfg, rng);
    out.head_w = init_weight(cfg.decoder.width, answer_count, rng);
    out.head_b = init_bias(answer_count);

    // Layer-wise lr decay: the head and final norm run at full lr, decoder
    // layer l (1-based of D) at decay^(D-l), everything below layer 1 at
    // decay^D.
    const int depth = cfg.decoder.depth;
    std::vector<ParamSlot> slots;
    const double bottom_scale = std::pow(vcfg.layer_decay, depth);
    auto add_slot = [&](const std::string& name, Tensor& t, bool no_decay, double lr_scale) {
        slots.push_back({name, t, no_decay, lr_scale});
    };
    out.decoder.visit("vqa_decoder", [&](const std::string& name, Tensor& t, bool no_decay) {
        double lr_scale = bottom_scale;
        const auto pos = name.find("/trunk/layer");
        if (pos != std::string::npos) {
            const int layer = std::stoi(name.substr(pos + 12));  // 0-based
            lr_scale = std::pow(vcfg.layer_decay, depth - (layer + 1));
        } else if (name.find("/trunk/final_ln") != std::string::npos) {
            lr_scale = 1.0;
        } else if (name.find("head") != std::string::npos) {
            lr_scale = 1.0;
        }
        add_slot(name, t, no_decay, lr_scale);
    });
    add_slot("vqa/head_w", out.head_w, false, 1.0);
    add_slot("vqa/head_b", out.head_b, false, 1.0);
    AdamW opt(std::move(slots), AdamWConfig{0.9, 0.98, 1e-6, vcfg.weight_decay});

    auto logits_for = [&](const VqaSample& s) {
        Tensor img_feats = encode_image(cfg, params.image, s.image);
        Tensor txt_feats = encode_text(cfg, params.text, s.question_tokens);
        Tensor bos = decode_bos_feature(cfg, out.decoder, img_feats, txt_feats);
        return add_rowvec(matmul(bos, out.head_w), out.head_b);  // 1 x answers
    };

    ScheduleConfig sched{vcfg.steps, std::max<int64_t>(1, vcfg.steps / 20), vcfg.base_lr};
    for (int step = 0; step < vcfg.steps; ++step) {
        std::vector<Tensor> rows;
        std::vector<int> answers;
        for (int k = 0; k < vcfg.batch_size; ++k) {
            const auto& s = train_set[rng.uniform_index(train_set.size())];
            rows.push_back(logits_for(s));
            answers.push_back(s.answer);
        }
        opt.zero_grad();
        Tensor loss = softmax_cross_entropy(rows.size() == 1 ? rows[0] : concat(rows, 0), answers);
        backward(loss);
        opt.step(lr_schedule(step, sched));
        opt.zero_grad();
    }

    const auto& probe_set = eval_set.empty() ? train_set : eval_set;
    int correct = 0;
    for (const auto& s : probe_set) {
        Tensor logits = logits_for(s);
        int best = 0;
        for (int c = 1; c < answer_count; ++c)
            if (logits.at(0, c) > logits.at(0, best)) best = c;
        if (best == s.answer) ++correct;
    }
    out.accuracy = static_cast<double>(correct) / static_cast<double>(probe_set.size());
    set_trainable(params, true);
    return out;
}

/// Layer-wise finetuning lr for decoder layer `layer` (1-based) of `depth`.
inline double layerwise_lr(double base_lr, double decay, int depth, int layer) {
    return base_lr * std::pow(decay, depth - layer);
}

// --------------------------------------------------------------------------
// Evaluation report
// --------------------------------------------------------------------------

struct EvalReport {
    std::vector<std::pair<std::string, double>> metrics;
    std::string config_digest;
    std::string checkpoint_digest;

    void add(const std::string& name, double value) { metrics.emplace_back(name, value); }

    /// Line-oriented metric block followed by a machine-readable section.
    std::string to_text() const {
        std::ostringstream os;
        for (const auto& [name, value] : metrics) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", value);
            os << name << "\t" << buf << "\n";
        }
        os << "[report]\n";
        os << "config_digest = " << config_digest << "\n";
        os << "checkpoint_digest = " << checkpoint_digest << "\n";
        for (const auto& [name, value] : metrics) {
            char buf[64];
            std::snprintf(buf, sizeof buf, "%.17g", value);
            os << "metric." << name << " = " << buf << "\n";
        }
        os << "[/report]\n";
        return os.str();
    }
};

inline std::string file_digest_hex(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open " + path + " for hashing");
    std::ostringstream ss;
    ss << in.rdbuf();
    const std::string bytes = ss.str();
    return hex_digest(sha256_bytes(bytes.data(), bytes.size()));
}

/// Index of the unique name (word-boundary match) present in the caption.
inline int caption_label(const std::string& caption, const std::vector<std::string>& names) {
    const std::string padded = " " + caption + " ";
    int found = -1;
    for (size_t i = 0; i < names.size(); ++i) {
        if (padded.find(" " + names[i] + " ") != std::string::npos) {
            if (found >= 0) throw ContractError("caption '" + caption + "' matches several class names");
            found = static_cast<int>(i);
        }
    }
    if (found < 0) throw ContractError("caption '" + caption + "' matches no class name");
    return found;
}

}  // namespace maeclip
