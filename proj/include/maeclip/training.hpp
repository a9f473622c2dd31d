#pragma once

#include <cstring>
#include <functional>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "maeclip/checkpoint.hpp"
#include "maeclip/config.hpp"
#include "maeclip/data.hpp"
#include "maeclip/losses.hpp"
#include "maeclip/model.hpp"
#include "maeclip/optim.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Batches
// --------------------------------------------------------------------------

struct PairBatch {
    struct Item {
        Image image;
        std::vector<int> tokens;
        // Preassigned masks override the configured strategy (tests and
        // ablations); normally left empty and drawn inside the step.
        std::optional<MaskSpec> img_mask;
        std::optional<MaskSpec> txt_mask;
    };
    std::vector<Item> items;
};

// --------------------------------------------------------------------------
// Local vs global contrastive scope
// --------------------------------------------------------------------------

enum class ContrastiveScope { kLocal, kGlobal };

inline ContrastiveScope contrastive_scope(int64_t step, const TrainConfig& cfg) {
    return step < cfg.local_contrastive_steps ? ContrastiveScope::kLocal : ContrastiveScope::kGlobal;
}

/// Contrastive losses over a batch of embeddings. Global scope evaluates the
/// InfoNCE pair over the full batch; local scope splits the batch into
/// world_size contiguous shards, evaluates each shard independently (its
/// negatives come only from the shard) and averages the shard losses.
inline ContrastiveLosses sharded_contrastive_loss(const EmbeddingPair& all, const Tensor& inv_sigma,
                                                  ContrastiveScope scope, int world_size) {
    if (scope == ContrastiveScope::kGlobal) return contrastive_loss(all, inv_sigma);
    const int n = all.x.rows();
    if (world_size < 1 || n % world_size != 0)
        throw ContractError("sharded contrastive loss: batch not divisible into shards");
    const int shard = n / world_size;
    Tensor i2t, t2i;
    for (int s = 0; s < world_size; ++s) {
        EmbeddingPair part{slice(all.x, 0, s * shard, (s + 1) * shard), slice(all.y, 0, s * shard, (s + 1) * shard)};
        auto losses = contrastive_loss(part, inv_sigma);
        i2t = s == 0 ? losses.i2t : add(i2t, losses.i2t);
        t2i = s == 0 ? losses.t2i : add(t2i, losses.t2i);
    }
    ContrastiveLosses out;
    out.i2t = scale(i2t, 1.0 / world_size);
    out.t2i = scale(t2i, 1.0 / world_size);
    out.combined = scale(add(out.i2t, out.t2i), 0.5);
    return out;
}

// --------------------------------------------------------------------------
// One optimization step
// --------------------------------------------------------------------------

namespace detail_train {

struct PassOne {
    std::vector<Tensor> img_feats;  // per item, s x width (graph)
    std::vector<Tensor> txt_feats;
    EmbeddingPair embeddings;  // N x embed_dim, l2-normalized rows
};

inline PassOne forward_unmasked(const MAECLIPConfig& mcfg, MAECLIPParams& params, const PairBatch& batch,
                                const std::vector<MaskSpec>* img_masks, const std::vector<MaskSpec>* txt_masks) {
    PassOne out;
    std::vector<Tensor> x_rows, y_rows;
    for (size_t i = 0; i < batch.items.size(); ++i) {
        const auto& item = batch.items[i];
        const MaskSpec* im = img_masks ? &(*img_masks)[i] : nullptr;
        const MaskSpec* tm = txt_masks ? &(*txt_masks)[i] : nullptr;
        Tensor fi = encode_image(mcfg, params.image, item.image, im);
        Tensor ft = encode_text(mcfg, params.text, item.tokens, tm);
        Tensor pi = pool(fi, mcfg.pooling, params.image.map_pool ? &*params.image.map_pool : nullptr,
                         mcfg.image_encoder.heads);
        Tensor pt = pool(ft, mcfg.pooling, params.text.map_pool ? &*params.text.map_pool : nullptr,
                         mcfg.text_encoder.heads);
        Tensor xe = project_embedding(pi, params.image.proj);
        Tensor ye = project_embedding(pt, params.text.proj);
        out.img_feats.push_back(std::move(fi));
        out.txt_feats.push_back(std::move(ft));
        x_rows.push_back(reshape(xe, {1, mcfg.embed_dim}));
        y_rows.push_back(reshape(ye, {1, mcfg.embed_dim}));
    }
    out.embeddings.x = x_rows.size() == 1 ? x_rows[0] : concat(x_rows, 0);
    out.embeddings.y = y_rows.size() == 1 ? y_rows[0] : concat(y_rows, 0);
    return out;
}

inline MaskSpec draw_image_mask(const MAECLIPConfig& mcfg, const TrainConfig& tcfg, const PairBatch::Item& item,
                                const PassOne* pass1, size_t index, Rng& rng, MAECLIPParams& params) {
    if (item.img_mask) return *item.img_mask;
    if (tcfg.masking == MaskStrategy::kSimilarity) {
        Tensor positions = project_positions(pass1->img_feats[index], params.image.proj);
        Tensor reference = slice(pass1->embeddings.y, 0, static_cast<int>(index), static_cast<int>(index) + 1);
        auto scores = elementwise_similarity(positions, reshape(reference.detach(), {mcfg.embed_dim}));
        return similarity_mask(MaskSpec::Modality::kImage, scores, mcfg.mask_ratio);
    }
    return random_mask(MaskSpec::Modality::kImage, mcfg.n_patches(), mcfg.mask_ratio, rng);
}

inline MaskSpec draw_text_mask(const MAECLIPConfig& mcfg, const TrainConfig& tcfg, const PairBatch::Item& item,
                               const PassOne* pass1, size_t index, Rng& rng, MAECLIPParams& params) {
    if (item.txt_mask) return *item.txt_mask;
    const int t = static_cast<int>(item.tokens.size());
    auto candidates = maskable_token_positions(item.tokens);
    if (tcfg.masking == MaskStrategy::kSimilarity) {
        Tensor positions = project_positions(pass1->txt_feats[index], params.text.proj);
        Tensor reference = slice(pass1->embeddings.x, 0, static_cast<int>(index), static_cast<int>(index) + 1);
        auto scores = elementwise_similarity(positions, reshape(reference.detach(), {mcfg.embed_dim}));
        std::vector<double> candidate_scores(candidates.size());
        for (size_t k = 0; k < candidates.size(); ++k) candidate_scores[k] = scores[candidates[k]];
        return similarity_subset_mask(MaskSpec::Modality::kText, t, candidates, candidate_scores, mcfg.mask_ratio);
    }
    return random_subset_mask(MaskSpec::Modality::kText, t, candidates, mcfg.mask_ratio, rng);
}

}  // namespace detail_train

/// One full training step: dual-pass forward, combined backward, AdamW
/// update. Pass 1 runs the encoders unmasked for the contrastive loss;
/// pass 2 re-runs them on visible positions only and decodes the masked
/// ones for the generative losses. mode=clip skips pass 2; mode=masked_clip
/// instead masks the contrastive inputs and skips pass 2.
inline LossBreakdown train_step(const MAECLIPConfig& mcfg, MAECLIPParams& params, AdamW& opt, const PairBatch& batch,
                                int64_t step, const TrainConfig& tcfg, Rng& rng) {
    if (batch.items.empty()) throw ContractError("train_step: empty batch");
    if (static_cast<int>(batch.items.size()) % tcfg.world_size != 0)
        throw ContractError("train_step: batch size must divide into world_size shards");

    Tensor inv_sigma = inverse_temperature(params);
    const ContrastiveScope scope = contrastive_scope(step, tcfg);

    detail_train::PassOne pass1;
    if (tcfg.mode == TrainMode::kMaskedClip) {
        std::vector<MaskSpec> img_masks, txt_masks;
        for (const auto& item : batch.items) {
            img_masks.push_back(item.img_mask ? *item.img_mask
                                              : random_mask(MaskSpec::Modality::kImage, mcfg.n_patches(),
                                                            mcfg.mask_ratio, rng));
            txt_masks.push_back(item.txt_mask
                                    ? *item.txt_mask
                                    : random_subset_mask(MaskSpec::Modality::kText,
                                                         static_cast<int>(item.tokens.size()),
                                                         maskable_token_positions(item.tokens), mcfg.mask_ratio, rng));
        }
        pass1 = detail_train::forward_unmasked(mcfg, params, batch, &img_masks, &txt_masks);
    } else {
        pass1 = detail_train::forward_unmasked(mcfg, params, batch, nullptr, nullptr);
    }

    auto contrastive = sharded_contrastive_loss(pass1.embeddings, inv_sigma, scope, tcfg.world_size);

    std::optional<Tensor> l_gen_i, l_gen_t;
    if (tcfg.mode == TrainMode::kMaeClip) {
        std::vector<Tensor> pred_rows, target_rows, logit_rows;
        std::vector<int> token_targets;
        for (size_t i = 0; i < batch.items.size(); ++i) {
            const auto& item = batch.items[i];
            MaskSpec img_mask = detail_train::draw_image_mask(mcfg, tcfg, item, &pass1, i, rng, params);
            MaskSpec txt_mask = detail_train::draw_text_mask(mcfg, tcfg, item, &pass1, i, rng, params);

            Tensor vis_img = encode_image(mcfg, params.image, item.image, &img_mask);
            Tensor vis_txt = encode_text(mcfg, params.text, item.tokens, &txt_mask);
            auto decoded = decode_cross_modal(mcfg, params.decoder, vis_img, vis_txt, img_mask, txt_mask);

            if (decoded.patch_preds) {
                pred_rows.push_back(*decoded.patch_preds);
                Tensor patches = patchify(item.image, mcfg.patch_size);
                target_rows.push_back(take_rows(patches, img_mask.masked));
            }
            if (decoded.token_logits) {
                logit_rows.push_back(*decoded.token_logits);
                for (int pos : txt_mask.masked) token_targets.push_back(item.tokens[pos]);
            }
        }
        if (!pred_rows.empty()) {
            Tensor preds = pred_rows.size() == 1 ? pred_rows[0] : concat(pred_rows, 0);
            Tensor targets = target_rows.size() == 1 ? target_rows[0] : concat(target_rows, 0);
            l_gen_i = gen_image_loss(preds, targets, mcfg.normalize_targets);
        }
        if (!logit_rows.empty()) {
            Tensor logits = logit_rows.size() == 1 ? logit_rows[0] : concat(logit_rows, 0);
            l_gen_t = gen_text_loss(logits, token_targets);
        }
    }

    const bool generative = tcfg.mode == TrainMode::kMaeClip;
    const double w_i = generative ? (scope == ContrastiveScope::kLocal ? tcfg.local_w_i : tcfg.w_i) : 0.0;
    const double w_t = generative ? (scope == ContrastiveScope::kLocal ? tcfg.local_w_t : tcfg.w_t) : 0.0;
    auto total = total_loss(contrastive, l_gen_i, l_gen_t, w_i, w_t);
    if (!std::isfinite(total.breakdown.total))
        throw NumericError("non-finite loss at step " + std::to_string(step));

    opt.zero_grad();
    backward(total.graph);
    ScheduleConfig sched{tcfg.steps, tcfg.warmup_steps, tcfg.base_lr};
    opt.step(lr_schedule(step, sched));
    opt.zero_grad();
    return total.breakdown;
}

// --------------------------------------------------------------------------
// Trainer: data order, stepping, checkpoints
// --------------------------------------------------------------------------

inline std::vector<ParamSlot> parameter_slots(MAECLIPParams& params) {
    std::vector<ParamSlot> slots;
    params.visit([&](const std::string& name, Tensor& t, bool no_decay) {
        slots.push_back({name, t, no_decay, 1.0});
    });
    return slots;
}

inline std::vector<double> rng_state_to_doubles(const Rng& rng) {
    auto words = rng.serialize();
    std::vector<double> out(words.size());
    for (size_t i = 0; i < words.size(); ++i) std::memcpy(&out[i], &words[i], 8);
    return out;
}

inline Rng rng_from_doubles(const std::vector<double>& values) {
    std::vector<uint64_t> words(values.size());
    for (size_t i = 0; i < values.size(); ++i) std::memcpy(&words[i], &values[i], 8);
    return Rng::deserialize(words);
}

class Trainer {
public:
    Trainer(RunConfig cfg, std::vector<PairRecord> data) : cfg_(std::move(cfg)), data_(std::move(data)), rng_(0) {
        cfg_.validate();
        if (static_cast<int>(data_.size()) < cfg_.train.batch_size)
            throw ConfigError("dataset smaller than one batch");
        rng_ = Rng(cfg_.train.seed);
        params_ = MAECLIPParams::init(cfg_.model, rng_);
        opt_.emplace(parameter_slots(params_),
                     AdamWConfig{cfg_.train.beta1, cfg_.train.beta2, cfg_.train.adam_eps, cfg_.train.weight_decay});
    }

    const RunConfig& config() const { return cfg_; }
    MAECLIPParams& params() { return params_; }
    AdamW& optimizer() { return *opt_; }
    int64_t step_count() const { return step_; }
    bool done() const { return step_ >= cfg_.train.steps; }

    /// Deterministic batch for a given step: fixed per-epoch shuffle, then
    /// contiguous slices; a trailing partial batch is dropped.
    PairBatch batch_for_step(int64_t step, Rng& rng) const {
        const int n = static_cast<int>(data_.size());
        const int per_epoch = n / cfg_.train.batch_size;
        const int epoch = static_cast<int>(step / per_epoch);
        const int index = static_cast<int>(step % per_epoch);
        auto order = epoch_order(n, cfg_.train.seed, epoch);
        PairBatch batch;
        for (int k = 0; k < cfg_.train.batch_size; ++k) {
            const auto& rec = data_[order[index * cfg_.train.batch_size + k]];
            PairBatch::Item item;
            item.image = cfg_.train.augment ? random_resized_crop(rec.image, rng) : rec.image;
            item.tokens = rec.tokens;
            batch.items.push_back(std::move(item));
        }
        return batch;
    }

    LossBreakdown step() {
        if (done()) throw ContractError("trainer already ran all configured steps");
        PairBatch batch = batch_for_step(step_, rng_);
        LossBreakdown out = train_step(cfg_.model, params_, *opt_, batch, step_, cfg_.train, rng_);
        ++step_;
        return out;
    }

    double current_lr() const {
        return lr_schedule(step_, ScheduleConfig{cfg_.train.steps, cfg_.train.warmup_steps, cfg_.train.base_lr});
    }

    void save_checkpoint(const std::string& path) {
        TensorMap map;
        config_to_tensor_map(cfg_, map);
        params_.visit([&](const std::string& name, Tensor& t, bool) { map[name] = {t.shape(), t.data()}; });
        const auto& slots = opt_->slots();
        for (size_t i = 0; i < slots.size(); ++i) {
            map["opt/" + slots[i].name + "/m"] = {slots[i].tensor.shape(), opt_->first_moment(i)};
            map["opt/" + slots[i].name + "/v"] = {slots[i].tensor.shape(), opt_->second_moment(i)};
        }
        map["opt/step"] = {{1}, {static_cast<double>(step_)}};
        map["rng/state"] = {{static_cast<int>(rng_state_to_doubles(rng_).size())}, rng_state_to_doubles(rng_)};
        write_checkpoint(path, map);
    }

    static Trainer load_checkpoint_file(const std::string& path, std::vector<PairRecord> data) {
        TensorMap map = read_checkpoint(path);
        RunConfig cfg = config_from_tensor_map(map);
        Trainer t(cfg, std::move(data));
        t.restore(map);
        return t;
    }

    /// Restore parameters, moments, step counter and rng from a tensor map.
    void restore(const TensorMap& map) {
        params_.visit([&](const std::string& name, Tensor& t, bool) {
            const auto& stored = require_tensor(map, name);
            if (stored.shape != t.shape()) throw FormatError("shape mismatch restoring " + name);
            t.mutable_data() = stored.values;
            t.clear_grad();
        });
        const auto& slots = opt_->slots();
        for (size_t i = 0; i < slots.size(); ++i) {
            const auto& m = require_tensor(map, "opt/" + slots[i].name + "/m");
            const auto& v = require_tensor(map, "opt/" + slots[i].name + "/v");
            if (m.values.size() != slots[i].tensor.numel() || v.values.size() != slots[i].tensor.numel())
                throw FormatError("moment size mismatch restoring " + slots[i].name);
            opt_->first_moment(i) = m.values;
            opt_->second_moment(i) = v.values;
        }
        step_ = static_cast<int64_t>(require_tensor(map, "opt/step").values.at(0));
        opt_->set_step_count(step_);
        rng_ = rng_from_doubles(require_tensor(map, "rng/state").values);
    }

private:
    RunConfig cfg_;
    std::vector<PairRecord> data_;
    Rng rng_;
    MAECLIPParams params_;
    std::optional<AdamW> opt_;
    int64_t step_ = 0;
};

/// Model rebuilt from a checkpoint alone (config travels inside the file).
struct LoadedModel {
    RunConfig config;
    MAECLIPParams params;
};

inline LoadedModel load_model_from_checkpoint(const std::string& path) {
    TensorMap map = read_checkpoint(path);
    LoadedModel out{config_from_tensor_map(map), {}};
    out.config.model.validate();
    Rng scratch(0);
    out.params = MAECLIPParams::init(out.config.model, scratch);
    out.params.visit([&](const std::string& name, Tensor& t, bool) {
        const auto& stored = require_tensor(map, name);
        if (stored.shape != t.shape()) throw FormatError("shape mismatch restoring " + name);
        t.mutable_data() = stored.values;
        t.clear_grad();
    });
    return out;
}

/// Loss log line: step, lr, then the four component losses and the total,
/// tab separated with full double precision.
inline std::string loss_log_header() { return "step\tlr\tl_i2t\tl_t2i\tl_gen_i\tl_gen_t\ttotal"; }

inline std::string loss_log_line(int64_t step, double lr, const LossBreakdown& b) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%lld\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g\t%.17g",
                  static_cast<long long>(step), lr, b.l_i2t, b.l_t2i, b.l_gen_i, b.l_gen_t, b.total);
    return buf;
}

}  // namespace maeclip
