#pragma once

#include <functional>
#include <string>
#include <vector>

#include "maeclip/losses.hpp"
#include "maeclip/model.hpp"
#include "maeclip/nn.hpp"
#include "maeclip/tensor.hpp"
#include "maeclip/training.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Named finite-difference checks at three granularities: individual ops,
// transformer blocks, and the full dual-pass loss. Shared by the gradcheck
// CLI command and the acceptance suite.
// --------------------------------------------------------------------------

struct GradCheckCase {
    std::string name;
    double tolerance;
    std::function<GradCheckResult()> run;
};

inline std::vector<GradCheckCase> gradcheck_ops_suite(uint64_t seed) {
    std::vector<GradCheckCase> cases;
    auto add_case = [&](const std::string& name, double tol, std::function<GradCheckResult()> fn) {
        cases.push_back({name, tol, std::move(fn)});
    };
    const double tol = 1e-6;

    add_case("add", tol, [seed] {
        Rng rng(seed + 1);
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true), b = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        return grad_check([&] { return sum(mul(add(a, b), w)); }, {a, b});
    });
    add_case("mul", tol, [seed] {
        Rng rng(seed + 2);
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true), b = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        return grad_check([&] { return sum(mul(mul(a, b), w)); }, {a, b});
    });
    add_case("scale", tol, [seed] {
        Rng rng(seed + 3);
        Tensor a = Tensor::randn({2, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({2, 5}, rng);
        return grad_check([&] { return sum(mul(scale(a, -0.37), w)); }, {a});
    });
    add_case("mul_scalar", tol, [seed] {
        Rng rng(seed + 4);
        Tensor a = Tensor::randn({2, 3}, rng, 1.0, true);
        Tensor s = Tensor::scalar(1.7, true);
        Tensor w = Tensor::randn({2, 3}, rng);
        return grad_check([&] { return sum(mul(mul_scalar(a, s), w)); }, {a, s});
    });
    add_case("exp", tol, [seed] {
        Rng rng(seed + 5);
        Tensor a = Tensor::randn({3, 3}, rng, 0.5, true);
        Tensor w = Tensor::randn({3, 3}, rng);
        return grad_check([&] { return sum(mul(exp(a), w)); }, {a});
    });
    add_case("log", tol, [seed] {
        Rng rng(seed + 6);
        std::vector<double> pos(9);
        for (auto& v : pos) v = 0.2 + rng.uniform();
        Tensor a = Tensor::from_data(pos, {3, 3}, true);
        Tensor w = Tensor::randn({3, 3}, rng);
        return grad_check([&] { return sum(mul(log(a), w)); }, {a});
    });
    add_case("gelu", tol, [seed] {
        Rng rng(seed + 7);
        Tensor a = Tensor::randn({4, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 4}, rng);
        return grad_check([&] { return sum(mul(gelu(a), w)); }, {a});
    });
    add_case("clamp_max", tol, [seed] {
        Rng rng(seed + 8);
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        return grad_check([&] { return sum(mul(clamp_max(a, 0.4), w)); }, {a});
    });
    add_case("matmul", tol, [seed] {
        Rng rng(seed + 9);
        Tensor a = Tensor::randn({4, 3}, rng, 1.0, true), b = Tensor::randn({3, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 5}, rng);
        return grad_check([&] { return sum(mul(matmul(a, b), w)); }, {a, b});
    });
    add_case("transpose", tol, [seed] {
        Rng rng(seed + 10);
        Tensor a = Tensor::randn({3, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({5, 3}, rng);
        return grad_check([&] { return sum(mul(transpose(a), w)); }, {a});
    });
    add_case("reshape", tol, [seed] {
        Rng rng(seed + 11);
        Tensor a = Tensor::randn({2, 6}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        return grad_check([&] { return sum(mul(reshape(a, {3, 4}), w)); }, {a});
    });
    add_case("concat_rows", tol, [seed] {
        Rng rng(seed + 12);
        Tensor a = Tensor::randn({2, 4}, rng, 1.0, true), b = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({5, 4}, rng);
        return grad_check([&] { return sum(mul(concat({a, b}, 0), w)); }, {a, b});
    });
    add_case("concat_cols", tol, [seed] {
        Rng rng(seed + 13);
        Tensor a = Tensor::randn({3, 2}, rng, 1.0, true), b = Tensor::randn({3, 3}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 5}, rng);
        return grad_check([&] { return sum(mul(concat({a, b}, 1), w)); }, {a, b});
    });
    add_case("slice", tol, [seed] {
        Rng rng(seed + 14);
        Tensor a = Tensor::randn({5, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({2, 4}, rng);
        Tensor w2 = Tensor::randn({5, 2}, rng);
        return grad_check([&] { return add(sum(mul(slice(a, 0, 1, 3), w)), sum(mul(slice(a, 1, 0, 2), w2))); }, {a});
    });
    add_case("take_rows", tol, [seed] {
        Rng rng(seed + 15);
        Tensor a = Tensor::randn({5, 3}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 3}, rng);
        return grad_check([&] { return sum(mul(take_rows(a, {0, 2, 2, 4}), w)); }, {a});
    });
    add_case("add_rowvec", tol, [seed] {
        Rng rng(seed + 16);
        Tensor m = Tensor::randn({4, 3}, rng, 1.0, true), v = Tensor::randn({3}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 3}, rng);
        return grad_check([&] { return sum(mul(add_rowvec(m, v), w)); }, {m, v});
    });
    add_case("sum", tol, [seed] {
        Rng rng(seed + 17);
        Tensor a = Tensor::randn({7}, rng, 1.0, true);
        return grad_check([&] { return sum(a); }, {a});
    });
    add_case("mean", tol, [seed] {
        Rng rng(seed + 18);
        Tensor a = Tensor::randn({3, 4}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 4}, rng);
        return grad_check([&] { return mean(mul(a, w)); }, {a});
    });
    add_case("mean_rows", tol, [seed] {
        Rng rng(seed + 19);
        Tensor a = Tensor::randn({5, 3}, rng, 1.0, true);
        Tensor w = Tensor::randn({3}, rng);
        return grad_check([&] { return sum(mul(mean_rows(a), w)); }, {a});
    });
    add_case("max_rows", tol, [seed] {
        Rng rng(seed + 20);
        Tensor a = Tensor::randn({5, 3}, rng, 1.0, true);
        Tensor w = Tensor::randn({3}, rng);
        return grad_check([&] { return sum(mul(max_rows(a), w)); }, {a});
    });
    add_case("softmax_rows", tol, [seed] {
        Rng rng(seed + 21);
        Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 5}, rng);
        return grad_check([&] { return sum(mul(softmax_rows(a), w)); }, {a});
    });
    add_case("softmax_cross_entropy", tol, [seed] {
        Rng rng(seed + 22);
        Tensor logits = Tensor::randn({4, 6}, rng, 1.0, true);
        return grad_check([&] { return softmax_cross_entropy(logits, {1, 5, 0, 3}); }, {logits});
    });
    add_case("layernorm", tol, [seed] {
        Rng rng(seed + 23);
        Tensor x = Tensor::randn({3, 6}, rng, 1.0, true);
        Tensor g = Tensor::randn({6}, rng, 1.0, true), b = Tensor::randn({6}, rng, 1.0, true);
        Tensor w = Tensor::randn({3, 6}, rng);
        return grad_check([&] { return sum(mul(layernorm(x, g, b), w)); }, {x, g, b});
    });
    add_case("l2_normalize", tol, [seed] {
        Rng rng(seed + 24);
        Tensor a = Tensor::randn({4, 5}, rng, 1.0, true);
        Tensor w = Tensor::randn({4, 5}, rng);
        return grad_check([&] { return sum(mul(l2_normalize(a), w)); }, {a});
    });
    return cases;
}

inline std::vector<GradCheckCase> gradcheck_blocks_suite(uint64_t seed) {
    std::vector<GradCheckCase> cases;
    cases.push_back({"multi_head_attention", 1e-4, [seed] {
                         Rng rng(seed + 31);
                         auto attn = AttentionParams::init(8, 2, rng);
                         Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
                         Tensor w = Tensor::randn({3, 8}, rng);
                         std::vector<Tensor> params{x,       attn.wq, attn.bq, attn.wk, attn.bk,
                                                    attn.wv, attn.bv, attn.wo, attn.bo};
                         return grad_check([&] { return sum(mul(multi_head_attention(x, attn, 2), w)); }, params);
                     }});
    cases.push_back({"cross_attention", 1e-4, [seed] {
                         Rng rng(seed + 32);
                         auto attn = AttentionParams::init(8, 1, rng);
                         Tensor q = Tensor::randn({1, 8}, rng, 1.0, true);
                         Tensor kv = Tensor::randn({5, 8}, rng, 1.0, true);
                         Tensor w = Tensor::randn({1, 8}, rng);
                         std::vector<Tensor> params{q, kv, attn.wk, attn.wv, attn.wo};
                         return grad_check([&] { return sum(mul(multi_head_attention(q, attn, 2, &kv), w)); },
                                           params);
                     }});
    cases.push_back({"transformer_layer", 1e-4, [seed] {
                         Rng rng(seed + 33);
                         TransformerConfig cfg{1, 8, 2, 4, 0, 0};
                         auto layer = LayerParams::init(cfg, rng);
                         Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
                         Tensor w = Tensor::randn({3, 8}, rng);
                         std::vector<Tensor> params{x,           layer.ln1_g,  layer.attn.wq, layer.attn.wo,
                                                    layer.ln2_g, layer.mlp_w1, layer.mlp_w2,  layer.mlp_b1};
                         return grad_check([&] { return sum(mul(transformer_layer(x, layer, cfg.heads), w)); },
                                           params, 1e-4);
                     }});
    cases.push_back({"transformer_stack_depth4", 1e-4, [seed] {
                         Rng rng(seed + 34);
                         TransformerConfig cfg{4, 8, 2, 4, 0, 0};
                         auto stack = TransformerParams::init(cfg, rng);
                         Tensor x = Tensor::randn({3, 8}, rng, 1.0, true);
                         Tensor w = Tensor::randn({3, 8}, rng);
                         std::vector<Tensor> params{x, stack.layers[0].attn.wq, stack.layers[1].mlp_w1,
                                                    stack.layers[2].attn.wo, stack.final_ln_g};
                         return grad_check([&] { return sum(mul(transformer_stack(x, stack, cfg.heads), w)); },
                                           params, 1e-4, 16);
                     }});
    cases.push_back({"map_pooling", 1e-4, [seed] {
                         Rng rng(seed + 35);
                         auto mp = MapPoolParams::init(8, rng);
                         Tensor x = Tensor::randn({5, 8}, rng, 1.0, true);
                         Tensor w = Tensor::randn({8}, rng);
                         std::vector<Tensor> params{x, mp.query, mp.key_w, mp.key_b};
                         return grad_check([&] { return sum(mul(pool(x, Pooling::kMAP, &mp, 2), w)); }, params);
                     }});
    return cases;
}

/// Tiny two-pair MAE-CLIP configuration used by the full-loss check.
inline MAECLIPConfig gradcheck_model_config() {
    MAECLIPConfig cfg;
    cfg.image_size = 16;
    cfg.patch_size = 8;
    cfg.image_encoder = {1, 16, 2, 2, 0, 0};
    cfg.text_encoder = {1, 16, 2, 2, 260, 40};
    cfg.decoder = {1, 16, 2, 2, 0, 0};
    cfg.embed_dim = 8;
    return cfg;
}

inline std::vector<GradCheckCase> gradcheck_model_suite(uint64_t seed) {
    std::vector<GradCheckCase> cases;
    cases.push_back({"full_mae_clip_loss_2pair", 1e-3, [seed] {
        MAECLIPConfig cfg = gradcheck_model_config();
        Rng rng(seed + 41);
        auto params = MAECLIPParams::init(cfg, rng);
        SynthSpec spec;
        spec.image_size = cfg.image_size;
        spec.caption_template = "{color} {shape} {position}";
        auto records = make_synthetic_pairs(seed + 42, 2, spec);

        PairBatch batch;
        Rng mask_rng(seed + 43);
        for (const auto& rec : records) {
            PairBatch::Item item;
            item.image = rec.image;
            item.tokens = rec.tokens;
            item.img_mask = random_mask(MaskSpec::Modality::kImage, cfg.n_patches(), cfg.mask_ratio, mask_rng);
            item.txt_mask = random_subset_mask(MaskSpec::Modality::kText, static_cast<int>(rec.tokens.size()),
                                               maskable_token_positions(rec.tokens), cfg.mask_ratio, mask_rng);
            batch.items.push_back(item);
        }

        auto loss = [&] {
            auto pass1 = detail_train::forward_unmasked(cfg, params, batch, nullptr, nullptr);
            auto contrastive = sharded_contrastive_loss(pass1.embeddings, inverse_temperature(params),
                                                        ContrastiveScope::kGlobal, 1);
            std::vector<Tensor> preds, targets, logits;
            std::vector<int> token_targets;
            for (const auto& item : batch.items) {
                Tensor vi = encode_image(cfg, params.image, item.image, &*item.img_mask);
                Tensor vt = encode_text(cfg, params.text, item.tokens, &*item.txt_mask);
                auto dec = decode_cross_modal(cfg, params.decoder, vi, vt, *item.img_mask, *item.txt_mask);
                preds.push_back(*dec.patch_preds);
                targets.push_back(take_rows(patchify(item.image, cfg.patch_size), item.img_mask->masked));
                logits.push_back(*dec.token_logits);
                for (int pos : item.txt_mask->masked) token_targets.push_back(item.tokens[pos]);
            }
            Tensor gi = gen_image_loss(concat(preds, 0), concat(targets, 0), cfg.normalize_targets);
            Tensor gt = gen_text_loss(concat(logits, 0), token_targets);
            return total_loss(contrastive, gi, gt, 0.1, 0.05).graph;
        };

        // A representative slice of every component, ~4 coordinates each.
        std::vector<Tensor> watched{params.image.patch_proj_w,
                                    params.image.trunk.layers[0].attn.wq,
                                    params.image.proj,
                                    params.text.token_embed,
                                    params.text.pos_embed,
                                    params.text.trunk.layers[0].mlp_w2,
                                    params.text.proj,
                                    params.decoder.img_in_w,
                                    params.decoder.img_mask_token,
                                    params.decoder.trunk.layers[0].attn.wv,
                                    params.decoder.img_head_w,
                                    params.decoder.txt_head_w,
                                    params.log_inv_temperature};
        return grad_check(loss, watched, 1e-4, 4, seed + 44);
    }});
    return cases;
}

/// A deliberately corrupted gradient (wrong vjp scale); grad_check must
/// flag it. Used to prove the checker and the CLI exit path actually fire.
inline GradCheckCase gradcheck_fault_injection_case(uint64_t seed) {
    return {"injected_fault", 1e-6, [seed] {
                Rng rng(seed + 51);
                Tensor x = Tensor::randn({6}, rng, 1.0, true);
                auto broken_square = [](const Tensor& a) {
                    std::vector<double> out(a.numel());
                    for (size_t i = 0; i < out.size(); ++i) out[i] = a.data()[i] * a.data()[i];
                    return make_op(a.shape(), std::move(out), {a},
                                   [](detail::Node& n) {
                                       const auto& av = n.parents[0]->value;
                                       std::vector<double> g(n.grad.size());
                                       // Wrong by 1%: 2.02 x instead of 2 x.
                                       for (size_t i = 0; i < g.size(); ++i) g[i] = n.grad[i] * 2.02 * av[i];
                                       detail::accumulate(n.parents[0], g);
                                   },
                                   "broken_square");
                };
                return grad_check([&] { return sum(broken_square(x)); }, {x});
            }};
}

struct GradCheckSummary {
    int passed = 0;
    int failed = 0;
    std::vector<std::string> lines;  // one per case
};

inline GradCheckSummary run_gradcheck_cases(const std::vector<GradCheckCase>& cases) {
    GradCheckSummary summary;
    for (const auto& c : cases) {
        auto result = c.run();
        const bool ok = result.max_rel_err < c.tolerance;
        char buf[160];
        std::snprintf(buf, sizeof buf, "%-28s max_rel_err=%-12.3e tol=%-8.0e coords=%-4zu %s", c.name.c_str(),
                      result.max_rel_err, c.tolerance, result.checked_coords, ok ? "PASS" : "FAIL");
        summary.lines.push_back(buf);
        ok ? ++summary.passed : ++summary.failed;
    }
    return summary;
}

}  // namespace maeclip
