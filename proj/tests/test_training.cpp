#include "maeclip/training.hpp"

#include <gtest/gtest.h>

#include <cstdio>
#include <filesystem>

#include "oracles.hpp"

using namespace maeclip;

namespace {

RunConfig tiny_run_config() {
    RunConfig cfg;
    cfg.model.image_size = 16;
    cfg.model.patch_size = 8;
    cfg.model.image_encoder = {1, 16, 2, 2, 0, 0};
    cfg.model.text_encoder = {1, 16, 2, 2, 260, 40};
    cfg.model.decoder = {1, 16, 2, 2, 0, 0};
    cfg.model.embed_dim = 8;
    cfg.train.steps = 50;
    cfg.train.warmup_steps = 5;
    cfg.train.local_contrastive_steps = 10;
    cfg.train.base_lr = 1e-3;
    cfg.train.batch_size = 4;
    cfg.train.world_size = 1;
    cfg.train.seed = 7;
    cfg.train.masking = MaskStrategy::kRandom;
    return cfg;
}

std::vector<PairRecord> tiny_dataset(int n = 8) {
    SynthSpec spec;
    spec.image_size = 16;
    spec.caption_template = "{color} {shape} {position}";
    return make_synthetic_pairs(3, n, spec);
}

std::string temp_path(const std::string& name) {
    return (std::filesystem::temp_directory_path() / name).string();
}

}  // namespace

TEST(LrSchedule, WarmupCosineEndpoints) {
    ScheduleConfig cfg{1000, 100, 5e-4};
    EXPECT_DOUBLE_EQ(lr_schedule(0, cfg), 0.0);
    EXPECT_DOUBLE_EQ(lr_schedule(100, cfg), 5e-4);
    EXPECT_NEAR(lr_schedule(1000, cfg), 0.0, 1e-19);
    EXPECT_NEAR(lr_schedule(100 + 450, cfg), 2.5e-4, 1e-12);  // cosine midpoint
    EXPECT_NEAR(lr_schedule(50, cfg), 2.5e-4, 1e-12);         // warmup midpoint
    EXPECT_THROW(lr_schedule(1001, cfg), ConfigError);
}

TEST(AdamW, ZeroGradCases) {
    Tensor p = Tensor::from_data({2.0, -3.0}, {2}, true);
    {
        AdamW opt({{"p", p, false, 1.0}}, AdamWConfig{0.9, 0.98, 1e-6, 0.0});
        backward(scale(sum(p), 0.0));  // populates zero grads
        auto before = p.data();
        opt.step(0.01);
        EXPECT_EQ(p.data(), before);
    }
    p.clear_grad();
    {
        AdamW opt({{"p", p, false, 1.0}}, AdamWConfig{0.9, 0.98, 1e-6, 0.1});
        backward(scale(sum(p), 0.0));
        auto before = p.data();
        opt.step(0.01);
        for (size_t i = 0; i < p.numel(); ++i) EXPECT_DOUBLE_EQ(p.data()[i], before[i] * 0.999);
    }
}

TEST(AdamW, ScalarStepMatchesOracle) {
    Tensor p = Tensor::scalar(1.0, true);
    AdamW opt({{"p", p, false, 1.0}}, AdamWConfig{0.9, 0.98, 1e-6, 0.1});
    backward(sum(p));  // grad = 1
    opt.step(5e-4);

    oracle::AdamWScalar ref;
    const double expected = ref.step(1.0, 1.0, 5e-4, 0.9, 0.98, 1e-6, 0.1);
    EXPECT_NEAR(p.item(), expected, 1e-12);
}

TEST(AdamW, SkipsParamsWithoutGrads) {
    Tensor a = Tensor::scalar(1.0, true), b = Tensor::scalar(2.0, true);
    AdamW opt({{"a", a, false, 1.0}, {"b", b, false, 1.0}}, AdamWConfig{0.9, 0.98, 1e-6, 0.1});
    backward(sum(a));  // only a gets a grad
    opt.step(0.01);
    EXPECT_NE(a.item(), 1.0);
    EXPECT_DOUBLE_EQ(b.item(), 2.0);  // untouched, not even decayed
}

TEST(AdamW, NonFiniteGradThrowsWithStepIndex) {
    Tensor p = Tensor::scalar(1.0, true);
    AdamW opt({{"p", p, false, 1.0}}, AdamWConfig{});
    backward(sum(p));
    const_cast<std::vector<double>&>(p.grad())[0] = std::numeric_limits<double>::infinity();
    try {
        opt.step(0.01);
        FAIL() << "expected NumericError";
    } catch (const NumericError& e) {
        EXPECT_NE(std::string(e.what()).find("step 1"), std::string::npos);
    }
}

TEST(ContrastiveScope, SwitchBoundary) {
    TrainConfig cfg;
    cfg.local_contrastive_steps = 500;
    EXPECT_EQ(contrastive_scope(499, cfg), ContrastiveScope::kLocal);
    EXPECT_EQ(contrastive_scope(500, cfg), ContrastiveScope::kGlobal);
}

TEST(ContrastiveScope, WorldSizeOneLocalEqualsGlobal) {
    Rng rng(81);
    EmbeddingPair pair{l2_normalize(Tensor::randn({6, 8}, rng)), l2_normalize(Tensor::randn({6, 8}, rng))};
    Tensor inv = Tensor::scalar(9.0);
    auto local = sharded_contrastive_loss(pair, inv, ContrastiveScope::kLocal, 1);
    auto global = sharded_contrastive_loss(pair, inv, ContrastiveScope::kGlobal, 1);
    EXPECT_NEAR(local.combined.item(), global.combined.item(), 1e-12);
    EXPECT_NEAR(local.i2t.item(), global.i2t.item(), 1e-12);
}

TEST(ContrastiveScope, GlobalShardedMatchesUnshardedOracle) {
    Rng rng(82);
    const int n = 8, d = 12;
    EmbeddingPair pair{l2_normalize(Tensor::randn({n, d}, rng)), l2_normalize(Tensor::randn({n, d}, rng))};
    const double inv_sigma = 4.0;
    auto global = sharded_contrastive_loss(pair, Tensor::scalar(inv_sigma), ContrastiveScope::kGlobal, 4);

    std::vector<double> logits(static_cast<size_t>(n) * n);
    for (int i = 0; i < n; ++i)
        for (int j = 0; j < n; ++j) {
            double s = 0.0;
            for (int k = 0; k < d; ++k) s += pair.x.at(i, k) * pair.y.at(j, k);
            logits[static_cast<size_t>(i) * n + j] = s * inv_sigma;
        }
    auto expect = oracle::contrastive(logits, n);
    EXPECT_NEAR(global.i2t.item(), expect.i2t, 1e-12);
    EXPECT_NEAR(global.t2i.item(), expect.t2i, 1e-12);

    // Local sharding with 4 shards is a genuinely different loss.
    auto local = sharded_contrastive_loss(pair, Tensor::scalar(inv_sigma), ContrastiveScope::kLocal, 4);
    EXPECT_NE(local.combined.item(), global.combined.item());
}

TEST(TrainStep, ClipModeReportsZeroGenerativeLosses) {
    auto cfg = tiny_run_config();
    cfg.train.mode = TrainMode::kClip;
    Trainer trainer(cfg, tiny_dataset());
    auto b = trainer.step();
    EXPECT_EQ(b.l_gen_i, 0.0);
    EXPECT_EQ(b.l_gen_t, 0.0);
    EXPECT_DOUBLE_EQ(b.total, b.l_c);
}

TEST(TrainStep, ClipModeNeverTouchesDecoder) {
    auto cfg = tiny_run_config();
    cfg.train.mode = TrainMode::kClip;
    Trainer trainer(cfg, tiny_dataset());
    std::vector<std::vector<double>> before;
    trainer.params().decoder.visit("decoder", [&](const std::string&, Tensor& t, bool) {
        before.push_back(t.data());
    });
    for (int i = 0; i < 5; ++i) trainer.step();
    size_t k = 0;
    trainer.params().decoder.visit("decoder", [&](const std::string& name, Tensor& t, bool) {
        EXPECT_EQ(t.data(), before[k++]) << name;
        EXPECT_FALSE(t.has_grad()) << name;
    });
}

TEST(TrainStep, MaskedClipMasksContrastiveInputs) {
    auto cfg = tiny_run_config();
    cfg.train.mode = TrainMode::kMaskedClip;
    Trainer trainer(cfg, tiny_dataset());
    auto b = trainer.step();
    EXPECT_EQ(b.l_gen_i, 0.0);
    EXPECT_DOUBLE_EQ(b.total, b.l_c);
    EXPECT_GT(b.l_c, 0.0);
}

TEST(TrainStep, DoublingGenerativeWeightDoublesContribution) {
    auto base_cfg = tiny_run_config();
    base_cfg.train.local_contrastive_steps = 0;  // global weights from step 0
    base_cfg.train.w_i = 0.1;

    auto run_one = [&](double w_i) {
        auto cfg = base_cfg;
        cfg.train.w_i = w_i;
        Trainer t(cfg, tiny_dataset());
        return t.step();
    };
    auto b1 = run_one(0.1);
    auto b2 = run_one(0.2);
    ASSERT_DOUBLE_EQ(b1.l_gen_i, b2.l_gen_i);  // identical forward pass
    EXPECT_NEAR(b2.total - b1.total, 0.1 * b1.l_gen_i, 1e-12);
}

TEST(TrainStep, GradientsMatchSeparatelyBackpropagatedLosses) {
    // Rebuild the dual-pass computation with pinned masks, then check that
    // the total-loss gradient equals the weighted sum of per-loss gradients.
    auto cfg = tiny_run_config();
    Rng rng(83);
    auto params = MAECLIPParams::init(cfg.model, rng);
    auto data = tiny_dataset(2);

    PairBatch batch;
    Rng mask_rng(84);
    for (const auto& rec : data) {
        PairBatch::Item item;
        item.image = rec.image;
        item.tokens = rec.tokens;
        item.img_mask = random_mask(MaskSpec::Modality::kImage, cfg.model.n_patches(), 0.75, mask_rng);
        item.txt_mask = random_subset_mask(MaskSpec::Modality::kText, static_cast<int>(rec.tokens.size()),
                                           maskable_token_positions(rec.tokens), 0.75, mask_rng);
        batch.items.push_back(item);
    }

    std::vector<Tensor> watched{params.image.patch_proj_w, params.text.token_embed, params.decoder.img_head_w,
                                params.log_inv_temperature};

    auto forward = [&] {
        auto pass1 = detail_train::forward_unmasked(cfg.model, params, batch, nullptr, nullptr);
        auto contrastive =
            sharded_contrastive_loss(pass1.embeddings, inverse_temperature(params), ContrastiveScope::kGlobal, 1);
        std::vector<Tensor> preds, targets, logits;
        std::vector<int> token_targets;
        for (size_t i = 0; i < batch.items.size(); ++i) {
            const auto& item = batch.items[i];
            Tensor vi = encode_image(cfg.model, params.image, item.image, &*item.img_mask);
            Tensor vt = encode_text(cfg.model, params.text, item.tokens, &*item.txt_mask);
            auto dec = decode_cross_modal(cfg.model, params.decoder, vi, vt, *item.img_mask, *item.txt_mask);
            preds.push_back(*dec.patch_preds);
            targets.push_back(take_rows(patchify(item.image, cfg.model.patch_size), item.img_mask->masked));
            logits.push_back(*dec.token_logits);
            for (int pos : item.txt_mask->masked) token_targets.push_back(item.tokens[pos]);
        }
        Tensor gi = gen_image_loss(concat(preds, 0), concat(targets, 0), true);
        Tensor gt = gen_text_loss(concat(logits, 0), token_targets);
        return std::make_tuple(contrastive, gi, gt);
    };

    auto grads_of = [&](const Tensor& loss_root) {
        for (auto& w : watched) w.clear_grad();
        backward(loss_root);
        std::vector<std::vector<double>> out;
        for (auto& w : watched) out.push_back(w.has_grad() ? w.grad() : std::vector<double>(w.numel(), 0.0));
        return out;
    };

    const double w_i = 0.1, w_t = 0.05;
    auto [c0, gi0, gt0] = forward();
    auto g_c = grads_of(c0.combined);
    auto [c1, gi1, gt1] = forward();
    auto g_i = grads_of(gi1);
    auto [c2, gi2, gt2] = forward();
    auto g_t = grads_of(gt2);
    auto [c3, gi3, gt3] = forward();
    auto total = total_loss(c3, gi3, gt3, w_i, w_t);
    auto g_total = grads_of(total.graph);

    for (size_t p = 0; p < watched.size(); ++p)
        for (size_t k = 0; k < g_total[p].size(); ++k)
            EXPECT_NEAR(g_total[p][k], g_c[p][k] + w_i * g_i[p][k] + w_t * g_t[p][k], 1e-9);
}

TEST(Trainer, DeterministicLossTrajectory) {
    auto cfg = tiny_run_config();
    Trainer a(cfg, tiny_dataset());
    Trainer b(cfg, tiny_dataset());
    for (int i = 0; i < 12; ++i) {
        auto la = a.step();
        auto lb = b.step();
        EXPECT_EQ(la.total, lb.total) << "step " << i;  // bit-for-bit
        EXPECT_EQ(la.l_gen_i, lb.l_gen_i);
    }
}

TEST(Trainer, TemperatureClampHolds) {
    auto cfg = tiny_run_config();
    cfg.model.temperature_init = 0.005;  // inverse 200, clamped to 100
    Trainer t(cfg, tiny_dataset());
    for (int i = 0; i < 3; ++i) {
        t.step();
        EXPECT_LE(inverse_temperature(t.params()).item(), kMaxInverseTemperature);
    }
}

TEST(Checkpoint, RoundTripBitExact) {
    auto cfg = tiny_run_config();
    Trainer t(cfg, tiny_dataset());
    for (int i = 0; i < 3; ++i) t.step();
    const std::string path = temp_path("maeclip_test_ckpt.mclp");
    t.save_checkpoint(path);

    Trainer loaded = Trainer::load_checkpoint_file(path, tiny_dataset());
    EXPECT_EQ(loaded.step_count(), 3);

    std::vector<std::pair<std::string, std::vector<double>>> a, b;
    t.params().visit([&](const std::string& n, Tensor& x, bool) { a.emplace_back(n, x.data()); });
    loaded.params().visit([&](const std::string& n, Tensor& x, bool) { b.emplace_back(n, x.data()); });
    ASSERT_EQ(a.size(), b.size());
    for (size_t i = 0; i < a.size(); ++i) {
        EXPECT_EQ(a[i].first, b[i].first);
        EXPECT_EQ(a[i].second, b[i].second) << a[i].first;  // bitwise
    }
    std::filesystem::remove(path);
}

TEST(Checkpoint, TruncatedFileIsFormatError) {
    auto cfg = tiny_run_config();
    Trainer t(cfg, tiny_dataset());
    t.step();
    const std::string path = temp_path("maeclip_test_trunc.mclp");
    t.save_checkpoint(path);
    const auto full_size = std::filesystem::file_size(path);
    std::filesystem::resize_file(path, full_size / 2);
    EXPECT_THROW(read_checkpoint(path), FormatError);
    std::filesystem::resize_file(path, 3);  // not even a full magic
    EXPECT_THROW(read_checkpoint(path), FormatError);
    std::filesystem::remove(path);
}

TEST(Checkpoint, ResumeMatchesUninterruptedRun) {
    auto cfg = tiny_run_config();
    cfg.train.steps = 40;
    Trainer full(cfg, tiny_dataset());
    std::vector<double> full_losses;
    const std::string path = temp_path("maeclip_test_resume.mclp");
    for (int i = 0; i < 30; ++i) {
        if (i == 20) full.save_checkpoint(path);
        full_losses.push_back(full.step().total);
    }

    Trainer resumed = Trainer::load_checkpoint_file(path, tiny_dataset());
    for (int i = 20; i < 30; ++i) {
        const double loss = resumed.step().total;
        EXPECT_NEAR(loss, full_losses[i], 1e-10) << "step " << i;
    }
    std::filesystem::remove(path);
}

TEST(Config, ParseSerializeRoundTrip) {
    RunConfig cfg = tiny_run_config();
    cfg.train.mode = TrainMode::kMaskedClip;
    cfg.train.masking = MaskStrategy::kRandom;
    cfg.model.pooling = Pooling::kMAX;
    std::string text = serialize_config(cfg);
    RunConfig parsed = parse_config_text(text);
    EXPECT_EQ(serialize_config(parsed), text);
}

TEST(Config, UnknownKeyAndBadValues) {
    EXPECT_THROW(parse_config_text("bogus_key = 3\n"), ConfigError);
    EXPECT_THROW(parse_config_text("steps = abc\n"), ConfigError);
    EXPECT_THROW(parse_config_text("steps\n"), ConfigError);
    RunConfig ok = parse_config_text("# comment only\n\nsteps = 123  # trailing\n");
    EXPECT_EQ(ok.train.steps, 123);
}

TEST(Config, ValidationCatchesBadCombos) {
    RunConfig cfg = tiny_run_config();
    cfg.train.warmup_steps = cfg.train.steps;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_run_config();
    cfg.train.batch_size = 5;
    cfg.train.world_size = 2;
    EXPECT_THROW(cfg.validate(), ConfigError);
    cfg = tiny_run_config();
    cfg.train.mode = TrainMode::kMaskedClip;
    cfg.train.masking = MaskStrategy::kSimilarity;
    EXPECT_THROW(cfg.validate(), ConfigError);
}

TEST(Config, TensorMapRoundTrip) {
    RunConfig cfg = tiny_run_config();
    cfg.train.seed = 0xdeadbeefcafef00dull;  // exercises the bit-cast path
    TensorMap map;
    config_to_tensor_map(cfg, map);
    RunConfig back = config_from_tensor_map(map);
    EXPECT_EQ(back.train.seed, cfg.train.seed);
    EXPECT_EQ(serialize_config(back), serialize_config(cfg));
}
