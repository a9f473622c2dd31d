#pragma once

#include <cstdint>
#include <cstring>
#include <fstream>
#include <functional>
#include <map>
#include <sstream>
#include <string>
#include <vector>

#include "maeclip/checkpoint.hpp"
#include "maeclip/errors.hpp"
#include "maeclip/model.hpp"

namespace maeclip {

enum class TrainMode { kMaeClip, kClip, kMaskedClip };
enum class MaskStrategy { kRandom, kSimilarity };

inline TrainMode parse_mode(const std::string& s) {
    if (s == "mae_clip") return TrainMode::kMaeClip;
    if (s == "clip") return TrainMode::kClip;
    if (s == "masked_clip") return TrainMode::kMaskedClip;
    throw ConfigError("unknown mode '" + s + "' (expected mae_clip|clip|masked_clip)");
}

inline std::string mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::kMaeClip: return "mae_clip";
        case TrainMode::kClip: return "clip";
        default: return "masked_clip";
    }
}

inline MaskStrategy parse_masking(const std::string& s) {
    if (s == "random") return MaskStrategy::kRandom;
    if (s == "similarity") return MaskStrategy::kSimilarity;
    throw ConfigError("unknown masking '" + s + "' (expected random|similarity)");
}

inline std::string masking_name(MaskStrategy m) {
    return m == MaskStrategy::kRandom ? "random" : "similarity";
}

struct TrainConfig {
    int64_t steps = 400;
    int64_t warmup_steps = 20;
    int64_t local_contrastive_steps = 100;
    double base_lr = 3e-3;
    double weight_decay = 0.1;
    double beta1 = 0.9;
    double beta2 = 0.98;
    double adam_eps = 1e-6;
    int batch_size = 8;
    int world_size = 1;
    double w_i = 0.1;
    double w_t = 0.05;
    double local_w_i = 1.0;  // weights during the local contrastive phase
    double local_w_t = 1.0;
    TrainMode mode = TrainMode::kMaeClip;
    MaskStrategy masking = MaskStrategy::kSimilarity;
    uint64_t seed = 1;
    bool augment = false;

    void validate() const {
        if (steps < 1) throw ConfigError("steps must be >= 1");
        if (warmup_steps < 0 || warmup_steps >= steps) throw ConfigError("warmup_steps must lie in [0, steps)");
        if (local_contrastive_steps < 0) throw ConfigError("local_contrastive_steps must be >= 0");
        if (base_lr <= 0.0) throw ConfigError("base_lr must be positive");
        if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
        if (beta1 < 0.0 || beta1 >= 1.0 || beta2 < 0.0 || beta2 >= 1.0) throw ConfigError("betas must lie in [0, 1)");
        if (adam_eps <= 0.0) throw ConfigError("adam_eps must be positive");
        if (world_size < 1) throw ConfigError("world_size must be >= 1");
        if (batch_size < 1 || batch_size % world_size != 0)
            throw ConfigError("batch_size must be a positive multiple of world_size");
        if (w_i < 0.0 || w_t < 0.0 || local_w_i < 0.0 || local_w_t < 0.0)
            throw ConfigError("loss weights must be >= 0");
        if (mode == TrainMode::kMaskedClip && masking == MaskStrategy::kSimilarity)
            throw ConfigError("masked_clip has no unmasked pass to score similarity from; use masking = random");
    }
};

struct RunConfig {
    MAECLIPConfig model;
    TrainConfig train;

    void validate() const {
        model.validate();
        train.validate();
    }
};

// --------------------------------------------------------------------------
// key = value config files; '#' starts a comment, unknown keys are errors.
// --------------------------------------------------------------------------

namespace detail_cfg {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return "";
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

inline int64_t to_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int64_t out = std::stoll(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects an integer, got '" + v + "'");
    }
}

inline double to_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double out = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument(v);
        return out;
    } catch (const std::exception&) {
        throw ConfigError("key '" + key + "' expects a number, got '" + v + "'");
    }
}

inline bool to_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw ConfigError("key '" + key + "' expects true|false, got '" + v + "'");
}

inline std::string fmt(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace detail_cfg

/// Apply one key/value pair. Throws ConfigError on unknown keys.
inline void apply_config_entry(RunConfig& cfg, const std::string& key, const std::string& value) {
    using detail_cfg::to_bool;
    using detail_cfg::to_double;
    using detail_cfg::to_int;
    auto& m = cfg.model;
    auto& t = cfg.train;
    if (key == "image_size") m.image_size = static_cast<int>(to_int(key, value));
    else if (key == "patch_size") m.patch_size = static_cast<int>(to_int(key, value));
    else if (key == "channels") m.channels = static_cast<int>(to_int(key, value));
    else if (key == "embed_dim") m.embed_dim = static_cast<int>(to_int(key, value));
    else if (key == "pooling") m.pooling = parse_pooling(value);
    else if (key == "temperature_init") m.temperature_init = to_double(key, value);
    else if (key == "mask_ratio") m.mask_ratio = to_double(key, value);
    else if (key == "normalize_targets") m.normalize_targets = to_bool(key, value);
    else if (key == "img_depth") m.image_encoder.depth = static_cast<int>(to_int(key, value));
    else if (key == "img_width") m.image_encoder.width = static_cast<int>(to_int(key, value));
    else if (key == "img_heads") m.image_encoder.heads = static_cast<int>(to_int(key, value));
    else if (key == "img_mlp_ratio") m.image_encoder.mlp_ratio = static_cast<int>(to_int(key, value));
    else if (key == "txt_depth") m.text_encoder.depth = static_cast<int>(to_int(key, value));
    else if (key == "txt_width") m.text_encoder.width = static_cast<int>(to_int(key, value));
    else if (key == "txt_heads") m.text_encoder.heads = static_cast<int>(to_int(key, value));
    else if (key == "txt_mlp_ratio") m.text_encoder.mlp_ratio = static_cast<int>(to_int(key, value));
    else if (key == "vocab_size") m.text_encoder.vocab_size = static_cast<int>(to_int(key, value));
    else if (key == "max_seq") m.text_encoder.max_seq = static_cast<int>(to_int(key, value));
    else if (key == "dec_depth") m.decoder.depth = static_cast<int>(to_int(key, value));
    else if (key == "dec_width") m.decoder.width = static_cast<int>(to_int(key, value));
    else if (key == "dec_heads") m.decoder.heads = static_cast<int>(to_int(key, value));
    else if (key == "dec_mlp_ratio") m.decoder.mlp_ratio = static_cast<int>(to_int(key, value));
    else if (key == "w_i") { m.w_i = to_double(key, value); t.w_i = m.w_i; }
    else if (key == "w_t") { m.w_t = to_double(key, value); t.w_t = m.w_t; }
    else if (key == "local_w_i") t.local_w_i = to_double(key, value);
    else if (key == "local_w_t") t.local_w_t = to_double(key, value);
    else if (key == "steps") t.steps = to_int(key, value);
    else if (key == "warmup_steps") t.warmup_steps = to_int(key, value);
    else if (key == "local_contrastive_steps") t.local_contrastive_steps = to_int(key, value);
    else if (key == "base_lr") t.base_lr = to_double(key, value);
    else if (key == "weight_decay") t.weight_decay = to_double(key, value);
    else if (key == "beta1") t.beta1 = to_double(key, value);
    else if (key == "beta2") t.beta2 = to_double(key, value);
    else if (key == "adam_eps") t.adam_eps = to_double(key, value);
    else if (key == "batch_size") t.batch_size = static_cast<int>(to_int(key, value));
    else if (key == "world_size") t.world_size = static_cast<int>(to_int(key, value));
    else if (key == "mode") t.mode = parse_mode(value);
    else if (key == "masking") t.masking = parse_masking(value);
    else if (key == "seed") t.seed = static_cast<uint64_t>(to_int(key, value));
    else if (key == "augment") t.augment = to_bool(key, value);
    else throw ConfigError("unknown config key '" + key + "'");
}

inline RunConfig parse_config_text(const std::string& text, RunConfig base = RunConfig{}) {
    std::istringstream is(text);
    std::string line;
    int line_no = 0;
    while (std::getline(is, line)) {
        ++line_no;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = detail_cfg::trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos)
            throw ConfigError("line " + std::to_string(line_no) + " is not a key = value pair");
        const std::string key = detail_cfg::trim(line.substr(0, eq));
        const std::string value = detail_cfg::trim(line.substr(eq + 1));
        if (key.empty() || value.empty())
            throw ConfigError("line " + std::to_string(line_no) + " has an empty key or value");
        apply_config_entry(base, key, value);
    }
    return base;
}

inline RunConfig load_config_file(const std::string& path, RunConfig base = RunConfig{}) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw IoError("cannot open config file " + path);
    std::ostringstream ss;
    ss << in.rdbuf();
    return parse_config_text(ss.str(), std::move(base));
}

/// Canonical text form with every key resolved (the run manifest body).
inline std::string serialize_config(const RunConfig& cfg) {
    using detail_cfg::fmt;
    const auto& m = cfg.model;
    const auto& t = cfg.train;
    std::ostringstream os;
    os << "image_size = " << m.image_size << "\n";
    os << "patch_size = " << m.patch_size << "\n";
    os << "channels = " << m.channels << "\n";
    os << "embed_dim = " << m.embed_dim << "\n";
    os << "pooling = " << pooling_name(m.pooling) << "\n";
    os << "temperature_init = " << fmt(m.temperature_init) << "\n";
    os << "mask_ratio = " << fmt(m.mask_ratio) << "\n";
    os << "normalize_targets = " << (m.normalize_targets ? "true" : "false") << "\n";
    os << "img_depth = " << m.image_encoder.depth << "\n";
    os << "img_width = " << m.image_encoder.width << "\n";
    os << "img_heads = " << m.image_encoder.heads << "\n";
    os << "img_mlp_ratio = " << m.image_encoder.mlp_ratio << "\n";
    os << "txt_depth = " << m.text_encoder.depth << "\n";
    os << "txt_width = " << m.text_encoder.width << "\n";
    os << "txt_heads = " << m.text_encoder.heads << "\n";
    os << "txt_mlp_ratio = " << m.text_encoder.mlp_ratio << "\n";
    os << "vocab_size = " << m.text_encoder.vocab_size << "\n";
    os << "max_seq = " << m.text_encoder.max_seq << "\n";
    os << "dec_depth = " << m.decoder.depth << "\n";
    os << "dec_width = " << m.decoder.width << "\n";
    os << "dec_heads = " << m.decoder.heads << "\n";
    os << "dec_mlp_ratio = " << m.decoder.mlp_ratio << "\n";
    os << "w_i = " << fmt(t.w_i) << "\n";
    os << "w_t = " << fmt(t.w_t) << "\n";
    os << "local_w_i = " << fmt(t.local_w_i) << "\n";
    os << "local_w_t = " << fmt(t.local_w_t) << "\n";
    os << "steps = " << t.steps << "\n";
    os << "warmup_steps = " << t.warmup_steps << "\n";
    os << "local_contrastive_steps = " << t.local_contrastive_steps << "\n";
    os << "base_lr = " << fmt(t.base_lr) << "\n";
    os << "weight_decay = " << fmt(t.weight_decay) << "\n";
    os << "beta1 = " << fmt(t.beta1) << "\n";
    os << "beta2 = " << fmt(t.beta2) << "\n";
    os << "adam_eps = " << fmt(t.adam_eps) << "\n";
    os << "batch_size = " << t.batch_size << "\n";
    os << "world_size = " << t.world_size << "\n";
    os << "mode = " << mode_name(t.mode) << "\n";
    os << "masking = " << masking_name(t.masking) << "\n";
    os << "seed = " << t.seed << "\n";
    os << "augment = " << (t.augment ? "true" : "false") << "\n";
    return os.str();
}

// --------------------------------------------------------------------------
// Config <-> checkpoint tensors (so a checkpoint alone rebuilds the model)
// --------------------------------------------------------------------------

inline void config_to_tensor_map(const RunConfig& cfg, TensorMap& map) {
    auto put = [&](const std::string& key, double v) { map["config/" + key] = {{1}, {v}}; };
    const auto& m = cfg.model;
    const auto& t = cfg.train;
    put("image_size", m.image_size);
    put("patch_size", m.patch_size);
    put("channels", m.channels);
    put("embed_dim", m.embed_dim);
    put("pooling", static_cast<double>(m.pooling == Pooling::kMAP ? 0 : m.pooling == Pooling::kGAP ? 1 : 2));
    put("temperature_init", m.temperature_init);
    put("mask_ratio", m.mask_ratio);
    put("normalize_targets", m.normalize_targets ? 1 : 0);
    put("img_depth", m.image_encoder.depth);
    put("img_width", m.image_encoder.width);
    put("img_heads", m.image_encoder.heads);
    put("img_mlp_ratio", m.image_encoder.mlp_ratio);
    put("txt_depth", m.text_encoder.depth);
    put("txt_width", m.text_encoder.width);
    put("txt_heads", m.text_encoder.heads);
    put("txt_mlp_ratio", m.text_encoder.mlp_ratio);
    put("vocab_size", m.text_encoder.vocab_size);
    put("max_seq", m.text_encoder.max_seq);
    put("dec_depth", m.decoder.depth);
    put("dec_width", m.decoder.width);
    put("dec_heads", m.decoder.heads);
    put("dec_mlp_ratio", m.decoder.mlp_ratio);
    put("w_i", t.w_i);
    put("w_t", t.w_t);
    put("local_w_i", t.local_w_i);
    put("local_w_t", t.local_w_t);
    put("steps", static_cast<double>(t.steps));
    put("warmup_steps", static_cast<double>(t.warmup_steps));
    put("local_contrastive_steps", static_cast<double>(t.local_contrastive_steps));
    put("base_lr", t.base_lr);
    put("weight_decay", t.weight_decay);
    put("beta1", t.beta1);
    put("beta2", t.beta2);
    put("adam_eps", t.adam_eps);
    put("batch_size", t.batch_size);
    put("world_size", t.world_size);
    put("mode", static_cast<double>(t.mode == TrainMode::kMaeClip ? 0 : t.mode == TrainMode::kClip ? 1 : 2));
    put("masking", t.masking == MaskStrategy::kRandom ? 0 : 1);
    double seed_bits;
    std::memcpy(&seed_bits, &t.seed, 8);
    put("seed", seed_bits);
    put("augment", t.augment ? 1 : 0);
}

inline RunConfig config_from_tensor_map(const TensorMap& map) {
    auto get = [&](const std::string& key) { return require_tensor(map, "config/" + key).values.at(0); };
    RunConfig cfg;
    auto& m = cfg.model;
    auto& t = cfg.train;
    m.image_size = static_cast<int>(get("image_size"));
    m.patch_size = static_cast<int>(get("patch_size"));
    m.channels = static_cast<int>(get("channels"));
    m.embed_dim = static_cast<int>(get("embed_dim"));
    const int pool_code = static_cast<int>(get("pooling"));
    m.pooling = pool_code == 0 ? Pooling::kMAP : pool_code == 1 ? Pooling::kGAP : Pooling::kMAX;
    m.temperature_init = get("temperature_init");
    m.mask_ratio = get("mask_ratio");
    m.normalize_targets = get("normalize_targets") != 0.0;
    m.image_encoder.depth = static_cast<int>(get("img_depth"));
    m.image_encoder.width = static_cast<int>(get("img_width"));
    m.image_encoder.heads = static_cast<int>(get("img_heads"));
    m.image_encoder.mlp_ratio = static_cast<int>(get("img_mlp_ratio"));
    m.text_encoder.depth = static_cast<int>(get("txt_depth"));
    m.text_encoder.width = static_cast<int>(get("txt_width"));
    m.text_encoder.heads = static_cast<int>(get("txt_heads"));
    m.text_encoder.mlp_ratio = static_cast<int>(get("txt_mlp_ratio"));
    m.text_encoder.vocab_size = static_cast<int>(get("vocab_size"));
    m.text_encoder.max_seq = static_cast<int>(get("max_seq"));
    m.decoder.depth = static_cast<int>(get("dec_depth"));
    m.decoder.width = static_cast<int>(get("dec_width"));
    m.decoder.heads = static_cast<int>(get("dec_heads"));
    m.decoder.mlp_ratio = static_cast<int>(get("dec_mlp_ratio"));
    t.w_i = m.w_i = get("w_i");
    t.w_t = m.w_t = get("w_t");
    t.local_w_i = get("local_w_i");
    t.local_w_t = get("local_w_t");
    t.steps = static_cast<int64_t>(get("steps"));
    t.warmup_steps = static_cast<int64_t>(get("warmup_steps"));
    t.local_contrastive_steps = static_cast<int64_t>(get("local_contrastive_steps"));
    t.base_lr = get("base_lr");
    t.weight_decay = get("weight_decay");
    t.beta1 = get("beta1");
    t.beta2 = get("beta2");
    t.adam_eps = get("adam_eps");
    t.batch_size = static_cast<int>(get("batch_size"));
    t.world_size = static_cast<int>(get("world_size"));
    const int mode_code = static_cast<int>(get("mode"));
    t.mode = mode_code == 0 ? TrainMode::kMaeClip : mode_code == 1 ? TrainMode::kClip : TrainMode::kMaskedClip;
    t.masking = get("masking") == 0.0 ? MaskStrategy::kRandom : MaskStrategy::kSimilarity;
    const double seed_bits = get("seed");
    std::memcpy(&t.seed, &seed_bits, 8);
    t.augment = get("augment") != 0.0;
    return cfg;
}

}  // namespace maeclip
