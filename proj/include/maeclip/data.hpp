#pragma once

#include <openssl/evp.h>

#include <algorithm>
#include <array>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <map>
#include <optional>
#include <string>
#include <unordered_set>
#include <vector>

#include "maeclip/errors.hpp"
#include "maeclip/rng.hpp"
#include "maeclip/tensor.hpp"

namespace maeclip {

// --------------------------------------------------------------------------
// Images
// --------------------------------------------------------------------------

/// Row-major H x W x C pixel grid, channel-last, values in [0, 1].
struct Image {
    int height = 0;
    int width = 0;
    int channels = 0;
    std::vector<double> pixels;

    double at(int y, int x, int c) const {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    double& at(int y, int x, int c) {
        return pixels[(static_cast<size_t>(y) * width + x) * channels + c];
    }
    size_t numel() const { return pixels.size(); }
};

inline Image make_image(int h, int w, int c, double fill = 0.0) {
    Image img{h, w, c, std::vector<double>(static_cast<size_t>(h) * w * c, fill)};
    return img;
}

/// Split an image into non-overlapping patch rows: patch (r, c) of the grid
/// becomes row r*grid_w + c, flattened row-major within the patch,
/// channel-last.
inline Tensor patchify(const Image& img, int patch_size) {
    if (patch_size <= 0 || img.height % patch_size != 0 || img.width % patch_size != 0)
        throw DimensionError("patchify: image extents must be divisible by patch size");
    const int gh = img.height / patch_size;
    const int gw = img.width / patch_size;
    const int pp = patch_size * patch_size * img.channels;
    std::vector<double> out(static_cast<size_t>(gh) * gw * pp);
    for (int r = 0; r < gh; ++r)
        for (int c = 0; c < gw; ++c) {
            double* row = out.data() + (static_cast<size_t>(r) * gw + c) * pp;
            for (int py = 0; py < patch_size; ++py)
                for (int px = 0; px < patch_size; ++px)
                    for (int ch = 0; ch < img.channels; ++ch)
                        *row++ = img.at(r * patch_size + py, c * patch_size + px, ch);
        }
    return Tensor::from_data(std::move(out), {gh * gw, pp});
}

inline Image unpatchify(const Tensor& patches, int patch_size, int height, int width, int channels) {
    const int gh = height / patch_size;
    const int gw = width / patch_size;
    const int pp = patch_size * patch_size * channels;
    if (patches.rows() != gh * gw || patches.cols() != pp)
        throw DimensionError("unpatchify: patch matrix does not match image geometry");
    Image img = make_image(height, width, channels);
    const auto& data = patches.data();
    for (int r = 0; r < gh; ++r)
        for (int c = 0; c < gw; ++c) {
            const double* row = data.data() + (static_cast<size_t>(r) * gw + c) * pp;
            for (int py = 0; py < patch_size; ++py)
                for (int px = 0; px < patch_size; ++px)
                    for (int ch = 0; ch < channels; ++ch)
                        img.at(r * patch_size + py, c * patch_size + px, ch) = *row++;
        }
    return img;
}

/// Bilinear resize with edge clamping; sample points at pixel centers.
inline Image resize_bilinear(const Image& src, int out_h, int out_w) {
    Image out = make_image(out_h, out_w, src.channels);
    const double sy = static_cast<double>(src.height) / out_h;
    const double sx = static_cast<double>(src.width) / out_w;
    for (int y = 0; y < out_h; ++y)
        for (int x = 0; x < out_w; ++x) {
            const double fy = std::clamp((y + 0.5) * sy - 0.5, 0.0, src.height - 1.0);
            const double fx = std::clamp((x + 0.5) * sx - 0.5, 0.0, src.width - 1.0);
            const int y0 = static_cast<int>(fy);
            const int x0 = static_cast<int>(fx);
            const int y1 = std::min(y0 + 1, src.height - 1);
            const int x1 = std::min(x0 + 1, src.width - 1);
            const double wy = fy - y0, wx = fx - x0;
            for (int c = 0; c < src.channels; ++c) {
                const double v = (1 - wy) * ((1 - wx) * src.at(y0, x0, c) + wx * src.at(y0, x1, c)) +
                                 wy * ((1 - wx) * src.at(y1, x0, c) + wx * src.at(y1, x1, c));
                out.at(y, x, c) = v;
            }
        }
    return out;
}

/// Training augmentation: crop a random square covering a scale fraction in
/// [min_scale, max_scale] of the area, then resize back to the source size.
inline Image random_resized_crop(const Image& src, Rng& rng, double min_scale = 0.6, double max_scale = 1.0) {
    const double scale = rng.uniform(min_scale, max_scale);
    const int side = std::max(1, static_cast<int>(std::lround(std::sqrt(scale) * std::min(src.height, src.width))));
    const int max_y = src.height - side;
    const int max_x = src.width - side;
    const int y0 = max_y > 0 ? static_cast<int>(rng.uniform_index(max_y + 1)) : 0;
    const int x0 = max_x > 0 ? static_cast<int>(rng.uniform_index(max_x + 1)) : 0;
    Image crop = make_image(side, side, src.channels);
    for (int y = 0; y < side; ++y)
        for (int x = 0; x < side; ++x)
            for (int c = 0; c < src.channels; ++c) crop.at(y, x, c) = src.at(y0 + y, x0 + x, c);
    return resize_bilinear(crop, src.height, src.width);
}

/// Deterministic evaluation-time preprocessing.
inline Image center_resize(const Image& src, int size) {
    if (src.height == size && src.width == size) return src;
    return resize_bilinear(src, size, size);
}

// --------------------------------------------------------------------------
// Tokenization
// --------------------------------------------------------------------------

/// Token id table. Ids 0..3 are reserved (PAD, BOS, EOS, MASK) and are never
/// produced by tokenizing content. The default vocabulary is byte-level:
/// byte b maps to id b + 4, giving 260 ids total. A custom token list can be
/// loaded from a file (one token per line); content is then tokenized by
/// greedy longest match with byte-level fallback.
struct Vocab {
    static constexpr int kPad = 0;
    static constexpr int kBos = 1;
    static constexpr int kEos = 2;
    static constexpr int kMask = 3;
    static constexpr int kReserved = 4;

    std::vector<std::string> id_to_bytes;  // content ids only, id = index + kReserved
    std::map<std::string, int> bytes_to_id;

    static Vocab byte_level() {
        Vocab v;
        v.id_to_bytes.reserve(256);
        for (int b = 0; b < 256; ++b) {
            std::string s(1, static_cast<char>(b));
            v.bytes_to_id[s] = kReserved + b;
            v.id_to_bytes.push_back(s);
        }
        return v;
    }

    static Vocab from_file(const std::string& path) {
        std::ifstream in(path, std::ios::binary);
        if (!in) throw IoError("cannot open vocab file " + path);
        Vocab v = byte_level();
        std::string line;
        while (std::getline(in, line)) {
            if (line.empty() || v.bytes_to_id.count(line)) continue;
            v.bytes_to_id[line] = kReserved + static_cast<int>(v.id_to_bytes.size());
            v.id_to_bytes.push_back(line);
        }
        return v;
    }

    int size() const { return kReserved + static_cast<int>(id_to_bytes.size()); }

    bool is_special(int id) const { return id < kReserved; }

    const std::string& bytes_of(int id) const {
        if (id < kReserved || id >= size()) throw IndexError("token id out of vocab range");
        return id_to_bytes[id - kReserved];
    }
};

/// BOS + content ids + EOS; greedy longest match against the vocab.
inline std::vector<int> tokenize(const std::string& text, const Vocab& vocab) {
    std::vector<int> ids{Vocab::kBos};
    size_t i = 0;
    // Longest token length bounds the lookahead.
    size_t max_len = 1;
    for (const auto& t : vocab.id_to_bytes) max_len = std::max(max_len, t.size());
    while (i < text.size()) {
        int best_id = -1;
        size_t best_len = 0;
        for (size_t len = std::min(max_len, text.size() - i); len >= 1; --len) {
            auto it = vocab.bytes_to_id.find(text.substr(i, len));
            if (it != vocab.bytes_to_id.end()) {
                best_id = it->second;
                best_len = len;
                break;
            }
        }
        ids.push_back(best_id);
        i += best_len;
    }
    ids.push_back(Vocab::kEos);
    return ids;
}

inline std::string detokenize(const std::vector<int>& ids, const Vocab& vocab) {
    std::string out;
    for (int id : ids) {
        if (vocab.is_special(id)) continue;
        out += vocab.bytes_of(id);
    }
    return out;
}

// --------------------------------------------------------------------------
// Records and hashing
// --------------------------------------------------------------------------

using Digest = std::array<uint8_t, 32>;

inline Digest sha256_bytes(const void* data, size_t len) {
    Digest out{};
    unsigned int out_len = 0;
    if (EVP_Digest(data, len, out.data(), &out_len, EVP_sha256(), nullptr) != 1 || out_len != out.size())
        throw IoError("sha256 computation failed");
    return out;
}

inline std::string hex_digest(const Digest& d) {
    static const char* hexch = "0123456789abcdef";
    std::string s;
    s.reserve(64);
    for (uint8_t b : d) {
        s += hexch[b >> 4];
        s += hexch[b & 0xf];
    }
    return s;
}

/// Content hash of an image: SHA-256 over the f32 little-endian pixel
/// stream, matching the bytes stored in the dataset file.
inline Digest image_digest(const Image& img) {
    std::vector<float> f32(img.pixels.size());
    for (size_t i = 0; i < f32.size(); ++i) f32[i] = static_cast<float>(img.pixels[i]);
    return sha256_bytes(f32.data(), f32.size() * sizeof(float));
}

struct PairRecord {
    Image image;
    std::vector<int> tokens;
    std::string caption_bytes;
    Digest digest{};

    void validate() const {
        if (tokens.size() < 2 || tokens.front() != Vocab::kBos || tokens.back() != Vocab::kEos)
            throw ContractError("token array must start with BOS and end with EOS");
        for (double p : image.pixels)
            if (!std::isfinite(p) || p < 0.0 || p > 1.0) throw NumericError("pixels must be finite in [0, 1]");
    }
};

/// Keep the first occurrence of each image digest; order otherwise stable.
inline std::vector<PairRecord> dedup_by_image_bytes(const std::vector<PairRecord>& records) {
    std::unordered_set<std::string> seen;
    std::vector<PairRecord> out;
    out.reserve(records.size());
    for (const auto& r : records) {
        if (seen.insert(hex_digest(r.digest)).second) out.push_back(r);
    }
    return out;
}

// --------------------------------------------------------------------------
// Synthetic pair generation
// --------------------------------------------------------------------------

struct SynthSpec {
    std::vector<std::string> shapes{"square", "circle", "triangle", "cross"};
    std::vector<std::string> colors{"red", "green", "blue", "yellow"};
    int image_size = 32;
    std::string caption_template = "a {color} {shape} in the {position}";

    static const std::vector<std::string>& positions() {
        static const std::vector<std::string> p{"top left", "top right", "bottom left", "bottom right"};
        return p;
    }
};

namespace detail_synth {

inline std::array<double, 3> color_rgb(const std::string& name) {
    if (name == "red") return {0.9, 0.15, 0.15};
    if (name == "green") return {0.15, 0.8, 0.2};
    if (name == "blue") return {0.15, 0.25, 0.9};
    if (name == "yellow") return {0.9, 0.85, 0.15};
    if (name == "magenta") return {0.85, 0.2, 0.8};
    if (name == "cyan") return {0.2, 0.8, 0.85};
    // Unknown names get a stable pseudo-color from the name bytes.
    uint32_t h = 2166136261u;
    for (char c : name) h = (h ^ static_cast<uint8_t>(c)) * 16777619u;
    return {0.2 + (h & 0xff) / 512.0, 0.2 + ((h >> 8) & 0xff) / 512.0, 0.2 + ((h >> 16) & 0xff) / 512.0};
}

inline bool inside_shape(const std::string& shape, double u, double v) {
    // u, v in [-1, 1] local shape coordinates.
    if (shape == "square") return std::abs(u) <= 0.8 && std::abs(v) <= 0.8;
    if (shape == "circle") return u * u + v * v <= 0.72;
    if (shape == "triangle") return v >= -0.75 && std::abs(u) <= (v + 0.75) * 0.55;
    if (shape == "cross") return std::abs(u) <= 0.28 || std::abs(v) <= 0.28;
    return u * u + v * v <= 0.5;  // fallback blob
}

}  // namespace detail_synth

struct SynthSample {
    PairRecord record;
    std::vector<int> shape_mask;  // per pixel: 1 where the shape is drawn, 0 background
    int shape_index = 0;
    int color_index = 0;
    int position_index = 0;
};

/// Procedural image-text pair: one colored shape on a plain background in
/// one quadrant, captioned by a template naming color, shape, and position.
/// The (shape, color, position) combination cycles through a per-seed
/// shuffled order so any prefix of the stream is caption-discriminative; the
/// background level varies per index so image digests never collide.
inline SynthSample make_synthetic_sample(const SynthSpec& spec, uint64_t seed, int index, int total) {
    const auto& positions = SynthSpec::positions();
    const int n_combo = static_cast<int>(spec.shapes.size() * spec.colors.size() * positions.size());
    const int cycle = index / n_combo;
    std::vector<int> order(n_combo);
    for (int i = 0; i < n_combo; ++i) order[i] = i;
    Rng order_rng(seed * 1000003ull + static_cast<uint64_t>(cycle));
    order_rng.shuffle(order);
    const int combo = order[index % n_combo];

    SynthSample s;
    s.shape_index = combo % static_cast<int>(spec.shapes.size());
    s.color_index = (combo / static_cast<int>(spec.shapes.size())) % static_cast<int>(spec.colors.size());
    s.position_index = combo / static_cast<int>(spec.shapes.size() * spec.colors.size());

    const int size = spec.image_size;
    const double bg = 0.08 + 0.04 * (total > 1 ? static_cast<double>(index) / (total - 1) : 0.0);
    Image img = make_image(size, size, 3, bg);
    s.shape_mask.assign(static_cast<size_t>(size) * size, 0);

    const auto rgb = detail_synth::color_rgb(spec.colors[s.color_index]);
    const double half = size / 4.0;  // shape radius: one quadrant
    const double cy = (s.position_index / 2 == 0) ? half : size - half;
    const double cx = (s.position_index % 2 == 0) ? half : size - half;
    for (int y = 0; y < size; ++y)
        for (int x = 0; x < size; ++x) {
            const double u = (x + 0.5 - cx) / half;
            const double v = (y + 0.5 - cy) / half;
            if (detail_synth::inside_shape(spec.shapes[s.shape_index], u, v)) {
                img.at(y, x, 0) = rgb[0];
                img.at(y, x, 1) = rgb[1];
                img.at(y, x, 2) = rgb[2];
                s.shape_mask[static_cast<size_t>(y) * size + x] = 1;
            }
        }

    std::string caption = spec.caption_template;
    auto replace = [&](const std::string& key, const std::string& value) {
        auto pos = caption.find(key);
        if (pos != std::string::npos) caption.replace(pos, key.size(), value);
    };
    replace("{color}", spec.colors[s.color_index]);
    replace("{shape}", spec.shapes[s.shape_index]);
    replace("{position}", positions[s.position_index]);

    // Pixels are stored as f32 in dataset files; quantize now so a record
    // survives a write/read round trip bit-exactly.
    for (auto& p : img.pixels) p = static_cast<double>(static_cast<float>(p));

    s.record.image = std::move(img);
    s.record.caption_bytes = caption;
    s.record.tokens = tokenize(caption, Vocab::byte_level());
    s.record.digest = image_digest(s.record.image);
    return s;
}

inline std::vector<PairRecord> make_synthetic_pairs(uint64_t seed, int n, const SynthSpec& spec) {
    if (n < 1) throw ConfigError("synthetic pair count must be >= 1");
    std::vector<PairRecord> out;
    out.reserve(n);
    for (int i = 0; i < n; ++i) out.push_back(make_synthetic_sample(spec, seed, i, n).record);
    return out;
}

// --------------------------------------------------------------------------
// Dataset file (magic "ITP1"), streamed records
// --------------------------------------------------------------------------

namespace detail_io {

inline void write_u32(std::ostream& os, uint32_t v) {
    uint8_t b[4] = {static_cast<uint8_t>(v), static_cast<uint8_t>(v >> 8), static_cast<uint8_t>(v >> 16),
                    static_cast<uint8_t>(v >> 24)};
    os.write(reinterpret_cast<const char*>(b), 4);
}

inline uint32_t read_u32(std::istream& is, const char* field) {
    uint8_t b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    if (is.gcount() != 4) throw FormatError(std::string("truncated while reading ") + field);
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
           static_cast<uint32_t>(b[3]) << 24;
}

inline void write_f32(std::ostream& os, float v) {
    uint32_t bits;
    std::memcpy(&bits, &v, 4);
    write_u32(os, bits);
}

inline float read_f32(std::istream& is, const char* field) {
    const uint32_t bits = read_u32(is, field);
    float v;
    std::memcpy(&v, &bits, 4);
    return v;
}

}  // namespace detail_io

inline void write_dataset(const std::string& path, const std::vector<PairRecord>& records) {
    std::ofstream os(path, std::ios::binary);
    if (!os) throw IoError("cannot open " + path + " for writing");
    os.write("ITP1", 4);
    for (const auto& r : records) {
        detail_io::write_u32(os, static_cast<uint32_t>(r.image.height));
        detail_io::write_u32(os, static_cast<uint32_t>(r.image.width));
        detail_io::write_u32(os, static_cast<uint32_t>(r.image.channels));
        for (double p : r.image.pixels) detail_io::write_f32(os, static_cast<float>(p));
        detail_io::write_u32(os, static_cast<uint32_t>(r.tokens.size()));
        for (int t : r.tokens) detail_io::write_u32(os, static_cast<uint32_t>(t));
        detail_io::write_u32(os, static_cast<uint32_t>(r.caption_bytes.size()));
        os.write(r.caption_bytes.data(), static_cast<std::streamsize>(r.caption_bytes.size()));
    }
    if (!os) throw IoError("failed writing dataset to " + path);
}

inline std::vector<PairRecord> read_dataset(const std::string& path) {
    std::ifstream is(path, std::ios::binary);
    if (!is) throw IoError("cannot open dataset file " + path);
    char magic[4];
    is.read(magic, 4);
    if (is.gcount() != 4 || std::memcmp(magic, "ITP1", 4) != 0)
        throw FormatError("bad dataset magic (expected ITP1)");
    std::vector<PairRecord> out;
    while (true) {
        is.peek();
        if (is.eof()) break;
        PairRecord r;
        const uint32_t h = detail_io::read_u32(is, "record height");
        const uint32_t w = detail_io::read_u32(is, "record width");
        const uint32_t c = detail_io::read_u32(is, "record channels");
        if (h == 0 || w == 0 || c == 0 || h > 4096 || w > 4096 || c > 4)
            throw FormatError("implausible image dims in record header");
        r.image = make_image(static_cast<int>(h), static_cast<int>(w), static_cast<int>(c));
        for (auto& p : r.image.pixels) p = detail_io::read_f32(is, "pixel data");
        const uint32_t tc = detail_io::read_u32(is, "token count");
        r.tokens.resize(tc);
        for (auto& t : r.tokens) t = static_cast<int>(detail_io::read_u32(is, "token id"));
        const uint32_t cl = detail_io::read_u32(is, "caption length");
        r.caption_bytes.resize(cl);
        is.read(r.caption_bytes.data(), cl);
        if (is.gcount() != static_cast<std::streamsize>(cl)) throw FormatError("truncated while reading caption bytes");
        r.digest = image_digest(r.image);
        out.push_back(std::move(r));
    }
    return out;
}

/// Deterministic per-epoch iteration order: a pure function of (seed, epoch).
inline std::vector<int> epoch_order(int n, uint64_t seed, int epoch) {
    std::vector<int> idx(n);
    for (int i = 0; i < n; ++i) idx[i] = i;
    Rng rng(seed ^ (0x517cc1b727220a95ull + static_cast<uint64_t>(epoch) * 0x2545f4914f6cdd1dull));
    rng.shuffle(idx);
    return idx;
}

}  // namespace maeclip
