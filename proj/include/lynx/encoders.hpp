#pragma once

// Deterministic stand-ins for the pretrained components a full-scale system
// would bring along:
//   - toy latent codec: 8x average pool + a fixed random linear map per
//     pixel, with a pseudo-inverse decoder
//   - hash-based text embedder: stable token -> vector lookup
//   - stub face embedder: crop, downsample, fixed random projection,
//     L2 normalize; plus a trivial face-presence check
// All of them are pure functions of their inputs and compile-time seeds.

#include <cctype>
#include <cmath>
#include <string>
#include <vector>

#include "lynx/backbone.hpp"
#include "lynx/common.hpp"
#include "lynx/media.hpp"
#include "lynx/tensor.hpp"

namespace lynx {

constexpr int64_t kLatentPool = 8;
constexpr uint64_t kLatentProjSeed = 0x1f3a5c7e90b2d4f6ull;
constexpr uint64_t kFaceProjSeed = 0x6d4b2a1908c7e5f3ull;
constexpr uint64_t kTextEmbedSeed = 0x43f0aa12bd9c87e1ull;

namespace detail {

// Gauss-Jordan inverse for the tiny symmetric systems the codec needs.
inline std::vector<double> invert_small(std::vector<double> a, int64_t n) {
    std::vector<double> inv(size_t(n * n), 0.0);
    for (int64_t i = 0; i < n; ++i) inv[size_t(i * n + i)] = 1.0;
    for (int64_t col = 0; col < n; ++col) {
        int64_t pivot = col;
        for (int64_t r = col + 1; r < n; ++r)
            if (std::abs(a[size_t(r * n + col)]) > std::abs(a[size_t(pivot * n + col)])) pivot = r;
        if (std::abs(a[size_t(pivot * n + col)]) < 1e-12)
            throw runtime_error("latent codec: singular projection");
        if (pivot != col)
            for (int64_t j = 0; j < n; ++j) {
                std::swap(a[size_t(pivot * n + j)], a[size_t(col * n + j)]);
                std::swap(inv[size_t(pivot * n + j)], inv[size_t(col * n + j)]);
            }
        const double d = a[size_t(col * n + col)];
        for (int64_t j = 0; j < n; ++j) {
            a[size_t(col * n + j)] /= d;
            inv[size_t(col * n + j)] /= d;
        }
        for (int64_t r = 0; r < n; ++r) {
            if (r == col) continue;
            const double f = a[size_t(r * n + col)];
            if (f == 0.0) continue;
            for (int64_t j = 0; j < n; ++j) {
                a[size_t(r * n + j)] -= f * a[size_t(col * n + j)];
                inv[size_t(r * n + j)] -= f * inv[size_t(col * n + j)];
            }
        }
    }
    return inv;
}

inline std::vector<double> to_rgb_unit(const Image& img) {
    std::vector<double> rgb(size_t(img.h * img.w * 3));
    for (int64_t y = 0; y < img.h; ++y)
        for (int64_t x = 0; x < img.w; ++x)
            for (int64_t ch = 0; ch < 3; ++ch) {
                const int64_t src = img.c == 1 ? 0 : std::min(ch, img.c - 1);
                rgb[size_t((y * img.w + x) * 3 + ch)] = double(img.at(y, x, src)) / 255.0;
            }
    return rgb;
}

}  // namespace detail

// Fixed random 3 -> channels map and its pseudo-inverse.
class ToyLatentCodec {
public:
    explicit ToyLatentCodec(int64_t channels) : channels_(channels) {
        if (channels < 3)
            throw config_error("latent codec: latent_channels must be >= 3 for a usable "
                               "pseudo-inverse, got " + std::to_string(channels));
        Rng rng(kLatentProjSeed);
        fwd_.resize(size_t(3 * channels));
        for (auto& v : fwd_) v = rng.normal(0.0, 1.0 / std::sqrt(3.0));
        // pinv = fwd^T (fwd fwd^T)^-1, mapping channels -> 3
        std::vector<double> gram(9, 0.0);  // fwd fwd^T, 3x3
        for (int64_t i = 0; i < 3; ++i)
            for (int64_t j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (int64_t k = 0; k < channels; ++k)
                    acc += fwd_[size_t(i * channels + k)] * fwd_[size_t(j * channels + k)];
                gram[size_t(i * 3 + j)] = acc;
            }
        const std::vector<double> gram_inv = detail::invert_small(gram, 3);
        inv_.assign(size_t(channels * 3), 0.0);
        for (int64_t k = 0; k < channels; ++k)
            for (int64_t j = 0; j < 3; ++j) {
                double acc = 0.0;
                for (int64_t i = 0; i < 3; ++i)
                    acc += fwd_[size_t(i * channels + k)] * gram_inv[size_t(i * 3 + j)];
                inv_[size_t(k * 3 + j)] = acc;
            }
    }

    int64_t channels() const { return channels_; }

    // (H, W) image -> (1, H/8, W/8, channels) latent frame
    LatentVideo encode_frame(const Image& img) const {
        if (img.w % kLatentPool != 0 || img.h % kLatentPool != 0)
            throw runtime_error("latent codec: image " + std::to_string(img.w) + "x" +
                                std::to_string(img.h) + " not divisible by pool " +
                                std::to_string(kLatentPool));
        const int64_t lh = img.h / kLatentPool, lw = img.w / kLatentPool;
        const std::vector<double> rgb = detail::to_rgb_unit(img);
        LatentVideo out = LatentVideo::zeros(1, lh, lw, channels_);
        for (int64_t y = 0; y < lh; ++y)
            for (int64_t x = 0; x < lw; ++x) {
                double pooled[3] = {0, 0, 0};
                for (int64_t dy = 0; dy < kLatentPool; ++dy)
                    for (int64_t dx = 0; dx < kLatentPool; ++dx)
                        for (int64_t ch = 0; ch < 3; ++ch)
                            pooled[ch] += rgb[size_t(((y * kLatentPool + dy) * img.w +
                                                      (x * kLatentPool + dx)) * 3 + ch)];
                for (double& v : pooled) v /= double(kLatentPool * kLatentPool);
                for (int64_t k = 0; k < channels_; ++k) {
                    double acc = 0.0;
                    for (int64_t ch = 0; ch < 3; ++ch)
                        acc += pooled[ch] * fwd_[size_t(ch * channels_ + k)];
                    out.at(0, y, x, k) = acc;
                }
            }
        return out;
    }

    LatentVideo encode_video(const std::vector<Image>& frames) const {
        if (frames.empty()) throw runtime_error("latent codec: no frames");
        LatentVideo first = encode_frame(frames[0]);
        LatentVideo out = LatentVideo::zeros(int64_t(frames.size()), first.h, first.w, channels_);
        std::copy(first.data.begin(), first.data.end(), out.data.begin());
        for (size_t i = 1; i < frames.size(); ++i) {
            LatentVideo f = encode_frame(frames[i]);
            if (f.h != out.h || f.w != out.w)
                throw runtime_error("latent codec: frame " + std::to_string(i) +
                                    " extent mismatch");
            std::copy(f.data.begin(), f.data.end(),
                      out.data.begin() + int64_t(i) * f.h * f.w * channels_);
        }
        return out;
    }

    // Pseudo-inverse decode of one latent frame, nearest-neighbor upsampled.
    Image decode_frame(const LatentVideo& latent, int64_t t_index) const {
        if (t_index < 0 || t_index >= latent.t)
            throw runtime_error("latent codec: frame index out of range");
        Image img = Image::filled(latent.w * kLatentPool, latent.h * kLatentPool, 3, 0);
        for (int64_t y = 0; y < latent.h; ++y)
            for (int64_t x = 0; x < latent.w; ++x) {
                double rgb[3] = {0, 0, 0};
                for (int64_t j = 0; j < 3; ++j) {
                    double acc = 0.0;
                    for (int64_t k = 0; k < channels_; ++k)
                        acc += latent.at(t_index, y, x, k) * inv_[size_t(k * 3 + j)];
                    rgb[j] = std::clamp(acc, 0.0, 1.0);
                }
                for (int64_t dy = 0; dy < kLatentPool; ++dy)
                    for (int64_t dx = 0; dx < kLatentPool; ++dx)
                        for (int64_t ch = 0; ch < 3; ++ch)
                            img.at(y * kLatentPool + dy, x * kLatentPool + dx, ch) =
                                uint8_t(std::lround(rgb[ch] * 255.0));
            }
        return img;
    }

    std::vector<Image> decode_video(const LatentVideo& latent) const {
        std::vector<Image> frames;
        for (int64_t t = 0; t < latent.t; ++t) frames.push_back(decode_frame(latent, t));
        return frames;
    }

private:
    int64_t channels_;
    std::vector<double> fwd_;  // (3, channels)
    std::vector<double> inv_;  // (channels, 3)
};

// Stable token -> vector lookup; a leading sequence-start token guarantees
// at least one row for empty captions.
inline Tensor embed_text(const std::string& caption, int64_t text_dim) {
    std::vector<std::string> tokens{"<s>"};
    std::string cur;
    for (char ch : caption) {
        if (std::isalnum(static_cast<unsigned char>(ch)))
            cur.push_back(char(std::tolower(static_cast<unsigned char>(ch))));
        else if (!cur.empty()) {
            tokens.push_back(cur);
            cur.clear();
        }
    }
    if (!cur.empty()) tokens.push_back(cur);

    std::vector<double> data(tokens.size() * size_t(text_dim));
    for (size_t i = 0; i < tokens.size(); ++i) {
        Rng rng(fnv1a_str(tokens[i], kTextEmbedSeed));
        for (int64_t j = 0; j < text_dim; ++j)
            data[i * size_t(text_dim) + size_t(j)] =
                rng.normal(0.0, 1.0 / std::sqrt(double(text_dim)));
    }
    return Tensor::from_data(std::move(data), int64_t(tokens.size()), text_dim);
}

// Center crop, 8x8 grayscale downsample, fixed random projection, L2
// normalize. seed_tag selects independent projections (the evaluation
// harness registers three).
inline std::vector<double> stub_face_embedding(const Image& img, int64_t face_dim,
                                               uint64_t seed_tag = 0) {
    const int64_t side = std::min(img.w, img.h);
    const int64_t x0 = (img.w - side) / 2, y0 = (img.h - side) / 2;
    constexpr int64_t kGridSide = 8;
    double gray[kGridSide * kGridSide] = {};
    double counts[kGridSide * kGridSide] = {};
    for (int64_t y = 0; y < side; ++y)
        for (int64_t x = 0; x < side; ++x) {
            double g = 0.0;
            for (int64_t ch = 0; ch < img.c; ++ch) g += double(img.at(y0 + y, x0 + x, ch));
            g /= double(img.c) * 255.0;
            const int64_t cell = (y * kGridSide / side) * kGridSide + (x * kGridSide / side);
            gray[cell] += g;
            counts[cell] += 1.0;
        }
    for (int64_t i = 0; i < kGridSide * kGridSide; ++i)
        if (counts[i] > 0.0) gray[i] /= counts[i];

    Rng rng(fnv1a(&seed_tag, sizeof(seed_tag), kFaceProjSeed));
    std::vector<double> out(size_t(face_dim), 0.0);
    for (int64_t i = 0; i < kGridSide * kGridSide; ++i)
        for (int64_t j = 0; j < face_dim; ++j) out[size_t(j)] += gray[i] * rng.normal();
    double norm = 0.0;
    for (double v : out) norm += v * v;
    norm = std::sqrt(norm);
    if (norm < 1e-12) {
        // uniform black crop projects to zero; fall back to a fixed direction
        std::fill(out.begin(), out.end(), 0.0);
        out[0] = 1.0;
        return out;
    }
    for (double& v : out) v /= norm;
    return out;
}

// Trivial detector: a face is "present" unless the center crop is one flat
// color. Gives tests a deterministic handle on the no-face path.
inline bool stub_face_present(const Image& img) {
    const int64_t side = std::min(img.w, img.h);
    const int64_t x0 = (img.w - side) / 2, y0 = (img.h - side) / 2;
    for (int64_t y = 0; y < side; ++y)
        for (int64_t x = 0; x < side; ++x)
            for (int64_t ch = 0; ch < img.c; ++ch)
                if (img.at(y0 + y, x0 + x, ch) != img.at(y0, x0, ch)) return true;
    return false;
}

}  // namespace lynx
