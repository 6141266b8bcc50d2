#pragma once

// Pair-construction pipeline: JSON-lines manifest ingestion, identity
// resemblance filtering against pluggable embedders, weighted sampling over
// pair types, and deterministic augmentation stubs. Input manifests are
// never mutated; derived media land under a separate output root.

#include <cmath>
#include <cstdint>
#include <filesystem>
#include <fstream>
#include <functional>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lynx/common.hpp"
#include "lynx/media.hpp"

namespace lynx::data {

using json = nlohmann::json;

enum class PairType { single_scene, multi_scene, augmented_single_scene };

inline const char* pair_type_name(PairType t) {
    switch (t) {
        case PairType::single_scene: return "single_scene";
        case PairType::multi_scene: return "multi_scene";
        case PairType::augmented_single_scene: return "augmented_single_scene";
    }
    return "?";
}

inline PairType parse_pair_type(const std::string& s) {
    if (s == "single_scene") return PairType::single_scene;
    if (s == "multi_scene") return PairType::multi_scene;
    if (s == "augmented_single_scene") return PairType::augmented_single_scene;
    throw config_error("pair_type \"" + s +
                       "\" is not one of single_scene, multi_scene, augmented_single_scene");
}

struct PairRecord {
    PairType pair_type = PairType::single_scene;
    std::string condition_image;  // resolved path
    std::string target;           // resolved path (image or frame directory)
    std::string caption;
    std::optional<std::string> id_embedding;  // sidecar path
    std::optional<double> resemblance;
    json extra;  // the full original line, unknown fields preserved

    json to_json() const {
        json j = extra.is_object() ? extra : json::object();
        j["pair_type"] = pair_type_name(pair_type);
        j["condition_image"] = condition_image;
        j["target"] = target;
        j["caption"] = caption;
        if (id_embedding) j["id_embedding"] = *id_embedding;
        if (resemblance) j["resemblance"] = *resemblance;
        return j;
    }
};

// One record per line; required keys pair_type, condition_image, target,
// caption. Relative paths resolve against the manifest directory, and the
// referenced files must exist at ingestion.
inline std::vector<PairRecord> load_manifest(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw config_error("manifest: cannot open " + path);
    const std::filesystem::path root = std::filesystem::path(path).parent_path();

    auto resolve = [&root](const std::string& p) {
        std::filesystem::path fp(p);
        return (fp.is_absolute() ? fp : root / fp).lexically_normal().string();
    };

    std::vector<PairRecord> records;
    std::string line;
    int64_t line_no = 0;
    while (std::getline(in, line)) {
        ++line_no;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        json j;
        try {
            j = json::parse(line);
        } catch (const json::exception& e) {
            throw config_error("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        auto require_string = [&](const char* key) {
            if (!j.contains(key) || !j[key].is_string())
                throw config_error("manifest line " + std::to_string(line_no) +
                                   ": missing required field \"" + key + "\"");
            return j[key].get<std::string>();
        };
        PairRecord rec;
        try {
            rec.pair_type = parse_pair_type(require_string("pair_type"));
        } catch (const Error& e) {
            throw config_error("manifest line " + std::to_string(line_no) + ": " + e.what());
        }
        rec.condition_image = resolve(require_string("condition_image"));
        rec.target = resolve(require_string("target"));
        rec.caption = require_string("caption");
        if (j.contains("id_embedding")) rec.id_embedding = resolve(j["id_embedding"]);
        if (j.contains("resemblance")) rec.resemblance = j["resemblance"].get<double>();
        rec.extra = j;
        for (const char* key : {"condition_image", "target"}) {
            const std::string& p = key[0] == 'c' ? rec.condition_image : rec.target;
            if (!std::filesystem::exists(p))
                throw config_error("manifest line " + std::to_string(line_no) + ": " +
                                   key + " does not exist: " + p);
        }
        if (rec.id_embedding && !std::filesystem::exists(*rec.id_embedding))
            throw config_error("manifest line " + std::to_string(line_no) +
                               ": id_embedding does not exist: " + *rec.id_embedding);
        records.push_back(std::move(rec));
    }
    return records;
}

inline void save_manifest(const std::string& path, const std::vector<PairRecord>& records) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw runtime_error("manifest: cannot write " + path);
    for (const auto& r : records) out << r.to_json().dump() << "\n";
}

// Embedding sidecar: u64 little-endian length prefix, then float32 values.
inline std::vector<double> read_embedding_sidecar(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw runtime_error("sidecar: cannot open " + path);
    uint64_t n = 0;
    in.read(reinterpret_cast<char*>(&n), 8);
    std::vector<float> raw(n);
    in.read(reinterpret_cast<char*>(raw.data()), std::streamsize(n * sizeof(float)));
    if (!in) throw runtime_error("sidecar: truncated file " + path);
    return std::vector<double>(raw.begin(), raw.end());
}

inline void write_embedding_sidecar(const std::string& path, const std::vector<double>& v) {
    std::ofstream out(path, std::ios::binary | std::ios::trunc);
    if (!out) throw runtime_error("sidecar: cannot write " + path);
    const uint64_t n = v.size();
    out.write(reinterpret_cast<const char*>(&n), 8);
    for (double x : v) {
        const float f = float(x);
        out.write(reinterpret_cast<const char*>(&f), sizeof(f));
    }
}

using ImageEmbedder = std::function<std::vector<double>(const Image&)>;

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size())
        throw runtime_error("cosine: dimension mismatch " + std::to_string(a.size()) + " vs " +
                            std::to_string(b.size()));
    double dot = 0, na = 0, nb = 0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na == 0.0 || nb == 0.0) return 0.0;
    return dot / (std::sqrt(na) * std::sqrt(nb));
}

struct DroppedRecord {
    PairRecord record;
    std::string reason;
};

struct FilterResult {
    std::vector<PairRecord> kept;  // resemblance annotated
    std::vector<DroppedRecord> dropped;
};

// Keep records whose condition image and target first frame embed within
// `threshold` cosine of each other. Unreadable media drop with a reason.
inline FilterResult identity_filter(const std::vector<PairRecord>& records,
                                    const ImageEmbedder& embedder, double threshold) {
    FilterResult out;
    for (const auto& rec : records) {
        try {
            const Image cond = load_png(rec.condition_image);
            const Image target_first = load_png(list_frame_paths(rec.target).front());
            const double c = cosine(embedder(cond), embedder(target_first));
            if (c >= threshold) {
                PairRecord kept = rec;
                kept.resemblance = c;
                out.kept.push_back(std::move(kept));
            } else {
                out.dropped.push_back({rec, "resemblance " + std::to_string(c) +
                                                " below threshold " +
                                                std::to_string(threshold)});
            }
        } catch (const std::exception& e) {
            out.dropped.push_back({rec, std::string("unreadable media: ") + e.what()});
        }
    }
    return out;
}

struct SamplingWeights {
    double single_scene = 0.4;
    double multi_scene = 0.2;
    double augmented_single_scene = 0.4;

    double weight(PairType t) const {
        switch (t) {
            case PairType::single_scene: return single_scene;
            case PairType::multi_scene: return multi_scene;
            case PairType::augmented_single_scene: return augmented_single_scene;
        }
        return 0.0;
    }

    void validate() const {
        for (double w : {single_scene, multi_scene, augmented_single_scene})
            if (w < 0.0 || !std::isfinite(w))
                throw config_error("sampling weights must be finite and nonnegative");
        if (single_scene + multi_scene + augmented_single_scene <= 0.0)
            throw config_error("sampling weights must not all be zero");
    }
};

// Infinite record stream: draw n is a pure function of (seed, n), so any
// prefix replays identically and a resumed consumer sees the same order.
class WeightedSampler {
public:
    WeightedSampler(const std::vector<PairRecord>& records, SamplingWeights weights,
                    uint64_t seed)
        : records_(&records), weights_(weights), seed_(seed) {
        weights_.validate();
        for (size_t i = 0; i < records.size(); ++i)
            by_type_[size_t(records[i].pair_type)].push_back(int64_t(i));
        static constexpr PairType kTypes[3] = {PairType::single_scene, PairType::multi_scene,
                                               PairType::augmented_single_scene};
        double total = 0.0;
        for (PairType t : kTypes) {
            const double w = weights_.weight(t);
            if (w > 0.0 && by_type_[size_t(t)].empty())
                throw config_error(std::string("weighted sampler: positive weight on empty "
                                               "type ") + pair_type_name(t));
            if (w > 0.0) {
                total += w;
                cum_.push_back({t, total});
            }
        }
        for (auto& [t, c] : cum_) c /= total;
    }

    const PairRecord& draw(uint64_t n) const { return (*records_)[size_t(draw_index(n))]; }

    int64_t draw_index(uint64_t n) const {
        Rng rng = Rng::derive(seed_, "sampler", n);
        const double u = rng.uniform();
        PairType t = cum_.back().first;
        for (const auto& [type, c] : cum_)
            if (u < c) {
                t = type;
                break;
            }
        const auto& pool = by_type_[size_t(t)];
        return pool[rng.below(pool.size())];
    }

    const PairRecord& next() { return draw(cursor_++); }

private:
    const std::vector<PairRecord>* records_;
    SamplingWeights weights_;
    uint64_t seed_;
    uint64_t cursor_ = 0;
    std::vector<int64_t> by_type_[3];
    std::vector<std::pair<PairType, double>> cum_;
};

// Pluggable condition-image transform. The built-in stubs stand in for the
// external expression/relighting/background tools, which stay out of scope.
struct Augmenter {
    enum class Kind { expression, relight, background };
    Kind kind = Kind::relight;
    std::function<Image(const Image&, Rng&)> transform;
};

inline Augmenter make_relight_augmenter(double gamma) {
    Augmenter a;
    a.kind = Augmenter::Kind::relight;
    a.transform = [gamma](const Image& img, Rng&) {
        Image out = img;
        for (auto& p : out.px)
            p = uint8_t(std::lround(255.0 * std::pow(double(p) / 255.0, gamma)));
        return out;
    };
    return a;
}

inline Augmenter make_expression_augmenter(double amplitude_px) {
    Augmenter a;
    a.kind = Augmenter::Kind::expression;
    a.transform = [amplitude_px](const Image& img, Rng& rng) {
        const double phase = rng.uniform(0.0, 2.0 * M_PI);
        Image out = img;
        for (int64_t y = 0; y < img.h; ++y)
            for (int64_t x = 0; x < img.w; ++x) {
                const double sx = std::clamp(
                    double(x) + amplitude_px *
                                    std::sin(2.0 * M_PI * double(y) / double(img.h) + phase),
                    0.0, double(img.w - 1));
                const double sy = std::clamp(
                    double(y) + amplitude_px *
                                    std::sin(2.0 * M_PI * double(x) / double(img.w) + phase),
                    0.0, double(img.h - 1));
                const int64_t x0 = int64_t(sx), y0 = int64_t(sy);
                const int64_t x1 = std::min(x0 + 1, img.w - 1);
                const int64_t y1 = std::min(y0 + 1, img.h - 1);
                const double fx = sx - double(x0), fy = sy - double(y0);
                for (int64_t ch = 0; ch < img.c; ++ch) {
                    const double v = (1 - fx) * (1 - fy) * img.at(y0, x0, ch) +
                                     fx * (1 - fy) * img.at(y0, x1, ch) +
                                     (1 - fx) * fy * img.at(y1, x0, ch) +
                                     fx * fy * img.at(y1, x1, ch);
                    out.at(y, x, ch) = uint8_t(std::lround(v));
                }
            }
        return out;
    };
    return a;
}

inline Augmenter make_background_augmenter() {
    Augmenter a;
    a.kind = Augmenter::Kind::background;
    a.transform = [](const Image& img, Rng& rng) {
        uint8_t fill[4];
        for (auto& f : fill) f = uint8_t(rng.below(256));
        Image out = img;
        const double cx = double(img.w) / 2.0, cy = double(img.h) / 2.0;
        const double rx = double(img.w) * 0.4, ry = double(img.h) * 0.4;
        for (int64_t y = 0; y < img.h; ++y)
            for (int64_t x = 0; x < img.w; ++x) {
                const double dx = (double(x) - cx) / rx, dy = (double(y) - cy) / ry;
                if (dx * dx + dy * dy > 1.0)
                    for (int64_t ch = 0; ch < img.c; ++ch)
                        out.at(y, x, ch) = fill[ch % 4];
            }
        return out;
    };
    return a;
}

// Transform the condition image of a single-scene record, writing the result
// under output_root and returning a fresh augmented_single_scene record. The
// input record is untouched.
inline PairRecord apply_augmenter(const PairRecord& record, const Augmenter& aug, Rng& rng,
                                  const std::string& output_root) {
    if (record.pair_type != PairType::single_scene)
        throw config_error(std::string("augment: pair_type ") +
                           pair_type_name(record.pair_type) +
                           " is not eligible (only single_scene records are augmented)");
    const Image cond = load_png(record.condition_image);
    const Image transformed = aug.transform(cond, rng);
    if (transformed.w != cond.w || transformed.h != cond.h)
        throw runtime_error("augment: transform changed spatial dims");

    std::filesystem::create_directories(output_root);
    const std::string stem = std::filesystem::path(record.condition_image).stem().string();
    const std::string out_path = (std::filesystem::path(output_root) /
                                  (stem + "_aug.png")).string();
    save_png(out_path, transformed);

    PairRecord out = record;
    out.pair_type = PairType::augmented_single_scene;
    out.condition_image = out_path;
    out.resemblance.reset();
    return out;
}

}  // namespace lynx::data
