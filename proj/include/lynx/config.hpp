#pragma once

// RunConfig: the merged model/train/sampler/data/eval view loaded from a
// JSON config file with `--set key=value` overrides. Everything validates
// before any work starts; the effective config is echoed into the run
// directory by each subcommand.

#include <filesystem>
#include <fstream>
#include <optional>
#include <string>
#include <vector>

#include <json.hpp>

#include "lynx/backbone.hpp"
#include "lynx/common.hpp"
#include "lynx/data_pipeline.hpp"
#include "lynx/flow_match.hpp"

namespace lynx {

using json = nlohmann::json;

struct DataConfig {
    std::string manifest;
    std::string output_root;
    data::SamplingWeights weights;
    double resemblance_threshold = 0.5;
    std::string augment_kind = "relight";  // relight | expression | background
    double augment_gamma = 1.3;
    double augment_amplitude = 2.0;
};

struct EvalConfig {
    std::string subjects;
    std::string prompts;
    std::string results;
    int64_t frame_stride = 4;
    int parallelism = 4;
};

struct RunConfig {
    std::string run_dir = "runs/default";
    uint64_t seed = 0;
    ModelConfig model;
    TrainConfig train;
    SamplerConfig sampler;
    int64_t sample_frames = 4;
    DataConfig data;
    EvalConfig eval;

    void validate() const {
        if (run_dir.empty()) throw config_error("run_dir must not be empty");
        model.validate();
        train.validate();
        sampler.validate();
        if (sample_frames < 1) throw config_error("sample_frames must be >= 1");
        data.weights.validate();
        if (data.resemblance_threshold < -1.0 || data.resemblance_threshold > 1.0)
            throw config_error("data.resemblance_threshold must be in [-1, 1]");
        if (data.augment_kind != "relight" && data.augment_kind != "expression" &&
            data.augment_kind != "background")
            throw config_error("data.augment_kind must be relight, expression, or background");
        if (eval.frame_stride < 1) throw config_error("eval.frame_stride must be >= 1");
        if (eval.parallelism < 1) throw config_error("eval.parallelism must be >= 1");
    }
};

namespace detail {

template <typename T>
T field_or(const json& j, const std::string& path, const char* key, T fallback) {
    if (!j.contains(key)) return fallback;
    try {
        return j.at(key).get<T>();
    } catch (const json::exception&) {
        throw config_error("config field " + (path.empty() ? std::string(key)
                                                           : path + "." + key) +
                           " has the wrong type");
    }
}

}  // namespace detail

inline RunConfig run_config_from_json(const json& j) {
    RunConfig cfg;
    using detail::field_or;
    cfg.run_dir = field_or<std::string>(j, "", "run_dir", cfg.run_dir);
    cfg.seed = field_or<uint64_t>(j, "", "seed", cfg.seed);
    cfg.sample_frames = field_or<int64_t>(j, "", "sample_frames", cfg.sample_frames);

    if (j.contains("model")) {
        const json& m = j.at("model");
        auto& mc = cfg.model;
        mc.hidden_dim = field_or<int64_t>(m, "model", "hidden_dim", mc.hidden_dim);
        mc.num_blocks = field_or<int64_t>(m, "model", "num_blocks", mc.num_blocks);
        mc.num_heads = field_or<int64_t>(m, "model", "num_heads", mc.num_heads);
        mc.text_dim = field_or<int64_t>(m, "model", "text_dim", mc.text_dim);
        mc.latent_channels = field_or<int64_t>(m, "model", "latent_channels", mc.latent_channels);
        mc.face_dim = field_or<int64_t>(m, "model", "face_dim", mc.face_dim);
        mc.n_id_tokens = field_or<int64_t>(m, "model", "n_id_tokens", mc.n_id_tokens);
        mc.n_register_tokens =
            field_or<int64_t>(m, "model", "n_register_tokens", mc.n_register_tokens);
        mc.resampler_depth = field_or<int64_t>(m, "model", "resampler_depth", mc.resampler_depth);
        mc.resampler_heads = field_or<int64_t>(m, "model", "resampler_heads", mc.resampler_heads);
        mc.rope_base = field_or<double>(m, "model", "rope_base", mc.rope_base);
        mc.out_proj_init_std =
            field_or<double>(m, "model", "out_proj_init_std", mc.out_proj_init_std);
        if (m.contains("patch")) {
            const json& p = m.at("patch");
            if (!p.is_array() || p.size() != 3)
                throw config_error("config field model.patch must be [pt, ph, pw]");
            mc.patch.pt = p[0].get<int64_t>();
            mc.patch.ph = p[1].get<int64_t>();
            mc.patch.pw = p[2].get<int64_t>();
        }
    }

    if (j.contains("train")) {
        const json& t = j.at("train");
        auto& tc = cfg.train;
        tc.image_iters = field_or<int64_t>(t, "train", "image_iters", tc.image_iters);
        tc.video_iters = field_or<int64_t>(t, "train", "video_iters", tc.video_iters);
        tc.lr = field_or<double>(t, "train", "lr", tc.lr);
        tc.pack_budget = field_or<int64_t>(t, "train", "pack_budget", tc.pack_budget);
        tc.samples_per_step =
            field_or<int64_t>(t, "train", "samples_per_step", tc.samples_per_step);
        tc.id_dropout = field_or<double>(t, "train", "id_dropout", tc.id_dropout);
    }
    cfg.train.seed = cfg.seed;

    if (j.contains("sampler")) {
        const json& s = j.at("sampler");
        cfg.sampler.num_steps = detail::field_or<int64_t>(s, "sampler", "num_steps",
                                                          cfg.sampler.num_steps);
        if (s.contains("guidance") && !s.at("guidance").is_null())
            cfg.sampler.guidance = s.at("guidance").get<double>();
    }

    if (j.contains("data")) {
        const json& d = j.at("data");
        auto& dc = cfg.data;
        dc.manifest = field_or<std::string>(d, "data", "manifest", dc.manifest);
        dc.output_root = field_or<std::string>(d, "data", "output_root", dc.output_root);
        dc.resemblance_threshold =
            field_or<double>(d, "data", "resemblance_threshold", dc.resemblance_threshold);
        dc.augment_kind = field_or<std::string>(d, "data", "augment_kind", dc.augment_kind);
        dc.augment_gamma = field_or<double>(d, "data", "augment_gamma", dc.augment_gamma);
        dc.augment_amplitude =
            field_or<double>(d, "data", "augment_amplitude", dc.augment_amplitude);
        if (d.contains("weights")) {
            const json& w = d.at("weights");
            dc.weights.single_scene =
                field_or<double>(w, "data.weights", "single_scene", dc.weights.single_scene);
            dc.weights.multi_scene =
                field_or<double>(w, "data.weights", "multi_scene", dc.weights.multi_scene);
            dc.weights.augmented_single_scene =
                field_or<double>(w, "data.weights", "augmented_single_scene",
                                 dc.weights.augmented_single_scene);
        }
    }

    if (j.contains("eval")) {
        const json& e = j.at("eval");
        auto& ec = cfg.eval;
        ec.subjects = field_or<std::string>(e, "eval", "subjects", ec.subjects);
        ec.prompts = field_or<std::string>(e, "eval", "prompts", ec.prompts);
        ec.results = field_or<std::string>(e, "eval", "results", ec.results);
        ec.frame_stride = field_or<int64_t>(e, "eval", "frame_stride", ec.frame_stride);
        ec.parallelism = field_or<int>(e, "eval", "parallelism", ec.parallelism);
    }

    cfg.validate();
    return cfg;
}

inline json run_config_to_json(const RunConfig& cfg) {
    json j;
    j["run_dir"] = cfg.run_dir;
    j["seed"] = cfg.seed;
    j["sample_frames"] = cfg.sample_frames;
    j["model"] = {{"hidden_dim", cfg.model.hidden_dim},
                  {"num_blocks", cfg.model.num_blocks},
                  {"num_heads", cfg.model.num_heads},
                  {"patch", {cfg.model.patch.pt, cfg.model.patch.ph, cfg.model.patch.pw}},
                  {"text_dim", cfg.model.text_dim},
                  {"latent_channels", cfg.model.latent_channels},
                  {"face_dim", cfg.model.face_dim},
                  {"n_id_tokens", cfg.model.n_id_tokens},
                  {"n_register_tokens", cfg.model.n_register_tokens},
                  {"resampler_depth", cfg.model.resampler_depth},
                  {"resampler_heads", cfg.model.resampler_heads},
                  {"rope_base", cfg.model.rope_base},
                  {"out_proj_init_std", cfg.model.out_proj_init_std}};
    j["train"] = {{"image_iters", cfg.train.image_iters},
                  {"video_iters", cfg.train.video_iters},
                  {"lr", cfg.train.lr},
                  {"pack_budget", cfg.train.pack_budget},
                  {"samples_per_step", cfg.train.samples_per_step},
                  {"id_dropout", cfg.train.id_dropout}};
    j["sampler"] = {{"num_steps", cfg.sampler.num_steps},
                    {"guidance", cfg.sampler.guidance ? json(*cfg.sampler.guidance)
                                                      : json(nullptr)}};
    j["data"] = {{"manifest", cfg.data.manifest},
                 {"output_root", cfg.data.output_root},
                 {"resemblance_threshold", cfg.data.resemblance_threshold},
                 {"augment_kind", cfg.data.augment_kind},
                 {"augment_gamma", cfg.data.augment_gamma},
                 {"augment_amplitude", cfg.data.augment_amplitude},
                 {"weights",
                  {{"single_scene", cfg.data.weights.single_scene},
                   {"multi_scene", cfg.data.weights.multi_scene},
                   {"augmented_single_scene", cfg.data.weights.augmented_single_scene}}}};
    j["eval"] = {{"subjects", cfg.eval.subjects},
                 {"prompts", cfg.eval.prompts},
                 {"results", cfg.eval.results},
                 {"frame_stride", cfg.eval.frame_stride},
                 {"parallelism", cfg.eval.parallelism}};
    return j;
}

// key=value with dotted paths; the value parses as JSON when possible and
// falls back to a string. Overrides win over the file.
inline void apply_override(json& j, const std::string& assignment) {
    const auto eq = assignment.find('=');
    if (eq == std::string::npos || eq == 0)
        throw config_error("override \"" + assignment + "\" is not of the form key=value");
    const std::string key = assignment.substr(0, eq);
    const std::string value = assignment.substr(eq + 1);

    json* node = &j;
    size_t start = 0;
    while (true) {
        const size_t dot = key.find('.', start);
        const std::string part = key.substr(start, dot == std::string::npos ? std::string::npos
                                                                            : dot - start);
        if (part.empty()) throw config_error("override key \"" + key + "\" has an empty part");
        if (dot == std::string::npos) {
            json parsed = json::parse(value, nullptr, false);
            (*node)[part] = parsed.is_discarded() ? json(value) : parsed;
            return;
        }
        node = &(*node)[part];
        start = dot + 1;
    }
}

inline RunConfig load_run_config(const std::string& path,
                                 const std::vector<std::string>& overrides = {}) {
    json j = json::object();
    if (!path.empty()) {
        std::ifstream in(path);
        if (!in) throw config_error("config file not found: " + path);
        try {
            j = json::parse(in);
        } catch (const json::exception& e) {
            throw config_error("config file " + path + ": " + e.what());
        }
    }
    for (const auto& o : overrides) apply_override(j, o);
    return run_config_from_json(j);
}

inline std::string write_config_echo(const RunConfig& cfg) {
    std::filesystem::create_directories(cfg.run_dir);
    const std::string path = (std::filesystem::path(cfg.run_dir) / "config.echo.json").string();
    std::ofstream out(path, std::ios::trunc);
    if (!out) throw runtime_error("cannot write config echo to " + path);
    out << run_config_to_json(cfg).dump(2) << "\n";
    return path;
}

}  // namespace lynx
