#pragma once

// Evaluation harness: subject x prompt benchmark enumeration, face
// resemblance over sampled frames with a registry of embedders, an HTTP
// judge client scoring four perceptual dimensions against a
// provider-agnostic JSON schema, and report aggregation.

#include <algorithm>
#include <chrono>
#include <cmath>
#include <filesystem>
#include <functional>
#include <map>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include <httplib.h>
#include <json.hpp>

#include "lynx/common.hpp"
#include "lynx/data_pipeline.hpp"
#include "lynx/encoders.hpp"
#include "lynx/media.hpp"

namespace lynx::eval {

using json = nlohmann::json;
using data::ImageEmbedder;

struct BenchmarkCase {
    std::string case_id;
    std::string subject;  // path to the reference image
    std::string prompt;
};

struct Benchmark {
    std::vector<std::string> subjects;
    std::vector<std::string> prompts;
    std::vector<BenchmarkCase> cases;  // subject-major order
};

inline std::string case_id_for(const std::string& subject_name, const std::string& prompt) {
    uint64_t h = fnv1a_str(subject_name);
    h = fnv1a_str("\x1f", h);
    h = fnv1a_str(prompt, h);
    return hex64(h);
}

// Subjects are the sorted *.png files of subject_dir; prompts the non-empty
// lines of prompt_file. Case ids are stable hashes of (subject, prompt).
inline Benchmark build_benchmark(const std::string& subject_dir,
                                 const std::string& prompt_file) {
    namespace fs = std::filesystem;
    Benchmark b;
    if (!fs::is_directory(subject_dir))
        throw config_error("benchmark: subject directory not found: " + subject_dir);
    for (const auto& e : fs::directory_iterator(subject_dir))
        if (e.is_regular_file() && e.path().extension() == ".png")
            b.subjects.push_back(e.path().string());
    std::sort(b.subjects.begin(), b.subjects.end());
    if (b.subjects.empty()) throw config_error("benchmark: empty subject set");

    std::ifstream in(prompt_file);
    if (!in) throw config_error("benchmark: cannot open prompt file: " + prompt_file);
    std::string line;
    while (std::getline(in, line)) {
        while (!line.empty() && (line.back() == '\r' || line.back() == ' ')) line.pop_back();
        if (!line.empty()) b.prompts.push_back(line);
    }
    if (b.prompts.empty()) throw config_error("benchmark: empty prompt list");

    for (const auto& s : b.subjects) {
        const std::string name = fs::path(s).filename().string();
        for (const auto& p : b.prompts) b.cases.push_back({case_id_for(name, p), s, p});
    }
    return b;
}

// Registry of face embedders; the desk-scale default holds three distinct
// deterministic projections standing in for independent feature extractors.
class EmbedderRegistry {
public:
    void add(const std::string& id, ImageEmbedder fn) { embedders_[id] = std::move(fn); }

    const ImageEmbedder& get(const std::string& id) const {
        auto it = embedders_.find(id);
        if (it == embedders_.end()) throw config_error("unknown embedder id: " + id);
        return it->second;
    }

    std::vector<std::string> ids() const {
        std::vector<std::string> out;
        for (const auto& [id, _] : embedders_) out.push_back(id);
        return out;
    }

    static EmbedderRegistry default_stubs(int64_t face_dim) {
        EmbedderRegistry reg;
        reg.add("stub-a", [face_dim](const Image& img) {
            return stub_face_embedding(img, face_dim, 1);
        });
        reg.add("stub-b", [face_dim](const Image& img) {
            return stub_face_embedding(img, face_dim, 2);
        });
        reg.add("stub-c", [face_dim](const Image& img) {
            return stub_face_embedding(img, face_dim, 3);
        });
        return reg;
    }

private:
    std::map<std::string, ImageEmbedder> embedders_;  // ordered, stable iteration
};

// Mean cosine between sampled frames and the reference. Frames without a
// detected face are excluded and counted; all-excluded is an error.
inline double face_resemblance(const std::vector<Image>& frames, const Image& reference,
                               const ImageEmbedder& embedder, int64_t frame_stride = 4,
                               int64_t* excluded_count = nullptr) {
    if (frames.empty()) throw runtime_error("face_resemblance: no frames");
    if (frame_stride < 1) throw config_error("face_resemblance: stride must be >= 1");
    const std::vector<double> ref_embed = embedder(reference);
    double acc = 0.0;
    int64_t used = 0, excluded = 0;
    for (size_t i = 0; i < frames.size(); i += size_t(frame_stride)) {
        if (!stub_face_present(frames[i])) {
            ++excluded;
            continue;
        }
        acc += data::cosine(embedder(frames[i]), ref_embed);
        ++used;
    }
    if (excluded_count) *excluded_count = excluded;
    if (used == 0)
        throw runtime_error("face_resemblance: no usable frames (" + std::to_string(excluded) +
                            " without a detected face)");
    return acc / double(used);
}

struct JudgeScores {
    double prompt_alignment = 0.0;
    double aesthetic = 0.0;
    double motion_naturalness = 0.0;
    double video_quality = 0.0;
};

inline const char* const kJudgeDimensions[4] = {"prompt_alignment", "aesthetic",
                                                "motion_naturalness", "video_quality"};

// Per-dimension instruction templates; "{prompt}" is substituted. These are
// config surface, not a fixed protocol.
struct RubricTemplates {
    std::string prompt_alignment =
        "Score 0..1 how well the video matches the description: {prompt}";
    std::string aesthetic = "Score 0..1 the visual appeal and composition of the video.";
    std::string motion_naturalness =
        "Score 0..1 the smoothness and realism of the motion in the video.";
    std::string video_quality = "Score 0..1 the overall perceptual quality of the video.";

    std::string render(const std::string& tmpl, const std::string& prompt) const {
        std::string out = tmpl;
        const std::string key = "{prompt}";
        if (auto pos = out.find(key); pos != std::string::npos)
            out.replace(pos, key.size(), prompt);
        return out;
    }

    json to_json(const std::string& prompt) const {
        return json{{"prompt_alignment", render(prompt_alignment, prompt)},
                    {"aesthetic", render(aesthetic, prompt)},
                    {"motion_naturalness", render(motion_naturalness, prompt)},
                    {"video_quality", render(video_quality, prompt)}};
    }
};

struct JudgeClientConfig {
    std::string url;    // e.g. http://127.0.0.1:8080/judge
    std::string token;  // bearer auth, may be empty
    int max_retries = 3;
    int backoff_base_ms = 50;
    int timeout_s = 30;

    void validate() const {
        if (url.empty()) throw config_error("judge: endpoint url not configured");
    }
};

struct JudgeResult {
    JudgeScores scores;
    int attempts = 1;  // 1 + retries actually taken
};

namespace detail {

inline std::pair<std::string, std::string> split_url(const std::string& url) {
    const auto scheme_end = url.find("://");
    if (scheme_end == std::string::npos)
        throw config_error("judge: url must start with http:// or https://, got " + url);
    const auto path_start = url.find('/', scheme_end + 3);
    if (path_start == std::string::npos) return {url, "/"};
    return {url.substr(0, path_start), url.substr(path_start)};
}

inline JudgeScores parse_judge_response(const std::string& body) {
    json j;
    try {
        j = json::parse(body);
    } catch (const json::exception& e) {
        throw runtime_error(std::string("judge: unparseable response: ") + e.what());
    }
    JudgeScores s;
    double* fields[4] = {&s.prompt_alignment, &s.aesthetic, &s.motion_naturalness,
                         &s.video_quality};
    for (int i = 0; i < 4; ++i) {
        const char* name = kJudgeDimensions[i];
        if (!j.contains(name) || !j[name].is_number())
            throw runtime_error(std::string("judge: response missing score field \"") + name +
                                "\"");
        const double v = j[name].get<double>();
        if (v < 0.0 || v > 1.0)
            throw runtime_error(std::string("judge: score field \"") + name + "\" = " +
                                std::to_string(v) + " outside [0, 1]");
        *fields[i] = v;
    }
    return s;
}

}  // namespace detail

// One scoring request. Transport failures (connection errors, 5xx) retry
// with exponential backoff up to max_retries; a response that reaches us but
// fails to parse or validate is a judge error and is never retried.
inline JudgeResult judge_case(const std::string& video_ref, const std::string& prompt,
                              const JudgeClientConfig& cfg,
                              const RubricTemplates& rubric = RubricTemplates{}) {
    cfg.validate();
    const auto [base, path] = detail::split_url(cfg.url);
    const json request{{"video", video_ref}, {"prompt", prompt},
                       {"rubric", rubric.to_json(prompt)}};
    const std::string body = request.dump();

    std::string last_error;
    for (int attempt = 0; attempt <= cfg.max_retries; ++attempt) {
        if (attempt > 0)
            std::this_thread::sleep_for(
                std::chrono::milliseconds(cfg.backoff_base_ms * (1 << (attempt - 1))));
        httplib::Client client(base);
        client.set_connection_timeout(cfg.timeout_s);
        client.set_read_timeout(cfg.timeout_s);
        httplib::Headers headers;
        if (!cfg.token.empty()) headers.insert({"Authorization", "Bearer " + cfg.token});
        auto res = client.Post(path, headers, body, "application/json");
        if (!res) {
            last_error = "transport error: " + httplib::to_string(res.error());
            continue;
        }
        if (res->status >= 500) {
            last_error = "server error: status " + std::to_string(res->status);
            continue;
        }
        if (res->status != 200)
            throw runtime_error("judge: request rejected with status " +
                                std::to_string(res->status));
        return {detail::parse_judge_response(res->body), attempt + 1};
    }
    throw runtime_error("judge: retries exhausted after " +
                        std::to_string(cfg.max_retries + 1) + " attempts; last: " + last_error);
}

struct CaseScores {
    std::string case_id;
    std::map<std::string, double> resemblance;  // embedder id -> score
    std::optional<JudgeScores> judge;
    std::optional<std::string> judge_error;
};

struct Summary {
    int64_t case_count = 0;
    std::map<std::string, double> resemblance_mean;  // per embedder
    std::map<std::string, double> judge_mean;        // per dimension
    int64_t judged_count = 0;
    int64_t judge_errors = 0;
    bool mismatched_cases = false;
};

// Per-embedder and per-dimension means; permutation invariant over case
// order. Cases missing from either side set the mismatch flag but still
// aggregate partially.
inline Summary aggregate(const std::vector<CaseScores>& cases) {
    Summary s;
    s.case_count = int64_t(cases.size());
    std::map<std::string, std::pair<double, int64_t>> racc;
    double jacc[4] = {0, 0, 0, 0};
    for (const auto& c : cases) {
        for (const auto& [id, score] : c.resemblance) {
            racc[id].first += score;
            racc[id].second += 1;
        }
        if (c.judge) {
            jacc[0] += c.judge->prompt_alignment;
            jacc[1] += c.judge->aesthetic;
            jacc[2] += c.judge->motion_naturalness;
            jacc[3] += c.judge->video_quality;
            ++s.judged_count;
        }
        if (c.judge_error) ++s.judge_errors;
    }
    for (const auto& [id, acc] : racc) {
        s.resemblance_mean[id] = acc.first / double(acc.second);
        if (acc.second != s.case_count) s.mismatched_cases = true;
    }
    if (s.judged_count > 0)
        for (int i = 0; i < 4; ++i)
            s.judge_mean[kJudgeDimensions[i]] = jacc[i] / double(s.judged_count);
    if (s.judged_count != 0 && s.judged_count != s.case_count) s.mismatched_cases = true;
    return s;
}

inline json summary_to_json(const Summary& s) {
    json j;
    j["case_count"] = s.case_count;
    j["resemblance"] = s.resemblance_mean;
    j["judge"] = s.judge_mean;
    j["judged_count"] = s.judged_count;
    j["judge_errors"] = s.judge_errors;
    j["mismatched_cases"] = s.mismatched_cases;
    return j;
}

inline std::string summary_to_table(const Summary& s) {
    std::string out;
    auto row = [&out](const std::string& name, double value) {
        char buf[96];
        std::snprintf(buf, sizeof(buf), "%-24s %8.4f\n", name.c_str(), value);
        out += buf;
    };
    out += "metric                      mean\n";
    out += "--------------------------------\n";
    for (const auto& [id, v] : s.resemblance_mean) row("resemblance/" + id, v);
    for (const auto& [dim, v] : s.judge_mean) row("judge/" + dim, v);
    char buf[96];
    std::snprintf(buf, sizeof(buf), "cases %lld, judged %lld, judge errors %lld%s\n",
                  (long long)s.case_count, (long long)s.judged_count,
                  (long long)s.judge_errors, s.mismatched_cases ? " [partial]" : "");
    out += buf;
    return out;
}

// Radar-style plot data for external tooling.
inline json summary_to_plot_json(const Summary& s) {
    json axes = json::array();
    json values = json::array();
    for (const auto& [id, v] : s.resemblance_mean) {
        axes.push_back("resemblance/" + id);
        values.push_back(v);
    }
    for (const auto& [dim, v] : s.judge_mean) {
        axes.push_back("judge/" + dim);
        values.push_back(v);
    }
    return json{{"axes", axes}, {"values", values}};
}

// Judge a list of cases with bounded parallelism; results keep case order.
inline std::vector<std::pair<std::optional<JudgeResult>, std::optional<std::string>>>
judge_cases(const std::vector<BenchmarkCase>& cases,
            const std::function<std::string(const BenchmarkCase&)>& video_ref_for,
            const JudgeClientConfig& cfg, const RubricTemplates& rubric = RubricTemplates{},
            int parallelism = 4) {
    std::vector<std::pair<std::optional<JudgeResult>, std::optional<std::string>>> results(
        cases.size());
    size_t next = 0;
    while (next < cases.size()) {
        const size_t batch = std::min(size_t(std::max(1, parallelism)), cases.size() - next);
        std::vector<std::thread> workers;
        for (size_t k = 0; k < batch; ++k) {
            const size_t i = next + k;
            workers.emplace_back([&, i]() {
                try {
                    results[i].first = judge_case(video_ref_for(cases[i]), cases[i].prompt,
                                                  cfg, rubric);
                } catch (const std::exception& e) {
                    results[i].second = e.what();
                }
            });
        }
        for (auto& w : workers) w.join();
        next += batch;
    }
    return results;
}

}  // namespace lynx::eval
