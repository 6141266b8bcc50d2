#pragma once

// Subcommand implementations behind the `lynx` binary: train / sample /
// data / eval / inspect-pack. Each one validates its config, echoes the
// effective config into the run directory, and maps errors onto exit codes
// (0 ok, 2 config/validation, 3 runtime).

#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lynx/checkpoint.hpp"
#include "lynx/config.hpp"
#include "lynx/data_pipeline.hpp"
#include "lynx/encoders.hpp"
#include "lynx/eval_harness.hpp"
#include "lynx/flow_match.hpp"
#include "lynx/model.hpp"

namespace lynx::cli {

namespace fs = std::filesystem;

constexpr int kExitOk = 0;
constexpr int kExitConfig = 2;
constexpr int kExitRuntime = 3;

template <typename Fn>
int run_guarded(Fn&& fn) {
    try {
        fn();
        return kExitOk;
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return e.kind() == ErrorKind::config ? kExitConfig : kExitRuntime;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kExitRuntime;
    }
}

inline FaceEmbedding face_for_record(const data::PairRecord& rec, int64_t face_dim) {
    if (rec.id_embedding) {
        std::vector<double> v = data::read_embedding_sidecar(*rec.id_embedding);
        if (int64_t(v.size()) != face_dim)
            throw config_error("id_embedding sidecar " + *rec.id_embedding + " has dim " +
                               std::to_string(v.size()) + ", model expects " +
                               std::to_string(face_dim));
        double norm = 0.0;
        for (double x : v) norm += x * x;
        norm = std::sqrt(norm);
        if (norm <= 0.0)
            throw runtime_error("id_embedding sidecar " + *rec.id_embedding + " is all zero");
        for (double& x : v) x /= norm;  // float32 sidecars renormalize on load
        return FaceEmbedding::from(std::move(v));
    }
    return FaceEmbedding::from(stub_face_embedding(load_png(rec.condition_image), face_dim));
}

inline std::vector<TrainItem> prepare_items(const std::vector<data::PairRecord>& records,
                                            const RunConfig& cfg) {
    const ToyLatentCodec codec(cfg.model.latent_channels);
    std::vector<TrainItem> items;
    for (const auto& rec : records) {
        TrainItem item{codec.encode_video(load_frames(rec.target)),
                       face_for_record(rec, cfg.model.face_dim),
                       codec.encode_frame(load_png(rec.condition_image)), rec.caption};
        items.push_back(std::move(item));
    }
    return items;
}

inline void save_train_checkpoint(const std::string& path, const RunConfig& cfg,
                                  const LynxModel& model, const Adam& opt,
                                  int64_t next_step) {
    json echo = run_config_to_json(cfg);
    echo["global_step"] = next_step;
    {
        CheckpointWriter w;
        w.add_registry(model.all_params());
        w.write(path, echo.dump());
    }
    {
        CheckpointWriter w;
        ParamRegistry adapters = model.adapter_params();
        const auto& items = adapters.items();
        for (size_t i = 0; i < items.size(); ++i) {
            const auto& [name, t] = items[i];
            w.add("opt.m." + name, {t.rows(), t.cols()}, opt.slots()[i].m);
            w.add("opt.v." + name, {t.rows(), t.cols()}, opt.slots()[i].v);
        }
        w.add("opt.step", {1, 1}, {double(opt.step_count())});
        w.write(path + ".opt", echo.dump());
    }
}

inline int64_t restore_train_checkpoint(const std::string& path, LynxModel& model, Adam& opt) {
    Checkpoint ckpt = load_checkpoint(path);
    ParamRegistry all = model.all_params();
    load_into_registry(ckpt, all);
    const int64_t step = json::parse(ckpt.config_json).value("global_step", int64_t(0));

    const std::string opt_path = path + ".opt";
    if (fs::exists(opt_path)) {
        Checkpoint oc = load_checkpoint(opt_path);
        ParamRegistry adapters = model.adapter_params();
        const auto& items = adapters.items();
        for (size_t i = 0; i < items.size(); ++i) {
            const auto& name = items[i].first;
            const CkptTensor* m = oc.find("opt.m." + name);
            const CkptTensor* v = oc.find("opt.v." + name);
            if (!m || !v) throw runtime_error("optimizer state missing for " + name);
            opt.slots_mut()[i].m = m->data;
            opt.slots_mut()[i].v = v->data;
        }
        if (const CkptTensor* s = oc.find("opt.step"))
            opt.set_step_count(int64_t(s->data[0]));
    }
    return step;
}

// train: run both stages, streaming metrics to metrics.jsonl and dropping a
// checkpoint at each stage boundary.
inline int cmd_train(const RunConfig& cfg, const std::optional<std::string>& resume = {}) {
    return run_guarded([&]() {
        if (cfg.data.manifest.empty())
            throw config_error("data.manifest is required for train");
        write_config_echo(cfg);

        auto records = data::load_manifest(cfg.data.manifest);
        if (records.empty()) throw config_error("data.manifest has no records");
        data::WeightedSampler sampler(records, cfg.data.weights, cfg.seed);

        LynxModel model(cfg.model, cfg.seed);
        Trainer trainer(model, cfg.train, prepare_items(records, cfg),
                        [&sampler](uint64_t n) { return sampler.draw_index(n); });

        int64_t start_step = 0;
        if (resume) {
            start_step = restore_train_checkpoint(*resume, model, trainer.optimizer());
            stage_at(cfg.train, start_step);  // rejects resuming past the end
            std::cout << "resumed from " << *resume << " at step " << start_step << "\n";
        }

        const std::string metrics_path =
            (fs::path(cfg.run_dir) / "metrics.jsonl").string();
        std::ofstream metrics(metrics_path, std::ios::app);
        if (!metrics) throw runtime_error("cannot open metrics stream " + metrics_path);

        const int64_t total = cfg.train.total_iters();
        for (int64_t step = start_step; step < total; ++step) {
            StepMetrics m = trainer.step(step);
            metrics << json{{"step", m.step},
                            {"stage", stage_name(m.stage)},
                            {"loss", m.loss},
                            {"grad_norm", m.grad_norm},
                            {"wall_ms", m.wall_ms}}
                           .dump()
                    << "\n";
            if (step + 1 == cfg.train.image_iters)
                save_train_checkpoint((fs::path(cfg.run_dir) / "ckpt_image.ckpt").string(),
                                      cfg, model, trainer.optimizer(), step + 1);
            if (step + 1 == total)
                save_train_checkpoint((fs::path(cfg.run_dir) / "ckpt_final.ckpt").string(),
                                      cfg, model, trainer.optimizer(), step + 1);
        }
        std::cout << "trained " << (total - start_step) << " steps; checkpoints in "
                  << cfg.run_dir << "\n";
    });
}

// sample: one reference image + prompt -> frame PNGs + metadata JSON.
inline int cmd_sample(const RunConfig& cfg, const std::string& ckpt_path,
                      const std::string& ref_image, const std::string& prompt,
                      const std::string& out_dir) {
    return run_guarded([&]() {
        write_config_echo(cfg);
        Checkpoint ckpt = load_checkpoint(ckpt_path);
        const json ckpt_cfg = json::parse(ckpt.config_json);
        const int64_t ckpt_hidden = ckpt_cfg.at("model").value("hidden_dim", int64_t(0));
        if (ckpt_hidden != cfg.model.hidden_dim)
            throw config_error("checkpoint hidden_dim " + std::to_string(ckpt_hidden) +
                               " does not match configured hidden_dim " +
                               std::to_string(cfg.model.hidden_dim));

        LynxModel model(cfg.model, cfg.seed);
        ParamRegistry all = model.all_params();
        load_into_registry(ckpt, all);

        const ToyLatentCodec codec(cfg.model.latent_channels);
        const Image ref = load_png(ref_image);
        const LatentVideo ref_latent = codec.encode_frame(ref);
        const FaceEmbedding face =
            FaceEmbedding::from(stub_face_embedding(ref, cfg.model.face_dim));

        IdentityTokens idt = model.id_adapter.tokens_for(face);
        RefActivationSet ref_acts = encode_reference(ref_latent, model.frozen_backbone());
        SampleConds conds{embed_text(prompt, cfg.model.text_dim), &idt, &ref_acts};

        Rng rng = Rng::derive(cfg.seed, "sample", 0);
        const LatentVideo latent = sample_video(model, conds, cfg.sample_frames,
                                                ref_latent.h, ref_latent.w, cfg.sampler, rng);

        fs::create_directories(out_dir);
        const std::vector<Image> frames = codec.decode_video(latent);
        for (size_t i = 0; i < frames.size(); ++i) {
            char name[32];
            std::snprintf(name, sizeof(name), "%06zu.png", i);
            save_png((fs::path(out_dir) / name).string(), frames[i]);
        }
        const json meta{{"seed", cfg.seed},
                        {"steps", cfg.sampler.num_steps},
                        {"frames", cfg.sample_frames},
                        {"prompt", prompt},
                        {"config_hash", hex64(fnv1a_str(run_config_to_json(cfg).dump()))}};
        std::ofstream meta_out((fs::path(out_dir) / "metadata.json").string());
        meta_out << meta.dump(2) << "\n";
        std::cout << "wrote " << frames.size() << " frames to " << out_dir << "\n";
    });
}

// data: batch filter / stats / augment over the manifest.
inline int cmd_data(const RunConfig& cfg, const std::string& subcmd) {
    return run_guarded([&]() {
        if (cfg.data.manifest.empty())
            throw config_error("data.manifest is required for data " + subcmd);
        write_config_echo(cfg);
        auto records = data::load_manifest(cfg.data.manifest);

        if (subcmd == "filter") {
            if (cfg.data.output_root.empty())
                throw config_error("data.output_root is required for data filter");
            const int64_t face_dim = cfg.model.face_dim;
            data::ImageEmbedder embedder = [face_dim](const Image& img) {
                return stub_face_embedding(img, face_dim);
            };
            data::FilterResult res =
                data::identity_filter(records, embedder, cfg.data.resemblance_threshold);
            fs::create_directories(cfg.data.output_root);
            data::save_manifest((fs::path(cfg.data.output_root) / "kept.jsonl").string(),
                                res.kept);
            std::vector<data::PairRecord> dropped;
            for (auto& d : res.dropped) {
                data::PairRecord r = d.record;
                r.extra["drop_reason"] = d.reason;
                dropped.push_back(std::move(r));
            }
            data::save_manifest((fs::path(cfg.data.output_root) / "dropped.jsonl").string(),
                                dropped);
            std::cout << json{{"kept", res.kept.size()}, {"dropped", res.dropped.size()}}.dump()
                      << "\n";
        } else if (subcmd == "stats") {
            int64_t counts[3] = {0, 0, 0};
            std::vector<int64_t> histogram(20, 0);  // resemblance bins over [-1, 1]
            for (const auto& r : records) {
                ++counts[size_t(r.pair_type)];
                if (r.resemblance) {
                    const int bin = std::clamp(int((*r.resemblance + 1.0) / 2.0 * 20.0), 0, 19);
                    ++histogram[size_t(bin)];
                }
            }
            const json out{{"counts",
                            {{"single_scene", counts[0]},
                             {"multi_scene", counts[1]},
                             {"augmented_single_scene", counts[2]}}},
                           {"resemblance_histogram", histogram}};
            std::cout << out.dump() << "\n";
        } else if (subcmd == "augment") {
            if (cfg.data.output_root.empty())
                throw config_error("data.output_root is required for data augment");
            data::Augmenter aug;
            if (cfg.data.augment_kind == "relight")
                aug = data::make_relight_augmenter(cfg.data.augment_gamma);
            else if (cfg.data.augment_kind == "expression")
                aug = data::make_expression_augmenter(cfg.data.augment_amplitude);
            else
                aug = data::make_background_augmenter();

            std::vector<data::PairRecord> augmented;
            std::vector<data::PairRecord> rejects;
            int64_t noops = 0;
            for (size_t i = 0; i < records.size(); ++i) {
                if (records[i].pair_type != data::PairType::single_scene) continue;
                Rng rng = Rng::derive(cfg.seed, "augment", i);
                try {
                    data::PairRecord out = data::apply_augmenter(
                        records[i], aug, rng, cfg.data.output_root);
                    if (load_png(out.condition_image).px ==
                        load_png(records[i].condition_image).px)
                        ++noops;
                    augmented.push_back(std::move(out));
                } catch (const std::exception& e) {
                    data::PairRecord r = records[i];
                    r.extra["reject_reason"] = e.what();
                    rejects.push_back(std::move(r));
                }
            }
            fs::create_directories(cfg.data.output_root);
            data::save_manifest(
                (fs::path(cfg.data.output_root) / "augmented.jsonl").string(), augmented);
            data::save_manifest((fs::path(cfg.data.output_root) / "rejects.jsonl").string(),
                                rejects);
            std::cout << json{{"augmented", augmented.size()},
                              {"rejects", rejects.size()},
                              {"noop_count", noops}}
                             .dump()
                      << "\n";
        } else {
            throw config_error("unknown data subcommand \"" + subcmd +
                               "\" (expected filter, stats, or augment)");
        }
    });
}

// eval: results directory (case_id -> frame dir) -> summary.json/.txt.
inline int cmd_eval(const RunConfig& cfg) {
    return run_guarded([&]() {
        if (cfg.eval.subjects.empty() || cfg.eval.prompts.empty() || cfg.eval.results.empty())
            throw config_error("eval.subjects, eval.prompts, and eval.results are required");
        write_config_echo(cfg);

        const eval::Benchmark bench = eval::build_benchmark(cfg.eval.subjects,
                                                            cfg.eval.prompts);
        const eval::EmbedderRegistry registry =
            eval::EmbedderRegistry::default_stubs(cfg.model.face_dim);

        std::vector<eval::CaseScores> cases;
        std::vector<eval::BenchmarkCase> judged_cases;
        for (const auto& c : bench.cases) {
            const fs::path case_dir = fs::path(cfg.eval.results) / c.case_id;
            if (!fs::is_directory(case_dir)) continue;
            eval::CaseScores scores;
            scores.case_id = c.case_id;
            const std::vector<Image> frames = load_frames(case_dir.string());
            const Image reference = load_png(c.subject);
            for (const auto& id : registry.ids())
                scores.resemblance[id] = eval::face_resemblance(
                    frames, reference, registry.get(id), cfg.eval.frame_stride);
            cases.push_back(std::move(scores));
            judged_cases.push_back(c);
        }
        if (cases.size() != bench.cases.size())
            std::cout << "note: results cover " << cases.size() << " of "
                      << bench.cases.size() << " benchmark cases\n";

        const char* judge_url = std::getenv("LYNX_JUDGE_URL");
        if (judge_url && *judge_url) {
            eval::JudgeClientConfig jcfg;
            jcfg.url = judge_url;
            if (const char* tok = std::getenv("LYNX_JUDGE_TOKEN")) jcfg.token = tok;
            auto results = eval::judge_cases(
                judged_cases,
                [&](const eval::BenchmarkCase& c) {
                    return (fs::path(cfg.eval.results) / c.case_id).string();
                },
                jcfg, eval::RubricTemplates{}, cfg.eval.parallelism);
            for (size_t i = 0; i < results.size(); ++i) {
                if (results[i].first) cases[i].judge = results[i].first->scores;
                if (results[i].second) cases[i].judge_error = results[i].second;
            }
        }

        const eval::Summary summary = eval::aggregate(cases);
        fs::create_directories(cfg.eval.results);
        {
            std::ofstream js((fs::path(cfg.eval.results) / "summary.json").string());
            js << eval::summary_to_json(summary).dump(2) << "\n";
        }
        {
            std::ofstream plot((fs::path(cfg.eval.results) / "summary.plot.json").string());
            plot << eval::summary_to_plot_json(summary).dump(2) << "\n";
        }
        const std::string table = eval::summary_to_table(summary);
        {
            std::ofstream txt((fs::path(cfg.eval.results) / "summary.txt").string());
            txt << table;
        }
        std::cout << table;
    });
}

// inspect-pack: packing geometry report for a manifest, as JSON on stdout.
inline int cmd_inspect_pack(const RunConfig& cfg, const std::string& manifest_path) {
    return run_guarded([&]() {
        const std::string manifest =
            manifest_path.empty() ? cfg.data.manifest : manifest_path;
        if (manifest.empty()) throw config_error("a manifest is required for inspect-pack");
        write_config_echo(cfg);

        auto records = data::load_manifest(manifest);
        std::vector<TokenSeq> seqs;
        for (const auto& rec : records) {
            const auto frame_paths = list_frame_paths(rec.target);
            const Image first = load_png(frame_paths.front());
            if (first.w % kLatentPool != 0 || first.h % kLatentPool != 0)
                throw config_error("target " + rec.target + " dims " +
                                   std::to_string(first.w) + "x" + std::to_string(first.h) +
                                   " are not divisible by the latent pool " +
                                   std::to_string(kLatentPool));
            LatentVideo shape = LatentVideo::zeros(int64_t(frame_paths.size()),
                                                   first.h / kLatentPool,
                                                   first.w / kLatentPool,
                                                   cfg.model.latent_channels);
            const Grid g = token_grid(shape, cfg.model.patch);
            seqs.push_back(make_token_seq(Tensor::zeros(g.count(), 1), g));
        }
        const auto packs = pack(seqs, cfg.train.pack_budget);

        json report;
        report["budget"] = cfg.train.pack_budget;
        report["packs"] = json::array();
        for (const auto& p : packs) {
            json grids = json::array();
            for (const auto& g : p.grids) grids.push_back({g.t, g.h, g.w});
            report["packs"].push_back({{"boundaries", p.boundaries},
                                       {"grids", grids},
                                       {"len", p.total_len()}});
        }
        report["padding_waste_fraction"] = padding_waste_fraction(packs);
        std::cout << report.dump() << "\n";
    });
}

}  // namespace lynx::cli
