// lynx: identity-conditioned video diffusion at desk scale.
//
//   lynx train        --config cfg.json [--resume ckpt] [--set k=v ...]
//   lynx sample       --config cfg.json --ckpt ckpt --ref face.png
//                     --prompt "..." --out dir
//   lynx data         --config cfg.json {filter|stats|augment}
//   lynx eval         --config cfg.json
//   lynx inspect-pack --config cfg.json [--manifest m.jsonl]

#include <CLI11.hpp>

#include <iostream>
#include <optional>
#include <string>
#include <vector>

#include "lynx/cli.hpp"
#include "lynx/config.hpp"

using namespace lynx;

int main(int argc, char** argv) {
    CLI::App app{"identity-conditioned video diffusion, desk scale"};
    app.require_subcommand(1);

    std::string config_path;
    std::vector<std::string> overrides;
    app.add_option("--config", config_path, "JSON config file")->required();
    app.add_option("--set", overrides, "override config fields, key.path=value");

    auto* train = app.add_subcommand("train", "run the two-stage trainer");
    std::string resume_path;
    train->add_option("--resume", resume_path, "checkpoint to resume from");

    auto* sample = app.add_subcommand("sample", "sample a video from one reference image");
    std::string ckpt_path, ref_image, prompt, out_dir;
    sample->add_option("--ckpt", ckpt_path, "model checkpoint")->required();
    sample->add_option("--ref", ref_image, "reference face image (png)")->required();
    sample->add_option("--prompt", prompt, "text prompt")->required();
    sample->add_option("--out", out_dir, "output frame directory")->required();

    auto* data_cmd = app.add_subcommand("data", "data pipeline batch operations");
    std::string data_sub;
    data_cmd->add_option("subcommand", data_sub, "filter | stats | augment")->required();

    auto* eval_cmd = app.add_subcommand("eval", "score a results directory");

    auto* inspect = app.add_subcommand("inspect-pack", "packing geometry report");
    std::string inspect_manifest;
    inspect->add_option("--manifest", inspect_manifest, "manifest to inspect");

    CLI11_PARSE(app, argc, argv);

    RunConfig cfg;
    try {
        cfg = load_run_config(config_path, overrides);
    } catch (const Error& e) {
        std::cerr << "error: " << e.what() << "\n";
        return cli::kExitConfig;
    }

    if (train->parsed())
        return cli::cmd_train(cfg, resume_path.empty()
                                       ? std::nullopt
                                       : std::optional<std::string>(resume_path));
    if (sample->parsed()) return cli::cmd_sample(cfg, ckpt_path, ref_image, prompt, out_dir);
    if (data_cmd->parsed()) return cli::cmd_data(cfg, data_sub);
    if (eval_cmd->parsed()) return cli::cmd_eval(cfg);
    if (inspect->parsed()) return cli::cmd_inspect_pack(cfg, inspect_manifest);
    return cli::kExitConfig;
}
