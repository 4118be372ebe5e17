#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "nava/commands.hpp"
#include "nava/errors.hpp"

namespace {

struct CliArgs {
    std::string config_path;
    std::vector<std::string> overrides;
    std::string out_dir;
    std::string ckpt;
    std::string resume;
    std::string prompt;
    std::string task = "t2av";
    std::string scales;
    std::string mode;
    std::string command;
    uint64_t seed = 0;
    bool seed_set = false;
    int64_t steps = 0;
    bool steps_set = false;
    int n_clips = 0;
    bool n_clips_set = false;
};

nava::RunConfig build_config(const CliArgs& args) {
    nava::RunConfig rc =
        nava::load_run_config(args.config_path, args.overrides);
    rc.out_dir = args.out_dir;
    rc.checkpoint_path = args.ckpt;
    rc.resume_path = args.resume;
    rc.prompt = args.prompt;
    rc.task = args.task;
    rc.ablate_mode = args.mode;
    if (!args.scales.empty()) rc.scales = nava::parse_scales(args.scales);
    if (args.seed_set) rc.cli_seed = args.seed;
    if (args.steps_set) rc.cli_steps = args.steps;
    if (args.n_clips_set) rc.cli_n_clips = args.n_clips;
    rc.finalize();
    return rc;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"toy joint audio-video generation stack"};
    app.require_subcommand(1);

    CliArgs args;
    app.add_option("--config", args.config_path, "key=value config file");
    app.add_option("--set", args.overrides,
                   "config override key=value (repeatable)");
    app.add_option("--out", args.out_dir, "output directory");
    auto* seed_opt = app.add_option("--seed", args.seed, "master seed");
    auto* steps_opt =
        app.add_option("--steps", args.steps, "override train.steps");
    app.add_option("--scales", args.scales,
                   "guidance scales sText,sAlign,sTimbre");

    auto* gen = app.add_subcommand("gen-data", "write train/val datasets");
    auto* train = app.add_subcommand("train", "run the training schedule");
    train->add_option("--resume", args.resume, "resume from a state file");
    auto* samplec = app.add_subcommand("sample", "sample from a checkpoint");
    samplec->add_option("--ckpt", args.ckpt, "checkpoint path");
    samplec->add_option("--prompt", args.prompt, "prompt text");
    samplec->add_option("--task", args.task, "t2av|t2a|t2v|ti2av");
    auto* evalc = app.add_subcommand("eval", "score held-out generations");
    evalc->add_option("--ckpt", args.ckpt, "checkpoint path");
    auto* n_clips_opt =
        evalc->add_option("--n-clips", args.n_clips, "clips to score");
    auto* ablate = app.add_subcommand("ablate", "layer/cfg ablation sweeps");
    ablate->add_option("--mode", args.mode, "layers|cfg")->required();
    ablate->add_option("--ckpt", args.ckpt, "checkpoint path (cfg mode)");

    CLI11_PARSE(app, argc, argv);
    args.seed_set = seed_opt->count() > 0;
    args.steps_set = steps_opt->count() > 0;
    args.n_clips_set = n_clips_opt->count() > 0;

    try {
        const nava::RunConfig rc = build_config(args);
        if (gen->parsed()) return nava::cmd_gen_data(rc);
        if (train->parsed()) return nava::cmd_train(rc);
        if (samplec->parsed()) return nava::cmd_sample(rc);
        if (evalc->parsed()) return nava::cmd_eval(rc);
        if (ablate->parsed()) return nava::cmd_ablate(rc);
        std::cerr << "no subcommand\n";
        return 2;
    } catch (const nava::NumericError& e) {
        std::cerr << "numeric failure: " << e.what() << "\n";
        return 3;
    } catch (const nava::IoError& e) {
        std::cerr << "io error: " << e.what() << "\n";
        return 4;
    } catch (const nava::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const nava::ShapeError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    }
}
