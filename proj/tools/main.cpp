#include <CLI11.hpp>
#include <cstdio>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "headspec/config.hpp"
#include "headspec/train.hpp"

namespace {

using headspec::RunConfig;

struct CommonArgs {
    std::string config_path;
    std::string out_dir;
    std::string stage;
    long long seed = -1;
    bool deterministic = false;
};

void add_common(CLI::App* cmd, CommonArgs& args) {
    cmd->add_option("--config", args.config_path, "Run configuration file (key = value lines)");
    cmd->add_option("--seed", args.seed, "Override the config seed");
    cmd->add_option("--out", args.out_dir, "Override the output directory");
    cmd->add_option("--stage", args.stage, "Training stage: base or guided");
    cmd->add_flag("--deterministic", args.deterministic,
                  "Force single-threaded deterministic mode (always on in this build)");
}

RunConfig resolve_config(const CommonArgs& args) {
    RunConfig cfg =
        args.config_path.empty() ? RunConfig{} : RunConfig::from_file(args.config_path);
    if (args.seed >= 0) cfg.seed = static_cast<uint64_t>(args.seed);
    if (!args.out_dir.empty()) cfg.out_dir = args.out_dir;
    if (!args.stage.empty()) cfg.stage = args.stage;
    if (args.deterministic) cfg.deterministic = true;
    cfg.validate();
    return cfg;
}

void print_metrics(const headspec::MetricsRecord& r) {
    std::printf("step=%d loss_fm=%.6f loss_obj=%.6f loss_skill=%.6f\n", r.step, r.loss_fm,
                r.loss_obj, r.loss_skill);
    std::printf("grounding_mass=%.4f argmax_hit=%.4f probe_acc=%.4f cluster_sep=%.4f "
                "success_rate=%.4f\n",
                r.grounding_mass, r.argmax_hit, r.probe_acc, r.cluster_sep, r.success_rate);
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"Guided attention-head specialization on a synthetic manipulation bench"};
    app.require_subcommand(1);

    CommonArgs gen_args, train_args, eval_args, ablate_args, diag_args;

    auto* gen = app.add_subcommand("gen-data", "Generate the episode dataset");
    add_common(gen, gen_args);

    auto* train = app.add_subcommand("train", "Train a policy");
    add_common(train, train_args);

    auto* eval = app.add_subcommand("eval", "Evaluate a checkpoint on its validation split");
    add_common(eval, eval_args);
    std::string eval_ckpt, eval_dataset;
    eval->add_option("--checkpoint", eval_ckpt, "Checkpoint file")->required();
    eval->add_option("--dataset", eval_dataset,
                     "Dataset directory (defaults to the one in the checkpoint)");

    auto* ablate = app.add_subcommand("ablate", "Sweep one knob across values");
    add_common(ablate, ablate_args);
    std::string knob, values_csv;
    ablate->add_option("--knob", knob,
                       "One of alpha, gamma, delta, layer_quartile, fusion_mode, "
                       "supervision_variant")
        ->required();
    ablate->add_option("--values", values_csv, "Comma-separated values")->required();

    auto* diag = app.add_subcommand("diag", "Diagnostics for a checkpoint");
    add_common(diag, diag_args);
    std::string diag_ckpt, diag_dataset;
    bool dump_attn = false;
    diag->add_option("--checkpoint", diag_ckpt, "Checkpoint file")->required();
    diag->add_option("--dataset", diag_dataset, "Dataset directory");
    diag->add_flag("--dump-attn", dump_attn, "Write per-view attention PGM images");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            RunConfig cfg = resolve_config(gen_args);
            headspec::generate_dataset(cfg);
            std::printf("wrote %d episodes to %s\n", cfg.gen_episodes, cfg.dataset_dir.c_str());
        } else if (train->parsed()) {
            RunConfig cfg = resolve_config(train_args);
            headspec::TrainOutputs out = headspec::run_training(cfg);
            std::printf("checkpoint: %s\nmetrics: %s\n", out.checkpoint_path.c_str(),
                        out.metrics_path.c_str());
            print_metrics(out.final_metrics);
        } else if (eval->parsed()) {
            headspec::LoadedModel lm = headspec::load_checkpoint(eval_ckpt);
            const std::string dataset =
                eval_dataset.empty() ? lm.cfg.dataset_dir : eval_dataset;
            const std::string out =
                eval_args.out_dir.empty() ? lm.cfg.out_dir + "/eval" : eval_args.out_dir;
            headspec::MetricsRecord r = headspec::run_diagnostics(eval_ckpt, dataset, out, false);
            print_metrics(r);
        } else if (ablate->parsed()) {
            RunConfig cfg = resolve_config(ablate_args);
            std::vector<std::string> values;
            std::istringstream is(values_csv);
            std::string item;
            while (std::getline(is, item, ',')) values.push_back(item);
            const std::string summary = cfg.out_dir + "/sweep_" + knob + ".csv";
            headspec::run_ablation_sweep(cfg, knob, values, summary);
            std::printf("sweep summary: %s\n", summary.c_str());
        } else if (diag->parsed()) {
            const std::string out =
                diag_args.out_dir.empty() ? std::string("diag_out") : diag_args.out_dir;
            std::string dataset = diag_dataset;
            if (dataset.empty()) dataset = headspec::load_checkpoint(diag_ckpt).cfg.dataset_dir;
            headspec::MetricsRecord r =
                headspec::run_diagnostics(diag_ckpt, dataset, out, dump_attn);
            print_metrics(r);
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
