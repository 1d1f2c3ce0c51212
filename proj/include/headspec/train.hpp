#pragma once

#include <string>
#include <vector>

#include "headspec/config.hpp"
#include "headspec/diagnostics.hpp"
#include "headspec/losses.hpp"
#include "headspec/model.hpp"

namespace headspec {

struct DatasetPair {
    std::vector<Episode> train;
    std::vector<Episode> val;
    DatasetManifest manifest;
};

/// Writes train.txt / val.txt / manifest.txt into cfg.dataset_dir with a
/// 93:7 split.
void generate_dataset(const RunConfig& cfg);
DatasetPair load_dataset(const std::string& dir);

struct TrainOutputs {
    std::string checkpoint_path;
    std::string metrics_path;
    MetricsRecord final_metrics;
};

TrainOutputs run_training(const RunConfig& cfg);

void save_checkpoint(const std::string& path, PolicyModel& model, const RunConfig& cfg);

struct LoadedModel {
    RunConfig cfg;
    PolicyModel model;
};
LoadedModel load_checkpoint(const std::string& path);

/// Copy parameters with matching names from a checkpoint (two-stage warm
/// start); returns the names that were loaded.
std::vector<std::string> load_params_into(PolicyModel& model, const std::string& path);

/// Metrics on the validation split: losses, factor quality, probe, cluster
/// separation, and closed-loop success over cfg.eval_rollouts fresh scenes.
MetricsRecord evaluate_model(PolicyModel& model, const RunConfig& cfg,
                             const std::vector<Episode>& val, int step);

/// Closed-loop success rate of the flow-matching policy over n freshly
/// generated scenes (10-step Euler integration per chunk).
double rollout_success_rate(PolicyModel& model, const RunConfig& cfg, int n_scenes,
                            uint64_t eval_seed, Difficulty difficulty);

/// Single-scene chunk policy wrapper around the model, for rollout_success.
ChunkPolicy make_model_policy(PolicyModel& model, const RunConfig& cfg, uint64_t noise_seed);

void run_ablation_sweep(const RunConfig& base, const std::string& knob,
                        const std::vector<std::string>& values, const std::string& summary_path);

MetricsRecord run_diagnostics(const std::string& checkpoint_path, const std::string& dataset_dir,
                              const std::string& out_dir, bool dump_attention);

}  // namespace headspec
