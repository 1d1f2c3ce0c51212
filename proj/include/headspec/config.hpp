#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "headspec/model.hpp"

namespace headspec {

/// Flat run configuration. Every key has a default; parsing rejects unknown
/// keys and out-of-domain values, and the resolved config is echoed next to
/// every run's outputs so each CSV row is reproducible from its hash.
struct RunConfig {
    uint64_t seed = 0;
    std::string dataset_dir;
    std::string out_dir = "out";
    std::string stage = "guided";  // base|guided

    int layers = 4;
    int heads = 8;
    int head_dim = 16;
    int mlp_hidden = 128;
    std::vector<int> object_heads = {0};
    std::vector<int> skill_heads = {1};
    std::vector<int> depth_heads = {2};
    std::string guided_layers = "q3";  // all|q1|q2|q3|q4
    std::string fusion_mode = "zero_conv";

    double lambda_object = 0.001;
    double lambda_skill = 0.001;
    std::string supervision_object = "region";  // region|gaussian
    std::string supervision_skill = "soft";     // soft|hard
    double gaussian_sigma = 1.5;
    double mask_tau = 0.5;

    bool depth_enabled = true;
    int depth_downsample = 2;
    double depth_delta = 1.0;

    double alpha_target = -1.0;  // <0: inactive
    double gamma_target = -1.0;
    double object_clamp_weight = 1.0;
    double skill_clamp_weight = 1.0;

    int steps = 2000;
    int batch_size = 8;
    double lr_peak = 0.01;
    int lr_warmup = 100;
    double lr_floor_frac = 0.1;
    std::string optimizer = "sgd";  // sgd|adam
    double grad_clip = 10.0;
    double tau_min = 0.001;
    double tau_max = 0.999;

    int eval_every = 250;
    int eval_rollouts = 20;
    int eval_horizon = 80;
    int eval_batches = 4;

    bool mixture = false;
    bool deterministic = true;
    std::string init_checkpoint;

    int gen_episodes = 400;
    std::string gen_difficulty = "easy";

    static RunConfig from_file(const std::string& path);
    static RunConfig from_string(const std::string& text);
    void set_key(const std::string& key, const std::string& value);
    void validate() const;

    /// Every key, sorted, fully resolved.
    std::string canonical() const;
    /// FNV-1a 64 of canonical(), as 16 hex chars.
    std::string hash() const;

    ModelConfig model_config() const;
    std::vector<int> guided_layer_indices() const;
};

}  // namespace headspec
