#pragma once

#include <string>
#include <utility>
#include <vector>

#include "headspec/attention.hpp"
#include "headspec/bench.hpp"
#include "headspec/tensor.hpp"

namespace headspec {

struct ModelConfig {
    int layers = 4;
    int heads = 8;
    int head_dim = 16;
    int chunk = kChunkLen;
    int action_dim = 3;
    int skill_classes = kSkillClasses;
    int ctx_feat_dim = 16;
    int mlp_hidden = 128;
    HeadPlan plan;
    bool adapter_enabled = true;     // false: base model, main branch only
    bool mixture_depth_concat = false;  // mixture protocol: depth keys join the joint cache
    bool depth_enabled = true;
    int depth_downsample = 2;
    bool skill_use_control = true;

    int d_model() const { return heads * head_dim; }
    void validate() const;
};

struct LayerParams {
    Tensor norm1_gain, norm2_gain;  // [d]
    Tensor wq, wo;                  // [d, d]
    Tensor wk, wv;                  // [ctx_feat_dim, d]
    Tensor mlp_w1, mlp_w2;

    bool has_control = false;
    Tensor c_wq, c_wo, c_wk, c_wv;  // branch copies of the main projections
    DepthProjector depth_proj;      // [kDepthFeatDim, d]
    ZeroLinear zero;
};

/// Flow-matching action decoder over a fixed context: cross-attention layers
/// from action queries to rendered scene tokens, with an optional
/// control-branch adapter on the guided layers.
struct PolicyModel {
    ModelConfig cfg;
    std::vector<LayerParams> layers;
    Tensor act_in_w;   // [action_dim + 2, d]  (action, tau, bias)
    Tensor pos_emb;    // [chunk, d]
    Tensor act_out_w;  // [d, action_dim]
    Tensor final_gain;
    Tensor skill_w;  // [head_dim, K]
    Tensor skill_b;  // [K]

    static PolicyModel init(const ModelConfig& cfg, uint64_t seed);
    std::vector<std::pair<std::string, Tensor*>> named_parameters();
};

struct ModelInput {
    Tensor ctx_feats;     // [B, T_ctx, ctx_feat_dim], untracked
    Tensor depth_tokens;  // [B, T_d, kDepthFeatDim] after downsampling/mixing; may be undefined
    std::vector<int> image_key_index;
};

struct LayerRecord {
    int layer = 0;
    Tensor main_probs;     // [B, H, T_q, T_joint]
    Tensor main_heads;     // [B, H, T_q, d_h]
    Tensor control_probs;  // [B, H, T_q, T_joint(+T_d)]; undefined without adapter
    Tensor control_heads;
};

struct ForwardResult {
    Tensor velocity;  // [B, chunk, action_dim]
    std::vector<LayerRecord> records;  // one per guided layer
};

ForwardResult model_forward(const PolicyModel& model, const ModelInput& input,
                            const Tensor& noisy_actions, double tau);

/// Raw context features for a batch of rendered scenes: V*P^2 patch tokens
/// followed by one state token. image_key_index covers the patch positions.
ModelInput assemble_context(const std::vector<RenderedScene>& scenes);

/// Depth tokens for a batch: [B, P^2, kDepthFeatDim] from the renderer.
Tensor stack_depth_tokens(const std::vector<RenderedScene>& scenes);

}  // namespace headspec
