#pragma once

#include <string>
#include <vector>

#include "headspec/ops.hpp"
#include "headspec/tensor.hpp"

namespace headspec {

enum class FusionMode { kZeroConv, kDirectAdd, kTanhGate };

FusionMode fusion_mode_from_string(const std::string& s);
std::string to_string(FusionMode m);

/// Disjoint partition of attention heads into factor groups plus the set of
/// decoder layers that receive guidance. Heads not named in any group are
/// free.
struct HeadPlan {
    int num_heads = 8;
    std::vector<int> object_heads;
    std::vector<int> skill_heads;
    std::vector<int> depth_heads;
    std::vector<int> guided_layers;
    FusionMode fusion_mode = FusionMode::kZeroConv;

    void validate(int num_layers) const;
    std::vector<int> free_heads() const;
    bool is_guided_layer(int layer) const;
};

/// probs spans the global key axis: joint keys first, then depth keys when a
/// depth block is present. Rows of heads routed away from a block are exactly
/// zero there, not merely small.
struct AttentionOutput {
    Tensor probs;         // [B, H, T_q, T_k]
    Tensor per_head_out;  // [B, H, T_q, d_h]
    Tensor fused_out;     // [B, T_q, H*d_h] (projected when the op owns a projection)
};

struct KV {
    Tensor k;  // [B, H, T_k, d_h]
    Tensor v;
};

struct DepthKV {
    Tensor keys;  // [B, H, T_depth, d_h]
    Tensor values;
};

/// K/V maps applied to rms-normalized depth tokens.
struct DepthProjector {
    Tensor w_k;  // [d_in, H*d_h]
    Tensor w_v;
};

struct RoutedParams {
    Tensor w_q;  // [d_model, H*d_h]
    Tensor w_o;  // [H*d_h, d_model]
};

/// Zero-initialized residual projection (weights and bias both exact zero at
/// creation, so fused output equals the main branch bitwise).
struct ZeroLinear {
    Tensor w;  // [d, d]
    Tensor b;  // [d]
};

/// probs = softmax(Q K^T / sqrt(d_h) + mask); per_head_out = probs V.
/// fused_out here is the raw head concat (no output projection).
AttentionOutput multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const Tensor* mask = nullptr);

DepthKV depth_kv_project(const Tensor& depth_tokens, const DepthProjector& proj, int heads);

/// Object/skill/free heads attend to the joint cache; depth heads attend
/// exclusively to the depth cache. Outputs are concatenated in head order and
/// projected through params.w_o.
AttentionOutput routed_attention(const Tensor& action_hidden, const KV& joint,
                                 const DepthKV* depth, const HeadPlan& plan,
                                 const RoutedParams& params);

Tensor control_fuse(const Tensor& main_out, const Tensor& branch_out, FusionMode mode,
                    const ZeroLinear& zl);

/// 2-D average pooling over a square token grid; factor=1 is the identity.
Tensor downsample_depth_tokens(const Tensor& tokens, int factor);

}  // namespace headspec
