#include "headspec/attention.hpp"

#include <algorithm>
#include <cmath>
#include <set>
#include <stdexcept>

namespace headspec {

FusionMode fusion_mode_from_string(const std::string& s) {
    if (s == "zero_conv") return FusionMode::kZeroConv;
    if (s == "direct_add") return FusionMode::kDirectAdd;
    if (s == "tanh_gate") return FusionMode::kTanhGate;
    throw std::invalid_argument("fusion_mode: unknown mode '" + s + "'");
}

std::string to_string(FusionMode m) {
    switch (m) {
        case FusionMode::kZeroConv: return "zero_conv";
        case FusionMode::kDirectAdd: return "direct_add";
        case FusionMode::kTanhGate: return "tanh_gate";
    }
    throw std::invalid_argument("fusion_mode: unknown enum value");
}

void HeadPlan::validate(int num_layers) const {
    if (num_heads <= 0) throw std::invalid_argument("head plan: num_heads must be positive");
    std::set<int> seen;
    auto check_group = [&](const std::vector<int>& g, const char* name) {
        for (int h : g) {
            if (h < 0 || h >= num_heads)
                throw std::invalid_argument(std::string("head plan: ") + name + " index " +
                                            std::to_string(h) + " outside [0," +
                                            std::to_string(num_heads) + ")");
            if (!seen.insert(h).second)
                throw std::invalid_argument(std::string("head plan: head ") + std::to_string(h) +
                                            " assigned to more than one group");
        }
    };
    check_group(object_heads, "object_heads");
    check_group(skill_heads, "skill_heads");
    check_group(depth_heads, "depth_heads");
    for (int l : guided_layers)
        if (l < 0 || l >= num_layers)
            throw std::invalid_argument("head plan: guided layer " + std::to_string(l) +
                                        " outside [0," + std::to_string(num_layers) + ")");
}

std::vector<int> HeadPlan::free_heads() const {
    std::set<int> taken(object_heads.begin(), object_heads.end());
    taken.insert(skill_heads.begin(), skill_heads.end());
    taken.insert(depth_heads.begin(), depth_heads.end());
    std::vector<int> out;
    for (int h = 0; h < num_heads; h++)
        if (!taken.count(h)) out.push_back(h);
    return out;
}

bool HeadPlan::is_guided_layer(int layer) const {
    return std::find(guided_layers.begin(), guided_layers.end(), layer) != guided_layers.end();
}

AttentionOutput multi_head_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                     const Tensor* mask) {
    if (q.ndim() != 4 || k.ndim() != 4 || v.ndim() != 4)
        throw std::invalid_argument("attention: want [B,H,T,d_h] operands, got " +
                                    shape_str(q.shape()) + " " + shape_str(k.shape()) + " " +
                                    shape_str(v.shape()));
    if (q.dim(3) != k.dim(3))
        throw std::invalid_argument("attention: d_h mismatch between Q " + shape_str(q.shape()) +
                                    " and K " + shape_str(k.shape()));
    if (k.dim(3) != v.dim(3) || k.dim(2) != v.dim(2))
        throw std::invalid_argument("attention: K/V shape mismatch " + shape_str(k.shape()) +
                                    " vs " + shape_str(v.shape()));
    if (q.dim(0) != k.dim(0) || q.dim(1) != k.dim(1))
        throw std::invalid_argument("attention: batch/head mismatch Q " + shape_str(q.shape()) +
                                    " vs K " + shape_str(k.shape()));
    const double scale = 1.0 / std::sqrt(static_cast<double>(q.dim(3)));
    Tensor logits = matmul_nt_scaled(q, k, scale);
    if (mask) logits = add(logits, *mask);
    AttentionOutput out;
    out.probs = softmax_lastdim(logits);
    out.per_head_out = matmul(out.probs, v);
    out.fused_out = merge_heads(out.per_head_out);
    return out;
}

DepthKV depth_kv_project(const Tensor& depth_tokens, const DepthProjector& proj, int heads) {
    if (depth_tokens.ndim() != 3)
        throw std::invalid_argument("depth_kv_project: want [B,T,d] tokens, got " +
                                    shape_str(depth_tokens.shape()));
    if (depth_tokens.dim(1) == 0)
        throw std::invalid_argument("depth_kv_project: zero-length token axis");
    Tensor normed = rmsnorm(depth_tokens);
    DepthKV kv;
    kv.keys = split_heads(matmul(normed, proj.w_k), heads);
    kv.values = split_heads(matmul(normed, proj.w_v), heads);
    return kv;
}

namespace {

// Place group results back into original head order.
std::vector<int> inverse_perm(const std::vector<int>& order) {
    std::vector<int> inv(order.size());
    for (size_t i = 0; i < order.size(); i++)
        inv[static_cast<size_t>(order[i])] = static_cast<int>(i);
    return inv;
}

}  // namespace

AttentionOutput routed_attention(const Tensor& action_hidden, const KV& joint,
                                 const DepthKV* depth, const HeadPlan& plan,
                                 const RoutedParams& params) {
    if (action_hidden.ndim() != 3)
        throw std::invalid_argument("routed_attention: want [B,T,d] hidden, got " +
                                    shape_str(action_hidden.shape()));
    if (!joint.k.defined() || !joint.v.defined() || joint.k.dim(2) == 0)
        throw std::invalid_argument("routed_attention: empty joint KV");
    if (!plan.depth_heads.empty() && depth == nullptr)
        throw std::invalid_argument("routed_attention: plan has depth heads but no depth KV");

    const int heads = plan.num_heads;
    Tensor q_all = split_heads(matmul(action_hidden, params.w_q), heads);
    const int b = q_all.dim(0);
    const int t_q = q_all.dim(2);
    const int t_joint = joint.k.dim(2);
    const int t_depth = depth ? depth->keys.dim(2) : 0;

    std::vector<int> dep = plan.depth_heads;
    std::sort(dep.begin(), dep.end());
    std::vector<int> nd;
    {
        std::set<int> ds(dep.begin(), dep.end());
        for (int h = 0; h < heads; h++)
            if (!ds.count(h)) nd.push_back(h);
    }

    std::vector<Tensor> probs_parts;
    std::vector<Tensor> out_parts;
    std::vector<int> order;

    if (!nd.empty()) {
        AttentionOutput a =
            multi_head_attention(index_select(q_all, 1, nd), index_select(joint.k, 1, nd),
                                 index_select(joint.v, 1, nd));
        Tensor probs = a.probs;
        if (t_depth > 0)
            probs = concat(
                {probs, Tensor::zeros({b, static_cast<int>(nd.size()), t_q, t_depth})}, 3);
        probs_parts.push_back(probs);
        out_parts.push_back(a.per_head_out);
        order.insert(order.end(), nd.begin(), nd.end());
    }
    if (!dep.empty()) {
        AttentionOutput a =
            multi_head_attention(index_select(q_all, 1, dep), index_select(depth->keys, 1, dep),
                                 index_select(depth->values, 1, dep));
        // Structural isolation: joint-key mass is identically zero.
        Tensor probs = concat(
            {Tensor::zeros({b, static_cast<int>(dep.size()), t_q, t_joint}), a.probs}, 3);
        probs_parts.push_back(probs);
        out_parts.push_back(a.per_head_out);
        order.insert(order.end(), dep.begin(), dep.end());
    }

    AttentionOutput out;
    Tensor probs_grouped = probs_parts.size() == 1 ? probs_parts[0] : concat(probs_parts, 1);
    Tensor heads_grouped = out_parts.size() == 1 ? out_parts[0] : concat(out_parts, 1);
    const std::vector<int> inv = inverse_perm(order);
    out.probs = index_select(probs_grouped, 1, inv);
    out.per_head_out = index_select(heads_grouped, 1, inv);
    out.fused_out = matmul(merge_heads(out.per_head_out), params.w_o);
    return out;
}

Tensor control_fuse(const Tensor& main_out, const Tensor& branch_out, FusionMode mode,
                    const ZeroLinear& zl) {
    if (main_out.shape() != branch_out.shape())
        throw std::invalid_argument("control_fuse: shape mismatch " + shape_str(main_out.shape()) +
                                    " vs " + shape_str(branch_out.shape()));
    switch (mode) {
        case FusionMode::kZeroConv:
            return add(main_out, add(matmul(branch_out, zl.w), zl.b));
        case FusionMode::kDirectAdd:
            return add(main_out, branch_out);
        case FusionMode::kTanhGate:
            return add(main_out, tanh(branch_out));
    }
    throw std::invalid_argument("control_fuse: unknown fusion mode");
}

Tensor downsample_depth_tokens(const Tensor& tokens, int factor) {
    if (tokens.ndim() != 3)
        throw std::invalid_argument("downsample_depth_tokens: want [B,T,d], got " +
                                    shape_str(tokens.shape()));
    if (factor <= 0) throw std::invalid_argument("downsample_depth_tokens: factor must be >= 1");
    if (factor == 1) return tokens;
    const int b = tokens.dim(0), t = tokens.dim(1), d = tokens.dim(2);
    const int side = static_cast<int>(std::lround(std::sqrt(static_cast<double>(t))));
    if (side * side != t)
        throw std::invalid_argument("downsample_depth_tokens: token count " + std::to_string(t) +
                                    " is not a perfect square");
    if (side % factor != 0)
        throw std::invalid_argument("downsample_depth_tokens: grid side " + std::to_string(side) +
                                    " not divisible by factor " + std::to_string(factor));
    const int s2 = side / factor;
    Tensor grid = reshape(tokens, {b, s2, factor, s2, factor, d});
    Tensor pooled = reduce_mean(grid, {2, 4});
    return reshape(pooled, {b, s2 * s2, d});
}

}  // namespace headspec
