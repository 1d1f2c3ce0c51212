#include "headspec/model.hpp"

#include <cmath>
#include <stdexcept>

#include "headspec/ops.hpp"
#include "headspec/rng.hpp"

namespace headspec {

void ModelConfig::validate() const {
    if (layers <= 0 || heads <= 0 || head_dim <= 0 || chunk <= 0 || action_dim <= 0)
        throw std::invalid_argument("model config: non-positive geometry");
    plan.validate(layers);
    if (plan.num_heads != heads)
        throw std::invalid_argument("model config: plan head count differs from model heads");
    if (mixture_depth_concat && !plan.depth_heads.empty())
        throw std::invalid_argument(
            "model config: mixture depth concat requires an empty depth head set");
    if (!plan.depth_heads.empty() && !depth_enabled)
        throw std::invalid_argument("model config: depth heads need depth_enabled");
}

namespace {

// Each parameter draws from its own named substream, so a base model and an
// adapted model built from the same seed share their main-branch weights
// exactly.
Tensor init_weight(uint64_t seed, const std::string& name, int rows, int cols) {
    Rng rng(mix_seed(seed, fnv1a(name)));
    const double s = std::sqrt(6.0 / (rows + cols));
    Eigen::ArrayXd v(static_cast<long>(rows) * cols);
    for (long i = 0; i < v.size(); i++) v[i] = rng.uniform(-s, s);
    return Tensor::from_array({rows, cols}, std::move(v)).set_requires_grad(true);
}

Tensor init_vector(double fill, int n) {
    Tensor t = Tensor::full({n}, fill);
    t.set_requires_grad(true);
    return t;
}

Tensor copy_param(const Tensor& src) {
    Tensor t = src.detached();
    t.set_requires_grad(true);
    return t;
}

}  // namespace

PolicyModel PolicyModel::init(const ModelConfig& cfg, uint64_t seed) {
    cfg.validate();
    PolicyModel m;
    m.cfg = cfg;
    const int d = cfg.d_model();

    m.act_in_w = init_weight(seed, "act_in_w", cfg.action_dim + 2, d);
    m.pos_emb = init_weight(seed, "pos_emb", cfg.chunk, d);
    m.act_out_w = init_weight(seed, "act_out_w", d, cfg.action_dim);
    m.final_gain = init_vector(1.0, d);
    m.skill_w = init_weight(seed, "skill_w", cfg.head_dim, cfg.skill_classes);
    m.skill_b = init_vector(0.0, cfg.skill_classes);

    for (int l = 0; l < cfg.layers; l++) {
        const std::string p = "layer" + std::to_string(l) + ".";
        LayerParams lp;
        lp.norm1_gain = init_vector(1.0, d);
        lp.norm2_gain = init_vector(1.0, d);
        lp.wq = init_weight(seed, p + "wq", d, d);
        lp.wo = init_weight(seed, p + "wo", d, d);
        lp.wk = init_weight(seed, p + "wk", cfg.ctx_feat_dim, d);
        lp.wv = init_weight(seed, p + "wv", cfg.ctx_feat_dim, d);
        lp.mlp_w1 = init_weight(seed, p + "mlp_w1", d, cfg.mlp_hidden);
        lp.mlp_w2 = init_weight(seed, p + "mlp_w2", cfg.mlp_hidden, d);
        if (cfg.adapter_enabled && cfg.plan.is_guided_layer(l)) {
            lp.has_control = true;
            // The branch starts as a copy of the base projections; only the
            // fusion projection starts at zero.
            lp.c_wq = copy_param(lp.wq);
            lp.c_wo = copy_param(lp.wo);
            lp.c_wk = copy_param(lp.wk);
            lp.c_wv = copy_param(lp.wv);
            lp.depth_proj.w_k = init_weight(seed, p + "depth_wk", kDepthFeatDim, d);
            lp.depth_proj.w_v = init_weight(seed, p + "depth_wv", kDepthFeatDim, d);
            lp.zero.w = Tensor::zeros({d, d}).set_requires_grad(true);
            lp.zero.b = Tensor::zeros({d}).set_requires_grad(true);
        }
        m.layers.push_back(std::move(lp));
    }
    return m;
}

std::vector<std::pair<std::string, Tensor*>> PolicyModel::named_parameters() {
    std::vector<std::pair<std::string, Tensor*>> out;
    out.push_back({"act_in_w", &act_in_w});
    out.push_back({"pos_emb", &pos_emb});
    out.push_back({"act_out_w", &act_out_w});
    out.push_back({"final_gain", &final_gain});
    out.push_back({"skill_w", &skill_w});
    out.push_back({"skill_b", &skill_b});
    for (size_t l = 0; l < layers.size(); l++) {
        auto& lp = layers[l];
        const std::string p = "layer" + std::to_string(l) + ".";
        out.push_back({p + "norm1_gain", &lp.norm1_gain});
        out.push_back({p + "norm2_gain", &lp.norm2_gain});
        out.push_back({p + "wq", &lp.wq});
        out.push_back({p + "wo", &lp.wo});
        out.push_back({p + "wk", &lp.wk});
        out.push_back({p + "wv", &lp.wv});
        out.push_back({p + "mlp_w1", &lp.mlp_w1});
        out.push_back({p + "mlp_w2", &lp.mlp_w2});
        if (lp.has_control) {
            out.push_back({p + "c_wq", &lp.c_wq});
            out.push_back({p + "c_wo", &lp.c_wo});
            out.push_back({p + "c_wk", &lp.c_wk});
            out.push_back({p + "c_wv", &lp.c_wv});
            out.push_back({p + "depth_wk", &lp.depth_proj.w_k});
            out.push_back({p + "depth_wv", &lp.depth_proj.w_v});
            out.push_back({p + "zero_w", &lp.zero.w});
            out.push_back({p + "zero_b", &lp.zero.b});
        }
    }
    return out;
}

ForwardResult model_forward(const PolicyModel& model, const ModelInput& input,
                            const Tensor& noisy_actions, double tau) {
    const ModelConfig& cfg = model.cfg;
    if (noisy_actions.ndim() != 3 || noisy_actions.dim(1) != cfg.chunk ||
        noisy_actions.dim(2) != cfg.action_dim)
        throw std::invalid_argument("model_forward: bad action tensor " +
                                    shape_str(noisy_actions.shape()));
    const int b = noisy_actions.dim(0);
    const bool wants_depth =
        cfg.depth_enabled && (!cfg.plan.depth_heads.empty() || cfg.mixture_depth_concat);
    if (wants_depth && !input.depth_tokens.defined())
        throw std::invalid_argument("model_forward: depth tokens required by the head plan");

    // Action token embedding: a, tau, bias through a linear map plus a
    // per-position embedding.
    Tensor tau_col = Tensor::full({b, cfg.chunk, 1}, tau);
    Tensor one_col = Tensor::full({b, cfg.chunk, 1}, 1.0);
    Tensor feats = concat({noisy_actions, tau_col, one_col}, 2);
    Tensor x = add(matmul(feats, model.act_in_w), model.pos_emb);

    ForwardResult result;
    for (int l = 0; l < cfg.layers; l++) {
        const LayerParams& lp = model.layers[static_cast<size_t>(l)];
        Tensor h = mul(rmsnorm(x), lp.norm1_gain);

        KV main_kv{split_heads(matmul(input.ctx_feats, lp.wk), cfg.heads),
                   split_heads(matmul(input.ctx_feats, lp.wv), cfg.heads)};
        Tensor q_main = split_heads(matmul(h, lp.wq), cfg.heads);
        AttentionOutput main = multi_head_attention(q_main, main_kv.k, main_kv.v);
        Tensor attn_out = matmul(main.fused_out, lp.wo);

        const bool guided = cfg.plan.is_guided_layer(l);
        LayerRecord rec;
        rec.layer = l;
        rec.main_probs = main.probs;
        rec.main_heads = main.per_head_out;

        if (lp.has_control) {
            KV ctrl_kv{split_heads(matmul(input.ctx_feats, lp.c_wk), cfg.heads),
                       split_heads(matmul(input.ctx_feats, lp.c_wv), cfg.heads)};
            DepthKV depth_kv;
            const DepthKV* depth_ptr = nullptr;
            if (wants_depth) {
                depth_kv = depth_kv_project(input.depth_tokens, lp.depth_proj, cfg.heads);
                if (cfg.mixture_depth_concat) {
                    ctrl_kv.k = concat({ctrl_kv.k, depth_kv.keys}, 2);
                    ctrl_kv.v = concat({ctrl_kv.v, depth_kv.values}, 2);
                } else {
                    depth_ptr = &depth_kv;
                }
            }
            AttentionOutput ctrl =
                routed_attention(h, ctrl_kv, depth_ptr, cfg.plan, {lp.c_wq, lp.c_wo});
            attn_out = control_fuse(attn_out, ctrl.fused_out, cfg.plan.fusion_mode, lp.zero);
            rec.control_probs = ctrl.probs;
            rec.control_heads = ctrl.per_head_out;
        }
        if (guided) result.records.push_back(rec);

        x = add(x, attn_out);
        Tensor h2 = mul(rmsnorm(x), lp.norm2_gain);
        x = add(x, matmul(tanh(matmul(h2, lp.mlp_w1)), lp.mlp_w2));
    }

    result.velocity = matmul(mul(rmsnorm(x), model.final_gain), model.act_out_w);
    return result;
}

ModelInput assemble_context(const std::vector<RenderedScene>& scenes) {
    if (scenes.empty()) throw std::invalid_argument("assemble_context: empty batch");
    const int b = static_cast<int>(scenes.size());
    const int p2 = scenes[0].image_tokens.dim(1);
    const int p = static_cast<int>(std::lround(std::sqrt(static_cast<double>(p2))));
    const int t_ctx = kViews * p2 + 1;
    const int fd = 16;

    Eigen::ArrayXd feats = Eigen::ArrayXd::Zero(static_cast<long>(b) * t_ctx * fd);
    for (int i = 0; i < b; i++) {
        const auto& img = scenes[static_cast<size_t>(i)].image_tokens.values();
        for (int v = 0; v < kViews; v++)
            for (int q = 0; q < p2; q++) {
                const long tok = (static_cast<long>(i) * t_ctx + v * p2 + q) * fd;
                for (int ch = 0; ch < kObsChannels; ch++)
                    feats[tok + ch] = img[(static_cast<long>(v) * p2 + q) * kObsChannels + ch];
                feats[tok + 8 + v] = 1.0;
                feats[tok + 11] = static_cast<double>(q / p) / p;
                feats[tok + 12] = static_cast<double>(q % p) / p;
                feats[tok + 13] = 1.0;
            }
        const auto& st = scenes[static_cast<size_t>(i)].state_vec.values();
        const long tok = (static_cast<long>(i) * t_ctx + kViews * p2) * fd;
        for (int k = 0; k < 6; k++) feats[tok + k] = st[k];
        feats[tok + 13] = 1.0;
        feats[tok + 15] = 1.0;  // state-token marker
    }

    ModelInput in;
    in.ctx_feats = Tensor::from_array({b, t_ctx, fd}, std::move(feats));
    in.image_key_index.resize(static_cast<size_t>(kViews) * p2);
    for (int k = 0; k < kViews * p2; k++) in.image_key_index[static_cast<size_t>(k)] = k;
    return in;
}

Tensor stack_depth_tokens(const std::vector<RenderedScene>& scenes) {
    const int b = static_cast<int>(scenes.size());
    const int t = scenes[0].depth_tokens.dim(0);
    const int d = scenes[0].depth_tokens.dim(1);
    Eigen::ArrayXd out(static_cast<long>(b) * t * d);
    for (int i = 0; i < b; i++)
        out.segment(static_cast<long>(i) * t * d, static_cast<long>(t) * d) =
            scenes[static_cast<size_t>(i)].depth_tokens.values();
    return Tensor::from_array({b, t, d}, std::move(out));
}

}  // namespace headspec
