#include "headspec/losses.hpp"

#include <cmath>
#include <stdexcept>

namespace headspec {

namespace {

constexpr double kLogClamp = 1e-6;   // delta in the grounding objective
constexpr double kMaskedMeanEps = 1e-9;
constexpr double kZeroTarget = 1e-12;  // soft-label entries below this are exact zeros

void require_unit_interval(double v, const char* name) {
    if (!(v >= 0.0 && v <= 1.0))
        throw std::invalid_argument(std::string(name) + " must lie in [0,1], got " +
                                    std::to_string(v));
}

}  // namespace

void GuidanceBatch::validate() const {
    if (skill_soft.defined()) {
        const int b = skill_soft.dim(0);
        const int k = skill_soft.dim(1);
        for (int i = 0; i < b; i++) {
            double sum = 0.0;
            for (int j = 0; j < k; j++) {
                const double y = skill_soft[i * k + j];
                if (y < 0.0)
                    throw std::invalid_argument("guidance batch: negative soft-label entry");
                sum += y;
            }
            if (std::abs(sum - 1.0) > 1e-9)
                throw std::invalid_argument("guidance batch: soft-label row " + std::to_string(i) +
                                            " sums to " + std::to_string(sum));
        }
    }
    if (patch_targets.defined() && view_valid.defined() && sample_valid.defined()) {
        const int b = patch_targets.dim(0);
        const int v = patch_targets.dim(1);
        const int p = patch_targets.dim(2);
        for (int i = 0; i < b; i++) {
            double m = 0.0;
            for (int j = 0; j < v; j++)
                for (int q = 0; q < p; q++)
                    m += patch_targets[(i * v + j) * p + q] * view_valid[i * v + j];
            const bool want = m > 0.0;
            if ((sample_valid[i] != 0.0) != want)
                throw std::invalid_argument("guidance batch: sample_valid[" + std::to_string(i) +
                                            "] inconsistent with masked targets");
        }
    }
    if (alpha >= 0.0) require_unit_interval(alpha, "alpha");
    if (gamma >= 0.0) require_unit_interval(gamma, "gamma");
    require_unit_interval(delta, "delta");
}

ObjectMass object_attention_mass(const Tensor& probs, const Tensor& patch_targets,
                                 const Tensor& view_valid,
                                 const std::vector<int>& image_key_index) {
    if (probs.ndim() != 4)
        throw std::invalid_argument("object mass: want probs [B,H,T_a,T_k], got " +
                                    shape_str(probs.shape()));
    if (image_key_index.empty())
        throw std::invalid_argument("object mass: no image keys mapped");
    if (probs.values().minCoeff() < -1e-12)
        throw std::logic_error("object mass: negative attention probability");
    const int b = probs.dim(0);
    const int v = patch_targets.dim(1);
    const int p2 = patch_targets.dim(2);
    if (static_cast<int>(image_key_index.size()) != v * p2)
        throw std::invalid_argument("object mass: image_key_index covers " +
                                    std::to_string(image_key_index.size()) + " keys, targets " +
                                    std::to_string(v * p2));

    // Eq. 2: head mean. Eq. 3: mass over masked image keys.
    Tensor pbar = reduce_mean(probs, {1});                        // [B, T_a, T_k]
    Tensor pimg = index_select(pbar, 2, image_key_index);         // [B, T_a, V*P2]
    Tensor m = mul(patch_targets, reshape(view_valid, {b, v, 1}));  // [B, V, P2]
    Tensor m_flat = reshape(m, {b, 1, v * p2});

    ObjectMass out;
    out.mass = reduce_sum(mul(pimg, m_flat), {2});  // [B, T_a]

    Eigen::ArrayXd valid(b);
    for (int i = 0; i < b; i++)
        valid[i] = m.values().segment(static_cast<long>(i) * v * p2, v * p2).sum() > 0.0 ? 1.0 : 0.0;
    out.valid = Tensor::from_array({b}, std::move(valid));
    return out;
}

Tensor object_grounding_loss(const Tensor& probs, const GuidanceBatch& batch,
                             const std::vector<int>& image_key_index) {
    ObjectMass om =
        object_attention_mass(probs, batch.patch_targets, batch.view_valid, image_key_index);
    const int b = om.mass.dim(0);
    const int t_a = om.mass.dim(1);
    Tensor loss = neg(safe_log(om.mass, kLogClamp));            // [B, T_a]
    Tensor masked = mul(loss, reshape(om.valid, {b, 1}));
    // Denominator sum_b v_b * |T_a|; the epsilon only guards the all-invalid
    // case so valid batches stay exact.
    const double denom = std::max(om.valid.values().sum() * t_a, kMaskedMeanEps);
    return mul_scalar(sum_all(masked), 1.0 / denom);
}

Tensor gaussian_prior_loss(const Tensor& probs, const Tensor& centroids, const Tensor& view_valid,
                           double sigma, const std::vector<int>& image_key_index, int grid_side) {
    if (sigma <= 0.0)
        throw std::invalid_argument("gaussian_prior_loss: sigma must be positive, got " +
                                    std::to_string(sigma));
    if (probs.ndim() != 4)
        throw std::invalid_argument("gaussian_prior_loss: want probs [B,H,T_a,T_k], got " +
                                    shape_str(probs.shape()));
    const int b = probs.dim(0);
    const int t_a = probs.dim(2);
    const int v = view_valid.dim(1);
    const int p2 = grid_side * grid_side;
    if (static_cast<int>(image_key_index.size()) != v * p2)
        throw std::invalid_argument("gaussian_prior_loss: key index / grid mismatch");
    for (int i = 0; i < b; i++)
        for (int j = 0; j < v; j++) {
            if (view_valid[i * v + j] == 0.0) continue;
            const double r0 = centroids[(i * v + j) * 2 + 0];
            const double c0 = centroids[(i * v + j) * 2 + 1];
            if (r0 < 0 || r0 > grid_side - 1 || c0 < 0 || c0 > grid_side - 1)
                throw std::invalid_argument("gaussian_prior_loss: centroid outside patch grid");
        }

    // Normalized heatmap over the joint (view, patch) grid, one Gaussian per
    // valid view; zero elsewhere.
    Eigen::ArrayXd g(static_cast<long>(b) * v * p2);
    Eigen::ArrayXd valid(b);
    for (int i = 0; i < b; i++) {
        double total = 0.0;
        for (int j = 0; j < v; j++) {
            const long base = (static_cast<long>(i) * v + j) * p2;
            if (view_valid[i * v + j] == 0.0) {
                g.segment(base, p2).setZero();
                continue;
            }
            const double r0 = centroids[(i * v + j) * 2 + 0];
            const double c0 = centroids[(i * v + j) * 2 + 1];
            for (int r = 0; r < grid_side; r++)
                for (int c = 0; c < grid_side; c++) {
                    const double d2 = (r - r0) * (r - r0) + (c - c0) * (c - c0);
                    g[base + r * grid_side + c] = std::exp(-d2 / (2.0 * sigma * sigma));
                }
            total += g.segment(base, p2).sum();
        }
        valid[i] = total > 0.0 ? 1.0 : 0.0;
        if (total > 0.0) g.segment(static_cast<long>(i) * v * p2, v * p2) /= total;
    }
    Tensor gt = Tensor::from_array({b, 1, v * p2}, std::move(g));
    Tensor vt = Tensor::from_array({b}, std::move(valid));

    Tensor pbar = reduce_mean(probs, {1});
    Tensor a = index_select(pbar, 2, image_key_index);  // [B, T_a, V*P2]

    // sum_vp G (log G - log A); G log G computed as constants with 0 log 0 = 0.
    Eigen::ArrayXd glogg_rows(b);
    for (int i = 0; i < b; i++) {
        double s = 0.0;
        for (int k = 0; k < v * p2; k++) {
            const double gv = gt.values()[static_cast<long>(i) * v * p2 + k];
            if (gv > 0.0) s += gv * std::log(gv);
        }
        glogg_rows[i] = s;
    }
    Tensor glogg = Tensor::from_array({b, 1}, std::move(glogg_rows));
    Tensor cross = reduce_sum(mul(gt, safe_log(a, 1e-300)), {2});  // [B, T_a]
    Tensor per_query = sub(glogg, cross);                          // broadcast [B, T_a]

    Tensor masked = mul(per_query, reshape(vt, {b, 1}));
    const double denom = std::max(vt.values().sum() * t_a, kMaskedMeanEps);
    return mul_scalar(sum_all(masked), 1.0 / denom);
}

Tensor pool_skill_features(const std::vector<Tensor>& attn_outs, const HeadPlan& plan) {
    if (plan.skill_heads.empty())
        throw std::invalid_argument("pool_skill_features: empty skill head set");
    if (attn_outs.empty())
        throw std::invalid_argument("pool_skill_features: need at least one guided layer");
    std::vector<Tensor> per_layer;
    for (const Tensor& t : attn_outs) {
        if (t.ndim() != 4)
            throw std::invalid_argument("pool_skill_features: want [B,H,T_a,d_h], got " +
                                        shape_str(t.shape()));
        Tensor sel = index_select(t, 1, plan.skill_heads);
        per_layer.push_back(reduce_mean(sel, {1, 2}));  // [B, d_h]
    }
    Tensor acc = per_layer[0];
    for (size_t i = 1; i < per_layer.size(); i++) acc = add(acc, per_layer[i]);
    return mul_scalar(acc, 1.0 / static_cast<double>(per_layer.size()));
}

Tensor skill_kl_loss(const Tensor& pooled, const Tensor& soft_target, const Tensor& w,
                     const Tensor& b) {
    if (pooled.ndim() != 2 || soft_target.ndim() != 2)
        throw std::invalid_argument("skill_kl_loss: want pooled [B,d] and targets [B,K]");
    const int k = soft_target.dim(1);
    if (w.ndim() != 2 || w.dim(1) != k || b.dim(0) != k)
        throw std::invalid_argument("skill_kl_loss: classifier K=" +
                                    std::to_string(w.defined() ? w.dim(1) : -1) +
                                    " does not match target K=" + std::to_string(k));
    if (w.dim(0) != pooled.dim(1))
        throw std::invalid_argument("skill_kl_loss: feature width mismatch");
    const int batch = pooled.dim(0);

    Tensor logits = add(matmul(pooled, w), b);
    Tensor logp = log_softmax_lastdim(logits);

    // y log y as a constant, with entries below 1e-12 treated as exact zeros.
    Eigen::ArrayXd ylogy(static_cast<long>(batch) * k);
    Eigen::ArrayXd ymask(static_cast<long>(batch) * k);
    for (long i = 0; i < ylogy.size(); i++) {
        const double y = soft_target.values()[i];
        if (y < kZeroTarget) {
            ylogy[i] = 0.0;
            ymask[i] = 0.0;
        } else {
            ylogy[i] = y * std::log(y);
            ymask[i] = y;
        }
    }
    Tensor ylogy_t = Tensor::from_array({batch, k}, std::move(ylogy));
    Tensor y_t = Tensor::from_array({batch, k}, std::move(ymask));
    Tensor kl = sub(sum_all(ylogy_t), sum_all(mul(y_t, logp)));
    return mul_scalar(kl, 1.0 / batch);
}

Tensor soft_accuracy(const Tensor& logits, const std::vector<int>& true_class) {
    if (logits.ndim() != 2)
        throw std::invalid_argument("soft_accuracy: want logits [B,K]");
    const int batch = logits.dim(0);
    const int k = logits.dim(1);
    if (static_cast<int>(true_class.size()) != batch)
        throw std::invalid_argument("soft_accuracy: class list length mismatch");
    Eigen::ArrayXd onehot = Eigen::ArrayXd::Zero(static_cast<long>(batch) * k);
    for (int i = 0; i < batch; i++) {
        if (true_class[static_cast<size_t>(i)] < 0 || true_class[static_cast<size_t>(i)] >= k)
            throw std::invalid_argument("soft_accuracy: class id out of range");
        onehot[static_cast<long>(i) * k + true_class[static_cast<size_t>(i)]] = 1.0;
    }
    Tensor pick = Tensor::from_array({batch, k}, std::move(onehot));
    Tensor p = softmax_lastdim(logits);
    return mul_scalar(sum_all(mul(p, pick)), 1.0 / batch);
}

Tensor flow_matching_loss(const Tensor& pred_velocity, const Tensor& action, const Tensor& noise,
                          double tau) {
    if (!(tau > 0.0 && tau < 1.0))
        throw std::invalid_argument("flow_matching_loss: tau must lie in (0,1), got " +
                                    std::to_string(tau));
    if (pred_velocity.shape() != action.shape() || action.shape() != noise.shape())
        throw std::invalid_argument("flow_matching_loss: shape mismatch pred " +
                                    shape_str(pred_velocity.shape()) + " action " +
                                    shape_str(action.shape()) + " noise " +
                                    shape_str(noise.shape()));
    Tensor u = sub(noise, action);  // velocity target of the linear path
    Tensor diff = sub(pred_velocity, u);
    return mean_all(mul(diff, diff));
}

Tensor total_loss(const Tensor& fm, const Tensor& obj, const Tensor& skill, double lambda_object,
                  double lambda_skill) {
    if (lambda_object < 0.0 || lambda_skill < 0.0)
        throw std::invalid_argument("total_loss: negative loss weight");
    return add(fm, add(mul_scalar(obj, lambda_object), mul_scalar(skill, lambda_skill)));
}

Tensor control_clamp_loss(const Tensor& measured, double target, double beta) {
    if (beta <= 0.0) throw std::invalid_argument("control_clamp_loss: beta must be positive");
    require_unit_interval(target, "control_clamp_loss target");
    const double m = measured.item();
    require_unit_interval(m, "control_clamp_loss measured");
    Tensor diff = add_scalar(measured, -target);
    if (std::abs(m - target) < beta) return mul_scalar(mul(diff, diff), 0.5 / beta);
    const double sign = m - target >= 0.0 ? 1.0 : -1.0;
    return add_scalar(mul_scalar(diff, sign), -0.5 * beta);
}

Tensor depth_feature_mix(const Tensor& depth_feat, const Tensor& noise, double delta) {
    if (!(delta >= 0.0 && delta <= 1.0))
        throw std::invalid_argument("depth_feature_mix: delta must lie in [0,1], got " +
                                    std::to_string(delta));
    if (depth_feat.shape() != noise.shape())
        throw std::invalid_argument("depth_feature_mix: shape mismatch " +
                                    shape_str(depth_feat.shape()) + " vs " +
                                    shape_str(noise.shape()));
    if (delta == 1.0) return depth_feat;
    if (delta == 0.0) return noise;
    return add(mul_scalar(depth_feat, delta), mul_scalar(noise, 1.0 - delta));
}

Tensor make_matched_noise(const Tensor& like, Rng& rng) {
    const double mean = like.values().mean();
    const double var = (like.values() - mean).square().sum() /
                       std::max<double>(1.0, static_cast<double>(like.size()));
    const double sd = std::sqrt(var);
    Eigen::ArrayXd out(like.size());
    for (long i = 0; i < out.size(); i++) out[i] = mean + sd * rng.normal();
    return Tensor::from_array(like.shape(), std::move(out));
}

}  // namespace headspec
