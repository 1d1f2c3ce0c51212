#pragma once

#include <optional>
#include <vector>

#include "headspec/attention.hpp"
#include "headspec/rng.hpp"
#include "headspec/tensor.hpp"

namespace headspec {

/// Per-sample supervision payload for one training batch. All fields are
/// plain (untracked) tensors; gradients flow only through model outputs.
struct GuidanceBatch {
    Tensor patch_targets;  // [B, V, P2] binary object indicators
    Tensor view_valid;     // [B, V] 0/1
    Tensor sample_valid;   // [B] 0/1; false iff no labeled patch survives view masking
    Tensor skill_soft;     // [B, K] rows on the simplex
    std::vector<std::vector<int>> skill_ids;  // optional per-timestep ids per sample
    Tensor depth_tokens;   // [B, T_depth, d]

    // Ablation knobs; negative means inactive.
    double alpha = -1.0;
    double gamma = -1.0;
    double delta = 1.0;

    void validate() const;
};

/// Eq.-3 style object mass per action query plus the per-sample validity
/// flag. Shared by the grounding loss and the grounding-mass metric so the
/// two cannot diverge.
struct ObjectMass {
    Tensor mass;   // [B, T_a], tracked
    Tensor valid;  // [B], constant 0/1
};

ObjectMass object_attention_mass(const Tensor& probs, const Tensor& patch_targets,
                                 const Tensor& view_valid,
                                 const std::vector<int>& image_key_index);

/// Masked negative-log object mass over valid samples and all action queries.
/// probs: [B, |H_obj|, T_a, T_k] attention probabilities of the object heads.
Tensor object_grounding_loss(const Tensor& probs, const GuidanceBatch& batch,
                             const std::vector<int>& image_key_index);

/// KL(G || A) against a normalized per-view Gaussian heatmap centered at the
/// given patch-grid centroids, averaged over valid samples and queries.
/// centroids: [B, V, 2] (row, col) in patch units; ignored where view_valid=0.
Tensor gaussian_prior_loss(const Tensor& probs, const Tensor& centroids, const Tensor& view_valid,
                           double sigma, const std::vector<int>& image_key_index, int grid_side);

/// Mean of skill-head output features over guided layers, skill heads, and
/// action queries. attn_outs holds the guided layers' [B, H, T_a, d_h] blocks.
Tensor pool_skill_features(const std::vector<Tensor>& attn_outs, const HeadPlan& plan);

/// KL(y || softmax(pooled W + b)) with batchmean reduction; 0 log 0 := 0.
Tensor skill_kl_loss(const Tensor& pooled, const Tensor& soft_target, const Tensor& w,
                     const Tensor& b);

/// Mean predicted probability of the ground-truth class (the clamp target
/// for the skill ablation).
Tensor soft_accuracy(const Tensor& logits, const std::vector<int>& true_class);

/// MSE against the interpolation-path velocity target u = noise - action.
Tensor flow_matching_loss(const Tensor& pred_velocity, const Tensor& action, const Tensor& noise,
                          double tau);

Tensor total_loss(const Tensor& fm, const Tensor& obj, const Tensor& skill, double lambda_object,
                  double lambda_skill);

/// Smooth-L1 pull of a measured quantity toward a target; ablation-only.
Tensor control_clamp_loss(const Tensor& measured, double target, double beta);

/// Convex mix of depth features with statistics-matched noise.
Tensor depth_feature_mix(const Tensor& depth_feat, const Tensor& noise, double delta);

/// I.i.d. normal noise with the empirical mean/std of `like`.
Tensor make_matched_noise(const Tensor& like, Rng& rng);

}  // namespace headspec
