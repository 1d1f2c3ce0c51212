#pragma once

#include <cstdint>
#include <vector>

namespace headspec {

/// One temporal stage of an episode; [start, end) in timesteps.
struct StageAnnotation {
    int start = 0;
    int end = 0;
    int skill_id = 0;
    int target_object_id = 0;
};

struct PatchTargets {
    std::vector<double> indicators;  // grid_side^2 entries of 0/1
    bool view_valid = false;
};

/// Average-pool a binary pixel mask onto the patch grid and threshold:
/// m_p = 1 iff the foreground coverage of patch p is >= tau. A view with no
/// surviving patch is marked invalid (unlabeled).
PatchTargets mask_to_patch_targets(const std::vector<uint8_t>& pixel_mask, int rows, int cols,
                                   int grid_side, double tau);

/// Timesteps inside a stage interval get its skill id; all others get
/// null_id. Stages must not overlap.
std::vector<int> stage_to_timestep_labels(const std::vector<StageAnnotation>& stages, int horizon,
                                          int null_id);

/// Normalized histogram of ids over a segment; one-hot when a single class
/// appears.
std::vector<double> soft_skill_label(const std::vector<int>& skill_ids, int num_classes);

}  // namespace headspec
