#pragma once

#include <array>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "headspec/labels.hpp"
#include "headspec/tensor.hpp"

namespace headspec {

enum class Difficulty { kEasy, kMedium, kHard, kPrecision };

Difficulty difficulty_from_string(const std::string& s);
std::string to_string(Difficulty d);

// Benchmark geometry. Three views are rendered: the primary plus two
// whole-cell shifted crops, so an object near the border can drop out of a
// view and exercise the unlabeled-view path.
constexpr int kGridSide = 8;
constexpr int kViews = 3;
constexpr int kObsChannels = 8;
constexpr int kMaskPixelsPerCell = 4;
constexpr int kChunkLen = 16;
constexpr int kSkillClasses = 4;
constexpr int kDepthFeatDim = 8;
constexpr double kGraspRadius = 0.5;
constexpr double kGoalRadius = 0.5;

enum SkillId { kSkillReach = 0, kSkillGrasp = 1, kSkillPlace = 2, kSkillNull = 3 };

// View shifts in whole cells (row, col).
constexpr int kViewShift[kViews][2] = {{0, 0}, {0, 1}, {1, 0}};

/// 2-D tabletop state. Positions are continuous in [0, grid_side); cell
/// (r, c) has its center at (r+0.5, c+0.5).
struct ToyScene {
    int grid_side = kGridSide;
    int object_row = 0, object_col = 0;
    int goal_row = 0, goal_col = 0;
    std::vector<std::array<int, 2>> distractors;
    std::vector<double> heights;  // grid_side^2, row-major
    double effector_r = 0.0, effector_c = 0.0;
    double object_r = 0.5, object_c = 0.5;  // continuous; tracks effector while held
    bool holding = false;
    int task_id = 0;
    // Precision tasks: the raised cell the grasp must be approached from.
    int ramp_row = -1, ramp_col = -1;
    Difficulty difficulty = Difficulty::kEasy;

    void validate() const;
    double height_at(int r, int c) const { return heights[static_cast<size_t>(r) * grid_side + c]; }
};

struct Episode {
    uint64_t seed = 0;
    Difficulty difficulty = Difficulty::kEasy;
    ToyScene initial;

    struct StepState {
        double effector_r, effector_c;
        bool holding;
        double object_r, object_c;
    };
    std::vector<StepState> states;                 // state before each action
    std::vector<std::array<double, 3>> actions;    // (vr, vc, gripper)
    std::vector<StageAnnotation> stages;
    // One pixel mask per stage and view, 32x32 bits row-major.
    std::vector<std::array<std::vector<uint8_t>, kViews>> stage_masks;

    int horizon() const { return static_cast<int>(actions.size()); }
    /// Scene snapshot at step t (t == horizon() gives the final state).
    ToyScene scene_at(int t) const;
};

/// Environment dynamics shared by expert generation and policy rollout.
struct ToyEnv {
    ToyScene scene;
    bool terminated = false;
    bool succeeded = false;
    bool grasped_ever = false;
    bool nan_action = false;
    int grasp_step = -1;
    int release_step = -1;
    int steps = 0;

    explicit ToyEnv(const ToyScene& s) : scene(s) {}
    void step(const std::array<double, 3>& action);
};

std::array<double, 3> expert_policy(const ToyScene& scene);

Episode generate_episode(uint64_t seed, Difficulty difficulty);

struct RolloutMetrics {
    bool success = false;
    double final_distance = 0.0;
    bool grasped = false;
    bool released = false;
    bool nan_action = false;
    int steps_used = 0;
};

/// Closed-loop evaluation: the policy maps the live scene to an action chunk;
/// chunks are executed fully, then the policy is queried again.
using ChunkPolicy = std::function<std::vector<std::array<double, 3>>(const ToyScene&)>;
RolloutMetrics rollout_success(const ChunkPolicy& policy, const ToyScene& scene, int horizon);

/// Deterministic observation rendering. Image tokens depend only on entity
/// layout (never heights); depth tokens depend only on heights.
struct RenderedScene {
    Tensor image_tokens;  // [V, P^2, kObsChannels]
    Tensor depth_tokens;  // [P^2, kDepthFeatDim]
    Tensor state_vec;     // [6]
};
RenderedScene render_patches(const ToyScene& scene);

/// Pixel mask (32x32) for a marked cell in a given view; used for stage masks.
std::vector<uint8_t> render_cell_mask(int cell_row, int cell_col, int view, int grid_side);

// Record-per-line persistence with a small manifest.
struct DatasetManifest {
    int schema_version = 1;
    uint64_t base_seed = 0;
    std::string difficulty;
    int count = 0;
    int grid_side = kGridSide;
};

void write_episodes(const std::string& path, const std::vector<Episode>& episodes);
std::vector<Episode> read_episodes(const std::string& path);
void write_manifest(const std::string& path, const DatasetManifest& m);
DatasetManifest read_manifest(const std::string& path);

}  // namespace headspec
