#include "headspec/bench.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <sstream>
#include <stdexcept>

#include "headspec/rng.hpp"

namespace headspec {

namespace {

constexpr int kMaskSide = kGridSide * kMaskPixelsPerCell;  // 32
constexpr int kExpertCap = 200;
constexpr int kTrailPad = 4;
constexpr double kExpertSpeed = 0.8;
constexpr double kApproachDist = 0.75;

double dist2d(double r0, double c0, double r1, double c1) {
    const double dr = r0 - r1, dc = c0 - c1;
    return std::sqrt(dr * dr + dc * dc);
}

struct Vec2 {
    double r, c;
};

Vec2 ramp_dir(const ToyScene& s) {
    // Unit axis direction from the object cell toward the ramp cell.
    return {static_cast<double>(s.ramp_row - s.object_row),
            static_cast<double>(s.ramp_col - s.object_col)};
}

// Approach is accepted when the effector sits in the ramp-side quadrant of
// the object: the ramp-axis component dominates the perpendicular one.
bool approach_from_ramp(const ToyScene& s, double er, double ec) {
    const Vec2 dir = ramp_dir(s);
    const double dr = er - s.object_r;
    const double dc = ec - s.object_c;
    const double along = dr * dir.r + dc * dir.c;
    const double perp = std::abs(dr * dir.c - dc * dir.r);
    return along > perp && along > 1e-9;
}

int distractor_count(Difficulty d) {
    switch (d) {
        case Difficulty::kEasy: return 0;
        case Difficulty::kMedium: return 2;
        case Difficulty::kHard: return 3;
        case Difficulty::kPrecision: return 1;
    }
    return 0;
}

double height_variance(Difficulty d) {
    switch (d) {
        case Difficulty::kEasy: return 0.0;
        case Difficulty::kMedium: return 0.3;
        case Difficulty::kHard: return 0.6;
        case Difficulty::kPrecision: return 0.25;
    }
    return 0.0;
}

const Eigen::ArrayXd& frozen_depth_weights() {
    // 3x3 height window -> feature map; frozen at process start so rendering
    // is a pure function of the scene.
    static const Eigen::ArrayXd w = [] {
        Rng rng(0x4445505448ULL);
        Eigen::ArrayXd out(9 * kDepthFeatDim + kDepthFeatDim);
        for (long i = 0; i < out.size(); i++) out[i] = rng.uniform(-0.6, 0.6);
        return out;
    }();
    return w;
}

}  // namespace

Difficulty difficulty_from_string(const std::string& s) {
    if (s == "easy") return Difficulty::kEasy;
    if (s == "medium") return Difficulty::kMedium;
    if (s == "hard") return Difficulty::kHard;
    if (s == "precision") return Difficulty::kPrecision;
    throw std::invalid_argument("difficulty: unknown value '" + s + "'");
}

std::string to_string(Difficulty d) {
    switch (d) {
        case Difficulty::kEasy: return "easy";
        case Difficulty::kMedium: return "medium";
        case Difficulty::kHard: return "hard";
        case Difficulty::kPrecision: return "precision";
    }
    throw std::invalid_argument("difficulty: unknown enum value");
}

void ToyScene::validate() const {
    auto in_grid = [&](int r, int c) { return r >= 0 && r < grid_side && c >= 0 && c < grid_side; };
    if (!in_grid(object_row, object_col) || !in_grid(goal_row, goal_col))
        throw std::invalid_argument("scene: object/goal outside grid");
    if (object_row == goal_row && object_col == goal_col)
        throw std::invalid_argument("scene: object and goal share a cell");
    for (const auto& d : distractors)
        if (!in_grid(d[0], d[1])) throw std::invalid_argument("scene: distractor outside grid");
    if (static_cast<int>(heights.size()) != grid_side * grid_side)
        throw std::invalid_argument("scene: height map size mismatch");
}

void ToyEnv::step(const std::array<double, 3>& action) {
    if (terminated) return;
    for (double a : action)
        if (!std::isfinite(a)) {
            nan_action = true;
            terminated = true;
            return;
        }
    const double limit = static_cast<double>(scene.grid_side);
    const double vr = std::clamp(action[0], -1.0, 1.0);
    const double vc = std::clamp(action[1], -1.0, 1.0);
    scene.effector_r = std::clamp(scene.effector_r + vr, 0.0, limit);
    scene.effector_c = std::clamp(scene.effector_c + vc, 0.0, limit);
    if (scene.holding) {
        scene.object_r = scene.effector_r;
        scene.object_c = scene.effector_c;
    }

    const double grip = action[2];
    if (grip > 0.5 && !scene.holding) {
        const double d =
            dist2d(scene.effector_r, scene.effector_c, scene.object_r, scene.object_c);
        if (d <= kGraspRadius) {
            if (scene.ramp_row >= 0 &&
                !approach_from_ramp(scene, scene.effector_r, scene.effector_c)) {
                // Wrong-side approach onto the pedestal: collision ends the trial.
                terminated = true;
            } else {
                scene.holding = true;
                grasped_ever = true;
                grasp_step = steps;
                scene.object_r = scene.effector_r;
                scene.object_c = scene.effector_c;
            }
        }
    } else if (grip < -0.5 && scene.holding) {
        scene.holding = false;
        release_step = steps;
        const double d = dist2d(scene.object_r, scene.object_c, scene.goal_row + 0.5,
                                scene.goal_col + 0.5);
        if (d <= kGoalRadius) {
            succeeded = true;
            terminated = true;
        }
    }
    steps++;
}

std::array<double, 3> expert_policy(const ToyScene& scene) {
    auto move_to = [&](double tr, double tc) -> std::array<double, 3> {
        const double dr = tr - scene.effector_r;
        const double dc = tc - scene.effector_c;
        const double d = std::sqrt(dr * dr + dc * dc);
        if (d < 1e-12) return {0.0, 0.0, 0.0};
        const double step = std::min(kExpertSpeed, d);
        return {dr / d * step, dc / d * step, 0.0};
    };

    if (!scene.holding) {
        const double d =
            dist2d(scene.effector_r, scene.effector_c, scene.object_r, scene.object_c);
        const bool precision = scene.ramp_row >= 0;
        const bool aligned =
            !precision || approach_from_ramp(scene, scene.effector_r, scene.effector_c);
        if (d <= 0.45 && aligned) return {0.0, 0.0, 1.0};
        if (precision && !aligned) {
            const Vec2 dir = ramp_dir(scene);
            return move_to(scene.object_r + dir.r * kApproachDist,
                           scene.object_c + dir.c * kApproachDist);
        }
        return move_to(scene.object_r, scene.object_c);
    }
    const double gr = scene.goal_row + 0.5;
    const double gc = scene.goal_col + 0.5;
    if (dist2d(scene.effector_r, scene.effector_c, gr, gc) <= 0.4) return {0.0, 0.0, -1.0};
    return move_to(gr, gc);
}

std::vector<uint8_t> render_cell_mask(int cell_row, int cell_col, int view, int grid_side) {
    std::vector<uint8_t> mask(static_cast<size_t>(kMaskSide) * kMaskSide, 0);
    const int vr = cell_row + kViewShift[view][0];
    const int vc = cell_col + kViewShift[view][1];
    if (vr < 0 || vr >= grid_side || vc < 0 || vc >= grid_side) return mask;
    const int r0 = vr * kMaskPixelsPerCell;
    const int c0 = vc * kMaskPixelsPerCell;
    auto put = [&](int r, int c) {
        if (r >= 0 && r < kMaskSide && c >= 0 && c < kMaskSide)
            mask[static_cast<size_t>(r) * kMaskSide + c] = 1;
    };
    for (int r = r0; r < r0 + kMaskPixelsPerCell; r++)
        for (int c = c0; c < c0 + kMaskPixelsPerCell; c++) put(r, c);
    // One-pixel fringe into each neighbor cell: 4/16 coverage there, so the
    // patch threshold has something to decide.
    for (int c = c0; c < c0 + kMaskPixelsPerCell; c++) {
        put(r0 - 1, c);
        put(r0 + kMaskPixelsPerCell, c);
    }
    for (int r = r0; r < r0 + kMaskPixelsPerCell; r++) {
        put(r, c0 - 1);
        put(r, c0 + kMaskPixelsPerCell);
    }
    return mask;
}

Episode generate_episode(uint64_t seed, Difficulty difficulty) {
    Rng rng(mix_seed(seed, static_cast<uint64_t>(difficulty)));
    const int p = kGridSide;

    ToyScene s;
    s.grid_side = p;
    s.difficulty = difficulty;
    s.heights.assign(static_cast<size_t>(p) * p, 0.0);

    const int obj_cell = rng.below(p * p);
    s.object_row = obj_cell / p;
    s.object_col = obj_cell % p;
    int goal_cell = rng.below(p * p);
    while (goal_cell == obj_cell) goal_cell = rng.below(p * p);
    s.goal_row = goal_cell / p;
    s.goal_col = goal_cell % p;

    const int n_distract = distractor_count(difficulty);
    while (static_cast<int>(s.distractors.size()) < n_distract) {
        const int cell = rng.below(p * p);
        if (cell == obj_cell || cell == goal_cell) continue;
        bool dup = false;
        for (const auto& d : s.distractors)
            if (d[0] == cell / p && d[1] == cell % p) dup = true;
        if (!dup) s.distractors.push_back({cell / p, cell % p});
    }

    const double hv = height_variance(difficulty);
    for (auto& h : s.heights) h = hv * rng.uniform();
    if (difficulty == Difficulty::kPrecision) {
        std::vector<std::array<int, 2>> candidates;
        const int dr[4] = {-1, 1, 0, 0};
        const int dc[4] = {0, 0, -1, 1};
        for (int i = 0; i < 4; i++) {
            const int nr = s.object_row + dr[i];
            const int nc = s.object_col + dc[i];
            if (nr >= 0 && nr < p && nc >= 0 && nc < p) candidates.push_back({nr, nc});
        }
        const auto ramp = candidates[static_cast<size_t>(rng.below(static_cast<int>(candidates.size())))];
        s.ramp_row = ramp[0];
        s.ramp_col = ramp[1];
        s.heights[static_cast<size_t>(s.object_row) * p + s.object_col] = 1.0;
        s.heights[static_cast<size_t>(s.ramp_row) * p + s.ramp_col] = 1.0;
        for (int i = 0; i < 4; i++) {
            const int nr = s.object_row + dr[i];
            const int nc = s.object_col + dc[i];
            if (nr == s.ramp_row && nc == s.ramp_col) continue;
            if (nr >= 0 && nr < p && nc >= 0 && nc < p)
                s.heights[static_cast<size_t>(nr) * p + nc] =
                    std::min(s.heights[static_cast<size_t>(nr) * p + nc], 0.1);
        }
    }

    s.object_r = s.object_row + 0.5;
    s.object_c = s.object_col + 0.5;
    do {
        s.effector_r = rng.uniform() * p;
        s.effector_c = rng.uniform() * p;
    } while (dist2d(s.effector_r, s.effector_c, s.object_r, s.object_c) < 1.5);
    s.validate();

    Episode ep;
    ep.seed = seed;
    ep.difficulty = difficulty;
    ep.initial = s;

    ToyEnv env(s);
    while (!env.terminated && env.steps < kExpertCap) {
        ep.states.push_back({env.scene.effector_r, env.scene.effector_c, env.scene.holding,
                             env.scene.object_r, env.scene.object_c});
        const auto a = expert_policy(env.scene);
        ep.actions.push_back(a);
        env.step(a);
    }
    if (!env.succeeded)
        throw std::logic_error("generate_episode: expert failed on seed " + std::to_string(seed));

    int pad = kTrailPad;
    if (ep.horizon() + pad < kChunkLen) pad = kChunkLen - ep.horizon();
    for (int i = 0; i < pad; i++) {
        ep.states.push_back({env.scene.effector_r, env.scene.effector_c, env.scene.holding,
                             env.scene.object_r, env.scene.object_c});
        ep.actions.push_back({0.0, 0.0, 0.0});
    }

    const int t_grasp = env.grasp_step;
    const int t_release = env.release_step;
    ep.stages.push_back({0, t_grasp, kSkillReach, 0});
    ep.stages.push_back({t_grasp, t_grasp + 1, kSkillGrasp, 0});
    ep.stages.push_back({t_grasp + 1, t_release + 1, kSkillPlace, 1});

    for (const auto& st : ep.stages) {
        const int anchor_r = st.skill_id == kSkillPlace ? s.goal_row : s.object_row;
        const int anchor_c = st.skill_id == kSkillPlace ? s.goal_col : s.object_col;
        std::array<std::vector<uint8_t>, kViews> views;
        for (int v = 0; v < kViews; v++)
            views[static_cast<size_t>(v)] = render_cell_mask(anchor_r, anchor_c, v, p);
        ep.stage_masks.push_back(std::move(views));
    }
    return ep;
}

ToyScene Episode::scene_at(int t) const {
    if (t < 0 || t >= static_cast<int>(states.size()))
        throw std::invalid_argument("episode: timestep " + std::to_string(t) + " out of range");
    ToyScene s = initial;
    const StepState& st = states[static_cast<size_t>(t)];
    s.effector_r = st.effector_r;
    s.effector_c = st.effector_c;
    s.holding = st.holding;
    s.object_r = st.object_r;
    s.object_c = st.object_c;
    return s;
}

RolloutMetrics rollout_success(const ChunkPolicy& policy, const ToyScene& scene, int horizon) {
    if (horizon < 1) throw std::invalid_argument("rollout_success: horizon must be >= 1");
    ToyEnv env(scene);
    while (!env.terminated && env.steps < horizon) {
        const auto chunk = policy(env.scene);
        if (chunk.empty()) break;
        for (const auto& a : chunk) {
            if (env.terminated || env.steps >= horizon) break;
            env.step(a);
        }
    }
    RolloutMetrics m;
    m.success = env.succeeded;
    m.final_distance = dist2d(env.scene.object_r, env.scene.object_c, scene.goal_row + 0.5,
                              scene.goal_col + 0.5);
    m.grasped = env.grasped_ever;
    m.released = env.release_step >= 0;
    m.nan_action = env.nan_action;
    m.steps_used = env.steps;
    return m;
}

RenderedScene render_patches(const ToyScene& scene) {
    const int p = scene.grid_side;
    const int p2 = p * p;
    Eigen::ArrayXd img = Eigen::ArrayXd::Zero(static_cast<long>(kViews) * p2 * kObsChannels);

    const int obj_r = std::min(p - 1, static_cast<int>(scene.object_r));
    const int obj_c = std::min(p - 1, static_cast<int>(scene.object_c));
    const int eff_r = std::min(p - 1, static_cast<int>(scene.effector_r));
    const int eff_c = std::min(p - 1, static_cast<int>(scene.effector_c));

    for (int v = 0; v < kViews; v++)
        for (int r = 0; r < p; r++)
            for (int c = 0; c < p; c++) {
                const long base =
                    ((static_cast<long>(v) * p + r) * p + c) * kObsChannels;
                img[base + 5] = 1.0;  // background
                const int sr = r - kViewShift[v][0];
                const int sc = c - kViewShift[v][1];
                if (sr < 0 || sr >= p || sc < 0 || sc >= p) continue;
                if (sr == obj_r && sc == obj_c) img[base + 0] = 1.0;
                if (sr == scene.goal_row && sc == scene.goal_col) img[base + 1] = 1.0;
                for (const auto& d : scene.distractors)
                    if (d[0] == sr && d[1] == sc) img[base + 2] = 1.0;
                const double dd =
                    dist2d(sr + 0.5, sc + 0.5, scene.effector_r, scene.effector_c);
                img[base + 3] = std::max(0.0, 1.0 - dd / 1.5);
                if (sr == eff_r && sc == eff_c) img[base + 4] = 1.0;
            }

    const Eigen::ArrayXd& wf = frozen_depth_weights();
    Eigen::ArrayXd dep = Eigen::ArrayXd::Zero(static_cast<long>(p2) * kDepthFeatDim);
    for (int r = 0; r < p; r++)
        for (int c = 0; c < p; c++) {
            double window[9];
            int wi = 0;
            for (int dr = -1; dr <= 1; dr++)
                for (int dc = -1; dc <= 1; dc++) {
                    const int nr = r + dr, nc = c + dc;
                    window[wi++] = (nr >= 0 && nr < p && nc >= 0 && nc < p)
                                       ? scene.height_at(nr, nc)
                                       : 0.0;
                }
            for (int f = 0; f < kDepthFeatDim; f++) {
                double acc = wf[9 * kDepthFeatDim + f];  // bias
                for (int k = 0; k < 9; k++) acc += wf[k * kDepthFeatDim + f] * window[k];
                dep[(static_cast<long>(r) * p + c) * kDepthFeatDim + f] = acc;
            }
        }

    RenderedScene out;
    out.image_tokens = Tensor::from_array({kViews, p2, kObsChannels}, std::move(img));
    out.depth_tokens = Tensor::from_array({p2, kDepthFeatDim}, std::move(dep));
    out.state_vec = Tensor::from(
        {6}, {scene.effector_r / p, scene.effector_c / p, scene.holding ? 1.0 : 0.0, 1.0, 0.0, 0.0});
    return out;
}

// ---------------------------------------------------------------------------
// Persistence. One episode per line; field order is documented in the README
// and frozen by schema_version.

namespace {

void put_double(std::ostringstream& os, double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    os << buf << ' ';
}

std::string mask_to_hex(const std::vector<uint8_t>& mask) {
    std::string out;
    out.reserve(mask.size() / 4);
    for (size_t i = 0; i < mask.size(); i += 4) {
        int nib = (mask[i] << 3) | (mask[i + 1] << 2) | (mask[i + 2] << 1) | mask[i + 3];
        out += "0123456789abcdef"[nib];
    }
    return out;
}

std::vector<uint8_t> hex_to_mask(const std::string& hex) {
    std::vector<uint8_t> out;
    out.reserve(hex.size() * 4);
    for (char ch : hex) {
        int nib;
        if (ch >= '0' && ch <= '9') nib = ch - '0';
        else if (ch >= 'a' && ch <= 'f') nib = ch - 'a' + 10;
        else throw std::runtime_error("dataset: bad mask hex digit");
        out.push_back(static_cast<uint8_t>((nib >> 3) & 1));
        out.push_back(static_cast<uint8_t>((nib >> 2) & 1));
        out.push_back(static_cast<uint8_t>((nib >> 1) & 1));
        out.push_back(static_cast<uint8_t>(nib & 1));
    }
    return out;
}

}  // namespace

void write_episodes(const std::string& path, const std::vector<Episode>& episodes) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot open for write: " + path);
    for (const Episode& ep : episodes) {
        std::ostringstream os;
        os << "E1 " << ep.seed << ' ' << to_string(ep.difficulty) << ' ';
        const ToyScene& s = ep.initial;
        os << s.grid_side << ' ' << s.object_row << ' ' << s.object_col << ' ' << s.goal_row
           << ' ' << s.goal_col << ' ' << s.ramp_row << ' ' << s.ramp_col << ' ' << s.task_id
           << ' ';
        os << s.distractors.size() << ' ';
        for (const auto& d : s.distractors) os << d[0] << ' ' << d[1] << ' ';
        put_double(os, s.effector_r);
        put_double(os, s.effector_c);
        for (double h : s.heights) put_double(os, h);
        os << ep.horizon() << ' ';
        for (const auto& a : ep.actions) {
            put_double(os, a[0]);
            put_double(os, a[1]);
            put_double(os, a[2]);
        }
        for (const auto& st : ep.states) {
            put_double(os, st.effector_r);
            put_double(os, st.effector_c);
            os << (st.holding ? 1 : 0) << ' ';
            put_double(os, st.object_r);
            put_double(os, st.object_c);
        }
        os << ep.stages.size() << ' ';
        for (const auto& st : ep.stages)
            os << st.start << ' ' << st.end << ' ' << st.skill_id << ' ' << st.target_object_id
               << ' ';
        for (const auto& views : ep.stage_masks)
            for (const auto& m : views) os << mask_to_hex(m) << ' ';
        f << os.str() << '\n';
    }
}

std::vector<Episode> read_episodes(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot open: " + path);
    std::vector<Episode> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        std::istringstream is(line);
        std::string tag;
        is >> tag;
        if (tag != "E1") throw std::runtime_error("dataset: unknown record tag '" + tag + "'");
        Episode ep;
        std::string diff;
        is >> ep.seed >> diff;
        ep.difficulty = difficulty_from_string(diff);
        ToyScene& s = ep.initial;
        s.difficulty = ep.difficulty;
        is >> s.grid_side >> s.object_row >> s.object_col >> s.goal_row >> s.goal_col >>
            s.ramp_row >> s.ramp_col >> s.task_id;
        size_t nd;
        is >> nd;
        s.distractors.resize(nd);
        for (auto& d : s.distractors) is >> d[0] >> d[1];
        is >> s.effector_r >> s.effector_c;
        s.heights.resize(static_cast<size_t>(s.grid_side) * s.grid_side);
        for (double& h : s.heights) is >> h;
        s.object_r = s.object_row + 0.5;
        s.object_c = s.object_col + 0.5;
        int horizon;
        is >> horizon;
        ep.actions.resize(static_cast<size_t>(horizon));
        for (auto& a : ep.actions) is >> a[0] >> a[1] >> a[2];
        ep.states.resize(static_cast<size_t>(horizon));
        for (auto& st : ep.states) {
            int holding;
            is >> st.effector_r >> st.effector_c >> holding >> st.object_r >> st.object_c;
            st.holding = holding != 0;
        }
        size_t ns;
        is >> ns;
        ep.stages.resize(ns);
        for (auto& st : ep.stages) is >> st.start >> st.end >> st.skill_id >> st.target_object_id;
        ep.stage_masks.resize(ns);
        for (auto& views : ep.stage_masks)
            for (auto& m : views) {
                std::string hex;
                is >> hex;
                m = hex_to_mask(hex);
            }
        if (!is) throw std::runtime_error("dataset: truncated episode record");
        out.push_back(std::move(ep));
    }
    return out;
}

void write_manifest(const std::string& path, const DatasetManifest& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("dataset: cannot open for write: " + path);
    f << "schema_version = " << m.schema_version << "\n";
    f << "base_seed = " << m.base_seed << "\n";
    f << "difficulty = " << m.difficulty << "\n";
    f << "count = " << m.count << "\n";
    f << "grid_side = " << m.grid_side << "\n";
}

DatasetManifest read_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("dataset: cannot open manifest: " + path);
    DatasetManifest m;
    std::string line;
    while (std::getline(f, line)) {
        std::istringstream is(line);
        std::string key, eq;
        is >> key >> eq;
        if (key == "schema_version") is >> m.schema_version;
        else if (key == "base_seed") is >> m.base_seed;
        else if (key == "difficulty") is >> m.difficulty;
        else if (key == "count") is >> m.count;
        else if (key == "grid_side") is >> m.grid_side;
    }
    return m;
}

}  // namespace headspec
