#include "headspec/labels.hpp"

#include <algorithm>
#include <stdexcept>
#include <string>

namespace headspec {

PatchTargets mask_to_patch_targets(const std::vector<uint8_t>& pixel_mask, int rows, int cols,
                                   int grid_side, double tau) {
    if (grid_side <= 0) throw std::invalid_argument("mask_to_patch_targets: bad grid side");
    if (rows <= 0 || cols <= 0 || rows % grid_side != 0 || cols % grid_side != 0)
        throw std::invalid_argument("mask_to_patch_targets: image " + std::to_string(rows) + "x" +
                                    std::to_string(cols) + " not divisible by grid side " +
                                    std::to_string(grid_side));
    if (static_cast<int>(pixel_mask.size()) != rows * cols)
        throw std::invalid_argument("mask_to_patch_targets: pixel buffer size mismatch");
    const int ph = rows / grid_side;
    const int pw = cols / grid_side;
    PatchTargets out;
    out.indicators.assign(static_cast<size_t>(grid_side) * grid_side, 0.0);
    for (int pr = 0; pr < grid_side; pr++)
        for (int pc = 0; pc < grid_side; pc++) {
            long fg = 0;
            for (int r = pr * ph; r < (pr + 1) * ph; r++)
                for (int c = pc * pw; c < (pc + 1) * pw; c++)
                    fg += pixel_mask[static_cast<size_t>(r) * cols + c] ? 1 : 0;
            const double coverage = static_cast<double>(fg) / (ph * pw);
            if (coverage >= tau) {
                out.indicators[static_cast<size_t>(pr) * grid_side + pc] = 1.0;
                out.view_valid = true;
            }
        }
    return out;
}

std::vector<int> stage_to_timestep_labels(const std::vector<StageAnnotation>& stages, int horizon,
                                          int null_id) {
    if (horizon <= 0) throw std::invalid_argument("stage_to_timestep_labels: bad horizon");
    std::vector<StageAnnotation> sorted = stages;
    std::sort(sorted.begin(), sorted.end(),
              [](const StageAnnotation& a, const StageAnnotation& b) { return a.start < b.start; });
    for (size_t i = 0; i < sorted.size(); i++) {
        const auto& s = sorted[i];
        if (s.start >= s.end)
            throw std::invalid_argument("stage_to_timestep_labels: empty stage [" +
                                        std::to_string(s.start) + "," + std::to_string(s.end) + ")");
        if (s.start < 0 || s.end > horizon)
            throw std::invalid_argument("stage_to_timestep_labels: stage outside [0," +
                                        std::to_string(horizon) + ")");
        if (i > 0 && sorted[i - 1].end > s.start)
            throw std::invalid_argument("stage_to_timestep_labels: overlapping stages at t=" +
                                        std::to_string(s.start));
    }
    std::vector<int> ids(static_cast<size_t>(horizon), null_id);
    for (const auto& s : sorted)
        for (int t = s.start; t < s.end; t++) ids[static_cast<size_t>(t)] = s.skill_id;
    return ids;
}

std::vector<double> soft_skill_label(const std::vector<int>& skill_ids, int num_classes) {
    if (skill_ids.empty())
        throw std::invalid_argument("soft_skill_label: empty segment");
    if (num_classes <= 0) throw std::invalid_argument("soft_skill_label: bad class count");
    std::vector<double> hist(static_cast<size_t>(num_classes), 0.0);
    for (int id : skill_ids) {
        if (id < 0 || id >= num_classes)
            throw std::invalid_argument("soft_skill_label: id " + std::to_string(id) +
                                        " outside [0," + std::to_string(num_classes) + ")");
        hist[static_cast<size_t>(id)] += 1.0;
    }
    for (double& h : hist) h /= static_cast<double>(skill_ids.size());
    return hist;
}

}  // namespace headspec
