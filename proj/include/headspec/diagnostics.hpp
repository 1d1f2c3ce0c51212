#pragma once

#include <Eigen/Dense>
#include <string>
#include <vector>

#include "headspec/tensor.hpp"

namespace headspec {

/// One evaluation row. Quantities that are undefined for a batch (e.g. no
/// valid samples) are NaN, never silently zero.
struct MetricsRecord {
    int step = 0;
    double loss_fm = 0.0;
    double loss_obj = 0.0;
    double loss_skill = 0.0;
    double grounding_mass = 0.0;
    double argmax_hit = 0.0;
    double probe_acc = 0.0;
    double cluster_sep = 0.0;
    double success_rate = 0.0;
};

/// Mean in-mask attention mass over valid samples and queries. Shares the
/// mass computation with the grounding loss. NaN when no sample is valid.
double grounding_mass(const Tensor& probs, const Tensor& patch_targets, const Tensor& view_valid,
                      const std::vector<int>& image_key_index);

/// Fraction of valid queries whose top image key (ties to the lowest index)
/// falls inside the mask. NaN when no sample is valid.
double argmax_hit(const Tensor& probs, const Tensor& patch_targets, const Tensor& view_valid,
                  const std::vector<int>& image_key_index);

struct ProbeResult {
    Eigen::MatrixXd weights;  // [d, K]
    Eigen::VectorXd bias;     // [K]
    double accuracy = 0.0;
    bool degenerate = false;  // single-class label set
};

/// Multinomial logistic regression on frozen features via full-batch
/// gradient descent; accuracy is measured on a fixed 80/20 held-out split.
ProbeResult train_linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                               int num_classes, int epochs = 500, double lr = 0.1);

/// Mean silhouette score with Euclidean distances. Singleton groups are
/// dropped (flagged via had_singletons); fewer than two usable groups is an
/// error. All-identical points score 0 by convention.
double cluster_separation(const Eigen::MatrixXd& features, const std::vector<int>& group_ids,
                          bool* had_singletons = nullptr);

/// Serialize one CSV row (matches the documented header order, then
/// config_hash and seed).
std::string metrics_csv_header();
std::string metrics_csv_row(const MetricsRecord& r, const std::string& config_hash, uint64_t seed);

}  // namespace headspec
