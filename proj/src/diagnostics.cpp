#include "headspec/diagnostics.hpp"

#include <cmath>
#include <cstdio>
#include <limits>
#include <map>
#include <set>
#include <stdexcept>

#include "headspec/losses.hpp"
#include "headspec/ops.hpp"
#include "headspec/rng.hpp"

namespace headspec {

double grounding_mass(const Tensor& probs, const Tensor& patch_targets, const Tensor& view_valid,
                      const std::vector<int>& image_key_index) {
    NoGradGuard ng;
    ObjectMass om = object_attention_mass(probs, patch_targets, view_valid, image_key_index);
    const int b = om.mass.dim(0);
    const int t_a = om.mass.dim(1);
    double sum = 0.0;
    int n = 0;
    for (int i = 0; i < b; i++) {
        if (om.valid[i] == 0.0) continue;
        for (int t = 0; t < t_a; t++) sum += om.mass[i * t_a + t];
        n += t_a;
    }
    if (n == 0) return std::numeric_limits<double>::quiet_NaN();
    return sum / n;
}

double argmax_hit(const Tensor& probs, const Tensor& patch_targets, const Tensor& view_valid,
                  const std::vector<int>& image_key_index) {
    NoGradGuard ng;
    if (probs.ndim() != 4)
        throw std::invalid_argument("argmax_hit: want probs [B,H,T_a,T_k], got " +
                                    shape_str(probs.shape()));
    if (image_key_index.empty()) throw std::invalid_argument("argmax_hit: no image keys mapped");
    const int b = probs.dim(0);
    const int v = patch_targets.dim(1);
    const int p2 = patch_targets.dim(2);
    const int t_a = probs.dim(2);
    const int keys = static_cast<int>(image_key_index.size());
    if (keys != v * p2) throw std::invalid_argument("argmax_hit: key index / target mismatch");

    Tensor pbar = reduce_mean(probs, {1});
    Tensor pimg = index_select(pbar, 2, image_key_index);  // [B, T_a, keys]

    int hits = 0, total = 0;
    for (int i = 0; i < b; i++) {
        double mask_sum = 0.0;
        for (int j = 0; j < v; j++)
            for (int q = 0; q < p2; q++)
                mask_sum += patch_targets[(i * v + j) * p2 + q] * view_valid[i * v + j];
        if (mask_sum <= 0.0) continue;
        for (int t = 0; t < t_a; t++) {
            int best = 0;
            double best_v = pimg[(i * t_a + t) * keys];
            for (int k = 1; k < keys; k++) {
                const double x = pimg[(i * t_a + t) * keys + k];
                if (x > best_v) {  // strict: ties resolve to the lowest index
                    best_v = x;
                    best = k;
                }
            }
            const int view = best / p2;
            const int patch = best % p2;
            const bool in_mask = patch_targets[(i * v + view) * p2 + patch] > 0.0 &&
                                 view_valid[i * v + view] > 0.0;
            hits += in_mask ? 1 : 0;
            total++;
        }
    }
    if (total == 0) return std::numeric_limits<double>::quiet_NaN();
    return static_cast<double>(hits) / total;
}

ProbeResult train_linear_probe(const Eigen::MatrixXd& features, const std::vector<int>& labels,
                               int num_classes, int epochs, double lr) {
    const int n = static_cast<int>(features.rows());
    const int d = static_cast<int>(features.cols());
    if (static_cast<int>(labels.size()) != n)
        throw std::invalid_argument("linear probe: label count mismatch");
    if (n < num_classes) throw std::invalid_argument("linear probe: need at least K samples");
    for (int y : labels)
        if (y < 0 || y >= num_classes)
            throw std::invalid_argument("linear probe: label out of range");

    ProbeResult out;
    out.weights = Eigen::MatrixXd::Zero(d, num_classes);
    out.bias = Eigen::VectorXd::Zero(num_classes);

    std::set<int> distinct(labels.begin(), labels.end());
    if (distinct.size() < 2) {
        out.degenerate = true;
        out.accuracy = 1.0;
        return out;
    }

    // Fixed deterministic 80/20 split.
    std::vector<int> order(static_cast<size_t>(n));
    for (int i = 0; i < n; i++) order[static_cast<size_t>(i)] = i;
    Rng rng(0xA11CE5);
    for (int i = n - 1; i > 0; i--) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.below(i + 1))]);
    const int n_train = std::max(1, (n * 4) / 5);
    const int n_test = n - n_train;

    Eigen::MatrixXd xtr(n_train, d);
    std::vector<int> ytr(static_cast<size_t>(n_train));
    for (int i = 0; i < n_train; i++) {
        xtr.row(i) = features.row(order[static_cast<size_t>(i)]);
        ytr[static_cast<size_t>(i)] = labels[static_cast<size_t>(order[static_cast<size_t>(i)])];
    }

    Eigen::MatrixXd onehot = Eigen::MatrixXd::Zero(n_train, num_classes);
    for (int i = 0; i < n_train; i++) onehot(i, ytr[static_cast<size_t>(i)]) = 1.0;

    for (int e = 0; e < epochs; e++) {
        Eigen::MatrixXd logits = (xtr * out.weights).rowwise() + out.bias.transpose();
        Eigen::MatrixXd p = logits;
        for (int i = 0; i < n_train; i++) {
            const double mx = logits.row(i).maxCoeff();
            Eigen::ArrayXd ex = (logits.row(i).array() - mx).exp();
            p.row(i) = (ex / ex.sum()).matrix();
        }
        Eigen::MatrixXd g = (p - onehot) / n_train;
        out.weights -= lr * (xtr.transpose() * g);
        out.bias -= lr * g.colwise().sum().transpose();
    }

    if (n_test == 0) {
        out.accuracy = 1.0;
        return out;
    }
    int correct = 0;
    for (int i = n_train; i < n; i++) {
        const int idx = order[static_cast<size_t>(i)];
        Eigen::VectorXd logits =
            out.weights.transpose() * features.row(idx).transpose() + out.bias;
        int arg = 0;
        logits.maxCoeff(&arg);
        if (arg == labels[static_cast<size_t>(idx)]) correct++;
    }
    out.accuracy = static_cast<double>(correct) / n_test;
    return out;
}

double cluster_separation(const Eigen::MatrixXd& features, const std::vector<int>& group_ids,
                          bool* had_singletons) {
    const int n = static_cast<int>(features.rows());
    if (static_cast<int>(group_ids.size()) != n)
        throw std::invalid_argument("cluster_separation: group id count mismatch");

    std::map<int, std::vector<int>> groups;
    for (int i = 0; i < n; i++) groups[group_ids[static_cast<size_t>(i)]].push_back(i);

    std::map<int, std::vector<int>> usable;
    bool singles = false;
    for (auto& [g, members] : groups) {
        if (members.size() >= 2)
            usable[g] = members;
        else
            singles = true;
    }
    if (had_singletons) *had_singletons = singles;
    if (usable.size() < 2)
        throw std::invalid_argument("cluster_separation: need at least two groups with >=2 members");

    auto dist = [&](int i, int j) { return (features.row(i) - features.row(j)).norm(); };

    double total = 0.0;
    int count = 0;
    for (const auto& [g, members] : usable) {
        for (int i : members) {
            double a = 0.0;
            for (int j : members)
                if (j != i) a += dist(i, j);
            a /= static_cast<double>(members.size() - 1);
            double b = std::numeric_limits<double>::infinity();
            for (const auto& [g2, other] : usable) {
                if (g2 == g) continue;
                double m = 0.0;
                for (int j : other) m += dist(i, j);
                b = std::min(b, m / static_cast<double>(other.size()));
            }
            const double denom = std::max(a, b);
            total += denom > 0.0 ? (b - a) / denom : 0.0;
            count++;
        }
    }
    return total / count;
}

std::string metrics_csv_header() {
    return "step,loss_fm,loss_obj,loss_skill,grounding_mass,argmax_hit,probe_acc,cluster_sep,"
           "success_rate,config_hash,seed";
}

std::string metrics_csv_row(const MetricsRecord& r, const std::string& config_hash,
                            uint64_t seed) {
    char buf[512];
    std::snprintf(buf, sizeof(buf),
                  "%d,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%.17g,%s,%llu", r.step, r.loss_fm,
                  r.loss_obj, r.loss_skill, r.grounding_mass, r.argmax_hit, r.probe_acc,
                  r.cluster_sep, r.success_rate, config_hash.c_str(),
                  static_cast<unsigned long long>(seed));
    return std::string(buf);
}

}  // namespace headspec
