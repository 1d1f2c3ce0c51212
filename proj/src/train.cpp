#include "headspec/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstring>
#include <filesystem>
#include <limits>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

#include "headspec/labels.hpp"
#include "headspec/ops.hpp"
#include "headspec/rng.hpp"

namespace headspec {

namespace fs = std::filesystem;

namespace {

constexpr int kEulerSteps = 10;
constexpr uint32_t kCheckpointVersion = 1;
constexpr char kCheckpointMagic[8] = {'H', 'S', 'P', 'C', 'K', 'P', 'T', '1'};

std::vector<int> all_heads(int h) {
    std::vector<int> v(static_cast<size_t>(h));
    for (int i = 0; i < h; i++) v[static_cast<size_t>(i)] = i;
    return v;
}

int argmax_lowest(const std::vector<double>& v) {
    int best = 0;
    for (size_t i = 1; i < v.size(); i++)
        if (v[i] > v[static_cast<size_t>(best)]) best = static_cast<int>(i);
    return best;
}

Tensor randn(const Shape& s, Rng& rng) {
    Eigen::ArrayXd v(shape_numel(s));
    for (long i = 0; i < v.size(); i++) v[i] = rng.normal();
    return Tensor::from_array(s, std::move(v));
}

// ---------------------------------------------------------------------------
// Batch assembly

struct TrainBatch {
    ModelInput input;
    Tensor actions;    // [B, chunk, action_dim]
    GuidanceBatch guide;
    Tensor centroids;  // [B, V, 2] per-view mask centroids (gaussian variant)
    std::vector<int> hard_class;
};

struct WindowRef {
    int episode;
    int start;
};

TrainBatch make_batch(const RunConfig& cfg, const std::vector<Episode>& eps,
                      const std::vector<WindowRef>& windows, Rng& noise_rng) {
    const int b = static_cast<int>(windows.size());
    const int p2 = kGridSide * kGridSide;
    const int chunk = kChunkLen;

    std::vector<RenderedScene> scenes;
    scenes.reserve(static_cast<size_t>(b));
    Eigen::ArrayXd actions(static_cast<long>(b) * chunk * 3);
    Eigen::ArrayXd targets = Eigen::ArrayXd::Zero(static_cast<long>(b) * kViews * p2);
    Eigen::ArrayXd vvalid = Eigen::ArrayXd::Zero(static_cast<long>(b) * kViews);
    Eigen::ArrayXd svalid = Eigen::ArrayXd::Zero(b);
    Eigen::ArrayXd soft(static_cast<long>(b) * kSkillClasses);
    Eigen::ArrayXd cents = Eigen::ArrayXd::Zero(static_cast<long>(b) * kViews * 2);

    TrainBatch out;
    out.hard_class.resize(static_cast<size_t>(b));

    for (int i = 0; i < b; i++) {
        const Episode& ep = eps[static_cast<size_t>(windows[static_cast<size_t>(i)].episode)];
        const int t0 = windows[static_cast<size_t>(i)].start;
        scenes.push_back(render_patches(ep.scene_at(t0)));

        for (int t = 0; t < chunk; t++)
            for (int k = 0; k < 3; k++)
                actions[(static_cast<long>(i) * chunk + t) * 3 + k] =
                    ep.actions[static_cast<size_t>(t0 + t)][static_cast<size_t>(k)];

        // Patch targets come from the stage covering the window start.
        int stage_idx = -1;
        for (size_t si = 0; si < ep.stages.size(); si++)
            if (ep.stages[si].start <= t0 && t0 < ep.stages[si].end)
                stage_idx = static_cast<int>(si);
        if (stage_idx >= 0) {
            for (int v = 0; v < kViews; v++) {
                const auto& mask = ep.stage_masks[static_cast<size_t>(stage_idx)][static_cast<size_t>(v)];
                PatchTargets pt = mask_to_patch_targets(mask, kGridSide * kMaskPixelsPerCell,
                                                        kGridSide * kMaskPixelsPerCell, kGridSide,
                                                        cfg.mask_tau);
                double cr = 0.0, cc = 0.0, cm = 0.0;
                for (int q = 0; q < p2; q++) {
                    targets[(static_cast<long>(i) * kViews + v) * p2 + q] = pt.indicators[static_cast<size_t>(q)];
                    if (pt.indicators[static_cast<size_t>(q)] > 0.0) {
                        cr += q / kGridSide;
                        cc += q % kGridSide;
                        cm += 1.0;
                    }
                }
                vvalid[static_cast<long>(i) * kViews + v] = pt.view_valid ? 1.0 : 0.0;
                if (cm > 0.0) {
                    cents[(static_cast<long>(i) * kViews + v) * 2 + 0] = cr / cm;
                    cents[(static_cast<long>(i) * kViews + v) * 2 + 1] = cc / cm;
                }
            }
        }
        double masked_sum = 0.0;
        for (int v = 0; v < kViews; v++)
            for (int q = 0; q < p2; q++)
                masked_sum += targets[(static_cast<long>(i) * kViews + v) * p2 + q] *
                              vvalid[static_cast<long>(i) * kViews + v];
        svalid[i] = masked_sum > 0.0 ? 1.0 : 0.0;

        const std::vector<int> ids =
            stage_to_timestep_labels(ep.stages, ep.horizon(), kSkillNull);
        std::vector<int> window_ids(ids.begin() + t0, ids.begin() + t0 + chunk);
        std::vector<double> y = soft_skill_label(window_ids, kSkillClasses);
        out.hard_class[static_cast<size_t>(i)] = argmax_lowest(y);
        if (cfg.supervision_skill == "hard") {
            std::fill(y.begin(), y.end(), 0.0);
            y[static_cast<size_t>(out.hard_class[static_cast<size_t>(i)])] = 1.0;
        }
        for (int k = 0; k < kSkillClasses; k++) soft[static_cast<long>(i) * kSkillClasses + k] = y[static_cast<size_t>(k)];
        out.guide.skill_ids.push_back(std::move(window_ids));
    }

    out.input = assemble_context(scenes);
    out.actions = Tensor::from_array({b, chunk, 3}, std::move(actions));
    out.guide.patch_targets = Tensor::from_array({b, kViews, p2}, std::move(targets));
    out.guide.view_valid = Tensor::from_array({b, kViews}, std::move(vvalid));
    out.guide.sample_valid = Tensor::from_array({b}, std::move(svalid));
    out.guide.skill_soft = Tensor::from_array({b, kSkillClasses}, std::move(soft));
    out.guide.delta = cfg.depth_delta;
    out.centroids = Tensor::from_array({b, kViews, 2}, std::move(cents));

    if (cfg.depth_enabled) {
        Tensor raw = stack_depth_tokens(scenes);
        Tensor down = downsample_depth_tokens(raw, cfg.depth_downsample);
        if (cfg.depth_delta < 1.0) {
            Tensor noise = make_matched_noise(down, noise_rng);
            down = depth_feature_mix(down, noise, cfg.depth_delta);
        }
        out.guide.depth_tokens = down;
        out.input.depth_tokens = down;
    }
    out.guide.validate();
    return out;
}

// ---------------------------------------------------------------------------
// Loss bundle

struct LossBundle {
    Tensor total;
    double fm = 0.0, obj = 0.0, skill = 0.0;
    Tensor pooled;  // [B, d_h]; undefined when no skill heads are configured
};

// Tracked masked mean of the per-query object mass (the clamp ablation's m).
Tensor masked_mean_mass(const ObjectMass& om) {
    const int b = om.mass.dim(0);
    const int t_a = om.mass.dim(1);
    Tensor masked = mul(om.mass, reshape(om.valid, {b, 1}));
    const double denom = std::max(om.valid.values().sum() * t_a, 1e-9);
    return mul_scalar(sum_all(masked), 1.0 / denom);
}

LossBundle compute_losses(const PolicyModel& model, const RunConfig& cfg, const TrainBatch& batch,
                          const ForwardResult& fwd, const Tensor& noise, double tau) {
    LossBundle lb;
    Tensor fm = flow_matching_loss(fwd.velocity, batch.actions, noise, tau);
    lb.fm = fm.item();

    const bool guided = cfg.stage == "guided";
    const std::vector<int> obj_heads =
        cfg.mixture ? all_heads(cfg.heads) : cfg.object_heads;
    const std::vector<int> skill_heads =
        cfg.mixture ? all_heads(cfg.heads) : cfg.skill_heads;

    // Object objective, averaged over guided layers.
    Tensor obj = Tensor::scalar(0.0);
    Tensor mass_measured;  // for the alpha clamp
    if (!obj_heads.empty() && !fwd.records.empty()) {
        std::vector<Tensor> per_layer;
        std::vector<Tensor> per_layer_mass;
        for (const auto& rec : fwd.records) {
            const Tensor& src = rec.control_probs.defined() ? rec.control_probs : rec.main_probs;
            Tensor sel = index_select(src, 1, obj_heads);
            if (cfg.supervision_object == "gaussian")
                per_layer.push_back(gaussian_prior_loss(sel, batch.centroids,
                                                        batch.guide.view_valid,
                                                        cfg.gaussian_sigma,
                                                        batch.input.image_key_index, kGridSide));
            else
                per_layer.push_back(
                    object_grounding_loss(sel, batch.guide, batch.input.image_key_index));
            per_layer_mass.push_back(masked_mean_mass(object_attention_mass(
                sel, batch.guide.patch_targets, batch.guide.view_valid,
                batch.input.image_key_index)));
        }
        Tensor acc = per_layer[0];
        Tensor mass_acc = per_layer_mass[0];
        for (size_t i = 1; i < per_layer.size(); i++) {
            acc = add(acc, per_layer[i]);
            mass_acc = add(mass_acc, per_layer_mass[i]);
        }
        obj = mul_scalar(acc, 1.0 / static_cast<double>(per_layer.size()));
        mass_measured = mul_scalar(mass_acc, 1.0 / static_cast<double>(per_layer_mass.size()));
    }
    lb.obj = obj.item();

    // Skill objective over pooled features.
    Tensor skill = Tensor::scalar(0.0);
    Tensor skill_logits;
    if (!skill_heads.empty() && !fwd.records.empty()) {
        HeadPlan pooling = model.cfg.plan;
        pooling.skill_heads = skill_heads;
        std::vector<Tensor> feats;
        for (const auto& rec : fwd.records) {
            const bool use_control = cfg.stage == "guided" && model.cfg.skill_use_control &&
                                     rec.control_heads.defined();
            feats.push_back(use_control ? rec.control_heads : rec.main_heads);
        }
        lb.pooled = pool_skill_features(feats, pooling);
        skill = skill_kl_loss(lb.pooled, batch.guide.skill_soft, model.skill_w, model.skill_b);
        skill_logits = add(matmul(lb.pooled, model.skill_w), model.skill_b);
    }
    lb.skill = skill.item();

    if (!guided) {
        lb.total = fm;
        return lb;
    }

    // Ablation clamps: alpha replaces the grounding objective, gamma augments
    // the skill objective.
    Tensor obj_term = obj;
    double obj_weight = cfg.lambda_object;
    if (cfg.alpha_target >= 0.0 && mass_measured.defined()) {
        obj_term = control_clamp_loss(mass_measured, cfg.alpha_target, 0.05);
        obj_weight = cfg.object_clamp_weight;
    }
    Tensor total = total_loss(fm, obj_term, skill, obj_weight, cfg.lambda_skill);
    if (cfg.gamma_target >= 0.0 && skill_logits.defined()) {
        Tensor s = soft_accuracy(skill_logits, batch.hard_class);
        total = add(total,
                    mul_scalar(control_clamp_loss(s, cfg.gamma_target, 0.02),
                               cfg.skill_clamp_weight));
    }
    lb.total = total;
    return lb;
}

// ---------------------------------------------------------------------------
// Optimizer: SGD with warmup + cosine decay; Adam moments behind the flag.

class Optimizer {
  public:
    Optimizer(const RunConfig& cfg, size_t n_params)
        : cfg_(cfg), m_(n_params), v_(n_params) {}

    double lr_at(int step) const {
        const double peak = cfg_.lr_peak;
        if (step < cfg_.lr_warmup)
            return peak * static_cast<double>(step + 1) / cfg_.lr_warmup;
        const double floor = peak * cfg_.lr_floor_frac;
        const int total = std::max(1, cfg_.steps - cfg_.lr_warmup);
        const double t = static_cast<double>(step - cfg_.lr_warmup) / total;
        return floor + (peak - floor) * 0.5 * (1.0 + std::cos(M_PI * t));
    }

    void step(std::vector<std::pair<std::string, Tensor*>>& params, int step_idx) {
        double norm2 = 0.0;
        for (auto& [name, p] : params)
            if (p->has_grad()) norm2 += p->grad().square().sum();
        double scale = 1.0;
        if (cfg_.grad_clip > 0.0) {
            const double norm = std::sqrt(norm2);
            if (norm > cfg_.grad_clip) scale = cfg_.grad_clip / norm;
        }
        const double lr = lr_at(step_idx);
        const bool adam = cfg_.optimizer == "adam";
        t_++;
        for (size_t i = 0; i < params.size(); i++) {
            Tensor* p = params[i].second;
            if (!p->has_grad()) continue;
            Eigen::ArrayXd g = p->grad() * scale;
            if (!adam) {
                p->values() -= lr * g;
                continue;
            }
            if (m_[i].size() == 0) {
                m_[i] = Eigen::ArrayXd::Zero(g.size());
                v_[i] = Eigen::ArrayXd::Zero(g.size());
            }
            m_[i] = 0.9 * m_[i] + 0.1 * g;
            v_[i] = 0.999 * v_[i] + 0.001 * g.square();
            const double bc1 = 1.0 - std::pow(0.9, t_);
            const double bc2 = 1.0 - std::pow(0.999, t_);
            p->values() -= lr * (m_[i] / bc1) / ((v_[i] / bc2).sqrt() + 1e-8);
        }
    }

  private:
    RunConfig cfg_;
    std::vector<Eigen::ArrayXd> m_, v_;
    int t_ = 0;
};

// ---------------------------------------------------------------------------
// Binary checkpoint IO (explicit little-endian)

void put_u32(std::ostream& os, uint32_t v) {
    unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                          static_cast<unsigned char>(v >> 16),
                          static_cast<unsigned char>(v >> 24)};
    os.write(reinterpret_cast<char*>(b), 4);
}

void put_u64(std::ostream& os, uint64_t v) {
    put_u32(os, static_cast<uint32_t>(v));
    put_u32(os, static_cast<uint32_t>(v >> 32));
}

uint32_t get_u32(std::istream& is) {
    unsigned char b[4];
    is.read(reinterpret_cast<char*>(b), 4);
    return static_cast<uint32_t>(b[0]) | (static_cast<uint32_t>(b[1]) << 8) |
           (static_cast<uint32_t>(b[2]) << 16) | (static_cast<uint32_t>(b[3]) << 24);
}

uint64_t get_u64(std::istream& is) {
    const uint64_t lo = get_u32(is);
    const uint64_t hi = get_u32(is);
    return lo | (hi << 32);
}

}  // namespace

void save_checkpoint(const std::string& path, PolicyModel& model, const RunConfig& cfg) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open for write: " + path);
    f.write(kCheckpointMagic, 8);
    put_u32(f, kCheckpointVersion);
    put_u64(f, cfg.seed);
    const std::string conf = cfg.canonical();
    put_u64(f, conf.size());
    f.write(conf.data(), static_cast<std::streamsize>(conf.size()));
    auto params = model.named_parameters();
    put_u32(f, static_cast<uint32_t>(params.size()));
    for (auto& [name, p] : params) {
        put_u32(f, static_cast<uint32_t>(name.size()));
        f.write(name.data(), static_cast<std::streamsize>(name.size()));
        put_u32(f, static_cast<uint32_t>(p->ndim()));
        for (int i = 0; i < p->ndim(); i++) put_u32(f, static_cast<uint32_t>(p->dim(i)));
        f.write(reinterpret_cast<const char*>(p->values().data()),
                static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(p->size())));
    }
}

namespace {

struct RawCheckpoint {
    RunConfig cfg;
    uint64_t seed;
    std::vector<std::pair<std::string, Tensor>> params;
};

RawCheckpoint read_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw std::runtime_error("checkpoint: cannot open: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
        throw std::runtime_error("checkpoint: bad magic in " + path);
    const uint32_t version = get_u32(f);
    if (version != kCheckpointVersion)
        throw std::runtime_error("checkpoint: schema version mismatch (file v" +
                                 std::to_string(version) + ", code v" +
                                 std::to_string(kCheckpointVersion) + "); refusing to load");
    RawCheckpoint out;
    out.seed = get_u64(f);
    const uint64_t conf_len = get_u64(f);
    std::string conf(conf_len, '\0');
    f.read(conf.data(), static_cast<std::streamsize>(conf_len));
    out.cfg = RunConfig::from_string(conf);
    const uint32_t n = get_u32(f);
    for (uint32_t i = 0; i < n; i++) {
        const uint32_t name_len = get_u32(f);
        std::string name(name_len, '\0');
        f.read(name.data(), name_len);
        const uint32_t ndim = get_u32(f);
        Shape s(ndim);
        for (uint32_t k = 0; k < ndim; k++) s[k] = static_cast<int>(get_u32(f));
        Eigen::ArrayXd vals(shape_numel(s));
        f.read(reinterpret_cast<char*>(vals.data()),
               static_cast<std::streamsize>(sizeof(double) * static_cast<size_t>(vals.size())));
        out.params.emplace_back(std::move(name), Tensor::from_array(s, std::move(vals)));
    }
    if (!f) throw std::runtime_error("checkpoint: truncated file " + path);
    return out;
}

}  // namespace

LoadedModel load_checkpoint(const std::string& path) {
    RawCheckpoint raw = read_checkpoint(path);
    LoadedModel out{raw.cfg, PolicyModel::init(raw.cfg.model_config(), raw.seed)};
    auto params = out.model.named_parameters();
    if (params.size() != raw.params.size())
        throw std::runtime_error("checkpoint: parameter count mismatch");
    for (size_t i = 0; i < params.size(); i++) {
        if (params[i].first != raw.params[i].first)
            throw std::runtime_error("checkpoint: parameter name mismatch at index " +
                                     std::to_string(i));
        if (params[i].second->shape() != raw.params[i].second.shape())
            throw std::runtime_error("checkpoint: shape mismatch for " + params[i].first);
        params[i].second->values() = raw.params[i].second.values();
    }
    return out;
}

std::vector<std::string> load_params_into(PolicyModel& model, const std::string& path) {
    RawCheckpoint raw = read_checkpoint(path);
    std::vector<std::string> loaded;
    auto params = model.named_parameters();
    for (auto& [name, tensor] : raw.params) {
        for (auto& [pname, p] : params) {
            if (pname != name) continue;
            if (p->shape() != tensor.shape())
                throw std::runtime_error("checkpoint: shape mismatch for " + name);
            p->values() = tensor.values();
            loaded.push_back(name);
        }
    }
    return loaded;
}

void generate_dataset(const RunConfig& cfg) {
    if (cfg.dataset_dir.empty())
        throw std::invalid_argument("gen-data: dataset_dir must be set");
    fs::create_directories(cfg.dataset_dir);
    const Difficulty diff = difficulty_from_string(cfg.gen_difficulty);
    std::vector<Episode> train, val;
    for (int i = 0; i < cfg.gen_episodes; i++) {
        Episode ep = generate_episode(mix_seed(cfg.seed, static_cast<uint64_t>(i)), diff);
        if (i % 100 < 7)
            val.push_back(std::move(ep));
        else
            train.push_back(std::move(ep));
    }
    write_episodes(cfg.dataset_dir + "/train.txt", train);
    write_episodes(cfg.dataset_dir + "/val.txt", val);
    DatasetManifest m;
    m.base_seed = cfg.seed;
    m.difficulty = cfg.gen_difficulty;
    m.count = cfg.gen_episodes;
    write_manifest(cfg.dataset_dir + "/manifest.txt", m);
}

DatasetPair load_dataset(const std::string& dir) {
    if (dir.empty() || !fs::exists(dir + "/manifest.txt"))
        throw std::runtime_error("dataset: missing dataset at '" + dir +
                                 "' (expected manifest.txt; run gen-data first)");
    DatasetPair out;
    out.manifest = read_manifest(dir + "/manifest.txt");
    if (out.manifest.schema_version != 1)
        throw std::runtime_error("dataset: unsupported schema version " +
                                 std::to_string(out.manifest.schema_version));
    out.train = read_episodes(dir + "/train.txt");
    out.val = read_episodes(dir + "/val.txt");
    if (out.train.empty() || out.val.empty())
        throw std::runtime_error("dataset: empty split in " + dir);
    return out;
}

double rollout_success_rate(PolicyModel& model, const RunConfig& cfg, int n_scenes,
                            uint64_t eval_seed, Difficulty difficulty) {
    if (n_scenes <= 0) return std::numeric_limits<double>::quiet_NaN();
    NoGradGuard ng;
    std::vector<ToyEnv> envs;
    for (int i = 0; i < n_scenes; i++)
        envs.emplace_back(
            generate_episode(mix_seed(eval_seed, static_cast<uint64_t>(i)), difficulty).initial);

    const int rounds = (cfg.eval_horizon + kChunkLen - 1) / kChunkLen;
    for (int r = 0; r < rounds; r++) {
        std::vector<RenderedScene> scenes;
        scenes.reserve(envs.size());
        for (auto& e : envs) scenes.push_back(render_patches(e.scene));
        ModelInput input = assemble_context(scenes);
        if (cfg.depth_enabled) {
            Tensor down =
                downsample_depth_tokens(stack_depth_tokens(scenes), cfg.depth_downsample);
            if (cfg.depth_delta < 1.0) {
                Rng mix_rng(mix_seed(eval_seed, 0xD0000 + static_cast<uint64_t>(r)));
                down = depth_feature_mix(down, make_matched_noise(down, mix_rng),
                                         cfg.depth_delta);
            }
            input.depth_tokens = down;
        }

        Rng noise_rng(mix_seed(eval_seed, 0xAC700 + static_cast<uint64_t>(r)));
        Tensor x = randn({n_scenes, kChunkLen, 3}, noise_rng);
        for (int k = 0; k < kEulerSteps; k++) {
            const double tau = 1.0 - static_cast<double>(k) / kEulerSteps;
            Tensor v = model_forward(model, input, x, tau).velocity;
            x = sub(x, mul_scalar(v, 1.0 / kEulerSteps));
        }

        for (int i = 0; i < n_scenes; i++)
            for (int t = 0; t < kChunkLen; t++) {
                if (envs[static_cast<size_t>(i)].terminated ||
                    envs[static_cast<size_t>(i)].steps >= cfg.eval_horizon)
                    break;
                envs[static_cast<size_t>(i)].step(
                    {x[(i * kChunkLen + t) * 3 + 0], x[(i * kChunkLen + t) * 3 + 1],
                     x[(i * kChunkLen + t) * 3 + 2]});
            }
    }
    int wins = 0;
    for (const auto& e : envs) wins += e.succeeded ? 1 : 0;
    return static_cast<double>(wins) / n_scenes;
}

ChunkPolicy make_model_policy(PolicyModel& model, const RunConfig& cfg, uint64_t noise_seed) {
    auto rng = std::make_shared<Rng>(noise_seed);
    PolicyModel* m = &model;
    RunConfig conf = cfg;
    return [m, conf, rng](const ToyScene& scene) {
        NoGradGuard ng;
        std::vector<RenderedScene> scenes{render_patches(scene)};
        ModelInput input = assemble_context(scenes);
        if (conf.depth_enabled) {
            Tensor down =
                downsample_depth_tokens(stack_depth_tokens(scenes), conf.depth_downsample);
            if (conf.depth_delta < 1.0)
                down = depth_feature_mix(down, make_matched_noise(down, *rng), conf.depth_delta);
            input.depth_tokens = down;
        }
        Tensor x = randn({1, kChunkLen, 3}, *rng);
        for (int k = 0; k < kEulerSteps; k++) {
            const double tau = 1.0 - static_cast<double>(k) / kEulerSteps;
            Tensor v = model_forward(*m, input, x, tau).velocity;
            x = sub(x, mul_scalar(v, 1.0 / kEulerSteps));
        }
        std::vector<std::array<double, 3>> chunk(kChunkLen);
        for (int t = 0; t < kChunkLen; t++)
            chunk[static_cast<size_t>(t)] = {x[t * 3 + 0], x[t * 3 + 1], x[t * 3 + 2]};
        return chunk;
    };
}

MetricsRecord evaluate_model(PolicyModel& model, const RunConfig& cfg,
                             const std::vector<Episode>& val, int step) {
    NoGradGuard ng;
    MetricsRecord rec;
    rec.step = step;

    // Deterministic validation windows, one large batch.
    const int n = std::max(cfg.eval_batches * cfg.batch_size, kSkillClasses + 4);
    std::vector<WindowRef> windows;
    for (int i = 0; i < n; i++) {
        const int ei = i % static_cast<int>(val.size());
        const Episode& ep = val[static_cast<size_t>(ei)];
        const int span = ep.horizon() - kChunkLen + 1;
        windows.push_back({ei, (i * 7) % span});
    }
    Rng eval_rng(mix_seed(cfg.seed, 0xEFA1));
    TrainBatch batch = make_batch(cfg, val, windows, eval_rng);

    const double tau = 0.5;
    Tensor noise = randn({n, kChunkLen, 3}, eval_rng);
    Tensor noisy = add(mul_scalar(noise, tau), mul_scalar(batch.actions, 1.0 - tau));
    ForwardResult fwd = model_forward(model, batch.input, noisy, tau);
    LossBundle lb = compute_losses(model, cfg, batch, fwd, noise, tau);
    rec.loss_fm = lb.fm;
    rec.loss_obj = lb.obj;
    rec.loss_skill = lb.skill;

    // Factor quality over the guided layers (head-mean within the configured
    // object set), averaged across layers.
    const std::vector<int> obj_heads =
        cfg.mixture ? all_heads(cfg.heads) : cfg.object_heads;
    if (!obj_heads.empty() && !fwd.records.empty()) {
        double gm = 0.0, ah = 0.0;
        int cnt = 0;
        for (const auto& r : fwd.records) {
            const Tensor& src = r.control_probs.defined() ? r.control_probs : r.main_probs;
            Tensor sel = index_select(src, 1, obj_heads);
            gm += grounding_mass(sel, batch.guide.patch_targets, batch.guide.view_valid,
                                 batch.input.image_key_index);
            ah += argmax_hit(sel, batch.guide.patch_targets, batch.guide.view_valid,
                             batch.input.image_key_index);
            cnt++;
        }
        rec.grounding_mass = gm / cnt;
        rec.argmax_hit = ah / cnt;
    } else {
        rec.grounding_mass = std::numeric_limits<double>::quiet_NaN();
        rec.argmax_hit = std::numeric_limits<double>::quiet_NaN();
    }

    // Linear probe on pooled skill features.
    if (lb.pooled.defined()) {
        Eigen::MatrixXd feats(n, model.cfg.head_dim);
        for (int i = 0; i < n; i++)
            for (int k = 0; k < model.cfg.head_dim; k++)
                feats(i, k) = lb.pooled[i * model.cfg.head_dim + k];
        rec.probe_acc =
            train_linear_probe(feats, batch.hard_class, kSkillClasses).accuracy;
    } else {
        rec.probe_acc = std::numeric_limits<double>::quiet_NaN();
    }

    // Cluster separation of the designated factor heads' outputs.
    try {
        const LayerRecord& r0 = fwd.records.at(0);
        const Tensor& heads_src =
            r0.control_heads.defined() ? r0.control_heads : r0.main_heads;
        std::vector<std::pair<int, int>> diag;  // (head, group)
        if (!cfg.object_heads.empty()) diag.push_back({cfg.object_heads[0], 0});
        if (!cfg.skill_heads.empty()) diag.push_back({cfg.skill_heads[0], 1});
        if (!cfg.depth_heads.empty()) diag.push_back({cfg.depth_heads[0], 2});
        const int dh = model.cfg.head_dim;
        Eigen::MatrixXd feats(n * static_cast<int>(diag.size()), dh);
        std::vector<int> groups;
        int row = 0;
        for (auto [h, g] : diag) {
            Tensor f = reduce_mean(index_select(heads_src, 1, {h}), {1, 2});  // [B, dh]
            for (int i = 0; i < n; i++, row++) {
                for (int k = 0; k < dh; k++) feats(row, k) = f[i * dh + k];
                groups.push_back(g);
            }
        }
        rec.cluster_sep = cluster_separation(feats, groups);
    } catch (const std::exception&) {
        rec.cluster_sep = std::numeric_limits<double>::quiet_NaN();
    }

    Difficulty diff = val.empty() ? Difficulty::kEasy : val[0].difficulty;
    rec.success_rate = rollout_success_rate(model, cfg, cfg.eval_rollouts,
                                            mix_seed(cfg.seed, 0xE0A1), diff);
    return rec;
}

TrainOutputs run_training(const RunConfig& cfg) {
    cfg.validate();
    fs::create_directories(cfg.out_dir);
    {
        std::ofstream echo(cfg.out_dir + "/config_resolved.cfg", std::ios::binary);
        echo << cfg.canonical();
    }
    DatasetPair data = load_dataset(cfg.dataset_dir);

    PolicyModel model = PolicyModel::init(cfg.model_config(), cfg.seed);
    if (!cfg.init_checkpoint.empty()) {
        std::vector<std::string> loaded = load_params_into(model, cfg.init_checkpoint);
        std::set<std::string> have(loaded.begin(), loaded.end());
        // Warm start keeps the adapter contract: any branch projection the
        // checkpoint did not supply is re-copied from its freshly loaded main
        // counterpart.
        for (auto& lp : model.layers) {
            if (!lp.has_control) continue;
            auto recopy = [&](Tensor& dst, const Tensor& src, const std::string& name) {
                if (!have.count(name)) dst.values() = src.values();
            };
            const size_t li = static_cast<size_t>(&lp - model.layers.data());
            const std::string p = "layer" + std::to_string(li) + ".";
            recopy(lp.c_wq, lp.wq, p + "c_wq");
            recopy(lp.c_wo, lp.wo, p + "c_wo");
            recopy(lp.c_wk, lp.wk, p + "c_wk");
            recopy(lp.c_wv, lp.wv, p + "c_wv");
        }
    }

    auto params = model.named_parameters();
    Optimizer opt(cfg, params.size());
    Rng train_rng(mix_seed(cfg.seed, 0x7EA1));

    const std::string metrics_path = cfg.out_dir + "/metrics.csv";
    std::ofstream csv(metrics_path, std::ios::binary);
    csv << metrics_csv_header() << "\n";
    const std::string hash = cfg.hash();

    double last_fm = 0.0, last_obj = 0.0, last_skill = 0.0;
    int last_eval_step = -1;
    MetricsRecord last_rec;
    for (int step = 0; step < cfg.steps; step++) {
        std::vector<WindowRef> windows;
        for (int i = 0; i < cfg.batch_size; i++) {
            const int ei = train_rng.below(static_cast<int>(data.train.size()));
            const int span = data.train[static_cast<size_t>(ei)].horizon() - kChunkLen + 1;
            windows.push_back({ei, train_rng.below(span)});
        }
        TrainBatch batch = make_batch(cfg, data.train, windows, train_rng);
        const double tau = train_rng.uniform(cfg.tau_min, cfg.tau_max);
        Tensor noise = randn({cfg.batch_size, kChunkLen, 3}, train_rng);
        Tensor noisy = add(mul_scalar(noise, tau), mul_scalar(batch.actions, 1.0 - tau));

        ForwardResult fwd = model_forward(model, batch.input, noisy, tau);
        LossBundle lb = compute_losses(model, cfg, batch, fwd, noise, tau);
        if (!std::isfinite(lb.total.item()))
            throw std::runtime_error(
                "training aborted: non-finite loss at step " + std::to_string(step) +
                "; last finite losses fm=" + std::to_string(last_fm) +
                " obj=" + std::to_string(last_obj) + " skill=" + std::to_string(last_skill));
        last_fm = lb.fm;
        last_obj = lb.obj;
        last_skill = lb.skill;

        backward(lb.total);
        opt.step(params, step);

        if (cfg.eval_every > 0 && (step + 1) % cfg.eval_every == 0) {
            last_rec = evaluate_model(model, cfg, data.val, step + 1);
            csv << metrics_csv_row(last_rec, hash, cfg.seed) << "\n";
            csv.flush();
            last_eval_step = step + 1;
        }
    }

    TrainOutputs out;
    if (last_eval_step != cfg.steps) {
        last_rec = evaluate_model(model, cfg, data.val, cfg.steps);
        csv << metrics_csv_row(last_rec, hash, cfg.seed) << "\n";
    }
    out.final_metrics = last_rec;
    csv.close();

    out.checkpoint_path = cfg.out_dir + "/checkpoint.bin";
    out.metrics_path = metrics_path;
    save_checkpoint(out.checkpoint_path, model, cfg);
    return out;
}

void run_ablation_sweep(const RunConfig& base, const std::string& knob,
                        const std::vector<std::string>& values,
                        const std::string& summary_path) {
    if (values.empty()) throw std::invalid_argument("ablate: empty value list");
    const std::string parent = fs::path(summary_path).parent_path().string();
    if (!parent.empty()) fs::create_directories(parent);
    std::ofstream summary(summary_path, std::ios::binary);
    summary << "knob,value," << metrics_csv_header() << "\n";
    for (const std::string& v : values) {
        RunConfig cfg = base;
        cfg.out_dir = base.out_dir + "/" + knob + "_" + v;
        if (knob == "alpha") cfg.alpha_target = std::stod(v);
        else if (knob == "gamma") cfg.gamma_target = std::stod(v);
        else if (knob == "delta") cfg.depth_delta = std::stod(v);
        else if (knob == "layer_quartile") cfg.guided_layers = v;
        else if (knob == "fusion_mode") cfg.fusion_mode = v;
        else if (knob == "supervision_variant") {
            if (v == "region" || v == "gaussian") cfg.supervision_object = v;
            else if (v == "soft" || v == "hard") cfg.supervision_skill = v;
            else throw std::invalid_argument("ablate: unknown supervision variant '" + v + "'");
        } else {
            throw std::invalid_argument("ablate: unknown knob '" + knob + "'");
        }
        cfg.validate();
        TrainOutputs res = run_training(cfg);
        summary << knob << "," << v << ","
                << metrics_csv_row(res.final_metrics, cfg.hash(), cfg.seed) << "\n";
        summary.flush();
    }
}

MetricsRecord run_diagnostics(const std::string& checkpoint_path, const std::string& dataset_dir,
                              const std::string& out_dir, bool dump_attention) {
    LoadedModel lm = load_checkpoint(checkpoint_path);
    DatasetPair data = load_dataset(dataset_dir);
    fs::create_directories(out_dir);
    MetricsRecord rec = evaluate_model(lm.model, lm.cfg, data.val, 0);
    std::ofstream csv(out_dir + "/diagnostics.csv", std::ios::binary);
    csv << metrics_csv_header() << "\n"
        << metrics_csv_row(rec, lm.cfg.hash(), lm.cfg.seed) << "\n";

    if (dump_attention) {
        NoGradGuard ng;
        std::vector<WindowRef> windows{{0, 0}};
        Rng rng(1);
        TrainBatch batch = make_batch(lm.cfg, data.val, windows, rng);
        Tensor noise = randn({1, kChunkLen, 3}, rng);
        Tensor noisy = add(mul_scalar(noise, 0.5), mul_scalar(batch.actions, 0.5));
        ForwardResult fwd = model_forward(lm.model, batch.input, noisy, 0.5);
        const std::vector<int> obj_heads =
            lm.cfg.mixture ? all_heads(lm.cfg.heads) : lm.cfg.object_heads;
        if (!fwd.records.empty() && !obj_heads.empty()) {
            const auto& r0 = fwd.records[0];
            const Tensor& src = r0.control_probs.defined() ? r0.control_probs : r0.main_probs;
            Tensor sel = reduce_mean(index_select(src, 1, obj_heads), {1});  // [1, T_a, T_k]
            const int p2 = kGridSide * kGridSide;
            for (int v = 0; v < kViews; v++) {
                // Query-mean attention over this view's patch grid.
                Eigen::ArrayXd grid = Eigen::ArrayXd::Zero(p2);
                for (int t = 0; t < kChunkLen; t++)
                    for (int q = 0; q < p2; q++)
                        grid[q] += sel[(t)*sel.dim(2) + v * p2 + q];
                const double mx = grid.maxCoeff();
                std::ofstream pgm(out_dir + "/attention_view" + std::to_string(v) + ".pgm",
                                  std::ios::binary);
                pgm << "P2\n" << kGridSide << " " << kGridSide << "\n255\n";
                for (int r = 0; r < kGridSide; r++) {
                    for (int c = 0; c < kGridSide; c++)
                        pgm << static_cast<int>(mx > 0 ? grid[r * kGridSide + c] / mx * 255 : 0)
                            << (c + 1 < kGridSide ? " " : "");
                    pgm << "\n";
                }
            }
        }
    }
    return rec;
}

}  // namespace headspec
