#include "headspec/config.hpp"

#include <algorithm>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>
#include <stdexcept>

namespace headspec {

namespace {

std::string trim(const std::string& s) {
    size_t a = s.find_first_not_of(" \t\r");
    size_t b = s.find_last_not_of(" \t\r");
    if (a == std::string::npos) return "";
    return s.substr(a, b - a + 1);
}

std::vector<int> parse_int_list(const std::string& key, const std::string& v) {
    std::vector<int> out;
    if (trim(v).empty() || trim(v) == "none") return out;
    std::istringstream is(v);
    std::string item;
    while (std::getline(is, item, ',')) {
        item = trim(item);
        try {
            size_t pos = 0;
            const int x = std::stoi(item, &pos);
            if (pos != item.size()) throw std::invalid_argument("");
            out.push_back(x);
        } catch (...) {
            throw std::invalid_argument("config: key '" + key + "' has bad list entry '" + item +
                                        "'");
        }
    }
    return out;
}

std::string fmt_int_list(const std::vector<int>& v) {
    if (v.empty()) return "none";
    std::string out;
    for (size_t i = 0; i < v.size(); i++) {
        if (i) out += ",";
        out += std::to_string(v[i]);
    }
    return out;
}

double parse_double(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const double x = std::stod(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' has bad number '" + v + "'");
    }
}

int parse_int(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const int x = std::stoi(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' has bad integer '" + v + "'");
    }
}

uint64_t parse_u64(const std::string& key, const std::string& v) {
    try {
        size_t pos = 0;
        const uint64_t x = std::stoull(v, &pos);
        if (pos != v.size()) throw std::invalid_argument("");
        return x;
    } catch (...) {
        throw std::invalid_argument("config: key '" + key + "' has bad integer '" + v + "'");
    }
}

bool parse_bool(const std::string& key, const std::string& v) {
    if (v == "true" || v == "1") return true;
    if (v == "false" || v == "0") return false;
    throw std::invalid_argument("config: key '" + key + "' wants true/false, got '" + v + "'");
}

std::string fmt_double(double v) {
    char buf[40];
    std::snprintf(buf, sizeof(buf), "%.17g", v);
    return buf;
}

}  // namespace

void RunConfig::set_key(const std::string& key, const std::string& value) {
    if (key == "seed") seed = parse_u64(key, value);
    else if (key == "dataset_dir") dataset_dir = value;
    else if (key == "out_dir") out_dir = value;
    else if (key == "stage") stage = value;
    else if (key == "layers") layers = parse_int(key, value);
    else if (key == "heads") heads = parse_int(key, value);
    else if (key == "head_dim") head_dim = parse_int(key, value);
    else if (key == "mlp_hidden") mlp_hidden = parse_int(key, value);
    else if (key == "object_heads") object_heads = parse_int_list(key, value);
    else if (key == "skill_heads") skill_heads = parse_int_list(key, value);
    else if (key == "depth_heads") depth_heads = parse_int_list(key, value);
    else if (key == "guided_layers") guided_layers = value;
    else if (key == "fusion_mode") fusion_mode = value;
    else if (key == "lambda_object") lambda_object = parse_double(key, value);
    else if (key == "lambda_skill") lambda_skill = parse_double(key, value);
    else if (key == "supervision_object") supervision_object = value;
    else if (key == "supervision_skill") supervision_skill = value;
    else if (key == "gaussian_sigma") gaussian_sigma = parse_double(key, value);
    else if (key == "mask_tau") mask_tau = parse_double(key, value);
    else if (key == "depth_enabled") depth_enabled = parse_bool(key, value);
    else if (key == "depth_downsample") depth_downsample = parse_int(key, value);
    else if (key == "depth_delta") depth_delta = parse_double(key, value);
    else if (key == "alpha_target") alpha_target = parse_double(key, value);
    else if (key == "gamma_target") gamma_target = parse_double(key, value);
    else if (key == "object_clamp_weight") object_clamp_weight = parse_double(key, value);
    else if (key == "skill_clamp_weight") skill_clamp_weight = parse_double(key, value);
    else if (key == "steps") steps = parse_int(key, value);
    else if (key == "batch_size") batch_size = parse_int(key, value);
    else if (key == "lr_peak") lr_peak = parse_double(key, value);
    else if (key == "lr_warmup") lr_warmup = parse_int(key, value);
    else if (key == "lr_floor_frac") lr_floor_frac = parse_double(key, value);
    else if (key == "optimizer") optimizer = value;
    else if (key == "grad_clip") grad_clip = parse_double(key, value);
    else if (key == "tau_min") tau_min = parse_double(key, value);
    else if (key == "tau_max") tau_max = parse_double(key, value);
    else if (key == "eval_every") eval_every = parse_int(key, value);
    else if (key == "eval_rollouts") eval_rollouts = parse_int(key, value);
    else if (key == "eval_horizon") eval_horizon = parse_int(key, value);
    else if (key == "eval_batches") eval_batches = parse_int(key, value);
    else if (key == "mixture") mixture = parse_bool(key, value);
    else if (key == "deterministic") deterministic = parse_bool(key, value);
    else if (key == "init_checkpoint") init_checkpoint = value;
    else if (key == "gen_episodes") gen_episodes = parse_int(key, value);
    else if (key == "gen_difficulty") gen_difficulty = value;
    else
        throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig RunConfig::from_string(const std::string& text) {
    RunConfig cfg;
    std::istringstream is(text);
    std::string line;
    int lineno = 0;
    while (std::getline(is, line)) {
        lineno++;
        const size_t hash_pos = line.find('#');
        if (hash_pos != std::string::npos) line = line.substr(0, hash_pos);
        line = trim(line);
        if (line.empty()) continue;
        const size_t eq = line.find('=');
        if (eq == std::string::npos)
            throw std::invalid_argument("config: line " + std::to_string(lineno) +
                                        " is not 'key = value'");
        cfg.set_key(trim(line.substr(0, eq)), trim(line.substr(eq + 1)));
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("config: cannot open " + path);
    std::ostringstream ss;
    ss << f.rdbuf();
    return from_string(ss.str());
}

void RunConfig::validate() const {
    if (stage != "base" && stage != "guided")
        throw std::invalid_argument("config: stage must be base|guided, got '" + stage + "'");
    if (guided_layers != "all" && guided_layers != "q1" && guided_layers != "q2" &&
        guided_layers != "q3" && guided_layers != "q4")
        throw std::invalid_argument("config: guided_layers must be all|q1|q2|q3|q4");
    fusion_mode_from_string(fusion_mode);  // throws on bad value
    if (supervision_object != "region" && supervision_object != "gaussian")
        throw std::invalid_argument("config: supervision_object must be region|gaussian");
    if (supervision_skill != "soft" && supervision_skill != "hard")
        throw std::invalid_argument("config: supervision_skill must be soft|hard");
    if (optimizer != "sgd" && optimizer != "adam")
        throw std::invalid_argument("config: optimizer must be sgd|adam");
    if (lambda_object < 0 || lambda_skill < 0)
        throw std::invalid_argument("config: loss weights must be >= 0");
    if (gaussian_sigma <= 0) throw std::invalid_argument("config: gaussian_sigma must be > 0");
    if (!(mask_tau >= 0 && mask_tau <= 1)) throw std::invalid_argument("config: mask_tau in [0,1]");
    if (!(depth_delta >= 0 && depth_delta <= 1))
        throw std::invalid_argument("config: depth_delta in [0,1]");
    if (alpha_target >= 0 && alpha_target > 1)
        throw std::invalid_argument("config: alpha_target in [0,1]");
    if (gamma_target >= 0 && gamma_target > 1)
        throw std::invalid_argument("config: gamma_target in [0,1]");
    if (steps < 0 || batch_size <= 0) throw std::invalid_argument("config: bad steps/batch_size");
    if (!(tau_min > 0 && tau_max < 1 && tau_min < tau_max))
        throw std::invalid_argument("config: tau range must satisfy 0 < tau_min < tau_max < 1");
    difficulty_from_string(gen_difficulty);  // throws on bad value
    model_config();                          // validates geometry + plan
}

std::vector<int> RunConfig::guided_layer_indices() const {
    std::vector<int> out;
    if (guided_layers == "all") {
        for (int l = 0; l < layers; l++) out.push_back(l);
        return out;
    }
    const int q = guided_layers[1] - '0';
    const int lo = layers * (q - 1) / 4;
    const int hi = layers * q / 4;
    for (int l = lo; l < hi; l++) out.push_back(l);
    if (out.empty())
        throw std::invalid_argument("config: quartile " + guided_layers + " selects no layer");
    return out;
}

ModelConfig RunConfig::model_config() const {
    ModelConfig mc;
    mc.layers = layers;
    mc.heads = heads;
    mc.head_dim = head_dim;
    mc.mlp_hidden = mlp_hidden;
    mc.plan.num_heads = heads;
    mc.plan.fusion_mode = fusion_mode_from_string(fusion_mode);
    mc.plan.guided_layers = guided_layer_indices();
    mc.depth_enabled = depth_enabled;
    mc.depth_downsample = depth_downsample;
    mc.adapter_enabled = stage == "guided";
    if (mixture) {
        // Mixture protocol: no routing specialization; depth keys are appended
        // to the joint cache so every head sees everything. Loss head sets are
        // widened by the trainer.
        mc.plan.object_heads = {};
        mc.plan.skill_heads = {};
        mc.plan.depth_heads = {};
        mc.mixture_depth_concat = depth_enabled;
    } else {
        mc.plan.object_heads = object_heads;
        mc.plan.skill_heads = skill_heads;
        mc.plan.depth_heads = depth_heads;
    }
    mc.validate();
    return mc;
}

std::string RunConfig::canonical() const {
    std::map<std::string, std::string> kv;
    kv["seed"] = std::to_string(seed);
    kv["dataset_dir"] = dataset_dir;
    kv["out_dir"] = out_dir;
    kv["stage"] = stage;
    kv["layers"] = std::to_string(layers);
    kv["heads"] = std::to_string(heads);
    kv["head_dim"] = std::to_string(head_dim);
    kv["mlp_hidden"] = std::to_string(mlp_hidden);
    kv["object_heads"] = fmt_int_list(object_heads);
    kv["skill_heads"] = fmt_int_list(skill_heads);
    kv["depth_heads"] = fmt_int_list(depth_heads);
    kv["guided_layers"] = guided_layers;
    kv["fusion_mode"] = fusion_mode;
    kv["lambda_object"] = fmt_double(lambda_object);
    kv["lambda_skill"] = fmt_double(lambda_skill);
    kv["supervision_object"] = supervision_object;
    kv["supervision_skill"] = supervision_skill;
    kv["gaussian_sigma"] = fmt_double(gaussian_sigma);
    kv["mask_tau"] = fmt_double(mask_tau);
    kv["depth_enabled"] = depth_enabled ? "true" : "false";
    kv["depth_downsample"] = std::to_string(depth_downsample);
    kv["depth_delta"] = fmt_double(depth_delta);
    kv["alpha_target"] = fmt_double(alpha_target);
    kv["gamma_target"] = fmt_double(gamma_target);
    kv["object_clamp_weight"] = fmt_double(object_clamp_weight);
    kv["skill_clamp_weight"] = fmt_double(skill_clamp_weight);
    kv["steps"] = std::to_string(steps);
    kv["batch_size"] = std::to_string(batch_size);
    kv["lr_peak"] = fmt_double(lr_peak);
    kv["lr_warmup"] = std::to_string(lr_warmup);
    kv["lr_floor_frac"] = fmt_double(lr_floor_frac);
    kv["optimizer"] = optimizer;
    kv["grad_clip"] = fmt_double(grad_clip);
    kv["tau_min"] = fmt_double(tau_min);
    kv["tau_max"] = fmt_double(tau_max);
    kv["eval_every"] = std::to_string(eval_every);
    kv["eval_rollouts"] = std::to_string(eval_rollouts);
    kv["eval_horizon"] = std::to_string(eval_horizon);
    kv["eval_batches"] = std::to_string(eval_batches);
    kv["mixture"] = mixture ? "true" : "false";
    kv["deterministic"] = deterministic ? "true" : "false";
    kv["init_checkpoint"] = init_checkpoint;
    kv["gen_episodes"] = std::to_string(gen_episodes);
    kv["gen_difficulty"] = gen_difficulty;
    std::string out;
    for (const auto& [k, v] : kv) out += k + " = " + v + "\n";
    return out;
}

std::string RunConfig::hash() const {
    // out_dir names where results land, not what the experiment is; drop it
    // so reruns into fresh directories keep their row identity.
    std::istringstream is(canonical());
    std::string text, line;
    while (std::getline(is, line))
        if (line.rfind("out_dir ", 0) != 0) text += line + "\n";
    uint64_t h = 0xcbf29ce484222325ULL;
    for (unsigned char ch : text) {
        h ^= ch;
        h *= 0x100000001b3ULL;
    }
    char buf[17];
    std::snprintf(buf, sizeof(buf), "%016llx", static_cast<unsigned long long>(h));
    return buf;
}

}  // namespace headspec
