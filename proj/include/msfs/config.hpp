#pragma once

// Run configuration file: "key = value" lines under [section] headers.
// '#' and ';' start comments. Unknown sections and keys are errors.
//
//   [model]        width, enc_blocks, dec_blocks, middle_blocks, groups,
//                  use_dfs, use_sff, max_tokens
//   [train]        lr_init, lr_min, total_steps, batch_size, patch, adam_beta1,
//                  adam_beta2, adam_eps, seed, eval_every, checkpoint_every,
//                  grad_clip, workers
//   [loss]         lambda_freq
//   [degradation]  kind, sigma, blur_sigma, blur_kernel, rain_count,
//                  rain_length, rain_angle, rain_angle_jitter, rain_intensity,
//                  online
//   [data]         synthetic_count, synthetic_size
//   [paths]        train_degraded, train_clean, eval_degraded, eval_clean,
//                  output_dir, init_checkpoint

#include <filesystem>
#include <fstream>
#include <set>
#include <sstream>
#include <string>

#include "msfs/data.hpp"
#include "msfs/losses.hpp"
#include "msfs/network.hpp"
#include "msfs/train.hpp"

namespace msfs {

struct DataConfig {
    std::size_t synthetic_count = 0;  // used when no training directories are given
    std::size_t synthetic_size = 64;
};

struct PathsConfig {
    std::filesystem::path train_degraded, train_clean, eval_degraded, eval_clean, output_dir, init_checkpoint;
};

struct RunConfig {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    DegradationSpec degradation;
    bool online_degradation = false;
    DataConfig data;
    PathsConfig paths;
};

namespace detail {

inline std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r"), e = s.find_last_not_of(" \t\r");
    return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
}

inline double parse_real(const std::string& key, const std::string& s) {
    std::size_t pos = 0;
    double v = 0;
    try {
        v = std::stod(s, &pos);
    } catch (const std::exception&) {
        pos = 0;
    }
    if (pos == 0 || pos != s.size() || !std::isfinite(v)) throw ConfigError(key + ": expected a number, got '" + s + "'");
    return v;
}

inline void set_train_key(TrainConfig& t, const std::string& k, const std::string& v) {
    const std::string n = "train." + k;
    if (k == "lr_init") t.lr_init = parse_real(n, v);
    else if (k == "lr_min") t.lr_min = parse_real(n, v);
    else if (k == "total_steps") t.total_steps = parse_count(n, v);
    else if (k == "batch_size") t.batch_size = parse_count(n, v);
    else if (k == "patch") t.patch = parse_count(n, v);
    else if (k == "adam_beta1") t.adam_beta1 = parse_real(n, v);
    else if (k == "adam_beta2") t.adam_beta2 = parse_real(n, v);
    else if (k == "adam_eps") t.adam_eps = parse_real(n, v);
    else if (k == "seed") t.seed = parse_count(n, v);
    else if (k == "eval_every") t.eval_every = parse_count(n, v);
    else if (k == "checkpoint_every") t.checkpoint_every = parse_count(n, v);
    else if (k == "grad_clip") t.grad_clip = parse_real(n, v);
    else if (k == "workers") t.workers = parse_count(n, v);
    else throw ConfigError("unknown key " + n);
}

inline void set_degradation_key(RunConfig& c, const std::string& k, const std::string& v) {
    const std::string n = "degradation." + k;
    auto& d = c.degradation;
    if (k == "kind") d.kind = parse_degradation_kind(v);
    else if (k == "sigma") d.sigma = parse_real(n, v);
    else if (k == "blur_sigma") d.blur_sigma = parse_real(n, v);
    else if (k == "blur_kernel") d.blur_kernel = parse_count(n, v);
    else if (k == "rain_count") d.rain.count = parse_count(n, v);
    else if (k == "rain_length") d.rain.length = parse_real(n, v);
    else if (k == "rain_angle") d.rain.angle = parse_real(n, v);
    else if (k == "rain_angle_jitter") d.rain.angle_jitter = parse_real(n, v);
    else if (k == "rain_intensity") d.rain.intensity = parse_real(n, v);
    else if (k == "online") c.online_degradation = parse_bool(n, v);
    else throw ConfigError("unknown key " + n);
}

inline void set_key(RunConfig& c, const std::string& section, const std::string& k, const std::string& v) {
    if (section == "model") set_model_key(c.model, k, v);
    else if (section == "train") set_train_key(c.train, k, v);
    else if (section == "loss") {
        if (k == "lambda_freq") c.loss.lambda_freq = parse_real("loss.lambda_freq", v);
        else throw ConfigError("unknown key loss." + k);
    } else if (section == "degradation") set_degradation_key(c, k, v);
    else if (section == "data") {
        if (k == "synthetic_count") c.data.synthetic_count = parse_count("data.synthetic_count", v);
        else if (k == "synthetic_size") c.data.synthetic_size = parse_count("data.synthetic_size", v);
        else throw ConfigError("unknown key data." + k);
    } else if (section == "paths") {
        auto& p = c.paths;
        if (k == "train_degraded") p.train_degraded = v;
        else if (k == "train_clean") p.train_clean = v;
        else if (k == "eval_degraded") p.eval_degraded = v;
        else if (k == "eval_clean") p.eval_clean = v;
        else if (k == "output_dir") p.output_dir = v;
        else if (k == "init_checkpoint") p.init_checkpoint = v;
        else throw ConfigError("unknown key paths." + k);
    } else
        throw ConfigError("unknown section [" + section + "]");
}

} // namespace detail

/// Parses config text. Relative paths are resolved against `base_dir`.
inline RunConfig parse_run_config(const std::string& text, const std::string& origin = "config",
                                  const std::filesystem::path& base_dir = {}) {
    RunConfig c;
    std::istringstream is(text);
    std::string line, section;
    std::set<std::string> seen;
    for (std::size_t lineno = 1; std::getline(is, line); ++lineno) {
        const auto cut = line.find_first_of("#;");
        line = detail::trim(cut == std::string::npos ? line : line.substr(0, cut));
        if (line.empty()) continue;
        const std::string where = origin + ":" + std::to_string(lineno) + ": ";
        if (line.front() == '[') {
            if (line.back() != ']') throw ConfigError(where + "malformed section header '" + line + "'");
            section = detail::trim(line.substr(1, line.size() - 2));
            continue;
        }
        const auto eq = line.find('=');
        if (eq == std::string::npos) throw ConfigError(where + "expected key = value, got '" + line + "'");
        const std::string key = detail::trim(line.substr(0, eq)), value = detail::trim(line.substr(eq + 1));
        if (section.empty()) throw ConfigError(where + "key " + key + " appears before any [section]");
        if (!seen.insert(section + "." + key).second) throw ConfigError(where + "duplicate key " + section + "." + key);
        try {
            detail::set_key(c, section, key, value);
        } catch (const ConfigError& e) {
            throw ConfigError(where + e.what());
        }
    }
    for (auto* p : {&c.paths.train_degraded, &c.paths.train_clean, &c.paths.eval_degraded, &c.paths.eval_clean,
                    &c.paths.output_dir, &c.paths.init_checkpoint})
        if (!p->empty() && p->is_relative() && !base_dir.empty()) *p = base_dir / *p;
    c.model.validate();
    c.train.validate();
    c.loss.validate();
    c.degradation.validate();
    return c;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
    std::ifstream is(path);
    if (!is) throw ConfigError("cannot read config file " + path.string());
    std::ostringstream ss;
    ss << is.rdbuf();
    return parse_run_config(ss.str(), path.string(), path.parent_path());
}

/// Referenced inputs must exist; the output directory is created later.
inline void validate_paths(const RunConfig& c) {
    const auto& p = c.paths;
    auto need = [](const std::filesystem::path& v, const char* key) {
        if (!v.empty() && !std::filesystem::exists(v)) throw ConfigError(std::string("paths.") + key + ": " + v.string() + " does not exist");
    };
    need(p.train_degraded, "train_degraded");
    need(p.train_clean, "train_clean");
    need(p.eval_degraded, "eval_degraded");
    need(p.eval_clean, "eval_clean");
    need(p.init_checkpoint, "init_checkpoint");
    if (p.train_degraded.empty() != p.train_clean.empty())
        throw ConfigError("paths.train_degraded and paths.train_clean must be given together");
    if (p.eval_degraded.empty() != p.eval_clean.empty())
        throw ConfigError("paths.eval_degraded and paths.eval_clean must be given together");
    if (p.train_clean.empty() && c.data.synthetic_count == 0)
        throw ConfigError("paths.train_clean: no training data (set it or data.synthetic_count)");
    if (p.output_dir.empty()) throw ConfigError("paths.output_dir must be set");
}

/// Synthetic training pairs drawn from the root seed: clean scenes, degraded
/// once per image.
inline std::vector<ImagePair<float>> synthetic_pairs(const RunConfig& c) {
    std::vector<ImagePair<float>> out;
    const auto n = c.data.synthetic_size;
    for (std::size_t i = 0; i < c.data.synthetic_count; ++i) {
        auto clean = synth_clean_image<float>(n, n, derive_seed(c.train.seed, 100, i));
        char id[32];
        std::snprintf(id, sizeof id, "synth_%03zu", i);
        out.push_back({degrade(clean, c.degradation, derive_seed(c.train.seed, 200, i)), std::move(clean), id});
    }
    return out;
}

} // namespace msfs
