#pragma once

#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <functional>
#include <limits>
#include <numbers>
#include <numeric>
#include <optional>
#include <random>
#include <string>
#include <thread>
#include <vector>

#include "json.hpp"
#include "msfs/checkpoint.hpp"
#include "msfs/data.hpp"
#include "msfs/losses.hpp"
#include "msfs/metrics.hpp"
#include "msfs/network.hpp"

namespace msfs {

struct TrainConfig {
    double lr_init = 2e-4;
    double lr_min = 1e-7;
    std::size_t total_steps = 1000;
    std::size_t batch_size = 32;
    std::size_t patch = 256;
    double adam_beta1 = 0.9;
    double adam_beta2 = 0.999;
    double adam_eps = 1e-8;
    std::uint64_t seed = 0;
    std::size_t eval_every = 0;        // 0: evaluate once, after the last step
    std::size_t checkpoint_every = 0;  // 0: checkpoint once, after the last step
    double grad_clip = 0;              // global-norm clip; 0 disables
    std::size_t workers = 1;

    void validate() const {
        if (!(lr_init > 0)) throw ConfigError("train.lr_init must be > 0");
        if (!(lr_min >= 0) || lr_min > lr_init) throw ConfigError("train.lr_min must be in [0, lr_init]");
        if (batch_size == 0) throw ConfigError("train.batch_size must be >= 1");
        if (patch == 0 || patch % kPadMultiple != 0) throw ConfigError("train.patch must be a positive multiple of 8");
        if (!(adam_beta1 >= 0 && adam_beta1 < 1)) throw ConfigError("train.adam_beta1 must be in [0, 1)");
        if (!(adam_beta2 >= 0 && adam_beta2 < 1)) throw ConfigError("train.adam_beta2 must be in [0, 1)");
        if (!(adam_eps > 0)) throw ConfigError("train.adam_eps must be > 0");
        if (grad_clip < 0) throw ConfigError("train.grad_clip must be >= 0");
        if (workers == 0) throw ConfigError("train.workers must be >= 1");
    }
};

/// Cosine annealing from lr_init at step 0 to lr_min at total_steps.
inline double cosine_lr(std::size_t step, const TrainConfig& cfg) {
    if (step > cfg.total_steps)
        throw InvalidInputError("cosine_lr: step " + std::to_string(step) + " outside [0, " +
                                std::to_string(cfg.total_steps) + "]");
    if (step == 0) return cfg.lr_init;
    if (step == cfg.total_steps) return cfg.lr_min;
    const double t = static_cast<double>(step) / static_cast<double>(cfg.total_steps);
    return cfg.lr_min + 0.5 * (cfg.lr_init - cfg.lr_min) * (1.0 + std::cos(std::numbers::pi * t));
}

// ---------------------------------------------------------------- Adam

template <typename T>
struct AdamState {
    std::size_t step = 0;
    std::vector<Tensor<T>> m, v;
};

/// One bias-corrected Adam update over every entry of the store. Entries
/// without a gradient buffer count as zero gradient.
template <typename T>
void adam_step(ParameterStore<T>& store, AdamState<T>& st, double lr, const TrainConfig& cfg) {
    const auto& entries = store.entries();
    if (st.m.empty()) {
        for (const auto& [_, p] : entries) {
            st.m.emplace_back(p.shape(), T(0));
            st.v.emplace_back(p.shape(), T(0));
        }
    }
    if (st.m.size() != entries.size()) throw InvalidInputError("adam_step: optimizer state does not match the store");
    double clip = 1.0;
    if (cfg.grad_clip > 0) {
        double sq = 0;
        for (const auto& [_, p] : entries)
            if (p.has_grad())
                for (T g : p.grad().values()) sq += static_cast<double>(g) * static_cast<double>(g);
        const double norm = std::sqrt(sq);
        if (norm > cfg.grad_clip) clip = cfg.grad_clip / norm;
    }
    for (const auto& [path, p] : entries)
        if (p.has_grad() && !p.grad().all_finite()) throw NumericalError("non-finite gradient for parameter " + path);

    ++st.step;
    const double b1 = cfg.adam_beta1, b2 = cfg.adam_beta2;
    const double c1 = 1.0 - std::pow(b1, static_cast<double>(st.step));
    const double c2 = 1.0 - std::pow(b2, static_cast<double>(st.step));
    for (std::size_t i = 0; i < entries.size(); ++i) {
        Var<T> p = entries[i].second;
        auto& m = st.m[i];
        auto& v = st.v[i];
        if (m.shape() != p.shape()) throw InvalidInputError("adam_step: moment shape mismatch for " + entries[i].first);
        auto& w = p.mutable_value();
        const bool has = p.has_grad();
        for (std::size_t j = 0; j < w.size(); ++j) {
            const double g = has ? static_cast<double>(p.grad()[j]) * clip : 0.0;
            const double mj = b1 * static_cast<double>(m[j]) + (1 - b1) * g;
            const double vj = b2 * static_cast<double>(v[j]) + (1 - b2) * g * g;
            m[j] = static_cast<T>(mj);
            v[j] = static_cast<T>(vj);
            w[j] = static_cast<T>(static_cast<double>(w[j]) - lr * (mj / c1) / (std::sqrt(vj / c2) + cfg.adam_eps));
        }
    }
}

// ---------------------------------------------------------------- evaluation

enum class Protocol { rgb, y };

inline Protocol parse_protocol(const std::string& s) {
    if (s == "rgb") return Protocol::rgb;
    if (s == "y" || s == "y_channel") return Protocol::y;
    throw ConfigError("protocol must be rgb or y, got '" + s + "'");
}

inline std::string to_string(Protocol p) { return p == Protocol::rgb ? "rgb" : "y"; }

struct ImageMetrics {
    std::string id;
    double psnr = 0;
    double ssim = 0;
};

struct EvalReport {
    std::string dataset;
    Protocol protocol = Protocol::rgb;
    std::vector<ImageMetrics> images;
    double mean_psnr = 0;
    double mean_ssim = 0;
};

template <typename T>
ImageMetrics score(const Tensor<T>& restored, const Tensor<T>& clean, Protocol protocol, std::string id = {}) {
    Tensor<T> a = restored;
    clamp01(a);
    if (protocol == Protocol::y) return {std::move(id), psnr(rgb_to_y(a), rgb_to_y(clean)), ssim(rgb_to_y(a), rgb_to_y(clean))};
    return {std::move(id), psnr(a, clean), ssim(a, clean)};
}

inline void finalize_means(EvalReport& r) {
    double p = 0, s = 0;
    for (const auto& m : r.images) {
        p += m.psnr;
        s += m.ssim;
    }
    const double n = static_cast<double>(r.images.size());
    r.mean_psnr = r.images.empty() ? 0 : p / n;
    r.mean_ssim = r.images.empty() ? 0 : s / n;
}

/// Restores every full image (pad/crop path) and scores it against its clean
/// target; outputs are clamped to [0, 1] before scoring.
template <typename T>
EvalReport evaluate(const Model<T>& model, const std::vector<ImagePair<float>>& pairs, Protocol protocol,
                    std::string dataset = {}) {
    EvalReport r{std::move(dataset), protocol, {}, 0, 0};
    for (const auto& p : pairs) {
        auto out = model.forward(p.degraded.template cast<T>()).restored[0];
        r.images.push_back(score(out.template cast<float>(), p.clean, protocol, p.id));
    }
    finalize_means(r);
    return r;
}

/// Metrics of the degraded inputs themselves.
inline EvalReport baseline(const std::vector<ImagePair<float>>& pairs, Protocol protocol, std::string dataset = {}) {
    EvalReport r{std::move(dataset), protocol, {}, 0, 0};
    for (const auto& p : pairs) r.images.push_back(score(p.degraded, p.clean, protocol, p.id));
    finalize_means(r);
    return r;
}

// JSON has no infinity; identical images are written as the string "inf".
inline nlohmann::json json_number(double v) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    return v;
}

inline nlohmann::json to_json(const EvalReport& r) {
    nlohmann::json j;
    j["dataset"] = r.dataset;
    j["protocol"] = to_string(r.protocol);
    j["psnr_db"] = json_number(r.mean_psnr);
    j["ssim"] = r.mean_ssim;
    j["n_images"] = r.images.size();
    auto& per = j["images"] = nlohmann::json::array();
    for (const auto& m : r.images) per.push_back({{"id", m.id}, {"psnr_db", json_number(m.psnr)}, {"ssim", m.ssim}});
    return j;
}

inline std::string format_double(double v, int digits = 6) {
    if (std::isinf(v)) return v > 0 ? "inf" : "-inf";
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.*f", digits, v);
    return buf;
}

inline std::string to_text(const EvalReport& r) {
    std::string s;
    for (const auto& m : r.images) s += m.id + "  psnr " + format_double(m.psnr, 4) + " dB  ssim " + format_double(m.ssim) + "\n";
    s += "dataset " + r.dataset + "  protocol " + to_string(r.protocol) + "  n_images " + std::to_string(r.images.size()) +
         "\nmean psnr " + format_double(r.mean_psnr, 4) + " dB\nmean ssim " + format_double(r.mean_ssim) + "\n";
    return s;
}

// ---------------------------------------------------------------- sampling

/// Worker count: MSFS_NUM_WORKERS overrides the configured value.
inline std::size_t resolve_workers(std::size_t configured) {
    if (const char* env = std::getenv("MSFS_NUM_WORKERS"); env && *env) {
        try {
            const auto n = detail::parse_count("MSFS_NUM_WORKERS", env);
            if (n > 0) return n;
        } catch (const ConfigError&) {
        }
        throw ConfigError(std::string("MSFS_NUM_WORKERS must be a positive integer, got '") + env + "'");
    }
    return configured;
}

/// Training patches as a pure function of (seed, global sample index): sample
/// s belongs to epoch s / N, whose visiting order is a seeded permutation.
class PatchSampler {
public:
    PatchSampler(const std::vector<ImagePair<float>>& data, std::size_t patch, std::uint64_t seed,
                 std::optional<DegradationSpec> online = std::nullopt)
        : data_(&data), patch_(patch), seed_(seed), online_(std::move(online)) {
        if (data.empty()) throw DataError("training set is empty");
    }

    ImagePair<float> sample(std::size_t s) const {
        const std::size_t n = data_->size(), epoch = s / n, pos = s % n;
        std::vector<std::size_t> order(n);
        std::iota(order.begin(), order.end(), std::size_t{0});
        std::mt19937_64 perm(derive_seed(seed_, 1, epoch));
        std::shuffle(order.begin(), order.end(), perm);
        std::mt19937_64 rng(derive_seed(seed_, 2, s));
        auto p = sample_patch((*data_)[order[pos]], patch_, rng);
        if (online_) p.degraded = degrade(p.clean, *online_, derive_seed(seed_, 3, s));
        return p;
    }

    /// Samples [first, first + count) using up to `workers` threads; the result
    /// does not depend on the worker count.
    std::vector<ImagePair<float>> batch(std::size_t first, std::size_t count, std::size_t workers) const {
        std::vector<ImagePair<float>> out(count);
        workers = std::min(workers, count);
        if (workers <= 1) {
            for (std::size_t i = 0; i < count; ++i) out[i] = sample(first + i);
            return out;
        }
        std::vector<std::thread> pool;
        for (std::size_t w = 0; w < workers; ++w)
            pool.emplace_back([&, w] {
                for (std::size_t i = w; i < count; i += workers) out[i] = sample(first + i);
            });
        for (auto& t : pool) t.join();
        return out;
    }

private:
    const std::vector<ImagePair<float>>* data_;
    std::size_t patch_;
    std::uint64_t seed_;
    std::optional<DegradationSpec> online_;
};

template <typename T>
std::array<Tensor<T>, kScales> to_pyramid(const Tensor<float>& img) {
    auto pyr = input_pyramid(img.cast<T>(), kScales);
    std::array<Tensor<T>, kScales> out;
    for (std::size_t l = 0; l < kScales; ++l) out[l] = std::move(pyr[l]);
    return out;
}

// ---------------------------------------------------------------- training loop

struct LogRow {
    std::size_t step = 0;
    double lr = 0;
    double loss_total = 0, loss_spatial = 0, loss_freq = 0;
    std::optional<double> eval_psnr, eval_ssim;
};

inline std::string csv_header() { return "step,lr,loss_total,loss_spatial,loss_freq,eval_psnr,eval_ssim"; }

inline std::string csv_line(const LogRow& r) {
    char buf[256];
    std::snprintf(buf, sizeof buf, "%zu,%.9g,%.9g,%.9g,%.9g,", r.step, r.lr, r.loss_total, r.loss_spatial, r.loss_freq);
    std::string s = buf;
    if (r.eval_psnr) s += std::isinf(*r.eval_psnr) ? "inf" : (std::snprintf(buf, sizeof buf, "%.6f", *r.eval_psnr), buf);
    s += ",";
    if (r.eval_ssim) s += (std::snprintf(buf, sizeof buf, "%.6f", *r.eval_ssim), buf);
    return s;
}

struct TrainPaths {
    std::filesystem::path output_dir;  // receives checkpoint.msfs and train_log.csv; empty: nothing written
    std::filesystem::path init_checkpoint;
};

struct TrainResult {
    Model<float> model;
    std::vector<LogRow> log;
    std::filesystem::path checkpoint;
    std::filesystem::path csv;
};

struct TrainInputs {
    ModelConfig model;
    TrainConfig train;
    LossConfig loss;
    std::vector<ImagePair<float>> data;
    std::vector<ImagePair<float>> eval;  // empty: evaluate on the training pairs
    std::optional<DegradationSpec> online;
    TrainPaths paths;
    std::function<void(const LogRow&)> on_step;
};

/// sample -> forward -> loss -> backward -> Adam, with cosine learning rate.
/// Gradients are averaged over the batch. A non-finite loss aborts with the
/// last written checkpoint left untouched.
inline TrainResult train(const TrainInputs& in) {
    in.model.validate();
    in.train.validate();
    in.loss.validate();
    const auto& tc = in.train;
    if (in.data.empty()) throw DataError("training set is empty");

    auto model = Model<float>::build(in.model, tc.seed);
    if (!in.paths.init_checkpoint.empty()) apply_checkpoint(load_checkpoint(in.paths.init_checkpoint), model);

    TrainResult res{model, {}, {}, {}};
    std::ofstream csv;
    if (!in.paths.output_dir.empty()) {
        std::filesystem::create_directories(in.paths.output_dir);
        res.checkpoint = in.paths.output_dir / "checkpoint.msfs";
        res.csv = in.paths.output_dir / "train_log.csv";
        csv.open(res.csv, std::ios::trunc);
        if (!csv) throw DataError("cannot write " + res.csv.string());
        csv << csv_header() << "\n";
        csv.flush();
    }
    auto checkpoint = [&](std::size_t step) {
        if (!res.checkpoint.empty()) save_checkpoint(res.checkpoint, model, step, tc.seed);
    };

    const auto& eval_set = in.eval.empty() ? in.data : in.eval;
    const PatchSampler sampler(in.data, tc.patch, tc.seed, in.online);
    const std::size_t workers = resolve_workers(tc.workers);
    AdamState<float> opt;
    auto& store = model.parameters();
    const float inv_batch = 1.f / static_cast<float>(tc.batch_size);

    for (std::size_t step = 1; step <= tc.total_steps; ++step) {
        const double lr = cosine_lr(step - 1, tc);
        store.zero_grad();
        LogRow row{step, lr, 0, 0, 0, std::nullopt, std::nullopt};
        for (const auto& p : sampler.batch((step - 1) * tc.batch_size, tc.batch_size, workers)) {
            const auto preds = model.forward_scales(to_pyramid<float>(p.degraded));
            const auto terms = total_loss(preds, constant_scales(to_pyramid<float>(p.clean)), in.loss);
            const double lt = terms.total.value()[0];
            if (!std::isfinite(lt)) throw NumericalError("non-finite loss at step " + std::to_string(step));
            row.loss_total += lt / static_cast<double>(tc.batch_size);
            row.loss_spatial += terms.spatial.value()[0] / static_cast<double>(tc.batch_size);
            row.loss_freq += terms.frequency.value()[0] / static_cast<double>(tc.batch_size);
            backward(scale(terms.total, inv_batch));
        }
        adam_step(store, opt, lr, tc);

        const bool last = step == tc.total_steps;
        if ((tc.eval_every && step % tc.eval_every == 0) || last) {
            const auto rep = evaluate(model, eval_set, Protocol::rgb);
            row.eval_psnr = rep.mean_psnr;
            row.eval_ssim = rep.mean_ssim;
        }
        res.log.push_back(row);
        if (csv.is_open()) {
            csv << csv_line(row) << "\n";
            csv.flush();
        }
        if (in.on_step) in.on_step(row);
        if ((tc.checkpoint_every && step % tc.checkpoint_every == 0) || last) checkpoint(step);
    }
    if (tc.total_steps == 0) checkpoint(0);
    res.model = model;
    return res;
}

} // namespace msfs
