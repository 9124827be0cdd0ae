// msfs: train, infer, eval, synth, selftest.
// Exit codes: 0 ok, 1 property or numerical failure, 2 config, 3 checkpoint, 4 data.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "json.hpp"
#include "msfs/checkpoint.hpp"
#include "msfs/config.hpp"
#include "msfs/data.hpp"
#include "msfs/selftest.hpp"
#include "msfs/train.hpp"

namespace fs = std::filesystem;
using namespace msfs;

namespace {

enum Exit { kOk = 0, kFailure = 1, kConfig = 2, kCheckpoint = 3, kData = 4 };

void write_text(const fs::path& p, const std::string& s) {
    if (p.has_parent_path()) fs::create_directories(p.parent_path());
    std::ofstream os(p, std::ios::trunc);
    if (!os) throw DataError("cannot write " + p.string());
    os << s;
}

std::vector<ImagePair<float>> training_pairs(const RunConfig& c) {
    if (!c.paths.train_clean.empty()) return load_pair_dataset(c.paths.train_degraded, c.paths.train_clean);
    return synthetic_pairs(c);
}

int cmd_train(const fs::path& config_path, std::optional<std::uint64_t> seed) {
    if (!fs::exists(config_path)) throw ConfigError("config file not found: " + config_path.string());
    auto cfg = load_run_config(config_path);
    if (seed) cfg.train.seed = *seed;
    validate_paths(cfg);

    TrainInputs in;
    in.model = cfg.model;
    in.train = cfg.train;
    in.loss = cfg.loss;
    in.data = training_pairs(cfg);
    if (in.data.empty()) throw DataError("no training pairs found");
    if (!cfg.paths.eval_clean.empty()) in.eval = load_pair_dataset(cfg.paths.eval_degraded, cfg.paths.eval_clean);
    if (cfg.online_degradation) in.online = cfg.degradation;
    in.paths = {cfg.paths.output_dir, cfg.paths.init_checkpoint};
    const std::size_t every = std::max<std::size_t>(1, cfg.train.total_steps / 20);
    in.on_step = [&](const LogRow& r) {
        if (r.step % every && !r.eval_psnr) return;
        std::printf("step %zu/%zu  lr %.3g  loss %.5f", r.step, cfg.train.total_steps, r.lr, r.loss_total);
        if (r.eval_psnr) std::printf("  eval psnr %s dB  ssim %.4f", format_double(*r.eval_psnr, 3).c_str(), *r.eval_ssim);
        std::printf("\n");
        std::fflush(stdout);
    };

    nlohmann::json run;
    run["seed"] = cfg.train.seed;
    run["config"] = config_path.string();
    run["training_pairs"] = in.data.size();
    write_text(cfg.paths.output_dir / "run.json", run.dump(2) + "\n");

    auto res = train(in);
    std::printf("wrote %s and %s\n", res.checkpoint.string().c_str(), res.csv.string().c_str());
    return kOk;
}

Model<float> load_model(const fs::path& ckpt_path, const fs::path& config_path, std::uint64_t* seed = nullptr) {
    auto ck = load_checkpoint(ckpt_path);
    if (seed) *seed = ck.seed;
    if (config_path.empty()) return model_from_checkpoint<float>(ck);
    auto model = Model<float>::build(load_run_config(config_path).model, 0);
    apply_checkpoint(ck, model);
    return model;
}

int cmd_infer(const fs::path& ckpt, const fs::path& input, const fs::path& output, const fs::path& config) {
    if (!fs::exists(input)) throw DataError("input not found: " + input.string());
    auto model = load_model(ckpt, config);
    std::vector<std::pair<fs::path, fs::path>> jobs;
    if (fs::is_directory(input)) {
        for (const auto& name : list_pngs(input)) jobs.emplace_back(input / name, output / name);
        fs::create_directories(output);
    } else {
        jobs.emplace_back(input, fs::is_directory(output) ? output / input.filename() : output);
    }
    for (const auto& [src, dst] : jobs) {
        auto out = model.forward(read_png(src)).restored[0];
        write_png(dst, out);
        std::printf("%s -> %s\n", src.string().c_str(), dst.string().c_str());
    }
    return kOk;
}

int cmd_eval(const fs::path& ckpt, const fs::path& degraded, const fs::path& clean, const std::string& protocol,
             const fs::path& output, const fs::path& config) {
    const auto proto = parse_protocol(protocol);
    std::uint64_t seed = 0;
    auto model = load_model(ckpt, config, &seed);
    auto pairs = load_pair_dataset(degraded, clean);
    auto rep = evaluate(model, pairs, proto, degraded.filename().string());
    const auto text = to_text(rep);
    std::cout << text;
    if (!output.empty()) {
        auto j = to_json(rep);
        j["seed"] = seed;
        write_text(output / "eval_report.txt", text);
        write_text(output / "eval_report.json", j.dump(2) + "\n");
    }
    return kOk;
}

int cmd_synth(const fs::path& clean_dir, const fs::path& out_dir, const fs::path& config,
              std::optional<std::uint64_t> seed_flag, const std::string& kind, std::optional<double> sigma) {
    RunConfig cfg;
    if (!config.empty()) {
        if (!fs::exists(config)) throw ConfigError("config file not found: " + config.string());
        cfg = load_run_config(config);
    }
    if (!kind.empty()) cfg.degradation.kind = parse_degradation_kind(kind);
    if (sigma) cfg.degradation.sigma = *sigma;
    cfg.degradation.validate();
    const std::uint64_t root = seed_flag.value_or(cfg.train.seed);
    const auto names = list_pngs(clean_dir);
    if (names.empty()) throw DataError("no PNG files in " + clean_dir.string());
    fs::create_directories(out_dir);

    nlohmann::json m;
    m["root_seed"] = root;
    m["kind"] = to_string(cfg.degradation.kind);
    const auto& d = cfg.degradation;
    switch (d.kind) {
    case DegradationKind::gaussian_noise: m["sigma"] = d.sigma; break;
    case DegradationKind::gaussian_blur:
        m["blur_sigma"] = d.blur_sigma;
        m["blur_kernel"] = d.blur_kernel;
        break;
    case DegradationKind::rain_streaks:
        m["rain"] = {{"count", d.rain.count}, {"length", d.rain.length}, {"angle", d.rain.angle},
                     {"angle_jitter", d.rain.angle_jitter}, {"intensity", d.rain.intensity}};
        break;
    }
    auto& files = m["files"] = nlohmann::json::array();
    for (std::size_t i = 0; i < names.size(); ++i) {
        const std::uint64_t s = derive_seed(root, 300, i);
        write_png(out_dir / names[i], degrade(read_png(clean_dir / names[i]), d, s));
        files.push_back({{"name", names[i]}, {"seed", s}});
    }
    write_text(out_dir / "manifest.json", m.dump(2) + "\n");
    std::printf("wrote %zu degraded images and manifest.json to %s\n", names.size(), out_dir.string().c_str());
    return kOk;
}

int cmd_selftest(const std::string& fault) {
    if (!fault.empty()) {
        if (fault != "kernel_normalization") throw ConfigError("unknown fault '" + fault + "'");
        testing::break_kernel_normalization() = true;
    }
    return run_selftest(std::cout).all_pass() ? kOk : kFailure;
}

} // namespace

int main(int argc, char** argv) {
    CLI::App app{"Multi-scale frequency-selection restoration network"};
    app.require_subcommand(1);
    std::string config, checkpoint, input, output, clean, protocol = "rgb", kind, fault;
    std::optional<std::uint64_t> seed;
    std::optional<double> sigma;

    auto* tr = app.add_subcommand("train", "train a model from a config file");
    tr->add_option("--config", config, "run config")->required();
    tr->add_option("--seed", seed, "override train.seed");

    auto* inf = app.add_subcommand("infer", "restore a PNG or a directory of PNGs");
    inf->add_option("--checkpoint", checkpoint)->required();
    inf->add_option("--input", input)->required();
    inf->add_option("--output", output)->required();
    inf->add_option("--config", config, "check the checkpoint against this model config");

    auto* ev = app.add_subcommand("eval", "score a checkpoint on a paired dataset");
    ev->add_option("--checkpoint", checkpoint)->required();
    ev->add_option("--input", input, "directory of degraded PNGs")->required();
    ev->add_option("--clean", clean, "directory of clean PNGs")->required();
    ev->add_option("--protocol", protocol)->check(CLI::IsMember({"rgb", "y", "y_channel"}));
    ev->add_option("--output", output, "directory for eval_report.txt and eval_report.json");
    ev->add_option("--config", config);

    auto* sy = app.add_subcommand("synth", "write degraded copies of clean PNGs");
    sy->add_option("--input", input, "directory of clean PNGs")->required();
    sy->add_option("--output", output)->required();
    sy->add_option("--config", config, "reads the [degradation] and [train] seed settings");
    sy->add_option("--seed", seed);
    sy->add_option("--kind", kind, "gaussian_noise, gaussian_blur or rain_streaks");
    sy->add_option("--sigma", sigma, "noise level on the 0..255 scale");

    auto* st = app.add_subcommand("selftest", "run the built-in property checks");
    st->add_option("--inject-fault", fault, "kernel_normalization")->group("");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int rc = app.exit(e);
        return rc == 0 ? kOk : kConfig;
    }

    try {
        if (*tr) return cmd_train(config, seed);
        if (*inf) return cmd_infer(checkpoint, input, output, config);
        if (*ev) return cmd_eval(checkpoint, input, clean, protocol, output, config);
        if (*sy) return cmd_synth(input, output, config, seed, kind, sigma);
        if (*st) return cmd_selftest(fault);
    } catch (const ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return kConfig;
    } catch (const CheckpointError& e) {
        std::cerr << "checkpoint error: " << e.what() << "\n";
        return kCheckpoint;
    } catch (const DataError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const InvalidInputError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const GeometryError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return kData;
    } catch (const NumericalError& e) {
        std::cerr << "numerical failure: " << e.what() << "\n";
        return kFailure;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return kFailure;
    }
    return kOk;
}
