// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

// Command-line front end: synth, train, infer, eval, oracles, bench, gradcheck.

#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "sparsedet3d/checkpoint.hpp"
#include "sparsedet3d/config.hpp"
#include "sparsedet3d/eval.hpp"
#include "sparsedet3d/oracle.hpp"
#include "sparsedet3d/parallel.hpp"
#include "sparsedet3d/scene_io.hpp"
#include "sparsedet3d/synth.hpp"
#include "sparsedet3d/train.hpp"

namespace fs = std::filesystem;
using namespace sparsedet3d;

namespace {

struct Common {
    std::string config_path;
    uint64_t seed = 0;
    bool seed_given = false;
    std::string scenes_dir;
    std::string checkpoint;
    std::string out;
    std::string precision = "f64";
};

RunConfig load_config(const Common& c) {
    RunConfig cfg = c.config_path.empty() ? RunConfig{} : RunConfig::load(c.config_path);
    if (c.seed_given) cfg.seed = c.seed;
    cfg.validate();
    return cfg;
}

oracle::Precision parse_precision(const std::string& s) {
    if (s == "f32") return oracle::Precision::f32;
    if (s == "f64") return oracle::Precision::f64;
    throw std::invalid_argument("--precision must be f32 or f64");
}

// The detector runs in 64-bit arithmetic only.
void require_f64(const Common& c, const char* cmd) {
    if (c.precision != "f64") {
        throw std::invalid_argument(std::string(cmd) + ": the detector pipeline computes in f64; --precision f32 "
                                                       "applies to oracles, bench and gradcheck");
    }
}

int cmd_synth(const Common& c, int n, const std::string& format) {
    if (c.out.empty()) throw std::invalid_argument("synth: --out DIR is required");
    const RunConfig cfg = load_config(c);
    fs::create_directories(c.out);
    const auto scenes = synth_scenes(n, cfg.seed);
    const CloudFormat fmt = parse_cloud_format(format);
    for (const SceneRecord& s : scenes) write_scene(c.out, s, fmt == CloudFormat::automatic ? CloudFormat::text : fmt);
    std::printf("wrote %zu scenes to %s\n", scenes.size(), c.out.c_str());
    return 0;
}

int cmd_train(const Common& c, const std::string& trace_path) {
    require_f64(c, "train");
    if (c.scenes_dir.empty()) throw std::invalid_argument("train: --scenes DIR is required");
    if (c.checkpoint.empty()) throw std::invalid_argument("train: --checkpoint PATH is required");
    const RunConfig cfg = load_config(c);
    const auto scenes = load_scene_dir(c.scenes_dir);
    if (scenes.empty()) throw std::runtime_error("train: no scenes in " + c.scenes_dir);
    Detector model(cfg, estimate_class_sizes(scenes, cfg.num_classes));
    model.init(cfg.seed);

    std::ofstream trace;
    if (!trace_path.empty()) {
        trace.open(trace_path);
        if (!trace) throw std::runtime_error("cannot write " + trace_path);
        trace << "step,epoch,tau";
        for (const auto& n : loss_term_names()) trace << ',' << n;
        trace << ",total,grad_norm,positives,train_proposals\n";
    }
    const auto t0 = std::chrono::steady_clock::now();
    run_toy_train(model, scenes, cfg, [&](const TrainStep& s) {
        const auto v = loss_term_values(s.report.terms);
        if (trace) {
            trace << s.step << ',' << s.epoch << ',' << format_number(s.tau);
            for (double x : v) trace << ',' << format_number(x);
            trace << ',' << format_number(s.report.total) << ',' << format_number(s.grad_norm) << ','
                  << s.report.positives << ',' << s.report.train_proposals << '\n';
        }
        if (s.step % 10 == 0 || s.step + 1 == cfg.steps) {
            const double sec = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
            std::printf("step %4d  epoch %3d  tau %.2f  total %.4f  sem %.3f vote %.3f cntr %.3f box %.3f cls %.3f "
                        "rebox %.3f  |g| %.2f  pos %d  sel %d  %.0fs\n",
                        s.step, s.epoch, s.tau, s.report.total, v[0], v[1], v[2], v[3], v[4], v[5], s.grad_norm,
                        s.report.positives, s.report.train_proposals, sec);
            std::fflush(stdout);
        }
    });
    save_checkpoint(c.checkpoint, model.params(), cfg);
    std::printf("saved %s\n", c.checkpoint.c_str());
    return 0;
}

std::vector<ScenePredictions> predict(const Detector& model, const std::vector<SceneRecord>& scenes) {
    std::vector<ScenePredictions> out;
    for (const SceneRecord& s : scenes) out.push_back({s.scene_id, model.infer(s.cloud)});
    return out;
}

int cmd_infer(const Common& c) {
    require_f64(c, "infer");
    if (c.scenes_dir.empty() || c.checkpoint.empty() || c.out.empty()) {
        throw std::invalid_argument("infer: --scenes, --checkpoint and --out are required");
    }
    const auto model = load_detector(c.checkpoint);
    const auto scenes = load_scene_dir(c.scenes_dir);
    const auto preds = predict(*model, scenes);
    write_predictions(c.out, preds);
    size_t n = 0;
    for (const auto& p : preds) n += p.detections.size();
    std::printf("%zu detections over %zu scenes -> %s\n", n, preds.size(), c.out.c_str());
    return 0;
}

int cmd_eval(const Common& c, const std::string& pred_path, const std::vector<double>& thresholds) {
    if (c.scenes_dir.empty() || pred_path.empty()) {
        throw std::invalid_argument("eval: --scenes and --predictions are required");
    }
    const RunConfig cfg = load_config(c);
    const auto scenes = load_scene_dir(c.scenes_dir);
    const auto preds = read_predictions(pred_path);
    std::vector<std::vector<Detection>> p(scenes.size());
    std::vector<std::vector<GtBox>> g(scenes.size());
    for (size_t i = 0; i < scenes.size(); ++i) {
        g[i] = scenes[i].gt;
        for (const auto& sp : preds) {
            if (sp.scene_id == scenes[i].scene_id) p[i] = sp.detections;
        }
    }
    const EvalResult r = eval_map(p, g, cfg.num_classes, thresholds);
    for (size_t t = 0; t < thresholds.size(); ++t) {
        std::printf("iou %.2f  mAP %.4f  recall %.4f  AP", thresholds[t], r.map[t], r.recall[t]);
        for (double a : r.ap[t]) std::printf(" %.4f", a);
        std::printf("\n");
    }
    return 0;
}

int cmd_oracles(const Common& c) {
    const auto results = oracle::run_oracles(parse_precision(c.precision), 0x0dac1e);
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-4s %-28s %8.3fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds,
                    r.detail.c_str());
        ok = ok && r.passed;
    }
    return ok ? 0 : 1;
}

int cmd_bench(const Common& c) {
    const auto rows = oracle::run_bench(parse_precision(c.precision), 16, {0.05, 0.3, 1.0}, {1, 3, 5});
    std::ostringstream csv;
    oracle::write_bench_csv(csv, rows);
    if (c.out.empty()) {
        std::cout << csv.str();
    } else {
        std::ofstream(c.out) << csv.str();
        std::printf("%zu rows -> %s\n", rows.size(), c.out.c_str());
    }
    bool ok = true;
    for (const auto& r : rows) ok = ok && r.matches_dense;
    return ok ? 0 : 1;
}

int cmd_gradcheck(const Common& c) {
    const auto results = oracle::run_gradchecks(parse_precision(c.precision), c.seed);
    bool ok = true;
    for (const auto& r : results) {
        std::printf("%-4s %-28s %8.3fs  %s\n", r.passed ? "PASS" : "FAIL", r.name.c_str(), r.seconds,
                    r.detail.c_str());
        ok = ok && r.passed;
    }
    return ok ? 0 : 1;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"sparse 3D detection toolkit"};
    app.require_subcommand(1);
    Common c;
    auto add_common = [&](CLI::App* sub) {
        sub->add_option("--config", c.config_path, "key = value config file");
        sub->add_option_function<uint64_t>(
            "--seed",
            [&](uint64_t s) {
                c.seed = s;
                c.seed_given = true;
            },
            "random seed (overrides the config)");
        sub->add_option("--scenes", c.scenes_dir, "scene directory");
        sub->add_option("--checkpoint", c.checkpoint, "checkpoint path");
        sub->add_option("--out", c.out, "output path");
        sub->add_option("--precision", c.precision, "f32 or f64")->check(CLI::IsMember({"f32", "f64"}));
    };

    int n_scenes = 10;
    std::string format = "text";
    auto* synth = app.add_subcommand("synth", "generate synthetic scenes into --out DIR");
    add_common(synth);
    synth->add_option("--count", n_scenes, "number of scenes")->check(CLI::PositiveNumber);
    synth->add_option("--format", format, "text or binary")->check(CLI::IsMember({"text", "binary"}));

    std::string trace_path;
    auto* train = app.add_subcommand("train", "toy training on --scenes, writes --checkpoint");
    add_common(train);
    train->add_option("--trace", trace_path, "per-step loss trace CSV");

    auto* infer = app.add_subcommand("infer", "detections for --scenes as JSON lines in --out");
    add_common(infer);

    std::string pred_path;
    std::vector<double> thresholds{0.25, 0.5};
    auto* eval = app.add_subcommand("eval", "mAP of --predictions against --scenes");
    add_common(eval);
    eval->add_option("--predictions", pred_path, "JSON-lines predictions");
    eval->add_option("--iou", thresholds, "IoU thresholds");

    auto* oracles = app.add_subcommand("oracles", "run every oracle suite");
    add_common(oracles);
    auto* bench = app.add_subcommand("bench", "kernel-map and convolution throughput (CSV)");
    add_common(bench);
    auto* gradcheck = app.add_subcommand("gradcheck", "finite-difference gradient checks");
    add_common(gradcheck);

    CLI11_PARSE(app, argc, argv);
    try {
        if (*synth) return cmd_synth(c, n_scenes, format);
        if (*train) return cmd_train(c, trace_path);
        if (*infer) return cmd_infer(c);
        if (*eval) return cmd_eval(c, pred_path, thresholds);
        if (*oracles) return cmd_oracles(c);
        if (*bench) return cmd_bench(c);
        if (*gradcheck) return cmd_gradcheck(c);
    } catch (const std::exception& e) {
        std::fprintf(stderr, "error: %s\n", e.what());
        return 2;
    }
    return 0;
}
