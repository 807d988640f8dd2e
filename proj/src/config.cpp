// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/config.hpp"

#include <charconv>
#include <cmath>
#include <fstream>
#include <set>
#include <sstream>
#include <stdexcept>

namespace sparsedet3d {
namespace {

std::string trim(const std::string& s) {
    const auto b = s.find_first_not_of(" \t\r\n");
    if (b == std::string::npos) return {};
    const auto e = s.find_last_not_of(" \t\r\n");
    return s.substr(b, e - b + 1);
}

double parse_double(const std::string& key, const std::string& v) {
    double out = 0.0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size() || !std::isfinite(out)) {
        throw std::invalid_argument("config: '" + key + "' expects a number, got '" + v + "'");
    }
    return out;
}

int64_t parse_int(const std::string& key, const std::string& v) {
    int64_t out = 0;
    const auto [ptr, ec] = std::from_chars(v.data(), v.data() + v.size(), out);
    if (ec != std::errc() || ptr != v.data() + v.size()) {
        throw std::invalid_argument("config: '" + key + "' expects an integer, got '" + v + "'");
    }
    return out;
}

int parse_int32(const std::string& key, const std::string& v) {
    const int64_t x = parse_int(key, v);
    if (x < INT32_MIN || x > INT32_MAX) throw std::invalid_argument("config: '" + key + "' out of range");
    return static_cast<int>(x);
}

std::array<int, 3> parse_triple(const std::string& key, const std::string& v) {
    std::array<int, 3> out{};
    std::stringstream ss(v);
    std::string part;
    int n = 0;
    while (std::getline(ss, part, ',')) {
        if (n == 3) throw std::invalid_argument("config: '" + key + "' expects three comma-separated integers");
        out[static_cast<size_t>(n++)] = parse_int32(key, trim(part));
    }
    if (n != 3) throw std::invalid_argument("config: '" + key + "' expects three comma-separated integers");
    return out;
}

std::string triple(const std::array<int, 3>& t) {
    return std::to_string(t[0]) + "," + std::to_string(t[1]) + "," + std::to_string(t[2]);
}

}  // namespace

std::string format_number(double v) {
    char buf[64];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v, std::chars_format::fixed);
    if (ec != std::errc()) throw std::runtime_error("format_number: value too long");
    return std::string(buf, ptr);
}

int RunConfig::highres_stride() const {
    const double r = highres_voxel_size / voxel_size;
    return static_cast<int>(std::lround(r));
}

TauSchedule RunConfig::tau() const { return TauSchedule{tau_initial, tau_step, tau_interval_epochs, tau_min}; }

RoiConfig RunConfig::roi() const { return RoiConfig{roi_grid1, roi_kernel1, roi_grid2, roi_kernel2}; }

void RunConfig::validate() const {
    auto positive = [](const char* k, double v) {
        if (!(v > 0.0) || !std::isfinite(v)) throw std::invalid_argument(std::string("config: ") + k + " must be positive");
    };
    auto unit = [](const char* k, double v) {
        if (!(v >= 0.0 && v <= 1.0)) throw std::invalid_argument(std::string("config: ") + k + " must lie in [0, 1]");
    };
    if (network != "toy") throw std::invalid_argument("config: unknown network preset '" + network + "'");
    if (num_classes < 1) throw std::invalid_argument("config: num_classes must be >= 1");
    if (in_channels < 1) throw std::invalid_argument("config: in_channels must be >= 1");
    positive("voxel_size", voxel_size);
    positive("highres_voxel_size", highres_voxel_size);
    const int hs = highres_stride();
    if (hs < 2 || (hs & (hs - 1)) != 0 || std::abs(hs * voxel_size - highres_voxel_size) > 1e-9 * highres_voxel_size) {
        throw std::invalid_argument("config: highres_voxel_size must be a power-of-two multiple (>= 2) of voxel_size");
    }
    positive("alpha", alpha);
    parse_dataset_preset(dataset_preset);
    if (!(tau_min > 0.0 && tau_min <= tau_initial && tau_initial < 1.0)) {
        throw std::invalid_argument("config: need 0 < tau_min <= tau_initial < 1");
    }
    if (tau_step < 0.0) throw std::invalid_argument("config: tau_step must be non-negative");
    if (tau_interval_epochs < 1) throw std::invalid_argument("config: tau_interval_epochs must be >= 1");
    if (grouping_kernel < 1 || grouping_kernel % 2 == 0) {
        throw std::invalid_argument("config: grouping_kernel must be odd and positive");
    }
    roi().validate();
    unit("nms_iou", nms_iou);
    unit("score_min", score_min);
    if (nms_pre < 0) throw std::invalid_argument("config: nms_pre must be >= 0");
    if (train_proposals < 1) throw std::invalid_argument("config: train_proposals must be >= 1");
    unit("train_proposal_iou", train_proposal_iou);
    loss.validate();
    if (!(focal_gamma >= 0.0)) throw std::invalid_argument("config: focal_gamma must be non-negative");
    positive("focal_alpha", focal_alpha);
    if (norm != "batch" && norm != "instance") throw std::invalid_argument("config: norm must be batch or instance");
    if (!(lr >= 0.0)) throw std::invalid_argument("config: lr must be non-negative");
    if (!(weight_decay >= 0.0)) throw std::invalid_argument("config: weight_decay must be non-negative");
    positive("grad_clip", grad_clip);
    if (batch < 1) throw std::invalid_argument("config: batch must be >= 1");
    if (steps < 0) throw std::invalid_argument("config: steps must be >= 0");
}

std::string RunConfig::dump() const {
    std::ostringstream o;
    auto num = [&](const char* k, double v) { o << k << " = " << format_number(v) << "\n"; };
    auto integer = [&](const char* k, int64_t v) { o << k << " = " << v << "\n"; };
    auto str = [&](const char* k, const std::string& v) { o << k << " = " << v << "\n"; };
    o << "seed = " << seed << "\n";
    str("network", network);
    integer("num_classes", num_classes);
    integer("in_channels", in_channels);
    num("voxel_size", voxel_size);
    num("highres_voxel_size", highres_voxel_size);
    num("alpha", alpha);
    str("dataset_preset", dataset_preset);
    num("tau_initial", tau_initial);
    num("tau_step", tau_step);
    integer("tau_interval_epochs", tau_interval_epochs);
    num("tau_min", tau_min);
    integer("grouping_kernel", grouping_kernel);
    str("roi_grid1", triple(roi_grid1));
    integer("roi_kernel1", roi_kernel1);
    str("roi_grid2", triple(roi_grid2));
    integer("roi_kernel2", roi_kernel2);
    num("nms_iou", nms_iou);
    num("score_min", score_min);
    integer("nms_pre", nms_pre);
    integer("train_proposals", train_proposals);
    num("train_proposal_iou", train_proposal_iou);
    num("loss_sem", loss.sem);
    num("loss_vote", loss.vote);
    num("loss_cntr", loss.cntr);
    num("loss_box", loss.box);
    num("loss_cls", loss.cls);
    num("loss_rebox", loss.rebox);
    num("focal_gamma", focal_gamma);
    num("focal_alpha", focal_alpha);
    str("norm", norm);
    num("lr", lr);
    num("weight_decay", weight_decay);
    num("grad_clip", grad_clip);
    o << "# toy-scale schedule for desk-sized scenes, not a full-dataset setting\n";
    integer("batch", batch);
    integer("steps", steps);
    return o.str();
}

void RunConfig::set(const std::string& key, const std::string& v) {
    if (key == "seed") {
        const int64_t s = parse_int(key, v);
        if (s < 0) throw std::invalid_argument("config: seed must be non-negative");
        seed = static_cast<uint64_t>(s);
    } else if (key == "network") network = v;
    else if (key == "num_classes") num_classes = parse_int32(key, v);
    else if (key == "in_channels") in_channels = parse_int32(key, v);
    else if (key == "voxel_size") voxel_size = parse_double(key, v);
    else if (key == "highres_voxel_size") highres_voxel_size = parse_double(key, v);
    else if (key == "alpha") alpha = parse_double(key, v);
    else if (key == "dataset_preset") {
        dataset_preset = v;
        tau_interval_epochs = TauSchedule::preset(parse_dataset_preset(v)).interval_epochs;
    } else if (key == "tau_initial") tau_initial = parse_double(key, v);
    else if (key == "tau_step") tau_step = parse_double(key, v);
    else if (key == "tau_interval_epochs") tau_interval_epochs = parse_int32(key, v);
    else if (key == "tau_min") tau_min = parse_double(key, v);
    else if (key == "grouping_kernel") grouping_kernel = parse_int32(key, v);
    else if (key == "roi_grid1") roi_grid1 = parse_triple(key, v);
    else if (key == "roi_kernel1") roi_kernel1 = parse_int32(key, v);
    else if (key == "roi_grid2") roi_grid2 = parse_triple(key, v);
    else if (key == "roi_kernel2") roi_kernel2 = parse_int32(key, v);
    else if (key == "nms_iou") nms_iou = parse_double(key, v);
    else if (key == "score_min") score_min = parse_double(key, v);
    else if (key == "nms_pre") nms_pre = parse_int32(key, v);
    else if (key == "train_proposals") train_proposals = parse_int32(key, v);
    else if (key == "train_proposal_iou") train_proposal_iou = parse_double(key, v);
    else if (key == "loss_sem") loss.sem = parse_double(key, v);
    else if (key == "loss_vote") loss.vote = parse_double(key, v);
    else if (key == "loss_cntr") loss.cntr = parse_double(key, v);
    else if (key == "loss_box") loss.box = parse_double(key, v);
    else if (key == "loss_cls") loss.cls = parse_double(key, v);
    else if (key == "loss_rebox") loss.rebox = parse_double(key, v);
    else if (key == "focal_gamma") focal_gamma = parse_double(key, v);
    else if (key == "focal_alpha") focal_alpha = parse_double(key, v);
    else if (key == "norm") norm = v;
    else if (key == "lr") lr = parse_double(key, v);
    else if (key == "weight_decay") weight_decay = parse_double(key, v);
    else if (key == "grad_clip") grad_clip = parse_double(key, v);
    else if (key == "batch") batch = parse_int32(key, v);
    else if (key == "steps") steps = parse_int32(key, v);
    else throw std::invalid_argument("config: unknown key '" + key + "'");
}

RunConfig RunConfig::parse(const std::string& text) {
    RunConfig cfg;
    std::istringstream in(text);
    std::string line;
    int lineno = 0;
    std::string explicit_interval;
    std::set<std::string> seen;
    while (std::getline(in, line)) {
        ++lineno;
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        line = trim(line);
        if (line.empty()) continue;
        const auto eq = line.find('=');
        if (eq == std::string::npos) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": expected 'key = value'");
        }
        const std::string key = trim(line.substr(0, eq));
        const std::string value = trim(line.substr(eq + 1));
        if (!seen.insert(key).second) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": duplicate key '" + key + "'");
        }
        try {
            cfg.set(key, value);
        } catch (const std::invalid_argument& e) {
            throw std::invalid_argument("config line " + std::to_string(lineno) + ": " + e.what());
        }
        if (key == "tau_interval_epochs") explicit_interval = value;
    }
    if (!explicit_interval.empty()) cfg.tau_interval_epochs = parse_int32("tau_interval_epochs", explicit_interval);
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::load(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw std::runtime_error("cannot open config file " + path);
    std::stringstream ss;
    ss << f.rdbuf();
    return parse(ss.str());
}

}  // namespace sparsedet3d
