// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/eval.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <map>
#include <numeric>
#include <stdexcept>

#include <json.hpp>

namespace sparsedet3d {

double envelope_ap(const std::vector<double>& recall, const std::vector<double>& precision) {
    if (recall.size() != precision.size()) throw std::invalid_argument("envelope_ap: size mismatch");
    std::vector<double> r{0.0};
    std::vector<double> p{0.0};
    r.insert(r.end(), recall.begin(), recall.end());
    p.insert(p.end(), precision.begin(), precision.end());
    r.push_back(1.0);
    p.push_back(0.0);
    for (size_t i = p.size() - 1; i > 0; --i) p[i - 1] = std::max(p[i - 1], p[i]);
    double ap = 0.0;
    for (size_t i = 1; i < r.size(); ++i) ap += (r[i] - r[i - 1]) * p[i];
    return ap;
}

EvalResult eval_map(const std::vector<std::vector<Detection>>& predictions, const std::vector<std::vector<GtBox>>& gt,
                    int num_classes, const std::vector<double>& thresholds) {
    if (predictions.size() != gt.size()) throw std::invalid_argument("eval_map: scene count mismatch");
    for (double t : thresholds) {
        if (!(t > 0.0 && t < 1.0)) throw std::invalid_argument("eval_map: thresholds must lie in (0, 1)");
    }
    EvalResult res;
    res.thresholds = thresholds;
    const size_t n_scenes = gt.size();

    for (double thr : thresholds) {
        std::vector<double> ap(static_cast<size_t>(num_classes), std::numeric_limits<double>::quiet_NaN());
        for (int c = 0; c < num_classes; ++c) {
            struct Det {
                size_t scene;
                const Detection* d;
            };
            std::vector<Det> dets;
            size_t n_gt = 0;
            for (size_t s = 0; s < n_scenes; ++s) {
                for (const Detection& d : predictions[s]) {
                    if (d.class_id == c) dets.push_back({s, &d});
                }
                for (const GtBox& g : gt[s]) n_gt += g.class_id == c;
            }
            if (n_gt == 0) continue;
            std::stable_sort(dets.begin(), dets.end(), [](const Det& a, const Det& b) { return a.d->score > b.d->score; });
            std::vector<std::vector<char>> used(n_scenes);
            for (size_t s = 0; s < n_scenes; ++s) used[s].assign(gt[s].size(), 0);
            std::vector<double> recall, precision;
            size_t tp = 0;
            for (size_t i = 0; i < dets.size(); ++i) {
                const auto& boxes = gt[dets[i].scene];
                int best = -1;
                double best_iou = -1.0;
                for (size_t g = 0; g < boxes.size(); ++g) {
                    if (boxes[g].class_id != c) continue;
                    const double v = iou3d(dets[i].d->box, boxes[g].box);
                    if (v > best_iou) {
                        best = static_cast<int>(g);
                        best_iou = v;
                    }
                }
                if (best >= 0 && best_iou >= thr && !used[dets[i].scene][static_cast<size_t>(best)]) {
                    used[dets[i].scene][static_cast<size_t>(best)] = 1;
                    ++tp;
                }
                recall.push_back(static_cast<double>(tp) / static_cast<double>(n_gt));
                precision.push_back(static_cast<double>(tp) / static_cast<double>(i + 1));
            }
            ap[static_cast<size_t>(c)] = envelope_ap(recall, precision);
        }
        double sum = 0.0;
        int counted = 0;
        for (double a : ap) {
            if (!std::isnan(a)) {
                sum += a;
                ++counted;
            }
        }
        res.map.push_back(counted > 0 ? sum / counted : 0.0);
        res.ap.push_back(std::move(ap));

        size_t hit = 0;
        size_t total = 0;
        for (size_t s = 0; s < n_scenes; ++s) {
            for (const GtBox& g : gt[s]) {
                ++total;
                for (const Detection& d : predictions[s]) {
                    if (d.class_id == g.class_id && iou3d(d.box, g.box) >= thr) {
                        ++hit;
                        break;
                    }
                }
            }
        }
        res.recall.push_back(total > 0 ? static_cast<double>(hit) / static_cast<double>(total) : 0.0);
    }
    return res;
}

void write_predictions(const std::string& path, const std::vector<ScenePredictions>& preds) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const ScenePredictions& sp : preds) {
        for (const Detection& d : sp.detections) {
            nlohmann::ordered_json j;
            j["scene_id"] = sp.scene_id;
            j["class"] = d.class_id;
            j["score"] = d.score;
            j["cx"] = d.box.cx;
            j["cy"] = d.box.cy;
            j["cz"] = d.box.cz;
            j["w"] = d.box.w;
            j["l"] = d.box.l;
            j["h"] = d.box.h;
            j["theta"] = d.box.theta;
            out << j.dump() << '\n';
        }
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<ScenePredictions> read_predictions(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<ScenePredictions> out;
    std::map<std::string, size_t> index;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        if (line.find_first_not_of(" \t\r") == std::string::npos) continue;
        try {
            const auto j = nlohmann::json::parse(line);
            const std::string id = j.at("scene_id").get<std::string>();
            Detection d;
            d.class_id = j.at("class").get<int>();
            d.score = j.at("score").get<double>();
            d.box = {j.at("cx").get<double>(), j.at("cy").get<double>(), j.at("cz").get<double>(),
                     j.at("w").get<double>(),  j.at("l").get<double>(),  j.at("h").get<double>(),
                     j.at("theta").get<double>()};
            auto [it, inserted] = index.emplace(id, out.size());
            if (inserted) out.push_back({id, {}});
            out[it->second].detections.push_back(d);
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
    }
    return out;
}

}  // namespace sparsedet3d
