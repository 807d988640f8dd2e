// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include <pybind11/eigen.h>
#include <pybind11/pybind11.h>
#include <pybind11/stl.h>

#include "sparsedet3d/checkpoint.hpp"
#include "sparsedet3d/config.hpp"
#include "sparsedet3d/eval.hpp"
#include "sparsedet3d/scene_io.hpp"
#include "sparsedet3d/synth.hpp"
#include "sparsedet3d/train.hpp"

namespace py = pybind11;
using namespace sparsedet3d;

namespace {

using CoordArray = Eigen::Matrix<int32_t, Eigen::Dynamic, 3, Eigen::RowMajor>;
using BoxArray = Eigen::Matrix<double, Eigen::Dynamic, 7, Eigen::RowMajor>;

std::vector<Coord3> to_coords(const CoordArray& a) {
    std::vector<Coord3> out(static_cast<size_t>(a.rows()));
    for (Eigen::Index i = 0; i < a.rows(); ++i) out[static_cast<size_t>(i)] = {a(i, 0), a(i, 1), a(i, 2)};
    return out;
}

CoordArray from_coords(const std::vector<Coord3>& c) {
    CoordArray a(static_cast<Eigen::Index>(c.size()), 3);
    for (size_t i = 0; i < c.size(); ++i) a.row(static_cast<Eigen::Index>(i)) << c[i].x, c[i].y, c[i].z;
    return a;
}

Box3D to_box(const Eigen::Ref<const Eigen::VectorXd>& v) {
    if (v.size() != 7) throw std::invalid_argument("box must have 7 entries (cx cy cz w l h theta)");
    return {v[0], v[1], v[2], v[3], v[4], v[5], v[6]};
}

std::vector<Box3D> to_boxes(const BoxArray& a) {
    std::vector<Box3D> out;
    for (Eigen::Index i = 0; i < a.rows(); ++i) out.push_back({a(i, 0), a(i, 1), a(i, 2), a(i, 3), a(i, 4), a(i, 5), a(i, 6)});
    return out;
}

BoxArray from_boxes(const std::vector<Box3D>& b) {
    BoxArray a(static_cast<Eigen::Index>(b.size()), 7);
    for (size_t i = 0; i < b.size(); ++i) {
        a.row(static_cast<Eigen::Index>(i)) << b[i].cx, b[i].cy, b[i].cz, b[i].w, b[i].l, b[i].h, b[i].theta;
    }
    return a;
}

PointCloud to_cloud(const PositionMatrix& points, const Matrix& features) {
    PointCloud c{points, features};
    c.validate();
    return c;
}

py::dict detections_dict(const std::vector<Detection>& dets) {
    std::vector<Box3D> boxes;
    std::vector<int> classes;
    std::vector<double> scores;
    for (const Detection& d : dets) {
        boxes.push_back(d.box);
        classes.push_back(d.class_id);
        scores.push_back(d.score);
    }
    py::dict out;
    out["boxes"] = from_boxes(boxes);
    out["classes"] = classes;
    out["scores"] = scores;
    return out;
}

py::dict scene_dict(const SceneRecord& s) {
    std::vector<Box3D> boxes;
    std::vector<int> classes;
    for (const GtBox& g : s.gt) {
        boxes.push_back(g.box);
        classes.push_back(g.class_id);
    }
    py::dict out;
    out["scene_id"] = s.scene_id;
    out["points"] = s.cloud.positions;
    out["features"] = s.cloud.features;
    out["boxes"] = from_boxes(boxes);
    out["classes"] = classes;
    return out;
}

SceneRecord scene_from_dict(const py::dict& d) {
    SceneRecord s;
    s.scene_id = d.contains("scene_id") ? d["scene_id"].cast<std::string>() : "scene";
    s.cloud = to_cloud(d["points"].cast<PositionMatrix>(), d["features"].cast<Matrix>());
    const auto boxes = to_boxes(d["boxes"].cast<BoxArray>());
    const auto classes = d["classes"].cast<std::vector<int>>();
    if (boxes.size() != classes.size()) throw std::invalid_argument("scene: boxes and classes differ in length");
    for (size_t i = 0; i < boxes.size(); ++i) s.gt.push_back({boxes[i], classes[i]});
    return s;
}

}  // namespace

PYBIND11_MODULE(_sparsedet3d, m) {
    m.doc() = "Sparse 3D detection: voxelization, sparse convolution, box geometry and the toy detector";

    m.def(
        "voxelize",
        [](const PositionMatrix& points, const Matrix& features, double voxel_size) {
            const SparseTensor<double> t = voxelize_avg(to_cloud(points, features), {voxel_size, voxel_size, voxel_size});
            return py::make_tuple(from_coords(t.coords), t.feats);
        },
        py::arg("points"), py::arg("features"), py::arg("voxel_size"),
        "Average points and features per occupied voxel; returns (coords, features).");

    m.def(
        "sparse_conv",
        [](const CoordArray& coords, const Matrix& feats, const Matrix& kernel, std::optional<Eigen::RowVectorXd> bias,
           int kernel_size, std::optional<CoordArray> out_coords, int stride) {
            SparseTensor<double> x;
            x.coords = to_coords(coords);
            x.feats = feats;
            x.stride = stride;
            x.validate();
            ConvWeights<double> w(kernel_size, feats.cols(), kernel.cols(), bias.has_value());
            w.kernel = kernel;
            if (bias) w.bias = *bias;
            const std::vector<Coord3> out = out_coords ? to_coords(*out_coords) : x.coords;
            const SparseTensor<double> y = sparse_conv_forward(x, w, out, kernel_size);
            return py::make_tuple(from_coords(y.coords), y.feats);
        },
        py::arg("coords"), py::arg("features"), py::arg("kernel"), py::arg("bias") = py::none(),
        py::arg("kernel_size") = 3, py::arg("out_coords") = py::none(), py::arg("stride") = 1,
        "Sparse convolution; kernel is (k^3 * C_in) x C_out with offsets in lexicographic order, z fastest. "
        "Output coordinates default to the input (submanifold).");

    m.def("iou3d", [](const Eigen::VectorXd& a, const Eigen::VectorXd& b) { return iou3d(to_box(a), to_box(b)); },
          py::arg("a"), py::arg("b"), "Rotated 3D IoU of two (cx cy cz w l h theta) boxes.");

    m.def(
        "nms",
        [](const BoxArray& boxes, const std::vector<double>& scores, double iou_thresh, double score_min) {
            const auto b = to_boxes(boxes);
            if (b.size() != scores.size()) throw std::invalid_argument("nms: boxes and scores differ in length");
            // class_id carries the input index; suppression ignores classes.
            std::vector<Proposal> props;
            for (size_t i = 0; i < b.size(); ++i) props.push_back({b[i], scores[i], static_cast<int>(i), 0.0});
            std::vector<int> keep;
            for (const Proposal& p : filter_nms(props, score_min, iou_thresh)) keep.push_back(p.class_id);
            return keep;
        },
        py::arg("boxes"), py::arg("scores"), py::arg("iou_thresh") = 0.5, py::arg("score_min") = 0.0,
        "Greedy rotated-IoU suppression; returns kept indices by descending score.");

    m.def(
        "encode_residual",
        [](const Eigen::VectorXd& gt, const Eigen::VectorXd& proposal) {
            const Residual r = encode_residual(to_box(gt), to_box(proposal));
            return std::vector<double>(r.begin(), r.end());
        },
        py::arg("gt"), py::arg("proposal"));
    m.def(
        "decode_residual",
        [](const std::vector<double>& t, const Eigen::VectorXd& proposal) {
            if (t.size() != 8) throw std::invalid_argument("decode_residual: need 8 entries");
            Residual r;
            std::copy(t.begin(), t.end(), r.begin());
            const Box3D b = decode_residual(r, to_box(proposal));
            return std::vector<double>{b.cx, b.cy, b.cz, b.w, b.l, b.h, b.theta};
        },
        py::arg("t"), py::arg("proposal"));

    m.def(
        "synth_scenes", [](int n, uint64_t seed) {
            py::list out;
            for (const SceneRecord& s : synth_scenes(n, seed)) out.append(scene_dict(s));
            return out;
        },
        py::arg("n"), py::arg("seed") = 0, "Toy scenes of noisy box surfaces with ground truth.");
    m.def("load_scene", [](const std::string& path) { return scene_dict(ingest(path)); }, py::arg("path"));

    m.def(
        "eval_map",
        [](const std::vector<py::dict>& predictions, const std::vector<py::dict>& scenes, int num_classes,
           const std::vector<double>& thresholds) {
            if (predictions.size() != scenes.size()) throw std::invalid_argument("eval_map: scene count mismatch");
            std::vector<std::vector<Detection>> preds;
            std::vector<std::vector<GtBox>> gt;
            for (size_t i = 0; i < scenes.size(); ++i) {
                gt.push_back(scene_from_dict(scenes[i]).gt);
                const auto boxes = to_boxes(predictions[i]["boxes"].cast<BoxArray>());
                const auto classes = predictions[i]["classes"].cast<std::vector<int>>();
                const auto scores = predictions[i]["scores"].cast<std::vector<double>>();
                if (boxes.size() != classes.size() || boxes.size() != scores.size()) {
                    throw std::invalid_argument("eval_map: prediction arrays differ in length");
                }
                std::vector<Detection> d;
                for (size_t k = 0; k < boxes.size(); ++k) d.push_back({boxes[k], classes[k], scores[k]});
                preds.push_back(std::move(d));
            }
            const EvalResult r = eval_map(preds, gt, num_classes, thresholds);
            py::dict out;
            out["thresholds"] = r.thresholds;
            out["ap"] = r.ap;
            out["map"] = r.map;
            out["recall"] = r.recall;
            return out;
        },
        py::arg("predictions"), py::arg("scenes"), py::arg("num_classes"), py::arg("thresholds") = std::vector<double>{0.25, 0.5});

    py::class_<RunConfig>(m, "RunConfig")
        .def(py::init<>())
        .def_static("parse", &RunConfig::parse, py::arg("text"))
        .def("dump", &RunConfig::dump)
        .def("set", &RunConfig::set, py::arg("key"), py::arg("value"))
        .def("validate", &RunConfig::validate)
        .def("__repr__", &RunConfig::dump);

    py::class_<Detector>(m, "Detector")
        .def(py::init([](const RunConfig& cfg, const std::vector<py::dict>& scenes, uint64_t seed) {
                 std::vector<SceneRecord> recs;
                 for (const py::dict& d : scenes) recs.push_back(scene_from_dict(d));
                 auto det = std::make_unique<Detector>(cfg, estimate_class_sizes(recs, cfg.num_classes));
                 det->init(seed);
                 return det;
             }),
             py::arg("config"), py::arg("scenes"), py::arg("seed") = 0,
             "Fresh detector with class size priors estimated from `scenes`.")
        .def_static("load", &load_detector, py::arg("path"))
        .def("save", [](Detector& d, const std::string& path) { save_checkpoint(path, d.params(), d.config()); },
             py::arg("path"))
        .def(
            "train",
            [](Detector& d, const std::vector<py::dict>& scenes, int steps) {
                std::vector<SceneRecord> recs;
                for (const py::dict& s : scenes) recs.push_back(scene_from_dict(s));
                RunConfig cfg = d.config();
                cfg.steps = steps;
                std::vector<double> losses;
                {
                    py::gil_scoped_release release;
                    for (const TrainStep& s : run_toy_train(d, recs, cfg)) losses.push_back(s.report.total);
                }
                return losses;
            },
            py::arg("scenes"), py::arg("steps"), "Runs the toy schedule for `steps` steps; returns the loss trace.")
        .def(
            "infer",
            [](const Detector& d, const PositionMatrix& points, const Matrix& features) {
                std::vector<Detection> dets;
                const PointCloud cloud = to_cloud(points, features);
                {
                    py::gil_scoped_release release;
                    dets = d.infer(cloud);
                }
                return detections_dict(dets);
            },
            py::arg("points"), py::arg("features"))
        .def_property_readonly("config", &Detector::config);
}
