// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <string>
#include <vector>

#include "sparsedet3d/detector.hpp"

namespace sparsedet3d {

enum class CloudFormat { automatic, text, binary };

/// "text", "binary" or "auto".
CloudFormat parse_cloud_format(const std::string& name);

/// Whitespace text, one point per line: x y z [f1 ... fF]. Every line must
/// carry the same number of values; blank lines are ignored.
PointCloud read_cloud_text(const std::string& path);
void write_cloud_text(const std::string& path, const PointCloud& cloud);

/// Little-endian: "SPD3", u32 version (1), u32 N, u32 F, N * (3 + F) f32.
PointCloud read_cloud_binary(const std::string& path);
void write_cloud_binary(const std::string& path, const PointCloud& cloud);

/// Sidecar lines "cx cy cz w l h theta class".
std::vector<GtBox> read_boxes(const std::string& path);
void write_boxes(const std::string& path, const std::vector<GtBox>& boxes);

/// Path of the ground-truth sidecar of a cloud file: <stem>.boxes.txt.
std::string sidecar_path(const std::string& cloud_path);

/// Reads a cloud (format from the extension when automatic: .txt or .bin)
/// and its sidecar if present. The scene id is the file stem.
SceneRecord ingest(const std::string& path, CloudFormat format = CloudFormat::automatic);

/// Every *.txt / *.bin cloud (sidecars excluded) in `dir`, sorted by name.
std::vector<SceneRecord> load_scene_dir(const std::string& dir);

/// Writes <dir>/<scene_id>.{txt,bin} plus the sidecar.
void write_scene(const std::string& dir, const SceneRecord& scene, CloudFormat format);

}  // namespace sparsedet3d
