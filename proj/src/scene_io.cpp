// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/scene_io.hpp"

#include <algorithm>
#include <array>
#include <charconv>
#include <cmath>
#include <cstring>
#include <filesystem>
#include <fstream>
#include <sstream>
#include <stdexcept>

namespace sparsedet3d {
namespace fs = std::filesystem;

namespace {

constexpr char kMagic[4] = {'S', 'P', 'D', '3'};
constexpr uint32_t kVersion = 1;

std::vector<double> split_numbers(const std::string& line, const std::string& path, size_t lineno) {
    std::vector<double> out;
    const char* p = line.data();
    const char* end = p + line.size();
    while (p < end) {
        while (p < end && std::isspace(static_cast<unsigned char>(*p))) ++p;
        if (p == end) break;
        double v = 0.0;
        const auto [next, ec] = std::from_chars(p, end, v);
        if (ec != std::errc() || (next < end && !std::isspace(static_cast<unsigned char>(*next)))) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": not a number");
        }
        out.push_back(v);
        p = next;
    }
    return out;
}

std::string format_float(float v) {
    char buf[32];
    const auto [ptr, ec] = std::to_chars(buf, buf + sizeof(buf), v);
    return std::string(buf, ptr);
}

void put_u32(std::ostream& o, uint32_t v) {
    const unsigned char b[4] = {static_cast<unsigned char>(v), static_cast<unsigned char>(v >> 8),
                                static_cast<unsigned char>(v >> 16), static_cast<unsigned char>(v >> 24)};
    o.write(reinterpret_cast<const char*>(b), 4);
}

void put_f32(std::ostream& o, float f) {
    uint32_t v = 0;
    std::memcpy(&v, &f, 4);
    put_u32(o, v);
}

uint32_t get_u32(const unsigned char* b) {
    return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
           static_cast<uint32_t>(b[3]) << 24;
}

float get_f32(const unsigned char* b) {
    const uint32_t v = get_u32(b);
    float f = 0.0f;
    std::memcpy(&f, &v, 4);
    return f;
}

void check_finite(const PointCloud& c, const std::string& path) {
    if (!c.positions.allFinite()) throw std::runtime_error(path + ": NaN or infinite coordinate");
}

}  // namespace

CloudFormat parse_cloud_format(const std::string& name) {
    if (name == "auto") return CloudFormat::automatic;
    if (name == "text") return CloudFormat::text;
    if (name == "binary") return CloudFormat::binary;
    throw std::invalid_argument("unknown cloud format '" + name + "' (expected text, binary or auto)");
}

PointCloud read_cloud_text(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<double> values;
    std::string line;
    size_t lineno = 0;
    size_t width = 0;
    size_t rows = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::vector<double> v = split_numbers(line, path, lineno);
        if (v.empty()) continue;
        if (v.size() < 3) throw std::runtime_error(path + ":" + std::to_string(lineno) + ": need at least x y z");
        if (width == 0) width = v.size();
        if (v.size() != width) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected " + std::to_string(width) +
                                     " values, got " + std::to_string(v.size()));
        }
        values.insert(values.end(), v.begin(), v.end());
        ++rows;
    }
    PointCloud c;
    const auto n = static_cast<Eigen::Index>(rows);
    const Eigen::Index f = width > 3 ? static_cast<Eigen::Index>(width - 3) : 0;
    c.positions.resize(n, 3);
    c.features.resize(n, f);
    for (Eigen::Index i = 0; i < n; ++i) {
        const double* row = values.data() + static_cast<size_t>(i) * width;
        c.positions.row(i) << row[0], row[1], row[2];
        for (Eigen::Index k = 0; k < f; ++k) c.features(i, k) = row[3 + k];
    }
    check_finite(c, path);
    return c;
}

void write_cloud_text(const std::string& path, const PointCloud& cloud) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (Eigen::Index i = 0; i < cloud.positions.rows(); ++i) {
        out << format_float(static_cast<float>(cloud.positions(i, 0))) << ' '
            << format_float(static_cast<float>(cloud.positions(i, 1))) << ' '
            << format_float(static_cast<float>(cloud.positions(i, 2)));
        for (Eigen::Index k = 0; k < cloud.features.cols(); ++k) {
            out << ' ' << format_float(static_cast<float>(cloud.features(i, k)));
        }
        out << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

PointCloud read_cloud_binary(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<unsigned char> buf((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());
    if (buf.size() < 16) throw std::runtime_error(path + ": truncated header");
    if (std::memcmp(buf.data(), kMagic, 4) != 0) throw std::runtime_error(path + ": bad magic (expected SPD3)");
    const uint32_t version = get_u32(buf.data() + 4);
    if (version != kVersion) throw std::runtime_error(path + ": unsupported version " + std::to_string(version));
    const uint64_t n = get_u32(buf.data() + 8);
    const uint64_t f = get_u32(buf.data() + 12);
    const uint64_t expected = 16 + n * (3 + f) * 4;
    if (buf.size() != expected) {
        throw std::runtime_error(path + ": payload is " + std::to_string(buf.size()) + " bytes, header implies " +
                                 std::to_string(expected));
    }
    PointCloud c;
    c.positions.resize(static_cast<Eigen::Index>(n), 3);
    c.features.resize(static_cast<Eigen::Index>(n), static_cast<Eigen::Index>(f));
    const unsigned char* p = buf.data() + 16;
    for (uint64_t i = 0; i < n; ++i) {
        for (int a = 0; a < 3; ++a, p += 4) c.positions(static_cast<Eigen::Index>(i), a) = get_f32(p);
        for (uint64_t k = 0; k < f; ++k, p += 4) {
            c.features(static_cast<Eigen::Index>(i), static_cast<Eigen::Index>(k)) = get_f32(p);
        }
    }
    check_finite(c, path);
    return c;
}

void write_cloud_binary(const std::string& path, const PointCloud& cloud) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    put_u32(out, static_cast<uint32_t>(cloud.positions.rows()));
    put_u32(out, static_cast<uint32_t>(cloud.features.cols()));
    for (Eigen::Index i = 0; i < cloud.positions.rows(); ++i) {
        for (int a = 0; a < 3; ++a) put_f32(out, static_cast<float>(cloud.positions(i, a)));
        for (Eigen::Index k = 0; k < cloud.features.cols(); ++k) put_f32(out, static_cast<float>(cloud.features(i, k)));
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::vector<GtBox> read_boxes(const std::string& path) {
    std::ifstream in(path);
    if (!in) throw std::runtime_error("cannot open " + path);
    std::vector<GtBox> out;
    std::string line;
    size_t lineno = 0;
    while (std::getline(in, line)) {
        ++lineno;
        const std::vector<double> v = split_numbers(line, path, lineno);
        if (v.empty()) continue;
        if (v.size() != 8) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": expected 'cx cy cz w l h theta class'");
        }
        GtBox g;
        g.box = {v[0], v[1], v[2], v[3], v[4], v[5], wrap_angle(v[6])};
        if (v[7] < 0 || v[7] != std::floor(v[7])) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": class must be a non-negative integer");
        }
        g.class_id = static_cast<int>(v[7]);
        try {
            validate_box(g.box);
        } catch (const std::exception& e) {
            throw std::runtime_error(path + ":" + std::to_string(lineno) + ": " + e.what());
        }
        out.push_back(g);
    }
    return out;
}

void write_boxes(const std::string& path, const std::vector<GtBox>& boxes) {
    std::ofstream out(path);
    if (!out) throw std::runtime_error("cannot write " + path);
    for (const GtBox& g : boxes) {
        const Box3D& b = g.box;
        out << format_float(static_cast<float>(b.cx)) << ' ' << format_float(static_cast<float>(b.cy)) << ' '
            << format_float(static_cast<float>(b.cz)) << ' ' << format_float(static_cast<float>(b.w)) << ' '
            << format_float(static_cast<float>(b.l)) << ' ' << format_float(static_cast<float>(b.h)) << ' '
            << format_float(static_cast<float>(b.theta)) << ' ' << g.class_id << '\n';
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

std::string sidecar_path(const std::string& cloud_path) {
    fs::path p(cloud_path);
    return (p.parent_path() / (p.stem().string() + ".boxes.txt")).string();
}

SceneRecord ingest(const std::string& path, CloudFormat format) {
    if (format == CloudFormat::automatic) {
        const std::string ext = fs::path(path).extension().string();
        if (ext == ".txt") {
            format = CloudFormat::text;
        } else if (ext == ".bin") {
            format = CloudFormat::binary;
        } else {
            throw std::runtime_error(path + ": unknown format (expected .txt or .bin)");
        }
    }
    SceneRecord s;
    s.scene_id = fs::path(path).stem().string();
    s.cloud = format == CloudFormat::text ? read_cloud_text(path) : read_cloud_binary(path);
    const std::string side = sidecar_path(path);
    if (fs::exists(side)) s.gt = read_boxes(side);
    return s;
}

std::vector<SceneRecord> load_scene_dir(const std::string& dir) {
    if (!fs::is_directory(dir)) throw std::runtime_error("not a directory: " + dir);
    std::vector<std::string> files;
    for (const auto& e : fs::directory_iterator(dir)) {
        if (!e.is_regular_file()) continue;
        const std::string name = e.path().filename().string();
        const std::string ext = e.path().extension().string();
        if (name.size() >= 10 && name.ends_with(".boxes.txt")) continue;
        if (ext == ".txt" || ext == ".bin") files.push_back(e.path().string());
    }
    std::sort(files.begin(), files.end());
    std::vector<SceneRecord> out;
    out.reserve(files.size());
    for (const std::string& f : files) out.push_back(ingest(f));
    return out;
}

void write_scene(const std::string& dir, const SceneRecord& scene, CloudFormat format) {
    fs::create_directories(dir);
    const bool binary = format == CloudFormat::binary;
    const std::string path = (fs::path(dir) / (scene.scene_id + (binary ? ".bin" : ".txt"))).string();
    if (binary) {
        write_cloud_binary(path, scene.cloud);
    } else {
        write_cloud_text(path, scene.cloud);
    }
    write_boxes(sidecar_path(path), scene.gt);
}

}  // namespace sparsedet3d
