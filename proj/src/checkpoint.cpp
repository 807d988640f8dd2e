// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/checkpoint.hpp"

#include <cstring>
#include <fstream>
#include <iterator>
#include <stdexcept>

namespace sparsedet3d {
namespace {

constexpr char kMagic[4] = {'S', 'D', 'C', 'K'};
constexpr uint32_t kVersion = 1;

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

void put_block(std::ostream& o, const std::string& name, const std::vector<uint32_t>& dims,
               const std::vector<float>& data) {
    put_u32(o, static_cast<uint32_t>(name.size()));
    o.write(name.data(), static_cast<std::streamsize>(name.size()));
    put_u32(o, static_cast<uint32_t>(dims.size()));
    for (uint32_t d : dims) put_u32(o, d);
    for (float f : data) put_f32(o, f);
}

class Reader {
public:
    Reader(std::vector<unsigned char> buf, std::string path) : buf_(std::move(buf)), path_(std::move(path)) {}

    bool done() const { return pos_ == buf_.size(); }

    uint32_t u32() {
        need(4);
        const unsigned char* b = buf_.data() + pos_;
        pos_ += 4;
        return static_cast<uint32_t>(b[0]) | static_cast<uint32_t>(b[1]) << 8 | static_cast<uint32_t>(b[2]) << 16 |
               static_cast<uint32_t>(b[3]) << 24;
    }
    float f32() {
        const uint32_t v = u32();
        float f = 0.0f;
        std::memcpy(&f, &v, 4);
        return f;
    }
    std::string bytes(size_t n) {
        need(n);
        std::string s(reinterpret_cast<const char*>(buf_.data() + pos_), n);
        pos_ += n;
        return s;
    }

private:
    void need(size_t n) const {
        if (buf_.size() - pos_ < n) throw std::runtime_error(path_ + ": truncated checkpoint");
    }
    std::vector<unsigned char> buf_;
    std::string path_;
    size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const std::string& path, const nn::ParameterStore& params, const RunConfig& config) {
    std::ofstream out(path, std::ios::binary);
    if (!out) throw std::runtime_error("cannot write " + path);
    out.write(kMagic, 4);
    put_u32(out, kVersion);
    const std::string text = config.dump();
    std::vector<float> cfg_bytes;
    cfg_bytes.reserve(text.size());
    for (unsigned char ch : text) cfg_bytes.push_back(static_cast<float>(ch));
    put_block(out, kConfigBlock, {static_cast<uint32_t>(text.size())}, cfg_bytes);
    for (const nn::Parameter* p : params.all()) {
        std::vector<float> data(static_cast<size_t>(p->value.size()));
        for (Eigen::Index i = 0; i < p->value.size(); ++i) data[static_cast<size_t>(i)] = static_cast<float>(p->value.data()[i]);
        put_block(out, p->name, {static_cast<uint32_t>(p->value.rows()), static_cast<uint32_t>(p->value.cols())}, data);
    }
    if (!out) throw std::runtime_error("write failed: " + path);
}

CheckpointData read_checkpoint(const std::string& path) {
    std::ifstream in(path, std::ios::binary);
    if (!in) throw std::runtime_error("cannot open checkpoint " + path);
    Reader r(std::vector<unsigned char>((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>()), path);
    if (r.bytes(4) != std::string(kMagic, 4)) throw std::runtime_error(path + ": bad magic (expected SDCK)");
    const uint32_t version = r.u32();
    if (version != kVersion) throw std::runtime_error(path + ": unsupported checkpoint version " + std::to_string(version));
    CheckpointData data;
    bool have_config = false;
    while (!r.done()) {
        const uint32_t name_len = r.u32();
        const std::string name = r.bytes(name_len);
        TensorBlock b;
        const uint32_t rank = r.u32();
        if (rank > 8) throw std::runtime_error(path + ": implausible rank for " + name);
        uint64_t count = 1;
        for (uint32_t i = 0; i < rank; ++i) {
            b.dims.push_back(r.u32());
            count *= b.dims.back();
        }
        b.data.resize(count);
        for (uint64_t i = 0; i < count; ++i) b.data[i] = r.f32();
        if (name == kConfigBlock) {
            std::string text;
            for (float f : b.data) text.push_back(static_cast<char>(static_cast<unsigned char>(f)));
            data.config = RunConfig::parse(text);
            have_config = true;
        } else if (!data.tensors.emplace(name, std::move(b)).second) {
            throw std::runtime_error(path + ": duplicate tensor " + name);
        }
    }
    if (!have_config) throw std::runtime_error(path + ": missing config snapshot");
    return data;
}

void load_parameters(nn::ParameterStore& params, const CheckpointData& data) {
    size_t used = 0;
    for (nn::Parameter* p : params.all()) {
        auto it = data.tensors.find(p->name);
        if (it == data.tensors.end()) throw std::runtime_error("checkpoint lacks tensor " + p->name);
        const TensorBlock& b = it->second;
        if (b.dims.size() != 2 || b.dims[0] != p->value.rows() || b.dims[1] != p->value.cols()) {
            throw std::runtime_error("checkpoint tensor " + p->name + " has an incompatible shape");
        }
        for (Eigen::Index i = 0; i < p->value.size(); ++i) p->value.data()[i] = b.data[static_cast<size_t>(i)];
        ++used;
    }
    if (used != data.tensors.size()) throw std::runtime_error("checkpoint has tensors the model does not know");
}

void round_to_checkpoint_precision(nn::ParameterStore& params) {
    for (nn::Parameter* p : params.all()) {
        for (Eigen::Index i = 0; i < p->value.size(); ++i) {
            p->value.data()[i] = static_cast<double>(static_cast<float>(p->value.data()[i]));
        }
    }
}

std::unique_ptr<Detector> load_detector(const std::string& path) {
    const CheckpointData data = read_checkpoint(path);
    auto it = data.tensors.find("class_sizes");
    if (it == data.tensors.end()) throw std::runtime_error(path + ": missing class_sizes");
    const TensorBlock& b = it->second;
    if (b.dims.size() != 2 || b.dims[1] != 3) throw std::runtime_error(path + ": malformed class_sizes");
    ClassSizeTable sizes;
    for (uint32_t j = 0; j < b.dims[0]; ++j) {
        sizes.dims.push_back({b.data[j * 3], b.data[j * 3 + 1], b.data[j * 3 + 2]});
    }
    auto det = std::make_unique<Detector>(data.config, sizes);
    load_parameters(det->params(), data);
    return det;
}

}  // namespace sparsedet3d
