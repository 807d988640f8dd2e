// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#include "sparsedet3d/coord.hpp"

#include <stdexcept>
#include <string>

namespace sparsedet3d {

CoordIndex::CoordIndex(std::span<const Coord3> coords) {
    size_t cap = 16;
    while (cap < 2 * coords.size()) cap <<= 1;
    keys_.assign(cap, Coord3{});
    values_.assign(cap, -1);
    mask_ = cap - 1;
    for (size_t i = 0; i < coords.size(); ++i) insert(coords[i], static_cast<int32_t>(i));
}

void CoordIndex::grow() {
    std::vector<Coord3> old_keys = std::move(keys_);
    std::vector<int32_t> old_values = std::move(values_);
    const size_t cap = old_keys.empty() ? 16 : old_keys.size() * 2;
    keys_.assign(cap, Coord3{});
    values_.assign(cap, -1);
    mask_ = cap - 1;
    size_ = 0;
    for (size_t i = 0; i < old_keys.size(); ++i) {
        if (old_values[i] >= 0) insert(old_keys[i], old_values[i]);
    }
}

std::pair<int32_t, bool> CoordIndex::insert(const Coord3& c, int32_t value) {
    if (keys_.empty() || 2 * (size_ + 1) > keys_.size()) grow();
    size_t slot = hash_coord(c) & mask_;
    while (values_[slot] >= 0) {
        if (keys_[slot] == c) return {values_[slot], false};
        slot = (slot + 1) & mask_;
    }
    keys_[slot] = c;
    values_[slot] = value;
    ++size_;
    return {value, true};
}

int32_t CoordIndex::find(const Coord3& c) const {
    if (keys_.empty()) return -1;
    size_t slot = hash_coord(c) & mask_;
    while (values_[slot] >= 0) {
        if (keys_[slot] == c) return values_[slot];
        slot = (slot + 1) & mask_;
    }
    return -1;
}

void require_unique(std::span<const Coord3> coords, const char* what) {
    CoordIndex index;
    for (size_t i = 0; i < coords.size(); ++i) {
        if (!index.insert(coords[i], static_cast<int32_t>(i)).second) {
            const Coord3& c = coords[i];
            throw std::invalid_argument(std::string(what) + ": duplicate coordinate (" +
                                        std::to_string(c.x) + ", " + std::to_string(c.y) + ", " +
                                        std::to_string(c.z) + ")");
        }
    }
}

}  // namespace sparsedet3d
