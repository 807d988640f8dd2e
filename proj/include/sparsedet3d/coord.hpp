// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <cstdint>
#include <functional>
#include <span>
#include <vector>

namespace sparsedet3d {

/// Integer voxel index in unit cells.
struct Coord3 {
    int32_t x = 0;
    int32_t y = 0;
    int32_t z = 0;

    friend bool operator==(const Coord3&, const Coord3&) = default;
    friend auto operator<=>(const Coord3&, const Coord3&) = default;

    Coord3 operator+(const Coord3& o) const { return {x + o.x, y + o.y, z + o.z}; }
    Coord3 operator-(const Coord3& o) const { return {x - o.x, y - o.y, z - o.z}; }
    Coord3 operator*(int32_t s) const { return {x * s, y * s, z * s}; }
};

/// Floor division that rounds toward negative infinity.
inline int32_t floor_div(int32_t a, int32_t b) {
    int32_t q = a / b;
    if ((a % b != 0) && ((a < 0) != (b < 0))) --q;
    return q;
}

/// Packs the low 21 bits of each component and runs a splitmix64 finalizer.
/// Only used as a hash; equality always compares full coordinates.
inline uint64_t hash_coord(const Coord3& c) {
    constexpr uint64_t mask = (uint64_t{1} << 21) - 1;
    uint64_t k = (static_cast<uint64_t>(static_cast<uint32_t>(c.x)) & mask) |
                 ((static_cast<uint64_t>(static_cast<uint32_t>(c.y)) & mask) << 21) |
                 ((static_cast<uint64_t>(static_cast<uint32_t>(c.z)) & mask) << 42);
    k ^= k >> 30;
    k *= 0xbf58476d1ce4e5b9ULL;
    k ^= k >> 27;
    k *= 0x94d049bb133111ebULL;
    k ^= k >> 31;
    return k;
}

struct Coord3Hash {
    size_t operator()(const Coord3& c) const { return static_cast<size_t>(hash_coord(c)); }
};

/// Open-addressing (linear probing) map from coordinate to row index.
/// Insert-only; built once per tensor and then queried read-only.
class CoordIndex {
public:
    CoordIndex() = default;
    explicit CoordIndex(std::span<const Coord3> coords);

    /// Inserts `c` with `value` unless already present. Returns the stored
    /// value and whether an insertion happened.
    std::pair<int32_t, bool> insert(const Coord3& c, int32_t value);

    /// Row index of `c`, or -1.
    int32_t find(const Coord3& c) const;

    size_t size() const { return size_; }

private:
    void grow();

    std::vector<Coord3> keys_;
    std::vector<int32_t> values_;  // -1 marks an empty slot
    size_t size_ = 0;
    size_t mask_ = 0;
};

/// Throws std::invalid_argument if `coords` contains a repeated entry.
void require_unique(std::span<const Coord3> coords, const char* what);

}  // namespace sparsedet3d
