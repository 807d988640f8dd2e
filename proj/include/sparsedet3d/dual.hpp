// Copyright Contributors to the sparsedet3d project
// SPDX-License-Identifier: Apache-2.0

#pragma once

#include <array>
#include <cmath>

namespace sparsedet3d {

/// Forward-mode dual number carrying N tangent directions. Comparisons act
/// on the value only, so branchy geometry code differentiates along the
/// branch that the value takes.
template <int N>
struct Dual {
    double v = 0.0;
    std::array<double, N> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT(google-explicit-constructor)

    static Dual variable(double value, int i) {
        Dual x(value);
        x.d[i] = 1.0;
        return x;
    }

    Dual& operator+=(const Dual& o) {
        v += o.v;
        for (int i = 0; i < N; ++i) d[i] += o.d[i];
        return *this;
    }
    Dual& operator-=(const Dual& o) {
        v -= o.v;
        for (int i = 0; i < N; ++i) d[i] -= o.d[i];
        return *this;
    }
    Dual& operator*=(const Dual& o) {
        for (int i = 0; i < N; ++i) d[i] = d[i] * o.v + v * o.d[i];
        v *= o.v;
        return *this;
    }
    Dual& operator/=(const Dual& o) {
        const double inv = 1.0 / o.v;
        for (int i = 0; i < N; ++i) d[i] = (d[i] - v * inv * o.d[i]) * inv;
        v *= inv;
        return *this;
    }

    friend Dual operator+(Dual a, const Dual& b) { return a += b; }
    friend Dual operator-(Dual a, const Dual& b) { return a -= b; }
    friend Dual operator*(Dual a, const Dual& b) { return a *= b; }
    friend Dual operator/(Dual a, const Dual& b) { return a /= b; }
    friend Dual operator-(Dual a) {
        a.v = -a.v;
        for (auto& x : a.d) x = -x;
        return a;
    }

    friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
    friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
    friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }

    friend Dual chain(const Dual& a, double value, double slope) {
        Dual r(value);
        for (int i = 0; i < N; ++i) r.d[i] = slope * a.d[i];
        return r;
    }
    friend Dual sqrt(const Dual& a) {
        const double s = std::sqrt(a.v);
        return chain(a, s, s > 0.0 ? 0.5 / s : 0.0);
    }
    friend Dual exp(const Dual& a) {
        const double e = std::exp(a.v);
        return chain(a, e, e);
    }
    friend Dual log(const Dual& a) { return chain(a, std::log(a.v), 1.0 / a.v); }
    friend Dual sin(const Dual& a) { return chain(a, std::sin(a.v), std::cos(a.v)); }
    friend Dual cos(const Dual& a) { return chain(a, std::cos(a.v), -std::sin(a.v)); }
    friend Dual abs(const Dual& a) { return a.v < 0.0 ? -a : a; }
    friend Dual atan2(const Dual& y, const Dual& x) {
        const double r2 = x.v * x.v + y.v * y.v;
        Dual r(std::atan2(y.v, x.v));
        if (r2 > 0.0) {
            for (int i = 0; i < N; ++i) r.d[i] = (x.v * y.d[i] - y.v * x.d[i]) / r2;
        }
        return r;
    }
};

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Dual<N>& x) {
    return x.v;
}

}  // namespace sparsedet3d
