#pragma once

#include <array>
#include <cmath>

namespace istd {

/// Forward-mode value carrying N partial derivatives. Used to differentiate the scalar box
/// metrics with the very code that evaluates them.
template <int N>
struct Dual {
    double v = 0.0;
    std::array<double, N> d{};

    Dual() = default;
    Dual(double value) : v(value) {}  // NOLINT: implicit lift of constants is intended
    Dual(double value, int seed_index) : v(value) { d[static_cast<std::size_t>(seed_index)] = 1.0; }

    Dual& operator+=(const Dual& o) { return *this = *this + o; }
    Dual& operator-=(const Dual& o) { return *this = *this - o; }
    Dual& operator*=(const Dual& o) { return *this = *this * o; }
    Dual& operator/=(const Dual& o) { return *this = *this / o; }

    friend Dual operator+(const Dual& a, const Dual& b) {
        Dual r(a.v + b.v);
        for (int i = 0; i < N; ++i) r.d[i] = a.d[i] + b.d[i];
        return r;
    }
    friend Dual operator-(const Dual& a, const Dual& b) {
        Dual r(a.v - b.v);
        for (int i = 0; i < N; ++i) r.d[i] = a.d[i] - b.d[i];
        return r;
    }
    friend Dual operator-(const Dual& a) {
        Dual r(-a.v);
        for (int i = 0; i < N; ++i) r.d[i] = -a.d[i];
        return r;
    }
    friend Dual operator*(const Dual& a, const Dual& b) {
        Dual r(a.v * b.v);
        for (int i = 0; i < N; ++i) r.d[i] = a.d[i] * b.v + a.v * b.d[i];
        return r;
    }
    friend Dual operator/(const Dual& a, const Dual& b) {
        Dual r(a.v / b.v);
        for (int i = 0; i < N; ++i) r.d[i] = (a.d[i] * b.v - a.v * b.d[i]) / (b.v * b.v);
        return r;
    }
    friend bool operator<(const Dual& a, const Dual& b) { return a.v < b.v; }
    friend bool operator>(const Dual& a, const Dual& b) { return a.v > b.v; }
    friend bool operator<=(const Dual& a, const Dual& b) { return a.v <= b.v; }
    friend bool operator>=(const Dual& a, const Dual& b) { return a.v >= b.v; }
    friend bool operator==(const Dual& a, const Dual& b) { return a.v == b.v; }

    friend Dual exp(const Dual& a) {
        const double e = std::exp(a.v);
        Dual r(e);
        for (int i = 0; i < N; ++i) r.d[i] = e * a.d[i];
        return r;
    }
    /// The slope at 0 is unbounded; it is clamped to a zero sub-gradient there.
    friend Dual sqrt(const Dual& a) {
        const double s = std::sqrt(a.v);
        Dual r(s);
        if (s > 0.0) {
            for (int i = 0; i < N; ++i) r.d[i] = a.d[i] / (2.0 * s);
        }
        return r;
    }
    friend Dual atan(const Dual& a) {
        Dual r(std::atan(a.v));
        const double k = 1.0 / (1.0 + a.v * a.v);
        for (int i = 0; i < N; ++i) r.d[i] = k * a.d[i];
        return r;
    }
};

inline double value_of(double x) { return x; }
template <int N>
double value_of(const Dual<N>& x) {
    return x.v;
}

}  // namespace istd
