#pragma once

#include <array>
#include <cmath>
#include <cstddef>

namespace sdesens {

/// Fixed-dimension state vector. All models in this library are small
/// (m <= 3), so everything lives on the stack.
template <std::size_t N>
using Vec = std::array<double, N>;

/// Row-major m-by-m matrix.
template <std::size_t N>
using Mat = std::array<std::array<double, N>, N>;

template <std::size_t N>
constexpr Vec<N> zero_vec() {
    return Vec<N>{};
}

template <std::size_t N>
constexpr Vec<N> ones_vec() {
    Vec<N> v{};
    for (auto& c : v) c = 1.0;
    return v;
}

template <std::size_t N>
constexpr Vec<N> operator+(const Vec<N>& a, const Vec<N>& b) {
    Vec<N> r{};
    for (std::size_t i = 0; i < N; ++i) r[i] = a[i] + b[i];
    return r;
}

template <std::size_t N>
constexpr Vec<N> operator-(const Vec<N>& a, const Vec<N>& b) {
    Vec<N> r{};
    for (std::size_t i = 0; i < N; ++i) r[i] = a[i] - b[i];
    return r;
}

template <std::size_t N>
constexpr Vec<N> operator*(double s, const Vec<N>& a) {
    Vec<N> r{};
    for (std::size_t i = 0; i < N; ++i) r[i] = s * a[i];
    return r;
}

template <std::size_t N>
constexpr Vec<N>& operator+=(Vec<N>& a, const Vec<N>& b) {
    for (std::size_t i = 0; i < N; ++i) a[i] += b[i];
    return a;
}

template <std::size_t N>
constexpr double dot(const Vec<N>& a, const Vec<N>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < N; ++i) s += a[i] * b[i];
    return s;
}

template <std::size_t N>
double norm(const Vec<N>& a) {
    return std::sqrt(dot(a, a));
}

template <std::size_t N>
constexpr Vec<N> mat_vec(const Mat<N>& m, const Vec<N>& v) {
    Vec<N> r{};
    for (std::size_t i = 0; i < N; ++i) {
        double s = 0.0;
        for (std::size_t j = 0; j < N; ++j) s += m[i][j] * v[j];
        r[i] = s;
    }
    return r;
}

template <std::size_t N>
bool all_finite(const Vec<N>& v) {
    for (double c : v)
        if (!std::isfinite(c)) return false;
    return true;
}

}  // namespace sdesens
