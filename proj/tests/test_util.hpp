#pragma once

#include <cmath>
#include <random>

#include "vardeblur/vardeblur.hpp"

namespace vtest {

using namespace vardeblur;

inline Image random_image(Size s, int channels, std::mt19937& rng, double lo = 0.0, double hi = 1.0) {
    std::uniform_real_distribution<double> d(lo, hi);
    Image img(s, channels);
    for (auto& v : img.data()) v = d(rng);
    return img;
}

inline FlowField random_flow(Size s, std::mt19937& rng, double mag) {
    std::uniform_real_distribution<double> d(-mag, mag);
    FlowField f(s);
    for (auto& v : f.u) v = d(rng);
    for (auto& v : f.v) v = d(rng);
    return f;
}

inline SigmaMap random_sigma(Size s, std::mt19937& rng, double lo, double hi) {
    std::uniform_real_distribution<double> d(lo, hi);
    SigmaMap m(s);
    for (auto& v : m.sigma) v = d(rng);
    return m;
}

/// Smooth procedural texture with plenty of gradient.
inline Image smooth_texture(Size s, double phase = 0.0) {
    Image img(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            img.at(x, y) = 0.5 + 0.2 * std::sin(0.35 * x + phase) * std::cos(0.27 * y - 0.5 * phase) +
                           0.15 * std::sin(0.11 * (x + 2 * y) + phase);
    return img;
}

inline double max_abs_diff(const Image& a, const Image& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) m = std::max(m, std::abs(a.data()[i] - b.data()[i]));
    return m;
}

/// |<Ax, y> - <x, A'y>| relative to the acceptance tolerance scale.
template <class Op>
double adjoint_gap(const Op& op, const Image& x, const Image& y) {
    const double lhs = dot(op.apply(x), y);
    const double rhs = dot(x, op.adjoint(y));
    return std::abs(lhs - rhs) / (std::sqrt(squared_norm(x)) * std::sqrt(squared_norm(y)) + 1.0);
}

}  // namespace vtest
