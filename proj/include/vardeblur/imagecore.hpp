#pragma once

#include <cmath>
#include <span>
#include <stdexcept>
#include <vector>

#include "image.hpp"
#include "parallel.hpp"

namespace vardeblur {

// ---------------------------------------------------------------------------
// Sampling

/// Bilinear sample of a single plane with coordinates clamped to the border.
inline double sample_bilinear(std::span<const double> plane, Size s, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(s.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(s.height - 1));
    const int x0 = std::min(static_cast<int>(x), s.width - 1);
    const int y0 = std::min(static_cast<int>(y), s.height - 1);
    const int x1 = std::min(x0 + 1, s.width - 1);
    const int y1 = std::min(y0 + 1, s.height - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    const double* row0 = plane.data() + static_cast<std::size_t>(y0) * s.width;
    const double* row1 = plane.data() + static_cast<std::size_t>(y1) * s.width;
    const double top = row0[x0] + fx * (row0[x1] - row0[x0]);
    const double bot = row1[x0] + fx * (row1[x1] - row1[x0]);
    return top + fy * (bot - top);
}

struct SampleWithGradient {
    double value = 0.0;
    double dx = 0.0;
    double dy = 0.0;
};

/// Bilinear sample plus the exact partial derivatives of the interpolant.
/// Derivatives vanish along an axis where the coordinate is clamped.
inline SampleWithGradient sample_bilinear_grad(std::span<const double> plane, Size s, double x, double y) {
    const bool clamp_x = x <= 0.0 || x >= s.width - 1;
    const bool clamp_y = y <= 0.0 || y >= s.height - 1;
    x = std::clamp(x, 0.0, static_cast<double>(s.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(s.height - 1));
    int x0 = std::min(static_cast<int>(x), s.width - 2);
    int y0 = std::min(static_cast<int>(y), s.height - 2);
    x0 = std::max(x0, 0);
    y0 = std::max(y0, 0);
    const int x1 = std::min(x0 + 1, s.width - 1);
    const int y1 = std::min(y0 + 1, s.height - 1);
    const double fx = x - x0;
    const double fy = y - y0;
    auto at = [&](int xx, int yy) { return plane[static_cast<std::size_t>(yy) * s.width + xx]; };
    const double a = at(x0, y0), b = at(x1, y0), c = at(x0, y1), d = at(x1, y1);
    SampleWithGradient out;
    out.value = (1 - fy) * ((1 - fx) * a + fx * b) + fy * ((1 - fx) * c + fx * d);
    out.dx = clamp_x ? 0.0 : (1 - fy) * (b - a) + fy * (d - c);
    out.dy = clamp_y ? 0.0 : (1 - fx) * (c - a) + fx * (d - b);
    return out;
}

inline bool inside(Size s, double x, double y) {
    return x >= 0.0 && y >= 0.0 && x <= s.width - 1 && y <= s.height - 1;
}

// ---------------------------------------------------------------------------
// Warping

struct WarpResult {
    Image image;
    Image valid;  ///< 1 where x + flow(x) lies inside the image, else 0
};

/// output(x) = img(x + flow(x)), bilinear, clamped to the border.
inline WarpResult warp_bilinear(const Image& img, const FlowField& flow) {
    require_same_size(img.size(), flow.size(), "warp_bilinear");
    const Size s = img.size();
    WarpResult r{Image(s, img.channels()), Image(s, 1)};
    parallel_rows(s.height, [&](int y) {
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = flow.index(x, y);
            const double sx = x + flow.u[i];
            const double sy = y + flow.v[i];
            r.valid.at(x, y) = inside(s, sx, sy) ? 1.0 : 0.0;
            for (int c = 0; c < img.channels(); ++c) r.image.at(x, y, c) = sample_bilinear(img.plane(c), s, sx, sy);
        }
    });
    return r;
}

// ---------------------------------------------------------------------------
// Derivatives: forward differences, last column/row zero.

struct Gradient {
    Image dx;
    Image dy;
};

inline Gradient spatial_gradient(const Image& img) {
    const int w = img.width(), h = img.height();
    Gradient g{Image(img.size(), img.channels()), Image(img.size(), img.channels())};
    for (int c = 0; c < img.channels(); ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                const double v = img.at(x, y, c);
                g.dx.at(x, y, c) = x + 1 < w ? img.at(x + 1, y, c) - v : 0.0;
                g.dy.at(x, y, c) = y + 1 < h ? img.at(x, y + 1, c) - v : 0.0;
            }
        }
    }
    return g;
}

/// Adjoint of spatial_gradient (negative backward divergence).
inline Image spatial_gradient_adjoint(const Image& dx, const Image& dy) {
    const int w = dx.width(), h = dx.height();
    Image out(dx.size(), dx.channels());
    for (int c = 0; c < dx.channels(); ++c) {
        for (int y = 0; y < h; ++y) {
            for (int x = 0; x < w; ++x) {
                double v = 0.0;
                if (x + 1 < w) v -= dx.at(x, y, c);
                if (x > 0) v += dx.at(x - 1, y, c);
                if (y + 1 < h) v -= dy.at(x, y, c);
                if (y > 0) v += dy.at(x, y - 1, c);
                out.at(x, y, c) = v;
            }
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Filtering and resampling

/// Normalized 1-D Gaussian taps for offsets [-r, r], r = ceil(3 sigma).
inline std::vector<double> gaussian_taps(double sigma) {
    const int r = std::max(1, static_cast<int>(std::ceil(3.0 * sigma)));
    std::vector<double> k(2 * r + 1);
    double z = 0.0;
    for (int i = -r; i <= r; ++i) z += k[i + r] = std::exp(-0.5 * i * i / (sigma * sigma));
    for (auto& t : k) t /= z;
    return k;
}

/// Separable Gaussian blur with clamp-to-border, used for anti-aliasing.
inline Image gaussian_blur(const Image& img, double sigma) {
    if (sigma <= 0.0) return img;
    const auto k = gaussian_taps(sigma);
    const int r = static_cast<int>(k.size() / 2);
    const int w = img.width(), h = img.height();
    Image tmp(img.size(), img.channels()), out(img.size(), img.channels());
    for (int c = 0; c < img.channels(); ++c) {
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i) s += k[i + r] * img.at(std::clamp(x + i, 0, w - 1), y, c);
                tmp.at(x, y, c) = s;
            }
        for (int y = 0; y < h; ++y)
            for (int x = 0; x < w; ++x) {
                double s = 0.0;
                for (int i = -r; i <= r; ++i) s += k[i + r] * tmp.at(x, std::clamp(y + i, 0, h - 1), c);
                out.at(x, y, c) = s;
            }
    }
    return out;
}

/// Pixel-center-aligned bilinear resample of a plane to a new size.
inline std::vector<double> resample_plane(std::span<const double> plane, Size from, Size to) {
    std::vector<double> out(to.area());
    const double sx = static_cast<double>(from.width) / to.width;
    const double sy = static_cast<double>(from.height) / to.height;
    for (int y = 0; y < to.height; ++y) {
        const double fy = (y + 0.5) * sy - 0.5;
        for (int x = 0; x < to.width; ++x) {
            const double fx = (x + 0.5) * sx - 0.5;
            out[static_cast<std::size_t>(y) * to.width + x] = sample_bilinear(plane, from, fx, fy);
        }
    }
    return out;
}

inline Image resample_bilinear(const Image& img, Size to) {
    if (img.size() == to) return img;
    Image out(to, img.channels());
    for (int c = 0; c < img.channels(); ++c) {
        auto p = resample_plane(img.plane(c), img.size(), to);
        std::copy(p.begin(), p.end(), out.plane(c).begin());
    }
    return out;
}

/// Bilinear resample of both components; displacements scale with the
/// per-axis resolution ratio.
inline FlowField resample_flow(const FlowField& flow, int new_w, int new_h) {
    if (new_w < 1 || new_h < 1) throw std::invalid_argument("resample_flow: target size must be >= 1");
    const Size to{new_w, new_h};
    if (flow.size() == to) return flow;
    FlowField out(to);
    out.u = resample_plane(flow.u, flow.size(), to);
    out.v = resample_plane(flow.v, flow.size(), to);
    const double su = static_cast<double>(new_w) / flow.width;
    const double sv = static_cast<double>(new_h) / flow.height;
    for (auto& x : out.u) x *= su;
    for (auto& x : out.v) x *= sv;
    return out;
}

inline SigmaMap resample_sigma(const SigmaMap& sigma, Size to) {
    if (sigma.size() == to) return sigma;
    SigmaMap out(to);
    out.sigma = resample_plane(sigma.sigma, sigma.size(), to);
    for (auto& s : out.sigma) s = std::max(0.0, s);
    return out;
}

// ---------------------------------------------------------------------------
// Pyramid

inline constexpr int kMinPyramidDimension = 16;

struct PyramidLevel {
    std::vector<Image> frames;
    double scale = 1.0;  ///< relative to full resolution
    [[nodiscard]] Size size() const { return frames.front().size(); }
};

/// Levels ordered coarse -> fine; the last level is the input itself.
struct Pyramid {
    std::vector<PyramidLevel> levels;
    [[nodiscard]] const PyramidLevel& finest() const { return levels.back(); }
    [[nodiscard]] const PyramidLevel& coarsest() const { return levels.front(); }
};

/// Dimensions of level k (0 = finest): round(dim * scale^k).
inline Size pyramid_level_size(Size full, double scale, int k) {
    const double f = std::pow(scale, k);
    return {static_cast<int>(std::lround(full.width * f)), static_cast<int>(std::lround(full.height * f))};
}

inline Pyramid build_pyramid(const std::vector<Image>& frames, int num_levels, double scale) {
    if (frames.empty()) throw std::invalid_argument("build_pyramid: no frames");
    if (num_levels < 1) throw std::invalid_argument("build_pyramid: num_levels must be >= 1");
    if (!(scale > 0.0 && scale < 1.0)) throw std::invalid_argument("build_pyramid: scale must lie in (0,1)");
    for (const auto& f : frames)
        if (!f.same_shape(frames.front())) throw std::invalid_argument("build_pyramid: mismatched frame dimensions");

    const Size full = frames.front().size();
    std::vector<PyramidLevel> fine_to_coarse;
    fine_to_coarse.push_back({frames, 1.0});
    for (int k = 1; k < num_levels; ++k) {
        const Size s = pyramid_level_size(full, scale, k);
        if (std::min(s.width, s.height) < kMinPyramidDimension) break;
        PyramidLevel next{{}, std::pow(scale, k)};
        for (const auto& f : fine_to_coarse.back().frames)
            next.frames.push_back(resample_bilinear(gaussian_blur(f, 0.5 / scale), s));
        fine_to_coarse.push_back(std::move(next));
    }
    Pyramid p;
    p.levels.assign(std::make_move_iterator(fine_to_coarse.rbegin()), std::make_move_iterator(fine_to_coarse.rend()));
    return p;
}

}  // namespace vardeblur
