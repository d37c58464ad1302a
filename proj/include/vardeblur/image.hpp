#pragma once

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <span>
#include <stdexcept>
#include <string>
#include <vector>

namespace vardeblur {

struct Size {
    int width = 0;
    int height = 0;

    [[nodiscard]] std::size_t area() const { return static_cast<std::size_t>(width) * height; }
    friend bool operator==(const Size&, const Size&) = default;
};

inline std::string to_string(Size s) {
    return std::to_string(s.width) + "x" + std::to_string(s.height);
}

/// Planar multi-channel grid of doubles. Channel c occupies the contiguous
/// row-major range [c*w*h, (c+1)*w*h).
class Image {
public:
    Image() = default;
    Image(int width, int height, int channels = 1, double fill = 0.0)
        : size_{width, height}, channels_(channels) {
        if (width < 0 || height < 0 || channels < 1)
            throw std::invalid_argument("Image: invalid dimensions");
        data_.assign(size_.area() * channels_, fill);
    }
    Image(Size size, int channels = 1, double fill = 0.0)
        : Image(size.width, size.height, channels, fill) {}

    [[nodiscard]] int width() const { return size_.width; }
    [[nodiscard]] int height() const { return size_.height; }
    [[nodiscard]] int channels() const { return channels_; }
    [[nodiscard]] Size size() const { return size_; }
    [[nodiscard]] std::size_t plane_size() const { return size_.area(); }
    [[nodiscard]] bool empty() const { return data_.empty(); }

    double& at(int x, int y, int c = 0) { return data_[index(x, y, c)]; }
    [[nodiscard]] double at(int x, int y, int c = 0) const { return data_[index(x, y, c)]; }

    std::span<double> plane(int c) { return {data_.data() + c * plane_size(), plane_size()}; }
    [[nodiscard]] std::span<const double> plane(int c) const {
        return {data_.data() + c * plane_size(), plane_size()};
    }

    std::vector<double>& data() { return data_; }
    [[nodiscard]] const std::vector<double>& data() const { return data_; }

    [[nodiscard]] std::size_t index(int x, int y, int c = 0) const {
        return static_cast<std::size_t>(c) * plane_size() + static_cast<std::size_t>(y) * size_.width + x;
    }

    [[nodiscard]] bool same_shape(const Image& o) const {
        return size_ == o.size_ && channels_ == o.channels_;
    }

    friend bool operator==(const Image&, const Image&) = default;

private:
    Size size_{};
    int channels_ = 1;
    std::vector<double> data_;
};

/// Per-pixel displacement in pixels; u horizontal, v vertical.
struct FlowField {
    int width = 0;
    int height = 0;
    std::vector<double> u;
    std::vector<double> v;

    FlowField() = default;
    FlowField(int w, int h, double fu = 0.0, double fv = 0.0)
        : width(w), height(h), u(static_cast<std::size_t>(w) * h, fu), v(static_cast<std::size_t>(w) * h, fv) {}
    explicit FlowField(Size s, double fu = 0.0, double fv = 0.0) : FlowField(s.width, s.height, fu, fv) {}

    [[nodiscard]] Size size() const { return {width, height}; }
    [[nodiscard]] std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }

    friend bool operator==(const FlowField&, const FlowField&) = default;
};

/// Per-pixel Gaussian standard deviation in pixels, always >= 0.
struct SigmaMap {
    int width = 0;
    int height = 0;
    std::vector<double> sigma;

    SigmaMap() = default;
    SigmaMap(int w, int h, double fill = 0.0) : width(w), height(h), sigma(static_cast<std::size_t>(w) * h, fill) {
        if (fill < 0.0) throw std::invalid_argument("SigmaMap: negative sigma");
    }
    explicit SigmaMap(Size s, double fill = 0.0) : SigmaMap(s.width, s.height, fill) {}

    [[nodiscard]] Size size() const { return {width, height}; }
    [[nodiscard]] std::size_t index(int x, int y) const { return static_cast<std::size_t>(y) * width + x; }

    friend bool operator==(const SigmaMap&, const SigmaMap&) = default;
};

inline void require_same_size(Size a, Size b, const char* what) {
    if (!(a == b))
        throw std::invalid_argument(std::string(what) + ": dimension mismatch (" + to_string(a) + " vs " +
                                    to_string(b) + ")");
}

// Element-wise helpers used throughout the solvers.

inline double dot(std::span<const double> a, std::span<const double> b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
    return s;
}

inline double dot(const Image& a, const Image& b) { return dot(a.data(), b.data()); }

inline double dot(const std::vector<Image>& a, const std::vector<Image>& b) {
    double s = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) s += dot(a[i], b[i]);
    return s;
}

inline double squared_norm(const Image& a) { return dot(a, a); }
inline double squared_norm(const std::vector<Image>& a) { return dot(a, a); }

/// a += s * b
inline void axpy(double s, const Image& b, Image& a) {
    auto& ad = a.data();
    const auto& bd = b.data();
    for (std::size_t i = 0; i < ad.size(); ++i) ad[i] += s * bd[i];
}

inline Image scaled(const Image& a, double s) {
    Image out = a;
    for (auto& x : out.data()) x *= s;
    return out;
}

inline Image difference(const Image& a, const Image& b) {
    Image out = a;
    axpy(-1.0, b, out);
    return out;
}

inline Image clamped(const Image& a, double lo = 0.0, double hi = 1.0) {
    Image out = a;
    for (auto& x : out.data()) x = std::clamp(x, lo, hi);
    return out;
}

inline bool all_finite(const Image& a) {
    return std::all_of(a.data().begin(), a.data().end(), [](double x) { return std::isfinite(x); });
}

inline bool all_finite(const FlowField& f) {
    auto finite = [](double x) { return std::isfinite(x); };
    return std::all_of(f.u.begin(), f.u.end(), finite) && std::all_of(f.v.begin(), f.v.end(), finite);
}

/// Mean over channels; the shared luminance used for edge maps and SSIM.
inline Image luminance(const Image& img) {
    if (img.channels() == 1) return img;
    Image out(img.size(), 1);
    const double inv = 1.0 / img.channels();
    for (int c = 0; c < img.channels(); ++c) {
        auto p = img.plane(c);
        auto o = out.plane(0);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] += p[i] * inv;
    }
    return out;
}

/// Same image content with its planes copied into a single-channel image.
inline Image channel(const Image& img, int c) {
    Image out(img.size(), 1);
    std::copy(img.plane(c).begin(), img.plane(c).end(), out.data().begin());
    return out;
}

}  // namespace vardeblur
