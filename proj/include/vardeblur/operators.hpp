#pragma once

#include <algorithm>
#include <cmath>
#include <concepts>
#include <stdexcept>
#include <utility>
#include <vector>

#include "image.hpp"
#include "imagecore.hpp"
#include "parallel.hpp"

namespace vardeblur {

/// Matrix-free linear map with an explicit adjoint.
template <class Op>
concept LinearOperator = requires(const Op& op, const typename Op::domain_type& x, const typename Op::range_type& y) {
    { op.apply(x) } -> std::same_as<typename Op::range_type>;
    { op.adjoint(y) } -> std::same_as<typename Op::domain_type>;
};

template <class Op>
concept SizedOperator = LinearOperator<Op> && requires(const Op& op) {
    { op.in_size() } -> std::same_as<Size>;
    { op.out_size() } -> std::same_as<Size>;
};

struct Vec2 {
    double x = 0.0;
    double y = 0.0;
    [[nodiscard]] double norm() const { return std::hypot(x, y); }
};

struct Tap {
    int dx = 0;
    int dy = 0;
    double weight = 0.0;
    friend bool operator==(const Tap&, const Tap&) = default;
};

using KernelTaps = std::vector<Tap>;

namespace detail {

/// Small dense accumulator addressed by integer offsets.
class TapGrid {
public:
    void reset(int x0, int y0, int x1, int y1) {
        x0_ = x0;
        y0_ = y0;
        w_ = x1 - x0 + 1;
        h_ = y1 - y0 + 1;
        cells_.assign(static_cast<std::size_t>(w_) * h_, 0.0);
    }
    void splat(double px, double py, double mass) {
        const int ix = static_cast<int>(std::floor(px));
        const int iy = static_cast<int>(std::floor(py));
        const double fx = px - ix, fy = py - iy;
        add(ix, iy, (1 - fx) * (1 - fy) * mass);
        add(ix + 1, iy, fx * (1 - fy) * mass);
        add(ix, iy + 1, (1 - fx) * fy * mass);
        add(ix + 1, iy + 1, fx * fy * mass);
    }
    [[nodiscard]] KernelTaps taps() const {
        KernelTaps out;
        double total = 0.0;
        for (int y = 0; y < h_; ++y)
            for (int x = 0; x < w_; ++x) {
                const double m = cells_[static_cast<std::size_t>(y) * w_ + x];
                if (m > 0.0) {
                    out.push_back({x + x0_, y + y0_, m});
                    total += m;
                }
            }
        for (auto& t : out) t.weight /= total;
        return out;
    }

private:
    void add(int x, int y, double m) {
        if (m <= 0.0) return;
        cells_[static_cast<std::size_t>(y - y0_) * w_ + (x - x0_)] += m;
    }
    int x0_ = 0, y0_ = 0, w_ = 0, h_ = 0;
    std::vector<double> cells_;
};

/// Splats the uniform line density on [0, end] with total `mass`.
/// The segment is cut where it crosses integer coordinates; on each piece
/// the bilinear hat weights are quadratic in the path parameter, so three
/// Simpson nodes integrate them exactly.
inline void splat_segment(TapGrid& grid, Vec2 end, double mass) {
    if (end.x == 0.0 && end.y == 0.0) {
        grid.splat(0.0, 0.0, mass);
        return;
    }
    std::vector<double> cuts{0.0, 1.0};
    for (double a : {end.x, end.y}) {
        if (a == 0.0) continue;
        const double lo = std::min(0.0, a), hi = std::max(0.0, a);
        for (int k = static_cast<int>(std::ceil(lo)); k <= static_cast<int>(std::floor(hi)); ++k) {
            const double t = k / a;
            if (t > 0.0 && t < 1.0) cuts.push_back(t);
        }
    }
    std::sort(cuts.begin(), cuts.end());
    for (std::size_t i = 0; i + 1 < cuts.size(); ++i) {
        const double t0 = cuts[i], t1 = cuts[i + 1];
        const double h = t1 - t0;
        if (h <= 0.0) continue;
        const double tm = 0.5 * (t0 + t1);
        grid.splat(t0 * end.x, t0 * end.y, mass * h / 6.0);
        grid.splat(tm * end.x, tm * end.y, mass * h * 4.0 / 6.0);
        grid.splat(t1 * end.x, t1 * end.y, mass * h / 6.0);
    }
}

}  // namespace detail

/// Piecewise-linear motion PSF: half the unit mass spread uniformly along
/// [0, tau*fwd] and half along [0, tau*bwd], bilinearly splatted onto integer
/// offsets and normalized to sum exactly one.
inline KernelTaps rasterize_motion_kernel(Vec2 fwd, Vec2 bwd, double tau) {
    if (!std::isfinite(fwd.x) || !std::isfinite(fwd.y) || !std::isfinite(bwd.x) || !std::isfinite(bwd.y) ||
        !std::isfinite(tau))
        throw std::invalid_argument("rasterize_motion_kernel: non-finite input");
    if (tau < 0.0 || tau > 1.0) throw std::invalid_argument("rasterize_motion_kernel: tau outside [0,1]");
    const Vec2 f{tau * fwd.x, tau * fwd.y};
    const Vec2 b{tau * bwd.x, tau * bwd.y};
    thread_local detail::TapGrid grid;
    grid.reset(static_cast<int>(std::floor(std::min({0.0, f.x, b.x}))),
               static_cast<int>(std::floor(std::min({0.0, f.y, b.y}))),
               static_cast<int>(std::floor(std::max({0.0, f.x, b.x}))) + 1,
               static_cast<int>(std::floor(std::max({0.0, f.y, b.y}))) + 1);
    detail::splat_segment(grid, f, 0.5);
    detail::splat_segment(grid, b, 0.5);
    return grid.taps();
}

// ---------------------------------------------------------------------------

/// Sparse row-stored operator on single-channel grids, applied per channel.
/// Rows and the transposed rows are both kept so that apply and adjoint are
/// gathers (deterministic under parallel rows).
class SparseRowOperator {
public:
    using domain_type = Image;
    using range_type = Image;

    [[nodiscard]] Size in_size() const { return size_; }
    [[nodiscard]] Size out_size() const { return size_; }

    [[nodiscard]] Image apply(const Image& img) const { return gather(img, row_ptr_, cols_, weights_); }
    [[nodiscard]] Image adjoint(const Image& img) const { return gather(img, t_row_ptr_, t_cols_, t_weights_); }

    /// Row of output pixel `p` as (source index, weight) pairs.
    [[nodiscard]] std::vector<std::pair<int, double>> row(std::size_t p) const {
        std::vector<std::pair<int, double>> r;
        for (std::size_t k = row_ptr_[p]; k < row_ptr_[p + 1]; ++k) r.emplace_back(cols_[k], weights_[k]);
        return r;
    }

    /// Column of input pixel `p`: every output pixel it feeds, with weight.
    [[nodiscard]] std::vector<std::pair<int, double>> column(std::size_t p) const {
        std::vector<std::pair<int, double>> c;
        for (std::size_t k = t_row_ptr_[p]; k < t_row_ptr_[p + 1]; ++k) c.emplace_back(t_cols_[k], t_weights_[k]);
        return c;
    }

protected:
    SparseRowOperator() = default;

    void begin(Size s) {
        size_ = s;
        row_ptr_.assign(1, 0);
        cols_.clear();
        weights_.clear();
    }

    /// Appends the next row, dropping taps outside the image and renormalizing.
    void push_row(int x, int y, const KernelTaps& taps) {
        double total = 0.0;
        const std::size_t start = cols_.size();
        for (const auto& t : taps) {
            const int sx = x + t.dx, sy = y + t.dy;
            if (sx < 0 || sy < 0 || sx >= size_.width || sy >= size_.height) continue;
            cols_.push_back(sy * size_.width + sx);
            weights_.push_back(t.weight);
            total += t.weight;
        }
        if (cols_.size() == start) {
            cols_.push_back(y * size_.width + x);
            weights_.push_back(1.0);
        } else {
            for (std::size_t k = start; k < weights_.size(); ++k) weights_[k] /= total;
        }
        row_ptr_.push_back(cols_.size());
    }

    void finish() {
        const std::size_t n = size_.area();
        t_row_ptr_.assign(n + 1, 0);
        for (int c : cols_) ++t_row_ptr_[c + 1];
        for (std::size_t i = 0; i < n; ++i) t_row_ptr_[i + 1] += t_row_ptr_[i];
        t_cols_.assign(cols_.size(), 0);
        t_weights_.assign(cols_.size(), 0.0);
        std::vector<std::size_t> fill(t_row_ptr_.begin(), t_row_ptr_.end() - 1);
        for (std::size_t r = 0; r < n; ++r)
            for (std::size_t k = row_ptr_[r]; k < row_ptr_[r + 1]; ++k) {
                const std::size_t slot = fill[cols_[k]]++;
                t_cols_[slot] = static_cast<int>(r);
                t_weights_[slot] = weights_[k];
            }
    }

private:
    Image gather(const Image& img, const std::vector<std::size_t>& ptr, const std::vector<int>& cols,
                 const std::vector<double>& w) const {
        require_same_size(img.size(), size_, "SparseRowOperator");
        Image out(size_, img.channels());
        for (int c = 0; c < img.channels(); ++c) {
            const auto src = img.plane(c);
            auto dst = out.plane(c);
            parallel_rows(size_.height, [&](int y) {
                for (int x = 0; x < size_.width; ++x) {
                    const std::size_t p = static_cast<std::size_t>(y) * size_.width + x;
                    double s = 0.0;
                    for (std::size_t k = ptr[p]; k < ptr[p + 1]; ++k) s += w[k] * src[cols[k]];
                    dst[p] = s;
                }
            });
        }
        return out;
    }

    Size size_{};
    std::vector<std::size_t> row_ptr_, t_row_ptr_;
    std::vector<int> cols_, t_cols_;
    std::vector<double> weights_, t_weights_;
};

/// Per-pixel motion blur built from bidirectional flows and a duty cycle.
class MotionBlurOp : public SparseRowOperator {
public:
    MotionBlurOp(const FlowField& fwd, const FlowField& bwd, double tau) : tau_(tau) {
        require_same_size(fwd.size(), bwd.size(), "build_motion_blur_op");
        begin(fwd.size());
        for (int y = 0; y < fwd.height; ++y)
            for (int x = 0; x < fwd.width; ++x) {
                const std::size_t i = fwd.index(x, y);
                push_row(x, y, rasterize_motion_kernel({fwd.u[i], fwd.v[i]}, {bwd.u[i], bwd.v[i]}, tau));
            }
        finish();
    }
    [[nodiscard]] double tau() const { return tau_; }

private:
    double tau_;
};

inline MotionBlurOp build_motion_blur_op(const FlowField& fwd, const FlowField& bwd, double tau) {
    return MotionBlurOp(fwd, bwd, tau);
}

// ---------------------------------------------------------------------------

/// Below this standard deviation a defocus row is the identity.
inline constexpr double kMinDefocusSigma = 0.05;

inline int defocus_radius(double sigma) {
    return sigma < kMinDefocusSigma ? 0 : static_cast<int>(std::ceil(3.0 * sigma));
}

/// Spatially varying isotropic Gaussian blur. Row x holds a Gaussian with
/// std sigma(x) on the square window of radius ceil(3 sigma(x)), clipped at
/// the image border and normalized to sum one. Weights are recomputed on the
/// fly; the adjoint gathers over the largest radius.
class DefocusOp {
public:
    using domain_type = Image;
    using range_type = Image;

    explicit DefocusOp(const SigmaMap& sigma) : size_(sigma.size()) {
        const std::size_t n = size_.area();
        radius_.resize(n);
        table_offset_.resize(n);
        inv_norm_.resize(n);
        for (int y = 0; y < size_.height; ++y)
            for (int x = 0; x < size_.width; ++x) {
                const std::size_t i = sigma.index(x, y);
                const double s = sigma.sigma[i];
                if (!(s >= 0.0)) throw std::invalid_argument("build_defocus_op: negative or non-finite sigma");
                const int r = defocus_radius(s);
                radius_[i] = r;
                max_radius_ = std::max(max_radius_, r);
                table_offset_[i] = table_.size();
                if (r == 0) {
                    table_.push_back(1.0);
                    inv_norm_[i] = 1.0;
                    continue;
                }
                // The 2-D Gaussian factors, so a 1-D table of exp(-d^2/2s^2) suffices.
                for (int d = 0; d <= r; ++d) table_.push_back(std::exp(-d * d / (2.0 * s * s)));
                const double* e = table_.data() + table_offset_[i];
                double zx = 0.0, zy = 0.0;
                for (int d = -r; d <= r; ++d) {
                    if (x + d >= 0 && x + d < size_.width) zx += e[std::abs(d)];
                    if (y + d >= 0 && y + d < size_.height) zy += e[std::abs(d)];
                }
                inv_norm_[i] = 1.0 / (zx * zy);
            }
    }

    [[nodiscard]] Size in_size() const { return size_; }
    [[nodiscard]] Size out_size() const { return size_; }
    [[nodiscard]] bool is_identity() const { return max_radius_ == 0; }

    /// Normalized weight of row `row` at offset (dx, dy); zero outside its window.
    [[nodiscard]] double weight(std::size_t row, int dx, int dy) const {
        const int r = radius_[row];
        if (std::abs(dx) > r || std::abs(dy) > r) return 0.0;
        const double* e = table_.data() + table_offset_[row];
        return e[std::abs(dx)] * e[std::abs(dy)] * inv_norm_[row];
    }

    [[nodiscard]] Image apply(const Image& img) const {
        require_same_size(img.size(), size_, "DefocusOp::apply");
        if (is_identity()) return img;
        Image out(size_, img.channels());
        const int w = size_.width, h = size_.height;
        for (int c = 0; c < img.channels(); ++c) {
            const auto src = img.plane(c);
            auto dst = out.plane(c);
            parallel_rows(h, [&](int y) {
                for (int x = 0; x < w; ++x) {
                    const std::size_t i = static_cast<std::size_t>(y) * w + x;
                    const int r = radius_[i];
                    if (r == 0) {
                        dst[i] = src[i];
                        continue;
                    }
                    const double* e = table_.data() + table_offset_[i];
                    const int x0 = std::max(-r, -x), x1 = std::min(r, w - 1 - x);
                    double s = 0.0;
                    for (int dy = std::max(-r, -y); dy <= std::min(r, h - 1 - y); ++dy) {
                        const double* row = src.data() + static_cast<std::ptrdiff_t>(i) + dy * w;
                        double t = 0.0;
                        for (int dx = x0; dx <= x1; ++dx) t += e[std::abs(dx)] * row[dx];
                        s += e[std::abs(dy)] * t;
                    }
                    dst[i] = s * inv_norm_[i];
                }
            });
        }
        return out;
    }

    [[nodiscard]] Image adjoint(const Image& img) const {
        require_same_size(img.size(), size_, "DefocusOp::adjoint");
        if (is_identity()) return img;
        Image out(size_, img.channels());
        const int w = size_.width, h = size_.height, R = max_radius_;
        for (int c = 0; c < img.channels(); ++c) {
            const auto src = img.plane(c);
            auto dst = out.plane(c);
            parallel_rows(h, [&](int py) {
                for (int px = 0; px < w; ++px) {
                    double s = 0.0;
                    for (int y = std::max(0, py - R); y <= std::min(h - 1, py + R); ++y) {
                        const int ady = std::abs(py - y);
                        for (int x = std::max(0, px - R); x <= std::min(w - 1, px + R); ++x) {
                            const std::size_t i = static_cast<std::size_t>(y) * w + x;
                            const int r = radius_[i];
                            const int adx = std::abs(px - x);
                            if (adx > r || ady > r) continue;
                            const double* e = table_.data() + table_offset_[i];
                            s += e[adx] * e[ady] * inv_norm_[i] * src[i];
                        }
                    }
                    dst[static_cast<std::size_t>(py) * w + px] = s;
                }
            });
        }
        return out;
    }

private:
    Size size_;
    int max_radius_ = 0;
    std::vector<int> radius_;
    std::vector<std::size_t> table_offset_;
    std::vector<double> table_;
    std::vector<double> inv_norm_;
};

inline DefocusOp build_defocus_op(const SigmaMap& sigma) { return DefocusOp(sigma); }

// ---------------------------------------------------------------------------

class IdentityOp {
public:
    using domain_type = Image;
    using range_type = Image;
    explicit IdentityOp(Size s) : size_(s) {}
    [[nodiscard]] Size in_size() const { return size_; }
    [[nodiscard]] Size out_size() const { return size_; }
    [[nodiscard]] Image apply(const Image& x) const { return x; }
    [[nodiscard]] Image adjoint(const Image& y) const { return y; }

private:
    Size size_;
};

/// Forward-difference gradient; the range stacks the dx planes then the dy planes.
class GradientOp {
public:
    using domain_type = Image;
    using range_type = Image;
    explicit GradientOp(Size s) : size_(s) {}
    [[nodiscard]] Size in_size() const { return size_; }
    [[nodiscard]] Size out_size() const { return size_; }

    [[nodiscard]] Image apply(const Image& x) const {
        auto g = spatial_gradient(x);
        Image out(size_, 2 * x.channels());
        std::copy(g.dx.data().begin(), g.dx.data().end(), out.data().begin());
        std::copy(g.dy.data().begin(), g.dy.data().end(), out.data().begin() + g.dx.data().size());
        return out;
    }
    [[nodiscard]] Image adjoint(const Image& y) const {
        const int c = y.channels() / 2;
        Image dx(size_, c), dy(size_, c);
        std::copy(y.data().begin(), y.data().begin() + dx.data().size(), dx.data().begin());
        std::copy(y.data().begin() + dx.data().size(), y.data().end(), dy.data().begin());
        return spatial_gradient_adjoint(dx, dy);
    }

private:
    Size size_;
};

/// a ∘ b: apply runs b then a; adjoint runs aᵀ then bᵀ.
template <LinearOperator A, LinearOperator B>
    requires std::same_as<typename A::domain_type, typename B::range_type>
class Composition {
public:
    using domain_type = typename B::domain_type;
    using range_type = typename A::range_type;

    Composition(A a, B b) : a_(std::move(a)), b_(std::move(b)) {
        if constexpr (SizedOperator<A> && SizedOperator<B>) {
            if (!(b_.out_size() == a_.in_size())) throw std::invalid_argument("compose: dimension mismatch");
        }
    }

    [[nodiscard]] Size in_size() const requires SizedOperator<B> { return b_.in_size(); }
    [[nodiscard]] Size out_size() const requires SizedOperator<A> { return a_.out_size(); }

    [[nodiscard]] range_type apply(const domain_type& x) const { return a_.apply(b_.apply(x)); }
    [[nodiscard]] domain_type adjoint(const range_type& y) const { return b_.adjoint(a_.adjoint(y)); }

    [[nodiscard]] const A& outer() const { return a_; }
    [[nodiscard]] const B& inner() const { return b_; }

private:
    A a_;
    B b_;
};

template <LinearOperator A, LinearOperator B>
Composition<A, B> compose(A a, B b) {
    return Composition<A, B>(std::move(a), std::move(b));
}

/// K G: defocus first, then motion.
using BlurOp = Composition<MotionBlurOp, DefocusOp>;

inline BlurOp build_blur_op(const FlowField& fwd, const FlowField& bwd, double tau, const SigmaMap& sigma) {
    return compose(MotionBlurOp(fwd, bwd, tau), DefocusOp(sigma));
}

/// m (K G x) + (1 - m) x with a per-pixel weight m in [0, 1]: the blur
/// model where m = 1 and the identity where m = 0. No mask means m = 1.
class ObservationOp {
public:
    using domain_type = Image;
    using range_type = Image;

    ObservationOp(BlurOp blur, const Image* mask) : blur_(std::move(blur)) {
        if (mask) {
            require_same_size(mask->size(), blur_.in_size(), "ObservationOp");
            mask_ = *mask;
        }
    }

    [[nodiscard]] Size in_size() const { return blur_.in_size(); }
    [[nodiscard]] Size out_size() const { return blur_.out_size(); }
    [[nodiscard]] const BlurOp& blur() const { return blur_; }
    [[nodiscard]] const Image* mask() const { return mask_.empty() ? nullptr : &mask_; }

    [[nodiscard]] Image apply(const Image& x) const {
        Image y = blur_.apply(x);
        if (!mask_.empty()) blend(y, x);
        return y;
    }

    [[nodiscard]] Image adjoint(const Image& y) const {
        if (mask_.empty()) return blur_.adjoint(y);
        Image weighted = y;
        for (int c = 0; c < y.channels(); ++c) {
            auto p = weighted.plane(c);
            for (std::size_t i = 0; i < p.size(); ++i) p[i] *= mask_.data()[i];
        }
        Image out = blur_.adjoint(weighted);
        for (int c = 0; c < y.channels(); ++c) {
            auto o = out.plane(c);
            const auto q = y.plane(c);
            for (std::size_t i = 0; i < o.size(); ++i) o[i] += (1.0 - mask_.data()[i]) * q[i];
        }
        return out;
    }

    /// y <- m y + (1 - m) x
    void blend(Image& y, const Image& x) const {
        if (mask_.empty()) return;
        for (int c = 0; c < y.channels(); ++c) {
            auto o = y.plane(c);
            const auto p = x.plane(c);
            for (std::size_t i = 0; i < o.size(); ++i) {
                const double m = mask_.data()[i];
                o[i] = m * o[i] + (1.0 - m) * p[i];
            }
        }
    }

private:
    BlurOp blur_;
    Image mask_;
};

}  // namespace vardeblur
