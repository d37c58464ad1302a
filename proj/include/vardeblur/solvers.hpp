#pragma once

#include <cmath>
#include <limits>
#include <stdexcept>
#include <string>
#include <vector>

#include "energy.hpp"
#include "image.hpp"
#include "imagecore.hpp"
#include "operators.hpp"
#include "state.hpp"

namespace vardeblur {

class NumericalError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

/// Primal-dual step sizes and iteration caps. eta * epsilon * |K|^2 <= 1 must
/// hold for the operator K each scheme uses.
struct PDConfig {
    double eta = 1.0 / std::sqrt(8.0);
    double epsilon = 1.0 / std::sqrt(8.0);
    int iters = 30;
    int cg_iters = 50;
    double cg_tol = 1e-4;
};

/// Steps for latent restoration. The stacked operator [A; mu D] has
/// |A|^2 <= 8 and |D_n|^2 <= 4 for each of the 2N temporal rows.
inline PDConfig restore_pd_config(double mu, int N, int iters = 30) {
    PDConfig pd;
    const double bound = 8.0 + mu * mu * 4.0 * 2.0 * N;
    pd.eta = pd.epsilon = 1.0 / std::sqrt(bound);
    pd.iters = iters;
    return pd;
}

/// Steps for a weighted-TV field update with weight nu: the operator nu W A
/// has norm at most nu * sqrt(8), split evenly between the two steps.
inline PDConfig field_pd_config(double nu, int iters) {
    PDConfig pd;
    pd.eta = pd.epsilon = nu > 0 ? 1.0 / (std::sqrt(8.0) * nu) : 1.0 / std::sqrt(8.0);
    pd.iters = iters;
    return pd;
}

// ---------------------------------------------------------------------------
// Temporal differences along fixed flows

struct BilinearStencil {
    std::size_t index[4];
    double weight[4];
};

/// Same interpolation weights as sample_bilinear.
inline BilinearStencil bilinear_stencil(Size s, double x, double y) {
    x = std::clamp(x, 0.0, static_cast<double>(s.width - 1));
    y = std::clamp(y, 0.0, static_cast<double>(s.height - 1));
    const int x0 = std::min(static_cast<int>(x), s.width - 1);
    const int y0 = std::min(static_cast<int>(y), s.height - 1);
    const int x1 = std::min(x0 + 1, s.width - 1);
    const int y1 = std::min(y0 + 1, s.height - 1);
    const double fx = x - x0, fy = y - y0;
    auto idx = [&](int xx, int yy) { return static_cast<std::size_t>(yy) * s.width + xx; };
    return {{idx(x0, y0), idx(x1, y0), idx(x0, y1), idx(x1, y1)},
            {(1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy}};
}

/// (D L)_{i,n}(x) = L_i(x) - L_{i+n}(x + u_{i->i+n}(x)), zero where invalid.
/// One range image per (frame, neighbour) pair, in neighbour-list order.
class TemporalDifferenceOp {
public:
    using domain_type = std::vector<Image>;
    using range_type = std::vector<Image>;

    struct Entry {
        int source;
        int target;
        int offset;
        MaskedFlow flow;
    };

    explicit TemporalDifferenceOp(const std::vector<std::vector<NeighborFlow>>& neighbors) {
        for (std::size_t i = 0; i < neighbors.size(); ++i)
            for (const auto& nb : neighbors[i])
                entries_.push_back({static_cast<int>(i), nb.target, nb.offset, nb.flow});
    }

    [[nodiscard]] const std::vector<Entry>& entries() const { return entries_; }

    [[nodiscard]] range_type apply(const domain_type& frames) const {
        range_type out;
        out.reserve(entries_.size());
        for (const auto& e : entries_) {
            const Image& li = frames[e.source];
            const Image& lj = frames[e.target];
            const Size s = li.size();
            Image d(s, li.channels());
            for (int y = 0; y < s.height; ++y)
                for (int x = 0; x < s.width; ++x) {
                    const std::size_t k = e.flow.flow.index(x, y);
                    if (e.flow.valid.data()[k] == 0.0) continue;
                    const double sx = x + e.flow.flow.u[k], sy = y + e.flow.flow.v[k];
                    for (int c = 0; c < li.channels(); ++c)
                        d.at(x, y, c) = li.at(x, y, c) - sample_bilinear(lj.plane(c), s, sx, sy);
                }
            out.push_back(std::move(d));
        }
        return out;
    }

    /// Scatter formulation, accumulated in a fixed order.
    [[nodiscard]] domain_type adjoint(const range_type& q) const {
        domain_type out;
        if (q.empty()) return out;
        const Size s = q.front().size();
        const int channels = q.front().channels();
        std::size_t frames = 0;
        for (const auto& e : entries_) frames = std::max<std::size_t>(frames, std::max(e.source, e.target) + 1);
        out.assign(frames, Image(s, channels));
        for (std::size_t k = 0; k < entries_.size(); ++k) {
            const auto& e = entries_[k];
            Image& zi = out[e.source];
            Image& zj = out[e.target];
            for (int y = 0; y < s.height; ++y)
                for (int x = 0; x < s.width; ++x) {
                    const std::size_t p = e.flow.flow.index(x, y);
                    if (e.flow.valid.data()[p] == 0.0) continue;
                    const auto st = bilinear_stencil(s, x + e.flow.flow.u[p], y + e.flow.flow.v[p]);
                    for (int c = 0; c < channels; ++c) {
                        const double v = q[k].at(x, y, c);
                        zi.at(x, y, c) += v;
                        auto plane = zj.plane(c);
                        for (int t = 0; t < 4; ++t) plane[st.index[t]] -= st.weight[t] * v;
                    }
                }
        }
        return out;
    }

private:
    std::vector<Entry> entries_;
};

inline TemporalDifferenceOp temporal_difference_op(const SequenceState& st, int N) {
    return TemporalDifferenceOp(all_neighbor_flows(st, N));
}

// ---------------------------------------------------------------------------
// Conjugate gradient

struct CgResult {
    int iterations = 0;
    double relative_residual = 0.0;
    std::vector<double> quadratic_trace;  ///< 0.5 x'Hx - b'x after each iterate (when traced)
};

/// Solves H x = b for SPD H, warm-started from x. The residual norm of CG
/// may oscillate on ill-conditioned systems, so divergence means 5
/// consecutive iterations where the residual grows and the quadratic
/// 0.5 x'Hx - b'x fails to decrease (impossible for SPD H in exact arithmetic).
template <typename ApplyH>
CgResult conjugate_gradient(ApplyH&& apply_h, const Image& b, Image& x, int max_iters, double tol,
                            bool trace = false) {
    CgResult res;
    const double b_norm = std::sqrt(squared_norm(b));
    Image r = difference(b, apply_h(x));
    auto quadratic = [&] { return -0.5 * (dot(x, b) + dot(x, r)); };
    double q = quadratic();
    if (trace) res.quadratic_trace.push_back(q);
    double rr = squared_norm(r);
    if (b_norm == 0.0 || std::sqrt(rr) <= tol * b_norm) {
        res.relative_residual = b_norm == 0.0 ? 0.0 : std::sqrt(rr) / b_norm;
        return res;
    }
    Image p = r;
    int growth = 0;
    for (int k = 0; k < max_iters; ++k) {
        const Image hp = apply_h(p);
        const double php = dot(p, hp);
        if (!(php > 0.0)) throw NumericalError("conjugate_gradient: operator not positive definite");
        const double alpha = rr / php;
        axpy(alpha, p, x);
        axpy(-alpha, hp, r);
        const double rr_new = squared_norm(r);
        const double q_new = quadratic();
        res.iterations = k + 1;
        if (trace) res.quadratic_trace.push_back(q_new);
        if (!std::isfinite(rr_new) || !std::isfinite(q_new)) throw NumericalError("conjugate_gradient: non-finite residual");
        growth = (rr_new > rr && q_new >= q) ? growth + 1 : 0;
        if (growth >= 5) throw NumericalError("conjugate_gradient: diverged (residual grew over 5 consecutive iterations)");
        q = q_new;
        if (std::sqrt(rr_new) <= tol * b_norm) {
            rr = rr_new;
            break;
        }
        const double beta = rr_new / rr;
        rr = rr_new;
        for (std::size_t i = 0; i < p.data().size(); ++i) p.data()[i] = r.data()[i] + beta * p.data()[i];
    }
    res.relative_residual = std::sqrt(rr) / b_norm;
    return res;
}

// ---------------------------------------------------------------------------
// Latent restoration

struct LatentDuals {
    std::vector<Image> s;  ///< per frame: dx planes then dy planes
    std::vector<Image> q;  ///< per temporal entry
};

struct RestoreResult {
    std::vector<Image> latents;
    double objective_initial = 0.0;
    double objective_final = 0.0;
    int iterations = 0;
    int cg_iterations = 0;
    std::vector<double> objective_trace;
};

namespace detail {

/// (d'd + w) r for the derivative-domain residual.
inline Image residual_normal(const Image& r, double intensity_weight) {
    const auto g = spatial_gradient(r);
    Image out = spatial_gradient_adjoint(g.dx, g.dy);
    if (intensity_weight > 0) axpy(intensity_weight, r, out);
    return out;
}

/// Isotropic projection of (dx, dy) dual pairs onto the unit disc, plane by plane.
inline void project_pairs(Image& dual) {
    const int half = dual.channels() / 2;
    for (int c = 0; c < half; ++c) {
        auto px = dual.plane(c);
        auto py = dual.plane(c + half);
        for (std::size_t i = 0; i < px.size(); ++i) {
            const double m = std::hypot(px[i], py[i]);
            if (m > 1.0) {
                px[i] /= m;
                py[i] /= m;
            }
        }
    }
}

}  // namespace detail

/// Primal-dual restoration of all latent frames with fixed kernels and flows.
/// The returned frames are the iterate with the lowest exact objective seen,
/// so objective_final <= objective_initial.
inline RestoreResult restore_latent(const SequenceState& st, const EnergyParams& params, const PDConfig& pd,
                                    LatentDuals& duals) {
    const std::size_t F = st.size();
    const Size size = st.frame_size();
    std::vector<ObservationOp> blur;
    blur.reserve(F);
    for (std::size_t i = 0; i < F; ++i) {
        const auto& f = st.frames[i];
        blur.emplace_back(build_blur_op(f.fwd, f.bwd, f.tau, f.sigma), data_mask(st, i));
    }
    const auto neighbors = F >= 2 ? all_neighbor_flows(st, params.N) : std::vector<std::vector<NeighborFlow>>(F);
    const TemporalDifferenceOp D(neighbors);
    const bool temporal = params.mu > 0 && !D.entries().empty();
    const GradientOp A(size);
    const double two_lambda = 2.0 * params.lambda;

    std::vector<Image> L = st.latents();
    auto models_of = [&](const std::vector<Image>& frames) {
        std::vector<Image> m;
        for (std::size_t i = 0; i < F; ++i) m.push_back(blur[i].apply(frames[i]));
        return m;
    };
    auto objective = [&](const std::vector<Image>& frames) {
        return restoration_objective(frames, models_of(frames), st, neighbors, params);
    };

    RestoreResult res;
    res.objective_initial = objective(L);
    res.objective_trace.push_back(res.objective_initial);
    double best = res.objective_initial;
    std::vector<Image> best_L = L;

    const int channels = L.front().channels();
    if (duals.s.size() != F) duals.s.assign(F, Image(size, 2 * channels));
    if (temporal && duals.q.size() != D.entries().size()) duals.q.assign(D.entries().size(), Image(size, channels));

    // Right-hand side data part is fixed: 2 lambda (KG)'(d'd + w) B.
    std::vector<Image> rhs_data;
    for (std::size_t i = 0; i < F; ++i)
        rhs_data.push_back(
            scaled(blur[i].adjoint(detail::residual_normal(st.frames[i].blurry, params.intensity_weight)), two_lambda));

    for (int m = 0; m < pd.iters; ++m) {
        // Dual ascent on spatial differences.
        for (std::size_t i = 0; i < F; ++i) {
            axpy(pd.eta, A.apply(L[i]), duals.s[i]);
            detail::project_pairs(duals.s[i]);
        }
        std::vector<Image> dtq;
        if (temporal) {
            const auto dl = D.apply(L);
            for (std::size_t k = 0; k < dl.size(); ++k) {
                axpy(pd.eta * params.mu, dl[k], duals.q[k]);
                for (auto& v : duals.q[k].data()) v = std::clamp(v, -1.0, 1.0);
            }
            dtq = D.adjoint(duals.q);
        }
        // Primal: quadratic data term plus proximity to the explicit step.
        for (std::size_t i = 0; i < F; ++i) {
            Image center = L[i];
            axpy(-pd.epsilon, A.adjoint(duals.s[i]), center);
            if (temporal) axpy(-pd.epsilon * params.mu, dtq[i], center);
            Image rhs = rhs_data[i];
            axpy(1.0 / pd.epsilon, center, rhs);
            auto apply_h = [&](const Image& x) {
                Image h = scaled(blur[i].adjoint(detail::residual_normal(blur[i].apply(x), params.intensity_weight)),
                                 two_lambda);
                axpy(1.0 / pd.epsilon, x, h);
                return h;
            };
            const auto cg = conjugate_gradient(apply_h, rhs, L[i], pd.cg_iters, pd.cg_tol);
            res.cg_iterations += cg.iterations;
            if (!all_finite(L[i])) throw NumericalError("restore_latent: non-finite latent frame");
        }
        res.iterations = m + 1;
        const double obj = objective(L);
        res.objective_trace.push_back(obj);
        if (obj < best) {
            best = obj;
            best_L = L;
        }
    }
    res.latents = std::move(best_L);
    res.objective_final = best;
    return res;
}

// ---------------------------------------------------------------------------
// Linearization of the flow-dependent terms

struct FlowGradient {
    FlowField fwd;
    FlowField bwd;
};

inline constexpr double kFlowProbeStep = 0.1;
inline constexpr double kSigmaProbeStep = 0.05;

namespace detail {

inline FlowField shifted(const FlowField& f, double du, double dv) {
    FlowField out = f;
    for (auto& x : out.u) x += du;
    for (auto& x : out.v) x += dv;
    return out;
}

/// 2 lambda (d'd + w)(K G L - B): gradient of the data term w.r.t. the blurred model.
inline Image data_model_gradient(const Image& model, const Image& blurry, const EnergyParams& p) {
    return scaled(residual_normal(difference(model, blurry), p.intensity_weight), 2.0 * p.lambda);
}

/// y <- m y + (1 - m) x
inline void blend_identity(Image& y, const Image& x, const Image* mask) {
    if (!mask) return;
    for (int c = 0; c < y.channels(); ++c) {
        auto o = y.plane(c);
        const auto p = x.plane(c);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] = mask->data()[i] * o[i] + (1.0 - mask->data()[i]) * p[i];
    }
}

/// y <- m y
inline void weight_rows(Image& y, const Image* mask) {
    if (!mask) return;
    for (int c = 0; c < y.channels(); ++c) {
        auto o = y.plane(c);
        for (std::size_t i = 0; i < o.size(); ++i) o[i] *= mask->data()[i];
    }
}

inline void accumulate_products(const Image& a, const Image& b, double scale, std::vector<double>& out) {
    for (int c = 0; c < a.channels(); ++c) {
        const auto pa = a.plane(c), pb = b.plane(c);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * pa[i] * pb[i];
    }
}

}  // namespace detail

/// Gradient plus a diagonal Gauss-Newton curvature (Charbonnier terms use
/// their quadratic majorizer), used to scale field steps.
struct FlowLinearization {
    std::vector<FlowGradient> gradient;
    std::vector<FlowGradient> curvature;
};

namespace detail {

/// Diagonal of d'd + w at each pixel: the number of forward differences touching it.
inline std::vector<double> difference_diagonal(Size s, double intensity_weight) {
    std::vector<double> d(s.area());
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            d[static_cast<std::size_t>(y) * s.width + x] =
                (x > 0) + (x + 1 < s.width) + (y > 0) + (y + 1 < s.height) + intensity_weight;
    return d;
}

/// Diagonal of K'M(d'd + w)MK for a diagonal row weight M: the derivative
/// energy of each weighted column of K.
inline std::vector<double> blurred_difference_diagonal(const SparseRowOperator& K, double intensity_weight,
                                                       const Image* row_weight = nullptr) {
    const Size s = K.out_size();
    const std::size_t n = s.area();
    std::vector<double> d(n, 0.0), v(n, 0.0);
    std::vector<char> hit(n, 0);
    for (std::size_t p = 0; p < n; ++p) {
        const auto col = K.column(p);
        for (const auto& [q, w] : col) {
            v[q] += (row_weight ? row_weight->data()[q] : 1.0) * w;
            hit[q] = 1;
        }
        double e = 0.0;
        auto pair = [&](std::size_t a, std::size_t b) {
            const double t = v[a] - v[b];
            e += t * t;
        };
        for (const auto& [q, w] : col) {
            if (hit[q] == 2) continue;  // duplicate tap already handled
            const int x = static_cast<int>(q % s.width), y = static_cast<int>(q / s.width);
            // Each pair touching the support is counted once: from its left or
            // upper member when that one is in the support.
            if (x + 1 < s.width) pair(q, q + 1);
            if (x > 0 && !hit[q - 1]) pair(q - 1, q);
            if (y + 1 < s.height) pair(q, q + s.width);
            if (y > 0 && !hit[q - s.width]) pair(q - s.width, q);
            e += intensity_weight * v[q] * v[q];
            hit[q] = 2;
        }
        d[p] = e;
        for (const auto& [q, w] : col) {
            v[q] = 0.0;
            hit[q] = 0;
        }
    }
    return d;
}

/// Per-pixel d(G L)/d sigma by central differences over all pixels at once.
/// Where both probes stay non-negative, Richardson extrapolation of the h and
/// h/2 differences cancels the O(h^2) error; near zero the clamped one-sided
/// span is kept so that sigma can grow from the identity.
inline Image defocus_sigma_derivative(const Image& latent, const SigmaMap& sigma) {
    auto central = [&](double h) {
        SigmaMap lo = sigma, hi = sigma;
        for (std::size_t k = 0; k < sigma.sigma.size(); ++k) {
            hi.sigma[k] = sigma.sigma[k] + h;
            lo.sigma[k] = std::max(0.0, sigma.sigma[k] - h);
        }
        Image d = difference(DefocusOp(hi).apply(latent), DefocusOp(lo).apply(latent));
        for (int c = 0; c < d.channels(); ++c) {
            auto pl = d.plane(c);
            for (std::size_t k = 0; k < pl.size(); ++k) pl[k] /= hi.sigma[k] - lo.sigma[k];
        }
        return d;
    };
    Image d = central(kSigmaProbeStep);
    const Image half = central(0.5 * kSigmaProbeStep);
    for (int c = 0; c < d.channels(); ++c) {
        auto pl = d.plane(c);
        const auto ph = half.plane(c);
        for (std::size_t k = 0; k < pl.size(); ++k)
            if (sigma.sigma[k] >= kSigmaProbeStep) pl[k] = (4.0 * ph[k] - pl[k]) / 3.0;
    }
    return d;
}

inline void accumulate_curvature(const Image& jac, const std::vector<double>& diag, double scale,
                                 std::vector<double>& out) {
    for (int c = 0; c < jac.channels(); ++c) {
        const auto j = jac.plane(c);
        for (std::size_t i = 0; i < out.size(); ++i) out[i] += scale * diag[i] * j[i] * j[i];
    }
}

}  // namespace detail

/// Each motion-kernel row depends only on the flow at its own pixel, so
/// perturbing every pixel at once and differencing the blurred model gives
/// the exact per-pixel derivative of the data term (up to the central
/// difference of the kernel). The temporal part is analytic; chained flows
/// are treated as moving one-for-one with the direct flow. Boundary frames
/// keep mirrored outward flows, so probing the inward flow also moves the
/// mirrored one.
inline FlowLinearization linearize_flow_terms(const SequenceState& st, const EnergyParams& p) {
    const std::size_t F = st.size();
    const Size s = st.frame_size();
    FlowLinearization out;
    out.gradient.assign(F, FlowGradient{FlowField(s), FlowField(s)});
    out.curvature.assign(F, FlowGradient{FlowField(s), FlowField(s)});
    if (F < 2) return out;
    const double eps = p.charbonnier_eps;

    for (std::size_t i = 0; i < F; ++i) {
        const auto& fi = st.frames[i];
        const auto diag = detail::difference_diagonal(s, p.intensity_weight);
        const Image* mask = data_mask(st, i);
        const bool has_fwd = i + 1 < F, has_bwd = i > 0;

        if (p.mu > 0) {
            for (const auto& nb : neighbor_flows(st, static_cast<int>(i), p.N)) {
                FlowField& g = nb.offset > 0 ? out.gradient[i].fwd : out.gradient[i].bwd;
                FlowField& h = nb.offset > 0 ? out.curvature[i].fwd : out.curvature[i].bwd;
                const Image& lj = st.frames[nb.target].latent;
                const auto& fl = nb.flow.flow;
                for (int y = 0; y < s.height; ++y)
                    for (int x = 0; x < s.width; ++x) {
                        const std::size_t k = fl.index(x, y);
                        if (nb.flow.valid.data()[k] == 0.0) continue;
                        for (int c = 0; c < fi.latent.channels(); ++c) {
                            const auto sg = sample_bilinear_grad(lj.plane(c), s, x + fl.u[k], y + fl.v[k]);
                            const double r = fi.latent.at(x, y, c) - sg.value;
                            const double d = p.mu * charbonnier_derivative(r, eps);
                            g.u[k] -= d * sg.dx;
                            g.v[k] -= d * sg.dy;
                            const double w = p.mu / std::sqrt(r * r + std::max(eps, 1e-6) * std::max(eps, 1e-6));
                            h.u[k] += w * sg.dx * sg.dx;
                            h.v[k] += w * sg.dy * sg.dy;
                        }
                    }
            }
        }

        if (p.lambda > 0) {
            const DefocusOp G(fi.sigma);
            const Image gl = G.apply(fi.latent);
            Image model = MotionBlurOp(fi.fwd, fi.bwd, fi.tau).apply(gl);
            detail::blend_identity(model, fi.latent, mask);
            const Image gr = detail::data_model_gradient(model, fi.blurry, p);
            const double h = kFlowProbeStep;
            auto probe = [&](bool forward, double du, double dv) {
                FlowField fwd = fi.fwd, bwd = fi.bwd;
                if (forward) {
                    fwd = detail::shifted(fi.fwd, du, dv);
                    if (!has_bwd) bwd = negated(fwd);
                } else {
                    bwd = detail::shifted(fi.bwd, du, dv);
                    if (!has_fwd) fwd = negated(bwd);
                }
                return MotionBlurOp(fwd, bwd, fi.tau).apply(gl);
            };
            // Masked pixels observe L directly, so their model ignores the flow.
            for (bool forward : {true, false}) {
                if (forward ? !has_fwd : !has_bwd) continue;
                FlowField& g = forward ? out.gradient[i].fwd : out.gradient[i].bwd;
                FlowField& c = forward ? out.curvature[i].fwd : out.curvature[i].bwd;
                Image du = scaled(difference(probe(forward, h, 0), probe(forward, -h, 0)), 1.0 / (2 * h));
                Image dv = scaled(difference(probe(forward, 0, h), probe(forward, 0, -h)), 1.0 / (2 * h));
                detail::weight_rows(du, mask);
                detail::weight_rows(dv, mask);
                detail::accumulate_products(gr, du, 1.0, g.u);
                detail::accumulate_products(gr, dv, 1.0, g.v);
                detail::accumulate_curvature(du, diag, 2.0 * p.lambda, c.u);
                detail::accumulate_curvature(dv, diag, 2.0 * p.lambda, c.v);
            }
        }
        if (!has_fwd) out.gradient[i].fwd = out.curvature[i].fwd = FlowField(s);
        if (!has_bwd) out.gradient[i].bwd = out.curvature[i].bwd = FlowField(s);
    }
    return out;
}

/// Gradient of mu*temporal + lambda*data w.r.t. every estimated flow.
inline std::vector<FlowGradient> linearize_rho_u(const SequenceState& st, const EnergyParams& p) {
    return linearize_flow_terms(st, p).gradient;
}

struct SigmaLinearization {
    std::vector<SigmaMap> gradient;
    std::vector<SigmaMap> curvature;
};

/// Each defocus row depends only on its own sigma, so one simultaneous probe
/// of all pixels gives the per-pixel derivative of G L; the model gradient is
/// pulled back through K to reach it.
inline SigmaLinearization linearize_sigma_terms(const SequenceState& st, const EnergyParams& p) {
    SigmaLinearization out;
    for (std::size_t i = 0; i < st.size(); ++i) {
        const auto& f = st.frames[i];
        const Image* mask = data_mask(st, i);
        const Size s = f.sigma.size();
        SigmaMap g(s), h(s);
        if (p.lambda > 0) {
            const MotionBlurOp K(f.fwd, f.bwd, f.tau);
            Image model = K.apply(DefocusOp(f.sigma).apply(f.latent));
            detail::blend_identity(model, f.latent, mask);
            Image weighted = detail::data_model_gradient(model, f.blurry, p);
            detail::weight_rows(weighted, mask);
            const Image pulled = K.adjoint(weighted);
            const Image d = detail::defocus_sigma_derivative(f.latent, f.sigma);
            detail::accumulate_products(pulled, d, 1.0, g.sigma);
            // Gauss-Newton diagonal: sigma(x) moves G L at x only, which K spreads.
            detail::accumulate_curvature(d, detail::blurred_difference_diagonal(K, p.intensity_weight, mask),
                                         2.0 * p.lambda,
                                         h.sigma);
        }
        out.gradient.push_back(std::move(g));
        out.curvature.push_back(std::move(h));
    }
    return out;
}

/// Gradient of the data term w.r.t. each frame's sigma map.
inline std::vector<SigmaMap> linearize_rho_sigma(const SequenceState& st, const EnergyParams& p) {
    return linearize_sigma_terms(st, p).gradient;
}

// ---------------------------------------------------------------------------
// Weighted-TV field updates

struct FieldStepOptions {
    double max_step = 1.0;  ///< trust region around the linearization point
    /// Proximal weight 1/theta on |x - x0|^2 / 2; 0 reproduces the plain
    /// linear step whose length grows with the iteration count.
    double prox = 0.0;
    /// Over-relaxation of the point used by the dual step (0 keeps the plain
    /// two-step scheme, 1 is the standard extrapolation).
    double extrapolation = 0.0;
    /// Start from the best uniform offset under the quadratic model.
    bool constant_start = false;
    /// Optional per-pixel additions to `prox` (one per component for flows).
    const std::vector<double>* prox_x = nullptr;
    const std::vector<double>* prox_y = nullptr;
    double lower = -std::numeric_limits<double>::infinity();
    double upper = std::numeric_limits<double>::infinity();
};

namespace detail {

/// Dual ascent for one scalar plane: dual planes (dx, dy) at positions c, c+1 of `dual`.
inline void field_dual_step(std::span<const double> f, Size s, const Image& edge, double nu, double eta,
                            Image& dual, int c) {
    auto px = dual.plane(c);
    auto py = dual.plane(c + 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
            const double gw = nu * edge.data()[i];
            const double dx = x + 1 < s.width ? f[i + 1] - f[i] : 0.0;
            const double dy = y + 1 < s.height ? f[i + s.width] - f[i] : 0.0;
            double ax = px[i] + eta * gw * dx, ay = py[i] + eta * gw * dy;
            const double m = std::hypot(ax, ay);
            if (m > 1.0) {
                ax /= m;
                ay /= m;
            }
            px[i] = ax;
            py[i] = ay;
        }
}

/// (nu W A)' applied to dual planes c, c+1.
inline std::vector<double> field_dual_adjoint(Size s, const Image& edge, double nu, const Image& dual, int c) {
    const auto px = dual.plane(c), py = dual.plane(c + 1);
    std::vector<double> out(s.area());
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
            auto wx = [&](std::size_t k) { return nu * edge.data()[k] * px[k]; };
            auto wy = [&](std::size_t k) { return nu * edge.data()[k] * py[k]; };
            double v = 0.0;
            if (x + 1 < s.width) v -= wx(i);
            if (x > 0) v += wx(i - 1);
            if (y + 1 < s.height) v -= wy(i);
            if (y > 0) v += wy(i - s.width);
            out[i] = v;
        }
    return out;
}

inline double field_model(std::span<const double> f, std::span<const double> f0, std::span<const double> grad,
                          const std::vector<double>* w, double prox, Size s, const Image& edge, double nu) {
    double m = 0.0;
    for (std::size_t i = 0; i < f.size(); ++i) {
        const double d = f[i] - f0[i];
        m += grad[i] * d + 0.5 * (prox + (w ? (*w)[i] : 0.0)) * d * d;
    }
    double tv = 0.0;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
            const double dx = x + 1 < s.width ? f[i + 1] - f[i] : 0.0;
            const double dy = y + 1 < s.height ? f[i + s.width] - f[i] : 0.0;
            tv += edge.data()[i] * std::hypot(dx, dy);
        }
    return m + nu * tv;
}

inline constexpr int kModelCheckInterval = 10;

}  // namespace detail

/// Primal-dual minimization of <grad, u - u0> + prox/2 |u - u0|^2
/// + nu sum g |grad u| subject to |u(x) - u0(x)| <= max_step.
/// `dual` holds four planes (du/dx, du/dy, dv/dx, dv/dy) and is warm-started.
inline FlowField update_flow(const FlowField& u0, const FlowField& grad, const Image& edge, double nu,
                             const PDConfig& pd, Image& dual, const FieldStepOptions& opt = {}) {
    const Size s = u0.size();
    require_same_size(s, grad.size(), "update_flow");
    require_same_size(s, edge.size(), "update_flow");
    if (!(dual.size() == s) || dual.channels() != 4) dual = Image(s, 4);
    FlowField u = u0;
    auto weight = [&](const std::vector<double>* w, std::size_t i) { return opt.prox + (w ? (*w)[i] : 0.0); };
    if (opt.constant_start) {
        // A uniform offset costs no TV; start from the best one under the
        // quadratic model so the iterations only resolve local structure.
        double gu = 0, gv = 0, cu = 0, cv = 0;
        for (std::size_t i = 0; i < u.u.size(); ++i) {
            gu += grad.u[i];
            gv += grad.v[i];
            cu += weight(opt.prox_x, i);
            cv += weight(opt.prox_y, i);
        }
        double du = cu > 0 ? -gu / cu : 0.0, dv = cv > 0 ? -gv / cv : 0.0;
        const double m = std::hypot(du, dv);
        if (m > opt.max_step) {
            du *= opt.max_step / m;
            dv *= opt.max_step / m;
        }
        for (std::size_t i = 0; i < u.u.size(); ++i) {
            u.u[i] += du;
            u.v[i] += dv;
        }
    }
    FlowField bar = u;  // extrapolated point seen by the dual step
    // Primal-dual iterates are not monotone: keep the best checkpoint of the model.
    auto model = [&](const FlowField& f) {
        return detail::field_model(f.u, u0.u, grad.u, opt.prox_x, opt.prox, s, edge, nu) +
               detail::field_model(f.v, u0.v, grad.v, opt.prox_y, opt.prox, s, edge, nu);
    };
    FlowField best = u;
    double best_model = model(u);
    for (int m = 0; m < pd.iters; ++m) {
        detail::field_dual_step(bar.u, s, edge, nu, pd.eta, dual, 0);
        detail::field_dual_step(bar.v, s, edge, nu, pd.eta, dual, 2);
        const auto tu = detail::field_dual_adjoint(s, edge, nu, dual, 0);
        const auto tv = detail::field_dual_adjoint(s, edge, nu, dual, 2);
        for (std::size_t i = 0; i < u.u.size(); ++i) {
            const double cu = u.u[i] - pd.epsilon * tu[i];
            const double cv = u.v[i] - pd.epsilon * tv[i];
            // Closed-form prox of the linear-plus-quadratic model, as an offset from u0.
            const double wu = weight(opt.prox_x, i), wv = weight(opt.prox_y, i);
            double nu_ = (cu / pd.epsilon - grad.u[i] + wu * u0.u[i]) / (1.0 / pd.epsilon + wu) - u0.u[i];
            double nv_ = (cv / pd.epsilon - grad.v[i] + wv * u0.v[i]) / (1.0 / pd.epsilon + wv) - u0.v[i];
            const double m2 = std::hypot(nu_, nv_);
            if (m2 > opt.max_step) {
                nu_ *= opt.max_step / m2;
                nv_ *= opt.max_step / m2;
            }
            const double pu = u.u[i], pv = u.v[i];
            u.u[i] = u0.u[i] + nu_;
            u.v[i] = u0.v[i] + nv_;
            bar.u[i] = u.u[i] + opt.extrapolation * (u.u[i] - pu);
            bar.v[i] = u.v[i] + opt.extrapolation * (u.v[i] - pv);
        }
        if ((m + 1) % detail::kModelCheckInterval == 0 || m + 1 == pd.iters) {
            const double v = model(u);
            if (v < best_model) {
                best_model = v;
                best = u;
            }
        }
    }
    return best;
}

/// Scalar counterpart of update_flow for sigma maps; the result is also kept
/// within [lower, upper] (and never below zero).
inline SigmaMap update_sigma(const SigmaMap& sigma0, const SigmaMap& grad, const Image& edge, double nu,
                             const PDConfig& pd, Image& dual, const FieldStepOptions& opt = {}) {
    const Size s = sigma0.size();
    require_same_size(s, grad.size(), "update_sigma");
    require_same_size(s, edge.size(), "update_sigma");
    if (!(dual.size() == s) || dual.channels() != 2) dual = Image(s, 2);
    SigmaMap out = sigma0;
    const double lower = std::max(0.0, opt.lower);
    if (opt.constant_start) {
        double g = 0, c = 0;
        for (std::size_t i = 0; i < out.sigma.size(); ++i) {
            g += grad.sigma[i];
            c += opt.prox + (opt.prox_x ? (*opt.prox_x)[i] : 0.0);
        }
        const double d = c > 0 ? std::clamp(-g / c, -opt.max_step, opt.max_step) : 0.0;
        for (auto& v : out.sigma) v = std::clamp(v + d, lower, std::max(lower, opt.upper));
    }
    SigmaMap bar = out;
    auto model = [&](const SigmaMap& f) {
        return detail::field_model(f.sigma, sigma0.sigma, grad.sigma, opt.prox_x, opt.prox, s, edge, nu);
    };
    SigmaMap best = out;
    double best_model = model(out);
    for (int m = 0; m < pd.iters; ++m) {
        detail::field_dual_step(bar.sigma, s, edge, nu, pd.eta, dual, 0);
        const auto t = detail::field_dual_adjoint(s, edge, nu, dual, 0);
        for (std::size_t i = 0; i < out.sigma.size(); ++i) {
            const double c = out.sigma[i] - pd.epsilon * t[i];
            const double w = opt.prox + (opt.prox_x ? (*opt.prox_x)[i] : 0.0);
            const double x = (c / pd.epsilon - grad.sigma[i] + w * sigma0.sigma[i]) / (1.0 / pd.epsilon + w);
            const double lo = std::max(lower, sigma0.sigma[i] - opt.max_step);
            const double hi = std::min(opt.upper, sigma0.sigma[i] + opt.max_step);
            const double prev = out.sigma[i];
            out.sigma[i] = std::clamp(x, lo, std::max(lo, hi));
            bar.sigma[i] = out.sigma[i] + opt.extrapolation * (out.sigma[i] - prev);
        }
        if ((m + 1) % detail::kModelCheckInterval == 0 || m + 1 == pd.iters) {
            const double v = model(out);
            if (v < best_model) {
                best_model = v;
                best = out;
            }
        }
    }
    return best;
}

}  // namespace vardeblur
