#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "imagecore.hpp"
#include "operators.hpp"
#include "state.hpp"

namespace vardeblur {

struct EnergyParams {
    double lambda = 250.0;
    double mu = 2.0;
    double nu_u = 20.0;
    double nu_sigma = 20.0;
    double v_I = (25.0 / 255.0) * (25.0 / 255.0);
    int N = 2;
    double charbonnier_eps = 1e-3;
    /// Weight of an optional raw-intensity residual, relative to lambda.
    double intensity_weight = 0.0;

    void validate() const {
        if (lambda < 0 || mu < 0 || nu_u < 0 || nu_sigma < 0 || intensity_weight < 0)
            throw std::invalid_argument("EnergyParams: weights must be non-negative");
        if (!(v_I > 0)) throw std::invalid_argument("EnergyParams: v_I must be positive");
        if (N < 1) throw std::invalid_argument("EnergyParams: N must be >= 1");
        if (!(charbonnier_eps >= 0)) throw std::invalid_argument("EnergyParams: charbonnier_eps must be >= 0");
    }
};

struct EnergyBreakdown {
    double data = 0.0;
    double temporal = 0.0;
    double spatial_L = 0.0;
    double spatial_u = 0.0;
    double spatial_sigma = 0.0;
    double total = 0.0;
};

inline void to_json(nlohmann::json& j, const EnergyBreakdown& e) {
    j = nlohmann::json{{"data", e.data},           {"temporal", e.temporal},
                       {"spatial_L", e.spatial_L}, {"spatial_u", e.spatial_u},
                       {"spatial_sigma", e.spatial_sigma}, {"total", e.total}};
}

/// sqrt(t^2 + eps^2) - eps; equals |t| for eps = 0.
inline double charbonnier(double t, double eps) { return eps == 0.0 ? std::abs(t) : std::sqrt(t * t + eps * eps) - eps; }
inline double charbonnier_derivative(double t, double eps) {
    if (eps == 0.0) return t > 0 ? 1.0 : (t < 0 ? -1.0 : 0.0);
    return t / std::sqrt(t * t + eps * eps);
}

/// g(x) = exp(-|grad L0|^2 / v_I) on luminance.
inline Image edge_map(const Image& initial_latent, double v_I) {
    if (!(v_I > 0)) throw std::invalid_argument("edge_map: v_I must be positive");
    const auto g = spatial_gradient(luminance(initial_latent));
    Image out(initial_latent.size(), 1);
    for (std::size_t i = 0; i < out.plane_size(); ++i) {
        const double dx = g.dx.data()[i], dy = g.dy.data()[i];
        out.data()[i] = std::exp(-(dx * dx + dy * dy) / v_I);
    }
    return out;
}

/// Sum over pixels of weight(x) * sqrt-smoothed |grad f(x)| for one plane.
inline double weighted_tv(std::span<const double> f, Size s, const Image* weight, double eps) {
    double total = 0.0;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
            const double dx = x + 1 < s.width ? f[i + 1] - f[i] : 0.0;
            const double dy = y + 1 < s.height ? f[i + s.width] - f[i] : 0.0;
            const double mag = eps == 0.0 ? std::hypot(dx, dy) : std::sqrt(dx * dx + dy * dy + eps * eps) - eps;
            total += (weight ? weight->data()[i] : 1.0) * mag;
        }
    return total;
}

inline double image_tv(const Image& img, double eps) {
    double t = 0.0;
    for (int c = 0; c < img.channels(); ++c) t += weighted_tv(img.plane(c), img.size(), nullptr, eps);
    return t;
}

inline double flow_tv(const FlowField& f, const Image* weight, double eps) {
    return weighted_tv(f.u, f.size(), weight, eps) + weighted_tv(f.v, f.size(), weight, eps);
}

/// lambda * (||d_x r||^2 + ||d_y r||^2 + w_I ||r||^2) for residual r = model - B.
inline double residual_energy(const Image& model, const Image& blurry, double lambda, double intensity_weight) {
    const Image r = difference(model, blurry);
    const auto g = spatial_gradient(r);
    double e = squared_norm(g.dx) + squared_norm(g.dy);
    if (intensity_weight > 0) e += intensity_weight * squared_norm(r);
    return lambda * e;
}

inline const Image* data_mask(const SequenceState& st, std::size_t i) {
    return st.data_masks.empty() ? nullptr : &st.data_masks[i];
}

/// 1 where the motion path x + t*u (|t| <= tau, both directions) plus a slack
/// stays inside the frame. Elsewhere the kernel would be clipped by the
/// border, and the observation model falls back to the identity.
inline Image border_data_mask(const FlowField& fwd, const FlowField& bwd, double tau, double slack) {
    require_same_size(fwd.size(), bwd.size(), "border_data_mask");
    const Size s = fwd.size();
    Image m(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = fwd.index(x, y);
            const double r = tau * std::max(std::hypot(fwd.u[i], fwd.v[i]), std::hypot(bwd.u[i], bwd.v[i])) + slack;
            const bool ok = x - r >= 0 && y - r >= 0 && x + r <= s.width - 1 && y + r <= s.height - 1;
            m.data()[i] = ok ? 1.0 : 0.0;
        }
    return m;
}

inline Image blurred_model(const FrameState& f) { return build_blur_op(f.fwd, f.bwd, f.tau, f.sigma).apply(f.latent); }

/// m K G L + (1 - m) L; the plain blur model without a mask.
inline Image observation_model(const FrameState& f, const Image* mask) {
    return ObservationOp(build_blur_op(f.fwd, f.bwd, f.tau, f.sigma), mask).apply(f.latent);
}

inline double data_energy(const SequenceState& st, const EnergyParams& p) {
    double e = 0.0;
    if (p.lambda == 0.0) return e;
    for (std::size_t i = 0; i < st.size(); ++i) {
        const auto& f = st.frames[i];
        require_same_size(f.latent.size(), f.blurry.size(), "data_energy");
        e += residual_energy(observation_model(f, data_mask(st, i)), f.blurry, p.lambda, p.intensity_weight);
    }
    return e;
}

/// mu * sum rho(L_i(x) - L_{i+n}(x + u_{i->i+n})) over valid pixels.
inline double temporal_energy(const std::vector<Image>& latents,
                              const std::vector<std::vector<NeighborFlow>>& neighbors, double mu, double eps) {
    double e = 0.0;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        const Image& li = latents[i];
        const Size s = li.size();
        for (const auto& nb : neighbors[i]) {
            const Image& lj = latents[nb.target];
            const auto& fl = nb.flow.flow;
            for (int y = 0; y < s.height; ++y)
                for (int x = 0; x < s.width; ++x) {
                    const std::size_t k = fl.index(x, y);
                    if (nb.flow.valid.data()[k] == 0.0) continue;
                    for (int c = 0; c < li.channels(); ++c) {
                        const double t = li.at(x, y, c) - sample_bilinear(lj.plane(c), s, x + fl.u[k], y + fl.v[k]);
                        e += charbonnier(t, eps);
                    }
                }
        }
    }
    return mu * e;
}

inline double temporal_energy(const SequenceState& st, const EnergyParams& p) {
    if (st.size() < 2) return 0.0;
    return temporal_energy(st.latents(), all_neighbor_flows(st, p.N), p.mu, p.charbonnier_eps);
}

inline const Image* edge_weight(const SequenceState& st, std::size_t i) {
    return st.edge_maps.empty() ? nullptr : &st.edge_maps[i];
}

struct SpatialParts {
    double latent = 0.0;
    double flow = 0.0;
    double sigma = 0.0;
};

/// Flow smoothness counts only flows that point at an existing frame.
inline SpatialParts spatial_energy_parts(const SequenceState& st, const EnergyParams& p) {
    SpatialParts s;
    const double eps = p.charbonnier_eps;
    for (std::size_t i = 0; i < st.size(); ++i) {
        const auto& f = st.frames[i];
        const Image* g = edge_weight(st, i);
        s.latent += image_tv(f.latent, eps);
        s.sigma += p.nu_sigma * weighted_tv(f.sigma.sigma, f.sigma.size(), g, eps);
        if (i + 1 < st.size()) s.flow += p.nu_u * flow_tv(f.fwd, g, eps);
        if (i > 0) s.flow += p.nu_u * flow_tv(f.bwd, g, eps);
    }
    return s;
}

inline double spatial_energy(const SequenceState& st, const EnergyParams& p) {
    const auto s = spatial_energy_parts(st, p);
    return s.latent + s.flow + s.sigma;
}

inline EnergyBreakdown total_energy(const SequenceState& st, const EnergyParams& p) {
    EnergyBreakdown e;
    e.data = data_energy(st, p);
    e.temporal = temporal_energy(st, p);
    const auto s = spatial_energy_parts(st, p);
    e.spatial_L = s.latent;
    e.spatial_u = s.flow;
    e.spatial_sigma = s.sigma;
    e.total = e.data + e.temporal + e.spatial_L + e.spatial_u + e.spatial_sigma;
    return e;
}

/// Latent-restoration objective with exact absolute values: data + TV(L) + temporal.
inline double restoration_objective(const std::vector<Image>& latents, const std::vector<Image>& models,
                                    const SequenceState& st,
                                    const std::vector<std::vector<NeighborFlow>>& neighbors, const EnergyParams& p) {
    double e = 0.0;
    for (std::size_t i = 0; i < latents.size(); ++i) {
        e += residual_energy(models[i], st.frames[i].blurry, p.lambda, p.intensity_weight);
        e += image_tv(latents[i], 0.0);
    }
    if (latents.size() >= 2) e += temporal_energy(latents, neighbors, p.mu, 0.0);
    return e;
}

}  // namespace vardeblur
