#pragma once

#include <chrono>
#include <cmath>
#include <functional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "energy.hpp"
#include "image.hpp"
#include "imagecore.hpp"
#include "operators.hpp"
#include "solvers.hpp"
#include "state.hpp"

namespace vardeblur {

class ConfigError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Non-finite state detected; carries where it happened.
class NumericalAbort : public NumericalError {
public:
    NumericalAbort(int level, int round, const std::string& what)
        : NumericalError("numerical abort at level " + std::to_string(level) + ", round " + std::to_string(round) +
                         ": " + what),
          level_(level),
          round_(round) {}
    [[nodiscard]] int level() const { return level_; }
    [[nodiscard]] int round() const { return round_; }

private:
    int level_, round_;
};

struct PipelineConfig {
    int num_levels = 17;
    double scale = 0.9;
    double lambda = 250.0;
    double mu = 2.0;
    double nu_u = 20.0;
    double nu_sigma = 20.0;
    double v_I = (25.0 / 255.0) * (25.0 / 255.0);
    int N = 2;
    double tau = 0.5;
    std::vector<double> tau_per_frame;  ///< overrides `tau` when non-empty
    double sigma_init = 0.8;
    int alternation_rounds = 3;
    bool enable_defocus = true;
    double sigma_w = 25.0 / 255.0;
    double occlusion_low_weight = 0.01;
    double fb_threshold = 0.5;

    // Solver controls.
    int restore_iters = 30;
    int flow_iters = 30;
    int sigma_iters = 30;
    int cg_iters = 50;
    double cg_tol = 1e-4;
    double sigma_max = 5.0;
    double flow_step = 1.0;   ///< per-level trust region, px
    double sigma_step = 0.5;  ///< per-level trust region
    /// Per-update trust region for sigma; the blur response to sigma is far
    /// from linear below about one pixel.
    double sigma_update_step = 0.1;
    double intensity_weight = 0.0;
    double charbonnier_eps = 1e-3;
    bool post_filter = true;
    int bootstrap_warps = 5;
    /// Where the motion kernel would reach past the border, model the
    /// observation as the latent itself instead of a clipped blur.
    bool border_mask = true;
    /// nu_u and nu_sigma are stated per grey level of an image with this
    /// intensity range; images live in [0,1], so the effective weights are
    /// nu / smoothness_range. 1 applies nu literally against [0,1] data.
    double smoothness_range = 255.0;

    [[nodiscard]] EnergyParams energy() const {
        EnergyParams p;
        p.lambda = lambda;
        p.mu = mu;
        p.nu_u = nu_u / smoothness_range;
        p.nu_sigma = nu_sigma / smoothness_range;
        p.v_I = v_I;
        p.N = N;
        p.charbonnier_eps = charbonnier_eps;
        p.intensity_weight = intensity_weight;
        return p;
    }

    [[nodiscard]] double tau_for(std::size_t frame) const {
        return tau_per_frame.empty() ? tau : tau_per_frame.at(frame);
    }

    void validate() const {
        auto fail = [](const std::string& m) { throw ConfigError("config: " + m); };
        if (num_levels < 1) fail("num_levels must be >= 1");
        if (!(scale > 0 && scale < 1)) fail("scale must lie in (0,1)");
        if (N < 1) fail("N must be >= 1");
        if (!(tau > 0 && tau <= 1)) fail("tau must lie in (0,1]");
        for (double t : tau_per_frame)
            if (!(t > 0 && t <= 1)) fail("tau must lie in (0,1]");
        if (alternation_rounds < 0) fail("alternation_rounds must be >= 0");
        if (!(sigma_init >= 0) || !(sigma_max >= sigma_init)) fail("need 0 <= sigma_init <= sigma_max");
        if (!(sigma_w > 0)) fail("sigma_w must be positive");
        if (!(occlusion_low_weight >= 0 && occlusion_low_weight <= 1)) fail("occlusion_low_weight must lie in [0,1]");
        if (!(fb_threshold >= 0)) fail("fb_threshold must be >= 0");
        if (restore_iters < 0 || flow_iters < 0 || sigma_iters < 0 || cg_iters < 1 || bootstrap_warps < 0)
            fail("iteration counts must be non-negative");
        if (!(cg_tol > 0)) fail("cg_tol must be positive");
        if (!(flow_step > 0) || !(sigma_step > 0) || !(sigma_update_step > 0)) fail("trust regions must be positive");
        if (!(smoothness_range > 0) || !std::isfinite(smoothness_range)) fail("smoothness_range must be positive");
        try {
            energy().validate();
        } catch (const std::invalid_argument& e) {
            fail(e.what());
        }
    }
};

inline void to_json(nlohmann::json& j, const PipelineConfig& c) {
    j = nlohmann::json{{"num_levels", c.num_levels},
                       {"scale", c.scale},
                       {"lambda", c.lambda},
                       {"mu", c.mu},
                       {"nu_u", c.nu_u},
                       {"nu_sigma", c.nu_sigma},
                       {"v_I", c.v_I},
                       {"N", c.N},
                       {"sigma_init", c.sigma_init},
                       {"alternation_rounds", c.alternation_rounds},
                       {"enable_defocus", c.enable_defocus},
                       {"sigma_w", c.sigma_w},
                       {"occlusion_low_weight", c.occlusion_low_weight},
                       {"fb_threshold", c.fb_threshold},
                       {"restore_iters", c.restore_iters},
                       {"flow_iters", c.flow_iters},
                       {"sigma_iters", c.sigma_iters},
                       {"cg_iters", c.cg_iters},
                       {"cg_tol", c.cg_tol},
                       {"sigma_max", c.sigma_max},
                       {"flow_step", c.flow_step},
                       {"sigma_step", c.sigma_step},
                       {"sigma_update_step", c.sigma_update_step},
                       {"intensity_weight", c.intensity_weight},
                       {"charbonnier_eps", c.charbonnier_eps},
                       {"post_filter", c.post_filter},
                       {"bootstrap_warps", c.bootstrap_warps},
                       {"border_mask", c.border_mask},
                       {"smoothness_range", c.smoothness_range}};
    if (c.tau_per_frame.empty())
        j["tau"] = c.tau;
    else
        j["tau"] = c.tau_per_frame;
}

/// Flat object; absent keys keep their defaults, unknown keys are rejected.
inline void from_json(const nlohmann::json& j, PipelineConfig& c) {
    if (!j.is_object()) throw ConfigError("config: expected a JSON object");
    static const std::set<std::string> known = {
        "num_levels",   "scale",         "lambda",      "mu",         "nu_u",         "nu_sigma",
        "v_I",          "N",             "tau",         "sigma_init", "alternation_rounds",
        "enable_defocus", "sigma_w",     "occlusion_low_weight",      "fb_threshold", "restore_iters",
        "flow_iters",   "sigma_iters",   "cg_iters",    "cg_tol",     "sigma_max",    "flow_step",
        "sigma_step",   "sigma_update_step", "intensity_weight", "charbonnier_eps", "post_filter", "bootstrap_warps", "border_mask",
        "smoothness_range"};
    for (const auto& item : j.items())
        if (!known.contains(item.key())) throw ConfigError("config: unknown key '" + item.key() + "'");
    try {
        auto get = [&](const char* key, auto& field) {
            if (j.contains(key)) j.at(key).get_to(field);
        };
        get("num_levels", c.num_levels);
        get("scale", c.scale);
        get("lambda", c.lambda);
        get("mu", c.mu);
        get("nu_u", c.nu_u);
        get("nu_sigma", c.nu_sigma);
        get("v_I", c.v_I);
        get("N", c.N);
        if (j.contains("tau")) {
            if (j.at("tau").is_array()) {
                j.at("tau").get_to(c.tau_per_frame);
            } else {
                j.at("tau").get_to(c.tau);
                c.tau_per_frame.clear();
            }
        }
        get("sigma_init", c.sigma_init);
        get("alternation_rounds", c.alternation_rounds);
        get("enable_defocus", c.enable_defocus);
        get("sigma_w", c.sigma_w);
        get("occlusion_low_weight", c.occlusion_low_weight);
        get("fb_threshold", c.fb_threshold);
        get("restore_iters", c.restore_iters);
        get("flow_iters", c.flow_iters);
        get("sigma_iters", c.sigma_iters);
        get("cg_iters", c.cg_iters);
        get("cg_tol", c.cg_tol);
        get("sigma_max", c.sigma_max);
        get("flow_step", c.flow_step);
        get("sigma_step", c.sigma_step);
        get("sigma_update_step", c.sigma_update_step);
        get("intensity_weight", c.intensity_weight);
        get("charbonnier_eps", c.charbonnier_eps);
        get("post_filter", c.post_filter);
        get("bootstrap_warps", c.bootstrap_warps);
        get("border_mask", c.border_mask);
        get("smoothness_range", c.smoothness_range);
    } catch (const nlohmann::json::exception& e) {
        throw ConfigError(std::string("config: ") + e.what());
    }
    c.validate();
}

// ---------------------------------------------------------------------------
// Occlusion and post-filter

/// Forward-backward consistency: low weight where u_fwd(x) + u_bwd(x + u_fwd(x))
/// exceeds the threshold or the warp leaves the image, 1 elsewhere.
inline Image detect_occlusion(const FlowField& u_fwd, const FlowField& u_bwd, double threshold,
                              double low_weight = 0.01) {
    require_same_size(u_fwd.size(), u_bwd.size(), "detect_occlusion");
    const Size s = u_fwd.size();
    Image out(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = u_fwd.index(x, y);
            const double tx = x + u_fwd.u[i], ty = y + u_fwd.v[i];
            bool ok = inside(s, tx, ty);
            if (ok) {
                const double ex = u_fwd.u[i] + sample_bilinear(u_bwd.u, s, tx, ty);
                const double ey = u_fwd.v[i] + sample_bilinear(u_bwd.v, s, tx, ty);
                ok = std::hypot(ex, ey) <= threshold;
            }
            out.data()[i] = ok ? 1.0 : low_weight;
        }
    return out;
}

/// Occlusion weights of frame i towards frame i+n, from the chained flows in
/// both directions.
inline Image neighbor_occlusion(const SequenceState& st, int i, int n, double threshold, double low_weight) {
    const MaskedFlow there = neighbor_flow(st, i, n);
    const MaskedFlow back = neighbor_flow(st, i + n, -n);
    Image o = detect_occlusion(there.flow, back.flow, threshold, low_weight);
    for (std::size_t k = 0; k < o.plane_size(); ++k)
        if (there.valid.data()[k] == 0.0) o.data()[k] = low_weight;
    return o;
}

/// Fills each frame's occlusion_fwd / occlusion_bwd; a missing neighbour
/// gives an all-low map.
inline void update_occlusions(SequenceState& st, double threshold, double low_weight) {
    const int F = static_cast<int>(st.size());
    const Size s = st.frame_size();
    for (int i = 0; i < F; ++i) {
        Image none(s, 1);
        for (auto& v : none.data()) v = low_weight;
        st.frames[i].occlusion_fwd = i + 1 < F ? neighbor_occlusion(st, i, 1, threshold, low_weight) : none;
        st.frames[i].occlusion_bwd = i > 0 ? neighbor_occlusion(st, i, -1, threshold, low_weight) : none;
    }
}

/// Patch-weighted average over 3x3 candidates around each flow target in
/// frames i-N..i+N (including i itself with zero flow). Reads only the
/// unfiltered frames, so the result does not depend on frame order.
inline std::vector<Image> spatio_temporal_filter(const SequenceState& st, const PipelineConfig& cfg) {
    const int F = static_cast<int>(st.size());
    const Size s = st.frame_size();
    const int W = s.width, H = s.height;
    constexpr int kPatch = 2;  // 5x5
    const double inv_two_var = 1.0 / (2.0 * cfg.sigma_w * cfg.sigma_w);
    std::vector<Image> out;
    for (int i = 0; i < F; ++i) {
        const Image& li = st.frames[i].latent;
        const int C = li.channels();
        struct Source {
            const Image* frame;
            FlowField flow;
            Image valid;
            Image occlusion;
        };
        std::vector<Source> sources;
        sources.push_back({&li, FlowField(s), Image(s, 1), Image(s, 1)});
        std::fill(sources.back().valid.data().begin(), sources.back().valid.data().end(), 1.0);
        std::fill(sources.back().occlusion.data().begin(), sources.back().occlusion.data().end(), 1.0);
        for (int n = -cfg.N; n <= cfg.N; ++n) {
            if (n == 0 || i + n < 0 || i + n >= F) continue;
            MaskedFlow mf = neighbor_flow(st, i, n);
            Image occ = (n == 1 && !st.frames[i].occlusion_fwd.empty())    ? st.frames[i].occlusion_fwd
                        : (n == -1 && !st.frames[i].occlusion_bwd.empty()) ? st.frames[i].occlusion_bwd
                                                                           : neighbor_occlusion(st, i, n, cfg.fb_threshold,
                                                                                                cfg.occlusion_low_weight);
            sources.push_back({&st.frames[i + n].latent, std::move(mf.flow), std::move(mf.valid), std::move(occ)});
        }
        Image filtered(s, C);
        auto patch_distance = [&](const Image& b, int x0, int y0, int x1, int y1) {
            double d = 0.0;
            for (int dy = -kPatch; dy <= kPatch; ++dy)
                for (int dx = -kPatch; dx <= kPatch; ++dx) {
                    const int ax = std::clamp(x0 + dx, 0, W - 1), ay = std::clamp(y0 + dy, 0, H - 1);
                    const int bx = std::clamp(x1 + dx, 0, W - 1), by = std::clamp(y1 + dy, 0, H - 1);
                    for (int c = 0; c < C; ++c) {
                        const double t = li.at(ax, ay, c) - b.at(bx, by, c);
                        d += t * t;
                    }
                }
            return d;
        };
        for (int y = 0; y < H; ++y)
            for (int x = 0; x < W; ++x) {
                const std::size_t k = static_cast<std::size_t>(y) * W + x;
                std::vector<double> acc(C, 0.0);
                double z = 0.0;
                for (const auto& src : sources) {
                    if (src.valid.data()[k] == 0.0) continue;
                    const double o = src.occlusion.data()[k];
                    if (o <= 0.0) continue;
                    const int cx = static_cast<int>(std::lround(x + src.flow.u[k]));
                    const int cy = static_cast<int>(std::lround(y + src.flow.v[k]));
                    for (int yy = cy - 1; yy <= cy + 1; ++yy)
                        for (int xx = cx - 1; xx <= cx + 1; ++xx) {
                            if (xx < 0 || yy < 0 || xx >= W || yy >= H) continue;
                            const double w = o * std::exp(-patch_distance(*src.frame, x, y, xx, yy) * inv_two_var);
                            z += w;
                            for (int c = 0; c < C; ++c) acc[c] += w * src.frame->at(xx, yy, c);
                        }
                }
                for (int c = 0; c < C; ++c) filtered.at(x, y, c) = z > 0 ? acc[c] / z : li.at(x, y, c);
            }
        out.push_back(std::move(filtered));
    }
    return out;
}

// ---------------------------------------------------------------------------
// Alternation sub-steps

using EnergyLog = std::function<void(const nlohmann::json&)>;

struct FieldDuals {
    std::vector<Image> fwd, bwd, sigma;
    void reset(std::size_t frames) {
        fwd.assign(frames, Image());
        bwd.assign(frames, Image());
        sigma.assign(frames, Image());
    }
};

struct StepOutcome {
    bool accepted = false;
    int trials = 0;
    double energy = 0.0;
};

inline constexpr int kStepTrials = 6;
inline constexpr double kProxFloor = 1e-3;

namespace detail {

inline void clamp_to_ball(FlowField& f, const FlowField& center, double radius) {
    for (std::size_t i = 0; i < f.u.size(); ++i) {
        const double du = f.u[i] - center.u[i], dv = f.v[i] - center.v[i];
        const double m = std::hypot(du, dv);
        if (m > radius) {
            f.u[i] = center.u[i] + du * radius / m;
            f.v[i] = center.v[i] + dv * radius / m;
        }
    }
}

inline std::vector<double> prox_weights(const std::vector<double>& curvature, double scale) {
    std::vector<double> w(curvature.size());
    for (std::size_t i = 0; i < w.size(); ++i) w[i] = scale * (curvature[i] + kProxFloor);
    return w;
}

inline const Image& edge_or_ones(const SequenceState& st, std::size_t i, Image& ones) {
    if (!st.edge_maps.empty()) return st.edge_maps[i];
    if (!(ones.size() == st.frame_size())) {
        ones = Image(st.frame_size(), 1);
        std::fill(ones.data().begin(), ones.data().end(), 1.0);
    }
    return ones;
}

}  // namespace detail

/// One linearize-and-update pass over all estimated flows, accepted only if
/// the total smoothed energy does not increase; the proximal weight doubles
/// on each rejected trial. `anchor` (optional) bounds the flows to a ball of
/// radius `anchor_radius` around it.
inline StepOutcome flow_substep(SequenceState& st, const EnergyParams& ep, int iters, double max_step,
                                FieldDuals& duals, double& energy, const std::vector<FlowGradient>* anchor = nullptr,
                                double anchor_radius = 0.0) {
    StepOutcome out;
    out.energy = energy;
    const std::size_t F = st.size();
    if (F < 2 || iters == 0) return out;
    const auto lin = linearize_flow_terms(st, ep);
    const PDConfig pd = field_pd_config(ep.nu_u, iters);
    Image ones;
    for (int t = 0; t < kStepTrials; ++t) {
        const double scale = std::ldexp(1.0, t);
        SequenceState cand = st;
        FieldDuals cand_duals = duals;
        for (std::size_t i = 0; i < F; ++i) {
            const Image& g = detail::edge_or_ones(st, i, ones);
            for (bool forward : {true, false}) {
                if (forward ? i + 1 >= F : i == 0) continue;
                const FlowGradient& grad = lin.gradient[i];
                const FlowGradient& curv = lin.curvature[i];
                const FlowField& gf = forward ? grad.fwd : grad.bwd;
                const FlowField& cf = forward ? curv.fwd : curv.bwd;
                const auto wx = detail::prox_weights(cf.u, scale), wy = detail::prox_weights(cf.v, scale);
                FieldStepOptions opt;
                opt.max_step = max_step;
                opt.extrapolation = 1.0;
                opt.constant_start = true;
                opt.prox_x = &wx;
                opt.prox_y = &wy;
                FlowField& target = forward ? cand.frames[i].fwd : cand.frames[i].bwd;
                Image& dual = forward ? cand_duals.fwd[i] : cand_duals.bwd[i];
                target = update_flow(target, gf, g, ep.nu_u, pd, dual, opt);
                if (anchor) detail::clamp_to_ball(target, forward ? (*anchor)[i].fwd : (*anchor)[i].bwd, anchor_radius);
            }
        }
        mirror_boundary_flows(cand);
        for (const auto& f : cand.frames)
            if (!all_finite(f.fwd) || !all_finite(f.bwd)) throw NumericalError("flow update produced non-finite values");
        const double e = total_energy(cand, ep).total;
        out.trials = t + 1;
        if (e <= energy) {
            st = std::move(cand);
            duals = std::move(cand_duals);
            energy = e;
            out.accepted = true;
            out.energy = e;
            return out;
        }
    }
    return out;
}

/// Sigma counterpart of flow_substep; results stay within [0, sigma_max].
inline StepOutcome sigma_substep(SequenceState& st, const EnergyParams& ep, int iters, double max_step,
                                 double sigma_max, FieldDuals& duals, double& energy,
                                 const std::vector<SigmaMap>* anchor = nullptr, double anchor_radius = 0.0) {
    StepOutcome out;
    out.energy = energy;
    if (iters == 0) return out;
    const auto lin = linearize_sigma_terms(st, ep);
    const PDConfig pd = field_pd_config(ep.nu_sigma, iters);
    Image ones;
    for (int t = 0; t < kStepTrials; ++t) {
        const double scale = std::ldexp(1.0, t);
        SequenceState cand = st;
        FieldDuals cand_duals = duals;
        for (std::size_t i = 0; i < st.size(); ++i) {
            const auto w = detail::prox_weights(lin.curvature[i].sigma, scale);
            FieldStepOptions opt;
            opt.max_step = max_step;
            opt.extrapolation = 1.0;
            opt.constant_start = true;
            opt.prox_x = &w;
            opt.lower = 0.0;
            opt.upper = sigma_max;
            if (anchor) {
                // Fold the per-level trust region into the box.
                SigmaMap& s = cand.frames[i].sigma;
                s = update_sigma(s, lin.gradient[i], detail::edge_or_ones(st, i, ones), ep.nu_sigma, pd,
                                 cand_duals.sigma[i], opt);
                const auto& a = (*anchor)[i].sigma;
                for (std::size_t k = 0; k < s.sigma.size(); ++k)
                    s.sigma[k] = std::clamp(s.sigma[k], std::max(0.0, a[k] - anchor_radius),
                                            std::min(sigma_max, a[k] + anchor_radius));
            } else {
                cand.frames[i].sigma = update_sigma(cand.frames[i].sigma, lin.gradient[i],
                                                    detail::edge_or_ones(st, i, ones), ep.nu_sigma, pd,
                                                    cand_duals.sigma[i], opt);
            }
            for (double v : cand.frames[i].sigma.sigma)
                if (!std::isfinite(v)) throw NumericalError("sigma update produced non-finite values");
        }
        const double e = total_energy(cand, ep).total;
        out.trials = t + 1;
        if (e <= energy) {
            st = std::move(cand);
            duals = std::move(cand_duals);
            energy = e;
            out.accepted = true;
            out.energy = e;
            return out;
        }
    }
    return out;
}

// ---------------------------------------------------------------------------
// Initialization

inline std::vector<Image> compute_edge_maps(const std::vector<Image>& latents, double v_I) {
    std::vector<Image> out;
    for (const auto& l : latents) out.push_back(edge_map(l, v_I));
    return out;
}

/// Border masks frozen for a level; the slack covers the flow trust region.
inline std::vector<Image> compute_data_masks(const SequenceState& st, const PipelineConfig& cfg) {
    std::vector<Image> out;
    for (const auto& f : st.frames) out.push_back(border_data_mask(f.fwd, f.bwd, f.tau, f.tau * cfg.flow_step + 1.0));
    return out;
}

struct FlowEstimate {
    std::vector<FlowField> fwd, bwd;
};

inline constexpr double kBootstrapScale = 0.5;

/// Coarse-to-fine TV-L1 flow between the given frames alone: the temporal
/// term with N = 1 and flow smoothness, no blur model.
inline FlowEstimate bootstrap_flows(const std::vector<Image>& frames, const PipelineConfig& cfg) {
    if (frames.size() < 2) throw std::invalid_argument("bootstrap_flows: need at least 2 frames");
    EnergyParams ep = cfg.energy();
    ep.lambda = 0.0;
    ep.nu_sigma = 0.0;
    ep.N = 1;
    const Pyramid pyr = build_pyramid(frames, 64, kBootstrapScale);
    SequenceState st;
    for (std::size_t i = 0; i < pyr.levels.size(); ++i) {
        const auto& level = pyr.levels[i];
        const Size s = level.size();
        if (i == 0) {
            for (const auto& f : level.frames)
                st.frames.push_back({f, f, FlowField(s), FlowField(s), SigmaMap(s), 1.0, {}, {}});
        } else {
            for (std::size_t k = 0; k < st.size(); ++k) {
                auto& fr = st.frames[k];
                fr.blurry = fr.latent = level.frames[k];
                fr.fwd = resample_flow(fr.fwd, s.width, s.height);
                fr.bwd = resample_flow(fr.bwd, s.width, s.height);
                fr.sigma = SigmaMap(s);
            }
        }
        st.edge_maps = compute_edge_maps(st.latents(), ep.v_I);
        FieldDuals duals;
        duals.reset(st.size());
        double energy = total_energy(st, ep).total;
        for (int w = 0; w < cfg.bootstrap_warps; ++w) flow_substep(st, ep, cfg.flow_iters, 1.0, duals, energy);
    }
    FlowEstimate out;
    for (const auto& f : st.frames) {
        out.fwd.push_back(f.fwd);
        out.bwd.push_back(f.bwd);
    }
    return out;
}

/// State for the given (usually coarsest-level) frames: L = B, constant
/// sigma, bootstrap flows.
inline SequenceState initialize(const std::vector<Image>& blurry, const PipelineConfig& cfg) {
    if (blurry.size() < 2) throw std::invalid_argument("initialize: need at least 2 frames");
    if (!cfg.tau_per_frame.empty() && cfg.tau_per_frame.size() != blurry.size())
        throw ConfigError("config: tau array length must match the frame count");
    const Size s = blurry.front().size();
    const FlowEstimate flows = bootstrap_flows(blurry, cfg);
    SequenceState st;
    for (std::size_t i = 0; i < blurry.size(); ++i) {
        FrameState f;
        f.blurry = f.latent = blurry[i];
        f.fwd = flows.fwd[i];
        f.bwd = flows.bwd[i];
        f.sigma = SigmaMap(s, cfg.enable_defocus ? cfg.sigma_init : 0.0);
        f.tau = cfg.tau_for(i);
        st.frames.push_back(std::move(f));
    }
    mirror_boundary_flows(st);
    return st;
}

// ---------------------------------------------------------------------------
// Coarse-to-fine driver

struct RoundReport {
    int round = 0;
    double restore_objective_initial = 0.0;
    double restore_objective_final = 0.0;
    bool restore_accepted = false;
    StepOutcome flow;
    StepOutcome sigma;
    EnergyBreakdown energy;
};

struct LevelReport {
    int level = 0;
    Size size;
    EnergyBreakdown start;
    EnergyBreakdown end;  ///< after the alternation, before the post-filter
    std::vector<RoundReport> rounds;
    double seconds = 0.0;
};

struct DeblurReport {
    std::vector<LevelReport> levels;
    double bootstrap_seconds = 0.0;
    double total_seconds = 0.0;
};

inline void to_json(nlohmann::json& j, const DeblurReport& r) {
    j = nlohmann::json::object();
    j["bootstrap_seconds"] = r.bootstrap_seconds;
    j["total_seconds"] = r.total_seconds;
    auto& levels = j["levels"] = nlohmann::json::array();
    for (const auto& l : r.levels) {
        nlohmann::json lj{{"level", l.level},
                          {"width", l.size.width},
                          {"height", l.size.height},
                          {"energy_start", l.start},
                          {"energy_end", l.end},
                          {"seconds", l.seconds}};
        auto& rounds = lj["rounds"] = nlohmann::json::array();
        for (const auto& rd : l.rounds)
            rounds.push_back({{"round", rd.round},
                              {"restore_objective_initial", rd.restore_objective_initial},
                              {"restore_objective_final", rd.restore_objective_final},
                              {"restore_accepted", rd.restore_accepted},
                              {"flow_accepted", rd.flow.accepted},
                              {"flow_trials", rd.flow.trials},
                              {"sigma_accepted", rd.sigma.accepted},
                              {"sigma_trials", rd.sigma.trials},
                              {"energy", rd.energy}});
        levels.push_back(std::move(lj));
    }
}

struct DeblurResult {
    std::vector<Image> latents;
    std::vector<FlowField> fwd, bwd;
    std::vector<SigmaMap> sigma;
    std::vector<Image> occlusion_fwd, occlusion_bwd;
    DeblurReport report;
};

namespace detail {

inline void check_finite(const SequenceState& st, int level, int round, const char* stage) {
    for (const auto& f : st.frames) {
        bool ok = all_finite(f.latent) && all_finite(f.fwd) && all_finite(f.bwd);
        for (double v : f.sigma.sigma) ok = ok && std::isfinite(v);
        if (!ok) throw NumericalAbort(level, round, std::string("non-finite state after ") + stage);
    }
}

inline void upsample_state(SequenceState& st, const std::vector<Image>& blurry) {
    const Size s = blurry.front().size();
    for (std::size_t i = 0; i < st.size(); ++i) {
        auto& f = st.frames[i];
        f.blurry = blurry[i];
        f.latent = resample_bilinear(f.latent, s);
        f.fwd = resample_flow(f.fwd, s.width, s.height);
        f.bwd = resample_flow(f.bwd, s.width, s.height);
        f.sigma = resample_sigma(f.sigma, s);
        f.occlusion_fwd = f.occlusion_bwd = Image();
    }
}

}  // namespace detail

inline DeblurResult deblur_sequence(const std::vector<Image>& blurry, const PipelineConfig& cfg,
                                    const EnergyLog& log = {}) {
    cfg.validate();
    if (blurry.size() < 2) throw std::invalid_argument("deblur_sequence: need at least 2 frames");
    using clock = std::chrono::steady_clock;
    const auto t_start = clock::now();
    auto seconds_since = [](clock::time_point t) { return std::chrono::duration<double>(clock::now() - t).count(); };

    const Pyramid pyr = build_pyramid(blurry, cfg.num_levels, cfg.scale);
    const EnergyParams ep = cfg.energy();
    DeblurResult res;

    auto t0 = clock::now();
    SequenceState st = initialize(pyr.coarsest().frames, cfg);
    res.report.bootstrap_seconds = seconds_since(t0);

    for (std::size_t li = 0; li < pyr.levels.size(); ++li) {
        const int level = static_cast<int>(li);
        t0 = clock::now();
        if (li > 0) detail::upsample_state(st, pyr.levels[li].frames);
        st.edge_maps = compute_edge_maps(st.latents(), ep.v_I);
        if (cfg.border_mask) st.data_masks = compute_data_masks(st, cfg);

        LevelReport lr;
        lr.level = level;
        lr.size = st.frame_size();
        lr.start = total_energy(st, ep);
        double energy = lr.start.total;

        // Duals restart at every level; the trust regions are measured from
        // the fields the level started with.
        LatentDuals latent_duals;
        FieldDuals field_duals;
        field_duals.reset(st.size());
        std::vector<FlowGradient> flow_anchor;
        std::vector<SigmaMap> sigma_anchor;
        for (const auto& f : st.frames) {
            flow_anchor.push_back({f.fwd, f.bwd});
            sigma_anchor.push_back(f.sigma);
        }
        const PDConfig restore_pd = [&] {
            PDConfig pd = restore_pd_config(ep.mu, ep.N, cfg.restore_iters);
            pd.cg_iters = cfg.cg_iters;
            pd.cg_tol = cfg.cg_tol;
            return pd;
        }();

        auto emit = [&](int round, const char* step, bool accepted) {
            if (!log) return;
            log(nlohmann::json{{"level", level},
                               {"round", round},
                               {"step", step},
                               {"accepted", accepted},
                               {"energy", total_energy(st, ep)}});
        };

        for (int r = 0; r < cfg.alternation_rounds; ++r) {
            RoundReport rr;
            rr.round = r;
            try {
                const auto restored = restore_latent(st, ep, restore_pd, latent_duals);
                rr.restore_objective_initial = restored.objective_initial;
                rr.restore_objective_final = restored.objective_final;
                SequenceState cand = st;
                cand.set_latents(restored.latents);
                detail::check_finite(cand, level, r, "restore");
                const double e = total_energy(cand, ep).total;
                if (e <= energy) {
                    st = std::move(cand);
                    energy = e;
                    rr.restore_accepted = true;
                }
                emit(r, "restore", rr.restore_accepted);

                rr.flow = flow_substep(st, ep, cfg.flow_iters, cfg.flow_step, field_duals, energy, &flow_anchor,
                                       cfg.flow_step);
                detail::check_finite(st, level, r, "flow update");
                emit(r, "flow", rr.flow.accepted);

                if (cfg.enable_defocus) {
                    rr.sigma = sigma_substep(st, ep, cfg.sigma_iters, cfg.sigma_update_step, cfg.sigma_max, field_duals,
                                             energy, &sigma_anchor, cfg.sigma_step);
                    detail::check_finite(st, level, r, "sigma update");
                    emit(r, "sigma", rr.sigma.accepted);
                }
            } catch (const NumericalAbort&) {
                throw;
            } catch (const NumericalError& e) {
                throw NumericalAbort(level, r, e.what());
            }
            rr.energy = total_energy(st, ep);
            lr.rounds.push_back(rr);
        }
        lr.end = total_energy(st, ep);

        update_occlusions(st, cfg.fb_threshold, cfg.occlusion_low_weight);
        if (cfg.post_filter) {
            st.set_latents(spatio_temporal_filter(st, cfg));
            detail::check_finite(st, level, cfg.alternation_rounds, "post-filter");
        }
        lr.seconds = seconds_since(t0);
        res.report.levels.push_back(std::move(lr));
    }

    for (const auto& f : st.frames) {
        res.latents.push_back(f.latent);
        res.fwd.push_back(f.fwd);
        res.bwd.push_back(f.bwd);
        res.sigma.push_back(f.sigma);
        res.occlusion_fwd.push_back(f.occlusion_fwd);
        res.occlusion_bwd.push_back(f.occlusion_bwd);
    }
    res.report.total_seconds = seconds_since(t_start);
    return res;
}

}  // namespace vardeblur
