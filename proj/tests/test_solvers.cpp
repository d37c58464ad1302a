#include <gtest/gtest.h>

#include <array>
#include <random>

#include "test_util.hpp"

using namespace vardeblur;

namespace {

FrameState frame(const Image& latent, const Image& blurry) {
    FrameState f;
    f.latent = latent;
    f.blurry = blurry;
    f.fwd = FlowField(latent.size());
    f.bwd = FlowField(latent.size());
    f.sigma = SigmaMap(latent.size());
    return f;
}

/// Independent weighted ROF solver: projected gradient ascent on the dual of
/// min 1/2 |u - f|^2 + w sum g |grad u|.
std::vector<double> rof_oracle(const std::vector<double>& f, Size s, const Image& g, double w, int iters) {
    const std::size_t n = s.area();
    std::vector<double> px(n, 0.0), py(n, 0.0), u = f;
    const double step = 1.0 / (8.0 * w);
    for (int it = 0; it < iters; ++it) {
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
                const double dx = x + 1 < s.width ? u[i + 1] - u[i] : 0.0;
                const double dy = y + 1 < s.height ? u[i + s.width] - u[i] : 0.0;
                double ax = px[i] + step * g.data()[i] * dx, ay = py[i] + step * g.data()[i] * dy;
                const double m = std::max(1.0, std::hypot(ax, ay));
                px[i] = ax / m;
                py[i] = ay / m;
            }
        for (int y = 0; y < s.height; ++y)
            for (int x = 0; x < s.width; ++x) {
                const std::size_t i = static_cast<std::size_t>(y) * s.width + x;
                auto gx = [&](std::size_t k) { return g.data()[k] * px[k]; };
                auto gy = [&](std::size_t k) { return g.data()[k] * py[k]; };
                double div = 0.0;
                if (x + 1 < s.width) div += gx(i);
                if (x > 0) div -= gx(i - 1);
                if (y + 1 < s.height) div += gy(i);
                if (y > 0) div -= gy(i - s.width);
                u[i] = f[i] + w * div;
            }
    }
    return u;
}

Image edge_ramp(Size s) {
    Image g(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) g.at(x, y) = 0.4 + 0.6 * x / (s.width - 1.0);
    return g;
}

double max_diff(const std::vector<double>& a, const std::vector<double>& b) {
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

double relative_error(const std::vector<double>& got, const std::vector<double>& want) {
    double num = 0.0, den = 0.0;
    for (std::size_t i = 0; i < got.size(); ++i) {
        num += (got[i] - want[i]) * (got[i] - want[i]);
        den += want[i] * want[i];
    }
    return std::sqrt(num / den);
}

}  // namespace

TEST(ConjugateGradient, SolvesSpdSystemWithMonotoneQuadratic) {
    std::mt19937 rng(1);
    const Size s{12, 10};
    const Image b = vtest::random_image(s, 1, rng, -1, 1);
    auto apply_h = [](const Image& x) {
        Image h = detail::residual_normal(x, 0.0);
        axpy(0.3, x, h);
        return h;
    };
    Image x(s, 1);
    const auto res = conjugate_gradient(apply_h, b, x, 200, 1e-10, true);
    EXPECT_LE(res.relative_residual, 1e-10);
    EXPECT_LT(vtest::max_abs_diff(apply_h(x), b), 1e-8);
    for (std::size_t k = 1; k < res.quadratic_trace.size(); ++k)
        EXPECT_LE(res.quadratic_trace[k], res.quadratic_trace[k - 1] + 1e-12);
}

TEST(ConjugateGradient, RejectsIndefiniteOperator) {
    const Image b(4, 4, 1, 1.0);
    Image x(4, 4);
    EXPECT_THROW(conjugate_gradient([](const Image& v) { return scaled(v, -1.0); }, b, x, 10, 1e-8), NumericalError);
}

TEST(TemporalDifference, StaticFramesGiveZero) {
    const Image l = vtest::smooth_texture({10, 8});
    SequenceState st;
    for (int i = 0; i < 3; ++i) st.frames.push_back(frame(l, l));
    for (const auto& d : temporal_difference_op(st, 2).apply(st.latents()))
        for (double v : d.data()) EXPECT_EQ(v, 0.0);
}

TEST(TemporalDifference, IntegerShiftVanishesInInterior) {
    const Size s{12, 6};
    const Image a = vtest::smooth_texture(s);
    Image b(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) b.at(x, y) = a.at(std::max(x - 2, 0), y);
    SequenceState st;
    st.frames.push_back(frame(a, a));
    st.frames.push_back(frame(b, b));
    st.frames[0].fwd = FlowField(s, 2.0, 0.0);
    st.frames[1].bwd = FlowField(s, -2.0, 0.0);
    const auto op = temporal_difference_op(st, 1);
    const auto d = op.apply(st.latents());
    for (std::size_t k = 0; k < d.size(); ++k)
        for (int y = 0; y < s.height; ++y)
            for (int x = 2; x + 2 < s.width; ++x) EXPECT_NEAR(d[k].at(x, y), 0.0, 1e-15);
}

TEST(TemporalDifference, AdjointIdentity) {
    std::mt19937 rng(2);
    const Size s{15, 11};
    for (int trial = 0; trial < 10; ++trial) {
        SequenceState st;
        for (int i = 0; i < 4; ++i) {
            st.frames.push_back(frame(Image(s, 2), Image(s, 2)));
            st.frames.back().fwd = vtest::random_flow(s, rng, 3.0);
            st.frames.back().bwd = vtest::random_flow(s, rng, 3.0);
        }
        const auto op = temporal_difference_op(st, 2);
        std::vector<Image> x, y;
        for (int i = 0; i < 4; ++i) x.push_back(vtest::random_image(s, 2, rng, -1, 1));
        for (std::size_t k = 0; k < op.entries().size(); ++k) y.push_back(vtest::random_image(s, 2, rng, -1, 1));
        const double lhs = dot(op.apply(x), y), rhs = dot(x, op.adjoint(y));
        EXPECT_LE(std::abs(lhs - rhs), 1e-6 * (std::sqrt(squared_norm(x) * squared_norm(y)) + 1.0));
    }
}

TEST(DualProjection, KeepsPairsInUnitDisc) {
    std::mt19937 rng(3);
    Image dual = vtest::random_image({9, 9}, 6, rng, -3, 3);
    detail::project_pairs(dual);
    for (int c = 0; c < 3; ++c)
        for (std::size_t i = 0; i < dual.plane_size(); ++i)
            EXPECT_LE(std::hypot(dual.plane(c)[i], dual.plane(c + 3)[i]), 1.0 + 1e-15);
}

TEST(BlurredDifferenceDiagonal, MatchesExplicitColumns) {
    std::mt19937 rng(4);
    const Size s{13, 11};
    const MotionBlurOp K(vtest::random_flow(s, rng, 3.0), vtest::random_flow(s, rng, 3.0), 0.6);
    Image mask(s, 1, 1.0);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < 3; ++x) mask.at(x, y) = 0.0;
    for (const Image* m : std::array<const Image*, 2>{nullptr, &mask}) {
        const auto got = detail::blurred_difference_diagonal(K, 0.25, m);
        for (std::size_t p = 0; p < s.area(); ++p) {
            Image e(s, 1);
            e.data()[p] = 1.0;
            Image col = K.apply(e);
            if (m)
                for (std::size_t i = 0; i < col.data().size(); ++i) col.data()[i] *= m->data()[i];
            const auto g = spatial_gradient(col);
            const double want = squared_norm(g.dx) + squared_norm(g.dy) + 0.25 * squared_norm(col);
            EXPECT_NEAR(got[p], want, 1e-12);
        }
    }
}

TEST(RestoreLatent, ZeroIterationsLeaveLatentUnchanged) {
    std::mt19937 rng(5);
    const Image b = vtest::random_image({16, 16}, 1, rng);
    SequenceState st;
    st.frames.push_back(frame(scaled(b, 0.9), b));
    PDConfig pd = restore_pd_config(0.0, 1, 0);
    LatentDuals duals;
    const auto res = restore_latent(st, EnergyParams{}, pd, duals);
    EXPECT_EQ(res.latents[0], st.frames[0].latent);
    EXPECT_EQ(res.objective_final, res.objective_initial);
}

TEST(RestoreLatent, LargeLambdaReproducesSharpInput) {
    const Image b = vtest::smooth_texture({24, 20});
    SequenceState st;
    st.frames.push_back(frame(b, b));
    EnergyParams p;
    p.lambda = 1e6;
    p.mu = 0.0;
    PDConfig pd = restore_pd_config(0.0, 1, 30);
    LatentDuals duals;
    const auto res = restore_latent(st, p, pd, duals);
    EXPECT_LT(vtest::max_abs_diff(res.latents[0], b), 1e-3);
}

TEST(RestoreLatent, DeblursUniformStreakAndNeverIncreasesObjective) {
    const Size s{64, 64};
    const Image gt = vtest::smooth_texture(s);
    FrameState f = frame(gt, Image());
    f.fwd = FlowField(s, 6.0, 0.0);
    f.bwd = FlowField(s, -6.0, 0.0);
    f.blurry = blurred_model(f);
    f.latent = f.blurry;
    SequenceState st;
    st.frames.push_back(f);
    EnergyParams p;
    p.mu = 0.0;
    LatentDuals duals;
    const auto res = restore_latent(st, p, restore_pd_config(0.0, 1, 30), duals);
    EXPECT_LE(res.objective_final, res.objective_initial * (1 + 1e-6));
    EXPECT_GE(psnr(res.latents[0], gt) - psnr(f.blurry, gt), 3.0);
}

TEST(RestoreLatent, MultiFrameObjectiveDoesNotIncrease) {
    std::mt19937 rng(6);
    const Size s{32, 28};
    SequenceState st;
    for (int i = 0; i < 3; ++i) {
        FrameState f = frame(vtest::smooth_texture(s, 0.3 * i), Image());
        f.fwd = FlowField(s, 1.5, 0.5);
        f.bwd = FlowField(s, -1.5, -0.5);
        f.sigma = vtest::random_sigma(s, rng, 0.0, 1.0);
        f.blurry = blurred_model(f);
        f.latent = f.blurry;
        st.frames.push_back(f);
    }
    EnergyParams p;
    LatentDuals duals;
    for (int call = 0; call < 3; ++call) {
        const auto res = restore_latent(st, p, restore_pd_config(p.mu, p.N, 10), duals);
        EXPECT_LE(res.objective_final, res.objective_initial * (1 + 1e-6));
        st.set_latents(res.latents);
    }
}

TEST(LinearizeFlow, TemporalGradientMatchesFiniteDifferences) {
    std::mt19937 rng(7);
    const Size s{16, 16};
    SequenceState st;
    for (int i = 0; i < 3; ++i) {
        st.frames.push_back(frame(vtest::random_image(s, 1, rng), Image(s, 1)));
        st.frames.back().fwd = vtest::random_flow(s, rng, 1.5);
        st.frames.back().bwd = vtest::random_flow(s, rng, 1.5);
    }
    EnergyParams p;
    p.lambda = 0.0;
    p.N = 1;
    const auto grad = linearize_rho_u(st, p);
    const double h = 1e-6;
    std::vector<double> got, want;
    for (std::size_t i = 0; i < st.size(); ++i)
        for (bool fwd : {true, false})
            for (std::vector<double> FlowField::*comp : {&FlowField::u, &FlowField::v}) {
                const FlowField& g = fwd ? grad[i].fwd : grad[i].bwd;
                for (std::size_t k = 0; k < s.area(); ++k) {
                    SequenceState probe = st;
                    FlowField& f = fwd ? probe.frames[i].fwd : probe.frames[i].bwd;
                    (f.*comp)[k] += h;
                    const double ep = temporal_energy(probe, p);
                    (f.*comp)[k] -= 2 * h;
                    const double em = temporal_energy(probe, p);
                    want.push_back((ep - em) / (2 * h));
                    got.push_back((g.*comp)[k]);
                }
            }
    EXPECT_LT(relative_error(got, want), 1e-3);
}

TEST(LinearizeFlow, GroundTruthStateIsStationary) {
    const Size s{24, 20};
    SequenceState st;
    for (int i = 0; i < 3; ++i) {
        FrameState f = frame(vtest::smooth_texture(s), Image());
        f.fwd = FlowField(s, 1.0, 0.0);
        f.bwd = FlowField(s, -1.0, 0.0);
        f.blurry = blurred_model(f);
        st.frames.push_back(f);
    }
    EnergyParams p;
    p.mu = 0.0;
    for (const auto& g : linearize_rho_u(st, p))
        for (const FlowField* f : {&g.fwd, &g.bwd}) {
            for (double v : f->u) EXPECT_LE(std::abs(v), 1e-3);
            for (double v : f->v) EXPECT_LE(std::abs(v), 1e-3);
        }
}

TEST(LinearizeFlow, ConstantFramesGiveZeroGradient) {
    std::mt19937 rng(8);
    const Size s{12, 12};
    SequenceState st;
    for (int i = 0; i < 3; ++i) {
        st.frames.push_back(frame(Image(s, 1, 0.4), Image(s, 1, 0.4)));
        st.frames.back().fwd = vtest::random_flow(s, rng, 1.0);
        st.frames.back().bwd = vtest::random_flow(s, rng, 1.0);
    }
    for (const auto& g : linearize_rho_u(st, EnergyParams{})) {
        for (double v : g.fwd.u) EXPECT_NEAR(v, 0.0, 1e-12);
        for (double v : g.bwd.v) EXPECT_NEAR(v, 0.0, 1e-12);
    }
}

TEST(LinearizeSigma, DataGradientMatchesFiniteDifferences) {
    std::mt19937 rng(9);
    const Size s{16, 16};
    for (bool masked : {false, true}) {
        SequenceState st;
        for (int i = 0; i < 2; ++i) {
            st.frames.push_back(frame(vtest::random_image(s, 1, rng), vtest::random_image(s, 1, rng)));
            st.frames.back().fwd = vtest::random_flow(s, rng, 1.5);
            st.frames.back().bwd = vtest::random_flow(s, rng, 1.5);
            // Away from radius changes of the 3-sigma truncation, even under the probes.
            st.frames.back().sigma = vtest::random_sigma(s, rng, 0.75, 0.9);
        }
        if (masked)
            for (const auto& f : st.frames) st.data_masks.push_back(border_data_mask(f.fwd, f.bwd, f.tau, 1.0));
        EnergyParams p;
        p.nu_sigma = 0.0;
        const auto grad = linearize_rho_sigma(st, p);
        const double h = 1e-6;
        std::vector<double> got, want;
        for (std::size_t i = 0; i < st.size(); ++i)
            for (std::size_t k = 0; k < s.area(); ++k) {
                SequenceState probe = st;
                probe.frames[i].sigma.sigma[k] += h;
                const double ep = total_energy(probe, p).total;
                probe.frames[i].sigma.sigma[k] -= 2 * h;
                const double em = total_energy(probe, p).total;
                want.push_back((ep - em) / (2 * h));
                got.push_back(grad[i].sigma[k]);
            }
        EXPECT_LT(relative_error(got, want), 1e-3) << "masked=" << masked;
    }
}

TEST(LinearizeSigma, StationaryAtTruthAndPointsTowardIt) {
    const Size s{32, 32};
    std::mt19937 rng(10);
    const Image gt = vtest::random_image(s, 1, rng);
    FrameState f = frame(gt, Image());
    f.sigma = SigmaMap(s, 2.0);
    f.blurry = blurred_model(f);
    SequenceState st;
    st.frames.push_back(f);
    const auto at_truth = linearize_rho_sigma(st, EnergyParams{});
    for (double v : at_truth[0].sigma) EXPECT_LE(std::abs(v), 1e-3);

    st.frames[0].sigma = SigmaMap(s, 1.0);
    const auto g = linearize_rho_sigma(st, EnergyParams{})[0];
    double total = 0.0;
    for (double v : g.sigma) total += v;
    EXPECT_LT(total, 0.0);
}

TEST(LinearizeSigma, ConstantImagesGiveZero) {
    SequenceState st;
    st.frames.push_back(frame(Image(12, 12, 1, 0.6), Image(12, 12, 1, 0.6)));
    st.frames[0].sigma = SigmaMap(12, 12, 1.3);
    const auto g = linearize_rho_sigma(st, EnergyParams{});
    for (double v : g[0].sigma) EXPECT_NEAR(v, 0.0, 1e-12);
}

TEST(UpdateFlow, ZeroGradientKeepsConstantField) {
    const Size s{10, 10};
    const FlowField u0(s, 0.7, -0.2);
    Image dual;
    const FlowField u = update_flow(u0, FlowField(s), Image(s, 1, 1.0), 0.5, field_pd_config(0.5, 50), dual);
    EXPECT_EQ(u, u0);
}

TEST(UpdateFlow, ZeroGradientMatchesWeightedRofOracle) {
    std::mt19937 rng(11);
    const Size s{16, 16};
    const FlowField u0 = vtest::random_flow(s, rng, 1.0);
    const Image g = edge_ramp(s);
    const double nu = 0.2, prox = 1.0;
    FieldStepOptions opt;
    opt.prox = prox;
    opt.max_step = 10.0;
    opt.extrapolation = 1.0;
    PDConfig pd;
    pd.eta = pd.epsilon = 1.0 / (std::sqrt(8.0) * nu);
    pd.iters = 3000;
    Image dual;
    const FlowField u = update_flow(u0, FlowField(s), g, nu, pd, dual, opt);
    EXPECT_LT(max_diff(u.u, rof_oracle(u0.u, s, g, nu / prox, 20000)), 1e-2);
    EXPECT_LT(max_diff(u.v, rof_oracle(u0.v, s, g, nu / prox, 20000)), 1e-2);
    EXPECT_LE(flow_tv(u, &g, 0.0), flow_tv(u0, &g, 0.0) + 1e-9);
}

TEST(UpdateFlow, UniformGradientShiftsUntilTrustRegion) {
    const Size s{8, 8};
    const FlowField u0(s, 0.5, 0.0);
    const PDConfig pd = field_pd_config(0.0, 30);
    for (double gx : {0.01, 5.0}) {
        Image dual;
        const FlowField u = update_flow(u0, FlowField(s, -gx, 0.0), Image(s, 1, 1.0), 0.1, pd, dual);
        const double expected = std::min(pd.epsilon * gx * pd.iters, 1.0);
        for (std::size_t i = 0; i < u.u.size(); ++i) {
            EXPECT_NEAR(u.u[i] - 0.5, expected, 1e-12);
            EXPECT_EQ(u.v[i], 0.0);
        }
    }
}

TEST(UpdateSigma, ZeroGradientBehaviour) {
    std::mt19937 rng(12);
    const Size s{16, 16};
    const Image g = edge_ramp(s);
    Image dual;
    const SigmaMap flat(s, 1.2);
    EXPECT_EQ(update_sigma(flat, SigmaMap(s), g, 0.3, field_pd_config(0.3, 40), dual), flat);

    const SigmaMap noisy = vtest::random_sigma(s, rng, 1.0, 2.0);
    FieldStepOptions opt;
    opt.prox = 1.0;
    opt.max_step = 10.0;
    opt.extrapolation = 1.0;
    PDConfig pd = field_pd_config(0.15, 3000);
    dual = Image();
    const SigmaMap out = update_sigma(noisy, SigmaMap(s), g, 0.15, pd, dual, opt);
    EXPECT_LT(max_diff(out.sigma, rof_oracle(noisy.sigma, s, g, 0.15, 20000)), 1e-2);
    EXPECT_LE(weighted_tv(out.sigma, s, &g, 0.0), weighted_tv(noisy.sigma, s, &g, 0.0) + 1e-9);
}

TEST(UpdateSigma, ClampsAtZeroAndAtTrustRegion) {
    const Size s{8, 8};
    Image dual;
    FieldStepOptions opt;
    opt.max_step = 0.5;
    const SigmaMap out = update_sigma(SigmaMap(s, 0.2), SigmaMap(s, 50.0), Image(s, 1, 1.0), 0.1,
                                      field_pd_config(0.1, 30), dual, opt);
    for (double v : out.sigma) EXPECT_EQ(v, 0.0);
    dual = Image();
    SigmaMap pull(s);
    for (auto& v : pull.sigma) v = -50.0;  // gradients may be negative
    const SigmaMap up = update_sigma(SigmaMap(s, 0.2), pull, Image(s, 1, 1.0), 0.1,
                                     field_pd_config(0.1, 30), dual, opt);
    for (double v : up.sigma) EXPECT_NEAR(v, 0.7, 1e-12);
}
