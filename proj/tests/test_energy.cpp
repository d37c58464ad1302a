#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace vardeblur;

namespace {

FrameState frame(const Image& latent, const Image& blurry, double sigma = 0.0) {
    FrameState f;
    f.latent = latent;
    f.blurry = blurry;
    f.fwd = FlowField(latent.size());
    f.bwd = FlowField(latent.size());
    f.sigma = SigmaMap(latent.size(), sigma);
    return f;
}

EnergyParams params() {
    EnergyParams p;
    p.nu_u = 0.3;
    p.nu_sigma = 0.2;
    return p;
}

/// Sequence whose blurry frames are generated from the latents by the model.
SequenceState consistent_sequence(std::mt19937& rng, Size s, int frames) {
    SequenceState st;
    for (int i = 0; i < frames; ++i) {
        FrameState f = frame(vtest::smooth_texture(s, 0.4 * i), Image());
        f.fwd = FlowField(s, 0.7, -0.3);
        f.bwd = FlowField(s, -0.6, 0.2);
        f.sigma = vtest::random_sigma(s, rng, 0.3, 1.2);
        f.blurry = blurred_model(f);
        st.frames.push_back(f);
    }
    return st;
}

}  // namespace

TEST(EdgeMap, ConstantImageGivesOnes) {
    const Image g = edge_map(Image(9, 7, 3, 0.4), 0.01);
    for (double v : g.data()) EXPECT_EQ(v, 1.0);
}

TEST(EdgeMap, GradientEqualToBandwidthGivesInverseE) {
    const double v_I = (25.0 / 255.0) * (25.0 / 255.0);
    Image img(6, 6);
    img.at(3, 2) = std::sqrt(v_I);  // |grad|^2 = v_I at (2,2): dx = sqrt(v_I), dy = 0
    const Image g = edge_map(img, v_I);
    EXPECT_NEAR(g.at(2, 2), std::exp(-1.0), 1e-15);
    for (double v : g.data()) {
        EXPECT_GT(v, 0.0);
        EXPECT_LE(v, 1.0);
    }
    EXPECT_THROW(edge_map(img, 0.0), std::invalid_argument);
}

TEST(EdgeMap, DefaultBandwidth) {
    EXPECT_DOUBLE_EQ(EnergyParams{}.v_I, (25.0 / 255.0) * (25.0 / 255.0));
}

TEST(DataEnergy, IdentityKernelsOnEqualImagesIsZero) {
    std::mt19937 rng(1);
    const Image b = vtest::random_image({10, 8}, 3, rng);
    SequenceState st;
    st.frames.push_back(frame(b, b));
    EXPECT_EQ(data_energy(st, params()), 0.0);
}

TEST(DataEnergy, BlurConsistentObservationIsZero) {
    std::mt19937 rng(2);
    const SequenceState st = consistent_sequence(rng, {20, 16}, 2);
    EXPECT_LT(data_energy(st, params()), 1e-10);
}

TEST(DataEnergy, InteriorImpulseCountsFourDerivativeTaps) {
    std::mt19937 rng(3);
    const Image b = vtest::random_image({9, 9}, 1, rng);
    Image l = b;
    const double eps = 0.01;
    l.at(4, 4) += eps;
    SequenceState st;
    st.frames.push_back(frame(l, b));
    const EnergyParams p = params();
    EXPECT_NEAR(data_energy(st, p), 4 * p.lambda * eps * eps, 1e-12);
}

TEST(DataEnergy, QuadraticHomogeneity) {
    std::mt19937 rng(4);
    SequenceState st = consistent_sequence(rng, {16, 12}, 2);
    for (auto& f : st.frames) f.blurry = vtest::random_image(f.blurry.size(), 1, rng);
    const double e = data_energy(st, params());
    for (auto& f : st.frames) {
        f.blurry = scaled(f.blurry, 3.0);
        f.latent = scaled(f.latent, 3.0);
    }
    EXPECT_NEAR(data_energy(st, params()), 9.0 * e, 1e-9 * e);
}

TEST(DataEnergy, RejectsSizeMismatch) {
    SequenceState st;
    st.frames.push_back(frame(Image(5, 5), Image(6, 5)));
    EXPECT_THROW(data_energy(st, params()), std::invalid_argument);
}

TEST(TemporalEnergy, StaticSequenceIsZero) {
    const Image l = vtest::smooth_texture({12, 10});
    SequenceState st;
    for (int i = 0; i < 3; ++i) st.frames.push_back(frame(l, l));
    EXPECT_EQ(temporal_energy(st, params()), 0.0);
}

TEST(TemporalEnergy, IntegerShiftWithMatchingFlowIsZero) {
    const Size s{14, 8};
    const Image a = vtest::smooth_texture(s);
    Image b(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) b.at(x, y) = a.at(std::max(x - 1, 0), y);
    SequenceState st;
    st.frames.push_back(frame(a, a));
    st.frames.push_back(frame(b, b));
    st.frames[0].fwd = FlowField(s, 1.0, 0.0);
    st.frames[1].bwd = FlowField(s, -1.0, 0.0);
    EXPECT_NEAR(temporal_energy(st, params()), 0.0, 1e-12);
}

TEST(TemporalEnergy, ZeroFlowMatchesDirectCharbonnierSum) {
    const Size s{10, 6};
    const Image a = vtest::smooth_texture(s);
    Image b(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) b.at(x, y) = a.at(std::min(x + 1, s.width - 1), y);
    SequenceState st;
    st.frames.push_back(frame(a, a));
    st.frames.push_back(frame(b, b));
    const EnergyParams p = params();
    double expected = 0.0;
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            expected += 2.0 * charbonnier(a.at(x, y) - b.at(x, y), p.charbonnier_eps);  // both directions
    EXPECT_NEAR(temporal_energy(st, p), p.mu * expected, 1e-12);
}

TEST(TemporalEnergy, SingleFrameIsZero) {
    const Image l = vtest::smooth_texture({8, 8});
    SequenceState st;
    st.frames.push_back(frame(l, l));
    EXPECT_EQ(temporal_energy(st, params()), 0.0);
}

TEST(SpatialEnergy, ConstantFieldsAreZero) {
    SequenceState st;
    for (int i = 0; i < 2; ++i) {
        st.frames.push_back(frame(Image(8, 8, 1, 0.3), Image(8, 8, 1, 0.3), 0.8));
        st.frames.back().fwd = FlowField(8, 8, 1.0, 2.0);
    }
    EXPECT_EQ(spatial_energy(st, params()), 0.0);
}

TEST(SpatialEnergy, RampTotalVariation) {
    const Size s{12, 7};
    const double slope = 0.05;
    Image l(s, 1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) l.at(x, y) = slope * x;
    EXPECT_NEAR(image_tv(l, 0.0), (s.width - 1) * s.height * slope, 1e-12);
    const double eps = 1e-3;
    EXPECT_NEAR(image_tv(l, eps), (s.width - 1) * s.height * charbonnier(slope, eps), 1e-12);
}

TEST(SpatialEnergy, UnitEdgeMapReducesToPlainWeightedTv) {
    std::mt19937 rng(5);
    const Size s{10, 9};
    SequenceState st;
    st.frames.push_back(frame(Image(s, 1, 0.5), Image(s, 1, 0.5)));
    st.frames.push_back(frame(Image(s, 1, 0.5), Image(s, 1, 0.5)));
    st.frames[0].fwd = vtest::random_flow(s, rng, 1.0);
    st.frames[1].sigma = vtest::random_sigma(s, rng, 0.0, 2.0);
    const EnergyParams p = params();
    const double without = spatial_energy(st, p);
    st.edge_maps = {edge_map(st.frames[0].latent, p.v_I), edge_map(st.frames[1].latent, p.v_I)};
    EXPECT_DOUBLE_EQ(spatial_energy(st, p), without);
    const double expected = p.nu_u * flow_tv(st.frames[0].fwd, nullptr, p.charbonnier_eps) +
                            p.nu_sigma * weighted_tv(st.frames[1].sigma.sigma, s, nullptr, p.charbonnier_eps);
    EXPECT_NEAR(without, expected, 1e-12);
}

TEST(TotalEnergy, PartsSumToTotalAndAreNonNegative) {
    std::mt19937 rng(6);
    SequenceState st = consistent_sequence(rng, {18, 14}, 3);
    for (auto& f : st.frames) f.latent = vtest::random_image(f.latent.size(), 1, rng);
    st.edge_maps = compute_edge_maps(st.latents(), params().v_I);
    const auto e = total_energy(st, params());
    for (double part : {e.data, e.temporal, e.spatial_L, e.spatial_u, e.spatial_sigma}) EXPECT_GE(part, 0.0);
    EXPECT_NEAR(e.total, e.data + e.temporal + e.spatial_L + e.spatial_u + e.spatial_sigma, 1e-9 * e.total);
    EXPECT_EQ(total_energy(st, params()).total, e.total);
}

TEST(TotalEnergy, GroundTruthStateLeavesOnlyPriors) {
    // A static scene seen through zero flows: latent = blurry = truth.
    const Size s{16, 16};
    const Image l = vtest::smooth_texture(s);
    SequenceState st;
    for (int i = 0; i < 3; ++i) st.frames.push_back(frame(l, l));
    const auto e = total_energy(st, params());
    EXPECT_EQ(e.data, 0.0);
    EXPECT_EQ(e.temporal, 0.0);
    EXPECT_NEAR(e.total, e.spatial_L + e.spatial_u + e.spatial_sigma, 1e-12);
}

TEST(TotalEnergy, PerturbingLatentIncreasesData) {
    std::mt19937 rng(7);
    SequenceState st = consistent_sequence(rng, {16, 16}, 2);
    const double base = data_energy(st, params());
    st.frames[0].latent.at(8, 8) += 0.05;
    EXPECT_GT(data_energy(st, params()), base);
}

TEST(ObservationModel, MaskBlendsBlurAndIdentity) {
    std::mt19937 rng(8);
    const Size s{20, 12};
    FrameState f = frame(vtest::random_image(s, 1, rng), Image());
    f.fwd = FlowField(s, 2.0, 0.0);
    f.bwd = FlowField(s, -2.0, 0.0);
    const Image m = border_data_mask(f.fwd, f.bwd, 0.5, 1.0);
    // Reach of 2 px: columns 2..17 and rows 2..9 are interior.
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            EXPECT_EQ(m.at(x, y), (x >= 2 && x <= 17 && y >= 2 && y <= 9) ? 1.0 : 0.0);
    const Image blurred = blurred_model(f), observed = observation_model(f, &m);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x)
            EXPECT_EQ(observed.at(x, y), m.at(x, y) == 1.0 ? blurred.at(x, y) : f.latent.at(x, y));
    EXPECT_EQ(observation_model(f, nullptr), blurred);
}

TEST(EnergyParams, ValidateRejectsBadValues) {
    EnergyParams p;
    p.lambda = -1;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = {};
    p.N = 0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    p = {};
    p.v_I = 0;
    EXPECT_THROW(p.validate(), std::invalid_argument);
    EXPECT_NO_THROW(EnergyParams{}.validate());
}

TEST(EnergyBreakdown, SerializesAllParts) {
    EnergyBreakdown e{1, 2, 3, 4, 5, 15};
    const nlohmann::json j = e;
    EXPECT_EQ(j.at("data"), 1);
    EXPECT_EQ(j.at("temporal"), 2);
    EXPECT_EQ(j.at("spatial_L"), 3);
    EXPECT_EQ(j.at("spatial_u"), 4);
    EXPECT_EQ(j.at("spatial_sigma"), 5);
    EXPECT_EQ(j.at("total"), 15);
}
