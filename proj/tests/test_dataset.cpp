#include <gtest/gtest.h>

#include <random>

#include "test_util.hpp"

using namespace vardeblur;

namespace {

SceneSpec translating(double vx, double vy, int subframes, double feature = 8.0) {
    SceneSpec s;
    s.width = 64;
    s.height = 48;
    s.subframes = subframes;
    s.background.seed = 11;
    s.background.feature_size = feature;
    s.camera.velocity = {vx, vy};
    return s;
}

double max_abs_in_interior(const Image& a, const Image& b, int margin) {
    double m = 0.0;
    for (int c = 0; c < a.channels(); ++c)
        for (int y = margin; y < a.height() - margin; ++y)
            for (int x = margin; x < a.width() - margin; ++x) m = std::max(m, std::abs(a.at(x, y, c) - b.at(x, y, c)));
    return m;
}

}  // namespace

TEST(Render, ZeroMotionGivesIdenticalSubframes) {
    const auto frames = render_scene(translating(0, 0, 5));
    ASSERT_EQ(frames.size(), 5u);
    for (const auto& f : frames) EXPECT_EQ(f, frames[0]);
}

TEST(Render, DeterministicUnderFixedSeed) {
    SceneSpec s = translating(0.3, -0.2, 4);
    s.channels = 3;
    s.sprites.push_back(SpriteSpec{});
    s.sprites[0].start = {30, 20};
    s.sprites[0].velocity = {0.4, 0.1};
    s.sprites[0].angular_velocity = 0.01;
    EXPECT_EQ(render_scene(s), render_scene(s));
    SceneSpec other = s;
    other.background.seed = 12;
    EXPECT_NE(render_scene(other)[0], render_scene(s)[0]);
}

TEST(Render, SpriteMovesFourPixelsOverNineSubframes) {
    SceneSpec s = translating(0, 0, 9);
    SpriteSpec sp;
    sp.size = 20;
    sp.start = {24, 24};
    sp.velocity = {0.5, 0.0};
    sp.texture.seed = 99;
    s.sprites.push_back(sp);
    const FlowField f = scene_flow(s, 0, 8);
    EXPECT_NEAR(f.u[f.index(24, 24)], 4.0, 1e-12);
    EXPECT_NEAR(f.v[f.index(24, 24)], 0.0, 1e-12);
    // Background stays put.
    EXPECT_EQ(f.u[f.index(2, 2)], 0.0);

    // Integer total displacement: the sprite interior reappears 4 px to the right.
    const auto frames = render_scene(s);
    for (int y = 18; y <= 30; ++y)
        for (int x = 18; x <= 30; ++x) EXPECT_NEAR(frames[8].at(x + 4, y), frames[0].at(x, y), 1e-9);
}

TEST(Render, SceneValidation) {
    EXPECT_THROW(render_scene(translating(1.0, 0.0, 3)), SceneError);
    EXPECT_THROW(render_scene(translating(0.8, 0.8, 3)), SceneError);
    SceneSpec s = translating(0, 0, 3);
    SpriteSpec sp;
    sp.start = {-500, -500};
    s.sprites.push_back(sp);
    EXPECT_THROW(validate(s), SceneError);
    EXPECT_THROW(nlohmann::json::parse(R"({"width": 32, "colour": 1})").get<SceneSpec>(), SceneError);
    EXPECT_THROW(nlohmann::json::parse(R"({"width": "wide"})").get<SceneSpec>(), SceneError);
}

TEST(Render, JsonRoundTrip) {
    SceneSpec s = translating(0.25, 0.5, 7);
    s.camera.angular_velocity = 0.002;
    s.sprites.push_back(SpriteSpec{});
    s.sprites[0].start = {10, 12};
    const nlohmann::json j = s;
    const SceneSpec back = j.get<SceneSpec>();
    EXPECT_EQ(nlohmann::json(back), j);
    EXPECT_EQ(render_scene(back), render_scene(s));
}

TEST(Synthesize, SingleSubframeWindowIsIdentity) {
    const auto frames = render_scene(translating(0.5, 0.25, 6));
    const auto pairs = synthesize_blur(frames, 1, 0.0);
    ASSERT_EQ(pairs.size(), 6u);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        EXPECT_EQ(pairs[i].blurry, frames[i]);
        EXPECT_EQ(pairs[i].sharp_gt, frames[i]);
        EXPECT_EQ(pairs[i].tau, 0.5);
    }
}

TEST(Synthesize, StaticSceneAveragesToGroundTruth) {
    const auto pairs = synthesize_blur(render_scene(translating(0, 0, 27)), 9, 0.0);
    ASSERT_EQ(pairs.size(), 3u);
    for (const auto& p : pairs) EXPECT_LT(vtest::max_abs_diff(p.blurry, p.sharp_gt), 1e-15);
}

TEST(Synthesize, WindowCountAndMidFrames) {
    const auto pairs = synthesize_blur(render_scene(translating(0.1, 0, 50)), 7, 0.0);
    ASSERT_EQ(pairs.size(), 7u);  // 50 / 7, remainder dropped
    for (std::size_t i = 0; i < pairs.size(); ++i) EXPECT_EQ(pairs[i].mid_subframe, static_cast<int>(7 * i + 3));
}

TEST(Synthesize, RejectsEvenKAndShortInput) {
    const auto frames = render_scene(translating(0, 0, 5));
    EXPECT_THROW(synthesize_blur(frames, 4, 0.0), std::invalid_argument);
    EXPECT_THROW(synthesize_blur(frames, 7, 0.0), std::invalid_argument);
    EXPECT_THROW(synthesize_blur(frames, 3, -1.0), std::invalid_argument);
}

TEST(Synthesize, PreBlurCommutesWithAveraging) {
    const auto frames = render_scene(translating(0.5, 0.3, 18));
    const auto blurred = synthesize_blur(frames, 9, 1.5);
    const auto plain = synthesize_blur(frames, 9, 0.0);
    for (std::size_t i = 0; i < blurred.size(); ++i) {
        EXPECT_LT(vtest::max_abs_diff(blurred[i].blurry, uniform_defocus(plain[i].blurry, 1.5)), 1e-6);
        // Ground truth is never pre-blurred.
        EXPECT_EQ(blurred[i].sharp_gt, plain[i].sharp_gt);
    }
}

TEST(Synthesize, GroundTruthFlowsAreMidToMid) {
    const auto pairs = synthesize_scene(translating(0.5, -0.25, 27), 9, 0.0);
    for (const auto& p : pairs)
        for (std::size_t i = 0; i < p.gt_flow_fwd.u.size(); ++i) {
            EXPECT_NEAR(p.gt_flow_fwd.u[i], 4.5, 1e-9);
            EXPECT_NEAR(p.gt_flow_fwd.v[i], -2.25, 1e-9);
            EXPECT_NEAR(p.gt_flow_bwd.u[i], -4.5, 1e-9);
            EXPECT_NEAR(p.gt_flow_bwd.v[i], 2.25, 1e-9);
        }
}

// Frame averaging and the duty-cycle kernel describe the same blur.
TEST(Synthesize, AveragingMatchesMotionKernelOnSmoothContent) {
    const auto pairs = synthesize_scene(translating(0.5, 0.0, 27, 32.0), 9, 0.0);
    for (const auto& p : pairs) {
        const Image model = build_motion_blur_op(p.gt_flow_fwd, p.gt_flow_bwd, p.tau).apply(p.sharp_gt);
        EXPECT_LT(max_abs_in_interior(model, p.blurry, 4), 0.01);
    }
}

TEST(Metrics, PsnrValues) {
    std::mt19937 rng(5);
    const Image a = vtest::random_image({20, 16}, 3, rng, 0.0, 0.8);
    EXPECT_EQ(psnr(a, a), 100.0);
    Image b = a;
    for (auto& v : b.data()) v += 0.1;
    EXPECT_NEAR(psnr(a, b), 20.0, 1e-9);
    EXPECT_DOUBLE_EQ(psnr(a, b), psnr(b, a));
    EXPECT_THROW(psnr(a, Image(20, 15, 3)), std::invalid_argument);
}

TEST(Metrics, SsimValues) {
    const Image a = render_scene(translating(0, 0, 1))[0];
    EXPECT_EQ(ssim(a, a), 1.0);
    Image neg = a;
    for (auto& v : neg.data()) v = 1.0 - v;
    EXPECT_LT(ssim(a, neg), 0.1);
    const Image blurred = uniform_defocus(a, 1.0);
    const double s = ssim(a, blurred);
    EXPECT_GT(s, 0.0);
    EXPECT_LT(s, 1.0);
    EXPECT_NEAR(s, ssim(blurred, a), 1e-12);
    EXPECT_THROW(ssim(Image(10, 30), Image(10, 30)), std::invalid_argument);
}

TEST(Metrics, EpeValues) {
    std::mt19937 rng(9);
    const FlowField gt = vtest::random_flow({10, 8}, rng, 3.0);
    EXPECT_EQ(epe(gt, gt), 0.0);
    FlowField shifted = gt;
    for (auto& u : shifted.u) u += 1.0;
    EXPECT_NEAR(epe(shifted, gt), 1.0, 1e-12);

    FlowField half = gt;
    for (std::size_t i = 0; i < half.u.size(); i += 2) {
        half.u[i] += 3.0;
        half.v[i] += 4.0;
    }
    EXPECT_NEAR(epe(half, gt), 2.5, 1e-12);

    Image mask(10, 8);
    mask.at(3, 3) = 1.0;
    EXPECT_NEAR(epe(shifted, gt, mask), 1.0, 1e-12);
    EXPECT_THROW(epe(gt, gt, Image(10, 8)), std::invalid_argument);
    EXPECT_THROW(epe(gt, FlowField(9, 8)), std::invalid_argument);
}
