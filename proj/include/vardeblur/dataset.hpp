#pragma once

#include <array>
#include <cmath>
#include <cstdint>
#include <filesystem>
#include <numbers>
#include <optional>
#include <set>
#include <stdexcept>
#include <string>
#include <vector>

#include <json.hpp>

#include "image.hpp"
#include "imagecore.hpp"
#include "operators.hpp"

namespace vardeblur {

class SceneError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

// ---------------------------------------------------------------------------
// Scene description

struct TextureSpec {
    std::uint64_t seed = 1;
    double feature_size = 8.0;  ///< coarsest noise wavelength, px
    int octaves = 3;
    double low = 0.1;
    double high = 0.9;
};

struct SpriteSpec {
    TextureSpec texture;
    double size = 24.0;                   ///< side length, px
    std::array<double, 2> start{0, 0};    ///< centre at subframe 0
    std::array<double, 2> velocity{0, 0}; ///< px per subframe
    double angular_velocity = 0.0;        ///< rad per subframe, about the centre
};

/// Motion of the background layer in image coordinates: translation plus a
/// rotation about the canvas centre and a smooth sinusoidal shake.
struct CameraSpec {
    std::array<double, 2> velocity{0, 0};
    double angular_velocity = 0.0;
    double shake_amplitude = 0.0;
    double shake_period = 16.0;  ///< subframes
    std::uint64_t shake_seed = 7;
};

struct SceneSpec {
    int width = 128;
    int height = 128;
    int channels = 1;
    int subframes = 45;
    TextureSpec background;
    CameraSpec camera;
    std::vector<SpriteSpec> sprites;
};

namespace detail {

template <typename T>
void read_if(const nlohmann::json& j, const char* key, T& out) {
    if (j.contains(key)) j.at(key).get_to(out);
}

inline void require_keys(const nlohmann::json& j, const std::set<std::string>& known, const std::string& what) {
    if (!j.is_object()) throw SceneError(what + ": expected an object");
    for (const auto& item : j.items())
        if (!known.contains(item.key())) throw SceneError(what + ": unknown key '" + item.key() + "'");
}

}  // namespace detail

inline void from_json(const nlohmann::json& j, TextureSpec& t) {
    detail::require_keys(j, {"seed", "feature_size", "octaves", "low", "high"}, "texture");
    detail::read_if(j, "seed", t.seed);
    detail::read_if(j, "feature_size", t.feature_size);
    detail::read_if(j, "octaves", t.octaves);
    detail::read_if(j, "low", t.low);
    detail::read_if(j, "high", t.high);
}

inline void to_json(nlohmann::json& j, const TextureSpec& t) {
    j = {{"seed", t.seed}, {"feature_size", t.feature_size}, {"octaves", t.octaves}, {"low", t.low}, {"high", t.high}};
}

inline void from_json(const nlohmann::json& j, SpriteSpec& s) {
    detail::require_keys(j, {"texture", "size", "start", "velocity", "angular_velocity"}, "sprite");
    detail::read_if(j, "texture", s.texture);
    detail::read_if(j, "size", s.size);
    detail::read_if(j, "start", s.start);
    detail::read_if(j, "velocity", s.velocity);
    detail::read_if(j, "angular_velocity", s.angular_velocity);
}

inline void to_json(nlohmann::json& j, const SpriteSpec& s) {
    j = {{"texture", s.texture},
         {"size", s.size},
         {"start", s.start},
         {"velocity", s.velocity},
         {"angular_velocity", s.angular_velocity}};
}

inline void from_json(const nlohmann::json& j, CameraSpec& c) {
    detail::require_keys(j, {"velocity", "angular_velocity", "shake_amplitude", "shake_period", "shake_seed"},
                         "camera");
    detail::read_if(j, "velocity", c.velocity);
    detail::read_if(j, "angular_velocity", c.angular_velocity);
    detail::read_if(j, "shake_amplitude", c.shake_amplitude);
    detail::read_if(j, "shake_period", c.shake_period);
    detail::read_if(j, "shake_seed", c.shake_seed);
}

inline void to_json(nlohmann::json& j, const CameraSpec& c) {
    j = {{"velocity", c.velocity},
         {"angular_velocity", c.angular_velocity},
         {"shake_amplitude", c.shake_amplitude},
         {"shake_period", c.shake_period},
         {"shake_seed", c.shake_seed}};
}

inline void to_json(nlohmann::json& j, const SceneSpec& s) {
    j = {{"width", s.width},         {"height", s.height},        {"channels", s.channels},
         {"subframes", s.subframes}, {"background", s.background}, {"camera", s.camera},
         {"sprites", s.sprites}};
}

/// Largest displacement of any material point between consecutive subframes.
inline double max_subframe_speed(const SceneSpec& s);

inline void validate(const SceneSpec& s) {
    if (s.width < 1 || s.height < 1) throw SceneError("scene: canvas dimensions must be positive");
    if (s.channels != 1 && s.channels != 3) throw SceneError("scene: channels must be 1 or 3");
    if (s.subframes < 1) throw SceneError("scene: subframes must be >= 1");
    auto check_texture = [](const TextureSpec& t) {
        if (!(t.feature_size >= 1.0)) throw SceneError("scene: texture feature_size must be >= 1 px");
        if (t.octaves < 1 || t.octaves > 8) throw SceneError("scene: texture octaves must lie in [1,8]");
        if (!(t.low >= 0 && t.high <= 1 && t.low <= t.high)) throw SceneError("scene: need 0 <= low <= high <= 1");
    };
    check_texture(s.background);
    if (!(s.camera.shake_period > 0)) throw SceneError("scene: shake_period must be positive");
    for (const auto& sp : s.sprites) {
        check_texture(sp.texture);
        if (!(sp.size >= 1.0)) throw SceneError("scene: sprite size must be >= 1 px");
        // Reject sprites that never overlap the canvas.
        bool visible = false;
        const double reach = sp.size * std::numbers::sqrt2 / 2;
        for (int t = 0; t < s.subframes && !visible; ++t) {
            const double cx = sp.start[0] + sp.velocity[0] * t, cy = sp.start[1] + sp.velocity[1] * t;
            visible = cx + reach >= 0 && cx - reach <= s.width - 1 && cy + reach >= 0 && cy - reach <= s.height - 1;
        }
        if (!visible) throw SceneError("scene: sprite lies outside the canvas for the entire sequence");
    }
    const double speed = max_subframe_speed(s);
    if (!(speed < 1.0))
        throw SceneError("scene: per-subframe displacement " + std::to_string(speed) + " px must stay below 1 px");
}

inline void from_json(const nlohmann::json& j, SceneSpec& s) {
    try {
        detail::require_keys(j, {"width", "height", "channels", "subframes", "background", "camera", "sprites"},
                             "scene");
        detail::read_if(j, "width", s.width);
        detail::read_if(j, "height", s.height);
        detail::read_if(j, "channels", s.channels);
        detail::read_if(j, "subframes", s.subframes);
        detail::read_if(j, "background", s.background);
        detail::read_if(j, "camera", s.camera);
        detail::read_if(j, "sprites", s.sprites);
    } catch (const nlohmann::json::exception& e) {
        throw SceneError(std::string("scene: ") + e.what());
    }
    validate(s);
}

// ---------------------------------------------------------------------------
// Procedural texture and layer motion

namespace detail {

inline std::uint64_t splitmix(std::uint64_t x) {
    x += 0x9E3779B97F4A7C15ULL;
    x = (x ^ (x >> 30)) * 0xBF58476D1CE4E5B9ULL;
    x = (x ^ (x >> 27)) * 0x94D049BB133111EBULL;
    return x ^ (x >> 31);
}

inline double lattice(std::uint64_t seed, std::int64_t ix, std::int64_t iy) {
    const std::uint64_t h = splitmix(seed ^ splitmix(static_cast<std::uint64_t>(ix) * 0x632BE59BD9B4E019ULL ^
                                                     splitmix(static_cast<std::uint64_t>(iy))));
    return static_cast<double>(h >> 11) * 0x1.0p-53;
}

inline double quintic(double t) { return t * t * t * (t * (t * 6 - 15) + 10); }

inline double value_noise(std::uint64_t seed, double x, double y) {
    const double fx = std::floor(x), fy = std::floor(y);
    const auto ix = static_cast<std::int64_t>(fx), iy = static_cast<std::int64_t>(fy);
    const double tx = quintic(x - fx), ty = quintic(y - fy);
    const double a = lattice(seed, ix, iy), b = lattice(seed, ix + 1, iy);
    const double c = lattice(seed, ix, iy + 1), d = lattice(seed, ix + 1, iy + 1);
    return (a + (b - a) * tx) * (1 - ty) + (c + (d - c) * tx) * ty;
}

}  // namespace detail

/// Multi-octave value noise mapped into [low, high]; `channel` selects an
/// independent pattern.
inline double texture_value(const TextureSpec& t, int channel, double x, double y) {
    double sum = 0.0, amp = 1.0, norm = 0.0, freq = 1.0 / t.feature_size;
    for (int o = 0; o < t.octaves; ++o) {
        const std::uint64_t seed = detail::splitmix(t.seed * 131 + static_cast<std::uint64_t>(channel) * 17 + o);
        sum += amp * detail::value_noise(seed, x * freq, y * freq);
        norm += amp;
        amp *= 0.5;
        freq *= 2.0;
    }
    return t.low + (t.high - t.low) * (sum / norm);
}

struct Vec2d {
    double x = 0, y = 0;
};

inline Vec2d rotate(Vec2d p, double angle) {
    const double c = std::cos(angle), s = std::sin(angle);
    return {c * p.x - s * p.y, s * p.x + c * p.y};
}

/// Background pose at continuous subframe time t: image point
/// p = R(phi(t)) (w - centre) + centre + offset(t) for texture point w.
struct LayerPose {
    Vec2d centre;
    Vec2d offset;
    double angle = 0.0;

    [[nodiscard]] Vec2d to_image(Vec2d w) const {
        const Vec2d r = rotate({w.x - centre.x, w.y - centre.y}, angle);
        return {r.x + centre.x + offset.x, r.y + centre.y + offset.y};
    }
    [[nodiscard]] Vec2d to_texture(Vec2d p) const {
        const Vec2d r = rotate({p.x - centre.x - offset.x, p.y - centre.y - offset.y}, -angle);
        return {r.x + centre.x, r.y + centre.y};
    }
};

inline Vec2d shake_offset(const CameraSpec& c, double t) {
    if (c.shake_amplitude == 0.0) return {};
    const double phase_x = detail::lattice(c.shake_seed, 1, 0) * 2 * std::numbers::pi;
    const double phase_y = detail::lattice(c.shake_seed, 2, 0) * 2 * std::numbers::pi;
    const double w = 2 * std::numbers::pi / c.shake_period;
    return {c.shake_amplitude * (std::sin(w * t + phase_x) - std::sin(phase_x)),
            c.shake_amplitude * (std::sin(w * t + phase_y) - std::sin(phase_y))};
}

inline LayerPose background_pose(const SceneSpec& s, double t) {
    const Vec2d shake = shake_offset(s.camera, t);
    return {{(s.width - 1) / 2.0, (s.height - 1) / 2.0},
            {s.camera.velocity[0] * t + shake.x, s.camera.velocity[1] * t + shake.y},
            s.camera.angular_velocity * t};
}

/// Sprite pose: its local frame is centred on the sprite.
inline LayerPose sprite_pose(const SpriteSpec& sp, double t) {
    return {{0.0, 0.0}, {sp.start[0] + sp.velocity[0] * t, sp.start[1] + sp.velocity[1] * t},
            sp.angular_velocity * t};
}

/// Coverage of a square sprite at local coordinates, with a 1 px linear ramp.
inline double sprite_coverage(const SpriteSpec& sp, Vec2d local) {
    const double h = sp.size / 2.0;
    const double cx = std::clamp(h + 0.5 - std::abs(local.x), 0.0, 1.0);
    const double cy = std::clamp(h + 0.5 - std::abs(local.y), 0.0, 1.0);
    return cx * cy;
}

inline double max_subframe_speed(const SceneSpec& s) {
    double best = 0.0;
    std::vector<Vec2d> probes;
    for (int y = 0; y <= s.height; y += 4)
        for (int x = 0; x <= s.width; x += 4) probes.push_back({std::min<double>(x, s.width - 1), std::min<double>(y, s.height - 1)});
    for (int t = 0; t + 1 < s.subframes; ++t) {
        const LayerPose a = background_pose(s, t), b = background_pose(s, t + 1);
        for (const auto& p : probes) {
            const Vec2d q = b.to_image(a.to_texture(p));
            best = std::max(best, std::hypot(q.x - p.x, q.y - p.y));
        }
        for (const auto& sp : s.sprites) {
            const LayerPose sa = sprite_pose(sp, t), sb = sprite_pose(sp, t + 1);
            const double h = sp.size / 2.0 + 0.5;
            for (Vec2d corner : {Vec2d{-h, -h}, Vec2d{h, -h}, Vec2d{-h, h}, Vec2d{h, h}, Vec2d{0, 0}}) {
                const Vec2d p = sa.to_image(corner), q = sb.to_image(corner);
                best = std::max(best, std::hypot(q.x - p.x, q.y - p.y));
            }
        }
    }
    return best;
}

/// Frame at continuous time t: background with sprites composited in list
/// order (later sprites on top).
inline Image render_frame(const SceneSpec& s, double t) {
    Image img(Size{s.width, s.height}, s.channels);
    const LayerPose bg = background_pose(s, t);
    std::vector<LayerPose> poses;
    for (const auto& sp : s.sprites) poses.push_back(sprite_pose(sp, t));
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const Vec2d w = bg.to_texture({double(x), double(y)});
            for (int c = 0; c < s.channels; ++c) img.at(x, y, c) = texture_value(s.background, c, w.x, w.y);
            for (std::size_t k = 0; k < s.sprites.size(); ++k) {
                const Vec2d local = poses[k].to_texture({double(x), double(y)});
                const double a = sprite_coverage(s.sprites[k], local);
                if (a <= 0.0) continue;
                for (int c = 0; c < s.channels; ++c)
                    img.at(x, y, c) = a * texture_value(s.sprites[k].texture, c, local.x, local.y) +
                                      (1 - a) * img.at(x, y, c);
            }
        }
    return img;
}

inline std::vector<Image> render_scene(const SceneSpec& s) {
    validate(s);
    std::vector<Image> frames;
    for (int t = 0; t < s.subframes; ++t) frames.push_back(render_frame(s, t));
    return frames;
}

/// Exact motion from time t0 to t1: each pixel follows the material point of
/// the topmost layer covering at least half of it.
inline FlowField scene_flow(const SceneSpec& s, double t0, double t1) {
    FlowField f(s.width, s.height);
    const LayerPose bg0 = background_pose(s, t0), bg1 = background_pose(s, t1);
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const Vec2d p{double(x), double(y)};
            Vec2d q = bg1.to_image(bg0.to_texture(p));
            for (const auto& sp : s.sprites) {
                const LayerPose a = sprite_pose(sp, t0);
                const Vec2d local = a.to_texture(p);
                if (sprite_coverage(sp, local) >= 0.5) q = sprite_pose(sp, t1).to_image(local);
            }
            const std::size_t i = f.index(x, y);
            f.u[i] = q.x - p.x;
            f.v[i] = q.y - p.y;
        }
    return f;
}

// ---------------------------------------------------------------------------
// Blur synthesis

struct BlurPair {
    Image blurry;
    Image sharp_gt;
    FlowField gt_flow_fwd;  ///< mid-frame to the next window's mid-frame
    FlowField gt_flow_bwd;  ///< mid-frame to the previous window's mid-frame
    double tau = 0.5;
    int mid_subframe = 0;
};

/// Uniform Gaussian pre-blur with the defocus operator's border handling.
inline Image uniform_defocus(const Image& img, double sigma) {
    if (sigma == 0.0) return img;
    return DefocusOp(SigmaMap(img.size(), sigma)).apply(img);
}

/// Averages non-overlapping windows of k subframes (after an optional
/// uniform pre-blur); the sharp target is each window's unblurred mid-frame.
/// Flows are left empty.
inline std::vector<BlurPair> synthesize_blur(const std::vector<Image>& subframes, int k, double pre_blur_sigma) {
    if (k < 1 || k % 2 == 0) throw std::invalid_argument("synthesize_blur: k must be a positive odd number");
    if (!(pre_blur_sigma >= 0)) throw std::invalid_argument("synthesize_blur: pre_blur_sigma must be >= 0");
    if (subframes.size() < static_cast<std::size_t>(k))
        throw std::invalid_argument("synthesize_blur: fewer subframes than k");
    const std::size_t windows = subframes.size() / k;
    std::vector<BlurPair> out;
    for (std::size_t w = 0; w < windows; ++w) {
        BlurPair bp;
        const std::size_t first = w * k;
        bp.mid_subframe = static_cast<int>(first + (k - 1) / 2);
        Image acc(subframes[first].size(), subframes[first].channels());
        for (int j = 0; j < k; ++j) axpy(1.0, uniform_defocus(subframes[first + j], pre_blur_sigma), acc);
        bp.blurry = k == 1 ? uniform_defocus(subframes[first], pre_blur_sigma) : scaled(acc, 1.0 / k);
        bp.sharp_gt = subframes[bp.mid_subframe];
        out.push_back(std::move(bp));
    }
    return out;
}

/// Render, average and attach exact inter-frame flows.
inline std::vector<BlurPair> synthesize_scene(const SceneSpec& s, int k, double pre_blur_sigma) {
    auto pairs = synthesize_blur(render_scene(s), k, pre_blur_sigma);
    for (auto& p : pairs) {
        p.gt_flow_fwd = scene_flow(s, p.mid_subframe, p.mid_subframe + k);
        p.gt_flow_bwd = scene_flow(s, p.mid_subframe, p.mid_subframe - k);
    }
    return pairs;
}

// ---------------------------------------------------------------------------
// Metrics

inline constexpr double kPsnrCap = 100.0;

inline double psnr(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("psnr: dimension mismatch");
    double sse = 0.0;
    for (std::size_t i = 0; i < a.data().size(); ++i) {
        const double d = a.data()[i] - b.data()[i];
        sse += d * d;
    }
    const double mse = sse / static_cast<double>(a.data().size());
    if (mse == 0.0) return kPsnrCap;
    return std::min(kPsnrCap, 10.0 * std::log10(1.0 / mse));
}

/// Mean SSIM on luminance over all fully-contained 11x11 Gaussian windows.
inline double ssim(const Image& a, const Image& b) {
    if (!a.same_shape(b)) throw std::invalid_argument("ssim: dimension mismatch");
    constexpr int R = 5;
    if (std::min(a.width(), a.height()) < 2 * R + 1) throw std::invalid_argument("ssim: image smaller than 11x11");
    const Image la = luminance(a), lb = luminance(b);
    if (la == lb) return 1.0;
    constexpr double C1 = 0.01 * 0.01, C2 = 0.03 * 0.03;
    std::array<double, 2 * R + 1> g{};
    double gs = 0.0;
    for (int d = -R; d <= R; ++d) gs += g[d + R] = std::exp(-d * d / (2 * 1.5 * 1.5));
    for (auto& v : g) v /= gs;
    const int W = a.width(), H = a.height();
    double total = 0.0;
    int count = 0;
    for (int y = R; y < H - R; ++y)
        for (int x = R; x < W - R; ++x) {
            double ma = 0, mb = 0, saa = 0, sbb = 0, sab = 0;
            for (int dy = -R; dy <= R; ++dy)
                for (int dx = -R; dx <= R; ++dx) {
                    const double w = g[dx + R] * g[dy + R];
                    const double va = la.at(x + dx, y + dy), vb = lb.at(x + dx, y + dy);
                    ma += w * va;
                    mb += w * vb;
                    saa += w * va * va;
                    sbb += w * vb * vb;
                    sab += w * va * vb;
                }
            const double vara = saa - ma * ma, varb = sbb - mb * mb, cov = sab - ma * mb;
            total += ((2 * ma * mb + C1) * (2 * cov + C2)) / ((ma * ma + mb * mb + C1) * (vara + varb + C2));
            ++count;
        }
    return total / count;
}

/// Mean end-point error over pixels where mask > 0 (all pixels when mask is empty).
inline double epe(const FlowField& flow, const FlowField& gt, const Image& mask = Image()) {
    require_same_size(flow.size(), gt.size(), "epe");
    if (!mask.empty()) require_same_size(flow.size(), mask.size(), "epe");
    double sum = 0.0;
    std::size_t n = 0;
    for (std::size_t i = 0; i < flow.u.size(); ++i) {
        if (!mask.empty() && !(mask.data()[i] > 0)) continue;
        sum += std::hypot(flow.u[i] - gt.u[i], flow.v[i] - gt.v[i]);
        ++n;
    }
    if (n == 0) throw std::invalid_argument("epe: empty mask");
    return sum / static_cast<double>(n);
}

}  // namespace vardeblur
