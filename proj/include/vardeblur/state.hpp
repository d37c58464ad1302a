#pragma once

#include <cmath>
#include <stdexcept>
#include <vector>

#include "image.hpp"
#include "imagecore.hpp"

namespace vardeblur {

/// Per-frame unknowns and observations at the current pyramid level.
struct FrameState {
    Image blurry;
    Image latent;
    FlowField fwd;  ///< frame i -> i+1
    FlowField bwd;  ///< frame i -> i-1
    SigmaMap sigma;
    double tau = 0.5;
    Image occlusion_fwd;  ///< {0.01, 1}; empty until detected
    Image occlusion_bwd;
};

struct SequenceState {
    std::vector<FrameState> frames;
    std::vector<Image> edge_maps;  ///< frozen per level; empty means all-ones
    std::vector<Image> data_masks;  ///< frozen per level; empty means all-ones

    [[nodiscard]] std::size_t size() const { return frames.size(); }
    [[nodiscard]] Size frame_size() const { return frames.front().blurry.size(); }
    [[nodiscard]] std::vector<Image> latents() const {
        std::vector<Image> out;
        for (const auto& f : frames) out.push_back(f.latent);
        return out;
    }
    void set_latents(const std::vector<Image>& l) {
        for (std::size_t i = 0; i < frames.size(); ++i) frames[i].latent = l[i];
    }
};

/// Flow with a validity mask (0 where a chained lookup or the final target
/// leaves the image).
struct MaskedFlow {
    FlowField flow;
    Image valid;
};

/// out(x) = a(x) + b(x + a(x)); validity is the intersection of both lookups.
inline MaskedFlow chain_flows(const MaskedFlow& a, const FlowField& b) {
    require_same_size(a.flow.size(), b.size(), "chain_flows");
    const Size s = b.size();
    MaskedFlow out{FlowField(s), Image(s, 1)};
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = b.index(x, y);
            const double px = x + a.flow.u[i], py = y + a.flow.v[i];
            out.flow.u[i] = a.flow.u[i] + sample_bilinear(b.u, s, px, py);
            out.flow.v[i] = a.flow.v[i] + sample_bilinear(b.v, s, px, py);
            const bool ok = a.valid.data()[i] > 0.0 && inside(s, px, py) &&
                            inside(s, x + out.flow.u[i], y + out.flow.v[i]);
            out.valid.data()[i] = ok ? 1.0 : 0.0;
        }
    return out;
}

inline MaskedFlow with_validity(const FlowField& f) {
    const Size s = f.size();
    MaskedFlow out{f, Image(s, 1)};
    for (int y = 0; y < s.height; ++y)
        for (int x = 0; x < s.width; ++x) {
            const std::size_t i = f.index(x, y);
            out.valid.data()[i] = inside(s, x + f.u[i], y + f.v[i]) ? 1.0 : 0.0;
        }
    return out;
}

inline FlowField chain_flows(const FlowField& a, const FlowField& b) { return chain_flows(with_validity(a), b).flow; }

/// Flow from frame i to frame i+n, chained through the direct neighbour flows.
struct NeighborFlow {
    int offset = 0;  ///< n
    int target = 0;  ///< i + n
    MaskedFlow flow;
};

inline MaskedFlow neighbor_flow(const SequenceState& st, int i, int n) {
    if (n == 0) throw std::invalid_argument("neighbor_flow: n must be non-zero");
    const int step = n > 0 ? 1 : -1;
    auto direct = [&](int k) -> const FlowField& { return step > 0 ? st.frames[k].fwd : st.frames[k].bwd; };
    MaskedFlow acc = with_validity(direct(i));
    for (int k = i + step; k != i + n; k += step) acc = chain_flows(acc, direct(k));
    return acc;
}

/// All temporal neighbours of frame i within radius N that exist in the sequence.
inline std::vector<NeighborFlow> neighbor_flows(const SequenceState& st, int i, int N) {
    std::vector<NeighborFlow> out;
    const int count = static_cast<int>(st.size());
    for (int n = -N; n <= N; ++n) {
        if (n == 0 || i + n < 0 || i + n >= count) continue;
        out.push_back({n, i + n, neighbor_flow(st, i, n)});
    }
    return out;
}

inline std::vector<std::vector<NeighborFlow>> all_neighbor_flows(const SequenceState& st, int N) {
    std::vector<std::vector<NeighborFlow>> out;
    for (int i = 0; i < static_cast<int>(st.size()); ++i) out.push_back(neighbor_flows(st, i, N));
    return out;
}

inline FlowField negated(const FlowField& f) {
    FlowField out = f;
    for (auto& x : out.u) x = -x;
    for (auto& x : out.v) x = -x;
    return out;
}

/// Boundary frames have no neighbour on one side; their outward flow mirrors
/// the inward one (constant velocity across the exposure).
inline void mirror_boundary_flows(SequenceState& st) {
    if (st.size() < 2) return;
    st.frames.front().bwd = negated(st.frames.front().fwd);
    st.frames.back().fwd = negated(st.frames.back().bwd);
}

}  // namespace vardeblur
