#pragma once

// Command implementations behind tools/vardeblur. Each command returns a
// process exit code; errors are mapped by `exit_code_for`.

#include <algorithm>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <json.hpp>

#include "dataset.hpp"
#include "io.hpp"
#include "pipeline.hpp"
#include "version.hpp"

namespace vardeblur::cli {

namespace fs = std::filesystem;

enum ExitCode : int { kOk = 0, kUsage = 2, kIo = 3, kNumerical = 4 };

/// Bad arguments or inconsistent inputs detected by a command.
class UsageError : public std::invalid_argument {
public:
    using std::invalid_argument::invalid_argument;
};

/// Maps the library's exception types onto exit codes.
inline int exit_code_for(const std::exception& e) {
    if (dynamic_cast<const NumericalError*>(&e)) return kNumerical;
    if (dynamic_cast<const IoError*>(&e)) return kIo;
    if (dynamic_cast<const fs::filesystem_error*>(&e)) return kIo;
    if (dynamic_cast<const nlohmann::json::exception*>(&e)) return kUsage;
    if (dynamic_cast<const std::invalid_argument*>(&e)) return kUsage;
    return kIo;
}

inline std::string frame_name(std::size_t i, const char* suffix) {
    char buf[32];
    std::snprintf(buf, sizeof buf, "%05zu%s", i, suffix);
    return buf;
}

inline nlohmann::json read_json(const fs::path& p) {
    std::ifstream in(p);
    if (!in) throw IoError("cannot open " + p.string());
    try {
        return nlohmann::json::parse(in);
    } catch (const nlohmann::json::parse_error& e) {
        throw ConfigError(p.string() + ": " + e.what());
    }
}

inline void write_json(const fs::path& p, const nlohmann::json& j) {
    std::ofstream out(p);
    if (!out) throw IoError("cannot write " + p.string());
    out << j.dump(2) << '\n';
    if (!out) throw IoError("failed writing " + p.string());
}

inline void make_dir(const fs::path& p) {
    std::error_code ec;
    fs::create_directories(p, ec);
    if (ec) throw IoError("cannot create " + p.string() + ": " + ec.message());
}

/// Sorted *.png files of a directory.
inline std::vector<fs::path> list_pngs(const fs::path& dir) {
    if (!fs::is_directory(dir)) throw IoError("not a directory: " + dir.string());
    std::vector<fs::path> out;
    for (const auto& e : fs::directory_iterator(dir))
        if (e.is_regular_file() && e.path().extension() == ".png") out.push_back(e.path());
    std::sort(out.begin(), out.end());
    return out;
}

inline std::vector<Image> read_frames(const fs::path& dir) {
    std::vector<Image> frames;
    for (const auto& p : list_pngs(dir)) frames.push_back(read_png(p));
    return frames;
}

/// `dir/sub` when it exists, otherwise `dir` itself.
inline fs::path frames_dir(const fs::path& dir, std::initializer_list<const char*> subdirs) {
    for (const char* s : subdirs)
        if (fs::is_directory(dir / s)) return dir / s;
    return dir;
}

/// One per command invocation; written next to the command's outputs.
struct RunManifest {
    std::string command;
    nlohmann::json config;
    nlohmann::json inputs = nlohmann::json::object();
    nlohmann::json outputs = nlohmann::json::object();
    std::string energy_log;
    nlohmann::json timings = nlohmann::json::object();
    std::string version = kVersion;
};

inline void to_json(nlohmann::json& j, const RunManifest& m) {
    j = nlohmann::json{{"command", m.command}, {"config", m.config},   {"inputs", m.inputs},
                       {"outputs", m.outputs}, {"timings", m.timings}, {"version", m.version}};
    if (!m.energy_log.empty()) j["energy_log"] = m.energy_log;
}

using Clock = std::chrono::steady_clock;
inline double seconds_since(Clock::time_point t) { return std::chrono::duration<double>(Clock::now() - t).count(); }

// ---------------------------------------------------------------------------
// synth

struct SynthOptions {
    fs::path spec;
    int k = 9;
    double pre_blur = 0.0;
    fs::path out;
};

inline int cmd_synth(const SynthOptions& o, std::ostream& log = std::cout) {
    const auto t0 = Clock::now();
    const nlohmann::json spec_json = read_json(o.spec);
    SceneSpec spec;
    try {
        spec = spec_json.get<SceneSpec>();
    } catch (const nlohmann::json::exception& e) {
        throw SceneError(std::string("scene spec: ") + e.what());
    }
    if (!(o.pre_blur >= 0)) throw UsageError("--pre-blur must be >= 0");
    const auto pairs = synthesize_scene(spec, o.k, o.pre_blur);

    for (const char* d : {"blurry", "sharp", "flow"}) make_dir(o.out / d);
    for (std::size_t i = 0; i < pairs.size(); ++i) {
        write_png(o.out / "blurry" / frame_name(i, ".png"), pairs[i].blurry);
        write_png(o.out / "sharp" / frame_name(i, ".png"), pairs[i].sharp_gt);
        write_flo(o.out / "flow" / frame_name(i, "_fwd.flo"), pairs[i].gt_flow_fwd);
        write_flo(o.out / "flow" / frame_name(i, "_bwd.flo"), pairs[i].gt_flow_bwd);
    }

    RunManifest m;
    m.command = "synth";
    m.config = {{"k", o.k}, {"pre_blur_sigma", o.pre_blur}, {"tau", pairs.empty() ? 0.5 : pairs[0].tau}};
    m.inputs = {{"spec", o.spec.string()}};
    m.outputs = {{"dir", o.out.string()}, {"frames", pairs.size()}};
    m.timings = {{"total_seconds", seconds_since(t0)}};
    nlohmann::json j = m;
    // Dataset description read back by eval and by tests.
    j["k"] = o.k;
    j["tau"] = m.config["tau"];
    j["pre_blur_sigma"] = o.pre_blur;
    j["frames"] = pairs.size();
    j["scene"] = spec;
    nlohmann::json seeds = {{"background", spec.background.seed}, {"shake", spec.camera.shake_seed}};
    for (const auto& sp : spec.sprites) seeds["sprites"].push_back(sp.texture.seed);
    j["seeds"] = seeds;
    write_json(o.out / "manifest.json", j);
    log << "wrote " << pairs.size() << " blur pairs to " << o.out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// deblur

struct DeblurOptions {
    fs::path in;
    std::optional<fs::path> config;
    fs::path out;
    bool no_defocus = false;
    std::optional<int> levels;
    bool verbose = false;
};

inline PipelineConfig load_config(const DeblurOptions& o) {
    PipelineConfig cfg;
    if (o.config) cfg = read_json(*o.config).get<PipelineConfig>();
    if (o.no_defocus) cfg.enable_defocus = false;
    if (o.levels) cfg.num_levels = *o.levels;
    cfg.validate();
    return cfg;
}

inline int cmd_deblur(const DeblurOptions& o, std::ostream& log = std::cout) {
    const auto t0 = Clock::now();
    const PipelineConfig cfg = load_config(o);
    const fs::path src = frames_dir(o.in, {"blurry"});
    const auto blurry = read_frames(src);
    if (blurry.size() < 2)
        throw UsageError("deblur needs at least 2 input frames, found " + std::to_string(blurry.size()) + " in " +
                         src.string());
    for (const auto& b : blurry)
        if (!(b.size() == blurry.front().size()) || b.channels() != blurry.front().channels())
            throw UsageError("input frames differ in size or channel count");

    for (const char* d : {"latent", "flow", "sigma"}) make_dir(o.out / d);
    const fs::path log_path = o.out / "energy_log.jsonl";
    std::ofstream energy_log(log_path);
    if (!energy_log) throw IoError("cannot write " + log_path.string());
    auto sink = [&](const nlohmann::json& j) {
        const std::string line = j.dump();
        energy_log << line << '\n';
        if (o.verbose) log << line << '\n';
    };

    const DeblurResult res = deblur_sequence(blurry, cfg, sink);
    energy_log.close();

    for (std::size_t i = 0; i < res.latents.size(); ++i) {
        write_png(o.out / "latent" / frame_name(i, ".png"), res.latents[i]);
        write_flo(o.out / "flow" / frame_name(i, "_fwd.flo"), res.fwd[i]);
        write_flo(o.out / "flow" / frame_name(i, "_bwd.flo"), res.bwd[i]);
        write_pfm(o.out / "sigma" / frame_name(i, ".pfm"), res.sigma[i]);
    }
    nlohmann::json report = res.report;
    report["frames"] = res.latents.size();
    write_json(o.out / "report.json", report);

    RunManifest m;
    m.command = "deblur";
    m.config = cfg;
    m.inputs = {{"dir", o.in.string()}, {"frames_dir", src.string()}};
    if (o.config) m.inputs["config"] = o.config->string();
    m.outputs = {{"dir", o.out.string()}, {"report", (o.out / "report.json").string()}};
    m.energy_log = log_path.string();
    m.timings = {{"total_seconds", seconds_since(t0)}, {"pipeline_seconds", res.report.total_seconds}};
    write_json(o.out / "manifest.json", m);
    log << "deblurred " << res.latents.size() << " frames in " << std::fixed << std::setprecision(1)
        << res.report.total_seconds << " s; results in " << o.out.string() << '\n';
    return kOk;
}

// ---------------------------------------------------------------------------
// eval

struct EvalOptions {
    fs::path result;
    fs::path gt;
    std::optional<fs::path> json;
};

struct FrameMetrics {
    double psnr = 0.0;
    double ssim = 0.0;
    std::optional<double> epe;
};

struct EvalSummary {
    std::vector<FrameMetrics> frames;
    double mean_psnr = 0.0;
    double mean_ssim = 0.0;
    std::optional<double> mean_epe;
};

inline void to_json(nlohmann::json& j, const EvalSummary& s) {
    j = nlohmann::json::object();
    auto& fr = j["frames"] = nlohmann::json::array();
    for (std::size_t i = 0; i < s.frames.size(); ++i) {
        nlohmann::json f{{"frame", i}, {"psnr", s.frames[i].psnr}, {"ssim", s.frames[i].ssim}};
        if (s.frames[i].epe) f["epe"] = *s.frames[i].epe;
        fr.push_back(f);
    }
    j["mean_psnr"] = s.mean_psnr;
    j["mean_ssim"] = s.mean_ssim;
    if (s.mean_epe) j["mean_epe"] = *s.mean_epe;
}

/// Mean EPE of the estimated flows that point at an existing frame.
inline std::optional<double> frame_epe(const fs::path& result_flow, const fs::path& gt_flow, std::size_t i,
                                       std::size_t count) {
    double total = 0.0;
    int n = 0;
    auto add = [&](const char* suffix) {
        const auto r = result_flow / frame_name(i, suffix), g = gt_flow / frame_name(i, suffix);
        if (!fs::exists(r) || !fs::exists(g)) return;
        total += epe(read_flo(r), read_flo(g));
        ++n;
    };
    if (i + 1 < count) add("_fwd.flo");
    if (i > 0) add("_bwd.flo");
    if (n == 0) return std::nullopt;
    return total / n;
}

/// Scores `result` (a deblur output, a dataset or a plain PNG directory)
/// against `gt` (a dataset or a plain PNG directory). EPE is reported when
/// the result is a deblur output and both sides carry flow files.
inline EvalSummary evaluate(const fs::path& result, const fs::path& gt) {
    const fs::path res_dir = frames_dir(result, {"latent", "blurry"});
    const fs::path gt_dir = frames_dir(gt, {"sharp"});
    const auto res_files = list_pngs(res_dir), gt_files = list_pngs(gt_dir);
    if (res_files.size() != gt_files.size())
        throw UsageError("frame count mismatch: " + std::to_string(res_files.size()) + " result vs " +
                         std::to_string(gt_files.size()) + " ground truth");
    if (res_files.empty()) throw UsageError("no frames found in " + res_dir.string());
    const bool with_flow = fs::is_directory(result / "latent") && fs::is_directory(result / "flow") &&
                           fs::is_directory(gt / "flow");
    EvalSummary s;
    double epe_total = 0.0;
    int epe_count = 0;
    for (std::size_t i = 0; i < res_files.size(); ++i) {
        const Image a = read_png(res_files[i]), b = read_png(gt_files[i]);
        if (!(a.size() == b.size()) || a.channels() != b.channels())
            throw UsageError("frame " + std::to_string(i) + ": size mismatch");
        FrameMetrics m{psnr(a, b), ssim(a, b), std::nullopt};
        if (with_flow) m.epe = frame_epe(result / "flow", gt / "flow", i, res_files.size());
        if (m.epe) {
            epe_total += *m.epe;
            ++epe_count;
        }
        s.mean_psnr += m.psnr;
        s.mean_ssim += m.ssim;
        s.frames.push_back(m);
    }
    s.mean_psnr /= static_cast<double>(s.frames.size());
    s.mean_ssim /= static_cast<double>(s.frames.size());
    if (epe_count > 0) s.mean_epe = epe_total / epe_count;
    return s;
}

inline void print_table(const EvalSummary& s, std::ostream& out) {
    const bool epe_col = s.mean_epe.has_value();
    out << std::left << std::setw(8) << "frame" << std::right << std::setw(10) << "PSNR" << std::setw(10) << "SSIM";
    if (epe_col) out << std::setw(10) << "EPE";
    out << '\n' << std::fixed;
    auto row = [&](const std::string& label, double p, double q, std::optional<double> e) {
        out << std::left << std::setw(8) << label << std::right << std::setprecision(3) << std::setw(10) << p
            << std::setprecision(4) << std::setw(10) << q;
        if (epe_col) {
            if (e)
                out << std::setprecision(3) << std::setw(10) << *e;
            else
                out << std::setw(10) << "-";
        }
        out << '\n';
    };
    for (std::size_t i = 0; i < s.frames.size(); ++i)
        row(std::to_string(i), s.frames[i].psnr, s.frames[i].ssim, s.frames[i].epe);
    row("mean", s.mean_psnr, s.mean_ssim, s.mean_epe);
    out.unsetf(std::ios::floatfield);
}

inline int cmd_eval(const EvalOptions& o, std::ostream& log = std::cout) {
    const auto t0 = Clock::now();
    const EvalSummary s = evaluate(o.result, o.gt);
    print_table(s, log);
    if (o.json) {
        RunManifest m;
        m.command = "eval";
        m.config = nlohmann::json::object();
        m.inputs = {{"result", o.result.string()}, {"gt", o.gt.string()}};
        m.outputs = {{"json", o.json->string()}};
        m.timings = {{"total_seconds", seconds_since(t0)}};
        nlohmann::json j = s;
        j["manifest"] = m;
        write_json(*o.json, j);
    }
    return kOk;
}

}  // namespace vardeblur::cli
