// vardeblur: synthesize blurred datasets, deblur sequences, score results.

#include <iostream>

#include <CLI11.hpp>

#include "vardeblur/cli.hpp"

namespace cli = vardeblur::cli;

int main(int argc, char** argv) {
    CLI::App app{"Joint video deblurring with motion and defocus blur"};
    app.set_version_flag("--version", vardeblur::kVersion);
    app.require_subcommand(1);

    cli::SynthOptions synth;
    auto* s = app.add_subcommand("synth", "Render a scene spec and average subframes into blur pairs");
    s->add_option("--spec", synth.spec, "Scene spec JSON")->required();
    s->add_option("--k", synth.k, "Subframes per blurry frame (odd)")->required();
    s->add_option("--pre-blur", synth.pre_blur, "Gaussian sigma applied to subframes before averaging")
        ->default_val(0.0);
    s->add_option("--out", synth.out, "Output dataset directory")->required();

    cli::DeblurOptions deblur;
    std::string config_path;
    int levels = 0;
    auto* d = app.add_subcommand("deblur", "Jointly estimate latent frames, flows and defocus maps");
    d->add_option("--in", deblur.in, "Input directory (a dataset or a folder of PNG frames)")->required();
    auto* cfg_opt = d->add_option("--config", config_path, "Pipeline config JSON; missing keys use defaults");
    d->add_option("--out", deblur.out, "Output directory")->required();
    d->add_flag("--no-defocus", deblur.no_defocus, "Disable the defocus blur model");
    auto* lv_opt = d->add_option("--levels", levels, "Override the number of pyramid levels");
    d->add_flag("--verbose", deblur.verbose, "Stream per-step energies as JSON lines");

    cli::EvalOptions eval;
    std::string json_path;
    auto* e = app.add_subcommand("eval", "PSNR/SSIM (and EPE) of results against ground truth");
    e->add_option("--result", eval.result, "Deblur output, dataset or PNG directory")->required();
    e->add_option("--gt", eval.gt, "Ground-truth dataset or PNG directory")->required();
    auto* json_opt = e->add_option("--json", json_path, "Write metrics as JSON");

    try {
        app.parse(argc, argv);
    } catch (const CLI::CallForHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForAllHelp& ex) {
        return app.exit(ex);
    } catch (const CLI::CallForVersion& ex) {
        return app.exit(ex);
    } catch (const CLI::ParseError& ex) {
        app.exit(ex);
        return cli::kUsage;
    }

    try {
        if (*s) return cli::cmd_synth(synth);
        if (*d) {
            if (*cfg_opt) deblur.config = config_path;
            if (*lv_opt) deblur.levels = levels;
            return cli::cmd_deblur(deblur);
        }
        if (*json_opt) eval.json = json_path;
        return cli::cmd_eval(eval);
    } catch (const std::exception& ex) {
        std::cerr << "error: " << ex.what() << '\n';
        return cli::exit_code_for(ex);
    }
}
