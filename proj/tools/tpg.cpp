#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "tpg/pipeline.hpp"

namespace {

struct CommonOpts {
    std::string config_path;
    std::string out_dir = "runs/default";
    uint64_t seed = 0;
    bool seed_set = false;
    std::vector<std::string> ablate;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "JSON config file");
    cmd->add_option("--out", o.out_dir, "run directory for datasets, checkpoints, logs");
    cmd->add_option("--seed", o.seed, "override the config seed")->each([&](const std::string&) {
        o.seed_set = true;
    });
    cmd->add_option("--ablate", o.ablate,
                    "ablation switches (no_ldn, no_content, no_structure, no_defect, "
                    "no_alignment, no_cls, no_std)")
        ->delimiter(',');
}

tpg::RunConfig resolve_config(const CommonOpts& o) {
    tpg::RunConfig cfg;
    if (!o.config_path.empty()) cfg = tpg::load_config(o.config_path);
    if (o.seed_set) {
        cfg.seed = o.seed;
        cfg.data.seed = o.seed;
    }
    for (const auto& name : o.ablate) cfg.ablate.set(name);
    cfg.validate();
    return cfg;
}

void echo_config(const tpg::RunConfig& cfg, const std::string& out_dir) {
    nlohmann::json j = tpg::to_json(cfg);
    j["out"] = out_dir;
    std::cout << j.dump(2) << "\n";
}

void write_json_report(const std::string& path, const nlohmann::json& j) {
    std::filesystem::create_directories(std::filesystem::path(path).parent_path());
    std::ofstream f(path);
    TPG_REQUIRE(f.good(), tpg::errc::io, "cannot write report: " + path);
    f << j.dump(2) << "\n";
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"textile pattern generation pipeline"};
    app.require_subcommand(1);

    CommonOpts gen_o, tl_o, ts_o, inf_o, ev_o, an_o;
    bool tl_resume = false, ts_resume = false;
    std::string inf_clothing, inf_mask, inf_output = "pattern.png";
    uint64_t inf_seed = 0;
    bool inf_seed_set = false;
    std::string ev_manifest, an_manifest;
    std::vector<std::string> an_ckpts;

    auto* gen = app.add_subcommand("gen-data", "synthesize a paired clothing/pattern dataset");
    add_common(gen, gen_o);

    auto* tl = app.add_subcommand("train-ldn", "train the stage-I feature networks");
    add_common(tl, tl_o);
    tl->add_flag("--resume", tl_resume, "continue from the checkpoint in the run directory");

    auto* ts = app.add_subcommand("train-sldm", "train the stage-II latent diffusion model");
    add_common(ts, ts_o);
    ts->add_flag("--resume", ts_resume, "continue from the checkpoint in the run directory");

    auto* inf = app.add_subcommand("infer", "generate a flat pattern from one clothing image");
    add_common(inf, inf_o);
    inf->add_option("--clothing", inf_clothing, "input clothing PNG")->required();
    inf->add_option("--mask", inf_mask, "garment mask PNG; full coverage when omitted");
    inf->add_option("--output", inf_output, "output pattern PNG");
    inf->add_option("--gen-seed", inf_seed, "sampling seed")->each([&](const std::string&) {
        inf_seed_set = true;
    });

    auto* ev = app.add_subcommand("evaluate", "score generated patterns over a manifest");
    add_common(ev, ev_o);
    ev->add_option("--manifest", ev_manifest, "evaluation manifest (defaults to the run dataset)");

    auto* an = app.add_subcommand("analyze-features",
                                  "report feature-space distances for stage-I checkpoints");
    add_common(an, an_o);
    an->add_option("--manifest", an_manifest, "manifest with labeled pairs (defaults to the run "
                                              "dataset)");
    an->add_option("--checkpoint", an_ckpts, "stage-I checkpoints to analyze (repeatable)");

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            tpg::RunConfig cfg = resolve_config(gen_o);
            echo_config(cfg, gen_o.out_dir);
            tpg::RunPaths paths{gen_o.out_dir};
            std::string manifest = tpg::build_dataset(cfg.data, paths.dataset_dir());
            std::cout << "manifest: " << manifest << "\n";
        } else if (tl->parsed()) {
            tpg::RunConfig cfg = resolve_config(tl_o);
            echo_config(cfg, tl_o.out_dir);
            tpg::RunPaths paths{tl_o.out_dir};
            tpg::train_ldn(cfg, paths, tl_resume);
            std::cout << "checkpoint: " << paths.ldn_ckpt() << "\n";
        } else if (ts->parsed()) {
            tpg::RunConfig cfg = resolve_config(ts_o);
            echo_config(cfg, ts_o.out_dir);
            tpg::RunPaths paths{ts_o.out_dir};
            tpg::train_sldm(cfg, paths, ts_resume);
            std::cout << "checkpoint: " << paths.sldm_ckpt() << "\n";
        } else if (inf->parsed()) {
            tpg::RunConfig cfg = resolve_config(inf_o);
            echo_config(cfg, inf_o.out_dir);
            tpg::RunPaths paths{inf_o.out_dir};
            tpg::LdnModel ldn = tpg::load_ldn(cfg, paths.ldn_ckpt());
            tpg::DenoiserNet net = tpg::load_sldm(cfg, paths.sldm_ckpt());
            tpg::NoiseSchedule sched(cfg.sldm.T, cfg.sldm.beta_start, cfg.sldm.beta_end);
            tpg::Tensor clothing = tpg::read_png(inf_clothing);
            tpg::Tensor mask;
            if (!inf_mask.empty()) {
                tpg::Tensor mrgb = tpg::read_png(inf_mask);
                mask = tpg::Tensor({mrgb.shape[0], mrgb.shape[1]});
                for (int y = 0; y < mrgb.shape[0]; ++y)
                    for (int x = 0; x < mrgb.shape[1]; ++x)
                        mask.at(y, x) = mrgb.at(y, x, 0) >= 128.0 / 255.0 ? 1.0 : 0.0;
            } else {
                mask = tpg::Tensor({clothing.shape[0], clothing.shape[1]});
                for (auto& v : mask.v) v = 1.0;
            }
            uint64_t s = inf_seed_set ? inf_seed : cfg.seed;
            tpg::Tensor pattern = tpg::infer_one(clothing, mask, ldn, net, sched, cfg.sampler,
                                                 cfg.ablate, s);
            tpg::write_png(inf_output, pattern);
            std::cout << "pattern: " << inf_output << "\n";
        } else if (ev->parsed()) {
            tpg::RunConfig cfg = resolve_config(ev_o);
            echo_config(cfg, ev_o.out_dir);
            tpg::RunPaths paths{ev_o.out_dir};
            std::string manifest = ev_manifest.empty() ? paths.manifest() : ev_manifest;
            nlohmann::json report = tpg::run_evaluation(cfg, manifest, paths);
            std::string out = paths.report_dir() + "/evaluation.json";
            write_json_report(out, report);
            std::cout << report["means"].dump(2) << "\n";
            std::cout << "report: " << out << "\n";
        } else if (an->parsed()) {
            tpg::RunConfig cfg = resolve_config(an_o);
            echo_config(cfg, an_o.out_dir);
            tpg::RunPaths paths{an_o.out_dir};
            std::string manifest = an_manifest.empty() ? paths.manifest() : an_manifest;
            std::vector<std::string> ckpts = an_ckpts;
            if (ckpts.empty()) ckpts.push_back(paths.ldn_ckpt());
            nlohmann::json report = tpg::analyze_features(cfg, manifest, ckpts);
            std::string out = paths.report_dir() + "/features.json";
            write_json_report(out, report);
            std::cout << "report: " << out << "\n";
        }
    } catch (const tpg::error& e) {
        std::fprintf(stderr, "TPG_ERROR code=%s msg=\"%s\"\n", tpg::errc_name(e.code),
                     e.what());
        return 1;
    } catch (const std::exception& e) {
        std::fprintf(stderr, "TPG_ERROR code=internal msg=\"%s\"\n", e.what());
        return 1;
    }
    return 0;
}
