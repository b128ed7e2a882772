#pragma once

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "regionroute/ablation.hpp"
#include "regionroute/gradcheck.hpp"
#include "regionroute/metrics.hpp"
#include "regionroute/trainer.hpp"

namespace rr {

namespace cli_detail {

inline std::vector<int> parse_int_list(const std::string& s) {
    std::vector<int> out;
    std::istringstream iss(s);
    std::string tok;
    while (std::getline(iss, tok, ','))
        if (!tok.empty()) out.push_back(std::stoi(tok));
    return out;
}

inline TrainConfig make_train_config(const std::string& config_path, uint64_t seed, bool seed_set,
                                     int steps, int threads) {
    TrainConfig cfg;
    if (!config_path.empty()) cfg = load_train_config(config_path);
    if (seed_set) cfg.seed = seed;
    if (steps >= 0) cfg.total_steps = steps;
    if (threads > 0) cfg.threads = threads;
    cfg.validate();
    return cfg;
}

// Editor used by eval: the trained sampler, the untouched context, or the
// procedural ground-truth compositor.
inline EditorFn make_editor(const std::string& kind, std::shared_ptr<Model<float>> model,
                            int steps, uint64_t seed) {
    if (kind == "identity")
        return [](const LoadedSample& s, const SampleRecord&) { return s.context; };
    if (kind == "oracle") {
        return [](const LoadedSample& s, const SampleRecord& rec) {
            const auto styles = default_styles();
            return composite_pseudo_gt(
                s.context, apply_style(s.context, styles[static_cast<size_t>(rec.style_id)]),
                s.mask, 0);
        };
    }
    if (kind == "model") {
        if (!model) throw ConfigError("--ckpt is required for the model editor");
        auto counter = std::make_shared<uint64_t>(0);
        return [model, steps, seed, counter](const LoadedSample& s, const SampleRecord&) {
            return model->sample_edit(s.context, s.prompt, steps,
                                      derive_seed(seed, 0xED17 + (*counter)++));
        };
    }
    throw ConfigError("unknown editor: " + kind);
}

}  // namespace cli_detail

inline int run_cli(const std::vector<std::string>& args) {
    CLI::App app{"regionroute: localized style transfer with attention supervision"};
    app.require_subcommand(1);

    // --- synth ---
    auto* synth = app.add_subcommand("synth", "generate a procedural dataset");
    DatasetConfig dcfg;
    synth->add_option("--out", dcfg.out_dir, "output directory")->required();
    synth->add_option("--scenes", dcfg.scenes, "number of scenes");
    synth->add_option("--heldout", dcfg.heldout_scenes, "trailing scenes held out");
    synth->add_option("--styles", dcfg.num_styles, "number of styles (1-4)");
    synth->add_option("--seed", dcfg.seed, "base seed");
    synth->add_option("--canvas", dcfg.canvas, "canvas side in pixels");
    synth->add_option("--patch", dcfg.patch, "patch side in pixels");
    synth->add_option("--feather", dcfg.feather_px, "mask feather band in pixels");

    // Shared train-style options.
    std::string config_path, data_path, out_dir, ckpt_path;
    uint64_t seed = 0;
    bool seed_set = false;
    int steps_override = -1, threads = 0;
    auto add_train_opts = [&](CLI::App* c) {
        c->add_option("--data", data_path, "dataset manifest.json")->required();
        c->add_option("--out", out_dir, "output directory")->required();
        c->add_option("--config", config_path, "key=value config file");
        c->add_option("--seed", seed, "base seed override")->each([&](const std::string&) {
            seed_set = true;
        });
        c->add_option("--steps", steps_override, "optimizer step count override");
        c->add_option("--threads", threads, "worker threads");
    };

    // --- train ---
    auto* train = app.add_subcommand("train", "train per-style adapters");
    add_train_opts(train);

    // --- eval ---
    auto* eval = app.add_subcommand("eval", "score edits on the held-out split");
    std::string editor_kind = "model";
    int sample_steps = 10;
    double pad_fraction = 0.05;
    uint64_t eval_seed = 0;
    eval->add_option("--data", data_path, "dataset manifest.json")->required();
    eval->add_option("--out", out_dir, "report directory")->required();
    eval->add_option("--ckpt", ckpt_path, "checkpoint to evaluate");
    eval->add_option("--editor", editor_kind, "model | identity | oracle");
    eval->add_option("--sample-steps", sample_steps, "sampler steps");
    eval->add_option("--pad", pad_fraction, "crop pad fraction");
    eval->add_option("--seed", eval_seed, "sampler seed");

    // --- attn-dump ---
    auto* dump = app.add_subcommand("attn-dump", "export attention maps along a sampling run");
    int dump_index = 0, dump_total = 0;
    std::string dump_at = "5,10,15,20,25";
    uint64_t dump_seed = 0;
    dump->add_option("--data", data_path, "dataset manifest.json")->required();
    dump->add_option("--out", out_dir, "output directory")->required();
    dump->add_option("--ckpt", ckpt_path, "checkpoint")->required();
    dump->add_option("--index", dump_index, "sample index in the manifest");
    dump->add_option("--steps", dump_at, "comma-separated sampler steps to export");
    dump->add_option("--total-steps", dump_total, "total sampler steps (default: max of --steps)");
    dump->add_option("--seed", dump_seed, "sampler seed");

    // --- gradcheck ---
    auto* gc = app.add_subcommand("gradcheck", "finite-difference gradient verification");
    uint64_t gc_seed = 11;
    double gc_h = 1e-6, gc_tol = 1e-5;
    int gc_trials = 100;
    bool gc_e2e = false;
    gc->add_option("--seed", gc_seed, "seed");
    gc->add_option("--fd-step", gc_h, "finite-difference step");
    gc->add_option("--tol", gc_tol, "max relative error tolerance");
    gc->add_option("--trials", gc_trials, "random maps per loss");
    gc->add_flag("--end-to-end", gc_e2e, "also verify the model gradient directionally");

    // --- ablate ---
    auto* ablate = app.add_subcommand("ablate", "run the fixed ablation study");
    add_train_opts(ablate);
    int ablate_sample_steps = 5;
    ablate->add_option("--sample-steps", ablate_sample_steps, "sampler steps for arm evaluation");

    std::vector<const char*> argv;
    argv.push_back("regionroute");
    for (const auto& a : args) argv.push_back(a.c_str());
    try {
        app.parse(static_cast<int>(argv.size()), argv.data());
    } catch (const CLI::CallForHelp& e) {
        return app.exit(e);
    } catch (const CLI::ParseError& e) {
        app.exit(e);
        return 2;
    }

    namespace fs = std::filesystem;
    try {
        if (synth->parsed()) {
            const auto manifest = build_dataset(dcfg);
            std::cout << "wrote " << manifest.samples.size() << " samples to " << dcfg.out_dir
                      << "\n";
            return 0;
        }

        if (train->parsed()) {
            const auto manifest = load_manifest(data_path);
            const auto cfg =
                cli_detail::make_train_config(config_path, seed, seed_set, steps_override, threads);
            const auto art = run_training<float>(manifest, cfg, out_dir);
            std::cout << "checkpoint " << art.checkpoint_path << "\nlog " << art.log_path << "\n";
            return 0;
        }

        if (eval->parsed()) {
            const auto manifest = load_manifest(data_path);
            std::shared_ptr<Model<float>> model;
            if (!ckpt_path.empty())
                model = std::make_shared<Model<float>>(load_checkpoint<float>(ckpt_path));
            const auto editor =
                cli_detail::make_editor(editor_kind, model, sample_steps, eval_seed);
            const StatEmbedder embedder;
            const PerceptualFeatureBank bank;
            const auto report =
                rse_report(manifest, editor, embedder, bank, pad_fraction, data_path);
            std::error_code ec;
            fs::create_directories(out_dir, ec);
            if (ec) throw IoError("cannot create output directory: " + out_dir);
            std::ofstream jf((fs::path(out_dir) / "rse_report.json").string());
            jf << rse_report_json(report).dump(2) << "\n";
            write_rse_csv(report, (fs::path(out_dir) / "rse_report.csv").string());
            std::printf("rsm %.4f +/- %.4f  lpips_bg %.5f +/- %.5f  mse_bg %.6f +/- %.6f  (n=%zu)\n",
                        report.mean_rsm, report.std_rsm, report.mean_lpips, report.std_lpips,
                        report.mean_mse, report.std_mse, report.rows.size());
            return 0;
        }

        if (dump->parsed()) {
            const auto manifest = load_manifest(data_path);
            if (dump_index < 0 || dump_index >= static_cast<int>(manifest.samples.size()))
                throw ConfigError("--index out of range");
            const auto& rec = manifest.samples[static_cast<size_t>(dump_index)];
            const LoadedSample s = load_sample(manifest, rec);
            Model<float> model = load_checkpoint<float>(ckpt_path);
            const auto at = cli_detail::parse_int_list(dump_at);
            if (at.empty()) throw ConfigError("--steps list is empty");
            const int dump_steps =
                dump_total > 0 ? dump_total : *std::max_element(at.begin(), at.end());

            std::error_code ec;
            fs::create_directories(out_dir, ec);
            if (ec) throw IoError("cannot create output directory: " + out_dir);
            write_ppm((fs::path(out_dir) / "context.ppm").string(), s.context);
            write_pgm((fs::path(out_dir) / "mask.pgm").string(), s.mask);

            const int gh = model.cfg.grid_h(), gw = model.cfg.grid_w();
            const auto layers = model.cfg.effective_supervision_layers();
            const Image edited = model.sample_edit(
                s.context, s.prompt, dump_steps, dump_seed,
                [&](int step, const std::vector<AttentionRecord<float>>& recs,
                    const TokenizedPrompt& tok) {
                    if (std::find(at.begin(), at.end(), step) == at.end()) return;
                    std::vector<int> cols(tok.style_token_indices.size());
                    for (size_t i = 0; i < cols.size(); ++i)
                        cols[i] = 2 * model.cfg.num_image_tokens() + tok.style_token_indices[i];
                    const auto map = aggregate_style_attention(recs, layers, cols, gh, gw);
                    char name[64];
                    std::snprintf(name, sizeof(name), "attn_step_%03d", step);
                    export_attention_map(map,
                                         (fs::path(out_dir) / (std::string(name) + ".pgm")).string(),
                                         (fs::path(out_dir) / (std::string(name) + ".txt")).string());
                    std::cout << "step " << step << " -> " << name << ".pgm\n";
                });
            write_ppm((fs::path(out_dir) / "edited.ppm").string(), edited);
            return 0;
        }

        if (gc->parsed()) {
            const auto rep = run_loss_gradcheck(gc_trials, gc_h, gc_seed);
            std::printf("focus  max rel err %.3e\n", rep.max_rel_focus);
            std::printf("cover  max rel err %.3e\n", rep.max_rel_cover);
            std::printf("total  max rel err %.3e\n", rep.max_rel_total);
            std::printf("objective linearity err %.3e  (%d trials, h=%.1e)\n", rep.linearity_err,
                        rep.trials, rep.h);
            bool ok = rep.max_rel_focus <= gc_tol && rep.max_rel_cover <= gc_tol &&
                      rep.max_rel_total <= gc_tol && rep.linearity_err <= 1e-10;
            if (gc_e2e) {
                const auto e2e = run_model_gradcheck(gc_seed);
                std::printf("model directional max rel err %.3e, grad linearity %.3e\n",
                            e2e.max_rel, e2e.linearity_err);
                ok = ok && e2e.max_rel <= 1e-4 && e2e.linearity_err <= 1e-10;
            }
            std::printf("%s\n", ok ? "PASS" : "FAIL");
            return ok ? 0 : 1;
        }

        if (ablate->parsed()) {
            const auto manifest = load_manifest(data_path);
            const auto base =
                cli_detail::make_train_config(config_path, seed, seed_set, steps_override, threads);
            const auto plan = ablation_plan(base);
            const StatEmbedder embedder;
            const PerceptualFeatureBank bank;
            nlohmann::ordered_json out = nlohmann::ordered_json::array();
            std::printf("%-10s %15s %17s %17s  diff\n", "arm", "RSM", "LPIPS_bg", "MSE_bg");
            for (const auto& arm : plan) {
                const auto m = run_ablation_arm<float>(manifest, arm, base,
                                                       (fs::path(out_dir) / arm.name).string(),
                                                       embedder, bank, ablate_sample_steps,
                                                       base.seed);
                std::string diff;
                for (const auto& [k, v] : m.diff)
                    diff += k + "=" + v.second + " ";
                std::printf("%-10s %7.4f±%6.4f %8.5f±%7.5f %8.5f±%7.5f  %s\n", m.name.c_str(),
                            m.rsm.mean, m.rsm.sd, m.lpips_bg.mean, m.lpips_bg.sd, m.mse_bg.mean,
                            m.mse_bg.sd, diff.c_str());
                nlohmann::ordered_json j;
                j["arm"] = m.name;
                j["diff"] = nlohmann::ordered_json::object();
                for (const auto& [k, v] : m.diff) j["diff"][k] = {{"base", v.first}, {"arm", v.second}};
                j["rsm_mean"] = m.rsm.mean;
                j["rsm_std"] = m.rsm.sd;
                j["lpips_bg_mean"] = m.lpips_bg.mean;
                j["lpips_bg_std"] = m.lpips_bg.sd;
                j["mse_bg_mean"] = m.mse_bg.mean;
                j["mse_bg_std"] = m.mse_bg.sd;
                out.push_back(std::move(j));
            }
            std::error_code ec;
            fs::create_directories(out_dir, ec);
            std::ofstream jf((fs::path(out_dir) / "ablate.json").string());
            jf << out.dump(2) << "\n";
            return 0;
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 1;
}

}  // namespace rr
