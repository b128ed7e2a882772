#pragma once

#include <map>
#include <string>
#include <utility>
#include <vector>

#include "regionroute/metrics.hpp"
#include "regionroute/trainer.hpp"

namespace rr {

// Flat key=value view of a training configuration, matching the config-file
// keys, so arm derivations can be checked as config diffs.
inline std::map<std::string, std::string> config_to_kv(const TrainConfig& c) {
    std::map<std::string, std::string> kv;
    auto put = [&](const char* k, auto v) { kv[k] = std::to_string(v); };
    put("dim", c.dim);
    put("heads", c.heads);
    put("double_blocks", c.double_blocks);
    put("single_blocks", c.single_blocks);
    put("patch", c.patch);
    put("timesteps", c.timesteps);
    put("canvas", c.canvas);
    put("num_styles", c.num_styles);
    put("rank", c.rank);
    put("gamma", c.gamma);
    kv["adapt_double"] = c.adapt_double ? "1" : "0";
    kv["adapt_single"] = c.adapt_single ? "1" : "0";
    put("lambda_focus", c.lambda_focus);
    put("lambda_cover", c.lambda_cover);
    put("tau", c.tau);
    put("alpha", c.alpha);
    put("lr", c.lr);
    kv["lr_schedule"] = c.lr_schedule;
    put("batch", c.batch);
    put("grad_accum", c.grad_accum);
    put("total_steps", c.total_steps);
    put("seed", c.seed);
    std::string layers;
    for (size_t i = 0; i < c.supervision_layers.size(); ++i)
        layers += (i ? "," : "") + std::to_string(c.supervision_layers[i]);
    kv["supervision_layers"] = layers;
    return kv;
}

// key -> (base value, arm value) for keys that differ.
inline std::map<std::string, std::pair<std::string, std::string>> config_diff(
    const TrainConfig& base, const TrainConfig& arm) {
    const auto a = config_to_kv(base), b = config_to_kv(arm);
    std::map<std::string, std::pair<std::string, std::string>> d;
    for (const auto& [k, v] : a)
        if (b.at(k) != v) d[k] = {v, b.at(k)};
    return d;
}

struct AblationArm {
    std::string name;
    TrainConfig config;
};

// The fixed study: the full objective, each attention loss removed, each
// adapter stream removed, and two larger ranks. Every arm differs from the
// base configuration in exactly one key.
inline std::vector<AblationArm> ablation_plan(const TrainConfig& base) {
    std::vector<AblationArm> arms;
    arms.push_back({"full", base});
    {
        TrainConfig c = base;
        c.lambda_cover = 0.0;
        arms.push_back({"no_cover", c});
    }
    {
        TrainConfig c = base;
        c.lambda_focus = 0.0;
        arms.push_back({"no_focus", c});
    }
    {
        TrainConfig c = base;
        c.adapt_double = false;
        arms.push_back({"no_double", c});
    }
    {
        TrainConfig c = base;
        c.adapt_single = false;
        arms.push_back({"no_single", c});
    }
    {
        TrainConfig c = base;
        c.rank = 8;
        arms.push_back({"rank_8", c});
    }
    {
        TrainConfig c = base;
        c.rank = 16;
        arms.push_back({"rank_16", c});
    }
    return arms;
}

struct MeanStd {
    double mean = 0.0, sd = 0.0;
};

inline MeanStd mean_std(const std::vector<double>& v) {
    MeanStd r;
    if (v.empty()) return r;
    for (double x : v) r.mean += x;
    r.mean /= static_cast<double>(v.size());
    for (double x : v) r.sd += (x - r.mean) * (x - r.mean);
    r.sd = std::sqrt(r.sd / static_cast<double>(v.size()));
    return r;
}

struct ArmMetrics {
    std::string name;
    MeanStd rsm, lpips_bg, mse_bg;
    std::map<std::string, std::pair<std::string, std::string>> diff;  // vs the base arm
};

// Trains one arm, edits every held-out sample with the resulting checkpoint
// and reports the three region-style-edit scores in mean/std form.
template <typename T>
ArmMetrics run_ablation_arm(const DatasetManifest& manifest, const AblationArm& arm,
                            const TrainConfig& base, const std::string& out_dir,
                            const Embedder& embedder, const PerceptualFeatureBank& bank,
                            int sample_steps = 5, uint64_t eval_seed = 0) {
    ArmMetrics m;
    m.name = arm.name;
    m.diff = config_diff(base, arm.config);
    const auto artifacts = run_training<T>(manifest, arm.config, out_dir);
    auto model = std::make_shared<Model<T>>(load_checkpoint<T>(artifacts.checkpoint_path));

    auto counter = std::make_shared<uint64_t>(0);
    const EditorFn editor = [model, sample_steps, eval_seed, counter](const LoadedSample& s,
                                                                     const SampleRecord&) {
        return model->sample_edit(s.context, s.prompt, sample_steps,
                                  derive_seed(eval_seed, 0xAB1A + (*counter)++));
    };
    const auto report = rse_report(manifest, editor, embedder, bank, 0.05, arm.name);
    m.rsm = {report.mean_rsm, report.std_rsm};
    m.lpips_bg = {report.mean_lpips, report.std_lpips};
    m.mse_bg = {report.mean_mse, report.std_mse};

    std::ofstream jf((std::filesystem::path(out_dir) / "rse_report.json").string());
    jf << rse_report_json(report).dump(2) << "\n";
    return m;
}

}  // namespace rr
