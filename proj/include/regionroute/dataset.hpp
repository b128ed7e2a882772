#pragma once

#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regionroute/image.hpp"
#include "regionroute/scenes.hpp"
#include "regionroute/styles.hpp"

namespace rr {

// out = stylized inside the mask, original outside. With feather_px > 0 a
// linear alpha ramp is applied over the boundary band; feather 0 is an exact
// hard composite.
inline Image composite_pseudo_gt(const Image& original, const Image& stylized, const Mask& mask,
                                 int feather_px = 0) {
    if (!original.same_shape(stylized) || original.h != mask.h || original.w != mask.w)
        throw ConfigError("composite_pseudo_gt: shape mismatch");
    if (feather_px < 0) throw ConfigError("composite_pseudo_gt: feather_px must be >= 0");

    Image out(original.h, original.w, original.c);
    if (feather_px == 0) {
        for (int y = 0; y < original.h; ++y)
            for (int x = 0; x < original.w; ++x)
                for (int ch = 0; ch < original.c; ++ch)
                    out.at(y, x, ch) = mask.at(y, x) ? stylized.at(y, x, ch) : original.at(y, x, ch);
        return out;
    }

    // Signed Chebyshev distance to the mask boundary, scanned over a local
    // window (feather bands are small).
    const int f = feather_px;
    for (int y = 0; y < original.h; ++y) {
        for (int x = 0; x < original.w; ++x) {
            const bool inside = mask.at(y, x) != 0;
            int dist = f + 1;  // distance to the nearest opposite pixel
            for (int dy = -f; dy <= f && dist > 0; ++dy) {
                for (int dx = -f; dx <= f; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= original.h || xx < 0 || xx >= original.w) continue;
                    if ((mask.at(yy, xx) != 0) != inside) {
                        const int d = std::max(std::abs(dy), std::abs(dx));
                        dist = std::min(dist, d);
                    }
                }
            }
            const double signed_d = inside ? static_cast<double>(dist) : -static_cast<double>(dist);
            const double alpha = clamp01(0.5 + signed_d / (2.0 * f));
            for (int ch = 0; ch < original.c; ++ch)
                out.at(y, x, ch) =
                    original.at(y, x, ch) * (1.0 - alpha) + stylized.at(y, x, ch) * alpha;
        }
    }
    return out;
}

// Area (block-average) pooling. Preserves total mask mass exactly for
// block-aligned inputs.
inline SoftMask downsample_mask(const Mask& mask, int h, int w) {
    if (h <= 0 || w <= 0 || h > mask.h || w > mask.w || mask.h % h != 0 || mask.w % w != 0)
        throw ConfigError("downsample_mask: output shape must evenly divide the input");
    const int by = mask.h / h, bx = mask.w / w;
    const double area = static_cast<double>(by) * bx;
    SoftMask out(h, w);
    for (int i = 0; i < h; ++i) {
        for (int j = 0; j < w; ++j) {
            int cnt = 0;
            for (int y = i * by; y < (i + 1) * by; ++y)
                for (int x = j * bx; x < (j + 1) * bx; ++x) cnt += mask.at(y, x) ? 1 : 0;
            out.at(i, j) = cnt / area;
        }
    }
    return out;
}

struct SampleRecord {
    std::string context_path;
    std::string target_path;
    std::string mask_path;
    int style_id = 0;
    std::string label;
    std::string prompt;
    std::string split;  // train | heldout
};

struct DatasetManifest {
    std::string root;
    int canvas_h = 64, canvas_w = 64, patch = 4;
    std::vector<std::string> style_names;
    std::vector<SampleRecord> samples;
};

struct DatasetConfig {
    std::string out_dir;
    int scenes = 50;
    int num_styles = 4;
    uint64_t seed = 0;
    int canvas = 64;
    int patch = 4;
    int feather_px = 0;
    int heldout_scenes = 0;   // trailing scene indices held out
    int objects_min = 1;      // objects per scene drawn uniformly from
    int objects_max = 3;      // [objects_min, objects_max]
};

inline nlohmann::ordered_json manifest_to_json(const DatasetManifest& m) {
    nlohmann::ordered_json j;
    j["canvas_h"] = m.canvas_h;
    j["canvas_w"] = m.canvas_w;
    j["patch"] = m.patch;
    j["styles"] = m.style_names;
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& s : m.samples) {
        nlohmann::ordered_json r;
        r["context"] = s.context_path;
        r["target"] = s.target_path;
        r["mask"] = s.mask_path;
        r["style_id"] = s.style_id;
        r["label"] = s.label;
        r["prompt"] = s.prompt;
        r["split"] = s.split;
        j["samples"].push_back(std::move(r));
    }
    return j;
}

inline DatasetManifest load_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open manifest: " + path);
    nlohmann::json j;
    f >> j;
    DatasetManifest m;
    m.root = std::filesystem::path(path).parent_path().string();
    m.canvas_h = j.at("canvas_h");
    m.canvas_w = j.at("canvas_w");
    m.patch = j.at("patch");
    m.style_names = j.at("styles").get<std::vector<std::string>>();
    for (const auto& r : j.at("samples")) {
        SampleRecord s;
        s.context_path = r.at("context");
        s.target_path = r.at("target");
        s.mask_path = r.at("mask");
        s.style_id = r.at("style_id");
        s.label = r.at("label");
        s.prompt = r.at("prompt");
        s.split = r.at("split");
        m.samples.push_back(std::move(s));
    }
    return m;
}

inline std::string make_prompt(const std::string& label, const std::string& style_name) {
    return "make the " + label + " " + style_name + " style";
}

// Emits scenes x styles samples plus a JSON manifest. One target object is
// chosen uniformly per scene from the config seed.
inline DatasetManifest build_dataset(const DatasetConfig& cfg) {
    namespace fs = std::filesystem;
    if (cfg.num_styles < 1 || cfg.num_styles > 4)
        throw ConfigError("num_styles must be in [1,4]");
    if (cfg.heldout_scenes < 0 || cfg.heldout_scenes >= cfg.scenes + 1)
        throw ConfigError("heldout_scenes out of range");
    if (cfg.objects_min < 1 || cfg.objects_min > cfg.objects_max || cfg.objects_max > 4)
        throw ConfigError("objects_min/objects_max must satisfy 1 <= min <= max <= 4");

    std::error_code ec;
    fs::create_directories(cfg.out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + cfg.out_dir);

    const auto styles = default_styles();
    DatasetManifest manifest;
    manifest.root = cfg.out_dir;
    manifest.canvas_h = manifest.canvas_w = cfg.canvas;
    manifest.patch = cfg.patch;
    for (int s = 0; s < cfg.num_styles; ++s) manifest.style_names.push_back(styles[s].name);

    for (int i = 0; i < cfg.scenes; ++i) {
        Rng rng(derive_seed(cfg.seed, static_cast<uint64_t>(i)));
        SceneSpec spec;
        spec.seed = derive_seed(cfg.seed, 0x10000ULL + static_cast<uint64_t>(i));
        spec.height = spec.width = cfg.canvas;
        spec.patch = cfg.patch;
        spec.num_objects =
            cfg.objects_min +
            static_cast<int>(rng() % static_cast<uint64_t>(cfg.objects_max - cfg.objects_min + 1));
        spec.background = static_cast<BackgroundKind>(rng() % 3);
        auto [context, objects] = gen_scene(spec);

        const auto& [label, mask] = objects[rng() % objects.size()];
        const std::string split = i >= cfg.scenes - cfg.heldout_scenes ? "heldout" : "train";

        for (int s = 0; s < cfg.num_styles; ++s) {
            const Image stylized = apply_style(context, styles[s]);
            const Image target = composite_pseudo_gt(context, stylized, mask, cfg.feather_px);

            char stem[64];
            std::snprintf(stem, sizeof(stem), "s%04d_st%d", i, s);
            SampleRecord rec;
            rec.context_path = std::string(stem) + "_context.ppm";
            rec.target_path = std::string(stem) + "_target.ppm";
            rec.mask_path = std::string(stem) + "_mask.pgm";
            rec.style_id = s;
            rec.label = label;
            rec.prompt = make_prompt(label, styles[s].name);
            rec.split = split;

            write_ppm((fs::path(cfg.out_dir) / rec.context_path).string(), context);
            write_ppm((fs::path(cfg.out_dir) / rec.target_path).string(), target);
            write_pgm((fs::path(cfg.out_dir) / rec.mask_path).string(), mask);
            manifest.samples.push_back(std::move(rec));
        }
    }

    const std::string mpath = (fs::path(cfg.out_dir) / "manifest.json").string();
    std::ofstream f(mpath);
    if (!f) throw IoError("cannot write manifest: " + mpath);
    f << manifest_to_json(manifest).dump(2) << "\n";
    return manifest;
}

// In-memory sample loaded from a manifest row.
struct LoadedSample {
    Image context;
    Image target;
    Mask mask;
    int style_id = 0;
    std::string prompt;
};

inline LoadedSample load_sample(const DatasetManifest& m, const SampleRecord& rec) {
    namespace fs = std::filesystem;
    LoadedSample s;
    s.context = read_ppm((fs::path(m.root) / rec.context_path).string());
    s.target = read_ppm((fs::path(m.root) / rec.target_path).string());
    s.mask = read_pgm_mask((fs::path(m.root) / rec.mask_path).string());
    s.style_id = rec.style_id;
    s.prompt = rec.prompt;
    return s;
}

}  // namespace rr
