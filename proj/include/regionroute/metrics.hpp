#pragma once

#include <algorithm>
#include <cmath>
#include <fstream>
#include <functional>
#include <map>
#include <memory>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regionroute/dataset.hpp"
#include "regionroute/image.hpp"
#include "regionroute/scenes.hpp"
#include "regionroute/styles.hpp"

namespace rr {

// Inclusive pixel rectangle.
struct Rect {
    int r0 = 0, r1 = 0, c0 = 0, c1 = 0;

    bool contains(int y, int x) const { return y >= r0 && y <= r1 && x >= c0 && x <= c1; }
    int height() const { return r1 - r0 + 1; }
    int width() const { return c1 - c0 + 1; }
};

// Tight bounding box of the mask expanded by a fixed pixel pad, clipped.
inline Rect bbox_from_mask(const Mask& mask, int pad_px) {
    int r0 = mask.h, r1 = -1, c0 = mask.w, c1 = -1;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x)
            if (mask.at(y, x)) {
                r0 = std::min(r0, y);
                r1 = std::max(r1, y);
                c0 = std::min(c0, x);
                c1 = std::max(c1, x);
            }
    if (r1 < 0) throw ConfigError("bbox_from_mask: empty mask");
    Rect r;
    r.r0 = std::max(0, r0 - pad_px);
    r.r1 = std::min(mask.h - 1, r1 + pad_px);
    r.c0 = std::max(0, c0 - pad_px);
    r.c1 = std::min(mask.w - 1, c1 + pad_px);
    return r;
}

// Default padding policy: pad = max(4 px, pad_fraction * box side), per axis.
inline Rect padded_bbox(const Mask& mask, double pad_fraction = 0.05) {
    const Rect tight = bbox_from_mask(mask, 0);
    const int pad_r = std::max(4, static_cast<int>(std::lround(pad_fraction * tight.height())));
    const int pad_c = std::max(4, static_cast<int>(std::lround(pad_fraction * tight.width())));
    Rect r;
    r.r0 = std::max(0, tight.r0 - pad_r);
    r.r1 = std::min(mask.h - 1, tight.r1 + pad_r);
    r.c0 = std::max(0, tight.c0 - pad_c);
    r.c1 = std::min(mask.w - 1, tight.c1 + pad_c);
    return r;
}

inline Image crop(const Image& img, const Rect& r) {
    Image out(r.height(), r.width(), img.c);
    for (int y = 0; y < out.h; ++y)
        for (int x = 0; x < out.w; ++x)
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = img.at(r.r0 + y, r.c0 + x, ch);
    return out;
}

// Image/style-text encoders with unit-normalized outputs.
class Embedder {
public:
    virtual ~Embedder() = default;
    virtual std::vector<double> embed_image(const Image& img) const = 0;
    virtual std::vector<double> embed_style(const std::string& style_name) const = 0;
    virtual std::string id() const = 0;
};

namespace detail {

inline void l2_normalize(std::vector<double>& v) {
    double n = 0.0;
    for (double x : v) n += x * x;
    n = std::sqrt(n);
    if (n > 0) for (double& x : v) x /= n;
}

// Hand-crafted appearance statistics: color histogram, edge density, block
// variance, posterize residual and HSV summaries.
inline std::vector<double> stat_features(const Image& img) {
    std::vector<double> f;
    const double npix = static_cast<double>(img.h) * img.w;

    // 4x4x4 joint RGB histogram.
    std::vector<double> hist(64, 0.0);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            auto bin = [](double v) { return std::min(3, static_cast<int>(v * 4.0)); };
            hist[static_cast<size_t>(bin(img.at(y, x, 0)) * 16 + bin(img.at(y, x, 1)) * 4 +
                                     bin(img.at(y, x, 2)))] += 1.0 / npix;
        }
    f.insert(f.end(), hist.begin(), hist.end());

    // Edge statistics on luminance.
    auto lum = [&](int y, int x) {
        y = std::clamp(y, 0, img.h - 1);
        x = std::clamp(x, 0, img.w - 1);
        return 0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    };
    double grad_mean = 0.0, edge_frac = 0.0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            const double gx = lum(y, x + 1) - lum(y, x - 1);
            const double gy = lum(y + 1, x) - lum(y - 1, x);
            const double g = std::sqrt(gx * gx + gy * gy);
            grad_mean += g / npix;
            if (g > 0.25) edge_frac += 1.0 / npix;
        }
    f.push_back(grad_mean * 2.0);
    f.push_back(edge_frac * 2.0);

    // Mean within-4x4-block variance per channel.
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        int blocks = 0;
        for (int y0 = 0; y0 < img.h; y0 += 4)
            for (int x0 = 0; x0 < img.w; x0 += 4) {
                const int y1 = std::min(y0 + 4, img.h), x1 = std::min(x0 + 4, img.w);
                double s = 0.0, s2 = 0.0;
                const int n = (y1 - y0) * (x1 - x0);
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) {
                        const double v = img.at(y, x, ch);
                        s += v;
                        s2 += v * v;
                    }
                acc += std::max(0.0, s2 / n - (s / n) * (s / n));
                ++blocks;
            }
        f.push_back(acc / std::max(1, blocks) * 8.0);
    }

    // Residual against a 4-level posterization per channel.
    for (int ch = 0; ch < 3; ++ch) {
        double acc = 0.0;
        for (int y = 0; y < img.h; ++y)
            for (int x = 0; x < img.w; ++x) {
                const double v = img.at(y, x, ch);
                acc += std::abs(v - std::round(v * 3.0) / 3.0) / npix;
            }
        f.push_back(acc * 4.0);
    }

    // HSV summaries plus an 8-bin hue histogram weighted by saturation.
    double smean = 0.0, s2sum = 0.0, vmean = 0.0;
    std::vector<double> hue_hist(8, 0.0);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            double h, s, v;
            rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
            smean += s / npix;
            s2sum += s * s / npix;
            vmean += v / npix;
            hue_hist[std::min<size_t>(7, static_cast<size_t>(h * 8.0))] += s / npix;
        }
    f.push_back(smean);
    f.push_back(std::sqrt(std::max(0.0, s2sum - smean * smean)));
    f.push_back(vmean);
    f.insert(f.end(), hue_hist.begin(), hue_hist.end());

    l2_normalize(f);
    return f;
}

}  // namespace detail

// Deterministic CLIP stand-in: statistics-based image features plus style
// prototypes computed once from a seeded calibration set of stylized crops.
class StatEmbedder final : public Embedder {
public:
    explicit StatEmbedder(uint64_t seed = 17, int calibration_scenes = 24) : seed_(seed) {
        const auto styles = default_styles();
        prototypes_.resize(styles.size());
        std::vector<int> counts(styles.size(), 0);
        for (int i = 0; i < calibration_scenes; ++i) {
            SceneSpec spec;
            spec.seed = derive_seed(seed, 0xCA11B + static_cast<uint64_t>(i));
            spec.height = spec.width = 64;
            spec.num_objects = 1 + i % 2;
            spec.background = static_cast<BackgroundKind>(i % 3);
            auto [img, objects] = gen_scene(spec);
            const Rect box = padded_bbox(objects[0].second);
            const Image base_crop = crop(img, box);
            for (const auto& st : styles) {
                const auto feat = detail::stat_features(apply_style(base_crop, st));
                auto& proto = prototypes_[static_cast<size_t>(st.style_id)];
                if (proto.empty()) proto.assign(feat.size(), 0.0);
                for (size_t j = 0; j < feat.size(); ++j) proto[j] += feat[j];
                ++counts[static_cast<size_t>(st.style_id)];
            }
        }
        for (auto& p : prototypes_) detail::l2_normalize(p);
        for (const auto& st : styles) name_to_id_[st.name] = st.style_id;
    }

    std::vector<double> embed_image(const Image& img) const override {
        return detail::stat_features(img);
    }

    std::vector<double> embed_style(const std::string& style_name) const override {
        auto it = name_to_id_.find(style_name);
        if (it == name_to_id_.end()) throw ConfigError("unknown style name: " + style_name);
        return prototypes_[static_cast<size_t>(it->second)];
    }

    std::string id() const override { return "stat-embedder-v1/seed" + std::to_string(seed_); }

private:
    uint64_t seed_;
    std::vector<std::vector<double>> prototypes_;
    std::map<std::string, int> name_to_id_;
};

inline double cosine(const std::vector<double>& a, const std::vector<double>& b) {
    if (a.size() != b.size()) throw ConfigError("cosine: dimension mismatch");
    double dot = 0.0, na = 0.0, nb = 0.0;
    for (size_t i = 0; i < a.size(); ++i) {
        dot += a[i] * b[i];
        na += a[i] * a[i];
        nb += b[i] * b[i];
    }
    if (na <= 0 || nb <= 0) throw ConfigError("cosine: zero vector");
    return std::clamp(dot / std::sqrt(na * nb), -1.0, 1.0);
}

// (1 + cos) / 2 over the padded-bbox crop of the edited image.
inline double rsm_score(const Image& edited, const Mask& mask, const StyleSpec& style,
                        const Embedder& embedder, double pad_fraction = 0.05) {
    const Rect box = padded_bbox(mask, pad_fraction);
    const double c = cosine(embedder.embed_image(crop(edited, box)), embedder.embed_style(style.name));
    return (1.0 + c) / 2.0;
}

// Fixed seeded multi-scale filter bank standing in for a perceptual network.
class PerceptualFeatureBank {
public:
    explicit PerceptualFeatureBank(uint64_t seed = 29, std::vector<int> scales = {1, 2, 4},
                                   int filters = 8)
        : seed_(seed), scales_(std::move(scales)), filters_(filters) {
        Rng rng(derive_seed(seed, 0xF17));
        std::normal_distribution<double> N(0.0, 1.0 / std::sqrt(27.0));
        weights_.resize(scales_.size());
        for (auto& ws : weights_) {
            ws.assign(static_cast<size_t>(filters_) * 3 * 9, 0.0);
            for (auto& v : ws) v = N(rng);
        }
    }

    uint64_t seed() const { return seed_; }
    int max_scale() const { return *std::max_element(scales_.begin(), scales_.end()); }
    // Influence radius of one full-resolution pixel on the distance map.
    int receptive_radius() const { return 2 * max_scale(); }

    // Per-pixel distance map: sum over scales of the squared difference of
    // location-normalized features, upsampled (nearest) to full resolution.
    std::vector<double> distance_map(const Image& a, const Image& b) const {
        if (!a.same_shape(b)) throw ConfigError("distance_map: shape mismatch");
        std::vector<double> map(static_cast<size_t>(a.h) * a.w, 0.0);
        for (size_t si = 0; si < scales_.size(); ++si) {
            const int s = scales_[si];
            const auto fa = features(a, s, weights_[si]);
            const auto fb = features(b, s, weights_[si]);
            const int sh = a.h / s, sw = a.w / s;
            for (int y = 0; y < a.h; ++y)
                for (int x = 0; x < a.w; ++x) {
                    const int cy = std::min(y / s, sh - 1), cx = std::min(x / s, sw - 1);
                    double d = 0.0;
                    for (int f = 0; f < filters_; ++f) {
                        const double diff = fa[(static_cast<size_t>(cy) * sw + cx) * filters_ + f] -
                                            fb[(static_cast<size_t>(cy) * sw + cx) * filters_ + f];
                        d += diff * diff;
                    }
                    map[static_cast<size_t>(y) * a.w + x] += d;
                }
        }
        return map;
    }

private:
    std::vector<double> features(const Image& img, int scale, const std::vector<double>& w) const {
        const int sh = img.h / scale, sw = img.w / scale;
        // Block-mean downsample.
        std::vector<double> small(static_cast<size_t>(sh) * sw * 3, 0.0);
        for (int y = 0; y < sh; ++y)
            for (int x = 0; x < sw; ++x)
                for (int ch = 0; ch < 3; ++ch) {
                    double acc = 0.0;
                    for (int dy = 0; dy < scale; ++dy)
                        for (int dx = 0; dx < scale; ++dx)
                            acc += img.at(y * scale + dy, x * scale + dx, ch);
                    small[(static_cast<size_t>(y) * sw + x) * 3 + ch] = acc / (scale * scale);
                }
        // 3x3 convolution with clamp padding, then per-location unit norm.
        std::vector<double> feat(static_cast<size_t>(sh) * sw * filters_, 0.0);
        for (int y = 0; y < sh; ++y)
            for (int x = 0; x < sw; ++x) {
                double norm = 0.0;
                for (int f = 0; f < filters_; ++f) {
                    double acc = 0.0;
                    int wi = f * 27;
                    for (int dy = -1; dy <= 1; ++dy)
                        for (int dx = -1; dx <= 1; ++dx) {
                            const int yy = std::clamp(y + dy, 0, sh - 1);
                            const int xx = std::clamp(x + dx, 0, sw - 1);
                            for (int ch = 0; ch < 3; ++ch)
                                acc += w[static_cast<size_t>(wi++)] *
                                       small[(static_cast<size_t>(yy) * sw + xx) * 3 + ch];
                        }
                    feat[(static_cast<size_t>(y) * sw + x) * filters_ + f] = acc;
                    norm += acc * acc;
                }
                norm = std::sqrt(norm) + 1e-10;
                for (int f = 0; f < filters_; ++f)
                    feat[(static_cast<size_t>(y) * sw + x) * filters_ + f] /= norm;
            }
        return feat;
    }

    uint64_t seed_;
    std::vector<int> scales_;
    int filters_;
    std::vector<std::vector<double>> weights_;  // per scale: filters x 3 x 3 x 3
};

// Background-masked average of the bank's distance map. Optionally emits the
// full-resolution map for verification.
inline double masked_perceptual_distance(const Image& edited, const Image& original,
                                         const Mask& mask, const PerceptualFeatureBank& bank,
                                         std::vector<double>* out_map = nullptr) {
    if (!edited.same_shape(original) || edited.h != mask.h || edited.w != mask.w)
        throw ConfigError("masked_perceptual_distance: shape mismatch");
    auto map = bank.distance_map(edited, original);
    double num = 0.0, den = 0.0;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            const double bg = mask.at(y, x) ? 0.0 : 1.0;
            num += bg * map[static_cast<size_t>(y) * mask.w + x];
            den += bg;
        }
    if (den <= 0.0) throw ConfigError("masked_perceptual_distance: empty background");
    if (out_map) *out_map = std::move(map);
    return num / den;
}

// Mean over background pixels of the channel-summed squared difference.
inline double masked_mse(const Image& edited, const Image& original, const Mask& mask) {
    if (!edited.same_shape(original) || edited.h != mask.h || edited.w != mask.w)
        throw ConfigError("masked_mse: shape mismatch");
    double num = 0.0, den = 0.0;
    for (int y = 0; y < mask.h; ++y)
        for (int x = 0; x < mask.w; ++x) {
            if (mask.at(y, x)) continue;
            for (int ch = 0; ch < edited.c; ++ch) {
                const double d = edited.at(y, x, ch) - original.at(y, x, ch);
                num += d * d;
            }
            den += 1.0;
        }
    if (den <= 0.0) throw ConfigError("masked_mse: empty background");
    return num / den;
}

struct RSESampleRow {
    std::string id;
    int style_id = 0;
    double rsm = 0.0, lpips_bg = 0.0, mse_bg = 0.0;
};

struct RSEReport {
    std::vector<RSESampleRow> rows;
    double mean_rsm = 0.0, std_rsm = 0.0;
    double mean_lpips = 0.0, std_lpips = 0.0;
    double mean_mse = 0.0, std_mse = 0.0;
    std::string embedder_id;
    uint64_t bank_seed = 0;
    double pad_fraction = 0.05;
    std::string dataset_tag;
};

inline void finalize_report(RSEReport& r) {
    auto stats = [&](auto get, double& mean, double& sd) {
        if (r.rows.empty()) { mean = sd = 0.0; return; }
        double s = 0.0;
        for (const auto& row : r.rows) s += get(row);
        mean = s / static_cast<double>(r.rows.size());
        double v = 0.0;
        for (const auto& row : r.rows) {
            const double d = get(row) - mean;
            v += d * d;
        }
        sd = std::sqrt(v / static_cast<double>(r.rows.size()));
    };
    stats([](const RSESampleRow& x) { return x.rsm; }, r.mean_rsm, r.std_rsm);
    stats([](const RSESampleRow& x) { return x.lpips_bg; }, r.mean_lpips, r.std_lpips);
    stats([](const RSESampleRow& x) { return x.mse_bg; }, r.mean_mse, r.std_mse);
}

using EditorFn = std::function<Image(const LoadedSample&, const SampleRecord&)>;

// Runs the editor over the held-out split and scores every sample against the
// original context and ground-truth mask.
inline RSEReport rse_report(const DatasetManifest& manifest, const EditorFn& editor,
                            const Embedder& embedder, const PerceptualFeatureBank& bank,
                            double pad_fraction = 0.05, const std::string& dataset_tag = "") {
    const auto styles = default_styles();
    RSEReport report;
    report.embedder_id = embedder.id();
    report.bank_seed = bank.seed();
    report.pad_fraction = pad_fraction;
    report.dataset_tag = dataset_tag;
    for (const auto& rec : manifest.samples) {
        if (rec.split != "heldout") continue;
        const LoadedSample s = load_sample(manifest, rec);
        const Image edited = editor(s, rec);
        RSESampleRow row;
        row.id = rec.context_path;
        row.style_id = rec.style_id;
        row.rsm = rsm_score(edited, s.mask, styles[static_cast<size_t>(rec.style_id)], embedder,
                            pad_fraction);
        row.lpips_bg = masked_perceptual_distance(edited, s.context, s.mask, bank);
        row.mse_bg = masked_mse(edited, s.context, s.mask);
        report.rows.push_back(std::move(row));
    }
    if (report.rows.empty()) throw ConfigError("rse_report: held-out split is empty");
    finalize_report(report);
    return report;
}

inline nlohmann::ordered_json rse_report_json(const RSEReport& r) {
    nlohmann::ordered_json j;
    j["embedder"] = r.embedder_id;
    j["bank_seed"] = r.bank_seed;
    j["pad_fraction"] = r.pad_fraction;
    j["dataset"] = r.dataset_tag;
    j["aggregate"] = {{"rsm_mean", r.mean_rsm},     {"rsm_std", r.std_rsm},
                      {"lpips_bg_mean", r.mean_lpips}, {"lpips_bg_std", r.std_lpips},
                      {"mse_bg_mean", r.mean_mse},  {"mse_bg_std", r.std_mse}};
    j["samples"] = nlohmann::ordered_json::array();
    for (const auto& row : r.rows)
        j["samples"].push_back({{"id", row.id},
                                {"style_id", row.style_id},
                                {"rsm", row.rsm},
                                {"lpips_bg", row.lpips_bg},
                                {"mse_bg", row.mse_bg}});
    return j;
}

inline void write_rse_csv(const RSEReport& r, const std::string& path) {
    std::ofstream f(path);
    if (!f) throw IoError("cannot write csv: " + path);
    f << "id,style_id,rsm,lpips_bg,mse_bg\n";
    for (const auto& row : r.rows)
        f << row.id << "," << row.style_id << "," << row.rsm << "," << row.lpips_bg << ","
          << row.mse_bg << "\n";
}

}  // namespace rr
