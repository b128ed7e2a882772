#pragma once

#include <algorithm>
#include <array>
#include <string>
#include <utility>
#include <vector>

#include "regionroute/image.hpp"
#include "regionroute/styles.hpp"

namespace rr {

enum class BackgroundKind { Flat, Gradient, NoiseTexture };

struct SceneSpec {
    uint64_t seed = 0;
    int height = 64;
    int width = 64;
    int num_objects = 1;
    BackgroundKind background = BackgroundKind::Flat;
    int patch = 4;  // canvas must be divisible by this
};

inline const std::array<std::string, 12>& object_vocabulary() {
    static const std::array<std::string, 12> words = {
        "cat", "dog", "car", "tree", "house", "ball",
        "fish", "bird", "cup", "star", "boat", "lamp"};
    return words;
}

namespace detail {

inline void fill_background(Image& img, BackgroundKind kind, Rng& rng) {
    std::uniform_real_distribution<double> U(0.15, 0.85);
    const double c0 = U(rng), c1 = U(rng), c2 = U(rng);
    switch (kind) {
        case BackgroundKind::Flat:
            for (int y = 0; y < img.h; ++y)
                for (int x = 0; x < img.w; ++x) {
                    img.at(y, x, 0) = c0;
                    img.at(y, x, 1) = c1;
                    img.at(y, x, 2) = c2;
                }
            break;
        case BackgroundKind::Gradient: {
            const double d0 = U(rng), d1 = U(rng), d2 = U(rng);
            for (int y = 0; y < img.h; ++y) {
                const double t = img.h > 1 ? static_cast<double>(y) / (img.h - 1) : 0.0;
                for (int x = 0; x < img.w; ++x) {
                    img.at(y, x, 0) = c0 + (d0 - c0) * t;
                    img.at(y, x, 1) = c1 + (d1 - c1) * t;
                    img.at(y, x, 2) = c2 + (d2 - c2) * t;
                }
            }
            break;
        }
        case BackgroundKind::NoiseTexture: {
            // Coarse value noise: random 8x8 lattice, bilinear upsample.
            const int gh = 8, gw = 8;
            std::vector<double> lat(static_cast<size_t>(gh) * gw * 3);
            std::uniform_real_distribution<double> N(-0.12, 0.12);
            for (auto& v : lat) v = N(rng);
            for (int y = 0; y < img.h; ++y) {
                const double fy = static_cast<double>(y) / img.h * (gh - 1);
                const int y0 = static_cast<int>(fy);
                const double ty = fy - y0;
                for (int x = 0; x < img.w; ++x) {
                    const double fx = static_cast<double>(x) / img.w * (gw - 1);
                    const int x0 = static_cast<int>(fx);
                    const double tx = fx - x0;
                    for (int ch = 0; ch < 3; ++ch) {
                        auto at = [&](int yy, int xx) {
                            return lat[(static_cast<size_t>(yy) * gw + xx) * 3 + ch];
                        };
                        const double n =
                            at(y0, x0) * (1 - ty) * (1 - tx) + at(y0, x0 + 1) * (1 - ty) * tx +
                            at(y0 + 1, x0) * ty * (1 - tx) + at(y0 + 1, x0 + 1) * ty * tx;
                        const double base = ch == 0 ? c0 : (ch == 1 ? c1 : c2);
                        img.at(y, x, ch) = clamp01(base + n);
                    }
                }
            }
            break;
        }
    }
}

struct ShapeParams {
    bool ellipse = false;
    int cy = 0, cx = 0, ry = 0, rx = 0;  // half extents
};

inline Mask rasterize(const ShapeParams& s, int h, int w) {
    Mask m(h, w);
    for (int y = 0; y < h; ++y) {
        for (int x = 0; x < w; ++x) {
            bool in;
            if (s.ellipse) {
                const double dy = (y - s.cy) / static_cast<double>(s.ry);
                const double dx = (x - s.cx) / static_cast<double>(s.rx);
                in = dy * dy + dx * dx <= 1.0;
            } else {
                in = std::abs(y - s.cy) <= s.ry && std::abs(x - s.cx) <= s.rx;
            }
            if (in) m.at(y, x) = 1;
        }
    }
    return m;
}

inline bool overlaps(const Mask& a, const Mask& b) {
    for (size_t i = 0; i < a.d.size(); ++i)
        if (a.d[i] && b.d[i]) return true;
    return false;
}

}  // namespace detail

// Deterministic scene with pairwise-disjoint object masks, each covering
// between 1% and 60% of the canvas. If a random layout cannot be completed,
// the whole scene is redrawn from a derived seed, so small canvases stay
// feasible without changing any layout that already succeeds first try.
inline std::pair<Image, std::vector<std::pair<std::string, Mask>>> gen_scene(const SceneSpec& spec) {
    if (spec.height <= 0 || spec.width <= 0 || spec.height % spec.patch != 0 ||
        spec.width % spec.patch != 0)
        throw ConfigError("canvas size must be positive and divisible by the patch size");
    if (spec.num_objects < 1 || spec.num_objects > 4)
        throw ConfigError("num_objects must be in [1,4]");

    // Below ~30 px a radius-3 minimum makes four disjoint objects infeasible.
    const int min_r = spec.height >= 30 ? 3 : 2;
    const double area = static_cast<double>(spec.height) * spec.width;

    for (uint64_t redraw = 0; redraw < 50; ++redraw) {
        Rng rng(derive_seed(spec.seed, 0xA5CE + redraw));
        Image img(spec.height, spec.width, 3);
        detail::fill_background(img, spec.background, rng);

        std::vector<std::pair<std::string, Mask>> objects;

        // Labels drawn without replacement so prompts are unambiguous per scene.
        std::vector<std::string> labels(object_vocabulary().begin(), object_vocabulary().end());
        std::shuffle(labels.begin(), labels.end(), rng);

        bool layout_ok = true;
        for (int k = 0; k < spec.num_objects && layout_ok; ++k) {
            Mask placed;
            for (int attempt = 0; attempt < 200; ++attempt) {
                detail::ShapeParams sp;
                sp.ellipse = (rng() & 1) != 0;
                std::uniform_int_distribution<int> rdist(spec.height / 10, spec.height / 4);
                sp.ry = std::max(min_r, rdist(rng));
                sp.rx = std::max(min_r, rdist(rng));
                std::uniform_int_distribution<int> cy(sp.ry + 1, spec.height - sp.ry - 2);
                std::uniform_int_distribution<int> cx(sp.rx + 1, spec.width - sp.rx - 2);
                sp.cy = cy(rng);
                sp.cx = cx(rng);
                Mask m = detail::rasterize(sp, spec.height, spec.width);
                const double frac = m.count() / area;
                if (frac < 0.01 || frac > 0.60) continue;
                bool bad = false;
                for (const auto& [lbl, other] : objects)
                    if (detail::overlaps(m, other)) { bad = true; break; }
                if (bad) continue;
                placed = std::move(m);
                break;
            }
            if (placed.d.empty()) {
                layout_ok = false;
                break;
            }

            // Vivid fill color, with every channel kept away from the
            // posterize levels {0, 1/3, 2/3, 1}, so that each stylizer
            // produces a visible edit inside the mask: saturation gives the
            // hue remap something to rotate, and the level offset guarantees
            // the posterize step actually moves the fill.
            std::uniform_real_distribution<double> U(0.0, 1.0);
            double col[3];
            detail::hsv_to_rgb(U(rng), 0.7 + 0.3 * U(rng), 0.35 + 0.6 * U(rng),
                               col[0], col[1], col[2]);
            for (double& v : col) {
                const double lvl = std::round(v * 3.0) / 3.0;
                const double off = 0.07 + 0.09 * U(rng);
                v = clamp01(lvl + (v >= lvl ? off : -off));
            }
            for (int y = 0; y < spec.height; ++y)
                for (int x = 0; x < spec.width; ++x)
                    if (placed.at(y, x))
                        for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = col[ch];

            objects.emplace_back(labels[static_cast<size_t>(k)], std::move(placed));
        }
        if (layout_ok) return {std::move(img), std::move(objects)};
    }
    throw ConfigError("could not place disjoint objects after 50 scene redraws");
}

}  // namespace rr
