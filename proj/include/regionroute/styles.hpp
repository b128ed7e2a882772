#pragma once

#include <algorithm>
#include <array>
#include <cmath>
#include <string>
#include <vector>

#include "regionroute/image.hpp"

namespace rr {

// Deterministic procedural stylization filters. One per expert.
struct StyleSpec {
    int style_id = 0;
    std::string name;        // pixel-art | cyberpunk | expressionism | line-art
    int block_size = 4;      // pixel-art
    double hue_shift = 0.55; // cyberpunk, fraction of a full turn
    double sat_boost = 1.6;  // cyberpunk
    int posterize_levels = 4;// expressionism
    double edge_gain = 4.0;  // line-art
};

inline std::vector<StyleSpec> default_styles() {
    std::vector<StyleSpec> s(4);
    s[0] = StyleSpec{0, "pixel-art", 8, 0.0, 1.0, 0, 0.0};
    s[1] = StyleSpec{1, "cyberpunk", 0, 0.55, 1.6, 0, 0.0};
    s[2] = StyleSpec{2, "expressionism", 0, 0.0, 1.0, 4, 0.0};
    s[3] = StyleSpec{3, "line-art", 0, 0.0, 1.0, 0, 4.0};
    return s;
}

namespace detail {

inline void rgb_to_hsv(double r, double g, double b, double& h, double& s, double& v) {
    const double mx = std::max({r, g, b});
    const double mn = std::min({r, g, b});
    const double dl = mx - mn;
    v = mx;
    s = mx > 0.0 ? dl / mx : 0.0;
    if (dl <= 0.0) {
        h = 0.0;
    } else if (mx == r) {
        h = std::fmod((g - b) / dl, 6.0) / 6.0;
    } else if (mx == g) {
        h = ((b - r) / dl + 2.0) / 6.0;
    } else {
        h = ((r - g) / dl + 4.0) / 6.0;
    }
    if (h < 0.0) h += 1.0;
}

inline void hsv_to_rgb(double h, double s, double v, double& r, double& g, double& b) {
    const double hh = std::fmod(h, 1.0) * 6.0;
    const int i = static_cast<int>(hh) % 6;
    const double f = hh - std::floor(hh);
    const double p = v * (1.0 - s);
    const double q = v * (1.0 - s * f);
    const double t = v * (1.0 - s * (1.0 - f));
    switch (i) {
        case 0: r = v; g = t; b = p; break;
        case 1: r = q; g = v; b = p; break;
        case 2: r = p; g = v; b = t; break;
        case 3: r = p; g = q; b = v; break;
        case 4: r = t; g = p; b = v; break;
        default: r = v; g = p; b = q; break;
    }
}

inline Image pixelate(const Image& img, int b) {
    if (b < 1) throw ConfigError("pixel-art block size must be >= 1");
    Image out(img.h, img.w, img.c);
    for (int y0 = 0; y0 < img.h; y0 += b) {
        for (int x0 = 0; x0 < img.w; x0 += b) {
            const int y1 = std::min(y0 + b, img.h);
            const int x1 = std::min(x0 + b, img.w);
            for (int ch = 0; ch < img.c; ++ch) {
                double sum = 0.0;
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) sum += img.at(y, x, ch);
                const double mean = sum / ((y1 - y0) * (x1 - x0));
                for (int y = y0; y < y1; ++y)
                    for (int x = x0; x < x1; ++x) out.at(y, x, ch) = mean;
            }
        }
    }
    return out;
}

inline Image hue_rotate(const Image& img, double shift, double boost) {
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            double h, s, v;
            rgb_to_hsv(img.at(y, x, 0), img.at(y, x, 1), img.at(y, x, 2), h, s, v);
            h = std::fmod(h + shift, 1.0);
            s = clamp01(s * boost + 0.1);
            double r, g, b;
            hsv_to_rgb(h, s, v, r, g, b);
            out.at(y, x, 0) = clamp01(r);
            out.at(y, x, 1) = clamp01(g);
            out.at(y, x, 2) = clamp01(b);
        }
    }
    return out;
}

inline Image posterize(const Image& img, int levels) {
    if (levels < 2) throw ConfigError("posterize needs >= 2 levels");
    Image out(img.h, img.w, img.c);
    const double k = levels - 1;
    for (size_t i = 0; i < img.d.size(); ++i) out.d[i] = std::round(img.d[i] * k) / k;
    return out;
}

// Sobel edge magnitude on luminance, rendered as dark lines on white.
inline Image edge_map(const Image& img, double gain) {
    std::vector<double> lum(static_cast<size_t>(img.h) * img.w);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            lum[static_cast<size_t>(y) * img.w + x] =
                0.299 * img.at(y, x, 0) + 0.587 * img.at(y, x, 1) + 0.114 * img.at(y, x, 2);
    auto L = [&](int y, int x) {
        y = std::clamp(y, 0, img.h - 1);
        x = std::clamp(x, 0, img.w - 1);
        return lum[static_cast<size_t>(y) * img.w + x];
    };
    Image out(img.h, img.w, img.c);
    for (int y = 0; y < img.h; ++y) {
        for (int x = 0; x < img.w; ++x) {
            const double gx = L(y - 1, x + 1) + 2 * L(y, x + 1) + L(y + 1, x + 1)
                            - L(y - 1, x - 1) - 2 * L(y, x - 1) - L(y + 1, x - 1);
            const double gy = L(y + 1, x - 1) + 2 * L(y + 1, x) + L(y + 1, x + 1)
                            - L(y - 1, x - 1) - 2 * L(y - 1, x) - L(y - 1, x + 1);
            const double mag = clamp01(std::sqrt(gx * gx + gy * gy) * gain * 0.25);
            const double v = 1.0 - mag;
            for (int ch = 0; ch < img.c; ++ch) out.at(y, x, ch) = v;
        }
    }
    return out;
}

}  // namespace detail

inline Image apply_style(const Image& img, const StyleSpec& style) {
    if (style.name == "pixel-art") return detail::pixelate(img, style.block_size);
    if (style.name == "cyberpunk") return detail::hue_rotate(img, style.hue_shift, style.sat_boost);
    if (style.name == "expressionism") return detail::posterize(img, style.posterize_levels);
    if (style.name == "line-art") return detail::edge_map(img, style.edge_gain);
    throw ConfigError("unknown style: " + style.name);
}

}  // namespace rr
