#pragma once

#include <algorithm>
#include <cmath>
#include <vector>

#include "regionroute/attention.hpp"
#include "regionroute/image.hpp"

namespace rr {

// Aggregated style-token attention over a token grid.
template <typename T>
struct StyleAttentionMap {
    int h = 0, w = 0;
    std::vector<T> values;  // h*w, entries in [0,1]
    int style_id = -1;
    int heads = 0;
    int num_style_tokens = 0;
    std::vector<int> layers;

    size_t size() const { return values.size(); }
};

template <typename T>
struct SupervisionTarget {
    std::vector<T> mask;  // soft mask in [0,1], same grid as the map
    T tau = T(1);         // softmax temperature for the focus loss
    T alpha = T(10);      // logit contrast factor for the cover loss
    T eps = static_cast<T>(1e-8);
};

template <typename T>
struct LossResult {
    T loss = T(0);
    std::vector<T> grad;  // d loss / d map values
};

// norm(Z) with epsilon flooring: proportional to Z + eps.
template <typename T>
std::vector<T> normalize_distribution(const std::vector<T>& z, T eps = T(0)) {
    T sum = T(0);
    for (T v : z) sum += v + eps;
    if (!(sum > T(0))) throw ConfigError("normalize_distribution: zero total mass");
    std::vector<T> out(z.size());
    for (size_t i = 0; i < z.size(); ++i) out[i] = (z[i] + eps) / sum;
    return out;
}

// Mean of the image-query -> style-token attention slices over layers, heads
// and style tokens, reshaped to (h, w). `style_cols` are absolute sequence
// columns of the style tokens; image queries are rows [0, h*w).
template <typename T>
StyleAttentionMap<T> aggregate_style_attention(const std::vector<AttentionRecord<T>>& records,
                                               const std::vector<int>& layers,
                                               const std::vector<int>& style_cols, int h, int w) {
    if (layers.empty()) throw ConfigError("aggregate_style_attention: empty layer set");
    if (style_cols.empty()) throw ConfigError("aggregate_style_attention: empty style token set");
    const int n_img = h * w;
    StyleAttentionMap<T> map;
    map.h = h;
    map.w = w;
    map.layers = layers;
    map.num_style_tokens = static_cast<int>(style_cols.size());
    map.values.assign(static_cast<size_t>(n_img), T(0));

    int heads = 0;
    for (int layer : layers) {
        const AttentionRecord<T>* rec = nullptr;
        for (const auto& r : records)
            if (r.layer == layer) { rec = &r; break; }
        if (!rec) throw ConfigError("aggregate_style_attention: layer missing from records");
        if (heads == 0) heads = rec->heads();
        for (const auto& p : rec->probs) {
            if (p.rows < n_img) throw ConfigError("aggregate_style_attention: grid larger than records");
            for (int col : style_cols) {
                if (col < 0 || col >= p.cols)
                    throw ConfigError("aggregate_style_attention: style column out of range");
                for (int q = 0; q < n_img; ++q) map.values[static_cast<size_t>(q)] += p(q, col);
            }
        }
    }
    map.heads = heads;
    const T denom = static_cast<T>(layers.size()) * static_cast<T>(heads) *
                    static_cast<T>(style_cols.size());
    for (auto& v : map.values) v /= denom;
    return map;
}

template <typename T>
void check_finite(const std::vector<T>& v, const char* what) {
    for (T x : v)
        if (!std::isfinite(static_cast<double>(x))) throw ConfigError(std::string(what) + ": non-finite input");
}

// KL( softmax(map / tau) || norm(mask + eps) ), gradient w.r.t. the map.
template <typename T>
LossResult<T> focus_loss(const std::vector<T>& map, const SupervisionTarget<T>& target) {
    if (map.size() != target.mask.size()) throw ConfigError("focus_loss: shape mismatch");
    check_finite(map, "focus_loss");
    check_finite(target.mask, "focus_loss");
    const auto q = normalize_distribution(target.mask, target.eps);

    // p = softmax(map / tau), stabilized.
    const size_t n = map.size();
    std::vector<T> p(n);
    T mx = map[0] / target.tau;
    for (size_t i = 1; i < n; ++i) mx = std::max(mx, map[i] / target.tau);
    T sum = T(0);
    for (size_t i = 0; i < n; ++i) {
        p[i] = std::exp(map[i] / target.tau - mx);
        sum += p[i];
    }
    for (auto& v : p) v /= sum;

    T loss = T(0);
    for (size_t i = 0; i < n; ++i)
        if (p[i] > T(0)) loss += p[i] * (std::log(p[i]) - std::log(q[i]));

    LossResult<T> res;
    res.loss = loss;
    res.grad.assign(n, T(0));
    for (size_t i = 0; i < n; ++i) {
        const T lr = p[i] > T(0) ? std::log(p[i]) - std::log(q[i]) : -std::log(q[i]);
        res.grad[i] = p[i] * (lr - loss) / target.tau;
    }
    return res;
}

// Mean over cells of the numerically stable BCE-with-logits of (alpha * map)
// against the soft mask.
template <typename T>
LossResult<T> cover_loss(const std::vector<T>& map, const SupervisionTarget<T>& target) {
    if (map.size() != target.mask.size()) throw ConfigError("cover_loss: shape mismatch");
    check_finite(map, "cover_loss");
    check_finite(target.mask, "cover_loss");
    const size_t n = map.size();
    LossResult<T> res;
    res.grad.assign(n, T(0));
    const T inv_n = T(1) / static_cast<T>(n);
    for (size_t i = 0; i < n; ++i) {
        const T z = target.alpha * map[i];
        const T y = target.mask[i];
        // max(z,0) - z*y + log(1 + exp(-|z|))
        res.loss += (std::max(z, T(0)) - z * y + std::log1p(std::exp(-std::abs(z)))) * inv_n;
        const T sig = T(1) / (T(1) + std::exp(-z));
        res.grad[i] = target.alpha * (sig - y) * inv_n;
    }
    return res;
}

// 0.5-quantile threshold: cells strictly above the median of the map.
template <typename T>
Mask threshold_at_median(const StyleAttentionMap<T>& map) {
    std::vector<T> sorted(map.values.begin(), map.values.end());
    std::sort(sorted.begin(), sorted.end());
    const T med = sorted[sorted.size() / 2];
    Mask m(map.h, map.w);
    for (size_t i = 0; i < map.values.size(); ++i) m.d[i] = map.values[i] > med ? 1 : 0;
    return m;
}

inline double mask_iou(const Mask& a, const Mask& b) {
    if (a.h != b.h || a.w != b.w) throw ConfigError("mask_iou: shape mismatch");
    size_t inter = 0, uni = 0;
    for (size_t i = 0; i < a.d.size(); ++i) {
        const bool x = a.d[i] != 0, y = b.d[i] != 0;
        inter += (x && y) ? 1 : 0;
        uni += (x || y) ? 1 : 0;
    }
    return uni == 0 ? 0.0 : static_cast<double>(inter) / static_cast<double>(uni);
}

// Min-max scaled export for the attn-dump command. Returns {min, max} used.
template <typename T>
std::pair<double, double> export_attention_map(const StyleAttentionMap<T>& map,
                                               const std::string& image_path,
                                               const std::string& sidecar_path) {
    double lo = map.values.empty() ? 0.0 : static_cast<double>(map.values[0]);
    double hi = lo;
    for (T v : map.values) {
        lo = std::min(lo, static_cast<double>(v));
        hi = std::max(hi, static_cast<double>(v));
    }
    const double range = hi - lo > 0 ? hi - lo : 1.0;
    std::vector<double> scaled(map.values.size());
    for (size_t i = 0; i < scaled.size(); ++i)
        scaled[i] = (static_cast<double>(map.values[i]) - lo) / range;
    write_pgm_gray(image_path, map.h, map.w, scaled);
    std::ofstream f(sidecar_path);
    if (!f) throw IoError("cannot write sidecar: " + sidecar_path);
    f << "min " << lo << "\nmax " << hi << "\n";
    return {lo, hi};
}

}  // namespace rr
