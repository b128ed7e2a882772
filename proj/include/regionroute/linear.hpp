#pragma once

#include <string>
#include <vector>

#include "regionroute/tensor.hpp"

namespace rr {

enum class StreamTag { DoubleStream, SingleStream, Backbone };

// One per-style low-rank adapter at one site: delta W = scale * B * A.
// B starts at zero so attachment is output-transparent.
template <typename T>
struct LoraExpert {
    Mat<T> A;   // r x in
    Mat<T> B;   // out x r
    Mat<T> gA;  // gradient accumulators, same shapes
    Mat<T> gB;
};

template <typename T>
struct LinearCache {
    Mat<T> X;  // input, N x in
    Mat<T> H;  // X * A^T when an expert is active, N x r
};

// Frozen dense layer with optional per-style LoRA experts.
template <typename T>
struct LoraLinear {
    std::string name;
    StreamTag stream = StreamTag::Backbone;
    int in_dim = 0, out_dim = 0;
    Mat<T> W;            // out x in, frozen
    std::vector<T> bias; // out, frozen
    std::vector<LoraExpert<T>> experts;
    int rank = 0;
    T scale = T(0);
    int active = -1;  // -1: base path only

    void init(int out, int in, Rng& rng, T weight_std) {
        in_dim = in;
        out_dim = out;
        W = Mat<T>(out, in);
        bias.assign(static_cast<size_t>(out), T(0));
        std::normal_distribution<double> N(0.0, static_cast<double>(weight_std));
        for (auto& v : W.d) v = static_cast<T>(N(rng));
    }

    bool has_experts() const { return !experts.empty(); }

    void attach(int num_experts, int r, T gamma, Rng& rng) {
        if (has_experts()) throw ConfigError("experts already attached at site " + name);
        rank = r;
        scale = gamma / static_cast<T>(r);
        experts.resize(static_cast<size_t>(num_experts));
        std::normal_distribution<double> N(0.0, 0.02);
        for (auto& e : experts) {
            e.A = Mat<T>(r, in_dim);
            e.B = Mat<T>(out_dim, r);  // zeros
            e.gA = Mat<T>(r, in_dim);
            e.gB = Mat<T>(out_dim, r);
            for (auto& v : e.A.d) v = static_cast<T>(N(rng));
        }
    }

    // Y = X W^T + b (+ scale * (X A^T) B^T for the active expert)
    void forward(const Mat<T>& x, Mat<T>& y, LinearCache<T>* cache) const {
        matmul_nt(x, W, y);
        for (int i = 0; i < y.rows; ++i) {
            T* r = y.row(i);
            for (int j = 0; j < y.cols; ++j) r[j] += bias[static_cast<size_t>(j)];
        }
        Mat<T> h;
        if (active >= 0 && has_experts()) {
            const auto& e = experts[static_cast<size_t>(active)];
            matmul_nt(x, e.A, h);
            for (int i = 0; i < y.rows; ++i) {
                const T* hr = h.row(i);
                T* yr = y.row(i);
                for (int o = 0; o < out_dim; ++o) {
                    const T* br = e.B.row(o);
                    T acc = T(0);
                    for (int p = 0; p < rank; ++p) acc += br[p] * hr[p];
                    yr[o] += scale * acc;
                }
            }
        }
        if (cache) {
            cache->X = x;
            cache->H = std::move(h);
        }
    }

    // dX = dY W (+ LoRA path); accumulates expert gradients when requested.
    void backward(const LinearCache<T>& cache, const Mat<T>& dy, Mat<T>& dx, bool accumulate) {
        matmul_nn(dy, W, dx);
        if (active >= 0 && has_experts()) {
            auto& e = experts[static_cast<size_t>(active)];
            Mat<T> dyb;  // dY * B, N x r
            matmul_nn(dy, e.B, dyb);
            // dX += scale * (dY B) A
            Mat<T> dxl;
            matmul_nn(dyb, e.A, dxl);
            for (size_t i = 0; i < dx.d.size(); ++i) dx.d[i] += scale * dxl.d[i];
            if (accumulate) {
                // dB += scale * dY^T H ; dA += scale * (dY B)^T X
                Mat<T> gb, ga;
                matmul_tn(dy, cache.H, gb);
                matmul_tn(dyb, cache.X, ga);
                for (size_t i = 0; i < e.gB.d.size(); ++i) e.gB.d[i] += scale * gb.d[i];
                for (size_t i = 0; i < e.gA.d.size(); ++i) e.gA.d[i] += scale * ga.d[i];
            }
        }
    }
};

// Standalone LoRA forward on a single vector, y = W x + scale * B (A x).
template <typename T>
std::vector<T> lora_forward(const Mat<T>& w_base, const Mat<T>& a, const Mat<T>& b, T scale,
                            const std::vector<T>& x) {
    if (w_base.cols != static_cast<int>(x.size()) || a.cols != w_base.cols ||
        b.cols != a.rows || b.rows != w_base.rows)
        throw ConfigError("lora_forward: rank or shape mismatch");
    std::vector<T> ax(static_cast<size_t>(a.rows), T(0));
    for (int i = 0; i < a.rows; ++i)
        for (int j = 0; j < a.cols; ++j) ax[static_cast<size_t>(i)] += a(i, j) * x[static_cast<size_t>(j)];
    std::vector<T> y(static_cast<size_t>(w_base.rows), T(0));
    for (int i = 0; i < w_base.rows; ++i) {
        T acc = T(0);
        for (int j = 0; j < w_base.cols; ++j) acc += w_base(i, j) * x[static_cast<size_t>(j)];
        for (int p = 0; p < b.cols; ++p) acc += scale * b(i, p) * ax[static_cast<size_t>(p)];
        y[static_cast<size_t>(i)] = acc;
    }
    return y;
}

}  // namespace rr
