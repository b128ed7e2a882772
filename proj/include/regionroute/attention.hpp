#pragma once

#include <cmath>
#include <optional>
#include <vector>

#include "regionroute/tensor.hpp"

namespace rr {

// Post-softmax scores for one block, one Mat per head (N x N).
template <typename T>
struct AttentionRecord {
    int layer = 0;
    std::vector<Mat<T>> probs;

    int heads() const { return static_cast<int>(probs.size()); }
};

// Rowwise softmax(Q K^T / sqrt(d)) V per head. Q, K, V are per-head N x d.
// Post-softmax scores are written to *scores when requested.
template <typename T>
std::vector<Mat<T>> joint_attention(const std::vector<Mat<T>>& q, const std::vector<Mat<T>>& k,
                                    const std::vector<Mat<T>>& v,
                                    std::vector<Mat<T>>* scores = nullptr) {
    if (q.size() != k.size() || q.size() != v.size())
        throw ConfigError("joint_attention: head count mismatch");
    std::vector<Mat<T>> out(q.size());
    if (scores) scores->resize(q.size());
    for (size_t h = 0; h < q.size(); ++h) {
        if (q[h].cols != k[h].cols || k[h].rows != v[h].rows)
            throw ConfigError("joint_attention: shape mismatch");
        Mat<T> s;
        matmul_nt(q[h], k[h], s);
        const T inv = T(1) / std::sqrt(static_cast<T>(q[h].cols));
        for (auto& x : s.d) x *= inv;
        softmax_rows(s);
        matmul_nn(s, v[h], out[h]);
        if (scores) (*scores)[h] = std::move(s);
    }
    return out;
}

// dS from dP through a rowwise softmax with probabilities P.
template <typename T>
void softmax_backward_rows(const Mat<T>& p, const Mat<T>& dp, Mat<T>& ds) {
    ds = Mat<T>(p.rows, p.cols);
    for (int i = 0; i < p.rows; ++i) {
        const T* pr = p.row(i);
        const T* dpr = dp.row(i);
        T dot = T(0);
        for (int j = 0; j < p.cols; ++j) dot += pr[j] * dpr[j];
        T* dsr = ds.row(i);
        for (int j = 0; j < p.cols; ++j) dsr[j] = pr[j] * (dpr[j] - dot);
    }
}

template <typename T>
void split_heads(const Mat<T>& x, int heads, std::vector<Mat<T>>& out) {
    const int dh = x.cols / heads;
    out.assign(static_cast<size_t>(heads), Mat<T>());
    for (int h = 0; h < heads; ++h) {
        Mat<T> m(x.rows, dh);
        for (int i = 0; i < x.rows; ++i) {
            const T* src = x.row(i) + h * dh;
            T* dst = m.row(i);
            for (int j = 0; j < dh; ++j) dst[j] = src[j];
        }
        out[static_cast<size_t>(h)] = std::move(m);
    }
}

template <typename T>
void merge_heads(const std::vector<Mat<T>>& hs, Mat<T>& out) {
    const int heads = static_cast<int>(hs.size());
    const int dh = hs[0].cols;
    out = Mat<T>(hs[0].rows, heads * dh);
    for (int h = 0; h < heads; ++h)
        for (int i = 0; i < hs[0].rows; ++i) {
            const T* src = hs[static_cast<size_t>(h)].row(i);
            T* dst = out.row(i) + h * dh;
            for (int j = 0; j < dh; ++j) dst[j] = src[j];
        }
}

}  // namespace rr
