#pragma once

#include <cassert>
#include <cstddef>
#include <vector>

#include "regionroute/common.hpp"

namespace rr {

// Row-major dense matrix.
template <typename T>
struct Mat {
    int rows = 0, cols = 0;
    std::vector<T> d;

    Mat() = default;
    Mat(int r, int c) : rows(r), cols(c), d(static_cast<size_t>(r) * c, T(0)) {}

    T& operator()(int i, int j) { return d[static_cast<size_t>(i) * cols + j]; }
    const T& operator()(int i, int j) const { return d[static_cast<size_t>(i) * cols + j]; }
    T* row(int i) { return d.data() + static_cast<size_t>(i) * cols; }
    const T* row(int i) const { return d.data() + static_cast<size_t>(i) * cols; }
    size_t size() const { return d.size(); }
    void zero() { std::fill(d.begin(), d.end(), T(0)); }
};

// C = A * B^T   (A: m x k, B: n x k, C: m x n)
template <typename T>
void matmul_nt(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    assert(a.cols == b.cols);
    c = Mat<T>(a.rows, b.rows);
    const int k = a.cols;
    for (int i = 0; i < a.rows; ++i) {
        const T* ar = a.row(i);
        T* cr = c.row(i);
        for (int j = 0; j < b.rows; ++j) {
            const T* br = b.row(j);
            T acc = T(0);
            for (int p = 0; p < k; ++p) acc += ar[p] * br[p];
            cr[j] = acc;
        }
    }
}

// C = A * B     (A: m x k, B: k x n, C: m x n)
template <typename T>
void matmul_nn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    assert(a.cols == b.rows);
    c = Mat<T>(a.rows, b.cols);
    const int n = b.cols;
    for (int i = 0; i < a.rows; ++i) {
        T* cr = c.row(i);
        for (int p = 0; p < a.cols; ++p) {
            const T av = a(i, p);
            const T* br = b.row(p);
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C = A^T * B   (A: k x m, B: k x n, C: m x n)
template <typename T>
void matmul_tn(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    assert(a.rows == b.rows);
    c = Mat<T>(a.cols, b.cols);
    const int n = b.cols;
    for (int p = 0; p < a.rows; ++p) {
        const T* ar = a.row(p);
        const T* br = b.row(p);
        for (int i = 0; i < a.cols; ++i) {
            const T av = ar[i];
            T* cr = c.row(i);
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

// C += A^T * B, same shapes as matmul_tn.
template <typename T>
void matmul_tn_accum(const Mat<T>& a, const Mat<T>& b, Mat<T>& c) {
    assert(a.rows == b.rows && c.rows == a.cols && c.cols == b.cols);
    const int n = b.cols;
    for (int p = 0; p < a.rows; ++p) {
        const T* ar = a.row(p);
        const T* br = b.row(p);
        for (int i = 0; i < a.cols; ++i) {
            const T av = ar[i];
            T* cr = c.row(i);
            for (int j = 0; j < n; ++j) cr[j] += av * br[j];
        }
    }
}

template <typename T>
void softmax_rows(Mat<T>& m) {
    for (int i = 0; i < m.rows; ++i) {
        T* r = m.row(i);
        T mx = r[0];
        for (int j = 1; j < m.cols; ++j) mx = std::max(mx, r[j]);
        T sum = T(0);
        for (int j = 0; j < m.cols; ++j) {
            r[j] = std::exp(r[j] - mx);
            sum += r[j];
        }
        const T inv = T(1) / sum;
        for (int j = 0; j < m.cols; ++j) r[j] *= inv;
    }
}

}  // namespace rr
