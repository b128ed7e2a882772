#pragma once

#include <cstdint>
#include <cstdio>
#include <fstream>
#include <string>
#include <vector>

#include "regionroute/common.hpp"

namespace rr {

// Interleaved HxWxC image with intensities in [0,1].
struct Image {
    int h = 0, w = 0, c = 0;
    std::vector<double> d;

    Image() = default;
    Image(int hh, int ww, int cc) : h(hh), w(ww), c(cc), d(static_cast<size_t>(hh) * ww * cc, 0.0) {}

    double& at(int y, int x, int ch) { return d[(static_cast<size_t>(y) * w + x) * c + ch]; }
    double at(int y, int x, int ch) const { return d[(static_cast<size_t>(y) * w + x) * c + ch]; }
    bool same_shape(const Image& o) const { return h == o.h && w == o.w && c == o.c; }
};

// Binary region indicator, values 0 or 1.
struct Mask {
    int h = 0, w = 0;
    std::vector<uint8_t> d;

    Mask() = default;
    Mask(int hh, int ww) : h(hh), w(ww), d(static_cast<size_t>(hh) * ww, 0) {}

    uint8_t& at(int y, int x) { return d[static_cast<size_t>(y) * w + x]; }
    uint8_t at(int y, int x) const { return d[static_cast<size_t>(y) * w + x]; }
    size_t count() const {
        size_t n = 0;
        for (uint8_t v : d) n += v ? 1 : 0;
        return n;
    }
};

// Block-averaged mask, values in [0,1].
struct SoftMask {
    int h = 0, w = 0;
    std::vector<double> d;

    SoftMask() = default;
    SoftMask(int hh, int ww) : h(hh), w(ww), d(static_cast<size_t>(hh) * ww, 0.0) {}

    double& at(int y, int x) { return d[static_cast<size_t>(y) * w + x]; }
    double at(int y, int x) const { return d[static_cast<size_t>(y) * w + x]; }
};

inline uint8_t to_byte(double v) {
    const double s = clamp01(v) * 255.0 + 0.5;
    return static_cast<uint8_t>(s > 255.0 ? 255.0 : s);
}

// --- binary PPM (P6) / PGM (P5) ---

inline void write_ppm(const std::string& path, const Image& img) {
    if (img.c != 3) throw IoError("write_ppm: expected 3 channels: " + path);
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "P6\n" << img.w << " " << img.h << "\n255\n";
    std::vector<uint8_t> buf(img.d.size());
    for (size_t i = 0; i < img.d.size(); ++i) buf[i] = to_byte(img.d[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

inline void write_pgm(const std::string& path, const Mask& m) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "P5\n" << m.w << " " << m.h << "\n255\n";
    std::vector<uint8_t> buf(m.d.size());
    for (size_t i = 0; i < m.d.size(); ++i) buf[i] = m.d[i] ? 255 : 0;
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

// Grayscale image (single channel, already in [0,1]) as PGM.
inline void write_pgm_gray(const std::string& path, int h, int w, const std::vector<double>& v) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open for write: " + path);
    f << "P5\n" << w << " " << h << "\n255\n";
    std::vector<uint8_t> buf(v.size());
    for (size_t i = 0; i < v.size(); ++i) buf[i] = to_byte(v[i]);
    f.write(reinterpret_cast<const char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("write failed: " + path);
}

namespace detail {
inline void read_pnm_header(std::ifstream& f, const std::string& magic, int& w, int& h, const std::string& path) {
    std::string m;
    f >> m;
    if (m != magic) throw IoError("bad magic in " + path);
    int maxv = 0;
    f >> w >> h >> maxv;
    if (maxv != 255) throw IoError("unsupported max value in " + path);
    f.get();  // single whitespace after header
}
}  // namespace detail

inline Image read_ppm(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    int w = 0, h = 0;
    detail::read_pnm_header(f, "P6", w, h, path);
    Image img(h, w, 3);
    std::vector<uint8_t> buf(img.d.size());
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("short read: " + path);
    for (size_t i = 0; i < buf.size(); ++i) img.d[i] = buf[i] / 255.0;
    return img;
}

inline Mask read_pgm_mask(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open: " + path);
    int w = 0, h = 0;
    detail::read_pnm_header(f, "P5", w, h, path);
    Mask m(h, w);
    std::vector<uint8_t> buf(m.d.size());
    f.read(reinterpret_cast<char*>(buf.data()), static_cast<std::streamsize>(buf.size()));
    if (!f) throw IoError("short read: " + path);
    for (size_t i = 0; i < buf.size(); ++i) m.d[i] = buf[i] >= 128 ? 1 : 0;
    return m;
}

}  // namespace rr
