#pragma once

#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regionroute/model.hpp"

namespace rr {

namespace detail {

constexpr char kCkptMagic[8] = {'R', 'R', 'C', 'K', 'P', 'T', '0', '1'};

template <typename V>
void write_pod(std::ofstream& f, V v) {
    f.write(reinterpret_cast<const char*>(&v), sizeof(V));
}

template <typename V>
V read_pod(std::ifstream& f) {
    V v{};
    f.read(reinterpret_cast<char*>(&v), sizeof(V));
    return v;
}

}  // namespace detail

template <typename T>
nlohmann::ordered_json checkpoint_header(const Model<T>& m) {
    nlohmann::ordered_json h;
    h["dim"] = m.cfg.dim;
    h["heads"] = m.cfg.heads;
    h["double_blocks"] = m.cfg.double_blocks;
    h["single_blocks"] = m.cfg.single_blocks;
    h["patch"] = m.cfg.patch;
    h["vocab"] = m.cfg.vocab;
    h["timesteps"] = m.cfg.timesteps;
    h["seed"] = m.cfg.seed;
    h["canvas_h"] = m.cfg.canvas_h;
    h["canvas_w"] = m.cfg.canvas_w;
    h["max_text"] = m.cfg.max_text;
    h["hidden_mult"] = m.cfg.hidden_mult;
    h["supervision_layers"] = m.cfg.supervision_layers;
    h["num_styles"] = m.num_styles;
    h["rank"] = m.rank;
    h["gamma"] = static_cast<double>(m.gamma);
    h["sites_double"] = m.site_map.double_stream;
    h["sites_single"] = m.site_map.single_stream;
    h["sites_attention"] = m.site_map.attention;
    h["sites_projection"] = m.site_map.projection;
    return h;
}

// Versioned binary container: config header, then named little-endian f32
// tensors. A text manifest of tensor names/shapes is written next to it.
template <typename T>
void save_checkpoint(Model<T>& m, const std::string& path) {
    std::ofstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint for write: " + path);
    f.write(detail::kCkptMagic, 8);
    detail::write_pod<uint32_t>(f, 1);
    const std::string header = checkpoint_header(m).dump();
    detail::write_pod<uint32_t>(f, static_cast<uint32_t>(header.size()));
    f.write(header.data(), static_cast<std::streamsize>(header.size()));

    auto tensors = m.all_tensors();
    detail::write_pod<uint64_t>(f, tensors.size());
    std::ofstream manifest(path + ".txt");
    for (const auto& t : tensors) {
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(t.name.size()));
        f.write(t.name.data(), static_cast<std::streamsize>(t.name.size()));
        detail::write_pod<uint32_t>(f, static_cast<uint32_t>(t.shape.size()));
        for (int d : t.shape) detail::write_pod<uint64_t>(f, static_cast<uint64_t>(d));
        std::vector<float> buf(t.value->size());
        for (size_t i = 0; i < buf.size(); ++i) buf[i] = static_cast<float>((*t.value)[i]);
        f.write(reinterpret_cast<const char*>(buf.data()),
                static_cast<std::streamsize>(buf.size() * sizeof(float)));
        if (manifest) {
            manifest << t.name;
            for (int d : t.shape) manifest << " " << d;
            manifest << "\n";
        }
    }
    if (!f) throw IoError("checkpoint write failed: " + path);
}

template <typename T>
Model<T> load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw IoError("cannot open checkpoint: " + path);
    char magic[8];
    f.read(magic, 8);
    if (!f || std::memcmp(magic, detail::kCkptMagic, 8) != 0)
        throw IoError("bad checkpoint magic: " + path);
    const auto version = detail::read_pod<uint32_t>(f);
    if (version != 1) throw IoError("unsupported checkpoint version");
    const auto hlen = detail::read_pod<uint32_t>(f);
    std::string hstr(hlen, '\0');
    f.read(hstr.data(), hlen);
    const auto h = nlohmann::json::parse(hstr);

    ModelConfig cfg;
    cfg.dim = h.at("dim");
    cfg.heads = h.at("heads");
    cfg.double_blocks = h.at("double_blocks");
    cfg.single_blocks = h.at("single_blocks");
    cfg.patch = h.at("patch");
    cfg.vocab = h.at("vocab");
    cfg.timesteps = h.at("timesteps");
    cfg.seed = h.at("seed");
    cfg.canvas_h = h.at("canvas_h");
    cfg.canvas_w = h.at("canvas_w");
    cfg.max_text = h.at("max_text");
    cfg.hidden_mult = h.at("hidden_mult");
    cfg.supervision_layers = h.at("supervision_layers").get<std::vector<int>>();
    Model<T> m = Model<T>::make(cfg);

    const int styles = h.at("num_styles");
    if (styles > 0) {
        AdapterSiteMap sites;
        sites.double_stream = h.at("sites_double");
        sites.single_stream = h.at("sites_single");
        sites.attention = h.at("sites_attention");
        sites.projection = h.at("sites_projection");
        m.attach_experts(styles, h.at("rank"), sites, cfg.seed,
                         static_cast<T>(h.at("gamma").get<double>()));
    }

    auto tensors = m.all_tensors();
    const auto count = detail::read_pod<uint64_t>(f);
    if (count != tensors.size()) throw IoError("checkpoint tensor count mismatch");
    for (auto& t : tensors) {
        const auto nlen = detail::read_pod<uint32_t>(f);
        std::string name(nlen, '\0');
        f.read(name.data(), nlen);
        if (name != t.name) throw IoError("checkpoint tensor order mismatch at " + name);
        const auto ndim = detail::read_pod<uint32_t>(f);
        size_t elems = 1;
        for (uint32_t i = 0; i < ndim; ++i) elems *= detail::read_pod<uint64_t>(f);
        if (elems != t.value->size()) throw IoError("checkpoint tensor shape mismatch at " + name);
        std::vector<float> buf(elems);
        f.read(reinterpret_cast<char*>(buf.data()),
               static_cast<std::streamsize>(buf.size() * sizeof(float)));
        for (size_t i = 0; i < elems; ++i) (*t.value)[i] = static_cast<T>(buf[i]);
    }
    if (!f) throw IoError("checkpoint read failed: " + path);
    return m;
}

}  // namespace rr
