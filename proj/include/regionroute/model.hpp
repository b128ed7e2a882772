#pragma once

#include <algorithm>
#include <cmath>
#include <functional>
#include <string>
#include <vector>

#include "regionroute/attention.hpp"
#include "regionroute/image.hpp"
#include "regionroute/linear.hpp"
#include "regionroute/schedule.hpp"
#include "regionroute/tokenizer.hpp"

namespace rr {

struct ModelConfig {
    int dim = 64;
    int heads = 4;
    int double_blocks = 2;
    int single_blocks = 2;
    int patch = 4;
    int vocab = 0;  // filled from the Vocabulary when 0
    int timesteps = 100;
    uint64_t seed = 0;
    int canvas_h = 64;
    int canvas_w = 64;
    int max_text = 16;
    int hidden_mult = 2;
    std::vector<int> supervision_layers;  // default: all double-stream blocks

    int grid_h() const { return canvas_h / patch; }
    int grid_w() const { return canvas_w / patch; }
    int num_image_tokens() const { return grid_h() * grid_w(); }
    int patch_dim() const { return patch * patch * 3; }

    void validate() const {
        if (dim % heads != 0) throw ConfigError("dim must be divisible by heads");
        if (double_blocks < 1 || single_blocks < 1) throw ConfigError("need at least one block per family");
        if (timesteps < 2) throw ConfigError("timesteps must be >= 2");
        if (canvas_h % patch != 0 || canvas_w % patch != 0)
            throw ConfigError("canvas must be divisible by the patch size");
    }

    std::vector<int> effective_supervision_layers() const {
        if (!supervision_layers.empty()) return supervision_layers;
        std::vector<int> l(static_cast<size_t>(double_blocks));
        for (int i = 0; i < double_blocks; ++i) l[static_cast<size_t>(i)] = i;
        return l;
    }
};

// Which backbone sites carry LoRA experts.
struct AdapterSiteMap {
    bool double_stream = true;
    bool single_stream = true;
    bool attention = true;   // Q, K, V, attention output
    bool projection = true;  // feed-forward projections
};

template <typename T>
struct LayerNormCache {
    Mat<T> xhat;
    std::vector<T> inv_std;
};

template <typename T>
struct LayerNorm {
    std::vector<T> gamma, beta;

    void init(int dim) {
        gamma.assign(static_cast<size_t>(dim), T(1));
        beta.assign(static_cast<size_t>(dim), T(0));
    }

    void forward(const Mat<T>& x, Mat<T>& y, LayerNormCache<T>* cache) const {
        const int d = x.cols;
        y = Mat<T>(x.rows, d);
        Mat<T> xhat;
        std::vector<T> istd;
        if (cache) {
            xhat = Mat<T>(x.rows, d);
            istd.assign(static_cast<size_t>(x.rows), T(0));
        }
        for (int i = 0; i < x.rows; ++i) {
            const T* xr = x.row(i);
            T mean = T(0);
            for (int j = 0; j < d; ++j) mean += xr[j];
            mean /= static_cast<T>(d);
            T var = T(0);
            for (int j = 0; j < d; ++j) {
                const T c = xr[j] - mean;
                var += c * c;
            }
            var /= static_cast<T>(d);
            const T inv = T(1) / std::sqrt(var + static_cast<T>(1e-6));
            T* yr = y.row(i);
            for (int j = 0; j < d; ++j) {
                const T h = (xr[j] - mean) * inv;
                yr[j] = h * gamma[static_cast<size_t>(j)] + beta[static_cast<size_t>(j)];
                if (cache) xhat(i, j) = h;
            }
            if (cache) istd[static_cast<size_t>(i)] = inv;
        }
        if (cache) {
            cache->xhat = std::move(xhat);
            cache->inv_std = std::move(istd);
        }
    }

    void backward(const LayerNormCache<T>& cache, const Mat<T>& dy, Mat<T>& dx) const {
        const int d = dy.cols;
        dx = Mat<T>(dy.rows, d);
        for (int i = 0; i < dy.rows; ++i) {
            const T* dyr = dy.row(i);
            const T* hr = cache.xhat.row(i);
            T mean_dh = T(0), mean_dhh = T(0);
            for (int j = 0; j < d; ++j) {
                const T dh = dyr[j] * gamma[static_cast<size_t>(j)];
                mean_dh += dh;
                mean_dhh += dh * hr[j];
            }
            mean_dh /= static_cast<T>(d);
            mean_dhh /= static_cast<T>(d);
            const T inv = cache.inv_std[static_cast<size_t>(i)];
            T* dxr = dx.row(i);
            for (int j = 0; j < d; ++j) {
                const T dh = dyr[j] * gamma[static_cast<size_t>(j)];
                dxr[j] = inv * (dh - mean_dh - hr[j] * mean_dhh);
            }
        }
    }
};

template <typename T>
inline T gelu(T x) {
    return T(0.5) * x * (T(1) + std::erf(x / std::sqrt(T(2))));
}

template <typename T>
inline T gelu_grad(T x) {
    const T cdf = T(0.5) * (T(1) + std::erf(x / std::sqrt(T(2))));
    const T pdf = std::exp(-x * x / T(2)) / std::sqrt(T(2) * static_cast<T>(M_PI));
    return cdf + x * pdf;
}

// One projection set: pre-LN attention projections plus the feed-forward pair.
template <typename T>
struct BlockWeights {
    LayerNorm<T> ln1, ln2;
    LoraLinear<T> q, k, v, o, m1, m2;

    void init(const std::string& prefix, StreamTag tag, int dim, int hidden, Rng& rng) {
        ln1.init(dim);
        ln2.init(dim);
        const T std_attn = static_cast<T>(1.0 / std::sqrt(static_cast<double>(dim)));
        auto setup = [&](LoraLinear<T>& l, const std::string& n, int out, int in, T sd) {
            l.init(out, in, rng, sd);
            l.name = prefix + "/" + n;
            l.stream = tag;
        };
        setup(q, "q", dim, dim, std_attn);
        setup(k, "k", dim, dim, std_attn);
        setup(v, "v", dim, dim, std_attn);
        setup(o, "o", dim, dim, std_attn);
        setup(m1, "m1", hidden, dim, std_attn);
        setup(m2, "m2", dim, hidden, static_cast<T>(1.0 / std::sqrt(static_cast<double>(hidden))));
    }
};

template <typename T>
struct PartCache {
    LayerNormCache<T> ln1, ln2;
    LinearCache<T> q, k, v, o, m1, m2;
    Mat<T> mlp_pre;  // m1 output before the nonlinearity
};

template <typename T>
struct BlockCache {
    std::vector<PartCache<T>> parts;
    std::vector<Mat<T>> qh, kh, vh;  // per-head projections
    std::vector<Mat<T>> probs;       // per-head post-softmax scores
    Mat<T> merged;                   // concatenated head outputs
    Mat<T> x_after_attn;             // residual input to the MLP half
};

// Extra gradient injected into post-softmax attention scores of supervised
// blocks: d/dP[p, col] += coef * d_map[p] for image-query rows p.
template <typename T>
struct SupervisionGrad {
    std::vector<int> layers;
    std::vector<T> d_map;    // one entry per noisy-image token
    std::vector<int> cols;   // absolute sequence positions of the style tokens
    T coef = T(0);
};

template <typename T>
struct TransformerBlock {
    int layer_id = 0;
    bool is_double = false;
    BlockWeights<T> img, txt;  // txt unused for single-stream blocks

    struct Part {
        BlockWeights<T>* w;
        int r0, r1;
    };

    std::vector<Part> parts(int n_img_rows, int n_total) {
        if (is_double)
            return {{&img, 0, n_img_rows}, {&txt, n_img_rows, n_total}};
        return {{&img, 0, n_total}};
    }

    void forward(Mat<T>& x, int heads, int n_img_rows, BlockCache<T>* cache) {
        const int n = x.rows, dim = x.cols;
        auto ps = parts(n_img_rows, n);
        BlockCache<T> local;
        BlockCache<T>& c = cache ? *cache : local;
        c.parts.resize(ps.size());

        // Attention half.
        Mat<T> qm(n, dim), km(n, dim), vm(n, dim);
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps[pi];
            auto& pc = c.parts[pi];
            Mat<T> xin(p.r1 - p.r0, dim);
            for (int i = p.r0; i < p.r1; ++i)
                std::copy(x.row(i), x.row(i) + dim, xin.row(i - p.r0));
            Mat<T> h;
            p.w->ln1.forward(xin, h, cache ? &pc.ln1 : nullptr);
            Mat<T> qp, kp, vp;
            p.w->q.forward(h, qp, cache ? &pc.q : nullptr);
            p.w->k.forward(h, kp, cache ? &pc.k : nullptr);
            p.w->v.forward(h, vp, cache ? &pc.v : nullptr);
            for (int i = p.r0; i < p.r1; ++i) {
                std::copy(qp.row(i - p.r0), qp.row(i - p.r0) + dim, qm.row(i));
                std::copy(kp.row(i - p.r0), kp.row(i - p.r0) + dim, km.row(i));
                std::copy(vp.row(i - p.r0), vp.row(i - p.r0) + dim, vm.row(i));
            }
        }
        split_heads(qm, heads, c.qh);
        split_heads(km, heads, c.kh);
        split_heads(vm, heads, c.vh);
        auto head_out = joint_attention(c.qh, c.kh, c.vh, &c.probs);
        merge_heads(head_out, c.merged);
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps[pi];
            auto& pc = c.parts[pi];
            Mat<T> min(p.r1 - p.r0, dim);
            for (int i = p.r0; i < p.r1; ++i)
                std::copy(c.merged.row(i), c.merged.row(i) + dim, min.row(i - p.r0));
            Mat<T> oo;
            p.w->o.forward(min, oo, cache ? &pc.o : nullptr);
            for (int i = p.r0; i < p.r1; ++i) {
                const T* src = oo.row(i - p.r0);
                T* dst = x.row(i);
                for (int j = 0; j < dim; ++j) dst[j] += src[j];
            }
        }
        if (cache) c.x_after_attn = x;

        // Feed-forward half.
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps[pi];
            auto& pc = c.parts[pi];
            Mat<T> xin(p.r1 - p.r0, dim);
            for (int i = p.r0; i < p.r1; ++i)
                std::copy(x.row(i), x.row(i) + dim, xin.row(i - p.r0));
            Mat<T> h, u, z;
            p.w->ln2.forward(xin, h, cache ? &pc.ln2 : nullptr);
            p.w->m1.forward(h, u, cache ? &pc.m1 : nullptr);
            if (cache) pc.mlp_pre = u;
            for (auto& val : u.d) val = gelu(val);
            p.w->m2.forward(u, z, cache ? &pc.m2 : nullptr);
            for (int i = p.r0; i < p.r1; ++i) {
                const T* src = z.row(i - p.r0);
                T* dst = x.row(i);
                for (int j = 0; j < dim; ++j) dst[j] += src[j];
            }
        }
    }

    void backward(Mat<T>& dx, int heads, int n_img_rows, BlockCache<T>& c,
                  const SupervisionGrad<T>* sup, bool accum) {
        const int n = dx.rows, dim = dx.cols;
        auto ps = parts(n_img_rows, n);

        // Feed-forward half (residual: dx flows through both branches).
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps[pi];
            auto& pc = c.parts[pi];
            Mat<T> dz(p.r1 - p.r0, dim);
            for (int i = p.r0; i < p.r1; ++i)
                std::copy(dx.row(i), dx.row(i) + dim, dz.row(i - p.r0));
            Mat<T> du;
            p.w->m2.backward(pc.m2, dz, du, accum);
            for (size_t i = 0; i < du.d.size(); ++i) du.d[i] *= gelu_grad(pc.mlp_pre.d[i]);
            Mat<T> dh, dxin;
            p.w->m1.backward(pc.m1, du, dh, accum);
            p.w->ln2.backward(pc.ln2, dh, dxin);
            for (int i = p.r0; i < p.r1; ++i) {
                const T* src = dxin.row(i - p.r0);
                T* dst = dx.row(i);
                for (int j = 0; j < dim; ++j) dst[j] += src[j];
            }
        }

        // Attention half.
        Mat<T> dmerged(n, dim);
        for (size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps[pi];
            auto& pc = c.parts[pi];
            Mat<T> do_(p.r1 - p.r0, dim);
            for (int i = p.r0; i < p.r1; ++i)
                std::copy(dx.row(i), dx.row(i) + dim, do_.row(i - p.r0));
            Mat<T> dmin;
            p.w->o.backward(pc.o, do_, dmin, accum);
            for (int i = p.r0; i < p.r1; ++i)
                std::copy(dmin.row(i - p.r0), dmin.row(i - p.r0) + dim, dmerged.row(i));
        }
        std::vector<Mat<T>> dho;
        split_heads(dmerged, heads, dho);

        const int dh_dim = dim / heads;
        const T inv_sqrt = T(1) / std::sqrt(static_cast<T>(dh_dim));
        Mat<T> dqm(n, dim), dkm(n, dim), dvm(n, dim);
        for (int h = 0; h < heads; ++h) {
            const Mat<T>& P = c.probs[static_cast<size_t>(h)];
            Mat<T> dp;
            matmul_nt(dho[static_cast<size_t>(h)], c.vh[static_cast<size_t>(h)], dp);
            if (sup && std::find(sup->layers.begin(), sup->layers.end(), layer_id) != sup->layers.end()) {
                for (size_t p = 0; p < sup->d_map.size(); ++p)
                    for (int col : sup->cols)
                        dp(static_cast<int>(p), col) += sup->coef * sup->d_map[p];
            }
            Mat<T> dvh;
            matmul_tn(P, dho[static_cast<size_t>(h)], dvh);
            Mat<T> ds;
            softmax_backward_rows(P, dp, ds);
            for (auto& val : ds.d) val *= inv_sqrt;
            Mat<T> dqh, dkh;
            matmul_nn(ds, c.kh[static_cast<size_t>(h)], dqh);
            matmul_tn(ds, c.qh[static_cast<size_t>(h)], dkh);
            for (int i = 0; i < n; ++i) {
                T* dq = dqm.row(i) + h * dh_dim;
                T* dk = dkm.row(i) + h * dh_dim;
                T* dv = dvm.row(i) + h * dh_dim;
                for (int j = 0; j < dh_dim; ++j) {
                    dq[j] = dqh(i, j);
                    dk[j] = dkh(i, j);
                    dv[j] = dvh(i, j);
                }
            }
        }

        for (size_t pi = 0; pi < ps.size(); ++pi) {
            auto& p = ps[pi];
            auto& pc = c.parts[pi];
            const int rows = p.r1 - p.r0;
            Mat<T> dqp(rows, dim), dkp(rows, dim), dvp(rows, dim);
            for (int i = p.r0; i < p.r1; ++i) {
                std::copy(dqm.row(i), dqm.row(i) + dim, dqp.row(i - p.r0));
                std::copy(dkm.row(i), dkm.row(i) + dim, dkp.row(i - p.r0));
                std::copy(dvm.row(i), dvm.row(i) + dim, dvp.row(i - p.r0));
            }
            Mat<T> dh1, dh2, dh3, dxin;
            p.w->q.backward(pc.q, dqp, dh1, accum);
            p.w->k.backward(pc.k, dkp, dh2, accum);
            p.w->v.backward(pc.v, dvp, dh3, accum);
            for (size_t i = 0; i < dh1.d.size(); ++i) dh1.d[i] += dh2.d[i] + dh3.d[i];
            p.w->ln1.backward(pc.ln1, dh1, dxin);
            for (int i = p.r0; i < p.r1; ++i) {
                const T* src = dxin.row(i - p.r0);
                T* dst = dx.row(i);
                for (int j = 0; j < dim; ++j) dst[j] += src[j];
            }
        }
    }
};

template <typename T>
struct ForwardCache {
    std::vector<BlockCache<T>> blocks;
    LayerNormCache<T> final_ln;
    LinearCache<T> head;
    int n_img = 0, n_ctx = 0, n_txt = 0;
};

// Reference to one named parameter tensor plus its gradient buffer.
template <typename T>
struct TensorRef {
    std::string name;
    std::vector<T>* value = nullptr;
    std::vector<T>* grad = nullptr;  // null for frozen tensors
    std::vector<int> shape;
};

template <typename T>
struct Model {
    ModelConfig cfg;
    Vocabulary vocab;
    DiffusionSchedule<T> schedule;

    LoraLinear<T> patch_embed;  // patch_dim -> dim
    Mat<T> tok_embed;           // vocab x dim
    Mat<T> pos_grid;            // num_image_tokens x dim, shared by noisy/context grids
    Mat<T> pos_txt;             // max_text x dim
    Mat<T> type_emb;            // 3 x dim: noisy image, context, text
    std::vector<TransformerBlock<T>> blocks;
    LayerNorm<T> final_ln;
    LoraLinear<T> head;  // dim -> patch_dim

    int num_styles = 0;
    int rank = 0;
    T gamma = T(1);
    AdapterSiteMap site_map;

    static Model make(const ModelConfig& config) {
        ModelConfig cfg = config;
        cfg.validate();
        Model m;
        m.vocab = Vocabulary::standard();
        if (cfg.vocab == 0) cfg.vocab = m.vocab.size();
        m.cfg = cfg;
        m.schedule = DiffusionSchedule<T>::cosine(cfg.timesteps);

        Rng rng(derive_seed(cfg.seed, 0xD17));
        const T emb_std = static_cast<T>(0.02);
        m.patch_embed.init(cfg.dim, cfg.patch_dim(), rng, static_cast<T>(1.0 / std::sqrt(cfg.patch_dim())));
        m.patch_embed.name = "embed/patch";
        auto init_table = [&](Mat<T>& t, int r) {
            t = Mat<T>(r, cfg.dim);
            std::normal_distribution<double> N(0.0, static_cast<double>(emb_std));
            for (auto& v : t.d) v = static_cast<T>(N(rng));
        };
        init_table(m.tok_embed, cfg.vocab);
        init_table(m.pos_grid, cfg.num_image_tokens());
        init_table(m.pos_txt, cfg.max_text);
        init_table(m.type_emb, 3);

        const int hidden = cfg.dim * cfg.hidden_mult;
        m.blocks.resize(static_cast<size_t>(cfg.double_blocks + cfg.single_blocks));
        for (int i = 0; i < cfg.double_blocks; ++i) {
            auto& b = m.blocks[static_cast<size_t>(i)];
            b.layer_id = i;
            b.is_double = true;
            b.img.init("double" + std::to_string(i) + "/img", StreamTag::DoubleStream, cfg.dim, hidden, rng);
            b.txt.init("double" + std::to_string(i) + "/txt", StreamTag::DoubleStream, cfg.dim, hidden, rng);
        }
        for (int i = 0; i < cfg.single_blocks; ++i) {
            auto& b = m.blocks[static_cast<size_t>(cfg.double_blocks + i)];
            b.layer_id = cfg.double_blocks + i;
            b.is_double = false;
            b.img.init("single" + std::to_string(i), StreamTag::SingleStream, cfg.dim, hidden, rng);
        }
        m.final_ln.init(cfg.dim);
        m.head.init(cfg.patch_dim(), cfg.dim, rng, static_cast<T>(0.02));
        m.head.name = "head";
        return m;
    }

    // --- LoRA management ---

    void for_each_site(const std::function<void(LoraLinear<T>&)>& fn) {
        for (auto& b : blocks) {
            for (BlockWeights<T>* w : b.is_double
                                          ? std::vector<BlockWeights<T>*>{&b.img, &b.txt}
                                          : std::vector<BlockWeights<T>*>{&b.img}) {
                fn(w->q);
                fn(w->k);
                fn(w->v);
                fn(w->o);
                fn(w->m1);
                fn(w->m2);
            }
        }
    }

    bool site_selected(const LoraLinear<T>& l, const AdapterSiteMap& sites) const {
        if (l.stream == StreamTag::DoubleStream && !sites.double_stream) return false;
        if (l.stream == StreamTag::SingleStream && !sites.single_stream) return false;
        const bool is_proj = l.name.size() >= 2 && l.name[l.name.size() - 2] == 'm';
        return is_proj ? sites.projection : sites.attention;
    }

    void attach_experts(int styles, int r, const AdapterSiteMap& sites, uint64_t seed,
                        T gamma_scale = T(1)) {
        if (num_styles > 0) throw ConfigError("experts already attached");
        if (styles < 1) throw ConfigError("need at least one style");
        num_styles = styles;
        rank = r;
        gamma = gamma_scale;
        site_map = sites;
        Rng rng(derive_seed(seed, 0x10AA));
        for_each_site([&](LoraLinear<T>& l) {
            if (site_selected(l, sites)) l.attach(styles, r, gamma_scale, rng);
        });
    }

    int route_expert(int style_id) const {
        if (style_id < 0 || style_id >= num_styles)
            throw ConfigError("style_id out of range: " + std::to_string(style_id));
        return style_id;  // hard one-to-one routing
    }

    void set_active_expert(int style_id) {
        const int e = style_id < 0 ? -1 : route_expert(style_id);
        for_each_site([&](LoraLinear<T>& l) { l.active = l.has_experts() ? e : -1; });
    }

    void zero_expert_grads() {
        for_each_site([](LoraLinear<T>& l) {
            for (auto& e : l.experts) {
                e.gA.zero();
                e.gB.zero();
            }
        });
    }

    std::vector<TensorRef<T>> collect_expert_params(int style_id) {
        route_expert(style_id);
        std::vector<TensorRef<T>> out;
        for_each_site([&](LoraLinear<T>& l) {
            if (!l.has_experts()) return;
            auto& e = l.experts[static_cast<size_t>(style_id)];
            out.push_back({"expert/" + std::to_string(style_id) + "/" + l.name + "/A", &e.A.d,
                           &e.gA.d, {e.A.rows, e.A.cols}});
            out.push_back({"expert/" + std::to_string(style_id) + "/" + l.name + "/B", &e.B.d,
                           &e.gB.d, {e.B.rows, e.B.cols}});
        });
        return out;
    }

    // All tensors in a stable order (backbone first, then experts).
    std::vector<TensorRef<T>> all_tensors() {
        std::vector<TensorRef<T>> out;
        auto add = [&](const std::string& n, std::vector<T>& v, std::vector<int> shape) {
            out.push_back({n, &v, nullptr, std::move(shape)});
        };
        add("embed/patch/W", patch_embed.W.d, {patch_embed.W.rows, patch_embed.W.cols});
        add("embed/patch/b", patch_embed.bias, {static_cast<int>(patch_embed.bias.size())});
        add("embed/tok", tok_embed.d, {tok_embed.rows, tok_embed.cols});
        add("embed/pos_grid", pos_grid.d, {pos_grid.rows, pos_grid.cols});
        add("embed/pos_txt", pos_txt.d, {pos_txt.rows, pos_txt.cols});
        add("embed/type", type_emb.d, {type_emb.rows, type_emb.cols});
        for_each_site([&](LoraLinear<T>& l) {
            add(l.name + "/W", l.W.d, {l.W.rows, l.W.cols});
            add(l.name + "/b", l.bias, {static_cast<int>(l.bias.size())});
        });
        for (auto& b : blocks) {
            for (BlockWeights<T>* w : b.is_double
                                          ? std::vector<BlockWeights<T>*>{&b.img, &b.txt}
                                          : std::vector<BlockWeights<T>*>{&b.img}) {
                const std::string p = w->q.name.substr(0, w->q.name.size() - 2);
                add(p + "/ln1/g", w->ln1.gamma, {static_cast<int>(w->ln1.gamma.size())});
                add(p + "/ln1/b", w->ln1.beta, {static_cast<int>(w->ln1.beta.size())});
                add(p + "/ln2/g", w->ln2.gamma, {static_cast<int>(w->ln2.gamma.size())});
                add(p + "/ln2/b", w->ln2.beta, {static_cast<int>(w->ln2.beta.size())});
            }
        }
        add("final_ln/g", final_ln.gamma, {static_cast<int>(final_ln.gamma.size())});
        add("final_ln/b", final_ln.beta, {static_cast<int>(final_ln.beta.size())});
        add("head/W", head.W.d, {head.W.rows, head.W.cols});
        add("head/b", head.bias, {static_cast<int>(head.bias.size())});
        for (int s = 0; s < num_styles; ++s) {
            auto refs = collect_expert_params(s);
            out.insert(out.end(), refs.begin(), refs.end());
        }
        return out;
    }

    // --- token assembly ---

    Mat<T> patchify(const std::vector<T>& img) const {
        const int gh = cfg.grid_h(), gw = cfg.grid_w(), p = cfg.patch;
        Mat<T> out(gh * gw, cfg.patch_dim());
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                T* r = out.row(gy * gw + gx);
                int idx = 0;
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        for (int ch = 0; ch < 3; ++ch)
                            r[idx++] = img[((static_cast<size_t>(gy * p + dy)) * cfg.canvas_w +
                                            (gx * p + dx)) * 3 + ch];
            }
        return out;
    }

    std::vector<T> unpatchify(const Mat<T>& patches) const {
        const int gh = cfg.grid_h(), gw = cfg.grid_w(), p = cfg.patch;
        std::vector<T> img(static_cast<size_t>(cfg.canvas_h) * cfg.canvas_w * 3, T(0));
        for (int gy = 0; gy < gh; ++gy)
            for (int gx = 0; gx < gw; ++gx) {
                const T* r = patches.row(gy * gw + gx);
                int idx = 0;
                for (int dy = 0; dy < p; ++dy)
                    for (int dx = 0; dx < p; ++dx)
                        for (int ch = 0; ch < 3; ++ch)
                            img[((static_cast<size_t>(gy * p + dy)) * cfg.canvas_w +
                                 (gx * p + dx)) * 3 + ch] = r[idx++];
            }
        return img;
    }

    std::vector<T> time_features(int t) const {
        std::vector<T> f(static_cast<size_t>(cfg.dim), T(0));
        const int half = cfg.dim / 2;
        const double pos = static_cast<double>(t);
        for (int j = 0; j < half; ++j) {
            const double w = std::exp(-std::log(10000.0) * j / std::max(1, half - 1));
            f[static_cast<size_t>(j)] = static_cast<T>(std::sin(pos * w));
            f[static_cast<size_t>(half + j)] = static_cast<T>(std::cos(pos * w));
        }
        return f;
    }

    // x_t and context are flattened h*w*3 arrays in model space ([-1,1] data range).
    Mat<T> assemble_tokens(const std::vector<T>& x_t, const std::vector<T>& context,
                           const std::vector<int>& token_ids, int t) const {
        const int ng = cfg.num_image_tokens();
        const int nt = static_cast<int>(token_ids.size());
        if (nt > cfg.max_text) throw ConfigError("prompt longer than max_text");
        Mat<T> x(2 * ng + nt, cfg.dim);

        Mat<T> xe, ce;
        patch_embed.forward(patchify(x_t), xe, nullptr);
        patch_embed.forward(patchify(context), ce, nullptr);
        const auto temb = time_features(t);
        for (int i = 0; i < ng; ++i) {
            T* r = x.row(i);
            const T* e = xe.row(i);
            const T* pp = pos_grid.row(i);
            const T* ty = type_emb.row(0);
            for (int j = 0; j < cfg.dim; ++j) r[j] = e[j] + pp[j] + ty[j] + temb[static_cast<size_t>(j)];
        }
        for (int i = 0; i < ng; ++i) {
            T* r = x.row(ng + i);
            const T* e = ce.row(i);
            const T* pp = pos_grid.row(i);
            const T* ty = type_emb.row(1);
            for (int j = 0; j < cfg.dim; ++j) r[j] = e[j] + pp[j] + ty[j];
        }
        for (int i = 0; i < nt; ++i) {
            const int id = token_ids[static_cast<size_t>(i)];
            if (id < 0 || id >= cfg.vocab) throw ConfigError("token id out of range");
            T* r = x.row(2 * ng + i);
            const T* e = tok_embed.row(id);
            const T* pp = pos_txt.row(i);
            const T* ty = type_emb.row(2);
            for (int j = 0; j < cfg.dim; ++j) r[j] = e[j] + pp[j] + ty[j];
        }
        return x;
    }

    // --- forward / backward ---

    std::vector<T> forward(const std::vector<T>& x_t, const std::vector<T>& context,
                           const std::vector<int>& token_ids, int t, int style_id,
                           bool capture, std::vector<AttentionRecord<T>>* records,
                           ForwardCache<T>* cache = nullptr) {
        if (num_styles > 0) set_active_expert(style_id);
        else if (style_id >= 0) throw ConfigError("style routing requires attached experts");

        const int ng = cfg.num_image_tokens();
        Mat<T> x = assemble_tokens(x_t, context, token_ids, t);
        const int n_img_rows = 2 * ng;
        if (cache) {
            cache->blocks.resize(blocks.size());
            cache->n_img = ng;
            cache->n_ctx = ng;
            cache->n_txt = static_cast<int>(token_ids.size());
        }
        const auto sup_layers = cfg.effective_supervision_layers();
        for (size_t bi = 0; bi < blocks.size(); ++bi) {
            BlockCache<T>* bc = cache ? &cache->blocks[bi] : nullptr;
            BlockCache<T> tmp;
            const bool want_probs =
                capture && std::find(sup_layers.begin(), sup_layers.end(),
                                     blocks[bi].layer_id) != sup_layers.end();
            blocks[bi].forward(x, cfg.heads, n_img_rows, bc ? bc : (want_probs ? &tmp : nullptr));
            if (want_probs && records) {
                const BlockCache<T>& src = bc ? *bc : tmp;
                AttentionRecord<T> rec;
                rec.layer = blocks[bi].layer_id;
                rec.probs = src.probs;
                records->push_back(std::move(rec));
            }
        }

        Mat<T> xl;
        final_ln.forward(x, xl, cache ? &cache->final_ln : nullptr);
        Mat<T> img_rows(ng, cfg.dim);
        for (int i = 0; i < ng; ++i) std::copy(xl.row(i), xl.row(i) + cfg.dim, img_rows.row(i));
        Mat<T> patches;
        head.forward(img_rows, patches, cache ? &cache->head : nullptr);
        return unpatchify(patches);
    }

    void backward(ForwardCache<T>& cache, const std::vector<T>& d_eps_hat,
                  const SupervisionGrad<T>* sup, bool accum = true) {
        const int ng = cfg.num_image_tokens();
        const int n = 2 * ng + cache.n_txt;

        Mat<T> dpatches = patchify(d_eps_hat);
        Mat<T> d_img_rows;
        head.backward(cache.head, dpatches, d_img_rows, false);
        Mat<T> dxl(n, cfg.dim);
        for (int i = 0; i < ng; ++i)
            std::copy(d_img_rows.row(i), d_img_rows.row(i) + cfg.dim, dxl.row(i));
        Mat<T> dx;
        final_ln.backward(cache.final_ln, dxl, dx);

        for (size_t bi = blocks.size(); bi-- > 0;)
            blocks[bi].backward(dx, cfg.heads, 2 * ng, cache.blocks[bi], sup, accum);
    }

    // --- sampling ---

    static std::vector<T> image_to_model(const Image& img) {
        std::vector<T> v(img.d.size());
        for (size_t i = 0; i < img.d.size(); ++i) v[i] = static_cast<T>(img.d[i] * 2.0 - 1.0);
        return v;
    }

    static Image model_to_image(const std::vector<T>& v, int h, int w) {
        Image img(h, w, 3);
        for (size_t i = 0; i < v.size(); ++i) img.d[i] = clamp01((static_cast<double>(v[i]) + 1.0) / 2.0);
        return img;
    }

    std::vector<int> ddim_timesteps(int steps) const {
        if (steps < 1) throw ConfigError("sampler needs at least one step");
        steps = std::min(steps, cfg.timesteps);
        if (steps == 1) return {cfg.timesteps};
        std::vector<int> ts(static_cast<size_t>(steps));
        for (int i = 0; i < steps; ++i)
            ts[static_cast<size_t>(i)] = 1 + static_cast<int>(
                std::llround(static_cast<double>(i) * (cfg.timesteps - 1) / (steps - 1)));
        return ts;  // ascending
    }

    // Deterministic DDIM (eta = 0) reverse process, optionally reporting the
    // aggregated style attention after each sampler step.
    Image sample_edit(const Image& context, const std::string& prompt, int steps, uint64_t seed,
                      const std::function<void(int /*step*/, const std::vector<AttentionRecord<T>>&,
                                               const TokenizedPrompt&)>& on_step = nullptr) {
        const auto tok = tokenize_prompt(prompt, vocab);
        const int style = num_styles > 0 ? route_expert(tok.style_id) : -1;
        const auto ctx = image_to_model(context);

        std::vector<T> x(static_cast<size_t>(cfg.canvas_h) * cfg.canvas_w * 3);
        Rng rng(derive_seed(seed, 0x5A3D));
        std::normal_distribution<double> N(0.0, 1.0);
        for (auto& v : x) v = static_cast<T>(N(rng));

        const auto ts = ddim_timesteps(steps);
        for (size_t i = ts.size(); i-- > 0;) {
            const int t = ts[i];
            std::vector<AttentionRecord<T>> recs;
            const bool want = static_cast<bool>(on_step);
            const auto eps_hat = forward(x, ctx, tok.ids, t, style, want, want ? &recs : nullptr);
            const T a = schedule.signal(t), b = schedule.noise(t);
            std::vector<T> x0(x.size());
            for (size_t j = 0; j < x.size(); ++j) {
                T v = (x[j] - b * eps_hat[j]) / a;
                x0[j] = std::clamp(v, T(-1), T(1));
            }
            if (want) on_step(static_cast<int>(ts.size() - i), recs, tok);
            if (i == 0) {
                x = std::move(x0);
            } else {
                const int tp = ts[i - 1];
                const T ap = schedule.signal(tp), bp = schedule.noise(tp);
                for (size_t j = 0; j < x.size(); ++j) x[j] = ap * x0[j] + bp * eps_hat[j];
            }
        }
        return model_to_image(x, cfg.canvas_h, cfg.canvas_w);
    }
};

}  // namespace rr
