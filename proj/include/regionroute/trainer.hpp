#pragma once

#include <algorithm>
#include <chrono>
#include <filesystem>
#include <fstream>
#include <map>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "regionroute/checkpoint.hpp"
#include "regionroute/dataset.hpp"
#include "regionroute/model.hpp"
#include "regionroute/supervision.hpp"

namespace rr {

struct TrainConfig {
    // model
    int dim = 64, heads = 4, double_blocks = 2, single_blocks = 2;
    int patch = 4, timesteps = 100, canvas = 64;
    std::vector<int> supervision_layers;  // empty: all double-stream blocks
    // adapters
    int num_styles = 4, rank = 4;
    double gamma = 1.0;
    bool adapt_double = true, adapt_single = true;
    // losses
    double lambda_focus = 0.1, lambda_cover = 0.2;
    double tau = 1.0, alpha = 10.0;
    // optimization
    double lr = 1e-4;
    std::string lr_schedule = "constant";  // "constant" or "cosine"
    int batch = 2, grad_accum = 4, total_steps = 200;
    double beta1 = 0.9, beta2 = 0.999, adam_eps = 1e-8;
    uint64_t seed = 0;
    int log_every = 20, ckpt_every = 0, threads = 1;

    void validate() const {
        if (lambda_focus < 0 || lambda_cover < 0) throw ConfigError("loss weights must be >= 0");
        if (lr <= 0) throw ConfigError("lr must be > 0");
        if (batch < 1 || grad_accum < 1) throw ConfigError("batch and grad_accum must be >= 1");
        if (tau <= 0 || alpha <= 0) throw ConfigError("tau and alpha must be > 0");
        if (lr_schedule != "constant" && lr_schedule != "cosine")
            throw ConfigError("lr_schedule must be \"constant\" or \"cosine\"");
    }

    // Learning rate for a 1-based step index under the configured schedule.
    double lr_at(long step) const {
        if (lr_schedule == "cosine" && total_steps > 0) {
            const double frac = static_cast<double>(std::clamp<long>(step - 1, 0, total_steps)) /
                                static_cast<double>(total_steps);
            return lr * 0.5 * (1.0 + std::cos(3.14159265358979323846 * frac));
        }
        return lr;
    }

    ModelConfig model_config() const {
        ModelConfig m;
        m.dim = dim;
        m.heads = heads;
        m.double_blocks = double_blocks;
        m.single_blocks = single_blocks;
        m.patch = patch;
        m.timesteps = timesteps;
        m.canvas_h = m.canvas_w = canvas;
        m.seed = seed;
        m.supervision_layers = supervision_layers;
        return m;
    }

    AdapterSiteMap sites() const {
        AdapterSiteMap s;
        s.double_stream = adapt_double;
        s.single_stream = adapt_single;
        return s;
    }
};

// --- key=value config file ---

inline std::map<std::string, std::string> read_kv_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("cannot open config: " + path);
    std::map<std::string, std::string> kv;
    std::string line;
    while (std::getline(f, line)) {
        const auto hash = line.find('#');
        if (hash != std::string::npos) line.resize(hash);
        const auto eq = line.find('=');
        if (eq == std::string::npos) continue;
        auto trim = [](std::string s) {
            const auto b = s.find_first_not_of(" \t\r");
            const auto e = s.find_last_not_of(" \t\r");
            return b == std::string::npos ? std::string() : s.substr(b, e - b + 1);
        };
        const std::string key = trim(line.substr(0, eq)), val = trim(line.substr(eq + 1));
        if (!key.empty()) kv[key] = val;
    }
    return kv;
}

inline void apply_config_kv(TrainConfig& c, const std::map<std::string, std::string>& kv) {
    auto geti = [&](const char* k, int& v) { if (auto it = kv.find(k); it != kv.end()) v = std::stoi(it->second); };
    auto getd = [&](const char* k, double& v) { if (auto it = kv.find(k); it != kv.end()) v = std::stod(it->second); };
    auto getb = [&](const char* k, bool& v) { if (auto it = kv.find(k); it != kv.end()) v = it->second == "1" || it->second == "true"; };
    geti("dim", c.dim);
    geti("heads", c.heads);
    geti("double_blocks", c.double_blocks);
    geti("single_blocks", c.single_blocks);
    geti("patch", c.patch);
    geti("timesteps", c.timesteps);
    geti("canvas", c.canvas);
    geti("num_styles", c.num_styles);
    geti("rank", c.rank);
    getd("gamma", c.gamma);
    getb("adapt_double", c.adapt_double);
    getb("adapt_single", c.adapt_single);
    getd("lambda_focus", c.lambda_focus);
    getd("lambda_cover", c.lambda_cover);
    getd("tau", c.tau);
    getd("alpha", c.alpha);
    getd("lr", c.lr);
    if (auto it = kv.find("lr_schedule"); it != kv.end()) c.lr_schedule = it->second;
    geti("batch", c.batch);
    geti("grad_accum", c.grad_accum);
    geti("total_steps", c.total_steps);
    geti("log_every", c.log_every);
    geti("ckpt_every", c.ckpt_every);
    geti("threads", c.threads);
    if (auto it = kv.find("seed"); it != kv.end()) c.seed = std::stoull(it->second);
    if (auto it = kv.find("supervision_layers"); it != kv.end()) {
        c.supervision_layers.clear();
        std::istringstream iss(it->second);
        std::string tok;
        while (std::getline(iss, tok, ',')) c.supervision_layers.push_back(std::stoi(tok));
    }
}

inline TrainConfig load_train_config(const std::string& path) {
    TrainConfig c;
    apply_config_kv(c, read_kv_file(path));
    c.validate();
    return c;
}

// --- losses ---

template <typename T>
struct TotalLoss {
    T eps = T(0), focus = T(0), cover = T(0), total = T(0);
};

template <typename T>
TotalLoss<T> total_loss(const std::vector<T>& eps_hat, const std::vector<T>& eps, T l_focus,
                        T l_cover, T lambda_f, T lambda_c) {
    if (eps_hat.size() != eps.size()) throw ConfigError("total_loss: shape mismatch");
    TotalLoss<T> r;
    for (size_t i = 0; i < eps.size(); ++i) {
        const T d = eps_hat[i] - eps[i];
        r.eps += d * d;
    }
    r.eps /= static_cast<T>(eps.size());
    r.focus = l_focus;
    r.cover = l_cover;
    if (!std::isfinite(static_cast<double>(r.eps))) throw ConfigError("total_loss: eps term is not finite");
    if (!std::isfinite(static_cast<double>(l_focus))) throw ConfigError("total_loss: focus term is not finite");
    if (!std::isfinite(static_cast<double>(l_cover))) throw ConfigError("total_loss: cover term is not finite");
    r.total = r.eps + lambda_f * l_focus + lambda_c * l_cover;
    return r;
}

// --- Adam ---

// Bias-corrected Adam update on one tensor; step is 1-based.
template <typename T>
void adam_step(std::vector<T>& p, const std::vector<T>& g, std::vector<T>& m, std::vector<T>& v,
               long step, T lr, T b1, T b2, T eps) {
    if (p.size() != g.size() || p.size() != m.size() || p.size() != v.size())
        throw ConfigError("adam_step: state shape mismatch");
    const T bc1 = T(1) - std::pow(b1, static_cast<T>(step));
    const T bc2 = T(1) - std::pow(b2, static_cast<T>(step));
    for (size_t i = 0; i < p.size(); ++i) {
        if (!std::isfinite(static_cast<double>(g[i]))) throw ConfigError("adam_step: non-finite gradient");
        m[i] = b1 * m[i] + (T(1) - b1) * g[i];
        v[i] = b2 * v[i] + (T(1) - b2) * g[i] * g[i];
        const T mhat = m[i] / bc1;
        const T vhat = v[i] / bc2;
        p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
    }
}

template <typename T>
struct StepReport {
    long step = 0;
    T loss_eps = T(0), loss_focus = T(0), loss_cover = T(0), total = T(0);
    T grad_norm = T(0);
    double wall_ms = 0.0;
    bool applied = false;  // whether this micro-step triggered an optimizer update
};

template <typename T>
nlohmann::ordered_json step_report_json(const StepReport<T>& r, const TrainConfig& cfg) {
    nlohmann::ordered_json j;
    j["step"] = r.step;
    j["loss_eps"] = static_cast<double>(r.loss_eps);
    j["loss_focus"] = static_cast<double>(r.loss_focus);
    j["loss_cover"] = static_cast<double>(r.loss_cover);
    j["total"] = static_cast<double>(r.total);
    j["grad_norm"] = static_cast<double>(r.grad_norm);
    j["wall_ms"] = r.wall_ms;
    j["lambda_focus"] = cfg.lambda_focus;
    j["lambda_cover"] = cfg.lambda_cover;
    j["rank"] = cfg.rank;
    j["lr"] = cfg.lr;
    return j;
}

template <typename T>
struct AdamStateSet {
    std::vector<std::vector<T>> m, v;
    long step = 0;
};

template <typename T>
class Trainer {
public:
    Trainer(Model<T>& model, const TrainConfig& cfg) : model_(model), cfg_(cfg) {
        cfg_.validate();
        sup_layers_ = model_.cfg.effective_supervision_layers();
        cur_lr_ = static_cast<T>(cfg_.lr);
    }

    // One micro-step over a same-style batch; applies Adam after grad_accum
    // accumulations. Gradients flow into the active expert only.
    StepReport<T> train_step(const std::vector<const LoadedSample*>& batch, long step_index) {
        const auto t_start = std::chrono::steady_clock::now();
        if (batch.empty()) throw ConfigError("train_step: empty batch");
        const int style = batch[0]->style_id;
        for (const auto* s : batch)
            if (s->style_id != style)
                throw ConfigError("train_step: mixed-style batch is not supported");

        StepReport<T> rep;
        rep.step = step_index;
        const int gh = model_.cfg.grid_h(), gw = model_.cfg.grid_w();
        const T inv_scale = T(1) / (static_cast<T>(batch.size()) * static_cast<T>(cfg_.grad_accum));

        // Noise draws depend only on (step index, position in batch) so a
        // repeated call with the same step index sees the same (t, eps).
        micro_in_step_ = 0;
        for (const auto* s : batch) {
            const auto tok = tokenize_prompt(s->prompt, model_.vocab);
            const auto x0 = Model<T>::image_to_model(s->target);
            const auto ctx = Model<T>::image_to_model(s->context);

            Rng rng(derive_seed(cfg_.seed, 0xBEEF00ULL + static_cast<uint64_t>(step_index) * 131 +
                                              static_cast<uint64_t>(micro_in_step_++)));
            std::uniform_int_distribution<int> tdist(1, model_.cfg.timesteps);
            const int t = tdist(rng);
            std::vector<T> eps(x0.size());
            std::normal_distribution<double> N(0.0, 1.0);
            for (auto& v : eps) v = static_cast<T>(N(rng));
            const auto x_t = add_noise(x0, eps, t, model_.schedule);

            std::vector<AttentionRecord<T>> records;
            ForwardCache<T> cache;
            const auto eps_hat =
                model_.forward(x_t, ctx, tok.ids, t, style, true, &records, &cache);

            std::vector<int> cols(tok.style_token_indices.size());
            for (size_t i = 0; i < cols.size(); ++i)
                cols[i] = 2 * model_.cfg.num_image_tokens() + tok.style_token_indices[i];
            const auto map = aggregate_style_attention(records, sup_layers_, cols, gh, gw);

            SupervisionTarget<T> target;
            const auto soft = downsample_mask(s->mask, gh, gw);
            target.mask.assign(soft.d.size(), T(0));
            for (size_t i = 0; i < soft.d.size(); ++i) target.mask[i] = static_cast<T>(soft.d[i]);
            target.tau = static_cast<T>(cfg_.tau);
            target.alpha = static_cast<T>(cfg_.alpha);

            const auto focus = focus_loss(map.values, target);
            const auto cover = cover_loss(map.values, target);
            const auto losses = total_loss(eps_hat, eps, focus.loss, cover.loss,
                                           static_cast<T>(cfg_.lambda_focus),
                                           static_cast<T>(cfg_.lambda_cover));
            rep.loss_eps += losses.eps / static_cast<T>(batch.size());
            rep.loss_focus += losses.focus / static_cast<T>(batch.size());
            rep.loss_cover += losses.cover / static_cast<T>(batch.size());
            rep.total += losses.total / static_cast<T>(batch.size());

            // d(mean squared error)/d eps_hat, scaled for batch and accumulation.
            std::vector<T> d_eps(eps_hat.size());
            const T c = T(2) / static_cast<T>(eps_hat.size()) * inv_scale;
            for (size_t i = 0; i < d_eps.size(); ++i) d_eps[i] = c * (eps_hat[i] - eps[i]);

            SupervisionGrad<T> sup;
            sup.layers = sup_layers_;
            sup.cols = cols;
            sup.coef = T(1) / (static_cast<T>(sup_layers_.size()) * static_cast<T>(model_.cfg.heads) *
                               static_cast<T>(cols.size()));
            sup.d_map.assign(map.size(), T(0));
            for (size_t i = 0; i < sup.d_map.size(); ++i)
                sup.d_map[i] = (static_cast<T>(cfg_.lambda_focus) * focus.grad[i] +
                                static_cast<T>(cfg_.lambda_cover) * cover.grad[i]) * inv_scale;
            const bool supervise = cfg_.lambda_focus > 0 || cfg_.lambda_cover > 0;
            model_.backward(cache, d_eps, supervise ? &sup : nullptr);
        }

        ++accum_count_;
        if (accum_count_ >= cfg_.grad_accum) {
            cur_lr_ = static_cast<T>(cfg_.lr_at(step_index));
            rep.grad_norm = apply_update(style);
            rep.applied = true;
            accum_count_ = 0;
        }
        rep.wall_ms = std::chrono::duration<double, std::milli>(
                          std::chrono::steady_clock::now() - t_start).count();
        return rep;
    }

    T apply_update(int style) {
        auto refs = model_.collect_expert_params(style);
        auto& st = adam_[style];
        if (st.m.empty()) {
            st.m.resize(refs.size());
            st.v.resize(refs.size());
            for (size_t i = 0; i < refs.size(); ++i) {
                st.m[i].assign(refs[i].value->size(), T(0));
                st.v[i].assign(refs[i].value->size(), T(0));
            }
        }
        ++st.step;
        T norm_sq = T(0);
        for (size_t i = 0; i < refs.size(); ++i) {
            for (T g : *refs[i].grad) norm_sq += g * g;
            adam_step(*refs[i].value, *refs[i].grad, st.m[i], st.v[i], st.step,
                      cur_lr_, static_cast<T>(cfg_.beta1),
                      static_cast<T>(cfg_.beta2), static_cast<T>(cfg_.adam_eps));
        }
        model_.zero_expert_grads();
        return std::sqrt(norm_sq);
    }

    const TrainConfig& config() const { return cfg_; }

private:
    Model<T>& model_;
    TrainConfig cfg_;
    std::vector<int> sup_layers_;
    std::map<int, AdamStateSet<T>> adam_;
    int accum_count_ = 0;
    uint64_t micro_in_step_ = 0;
    T cur_lr_ = T(0);
};

// Per-sample attention diagnostics at a fixed mid-schedule timestep.
template <typename T>
struct AttentionEval {
    T focus = T(0), cover = T(0);
    double iou = 0.0;
};

template <typename T>
AttentionEval<T> eval_attention_sample(Model<T>& model, const LoadedSample& s, double tau,
                                       double alpha, uint64_t seed) {
    const auto tok = tokenize_prompt(s.prompt, model.vocab);
    const int style = model.num_styles > 0 ? model.route_expert(tok.style_id) : -1;
    const auto x0 = Model<T>::image_to_model(s.target);
    const auto ctx = Model<T>::image_to_model(s.context);
    const int t = model.cfg.timesteps / 2;

    Rng rng(derive_seed(seed, 0xE7A1));
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<T> eps(x0.size());
    for (auto& v : eps) v = static_cast<T>(N(rng));
    const auto x_t = add_noise(x0, eps, t, model.schedule);

    std::vector<AttentionRecord<T>> records;
    model.forward(x_t, ctx, tok.ids, t, style, true, &records);

    const int gh = model.cfg.grid_h(), gw = model.cfg.grid_w();
    std::vector<int> cols(tok.style_token_indices.size());
    for (size_t i = 0; i < cols.size(); ++i)
        cols[i] = 2 * model.cfg.num_image_tokens() + tok.style_token_indices[i];
    const auto sup_layers = model.cfg.effective_supervision_layers();
    const auto map = aggregate_style_attention(records, sup_layers, cols, gh, gw);

    SupervisionTarget<T> target;
    const auto soft = downsample_mask(s.mask, gh, gw);
    target.mask.assign(soft.d.size(), T(0));
    for (size_t i = 0; i < soft.d.size(); ++i) target.mask[i] = static_cast<T>(soft.d[i]);
    target.tau = static_cast<T>(tau);
    target.alpha = static_cast<T>(alpha);

    AttentionEval<T> out;
    out.focus = focus_loss(map.values, target).loss;
    out.cover = cover_loss(map.values, target).loss;

    Mask gt(gh, gw);
    for (size_t i = 0; i < soft.d.size(); ++i) gt.d[i] = soft.d[i] >= 0.5 ? 1 : 0;
    out.iou = mask_iou(threshold_at_median(map), gt);
    return out;
}

struct TrainingArtifacts {
    std::string checkpoint_path;
    std::string log_path;
};

// Constant learning rate, no warmup. JSON-lines log, periodic checkpoints.
template <typename T>
TrainingArtifacts run_training(const DatasetManifest& manifest, const TrainConfig& cfg,
                               const std::string& out_dir) {
    namespace fs = std::filesystem;
    cfg.validate();
    std::error_code ec;
    fs::create_directories(out_dir, ec);
    if (ec) throw IoError("cannot create output directory: " + out_dir);

    Model<T> model = Model<T>::make(cfg.model_config());
    model.attach_experts(cfg.num_styles, cfg.rank, cfg.sites(), cfg.seed,
                         static_cast<T>(cfg.gamma));

    std::vector<LoadedSample> samples;
    std::vector<std::vector<size_t>> by_style(static_cast<size_t>(cfg.num_styles));
    for (const auto& rec : manifest.samples) {
        if (rec.split != "train") continue;
        if (rec.style_id < 0 || rec.style_id >= cfg.num_styles)
            throw ConfigError("sample style_id outside configured style count");
        by_style[static_cast<size_t>(rec.style_id)].push_back(samples.size());
        samples.push_back(load_sample(manifest, rec));
    }
    std::vector<int> usable_styles;
    for (int s = 0; s < cfg.num_styles; ++s)
        if (!by_style[static_cast<size_t>(s)].empty()) usable_styles.push_back(s);
    if (cfg.total_steps > 0 && usable_styles.empty())
        throw ConfigError("no training samples in manifest");

    Trainer<T> trainer(model, cfg);
    const std::string log_path = (fs::path(out_dir) / "train_log.jsonl").string();
    std::ofstream log(log_path);
    if (!log) throw IoError("cannot open training log: " + log_path);

    Rng rng(derive_seed(cfg.seed, 0x7124));
    for (long step = 1; step <= cfg.total_steps; ++step) {
        const int style = usable_styles[rng() % usable_styles.size()];
        const auto& pool = by_style[static_cast<size_t>(style)];
        std::vector<const LoadedSample*> batch;
        for (int i = 0; i < cfg.batch; ++i)
            batch.push_back(&samples[pool[rng() % pool.size()]]);
        const auto rep = trainer.train_step(batch, step);
        if (cfg.log_every > 0 && (step % cfg.log_every == 0 || step == cfg.total_steps))
            log << step_report_json(rep, cfg).dump() << "\n";
        if (cfg.ckpt_every > 0 && step % cfg.ckpt_every == 0) {
            save_checkpoint(model, (fs::path(out_dir) /
                                    ("checkpoint_" + std::to_string(step) + ".rrck")).string());
        }
    }
    const std::string final_path = (fs::path(out_dir) / "checkpoint_final.rrck").string();
    save_checkpoint(model, final_path);
    return {final_path, log_path};
}

// --- finite-difference gradient verification ---

// Central differences on a random coordinate subset (all coordinates when the
// tensor is small). Returns the max relative error against the analytic
// gradient, with a 1e-8 absolute floor in the denominator.
template <typename F>
double finite_diff_gradcheck(F&& loss_fn, std::vector<double>& params,
                             const std::vector<double>& analytic_grad, double h,
                             int min_coords = 64, uint64_t seed = 0) {
    if (params.size() != analytic_grad.size()) throw ConfigError("gradcheck: size mismatch");
    std::vector<size_t> coords(params.size());
    std::iota(coords.begin(), coords.end(), size_t{0});
    if (static_cast<int>(coords.size()) > min_coords) {
        Rng rng(derive_seed(seed, 0xFD01));
        std::shuffle(coords.begin(), coords.end(), rng);
        coords.resize(static_cast<size_t>(min_coords));
    }
    double max_rel = 0.0;
    for (size_t i : coords) {
        const double orig = params[i];
        params[i] = orig + h;
        const double fp = loss_fn(params);
        params[i] = orig - h;
        const double fm = loss_fn(params);
        params[i] = orig;
        if (!std::isfinite(fp) || !std::isfinite(fm)) throw ConfigError("gradcheck: non-finite loss");
        const double fd = (fp - fm) / (2.0 * h);
        const double an = analytic_grad[i];
        const double denom = std::max(std::max(std::abs(fd), std::abs(an)), 1e-8);
        max_rel = std::max(max_rel, std::abs(fd - an) / denom);
    }
    return max_rel;
}

}  // namespace rr
