#pragma once

#include <string>
#include <vector>

#include "regionroute/dataset.hpp"
#include "regionroute/trainer.hpp"

namespace rr {

struct LossGradcheckReport {
    double max_rel_focus = 0.0;
    double max_rel_cover = 0.0;
    double max_rel_total = 0.0;
    double linearity_err = 0.0;  // objective recomposition from its components
    int trials = 0;
    double h = 0.0;
};

// Per-coordinate central-difference verification of the two attention-loss
// gradients on random maps, plus the weighted-sum composition of the full
// objective. Double precision throughout.
inline LossGradcheckReport run_loss_gradcheck(int trials = 100, double h = 1e-6,
                                              uint64_t seed = 11, double lambda_focus = 0.1,
                                              double lambda_cover = 0.2) {
    if (trials < 1) throw ConfigError("gradcheck needs at least one trial");
    LossGradcheckReport rep;
    rep.trials = trials;
    rep.h = h;
    Rng rng(derive_seed(seed, 0x6CAD));
    std::uniform_real_distribution<double> U(0.0, 1.0);

    using LD = long double;  // extended precision keeps the oracle's own
                             // finite-difference noise well below tolerance
    for (int trial = 0; trial < trials; ++trial) {
        const int n = 64;  // 8x8 map
        std::vector<LD> map(n);
        SupervisionTarget<LD> target;
        target.mask.resize(n);
        // Map values in a post-softmax-like range; alternate soft/hard masks.
        const bool hard = trial % 3 == 0;
        for (int i = 0; i < n; ++i) {
            map[static_cast<size_t>(i)] = static_cast<LD>(0.05 * U(rng));
            target.mask[static_cast<size_t>(i)] =
                hard ? static_cast<LD>(U(rng) < 0.4 ? 1.0 : 0.0) : static_cast<LD>(U(rng));
        }
        if (hard) target.mask[static_cast<size_t>(rng() % n)] = LD(1);  // nonzero mass
        target.tau = trial % 2 == 0 ? LD(1) : LD(0.5);
        target.alpha = trial % 4 == 0 ? LD(5) : LD(10);

        auto check = [&](auto&& scalar, const std::vector<LD>& analytic) {
            double max_rel = 0.0;
            for (int i = 0; i < n; ++i) {
                const LD orig = map[static_cast<size_t>(i)];
                map[static_cast<size_t>(i)] = orig + static_cast<LD>(h);
                const LD fp = scalar(map);
                map[static_cast<size_t>(i)] = orig - static_cast<LD>(h);
                const LD fm = scalar(map);
                map[static_cast<size_t>(i)] = orig;
                const LD fd = (fp - fm) / (LD(2) * static_cast<LD>(h));
                const LD an = analytic[static_cast<size_t>(i)];
                const LD denom = std::max({std::abs(fd), std::abs(an), LD(1e-8)});
                max_rel = std::max(max_rel, static_cast<double>(std::abs(fd - an) / denom));
            }
            return max_rel;
        };

        const auto f = focus_loss(map, target);
        const auto c = cover_loss(map, target);
        rep.max_rel_focus = std::max(
            rep.max_rel_focus,
            check([&](const std::vector<LD>& m) { return focus_loss(m, target).loss; }, f.grad));
        rep.max_rel_cover = std::max(
            rep.max_rel_cover,
            check([&](const std::vector<LD>& m) { return cover_loss(m, target).loss; }, c.grad));

        const LD lf = static_cast<LD>(lambda_focus), lc = static_cast<LD>(lambda_cover);
        std::vector<LD> g_total(static_cast<size_t>(n));
        for (int i = 0; i < n; ++i)
            g_total[static_cast<size_t>(i)] =
                lf * f.grad[static_cast<size_t>(i)] + lc * c.grad[static_cast<size_t>(i)];
        rep.max_rel_total = std::max(
            rep.max_rel_total, check(
                                   [&](const std::vector<LD>& m) {
                                       return lf * focus_loss(m, target).loss +
                                              lc * cover_loss(m, target).loss;
                                   },
                                   g_total));

        // Eq-style recomposition: total equals the weighted sum of components.
        const double eps_term = U(rng);
        const auto L = total_loss<double>({eps_term}, {0.0}, static_cast<double>(f.loss),
                                          static_cast<double>(c.loss), lambda_focus,
                                          lambda_cover);
        rep.linearity_err = std::max(
            rep.linearity_err,
            std::abs(L.total - (L.eps + lambda_focus * static_cast<double>(f.loss) +
                                lambda_cover * static_cast<double>(c.loss))));
    }
    return rep;
}

struct ModelGradcheckReport {
    double max_rel = 0.0;       // directional derivatives vs analytic gradient
    double linearity_err = 0.0; // combined gradient vs weighted component sum
    int directions = 0;
    double h = 0.0;
};

// End-to-end verification of the expert-parameter gradient on a reduced model:
// random unit directions in expert-parameter space, central differences of the
// full objective along each, compared against the analytic directional
// derivative. Directional probes keep the signal well above the
// finite-difference noise floor that per-coordinate checks hit on
// near-zero-gradient coordinates.
inline ModelGradcheckReport run_model_gradcheck(uint64_t seed = 3, double h = 1e-5,
                                                int directions = 16,
                                                double lambda_focus = 0.1,
                                                double lambda_cover = 0.2) {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.double_blocks = 1;
    cfg.single_blocks = 1;
    cfg.patch = 4;
    cfg.canvas_h = cfg.canvas_w = 16;
    cfg.timesteps = 20;
    cfg.seed = seed;

    Model<double> model = Model<double>::make(cfg);
    AdapterSiteMap sites;
    model.attach_experts(2, 2, sites, seed);

    // B is zero at attachment; give both factors generic values so every
    // expert tensor carries signal.
    const int style = 1;
    {
        Rng rng(derive_seed(seed, 0x6C0));
        std::normal_distribution<double> N(0.0, 0.05);
        for (auto& ref : model.collect_expert_params(style))
            for (auto& v : *ref.value) v = N(rng);
    }

    // One synthetic supervised sample.
    SceneSpec spec;
    spec.seed = derive_seed(seed, 0x5CE11E);
    spec.height = spec.width = cfg.canvas_h;
    spec.num_objects = 1;
    spec.background = BackgroundKind::Gradient;
    auto [context, objects] = gen_scene(spec);
    const auto& [label, mask] = objects[0];
    const auto style_spec = default_styles()[static_cast<size_t>(style)];
    const Image target_img =
        composite_pseudo_gt(context, apply_style(context, style_spec), mask, 0);
    const auto tok = tokenize_prompt(make_prompt(label, style_spec.name), model.vocab);

    const auto x0 = Model<double>::image_to_model(target_img);
    const auto ctx = Model<double>::image_to_model(context);
    const int t = cfg.timesteps / 2;
    std::vector<double> eps(x0.size());
    {
        Rng rng(derive_seed(seed, 0xE95));
        std::normal_distribution<double> N(0.0, 1.0);
        for (auto& v : eps) v = N(rng);
    }
    const auto x_t = add_noise(x0, eps, t, model.schedule);

    const int gh = cfg.grid_h(), gw = cfg.grid_w();
    const auto layers = cfg.effective_supervision_layers();
    std::vector<int> cols(tok.style_token_indices.size());
    for (size_t i = 0; i < cols.size(); ++i)
        cols[i] = 2 * cfg.num_image_tokens() + tok.style_token_indices[i];

    SupervisionTarget<double> sup_target;
    {
        const auto soft = downsample_mask(mask, gh, gw);
        sup_target.mask.assign(soft.d.begin(), soft.d.end());
    }

    // Weighted objective we * L_eps + wf * L_focus + wc * L_cover; optionally
    // backpropagates it into the active expert's gradient buffers.
    auto evaluate = [&](double we, double wf, double wc, bool do_backward) {
        std::vector<AttentionRecord<double>> recs;
        ForwardCache<double> cache;
        const auto eps_hat = model.forward(x_t, ctx, tok.ids, t, style, true, &recs,
                                           do_backward ? &cache : nullptr);
        const auto map = aggregate_style_attention(recs, layers, cols, gh, gw);
        const auto f = focus_loss(map.values, sup_target);
        const auto c = cover_loss(map.values, sup_target);
        double eps_term = 0.0;
        for (size_t i = 0; i < eps.size(); ++i) {
            const double d = eps_hat[i] - eps[i];
            eps_term += d * d;
        }
        eps_term /= static_cast<double>(eps.size());
        if (do_backward) {
            model.zero_expert_grads();
            std::vector<double> d_eps(eps_hat.size());
            const double k = we * 2.0 / static_cast<double>(eps_hat.size());
            for (size_t i = 0; i < d_eps.size(); ++i) d_eps[i] = k * (eps_hat[i] - eps[i]);
            SupervisionGrad<double> sg;
            sg.layers = layers;
            sg.cols = cols;
            sg.coef = 1.0 / (static_cast<double>(layers.size()) * cfg.heads *
                             static_cast<double>(cols.size()));
            sg.d_map.assign(map.size(), 0.0);
            for (size_t i = 0; i < sg.d_map.size(); ++i)
                sg.d_map[i] = wf * f.grad[i] + wc * c.grad[i];
            model.backward(cache, d_eps, &sg);
        }
        return we * eps_term + wf * f.loss + wc * c.loss;
    };

    auto grad_snapshot = [&]() {
        std::vector<double> g;
        for (auto& ref : model.collect_expert_params(style))
            g.insert(g.end(), ref.grad->begin(), ref.grad->end());
        return g;
    };

    auto params_view = [&]() { return model.collect_expert_params(style); };

    ModelGradcheckReport rep;
    rep.h = h;
    rep.directions = directions;

    evaluate(1.0, lambda_focus, lambda_cover, true);
    const auto g = grad_snapshot();
    const auto g_e = [&] { evaluate(1.0, 0.0, 0.0, true); return grad_snapshot(); }();
    const auto g_f = [&] { evaluate(0.0, 1.0, 0.0, true); return grad_snapshot(); }();
    const auto g_c = [&] { evaluate(0.0, 0.0, 1.0, true); return grad_snapshot(); }();
    for (size_t i = 0; i < g.size(); ++i) {
        const double expect = g_e[i] + lambda_focus * g_f[i] + lambda_cover * g_c[i];
        rep.linearity_err = std::max(rep.linearity_err, std::abs(g[i] - expect));
    }

    Rng rng(derive_seed(seed, 0xD1BE));
    std::normal_distribution<double> N(0.0, 1.0);
    for (int k = 0; k < directions; ++k) {
        std::vector<double> v(g.size());
        double norm = 0.0;
        for (auto& x : v) {
            x = N(rng);
            norm += x * x;
        }
        norm = std::sqrt(norm);
        for (auto& x : v) x /= norm;

        auto shift = [&](double sgn) {
            size_t off = 0;
            for (auto& ref : params_view()) {
                for (auto& p : *ref.value) p += sgn * h * v[off++];
            }
        };
        shift(+1.0);
        const double fp = evaluate(1.0, lambda_focus, lambda_cover, false);
        shift(-2.0);
        const double fm = evaluate(1.0, lambda_focus, lambda_cover, false);
        shift(+1.0);

        const double fd = (fp - fm) / (2.0 * h);
        double an = 0.0;
        for (size_t i = 0; i < g.size(); ++i) an += g[i] * v[i];
        const double denom = std::max(std::max(std::abs(fd), std::abs(an)), 1e-8);
        rep.max_rel = std::max(rep.max_rel, std::abs(fd - an) / denom);
    }
    return rep;
}

}  // namespace rr
