#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "regionroute/checkpoint.hpp"
#include "regionroute/gradcheck.hpp"
#include "regionroute/model.hpp"

#include "test_util.hpp"

using namespace rr;

namespace {

ModelConfig tiny_config(uint64_t seed = 0) {
    ModelConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.double_blocks = 1;
    cfg.single_blocks = 1;
    cfg.patch = 4;
    cfg.canvas_h = cfg.canvas_w = 16;
    cfg.timesteps = 20;
    cfg.seed = seed;
    return cfg;
}

struct TinyInput {
    std::vector<double> x_t, ctx;
    std::vector<int> ids;
    std::vector<int> style_positions;
    int t = 7;
};

TinyInput tiny_input(const Model<double>& m, uint64_t seed = 1) {
    TinyInput in;
    const size_t n = static_cast<size_t>(m.cfg.canvas_h) * m.cfg.canvas_w * 3;
    Rng rng(seed);
    std::normal_distribution<double> N(0.0, 0.5);
    in.x_t.resize(n);
    in.ctx.resize(n);
    for (auto& v : in.x_t) v = N(rng);
    for (auto& v : in.ctx) v = N(rng);
    const auto tok = tokenize_prompt("make the cat pixel-art style", m.vocab);
    in.ids = tok.ids;
    in.style_positions = tok.style_token_indices;
    return in;
}

}  // namespace

TEST_CASE("model configuration is validated") {
    ModelConfig cfg = tiny_config();
    cfg.dim = 15;  // not divisible by heads
    REQUIRE_THROWS_AS(Model<double>::make(cfg), ConfigError);
    cfg = tiny_config();
    cfg.canvas_h = 17;
    REQUIRE_THROWS_AS(Model<double>::make(cfg), ConfigError);
    cfg = tiny_config();
    cfg.double_blocks = 0;
    REQUIRE_THROWS_AS(Model<double>::make(cfg), ConfigError);
}

TEST_CASE("patchify and unpatchify are exact inverses") {
    auto m = Model<double>::make(tiny_config());
    Rng rng(2);
    std::normal_distribution<double> N(0.0, 1.0);
    std::vector<double> img(static_cast<size_t>(16) * 16 * 3);
    for (auto& v : img) v = N(rng);
    REQUIRE(m.unpatchify(m.patchify(img)) == img);
}

TEST_CASE("image/model space conversions invert each other on the grid") {
    Image img(4, 4, 3);
    for (size_t i = 0; i < img.d.size(); ++i) img.d[i] = (i % 17) / 16.0;
    const auto v = Model<double>::image_to_model(img);
    for (double x : v) {
        REQUIRE(x >= -1.0);
        REQUIRE(x <= 1.0);
    }
    const Image back = Model<double>::model_to_image(v, 4, 4);
    for (size_t i = 0; i < img.d.size(); ++i) REQUIRE(std::abs(back.d[i] - img.d[i]) < 1e-12);
}

TEST_CASE("forward is bitwise deterministic") {
    auto m = Model<double>::make(tiny_config());
    const auto in = tiny_input(m);
    const auto a = m.forward(in.x_t, in.ctx, in.ids, in.t, -1, false, nullptr);
    const auto b = m.forward(in.x_t, in.ctx, in.ids, in.t, -1, false, nullptr);
    REQUIRE(a == b);
    REQUIRE(a.size() == in.x_t.size());
    for (double v : a) REQUIRE(std::isfinite(v));
}

TEST_CASE("attention capture is observation-only") {
    auto m = Model<double>::make(tiny_config());
    const auto in = tiny_input(m);
    const auto plain = m.forward(in.x_t, in.ctx, in.ids, in.t, -1, false, nullptr);
    std::vector<AttentionRecord<double>> recs;
    const auto captured = m.forward(in.x_t, in.ctx, in.ids, in.t, -1, true, &recs);
    REQUIRE(captured == plain);

    // One record per supervised layer, one prob matrix per head, rows summing to 1.
    const auto sup = m.cfg.effective_supervision_layers();
    REQUIRE(recs.size() == sup.size());
    for (const auto& rec : recs) {
        REQUIRE(std::find(sup.begin(), sup.end(), rec.layer) != sup.end());
        REQUIRE(rec.heads() == m.cfg.heads);
        for (const auto& p : rec.probs)
            for (int i = 0; i < p.rows; ++i) {
                double sum = 0.0;
                for (int j = 0; j < p.cols; ++j) sum += p(i, j);
                REQUIRE(sum == Catch::Approx(1.0).margin(1e-6));
            }
    }
}

TEST_CASE("forward rejects malformed inputs") {
    auto m = Model<double>::make(tiny_config());
    const auto in = tiny_input(m);
    std::vector<int> long_ids(static_cast<size_t>(m.cfg.max_text) + 1, 1);
    REQUIRE_THROWS_AS(m.forward(in.x_t, in.ctx, long_ids, in.t, -1, false, nullptr), ConfigError);
    std::vector<int> bad_ids = {0, 9999};
    REQUIRE_THROWS_AS(m.forward(in.x_t, in.ctx, bad_ids, in.t, -1, false, nullptr), ConfigError);
}

TEST_CASE("ddim timestep grids are ascending, in range and deduplicated at the ends") {
    auto m = Model<double>::make(tiny_config());
    REQUIRE(m.ddim_timesteps(1) == std::vector<int>{20});
    const auto ts = m.ddim_timesteps(5);
    REQUIRE(ts.size() == 5);
    REQUIRE(ts.front() == 1);
    REQUIRE(ts.back() == 20);
    for (size_t i = 1; i < ts.size(); ++i) REQUIRE(ts[i] > ts[i - 1]);
    REQUIRE(m.ddim_timesteps(500).size() == 20);  // clamped to the schedule
    REQUIRE_THROWS_AS(m.ddim_timesteps(0), ConfigError);
}

TEST_CASE("sample_edit is deterministic and stays in image range") {
    auto m = Model<double>::make(tiny_config());
    SceneSpec spec;
    spec.seed = 6;
    spec.height = spec.width = 16;
    auto [context, objects] = gen_scene(spec);
    const std::string prompt = make_prompt(objects[0].first, "cyberpunk");

    for (const int steps : {1, 5}) {
        const Image a = m.sample_edit(context, prompt, steps, 11);
        const Image b = m.sample_edit(context, prompt, steps, 11);
        REQUIRE(a.d == b.d);
        REQUIRE(a.h == 16);
        REQUIRE(a.w == 16);
        for (double v : a.d) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
    // A different seed draws different initial noise.
    const Image a = m.sample_edit(context, prompt, 2, 11);
    const Image c = m.sample_edit(context, prompt, 2, 12);
    REQUIRE(a.d != c.d);

    // The untrained sampler output is not a copy of the context.
    double diff = 0.0;
    for (size_t i = 0; i < a.d.size(); ++i) diff += std::abs(a.d[i] - context.d[i]);
    REQUIRE(diff / static_cast<double>(a.d.size()) > 1e-3);
}

TEST_CASE("sample_edit reports per-step attention when asked") {
    auto m = Model<double>::make(tiny_config());
    m.attach_experts(4, 2, AdapterSiteMap{}, 3);
    SceneSpec spec;
    spec.seed = 8;
    spec.height = spec.width = 16;
    auto [context, objects] = gen_scene(spec);
    int calls = 0;
    m.sample_edit(context, make_prompt(objects[0].first, "line-art"), 3, 5,
                  [&](int step, const std::vector<AttentionRecord<double>>& recs,
                      const TokenizedPrompt& tok) {
                      ++calls;
                      REQUIRE(step == calls);
                      REQUIRE(!recs.empty());
                      REQUIRE(tok.style_id == 3);
                  });
    REQUIRE(calls == 3);
}

TEST_CASE("checkpoint save/load round-trips bitwise in float") {
    testutil::TempDir tmp("rr_ckpt");
    auto m = Model<float>::make(tiny_config(21));
    m.attach_experts(2, 2, AdapterSiteMap{}, 21);
    // Give the experts nonzero values so they are exercised by the round trip.
    Rng rng(30);
    std::normal_distribution<double> N(0.0, 0.05);
    for (int s = 0; s < 2; ++s)
        for (auto& ref : m.collect_expert_params(s))
            for (auto& v : *ref.value) v = static_cast<float>(N(rng));

    const std::string path = tmp / "model.rrck";
    save_checkpoint(m, path);
    auto loaded = load_checkpoint<float>(path);

    auto ta = m.all_tensors(), tb = loaded.all_tensors();
    REQUIRE(ta.size() == tb.size());
    for (size_t i = 0; i < ta.size(); ++i) {
        REQUIRE(ta[i].name == tb[i].name);
        REQUIRE(*ta[i].value == *tb[i].value);
    }

    // The saved sidecar manifest lists every tensor.
    const std::string manifest = testutil::read_file_bytes(path + ".txt");
    for (const auto& ref : ta) REQUIRE(manifest.find(ref.name) != std::string::npos);

    // Identical forward behaviour after reload.
    Model<float> probe = Model<float>::make(tiny_config(21));
    const size_t n = static_cast<size_t>(16) * 16 * 3;
    std::vector<float> x(n, 0.1f), c(n, -0.2f);
    const auto ids = tokenize_prompt("cat expressionism", m.vocab).ids;
    REQUIRE(m.forward(x, c, ids, 3, 1, false, nullptr) ==
            loaded.forward(x, c, ids, 3, 1, false, nullptr));
    (void)probe;
}

TEST_CASE("checkpoint loader rejects corrupted containers") {
    testutil::TempDir tmp("rr_ckpt_bad");
    auto m = Model<float>::make(tiny_config());
    const std::string path = tmp / "model.rrck";
    save_checkpoint(m, path);

    std::string bytes = testutil::read_file_bytes(path);
    bytes[0] = 'X';  // break the magic
    {
        std::ofstream f(tmp / "broken.rrck", std::ios::binary);
        f << bytes;
    }
    REQUIRE_THROWS_AS(load_checkpoint<float>(tmp / "broken.rrck"), IoError);
    REQUIRE_THROWS_AS(load_checkpoint<float>(tmp / "missing.rrck"), IoError);
}

TEST_CASE("end-to-end expert gradients match directional finite differences") {
    const auto rep = run_model_gradcheck(3, 1e-5, 12);
    CAPTURE(rep.max_rel, rep.linearity_err);
    REQUIRE(rep.max_rel <= 1e-4);
    REQUIRE(rep.linearity_err <= 1e-10);
}

TEST_CASE("layer norm backward matches finite differences") {
    LayerNorm<double> ln;
    ln.init(6);
    Rng rng(14);
    std::normal_distribution<double> N(0.0, 1.0);
    for (auto& v : ln.gamma) v = 1.0 + 0.1 * N(rng);
    for (auto& v : ln.beta) v = 0.1 * N(rng);
    Mat<double> x(3, 6), dy(3, 6);
    for (auto& v : x.d) v = N(rng);
    for (auto& v : dy.d) v = N(rng);

    Mat<double> y;
    LayerNormCache<double> cache;
    ln.forward(x, y, &cache);
    Mat<double> dx;
    ln.backward(cache, dy, dx);

    const double h = 1e-6;
    for (size_t i = 0; i < x.d.size(); ++i) {
        auto obj = [&]() {
            Mat<double> out;
            ln.forward(x, out, nullptr);
            double acc = 0.0;
            for (size_t j = 0; j < out.d.size(); ++j) acc += out.d[j] * dy.d[j];
            return acc;
        };
        const double orig = x.d[i];
        x.d[i] = orig + h;
        const double fp = obj();
        x.d[i] = orig - h;
        const double fm = obj();
        x.d[i] = orig;
        REQUIRE(std::abs((fp - fm) / (2.0 * h) - dx.d[i]) < 1e-6);
    }
}

TEST_CASE("gelu gradient matches finite differences") {
    const double h = 1e-6;
    for (double x : {-3.0, -0.7, 0.0, 0.4, 2.5}) {
        const double fd = (gelu(x + h) - gelu(x - h)) / (2.0 * h);
        REQUIRE(std::abs(fd - gelu_grad(x)) < 1e-8);
    }
}
