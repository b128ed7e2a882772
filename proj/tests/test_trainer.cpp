#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "regionroute/trainer.hpp"

#include "test_util.hpp"

using namespace rr;

namespace {

TrainConfig tiny_train_config() {
    TrainConfig cfg;
    cfg.dim = 16;
    cfg.heads = 2;
    cfg.double_blocks = 1;
    cfg.single_blocks = 1;
    cfg.canvas = 16;
    cfg.timesteps = 20;
    cfg.num_styles = 2;
    cfg.rank = 2;
    cfg.batch = 1;
    cfg.grad_accum = 1;
    cfg.total_steps = 2;
    cfg.log_every = 1;
    cfg.seed = 5;
    return cfg;
}

LoadedSample synth_sample(uint64_t seed, int style_id, int canvas = 16) {
    SceneSpec spec;
    spec.seed = seed;
    spec.height = spec.width = canvas;
    auto [context, objects] = gen_scene(spec);
    LoadedSample s;
    s.context = context;
    s.mask = objects[0].second;
    s.style_id = style_id;
    const auto style = default_styles()[static_cast<size_t>(style_id)];
    s.prompt = make_prompt(objects[0].first, style.name);
    s.target = composite_pseudo_gt(context, apply_style(context, style), s.mask, 0);
    return s;
}

}  // namespace

TEST_CASE("key=value config files parse with comments and whitespace") {
    testutil::TempDir tmp("rr_cfg");
    {
        std::ofstream f(tmp / "train.cfg");
        f << "# model\n"
          << "dim = 32\n"
          << "rank=8   # adapters\n"
          << "lambda_focus = 0.25\n"
          << "adapt_single = false\n"
          << "supervision_layers = 0,1\n"
          << "seed = 77\n"
          << "\nnot a kv line\n";
    }
    const TrainConfig c = load_train_config(tmp / "train.cfg");
    REQUIRE(c.dim == 32);
    REQUIRE(c.rank == 8);
    REQUIRE(c.lambda_focus == Catch::Approx(0.25));
    REQUIRE(c.adapt_single == false);
    REQUIRE(c.supervision_layers == std::vector<int>{0, 1});
    REQUIRE(c.seed == 77);
    REQUIRE(c.heads == 4);  // untouched defaults survive

    REQUIRE_THROWS_AS(load_train_config(tmp / "missing.cfg"), IoError);
}

TEST_CASE("config validation rejects bad values") {
    TrainConfig c;
    c.lr = 0.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.lambda_focus = -0.1;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.batch = 0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
    c = TrainConfig{};
    c.tau = 0.0;
    REQUIRE_THROWS_AS(c.validate(), ConfigError);
}

TEST_CASE("total loss composes the three terms with the configured weights") {
    // eps_hat - eps = [1, -1] -> mean squared error 1; focus 0.4, cover 0.3,
    // lambda_f = 0.1, lambda_c = 0.2 -> total 1 + 0.04 + 0.06 = 1.10.
    const auto r = total_loss<double>({1.0, 0.0}, {0.0, 1.0}, 0.4, 0.3, 0.1, 0.2);
    REQUIRE(r.eps == Catch::Approx(1.0).margin(1e-15));
    REQUIRE(r.total == Catch::Approx(1.10).margin(1e-12));

    // Recomposition identity on random values.
    Rng rng(4);
    std::uniform_real_distribution<double> U(0.0, 1.0);
    for (int trial = 0; trial < 50; ++trial) {
        std::vector<double> a(8), b(8);
        for (auto& v : a) v = U(rng);
        for (auto& v : b) v = U(rng);
        const double lf = U(rng), lc = U(rng), f = U(rng), c = U(rng);
        const auto t = total_loss(a, b, f, c, lf, lc);
        REQUIRE(std::abs(t.total - (t.eps + lf * f + lc * c)) < 1e-12);
    }

    const double nan = std::numeric_limits<double>::quiet_NaN();
    REQUIRE_THROWS_WITH(total_loss<double>({1.0}, {0.0}, nan, 0.0, 0.1, 0.2),
                        Catch::Matchers::ContainsSubstring("focus"));
    REQUIRE_THROWS_WITH(total_loss<double>({1.0}, {0.0}, 0.0, nan, 0.1, 0.2),
                        Catch::Matchers::ContainsSubstring("cover"));
    REQUIRE_THROWS_AS(total_loss<double>({1.0}, {0.0, 1.0}, 0.0, 0.0, 0.1, 0.2), ConfigError);
}

TEST_CASE("Adam first step matches the closed form") {
    // Fresh state, g = 1: mhat = 1, vhat = 1, delta = -lr / (1 + eps_hat).
    std::vector<double> p = {0.0}, g = {1.0}, m = {0.0}, v = {0.0};
    adam_step(p, g, m, v, 1, 1e-3, 0.9, 0.999, 1e-8);
    REQUIRE(p[0] == Catch::Approx(-0.000999999990).margin(1e-15));

    // Zero gradient leaves the parameter unchanged.
    std::vector<double> p2 = {0.7}, g2 = {0.0}, m2 = {0.0}, v2 = {0.0};
    adam_step(p2, g2, m2, v2, 1, 1e-3, 0.9, 0.999, 1e-8);
    REQUIRE(p2[0] == 0.7);

    std::vector<double> bad = {std::numeric_limits<double>::infinity()};
    std::vector<double> pp = {0.0}, mm = {0.0}, vv = {0.0};
    REQUIRE_THROWS_AS(adam_step(pp, bad, mm, vv, 1, 1e-3, 0.9, 0.999, 1e-8), ConfigError);
    std::vector<double> short_m = {};
    REQUIRE_THROWS_AS(adam_step(pp, g, short_m, vv, 1, 1e-3, 0.9, 0.999, 1e-8), ConfigError);
}

TEST_CASE("Adam two-step trace matches a scalar reference") {
    const double lr = 1e-3, b1 = 0.9, b2 = 0.999, eps = 1e-8;
    std::vector<double> p = {0.5}, m = {0.0}, v = {0.0};
    double rp = 0.5, rm = 0.0, rv = 0.0;
    const double grads[2] = {0.3, -0.8};
    for (long step = 1; step <= 2; ++step) {
        const double g = grads[step - 1];
        adam_step(p, std::vector<double>{g}, m, v, step, lr, b1, b2, eps);
        rm = b1 * rm + (1 - b1) * g;
        rv = b2 * rv + (1 - b2) * g * g;
        const double mhat = rm / (1 - std::pow(b1, static_cast<double>(step)));
        const double vhat = rv / (1 - std::pow(b2, static_cast<double>(step)));
        rp -= lr * mhat / (std::sqrt(vhat) + eps);
        REQUIRE(std::abs(p[0] - rp) < 1e-15);
    }
}

TEST_CASE("finite-difference harness agrees with an analytic quadratic") {
    std::vector<double> theta = {0.3, -0.8, 1.2, 0.05};
    auto loss = [](const std::vector<double>& t) {
        double acc = 0.0;
        for (double x : t) acc += x * x;
        return acc;
    };
    std::vector<double> grad(theta.size());
    for (size_t i = 0; i < theta.size(); ++i) grad[i] = 2.0 * theta[i];
    REQUIRE(finite_diff_gradcheck(loss, theta, grad, 1e-6) <= 1e-8);
    std::vector<double> wrong = grad;
    wrong[0] += 1.0;
    REQUIRE(finite_diff_gradcheck(loss, theta, wrong, 1e-6) > 1e-2);
}

TEST_CASE("step reports record the configuration verbatim") {
    TrainConfig cfg = tiny_train_config();
    cfg.lambda_focus = 0.35;
    cfg.lambda_cover = 0.15;
    cfg.rank = 6;
    StepReport<float> rep;
    rep.step = 12;
    rep.total = 1.5f;
    const auto j = step_report_json(rep, cfg);
    REQUIRE(j.at("step") == 12);
    REQUIRE(j.at("lambda_focus") == Catch::Approx(0.35));
    REQUIRE(j.at("lambda_cover") == Catch::Approx(0.15));
    REQUIRE(j.at("rank") == 6);
    REQUIRE(j.at("lr") == Catch::Approx(cfg.lr));
}

TEST_CASE("train_step rejects empty and mixed-style batches") {
    TrainConfig cfg = tiny_train_config();
    auto model = Model<float>::make(cfg.model_config());
    model.attach_experts(cfg.num_styles, cfg.rank, cfg.sites(), cfg.seed);
    Trainer<float> trainer(model, cfg);
    const auto s0 = synth_sample(1, 0);
    const auto s1 = synth_sample(2, 1);
    REQUIRE_THROWS_AS(trainer.train_step({}, 1), ConfigError);
    REQUIRE_THROWS_AS(trainer.train_step({&s0, &s1}, 1), ConfigError);
}

TEST_CASE("supervised losses are reported even with zero loss weights") {
    TrainConfig cfg = tiny_train_config();
    cfg.lambda_focus = 0.0;
    cfg.lambda_cover = 0.0;
    auto model = Model<float>::make(cfg.model_config());
    model.attach_experts(cfg.num_styles, cfg.rank, cfg.sites(), cfg.seed);
    Trainer<float> trainer(model, cfg);
    const auto s = synth_sample(3, 0);
    const auto rep = trainer.train_step({&s}, 1);
    REQUIRE(rep.loss_focus > 0.0f);
    REQUIRE(rep.loss_cover > 0.0f);
    REQUIRE(rep.total == Catch::Approx(rep.loss_eps).margin(1e-6));
}

TEST_CASE("repeated steps on a fixed batch drive the loss down") {
    TrainConfig cfg = tiny_train_config();
    cfg.lr = 3e-3;  // aggressive rate is fine for a single fixed batch
    auto model = Model<float>::make(cfg.model_config());
    model.attach_experts(cfg.num_styles, cfg.rank, cfg.sites(), cfg.seed);
    Trainer<float> trainer(model, cfg);
    const auto s = synth_sample(6, 1);

    std::vector<float> totals;
    for (int i = 0; i < 50; ++i)
        totals.push_back(trainer.train_step({&s}, 1).total);  // same step id: same (t, eps)

    int non_monotone = 0;
    for (size_t i = 1; i < totals.size(); ++i)
        if (totals[i] > totals[i - 1]) ++non_monotone;
    CAPTURE(totals.front(), totals.back(), non_monotone);
    REQUIRE(totals.back() < totals.front());
    REQUIRE(non_monotone <= 5);
}

TEST_CASE("run_training writes a checkpoint and a faithful log") {
    testutil::TempDir tmp("rr_train");
    DatasetConfig dcfg;
    dcfg.out_dir = tmp / "data";
    dcfg.scenes = 3;
    dcfg.num_styles = 2;
    dcfg.canvas = 16;
    dcfg.seed = 8;
    const auto manifest = build_dataset(dcfg);

    TrainConfig cfg = tiny_train_config();
    cfg.total_steps = 4;
    cfg.log_every = 2;
    const auto artifacts = run_training<float>(manifest, cfg, tmp / "run");
    REQUIRE(std::filesystem::exists(artifacts.checkpoint_path));

    std::ifstream log(artifacts.log_path);
    REQUIRE(static_cast<bool>(log));
    std::string line;
    int lines = 0;
    while (std::getline(log, line)) {
        const auto j = nlohmann::json::parse(line);
        REQUIRE(j.at("lambda_focus") == Catch::Approx(cfg.lambda_focus));
        REQUIRE(j.at("rank") == cfg.rank);
        REQUIRE(std::isfinite(j.at("total").get<double>()));
        ++lines;
    }
    REQUIRE(lines == 2);  // steps 2 and 4
}

TEST_CASE("zero training steps reproduces the initialization") {
    testutil::TempDir tmp("rr_init");
    DatasetConfig dcfg;
    dcfg.out_dir = tmp / "data";
    dcfg.scenes = 2;
    dcfg.num_styles = 2;
    dcfg.canvas = 16;
    const auto manifest = build_dataset(dcfg);

    TrainConfig cfg = tiny_train_config();
    cfg.total_steps = 0;
    const auto artifacts = run_training<float>(manifest, cfg, tmp / "run");
    auto loaded = load_checkpoint<float>(artifacts.checkpoint_path);

    auto fresh = Model<float>::make(cfg.model_config());
    fresh.attach_experts(cfg.num_styles, cfg.rank, cfg.sites(), cfg.seed,
                         static_cast<float>(cfg.gamma));
    auto ta = fresh.all_tensors(), tb = loaded.all_tensors();
    REQUIRE(ta.size() == tb.size());
    for (size_t i = 0; i < ta.size(); ++i) REQUIRE(*ta[i].value == *tb[i].value);
}

TEST_CASE("training twice with one seed yields byte-identical checkpoints") {
    testutil::TempDir tmp("rr_det");
    DatasetConfig dcfg;
    dcfg.out_dir = tmp / "data";
    dcfg.scenes = 3;
    dcfg.num_styles = 2;
    dcfg.canvas = 16;
    dcfg.seed = 13;
    const auto manifest = build_dataset(dcfg);

    TrainConfig cfg = tiny_train_config();
    cfg.total_steps = 5;
    const auto a = run_training<float>(manifest, cfg, tmp / "a");
    const auto b = run_training<float>(manifest, cfg, tmp / "b");
    REQUIRE(testutil::hash_file(a.checkpoint_path) == testutil::hash_file(b.checkpoint_path));

    // Logs match line by line once the wall-clock timing field is stripped.
    auto stripped_lines = [](const std::string& path) {
        std::ifstream f(path);
        REQUIRE(static_cast<bool>(f));
        std::vector<nlohmann::json> lines;
        std::string line;
        while (std::getline(f, line)) {
            auto j = nlohmann::json::parse(line);
            j.erase("wall_ms");
            lines.push_back(std::move(j));
        }
        return lines;
    };
    REQUIRE(stripped_lines(a.log_path) == stripped_lines(b.log_path));
}

TEST_CASE("attention diagnostics produce finite values and a valid IoU") {
    TrainConfig cfg = tiny_train_config();
    auto model = Model<float>::make(cfg.model_config());
    model.attach_experts(cfg.num_styles, cfg.rank, cfg.sites(), cfg.seed);
    const auto s = synth_sample(10, 1);
    const auto e = eval_attention_sample(model, s, cfg.tau, cfg.alpha, 0);
    REQUIRE(std::isfinite(static_cast<double>(e.focus)));
    REQUIRE(std::isfinite(static_cast<double>(e.cover)));
    REQUIRE(e.focus >= 0.0f);
    REQUIRE(e.cover >= 0.0f);
    REQUIRE(e.iou >= 0.0);
    REQUIRE(e.iou <= 1.0);
}
