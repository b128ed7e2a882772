#include <catch2/catch_amalgamated.hpp>

#include <cmath>

#include "regionroute/dataset.hpp"
#include "regionroute/scenes.hpp"
#include "regionroute/styles.hpp"

#include "test_util.hpp"

using namespace rr;

TEST_CASE("gen_scene is deterministic in the spec seed") {
    SceneSpec spec;
    spec.seed = 42;
    spec.num_objects = 3;
    spec.background = BackgroundKind::NoiseTexture;
    auto [img_a, obj_a] = gen_scene(spec);
    auto [img_b, obj_b] = gen_scene(spec);
    REQUIRE(img_a.d == img_b.d);
    REQUIRE(obj_a.size() == obj_b.size());
    for (size_t i = 0; i < obj_a.size(); ++i) {
        REQUIRE(obj_a[i].first == obj_b[i].first);
        REQUIRE(obj_a[i].second.d == obj_b[i].second.d);
    }
}

TEST_CASE("scene objects have disjoint masks within the area budget") {
    for (uint64_t seed = 0; seed < 8; ++seed) {
        SceneSpec spec;
        spec.seed = seed;
        spec.num_objects = 1 + static_cast<int>(seed % 3);
        spec.background = static_cast<BackgroundKind>(seed % 3);
        auto [img, objects] = gen_scene(spec);
        REQUIRE(static_cast<int>(objects.size()) == spec.num_objects);
        const double area = 64.0 * 64.0;
        for (size_t i = 0; i < objects.size(); ++i) {
            const double frac = static_cast<double>(objects[i].second.count()) / area;
            REQUIRE(frac >= 0.01);
            REQUIRE(frac <= 0.60);
            for (size_t j = i + 1; j < objects.size(); ++j)
                for (size_t p = 0; p < objects[i].second.d.size(); ++p)
                    REQUIRE(!(objects[i].second.d[p] && objects[j].second.d[p]));
        }
        // Labels are unique and drawn from the fixed vocabulary.
        for (size_t i = 0; i < objects.size(); ++i) {
            const auto& words = object_vocabulary();
            REQUIRE(std::find(words.begin(), words.end(), objects[i].first) != words.end());
            for (size_t j = i + 1; j < objects.size(); ++j)
                REQUIRE(objects[i].first != objects[j].first);
        }
        for (double v : img.d) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
    }
}

TEST_CASE("gen_scene validates its configuration") {
    SceneSpec spec;
    spec.height = 30;  // not divisible by patch 4
    REQUIRE_THROWS_AS(gen_scene(spec), ConfigError);
    spec = SceneSpec{};
    spec.num_objects = 5;
    REQUIRE_THROWS_AS(gen_scene(spec), ConfigError);
}

TEST_CASE("pixel-art replaces each block by its mean and is idempotent") {
    // 8x8 ramp: every 4x4 block becomes its own average.
    Image img(8, 8, 3);
    for (int y = 0; y < 8; ++y)
        for (int x = 0; x < 8; ++x)
            for (int ch = 0; ch < 3; ++ch) img.at(y, x, ch) = (y * 8 + x) / 63.0;
    const auto style = default_styles()[0];
    const Image out = apply_style(img, style);
    for (int by = 0; by < 2; ++by)
        for (int bx = 0; bx < 2; ++bx) {
            double mean = 0.0;
            for (int y = by * 4; y < by * 4 + 4; ++y)
                for (int x = bx * 4; x < bx * 4 + 4; ++x) mean += img.at(y, x, 0);
            mean /= 16.0;
            for (int y = by * 4; y < by * 4 + 4; ++y)
                for (int x = bx * 4; x < bx * 4 + 4; ++x)
                    REQUIRE(out.at(y, x, 0) == Catch::Approx(mean).margin(1e-12));
        }
    const Image again = apply_style(out, style);
    for (size_t i = 0; i < out.d.size(); ++i) REQUIRE(std::abs(again.d[i] - out.d[i]) < 1e-12);
}

TEST_CASE("styles are deterministic, range-preserving and distinct") {
    SceneSpec spec;
    spec.seed = 3;
    auto [img, objects] = gen_scene(spec);
    for (const auto& style : default_styles()) {
        const Image a = apply_style(img, style);
        const Image b = apply_style(img, style);
        REQUIRE(a.d == b.d);
        for (double v : a.d) {
            REQUIRE(v >= 0.0);
            REQUIRE(v <= 1.0);
        }
        // Every style changes the image somewhere.
        double diff = 0.0;
        for (size_t i = 0; i < a.d.size(); ++i) diff += std::abs(a.d[i] - img.d[i]);
        REQUIRE(diff > 1e-3);
    }
    StyleSpec unknown;
    unknown.name = "vaporwave";
    REQUIRE_THROWS_AS(apply_style(img, unknown), ConfigError);
}

TEST_CASE("hard composite changes exactly the masked pixels") {
    SceneSpec spec;
    spec.seed = 11;
    auto [img, objects] = gen_scene(spec);
    // Single-pixel mask: exactly one pixel (3 channel values) may differ.
    Mask one(img.h, img.w);
    one.at(10, 20) = 1;
    Image stylized = img;
    for (int ch = 0; ch < 3; ++ch) stylized.at(10, 20, ch) = 1.0 - stylized.at(10, 20, ch);
    const Image out = composite_pseudo_gt(img, stylized, one, 0);
    int changed = 0;
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            bool diff = false;
            for (int ch = 0; ch < 3; ++ch)
                if (out.at(y, x, ch) != img.at(y, x, ch)) diff = true;
            if (diff) ++changed;
        }
    REQUIRE(changed == 1);
    for (int ch = 0; ch < 3; ++ch) REQUIRE(out.at(10, 20, ch) == stylized.at(10, 20, ch));
}

TEST_CASE("hard composite equals the inputs on their own sides") {
    SceneSpec spec;
    spec.seed = 21;
    auto [img, objects] = gen_scene(spec);
    const Image stylized = apply_style(img, default_styles()[1]);
    const Mask& mask = objects[0].second;
    const Image out = composite_pseudo_gt(img, stylized, mask, 0);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x)
            for (int ch = 0; ch < 3; ++ch) {
                const double expect = mask.at(y, x) ? stylized.at(y, x, ch) : img.at(y, x, ch);
                REQUIRE(out.at(y, x, ch) == expect);
            }
}

TEST_CASE("feathered composite blends only near the boundary") {
    SceneSpec spec;
    spec.seed = 33;
    auto [img, objects] = gen_scene(spec);
    const Image stylized = apply_style(img, default_styles()[2]);
    const Mask& mask = objects[0].second;
    const int f = 2;
    const Image out = composite_pseudo_gt(img, stylized, mask, f);
    for (int y = 0; y < img.h; ++y)
        for (int x = 0; x < img.w; ++x) {
            // Chebyshev distance to the nearest opposite-side pixel.
            const bool inside = mask.at(y, x) != 0;
            int dist = f + 1;
            for (int dy = -f; dy <= f; ++dy)
                for (int dx = -f; dx <= f; ++dx) {
                    const int yy = y + dy, xx = x + dx;
                    if (yy < 0 || yy >= img.h || xx < 0 || xx >= img.w) continue;
                    if ((mask.at(yy, xx) != 0) != inside)
                        dist = std::min(dist, std::max(std::abs(dy), std::abs(dx)));
                }
            for (int ch = 0; ch < 3; ++ch) {
                const double v = out.at(y, x, ch);
                if (dist > f) {
                    // Far from the boundary: exact passthrough.
                    const double expect = inside ? stylized.at(y, x, ch) : img.at(y, x, ch);
                    REQUIRE(v == expect);
                } else {
                    const double lo = std::min(img.at(y, x, ch), stylized.at(y, x, ch));
                    const double hi = std::max(img.at(y, x, ch), stylized.at(y, x, ch));
                    REQUIRE(v >= lo - 1e-12);
                    REQUIRE(v <= hi + 1e-12);
                }
            }
        }
    REQUIRE_THROWS_AS(composite_pseudo_gt(img, stylized, mask, -1), ConfigError);
    Mask wrong(8, 8);
    REQUIRE_THROWS_AS(composite_pseudo_gt(img, stylized, wrong, 0), ConfigError);
}

TEST_CASE("mask downsampling: block oracle and exact mass preservation") {
    Mask m(4, 4);
    m.at(0, 0) = m.at(0, 1) = m.at(1, 0) = m.at(1, 1) = 1;  // one full 2x2 block
    const auto s = downsample_mask(m, 2, 2);
    REQUIRE(s.at(0, 0) == 1.0);
    REQUIRE(s.at(0, 1) == 0.0);
    REQUIRE(s.at(1, 0) == 0.0);
    REQUIRE(s.at(1, 1) == 0.0);

    Rng rng(17);
    Mask r(64, 64);
    for (auto& v : r.d) v = (rng() & 1) ? 1 : 0;
    const auto soft = downsample_mask(r, 16, 16);
    double mass = 0.0;
    for (double v : soft.d) mass += v * 16.0;  // 4x4 cells
    REQUIRE(mass == Catch::Approx(static_cast<double>(r.count())).margin(1e-9));
    for (double v : soft.d) {
        REQUIRE(v >= 0.0);
        REQUIRE(v <= 1.0);
    }

    const auto ones = downsample_mask([] { Mask f(8, 8); f.d.assign(64, 1); return f; }(), 4, 4);
    for (double v : ones.d) REQUIRE(v == 1.0);
    REQUIRE_THROWS_AS(downsample_mask(m, 3, 3), ConfigError);
    REQUIRE_THROWS_AS(downsample_mask(m, 0, 2), ConfigError);
    REQUIRE_THROWS_AS(downsample_mask(m, 8, 8), ConfigError);
}

TEST_CASE("PPM and PGM round-trip through disk") {
    testutil::TempDir tmp("rr_img");
    Image img(4, 6, 3);
    Rng rng(5);
    for (auto& v : img.d) v = (rng() % 256) / 255.0;
    write_ppm(tmp / "a.ppm", img);
    const Image back = read_ppm(tmp / "a.ppm");
    REQUIRE(back.h == 4);
    REQUIRE(back.w == 6);
    for (size_t i = 0; i < img.d.size(); ++i) REQUIRE(std::abs(back.d[i] - img.d[i]) < 1e-9);

    Mask m(4, 6);
    for (auto& v : m.d) v = (rng() & 1) ? 1 : 0;
    write_pgm(tmp / "m.pgm", m);
    REQUIRE(read_pgm_mask(tmp / "m.pgm").d == m.d);
    REQUIRE_THROWS_AS(read_ppm(tmp / "missing.ppm"), IoError);
}

TEST_CASE("build_dataset emits scenes x styles samples with faithful records") {
    testutil::TempDir tmp("rr_ds");
    DatasetConfig cfg;
    cfg.out_dir = tmp / "data";
    cfg.scenes = 6;
    cfg.num_styles = 4;
    cfg.seed = 7;
    cfg.heldout_scenes = 2;
    const auto manifest = build_dataset(cfg);
    REQUIRE(manifest.samples.size() == 24);

    int heldout = 0;
    const auto styles = default_styles();
    for (const auto& rec : manifest.samples) {
        if (rec.split == "heldout") ++heldout;
        REQUIRE(rec.prompt == make_prompt(rec.label, styles[static_cast<size_t>(rec.style_id)].name));
        REQUIRE(rec.prompt.find(rec.label) != std::string::npos);
    }
    REQUIRE(heldout == 8);  // 2 scenes x 4 styles

    // Reload and verify the defining invariant: target == context outside the
    // mask and target == stylized context inside it (feather 0).
    const auto loaded_manifest = load_manifest((std::filesystem::path(cfg.out_dir) / "manifest.json").string());
    REQUIRE(loaded_manifest.samples.size() == 24);
    for (const auto& rec : {loaded_manifest.samples[0], loaded_manifest.samples[13]}) {
        const auto s = load_sample(loaded_manifest, rec);
        const Image stylized = apply_style(s.context, styles[static_cast<size_t>(rec.style_id)]);
        for (int y = 0; y < s.context.h; ++y)
            for (int x = 0; x < s.context.w; ++x)
                for (int ch = 0; ch < 3; ++ch) {
                    const double expect =
                        s.mask.at(y, x) ? stylized.at(y, x, ch) : s.context.at(y, x, ch);
                    // One 8-bit quantization step through the PPM round trip.
                    REQUIRE(std::abs(s.target.at(y, x, ch) - expect) <= 1.0 / 255.0 + 1e-9);
                }
        REQUIRE(s.mask.count() > 0);
    }
}

TEST_CASE("build_dataset is byte-identical across runs with one seed") {
    testutil::TempDir tmp("rr_repro");
    DatasetConfig cfg;
    cfg.scenes = 4;
    cfg.num_styles = 2;
    cfg.seed = 99;
    cfg.heldout_scenes = 1;

    cfg.out_dir = tmp / "a";
    build_dataset(cfg);
    cfg.out_dir = tmp / "b";
    build_dataset(cfg);

    namespace fs = std::filesystem;
    std::vector<std::string> names;
    for (const auto& e : fs::directory_iterator(tmp / "a")) names.push_back(e.path().filename().string());
    std::sort(names.begin(), names.end());
    REQUIRE(names.size() == 4 * 2 * 3 + 1);  // context/target/mask per sample + manifest
    for (const auto& n : names)
        REQUIRE(testutil::hash_file((fs::path(tmp / "a") / n).string()) ==
                testutil::hash_file((fs::path(tmp / "b") / n).string()));

    DatasetConfig bad = cfg;
    bad.num_styles = 9;
    REQUIRE_THROWS_AS(build_dataset(bad), ConfigError);
    bad = cfg;
    bad.heldout_scenes = 5;
    REQUIRE_THROWS_AS(build_dataset(bad), ConfigError);
}
