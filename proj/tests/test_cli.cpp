#include <catch2/catch_amalgamated.hpp>

#include "regionroute/ablation.hpp"
#include "regionroute/cli.hpp"

#include "test_util.hpp"

using namespace rr;

TEST_CASE("cli exit codes: help, usage errors and unknown commands") {
    REQUIRE(run_cli({"--help"}) == 0);
    REQUIRE(run_cli({"synth", "--help"}) == 0);
    REQUIRE(run_cli({}) == 2);
    REQUIRE(run_cli({"frobnicate"}) == 2);
    REQUIRE(run_cli({"synth", "--no-such-flag"}) == 2);
    REQUIRE(run_cli({"train"}) == 2);  // missing required options
    // Valid parse but failing operation: runtime error, not usage error.
    REQUIRE(run_cli({"train", "--data", "/nonexistent/manifest.json", "--out", "/tmp"}) == 1);
}

TEST_CASE("cli synth/train/eval/attn-dump pipeline on a tiny dataset") {
    testutil::TempDir tmp("rr_cli");
    const std::string data = tmp / "data";

    REQUIRE(run_cli({"synth", "--out", data, "--scenes", "4", "--heldout", "2", "--styles", "2",
                     "--canvas", "16", "--seed", "5"}) == 0);
    const auto manifest = load_manifest(data + "/manifest.json");
    REQUIRE(manifest.samples.size() == 8);

    // Tiny training configuration via config file plus CLI overrides.
    const std::string cfg_path = tmp / "train.cfg";
    {
        std::ofstream f(cfg_path);
        f << "dim = 16\nheads = 2\ndouble_blocks = 1\nsingle_blocks = 1\n"
          << "canvas = 16\ntimesteps = 20\nnum_styles = 2\nrank = 2\n"
          << "batch = 1\ngrad_accum = 1\nlog_every = 1\n";
    }
    const std::string run_dir = tmp / "run";
    REQUIRE(run_cli({"train", "--data", data + "/manifest.json", "--out", run_dir, "--config",
                     cfg_path, "--steps", "2", "--seed", "5"}) == 0);
    const std::string ckpt = run_dir + "/checkpoint_final.rrck";
    REQUIRE(std::filesystem::exists(ckpt));
    REQUIRE(std::filesystem::exists(run_dir + "/train_log.jsonl"));

    // Identity editor: background metrics must be exactly zero.
    const std::string eval_dir = tmp / "eval";
    REQUIRE(run_cli({"eval", "--data", data + "/manifest.json", "--out", eval_dir, "--editor",
                     "identity"}) == 0);
    {
        std::ifstream f(eval_dir + "/rse_report.json");
        REQUIRE(static_cast<bool>(f));
        nlohmann::json j;
        f >> j;
        REQUIRE(j.at("samples").size() == 4);
        REQUIRE(j.at("aggregate").at("mse_bg_mean").get<double>() == 0.0);
    }
    REQUIRE(std::filesystem::exists(eval_dir + "/rse_report.csv"));

    // Model editor through the trained checkpoint.
    const std::string eval2 = tmp / "eval_model";
    REQUIRE(run_cli({"eval", "--data", data + "/manifest.json", "--out", eval2, "--ckpt", ckpt,
                     "--editor", "model", "--sample-steps", "2"}) == 0);
    REQUIRE(std::filesystem::exists(eval2 + "/rse_report.json"));

    // Attention dump: one map per requested sampler step, plus sidecars.
    const std::string dump_dir = tmp / "dump";
    REQUIRE(run_cli({"attn-dump", "--data", data + "/manifest.json", "--out", dump_dir, "--ckpt",
                     ckpt, "--index", "0", "--steps", "1,2,3"}) == 0);
    int maps = 0, sidecars = 0;
    for (const auto& e : std::filesystem::directory_iterator(dump_dir)) {
        const auto name = e.path().filename().string();
        if (name.rfind("attn_step_", 0) == 0 && e.path().extension() == ".pgm") ++maps;
        if (name.rfind("attn_step_", 0) == 0 && e.path().extension() == ".txt") ++sidecars;
    }
    REQUIRE(maps == 3);
    REQUIRE(sidecars == 3);
    REQUIRE(std::filesystem::exists(dump_dir + "/context.ppm"));
    REQUIRE(std::filesystem::exists(dump_dir + "/mask.pgm"));
    REQUIRE(std::filesystem::exists(dump_dir + "/edited.ppm"));
}

TEST_CASE("cli gradcheck passes and honours its tolerance") {
    REQUIRE(run_cli({"gradcheck", "--trials", "10"}) == 0);
    // An absurdly tight tolerance must fail with a nonzero exit.
    REQUIRE(run_cli({"gradcheck", "--trials", "5", "--tol", "1e-300"}) == 1);
}

TEST_CASE("ablation plan: seven arms, each one key away from the base") {
    TrainConfig base;
    const auto arms = ablation_plan(base);
    REQUIRE(arms.size() == 7);

    std::vector<std::string> names;
    for (const auto& arm : arms) names.push_back(arm.name);
    std::sort(names.begin(), names.end());
    REQUIRE(std::adjacent_find(names.begin(), names.end()) == names.end());
    for (const char* expected :
         {"full", "no_cover", "no_focus", "no_double", "no_single", "rank_8", "rank_16"})
        REQUIRE(std::find(names.begin(), names.end(), expected) != names.end());

    for (const auto& arm : arms) {
        arm.config.validate();
        const auto diff = config_diff(base, arm.config);
        if (arm.name == "full") {
            REQUIRE(diff.empty());
        } else {
            REQUIRE(diff.size() == 1);
        }
        if (arm.name == "no_cover") REQUIRE(diff.count("lambda_cover") == 1);
        if (arm.name == "no_focus") REQUIRE(diff.count("lambda_focus") == 1);
        if (arm.name == "no_double") REQUIRE(diff.count("adapt_double") == 1);
        if (arm.name == "no_single") REQUIRE(diff.count("adapt_single") == 1);
        if (arm.name == "rank_8") {
            REQUIRE(diff.count("rank") == 1);
            REQUIRE(diff.at("rank").second == "8");
        }
        if (arm.name == "rank_16") {
            REQUIRE(diff.count("rank") == 1);
            REQUIRE(diff.at("rank").second == "16");
        }
    }

    // config_to_kv covers every key that the config file parser understands.
    const auto kv = config_to_kv(base);
    for (const char* key : {"dim", "rank", "lambda_focus", "lambda_cover", "adapt_double",
                            "adapt_single", "lr", "total_steps", "supervision_layers"})
        REQUIRE(kv.count(key) == 1);
}

TEST_CASE("cli ablate runs all arms on a miniature setup") {
    testutil::TempDir tmp("rr_cli_abl");
    const std::string data = tmp / "data";
    REQUIRE(run_cli({"synth", "--out", data, "--scenes", "3", "--heldout", "1", "--styles", "2",
                     "--canvas", "16", "--seed", "2"}) == 0);

    const std::string cfg_path = tmp / "train.cfg";
    {
        std::ofstream f(cfg_path);
        f << "dim = 16\nheads = 2\ndouble_blocks = 1\nsingle_blocks = 1\n"
          << "canvas = 16\ntimesteps = 20\nnum_styles = 2\nrank = 2\n"
          << "batch = 1\ngrad_accum = 1\ntotal_steps = 1\nlog_every = 1\n";
    }
    const std::string out = tmp / "ablate";
    REQUIRE(run_cli({"ablate", "--data", data + "/manifest.json", "--out", out, "--config",
                     cfg_path, "--sample-steps", "1"}) == 0);

    std::ifstream f(out + "/ablate.json");
    REQUIRE(static_cast<bool>(f));
    nlohmann::json j;
    f >> j;
    REQUIRE(j.size() == 7);
    for (const auto& arm : j) {
        REQUIRE(arm.contains("rsm_mean"));
        REQUIRE(arm.contains("lpips_bg_mean"));
        REQUIRE(arm.contains("mse_bg_mean"));
        REQUIRE(std::filesystem::exists(out + "/" + arm.at("arm").get<std::string>() +
                                        "/rse_report.json"));
    }
}

TEST_CASE("cli runs are reproducible byte for byte") {
    testutil::TempDir tmp("rr_cli_repro");
    REQUIRE(run_cli({"synth", "--out", tmp / "a", "--scenes", "3", "--styles", "2", "--canvas",
                     "16", "--seed", "9"}) == 0);
    REQUIRE(run_cli({"synth", "--out", tmp / "b", "--scenes", "3", "--styles", "2", "--canvas",
                     "16", "--seed", "9"}) == 0);
    REQUIRE(testutil::hash_file(tmp / "a/manifest.json") == testutil::hash_file(tmp / "b/manifest.json"));
    REQUIRE(testutil::hash_file(tmp / "a/s0001_st1_target.ppm") ==
            testutil::hash_file(tmp / "b/s0001_st1_target.ppm"));
}
