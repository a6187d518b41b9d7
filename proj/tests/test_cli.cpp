#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cstdlib>
#include <filesystem>
#include <fstream>

#include <nlohmann/json.hpp>

#include "test_support.hpp"
#include "voxalign/commands.hpp"

using namespace voxalign;
using namespace voxalign::cli;
namespace fs = std::filesystem;

namespace {

std::string slurp(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    return std::string((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
}

// Small config with an 8^3 mini network so command tests stay fast.
RunConfig mini_config(const std::string& root, uint64_t seed) {
    RunConfig cfg;
    cfg.out_dir = root + "/run";
    cfg.data_dir = root + "/data";
    cfg.split = "S1";
    cfg.arch.kind = nets::ArchKind::DNET;
    cfg.arch.d = cfg.arch.h = cfg.arch.w = {16, 8, 4, 2};
    cfg.arch.c = {1, 4, 6, 6};
    cfg.arch.n_down = 3;
    cfg.arch.n_up = 1;
    cfg.arch.n_link = 1;
    cfg.arch.seed = seed;
    cfg.gen.shape = {16, 16, 16};
    cfg.gen.n_subjects = 4;
    cfg.gen.seed = seed;
    cfg.synth_cfg.t_range_mm = 0.64;
    cfg.gen.spacing_mm = 0.32;
    cfg.synth_cfg.seed = seed + 1;
    cfg.train_cfg.iterations = 6;
    cfg.train_cfg.batch_size = 2;
    cfg.train_cfg.checkpoint_interval = 3;
    cfg.train_cfg.val_interval = 3;
    cfg.train_cfg.val_size = 2;
    cfg.train_cfg.seed = seed;
    cfg.eval_cfg.n_steps = 3;
    cfg.eval_cfg.n_synth_pairs = 2;
    cfg.eval_cfg.n_real_pairs = 2;
    cfg.eval_cfg.seed = seed + 2;
    return cfg;
}

struct TempDir {
    fs::path path;
    explicit TempDir(const std::string& name) : path(fs::path("cli_test_tmp") / name) {
        fs::remove_all(path);
        fs::create_directories(path);
    }
    ~TempDir() { fs::remove_all(path); }
};

}  // namespace

TEST_CASE("gen writes parsable volumes and a resolvable manifest") {
    TempDir tmp("gen");
    RunConfig cfg = mini_config(tmp.path.string(), 3);
    cfg.gen.n_subjects = 1;
    cmd_gen(cfg);

    const auto manifest = read_volume_manifest(cfg.data_dir + "/volumes.jsonl");
    REQUIRE(manifest.size() == 2);  // one subject, two variants
    for (const auto& rec : manifest) {
        CHECK(fs::exists(rec.path));
        const vol::Volume3 v = vol::read_vol3(rec.path);
        CHECK(v.d == 16);
        for (float x : v.data) {
            CHECK(x >= 0.f);
            CHECK(x <= 1.f);
        }
    }
}

TEST_CASE("gen is byte-identical for the same seed") {
    TempDir tmp("gen_det");
    RunConfig a = mini_config((tmp.path / "a").string(), 5);
    RunConfig b = mini_config((tmp.path / "b").string(), 5);
    cmd_gen(a);
    cmd_gen(b);
    const auto ma = read_volume_manifest(a.data_dir + "/volumes.jsonl");
    const auto mb = read_volume_manifest(b.data_dir + "/volumes.jsonl");
    REQUIRE(ma.size() == mb.size());
    for (size_t i = 0; i < ma.size(); ++i) CHECK(slurp(ma[i].path) == slurp(mb[i].path));
}

TEST_CASE("split selection") {
    std::vector<VolumeRecord> all;
    for (int s = 0; s < 4; ++s)
        for (int v = 0; v < 2; ++v)
            all.push_back({"p", s, s % 2 == 0 ? "A" : "B", v, 0});

    CHECK(select_split(all, "S1", true).size() == 4);   // all of A
    CHECK(select_split(all, "S1", false).size() == 4);  // all of B
    CHECK(select_split(all, "S3", true).size() == 2);   // A, variant 0 only
    CHECK(select_split(all, "S3", false).size() == 4);
    for (const auto& r : select_split(all, "S2", true)) CHECK(r.folder == "B");
    for (const auto& r : select_split(all, "S4", true)) {
        CHECK(r.folder == "B");
        CHECK(r.variant == 0);
    }
    CHECK_THROWS_AS((void)select_split(all, "S9", true), BadConfig);
}

TEST_CASE("make-pairs writes volumes matching the manifest schema") {
    TempDir tmp("pairs");
    RunConfig cfg = mini_config(tmp.path.string(), 7);
    cmd_gen(cfg);
    cmd_make_pairs(cfg, 3);

    const auto records = synth::read_pair_manifest(cfg.out_dir + "/pairs.jsonl");
    REQUIRE(records.size() == 3);
    for (const auto& r : records) {
        CHECK(fs::exists(r.fixed_path));
        CHECK(fs::exists(r.moving_path));
        const vol::Volume3 f = vol::read_vol3(r.fixed_path);
        const vol::Volume3 m = vol::read_vol3(r.moving_path);
        CHECK(f.d == m.d);
        // encoded rotation decodes to a valid transform
        const geom::RigidTransform T = geom::transform_from_params(r.theta);
        CHECK(T.valid(1e-5));
    }
}

TEST_CASE("train writes checkpoint and curves; resume is bit-exact") {
    TempDir tmp("train");
    RunConfig cfg = mini_config(tmp.path.string(), 11);
    cmd_gen(cfg);
    cmd_train(cfg, "");
    CHECK(fs::exists(cfg.out_dir + "/checkpoint.dnck"));
    CHECK(fs::exists(cfg.out_dir + "/train_curve.csv"));
    CHECK(fs::exists(cfg.out_dir + "/val_curve.csv"));
    const std::string full_ckpt = slurp(cfg.out_dir + "/checkpoint.dnck");
    const std::string full_train_curve = slurp(cfg.out_dir + "/train_curve.csv");
    const std::string full_val_curve = slurp(cfg.out_dir + "/val_curve.csv");

    // interrupted at 3 of 6 iterations, then resumed
    RunConfig half = cfg;
    half.out_dir = tmp.path.string() + "/run_half";
    half.train_cfg.iterations = 3;
    cmd_train(half, "");
    RunConfig resumed = cfg;
    resumed.out_dir = half.out_dir;
    cmd_train(resumed, half.out_dir + "/checkpoints/ckpt_0000003.dnck");

    CHECK(slurp(half.out_dir + "/checkpoint.dnck") == full_ckpt);
    CHECK(slurp(half.out_dir + "/train_curve.csv") == full_train_curve);
    CHECK(slurp(half.out_dir + "/val_curve.csv") == full_val_curve);
}

TEST_CASE("eval with the oracle produces zero-error sweep reports") {
    TempDir tmp("eval");
    RunConfig cfg = mini_config(tmp.path.string(), 13);
    cmd_gen(cfg);
    cmd_eval(cfg, /*oracle=*/true);

    for (const std::string name : {"rot_sweep", "transl_sweep"}) {
        const std::string csv = cfg.out_dir + "/reports/" + name + ".csv";
        REQUIRE(fs::exists(csv));
        std::ifstream f(csv);
        std::string line;
        std::getline(f, line);
        CHECK(line == "case_id,angle_rad,tx_mm,ty_mm,tz_mm,te_mm,re_rad,dsc");
        const auto j = nlohmann::json::parse(
            std::ifstream(cfg.out_dir + "/reports/" + name + ".json"));
        CHECK(j.at("te_mm").at("mean").get<double>() == 0.0);
        CHECK(j.at("re_rad").at("mean").get<double>() == 0.0);
    }
    CHECK(fs::exists(cfg.out_dir + "/reports/pairs_synth.csv"));
}

TEST_CASE("eval twice produces byte-identical reports") {
    TempDir tmp("eval_det");
    RunConfig cfg = mini_config(tmp.path.string(), 17);
    cmd_gen(cfg);
    cmd_eval(cfg, true);
    const std::string first = slurp(cfg.out_dir + "/reports/rot_sweep.csv");
    cmd_eval(cfg, true);
    CHECK(slurp(cfg.out_dir + "/reports/rot_sweep.csv") == first);
}

TEST_CASE("eval without a checkpoint fails and leaves no partial reports") {
    TempDir tmp("eval_missing");
    RunConfig cfg = mini_config(tmp.path.string(), 19);
    cmd_gen(cfg);
    cfg.checkpoint = tmp.path.string() + "/does_not_exist.dnck";
    CHECK_THROWS_AS(cmd_eval(cfg, false), IoError);
    CHECK(!fs::exists(cfg.out_dir + "/reports/rot_sweep.csv"));
}

TEST_CASE("register with the oracle on a self-pair writes identity parameters") {
    TempDir tmp("register");
    RunConfig cfg = mini_config(tmp.path.string(), 23);
    cmd_gen(cfg);
    const auto manifest = read_volume_manifest(cfg.data_dir + "/volumes.jsonl");
    const std::string vol_path = manifest[0].path;
    const std::string out = tmp.path.string() + "/reg";
    cmd_register(cfg, "", vol_path, vol_path, out, /*oracle=*/true);

    const auto j = nlohmann::json::parse(std::ifstream(out + "/transform.json"));
    const auto tr = j.at("theta_r").get<std::vector<double>>();
    const auto tt = j.at("theta_t").get<std::vector<double>>();
    const std::vector<double> want_r{1, 0, 0, 0, 1, 0, 0, 0, 1};
    CHECK(tr == want_r);
    CHECK(tt == std::vector<double>{0, 0, 0});

    const vol::Volume3 aligned = vol::read_vol3(out + "/aligned.vol3");
    const vol::Volume3 fixed = vol::read_vol3(vol_path);
    CHECK(aligned.d == fixed.d);
    CHECK(aligned.data == fixed.data);  // identity warp is exact
}

TEST_CASE("register via a trained checkpoint writes a readable aligned volume") {
    TempDir tmp("register_model");
    RunConfig cfg = mini_config(tmp.path.string(), 29);
    cmd_gen(cfg);
    cmd_train(cfg, "");
    const auto manifest = read_volume_manifest(cfg.data_dir + "/volumes.jsonl");
    const std::string out = tmp.path.string() + "/reg";
    cmd_register(cfg, cfg.out_dir + "/checkpoint.dnck", manifest[0].path, manifest[1].path, out,
                 false);
    const vol::Volume3 aligned = vol::read_vol3(out + "/aligned.vol3");
    CHECK(aligned.d == 16);
}

TEST_CASE("run config json round-trip") {
    RunConfig cfg = mini_config("x", 31);
    const nlohmann::json j = cfg.to_json();
    const RunConfig back = RunConfig::from_json(j);
    CHECK(back.out_dir == cfg.out_dir);
    CHECK(back.arch.kind == cfg.arch.kind);
    CHECK(back.train_cfg.iterations == cfg.train_cfg.iterations);
    CHECK(back.synth_cfg.t_range_mm == cfg.synth_cfg.t_range_mm);
    CHECK(back.eval_cfg.n_steps == cfg.eval_cfg.n_steps);

    nlohmann::json bad = j;
    bad["split"] = "S7";
    CHECK_THROWS_AS((void)RunConfig::from_json(bad), BadConfig);
}

TEST_CASE("toy preset matches the documented scale") {
    const RunConfig cfg = RunConfig::toy_preset(nets::ArchKind::DNET, 1);
    CHECK(cfg.arch.d == std::vector<int>{16, 8, 4, 2, 1});
    CHECK(cfg.arch.c == std::vector<int>{1, 8, 16, 16, 16});
    CHECK(cfg.gen.shape == std::array<int, 3>{16, 16, 16});
    CHECK(cfg.synth_cfg.t_range_mm == doctest::Approx(0.64));
    CHECK(cfg.gen.spacing_mm == doctest::Approx(0.32));
    CHECK(cfg.train_cfg.batch_size == 4);
    CHECK(cfg.train_cfg.iterations == 5000);
    CHECK(cfg.train_cfg.momentum == 0.9);
}

#ifdef VOXALIGN_BIN
TEST_CASE("binary smoke: gen + info run end to end") {
    TempDir tmp("binary");
    RunConfig cfg = mini_config(tmp.path.string(), 37);
    const std::string cfg_path = tmp.path.string() + "/cfg.json";
    {
        std::ofstream f(cfg_path);
        f << cfg.to_json().dump(2);
    }
    const std::string bin = VOXALIGN_BIN;
    CHECK(std::system((bin + " gen --config " + cfg_path + " > /dev/null 2>&1").c_str()) == 0);
    CHECK(fs::exists(cfg.data_dir + "/volumes.jsonl"));
    CHECK(std::system((bin + " info --config " + cfg_path + " > /dev/null 2>&1").c_str()) == 0);
    // missing checkpoint propagates as a nonzero exit
    CHECK(std::system((bin + " eval --config " + cfg_path + " > /dev/null 2>&1").c_str()) != 0);
}
#endif
