#include "voxalign/commands.hpp"

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <memory>

#include <nlohmann/json.hpp>

namespace fs = std::filesystem;

namespace voxalign::cli {

void RunConfig::validate() const {
    arch.validate();
    train_cfg.validate();
    loss_cfg.validate();
    synth_cfg.validate();
    if (split != "S1" && split != "S2" && split != "S3" && split != "S4")
        throw BadConfig("RunConfig: split must be one of S1..S4");
    if (gen.n_subjects < 1) throw BadConfig("RunConfig: gen.n_subjects must be >= 1");
    if (!(gen.spacing_mm > 0)) throw BadConfig("RunConfig: gen.spacing_mm must be > 0");
    if (eval_cfg.n_steps < 2) throw BadConfig("RunConfig: eval.n_steps must be >= 2");
}

RunConfig RunConfig::toy_preset(nets::ArchKind kind, uint64_t seed) {
    RunConfig cfg;
    cfg.arch = nets::ArchConfig::toy(kind);
    cfg.arch.seed = seed;
    cfg.out_dir = "runs/toy-" + nets::to_string(kind);
    cfg.data_dir = cfg.out_dir + "/data";

    // 16^3 at 0.32 mm spans 5.12 mm like the full-scale 64^3 at 80 um, so the
    // default +-0.64 mm translation window keeps its quarter-extent ratio and
    // the relative-translation loss keeps its scale. One voxel is 0.32 mm.
    cfg.gen.shape = {16, 16, 16};
    cfg.gen.spacing_mm = 0.32;
    cfg.gen.n_subjects = 8;
    cfg.gen.seed = seed;

    cfg.synth_cfg.seed = seed + 1;

    cfg.train_cfg.iterations = 5000;
    cfg.train_cfg.batch_size = 4;
    cfg.train_cfg.seed = seed;
    cfg.train_cfg.checkpoint_interval = 1000;
    cfg.train_cfg.val_interval = 250;
    cfg.train_cfg.val_size = 16;

    cfg.eval_cfg.seed = seed + 2;
    return cfg;
}

nlohmann::json RunConfig::to_json() const {
    nlohmann::json j;
    j["out_dir"] = out_dir;
    j["data_dir"] = data_dir;
    j["checkpoint"] = checkpoint;
    j["split"] = split;
    j["arch"] = arch.to_json();
    j["train"] = {{"lr", train_cfg.lr},
                  {"momentum", train_cfg.momentum},
                  {"iterations", train_cfg.iterations},
                  {"batch_size", train_cfg.batch_size},
                  {"seed", train_cfg.seed},
                  {"checkpoint_interval", train_cfg.checkpoint_interval},
                  {"val_interval", train_cfg.val_interval},
                  {"val_size", train_cfg.val_size}};
    j["loss"] = {{"alpha", loss_cfg.alpha}, {"beta", loss_cfg.beta}, {"epsilon", loss_cfg.epsilon}};
    j["synth"] = {{"t_range_mm", synth_cfg.t_range_mm}, {"angle_min", synth_cfg.angle_min},
                  {"angle_max", synth_cfg.angle_max},   {"scale_min", synth_cfg.scale_min},
                  {"scale_max", synth_cfg.scale_max},   {"noise_sigma", synth_cfg.noise_sigma},
                  {"seed", synth_cfg.seed}};
    j["gen"] = {{"n_subjects", gen.n_subjects},
                {"shape", gen.shape},
                {"spacing_mm", gen.spacing_mm},
                {"seed", gen.seed}};
    j["eval"] = {{"n_steps", eval_cfg.n_steps},
                 {"dsc_tau", eval_cfg.dsc_tau},
                 {"n_synth_pairs", eval_cfg.n_synth_pairs},
                 {"n_real_pairs", eval_cfg.n_real_pairs},
                 {"seed", eval_cfg.seed}};
    return j;
}

RunConfig RunConfig::from_json(const nlohmann::json& j) {
    RunConfig cfg;
    cfg.out_dir = j.value("out_dir", cfg.out_dir);
    cfg.data_dir = j.value("data_dir", cfg.data_dir);
    cfg.checkpoint = j.value("checkpoint", cfg.checkpoint);
    cfg.split = j.value("split", cfg.split);
    if (j.contains("arch")) cfg.arch = nets::ArchConfig::from_json(j.at("arch"));
    if (j.contains("train")) {
        const auto& t = j.at("train");
        cfg.train_cfg.lr = t.value("lr", cfg.train_cfg.lr);
        cfg.train_cfg.momentum = t.value("momentum", cfg.train_cfg.momentum);
        cfg.train_cfg.iterations = t.value("iterations", cfg.train_cfg.iterations);
        cfg.train_cfg.batch_size = t.value("batch_size", cfg.train_cfg.batch_size);
        cfg.train_cfg.seed = t.value("seed", cfg.train_cfg.seed);
        cfg.train_cfg.checkpoint_interval =
            t.value("checkpoint_interval", cfg.train_cfg.checkpoint_interval);
        cfg.train_cfg.val_interval = t.value("val_interval", cfg.train_cfg.val_interval);
        cfg.train_cfg.val_size = t.value("val_size", cfg.train_cfg.val_size);
    }
    if (j.contains("loss")) {
        const auto& l = j.at("loss");
        cfg.loss_cfg.alpha = l.value("alpha", cfg.loss_cfg.alpha);
        cfg.loss_cfg.beta = l.value("beta", cfg.loss_cfg.beta);
        cfg.loss_cfg.epsilon = l.value("epsilon", cfg.loss_cfg.epsilon);
    }
    if (j.contains("synth")) {
        const auto& s = j.at("synth");
        cfg.synth_cfg.t_range_mm = s.value("t_range_mm", cfg.synth_cfg.t_range_mm);
        cfg.synth_cfg.angle_min = s.value("angle_min", cfg.synth_cfg.angle_min);
        cfg.synth_cfg.angle_max = s.value("angle_max", cfg.synth_cfg.angle_max);
        cfg.synth_cfg.scale_min = s.value("scale_min", cfg.synth_cfg.scale_min);
        cfg.synth_cfg.scale_max = s.value("scale_max", cfg.synth_cfg.scale_max);
        cfg.synth_cfg.noise_sigma = s.value("noise_sigma", cfg.synth_cfg.noise_sigma);
        cfg.synth_cfg.seed = s.value("seed", cfg.synth_cfg.seed);
    }
    if (j.contains("gen")) {
        const auto& g = j.at("gen");
        cfg.gen.n_subjects = g.value("n_subjects", cfg.gen.n_subjects);
        if (g.contains("shape")) cfg.gen.shape = g.at("shape").get<std::array<int, 3>>();
        cfg.gen.spacing_mm = g.value("spacing_mm", cfg.gen.spacing_mm);
        cfg.gen.seed = g.value("seed", cfg.gen.seed);
    }
    if (j.contains("eval")) {
        const auto& e = j.at("eval");
        cfg.eval_cfg.n_steps = e.value("n_steps", cfg.eval_cfg.n_steps);
        cfg.eval_cfg.dsc_tau = e.value("dsc_tau", cfg.eval_cfg.dsc_tau);
        cfg.eval_cfg.n_synth_pairs = e.value("n_synth_pairs", cfg.eval_cfg.n_synth_pairs);
        cfg.eval_cfg.n_real_pairs = e.value("n_real_pairs", cfg.eval_cfg.n_real_pairs);
        cfg.eval_cfg.seed = e.value("seed", cfg.eval_cfg.seed);
    }
    cfg.validate();
    return cfg;
}

RunConfig RunConfig::from_json_file(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("config: cannot open " + path);
    nlohmann::json j;
    f >> j;
    return from_json(j);
}

namespace {

void atomic_write_text(const std::string& path, const std::string& content) {
    const std::string tmp = path + ".tmp";
    {
        std::ofstream f(tmp, std::ios::trunc);
        if (!f) throw IoError("cannot open " + tmp);
        f << content;
        if (!f) throw IoError("short write to " + tmp);
    }
    fs::rename(tmp, path);
}

std::string volume_filename(int subject, int variant) {
    char buf[48];
    std::snprintf(buf, sizeof buf, "s%03d_v%d.vol3", subject, variant);
    return buf;
}

std::vector<vol::Volume3> load_volumes(const std::vector<VolumeRecord>& records) {
    std::vector<vol::Volume3> out;
    out.reserve(records.size());
    for (const auto& r : records) out.push_back(vol::read_vol3(r.path));
    return out;
}

}  // namespace

std::vector<VolumeRecord> read_volume_manifest(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw IoError("volume manifest: cannot open " + path);
    std::vector<VolumeRecord> out;
    std::string line;
    while (std::getline(f, line)) {
        if (line.empty()) continue;
        const auto j = nlohmann::json::parse(line);
        VolumeRecord r;
        r.path = j.at("path").get<std::string>();
        r.subject = j.at("subject").get<int>();
        r.folder = j.at("folder").get<std::string>();
        r.variant = j.at("variant").get<int>();
        r.seed = j.at("seed").get<uint64_t>();
        out.push_back(std::move(r));
    }
    return out;
}

std::vector<VolumeRecord> select_split(const std::vector<VolumeRecord>& all, const std::string& split,
                                       bool train_side) {
    std::string train_folder;
    bool train_variant0_only = false;
    if (split == "S1") train_folder = "A";
    else if (split == "S2") train_folder = "B";
    else if (split == "S3") { train_folder = "A"; train_variant0_only = true; }
    else if (split == "S4") { train_folder = "B"; train_variant0_only = true; }
    else throw BadConfig("select_split: unknown split " + split);

    std::vector<VolumeRecord> out;
    for (const auto& r : all) {
        const bool in_train_folder = r.folder == train_folder;
        if (train_side) {
            if (in_train_folder && (!train_variant0_only || r.variant == 0)) out.push_back(r);
        } else {
            if (!in_train_folder) out.push_back(r);
        }
    }
    return out;
}

void cmd_gen(const RunConfig& cfg) {
    cfg.validate();
    if (cfg.data_dir.empty()) throw BadConfig("gen: data_dir not set");
    fs::create_directories(cfg.data_dir);

    std::string manifest;
    for (int s = 0; s < cfg.gen.n_subjects; ++s) {
        const uint64_t vol_seed = cfg.gen.seed + static_cast<uint64_t>(s);
        Rng rng = Rng::stream(cfg.gen.seed, static_cast<uint64_t>(s));
        const geom::Vec3 sp{cfg.gen.spacing_mm, cfg.gen.spacing_mm, cfg.gen.spacing_mm};
        const vol::Volume3 plain = synth::gen_phantom(rng, cfg.gen.shape, sp);
        const vol::Volume3 contrast = synth::apply_contrast(plain);

        for (int variant = 0; variant < 2; ++variant) {
            const std::string name = volume_filename(s, variant);
            const std::string path = (fs::path(cfg.data_dir) / name).string();
            vol::write_vol3(variant == 0 ? plain : contrast, path);
            nlohmann::json j;
            j["path"] = path;
            j["subject"] = s;
            j["folder"] = s % 2 == 0 ? "A" : "B";
            j["variant"] = variant;
            j["seed"] = vol_seed;
            manifest += j.dump() + "\n";
        }
    }
    atomic_write_text((fs::path(cfg.data_dir) / "volumes.jsonl").string(), manifest);
}

void cmd_make_pairs(const RunConfig& cfg, int n_pairs) {
    cfg.validate();
    if (n_pairs < 1) throw BadConfig("make-pairs: need n_pairs >= 1");
    const auto manifest = read_volume_manifest((fs::path(cfg.data_dir) / "volumes.jsonl").string());
    const auto train_records = select_split(manifest, cfg.split, /*train_side=*/true);
    if (train_records.empty()) throw BadConfig("make-pairs: split selected no volumes");
    const auto bases = load_volumes(train_records);

    const fs::path dir = fs::path(cfg.out_dir) / "pairs";
    fs::create_directories(dir);

    std::vector<synth::PairRecord> records;
    for (int i = 0; i < n_pairs; ++i) {
        Rng rng = Rng::stream(cfg.synth_cfg.seed, static_cast<uint64_t>(i));
        const size_t bi = static_cast<size_t>(rng.next_u64() % bases.size());
        const synth::Pair p = synth::make_pair(bases[bi], rng, cfg.synth_cfg);

        char fbuf[48], mbuf[48];
        std::snprintf(fbuf, sizeof fbuf, "pair_%05d_fixed.vol3", i);
        std::snprintf(mbuf, sizeof mbuf, "pair_%05d_moving.vol3", i);
        synth::PairRecord rec;
        rec.fixed_path = (dir / fbuf).string();
        rec.moving_path = (dir / mbuf).string();
        rec.theta = p.theta;
        rec.seed = cfg.synth_cfg.seed;
        vol::write_vol3(p.fixed, rec.fixed_path);
        vol::write_vol3(p.moving, rec.moving_path);
        records.push_back(std::move(rec));
    }
    synth::write_pair_manifest(records, (fs::path(cfg.out_dir) / "pairs.jsonl").string());
}

void cmd_train(const RunConfig& cfg, const std::string& resume_path) {
    cfg.validate();
    const auto manifest = read_volume_manifest((fs::path(cfg.data_dir) / "volumes.jsonl").string());
    const auto train_records = select_split(manifest, cfg.split, /*train_side=*/true);
    if (train_records.empty()) throw BadConfig("train: split selected no volumes");
    auto bases = std::make_shared<std::vector<vol::Volume3>>(load_volumes(train_records));

    synth::SynthConfig val_synth = cfg.synth_cfg;
    val_synth.seed = cfg.synth_cfg.seed ^ 0x5a5a5a5a5a5a5a5aull;
    const auto train_stream = train::synthetic_stream(bases, cfg.synth_cfg);
    const auto val_stream = train::synthetic_stream(bases, val_synth);

    int64_t start_iteration = 0;
    nets::Model<float> model = nets::Model<float>::build(cfg.arch);
    ad::SgdMomentum<float> opt(static_cast<float>(cfg.train_cfg.lr),
                               static_cast<float>(cfg.train_cfg.momentum));
    if (!resume_path.empty()) {
        const train::Checkpoint ck = train::load_checkpoint(resume_path);
        model = nets::Model<float>::build(ck.arch);
        train::restore(model, opt, ck);
        start_iteration = ck.iteration;
    }

    fs::create_directories(cfg.out_dir);
    const std::string ckpt_dir = (fs::path(cfg.out_dir) / "checkpoints").string();
    train::FitResult res;
    try {
        res = train::fit(model, opt, train_stream, val_stream, cfg.train_cfg, cfg.loss_cfg, ckpt_dir,
                         start_iteration);
    } catch (const DivergenceDetected& e) {
        std::cerr << "training diverged: " << e.what();
        if (!e.last_checkpoint.empty()) std::cerr << " (last checkpoint: " << e.last_checkpoint << ")";
        std::cerr << "\n";
        throw;
    }

    // On resume, splice the already-recorded prefix so the final curve files
    // match an uninterrupted run byte for byte.
    const std::string train_csv = (fs::path(cfg.out_dir) / "train_curve.csv").string();
    const std::string val_csv = (fs::path(cfg.out_dir) / "val_curve.csv").string();
    if (start_iteration > 0 && fs::exists(train_csv)) {
        auto prefix = train::read_curve_csv(train_csv);
        std::erase_if(prefix, [&](const auto& p) { return p.iteration > start_iteration; });
        prefix.insert(prefix.end(), res.train_curve.begin(), res.train_curve.end());
        res.train_curve = std::move(prefix);
    }
    if (start_iteration > 0 && fs::exists(val_csv)) {
        auto prefix = train::read_curve_csv(val_csv);
        std::erase_if(prefix, [&](const auto& p) { return p.iteration > start_iteration; });
        prefix.insert(prefix.end(), res.val_curve.begin(), res.val_curve.end());
        res.val_curve = std::move(prefix);
    }
    train::write_curve_csv(res.train_curve, train_csv);
    train::write_curve_csv(res.val_curve, val_csv);
    train::save_checkpoint(train::snapshot(model, opt, cfg.train_cfg.iterations),
                           (fs::path(cfg.out_dir) / "checkpoint.dnck").string());
}

eval::Predictor model_predictor(std::shared_ptr<nets::Model<float>> model) {
    return [model](const vol::Volume3& fixed, const vol::Volume3& moving,
                   const std::optional<geom::TransformParams>&) {
        return model->predict(fixed, moving);
    };
}

void cmd_eval(const RunConfig& cfg, bool oracle) {
    cfg.validate();
    const auto manifest = read_volume_manifest((fs::path(cfg.data_dir) / "volumes.jsonl").string());
    const auto test_records = select_split(manifest, cfg.split, /*train_side=*/false);
    if (test_records.empty()) throw BadConfig("eval: split selected no test volumes");
    const auto volumes = load_volumes(test_records);

    eval::Predictor predictor;
    if (oracle) {
        predictor = eval::oracle_predictor();
    } else {
        const std::string ckpt =
            cfg.checkpoint.empty() ? (fs::path(cfg.out_dir) / "checkpoint.dnck").string()
                                   : cfg.checkpoint;
        const train::Checkpoint ck = train::load_checkpoint(ckpt);
        auto model = std::make_shared<nets::Model<float>>(nets::Model<float>::build(ck.arch));
        ad::SgdMomentum<float> opt(1.f, 0.f);
        train::restore(*model, opt, ck);
        predictor = model_predictor(model);
    }

    eval::SweepSpec spec;
    spec.n_steps = cfg.eval_cfg.n_steps;
    spec.dsc_tau = cfg.eval_cfg.dsc_tau;

    const fs::path dir = fs::path(cfg.out_dir) / "reports";
    fs::create_directories(dir);

    const auto rot = eval::rotation_sweep(predictor, volumes, spec);
    eval::write_report(rot, (dir / "rot_sweep.csv").string(), (dir / "rot_sweep.json").string());

    const auto tr = eval::translation_sweep(predictor, volumes, spec);
    eval::write_report(tr, (dir / "transl_sweep.csv").string(), (dir / "transl_sweep.json").string());

    // Synthetic pairs with known ground truth.
    std::vector<eval::EvalRecord> synth_records;
    synth::SynthConfig pair_cfg = cfg.synth_cfg;
    pair_cfg.seed = cfg.eval_cfg.seed;
    for (int i = 0; i < cfg.eval_cfg.n_synth_pairs; ++i) {
        Rng rng = Rng::stream(pair_cfg.seed, static_cast<uint64_t>(i));
        const size_t bi = static_cast<size_t>(rng.next_u64() % volumes.size());
        const synth::Pair p = synth::make_pair(volumes[bi], rng, pair_cfg);
        synth_records.push_back(
            eval::evaluate_pair(predictor, p.fixed, p.moving, p.theta, spec.dsc_tau, i));
    }
    if (!synth_records.empty())
        eval::write_report(synth_records, (dir / "pairs_synth.csv").string(),
                           (dir / "pairs_synth.json").string());

    // Real-test analog: contrast vs non-contrast scans of the same subject in
    // an unknown pose; no ground truth, DSC only. The oracle cannot run these.
    if (!oracle && cfg.eval_cfg.n_real_pairs > 0) {
        std::vector<eval::EvalRecord> real_records;
        int made = 0;
        for (const auto& r : test_records) {
            if (r.variant != 0 || made >= cfg.eval_cfg.n_real_pairs) continue;
            const VolumeRecord* partner = nullptr;
            for (const auto& q : test_records)
                if (q.subject == r.subject && q.variant == 1) partner = &q;
            if (!partner) continue;
            const vol::Volume3 fixed = vol::read_vol3(partner->path);
            Rng rng = Rng::stream(cfg.eval_cfg.seed ^ 0xc0ffee, static_cast<uint64_t>(made));
            const auto [theta, T] = synth::sample_rigid(rng, pair_cfg);
            const vol::Volume3 moving = vol::resample_rigid(vol::read_vol3(r.path), T, 0.f);
            real_records.push_back(
                eval::evaluate_pair(predictor, fixed, moving, std::nullopt, spec.dsc_tau, made));
            ++made;
        }
        if (!real_records.empty())
            eval::write_report(real_records, (dir / "pairs_real.csv").string(),
                               (dir / "pairs_real.json").string());
    }
}

void cmd_register(const RunConfig& cfg, const std::string& checkpoint_path,
                  const std::string& fixed_path, const std::string& moving_path,
                  const std::string& out_dir, bool oracle) {
    const vol::Volume3 fixed = vol::read_vol3(fixed_path);
    const vol::Volume3 moving = vol::read_vol3(moving_path);

    geom::TransformParams pred;
    if (oracle) {
        pred = geom::TransformParams{};  // self-registration ground truth
    } else {
        const train::Checkpoint ck = train::load_checkpoint(checkpoint_path);
        nets::Model<float> model = nets::Model<float>::build(ck.arch);
        ad::SgdMomentum<float> opt(1.f, 0.f);
        train::restore(model, opt, ck);
        pred = model.predict(fixed, moving);
    }

    const geom::RigidTransform T = geom::transform_from_params(pred);
    const vol::Volume3 aligned =
        vol::resample_rigid(moving, geom::invert(T), {fixed.d, fixed.h, fixed.w}, 0.f);

    fs::create_directories(out_dir);
    nlohmann::json j;
    j["theta_r"] = pred.theta_r;
    j["theta_t"] = pred.theta_t;
    j["rotation_rows"] = {std::array<double, 3>{T.R(0, 0), T.R(0, 1), T.R(0, 2)},
                          std::array<double, 3>{T.R(1, 0), T.R(1, 1), T.R(1, 2)},
                          std::array<double, 3>{T.R(2, 0), T.R(2, 1), T.R(2, 2)}};
    atomic_write_text((fs::path(out_dir) / "transform.json").string(), j.dump(2) + "\n");
    vol::write_vol3(aligned, (fs::path(out_dir) / "aligned.vol3").string());

    const double dsc_before = vol::dice(vol::binarize(fixed, 0.3f), vol::binarize(moving, 0.3f));
    const double dsc_after = vol::dice(vol::binarize(fixed, 0.3f), vol::binarize(aligned, 0.3f));
    std::cout << "dsc before " << dsc_before << " after " << dsc_after << "\n";
}

void cmd_info(const RunConfig& cfg) {
    cfg.validate();
    nets::Model<float> model = nets::Model<float>::build(cfg.arch);
    std::cout << "config:\n" << cfg.to_json().dump(2) << "\n";
    std::cout << "parameters (" << nets::to_string(cfg.arch.kind) << "): " << model.param_count()
              << "\n";
    const auto full = nets::ArchConfig::full_scale(nets::ArchKind::DNET);
    std::cout << "parameters (full-scale dnet): " << nets::Model<float>::build(full).param_count()
              << "\n";
}

}  // namespace voxalign::cli
