#pragma once

#include <array>
#include <string>
#include <vector>

#include <nlohmann/json_fwd.hpp>

#include "voxalign/eval.hpp"
#include "voxalign/nets.hpp"
#include "voxalign/synth.hpp"
#include "voxalign/train.hpp"

namespace voxalign::cli {

struct GenConfig {
    int n_subjects = 8;
    std::array<int, 3> shape{16, 16, 16};
    double spacing_mm = 0.08;
    uint64_t seed = 0;
};

struct EvalConfig {
    int n_steps = 11;
    double dsc_tau = 0.3;
    int n_synth_pairs = 20;
    int n_real_pairs = 8;
    uint64_t seed = 1;
};

// One JSON file per run; flags may override arch and seeds.
struct RunConfig {
    std::string out_dir = "runs/out";
    std::string data_dir;
    std::string checkpoint;
    std::string split = "S1";  // S1..S4 train/test folder assignment
    nets::ArchConfig arch = nets::ArchConfig::toy(nets::ArchKind::DNET);
    train::TrainConfig train_cfg;
    train::LossConfig loss_cfg;
    synth::SynthConfig synth_cfg;
    GenConfig gen;
    EvalConfig eval_cfg;

    void validate() const;

    static RunConfig toy_preset(nets::ArchKind kind, uint64_t seed);
    static RunConfig from_json(const nlohmann::json& j);
    static RunConfig from_json_file(const std::string& path);
    nlohmann::json to_json() const;
};

struct VolumeRecord {
    std::string path;
    int subject = 0;
    std::string folder;  // "A" or "B"
    int variant = 0;     // 0 plain, 1 contrast-analog
    uint64_t seed = 0;
};

std::vector<VolumeRecord> read_volume_manifest(const std::string& path);

// Volume paths for the train or test side of a split strategy:
//   S1 train A test B; S2 train B test A;
//   S3 train A variant 0 only, test B; S4 train B variant 0 only, test A.
std::vector<VolumeRecord> select_split(const std::vector<VolumeRecord>& all, const std::string& split,
                                       bool train_side);

// Subcommands; all throw on failure (mapped to a nonzero exit in main) and
// write outputs atomically.
void cmd_gen(const RunConfig& cfg);
void cmd_make_pairs(const RunConfig& cfg, int n_pairs);
void cmd_train(const RunConfig& cfg, const std::string& resume_path);
void cmd_eval(const RunConfig& cfg, bool oracle);
void cmd_register(const RunConfig& cfg, const std::string& checkpoint_path,
                  const std::string& fixed_path, const std::string& moving_path,
                  const std::string& out_dir, bool oracle);
void cmd_info(const RunConfig& cfg);

eval::Predictor model_predictor(std::shared_ptr<nets::Model<float>> model);

}  // namespace voxalign::cli
