// Command-line entry point: phantom generation, dataset synthesis, training,
// evaluation, and one-shot registration.

#include <cstdint>
#include <iostream>
#include <string>

#include <CLI11.hpp>

#include "voxalign/commands.hpp"

using namespace voxalign;

namespace {

struct CommonOpts {
    std::string config_path;
    bool toy = false;
    std::string arch = "dnet";
    uint64_t seed = 0;
    bool seed_set = false;
    bool arch_set = false;
};

void add_common(CLI::App* cmd, CommonOpts& o) {
    cmd->add_option("--config", o.config_path, "run config JSON");
    cmd->add_flag("--toy", o.toy, "use the 16^3 toy preset");
    cmd->add_option("--arch", o.arch, "me|se|sed|snl-sed|dnet")
        ->check(CLI::IsMember({"me", "se", "sed", "snl-sed", "dnet"}))
        ->each([&o](const std::string&) { o.arch_set = true; });
    cmd->add_option("--seed", o.seed, "seed override")->each([&o](const std::string&) {
        o.seed_set = true;
    });
}

cli::RunConfig resolve(const CommonOpts& o) {
    cli::RunConfig cfg;
    if (!o.config_path.empty())
        cfg = cli::RunConfig::from_json_file(o.config_path);
    else
        cfg = cli::RunConfig::toy_preset(nets::arch_from_string(o.arch), o.seed);
    if (o.arch_set && !o.config_path.empty()) {
        const nets::ArchKind kind = nets::arch_from_string(o.arch);
        nets::ArchConfig a = cfg.arch.kind == kind ? cfg.arch : nets::ArchConfig::toy(kind);
        a.seed = cfg.arch.seed;
        cfg.arch = a;
    }
    if (o.seed_set) {
        cfg.arch.seed = o.seed;
        cfg.gen.seed = o.seed;
        cfg.synth_cfg.seed = o.seed + 1;
        cfg.train_cfg.seed = o.seed;
        cfg.eval_cfg.seed = o.seed + 2;
    }
    return cfg;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"voxalign - rigid 3d volume alignment"};
    app.require_subcommand(1);

    CommonOpts gen_o, pairs_o, train_o, eval_o, info_o;
    int n_pairs = 16;
    std::string resume_path, reg_checkpoint, reg_fixed, reg_moving, reg_out;
    bool eval_oracle = false, reg_oracle = false;
    std::string out_override;

    auto* gen = app.add_subcommand("gen", "generate phantom volumes + manifest");
    add_common(gen, gen_o);
    gen->add_option("--out", out_override, "output data directory override");

    auto* pairs = app.add_subcommand("make-pairs", "synthesize fixed/moving pairs + manifest");
    add_common(pairs, pairs_o);
    pairs->add_option("--n", n_pairs, "number of pairs");

    auto* tr = app.add_subcommand("train", "train a model");
    add_common(tr, train_o);
    tr->add_option("--resume", resume_path, "resume from checkpoint");

    auto* ev = app.add_subcommand("eval", "run sweep + pair evaluation reports");
    add_common(ev, eval_o);
    ev->add_flag("--oracle", eval_oracle, "ground-truth oracle model (harness validation)");

    auto* reg = app.add_subcommand("register", "register one volume pair");
    reg->add_option("--checkpoint", reg_checkpoint, "trained checkpoint");
    reg->add_option("--fixed", reg_fixed, "fixed volume")->required();
    reg->add_option("--moving", reg_moving, "moving volume")->required();
    reg->add_option("--out", reg_out, "output directory")->required();
    reg->add_flag("--oracle", reg_oracle, "identity-returning oracle (self-registration)");

    auto* info = app.add_subcommand("info", "print config echo and parameter counts");
    add_common(info, info_o);

    CLI11_PARSE(app, argc, argv);

    try {
        if (gen->parsed()) {
            cli::RunConfig cfg = resolve(gen_o);
            if (!out_override.empty()) cfg.data_dir = out_override;
            cli::cmd_gen(cfg);
        } else if (pairs->parsed()) {
            cli::cmd_make_pairs(resolve(pairs_o), n_pairs);
        } else if (tr->parsed()) {
            cli::cmd_train(resolve(train_o), resume_path);
        } else if (ev->parsed()) {
            cli::cmd_eval(resolve(eval_o), eval_oracle);
        } else if (reg->parsed()) {
            if (!reg_oracle && reg_checkpoint.empty()) {
                std::cerr << "register: need --checkpoint or --oracle\n";
                return 2;
            }
            cli::cmd_register(cli::RunConfig{}, reg_checkpoint, reg_fixed, reg_moving, reg_out,
                              reg_oracle);
        } else if (info->parsed()) {
            cli::cmd_info(resolve(info_o));
        }
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
