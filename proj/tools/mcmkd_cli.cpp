#include <cstdint>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "mcmkd/config.hpp"
#include "mcmkd/errors.hpp"
#include "mcmkd/experiment.hpp"

int main(int argc, char** argv) {
    CLI::App app{"masked-context fine-tuning and attention-MIL experiment runner"};
    app.require_subcommand(1);
    app.fallthrough();

    std::string config_path;
    std::uint64_t seed = 1;
    std::string out_dir = "out";
    std::string variant;
    app.add_option("--config", config_path, "key=value experiment config file");
    app.add_option("--seed", seed, "root seed (default 1)");
    app.add_option("--out", out_dir, "output directory (default ./out)");
    app.add_option("--variant", variant, "fine-tuning variant: mcm-kd|mcm|kd|cm-kd|mcm-sd");

    std::string data_dir;
    std::string checkpoint;
    std::string mil_checkpoint;
    double lr_override = -1.0;
    std::optional<std::uint64_t> eval_seed;
    std::size_t slide = 0;
    std::size_t ref_row = 0;
    std::size_t ref_col = 0;

    CLI::App* gen = app.add_subcommand("gen", "generate slides, window archives and previews");
    CLI::App* pretrain =
        app.add_subcommand("pretrain", "pretrain the teacher and student patch encoders");
    CLI::App* finetune =
        app.add_subcommand("finetune", "fine-tune the student with the selected variant");
    finetune->add_option("--data", data_dir, "directory holding gen output (default: --out)");
    finetune->add_option("--lr", lr_override, "override the fine-tuning learning rate");
    CLI::App* train_mil =
        app.add_subcommand("train-mil", "train the attention-MIL classifier over the seed list");
    train_mil->add_option("--data", data_dir, "directory holding gen output (default: --out)");
    train_mil->add_option("--checkpoint", checkpoint,
                          "student checkpoint to extract features with (default: pretrained "
                          "baseline)");
    CLI::App* eval_cmd = app.add_subcommand("eval", "evaluate a trained MIL checkpoint per split");
    eval_cmd->add_option("--data", data_dir, "directory holding gen output (default: --out)");
    eval_cmd->add_option("--checkpoint", checkpoint,
                         "student checkpoint to extract features with (default: pretrained "
                         "baseline)");
    eval_cmd->add_option("--mil", mil_checkpoint, "MIL classifier checkpoint")->required();
    eval_cmd->add_option("--eval-seed", eval_seed,
                         "seed whose split to evaluate (default: first configured seed)");
    CLI::App* ablate =
        app.add_subcommand("ablate", "run the baseline and every variant over shared seeds");
    ablate->add_option("--data", data_dir, "directory holding gen output (default: --out)");
    CLI::App* heatmap =
        app.add_subcommand("heatmap", "export a cosine-similarity grid for one slide");
    heatmap->add_option("--data", data_dir, "directory holding gen output (default: --out)");
    heatmap->add_option("--checkpoint", checkpoint,
                        "student checkpoint to extract features with (default: pretrained "
                        "baseline)");
    heatmap->add_option("--slide", slide, "slide index")->required();
    heatmap->add_option("--ref-row", ref_row, "reference patch grid row")->required();
    heatmap->add_option("--ref-col", ref_col, "reference patch grid column")->required();
    CLI::App* gradcheck =
        app.add_subcommand("gradcheck", "finite-difference gradient checks for every op");

    try {
        app.parse(argc, argv);
    } catch (const CLI::ParseError& e) {
        const int code = app.exit(e);
        return code == 0 ? 0 : 1;
    }

    try {
        const mcmkd::ExperimentConfig cfg =
            config_path.empty() ? mcmkd::ExperimentConfig{} : mcmkd::load_config(config_path);
        if (gen->parsed()) {
            return mcmkd::cmd_gen(cfg, seed, out_dir);
        }
        if (pretrain->parsed()) {
            return mcmkd::cmd_pretrain(cfg, seed, out_dir);
        }
        if (finetune->parsed()) {
            return mcmkd::cmd_finetune(cfg, seed, out_dir, data_dir, variant, lr_override);
        }
        if (train_mil->parsed()) {
            return mcmkd::cmd_train_mil(cfg, seed, out_dir, data_dir, checkpoint);
        }
        if (eval_cmd->parsed()) {
            return mcmkd::cmd_eval(cfg, seed, out_dir, data_dir, checkpoint, mil_checkpoint,
                                   eval_seed.value_or(cfg.seeds.front()));
        }
        if (ablate->parsed()) {
            return mcmkd::cmd_ablate(cfg, seed, out_dir, data_dir);
        }
        if (heatmap->parsed()) {
            return mcmkd::cmd_heatmap(cfg, seed, out_dir, data_dir, checkpoint, slide, ref_row,
                                      ref_col);
        }
        if (gradcheck->parsed()) {
            return mcmkd::cmd_gradcheck();
        }
    } catch (const mcmkd::ConfigError& e) {
        std::cerr << "config error: " << e.what() << "\n";
        return 1;
    } catch (const mcmkd::DataFormatError& e) {
        std::cerr << "data error: " << e.what() << "\n";
        return 2;
    } catch (const mcmkd::DivergenceError& e) {
        std::cerr << "divergence: " << e.what() << "\n";
        return 3;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 1;
    }
    return 0;
}
