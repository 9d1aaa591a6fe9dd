#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "mcmkd/synth.hpp"

namespace mcmkd {

/// Flat key=value experiment configuration ('#' comments, one pair per line).
/// Unknown keys are rejected; omitted keys keep these defaults; serialization
/// is canonical (fixed key order, round-trippable numbers).
struct ExperimentConfig {
    // geometry
    std::size_t patch = 16;   // p, pixels per patch side
    std::size_t window = 4;   // s, patches per context window side
    std::size_t grid_h = 16;  // slide grid
    std::size_t grid_w = 16;
    std::size_t channels = 3;

    // synthetic slides
    std::size_t n_slides = 150;
    double class_balance = 0.5;
    double lesion_rate = 0.02;
    double noise_sigma = 0.05;
    double tissue_min_fraction = 0.6;
    double lesion_dot_delta = kLesionDotDeltaDefault;  // dot texture contrast, see synth.hpp

    // encoders and proxy pretraining
    std::size_t d_f = 64;
    std::size_t d_t = 128;
    double student_sigma = 0.15;  // pretraining noise; the gap to noise_sigma is the domain shift
    double teacher_sigma = 0.05;
    std::size_t pretrain_samples = 2048;
    std::size_t pretrain_holdout = 512;
    std::size_t pretrain_batch = 32;
    std::size_t pretrain_max_epochs = 30;
    std::size_t teacher_budget_multiplier = 4;  // the teacher plays the heavily-pretrained model
    double pretrain_lr = 1e-3;

    // context encoder and fine-tuning task
    std::size_t tf_layers = 2;
    std::size_t tf_heads = 2;
    std::size_t tf_mlp_hidden = 128;
    std::size_t predictor_hidden = 128;
    double mask_ratio = 0.5;
    std::string variant = "mcm-kd";
    double ema_tau = 0.999;
    double ft_lr = 1e-3;
    std::vector<double> ft_lrs = {1e-4, 5e-4, 1e-3};  // sweep candidates
    std::size_t ft_batch = 8;
    std::size_t ft_epochs = 1;

    // downstream MIL
    std::size_t mil_hidden = 64;
    std::size_t mil_epochs = 100;
    std::size_t mil_accum = 8;
    double mil_lr = 5e-3;

    // splits and evaluation seeds
    double split_train = 0.8;
    double split_val = 0.1;
    double split_test = 0.1;
    std::vector<std::uint64_t> seeds = {1, 2, 3, 4, 5};
};

ExperimentConfig parse_config(std::string_view text);
ExperimentConfig load_config(const std::string& path);
std::string serialize_config(const ExperimentConfig& cfg);
/// Range and consistency checks; throws ConfigError.
void validate_config(const ExperimentConfig& cfg);

std::uint64_t fnv1a64(std::string_view bytes);

/// Reproducibility record written before any training output. The content
/// hash covers command, canonical config, and root seed (not the timestamp).
struct RunManifest {
    std::string command;
    std::uint64_t root_seed = 0;
    std::string config_text;
    std::uint64_t content_hash = 0;
    std::string created;  // ISO 8601 UTC
    std::map<std::string, std::uint64_t> derived_seeds;
    std::vector<std::pair<std::string, std::string>> artifacts;  // name -> path
};

RunManifest make_manifest(const std::string& command, const ExperimentConfig& cfg,
                          std::uint64_t root_seed);
void write_manifest(const std::string& path, const RunManifest& manifest);
std::string hash_hex(std::uint64_t hash);

}  // namespace mcmkd
