#pragma once

#include <cstdint>
#include <iosfwd>
#include <optional>
#include <string>
#include <vector>

#include "mcmkd/archive.hpp"
#include "mcmkd/config.hpp"
#include "mcmkd/encoders.hpp"
#include "mcmkd/mil.hpp"
#include "mcmkd/synth.hpp"
#include "mcmkd/task.hpp"

namespace mcmkd {

/// One generated slide reduced to what training consumes: the label and the
/// tissue-kept context windows (the pixel raster is dropped after extraction).
struct SlideRecord {
    std::size_t index = 0;
    std::uint64_t seed = 0;
    int label = 0;
    std::size_t windows_total = 0;           // before the tissue filter
    std::vector<ContextWindow> windows;      // kept, original order
};

struct Dataset {
    std::vector<SlideRecord> slides;

    std::size_t total_windows() const;
    std::vector<int> labels() const;
    /// Every kept window, slide-major, window order preserved.
    std::vector<ContextWindow> all_windows() const;
};

SlideConfig slide_config(const ExperimentConfig& cfg);

/// Slide i is drawn from the derived stream (root_seed, slide-tag, i).
Dataset generate_dataset(const ExperimentConfig& cfg, std::uint64_t root_seed);

/// Raw patch pixels of one slide's kept windows as an f32 archive (dim c*p*p).
FeatureArchive window_archive(const SlideRecord& rec);
std::vector<ContextWindow> windows_from_archive(const FeatureArchive& archive, std::size_t patch,
                                                std::size_t channels);

/// Reads a gen output directory (labels CSV + per-slide archives) back into
/// a Dataset whose windows carry the archived pixels.
Dataset load_dataset(const ExperimentConfig& cfg, const std::string& data_dir);

struct PretrainedPair {
    PatchEncoder teacher;  // frozen
    PatchEncoder student;
    std::string teacher_path;  // cache files; empty when cache_dir is empty
    std::string student_path;
    bool from_cache = false;
    PretrainReport teacher_report;  // zeroed on cache hits
    PretrainReport student_report;
};

/// Hash of the pretraining-relevant configuration and the root seed; names the
/// cache entry so every run with the same inputs shares one pretrained pair.
std::uint64_t pretrain_hash(const ExperimentConfig& cfg, std::uint64_t root_seed);

/// Loads the cached pair when present, otherwise pretrains both encoders and
/// (for a non-empty cache_dir) writes their checkpoints.
PretrainedPair ensure_pretrained(const ExperimentConfig& cfg, std::uint64_t root_seed,
                                 const std::string& cache_dir);

/// Frozen-teacher features per window; reusable across variants and seeds.
std::vector<Tensor> teacher_feature_cache(const PatchEncoder& teacher,
                                          const std::vector<ContextWindow>& windows);

TaskConfig task_config(const ExperimentConfig& cfg, Variant variant);

struct FinetuneOutcome {
    McmKdModel model;
    std::vector<double> batch_losses;  // all epochs, batch order
    std::size_t n_windows = 0;
};

/// Builds the variant's model around the given student and fine-tunes it for
/// cfg.ft_epochs passes. lr_override < 0 means "use cfg.ft_lr".
FinetuneOutcome run_finetune(const ExperimentConfig& cfg, Variant variant,
                             const std::vector<ContextWindow>& windows, PatchEncoder student,
                             std::optional<PatchEncoder> teacher, std::uint64_t seed,
                             double lr_override = -1.0,
                             const std::vector<Tensor>* cached_targets = nullptr);

/// One bag per slide: features of every patch of every kept window.
std::vector<Bag> extract_bags(const PatchEncoder& extractor, const Dataset& data);

struct MilOutcome {
    AttentionMilClassifier clf;
    FeatureNorm norm;  // fitted on the train split, applied everywhere
    MilHistory history;
    SplitResult split;
    double val_auroc = 0.0;
    double test_auroc = 0.0;
    std::vector<double> scores;  // per bag, from the restored best snapshot
};

/// Stratified split, MIL training with minimum-validation-loss selection,
/// then scoring of every bag. seed covers split shuffle, init, epoch order.
MilOutcome run_mil(const ExperimentConfig& cfg, const std::vector<Bag>& bags, std::uint64_t seed);

struct SeedSummary {
    std::uint64_t seed = 0;
    double val_auroc = 0.0;
    double test_auroc = 0.0;
};

struct EvaluationSummary {
    std::vector<SeedSummary> per_seed;
    double mean_val = 0.0, sd_val = 0.0;
    double mean_test = 0.0, sd_test = 0.0;
};

EvaluationSummary summarize(const std::vector<SeedSummary>& rows);

/// One ablation-table row: an extractor evaluated over the shared seed list.
struct ArmResult {
    std::string name;
    bool failed = false;
    std::string error;
    EvaluationSummary summary;
    std::vector<PatchEncoder> students;  // per seed; empty for the baseline arm
};

/// arm "baseline" evaluates the pretrained student frozen; the variant arms
/// fine-tune a fresh copy per seed first. Failures are captured, not thrown.
ArmResult run_arm(const ExperimentConfig& cfg, const std::string& arm, const Dataset& data,
                  const PretrainedPair& pre, const std::vector<Tensor>* cached_targets);

/// Prints one PASS/FAIL line per case covering every differentiable op plus
/// the full fine-tuning loss graph on a 2x2 context; returns failure count.
int run_gradcheck_battery(std::ostream& os);

// ---- CLI commands. Success returns 0; ConfigError, DataFormatError and
// ---- DivergenceError map to exit codes 1, 2 and 3 in the binary.

int cmd_gen(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir);
int cmd_pretrain(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir);
int cmd_finetune(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                 const std::string& data_dir, const std::string& variant, double lr_override);
int cmd_train_mil(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                  const std::string& data_dir, const std::string& checkpoint);
int cmd_eval(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
             const std::string& data_dir, const std::string& checkpoint,
             const std::string& mil_checkpoint, std::uint64_t eval_seed);
int cmd_ablate(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
               const std::string& data_dir);
int cmd_heatmap(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                const std::string& data_dir, const std::string& checkpoint, std::size_t slide,
                std::size_t ref_row, std::size_t ref_col);
int cmd_gradcheck();

}  // namespace mcmkd
