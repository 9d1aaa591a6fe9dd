#include "mcmkd/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <map>
#include <optional>
#include <sstream>
#include <utility>

#include "mcmkd/errors.hpp"
#include "mcmkd/gradcheck.hpp"
#include "mcmkd/heatmap.hpp"

namespace mcmkd {

namespace {

std::string slide_stem(std::size_t index) {
    char buf[32];
    std::snprintf(buf, sizeof(buf), "slide_%04zu", index);
    return buf;
}

std::string join_path(const std::string& dir, const std::string& name) {
    return (std::filesystem::path(dir) / name).string();
}

void ensure_dir(const std::string& dir) {
    std::error_code ec;
    std::filesystem::create_directories(dir, ec);
    if (ec) {
        throw DataFormatError("cannot create directory " + dir + ": " + ec.message());
    }
}

void write_text(const std::string& path, const std::string& content) {
    std::ofstream out(path, std::ios::trunc);
    if (!out) {
        throw DataFormatError("cannot open for writing: " + path);
    }
    out << content;
    if (!out) {
        throw DataFormatError("write failed: " + path);
    }
}

double mean_of(const std::vector<double>& xs) {
    double acc = 0.0;
    for (const double x : xs) {
        acc += x;
    }
    return xs.empty() ? 0.0 : acc / static_cast<double>(xs.size());
}

double sample_sd(const std::vector<double>& xs) {
    if (xs.size() < 2) {
        return 0.0;
    }
    const double m = mean_of(xs);
    double acc = 0.0;
    for (const double x : xs) {
        acc += (x - m) * (x - m);
    }
    return std::sqrt(acc / static_cast<double>(xs.size() - 1));
}

/// Copies stored values into the live parameters; any name or shape deviation
/// is a configuration mismatch (corrupt containers throw DataFormatError in
/// read_checkpoint before this runs).
void load_matching_checkpoint(const std::string& path, const NamedParams& live,
                              const std::string& what) {
    const NamedParams stored = read_checkpoint(path);
    std::map<std::string, Tensor> by_name;
    for (const auto& [name, tensor] : stored) {
        by_name.emplace(name, tensor);
    }
    if (stored.size() != live.size()) {
        throw ConfigError(what + " " + path + " holds " + std::to_string(stored.size()) +
                          " parameters, the configured model has " + std::to_string(live.size()));
    }
    for (auto& [name, tensor] : live) {
        const auto it = by_name.find(name);
        if (it == by_name.end()) {
            throw ConfigError(what + " " + path + " is missing parameter " + name);
        }
        if (it->second.shape() != tensor.shape()) {
            throw ConfigError(what + " " + path + " parameter " + name + " has shape " +
                              shape_str(it->second.shape()) + ", the configuration needs " +
                              shape_str(tensor.shape()));
        }
        auto dst = Tensor(tensor).mutable_data();
        const auto src = it->second.data();
        std::copy(src.begin(), src.end(), dst.begin());
    }
}

PatchEncoder build_student(const ExperimentConfig& cfg) {
    Rng rng(0);
    return PatchEncoder(student_encoder_config(cfg.patch, cfg.channels, cfg.d_f), rng);
}

PatchEncoder load_student_checkpoint(const ExperimentConfig& cfg, const std::string& path) {
    PatchEncoder enc = build_student(cfg);
    load_matching_checkpoint(path, enc.named_params("student"), "student checkpoint");
    return enc;
}

struct MilCheckpoint {
    AttentionMilClassifier clf;
    FeatureNorm norm;
};

MilCheckpoint load_mil_checkpoint(const ExperimentConfig& cfg, const std::string& path) {
    Rng rng(0);
    MilCheckpoint out;
    out.clf = AttentionMilClassifier(cfg.d_f, cfg.mil_hidden, rng);
    out.norm.mu = Tensor::zeros({1, cfg.d_f});
    out.norm.sd = Tensor::zeros({1, cfg.d_f});
    NamedParams np = out.clf.named_params("mil");
    np.emplace_back("mil.norm.mu", out.norm.mu);
    np.emplace_back("mil.norm.sd", out.norm.sd);
    load_matching_checkpoint(path, np, "mil checkpoint");
    return out;
}

bool variant_uses_frozen_teacher(Variant v) {
    return v == Variant::kMcmKd || v == Variant::kKd || v == Variant::kCmKd;
}

std::string checkpoint_stem(const std::string& checkpoint) {
    if (checkpoint.empty()) {
        return "baseline";
    }
    return std::filesystem::path(checkpoint).stem().string();
}

PretrainConfig pretrain_settings(const ExperimentConfig& cfg, double sigma) {
    PretrainConfig pc;
    pc.patch = cfg.patch;
    pc.channels = cfg.channels;
    pc.sigma = sigma;
    pc.train_samples = cfg.pretrain_samples;
    pc.holdout_samples = cfg.pretrain_holdout;
    pc.batch = cfg.pretrain_batch;
    pc.max_epochs = cfg.pretrain_max_epochs;
    pc.budget_multiplier = cfg.teacher_budget_multiplier;
    pc.dot_delta = cfg.lesion_dot_delta;
    pc.lr = cfg.pretrain_lr;
    return pc;
}

}  // namespace

std::size_t Dataset::total_windows() const {
    std::size_t n = 0;
    for (const SlideRecord& rec : slides) {
        n += rec.windows.size();
    }
    return n;
}

std::vector<int> Dataset::labels() const {
    std::vector<int> out;
    out.reserve(slides.size());
    for (const SlideRecord& rec : slides) {
        out.push_back(rec.label);
    }
    return out;
}

std::vector<ContextWindow> Dataset::all_windows() const {
    std::vector<ContextWindow> out;
    out.reserve(total_windows());
    for (const SlideRecord& rec : slides) {
        out.insert(out.end(), rec.windows.begin(), rec.windows.end());
    }
    return out;
}

SlideConfig slide_config(const ExperimentConfig& cfg) {
    SlideConfig sc;
    sc.grid_h = cfg.grid_h;
    sc.grid_w = cfg.grid_w;
    sc.patch = cfg.patch;
    sc.channels = cfg.channels;
    sc.class_balance = cfg.class_balance;
    sc.lesion_rate = cfg.lesion_rate;
    sc.noise_sigma = cfg.noise_sigma;
    sc.lesion_dot_delta = cfg.lesion_dot_delta;
    return sc;
}

Dataset generate_dataset(const ExperimentConfig& cfg, std::uint64_t root_seed) {
    const SlideConfig sc = slide_config(cfg);
    Dataset data;
    data.slides.reserve(cfg.n_slides);
    for (std::size_t i = 0; i < cfg.n_slides; ++i) {
        const std::uint64_t slide_seed = derive_seed(root_seed, {seed_tag::kSlide, i});
        const SyntheticSlide slide = generate_slide(sc, slide_seed);
        std::vector<ContextWindow> windows = extract_context_windows(slide, cfg.window);
        SlideRecord rec;
        rec.index = i;
        rec.seed = slide_seed;
        rec.label = slide.label;
        rec.windows_total = windows.size();
        rec.windows = tissue_filter(std::move(windows), cfg.tissue_min_fraction);
        data.slides.push_back(std::move(rec));
    }
    return data;
}

FeatureArchive window_archive(const SlideRecord& rec) {
    FeatureArchive archive;
    for (const ContextWindow& w : rec.windows) {
        if (archive.sequences.empty()) {
            archive.s = static_cast<std::uint16_t>(w.s);
            archive.dim = static_cast<std::uint16_t>(w.patch_dim());
        }
        FeatureSequence seq;
        seq.origin_row = static_cast<std::uint32_t>(w.origin_row);
        seq.origin_col = static_cast<std::uint32_t>(w.origin_col);
        seq.values.reserve(w.patch_data.size());
        for (const double v : w.patch_data) {
            seq.values.push_back(static_cast<float>(v));
        }
        archive.sequences.push_back(std::move(seq));
    }
    return archive;
}

std::vector<ContextWindow> windows_from_archive(const FeatureArchive& archive, std::size_t patch,
                                                std::size_t channels) {
    const std::size_t dim = channels * patch * patch;
    if (!archive.sequences.empty() && archive.dim != dim) {
        throw DataFormatError("archive patch dim " + std::to_string(archive.dim) +
                              " does not match channels*patch*patch = " + std::to_string(dim));
    }
    std::vector<ContextWindow> out;
    out.reserve(archive.sequences.size());
    for (const FeatureSequence& seq : archive.sequences) {
        ContextWindow w;
        w.s = archive.s;
        w.patch = patch;
        w.channels = channels;
        w.origin_row = seq.origin_row;
        w.origin_col = seq.origin_col;
        w.patch_data.assign(seq.values.begin(), seq.values.end());
        w.tissue_fraction = recompute_tissue_fraction(w);
        out.push_back(std::move(w));
    }
    return out;
}

Dataset load_dataset(const ExperimentConfig& cfg, const std::string& data_dir) {
    const std::string csv_path = join_path(data_dir, "slides.csv");
    std::ifstream in(csv_path);
    if (!in) {
        throw DataFormatError("cannot open " + csv_path + " (run gen first)");
    }
    std::string line;
    if (!std::getline(in, line) || line != "slide,label,windows") {
        throw DataFormatError(csv_path + ": expected header slide,label,windows");
    }
    Dataset data;
    while (std::getline(in, line)) {
        if (line.empty()) {
            continue;
        }
        std::size_t index = 0, count = 0;
        int label = 0;
        if (std::sscanf(line.c_str(), "%zu,%d,%zu", &index, &label, &count) != 3) {
            throw DataFormatError(csv_path + ": malformed row \"" + line + "\"");
        }
        const std::string archive_path = join_path(data_dir, slide_stem(index) + ".mcfa");
        const FeatureArchive archive = read_feature_archive(archive_path);
        if (archive.sequences.size() != count) {
            throw DataFormatError(archive_path + " holds " +
                                  std::to_string(archive.sequences.size()) +
                                  " windows, slides.csv records " + std::to_string(count));
        }
        if (!archive.sequences.empty() && archive.s != cfg.window) {
            throw DataFormatError(archive_path + ": window side " + std::to_string(archive.s) +
                                  " does not match configured " + std::to_string(cfg.window));
        }
        SlideRecord rec;
        rec.index = index;
        rec.label = label;
        rec.windows_total = count;
        rec.windows = windows_from_archive(archive, cfg.patch, cfg.channels);
        data.slides.push_back(std::move(rec));
    }
    if (data.slides.empty()) {
        throw DataFormatError(csv_path + ": no slides listed");
    }
    return data;
}

std::uint64_t pretrain_hash(const ExperimentConfig& cfg, std::uint64_t root_seed) {
    std::string key = "pretrain\n";
    key += "patch=" + std::to_string(cfg.patch) + "\n";
    key += "channels=" + std::to_string(cfg.channels) + "\n";
    key += "d_f=" + std::to_string(cfg.d_f) + "\n";
    key += "d_t=" + std::to_string(cfg.d_t) + "\n";
    key += "student_sigma=" + format_g17(cfg.student_sigma) + "\n";
    key += "teacher_sigma=" + format_g17(cfg.teacher_sigma) + "\n";
    key += "samples=" + std::to_string(cfg.pretrain_samples) + "\n";
    key += "holdout=" + std::to_string(cfg.pretrain_holdout) + "\n";
    key += "batch=" + std::to_string(cfg.pretrain_batch) + "\n";
    key += "max_epochs=" + std::to_string(cfg.pretrain_max_epochs) + "\n";
    key += "teacher_budget=" + std::to_string(cfg.teacher_budget_multiplier) + "\n";
    key += "dot_delta=" + format_g17(cfg.lesion_dot_delta) + "\n";
    key += "lr=" + format_g17(cfg.pretrain_lr) + "\n";
    key += "seed=" + std::to_string(root_seed) + "\n";
    return fnv1a64(key);
}

PretrainedPair ensure_pretrained(const ExperimentConfig& cfg, std::uint64_t root_seed,
                                 const std::string& cache_dir) {
    const std::uint64_t teacher_seed = derive_seed(root_seed, {seed_tag::kPretrain, 0});
    const std::uint64_t student_seed = derive_seed(root_seed, {seed_tag::kPretrain, 1});

    PretrainedPair pair;
    if (!cache_dir.empty()) {
        const std::string tag = hash_hex(pretrain_hash(cfg, root_seed));
        pair.teacher_path = join_path(cache_dir, "pretrain_" + tag + "_teacher.mckp");
        pair.student_path = join_path(cache_dir, "pretrain_" + tag + "_student.mckp");
        if (std::filesystem::exists(pair.teacher_path) &&
            std::filesystem::exists(pair.student_path)) {
            Rng rng(0);
            pair.teacher =
                PatchEncoder(teacher_encoder_config(cfg.patch, cfg.channels, cfg.d_t), rng);
            load_matching_checkpoint(pair.teacher_path, pair.teacher.named_params("teacher"),
                                     "teacher checkpoint");
            pair.teacher.freeze();
            pair.student = build_student(cfg);
            load_matching_checkpoint(pair.student_path, pair.student.named_params("student"),
                                     "student checkpoint");
            pair.from_cache = true;
            return pair;
        }
    }

    pair.teacher = pretrain_teacher(teacher_encoder_config(cfg.patch, cfg.channels, cfg.d_t),
                                    pretrain_settings(cfg, cfg.teacher_sigma), teacher_seed,
                                    &pair.teacher_report);
    pair.student = init_student(student_encoder_config(cfg.patch, cfg.channels, cfg.d_f),
                                pretrain_settings(cfg, cfg.student_sigma), student_seed,
                                &pair.student_report);
    if (!cache_dir.empty()) {
        ensure_dir(cache_dir);
        write_checkpoint(pair.teacher_path, pair.teacher.named_params("teacher"));
        write_checkpoint(pair.student_path, pair.student.named_params("student"));
    }
    return pair;
}

std::vector<Tensor> teacher_feature_cache(const PatchEncoder& teacher,
                                          const std::vector<ContextWindow>& windows) {
    std::vector<Tensor> out;
    out.reserve(windows.size());
    for (const ContextWindow& w : windows) {
        out.push_back(teacher.encode_window(w));
    }
    return out;
}

TaskConfig task_config(const ExperimentConfig& cfg, Variant variant) {
    TaskConfig tc;
    tc.s = cfg.window;
    tc.d_f = cfg.d_f;
    tc.d_t = cfg.d_t;
    tc.tf_layers = cfg.tf_layers;
    tc.tf_heads = cfg.tf_heads;
    tc.tf_mlp_hidden = cfg.tf_mlp_hidden;
    tc.predictor_hidden = cfg.predictor_hidden;
    tc.mask_ratio = cfg.mask_ratio;
    tc.ema_tau = cfg.ema_tau;
    tc.variant = variant;
    return tc;
}

FinetuneOutcome run_finetune(const ExperimentConfig& cfg, Variant variant,
                             const std::vector<ContextWindow>& windows, PatchEncoder student,
                             std::optional<PatchEncoder> teacher, std::uint64_t seed,
                             double lr_override, const std::vector<Tensor>* cached_targets) {
    FinetuneOutcome outcome;
    outcome.model =
        build_task_model(task_config(cfg, variant), std::move(student), std::move(teacher), seed);
    FinetuneConfig fc;
    fc.lr = lr_override >= 0.0 ? lr_override : cfg.ft_lr;
    fc.batch = cfg.ft_batch;
    outcome.n_windows = windows.size();
    // Optimizer moments restart with each pass; the default protocol is a
    // single pass, so this only affects explicit multi-epoch overrides.
    for (std::size_t epoch = 0; epoch < cfg.ft_epochs; ++epoch) {
        const TrainReport report =
            finetune_epoch(outcome.model, windows, fc,
                           derive_seed(seed, {seed_tag::kFinetune, epoch}), cached_targets);
        outcome.batch_losses.insert(outcome.batch_losses.end(), report.batch_losses.begin(),
                                    report.batch_losses.end());
    }
    return outcome;
}

std::vector<Bag> extract_bags(const PatchEncoder& extractor, const Dataset& data) {
    std::vector<Bag> bags;
    bags.reserve(data.slides.size());
    for (const SlideRecord& rec : data.slides) {
        if (rec.windows.empty()) {
            continue;  // a slide with every window filtered out yields no instances
        }
        const std::size_t per_window = rec.windows.front().n_patches();
        const std::size_t dim = extractor.out_dim();
        std::vector<double> values;
        values.reserve(rec.windows.size() * per_window * dim);
        for (const ContextWindow& w : rec.windows) {
            const Tensor feats = extractor.encode_window(w);
            const auto span = feats.data();
            values.insert(values.end(), span.begin(), span.end());
        }
        Bag bag;
        bag.instances =
            Tensor::from_data({rec.windows.size() * per_window, dim}, std::move(values));
        bag.label = rec.label;
        bag.slide_id = slide_stem(rec.index);
        bags.push_back(std::move(bag));
    }
    return bags;
}

MilOutcome run_mil(const ExperimentConfig& cfg, const std::vector<Bag>& bags, std::uint64_t seed) {
    std::vector<int> labels;
    labels.reserve(bags.size());
    for (const Bag& bag : bags) {
        labels.push_back(bag.label);
    }
    SplitSpec spec;
    spec.train = cfg.split_train;
    spec.val = cfg.split_val;
    spec.test = cfg.split_test;
    spec.stratified = true;
    spec.seed = derive_seed(seed, {seed_tag::kSplit});

    MilOutcome outcome;
    outcome.split = make_splits(labels, spec);

    const auto pick = [&bags](const std::vector<std::size_t>& idx) {
        std::vector<Bag> out;
        out.reserve(idx.size());
        for (const std::size_t i : idx) {
            out.push_back(bags[i]);
        }
        return out;
    };
    outcome.norm = fit_feature_norm(pick(outcome.split.train));
    const std::vector<Bag> train_bags = apply_feature_norm(outcome.norm, pick(outcome.split.train));
    const std::vector<Bag> val_bags = apply_feature_norm(outcome.norm, pick(outcome.split.val));

    Rng init_rng(derive_seed(seed, {seed_tag::kMil, seed_tag::kInit}));
    outcome.clf =
        AttentionMilClassifier(bags.front().instances.dim(1), cfg.mil_hidden, init_rng);
    MilConfig mc;
    mc.epochs = cfg.mil_epochs;
    mc.accum = cfg.mil_accum;
    mc.lr = cfg.mil_lr;
    outcome.history =
        train_mil(outcome.clf, train_bags, val_bags, mc, derive_seed(seed, {seed_tag::kMil}));

    outcome.scores.reserve(bags.size());
    for (const Bag& bag : bags) {
        outcome.scores.push_back(mil_score(outcome.clf, apply_feature_norm(outcome.norm, bag)));
    }
    const auto split_auroc = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> s;
        std::vector<int> l;
        for (const std::size_t i : idx) {
            s.push_back(outcome.scores[i]);
            l.push_back(labels[i]);
        }
        return auroc(s, l);
    };
    outcome.val_auroc = split_auroc(outcome.split.val);
    outcome.test_auroc = split_auroc(outcome.split.test);
    return outcome;
}

EvaluationSummary summarize(const std::vector<SeedSummary>& rows) {
    EvaluationSummary summary;
    summary.per_seed = rows;
    std::vector<double> vals, tests;
    for (const SeedSummary& row : rows) {
        vals.push_back(row.val_auroc);
        tests.push_back(row.test_auroc);
    }
    summary.mean_val = mean_of(vals);
    summary.sd_val = sample_sd(vals);
    summary.mean_test = mean_of(tests);
    summary.sd_test = sample_sd(tests);
    return summary;
}

ArmResult run_arm(const ExperimentConfig& cfg, const std::string& arm, const Dataset& data,
                  const PretrainedPair& pre, const std::vector<Tensor>* cached_targets) {
    ArmResult result;
    result.name = arm;
    try {
        std::vector<SeedSummary> rows;
        if (arm == "baseline") {
            const std::vector<Bag> bags = extract_bags(pre.student, data);
            for (const std::uint64_t seed : cfg.seeds) {
                const MilOutcome mil = run_mil(cfg, bags, seed);
                rows.push_back({seed, mil.val_auroc, mil.test_auroc});
            }
        } else {
            const Variant variant = parse_variant(arm);
            const bool with_teacher = variant_uses_frozen_teacher(variant);
            const std::vector<ContextWindow> windows = data.all_windows();
            const std::vector<Tensor>* targets = with_teacher ? cached_targets : nullptr;
            for (const std::uint64_t seed : cfg.seeds) {
                FinetuneOutcome ft = run_finetune(
                    cfg, variant, windows, pre.student.clone(true),
                    with_teacher ? std::optional<PatchEncoder>(pre.teacher) : std::nullopt, seed,
                    -1.0, targets);
                const std::vector<Bag> bags = extract_bags(ft.model.student, data);
                const MilOutcome mil = run_mil(cfg, bags, seed);
                rows.push_back({seed, mil.val_auroc, mil.test_auroc});
                result.students.push_back(std::move(ft.model.student));
            }
        }
        result.summary = summarize(rows);
    } catch (const std::exception& e) {
        result.failed = true;
        result.error = e.what();
    }
    return result;
}

// ---- CLI commands ----------------------------------------------------------

int cmd_gen(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
    validate_config(cfg);
    ensure_dir(out_dir);

    RunManifest manifest = make_manifest("gen", cfg, seed);
    manifest.derived_seeds["slide_0"] = derive_seed(seed, {seed_tag::kSlide, 0});
    manifest.artifacts.emplace_back("slides.csv", join_path(out_dir, "slides.csv"));
    for (std::size_t i = 0; i < cfg.n_slides; ++i) {
        manifest.artifacts.emplace_back(slide_stem(i) + ".mcfa",
                                        join_path(out_dir, slide_stem(i) + ".mcfa"));
        manifest.artifacts.emplace_back(slide_stem(i) + ".ppm",
                                        join_path(out_dir, slide_stem(i) + ".ppm"));
    }
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const SlideConfig sc = slide_config(cfg);
    std::string csv = "slide,label,windows\n";
    std::size_t kept_total = 0;
    for (std::size_t i = 0; i < cfg.n_slides; ++i) {
        const SyntheticSlide slide = generate_slide(sc, derive_seed(seed, {seed_tag::kSlide, i}));
        write_ppm(join_path(out_dir, slide_stem(i) + ".ppm"), slide);
        SlideRecord rec;
        rec.index = i;
        rec.label = slide.label;
        rec.windows = tissue_filter(extract_context_windows(slide, cfg.window),
                                    cfg.tissue_min_fraction);
        write_feature_archive(join_path(out_dir, slide_stem(i) + ".mcfa"), window_archive(rec));
        csv += std::to_string(i) + "," + std::to_string(rec.label) + "," +
               std::to_string(rec.windows.size()) + "\n";
        kept_total += rec.windows.size();
    }
    write_text(join_path(out_dir, "slides.csv"), csv);
    std::cout << "gen: " << cfg.n_slides << " slides, " << kept_total
              << " windows kept after tissue filter\n";
    return 0;
}

int cmd_pretrain(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const std::string cache_dir = join_path(out_dir, "cache");
    const std::string tag = hash_hex(pretrain_hash(cfg, seed));

    RunManifest manifest = make_manifest("pretrain", cfg, seed);
    manifest.derived_seeds["pretrain_teacher"] = derive_seed(seed, {seed_tag::kPretrain, 0});
    manifest.derived_seeds["pretrain_student"] = derive_seed(seed, {seed_tag::kPretrain, 1});
    manifest.artifacts.emplace_back("teacher.mckp", join_path(out_dir, "teacher.mckp"));
    manifest.artifacts.emplace_back("student_init.mckp", join_path(out_dir, "student_init.mckp"));
    manifest.artifacts.emplace_back(
        "cache_teacher", join_path(cache_dir, "pretrain_" + tag + "_teacher.mckp"));
    manifest.artifacts.emplace_back(
        "cache_student", join_path(cache_dir, "pretrain_" + tag + "_student.mckp"));
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const PretrainedPair pair = ensure_pretrained(cfg, seed, cache_dir);
    write_checkpoint(join_path(out_dir, "teacher.mckp"), pair.teacher.named_params("teacher"));
    write_checkpoint(join_path(out_dir, "student_init.mckp"),
                     pair.student.named_params("student"));
    std::cout << "pretrain: teacher " << pair.teacher.param_count() << " params, student "
              << pair.student.param_count() << " params"
              << (pair.from_cache ? " (cache hit " : " (cached as ") << tag << ")\n";
    if (!pair.from_cache) {
        std::cout << "pretrain: teacher holdout acc " << pair.teacher_report.holdout_accuracy
                  << " after " << pair.teacher_report.epochs << " epochs, student holdout acc "
                  << pair.student_report.holdout_accuracy << " after "
                  << pair.student_report.epochs << " epochs\n";
    }
    return 0;
}

int cmd_finetune(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                 const std::string& data_dir, const std::string& variant, double lr_override) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const Variant v = parse_variant(variant.empty() ? cfg.variant : variant);
    const std::string name = variant_name(v);
    const std::string src_dir = data_dir.empty() ? out_dir : data_dir;

    RunManifest manifest = make_manifest("finetune --variant " + name, cfg, seed);
    manifest.derived_seeds["finetune"] = derive_seed(seed, {seed_tag::kFinetune, 0});
    manifest.artifacts.emplace_back("student_checkpoint",
                                    join_path(out_dir, "student_" + name + ".mckp"));
    manifest.artifacts.emplace_back("aux_checkpoint (discardable)",
                                    join_path(out_dir, "aux_" + name + ".mckp"));
    manifest.artifacts.emplace_back("context_encoder",
                                    v == Variant::kKd ? "absent"
                                                      : join_path(out_dir, "aux_" + name + ".mckp"));
    manifest.artifacts.emplace_back("loss_csv",
                                    join_path(out_dir, "finetune_loss_" + name + ".csv"));
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const Dataset data = load_dataset(cfg, src_dir);
    const PretrainedPair pair = ensure_pretrained(cfg, seed, join_path(out_dir, "cache"));
    write_checkpoint(join_path(out_dir, "student_init.mckp"),
                     pair.student.named_params("student"));

    const std::vector<ContextWindow> windows = data.all_windows();
    const FinetuneOutcome ft = run_finetune(
        cfg, v, windows, pair.student.clone(true),
        variant_uses_frozen_teacher(v) ? std::optional<PatchEncoder>(pair.teacher) : std::nullopt,
        seed, lr_override);

    write_checkpoint(join_path(out_dir, "student_" + name + ".mckp"),
                     ft.model.student_named_params());
    write_checkpoint(join_path(out_dir, "aux_" + name + ".mckp"), ft.model.aux_named_params());
    std::string csv = "batch_index,loss\n";
    for (std::size_t i = 0; i < ft.batch_losses.size(); ++i) {
        csv += std::to_string(i) + "," + format_g17(ft.batch_losses[i]) + "\n";
    }
    write_text(join_path(out_dir, "finetune_loss_" + name + ".csv"), csv);
    std::cout << "finetune " << name << ": " << ft.n_windows << " windows, "
              << ft.batch_losses.size() << " batches, last loss "
              << (ft.batch_losses.empty() ? 0.0 : ft.batch_losses.back()) << "\n";
    return 0;
}

int cmd_train_mil(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                  const std::string& data_dir, const std::string& checkpoint) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const std::string src_dir = data_dir.empty() ? out_dir : data_dir;
    const std::string stem = checkpoint_stem(checkpoint);

    RunManifest manifest = make_manifest("train-mil --checkpoint " + stem, cfg, seed);
    manifest.artifacts.emplace_back("metrics_csv",
                                    join_path(out_dir, "mil_metrics_" + stem + ".csv"));
    for (const std::uint64_t s : cfg.seeds) {
        const std::string suffix = stem + "_seed" + std::to_string(s);
        manifest.derived_seeds["mil_seed" + std::to_string(s)] =
            derive_seed(s, {seed_tag::kMil});
        manifest.artifacts.emplace_back("mil_" + suffix + ".mckp",
                                        join_path(out_dir, "mil_" + suffix + ".mckp"));
        manifest.artifacts.emplace_back(
            "mil_predictions_" + suffix + ".csv",
            join_path(out_dir, "mil_predictions_" + suffix + ".csv"));
    }
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const Dataset data = load_dataset(cfg, src_dir);
    PatchEncoder extractor = checkpoint.empty()
                                 ? ensure_pretrained(cfg, seed, join_path(out_dir, "cache")).student
                                 : load_student_checkpoint(cfg, checkpoint);
    const std::vector<Bag> bags = extract_bags(extractor, data);

    std::vector<SeedSummary> rows;
    for (const std::uint64_t s : cfg.seeds) {
        const MilOutcome mil = run_mil(cfg, bags, s);
        rows.push_back({s, mil.val_auroc, mil.test_auroc});
        const std::string suffix = stem + "_seed" + std::to_string(s);
        NamedParams np = mil.clf.named_params("mil");
        np.emplace_back("mil.norm.mu", mil.norm.mu);
        np.emplace_back("mil.norm.sd", mil.norm.sd);
        write_checkpoint(join_path(out_dir, "mil_" + suffix + ".mckp"), np);
        std::string pred = "slide_id,score,label\n";
        for (const std::size_t i : mil.split.test) {
            pred += bags[i].slide_id + "," + format_g17(mil.scores[i]) + "," +
                    std::to_string(bags[i].label) + "\n";
        }
        write_text(join_path(out_dir, "mil_predictions_" + suffix + ".csv"), pred);
    }

    const EvaluationSummary summary = summarize(rows);
    std::string csv = "seed,split,auroc\n";
    for (const SeedSummary& row : rows) {
        csv += std::to_string(row.seed) + ",val," + format_g17(row.val_auroc) + "\n";
        csv += std::to_string(row.seed) + ",test," + format_g17(row.test_auroc) + "\n";
    }
    csv += "mean,val," + format_g17(summary.mean_val) + "\n";
    csv += "sd,val," + format_g17(summary.sd_val) + "\n";
    csv += "mean,test," + format_g17(summary.mean_test) + "\n";
    csv += "sd,test," + format_g17(summary.sd_test) + "\n";
    write_text(join_path(out_dir, "mil_metrics_" + stem + ".csv"), csv);
    std::cout << "train-mil " << stem << ": mean test auroc " << summary.mean_test << " +- "
              << summary.sd_test << " over " << cfg.seeds.size() << " seeds\n";
    return 0;
}

int cmd_eval(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
             const std::string& data_dir, const std::string& checkpoint,
             const std::string& mil_checkpoint, std::uint64_t eval_seed) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const std::string src_dir = data_dir.empty() ? out_dir : data_dir;
    const std::string stem = checkpoint_stem(mil_checkpoint);

    RunManifest manifest = make_manifest("eval --mil " + stem, cfg, seed);
    manifest.derived_seeds["split"] = derive_seed(eval_seed, {seed_tag::kSplit});
    manifest.artifacts.emplace_back("metrics_csv",
                                    join_path(out_dir, "eval_metrics_" + stem + ".csv"));
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const Dataset data = load_dataset(cfg, src_dir);
    PatchEncoder extractor = checkpoint.empty()
                                 ? ensure_pretrained(cfg, seed, join_path(out_dir, "cache")).student
                                 : load_student_checkpoint(cfg, checkpoint);
    const MilCheckpoint mil = load_mil_checkpoint(cfg, mil_checkpoint);
    const std::vector<Bag> bags = extract_bags(extractor, data);

    std::vector<int> labels;
    std::vector<double> scores;
    for (const Bag& bag : bags) {
        labels.push_back(bag.label);
        scores.push_back(mil_score(mil.clf, apply_feature_norm(mil.norm, bag)));
    }
    SplitSpec spec;
    spec.train = cfg.split_train;
    spec.val = cfg.split_val;
    spec.test = cfg.split_test;
    spec.seed = derive_seed(eval_seed, {seed_tag::kSplit});
    const SplitResult split = make_splits(labels, spec);

    const auto split_auroc = [&](const std::vector<std::size_t>& idx) {
        std::vector<double> s;
        std::vector<int> l;
        for (const std::size_t i : idx) {
            s.push_back(scores[i]);
            l.push_back(labels[i]);
        }
        return auroc(s, l);
    };
    std::string csv = "seed,split,auroc\n";
    csv += std::to_string(eval_seed) + ",train," + format_g17(split_auroc(split.train)) + "\n";
    csv += std::to_string(eval_seed) + ",val," + format_g17(split_auroc(split.val)) + "\n";
    const double test = split_auroc(split.test);
    csv += std::to_string(eval_seed) + ",test," + format_g17(test) + "\n";
    write_text(join_path(out_dir, "eval_metrics_" + stem + ".csv"), csv);
    std::cout << "eval " << stem << ": test auroc " << test << "\n";
    return 0;
}

int cmd_ablate(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
               const std::string& data_dir) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const std::string src_dir = data_dir.empty() ? out_dir : data_dir;

    RunManifest manifest = make_manifest("ablate", cfg, seed);
    for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
        manifest.derived_seeds["seed_" + std::to_string(i)] = cfg.seeds[i];
    }
    manifest.artifacts.emplace_back("ablation_csv", join_path(out_dir, "ablation.csv"));
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const Dataset data = load_dataset(cfg, src_dir);
    const PretrainedPair pair = ensure_pretrained(cfg, seed, join_path(out_dir, "cache"));
    const std::vector<ContextWindow> windows = data.all_windows();
    const std::vector<Tensor> targets = teacher_feature_cache(pair.teacher, windows);

    const std::vector<std::string> arms = {"baseline", "mcm", "kd", "cm-kd", "mcm-kd", "mcm-sd"};
    std::string csv = "variant,status,mean_test_auroc,sd_test_auroc";
    for (const std::uint64_t s : cfg.seeds) {
        csv += ",auroc_seed_" + std::to_string(s);
    }
    csv += "\n";
    bool any_failed = false;
    for (const std::string& arm : arms) {
        const ArmResult result = run_arm(cfg, arm, data, pair, &targets);
        if (result.failed) {
            any_failed = true;
            csv += arm + ",failed,,";
            for (std::size_t i = 0; i < cfg.seeds.size(); ++i) {
                csv += ",";
            }
            csv += "\n";
            std::cout << arm << ": FAILED (" << result.error << ")\n";
            continue;
        }
        csv += arm + ",ok," + format_g17(result.summary.mean_test) + "," +
               format_g17(result.summary.sd_test);
        for (const SeedSummary& row : result.summary.per_seed) {
            csv += "," + format_g17(row.test_auroc);
        }
        csv += "\n";
        std::cout << arm << ": mean test auroc " << result.summary.mean_test << " +- "
                  << result.summary.sd_test << "\n";
    }
    write_text(join_path(out_dir, "ablation.csv"), csv);
    return any_failed ? 3 : 0;
}

int cmd_heatmap(const ExperimentConfig& cfg, std::uint64_t seed, const std::string& out_dir,
                const std::string& data_dir, const std::string& checkpoint, std::size_t slide,
                std::size_t ref_row, std::size_t ref_col) {
    validate_config(cfg);
    ensure_dir(out_dir);
    const std::string src_dir = data_dir.empty() ? out_dir : data_dir;
    if (ref_row >= cfg.grid_h || ref_col >= cfg.grid_w) {
        throw ConfigError("heatmap: reference patch (" + std::to_string(ref_row) + "," +
                          std::to_string(ref_col) + ") lies outside the " +
                          std::to_string(cfg.grid_h) + "x" + std::to_string(cfg.grid_w) + " grid");
    }
    const std::string stem = "heatmap_" + slide_stem(slide);

    RunManifest manifest = make_manifest("heatmap " + slide_stem(slide), cfg, seed);
    manifest.artifacts.emplace_back("grid_csv", join_path(out_dir, stem + ".csv"));
    manifest.artifacts.emplace_back("grid_pgm", join_path(out_dir, stem + ".pgm"));
    write_manifest(join_path(out_dir, "manifest.json"), manifest);

    const FeatureArchive archive =
        read_feature_archive(join_path(src_dir, slide_stem(slide) + ".mcfa"));
    if (!archive.sequences.empty() && archive.s != cfg.window) {
        throw DataFormatError("heatmap: archive window side " + std::to_string(archive.s) +
                              " does not match configured " + std::to_string(cfg.window));
    }
    const std::vector<ContextWindow> windows =
        windows_from_archive(archive, cfg.patch, cfg.channels);
    PatchEncoder extractor = checkpoint.empty()
                                 ? ensure_pretrained(cfg, seed, join_path(out_dir, "cache")).student
                                 : load_student_checkpoint(cfg, checkpoint);

    const std::size_t cells = cfg.grid_h * cfg.grid_w;
    const std::size_t dim = extractor.out_dim();
    std::vector<double> cell_features(cells * dim, 0.0);
    std::vector<char> covered(cells, 0);
    for (const ContextWindow& w : windows) {
        const Tensor feats = extractor.encode_window(w);
        const auto span = feats.data();
        for (std::size_t i = 0; i < w.n_patches(); ++i) {
            const std::size_t r = w.origin_row + i / w.s;
            const std::size_t c = w.origin_col + i % w.s;
            if (r >= cfg.grid_h || c >= cfg.grid_w) {
                throw DataFormatError("heatmap: window origin (" +
                                      std::to_string(w.origin_row) + "," +
                                      std::to_string(w.origin_col) +
                                      ") reaches outside the configured grid");
            }
            const std::size_t cell = r * cfg.grid_w + c;
            std::copy(span.begin() + i * dim, span.begin() + (i + 1) * dim,
                      cell_features.begin() + cell * dim);
            covered[cell] = 1;
        }
    }
    const std::size_t ref_cell = ref_row * cfg.grid_w + ref_col;
    if (!covered[ref_cell]) {
        throw ConfigError("heatmap: reference patch (" + std::to_string(ref_row) + "," +
                          std::to_string(ref_col) + ") is not covered by any kept window of " +
                          slide_stem(slide));
    }

    std::vector<double> feature_rows;
    std::vector<std::size_t> covered_cells;
    std::size_t ref_index = 0;
    for (std::size_t cell = 0; cell < cells; ++cell) {
        if (!covered[cell]) {
            continue;
        }
        if (cell == ref_cell) {
            ref_index = covered_cells.size();
        }
        covered_cells.push_back(cell);
        feature_rows.insert(feature_rows.end(), cell_features.begin() + cell * dim,
                            cell_features.begin() + (cell + 1) * dim);
    }
    const Tensor features =
        Tensor::from_data({covered_cells.size(), dim}, std::move(feature_rows));
    const CosineGrid grid = cosine_similarity_grid(features, ref_index);

    std::vector<double> values(cells, 0.0);
    for (std::size_t i = 0; i < covered_cells.size(); ++i) {
        values[covered_cells[i]] = grid.values[i];
    }
    const std::size_t uncovered = cells - covered_cells.size();
    if (uncovered > 0) {
        std::cerr << "heatmap: " << uncovered
                  << " grid cells not covered by kept windows, written as 0\n";
    }
    if (grid.n_degenerate > 0) {
        std::cerr << "heatmap: " << grid.n_degenerate
                  << " zero-norm feature vectors, similarity forced to 0\n";
    }

    std::string csv;
    for (std::size_t r = 0; r < cfg.grid_h; ++r) {
        for (std::size_t c = 0; c < cfg.grid_w; ++c) {
            csv += (c > 0 ? "," : "") + format_g17(values[r * cfg.grid_w + c]);
        }
        csv += "\n";
    }
    write_text(join_path(out_dir, stem + ".csv"), csv);
    write_pgm(join_path(out_dir, stem + ".pgm"), cfg.grid_h, cfg.grid_w, values);
    std::cout << "heatmap: " << covered_cells.size() << " covered cells, reference ("
              << ref_row << "," << ref_col << ")\n";
    return 0;
}

int cmd_gradcheck() {
    const int failures = run_gradcheck_battery(std::cout);
    return failures == 0 ? 0 : 1;
}

}  // namespace mcmkd
