#pragma once

#include <cstddef>
#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "mcmkd/blocks.hpp"
#include "mcmkd/rng.hpp"
#include "mcmkd/tensor.hpp"

namespace mcmkd {

struct Bag {
    Tensor instances;  // [N x d_f], leaf data
    int label = 0;     // {0, 1}
    std::string slide_id;
};

/// Per-dimension affine normalization fitted on training-split instances and
/// applied to every split; keeps the classifier insensitive to the feature
/// scale and offset of whichever extractor produced the bags.
struct FeatureNorm {
    Tensor mu;  // [1 x d]
    Tensor sd;  // [1 x d], floored at 1e-8
};

FeatureNorm fit_feature_norm(const std::vector<Bag>& bags);

Bag apply_feature_norm(const FeatureNorm& norm, const Bag& bag);
std::vector<Bag> apply_feature_norm(const FeatureNorm& norm, const std::vector<Bag>& bags);

/// Gated attention pooling (a_k proportional to exp(w^T (tanh(V h_k) *
/// sigmoid(U h_k)))) followed by a 2-class linear head. V, U, w are bias-free.
class AttentionMilClassifier {
public:
    AttentionMilClassifier() = default;
    AttentionMilClassifier(std::size_t in_dim, std::size_t hidden, Rng& rng);

    std::size_t in_dim() const { return V.dim(1); }
    std::size_t hidden_dim() const { return V.dim(0); }

    std::vector<Tensor> params() const;
    NamedParams named_params(const std::string& prefix) const;

    Tensor V;  // [h x d]
    Tensor U;  // [h x d]
    Tensor w;  // [h x 1]
    LinearLayer head;  // d -> 2
};

struct PooledBag {
    Tensor z;  // [1 x d], attention-weighted sum
    Tensor a;  // [1 x N], weights summing to 1
};

PooledBag attention_pool(const AttentionMilClassifier& clf, const Bag& bag);

/// Class logits [1 x 2] for one bag.
Tensor mil_forward(const AttentionMilClassifier& clf, const Bag& bag);

/// Probability of class 1 for one bag (softmax of the logits).
double mil_score(const AttentionMilClassifier& clf, const Bag& bag);

struct MilConfig {
    std::size_t epochs = 100;
    std::size_t accum = 8;  // optimizer steps every accum slides
    double lr = 1e-3;
    double weight_decay = 0.01;
};

struct MilHistory {
    std::vector<double> train_losses;  // per-epoch mean over slides
    std::vector<double> val_losses;    // per-epoch mean over slides
    std::size_t best_epoch = 0;        // epoch of the restored snapshot
    double best_val_loss = 0.0;
};

/// Per-slide cross-entropy with gradient accumulation (sums divided by accum,
/// remainder batches included at the same divisor). The classifier is left at
/// the minimum-validation-loss snapshot.
MilHistory train_mil(AttentionMilClassifier& clf, const std::vector<Bag>& train,
                     const std::vector<Bag>& val, const MilConfig& cfg, std::uint64_t seed);

double mean_bag_loss(const AttentionMilClassifier& clf, const std::vector<Bag>& bags);

/// Macro AUROC: the Mann-Whitney pairwise value (ties 0.5) averaged with its
/// complement-label recomputation; the two are asserted equal.
double auroc(std::span<const double> scores, std::span<const int> labels);

struct SplitSpec {
    double train = 0.8, val = 0.1, test = 0.1;
    bool stratified = true;
    std::uint64_t seed = 0;
};

struct SplitResult {
    std::vector<std::size_t> train, val, test;  // indices, each sorted ascending
};

/// Disjoint, exhaustive, seeded splits; stratified per class within rounding,
/// with at least one sample of each class per split.
SplitResult make_splits(std::span<const int> labels, const SplitSpec& spec);

}  // namespace mcmkd
