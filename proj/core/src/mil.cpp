#include "mcmkd/mil.hpp"

#include <algorithm>
#include <cmath>
#include <stdexcept>

#include "mcmkd/adamw.hpp"
#include "mcmkd/errors.hpp"

namespace mcmkd {

namespace {

// Sub-stream tags under the MIL training seed.
constexpr std::uint64_t kInitStream = 1;
constexpr std::uint64_t kEpochShuffleStream = 2;

constexpr std::uint64_t kSplitShuffleStream = 1;

std::size_t round_count(double x) {
    return static_cast<std::size_t>(std::floor(x + 0.5));
}

void check_bag(const AttentionMilClassifier& clf, const Bag& bag) {
    if (bag.instances.ndim() != 2 || bag.instances.dim(1) != clf.in_dim()) {
        throw std::invalid_argument("mil: bag \"" + bag.slide_id + "\" instances are " +
                                    shape_str(bag.instances.shape()) + ", classifier expects [N x " +
                                    std::to_string(clf.in_dim()) + "]");
    }
    if (bag.label != 0 && bag.label != 1) {
        throw std::invalid_argument("mil: bag \"" + bag.slide_id + "\" label must be 0 or 1");
    }
}

}  // namespace

AttentionMilClassifier::AttentionMilClassifier(std::size_t in_dim, std::size_t hidden, Rng& rng)
    : V(Tensor::randn({hidden, in_dim}, rng, kInitStddev, true)),
      U(Tensor::randn({hidden, in_dim}, rng, kInitStddev, true)),
      w(Tensor::randn({hidden, 1}, rng, kInitStddev, true)),
      head(in_dim, 2, rng) {
    if (hidden == 0) {
        throw ConfigError("mil: attention hidden dim must be positive");
    }
}

std::vector<Tensor> AttentionMilClassifier::params() const {
    return {V, U, w, head.W, head.b};
}

NamedParams AttentionMilClassifier::named_params(const std::string& prefix) const {
    NamedParams out;
    out.emplace_back(prefix + ".v", V);
    out.emplace_back(prefix + ".u", U);
    out.emplace_back(prefix + ".w", w);
    head.append_named(prefix + ".head", out);
    return out;
}

FeatureNorm fit_feature_norm(const std::vector<Bag>& bags) {
    if (bags.empty()) {
        throw std::invalid_argument("mil: feature norm needs at least one bag");
    }
    const std::size_t d = bags.front().instances.dim(1);
    std::vector<double> mu(d, 0.0), sq(d, 0.0);
    std::size_t n = 0;
    for (const Bag& bag : bags) {
        const auto v = bag.instances.data();
        const std::size_t rows = bag.instances.dim(0);
        for (std::size_t i = 0; i < rows; ++i) {
            for (std::size_t j = 0; j < d; ++j) {
                mu[j] += v[i * d + j];
                sq[j] += v[i * d + j] * v[i * d + j];
            }
        }
        n += rows;
    }
    std::vector<double> sd(d);
    for (std::size_t j = 0; j < d; ++j) {
        mu[j] /= static_cast<double>(n);
        const double var = sq[j] / static_cast<double>(n) - mu[j] * mu[j];
        sd[j] = std::max(std::sqrt(std::max(var, 0.0)), 1e-8);
    }
    FeatureNorm norm;
    norm.mu = Tensor::from_data({1, d}, std::move(mu));
    norm.sd = Tensor::from_data({1, d}, std::move(sd));
    return norm;
}

Bag apply_feature_norm(const FeatureNorm& norm, const Bag& bag) {
    const std::size_t d = bag.instances.dim(1);
    if (norm.mu.dim(1) != d) {
        throw std::invalid_argument("mil: feature norm dim " + std::to_string(norm.mu.dim(1)) +
                                    " does not match bag dim " + std::to_string(d));
    }
    const auto v = bag.instances.data();
    const auto mu = norm.mu.data();
    const auto sd = norm.sd.data();
    std::vector<double> out(v.size());
    const std::size_t rows = bag.instances.dim(0);
    for (std::size_t i = 0; i < rows; ++i) {
        for (std::size_t j = 0; j < d; ++j) {
            out[i * d + j] = (v[i * d + j] - mu[j]) / sd[j];
        }
    }
    Bag res;
    res.instances = Tensor::from_data({rows, d}, std::move(out));
    res.label = bag.label;
    res.slide_id = bag.slide_id;
    return res;
}

std::vector<Bag> apply_feature_norm(const FeatureNorm& norm, const std::vector<Bag>& bags) {
    std::vector<Bag> out;
    out.reserve(bags.size());
    for (const Bag& bag : bags) {
        out.push_back(apply_feature_norm(norm, bag));
    }
    return out;
}

PooledBag attention_pool(const AttentionMilClassifier& clf, const Bag& bag) {
    check_bag(clf, bag);
    const Tensor& h = bag.instances;
    const Tensor gate = mul(tanh(matmul(h, transpose(clf.V))),
                            sigmoid(matmul(h, transpose(clf.U))));  // [N x hidden]
    const Tensor scores = matmul(gate, clf.w);                      // [N x 1]
    const Tensor a = softmax(transpose(scores));                    // [1 x N]
    return PooledBag{matmul(a, h), a};
}

Tensor mil_forward(const AttentionMilClassifier& clf, const Bag& bag) {
    return linear_forward(clf.head, attention_pool(clf, bag).z);
}

double mil_score(const AttentionMilClassifier& clf, const Bag& bag) {
    const Tensor probs = softmax(mil_forward(clf, bag));
    return probs.at({0, 1});
}

double mean_bag_loss(const AttentionMilClassifier& clf, const std::vector<Bag>& bags) {
    if (bags.empty()) {
        throw std::invalid_argument("mil: no bags to evaluate");
    }
    double total = 0.0;
    for (const Bag& bag : bags) {
        const std::size_t label = static_cast<std::size_t>(bag.label);
        total += cross_entropy(mil_forward(clf, bag), {&label, 1}).value();
    }
    return total / static_cast<double>(bags.size());
}

MilHistory train_mil(AttentionMilClassifier& clf, const std::vector<Bag>& train,
                     const std::vector<Bag>& val, const MilConfig& cfg, std::uint64_t seed) {
    if (train.empty() || val.empty()) {
        throw ConfigError("mil: train and validation sets must be non-empty");
    }
    if (cfg.epochs == 0 || cfg.accum == 0) {
        throw ConfigError("mil: epochs and accum must be positive");
    }
    std::vector<Tensor> params = clf.params();
    AdamW optimizer(params, AdamWState{.lr = cfg.lr, .weight_decay = cfg.weight_decay});
    const double inv_accum = 1.0 / static_cast<double>(cfg.accum);

    std::vector<std::size_t> order(train.size());
    for (std::size_t i = 0; i < order.size(); ++i) {
        order[i] = i;
    }

    MilHistory history;
    std::vector<std::vector<double>> best_snapshot;
    for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
        Rng shuffle_rng(derive_seed(seed, {kEpochShuffleStream, epoch}));
        shuffle(order, shuffle_rng);
        double epoch_loss = 0.0;
        std::size_t pending = 0;
        auto flush = [&]() {
            for (Tensor& p : params) {
                double* g = p.grad_buffer().data();
                for (std::size_t i = 0; i < p.numel(); ++i) {
                    g[i] *= inv_accum;
                }
            }
            optimizer.step();
            optimizer.zero_grad();
            pending = 0;
        };
        for (const std::size_t bi : order) {
            Tape tape;
            const std::size_t label = static_cast<std::size_t>(train[bi].label);
            const Tensor loss = cross_entropy(mil_forward(clf, train[bi]), {&label, 1});
            if (!all_finite(loss)) {
                throw DivergenceError("mil: non-finite training loss in epoch " +
                                      std::to_string(epoch));
            }
            backward(loss);
            epoch_loss += loss.value();
            if (++pending == cfg.accum) {
                flush();
            }
        }
        if (pending > 0) {
            flush();
        }
        history.train_losses.push_back(epoch_loss / static_cast<double>(train.size()));

        const double val_loss = mean_bag_loss(clf, val);
        if (!std::isfinite(val_loss)) {
            throw DivergenceError("mil: non-finite validation loss in epoch " +
                                  std::to_string(epoch));
        }
        history.val_losses.push_back(val_loss);
        if (best_snapshot.empty() || val_loss < history.best_val_loss) {
            history.best_val_loss = val_loss;
            history.best_epoch = epoch;
            best_snapshot.clear();
            for (const Tensor& p : params) {
                best_snapshot.emplace_back(p.data().begin(), p.data().end());
            }
        }
    }
    for (std::size_t i = 0; i < params.size(); ++i) {
        std::copy(best_snapshot[i].begin(), best_snapshot[i].end(),
                  params[i].mutable_data().begin());
    }
    return history;
}

namespace {

double pairwise_auroc(std::span<const double> scores, std::span<const int> labels, int positive) {
    std::size_t pairs = 0;
    double wins = 0.0;
    for (std::size_t i = 0; i < scores.size(); ++i) {
        if (labels[i] != positive) {
            continue;
        }
        for (std::size_t j = 0; j < scores.size(); ++j) {
            if (labels[j] == positive) {
                continue;
            }
            ++pairs;
            if (scores[i] > scores[j]) {
                wins += 1.0;
            } else if (scores[i] == scores[j]) {
                wins += 0.5;
            }
        }
    }
    return wins / static_cast<double>(pairs);
}

}  // namespace

double auroc(std::span<const double> scores, std::span<const int> labels) {
    if (scores.size() != labels.size()) {
        throw std::invalid_argument("auroc: scores and labels differ in length");
    }
    std::size_t positives = 0;
    for (const int label : labels) {
        if (label != 0 && label != 1) {
            throw std::invalid_argument("auroc: labels must be 0 or 1");
        }
        positives += label == 1 ? 1 : 0;
    }
    if (positives == 0 || positives == labels.size()) {
        throw std::invalid_argument("auroc: both classes must be present");
    }
    const double direct = pairwise_auroc(scores, labels, 1);
    std::vector<double> negated(scores.begin(), scores.end());
    for (double& s : negated) {
        s = -s;
    }
    const double complement = pairwise_auroc(negated, labels, 0);
    if (std::abs(direct - complement) > 1e-12) {
        throw std::logic_error("auroc: macro self-check failed");
    }
    return 0.5 * (direct + complement);
}

SplitResult make_splits(std::span<const int> labels, const SplitSpec& spec) {
    if (std::abs(spec.train + spec.val + spec.test - 1.0) > 1e-9 || spec.train <= 0.0 ||
        spec.val <= 0.0 || spec.test <= 0.0) {
        throw ConfigError("splits: fractions must be positive and sum to 1");
    }
    std::vector<std::vector<std::size_t>> groups;
    if (spec.stratified) {
        groups.resize(2);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            if (labels[i] != 0 && labels[i] != 1) {
                throw std::invalid_argument("splits: labels must be 0 or 1");
            }
            groups[static_cast<std::size_t>(labels[i])].push_back(i);
        }
        for (std::size_t cls = 0; cls < 2; ++cls) {
            if (groups[cls].size() < 3) {
                throw ConfigError("splits: class " + std::to_string(cls) + " has " +
                                  std::to_string(groups[cls].size()) +
                                  " samples, need at least 3");
            }
        }
    } else {
        groups.resize(1);
        for (std::size_t i = 0; i < labels.size(); ++i) {
            groups[0].push_back(i);
        }
        if (groups[0].size() < 3) {
            throw ConfigError("splits: need at least 3 samples");
        }
    }

    SplitResult result;
    for (std::size_t g = 0; g < groups.size(); ++g) {
        std::vector<std::size_t>& members = groups[g];
        Rng rng(derive_seed(spec.seed, {kSplitShuffleStream, g}));
        shuffle(members, rng);
        const auto n = static_cast<double>(members.size());
        std::size_t n_train = std::max<std::size_t>(1, round_count(n * spec.train));
        std::size_t n_val = std::max<std::size_t>(1, round_count(n * spec.val));
        while (n_train + n_val + 1 > members.size()) {
            if (n_train > 1) {
                --n_train;
            } else {
                --n_val;
            }
        }
        for (std::size_t i = 0; i < members.size(); ++i) {
            if (i < n_train) {
                result.train.push_back(members[i]);
            } else if (i < n_train + n_val) {
                result.val.push_back(members[i]);
            } else {
                result.test.push_back(members[i]);
            }
        }
    }
    std::sort(result.train.begin(), result.train.end());
    std::sort(result.val.begin(), result.val.end());
    std::sort(result.test.begin(), result.test.end());
    return result;
}

}  // namespace mcmkd
