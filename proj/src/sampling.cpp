#include "mdist/sampling.hpp"

#include <algorithm>
#include <cmath>
#include <map>

namespace mdist {

std::vector<std::size_t> make_batch(const Dataset& ds, const std::vector<std::size_t>& pool,
                                    std::size_t batch_size, std::size_t classes_per_batch,
                                    Rng& rng) {
    if (classes_per_batch < 2) {
        throw Error("make_batch: need >= 2 classes per batch for negatives, got " +
                    std::to_string(classes_per_batch));
    }
    if (batch_size % classes_per_batch != 0) {
        throw Error("make_batch: batch_size " + std::to_string(batch_size) +
                    " not divisible by classes_per_batch " + std::to_string(classes_per_batch));
    }
    const std::size_t per_class = batch_size / classes_per_batch;
    if (per_class < 2) {
        throw Error("make_batch: composition gives " + std::to_string(per_class) +
                    " sample(s) per class; positives need >= 2");
    }

    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i : pool) by_class[ds.labels[i]].push_back(i);
    std::vector<int> eligible;
    for (const auto& [label, idx] : by_class) {
        if (idx.size() >= per_class) eligible.push_back(label);
    }
    if (eligible.size() < classes_per_batch) {
        throw Error("make_batch: need " + std::to_string(classes_per_batch) + " classes with >= " +
                    std::to_string(per_class) + " samples, pool has " +
                    std::to_string(eligible.size()) + " of " + std::to_string(by_class.size()));
    }

    rng.shuffle(eligible);
    std::vector<std::size_t> batch;
    batch.reserve(batch_size);
    for (std::size_t c = 0; c < classes_per_batch; ++c) {
        std::vector<std::size_t> idx = by_class[eligible[c]];
        rng.shuffle(idx);
        for (std::size_t s = 0; s < per_class; ++s) batch.push_back(idx[s]);
    }
    return batch;
}

std::vector<TripletIdx> mine_hard_negatives(const Tensor& embeddings,
                                            const std::vector<int>& labels) {
    if (embeddings.rank() != 2) {
        throw Error("mine_hard_negatives: embeddings must be BxD, got " +
                    shape_str(embeddings.shape));
    }
    const std::size_t B = embeddings.shape[0], D = embeddings.shape[1];
    if (labels.size() != B) {
        throw Error("mine_hard_negatives: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(B) + " embeddings");
    }
    bool has_two_classes = false;
    for (std::size_t i = 1; i < B; ++i) {
        if (labels[i] != labels[0]) {
            has_two_classes = true;
            break;
        }
    }
    if (!has_two_classes) {
        throw Error("mine_hard_negatives: batch has a single class; no negatives exist");
    }

    auto sqdist = [&](std::size_t a, std::size_t b) {
        double acc = 0.0;
        const double* ra = &embeddings.data[a * D];
        const double* rb = &embeddings.data[b * D];
        for (std::size_t k = 0; k < D; ++k) {
            const double d = ra[k] - rb[k];
            acc += d * d;
        }
        return acc;
    };

    // hardest negative per anchor: nearest differently-labeled sample,
    // ties broken by lowest index
    std::vector<std::size_t> hardest(B);
    for (std::size_t a = 0; a < B; ++a) {
        double best = std::numeric_limits<double>::infinity();
        std::size_t best_idx = B;
        for (std::size_t n = 0; n < B; ++n) {
            if (labels[n] == labels[a]) continue;
            const double d = sqdist(a, n);
            if (d < best) {
                best = d;
                best_idx = n;
            }
        }
        hardest[a] = best_idx;
    }

    std::vector<TripletIdx> triplets;
    for (std::size_t a = 0; a < B; ++a) {
        for (std::size_t p = 0; p < B; ++p) {
            if (p == a || labels[p] != labels[a]) continue;
            triplets.push_back({a, p, hardest[a]});
        }
    }
    return triplets;
}

std::vector<PairIdx> enumerate_pairs(std::size_t batch_size) {
    if (batch_size < 2) {
        throw Error("enumerate_pairs: batch_size must be >= 2, got " +
                    std::to_string(batch_size));
    }
    std::vector<PairIdx> pairs;
    pairs.reserve(batch_size * (batch_size - 1) / 2);
    for (std::size_t i = 0; i < batch_size; ++i) {
        for (std::size_t j = i + 1; j < batch_size; ++j) pairs.push_back({i, j});
    }
    return pairs;
}

}  // namespace mdist
