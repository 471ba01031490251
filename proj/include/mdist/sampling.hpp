#pragma once

#include <vector>

#include "mdist/data.hpp"
#include "mdist/losses.hpp"
#include "mdist/rng.hpp"

namespace mdist {

// Mini-batch with mined triplet structure and the pair set for the
// relative loss. Indices are positions within the batch.
struct TripletBatch {
    std::vector<std::size_t> sample_indices;  // dataset indices of batch members
    std::vector<TripletIdx> triplets;
    std::vector<PairIdx> pairs;
};

// Class-balanced batch: classes_per_batch distinct classes, each
// contributing batch_size / classes_per_batch samples drawn from `pool`.
// Rejects infeasible compositions with counts.
std::vector<std::size_t> make_batch(const Dataset& ds, const std::vector<std::size_t>& pool,
                                    std::size_t batch_size, std::size_t classes_per_batch,
                                    Rng& rng);

// In-batch hard negative mining: for every ordered same-class (anchor,
// positive) pair, the negative is the differently-labeled batch sample
// closest to the anchor (ties broken by lowest index).
std::vector<TripletIdx> mine_hard_negatives(const Tensor& embeddings,
                                            const std::vector<int>& labels);

// All unordered pairs (i, j) with i < j, lexicographic.
std::vector<PairIdx> enumerate_pairs(std::size_t batch_size);

}  // namespace mdist
