#pragma once

#include <optional>
#include <string>
#include <vector>

#include "mdist/tape.hpp"

namespace mdist {

// Keeps gradients finite when two embeddings coincide: added under every
// sqrt in distance computations.
inline constexpr double kDistanceEps = 1e-12;

// Scalar hyperparameters of the combined objective.
struct LossWeights {
    double margin_m = 0.2;  // triplet margin
    double lambda = 0.0;    // distillation weight
    double mu = 0.0;        // hint weight
    double kappa = 0.0;     // attention weight
};

// All weights must be non-negative and finite.
void validate_weights(const LossWeights& w);

struct TripletIdx {
    std::size_t anchor, positive, negative;
};

struct PairIdx {
    std::size_t i, j;
};

// Euclidean distance between matching rows of two equal-shape B x D nodes.
Tape::NodeId row_distances(Tape& t, Tape::NodeId a, Tape::NodeId b, bool squared = false);

// Hinge loss max(0, d+ - d- + m) for one triplet of D-vectors.
Tape::NodeId triplet_loss(Tape& t, Tape::NodeId anchor, Tape::NodeId positive,
                          Tape::NodeId negative, double margin, bool squared = false);

// Mean triplet loss over mined triplets of a B x D embedding batch.
Tape::NodeId triplet_loss_batch(Tape& t, Tape::NodeId embeddings,
                                const std::vector<TripletIdx>& triplets, double margin,
                                bool squared = false);

// Mean over the batch of per-sample distances between student and teacher
// embeddings (the absolute teacher).
Tape::NodeId kd_abs_loss(Tape& t, Tape::NodeId student, Tape::NodeId teacher,
                         bool squared = false);

// Mean over pairs of |d_ij(student) - d_ij(teacher)| (the relative teacher).
// Student and teacher embedding dims may differ.
Tape::NodeId kd_rel_loss(Tape& t, Tape::NodeId student, Tape::NodeId teacher,
                         const std::vector<PairIdx>& pairs, bool squared = false);

struct HintPair {
    Tape::NodeId student;
    Tape::NodeId teacher;
    std::string name;  // used in diagnostics
};

// Mean over pairs and samples of the Frobenius distance between paired
// intermediate activations (batched on the leading axis).
Tape::NodeId hint_loss(Tape& t, const std::vector<HintPair>& pairs);

// Spatial attention: per-location sum over channels of squared activations.
// C x H x W -> H x W, or batched B x C x H x W -> B x H x W.
Tape::NodeId attention_map(Tape& t, Tape::NodeId feature_map);

// Frobenius distance between the two maps after each is divided by its own
// L2 norm. Rejects zero-norm maps.
Tape::NodeId attention_loss(Tape& t, Tape::NodeId student_map, Tape::NodeId teacher_map);

// Mean attention loss over a batch, starting from raw feature maps
// (B x C x H x W on both sides; spatial shapes must match).
Tape::NodeId attention_loss_batch(Tape& t, Tape::NodeId student_features,
                                  Tape::NodeId teacher_features);

// Weighted combination L = L_ML + lambda*L_KD + mu*L_hint + kappa*L_AT.
// Terms with zero weight are left out of the graph entirely, so degenerate
// weights reproduce the reduced objective bit-for-bit.
struct LossTerms {
    std::optional<Tape::NodeId> ml;
    std::optional<Tape::NodeId> kd;
    std::optional<Tape::NodeId> hint;
    std::optional<Tape::NodeId> at;
};

Tape::NodeId total_loss(Tape& t, const LossTerms& terms, const LossWeights& w);

}  // namespace mdist
