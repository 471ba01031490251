#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdist/tensor.hpp"

namespace mdist {

// Labeled samples with a class-disjoint train/test split. Train classes are
// further split per class into train/validation samples.
struct Dataset {
    std::vector<Tensor> samples;  // vectors (dim) or grids (C x H x W)
    std::vector<int> labels;
    std::string name;

    std::vector<int> train_classes, test_classes;
    std::vector<std::size_t> train_indices, val_indices, test_indices;

    std::size_t size() const { return samples.size(); }
    bool has_split() const { return !train_classes.empty() || !test_classes.empty(); }
};

// Checks the core invariants (label count, classes with >= 2 samples,
// disjoint covering split when present). Throws on violation.
void validate_dataset(const Dataset& ds);

struct DegradationSpec {
    enum class Kind { LowRes, Noise, Mask };
    Kind kind = Kind::Noise;
    std::size_t factor = 2;   // LowRes: integer >= 2
    double sigma = 0.1;       // Noise: > 0
    double fraction = 0.25;   // Mask: in (0, 1)

    static DegradationSpec lowres(std::size_t factor) {
        DegradationSpec s;
        s.kind = Kind::LowRes;
        s.factor = factor;
        return s;
    }
    static DegradationSpec noise(double sigma) {
        DegradationSpec s;
        s.kind = Kind::Noise;
        s.sigma = sigma;
        return s;
    }
    static DegradationSpec mask(double fraction) {
        DegradationSpec s;
        s.kind = Kind::Mask;
        s.fraction = fraction;
        return s;
    }
};

void validate_degradation(const DegradationSpec& spec);

// Gaussian blobs around uniformly drawn class prototypes. Deterministic by
// seed. num_classes >= 4 so the half split leaves at least two test classes.
Dataset gen_synthetic_clusters(std::size_t num_classes, std::size_t per_class,
                               std::size_t input_dim, double intra_std, double inter_scale,
                               std::uint64_t seed);

// Lower half of the sorted class ids trains (odd counts put the extra class
// in train), upper half tests. Within train classes, a seeded per-class
// 80/20 split populates train/validation indices.
void split_classes_half(Dataset& ds, std::uint64_t seed = 0);

// Applies one degradation. Output shape equals input shape; deterministic
// given (sample, spec, seed).
Tensor degrade(const Tensor& sample, const DegradationSpec& spec, std::uint64_t seed);

// CSV ingestion: one sample per line, "label,f1,...,fn"; lines starting
// with '#' are comments. Errors name offending line numbers.
Dataset load_csv_dataset(const std::string& path);
void save_csv_dataset(const Dataset& ds, const std::string& path);

// Reinterpret vector samples as C x H x W grids (row-major view).
Dataset as_grid(const Dataset& ds, std::size_t channels, std::size_t height, std::size_t width);

}  // namespace mdist
