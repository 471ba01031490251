#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdist/data.hpp"
#include "mdist/net.hpp"
#include "mdist/trainer.hpp"

namespace mdist {

struct DatasetSection {
    enum class Kind { Synthetic, Csv };
    Kind kind = Kind::Synthetic;
    // synthetic
    std::size_t classes = 20, per_class = 50, dim = 32;
    double intra_std = 0.5, inter_scale = 5.0;
    std::uint64_t seed = 7;
    // csv
    std::string csv_path;
    // optional grid view of the features (C x H x W)
    bool has_grid = false;
    std::size_t grid_c = 0, grid_h = 0, grid_w = 0;
    std::uint64_t split_seed = 0;
};

struct NetSection {
    bool present = false;
    std::vector<LayerSpec> layers;
    std::size_t embedding_dim = 512;
    bool l2_normalize = false;
};

// A full experiment: dataset, teacher/student architectures, training
// settings, evaluation K grid and output directory. Parsed from nested
// key=value sections; every key is validated before any compute.
struct ExperimentConfig {
    DatasetSection dataset;
    NetSection teacher, student;
    TrainConfig train;
    std::vector<std::size_t> eval_k = {1, 2, 4, 8, 16};
    std::size_t eval_seeds = 3;
    std::string out_dir;
};

ExperimentConfig parse_experiment_config(const std::string& text);
ExperimentConfig load_experiment_config(const std::string& path);

// Canonical snapshot of the effective (merged) config.
std::string experiment_config_to_text(const ExperimentConfig& cfg);

// Instantiates the dataset (generation or CSV load + optional grid view)
// and applies the class-disjoint half split.
Dataset build_dataset(const DatasetSection& section);

// Fills the net's input kind from the dataset sample shape.
NetConfig build_net_config(const NetSection& section, const Dataset& ds, const char* role);

std::string layers_to_text(const std::vector<LayerSpec>& layers);
std::vector<LayerSpec> parse_layers_text(const std::string& text);

DegradationSpec parse_degradation_text(const std::string& text);
std::string degradation_to_text(const DegradationSpec& spec);

}  // namespace mdist
