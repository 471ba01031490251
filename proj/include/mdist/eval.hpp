#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "mdist/data.hpp"
#include "mdist/net.hpp"

namespace mdist {

struct RetrievalReport {
    std::vector<std::size_t> k_values;
    std::vector<double> recall_at;  // aligned with k_values, each in [0, 1]
    std::size_t num_queries = 0;

    double recall(std::size_t k) const;
};

// Symmetric N x N Euclidean distance matrix with zero diagonal.
Tensor pairwise_distances(const Tensor& embeddings);

// Recall@K over the embedding set: fraction of queries whose K nearest
// neighbors (self excluded, distance ties broken by lower index) contain at
// least one same-label item. Every label must occur >= 2 times.
RetrievalReport recall_at_k(const Tensor& embeddings, const std::vector<int>& labels,
                            const std::vector<std::size_t>& k_values);

// Binary embedding export: magic "MDEB", u32 version, u64 N, u64 D, then N
// rows of (u32 label, D little-endian f64).
void export_embeddings(const Tensor& embeddings, const std::vector<int>& labels,
                       const std::string& path);
void export_embeddings(const EmbeddingNet& net, const Dataset& ds,
                       const std::vector<std::size_t>& indices, const std::string& path);

struct EmbeddingFile {
    Tensor embeddings;  // N x D
    std::vector<int> labels;
};

EmbeddingFile load_embeddings(const std::string& path);

}  // namespace mdist
