#include "mdist/eval.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <map>
#include <sstream>

namespace mdist {

double RetrievalReport::recall(std::size_t k) const {
    for (std::size_t i = 0; i < k_values.size(); ++i) {
        if (k_values[i] == k) return recall_at[i];
    }
    throw Error("retrieval report: no entry for K=" + std::to_string(k));
}

Tensor pairwise_distances(const Tensor& embeddings) {
    if (embeddings.rank() != 2 || embeddings.shape[0] < 2) {
        throw Error("pairwise_distances: need NxD with N >= 2, got " +
                    shape_str(embeddings.shape));
    }
    const std::size_t N = embeddings.shape[0], D = embeddings.shape[1];
    Tensor out = Tensor::zeros({N, N});
    for (std::size_t i = 0; i < N; ++i) {
        for (std::size_t j = i + 1; j < N; ++j) {
            double acc = 0.0;
            const double* ri = &embeddings.data[i * D];
            const double* rj = &embeddings.data[j * D];
            for (std::size_t k = 0; k < D; ++k) {
                const double d = ri[k] - rj[k];
                acc += d * d;
            }
            const double dist = std::sqrt(acc);
            out[i * N + j] = dist;
            out[j * N + i] = dist;
        }
    }
    return out;
}

RetrievalReport recall_at_k(const Tensor& embeddings, const std::vector<int>& labels,
                            const std::vector<std::size_t>& k_values) {
    if (embeddings.rank() != 2) {
        throw Error("recall_at_k: embeddings must be NxD, got " + shape_str(embeddings.shape));
    }
    const std::size_t N = embeddings.shape[0];
    if (labels.size() != N) {
        throw Error("recall_at_k: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(N) + " embeddings");
    }
    std::map<int, std::size_t> counts;
    for (int l : labels) counts[l]++;
    for (const auto& [label, count] : counts) {
        if (count < 2) {
            throw Error("recall_at_k: class " + std::to_string(label) +
                        " has a single sample; queries from it can never match");
        }
    }
    if (k_values.empty()) throw Error("recall_at_k: empty K list");
    for (std::size_t k : k_values) {
        if (k < 1 || k > N - 1) {
            throw Error("recall_at_k: K=" + std::to_string(k) + " out of range [1, " +
                        std::to_string(N - 1) + "]");
        }
    }

    Tensor dist = pairwise_distances(embeddings);
    const std::size_t max_k = *std::max_element(k_values.begin(), k_values.end());

    // hits[q] = rank (1-based) of the first same-label neighbor, capped at max_k + 1
    std::vector<std::size_t> first_hit(N, max_k + 1);
    std::vector<std::pair<double, std::size_t>> order;
    order.reserve(N - 1);
    for (std::size_t q = 0; q < N; ++q) {
        order.clear();
        for (std::size_t c = 0; c < N; ++c) {
            if (c != q) order.emplace_back(dist[q * N + c], c);
        }
        std::partial_sort(order.begin(), order.begin() + static_cast<long>(max_k), order.end());
        for (std::size_t r = 0; r < max_k; ++r) {
            if (labels[order[r].second] == labels[q]) {
                first_hit[q] = r + 1;
                break;
            }
        }
    }

    RetrievalReport report;
    report.k_values = k_values;
    report.num_queries = N;
    for (std::size_t k : k_values) {
        std::size_t hits = 0;
        for (std::size_t q = 0; q < N; ++q) {
            if (first_hit[q] <= k) ++hits;
        }
        report.recall_at.push_back(static_cast<double>(hits) / static_cast<double>(N));
    }
    return report;
}

namespace {

constexpr char kMagic[4] = {'M', 'D', 'E', 'B'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

}  // namespace

void export_embeddings(const Tensor& embeddings, const std::vector<int>& labels,
                       const std::string& path) {
    if (embeddings.rank() != 2) {
        throw Error("export_embeddings: embeddings must be NxD, got " +
                    shape_str(embeddings.shape));
    }
    const std::size_t N = embeddings.shape[0], D = embeddings.shape[1];
    if (labels.size() != N) {
        throw Error("export_embeddings: " + std::to_string(labels.size()) + " labels for " +
                    std::to_string(N) + " rows");
    }
    for (int l : labels) {
        if (l < 0) throw Error("export_embeddings: negative label " + std::to_string(l));
    }
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    put_u64(out, N);
    put_u64(out, D);
    for (std::size_t i = 0; i < N; ++i) {
        put_u32(out, static_cast<std::uint32_t>(labels[i]));
        for (std::size_t j = 0; j < D; ++j) {
            std::uint64_t bits;
            double v = embeddings[i * D + j];
            std::memcpy(&bits, &v, 8);
            put_u64(out, bits);
        }
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("export_embeddings " + path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("export_embeddings " + path + ": write failed");
}

void export_embeddings(const EmbeddingNet& net, const Dataset& ds,
                       const std::vector<std::size_t>& indices, const std::string& path) {
    if (indices.empty()) throw Error("export_embeddings: empty split");
    Tensor batch;
    {
        const Tensor& first = ds.samples[indices[0]];
        Shape bshape;
        bshape.push_back(indices.size());
        for (std::size_t d : first.shape) bshape.push_back(d);
        batch = Tensor::zeros(bshape);
        const std::size_t rowlen = first.numel();
        for (std::size_t i = 0; i < indices.size(); ++i) {
            const Tensor& s = ds.samples[indices[i]];
            if (s.numel() != rowlen) {
                throw Error("export_embeddings: inconsistent sample shapes in split");
            }
            std::copy(s.data.begin(), s.data.end(), batch.data.begin() + static_cast<long>(i * rowlen));
        }
    }
    Tensor emb = embed(net, batch);
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) labels.push_back(ds.labels[i]);
    export_embeddings(emb, labels, path);
}

EmbeddingFile load_embeddings(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("load_embeddings " + path + ": cannot open");
    std::ostringstream buf;
    buf << f.rdbuf();
    std::string bytes = buf.str();

    std::size_t pos = 0;
    auto need = [&](std::size_t n, const char* what) {
        if (pos + n > bytes.size()) {
            throw Error("load_embeddings " + path + ": truncated while reading " + what +
                        " (expected " + std::to_string(n) + " bytes, got " +
                        std::to_string(bytes.size() - pos) + ")");
        }
    };
    auto u32 = [&](const char* what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        }
        pos += 4;
        return v;
    };
    auto u64 = [&](const char* what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes[pos + i])) << (8 * i);
        }
        pos += 8;
        return v;
    };

    need(4, "magic");
    if (std::memcmp(bytes.data(), kMagic, 4) != 0) {
        throw Error("load_embeddings " + path + ": bad magic (not an embedding file)");
    }
    pos += 4;
    std::uint32_t version = u32("version");
    if (version != kVersion) {
        throw Error("load_embeddings " + path + ": unsupported version " +
                    std::to_string(version));
    }
    const std::size_t N = static_cast<std::size_t>(u64("row count"));
    const std::size_t D = static_cast<std::size_t>(u64("dimension"));
    if (N == 0 || D == 0) throw Error("load_embeddings " + path + ": empty payload");

    EmbeddingFile out;
    out.embeddings = Tensor::zeros({N, D});
    out.labels.resize(N);
    for (std::size_t i = 0; i < N; ++i) {
        out.labels[i] = static_cast<int>(u32("label"));
        for (std::size_t j = 0; j < D; ++j) {
            std::uint64_t bits = u64("embedding row");
            double v;
            std::memcpy(&v, &bits, 8);
            out.embeddings[i * D + j] = v;
        }
    }
    if (pos != bytes.size()) {
        throw Error("load_embeddings " + path + ": trailing bytes after payload");
    }
    return out;
}

}  // namespace mdist
