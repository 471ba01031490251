#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <algorithm>
#include <cmath>
#include <filesystem>
#include <map>

#include "mdist/eval.hpp"
#include "mdist/rng.hpp"

using namespace mdist;
namespace fs = std::filesystem;

namespace {

// independent brute-force recall oracle: full sort per query
std::vector<double> oracle_recall(const Tensor& emb, const std::vector<int>& labels,
                                  const std::vector<std::size_t>& ks) {
    const std::size_t N = emb.shape[0], D = emb.shape[1];
    auto dist = [&](std::size_t a, std::size_t b) {
        double acc = 0.0;
        for (std::size_t k = 0; k < D; ++k) {
            double d = emb[a * D + k] - emb[b * D + k];
            acc += d * d;
        }
        return std::sqrt(acc);
    };
    std::vector<double> out;
    for (std::size_t k : ks) {
        std::size_t hits = 0;
        for (std::size_t q = 0; q < N; ++q) {
            std::vector<std::pair<double, std::size_t>> order;
            for (std::size_t c = 0; c < N; ++c) {
                if (c != q) order.emplace_back(dist(q, c), c);
            }
            std::sort(order.begin(), order.end());
            bool hit = false;
            for (std::size_t r = 0; r < k; ++r) hit = hit || labels[order[r].second] == labels[q];
            hits += hit;
        }
        out.push_back(static_cast<double>(hits) / static_cast<double>(N));
    }
    return out;
}

Tensor random_embeddings(Rng& rng, std::size_t n, std::size_t d) {
    Tensor t = Tensor::zeros({n, d});
    for (double& v : t.data) v = rng.uniform(-3, 3);
    return t;
}

std::vector<int> random_labels(Rng& rng, std::size_t n, std::size_t classes) {
    std::vector<int> labels(n);
    for (;;) {
        for (auto& l : labels) l = static_cast<int>(rng.below(classes));
        std::map<int, std::size_t> counts;
        for (int l : labels) counts[l]++;
        bool ok = true;
        for (const auto& [c, cnt] : counts) ok = ok && cnt >= 2;
        if (ok) return labels;
    }
}

}  // namespace

TEST_CASE("pairwise distances") {
    SUBCASE("3-4-5 off-diagonal") {
        Tensor emb({2, 2}, {0, 0, 3, 4});
        Tensor d = pairwise_distances(emb);
        CHECK(d.shape == Shape{2, 2});
        CHECK(d[0 * 2 + 1] == doctest::Approx(5.0));
        CHECK(d[1 * 2 + 0] == doctest::Approx(5.0));
        CHECK(d[0] == 0.0);
        CHECK(d[3] == 0.0);
    }
    SUBCASE("duplicated point has distance zero") {
        Tensor emb({3, 2}, {1, 1, 1, 1, 2, 2});
        Tensor d = pairwise_distances(emb);
        CHECK(d[0 * 3 + 1] == 0.0);
    }
    SUBCASE("matches the naive double loop on random sets") {
        Rng rng(3);
        Tensor emb = random_embeddings(rng, 20, 5);
        Tensor d = pairwise_distances(emb);
        for (std::size_t i = 0; i < 20; ++i) {
            for (std::size_t j = 0; j < 20; ++j) {
                double acc = 0.0;
                for (std::size_t k = 0; k < 5; ++k) {
                    double diff = emb[i * 5 + k] - emb[j * 5 + k];
                    acc += diff * diff;
                }
                CHECK(std::fabs(d[i * 20 + j] - std::sqrt(acc)) < 1e-9);
                CHECK(d[i * 20 + j] == d[j * 20 + i]);
            }
        }
    }
}

TEST_CASE("recall_at_k") {
    SUBCASE("two tight clusters give perfect R@1") {
        Tensor emb({4, 2}, {0, 0, 0.1, 0, 5, 0, 5.1, 0});
        std::vector<int> labels = {1, 1, 2, 2};
        RetrievalReport rep = recall_at_k(emb, labels, {1});
        CHECK(rep.recall(1) == 1.0);
        CHECK(rep.num_queries == 4);
    }
    SUBCASE("interleaved classes on a line give zero R@1") {
        // nearest neighbor of every point has the other label
        Tensor emb({6, 1}, {0, 1, 2, 3, 4, 5});
        std::vector<int> labels = {0, 1, 0, 1, 0, 1};
        RetrievalReport rep = recall_at_k(emb, labels, {1, 2});
        CHECK(rep.recall(1) == 0.0);
        CHECK(rep.recall(2) > 0.0);  // second neighbor reaches the same class
    }
    SUBCASE("K = N-1 with every class >= 2 is perfect") {
        Rng rng(7);
        Tensor emb = random_embeddings(rng, 10, 3);
        std::vector<int> labels = {0, 0, 1, 1, 2, 2, 3, 3, 4, 4};
        RetrievalReport rep = recall_at_k(emb, labels, {9});
        CHECK(rep.recall(9) == 1.0);
    }
    SUBCASE("singleton class rejected by name") {
        Tensor emb({3, 1}, {0, 1, 2});
        CHECK_THROWS_WITH_AS(recall_at_k(emb, {0, 0, 7}, {1}), doctest::Contains("7"), Error);
    }
    SUBCASE("K out of range rejected") {
        Tensor emb({4, 1}, {0, 1, 2, 3});
        std::vector<int> labels = {0, 0, 1, 1};
        CHECK_THROWS_AS(recall_at_k(emb, labels, {0}), Error);
        CHECK_THROWS_AS(recall_at_k(emb, labels, {4}), Error);
    }
    SUBCASE("distance ties break toward the lower index") {
        // query 0 at origin; candidates 1 (label 9) and 2 (label 0) both at distance 1
        Tensor emb({4, 2}, {0, 0, 1, 0, -1, 0, 9, 9});
        std::vector<int> labels = {0, 9, 0, 9};
        // query 0's tie resolves to index 1 (label 9): miss. query 1 misses,
        // queries 2 and 3 hit. A higher-index tie rule would score 0.75.
        RetrievalReport rep = recall_at_k(emb, labels, {1});
        CHECK(rep.recall(1) == 0.5);
    }
    SUBCASE("matches brute force exactly and is monotone on random instances") {
        Rng rng(99);
        for (int trial = 0; trial < 30; ++trial) {
            const std::size_t n = 10 + rng.below(60);
            Tensor emb = random_embeddings(rng, n, 4);
            std::vector<int> labels = random_labels(rng, n, 4);
            std::vector<std::size_t> ks = {1, 2, 4, std::min<std::size_t>(8, n - 1)};
            RetrievalReport rep = recall_at_k(emb, labels, ks);
            std::vector<double> want = oracle_recall(emb, labels, ks);
            for (std::size_t i = 0; i < ks.size(); ++i) REQUIRE(rep.recall_at[i] == want[i]);
            for (std::size_t i = 1; i < ks.size(); ++i) {
                REQUIRE(rep.recall_at[i] >= rep.recall_at[i - 1]);
            }
        }
    }
    SUBCASE("invariant under a shared isometry") {
        Rng rng(55);
        Tensor emb = random_embeddings(rng, 16, 2);
        std::vector<int> labels = random_labels(rng, 16, 3);
        Tensor moved = Tensor::zeros({16, 2});
        for (std::size_t i = 0; i < 16; ++i) {
            moved[i * 2 + 0] = -emb[i * 2 + 1] + 11.0;
            moved[i * 2 + 1] = emb[i * 2 + 0] - 4.0;
        }
        RetrievalReport a = recall_at_k(emb, labels, {1, 2, 4});
        RetrievalReport b = recall_at_k(moved, labels, {1, 2, 4});
        CHECK(a.recall_at == b.recall_at);
    }
}

TEST_CASE("embedding export") {
    fs::path path = fs::temp_directory_path() / "mdist_test_emb.bin";
    Rng rng(21);
    Tensor emb = random_embeddings(rng, 12, 5);
    std::vector<int> labels = random_labels(rng, 12, 3);

    SUBCASE("round-trip reproduces recall exactly") {
        export_embeddings(emb, labels, path.string());
        EmbeddingFile back = load_embeddings(path.string());
        CHECK(back.embeddings.data == emb.data);
        CHECK(back.labels == labels);
        RetrievalReport a = recall_at_k(emb, labels, {1, 2});
        RetrievalReport b = recall_at_k(back.embeddings, back.labels, {1, 2});
        CHECK(a.recall_at == b.recall_at);
    }
    SUBCASE("header matches the payload byte count") {
        export_embeddings(emb, labels, path.string());
        const std::size_t want = 4 + 4 + 8 + 8 + 12 * (4 + 5 * 8);
        CHECK(fs::file_size(path) == want);
    }
    SUBCASE("truncated file rejected with byte counts") {
        export_embeddings(emb, labels, path.string());
        fs::resize_file(path, fs::file_size(path) - 6);
        CHECK_THROWS_WITH_AS(load_embeddings(path.string()), doctest::Contains("expected"),
                             Error);
    }
    SUBCASE("empty split rejected") {
        Dataset ds;
        ds.samples = {Tensor::zeros({3}), Tensor::zeros({3})};
        ds.labels = {0, 0};
        EmbeddingNet net;  // unused; the empty index set fails first
        CHECK_THROWS_WITH_AS(export_embeddings(net, ds, {}, path.string()),
                             doctest::Contains("empty"), Error);
    }
    fs::remove(path);
}
