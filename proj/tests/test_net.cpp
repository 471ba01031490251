#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>

#include "mdist/net.hpp"
#include "mdist/rng.hpp"

using namespace mdist;
namespace fs = std::filesystem;

namespace {

NetConfig small_vector_config() {
    NetConfig cfg;
    cfg.input = InputKind::vector(8);
    cfg.layers = {LayerSpec::affine(6), LayerSpec::affine(4)};
    cfg.embedding_dim = 4;
    return cfg;
}

fs::path temp_path(const char* name) {
    return fs::temp_directory_path() / name;
}

}  // namespace

TEST_CASE("config validation") {
    NetConfig cfg = small_vector_config();
    CHECK(validate_net_config(cfg) == std::vector<std::string>{"affine1", "affine2"});

    SUBCASE("final layer must hit embedding_dim") {
        cfg.layers.back() = LayerSpec::affine(5);
        CHECK_THROWS_WITH_AS(validate_net_config(cfg), doctest::Contains("embedding_dim"), Error);
    }
    SUBCASE("conv on vector input rejected") {
        cfg.layers.insert(cfg.layers.begin(), LayerSpec::conv(4));
        CHECK_THROWS_AS(validate_net_config(cfg), Error);
    }
    SUBCASE("grid chain with conv, gap, affine") {
        NetConfig g;
        g.input = InputKind::grid(8, 8, 2);
        g.layers = {LayerSpec::conv(4, 3, 2), LayerSpec::gap(), LayerSpec::affine(5)};
        g.embedding_dim = 5;
        CHECK(validate_net_config(g) == std::vector<std::string>{"conv1", "gap1", "affine1"});
    }
    SUBCASE("affine before pooling rejected on grids") {
        NetConfig g;
        g.input = InputKind::grid(8, 8, 2);
        g.layers = {LayerSpec::affine(5)};
        g.embedding_dim = 5;
        CHECK_THROWS_AS(validate_net_config(g), Error);
    }
}

TEST_CASE("init_params") {
    NetConfig cfg = small_vector_config();
    SUBCASE("deterministic given seed") {
        EmbeddingNet a = init_params(cfg, 99), b = init_params(cfg, 99);
        CHECK(a.params.at("affine1.w").data == b.params.at("affine1.w").data);
        EmbeddingNet c = init_params(cfg, 100);
        CHECK(a.params.at("affine1.w").data != c.params.at("affine1.w").data);
    }
    SUBCASE("affine(4) from input dim 8 gives 8x4 weight and 4 bias") {
        NetConfig one;
        one.input = InputKind::vector(8);
        one.layers = {LayerSpec::affine(4)};
        one.embedding_dim = 4;
        EmbeddingNet net = init_params(one, 1);
        CHECK(net.params.at("affine1.w").shape == Shape{8, 4});
        CHECK(net.params.at("affine1.b").shape == Shape{4});
        for (double v : net.params.at("affine1.b").data) CHECK(v == 0.0);
    }
    SUBCASE("weights are zero-mean uniform scaled by fan-in") {
        NetConfig wide;
        wide.input = InputKind::vector(100);
        wide.layers = {LayerSpec::affine(100)};
        wide.embedding_dim = 100;
        EmbeddingNet net = init_params(wide, 5);  // 10k draws
        const Tensor& w = net.params.at("affine1.w");
        double mean = 0.0, bound = 1.0 / std::sqrt(100.0);
        for (double v : w.data) {
            mean += v;
            CHECK(std::fabs(v) <= bound);
        }
        mean /= static_cast<double>(w.numel());
        CHECK(std::fabs(mean) < 0.01);
    }
}

TEST_CASE("embed") {
    NetConfig cfg = small_vector_config();
    EmbeddingNet net = init_params(cfg, 7);

    SUBCASE("batch through the net has B x D shape") {
        Tensor batch = Tensor::full({32, 8}, 0.3);
        Tensor emb = embed(net, batch);
        CHECK(emb.shape == Shape{32, 4});
    }
    SUBCASE("zero input through zero-bias net gives zero embedding") {
        Tensor emb = embed(net, Tensor::zeros({3, 8}));
        for (double v : emb.data) CHECK(v == 0.0);
    }
    SUBCASE("identical inputs give identical rows") {
        Tensor batch = Tensor::zeros({2, 8});
        for (std::size_t j = 0; j < 8; ++j) {
            batch[j] = 0.1 * static_cast<double>(j) - 0.3;
            batch[8 + j] = batch[j];
        }
        Tensor emb = embed(net, batch);
        for (std::size_t j = 0; j < 4; ++j) CHECK(emb[j] == emb[4 + j]);
    }
    SUBCASE("pure function of params and batch") {
        Rng rng(4);
        Tensor batch = Tensor::zeros({5, 8});
        for (double& v : batch.data) v = rng.uniform(-1, 1);
        CHECK(embed(net, batch).data == embed(net, batch).data);
    }
    SUBCASE("shape mismatch rejected") {
        CHECK_THROWS_AS(embed(net, Tensor::zeros({3, 9})), Error);
        CHECK_THROWS_AS(embed(net, Tensor::zeros({8})), Error);
    }
    SUBCASE("l2-normalized rows when enabled") {
        NetConfig n = cfg;
        n.l2_normalize = true;
        EmbeddingNet net2 = init_params(n, 7);
        Rng rng(12);
        Tensor batch = Tensor::zeros({4, 8});
        for (double& v : batch.data) v = rng.uniform(0.5, 1.5);
        Tensor emb = embed(net2, batch);
        for (std::size_t i = 0; i < 4; ++i) {
            double norm = 0.0;
            for (std::size_t j = 0; j < 4; ++j) norm += emb[i * 4 + j] * emb[i * 4 + j];
            CHECK(std::sqrt(norm) == doctest::Approx(1.0).epsilon(1e-6));
        }
    }
}

TEST_CASE("taps match an independent truncated forward pass") {
    NetConfig cfg = small_vector_config();
    EmbeddingNet net = init_params(cfg, 21);
    net.tap_names = {"affine1"};

    Rng rng(3);
    Tensor batch = Tensor::zeros({3, 8});
    for (double& v : batch.data) v = rng.uniform(-1, 1);

    std::vector<TapOutput> taps;
    embed(net, batch, &taps);
    REQUIRE(taps.size() == 1);
    CHECK(taps[0].name == "affine1");
    CHECK(taps[0].activation.shape == Shape{3, 6});

    // independent recomputation: affine1 + relu by hand
    const Tensor& w = net.params.at("affine1.w");
    const Tensor& b = net.params.at("affine1.b");
    for (std::size_t i = 0; i < 3; ++i) {
        for (std::size_t j = 0; j < 6; ++j) {
            double acc = b[j];
            for (std::size_t k = 0; k < 8; ++k) acc += batch[i * 8 + k] * w[k * 6 + j];
            double expected = acc > 0.0 ? acc : 0.0;
            CHECK(taps[0].activation[i * 6 + j] == doctest::Approx(expected).epsilon(1e-12));
        }
    }

    SUBCASE("unknown tap name rejected") {
        net.tap_names = {"affine9"};
        CHECK_THROWS_WITH_AS(embed(net, batch), doctest::Contains("affine9"), Error);
    }
}

TEST_CASE("grid nets produce feature-map taps") {
    NetConfig cfg;
    cfg.input = InputKind::grid(6, 6, 1);
    cfg.layers = {LayerSpec::conv(3, 3, 1), LayerSpec::conv(4, 3, 2), LayerSpec::gap(),
                  LayerSpec::affine(5)};
    cfg.embedding_dim = 5;
    EmbeddingNet net = init_params(cfg, 8);
    net.tap_names = {"conv2"};

    Rng rng(5);
    Tensor batch = Tensor::zeros({2, 1, 6, 6});
    for (double& v : batch.data) v = rng.uniform(-1, 1);
    std::vector<TapOutput> taps;
    Tensor emb = embed(net, batch, &taps);
    CHECK(emb.shape == Shape{2, 5});
    REQUIRE(taps.size() == 1);
    CHECK(taps[0].activation.shape == Shape{2, 4, 3, 3});  // stride 2: 6 -> 3
    for (double v : taps[0].activation.data) CHECK(v >= 0.0);  // post-relu
}

TEST_CASE("checkpoint round-trip") {
    NetConfig cfg = small_vector_config();
    cfg.l2_normalize = true;
    EmbeddingNet net = init_params(cfg, 77);
    net.tap_names = {"affine1"};
    fs::path path = temp_path("mdist_test_ckpt.bin");
    save_checkpoint(net, path.string());

    EmbeddingNet loaded = load_checkpoint(path.string());
    CHECK(loaded.params.size() == net.params.size());
    for (const auto& [name, tensor] : net.params) {
        CHECK(loaded.params.at(name).data == tensor.data);
        CHECK(loaded.params.at(name).shape == tensor.shape);
    }
    CHECK(loaded.tap_names == net.tap_names);
    CHECK(loaded.config.l2_normalize);
    CHECK(loaded.config.embedding_dim == 4);

    Rng rng(9);
    Tensor batch = Tensor::zeros({4, 8});
    for (double& v : batch.data) v = rng.uniform(-1, 1);
    CHECK(embed(net, batch).data == embed(loaded, batch).data);
    fs::remove(path);
}

TEST_CASE("checkpoint corruption diagnostics") {
    NetConfig cfg = small_vector_config();
    EmbeddingNet net = init_params(cfg, 1);
    fs::path path = temp_path("mdist_test_ckpt2.bin");
    save_checkpoint(net, path.string());

    auto read_all = [&]() {
        std::ifstream f(path, std::ios::binary);
        std::string bytes((std::istreambuf_iterator<char>(f)), std::istreambuf_iterator<char>());
        return bytes;
    };
    auto write_all = [&](const std::string& bytes) {
        std::ofstream f(path, std::ios::binary | std::ios::trunc);
        f.write(bytes.data(), static_cast<std::streamsize>(bytes.size()));
    };
    std::string good = read_all();

    SUBCASE("truncated payload names expected vs actual byte count") {
        write_all(good.substr(0, good.size() - 10));
        CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("expected"),
                             Error);
    }
    SUBCASE("bad magic rejected") {
        std::string bad = good;
        bad[0] = 'X';
        write_all(bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("magic"), Error);
    }
    SUBCASE("unsupported version rejected") {
        std::string bad = good;
        bad[4] = 9;
        write_all(bad);
        CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("version"), Error);
    }
    SUBCASE("missing parameter rejected by name") {
        EmbeddingNet partial = net;
        partial.params.erase("affine2.b");
        save_checkpoint(partial, path.string());
        CHECK_THROWS_WITH_AS(load_checkpoint(path.string()), doctest::Contains("affine2.b"),
                             Error);
    }
    fs::remove(path);
}
