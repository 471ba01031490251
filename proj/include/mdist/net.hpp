#pragma once

#include <cstdint>
#include <map>
#include <optional>
#include <string>
#include <utility>
#include <vector>

#include "mdist/tape.hpp"

namespace mdist {

enum class LayerKind { Affine, Conv, GlobalAvgPool };

struct LayerSpec {
    LayerKind kind = LayerKind::Affine;
    std::size_t out_dim = 0;       // Affine
    std::size_t out_channels = 0;  // Conv
    std::size_t kernel = 3;        // Conv
    std::size_t stride = 1;        // Conv (1 or 2)

    static LayerSpec affine(std::size_t out_dim) { return {LayerKind::Affine, out_dim, 0, 0, 0}; }
    static LayerSpec conv(std::size_t oc, std::size_t kernel = 3, std::size_t stride = 1) {
        return {LayerKind::Conv, 0, oc, kernel, stride};
    }
    static LayerSpec gap() { return {LayerKind::GlobalAvgPool, 0, 0, 0, 0}; }
};

struct InputKind {
    bool is_grid = false;
    std::size_t dim = 0;                           // vector input
    std::size_t height = 0, width = 0, channels = 0;  // grid input

    static InputKind vector(std::size_t dim) { return {false, dim, 0, 0, 0}; }
    static InputKind grid(std::size_t h, std::size_t w, std::size_t c) {
        return {true, 0, h, w, c};
    }
};

struct NetConfig {
    InputKind input;
    std::vector<LayerSpec> layers;  // final layer must be affine(embedding_dim)
    std::size_t embedding_dim = 512;
    bool l2_normalize = false;  // off by default; Frobenius distances are meaningful unnormalized
};

// Validates a config and returns the generated layer names ("affine1",
// "conv2", "gap1", ...), in layer order. Throws on inconsistent chains.
std::vector<std::string> validate_net_config(const NetConfig& config);

struct TapOutput {
    std::string name;
    Tensor activation;  // batched: B x D or B x C x H x W
};

struct EmbeddingNet {
    NetConfig config;
    std::map<std::string, Tensor> params;  // "affine1.w", "affine1.b", "conv1.w", ...
    std::vector<std::string> tap_names;
    std::vector<std::string> layer_names;  // derived from config, same order as layers
};

// Deterministic initialization: affine/conv weights uniform in
// (-1/sqrt(fan_in), 1/sqrt(fan_in)), biases zero.
EmbeddingNet init_params(const NetConfig& config, std::uint64_t seed);

struct TapeForward {
    Tape::NodeId embeddings;
    std::vector<std::pair<std::string, Tape::NodeId>> taps;
};

// Registers every parameter as a leaf on the tape. Iteration order is the
// param map order (lexicographic by name), so tapes are reproducible.
std::map<std::string, Tape::NodeId> register_params(const EmbeddingNet& net, Tape& tape);

// Forward pass recorded on a tape; differentiable w.r.t. the registered
// parameter leaves. `batch` is B x dim for vector inputs, B x C x H x W for
// grid inputs.
TapeForward forward_on_tape(const EmbeddingNet& net, Tape& tape,
                            const std::map<std::string, Tape::NodeId>& params,
                            Tape::NodeId batch);

// Convenience forward pass without gradient bookkeeping exposed to the
// caller. Returns B x D embeddings; fills `taps` when non-null.
Tensor embed(const EmbeddingNet& net, const Tensor& batch,
             std::vector<TapOutput>* taps = nullptr);

// Checkpoint persistence. Binary format: magic "MDCK", u32 version,
// u32-length-prefixed config text (key=value lines), then per parameter:
// u32 name length, name bytes, u32 rank, u64 dims, raw little-endian f64
// payload. Parameters are ordered by name.
void save_checkpoint(const EmbeddingNet& net, const std::string& path);
EmbeddingNet load_checkpoint(const std::string& path);

// Config text (de)serialization used inside checkpoints and snapshots.
std::string net_config_to_text(const NetConfig& config, const std::vector<std::string>& tap_names);
std::pair<NetConfig, std::vector<std::string>> net_config_from_text(const std::string& text);

}  // namespace mdist
