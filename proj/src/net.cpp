#include "mdist/net.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <fstream>
#include <sstream>

#include "mdist/rng.hpp"

namespace mdist {

namespace {

struct ShapeCursor {
    bool is_grid;
    std::size_t dim;      // vector width once flat
    std::size_t c, h, w;  // grid dims while convolutional
};

ShapeCursor cursor_for_input(const InputKind& in) {
    if (in.is_grid) {
        if (in.height == 0 || in.width == 0 || in.channels == 0) {
            throw Error("net config: grid input with zero dimension");
        }
        return {true, 0, in.channels, in.height, in.width};
    }
    if (in.dim == 0) throw Error("net config: vector input with zero dimension");
    return {false, in.dim, 0, 0, 0};
}

}  // namespace

std::vector<std::string> validate_net_config(const NetConfig& config) {
    if (config.layers.empty()) throw Error("net config: no layers");
    if (config.embedding_dim == 0) throw Error("net config: embedding_dim must be positive");

    ShapeCursor cur = cursor_for_input(config.input);
    std::vector<std::string> names;
    std::size_t n_affine = 0, n_conv = 0, n_gap = 0;

    for (std::size_t li = 0; li < config.layers.size(); ++li) {
        const LayerSpec& l = config.layers[li];
        switch (l.kind) {
            case LayerKind::Affine: {
                if (cur.is_grid) {
                    throw Error("net config: affine layer " + std::to_string(li + 1) +
                                " applied to grid activation; pool first");
                }
                if (l.out_dim == 0) throw Error("net config: affine with zero width");
                cur.dim = l.out_dim;
                names.push_back("affine" + std::to_string(++n_affine));
                break;
            }
            case LayerKind::Conv: {
                if (!cur.is_grid) {
                    throw Error("net config: conv layer " + std::to_string(li + 1) +
                                " applied to vector activation");
                }
                if (l.out_channels == 0) throw Error("net config: conv with zero channels");
                if (l.kernel % 2 == 0 || l.kernel == 0) {
                    throw Error("net config: conv kernel must be odd");
                }
                if (l.stride != 1 && l.stride != 2) {
                    throw Error("net config: conv stride must be 1 or 2");
                }
                std::size_t pad = l.kernel / 2;
                if (cur.h + 2 * pad < l.kernel || cur.w + 2 * pad < l.kernel) {
                    throw Error("net config: conv kernel larger than padded input");
                }
                cur.h = (cur.h + 2 * pad - l.kernel) / l.stride + 1;
                cur.w = (cur.w + 2 * pad - l.kernel) / l.stride + 1;
                cur.c = l.out_channels;
                names.push_back("conv" + std::to_string(++n_conv));
                break;
            }
            case LayerKind::GlobalAvgPool: {
                if (!cur.is_grid) {
                    throw Error("net config: global-average-pool on vector activation");
                }
                cur.is_grid = false;
                cur.dim = cur.c;
                names.push_back("gap" + std::to_string(++n_gap));
                break;
            }
        }
    }
    const LayerSpec& last = config.layers.back();
    if (last.kind != LayerKind::Affine || last.out_dim != config.embedding_dim) {
        throw Error("net config: final layer must be affine(" +
                    std::to_string(config.embedding_dim) + ") to match embedding_dim");
    }
    return names;
}

EmbeddingNet init_params(const NetConfig& config, std::uint64_t seed) {
    EmbeddingNet net;
    net.config = config;
    net.layer_names = validate_net_config(config);

    Rng rng(seed);
    ShapeCursor cur = cursor_for_input(config.input);
    for (std::size_t li = 0; li < config.layers.size(); ++li) {
        const LayerSpec& l = config.layers[li];
        const std::string& name = net.layer_names[li];
        if (l.kind == LayerKind::Affine) {
            std::size_t fan_in = cur.dim;
            double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Tensor w = Tensor::zeros({fan_in, l.out_dim});
            for (double& v : w.data) v = rng.uniform(-bound, bound);
            net.params[name + ".w"] = std::move(w);
            net.params[name + ".b"] = Tensor::zeros({l.out_dim});
            cur.dim = l.out_dim;
        } else if (l.kind == LayerKind::Conv) {
            std::size_t fan_in = cur.c * l.kernel * l.kernel;
            double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
            Tensor w = Tensor::zeros({l.out_channels, cur.c, l.kernel, l.kernel});
            for (double& v : w.data) v = rng.uniform(-bound, bound);
            net.params[name + ".w"] = std::move(w);
            net.params[name + ".b"] = Tensor::zeros({l.out_channels});
            std::size_t pad = l.kernel / 2;
            cur.h = (cur.h + 2 * pad - l.kernel) / l.stride + 1;
            cur.w = (cur.w + 2 * pad - l.kernel) / l.stride + 1;
            cur.c = l.out_channels;
        } else {
            cur.is_grid = false;
            cur.dim = cur.c;
        }
    }
    return net;
}

std::map<std::string, Tape::NodeId> register_params(const EmbeddingNet& net, Tape& tape) {
    std::map<std::string, Tape::NodeId> ids;
    for (const auto& [name, tensor] : net.params) ids[name] = tape.leaf(tensor);
    return ids;
}

TapeForward forward_on_tape(const EmbeddingNet& net, Tape& tape,
                            const std::map<std::string, Tape::NodeId>& params,
                            Tape::NodeId batch) {
    const Tensor& bv = tape.value(batch);
    const InputKind& in = net.config.input;
    if (in.is_grid) {
        if (bv.rank() != 4 || bv.shape[1] != in.channels || bv.shape[2] != in.height ||
            bv.shape[3] != in.width) {
            throw Error("embed: batch shape " + shape_str(bv.shape) + " does not match grid input " +
                        std::to_string(in.channels) + "x" + std::to_string(in.height) + "x" +
                        std::to_string(in.width));
        }
    } else {
        if (bv.rank() != 2 || bv.shape[1] != in.dim) {
            throw Error("embed: batch shape " + shape_str(bv.shape) +
                        " does not match vector input dim " + std::to_string(in.dim));
        }
    }
    const std::size_t B = bv.shape[0];

    auto param = [&](const std::string& key) -> Tape::NodeId {
        auto it = params.find(key);
        if (it == params.end()) throw Error("embed: missing parameter node for " + key);
        return it->second;
    };

    TapeForward out;
    Tape::NodeId cur = batch;
    for (std::size_t li = 0; li < net.config.layers.size(); ++li) {
        const LayerSpec& l = net.config.layers[li];
        const std::string& name = net.layer_names[li];
        const bool final_layer = li + 1 == net.config.layers.size();
        if (l.kind == LayerKind::Affine) {
            Tape::NodeId z = tape.matmul(cur, param(name + ".w"));
            z = tape.add(z, param(name + ".b"));
            cur = final_layer ? z : tape.relu(z);
        } else if (l.kind == LayerKind::Conv) {
            Tape::NodeId z = tape.conv2d(cur, param(name + ".w"), param(name + ".b"), l.stride);
            cur = tape.relu(z);
        } else {
            cur = tape.global_avg_pool(cur);
        }
        if (std::find(net.tap_names.begin(), net.tap_names.end(), name) != net.tap_names.end()) {
            out.taps.emplace_back(name, cur);
        }
    }
    if (net.config.l2_normalize) {
        Tape::NodeId norms = tape.l2norm(cur, 1, 1e-12);
        cur = tape.div(cur, tape.reshape(norms, {B, 1}));
    }
    out.embeddings = cur;
    return out;
}

Tensor embed(const EmbeddingNet& net, const Tensor& batch, std::vector<TapOutput>* taps) {
    for (const std::string& tap : net.tap_names) {
        if (std::find(net.layer_names.begin(), net.layer_names.end(), tap) ==
            net.layer_names.end()) {
            throw Error("embed: tap '" + tap + "' is not a layer name");
        }
    }
    Tape tape;
    auto ids = register_params(net, tape);
    TapeForward fw = forward_on_tape(net, tape, ids, tape.leaf(batch));
    if (taps) {
        taps->clear();
        for (const auto& [name, id] : fw.taps) taps->push_back({name, tape.value(id)});
    }
    return tape.value(fw.embeddings);
}

// ---------------------------------------------------------------------------
// config text

namespace {

std::vector<std::string> split(const std::string& s, char sep) {
    std::vector<std::string> out;
    std::string cur;
    for (char c : s) {
        if (c == sep) {
            out.push_back(cur);
            cur.clear();
        } else {
            cur.push_back(c);
        }
    }
    out.push_back(cur);
    return out;
}

std::size_t parse_size(const std::string& s, const std::string& what) {
    try {
        std::size_t pos = 0;
        long long v = std::stoll(s, &pos);
        if (pos != s.size() || v <= 0) throw std::invalid_argument(s);
        return static_cast<std::size_t>(v);
    } catch (const std::exception&) {
        throw Error("config text: bad " + what + " '" + s + "'");
    }
}

}  // namespace

std::string net_config_to_text(const NetConfig& config,
                               const std::vector<std::string>& tap_names) {
    std::ostringstream os;
    if (config.input.is_grid) {
        os << "input=grid:" << config.input.height << "x" << config.input.width << "x"
           << config.input.channels << "\n";
    } else {
        os << "input=vector:" << config.input.dim << "\n";
    }
    os << "layers=";
    for (std::size_t i = 0; i < config.layers.size(); ++i) {
        const LayerSpec& l = config.layers[i];
        if (i) os << ",";
        if (l.kind == LayerKind::Affine) {
            os << "affine:" << l.out_dim;
        } else if (l.kind == LayerKind::Conv) {
            os << "conv:" << l.out_channels << ":" << l.kernel << ":" << l.stride;
        } else {
            os << "gap";
        }
    }
    os << "\n";
    os << "embedding_dim=" << config.embedding_dim << "\n";
    os << "l2_normalize=" << (config.l2_normalize ? 1 : 0) << "\n";
    os << "taps=";
    for (std::size_t i = 0; i < tap_names.size(); ++i) {
        if (i) os << ",";
        os << tap_names[i];
    }
    os << "\n";
    return os.str();
}

namespace {

std::vector<LayerSpec> parse_layers_line(const std::string& text) {
    std::vector<LayerSpec> layers;
    for (const std::string& item : split(text, ',')) {
        if (item.empty()) continue;
        std::vector<std::string> parts = split(item, ':');
        if (parts[0] == "affine") {
            if (parts.size() != 2) throw Error("config text: affine wants one width, got '" + item + "'");
            layers.push_back(LayerSpec::affine(parse_size(parts[1], "affine width")));
        } else if (parts[0] == "conv") {
            if (parts.size() < 2 || parts.size() > 4) {
                throw Error("config text: conv wants channels[:kernel[:stride]], got '" + item + "'");
            }
            std::size_t oc = parse_size(parts[1], "conv channels");
            std::size_t k = parts.size() > 2 ? parse_size(parts[2], "conv kernel") : 3;
            std::size_t s = parts.size() > 3 ? parse_size(parts[3], "conv stride") : 1;
            layers.push_back(LayerSpec::conv(oc, k, s));
        } else if (parts[0] == "gap") {
            layers.push_back(LayerSpec::gap());
        } else {
            throw Error("config text: unknown layer kind '" + parts[0] + "'");
        }
    }
    return layers;
}

}  // namespace

std::pair<NetConfig, std::vector<std::string>> net_config_from_text(const std::string& text) {
    NetConfig config;
    std::vector<std::string> taps;
    bool saw_input = false, saw_layers = false, saw_dim = false;
    std::istringstream is(text);
    std::string line;
    while (std::getline(is, line)) {
        if (line.empty()) continue;
        std::size_t eq = line.find('=');
        if (eq == std::string::npos) throw Error("config text: bad line '" + line + "'");
        std::string key = line.substr(0, eq), val = line.substr(eq + 1);
        if (key == "input") {
            std::vector<std::string> parts = split(val, ':');
            if (parts.size() != 2) throw Error("config text: bad input '" + val + "'");
            if (parts[0] == "vector") {
                config.input = InputKind::vector(parse_size(parts[1], "input dim"));
            } else if (parts[0] == "grid") {
                std::vector<std::string> dims = split(parts[1], 'x');
                if (dims.size() != 3) throw Error("config text: grid wants HxWxC, got '" + val + "'");
                config.input = InputKind::grid(parse_size(dims[0], "grid height"),
                                               parse_size(dims[1], "grid width"),
                                               parse_size(dims[2], "grid channels"));
            } else {
                throw Error("config text: unknown input kind '" + parts[0] + "'");
            }
            saw_input = true;
        } else if (key == "layers") {
            config.layers = parse_layers_line(val);
            saw_layers = true;
        } else if (key == "embedding_dim") {
            config.embedding_dim = parse_size(val, "embedding_dim");
            saw_dim = true;
        } else if (key == "l2_normalize") {
            config.l2_normalize = val == "1" || val == "true";
        } else if (key == "taps") {
            for (const std::string& t : split(val, ',')) {
                if (!t.empty()) taps.push_back(t);
            }
        } else {
            throw Error("config text: unknown key '" + key + "'");
        }
    }
    if (!saw_input) throw Error("config text: missing key 'input'");
    if (!saw_layers) throw Error("config text: missing key 'layers'");
    if (!saw_dim) throw Error("config text: missing key 'embedding_dim'");
    return {config, taps};
}

// ---------------------------------------------------------------------------
// checkpoint io

namespace {

constexpr char kMagic[4] = {'M', 'D', 'C', 'K'};
constexpr std::uint32_t kVersion = 1;

void put_u32(std::string& out, std::uint32_t v) {
    for (int i = 0; i < 4; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_u64(std::string& out, std::uint64_t v) {
    for (int i = 0; i < 8; ++i) out.push_back(static_cast<char>((v >> (8 * i)) & 0xff));
}

void put_f64(std::string& out, double d) {
    std::uint64_t bits;
    std::memcpy(&bits, &d, 8);
    put_u64(out, bits);
}

class ByteReader {
public:
    ByteReader(const std::string& bytes, const std::string& path)
        : bytes_(bytes), path_(path) {}

    void need(std::size_t n, const std::string& what) {
        if (pos_ + n > bytes_.size()) {
            throw Error("checkpoint " + path_ + ": truncated while reading " + what +
                        " (expected " + std::to_string(n) + " bytes, got " +
                        std::to_string(bytes_.size() - pos_) + ")");
        }
    }

    std::uint32_t u32(const std::string& what) {
        need(4, what);
        std::uint32_t v = 0;
        for (int i = 0; i < 4; ++i) {
            v |= static_cast<std::uint32_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 4;
        return v;
    }

    std::uint64_t u64(const std::string& what) {
        need(8, what);
        std::uint64_t v = 0;
        for (int i = 0; i < 8; ++i) {
            v |= static_cast<std::uint64_t>(static_cast<unsigned char>(bytes_[pos_ + i])) << (8 * i);
        }
        pos_ += 8;
        return v;
    }

    double f64(const std::string& what) {
        std::uint64_t bits = u64(what);
        double d;
        std::memcpy(&d, &bits, 8);
        return d;
    }

    std::string str(std::size_t n, const std::string& what) {
        need(n, what);
        std::string s = bytes_.substr(pos_, n);
        pos_ += n;
        return s;
    }

    bool at_end() const { return pos_ == bytes_.size(); }
    std::size_t pos() const { return pos_; }

private:
    const std::string& bytes_;
    std::string path_;
    std::size_t pos_ = 0;
};

}  // namespace

void save_checkpoint(const EmbeddingNet& net, const std::string& path) {
    std::string out;
    out.append(kMagic, 4);
    put_u32(out, kVersion);
    std::string cfg = net_config_to_text(net.config, net.tap_names);
    put_u32(out, static_cast<std::uint32_t>(cfg.size()));
    out += cfg;
    for (const auto& [name, tensor] : net.params) {
        put_u32(out, static_cast<std::uint32_t>(name.size()));
        out += name;
        put_u32(out, static_cast<std::uint32_t>(tensor.rank()));
        for (std::size_t d : tensor.shape) put_u64(out, d);
        for (double v : tensor.data) put_f64(out, v);
    }
    std::ofstream f(path, std::ios::binary | std::ios::trunc);
    if (!f) throw Error("checkpoint " + path + ": cannot open for writing");
    f.write(out.data(), static_cast<std::streamsize>(out.size()));
    if (!f) throw Error("checkpoint " + path + ": write failed");
}

EmbeddingNet load_checkpoint(const std::string& path) {
    std::ifstream f(path, std::ios::binary);
    if (!f) throw Error("checkpoint " + path + ": cannot open");
    std::ostringstream buf;
    buf << f.rdbuf();
    std::string bytes = buf.str();

    ByteReader r(bytes, path);
    std::string magic = r.str(4, "magic");
    if (std::memcmp(magic.data(), kMagic, 4) != 0) {
        throw Error("checkpoint " + path + ": bad magic (not a checkpoint file)");
    }
    std::uint32_t version = r.u32("version");
    if (version != kVersion) {
        throw Error("checkpoint " + path + ": unsupported version " + std::to_string(version) +
                    " (expected " + std::to_string(kVersion) + ")");
    }
    std::uint32_t cfg_len = r.u32("config length");
    std::string cfg_text = r.str(cfg_len, "config text");
    auto [config, taps] = net_config_from_text(cfg_text);

    EmbeddingNet net;
    net.config = config;
    net.tap_names = taps;
    net.layer_names = validate_net_config(config);
    for (const std::string& tap : taps) {
        if (std::find(net.layer_names.begin(), net.layer_names.end(), tap) ==
            net.layer_names.end()) {
            throw Error("checkpoint " + path + ": tap '" + tap + "' is not a layer name");
        }
    }

    while (!r.at_end()) {
        std::uint32_t name_len = r.u32("parameter name length");
        std::string name = r.str(name_len, "parameter name");
        std::uint32_t rank = r.u32("rank of " + name);
        Shape shape(rank);
        std::size_t numel = 1;
        for (std::uint32_t i = 0; i < rank; ++i) {
            shape[i] = static_cast<std::size_t>(r.u64("shape of " + name));
            numel *= shape[i];
        }
        r.need(numel * 8, "payload of " + name);
        std::vector<double> data(numel);
        for (std::size_t i = 0; i < numel; ++i) data[i] = r.f64("payload of " + name);
        if (net.params.count(name)) {
            throw Error("checkpoint " + path + ": duplicate parameter '" + name + "'");
        }
        net.params[name] = Tensor(std::move(shape), std::move(data));
    }

    // cross-check the parameter set against the config by re-deriving shapes
    EmbeddingNet expect = init_params(config, 0);
    for (const auto& [name, tensor] : expect.params) {
        auto it = net.params.find(name);
        if (it == net.params.end()) {
            throw Error("checkpoint " + path + ": missing parameter '" + name + "'");
        }
        if (it->second.shape != tensor.shape) {
            throw Error("checkpoint " + path + ": parameter '" + name + "' has shape " +
                        shape_str(it->second.shape) + ", config wants " + shape_str(tensor.shape));
        }
    }
    for (const auto& [name, tensor] : net.params) {
        if (!expect.params.count(name)) {
            throw Error("checkpoint " + path + ": unexpected parameter '" + name + "'");
        }
    }
    return net;
}

}  // namespace mdist
