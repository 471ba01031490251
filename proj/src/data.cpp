#include "mdist/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <set>
#include <sstream>

#include "mdist/rng.hpp"

namespace mdist {

void validate_dataset(const Dataset& ds) {
    if (ds.samples.size() != ds.labels.size()) {
        throw Error("dataset " + ds.name + ": " + std::to_string(ds.samples.size()) +
                    " samples vs " + std::to_string(ds.labels.size()) + " labels");
    }
    if (ds.samples.empty()) throw Error("dataset " + ds.name + ": empty");
    std::map<int, std::size_t> counts;
    for (int l : ds.labels) counts[l]++;
    for (const auto& [label, count] : counts) {
        if (count < 2) {
            throw Error("dataset " + ds.name + ": class " + std::to_string(label) + " has " +
                        std::to_string(count) + " sample(s); retrieval needs >= 2");
        }
    }
    if (ds.has_split()) {
        std::set<int> train(ds.train_classes.begin(), ds.train_classes.end());
        std::set<int> test(ds.test_classes.begin(), ds.test_classes.end());
        for (int c : train) {
            if (test.count(c)) {
                throw Error("dataset " + ds.name + ": class " + std::to_string(c) +
                            " in both train and test splits");
            }
        }
        for (const auto& [label, count] : counts) {
            if (!train.count(label) && !test.count(label)) {
                throw Error("dataset " + ds.name + ": class " + std::to_string(label) +
                            " missing from the split");
            }
        }
    }
}

void validate_degradation(const DegradationSpec& spec) {
    switch (spec.kind) {
        case DegradationSpec::Kind::LowRes:
            if (spec.factor < 2) throw Error("degradation: lowres factor must be >= 2");
            break;
        case DegradationSpec::Kind::Noise:
            if (!(spec.sigma > 0.0)) throw Error("degradation: noise sigma must be > 0");
            break;
        case DegradationSpec::Kind::Mask:
            if (!(spec.fraction > 0.0 && spec.fraction < 1.0)) {
                throw Error("degradation: mask fraction must be in (0,1)");
            }
            break;
    }
}

Dataset gen_synthetic_clusters(std::size_t num_classes, std::size_t per_class,
                               std::size_t input_dim, double intra_std, double inter_scale,
                               std::uint64_t seed) {
    if (num_classes < 4) {
        throw Error("gen_synthetic_clusters: need >= 4 classes for a usable half split, got " +
                    std::to_string(num_classes));
    }
    if (per_class < 2) {
        throw Error("gen_synthetic_clusters: need >= 2 samples per class, got " +
                    std::to_string(per_class));
    }
    if (input_dim == 0) throw Error("gen_synthetic_clusters: input_dim must be positive");
    if (intra_std < 0.0 || inter_scale <= 0.0) {
        throw Error("gen_synthetic_clusters: intra_std must be >= 0 and inter_scale > 0");
    }

    Rng rng(seed);
    std::vector<Tensor> prototypes;
    prototypes.reserve(num_classes);
    for (std::size_t c = 0; c < num_classes; ++c) {
        Tensor p = Tensor::zeros({input_dim});
        for (double& v : p.data) v = rng.uniform(-inter_scale, inter_scale);
        prototypes.push_back(std::move(p));
    }

    Dataset ds;
    ds.name = "synthetic";
    for (std::size_t c = 0; c < num_classes; ++c) {
        for (std::size_t s = 0; s < per_class; ++s) {
            Tensor x = prototypes[c];
            for (double& v : x.data) v += intra_std * rng.gaussian();
            ds.samples.push_back(std::move(x));
            ds.labels.push_back(static_cast<int>(c));
        }
    }
    validate_dataset(ds);
    return ds;
}

void split_classes_half(Dataset& ds, std::uint64_t seed) {
    std::set<int> class_set(ds.labels.begin(), ds.labels.end());
    if (class_set.size() < 2) {
        throw Error("split_classes_half: need >= 2 classes, got " +
                    std::to_string(class_set.size()));
    }
    std::vector<int> classes(class_set.begin(), class_set.end());  // sorted by id
    std::size_t n_train = (classes.size() + 1) / 2;                // odd count: extra in train

    ds.train_classes.assign(classes.begin(), classes.begin() + static_cast<long>(n_train));
    ds.test_classes.assign(classes.begin() + static_cast<long>(n_train), classes.end());
    ds.train_indices.clear();
    ds.val_indices.clear();
    ds.test_indices.clear();

    std::set<int> train_set(ds.train_classes.begin(), ds.train_classes.end());
    std::map<int, std::vector<std::size_t>> by_class;
    for (std::size_t i = 0; i < ds.size(); ++i) by_class[ds.labels[i]].push_back(i);

    Rng rng(seed);
    for (int c : classes) {
        std::vector<std::size_t>& idx = by_class[c];
        if (train_set.count(c)) {
            std::vector<std::size_t> order = idx;
            rng.shuffle(order);
            std::size_t n_val = order.size() / 5;  // 80/20
            for (std::size_t k = 0; k < order.size(); ++k) {
                if (k < n_val) ds.val_indices.push_back(order[k]);
                else ds.train_indices.push_back(order[k]);
            }
        } else {
            for (std::size_t i : idx) ds.test_indices.push_back(i);
        }
    }
    std::sort(ds.train_indices.begin(), ds.train_indices.end());
    std::sort(ds.val_indices.begin(), ds.val_indices.end());
    std::sort(ds.test_indices.begin(), ds.test_indices.end());
    validate_dataset(ds);
}

namespace {

Tensor degrade_lowres(const Tensor& sample, std::size_t factor) {
    Shape s = sample.shape;
    std::size_t C, H, W;
    if (s.size() == 2) {
        C = 1;
        H = s[0];
        W = s[1];
    } else if (s.size() == 3) {
        C = s[0];
        H = s[1];
        W = s[2];
    } else {
        throw Error("degrade: lowres needs a grid sample (HxW or CxHxW), got shape " +
                    shape_str(s));
    }
    if (H % factor != 0 || W % factor != 0) {
        throw Error("degrade: lowres factor " + std::to_string(factor) +
                    " does not divide grid " + std::to_string(H) + "x" + std::to_string(W));
    }
    Tensor out = Tensor::zeros(s);
    const std::size_t BH = H / factor, BW = W / factor;
    for (std::size_t c = 0; c < C; ++c) {
        for (std::size_t bh = 0; bh < BH; ++bh) {
            for (std::size_t bw = 0; bw < BW; ++bw) {
                double acc = 0.0;
                for (std::size_t i = 0; i < factor; ++i) {
                    for (std::size_t j = 0; j < factor; ++j) {
                        acc += sample[(c * H + bh * factor + i) * W + bw * factor + j];
                    }
                }
                const double mean = acc / static_cast<double>(factor * factor);
                for (std::size_t i = 0; i < factor; ++i) {
                    for (std::size_t j = 0; j < factor; ++j) {
                        out[(c * H + bh * factor + i) * W + bw * factor + j] = mean;
                    }
                }
            }
        }
    }
    return out;
}

}  // namespace

Tensor degrade(const Tensor& sample, const DegradationSpec& spec, std::uint64_t seed) {
    validate_degradation(spec);
    switch (spec.kind) {
        case DegradationSpec::Kind::LowRes:
            return degrade_lowres(sample, spec.factor);
        case DegradationSpec::Kind::Noise: {
            Rng rng(seed);
            Tensor out = sample;
            for (double& v : out.data) v += spec.sigma * rng.gaussian();
            return out;
        }
        case DegradationSpec::Kind::Mask: {
            Rng rng(seed);
            const std::size_t n = sample.numel();
            const std::size_t count =
                static_cast<std::size_t>(std::llround(spec.fraction * static_cast<double>(n)));
            std::vector<std::size_t> coords(n);
            for (std::size_t i = 0; i < n; ++i) coords[i] = i;
            rng.shuffle(coords);
            Tensor out = sample;
            for (std::size_t i = 0; i < count; ++i) out[coords[i]] = 0.0;
            return out;
        }
    }
    throw Error("degrade: unknown kind");
}

Dataset load_csv_dataset(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw Error("csv " + path + ": cannot open");
    Dataset ds;
    ds.name = path;
    std::string line;
    std::size_t lineno = 0;
    std::size_t feature_count = 0;
    while (std::getline(f, line)) {
        ++lineno;
        if (line.empty() || line[0] == '#') continue;
        std::vector<std::string> fields;
        std::string cur;
        for (char c : line) {
            if (c == ',') {
                fields.push_back(cur);
                cur.clear();
            } else if (c != '\r') {
                cur.push_back(c);
            }
        }
        fields.push_back(cur);
        if (fields.size() < 2) {
            throw Error("csv " + path + ": line " + std::to_string(lineno) +
                        ": need a label and at least one feature");
        }
        char* end = nullptr;
        long label = std::strtol(fields[0].c_str(), &end, 10);
        if (end == fields[0].c_str() || *end != '\0') {
            throw Error("csv " + path + ": line " + std::to_string(lineno) +
                        ": non-integer label '" + fields[0] + "'");
        }
        std::vector<double> feats;
        feats.reserve(fields.size() - 1);
        for (std::size_t i = 1; i < fields.size(); ++i) {
            end = nullptr;
            double v = std::strtod(fields[i].c_str(), &end);
            if (end == fields[i].c_str() || *end != '\0') {
                throw Error("csv " + path + ": line " + std::to_string(lineno) +
                            ": non-numeric field '" + fields[i] + "'");
            }
            feats.push_back(v);
        }
        if (feature_count == 0) {
            feature_count = feats.size();
        } else if (feats.size() != feature_count) {
            throw Error("csv " + path + ": line " + std::to_string(lineno) + ": ragged row (" +
                        std::to_string(feats.size()) + " features, expected " +
                        std::to_string(feature_count) + ")");
        }
        const std::size_t n_feats = feats.size();
        ds.samples.push_back(Tensor({n_feats}, std::move(feats)));
        ds.labels.push_back(static_cast<int>(label));
    }
    validate_dataset(ds);
    return ds;
}

void save_csv_dataset(const Dataset& ds, const std::string& path) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("csv " + path + ": cannot open for writing");
    f << "# label,features... (" << ds.size() << " samples)\n";
    char buf[64];
    for (std::size_t i = 0; i < ds.size(); ++i) {
        f << ds.labels[i];
        for (double v : ds.samples[i].data) {
            std::snprintf(buf, sizeof buf, "%.17g", v);
            f << ',' << buf;
        }
        f << '\n';
    }
    if (!f) throw Error("csv " + path + ": write failed");
}

Dataset as_grid(const Dataset& ds, std::size_t channels, std::size_t height, std::size_t width) {
    Dataset out = ds;
    for (Tensor& s : out.samples) {
        if (s.numel() != channels * height * width) {
            throw Error("as_grid: sample with " + std::to_string(s.numel()) +
                        " values cannot view as " + std::to_string(channels) + "x" +
                        std::to_string(height) + "x" + std::to_string(width));
        }
        s.shape = {channels, height, width};
    }
    out.name = ds.name + "_grid";
    return out;
}

}  // namespace mdist
