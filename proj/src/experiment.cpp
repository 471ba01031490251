#include "mdist/experiment.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <map>
#include <sstream>

namespace mdist {

namespace {

std::string trim(const std::string& s) {
    std::size_t a = s.find_first_not_of(" \t\r");
    if (a == std::string::npos) return "";
    std::size_t b = s.find_last_not_of(" \t\r");
    return s.substr(a, b - a + 1);
}

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

// section -> key -> value, with strict duplicate detection
using Sections = std::map<std::string, std::map<std::string, std::string>>;

Sections parse_sections(const std::string& text) {
    Sections out;
    std::istringstream is(text);
    std::string line, section;
    std::size_t lineno = 0;
    while (std::getline(is, line)) {
        ++lineno;
        std::string t = trim(line);
        if (t.empty() || t[0] == '#' || t[0] == ';') continue;
        if (t.front() == '[') {
            if (t.back() != ']') {
                throw ConfigError("config line " + std::to_string(lineno) + ": bad section '" +
                                  t + "'");
            }
            section = trim(t.substr(1, t.size() - 2));
            if (section.empty()) {
                throw ConfigError("config line " + std::to_string(lineno) + ": empty section name");
            }
            out[section];
            continue;
        }
        std::size_t eq = t.find('=');
        if (eq == std::string::npos) {
            throw ConfigError("config line " + std::to_string(lineno) + ": expected key=value, got '" +
                              t + "'");
        }
        if (section.empty()) {
            throw ConfigError("config line " + std::to_string(lineno) +
                              ": key outside any [section]");
        }
        std::string key = trim(t.substr(0, eq)), val = trim(t.substr(eq + 1));
        if (key.empty()) {
            throw ConfigError("config line " + std::to_string(lineno) + ": empty key");
        }
        if (out[section].count(key)) {
            throw ConfigError("config: duplicate key '" + section + "." + key + "'");
        }
        out[section][key] = val;
    }
    return out;
}

// Typed readers; every error names the field.
struct SectionReader {
    const std::string section;
    std::map<std::string, std::string> kv;

    bool has(const std::string& key) const { return kv.count(key) > 0; }

    std::string take(const std::string& key) {
        auto it = kv.find(key);
        if (it == kv.end()) {
            throw ConfigError("config: missing field '" + section + "." + key + "'");
        }
        std::string v = it->second;
        kv.erase(it);
        return v;
    }

    std::string take_or(const std::string& key, const std::string& dflt) {
        return has(key) ? take(key) : dflt;
    }

    std::size_t take_size(const std::string& key, std::size_t dflt) {
        if (!has(key)) return dflt;
        return to_size(key, take(key));
    }

    std::uint64_t take_u64(const std::string& key, std::uint64_t dflt) {
        if (!has(key)) return dflt;
        std::string v = take(key);
        try {
            std::size_t pos = 0;
            unsigned long long x = std::stoull(v, &pos);
            if (pos != v.size()) throw std::invalid_argument(v);
            return x;
        } catch (const std::exception&) {
            throw ConfigError("config: field '" + section + "." + key + "' wants an integer, got '" +
                              v + "'");
        }
    }

    double take_double(const std::string& key, double dflt) {
        if (!has(key)) return dflt;
        std::string v = take(key);
        char* end = nullptr;
        double x = std::strtod(v.c_str(), &end);
        if (end == v.c_str() || *end != '\0') {
            throw ConfigError("config: field '" + section + "." + key + "' wants a number, got '" +
                              v + "'");
        }
        return x;
    }

    bool take_bool(const std::string& key, bool dflt) {
        if (!has(key)) return dflt;
        std::string v = take(key);
        if (v == "true" || v == "1" || v == "yes") return true;
        if (v == "false" || v == "0" || v == "no") return false;
        throw ConfigError("config: field '" + section + "." + key + "' wants true/false, got '" +
                          v + "'");
    }

    std::size_t to_size(const std::string& key, const std::string& v) const {
        try {
            std::size_t pos = 0;
            long long x = std::stoll(v, &pos);
            if (pos != v.size() || x < 0) throw std::invalid_argument(v);
            return static_cast<std::size_t>(x);
        } catch (const std::exception&) {
            throw ConfigError("config: field '" + section + "." + key +
                              "' wants a non-negative integer, got '" + v + "'");
        }
    }

    void done() const {
        if (!kv.empty()) {
            throw ConfigError("config: unknown field '" + section + "." + kv.begin()->first + "'");
        }
    }
};

NetSection parse_net_section(SectionReader& r) {
    NetSection out;
    out.present = true;
    out.layers = parse_layers_text(r.take("layers"));
    out.embedding_dim = r.take_size("embedding_dim", 512);
    out.l2_normalize = r.take_bool("l2_normalize", false);
    r.done();
    return out;
}

std::string fmt_double(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::vector<LayerSpec> parse_layers_text(const std::string& text) {
    std::vector<LayerSpec> layers;
    for (const std::string& raw : split(text, ',')) {
        std::string item = trim(raw);
        if (item.empty()) continue;
        std::vector<std::string> parts = split(item, ':');
        auto num = [&](const std::string& s) -> std::size_t {
            try {
                std::size_t pos = 0;
                long long v = std::stoll(s, &pos);
                if (pos != s.size() || v <= 0) throw std::invalid_argument(s);
                return static_cast<std::size_t>(v);
            } catch (const std::exception&) {
                throw ConfigError("config: bad layer parameter '" + s + "' in '" + item + "'");
            }
        };
        if (parts[0] == "affine") {
            if (parts.size() != 2) {
                throw ConfigError("config: layer 'affine' wants one width, got '" + item + "'");
            }
            layers.push_back(LayerSpec::affine(num(parts[1])));
        } else if (parts[0] == "conv") {
            if (parts.size() < 2 || parts.size() > 4) {
                throw ConfigError("config: layer 'conv' wants channels[:kernel[:stride]], got '" +
                                  item + "'");
            }
            layers.push_back(LayerSpec::conv(num(parts[1]), parts.size() > 2 ? num(parts[2]) : 3,
                                             parts.size() > 3 ? num(parts[3]) : 1));
        } else if (parts[0] == "gap") {
            layers.push_back(LayerSpec::gap());
        } else {
            throw ConfigError("config: unknown layer kind '" + parts[0] + "'");
        }
    }
    if (layers.empty()) throw ConfigError("config: empty layer list");
    return layers;
}

std::string layers_to_text(const std::vector<LayerSpec>& layers) {
    std::ostringstream os;
    for (std::size_t i = 0; i < layers.size(); ++i) {
        const LayerSpec& l = layers[i];
        if (i) os << ",";
        if (l.kind == LayerKind::Affine) os << "affine:" << l.out_dim;
        else if (l.kind == LayerKind::Conv)
            os << "conv:" << l.out_channels << ":" << l.kernel << ":" << l.stride;
        else os << "gap";
    }
    return os.str();
}

DegradationSpec parse_degradation_text(const std::string& text) {
    std::vector<std::string> parts = split(text, ':');
    auto want_param = [&](const char* kind) {
        if (parts.size() != 2 || parts[1].empty()) {
            throw ConfigError(std::string("config: degradation '") + kind +
                              "' wants one parameter, got '" + text + "'");
        }
    };
    if (parts[0] == "lowres") {
        want_param("lowres");
        try {
            return DegradationSpec::lowres(static_cast<std::size_t>(std::stoull(parts[1])));
        } catch (const std::exception&) {
            throw ConfigError("config: bad lowres factor '" + parts[1] + "'");
        }
    }
    if (parts[0] == "noise") {
        want_param("noise");
        char* end = nullptr;
        double sigma = std::strtod(parts[1].c_str(), &end);
        if (end == parts[1].c_str() || *end != '\0') {
            throw ConfigError("config: bad noise sigma '" + parts[1] + "'");
        }
        return DegradationSpec::noise(sigma);
    }
    if (parts[0] == "mask") {
        want_param("mask");
        char* end = nullptr;
        double frac = std::strtod(parts[1].c_str(), &end);
        if (end == parts[1].c_str() || *end != '\0') {
            throw ConfigError("config: bad mask fraction '" + parts[1] + "'");
        }
        return DegradationSpec::mask(frac);
    }
    throw ConfigError("config: unknown degradation '" + text + "' (lowres:N|noise:S|mask:F)");
}

std::string degradation_to_text(const DegradationSpec& spec) {
    switch (spec.kind) {
        case DegradationSpec::Kind::LowRes: return "lowres:" + std::to_string(spec.factor);
        case DegradationSpec::Kind::Noise: return "noise:" + fmt_double(spec.sigma);
        case DegradationSpec::Kind::Mask: return "mask:" + fmt_double(spec.fraction);
    }
    return "?";
}

ExperimentConfig parse_experiment_config(const std::string& text) {
    Sections sections = parse_sections(text);
    ExperimentConfig cfg;

    for (const auto& [name, kv] : sections) {
        if (name != "dataset" && name != "teacher" && name != "student" && name != "train" &&
            name != "taps" && name != "eval" && name != "output") {
            throw ConfigError("config: unknown section '[" + name + "]'");
        }
    }

    {
        auto it = sections.find("dataset");
        if (it == sections.end()) throw ConfigError("config: missing section '[dataset]'");
        SectionReader r{"dataset", it->second};
        std::string kind = r.take("kind");
        if (kind == "synthetic") {
            cfg.dataset.kind = DatasetSection::Kind::Synthetic;
            cfg.dataset.classes = r.take_size("classes", 20);
            cfg.dataset.per_class = r.take_size("per_class", 50);
            cfg.dataset.dim = r.take_size("dim", 32);
            cfg.dataset.intra_std = r.take_double("intra_std", 0.5);
            cfg.dataset.inter_scale = r.take_double("inter_scale", 5.0);
            cfg.dataset.seed = r.take_u64("seed", 7);
        } else if (kind == "csv") {
            cfg.dataset.kind = DatasetSection::Kind::Csv;
            cfg.dataset.csv_path = r.take("path");
        } else {
            throw ConfigError("config: field 'dataset.kind' wants synthetic|csv, got '" + kind +
                              "'");
        }
        if (r.has("grid")) {
            std::vector<std::string> dims = split(r.take("grid"), 'x');
            if (dims.size() != 3) {
                throw ConfigError("config: field 'dataset.grid' wants CxHxW");
            }
            cfg.dataset.has_grid = true;
            cfg.dataset.grid_c = r.to_size("grid", dims[0]);
            cfg.dataset.grid_h = r.to_size("grid", dims[1]);
            cfg.dataset.grid_w = r.to_size("grid", dims[2]);
        }
        cfg.dataset.split_seed = r.take_u64("split_seed", 0);
        r.done();
    }

    if (auto it = sections.find("teacher"); it != sections.end()) {
        SectionReader r{"teacher", it->second};
        cfg.teacher = parse_net_section(r);
    }
    if (auto it = sections.find("student"); it != sections.end()) {
        SectionReader r{"student", it->second};
        cfg.student = parse_net_section(r);
    }

    if (auto it = sections.find("train"); it != sections.end()) {
        SectionReader r{"train", it->second};
        cfg.train.mode = train_mode_from_name(r.take_or("mode", "baseline"));
        cfg.train.lr = r.take_double("lr", 1e-5);
        cfg.train.epochs = r.take_size("epochs", 200);
        cfg.train.batch_size = r.take_size("batch_size", 32);
        cfg.train.classes_per_batch = r.take_size("classes_per_batch", 8);
        cfg.train.weights.margin_m = r.take_double("margin", 0.2);
        cfg.train.weights.lambda = r.take_double("lambda", 0.0);
        cfg.train.weights.mu = r.take_double("mu", 0.0);
        cfg.train.weights.kappa = r.take_double("kappa", 0.0);
        cfg.train.use_hint = r.take_bool("use_hint", false);
        cfg.train.use_attention = r.take_bool("use_attention", false);
        cfg.train.seed = r.take_u64("seed", 1);
        cfg.train.squared_distances = r.take_bool("squared_distances", false);
        double frac = r.take_double("labeled_fraction", 1.0);
        bool use_unlab = r.take_bool("use_unlabeled", false);
        bool kd_only = r.take_bool("kd_only", false);
        if (frac != 1.0 || use_unlab || kd_only) {
            cfg.train.semi = SemiConfig{frac, use_unlab, kd_only};
        }
        std::string cq = r.take_or("cross_quality", "none");
        if (cq != "none") cfg.train.cross_quality = parse_degradation_text(cq);
        r.done();
    }

    if (auto it = sections.find("taps"); it != sections.end()) {
        SectionReader r{"taps", it->second};
        std::string pairs = r.take("pairs");
        for (const std::string& raw : split(pairs, ',')) {
            std::string item = trim(raw);
            if (item.empty()) continue;
            std::vector<std::string> parts = split(item, ':');
            if (parts.size() != 2 || parts[0].empty() || parts[1].empty()) {
                throw ConfigError("config: field 'taps.pairs' wants teacher:student entries, got '" +
                                  item + "'");
            }
            cfg.train.tap_pairs.emplace_back(trim(parts[0]), trim(parts[1]));
        }
        r.done();
    }

    if (auto it = sections.find("eval"); it != sections.end()) {
        SectionReader r{"eval", it->second};
        if (r.has("k")) {
            cfg.eval_k.clear();
            for (const std::string& raw : split(r.take("k"), ',')) {
                std::string item = trim(raw);
                if (item.empty()) continue;
                cfg.eval_k.push_back(r.to_size("k", item));
            }
            if (cfg.eval_k.empty()) throw ConfigError("config: field 'eval.k' is empty");
        }
        cfg.eval_seeds = r.take_size("seeds", 3);
        if (cfg.eval_seeds == 0) throw ConfigError("config: field 'eval.seeds' must be >= 1");
        r.done();
    }

    {
        auto it = sections.find("output");
        if (it == sections.end()) throw ConfigError("config: missing section '[output]'");
        SectionReader r{"output", it->second};
        cfg.out_dir = r.take("dir");
        if (cfg.out_dir.empty()) throw ConfigError("config: field 'output.dir' is empty");
        r.done();
    }

    return cfg;
}

ExperimentConfig load_experiment_config(const std::string& path) {
    std::ifstream f(path);
    if (!f) throw ConfigError("config: cannot open '" + path + "'");
    std::ostringstream buf;
    buf << f.rdbuf();
    return parse_experiment_config(buf.str());
}

std::string experiment_config_to_text(const ExperimentConfig& cfg) {
    std::ostringstream os;
    os << "[dataset]\n";
    if (cfg.dataset.kind == DatasetSection::Kind::Synthetic) {
        os << "kind=synthetic\n";
        os << "classes=" << cfg.dataset.classes << "\n";
        os << "per_class=" << cfg.dataset.per_class << "\n";
        os << "dim=" << cfg.dataset.dim << "\n";
        os << "intra_std=" << fmt_double(cfg.dataset.intra_std) << "\n";
        os << "inter_scale=" << fmt_double(cfg.dataset.inter_scale) << "\n";
        os << "seed=" << cfg.dataset.seed << "\n";
    } else {
        os << "kind=csv\n";
        os << "path=" << cfg.dataset.csv_path << "\n";
    }
    if (cfg.dataset.has_grid) {
        os << "grid=" << cfg.dataset.grid_c << "x" << cfg.dataset.grid_h << "x"
           << cfg.dataset.grid_w << "\n";
    }
    os << "split_seed=" << cfg.dataset.split_seed << "\n";

    auto net_section = [&](const char* name, const NetSection& n) {
        if (!n.present) return;
        os << "\n[" << name << "]\n";
        os << "layers=" << layers_to_text(n.layers) << "\n";
        os << "embedding_dim=" << n.embedding_dim << "\n";
        os << "l2_normalize=" << (n.l2_normalize ? "true" : "false") << "\n";
    };
    net_section("teacher", cfg.teacher);
    net_section("student", cfg.student);

    os << "\n[train]\n";
    os << "mode=" << train_mode_name(cfg.train.mode) << "\n";
    os << "lr=" << fmt_double(cfg.train.lr) << "\n";
    os << "epochs=" << cfg.train.epochs << "\n";
    os << "batch_size=" << cfg.train.batch_size << "\n";
    os << "classes_per_batch=" << cfg.train.classes_per_batch << "\n";
    os << "margin=" << fmt_double(cfg.train.weights.margin_m) << "\n";
    os << "lambda=" << fmt_double(cfg.train.weights.lambda) << "\n";
    os << "mu=" << fmt_double(cfg.train.weights.mu) << "\n";
    os << "kappa=" << fmt_double(cfg.train.weights.kappa) << "\n";
    os << "use_hint=" << (cfg.train.use_hint ? "true" : "false") << "\n";
    os << "use_attention=" << (cfg.train.use_attention ? "true" : "false") << "\n";
    os << "seed=" << cfg.train.seed << "\n";
    os << "squared_distances=" << (cfg.train.squared_distances ? "true" : "false") << "\n";
    if (cfg.train.semi) {
        os << "labeled_fraction=" << fmt_double(cfg.train.semi->labeled_fraction) << "\n";
        os << "use_unlabeled=" << (cfg.train.semi->use_unlabeled ? "true" : "false") << "\n";
        os << "kd_only=" << (cfg.train.semi->kd_only ? "true" : "false") << "\n";
    }
    if (cfg.train.cross_quality) {
        os << "cross_quality=" << degradation_to_text(*cfg.train.cross_quality) << "\n";
    }
    if (!cfg.train.tap_pairs.empty()) {
        os << "\n[taps]\npairs=";
        for (std::size_t i = 0; i < cfg.train.tap_pairs.size(); ++i) {
            if (i) os << ",";
            os << cfg.train.tap_pairs[i].first << ":" << cfg.train.tap_pairs[i].second;
        }
        os << "\n";
    }

    os << "\n[eval]\nk=";
    for (std::size_t i = 0; i < cfg.eval_k.size(); ++i) {
        if (i) os << ",";
        os << cfg.eval_k[i];
    }
    os << "\nseeds=" << cfg.eval_seeds << "\n";

    os << "\n[output]\ndir=" << cfg.out_dir << "\n";
    return os.str();
}

Dataset build_dataset(const DatasetSection& section) {
    Dataset ds;
    if (section.kind == DatasetSection::Kind::Synthetic) {
        ds = gen_synthetic_clusters(section.classes, section.per_class, section.dim,
                                    section.intra_std, section.inter_scale, section.seed);
    } else {
        ds = load_csv_dataset(section.csv_path);
    }
    if (section.has_grid) {
        ds = as_grid(ds, section.grid_c, section.grid_h, section.grid_w);
    }
    split_classes_half(ds, section.split_seed);
    return ds;
}

NetConfig build_net_config(const NetSection& section, const Dataset& ds, const char* role) {
    if (!section.present) {
        throw ConfigError(std::string("config: missing section '[") + role + "]'");
    }
    NetConfig config;
    const Tensor& sample = ds.samples.at(0);
    if (sample.rank() == 1) {
        config.input = InputKind::vector(sample.shape[0]);
    } else if (sample.rank() == 3) {
        config.input = InputKind::grid(sample.shape[1], sample.shape[2], sample.shape[0]);
    } else {
        throw Error("dataset samples must be vectors or CxHxW grids, got shape " +
                    shape_str(sample.shape));
    }
    config.layers = section.layers;
    config.embedding_dim = section.embedding_dim;
    config.l2_normalize = section.l2_normalize;
    validate_net_config(config);
    return config;
}

}  // namespace mdist
