// mdist: metric-learning distillation experiments.
//
// Subcommands: train-teacher, distill, eval, sweep-lambda, gradcheck.
// Exit codes: 0 success, 2 config/usage error, 3 runtime numeric failure.

#include <atomic>
#include <cstdio>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <mutex>
#include <optional>
#include <thread>

#include <CLI11.hpp>

#include "mdist/check_battery.hpp"
#include "mdist/eval.hpp"
#include "mdist/experiment.hpp"
#include "mdist/trainer.hpp"

namespace fs = std::filesystem;
using namespace mdist;

namespace {

std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

// User-supplied input paths that must exist; absence is a usage error.
void require_file(const std::string& path, const char* what) {
    if (!fs::exists(path)) {
        throw ConfigError(std::string(what) + " '" + path + "' does not exist");
    }
}

// Output directories resolve against MDIST_OUT_ROOT when relative.
fs::path resolve_out_dir(const std::string& dir) {
    fs::path p(dir);
    if (p.is_relative()) {
        if (const char* root = std::getenv("MDIST_OUT_ROOT")) {
            return fs::path(root) / p;
        }
    }
    return p;
}

fs::path prepare_out_dir(const ExperimentConfig& cfg) {
    fs::path out = resolve_out_dir(cfg.out_dir);
    fs::create_directories(out);
    // snapshot before any compute so the directory is self-describing
    std::ofstream snap(out / "config.txt", std::ios::trunc);
    if (!snap) throw Error("cannot write config snapshot to " + (out / "config.txt").string());
    snap << experiment_config_to_text(cfg);
    return out;
}

struct CommonOverrides {
    std::optional<std::string> out;
    std::optional<std::uint64_t> seed;
    std::optional<std::size_t> epochs;
    std::optional<double> lr;

    void apply(ExperimentConfig& cfg) const {
        if (out) cfg.out_dir = *out;
        if (seed) cfg.train.seed = *seed;
        if (epochs) cfg.train.epochs = *epochs;
        if (lr) cfg.train.lr = *lr;
    }
};

void add_common_overrides(CLI::App* cmd, CommonOverrides& o) {
    cmd->add_option("--out", o.out, "Output directory (overrides output.dir)");
    cmd->add_option("--seed", o.seed, "Training seed (overrides train.seed)");
    cmd->add_option("--epochs", o.epochs, "Epoch count (overrides train.epochs)");
    cmd->add_option("--lr", o.lr, "Learning rate (overrides train.lr)");
}

void write_report(const RetrievalReport& report, const fs::path& path, std::ostream& echo) {
    std::ofstream f(path, std::ios::trunc);
    if (!f) throw Error("cannot write report to " + path.string());
    for (std::size_t i = 0; i < report.k_values.size(); ++i) {
        std::string line = "k=" + std::to_string(report.k_values[i]) +
                           " recall=" + fmt_g17(report.recall_at[i]) +
                           " queries=" + std::to_string(report.num_queries);
        f << line << "\n";
        echo << line << "\n";
    }
}

RetrievalReport eval_on_indices(const EmbeddingNet& net, const Dataset& ds,
                                const std::vector<std::size_t>& indices,
                                const std::vector<std::size_t>& k_values,
                                const std::optional<DegradationSpec>& degrade_inputs) {
    if (indices.empty()) throw Error("eval: empty split");
    Tensor batch;
    {
        std::vector<Tensor> views;
        if (degrade_inputs) {
            views.reserve(indices.size());
            for (std::size_t i : indices) {
                views.push_back(degrade(ds.samples[i],
                                        *degrade_inputs,
                                        0x165667B19E3779F9ULL ^
                                            (static_cast<std::uint64_t>(i) *
                                             0x9E3779B97F4A7C15ULL)));
            }
            Dataset tmp;
            tmp.samples = std::move(views);
            tmp.labels.assign(indices.size(), 0);
            std::vector<std::size_t> all(indices.size());
            for (std::size_t i = 0; i < all.size(); ++i) all[i] = i;
            batch = stack_samples(tmp, all);
        } else {
            batch = stack_samples(ds, indices);
        }
    }
    Tensor emb = embed(net, batch);
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) labels.push_back(ds.labels[i]);
    return recall_at_k(emb, labels, k_values);
}

int cmd_train_teacher(const std::string& config_path, const CommonOverrides& over) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    over.apply(cfg);
    cfg.train.mode = TrainMode::Baseline;
    Dataset ds = build_dataset(cfg.dataset);
    NetConfig net_cfg = build_net_config(cfg.teacher, ds, "teacher");
    fs::path out = prepare_out_dir(cfg);

    std::ofstream log(out / "teacher_train.log", std::ios::trunc);
    if (!log) throw Error("cannot write log to " + (out / "teacher_train.log").string());
    TrainResult result = train_teacher(ds, net_cfg, cfg.train, &log);
    save_checkpoint(result.net, (out / "teacher.ckpt").string());

    std::cout << "teacher checkpoint: " << (out / "teacher.ckpt").string() << "\n";
    if (!result.log.empty()) {
        std::cout << "final " << format_epoch_record(result.log.back()) << "\n";
        std::cout << "best_epoch=" << result.best_epoch
                  << " best_val_recall@1=" << fmt_g17(result.best_val_recall1) << "\n";
    }
    return 0;
}

int cmd_distill(const std::string& config_path, const std::string& teacher_path,
                const std::string& mode, bool hint, bool attention,
                std::optional<double> lambda, std::optional<double> mu,
                std::optional<double> kappa, std::optional<double> semi_fraction,
                bool use_unlabeled, bool kd_only, const std::string& cross_quality,
                const CommonOverrides& over) {
    ExperimentConfig cfg = load_experiment_config(config_path);
    over.apply(cfg);
    if (!mode.empty()) cfg.train.mode = train_mode_from_name(mode);
    if (cfg.train.mode == TrainMode::Baseline) {
        throw ConfigError("distill: pick --mode abs or --mode rel");
    }
    if (hint) cfg.train.use_hint = true;
    if (attention) cfg.train.use_attention = true;
    if (lambda) cfg.train.weights.lambda = *lambda;
    if (mu) cfg.train.weights.mu = *mu;
    if (kappa) cfg.train.weights.kappa = *kappa;
    if (semi_fraction || use_unlabeled || kd_only) {
        SemiConfig semi = cfg.train.semi.value_or(SemiConfig{});
        if (semi_fraction) semi.labeled_fraction = *semi_fraction;
        if (use_unlabeled) semi.use_unlabeled = true;
        if (kd_only) semi.kd_only = true;
        cfg.train.semi = semi;
    }
    if (!cross_quality.empty() && cross_quality != "none") {
        cfg.train.cross_quality = parse_degradation_text(cross_quality);
    }

    require_file(teacher_path, "teacher checkpoint");
    EmbeddingNet teacher = load_checkpoint(teacher_path);
    Dataset ds = build_dataset(cfg.dataset);
    NetConfig student_cfg = build_net_config(cfg.student, ds, "student");
    fs::path out = prepare_out_dir(cfg);

    std::ofstream log(out / "distill.log", std::ios::trunc);
    if (!log) throw Error("cannot write log to " + (out / "distill.log").string());
    TrainResult result = distill_student(teacher, ds, student_cfg, cfg.train, &log);
    save_checkpoint(result.net, (out / "student.ckpt").string());

    RetrievalReport report = eval_on_indices(result.net, ds, ds.test_indices, cfg.eval_k,
                                             cfg.train.cross_quality);
    std::cout << "student checkpoint: " << (out / "student.ckpt").string() << "\n";
    write_report(report, out / "report.txt", std::cout);
    return 0;
}

int cmd_eval(const std::string& checkpoint, const std::string& config_path,
             const std::string& csv_path, const std::string& split, const std::string& k_list,
             const std::string& out_dir, const std::string& export_path) {
    if (config_path.empty() == csv_path.empty()) {
        throw ConfigError("eval: give exactly one of --config or --csv");
    }
    require_file(checkpoint, "checkpoint");
    EmbeddingNet net = load_checkpoint(checkpoint);

    Dataset ds;
    std::vector<std::size_t> indices;
    std::vector<std::size_t> k_values;
    if (!config_path.empty()) {
        ExperimentConfig cfg = load_experiment_config(config_path);
        ds = build_dataset(cfg.dataset);
        k_values = cfg.eval_k;
        if (split == "test") indices = ds.test_indices;
        else if (split == "val") indices = ds.val_indices;
        else if (split == "train") indices = ds.train_indices;
        else if (split == "all") {
            indices.resize(ds.size());
            for (std::size_t i = 0; i < ds.size(); ++i) indices[i] = i;
        } else {
            throw ConfigError("eval: unknown split '" + split + "' (train|val|test|all)");
        }
    } else {
        ds = load_csv_dataset(csv_path);
        indices.resize(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) indices[i] = i;
    }
    if (!k_list.empty()) {
        k_values.clear();
        std::string cur;
        for (char c : k_list + ",") {
            if (c == ',') {
                if (!cur.empty()) k_values.push_back(std::stoul(cur));
                cur.clear();
            } else {
                cur.push_back(c);
            }
        }
    }
    if (k_values.empty()) k_values = {1, 2, 4, 8, 16};

    RetrievalReport report = eval_on_indices(net, ds, indices, k_values, std::nullopt);
    if (!out_dir.empty()) {
        fs::path out = resolve_out_dir(out_dir);
        fs::create_directories(out);
        write_report(report, out / "report.txt", std::cout);
    } else {
        for (std::size_t i = 0; i < report.k_values.size(); ++i) {
            std::cout << "k=" << report.k_values[i] << " recall=" << fmt_g17(report.recall_at[i])
                      << " queries=" << report.num_queries << "\n";
        }
    }
    if (!export_path.empty()) {
        export_embeddings(net, ds, indices, export_path);
        std::cout << "embeddings: " << export_path << "\n";
    }
    return 0;
}

struct SweepRun {
    TrainMode mode;
    double lambda;
    std::uint64_t seed;
    double val_recall1 = 0.0;
    bool ok = false;
    std::string error;
};

int cmd_sweep_lambda(const std::string& config_path, const std::vector<double>& values,
                     std::size_t jobs, std::optional<std::size_t> seeds_override,
                     const CommonOverrides& over) {
    if (values.empty()) throw ConfigError("sweep: --values is empty");
    ExperimentConfig cfg = load_experiment_config(config_path);
    over.apply(cfg);
    std::size_t n_seeds = seeds_override.value_or(cfg.eval_seeds);
    if (n_seeds == 0) throw ConfigError("sweep: seeds must be >= 1");

    Dataset ds = build_dataset(cfg.dataset);
    NetConfig teacher_cfg = build_net_config(cfg.teacher, ds, "teacher");
    NetConfig student_cfg = build_net_config(cfg.student, ds, "student");
    fs::path out = prepare_out_dir(cfg);

    // one teacher per seed, shared across the sweep grid
    std::vector<EmbeddingNet> teachers;
    for (std::size_t s = 0; s < n_seeds; ++s) {
        TrainConfig tc = cfg.train;
        tc.mode = TrainMode::Baseline;
        tc.semi.reset();
        tc.cross_quality.reset();
        tc.seed = cfg.train.seed + s;
        teachers.push_back(train_teacher(ds, teacher_cfg, tc).net);
    }

    std::vector<SweepRun> runs;
    for (TrainMode mode : {TrainMode::DistillAbs, TrainMode::DistillRel}) {
        for (double lambda : values) {
            for (std::size_t s = 0; s < n_seeds; ++s) {
                runs.push_back({mode, lambda, cfg.train.seed + s, 0.0, false, ""});
            }
        }
    }

    std::atomic<std::size_t> next{0};
    auto worker = [&]() {
        for (;;) {
            std::size_t i = next.fetch_add(1);
            if (i >= runs.size()) return;
            SweepRun& run = runs[i];
            try {
                TrainConfig tc = cfg.train;
                tc.mode = run.mode;
                tc.weights.lambda = run.lambda;
                tc.seed = run.seed;
                TrainResult res = distill_student(teachers[run.seed - cfg.train.seed], ds,
                                                  student_cfg, tc);
                run.val_recall1 = res.log.empty() ? std::nan("") : res.log.back().val_recall1;
                run.ok = true;
            } catch (const std::exception& e) {
                run.ok = false;
                run.error = e.what();
            }
        }
    };
    std::vector<std::thread> pool;
    for (std::size_t j = 0; j < std::max<std::size_t>(1, jobs); ++j) pool.emplace_back(worker);
    for (std::thread& th : pool) th.join();

    std::ofstream table(out / "sweep.txt", std::ios::trunc);
    if (!table) throw Error("cannot write sweep table to " + (out / "sweep.txt").string());
    auto emit = [&](const std::string& line) {
        table << line << "\n";
        std::cout << line << "\n";
    };
    for (TrainMode mode : {TrainMode::DistillAbs, TrainMode::DistillRel}) {
        double lo = 1.0, hi = 0.0;
        for (double lambda : values) {
            double acc = 0.0;
            std::size_t n_ok = 0;
            std::string err;
            for (const SweepRun& run : runs) {
                if (run.mode != mode || run.lambda != lambda) continue;
                if (run.ok) {
                    acc += run.val_recall1;
                    ++n_ok;
                } else {
                    err = run.error;
                }
            }
            if (n_ok == 0) {
                emit("mode=" + train_mode_name(mode) + " lambda=" + fmt_g17(lambda) +
                     " status=failed error=\"" + err + "\"");
                continue;
            }
            double mean = acc / static_cast<double>(n_ok);
            lo = std::min(lo, mean);
            hi = std::max(hi, mean);
            emit("mode=" + train_mode_name(mode) + " lambda=" + fmt_g17(lambda) +
                 " val_recall@1=" + fmt_g17(mean) + " seeds=" + std::to_string(n_ok));
        }
        if (hi >= lo) {
            emit("range mode=" + train_mode_name(mode) + " min=" + fmt_g17(lo) +
                 " max=" + fmt_g17(hi) + " spread=" + fmt_g17(hi - lo));
        }
    }
    return 0;
}

int cmd_gradcheck(std::size_t trials) {
    std::vector<CheckResult> results = run_gradient_battery(trials, 20240817);
    bool all_pass = true;
    for (const CheckResult& res : results) {
        std::cout << "check=" << res.name << " max_rel_err=" << fmt_g17(res.max_rel_error)
                  << " trials=" << res.trials << " status=" << (res.pass ? "pass" : "FAIL");
        if (!res.detail.empty()) std::cout << " detail=\"" << res.detail << "\"";
        std::cout << "\n";
        all_pass = all_pass && res.pass;
    }
    std::cout << (all_pass ? "gradcheck: all checks passed" : "gradcheck: FAILURES above") << "\n";
    return all_pass ? 0 : 3;
}

}  // namespace

int main(int argc, char** argv) {
    CLI::App app{"metric-learning distillation experiments"};
    app.require_subcommand(1);

    std::string config_path, teacher_path, mode, cross_quality, checkpoint, csv_path;
    std::string split = "test", k_list, out_dir, export_path;
    bool hint = false, attention = false, use_unlabeled = false, kd_only = false;
    std::optional<double> lambda, mu, kappa, semi_fraction;
    std::vector<double> sweep_values;
    std::size_t jobs = 1, gradcheck_trials = 20;
    std::optional<std::size_t> seeds_override;
    CommonOverrides over_teacher, over_distill, over_sweep;

    CLI::App* train = app.add_subcommand("train-teacher", "Train a teacher from scratch");
    train->add_option("--config", config_path, "Experiment config file")->required();
    add_common_overrides(train, over_teacher);

    CLI::App* distill = app.add_subcommand("distill", "Train a student under a frozen teacher");
    distill->add_option("--config", config_path, "Experiment config file")->required();
    distill->add_option("--teacher", teacher_path, "Teacher checkpoint")->required();
    distill->add_option("--mode", mode, "abs|rel (overrides train.mode)");
    distill->add_flag("--hint", hint, "Enable hint loss");
    distill->add_flag("--attention", attention, "Enable attention loss");
    distill->add_option("--lambda", lambda, "Distillation weight");
    distill->add_option("--mu", mu, "Hint weight");
    distill->add_option("--kappa", kappa, "Attention weight");
    distill->add_option("--semi", semi_fraction, "Labeled fraction in (0,1]");
    distill->add_flag("--use-unlabeled", use_unlabeled, "Add KD-only unlabeled batches");
    distill->add_flag("--kd-only", kd_only, "Drop the metric-learning term (no labels)");
    distill->add_option("--cross-quality", cross_quality,
                        "Degrade student inputs (lowres:N|noise:S|mask:F)");
    add_common_overrides(distill, over_distill);

    CLI::App* eval_cmd = app.add_subcommand("eval", "Recall@K of a checkpoint on a dataset");
    eval_cmd->add_option("--checkpoint", checkpoint, "Network checkpoint")->required();
    eval_cmd->add_option("--config", config_path, "Experiment config (dataset section)");
    eval_cmd->add_option("--csv", csv_path, "CSV dataset (evaluates all samples)");
    eval_cmd->add_option("--split", split, "train|val|test|all (default test)");
    eval_cmd->add_option("--k", k_list, "Comma-separated K values");
    eval_cmd->add_option("--out", out_dir, "Directory for report.txt");
    eval_cmd->add_option("--export", export_path, "Write embeddings to this file");

    CLI::App* sweep = app.add_subcommand("sweep-lambda", "Validation R@1 per (mode, lambda)");
    sweep->add_option("--config", config_path, "Experiment config file")->required();
    sweep->add_option("--values", sweep_values, "Lambda values")->required()->delimiter(',');
    sweep->add_option("--jobs", jobs, "Concurrent runs");
    sweep->add_option("--seeds", seeds_override, "Seeds per cell (overrides eval.seeds)");
    add_common_overrides(sweep, over_sweep);

    CLI::App* gc = app.add_subcommand("gradcheck", "Finite-difference checks per primitive/loss");
    gc->add_option("--trials", gradcheck_trials, "Random points per check");

    try {
        app.parse(argc, argv);
        if (train->parsed()) return cmd_train_teacher(config_path, over_teacher);
        if (distill->parsed()) {
            return cmd_distill(config_path, teacher_path, mode, hint, attention, lambda, mu,
                               kappa, semi_fraction, use_unlabeled, kd_only, cross_quality,
                               over_distill);
        }
        if (eval_cmd->parsed()) {
            return cmd_eval(checkpoint, config_path, csv_path, split, k_list, out_dir,
                            export_path);
        }
        if (sweep->parsed()) {
            return cmd_sweep_lambda(config_path, sweep_values, jobs, seeds_override, over_sweep);
        }
        if (gc->parsed()) return cmd_gradcheck(gradcheck_trials);
        return 2;
    } catch (const CLI::ParseError& e) {
        int code = app.exit(e);
        return code == 0 ? 0 : 2;
    } catch (const ConfigError& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 2;
    } catch (const std::exception& e) {
        std::cerr << "error: " << e.what() << "\n";
        return 3;
    }
}
