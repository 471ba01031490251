#include "mdist/trainer.hpp"

#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <map>
#include <ostream>
#include <set>
#include <sstream>

#include "mdist/eval.hpp"
#include "mdist/rng.hpp"
#include "mdist/sampling.hpp"

namespace mdist {

namespace {

constexpr std::uint64_t kBatchSalt = 0x9E3779B97F4A7C15ULL;
constexpr std::uint64_t kSemiSalt = 0xC2B2AE3D27D4EB4FULL;
constexpr std::uint64_t kDegradeSalt = 0x165667B19E3779F9ULL;

std::string fmt_g17(double v) {
    char buf[64];
    std::snprintf(buf, sizeof buf, "%.17g", v);
    return buf;
}

}  // namespace

std::string train_mode_name(TrainMode m) {
    switch (m) {
        case TrainMode::Baseline: return "baseline";
        case TrainMode::DistillAbs: return "distill_abs";
        case TrainMode::DistillRel: return "distill_rel";
    }
    return "?";
}

TrainMode train_mode_from_name(const std::string& name) {
    if (name == "baseline") return TrainMode::Baseline;
    if (name == "distill_abs" || name == "abs") return TrainMode::DistillAbs;
    if (name == "distill_rel" || name == "rel") return TrainMode::DistillRel;
    throw ConfigError("unknown train mode '" + name + "' (baseline|abs|rel)");
}

void validate_train_config(const TrainConfig& cfg) {
    validate_weights(cfg.weights);
    if (!(cfg.lr > 0.0)) throw Error("train config: lr must be > 0");
    if (cfg.batch_size < 2) throw Error("train config: batch_size must be >= 2");
    if (cfg.semi) {
        const SemiConfig& s = *cfg.semi;
        if (!(s.labeled_fraction > 0.0 && s.labeled_fraction <= 1.0)) {
            throw Error("train config: labeled_fraction must be in (0,1]");
        }
        if (s.kd_only && cfg.mode == TrainMode::Baseline) {
            throw Error("train config: kd_only requires a distillation mode");
        }
        if ((s.use_unlabeled || s.kd_only) && cfg.mode == TrainMode::Baseline) {
            throw Error("train config: unlabeled data requires a distillation mode");
        }
    }
    if (cfg.cross_quality) {
        validate_degradation(*cfg.cross_quality);
        if (cfg.mode == TrainMode::Baseline) {
            throw Error("train config: cross_quality requires a distillation mode");
        }
        if (cfg.semi) throw Error("train config: semi and cross_quality cannot be combined");
    }
    if ((cfg.use_hint || cfg.use_attention) && cfg.tap_pairs.empty()) {
        throw Error("train config: hint/attention require tap_pairs");
    }
    if ((cfg.use_hint || cfg.use_attention) && cfg.mode == TrainMode::Baseline) {
        throw Error("train config: hint/attention require a distillation mode");
    }
}

void adam_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double beta1, double beta2, double eps) {
    const std::size_t t = ++state.step_;
    const double bc1 = 1.0 - std::pow(beta1, static_cast<double>(t));
    const double bc2 = 1.0 - std::pow(beta2, static_cast<double>(t));
    for (auto& [name, p] : params) {
        auto git = grads.find(name);
        if (git == grads.end()) {
            throw Error("adam_step: no gradient for parameter '" + name + "'");
        }
        const Tensor& g = git->second;
        if (g.shape != p.shape) {
            throw Error("adam_step: gradient shape " + shape_str(g.shape) + " for parameter '" +
                        name + "' of shape " + shape_str(p.shape));
        }
        if (!g.all_finite()) {
            throw Error("adam_step: non-finite gradient for parameter '" + name + "' at step " +
                        std::to_string(t));
        }
        Tensor& m = state.m_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        Tensor& v = state.v_.try_emplace(name, Tensor::zeros(p.shape)).first->second;
        for (std::size_t i = 0; i < p.numel(); ++i) {
            m[i] = beta1 * m[i] + (1.0 - beta1) * g[i];
            v[i] = beta2 * v[i] + (1.0 - beta2) * g[i] * g[i];
            const double mhat = m[i] / bc1;
            const double vhat = v[i] / bc2;
            p[i] -= lr * mhat / (std::sqrt(vhat) + eps);
        }
    }
}

TeacherOutputs teacher_forward(const EmbeddingNet& teacher, const Tensor& inputs) {
    TeacherOutputs out;
    out.embeddings = embed(teacher, inputs, &out.taps);
    return out;
}

Tensor stack_samples(const Dataset& ds, const std::vector<std::size_t>& indices) {
    if (indices.empty()) throw Error("stack_samples: empty index set");
    const Tensor& first = ds.samples[indices[0]];
    Shape bshape;
    bshape.push_back(indices.size());
    for (std::size_t d : first.shape) bshape.push_back(d);
    Tensor batch = Tensor::zeros(bshape);
    const std::size_t rowlen = first.numel();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Tensor& s = ds.samples[indices[i]];
        if (s.shape != first.shape) throw Error("stack_samples: inconsistent sample shapes");
        std::copy(s.data.begin(), s.data.end(),
                  batch.data.begin() + static_cast<long>(i * rowlen));
    }
    return batch;
}

namespace {

Tensor stack_from(const std::vector<Tensor>& source, const std::vector<std::size_t>& indices) {
    Shape bshape;
    bshape.push_back(indices.size());
    for (std::size_t d : source[indices[0]].shape) bshape.push_back(d);
    Tensor batch = Tensor::zeros(bshape);
    const std::size_t rowlen = source[indices[0]].numel();
    for (std::size_t i = 0; i < indices.size(); ++i) {
        const Tensor& s = source[indices[i]];
        std::copy(s.data.begin(), s.data.end(),
                  batch.data.begin() + static_cast<long>(i * rowlen));
    }
    return batch;
}

struct BatchGraph {
    std::optional<Tape::NodeId> ml, kd, hint, at;
};

// Loss terms for one routed batch on the student's tape. The teacher runs
// without gradient recording; its outputs enter the tape as constants.
BatchGraph build_batch_graph(Tape& t, const EmbeddingNet& student,
                             const std::map<std::string, Tape::NodeId>& params,
                             const EmbeddingNet* teacher, const Tensor& student_inputs,
                             const Tensor& teacher_inputs, const std::vector<int>* labels,
                             const TrainConfig& cfg, const TeacherAudit* audit) {
    BatchGraph out;
    TapeForward sfw = forward_on_tape(student, t, params, t.leaf(student_inputs));
    const std::size_t B = t.value(sfw.embeddings).shape[0];

    std::optional<TeacherOutputs> tout;
    Tape::NodeId teacher_emb = 0;
    if (teacher) {
        if (audit && *audit) (*audit)(teacher_inputs);
        tout = teacher_forward(*teacher, teacher_inputs);
        teacher_emb = t.leaf(tout->embeddings);
    }

    if (labels) {
        std::vector<TripletIdx> triplets = mine_hard_negatives(t.value(sfw.embeddings), *labels);
        out.ml = triplet_loss_batch(t, sfw.embeddings, triplets, cfg.weights.margin_m,
                                    cfg.squared_distances);
    }

    if (teacher && cfg.mode != TrainMode::Baseline) {
        if (cfg.mode == TrainMode::DistillAbs) {
            out.kd = kd_abs_loss(t, sfw.embeddings, teacher_emb, cfg.squared_distances);
        } else {
            out.kd = kd_rel_loss(t, sfw.embeddings, teacher_emb, enumerate_pairs(B),
                                 cfg.squared_distances);
        }
    }

    // hint and attention transfer apply to the primary (labeled) batch
    if (teacher && labels && (cfg.use_hint || cfg.use_attention)) {
        auto student_tap = [&](const std::string& name) -> Tape::NodeId {
            for (const auto& [tname, node] : sfw.taps) {
                if (tname == name) return node;
            }
            throw Error("distill: student tap '" + name + "' was not produced");
        };
        auto teacher_tap = [&](const std::string& name) -> const Tensor& {
            for (const TapOutput& tap : tout->taps) {
                if (tap.name == name) return tap.activation;
            }
            throw Error("distill: teacher tap '" + name + "' was not produced");
        };
        if (cfg.use_hint) {
            std::vector<HintPair> pairs;
            for (const auto& [tname, sname] : cfg.tap_pairs) {
                pairs.push_back(
                    {student_tap(sname), t.leaf(teacher_tap(tname)), tname + "<->" + sname});
            }
            out.hint = hint_loss(t, pairs);
        }
        if (cfg.use_attention) {
            std::optional<Tape::NodeId> acc;
            for (const auto& [tname, sname] : cfg.tap_pairs) {
                Tape::NodeId term =
                    attention_loss_batch(t, student_tap(sname), t.leaf(teacher_tap(tname)));
                acc = acc ? t.add(*acc, term) : term;
            }
            if (cfg.tap_pairs.size() > 1) {
                acc = t.div(*acc, t.constant(static_cast<double>(cfg.tap_pairs.size())));
            }
            out.at = acc;
        }
    }
    return out;
}

StepTerms apply_update(EmbeddingNet& student, const EmbeddingNet* teacher,
                       const Tensor* lab_student, const Tensor* lab_teacher,
                       const std::vector<int>* labels, const Tensor* unlab_student,
                       const Tensor* unlab_teacher, const TrainConfig& cfg, AdamState& opt,
                       const TeacherAudit* audit) {
    validate_train_config(cfg);
    if (cfg.mode != TrainMode::Baseline && !teacher) {
        throw Error("distill: mode " + train_mode_name(cfg.mode) + " requires a teacher");
    }
    if (cfg.mode == TrainMode::Baseline && teacher) {
        throw Error("distill: baseline mode does not take a teacher");
    }
    if (cfg.mode == TrainMode::Baseline && unlab_student) {
        throw Error("distill: unlabeled batch rejected in baseline mode");
    }

    Tape t;
    std::map<std::string, Tape::NodeId> params = register_params(student, t);

    // distillation weights are inert without a teacher
    LossWeights weights = cfg.weights;
    if (cfg.mode == TrainMode::Baseline) {
        weights.lambda = weights.mu = weights.kappa = 0.0;
    }

    LossTerms terms;
    auto merge = [&](const BatchGraph& g) {
        auto fold = [&](std::optional<Tape::NodeId>& into, const std::optional<Tape::NodeId>& v) {
            if (v) into = into ? t.add(*into, *v) : *v;
        };
        fold(terms.ml, g.ml);
        fold(terms.kd, g.kd);
        fold(terms.hint, g.hint);
        fold(terms.at, g.at);
    };

    if (lab_student) {
        merge(build_batch_graph(t, student, params, teacher, *lab_student, *lab_teacher, labels,
                                cfg, audit));
    }
    if (unlab_student) {
        merge(build_batch_graph(t, student, params, teacher, *unlab_student, *unlab_teacher,
                                nullptr, cfg, audit));
    }

    Tape::NodeId total = total_loss(t, terms, weights);
    std::vector<Tensor> grads = t.backward(total);

    std::map<std::string, Tensor> grad_map;
    for (const auto& [name, node] : params) grad_map[name] = grads[node];
    adam_step(student.params, grad_map, opt, cfg.lr, cfg.beta1, cfg.beta2, cfg.adam_eps);

    StepTerms st;
    st.total = t.value(total).scalar_value();
    st.ml = terms.ml ? t.value(*terms.ml).scalar_value() : 0.0;
    st.kd = terms.kd ? weights.lambda * t.value(*terms.kd).scalar_value() : 0.0;
    st.hint = terms.hint ? weights.mu * t.value(*terms.hint).scalar_value() : 0.0;
    st.at = terms.at ? weights.kappa * t.value(*terms.at).scalar_value() : 0.0;
    return st;
}

}  // namespace

StepTerms distill_step(EmbeddingNet& student, const EmbeddingNet* teacher,
                       const LabeledBatch& batch, const TrainConfig& cfg, AdamState& opt,
                       const TeacherAudit* audit) {
    if (batch.student_inputs.shape[0] != batch.labels.size()) {
        throw Error("distill_step: " + std::to_string(batch.labels.size()) + " labels for " +
                    std::to_string(batch.student_inputs.shape[0]) + " inputs");
    }
    return apply_update(student, teacher, &batch.student_inputs, &batch.teacher_inputs,
                        &batch.labels, nullptr, nullptr, cfg, opt, audit);
}

StepTerms semi_supervised_step(EmbeddingNet& student, const EmbeddingNet& teacher,
                               const LabeledBatch& labeled, const UnlabeledBatch& unlabeled,
                               const TrainConfig& cfg, AdamState& opt) {
    const bool kd_only = cfg.semi && cfg.semi->kd_only;
    return apply_update(student, &teacher, &labeled.student_inputs, &labeled.teacher_inputs,
                        kd_only ? nullptr : &labeled.labels, &unlabeled.student_inputs,
                        &unlabeled.teacher_inputs, cfg, opt, nullptr);
}

StepTerms cross_quality_step(EmbeddingNet& student, const EmbeddingNet& teacher,
                             const LabeledBatch& routed, const TrainConfig& cfg, AdamState& opt,
                             const TeacherAudit* audit) {
    if (routed.student_inputs.shape[0] != routed.teacher_inputs.shape[0]) {
        throw Error("cross_quality_step: batch length mismatch, student " +
                    std::to_string(routed.student_inputs.shape[0]) + " vs teacher " +
                    std::to_string(routed.teacher_inputs.shape[0]));
    }
    return distill_step(student, &teacher, routed, cfg, opt, audit);
}

std::string format_epoch_record(const EpochRecord& r) {
    std::ostringstream os;
    os << "epoch=" << r.epoch << " loss_total=" << fmt_g17(r.loss_total)
       << " loss_ml=" << fmt_g17(r.loss_ml) << " loss_kd=" << fmt_g17(r.loss_kd)
       << " loss_hint=" << fmt_g17(r.loss_hint) << " loss_at=" << fmt_g17(r.loss_at)
       << " val_recall@1=" << fmt_g17(r.val_recall1) << " wall_ms=" << r.wall_ms;
    return os.str();
}

namespace {

bool feq(double a, double b) { return a == b || (std::isnan(a) && std::isnan(b)); }

}  // namespace

bool records_equal_ignoring_time(const std::vector<EpochRecord>& a,
                                 const std::vector<EpochRecord>& b) {
    if (a.size() != b.size()) return false;
    for (std::size_t i = 0; i < a.size(); ++i) {
        if (a[i].epoch != b[i].epoch || !feq(a[i].loss_total, b[i].loss_total) ||
            !feq(a[i].loss_ml, b[i].loss_ml) || !feq(a[i].loss_kd, b[i].loss_kd) ||
            !feq(a[i].loss_hint, b[i].loss_hint) || !feq(a[i].loss_at, b[i].loss_at) ||
            !feq(a[i].val_recall1, b[i].val_recall1)) {
            return false;
        }
    }
    return true;
}

double eval_recall1(const EmbeddingNet& net, const Dataset& ds,
                    const std::vector<std::size_t>& indices,
                    const std::vector<Tensor>* degraded) {
    if (indices.size() < 2) return std::nan("");
    std::map<int, std::size_t> counts;
    for (std::size_t i : indices) counts[ds.labels[i]]++;
    for (const auto& [label, count] : counts) {
        if (count < 2) return std::nan("");
    }
    Tensor batch = degraded ? stack_from(*degraded, indices) : stack_samples(ds, indices);
    Tensor emb = embed(net, batch);
    std::vector<int> labels;
    labels.reserve(indices.size());
    for (std::size_t i : indices) labels.push_back(ds.labels[i]);
    return recall_at_k(emb, labels, {1}).recall(1);
}

namespace {

std::vector<std::size_t> uniform_batch(const std::vector<std::size_t>& pool, std::size_t n,
                                       Rng& rng) {
    if (pool.size() < n) {
        throw Error("uniform batch: pool of " + std::to_string(pool.size()) +
                    " cannot fill batch of " + std::to_string(n));
    }
    std::vector<std::size_t> copy = pool;
    std::vector<std::size_t> out;
    out.reserve(n);
    for (std::size_t i = 0; i < n; ++i) {
        std::size_t j = i + rng.below(copy.size() - i);
        std::swap(copy[i], copy[j]);
        out.push_back(copy[i]);
    }
    return out;
}

// Per-sample deterministic degradation seed, independent of the training
// seed so every run sees the same degraded views.
std::uint64_t degrade_seed(std::size_t index) {
    return kDegradeSalt ^ (static_cast<std::uint64_t>(index) * kBatchSalt);
}

std::vector<Shape> tap_shapes(const NetConfig& config, const std::vector<std::string>& names,
                              const std::vector<std::string>& wanted, const char* who) {
    std::vector<Shape> out;
    std::vector<Shape> per_layer;
    {
        // per-sample output shape of each layer
        bool grid = config.input.is_grid;
        std::size_t c = config.input.channels, h = config.input.height, w = config.input.width;
        std::size_t dim = config.input.dim;
        for (const LayerSpec& l : config.layers) {
            if (l.kind == LayerKind::Affine) {
                dim = l.out_dim;
                per_layer.push_back({dim});
            } else if (l.kind == LayerKind::Conv) {
                std::size_t pad = l.kernel / 2;
                h = (h + 2 * pad - l.kernel) / l.stride + 1;
                w = (w + 2 * pad - l.kernel) / l.stride + 1;
                c = l.out_channels;
                per_layer.push_back({c, h, w});
            } else {
                grid = false;
                dim = c;
                per_layer.push_back({dim});
            }
        }
        (void)grid;
    }
    for (const std::string& name : wanted) {
        auto it = std::find(names.begin(), names.end(), name);
        if (it == names.end()) {
            throw Error(std::string(who) + " tap '" + name + "' is not a layer name");
        }
        out.push_back(per_layer[static_cast<std::size_t>(it - names.begin())]);
    }
    return out;
}

TrainResult run_training(const Dataset& ds, const NetConfig& net_config, const TrainConfig& cfg,
                         const EmbeddingNet* teacher_in, std::ostream* log_sink,
                         const TeacherAudit* audit) {
    validate_train_config(cfg);
    validate_dataset(ds);
    if (!ds.has_split() || ds.train_indices.empty()) {
        throw Error("training: dataset has no train split; apply split_classes_half first");
    }
    if (cfg.mode != TrainMode::Baseline && !teacher_in) {
        throw Error("training: mode " + train_mode_name(cfg.mode) + " requires a teacher");
    }
    if (cfg.mode == TrainMode::Baseline && teacher_in) {
        throw Error("training: baseline mode does not take a teacher");
    }

    EmbeddingNet student = init_params(net_config, cfg.seed);

    // Route taps: teacher names on the teacher, student names on the student.
    EmbeddingNet teacher;
    if (teacher_in) {
        teacher = *teacher_in;
        teacher.tap_names.clear();
        student.tap_names.clear();
        std::vector<std::string> tnames, snames;
        for (const auto& [tn, sn] : cfg.tap_pairs) {
            tnames.push_back(tn);
            snames.push_back(sn);
        }
        if (cfg.use_hint || cfg.use_attention) {
            std::vector<Shape> ts = tap_shapes(teacher.config, teacher.layer_names, tnames,
                                               "teacher");
            std::vector<Shape> ss = tap_shapes(student.config, student.layer_names, snames,
                                               "student");
            for (std::size_t i = 0; i < cfg.tap_pairs.size(); ++i) {
                if (cfg.use_hint && ts[i] != ss[i]) {
                    throw Error("distill: tap pair '" + tnames[i] + "<->" + snames[i] +
                                "' shape mismatch, teacher " + shape_str(ts[i]) + " vs student " +
                                shape_str(ss[i]));
                }
                if (cfg.use_attention &&
                    (ts[i].size() != 3 || ss[i].size() != 3 || ts[i][1] != ss[i][1] ||
                     ts[i][2] != ss[i][2])) {
                    throw Error("distill: attention tap pair '" + tnames[i] + "<->" + snames[i] +
                                "' needs matching spatial grids, teacher " + shape_str(ts[i]) +
                                " vs student " + shape_str(ss[i]));
                }
            }
            teacher.tap_names = tnames;
            student.tap_names = snames;
        }
    }

    // Cross-quality: materialize the degraded views once; they are a fixed
    // property of (dataset, spec), shared across training seeds.
    std::vector<Tensor> degraded;
    const std::vector<Tensor>* student_view = nullptr;
    if (cfg.cross_quality) {
        degraded.reserve(ds.size());
        for (std::size_t i = 0; i < ds.size(); ++i) {
            degraded.push_back(degrade(ds.samples[i], *cfg.cross_quality, degrade_seed(i)));
        }
        student_view = &degraded;
    }

    // Semi-supervised pools.
    const bool kd_only = cfg.semi && cfg.semi->kd_only;
    const bool use_unlabeled = cfg.semi && cfg.semi->use_unlabeled && !kd_only;
    std::vector<std::size_t> labeled_pool, unlabeled_pool;
    if (cfg.semi && !kd_only && cfg.semi->labeled_fraction < 1.0) {
        std::map<int, std::vector<std::size_t>> by_class;
        for (std::size_t i : ds.train_indices) by_class[ds.labels[i]].push_back(i);
        Rng part_rng(cfg.seed ^ kSemiSalt);
        for (auto& [label, idx] : by_class) {
            part_rng.shuffle(idx);
            std::size_t n_lab = static_cast<std::size_t>(
                std::llround(cfg.semi->labeled_fraction * static_cast<double>(idx.size())));
            n_lab = std::min(std::max<std::size_t>(n_lab, 1), idx.size());
            for (std::size_t k = 0; k < idx.size(); ++k) {
                (k < n_lab ? labeled_pool : unlabeled_pool).push_back(idx[k]);
            }
        }
        std::sort(labeled_pool.begin(), labeled_pool.end());
        std::sort(unlabeled_pool.begin(), unlabeled_pool.end());
    } else {
        labeled_pool = ds.train_indices;
    }
    if (use_unlabeled && unlabeled_pool.size() < cfg.batch_size) {
        throw Error("training: unlabeled pool of " + std::to_string(unlabeled_pool.size()) +
                    " cannot fill batches of " + std::to_string(cfg.batch_size));
    }

    const std::size_t pool_size = kd_only ? ds.train_indices.size() : labeled_pool.size();
    const std::size_t steps_per_epoch = std::max<std::size_t>(1, pool_size / cfg.batch_size);

    AdamState opt;
    Rng batch_rng(cfg.seed ^ kBatchSalt);
    TrainResult result;
    result.best_val_recall1 = std::nan("");

    for (std::size_t epoch = 1; epoch <= cfg.epochs; ++epoch) {
        const auto t0 = std::chrono::steady_clock::now();
        StepTerms sums;
        for (std::size_t step = 0; step < steps_per_epoch; ++step) {
            StepTerms st;
            if (kd_only) {
                std::vector<std::size_t> idx =
                    uniform_batch(ds.train_indices, cfg.batch_size, batch_rng);
                UnlabeledBatch ub{student_view ? stack_from(*student_view, idx)
                                               : stack_samples(ds, idx),
                                  stack_samples(ds, idx)};
                st = apply_update(student, &teacher, nullptr, nullptr, nullptr,
                                  &ub.student_inputs, &ub.teacher_inputs, cfg, opt, audit);
            } else {
                std::vector<std::size_t> idx = make_batch(ds, labeled_pool, cfg.batch_size,
                                                          cfg.classes_per_batch, batch_rng);
                LabeledBatch lb;
                lb.student_inputs =
                    student_view ? stack_from(*student_view, idx) : stack_samples(ds, idx);
                lb.teacher_inputs = stack_samples(ds, idx);
                for (std::size_t i : idx) lb.labels.push_back(ds.labels[i]);
                if (use_unlabeled) {
                    std::vector<std::size_t> uidx =
                        uniform_batch(unlabeled_pool, cfg.batch_size, batch_rng);
                    UnlabeledBatch ub{student_view ? stack_from(*student_view, uidx)
                                                   : stack_samples(ds, uidx),
                                      stack_samples(ds, uidx)};
                    st = apply_update(student, teacher_in ? &teacher : nullptr,
                                      &lb.student_inputs, &lb.teacher_inputs, &lb.labels,
                                      &ub.student_inputs, &ub.teacher_inputs, cfg, opt, audit);
                } else {
                    st = apply_update(student, teacher_in ? &teacher : nullptr,
                                      &lb.student_inputs, &lb.teacher_inputs, &lb.labels, nullptr,
                                      nullptr, cfg, opt, audit);
                }
            }
            sums.total += st.total;
            sums.ml += st.ml;
            sums.kd += st.kd;
            sums.hint += st.hint;
            sums.at += st.at;
        }

        EpochRecord rec;
        rec.epoch = epoch;
        const double n = static_cast<double>(steps_per_epoch);
        rec.loss_total = sums.total / n;
        rec.loss_ml = sums.ml / n;
        rec.loss_kd = sums.kd / n;
        rec.loss_hint = sums.hint / n;
        rec.loss_at = sums.at / n;
        rec.val_recall1 = eval_recall1(student, ds, ds.val_indices, student_view);
        rec.wall_ms = std::chrono::duration_cast<std::chrono::milliseconds>(
                          std::chrono::steady_clock::now() - t0)
                          .count();
        result.log.push_back(rec);
        if (log_sink) {
            (*log_sink) << format_epoch_record(rec) << "\n";
            log_sink->flush();
        }
        if (std::isfinite(rec.val_recall1) &&
            (!std::isfinite(result.best_val_recall1) ||
             rec.val_recall1 > result.best_val_recall1)) {
            result.best_val_recall1 = rec.val_recall1;
            result.best_epoch = epoch;
        }
    }

    result.net = std::move(student);
    return result;
}

}  // namespace

TrainResult train_teacher(const Dataset& ds, const NetConfig& net_config, const TrainConfig& cfg,
                          std::ostream* log_sink) {
    if (cfg.mode != TrainMode::Baseline) {
        throw Error("train_teacher: teacher training uses the triplet loss only (baseline mode)");
    }
    if (cfg.semi || cfg.cross_quality) {
        throw Error("train_teacher: semi/cross-quality settings apply to students");
    }
    return run_training(ds, net_config, cfg, nullptr, log_sink, nullptr);
}

TrainResult distill_student(const EmbeddingNet& teacher, const Dataset& ds,
                            const NetConfig& student_config, const TrainConfig& cfg,
                            std::ostream* log_sink, const TeacherAudit* audit) {
    if (cfg.mode == TrainMode::Baseline) {
        // still a legal run (plain student training); the teacher is unused
        return run_training(ds, student_config, cfg, nullptr, log_sink, nullptr);
    }
    return run_training(ds, student_config, cfg, &teacher, log_sink, audit);
}

}  // namespace mdist
