#pragma once

#include <cstdint>
#include <functional>
#include <iosfwd>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include "mdist/data.hpp"
#include "mdist/losses.hpp"
#include "mdist/net.hpp"

namespace mdist {

enum class TrainMode { Baseline, DistillAbs, DistillRel };

std::string train_mode_name(TrainMode m);
TrainMode train_mode_from_name(const std::string& name);

struct SemiConfig {
    double labeled_fraction = 1.0;  // in (0, 1]
    bool use_unlabeled = false;     // add a KD-only unlabeled batch per step
    bool kd_only = false;           // drop the metric-learning term entirely; labels never read
};

struct TrainConfig {
    TrainMode mode = TrainMode::Baseline;
    bool use_hint = false;
    bool use_attention = false;
    LossWeights weights;
    double lr = 1e-5;
    double beta1 = 0.9;
    double beta2 = 0.999;
    double adam_eps = 1e-8;
    std::size_t batch_size = 32;
    std::size_t classes_per_batch = 8;
    std::size_t epochs = 200;
    std::uint64_t seed = 0;
    bool squared_distances = false;
    std::optional<SemiConfig> semi;
    std::optional<DegradationSpec> cross_quality;  // applied to student inputs only
    // (teacher_tap, student_tap) name pairs for hint/attention transfer
    std::vector<std::pair<std::string, std::string>> tap_pairs;
};

void validate_train_config(const TrainConfig& cfg);

// Standard bias-corrected Adam over a named parameter set.
class AdamState {
public:
    std::size_t step() const { return step_; }
    friend void adam_step(std::map<std::string, Tensor>& params,
                          const std::map<std::string, Tensor>& grads, AdamState& state,
                          double lr, double beta1, double beta2, double eps);

private:
    std::map<std::string, Tensor> m_, v_;
    std::size_t step_ = 0;
};

// One Adam update. Rejects non-finite gradients, naming the parameter and
// the step index.
void adam_step(std::map<std::string, Tensor>& params,
               const std::map<std::string, Tensor>& grads, AdamState& state, double lr,
               double beta1 = 0.9, double beta2 = 0.999, double eps = 1e-8);

// Weighted per-term loss values of one update step; total is their sum.
struct StepTerms {
    double total = 0.0, ml = 0.0, kd = 0.0, hint = 0.0, at = 0.0;
};

struct LabeledBatch {
    Tensor student_inputs;  // B x ... (degraded under cross-quality)
    Tensor teacher_inputs;  // clean inputs, same ordering
    std::vector<int> labels;
};

// Carries no label field: code paths taking this type cannot read labels.
struct UnlabeledBatch {
    Tensor student_inputs;
    Tensor teacher_inputs;
};

// Teacher forward pass without gradient recording.
struct TeacherOutputs {
    Tensor embeddings;
    std::vector<TapOutput> taps;
};
TeacherOutputs teacher_forward(const EmbeddingNet& teacher, const Tensor& inputs);

using TeacherAudit = std::function<void(const Tensor& teacher_input)>;

// One supervised update step (baseline or plain distillation).
StepTerms distill_step(EmbeddingNet& student, const EmbeddingNet* teacher,
                       const LabeledBatch& batch, const TrainConfig& cfg, AdamState& opt,
                       const TeacherAudit* audit = nullptr);

// Labeled + unlabeled combined step: (L_ML + lambda L_KD) on the labeled
// batch plus lambda L_KD on the unlabeled one.
StepTerms semi_supervised_step(EmbeddingNet& student, const EmbeddingNet& teacher,
                               const LabeledBatch& labeled, const UnlabeledBatch& unlabeled,
                               const TrainConfig& cfg, AdamState& opt);

// Distillation step with split input routing: the teacher consumes the
// clean inputs, the student the degraded ones.
StepTerms cross_quality_step(EmbeddingNet& student, const EmbeddingNet& teacher,
                             const LabeledBatch& routed, const TrainConfig& cfg, AdamState& opt,
                             const TeacherAudit* audit = nullptr);

struct EpochRecord {
    std::size_t epoch = 0;
    double loss_total = 0.0, loss_ml = 0.0, loss_kd = 0.0, loss_hint = 0.0, loss_at = 0.0;
    double val_recall1 = 0.0;
    std::int64_t wall_ms = 0;
};

std::string format_epoch_record(const EpochRecord& r);

// Field-wise equality of everything except wall-clock time.
bool records_equal_ignoring_time(const std::vector<EpochRecord>& a,
                                 const std::vector<EpochRecord>& b);

struct TrainResult {
    EmbeddingNet net;
    std::vector<EpochRecord> log;
    std::size_t best_epoch = 0;       // epoch with the highest validation recall
    double best_val_recall1 = 0.0;
};

// Trains a network from scratch with the triplet loss (cfg.mode must be
// Baseline). Per-epoch records stream to `log_sink` when given, flushed
// per epoch.
TrainResult train_teacher(const Dataset& ds, const NetConfig& net_config,
                          const TrainConfig& cfg, std::ostream* log_sink = nullptr);

// Trains a student under a frozen teacher according to cfg.mode and the
// optional semi-supervised / cross-quality settings.
TrainResult distill_student(const EmbeddingNet& teacher, const Dataset& ds,
                            const NetConfig& student_config, const TrainConfig& cfg,
                            std::ostream* log_sink = nullptr,
                            const TeacherAudit* audit = nullptr);

// Stacks dataset samples (by index) into one batch tensor.
Tensor stack_samples(const Dataset& ds, const std::vector<std::size_t>& indices);

// Recall@1 of a net over the given dataset indices; inputs taken from
// `degraded` when non-null. Returns NaN when the index set cannot support
// retrieval (fewer than 2 samples or singleton classes).
double eval_recall1(const EmbeddingNet& net, const Dataset& ds,
                    const std::vector<std::size_t>& indices,
                    const std::vector<Tensor>* degraded = nullptr);

}  // namespace mdist
