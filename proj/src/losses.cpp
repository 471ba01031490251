#include "mdist/losses.hpp"

#include <cmath>

namespace mdist {

void validate_weights(const LossWeights& w) {
    auto check = [](double v, const char* name) {
        if (!(v >= 0.0) || !std::isfinite(v)) {
            throw Error(std::string("loss weights: ") + name + " must be non-negative and finite");
        }
    };
    check(w.margin_m, "margin_m");
    check(w.lambda, "lambda");
    check(w.mu, "mu");
    check(w.kappa, "kappa");
}

Tape::NodeId row_distances(Tape& t, Tape::NodeId a, Tape::NodeId b, bool squared) {
    const Tensor &va = t.value(a), &vb = t.value(b);
    if (va.shape != vb.shape || va.rank() != 2) {
        throw Error("row_distances: shapes " + shape_str(va.shape) + " and " +
                    shape_str(vb.shape) + " must be equal rank-2");
    }
    Tape::NodeId diff = t.sub(a, b);
    if (squared) return t.sum(t.square(diff), {1});
    return t.l2norm(diff, 1, kDistanceEps);
}

namespace {

// D-vector to 1 x D so the row helpers apply.
Tape::NodeId as_row(Tape& t, Tape::NodeId v, const char* op) {
    const Tensor& tv = t.value(v);
    if (tv.rank() == 1) return t.reshape(v, {1, tv.shape[0]});
    if (tv.rank() == 2 && tv.shape[0] == 1) return v;
    throw Error(std::string(op) + ": expected a vector, got shape " + shape_str(tv.shape));
}

}  // namespace

Tape::NodeId triplet_loss(Tape& t, Tape::NodeId anchor, Tape::NodeId positive,
                          Tape::NodeId negative, double margin, bool squared) {
    const Tensor &a = t.value(anchor), &p = t.value(positive), &n = t.value(negative);
    if (a.shape != p.shape || a.shape != n.shape) {
        throw Error("triplet_loss: dim mismatch, anchor " + shape_str(a.shape) + ", positive " +
                    shape_str(p.shape) + ", negative " + shape_str(n.shape));
    }
    Tape::NodeId ar = as_row(t, anchor, "triplet_loss");
    Tape::NodeId pr = as_row(t, positive, "triplet_loss");
    Tape::NodeId nr = as_row(t, negative, "triplet_loss");
    Tape::NodeId dpos = row_distances(t, ar, pr, squared);
    Tape::NodeId dneg = row_distances(t, ar, nr, squared);
    Tape::NodeId hinge = t.relu(t.add(t.sub(dpos, dneg), t.constant(margin)));
    return t.reshape(hinge, {1});
}

Tape::NodeId triplet_loss_batch(Tape& t, Tape::NodeId embeddings,
                                const std::vector<TripletIdx>& triplets, double margin,
                                bool squared) {
    if (triplets.empty()) throw Error("triplet_loss_batch: empty triplet set");
    const Tensor& emb = t.value(embeddings);
    if (emb.rank() != 2) {
        throw Error("triplet_loss_batch: embeddings must be BxD, got " + shape_str(emb.shape));
    }
    std::vector<std::size_t> ai, pi, ni;
    ai.reserve(triplets.size());
    pi.reserve(triplets.size());
    ni.reserve(triplets.size());
    for (const TripletIdx& tr : triplets) {
        ai.push_back(tr.anchor);
        pi.push_back(tr.positive);
        ni.push_back(tr.negative);
    }
    Tape::NodeId a = t.gather_rows(embeddings, ai);
    Tape::NodeId p = t.gather_rows(embeddings, pi);
    Tape::NodeId n = t.gather_rows(embeddings, ni);
    Tape::NodeId dpos = row_distances(t, a, p, squared);
    Tape::NodeId dneg = row_distances(t, a, n, squared);
    Tape::NodeId hinge = t.relu(t.add(t.sub(dpos, dneg), t.constant(margin)));
    return t.mean_all(hinge);
}

Tape::NodeId kd_abs_loss(Tape& t, Tape::NodeId student, Tape::NodeId teacher, bool squared) {
    const Tensor &s = t.value(student), &te = t.value(teacher);
    if (s.shape != te.shape) {
        throw Error("kd_abs_loss: shape mismatch, student " + shape_str(s.shape) + " vs teacher " +
                    shape_str(te.shape));
    }
    return t.mean_all(row_distances(t, student, teacher, squared));
}

Tape::NodeId kd_rel_loss(Tape& t, Tape::NodeId student, Tape::NodeId teacher,
                         const std::vector<PairIdx>& pairs, bool squared) {
    const Tensor &s = t.value(student), &te = t.value(teacher);
    if (s.rank() != 2 || te.rank() != 2 || s.shape[0] != te.shape[0]) {
        throw Error("kd_rel_loss: student " + shape_str(s.shape) + " and teacher " +
                    shape_str(te.shape) + " must be rank-2 with equal batch size");
    }
    if (pairs.empty()) throw Error("kd_rel_loss: empty pair set");
    const std::size_t B = s.shape[0];
    std::vector<std::size_t> firsts, seconds;
    firsts.reserve(pairs.size());
    seconds.reserve(pairs.size());
    for (const PairIdx& p : pairs) {
        if (p.i >= B || p.j >= B) {
            throw Error("kd_rel_loss: pair (" + std::to_string(p.i) + "," + std::to_string(p.j) +
                        ") out of range for batch size " + std::to_string(B));
        }
        if (p.i == p.j) {
            throw Error("kd_rel_loss: degenerate pair (" + std::to_string(p.i) + "," +
                        std::to_string(p.j) + ")");
        }
        firsts.push_back(p.i);
        seconds.push_back(p.j);
    }
    Tape::NodeId ds = row_distances(t, t.gather_rows(student, firsts),
                                    t.gather_rows(student, seconds), squared);
    Tape::NodeId dt = row_distances(t, t.gather_rows(teacher, firsts),
                                    t.gather_rows(teacher, seconds), squared);
    return t.mean_all(t.abs(t.sub(ds, dt)));
}

Tape::NodeId hint_loss(Tape& t, const std::vector<HintPair>& pairs) {
    if (pairs.empty()) throw Error("hint_loss: empty tap pair set");
    Tape::NodeId acc = 0;
    bool first = true;
    for (const HintPair& hp : pairs) {
        const Tensor &s = t.value(hp.student), &te = t.value(hp.teacher);
        if (s.shape != te.shape) {
            throw Error("hint_loss: pair '" + hp.name + "' shape mismatch, student " +
                        shape_str(s.shape) + " vs teacher " + shape_str(te.shape));
        }
        const std::size_t B = s.shape[0];
        const std::size_t K = s.numel() / B;
        Tape::NodeId diff = t.reshape(t.sub(hp.student, hp.teacher), {B, K});
        Tape::NodeId per_sample = t.l2norm(diff, 1, kDistanceEps);
        Tape::NodeId pair_mean = t.mean_all(per_sample);
        acc = first ? pair_mean : t.add(acc, pair_mean);
        first = false;
    }
    if (pairs.size() > 1) {
        acc = t.div(acc, t.constant(static_cast<double>(pairs.size())));
    }
    return acc;
}

Tape::NodeId attention_map(Tape& t, Tape::NodeId feature_map) {
    const Tensor& f = t.value(feature_map);
    if (f.rank() == 3) return t.sum(t.square(feature_map), {0});
    if (f.rank() == 4) return t.sum(t.square(feature_map), {1});
    throw Error("attention_map: expected CxHxW or BxCxHxW, got " + shape_str(f.shape));
}

namespace {

// Normalize a batch of flattened maps (B x K) by per-row L2 norm. Rejects
// zero-norm rows.
Tape::NodeId normalize_rows(Tape& t, Tape::NodeId maps, const char* who) {
    const Tensor& m = t.value(maps);
    const std::size_t B = m.shape[0];
    Tape::NodeId norms = t.l2norm(maps, 1, 0.0);
    const Tensor& nv = t.value(norms);
    for (std::size_t i = 0; i < nv.numel(); ++i) {
        if (nv[i] == 0.0) {
            throw Error(std::string(who) + ": zero-norm attention map (sample " +
                        std::to_string(i) + ")");
        }
    }
    return t.div(maps, t.reshape(norms, {B, 1}));
}

}  // namespace

Tape::NodeId attention_loss(Tape& t, Tape::NodeId student_map, Tape::NodeId teacher_map) {
    const Tensor &s = t.value(student_map), &te = t.value(teacher_map);
    if (s.shape != te.shape || s.rank() != 2) {
        throw Error("attention_loss: maps must be equal-shape HxW, got " + shape_str(s.shape) +
                    " and " + shape_str(te.shape));
    }
    const std::size_t K = s.numel();
    Tape::NodeId sn = normalize_rows(t, t.reshape(student_map, {1, K}), "attention_loss");
    Tape::NodeId tn = normalize_rows(t, t.reshape(teacher_map, {1, K}), "attention_loss");
    return t.reshape(t.l2norm(t.sub(sn, tn), 1, kDistanceEps), {1});
}

Tape::NodeId attention_loss_batch(Tape& t, Tape::NodeId student_features,
                                  Tape::NodeId teacher_features) {
    const Tensor &s = t.value(student_features), &te = t.value(teacher_features);
    if (s.rank() != 4 || te.rank() != 4) {
        throw Error("attention_loss: feature maps must be BxCxHxW, got " + shape_str(s.shape) +
                    " and " + shape_str(te.shape));
    }
    if (s.shape[0] != te.shape[0] || s.shape[2] != te.shape[2] || s.shape[3] != te.shape[3]) {
        throw Error("attention_loss: spatial shape mismatch, student " + shape_str(s.shape) +
                    " vs teacher " + shape_str(te.shape));
    }
    const std::size_t B = s.shape[0];
    const std::size_t K = s.shape[2] * s.shape[3];
    Tape::NodeId smap = t.reshape(attention_map(t, student_features), {B, K});
    Tape::NodeId tmap = t.reshape(attention_map(t, teacher_features), {B, K});
    Tape::NodeId sn = normalize_rows(t, smap, "attention_loss");
    Tape::NodeId tn = normalize_rows(t, tmap, "attention_loss");
    return t.mean_all(t.l2norm(t.sub(sn, tn), 1, kDistanceEps));
}

Tape::NodeId total_loss(Tape& t, const LossTerms& terms, const LossWeights& w) {
    validate_weights(w);
    if (w.lambda > 0.0 && !terms.kd) {
        throw Error("total_loss: distillation weight set but no kd term (teacher missing)");
    }
    if (w.mu > 0.0 && !terms.hint) {
        throw Error("total_loss: hint weight set but no hint term");
    }
    if (w.kappa > 0.0 && !terms.at) {
        throw Error("total_loss: attention weight set but no attention term");
    }
    std::optional<Tape::NodeId> acc;
    auto accumulate = [&](Tape::NodeId node) {
        acc = acc ? t.add(*acc, node) : node;
    };
    if (terms.ml) accumulate(*terms.ml);
    if (terms.kd && w.lambda > 0.0) accumulate(t.mul(t.constant(w.lambda), *terms.kd));
    if (terms.hint && w.mu > 0.0) accumulate(t.mul(t.constant(w.mu), *terms.hint));
    if (terms.at && w.kappa > 0.0) accumulate(t.mul(t.constant(w.kappa), *terms.at));
    if (!acc) throw Error("total_loss: no active loss terms");
    return *acc;
}

}  // namespace mdist
