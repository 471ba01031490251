#include "mdist/check_battery.hpp"

#include <cmath>

#include "mdist/grad_check.hpp"
#include "mdist/losses.hpp"
#include "mdist/net.hpp"
#include "mdist/rng.hpp"
#include "mdist/sampling.hpp"

namespace mdist {

namespace {

// Random values bounded away from zero so relu/abs kinks are not sampled.
Tensor rough_tensor(Rng& rng, Shape shape, double lo = 0.2, double hi = 1.5) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) {
        double mag = rng.uniform(lo, hi);
        v = rng.uniform() < 0.5 ? -mag : mag;
    }
    return t;
}

Tensor positive_tensor(Rng& rng, Shape shape, double lo = 0.3, double hi = 2.0) {
    Tensor t = Tensor::zeros(std::move(shape));
    for (double& v : t.data) v = rng.uniform(lo, hi);
    return t;
}

constexpr double kPrimitiveTol = 1e-5;
constexpr double kLossTol = 1e-4;

struct Battery {
    std::size_t trials;
    double tol = kPrimitiveTol;  // applies to the next check() calls
    Rng rng;
    std::vector<CheckResult> results;

    Battery(std::size_t trials_, std::uint64_t seed) : trials(trials_), rng(seed) {}

    template <typename MakePoint, typename MakeFn>
    void check(const std::string& name, MakePoint make_point, MakeFn make_fn) {
        CheckResult res;
        res.name = name;
        res.trials = trials;
        res.tolerance = tol;
        res.pass = true;
        for (std::size_t k = 0; k < trials; ++k) {
            Tensor point = make_point(rng);
            ScalarFn f = make_fn(rng);
            GradCheckResult g = grad_check(f, point, 1e-5);
            if (!g.finite) {
                res.pass = false;
                res.detail = g.message;
                res.max_rel_error = g.max_rel_error;
                break;
            }
            if (g.max_rel_error > res.max_rel_error) res.max_rel_error = g.max_rel_error;
        }
        if (res.max_rel_error >= tol) res.pass = false;
        results.push_back(res);
    }
};

// Sum-of-elements wrapper so any tensor-valued op becomes scalar-valued.
ScalarFn summed(std::function<Tape::NodeId(Tape&, Tape::NodeId)> g) {
    return [g](Tape& t, Tape::NodeId x) { return t.sum_all(g(t, x)); };
}

void add_primitive_checks(Battery& b) {
    auto point_3x4 = [](Rng& r) { return rough_tensor(r, {3, 4}); };

    b.check("primitive.add", point_3x4, [](Rng& r) {
        Tensor other = rough_tensor(r, {3, 4});
        return summed([other](Tape& t, Tape::NodeId x) { return t.add(x, t.leaf(other)); });
    });
    b.check("primitive.sub", point_3x4, [](Rng& r) {
        Tensor other = rough_tensor(r, {3, 4});
        return summed([other](Tape& t, Tape::NodeId x) { return t.sub(t.leaf(other), x); });
    });
    b.check("primitive.mul", point_3x4, [](Rng& r) {
        Tensor other = rough_tensor(r, {4});  // broadcast over rows
        return summed([other](Tape& t, Tape::NodeId x) { return t.mul(x, t.leaf(other)); });
    });
    b.check("primitive.div", point_3x4, [](Rng& r) {
        Tensor denom = positive_tensor(r, {3, 4});
        return summed([denom](Tape& t, Tape::NodeId x) { return t.div(x, t.leaf(denom)); });
    });
    b.check("primitive.div_denominator", [](Rng& r) { return positive_tensor(r, {3, 4}); },
            [](Rng& r) {
                Tensor num = rough_tensor(r, {3, 4});
                return summed([num](Tape& t, Tape::NodeId x) { return t.div(t.leaf(num), x); });
            });
    b.check("primitive.matmul", point_3x4, [](Rng& r) {
        Tensor other = rough_tensor(r, {4, 5});
        return summed([other](Tape& t, Tape::NodeId x) { return t.matmul(x, t.leaf(other)); });
    });
    b.check("primitive.relu", point_3x4, [](Rng&) {
        return summed([](Tape& t, Tape::NodeId x) { return t.relu(x); });
    });
    b.check("primitive.square", point_3x4, [](Rng&) {
        return summed([](Tape& t, Tape::NodeId x) { return t.square(x); });
    });
    b.check("primitive.sqrt", [](Rng& r) { return positive_tensor(r, {3, 4}); }, [](Rng&) {
        return summed([](Tape& t, Tape::NodeId x) { return t.sqrt(x); });
    });
    b.check("primitive.abs", point_3x4, [](Rng&) {
        return summed([](Tape& t, Tape::NodeId x) { return t.abs(x); });
    });
    b.check("primitive.sum_axis", [](Rng& r) { return rough_tensor(r, {2, 3, 4}); }, [](Rng& r) {
        Tensor w = rough_tensor(r, {2, 4});
        return summed([w](Tape& t, Tape::NodeId x) { return t.mul(t.sum(x, {1}), t.leaf(w)); });
    });
    b.check("primitive.mean_axis", [](Rng& r) { return rough_tensor(r, {2, 3, 4}); },
            [](Rng& r) {
                Tensor w = rough_tensor(r, {3, 4});
                return summed(
                    [w](Tape& t, Tape::NodeId x) { return t.mul(t.mean(x, {0}), t.leaf(w)); });
            });
    b.check("primitive.l2norm", point_3x4, [](Rng& r) {
        Tensor w = rough_tensor(r, {3});
        return summed(
            [w](Tape& t, Tape::NodeId x) { return t.mul(t.l2norm(x, 1, 1e-12), t.leaf(w)); });
    });
    b.check("primitive.broadcast", [](Rng& r) { return rough_tensor(r, {1}); }, [](Rng& r) {
        Tensor w = rough_tensor(r, {2, 3});
        return summed([w](Tape& t, Tape::NodeId x) {
            return t.mul(t.broadcast_to(x, {2, 3}), t.leaf(w));
        });
    });
    b.check("primitive.gather_rows", [](Rng& r) { return rough_tensor(r, {5, 3}); }, [](Rng& r) {
        std::vector<std::size_t> rows = {r.below(5), r.below(5), r.below(5), r.below(5)};
        return summed([rows](Tape& t, Tape::NodeId x) {
            return t.square(t.gather_rows(x, rows));
        });
    });
    b.check("primitive.reshape", point_3x4, [](Rng& r) {
        Tensor w = rough_tensor(r, {12});
        return summed([w](Tape& t, Tape::NodeId x) { return t.mul(t.reshape(x, {12}), t.leaf(w)); });
    });
    b.check("primitive.conv2d", [](Rng& r) { return rough_tensor(r, {2, 2, 4, 4}); }, [](Rng& r) {
        Tensor w = rough_tensor(r, {3, 2, 3, 3}, 0.1, 0.5);
        Tensor bias = rough_tensor(r, {3}, 0.1, 0.5);
        return summed([w, bias](Tape& t, Tape::NodeId x) {
            return t.square(t.conv2d(x, t.leaf(w), t.leaf(bias), 2));
        });
    });
    b.check("primitive.conv2d_weights", [](Rng& r) { return rough_tensor(r, {3, 2, 3, 3}, 0.1, 0.5); },
            [](Rng& r) {
                Tensor x = rough_tensor(r, {2, 2, 4, 4});
                Tensor bias = rough_tensor(r, {3}, 0.1, 0.5);
                return summed([x, bias](Tape& t, Tape::NodeId w) {
                    return t.square(t.conv2d(t.leaf(x), w, t.leaf(bias), 1));
                });
            });
    b.check("primitive.global_avg_pool", [](Rng& r) { return rough_tensor(r, {2, 3, 4, 4}); },
            [](Rng& r) {
                Tensor w = rough_tensor(r, {2, 3});
                return summed([w](Tape& t, Tape::NodeId x) {
                    return t.mul(t.global_avg_pool(x), t.leaf(w));
                });
            });
}

void add_loss_checks(Battery& b) {
    const std::size_t D = 6;

    // rows 0..2 of the point are anchor/positive/negative; hinge kept active
    b.check("loss.triplet", [D](Rng& r) {
        for (;;) {
            Tensor p = rough_tensor(r, {3, D});
            double dp = 0, dn = 0;
            for (std::size_t k = 0; k < D; ++k) {
                dp += (p[k] - p[D + k]) * (p[k] - p[D + k]);
                dn += (p[k] - p[2 * D + k]) * (p[k] - p[2 * D + k]);
            }
            double margin_term = std::sqrt(dp) - std::sqrt(dn) + 0.5;
            if (std::fabs(margin_term) > 0.05) return p;
        }
    }, [](Rng&) {
        return ScalarFn([](Tape& t, Tape::NodeId x) {
            Tape::NodeId a = t.gather_rows(x, {0});
            Tape::NodeId p = t.gather_rows(x, {1});
            Tape::NodeId n = t.gather_rows(x, {2});
            return triplet_loss(t, a, p, n, 0.5);
        });
    });

    // rows 0..B-1 student, rows B..2B-1 teacher
    const std::size_t B = 4;
    b.check("loss.kd_abs", [B, D](Rng& r) { return rough_tensor(r, {2 * B, D}); }, [B](Rng&) {
        return ScalarFn([B](Tape& t, Tape::NodeId x) {
            std::vector<std::size_t> s, te;
            for (std::size_t i = 0; i < B; ++i) {
                s.push_back(i);
                te.push_back(B + i);
            }
            return kd_abs_loss(t, t.gather_rows(x, s), t.gather_rows(x, te));
        });
    });
    b.check("loss.kd_rel", [B, D](Rng& r) { return rough_tensor(r, {2 * B, D}); }, [B](Rng&) {
        return ScalarFn([B](Tape& t, Tape::NodeId x) {
            std::vector<std::size_t> s, te;
            for (std::size_t i = 0; i < B; ++i) {
                s.push_back(i);
                te.push_back(B + i);
            }
            return kd_rel_loss(t, t.gather_rows(x, s), t.gather_rows(x, te),
                               enumerate_pairs(B));
        });
    });
    b.check("loss.hint", [](Rng& r) { return rough_tensor(r, {2, 2, 3, 3}); }, [](Rng&) {
        return ScalarFn([](Tape& t, Tape::NodeId x) {
            Tape::NodeId s = t.reshape(t.gather_rows(x, {0}), {1, 2, 3, 3});
            Tape::NodeId te = t.reshape(t.gather_rows(x, {1}), {1, 2, 3, 3});
            return hint_loss(t, {{s, te, "check"}});
        });
    });
    b.check("loss.attention_map", [](Rng& r) { return rough_tensor(r, {3, 4, 4}); }, [](Rng& r) {
        Tensor w = rough_tensor(r, {4, 4});
        return summed(
            [w](Tape& t, Tape::NodeId x) { return t.mul(attention_map(t, x), t.leaf(w)); });
    });
    b.check("loss.attention", [](Rng& r) { return rough_tensor(r, {2, 4, 4}); }, [](Rng&) {
        return ScalarFn([](Tape& t, Tape::NodeId x) {
            Tape::NodeId s = t.reshape(t.gather_rows(x, {0}), {4, 4});
            Tape::NodeId te = t.reshape(t.gather_rows(x, {1}), {4, 4});
            return attention_loss(t, s, te);
        });
    });

    // combined objective over a student embedding matrix with frozen
    // teacher values and pre-mined triplet structure
    b.check("loss.total", [B, D](Rng& r) {
        for (;;) {
            Tensor p = rough_tensor(r, {B, D});
            // anchors 0/1 same class, 2/3 same class; keep both hinges off the boundary
            auto dist = [&](std::size_t i, std::size_t j) {
                double acc = 0;
                for (std::size_t k = 0; k < D; ++k) {
                    acc += (p[i * D + k] - p[j * D + k]) * (p[i * D + k] - p[j * D + k]);
                }
                return std::sqrt(acc);
            };
            if (std::fabs(dist(0, 1) - dist(0, 2) + 0.4) > 0.05 &&
                std::fabs(dist(2, 3) - dist(2, 0) + 0.4) > 0.05) {
                return p;
            }
        }
    }, [B, D](Rng& r) {
        Tensor teacher = rough_tensor(r, {B, D});
        return ScalarFn([teacher, B](Tape& t, Tape::NodeId x) {
            LossWeights w;
            w.margin_m = 0.4;
            w.lambda = 3.0;
            LossTerms terms;
            terms.ml = triplet_loss_batch(t, x, {{0, 1, 2}, {2, 3, 0}}, w.margin_m);
            terms.kd = kd_rel_loss(t, x, t.leaf(teacher), enumerate_pairs(B));
            return total_loss(t, terms, w);
        });
    });
}

// Gradient of sum(embeddings) w.r.t. one named parameter of a network.
void add_net_checks(Battery& b, const std::string& label, const NetConfig& config,
                    const Tensor& batch_template) {
    EmbeddingNet proto = init_params(config, 1234);
    for (const auto& [pname, ptensor] : proto.params) {
        Shape pshape = ptensor.shape;
        b.check("net." + label + "." + pname,
                [pshape](Rng& r) { return rough_tensor(r, pshape, 0.05, 0.6); },
                [&proto, pname, batch_template](Rng& r) {
                    Tensor batch = batch_template;
                    for (double& v : batch.data) v = r.uniform(-1.2, 1.2);
                    // fresh surrounding params each trial
                    EmbeddingNet net = proto;
                    for (auto& [n2, t2] : net.params) {
                        for (double& v : t2.data) v = r.uniform(-0.6, 0.6);
                    }
                    return ScalarFn([net, pname, batch](Tape& t, Tape::NodeId x) {
                        std::map<std::string, Tape::NodeId> ids;
                        for (const auto& [n2, t2] : net.params) {
                            ids[n2] = n2 == pname ? x : t.leaf(t2);
                        }
                        TapeForward fw = forward_on_tape(net, t, ids, t.leaf(batch));
                        return t.sum_all(fw.embeddings);
                    });
                });
    }
}

}  // namespace

std::vector<CheckResult> run_gradient_battery(std::size_t trials, std::uint64_t seed) {
    Battery b(trials, seed);
    b.tol = kPrimitiveTol;
    add_primitive_checks(b);
    b.tol = kLossTol;
    add_loss_checks(b);

    NetConfig vec_cfg;
    vec_cfg.input = InputKind::vector(5);
    vec_cfg.layers = {LayerSpec::affine(7), LayerSpec::affine(4)};
    vec_cfg.embedding_dim = 4;
    add_net_checks(b, "vector", vec_cfg, Tensor::zeros({3, 5}));

    NetConfig norm_cfg = vec_cfg;
    norm_cfg.l2_normalize = true;
    add_net_checks(b, "vector_l2norm", norm_cfg, Tensor::zeros({3, 5}));

    NetConfig grid_cfg;
    grid_cfg.input = InputKind::grid(4, 4, 2);
    grid_cfg.layers = {LayerSpec::conv(3, 3, 1), LayerSpec::conv(4, 3, 2), LayerSpec::gap(),
                       LayerSpec::affine(4)};
    grid_cfg.embedding_dim = 4;
    add_net_checks(b, "conv", grid_cfg, Tensor::zeros({2, 2, 4, 4}));

    return b.results;
}

}  // namespace mdist
