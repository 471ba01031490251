#include "mdist/tape.hpp"

#include <algorithm>
#include <cmath>

namespace mdist {

namespace {

void add_into(Tensor& acc, const Tensor& g) {
    for (std::size_t i = 0; i < acc.numel(); ++i) acc[i] += g[i];
}

double f_add(double a, double b) { return a + b; }
double f_sub(double a, double b) { return a - b; }
double f_mul(double a, double b) { return a * b; }
double f_div(double a, double b) { return a / b; }

}  // namespace

Tape::NodeId Tape::push(Tensor value, std::vector<NodeId> inputs,
                        std::function<void(const Tensor&, std::vector<Tensor>&)> back) {
    nodes_.push_back(Node{std::move(value), std::move(inputs), std::move(back)});
    return nodes_.size() - 1;
}

const Tensor& Tape::in(NodeId id, const char* op) const {
    if (id >= nodes_.size()) {
        throw Error(std::string(op) + ": node id " + std::to_string(id) + " not on this tape");
    }
    return nodes_[id].value;
}

Tape::NodeId Tape::leaf(Tensor v) { return push(std::move(v), {}, nullptr); }

const Tensor& Tape::value(NodeId id) const { return in(id, "value"); }

Tape::NodeId Tape::add(NodeId a, NodeId b) {
    const Tensor &va = in(a, "add"), &vb = in(b, "add");
    Tensor out = elementwise_binary(va, vb, "add", f_add);
    Shape sa = va.shape, sb = vb.shape;
    return push(std::move(out), {a, b}, [a, b, sa, sb](const Tensor& g, std::vector<Tensor>& gr) {
        add_into(gr[a], reduce_to_shape(g, sa));
        add_into(gr[b], reduce_to_shape(g, sb));
    });
}

Tape::NodeId Tape::sub(NodeId a, NodeId b) {
    const Tensor &va = in(a, "sub"), &vb = in(b, "sub");
    Tensor out = elementwise_binary(va, vb, "sub", f_sub);
    Shape sa = va.shape, sb = vb.shape;
    return push(std::move(out), {a, b}, [a, b, sa, sb](const Tensor& g, std::vector<Tensor>& gr) {
        add_into(gr[a], reduce_to_shape(g, sa));
        Tensor neg = g;
        for (double& v : neg.data) v = -v;
        add_into(gr[b], reduce_to_shape(neg, sb));
    });
}

Tape::NodeId Tape::mul(NodeId a, NodeId b) {
    const Tensor &va = in(a, "mul"), &vb = in(b, "mul");
    Tensor out = elementwise_binary(va, vb, "mul", f_mul);
    Tensor ca = va, cb = vb;
    return push(std::move(out), {a, b}, [a, b, ca, cb](const Tensor& g, std::vector<Tensor>& gr) {
        add_into(gr[a], reduce_to_shape(elementwise_binary(g, cb, "mul", f_mul), ca.shape));
        add_into(gr[b], reduce_to_shape(elementwise_binary(g, ca, "mul", f_mul), cb.shape));
    });
}

Tape::NodeId Tape::div(NodeId a, NodeId b) {
    const Tensor &va = in(a, "div"), &vb = in(b, "div");
    Tensor out = elementwise_binary(va, vb, "div", f_div);
    Tensor ca = va, cb = vb;
    return push(std::move(out), {a, b}, [a, b, ca, cb](const Tensor& g, std::vector<Tensor>& gr) {
        add_into(gr[a], reduce_to_shape(elementwise_binary(g, cb, "div", f_div), ca.shape));
        // d(a/b)/db = -a / b^2
        Tensor gb = elementwise_binary(elementwise_binary(g, ca, "div", f_mul), cb, "div",
                                       [](double x, double y) { return -x / (y * y); });
        add_into(gr[b], reduce_to_shape(gb, cb.shape));
    });
}

Tape::NodeId Tape::matmul(NodeId a, NodeId b) {
    const Tensor &va = in(a, "matmul"), &vb = in(b, "matmul");
    if (va.rank() != 2 || vb.rank() != 2 || va.shape[1] != vb.shape[0]) {
        throw Error("matmul: incompatible shapes " + shape_str(va.shape) + " and " +
                    shape_str(vb.shape));
    }
    const std::size_t m = va.shape[0], k = va.shape[1], n = vb.shape[1];
    Tensor out = Tensor::zeros({m, n});
    for (std::size_t i = 0; i < m; ++i) {
        for (std::size_t kk = 0; kk < k; ++kk) {
            const double aik = va[i * k + kk];
            const double* brow = &vb.data[kk * n];
            double* orow = &out.data[i * n];
            for (std::size_t j = 0; j < n; ++j) orow[j] += aik * brow[j];
        }
    }
    Tensor ca = va, cb = vb;
    return push(std::move(out), {a, b},
                [a, b, ca, cb, m, k, n](const Tensor& g, std::vector<Tensor>& gr) {
                    // dA = G * B^T
                    Tensor& ga = gr[a];
                    for (std::size_t i = 0; i < m; ++i) {
                        for (std::size_t j = 0; j < n; ++j) {
                            const double gij = g[i * n + j];
                            for (std::size_t kk = 0; kk < k; ++kk) {
                                ga[i * k + kk] += gij * cb[kk * n + j];
                            }
                        }
                    }
                    // dB = A^T * G
                    Tensor& gb = gr[b];
                    for (std::size_t kk = 0; kk < k; ++kk) {
                        for (std::size_t i = 0; i < m; ++i) {
                            const double aik = ca[i * k + kk];
                            const double* grow = &g.data[i * n];
                            double* gbrow = &gb.data[kk * n];
                            for (std::size_t j = 0; j < n; ++j) gbrow[j] += aik * grow[j];
                        }
                    }
                });
}

Tape::NodeId Tape::relu(NodeId a) {
    const Tensor& va = in(a, "relu");
    Tensor out = va;
    for (double& v : out.data) v = v > 0.0 ? v : 0.0;
    Tensor ca = va;
    return push(std::move(out), {a}, [a, ca](const Tensor& g, std::vector<Tensor>& gr) {
        Tensor& ga = gr[a];
        for (std::size_t i = 0; i < g.numel(); ++i) {
            if (ca[i] > 0.0) ga[i] += g[i];
        }
    });
}

Tape::NodeId Tape::square(NodeId a) {
    const Tensor& va = in(a, "square");
    Tensor out = va;
    for (double& v : out.data) v = v * v;
    Tensor ca = va;
    return push(std::move(out), {a}, [a, ca](const Tensor& g, std::vector<Tensor>& gr) {
        Tensor& ga = gr[a];
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += 2.0 * ca[i] * g[i];
    });
}

Tape::NodeId Tape::sqrt(NodeId a) {
    const Tensor& va = in(a, "sqrt");
    Tensor out = va;
    for (double& v : out.data) {
        if (v < 0.0) throw Error("sqrt: negative input " + std::to_string(v));
        v = std::sqrt(v);
    }
    Tensor cy = out;
    return push(std::move(out), {a}, [a, cy](const Tensor& g, std::vector<Tensor>& gr) {
        Tensor& ga = gr[a];
        for (std::size_t i = 0; i < g.numel(); ++i) ga[i] += g[i] / (2.0 * cy[i]);
    });
}

Tape::NodeId Tape::abs(NodeId a) {
    const Tensor& va = in(a, "abs");
    Tensor out = va;
    for (double& v : out.data) v = std::fabs(v);
    Tensor ca = va;
    return push(std::move(out), {a}, [a, ca](const Tensor& g, std::vector<Tensor>& gr) {
        Tensor& ga = gr[a];
        for (std::size_t i = 0; i < g.numel(); ++i) {
            // subgradient 0 at x == 0, matching the relu convention
            if (ca[i] > 0.0) ga[i] += g[i];
            else if (ca[i] < 0.0) ga[i] -= g[i];
        }
    });
}

Tape::NodeId Tape::sum(NodeId a, std::vector<std::size_t> axes) {
    const Tensor& va = in(a, "sum");
    Tensor out = reduce_sum_axes(va, axes);
    Shape sa = va.shape;
    return push(std::move(out), {a}, [a, sa, axes](const Tensor& g, std::vector<Tensor>& gr) {
        add_into(gr[a], unreduce_axes(g, sa, axes));
    });
}

Tape::NodeId Tape::mean(NodeId a, std::vector<std::size_t> axes) {
    const Tensor& va = in(a, "mean");
    Tensor out = reduce_sum_axes(va, axes);
    double count = static_cast<double>(va.numel()) / static_cast<double>(out.numel());
    for (double& v : out.data) v /= count;
    Shape sa = va.shape;
    return push(std::move(out), {a},
                [a, sa, axes, count](const Tensor& g, std::vector<Tensor>& gr) {
                    Tensor gs = g;
                    for (double& v : gs.data) v /= count;
                    add_into(gr[a], unreduce_axes(gs, sa, axes));
                });
}

Tape::NodeId Tape::sum_all(NodeId a) {
    std::vector<std::size_t> axes(in(a, "sum").rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return sum(a, axes);
}

Tape::NodeId Tape::mean_all(NodeId a) {
    std::vector<std::size_t> axes(in(a, "mean").rank());
    for (std::size_t i = 0; i < axes.size(); ++i) axes[i] = i;
    return mean(a, axes);
}

Tape::NodeId Tape::l2norm(NodeId a, std::size_t axis, double eps) {
    const Tensor& va = in(a, "l2norm");
    if (axis >= va.rank()) {
        throw Error("l2norm: axis " + std::to_string(axis) + " out of range for shape " +
                    shape_str(va.shape));
    }
    if (eps < 0.0) throw Error("l2norm: negative eps");
    Tensor sq = va;
    for (double& v : sq.data) v = v * v;
    Tensor out = reduce_sum_axes(sq, {axis});
    for (double& v : out.data) v = std::sqrt(v + eps);
    Tensor ca = va, cy = out;
    Shape sa = va.shape;
    return push(std::move(out), {a},
                [a, ca, cy, sa, axis](const Tensor& g, std::vector<Tensor>& gr) {
                    // dx = g * x / y, expanded over the reduced axis
                    Tensor gy = elementwise_binary(g, cy, "l2norm",
                                                   [](double gi, double yi) {
                                                       return yi == 0.0 ? 0.0 : gi / yi;
                                                   });
                    Tensor expanded = unreduce_axes(gy, sa, {axis});
                    Tensor& ga = gr[a];
                    for (std::size_t i = 0; i < ga.numel(); ++i) ga[i] += expanded[i] * ca[i];
                });
}

Tape::NodeId Tape::broadcast_to(NodeId a, Shape shape) {
    const Tensor& va = in(a, "broadcast");
    Shape check = broadcast_result_shape(va.shape, shape, "broadcast");
    if (check != shape) {
        throw Error("broadcast: cannot broadcast " + shape_str(va.shape) + " to " +
                    shape_str(shape));
    }
    Tensor out = elementwise_binary(va, Tensor::zeros(shape), "broadcast", f_add);
    Shape sa = va.shape;
    return push(std::move(out), {a}, [a, sa](const Tensor& g, std::vector<Tensor>& gr) {
        add_into(gr[a], reduce_to_shape(g, sa));
    });
}

Tape::NodeId Tape::gather_rows(NodeId a, std::vector<std::size_t> rows) {
    const Tensor& va = in(a, "gather_rows");
    if (va.rank() < 1) throw Error("gather_rows: scalar input");
    if (rows.empty()) throw Error("gather_rows: empty index set");
    const std::size_t nrows = va.shape[0];
    const std::size_t rowlen = va.numel() / nrows;
    for (std::size_t r : rows) {
        if (r >= nrows) {
            throw Error("gather_rows: index " + std::to_string(r) + " out of range for shape " +
                        shape_str(va.shape));
        }
    }
    Shape os = va.shape;
    os[0] = rows.size();
    Tensor out = Tensor::zeros(os);
    for (std::size_t i = 0; i < rows.size(); ++i) {
        std::copy_n(&va.data[rows[i] * rowlen], rowlen, &out.data[i * rowlen]);
    }
    return push(std::move(out), {a},
                [a, rows, rowlen](const Tensor& g, std::vector<Tensor>& gr) {
                    Tensor& ga = gr[a];
                    for (std::size_t i = 0; i < rows.size(); ++i) {
                        for (std::size_t j = 0; j < rowlen; ++j) {
                            ga[rows[i] * rowlen + j] += g[i * rowlen + j];
                        }
                    }
                });
}

Tape::NodeId Tape::reshape(NodeId a, Shape shape) {
    const Tensor& va = in(a, "reshape");
    if (shape_numel(shape) != va.numel()) {
        throw Error("reshape: cannot view " + shape_str(va.shape) + " as " + shape_str(shape));
    }
    Tensor out(shape, va.data);
    Shape sa = va.shape;
    return push(std::move(out), {a}, [a, sa](const Tensor& g, std::vector<Tensor>& gr) {
        Tensor gs(sa, g.data);
        add_into(gr[a], gs);
    });
}

Tape::NodeId Tape::conv2d(NodeId x, NodeId w, NodeId b, std::size_t stride) {
    const Tensor &vx = in(x, "conv2d"), &vw = in(w, "conv2d"), &vb = in(b, "conv2d");
    if (vx.rank() != 4) throw Error("conv2d: input must be BxCxHxW, got " + shape_str(vx.shape));
    if (vw.rank() != 4) throw Error("conv2d: weight must be OCxICxKxK, got " + shape_str(vw.shape));
    const std::size_t B = vx.shape[0], C = vx.shape[1], H = vx.shape[2], W = vx.shape[3];
    const std::size_t OC = vw.shape[0], IC = vw.shape[1], K = vw.shape[2];
    if (vw.shape[3] != K || K % 2 == 0) {
        throw Error("conv2d: kernel must be odd square, got " + shape_str(vw.shape));
    }
    if (IC != C) {
        throw Error("conv2d: input channels mismatch, input " + shape_str(vx.shape) +
                    " vs weight " + shape_str(vw.shape));
    }
    if (vb.rank() != 1 || vb.shape[0] != OC) {
        throw Error("conv2d: bias shape " + shape_str(vb.shape) + " wants [" +
                    std::to_string(OC) + "]");
    }
    if (stride != 1 && stride != 2) throw Error("conv2d: stride must be 1 or 2");
    const std::size_t pad = K / 2;
    const std::size_t OH = (H + 2 * pad - K) / stride + 1;
    const std::size_t OW = (W + 2 * pad - K) / stride + 1;

    Tensor out = Tensor::zeros({B, OC, OH, OW});
    auto xat = [&](std::size_t bi, std::size_t ci, long ih, long iw) -> double {
        if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) || iw >= static_cast<long>(W)) return 0.0;
        return vx[((bi * C + ci) * H + ih) * W + iw];
    };
    for (std::size_t bi = 0; bi < B; ++bi) {
        for (std::size_t oc = 0; oc < OC; ++oc) {
            for (std::size_t oh = 0; oh < OH; ++oh) {
                for (std::size_t ow = 0; ow < OW; ++ow) {
                    double acc = vb[oc];
                    for (std::size_t ci = 0; ci < C; ++ci) {
                        for (std::size_t kh = 0; kh < K; ++kh) {
                            for (std::size_t kw = 0; kw < K; ++kw) {
                                long ih = static_cast<long>(oh * stride + kh) - static_cast<long>(pad);
                                long iw = static_cast<long>(ow * stride + kw) - static_cast<long>(pad);
                                acc += xat(bi, ci, ih, iw) * vw[((oc * C + ci) * K + kh) * K + kw];
                            }
                        }
                    }
                    out[((bi * OC + oc) * OH + oh) * OW + ow] = acc;
                }
            }
        }
    }
    Tensor cx = vx, cw = vw;
    return push(std::move(out), {x, w, b},
                [x, w, b, cx, cw, B, C, H, W, OC, K, pad, stride, OH, OW](
                    const Tensor& g, std::vector<Tensor>& gr) {
                    Tensor &gx = gr[x], &gw = gr[w], &gb = gr[b];
                    for (std::size_t bi = 0; bi < B; ++bi) {
                        for (std::size_t oc = 0; oc < OC; ++oc) {
                            for (std::size_t oh = 0; oh < OH; ++oh) {
                                for (std::size_t ow = 0; ow < OW; ++ow) {
                                    const double go = g[((bi * OC + oc) * OH + oh) * OW + ow];
                                    gb[oc] += go;
                                    for (std::size_t ci = 0; ci < C; ++ci) {
                                        for (std::size_t kh = 0; kh < K; ++kh) {
                                            for (std::size_t kw = 0; kw < K; ++kw) {
                                                long ih = static_cast<long>(oh * stride + kh) -
                                                          static_cast<long>(pad);
                                                long iw = static_cast<long>(ow * stride + kw) -
                                                          static_cast<long>(pad);
                                                if (ih < 0 || iw < 0 || ih >= static_cast<long>(H) ||
                                                    iw >= static_cast<long>(W)) {
                                                    continue;
                                                }
                                                const std::size_t xi =
                                                    ((bi * C + ci) * H + ih) * W + iw;
                                                const std::size_t wi =
                                                    ((oc * C + ci) * K + kh) * K + kw;
                                                gx[xi] += go * cw[wi];
                                                gw[wi] += go * cx[xi];
                                            }
                                        }
                                    }
                                }
                            }
                        }
                    }
                });
}

Tape::NodeId Tape::global_avg_pool(NodeId x) {
    const Tensor& vx = in(x, "global_avg_pool");
    if (vx.rank() != 4) {
        throw Error("global_avg_pool: input must be BxCxHxW, got " + shape_str(vx.shape));
    }
    const std::size_t B = vx.shape[0], C = vx.shape[1], HW = vx.shape[2] * vx.shape[3];
    Tensor out = Tensor::zeros({B, C});
    for (std::size_t i = 0; i < B * C; ++i) {
        double acc = 0.0;
        for (std::size_t j = 0; j < HW; ++j) acc += vx[i * HW + j];
        out[i] = acc / static_cast<double>(HW);
    }
    return push(std::move(out), {x}, [x, B, C, HW](const Tensor& g, std::vector<Tensor>& gr) {
        Tensor& gx = gr[x];
        for (std::size_t i = 0; i < B * C; ++i) {
            const double gv = g[i] / static_cast<double>(HW);
            for (std::size_t j = 0; j < HW; ++j) gx[i * HW + j] += gv;
        }
    });
}

std::vector<Tensor> Tape::backward(NodeId root) const {
    const Tensor& rv = in(root, "backward");
    if (!rv.is_scalar()) {
        throw Error("backward: root must be scalar, got shape " + shape_str(rv.shape));
    }
    std::vector<Tensor> grads;
    grads.reserve(nodes_.size());
    for (const Node& n : nodes_) grads.push_back(Tensor::zeros(n.value.shape));
    grads[root][0] = 1.0;
    for (std::size_t id = root + 1; id-- > 0;) {
        const Node& n = nodes_[id];
        if (!n.back) continue;
        bool touched = false;
        for (double v : grads[id].data) {
            if (v != 0.0) {
                touched = true;
                break;
            }
        }
        if (!touched) continue;
        n.back(grads[id], grads);
    }
    return grads;
}

}  // namespace mdist
