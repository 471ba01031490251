#include "mdist/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <sstream>

namespace mdist {

std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) {
        if (i) os << ',';
        os << s[i];
    }
    os << ']';
    return os.str();
}

std::size_t shape_numel(const Shape& s) {
    std::size_t n = 1;
    for (std::size_t d : s) n *= d;
    return n;
}

Tensor::Tensor(Shape s, std::vector<double> d) : shape(std::move(s)), data(std::move(d)) {
    for (std::size_t d_ : shape) {
        if (d_ == 0) throw Error("tensor: zero-sized axis in shape " + shape_str(shape));
    }
    if (shape_numel(shape) != data.size()) {
        throw Error("tensor: shape " + shape_str(shape) + " wants " +
                    std::to_string(shape_numel(shape)) + " values, got " +
                    std::to_string(data.size()));
    }
}

Tensor Tensor::zeros(Shape s) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, 0.0));
}

Tensor Tensor::full(Shape s, double v) {
    std::size_t n = shape_numel(s);
    return Tensor(std::move(s), std::vector<double>(n, v));
}

Tensor Tensor::scalar(double v) { return Tensor({1}, {v}); }

double Tensor::scalar_value() const {
    if (!is_scalar()) throw Error("tensor: scalar_value on shape " + shape_str(shape));
    return data[0];
}

bool Tensor::all_finite() const {
    return std::all_of(data.begin(), data.end(), [](double v) { return std::isfinite(v); });
}

bool same_shape(const Tensor& a, const Tensor& b) { return a.shape == b.shape; }

std::vector<std::size_t> row_major_strides(const Shape& s) {
    std::vector<std::size_t> st(s.size());
    std::size_t acc = 1;
    for (std::size_t i = s.size(); i-- > 0;) {
        st[i] = acc;
        acc *= s[i];
    }
    return st;
}

Shape broadcast_result_shape(const Shape& a, const Shape& b, const char* op) {
    std::size_t ra = a.size(), rb = b.size();
    std::size_t r = std::max(ra, rb);
    Shape out(r);
    for (std::size_t i = 0; i < r; ++i) {
        std::size_t da = i < r - ra ? 1 : a[i - (r - ra)];
        std::size_t db = i < r - rb ? 1 : b[i - (r - rb)];
        if (da != db && da != 1 && db != 1) {
            throw Error(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " +
                        shape_str(b));
        }
        out[i] = std::max(da, db);
    }
    return out;
}

namespace {

// Strides of `in` aligned to broadcast shape `out`, 0 on broadcast axes.
std::vector<std::size_t> broadcast_strides(const Shape& in, const Shape& out) {
    std::vector<std::size_t> st_in = row_major_strides(in);
    std::vector<std::size_t> st(out.size(), 0);
    std::size_t off = out.size() - in.size();
    for (std::size_t i = 0; i < in.size(); ++i) {
        st[off + i] = in[i] == 1 ? 0 : st_in[i];
    }
    return st;
}

}  // namespace

Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op,
                          double (*f)(double, double)) {
    if (a.shape == b.shape) {  // fast path
        Tensor out = Tensor::zeros(a.shape);
        for (std::size_t i = 0; i < a.numel(); ++i) out[i] = f(a[i], b[i]);
        return out;
    }
    Shape os = broadcast_result_shape(a.shape, b.shape, op);
    Tensor out = Tensor::zeros(os);
    std::vector<std::size_t> ost = row_major_strides(os);
    std::vector<std::size_t> ast = broadcast_strides(a.shape, os);
    std::vector<std::size_t> bst = broadcast_strides(b.shape, os);
    std::size_t n = out.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, ia = 0, ib = 0;
        for (std::size_t d = 0; d < os.size(); ++d) {
            std::size_t c = rem / ost[d];
            rem %= ost[d];
            ia += c * ast[d];
            ib += c * bst[d];
        }
        out[flat] = f(a[ia], b[ib]);
    }
    return out;
}

Tensor reduce_to_shape(const Tensor& g, const Shape& target) {
    if (g.shape == target) return g;
    Tensor out = Tensor::zeros(target);
    std::vector<std::size_t> gst = row_major_strides(g.shape);
    std::vector<std::size_t> tst = broadcast_strides(target, g.shape);
    std::size_t n = g.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, it = 0;
        for (std::size_t d = 0; d < g.shape.size(); ++d) {
            std::size_t c = rem / gst[d];
            rem %= gst[d];
            it += c * tst[d];
        }
        out[it] += g[flat];
    }
    return out;
}

namespace {

void check_axes(const Shape& s, const std::vector<std::size_t>& axes) {
    for (std::size_t i = 0; i < axes.size(); ++i) {
        if (axes[i] >= s.size()) {
            throw Error("reduce: axis " + std::to_string(axes[i]) + " out of range for shape " +
                        shape_str(s));
        }
        for (std::size_t j = i + 1; j < axes.size(); ++j) {
            if (axes[i] == axes[j]) throw Error("reduce: duplicate axis " + std::to_string(axes[i]));
        }
    }
}

Shape removed_axes_shape(const Shape& s, const std::vector<std::size_t>& axes) {
    Shape out;
    for (std::size_t d = 0; d < s.size(); ++d) {
        if (std::find(axes.begin(), axes.end(), d) == axes.end()) out.push_back(s[d]);
    }
    if (out.empty()) out.push_back(1);  // full reduction yields a scalar
    return out;
}

}  // namespace

Tensor reduce_sum_axes(const Tensor& x, const std::vector<std::size_t>& axes) {
    check_axes(x.shape, axes);
    if (axes.size() == x.rank()) {
        double acc = 0.0;
        for (double v : x.data) acc += v;
        return Tensor::scalar(acc);
    }
    Shape os = removed_axes_shape(x.shape, axes);
    Tensor out = Tensor::zeros(os);
    std::vector<std::size_t> xst = row_major_strides(x.shape);
    std::vector<std::size_t> ost = row_major_strides(os);
    std::size_t n = x.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, io = 0, od = 0;
        for (std::size_t d = 0; d < x.rank(); ++d) {
            std::size_t c = rem / xst[d];
            rem %= xst[d];
            if (std::find(axes.begin(), axes.end(), d) == axes.end()) {
                io += c * ost[od];
                ++od;
            }
        }
        out[io] += x[flat];
    }
    return out;
}

Tensor unreduce_axes(const Tensor& g, const Shape& in_shape,
                     const std::vector<std::size_t>& axes) {
    check_axes(in_shape, axes);
    Tensor out = Tensor::zeros(in_shape);
    if (axes.size() == in_shape.size()) {
        double v = g.scalar_value();
        for (double& o : out.data) o = v;
        return out;
    }
    std::vector<std::size_t> ist = row_major_strides(in_shape);
    std::vector<std::size_t> gst = row_major_strides(g.shape);
    std::size_t n = out.numel();
    for (std::size_t flat = 0; flat < n; ++flat) {
        std::size_t rem = flat, ig = 0, gd = 0;
        for (std::size_t d = 0; d < in_shape.size(); ++d) {
            std::size_t c = rem / ist[d];
            rem %= ist[d];
            if (std::find(axes.begin(), axes.end(), d) == axes.end()) {
                ig += c * gst[gd];
                ++gd;
            }
        }
        out[flat] = g[ig];
    }
    return out;
}

}  // namespace mdist
