#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace mdist {

// Domain error (shape/value/io violations). The CLI maps these to exit code 3.
class Error : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

// Configuration/usage error. The CLI maps these to exit code 2.
class ConfigError : public std::runtime_error {
public:
    using std::runtime_error::runtime_error;
};

using Shape = std::vector<std::size_t>;

std::string shape_str(const Shape& s);
std::size_t shape_numel(const Shape& s);

// Dense row-major tensor of 64-bit floats. The unit of all computation
// and differentiation in this library.
struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    Tensor(Shape s, std::vector<double> d);

    static Tensor zeros(Shape s);
    static Tensor full(Shape s, double v);
    static Tensor scalar(double v);

    std::size_t numel() const { return data.size(); }
    std::size_t rank() const { return shape.size(); }
    bool is_scalar() const { return numel() == 1; }
    double scalar_value() const;
    bool all_finite() const;

    double operator[](std::size_t i) const { return data[i]; }
    double& operator[](std::size_t i) { return data[i]; }

    bool operator==(const Tensor& o) const { return shape == o.shape && data == o.data; }
};

bool same_shape(const Tensor& a, const Tensor& b);

// Row-major strides for a shape.
std::vector<std::size_t> row_major_strides(const Shape& s);

// NumPy-style trailing-axis broadcast of two shapes. Throws Error naming
// `op` on mismatch.
Shape broadcast_result_shape(const Shape& a, const Shape& b, const char* op);

// Elementwise binary op with trailing-axis broadcasting.
Tensor elementwise_binary(const Tensor& a, const Tensor& b, const char* op,
                          double (*f)(double, double));

// Sum `g` down to `target` shape (the adjoint of broadcasting).
Tensor reduce_to_shape(const Tensor& g, const Shape& target);

// Sum over the given axes (axes removed from the output shape).
Tensor reduce_sum_axes(const Tensor& x, const std::vector<std::size_t>& axes);

// Adjoint of reduce_sum_axes: spread `g` back over the removed axes.
Tensor unreduce_axes(const Tensor& g, const Shape& in_shape,
                     const std::vector<std::size_t>& axes);

}  // namespace mdist
