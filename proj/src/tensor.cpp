#include "logitshift/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <functional>
#include <numeric>
#include <sstream>
#include <stdexcept>

namespace logitshift {

std::string to_string(const Shape& shape)
{
    std::ostringstream out;
    out << '[';
    for (std::size_t i = 0; i < shape.size(); ++i) {
        if (i) out << 'x';
        out << shape[i];
    }
    out << ']';
    return out.str();
}

std::size_t element_count(const Shape& shape)
{
    return std::accumulate(shape.begin(), shape.end(), std::size_t{1}, std::multiplies<>());
}

namespace {

void check_dims(const Shape& shape)
{
    for (auto d : shape) {
        if (d == 0) throw std::invalid_argument("tensor dimensions must be positive, got " + to_string(shape));
    }
}

} // namespace

Tensor::Tensor(Shape shape, double fill)
    : shape_(std::move(shape))
{
    check_dims(shape_);
    data_.assign(element_count(shape_), fill);
}

Tensor::Tensor(Shape shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data))
{
    check_dims(shape_);
    if (element_count(shape_) != data_.size()) {
        throw std::invalid_argument("tensor shape " + to_string(shape_) + " needs " +
                                    std::to_string(element_count(shape_)) + " elements, got " +
                                    std::to_string(data_.size()));
    }
}

Tensor Tensor::vector(std::initializer_list<double> values)
{
    return vector(std::vector<double>(values));
}

Tensor Tensor::vector(std::vector<double> values)
{
    Shape shape{values.size()};
    return Tensor(std::move(shape), std::move(values));
}

Tensor Tensor::matrix(std::initializer_list<std::initializer_list<double>> rows)
{
    if (rows.size() == 0) throw std::invalid_argument("matrix needs at least one row");
    const std::size_t cols = rows.begin()->size();
    std::vector<double> data;
    data.reserve(rows.size() * cols);
    for (const auto& row : rows) {
        if (row.size() != cols) throw std::invalid_argument("matrix rows have unequal lengths");
        data.insert(data.end(), row.begin(), row.end());
    }
    return Tensor({rows.size(), cols}, std::move(data));
}

std::size_t Tensor::dim(std::size_t axis) const
{
    if (axis >= shape_.size()) {
        throw std::out_of_range("axis " + std::to_string(axis) + " out of range for shape " + to_string(shape_));
    }
    return shape_[axis];
}

Tensor Tensor::reshaped(Shape shape) const
{
    if (element_count(shape) != data_.size()) {
        throw std::invalid_argument("cannot reshape " + to_string(shape_) + " to " + to_string(shape));
    }
    return Tensor(std::move(shape), data_);
}

Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op)
{
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    std::vector<double> out(a.size());
    for (std::size_t i = 0; i < out.size(); ++i) {
        switch (op) {
        case ElementwiseOp::add: out[i] = a[i] + b[i]; break;
        case ElementwiseOp::sub: out[i] = a[i] - b[i]; break;
        case ElementwiseOp::mul: out[i] = a[i] * b[i]; break;
        }
    }
    return Tensor(a.shape(), std::move(out));
}

Tensor add(const Tensor& a, const Tensor& b) { return elementwise(a, b, ElementwiseOp::add); }
Tensor sub(const Tensor& a, const Tensor& b) { return elementwise(a, b, ElementwiseOp::sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return elementwise(a, b, ElementwiseOp::mul); }

Tensor scale(const Tensor& t, double factor)
{
    std::vector<double> out(t.values());
    for (auto& v : out) v *= factor;
    return Tensor(t.shape(), std::move(out));
}

Tensor reduce_sum(const Tensor& t, const std::set<std::size_t>& axes)
{
    if (axes.empty()) return t;
    for (auto axis : axes) {
        if (axis >= t.rank()) {
            throw std::out_of_range("reduce axis " + std::to_string(axis) + " out of range for shape " +
                                    to_string(t.shape()));
        }
    }

    Shape out_shape;
    for (std::size_t axis = 0; axis < t.rank(); ++axis) {
        if (!axes.contains(axis)) out_shape.push_back(t.shape()[axis]);
    }
    std::vector<double> out(element_count(out_shape), 0.0);

    // Walk the flat index with a coordinate counter; kept axes map to the output.
    std::vector<std::size_t> coord(t.rank(), 0);
    for (std::size_t flat = 0; flat < t.size(); ++flat) {
        std::size_t o = 0;
        for (std::size_t axis = 0; axis < t.rank(); ++axis) {
            if (!axes.contains(axis)) o = o * t.shape()[axis] + coord[axis];
        }
        out[o] += t[flat];
        for (std::size_t axis = t.rank(); axis-- > 0;) {
            if (++coord[axis] < t.shape()[axis]) break;
            coord[axis] = 0;
        }
    }
    return Tensor(std::move(out_shape), std::move(out));
}

std::size_t argmax_flat(const Tensor& t)
{
    if (t.empty()) throw std::invalid_argument("argmax of an empty tensor");
    std::size_t best = 0;
    for (std::size_t i = 1; i < t.size(); ++i) {
        if (t[i] > t[best]) best = i;
    }
    return best;
}

double max_abs(const Tensor& t)
{
    double m = 0.0;
    for (double v : t.data()) m = std::max(m, std::abs(v));
    return m;
}

double max_abs_diff(const Tensor& a, const Tensor& b)
{
    if (a.shape() != b.shape()) {
        throw std::invalid_argument("shape mismatch: " + to_string(a.shape()) + " vs " + to_string(b.shape()));
    }
    double m = 0.0;
    for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
    return m;
}

} // namespace logitshift
