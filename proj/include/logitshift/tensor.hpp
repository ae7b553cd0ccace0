#ifndef LOGITSHIFT_TENSOR_HPP
#define LOGITSHIFT_TENSOR_HPP

#include <cstddef>
#include <initializer_list>
#include <set>
#include <span>
#include <string>
#include <vector>

namespace logitshift {

using Shape = std::vector<std::size_t>;

std::string to_string(const Shape& shape);
std::size_t element_count(const Shape& shape);

/// Dense row-major array of doubles.
///
/// The shape is fixed at construction. Spatial activations use (row, column,
/// channel) order, so the channels of one cell are contiguous.
class Tensor
{
public:
    Tensor() = default;
    explicit Tensor(Shape shape, double fill = 0.0);
    Tensor(Shape shape, std::vector<double> data);

    /// Rank-1 tensor holding `values`.
    static Tensor vector(std::initializer_list<double> values);
    static Tensor vector(std::vector<double> values);
    /// Rank-2 tensor from nested rows; all rows must have equal length.
    static Tensor matrix(std::initializer_list<std::initializer_list<double>> rows);

    const Shape& shape() const { return shape_; }
    std::size_t rank() const { return shape_.size(); }
    std::size_t size() const { return data_.size(); }
    bool empty() const { return data_.empty(); }
    std::size_t dim(std::size_t axis) const;

    std::span<const double> data() const { return data_; }
    std::span<double> data() { return data_; }
    const std::vector<double>& values() const { return data_; }

    double operator[](std::size_t i) const { return data_[i]; }
    double& operator[](std::size_t i) { return data_[i]; }

    // Unchecked accessors for rank-2 and rank-3 tensors.
    double at(std::size_t i, std::size_t j) const { return data_[i * shape_[1] + j]; }
    double& at(std::size_t i, std::size_t j) { return data_[i * shape_[1] + j]; }
    double at(std::size_t i, std::size_t j, std::size_t k) const
    {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }
    double& at(std::size_t i, std::size_t j, std::size_t k)
    {
        return data_[(i * shape_[1] + j) * shape_[2] + k];
    }

    /// Pointer to the first channel of cell (i, j) of a rank-3 tensor, or to
    /// row i of a rank-2 tensor when j is 0.
    const double* cell(std::size_t i, std::size_t j) const { return data_.data() + offset(i, j); }
    double* cell(std::size_t i, std::size_t j) { return data_.data() + offset(i, j); }

    Tensor reshaped(Shape shape) const;

    friend bool operator==(const Tensor&, const Tensor&) = default;

private:
    std::size_t offset(std::size_t i, std::size_t j) const
    {
        return shape_.size() == 3 ? (i * shape_[1] + j) * shape_[2] : i * shape_[1] + j;
    }

    Shape shape_;
    std::vector<double> data_;
};

enum class ElementwiseOp { add, sub, mul };

Tensor elementwise(const Tensor& a, const Tensor& b, ElementwiseOp op);
Tensor add(const Tensor& a, const Tensor& b);
Tensor sub(const Tensor& a, const Tensor& b);
Tensor mul(const Tensor& a, const Tensor& b);
Tensor scale(const Tensor& t, double factor);

/// Sums over `axes` and drops them. An empty axis set returns `t` unchanged;
/// reducing every axis yields a rank-0 tensor with one element.
Tensor reduce_sum(const Tensor& t, const std::set<std::size_t>& axes);

/// Smallest flat index holding the maximum value.
std::size_t argmax_flat(const Tensor& t);

double max_abs(const Tensor& t);
double max_abs_diff(const Tensor& a, const Tensor& b);

} // namespace logitshift

#endif
