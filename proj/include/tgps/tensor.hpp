#pragma once

/// \file tensor.hpp
/// \brief Dense row-major tensor of doubles with a runtime shape.

#include <cstddef>
#include <functional>
#include <numeric>
#include <sstream>
#include <string>
#include <vector>

#include "tgps/errors.hpp"

namespace tgps {

using Shape = std::vector<int>;

inline std::size_t shape_size(const Shape& s) {
    std::size_t n = 1;
    for (int d : s) n *= static_cast<std::size_t>(d);
    return n;
}

inline std::string shape_str(const Shape& s) {
    std::ostringstream os;
    os << '[';
    for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
    os << ']';
    return os.str();
}

struct Tensor {
    Shape shape;
    std::vector<double> data;

    Tensor() = default;
    explicit Tensor(Shape s, double fill = 0.0) : shape(std::move(s)), data(shape_size(shape), fill) {}
    Tensor(Shape s, std::vector<double> values) : shape(std::move(s)), data(std::move(values)) {
        if (data.size() != shape_size(shape))
            throw ShapeError("tensor data size " + std::to_string(data.size()) + " does not match shape " +
                             shape_str(shape));
    }

    static Tensor scalar(double v) { return Tensor({1}, v); }

    std::size_t size() const { return data.size(); }
    int rank() const { return static_cast<int>(shape.size()); }
    int dim(int i) const { return shape.at(static_cast<std::size_t>(i < 0 ? rank() + i : i)); }
    bool empty() const { return data.empty(); }

    double& operator[](std::size_t i) { return data[i]; }
    double operator[](std::size_t i) const { return data[i]; }

    double* ptr() { return data.data(); }
    const double* ptr() const { return data.data(); }

    // 2D / 3D / 4D accessors, row-major.
    double& at(int i, int j) { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double at(int i, int j) const { return data[static_cast<std::size_t>(i) * shape[1] + j]; }
    double& at(int c, int h, int w) { return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w]; }
    double at(int c, int h, int w) const { return data[(static_cast<std::size_t>(c) * shape[1] + h) * shape[2] + w]; }
    double& at(int n, int c, int h, int w) {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }
    double at(int n, int c, int h, int w) const {
        return data[((static_cast<std::size_t>(n) * shape[1] + c) * shape[2] + h) * shape[3] + w];
    }

    void fill(double v) { std::fill(data.begin(), data.end(), v); }

    Tensor reshaped(Shape s) const {
        if (shape_size(s) != size()) throw ShapeError("cannot reshape " + shape_str(shape) + " to " + shape_str(s));
        return Tensor(std::move(s), data);
    }

    double sum() const { return std::accumulate(data.begin(), data.end(), 0.0); }

    friend bool operator==(const Tensor& a, const Tensor& b) { return a.shape == b.shape && a.data == b.data; }
};

inline void require_same_shape(const Tensor& a, const Tensor& b, const char* what) {
    if (a.shape != b.shape)
        throw ShapeError(std::string(what) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
}

}  // namespace tgps
