#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "crash/errors.hpp"

namespace crash {

// Row-major dense matrix of 64-bit floats; the only tensor type in the
// workbench. Vectors are stored as 1xN. All kernels reduce in a fixed index
// order so identical inputs give bit-identical outputs.
struct Mat {
    std::size_t rows = 0;
    std::size_t cols = 0;
    std::vector<double> data;

    Mat() = default;
    Mat(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}
    Mat(std::size_t r, std::size_t c, std::vector<double> d);

    double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
    double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

    double* row(std::size_t r) { return data.data() + r * cols; }
    const double* row(std::size_t r) const { return data.data() + r * cols; }

    std::size_t size() const { return data.size(); }
    bool same_shape(const Mat& o) const { return rows == o.rows && cols == o.cols; }
    std::string shape_str() const;

    bool operator==(const Mat& o) const = default;
};

// Throws NumericError if any entry is NaN or Inf.
void check_finite(const Mat& a, const char* what);

// Standard product; per output cell the k-sum runs in ascending order.
Mat matmul(const Mat& a, const Mat& b);

Mat transpose(const Mat& a);

// Subtracts each column's mean. Requires rows >= 1.
Mat center_columns(const Mat& a);

double frobenius_norm(const Mat& a);

// Row-wise softmax, stabilized by row-max subtraction.
Mat softmax_rows(const Mat& a);

}  // namespace crash
