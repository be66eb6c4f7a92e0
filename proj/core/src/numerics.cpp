#include "crash/numerics.hpp"

#include <cmath>
#include <utility>

namespace crash {

Mat::Mat(std::size_t r, std::size_t c, std::vector<double> d)
    : rows(r), cols(c), data(std::move(d)) {
    if (data.size() != rows * cols) {
        throw ShapeError("Mat: data length " + std::to_string(data.size()) +
                         " does not match shape " + shape_str());
    }
}

std::string Mat::shape_str() const {
    return std::to_string(rows) + "x" + std::to_string(cols);
}

void check_finite(const Mat& a, const char* what) {
    for (double v : a.data) {
        if (!std::isfinite(v)) {
            throw NumericError(std::string(what) + ": non-finite entry");
        }
    }
}

Mat matmul(const Mat& a, const Mat& b) {
    if (a.cols != b.rows) {
        throw ShapeError("matmul: incompatible shapes " + a.shape_str() + " and " +
                         b.shape_str());
    }
    Mat out(a.rows, b.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* arow = a.row(i);
        double* orow = out.row(i);
        for (std::size_t k = 0; k < a.cols; ++k) {
            const double aik = arow[k];
            const double* brow = b.row(k);
            for (std::size_t j = 0; j < b.cols; ++j) {
                orow[j] += aik * brow[j];
            }
        }
    }
    check_finite(out, "matmul");
    return out;
}

Mat transpose(const Mat& a) {
    Mat out(a.cols, a.rows);
    for (std::size_t i = 0; i < a.rows; ++i) {
        for (std::size_t j = 0; j < a.cols; ++j) {
            out.at(j, i) = a.at(i, j);
        }
    }
    return out;
}

Mat center_columns(const Mat& a) {
    if (a.rows == 0 || a.cols == 0) {
        throw ShapeError("center_columns: empty matrix " + a.shape_str());
    }
    Mat out = a;
    for (std::size_t j = 0; j < a.cols; ++j) {
        double sum = 0.0;
        for (std::size_t i = 0; i < a.rows; ++i) {
            sum += a.at(i, j);
        }
        const double mean = sum / static_cast<double>(a.rows);
        for (std::size_t i = 0; i < a.rows; ++i) {
            out.at(i, j) -= mean;
        }
    }
    check_finite(out, "center_columns");
    return out;
}

double frobenius_norm(const Mat& a) {
    double sum = 0.0;
    for (double v : a.data) {
        sum += v * v;
    }
    return std::sqrt(sum);
}

Mat softmax_rows(const Mat& a) {
    Mat out(a.rows, a.cols);
    for (std::size_t i = 0; i < a.rows; ++i) {
        const double* in = a.row(i);
        double* o = out.row(i);
        double mx = in[0];
        for (std::size_t j = 1; j < a.cols; ++j) {
            if (in[j] > mx) mx = in[j];
        }
        double sum = 0.0;
        for (std::size_t j = 0; j < a.cols; ++j) {
            o[j] = std::exp(in[j] - mx);
            sum += o[j];
        }
        for (std::size_t j = 0; j < a.cols; ++j) {
            o[j] /= sum;
        }
    }
    check_finite(out, "softmax_rows");
    return out;
}

}  // namespace crash
