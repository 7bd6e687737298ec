#include "seqcomm/tensor.hpp"

#include <cmath>

namespace seqcomm {

int64_t shape_numel(const std::vector<int>& shape) {
    int64_t n = 1;
    for (int d : shape) {
        if (d < 0) throw UsageError("tensor: negative extent");
        n *= d;
    }
    return n;
}

Tensor::Tensor(std::vector<int> shape) : shape_(std::move(shape)) {
    data_.assign(static_cast<size_t>(shape_numel(shape_)), 0.0);
}

Tensor::Tensor(std::vector<int> shape, std::vector<double> data)
    : shape_(std::move(shape)), data_(std::move(data)) {
    if (shape_numel(shape_) != static_cast<int64_t>(data_.size()))
        throw UsageError("tensor: shape does not match data length");
}

Tensor Tensor::scalar(double v) { return Tensor({}, {v}); }

Tensor Tensor::zeros(std::vector<int> shape) { return Tensor(std::move(shape)); }

Tensor Tensor::full(std::vector<int> shape, double v) {
    Tensor t(std::move(shape));
    for (auto& x : t.data_) x = v;
    return t;
}

Tensor Tensor::vec(std::vector<double> data) {
    int n = static_cast<int>(data.size());
    return Tensor({n}, std::move(data));
}

Tensor Tensor::uniform(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::uniform_real_distribution<double> dist(lo, hi);
    for (auto& x : t.data_) x = dist(rng);
    return t;
}

Tensor Tensor::randn(std::vector<int> shape, double stddev, std::mt19937_64& rng) {
    Tensor t(std::move(shape));
    std::normal_distribution<double> dist(0.0, stddev);
    for (auto& x : t.data_) x = dist(rng);
    return t;
}

int Tensor::rows() const {
    if (rank() != 2) throw UsageError("tensor: rows() requires rank 2");
    return shape_[0];
}

int Tensor::cols() const {
    if (rank() != 2) throw UsageError("tensor: cols() requires rank 2");
    return shape_[1];
}

double& Tensor::at(int r, int c) {
    return data_[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)];
}

double Tensor::at(int r, int c) const {
    return data_[static_cast<size_t>(r) * static_cast<size_t>(cols()) + static_cast<size_t>(c)];
}

double Tensor::item() const {
    if (numel() != 1) throw UsageError("tensor: item() requires a single element");
    return data_[0];
}

bool Tensor::all_finite() const {
    for (double x : data_)
        if (!std::isfinite(x)) return false;
    return true;
}

double Tensor::squared_norm() const {
    double s = 0.0;
    for (double x : data_) s += x * x;
    return s;
}

}  // namespace seqcomm
