#pragma once

#include <cstdint>
#include <random>
#include <vector>

#include "seqcomm/common.hpp"

namespace seqcomm {

// Dense row-major tensor of doubles. Rank 0 (scalar), 1 (vector) and 2
// (matrix) cover everything the nets and losses need.
class Tensor {
  public:
    Tensor() = default;
    explicit Tensor(std::vector<int> shape);
    Tensor(std::vector<int> shape, std::vector<double> data);

    static Tensor scalar(double v);
    static Tensor zeros(std::vector<int> shape);
    static Tensor full(std::vector<int> shape, double v);
    static Tensor vec(std::vector<double> data);
    static Tensor uniform(std::vector<int> shape, double lo, double hi, std::mt19937_64& rng);
    static Tensor randn(std::vector<int> shape, double stddev, std::mt19937_64& rng);

    const std::vector<int>& shape() const { return shape_; }
    int rank() const { return static_cast<int>(shape_.size()); }
    int64_t numel() const { return static_cast<int64_t>(data_.size()); }
    bool same_shape(const Tensor& o) const { return shape_ == o.shape_; }

    // rank-2 accessors
    int rows() const;
    int cols() const;

    double* data() { return data_.data(); }
    const double* data() const { return data_.data(); }
    std::vector<double>& vec_data() { return data_; }
    const std::vector<double>& vec_data() const { return data_; }

    double& operator[](int64_t i) { return data_[static_cast<size_t>(i)]; }
    double operator[](int64_t i) const { return data_[static_cast<size_t>(i)]; }
    double& at(int r, int c);
    double at(int r, int c) const;

    // Scalar extraction; requires numel()==1.
    double item() const;

    bool all_finite() const;

    double squared_norm() const;

  private:
    std::vector<int> shape_;
    std::vector<double> data_;
};

int64_t shape_numel(const std::vector<int>& shape);

}  // namespace seqcomm
