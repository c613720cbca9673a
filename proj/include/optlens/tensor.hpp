#pragma once

#include <cstdint>
#include <initializer_list>
#include <string>
#include <vector>

#include "optlens/error.hpp"

namespace optlens {

// Dense row-major float64 tensor. Rank 0 (scalar), 1 and 2 are what the
// project actually uses; shape is kept generic so reshape stays trivial.
struct Tensor {
  std::vector<int64_t> shape;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::initializer_list<int64_t> s) : shape(s), data(count(shape), 0.0) {}
  explicit Tensor(std::vector<int64_t> s) : shape(std::move(s)), data(count(shape), 0.0) {}

  static int64_t count(const std::vector<int64_t>& s) {
    int64_t n = 1;
    for (int64_t d : s) n *= d;
    return n;
  }

  static Tensor scalar(double v) {
    Tensor t;
    t.shape = {};
    t.data = {v};
    return t;
  }

  static Tensor from_vector(std::vector<double> v) {
    Tensor t;
    t.shape = {static_cast<int64_t>(v.size())};
    t.data = std::move(v);
    return t;
  }

  static Tensor matrix(int64_t r, int64_t c, std::vector<double> v) {
    if (static_cast<int64_t>(v.size()) != r * c) fail("tensor: matrix data size mismatch");
    Tensor t;
    t.shape = {r, c};
    t.data = std::move(v);
    return t;
  }

  int64_t size() const { return static_cast<int64_t>(data.size()); }
  int rank() const { return static_cast<int>(shape.size()); }

  int64_t rows() const { return rank() == 2 ? shape[0] : (rank() == 1 ? shape[0] : 1); }
  int64_t cols() const { return rank() == 2 ? shape[1] : 1; }

  double& at(int64_t i, int64_t j) { return data[i * shape[1] + j]; }
  double at(int64_t i, int64_t j) const { return data[i * shape[1] + j]; }

  bool same_shape(const Tensor& o) const { return shape == o.shape; }

  std::string shape_str() const {
    std::string s = "(";
    for (size_t i = 0; i < shape.size(); ++i) {
      if (i) s += "x";
      s += std::to_string(shape[i]);
    }
    return s + ")";
  }
};

}  // namespace optlens
