#pragma once

#include <cstddef>
#include <stdexcept>
#include <string>
#include <vector>

namespace fedl2p {

// Raised when an operation produces NaN/Inf or receives ill-shaped inputs.
struct NumericalError : std::runtime_error {
  using std::runtime_error::runtime_error;
};
struct ShapeError : std::runtime_error {
  using std::runtime_error::runtime_error;
};

// Row-major 2-D tensor of doubles (batch x features).
struct Tensor {
  std::size_t rows = 0;
  std::size_t cols = 0;
  std::vector<double> data;

  Tensor() = default;
  Tensor(std::size_t r, std::size_t c) : rows(r), cols(c), data(r * c, 0.0) {}

  double& at(std::size_t r, std::size_t c) { return data[r * cols + c]; }
  double at(std::size_t r, std::size_t c) const { return data[r * cols + c]; }

  const double* row(std::size_t r) const { return data.data() + r * cols; }
  double* row(std::size_t r) { return data.data() + r * cols; }

  std::size_t size() const { return data.size(); }
};

bool all_finite(const std::vector<double>& v);
bool all_finite(const Tensor& t);
void require_finite(const Tensor& t, const std::string& what);
void require_finite(const std::vector<double>& v, const std::string& what);

// Labeled dataset: features X (n x d) with integer class labels.
struct DataSet {
  Tensor x;
  std::vector<int> y;

  std::size_t size() const { return y.size(); }
  std::size_t dim() const { return x.cols; }
};

DataSet subset(const DataSet& d, const std::vector<std::size_t>& idx);

}  // namespace fedl2p
