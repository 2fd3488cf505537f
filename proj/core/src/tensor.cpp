#include "fedl2p/tensor.hpp"

#include <cmath>

namespace fedl2p {

bool all_finite(const std::vector<double>& v) {
  for (double x : v)
    if (!std::isfinite(x)) return false;
  return true;
}

bool all_finite(const Tensor& t) { return all_finite(t.data); }

void require_finite(const Tensor& t, const std::string& what) {
  if (!all_finite(t)) throw NumericalError("non-finite values in " + what);
}

void require_finite(const std::vector<double>& v, const std::string& what) {
  if (!all_finite(v)) throw NumericalError("non-finite values in " + what);
}

DataSet subset(const DataSet& d, const std::vector<std::size_t>& idx) {
  DataSet out;
  out.x = Tensor(idx.size(), d.x.cols);
  out.y.resize(idx.size());
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t c = 0; c < d.x.cols; ++c) out.x.at(i, c) = d.x.at(idx[i], c);
    out.y[i] = d.y[idx[i]];
  }
  return out;
}

}  // namespace fedl2p
