#include "fedl2p/profile.hpp"

#include <cmath>
#include <fstream>

namespace fedl2p {

double gaussian_sym_kl(double mu1, double var1, double mu2, double var2,
                       double var_floor) {
  double v1 = std::max(var1, var_floor);
  double v2 = std::max(var2, var_floor);
  if (v1 <= 0.0 || v2 <= 0.0)
    throw NumericalError("gaussian_sym_kl: non-positive variance");
  double d2 = (mu1 - mu2) * (mu1 - mu2);
  double kl_pq = 0.5 * (v1 / v2 + d2 / v2 - 1.0 + std::log(v2 / v1));
  double kl_qp = 0.5 * (v2 / v1 + d2 / v1 - 1.0 + std::log(v1 / v2));
  return 0.5 * (kl_pq + kl_qp);
}

double profile_xi(const std::vector<double>& mu_client,
                  const std::vector<double>& var_client,
                  const std::vector<double>& mu_pt,
                  const std::vector<double>& var_pt, double var_floor) {
  if (mu_client.size() != mu_pt.size() || var_client.size() != var_pt.size() ||
      mu_client.size() != var_client.size())
    throw ShapeError("profile_xi: channel count mismatch");
  if (mu_client.empty()) throw ShapeError("profile_xi: no channels");
  double acc = 0;
  for (std::size_t j = 0; j < mu_client.size(); ++j)
    acc += gaussian_sym_kl(mu_client[j], var_client[j], mu_pt[j], var_pt[j], var_floor);
  return acc / double(mu_client.size());
}

ClientProfile build_profile(ModelState& m, const DataSet& data) {
  if (data.size() == 0) throw ShapeError("build_profile: empty dataset");
  ForwardCache cache;
  forward(m, data.x, BNMode::global(), false, &cache);

  ClientProfile p;
  p.n_samples = data.size();
  for (std::size_t k = 0; k < m.layers.size(); ++k) {
    const Layer& l = m.layers[k];
    if (std::holds_alternative<ReluLayer>(l)) continue;
    const Tensor& x = cache.inputs[k];
    // scalar mean/SD over all elements of this layer's input
    double s = 0;
    for (double v : x.data) s += v;
    double mean = s / double(x.size());
    double sq = 0;
    for (double v : x.data) sq += (v - mean) * (v - mean);
    double sd = std::sqrt(sq / double(x.size()));
    p.feat_stats.push_back(mean);
    p.feat_stats.push_back(sd);

    if (auto* bn = std::get_if<BatchNormLayer>(&l)) {
      std::vector<double> mu(bn->channels), var(bn->channels);
      for (std::size_t j = 0; j < bn->channels; ++j) {
        double cs = 0;
        for (std::size_t i = 0; i < x.rows; ++i) cs += x.at(i, j);
        mu[j] = cs / double(x.rows);
        double cq = 0;
        for (std::size_t i = 0; i < x.rows; ++i) {
          double d = x.at(i, j) - mu[j];
          cq += d * d;
        }
        var[j] = cq / double(x.rows);
      }
      p.xi.push_back(profile_xi(mu, var, bn->mu_pt, bn->var_pt));
      p.bn_mu.push_back(std::move(mu));
      p.bn_var.push_back(std::move(var));
    }
  }

  // install client stats (shared with update_running_stats semantics)
  std::size_t b = 0;
  for (auto& l : m.layers) {
    auto* bn = std::get_if<BatchNormLayer>(&l);
    if (!bn) continue;
    bn->mu_client = p.bn_mu[b];
    bn->var_client = p.bn_var[b];
    ++b;
  }
  return p;
}

void export_profiles_csv(const std::string& path, const std::vector<ProfileRow>& rows) {
  std::ofstream f(path);
  if (!f) throw std::runtime_error("export_profiles_csv: cannot open " + path);
  f << "client_id,b,xi\n";
  f.precision(17);
  for (const auto& r : rows)
    for (std::size_t b = 0; b < r.profile.xi.size(); ++b)
      f << r.client_id << "," << b << "," << r.profile.xi[b] << "\n";
}

}  // namespace fedl2p
