#pragma once

#include <string>
#include <vector>

#include "fedl2p/model.hpp"
#include "fedl2p/tensor.hpp"

namespace fedl2p {

// Meta-net inputs for one client, computed from a single forward pass of the
// local dataset under pretrained (Global) BN statistics.
struct ClientProfile {
  std::vector<double> xi;          // length B, symmetric KL per BN layer
  std::vector<double> feat_stats;  // length 2M: E(x_m), SD(x_m) per param layer
  std::size_t n_samples = 0;
  std::vector<std::vector<double>> bn_mu;   // per BN layer, per channel
  std::vector<std::vector<double>> bn_var;
};

// 1/2 (KL(P||Q) + KL(Q||P)) for univariate Gaussians, variances floored.
double gaussian_sym_kl(double mu1, double var1, double mu2, double var2,
                       double var_floor = 1e-8);

// Mean over channels of gaussian_sym_kl(client, pretrained).
double profile_xi(const std::vector<double>& mu_client,
                  const std::vector<double>& var_client,
                  const std::vector<double>& mu_pt,
                  const std::vector<double>& var_pt,
                  double var_floor = 1e-8);

// Computes the profile and installs the client BN stats into the model.
ClientProfile build_profile(ModelState& m, const DataSet& data);

struct ProfileRow {
  int client_id;
  ClientProfile profile;
};
void export_profiles_csv(const std::string& path, const std::vector<ProfileRow>& rows);

}  // namespace fedl2p
