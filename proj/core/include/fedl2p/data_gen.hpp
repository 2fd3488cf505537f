#pragma once

#include <cstdint>
#include <string>
#include <vector>

#include "fedl2p/rng.hpp"
#include "fedl2p/tensor.hpp"

namespace fedl2p {

struct ClientData {
  int id = 0;
  int domain = 0;
  DataSet train, val, test;
};

// Affine feature transform emulating one domain's feature shift.
struct DomainTransform {
  std::size_t dims = 0;
  std::vector<double> linear;  // dims x dims, row-major; invertible
  std::vector<double> shift;   // dims
};

DataSet apply_transform(const DomainTransform& t, const DataSet& d);

struct DataGenSpec {
  std::size_t dims = 8;
  std::size_t classes = 4;
  std::size_t samples_per_client = 100;
  int clients = 30;
  int domains = 3;
  double alpha = 1000.0;          // Dirichlet concentration for label skew
  double class_spread = 3.0;      // distance scale between class means
  double noise = 1.0;             // within-class SD
  double domain_rotation = 0.4;   // Givens rotation angle scale
  double domain_shift = 2.0;      // translation magnitude
  double domain_scale = 1.3;      // per-axis scale jitter bound
  std::size_t pretrain_clients = 5;
  std::size_t pretrain_samples_per_client = 200;
  std::uint64_t seed = 0;
};

// Gaussian-mixture classification task (domain 0 / pretraining distribution).
struct GaussianMixture {
  std::size_t dims = 0, classes = 0;
  std::vector<double> means;  // classes x dims
  double noise = 1.0;

  DataSet sample(std::size_t n, Rng& rng) const;
  DataSet sample_class(int label, std::size_t n, Rng& rng) const;
};

GaussianMixture make_base_task(const DataGenSpec& spec);

// Domain 0 is the identity (pretraining domain).
std::vector<DomainTransform> make_domains(const DataGenSpec& spec);

// Per-client index lists from a label pool: class proportions ~ Dir(alpha),
// sampled without replacement, renormalizing over non-exhausted classes so
// every client gets exactly per_client samples.
std::vector<std::vector<std::size_t>> dirichlet_partition(
    const std::vector<int>& labels, std::size_t n_clients, std::size_t per_client,
    double alpha, std::size_t n_classes, Rng& rng);

// Deterministic disjoint split; fractions must sum to 1.
struct SplitIdx {
  std::vector<std::size_t> train, val, test;
};
SplitIdx split_indices(std::size_t n, double train_frac, double val_frac,
                       double test_frac, Rng& rng);

struct GeneratedData {
  std::vector<ClientData> clients;
  DataSet pretrain_pool;  // IID draws from domain 0
};

GeneratedData generate(const DataGenSpec& spec);

// CSV round-trip: feature columns, label, client_id, domain_id, split.
void export_clients_csv(const std::string& path, const GeneratedData& data);
GeneratedData import_clients_csv(const std::string& path);

}  // namespace fedl2p
