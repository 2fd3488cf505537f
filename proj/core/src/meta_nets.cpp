#include "fedl2p/meta_nets.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>

#include <json.hpp>

#include "fedl2p/rng.hpp"

namespace fedl2p {

namespace {

void xavier_normal(std::vector<double>& w, std::size_t fan_in, std::size_t fan_out,
                   double gain, Rng& rng) {
  std::normal_distribution<double> dist(
      0.0, gain * std::sqrt(2.0 / double(fan_in + fan_out)));
  for (auto& v : w) v = dist(rng);
}

Mlp3 make_mlp3(std::size_t in, std::size_t hidden, std::size_t out, double bias,
               Rng& rng) {
  Mlp3 net;
  net.in = in;
  net.hidden = hidden;
  net.out = out;
  net.w1.resize(hidden * in);
  net.b1.assign(hidden, bias);
  net.w2.resize(hidden * hidden);
  net.b2.assign(hidden, bias);
  net.w3.resize(out * hidden);
  net.b3.assign(out, bias);
  xavier_normal(net.w1, in, hidden, 0.1, rng);
  xavier_normal(net.w2, hidden, hidden, 0.1, rng);
  xavier_normal(net.w3, hidden, out, 0.1, rng);
  return net;
}

void affine(const std::vector<double>& w, const std::vector<double>& b,
            const std::vector<double>& x, std::vector<double>& y) {
  std::size_t out = b.size(), in = x.size();
  y.resize(out);
  for (std::size_t o = 0; o < out; ++o) {
    const double* row = w.data() + o * in;
    double acc = b[o];
    for (std::size_t j = 0; j < in; ++j) acc += row[j] * x[j];
    y[o] = acc;
  }
}

std::vector<double> relu(const std::vector<double>& x) {
  std::vector<double> y = x;
  for (auto& v : y) v = v > 0.0 ? v : 0.0;
  return y;
}

}  // namespace

MetaParams init_meta(std::size_t num_param_layers, std::size_t num_bn,
                     double base_lr, std::uint64_t seed, std::size_t hidden) {
  MetaParams mp;
  Rng rng_bn = make_rng(seed, "bnnet_init");
  Rng rng_lr = make_rng(seed, "lrnet_init");
  std::size_t b = std::max<std::size_t>(num_bn, 1);
  mp.bn_net = make_mlp3(b, hidden, num_bn, 0.5, rng_bn);
  mp.lr_net = make_mlp3(2 * num_param_layers, hidden, 2 * num_param_layers, 1.0, rng_lr);
  mp.eta_tilde.assign(2 * num_param_layers, base_lr);
  return mp;
}

std::vector<double> mlp3_forward(const Mlp3& net, const std::vector<double>& in,
                                 Mlp3Cache* cache) {
  if (in.size() != net.in) throw ShapeError("mlp3_forward: input length mismatch");
  Mlp3Cache local;
  Mlp3Cache& c = cache ? *cache : local;
  affine(net.w1, net.b1, in, c.a1);
  c.h1 = relu(c.a1);
  affine(net.w2, net.b2, c.h1, c.a2);
  c.h2 = relu(c.a2);
  affine(net.w3, net.b3, c.h2, c.raw);
  require_finite(c.raw, "meta-net output");
  return c.raw;
}

std::vector<double> bnnet_forward(const MetaParams& mp, const std::vector<double>& xi,
                                  Mlp3Cache* cache) {
  std::vector<double> raw = mlp3_forward(mp.bn_net, xi, cache);
  for (auto& v : raw) v = std::clamp(v, mp.bn_clamp_lo, mp.bn_clamp_hi);
  return raw;
}

LrNetOut lrnet_forward(const MetaParams& mp, const std::vector<double>& stats,
                       Mlp3Cache* cache) {
  std::vector<double> raw = mlp3_forward(mp.lr_net, stats, cache);
  LrNetOut out;
  out.raw_clamped.resize(raw.size());
  out.eta.resize(raw.size());
  if (mp.eta_tilde.size() != raw.size())
    throw ShapeError("lrnet_forward: eta_tilde length mismatch");
  for (std::size_t i = 0; i < raw.size(); ++i) {
    out.raw_clamped[i] = std::clamp(raw[i], mp.lr_clamp_lo, mp.lr_clamp_hi);
    out.eta[i] = out.raw_clamped[i] * mp.eta_tilde[i];
  }
  return out;
}

Mlp3Grad mlp3_vjp(const Mlp3& net, const Mlp3Cache& cache,
                  const std::vector<double>& input,
                  const std::vector<double>& upstream) {
  if (upstream.size() != net.out) throw ShapeError("mlp3_vjp: upstream length mismatch");
  Mlp3Grad g;
  g.w1.assign(net.w1.size(), 0.0);
  g.b1.assign(net.b1.size(), 0.0);
  g.w2.assign(net.w2.size(), 0.0);
  g.b2.assign(net.b2.size(), 0.0);
  g.w3.assign(net.w3.size(), 0.0);
  g.b3.assign(net.b3.size(), 0.0);

  // STE: the clamp contributes an identity Jacobian, upstream flows unchanged.
  std::vector<double> d2(net.hidden, 0.0);
  for (std::size_t o = 0; o < net.out; ++o) {
    double dy = upstream[o];
    g.b3[o] = dy;
    double* wrow = g.w3.data() + o * net.hidden;
    const double* w = net.w3.data() + o * net.hidden;
    for (std::size_t j = 0; j < net.hidden; ++j) {
      wrow[j] = dy * cache.h2[j];
      d2[j] += dy * w[j];
    }
  }
  for (std::size_t j = 0; j < net.hidden; ++j)
    if (cache.a2[j] <= 0.0) d2[j] = 0.0;

  std::vector<double> d1(net.hidden, 0.0);
  for (std::size_t o = 0; o < net.hidden; ++o) {
    double dy = d2[o];
    g.b2[o] = dy;
    double* wrow = g.w2.data() + o * net.hidden;
    const double* w = net.w2.data() + o * net.hidden;
    for (std::size_t j = 0; j < net.hidden; ++j) {
      wrow[j] = dy * cache.h1[j];
      d1[j] += dy * w[j];
    }
  }
  for (std::size_t j = 0; j < net.hidden; ++j)
    if (cache.a1[j] <= 0.0) d1[j] = 0.0;

  for (std::size_t o = 0; o < net.hidden; ++o) {
    double dy = d1[o];
    g.b1[o] = dy;
    double* wrow = g.w1.data() + o * net.in;
    for (std::size_t j = 0; j < net.in; ++j) wrow[j] = dy * input[j];
  }
  return g;
}

std::size_t mlp3_param_count(const Mlp3& net) {
  return net.w1.size() + net.b1.size() + net.w2.size() + net.b2.size() +
         net.w3.size() + net.b3.size();
}

std::vector<double> flatten_mlp3(const Mlp3& net) {
  std::vector<double> v;
  v.reserve(mlp3_param_count(net));
  for (const auto* p : {&net.w1, &net.b1, &net.w2, &net.b2, &net.w3, &net.b3})
    v.insert(v.end(), p->begin(), p->end());
  return v;
}

void unflatten_mlp3(const std::vector<double>& v, std::size_t& off, Mlp3& net) {
  for (auto* p : {&net.w1, &net.b1, &net.w2, &net.b2, &net.w3, &net.b3}) {
    if (off + p->size() > v.size()) throw ShapeError("unflatten_mlp3: vector too short");
    std::copy(v.begin() + off, v.begin() + off + p->size(), p->begin());
    off += p->size();
  }
}

std::vector<double> flatten_meta(const MetaParams& mp) {
  std::vector<double> v = flatten_mlp3(mp.bn_net);
  std::vector<double> lr = flatten_mlp3(mp.lr_net);
  v.insert(v.end(), lr.begin(), lr.end());
  v.insert(v.end(), mp.eta_tilde.begin(), mp.eta_tilde.end());
  return v;
}

void unflatten_meta(const std::vector<double>& v, MetaParams& mp) {
  std::size_t off = 0;
  unflatten_mlp3(v, off, mp.bn_net);
  unflatten_mlp3(v, off, mp.lr_net);
  if (off + mp.eta_tilde.size() != v.size())
    throw ShapeError("unflatten_meta: size mismatch");
  std::copy(v.begin() + off, v.end(), mp.eta_tilde.begin());
}

namespace {

using nlohmann::json;

json tensor_entry(const std::string& name, std::vector<std::size_t> shape,
                  const std::vector<double>& values) {
  return json{{"name", name}, {"shape", shape}, {"values", values}};
}

void mlp3_to_json(json& list, const std::string& prefix, const Mlp3& net) {
  list.push_back(tensor_entry(prefix + ".w1", {net.hidden, net.in}, net.w1));
  list.push_back(tensor_entry(prefix + ".b1", {net.hidden}, net.b1));
  list.push_back(tensor_entry(prefix + ".w2", {net.hidden, net.hidden}, net.w2));
  list.push_back(tensor_entry(prefix + ".b2", {net.hidden}, net.b2));
  list.push_back(tensor_entry(prefix + ".w3", {net.out, net.hidden}, net.w3));
  list.push_back(tensor_entry(prefix + ".b3", {net.out}, net.b3));
}

Mlp3 mlp3_from_json(const json& list, std::size_t& pos) {
  Mlp3 net;
  auto take = [&](std::vector<double>& dst) {
    dst = list.at(pos).at("values").get<std::vector<double>>();
    ++pos;
  };
  take(net.w1);
  take(net.b1);
  take(net.w2);
  take(net.b2);
  take(net.w3);
  take(net.b3);
  net.hidden = net.b1.size();
  net.in = net.hidden ? net.w1.size() / net.hidden : 0;
  net.out = net.b3.size();
  return net;
}

}  // namespace

void save_meta(const MetaParams& mp, const std::string& path) {
  json list = json::array();
  mlp3_to_json(list, "bn_net", mp.bn_net);
  mlp3_to_json(list, "lr_net", mp.lr_net);
  list.push_back(tensor_entry("eta_tilde", {mp.eta_tilde.size()}, mp.eta_tilde));
  json doc{{"format", "fedl2p-meta-v1"},
           {"bn_clamp", {mp.bn_clamp_lo, mp.bn_clamp_hi}},
           {"lr_clamp", {mp.lr_clamp_lo, mp.lr_clamp_hi}},
           {"tensors", list}};
  std::ofstream f(path);
  if (!f) throw std::runtime_error("save_meta: cannot open " + path);
  f << doc.dump(2) << "\n";
}

MetaParams load_meta(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw std::runtime_error("load_meta: cannot open " + path);
  json doc = json::parse(f);
  MetaParams mp;
  mp.bn_clamp_lo = doc.at("bn_clamp").at(0).get<double>();
  mp.bn_clamp_hi = doc.at("bn_clamp").at(1).get<double>();
  mp.lr_clamp_lo = doc.at("lr_clamp").at(0).get<double>();
  mp.lr_clamp_hi = doc.at("lr_clamp").at(1).get<double>();
  const json& list = doc.at("tensors");
  std::size_t pos = 0;
  mp.bn_net = mlp3_from_json(list, pos);
  mp.lr_net = mlp3_from_json(list, pos);
  mp.eta_tilde = list.at(pos).at("values").get<std::vector<double>>();
  return mp;
}

}  // namespace fedl2p
