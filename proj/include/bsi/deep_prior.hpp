#pragma once

#include <cmath>
#include <cstdint>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsi/autodiff.hpp"
#include "bsi/rng.hpp"
#include "bsi/tensor.hpp"

namespace bsi {

// ---------------------------------------------------------------------------
// Randomly initialized encoder-decoder CNN g(z, w) reparameterizing the model
// perturbation. Down path: stride-2 3x3 convs; up path: bilinear 2x upsample
// + 3x3 conv with a small 1x1-conv skip at each scale; leaky-ReLU throughout;
// linear 1x1 output head scaled by output_scale. The network runs on a grid
// padded up to a multiple of 2^levels and the output is cropped back.
// ---------------------------------------------------------------------------

struct NetworkArchitecture {
  int grid_rows = 0, grid_cols = 0;  // model grid (nz, nx); network output shape
  int latent_channels = 8;
  std::vector<int> channels = {16, 32, 64};  // down-path widths, one per level
  int skip_channels = 4;
  double lrelu_alpha = 0.1;
  int kernel = 3;
  double output_scale = 1.0;

  int levels() const { return static_cast<int>(channels.size()); }
  int stride_total() const { return 1 << levels(); }
  static int round_up(int n, int mult) { return ((n + mult - 1) / mult) * mult; }
  int padded_rows() const { return round_up(grid_rows, stride_total()); }
  int padded_cols() const { return round_up(grid_cols, stride_total()); }

  void validate() const {
    if (grid_rows < 1 || grid_cols < 1)
      throw std::invalid_argument("NetworkArchitecture: grid dims must be positive");
    if (channels.empty()) throw std::invalid_argument("NetworkArchitecture: no levels");
    for (int c : channels)
      if (c < 1) throw std::invalid_argument("NetworkArchitecture: channel count must be >= 1");
    if (latent_channels < 1 || skip_channels < 1)
      throw std::invalid_argument("NetworkArchitecture: channel counts must be >= 1");
    if (kernel % 2 == 0 || kernel < 1)
      throw std::invalid_argument("NetworkArchitecture: kernel must be odd");
    if (!(lrelu_alpha > 0.0 && lrelu_alpha < 1.0))
      throw std::invalid_argument("NetworkArchitecture: lrelu_alpha must be in (0,1)");
    const int coarse_r = padded_rows() / stride_total();
    const int coarse_c = padded_cols() / stride_total();
    if (coarse_r < 2 || coarse_c < 2)
      throw std::invalid_argument("NetworkArchitecture: grid too small for " +
                                  std::to_string(levels()) + " levels");
  }

  std::string describe() const {
    std::ostringstream os;
    os << "grid=" << grid_rows << "x" << grid_cols << " padded=" << padded_rows() << "x"
       << padded_cols() << " latent=" << latent_channels << " channels=";
    for (size_t i = 0; i < channels.size(); ++i) os << (i ? "," : "") << channels[i];
    os << " skip=" << skip_channels << " k=" << kernel << " alpha=" << lrelu_alpha
       << " output_scale=" << output_scale;
    return os.str();
  }
};

struct LatentInput {
  Tensor z;  // latent_channels x padded_rows x padded_cols
  uint64_t seed = 0;
};

struct NetworkWeights {
  std::vector<Tensor> t;
};

struct WeightSpec {
  std::string name;
  std::vector<int> shape;
};

inline int decoder_out_channels(const NetworkArchitecture& a, int level) {
  return a.channels[static_cast<size_t>(std::max(level - 1, 0))];
}

inline std::vector<WeightSpec> weight_specs(const NetworkArchitecture& a) {
  a.validate();
  std::vector<WeightSpec> specs;
  const int L = a.levels();
  int in_c = a.latent_channels;
  for (int l = 0; l < L; ++l) {
    specs.push_back({"enc" + std::to_string(l) + ".k", {a.channels[l], in_c, a.kernel, a.kernel}});
    specs.push_back({"enc" + std::to_string(l) + ".b", {a.channels[l]}});
    specs.push_back({"skip" + std::to_string(l) + ".k", {a.skip_channels, in_c, 1, 1}});
    specs.push_back({"skip" + std::to_string(l) + ".b", {a.skip_channels}});
    in_c = a.channels[l];
  }
  for (int l = L - 1; l >= 0; --l) {
    const int up_c = (l == L - 1) ? a.channels[L - 1] : decoder_out_channels(a, l + 1);
    specs.push_back({"dec" + std::to_string(l) + ".k",
                     {decoder_out_channels(a, l), up_c + a.skip_channels, a.kernel, a.kernel}});
    specs.push_back({"dec" + std::to_string(l) + ".b", {decoder_out_channels(a, l)}});
  }
  specs.push_back({"out.k", {1, decoder_out_channels(a, 0), 1, 1}});
  specs.push_back({"out.b", {1}});
  return specs;
}

inline long long weight_count(const NetworkArchitecture& a) {
  long long n = 0;
  for (const auto& s : weight_specs(a)) n += Tensor::numel_of(s.shape);
  return n;
}

// ---- chain arithmetic over weight structs --------------------------------

inline NetworkWeights weights_zeros_like(const NetworkWeights& w) {
  NetworkWeights out;
  out.t.reserve(w.t.size());
  for (const auto& ti : w.t) out.t.emplace_back(ti.shape);
  return out;
}

inline void weights_axpy(double alpha, const NetworkWeights& x, NetworkWeights& y) {
  if (x.t.size() != y.t.size()) throw std::invalid_argument("weights_axpy: layout mismatch");
  for (size_t i = 0; i < x.t.size(); ++i) axpy(alpha, x.t[i], y.t[i]);
}

inline double weights_dot(const NetworkWeights& x, const NetworkWeights& y) {
  double s = 0.0;
  for (size_t i = 0; i < x.t.size(); ++i) s += dot(x.t[i], y.t[i]);
  return s;
}

inline double weights_norm_sq(const NetworkWeights& w) { return weights_dot(w, w); }

inline long long weights_numel(const NetworkWeights& w) {
  long long n = 0;
  for (const auto& ti : w.t) n += ti.numel();
  return n;
}

inline bool weights_all_finite(const NetworkWeights& w) {
  for (const auto& ti : w.t)
    if (!ti.all_finite()) return false;
  return true;
}

// ---- sampling -------------------------------------------------------------

inline LatentInput init_latent(const NetworkArchitecture& a, uint64_t seed) {
  a.validate();
  LatentInput li;
  li.seed = seed;
  li.z = Tensor({a.latent_channels, a.padded_rows(), a.padded_cols()});
  Rng rng(mix_seed(seed, 0x1a7e));
  fill_normal(li.z, rng);
  return li;
}

/// Every kernel and bias entry i.i.d. N(0, 1/lambda^2). The draw is scale
/// equivariant in lambda: the same seed yields the same standard normals.
inline NetworkWeights sample_prior_weights(const NetworkArchitecture& a, double lambda,
                                           uint64_t seed) {
  if (!(lambda > 0.0)) throw std::invalid_argument("sample_prior_weights: lambda must be > 0");
  NetworkWeights w;
  const auto specs = weight_specs(a);
  w.t.reserve(specs.size());
  for (size_t i = 0; i < specs.size(); ++i) {
    Tensor ti(specs[i].shape);
    Rng rng(mix_seed(seed, 0x5eed + i));
    fill_normal(ti, rng, 0.0, 1.0 / lambda);
    w.t.push_back(std::move(ti));
  }
  return w;
}

// ---- forward / VJP ---------------------------------------------------------

struct NetworkTape {
  Tape tape;
  int output = -1;                // cropped (1, nz, nx) image node
  std::vector<int> weight_nodes;  // aligned with NetworkWeights::t
};

inline NetworkTape network_forward_tape(const NetworkArchitecture& a, const LatentInput& z,
                                        const NetworkWeights& w) {
  a.validate();
  const auto specs = weight_specs(a);
  if (w.t.size() != specs.size())
    throw std::invalid_argument("network_forward: weight tensor count " +
                                std::to_string(w.t.size()) + " != " +
                                std::to_string(specs.size()));
  for (size_t i = 0; i < specs.size(); ++i)
    if (w.t[i].shape != specs[i].shape)
      throw std::invalid_argument("network_forward: " + specs[i].name + " has shape " +
                                  Tensor::shape_str(w.t[i].shape) + ", expected " +
                                  Tensor::shape_str(specs[i].shape));
  if (z.z.shape != std::vector<int>{a.latent_channels, a.padded_rows(), a.padded_cols()})
    throw std::invalid_argument("network_forward: latent shape " + Tensor::shape_str(z.z.shape) +
                                " inconsistent with architecture");

  NetworkTape nt;
  Tape& tp = nt.tape;
  const int zid = tp.leaf(z.z, false);
  nt.weight_nodes.reserve(w.t.size());
  for (const auto& ti : w.t) nt.weight_nodes.push_back(tp.leaf(ti, true));

  const int L = a.levels();
  auto wn = [&](int i) { return nt.weight_nodes[static_cast<size_t>(i)]; };

  // down path; weight order per level: enc.k, enc.b, skip.k, skip.b
  std::vector<int> skips(static_cast<size_t>(L));
  int x = zid;
  for (int l = 0; l < L; ++l) {
    const int base = 4 * l;
    skips[l] = tp.leaky_relu(tp.conv2d(x, wn(base + 2), wn(base + 3), 1), a.lrelu_alpha);
    x = tp.leaky_relu(tp.conv2d(x, wn(base), wn(base + 1), 2), a.lrelu_alpha);
  }
  // up path; weights follow the encoder block: dec(L-1) ... dec(0)
  int y = x;
  for (int l = L - 1; l >= 0; --l) {
    const int base = 4 * L + 2 * (L - 1 - l);
    y = tp.upsample2x(y);
    y = tp.concat_channels(y, skips[l]);
    y = tp.leaky_relu(tp.conv2d(y, wn(base), wn(base + 1), 1), a.lrelu_alpha);
  }
  const int head = tp.conv2d(y, wn(4 * L + 2 * L), wn(4 * L + 2 * L + 1), 1);
  nt.output = tp.crop2d(tp.scale(head, a.output_scale), a.grid_rows, a.grid_cols);
  return nt;
}

/// Deterministic forward pass: one (nz, nx) image.
inline Tensor network_forward(const NetworkArchitecture& a, const LatentInput& z,
                              const NetworkWeights& w, NetworkTape* tape_out = nullptr) {
  NetworkTape nt = network_forward_tape(a, z, w);
  Tensor img = nt.tape.value(nt.output);
  img.shape = {a.grid_rows, a.grid_cols};
  if (tape_out) *tape_out = std::move(nt);
  return img;
}

/// Exact reverse-mode gradient of <cotangent, g(z,w)> w.r.t. every weight.
inline NetworkWeights network_vjp(const NetworkTape& nt, const Tensor& cotangent_image) {
  const Tensor& out = nt.tape.value(nt.output);
  Tensor cot = cotangent_image;
  if (cot.rank() == 2) cot.shape = {1, cot.dim(0), cot.dim(1)};
  if (cot.shape != out.shape)
    throw std::invalid_argument("network_vjp: cotangent shape " +
                                Tensor::shape_str(cotangent_image.shape) + " != output shape " +
                                Tensor::shape_str(out.shape));
  std::vector<Tensor> grads = nt.tape.backward(nt.output, cot);
  NetworkWeights g;
  g.t.reserve(nt.weight_nodes.size());
  for (int id : nt.weight_nodes) g.t.push_back(std::move(grads[static_cast<size_t>(id)]));
  return g;
}

// ---- prior predictive statistics -------------------------------------------

struct PriorStats {
  Tensor mean;  // nz x nx
  Tensor std;   // nz x nx, divisor n-1
  int n = 0;
};

namespace priordetail {

struct Welford {
  Tensor mean, m2;
  long long n = 0;
  explicit Welford(const std::vector<int>& shape) : mean(shape), m2(shape) {}
  void add(const Tensor& x) {
    ++n;
    for (size_t i = 0; i < x.v.size(); ++i) {
      const double delta = x.v[i] - mean.v[i];
      mean.v[i] += delta / static_cast<double>(n);
      m2.v[i] += delta * (x.v[i] - mean.v[i]);
    }
  }
  Tensor stddev() const {
    Tensor s = m2;
    if (n >= 2)
      for (double& v : s.v) v = std::sqrt(v / static_cast<double>(n - 1));
    return s;
  }
};

}  // namespace priordetail

/// Streaming mean / std of g(z, w_k) over prior draws w_k.
inline PriorStats prior_statistics(const NetworkArchitecture& a, const LatentInput& z,
                                   double lambda, int n_samples, uint64_t seed) {
  if (n_samples < 2) throw std::invalid_argument("prior_statistics: n_samples must be >= 2");
  priordetail::Welford acc({a.grid_rows, a.grid_cols});
  for (int k = 0; k < n_samples; ++k) {
    const NetworkWeights wk = sample_prior_weights(a, lambda, mix_seed(seed, 0xab1e + k));
    acc.add(network_forward(a, z, wk));
  }
  PriorStats ps;
  ps.mean = acc.mean;
  ps.std = acc.stddev();
  ps.n = n_samples;
  return ps;
}

/// Same accumulation over an explicit weight list (test hook).
inline PriorStats prior_statistics_from_weights(const NetworkArchitecture& a,
                                                const LatentInput& z,
                                                const std::vector<NetworkWeights>& ws) {
  if (ws.size() < 2) throw std::invalid_argument("prior_statistics: need >= 2 samples");
  priordetail::Welford acc({a.grid_rows, a.grid_cols});
  for (const auto& wk : ws) acc.add(network_forward(a, z, wk));
  PriorStats ps;
  ps.mean = acc.mean;
  ps.std = acc.stddev();
  ps.n = static_cast<int>(ws.size());
  return ps;
}

}  // namespace bsi
