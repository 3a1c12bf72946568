#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsi/tensor.hpp"
#include "bsi/wave.hpp"

namespace bsi {

/// Thinned chain of model-space images g(z, w_j) plus the schedule that
/// produced them.
struct PosteriorEnsemble {
  std::vector<Tensor> samples;  // each nz x nx
  uint64_t seed = 0;
  int total_iterations = 0;
  int burn_in = 0;
  int thin_every = 1;
  double epsilon = 0.0;
  double lambda = 0.0;

  int size() const { return static_cast<int>(samples.size()); }
  void check_consistent() const {
    if (samples.empty()) throw std::invalid_argument("PosteriorEnsemble: no samples");
    for (const auto& s : samples)
      if (s.shape != samples.front().shape)
        throw std::invalid_argument("PosteriorEnsemble: samples on different grids");
  }
};

/// Bayesian model average (1/T) sum_j g(z, w_j), streaming accumulation.
inline Tensor bma_mean(const PosteriorEnsemble& e) {
  e.check_consistent();
  Tensor mean(e.samples.front().shape);
  double n = 0.0;
  for (const auto& s : e.samples) {
    n += 1.0;
    for (size_t i = 0; i < s.v.size(); ++i) mean.v[i] += (s.v[i] - mean.v[i]) / n;
  }
  return mean;
}

/// Per-cell sample standard deviation (divisor T-1), Welford accumulation.
inline Tensor pointwise_std(const PosteriorEnsemble& e) {
  e.check_consistent();
  if (e.size() < 2) throw std::invalid_argument("pointwise_std: need at least 2 samples");
  Tensor mean(e.samples.front().shape), m2(e.samples.front().shape);
  double n = 0.0;
  for (const auto& s : e.samples) {
    n += 1.0;
    for (size_t i = 0; i < s.v.size(); ++i) {
      const double delta = s.v[i] - mean.v[i];
      mean.v[i] += delta / n;
      m2.v[i] += delta * (s.v[i] - mean.v[i]);
    }
  }
  for (double& v : m2.v) v = std::sqrt(v / (n - 1.0));
  return m2;
}

/// Nearest column index for a lateral position; ties snap to the left.
inline int snap_column(double x, int nx, double dx) {
  if (x < 0.0 || x > (nx - 1) * dx)
    throw std::invalid_argument("snap_column: x = " + std::to_string(x) +
                                " m outside [0, " + std::to_string((nx - 1) * dx) + "]");
  int best = 0;
  double best_d = std::fabs(x);
  for (int c = 1; c < nx; ++c) {
    const double d = std::fabs(x - c * dx);
    if (d < best_d) {  // strict: earlier (left) column wins ties
      best_d = d;
      best = c;
    }
  }
  return best;
}

struct DepthProfile {
  double x_requested = 0.0;
  int column = 0;
  std::vector<double> values;  // nz entries, shallow to deep
};

/// Vertical slices of an (nz, nx) image at the nearest columns.
inline std::vector<DepthProfile> std_profiles(const Tensor& std_image, double dx,
                                              const std::vector<double>& x_positions) {
  if (std_image.rank() != 2) throw std::invalid_argument("std_profiles: image must be 2-D");
  const int nz = std_image.dim(0), nx = std_image.dim(1);
  std::vector<DepthProfile> out;
  out.reserve(x_positions.size());
  for (double x : x_positions) {
    DepthProfile p;
    p.x_requested = x;
    p.column = snap_column(x, nx, dx);
    p.values.resize(static_cast<size_t>(nz));
    for (int z = 0; z < nz; ++z) p.values[z] = std_image.v[static_cast<size_t>(z) * nx + p.column];
    out.push_back(std::move(p));
  }
  return out;
}

struct Histogram {
  std::vector<double> edges;   // bins+1 when regular, 2 when degenerate
  std::vector<long long> counts;
  bool degenerate = false;     // all values equal: single flagged bin
  double lo = 0.0, hi = 0.0;
};

/// Values of each sample image at the cell nearest to a physical point.
inline std::vector<double> values_at_point(const std::vector<Tensor>& samples, Point p, double dx,
                                           double dz) {
  if (samples.empty()) throw std::invalid_argument("values_at_point: no samples");
  const int nz = samples.front().dim(0), nx = samples.front().dim(1);
  const int col = snap_column(p.x, nx, dx);
  const int row = snap_column(p.z, nz, dz);  // same snapping rule by depth
  std::vector<double> out;
  out.reserve(samples.size());
  for (const auto& s : samples) out.push_back(s.v[static_cast<size_t>(row) * nx + col]);
  return out;
}

inline Histogram histogram(const std::vector<double>& values, int bins) {
  if (bins < 2) throw std::invalid_argument("histogram: bins must be >= 2");
  if (values.empty()) throw std::invalid_argument("histogram: no values");
  Histogram h;
  h.lo = *std::min_element(values.begin(), values.end());
  h.hi = *std::max_element(values.begin(), values.end());
  if (h.lo == h.hi) {
    h.degenerate = true;
    h.edges = {h.lo, h.hi};
    h.counts = {static_cast<long long>(values.size())};
    return h;
  }
  h.edges.resize(static_cast<size_t>(bins) + 1);
  for (int b = 0; b <= bins; ++b)
    h.edges[b] = h.lo + (h.hi - h.lo) * static_cast<double>(b) / bins;
  h.counts.assign(static_cast<size_t>(bins), 0);
  for (double v : values) {
    int b = static_cast<int>((v - h.lo) / (h.hi - h.lo) * bins);
    b = std::clamp(b, 0, bins - 1);
    ++h.counts[static_cast<size_t>(b)];
  }
  return h;
}

inline Histogram point_histogram(const std::vector<Tensor>& samples, Point p, double dx, double dz,
                                 int bins) {
  return histogram(values_at_point(samples, p, dx, dz), bins);
}

/// 20 log10(|signal|_2 / |noise|_2) aggregated over record sets.
inline double snr_db(const std::vector<ShotRecord>& signal, const std::vector<ShotRecord>& noise) {
  if (signal.size() != noise.size()) throw std::invalid_argument("snr: record count mismatch");
  double s2 = 0.0, n2 = 0.0;
  for (size_t i = 0; i < signal.size(); ++i) {
    if (signal[i].a.size() != noise[i].a.size())
      throw std::invalid_argument("snr: record " + std::to_string(i) + " shape mismatch");
    for (double v : signal[i].a) s2 += v * v;
    for (double v : noise[i].a) n2 += v * v;
  }
  if (n2 == 0.0) throw std::invalid_argument("snr: zero noise norm");
  return 20.0 * std::log10(std::sqrt(s2) / std::sqrt(n2));
}

inline double sample_mean(const std::vector<double>& v) {
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

inline double sample_std(const std::vector<double>& v) {
  const double m = sample_mean(v);
  double s = 0.0;
  for (double x : v) s += (x - m) * (x - m);
  return std::sqrt(s / (static_cast<double>(v.size()) - 1.0));
}

}  // namespace bsi
