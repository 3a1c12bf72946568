#pragma once

#include <chrono>
#include <cmath>
#include <cstdint>
#include <deque>
#include <list>
#include <map>
#include <memory>
#include <optional>
#include <sstream>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsi/deep_prior.hpp"
#include "bsi/posterior_stats.hpp"
#include "bsi/rng.hpp"
#include "bsi/wave.hpp"

namespace bsi {

// ---------------------------------------------------------------------------
// Dataset and Born-operator cache
// ---------------------------------------------------------------------------

struct Experiment {
  ShotRecord observed;
  std::vector<SourceSignature> sources;
  double record_noise_var = 0.0;  // per-sample noise variance; 0 = use dataset sigma2
  int id = 0;
};

struct Dataset {
  SquaredSlownessModel m0;
  std::vector<Point> receivers;
  std::vector<Experiment> experiments;
  double sigma2 = 1.0;

  int n() const { return static_cast<int>(experiments.size()); }
  int samples_per_record() const {  // D in the likelihood
    return m0.grid.nt * static_cast<int>(receivers.size());
  }
  void validate() const {
    m0.validate();
    if (experiments.empty()) throw std::invalid_argument("Dataset: no experiments");
    if (receivers.empty()) throw std::invalid_argument("Dataset: no receivers");
    if (!(sigma2 > 0.0)) throw std::invalid_argument("Dataset: sigma2 must be > 0");
    for (const auto& e : experiments) {
      if (e.observed.nt != m0.grid.nt ||
          e.observed.nrec != static_cast<int>(receivers.size()))
        throw std::invalid_argument("Dataset: record " + std::to_string(e.id) +
                                    " does not match geometry/grid");
      if (e.sources.empty())
        throw std::invalid_argument("Dataset: experiment " + std::to_string(e.id) +
                                    " has no sources");
    }
  }
  double noise_var(int i) const {
    const double v = experiments[static_cast<size_t>(i)].record_noise_var;
    return v > 0.0 ? v : sigma2;
  }
};

/// LRU cache of per-experiment Born operators (each owns a stored background
/// scattering kernel) plus the data residuals. References returned by op()
/// stay valid until the next op() call.
class BornCache {
 public:
  explicit BornCache(const Dataset& ds, size_t budget_bytes = size_t(2) << 30)
      : ds_(ds), budget_(budget_bytes), residuals_(ds.experiments.size()) {
    ds_.validate();
  }

  const BornOperator& op(int i) {
    check_index(i);
    auto it = ops_.find(i);
    if (it != ops_.end()) {
      lru_.remove(i);
      lru_.push_back(i);
      return *it->second;
    }
    auto born = std::make_unique<BornOperator>(
        ds_.m0, ds_.experiments[static_cast<size_t>(i)].sources, ds_.receivers);
    cache_residual(i, *born);
    bytes_ += born->bytes();
    while (bytes_ > budget_ && lru_.size() > 0) {
      const int victim = lru_.front();
      lru_.pop_front();
      bytes_ -= ops_[victim]->bytes();
      ops_.erase(victim);
    }
    auto& slot = ops_[i];
    slot = std::move(born);
    lru_.push_back(i);
    return *slot;
  }

  /// delta d_i = d_i - P A(m0)^{-1} q_i, cached after first computation.
  const ShotRecord& residual(int i) {
    check_index(i);
    if (!residuals_[static_cast<size_t>(i)]) op(i);
    return *residuals_[static_cast<size_t>(i)];
  }

  const Dataset& dataset() const { return ds_; }
  size_t cached_bytes() const { return bytes_; }

 private:
  void check_index(int i) const {
    if (i < 0 || i >= ds_.n())
      throw std::out_of_range("BornCache: experiment index " + std::to_string(i));
  }
  void cache_residual(int i, const BornOperator& born) {
    if (residuals_[static_cast<size_t>(i)]) return;
    ShotRecord r = ds_.experiments[static_cast<size_t>(i)].observed;
    const ShotRecord& bg = born.background_record();
    for (size_t k = 0; k < r.a.size(); ++k) r.a[k] -= bg.a[k];
    residuals_[static_cast<size_t>(i)] = std::move(r);
  }

  const Dataset& ds_;
  size_t budget_;
  size_t bytes_ = 0;
  std::map<int, std::unique_ptr<BornOperator>> ops_;
  std::list<int> lru_;
  std::vector<std::optional<ShotRecord>> residuals_;
};

inline const ShotRecord& data_residual(BornCache& cache, int i) { return cache.residual(i); }

// ---------------------------------------------------------------------------
// Objectives
// ---------------------------------------------------------------------------

inline ModelPerturbation as_perturbation(const Grid& g, const Tensor& img) {
  if (img.numel() != g.cells())
    throw std::invalid_argument("image size " + std::to_string(img.numel()) +
                                " != grid cells " + std::to_string(g.cells()));
  return ModelPerturbation{g, img.v};
}

/// (1/2s^2) sum_i |dd_i - J_i dm|^2 + (ND/2) log(2 pi s^2)
inline double neg_log_likelihood(BornCache& cache, const Tensor& dm_img) {
  const Dataset& ds = cache.dataset();
  const ModelPerturbation dm = as_perturbation(ds.m0.grid, dm_img);
  double misfit = 0.0;
  for (int i = 0; i < ds.n(); ++i) {
    const ShotRecord pred = cache.op(i).forward(dm);
    const ShotRecord& dd = cache.residual(i);
    for (size_t k = 0; k < dd.a.size(); ++k) {
      const double r = dd.a[k] - pred.a[k];
      misfit += r * r;
    }
  }
  const double nd = static_cast<double>(ds.n()) * ds.samples_per_record();
  const double value = misfit / (2.0 * ds.sigma2) + 0.5 * nd * std::log(2.0 * M_PI * ds.sigma2);
  if (!std::isfinite(value)) throw std::runtime_error("neg_log_likelihood: non-finite value");
  return value;
}

/// Data term of Eq-2 form plus the weight prior; the w-independent constant
/// (ND/2) log(2 pi s^2) is omitted here and reported separately.
inline double neg_log_posterior(BornCache& cache, const NetworkArchitecture& arch,
                                const LatentInput& z, const NetworkWeights& w, double lambda) {
  const Dataset& ds = cache.dataset();
  const Tensor img = network_forward(arch, z, w);
  const ModelPerturbation dm = as_perturbation(ds.m0.grid, img);
  double misfit = 0.0;
  for (int i = 0; i < ds.n(); ++i) {
    const ShotRecord pred = cache.op(i).forward(dm);
    const ShotRecord& dd = cache.residual(i);
    for (size_t k = 0; k < dd.a.size(); ++k) {
      const double r = dd.a[k] - pred.a[k];
      misfit += r * r;
    }
  }
  const double value = misfit / (2.0 * ds.sigma2) + 0.5 * lambda * lambda * weights_norm_sq(w);
  if (!std::isfinite(value)) throw std::runtime_error("neg_log_posterior: non-finite value");
  return value;
}

struct StochasticGrad {
  NetworkWeights grad;
  double objective = 0.0;  // J^(i)
  double misfit = 0.0;     // |dd_i - J g|^2 for the drawn i
};

/// grad of J^(i)(w) = (N/2s^2)|dd_i - J g(z,w)|^2 + (l^2/2)|w|^2, via
/// network_vjp(z, w, (N/s^2) J'(J g - dd_i)) + l^2 w.
inline StochasticGrad stochastic_grad(BornCache& cache, const NetworkArchitecture& arch,
                                      const LatentInput& z, const NetworkWeights& w, int i,
                                      double lambda) {
  const Dataset& ds = cache.dataset();
  NetworkTape tape;
  const Tensor img = network_forward(arch, z, w, &tape);
  const BornOperator& op = cache.op(i);
  const ShotRecord pred = op.forward(as_perturbation(ds.m0.grid, img));
  const ShotRecord& dd = cache.residual(i);

  ShotRecord r = pred;  // J g - dd_i
  double misfit = 0.0;
  for (size_t k = 0; k < r.a.size(); ++k) {
    r.a[k] -= dd.a[k];
    misfit += r.a[k] * r.a[k];
  }
  const double nn = static_cast<double>(ds.n());
  const ModelPerturbation cot = op.adjoint(r);
  Tensor cot_img({arch.grid_rows, arch.grid_cols});
  for (size_t k = 0; k < cot.dm.size(); ++k) cot_img.v[k] = (nn / ds.sigma2) * cot.dm[k];

  StochasticGrad out;
  out.grad = network_vjp(tape, cot_img);
  weights_axpy(lambda * lambda, w, out.grad);
  out.misfit = misfit;
  out.objective =
      0.5 * nn / ds.sigma2 * misfit + 0.5 * lambda * lambda * weights_norm_sq(w);
  return out;
}

/// Full-posterior gradient: all residual backprojections summed into one
/// cotangent, then a single VJP.
inline NetworkWeights posterior_grad(BornCache& cache, const NetworkArchitecture& arch,
                                     const LatentInput& z, const NetworkWeights& w,
                                     double lambda) {
  const Dataset& ds = cache.dataset();
  NetworkTape tape;
  const Tensor img = network_forward(arch, z, w, &tape);
  Tensor cot_img({arch.grid_rows, arch.grid_cols});
  for (int i = 0; i < ds.n(); ++i) {
    const BornOperator& op = cache.op(i);
    ShotRecord r = op.forward(as_perturbation(ds.m0.grid, img));
    const ShotRecord& dd = cache.residual(i);
    for (size_t k = 0; k < r.a.size(); ++k) r.a[k] -= dd.a[k];
    const ModelPerturbation c = op.adjoint(r);
    for (size_t k = 0; k < c.dm.size(); ++k) cot_img.v[k] += c.dm[k] / ds.sigma2;
  }
  NetworkWeights g = network_vjp(tape, cot_img);
  weights_axpy(lambda * lambda, w, g);
  return g;
}

// ---------------------------------------------------------------------------
// SGLD chain
// ---------------------------------------------------------------------------

struct SGLDConfig {
  double epsilon = 0.002;
  double lambda = 170.0;
  int total_iterations = 10000;
  int burn_in = 3000;
  int thin_every = 50;
  uint64_t seed = 0;
  bool step_decay = false;  // optional eps_k = eps (1 + k/k0)^-0.55, off by default
  double decay_k0 = 1000.0;
  double decay_exponent = 0.55;

  void validate() const {
    if (!(epsilon > 0.0)) throw std::invalid_argument("SGLDConfig: epsilon must be > 0");
    if (!(lambda > 0.0)) throw std::invalid_argument("SGLDConfig: lambda must be > 0");
    if (!(burn_in > 0 && burn_in < total_iterations))
      throw std::invalid_argument("SGLDConfig: need 0 < burn_in < total_iterations");
    if (thin_every < 1) throw std::invalid_argument("SGLDConfig: thin_every must be >= 1");
  }
  double step_at(int k) const {
    return step_decay ? epsilon * std::pow(1.0 + k / decay_k0, -decay_exponent) : epsilon;
  }
};

/// Ensemble size for a schedule: floor((total - burn_in)/thin).
inline int sgld_sample_count(int total_iterations, int burn_in, int thin_every) {
  if (!(burn_in > 0 && burn_in < total_iterations) || thin_every < 1)
    throw std::invalid_argument("sgld_sample_count: invalid schedule");
  return (total_iterations - burn_in) / thin_every;
}

struct ChainState {
  int k = 0;  // completed iterations
  NetworkWeights w;
  Rng rng;
  ChainState(NetworkWeights w0, uint64_t seed) : w(std::move(w0)), rng(mix_seed(seed, 0xc4a1)) {}
};

struct ChainDiagRow {
  int k = 0;
  int i = 0;
  double objective = 0.0;
  double grad_norm = 0.0;
  double wall_ms = 0.0;
};

struct StepHooks {
  bool zero_gradient = false;
  bool zero_noise = false;
};

/// One SGLD update w <- w - (eps/2) grad J^(i) + eta, eta ~ N(0, eps I).
/// grad_fn(w, i) must return {gradient, objective, misfit}.
template <class GradFn>
inline ChainDiagRow sgld_step(ChainState& st, int n_experiments, GradFn&& grad_fn,
                              const SGLDConfig& cfg, const StepHooks& hooks = {}) {
  const auto tic = std::chrono::steady_clock::now();
  const int i = st.rng.below(n_experiments);
  ChainDiagRow row;
  row.i = i;

  StochasticGrad g;
  if (hooks.zero_gradient) {
    g.grad = weights_zeros_like(st.w);
  } else {
    g = grad_fn(st.w, i);
  }
  const double eps = cfg.step_at(st.k);
  weights_axpy(-0.5 * eps, g.grad, st.w);
  if (!hooks.zero_noise) {
    const double s = std::sqrt(eps);
    for (auto& t : st.w.t)
      for (double& v : t.v) v += s * st.rng.normal();
  }
  ++st.k;
  if (!weights_all_finite(st.w) || weights_norm_sq(st.w) > 1e200)
    throw std::runtime_error("SGLD chain diverged: non-finite weights at iteration " +
                             std::to_string(st.k));
  row.k = st.k;
  row.objective = g.objective;
  row.grad_norm = std::sqrt(weights_norm_sq(g.grad));
  row.wall_ms =
      std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tic).count();
  return row;
}

/// Full imaging chain; retains g(z, w_k) for k > burn_in with
/// (k - burn_in) % thin == 0.
inline PosteriorEnsemble run_sgld(BornCache& cache, const NetworkArchitecture& arch,
                                  const LatentInput& z, const SGLDConfig& cfg,
                                  std::vector<ChainDiagRow>* diagnostics = nullptr) {
  cfg.validate();
  const Dataset& ds = cache.dataset();
  ChainState st(sample_prior_weights(arch, cfg.lambda, mix_seed(cfg.seed, 0x11f7)), cfg.seed);
  auto grad_fn = [&](const NetworkWeights& w, int i) {
    return stochastic_grad(cache, arch, z, w, i, cfg.lambda);
  };

  PosteriorEnsemble ens;
  ens.seed = cfg.seed;
  ens.total_iterations = cfg.total_iterations;
  ens.burn_in = cfg.burn_in;
  ens.thin_every = cfg.thin_every;
  ens.epsilon = cfg.epsilon;
  ens.lambda = cfg.lambda;
  ens.samples.reserve(
      static_cast<size_t>(sgld_sample_count(cfg.total_iterations, cfg.burn_in, cfg.thin_every)));

  for (int k = 1; k <= cfg.total_iterations; ++k) {
    ChainDiagRow row = sgld_step(st, ds.n(), grad_fn, cfg);
    if (diagnostics) diagnostics->push_back(row);
    if (k > cfg.burn_in && (k - cfg.burn_in) % cfg.thin_every == 0)
      ens.samples.push_back(network_forward(arch, z, st.w));
  }
  return ens;
}

// ---------------------------------------------------------------------------
// MAP and MLE descent
// ---------------------------------------------------------------------------

namespace inferdetail {

/// Windowed mean of recent objective values with a 10x divergence guard.
class DivergenceGuard {
 public:
  DivergenceGuard(int window, double factor) : window_(window), factor_(factor) {}
  void push(double value, int k, const char* what) {
    recent_.push_back(value);
    if (static_cast<int>(recent_.size()) > window_) recent_.pop_front();
    double mean = 0.0;
    for (double v : recent_) mean += v;
    mean /= static_cast<double>(recent_.size());
    best_ = std::min(best_, mean);
    if (static_cast<int>(recent_.size()) == window_ && mean > factor_ * best_) {
      std::ostringstream os;
      os << what << " diverged at iteration " << k << ": smoothed objective " << mean
         << " exceeds 10x its minimum " << best_ << "; recent values:";
      for (double v : recent_) os << " " << v;
      throw std::runtime_error(os.str());
    }
  }
  double smoothed() const {
    if (recent_.empty()) return 0.0;
    double mean = 0.0;
    for (double v : recent_) mean += v;
    return mean / static_cast<double>(recent_.size());
  }

 private:
  int window_;
  double factor_;
  double best_ = 1e300;
  std::deque<double> recent_;
};

}  // namespace inferdetail

struct MapConfig {
  double step = 0.0;  // <= 0: use the SGLD epsilon
  double epsilon = 0.002;
  double lambda = 170.0;
  int iterations = 3000;
  uint64_t seed = 0;
  int window = 25;

  double effective_step() const { return step > 0.0 ? step : epsilon; }
};

struct MapResult {
  Tensor image;
  NetworkWeights w;
  double final_objective = 0.0;
};

/// Stochastic gradient descent on J^(i) (same gradient as SGLD, no noise),
/// fixed step, fixed budget. Returns g(z, w_final).
inline MapResult run_map(BornCache& cache, const NetworkArchitecture& arch, const LatentInput& z,
                         const MapConfig& cfg, std::vector<ChainDiagRow>* diagnostics = nullptr) {
  if (cfg.iterations < 1) throw std::invalid_argument("run_map: iterations must be >= 1");
  const Dataset& ds = cache.dataset();
  NetworkWeights w = sample_prior_weights(arch, cfg.lambda, mix_seed(cfg.seed, 0x11f7));
  Rng rng(mix_seed(cfg.seed, 0x3a9));
  inferdetail::DivergenceGuard guard(cfg.window, 10.0);
  const double step = cfg.effective_step();

  double last_obj = 0.0;
  for (int k = 1; k <= cfg.iterations; ++k) {
    const auto tic = std::chrono::steady_clock::now();
    const int i = rng.below(ds.n());
    StochasticGrad g = stochastic_grad(cache, arch, z, w, i, cfg.lambda);
    weights_axpy(-0.5 * step, g.grad, w);
    if (!weights_all_finite(w))
      throw std::runtime_error("run_map: non-finite weights at iteration " + std::to_string(k));
    guard.push(g.objective, k, "run_map");
    last_obj = guard.smoothed();
    if (diagnostics)
      diagnostics->push_back(
          {k, i, g.objective, std::sqrt(weights_norm_sq(g.grad)),
           std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tic)
               .count()});
  }
  MapResult res;
  res.image = network_forward(arch, z, w);
  res.w = std::move(w);
  res.final_objective = last_obj;
  return res;
}

struct MleConfig {
  double step = 0.0;  // <= 0: power-iteration estimate
  int iterations = 3000;
  bool early_stop = true;
  int window = 25;
  uint64_t seed = 0;
};

/// Largest squared singular value of J_i by power iteration on J' J.
inline double estimate_born_curvature(BornCache& cache, int i, int iters, uint64_t seed) {
  const Grid& g = cache.dataset().m0.grid;
  ModelPerturbation x{g, std::vector<double>(static_cast<size_t>(g.cells()))};
  Rng rng(mix_seed(seed, 0x90e3));
  for (double& v : x.dm) v = rng.normal();
  double lam = 0.0;
  for (int k = 0; k < iters; ++k) {
    const double nx = norm2(x.dm);
    if (nx == 0.0) return 0.0;
    for (double& v : x.dm) v /= nx;
    const BornOperator& op = cache.op(i);
    ModelPerturbation y = op.adjoint(op.forward(x));
    lam = dot(x.dm, y.dm);
    x.dm.swap(y.dm);
  }
  return lam;
}

struct MleResult {
  Tensor image;
  int iterations_run = 0;
  bool early_stopped = false;
  double step_used = 0.0;
};

/// Stochastic gradient descent directly on dm (no reparameterization, no
/// prior) for the Eq-1 misfit. Early stopping by the discrepancy principle:
/// stop once the windowed mean of |dd_i - J dm|^2 / (noise_var_i * D) drops
/// to 1. Supershot records carry their own noise variance.
inline MleResult run_mle(BornCache& cache, const MleConfig& cfg,
                         std::vector<ChainDiagRow>* diagnostics = nullptr) {
  if (cfg.iterations < 1) throw std::invalid_argument("run_mle: iterations must be >= 1");
  const Dataset& ds = cache.dataset();
  const Grid& grid = ds.m0.grid;
  const double nn = static_cast<double>(ds.n());

  double step = cfg.step;
  if (step <= 0.0) {
    double curv = 0.0;
    for (int i = 0; i < std::min(ds.n(), 3); ++i)
      curv = std::max(curv, estimate_born_curvature(cache, i, 12, cfg.seed + i));
    if (curv <= 0.0) throw std::runtime_error("run_mle: operator curvature estimate failed");
    step = 0.9 * ds.sigma2 / (nn * 1.2 * curv);  // 20% headroom over the power estimate
  }

  Tensor dm({grid.nz, grid.nx});
  Rng rng(mix_seed(cfg.seed, 0x3a9));
  inferdetail::DivergenceGuard guard(cfg.window, 10.0);
  std::deque<double> ratios;

  MleResult res;
  res.step_used = step;
  const double d_samples = static_cast<double>(ds.samples_per_record());
  for (int k = 1; k <= cfg.iterations; ++k) {
    const auto tic = std::chrono::steady_clock::now();
    const int i = rng.below(ds.n());
    const BornOperator& op = cache.op(i);
    ShotRecord r = op.forward(as_perturbation(grid, dm));
    const ShotRecord& dd = cache.residual(i);
    double misfit = 0.0;
    for (size_t kk = 0; kk < r.a.size(); ++kk) {
      r.a[kk] -= dd.a[kk];
      misfit += r.a[kk] * r.a[kk];
    }
    const ModelPerturbation grad_img = op.adjoint(r);
    double gnorm2 = 0.0;
    for (size_t kk = 0; kk < grad_img.dm.size(); ++kk) {
      const double gi = (nn / ds.sigma2) * grad_img.dm[kk];
      dm.v[kk] -= step * gi;
      gnorm2 += gi * gi;
    }
    if (!dm.all_finite())
      throw std::runtime_error("run_mle: non-finite model at iteration " + std::to_string(k));
    guard.push(misfit, k, "run_mle");
    if (diagnostics)
      diagnostics->push_back(
          {k, i, 0.5 * nn / ds.sigma2 * misfit, std::sqrt(gnorm2),
           std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - tic)
               .count()});
    res.iterations_run = k;

    if (cfg.early_stop) {
      ratios.push_back(misfit / (ds.noise_var(i) * d_samples));
      if (static_cast<int>(ratios.size()) > cfg.window) ratios.pop_front();
      double mean = 0.0;
      for (double v : ratios) mean += v;
      mean /= static_cast<double>(ratios.size());
      if (static_cast<int>(ratios.size()) == cfg.window && mean <= 1.0) {
        res.early_stopped = true;
        break;
      }
    }
  }
  res.image = dm;
  return res;
}

}  // namespace bsi
