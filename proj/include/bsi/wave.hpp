#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsi/rng.hpp"
#include "bsi/tensor.hpp"

namespace bsi {

// ---------------------------------------------------------------------------
// 2D acoustic propagation, m * u_tt - lap(u) = f, on a grid padded by a
// Cerjan sponge. Scheme: 2nd-order leapfrog in time, 4th-order centered
// Laplacian in space, Dirichlet outer edge (a 2-cell zero halo keeps the
// Laplacian symmetric). One damped step reads
//
//   u[t+1] = d .* (2 u[t] + a .* (L u[t] + f[t]) - d .* u[t-1]),   a = dt^2/m
//
// with d the per-cell sponge factor (1 in the interior). The linearization of
// this recurrence in m is exact when the scattered field is driven by
//
//   f_born[t] = -dm .* s0[t],   s0[t] = (L u0[t] + f[t]) / m,
//
// which in the undamped interior equals the centered second time difference
// of u0. born_adjoint implements the exact transpose of that linear map, so
// <J x, y> = <x, J' y> holds to roundoff.
// ---------------------------------------------------------------------------

struct Point {
  double x = 0.0;
  double z = 0.0;
};

struct Grid {
  int nz = 0, nx = 0;
  double dz = 0.0, dx = 0.0;
  int nt = 0;
  double dt = 0.0;
  int sponge_width = 40;

  void validate() const {
    if (nz < 1 || nx < 1) throw std::invalid_argument("Grid: nz/nx must be positive");
    if (!(dz > 0.0) || !(dx > 0.0)) throw std::invalid_argument("Grid: spacings must be positive");
    if (nt < 2) throw std::invalid_argument("Grid: nt must be >= 2");
    if (!(dt > 0.0)) throw std::invalid_argument("Grid: dt must be positive");
    if (sponge_width < 1) throw std::invalid_argument("Grid: sponge_width must be >= 1");
  }
  double width() const { return (nx - 1) * dx; }
  double depth() const { return (nz - 1) * dz; }
  long long cells() const { return static_cast<long long>(nz) * nx; }
};

struct SquaredSlownessModel {
  Grid grid;
  std::vector<double> m;  // s^2/m^2, nz*nx row-major (z outer)

  void validate() const {
    grid.validate();
    if (static_cast<long long>(m.size()) != grid.cells())
      throw std::invalid_argument("SquaredSlownessModel: m size != grid cells");
    for (double mi : m) {
      if (!(mi > 0.0)) throw std::invalid_argument("SquaredSlownessModel: m must be positive");
      const double v = 1.0 / std::sqrt(mi);
      if (v < 100.0 || v > 10000.0)
        throw std::invalid_argument("SquaredSlownessModel: velocity " + std::to_string(v) +
                                    " m/s outside [100, 10000]");
    }
  }
  double vmax() const {
    double mn = m[0];
    for (double mi : m) mn = std::min(mn, mi);
    return 1.0 / std::sqrt(mn);
  }
};

struct ModelPerturbation {
  Grid grid;
  std::vector<double> dm;  // s^2/m^2
};

struct SourceSignature {
  std::vector<double> wavelet;  // nt samples
  Point location;
};

struct AcquisitionGeometry {
  std::vector<Point> receivers;
  std::vector<SourceSignature> sources;
};

struct ShotRecord {
  int nt = 0;
  int nrec = 0;
  std::vector<double> a;  // nt x nrec row-major
  int id = 0;

  double& at(int t, int r) { return a[static_cast<size_t>(t) * nrec + r]; }
  double at(int t, int r) const { return a[static_cast<size_t>(t) * nrec + r]; }
};

struct Wavefield {
  int nt = 0, nz = 0, nx = 0;
  std::vector<double> snaps;  // nt x nz x nx
  bool second_derivative = false;
};

inline double cfl_number(const Grid& g, double vmax) {
  return g.dt * vmax * std::sqrt(1.0 / (g.dx * g.dx) + 1.0 / (g.dz * g.dz));
}

// ---------------------------------------------------------------------------
// Ricker wavelet
// ---------------------------------------------------------------------------

inline double ricker_value(double f0, double t, double t0) {
  const double u = M_PI * f0 * (t - t0);
  const double u2 = u * u;
  return (1.0 - 2.0 * u2) * std::exp(-u2);
}

inline std::vector<double> ricker_wavelet(double f0, const Grid& g, double t0) {
  if (!(f0 > 0.0)) throw std::invalid_argument("ricker_wavelet: f0 must be positive");
  if (f0 >= 0.25 / g.dt)
    throw std::invalid_argument("ricker_wavelet: f0 = " + std::to_string(f0) +
                                " Hz too high for dt = " + std::to_string(g.dt) + " s");
  if (t0 < 1.0 / f0)
    throw std::invalid_argument("ricker_wavelet: t0 must be >= 1/f0 so the onset is near zero");
  std::vector<double> w(static_cast<size_t>(g.nt));
  for (int t = 0; t < g.nt; ++t) w[t] = ricker_value(f0, t * g.dt, t0);
  return w;
}

// ---------------------------------------------------------------------------
// Propagation core
// ---------------------------------------------------------------------------

namespace wavedetail {

inline constexpr double kMaxCfl = 0.7;
inline constexpr double kSpongeCoef = 0.0035;

struct PadGeom {
  int nz, nx, W, nzp, nxp, sx, nt;
  double dz, dx, dt;

  explicit PadGeom(const Grid& g)
      : nz(g.nz), nx(g.nx), W(g.sponge_width), nzp(g.nz + 2 * g.sponge_width),
        nxp(g.nx + 2 * g.sponge_width), sx(nxp + 4), nt(g.nt), dz(g.dz), dx(g.dx), dt(g.dt) {}

  size_t halo_cells() const { return static_cast<size_t>(nzp + 4) * sx; }
  size_t pad_cells() const { return static_cast<size_t>(nzp) * nxp; }
  size_t hid(int z, int x) const { return static_cast<size_t>(z + 2) * sx + (x + 2); }
  size_t cid(int z, int x) const { return static_cast<size_t>(z) * nxp + x; }
};

struct Tap {
  size_t h[4];  // halo-layout indices
  size_t c[4];  // compact-layout indices
  double w[4];
};

inline Tap make_tap(const PadGeom& pg, const Point& p, const char* what) {
  if (p.x < 0.0 || p.x > (pg.nx - 1) * pg.dx || p.z < 0.0 || p.z > (pg.nz - 1) * pg.dz)
    throw std::invalid_argument(std::string(what) + " at (" + std::to_string(p.x) + ", " +
                                std::to_string(p.z) + ") m outside physical domain");
  const double fx = p.x / pg.dx, fz = p.z / pg.dz;
  int ix = std::min(static_cast<int>(std::floor(fx)), pg.nx - 2);
  int iz = std::min(static_cast<int>(std::floor(fz)), pg.nz - 2);
  if (pg.nx == 1) ix = 0;
  if (pg.nz == 1) iz = 0;
  const double wx = fx - ix, wz = fz - iz;
  const int x0 = ix + pg.W, z0 = iz + pg.W;
  const int x1 = std::min(x0 + 1, pg.nxp - 1), z1 = std::min(z0 + 1, pg.nzp - 1);
  Tap t;
  t.h[0] = pg.hid(z0, x0);
  t.h[1] = pg.hid(z0, x1);
  t.h[2] = pg.hid(z1, x0);
  t.h[3] = pg.hid(z1, x1);
  t.c[0] = pg.cid(z0, x0);
  t.c[1] = pg.cid(z0, x1);
  t.c[2] = pg.cid(z1, x0);
  t.c[3] = pg.cid(z1, x1);
  t.w[0] = (1.0 - wz) * (1.0 - wx);
  t.w[1] = (1.0 - wz) * wx;
  t.w[2] = wz * (1.0 - wx);
  t.w[3] = wz * wx;
  return t;
}

/// Per-cell squared slowness on the padded grid (edge replication).
inline std::vector<double> pad_replicate(const PadGeom& pg, const std::vector<double>& interior) {
  std::vector<double> out(pg.pad_cells());
  for (int z = 0; z < pg.nzp; ++z) {
    const int iz = std::clamp(z - pg.W, 0, pg.nz - 1);
    for (int x = 0; x < pg.nxp; ++x) {
      const int ix = std::clamp(x - pg.W, 0, pg.nx - 1);
      out[pg.cid(z, x)] = interior[static_cast<size_t>(iz) * pg.nx + ix];
    }
  }
  return out;
}

/// Exact transpose of pad_replicate: sponge cells fold onto the clamped
/// interior cell they replicate.
inline std::vector<double> pad_replicate_adjoint(const PadGeom& pg,
                                                 const std::vector<double>& padded) {
  std::vector<double> out(static_cast<size_t>(pg.nz) * pg.nx, 0.0);
  for (int z = 0; z < pg.nzp; ++z) {
    const int iz = std::clamp(z - pg.W, 0, pg.nz - 1);
    for (int x = 0; x < pg.nxp; ++x) {
      const int ix = std::clamp(x - pg.W, 0, pg.nx - 1);
      out[static_cast<size_t>(iz) * pg.nx + ix] += padded[pg.cid(z, x)];
    }
  }
  return out;
}

struct StencilCoef {
  double c00, cx1, cx2, cz1, cz2;
  explicit StencilCoef(const PadGeom& pg) {
    const double ix2 = 1.0 / (pg.dx * pg.dx), iz2 = 1.0 / (pg.dz * pg.dz);
    c00 = -2.5 * (ix2 + iz2);
    cx1 = (4.0 / 3.0) * ix2;
    cx2 = (-1.0 / 12.0) * ix2;
    cz1 = (4.0 / 3.0) * iz2;
    cz2 = (-1.0 / 12.0) * iz2;
  }
};

/// One leapfrog step. `a`, `d` and the fields are halo-layout; `dmp`/`s0t`
/// (Born source) and `s0_out` (capture) are compact-layout or null.
template <bool kBornSrc, bool kCaptureS0>
inline void step_kernel(const PadGeom& pg, const StencilCoef& sc, const double* d,
                        const double* a, const double* uc, const double* up, double* un,
                        const double* dmp, const double* s0t, double* s0_out, double inv_dt2) {
  const int sx = pg.sx;
#pragma omp parallel for schedule(static)
  for (int z = 0; z < pg.nzp; ++z) {
    const size_t h0 = pg.hid(z, 0);
    const size_t c0 = pg.cid(z, 0);
    const double* ucr = uc + h0;
    const double* upr = up + h0;
    const double* dr = d + h0;
    const double* ar = a + h0;
    double* unr = un + h0;
    for (int x = 0; x < pg.nxp; ++x) {
      const double lap = sc.c00 * ucr[x] + sc.cx1 * (ucr[x - 1] + ucr[x + 1]) +
                         sc.cx2 * (ucr[x - 2] + ucr[x + 2]) +
                         sc.cz1 * (ucr[x - sx] + ucr[x + sx]) +
                         sc.cz2 * (ucr[x - 2 * sx] + ucr[x + 2 * sx]);
      double rhs = lap;
      if constexpr (kBornSrc) rhs -= dmp[c0 + x] * s0t[c0 + x];
      if constexpr (kCaptureS0) s0_out[c0 + x] = ar[x] * rhs * inv_dt2;
      unr[x] = dr[x] * (2.0 * ucr[x] + ar[x] * rhs - dr[x] * upr[x]);
    }
  }
}

/// Adjoint step: lam = 2 d .* ln + L(a .* d .* ln) - d.^2 .* ln2
inline void adjoint_step_kernel(const PadGeom& pg, const StencilCoef& sc, const double* d,
                                const double* a, const double* ln, const double* ln2,
                                double* wbuf, double* lam) {
  const int sx = pg.sx;
#pragma omp parallel for schedule(static)
  for (int z = 0; z < pg.nzp; ++z) {
    const size_t h0 = pg.hid(z, 0);
    const double* lr = ln + h0;
    const double* dr = d + h0;
    const double* ar = a + h0;
    double* wr = wbuf + h0;
    for (int x = 0; x < pg.nxp; ++x) wr[x] = ar[x] * dr[x] * lr[x];
  }
#pragma omp parallel for schedule(static)
  for (int z = 0; z < pg.nzp; ++z) {
    const size_t h0 = pg.hid(z, 0);
    const double* wr = wbuf + h0;
    const double* lr = ln + h0;
    const double* l2r = ln2 + h0;
    const double* dr = d + h0;
    double* or_ = lam + h0;
    for (int x = 0; x < pg.nxp; ++x) {
      const double lapw = sc.c00 * wr[x] + sc.cx1 * (wr[x - 1] + wr[x + 1]) +
                          sc.cx2 * (wr[x - 2] + wr[x + 2]) +
                          sc.cz1 * (wr[x - sx] + wr[x + sx]) +
                          sc.cz2 * (wr[x - 2 * sx] + wr[x + 2 * sx]);
      or_[x] = 2.0 * dr[x] * lr[x] + lapw - dr[x] * dr[x] * l2r[x];
    }
  }
}

inline double interior_max_abs(const PadGeom& pg, const double* u) {
  double mx = 0.0;
  for (int z = pg.W; z < pg.W + pg.nz; ++z) {
    const size_t h0 = pg.hid(z, 0);
    for (int x = pg.W; x < pg.W + pg.nx; ++x) mx = std::max(mx, std::fabs(u[h0 + x]));
  }
  return mx;
}

inline double padded_max_abs(const PadGeom& pg, const double* u) {
  double mx = 0.0;
  for (int z = 0; z < pg.nzp; ++z) {
    const size_t h0 = pg.hid(z, 0);
    for (int x = 0; x < pg.nxp; ++x) mx = std::max(mx, std::fabs(u[h0 + x]));
  }
  return mx;
}

}  // namespace wavedetail

struct SolveOptions {
  bool keep_snapshots = false;
  bool snapshots_second_derivative = false;  // store s0 instead of u
  bool track_max_amplitude = false;
};

struct SolveResult {
  ShotRecord record;
  Wavefield field;                   // empty unless keep_snapshots
  std::vector<double> max_amplitude;  // per time step, interior, if tracked
};

class Propagator {
 public:
  Propagator(const SquaredSlownessModel& model, std::vector<SourceSignature> sources,
             std::vector<Point> receivers)
      : pg_(model.grid), sc_(pg_), sources_(std::move(sources)), grid_(model.grid) {
    model.validate();
    const double cfl = cfl_number(model.grid, model.vmax());
    if (cfl > wavedetail::kMaxCfl)
      throw std::invalid_argument("CFL violation: dt*vmax*sqrt(1/dx^2+1/dz^2) = " +
                                  std::to_string(cfl) + " > " +
                                  std::to_string(wavedetail::kMaxCfl));
    if (sources_.empty()) throw std::invalid_argument("Propagator: no sources");
    for (const auto& s : sources_) {
      if (static_cast<int>(s.wavelet.size()) != pg_.nt)
        throw std::invalid_argument("Propagator: wavelet length " +
                                    std::to_string(s.wavelet.size()) + " != nt " +
                                    std::to_string(pg_.nt));
      src_taps_.push_back(wavedetail::make_tap(pg_, s.location, "source"));
    }
    if (receivers.empty()) throw std::invalid_argument("Propagator: no receivers");
    for (const auto& r : receivers) rec_taps_.push_back(wavedetail::make_tap(pg_, r, "receiver"));
    nrec_ = static_cast<int>(receivers.size());

    const std::vector<double> m_pad = wavedetail::pad_replicate(pg_, model.m);
    a_.assign(pg_.halo_cells(), 0.0);
    d_.assign(pg_.halo_cells(), 0.0);
    const double dt2 = pg_.dt * pg_.dt;
    for (int z = 0; z < pg_.nzp; ++z) {
      const int jz = std::max({0, pg_.W - z, z - (pg_.W + pg_.nz - 1)});
      for (int x = 0; x < pg_.nxp; ++x) {
        const int jx = std::max({0, pg_.W - x, x - (pg_.W + pg_.nx - 1)});
        const int j = std::max(jz, jx);
        const double arg = wavedetail::kSpongeCoef * j;
        d_[pg_.hid(z, x)] = std::exp(-arg * arg);
        a_[pg_.hid(z, x)] = dt2 / m_pad[pg_.cid(z, x)];
      }
    }
    inv_area_ = 1.0 / (pg_.dx * pg_.dz);
  }

  const wavedetail::PadGeom& pad_geom() const { return pg_; }
  int nrec() const { return nrec_; }

  /// Background/nonlinear forward solve. If s0_out != null it receives nt
  /// compact slices of (L u + f)/m, the Born scattering kernel.
  SolveResult run_forward(std::vector<double>* s0_out, const SolveOptions& opts = {}) const {
    SolveResult res;
    res.record = blank_record();
    const size_t nc = pg_.halo_cells();
    std::vector<double> up(nc, 0.0), uc(nc, 0.0), un(nc, 0.0);
    if (s0_out) s0_out->assign(static_cast<size_t>(pg_.nt) * pg_.pad_cells(), 0.0);
    if (opts.keep_snapshots) {
      res.field.nt = pg_.nt;
      res.field.nz = pg_.nz;
      res.field.nx = pg_.nx;
      res.field.second_derivative = opts.snapshots_second_derivative;
      res.field.snaps.assign(static_cast<size_t>(pg_.nt) * pg_.nz * pg_.nx, 0.0);
    }
    if (opts.track_max_amplitude) res.max_amplitude.assign(pg_.nt, 0.0);
    const double inv_dt2 = 1.0 / (pg_.dt * pg_.dt);

    for (int t = 1; t <= pg_.nt - 2; ++t) {
      double* s0t = s0_out ? s0_out->data() + static_cast<size_t>(t) * pg_.pad_cells() : nullptr;
      if (s0t)
        wavedetail::step_kernel<false, true>(pg_, sc_, d_.data(), a_.data(), uc.data(), up.data(),
                                             un.data(), nullptr, nullptr, s0t, inv_dt2);
      else
        wavedetail::step_kernel<false, false>(pg_, sc_, d_.data(), a_.data(), uc.data(),
                                              up.data(), un.data(), nullptr, nullptr, nullptr,
                                              inv_dt2);
      // point sources enter the same slot as the volumetric term
      for (size_t si = 0; si < sources_.size(); ++si) {
        const double q = sources_[si].wavelet[t] * inv_area_;
        if (q == 0.0) continue;
        const wavedetail::Tap& tp = src_taps_[si];
        for (int c = 0; c < 4; ++c) {
          un[tp.h[c]] += d_[tp.h[c]] * a_[tp.h[c]] * tp.w[c] * q;
          if (s0t) s0t[tp.c[c]] += a_[tp.h[c]] * tp.w[c] * q * inv_dt2;
        }
      }
      check_finite(un.data(), t + 1);
      extract(un.data(), t + 1, res.record);
      if (opts.keep_snapshots) {
        if (opts.snapshots_second_derivative)
          store_slice(res.field, t, s0t);  // s0 slice t pairs with the step that built u[t+1]
        else
          store_field(res.field, t + 1, un.data());
      }
      if (opts.track_max_amplitude)
        res.max_amplitude[t + 1] = wavedetail::interior_max_abs(pg_, un.data());
      up.swap(uc);
      uc.swap(un);
    }
    return res;
  }

  /// Scattered-field propagation driven by -dm_pad .* s0.
  ShotRecord run_born_scattered(const std::vector<double>& s0,
                                const std::vector<double>& dm_pad) const {
    ShotRecord rec = blank_record();
    const size_t nc = pg_.halo_cells();
    std::vector<double> up(nc, 0.0), uc(nc, 0.0), un(nc, 0.0);
    for (int t = 1; t <= pg_.nt - 2; ++t) {
      const double* s0t = s0.data() + static_cast<size_t>(t) * pg_.pad_cells();
      wavedetail::step_kernel<true, false>(pg_, sc_, d_.data(), a_.data(), uc.data(), up.data(),
                                           un.data(), dm_pad.data(), s0t, nullptr, 0.0);
      check_finite(un.data(), t + 1);
      extract(un.data(), t + 1, rec);
      up.swap(uc);
      uc.swap(un);
    }
    return rec;
  }

  /// Exact transpose of run_born_scattered as a map dm_pad -> record,
  /// returning the compact padded-grid image.
  std::vector<double> run_adjoint(const std::vector<double>& s0, const ShotRecord& residual) const {
    if (residual.nt != pg_.nt || residual.nrec != nrec_)
      throw std::invalid_argument("born_adjoint: residual is " + std::to_string(residual.nt) +
                                  "x" + std::to_string(residual.nrec) + ", expected " +
                                  std::to_string(pg_.nt) + "x" + std::to_string(nrec_));
    const size_t nc = pg_.halo_cells();
    std::vector<double> ln(nc, 0.0), ln2(nc, 0.0), lam(nc, 0.0), wbuf(nc, 0.0);
    std::vector<double> image(pg_.pad_cells(), 0.0);
    for (int s = pg_.nt - 1; s >= 2; --s) {
      wavedetail::adjoint_step_kernel(pg_, sc_, d_.data(), a_.data(), ln.data(), ln2.data(),
                                      wbuf.data(), lam.data());
      for (int r = 0; r < nrec_; ++r) {
        const double y = residual.at(s, r);
        if (y == 0.0) continue;
        const wavedetail::Tap& tp = rec_taps_[r];
        for (int c = 0; c < 4; ++c) lam[tp.h[c]] += tp.w[c] * y;
      }
      // f_bar[s-1] = a .* d .* lam[s]; image -= s0[s-1] .* f_bar[s-1]
      const double* s0t = s0.data() + static_cast<size_t>(s - 1) * pg_.pad_cells();
#pragma omp parallel for schedule(static)
      for (int z = 0; z < pg_.nzp; ++z) {
        const size_t h0 = pg_.hid(z, 0);
        const size_t c0 = pg_.cid(z, 0);
        for (int x = 0; x < pg_.nxp; ++x)
          image[c0 + x] -= s0t[c0 + x] * a_[h0 + x] * d_[h0 + x] * lam[h0 + x];
      }
      ln2.swap(ln);
      ln.swap(lam);
    }
    return image;
  }

  std::vector<double> pad_model_vector(const std::vector<double>& interior) const {
    return wavedetail::pad_replicate(pg_, interior);
  }
  std::vector<double> unpad_adjoint(const std::vector<double>& padded) const {
    return wavedetail::pad_replicate_adjoint(pg_, padded);
  }

 private:
  ShotRecord blank_record() const {
    ShotRecord r;
    r.nt = pg_.nt;
    r.nrec = nrec_;
    r.a.assign(static_cast<size_t>(pg_.nt) * nrec_, 0.0);
    return r;
  }

  void extract(const double* u, int t, ShotRecord& rec) const {
    for (int r = 0; r < nrec_; ++r) {
      const wavedetail::Tap& tp = rec_taps_[r];
      rec.at(t, r) = tp.w[0] * u[tp.h[0]] + tp.w[1] * u[tp.h[1]] + tp.w[2] * u[tp.h[2]] +
                     tp.w[3] * u[tp.h[3]];
    }
  }

  void store_field(Wavefield& f, int t, const double* u) const {
    double* dst = &f.snaps[static_cast<size_t>(t) * pg_.nz * pg_.nx];
    for (int z = 0; z < pg_.nz; ++z) {
      const size_t h0 = pg_.hid(z + pg_.W, 0);
      for (int x = 0; x < pg_.nx; ++x)
        dst[static_cast<size_t>(z) * pg_.nx + x] = u[h0 + pg_.W + x];
    }
  }

  void store_slice(Wavefield& f, int t, const double* s0t) const {
    if (!s0t) return;
    double* dst = &f.snaps[static_cast<size_t>(t) * pg_.nz * pg_.nx];
    for (int z = 0; z < pg_.nz; ++z)
      for (int x = 0; x < pg_.nx; ++x)
        dst[static_cast<size_t>(z) * pg_.nx + x] = s0t[pg_.cid(z + pg_.W, x + pg_.W)];
  }

  void check_finite(const double* u, int t) const {
    const double mx = wavedetail::padded_max_abs(pg_, u);
    if (!std::isfinite(mx) || mx > 1e200)
      throw std::runtime_error("propagation unstable: non-finite field at step " +
                               std::to_string(t));
  }

  wavedetail::PadGeom pg_;
  wavedetail::StencilCoef sc_;
  std::vector<SourceSignature> sources_;
  Grid grid_;
  std::vector<wavedetail::Tap> src_taps_, rec_taps_;
  int nrec_ = 0;
  std::vector<double> a_, d_;
  double inv_area_ = 0.0;
};

/// Holds the background scattering kernel s0 for one (model, source set) so
/// repeated J / J' applications cost a single propagation each.
class BornOperator {
 public:
  BornOperator(const SquaredSlownessModel& m0, std::vector<SourceSignature> sources,
               std::vector<Point> receivers)
      : prop_(m0, std::move(sources), std::move(receivers)), grid_(m0.grid) {
    SolveResult bg = prop_.run_forward(&s0_);
    background_ = std::move(bg.record);
  }

  const ShotRecord& background_record() const { return background_; }
  const Grid& grid() const { return grid_; }

  ShotRecord forward(const ModelPerturbation& dm) const {
    if (static_cast<long long>(dm.dm.size()) != grid_.cells())
      throw std::invalid_argument("born_forward: dm size != grid cells");
    return prop_.run_born_scattered(s0_, prop_.pad_model_vector(dm.dm));
  }

  ModelPerturbation adjoint(const ShotRecord& residual) const {
    ModelPerturbation out;
    out.grid = grid_;
    out.dm = prop_.unpad_adjoint(prop_.run_adjoint(s0_, residual));
    return out;
  }

  size_t bytes() const { return s0_.size() * sizeof(double); }

 private:
  Propagator prop_;
  Grid grid_;
  std::vector<double> s0_;
  ShotRecord background_;
};

// ---------------------------------------------------------------------------
// Spec-level entry points
// ---------------------------------------------------------------------------

inline SolveResult solve_forward(const SquaredSlownessModel& m,
                                 const std::vector<SourceSignature>& sources,
                                 const std::vector<Point>& receivers,
                                 const SolveOptions& opts = {}) {
  Propagator prop(m, sources, receivers);
  if (opts.keep_snapshots && opts.snapshots_second_derivative) {
    std::vector<double> s0;  // snapshot storage reads the capture slices
    return prop.run_forward(&s0, opts);
  }
  return prop.run_forward(nullptr, opts);
}

inline SolveResult solve_forward(const SquaredSlownessModel& m, const SourceSignature& src,
                                 const std::vector<Point>& receivers,
                                 const SolveOptions& opts = {}) {
  return solve_forward(m, std::vector<SourceSignature>{src}, receivers, opts);
}

inline ShotRecord born_forward(const SquaredSlownessModel& m0,
                               const std::vector<SourceSignature>& sources,
                               const std::vector<Point>& receivers,
                               const ModelPerturbation& dm) {
  return BornOperator(m0, sources, receivers).forward(dm);
}

inline ModelPerturbation born_adjoint(const SquaredSlownessModel& m0,
                                      const std::vector<SourceSignature>& sources,
                                      const std::vector<Point>& receivers,
                                      const ShotRecord& residual) {
  return BornOperator(m0, sources, receivers).adjoint(residual);
}

/// max over trials of |<Jx,y> - <x,J'y>| / (|Jx| |y|)
inline double dot_product_test(const SquaredSlownessModel& m0,
                               const std::vector<SourceSignature>& sources,
                               const std::vector<Point>& receivers, int trials, uint64_t seed) {
  if (trials < 1) throw std::invalid_argument("dot_product_test: trials must be >= 1");
  BornOperator op(m0, sources, receivers);
  Rng rng(mix_seed(seed, 0x0d07));
  double worst = 0.0;
  for (int k = 0; k < trials; ++k) {
    ModelPerturbation x;
    x.grid = m0.grid;
    x.dm.resize(static_cast<size_t>(m0.grid.cells()));
    for (double& v : x.dm) v = rng.normal();
    ShotRecord y;
    y.nt = m0.grid.nt;
    y.nrec = static_cast<int>(receivers.size());
    y.a.resize(static_cast<size_t>(y.nt) * y.nrec);
    for (double& v : y.a) v = rng.normal();

    const ShotRecord jx = op.forward(x);
    const ModelPerturbation jty = op.adjoint(y);
    const double lhs = dot(jx.a, y.a);
    const double rhs = dot(x.dm, jty.dm);
    const double denom = norm2(jx.a) * norm2(y.a);
    if (denom == 0.0) continue;
    worst = std::max(worst, std::fabs(lhs - rhs) / denom);
  }
  return worst;
}

}  // namespace bsi
