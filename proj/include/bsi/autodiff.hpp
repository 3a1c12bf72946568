#pragma once

#include <cmath>
#include <functional>
#include <stdexcept>
#include <string>
#include <vector>

#include "bsi/tensor.hpp"

namespace bsi {

/// Mirror-without-repeat reflection of index i into [0, n).
inline int reflect_index(int i, int n) {
  if (n == 1) return 0;
  while (i < 0 || i >= n) {
    if (i < 0) i = -i;
    if (i >= n) i = 2 * n - 2 - i;
  }
  return i;
}

enum class OpKind {
  Leaf,
  Conv2d,       // parents: input [Ci,H,W], kernel [Co,Ci,k,k], bias [Co]; i0 = stride
  LeakyRelu,    // a = slope
  Upsample2x,   // bilinear, align-corners-false
  ConcatC,      // channel concatenation of two [.,H,W]
  Scale,        // a = factor
  Sum,          // scalar reduction, output shape [1]
  Crop2d,       // top-left crop to i0 x i1 rows/cols
};

struct TapeNode {
  OpKind kind = OpKind::Leaf;
  std::vector<int> parents;
  Tensor value;
  int i0 = 0;
  int i1 = 0;
  double a = 0.0;
  bool requires_grad = false;
};

namespace detail {

/// out[co,oy,ox] = bias[co] + sum_{ci,ky,kx} in[ci, R(s*oy+ky-p), R(s*ox+kx-p)] * K[co,ci,ky,kx]
inline Tensor conv2d_forward(const Tensor& in, const Tensor& kernel, const Tensor& bias,
                             int stride) {
  if (in.rank() != 3) throw std::invalid_argument("conv2d: input rank must be 3 (C,H,W)");
  if (kernel.rank() != 4) throw std::invalid_argument("conv2d: kernel rank must be 4 (Co,Ci,k,k)");
  const int Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int Co = kernel.dim(0), k = kernel.dim(2);
  if (kernel.dim(1) != Ci)
    throw std::invalid_argument("conv2d: kernel input-channel dim " +
                                std::to_string(kernel.dim(1)) + " != input channels " +
                                std::to_string(Ci));
  if (kernel.dim(3) != k) throw std::invalid_argument("conv2d: kernel must be square");
  if (k % 2 == 0) throw std::invalid_argument("conv2d: kernel size must be odd, got " +
                                              std::to_string(k));
  if (bias.rank() != 1 || bias.dim(0) != Co)
    throw std::invalid_argument("conv2d: bias dim " + Tensor::shape_str(bias.shape) +
                                " != output channels " + std::to_string(Co));
  if (stride != 1 && stride != 2) throw std::invalid_argument("conv2d: stride must be 1 or 2");
  if (stride == 2 && (H % 2 || W % 2))
    throw std::invalid_argument("conv2d: stride-2 requires even spatial dims, got " +
                                std::to_string(H) + "x" + std::to_string(W));
  const int p = (k - 1) / 2;
  const int Ho = H / stride, Wo = W / stride;
  Tensor out({Co, Ho, Wo});

#pragma omp parallel for schedule(static)
  for (int co = 0; co < Co; ++co) {
    double* outc = &out.v[static_cast<size_t>(co) * Ho * Wo];
    const double b = bias.v[co];
    for (int i = 0; i < Ho * Wo; ++i) outc[i] = b;
    for (int ci = 0; ci < Ci; ++ci) {
      const double* inc = &in.v[static_cast<size_t>(ci) * H * W];
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double w = kernel.v[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx];
          if (w == 0.0) continue;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = reflect_index(stride * oy + ky - p, H);
            const double* irow = inc + static_cast<size_t>(iy) * W;
            double* orow = outc + static_cast<size_t>(oy) * Wo;
            if (stride == 1) {
              const int off = kx - p;
              const int lo = (off < 0) ? -off : 0;
              const int hi = (off > 0) ? Wo - off : Wo;  // [lo,hi) maps in-range
              for (int ox = 0; ox < lo; ++ox)
                orow[ox] += w * irow[reflect_index(ox + off, W)];
              for (int ox = lo; ox < hi; ++ox) orow[ox] += w * irow[ox + off];
              for (int ox = hi; ox < Wo; ++ox)
                orow[ox] += w * irow[reflect_index(ox + off, W)];
            } else {
              for (int ox = 0; ox < Wo; ++ox)
                orow[ox] += w * irow[reflect_index(2 * ox + kx - p, W)];
            }
          }
        }
      }
    }
  }
  return out;
}

inline void conv2d_vjp(const Tensor& in, const Tensor& kernel, int stride, const Tensor& gout,
                       Tensor& gin, Tensor& gkernel, Tensor& gbias) {
  const int Ci = in.dim(0), H = in.dim(1), W = in.dim(2);
  const int Co = kernel.dim(0), k = kernel.dim(2);
  const int p = (k - 1) / 2;
  const int Ho = H / stride, Wo = W / stride;

  // bias and kernel gradients: each co slice owned by one worker
#pragma omp parallel for schedule(static)
  for (int co = 0; co < Co; ++co) {
    const double* gc = &gout.v[static_cast<size_t>(co) * Ho * Wo];
    double s = 0.0;
    for (int i = 0; i < Ho * Wo; ++i) s += gc[i];
    gbias.v[co] += s;
    for (int ci = 0; ci < Ci; ++ci) {
      const double* inc = &in.v[static_cast<size_t>(ci) * H * W];
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          double acc = 0.0;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = reflect_index(stride * oy + ky - p, H);
            const double* irow = inc + static_cast<size_t>(iy) * W;
            const double* grow = gc + static_cast<size_t>(oy) * Wo;
            for (int ox = 0; ox < Wo; ++ox)
              acc += grow[ox] * irow[reflect_index(stride * ox + kx - p, W)];
          }
          gkernel.v[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx] += acc;
        }
      }
    }
  }

  // input gradient: each ci slice owned by one worker
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < Ci; ++ci) {
    double* gic = &gin.v[static_cast<size_t>(ci) * H * W];
    for (int co = 0; co < Co; ++co) {
      const double* gc = &gout.v[static_cast<size_t>(co) * Ho * Wo];
      for (int ky = 0; ky < k; ++ky) {
        for (int kx = 0; kx < k; ++kx) {
          const double w = kernel.v[((static_cast<size_t>(co) * Ci + ci) * k + ky) * k + kx];
          if (w == 0.0) continue;
          for (int oy = 0; oy < Ho; ++oy) {
            const int iy = reflect_index(stride * oy + ky - p, H);
            double* girow = gic + static_cast<size_t>(iy) * W;
            const double* grow = gc + static_cast<size_t>(oy) * Wo;
            if (stride == 1) {
              const int off = kx - p;
              const int lo = (off < 0) ? -off : 0;
              const int hi = (off > 0) ? Wo - off : Wo;
              for (int ox = 0; ox < lo; ++ox)
                girow[reflect_index(ox + off, W)] += w * grow[ox];
              for (int ox = lo; ox < hi; ++ox) girow[ox + off] += w * grow[ox];
              for (int ox = hi; ox < Wo; ++ox)
                girow[reflect_index(ox + off, W)] += w * grow[ox];
            } else {
              for (int ox = 0; ox < Wo; ++ox)
                girow[reflect_index(2 * ox + kx - p, W)] += w * grow[ox];
            }
          }
        }
      }
    }
  }
}

/// Bilinear 2x upsample, align-corners-false:
///   src = (o + 0.5)/2 - 0.5, neighbors floor(src), floor(src)+1 clamped to the
///   valid range, weights (1-frac, frac). For the 2x factor this reduces to
///   even o=2i -> rows (i-1, i) with weights (0.25, 0.75),
///   odd  o=2i+1 -> rows (i, i+1) with weights (0.75, 0.25), clamped at borders.
inline void upsample2x_taps(int o, int n, int& i0, int& i1, double& w0, double& w1) {
  const double src = 0.5 * (o + 0.5) - 0.5;
  double fl = std::floor(src);
  double frac = src - fl;
  i0 = static_cast<int>(fl);
  i1 = i0 + 1;
  w0 = 1.0 - frac;
  w1 = frac;
  if (i0 < 0) i0 = 0;
  if (i1 > n - 1) i1 = n - 1;
}

inline Tensor upsample2x_forward(const Tensor& in) {
  if (in.rank() != 3) throw std::invalid_argument("upsample2x: input rank must be 3");
  const int C = in.dim(0), H = in.dim(1), W = in.dim(2);
  Tensor out({C, 2 * H, 2 * W});
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    const double* inc = &in.v[static_cast<size_t>(c) * H * W];
    double* outc = &out.v[static_cast<size_t>(c) * 4 * H * W];
    for (int oy = 0; oy < 2 * H; ++oy) {
      int y0, y1;
      double wy0, wy1;
      upsample2x_taps(oy, H, y0, y1, wy0, wy1);
      const double* r0 = inc + static_cast<size_t>(y0) * W;
      const double* r1 = inc + static_cast<size_t>(y1) * W;
      double* orow = outc + static_cast<size_t>(oy) * 2 * W;
      for (int ox = 0; ox < 2 * W; ++ox) {
        int x0, x1;
        double wx0, wx1;
        upsample2x_taps(ox, W, x0, x1, wx0, wx1);
        orow[ox] = wy0 * (wx0 * r0[x0] + wx1 * r0[x1]) + wy1 * (wx0 * r1[x0] + wx1 * r1[x1]);
      }
    }
  }
  return out;
}

inline void upsample2x_vjp(const Tensor& gout, int H, int W, Tensor& gin) {
  const int C = gin.dim(0);
#pragma omp parallel for schedule(static)
  for (int c = 0; c < C; ++c) {
    double* gic = &gin.v[static_cast<size_t>(c) * H * W];
    const double* gc = &gout.v[static_cast<size_t>(c) * 4 * H * W];
    for (int oy = 0; oy < 2 * H; ++oy) {
      int y0, y1;
      double wy0, wy1;
      upsample2x_taps(oy, H, y0, y1, wy0, wy1);
      const double* grow = gc + static_cast<size_t>(oy) * 2 * W;
      for (int ox = 0; ox < 2 * W; ++ox) {
        int x0, x1;
        double wx0, wx1;
        upsample2x_taps(ox, W, x0, x1, wx0, wx1);
        const double g = grow[ox];
        gic[y0 * W + x0] += wy0 * wx0 * g;
        gic[y0 * W + x1] += wy0 * wx1 * g;
        gic[y1 * W + x0] += wy1 * wx0 * g;
        gic[y1 * W + x1] += wy1 * wx1 * g;
      }
    }
  }
}

}  // namespace detail

/// Rebuilt on every forward pass: an ordered list of op nodes in topological
/// order (parents always precede children), storing every forward value so
/// VJPs can read them back.
class Tape {
 public:
  int leaf(Tensor t, bool requires_grad) {
    TapeNode n;
    n.kind = OpKind::Leaf;
    n.value = std::move(t);
    n.requires_grad = requires_grad;
    nodes_.push_back(std::move(n));
    return last();
  }

  int conv2d(int input, int kernel, int bias, int stride = 1) {
    TapeNode n;
    n.kind = OpKind::Conv2d;
    n.parents = {check(input), check(kernel), check(bias)};
    n.i0 = stride;
    n.value = detail::conv2d_forward(nodes_[input].value, nodes_[kernel].value,
                                     nodes_[bias].value, stride);
    nodes_.push_back(std::move(n));
    return last();
  }

  int leaky_relu(int x, double alpha) {
    if (!(alpha > 0.0 && alpha < 1.0))
      throw std::invalid_argument("leaky_relu: alpha must be in (0,1)");
    TapeNode n;
    n.kind = OpKind::LeakyRelu;
    n.parents = {check(x)};
    n.a = alpha;
    n.value = nodes_[x].value;
    for (double& u : n.value.v) u = (u >= 0.0) ? u : alpha * u;
    nodes_.push_back(std::move(n));
    return last();
  }

  int upsample2x(int x) {
    TapeNode n;
    n.kind = OpKind::Upsample2x;
    n.parents = {check(x)};
    n.value = detail::upsample2x_forward(nodes_[x].value);
    nodes_.push_back(std::move(n));
    return last();
  }

  int concat_channels(int a, int b) {
    const Tensor& ta = nodes_[check(a)].value;
    const Tensor& tb = nodes_[check(b)].value;
    if (ta.rank() != 3 || tb.rank() != 3 || ta.dim(1) != tb.dim(1) || ta.dim(2) != tb.dim(2))
      throw std::invalid_argument("concat_channels: spatial dims differ: " +
                                  Tensor::shape_str(ta.shape) + " vs " +
                                  Tensor::shape_str(tb.shape));
    TapeNode n;
    n.kind = OpKind::ConcatC;
    n.parents = {a, b};
    n.value = Tensor({ta.dim(0) + tb.dim(0), ta.dim(1), ta.dim(2)});
    std::copy(ta.v.begin(), ta.v.end(), n.value.v.begin());
    std::copy(tb.v.begin(), tb.v.end(), n.value.v.begin() + ta.numel());
    nodes_.push_back(std::move(n));
    return last();
  }

  int scale(int x, double factor) {
    TapeNode n;
    n.kind = OpKind::Scale;
    n.parents = {check(x)};
    n.a = factor;
    n.value = nodes_[x].value;
    for (double& u : n.value.v) u *= factor;
    nodes_.push_back(std::move(n));
    return last();
  }

  int sum(int x) {
    TapeNode n;
    n.kind = OpKind::Sum;
    n.parents = {check(x)};
    double s = 0.0;
    for (double u : nodes_[x].value.v) s += u;
    n.value = Tensor({1}, {s});
    nodes_.push_back(std::move(n));
    return last();
  }

  int crop2d(int x, int h, int w) {
    const Tensor& t = nodes_[check(x)].value;
    if (t.rank() != 3 || h > t.dim(1) || w > t.dim(2))
      throw std::invalid_argument("crop2d: crop " + std::to_string(h) + "x" + std::to_string(w) +
                                  " exceeds input " + Tensor::shape_str(t.shape));
    TapeNode n;
    n.kind = OpKind::Crop2d;
    n.parents = {x};
    n.i0 = h;
    n.i1 = w;
    n.value = Tensor({t.dim(0), h, w});
    for (int c = 0; c < t.dim(0); ++c)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx) n.value.at3(c, y, xx) = t.at3(c, y, xx);
    nodes_.push_back(std::move(n));
    return last();
  }

  const Tensor& value(int id) const { return nodes_.at(static_cast<size_t>(id)).value; }
  const TapeNode& node(int id) const { return nodes_.at(static_cast<size_t>(id)); }
  int size() const { return static_cast<int>(nodes_.size()); }

  /// Reverse-mode sweep from `output`. Leaves never reached keep zero
  /// gradients. Returns one gradient tensor per node; only leaves with
  /// requires_grad are populated with meaningful values, but intermediate
  /// gradients are returned too for inspection.
  std::vector<Tensor> backward(int output, const Tensor& cotangent) const {
    check(output);
    if (!cotangent.same_shape(nodes_[output].value))
      throw std::invalid_argument("backward: cotangent shape " +
                                  Tensor::shape_str(cotangent.shape) + " != output shape " +
                                  Tensor::shape_str(nodes_[output].value.shape));
    std::vector<Tensor> grads(nodes_.size());
    std::vector<char> live(nodes_.size(), 0);
    auto touch = [&](int id) {
      if (!live[id]) {
        grads[id] = Tensor(nodes_[id].value.shape);
        live[id] = 1;
      }
      return &grads[id];
    };
    *touch(output) = cotangent;

    for (int id = output; id >= 0; --id) {
      if (!live[id]) continue;
      const TapeNode& n = nodes_[id];
      const Tensor& g = grads[id];
      switch (n.kind) {
        case OpKind::Leaf:
          break;
        case OpKind::Conv2d: {
          const Tensor& in = nodes_[n.parents[0]].value;
          const Tensor& k = nodes_[n.parents[1]].value;
          detail::conv2d_vjp(in, k, n.i0, g, *touch(n.parents[0]), *touch(n.parents[1]),
                             *touch(n.parents[2]));
          break;
        }
        case OpKind::LeakyRelu: {
          Tensor* gi = touch(n.parents[0]);
          const Tensor& x = nodes_[n.parents[0]].value;
          for (size_t i = 0; i < x.v.size(); ++i)
            gi->v[i] += g.v[i] * ((x.v[i] >= 0.0) ? 1.0 : n.a);
          break;
        }
        case OpKind::Upsample2x: {
          const Tensor& x = nodes_[n.parents[0]].value;
          detail::upsample2x_vjp(g, x.dim(1), x.dim(2), *touch(n.parents[0]));
          break;
        }
        case OpKind::ConcatC: {
          const Tensor& a = nodes_[n.parents[0]].value;
          Tensor* ga = touch(n.parents[0]);
          Tensor* gb = touch(n.parents[1]);
          for (long long i = 0; i < a.numel(); ++i) ga->v[i] += g.v[i];
          for (long long i = 0; i < gb->numel(); ++i) gb->v[i] += g.v[a.numel() + i];
          break;
        }
        case OpKind::Scale: {
          Tensor* gi = touch(n.parents[0]);
          for (size_t i = 0; i < g.v.size(); ++i) gi->v[i] += n.a * g.v[i];
          break;
        }
        case OpKind::Sum: {
          Tensor* gi = touch(n.parents[0]);
          for (double& u : gi->v) u += g.v[0];
          break;
        }
        case OpKind::Crop2d: {
          Tensor* gi = touch(n.parents[0]);
          const int C = gi->dim(0), h = n.i0, w = n.i1;
          for (int c = 0; c < C; ++c)
            for (int y = 0; y < h; ++y)
              for (int x = 0; x < w; ++x) gi->at3(c, y, x) += g.at3(c, y, x);
          break;
        }
      }
    }
    // untouched nodes: materialize zero tensors so callers can index freely
    for (size_t i = 0; i < grads.size(); ++i)
      if (!live[i]) grads[i] = Tensor(nodes_[i].value.shape);
    return grads;
  }

  /// Re-runs every non-leaf op from stored parent values and compares against
  /// the stored outputs. Returns true when the replay is bit-identical.
  bool replay_matches() const {
    for (const TapeNode& n : nodes_) {
      Tensor re;
      switch (n.kind) {
        case OpKind::Leaf:
          continue;
        case OpKind::Conv2d:
          re = detail::conv2d_forward(nodes_[n.parents[0]].value, nodes_[n.parents[1]].value,
                                      nodes_[n.parents[2]].value, n.i0);
          break;
        case OpKind::LeakyRelu: {
          re = nodes_[n.parents[0]].value;
          for (double& u : re.v) u = (u >= 0.0) ? u : n.a * u;
          break;
        }
        case OpKind::Upsample2x:
          re = detail::upsample2x_forward(nodes_[n.parents[0]].value);
          break;
        case OpKind::ConcatC: {
          const Tensor& a = nodes_[n.parents[0]].value;
          const Tensor& b = nodes_[n.parents[1]].value;
          re = Tensor({a.dim(0) + b.dim(0), a.dim(1), a.dim(2)});
          std::copy(a.v.begin(), a.v.end(), re.v.begin());
          std::copy(b.v.begin(), b.v.end(), re.v.begin() + a.numel());
          break;
        }
        case OpKind::Scale: {
          re = nodes_[n.parents[0]].value;
          for (double& u : re.v) u *= n.a;
          break;
        }
        case OpKind::Sum: {
          double s = 0.0;
          for (double u : nodes_[n.parents[0]].value.v) s += u;
          re = Tensor({1}, {s});
          break;
        }
        case OpKind::Crop2d: {
          const Tensor& t = nodes_[n.parents[0]].value;
          re = Tensor({t.dim(0), n.i0, n.i1});
          for (int c = 0; c < t.dim(0); ++c)
            for (int y = 0; y < n.i0; ++y)
              for (int x = 0; x < n.i1; ++x) re.at3(c, y, x) = t.at3(c, y, x);
          break;
        }
      }
      if (re.v != n.value.v) return false;
    }
    return true;
  }

 private:
  int check(int id) const {
    if (id < 0 || id >= size()) throw std::out_of_range("Tape: bad node id");
    return id;
  }
  int last() const { return static_cast<int>(nodes_.size()) - 1; }

  std::vector<TapeNode> nodes_;
};

/// Max over coordinates of |analytic - central difference| /
/// max(|analytic|, |central|, 1e-12). Throws on non-finite f values.
inline double gradient_check(const std::function<double(const Tensor&)>& f,
                             const std::function<Tensor(const Tensor&)>& grad_f,
                             const Tensor& point, double step) {
  Tensor g = grad_f(point);
  if (!g.same_shape(point)) throw std::invalid_argument("gradient_check: gradient shape mismatch");
  Tensor p = point;
  double worst = 0.0;
  for (size_t i = 0; i < p.v.size(); ++i) {
    const double x0 = p.v[i];
    p.v[i] = x0 + step;
    const double fp = f(p);
    p.v[i] = x0 - step;
    const double fm = f(p);
    p.v[i] = x0;
    if (!std::isfinite(fp) || !std::isfinite(fm))
      throw std::runtime_error("gradient_check: non-finite objective near coordinate " +
                               std::to_string(i));
    const double fd = (fp - fm) / (2.0 * step);
    const double denom = std::max({std::fabs(g.v[i]), std::fabs(fd), 1e-12});
    worst = std::max(worst, std::fabs(g.v[i] - fd) / denom);
  }
  return worst;
}

}  // namespace bsi
