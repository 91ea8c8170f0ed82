#include "cart/mumford_shah.hpp"

#include <algorithm>
#include <cmath>

#include "cart/errors.hpp"

namespace cart::ms {

namespace {

constexpr double kJacobiWeight = 0.8;

// Squared forward-difference gradient of u at each pixel, summed over
// channels. Replicate boundary: the difference across the border is zero.
std::vector<double> grad_sq(const Image& u) {
  const int h = u.height, w = u.width, c = u.channels;
  std::vector<double> g(static_cast<size_t>(h) * w, 0.0);
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      double acc = 0.0;
      for (int ch = 0; ch < c; ++ch) {
        const double v = u.at(y, x, ch);
        if (x + 1 < w) {
          const double dx = u.at(y, x + 1, ch) - v;
          acc += dx * dx;
        }
        if (y + 1 < h) {
          const double dy = u.at(y + 1, x, ch) - v;
          acc += dy * dy;
        }
      }
      g[static_cast<size_t>(y) * w + x] = acc;
    }
  }
  return g;
}

}  // namespace

void ATConfig::validate() const {
  if (alpha <= 0 || lambda <= 0 || epsilon <= 0) throw ConfigError("alpha, lambda, epsilon must be positive");
  if (outer_iters < 1 || inner_iters < 1) throw ConfigError("iteration counts must be at least 1");
  if (tol < 0) throw ConfigError("tol must be non-negative");
}

double at_energy(const Image& f, const Image& u, const Image& s, const ATConfig& cfg) {
  if (!f.same_shape(u)) throw ShapeError("at_energy: f and u shapes differ");
  if (s.channels != 1 || s.height != f.height || s.width != f.width) {
    throw ShapeError("at_energy: s must be single-channel with the same spatial size");
  }
  const int h = f.height, w = f.width, c = f.channels;

  double data_term = 0.0;
  for (size_t i = 0; i < f.size(); ++i) {
    const double d = static_cast<double>(u.data[i]) - f.data[i];
    data_term += d * d;
  }

  const std::vector<double> gu = grad_sq(u);
  double smooth_term = 0.0;
  double edge_term = 0.0;
  for (int y = 0; y < h; ++y) {
    for (int x = 0; x < w; ++x) {
      const size_t p = static_cast<size_t>(y) * w + x;
      const double sv = s.data[p];
      const double one_minus = 1.0 - sv;
      smooth_term += one_minus * one_minus * gu[p];
      double gs = 0.0;
      if (x + 1 < w) {
        const double dx = static_cast<double>(s.data[p + 1]) - sv;
        gs += dx * dx;
      }
      if (y + 1 < h) {
        const double dy = static_cast<double>(s.data[p + w]) - sv;
        gs += dy * dy;
      }
      edge_term += cfg.epsilon * gs + sv * sv / (4.0 * cfg.epsilon);
    }
  }
  (void)c;
  return data_term + cfg.alpha * smooth_term + cfg.lambda * edge_term;
}

Image solve_u(const Image& f, const Image& s, const ATConfig& cfg, const Image& u0) {
  if (!f.same_shape(u0)) throw ShapeError("solve_u: f and u0 shapes differ");
  if (s.channels != 1 || s.height != f.height || s.width != f.width) {
    throw ShapeError("solve_u: s must be single-channel with the same spatial size");
  }
  const int h = f.height, w = f.width, c = f.channels;
  const size_t npix = static_cast<size_t>(h) * w;

  // Edge weights (1-s)^2 live at the pixel whose forward differences they
  // scale; the system reads them from the base pixel of each edge.
  std::vector<double> wgt(npix);
  for (size_t p = 0; p < npix; ++p) {
    const double one_minus = 1.0 - static_cast<double>(s.data[p]);
    wgt[p] = one_minus * one_minus;
  }

  std::vector<double> cur(f.size()), next(f.size());
  for (size_t i = 0; i < f.size(); ++i) cur[i] = u0.data[i];

  const double a = cfg.alpha;
  for (int it = 0; it < cfg.inner_iters; ++it) {
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const size_t p = static_cast<size_t>(y) * w + x;
        // Neighbor edges and their weights (replicate boundary: absent
        // neighbors contribute nothing).
        double diag = 1.0;
        const bool has_r = x + 1 < w, has_d = y + 1 < h, has_l = x > 0, has_u = y > 0;
        const double wr = has_r ? wgt[p] : 0.0;
        const double wd = has_d ? wgt[p] : 0.0;
        const double wl = has_l ? wgt[p - 1] : 0.0;
        const double wu = has_u ? wgt[p - w] : 0.0;
        diag += a * (wr + wd + wl + wu);
        for (int ch = 0; ch < c; ++ch) {
          const size_t i = p * c + ch;
          double nb = 0.0;
          if (has_r) nb += wr * cur[i + c];
          if (has_d) nb += wd * cur[i + static_cast<size_t>(w) * c];
          if (has_l) nb += wl * cur[i - c];
          if (has_u) nb += wu * cur[i - static_cast<size_t>(w) * c];
          const double jacobi = (static_cast<double>(f.data[i]) + a * nb) / diag;
          next[i] = cur[i] + kJacobiWeight * (jacobi - cur[i]);
        }
      }
    }
    cur.swap(next);
  }

  Image out(h, w, c);
  for (size_t i = 0; i < out.size(); ++i) out.data[i] = static_cast<float>(cur[i]);
  return out;
}

Image solve_s(const Image& f, const Image& u, const ATConfig& cfg) {
  if (!f.same_shape(u)) throw ShapeError("solve_s: f and u shapes differ");
  const int h = u.height, w = u.width;
  const size_t npix = static_cast<size_t>(h) * w;

  const std::vector<double> g = grad_sq(u);
  const double a2 = 2.0 * cfg.alpha;
  const double ridge = cfg.lambda / (2.0 * cfg.epsilon);
  const double diff = 2.0 * cfg.lambda * cfg.epsilon;

  // Pointwise closed form (Laplacian term dropped) as the starting point;
  // it is already the exact solution when the diffusion term is negligible.
  std::vector<double> cur(npix), next(npix);
  for (size_t p = 0; p < npix; ++p) cur[p] = a2 * g[p] / (ridge + a2 * g[p]);

  for (int it = 0; it < cfg.inner_iters; ++it) {
    double max_delta = 0.0;
    for (int y = 0; y < h; ++y) {
      for (int x = 0; x < w; ++x) {
        const size_t p = static_cast<size_t>(y) * w + x;
        double nb = 0.0;
        int deg = 0;
        if (x + 1 < w) { nb += cur[p + 1]; ++deg; }
        if (x > 0)     { nb += cur[p - 1]; ++deg; }
        if (y + 1 < h) { nb += cur[p + w]; ++deg; }
        if (y > 0)     { nb += cur[p - w]; ++deg; }
        const double diag = a2 * g[p] + ridge + diff * deg;
        const double jacobi = (a2 * g[p] + diff * nb) / diag;
        const double v = cur[p] + kJacobiWeight * (jacobi - cur[p]);
        next[p] = v;
        max_delta = std::max(max_delta, std::abs(v - cur[p]));
      }
    }
    cur.swap(next);
    if (max_delta < 1e-14) break;
  }

  Image out(h, w, 1);
  for (size_t p = 0; p < npix; ++p) out.data[p] = static_cast<float>(std::clamp(cur[p], 0.0, 1.0));
  return out;
}

ATResult at_smooth(const Image& f, const ATConfig& cfg) {
  cfg.validate();
  ATResult res;
  res.u = f;
  res.s = Image(f.height, f.width, 1);

  double prev = 0.0;
  for (int it = 0; it < cfg.outer_iters; ++it) {
    res.u = solve_u(f, res.s, cfg, res.u);
    res.s = solve_s(f, res.u, cfg);
    const double e = at_energy(f, res.u, res.s, cfg);
    res.energy_trace.push_back(e);
    if (it > 0 && prev - e < cfg.tol * std::abs(prev)) break;
    prev = e;
  }
  return res;
}

Decomposition decompose(const Image& img, int order, const ATConfig& cfg) {
  if (order < 1) throw ConfigError("decomposition order must be at least 1");
  Decomposition dec;
  dec.order = order;
  Image base = img;
  std::vector<Image> details;  // D_1 first while building
  for (int k = 1; k <= order; ++k) {
    ATResult r = at_smooth(base, cfg);
    details.push_back(image_sub(base, r.u));
    base = std::move(r.u);
  }
  dec.base = std::move(base);
  // Reported coarse-to-fine: [D_n, ..., D_1].
  dec.details.assign(details.rbegin(), details.rend());
  return dec;
}

Image Decomposition::reconstruct() const {
  Image acc = base;
  for (const Image& d : details) acc = image_add(acc, d);
  return acc;
}

double gradient_energy(const Image& img) {
  const std::vector<double> g = grad_sq(img);
  double acc = 0.0;
  for (double v : g) acc += v;
  return acc;
}

}  // namespace cart::ms
