#pragma once

#include <vector>

#include "cart/image.hpp"

namespace cart::ms {

// Parameters of the relaxed edge-aware smoothing energy
//   E(u,s) = sum |u-f|^2 + alpha * sum (1-s)^2 |grad u|^2
//          + lambda * sum (eps |grad s|^2 + s^2 / (4 eps))
// discretized with forward differences and replicate boundaries, in pixel
// units. The relaxation parameter eps is not stated by the source method at
// this scale; it is part of the configuration and logged with every run.
struct ATConfig {
  double alpha = 10.0;
  double lambda = 0.01;
  double epsilon = 0.01;
  int outer_iters = 10;
  int inner_iters = 50;
  double tol = 1e-4;  // relative energy-decrease stopping threshold

  void validate() const;
};

struct ATResult {
  Image u;                           // smooth approximation
  Image s;                           // edge indicator, single channel, in [0,1]
  std::vector<double> energy_trace;  // one entry per outer iteration
};

// Hierarchical base-detail split: base + sum(details) == input exactly by
// construction (each detail is the difference of consecutive bases).
struct Decomposition {
  Image base;                 // B_n
  std::vector<Image> details; // [D_n, D_{n-1}, ..., D_1]
  int order = 0;

  Image reconstruct() const;
};

// Discretized energy; gradient terms are summed over channels.
double at_energy(const Image& f, const Image& u, const Image& s, const ATConfig& cfg);

// Minimizes the energy over u with s fixed: damped Jacobi sweeps (weight 0.8)
// on (I - alpha div((1-s)^2 grad)) u = f, warm-started from u0.
Image solve_u(const Image& f, const Image& s, const ATConfig& cfg, const Image& u0);

// Minimizes the energy over s with u fixed: damped Jacobi on
// (lambda/(2 eps) + 2 alpha |grad u|^2 - 2 lambda eps Lap) s = 2 alpha |grad u|^2,
// started from the pointwise closed form; result clamped to [0,1].
Image solve_s(const Image& f, const Image& u, const ATConfig& cfg);

// Alternating minimization; stops after outer_iters rounds or when the
// relative energy decrease falls below cfg.tol.
ATResult at_smooth(const Image& f, const ATConfig& cfg);

// Recursive base-detail decomposition of the given order, one shared config
// for all levels.
Decomposition decompose(const Image& img, int order, const ATConfig& cfg);

// Squared forward-difference gradient magnitude summed over channels and
// pixels; used by the smoothing-hierarchy diagnostics.
double gradient_energy(const Image& img);

}  // namespace cart::ms
