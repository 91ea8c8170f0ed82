#include "cart/ops.hpp"

#include <Eigen/Core>

#include <algorithm>
#include <cmath>

#include "cart/errors.hpp"
#include "cart/image.hpp"

namespace cart::ad {

namespace {

using EMat = Eigen::Matrix<float, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using Map = Eigen::Map<EMat>;
using CMap = Eigen::Map<const EMat>;

void gemm_nn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  CMap A(a, m, k), B(b, k, n);
  Map C(c, m, n);
  if (accumulate) C.noalias() += A * B;
  else C.noalias() = A * B;
}

void gemm_nt(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  // C [m,n] = A [m,k] * B^T, B stored [n,k]
  CMap A(a, m, k), B(b, n, k);
  Map C(c, m, n);
  if (accumulate) C.noalias() += A * B.transpose();
  else C.noalias() = A * B.transpose();
}

void gemm_tn(const float* a, const float* b, float* c, int m, int k, int n, bool accumulate) {
  // C [m,n] = A^T * B, A stored [k,m]
  CMap A(a, k, m), B(b, k, n);
  Map C(c, m, n);
  if (accumulate) C.noalias() += A.transpose() * B;
  else C.noalias() = A.transpose() * B;
}

std::shared_ptr<Node> make_node(Shape shape, std::vector<std::shared_ptr<Node>> inputs) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->value.assign(static_cast<size_t>(shape_numel(n->shape)), 0.0f);
  for (const auto& in : inputs) n->requires_grad = n->requires_grad || in->requires_grad;
  n->inputs = std::move(inputs);
  return n;
}

void check_same_shape(const Tensor& a, const Tensor& b, const char* op) {
  if (a.shape() != b.shape()) {
    throw ShapeError(std::string(op) + ": shape mismatch " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  }
}

void accumulate_into(Node& dst, const std::vector<float>& g) {
  dst.ensure_grad();
  for (size_t i = 0; i < g.size(); ++i) dst.grad[i] += g[i];
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "add");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.value()[i] + b.value()[i];
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) {
      for (int i = 0; i < 2; ++i) {
        Node& in = *self.inputs[static_cast<size_t>(i)];
        if (in.requires_grad) accumulate_into(in, self.grad);
      }
    };
  }
  return Tensor(n);
}

Tensor sub(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "sub");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.value()[i] - b.value()[i];
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) {
      Node& a_in = *self.inputs[0];
      Node& b_in = *self.inputs[1];
      if (a_in.requires_grad) accumulate_into(a_in, self.grad);
      if (b_in.requires_grad) {
        b_in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) b_in.grad[i] -= self.grad[i];
      }
    };
  }
  return Tensor(n);
}

Tensor mul(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mul");
  auto n = make_node(a.shape(), {a.node(), b.node()});
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.value()[i] * b.value()[i];
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) {
      Node& a_in = *self.inputs[0];
      Node& b_in = *self.inputs[1];
      if (a_in.requires_grad) {
        a_in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) a_in.grad[i] += self.grad[i] * b_in.value[i];
      }
      if (b_in.requires_grad) {
        b_in.ensure_grad();
        for (size_t i = 0; i < self.grad.size(); ++i) b_in.grad[i] += self.grad[i] * a_in.value[i];
      }
    };
  }
  return Tensor(n);
}

Tensor scale(const Tensor& a, double c) {
  auto n = make_node(a.shape(), {a.node()});
  const float cf = static_cast<float>(c);
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = a.value()[i] * cf;
  if (n->requires_grad) {
    n->backward_fn = [cf](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i] * cf;
    };
  }
  return Tensor(n);
}

Tensor relu(const Tensor& x) {
  auto n = make_node(x.shape(), {x.node()});
  for (size_t i = 0; i < n->value.size(); ++i) n->value[i] = x.value()[i] > 0.0f ? x.value()[i] : 0.0f;
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        if (in.value[i] > 0.0f) in.grad[i] += self.grad[i];
      }
    };
  }
  return Tensor(n);
}

Tensor gelu(const Tensor& x) {
  auto n = make_node(x.shape(), {x.node()});
  constexpr double kInvSqrt2 = 0.70710678118654752440;
  for (size_t i = 0; i < n->value.size(); ++i) {
    const double v = x.value()[i];
    n->value[i] = static_cast<float>(v * 0.5 * (1.0 + std::erf(v * kInvSqrt2)));
  }
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) {
      constexpr double inv_sqrt2 = 0.70710678118654752440;
      constexpr double inv_sqrt2pi = 0.39894228040143267794;
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < self.grad.size(); ++i) {
        const double v = in.value[i];
        const double cdf = 0.5 * (1.0 + std::erf(v * inv_sqrt2));
        const double pdf = inv_sqrt2pi * std::exp(-0.5 * v * v);
        in.grad[i] += self.grad[i] * static_cast<float>(cdf + v * pdf);
      }
    };
  }
  return Tensor(n);
}

Tensor reshape(const Tensor& x, const Shape& s) {
  if (shape_numel(s) != x.numel()) {
    throw ShapeError("reshape: cannot view " + shape_str(x.shape()) + " as " + shape_str(s));
  }
  auto n = make_node(s, {x.node()});
  n->value = x.value();
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) { accumulate_into(*self.inputs[0], self.grad); };
  }
  return Tensor(n);
}

Tensor transpose2d(const Tensor& x) {
  if (x.shape().size() != 2) throw ShapeError("transpose2d expects a matrix, got " + shape_str(x.shape()));
  const int m = x.dim(0), k = x.dim(1);
  auto n = make_node({k, m}, {x.node()});
  for (int i = 0; i < m; ++i)
    for (int j = 0; j < k; ++j) n->value[static_cast<size_t>(j) * m + i] = x.value()[static_cast<size_t>(i) * k + j];
  if (n->requires_grad) {
    n->backward_fn = [m, k](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (int j = 0; j < k; ++j)
        for (int i = 0; i < m; ++i) in.grad[static_cast<size_t>(i) * k + j] += self.grad[static_cast<size_t>(j) * m + i];
    };
  }
  return Tensor(n);
}

Tensor slice_cols(const Tensor& x, int start, int len) {
  if (x.shape().size() != 2) throw ShapeError("slice_cols expects a matrix");
  const int m = x.dim(0), k = x.dim(1);
  if (start < 0 || len < 1 || start + len > k) throw ShapeError("slice_cols out of range");
  auto n = make_node({m, len}, {x.node()});
  for (int i = 0; i < m; ++i) {
    const float* src = x.value().data() + static_cast<size_t>(i) * k + start;
    std::copy(src, src + len, n->value.data() + static_cast<size_t>(i) * len);
  }
  if (n->requires_grad) {
    n->backward_fn = [m, k, start, len](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (int i = 0; i < m; ++i) {
        float* dst = in.grad.data() + static_cast<size_t>(i) * k + start;
        const float* g = self.grad.data() + static_cast<size_t>(i) * len;
        for (int j = 0; j < len; ++j) dst[j] += g[j];
      }
    };
  }
  return Tensor(n);
}

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw ShapeError("concat_cols of nothing");
  const int m = parts[0].dim(0);
  int total = 0;
  std::vector<std::shared_ptr<Node>> inputs;
  std::vector<int> widths;
  for (const auto& p : parts) {
    if (p.shape().size() != 2 || p.dim(0) != m) throw ShapeError("concat_cols: row mismatch");
    widths.push_back(p.dim(1));
    total += p.dim(1);
    inputs.push_back(p.node());
  }
  auto n = make_node({m, total}, std::move(inputs));
  int col = 0;
  for (size_t pi = 0; pi < parts.size(); ++pi) {
    const int w = widths[pi];
    for (int i = 0; i < m; ++i) {
      const float* src = parts[pi].value().data() + static_cast<size_t>(i) * w;
      std::copy(src, src + w, n->value.data() + static_cast<size_t>(i) * total + col);
    }
    col += w;
  }
  if (n->requires_grad) {
    n->backward_fn = [m, total, widths](Node& self) {
      int c = 0;
      for (size_t pi = 0; pi < widths.size(); ++pi) {
        Node& in = *self.inputs[pi];
        const int w = widths[pi];
        if (in.requires_grad) {
          in.ensure_grad();
          for (int i = 0; i < m; ++i) {
            const float* g = self.grad.data() + static_cast<size_t>(i) * total + c;
            float* dst = in.grad.data() + static_cast<size_t>(i) * w;
            for (int j = 0; j < w; ++j) dst[j] += g[j];
          }
        }
        c += w;
      }
    };
  }
  return Tensor(n);
}

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.shape().size() != 2 || b.shape().size() != 2 || a.dim(1) != b.dim(0)) {
    throw ShapeError("matmul: incompatible shapes " + shape_str(a.shape()) + " x " + shape_str(b.shape()));
  }
  const int m = a.dim(0), k = a.dim(1), nn = b.dim(1);
  auto n = make_node({m, nn}, {a.node(), b.node()});
  gemm_nn(a.value().data(), b.value().data(), n->value.data(), m, k, nn, false);
  if (n->requires_grad) {
    n->backward_fn = [m, k, nn](Node& self) {
      Node& a_in = *self.inputs[0];
      Node& b_in = *self.inputs[1];
      if (a_in.requires_grad) {
        a_in.ensure_grad();
        gemm_nt(self.grad.data(), b_in.value.data(), a_in.grad.data(), m, nn, k, true);
      }
      if (b_in.requires_grad) {
        b_in.ensure_grad();
        gemm_tn(a_in.value.data(), self.grad.data(), b_in.grad.data(), k, m, nn, true);
      }
    };
  }
  return Tensor(n);
}

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  if (x.shape().size() != 2 || w.shape().size() != 2 || x.dim(1) != w.dim(0)) {
    throw ShapeError("linear: incompatible shapes " + shape_str(x.shape()) + " x " + shape_str(w.shape()));
  }
  const int m = x.dim(0), k = x.dim(1), nn = w.dim(1);
  if (b.numel() != nn) throw ShapeError("linear: bias length mismatch");
  auto n = make_node({m, nn}, {x.node(), w.node(), b.node()});
  gemm_nn(x.value().data(), w.value().data(), n->value.data(), m, k, nn, false);
  for (int i = 0; i < m; ++i) {
    float* row = n->value.data() + static_cast<size_t>(i) * nn;
    for (int j = 0; j < nn; ++j) row[j] += b.value()[static_cast<size_t>(j)];
  }
  if (n->requires_grad) {
    n->backward_fn = [m, k, nn](Node& self) {
      Node& x_in = *self.inputs[0];
      Node& w_in = *self.inputs[1];
      Node& b_in = *self.inputs[2];
      if (x_in.requires_grad) {
        x_in.ensure_grad();
        gemm_nt(self.grad.data(), w_in.value.data(), x_in.grad.data(), m, nn, k, true);
      }
      if (w_in.requires_grad) {
        w_in.ensure_grad();
        gemm_tn(x_in.value.data(), self.grad.data(), w_in.grad.data(), k, m, nn, true);
      }
      if (b_in.requires_grad) {
        b_in.ensure_grad();
        for (int j = 0; j < nn; ++j) {
          double acc = 0.0;
          for (int i = 0; i < m; ++i) acc += self.grad[static_cast<size_t>(i) * nn + j];
          b_in.grad[static_cast<size_t>(j)] += static_cast<float>(acc);
        }
      }
    };
  }
  return Tensor(n);
}

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, int stride, int pad) {
  if (x.shape().size() != 3) throw ShapeError("conv2d input must be [H,W,C], got " + shape_str(x.shape()));
  if (w.shape().size() != 4) throw ShapeError("conv2d weight must be [kh,kw,Cin,Cout], got " + shape_str(w.shape()));
  const int h = x.dim(0), ww = x.dim(1), cin = x.dim(2);
  const int kh = w.dim(0), kw = w.dim(1);
  if (w.dim(2) != cin) {
    throw ShapeError("conv2d: input channels " + std::to_string(cin) + " vs weight " + std::to_string(w.dim(2)));
  }
  const int cout = w.dim(3);
  if (b.numel() != cout) throw ShapeError("conv2d: bias length mismatch");
  if (stride < 1) throw ShapeError("conv2d: stride must be positive");
  const int oh = (h + 2 * pad - kh) / stride + 1;
  const int ow = (ww + 2 * pad - kw) / stride + 1;
  if (oh < 1 || ow < 1) throw ShapeError("conv2d: kernel larger than padded input");

  const int patch = kh * kw * cin;
  const int npos = oh * ow;
  std::vector<float> cols(static_cast<size_t>(npos) * patch, 0.0f);
  for (int oy = 0; oy < oh; ++oy) {
    for (int ox = 0; ox < ow; ++ox) {
      float* dst = cols.data() + (static_cast<size_t>(oy) * ow + ox) * patch;
      for (int ky = 0; ky < kh; ++ky) {
        const int iy = oy * stride - pad + ky;
        if (iy < 0 || iy >= h) continue;
        for (int kx = 0; kx < kw; ++kx) {
          const int ix = ox * stride - pad + kx;
          if (ix < 0 || ix >= ww) continue;
          const float* src = x.value().data() + (static_cast<size_t>(iy) * ww + ix) * cin;
          std::copy(src, src + cin, dst + (static_cast<size_t>(ky) * kw + kx) * cin);
        }
      }
    }
  }

  auto n = make_node({oh, ow, cout}, {x.node(), w.node(), b.node()});
  gemm_nn(cols.data(), w.value().data(), n->value.data(), npos, patch, cout, false);
  for (int p = 0; p < npos; ++p) {
    float* row = n->value.data() + static_cast<size_t>(p) * cout;
    for (int j = 0; j < cout; ++j) row[j] += b.value()[static_cast<size_t>(j)];
  }

  if (n->requires_grad) {
    n->backward_fn = [cols = std::move(cols), h, ww, cin, kh, kw, cout, oh, ow, stride, pad, patch, npos](Node& self) {
      Node& x_in = *self.inputs[0];
      Node& w_in = *self.inputs[1];
      Node& b_in = *self.inputs[2];
      if (w_in.requires_grad) {
        w_in.ensure_grad();
        gemm_tn(cols.data(), self.grad.data(), w_in.grad.data(), patch, npos, cout, true);
      }
      if (b_in.requires_grad) {
        b_in.ensure_grad();
        for (int j = 0; j < cout; ++j) {
          double acc = 0.0;
          for (int p = 0; p < npos; ++p) acc += self.grad[static_cast<size_t>(p) * cout + j];
          b_in.grad[static_cast<size_t>(j)] += static_cast<float>(acc);
        }
      }
      if (x_in.requires_grad) {
        x_in.ensure_grad();
        std::vector<float> dcols(static_cast<size_t>(npos) * patch);
        gemm_nt(self.grad.data(), w_in.value.data(), dcols.data(), npos, cout, patch, false);
        for (int oy = 0; oy < oh; ++oy) {
          for (int ox = 0; ox < ow; ++ox) {
            const float* src = dcols.data() + (static_cast<size_t>(oy) * ow + ox) * patch;
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= h) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= ww) continue;
                float* dst = x_in.grad.data() + (static_cast<size_t>(iy) * ww + ix) * cin;
                const float* g = src + (static_cast<size_t>(ky) * kw + kx) * cin;
                for (int c = 0; c < cin; ++c) dst[c] += g[c];
              }
            }
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor upsample_nearest2x(const Tensor& x) {
  if (x.shape().size() != 3) throw ShapeError("upsample_nearest2x input must be [H,W,C]");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  auto n = make_node({2 * h, 2 * w, c}, {x.node()});
  for (int y = 0; y < 2 * h; ++y) {
    for (int xx = 0; xx < 2 * w; ++xx) {
      const float* src = x.value().data() + (static_cast<size_t>(y / 2) * w + xx / 2) * c;
      float* dst = n->value.data() + (static_cast<size_t>(y) * 2 * w + xx) * c;
      std::copy(src, src + c, dst);
    }
  }
  if (n->requires_grad) {
    n->backward_fn = [h, w, c](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (int y = 0; y < 2 * h; ++y) {
        for (int xx = 0; xx < 2 * w; ++xx) {
          float* dst = in.grad.data() + (static_cast<size_t>(y / 2) * w + xx / 2) * c;
          const float* g = self.grad.data() + (static_cast<size_t>(y) * 2 * w + xx) * c;
          for (int ch = 0; ch < c; ++ch) dst[ch] += g[ch];
        }
      }
    };
  }
  return Tensor(n);
}

Tensor resize_bilinear(const Tensor& x, int oh, int ow) {
  if (x.shape().size() != 3) throw ShapeError("resize_bilinear input must be [H,W,C]");
  const int h = x.dim(0), w = x.dim(1), c = x.dim(2);
  if (oh < 1 || ow < 1) throw ShapeError("resize_bilinear target must be at least 1x1");
  auto n = make_node({oh, ow, c}, {x.node()});
  if (oh == h && ow == w) {
    n->value = x.value();
  } else {
    cart::resize_bilinear_buffer(x.value().data(), h, w, c, n->value.data(), oh, ow);
  }
  if (n->requires_grad) {
    n->backward_fn = [h, w, c, oh, ow](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      if (oh == h && ow == w) {
        for (size_t i = 0; i < self.grad.size(); ++i) in.grad[i] += self.grad[i];
        return;
      }
      auto src_pos = [](int out_i, int in_n, int out_n) -> double {
        if (out_n == 1) return 0.5 * (in_n - 1);
        return static_cast<double>(out_i) * (in_n - 1) / (out_n - 1);
      };
      for (int oy = 0; oy < oh; ++oy) {
        const double fy = src_pos(oy, h, oh);
        const int y0 = static_cast<int>(fy);
        const int y1 = std::min(y0 + 1, h - 1);
        const float wy = static_cast<float>(fy - y0);
        for (int ox = 0; ox < ow; ++ox) {
          const double fx = src_pos(ox, w, ow);
          const int x0 = static_cast<int>(fx);
          const int x1 = std::min(x0 + 1, w - 1);
          const float wx = static_cast<float>(fx - x0);
          const float* g = self.grad.data() + (static_cast<size_t>(oy) * ow + ox) * c;
          float* p00 = in.grad.data() + (static_cast<size_t>(y0) * w + x0) * c;
          float* p01 = in.grad.data() + (static_cast<size_t>(y0) * w + x1) * c;
          float* p10 = in.grad.data() + (static_cast<size_t>(y1) * w + x0) * c;
          float* p11 = in.grad.data() + (static_cast<size_t>(y1) * w + x1) * c;
          for (int ch = 0; ch < c; ++ch) {
            p00[ch] += (1.0f - wy) * (1.0f - wx) * g[ch];
            p01[ch] += (1.0f - wy) * wx * g[ch];
            p10[ch] += wy * (1.0f - wx) * g[ch];
            p11[ch] += wy * wx * g[ch];
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor layer_norm(const Tensor& x, const Tensor& gain, const Tensor& bias) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("layer_norm on scalar");
  const int d = s.back();
  if (gain.numel() != d || bias.numel() != d) throw ShapeError("layer_norm: gain/bias length mismatch");
  const int rows = static_cast<int>(x.numel() / d);
  constexpr double kEps = 1e-5;

  auto n = make_node(s, {x.node(), gain.node(), bias.node()});
  std::vector<float> inv_std(static_cast<size_t>(rows));
  std::vector<float> mean(static_cast<size_t>(rows));
  for (int r = 0; r < rows; ++r) {
    const float* xv = x.value().data() + static_cast<size_t>(r) * d;
    double mu = 0.0;
    for (int j = 0; j < d; ++j) mu += xv[j];
    mu /= d;
    double var = 0.0;
    for (int j = 0; j < d; ++j) {
      const double dv = xv[j] - mu;
      var += dv * dv;
    }
    var /= d;
    const double istd = 1.0 / std::sqrt(var + kEps);
    mean[static_cast<size_t>(r)] = static_cast<float>(mu);
    inv_std[static_cast<size_t>(r)] = static_cast<float>(istd);
    float* out = n->value.data() + static_cast<size_t>(r) * d;
    for (int j = 0; j < d; ++j) {
      const float xhat = static_cast<float>((xv[j] - mu) * istd);
      out[j] = xhat * gain.value()[static_cast<size_t>(j)] + bias.value()[static_cast<size_t>(j)];
    }
  }

  if (n->requires_grad) {
    n->backward_fn = [rows, d, mean = std::move(mean), inv_std = std::move(inv_std)](Node& self) {
      Node& x_in = *self.inputs[0];
      Node& g_in = *self.inputs[1];
      Node& b_in = *self.inputs[2];
      if (g_in.requires_grad) g_in.ensure_grad();
      if (b_in.requires_grad) b_in.ensure_grad();
      if (x_in.requires_grad) x_in.ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const float* xv = x_in.value.data() + static_cast<size_t>(r) * d;
        const float* g = self.grad.data() + static_cast<size_t>(r) * d;
        const float mu = mean[static_cast<size_t>(r)];
        const float istd = inv_std[static_cast<size_t>(r)];
        if (g_in.requires_grad || b_in.requires_grad) {
          for (int j = 0; j < d; ++j) {
            const float xhat = (xv[j] - mu) * istd;
            if (g_in.requires_grad) g_in.grad[static_cast<size_t>(j)] += g[j] * xhat;
            if (b_in.requires_grad) b_in.grad[static_cast<size_t>(j)] += g[j];
          }
        }
        if (x_in.requires_grad) {
          double sum_dxhat = 0.0, sum_dxhat_xhat = 0.0;
          for (int j = 0; j < d; ++j) {
            const double dxhat = static_cast<double>(g[j]) * g_in.value[static_cast<size_t>(j)];
            const double xhat = (xv[j] - mu) * istd;
            sum_dxhat += dxhat;
            sum_dxhat_xhat += dxhat * xhat;
          }
          float* dst = x_in.grad.data() + static_cast<size_t>(r) * d;
          for (int j = 0; j < d; ++j) {
            const double dxhat = static_cast<double>(g[j]) * g_in.value[static_cast<size_t>(j)];
            const double xhat = (xv[j] - mu) * istd;
            dst[j] += static_cast<float>(istd * (dxhat - sum_dxhat / d - xhat * sum_dxhat_xhat / d));
          }
        }
      }
    };
  }
  return Tensor(n);
}

Tensor softmax_lastdim(const Tensor& x) {
  const Shape& s = x.shape();
  if (s.empty()) throw ShapeError("softmax on scalar");
  const int d = s.back();
  const int rows = static_cast<int>(x.numel() / d);
  auto n = make_node(s, {x.node()});
  for (int r = 0; r < rows; ++r) {
    const float* xv = x.value().data() + static_cast<size_t>(r) * d;
    float* out = n->value.data() + static_cast<size_t>(r) * d;
    float mx = xv[0];
    for (int j = 1; j < d; ++j) mx = std::max(mx, xv[j]);
    double denom = 0.0;
    for (int j = 0; j < d; ++j) {
      const float e = std::exp(xv[j] - mx);
      out[j] = e;
      denom += e;
    }
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < d; ++j) out[j] *= inv;
  }
  if (n->requires_grad) {
    n->backward_fn = [rows, d](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (int r = 0; r < rows; ++r) {
        const float* p = self.value.data() + static_cast<size_t>(r) * d;
        const float* g = self.grad.data() + static_cast<size_t>(r) * d;
        float* dst = in.grad.data() + static_cast<size_t>(r) * d;
        double dot = 0.0;
        for (int j = 0; j < d; ++j) dot += static_cast<double>(g[j]) * p[j];
        for (int j = 0; j < d; ++j) dst[j] += p[j] * (g[j] - static_cast<float>(dot));
      }
    };
  }
  return Tensor(n);
}

Tensor sum_all(const Tensor& x) {
  auto n = make_node({1}, {x.node()});
  double acc = 0.0;
  for (float v : x.value()) acc += v;
  n->value[0] = static_cast<float>(acc);
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      const float g = self.grad[0];
      for (auto& v : in.grad) v += g;
    };
  }
  return Tensor(n);
}

Tensor mean_all(const Tensor& x) {
  auto n = make_node({1}, {x.node()});
  double acc = 0.0;
  for (float v : x.value()) acc += v;
  n->value[0] = static_cast<float>(acc / static_cast<double>(x.numel()));
  if (n->requires_grad) {
    n->backward_fn = [inv = 1.0 / static_cast<double>(x.numel())](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      const float g = static_cast<float>(self.grad[0] * inv);
      for (auto& v : in.grad) v += g;
    };
  }
  return Tensor(n);
}

Tensor mse(const Tensor& a, const Tensor& b) {
  check_same_shape(a, b, "mse");
  auto n = make_node({1}, {a.node(), b.node()});
  double acc = 0.0;
  for (size_t i = 0; i < a.value().size(); ++i) {
    const double d = static_cast<double>(a.value()[i]) - b.value()[i];
    acc += d * d;
  }
  const double inv_n = 1.0 / static_cast<double>(a.numel());
  n->value[0] = static_cast<float>(acc * inv_n);
  if (n->requires_grad) {
    n->backward_fn = [inv_n](Node& self) {
      Node& a_in = *self.inputs[0];
      Node& b_in = *self.inputs[1];
      const float g = self.grad[0];
      if (a_in.requires_grad) a_in.ensure_grad();
      if (b_in.requires_grad) b_in.ensure_grad();
      for (size_t i = 0; i < a_in.value.size(); ++i) {
        const float d = static_cast<float>(2.0 * inv_n * (a_in.value[i] - b_in.value[i])) * g;
        if (a_in.requires_grad) a_in.grad[i] += d;
        if (b_in.requires_grad) b_in.grad[i] -= d;
      }
    };
  }
  return Tensor(n);
}

Tensor embedding_rows(const Tensor& table, const std::vector<int>& indices) {
  if (table.shape().size() != 2) throw ShapeError("embedding table must be [V,D]");
  const int v = table.dim(0), d = table.dim(1);
  for (int idx : indices) {
    if (idx < 0 || idx >= v) throw ShapeError("embedding index " + std::to_string(idx) + " out of range [0," + std::to_string(v) + ")");
  }
  const int nrows = static_cast<int>(indices.size());
  auto n = make_node({nrows, d}, {table.node()});
  for (int i = 0; i < nrows; ++i) {
    const float* src = table.value().data() + static_cast<size_t>(indices[static_cast<size_t>(i)]) * d;
    std::copy(src, src + d, n->value.data() + static_cast<size_t>(i) * d);
  }
  if (n->requires_grad) {
    n->backward_fn = [indices, d](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      for (size_t i = 0; i < indices.size(); ++i) {
        float* dst = in.grad.data() + static_cast<size_t>(indices[i]) * d;
        const float* g = self.grad.data() + i * d;
        for (int j = 0; j < d; ++j) dst[j] += g[j];
      }
    };
  }
  return Tensor(n);
}

Tensor cross_entropy_with_logits(const Tensor& logits, const std::vector<int>& targets) {
  if (logits.shape().size() != 2) throw ShapeError("cross_entropy expects logits [N,V]");
  const int rows = logits.dim(0), v = logits.dim(1);
  if (static_cast<int>(targets.size()) != rows) {
    throw ShapeError("cross_entropy: " + std::to_string(rows) + " rows vs " + std::to_string(targets.size()) + " targets");
  }
  for (int t : targets) {
    if (t < 0 || t >= v) throw ShapeError("cross_entropy: target out of range");
  }
  auto n = make_node({1}, {logits.node()});
  std::vector<float> probs(static_cast<size_t>(rows) * v);
  double loss = 0.0;
  for (int r = 0; r < rows; ++r) {
    const float* lv = logits.value().data() + static_cast<size_t>(r) * v;
    float mx = lv[0];
    for (int j = 1; j < v; ++j) mx = std::max(mx, lv[j]);
    double denom = 0.0;
    float* pr = probs.data() + static_cast<size_t>(r) * v;
    for (int j = 0; j < v; ++j) {
      const float e = std::exp(lv[j] - mx);
      pr[j] = e;
      denom += e;
    }
    const double lse = mx + std::log(denom);
    loss += lse - lv[targets[static_cast<size_t>(r)]];
    const float inv = static_cast<float>(1.0 / denom);
    for (int j = 0; j < v; ++j) pr[j] *= inv;
  }
  n->value[0] = static_cast<float>(loss / rows);
  if (n->requires_grad) {
    n->backward_fn = [rows, v, targets, probs = std::move(probs)](Node& self) {
      Node& in = *self.inputs[0];
      in.ensure_grad();
      const float g = self.grad[0] / static_cast<float>(rows);
      for (int r = 0; r < rows; ++r) {
        const float* pr = probs.data() + static_cast<size_t>(r) * v;
        float* dst = in.grad.data() + static_cast<size_t>(r) * v;
        for (int j = 0; j < v; ++j) dst[j] += g * pr[j];
        dst[targets[static_cast<size_t>(r)]] -= g;
      }
    };
  }
  return Tensor(n);
}

Tensor straight_through(const Tensor& value, const Tensor& grad_path) {
  check_same_shape(value, grad_path, "straight_through");
  auto n = make_node(value.shape(), {grad_path.node()});
  n->value = value.value();
  if (n->requires_grad) {
    n->backward_fn = [](Node& self) { accumulate_into(*self.inputs[0], self.grad); };
  }
  return Tensor(n);
}

bool BlockCausalMask::allowed(int query_pos, int key_pos) const {
  // Find the map block containing the query.
  size_t lo = 0, hi = block_offsets.size();
  while (hi - lo > 1) {
    const size_t mid = (lo + hi) / 2;
    if (block_offsets[mid] <= query_pos) lo = mid;
    else hi = mid;
  }
  return key_pos < prefix_len[lo];
}

BlockCausalMask build_block_causal_mask(const SequenceLayout& layout) {
  BlockCausalMask m;
  m.block_offsets = layout.map_offsets;
  m.block_sizes = layout.map_sizes;
  m.prefix_len.resize(layout.map_sizes.size());
  for (size_t b = 0; b < layout.map_sizes.size(); ++b) {
    m.prefix_len[b] = layout.map_offsets[b] + layout.map_sizes[b];
  }
  return m;
}

Tensor scaled_dot_product_attention(const Tensor& q, const Tensor& k, const Tensor& v,
                                    const BlockCausalMask& mask) {
  if (q.shape().size() != 2 || q.shape() != k.shape() || q.shape() != v.shape()) {
    throw ShapeError("attention expects q,k,v of equal [L,dh] shape");
  }
  const int l = q.dim(0), dh = q.dim(1);
  if (mask.total() != l) throw ShapeError("attention: mask length mismatch");
  const float att_scale = 1.0f / std::sqrt(static_cast<float>(dh));
  const int nblocks = static_cast<int>(mask.block_sizes.size());

  // Ragged softmax storage: per block, a [len x prefix] row-major panel.
  std::vector<size_t> panel_offset(static_cast<size_t>(nblocks) + 1, 0);
  for (int b = 0; b < nblocks; ++b) {
    panel_offset[static_cast<size_t>(b) + 1] =
        panel_offset[static_cast<size_t>(b)] +
        static_cast<size_t>(mask.block_sizes[static_cast<size_t>(b)]) * mask.prefix_len[static_cast<size_t>(b)];
  }
  std::vector<float> panels(panel_offset.back());

  auto n = make_node({l, dh}, {q.node(), k.node(), v.node()});
  for (int b = 0; b < nblocks; ++b) {
    const int off = mask.block_offsets[static_cast<size_t>(b)];
    const int len = mask.block_sizes[static_cast<size_t>(b)];
    const int pref = mask.prefix_len[static_cast<size_t>(b)];
    float* panel = panels.data() + panel_offset[static_cast<size_t>(b)];
    // scores = q_block * K[:pref]^T
    gemm_nt(q.value().data() + static_cast<size_t>(off) * dh, k.value().data(), panel, len, dh, pref, false);
    for (int r = 0; r < len; ++r) {
      float* row = panel + static_cast<size_t>(r) * pref;
      float mx = row[0] * att_scale;
      for (int j = 0; j < pref; ++j) {
        row[j] *= att_scale;
        mx = std::max(mx, row[j]);
      }
      double denom = 0.0;
      for (int j = 0; j < pref; ++j) {
        const float e = std::exp(row[j] - mx);
        row[j] = e;
        denom += e;
      }
      const float inv = static_cast<float>(1.0 / denom);
      for (int j = 0; j < pref; ++j) row[j] *= inv;
    }
    gemm_nn(panel, v.value().data(), n->value.data() + static_cast<size_t>(off) * dh, len, pref, dh, false);
  }

  if (n->requires_grad) {
    n->backward_fn = [l, dh, att_scale, mask, panel_offset = std::move(panel_offset),
                      panels = std::move(panels)](Node& self) {
      Node& q_in = *self.inputs[0];
      Node& k_in = *self.inputs[1];
      Node& v_in = *self.inputs[2];
      q_in.ensure_grad();
      k_in.ensure_grad();
      v_in.ensure_grad();
      const int nb = static_cast<int>(mask.block_sizes.size());
      std::vector<float> dpanel;
      for (int b = 0; b < nb; ++b) {
        const int off = mask.block_offsets[static_cast<size_t>(b)];
        const int len = mask.block_sizes[static_cast<size_t>(b)];
        const int pref = mask.prefix_len[static_cast<size_t>(b)];
        const float* panel = panels.data() + panel_offset[static_cast<size_t>(b)];
        const float* gout = self.grad.data() + static_cast<size_t>(off) * dh;
        dpanel.assign(static_cast<size_t>(len) * pref, 0.0f);
        // dP = dOut * V^T
        gemm_nt(gout, v_in.value.data(), dpanel.data(), len, dh, pref, false);
        // dV[:pref] += P^T * dOut
        gemm_tn(panel, gout, v_in.grad.data(), pref, len, dh, true);
        // dS = P  (dP - rowdot(dP, P)); fold in the scale factor
        for (int r = 0; r < len; ++r) {
          const float* p = panel + static_cast<size_t>(r) * pref;
          float* dp = dpanel.data() + static_cast<size_t>(r) * pref;
          double dot = 0.0;
          for (int j = 0; j < pref; ++j) dot += static_cast<double>(dp[j]) * p[j];
          for (int j = 0; j < pref; ++j) dp[j] = p[j] * (dp[j] - static_cast<float>(dot)) * att_scale;
        }
        // dQ_block += dS * K[:pref];  dK[:pref] += dS^T * Q_block
        gemm_nn(dpanel.data(), k_in.value.data(), q_in.grad.data() + static_cast<size_t>(off) * dh, len, pref, dh, true);
        gemm_tn(dpanel.data(), q_in.value.data() + static_cast<size_t>(off) * dh, k_in.grad.data(), pref, len, dh, true);
      }
    };
  }
  return Tensor(n);
}

}  // namespace cart::ad
