#include "conceptlab/nn.hpp"

#include <cmath>
#include <functional>
#include <stdexcept>

namespace conceptlab::nn {

void gaussian_init(Param& p, double std, Rng& rng) {
  for (double& w : p.w) w = std * rng.normal();
}

// tanh-form GELU; exp vectorizes for doubles, erf does not
namespace {

constexpr double kGeluC = 0.7978845608028654;  // sqrt(2/pi)
constexpr double kGeluA = 0.044715;

using ArrMap = Eigen::Map<Eigen::ArrayXd>;
using ConstArrMap = Eigen::Map<const Eigen::ArrayXd>;

void gelu_forward_n(const double* x, double* y, Eigen::Index n) {
  ConstArrMap xv(x, n);
  ArrMap yv(y, n);
  // tanh(u) = 1 - 2 / (exp(2u) + 1)
  const auto u = kGeluC * (xv + kGeluA * xv.cube());
  yv = 0.5 * xv * (2.0 - 2.0 / ((2.0 * u).exp() + 1.0));
}

void gelu_backward_n(const double* x, const double* gy, double* gx, Eigen::Index n) {
  ConstArrMap xv(x, n);
  ConstArrMap gv(gy, n);
  ArrMap ov(gx, n);
  const auto u = kGeluC * (xv + kGeluA * xv.cube());
  const auto t = 1.0 - 2.0 / ((2.0 * u).exp() + 1.0);  // tanh(u)
  const auto du = kGeluC * (1.0 + 3.0 * kGeluA * xv.square());
  ov = gv * (0.5 * (1.0 + t) + 0.5 * xv * (1.0 - t.square()) * du);
}

}  // namespace

double gelu(double x) {
  double y;
  gelu_forward_n(&x, &y, 1);
  return y;
}

double gelu_grad(double x) {
  double g, one = 1.0;
  gelu_backward_n(&x, &one, &g, 1);
  return g;
}

namespace {

// fixed 64-byte-aligned chunking keeps the parallel split deterministic
void parallel_chunks(Eigen::Index n, const std::function<void(Eigen::Index, Eigen::Index)>& fn) {
  const Eigen::Index chunk = ((n / 2 + 7) / 8) * 8;
  if (n < 4096 || chunk == 0) {
    fn(0, n);
    return;
  }
#pragma omp parallel for schedule(static)
  for (int part = 0; part < 2; ++part) {
    const Eigen::Index lo = part * chunk;
    const Eigen::Index hi = std::min(n, lo + chunk);
    if (lo < hi) fn(lo, hi - lo);
  }
}

}  // namespace

Tensor GeluT::forward(const Tensor& x) {
  x_cache = x;
  Tensor y = x;
  parallel_chunks(static_cast<Eigen::Index>(x.v.size()), [&](Eigen::Index lo, Eigen::Index n) {
    gelu_forward_n(x.v.data() + lo, y.v.data() + lo, n);
  });
  return y;
}

Tensor GeluT::backward(const Tensor& gy) const {
  Tensor gx = gy;
  parallel_chunks(static_cast<Eigen::Index>(gy.v.size()), [&](Eigen::Index lo, Eigen::Index n) {
    gelu_backward_n(x_cache.v.data() + lo, gy.v.data() + lo, gx.v.data() + lo, n);
  });
  return gx;
}

Mat GeluM::forward(const Mat& x) {
  x_cache = x;
  Mat y(x.rows(), x.cols());
  gelu_forward_n(x.data(), y.data(), x.size());
  return y;
}

Mat GeluM::backward(const Mat& gy) const {
  Mat gx(gy.rows(), gy.cols());
  gelu_backward_n(x_cache.data(), gy.data(), gx.data(), gy.size());
  return gx;
}

// ---- Linear ----

void Linear::build(const std::string& name, int in_dim, int out_dim, Rng& rng,
                   double init_scale) {
  in = in_dim;
  out = out_dim;
  W.init(name + ".weight", static_cast<size_t>(in) * out);
  b.init(name + ".bias", out);
  gaussian_init(W, init_scale / std::sqrt(static_cast<double>(in)), rng);
}

Mat Linear::forward(const Mat& x) {
  x_cache = x;
  return forward_const(x);
}

Mat Linear::forward_const(const Mat& x) const {
  ConstMatMap w(W.w.data(), out, in);
  ConstMatMap bv(b.w.data(), out, 1);
  Mat y = w * x;
  y.colwise() += bv.col(0);
  return y;
}

Mat Linear::backward(const Mat& gy) {
  MatMap gw(W.g.data(), out, in);
  MatMap gb(b.g.data(), out, 1);
  gw.noalias() += gy * x_cache.transpose();
  gb.col(0) += gy.rowwise().sum();
  ConstMatMap w(W.w.data(), out, in);
  return w.transpose() * gy;
}

void Linear::collect(ParamList& out_params) {
  out_params.push_back(&W);
  out_params.push_back(&b);
}

// ---- Conv2d ----

void Conv2d::build(const std::string& name, int in_channels, int out_channels, int kernel,
                   int stride_, int pad_, Rng& rng, double init_scale) {
  in_c = in_channels;
  out_c = out_channels;
  k = kernel;
  stride = stride_;
  pad = pad_;
  W.init(name + ".weight", static_cast<size_t>(out_c) * in_c * k * k);
  b.init(name + ".bias", out_c);
  gaussian_init(W, init_scale / std::sqrt(static_cast<double>(in_c) * k * k), rng);
}

namespace {

// colsT: [N*oh*ow x in_c*k*k], column s = (ci*k + ky)*k + kx holds the shifted
// input plane for that tap. Slices are contiguous position runs, so filling
// and the matching col2im are mostly memcpy-width operations.
void im2col_t(const Tensor& x, int k, int stride, int pad, int oh, int ow, Mat& colsT) {
  const Eigen::Index P = static_cast<Eigen::Index>(x.n) * oh * ow;
  colsT.resize(P, static_cast<Eigen::Index>(x.c) * k * k);
#pragma omp parallel for schedule(static)
  for (int slice = 0; slice < x.c * k * k; ++slice) {
    const int ci = slice / (k * k);
    const int ky = (slice / k) % k;
    const int kx = slice % k;
    {
      {
        double* dst = colsT.col(slice).data();
        for (int n = 0; n < x.n; ++n) {
          const double* plane = x.image(n) + static_cast<size_t>(ci) * x.h * x.w;
          for (int oy = 0; oy < oh; ++oy, dst += ow) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= x.h) {
              std::fill_n(dst, ow, 0.0);
              continue;
            }
            const double* row = plane + static_cast<size_t>(iy) * x.w;
            if (stride == 1) {
              const int ix0 = kx - pad;
              int o = 0;
              for (; o < ow && ix0 + o < 0; ++o) dst[o] = 0.0;
              const int run_end = std::min(ow, x.w - ix0);
              if (run_end > o) std::copy(row + ix0 + o, row + ix0 + run_end, dst + o);
              for (o = std::max(o, run_end); o < ow; ++o) dst[o] = 0.0;
            } else {
              for (int o = 0; o < ow; ++o) {
                const int ix = o * stride + kx - pad;
                dst[o] = (ix < 0 || ix >= x.w) ? 0.0 : row[ix];
              }
            }
          }
        }
      }
    }
  }
}

void col2im_t(const Mat& gcolsT, int n, int c, int h, int w, int k, int stride, int pad,
              int oh, int ow, Tensor& gx) {
  gx = Tensor(n, c, h, w);
#pragma omp parallel for schedule(static)
  for (int ci = 0; ci < c; ++ci) {
    for (int ky = 0; ky < k; ++ky) {
      for (int kx = 0; kx < k; ++kx) {
        const double* src =
            gcolsT.col((static_cast<Eigen::Index>(ci) * k + ky) * k + kx).data();
        for (int ni = 0; ni < n; ++ni) {
          double* plane = gx.image(ni) + static_cast<size_t>(ci) * h * w;
          for (int oy = 0; oy < oh; ++oy, src += ow) {
            const int iy = oy * stride + ky - pad;
            if (iy < 0 || iy >= h) continue;
            double* row = plane + static_cast<size_t>(iy) * w;
            if (stride == 1) {
              const int ix0 = kx - pad;
              const int o0 = std::max(0, -ix0);
              const int o1 = std::min(ow, w - ix0);
              for (int o = o0; o < o1; ++o) row[ix0 + o] += src[o];
            } else {
              for (int o = 0; o < ow; ++o) {
                const int ix = o * stride + kx - pad;
                if (ix >= 0 && ix < w) row[ix] += src[o];
              }
            }
          }
        }
      }
    }
  }
}

// caching the im2col matrix avoids recomputing it in backward; very large
// activations (paper-scale batches) fall back to recomputation
constexpr size_t kColsCacheLimit = 48u << 20;

}  // namespace

Tensor Conv2d::forward(const Tensor& x) {
  if (x.c != in_c) throw std::invalid_argument(W.name + ": channel mismatch");
  x_cache = x;
  const int oh = out_h(x.h), ow = out_w(x.w);
  const Eigen::Index P = static_cast<Eigen::Index>(x.n) * oh * ow;
  im2col_t(x, k, stride, pad, oh, ow, colsT_cache);
  ConstMatMap w(W.w.data(), out_c, in_c * k * k);
  Mat yT(P, out_c);
  yT.noalias() = colsT_cache * w.transpose();

  Tensor out(x.n, out_c, oh, ow);
  const int plane = oh * ow;
#pragma omp parallel for schedule(static)
  for (int co = 0; co < out_c; ++co) {
    const double* src = yT.col(co).data();
    const double bias = b.w[co];
    for (int n = 0; n < x.n; ++n) {
      double* dst = out.image(n) + static_cast<size_t>(co) * plane;
      const double* s = src + static_cast<size_t>(n) * plane;
      for (int p = 0; p < plane; ++p) dst[p] = s[p] + bias;
    }
  }
  if (static_cast<size_t>(colsT_cache.size()) * sizeof(double) > kColsCacheLimit)
    colsT_cache.resize(0, 0);
  return out;
}

Tensor Conv2d::backward(const Tensor& gy) {
  const Tensor& x = x_cache;
  const int oh = gy.h, ow = gy.w;
  const int plane = oh * ow;
  const Eigen::Index P = static_cast<Eigen::Index>(gy.n) * plane;
  Mat g(P, out_c);
#pragma omp parallel for schedule(static)
  for (int co = 0; co < out_c; ++co) {
    double* dst = g.col(co).data();
    double bias_grad = 0.0;
    for (int n = 0; n < gy.n; ++n) {
      const double* src = gy.image(n) + static_cast<size_t>(co) * plane;
      double* d = dst + static_cast<size_t>(n) * plane;
      for (int p = 0; p < plane; ++p) {
        d[p] = src[p];
        bias_grad += src[p];
      }
    }
    b.g[co] += bias_grad;
  }
  if (colsT_cache.size() == 0) im2col_t(x, k, stride, pad, oh, ow, colsT_cache);
  MatMap gw(W.g.data(), out_c, in_c * k * k);
  gw.noalias() += g.transpose() * colsT_cache;

  ConstMatMap w(W.w.data(), out_c, in_c * k * k);
  Mat gcolsT(P, static_cast<Eigen::Index>(in_c) * k * k);
  gcolsT.noalias() = g * w;
  Tensor gx;
  col2im_t(gcolsT, x.n, x.c, x.h, x.w, k, stride, pad, oh, ow, gx);
  return gx;
}

void Conv2d::collect(ParamList& out_params) {
  out_params.push_back(&W);
  out_params.push_back(&b);
}

// ---- LayerNorm ----

void LayerNorm::build(const std::string& name, int channels) {
  c = channels;
  gamma.init(name + ".gamma", c);
  beta.init(name + ".beta", c);
  std::fill(gamma.w.begin(), gamma.w.end(), 1.0);
}

Tensor LayerNorm::forward(const Tensor& x) {
  if (x.c != c) throw std::invalid_argument(gamma.name + ": channel mismatch");
  Tensor y = x;
  xhat_cache = x;
  const int plane = x.h * x.w;
  inv_std_cache.assign(static_cast<size_t>(x.n) * plane, 0.0);
#pragma omp parallel for schedule(static)
  for (int n = 0; n < x.n; ++n) {
    Eigen::ArrayXd mu(plane), var(plane);
    mu.setZero();
    for (int ci = 0; ci < c; ++ci)
      mu += ConstArrMap(x.image(n) + static_cast<size_t>(ci) * plane, plane);
    mu /= c;
    var.setZero();
    for (int ci = 0; ci < c; ++ci)
      var += (ConstArrMap(x.image(n) + static_cast<size_t>(ci) * plane, plane) - mu).square();
    var /= c;
    ArrMap is(inv_std_cache.data() + static_cast<size_t>(n) * plane, plane);
    is = (var + eps).rsqrt();
    for (int ci = 0; ci < c; ++ci) {
      ConstArrMap p(x.image(n) + static_cast<size_t>(ci) * plane, plane);
      ArrMap xh(xhat_cache.image(n) + static_cast<size_t>(ci) * plane, plane);
      ArrMap yo(y.image(n) + static_cast<size_t>(ci) * plane, plane);
      xh = (p - mu) * is;
      yo = gamma.w[ci] * xh + beta.w[ci];
    }
  }
  return y;
}

Tensor LayerNorm::backward(const Tensor& gy) {
  Tensor gx = gy;
  const int plane = gy.h * gy.w;
  Eigen::ArrayXd mean_g(plane), mean_gx(plane);
  for (int n = 0; n < gy.n; ++n) {
    mean_g.setZero();
    mean_gx.setZero();
    ConstArrMap is(inv_std_cache.data() + static_cast<size_t>(n) * plane, plane);
    for (int ci = 0; ci < c; ++ci) {
      ConstArrMap g(gy.image(n) + static_cast<size_t>(ci) * plane, plane);
      ConstArrMap xh(xhat_cache.image(n) + static_cast<size_t>(ci) * plane, plane);
      gamma.g[ci] += (g * xh).sum();
      beta.g[ci] += g.sum();
      mean_g += g * gamma.w[ci];
      mean_gx += g * gamma.w[ci] * xh;
    }
    mean_g /= c;
    mean_gx /= c;
    for (int ci = 0; ci < c; ++ci) {
      ConstArrMap g(gy.image(n) + static_cast<size_t>(ci) * plane, plane);
      ConstArrMap xh(xhat_cache.image(n) + static_cast<size_t>(ci) * plane, plane);
      ArrMap o(gx.image(n) + static_cast<size_t>(ci) * plane, plane);
      o = is * (g * gamma.w[ci] - mean_g - xh * mean_gx);
    }
  }
  return gx;
}

void LayerNorm::collect(ParamList& out_params) {
  out_params.push_back(&gamma);
  out_params.push_back(&beta);
}

// ---- Upsample ----

Tensor UpsampleNearest2x::forward(const Tensor& x) const {
  Tensor y(x.n, x.c, x.h * 2, x.w * 2);
  for (int n = 0; n < x.n; ++n)
    for (int c = 0; c < x.c; ++c)
      for (int i = 0; i < x.h; ++i)
        for (int j = 0; j < x.w; ++j) {
          const double v = x.at(n, c, i, j);
          y.at(n, c, 2 * i, 2 * j) = v;
          y.at(n, c, 2 * i, 2 * j + 1) = v;
          y.at(n, c, 2 * i + 1, 2 * j) = v;
          y.at(n, c, 2 * i + 1, 2 * j + 1) = v;
        }
  return y;
}

Tensor UpsampleNearest2x::backward(const Tensor& gy) const {
  Tensor gx(gy.n, gy.c, gy.h / 2, gy.w / 2);
  for (int n = 0; n < gy.n; ++n)
    for (int c = 0; c < gy.c; ++c)
      for (int i = 0; i < gx.h; ++i)
        for (int j = 0; j < gx.w; ++j)
          gx.at(n, c, i, j) = gy.at(n, c, 2 * i, 2 * j) + gy.at(n, c, 2 * i, 2 * j + 1) +
                              gy.at(n, c, 2 * i + 1, 2 * j) +
                              gy.at(n, c, 2 * i + 1, 2 * j + 1);
  return gx;
}

// ---- SelfAttention ----

namespace {

Mat tensor_as_mat(const Tensor& x, int n) {
  // view image n as [C x P]; Tensor stores channel planes contiguously, which
  // is a row-major [C x P], so transpose on copy.
  Mat m(x.c, x.plane());
  const double* img = x.image(n);
  for (int c = 0; c < x.c; ++c)
    for (int p = 0; p < x.plane(); ++p) m(c, p) = img[static_cast<size_t>(c) * x.plane() + p];
  return m;
}

void mat_into_tensor(const Mat& m, Tensor& x, int n) {
  double* img = x.image(n);
  for (int c = 0; c < x.c; ++c)
    for (int p = 0; p < x.plane(); ++p) img[static_cast<size_t>(c) * x.plane() + p] = m(c, p);
}

}  // namespace

void SelfAttention::build(const std::string& name, int channels, Rng& rng) {
  c = channels;
  ln.build(name + ".ln", channels);
  q_proj.build(name + ".q", channels, channels, rng);
  k_proj.build(name + ".k", channels, channels, rng);
  v_proj.build(name + ".v", channels, channels, rng);
  o_proj.build(name + ".o", channels, channels, rng, 0.2);
}

Tensor SelfAttention::forward(const Tensor& x) {
  x_cache = x;
  const int P = x.plane();
  Tensor normed = ln.forward(x);
  // flatten all batches to [C x N*P]
  Mat flat(c, static_cast<Eigen::Index>(x.n) * P);
  for (int n = 0; n < x.n; ++n) flat.middleCols(static_cast<Eigen::Index>(n) * P, P) = tensor_as_mat(normed, n);
  q_cache = q_proj.forward(flat);
  k_cache = k_proj.forward(flat);
  v_cache = v_proj.forward(flat);

  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  attn_cache.assign(x.n, Mat());
  Mat out_flat(c, static_cast<Eigen::Index>(x.n) * P);
  for (int n = 0; n < x.n; ++n) {
    const auto Q = q_cache.middleCols(static_cast<Eigen::Index>(n) * P, P);
    const auto K = k_cache.middleCols(static_cast<Eigen::Index>(n) * P, P);
    const auto V = v_cache.middleCols(static_cast<Eigen::Index>(n) * P, P);
    Mat S = (Q.transpose() * K) * scale;  // [P x P], row = query position
    for (int i = 0; i < P; ++i) {
      const double mx = S.row(i).maxCoeff();
      S.row(i) = (S.row(i).array() - mx).exp();
      S.row(i) /= S.row(i).sum();
    }
    attn_cache[n] = S;
    out_flat.middleCols(static_cast<Eigen::Index>(n) * P, P) = V * S.transpose();
  }
  Mat y_flat = o_proj.forward(out_flat);
  Tensor y = x;  // residual
  for (int n = 0; n < x.n; ++n) {
    Mat yn = tensor_as_mat(y, n);
    yn += y_flat.middleCols(static_cast<Eigen::Index>(n) * P, P);
    mat_into_tensor(yn, y, n);
  }
  return y;
}

Tensor SelfAttention::backward(const Tensor& gy) {
  const int P = gy.plane();
  Mat gy_flat(c, static_cast<Eigen::Index>(gy.n) * P);
  for (int n = 0; n < gy.n; ++n)
    gy_flat.middleCols(static_cast<Eigen::Index>(n) * P, P) = tensor_as_mat(gy, n);

  Mat g_out = o_proj.backward(gy_flat);
  const double scale = 1.0 / std::sqrt(static_cast<double>(c));
  Mat gq(c, gy_flat.cols()), gk(c, gy_flat.cols()), gv(c, gy_flat.cols());
  for (int n = 0; n < gy.n; ++n) {
    const auto GO = g_out.middleCols(static_cast<Eigen::Index>(n) * P, P);
    const auto Q = q_cache.middleCols(static_cast<Eigen::Index>(n) * P, P);
    const auto K = k_cache.middleCols(static_cast<Eigen::Index>(n) * P, P);
    const auto V = v_cache.middleCols(static_cast<Eigen::Index>(n) * P, P);
    const Mat& A = attn_cache[n];
    // O = V * A^T
    gv.middleCols(static_cast<Eigen::Index>(n) * P, P) = GO * A;
    Mat gA = GO.transpose() * V;  // [P x P]
    // softmax backward, row-wise
    Mat gS(P, P);
    for (int i = 0; i < P; ++i) {
      const double dot = gA.row(i).dot(A.row(i));
      gS.row(i) = A.row(i).cwiseProduct((gA.row(i).array() - dot).matrix());
    }
    gS *= scale;
    gq.middleCols(static_cast<Eigen::Index>(n) * P, P) = K * gS.transpose();
    gk.middleCols(static_cast<Eigen::Index>(n) * P, P) = Q * gS;
  }
  Mat g_flat = q_proj.backward(gq);
  g_flat += k_proj.backward(gk);
  g_flat += v_proj.backward(gv);

  Tensor g_norm = gy;  // reshape container
  for (int n = 0; n < gy.n; ++n)
    mat_into_tensor(g_flat.middleCols(static_cast<Eigen::Index>(n) * P, P), g_norm, n);
  Tensor gx = ln.backward(g_norm);
  for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += gy.v[i];  // residual
  return gx;
}

void SelfAttention::collect(ParamList& out_params) {
  ln.collect(out_params);
  q_proj.collect(out_params);
  k_proj.collect(out_params);
  v_proj.collect(out_params);
  o_proj.collect(out_params);
}

// ---- ResBlock ----

void ResBlock::build(const std::string& name, int in_channels, int out_channels,
                     int time_dim, int cond_dim, int cond_hidden, Rng& rng) {
  in_c = in_channels;
  out_c = out_channels;
  ln1.build(name + ".ln1", in_c);
  ln2.build(name + ".ln2", out_c);
  conv1.build(name + ".conv1", in_c, out_c, 3, 1, 1, rng);
  conv2.build(name + ".conv2", out_c, out_c, 3, 1, 1, rng, 0.2);
  temb_proj.build(name + ".temb", time_dim, out_c, rng, 0.2);
  cond_fc1.build(name + ".cond_fc1", cond_dim, cond_hidden, rng);
  cond_fc2.build(name + ".cond_fc2", cond_hidden, out_c, rng, 0.2);
  if (in_c != out_c) {
    skip.emplace();
    skip->build(name + ".skip", in_c, out_c, 1, 1, 0, rng);
  }
}

Mat ResBlock::cond_embed(const Mat& cond) const {
  Mat h = cond_fc1.forward_const(cond);
  h = h.unaryExpr([](double v) { return gelu(v); });
  return cond_fc2.forward_const(h);
}

namespace {

// e <- e + alpha*proj(e, d+) - beta*proj(e, d-), column-wise
void apply_intervention(Mat& e, const Mat& dplus, const Mat& dminus, double alpha,
                        double beta) {
  for (Eigen::Index n = 0; n < e.cols(); ++n) {
    const double np = dplus.col(n).squaredNorm();
    const double nm = dminus.col(n).squaredNorm();
    if (np < 1e-24 || nm < 1e-24)
      throw std::runtime_error("latent intervention: zero-norm concept direction");
    const Vec proj_p = (e.col(n).dot(dplus.col(n)) / np) * dplus.col(n);
    const Vec proj_m = (e.col(n).dot(dminus.col(n)) / nm) * dminus.col(n);
    e.col(n) += alpha * proj_p - beta * proj_m;
  }
}

}  // namespace

Tensor ResBlock::forward(const Tensor& x, const Mat& temb, const Mat& cond,
                         const CondIntervention* iv) {
  Tensor h = ln1.forward(x);
  h = act1.forward(h);
  h = conv1.forward(h);

  Mat tb = temb_proj.forward(temb_act.forward(temb));
  Mat c1 = cond_fc1.forward(cond);
  Mat cb = cond_fc2.forward(cond_act.forward(c1));
  if (iv && (iv->alpha != 0.0 || iv->beta != 0.0)) {
    const Eigen::Index n = cond.cols();
    Mat dplus = cond_embed(iv->cond_plus.replicate(1, n));
    Mat dminus = cond_embed(iv->cond_minus.replicate(1, n));
    apply_intervention(cb, dplus, dminus, iv->alpha, iv->beta);
  }
  cbias_cache = tb + cb;
  const int plane = h.plane();
  for (int n = 0; n < h.n; ++n)
    for (int c = 0; c < h.c; ++c) {
      double* dst = h.image(n) + static_cast<size_t>(c) * plane;
      const double add = cbias_cache(c, n);
      for (int p = 0; p < plane; ++p) dst[p] += add;
    }

  Tensor h2 = ln2.forward(h);
  h2 = act2.forward(h2);
  h2 = conv2.forward(h2);

  if (skip) {
    Tensor s = skip->forward(x);
    for (size_t i = 0; i < h2.v.size(); ++i) h2.v[i] += s.v[i];
  } else {
    for (size_t i = 0; i < h2.v.size(); ++i) h2.v[i] += x.v[i];
  }
  return h2;
}

Tensor ResBlock::backward(const Tensor& gy, Mat& g_temb) {
  Tensor g = conv2.backward(gy);
  g = act2.backward(g);
  g = ln2.backward(g);

  // per-channel bias gradient
  Mat gbias(out_c, g.n);
  const int plane = g.plane();
  for (int n = 0; n < g.n; ++n)
    for (int c = 0; c < out_c; ++c) {
      const double* src = g.image(n) + static_cast<size_t>(c) * plane;
      double acc = 0.0;
      for (int p = 0; p < plane; ++p) acc += src[p];
      gbias(c, n) = acc;
    }
  g_temb += temb_act.backward(temb_proj.backward(gbias));
  Mat gc1 = cond_fc2.backward(gbias);
  cond_fc1.backward(cond_act.backward(gc1));  // conditioning is data; drop its grad

  Tensor gx = conv1.backward(g);
  gx = act1.backward(gx);
  gx = ln1.backward(gx);

  if (skip) {
    Tensor gs = skip->backward(gy);
    for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += gs.v[i];
  } else {
    for (size_t i = 0; i < gx.v.size(); ++i) gx.v[i] += gy.v[i];
  }
  return gx;
}

void ResBlock::collect(ParamList& out_params) {
  ln1.collect(out_params);
  conv1.collect(out_params);
  temb_proj.collect(out_params);
  cond_fc1.collect(out_params);
  cond_fc2.collect(out_params);
  ln2.collect(out_params);
  conv2.collect(out_params);
  if (skip) skip->collect(out_params);
}

void ResBlock::collect_cond(ParamList& out_params) {
  cond_fc1.collect(out_params);
  cond_fc2.collect(out_params);
}

// ---- UNet ----

Mat UNet::sinusoidal(const std::vector<double>& t, int dim) {
  const int half = dim / 2;
  Mat e(dim, static_cast<Eigen::Index>(t.size()));
  for (size_t n = 0; n < t.size(); ++n) {
    for (int i = 0; i < half; ++i) {
      const double freq =
          std::exp(std::log(10000.0) * (half == 1 ? 0.0 : static_cast<double>(i) / (half - 1)));
      e(i, n) = std::sin(t[n] * freq);
      e(half + i, n) = std::cos(t[n] * freq);
    }
  }
  return e;
}

void UNet::build(const UNetConfig& cfg, Rng& rng) {
  cfg_ = cfg;
  levels_ = static_cast<int>(cfg.channels_per_level.size());
  if (levels_ < 1) throw std::invalid_argument("UNet: need at least one level");
  if (cfg.time_embed_dim % 2 != 0)
    throw std::invalid_argument("UNet: time_embed_dim must be even");

  time_fc1_.build("time.fc1", cfg.time_embed_dim, cfg.time_hidden, rng);
  time_fc2_.build("time.fc2", cfg.time_hidden, cfg.time_hidden, rng);
  stem_.build("stem", cfg.image_channels, cfg.channels_per_level[0], 3, 1, 1, rng);

  enc_.resize(levels_);
  dec_.resize(levels_);
  up_.resize(levels_);
  up_conv_.resize(levels_);
  for (int l = 0; l < levels_; ++l) {
    const int ch = cfg.channels_per_level[l];
    for (int b = 0; b < cfg.res_blocks_per_level; ++b) {
      enc_[l].emplace_back();
      enc_[l].back().build("enc" + std::to_string(l) + ".block" + std::to_string(b), ch, ch,
                           cfg.time_hidden, cfg.cond_dim, cfg.cond_hidden, rng);
    }
    if (l + 1 < levels_) {
      down_.emplace_back();
      down_.back().build("down" + std::to_string(l), ch, cfg.channels_per_level[l + 1], 3, 2,
                         1, rng);
    }
  }
  const int cb = cfg.channels_per_level.back();
  mid1_.build("mid.block0", cb, cb, cfg.time_hidden, cfg.cond_dim, cfg.cond_hidden, rng);
  if (cfg.bottleneck_attention) attn_.build("mid.attn", cb, rng);
  mid2_.build("mid.block1", cb, cb, cfg.time_hidden, cfg.cond_dim, cfg.cond_hidden, rng);

  for (int l = levels_ - 1; l >= 0; --l) {
    const int ch = cfg.channels_per_level[l];
    for (int b = 0; b < cfg.res_blocks_per_level; ++b) {
      const int in_ch = (b == 0) ? 2 * ch : ch;
      dec_[l].emplace_back();
      dec_[l].back().build("dec" + std::to_string(l) + ".block" + std::to_string(b), in_ch,
                           ch, cfg.time_hidden, cfg.cond_dim, cfg.cond_hidden, rng);
    }
    if (l > 0)
      up_conv_[l].build("up" + std::to_string(l), ch, cfg.channels_per_level[l - 1], 3, 1, 1,
                        rng);
  }
  out_ln_.build("out.ln", cfg.channels_per_level[0]);
  out_conv_.build("out.conv", cfg.channels_per_level[0], cfg.image_channels, 3, 1, 1, rng);
  std::fill(out_conv_.W.w.begin(), out_conv_.W.w.end(), 0.0);  // identity-free start

  register_params();
}

void UNet::register_params() {
  params_.clear();
  time_fc1_.collect(params_);
  time_fc2_.collect(params_);
  stem_.collect(params_);
  for (int l = 0; l < levels_; ++l) {
    for (auto& bl : enc_[l]) bl.collect(params_);
    if (l + 1 < levels_) down_[l].collect(params_);
  }
  mid1_.collect(params_);
  if (cfg_.bottleneck_attention) attn_.collect(params_);
  mid2_.collect(params_);
  for (int l = levels_ - 1; l >= 0; --l) {
    for (auto& bl : dec_[l]) bl.collect(params_);
    if (l > 0) up_conv_[l].collect(params_);
  }
  out_ln_.collect(params_);
  out_conv_.collect(params_);
}

ParamList UNet::embedding_params() {
  ParamList out;
  for (int l = 0; l < levels_; ++l)
    for (auto& bl : enc_[l]) bl.collect_cond(out);
  mid1_.collect_cond(out);
  mid2_.collect_cond(out);
  for (int l = levels_ - 1; l >= 0; --l)
    for (auto& bl : dec_[l]) bl.collect_cond(out);
  return out;
}

size_t UNet::param_count() const {
  size_t n = 0;
  for (const Param* p : params_) n += p->w.size();
  return n;
}

Mat UNet::time_features(const std::vector<double>& t) {
  time_sin_cache_ = sinusoidal(t, cfg_.time_embed_dim);
  Mat h = time_fc1_.forward(time_sin_cache_);
  h = time_act_.forward(h);
  return time_fc2_.forward(h);
}

Tensor UNet::forward(const Tensor& x, const std::vector<double>& t, const Mat& cond,
                     const CondIntervention* iv) {
  if (static_cast<int>(t.size()) != x.n || cond.cols() != x.n)
    throw std::invalid_argument("UNet: batch size mismatch");
  if (cond.rows() != cfg_.cond_dim)
    throw std::invalid_argument("UNet: conditioning dim mismatch");
  const int div = 1 << (levels_ - 1);
  if (x.h % div != 0 || x.w % div != 0)
    throw std::invalid_argument("UNet: resolution not divisible by 2^(levels-1)");

  Mat temb = time_features(t);
  Tensor h = stem_.forward(x);
  skip_cache_.clear();
  for (int l = 0; l < levels_; ++l) {
    for (auto& bl : enc_[l]) h = bl.forward(h, temb, cond, iv);
    skip_cache_.push_back(h);
    if (l + 1 < levels_) h = down_[l].forward(h);
  }
  h = mid1_.forward(h, temb, cond, iv);
  if (cfg_.bottleneck_attention) h = attn_.forward(h);
  h = mid2_.forward(h, temb, cond, iv);

  for (int l = levels_ - 1; l >= 0; --l) {
    const Tensor& s = skip_cache_[l];
    Tensor cat(h.n, h.c + s.c, h.h, h.w);
    for (int n = 0; n < h.n; ++n) {
      std::copy_n(h.image(n), h.per_image(), cat.image(n));
      std::copy_n(s.image(n), s.per_image(), cat.image(n) + h.per_image());
    }
    h = std::move(cat);
    for (auto& bl : dec_[l]) h = bl.forward(h, temb, cond, iv);
    if (l > 0) {
      h = up_[l].forward(h);
      h = up_conv_[l].forward(h);
    }
  }
  h = out_ln_.forward(h);
  h = out_act_.forward(h);
  return out_conv_.forward(h);
}

Tensor UNet::backward(const Tensor& gy) {
  Mat g_temb = Mat::Zero(cfg_.time_hidden, gy.n);
  Tensor g = out_conv_.backward(gy);
  g = out_act_.backward(g);
  g = out_ln_.backward(g);

  // decoder ran l = levels-1 .. 0, so backward walks l = 0 .. levels-1; the
  // up-conv of level l sits between level l-1's concat and level l's blocks
  std::vector<Tensor> g_skip(levels_);
  for (int l = 0; l < levels_; ++l) {
    if (l > 0) {
      g = up_conv_[l].backward(g);
      g = up_[l].backward(g);
    }
    for (int b = static_cast<int>(dec_[l].size()) - 1; b >= 0; --b)
      g = dec_[l][b].backward(g, g_temb);
    const Tensor& s = skip_cache_[l];
    const int hc = g.c - s.c;
    Tensor gh(g.n, hc, g.h, g.w);
    Tensor gs(g.n, s.c, g.h, g.w);
    for (int n = 0; n < g.n; ++n) {
      std::copy_n(g.image(n), gh.per_image(), gh.image(n));
      std::copy_n(g.image(n) + gh.per_image(), gs.per_image(), gs.image(n));
    }
    g_skip[l] = std::move(gs);
    g = std::move(gh);
  }

  g = mid2_.backward(g, g_temb);
  if (cfg_.bottleneck_attention) g = attn_.backward(g);
  g = mid1_.backward(g, g_temb);

  for (int l = levels_ - 1; l >= 0; --l) {
    if (l < levels_ - 1) g = down_[l].backward(g);
    for (size_t i = 0; i < g.v.size(); ++i) g.v[i] += g_skip[l].v[i];
    for (int b = static_cast<int>(enc_[l].size()) - 1; b >= 0; --b)
      g = enc_[l][b].backward(g, g_temb);
  }
  Tensor gx = stem_.backward(g);

  Mat gt = time_fc2_.backward(g_temb);
  gt = time_act_.backward(gt);
  time_fc1_.backward(gt);  // sinusoidal features carry no parameters
  return gx;
}

void zero_grads(const ParamList& params) {
  for (Param* p : params) p->zero_grad();
}

// ---- AdamW ----

void AdamW::attach(const ParamList& params, const Config& cfg) {
  params_ = params;
  cfg_ = cfg;
  m_.clear();
  v_.clear();
  for (Param* p : params_) {
    m_.emplace_back(p->w.size(), 0.0);
    v_.emplace_back(p->w.size(), 0.0);
  }
  t_ = 0;
}

void AdamW::step() {
  ++t_;
  const double bc1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double bc2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (size_t i = 0; i < params_.size(); ++i) {
    Param& p = *params_[i];
    auto& m = m_[i];
    auto& v = v_[i];
    for (size_t j = 0; j < p.w.size(); ++j) {
      m[j] = cfg_.beta1 * m[j] + (1.0 - cfg_.beta1) * p.g[j];
      v[j] = cfg_.beta2 * v[j] + (1.0 - cfg_.beta2) * p.g[j] * p.g[j];
      const double mh = m[j] / bc1;
      const double vh = v[j] / bc2;
      p.w[j] -= cfg_.lr * (mh / (std::sqrt(vh) + cfg_.eps) + cfg_.weight_decay * p.w[j]);
    }
  }
}

}  // namespace conceptlab::nn
