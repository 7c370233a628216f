#include "textret/nn/ops.hpp"

#include <algorithm>
#include <cmath>
#include <limits>
#include <sstream>

#include "textret/similarity.hpp"

namespace textret::nn {

std::string shape_string(const Shape& s) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < s.size(); ++i) os << (i ? "," : "") << s[i];
  os << ']';
  return os.str();
}

namespace {

template <class S>
void require_shape(const Var<S>& v, int rank, const char* op) {
  if (v.value().rank() != rank)
    throw InvalidInput(std::string(op) + ": expected rank " + std::to_string(rank) + ", got " + shape_string(v.shape()));
}

template <class S>
S softplus(S x) {
  return std::max(x, S(0)) + std::log1p(std::exp(-std::abs(x)));
}

template <class S>
S sigmoid_scalar(S x) {
  return x >= 0 ? S(1) / (S(1) + std::exp(-x)) : std::exp(x) / (S(1) + std::exp(x));
}

}  // namespace

// Elementwise --------------------------------------------------------------------

template <class S>
Var<S> add(Var<S> a, Var<S> b) {
  if (a.shape() != b.shape()) throw InvalidInput("add: shape mismatch " + shape_string(a.shape()) + " vs " + shape_string(b.shape()));
  Tensor<S> out(a.shape(), a.value().data + b.value().data);
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [ia, ib](Tape<S>& t, int self) {
    const auto& g = t.grad(self).data;
    if (t.needs_grad(ia)) t.grad_of(ia).data += g;
    if (t.needs_grad(ib)) t.grad_of(ib).data += g;
  });
}

template <class S>
Var<S> scale(Var<S> a, S s) {
  Tensor<S> out(a.shape(), a.value().data * s);
  const int ia = a.id;
  return a.tape->push(std::move(out), a.needs_grad(), [ia, s](Tape<S>& t, int self) {
    t.grad_of(ia).data += t.grad(self).data * s;
  });
}

template <class S>
Var<S> relu(Var<S> a) {
  Tensor<S> out(a.shape(), a.value().data.cwiseMax(S(0)));
  const int ia = a.id;
  return a.tape->push(std::move(out), a.needs_grad(), [ia](Tape<S>& t, int self) {
    const auto& x = t.value(ia).data;
    t.grad_of(ia).data += (x.array() > S(0)).select(t.grad(self).data, S(0));
  });
}

template <class S>
Var<S> tanh(Var<S> a) {
  Tensor<S> out(a.shape(), a.value().data.array().tanh().matrix());
  const int ia = a.id;
  return a.tape->push(std::move(out), a.needs_grad(), [ia](Tape<S>& t, int self) {
    const auto& y = t.value(self).data.array();
    t.grad_of(ia).data.array() += t.grad(self).data.array() * (S(1) - y * y);
  });
}

template <class S>
Var<S> sigmoid(Var<S> a) {
  Tensor<S> out(a.shape());
  for (Eigen::Index i = 0; i < out.numel(); ++i) out.data[i] = sigmoid_scalar(a.value().data[i]);
  const int ia = a.id;
  return a.tape->push(std::move(out), a.needs_grad(), [ia](Tape<S>& t, int self) {
    const auto& y = t.value(self).data.array();
    t.grad_of(ia).data.array() += t.grad(self).data.array() * y * (S(1) - y);
  });
}

template <class S>
Var<S> reshape(Var<S> a, Shape shape) {
  if (shape_numel(shape) != a.value().numel())
    throw InvalidInput("reshape: " + shape_string(a.shape()) + " -> " + shape_string(shape));
  Tensor<S> out(std::move(shape), a.value().data);
  const int ia = a.id;
  return a.tape->push(std::move(out), a.needs_grad(), [ia](Tape<S>& t, int self) {
    t.grad_of(ia).data += t.grad(self).data;
  });
}

template <class S>
Var<S> sum_scalars(Tape<S>& tape, const std::vector<Var<S>>& terms) {
  Tensor<S> out(Shape{1});
  bool ng = false;
  std::vector<int> ids;
  for (const auto& v : terms) {
    if (v.value().numel() != 1) throw InvalidInput("sum_scalars: non-scalar term");
    out.data[0] += v.item();
    ng = ng || v.needs_grad();
    ids.push_back(v.id);
  }
  return tape.push(std::move(out), ng, [ids](Tape<S>& t, int self) {
    const S g = t.grad(self).data[0];
    for (int id : ids)
      if (t.needs_grad(id)) t.grad_of(id).data[0] += g;
  });
}

// Convolution ----------------------------------------------------------------------

namespace {

struct ConvGeom {
  int cin, h, w, kh, kw, ho, wo;
  ConvSpec spec;
  bool pointwise() const {
    return kh == 1 && kw == 1 && spec.stride_h == 1 && spec.stride_w == 1 && spec.pad_h == 0 && spec.pad_w == 0;
  }
};

/// Output columns [lo, hi) whose input column for tap kx lies inside the image.
inline std::pair<int, int> valid_columns(const ConvGeom& g, int kx) {
  const int sw = g.spec.stride_w, off = kx - g.spec.pad_w;
  int lo = off >= 0 ? 0 : (-off + sw - 1) / sw;
  int hi = g.w - off <= 0 ? 0 : (g.w - off + sw - 1) / sw;
  hi = std::min(hi, g.wo);
  lo = std::min(lo, hi);
  return {lo, hi};
}

template <class S>
void im2col(const S* x, const ConvGeom& g, RowMatrix<S>& col) {
  col.resize(static_cast<Eigen::Index>(g.cin) * g.kh * g.kw, static_cast<Eigen::Index>(g.ho) * g.wo);
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        S* row = col.data() + ((static_cast<Eigen::Index>(c) * g.kh + ky) * g.kw + kx) * col.cols();
        const S* plane = x + static_cast<Eigen::Index>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.spec.stride_h - g.spec.pad_h + ky;
          S* dst = row + oy * g.wo;
          if (iy < 0 || iy >= g.h) {
            std::fill(dst, dst + g.wo, S(0));
            continue;
          }
          const S* src = plane + static_cast<Eigen::Index>(iy) * g.w;
          const auto [lo, hi] = valid_columns(g, kx);
          std::fill(dst, dst + lo, S(0));
          std::fill(dst + hi, dst + g.wo, S(0));
          const int sw = g.spec.stride_w, off = kx - g.spec.pad_w;
          if (sw == 1)
            std::copy(src + lo + off, src + hi + off, dst + lo);
          else
            for (int ox = lo; ox < hi; ++ox) dst[ox] = src[ox * sw + off];
        }
      }
}

template <class S>
void col2im_add(const RowMatrix<S>& col, const ConvGeom& g, S* dx) {
  for (int c = 0; c < g.cin; ++c)
    for (int ky = 0; ky < g.kh; ++ky)
      for (int kx = 0; kx < g.kw; ++kx) {
        const S* row = col.data() + ((static_cast<Eigen::Index>(c) * g.kh + ky) * g.kw + kx) * col.cols();
        S* plane = dx + static_cast<Eigen::Index>(c) * g.h * g.w;
        for (int oy = 0; oy < g.ho; ++oy) {
          const int iy = oy * g.spec.stride_h - g.spec.pad_h + ky;
          if (iy < 0 || iy >= g.h) continue;
          S* dst = plane + static_cast<Eigen::Index>(iy) * g.w;
          const S* src = row + oy * g.wo;
          const auto [lo, hi] = valid_columns(g, kx);
          const int sw = g.spec.stride_w, off = kx - g.spec.pad_w;
          for (int ox = lo; ox < hi; ++ox) dst[ox * sw + off] += src[ox];
        }
      }
}

}  // namespace

template <class S>
Var<S> conv2d(Var<S> x, Var<S> weight, Var<S> bias, ConvSpec spec) {
  require_shape(x, 4, "conv2d");
  require_shape(weight, 4, "conv2d weight");
  const int n = x.dim(0), cout = weight.dim(0);
  ConvGeom g{x.dim(1), x.dim(2), x.dim(3), weight.dim(2), weight.dim(3), 0, 0, spec};
  if (weight.dim(1) != g.cin) throw InvalidInput("conv2d: input channels " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  if (bias.value().numel() != cout) throw InvalidInput("conv2d: bias size");
  g.ho = (g.h + 2 * spec.pad_h - g.kh) / spec.stride_h + 1;
  g.wo = (g.w + 2 * spec.pad_w - g.kw) / spec.stride_w + 1;
  if (g.ho < 1 || g.wo < 1) throw InvalidInput("conv2d: input too small " + shape_string(x.shape()));
  const Eigen::Index ck = static_cast<Eigen::Index>(g.cin) * g.kh * g.kw, p = static_cast<Eigen::Index>(g.ho) * g.wo;
  const Eigen::Index in_stride = static_cast<Eigen::Index>(g.cin) * g.h * g.w;
  Tensor<S> out(Shape{n, cout, g.ho, g.wo});
  const auto wm = weight.value().as_matrix(cout, ck);
  const auto& b = bias.value().data;
  RowMatrix<S> col;
  for (int i = 0; i < n; ++i) {
    Eigen::Map<RowMatrix<S>> o(out.ptr() + i * cout * p, cout, p);
    if (g.pointwise()) {
      o.noalias() = wm * Eigen::Map<const RowMatrix<S>>(x.value().ptr() + i * in_stride, g.cin, p);
    } else {
      im2col(x.value().ptr() + i * in_stride, g, col);
      o.noalias() = wm * col;
    }
    o.colwise() += b;
  }
  const int ix = x.id, iw = weight.id, ib = bias.id;
  const bool ng = x.needs_grad() || weight.needs_grad() || bias.needs_grad();
  return x.tape->push(std::move(out), ng, [=](Tape<S>& t, int self) {
    const auto& gout = t.grad(self);
    const auto wmat = t.value(iw).as_matrix(cout, ck);
    RowMatrix<S> colb, dcol;
    for (int i = 0; i < n; ++i) {
      Eigen::Map<const RowMatrix<S>> go(gout.ptr() + i * cout * p, cout, p);
      if (t.needs_grad(ib)) t.grad_of(ib).data += go.rowwise().sum();
      const S* xin = t.value(ix).ptr() + i * in_stride;
      if (t.needs_grad(iw)) {
        auto dw = t.grad_of(iw).as_matrix(cout, ck);
        if (g.pointwise()) {
          dw.noalias() += go * Eigen::Map<const RowMatrix<S>>(xin, g.cin, p).transpose();
        } else {
          im2col(xin, g, colb);
          dw.noalias() += go * colb.transpose();
        }
      }
      if (t.needs_grad(ix)) {
        S* dx = t.grad_of(ix).ptr() + i * in_stride;
        if (g.pointwise()) {
          Eigen::Map<RowMatrix<S>>(dx, g.cin, p).noalias() += wmat.transpose() * go;
        } else {
          dcol.noalias() = wmat.transpose() * go;
          col2im_add(dcol, g, dx);
        }
      }
    }
  });
}

template <class S>
Var<S> group_norm(Var<S> x, Var<S> gamma, Var<S> beta, int groups, S eps) {
  require_shape(x, 4, "group_norm");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  if (groups < 1 || c % groups != 0) throw InvalidInput("group_norm: channels not divisible by groups");
  if (gamma.value().numel() != c || beta.value().numel() != c) throw InvalidInput("group_norm: affine size");
  const int cg = c / groups;
  const Eigen::Index m = static_cast<Eigen::Index>(cg) * hw;
  Tensor<S> out(x.shape());
  Vector<S> xhat(x.value().numel());
  Vector<S> inv_std(static_cast<Eigen::Index>(n) * groups);
  for (int i = 0; i < n; ++i)
    for (int gi = 0; gi < groups; ++gi) {
      const Eigen::Index off = (static_cast<Eigen::Index>(i) * c + gi * cg) * hw;
      auto seg = x.value().data.segment(off, m);
      const S mean = seg.mean();
      const S var = (seg.array() - mean).square().mean();
      const S is = S(1) / std::sqrt(var + eps);
      inv_std[i * groups + gi] = is;
      xhat.segment(off, m) = (seg.array() - mean) * is;
      for (int ch = 0; ch < cg; ++ch) {
        const int cc = gi * cg + ch;
        out.data.segment(off + ch * hw, hw) =
            (xhat.segment(off + ch * hw, hw).array() * gamma.value().data[cc] + beta.value().data[cc]).matrix();
      }
    }
  const int ix = x.id, igm = gamma.id, ibt = beta.id;
  const bool ng = x.needs_grad() || gamma.needs_grad() || beta.needs_grad();
  return x.tape->push(std::move(out), ng, [=](Tape<S>& t, int self) {
    const auto& gy = t.grad(self).data;
    const auto& gm = t.value(igm).data;
    Vector<S> dxhat(m);
    for (int i = 0; i < n; ++i)
      for (int gi = 0; gi < groups; ++gi) {
        const Eigen::Index off = (static_cast<Eigen::Index>(i) * c + gi * cg) * hw;
        for (int ch = 0; ch < cg; ++ch) {
          const int cc = gi * cg + ch;
          const auto gseg = gy.segment(off + ch * hw, hw);
          const auto xseg = xhat.segment(off + ch * hw, hw);
          if (t.needs_grad(igm)) t.grad_of(igm).data[cc] += gseg.dot(xseg);
          if (t.needs_grad(ibt)) t.grad_of(ibt).data[cc] += gseg.sum();
          dxhat.segment(ch * hw, hw) = gseg * gm[cc];
        }
        if (t.needs_grad(ix)) {
          const auto xs = xhat.segment(off, m);
          const S sum_d = dxhat.sum();
          const S sum_dx = dxhat.dot(xs);
          const S is = inv_std[i * groups + gi];
          t.grad_of(ix).data.segment(off, m).array() +=
              (is / static_cast<S>(m)) * (static_cast<S>(m) * dxhat.array() - sum_d - xs.array() * sum_dx);
        }
      }
  });
}

template <class S>
Var<S> upsample_nearest(Var<S> x, int out_h, int out_w) {
  require_shape(x, 4, "upsample_nearest");
  const int n = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  std::vector<int> src(static_cast<std::size_t>(out_h) * out_w);
  for (int y = 0; y < out_h; ++y)
    for (int xx = 0; xx < out_w; ++xx)
      src[static_cast<std::size_t>(y) * out_w + xx] = std::min(h - 1, y * h / out_h) * w + std::min(w - 1, xx * w / out_w);
  Tensor<S> out(Shape{n, c, out_h, out_w});
  const Eigen::Index planes = static_cast<Eigen::Index>(n) * c, pin = static_cast<Eigen::Index>(h) * w,
                     pout = static_cast<Eigen::Index>(out_h) * out_w;
  for (Eigen::Index pl = 0; pl < planes; ++pl)
    for (Eigen::Index k = 0; k < pout; ++k) out.data[pl * pout + k] = x.value().data[pl * pin + src[static_cast<std::size_t>(k)]];
  const int ix = x.id;
  return x.tape->push(std::move(out), x.needs_grad(), [=](Tape<S>& t, int self) {
    const auto& g = t.grad(self).data;
    auto& dx = t.grad_of(ix).data;
    for (Eigen::Index pl = 0; pl < planes; ++pl)
      for (Eigen::Index k = 0; k < pout; ++k) dx[pl * pin + src[static_cast<std::size_t>(k)]] += g[pl * pout + k];
  });
}

// Region and sequence ------------------------------------------------------------------

namespace {

struct BilinearTap {
  int bin;
  int pos[4];
  double weight[4];
};

}  // namespace

template <class S>
Var<S> roi_align(Var<S> feature, const std::vector<Box>& boxes, double spatial_scale, int out_h, int out_w,
                 int sampling) {
  require_shape(feature, 4, "roi_align");
  if (feature.dim(0) != 1) throw InvalidInput("roi_align: expects a single feature map");
  if (out_h < 1 || out_w < 1 || sampling < 1) throw InvalidInput("roi_align: bad output grid");
  const int c = feature.dim(1), h = feature.dim(2), w = feature.dim(3);
  const int k = static_cast<int>(boxes.size());
  const int bins = out_h * out_w;
  std::vector<std::vector<BilinearTap>> taps(boxes.size());
  for (int b = 0; b < k; ++b) {
    const Box& box = boxes[static_cast<std::size_t>(b)];
    if (!(box.width() > 0 && box.height() > 0)) throw InvalidInput("roi_align: degenerate (zero-area) box");
    const double x0 = box.x0 * spatial_scale - 0.5, y0 = box.y0 * spatial_scale - 0.5;
    const double bw = box.width() * spatial_scale / out_w, bh = box.height() * spatial_scale / out_h;
    auto& list = taps[static_cast<std::size_t>(b)];
    for (int ph = 0; ph < out_h; ++ph)
      for (int pw = 0; pw < out_w; ++pw)
        for (int sy = 0; sy < sampling; ++sy)
          for (int sx = 0; sx < sampling; ++sx) {
            double y = y0 + ph * bh + (sy + 0.5) * bh / sampling;
            double x = x0 + pw * bw + (sx + 0.5) * bw / sampling;
            BilinearTap tap{ph * out_w + pw, {0, 0, 0, 0}, {0, 0, 0, 0}};
            if (y < -1.0 || y > h || x < -1.0 || x > w) {
              list.push_back(tap);
              continue;
            }
            y = std::max(y, 0.0);
            x = std::max(x, 0.0);
            int yl = static_cast<int>(y), xl = static_cast<int>(x), yh, xh;
            if (yl >= h - 1) { yl = yh = h - 1; y = yl; } else { yh = yl + 1; }
            if (xl >= w - 1) { xl = xh = w - 1; x = xl; } else { xh = xl + 1; }
            const double ly = y - yl, lx = x - xl;
            tap.pos[0] = yl * w + xl;
            tap.pos[1] = yl * w + xh;
            tap.pos[2] = yh * w + xl;
            tap.pos[3] = yh * w + xh;
            tap.weight[0] = (1 - ly) * (1 - lx);
            tap.weight[1] = (1 - ly) * lx;
            tap.weight[2] = ly * (1 - lx);
            tap.weight[3] = ly * lx;
            list.push_back(tap);
          }
  }
  const double norm = 1.0 / (sampling * sampling);
  const Eigen::Index plane = static_cast<Eigen::Index>(h) * w;
  Tensor<S> out(Shape{k, c, out_h, out_w});
  const S* f = feature.value().ptr();
  for (int b = 0; b < k; ++b)
    for (int ch = 0; ch < c; ++ch) {
      const S* fp = f + ch * plane;
      S* op = out.ptr() + (static_cast<Eigen::Index>(b) * c + ch) * bins;
      for (const auto& tap : taps[static_cast<std::size_t>(b)]) {
        double v = 0;
        for (int q = 0; q < 4; ++q) v += tap.weight[q] * fp[tap.pos[q]];
        op[tap.bin] += static_cast<S>(v * norm);
      }
    }
  const int ifeat = feature.id;
  return feature.tape->push(std::move(out), feature.needs_grad(), [=](Tape<S>& t, int self) {
    const S* g = t.grad(self).ptr();
    S* df = t.grad_of(ifeat).ptr();
    for (int b = 0; b < k; ++b)
      for (int ch = 0; ch < c; ++ch) {
        S* dp = df + ch * plane;
        const S* gp = g + (static_cast<Eigen::Index>(b) * c + ch) * bins;
        for (const auto& tap : taps[static_cast<std::size_t>(b)]) {
          const double gv = gp[tap.bin] * norm;
          for (int q = 0; q < 4; ++q) dp[tap.pos[q]] += static_cast<S>(tap.weight[q] * gv);
        }
      }
  });
}

template <class S>
Var<S> average_height(Var<S> x) {
  require_shape(x, 4, "average_height");
  const int k = x.dim(0), c = x.dim(1), h = x.dim(2), w = x.dim(3);
  Tensor<S> out(Shape{k, w, c});
  const S* in = x.value().ptr();
  for (int i = 0; i < k; ++i)
    for (int ch = 0; ch < c; ++ch)
      for (int y = 0; y < h; ++y)
        for (int xx = 0; xx < w; ++xx)
          out.data[(static_cast<Eigen::Index>(i) * w + xx) * c + ch] +=
              in[((static_cast<Eigen::Index>(i) * c + ch) * h + y) * w + xx] / static_cast<S>(h);
  const int ix = x.id;
  return x.tape->push(std::move(out), x.needs_grad(), [=](Tape<S>& t, int self) {
    const S* g = t.grad(self).ptr();
    S* dx = t.grad_of(ix).ptr();
    for (int i = 0; i < k; ++i)
      for (int ch = 0; ch < c; ++ch)
        for (int y = 0; y < h; ++y)
          for (int xx = 0; xx < w; ++xx)
            dx[((static_cast<Eigen::Index>(i) * c + ch) * h + y) * w + xx] +=
                g[(static_cast<Eigen::Index>(i) * w + xx) * c + ch] / static_cast<S>(h);
  });
}

template <class S>
Var<S> linear(Var<S> x, Var<S> weight, Var<S> bias) {
  require_shape(weight, 2, "linear weight");
  const int dout = weight.dim(0), din = weight.dim(1);
  if (x.value().rank() < 1 || x.shape().back() != din)
    throw InvalidInput("linear: input " + shape_string(x.shape()) + " vs weight " + shape_string(weight.shape()));
  if (bias.value().numel() != dout) throw InvalidInput("linear: bias size");
  const Eigen::Index rows = x.value().numel() / din;
  Shape shape = x.shape();
  shape.back() = dout;
  Tensor<S> out(shape);
  auto o = out.as_matrix(rows, dout);
  o.noalias() = x.value().as_matrix(rows, din) * weight.value().as_matrix(dout, din).transpose();
  o.rowwise() += bias.value().data.transpose();
  const int ix = x.id, iw = weight.id, ib = bias.id;
  const bool ng = x.needs_grad() || weight.needs_grad() || bias.needs_grad();
  return x.tape->push(std::move(out), ng, [=](Tape<S>& t, int self) {
    const auto g = t.grad(self).as_matrix(rows, dout);
    if (t.needs_grad(ib)) t.grad_of(ib).data += g.colwise().sum().transpose();
    if (t.needs_grad(iw)) t.grad_of(iw).as_matrix(dout, din).noalias() += g.transpose() * t.value(ix).as_matrix(rows, din);
    if (t.needs_grad(ix)) t.grad_of(ix).as_matrix(rows, din).noalias() += g * t.value(iw).as_matrix(dout, din);
  });
}

template <class S>
Var<S> lstm(Var<S> x, Var<S> w_input, Var<S> w_hidden, Var<S> bias, bool reverse) {
  require_shape(x, 3, "lstm");
  const int k = x.dim(0), steps = x.dim(1), din = x.dim(2);
  const int hid = w_hidden.dim(1);
  if (w_input.dim(0) != 4 * hid || w_input.dim(1) != din || w_hidden.dim(0) != 4 * hid || bias.value().numel() != 4 * hid)
    throw InvalidInput("lstm: weight shapes do not match input " + shape_string(x.shape()));
  const int g4 = 4 * hid;
  // Input projections for all steps at once: row (i*T + t).
  RowMatrix<S> zx = x.value().as_matrix(static_cast<Eigen::Index>(k) * steps, din) *
                    w_input.value().as_matrix(g4, din).transpose();
  zx.rowwise() += bias.value().data.transpose();
  const auto wh = w_hidden.value().as_matrix(g4, hid);
  // Per-step caches, indexed by time t: gates [K,4H] (activated), cell [K,H].
  std::vector<RowMatrix<S>> gates(static_cast<std::size_t>(steps)), cells(static_cast<std::size_t>(steps));
  Tensor<S> out(Shape{k, steps, hid});
  RowMatrix<S> h = RowMatrix<S>::Zero(k, hid), c = RowMatrix<S>::Zero(k, hid);
  for (int s = 0; s < steps; ++s) {
    const int tt = reverse ? steps - 1 - s : s;
    RowMatrix<S> z(k, g4);
    for (int i = 0; i < k; ++i) z.row(i) = zx.row(static_cast<Eigen::Index>(i) * steps + tt);
    z.noalias() += h * wh.transpose();
    auto& a = gates[static_cast<std::size_t>(tt)];
    a.resize(k, g4);
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < g4; ++j) {
        const int gate = j / hid;
        a(i, j) = gate == 2 ? std::tanh(z(i, j)) : sigmoid_scalar(z(i, j));
      }
    c = a.middleCols(hid, hid).cwiseProduct(c) + a.leftCols(hid).cwiseProduct(a.middleCols(2 * hid, hid));
    h = a.rightCols(hid).cwiseProduct(c.array().tanh().matrix());
    cells[static_cast<std::size_t>(tt)] = c;
    for (int i = 0; i < k; ++i)
      for (int j = 0; j < hid; ++j) out.data[(static_cast<Eigen::Index>(i) * steps + tt) * hid + j] = h(i, j);
  }
  const int ix = x.id, iwi = w_input.id, iwh = w_hidden.id, ib = bias.id;
  const bool ng = x.needs_grad() || w_input.needs_grad() || w_hidden.needs_grad() || bias.needs_grad();
  return x.tape->push(std::move(out), ng, [=](Tape<S>& t, int self) {
    const auto& gout = t.grad(self);
    const auto& hout = t.value(self);
    const auto whm = t.value(iwh).as_matrix(g4, hid);
    RowMatrix<S> dzx(static_cast<Eigen::Index>(k) * steps, g4);
    RowMatrix<S> dh_next = RowMatrix<S>::Zero(k, hid), dc_next = RowMatrix<S>::Zero(k, hid);
    RowMatrix<S> dwh = RowMatrix<S>::Zero(g4, hid);
    RowMatrix<S> dz(k, g4), h_prev(k, hid);
    for (int s = steps - 1; s >= 0; --s) {
      const int tt = reverse ? steps - 1 - s : s;
      const int prev = reverse ? tt + 1 : tt - 1;
      const bool has_prev = s > 0;
      const auto& a = gates[static_cast<std::size_t>(tt)];
      const auto& cc = cells[static_cast<std::size_t>(tt)];
      RowMatrix<S> tc = cc.array().tanh().matrix();
      RowMatrix<S> dh = dh_next;
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < hid; ++j) dh(i, j) += gout.data[(static_cast<Eigen::Index>(i) * steps + tt) * hid + j];
      RowMatrix<S> c_prev = has_prev ? cells[static_cast<std::size_t>(prev)] : RowMatrix<S>::Zero(k, hid);
      for (int i = 0; i < k; ++i)
        for (int j = 0; j < hid; ++j) {
          const S ig = a(i, j), fg = a(i, hid + j), gg = a(i, 2 * hid + j), og = a(i, 3 * hid + j);
          const S dc = dc_next(i, j) + dh(i, j) * og * (S(1) - tc(i, j) * tc(i, j));
          dz(i, j) = dc * gg * ig * (S(1) - ig);
          dz(i, hid + j) = dc * c_prev(i, j) * fg * (S(1) - fg);
          dz(i, 2 * hid + j) = dc * ig * (S(1) - gg * gg);
          dz(i, 3 * hid + j) = dh(i, j) * tc(i, j) * og * (S(1) - og);
          dc_next(i, j) = dc * fg;
        }
      if (has_prev) {
        for (int i = 0; i < k; ++i)
          for (int j = 0; j < hid; ++j) h_prev(i, j) = hout.data[(static_cast<Eigen::Index>(i) * steps + prev) * hid + j];
        dwh.noalias() += dz.transpose() * h_prev;
      }
      dh_next.noalias() = dz * whm;
      for (int i = 0; i < k; ++i) dzx.row(static_cast<Eigen::Index>(i) * steps + tt) = dz.row(i);
    }
    if (t.needs_grad(iwh)) t.grad_of(iwh).as_matrix(g4, hid) += dwh;
    if (t.needs_grad(ib)) t.grad_of(ib).data += dzx.colwise().sum().transpose();
    const Eigen::Index rows = static_cast<Eigen::Index>(k) * steps;
    if (t.needs_grad(iwi)) t.grad_of(iwi).as_matrix(g4, din).noalias() += dzx.transpose() * t.value(ix).as_matrix(rows, din);
    if (t.needs_grad(ix)) t.grad_of(ix).as_matrix(rows, din).noalias() += dzx * t.value(iwi).as_matrix(g4, din);
  });
}

template <class S>
Var<S> concat_last(Var<S> a, Var<S> b) {
  Shape sa = a.shape(), sb = b.shape();
  if (sa.size() != sb.size() || !std::equal(sa.begin(), sa.end() - 1, sb.begin()))
    throw InvalidInput("concat_last: leading dims differ");
  const int da = sa.back(), db = sb.back();
  const Eigen::Index rows = a.value().numel() / std::max(da, 1);
  Shape so = sa;
  so.back() = da + db;
  Tensor<S> out(so);
  auto o = out.as_matrix(rows, da + db);
  o.leftCols(da) = a.value().as_matrix(rows, da);
  o.rightCols(db) = b.value().as_matrix(rows, db);
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape<S>& t, int self) {
    const auto g = t.grad(self).as_matrix(rows, da + db);
    if (t.needs_grad(ia)) t.grad_of(ia).as_matrix(rows, da) += g.leftCols(da);
    if (t.needs_grad(ib)) t.grad_of(ib).as_matrix(rows, db) += g.rightCols(db);
  });
}

template <class S>
Var<S> concat_rows(Tape<S>& tape, const std::vector<Var<S>>& parts, const Shape& trailing) {
  const Eigen::Index width = shape_numel(trailing);
  int total = 0;
  bool ng = false;
  for (const auto& p : parts) {
    Shape tail(p.shape().begin() + 1, p.shape().end());
    if (tail != trailing) throw InvalidInput("concat_rows: trailing shape " + shape_string(tail) + " vs " + shape_string(trailing));
    total += p.dim(0);
    ng = ng || p.needs_grad();
  }
  Shape so{total};
  so.insert(so.end(), trailing.begin(), trailing.end());
  Tensor<S> out(so);
  std::vector<std::pair<int, Eigen::Index>> spans;  // (id, offset)
  Eigen::Index off = 0;
  for (const auto& p : parts) {
    out.data.segment(off, p.value().numel()) = p.value().data;
    spans.emplace_back(p.id, off);
    off += p.value().numel();
  }
  (void)width;
  return tape.push(std::move(out), ng, [spans](Tape<S>& t, int self) {
    const auto& g = t.grad(self).data;
    for (const auto& [id, o] : spans)
      if (t.needs_grad(id)) {
        auto& d = t.grad_of(id).data;
        d += g.segment(o, d.size());
      }
  });
}

template <class S>
RowMatrix<S> interpolation_matrix(int length, int steps) {
  if (length < 1 || steps < 1) throw InvalidInput("interpolation_matrix: sizes must be positive");
  RowMatrix<S> m = RowMatrix<S>::Zero(steps, length);
  for (int t = 0; t < steps; ++t) {
    if (length == 1) {
      m(t, 0) = 1;
      continue;
    }
    const double pos = steps == 1 ? 0.0 : static_cast<double>(t) * (length - 1) / (steps - 1);
    const int lo = std::min(static_cast<int>(std::floor(pos)), length - 1);
    const double frac = pos - lo;
    if (lo >= length - 1) {
      m(t, length - 1) = 1;
    } else {
      m(t, lo) = static_cast<S>(1 - frac);
      m(t, lo + 1) = static_cast<S>(frac);
    }
  }
  return m;
}

template <class S>
Var<S> embed_interpolate(Var<S> table, const std::vector<std::vector<int>>& words, int steps) {
  require_shape(table, 2, "embed_interpolate");
  const int vocab = table.dim(0), d = table.dim(1);
  const int n = static_cast<int>(words.size());
  Tensor<S> out(Shape{n, steps, d});
  const auto tab = table.value().as_matrix(vocab, d);
  std::vector<RowMatrix<S>> interp;
  for (int i = 0; i < n; ++i) {
    const auto& w = words[static_cast<std::size_t>(i)];
    if (w.empty()) throw InvalidInput("embed_interpolate: empty word");
    RowMatrix<S> e(static_cast<Eigen::Index>(w.size()), d);
    for (std::size_t j = 0; j < w.size(); ++j) {
      if (w[j] < 0 || w[j] >= vocab) throw InvalidInput("embed_interpolate: symbol outside the embedding table");
      e.row(static_cast<Eigen::Index>(j)) = tab.row(w[j]);
    }
    interp.push_back(interpolation_matrix<S>(static_cast<int>(w.size()), steps));
    Eigen::Map<RowMatrix<S>>(out.ptr() + static_cast<Eigen::Index>(i) * steps * d, steps, d).noalias() = interp.back() * e;
  }
  const int it = table.id;
  return table.tape->push(std::move(out), table.needs_grad(), [=](Tape<S>& t, int self) {
    const auto& g = t.grad(self);
    auto dt = t.grad_of(it).as_matrix(vocab, d);
    for (int i = 0; i < n; ++i) {
      Eigen::Map<const RowMatrix<S>> gi(g.ptr() + static_cast<Eigen::Index>(i) * steps * d, steps, d);
      RowMatrix<S> de = interp[static_cast<std::size_t>(i)].transpose() * gi;
      const auto& w = words[static_cast<std::size_t>(i)];
      for (std::size_t j = 0; j < w.size(); ++j) dt.row(w[j]) += de.row(static_cast<Eigen::Index>(j));
    }
  });
}

template <class S>
Var<S> nchw_to_rows(Var<S> x) {
  require_shape(x, 4, "nchw_to_rows");
  const int n = x.dim(0), c = x.dim(1), hw = x.dim(2) * x.dim(3);
  Tensor<S> out(Shape{n * hw, c});
  for (int i = 0; i < n; ++i)
    out.as_matrix(static_cast<Eigen::Index>(n) * hw, c).middleRows(static_cast<Eigen::Index>(i) * hw, hw) =
        Eigen::Map<const RowMatrix<S>>(x.value().ptr() + static_cast<Eigen::Index>(i) * c * hw, c, hw).transpose();
  const int ix = x.id;
  return x.tape->push(std::move(out), x.needs_grad(), [=](Tape<S>& t, int self) {
    const auto g = t.grad(self).as_matrix(static_cast<Eigen::Index>(n) * hw, c);
    for (int i = 0; i < n; ++i)
      Eigen::Map<RowMatrix<S>>(t.grad_of(ix).ptr() + static_cast<Eigen::Index>(i) * c * hw, c, hw) +=
          g.middleRows(static_cast<Eigen::Index>(i) * hw, hw).transpose();
  });
}

template <class S>
Var<S> gather_rows(Var<S> x, const std::vector<int>& rows) {
  require_shape(x, 2, "gather_rows");
  const int m = x.dim(0), d = x.dim(1);
  Tensor<S> out(Shape{static_cast<int>(rows.size()), d});
  const auto xm = x.value().as_matrix(m, d);
  for (std::size_t r = 0; r < rows.size(); ++r) {
    if (rows[r] < 0 || rows[r] >= m) throw InvalidInput("gather_rows: index out of range");
    out.as_matrix(static_cast<Eigen::Index>(rows.size()), d).row(static_cast<Eigen::Index>(r)) = xm.row(rows[r]);
  }
  const int ix = x.id;
  return x.tape->push(std::move(out), x.needs_grad(), [=](Tape<S>& t, int self) {
    const auto g = t.grad(self).as_matrix(static_cast<Eigen::Index>(rows.size()), d);
    auto dx = t.grad_of(ix).as_matrix(m, d);
    for (std::size_t r = 0; r < rows.size(); ++r) dx.row(rows[r]) += g.row(static_cast<Eigen::Index>(r));
  });
}

template <class S>
Var<S> cosine(Var<S> a, Var<S> b) {
  require_shape(a, 2, "cosine");
  require_shape(b, 2, "cosine");
  const int n = a.dim(0), k = b.dim(0), d = a.dim(1);
  if (b.dim(1) != d) throw InvalidInput("cosine: feature widths differ");
  Tensor<S> out(Shape{n, k});
  if (n > 0 && k > 0) {
    const RowMatrix<S> am = a.value().as_matrix(n, d), bm = b.value().as_matrix(k, d);
    out.as_matrix(n, k) = cosine_rows(am, bm);
  }
  const int ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), a.needs_grad() || b.needs_grad(), [=](Tape<S>& t, int self) {
    if (n == 0 || k == 0) return;
    const RowMatrix<S> am = t.value(ia).as_matrix(n, d), bm = t.value(ib).as_matrix(k, d);
    const RowMatrix<S> g = t.grad(self).as_matrix(n, k);
    RowMatrix<S> da, db;
    cosine_rows_backward<S>(am, bm, g, da, db);
    if (t.needs_grad(ia)) t.grad_of(ia).as_matrix(n, d) += da;
    if (t.needs_grad(ib)) t.grad_of(ib).as_matrix(k, d) += db;
  });
}

// Losses ------------------------------------------------------------------------------

template <class S>
Var<S> smooth_l1_rows(Var<S> pred, const RowMatrix<S>& target, S beta, RowReduce reduce) {
  require_shape(pred, 2, "smooth_l1_rows");
  const int r = pred.dim(0), c = pred.dim(1);
  if (target.rows() != r || target.cols() != c) throw InvalidInput("smooth_l1_rows: prediction/target shape mismatch");
  const auto p = pred.value().as_matrix(r, c);
  RowMatrix<S> grad = RowMatrix<S>::Zero(r, c);
  S total = 0;
  for (int i = 0; i < r && c > 0; ++i) {
    int best = 0;
    S best_v = -1;
    S row_sum = 0;
    for (int j = 0; j < c; ++j) {
      const S diff = p(i, j) - target(i, j);
      const S ad = std::abs(diff);
      const S v = ad < beta ? S(0.5) * diff * diff / beta : ad - S(0.5) * beta;
      const S dv = ad < beta ? diff / beta : (diff > 0 ? S(1) : S(-1));
      if (reduce == RowReduce::Mean) {
        row_sum += v / static_cast<S>(c);
        grad(i, j) = dv / static_cast<S>(c * r);
      } else if (v > best_v) {
        best_v = v;
        best = j;
      }
    }
    if (reduce == RowReduce::Max) {
      const S diff = p(i, best) - target(i, best);
      grad(i, best) = (std::abs(diff) < beta ? diff / beta : (diff > 0 ? S(1) : S(-1))) / static_cast<S>(r);
      total += best_v;
    } else {
      total += row_sum;
    }
  }
  Tensor<S> out(Shape{1});
  out.data[0] = r > 0 ? total / static_cast<S>(r) : S(0);
  const int ip = pred.id;
  return pred.tape->push(std::move(out), pred.needs_grad(), [=](Tape<S>& t, int self) {
    t.grad_of(ip).as_matrix(r, c) += grad * t.grad(self).data[0];
  });
}

namespace {

inline double log_add(double a, double b) {
  if (a == -std::numeric_limits<double>::infinity()) return b;
  if (b == -std::numeric_limits<double>::infinity()) return a;
  return a > b ? a + std::log1p(std::exp(b - a)) : b + std::log1p(std::exp(a - b));
}

/// NLL for one item and, if `grad` is non-null, d NLL / d logits (T x V).
template <class S>
double ctc_single(const S* logits, int steps, int vocab, const std::vector<int>& label, int blank,
                  Eigen::MatrixXd* grad) {
  constexpr double kNegInf = -std::numeric_limits<double>::infinity();
  Eigen::MatrixXd lp(steps, vocab);
  for (int t = 0; t < steps; ++t) {
    double mx = kNegInf;
    for (int v = 0; v < vocab; ++v) mx = std::max(mx, static_cast<double>(logits[t * vocab + v]));
    double z = 0;
    for (int v = 0; v < vocab; ++v) z += std::exp(logits[t * vocab + v] - mx);
    for (int v = 0; v < vocab; ++v) lp(t, v) = logits[t * vocab + v] - mx - std::log(z);
  }
  const int len = static_cast<int>(label.size());
  const int sl = 2 * len + 1;
  std::vector<int> ext(static_cast<std::size_t>(sl), blank);
  for (int i = 0; i < len; ++i) ext[static_cast<std::size_t>(2 * i + 1)] = label[static_cast<std::size_t>(i)];
  Eigen::MatrixXd alpha = Eigen::MatrixXd::Constant(steps, sl, kNegInf);
  Eigen::MatrixXd beta = Eigen::MatrixXd::Constant(steps, sl, kNegInf);
  alpha(0, 0) = lp(0, blank);
  if (sl > 1) alpha(0, 1) = lp(0, ext[1]);
  for (int t = 1; t < steps; ++t)
    for (int s = 0; s < sl; ++s) {
      double a = alpha(t - 1, s);
      if (s >= 1) a = log_add(a, alpha(t - 1, s - 1));
      if (s >= 2 && ext[static_cast<std::size_t>(s)] != blank && ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s - 2)])
        a = log_add(a, alpha(t - 1, s - 2));
      if (a != kNegInf) alpha(t, s) = a + lp(t, ext[static_cast<std::size_t>(s)]);
    }
  double logp = alpha(steps - 1, sl - 1);
  if (sl > 1) logp = log_add(logp, alpha(steps - 1, sl - 2));
  if (logp == kNegInf) return std::numeric_limits<double>::infinity();
  if (!grad) return -logp;
  beta(steps - 1, sl - 1) = lp(steps - 1, blank);
  if (sl > 1) beta(steps - 1, sl - 2) = lp(steps - 1, ext[static_cast<std::size_t>(sl - 2)]);
  for (int t = steps - 2; t >= 0; --t)
    for (int s = 0; s < sl; ++s) {
      double b = beta(t + 1, s);
      if (s + 1 < sl) b = log_add(b, beta(t + 1, s + 1));
      if (s + 2 < sl && ext[static_cast<std::size_t>(s)] != blank && ext[static_cast<std::size_t>(s)] != ext[static_cast<std::size_t>(s + 2)])
        b = log_add(b, beta(t + 1, s + 2));
      if (b != kNegInf) beta(t, s) = b + lp(t, ext[static_cast<std::size_t>(s)]);
    }
  grad->resize(steps, vocab);
  for (int t = 0; t < steps; ++t) {
    std::vector<double> occ(static_cast<std::size_t>(vocab), kNegInf);
    for (int s = 0; s < sl; ++s) {
      const double ab = alpha(t, s) + beta(t, s);
      if (ab != kNegInf) occ[static_cast<std::size_t>(ext[static_cast<std::size_t>(s)])] = log_add(occ[static_cast<std::size_t>(ext[static_cast<std::size_t>(s)])], ab);
    }
    for (int v = 0; v < vocab; ++v) {
      const double post = occ[static_cast<std::size_t>(v)] == kNegInf ? 0.0 : std::exp(occ[static_cast<std::size_t>(v)] - lp(t, v) - logp);
      (*grad)(t, v) = std::exp(lp(t, v)) - post;
    }
  }
  return -logp;
}

}  // namespace

template <class S>
std::vector<S> ctc_nll(const Tensor<S>& logits, const std::vector<std::vector<int>>& labels, int blank) {
  if (logits.rank() != 3) throw InvalidInput("ctc_nll: logits must be [K,T,V]");
  const int k = logits.dim(0), steps = logits.dim(1), vocab = logits.dim(2);
  if (static_cast<int>(labels.size()) != k) throw InvalidInput("ctc_nll: one label per item required");
  std::vector<S> out;
  for (int i = 0; i < k; ++i)
    out.push_back(static_cast<S>(ctc_single(logits.ptr() + static_cast<Eigen::Index>(i) * steps * vocab, steps, vocab,
                                            labels[static_cast<std::size_t>(i)], blank, nullptr)));
  return out;
}

template <class S>
Var<S> ctc_loss(Var<S> logits, const std::vector<std::vector<int>>& labels, int blank) {
  require_shape(logits, 3, "ctc_loss");
  const int k = logits.dim(0), steps = logits.dim(1), vocab = logits.dim(2);
  if (static_cast<int>(labels.size()) != k) throw InvalidInput("ctc_loss: one label per item required");
  if (blank < 0 || blank >= vocab) throw InvalidInput("ctc_loss: blank index outside the class range");
  Tensor<S> grad(logits.shape());
  double total = 0;
  for (int i = 0; i < k; ++i) {
    const auto& label = labels[static_cast<std::size_t>(i)];
    if (label.empty()) throw InvalidInput("ctc_loss: empty label");
    for (int c : label)
      if (c < 0 || c >= vocab || c == blank) throw InvalidInput("ctc_loss: label symbol out of range");
    Eigen::MatrixXd g;
    const double nll = ctc_single(logits.value().ptr() + static_cast<Eigen::Index>(i) * steps * vocab, steps, vocab,
                                  label, blank, &g);
    if (!std::isfinite(nll)) continue;
    const double w = 1.0 / (static_cast<double>(label.size()) * k);
    total += nll * w;
    for (int t = 0; t < steps; ++t)
      for (int v = 0; v < vocab; ++v)
        grad.data[(static_cast<Eigen::Index>(i) * steps + t) * vocab + v] = static_cast<S>(g(t, v) * w);
  }
  Tensor<S> out(Shape{1});
  out.data[0] = static_cast<S>(total);
  const int il = logits.id;
  return logits.tape->push(std::move(out), logits.needs_grad(), [il, grad](Tape<S>& t, int self) {
    t.grad_of(il).data += grad.data * t.grad(self).data[0];
  });
}

template <class S>
Var<S> sigmoid_focal_loss(Var<S> logits, const Vector<S>& targets, S alpha, S gamma, S normalizer) {
  const Eigen::Index m = logits.value().numel();
  if (targets.size() != m) throw InvalidInput("sigmoid_focal_loss: target size mismatch");
  Tensor<S> grad(logits.shape());
  double total = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const S x = logits.value().data[i];
    const S p = sigmoid_scalar(x);
    const S log_p = -softplus(-x), log_q = -softplus(x);
    if (targets[i] > S(0.5)) {
      const S w = std::pow(S(1) - p, gamma);
      total += -alpha * w * log_p;
      grad.data[i] = alpha * w * (gamma * p * log_p - (S(1) - p));
    } else {
      const S w = std::pow(p, gamma);
      total += -(S(1) - alpha) * w * log_q;
      grad.data[i] = (S(1) - alpha) * w * (p - gamma * (S(1) - p) * log_q);
    }
  }
  grad.data /= normalizer;
  Tensor<S> out(Shape{1});
  out.data[0] = static_cast<S>(total / normalizer);
  const int il = logits.id;
  return logits.tape->push(std::move(out), logits.needs_grad(), [il, grad](Tape<S>& t, int self) {
    t.grad_of(il).data += grad.data * t.grad(self).data[0];
  });
}

template <class S>
Var<S> bce_with_logits(Var<S> logits, const Vector<S>& targets, const Vector<S>& weights, S normalizer) {
  const Eigen::Index m = logits.value().numel();
  if (targets.size() != m || weights.size() != m) throw InvalidInput("bce_with_logits: size mismatch");
  Tensor<S> grad(logits.shape());
  double total = 0;
  for (Eigen::Index i = 0; i < m; ++i) {
    const S x = logits.value().data[i];
    total += weights[i] * (softplus(x) - targets[i] * x);
    grad.data[i] = weights[i] * (sigmoid_scalar(x) - targets[i]) / normalizer;
  }
  Tensor<S> out(Shape{1});
  out.data[0] = static_cast<S>(total / normalizer);
  const int il = logits.id;
  return logits.tape->push(std::move(out), logits.needs_grad(), [il, grad](Tape<S>& t, int self) {
    t.grad_of(il).data += grad.data * t.grad(self).data[0];
  });
}

template <class S>
Var<S> iou_loss_exp(Var<S> raw, const Vector<S>& strides, const RowMatrix<S>& targets, const Vector<S>& weights,
                    S normalizer) {
  require_shape(raw, 2, "iou_loss_exp");
  const int m = raw.dim(0);
  if (raw.dim(1) != 4 || targets.rows() != m || targets.cols() != 4 || strides.size() != m || weights.size() != m)
    throw InvalidInput("iou_loss_exp: shape mismatch");
  Tensor<S> grad(raw.shape());
  double total = 0;
  const auto r = raw.value().as_matrix(m, 4);
  for (int i = 0; i < m; ++i) {
    S p[4], d[4];
    for (int j = 0; j < 4; ++j) p[j] = std::exp(std::min(r(i, j), S(12))) * strides[i];
    const S* tg = &targets(i, 0);
    const S ap = (p[0] + p[2]) * (p[1] + p[3]);
    const S at = (tg[0] + tg[2]) * (tg[1] + tg[3]);
    const S wi = std::min(p[0], tg[0]) + std::min(p[2], tg[2]);
    const S hi = std::min(p[1], tg[1]) + std::min(p[3], tg[3]);
    const S inter = wi * hi;
    const S uni = ap + at - inter;
    const S eps = S(1e-7);
    total += weights[i] * -std::log((inter + eps) / (uni + eps));
    // L = -log(I + eps) + log(U + eps), with dU/dI = -1.
    const S dl_di = -S(1) / (inter + eps) - S(1) / (uni + eps);
    const S dl_dap = S(1) / (uni + eps);
    d[0] = dl_dap * (p[1] + p[3]) + (p[0] < tg[0] ? dl_di * hi : S(0));
    d[2] = dl_dap * (p[1] + p[3]) + (p[2] < tg[2] ? dl_di * hi : S(0));
    d[1] = dl_dap * (p[0] + p[2]) + (p[1] < tg[1] ? dl_di * wi : S(0));
    d[3] = dl_dap * (p[0] + p[2]) + (p[3] < tg[3] ? dl_di * wi : S(0));
    for (int j = 0; j < 4; ++j)
      grad.data[i * 4 + j] = r(i, j) < S(12) ? weights[i] * d[j] * p[j] / normalizer : S(0);
  }
  Tensor<S> out(Shape{1});
  out.data[0] = static_cast<S>(total / normalizer);
  const int ir = raw.id;
  return raw.tape->push(std::move(out), raw.needs_grad(), [ir, grad](Tape<S>& t, int self) {
    t.grad_of(ir).data += grad.data * t.grad(self).data[0];
  });
}

#define TEXTRET_INSTANTIATE_OPS(S)                                                                                  \
  template Var<S> add(Var<S>, Var<S>);                                                                              \
  template Var<S> scale(Var<S>, S);                                                                                 \
  template Var<S> relu(Var<S>);                                                                                     \
  template Var<S> tanh(Var<S>);                                                                                     \
  template Var<S> sigmoid(Var<S>);                                                                                  \
  template Var<S> reshape(Var<S>, Shape);                                                                           \
  template Var<S> sum_scalars(Tape<S>&, const std::vector<Var<S>>&);                                                \
  template Var<S> conv2d(Var<S>, Var<S>, Var<S>, ConvSpec);                                                         \
  template Var<S> group_norm(Var<S>, Var<S>, Var<S>, int, S);                                                       \
  template Var<S> upsample_nearest(Var<S>, int, int);                                                               \
  template Var<S> roi_align(Var<S>, const std::vector<Box>&, double, int, int, int);                                \
  template Var<S> average_height(Var<S>);                                                                           \
  template Var<S> linear(Var<S>, Var<S>, Var<S>);                                                                   \
  template Var<S> lstm(Var<S>, Var<S>, Var<S>, Var<S>, bool);                                                       \
  template Var<S> concat_last(Var<S>, Var<S>);                                                                      \
  template Var<S> concat_rows(Tape<S>&, const std::vector<Var<S>>&, const Shape&);                                  \
  template Var<S> embed_interpolate(Var<S>, const std::vector<std::vector<int>>&, int);                             \
  template RowMatrix<S> interpolation_matrix<S>(int, int);                                                          \
  template Var<S> nchw_to_rows(Var<S>);                                                                             \
  template Var<S> gather_rows(Var<S>, const std::vector<int>&);                                                     \
  template Var<S> cosine(Var<S>, Var<S>);                                                                           \
  template Var<S> smooth_l1_rows(Var<S>, const RowMatrix<S>&, S, RowReduce);                                        \
  template Var<S> ctc_loss(Var<S>, const std::vector<std::vector<int>>&, int);                                      \
  template std::vector<S> ctc_nll(const Tensor<S>&, const std::vector<std::vector<int>>&, int);                     \
  template Var<S> sigmoid_focal_loss(Var<S>, const Vector<S>&, S, S, S);                                            \
  template Var<S> bce_with_logits(Var<S>, const Vector<S>&, const Vector<S>&, S);                                   \
  template Var<S> iou_loss_exp(Var<S>, const Vector<S>&, const RowMatrix<S>&, const Vector<S>&, S);

TEXTRET_INSTANTIATE_OPS(float)
TEXTRET_INSTANTIATE_OPS(double)

}  // namespace textret::nn
