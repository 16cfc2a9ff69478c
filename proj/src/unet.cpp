#include "ocd/unet.hpp"

#include <cmath>

#include "ocd/error.hpp"

namespace ocd {

namespace {

using RMat = RowMajorMat<double>;

// C x (B*H*W), pixel index b*H*W + y*W + x.
struct Map2 {
  Index c = 0, b = 0, h = 0, w = 0;
  RMat v;

  Index hw() const { return h * w; }
  Index n() const { return b * h * w; }
};

double sigmoid(double z) { return 1.0 / (1.0 + std::exp(-z)); }

RMat silu(const RMat& z) {
  return z.unaryExpr([](double v) { return v * sigmoid(v); });
}

RMat silu_backward(const RMat& z, const RMat& grad) {
  return grad.binaryExpr(z, [](double g, double v) {
    const double s = sigmoid(v);
    return g * s * (1.0 + v * (1.0 - s));
  });
}

void uniform_fill(Matrix& m, double bound, RngStream& rng) {
  for (Index i = 0; i < m.size(); ++i) m.data()[i] = bound * (2.0 * rng.uniform() - 1.0);
}

std::span<double> span_of(Matrix& m) { return {m.data(), static_cast<std::size_t>(m.size())}; }
std::span<double> span_of(Vector& v) { return {v.data(), static_cast<std::size_t>(v.size())}; }

struct Linear {
  Matrix w, gw;
  Vector b, gb;

  void init(Index in, Index out, RngStream& rng) {
    w.resize(out, in);
    uniform_fill(w, 1.0 / std::sqrt(static_cast<double>(in)), rng);
    b = Vector::Zero(out);
    gw = Matrix::Zero(out, in);
    gb = Vector::Zero(out);
  }
  void zero_grad() {
    gw.setZero();
    gb.setZero();
  }
  void collect(std::vector<ParamSpan>& p, std::vector<ParamSpan>& g, const std::string& name) {
    p.push_back({name + ".w", span_of(w)});
    p.push_back({name + ".b", span_of(b)});
    g.push_back({name + ".w", span_of(gw)});
    g.push_back({name + ".b", span_of(gb)});
  }
};

struct Conv {
  Index cin = 0, cout = 0, k = 3;
  Matrix w, gw;  // cout x (cin*k*k)
  Vector b, gb;
  RMat cols;
  Index B = 0, H = 0, W = 0;

  void init(Index in, Index out, Index kernel, RngStream& rng) {
    cin = in;
    cout = out;
    k = kernel;
    w.resize(out, in * k * k);
    uniform_fill(w, 1.0 / std::sqrt(static_cast<double>(in * k * k)), rng);
    b = Vector::Zero(out);
    gw = Matrix::Zero(out, in * k * k);
    gb = Vector::Zero(out);
  }
  void zero_grad() {
    gw.setZero();
    gb.setZero();
  }
  void collect(std::vector<ParamSpan>& p, std::vector<ParamSpan>& g, const std::string& name) {
    p.push_back({name + ".w", span_of(w)});
    p.push_back({name + ".b", span_of(b)});
    g.push_back({name + ".w", span_of(gw)});
    g.push_back({name + ".b", span_of(gb)});
  }

  void im2col(const Map2& x) {
    cols.setZero(cin * 9, x.n());
    const Index hw = x.hw();
    for (Index ci = 0; ci < cin; ++ci) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx) {
          const Index dy = ky - 1, dx = kx - 1;
          double* dst_row = cols.row(ci * 9 + ky * 3 + kx).data();
          const double* src_row = x.v.row(ci).data();
          const Index x0 = std::max<Index>(0, -dx), x1 = W - std::max<Index>(0, dx);
          for (Index bi = 0; bi < B; ++bi) {
            for (Index y = 0; y < H; ++y) {
              const Index sy = y + dy;
              if (sy < 0 || sy >= H) continue;
              double* dst = dst_row + bi * hw + y * W;
              const double* src = src_row + bi * hw + sy * W + dx;
              for (Index xx = x0; xx < x1; ++xx) dst[xx] = src[xx];
            }
          }
        }
      }
    }
  }

  Map2 col2im(const RMat& dcols) const {
    Map2 dx{cin, B, H, W, RMat::Zero(cin, B * H * W)};
    const Index hw = H * W;
    for (Index ci = 0; ci < cin; ++ci) {
      for (Index ky = 0; ky < 3; ++ky) {
        for (Index kx = 0; kx < 3; ++kx) {
          const Index oy = ky - 1, ox = kx - 1;
          const double* src_row = dcols.row(ci * 9 + ky * 3 + kx).data();
          double* dst_row = dx.v.row(ci).data();
          const Index x0 = std::max<Index>(0, -ox), x1 = W - std::max<Index>(0, ox);
          for (Index bi = 0; bi < B; ++bi) {
            for (Index y = 0; y < H; ++y) {
              const Index sy = y + oy;
              if (sy < 0 || sy >= H) continue;
              const double* src = src_row + bi * hw + y * W;
              double* dst = dst_row + bi * hw + sy * W + ox;
              for (Index xx = x0; xx < x1; ++xx) dst[xx] += src[xx];
            }
          }
        }
      }
    }
    return dx;
  }

  Map2 forward(const Map2& x) {
    if (x.c != cin) throw DimensionError("conv: channel mismatch");
    B = x.b;
    H = x.h;
    W = x.w;
    if (k == 3) {
      im2col(x);
    } else {
      cols = x.v;
    }
    Map2 y{cout, B, H, W, RMat(cout, x.n())};
    y.v.noalias() = w * cols;
    y.v.colwise() += b;
    return y;
  }

  Map2 backward(const Map2& dy) {
    gw.noalias() += dy.v * cols.transpose();
    gb += dy.v.rowwise().sum();
    RMat dcols(w.cols(), dy.n());
    dcols.noalias() = w.transpose() * dy.v;
    if (k == 3) return col2im(dcols);
    return {cin, B, H, W, std::move(dcols)};
  }
};

// Adds the per-sample channel offsets `proj` (C x B) to every pixel.
void add_per_sample(Map2& h, const Matrix& proj) {
  const Index hw = h.hw();
  for (Index c = 0; c < h.c; ++c)
    for (Index bi = 0; bi < h.b; ++bi) h.v.row(c).segment(bi * hw, hw).array() += proj(c, bi);
}

Matrix sum_per_sample(const Map2& d) {
  Matrix s(d.c, d.b);
  const Index hw = d.hw();
  for (Index c = 0; c < d.c; ++c)
    for (Index bi = 0; bi < d.b; ++bi) s(c, bi) = d.v.row(c).segment(bi * hw, hw).sum();
  return s;
}

struct ResBlock {
  Conv c1, c2, skip;
  bool has_skip = false;
  Linear inj;
  Map2 x, v1;
  Matrix cond;

  void init(Index in, Index out, Index cond_dim, RngStream& rng) {
    c1.init(in, out, 3, rng);
    c2.init(out, out, 3, rng);
    inj.init(cond_dim, out, rng);
    has_skip = in != out;
    if (has_skip) skip.init(in, out, 1, rng);
  }
  void zero_grad() {
    c1.zero_grad();
    c2.zero_grad();
    inj.zero_grad();
    if (has_skip) skip.zero_grad();
  }
  void collect(std::vector<ParamSpan>& p, std::vector<ParamSpan>& g, const std::string& name) {
    c1.collect(p, g, name + ".conv1");
    inj.collect(p, g, name + ".cond");
    c2.collect(p, g, name + ".conv2");
    if (has_skip) skip.collect(p, g, name + ".skip");
  }

  Map2 forward(const Map2& in, const Matrix& e) {
    x = in;
    cond = e;
    Map2 u1 = in;
    u1.v = silu(in.v);
    v1 = c1.forward(u1);
    Matrix proj = inj.w * e;
    proj.colwise() += inj.b;
    add_per_sample(v1, proj);
    Map2 u2 = v1;
    u2.v = silu(v1.v);
    Map2 y = c2.forward(u2);
    if (has_skip) {
      y.v += skip.forward(in).v;
    } else {
      y.v += in.v;
    }
    return y;
  }

  Map2 backward(const Map2& dy, Matrix& dcond) {
    Map2 du2 = c2.backward(dy);
    Map2 dv1 = du2;
    dv1.v = silu_backward(v1.v, du2.v);
    const Matrix dproj = sum_per_sample(dv1);
    inj.gw.noalias() += dproj * cond.transpose();
    inj.gb += dproj.rowwise().sum();
    dcond.noalias() += inj.w.transpose() * dproj;
    Map2 du1 = c1.backward(dv1);
    Map2 dx = du1;
    dx.v = silu_backward(x.v, du1.v);
    if (has_skip) {
      dx.v += skip.backward(dy).v;
    } else {
      dx.v += dy.v;
    }
    return dx;
  }
};

// Single-head self-attention over the pixels of each sample, with a
// residual connection.
struct Attention {
  Linear q, k, v, o;
  Map2 x;
  Matrix Q, K, V, O;        // C x N
  std::vector<Matrix> att;  // per sample, n x n (query rows)

  void init(Index c, RngStream& rng) {
    q.init(c, c, rng);
    k.init(c, c, rng);
    v.init(c, c, rng);
    o.init(c, c, rng);
  }
  void zero_grad() {
    q.zero_grad();
    k.zero_grad();
    v.zero_grad();
    o.zero_grad();
  }
  void collect(std::vector<ParamSpan>& p, std::vector<ParamSpan>& g, const std::string& name) {
    q.collect(p, g, name + ".q");
    k.collect(p, g, name + ".k");
    v.collect(p, g, name + ".v");
    o.collect(p, g, name + ".o");
  }

  static Matrix affine(const Linear& l, const Matrix& in) {
    Matrix out = l.w * in;
    out.colwise() += l.b;
    return out;
  }

  Map2 forward(const Map2& in) {
    x = in;
    const Matrix X = in.v;
    Q = affine(q, X);
    K = affine(k, X);
    V = affine(v, X);
    O.resize(in.c, in.n());
    const Index n = in.hw();
    const double scale = 1.0 / std::sqrt(static_cast<double>(in.c));
    att.assign(static_cast<std::size_t>(in.b), Matrix());
    for (Index bi = 0; bi < in.b; ++bi) {
      Matrix s = scale * Q.middleCols(bi * n, n).transpose() * K.middleCols(bi * n, n);
      for (Index i = 0; i < n; ++i) {
        const double mx = s.row(i).maxCoeff();
        s.row(i) = (s.row(i).array() - mx).exp();
        s.row(i) /= s.row(i).sum();
      }
      O.middleCols(bi * n, n).noalias() = V.middleCols(bi * n, n) * s.transpose();
      att[static_cast<std::size_t>(bi)] = std::move(s);
    }
    Map2 y = in;
    y.v += affine(o, O);
    return y;
  }

  Map2 backward(const Map2& dy) {
    const Matrix dY = dy.v;
    const Matrix X = x.v;
    o.gw.noalias() += dY * O.transpose();
    o.gb += dY.rowwise().sum();
    const Matrix dO = o.w.transpose() * dY;
    const Index n = x.hw();
    const double scale = 1.0 / std::sqrt(static_cast<double>(x.c));
    Matrix dQ(x.c, x.n()), dK(x.c, x.n()), dV(x.c, x.n());
    for (Index bi = 0; bi < x.b; ++bi) {
      const Matrix& a = att[static_cast<std::size_t>(bi)];
      const auto dOb = dO.middleCols(bi * n, n);
      dV.middleCols(bi * n, n).noalias() = dOb * a;
      const Matrix dA = dOb.transpose() * V.middleCols(bi * n, n);
      Matrix dS = a.cwiseProduct(dA);
      const Vector rs = dS.rowwise().sum();
      dS -= a.cwiseProduct(rs.replicate(1, n));
      dS *= scale;
      dQ.middleCols(bi * n, n).noalias() = K.middleCols(bi * n, n) * dS.transpose();
      dK.middleCols(bi * n, n).noalias() = Q.middleCols(bi * n, n) * dS;
    }
    q.gw.noalias() += dQ * X.transpose();
    q.gb += dQ.rowwise().sum();
    k.gw.noalias() += dK * X.transpose();
    k.gb += dK.rowwise().sum();
    v.gw.noalias() += dV * X.transpose();
    v.gb += dV.rowwise().sum();
    Map2 dx = dy;
    dx.v += q.w.transpose() * dQ + k.w.transpose() * dK + v.w.transpose() * dV;
    return dx;
  }
};

Map2 avg_pool(const Map2& x) {
  Map2 y{x.c, x.b, x.h / 2, x.w / 2, RMat(x.c, x.b * (x.h / 2) * (x.w / 2))};
  for (Index c = 0; c < x.c; ++c)
    for (Index bi = 0; bi < x.b; ++bi)
      for (Index r = 0; r < y.h; ++r)
        for (Index q = 0; q < y.w; ++q) {
          const Index s = bi * x.hw() + 2 * r * x.w + 2 * q;
          y.v(c, bi * y.hw() + r * y.w + q) =
              0.25 * (x.v(c, s) + x.v(c, s + 1) + x.v(c, s + x.w) + x.v(c, s + x.w + 1));
        }
  return y;
}

Map2 avg_pool_backward(const Map2& dy) {
  Map2 dx{dy.c, dy.b, dy.h * 2, dy.w * 2, RMat(dy.c, dy.b * dy.hw() * 4)};
  for (Index c = 0; c < dx.c; ++c)
    for (Index bi = 0; bi < dx.b; ++bi)
      for (Index r = 0; r < dx.h; ++r)
        for (Index q = 0; q < dx.w; ++q)
          dx.v(c, bi * dx.hw() + r * dx.w + q) = 0.25 * dy.v(c, bi * dy.hw() + (r / 2) * dy.w + q / 2);
  return dx;
}

Map2 upsample(const Map2& x) {
  Map2 y{x.c, x.b, x.h * 2, x.w * 2, RMat(x.c, x.b * x.hw() * 4)};
  for (Index c = 0; c < y.c; ++c)
    for (Index bi = 0; bi < y.b; ++bi)
      for (Index r = 0; r < y.h; ++r)
        for (Index q = 0; q < y.w; ++q)
          y.v(c, bi * y.hw() + r * y.w + q) = x.v(c, bi * x.hw() + (r / 2) * x.w + q / 2);
  return y;
}

Map2 upsample_backward(const Map2& dy) {
  Map2 dx{dy.c, dy.b, dy.h / 2, dy.w / 2, RMat::Zero(dy.c, dy.b * (dy.h / 2) * (dy.w / 2))};
  for (Index c = 0; c < dy.c; ++c)
    for (Index bi = 0; bi < dy.b; ++bi)
      for (Index r = 0; r < dy.h; ++r)
        for (Index q = 0; q < dy.w; ++q)
          dx.v(c, bi * dx.hw() + (r / 2) * dx.w + q / 2) += dy.v(c, bi * dy.hw() + r * dy.w + q);
  return dx;
}

Map2 concat(const Map2& a, const Map2& b) {
  Map2 y{a.c + b.c, a.b, a.h, a.w, RMat(a.c + b.c, a.n())};
  y.v.topRows(a.c) = a.v;
  y.v.bottomRows(b.c) = b.v;
  return y;
}

}  // namespace

struct UNet::Impl {
  Conv in_conv, out_conv;
  // Input-level conditioning: pos + reshape(spat * silu(hid(e))), C x side^2 per sample.
  Matrix pos, gpos;
  Linear hid;
  Matrix spat, gspat;  // (C * side^2) x spatial_hidden
  Matrix cond, hid_pre, hid_act;
  std::vector<ResBlock> down, up;
  ResBlock mid;
  Attention attn;
  Map2 last;

  void zero_grad() {
    in_conv.zero_grad();
    out_conv.zero_grad();
    gpos.setZero();
    gspat.setZero();
    hid.zero_grad();
    for (auto& r : down) r.zero_grad();
    for (auto& r : up) r.zero_grad();
    mid.zero_grad();
    attn.zero_grad();
  }

  void collect(const UNetConfig& cfg, std::vector<ParamSpan>& p, std::vector<ParamSpan>& g,
               const std::string& prefix) {
    in_conv.collect(p, g, prefix + "in");
    p.push_back({prefix + "pos", span_of(pos)});
    g.push_back({prefix + "pos", span_of(gpos)});
    hid.collect(p, g, prefix + "spatial_hidden");
    p.push_back({prefix + "spatial", span_of(spat)});
    g.push_back({prefix + "spatial", span_of(gspat)});
    for (std::size_t l = 0; l < down.size(); ++l) down[l].collect(p, g, prefix + "down" + std::to_string(l));
    mid.collect(p, g, prefix + "mid");
    if (cfg.attention) attn.collect(p, g, prefix + "attn");
    for (std::size_t l = 0; l < up.size(); ++l) up[l].collect(p, g, prefix + "up" + std::to_string(l));
    out_conv.collect(p, g, prefix + "out");
  }
};

void UNetConfig::validate() const {
  if (side < 1 || channels < 1 || levels < 0 || cond_dim < 1 || spatial_hidden < 1) {
    throw DimensionError("unet: side, channels and cond_dim must be positive");
  }
  if (side % (Index{1} << levels) != 0) {
    throw DimensionError("unet: side " + std::to_string(side) + " is not divisible by 2^" +
                         std::to_string(levels));
  }
}

UNet::UNet(const UNetConfig& cfg, RngStream& init) : cfg_(cfg), impl_(std::make_unique<Impl>()) {
  cfg.validate();
  auto& m = *impl_;
  const Index c = cfg.channels;
  m.in_conv.init(1, c, 3, init);
  m.pos = Matrix::Zero(c, cfg.side * cfg.side);
  m.gpos = Matrix::Zero(c, cfg.side * cfg.side);
  m.hid.init(cfg.cond_dim, cfg.spatial_hidden, init);
  m.spat.resize(c * cfg.side * cfg.side, cfg.spatial_hidden);
  uniform_fill(m.spat, 1.0 / std::sqrt(static_cast<double>(cfg.spatial_hidden)), init);
  m.gspat = Matrix::Zero(m.spat.rows(), m.spat.cols());
  m.down.resize(static_cast<std::size_t>(cfg.levels));
  m.up.resize(static_cast<std::size_t>(cfg.levels));
  for (auto& r : m.down) r.init(c, c, cfg.cond_dim, init);
  m.mid.init(c, c, cfg.cond_dim, init);
  if (cfg.attention) m.attn.init(c, init);
  for (auto& r : m.up) r.init(2 * c, c, cfg.cond_dim, init);
  m.out_conv.init(c, 1, 3, init);
}

UNet::~UNet() = default;
UNet::UNet(const UNet& o) : cfg_(o.cfg_), impl_(std::make_unique<Impl>(*o.impl_)) {}
UNet& UNet::operator=(const UNet& o) {
  if (this != &o) {
    cfg_ = o.cfg_;
    impl_ = std::make_unique<Impl>(*o.impl_);
  }
  return *this;
}
UNet::UNet(UNet&&) noexcept = default;
UNet& UNet::operator=(UNet&&) noexcept = default;

Matrix UNet::forward(const Matrix& x, const Matrix& cond) {
  const Index s = cfg_.side, B = x.cols();
  if (x.rows() != s * s) throw DimensionError("unet: input is not side*side");
  if (cond.rows() != cfg_.cond_dim || cond.cols() != B) throw DimensionError("unet: conditioning shape");
  auto& m = *impl_;
  Map2 in{1, B, s, s, Eigen::Map<const RMat>(x.data(), 1, s * s * B)};
  Map2 h = m.in_conv.forward(in);
  m.cond = cond;
  m.hid_pre = m.hid.w * cond;
  m.hid_pre.colwise() += m.hid.b;
  m.hid_act = m.hid_pre.unaryExpr([](double v) { return v * sigmoid(v); });
  const Matrix spatial = m.spat * m.hid_act;
  for (Index bi = 0; bi < B; ++bi) {
    h.v.middleCols(bi * s * s, s * s) += m.pos + Eigen::Map<const RMat>(spatial.col(bi).data(), cfg_.channels, s * s);
  }
  std::vector<Map2> skips;
  for (auto& r : m.down) {
    h = r.forward(h, cond);
    skips.push_back(h);
    h = avg_pool(h);
  }
  h = m.mid.forward(h, cond);
  if (cfg_.attention) h = m.attn.forward(h);
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    h = concat(upsample(h), skips[static_cast<std::size_t>(l)]);
    h = m.up[static_cast<std::size_t>(l)].forward(h, cond);
  }
  m.last = h;
  Map2 act = h;
  act.v = silu(h.v);
  const Map2 out = m.out_conv.forward(act);
  return Eigen::Map<const Matrix>(out.v.data(), s * s, B);
}

Matrix UNet::backward(const Matrix& grad_out) {
  auto& m = *impl_;
  const Index s = cfg_.side, B = grad_out.cols();
  const Index c = cfg_.channels;
  if (m.last.b != B || grad_out.rows() != s * s) throw DimensionError("unet: backward without forward");
  Matrix dcond = Matrix::Zero(cfg_.cond_dim, B);
  Map2 dout{1, B, s, s, Eigen::Map<const RMat>(grad_out.data(), 1, s * s * B)};
  Map2 d = m.out_conv.backward(dout);
  d.v = silu_backward(m.last.v, d.v);
  std::vector<Map2> dskips(static_cast<std::size_t>(cfg_.levels));
  for (int l = 0; l < cfg_.levels; ++l) {
    d = m.up[static_cast<std::size_t>(l)].backward(d, dcond);
    Map2 dh{c, d.b, d.h, d.w, d.v.topRows(c)};
    dskips[static_cast<std::size_t>(l)] = {c, d.b, d.h, d.w, d.v.bottomRows(c)};
    d = upsample_backward(dh);
  }
  if (cfg_.attention) d = m.attn.backward(d);
  d = m.mid.backward(d, dcond);
  for (int l = cfg_.levels - 1; l >= 0; --l) {
    d = avg_pool_backward(d);
    d.v += dskips[static_cast<std::size_t>(l)].v;
    d = m.down[static_cast<std::size_t>(l)].backward(d, dcond);
  }
  Matrix dspatial(m.spat.rows(), B);
  for (Index bi = 0; bi < B; ++bi) {
    Eigen::Map<RMat>(dspatial.col(bi).data(), c, s * s) = d.v.middleCols(bi * s * s, s * s);
    m.gpos += d.v.middleCols(bi * s * s, s * s);
  }
  m.gspat.noalias() += dspatial * m.hid_act.transpose();
  const Matrix dact = m.spat.transpose() * dspatial;
  const Matrix dpre = dact.binaryExpr(m.hid_pre, [](double g, double v) {
    const double sg = sigmoid(v);
    return g * sg * (1.0 + v * (1.0 - sg));
  });
  m.hid.gw.noalias() += dpre * m.cond.transpose();
  m.hid.gb += dpre.rowwise().sum();
  dcond.noalias() += m.hid.w.transpose() * dpre;
  m.in_conv.backward(d);
  return dcond;
}

void UNet::zero_grad() { impl_->zero_grad(); }

std::vector<ParamSpan> UNet::parameters(const std::string& prefix) {
  std::vector<ParamSpan> p, g;
  impl_->collect(cfg_, p, g, prefix);
  return p;
}

std::vector<ParamSpan> UNet::gradients(const std::string& prefix) {
  std::vector<ParamSpan> p, g;
  impl_->collect(cfg_, p, g, prefix);
  return g;
}

}  // namespace ocd
