#include "mmx/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>

namespace mmx {

int numel_of(const std::vector<int>& shape) {
  int n = 1;
  for (int d : shape) {
    if (d <= 0) throw Error("non-positive dimension in shape " + shape_str(shape));
    n *= d;
  }
  return n;
}

std::string shape_str(const std::vector<int>& shape) {
  std::string s = "[";
  for (size_t i = 0; i < shape.size(); ++i) {
    if (i) s += ",";
    s += std::to_string(shape[i]);
  }
  return s + "]";
}

Tensor::Tensor(std::vector<int> s) : shape(std::move(s)) {
  data.assign(static_cast<size_t>(numel_of(shape)), 0.0);
}

Tensor Tensor::full(std::vector<int> s, double v) {
  Tensor t(std::move(s));
  std::fill(t.data.begin(), t.data.end(), v);
  return t;
}

Tensor Tensor::scalar(double v) { return full({1}, v); }

Tensor Tensor::row(std::vector<double> v) {
  Tensor t;
  t.shape = {static_cast<int>(v.size())};
  t.data = std::move(v);
  if (t.data.empty()) throw Error("empty row tensor");
  return t;
}

Tensor Tensor::from(std::vector<int> s, std::vector<double> v) {
  if (numel_of(s) != static_cast<int>(v.size()))
    throw Error("data length does not match shape " + shape_str(s));
  Tensor t;
  t.shape = std::move(s);
  t.data = std::move(v);
  return t;
}

bool Tensor::all_finite() const {
  for (double v : data)
    if (!std::isfinite(v)) return false;
  return true;
}

// ---------------------------------------------------------------------------
// tape plumbing

Tape::Node& Tape::node(Var v) { return nodes_[static_cast<size_t>(v.id)]; }
const Tape::Node& Tape::node(Var v) const { return nodes_[static_cast<size_t>(v.id)]; }

void Tape::check_var(Var v, const char* opname) const {
  if (v.id < 0 || v.id >= static_cast<int>(nodes_.size()))
    throw Error(std::string(opname) + ": variable is not on this tape");
}

Tape::Var Tape::push(Node n, const char* opname) {
  if (!n.ext && !n.out.all_finite())
    throw Error(std::string(opname) + ": non-finite value in node " +
                std::to_string(nodes_.size()));
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::leaf(const Tensor* borrowed, Tensor owned, bool needs_grad) {
  Node n;
  n.op = Op::leaf;
  n.ext = borrowed;
  n.out = std::move(owned);
  n.needs_grad = needs_grad;
  return push(std::move(n), "leaf");
}

Tape::Var Tape::input(const Tensor& t) { return leaf(nullptr, t, true); }
Tape::Var Tape::constant(const Tensor& t) { return leaf(nullptr, t, false); }

Tape::Var Tape::borrow_param(const Tensor* t) {
  if (!t) throw Error("borrow_param: null tensor");
  Node n;
  n.op = Op::leaf;
  n.ext = t;
  n.needs_grad = true;
  nodes_.push_back(std::move(n)); // borrowed storage is trusted, no scan
  return Var{static_cast<int>(nodes_.size()) - 1};
}

Tape::Var Tape::borrow_const(const Tensor* t) {
  if (!t) throw Error("borrow_const: null tensor");
  Node n;
  n.op = Op::leaf;
  n.ext = t;
  nodes_.push_back(std::move(n));
  return Var{static_cast<int>(nodes_.size()) - 1};
}

const Tensor& Tape::val(Var v) const {
  check_var(v, "val");
  return value_of(node(v));
}

const Tensor& Tape::grad(Var v) const {
  check_var(v, "grad");
  if (!ran_backward_) throw Error("grad: backward has not run");
  const Node& n = node(v);
  if (n.grad.numel() > 0) return n.grad;
  // unreached node: gradient is identically zero
  const_cast<Tape*>(this)->node(v).grad = Tensor::zeros(value_of(n).shape);
  return node(v).grad;
}

// ---------------------------------------------------------------------------
// forward builders

namespace {
void want_same_shape(const Tensor& a, const Tensor& b, const char* opname) {
  if (!a.same_shape(b))
    throw Error(std::string(opname) + ": shape mismatch " + shape_str(a.shape) +
                " vs " + shape_str(b.shape));
}
}  // namespace

Tape::Var Tape::add(Var a, Var b) {
  check_var(a, "add");
  check_var(b, "add");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  want_same_shape(va, vb, "add");
  Node n;
  n.op = Op::add;
  n.a = a.id;
  n.b = b.id;
  n.out = va;
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] += vb[i];
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n), "add");
}

Tape::Var Tape::sub(Var a, Var b) {
  check_var(a, "sub");
  check_var(b, "sub");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  want_same_shape(va, vb, "sub");
  Node n;
  n.op = Op::sub;
  n.a = a.id;
  n.b = b.id;
  n.out = va;
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] -= vb[i];
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n), "sub");
}

Tape::Var Tape::mul(Var a, Var b) {
  check_var(a, "mul");
  check_var(b, "mul");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  want_same_shape(va, vb, "mul");
  Node n;
  n.op = Op::mul;
  n.a = a.id;
  n.b = b.id;
  n.out = va;
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] *= vb[i];
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n), "mul");
}

Tape::Var Tape::div(Var a, Var b) {
  check_var(a, "div");
  check_var(b, "div");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  want_same_shape(va, vb, "div");
  Node n;
  n.op = Op::div;
  n.a = a.id;
  n.b = b.id;
  n.out = va;
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] /= vb[i];
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n), "div");
}

Tape::Var Tape::affine(Var a, double scale, double shift) {
  check_var(a, "affine");
  Node n;
  n.op = Op::affine;
  n.a = a.id;
  n.p0 = scale;
  n.p1 = shift;
  n.out = val(a);
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] = scale * n.out[i] + shift;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "affine");
}

Tape::Var Tape::relu(Var a) {
  check_var(a, "relu");
  Node n;
  n.op = Op::relu;
  n.a = a.id;
  n.out = val(a);
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] = n.out[i] > 0 ? n.out[i] : 0.0;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "relu");
}

Tape::Var Tape::sigmoid(Var a) {
  check_var(a, "sigmoid");
  Node n;
  n.op = Op::sigmoid;
  n.a = a.id;
  n.out = val(a);
  for (int i = 0; i < n.out.numel(); ++i) {
    double x = n.out[i];
    n.out[i] = x >= 0 ? 1.0 / (1.0 + std::exp(-x))
                      : std::exp(x) / (1.0 + std::exp(x));
  }
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "sigmoid");
}

Tape::Var Tape::exp(Var a) {
  check_var(a, "exp");
  Node n;
  n.op = Op::exp_;
  n.a = a.id;
  n.out = val(a);
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] = std::exp(n.out[i]);
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "exp");
}

Tape::Var Tape::log(Var a) {
  check_var(a, "log");
  Node n;
  n.op = Op::log_;
  n.a = a.id;
  n.out = val(a);
  for (int i = 0; i < n.out.numel(); ++i) n.out[i] = std::log(n.out[i]);
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "log"); // log of a non-positive value fails here
}

Tape::Var Tape::clip_st(Var a, double lo, double hi) {
  check_var(a, "clip_st");
  if (lo > hi) throw Error("clip_st: lo > hi");
  Node n;
  n.op = Op::clip_st;
  n.a = a.id;
  n.p0 = lo;
  n.p1 = hi;
  n.out = val(a);
  for (int i = 0; i < n.out.numel(); ++i)
    n.out[i] = std::min(hi, std::max(lo, n.out[i]));
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "clip_st");
}

Tape::Var Tape::matmul(Var a, Var b) {
  check_var(a, "matmul");
  check_var(b, "matmul");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(1) != vb.dim(0))
    throw Error("matmul: incompatible shapes " + shape_str(va.shape) + " x " +
                shape_str(vb.shape));
  int m = va.dim(0), k = va.dim(1), c = vb.dim(1);
  Node n;
  n.op = Op::matmul;
  n.a = a.id;
  n.b = b.id;
  n.out = Tensor::zeros({m, c});
  const double* A = va.data.data();
  const double* B = vb.data.data();
  double* C = n.out.data.data();
  for (int i = 0; i < m; ++i)
    for (int p = 0; p < k; ++p) {
      double av = A[i * k + p];
      const double* Bp = B + p * c;
      double* Ci = C + i * c;
      for (int j = 0; j < c; ++j) Ci[j] += av * Bp[j];
    }
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n), "matmul");
}

Tape::Var Tape::add_rowvec(Var m, Var r) {
  check_var(m, "add_rowvec");
  check_var(r, "add_rowvec");
  const Tensor& vm = val(m);
  const Tensor& vr = val(r);
  if (vm.ndim() != 2 || vr.ndim() != 1 || vm.dim(1) != vr.dim(0))
    throw Error("add_rowvec: incompatible shapes " + shape_str(vm.shape) +
                " + " + shape_str(vr.shape));
  Node n;
  n.op = Op::add_rowvec;
  n.a = m.id;
  n.b = r.id;
  n.out = vm;
  int rows = vm.dim(0), cols = vm.dim(1);
  for (int i = 0; i < rows; ++i)
    for (int j = 0; j < cols; ++j) n.out[i * cols + j] += vr[j];
  n.needs_grad = node(m).needs_grad || node(r).needs_grad;
  return push(std::move(n), "add_rowvec");
}

Tape::Var Tape::add_chanvec(Var x, Var b) {
  check_var(x, "add_chanvec");
  check_var(b, "add_chanvec");
  const Tensor& vx = val(x);
  const Tensor& vb = val(b);
  if (vx.ndim() != 4 || vb.ndim() != 1 || vx.dim(1) != vb.dim(0))
    throw Error("add_chanvec: incompatible shapes " + shape_str(vx.shape) +
                " + " + shape_str(vb.shape));
  Node n;
  n.op = Op::add_chanvec;
  n.a = x.id;
  n.b = b.id;
  n.out = vx;
  int nb = vx.dim(0), c = vx.dim(1), hw = vx.dim(2) * vx.dim(3);
  for (int i = 0; i < nb; ++i)
    for (int j = 0; j < c; ++j) {
      double bv = vb[j];
      double* p = n.out.data.data() + (i * c + j) * hw;
      for (int q = 0; q < hw; ++q) p[q] += bv;
    }
  n.needs_grad = node(x).needs_grad || node(b).needs_grad;
  return push(std::move(n), "add_chanvec");
}

Tape::Var Tape::conv2d(Var x, Var k, Padding pad) {
  check_var(x, "conv2d");
  check_var(k, "conv2d");
  const Tensor& vx = val(x);
  const Tensor& vk = val(k);
  if (vx.ndim() != 4 || vk.ndim() != 4 || vx.dim(1) != vk.dim(1))
    throw Error("conv2d: incompatible shapes " + shape_str(vx.shape) + " * " +
                shape_str(vk.shape));
  int nb = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  int f = vk.dim(0), kh = vk.dim(2), kw = vk.dim(3);
  int ph = 0, pw = 0, oh = 0, ow = 0;
  if (pad == Padding::same) {
    if (kh % 2 == 0 || kw % 2 == 0)
      throw Error("conv2d: same padding requires odd kernel");
    ph = (kh - 1) / 2;
    pw = (kw - 1) / 2;
    oh = h;
    ow = w;
  } else {
    oh = h - kh + 1;
    ow = w - kw + 1;
    if (oh <= 0 || ow <= 0) throw Error("conv2d: kernel larger than input");
  }
  Node n;
  n.op = Op::conv2d;
  n.a = x.id;
  n.b = k.id;
  n.i0 = pad == Padding::same ? 0 : 1;
  n.out = Tensor::zeros({nb, f, oh, ow});
  const double* X = vx.data.data();
  const double* K = vk.data.data();
  double* O = n.out.data.data();
  for (int bi = 0; bi < nb; ++bi)
    for (int fi = 0; fi < f; ++fi)
      for (int ci = 0; ci < c; ++ci) {
        const double* Xc = X + (bi * c + ci) * h * w;
        const double* Kc = K + (fi * c + ci) * kh * kw;
        double* Oc = O + (bi * f + fi) * oh * ow;
        for (int oy = 0; oy < oh; ++oy)
          for (int ky = 0; ky < kh; ++ky) {
            int iy = oy + ky - ph;
            if (iy < 0 || iy >= h) continue;
            const double* Xr = Xc + iy * w;
            const double* Kr = Kc + ky * kw;
            double* Or = Oc + oy * ow;
            for (int kx = 0; kx < kw; ++kx) {
              double kv = Kr[kx];
              int x0 = std::max(0, pw - kx);
              int x1 = std::min(ow, w + pw - kx);
              for (int ox = x0; ox < x1; ++ox)
                Or[ox] += kv * Xr[ox + kx - pw];
            }
          }
      }
  n.needs_grad = node(x).needs_grad || node(k).needs_grad;
  return push(std::move(n), "conv2d");
}

Tape::Var Tape::maxpool2(Var x) {
  check_var(x, "maxpool2");
  const Tensor& vx = val(x);
  if (vx.ndim() != 4 || vx.dim(2) % 2 || vx.dim(3) % 2)
    throw Error("maxpool2: needs [n,c,h,w] with even h,w, got " +
                shape_str(vx.shape));
  int nb = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  int oh = h / 2, ow = w / 2;
  Node n;
  n.op = Op::maxpool2;
  n.a = x.id;
  n.out = Tensor::zeros({nb, c, oh, ow});
  n.iv.assign(static_cast<size_t>(nb * c * oh * ow), 0);
  const double* X = vx.data.data();
  for (int i = 0; i < nb * c; ++i) {
    const double* Xc = X + i * h * w;
    for (int oy = 0; oy < oh; ++oy)
      for (int ox = 0; ox < ow; ++ox) {
        int base = 2 * oy * w + 2 * ox;
        int cand[4] = {base, base + 1, base + w, base + w + 1};
        int best = cand[0];
        for (int q = 1; q < 4; ++q)
          if (Xc[cand[q]] > Xc[best]) best = cand[q]; // first max wins ties
        int oidx = i * oh * ow + oy * ow + ox;
        n.out[oidx] = Xc[best];
        n.iv[static_cast<size_t>(oidx)] = i * h * w + best;
      }
  }
  n.needs_grad = node(x).needs_grad;
  return push(std::move(n), "maxpool2");
}

Tape::Var Tape::upsample2(Var x) {
  check_var(x, "upsample2");
  const Tensor& vx = val(x);
  if (vx.ndim() != 4)
    throw Error("upsample2: needs [n,c,h,w], got " + shape_str(vx.shape));
  int nb = vx.dim(0), c = vx.dim(1), h = vx.dim(2), w = vx.dim(3);
  Node n;
  n.op = Op::upsample2;
  n.a = x.id;
  n.out = Tensor::zeros({nb, c, 2 * h, 2 * w});
  const double* X = vx.data.data();
  double* O = n.out.data.data();
  for (int i = 0; i < nb * c; ++i)
    for (int y = 0; y < h; ++y)
      for (int xq = 0; xq < w; ++xq) {
        double v = X[i * h * w + y * w + xq];
        double* Ob = O + i * 4 * h * w + 2 * y * 2 * w + 2 * xq;
        Ob[0] = v;
        Ob[1] = v;
        Ob[2 * w] = v;
        Ob[2 * w + 1] = v;
      }
  n.needs_grad = node(x).needs_grad;
  return push(std::move(n), "upsample2");
}

Tape::Var Tape::reshape(Var a, std::vector<int> shape) {
  check_var(a, "reshape");
  const Tensor& va = val(a);
  if (numel_of(shape) != va.numel())
    throw Error("reshape: cannot view " + shape_str(va.shape) + " as " +
                shape_str(shape));
  Node n;
  n.op = Op::reshape;
  n.a = a.id;
  n.out.shape = std::move(shape);
  n.out.data = va.data;
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "reshape");
}

Tape::Var Tape::concat_cols(Var a, Var b) {
  check_var(a, "concat_cols");
  check_var(b, "concat_cols");
  const Tensor& va = val(a);
  const Tensor& vb = val(b);
  if (va.ndim() != 2 || vb.ndim() != 2 || va.dim(0) != vb.dim(0))
    throw Error("concat_cols: incompatible shapes " + shape_str(va.shape) +
                " | " + shape_str(vb.shape));
  int rows = va.dim(0), n1 = va.dim(1), n2 = vb.dim(1);
  Node n;
  n.op = Op::concat_cols;
  n.a = a.id;
  n.b = b.id;
  n.out = Tensor::zeros({rows, n1 + n2});
  for (int i = 0; i < rows; ++i) {
    std::copy(va.data.begin() + i * n1, va.data.begin() + (i + 1) * n1,
              n.out.data.begin() + i * (n1 + n2));
    std::copy(vb.data.begin() + i * n2, vb.data.begin() + (i + 1) * n2,
              n.out.data.begin() + i * (n1 + n2) + n1);
  }
  n.needs_grad = node(a).needs_grad || node(b).needs_grad;
  return push(std::move(n), "concat_cols");
}

Tape::Var Tape::gather_rows(Var a, const std::vector<int>& idx) {
  check_var(a, "gather_rows");
  const Tensor& va = val(a);
  if (va.ndim() != 2)
    throw Error("gather_rows: needs a matrix, got " + shape_str(va.shape));
  int rows = va.dim(0), cols = va.dim(1);
  for (int i : idx)
    if (i < 0 || i >= rows) throw Error("gather_rows: index out of range");
  Node n;
  n.op = Op::gather_rows;
  n.a = a.id;
  n.iv = idx;
  n.out = Tensor::zeros({static_cast<int>(idx.size()), cols});
  for (size_t i = 0; i < idx.size(); ++i)
    std::copy(va.data.begin() + idx[i] * cols,
              va.data.begin() + (idx[i] + 1) * cols,
              n.out.data.begin() + static_cast<int>(i) * cols);
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "gather_rows");
}

Tape::Var Tape::mean(Var a) {
  check_var(a, "mean");
  const Tensor& va = val(a);
  double s = 0;
  for (double v : va.data) s += v;
  Node n;
  n.op = Op::mean;
  n.a = a.id;
  n.out = Tensor::scalar(s / va.numel());
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "mean");
}

Tape::Var Tape::sum(Var a) {
  check_var(a, "sum");
  const Tensor& va = val(a);
  double s = 0;
  for (double v : va.data) s += v;
  Node n;
  n.op = Op::sum;
  n.a = a.id;
  n.out = Tensor::scalar(s);
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "sum");
}

Tape::Var Tape::l1_norm(Var a) {
  check_var(a, "l1_norm");
  const Tensor& va = val(a);
  double s = 0;
  for (double v : va.data) s += std::fabs(v);
  Node n;
  n.op = Op::l1_norm;
  n.a = a.id;
  n.out = Tensor::scalar(s);
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "l1_norm");
}

Tape::Var Tape::l2_norm(Var a) {
  check_var(a, "l2_norm");
  const Tensor& va = val(a);
  double s = 0;
  for (double v : va.data) s += v * v;
  Node n;
  n.op = Op::l2_norm;
  n.a = a.id;
  n.out = Tensor::scalar(std::sqrt(s));
  n.needs_grad = node(a).needs_grad;
  return push(std::move(n), "l2_norm");
}

Tape::Var Tape::logit_margin(Var logits, int label, double kappa, bool targeted) {
  check_var(logits, "logit_margin");
  const Tensor& vz = val(logits);
  int c = vz.numel();
  if (c < 2) throw Error("logit_margin: need at least 2 classes");
  if (label < 0 || label >= c) throw Error("logit_margin: label out of range");
  int other = -1;
  for (int j = 0; j < c; ++j) {
    if (j == label) continue;
    if (other < 0 || vz[j] > vz[other]) other = j;
  }
  Node n;
  n.op = Op::logit_margin;
  n.a = logits.id;
  n.i0 = label;
  n.i1 = other;
  n.p0 = kappa;
  n.p1 = targeted ? 1.0 : 0.0;
  double f = targeted ? vz[other] - vz[label] + kappa
                      : vz[label] - vz[other] + kappa;
  n.out = Tensor::scalar(f);
  n.needs_grad = node(logits).needs_grad;
  return push(std::move(n), "logit_margin");
}

Tape::Var Tape::xent_logits(Var logits, Var onehot) {
  check_var(logits, "xent_logits");
  check_var(onehot, "xent_logits");
  const Tensor& vz = val(logits);
  const Tensor& vy = val(onehot);
  want_same_shape(vz, vy, "xent_logits");
  if (vz.ndim() != 2) throw Error("xent_logits: needs [batch, classes]");
  if (node(onehot).needs_grad)
    throw Error("xent_logits: labels must be constant");
  int b = vz.dim(0), c = vz.dim(1);
  double total = 0;
  for (int i = 0; i < b; ++i) {
    const double* z = vz.data.data() + i * c;
    const double* y = vy.data.data() + i * c;
    double mx = z[0];
    for (int j = 1; j < c; ++j) mx = std::max(mx, z[j]);
    double se = 0, dotv = 0;
    for (int j = 0; j < c; ++j) {
      se += std::exp(z[j] - mx);
      dotv += y[j] * z[j];
    }
    total += mx + std::log(se) - dotv;
  }
  Node n;
  n.op = Op::xent_logits;
  n.a = logits.id;
  n.b = onehot.id;
  n.out = Tensor::scalar(total / b);
  n.needs_grad = node(logits).needs_grad;
  return push(std::move(n), "xent_logits");
}

// ---------------------------------------------------------------------------
// reverse pass

void Tape::backward(Var scalar_out) {
  check_var(scalar_out, "backward");
  const Node& root = node(scalar_out);
  if (value_of(root).numel() != 1)
    throw Error("backward: output is not a scalar, shape " +
                shape_str(value_of(root).shape));

  std::vector<char> reach(nodes_.size(), 0);
  if (root.needs_grad) reach[static_cast<size_t>(scalar_out.id)] = 1;
  for (int id = scalar_out.id; id >= 0; --id) {
    if (!reach[static_cast<size_t>(id)]) continue;
    const Node& n = nodes_[static_cast<size_t>(id)];
    if (n.a >= 0 && nodes_[static_cast<size_t>(n.a)].needs_grad)
      reach[static_cast<size_t>(n.a)] = 1;
    if (n.b >= 0 && nodes_[static_cast<size_t>(n.b)].needs_grad)
      reach[static_cast<size_t>(n.b)] = 1;
  }

  // zeroing up front makes repeated backward calls identical
  for (size_t i = 0; i < nodes_.size(); ++i) {
    Node& n = nodes_[i];
    if (reach[i]) {
      if (n.grad.numel() == 0) n.grad = Tensor::zeros(value_of(n).shape);
      else std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    } else if (n.grad.numel() > 0) {
      std::fill(n.grad.data.begin(), n.grad.data.end(), 0.0);
    }
  }
  ran_backward_ = true;
  if (!root.needs_grad) return;

  node(scalar_out).grad[0] = 1.0;
  for (int id = scalar_out.id; id >= 0; --id) {
    if (!reach[static_cast<size_t>(id)]) continue;
    if (nodes_[static_cast<size_t>(id)].op != Op::leaf) backward_node(id);
  }
  for (size_t i = 0; i < nodes_.size(); ++i) {
    if (reach[i] && !nodes_[i].grad.all_finite())
      throw Error("backward: non-finite gradient at node " + std::to_string(i));
  }
}

void Tape::backward_node(int id) {
  Node& n = nodes_[static_cast<size_t>(id)];
  const double* g = n.grad.data.data();
  Node* na = n.a >= 0 ? &nodes_[static_cast<size_t>(n.a)] : nullptr;
  Node* nb = n.b >= 0 ? &nodes_[static_cast<size_t>(n.b)] : nullptr;
  bool wa = na && na->needs_grad && na->grad.numel() > 0;
  bool wb = nb && nb->needs_grad && nb->grad.numel() > 0;
  double* ga = wa ? na->grad.data.data() : nullptr;
  double* gb = wb ? nb->grad.data.data() : nullptr;
  const Tensor& va = na ? value_of(*na) : n.out;
  const Tensor& vb = nb ? value_of(*nb) : n.out;
  int ne = n.out.numel();

  switch (n.op) {
    case Op::leaf:
      break;
    case Op::add:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i];
      if (wb) for (int i = 0; i < ne; ++i) gb[i] += g[i];
      break;
    case Op::sub:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i];
      if (wb) for (int i = 0; i < ne; ++i) gb[i] -= g[i];
      break;
    case Op::mul:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i] * vb[i];
      if (wb) for (int i = 0; i < ne; ++i) gb[i] += g[i] * va[i];
      break;
    case Op::div:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i] / vb[i];
      if (wb) for (int i = 0; i < ne; ++i) gb[i] -= g[i] * n.out[i] / vb[i];
      break;
    case Op::affine:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += n.p0 * g[i];
      break;
    case Op::relu:
      if (wa) // subgradient at 0 is 0
        for (int i = 0; i < ne; ++i) ga[i] += va[i] > 0 ? g[i] : 0.0;
      break;
    case Op::sigmoid:
      if (wa)
        for (int i = 0; i < ne; ++i) ga[i] += g[i] * n.out[i] * (1.0 - n.out[i]);
      break;
    case Op::exp_:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i] * n.out[i];
      break;
    case Op::log_:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i] / va[i];
      break;
    case Op::clip_st:
      if (wa) // straight-through: identity backward
        for (int i = 0; i < ne; ++i) ga[i] += g[i];
      break;
    case Op::matmul: {
      int m = va.dim(0), k = va.dim(1), c = vb.dim(1);
      const double* A = va.data.data();
      const double* B = vb.data.data();
      if (wa)
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double s = 0;
            const double* Gi = g + i * c;
            const double* Bp = B + p * c;
            for (int j = 0; j < c; ++j) s += Gi[j] * Bp[j];
            ga[i * k + p] += s;
          }
      if (wb)
        for (int i = 0; i < m; ++i)
          for (int p = 0; p < k; ++p) {
            double av = A[i * k + p];
            const double* Gi = g + i * c;
            double* Gb = gb + p * c;
            for (int j = 0; j < c; ++j) Gb[j] += av * Gi[j];
          }
      break;
    }
    case Op::add_rowvec: {
      int rows = va.dim(0), cols = va.dim(1);
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i];
      if (wb)
        for (int i = 0; i < rows; ++i)
          for (int j = 0; j < cols; ++j) gb[j] += g[i * cols + j];
      break;
    }
    case Op::add_chanvec: {
      int nbatch = va.dim(0), c = va.dim(1), hw = va.dim(2) * va.dim(3);
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i];
      if (wb)
        for (int i = 0; i < nbatch; ++i)
          for (int j = 0; j < c; ++j) {
            const double* p = g + (i * c + j) * hw;
            double s = 0;
            for (int q = 0; q < hw; ++q) s += p[q];
            gb[j] += s;
          }
      break;
    }
    case Op::conv2d: {
      int nbatch = va.dim(0), c = va.dim(1), h = va.dim(2), w = va.dim(3);
      int f = vb.dim(0), kh = vb.dim(2), kw = vb.dim(3);
      int ph = n.i0 == 0 ? (kh - 1) / 2 : 0;
      int pw = n.i0 == 0 ? (kw - 1) / 2 : 0;
      int oh = n.out.dim(2), ow = n.out.dim(3);
      const double* X = va.data.data();
      const double* K = vb.data.data();
      for (int bi = 0; bi < nbatch; ++bi)
        for (int fi = 0; fi < f; ++fi)
          for (int ci = 0; ci < c; ++ci) {
            const double* Gc = g + (bi * f + fi) * oh * ow;
            const double* Xc = X + (bi * c + ci) * h * w;
            const double* Kc = K + (fi * c + ci) * kh * kw;
            double* GXc = wa ? ga + (bi * c + ci) * h * w : nullptr;
            double* GKc = wb ? gb + (fi * c + ci) * kh * kw : nullptr;
            for (int oy = 0; oy < oh; ++oy)
              for (int ky = 0; ky < kh; ++ky) {
                int iy = oy + ky - ph;
                if (iy < 0 || iy >= h) continue;
                const double* Gr = Gc + oy * ow;
                for (int kx = 0; kx < kw; ++kx) {
                  int x0 = std::max(0, pw - kx);
                  int x1 = std::min(ow, w + pw - kx);
                  if (wa) {
                    double kv = Kc[ky * kw + kx];
                    double* GXr = GXc + iy * w + kx - pw;
                    for (int ox = x0; ox < x1; ++ox) GXr[ox] += kv * Gr[ox];
                  }
                  if (wb) {
                    const double* Xr = Xc + iy * w + kx - pw;
                    double s = 0;
                    for (int ox = x0; ox < x1; ++ox) s += Xr[ox] * Gr[ox];
                    GKc[ky * kw + kx] += s;
                  }
                }
              }
          }
      break;
    }
    case Op::maxpool2:
      if (wa)
        for (int i = 0; i < ne; ++i) ga[n.iv[static_cast<size_t>(i)]] += g[i];
      break;
    case Op::upsample2: {
      int nbc = va.dim(0) * va.dim(1), h = va.dim(2), w = va.dim(3);
      if (wa)
        for (int i = 0; i < nbc; ++i)
          for (int y = 0; y < h; ++y)
            for (int xq = 0; xq < w; ++xq) {
              const double* Gb2 = g + i * 4 * h * w + 2 * y * 2 * w + 2 * xq;
              ga[i * h * w + y * w + xq] +=
                  Gb2[0] + Gb2[1] + Gb2[2 * w] + Gb2[2 * w + 1];
            }
      break;
    }
    case Op::reshape:
      if (wa) for (int i = 0; i < ne; ++i) ga[i] += g[i];
      break;
    case Op::concat_cols: {
      int rows = va.dim(0), n1 = va.dim(1), n2 = vb.dim(1);
      for (int i = 0; i < rows; ++i) {
        const double* Gr = g + i * (n1 + n2);
        if (wa)
          for (int j = 0; j < n1; ++j) ga[i * n1 + j] += Gr[j];
        if (wb)
          for (int j = 0; j < n2; ++j) gb[i * n2 + j] += Gr[n1 + j];
      }
      break;
    }
    case Op::gather_rows: {
      int cols = va.dim(1);
      if (wa)
        for (size_t i = 0; i < n.iv.size(); ++i)
          for (int j = 0; j < cols; ++j)
            ga[n.iv[i] * cols + j] += g[static_cast<int>(i) * cols + j];
      break;
    }
    case Op::mean:
      if (wa) {
        double gv = g[0] / va.numel();
        for (int i = 0; i < va.numel(); ++i) ga[i] += gv;
      }
      break;
    case Op::sum:
      if (wa)
        for (int i = 0; i < va.numel(); ++i) ga[i] += g[0];
      break;
    case Op::l1_norm:
      if (wa)
        for (int i = 0; i < va.numel(); ++i)
          ga[i] += va[i] > 0 ? g[0] : (va[i] < 0 ? -g[0] : 0.0);
      break;
    case Op::l2_norm:
      if (wa && n.out[0] > 0) {
        double gv = g[0] / n.out[0];
        for (int i = 0; i < va.numel(); ++i) ga[i] += gv * va[i];
      }
      break;
    case Op::logit_margin:
      if (wa) {
        if (n.p1 != 0.0) { // targeted
          ga[n.i1] += g[0];
          ga[n.i0] -= g[0];
        } else {
          ga[n.i0] += g[0];
          ga[n.i1] -= g[0];
        }
      }
      break;
    case Op::xent_logits:
      if (wa) {
        int b = va.dim(0), c = va.dim(1);
        for (int i = 0; i < b; ++i) {
          const double* z = va.data.data() + i * c;
          const double* y = vb.data.data() + i * c;
          double mx = z[0];
          for (int j = 1; j < c; ++j) mx = std::max(mx, z[j]);
          double se = 0;
          for (int j = 0; j < c; ++j) se += std::exp(z[j] - mx);
          for (int j = 0; j < c; ++j)
            ga[i * c + j] += g[0] * (std::exp(z[j] - mx) / se - y[j]) / b;
        }
      }
      break;
  }
}

}  // namespace mmx
