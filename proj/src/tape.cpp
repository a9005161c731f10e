#include "xecg/tape.hpp"

#include <Eigen/Dense>
#include <algorithm>
#include <cmath>
#include <numeric>

namespace xecg {

using RowMat = Eigen::Matrix<double, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
using MapMat = Eigen::Map<RowMat>;
using CMapMat = Eigen::Map<const RowMat>;

const Tensor& Var::value() const { return tape_->value(id_); }
bool Var::requires_grad() const { return tape_->needs_grad(id_); }

Var Tape::leaf(Tensor value, bool requires_grad) {
  nodes_.push_back(Node{std::move(value), {}, requires_grad, {}});
  return Var(this, nodes_.size() - 1);
}

Var Tape::record(Tensor value, std::initializer_list<Var> inputs, BackwardFn fn) {
  return record(std::move(value), std::span<const Var>(inputs.begin(), inputs.size()), std::move(fn));
}

Var Tape::record(Tensor value, std::span<const Var> inputs, BackwardFn fn) {
  bool rg = false;
  for (const auto& v : inputs) {
    if (v.tape() != this) throw ContractError("op inputs recorded on a different tape");
    rg = rg || nodes_[v.id()].requires_grad;
  }
  nodes_.push_back(Node{std::move(value), {}, rg, rg ? std::move(fn) : BackwardFn{}});
  return Var(this, nodes_.size() - 1);
}

double* Tape::grad_slot(std::size_t id) {
  auto& n = nodes_[id];
  if (n.grad.empty()) n.grad.assign(n.value.size(), 0.0);
  return n.grad.data();
}

void Tape::backward(Var output) {
  if (output.value().size() != 1) throw ContractError("backward() requires a scalar output, got " +
                                                      shape_str(output.shape()));
  Tensor seed({1}, {1.0});
  backward(std::span<const Var>(&output, 1), std::span<const Tensor>(&seed, 1));
}

void Tape::backward(std::span<const Var> outputs, std::span<const Tensor> seeds) {
  if (outputs.size() != seeds.size()) throw ContractError("backward: outputs/seeds count mismatch");
  for (std::size_t k = 0; k < outputs.size(); ++k) {
    const auto& v = outputs[k];
    if (v.tape() != this) throw ContractError("backward: output from another tape");
    if (seeds[k].size() != v.value().size()) throw ShapeError("backward: seed shape mismatch");
    if (!nodes_[v.id()].requires_grad) continue;
    double* g = grad_slot(v.id());
    for (std::size_t i = 0; i < seeds[k].size(); ++i) g[i] += seeds[k][i];
  }
  run_backward();
}

void Tape::run_backward() {
  for (std::size_t id = nodes_.size(); id-- > 0;) {
    auto& n = nodes_[id];
    if (!n.requires_grad || n.grad.empty() || !n.backward) continue;
    n.backward(*this, id);
  }
}

Tensor Tape::grad(Var v) const {
  const auto& n = nodes_[v.id()];
  if (n.grad.empty()) return Tensor(n.value.shape(), 0.0);
  return Tensor(n.value.shape(), std::span<const double>(n.grad.data(), n.grad.size()));
}

namespace ops {
namespace {

// Broadcast layout for binary elementwise ops: the output has `big`'s shape,
// the other operand repeats with period `small_n`.
struct Bcast {
  Shape out;
  bool a_small = false;
  bool b_small = false;
  std::size_t a_n = 0, b_n = 0;
};

bool is_suffix(const Shape& small, const Shape& big) {
  if (small.size() > big.size()) return false;
  return std::equal(small.rbegin(), small.rend(), big.rbegin());
}

Bcast broadcast(const Shape& a, const Shape& b, const char* op) {
  Bcast r;
  r.a_n = numel(a);
  r.b_n = numel(b);
  if (a == b) {
    r.out = a;
  } else if (r.b_n == 1 || (is_suffix(b, a) && r.a_n >= r.b_n)) {
    r.out = a;
    r.b_small = true;
  } else if (r.a_n == 1 || is_suffix(a, b)) {
    r.out = b;
    r.a_small = true;
  } else {
    throw ShapeError(std::string(op) + ": incompatible shapes " + shape_str(a) + " and " + shape_str(b));
  }
  return r;
}

// Visits every output element as f(i, index into a, index into b) without
// per-element modulo: the small operand repeats in contiguous blocks.
template <typename F>
void for_each_bcast(const Bcast& bc, std::size_t n, F&& f) {
  if (!bc.a_small && !bc.b_small) {
    for (std::size_t i = 0; i < n; ++i) f(i, i, i);
  } else if (bc.b_small) {
    for (std::size_t r = 0, i = 0; r < n / bc.b_n; ++r)
      for (std::size_t j = 0; j < bc.b_n; ++j, ++i) f(i, i, j);
  } else {
    for (std::size_t r = 0, i = 0; r < n / bc.a_n; ++r)
      for (std::size_t j = 0; j < bc.a_n; ++j, ++i) f(i, j, i);
  }
}

template <typename Fwd, typename DA, typename DB>
Var binary(Var a, Var b, const char* name, Fwd fwd, DA da, DB db) {
  Tape& t = *a.tape();
  const auto bc = broadcast(a.shape(), b.shape(), name);
  Tensor out(bc.out);
  const double* x = a.value().data();
  const double* y = b.value().data();
  double* o = out.data();
  for_each_bcast(bc, out.size(), [&](std::size_t i, std::size_t ia, std::size_t ib) { o[i] = fwd(x[ia], y[ib]); });
  return t.record(std::move(out), {a, b}, [a, b, bc, da, db](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    const double* x = tp.value(a.id()).data();
    const double* y = tp.value(b.id()).data();
    const double* o = tp.value(self).data();
    const std::size_t n = numel(bc.out);
    if (tp.needs_grad(a.id())) {
      double* ga = tp.grad_slot(a.id());
      for_each_bcast(bc, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        ga[ia] += g[i] * da(x[ia], y[ib], o[i]);
      });
    }
    if (tp.needs_grad(b.id())) {
      double* gb = tp.grad_slot(b.id());
      for_each_bcast(bc, n, [&](std::size_t i, std::size_t ia, std::size_t ib) {
        gb[ib] += g[i] * db(x[ia], y[ib], o[i]);
      });
    }
  });
}

// Elementwise unary op; `d(x, y)` is the local derivative given input x and output y.
template <typename Fwd, typename D>
Var unary(Var a, Fwd fwd, D d) {
  Tape& t = *a.tape();
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = fwd(x[i]);
  return t.record(std::move(out), {a}, [a, d](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    const double* x = tp.value(a.id()).data();
    const double* y = tp.value(self).data();
    double* ga = tp.grad_slot(a.id());
    const std::size_t n = tp.value(self).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g[i] * d(x[i], y[i]);
  });
}

// Split a shape around `axis` into (outer, n, inner) extents.
struct AxisSplit {
  std::size_t outer = 1, n = 1, inner = 1;
};

AxisSplit split_axis(const Shape& s, std::size_t axis) {
  if (axis >= s.size()) throw ShapeError("axis " + std::to_string(axis) + " out of range for " + shape_str(s));
  AxisSplit r;
  for (std::size_t i = 0; i < axis; ++i) r.outer *= s[i];
  r.n = s[axis];
  for (std::size_t i = axis + 1; i < s.size(); ++i) r.inner *= s[i];
  return r;
}

Shape drop_axis(const Shape& s, std::size_t axis) {
  Shape r;
  for (std::size_t i = 0; i < s.size(); ++i)
    if (i != axis) r.push_back(s[i]);
  if (r.empty()) r.push_back(1);
  return r;
}

}  // namespace

Var add(Var a, Var b) {
  return binary(
      a, b, "add", [](double x, double y) { return x + y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return 1.0; });
}

Var sub(Var a, Var b) {
  return binary(
      a, b, "sub", [](double x, double y) { return x - y; }, [](double, double, double) { return 1.0; },
      [](double, double, double) { return -1.0; });
}

Var mul(Var a, Var b) {
  return binary(
      a, b, "mul", [](double x, double y) { return x * y; }, [](double, double y, double) { return y; },
      [](double x, double, double) { return x; });
}

Var div(Var a, Var b) {
  for (double v : b.value().values())
    if (v == 0.0) throw DomainError("div: zero divisor");
  return binary(
      a, b, "div", [](double x, double y) { return x / y; }, [](double, double y, double) { return 1.0 / y; },
      [](double, double y, double o) { return -o / y; });
}

Var scale(Var a, double s) {
  return unary(
      a, [s](double x) { return s * x; }, [s](double, double) { return s; });
}

Var add_scalar(Var a, double s) {
  return unary(
      a, [s](double x) { return x + s; }, [](double, double) { return 1.0; });
}

Var neg(Var a) { return scale(a, -1.0); }

Var scale_rows(Var x, Var s) {
  const std::size_t n = s.value().size(), total = x.value().size();
  if (n == 0 || total % n != 0)
    throw ShapeError("scale_rows: " + shape_str(s.shape()) + " does not index rows of " + shape_str(x.shape()));
  const std::size_t w = total / n;
  Tensor out(x.shape());
  const double* xv = x.value().data();
  const double* sv = s.value().data();
  for (std::size_t r = 0; r < n; ++r)
    for (std::size_t j = 0; j < w; ++j) out[r * w + j] = xv[r * w + j] * sv[r];
  return x.tape()->record(std::move(out), {x, s}, [x, s, n, w](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    const double* xv = tp.value(x.id()).data();
    const double* sv = tp.value(s.id()).data();
    if (tp.needs_grad(x.id())) {
      double* gx = tp.grad_slot(x.id());
      for (std::size_t r = 0; r < n; ++r)
        for (std::size_t j = 0; j < w; ++j) gx[r * w + j] += g[r * w + j] * sv[r];
    }
    if (tp.needs_grad(s.id())) {
      double* gs = tp.grad_slot(s.id());
      for (std::size_t r = 0; r < n; ++r) {
        double acc = 0.0;
        for (std::size_t j = 0; j < w; ++j) acc += g[r * w + j] * xv[r * w + j];
        gs[r] += acc;
      }
    }
  });
}

Var square(Var a) {
  return unary(
      a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var exp(Var a) {
  return unary(
      a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var log(Var a) {
  for (double v : a.value().values())
    if (!(v > 0.0)) throw DomainError("log: non-positive operand");
  return unary(
      a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var tanh(Var a) {
  return unary(
      a, [](double x) { return std::tanh(x); }, [](double, double y) { return 1.0 - y * y; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        if (x >= 0) return 1.0 / (1.0 + std::exp(-x));
        const double e = std::exp(x);
        return e / (1.0 + e);
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var abs(Var a) {
  return unary(
      a, [](double x) { return std::abs(x); },
      [](double x, double) { return x > 0 ? 1.0 : (x < 0 ? -1.0 : 0.0); });
}

Var maximum(Var a, Var b) {
  if (a.shape() != b.shape())
    throw ShapeError("maximum: shapes differ " + shape_str(a.shape()) + " vs " + shape_str(b.shape()));
  return binary(
      a, b, "maximum", [](double x, double y) { return x >= y ? x : y; },
      [](double x, double y, double) { return x >= y ? 1.0 : 0.0; },
      [](double x, double y, double) { return x >= y ? 0.0 : 1.0; });
}

Var maximum(Var a, double floor) {
  return unary(
      a, [floor](double x) { return x >= floor ? x : floor; },
      [floor](double x, double) { return x >= floor ? 1.0 : 0.0; });
}

Var matmul(Var a, Var b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() < 2 || sb.size() != 2 || sa.back() != sb[0])
    throw ShapeError("matmul: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  const std::size_t k = sa.back(), n = sb[1], m = numel(sa) / k;
  Shape so = sa;
  so.back() = n;
  Tensor out(so);
  MapMat(out.data(), m, n).noalias() = CMapMat(a.value().data(), m, k) * CMapMat(b.value().data(), k, n);
  return a.tape()->record(std::move(out), {a, b}, [a, b, m, k, n](Tape& tp, std::size_t self) {
    CMapMat g(tp.grad_buffer(self).data(), m, n);
    if (tp.needs_grad(a.id()))
      MapMat(tp.grad_slot(a.id()), m, k).noalias() += g * CMapMat(tp.value(b.id()).data(), k, n).transpose();
    if (tp.needs_grad(b.id()))
      MapMat(tp.grad_slot(b.id()), k, n).noalias() += CMapMat(tp.value(a.id()).data(), m, k).transpose() * g;
  });
}

Var bmm(Var a, Var b) {
  const auto& sa = a.shape();
  const auto& sb = b.shape();
  if (sa.size() != 3 || sb.size() != 3 || sa[0] != sb[0] || sa[2] != sb[1])
    throw ShapeError("bmm: cannot multiply " + shape_str(sa) + " by " + shape_str(sb));
  const std::size_t bt = sa[0], m = sa[1], k = sa[2], n = sb[2];
  Tensor out({bt, m, n});
  for (std::size_t i = 0; i < bt; ++i)
    MapMat(out.data() + i * m * n, m, n).noalias() =
        CMapMat(a.value().data() + i * m * k, m, k) * CMapMat(b.value().data() + i * k * n, k, n);
  return a.tape()->record(std::move(out), {a, b}, [a, b, bt, m, k, n](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    const bool ga = tp.needs_grad(a.id()), gb = tp.needs_grad(b.id());
    double* da = ga ? tp.grad_slot(a.id()) : nullptr;
    double* db = gb ? tp.grad_slot(b.id()) : nullptr;
    for (std::size_t i = 0; i < bt; ++i) {
      CMapMat gi(g + i * m * n, m, n);
      if (ga) MapMat(da + i * m * k, m, k).noalias() += gi * CMapMat(tp.value(b.id()).data() + i * k * n, k, n).transpose();
      if (gb) MapMat(db + i * k * n, k, n).noalias() += CMapMat(tp.value(a.id()).data() + i * m * k, m, k).transpose() * gi;
    }
  });
}

Var permute(Var a, const std::vector<std::size_t>& perm) {
  const auto& s = a.shape();
  const std::size_t r = s.size();
  if (perm.size() != r) throw ShapeError("permute: rank mismatch");
  std::vector<bool> seen(r, false);
  for (auto p : perm) {
    if (p >= r || seen[p]) throw ShapeError("permute: invalid permutation");
    seen[p] = true;
  }
  Shape so(r);
  for (std::size_t i = 0; i < r; ++i) so[i] = s[perm[i]];
  // Strides of the input, read in output-axis order.
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  std::vector<std::size_t> src_stride(r);
  for (std::size_t i = 0; i < r; ++i) src_stride[i] = in_stride[perm[i]];
  // Output position -> input position map, shared by forward and backward.
  std::vector<std::size_t> src(numel(so));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i) off += idx[i] * src_stride[i];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < so[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(so);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = x[src[o]];
  return a.tape()->record(std::move(out), {a}, [a, src = std::move(src)](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += g[o];
  });
}

Var transpose(Var a) {
  const std::size_t r = a.shape().size();
  if (r < 2) throw ShapeError("transpose: rank < 2");
  std::vector<std::size_t> perm(r);
  std::iota(perm.begin(), perm.end(), 0);
  std::swap(perm[r - 1], perm[r - 2]);
  return permute(a, perm);
}

Var reshape(Var a, Shape shape) {
  Tensor out = a.value().reshaped(std::move(shape));
  return a.tape()->record(std::move(out), {a}, [a](Tape& tp, std::size_t self) {
    const auto& g = tp.grad_buffer(self);
    double* ga = tp.grad_slot(a.id());
    for (std::size_t i = 0; i < g.size(); ++i) ga[i] += g[i];
  });
}

Var expand(Var a, Shape shape) {
  const auto& s = a.shape();
  if (s.size() != shape.size()) throw ShapeError("expand: rank mismatch");
  for (std::size_t i = 0; i < s.size(); ++i)
    if (s[i] != shape[i] && s[i] != 1)
      throw ShapeError("expand: cannot expand " + shape_str(s) + " to " + shape_str(shape));
  const std::size_t r = s.size();
  std::vector<std::size_t> in_stride(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_stride[i] = in_stride[i + 1] * s[i + 1];
  std::vector<std::size_t> src(numel(shape));
  std::vector<std::size_t> idx(r, 0);
  for (std::size_t o = 0; o < src.size(); ++o) {
    std::size_t off = 0;
    for (std::size_t i = 0; i < r; ++i)
      if (s[i] != 1) off += idx[i] * in_stride[i];
    src[o] = off;
    for (std::size_t i = r; i-- > 0;) {
      if (++idx[i] < shape[i]) break;
      idx[i] = 0;
    }
  }
  Tensor out(shape);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < src.size(); ++o) out[o] = x[src[o]];
  return a.tape()->record(std::move(out), {a}, [a, src = std::move(src)](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < src.size(); ++o) ga[src[o]] += g[o];
  });
}

Var sum(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Tensor out(drop_axis(a.shape(), axis));
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      for (std::size_t i = 0; i < sp.inner; ++i) out[o * sp.inner + i] += x[(o * sp.n + j) * sp.inner + i];
  return a.tape()->record(std::move(out), {a}, [a, sp](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i) ga[(o * sp.n + j) * sp.inner + i] += g[o * sp.inner + i];
  });
}

Var mean(Var a, std::size_t axis) {
  const double n = static_cast<double>(a.shape().at(axis));
  return scale(sum(a, axis), 1.0 / n);
}

Var sum_all(Var a) {
  double s = 0.0;
  for (double v : a.value().values()) s += v;
  return a.tape()->record(Tensor::scalar(s), {a}, [a](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    double* ga = tp.grad_slot(a.id());
    const std::size_t n = tp.value(a.id()).size();
    for (std::size_t i = 0; i < n; ++i) ga[i] += g;
  });
}

Var mean_all(Var a) { return scale(sum_all(a), 1.0 / static_cast<double>(a.value().size())); }

Var max(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Tensor out(drop_axis(a.shape(), axis));
  std::vector<std::size_t> arg(out.size(), 0);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      std::size_t best = 0;
      double bv = x[o * sp.n * sp.inner + i];
      for (std::size_t j = 1; j < sp.n; ++j) {
        const double v = x[(o * sp.n + j) * sp.inner + i];
        if (v > bv) {
          bv = v;
          best = j;
        }
      }
      out[o * sp.inner + i] = bv;
      arg[o * sp.inner + i] = (o * sp.n + best) * sp.inner + i;
    }
  return a.tape()->record(std::move(out), {a}, [a, arg = std::move(arg)](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t k = 0; k < arg.size(); ++k) ga[arg[k]] += g[k];
  });
}

Var softmax(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
      double m = x[at(0)];
      for (std::size_t j = 1; j < sp.n; ++j) m = std::max(m, x[at(j)]);
      double z = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) z += (out[at(j)] = std::exp(x[at(j)] - m));
      for (std::size_t j = 0; j < sp.n; ++j) out[at(j)] /= z;
    }
  return a.tape()->record(std::move(out), {a}, [a, sp](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    const double* y = tp.value(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[at(j)] * y[at(j)];
        for (std::size_t j = 0; j < sp.n; ++j) ga[at(j)] += y[at(j)] * (g[at(j)] - dot);
      }
  });
}

Var l2_normalize(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Tensor out(a.shape());
  std::vector<double> norms(sp.outer * sp.inner);
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t i = 0; i < sp.inner; ++i) {
      auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
      double ss = 0.0;
      for (std::size_t j = 0; j < sp.n; ++j) ss += x[at(j)] * x[at(j)];
      const double nrm = std::sqrt(ss);
      if (nrm == 0.0) throw DomainError("l2_normalize: zero-norm vector");
      norms[o * sp.inner + i] = nrm;
      for (std::size_t j = 0; j < sp.n; ++j) out[at(j)] = x[at(j)] / nrm;
    }
  return a.tape()->record(std::move(out), {a}, [a, sp, norms = std::move(norms)](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    const double* y = tp.value(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < sp.inner; ++i) {
        auto at = [&](std::size_t j) { return (o * sp.n + j) * sp.inner + i; };
        double dot = 0.0;
        for (std::size_t j = 0; j < sp.n; ++j) dot += g[at(j)] * y[at(j)];
        const double nrm = norms[o * sp.inner + i];
        for (std::size_t j = 0; j < sp.n; ++j) ga[at(j)] += (g[at(j)] - y[at(j)] * dot) / nrm;
      }
  });
}

Var concat(std::span<const Var> parts, std::size_t axis) {
  if (parts.empty()) throw ShapeError("concat: no inputs");
  const Shape& s0 = parts[0].shape();
  if (axis >= s0.size()) throw ShapeError("concat: axis out of range");
  Shape so = s0;
  so[axis] = 0;
  std::vector<std::size_t> widths;
  for (const auto& p : parts) {
    const auto& s = p.shape();
    if (s.size() != s0.size()) throw ShapeError("concat: rank mismatch");
    for (std::size_t i = 0; i < s.size(); ++i)
      if (i != axis && s[i] != s0[i]) throw ShapeError("concat: shape mismatch off the concat axis");
    so[axis] += s[axis];
    widths.push_back(s[axis]);
  }
  const auto sp = split_axis(so, axis);
  Tensor out(so);
  std::size_t off = 0;
  for (std::size_t k = 0; k < parts.size(); ++k) {
    const double* x = parts[k].value().data();
    const std::size_t w = widths[k] * sp.inner;
    for (std::size_t o = 0; o < sp.outer; ++o)
      std::copy(x + o * w, x + (o + 1) * w, out.data() + o * sp.n * sp.inner + off);
    off += w;
  }
  std::vector<Var> ins(parts.begin(), parts.end());
  return parts[0].tape()->record(std::move(out), parts, [ins, widths, sp](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    std::size_t off = 0;
    for (std::size_t k = 0; k < ins.size(); ++k) {
      const std::size_t w = widths[k] * sp.inner;
      if (tp.needs_grad(ins[k].id())) {
        double* gk = tp.grad_slot(ins[k].id());
        for (std::size_t o = 0; o < sp.outer; ++o)
          for (std::size_t i = 0; i < w; ++i) gk[o * w + i] += g[o * sp.n * sp.inner + off + i];
      }
      off += w;
    }
  });
}

Var slice(Var a, std::size_t axis, std::size_t start, std::size_t length) {
  const auto sp = split_axis(a.shape(), axis);
  if (length == 0 || start + length > sp.n)
    throw ShapeError("slice: [" + std::to_string(start) + ", +" + std::to_string(length) + ") out of range for " +
                     shape_str(a.shape()));
  Shape so = a.shape();
  so[axis] = length;
  Tensor out(so);
  const double* x = a.value().data();
  const std::size_t w = length * sp.inner;
  for (std::size_t o = 0; o < sp.outer; ++o)
    std::copy(x + (o * sp.n + start) * sp.inner, x + (o * sp.n + start) * sp.inner + w, out.data() + o * w);
  return a.tape()->record(std::move(out), {a}, [a, sp, start, w](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t i = 0; i < w; ++i) ga[(o * sp.n + start) * sp.inner + i] += g[o * w + i];
  });
}

Var reverse(Var a, std::size_t axis) {
  const auto sp = split_axis(a.shape(), axis);
  Tensor out(a.shape());
  const double* x = a.value().data();
  for (std::size_t o = 0; o < sp.outer; ++o)
    for (std::size_t j = 0; j < sp.n; ++j)
      std::copy(x + (o * sp.n + j) * sp.inner, x + (o * sp.n + j + 1) * sp.inner,
                out.data() + (o * sp.n + (sp.n - 1 - j)) * sp.inner);
  return a.tape()->record(std::move(out), {a}, [a, sp](Tape& tp, std::size_t self) {
    const double* g = tp.grad_buffer(self).data();
    double* ga = tp.grad_slot(a.id());
    for (std::size_t o = 0; o < sp.outer; ++o)
      for (std::size_t j = 0; j < sp.n; ++j)
        for (std::size_t i = 0; i < sp.inner; ++i)
          ga[(o * sp.n + j) * sp.inner + i] += g[(o * sp.n + (sp.n - 1 - j)) * sp.inner + i];
  });
}

Var layer_norm(Var x, Var gain, Var bias, double eps) {
  const auto& s = x.shape();
  const std::size_t d = s.back();
  if (gain.value().size() != d || bias.value().size() != d) throw ShapeError("layer_norm: gain/bias size mismatch");
  const std::size_t rows = x.value().size() / d;
  Tensor out(s);
  std::vector<double> xhat(x.value().size()), rstd(rows);
  const double* xv = x.value().data();
  const double* gv = gain.value().data();
  const double* bv = bias.value().data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* row = xv + r * d;
    double mu = 0.0;
    for (std::size_t j = 0; j < d; ++j) mu += row[j];
    mu /= static_cast<double>(d);
    double var = 0.0;
    for (std::size_t j = 0; j < d; ++j) var += (row[j] - mu) * (row[j] - mu);
    var /= static_cast<double>(d);
    const double rs = 1.0 / std::sqrt(var + eps);
    rstd[r] = rs;
    for (std::size_t j = 0; j < d; ++j) {
      xhat[r * d + j] = (row[j] - mu) * rs;
      out[r * d + j] = xhat[r * d + j] * gv[j] + bv[j];
    }
  }
  return x.tape()->record(
      std::move(out), {x, gain, bias},
      [x, gain, bias, d, rows, xhat = std::move(xhat), rstd = std::move(rstd)](Tape& tp, std::size_t self) {
        const double* g = tp.grad_buffer(self).data();
        const double* gv = tp.value(gain.id()).data();
        if (tp.needs_grad(gain.id())) {
          double* gg = tp.grad_slot(gain.id());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gg[j] += g[r * d + j] * xhat[r * d + j];
        }
        if (tp.needs_grad(bias.id())) {
          double* gb = tp.grad_slot(bias.id());
          for (std::size_t r = 0; r < rows; ++r)
            for (std::size_t j = 0; j < d; ++j) gb[j] += g[r * d + j];
        }
        if (tp.needs_grad(x.id())) {
          double* gx = tp.grad_slot(x.id());
          const double inv_d = 1.0 / static_cast<double>(d);
          for (std::size_t r = 0; r < rows; ++r) {
            double s1 = 0.0, s2 = 0.0;
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              s1 += gh;
              s2 += gh * xhat[r * d + j];
            }
            for (std::size_t j = 0; j < d; ++j) {
              const double gh = g[r * d + j] * gv[j];
              gx[r * d + j] += rstd[r] * (gh - inv_d * s1 - xhat[r * d + j] * inv_d * s2);
            }
          }
        }
      });
}

Var logdet_psd(Var m) {
  const auto& s = m.shape();
  if (s.size() != 2 || s[0] != s[1]) throw ShapeError("logdet_psd: square matrix required, got " + shape_str(s));
  const std::size_t n = s[0];
  const double value = xecg::logdet_psd(m.value());
  return m.tape()->record(Tensor::scalar(value), {m}, [m, n](Tape& tp, std::size_t self) {
    const double g = tp.grad_buffer(self)[0];
    CMapMat a(tp.value(m.id()).data(), n, n);
    const RowMat inv = a.llt().solve(RowMat::Identity(n, n));
    MapMat gm(tp.grad_slot(m.id()), n, n);
    gm += g * inv.transpose();
  });
}

Var bce_with_logits(Var logits, const Tensor& targets) {
  if (targets.size() != logits.value().size()) throw ShapeError("bce_with_logits: target size mismatch");
  const double* x = logits.value().data();
  const std::size_t n = targets.size();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    const double xi = x[i], yi = targets[i];
    total += std::max(xi, 0.0) - xi * yi + std::log1p(std::exp(-std::abs(xi)));
  }
  Buffer tgt(targets.values().begin(), targets.values().end());
  return logits.tape()->record(Tensor::scalar(total / static_cast<double>(n)), {logits},
                               [logits, tgt = std::move(tgt)](Tape& tp, std::size_t self) {
                                 const double g = tp.grad_buffer(self)[0];
                                 const double* x = tp.value(logits.id()).data();
                                 double* gl = tp.grad_slot(logits.id());
                                 const double inv = 1.0 / static_cast<double>(tgt.size());
                                 for (std::size_t i = 0; i < tgt.size(); ++i) {
                                   const double p = x[i] >= 0 ? 1.0 / (1.0 + std::exp(-x[i]))
                                                              : std::exp(x[i]) / (1.0 + std::exp(x[i]));
                                   gl[i] += g * (p - tgt[i]) * inv;
                                 }
                               });
}

Var softmax_cross_entropy(Var logits, std::span<const int> labels) {
  const auto& s = logits.shape();
  if (s.size() != 2 || s[0] != labels.size()) throw ShapeError("softmax_cross_entropy: expects [n x k] with n labels");
  const std::size_t n = s[0], k = s[1];
  std::vector<double> probs(n * k);
  double total = 0.0;
  const double* x = logits.value().data();
  for (std::size_t r = 0; r < n; ++r) {
    if (labels[r] < 0 || static_cast<std::size_t>(labels[r]) >= k) throw ShapeError("label out of range");
    double m = x[r * k];
    for (std::size_t j = 1; j < k; ++j) m = std::max(m, x[r * k + j]);
    double z = 0.0;
    for (std::size_t j = 0; j < k; ++j) z += (probs[r * k + j] = std::exp(x[r * k + j] - m));
    for (std::size_t j = 0; j < k; ++j) probs[r * k + j] /= z;
    total += -(x[r * k + labels[r]] - m - std::log(z));
  }
  std::vector<int> lab(labels.begin(), labels.end());
  return logits.tape()->record(Tensor::scalar(total / static_cast<double>(n)), {logits},
                               [logits, n, k, probs = std::move(probs), lab = std::move(lab)](Tape& tp,
                                                                                              std::size_t self) {
                                 const double g = tp.grad_buffer(self)[0] / static_cast<double>(n);
                                 double* gl = tp.grad_slot(logits.id());
                                 for (std::size_t r = 0; r < n; ++r)
                                   for (std::size_t j = 0; j < k; ++j)
                                     gl[r * k + j] += g * (probs[r * k + j] - (static_cast<int>(j) == lab[r] ? 1.0 : 0.0));
                               });
}

}  // namespace ops

Tensor matmul(const Tensor& a, const Tensor& b) {
  if (a.rank() != 2 || b.rank() != 2 || a.dim(1) != b.dim(0))
    throw ShapeError("matmul: cannot multiply " + shape_str(a.shape()) + " by " + shape_str(b.shape()));
  Tensor out({a.dim(0), b.dim(1)});
  MapMat(out.data(), a.dim(0), b.dim(1)).noalias() =
      CMapMat(a.data(), a.dim(0), a.dim(1)) * CMapMat(b.data(), b.dim(0), b.dim(1));
  return out;
}

double logdet_psd(const Tensor& m) {
  if (m.rank() != 2 || m.dim(0) != m.dim(1)) throw ShapeError("logdet_psd: square matrix required");
  const std::size_t n = m.dim(0);
  for (std::size_t i = 0; i < n; ++i)
    for (std::size_t j = i + 1; j < n; ++j) {
      const double tol = 1e-9 * std::max(1.0, std::max(std::abs(m.at(i, j)), std::abs(m.at(j, i))));
      if (std::abs(m.at(i, j) - m.at(j, i)) > tol) throw DomainError("logdet_psd: matrix is not symmetric");
    }
  // Plain Cholesky so a failing pivot is reported with its index.
  std::vector<double> l(n * n, 0.0);
  double acc = 0.0;
  for (std::size_t j = 0; j < n; ++j) {
    double d = m.at(j, j);
    for (std::size_t k = 0; k < j; ++k) d -= l[j * n + k] * l[j * n + k];
    if (!(d > 0.0))
      throw DefinitenessError("logdet_psd: non-positive pivot at index " + std::to_string(j));
    const double ljj = std::sqrt(d);
    l[j * n + j] = ljj;
    acc += 2.0 * std::log(ljj);
    for (std::size_t i = j + 1; i < n; ++i) {
      double s = m.at(i, j);
      for (std::size_t k = 0; k < j; ++k) s -= l[i * n + k] * l[j * n + k];
      l[i * n + j] = s / ljj;
    }
  }
  return acc;
}

}  // namespace xecg
