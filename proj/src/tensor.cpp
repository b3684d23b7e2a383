#include "exitnet/tensor.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <sstream>
#include <unordered_set>
#include <utility>

namespace exitnet {

namespace flopcount {
namespace {
thread_local std::uint64_t g_count = 0;
}
void reset() { g_count = 0; }
std::uint64_t count() { return g_count; }
void charge(std::uint64_t n) { g_count += n; }
}  // namespace flopcount

namespace detail {
namespace {
thread_local int g_nograd_depth = 0;
}
bool grad_enabled() { return g_nograd_depth == 0; }
}  // namespace detail

NoGradGuard::NoGradGuard() { ++detail::g_nograd_depth; }
NoGradGuard::~NoGradGuard() { --detail::g_nograd_depth; }

std::size_t shape_numel(const std::vector<std::size_t>& shape) {
  std::size_t n = 1;
  for (auto d : shape) n *= d;
  return n;
}

std::string shape_str(const std::vector<std::size_t>& shape) {
  std::ostringstream os;
  os << "[";
  for (std::size_t i = 0; i < shape.size(); ++i) {
    if (i) os << ",";
    os << shape[i];
  }
  os << "]";
  return os.str();
}

// ---- Tensor basics ---------------------------------------------------------

namespace {

std::shared_ptr<detail::Node> new_leaf(std::vector<std::size_t> shape, std::vector<double> data,
                                       bool requires_grad) {
  auto n = std::make_shared<detail::Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  n->requires_grad = requires_grad;
  n->leaf = true;
  return n;
}

void check_defined(const Tensor& t, const char* who) {
  if (!t.defined()) throw ContractError(std::string(who) + ": undefined tensor");
}

}  // namespace

Tensor Tensor::zeros(std::vector<std::size_t> shape, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, 0.0), requires_grad));
}

Tensor Tensor::full(std::vector<std::size_t> shape, double value, bool requires_grad) {
  std::size_t n = shape_numel(shape);
  return Tensor(new_leaf(std::move(shape), std::vector<double>(n, value), requires_grad));
}

Tensor Tensor::from_data(std::vector<std::size_t> shape, std::vector<double> data,
                         bool requires_grad) {
  if (shape_numel(shape) != data.size())
    throw ShapeError("from_data: shape " + shape_str(shape) + " wants " +
                     std::to_string(shape_numel(shape)) + " values, got " +
                     std::to_string(data.size()));
  return Tensor(new_leaf(std::move(shape), std::move(data), requires_grad));
}

Tensor Tensor::scalar(double value, bool requires_grad) {
  return Tensor(new_leaf({1}, {value}, requires_grad));
}

const std::vector<std::size_t>& Tensor::shape() const {
  check_defined(*this, "shape");
  return node_->shape;
}

std::size_t Tensor::numel() const {
  check_defined(*this, "numel");
  return node_->numel();
}

std::size_t Tensor::dim(std::size_t i) const {
  const auto& s = shape();
  if (i >= s.size()) throw ShapeError("dim: axis " + std::to_string(i) + " out of rank " + std::to_string(s.size()));
  return s[i];
}

const double* Tensor::data() const {
  check_defined(*this, "data");
  return node_->data.data();
}

double* Tensor::data() {
  check_defined(*this, "data");
  return node_->data.data();
}

double Tensor::value() const {
  if (numel() != 1)
    throw ContractError("value: tensor is not scalar, shape " + shape_str(shape()));
  return node_->data[0];
}

double Tensor::at(std::size_t flat) const {
  if (flat >= numel()) throw ContractError("at: index out of range");
  return node_->data[flat];
}

bool Tensor::requires_grad() const {
  check_defined(*this, "requires_grad");
  return node_->requires_grad;
}

void Tensor::set_requires_grad(bool rg) {
  check_defined(*this, "set_requires_grad");
  if (!node_->leaf) throw ContractError("set_requires_grad: only leaf tensors");
  node_->requires_grad = rg;
}

const std::vector<double>& Tensor::grad() const {
  check_defined(*this, "grad");
  node_->ensure_grad();
  return node_->grad;
}

std::vector<double>& Tensor::grad() {
  check_defined(*this, "grad");
  node_->ensure_grad();
  return node_->grad;
}

void Tensor::zero_grad() {
  check_defined(*this, "zero_grad");
  node_->grad.assign(node_->numel(), 0.0);
}

Tensor Tensor::detach() const {
  check_defined(*this, "detach");
  return Tensor(new_leaf(node_->shape, node_->data, false));
}

Tensor Tensor::clone() const {
  check_defined(*this, "clone");
  return Tensor(new_leaf(node_->shape, node_->data, node_->requires_grad));
}

void Tensor::backward() const {
  check_defined(*this, "backward");
  if (numel() != 1)
    throw ContractError("backward: loss must be scalar, got shape " + shape_str(shape()));
  if (!node_->requires_grad)
    throw ContractError("backward: tensor does not require grad");

  // Post-order DFS; parents precede children, so the reverse walk visits each
  // node exactly once with its full upstream gradient in place.
  std::vector<detail::Node*> topo;
  std::unordered_set<detail::Node*> seen;
  std::vector<std::pair<detail::Node*, std::size_t>> stack;
  stack.push_back({node_.get(), 0});
  seen.insert(node_.get());
  while (!stack.empty()) {
    auto& top = stack.back();
    if (top.second < top.first->parents.size()) {
      detail::Node* p = top.first->parents[top.second].get();
      ++top.second;
      if (p->requires_grad && !seen.count(p)) {
        seen.insert(p);
        stack.push_back({p, 0});
      }
    } else {
      topo.push_back(top.first);
      stack.pop_back();
    }
  }

  for (auto* n : topo)
    if (!n->leaf) n->grad.assign(n->numel(), 0.0);
  node_->ensure_grad();
  node_->grad[0] += 1.0;

  for (auto it = topo.rbegin(); it != topo.rend(); ++it) {
    detail::Node* n = *it;
    if (n->backward_fn) n->backward_fn(*n);
  }
}

namespace detail {

Tensor make_op(std::vector<std::size_t> shape, std::vector<double> data,
               const std::vector<Tensor>& inputs, std::function<void(Node&)> backward) {
  auto n = std::make_shared<Node>();
  n->shape = std::move(shape);
  n->data = std::move(data);
  if (grad_enabled()) {
    bool rg = false;
    for (const auto& t : inputs)
      if (t.requires_grad()) {
        rg = true;
        break;
      }
    if (rg) {
      n->requires_grad = true;
      n->leaf = false;
      n->parents.reserve(inputs.size());
      for (const auto& t : inputs) n->parents.push_back(t.node());
      n->backward_fn = std::move(backward);
    }
  }
  return Tensor(n);
}

}  // namespace detail

// ---- broadcasting ----------------------------------------------------------

namespace {

std::vector<std::size_t> bcast_shape(const std::vector<std::size_t>& a,
                                     const std::vector<std::size_t>& b) {
  std::size_t ra = a.size(), rb = b.size(), r = std::max(ra, rb);
  std::vector<std::size_t> out(r);
  for (std::size_t i = 0; i < r; ++i) {
    std::size_t da = i < r - ra ? 1 : a[i - (r - ra)];
    std::size_t db = i < r - rb ? 1 : b[i - (r - rb)];
    if (da != db && da != 1 && db != 1)
      throw ShapeError("cannot broadcast " + shape_str(a) + " with " + shape_str(b));
    out[i] = std::max(da, db);
  }
  return out;
}

// Element strides of `shape` right-aligned into `out`; 0 marks broadcast dims.
std::vector<std::size_t> bcast_strides(const std::vector<std::size_t>& shape,
                                       const std::vector<std::size_t>& out) {
  std::size_t r = out.size(), rs = shape.size();
  std::vector<std::size_t> strides(r, 0);
  std::size_t acc = 1;
  for (std::size_t i = rs; i-- > 0;) {
    std::size_t oi = r - rs + i;
    strides[oi] = (shape[i] == 1 && out[oi] != 1) ? 0 : acc;
    acc *= shape[i];
  }
  return strides;
}

inline std::size_t bcast_off(std::size_t flat, const std::vector<std::size_t>& oshape,
                             const std::vector<std::size_t>& strides) {
  std::size_t off = 0;
  for (std::size_t d = oshape.size(); d-- > 0;) {
    off += (flat % oshape[d]) * strides[d];
    flat /= oshape[d];
  }
  return off;
}

enum class BinKind { Add, Sub, Mul, Div };

Tensor binary(const Tensor& a, const Tensor& b, BinKind kind) {
  check_defined(a, "elementwise");
  check_defined(b, "elementwise");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  const bool same = as == bs;
  std::vector<std::size_t> os = same ? as : bcast_shape(as, bs);
  std::size_t n = shape_numel(os);
  std::vector<double> out(n);
  const double* pa = a.data();
  const double* pb = b.data();

  auto apply = [kind](double x, double y) {
    switch (kind) {
      case BinKind::Add: return x + y;
      case BinKind::Sub: return x - y;
      case BinKind::Mul: return x * y;
      default: return x / y;
    }
  };

  std::vector<std::size_t> sa, sb;
  if (same) {
    for (std::size_t i = 0; i < n; ++i) out[i] = apply(pa[i], pb[i]);
  } else {
    sa = bcast_strides(as, os);
    sb = bcast_strides(bs, os);
    for (std::size_t i = 0; i < n; ++i)
      out[i] = apply(pa[bcast_off(i, os, sa)], pb[bcast_off(i, os, sb)]);
  }
  flopcount::charge(n);

  auto oshape = os;
  return detail::make_op(
      std::move(os), std::move(out), {a, b},
      [kind, same, oshape, sa, sb](detail::Node& self) {
        auto& na = *self.parents[0];
        auto& nb = *self.parents[1];
        const std::size_t n = self.numel();
        const double* go = self.grad.data();
        const double* da = na.data.data();
        const double* db = nb.data.data();
        if (na.requires_grad) {
          na.ensure_grad();
          double* ga = na.grad.data();
          for (std::size_t i = 0; i < n; ++i) {
            std::size_t ia = same ? i : bcast_off(i, oshape, sa);
            std::size_t ib = same ? i : bcast_off(i, oshape, sb);
            switch (kind) {
              case BinKind::Add:
              case BinKind::Sub: ga[ia] += go[i]; break;
              case BinKind::Mul: ga[ia] += go[i] * db[ib]; break;
              case BinKind::Div: ga[ia] += go[i] / db[ib]; break;
            }
          }
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          double* gb = nb.grad.data();
          for (std::size_t i = 0; i < n; ++i) {
            std::size_t ia = same ? i : bcast_off(i, oshape, sa);
            std::size_t ib = same ? i : bcast_off(i, oshape, sb);
            switch (kind) {
              case BinKind::Add: gb[ib] += go[i]; break;
              case BinKind::Sub: gb[ib] -= go[i]; break;
              case BinKind::Mul: gb[ib] += go[i] * da[ia]; break;
              case BinKind::Div: gb[ib] -= go[i] * da[ia] / (db[ib] * db[ib]); break;
            }
          }
        }
      });
}

}  // namespace

Tensor add(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Add); }
Tensor sub(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Sub); }
Tensor mul(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Mul); }
Tensor div(const Tensor& a, const Tensor& b) { return binary(a, b, BinKind::Div); }

// ---- unary -----------------------------------------------------------------

namespace {

template <class Fwd, class Bwd>
Tensor unary(const Tensor& a, Fwd f, Bwd dfdx) {
  check_defined(a, "unary");
  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  for (std::size_t i = 0; i < n; ++i) out[i] = f(pa[i]);
  flopcount::charge(n);
  return detail::make_op(a.shape(), std::move(out), {a}, [dfdx](detail::Node& self) {
    auto& na = *self.parents[0];
    if (!na.requires_grad) return;
    na.ensure_grad();
    const std::size_t n = self.numel();
    const double* go = self.grad.data();
    const double* x = na.data.data();
    const double* y = self.data.data();
    double* ga = na.grad.data();
    for (std::size_t i = 0; i < n; ++i) ga[i] += go[i] * dfdx(x[i], y[i]);
  });
}

}  // namespace

Tensor neg(const Tensor& a) {
  return unary(a, [](double x) { return -x; }, [](double, double) { return -1.0; });
}

Tensor scale(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x * c; }, [c](double, double) { return c; });
}

Tensor add_scalar(const Tensor& a, double c) {
  return unary(a, [c](double x) { return x + c; }, [](double, double) { return 1.0; });
}

Tensor exp(const Tensor& a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Tensor gelu(const Tensor& a) {
  constexpr double kInvSqrt2 = 0.7071067811865475244;
  constexpr double kInvSqrt2Pi = 0.3989422804014326779;
  return unary(
      a, [](double x) { return 0.5 * x * (1.0 + std::erf(x * kInvSqrt2)); },
      [](double x, double) {
        return 0.5 * (1.0 + std::erf(x * kInvSqrt2)) + x * kInvSqrt2Pi * std::exp(-0.5 * x * x);
      });
}

// ---- matmul ----------------------------------------------------------------

Tensor matmul(const Tensor& a, const Tensor& b) {
  check_defined(a, "matmul");
  check_defined(b, "matmul");
  const auto& as = a.shape();
  const auto& bs = b.shape();
  if (as.size() < 2 || bs.size() < 2 || as.size() != bs.size())
    throw ShapeError("matmul: ranks must match and be >= 2, got " + shape_str(as) + " x " +
                     shape_str(bs));
  std::size_t r = as.size();
  std::size_t batch = 1;
  for (std::size_t i = 0; i + 2 < r; ++i) {
    if (as[i] != bs[i])
      throw ShapeError("matmul: batch dims must match, got " + shape_str(as) + " x " +
                       shape_str(bs));
    batch *= as[i];
  }
  std::size_t m = as[r - 2], k = as[r - 1], k2 = bs[r - 2], n = bs[r - 1];
  if (k != k2)
    throw ShapeError("matmul: inner dims differ, " + shape_str(as) + " x " + shape_str(bs));

  std::vector<std::size_t> os(as.begin(), as.end() - 2);
  os.push_back(m);
  os.push_back(n);
  std::vector<double> out(batch * m * n, 0.0);
  const double* pa = a.data();
  const double* pb = b.data();
  for (std::size_t bi = 0; bi < batch; ++bi) {
    const double* A = pa + bi * m * k;
    const double* B = pb + bi * k * n;
    double* C = out.data() + bi * m * n;
    for (std::size_t i = 0; i < m; ++i)
      for (std::size_t p = 0; p < k; ++p) {
        double av = A[i * k + p];
        const double* Brow = B + p * n;
        double* Crow = C + i * n;
        for (std::size_t j = 0; j < n; ++j) Crow[j] += av * Brow[j];
      }
  }
  flopcount::charge(2ull * batch * m * k * n);

  return detail::make_op(std::move(os), std::move(out), {a, b},
                         [batch, m, k, n](detail::Node& self) {
                           auto& na = *self.parents[0];
                           auto& nb = *self.parents[1];
                           const double* go = self.grad.data();
                           const double* pa = na.data.data();
                           const double* pb = nb.data.data();
                           if (na.requires_grad) {
                             na.ensure_grad();
                             double* ga = na.grad.data();
                             for (std::size_t bi = 0; bi < batch; ++bi) {
                               const double* G = go + bi * m * n;
                               const double* B = pb + bi * k * n;
                               double* dA = ga + bi * m * k;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   double acc = 0.0;
                                   const double* Grow = G + i * n;
                                   const double* Brow = B + p * n;
                                   for (std::size_t j = 0; j < n; ++j) acc += Grow[j] * Brow[j];
                                   dA[i * k + p] += acc;
                                 }
                             }
                           }
                           if (nb.requires_grad) {
                             nb.ensure_grad();
                             double* gb = nb.grad.data();
                             for (std::size_t bi = 0; bi < batch; ++bi) {
                               const double* G = go + bi * m * n;
                               const double* A = pa + bi * m * k;
                               double* dB = gb + bi * k * n;
                               for (std::size_t i = 0; i < m; ++i)
                                 for (std::size_t p = 0; p < k; ++p) {
                                   double av = A[i * k + p];
                                   const double* Grow = G + i * n;
                                   double* dBrow = dB + p * n;
                                   for (std::size_t j = 0; j < n; ++j) dBrow[j] += av * Grow[j];
                                 }
                             }
                           }
                         });
}

// ---- data movement ---------------------------------------------------------

Tensor reshape(const Tensor& a, std::vector<std::size_t> shape) {
  check_defined(a, "reshape");
  if (shape_numel(shape) != a.numel())
    throw ShapeError("reshape: " + shape_str(a.shape()) + " -> " + shape_str(shape) +
                     " changes element count");
  std::vector<double> out(a.data(), a.data() + a.numel());
  return detail::make_op(std::move(shape), std::move(out), {a}, [](detail::Node& self) {
    auto& na = *self.parents[0];
    if (!na.requires_grad) return;
    na.ensure_grad();
    const double* go = self.grad.data();
    double* ga = na.grad.data();
    for (std::size_t i = 0; i < self.numel(); ++i) ga[i] += go[i];
  });
}

Tensor permute(const Tensor& a, const std::vector<std::size_t>& axes) {
  check_defined(a, "permute");
  const auto& as = a.shape();
  std::size_t r = as.size();
  if (axes.size() != r) throw ShapeError("permute: axes size != rank");
  std::vector<bool> used(r, false);
  for (auto ax : axes) {
    if (ax >= r || used[ax]) throw ShapeError("permute: axes must be a permutation");
    used[ax] = true;
  }
  std::vector<std::size_t> os(r);
  for (std::size_t i = 0; i < r; ++i) os[i] = as[axes[i]];

  std::vector<std::size_t> in_strides(r, 1);
  for (std::size_t i = r - 1; i-- > 0;) in_strides[i] = in_strides[i + 1] * as[i + 1];
  // stride in the input for each output axis
  std::vector<std::size_t> map(r);
  for (std::size_t i = 0; i < r; ++i) map[i] = in_strides[axes[i]];

  std::size_t n = a.numel();
  std::vector<double> out(n);
  const double* pa = a.data();
  std::vector<std::size_t> idx(r, 0);
  std::size_t in_off = 0;
  for (std::size_t i = 0; i < n; ++i) {
    out[i] = pa[in_off];
    for (std::size_t d = r; d-- > 0;) {
      idx[d]++;
      in_off += map[d];
      if (idx[d] < os[d]) break;
      in_off -= map[d] * idx[d];
      idx[d] = 0;
    }
  }

  auto oshape = os;
  return detail::make_op(std::move(os), std::move(out), {a},
                         [oshape, map, r](detail::Node& self) {
                           auto& na = *self.parents[0];
                           if (!na.requires_grad) return;
                           na.ensure_grad();
                           const double* go = self.grad.data();
                           double* ga = na.grad.data();
                           std::size_t n = self.numel();
                           std::vector<std::size_t> idx(r, 0);
                           std::size_t in_off = 0;
                           for (std::size_t i = 0; i < n; ++i) {
                             ga[in_off] += go[i];
                             for (std::size_t d = r; d-- > 0;) {
                               idx[d]++;
                               in_off += map[d];
                               if (idx[d] < oshape[d]) break;
                               in_off -= map[d] * idx[d];
                               idx[d] = 0;
                             }
                           }
                         });
}

Tensor transpose_last2(const Tensor& a) {
  std::size_t r = a.shape().size();
  if (r < 2) throw ShapeError("transpose_last2: rank < 2");
  std::vector<std::size_t> axes(r);
  for (std::size_t i = 0; i < r; ++i) axes[i] = i;
  std::swap(axes[r - 2], axes[r - 1]);
  return permute(a, axes);
}

Tensor concat(const std::vector<Tensor>& parts, std::size_t axis) {
  if (parts.empty()) throw ContractError("concat: no inputs");
  const auto& s0 = parts[0].shape();
  std::size_t r = s0.size();
  if (axis >= r) throw ShapeError("concat: axis out of rank");
  std::size_t axis_total = 0;
  for (const auto& p : parts) {
    const auto& ps = p.shape();
    if (ps.size() != r) throw ShapeError("concat: rank mismatch");
    for (std::size_t d = 0; d < r; ++d)
      if (d != axis && ps[d] != s0[d])
        throw ShapeError("concat: shape mismatch " + shape_str(s0) + " vs " + shape_str(ps));
    axis_total += ps[axis];
  }
  std::vector<std::size_t> os = s0;
  os[axis] = axis_total;
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= s0[d];
  for (std::size_t d = axis + 1; d < r; ++d) inner *= s0[d];

  std::vector<double> out(shape_numel(os));
  std::size_t out_row = axis_total * inner;
  std::size_t col_off = 0;
  std::vector<std::size_t> part_dims(parts.size());
  for (std::size_t pi = 0; pi < parts.size(); ++pi) {
    std::size_t d = parts[pi].shape()[axis];
    part_dims[pi] = d;
    const double* src = parts[pi].data();
    for (std::size_t o = 0; o < outer; ++o)
      std::memcpy(out.data() + o * out_row + col_off * inner, src + o * d * inner,
                  d * inner * sizeof(double));
    col_off += d;
  }

  return detail::make_op(std::move(os), std::move(out), parts,
                         [outer, inner, out_row, part_dims](detail::Node& self) {
                           const double* go = self.grad.data();
                           std::size_t col_off = 0;
                           for (std::size_t pi = 0; pi < self.parents.size(); ++pi) {
                             auto& np = *self.parents[pi];
                             std::size_t d = part_dims[pi];
                             if (np.requires_grad) {
                               np.ensure_grad();
                               double* gp = np.grad.data();
                               for (std::size_t o = 0; o < outer; ++o) {
                                 const double* g = go + o * out_row + col_off * inner;
                                 double* dst = gp + o * d * inner;
                                 for (std::size_t j = 0; j < d * inner; ++j) dst[j] += g[j];
                               }
                             }
                             col_off += d;
                           }
                         });
}

Tensor repeat_front(const Tensor& a, std::size_t n) {
  check_defined(a, "repeat_front");
  if (n == 0) throw ContractError("repeat_front: n must be positive");
  std::size_t sz = a.numel();
  std::vector<std::size_t> os;
  os.push_back(n);
  for (auto d : a.shape()) os.push_back(d);
  std::vector<double> out(n * sz);
  for (std::size_t i = 0; i < n; ++i)
    std::memcpy(out.data() + i * sz, a.data(), sz * sizeof(double));
  return detail::make_op(std::move(os), std::move(out), {a}, [n, sz](detail::Node& self) {
    auto& na = *self.parents[0];
    if (!na.requires_grad) return;
    na.ensure_grad();
    const double* go = self.grad.data();
    double* ga = na.grad.data();
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t j = 0; j < sz; ++j) ga[j] += go[i * sz + j];
  });
}

// ---- softmax / layer norm --------------------------------------------------

namespace {

Tensor softmax_last(const Tensor& a) {
  const auto& as = a.shape();
  std::size_t n = as.back();
  std::size_t rows = a.numel() / n;
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i)
    if (std::isnan(pa[i])) throw NumericalError("softmax: NaN input");
  std::vector<double> out(a.numel());
  for (std::size_t r = 0; r < rows; ++r) {
    const double* x = pa + r * n;
    double* y = out.data() + r * n;
    double m = x[0];
    for (std::size_t j = 1; j < n; ++j) m = std::max(m, x[j]);
    double s = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      y[j] = std::exp(x[j] - m);
      s += y[j];
    }
    for (std::size_t j = 0; j < n; ++j) y[j] /= s;
  }
  flopcount::charge(2ull * a.numel());
  return detail::make_op(as, std::move(out), {a}, [n, rows](detail::Node& self) {
    auto& na = *self.parents[0];
    if (!na.requires_grad) return;
    na.ensure_grad();
    const double* go = self.grad.data();
    const double* y = self.data.data();
    double* ga = na.grad.data();
    for (std::size_t r = 0; r < rows; ++r) {
      const double* gr = go + r * n;
      const double* yr = y + r * n;
      double* gar = ga + r * n;
      double dot = 0.0;
      for (std::size_t j = 0; j < n; ++j) dot += gr[j] * yr[j];
      for (std::size_t j = 0; j < n; ++j) gar[j] += yr[j] * (gr[j] - dot);
    }
  });
}

}  // namespace

Tensor softmax(const Tensor& a, int axis) {
  check_defined(a, "softmax");
  int r = static_cast<int>(a.shape().size());
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw ShapeError("softmax: axis out of rank");
  if (axis == r - 1) return softmax_last(a);
  std::vector<std::size_t> axes(static_cast<std::size_t>(r));
  for (int i = 0; i < r; ++i) axes[static_cast<std::size_t>(i)] = static_cast<std::size_t>(i);
  std::swap(axes[static_cast<std::size_t>(axis)], axes[static_cast<std::size_t>(r - 1)]);
  return permute(softmax_last(permute(a, axes)), axes);
}

Tensor layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  check_defined(x, "layer_norm");
  const auto& xs = x.shape();
  std::size_t n = xs.back();
  if (gamma.shape() != std::vector<std::size_t>{n} || beta.shape() != std::vector<std::size_t>{n})
    throw ShapeError("layer_norm: affine params must be [" + std::to_string(n) + "], got " +
                     shape_str(gamma.shape()) + " and " + shape_str(beta.shape()));
  std::size_t rows = x.numel() / n;
  const double* px = x.data();
  const double* pg = gamma.data();
  const double* pb = beta.data();
  std::vector<double> out(x.numel());
  std::vector<double> mean(rows), inv(rows);
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * n;
    double m = 0.0;
    for (std::size_t j = 0; j < n; ++j) m += xr[j];
    m /= static_cast<double>(n);
    double v = 0.0;
    for (std::size_t j = 0; j < n; ++j) {
      double d = xr[j] - m;
      v += d * d;
    }
    v /= static_cast<double>(n);
    double iv = 1.0 / std::sqrt(v + eps);
    mean[r] = m;
    inv[r] = iv;
    double* yr = out.data() + r * n;
    for (std::size_t j = 0; j < n; ++j) yr[j] = (xr[j] - m) * iv * pg[j] + pb[j];
  }
  flopcount::charge(6ull * x.numel() + 3ull * rows);
  return detail::make_op(
      xs, std::move(out), {x, gamma, beta},
      [n, rows, mean = std::move(mean), inv = std::move(inv)](detail::Node& self) {
        auto& nx = *self.parents[0];
        auto& ng = *self.parents[1];
        auto& nb = *self.parents[2];
        const double* go = self.grad.data();
        const double* px = nx.data.data();
        const double* pg = ng.data.data();
        double* gx = nullptr;
        double* gg = nullptr;
        double* gb = nullptr;
        if (nx.requires_grad) {
          nx.ensure_grad();
          gx = nx.grad.data();
        }
        if (ng.requires_grad) {
          ng.ensure_grad();
          gg = ng.grad.data();
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          gb = nb.grad.data();
        }
        std::vector<double> xhat(n), dyh(n);
        for (std::size_t r = 0; r < rows; ++r) {
          const double* xr = px + r * n;
          const double* gr = go + r * n;
          double m1 = 0.0, m2 = 0.0;
          for (std::size_t j = 0; j < n; ++j) {
            xhat[j] = (xr[j] - mean[r]) * inv[r];
            dyh[j] = gr[j] * pg[j];
            m1 += dyh[j];
            m2 += dyh[j] * xhat[j];
          }
          m1 /= static_cast<double>(n);
          m2 /= static_cast<double>(n);
          if (gx) {
            double* gxr = gx + r * n;
            for (std::size_t j = 0; j < n; ++j)
              gxr[j] += inv[r] * (dyh[j] - m1 - xhat[j] * m2);
          }
          if (gg)
            for (std::size_t j = 0; j < n; ++j) gg[j] += gr[j] * xhat[j];
          if (gb)
            for (std::size_t j = 0; j < n; ++j) gb[j] += gr[j];
        }
      });
}

// ---- linear ----------------------------------------------------------------

Tensor linear(const Tensor& x, const Tensor& w, const Tensor& b) {
  check_defined(x, "linear");
  check_defined(w, "linear");
  check_defined(b, "linear");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (ws.size() != 2) throw ShapeError("linear: weight must be rank 2, got " + shape_str(ws));
  std::size_t in = ws[1], out_f = ws[0];
  if (xs.empty() || xs.back() != in)
    throw ShapeError("linear: input " + shape_str(xs) + " incompatible with weight " +
                     shape_str(ws));
  if (b.shape() != std::vector<std::size_t>{out_f})
    throw ShapeError("linear: bias must be [" + std::to_string(out_f) + "], got " +
                     shape_str(b.shape()));
  std::size_t rows = x.numel() / in;
  std::vector<std::size_t> os(xs.begin(), xs.end() - 1);
  os.push_back(out_f);
  std::vector<double> y(rows * out_f);
  const double* px = x.data();
  const double* pw = w.data();
  const double* pb = b.data();
  for (std::size_t r = 0; r < rows; ++r) {
    const double* xr = px + r * in;
    double* yr = y.data() + r * out_f;
    for (std::size_t o = 0; o < out_f; ++o) {
      const double* wr = pw + o * in;
      double acc = pb[o];
      for (std::size_t i = 0; i < in; ++i) acc += xr[i] * wr[i];
      yr[o] = acc;
    }
  }
  flopcount::charge(2ull * rows * in * out_f + rows * out_f);
  return detail::make_op(std::move(os), std::move(y), {x, w, b},
                         [rows, in, out_f](detail::Node& self) {
                           auto& nx = *self.parents[0];
                           auto& nw = *self.parents[1];
                           auto& nb = *self.parents[2];
                           const double* go = self.grad.data();
                           const double* px = nx.data.data();
                           const double* pw = nw.data.data();
                           if (nx.requires_grad) {
                             nx.ensure_grad();
                             double* gx = nx.grad.data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               const double* gr = go + r * out_f;
                               double* gxr = gx + r * in;
                               for (std::size_t o = 0; o < out_f; ++o) {
                                 double g = gr[o];
                                 const double* wr = pw + o * in;
                                 for (std::size_t i = 0; i < in; ++i) gxr[i] += g * wr[i];
                               }
                             }
                           }
                           if (nw.requires_grad) {
                             nw.ensure_grad();
                             double* gw = nw.grad.data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               const double* gr = go + r * out_f;
                               const double* xr = px + r * in;
                               for (std::size_t o = 0; o < out_f; ++o) {
                                 double g = gr[o];
                                 double* gwr = gw + o * in;
                                 for (std::size_t i = 0; i < in; ++i) gwr[i] += g * xr[i];
                               }
                             }
                           }
                           if (nb.requires_grad) {
                             nb.ensure_grad();
                             double* gb = nb.grad.data();
                             for (std::size_t r = 0; r < rows; ++r) {
                               const double* gr = go + r * out_f;
                               for (std::size_t o = 0; o < out_f; ++o) gb[o] += gr[o];
                             }
                           }
                         });
}

// ---- conv2d ----------------------------------------------------------------

Tensor conv2d(const Tensor& x, const Tensor& w, const Tensor& b, std::size_t stride,
              std::size_t padding, std::size_t groups) {
  check_defined(x, "conv2d");
  check_defined(w, "conv2d");
  check_defined(b, "conv2d");
  const auto& xs = x.shape();
  const auto& ws = w.shape();
  if (xs.size() != 4 || ws.size() != 4)
    throw ShapeError("conv2d: expected x rank 4 and w rank 4, got " + shape_str(xs) + " and " +
                     shape_str(ws));
  std::size_t B = xs[0], Cin = xs[1], H = xs[2], W = xs[3];
  std::size_t Cout = ws[0], Cg = ws[1], kh = ws[2], kw = ws[3];
  if (groups == 0 || Cin % groups != 0 || Cout % groups != 0)
    throw ShapeError("conv2d: groups " + std::to_string(groups) + " must divide Cin " +
                     std::to_string(Cin) + " and Cout " + std::to_string(Cout));
  if (Cg != Cin / groups)
    throw ShapeError("conv2d: weight " + shape_str(ws) + " inconsistent with Cin " +
                     std::to_string(Cin) + " groups " + std::to_string(groups));
  if (b.shape() != std::vector<std::size_t>{Cout})
    throw ShapeError("conv2d: bias must be [" + std::to_string(Cout) + "]");
  if (stride == 0) throw ContractError("conv2d: stride must be positive");
  if (H + 2 * padding < kh || W + 2 * padding < kw)
    throw ShapeError("conv2d: kernel " + std::to_string(kh) + "x" + std::to_string(kw) +
                     " exceeds padded input " + shape_str(xs));
  std::size_t OH = (H + 2 * padding - kh) / stride + 1;
  std::size_t OW = (W + 2 * padding - kw) / stride + 1;
  std::size_t co_per_g = Cout / groups;

  std::vector<double> y(B * Cout * OH * OW);
  const double* px = x.data();
  const double* pw = w.data();
  const double* pb = b.data();
  const auto ip = static_cast<std::ptrdiff_t>(padding);
  for (std::size_t bi = 0; bi < B; ++bi)
    for (std::size_t g = 0; g < groups; ++g)
      for (std::size_t oc = 0; oc < co_per_g; ++oc) {
        std::size_t co = g * co_per_g + oc;
        const double* wk = pw + co * Cg * kh * kw;
        double* yp = y.data() + ((bi * Cout + co) * OH) * OW;
        for (std::size_t oh = 0; oh < OH; ++oh)
          for (std::size_t ow = 0; ow < OW; ++ow) {
            double acc = pb[co];
            for (std::size_t ci = 0; ci < Cg; ++ci) {
              const double* xc = px + ((bi * Cin + g * Cg + ci) * H) * W;
              const double* wc = wk + ci * kh * kw;
              for (std::size_t r = 0; r < kh; ++r) {
                auto ih = static_cast<std::ptrdiff_t>(oh * stride + r) - ip;
                if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                for (std::size_t c = 0; c < kw; ++c) {
                  auto iw = static_cast<std::ptrdiff_t>(ow * stride + c) - ip;
                  if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                  acc += xc[ih * static_cast<std::ptrdiff_t>(W) + iw] * wc[r * kw + c];
                }
              }
            }
            yp[oh * OW + ow] = acc;
          }
      }
  flopcount::charge(2ull * Cg * kh * kw * (B * Cout * OH * OW) + B * Cout * OH * OW);

  return detail::make_op(
      {B, Cout, OH, OW}, std::move(y), {x, w, b},
      [B, Cin, H, W, Cout, Cg, kh, kw, OH, OW, stride, padding, groups](detail::Node& self) {
        auto& nx = *self.parents[0];
        auto& nw = *self.parents[1];
        auto& nb = *self.parents[2];
        const double* go = self.grad.data();
        const double* px = nx.data.data();
        const double* pw = nw.data.data();
        std::size_t co_per_g = Cout / groups;
        const auto ip = static_cast<std::ptrdiff_t>(padding);
        double* gx = nullptr;
        double* gw = nullptr;
        if (nx.requires_grad) {
          nx.ensure_grad();
          gx = nx.grad.data();
        }
        if (nw.requires_grad) {
          nw.ensure_grad();
          gw = nw.grad.data();
        }
        if (gx || gw) {
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t g = 0; g < groups; ++g)
              for (std::size_t oc = 0; oc < co_per_g; ++oc) {
                std::size_t co = g * co_per_g + oc;
                const double* wk = pw + co * Cg * kh * kw;
                double* gwk = gw ? gw + co * Cg * kh * kw : nullptr;
                const double* gop = go + ((bi * Cout + co) * OH) * OW;
                for (std::size_t oh = 0; oh < OH; ++oh)
                  for (std::size_t ow = 0; ow < OW; ++ow) {
                    double gv = gop[oh * OW + ow];
                    if (gv == 0.0) continue;
                    for (std::size_t ci = 0; ci < Cg; ++ci) {
                      std::size_t xoff = ((bi * Cin + g * Cg + ci) * H) * W;
                      const double* xc = px + xoff;
                      const double* wc = wk + ci * kh * kw;
                      double* gxc = gx ? gx + xoff : nullptr;
                      double* gwc = gwk ? gwk + ci * kh * kw : nullptr;
                      for (std::size_t r = 0; r < kh; ++r) {
                        auto ih = static_cast<std::ptrdiff_t>(oh * stride + r) - ip;
                        if (ih < 0 || ih >= static_cast<std::ptrdiff_t>(H)) continue;
                        for (std::size_t c = 0; c < kw; ++c) {
                          auto iw = static_cast<std::ptrdiff_t>(ow * stride + c) - ip;
                          if (iw < 0 || iw >= static_cast<std::ptrdiff_t>(W)) continue;
                          auto xi = ih * static_cast<std::ptrdiff_t>(W) + iw;
                          if (gxc) gxc[xi] += gv * wc[r * kw + c];
                          if (gwc) gwc[r * kw + c] += gv * xc[xi];
                        }
                      }
                    }
                  }
              }
        }
        if (nb.requires_grad) {
          nb.ensure_grad();
          double* gb = nb.grad.data();
          for (std::size_t bi = 0; bi < B; ++bi)
            for (std::size_t co = 0; co < Cout; ++co) {
              const double* gop = go + ((bi * Cout + co) * OH) * OW;
              double acc = 0.0;
              for (std::size_t i = 0; i < OH * OW; ++i) acc += gop[i];
              gb[co] += acc;
            }
        }
      });
}

// ---- pooling / reductions --------------------------------------------------

Tensor adaptive_avg_pool2d(const Tensor& x, std::size_t out) {
  check_defined(x, "adaptive_avg_pool2d");
  const auto& xs = x.shape();
  if (xs.size() != 4) throw ShapeError("adaptive_avg_pool2d: expected rank 4, got " + shape_str(xs));
  if (out == 0) throw ContractError("adaptive_avg_pool2d: output size must be positive");
  std::size_t B = xs[0], C = xs[1], H = xs[2], W = xs[3];
  if (H < out || W < out)
    throw ShapeError("adaptive_avg_pool2d: input " + shape_str(xs) + " smaller than output " +
                     std::to_string(out) + "x" + std::to_string(out));
  std::vector<double> y(B * C * out * out);
  const double* px = x.data();
  for (std::size_t bc = 0; bc < B * C; ++bc) {
    const double* xp = px + bc * H * W;
    double* yp = y.data() + bc * out * out;
    for (std::size_t i = 0; i < out; ++i) {
      std::size_t h0 = i * H / out, h1 = (i + 1) * H / out;
      for (std::size_t j = 0; j < out; ++j) {
        std::size_t w0 = j * W / out, w1 = (j + 1) * W / out;
        double acc = 0.0;
        for (std::size_t h = h0; h < h1; ++h)
          for (std::size_t w = w0; w < w1; ++w) acc += xp[h * W + w];
        yp[i * out + j] = acc / static_cast<double>((h1 - h0) * (w1 - w0));
      }
    }
  }
  flopcount::charge(static_cast<std::uint64_t>(B) * C * H * W);
  return detail::make_op({B, C, out, out}, std::move(y), {x},
                         [B, C, H, W, out](detail::Node& self) {
                           auto& nx = *self.parents[0];
                           if (!nx.requires_grad) return;
                           nx.ensure_grad();
                           const double* go = self.grad.data();
                           double* gx = nx.grad.data();
                           for (std::size_t bc = 0; bc < B * C; ++bc) {
                             const double* gp = go + bc * out * out;
                             double* gxp = gx + bc * H * W;
                             for (std::size_t i = 0; i < out; ++i) {
                               std::size_t h0 = i * H / out, h1 = (i + 1) * H / out;
                               for (std::size_t j = 0; j < out; ++j) {
                                 std::size_t w0 = j * W / out, w1 = (j + 1) * W / out;
                                 double g = gp[i * out + j] /
                                            static_cast<double>((h1 - h0) * (w1 - w0));
                                 for (std::size_t h = h0; h < h1; ++h)
                                   for (std::size_t w = w0; w < w1; ++w) gxp[h * W + w] += g;
                               }
                             }
                           }
                         });
}

Tensor mean_axis(const Tensor& a, std::size_t axis) {
  check_defined(a, "mean_axis");
  const auto& as = a.shape();
  if (axis >= as.size()) throw ShapeError("mean_axis: axis out of rank " + shape_str(as));
  std::size_t L = as[axis];
  std::size_t outer = 1, inner = 1;
  for (std::size_t d = 0; d < axis; ++d) outer *= as[d];
  for (std::size_t d = axis + 1; d < as.size(); ++d) inner *= as[d];
  std::vector<std::size_t> os;
  for (std::size_t d = 0; d < as.size(); ++d)
    if (d != axis) os.push_back(as[d]);
  if (os.empty()) os.push_back(1);
  std::vector<double> y(outer * inner, 0.0);
  const double* pa = a.data();
  for (std::size_t o = 0; o < outer; ++o)
    for (std::size_t l = 0; l < L; ++l) {
      const double* row = pa + (o * L + l) * inner;
      double* yr = y.data() + o * inner;
      for (std::size_t i = 0; i < inner; ++i) yr[i] += row[i];
    }
  double invL = 1.0 / static_cast<double>(L);
  for (auto& v : y) v *= invL;
  flopcount::charge(a.numel());
  return detail::make_op(std::move(os), std::move(y), {a},
                         [outer, inner, L, invL](detail::Node& self) {
                           auto& na = *self.parents[0];
                           if (!na.requires_grad) return;
                           na.ensure_grad();
                           const double* go = self.grad.data();
                           double* ga = na.grad.data();
                           for (std::size_t o = 0; o < outer; ++o)
                             for (std::size_t l = 0; l < L; ++l) {
                               double* gr = ga + (o * L + l) * inner;
                               const double* gor = go + o * inner;
                               for (std::size_t i = 0; i < inner; ++i) gr[i] += gor[i] * invL;
                             }
                         });
}

Tensor sum_all(const Tensor& a) {
  check_defined(a, "sum_all");
  double acc = 0.0;
  const double* pa = a.data();
  for (std::size_t i = 0; i < a.numel(); ++i) acc += pa[i];
  flopcount::charge(a.numel());
  return detail::make_op({1}, {acc}, {a}, [](detail::Node& self) {
    auto& na = *self.parents[0];
    if (!na.requires_grad) return;
    na.ensure_grad();
    double g = self.grad[0];
    double* ga = na.grad.data();
    for (std::size_t i = 0; i < na.numel(); ++i) ga[i] += g;
  });
}

// ---- gradient check --------------------------------------------------------

double gradient_check(const std::function<Tensor()>& f, const std::vector<Tensor>& params,
                      double eps) {
  if (!(eps > 0.0 && eps <= 1e-3))
    throw ContractError("gradient_check: eps must be in (0, 1e-3]");
  if (params.empty()) throw ContractError("gradient_check: no params");
  for (const auto& p : params)
    if (!p.requires_grad())
      throw ContractError("gradient_check: param does not require grad");

  std::vector<Tensor> ps = params;
  for (auto& p : ps) p.zero_grad();
  Tensor loss = f();
  if (loss.numel() != 1) throw ContractError("gradient_check: f must return a scalar");
  if (!std::isfinite(loss.value())) throw NumericalError("gradient_check: non-finite loss");
  loss.backward();

  std::vector<std::vector<double>> analytic;
  analytic.reserve(ps.size());
  for (auto& p : ps) analytic.push_back(p.grad());

  double worst = 0.0;
  NoGradGuard ng;
  for (std::size_t pi = 0; pi < ps.size(); ++pi) {
    double* d = ps[pi].data();
    for (std::size_t j = 0; j < ps[pi].numel(); ++j) {
      double keep = d[j];
      d[j] = keep + eps;
      double fp = f().value();
      d[j] = keep - eps;
      double fm = f().value();
      d[j] = keep;
      if (!std::isfinite(fp) || !std::isfinite(fm))
        throw NumericalError("gradient_check: non-finite loss during perturbation");
      double num = (fp - fm) / (2.0 * eps);
      double an = analytic[pi][j];
      double rel = std::fabs(an - num) / std::max(1e-8, std::fabs(an) + std::fabs(num));
      worst = std::max(worst, rel);
    }
  }
  return worst;
}

}  // namespace exitnet
