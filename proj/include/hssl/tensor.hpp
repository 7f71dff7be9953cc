#pragma once

// Dense row-major tensors with reverse-mode automatic differentiation on a
// define-by-run tape. Values are stored in the scalar type T (float in the
// production aliases); every reduction accumulates in double.

#include <algorithm>
#include <array>
#include <cstring>
#include <functional>
#include <memory>
#include <span>
#include <vector>

#include "hssl/common.hpp"

namespace hssl {

template <class T>
class TapeT;

template <class T>
struct TensorT {
  std::vector<int> shape;
  std::shared_ptr<std::vector<T>> data;
  TapeT<T>* tape = nullptr;
  int node = -1;  // tape handle; -1 means constant w.r.t. the tape

  TensorT() = default;
  TensorT(std::vector<int> s, std::shared_ptr<std::vector<T>> d) : shape(std::move(s)), data(std::move(d)) {
    if (shape_numel(shape) != static_cast<int64_t>(data->size()))
      throw dimension_error("tensor data length does not match shape " + shape_str(shape));
  }

  int64_t numel() const { return data ? static_cast<int64_t>(data->size()) : 0; }
  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[i < 0 ? shape.size() + i : i]; }
  bool requires_grad() const { return node >= 0; }

  const T* ptr() const { return data->data(); }
  T* ptr() { return data->data(); }
  T scalar() const {
    if (numel() != 1) throw contract_error("scalar() on tensor of shape " + shape_str(shape));
    return (*data)[0];
  }
};

template <class T>
TensorT<T> make_tensor(std::vector<int> shape, std::vector<T> values) {
  return TensorT<T>(std::move(shape), std::make_shared<std::vector<T>>(std::move(values)));
}

template <class T>
TensorT<T> zeros_like_shape(const std::vector<int>& shape) {
  return TensorT<T>(shape, std::make_shared<std::vector<T>>(shape_numel(shape), T(0)));
}

template <class T>
TensorT<T> full(const std::vector<int>& shape, T v) {
  return TensorT<T>(shape, std::make_shared<std::vector<T>>(shape_numel(shape), v));
}

// ---------------------------------------------------------------------------
// Tape
// ---------------------------------------------------------------------------

template <class T>
class TapeT {
 public:
  using GradSink = std::function<void(const T*, int64_t)>;

  TensorT<T> leaf(std::vector<int> shape, std::vector<T> values) {
    TensorT<T> t = make_tensor<T>(std::move(shape), std::move(values));
    t.tape = this;
    t.node = register_node({}, t.numel(), nullptr);
    return t;
  }

  // Leaf whose data is shared with external storage; gradient is delivered to
  // `sink` during backward (used for model parameters).
  TensorT<T> leaf_shared(const std::vector<int>& shape, std::shared_ptr<std::vector<T>> values, GradSink sink) {
    TensorT<T> t(shape, std::move(values));
    t.tape = this;
    int64_t n = t.numel();
    int id = register_node({}, n, nullptr);
    nodes_[id].sink = std::move(sink);
    t.node = id;
    return t;
  }

  int register_node(std::vector<int> parents, int64_t numel, std::function<void(TapeT&, int)> backprop) {
    nodes_.push_back(Node{std::move(parents), {}, numel, std::move(backprop), nullptr});
    return static_cast<int>(nodes_.size()) - 1;
  }

  std::vector<T>& grad_buffer(int node) {
    Node& nd = nodes_.at(node);
    if (nd.grad.empty()) nd.grad.assign(static_cast<size_t>(nd.numel), T(0));
    return nd.grad;
  }

  // Empty until backward reaches the node.
  const std::vector<T>& grad(int node) const { return nodes_.at(node).grad; }

  const std::vector<T>& grad(const TensorT<T>& t) const {
    if (t.tape != this || t.node < 0) throw contract_error("grad(): tensor is not on this tape");
    return nodes_.at(t.node).grad;
  }

  void backward(const TensorT<T>& loss) {
    if (loss.tape != this || loss.node < 0) throw contract_error("backward: loss is not on this tape");
    if (loss.numel() != 1) throw contract_error("backward: loss must be scalar, got " + shape_str(loss.shape));
    grad_buffer(loss.node)[0] += T(1);
    // Reverse traversal; construction order guarantees parents precede
    // children, so each node is finalized exactly once.
    for (int i = loss.node; i >= 0; --i) {
      Node& nd = nodes_[static_cast<size_t>(i)];
      if (nd.grad.empty()) continue;
      if (nd.backprop) nd.backprop(*this, i);
      if (nd.sink) nd.sink(nd.grad.data(), nd.numel);
    }
  }

  size_t size() const { return nodes_.size(); }

  void clear() { nodes_.clear(); }

 private:
  struct Node {
    std::vector<int> parents;
    std::vector<T> grad;
    int64_t numel = 0;
    std::function<void(TapeT&, int)> backprop;
    GradSink sink;
  };
  std::vector<Node> nodes_;
};

namespace detail {

template <class T>
void check_prob_rows(const TensorT<T>& p, const char* who, double tol = 1e-5) {
  const int k = p.shape.back();
  const int64_t rows = p.numel() / k;
  const T* data = p.ptr();
  for (int64_t r = 0; r < rows; ++r) {
    double s = 0.0;
    for (int j = 0; j < k; ++j) {
      double v = static_cast<double>(data[r * k + j]);
      if (v < -1e-7) throw contract_error(std::string(who) + ": negative probability entry");
      s += v;
    }
    if (std::fabs(s - 1.0) > tol)
      throw contract_error(std::string(who) + ": row does not sum to 1 (got " + std::to_string(s) + ")");
  }
}

template <class T>
TapeT<T>* common_tape(std::initializer_list<const TensorT<T>*> ts) {
  TapeT<T>* tape = nullptr;
  for (const TensorT<T>* t : ts) {
    if (t->tape == nullptr || t->node < 0) continue;
    if (tape == nullptr) tape = t->tape;
    else if (tape != t->tape) throw contract_error("operands live on different tapes");
  }
  return tape;
}

template <class T>
void axpy(T* dst, const T* src, T a, int64_t n) {
  for (int64_t i = 0; i < n; ++i) dst[i] += a * src[i];
}

// C[m x n] (+)= A[m x k] * B[k x n]
template <class T>
void gemm_nn(const T* A, const T* B, T* C, int m, int k, int n, bool accumulate) {
  std::vector<double> acc(static_cast<size_t>(n));
  for (int i = 0; i < m; ++i) {
    T* crow = C + static_cast<int64_t>(i) * n;
    if (accumulate)
      for (int j = 0; j < n; ++j) acc[j] = static_cast<double>(crow[j]);
    else
      std::fill(acc.begin(), acc.end(), 0.0);
    const T* arow = A + static_cast<int64_t>(i) * k;
    for (int kk = 0; kk < k; ++kk) {
      const double a = static_cast<double>(arow[kk]);
      if (a == 0.0) continue;
      const T* brow = B + static_cast<int64_t>(kk) * n;
      for (int j = 0; j < n; ++j) acc[j] += a * static_cast<double>(brow[j]);
    }
    for (int j = 0; j < n; ++j) crow[j] = static_cast<T>(acc[j]);
  }
}

// C[m x q] (+)= A[m x p] * B^T, with B stored [q x p]
template <class T>
void gemm_nt(const T* A, const T* B, T* C, int m, int p, int q, bool accumulate) {
  for (int i = 0; i < m; ++i) {
    const T* arow = A + static_cast<int64_t>(i) * p;
    T* crow = C + static_cast<int64_t>(i) * q;
    for (int j = 0; j < q; ++j) {
      const T* brow = B + static_cast<int64_t>(j) * p;
      double acc = 0.0;
      for (int kk = 0; kk < p; ++kk) acc += static_cast<double>(arow[kk]) * static_cast<double>(brow[kk]);
      crow[j] = accumulate ? static_cast<T>(static_cast<double>(crow[j]) + acc) : static_cast<T>(acc);
    }
  }
}

// C[p x n] (+)= A^T * B, with A stored [m x p], B stored [m x n]
template <class T>
void gemm_tn(const T* A, const T* B, T* C, int m, int p, int n, bool accumulate) {
  std::vector<double> acc(static_cast<size_t>(p) * n, 0.0);
  for (int i = 0; i < m; ++i) {
    const T* arow = A + static_cast<int64_t>(i) * p;
    const T* brow = B + static_cast<int64_t>(i) * n;
    for (int kk = 0; kk < p; ++kk) {
      const double a = static_cast<double>(arow[kk]);
      if (a == 0.0) continue;
      double* crow = acc.data() + static_cast<size_t>(kk) * n;
      for (int j = 0; j < n; ++j) crow[j] += a * static_cast<double>(brow[j]);
    }
  }
  for (int64_t i = 0; i < static_cast<int64_t>(p) * n; ++i)
    C[i] = accumulate ? static_cast<T>(static_cast<double>(C[i]) + acc[static_cast<size_t>(i)]) : static_cast<T>(acc[static_cast<size_t>(i)]);
}

}  // namespace detail

// ---------------------------------------------------------------------------
// Elementwise ops
// ---------------------------------------------------------------------------

template <class T, class FwdFn, class BwdFn>
TensorT<T> unary_op(const TensorT<T>& x, FwdFn fwd, BwdFn bwd) {
  const int64_t n = x.numel();
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* xp = x.ptr();
  for (int64_t i = 0; i < n; ++i) (*out)[static_cast<size_t>(i)] = fwd(xp[i]);
  TensorT<T> r(x.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    auto xd = x.data;
    r.tape = tp;
    r.node = tp->register_node({px}, n, [px, xd, n, bwd](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * bwd((*xd)[static_cast<size_t>(i)]);
    });
  }
  return r;
}

template <class T>
TensorT<T> relu(const TensorT<T>& x) {
  return unary_op(
      x, [](T v) { return v > T(0) ? v : T(0); }, [](T v) { return v > T(0) ? T(1) : T(0); });
}

namespace detail {
inline constexpr double kInvSqrt2 = 0.7071067811865475244;
inline constexpr double kInvSqrt2Pi = 0.3989422804014326779;
}  // namespace detail

template <class T>
TensorT<T> gelu(const TensorT<T>& x) {
  return unary_op(
      x,
      [](T v) {
        double d = static_cast<double>(v);
        return static_cast<T>(0.5 * d * (1.0 + std::erf(d * detail::kInvSqrt2)));
      },
      [](T v) {
        double d = static_cast<double>(v);
        return static_cast<T>(0.5 * (1.0 + std::erf(d * detail::kInvSqrt2)) +
                              d * detail::kInvSqrt2Pi * std::exp(-0.5 * d * d));
      });
}

template <class T>
TensorT<T> scale(const TensorT<T>& x, double c) {
  return unary_op(
      x, [c](T v) { return static_cast<T>(c * static_cast<double>(v)); },
      [c](T) { return static_cast<T>(c); });
}

template <class T>
TensorT<T> neg(const TensorT<T>& x) {
  return scale(x, -1.0);
}

template <class T, class Combine>
TensorT<T> binary_same_shape(const TensorT<T>& a, const TensorT<T>& b, Combine fwd, T da, T db, const char* name) {
  if (a.shape != b.shape)
    throw dimension_error(std::string(name) + ": shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const int64_t n = a.numel();
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  for (int64_t i = 0; i < n; ++i) (*out)[static_cast<size_t>(i)] = fwd(ap[i], bp[i]);
  TensorT<T> r(a.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&a, &b})) {
    int pa = a.node, pb = b.node;
    r.tape = tp;
    r.node = tp->register_node({pa, pb}, n, [pa, pb, n, da, db](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      if (pa >= 0) detail::axpy(t.grad_buffer(pa).data(), g.data(), da, n);
      if (pb >= 0) detail::axpy(t.grad_buffer(pb).data(), g.data(), db, n);
    });
  }
  return r;
}

template <class T>
TensorT<T> add(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_same_shape(
      a, b, [](T x, T y) { return x + y; }, T(1), T(1), "add");
}

template <class T>
TensorT<T> sub(const TensorT<T>& a, const TensorT<T>& b) {
  return binary_same_shape(
      a, b, [](T x, T y) { return x - y; }, T(1), T(-1), "sub");
}

template <class T>
TensorT<T> mul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.shape != b.shape)
    throw dimension_error("mul: shape mismatch " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  const int64_t n = a.numel();
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* ap = a.ptr();
  const T* bp = b.ptr();
  for (int64_t i = 0; i < n; ++i) (*out)[static_cast<size_t>(i)] = ap[i] * bp[i];
  TensorT<T> r(a.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    r.tape = tp;
    r.node = tp->register_node({pa, pb}, n, [pa, pb, ad, bd, n](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      if (pa >= 0) {
        std::vector<T>& ga = t.grad_buffer(pa);
        for (int64_t i = 0; i < n; ++i) ga[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*bd)[static_cast<size_t>(i)];
      }
      if (pb >= 0) {
        std::vector<T>& gb = t.grad_buffer(pb);
        for (int64_t i = 0; i < n; ++i) gb[static_cast<size_t>(i)] += g[static_cast<size_t>(i)] * (*ad)[static_cast<size_t>(i)];
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Shape ops
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> reshape(const TensorT<T>& x, std::vector<int> new_shape) {
  if (shape_numel(new_shape) != x.numel())
    throw dimension_error("reshape: cannot view " + shape_str(x.shape) + " as " + shape_str(new_shape));
  TensorT<T> r(std::move(new_shape), x.data);  // row-major order is preserved, data is shared
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    int64_t n = x.numel();
    r.tape = tp;
    r.node = tp->register_node({px}, n, [px, n](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      detail::axpy(t.grad_buffer(px).data(), g.data(), T(1), n);
    });
  }
  return r;
}

template <class T>
TensorT<T> permute(const TensorT<T>& x, const std::vector<int>& perm) {
  const int r = x.rank();
  if (static_cast<int>(perm.size()) != r) throw dimension_error("permute: rank mismatch");
  std::vector<int> seen(static_cast<size_t>(r), 0);
  for (int p : perm) {
    if (p < 0 || p >= r || seen[static_cast<size_t>(p)]++) throw dimension_error("permute: invalid permutation");
  }
  std::vector<int> out_shape(static_cast<size_t>(r));
  for (int i = 0; i < r; ++i) out_shape[static_cast<size_t>(i)] = x.shape[static_cast<size_t>(perm[static_cast<size_t>(i)])];

  std::vector<int64_t> in_strides(static_cast<size_t>(r), 1), out_strides(static_cast<size_t>(r), 1);
  for (int i = r - 2; i >= 0; --i) {
    in_strides[static_cast<size_t>(i)] = in_strides[static_cast<size_t>(i + 1)] * x.shape[static_cast<size_t>(i + 1)];
    out_strides[static_cast<size_t>(i)] = out_strides[static_cast<size_t>(i + 1)] * out_shape[static_cast<size_t>(i + 1)];
  }
  const int64_t n = x.numel();
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const T* xp = x.ptr();
  std::vector<int> idx(static_cast<size_t>(r), 0);
  for (int64_t o = 0; o < n; ++o) {
    int64_t src = 0;
    int64_t rem = o;
    for (int i = 0; i < r; ++i) {
      int64_t c = rem / out_strides[static_cast<size_t>(i)];
      rem %= out_strides[static_cast<size_t>(i)];
      src += c * in_strides[static_cast<size_t>(perm[static_cast<size_t>(i)])];
    }
    (*out)[static_cast<size_t>(o)] = xp[src];
  }
  TensorT<T> res(out_shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    auto in_str = in_strides;
    auto out_str = out_strides;
    auto pm = perm;
    res.tape = tp;
    res.node = tp->register_node({px}, n, [px, n, in_str, out_str, pm, r](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t o = 0; o < n; ++o) {
        int64_t src = 0;
        int64_t rem = o;
        for (int i = 0; i < r; ++i) {
          int64_t c = rem / out_str[static_cast<size_t>(i)];
          rem %= out_str[static_cast<size_t>(i)];
          src += c * in_str[static_cast<size_t>(pm[static_cast<size_t>(i)])];
        }
        gx[static_cast<size_t>(src)] += g[static_cast<size_t>(o)];
      }
    });
  }
  return res;
}

template <class T>
TensorT<T> concat(const std::vector<TensorT<T>>& xs, int axis) {
  if (xs.empty()) throw contract_error("concat: empty input list");
  const int r = xs[0].rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw dimension_error("concat: axis out of range");
  std::vector<int> out_shape = xs[0].shape;
  int total = 0;
  for (const auto& x : xs) {
    if (x.rank() != r) throw dimension_error("concat: rank mismatch");
    for (int i = 0; i < r; ++i)
      if (i != axis && x.shape[static_cast<size_t>(i)] != out_shape[static_cast<size_t>(i)])
        throw dimension_error("concat: shape mismatch on non-concat axis");
    total += x.shape[static_cast<size_t>(axis)];
  }
  out_shape[static_cast<size_t>(axis)] = total;

  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= out_shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= out_shape[static_cast<size_t>(i)];

  const int64_t n = shape_numel(out_shape);
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  int64_t off = 0;
  std::vector<int64_t> offsets;
  std::vector<int64_t> chunk;
  for (const auto& x : xs) {
    int64_t c = static_cast<int64_t>(x.shape[static_cast<size_t>(axis)]) * inner;
    offsets.push_back(off);
    chunk.push_back(c);
    for (int64_t o = 0; o < outer; ++o)
      std::copy_n(x.ptr() + o * c, c, out->data() + o * (static_cast<int64_t>(total) * inner) + off);
    off += c;
  }

  TensorT<T> res(out_shape, out);
  TapeT<T>* tp = nullptr;
  bool any_grad = false;
  std::vector<int> parents;
  for (const auto& x : xs) {
    parents.push_back(x.node);
    if (x.node >= 0 && x.tape) {
      if (tp && tp != x.tape) throw contract_error("concat: operands on different tapes");
      tp = x.tape;
      any_grad = true;
    }
  }
  if (tp && any_grad) {
    int64_t row = static_cast<int64_t>(total) * inner;
    res.tape = tp;
    res.node = tp->register_node(parents, n, [parents, offsets, chunk, outer, row](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      for (size_t xi = 0; xi < parents.size(); ++xi) {
        if (parents[xi] < 0) continue;
        std::vector<T>& gx = t.grad_buffer(parents[xi]);
        for (int64_t o = 0; o < outer; ++o) {
          const T* src = g.data() + o * row + offsets[xi];
          T* dst = gx.data() + o * chunk[xi];
          for (int64_t i = 0; i < chunk[xi]; ++i) dst[i] += src[i];
        }
      }
    });
  }
  return res;
}

template <class T>
TensorT<T> slice(const TensorT<T>& x, int axis, int start, int len) {
  const int r = x.rank();
  if (axis < 0) axis += r;
  if (axis < 0 || axis >= r) throw dimension_error("slice: axis out of range");
  const int extent = x.shape[static_cast<size_t>(axis)];
  if (start < 0 || len <= 0 || start + len > extent) throw dimension_error("slice: range out of bounds");
  std::vector<int> out_shape = x.shape;
  out_shape[static_cast<size_t>(axis)] = len;
  int64_t outer = 1, inner = 1;
  for (int i = 0; i < axis; ++i) outer *= x.shape[static_cast<size_t>(i)];
  for (int i = axis + 1; i < r; ++i) inner *= x.shape[static_cast<size_t>(i)];

  const int64_t n = shape_numel(out_shape);
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(n));
  const int64_t in_row = static_cast<int64_t>(extent) * inner;
  const int64_t out_row = static_cast<int64_t>(len) * inner;
  for (int64_t o = 0; o < outer; ++o)
    std::copy_n(x.ptr() + o * in_row + static_cast<int64_t>(start) * inner, out_row, out->data() + o * out_row);

  TensorT<T> res(out_shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    res.tape = tp;
    res.node = tp->register_node({px}, n, [px, outer, inner, in_row, out_row, start](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t o = 0; o < outer; ++o) {
        const T* src = g.data() + o * out_row;
        T* dst = gx.data() + o * in_row + static_cast<int64_t>(start) * inner;
        for (int64_t i = 0; i < out_row; ++i) dst[i] += src[i];
      }
    });
  }
  return res;
}

// ---------------------------------------------------------------------------
// Matrix products
// ---------------------------------------------------------------------------

template <class T>
TensorT<T> matmul(const TensorT<T>& a, const TensorT<T>& b) {
  if (a.rank() != 2 || b.rank() != 2)
    throw dimension_error("matmul: expected rank-2 operands, got " + shape_str(a.shape) + " and " + shape_str(b.shape));
  const int m = a.shape[0], k = a.shape[1], k2 = b.shape[0], n = b.shape[1];
  if (k != k2)
    throw dimension_error("matmul: inner extents differ, " + shape_str(a.shape) + " vs " + shape_str(b.shape));
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(m) * n);
  detail::gemm_nn(a.ptr(), b.ptr(), out->data(), m, k, n, false);
  TensorT<T> r({m, n}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    r.tape = tp;
    r.node = tp->register_node({pa, pb}, r.numel(), [pa, pb, ad, bd, m, k, n](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      if (pa >= 0) detail::gemm_nt(g.data(), bd->data(), t.grad_buffer(pa).data(), m, n, k, true);
      if (pb >= 0) detail::gemm_tn(ad->data(), g.data(), t.grad_buffer(pb).data(), m, k, n, true);
    });
  }
  return r;
}

// Batched matrix product with optional transposes: out_b = op(A_b) * op(B_b).
template <class T>
TensorT<T> bmm(const TensorT<T>& a, const TensorT<T>& b, bool trans_a = false, bool trans_b = false) {
  if (a.rank() != 3 || b.rank() != 3) throw dimension_error("bmm: expected rank-3 operands");
  if (trans_a && trans_b) throw dimension_error("bmm: double transpose is not supported");
  const int B = a.shape[0];
  if (b.shape[0] != B) throw dimension_error("bmm: batch extents differ");
  const int m = trans_a ? a.shape[2] : a.shape[1];
  const int k = trans_a ? a.shape[1] : a.shape[2];
  const int kb = trans_b ? b.shape[2] : b.shape[1];
  const int n = trans_b ? b.shape[1] : b.shape[2];
  if (k != kb) throw dimension_error("bmm: inner extents differ");

  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * m * n);
  const int64_t sa = static_cast<int64_t>(a.shape[1]) * a.shape[2];
  const int64_t sb = static_cast<int64_t>(b.shape[1]) * b.shape[2];
  const int64_t so = static_cast<int64_t>(m) * n;
  for (int i = 0; i < B; ++i) {
    const T* A = a.ptr() + i * sa;
    const T* Bm = b.ptr() + i * sb;
    T* C = out->data() + i * so;
    if (!trans_a && !trans_b) detail::gemm_nn(A, Bm, C, m, k, n, false);
    else if (!trans_a && trans_b) detail::gemm_nt(A, Bm, C, m, k, n, false);
    else detail::gemm_tn(A, Bm, C, a.shape[1], m, n, false);
  }
  TensorT<T> r({B, m, n}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&a, &b})) {
    int pa = a.node, pb = b.node;
    auto ad = a.data, bd = b.data;
    const int rows_a = a.shape[1];
    r.tape = tp;
    r.node = tp->register_node({pa, pb}, r.numel(),
                               [pa, pb, ad, bd, B, m, k, n, sa, sb, so, trans_a, trans_b, rows_a](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      for (int i = 0; i < B; ++i) {
        const T* G = g.data() + i * so;
        const T* A = ad->data() + i * sa;
        const T* Bm = bd->data() + i * sb;
        if (!trans_a && !trans_b) {
          if (pa >= 0) detail::gemm_nt(G, Bm, t.grad_buffer(pa).data() + i * sa, m, n, k, true);
          if (pb >= 0) detail::gemm_tn(A, G, t.grad_buffer(pb).data() + i * sb, m, k, n, true);
        } else if (!trans_a && trans_b) {
          // out = A * B^T with B stored [n x k]
          if (pa >= 0) detail::gemm_nn(G, Bm, t.grad_buffer(pa).data() + i * sa, m, n, k, true);
          if (pb >= 0) detail::gemm_tn(G, A, t.grad_buffer(pb).data() + i * sb, m, n, k, true);
        } else {
          // out = A^T * B with A stored [rows_a x m]
          if (pa >= 0) detail::gemm_nt(Bm, G, t.grad_buffer(pa).data() + i * sa, rows_a, n, m, true);
          if (pb >= 0) detail::gemm_nn(A, G, t.grad_buffer(pb).data() + i * sb, rows_a, m, n, true);
        }
      }
    });
  }
  return r;
}

// x[..., C] * W[C, N] flattened over leading axes.
template <class T>
TensorT<T> matmul_last(const TensorT<T>& x, const TensorT<T>& w) {
  if (x.rank() < 2) throw dimension_error("matmul_last: operand must have rank >= 2");
  const int c = x.shape.back();
  int64_t rows = x.numel() / c;
  TensorT<T> flat = reshape(x, {static_cast<int>(rows), c});
  TensorT<T> y = matmul(flat, w);
  std::vector<int> out_shape(x.shape.begin(), x.shape.end() - 1);
  out_shape.push_back(w.shape[1]);
  return reshape(y, out_shape);
}

// ---------------------------------------------------------------------------
// Broadcasts and reductions
// ---------------------------------------------------------------------------

// out[..., j] = x[..., j] + b[j]
template <class T>
TensorT<T> add_bias(const TensorT<T>& x, const TensorT<T>& b) {
  if (b.rank() != 1 || b.shape[0] != x.shape.back())
    throw dimension_error("add_bias: bias " + shape_str(b.shape) + " does not match " + shape_str(x.shape));
  const int c = b.shape[0];
  const int64_t rows = x.numel() / c;
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  const T* xp = x.ptr();
  const T* bp = b.ptr();
  for (int64_t irow = 0; irow < rows; ++irow)
    for (int j = 0; j < c; ++j) (*out)[static_cast<size_t>(irow * c + j)] = xp[irow * c + j] + bp[j];
  TensorT<T> r(x.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x, &b})) {
    int px = x.node, pb = b.node;
    r.tape = tp;
    r.node = tp->register_node({px, pb}, r.numel(), [px, pb, rows, c](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      if (px >= 0) detail::axpy(t.grad_buffer(px).data(), g.data(), T(1), rows * c);
      if (pb >= 0) {
        std::vector<T>& gb = t.grad_buffer(pb);
        for (int j = 0; j < c; ++j) {
          double acc = static_cast<double>(gb[static_cast<size_t>(j)]);
          for (int64_t irow = 0; irow < rows; ++irow) acc += static_cast<double>(g[static_cast<size_t>(irow * c + j)]);
          gb[static_cast<size_t>(j)] = static_cast<T>(acc);
        }
      }
    });
  }
  return r;
}

// out[..., j] = x[..., j] * s[j]
template <class T>
TensorT<T> mul_bias(const TensorT<T>& x, const TensorT<T>& s) {
  if (s.rank() != 1 || s.shape[0] != x.shape.back())
    throw dimension_error("mul_bias: scale " + shape_str(s.shape) + " does not match " + shape_str(x.shape));
  const int c = s.shape[0];
  const int64_t rows = x.numel() / c;
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  const T* xp = x.ptr();
  const T* sp = s.ptr();
  for (int64_t irow = 0; irow < rows; ++irow)
    for (int j = 0; j < c; ++j) (*out)[static_cast<size_t>(irow * c + j)] = xp[irow * c + j] * sp[j];
  TensorT<T> r(x.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x, &s})) {
    int px = x.node, ps = s.node;
    auto xd = x.data, sd = s.data;
    r.tape = tp;
    r.node = tp->register_node({px, ps}, r.numel(), [px, ps, xd, sd, rows, c](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      if (px >= 0) {
        std::vector<T>& gx = t.grad_buffer(px);
        for (int64_t irow = 0; irow < rows; ++irow)
          for (int j = 0; j < c; ++j)
            gx[static_cast<size_t>(irow * c + j)] += g[static_cast<size_t>(irow * c + j)] * (*sd)[static_cast<size_t>(j)];
      }
      if (ps >= 0) {
        std::vector<T>& gs = t.grad_buffer(ps);
        for (int j = 0; j < c; ++j) {
          double acc = static_cast<double>(gs[static_cast<size_t>(j)]);
          for (int64_t irow = 0; irow < rows; ++irow)
            acc += static_cast<double>(g[static_cast<size_t>(irow * c + j)]) *
                   static_cast<double>((*xd)[static_cast<size_t>(irow * c + j)]);
          gs[static_cast<size_t>(j)] = static_cast<T>(acc);
        }
      }
    });
  }
  return r;
}

// out[b, ...] = x[b, ...] + p[...]; broadcast over the leading axis.
template <class T>
TensorT<T> add_broadcast0(const TensorT<T>& x, const TensorT<T>& p) {
  if (x.rank() < 2) throw dimension_error("add_broadcast0: operand must have rank >= 2");
  std::vector<int> rest(x.shape.begin() + 1, x.shape.end());
  if (p.shape != rest)
    throw dimension_error("add_broadcast0: " + shape_str(p.shape) + " does not broadcast over " + shape_str(x.shape));
  const int B = x.shape[0];
  const int64_t inner = p.numel();
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  const T* xp = x.ptr();
  const T* pp = p.ptr();
  for (int b = 0; b < B; ++b)
    for (int64_t i = 0; i < inner; ++i) (*out)[static_cast<size_t>(b * inner + i)] = xp[b * inner + i] + pp[i];
  TensorT<T> r(x.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x, &p})) {
    int px = x.node, ppn = p.node;
    r.tape = tp;
    r.node = tp->register_node({px, ppn}, r.numel(), [px, ppn, B, inner](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      if (px >= 0) detail::axpy(t.grad_buffer(px).data(), g.data(), T(1), static_cast<int64_t>(B) * inner);
      if (ppn >= 0) {
        std::vector<T>& gp = t.grad_buffer(ppn);
        for (int64_t i = 0; i < inner; ++i) {
          double acc = static_cast<double>(gp[static_cast<size_t>(i)]);
          for (int b = 0; b < B; ++b) acc += static_cast<double>(g[static_cast<size_t>(b * inner + i)]);
          gp[static_cast<size_t>(i)] = static_cast<T>(acc);
        }
      }
    });
  }
  return r;
}

template <class T>
TensorT<T> sum_all(const TensorT<T>& x) {
  const int64_t n = x.numel();
  double acc = 0.0;
  const T* xp = x.ptr();
  for (int64_t i = 0; i < n; ++i) acc += static_cast<double>(xp[i]);
  auto out = std::make_shared<std::vector<T>>(1, static_cast<T>(acc));
  TensorT<T> r({1}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    r.tape = tp;
    r.node = tp->register_node({px}, 1, [px, n](TapeT<T>& t, int self) {
      const T g = t.grad(self)[0];
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t i = 0; i < n; ++i) gx[static_cast<size_t>(i)] += g;
    });
  }
  return r;
}

template <class T>
TensorT<T> mean_all(const TensorT<T>& x) {
  return scale(sum_all(x), 1.0 / static_cast<double>(x.numel()));
}

// Mean over axis 1 of a [B, Tk, C] tensor -> [B, C].
template <class T>
TensorT<T> mean_axis1(const TensorT<T>& x) {
  if (x.rank() != 3) throw dimension_error("mean_axis1: expected rank-3 input");
  const int B = x.shape[0], Tk = x.shape[1], C = x.shape[2];
  if (Tk == 0) throw contract_error("mean_axis1: zero tokens");
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * C);
  const T* xp = x.ptr();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c) {
      double acc = 0.0;
      for (int t = 0; t < Tk; ++t) acc += static_cast<double>(xp[(static_cast<int64_t>(b) * Tk + t) * C + c]);
      (*out)[static_cast<size_t>(b * C + c)] = static_cast<T>(acc / Tk);
    }
  TensorT<T> r({B, C}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    r.tape = tp;
    r.node = tp->register_node({px}, r.numel(), [px, B, Tk, C](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      const T inv = static_cast<T>(1.0 / Tk);
      for (int b = 0; b < B; ++b)
        for (int tt = 0; tt < Tk; ++tt)
          for (int c = 0; c < C; ++c)
            gx[static_cast<size_t>((static_cast<int64_t>(b) * Tk + tt) * C + c)] += g[static_cast<size_t>(b * C + c)] * inv;
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Normalization and activation over the last axis
// ---------------------------------------------------------------------------

// Tempered softmax over the last axis, computed with max subtraction.
template <class T>
TensorT<T> softmax(const TensorT<T>& x, double temperature = 1.0) {
  if (temperature <= 0.0) throw parameter_error("softmax: temperature must be positive");
  const int k = x.shape.back();
  const int64_t rows = x.numel() / k;
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  const T* xp = x.ptr();
  for (int64_t irow = 0; irow < rows; ++irow) {
    const T* row = xp + irow * k;
    double mx = -1e300;
    for (int j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(row[j]) / temperature);
    double denom = 0.0;
    for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>(row[j]) / temperature - mx);
    for (int j = 0; j < k; ++j)
      (*out)[static_cast<size_t>(irow * k + j)] = static_cast<T>(std::exp(static_cast<double>(row[j]) / temperature - mx) / denom);
  }
  TensorT<T> r(x.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    auto yd = r.data;
    r.tape = tp;
    r.node = tp->register_node({px}, r.numel(), [px, yd, rows, k, temperature](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t irow = 0; irow < rows; ++irow) {
        const T* y = yd->data() + irow * k;
        const T* gr = g.data() + irow * k;
        double dot = 0.0;
        for (int j = 0; j < k; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(y[j]);
        for (int j = 0; j < k; ++j)
          gx[static_cast<size_t>(irow * k + j)] +=
              static_cast<T>((static_cast<double>(gr[j]) - dot) * static_cast<double>(y[j]) / temperature);
      }
    });
  }
  return r;
}

// Layer normalization over the last axis. gamma/beta may be empty tensors for
// the parameter-free variant.
template <class T>
TensorT<T> layer_norm(const TensorT<T>& x, const TensorT<T>& gamma, const TensorT<T>& beta, double eps = 1e-5) {
  if (eps <= 0.0) throw parameter_error("layer_norm: eps must be positive");
  const int c = x.shape.back();
  const bool affine = gamma.data != nullptr;
  if (affine) {
    if (gamma.rank() != 1 || gamma.shape[0] != c || beta.rank() != 1 || beta.shape[0] != c)
      throw dimension_error("layer_norm: parameter extents do not match channel " + std::to_string(c));
  }
  const int64_t rows = x.numel() / c;
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  const T* xp = x.ptr();
  const T* gp = affine ? gamma.ptr() : nullptr;
  const T* bp = affine ? beta.ptr() : nullptr;
  auto row_stats = [c](const T* row, double& mean, double& rs, double eps_) {
    mean = 0.0;
    for (int j = 0; j < c; ++j) mean += static_cast<double>(row[j]);
    mean /= c;
    double var = 0.0;
    for (int j = 0; j < c; ++j) {
      const double d = static_cast<double>(row[j]) - mean;
      var += d * d;
    }
    rs = 1.0 / std::sqrt(var / c + eps_);
  };
  for (int64_t irow = 0; irow < rows; ++irow) {
    const T* row = xp + irow * c;
    double mean, rs;
    row_stats(row, mean, rs, eps);
    for (int j = 0; j < c; ++j) {
      const double h = (static_cast<double>(row[j]) - mean) * rs;
      (*out)[static_cast<size_t>(irow * c + j)] =
          affine ? static_cast<T>(h * static_cast<double>(gp[j]) + static_cast<double>(bp[j])) : static_cast<T>(h);
    }
  }
  TensorT<T> r(x.shape, out);
  TapeT<T>* tp = affine ? detail::common_tape<T>({&x, &gamma, &beta}) : detail::common_tape<T>({&x});
  if (tp) {
    int px = x.node;
    int pg = affine ? gamma.node : -1;
    int pb = affine ? beta.node : -1;
    auto gd = affine ? gamma.data : nullptr;
    auto xd = x.data;
    // statistics recomputed in double from the exact saved input; the row
    // reduction cancellation stays in double until the final store
    r.tape = tp;
    r.node = tp->register_node({px, pg, pb}, r.numel(),
                               [px, pg, pb, xd, gd, rows, c, eps, row_stats](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<double> h(static_cast<size_t>(c));
      for (int64_t irow = 0; irow < rows; ++irow) {
        const T* row = xd->data() + irow * c;
        const T* gr = g.data() + irow * c;
        double mean, rs;
        row_stats(row, mean, rs, eps);
        for (int j = 0; j < c; ++j) h[static_cast<size_t>(j)] = (static_cast<double>(row[j]) - mean) * rs;
        if (px >= 0) {
          std::vector<T>& gx = t.grad_buffer(px);
          double sum_gg = 0.0, sum_ggh = 0.0;
          for (int j = 0; j < c; ++j) {
            const double gg = static_cast<double>(gr[j]) * (gd ? static_cast<double>((*gd)[static_cast<size_t>(j)]) : 1.0);
            sum_gg += gg;
            sum_ggh += gg * h[static_cast<size_t>(j)];
          }
          sum_gg /= c;
          sum_ggh /= c;
          for (int j = 0; j < c; ++j) {
            const double gg = static_cast<double>(gr[j]) * (gd ? static_cast<double>((*gd)[static_cast<size_t>(j)]) : 1.0);
            gx[static_cast<size_t>(irow * c + j)] +=
                static_cast<T>((gg - sum_gg - h[static_cast<size_t>(j)] * sum_ggh) * rs);
          }
        }
        if (pg >= 0) {
          std::vector<T>& ggm = t.grad_buffer(pg);
          for (int j = 0; j < c; ++j)
            ggm[static_cast<size_t>(j)] += static_cast<T>(static_cast<double>(gr[j]) * h[static_cast<size_t>(j)]);
        }
        if (pb >= 0) {
          std::vector<T>& gbt = t.grad_buffer(pb);
          for (int j = 0; j < c; ++j) gbt[static_cast<size_t>(j)] += gr[j];
        }
      }
    });
  }
  return r;
}

template <class T>
TensorT<T> layer_norm_plain(const TensorT<T>& x, double eps = 1e-5) {
  return layer_norm(x, TensorT<T>{}, TensorT<T>{}, eps);
}

// Rows scaled to unit L2 norm; the norm is floored to avoid division blowups.
template <class T>
TensorT<T> l2_normalize_rows(const TensorT<T>& x, double eps = 1e-12) {
  const int c = x.shape.back();
  const int64_t rows = x.numel() / c;
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(x.numel()));
  auto norms = std::make_shared<std::vector<double>>(static_cast<size_t>(rows));
  const T* xp = x.ptr();
  for (int64_t irow = 0; irow < rows; ++irow) {
    double acc = 0.0;
    for (int j = 0; j < c; ++j) acc += static_cast<double>(xp[irow * c + j]) * static_cast<double>(xp[irow * c + j]);
    double nr = std::max(std::sqrt(acc), eps);
    (*norms)[static_cast<size_t>(irow)] = nr;
    for (int j = 0; j < c; ++j) (*out)[static_cast<size_t>(irow * c + j)] = static_cast<T>(static_cast<double>(xp[irow * c + j]) / nr);
  }
  TensorT<T> r(x.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    auto yd = r.data;
    r.tape = tp;
    r.node = tp->register_node({px}, r.numel(), [px, yd, norms, rows, c](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t irow = 0; irow < rows; ++irow) {
        const T* y = yd->data() + irow * c;
        const T* gr = g.data() + irow * c;
        double dot = 0.0;
        for (int j = 0; j < c; ++j) dot += static_cast<double>(gr[j]) * static_cast<double>(y[j]);
        const double nr = (*norms)[static_cast<size_t>(irow)];
        for (int j = 0; j < c; ++j)
          gx[static_cast<size_t>(irow * c + j)] += static_cast<T>((static_cast<double>(gr[j]) - dot * static_cast<double>(y[j])) / nr);
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Spatial ops
// ---------------------------------------------------------------------------

inline int conv_out_extent(int in, int k, int stride, int pad) {
  const int span = in + 2 * pad - k;
  if (span < 0) throw dimension_error("conv: kernel larger than padded input");
  return span / stride + 1;
}

// Cross-correlation on [B, C, H, W]; depthwise when groups == C.
template <class T>
TensorT<T> conv2d(const TensorT<T>& x, const TensorT<T>& w, const TensorT<T>& bias, int stride, int pad, int groups) {
  if (x.rank() != 4 || w.rank() != 4) throw dimension_error("conv2d: expected [B,C,H,W] input and [O,I,kh,kw] kernel");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int O = w.shape[0], I = w.shape[1], kh = w.shape[2], kw = w.shape[3];
  if (groups <= 0 || C % groups != 0 || O % groups != 0)
    throw dimension_error("conv2d: groups must divide channel extents");
  if (I != C / groups) throw dimension_error("conv2d: kernel input channels do not match C/groups");
  if (stride <= 0) throw parameter_error("conv2d: stride must be positive");
  const bool has_bias = bias.data != nullptr;
  if (has_bias && (bias.rank() != 1 || bias.shape[0] != O)) throw dimension_error("conv2d: bias extent mismatch");
  const int OH = conv_out_extent(H, kh, stride, pad);
  const int OW = conv_out_extent(W, kw, stride, pad);

  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * O * OH * OW);
  const T* xp = x.ptr();
  const T* wp = w.ptr();
  const T* bp = has_bias ? bias.ptr() : nullptr;
  const int cg = C / groups, og = O / groups;
  for (int b = 0; b < B; ++b)
    for (int oc = 0; oc < O; ++oc) {
      const int g = oc / og;
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = has_bias ? static_cast<double>(bp[oc]) : 0.0;
          for (int ic = 0; ic < cg; ++ic)
            for (int ky = 0; ky < kh; ++ky) {
              const int iy = oy * stride - pad + ky;
              if (iy < 0 || iy >= H) continue;
              for (int kx = 0; kx < kw; ++kx) {
                const int ix = ox * stride - pad + kx;
                if (ix < 0 || ix >= W) continue;
                acc += static_cast<double>(xp[((static_cast<int64_t>(b) * C + g * cg + ic) * H + iy) * W + ix]) *
                       static_cast<double>(wp[((static_cast<int64_t>(oc) * cg + ic) * kh + ky) * kw + kx]);
              }
            }
          (*out)[((static_cast<int64_t>(b) * O + oc) * OH + oy) * OW + ox] = static_cast<T>(acc);
        }
    }

  TensorT<T> r({B, O, OH, OW}, out);
  TapeT<T>* tp = has_bias ? detail::common_tape<T>({&x, &w, &bias}) : detail::common_tape<T>({&x, &w});
  if (tp) {
    int px = x.node, pw = w.node, pb = has_bias ? bias.node : -1;
    auto xd = x.data, wd = w.data;
    r.tape = tp;
    r.node = tp->register_node({px, pw, pb}, r.numel(),
                               [px, pw, pb, xd, wd, B, C, H, W, O, kh, kw, stride, pad, groups, OH, OW](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      const int cg = C / groups, og = O / groups;
      std::vector<double> wacc;
      if (pw >= 0) wacc.assign(static_cast<size_t>(O) * cg * kh * kw, 0.0);
      std::vector<double> bacc;
      if (pb >= 0) bacc.assign(static_cast<size_t>(O), 0.0);
      std::vector<double> xacc;
      if (px >= 0) xacc.assign(static_cast<size_t>(B) * C * H * W, 0.0);
      for (int b = 0; b < B; ++b)
        for (int oc = 0; oc < O; ++oc) {
          const int grp = oc / og;
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              const T go = g[((static_cast<int64_t>(b) * O + oc) * OH + oy) * OW + ox];
              if (go == T(0)) continue;
              if (pb >= 0) bacc[static_cast<size_t>(oc)] += static_cast<double>(go);
              for (int ic = 0; ic < cg; ++ic)
                for (int ky = 0; ky < kh; ++ky) {
                  const int iy = oy * stride - pad + ky;
                  if (iy < 0 || iy >= H) continue;
                  for (int kx = 0; kx < kw; ++kx) {
                    const int ix = ox * stride - pad + kx;
                    if (ix < 0 || ix >= W) continue;
                    const int64_t xi = ((static_cast<int64_t>(b) * C + grp * cg + ic) * H + iy) * W + ix;
                    const int64_t wi = ((static_cast<int64_t>(oc) * cg + ic) * kh + ky) * kw + kx;
                    if (px >= 0)
                      xacc[static_cast<size_t>(xi)] +=
                          static_cast<double>(go) * static_cast<double>((*wd)[static_cast<size_t>(wi)]);
                    if (pw >= 0)
                      wacc[static_cast<size_t>(wi)] +=
                          static_cast<double>(go) * static_cast<double>((*xd)[static_cast<size_t>(xi)]);
                  }
                }
            }
        }
      if (px >= 0) {
        std::vector<T>& gx = t.grad_buffer(px);
        for (size_t i = 0; i < xacc.size(); ++i) gx[i] += static_cast<T>(xacc[i]);
      }
      if (pw >= 0) {
        std::vector<T>& gw = t.grad_buffer(pw);
        for (size_t i = 0; i < wacc.size(); ++i) gw[i] += static_cast<T>(wacc[i]);
      }
      if (pb >= 0) {
        std::vector<T>& gb = t.grad_buffer(pb);
        for (int oc = 0; oc < O; ++oc) gb[static_cast<size_t>(oc)] += static_cast<T>(bacc[static_cast<size_t>(oc)]);
      }
    });
  }
  return r;
}

// Average pool over valid (in-bounds) taps, like count_include_pad=false.
template <class T>
TensorT<T> avg_pool2d(const TensorT<T>& x, int k, int stride, int pad) {
  if (x.rank() != 4) throw dimension_error("avg_pool2d: expected [B,C,H,W]");
  if (k <= 0 || stride <= 0) throw parameter_error("avg_pool2d: kernel and stride must be positive");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  const int OH = conv_out_extent(H, k, stride, pad);
  const int OW = conv_out_extent(W, k, stride, pad);
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * C * OH * OW);
  const T* xp = x.ptr();
  for (int b = 0; b < B; ++b)
    for (int c = 0; c < C; ++c)
      for (int oy = 0; oy < OH; ++oy)
        for (int ox = 0; ox < OW; ++ox) {
          double acc = 0.0;
          int cnt = 0;
          for (int ky = 0; ky < k; ++ky) {
            const int iy = oy * stride - pad + ky;
            if (iy < 0 || iy >= H) continue;
            for (int kx = 0; kx < k; ++kx) {
              const int ix = ox * stride - pad + kx;
              if (ix < 0 || ix >= W) continue;
              acc += static_cast<double>(xp[((static_cast<int64_t>(b) * C + c) * H + iy) * W + ix]);
              ++cnt;
            }
          }
          (*out)[((static_cast<int64_t>(b) * C + c) * OH + oy) * OW + ox] = static_cast<T>(acc / cnt);
        }
  TensorT<T> r({B, C, OH, OW}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    r.tape = tp;
    r.node = tp->register_node({px}, r.numel(), [px, B, C, H, W, k, stride, pad, OH, OW](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int b = 0; b < B; ++b)
        for (int c = 0; c < C; ++c)
          for (int oy = 0; oy < OH; ++oy)
            for (int ox = 0; ox < OW; ++ox) {
              int cnt = 0;
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix >= 0 && ix < W) ++cnt;
                }
              }
              const T go = g[((static_cast<int64_t>(b) * C + c) * OH + oy) * OW + ox];
              if (go == T(0)) continue;
              const T share = static_cast<T>(static_cast<double>(go) / cnt);
              for (int ky = 0; ky < k; ++ky) {
                const int iy = oy * stride - pad + ky;
                if (iy < 0 || iy >= H) continue;
                for (int kx = 0; kx < k; ++kx) {
                  const int ix = ox * stride - pad + kx;
                  if (ix < 0 || ix >= W) continue;
                  gx[((static_cast<int64_t>(b) * C + c) * H + iy) * W + ix] += share;
                }
              }
            }
    });
  }
  return r;
}

namespace detail {
struct BilinearTap {
  int64_t idx[4];
  double w[4];
};

inline void bilinear_taps(int H, int W, int OH, int OW, std::vector<BilinearTap>& taps) {
  taps.resize(static_cast<size_t>(OH) * OW);
  for (int oy = 0; oy < OH; ++oy)
    for (int ox = 0; ox < OW; ++ox) {
      // half-pixel centers (align_corners=false)
      double sy = (oy + 0.5) * static_cast<double>(H) / OH - 0.5;
      double sx = (ox + 0.5) * static_cast<double>(W) / OW - 0.5;
      int y0 = static_cast<int>(std::floor(sy));
      int x0 = static_cast<int>(std::floor(sx));
      double fy = sy - y0, fx = sx - x0;
      auto cl = [](int v, int hi) { return std::min(std::max(v, 0), hi - 1); };
      int y0c = cl(y0, H), y1c = cl(y0 + 1, H), x0c = cl(x0, W), x1c = cl(x0 + 1, W);
      BilinearTap& t = taps[static_cast<size_t>(oy) * OW + ox];
      t.idx[0] = static_cast<int64_t>(y0c) * W + x0c;
      t.idx[1] = static_cast<int64_t>(y0c) * W + x1c;
      t.idx[2] = static_cast<int64_t>(y1c) * W + x0c;
      t.idx[3] = static_cast<int64_t>(y1c) * W + x1c;
      t.w[0] = (1 - fy) * (1 - fx);
      t.w[1] = (1 - fy) * fx;
      t.w[2] = fy * (1 - fx);
      t.w[3] = fy * fx;
    }
}
}  // namespace detail

template <class T>
TensorT<T> resize_bilinear(const TensorT<T>& x, int OH, int OW) {
  if (x.rank() != 4) throw dimension_error("resize_bilinear: expected [B,C,H,W]");
  if (OH <= 0 || OW <= 0) throw parameter_error("resize_bilinear: target extents must be positive");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  std::vector<detail::BilinearTap> taps;
  detail::bilinear_taps(H, W, OH, OW, taps);
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * C * OH * OW);
  const T* xp = x.ptr();
  const int64_t in_plane = static_cast<int64_t>(H) * W;
  const int64_t out_plane = static_cast<int64_t>(OH) * OW;
  for (int64_t p = 0; p < static_cast<int64_t>(B) * C; ++p) {
    const T* src = xp + p * in_plane;
    T* dst = out->data() + p * out_plane;
    for (int64_t i = 0; i < out_plane; ++i) {
      const detail::BilinearTap& tap = taps[static_cast<size_t>(i)];
      double acc = 0.0;
      for (int j = 0; j < 4; ++j) acc += tap.w[j] * static_cast<double>(src[tap.idx[j]]);
      dst[i] = static_cast<T>(acc);
    }
  }
  TensorT<T> r({B, C, OH, OW}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int px = x.node;
    auto taps_sp = std::make_shared<std::vector<detail::BilinearTap>>(std::move(taps));
    r.tape = tp;
    r.node = tp->register_node({px}, r.numel(), [px, taps_sp, B, C, in_plane, out_plane](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(px);
      for (int64_t p = 0; p < static_cast<int64_t>(B) * C; ++p) {
        const T* go = g.data() + p * out_plane;
        T* dst = gx.data() + p * in_plane;
        for (int64_t i = 0; i < out_plane; ++i) {
          const detail::BilinearTap& tap = (*taps_sp)[static_cast<size_t>(i)];
          for (int j = 0; j < 4; ++j) dst[tap.idx[j]] += static_cast<T>(tap.w[j] * static_cast<double>(go[i]));
        }
      }
    });
  }
  return r;
}

// [B, C, H, W] -> [B, T, C*p*p] with T = (H/p)*(W/p); patches in raster order,
// flattened channel-major.
template <class T>
TensorT<T> extract_patches(const TensorT<T>& x, int p) {
  if (x.rank() != 4) throw dimension_error("extract_patches: expected [B,C,H,W]");
  const int B = x.shape[0], C = x.shape[1], H = x.shape[2], W = x.shape[3];
  if (p <= 0 || H % p != 0 || W % p != 0)
    throw dimension_error("extract_patches: spatial extents not divisible by patch size " + std::to_string(p));
  const int gh = H / p, gw = W / p, Tn = gh * gw, D = C * p * p;
  auto out = std::make_shared<std::vector<T>>(static_cast<size_t>(B) * Tn * D);
  const T* xp = x.ptr();
  for (int b = 0; b < B; ++b)
    for (int ty = 0; ty < gh; ++ty)
      for (int tx = 0; tx < gw; ++tx) {
        T* dst = out->data() + ((static_cast<int64_t>(b) * Tn) + ty * gw + tx) * D;
        int d = 0;
        for (int c = 0; c < C; ++c)
          for (int py = 0; py < p; ++py)
            for (int px_ = 0; px_ < p; ++px_)
              dst[d++] = xp[((static_cast<int64_t>(b) * C + c) * H + ty * p + py) * W + tx * p + px_];
      }
  TensorT<T> r({B, Tn, D}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&x})) {
    int pn = x.node;
    r.tape = tp;
    r.node = tp->register_node({pn}, r.numel(), [pn, B, C, H, W, p, gh, gw, Tn, D](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      std::vector<T>& gx = t.grad_buffer(pn);
      for (int b = 0; b < B; ++b)
        for (int ty = 0; ty < gh; ++ty)
          for (int tx = 0; tx < gw; ++tx) {
            const T* src = g.data() + ((static_cast<int64_t>(b) * Tn) + ty * gw + tx) * D;
            int d = 0;
            for (int c = 0; c < C; ++c)
              for (int py = 0; py < p; ++py)
                for (int px_ = 0; px_ < p; ++px_)
                  gx[((static_cast<int64_t>(b) * C + c) * H + ty * p + py) * W + tx * p + px_] += src[d++];
          }
    });
  }
  return r;
}

// Replace masked token rows with a learned token: out[b,t,:] = mask[b,t] ?
// mask_token : tokens[b,t,:]. Gradient routes to the surviving side.
template <class T>
TensorT<T> mask_tokens(const TensorT<T>& tokens, const std::vector<uint8_t>& mask, const TensorT<T>& mask_token) {
  if (tokens.rank() != 3) throw dimension_error("mask_tokens: expected [B,T,C]");
  const int B = tokens.shape[0], Tn = tokens.shape[1], C = tokens.shape[2];
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(B) * Tn)
    throw dimension_error("mask_tokens: mask length does not match [B,T]");
  if (mask_token.rank() != 1 || mask_token.shape[0] != C) throw dimension_error("mask_tokens: token width mismatch");
  auto out = std::make_shared<std::vector<T>>(tokens.data->begin(), tokens.data->end());
  const T* mt = mask_token.ptr();
  for (int64_t i = 0; i < static_cast<int64_t>(B) * Tn; ++i)
    if (mask[static_cast<size_t>(i)])
      for (int c = 0; c < C; ++c) (*out)[static_cast<size_t>(i * C + c)] = mt[c];
  TensorT<T> r(tokens.shape, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&tokens, &mask_token})) {
    int px = tokens.node, pm = mask_token.node;
    auto msk = std::make_shared<std::vector<uint8_t>>(mask);
    r.tape = tp;
    r.node = tp->register_node({px, pm}, r.numel(), [px, pm, msk, B, Tn, C](TapeT<T>& t, int self) {
      const std::vector<T>& g = t.grad(self);
      for (int64_t i = 0; i < static_cast<int64_t>(B) * Tn; ++i) {
        if ((*msk)[static_cast<size_t>(i)]) {
          if (pm >= 0) {
            std::vector<T>& gm = t.grad_buffer(pm);
            for (int c = 0; c < C; ++c) gm[static_cast<size_t>(c)] += g[static_cast<size_t>(i * C + c)];
          }
        } else if (px >= 0) {
          std::vector<T>& gx = t.grad_buffer(px);
          for (int c = 0; c < C; ++c) gx[static_cast<size_t>(i * C + c)] += g[static_cast<size_t>(i * C + c)];
        }
      }
    });
  }
  return r;
}

// ---------------------------------------------------------------------------
// Gradient check oracle
// ---------------------------------------------------------------------------

// Central-difference check against the analytic gradient from backward.
// Returns the worst relative error over coordinates, denominator
// max(|analytic|, |numeric|, 1e-8). The step is scaled per coordinate by
// max(1, |x_i|).
template <class T, class Fn>
double gradient_check(Fn f, const std::vector<T>& x, const std::vector<int>& shape, double h) {
  TapeT<T> tape;
  TensorT<T> leaf = tape.leaf(shape, x);
  TensorT<T> loss = f(tape, leaf);
  if (loss.numel() != 1) throw contract_error("gradient_check: function must produce a scalar");
  if (!std::isfinite(static_cast<double>(loss.scalar()))) throw numerical_error("gradient_check: non-finite value at x");
  tape.backward(loss);
  std::vector<T> analytic = tape.grad(leaf);
  if (analytic.empty()) analytic.assign(x.size(), T(0));

  auto eval = [&](const std::vector<T>& pt) -> double {
    TapeT<T> t2;
    TensorT<T> l2 = t2.leaf(shape, pt);
    TensorT<T> v = f(t2, l2);
    double d = static_cast<double>(v.scalar());
    if (!std::isfinite(d)) throw numerical_error("gradient_check: non-finite value during probing");
    return d;
  };

  double worst = 0.0;
  std::vector<T> pt = x;
  for (size_t i = 0; i < x.size(); ++i) {
    const double hi = h * std::max(1.0, std::fabs(static_cast<double>(x[i])));
    pt[i] = static_cast<T>(static_cast<double>(x[i]) + hi);
    const double fp = eval(pt);
    pt[i] = static_cast<T>(static_cast<double>(x[i]) - hi);
    const double fm = eval(pt);
    pt[i] = x[i];
    const double numeric = (fp - fm) / (2.0 * hi);
    const double a = static_cast<double>(analytic[i]);
    const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
    worst = std::max(worst, std::fabs(a - numeric) / denom);
  }
  return worst;
}

using Tensor = TensorT<float>;
using Tape = TapeT<float>;

}  // namespace hssl
