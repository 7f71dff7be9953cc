#pragma once

// Self-supervised loss kernels and teacher maintenance: clustering
// cross-entropy, InfoNCE with a memory bank, masked feature reconstruction,
// projection heads, EMA, and centering.

#include <deque>
#include <string>
#include <vector>

#include "hssl/arch.hpp"
#include "hssl/common.hpp"
#include "hssl/params.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

// -Σ p_i log q_i with the log clamped at 1e-12. Target rows carry no
// gradient; mean over rows when batched.
template <class T>
TensorT<T> clustering_loss(const TensorT<T>& p_target, const TensorT<T>& q_pred) {
  if (p_target.shape != q_pred.shape)
    throw dimension_error("clustering_loss: shape mismatch " + shape_str(p_target.shape) + " vs " + shape_str(q_pred.shape));
  detail::check_prob_rows(p_target, "clustering_loss target");
  detail::check_prob_rows(q_pred, "clustering_loss prediction");
  const int k = p_target.shape.back();
  const int64_t rows = p_target.numel() / k;
  const T* pp = p_target.ptr();
  const T* qp = q_pred.ptr();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) {
      double q = std::max(static_cast<double>(qp[r * k + j]), 1e-12);
      total -= static_cast<double>(pp[r * k + j]) * std::log(q);
    }
  auto out = std::make_shared<std::vector<T>>(1, static_cast<T>(total / rows));
  TensorT<T> res({1}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&q_pred})) {
    int pq = q_pred.node;
    auto pd = p_target.data;
    auto qd = q_pred.data;
    res.tape = tp;
    res.node = tp->register_node({pq}, 1, [pq, pd, qd, rows, k](TapeT<T>& t, int self) {
      const T g = t.grad(self)[0];
      std::vector<T>& gq = t.grad_buffer(pq);
      for (int64_t r = 0; r < rows; ++r)
        for (int j = 0; j < k; ++j) {
          double q = static_cast<double>((*qd)[static_cast<size_t>(r * k + j)]);
          if (q < 1e-12) continue;  // clamped region has zero slope
          gq[static_cast<size_t>(r * k + j)] -=
              static_cast<T>(static_cast<double>(g) * static_cast<double>((*pd)[static_cast<size_t>(r * k + j)]) / (q * rows));
        }
    });
  }
  return res;
}

// Numerically safe form used by the training path: -Σ p log softmax(l/τ),
// mean over rows. Equal in value to clustering_loss(p, softmax(l, τ)).
template <class T>
TensorT<T> cross_entropy_from_logits(const TensorT<T>& p_target, const TensorT<T>& logits, double tau) {
  if (tau <= 0.0) throw parameter_error("cross_entropy_from_logits: temperature must be positive");
  if (p_target.shape != logits.shape) throw dimension_error("cross_entropy_from_logits: shape mismatch");
  detail::check_prob_rows(p_target, "cross_entropy target");
  const int k = logits.shape.back();
  const int64_t rows = logits.numel() / k;
  const T* pp = p_target.ptr();
  const T* lp = logits.ptr();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double mx = -1e300;
    for (int j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>(lp[r * k + j]) / tau);
    double lse = 0.0;
    for (int j = 0; j < k; ++j) lse += std::exp(static_cast<double>(lp[r * k + j]) / tau - mx);
    lse = mx + std::log(lse);
    for (int j = 0; j < k; ++j)
      total += static_cast<double>(pp[r * k + j]) * (lse - static_cast<double>(lp[r * k + j]) / tau);
  }
  auto out = std::make_shared<std::vector<T>>(1, static_cast<T>(total / rows));
  TensorT<T> res({1}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&logits})) {
    int pl = logits.node;
    auto pd = p_target.data;
    auto ld = logits.data;
    res.tape = tp;
    res.node = tp->register_node({pl}, 1, [pl, pd, ld, rows, k, tau](TapeT<T>& t, int self) {
      const double g = static_cast<double>(t.grad(self)[0]);
      std::vector<T>& gl = t.grad_buffer(pl);
      for (int64_t r = 0; r < rows; ++r) {
        double mx = -1e300;
        for (int j = 0; j < k; ++j) mx = std::max(mx, static_cast<double>((*ld)[static_cast<size_t>(r * k + j)]) / tau);
        double denom = 0.0;
        for (int j = 0; j < k; ++j) denom += std::exp(static_cast<double>((*ld)[static_cast<size_t>(r * k + j)]) / tau - mx);
        for (int j = 0; j < k; ++j) {
          const double soft = std::exp(static_cast<double>((*ld)[static_cast<size_t>(r * k + j)]) / tau - mx) / denom;
          gl[static_cast<size_t>(r * k + j)] +=
              static_cast<T>(g * (soft - static_cast<double>((*pd)[static_cast<size_t>(r * k + j)])) / (tau * rows));
        }
      }
    });
  }
  return res;
}

// The two-term total loss on probability batches: the auxiliary head's
// teacher distribution supervises both the student base stream and the
// student head stream.
template <class T>
TensorT<T> hssl_total_loss(const TensorT<T>& z1_head, const TensorT<T>& z2_base, const TensorT<T>& z2_head) {
  return add(clustering_loss(z1_head, z2_base), clustering_loss(z1_head, z2_head));
}

// softmax((logits - center) / tau_t); value-only, never on a tape.
template <class T>
TensorT<T> teacher_distribution(const TensorT<T>& logits, const std::vector<T>& center, double tau_t) {
  if (tau_t <= 0.0) throw parameter_error("teacher_distribution: temperature must be positive");
  const int k = logits.shape.back();
  if (static_cast<int>(center.size()) != k) throw dimension_error("teacher_distribution: center extent mismatch");
  const int64_t rows = logits.numel() / k;
  auto shifted = std::make_shared<std::vector<T>>(static_cast<size_t>(logits.numel()));
  const T* lp = logits.ptr();
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j)
      (*shifted)[static_cast<size_t>(r * k + j)] = lp[r * k + j] - center[static_cast<size_t>(j)];
  TensorT<T> s(logits.shape, shifted);
  return softmax(s, tau_t);
}

// ---------------------------------------------------------------------------
// Memory bank (FIFO queue of unit-norm keys)
// ---------------------------------------------------------------------------

class MemoryBank {
 public:
  MemoryBank(int dim, int capacity) : dim_(dim), capacity_(capacity) {
    if (dim <= 0 || capacity <= 0) throw parameter_error("memory bank needs positive dim and capacity");
  }

  void push(const float* key) {
    double norm = 0.0;
    for (int i = 0; i < dim_; ++i) norm += static_cast<double>(key[i]) * key[i];
    norm = std::sqrt(norm);
    if (std::fabs(norm - 1.0) > 1e-5) throw contract_error("memory bank keys must be unit-norm");
    if (static_cast<int>(keys_.size()) < capacity_ * dim_) {
      keys_.insert(keys_.end(), key, key + dim_);
    } else {
      std::copy_n(key, dim_, keys_.begin() + static_cast<int64_t>(ptr_) * dim_);
    }
    ptr_ = (ptr_ + 1) % capacity_;
  }

  void push_rows(const Tensor& rows) {
    if (rows.shape.back() != dim_) throw dimension_error("memory bank: key width mismatch");
    const int64_t n = rows.numel() / dim_;
    for (int64_t i = 0; i < n; ++i) push(rows.ptr() + i * dim_);
  }

  int size() const { return static_cast<int>(keys_.size()) / dim_; }
  int dim() const { return dim_; }
  int capacity() const { return capacity_; }
  const std::vector<float>& flat() const { return keys_; }

  // Oldest-first view of the queue contents.
  std::vector<float> fifo_order() const {
    std::vector<float> out;
    const int n = size();
    out.reserve(static_cast<size_t>(n) * dim_);
    const int start = n < capacity_ ? 0 : ptr_;
    for (int i = 0; i < n; ++i) {
      const int idx = (start + i) % capacity_;
      out.insert(out.end(), keys_.begin() + static_cast<int64_t>(idx) * dim_,
                 keys_.begin() + static_cast<int64_t>(idx + 1) * dim_);
    }
    return out;
  }

 private:
  int dim_;
  int capacity_;
  int ptr_ = 0;
  std::vector<float> keys_;
};

// Per-row InfoNCE against a fixed set of negatives:
//   -log( exp(<q,k>/τ) / (exp(<q,k>/τ) + Σ_i exp(<q,n_i>/τ)) )
// mean over rows. Queries may carry gradient; keys and negatives do not.
template <class T>
TensorT<T> infonce_loss(const TensorT<T>& query, const TensorT<T>& key, const std::vector<T>& negatives, double tau) {
  if (tau <= 0.0) throw parameter_error("infonce_loss: temperature must be positive");
  if (query.shape != key.shape) throw dimension_error("infonce_loss: query/key shape mismatch");
  const int d = query.shape.back();
  const int64_t rows = query.numel() / d;
  if (negatives.empty() || negatives.size() % static_cast<size_t>(d) != 0)
    throw contract_error("infonce_loss: at least one negative of matching width is required");
  const int64_t Q = static_cast<int64_t>(negatives.size()) / d;

  const T* qp = query.ptr();
  const T* kp = key.ptr();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r) {
    double pos = 0.0;
    for (int j = 0; j < d; ++j) pos += static_cast<double>(qp[r * d + j]) * static_cast<double>(kp[r * d + j]);
    pos /= tau;
    double mx = pos;
    std::vector<double> sims(static_cast<size_t>(Q));
    for (int64_t i = 0; i < Q; ++i) {
      double s = 0.0;
      for (int j = 0; j < d; ++j)
        s += static_cast<double>(qp[r * d + j]) * static_cast<double>(negatives[static_cast<size_t>(i * d + j)]);
      sims[static_cast<size_t>(i)] = s / tau;
      mx = std::max(mx, sims[static_cast<size_t>(i)]);
    }
    double denom = std::exp(pos - mx);
    for (int64_t i = 0; i < Q; ++i) denom += std::exp(sims[static_cast<size_t>(i)] - mx);
    total += -(pos - mx) + std::log(denom);
  }
  auto out = std::make_shared<std::vector<T>>(1, static_cast<T>(total / rows));
  TensorT<T> res({1}, out);
  if (TapeT<T>* tp = detail::common_tape<T>({&query})) {
    int pq = query.node;
    auto qd = query.data;
    auto kd = key.data;
    auto negs = std::make_shared<std::vector<T>>(negatives);
    res.tape = tp;
    res.node = tp->register_node({pq}, 1, [pq, qd, kd, negs, rows, d, Q, tau](TapeT<T>& t, int self) {
      const double g = static_cast<double>(t.grad(self)[0]);
      std::vector<T>& gq = t.grad_buffer(pq);
      for (int64_t r = 0; r < rows; ++r) {
        double pos = 0.0;
        for (int j = 0; j < d; ++j)
          pos += static_cast<double>((*qd)[static_cast<size_t>(r * d + j)]) * static_cast<double>((*kd)[static_cast<size_t>(r * d + j)]);
        pos /= tau;
        double mx = pos;
        std::vector<double> sims(static_cast<size_t>(Q));
        for (int64_t i = 0; i < Q; ++i) {
          double s = 0.0;
          for (int j = 0; j < d; ++j)
            s += static_cast<double>((*qd)[static_cast<size_t>(r * d + j)]) * static_cast<double>((*negs)[static_cast<size_t>(i * d + j)]);
          sims[static_cast<size_t>(i)] = s / tau;
          mx = std::max(mx, sims[static_cast<size_t>(i)]);
        }
        double denom = std::exp(pos - mx);
        for (int64_t i = 0; i < Q; ++i) denom += std::exp(sims[static_cast<size_t>(i)] - mx);
        const double pi_pos = std::exp(pos - mx) / denom;
        // d/dq: (pi_pos - 1) * k / τ + Σ_i pi_i * n_i / τ
        const double coeff = g / (tau * rows);
        for (int j = 0; j < d; ++j)
          gq[static_cast<size_t>(r * d + j)] +=
              static_cast<T>(coeff * (pi_pos - 1.0) * static_cast<double>((*kd)[static_cast<size_t>(r * d + j)]));
        for (int64_t i = 0; i < Q; ++i) {
          const double pi = std::exp(sims[static_cast<size_t>(i)] - mx) / denom;
          for (int j = 0; j < d; ++j)
            gq[static_cast<size_t>(r * d + j)] +=
                static_cast<T>(coeff * pi * static_cast<double>((*negs)[static_cast<size_t>(i * d + j)]));
        }
      }
    });
  }
  return res;
}

// θ_t <- m θ_t + (1-m) θ_s, matched by parameter name.
inline void ema_update(ParamStore& teacher, const ParamStore& student, double m) {
  if (m < 0.0 || m > 1.0) throw parameter_error("ema_update: momentum must lie in [0,1]");
  if (teacher.size() != student.size()) throw contract_error("ema_update: parameter sets differ in size");
  for (size_t i = 0; i < teacher.size(); ++i) {
    Parameter& pt = teacher[i];
    const Parameter& ps = student[i];
    if (pt.name != ps.name || pt.shape != ps.shape)
      throw contract_error("ema_update: parameter mismatch at " + pt.name + " vs " + ps.name);
    float* t = pt.value->data();
    const float* s = ps.value->data();
    const int64_t n = pt.numel();
    for (int64_t j = 0; j < n; ++j)
      t[j] = static_cast<float>(m * static_cast<double>(t[j]) + (1.0 - m) * static_cast<double>(s[j]));
  }
}

// c <- λ c + (1-λ) mean(batch logits)
inline void center_update(std::vector<float>& center, const Tensor& batch_logits, double lambda) {
  if (lambda < 0.0 || lambda > 1.0) throw parameter_error("center_update: momentum must lie in [0,1]");
  const int k = batch_logits.shape.back();
  if (static_cast<int>(center.size()) != k) throw dimension_error("center_update: extent mismatch");
  const int64_t rows = batch_logits.numel() / k;
  if (rows == 0) throw contract_error("center_update: empty batch");
  const float* lp = batch_logits.ptr();
  for (int j = 0; j < k; ++j) {
    double mean = 0.0;
    for (int64_t r = 0; r < rows; ++r) mean += static_cast<double>(lp[r * k + j]);
    mean /= static_cast<double>(rows);
    center[static_cast<size_t>(j)] =
        static_cast<float>(lambda * static_cast<double>(center[static_cast<size_t>(j)]) + (1.0 - lambda) * mean);
  }
}

// MSE over masked token positions only, with both sides layer-normalized
// (parameter-free) per token before comparison. Targets carry no gradient.
template <class T>
TensorT<T> masked_reconstruction_loss(const TensorT<T>& pred, const TensorT<T>& target,
                                      const std::vector<uint8_t>& mask) {
  if (pred.rank() != 3 || target.rank() != 3) throw dimension_error("masked_reconstruction_loss: expected [B,T,C]");
  if (pred.shape != target.shape) throw dimension_error("masked_reconstruction_loss: shape mismatch");
  const int B = pred.shape[0], Tn = pred.shape[1], C = pred.shape[2];
  if (static_cast<int64_t>(mask.size()) != static_cast<int64_t>(B) * Tn)
    throw dimension_error("masked_reconstruction_loss: mask length mismatch");
  int64_t selected = 0;
  for (uint8_t v : mask) selected += v ? 1 : 0;
  if (selected == 0) throw contract_error("masked_reconstruction_loss: mask selects no tokens");

  TensorT<T> pn = layer_norm_plain(pred, 1e-5);
  TensorT<T> tn = layer_norm_plain(target, 1e-5);
  // diff restricted to masked rows; unmasked rows are zeroed with no grad path
  auto weights = std::make_shared<std::vector<T>>(static_cast<size_t>(pred.numel()), T(0));
  for (int64_t i = 0; i < static_cast<int64_t>(B) * Tn; ++i)
    if (mask[static_cast<size_t>(i)])
      for (int c = 0; c < C; ++c) (*weights)[static_cast<size_t>(i * C + c)] = T(1);
  TensorT<T> w(pred.shape, weights);
  TensorT<T> diff = mul(sub(pn, tn), w);
  TensorT<T> sq = mul(diff, diff);
  return scale(sum_all(sq), 1.0 / (static_cast<double>(selected) * C));
}

// ---------------------------------------------------------------------------
// Projection head: 3-layer MLP, hidden width h, weight-normalized final layer
// ---------------------------------------------------------------------------

class ProjectionHead {
 public:
  ProjectionHead() = default;
  ProjectionHead(ParamStore& ps, const std::string& prefix, int in_dim, int hidden, int out_dim, uint64_t seed) {
    if (out_dim <= 0 || hidden <= 0) throw config_error("projection head needs positive widths");
    Rng rng(derive_seed(seed, {0x70726f6a}));
    fc1_ = LinearLayer::create(ps, prefix + ".fc1", in_dim, hidden, rng);
    fc2_ = LinearLayer::create(ps, prefix + ".fc2", hidden, hidden, rng);
    last_v_ = &ps.create(prefix + ".last.v", {hidden, out_dim});
    init_trunc_normal(*last_v_, rng);
    last_g_ = &ps.create(prefix + ".last.g", {out_dim});
    init_constant(*last_g_, 1.0f);
    out_dim_ = out_dim;
  }

  // [B, in] -> logits [B, K]. The bottleneck is L2-normalized and the final
  // layer weight-normalized, so logits start as cosine similarities in
  // [-1, 1] — the scale the sharpening temperatures assume; the trainable
  // gain lets the spread grow as clusters form.
  Tensor forward(Tape* tape, const Tensor& x) const {
    Tensor h = gelu(fc1_.forward(tape, x));
    h = fc2_.forward(tape, h);
    h = l2_normalize_rows(h);
    Tensor v = param_leaf(tape, *last_v_);
    Tensor vt = permute(v, {1, 0});
    Tensor vn = l2_normalize_rows(vt);
    Tensor w = permute(vn, {1, 0});
    Tensor cos = matmul(h, w);
    return mul_bias(cos, param_leaf(tape, *last_g_));
  }

  int out_dim() const { return out_dim_; }
  bool valid() const { return last_v_ != nullptr; }

 private:
  LinearLayer fc1_, fc2_;
  Parameter* last_v_ = nullptr;
  Parameter* last_g_ = nullptr;
  int out_dim_ = 0;
};

}  // namespace hssl
