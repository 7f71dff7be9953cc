#pragma once

// Shared helpers for the test suites: random data, the per-op gradient-check
// sweep (used by the unit tests and the acceptance gate), and tiny configs.

#include <unistd.h>

#include <filesystem>
#include <functional>
#include <string>
#include <vector>

#include "hssl/arch.hpp"
#include "hssl/common.hpp"
#include "hssl/engine.hpp"
#include "hssl/objectives.hpp"
#include "hssl/tensor.hpp"

namespace testsupport {

template <class T>
std::vector<T> rand_vec(hssl::Rng& rng, size_t n, double lo = -1.0, double hi = 1.0) {
  std::vector<T> out(n);
  for (auto& v : out) v = static_cast<T>(rng.uniform(lo, hi));
  return out;
}

template <class T>
std::vector<T> rand_prob_row(hssl::Rng& rng, int k) {
  std::vector<T> out(static_cast<size_t>(k));
  double total = 0.0;
  for (auto& v : out) {
    double e = rng.uniform(0.05, 1.0);
    v = static_cast<T>(e);
    total += e;
  }
  for (auto& v : out) v = static_cast<T>(static_cast<double>(v) / total);
  // renormalize exactly in the storage type
  double s2 = 0.0;
  for (auto& v : out) s2 += static_cast<double>(v);
  out[0] = static_cast<T>(static_cast<double>(out[0]) + (1.0 - s2));
  return out;
}

// One gradient-check instance description.
template <class T>
struct OpCheck {
  std::string name;
  std::vector<int> shape;
  std::function<hssl::TensorT<T>(hssl::TapeT<T>&, const hssl::TensorT<T>&)> fn;
  double lo = -1.0, hi = 1.0;
};

// Every registered tape operation, exercised through a scalar readout with
// the check variable in each distinct input slot.
template <class T>
std::vector<OpCheck<T>> op_checks(uint64_t seed) {
  using namespace hssl;
  using TT = TensorT<T>;
  std::vector<OpCheck<T>> checks;
  Rng rng(seed);

  // constants pass through float so the float and double instantiations of a
  // check see bit-identical values
  auto constant = [&](std::vector<int> shape, double lo = -1.0, double hi = 1.0) {
    std::vector<T> vals(static_cast<size_t>(shape_numel(shape)));
    for (auto& v : vals) v = static_cast<T>(static_cast<float>(rng.uniform(lo, hi)));
    return make_tensor<T>(shape, vals);
  };

  checks.push_back({"add", {3, 4}, [c = constant({3, 4})](TapeT<T>& t, const TT& x) {
                      (void)t;
                      return sum_all(add(x, c));
                    }});
  checks.push_back({"sub", {3, 4}, [c = constant({3, 4})](TapeT<T>&, const TT& x) { return sum_all(sub(c, x)); }});
  checks.push_back({"mul", {3, 4}, [c = constant({3, 4})](TapeT<T>&, const TT& x) { return sum_all(mul(x, c)); }});
  checks.push_back({"scale", {2, 5}, [](TapeT<T>&, const TT& x) { return sum_all(scale(x, -2.5)); }});
  checks.push_back({"relu", {4, 4}, [](TapeT<T>&, const TT& x) { return sum_all(relu(x)); }, 0.15, 1.0});
  checks.push_back({"gelu", {4, 4}, [](TapeT<T>&, const TT& x) { return sum_all(gelu(x)); }});
  checks.push_back({"reshape", {2, 6}, [](TapeT<T>&, const TT& x) { return sum_all(mul(reshape(x, {3, 4}), reshape(x, {3, 4}))); }});
  checks.push_back({"permute", {2, 3, 4}, [c = constant({4, 3, 2})](TapeT<T>&, const TT& x) {
                      return sum_all(mul(permute(x, {2, 1, 0}), c));
                    }});
  checks.push_back({"concat", {2, 3}, [c = constant({2, 2})](TapeT<T>&, const TT& x) {
                      auto cat = concat<T>({x, c}, 1);
                      return sum_all(mul(cat, cat));
                    }});
  checks.push_back({"slice", {3, 5}, [](TapeT<T>&, const TT& x) {
                      auto s = slice(x, 1, 1, 3);
                      return sum_all(mul(s, s));
                    }});
  checks.push_back({"matmul_lhs", {3, 4}, [c = constant({4, 2})](TapeT<T>&, const TT& x) {
                      auto y = matmul(x, c);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"matmul_rhs", {4, 2}, [c = constant({3, 4})](TapeT<T>&, const TT& x) {
                      auto y = matmul(c, x);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"bmm_nn", {2, 3, 4}, [c = constant({2, 4, 2})](TapeT<T>&, const TT& x) {
                      auto y = bmm(x, c);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"bmm_nt", {2, 3, 4}, [c = constant({2, 5, 4})](TapeT<T>&, const TT& x) {
                      auto y = bmm(x, c, false, true);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"bmm_nt_rhs", {2, 5, 4}, [c = constant({2, 3, 4})](TapeT<T>&, const TT& x) {
                      auto y = bmm(c, x, false, true);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"bmm_tn", {2, 4, 3}, [c = constant({2, 4, 2})](TapeT<T>&, const TT& x) {
                      auto y = bmm(x, c, true, false);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"bmm_tn_rhs", {2, 4, 2}, [c = constant({2, 4, 3})](TapeT<T>&, const TT& x) {
                      auto y = bmm(c, x, true, false);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"add_bias_x", {3, 4}, [c = constant({4})](TapeT<T>&, const TT& x) {
                      auto y = add_bias(x, c);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"add_bias_b", {4}, [c = constant({3, 4})](TapeT<T>&, const TT& x) {
                      auto y = add_bias(c, x);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"mul_bias_x", {3, 4}, [c = constant({4}, 0.5, 1.5)](TapeT<T>&, const TT& x) {
                      auto y = mul_bias(x, c);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"mul_bias_s", {4}, [c = constant({3, 4})](TapeT<T>&, const TT& x) {
                      auto y = mul_bias(c, x);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"add_broadcast0", {4, 3}, [c = constant({2, 4, 3})](TapeT<T>&, const TT& x) {
                      auto y = add_broadcast0(c, x);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"mean_axis1", {2, 4, 3}, [](TapeT<T>&, const TT& x) {
                      auto y = mean_axis1(x);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"softmax", {3, 5}, [c = constant({3, 5})](TapeT<T>&, const TT& x) {
                      return sum_all(mul(softmax(x, 0.7), c));
                    }});
  checks.push_back({"layer_norm_x", {3, 6}, [g = constant({6}, 0.5, 1.5), b = constant({6})](TapeT<T>&, const TT& x) {
                      auto y = layer_norm(x, g, b, 1e-5);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"layer_norm_gamma", {6}, [c = constant({3, 6}), b = constant({6})](TapeT<T>&, const TT& x) {
                      auto y = layer_norm(c, x, b, 1e-5);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"layer_norm_beta", {6}, [c = constant({3, 6}), g = constant({6}, 0.5, 1.5)](TapeT<T>&, const TT& x) {
                      auto y = layer_norm(c, g, x, 1e-5);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"l2_normalize_rows", {3, 5}, [c = constant({3, 5})](TapeT<T>&, const TT& x) {
                      return sum_all(mul(l2_normalize_rows(x), c));
                    },
                    0.3, 1.0});
  checks.push_back({"conv2d_x", {1, 2, 5, 5}, [w = constant({4, 2, 3, 3}), b = constant({4})](TapeT<T>&, const TT& x) {
                      auto y = conv2d(x, w, b, 1, 1, 1);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"conv2d_w", {4, 2, 3, 3}, [c = constant({1, 2, 5, 5}), b = constant({4})](TapeT<T>&, const TT& x) {
                      auto y = conv2d(c, x, b, 1, 1, 1);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"conv2d_bias", {4}, [c = constant({1, 2, 5, 5}), w = constant({4, 2, 3, 3})](TapeT<T>&, const TT& x) {
                      auto y = conv2d(c, w, x, 1, 1, 1);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"conv2d_depthwise", {1, 3, 4, 4}, [w = constant({3, 1, 3, 3})](TapeT<T>&, const TT& x) {
                      auto y = conv2d(x, w, TT{}, 1, 1, 3);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"conv2d_stride2", {1, 2, 8, 8}, [w = constant({2, 2, 3, 3})](TapeT<T>&, const TT& x) {
                      auto y = conv2d(x, w, TT{}, 2, 1, 1);
                      return sum_all(mul(y, y));
                    }});
  checks.push_back({"avg_pool2d", {1, 2, 5, 5}, [c = constant({1, 2, 5, 5})](TapeT<T>&, const TT& x) {
                      return sum_all(mul(avg_pool2d(x, 3, 1, 1), c));
                    }});
  checks.push_back({"resize_bilinear", {1, 2, 4, 4}, [c = constant({1, 2, 6, 6})](TapeT<T>&, const TT& x) {
                      return sum_all(mul(resize_bilinear(x, 6, 6), c));
                    }});
  checks.push_back({"extract_patches", {1, 3, 4, 4}, [](TapeT<T>&, const TT& x) {
                      auto y = extract_patches(x, 2);
                      return sum_all(mul(y, y));
                    }});
  {
    std::vector<uint8_t> mask = {1, 0, 0, 1, 0, 1};
    checks.push_back({"mask_tokens_x", {2, 3, 4}, [mask, m = constant({4})](TapeT<T>&, const TT& x) {
                        auto y = mask_tokens(x, mask, m);
                        return sum_all(mul(y, y));
                      }});
    checks.push_back({"mask_tokens_token", {4}, [mask, c = constant({2, 3, 4})](TapeT<T>&, const TT& x) {
                        auto y = mask_tokens(c, mask, x);
                        return sum_all(mul(y, y));
                      }});
  }
  {
    std::vector<T> pr = rand_prob_row<T>(rng, 5);
    std::vector<T> p2 = rand_prob_row<T>(rng, 5);
    TT p = make_tensor<T>({1, 5}, pr);
    TT p2t = make_tensor<T>({1, 5}, p2);
    checks.push_back({"cross_entropy_from_logits", {1, 5},
                      [p](TapeT<T>&, const TT& x) { return cross_entropy_from_logits(p, x, 0.5); }});
    checks.push_back({"clustering_loss_q", {1, 5}, [p](TapeT<T>&, const TT& x) {
                        // map free values onto the simplex before the loss
                        return clustering_loss(p, softmax(x, 1.0));
                      }});
    (void)p2t;
  }
  {
    TT key = make_tensor<T>({2, 4}, rand_vec<T>(rng, 8));
    std::vector<T> negs = rand_vec<T>(rng, 12);
    checks.push_back({"infonce_query", {2, 4}, [key, negs](TapeT<T>&, const TT& x) {
                        return infonce_loss(l2_normalize_rows(x), l2_normalize_rows(key), negs, 0.5);
                      },
                      0.2, 1.0});
  }
  {
    std::vector<uint8_t> mask = {1, 0, 1, 1, 0, 0};
    TT target = make_tensor<T>({2, 3, 4}, rand_vec<T>(rng, 24));
    checks.push_back({"masked_reconstruction_pred", {2, 3, 4}, [mask, target](TapeT<T>&, const TT& x) {
                        return masked_reconstruction_loss(x, target, mask);
                      }});
  }
  return checks;
}

// Worst relative error over `instances` random draws of one op check.
template <class T>
double run_op_check(const OpCheck<T>& chk, int instances, double h, uint64_t seed) {
  double worst = 0.0;
  for (int i = 0; i < instances; ++i) {
    hssl::Rng rng(hssl::derive_seed(seed, {static_cast<uint64_t>(i), 0x6f70}));
    std::vector<T> x(static_cast<size_t>(hssl::shape_numel(chk.shape)));
    for (auto& v : x) {
      double m = rng.uniform(std::fabs(chk.lo), std::fabs(chk.hi));
      v = static_cast<T>(chk.lo < 0.0 && rng.bernoulli(0.5) ? -m : m);
    }
    worst = std::max(worst, hssl::gradient_check<T>(chk.fn, x, chk.shape, h));
  }
  return worst;
}

// Single-precision analytic gradient against a double-evaluated central
// difference of the same function: the oracle side carries no float rounding,
// so the check isolates the float backward rules.
inline double run_op_check_mixed(const OpCheck<float>& low, const OpCheck<double>& ref, int instances,
                                 uint64_t seed, double h = 1e-5) {
  double worst = 0.0;
  const auto& shape = low.shape;
  const size_t n = static_cast<size_t>(hssl::shape_numel(shape));
  for (int i = 0; i < instances; ++i) {
    hssl::Rng rng(hssl::derive_seed(seed, {static_cast<uint64_t>(i), 0x6f70}));
    std::vector<float> xf(n);
    for (auto& v : xf) {
      double m = rng.uniform(std::fabs(low.lo), std::fabs(low.hi));
      v = static_cast<float>(low.lo < 0.0 && rng.bernoulli(0.5) ? -m : m);
    }
    std::vector<double> xd(xf.begin(), xf.end());  // exact

    hssl::TapeT<float> tape;
    hssl::TensorT<float> leaf = tape.leaf(shape, xf);
    hssl::TensorT<float> loss = low.fn(tape, leaf);
    tape.backward(loss);
    std::vector<float> analytic = tape.grad(leaf);
    if (analytic.empty()) analytic.assign(n, 0.0f);

    auto eval_ref = [&](const std::vector<double>& pt) {
      hssl::TapeT<double> t2;
      hssl::TensorT<double> l2 = t2.leaf(shape, pt);
      return ref.fn(t2, l2).scalar();
    };
    std::vector<double> pt = xd;
    for (size_t j = 0; j < n; ++j) {
      const double hj = h * std::max(1.0, std::fabs(xd[j]));
      pt[j] = xd[j] + hj;
      const double fp = eval_ref(pt);
      pt[j] = xd[j] - hj;
      const double fm = eval_ref(pt);
      pt[j] = xd[j];
      const double numeric = (fp - fm) / (2.0 * hj);
      const double a = static_cast<double>(analytic[j]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

// Gradient check through one mixer block composed with a scalar readout: the
// float block's analytic gradient against central differences of an exact
// double twin (same parameter values).
inline double block_gradient_check(hssl::MixerKind kind, bool keep_shortcut, int instances, uint64_t seed) {
  using namespace hssl;
  double worst = 0.0;
  const std::vector<int> shape = {2, 16, 16};
  for (int i = 0; i < instances; ++i) {
    const uint64_t pseed = derive_seed(seed, {static_cast<uint64_t>(i), 0x626c6b});
    BlockSpec spec{kind, 16, 2.0, keep_shortcut};
    ParamStoreT<float> psf;
    Rng prng_f(pseed);
    BlockT<float> blk_f(psf, "blk", spec, 2, prng_f);
    blk_f.set_token_count(16);
    ParamStoreT<double> psd;
    Rng prng_d(pseed);
    BlockT<double> blk_d(psd, "blk", spec, 2, prng_d);
    blk_d.set_token_count(16);
    copy_store_values(psd, psf);

    Rng xrng(derive_seed(seed, {static_cast<uint64_t>(i), 0x78}));
    std::vector<float> xf = rand_vec<float>(xrng, 2 * 16 * 16);
    std::vector<float> rf = rand_vec<float>(xrng, 2 * 16 * 16);
    std::vector<double> xd(xf.begin(), xf.end());
    TensorT<float> read_f = make_tensor<float>(shape, rf);
    TensorT<double> read_d = make_tensor<double>(shape, std::vector<double>(rf.begin(), rf.end()));

    TapeT<float> tape;
    TensorT<float> leaf = tape.leaf(shape, xf);
    TensorT<float> loss = sum_all(mul(blk_f.forward(&tape, leaf, false), read_f));
    tape.backward(loss);
    std::vector<float> analytic = tape.grad(leaf);

    auto eval_ref = [&](const std::vector<double>& pt) {
      TapeT<double> t2;
      TensorT<double> l2 = t2.leaf(shape, pt);
      return sum_all(mul(blk_d.forward(&t2, l2, false), read_d)).scalar();
    };
    // small step: double precision tolerates it, and it keeps probes from
    // straddling ReLU kinks inside conv stacks
    std::vector<double> pt = xd;
    for (size_t j = 0; j < xd.size(); ++j) {
      const double hj = 1e-6 * std::max(1.0, std::fabs(xd[j]));
      pt[j] = xd[j] + hj;
      const double fp = eval_ref(pt);
      pt[j] = xd[j] - hj;
      const double fm = eval_ref(pt);
      pt[j] = xd[j];
      const double numeric = (fp - fm) / (2.0 * hj);
      const double a = static_cast<double>(analytic[j]);
      const double denom = std::max({std::fabs(a), std::fabs(numeric), 1e-8});
      worst = std::max(worst, std::fabs(a - numeric) / denom);
    }
  }
  return worst;
}

// Zero every residual-branch output parameter (mixer exits and MLP second
// linear) under the prefix, turning kept-shortcut blocks into identity maps.
inline void zero_residual_branches(hssl::ParamStore& ps, const std::string& prefix = "") {
  auto ends_with = [](const std::string& s, const std::string& suf) {
    return s.size() >= suf.size() && s.compare(s.size() - suf.size(), suf.size(), suf) == 0;
  };
  static const char* suffixes[] = {".attn.out.w", ".attn.out.b", ".dw.w",      ".dw.b",
                                   ".token.w",    ".token.b",    ".conv2.w",   ".conv2.b",
                                   ".mlp.fc2.w",  ".mlp.fc2.b"};
  for (size_t i = 0; i < ps.size(); ++i) {
    hssl::Parameter& p = ps[i];
    if (!prefix.empty() && p.name.rfind(prefix, 0) != 0) continue;
    for (const char* suf : suffixes)
      if (ends_with(p.name, suf)) std::fill(p.value->begin(), p.value->end(), 0.0f);
  }
}

inline std::string temp_dir(const std::string& tag) {
  namespace fs = std::filesystem;
  fs::path p = fs::temp_directory_path() / ("hssl_test_" + tag + "_" + std::to_string(::getpid()));
  fs::create_directories(p);
  return p.string();
}

}  // namespace testsupport
