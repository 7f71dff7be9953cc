#pragma once

// Measurement kernels: KL model discrepancy, complementarity set metrics
// (N_s, sIoU), and argmax head selection.

#include <algorithm>
#include <set>
#include <string>
#include <vector>

#include "hssl/common.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

// KL(p_base || p_head) in nats, with both log operands clamped at 1e-12.
template <class T>
double kl_discrepancy(const TensorT<T>& p_base, const TensorT<T>& p_head) {
  if (p_base.shape != p_head.shape) throw dimension_error("kl_discrepancy: shape mismatch");
  detail::check_prob_rows(p_base, "kl_discrepancy base");
  detail::check_prob_rows(p_head, "kl_discrepancy head");
  const int k = p_base.shape.back();
  const int64_t rows = p_base.numel() / k;
  const T* bp = p_base.ptr();
  const T* hp = p_head.ptr();
  double total = 0.0;
  for (int64_t r = 0; r < rows; ++r)
    for (int j = 0; j < k; ++j) {
      const double p = static_cast<double>(bp[r * k + j]);
      if (p <= 0.0) continue;
      const double ph = std::max(static_cast<double>(hp[r * k + j]), 1e-12);
      total += p * std::log(std::max(p, 1e-12) / ph);
    }
  return total / static_cast<double>(rows);
}

inline double kl_discrepancy_vec(const std::vector<float>& p_base, const std::vector<float>& p_head) {
  const int k = static_cast<int>(p_base.size());
  Tensor b({k}, std::make_shared<std::vector<float>>(p_base));
  Tensor h({k}, std::make_shared<std::vector<float>>(p_head));
  return kl_discrepancy(b, h);
}

// ---------------------------------------------------------------------------
// Complementarity sets
// ---------------------------------------------------------------------------

// B1: samples solved by the baseline-pretrained base model; B2: solved by the
// HSSL base model; H: solved by the HSSL auxiliary head; U: all sample ids.
struct SolvedSets {
  std::set<int> universe;
  std::set<int> baseline_base;  // B1
  std::set<int> hssl_base;      // B2
  std::set<int> hssl_head;      // H
  std::string solver = "knn";

  void validate() const {
    auto inside = [&](const std::set<int>& s, const char* name) {
      for (int v : s)
        if (!universe.count(v))
          throw contract_error(std::string("SolvedSets: id ") + std::to_string(v) + " in " + name +
                               " lies outside the universe");
    };
    inside(baseline_base, "B1");
    inside(hssl_base, "B2");
    inside(hssl_head, "H");
  }
};

// N_s = |H ∩ (U - B1)|
inline int count_newly_solved(const SolvedSets& sets) {
  sets.validate();
  int n = 0;
  for (int v : sets.hssl_head)
    if (!sets.baseline_base.count(v)) ++n;
  return n;
}

// sIoU = |B2 ∩ (U-B1) ∩ H ∩ (U-B1)| / |B2 ∩ (U-B1)|
inline double siou(const SolvedSets& sets) {
  sets.validate();
  int denom = 0, num = 0;
  for (int v : sets.hssl_base) {
    if (sets.baseline_base.count(v)) continue;
    ++denom;
    if (sets.hssl_head.count(v)) ++num;
  }
  if (denom == 0)
    throw undefined_metric_error("sIoU undefined: the HSSL base model solved no samples beyond the baseline");
  return static_cast<double>(num) / denom;
}

// ---------------------------------------------------------------------------
// Head selection
// ---------------------------------------------------------------------------

struct DiscrepancyReport {
  int head_id = 0;
  double mean = 0.0;
  double min = 0.0;
  double median = 0.0;
  double max = 0.0;
  int epoch = 0;

  static DiscrepancyReport from_samples(int head_id, std::vector<double> samples, int epoch) {
    if (samples.empty()) throw contract_error("DiscrepancyReport: no samples");
    DiscrepancyReport r;
    r.head_id = head_id;
    r.epoch = epoch;
    double total = 0.0;
    for (double v : samples) total += v;
    r.mean = total / static_cast<double>(samples.size());
    std::sort(samples.begin(), samples.end());
    r.min = samples.front();
    r.max = samples.back();
    r.median = samples[samples.size() / 2];
    return r;
  }
};

struct SearchResult {
  std::vector<DiscrepancyReport> reports;
  int selected_head_id = -1;
  double wall_time_seconds = 0.0;
  double data_fraction = 1.0;
};

// argmax over mean D; exact ties break toward the lowest head id.
inline SearchResult select_head(const std::vector<DiscrepancyReport>& reports) {
  if (reports.empty()) throw contract_error("select_head: no reports");
  SearchResult res;
  res.reports = reports;
  const DiscrepancyReport* best = &reports.front();
  for (const auto& r : reports) {
    if (r.mean > best->mean || (r.mean == best->mean && r.head_id < best->head_id)) best = &r;
  }
  res.selected_head_id = best->head_id;
  return res;
}

}  // namespace hssl
