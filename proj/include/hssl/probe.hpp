#pragma once

// Frozen-feature evaluation: cosine kNN and multinomial-logistic probes, and
// the α-blend complementarity pilot.

#include <algorithm>
#include <string>
#include <vector>

#include "hssl/common.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

struct FeatureMatrix {
  std::vector<std::vector<float>> rows;
  std::vector<int> labels;
  std::string provenance;  // model id / layer / pooling, free-form

  void validate() const {
    if (rows.size() != labels.size()) throw contract_error("FeatureMatrix: row count does not match label count");
    for (const auto& r : rows)
      if (r.size() != rows.front().size()) throw dimension_error("FeatureMatrix: ragged rows");
  }
  int dim() const { return rows.empty() ? 0 : static_cast<int>(rows.front().size()); }
  int count() const { return static_cast<int>(rows.size()); }
};

struct ProbeResult {
  double accuracy = 0.0;
  std::vector<int> predictions;
  std::vector<uint8_t> correct;  // per test sample, feeds SolvedSets
};

namespace detail {
inline std::vector<std::vector<float>> l2_rows(const std::vector<std::vector<float>>& rows) {
  std::vector<std::vector<float>> out = rows;
  for (auto& r : out) {
    double n = 0.0;
    for (float v : r) n += static_cast<double>(v) * v;
    n = std::max(std::sqrt(n), 1e-12);
    for (float& v : r) v = static_cast<float>(v / n);
  }
  return out;
}
}  // namespace detail

// Cosine-similarity kNN with tempered-softmax vote weights. Deterministic:
// neighbor ties resolve by training-row index, class-vote ties by class id.
inline ProbeResult knn_probe(const FeatureMatrix& train, const FeatureMatrix& test, int k,
                             double vote_temperature = 0.07) {
  train.validate();
  test.validate();
  if (k < 1) throw parameter_error("knn_probe: k must be >= 1");
  if (k > train.count()) throw parameter_error("knn_probe: k exceeds the number of training rows");
  if (train.dim() != test.dim()) throw dimension_error("knn_probe: feature widths differ");
  const auto tr = detail::l2_rows(train.rows);
  const auto te = detail::l2_rows(test.rows);
  int classes = 0;
  for (int l : train.labels) classes = std::max(classes, l + 1);

  ProbeResult res;
  int hits = 0;
  for (int i = 0; i < test.count(); ++i) {
    std::vector<std::pair<double, int>> sims(static_cast<size_t>(train.count()));
    for (int j = 0; j < train.count(); ++j) {
      double s = 0.0;
      for (size_t d = 0; d < tr[static_cast<size_t>(j)].size(); ++d)
        s += static_cast<double>(te[static_cast<size_t>(i)][d]) * tr[static_cast<size_t>(j)][d];
      sims[static_cast<size_t>(j)] = {s, j};
    }
    std::partial_sort(sims.begin(), sims.begin() + k, sims.end(), [](const auto& a, const auto& b) {
      if (a.first != b.first) return a.first > b.first;
      return a.second < b.second;
    });
    std::vector<double> votes(static_cast<size_t>(classes), 0.0);
    for (int j = 0; j < k; ++j)
      votes[static_cast<size_t>(train.labels[static_cast<size_t>(sims[static_cast<size_t>(j)].second)])] +=
          std::exp(sims[static_cast<size_t>(j)].first / vote_temperature);
    int best = 0;
    for (int c = 1; c < classes; ++c)
      if (votes[static_cast<size_t>(c)] > votes[static_cast<size_t>(best)]) best = c;
    res.predictions.push_back(best);
    const bool ok = best == test.labels[static_cast<size_t>(i)];
    res.correct.push_back(ok ? 1 : 0);
    hits += ok ? 1 : 0;
  }
  res.accuracy = static_cast<double>(hits) / std::max(1, test.count());
  return res;
}

// Multinomial logistic regression on frozen features, full-batch Adam.
// Features are standardized by train-split statistics. Zero-initialized, so
// zero epochs predict class 0 everywhere.
inline ProbeResult linear_probe(const FeatureMatrix& train, const FeatureMatrix& test, int epochs, double lr) {
  train.validate();
  test.validate();
  if (train.dim() != test.dim()) throw dimension_error("linear_probe: feature widths differ");
  int classes = 0;
  for (int l : train.labels) classes = std::max(classes, l + 1);
  if (classes < 2) throw contract_error("linear_probe: training labels span fewer than two classes");
  const int d = train.dim();
  const int n = train.count();

  std::vector<double> mean(static_cast<size_t>(d), 0.0), stdev(static_cast<size_t>(d), 0.0);
  for (const auto& r : train.rows)
    for (int j = 0; j < d; ++j) mean[static_cast<size_t>(j)] += r[static_cast<size_t>(j)];
  for (double& m : mean) m /= n;
  for (const auto& r : train.rows)
    for (int j = 0; j < d; ++j) {
      const double dv = r[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)];
      stdev[static_cast<size_t>(j)] += dv * dv;
    }
  for (double& s : stdev) s = std::sqrt(s / n) + 1e-8;

  auto standardized = [&](const std::vector<float>& r) {
    std::vector<double> out(static_cast<size_t>(d));
    for (int j = 0; j < d; ++j) out[static_cast<size_t>(j)] = (r[static_cast<size_t>(j)] - mean[static_cast<size_t>(j)]) / stdev[static_cast<size_t>(j)];
    return out;
  };

  std::vector<double> w(static_cast<size_t>(d) * classes, 0.0), b(static_cast<size_t>(classes), 0.0);
  std::vector<double> mw(w.size(), 0.0), vw(w.size(), 0.0), mb(b.size(), 0.0), vb(b.size(), 0.0);
  const double b1 = 0.9, b2 = 0.999, eps = 1e-8;
  std::vector<std::vector<double>> x;
  x.reserve(static_cast<size_t>(n));
  for (const auto& r : train.rows) x.push_back(standardized(r));

  for (int e = 1; e <= epochs; ++e) {
    std::vector<double> gw(w.size(), 0.0), gb(b.size(), 0.0);
    for (int i = 0; i < n; ++i) {
      std::vector<double> logits(static_cast<size_t>(classes), 0.0);
      for (int c = 0; c < classes; ++c) {
        double acc = b[static_cast<size_t>(c)];
        for (int j = 0; j < d; ++j) acc += x[static_cast<size_t>(i)][static_cast<size_t>(j)] * w[static_cast<size_t>(j * classes + c)];
        logits[static_cast<size_t>(c)] = acc;
      }
      double mx = logits[0];
      for (double v : logits) mx = std::max(mx, v);
      double denom = 0.0;
      for (double v : logits) denom += std::exp(v - mx);
      for (int c = 0; c < classes; ++c) {
        const double p = std::exp(logits[static_cast<size_t>(c)] - mx) / denom;
        const double g = (p - (c == train.labels[static_cast<size_t>(i)] ? 1.0 : 0.0)) / n;
        gb[static_cast<size_t>(c)] += g;
        for (int j = 0; j < d; ++j) gw[static_cast<size_t>(j * classes + c)] += g * x[static_cast<size_t>(i)][static_cast<size_t>(j)];
      }
    }
    const double bc1 = 1.0 - std::pow(b1, e), bc2 = 1.0 - std::pow(b2, e);
    for (size_t j = 0; j < w.size(); ++j) {
      mw[j] = b1 * mw[j] + (1 - b1) * gw[j];
      vw[j] = b2 * vw[j] + (1 - b2) * gw[j] * gw[j];
      w[j] -= lr * (mw[j] / bc1) / (std::sqrt(vw[j] / bc2) + eps);
    }
    for (size_t j = 0; j < b.size(); ++j) {
      mb[j] = b1 * mb[j] + (1 - b1) * gb[j];
      vb[j] = b2 * vb[j] + (1 - b2) * gb[j] * gb[j];
      b[j] -= lr * (mb[j] / bc1) / (std::sqrt(vb[j] / bc2) + eps);
    }
  }

  ProbeResult res;
  int hits = 0;
  for (int i = 0; i < test.count(); ++i) {
    std::vector<double> xi = standardized(test.rows[static_cast<size_t>(i)]);
    int best = 0;
    double best_v = -1e300;
    for (int c = 0; c < classes; ++c) {
      double acc = b[static_cast<size_t>(c)];
      for (int j = 0; j < d; ++j) acc += xi[static_cast<size_t>(j)] * w[static_cast<size_t>(j * classes + c)];
      if (acc > best_v) {
        best_v = acc;
        best = c;
      }
    }
    res.predictions.push_back(best);
    const bool ok = best == test.labels[static_cast<size_t>(i)];
    res.correct.push_back(ok ? 1 : 0);
    hits += ok ? 1 : 0;
  }
  res.accuracy = static_cast<double>(hits) / std::max(1, test.count());
  return res;
}

// Per-row convex combination of two feature sets. With `normalize` each
// source is first scaled to unit row norm (the per-source projection is the
// identity when widths already agree, which is the only supported case);
// cosine probes are invariant to that normalization, so the α-endpoints
// reproduce the single-source probes exactly.
inline FeatureMatrix blend_representations(const FeatureMatrix& a, const FeatureMatrix& b, double alpha,
                                           bool normalize = true) {
  a.validate();
  b.validate();
  if (alpha < 0.0 || alpha > 1.0) throw parameter_error("blend_representations: alpha must lie in [0,1]");
  if (a.count() != b.count()) throw dimension_error("blend_representations: row counts differ");
  if (a.dim() != b.dim()) throw dimension_error("blend_representations: widths differ (projection not supported)");
  for (int i = 0; i < a.count(); ++i)
    if (a.labels[static_cast<size_t>(i)] != b.labels[static_cast<size_t>(i)])
      throw contract_error("blend_representations: label rows disagree");
  const auto ra = normalize ? detail::l2_rows(a.rows) : a.rows;
  const auto rb = normalize ? detail::l2_rows(b.rows) : b.rows;
  FeatureMatrix out;
  out.labels = a.labels;
  out.provenance = "blend(" + a.provenance + "," + b.provenance + ",alpha=" + std::to_string(alpha) + ")";
  out.rows.resize(static_cast<size_t>(a.count()));
  for (int i = 0; i < a.count(); ++i) {
    std::vector<float> row(static_cast<size_t>(a.dim()));
    for (int j = 0; j < a.dim(); ++j)
      row[static_cast<size_t>(j)] = static_cast<float>(alpha * ra[static_cast<size_t>(i)][static_cast<size_t>(j)] +
                                                       (1.0 - alpha) * rb[static_cast<size_t>(i)][static_cast<size_t>(j)]);
    out.rows[static_cast<size_t>(i)] = std::move(row);
  }
  return out;
}

}  // namespace hssl
