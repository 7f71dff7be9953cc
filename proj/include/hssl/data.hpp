#pragma once

// Dataset provisioning: a structured synthetic generator, the CIFAR binary
// record format, and the seeded multi-crop augmentation stack. Everything is
// a pure function of declared seeds so results never depend on thread count
// or arrival order.

#include <condition_variable>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <functional>
#include <mutex>
#include <optional>
#include <queue>
#include <string>
#include <thread>
#include <vector>

#include "hssl/common.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

struct ImageRecord {
  int id = 0;
  int channels = 3;
  int height = 0;
  int width = 0;
  std::vector<float> pixels;  // [3, H, W], values in [0,1]
  int label = 0;              // consumed by probes only, never by SSL losses
};

struct Dataset {
  std::vector<ImageRecord> records;
  int num_classes = 0;
  uint64_t seed = 0;

  size_t size() const { return records.size(); }
};

// ---------------------------------------------------------------------------
// Synthetic generator
// ---------------------------------------------------------------------------

namespace detail {

inline void hsv_to_rgb(double h, double s, double v, double rgb[3]) {
  h = h - std::floor(h);
  double i = std::floor(h * 6.0);
  double f = h * 6.0 - i;
  double p = v * (1.0 - s);
  double q = v * (1.0 - f * s);
  double t = v * (1.0 - (1.0 - f) * s);
  switch (static_cast<int>(i) % 6) {
    case 0: rgb[0] = v; rgb[1] = t; rgb[2] = p; break;
    case 1: rgb[0] = q; rgb[1] = v; rgb[2] = p; break;
    case 2: rgb[0] = p; rgb[1] = v; rgb[2] = t; break;
    case 3: rgb[0] = p; rgb[1] = q; rgb[2] = v; break;
    case 4: rgb[0] = t; rgb[1] = p; rgb[2] = v; break;
    default: rgb[0] = v; rgb[1] = p; rgb[2] = q; break;
  }
}

// Signed distance-like coverage of the class shapes, 1 inside, 0 outside,
// with a soft edge of about one pixel. Shapes are scaled so their areas
// roughly match, which keeps foreground statistics class-neutral.
inline double shape_coverage(int shape, double dx, double dy, double r) {
  auto soft = [](double signed_dist) { return 1.0 / (1.0 + std::exp(8.0 * signed_dist)); };
  switch (shape % 4) {
    case 0: {  // disc
      return soft(std::sqrt(dx * dx + dy * dy) - r);
    }
    case 1: {  // square, matched area: side = r * sqrt(pi)
      const double half = 0.5 * r * 1.7724538509;
      const double d = std::max(std::fabs(dx), std::fabs(dy)) - half;
      return soft(d);
    }
    case 2: {  // equilateral triangle, circumradius chosen for area pi r^2
      const double R = r * 1.5552;
      const double e1 = dy - 0.5 * R;
      const double e2 = 0.8660254 * dx - 0.5 * dy - 0.5 * R;
      const double e3 = -0.8660254 * dx - 0.5 * dy - 0.5 * R;
      return soft(std::max({e1, e2, e3}));
    }
    default: {  // ring, outer radius scaled so the annulus area matches
      const double outer = r * 1.29099;  // area pi r^2 with inner = 0.63 outer
      const double inner = 0.63 * outer;
      const double d = std::sqrt(dx * dx + dy * dy);
      return soft(std::max(d - outer, inner - d));
    }
  }
}

}  // namespace detail

// Class-conditional images: one geometric primitive per image whose shape
// family is the class; colors are drawn from one shared pool so class signal
// lives in geometry rather than mean color. Pose and scale are jittered per
// record; everything derives from `seed`.
inline Dataset generate_synthetic(int num_classes, int per_class, int image_size, uint64_t seed) {
  if (num_classes < 2) throw parameter_error("generate_synthetic: need at least two classes");
  if (per_class < 1 || image_size < 8) throw parameter_error("generate_synthetic: degenerate geometry");
  Dataset ds;
  ds.num_classes = num_classes;
  ds.seed = seed;
  const int S = image_size;
  int id = 0;
  for (int c = 0; c < num_classes; ++c) {
    for (int i = 0; i < per_class; ++i) {
      Rng rng(derive_seed(seed, {static_cast<uint64_t>(c), static_cast<uint64_t>(i), 0x696d67}));
      ImageRecord rec;
      rec.id = id++;
      rec.label = c;
      rec.height = rec.width = S;
      rec.pixels.assign(static_cast<size_t>(3) * S * S, 0.0f);

      // muted textured background: a soft gradient within one hue family
      double bg_hue = rng.uniform();
      double bg_a[3], bg_b[3];
      detail::hsv_to_rgb(bg_hue, rng.uniform(0.08, 0.22), rng.uniform(0.3, 0.5), bg_a);
      detail::hsv_to_rgb(bg_hue + rng.uniform(-0.06, 0.06), rng.uniform(0.08, 0.22), rng.uniform(0.3, 0.5), bg_b);
      const bool horizontal = rng.bernoulli(0.5);
      const uint64_t noise_key = rng.next_u64();

      // foreground: saturated colors from one pool shared by every class, so
      // class identity lives in the geometry
      double fg[3];
      const double pool_hues[6] = {0.0, 0.12, 0.3, 0.5, 0.66, 0.83};
      detail::hsv_to_rgb(pool_hues[rng.uniform_int(0, 5)] + rng.uniform(-0.03, 0.03), rng.uniform(0.8, 1.0),
                         rng.uniform(0.8, 1.0), fg);

      const double cx = S * rng.uniform(0.36, 0.64);
      const double cy = S * rng.uniform(0.36, 0.64);
      const double r = S * rng.uniform(0.20, 0.30);

      for (int y = 0; y < S; ++y)
        for (int x = 0; x < S; ++x) {
          const double tgrad = horizontal ? static_cast<double>(x) / (S - 1) : static_cast<double>(y) / (S - 1);
          const double n = (static_cast<double>(mix_seed(noise_key ^ (static_cast<uint64_t>(y) << 20 ^ x)) >> 11) /
                                9007199254740992.0 -
                            0.5) *
                           0.08;
          const double cov = detail::shape_coverage(c, x - cx, y - cy, r);
          for (int ch = 0; ch < 3; ++ch) {
            double bgv = bg_a[ch] * (1.0 - tgrad) + bg_b[ch] * tgrad + n;
            double v = bgv * (1.0 - cov) + fg[ch] * cov;
            rec.pixels[(static_cast<size_t>(ch) * S + y) * S + x] =
                static_cast<float>(std::min(1.0, std::max(0.0, v)));
          }
        }
      ds.records.push_back(std::move(rec));
    }
  }
  return ds;
}

// ---------------------------------------------------------------------------
// CIFAR binary format: 1 label byte + 3072 channel-major pixel bytes
// ---------------------------------------------------------------------------

inline Dataset load_cifar_binary(const std::string& path) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw io_error("cannot open " + path);
  f.seekg(0, std::ios::end);
  const int64_t len = static_cast<int64_t>(f.tellg());
  f.seekg(0);
  constexpr int64_t rec_len = 3073;
  if (len % rec_len != 0)
    throw format_error("truncated CIFAR binary file " + path + ": stray " + std::to_string(len % rec_len) +
                       " bytes at offset " + std::to_string(len - len % rec_len));
  Dataset ds;
  std::vector<unsigned char> buf(static_cast<size_t>(rec_len));
  int max_label = 0;
  for (int64_t r = 0; r < len / rec_len; ++r) {
    f.read(reinterpret_cast<char*>(buf.data()), rec_len);
    if (!f) throw format_error("read failure in " + path + " at offset " + std::to_string(r * rec_len));
    ImageRecord rec;
    rec.id = static_cast<int>(r);
    rec.label = buf[0];
    rec.height = rec.width = 32;
    rec.pixels.resize(3 * 32 * 32);
    for (int i = 0; i < 3072; ++i) rec.pixels[static_cast<size_t>(i)] = static_cast<float>(buf[static_cast<size_t>(i + 1)]) / 255.0f;
    max_label = std::max(max_label, rec.label);
    ds.records.push_back(std::move(rec));
  }
  ds.num_classes = max_label + 1;
  return ds;
}

inline void save_cifar_binary(const Dataset& ds, const std::string& path) {
  std::ofstream f(path, std::ios::binary | std::ios::trunc);
  if (!f) throw io_error("cannot write " + path);
  for (const auto& rec : ds.records) {
    if (rec.height != 32 || rec.width != 32)
      throw format_error("CIFAR binary layout requires 32x32 records");
    unsigned char label = static_cast<unsigned char>(rec.label);
    f.write(reinterpret_cast<const char*>(&label), 1);
    for (float v : rec.pixels) {
      const double clamped = std::min(1.0, std::max(0.0, static_cast<double>(v)));
      unsigned char b = static_cast<unsigned char>(std::lround(clamped * 255.0));
      f.write(reinterpret_cast<const char*>(&b), 1);
    }
  }
}

// ---------------------------------------------------------------------------
// Multi-crop augmentation
// ---------------------------------------------------------------------------

struct AugmentPolicy {
  int global_count = 2;
  int global_size = 32;
  int local_count = 0;
  int local_size = 16;
  double global_scale_lo = 0.25, global_scale_hi = 1.0;
  double local_scale_lo = 0.05, local_scale_hi = 0.25;
  double flip_prob = 0.5;
  double jitter = 0.4;
  double grayscale_prob = 0.2;

  void validate(int patch_size) const {
    if (global_count < 1) throw config_error("multicrop: at least one global view required");
    if (local_count < 0) throw config_error("multicrop: negative local count");
    auto in01 = [](double lo, double hi) { return lo > 0.0 && hi <= 1.0 && lo <= hi; };
    if (!in01(global_scale_lo, global_scale_hi) || !in01(local_scale_lo, local_scale_hi))
      throw config_error("multicrop: scale ranges must lie within (0,1]");
    if (patch_size > 0 && (global_size % patch_size != 0 || local_size % patch_size != 0))
      throw config_error("multicrop: view sizes must divide evenly by patch size");
    if (flip_prob < 0.0 || flip_prob > 1.0 || grayscale_prob < 0.0 || grayscale_prob > 1.0)
      throw config_error("multicrop: probabilities must lie in [0,1]");
    if (jitter < 0.0 || jitter >= 1.0) throw config_error("multicrop: jitter strength must lie in [0,1)");
  }
};

struct ViewProvenance {
  int record_id = 0;
  int view_index = 0;
  bool global = true;
  double crop_x = 0.0, crop_y = 0.0, crop_w = 0.0, crop_h = 0.0;
  bool flipped = false;
  uint64_t view_seed = 0;
};

// Per-sample view stack for one batch. views[v] is [B, 3, s, s]; the first
// `global_count` entries are global views.
struct ViewBatch {
  std::vector<Tensor> views;
  std::vector<std::vector<ViewProvenance>> provenance;  // [view][sample]
  int global_count = 0;
};

namespace detail {

inline float sample_bilinear(const ImageRecord& rec, int ch, double y, double x) {
  const int H = rec.height, W = rec.width;
  int x0 = static_cast<int>(std::floor(x));
  int y0 = static_cast<int>(std::floor(y));
  const double fx = x - x0, fy = y - y0;
  auto cl = [](int v, int hi) { return std::min(std::max(v, 0), hi - 1); };
  const int x0c = cl(x0, W), x1c = cl(x0 + 1, W), y0c = cl(y0, H), y1c = cl(y0 + 1, H);
  auto at = [&](int yy, int xx) {
    return static_cast<double>(rec.pixels[(static_cast<size_t>(ch) * H + yy) * W + xx]);
  };
  const double v = at(y0c, x0c) * (1 - fy) * (1 - fx) + at(y0c, x1c) * (1 - fy) * fx +
                   at(y1c, x0c) * fy * (1 - fx) + at(y1c, x1c) * fy * fx;
  return static_cast<float>(v);
}

}  // namespace detail

// One augmented view of one record. The RNG stream is a pure function of
// (dataset seed, record id, epoch, step, view index).
inline std::vector<float> augment_view(const ImageRecord& rec, const AugmentPolicy& policy, uint64_t dataset_seed,
                                       int epoch, int64_t step, int view_index, ViewProvenance* prov_out) {
  const bool global = view_index < policy.global_count;
  const int S = global ? policy.global_size : policy.local_size;
  const double lo = global ? policy.global_scale_lo : policy.local_scale_lo;
  const double hi = global ? policy.global_scale_hi : policy.local_scale_hi;

  Rng rng(derive_seed(dataset_seed, {static_cast<uint64_t>(rec.id), static_cast<uint64_t>(epoch),
                                     static_cast<uint64_t>(step), static_cast<uint64_t>(view_index)}));

  const double src_area = static_cast<double>(rec.height) * rec.width;
  double cw = rec.width, ch = rec.height, cx = 0.0, cy = 0.0;
  bool placed = false;
  for (int attempt = 0; attempt < 10 && !placed; ++attempt) {
    const double area = src_area * rng.uniform(lo, hi);
    const double aspect = std::exp(rng.uniform(std::log(3.0 / 4.0), std::log(4.0 / 3.0)));
    const double w = std::sqrt(area * aspect);
    const double h = std::sqrt(area / aspect);
    if (w <= rec.width && h <= rec.height && w >= 1.0 && h >= 1.0) {
      cw = w;
      ch = h;
      cx = rng.uniform(0.0, rec.width - w);
      cy = rng.uniform(0.0, rec.height - h);
      placed = true;
    }
  }
  if (!placed) {
    const double side = std::sqrt(src_area * std::min(1.0, hi));
    cw = ch = std::max(1.0, side);
    cx = (rec.width - cw) / 2.0;
    cy = (rec.height - ch) / 2.0;
  }
  if (cw < 1.0 || ch < 1.0) throw config_error("augment: crop smaller than one pixel");

  const bool flip = rng.bernoulli(policy.flip_prob);

  // per-channel affine jitter plus probabilistic grayscale
  double cscale[3] = {1.0, 1.0, 1.0}, cshift[3] = {0.0, 0.0, 0.0};
  if (policy.jitter > 0.0)
    for (int c = 0; c < 3; ++c) {
      cscale[c] = rng.uniform(1.0 - policy.jitter, 1.0 + policy.jitter);
      cshift[c] = rng.uniform(-policy.jitter, policy.jitter) * 0.5;
    }
  const bool grayscale = rng.bernoulli(policy.grayscale_prob);

  std::vector<float> out(static_cast<size_t>(3) * S * S);
  for (int y = 0; y < S; ++y)
    for (int x = 0; x < S; ++x) {
      const int xs = flip ? (S - 1 - x) : x;
      const double sy = cy + (y + 0.5) * ch / S - 0.5;
      const double sx = cx + (xs + 0.5) * cw / S - 0.5;
      double vals[3];
      for (int c = 0; c < 3; ++c) vals[c] = detail::sample_bilinear(rec, c, sy, sx);
      if (grayscale) {
        const double g = 0.299 * vals[0] + 0.587 * vals[1] + 0.114 * vals[2];
        vals[0] = vals[1] = vals[2] = g;
      }
      for (int c = 0; c < 3; ++c) {
        double v = vals[c] * cscale[c] + cshift[c];
        out[(static_cast<size_t>(c) * S + y) * S + x] = static_cast<float>(std::min(1.0, std::max(0.0, v)));
      }
    }

  if (prov_out) {
    prov_out->record_id = rec.id;
    prov_out->view_index = view_index;
    prov_out->global = global;
    prov_out->crop_x = cx;
    prov_out->crop_y = cy;
    prov_out->crop_w = cw;
    prov_out->crop_h = ch;
    prov_out->flipped = flip;
    prov_out->view_seed = derive_seed(dataset_seed, {static_cast<uint64_t>(rec.id), static_cast<uint64_t>(epoch),
                                                     static_cast<uint64_t>(step), static_cast<uint64_t>(view_index)});
  }
  return out;
}

inline ViewBatch augment_multicrop(const std::vector<const ImageRecord*>& batch, const AugmentPolicy& policy,
                                   uint64_t dataset_seed, int epoch, int64_t step) {
  policy.validate(0);
  const int nviews = policy.global_count + policy.local_count;
  const int B = static_cast<int>(batch.size());
  ViewBatch vb;
  vb.global_count = policy.global_count;
  vb.views.reserve(static_cast<size_t>(nviews));
  vb.provenance.assign(static_cast<size_t>(nviews), {});
  for (int v = 0; v < nviews; ++v) {
    const int S = v < policy.global_count ? policy.global_size : policy.local_size;
    auto data = std::make_shared<std::vector<float>>(static_cast<size_t>(B) * 3 * S * S);
    vb.provenance[static_cast<size_t>(v)].resize(static_cast<size_t>(B));
    for (int b = 0; b < B; ++b) {
      std::vector<float> view = augment_view(*batch[static_cast<size_t>(b)], policy, dataset_seed, epoch, step, v,
                                             &vb.provenance[static_cast<size_t>(v)][static_cast<size_t>(b)]);
      std::copy(view.begin(), view.end(), data->begin() + static_cast<int64_t>(b) * 3 * S * S);
    }
    vb.views.push_back(Tensor({B, 3, S, S}, data));
  }
  return vb;
}

// Convenience wrapper matching the one-record operation signature.
inline ViewBatch augment_multicrop(const ImageRecord& record, const AugmentPolicy& policy, uint64_t dataset_seed,
                                   int epoch, int64_t step) {
  return augment_multicrop(std::vector<const ImageRecord*>{&record}, policy, dataset_seed, epoch, step);
}

// Plain resize of raw records into a [N,3,S,S] tensor (probe-time features).
inline Tensor records_to_tensor(const std::vector<const ImageRecord*>& recs, int size) {
  const int N = static_cast<int>(recs.size());
  auto data = std::make_shared<std::vector<float>>(static_cast<size_t>(N) * 3 * size * size);
  for (int i = 0; i < N; ++i) {
    const ImageRecord& r = *recs[static_cast<size_t>(i)];
    for (int y = 0; y < size; ++y)
      for (int x = 0; x < size; ++x) {
        const double sy = (y + 0.5) * static_cast<double>(r.height) / size - 0.5;
        const double sx = (x + 0.5) * static_cast<double>(r.width) / size - 0.5;
        for (int c = 0; c < 3; ++c)
          (*data)[((static_cast<int64_t>(i) * 3 + c) * size + y) * size + x] = detail::sample_bilinear(r, c, sy, sx);
      }
  }
  return Tensor({N, 3, size, size}, data);
}

// ---------------------------------------------------------------------------
// Batch schedule and prefetch
// ---------------------------------------------------------------------------

inline std::vector<int> epoch_shuffle(int n, uint64_t seed, int epoch) {
  std::vector<int> idx(static_cast<size_t>(n));
  for (int i = 0; i < n; ++i) idx[static_cast<size_t>(i)] = i;
  Rng rng(derive_seed(seed, {0x73687566, static_cast<uint64_t>(epoch)}));
  for (int i = n - 1; i > 0; --i) {
    const int j = rng.uniform_int(0, i);
    std::swap(idx[static_cast<size_t>(i)], idx[static_cast<size_t>(j)]);
  }
  return idx;
}

// Single-worker bounded-queue prefetcher. Because views are pure functions of
// (seed, record, epoch, step, view), prefetched batches are identical to
// synchronously computed ones; delivery order is fixed by step index.
class BatchPrefetcher {
 public:
  using Producer = std::function<std::optional<ViewBatch>(int64_t)>;  // step -> batch

  BatchPrefetcher(Producer producer, int depth = 2)
      : producer_(std::move(producer)), depth_(std::max(1, depth)) {
    worker_ = std::thread([this] { run(); });
  }

  ~BatchPrefetcher() {
    {
      std::lock_guard<std::mutex> lk(mu_);
      stop_ = true;
    }
    cv_.notify_all();
    worker_.join();
  }

  std::optional<ViewBatch> next() {
    std::unique_lock<std::mutex> lk(mu_);
    cv_.wait(lk, [this] { return !queue_.empty() || done_; });
    if (queue_.empty()) return std::nullopt;
    ViewBatch vb = std::move(queue_.front());
    queue_.pop();
    cv_.notify_all();
    return vb;
  }

 private:
  void run() {
    int64_t step = 0;
    while (true) {
      std::optional<ViewBatch> vb = producer_(step++);
      std::unique_lock<std::mutex> lk(mu_);
      if (!vb) {
        done_ = true;
        cv_.notify_all();
        return;
      }
      cv_.wait(lk, [this] { return static_cast<int>(queue_.size()) < depth_ || stop_; });
      if (stop_) return;
      queue_.push(std::move(*vb));
      cv_.notify_all();
    }
  }

  Producer producer_;
  int depth_;
  std::thread worker_;
  std::mutex mu_;
  std::condition_variable cv_;
  std::queue<ViewBatch> queue_;
  bool done_ = false;
  bool stop_ = false;
};

}  // namespace hssl
