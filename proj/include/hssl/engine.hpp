#pragma once

// The heterogeneous training step: serial auxiliary heads on a shared base,
// the two-term total loss, multi-head concatenation, the parallel search
// loss, teacher maintenance, and the optimizer loop.

#include <chrono>
#include <functional>
#include <memory>
#include <optional>
#include <set>
#include <string>
#include <vector>

#include "hssl/arch.hpp"
#include "hssl/common.hpp"
#include "hssl/data.hpp"
#include "hssl/metrics.hpp"
#include "hssl/objectives.hpp"
#include "hssl/params.hpp"
#include "hssl/tensor.hpp"

namespace hssl {

enum class LossKind { Clustering, Contrastive, Masked };
enum class Supervision { Heterogeneous, Homogeneous };

inline LossKind loss_kind_from_string(const std::string& s) {
  if (s == "clustering") return LossKind::Clustering;
  if (s == "contrastive") return LossKind::Contrastive;
  if (s == "masked") return LossKind::Masked;
  throw config_error("unknown loss kind: " + s);
}

inline std::string loss_kind_to_string(LossKind k) {
  switch (k) {
    case LossKind::Clustering: return "clustering";
    case LossKind::Contrastive: return "contrastive";
    case LossKind::Masked: return "masked";
  }
  throw config_error("invalid loss kind");
}

struct ObjectiveConfig {
  LossKind kind = LossKind::Clustering;
  int K = 256;
  int proj_hidden = 512;
  double tau_student = 0.1;
  double tau_teacher = 0.04;
  double center_momentum = 0.9;
  double ema_momentum = 0.996;
  bool share_projections = false;
  bool symmetrize = true;
  Supervision supervision = Supervision::Heterogeneous;
  int bank_size = 256;
  double tau_contrastive = 0.2;
  double mask_ratio = 0.4;

  void validate() const {
    if (K <= 0 || proj_hidden <= 0) throw config_error("objective: K and proj_hidden must be positive");
    if (tau_student <= 0.0 || tau_teacher <= 0.0 || tau_contrastive <= 0.0)
      throw config_error("objective: temperatures must be positive");
    if (center_momentum < 0.0 || center_momentum > 1.0 || ema_momentum < 0.0 || ema_momentum > 1.0)
      throw config_error("objective: momenta must lie in [0,1]");
    if (bank_size <= 0) throw config_error("objective: bank_size must be positive");
    if (mask_ratio <= 0.0 || mask_ratio >= 1.0) throw config_error("objective: mask_ratio must lie in (0,1)");
  }
};

struct OptimConfig {
  double lr = 1e-3;
  double weight_decay = 0.04;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double grad_clip = 3.0;
  int warmup_epochs = 1;
  int epochs = 10;
  int batch_size = 32;

  void validate() const {
    if (lr < 0.0 || weight_decay < 0.0) throw config_error("optimizer: negative rate");
    if (epochs < 1 || batch_size < 1) throw config_error("optimizer: epochs and batch_size must be >= 1");
    if (warmup_epochs < 0) throw config_error("optimizer: negative warmup");
  }
};

struct EngineConfig {
  BaseModelSpec base;
  std::vector<AuxiliaryHeadSpec> heads;  // empty = homogeneous baseline run
  ObjectiveConfig objective;
  OptimConfig optim;
  AugmentPolicy multicrop;
  uint64_t seed = 1;
  bool search_mode = false;  // parallel per-head losses with per-head projections
  bool prefetch = true;
  int64_t total_steps = 0;  // 0 = constant learning rate

  void validate() const {
    base.validate();
    for (const auto& h : heads) h.validate();
    objective.validate();
    optim.validate();
    multicrop.validate(base.patch_size);
    if (multicrop.global_count < 2 && objective.kind != LossKind::Masked)
      throw config_error("two-view losses require at least two global views");
    if (search_mode && heads.size() < 2)
      throw config_error("search mode requires at least two candidate heads");
    if (search_mode && objective.supervision == Supervision::Homogeneous)
      throw config_error("search mode is only defined for heterogeneous supervision");
    if (heads.size() >= 2 && objective.share_projections)
      throw config_error("share_projections is only defined for a single auxiliary head");
    if (objective.kind == LossKind::Masked && heads.size() != 1)
      throw config_error("masked objective requires exactly one auxiliary head");
    std::set<int> ids;
    for (const auto& h : heads)
      if (!ids.insert(h.id).second) throw config_error("duplicate auxiliary head id " + std::to_string(h.id));
  }

  enum class Mode { Baseline, Single, Concat, Search };
  Mode mode() const {
    if (heads.empty()) return Mode::Baseline;
    if (heads.size() == 1) return Mode::Single;
    return search_mode ? Mode::Search : Mode::Concat;
  }
};

// Channel concatenation of per-head pooled features in head order; the
// degenerate single-input case passes through.
inline Tensor multi_head_concat(const std::vector<Tensor>& features) {
  if (features.empty()) throw contract_error("multi_head_concat: no inputs");
  if (features.size() == 1) return features.front();
  const int B = features.front().shape[0];
  for (const auto& f : features)
    if (f.shape[0] != B) throw dimension_error("multi_head_concat: batch extents differ");
  return concat(features, -1);
}

// ---------------------------------------------------------------------------
// Optimizer: Adam with decoupled weight decay
// ---------------------------------------------------------------------------

class AdamW {
 public:
  AdamW(double beta1, double beta2, double weight_decay, double eps = 1e-8)
      : beta1_(beta1), beta2_(beta2), weight_decay_(weight_decay), eps_(eps) {}

  void step(ParamStore& ps, double lr) {
    ++t_;
    if (states_.size() < ps.size()) states_.resize(ps.size());
    const double bc1 = 1.0 - std::pow(beta1_, static_cast<double>(t_));
    const double bc2 = 1.0 - std::pow(beta2_, static_cast<double>(t_));
    for (size_t i = 0; i < ps.size(); ++i) {
      Parameter& p = ps[i];
      State& st = states_[i];
      const size_t n = p.value->size();
      if (st.m.size() != n) {
        st.m.assign(n, 0.0f);
        st.v.assign(n, 0.0f);
      }
      // decay is skipped for vectors (biases, norms, centers)
      const double wd = p.shape.size() > 1 ? weight_decay_ : 0.0;
      float* w = p.value->data();
      for (size_t j = 0; j < n; ++j) {
        const double g = static_cast<double>(p.grad[j]);
        const double m = beta1_ * st.m[j] + (1.0 - beta1_) * g;
        const double v = beta2_ * st.v[j] + (1.0 - beta2_) * g * g;
        st.m[j] = static_cast<float>(m);
        st.v[j] = static_cast<float>(v);
        const double update = (m / bc1) / (std::sqrt(v / bc2) + eps_) + wd * static_cast<double>(w[j]);
        w[j] = static_cast<float>(static_cast<double>(w[j]) - lr * update);
      }
    }
  }

  int64_t steps() const { return t_; }
  void set_steps(int64_t t) { t_ = t; }
  std::vector<float>& moment1(size_t i) { return states_[i].m; }
  std::vector<float>& moment2(size_t i) { return states_[i].v; }
  void resize(size_t n) { states_.resize(n); }
  size_t size() const { return states_.size(); }

 private:
  struct State {
    std::vector<float> m, v;
  };
  std::vector<State> states_;
  double beta1_, beta2_, weight_decay_, eps_;
  int64_t t_ = 0;
};

inline double clip_gradients(ParamStore& ps, double max_norm) {
  double total = 0.0;
  for (size_t i = 0; i < ps.size(); ++i)
    for (float g : ps[i].grad) total += static_cast<double>(g) * g;
  total = std::sqrt(total);
  if (max_norm > 0.0 && total > max_norm) {
    const float s = static_cast<float>(max_norm / total);
    for (size_t i = 0; i < ps.size(); ++i)
      for (float& g : ps[i].grad) g *= s;
  }
  return total;
}

// Cosine decay to zero with linear warmup.
inline double lr_schedule(double base_lr, int64_t step, int64_t warmup_steps, int64_t total_steps) {
  if (total_steps <= 0) return base_lr;
  if (warmup_steps > 0 && step < warmup_steps)
    return base_lr * static_cast<double>(step + 1) / static_cast<double>(warmup_steps);
  const double progress =
      std::min(1.0, static_cast<double>(step - warmup_steps) / std::max<int64_t>(1, total_steps - warmup_steps));
  return 0.5 * base_lr * (1.0 + std::cos(3.14159265358979323846 * progress));
}

// ---------------------------------------------------------------------------
// One side (teacher or student) of the pair
// ---------------------------------------------------------------------------

struct Branch {
  ParamStore params;
  std::unique_ptr<BaseModel> base;
  std::vector<std::unique_ptr<AuxiliaryHead>> heads;
  ProjectionHead proj_base;                    // absent in masked mode
  std::vector<ProjectionHead> proj_heads;      // per head (single & search)
  std::vector<ProjectionHead> proj_base_each;  // per-head base projections (search)
  ProjectionHead proj_concat;                  // concat mode
  LinearLayer dec_base, dec_head;              // masked-mode decoders
};

struct ViewStream {
  Tensor base_tokens;
  Tensor base_pooled;
  std::vector<Tensor> head_tokens;
  std::vector<Tensor> head_pooled;
};

struct StepMetrics {
  int64_t step = 0;
  int epoch = 0;
  double loss = 0.0;
  double lr = 0.0;
  std::vector<double> head_discrepancy;  // per head, current-batch teacher sample
  double wall_ms = 0.0;
  double grad_norm = 0.0;
};

class HsslEngine {
 public:
  explicit HsslEngine(EngineConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    build_branch(student_);
    build_branch(teacher_);  // identical seeds, identical initialization
    opt_ = std::make_unique<AdamW>(cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.weight_decay);
    const int streams = center_stream_count();
    centers_.assign(static_cast<size_t>(streams), std::vector<float>(static_cast<size_t>(cfg_.objective.K), 0.0f));
    if (cfg_.objective.kind == LossKind::Contrastive)
      bank_ = std::make_unique<MemoryBank>(cfg_.objective.K, cfg_.objective.bank_size);
  }

  const EngineConfig& config() const { return cfg_; }
  EngineConfig::Mode mode() const { return cfg_.mode(); }
  int head_count() const { return static_cast<int>(cfg_.heads.size()); }
  int64_t step_index() const { return step_; }
  void set_step_index(int64_t s) { step_ = s; }

  Branch& student() { return student_; }
  Branch& teacher() { return teacher_; }
  AdamW& optimizer() { return *opt_; }
  std::vector<std::vector<float>>& centers() { return centers_; }
  MemoryBank* bank() { return bank_.get(); }

  // The four projected probability streams of the two global views; a pure
  // measurement pass, no gradients anywhere. train_step drives the same
  // machinery with a tape.
  struct ForwardProbes {
    Tensor teacher_base, teacher_head;  // z1^b, z1^h (probabilities)
    Tensor student_base, student_head;  // z2^b, z2^h (probabilities)
  };
  ForwardProbes hssl_forward_probes(const ViewBatch& vb) {
    if (vb.global_count < 2) throw contract_error("hssl_forward: two global views required");
    ViewStream t0 = run_branch(teacher_, nullptr, vb.views[0]);
    ViewStream s1 = run_branch(student_, nullptr, vb.views[1]);
    ForwardProbes out;
    const double taut = cfg_.objective.tau_teacher;
    const double taus = cfg_.objective.tau_student;
    out.teacher_base = teacher_distribution(project_base(teacher_, nullptr, t0, 0), centers_[0], taut);
    out.student_base = softmax(project_base(student_, nullptr, s1, 0), taus);
    if (!cfg_.heads.empty()) {
      const int hsel = mode() == EngineConfig::Mode::Concat ? -1 : 0;
      out.teacher_head = teacher_distribution(project_head_stream(teacher_, nullptr, t0, hsel), center_for_head(0), taut);
      out.student_head = softmax(project_head_stream(student_, nullptr, s1, hsel), taus);
    }
    return out;
  }

  StepMetrics train_step(const ViewBatch& vb, int epoch = 0) {
    const auto t0 = std::chrono::steady_clock::now();
    student_.params.zero_grad();
    Tape tape;
    StepMetrics metrics;
    metrics.step = step_;
    metrics.epoch = epoch;
    metrics.lr = lr_schedule(cfg_.optim.lr, step_, warmup_steps(), cfg_.total_steps);

    Tensor loss;
    std::vector<ViewStream> teacher_streams;
    if (cfg_.objective.kind == LossKind::Masked) {
      loss = masked_loss(tape, vb, teacher_streams);
    } else {
      loss = pair_loss(tape, vb, teacher_streams);
    }
    const double loss_val = static_cast<double>(loss.scalar());
    if (!std::isfinite(loss_val)) throw numerical_error(diagnose_nonfinite(vb));
    metrics.loss = loss_val;

    tape.backward(loss);
    metrics.grad_norm = clip_gradients(student_.params, cfg_.optim.grad_clip);
    opt_->step(student_.params, metrics.lr);
    ema_update(teacher_.params, student_.params, cfg_.objective.ema_momentum);
    update_centers(teacher_streams);
    if (bank_) {
      for (int t = 0; t < vb.global_count; ++t) bank_->push_rows(teacher_key_rows(teacher_streams[static_cast<size_t>(t)]));
    }
    metrics.head_discrepancy = discrepancy_samples(teacher_streams.empty() ? nullptr : &teacher_streams[0]);
    ++step_;
    metrics.wall_ms =
        std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
    return metrics;
  }

  // Mean per-head KL on raw (unaugmented) records through the teacher.
  std::vector<double> eval_discrepancy(const std::vector<const ImageRecord*>& records, int batch = 64) {
    std::vector<double> sums(static_cast<size_t>(head_count()), 0.0);
    if (head_count() == 0 || records.empty()) return {};
    for (int h = 0; h < head_count(); ++h) {
      std::vector<double> per = per_sample_discrepancy(records, h, batch);
      double total = 0.0;
      for (double v : per) total += v;
      sums[static_cast<size_t>(h)] = total / static_cast<double>(per.size());
    }
    return sums;
  }

  // Per-sample teacher KL values for one head (search reporting).
  std::vector<double> per_sample_discrepancy(const std::vector<const ImageRecord*>& records, int head, int batch = 64) {
    std::vector<double> out;
    const int n = static_cast<int>(records.size());
    for (int at = 0; at < n; at += batch) {
      std::vector<const ImageRecord*> chunk(records.begin() + at, records.begin() + std::min(n, at + batch));
      Tensor images = records_to_tensor(chunk, cfg_.multicrop.global_size);
      ViewStream ts = run_branch(teacher_, nullptr, images);
      Tensor pb = teacher_distribution(project_base(teacher_, nullptr, ts, head), center_for_base_stream(head),
                                       cfg_.objective.tau_teacher);
      Tensor ph = teacher_distribution(project_head_stream(teacher_, nullptr, ts, head), center_for_head(head),
                                       cfg_.objective.tau_teacher);
      const int K = cfg_.objective.K;
      for (int r = 0; r < pb.shape[0]; ++r) {
        Tensor pr({K}, std::make_shared<std::vector<float>>(pb.ptr() + static_cast<int64_t>(r) * K,
                                                            pb.ptr() + static_cast<int64_t>(r + 1) * K));
        Tensor hr({K}, std::make_shared<std::vector<float>>(ph.ptr() + static_cast<int64_t>(r) * K,
                                                            ph.ptr() + static_cast<int64_t>(r + 1) * K));
        out.push_back(kl_discrepancy(pr, hr));
      }
    }
    return out;
  }

  // Teacher base-model pooled features (probe input), in chunks.
  std::vector<std::vector<float>> teacher_base_features(const std::vector<const ImageRecord*>& records,
                                                        int batch = 64) {
    return pooled_features(records, -1, batch);
  }

  // head >= 0 selects an auxiliary head's pooled output.
  std::vector<std::vector<float>> pooled_features(const std::vector<const ImageRecord*>& records, int head,
                                                  int batch = 64) {
    std::vector<std::vector<float>> out;
    const int n = static_cast<int>(records.size());
    for (int at = 0; at < n; at += batch) {
      std::vector<const ImageRecord*> chunk(records.begin() + at, records.begin() + std::min(n, at + batch));
      Tensor images = records_to_tensor(chunk, cfg_.multicrop.global_size);
      ViewStream ts = run_branch(teacher_, nullptr, images, head < 0);
      const Tensor& feats = head < 0 ? ts.base_pooled : ts.head_pooled.at(static_cast<size_t>(head));
      const int c = feats.shape[1];
      for (int r = 0; r < feats.shape[0]; ++r)
        out.emplace_back(feats.ptr() + static_cast<int64_t>(r) * c, feats.ptr() + static_cast<int64_t>(r + 1) * c);
    }
    return out;
  }

  // The teacher base model with auxiliary machinery stripped; probes consume
  // this view of the state.
  const BaseModel& detach_auxiliary() const { return *teacher_.base; }

  ViewStream run_branch(Branch& br, Tape* tape, const Tensor& images, bool base_only = false,
                        const std::vector<uint8_t>* token_mask = nullptr) {
    ViewStream vs;
    TokenOutputs base_out = br.base->forward(tape, images, token_mask);
    vs.base_tokens = base_out.tokens;
    vs.base_pooled = base_out.pooled;
    if (!base_only) {
      for (auto& head : br.heads) {
        Tensor ht = head->forward(tape, base_out.tokens, cfg_.base.class_token);
        vs.head_tokens.push_back(ht);
        vs.head_pooled.push_back(pooled_representation(
            ht, cfg_.base.class_token ? PoolPolicy::ClassToken : PoolPolicy::MeanPool, cfg_.base.class_token));
      }
    }
    return vs;
  }

  // Base-stream logits. In search mode each head pairs with its own base
  // projection, selected by `head`.
  Tensor project_base(Branch& br, Tape* tape, const ViewStream& vs, int head) const {
    if (mode() == EngineConfig::Mode::Search) return br.proj_base_each.at(static_cast<size_t>(head)).forward(tape, vs.base_pooled);
    return br.proj_base.forward(tape, vs.base_pooled);
  }

  // Head-stream logits: per-head projection in single/search mode, the concat
  // projection in concat mode. In concat mode with head >= 0 the shared base
  // projection measures that head's features (measurement convention; no
  // extra parameters).
  Tensor project_head_stream(Branch& br, Tape* tape, const ViewStream& vs, int head) const {
    switch (mode()) {
      case EngineConfig::Mode::Baseline:
        throw contract_error("no auxiliary head stream in baseline mode");
      case EngineConfig::Mode::Single: {
        const ProjectionHead& p = cfg_.objective.share_projections ? br.proj_base : br.proj_heads.at(0);
        return p.forward(tape, vs.head_pooled.at(0));
      }
      case EngineConfig::Mode::Search:
        return br.proj_heads.at(static_cast<size_t>(head)).forward(tape, vs.head_pooled.at(static_cast<size_t>(head)));
      case EngineConfig::Mode::Concat: {
        if (head < 0) return br.proj_concat.forward(tape, multi_head_concat(vs.head_pooled));
        return br.proj_base.forward(tape, vs.head_pooled.at(static_cast<size_t>(head)));
      }
    }
    throw contract_error("invalid mode");
  }

  int64_t warmup_steps() const {
    if (cfg_.total_steps <= 0 || cfg_.optim.epochs <= 0) return 0;
    return cfg_.total_steps * cfg_.optim.warmup_epochs / cfg_.optim.epochs;
  }

 private:
  void build_branch(Branch& br) {
    const uint64_t seed = cfg_.seed;
    br.base = std::make_unique<BaseModel>(cfg_.base, br.params, "base", derive_seed(seed, {0x62617365}));
    for (const auto& hs : cfg_.heads) {
      const uint64_t hseed = head_seed(hs.id);
      br.heads.push_back(std::make_unique<AuxiliaryHead>(hs, cfg_.base.embed_width, br.params,
                                                         "head." + std::to_string(hs.id), hseed,
                                                         cfg_.base.patch_tokens()));
    }
    const int K = cfg_.objective.K;
    const int hidden = cfg_.objective.proj_hidden;
    if (cfg_.objective.kind == LossKind::Masked) {
      Rng rng(derive_seed(seed, {0x646563}));
      const int c = cfg_.base.embed_width;
      br.dec_base = LinearLayer::create(br.params, "dec.base", c, br.heads.at(0)->width(), rng);
      br.dec_head = LinearLayer::create(br.params, "dec.head", br.heads.at(0)->width(),
                                        3 * cfg_.base.patch_size * cfg_.base.patch_size, rng);
      return;
    }
    switch (cfg_.mode()) {
      case EngineConfig::Mode::Baseline:
        br.proj_base = ProjectionHead(br.params, "proj.base", cfg_.base.embed_width, hidden, K,
                                      derive_seed(seed, {0x7062}));
        break;
      case EngineConfig::Mode::Single: {
        br.proj_base = ProjectionHead(br.params, "proj.base", cfg_.base.embed_width, hidden, K,
                                      derive_seed(seed, {0x7062}));
        if (!cfg_.objective.share_projections) {
          br.proj_heads.push_back(ProjectionHead(br.params, "proj.head." + std::to_string(cfg_.heads[0].id),
                                                 br.heads.at(0)->width(), hidden, K,
                                                 derive_seed(head_seed(cfg_.heads[0].id), {0x7068})));
        } else if (br.heads.at(0)->width() != cfg_.base.embed_width) {
          throw config_error("share_projections requires the head width to equal the base width");
        }
        break;
      }
      case EngineConfig::Mode::Concat: {
        br.proj_base = ProjectionHead(br.params, "proj.base", cfg_.base.embed_width, hidden, K,
                                      derive_seed(seed, {0x7062}));
        int total = 0;
        for (auto& h : br.heads) {
          if (h->width() != cfg_.base.embed_width)
            throw config_error("multi-head mode requires head widths equal to the base width");
          total += h->width();
        }
        br.proj_concat = ProjectionHead(br.params, "proj.concat", total, hidden, K, derive_seed(seed, {0x7063}));
        break;
      }
      case EngineConfig::Mode::Search: {
        for (size_t i = 0; i < cfg_.heads.size(); ++i) {
          const uint64_t hs = head_seed(cfg_.heads[i].id);
          br.proj_base_each.push_back(ProjectionHead(br.params, "proj.base." + std::to_string(cfg_.heads[i].id),
                                                     cfg_.base.embed_width, hidden, K, derive_seed(hs, {0x7062})));
          br.proj_heads.push_back(ProjectionHead(br.params, "proj.head." + std::to_string(cfg_.heads[i].id),
                                                 br.heads.at(i)->width(), hidden, K, derive_seed(hs, {0x7068})));
        }
        break;
      }
    }
  }

  uint64_t head_seed(int id) const {
    if (!head_seed_overrides_.empty()) {
      for (size_t i = 0; i < cfg_.heads.size(); ++i)
        if (cfg_.heads[i].id == id) return head_seed_overrides_.at(i);
    }
    return derive_seed(cfg_.seed, {0x68656164, static_cast<uint64_t>(id)});
  }

 public:
  // Test hook: build candidate heads (and their projections) from explicit
  // seeds instead of id-derived ones. Must be set before construction, so it
  // is a static-config field on EngineConfig in spirit; kept here to avoid
  // leaking into the JSON schema.
  static HsslEngine with_head_seeds(EngineConfig cfg, std::vector<uint64_t> seeds) {
    HsslEngine e(std::move(cfg), std::move(seeds));
    return e;
  }

 private:
  HsslEngine(EngineConfig cfg, std::vector<uint64_t> head_seeds)
      : cfg_(std::move(cfg)), head_seed_overrides_(std::move(head_seeds)) {
    cfg_.validate();
    if (head_seed_overrides_.size() != cfg_.heads.size())
      throw contract_error("head seed override count mismatch");
    build_branch(student_);
    build_branch(teacher_);
    opt_ = std::make_unique<AdamW>(cfg_.optim.beta1, cfg_.optim.beta2, cfg_.optim.weight_decay);
    centers_.assign(static_cast<size_t>(center_stream_count()),
                    std::vector<float>(static_cast<size_t>(cfg_.objective.K), 0.0f));
    if (cfg_.objective.kind == LossKind::Contrastive)
      bank_ = std::make_unique<MemoryBank>(cfg_.objective.K, cfg_.objective.bank_size);
  }

  // Center streams: [0] base (or per-head base in search), then head streams.
  int center_stream_count() const {
    switch (cfg_.mode()) {
      case EngineConfig::Mode::Baseline: return 1;
      case EngineConfig::Mode::Single: return 2;
      case EngineConfig::Mode::Concat: return 2;
      case EngineConfig::Mode::Search: return 2 * head_count();
    }
    return 1;
  }

  std::vector<float>& center_for_base_stream(int head) {
    if (mode() == EngineConfig::Mode::Search) return centers_[static_cast<size_t>(2 * head)];
    return centers_[0];
  }

  std::vector<float>& center_for_head(int head) {
    switch (cfg_.mode()) {
      case EngineConfig::Mode::Baseline: throw contract_error("no head stream");
      case EngineConfig::Mode::Single:
        return cfg_.objective.share_projections ? centers_[0] : centers_[1];
      case EngineConfig::Mode::Concat: return centers_[1];  // the concat stream
      case EngineConfig::Mode::Search: return centers_[static_cast<size_t>(2 * head + 1)];
    }
    throw contract_error("invalid mode");
  }

  // Clustering / contrastive pairwise loss over teacher globals x student
  // views, excluding identical view indices.
  Tensor pair_loss(Tape& tape, const ViewBatch& vb, std::vector<ViewStream>& teacher_streams) {
    const int gc = vb.global_count;
    const int nviews = static_cast<int>(vb.views.size());
    const int teacher_views = cfg_.objective.symmetrize ? gc : 1;
    teacher_streams.clear();
    for (int t = 0; t < gc; ++t) teacher_streams.push_back(run_branch(teacher_, nullptr, vb.views[static_cast<size_t>(t)]));

    std::vector<ViewStream> student_streams;
    for (int s = 0; s < nviews; ++s)
      student_streams.push_back(run_branch(student_, &tape, vb.views[static_cast<size_t>(s)]));

    const bool hetero = cfg_.objective.supervision == Supervision::Heterogeneous;
    const double taut = cfg_.objective.tau_teacher;
    const double taus = cfg_.objective.tau_student;

    if (cfg_.objective.kind == LossKind::Contrastive) return contrastive_pairs(tape, teacher_streams, student_streams, teacher_views);

    // Precompute teacher probability targets per stream.
    const EngineConfig::Mode md = mode();
    std::vector<Tensor> t_base(static_cast<size_t>(teacher_views));
    std::vector<std::vector<Tensor>> t_head(static_cast<size_t>(teacher_views));
    for (int t = 0; t < teacher_views; ++t) {
      if (md == EngineConfig::Mode::Baseline || (!hetero && md != EngineConfig::Mode::Search))
        t_base[static_cast<size_t>(t)] =
            teacher_distribution(project_base(teacher_, nullptr, teacher_streams[static_cast<size_t>(t)], 0), centers_[0], taut);
      if (md == EngineConfig::Mode::Single || md == EngineConfig::Mode::Concat) {
        const int hsel = md == EngineConfig::Mode::Concat ? -1 : 0;
        t_head[static_cast<size_t>(t)].push_back(teacher_distribution(
            project_head_stream(teacher_, nullptr, teacher_streams[static_cast<size_t>(t)], hsel),
            center_for_head(0), taut));
      } else if (md == EngineConfig::Mode::Search) {
        for (int h = 0; h < head_count(); ++h)
          t_head[static_cast<size_t>(t)].push_back(teacher_distribution(
              project_head_stream(teacher_, nullptr, teacher_streams[static_cast<size_t>(t)], h), center_for_head(h), taut));
      }
    }

    Tensor total;
    int pairs = 0;
    bool first = true;
    auto accumulate = [&](Tensor term) {
      total = first ? term : add(total, term);
      first = false;
    };

    for (int t = 0; t < teacher_views; ++t) {
      for (int s = 0; s < nviews; ++s) {
        if (s == t) continue;
        const ViewStream& ss = student_streams[static_cast<size_t>(s)];
        switch (md) {
          case EngineConfig::Mode::Baseline: {
            Tensor logits = project_base(student_, &tape, ss, 0);
            accumulate(cross_entropy_from_logits(t_base[static_cast<size_t>(t)], logits, taus));
            break;
          }
          case EngineConfig::Mode::Single:
          case EngineConfig::Mode::Concat: {
            const Tensor& target = t_head[static_cast<size_t>(t)][0];
            Tensor base_logits = project_base(student_, &tape, ss, 0);
            Tensor head_logits = project_head_stream(student_, &tape, ss, md == EngineConfig::Mode::Concat ? -1 : 0);
            const Tensor& base_target = hetero ? target : t_base[static_cast<size_t>(t)];
            accumulate(add(cross_entropy_from_logits(base_target, base_logits, taus),
                           cross_entropy_from_logits(target, head_logits, taus)));
            break;
          }
          case EngineConfig::Mode::Search: {
            Tensor sum;
            bool hfirst = true;
            for (int h = 0; h < head_count(); ++h) {
              const Tensor& target = t_head[static_cast<size_t>(t)][static_cast<size_t>(h)];
              Tensor base_logits = project_base(student_, &tape, ss, h);
              Tensor head_logits = project_head_stream(student_, &tape, ss, h);
              Tensor term = add(cross_entropy_from_logits(target, base_logits, taus),
                                cross_entropy_from_logits(target, head_logits, taus));
              sum = hfirst ? term : add(sum, term);
              hfirst = false;
            }
            accumulate(scale(sum, 1.0 / head_count()));
            break;
          }
        }
        ++pairs;
      }
    }
    if (pairs == 0) throw contract_error("no teacher/student view pairs to train on");
    return scale(total, 1.0 / pairs);
  }

  // Teacher keys: the head stream when a head exists, the base stream in the
  // bare-baseline run.
  Tensor teacher_key_rows(const ViewStream& ts) {
    if (head_count() == 0) return l2_normalize_rows(project_base(teacher_, nullptr, ts, 0));
    return l2_normalize_rows(project_head_stream(teacher_, nullptr, ts, 0));
  }

  Tensor contrastive_pairs(Tape& tape, std::vector<ViewStream>& teacher_streams,
                           std::vector<ViewStream>& student_streams, int teacher_views) {
    const bool hetero = cfg_.objective.supervision == Supervision::Heterogeneous;
    const bool has_head = head_count() > 0;
    const double tau = cfg_.objective.tau_contrastive;
    // keys from the teacher, negatives from the bank
    if (bank_->size() == 0) bank_->push_rows(teacher_key_rows(teacher_streams[0]));
    const std::vector<float> negatives = bank_->flat();

    std::vector<Tensor> keys_main(static_cast<size_t>(teacher_views)), keys_base(static_cast<size_t>(teacher_views));
    for (int t = 0; t < teacher_views; ++t) {
      keys_main[static_cast<size_t>(t)] = teacher_key_rows(teacher_streams[static_cast<size_t>(t)]);
      if (!hetero || !has_head)
        keys_base[static_cast<size_t>(t)] =
            l2_normalize_rows(project_base(teacher_, nullptr, teacher_streams[static_cast<size_t>(t)], 0));
    }

    Tensor total;
    bool first = true;
    int pairs = 0;
    for (int t = 0; t < teacher_views; ++t)
      for (int s = 0; s < static_cast<int>(student_streams.size()); ++s) {
        if (s == t) continue;
        ViewStream& ss = student_streams[static_cast<size_t>(s)];
        Tensor qb = l2_normalize_rows(project_base(student_, &tape, ss, 0));
        const Tensor& base_key =
            (hetero && has_head) ? keys_main[static_cast<size_t>(t)] : keys_base[static_cast<size_t>(t)];
        Tensor term = infonce_loss(qb, base_key, negatives, tau);
        if (has_head) {
          Tensor qh = l2_normalize_rows(project_head_stream(student_, &tape, ss, 0));
          term = add(term, infonce_loss(qh, keys_main[static_cast<size_t>(t)], negatives, tau));
        }
        total = first ? term : add(total, term);
        first = false;
        ++pairs;
      }
    if (pairs == 0) throw contract_error("no teacher/student view pairs to train on");
    return scale(total, 1.0 / pairs);
  }

  // Masked feature reconstruction on global view 0: the base model predicts
  // the teacher head's representations at masked positions; the head predicts
  // the RGB patch content there.
  Tensor masked_loss(Tape& tape, const ViewBatch& vb, std::vector<ViewStream>& teacher_streams) {
    const Tensor& view = vb.views.at(0);
    const int B = view.shape[0];
    const int pt = (view.shape[2] / cfg_.base.patch_size) * (view.shape[3] / cfg_.base.patch_size);
    std::vector<uint8_t> patch_mask(static_cast<size_t>(B) * pt, 0);
    Rng rng(derive_seed(cfg_.seed, {0x6d61736b, static_cast<uint64_t>(step_)}));
    const int per_sample = std::max(1, static_cast<int>(std::lround(cfg_.objective.mask_ratio * pt)));
    for (int b = 0; b < B; ++b) {
      std::vector<int> order(static_cast<size_t>(pt));
      for (int i = 0; i < pt; ++i) order[static_cast<size_t>(i)] = i;
      for (int i = pt - 1; i > 0; --i) std::swap(order[static_cast<size_t>(i)], order[static_cast<size_t>(rng.uniform_int(0, i))]);
      for (int i = 0; i < per_sample; ++i) patch_mask[static_cast<size_t>(b * pt + order[static_cast<size_t>(i)])] = 1;
    }
    // token mask includes the class slot when present (never masked)
    std::vector<uint8_t> token_mask = patch_mask;

    teacher_streams.clear();
    teacher_streams.push_back(run_branch(teacher_, nullptr, view));
    ViewStream st = run_branch(student_, &tape, view, false, &token_mask);

    const bool hetero = cfg_.objective.supervision == Supervision::Heterogeneous;
    Tensor student_patch_tokens = strip_class(st.base_tokens);
    Tensor pred_feat = student_.dec_base.forward(&tape, student_patch_tokens);
    Tensor target_feat = strip_class(hetero ? teacher_streams[0].head_tokens.at(0) : teacher_streams[0].base_tokens);
    Tensor loss1 = masked_reconstruction_loss(pred_feat, target_feat, patch_mask);

    Tensor head_tokens = strip_class(st.head_tokens.at(0));
    Tensor pred_rgb = student_.dec_head.forward(&tape, head_tokens);
    Tensor target_rgb = extract_patches(view, cfg_.base.patch_size);
    Tensor loss2 = masked_reconstruction_loss(pred_rgb, target_rgb, patch_mask);
    return add(loss1, loss2);
  }

  Tensor strip_class(const Tensor& tokens) {
    if (!cfg_.base.class_token) return tokens;
    return slice(tokens, 1, 1, tokens.shape[1] - 1);
  }

  void update_centers(const std::vector<ViewStream>& teacher_streams) {
    if (cfg_.objective.kind != LossKind::Clustering || teacher_streams.empty()) return;
    const double lam = cfg_.objective.center_momentum;
    // concatenate logits over the global views per stream
    auto update_stream = [&](std::vector<float>& center, const std::function<Tensor(const ViewStream&)>& f) {
      std::vector<Tensor> parts;
      for (const auto& ts : teacher_streams) parts.push_back(f(ts));
      Tensor all = parts.size() == 1 ? parts[0] : concat(parts, 0);
      center_update(center, all, lam);
    };
    auto base_stream = [&](int h) {
      return [this, h](const ViewStream& ts) { return project_base(teacher_, nullptr, ts, h); };
    };
    auto head_stream = [&](int h) {
      return [this, h](const ViewStream& ts) { return project_head_stream(teacher_, nullptr, ts, h); };
    };
    switch (mode()) {
      case EngineConfig::Mode::Baseline:
        update_stream(centers_[0], base_stream(0));
        break;
      case EngineConfig::Mode::Single:
        update_stream(centers_[0], base_stream(0));
        if (!cfg_.objective.share_projections) update_stream(centers_[1], head_stream(0));
        break;
      case EngineConfig::Mode::Concat:
        update_stream(centers_[0], base_stream(0));
        update_stream(centers_[1], head_stream(-1));  // the concat stream
        break;
      case EngineConfig::Mode::Search:
        for (int h = 0; h < head_count(); ++h) {
          update_stream(centers_[static_cast<size_t>(2 * h)], base_stream(h));
          update_stream(centers_[static_cast<size_t>(2 * h + 1)], head_stream(h));
        }
        break;
    }
  }

  std::vector<double> discrepancy_samples(const ViewStream* ts) {
    std::vector<double> out;
    if (ts == nullptr || head_count() == 0) return out;
    if (cfg_.objective.kind == LossKind::Masked) return std::vector<double>(static_cast<size_t>(head_count()), 0.0);
    for (int h = 0; h < head_count(); ++h) {
      Tensor pb = teacher_distribution(project_base(teacher_, nullptr, *ts, h), center_for_base_stream(h),
                                       cfg_.objective.tau_teacher);
      Tensor ph = teacher_distribution(project_head_stream(teacher_, nullptr, *ts, h), center_for_head(h),
                                       cfg_.objective.tau_teacher);
      out.push_back(kl_discrepancy(pb, ph));
    }
    return out;
  }

  std::string diagnose_nonfinite(const ViewBatch& vb) const {
    std::string msg = "non-finite loss at step " + std::to_string(step_);
    if (!vb.provenance.empty() && !vb.provenance[0].empty()) {
      msg += "; view 0 records:";
      for (size_t i = 0; i < std::min<size_t>(4, vb.provenance[0].size()); ++i) {
        const ViewProvenance& p = vb.provenance[0][i];
        msg += " id=" + std::to_string(p.record_id) + "(crop " + std::to_string(p.crop_w) + "x" +
               std::to_string(p.crop_h) + (p.flipped ? ",flip" : "") + ")";
      }
    }
    return msg;
  }

  EngineConfig cfg_;
  std::vector<uint64_t> head_seed_overrides_;
  Branch student_, teacher_;
  std::unique_ptr<AdamW> opt_;
  std::vector<std::vector<float>> centers_;
  std::unique_ptr<MemoryBank> bank_;
  int64_t step_ = 0;
};

// ---------------------------------------------------------------------------
// Epoch loop
// ---------------------------------------------------------------------------

inline int64_t steps_per_epoch(int64_t n, int batch_size) { return (n + batch_size - 1) / batch_size; }

struct EpochStats {
  int epoch = 0;
  double mean_loss = 0.0;
  std::vector<double> eval_discrepancy;  // per head, on the eval split
};

struct TrainHooks {
  std::function<void(const StepMetrics&)> on_step;
  std::function<void(const EpochStats&)> on_epoch;
};

// Runs the configured number of epochs. Batches are shuffled per epoch from
// the dataset seed; view augmentation depends only on (seed, record, epoch,
// step, view), so the optional prefetch thread cannot change results.
inline void run_training(HsslEngine& engine, const Dataset& train,
                         const std::vector<const ImageRecord*>* eval_records, TrainHooks hooks = {}) {
  const EngineConfig& cfg = engine.config();
  const int n = static_cast<int>(train.size());
  if (n == 0) throw contract_error("run_training: empty dataset");
  const int bs = cfg.optim.batch_size;
  const int64_t spe = steps_per_epoch(n, bs);

  for (int epoch = 0; epoch < cfg.optim.epochs; ++epoch) {
    const std::vector<int> order = epoch_shuffle(n, cfg.seed, epoch);
    auto make_batch = [&](int64_t local_step) -> std::optional<ViewBatch> {
      if (local_step >= spe) return std::nullopt;
      const int64_t begin = local_step * bs;
      const int64_t end = std::min<int64_t>(n, begin + bs);
      std::vector<const ImageRecord*> recs;
      for (int64_t i = begin; i < end; ++i) recs.push_back(&train.records[static_cast<size_t>(order[static_cast<size_t>(i)])]);
      const int64_t global_step = static_cast<int64_t>(epoch) * spe + local_step;
      return augment_multicrop(recs, cfg.multicrop, cfg.seed, epoch, global_step);
    };

    double loss_sum = 0.0;
    int64_t steps = 0;
    auto consume = [&](ViewBatch&& vb) {
      StepMetrics m = engine.train_step(vb, epoch);
      loss_sum += m.loss;
      ++steps;
      if (hooks.on_step) hooks.on_step(m);
    };

    if (cfg.prefetch) {
      BatchPrefetcher pf(make_batch, 2);
      while (auto vb = pf.next()) consume(std::move(*vb));
    } else {
      for (int64_t s = 0; s < spe; ++s) {
        auto vb = make_batch(s);
        consume(std::move(*vb));
      }
    }

    EpochStats es;
    es.epoch = epoch;
    es.mean_loss = steps > 0 ? loss_sum / static_cast<double>(steps) : 0.0;
    if (eval_records != nullptr && !eval_records->empty() && engine.head_count() > 0)
      es.eval_discrepancy = engine.eval_discrepancy(*eval_records);
    if (hooks.on_epoch) hooks.on_epoch(es);
  }
}

}  // namespace hssl
