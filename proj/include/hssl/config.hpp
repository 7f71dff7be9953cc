#pragma once

// The JSON run configuration: strict schema (unknown keys rejected), every
// default materialized into the resolved document that runs and checkpoints
// carry.

#include <set>
#include <string>
#include <vector>

#include <json.hpp>

#include "hssl/common.hpp"
#include "hssl/data.hpp"
#include "hssl/engine.hpp"
#include "hssl/io.hpp"
#include "hssl/search.hpp"

namespace hssl {

using json = nlohmann::json;

namespace detail {

// Tracks consumed keys so leftovers can be reported as schema violations.
// Holds its own copy; sub-objects are often built from temporaries.
class StrictObject {
 public:
  StrictObject(json j, std::string path) : j_(std::move(j)), path_(std::move(path)) {
    if (!j_.is_object()) throw config_error("expected an object at " + path_);
  }

  template <class T>
  T get(const std::string& key, const T& fallback, json& resolved) {
    seen_.insert(key);
    if (j_.contains(key)) {
      try {
        T v = j_.at(key).get<T>();
        resolved[key] = v;
        return v;
      } catch (const json::exception& e) {
        throw config_error("bad value for " + path_ + "." + key + ": " + e.what());
      }
    }
    resolved[key] = fallback;
    return fallback;
  }

  bool has(const std::string& key) {
    seen_.insert(key);
    return j_.contains(key);
  }

  const json& raw(const std::string& key) {
    seen_.insert(key);
    return j_.at(key);
  }

  void finish() const {
    std::string bad;
    for (auto it = j_.begin(); it != j_.end(); ++it)
      if (!seen_.count(it.key())) bad += (bad.empty() ? "" : ", ") + path_ + "." + it.key();
    if (!bad.empty()) throw config_error("unknown configuration keys: " + bad);
  }

 private:
  json j_;
  std::string path_;
  std::set<std::string> seen_;
};

}  // namespace detail

struct DatasetConfig {
  std::string type = "synthetic";  // synthetic | cifar
  std::string path;
  int classes = 4;
  int per_class_train = 100;
  int per_class_test = 50;
  int image_size = 32;
  int train_count = 0;  // cifar: 0 = all minus test_count
  int test_count = 0;   // cifar: 0 = 20%
};

struct ProbeConfig {
  std::string kind = "knn";  // knn | linear | blend
  int k = 10;
  double knn_temperature = 0.07;
  int linear_epochs = 200;
  double linear_lr = 0.05;
};

struct RunConfig {
  uint64_t seed = 1;
  std::string output_dir = "runs/out";
  DatasetConfig dataset;
  EngineConfig engine;
  SearchOptions search;
  ProbeConfig probe;
  int checkpoint_every_epochs = 0;  // 0 = final only
  json resolved;
};

inline RunConfig parse_run_config(const json& doc) {
  RunConfig rc;
  json resolved = json::object();
  detail::StrictObject root(doc, "config");

  rc.seed = root.get<uint64_t>("seed", 1, resolved);
  rc.output_dir = root.get<std::string>("output_dir", "runs/out", resolved);
  rc.checkpoint_every_epochs = root.get<int>("checkpoint_every_epochs", 0, resolved);

  {
    json sub = json::object();
    detail::StrictObject d(root.has("dataset") ? root.raw("dataset") : json::object(), "dataset");
    rc.dataset.type = d.get<std::string>("type", "synthetic", sub);
    rc.dataset.path = d.get<std::string>("path", "", sub);
    rc.dataset.classes = d.get<int>("classes", 4, sub);
    rc.dataset.per_class_train = d.get<int>("per_class_train", 100, sub);
    rc.dataset.per_class_test = d.get<int>("per_class_test", 50, sub);
    rc.dataset.image_size = d.get<int>("image_size", 32, sub);
    rc.dataset.train_count = d.get<int>("train_count", 0, sub);
    rc.dataset.test_count = d.get<int>("test_count", 0, sub);
    d.finish();
    if (rc.dataset.type != "synthetic" && rc.dataset.type != "cifar")
      throw config_error("dataset.type must be synthetic or cifar");
    if (rc.dataset.type == "cifar" && rc.dataset.path.empty())
      throw config_error("dataset.type cifar requires dataset.path");
    resolved["dataset"] = sub;
  }

  {
    json msub = json::object();
    detail::StrictObject m(root.has("model") ? root.raw("model") : json::object(), "model");
    {
      json bsub = json::object();
      detail::StrictObject b(m.has("base") ? m.raw("base") : json::object(), "model.base");
      rc.engine.base.patch_size = b.get<int>("patch_size", 4, bsub);
      rc.engine.base.image_size = b.get<int>("image_size", rc.dataset.image_size, bsub);
      rc.engine.base.embed_width = b.get<int>("embed_width", 64, bsub);
      rc.engine.base.depth = b.get<int>("depth", 4, bsub);
      rc.engine.base.mixer = mixer_from_string(b.get<std::string>("mixer", "attention", bsub));
      rc.engine.base.mlp_ratio = b.get<double>("mlp_ratio", 4.0, bsub);
      rc.engine.base.class_token = b.get<bool>("class_token", false, bsub);
      rc.engine.base.attn_heads = b.get<int>("attn_heads", 0, bsub);
      b.finish();
      msub["base"] = bsub;
    }
    {
      json heads = json::array();
      if (m.has("aux_heads")) {
        const json& arr = m.raw("aux_heads");
        if (!arr.is_array()) throw config_error("model.aux_heads must be an array");
        int auto_id = 0;
        for (const auto& hj : arr) {
          json hsub = json::object();
          detail::StrictObject h(hj, "model.aux_heads[]");
          const int id = h.get<int>("id", auto_id, hsub);
          const std::string mixer = h.get<std::string>("mixer", "depthwise_conv", hsub);
          const int depth = h.get<int>("depth", 2, hsub);
          const int width = h.get<int>("width", rc.engine.base.embed_width, hsub);
          const double ratio = h.get<double>("mlp_ratio", 4.0, hsub);
          const bool rm = h.get<bool>("remove_first_shortcut", true, hsub);
          h.finish();
          rc.engine.heads.push_back(AuxiliaryHeadSpec::uniform(id, mixer_from_string(mixer), depth, width, ratio, rm));
          heads.push_back(hsub);
          ++auto_id;
        }
      }
      msub["aux_heads"] = heads;
    }
    m.finish();
    resolved["model"] = msub;
  }

  {
    json sub = json::object();
    detail::StrictObject o(root.has("objective") ? root.raw("objective") : json::object(), "objective");
    rc.engine.objective.kind = loss_kind_from_string(o.get<std::string>("kind", "clustering", sub));
    rc.engine.objective.K = o.get<int>("K", 256, sub);
    rc.engine.objective.proj_hidden = o.get<int>("proj_hidden", 512, sub);
    rc.engine.objective.tau_student = o.get<double>("tau_student", 0.1, sub);
    rc.engine.objective.tau_teacher = o.get<double>("tau_teacher", 0.04, sub);
    rc.engine.objective.center_momentum = o.get<double>("center_momentum", 0.9, sub);
    rc.engine.objective.ema_momentum = o.get<double>("ema_momentum", 0.996, sub);
    rc.engine.objective.share_projections = o.get<bool>("share_projections", false, sub);
    rc.engine.objective.symmetrize = o.get<bool>("symmetrize", true, sub);
    const std::string sup = o.get<std::string>("supervision", "heterogeneous", sub);
    if (sup == "heterogeneous") rc.engine.objective.supervision = Supervision::Heterogeneous;
    else if (sup == "homogeneous") rc.engine.objective.supervision = Supervision::Homogeneous;
    else throw config_error("objective.supervision must be heterogeneous or homogeneous");
    const std::string gran = o.get<std::string>("granularity", "image", sub);
    if (gran == "patch")
      throw config_error("objective.granularity 'patch' is declared but not implemented; use 'image'");
    if (gran != "image") throw config_error("objective.granularity must be image or patch");
    rc.engine.objective.bank_size = o.get<int>("bank_size", 256, sub);
    rc.engine.objective.tau_contrastive = o.get<double>("tau_contrastive", 0.2, sub);
    rc.engine.objective.mask_ratio = o.get<double>("mask_ratio", 0.4, sub);
    o.finish();
    resolved["objective"] = sub;
  }

  {
    json sub = json::object();
    detail::StrictObject o(root.has("optimizer") ? root.raw("optimizer") : json::object(), "optimizer");
    rc.engine.optim.lr = o.get<double>("lr", 1e-3, sub);
    rc.engine.optim.weight_decay = o.get<double>("weight_decay", 0.04, sub);
    rc.engine.optim.beta1 = o.get<double>("beta1", 0.9, sub);
    rc.engine.optim.beta2 = o.get<double>("beta2", 0.999, sub);
    rc.engine.optim.grad_clip = o.get<double>("grad_clip", 3.0, sub);
    rc.engine.optim.warmup_epochs = o.get<int>("warmup_epochs", 1, sub);
    rc.engine.optim.epochs = o.get<int>("epochs", 10, sub);
    rc.engine.optim.batch_size = o.get<int>("batch_size", 32, sub);
    o.finish();
    resolved["optimizer"] = sub;
  }

  {
    json sub = json::object();
    detail::StrictObject o(root.has("multicrop") ? root.raw("multicrop") : json::object(), "multicrop");
    rc.engine.multicrop.global_count = o.get<int>("global_count", 2, sub);
    rc.engine.multicrop.global_size = o.get<int>("global_size", rc.dataset.image_size, sub);
    rc.engine.multicrop.local_count = o.get<int>("local_count", 0, sub);
    rc.engine.multicrop.local_size = o.get<int>("local_size", std::max(8, rc.dataset.image_size / 2), sub);
    std::vector<double> gs = o.get<std::vector<double>>("global_scale", {0.25, 1.0}, sub);
    std::vector<double> ls = o.get<std::vector<double>>("local_scale", {0.05, 0.25}, sub);
    if (gs.size() != 2 || ls.size() != 2) throw config_error("multicrop scale ranges must be [lo, hi]");
    rc.engine.multicrop.global_scale_lo = gs[0];
    rc.engine.multicrop.global_scale_hi = gs[1];
    rc.engine.multicrop.local_scale_lo = ls[0];
    rc.engine.multicrop.local_scale_hi = ls[1];
    rc.engine.multicrop.flip_prob = o.get<double>("flip_prob", 0.5, sub);
    rc.engine.multicrop.jitter = o.get<double>("jitter", 0.4, sub);
    rc.engine.multicrop.grayscale_prob = o.get<double>("grayscale_prob", 0.2, sub);
    rc.engine.prefetch = o.get<bool>("prefetch", true, sub);
    o.finish();
    resolved["multicrop"] = sub;
  }

  {
    json sub = json::object();
    detail::StrictObject o(root.has("search") ? root.raw("search") : json::object(), "search");
    rc.search.data_fraction = o.get<double>("data_fraction", 0.1, sub);
    o.finish();
    resolved["search"] = sub;
  }

  {
    json sub = json::object();
    detail::StrictObject o(root.has("probe") ? root.raw("probe") : json::object(), "probe");
    rc.probe.kind = o.get<std::string>("kind", "knn", sub);
    rc.probe.k = o.get<int>("k", 10, sub);
    rc.probe.knn_temperature = o.get<double>("knn_temperature", 0.07, sub);
    rc.probe.linear_epochs = o.get<int>("linear_epochs", 200, sub);
    rc.probe.linear_lr = o.get<double>("linear_lr", 0.05, sub);
    o.finish();
    if (rc.probe.kind != "knn" && rc.probe.kind != "linear" && rc.probe.kind != "blend")
      throw config_error("probe.kind must be knn, linear, or blend");
    resolved["probe"] = sub;
  }

  root.finish();
  rc.engine.seed = rc.seed;
  rc.engine.validate();
  rc.resolved = resolved;
  return rc;
}

inline RunConfig load_run_config(const std::string& path) {
  json doc;
  try {
    doc = json::parse(read_file(path));
  } catch (const json::exception& e) {
    throw config_error("cannot parse " + path + ": " + e.what());
  }
  return parse_run_config(doc);
}

// train/test provisioning per the dataset section
inline void load_dataset_pair(const DatasetConfig& dc, uint64_t seed, Dataset& train, Dataset& test) {
  if (dc.type == "synthetic") {
    if (dc.classes < 2) throw config_error("dataset.classes must be >= 2");
    train = generate_synthetic(dc.classes, dc.per_class_train, dc.image_size, derive_seed(seed, {0x7472}));
    test = generate_synthetic(dc.classes, dc.per_class_test, dc.image_size, derive_seed(seed, {0x7465}));
    return;
  }
  Dataset all = load_cifar_binary(dc.path);
  const int n = static_cast<int>(all.size());
  int test_n = dc.test_count > 0 ? dc.test_count : n / 5;
  int train_n = dc.train_count > 0 ? dc.train_count : n - test_n;
  if (train_n + test_n > n) throw config_error("dataset train/test split exceeds file size");
  train.num_classes = test.num_classes = all.num_classes;
  train.seed = test.seed = seed;
  train.records.assign(all.records.begin(), all.records.begin() + train_n);
  test.records.assign(all.records.end() - test_n, all.records.end());
}

}  // namespace hssl
