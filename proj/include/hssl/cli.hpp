#pragma once

// Command surface: pretrain, search, probe, report. Everything below returns
// through exit codes (0 ok, 2 config, 3 numerical, 4 I/O) so the thin main()
// in tools/ stays trivial and tests can drive commands in-process.

#include <filesystem>
#include <iostream>
#include <map>
#include <optional>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "hssl/checkpoint.hpp"
#include "hssl/config.hpp"
#include "hssl/engine.hpp"
#include "hssl/io.hpp"
#include "hssl/metrics.hpp"
#include "hssl/probe.hpp"
#include "hssl/search.hpp"

namespace hssl::cli {

namespace fs = std::filesystem;

inline std::vector<const ImageRecord*> record_ptrs(const Dataset& ds) {
  std::vector<const ImageRecord*> out;
  out.reserve(ds.size());
  for (const auto& r : ds.records) out.push_back(&r);
  return out;
}

inline std::vector<std::string> head_id_strings(const EngineConfig& cfg) {
  std::vector<std::string> out;
  for (const auto& h : cfg.heads) out.push_back(std::to_string(h.id));
  return out;
}

// ---------------------------------------------------------------------------
// pretrain
// ---------------------------------------------------------------------------

inline int cmd_pretrain(RunConfig rc, const std::string& init_checkpoint) {
  const std::string out = rc.output_dir;
  fs::create_directories(out);
  atomic_write_file(out + "/resolved_config.json", rc.resolved.dump(2) + "\n");

  Dataset train, test;
  load_dataset_pair(rc.dataset, rc.seed, train, test);
  rc.engine.total_steps = steps_per_epoch(static_cast<int64_t>(train.size()), rc.engine.optim.batch_size) *
                          rc.engine.optim.epochs;
  HsslEngine engine(rc.engine);

  if (!init_checkpoint.empty()) {
    CheckpointData cp = load_checkpoint_file(init_checkpoint);
    if (cp.kind == 0) restore_engine(engine, cp);
    else warm_start_base(engine, cp);
  }

  std::vector<std::string> cols = {"step", "epoch", "loss", "lr"};
  for (const std::string& id : head_id_strings(rc.engine)) cols.push_back("d_head_" + id);
  cols.push_back("wall_ms");
  CsvWriter metrics(out + "/metrics.csv", cols);

  std::vector<std::string> ecols = {"epoch", "mean_loss"};
  for (const std::string& id : head_id_strings(rc.engine)) ecols.push_back("d_eval_head_" + id);
  CsvWriter epochs(out + "/epochs.csv", ecols);

  const std::vector<const ImageRecord*> eval_records = record_ptrs(test);
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    std::vector<std::string> row = {std::to_string(m.step), std::to_string(m.epoch), fmt_double(m.loss),
                                    fmt_double(m.lr)};
    for (double d : m.head_discrepancy) row.push_back(fmt_double(d));
    row.push_back(fmt_double(m.wall_ms, 6));
    metrics.row(row);
  };
  hooks.on_epoch = [&](const EpochStats& es) {
    std::vector<std::string> row = {std::to_string(es.epoch), fmt_double(es.mean_loss)};
    for (double d : es.eval_discrepancy) row.push_back(fmt_double(d));
    while (row.size() < ecols.size()) row.push_back("");
    epochs.row(row);
    if (rc.checkpoint_every_epochs > 0 && (es.epoch + 1) % rc.checkpoint_every_epochs == 0 &&
        es.epoch + 1 < rc.engine.optim.epochs) {
      save_checkpoint_file(checkpoint_from_engine(engine, rc.resolved),
                           out + "/checkpoint_epoch_" + std::to_string(es.epoch) + ".hssl");
    }
  };

  run_training(engine, train, &eval_records, hooks);

  metrics.close();
  epochs.close();
  save_checkpoint_file(checkpoint_from_engine(engine, rc.resolved), out + "/checkpoint_final.hssl");
  save_checkpoint_file(base_export_from_engine(engine, rc.resolved), out + "/base_export.hssl");
  std::cout << "pretrain complete: " << metrics.rows() << " steps, outputs in " << out << "\n";
  return 0;
}

// ---------------------------------------------------------------------------
// search
// ---------------------------------------------------------------------------

inline int cmd_search(RunConfig rc, double data_fraction_override) {
  if (rc.engine.heads.size() < 2) throw config_error("search requires at least two candidate heads in the config");
  const std::string out = rc.output_dir;
  fs::create_directories(out);
  atomic_write_file(out + "/resolved_config.json", rc.resolved.dump(2) + "\n");

  Dataset train, test;
  load_dataset_pair(rc.dataset, rc.seed, train, test);

  SearchOptions opts = rc.search;
  if (data_fraction_override > 0.0) opts.data_fraction = data_fraction_override;

  std::vector<std::string> cols = {"step", "epoch", "loss", "lr"};
  for (const std::string& id : head_id_strings(rc.engine)) cols.push_back("d_head_" + id);
  cols.push_back("wall_ms");
  CsvWriter metrics(out + "/search_metrics.csv", cols);
  TrainHooks hooks;
  hooks.on_step = [&](const StepMetrics& m) {
    std::vector<std::string> row = {std::to_string(m.step), std::to_string(m.epoch), fmt_double(m.loss),
                                    fmt_double(m.lr)};
    for (double d : m.head_discrepancy) row.push_back(fmt_double(d));
    row.push_back(fmt_double(m.wall_ms, 6));
    metrics.row(row);
  };

  const std::vector<const ImageRecord*> eval_records = record_ptrs(test);
  SearchResult res = run_search(rc.engine, train, eval_records, opts, hooks);
  metrics.close();

  CsvWriter heads(out + "/search_heads.csv", {"head_id", "d_mean", "d_min", "d_median", "d_max"});
  json jheads = json::array();
  for (const auto& r : res.reports) {
    heads.row({std::to_string(r.head_id), fmt_double(r.mean), fmt_double(r.min), fmt_double(r.median),
               fmt_double(r.max)});
    jheads.push_back({{"head_id", r.head_id},
                      {"d_mean", r.mean},
                      {"d_min", r.min},
                      {"d_median", r.median},
                      {"d_max", r.max}});
  }
  heads.close();
  json jres = {{"selected_head_id", res.selected_head_id},
               {"wall_time_seconds", res.wall_time_seconds},
               {"data_fraction", res.data_fraction},
               {"heads", jheads}};
  atomic_write_file(out + "/search_result.json", jres.dump(2) + "\n");
  std::cout << "search selected head " << res.selected_head_id << " in " << fmt_double(res.wall_time_seconds, 4)
            << "s\n";
  return 0;
}

// ---------------------------------------------------------------------------
// probe
// ---------------------------------------------------------------------------

struct LoadedModel {
  std::unique_ptr<HsslEngine> engine;        // full checkpoints
  std::unique_ptr<ParamStore> bare_params;   // base exports
  std::unique_ptr<BaseModel> bare_base;
  RunConfig rc;

  std::vector<std::vector<float>> base_features(const std::vector<const ImageRecord*>& recs) {
    if (engine) return engine->teacher_base_features(recs);
    std::vector<std::vector<float>> out;
    const int n = static_cast<int>(recs.size());
    const int batch = 64;
    for (int at = 0; at < n; at += batch) {
      std::vector<const ImageRecord*> chunk(recs.begin() + at, recs.begin() + std::min(n, at + batch));
      Tensor images = records_to_tensor(chunk, rc.engine.multicrop.global_size);
      TokenOutputs to = bare_base->forward(nullptr, images);
      const int c = to.pooled.shape[1];
      for (int r = 0; r < to.pooled.shape[0]; ++r)
        out.emplace_back(to.pooled.ptr() + static_cast<int64_t>(r) * c,
                         to.pooled.ptr() + static_cast<int64_t>(r + 1) * c);
    }
    return out;
  }

  int head_count() const { return engine ? engine->head_count() : 0; }
};

inline LoadedModel load_model(const std::string& checkpoint_path) {
  CheckpointData cp = load_checkpoint_file(checkpoint_path);
  LoadedModel lm;
  lm.rc = parse_run_config(cp.config);
  if (cp.kind == 0) {
    lm.engine = std::make_unique<HsslEngine>(lm.rc.engine);
    restore_engine(*lm.engine, cp);
  } else {
    lm.bare_params = std::make_unique<ParamStore>();
    lm.bare_base = std::make_unique<BaseModel>(lm.rc.engine.base, *lm.bare_params, "base",
                                               derive_seed(lm.rc.engine.seed, {0x62617365}));
    for (size_t i = 0; i < lm.bare_params->size(); ++i) {
      const CheckpointBlob* blob = cp.find((*lm.bare_params)[i].name);
      if (blob == nullptr) throw checkpoint_error("base export missing " + (*lm.bare_params)[i].name);
      if (blob->shape != (*lm.bare_params)[i].shape)
        throw checkpoint_error("shape mismatch for " + (*lm.bare_params)[i].name);
      *(*lm.bare_params)[i].value = blob->data;
    }
  }
  return lm;
}

inline FeatureMatrix to_feature_matrix(std::vector<std::vector<float>> rows, const Dataset& ds,
                                       const std::string& provenance) {
  FeatureMatrix fm;
  fm.rows = std::move(rows);
  for (const auto& r : ds.records) fm.labels.push_back(r.label);
  fm.provenance = provenance;
  fm.validate();
  return fm;
}

inline ProbeResult run_probe_kind(const ProbeConfig& pc, const std::string& kind, const FeatureMatrix& train,
                                  const FeatureMatrix& test) {
  if (kind == "linear") return linear_probe(train, test, pc.linear_epochs, pc.linear_lr);
  return knn_probe(train, test, pc.k, pc.knn_temperature);
}

inline int cmd_probe(const std::string& checkpoint_path, const std::string& checkpoint2_path,
                     const std::string& config_path, std::string probe_kind, const std::vector<double>& alpha_list,
                     const std::string& out_dir, std::optional<uint64_t> seed_override) {
  LoadedModel lm = load_model(checkpoint_path);
  RunConfig rc = config_path.empty() ? lm.rc : load_run_config(config_path);
  if (seed_override) rc.seed = *seed_override;
  if (probe_kind.empty()) probe_kind = rc.probe.kind;
  const std::string out = out_dir.empty() ? rc.output_dir : out_dir;
  fs::create_directories(out);

  Dataset train, test;
  load_dataset_pair(rc.dataset, rc.seed, train, test);
  const auto train_ptrs = record_ptrs(train);
  const auto test_ptrs = record_ptrs(test);

  if (probe_kind == "blend") {
    if (checkpoint2_path.empty()) throw config_error("blend probe requires --checkpoint2");
    if (alpha_list.empty()) throw config_error("blend probe requires --alpha-list");
    LoadedModel lm2 = load_model(checkpoint2_path);
    FeatureMatrix tr1 = to_feature_matrix(lm.base_features(train_ptrs), train, "ckpt1.base");
    FeatureMatrix te1 = to_feature_matrix(lm.base_features(test_ptrs), test, "ckpt1.base");
    FeatureMatrix tr2 = to_feature_matrix(lm2.base_features(train_ptrs), train, "ckpt2.base");
    FeatureMatrix te2 = to_feature_matrix(lm2.base_features(test_ptrs), test, "ckpt2.base");
    CsvWriter curve(out + "/blend_curve.csv", {"alpha", "accuracy"});
    json points = json::array();
    for (double a : alpha_list) {
      FeatureMatrix btr = blend_representations(tr1, tr2, a);
      FeatureMatrix bte = blend_representations(te1, te2, a);
      ProbeResult pr = knn_probe(btr, bte, rc.probe.k, rc.probe.knn_temperature);
      curve.row({fmt_double(a, 6), fmt_double(pr.accuracy)});
      points.push_back({{"alpha", a}, {"accuracy", pr.accuracy}});
    }
    curve.close();
    json jres = {{"probe", "blend"}, {"k", rc.probe.k}, {"points", points}};
    atomic_write_file(out + "/probe_result.json", jres.dump(2) + "\n");
    std::cout << "blend probe wrote " << alpha_list.size() << " points to " << out << "/blend_curve.csv\n";
    return 0;
  }

  FeatureMatrix ftrain = to_feature_matrix(lm.base_features(train_ptrs), train, "teacher.base");
  FeatureMatrix ftest = to_feature_matrix(lm.base_features(test_ptrs), test, "teacher.base");
  ProbeResult base_res = run_probe_kind(rc.probe, probe_kind, ftrain, ftest);

  std::vector<std::pair<int, ProbeResult>> head_results;
  for (int h = 0; h < lm.head_count(); ++h) {
    FeatureMatrix htr = to_feature_matrix(lm.engine->pooled_features(train_ptrs, h), train, "teacher.head");
    FeatureMatrix hte = to_feature_matrix(lm.engine->pooled_features(test_ptrs, h), test, "teacher.head");
    head_results.emplace_back(lm.rc.engine.heads[static_cast<size_t>(h)].id,
                              run_probe_kind(rc.probe, probe_kind, htr, hte));
  }

  std::vector<std::string> cols = {"id", "label", "pred_base", "correct_base"};
  for (const auto& [id, res] : head_results) {
    cols.push_back("pred_head_" + std::to_string(id));
    cols.push_back("correct_head_" + std::to_string(id));
  }
  CsvWriter corr(out + "/probe_correctness.csv", cols);
  for (int i = 0; i < ftest.count(); ++i) {
    std::vector<std::string> row = {std::to_string(test.records[static_cast<size_t>(i)].id),
                                    std::to_string(ftest.labels[static_cast<size_t>(i)]),
                                    std::to_string(base_res.predictions[static_cast<size_t>(i)]),
                                    std::to_string(static_cast<int>(base_res.correct[static_cast<size_t>(i)]))};
    for (const auto& [id, res] : head_results) {
      row.push_back(std::to_string(res.predictions[static_cast<size_t>(i)]));
      row.push_back(std::to_string(static_cast<int>(res.correct[static_cast<size_t>(i)])));
    }
    corr.row(row);
  }
  corr.close();

  json jheads = json::array();
  for (const auto& [id, res] : head_results) jheads.push_back({{"head_id", id}, {"accuracy", res.accuracy}});
  json jres = {{"probe", probe_kind},
               {"k", rc.probe.k},
               {"accuracy", base_res.accuracy},
               {"heads", jheads},
               {"test_count", ftest.count()}};
  atomic_write_file(out + "/probe_result.json", jres.dump(2) + "\n");
  std::cout << "probe accuracy " << fmt_double(base_res.accuracy, 6) << " on " << ftest.count() << " samples\n";
  return 0;
}

// ---------------------------------------------------------------------------
// report
// ---------------------------------------------------------------------------

struct MonotoneSegment {
  int from = 0, to = 0;
  bool rising = true;
};

inline std::vector<MonotoneSegment> monotone_segments(const std::vector<double>& ys) {
  std::vector<MonotoneSegment> segs;
  if (ys.size() < 2) return segs;
  MonotoneSegment cur{0, 1, ys[1] >= ys[0]};
  for (size_t i = 2; i < ys.size(); ++i) {
    const bool rise = ys[i] >= ys[i - 1];
    if (rise == cur.rising) cur.to = static_cast<int>(i);
    else {
      segs.push_back(cur);
      cur = MonotoneSegment{static_cast<int>(i - 1), static_cast<int>(i), rise};
    }
  }
  segs.push_back(cur);
  return segs;
}

inline int cmd_report(const std::string& run_dir, std::string baseline_dump, std::string hssl_dump,
                      std::string out_dir) {
  if (out_dir.empty()) out_dir = run_dir;
  const std::string metrics_path = run_dir + "/metrics.csv";
  std::vector<std::string> missing;
  if (!fs::exists(metrics_path)) missing.push_back(metrics_path);
  if (baseline_dump.empty() && fs::exists(run_dir + "/probe_baseline.csv"))
    baseline_dump = run_dir + "/probe_baseline.csv";
  if (hssl_dump.empty() && fs::exists(run_dir + "/probe_hssl.csv")) hssl_dump = run_dir + "/probe_hssl.csv";
  if (!missing.empty()) {
    std::string msg = "report inputs not found:";
    for (const auto& m : missing) msg += " " + m;
    throw io_error(msg);
  }
  fs::create_directories(out_dir);

  CsvTable metrics = read_csv(metrics_path);
  const int ecol = metrics.column("epoch");
  const int lcol = metrics.column("loss");
  if (ecol < 0 || lcol < 0) throw format_error("metrics.csv lacks epoch/loss columns");
  std::vector<int> dcols;
  std::vector<std::string> dnames;
  for (size_t c = 0; c < metrics.columns.size(); ++c)
    if (metrics.columns[c].rfind("d_head_", 0) == 0) {
      dcols.push_back(static_cast<int>(c));
      dnames.push_back(metrics.columns[c]);
    }

  std::map<int, std::pair<double, int>> loss_by_epoch;  // sum, count
  std::map<int, std::vector<double>> d_by_epoch;
  for (const auto& row : metrics.rows) {
    const int e = std::stoi(row[static_cast<size_t>(ecol)]);
    loss_by_epoch[e].first += std::stod(row[static_cast<size_t>(lcol)]);
    loss_by_epoch[e].second += 1;
    auto& dv = d_by_epoch[e];
    dv.resize(dcols.size(), 0.0);
    for (size_t i = 0; i < dcols.size(); ++i) dv[i] += std::stod(row[static_cast<size_t>(dcols[i])]);
  }

  std::vector<std::string> ecols = {"epoch", "mean_loss"};
  for (const auto& n : dnames) ecols.push_back("mean_" + n);
  CsvWriter epochs_csv(out_dir + "/report_epochs.csv", ecols);
  std::vector<double> first_d_curve;
  std::string txt = "run report for " + run_dir + "\n\nepoch  mean_loss";
  for (const auto& n : dnames) txt += "  mean_" + n;
  txt += "\n";
  for (const auto& [e, sums] : loss_by_epoch) {
    const double mean_loss = sums.first / sums.second;
    std::vector<std::string> row = {std::to_string(e), fmt_double(mean_loss, 6)};
    txt += std::to_string(e) + "  " + fmt_double(mean_loss, 6);
    const auto& dv = d_by_epoch[e];
    for (size_t i = 0; i < dv.size(); ++i) {
      const double mean_d = dv[i] / sums.second;
      row.push_back(fmt_double(mean_d, 6));
      txt += "  " + fmt_double(mean_d, 6);
      if (i == 0) first_d_curve.push_back(mean_d);
    }
    txt += "\n";
    epochs_csv.row(row);
  }
  epochs_csv.close();

  if (!first_d_curve.empty()) {
    txt += "\ndiscrepancy dynamics (" + (dnames.empty() ? std::string("-") : dnames[0]) + "):\n";
    for (const MonotoneSegment& s : monotone_segments(first_d_curve))
      txt += std::string("  ") + (s.rising ? "rises" : "falls") + " over epochs " + std::to_string(s.from) + ".." +
             std::to_string(s.to) + "\n";
  }

  if (!baseline_dump.empty() && !hssl_dump.empty()) {
    CsvTable base_t = read_csv(baseline_dump);
    CsvTable hssl_t = read_csv(hssl_dump);
    const int b_id = base_t.column("id"), b_ok = base_t.column("correct_base");
    const int h_id = hssl_t.column("id"), h_ok = hssl_t.column("correct_base");
    if (b_id < 0 || b_ok < 0 || h_id < 0 || h_ok < 0)
      throw format_error("probe dumps must carry id and correct_base columns");
    SolvedSets sets;
    for (const auto& row : base_t.rows) {
      const int id = std::stoi(row[static_cast<size_t>(b_id)]);
      sets.universe.insert(id);
      if (row[static_cast<size_t>(b_ok)] == "1") sets.baseline_base.insert(id);
    }
    for (const auto& row : hssl_t.rows) {
      const int id = std::stoi(row[static_cast<size_t>(h_id)]);
      if (!sets.universe.count(id)) throw contract_error("probe dumps cover different sample universes");
      if (row[static_cast<size_t>(h_ok)] == "1") sets.hssl_base.insert(id);
    }

    CsvWriter sets_csv(out_dir + "/report_sets.csv", {"head_id", "n_s", "siou"});
    txt += "\nnewly solved samples (vs baseline):\nhead  N_s  sIoU\n";
    for (size_t c = 0; c < hssl_t.columns.size(); ++c) {
      const std::string& name = hssl_t.columns[c];
      if (name.rfind("correct_head_", 0) != 0) continue;
      const std::string id = name.substr(std::string("correct_head_").size());
      SolvedSets s = sets;
      for (const auto& row : hssl_t.rows)
        if (row[c] == "1") s.hssl_head.insert(std::stoi(row[static_cast<size_t>(h_id)]));
      const int ns = count_newly_solved(s);
      std::string siou_str;
      try {
        siou_str = fmt_double(siou(s), 6);
      } catch (const undefined_metric_error&) {
        siou_str = "undefined";
      }
      sets_csv.row({id, std::to_string(ns), siou_str});
      txt += id + "  " + std::to_string(ns) + "  " + siou_str + "\n";
    }
    sets_csv.close();
  }

  atomic_write_file(out_dir + "/report.txt", txt);
  std::cout << txt;
  return 0;
}

// ---------------------------------------------------------------------------
// argument parsing and exit-code mapping
// ---------------------------------------------------------------------------

inline int run(const std::vector<std::string>& args) {
  CLI::App app{"desk-scale heterogeneous self-supervised pretraining engine"};
  app.require_subcommand(1);

  std::string config_path, out_override, checkpoint_path, checkpoint2_path, probe_kind, run_dir;
  std::string baseline_dump, hssl_dump;
  std::optional<uint64_t> seed_override;
  uint64_t seed_raw = 0;
  double data_fraction = 0.0;
  std::vector<double> alpha_list;

  auto add_seed = [&](CLI::App* cmd) { cmd->add_option("--seed", seed_raw, "override the config seed"); };

  CLI::App* pretrain = app.add_subcommand("pretrain", "run heterogeneous self-supervised pretraining");
  pretrain->add_option("--config", config_path, "JSON run configuration")->required();
  pretrain->add_option("--out", out_override, "output directory (overrides output_dir)");
  pretrain->add_option("--checkpoint", checkpoint_path, "resume (full checkpoint) or warm-start (base export)");
  add_seed(pretrain);

  CLI::App* search = app.add_subcommand("search", "one-pass parallel search over candidate heads");
  search->add_option("--config", config_path, "JSON run configuration")->required();
  search->add_option("--out", out_override, "output directory (overrides output_dir)");
  search->add_option("--data-fraction", data_fraction, "fraction of training data used by the search");
  add_seed(search);

  CLI::App* probe = app.add_subcommand("probe", "frozen-feature evaluation of a checkpoint");
  probe->add_option("--checkpoint", checkpoint_path, "checkpoint to evaluate")->required();
  probe->add_option("--checkpoint2", checkpoint2_path, "second checkpoint (blend probe)");
  probe->add_option("--config", config_path, "override dataset/probe sections (defaults to embedded config)");
  probe->add_option("--probe", probe_kind, "knn | linear | blend");
  probe->add_option("--alpha-list", alpha_list, "blend coefficients")->delimiter(',');
  probe->add_option("--out", out_override, "output directory");
  add_seed(probe);

  CLI::App* report = app.add_subcommand("report", "aggregate run metrics into summary tables");
  report->add_option("dir", run_dir, "run directory with metrics CSVs")->required();
  report->add_option("--baseline-probe", baseline_dump, "baseline probe correctness CSV");
  report->add_option("--hssl-probe", hssl_dump, "HSSL probe correctness CSV");
  report->add_option("--out", out_override, "output directory (defaults to the run directory)");

  std::vector<std::string> argv(args.rbegin(), args.rend());
  try {
    app.parse(argv);
  } catch (const CLI::ParseError& e) {
    if (e.get_exit_code() == 0) {
      std::cout << app.help();
      return 0;
    }
    std::cerr << e.what() << "\n";
    return 2;
  }

  for (CLI::App* sub : {pretrain, search, probe})
    if (app.got_subcommand(sub) && sub->count("--seed") > 0) seed_override = seed_raw;

  try {
    if (app.got_subcommand(pretrain) || app.got_subcommand(search)) {
      RunConfig rc = load_run_config(config_path);
      if (seed_override) {
        rc.seed = *seed_override;
        rc.engine.seed = *seed_override;
        rc.resolved["seed"] = *seed_override;
      }
      if (!out_override.empty()) {
        rc.output_dir = out_override;
        rc.resolved["output_dir"] = out_override;
      }
      if (app.got_subcommand(pretrain)) return cmd_pretrain(std::move(rc), checkpoint_path);
      return cmd_search(std::move(rc), data_fraction);
    }
    if (app.got_subcommand(probe))
      return cmd_probe(checkpoint_path, checkpoint2_path, config_path, probe_kind, alpha_list, out_override,
                       seed_override);
    return cmd_report(run_dir, baseline_dump, hssl_dump, out_override);
  } catch (const config_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const parameter_error& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 2;
  } catch (const numerical_error& e) {
    std::cerr << "numerical failure: " << e.what() << "\n";
    return 3;
  } catch (const io_error& e) {
    std::cerr << "I/O error: " << e.what() << "\n";
    return 4;
  } catch (const format_error& e) {
    std::cerr << "format error: " << e.what() << "\n";
    return 4;
  } catch (const checkpoint_error& e) {
    std::cerr << "checkpoint error: " << e.what() << "\n";
    return 4;
  } catch (const error& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
}

}  // namespace hssl::cli
