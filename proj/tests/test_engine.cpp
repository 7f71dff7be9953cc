#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <doctest.h>

#include <chrono>

#include "hssl/engine.hpp"
#include "hssl/metrics.hpp"
#include "hssl/search.hpp"
#include "support.hpp"

using namespace hssl;

namespace {

EngineConfig tiny_config(uint64_t seed = 1) {
  EngineConfig cfg;
  cfg.seed = seed;
  cfg.base.image_size = 16;
  cfg.base.patch_size = 4;
  cfg.base.embed_width = 16;
  cfg.base.depth = 1;
  cfg.heads.push_back(AuxiliaryHeadSpec::uniform(0, MixerKind::DepthwiseConv, 1, 16, 2.0, true));
  cfg.objective.K = 8;
  cfg.objective.proj_hidden = 16;
  cfg.multicrop.global_size = 16;
  cfg.multicrop.local_count = 0;
  cfg.optim.batch_size = 4;
  cfg.optim.epochs = 1;
  cfg.optim.grad_clip = 0.0;
  cfg.prefetch = false;
  return cfg;
}

ViewBatch batch_for(const EngineConfig& cfg, const Dataset& ds, int64_t step = 0, int n = -1) {
  std::vector<const ImageRecord*> recs;
  const int count = n < 0 ? cfg.optim.batch_size : n;
  for (int i = 0; i < count; ++i) recs.push_back(&ds.records[static_cast<size_t>(i) % ds.size()]);
  return augment_multicrop(recs, cfg.multicrop, cfg.seed, 0, step);
}

std::vector<float> grads_with_prefix(ParamStore& ps, const std::string& prefix) {
  std::vector<float> out;
  for (size_t i = 0; i < ps.size(); ++i)
    if (ps[i].name.rfind(prefix, 0) == 0) out.insert(out.end(), ps[i].grad.begin(), ps[i].grad.end());
  return out;
}

std::vector<float> values_snapshot(ParamStore& ps) {
  std::vector<float> out;
  for (size_t i = 0; i < ps.size(); ++i) out.insert(out.end(), ps[i].value->begin(), ps[i].value->end());
  return out;
}

}  // namespace

TEST_SUITE("discrepancy kernels") {
  TEST_CASE("kl closed forms and asymmetry") {
    Tensor p = make_tensor<float>({2}, {0.5f, 0.5f});
    Tensor q = make_tensor<float>({2}, {0.9f, 0.1f});
    CHECK(kl_discrepancy(p, p) == doctest::Approx(0.0).epsilon(1e-10));
    CHECK(kl_discrepancy(p, q) == doctest::Approx(0.51083).epsilon(1e-4));
    CHECK(kl_discrepancy(q, p) == doctest::Approx(0.36806).epsilon(1e-4));
    CHECK_THROWS_AS(kl_discrepancy(p, make_tensor<float>({2}, {0.9f, 0.6f})), contract_error);
  }

  TEST_CASE("kl nonnegative, zero iff equal") {
    Rng rng(5);
    for (int trial = 0; trial < 1000; ++trial) {
      const int k = rng.uniform_int(2, 12);
      Tensor p = make_tensor<float>({1, k}, testsupport::rand_prob_row<float>(rng, k));
      Tensor q = make_tensor<float>({1, k}, testsupport::rand_prob_row<float>(rng, k));
      CHECK(kl_discrepancy(p, q) >= 0.0);
    }
    for (int trial = 0; trial < 50; ++trial) {
      const int k = rng.uniform_int(2, 12);
      Tensor p = make_tensor<float>({1, k}, testsupport::rand_prob_row<float>(rng, k));
      CHECK(kl_discrepancy(p, p) < 1e-12);
      // perturb one coordinate noticeably
      std::vector<float> moved(p.ptr(), p.ptr() + k);
      const float delta = 0.02f;
      moved[0] += delta;
      moved[1] -= delta;
      if (moved[1] <= 0.0f) continue;
      Tensor q = make_tensor<float>({1, k}, moved);
      CHECK(kl_discrepancy(p, q) > 1e-12);
    }
  }

  TEST_CASE("newly solved and sIoU match the worked sets") {
    SolvedSets sets;
    for (int i = 1; i <= 10; ++i) sets.universe.insert(i);
    sets.baseline_base = {1, 2, 3};
    sets.hssl_base = {1, 2, 4, 5};
    sets.hssl_head = {4, 6};
    CHECK(count_newly_solved(sets) == 2);
    CHECK(siou(sets) == doctest::Approx(0.5));

    SolvedSets sub = sets;
    sub.hssl_head = {1, 2};  // H inside B1
    CHECK(count_newly_solved(sub) == 0);

    SolvedSets all = sets;
    all.baseline_base.clear();
    all.hssl_head = all.universe;
    CHECK(count_newly_solved(all) == 10);

    SolvedSets cover = sets;
    cover.hssl_head = {1, 2, 4, 5, 7};  // superset of B2
    CHECK(siou(cover) == doctest::Approx(1.0));

    SolvedSets disjoint = sets;
    disjoint.hssl_head = {1};
    CHECK(siou(disjoint) == doctest::Approx(0.0));

    SolvedSets undef = sets;
    undef.hssl_base = {1, 2};  // B2 inside B1
    CHECK_THROWS_AS(siou(undef), undefined_metric_error);

    SolvedSets outside = sets;
    outside.hssl_head.insert(99);
    CHECK_THROWS_AS(count_newly_solved(outside), contract_error);
  }

  TEST_CASE("set metrics match brute-force enumeration on random systems") {
    Rng rng(9);
    for (int trial = 0; trial < 100; ++trial) {
      const int u = rng.uniform_int(4, 64);
      SolvedSets sets;
      std::vector<uint8_t> b1(static_cast<size_t>(u)), b2(static_cast<size_t>(u)), h(static_cast<size_t>(u));
      for (int i = 0; i < u; ++i) {
        sets.universe.insert(i);
        b1[static_cast<size_t>(i)] = rng.bernoulli(0.4);
        b2[static_cast<size_t>(i)] = rng.bernoulli(0.5);
        h[static_cast<size_t>(i)] = rng.bernoulli(0.5);
        if (b1[static_cast<size_t>(i)]) sets.baseline_base.insert(i);
        if (b2[static_cast<size_t>(i)]) sets.hssl_base.insert(i);
        if (h[static_cast<size_t>(i)]) sets.hssl_head.insert(i);
      }
      // enumeration oracle over every id
      int ns_oracle = 0, denom = 0, num = 0;
      for (int i = 0; i < u; ++i) {
        if (h[static_cast<size_t>(i)] && !b1[static_cast<size_t>(i)]) ++ns_oracle;
        if (b2[static_cast<size_t>(i)] && !b1[static_cast<size_t>(i)]) {
          ++denom;
          if (h[static_cast<size_t>(i)]) ++num;
        }
      }
      CHECK(count_newly_solved(sets) == ns_oracle);
      if (denom == 0) CHECK_THROWS_AS(siou(sets), undefined_metric_error);
      else CHECK(siou(sets) == doctest::Approx(static_cast<double>(num) / denom));
    }
  }

  TEST_CASE("select_head: argmax with documented tie-break") {
    std::vector<DiscrepancyReport> reports;
    reports.push_back(DiscrepancyReport::from_samples(0, {0.073}, 0));  // token-MLP style candidate
    reports.push_back(DiscrepancyReport::from_samples(1, {0.087}, 0));  // conv style candidate
    CHECK(select_head(reports).selected_head_id == 1);

    CHECK(select_head({reports[0]}).selected_head_id == 0);

    std::vector<DiscrepancyReport> tie;
    tie.push_back(DiscrepancyReport::from_samples(5, {0.2}, 0));
    tie.push_back(DiscrepancyReport::from_samples(2, {0.2}, 0));
    CHECK(select_head(tie).selected_head_id == 2);

    CHECK_THROWS_AS(select_head({}), contract_error);
  }

  TEST_CASE("select_head invariant under strictly increasing transforms") {
    Rng rng(13);
    for (int trial = 0; trial < 50; ++trial) {
      std::vector<DiscrepancyReport> reports;
      const int n = rng.uniform_int(2, 6);
      for (int i = 0; i < n; ++i) reports.push_back(DiscrepancyReport::from_samples(i, {rng.uniform(0, 1)}, 0));
      const int chosen = select_head(reports).selected_head_id;
      std::vector<DiscrepancyReport> mapped = reports;
      const double a = rng.uniform(0.5, 3.0), b = rng.uniform(-1.0, 1.0);
      for (auto& r : mapped) r.mean = a * std::exp(r.mean) + b;
      CHECK(select_head(mapped).selected_head_id == chosen);
    }
  }
}

TEST_SUITE("hssl engine") {
  TEST_CASE("identity auxiliary with shared projections reproduces the base stream") {
    EngineConfig cfg = tiny_config(3);
    cfg.heads.clear();
    cfg.heads.push_back(AuxiliaryHeadSpec::uniform(0, MixerKind::DepthwiseConv, 2, 16, 2.0, false));
    cfg.objective.share_projections = true;
    HsslEngine engine(cfg);
    testsupport::zero_residual_branches(engine.student().params, "head.0.");
    testsupport::zero_residual_branches(engine.teacher().params, "head.0.");

    Dataset ds = generate_synthetic(2, 4, 16, 5);
    ViewBatch vb = batch_for(cfg, ds);
    HsslEngine::ForwardProbes probes = engine.hssl_forward_probes(vb);
    for (int64_t i = 0; i < probes.teacher_base.numel(); ++i)
      CHECK(probes.teacher_head.ptr()[i] == doctest::Approx(probes.teacher_base.ptr()[i]).epsilon(2e-3));
    for (int64_t i = 0; i < probes.student_base.numel(); ++i)
      CHECK(probes.student_head.ptr()[i] == doctest::Approx(probes.student_base.ptr()[i]).epsilon(2e-3));
  }

  TEST_CASE("train_step loss equals the two-term loss assembled from probes") {
    EngineConfig cfg = tiny_config(7);
    cfg.objective.symmetrize = false;  // exactly one teacher/student pair
    HsslEngine engine(cfg);
    Dataset ds = generate_synthetic(2, 4, 16, 7);
    ViewBatch vb = batch_for(cfg, ds);
    HsslEngine::ForwardProbes probes = engine.hssl_forward_probes(vb);
    const double expected = hssl_total_loss(probes.teacher_head, probes.student_base, probes.student_head).scalar();
    StepMetrics m = engine.train_step(vb);
    CHECK(m.loss == doctest::Approx(expected).epsilon(1e-4));
  }

  TEST_CASE("multi_head_concat widths add, order fixed, degenerate passthrough") {
    Tensor a = make_tensor<float>({1, 2}, {1, 2});
    Tensor b = make_tensor<float>({1, 1}, {3});
    Tensor cat = multi_head_concat({a, b});
    CHECK(cat.shape == std::vector<int>{1, 3});
    CHECK(cat.ptr()[0] == 1.0f);
    CHECK(cat.ptr()[1] == 2.0f);
    CHECK(cat.ptr()[2] == 3.0f);

    Tensor swapped = multi_head_concat({b, a});
    CHECK(swapped.ptr()[0] == 3.0f);

    Tensor same = multi_head_concat({a});
    CHECK(same.ptr() == a.ptr());

    Tensor wrong = make_tensor<float>({2, 2}, {0, 0, 0, 0});
    CHECK_THROWS_AS(multi_head_concat({a, wrong}), dimension_error);
  }

  TEST_CASE("two 16-wide heads concatenate to a 32-wide stream") {
    EngineConfig cfg = tiny_config(9);
    cfg.heads.push_back(AuxiliaryHeadSpec::uniform(1, MixerKind::Pooling, 1, 16, 2.0, true));
    HsslEngine engine(cfg);
    CHECK(engine.mode() == EngineConfig::Mode::Concat);
    Dataset ds = generate_synthetic(2, 4, 16, 9);
    ViewBatch vb = batch_for(cfg, ds);
    ViewStream vs = engine.run_branch(engine.student(), nullptr, vb.views[0]);
    Tensor cat = multi_head_concat(vs.head_pooled);
    CHECK(cat.shape == std::vector<int>{cfg.optim.batch_size, 32});
    // CSV schema: one discrepancy sample per head
    StepMetrics m = engine.train_step(vb);
    CHECK(m.head_discrepancy.size() == 2);
  }

  TEST_CASE("determinism: same seed and batch give identical metrics and parameters") {
    EngineConfig cfg = tiny_config(11);
    Dataset ds = generate_synthetic(2, 8, 16, 11);
    auto run = [&] {
      HsslEngine engine(cfg);
      StepMetrics m1 = engine.train_step(batch_for(cfg, ds, 0));
      StepMetrics m2 = engine.train_step(batch_for(cfg, ds, 1));
      auto snap = values_snapshot(engine.student().params);
      return std::make_tuple(m1.loss, m2.loss, snap);
    };
    auto a = run();
    auto b = run();
    CHECK(std::get<0>(a) == std::get<0>(b));
    CHECK(std::get<1>(a) == std::get<1>(b));
    CHECK(std::get<2>(a) == std::get<2>(b));
  }

  TEST_CASE("zero learning rate leaves parameters unchanged") {
    EngineConfig cfg = tiny_config(13);
    cfg.optim.lr = 0.0;
    HsslEngine engine(cfg);
    Dataset ds = generate_synthetic(2, 4, 16, 13);
    auto before = values_snapshot(engine.student().params);
    StepMetrics m = engine.train_step(batch_for(cfg, ds));
    CHECK(std::isfinite(m.loss));
    // EMA of an unchanged student also keeps the teacher fixed (equal init)
    CHECK(values_snapshot(engine.student().params) == before);
  }

  TEST_CASE("teacher changes only through the EMA update") {
    EngineConfig cfg = tiny_config(17);
    cfg.objective.ema_momentum = 1.0;  // freeze the teacher
    HsslEngine engine(cfg);
    Dataset ds = generate_synthetic(2, 4, 16, 17);
    auto before = values_snapshot(engine.teacher().params);
    engine.train_step(batch_for(cfg, ds, 0));
    engine.train_step(batch_for(cfg, ds, 1));
    CHECK(values_snapshot(engine.teacher().params) == before);
    for (size_t i = 0; i < engine.teacher().params.size(); ++i)
      for (float g : engine.teacher().params[i].grad) CHECK(g == 0.0f);

    EngineConfig cfg2 = tiny_config(17);
    cfg2.objective.ema_momentum = 0.5;
    HsslEngine engine2(cfg2);
    auto before2 = values_snapshot(engine2.teacher().params);
    engine2.train_step(batch_for(cfg2, ds, 0));
    CHECK(values_snapshot(engine2.teacher().params) != before2);
  }

  TEST_CASE("supervision manner: the base target depends on head parameters only under heterogeneous supervision") {
    Dataset ds = generate_synthetic(2, 4, 16, 19);
    auto base_term_grads = [&](Supervision manner, uint64_t head_seed) {
      EngineConfig cfg = tiny_config(23);
      cfg.objective.supervision = manner;
      HsslEngine engine = HsslEngine::with_head_seeds(cfg, {head_seed});
      ViewBatch vb = batch_for(cfg, ds);
      // the base-model term of the loss: target from the teacher, student base stream
      ViewStream t0 = engine.run_branch(engine.teacher(), nullptr, vb.views[0]);
      Tensor target_logits = manner == Supervision::Heterogeneous
                                 ? engine.project_head_stream(engine.teacher(), nullptr, t0, 0)
                                 : engine.project_base(engine.teacher(), nullptr, t0, 0);
      Tensor target = teacher_distribution(target_logits, engine.centers()[0], cfg.objective.tau_teacher);
      engine.student().params.zero_grad();
      Tape tape;
      ViewStream s1 = engine.run_branch(engine.student(), &tape, vb.views[1]);
      Tensor logits = engine.project_base(engine.student(), &tape, s1, 0);
      Tensor loss = cross_entropy_from_logits(target, logits, cfg.objective.tau_student);
      tape.backward(loss);
      return grads_with_prefix(engine.student().params, "base.");
    };

    auto homo_a = base_term_grads(Supervision::Homogeneous, 111);
    auto homo_b = base_term_grads(Supervision::Homogeneous, 222);
    CHECK(homo_a == homo_b);  // bitwise: the head never enters the base term

    auto het_a = base_term_grads(Supervision::Heterogeneous, 111);
    auto het_b = base_term_grads(Supervision::Heterogeneous, 222);
    CHECK(het_a != het_b);
  }

  TEST_CASE("loss and gradients stay finite over many random steps") {
    EngineConfig cfg = tiny_config(29);
    cfg.optim.lr = 3e-3;
    HsslEngine engine(cfg);
    Dataset ds = generate_synthetic(4, 16, 16, 29);
    for (int step = 0; step < 1000; ++step) {
      std::vector<const ImageRecord*> recs;
      Rng rng(derive_seed(29, {static_cast<uint64_t>(step)}));
      for (int i = 0; i < cfg.optim.batch_size; ++i)
        recs.push_back(&ds.records[static_cast<size_t>(rng.uniform_int(0, static_cast<int>(ds.size()) - 1))]);
      ViewBatch vb = augment_multicrop(recs, cfg.multicrop, cfg.seed, 0, step);
      StepMetrics m = engine.train_step(vb);
      REQUIRE(std::isfinite(m.loss));
      REQUIRE(std::isfinite(m.grad_norm));
    }
  }

  TEST_CASE("training reduces the loss: epoch 5 below epoch 1 on the synthetic set") {
    std::vector<double> verdicts;
    for (uint64_t seed : {1ULL, 2ULL, 3ULL}) {
      EngineConfig cfg = tiny_config(seed);
      cfg.base.embed_width = 32;
      cfg.base.depth = 2;
      cfg.objective.K = 32;
      cfg.objective.proj_hidden = 64;
      cfg.objective.center_momentum = 0.99;
      cfg.objective.ema_momentum = 0.99;
      cfg.multicrop.global_scale_lo = 0.8;
      cfg.multicrop.jitter = 0.2;
      cfg.multicrop.grayscale_prob = 0.1;
      cfg.optim.batch_size = 8;
      cfg.optim.epochs = 25;  // 8 steps per epoch -> 200 steps
      cfg.optim.lr = 2e-4;
      cfg.optim.warmup_epochs = 2;
      Dataset ds = generate_synthetic(4, 16, 16, seed);
      cfg.total_steps = steps_per_epoch(static_cast<int64_t>(ds.size()), cfg.optim.batch_size) * cfg.optim.epochs;
      HsslEngine engine(cfg);
      std::vector<double> epoch_means;
      TrainHooks hooks;
      hooks.on_epoch = [&](const EpochStats& es) { epoch_means.push_back(es.mean_loss); };
      run_training(engine, ds, nullptr, hooks);
      verdicts.push_back(epoch_means[4] - epoch_means[0]);
    }
    std::sort(verdicts.begin(), verdicts.end());
    CHECK(verdicts[1] < 0.0);  // median seed improves
  }

  TEST_CASE("non-finite loss aborts with a diagnostic") {
    EngineConfig cfg = tiny_config(31);
    HsslEngine engine(cfg);
    // poison a parameter to force a NaN forward
    (*engine.student().params.at("base.patch_embed.w").value)[0] = std::numeric_limits<float>::quiet_NaN();
    Dataset ds = generate_synthetic(2, 4, 16, 31);
    CHECK_THROWS_WITH_AS(engine.train_step(batch_for(cfg, ds)), doctest::Contains("step"), numerical_error);
  }

  TEST_CASE("local crops flow through the student only") {
    EngineConfig cfg = tiny_config(37);
    cfg.multicrop.local_count = 2;
    cfg.multicrop.local_size = 8;
    HsslEngine engine(cfg);
    Dataset ds = generate_synthetic(2, 4, 16, 37);
    StepMetrics m = engine.train_step(batch_for(cfg, ds));
    CHECK(std::isfinite(m.loss));
  }

  TEST_CASE("detach_auxiliary exposes a bare base model") {
    EngineConfig cfg = tiny_config(41);
    HsslEngine engine(cfg);
    int64_t base_param_count = 0;
    for (size_t i = 0; i < engine.teacher().params.size(); ++i)
      if (engine.teacher().params[i].name.rfind("base.", 0) == 0)
        base_param_count += engine.teacher().params[i].numel();
    ParamStore fresh;
    BaseModel bare(cfg.base, fresh, "base", derive_seed(cfg.seed, {0x62617365}));
    CHECK(fresh.total_params() == base_param_count);

    Dataset ds = generate_synthetic(2, 4, 16, 41);
    std::vector<const ImageRecord*> recs = {&ds.records[0], &ds.records[1]};
    auto feats = engine.teacher_base_features(recs);
    Tensor imgs = records_to_tensor(recs, 16);
    TokenOutputs direct = engine.detach_auxiliary().forward(nullptr, imgs);
    for (int r = 0; r < 2; ++r)
      for (int c = 0; c < 16; ++c)
        CHECK(feats[static_cast<size_t>(r)][static_cast<size_t>(c)] == direct.pooled.ptr()[r * 16 + c]);
  }
}

TEST_SUITE("parallel search") {
  TEST_CASE("identical candidates with identical seeds reproduce the single-head loss") {
    Dataset ds = generate_synthetic(2, 8, 16, 43);

    EngineConfig single = tiny_config(43);
    HsslEngine es = HsslEngine::with_head_seeds(single, {43});

    EngineConfig multi = tiny_config(43);
    multi.heads.push_back(AuxiliaryHeadSpec::uniform(1, MixerKind::DepthwiseConv, 1, 16, 2.0, true));
    multi.heads.push_back(AuxiliaryHeadSpec::uniform(2, MixerKind::DepthwiseConv, 1, 16, 2.0, true));
    multi.search_mode = true;
    HsslEngine em = HsslEngine::with_head_seeds(multi, {43, 43, 43});

    ViewBatch vb = batch_for(single, ds);
    const double ls = es.train_step(vb).loss;
    const double lm = em.train_step(vb).loss;
    CHECK(lm == doctest::Approx(ls).epsilon(1e-6));
  }

  TEST_CASE("cross-head gradients are exactly zero") {
    Dataset ds = generate_synthetic(2, 8, 16, 47);
    auto head0_grads = [&](uint64_t other_seed) {
      EngineConfig cfg = tiny_config(47);
      cfg.heads.push_back(AuxiliaryHeadSpec::uniform(1, MixerKind::Pooling, 1, 16, 2.0, true));
      cfg.search_mode = true;
      cfg.optim.lr = 0.0;
      HsslEngine engine = HsslEngine::with_head_seeds(cfg, {1000, other_seed});
      StepMetrics m = engine.train_step(batch_for(cfg, ds));
      (void)m;
      auto g = grads_with_prefix(engine.student().params, "head.0.");
      auto gp = grads_with_prefix(engine.student().params, "proj.head.0.");
      auto gb = grads_with_prefix(engine.student().params, "proj.base.0.");
      g.insert(g.end(), gp.begin(), gp.end());
      g.insert(g.end(), gb.begin(), gb.end());
      return g;
    };
    auto a = head0_grads(2000);
    auto b = head0_grads(3000);
    CHECK(!a.empty());
    CHECK(a == b);  // bitwise: head 1's parameters never touch head 0's graph
  }

  TEST_CASE("run_search selects a candidate and reports per-head statistics") {
    EngineConfig cfg = tiny_config(53);
    cfg.heads.clear();
    cfg.heads.push_back(AuxiliaryHeadSpec::uniform(0, MixerKind::DepthwiseConv, 1, 16, 2.0, true));
    cfg.heads.push_back(AuxiliaryHeadSpec::uniform(1, MixerKind::Pooling, 1, 16, 2.0, true));
    cfg.heads.push_back(AuxiliaryHeadSpec::uniform(2, MixerKind::TokenMLP, 1, 16, 2.0, true));
    cfg.optim.epochs = 2;
    Dataset train = generate_synthetic(2, 16, 16, 53);
    Dataset eval = generate_synthetic(2, 8, 16, 54);
    std::vector<const ImageRecord*> eval_recs;
    for (const auto& r : eval.records) eval_recs.push_back(&r);

    SearchOptions opts;
    opts.data_fraction = 0.5;
    SearchResult res = run_search(cfg, train, eval_recs, opts);
    CHECK(res.reports.size() == 3);
    bool found = false;
    for (const auto& r : res.reports) {
      CHECK(r.min <= r.median);
      CHECK(r.median <= r.max);
      CHECK(r.mean >= 0.0);
      found |= r.head_id == res.selected_head_id;
    }
    CHECK(found);
    CHECK(res.wall_time_seconds > 0.0);

    EngineConfig dup = cfg;
    dup.heads[1] = dup.heads[0];
    dup.heads[1].id = 9;
    CHECK_THROWS_AS(run_search(dup, train, eval_recs, opts), config_error);

    EngineConfig one = cfg;
    one.heads.resize(1);
    CHECK_THROWS_AS(run_search(one, train, eval_recs, opts), config_error);
  }

  TEST_CASE("serial head keeps step cost within 1.3x of the bare baseline") {
    // the serial-attachment regime: a deep base carrying most of the budget,
    // a three-block head on top
    Dataset ds = generate_synthetic(2, 8, 32, 59);
    auto mean_step_ms = [&](bool with_head) {
      EngineConfig cfg;
      cfg.seed = 59;
      cfg.base.image_size = 32;
      cfg.base.patch_size = 8;
      cfg.base.embed_width = 64;
      cfg.base.depth = 12;
      if (with_head) cfg.heads.push_back(AuxiliaryHeadSpec::uniform(0, MixerKind::DepthwiseConv, 3, 64, 4.0, true));
      cfg.objective.K = 64;
      cfg.objective.proj_hidden = 128;
      cfg.multicrop.global_size = 32;
      cfg.multicrop.local_count = 0;
      cfg.optim.batch_size = 8;
      HsslEngine engine(cfg);
      std::vector<const ImageRecord*> recs;
      for (int i = 0; i < 8; ++i) recs.push_back(&ds.records[static_cast<size_t>(i)]);
      double total = 0.0;
      for (int s = 0; s < 5; ++s) {
        ViewBatch vb = augment_multicrop(recs, cfg.multicrop, cfg.seed, 0, s);
        auto t0 = std::chrono::steady_clock::now();
        engine.train_step(vb);
        const double ms = std::chrono::duration<double, std::milli>(std::chrono::steady_clock::now() - t0).count();
        if (s > 0) total += ms;  // discard the warmup step
      }
      return total / 4.0;
    };
    const double bare = mean_step_ms(false);
    const double serial = mean_step_ms(true);
    CHECK(serial <= 1.3 * bare);
  }
}
