// Acceptance gate: ten numbered criteria, one PASS/FAIL line each.
#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "doctest.h"
#include "ssctl/train.hpp"

using namespace ssctl;

namespace {

void report(int k, bool pass) {
  std::printf("CRITERION %d: %s\n", k, pass ? "PASS" : "FAIL");
  std::fflush(stdout);
  CHECK_MESSAGE(pass, "criterion ", k);
}

double now_seconds() {
  return std::chrono::duration<double>(std::chrono::steady_clock::now().time_since_epoch())
      .count();
}

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticConfig three_domain_data(std::size_t n_samples, std::uint64_t seed) {
  SyntheticConfig c;
  c.n_domains = 3;
  c.proportions = {0.7, 0.2, 0.1};
  c.user_overlap = {0.8, 0.6};
  c.item_overlap = {0.7, 0.5};
  c.n_users = 400;
  c.n_items = 400;
  c.n_samples = n_samples;
  c.seed = seed;
  return c;
}

TrainConfig tiny_profile() {
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.batch_size = 256;
  cfg.seed = 11;
  cfg.model.embedding_dim = 8;
  cfg.model.expert_widths = {16, 8};
  cfg.model.n_shared_experts = 2;
  cfg.model.gate_hidden = {8};
  cfg.model.tower_hidden = {8};
  cfg.model.dropout = 0.1;
  cfg.classifier.epochs = 2;
  cfg.classifier.hidden = {16};
  return cfg;
}

double pairwise_auc(const std::vector<double>& s, const std::vector<int>& y) {
  double num = 0.0;
  std::size_t pairs = 0;
  for (std::size_t i = 0; i < s.size(); ++i) {
    if (y[i] != 1) continue;
    for (std::size_t j = 0; j < s.size(); ++j) {
      if (y[j] != 0) continue;
      ++pairs;
      if (s[i] > s[j]) num += 1.0;
      else if (s[i] == s[j]) num += 0.5;
    }
  }
  return num / static_cast<double>(pairs);
}

}  // namespace

TEST_CASE("criterion 1: gradient fidelity on the reference model") {
  const double t0 = now_seconds();
  bool pass = true;
  std::vector<GradCheckEntry> entries = gradcheck_reference(1);
  pass = pass && !entries.empty();
  for (const auto& e : entries) pass = pass && e.max_rel_err < 1e-4;
  const double elapsed = now_seconds() - t0;
  pass = pass && elapsed < 10.0;
  std::printf("  gradcheck: %zu parameter groups, %.2fs\n", entries.size(), elapsed);
  report(1, pass);
}

TEST_CASE("criterion 2: published RImp arithmetic from the printed AUC pairs") {
  struct TableRow {
    const char* name;
    double single;
    double auc[12];   // Mixed..SSCTL, column order of the published table
    double rimp[12];  // printed RImp, percent
  };
  static const char* kModels[12] = {"Mixed", "DeepFM", "xDeepFM", "SBTM",     "MMoE",  "PLE",
                                    "HMoE",  "STAR",   "AdaSparse", "HiNet", "PEPNet", "SSCTL"};
  static const TableRow kTable[] = {
      {"#1", 0.6276,
       {0.6309, 0.6316, 0.6325, 0.6305, 0.6302, 0.6299, 0.6307, 0.6309, 0.6310, 0.6298, 0.6304,
        0.6331},
       {0.53, 0.65, 0.79, 0.47, 0.41, 0.37, 0.50, 0.53, 0.55, 0.35, 0.45, 0.86}},
      {"#2", 0.6235,
       {0.6271, 0.6276, 0.6284, 0.6243, 0.6252, 0.6250, 0.6257, 0.6278, 0.6268, 0.6250, 0.6275,
        0.6301},
       {0.56, 0.65, 0.78, 0.12, 0.27, 0.25, 0.35, 0.68, 0.52, 0.24, 0.64, 1.17}},
      {"#3", 0.5530,
       {0.6022, 0.6013, 0.6038, 0.5853, 0.5997, 0.6066, 0.5760, 0.5773, 0.6022, 0.5990, 0.6024,
        0.6095},
       {8.95, 8.75, 9.21, 5.86, 8.45, 9.70, 4.17, 4.41, 8.91, 8.33, 8.95, 10.23}},
      {"D1", 0.6925,
       {0.6925, 0.6938, 0.6946, 0.6929, 0.6935, 0.6942, 0.6935, 0.6938, 0.6939, 0.6946, 0.6947,
        0.6951},
       {0.00, 0.18, 0.29, 0.06, 0.14, 0.25, 0.12, 0.18, 0.20, 0.30, 0.32, 0.38}},
      {"D2", 0.6501,
       {0.6725, 0.6753, 0.6758, 0.6690, 0.6747, 0.6754, 0.6684, 0.6718, 0.6759, 0.6759, 0.6741,
        0.6783},
       {3.44, 3.88, 3.95, 2.90, 3.78, 3.90, 2.82, 3.22, 3.96, 3.96, 3.70, 4.35}},
      {"D3", 0.7111,
       {0.7219, 0.7216, 0.7225, 0.7199, 0.7226, 0.7224, 0.7218, 0.7220, 0.7228, 0.7220, 0.7214,
        0.7245},
       {1.52, 1.48, 1.60, 1.24, 1.62, 1.58, 1.51, 1.53, 1.64, 1.53, 1.45, 1.89}},
      {"D4", 0.6560,
       {0.6853, 0.6844, 0.6858, 0.6772, 0.6855, 0.6835, 0.6814, 0.6819, 0.6852, 0.6865, 0.6853,
        0.6907},
       {4.48, 4.36, 4.56, 3.25, 4.51, 4.22, 3.90, 3.97, 4.47, 4.68, 4.49, 5.31}},
      {"D5", 0.6207,
       {0.6510, 0.6529, 0.6541, 0.6445, 0.6552, 0.6553, 0.6514, 0.6509, 0.6515, 0.6552, 0.6532,
        0.6591},
       {4.87, 5.18, 5.38, 3.82, 5.55, 5.56, 4.94, 4.86, 4.95, 5.56, 5.22, 6.19}},
      {"D6", 0.6061,
       {0.6700, 0.6673, 0.6722, 0.6613, 0.6740, 0.6691, 0.6657, 0.6669, 0.6753, 0.6734, 0.6777,
        0.6817},
       {10.53, 10.10, 10.90, 9.10, 11.19, 10.39, 9.82, 10.02, 11.40, 11.10, 11.48, 12.47}},
  };

  std::size_t total = 0;
  std::size_t mismatched = 0;
  for (const TableRow& row : kTable) {
    for (std::size_t j = 0; j < 12; ++j) {
      ++total;
      // compare at the table's own precision: round to two decimals first
      // (the statement's example pair (0.5530, 0.6095) -> +10.22 vs printed
      // +10.23 only lands inside the tolerance after rounding)
      const double computed = std::round(rimp(row.auc[j], row.single) * 100.0) / 100.0;
      const double err = std::abs(computed - row.rimp[j]);
      if (err > 0.01 + 1e-12) {
        ++mismatched;
        std::printf("  %-2s %-9s: printed %+6.2f, computed %+6.2f from (%.4f, %.4f)\n", row.name,
                    kModels[j], row.rimp[j], computed, row.single, row.auc[j]);
      }
    }
  }
  // The two pairs called out in the statement do reproduce:
  CHECK(std::abs(std::round(rimp(0.6309, 0.6276) * 100.0) / 100.0 - 0.53) <= 0.01 + 1e-12);
  CHECK(std::abs(std::round(rimp(0.6095, 0.5530) * 100.0) / 100.0 - 10.23) <= 0.01 + 1e-12);
  std::printf("  %zu of %zu printed RImp values are outside +/-0.01pp of the AUC arithmetic\n",
              mismatched, total);
  report(2, total == 108 && mismatched == 0);
}

TEST_CASE("criterion 3: truncated-Gaussian weight properties") {
  bool pass = true;
  Rng rng(33);
  for (int trial = 0; trial < 100; ++trial) {
    GaussianWeightState st;
    st.mu = 0.05 + 0.9 * rng.uniform();
    st.sigma = 0.01 + 0.99 * rng.uniform();
    double prev = -1.0;
    for (int i = 0; i <= 10000; ++i) {
      const double c = static_cast<double>(i) / 10000.0;
      const double w = gaussian_weight(c, st);
      pass = pass && w >= prev;
      if (c >= st.mu) pass = pass && w == 1.0;
      prev = w;
    }
    pass = pass &&
           std::abs(gaussian_weight(st.mu - st.sigma, st) - std::exp(-0.5)) < 1e-12;
  }
  report(3, pass);
}

TEST_CASE("criterion 4: EMA convergence under a stationary stream") {
  // uniform on mean +/- sqrt(3*var) has exactly the target mean and variance
  GaussianWeightState st = GaussianWeightState::init(6, 0.999);
  Rng rng(4);
  const double half = std::sqrt(3.0 * 0.01);
  std::vector<double> batch(64);
  for (int step = 0; step < 10000; ++step) {
    for (double& c : batch) c = 0.8 + half * (2.0 * rng.uniform() - 1.0);
    ema_update(st, batch);
  }
  const double var = st.sigma * st.sigma;
  std::printf("  mu=%.5f sigma^2=%.5f after 10^4 updates\n", st.mu, var);
  report(4, std::abs(st.mu - 0.8) < 1e-2 && std::abs(var - 0.01) < 2e-3);
}

TEST_CASE("criterion 5: AUC oracle equivalence on 1000 random instances") {
  bool pass = true;
  Rng rng(55);
  for (int trial = 0; trial < 1000; ++trial) {
    const std::size_t n = 2 + static_cast<std::size_t>(rng.uniform() * 498.0);
    // alternate continuous scores with heavily quantized (tie-rich) ones
    const double levels = trial % 2 == 0 ? 0.0 : 2.0 + std::floor(rng.uniform() * 6.0);
    std::vector<double> s(n);
    std::vector<int> y(n);
    for (std::size_t i = 0; i < n; ++i) {
      const double u = rng.uniform();
      s[i] = levels == 0.0 ? u : std::floor(u * levels) / levels;
      y[i] = rng.uniform() < 0.5 ? 1 : 0;
    }
    y[0] = 0;
    y[n - 1] = 1;
    pass = pass && std::abs(auc(s, y) - pairwise_auc(s, y)) < 1e-12;
  }
  report(5, pass);
}

TEST_CASE("criterion 6: lambda=0 collapses onto the backbone-only trajectory") {
  Dataset d = generate(three_domain_data(20000, 6));
  TrainConfig a = tiny_profile();
  a.epochs = 1;
  a.max_steps = 50;
  a.lambda = 0.0;
  a.use_pseudo = true;  // the lambda=0 arm still asks for the full machinery
  TrainConfig b = a;
  b.lambda = 0.7;
  b.use_pseudo = false;  // backbone-only: the collaborative loss removed

  PipelineResult ra = run_pipeline(d, a);
  PipelineResult rb = run_pipeline(d, b);
  bool pass = ra.report.loss_per_step.size() == 50 &&
              ra.report.loss_per_step == rb.report.loss_per_step &&
              parameter_hash(ra.state.model.parameters()) ==
                  parameter_hash(rb.state.model.parameters());

  // zero-initialized DN final layers also make the very first step of the
  // SDDN model bitwise equal to one with no SDDN at all
  TrainConfig c = b;
  c.model.sddn_scope = SddnScope::off;
  PipelineResult rc = run_pipeline(d, c);
  pass = pass && !rc.report.loss_per_step.empty() &&
         ra.report.loss_per_step[0] == rc.report.loss_per_step[0];
  report(6, pass);
}

TEST_CASE("criterion 7: desk-scale effectiveness on the two sparsest domains") {
  const double t0 = now_seconds();
  bool pass = true;
  int wins = 0;
  double worst_gap = 1.0;
  for (std::uint64_t seed = 1; seed <= 5; ++seed) {
    SyntheticConfig sc;  // Table-1 proportions are the defaults
    sc.n_samples = 100000;
    sc.seed = seed;
    Dataset d = generate(sc);
    Splits spl = split(d, SplitSpec{});

    TrainConfig full = tiny_profile();
    full.seed = seed;
    full.epochs = 6;
    full.model.dropout = 0.0;
    TrainConfig backbone = full;
    backbone.model.sddn_scope = SddnScope::off;
    backbone.use_pseudo = false;

    PipelineResult rf = run_pipeline(d, full);
    PipelineResult rb = run_pipeline(d, backbone);
    std::vector<DomainEval> ef =
        evaluate(rf.state.model, rf.state.classifier ? &*rf.state.classifier : nullptr, spl.test,
                 full.batch_size);
    std::vector<DomainEval> eb = evaluate(rb.state.model, nullptr, spl.test, full.batch_size);

    // domains 4 and 5 carry 1.06% and 0.59% of traffic
    double mf = 0.0, mb = 0.0;
    int counted = 0;
    for (std::size_t k : {std::size_t{4}, std::size_t{5}}) {
      if (ef[k].auc_valid && eb[k].auc_valid) {
        mf += ef[k].auc;
        mb += eb[k].auc;
        ++counted;
      }
    }
    REQUIRE(counted > 0);
    mf /= counted;
    mb /= counted;
    const double gap = mf - mb;
    if (gap >= 0.0) ++wins;
    worst_gap = std::min(worst_gap, gap);
    std::printf("  seed %llu: sparse-domain AUC %.4f (full) vs %.4f (backbone), gap %+.4f\n",
                static_cast<unsigned long long>(seed), mf, mb, gap);
  }
  const double elapsed = now_seconds() - t0;
  std::printf("  %d/5 seeds favor full SSCTL; worst gap %+.4f; %.1fs total\n", wins, worst_gap,
              elapsed);
  pass = wins >= 4 && worst_gap >= -0.005 && elapsed < 600.0;
  report(7, pass);
}

TEST_CASE("criterion 8: classifier accuracy and stage-3 invariance") {
  SyntheticConfig sc = SyntheticConfig::separable_preset();
  Dataset d = generate(sc);
  TrainConfig cfg = tiny_profile();
  cfg.epochs = 1;
  PipelineResult r = run_pipeline(d, cfg);
  bool pass = r.report.classifier.accuracy > 0.95;
  REQUIRE(r.state.classifier.has_value());

  // retrain stage 1 alone with the pipeline's derivation; an identical hash
  // proves stage 3 never touched the frozen parameters
  Splits spl = split(d, SplitSpec{});
  DatasetPartition part = partition(spl.train);
  ClassifierConfig cc = cfg.classifier;
  cc.seed = mix_seed(cfg.seed, 3);
  DomainClassifier fresh = train_classifier(spl.train, part.other_idx, cc, nullptr);
  pass = pass && fresh.param_hash() == r.state.classifier->param_hash();
  std::printf("  held-out accuracy %.4f\n", r.report.classifier.accuracy);
  report(8, pass);
}

TEST_CASE("criterion 9: determinism and checkpoint resume") {
  bool pass = true;
  SyntheticConfig sc = three_domain_data(8000, 9);
  Dataset d1 = generate(sc);
  Dataset d2 = generate(sc);
  const std::string ca = "/tmp/ssctl_acc_a.csv";
  const std::string cb = "/tmp/ssctl_acc_b.csv";
  write_csv(d1, ca);
  write_csv(d2, cb);
  pass = pass && slurp(ca) == slurp(cb);

  TrainConfig cfg = tiny_profile();
  cfg.epochs = 2;
  PipelineResult r1 = run_pipeline(d1, cfg);
  PipelineResult r2 = run_pipeline(d1, cfg);
  pass = pass && r1.report.to_json_lines() == r2.report.to_json_lines();
  save_checkpoint(ca, r1.state);
  save_checkpoint(cb, r2.state);
  pass = pass && slurp(ca) == slurp(cb);

  // resume after epoch 0 and compare the next step against the straight run
  TrainConfig first = cfg;
  first.epochs = 1;
  PipelineResult part = run_pipeline(d1, first);
  save_checkpoint(ca, part.state);
  TrainState resumed = load_checkpoint(ca);
  resumed.cfg.epochs = 2;
  MetricsReport tail;
  continue_pipeline(resumed, split(d1, SplitSpec{}), tail);
  const std::size_t steps_per_epoch = part.report.loss_per_step.size();
  REQUIRE(r1.report.loss_per_step.size() > steps_per_epoch);
  REQUIRE(!tail.loss_per_step.empty());
  const double diff = std::abs(tail.loss_per_step[0] - r1.report.loss_per_step[steps_per_epoch]);
  std::printf("  resume next-step loss difference: %.3g\n", diff);
  pass = pass && diff <= 1e-12;

  std::remove(ca.c_str());
  std::remove(cb.c_str());
  report(9, pass);
}

TEST_CASE("criterion 10: structural invariants") {
  bool pass = true;
  auto require = [&](bool ok, const char* what) {
    if (!ok && pass) std::printf("  violated: %s\n", what);
    pass = pass && ok;
  };
  Dataset d = generate(three_domain_data(4000, 10));
  TrainConfig cfg = tiny_profile();
  cfg.epochs = 1;
  PipelineResult r = run_pipeline(d, cfg);
  REQUIRE(r.state.classifier.has_value());

  Splits spl = split(d, SplitSpec{});
  Batch batch = make_batch(spl.test, [&] {
    std::vector<std::size_t> idx(std::min<std::size_t>(spl.test.size(), 200));
    for (std::size_t i = 0; i < idx.size(); ++i) idx[i] = i;
    return idx;
  }());
  Tensor p = r.state.classifier->predict(batch);
  ForwardTrace tr = model_forward(r.state.model, batch, p, false);

  // gate weights live on the simplex
  for (std::size_t i = 0; i < tr.gate_w.rows(); ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < tr.gate_w.cols(); ++j) {
      require(tr.gate_w.at(i, j) >= 0.0, "gate weight negative");
      sum += tr.gate_w.at(i, j);
    }
    require(std::abs(sum - 1.0) <= 1e-9, "gate weights off the simplex");
  }

  // every DN output stays inside (0, delta)
  for (const std::vector<Tensor>* gammas : {&tr.gamma_d, &tr.gamma_w}) {
    for (const Tensor& g : *gammas) {
      for (double v : g.data) require(v > 0.0 && v < cfg.model.delta, "gamma outside (0, delta)");
    }
  }

  // pseudo-labels never name the dominant domain
  require(!r.state.pseudo.empty(), "no pseudo records");
  for (const auto& rec : r.state.pseudo) require(rec.pseudo_domain != 0, "pseudo names domain 0");

  // perturbing specific expert k moves only domain-k predictions; shift the
  // whole expert so the probe cannot vanish into a dead relu unit
  Tensor base_yhat = tr.yhat;
  const std::size_t k = 1;
  for (Linear& layer : r.state.model.specific[k]) {
    for (double& v : layer.w.value.data) v += 0.25;
    for (double& v : layer.b.value.data) v += 0.25;
  }
  ForwardTrace tr2 = model_forward(r.state.model, batch, p, false);
  for (std::size_t i = 0; i < batch.size(); ++i) {
    const bool moved = tr2.yhat.at(i, 0) != base_yhat.at(i, 0);
    if (batch.domain_id[i] == k) require(moved, "domain-k prediction did not move");
    else require(!moved, "off-domain prediction moved");
  }
  report(10, pass);
}
