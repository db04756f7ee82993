#include "ssctl/train.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <numeric>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ssctl/ops.hpp"

namespace ssctl {

using nlohmann::json;

// ---------------------------------------------------------------- optimizer

void adam_step(const std::vector<Parameter*>& params, AdamState& state, double lr) {
  if (lr <= 0.0) throw ConfigError("adam: learning rate must be > 0");
  if (state.slots.empty()) {
    state.slots.resize(params.size());
    for (std::size_t i = 0; i < params.size(); ++i) {
      state.slots[i].m = Tensor::zeros(params[i]->value.shape);
      state.slots[i].v = Tensor::zeros(params[i]->value.shape);
    }
  } else if (state.slots.size() != params.size()) {
    throw DimError("adam: parameter count changed between steps");
  }
  ++state.t;
  const double c1 = 1.0 - std::pow(state.beta1, static_cast<double>(state.t));
  const double c2 = 1.0 - std::pow(state.beta2, static_cast<double>(state.t));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Parameter& p = *params[i];
    if (!p.grad.all_finite()) {
      throw NumericError("adam: non-finite gradient in '" + p.name + "'");
    }
    AdamState::Slot& s = state.slots[i];
    if (!s.m.same_shape(p.value)) {
      throw DimError("adam: moment shape mismatch for '" + p.name + "'");
    }
    for (std::size_t k = 0; k < p.value.size(); ++k) {
      const double g = p.grad[k];
      s.m[k] = state.beta1 * s.m[k] + (1.0 - state.beta1) * g;
      s.v[k] = state.beta2 * s.v[k] + (1.0 - state.beta2) * g * g;
      p.value[k] -= lr * (s.m[k] / c1) / (std::sqrt(s.v[k] / c2) + state.eps);
    }
    p.zero_grad();
  }
}

double bce_loss(double logit, int label) {
  if (label != 0 && label != 1) throw ConfigError("bce_loss: label must be 0 or 1");
  return std::max(logit, 0.0) - logit * label + std::log1p(std::exp(-std::abs(logit)));
}

double bce_grad(double logit, int label) { return sigmoid(logit) - static_cast<double>(label); }

// ------------------------------------------------------------------ metrics

double auc(std::span<const double> scores, std::span<const int> labels) {
  if (scores.size() != labels.size()) throw DimError("auc: scores/labels length mismatch");
  std::size_t n_pos = 0, n_neg = 0;
  for (int y : labels) {
    if (y != 0 && y != 1) throw MetricError("auc: labels must be 0/1");
    (y ? n_pos : n_neg)++;
  }
  if (n_pos == 0 || n_neg == 0) {
    throw MetricError("auc: undefined on single-class labels");
  }
  std::vector<std::size_t> idx(scores.size());
  std::iota(idx.begin(), idx.end(), 0);
  std::sort(idx.begin(), idx.end(),
            [&](std::size_t a, std::size_t b) { return scores[a] < scores[b]; });
  // Rank sum of positives with average ranks over tie groups.
  double rank_pos = 0.0;
  std::size_t i = 0;
  while (i < idx.size()) {
    std::size_t j = i;
    while (j < idx.size() && scores[idx[j]] == scores[idx[i]]) ++j;
    const double avg_rank = 0.5 * static_cast<double>(i + 1 + j);  // 1-based
    for (std::size_t k = i; k < j; ++k) {
      if (labels[idx[k]]) rank_pos += avg_rank;
    }
    i = j;
  }
  const double np = static_cast<double>(n_pos), nn = static_cast<double>(n_neg);
  return (rank_pos - np * (np + 1.0) / 2.0) / (np * nn);
}

double rimp(double auc_model, double auc_base) {
  if (auc_base <= 0.0) throw MetricError("rimp: baseline AUC must be > 0");
  return 100.0 * (auc_model - auc_base) / auc_base;
}

namespace {

std::string fmt_double(double v) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.17g", v);
  return buf;
}

}  // namespace

std::string MetricsReport::to_json_lines() const {
  std::string out;
  for (const auto& r : records) {
    out += "{\"epoch\":" + std::to_string(r.epoch) + ",\"domain\":" + std::to_string(r.domain) +
           ",\"auc\":" + (r.auc_valid ? fmt_double(r.auc) : std::string("null")) +
           ",\"loss\":" + fmt_double(r.loss) + ",\"mu_t\":" + fmt_double(r.mu_t) +
           ",\"sigma_t\":" + fmt_double(r.sigma_t) + "}\n";
  }
  return out;
}

// ------------------------------------------------------------------- config

namespace {

json clf_cfg_to_json(const ClassifierConfig& c) {
  json j;
  j["hidden"] = c.hidden;
  j["learning_rate"] = c.learning_rate;
  j["batch_size"] = c.batch_size;
  j["epochs"] = c.epochs;
  j["focal_gamma"] = c.focal_gamma;
  j["dropout"] = c.dropout;
  j["val_fraction"] = c.val_fraction;
  j["seed"] = c.seed;
  return j;
}

ClassifierConfig clf_cfg_from_json(const json& j) {
  static const std::set<std::string> known = {"hidden",      "learning_rate", "batch_size",
                                              "epochs",      "focal_gamma",   "dropout",
                                              "val_fraction", "seed"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("classifier config: unknown key '" + it.key() + "'");
    }
  }
  ClassifierConfig c;
  if (j.contains("hidden")) c.hidden = j["hidden"].get<std::vector<std::size_t>>();
  if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
  if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
  if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
  if (j.contains("focal_gamma")) c.focal_gamma = j["focal_gamma"].get<double>();
  if (j.contains("dropout")) c.dropout = j["dropout"].get<double>();
  if (j.contains("val_fraction")) c.val_fraction = j["val_fraction"].get<double>();
  if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
  return c;
}

}  // namespace

void TrainConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("learning_rate must be > 0");
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("epochs must be >= 1");
  if (lambda < 0.0) throw ConfigError("lambda must be >= 0");
  if (ema_momentum <= 0.0 || ema_momentum >= 1.0) {
    throw ConfigError("ema_momentum must be in (0, 1)");
  }
  model.validate();
  classifier.validate();
}

std::string TrainConfig::to_json() const {
  json j;
  j["learning_rate"] = learning_rate;
  j["batch_size"] = batch_size;
  j["epochs"] = epochs;
  j["lambda"] = lambda;
  j["ema_momentum"] = ema_momentum;
  j["seed"] = seed;
  j["use_pseudo"] = use_pseudo;
  j["max_steps"] = max_steps;
  j["dropout"] = model.dropout;
  j["delta"] = model.delta;
  j["embedding_dim"] = model.embedding_dim;
  j["expert_widths"] = model.expert_widths;
  j["n_shared_experts"] = model.n_shared_experts;
  j["gate_hidden"] = model.gate_hidden;
  j["tower_hidden"] = model.tower_hidden;
  j["sddn_scope"] = sddn_scope_to_string(model.sddn_scope);
  j["classifier"] = clf_cfg_to_json(classifier);
  return j.dump(2);
}

TrainConfig TrainConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  static const std::set<std::string> known = {
      "learning_rate", "batch_size",    "epochs",           "lambda",      "ema_momentum",
      "seed",          "use_pseudo",    "max_steps",        "dropout",     "delta",
      "embedding_dim", "expert_widths", "n_shared_experts", "gate_hidden", "tower_hidden",
      "sddn_scope",    "classifier"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("train config: unknown key '" + it.key() + "'");
    }
  }
  TrainConfig c;
  try {
    if (j.contains("learning_rate")) c.learning_rate = j["learning_rate"].get<double>();
    if (j.contains("batch_size")) c.batch_size = j["batch_size"].get<std::size_t>();
    if (j.contains("epochs")) c.epochs = j["epochs"].get<std::size_t>();
    if (j.contains("lambda")) c.lambda = j["lambda"].get<double>();
    if (j.contains("ema_momentum")) c.ema_momentum = j["ema_momentum"].get<double>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("use_pseudo")) c.use_pseudo = j["use_pseudo"].get<bool>();
    if (j.contains("max_steps")) c.max_steps = j["max_steps"].get<std::size_t>();
    if (j.contains("dropout")) c.model.dropout = j["dropout"].get<double>();
    if (j.contains("delta")) c.model.delta = j["delta"].get<double>();
    if (j.contains("embedding_dim")) c.model.embedding_dim = j["embedding_dim"].get<std::size_t>();
    if (j.contains("expert_widths")) {
      c.model.expert_widths = j["expert_widths"].get<std::vector<std::size_t>>();
    }
    if (j.contains("n_shared_experts")) {
      c.model.n_shared_experts = j["n_shared_experts"].get<std::size_t>();
    }
    if (j.contains("gate_hidden")) {
      c.model.gate_hidden = j["gate_hidden"].get<std::vector<std::size_t>>();
    }
    if (j.contains("tower_hidden")) {
      c.model.tower_hidden = j["tower_hidden"].get<std::vector<std::size_t>>();
    }
    if (j.contains("sddn_scope")) {
      c.model.sddn_scope = sddn_scope_from_string(j["sddn_scope"].get<std::string>());
    }
    if (j.contains("classifier")) c.classifier = clf_cfg_from_json(j["classifier"]);
  } catch (const json::exception& e) {
    throw ParseError(std::string("train config: ") + e.what());
  }
  c.validate();
  return c;
}

TrainConfig TrainConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

TrainConfig TrainConfig::paper_profile() {
  TrainConfig c;
  c.batch_size = 4096;
  c.model.expert_widths = {256, 128, 64};
  c.model.gate_hidden = {64};
  c.model.tower_hidden = {64};
  return c;
}

// --------------------------------------------------------------- evaluation

namespace {

Tensor soft_p(SSCTLModel& model, const DomainClassifier* classifier, const Batch& batch) {
  if (!model.sddn_enabled()) return Tensor{};
  if (!classifier) throw ConfigError("SDDN requires a frozen domain classifier");
  return classifier->predict(batch);
}

}  // namespace

std::vector<DomainEval> evaluate(SSCTLModel& model, const DomainClassifier* classifier,
                                 const Dataset& dataset, std::size_t batch_size) {
  const std::size_t N = model.n_domains();
  std::vector<std::vector<std::size_t>> by_domain(N);
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    by_domain[dataset.rows[i].domain].push_back(i);
  }
  std::vector<DomainEval> out;
  for (std::size_t d = 0; d < N; ++d) {
    DomainEval ev;
    ev.domain = d;
    ev.count = by_domain[d].size();
    std::vector<double> scores;
    std::vector<int> labels;
    double loss_sum = 0.0;
    for (std::size_t start = 0; start < by_domain[d].size(); start += batch_size) {
      const std::size_t end = std::min(by_domain[d].size(), start + batch_size);
      std::vector<std::size_t> chunk(by_domain[d].begin() + start, by_domain[d].begin() + end);
      Batch batch = make_batch(dataset, chunk);
      ForwardTrace t = model_forward(model, batch, soft_p(model, classifier, batch), false);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        scores.push_back(t.yhat[i]);
        labels.push_back(batch.label[i]);
        loss_sum += bce_loss(t.logit[i], batch.label[i]);
      }
    }
    if (!scores.empty()) {
      ev.loss = loss_sum / static_cast<double>(scores.size());
      try {
        ev.auc = auc(scores, labels);
        ev.auc_valid = true;
      } catch (const MetricError&) {
        ev.auc_valid = false;
      }
    }
    out.push_back(ev);
  }
  return out;
}

// ----------------------------------------------------------------- pipeline

namespace {

// Stream tags for the per-stage RNG derivation; resume only needs counters.
constexpr std::uint64_t kTagModelInit = 1;
constexpr std::uint64_t kTagShuffle = 2;
constexpr std::uint64_t kTagClassifier = 3;
constexpr std::uint64_t kTagDropout = 4;
constexpr std::uint64_t kTagPseudoShuffle = 5;

double mean_of(std::span<const double> v) {
  if (v.empty()) return 0.0;
  double s = 0.0;
  for (double x : v) s += x;
  return s / static_cast<double>(v.size());
}

void snapshot_best(TrainState& s, double metric, std::size_t epoch) {
  s.best_val_metric = metric;
  s.best_epoch = epoch;
  s.best_values.clear();
  for (Parameter* p : s.model.parameters()) s.best_values.push_back(p->value);
}

}  // namespace

TrainState init_state(const FeatureSchema& schema, const TrainConfig& cfg) {
  cfg.validate();
  TrainState s;
  s.cfg = cfg;
  // The schema's embedding_dim is only a default; the model config decides.
  FeatureSchema sch = schema;
  sch.embedding_dim = cfg.model.embedding_dim;
  s.model = SSCTLModel::init(sch, cfg.model, mix_seed(cfg.seed, kTagModelInit));
  s.gauss = GaussianWeightState::init(std::max<std::size_t>(schema.n_domains(), 2),
                                      cfg.ema_momentum);
  return s;
}

void restore_best(TrainState& state) {
  if (state.best_values.empty()) return;
  std::vector<Parameter*> params = state.model.parameters();
  if (params.size() != state.best_values.size()) {
    throw DimError("restore_best: snapshot size mismatch");
  }
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (!params[i]->value.same_shape(state.best_values[i])) {
      throw DimError("restore_best: shape mismatch for '" + params[i]->name + "'");
    }
    params[i]->value = state.best_values[i];
  }
}

void continue_pipeline(TrainState& state, const Splits& splits, MetricsReport& report,
                       const std::string& epoch_checkpoint_path) {
  const TrainConfig& cfg = state.cfg;
  const Dataset& train = splits.train;
  std::vector<Parameter*> params = state.model.parameters();
  const bool pseudo_active = !state.pseudo.empty();

  for (std::size_t epoch = state.next_epoch; epoch < cfg.epochs; ++epoch) {
    if (cfg.max_steps > 0 && state.global_step >= cfg.max_steps) break;

    std::vector<std::size_t> order(train.size());
    std::iota(order.begin(), order.end(), 0);
    Rng shuffle_rng(mix_seed(cfg.seed, kTagShuffle, epoch));
    shuffle_rng.shuffle(order);

    // Gaussian weights are recomputed once per epoch from the live EMA state;
    // the EMA itself advances per batch below.
    std::vector<std::size_t> porder;
    std::vector<double> weights(state.pseudo.size(), 0.0);
    if (pseudo_active) {
      porder.resize(state.pseudo.size());
      std::iota(porder.begin(), porder.end(), 0);
      Rng prng(mix_seed(cfg.seed, kTagPseudoShuffle, epoch));
      prng.shuffle(porder);
      for (std::size_t i = 0; i < state.pseudo.size(); ++i) {
        weights[i] = gaussian_weight(state.pseudo[i].confidence, state.gauss);
        state.pseudo[i].weight = weights[i];
      }
      report.mean_weight = mean_of(weights);
    }

    Rng drop_rng(mix_seed(cfg.seed, kTagDropout, epoch));
    const std::size_t n_batches = (order.size() + cfg.batch_size - 1) / cfg.batch_size;
    std::size_t pp = 0;
    bool capped = false;

    for (std::size_t bi = 0; bi < n_batches; ++bi) {
      if (cfg.max_steps > 0 && state.global_step >= cfg.max_steps) {
        capped = true;
        break;
      }
      const std::size_t lo = bi * cfg.batch_size;
      const std::size_t hi = std::min(order.size(), lo + cfg.batch_size);
      const std::size_t n_labeled = hi - lo;

      std::vector<std::size_t> rows(order.begin() + lo, order.begin() + hi);
      std::vector<std::size_t> route(rows.begin(), rows.end());
      for (std::size_t i = 0; i < n_labeled; ++i) route[i] = train.rows[rows[i]].domain;
      std::vector<double> coeff(n_labeled, 1.0 / static_cast<double>(n_labeled));
      std::vector<double> confidences;
      if (pseudo_active) {
        const std::size_t p_target = ((bi + 1) * porder.size()) / n_batches;
        for (; pp < p_target; ++pp) {
          const PseudoRecord& r = state.pseudo[porder[pp]];
          rows.push_back(r.sample_index);
          route.push_back(r.pseudo_domain);
          coeff.push_back(cfg.lambda * weights[porder[pp]] /
                          static_cast<double>(n_labeled));
          confidences.push_back(r.confidence);
        }
      }

      Batch batch = make_batch(train, rows);
      Tensor p = soft_p(state.model, state.classifier ? &*state.classifier : nullptr, batch);
      ForwardTrace t = model_forward(state.model, batch, p, true, &drop_rng, &route);

      double loss = 0.0;
      Tensor dlogit({batch.size(), 1});
      for (std::size_t i = 0; i < batch.size(); ++i) {
        loss += coeff[i] * bce_loss(t.logit[i], batch.label[i]);
        dlogit[i] = coeff[i] * (t.yhat[i] - static_cast<double>(batch.label[i]));
      }
      if (!std::isfinite(loss)) {
        throw NumericError("stage 3: non-finite loss at epoch " + std::to_string(epoch) +
                           " batch " + std::to_string(bi));
      }
      model_backward(state.model, t, dlogit);
      adam_step(params, state.adam, cfg.learning_rate);
      report.loss_per_step.push_back(loss);
      ++state.global_step;

      if (!confidences.empty()) ema_update(state.gauss, confidences);
    }
    if (capped) break;

    // Model selection on validation: mean AUC over the non-dominant domains.
    std::vector<DomainEval> val = evaluate(
        state.model, state.classifier ? &*state.classifier : nullptr, splits.val, cfg.batch_size);
    double metric = 0.0;
    std::size_t n_valid = 0;
    for (const auto& ev : val) {
      if (ev.domain > 0 && ev.auc_valid) {
        metric += ev.auc;
        ++n_valid;
      }
    }
    metric = n_valid ? metric / static_cast<double>(n_valid) : -1e300;
    if (metric > state.best_val_metric || state.best_values.empty()) {
      snapshot_best(state, metric, epoch);
    }

    std::vector<DomainEval> test = evaluate(
        state.model, state.classifier ? &*state.classifier : nullptr, splits.test, cfg.batch_size);
    for (const auto& ev : test) {
      EpochDomainMetric m;
      m.epoch = epoch;
      m.domain = ev.domain;
      m.auc_valid = ev.auc_valid;
      m.auc = ev.auc;
      m.loss = ev.loss;
      m.mu_t = state.gauss.mu;
      m.sigma_t = state.gauss.sigma;
      report.records.push_back(m);
    }
    report.mu_trajectory.push_back(state.gauss.mu);
    report.sigma_trajectory.push_back(state.gauss.sigma);
    report.best_epoch = state.best_epoch;
    report.best_val_metric = state.best_val_metric;

    state.next_epoch = epoch + 1;
    if (!epoch_checkpoint_path.empty()) save_checkpoint(epoch_checkpoint_path, state);
  }
}

PipelineResult run_pipeline(const Dataset& dataset, const TrainConfig& cfg,
                            const SplitSpec& split_spec) {
  cfg.validate();
  dataset.schema.validate();
  Splits splits = split(dataset, split_spec);

  PipelineResult result;
  TrainState& s = result.state;
  s.cfg = cfg;

  const bool want_pseudo = cfg.use_pseudo && cfg.lambda > 0.0;
  const bool want_classifier = want_pseudo || cfg.model.sddn_scope != SddnScope::off;

  DatasetPartition part = partition(splits.train);
  if (want_classifier) {
    ClassifierConfig ccfg = cfg.classifier;
    ccfg.seed = mix_seed(cfg.seed, kTagClassifier);
    s.classifier = train_classifier(splits.train, part.other_idx, ccfg, &result.report.classifier);
  }
  if (want_pseudo) {
    s.pseudo = pseudo_label(*s.classifier, splits.train, part.dominant_idx);
    std::vector<double> conf;
    conf.reserve(s.pseudo.size());
    for (const auto& r : s.pseudo) conf.push_back(r.confidence);
    result.report.mean_confidence = mean_of(conf);
  }

  TrainState fresh = init_state(dataset.schema, cfg);
  s.model = std::move(fresh.model);
  s.gauss = fresh.gauss;

  continue_pipeline(s, splits, result.report);
  restore_best(s);
  return result;
}

// -------------------------------------------------------------- persistence

namespace {

Tensor scalar_tensor(double v) {
  Tensor t({1});
  t[0] = v;
  return t;
}

void overwrite_param(Parameter& p, const NamedArrays& a, const std::string& key) {
  Tensor t = a.tensor(key);
  if (!t.same_shape(p.value)) {
    throw FormatError("checkpoint: shape mismatch for '" + key + "': stored " + t.shape_str() +
                      ", expected " + p.value.shape_str());
  }
  p.value = std::move(t);
}

void put_classifier(NamedArrays& a, const DomainClassifier& clf, const std::string& prefix) {
  a.put_blob(prefix + "__schema__", schema_to_json(clf.schema));
  a.put_blob(prefix + "__config__", clf_cfg_to_json(clf.cfg).dump(2));
  a.put_scalar(prefix + "frozen", clf.frozen ? 1.0 : 0.0);
  for (const Parameter* p : clf.parameters()) a.put(prefix + "param/" + p->name, p->value);
}

DomainClassifier take_classifier(const NamedArrays& a, const std::string& prefix) {
  FeatureSchema schema = schema_from_json(a.blob(prefix + "__schema__"));
  ClassifierConfig cfg;
  try {
    cfg = clf_cfg_from_json(json::parse(a.blob(prefix + "__config__")));
  } catch (const json::exception& e) {
    throw FormatError(std::string("checkpoint: bad classifier config: ") + e.what());
  }
  DomainClassifier clf = DomainClassifier::init(schema, cfg, 1);
  for (Parameter* p : clf.parameters()) overwrite_param(*p, a, prefix + "param/" + p->name);
  clf.frozen = a.scalar(prefix + "frozen") != 0.0;
  return clf;
}

}  // namespace

void save_classifier(const std::string& path, const DomainClassifier& classifier) {
  NamedArrays a;
  put_classifier(a, classifier, "");
  save_arrays(path, a);
}

DomainClassifier load_classifier(const std::string& path) {
  return take_classifier(load_arrays(path), "");
}

void save_checkpoint(const std::string& path, const TrainState& state) {
  NamedArrays a;
  a.put_blob("__config__", state.cfg.to_json());
  a.put_blob("__schema__", schema_to_json(state.model.schema));
  a.put_scalar("meta/next_epoch", static_cast<double>(state.next_epoch));
  a.put_scalar("meta/global_step", static_cast<double>(state.global_step));
  a.put_scalar("meta/best_epoch", static_cast<double>(state.best_epoch));
  a.put_scalar("meta/best_val_metric", state.best_val_metric);
  a.put_scalar("gauss/mu", state.gauss.mu);
  a.put_scalar("gauss/sigma", state.gauss.sigma);
  a.put_scalar("gauss/momentum", state.gauss.momentum);
  a.put_scalar("gauss/step", static_cast<double>(state.gauss.step));

  std::vector<const Parameter*> params;
  for (Parameter* p : const_cast<TrainState&>(state).model.parameters()) params.push_back(p);
  for (const Parameter* p : params) a.put("param/" + p->name, p->value);

  a.put_scalar("adam/t", static_cast<double>(state.adam.t));
  a.put_scalar("adam/slots", static_cast<double>(state.adam.slots.size()));
  for (std::size_t i = 0; i < state.adam.slots.size(); ++i) {
    a.put("adam/m/" + std::to_string(i), state.adam.slots[i].m);
    a.put("adam/v/" + std::to_string(i), state.adam.slots[i].v);
  }

  a.put_scalar("clf/present", state.classifier ? 1.0 : 0.0);
  if (state.classifier) put_classifier(a, *state.classifier, "clf/");

  Tensor pidx({state.pseudo.size()}), pdom({state.pseudo.size()}), pconf({state.pseudo.size()});
  for (std::size_t i = 0; i < state.pseudo.size(); ++i) {
    pidx[i] = static_cast<double>(state.pseudo[i].sample_index);
    pdom[i] = static_cast<double>(state.pseudo[i].pseudo_domain);
    pconf[i] = state.pseudo[i].confidence;
  }
  a.put("pseudo/index", pidx);
  a.put("pseudo/domain", pdom);
  a.put("pseudo/confidence", pconf);

  a.put_scalar("best/count", static_cast<double>(state.best_values.size()));
  for (std::size_t i = 0; i < state.best_values.size(); ++i) {
    a.put("best/" + std::to_string(i), state.best_values[i]);
  }
  save_arrays(path, a);
}

TrainState load_checkpoint(const std::string& path) {
  NamedArrays a = load_arrays(path);
  TrainState s;
  s.cfg = TrainConfig::from_json(a.blob("__config__"));
  FeatureSchema schema = schema_from_json(a.blob("__schema__"));
  s.model = SSCTLModel::init(schema, s.cfg.model, mix_seed(s.cfg.seed, kTagModelInit));
  for (Parameter* p : s.model.parameters()) overwrite_param(*p, a, "param/" + p->name);

  s.next_epoch = static_cast<std::size_t>(a.scalar("meta/next_epoch"));
  s.global_step = static_cast<std::size_t>(a.scalar("meta/global_step"));
  s.best_epoch = static_cast<std::size_t>(a.scalar("meta/best_epoch"));
  s.best_val_metric = a.scalar("meta/best_val_metric");
  s.gauss.mu = a.scalar("gauss/mu");
  s.gauss.sigma = a.scalar("gauss/sigma");
  s.gauss.momentum = a.scalar("gauss/momentum");
  s.gauss.step = static_cast<std::size_t>(a.scalar("gauss/step"));

  s.adam.t = static_cast<std::size_t>(a.scalar("adam/t"));
  const std::size_t n_slots = static_cast<std::size_t>(a.scalar("adam/slots"));
  s.adam.slots.resize(n_slots);
  for (std::size_t i = 0; i < n_slots; ++i) {
    s.adam.slots[i].m = a.tensor("adam/m/" + std::to_string(i));
    s.adam.slots[i].v = a.tensor("adam/v/" + std::to_string(i));
  }

  if (a.scalar("clf/present") != 0.0) s.classifier = take_classifier(a, "clf/");

  Tensor pidx = a.tensor("pseudo/index");
  Tensor pdom = a.tensor("pseudo/domain");
  Tensor pconf = a.tensor("pseudo/confidence");
  if (pidx.size() != pdom.size() || pidx.size() != pconf.size()) {
    throw FormatError("checkpoint: pseudo arrays length mismatch");
  }
  for (std::size_t i = 0; i < pidx.size(); ++i) {
    PseudoRecord r;
    r.sample_index = static_cast<std::size_t>(pidx[i]);
    r.pseudo_domain = static_cast<std::size_t>(pdom[i]);
    r.confidence = pconf[i];
    s.pseudo.push_back(r);
  }

  const std::size_t n_best = static_cast<std::size_t>(a.scalar("best/count"));
  for (std::size_t i = 0; i < n_best; ++i) {
    s.best_values.push_back(a.tensor("best/" + std::to_string(i)));
  }
  return s;
}

// --------------------------------------------------------------- grad check

std::vector<GradCheckEntry> gradcheck_reference(std::uint64_t seed, double corrupt) {
  FeatureSchema schema;
  schema.general = {{"user", 7}, {"item", 5}};
  schema.contextual = {{"slot", 4}};
  schema.domain = {"domain", 3};
  schema.embedding_dim = 3;

  ModelConfig mc;
  mc.embedding_dim = 3;
  mc.expert_widths = {4, 3};
  mc.n_shared_experts = 2;
  mc.gate_hidden = {4};
  mc.tower_hidden = {4};
  mc.sddn_scope = SddnScope::experts_tower;
  mc.dropout = 0.0;

  SSCTLModel model = SSCTLModel::init(schema, mc, mix_seed(seed, 21));
  Rng rng(mix_seed(seed, 22));
  // Move every parameter off its init point: keeps relu pre-activations away
  // from the finite-difference kink and gives the zero-initialized DN output
  // layers (and hence both DN branches) nonzero gradient flow.
  for (Parameter* q : model.parameters()) {
    for (double& v : q->value.data) v = rng.uniform(-0.5, 0.5);
  }

  const std::size_t B = 5;
  Batch batch;
  batch.general_ids = {{}, {}};
  batch.contextual_ids = {{}};
  for (std::size_t i = 0; i < B; ++i) {
    batch.general_ids[0].push_back(rng.below(7));
    batch.general_ids[1].push_back(rng.below(5));
    batch.contextual_ids[0].push_back(rng.below(4));
    batch.label.push_back(static_cast<int>(rng.below(2)));
    batch.sample_weight.push_back(1.0);
  }
  batch.domain_id = {0, 1, 2, 0, 0};
  // Rows 3 and 4 stand in for pseudo-labeled dominant samples.
  std::vector<std::size_t> route = {0, 1, 2, 1, 2};
  const double lambda = 0.7;
  std::vector<double> coeff = {1.0 / 3, 1.0 / 3, 1.0 / 3, lambda * 0.8 / 3, lambda * 0.5 / 3};

  Tensor p({B, 2});
  for (std::size_t i = 0; i < B; ++i) {
    const double a = 0.1 + 0.8 * rng.uniform();
    p.at(i, 0) = a;
    p.at(i, 1) = 1.0 - a;
  }

  std::vector<Parameter*> params = model.parameters();
  auto loss_fn = [&](bool with_grad) {
    ForwardTrace t = model_forward(model, batch, p, false, nullptr, &route);
    double loss = 0.0;
    for (std::size_t i = 0; i < B; ++i) loss += coeff[i] * bce_loss(t.logit[i], batch.label[i]);
    if (with_grad) {
      Tensor dlogit({B, 1});
      for (std::size_t i = 0; i < B; ++i) {
        dlogit[i] = coeff[i] * (t.yhat[i] - static_cast<double>(batch.label[i]));
      }
      model_backward(model, t, dlogit);
      if (corrupt > 0.0) {
        const std::size_t stride =
            std::max<std::size_t>(1, static_cast<std::size_t>(std::llround(1.0 / corrupt)));
        for (Parameter* q : params) {
          for (std::size_t k = 0; k < q->grad.size(); k += stride) q->grad[k] *= 2.0;
        }
      }
    }
    return loss;
  };

  std::vector<GradCheckEntry> out;
  for (Parameter* q : params) {
    Parameter* single[1] = {q};
    GradCheckEntry e;
    e.name = q->name;
    e.max_rel_err = grad_check(loss_fn, std::span<Parameter* const>(single, 1), 1e-5, 200,
                               mix_seed(seed, 23));
    out.push_back(e);
  }
  return out;
}

}  // namespace ssctl
