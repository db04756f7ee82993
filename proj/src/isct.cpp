#include "ssctl/isct.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <sstream>

#include "ssctl/optim.hpp"
#include "ssctl/ops.hpp"

namespace ssctl {

void ClassifierConfig::validate() const {
  if (learning_rate <= 0.0) throw ConfigError("classifier learning_rate must be > 0");
  if (batch_size == 0) throw ConfigError("classifier batch_size must be >= 1");
  if (epochs == 0) throw ConfigError("classifier epochs must be >= 1");
  if (focal_gamma < 0.0) throw ConfigError("focal_gamma must be >= 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("classifier dropout must be in [0, 1)");
  if (val_fraction <= 0.0 || val_fraction >= 1.0) {
    throw ConfigError("classifier val_fraction must be in (0, 1)");
  }
}

DomainClassifier DomainClassifier::init(const FeatureSchema& schema, const ClassifierConfig& cfg,
                                        std::uint64_t seed) {
  schema.validate();
  cfg.validate();
  if (schema.n_domains() < 3) {
    throw ConfigError("domain classifier needs >= 2 non-dominant domains");
  }
  DomainClassifier c;
  c.schema = schema;
  c.cfg = cfg;
  Rng rng(seed);
  auto init_table = [&](const std::string& name, const FieldSpec& f) {
    Parameter p(name, Tensor({f.vocab, schema.embedding_dim}));
    for (double& v : p.value.data) v = rng.uniform(-0.01, 0.01);
    return p;
  };
  for (const auto& f : schema.general) {
    c.general_tables.push_back(init_table("clf/emb/g/" + f.name, f));
  }
  for (const auto& f : schema.contextual) {
    c.contextual_tables.push_back(init_table("clf/emb/c/" + f.name, f));
  }
  const std::size_t d_in =
      schema.embedding_dim * (schema.general.size() + schema.contextual.size());
  std::size_t cur = d_in;
  for (std::size_t l = 0; l < cfg.hidden.size(); ++l) {
    c.hidden.emplace_back("clf/l" + std::to_string(l), cur, cfg.hidden[l]);
    c.hidden.back().init_xavier(rng);
    cur = cfg.hidden[l];
  }
  c.out = Linear("clf/out", cur, schema.n_domains() - 1);
  c.out.init_xavier(rng);
  return c;
}

std::vector<Parameter*> DomainClassifier::parameters() {
  std::vector<Parameter*> p;
  for (auto& t : general_tables) p.push_back(&t);
  for (auto& t : contextual_tables) p.push_back(&t);
  for (auto& l : hidden) {
    p.push_back(&l.w);
    p.push_back(&l.b);
  }
  p.push_back(&out.w);
  p.push_back(&out.b);
  return p;
}

std::vector<const Parameter*> DomainClassifier::parameters() const {
  auto mut = const_cast<DomainClassifier*>(this)->parameters();
  return {mut.begin(), mut.end()};
}

std::uint64_t DomainClassifier::param_hash() const {
  std::vector<Parameter*> p = const_cast<DomainClassifier*>(this)->parameters();
  return parameter_hash(p);
}

namespace {

struct ClfTrace {
  Tensor x;
  HeadTrace head;
  Tensor probs;
};

Tensor clf_embed(const DomainClassifier& c, const Batch& batch) {
  std::vector<Tensor> parts;
  for (std::size_t f = 0; f < c.schema.general.size(); ++f) {
    parts.push_back(embedding_forward(c.general_tables[f].value, batch.general_ids[f],
                                      c.schema.general[f].name));
  }
  for (std::size_t f = 0; f < c.schema.contextual.size(); ++f) {
    parts.push_back(embedding_forward(c.contextual_tables[f].value, batch.contextual_ids[f],
                                      c.schema.contextual[f].name));
  }
  const std::size_t b = batch.size();
  const std::size_t d = c.schema.embedding_dim;
  Tensor x({b, d * parts.size()});
  std::size_t off = 0;
  for (const auto& t : parts) {
    for (std::size_t i = 0; i < b; ++i) {
      std::copy(&t.data[i * d], &t.data[i * d] + d, &x.data[i * x.cols() + off]);
    }
    off += d;
  }
  return x;
}

Tensor clf_forward(const DomainClassifier& c, const Batch& batch, bool training, Rng* rng,
                   ClfTrace* trace) {
  Tensor x = clf_embed(c, batch);
  HeadTrace local;
  Tensor logits = head_forward(c.hidden, c.out, x, nullptr, c.cfg.dropout, rng, training,
                               trace ? &trace->head : &local);
  Tensor probs = softmax_rows(logits);
  if (trace) {
    trace->x = std::move(x);
    trace->probs = probs;
  }
  return probs;
}

void clf_backward(DomainClassifier& c, const Batch& batch, const ClfTrace& trace,
                  const Tensor& dprobs) {
  Tensor dlogits = softmax_rows_backward(dprobs, trace.probs);
  Tensor dx = head_backward(c.hidden, c.out, dlogits, nullptr, nullptr, trace.head);
  const std::size_t d = c.schema.embedding_dim;
  std::size_t off = 0;
  auto slice = [&](std::size_t start) {
    Tensor out({dx.rows(), d});
    for (std::size_t i = 0; i < dx.rows(); ++i) {
      std::copy(&dx.data[i * dx.cols() + start], &dx.data[i * dx.cols() + start] + d,
                &out.data[i * d]);
    }
    return out;
  };
  for (std::size_t f = 0; f < c.general_tables.size(); ++f) {
    embedding_backward(slice(off), batch.general_ids[f], c.general_tables[f].grad);
    off += d;
  }
  for (std::size_t f = 0; f < c.contextual_tables.size(); ++f) {
    embedding_backward(slice(off), batch.contextual_ids[f], c.contextual_tables[f].grad);
    off += d;
  }
}

}  // namespace

Tensor DomainClassifier::predict(const Batch& batch) const {
  batch.validate(schema);
  return clf_forward(*this, batch, false, nullptr, nullptr);
}

DatasetPartition partition(const Dataset& dataset) {
  DatasetPartition p;
  for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
    if (dataset.rows[i].domain == 0) {
      p.dominant_idx.push_back(i);
    } else {
      p.other_idx.push_back(i);
    }
  }
  return p;
}

std::vector<double> inverse_frequency_alpha(const std::vector<std::size_t>& class_counts) {
  std::vector<double> alpha(class_counts.size());
  double sum = 0.0;
  for (std::size_t k = 0; k < class_counts.size(); ++k) {
    if (class_counts[k] == 0) throw ConfigError("inverse_frequency_alpha: empty class");
    alpha[k] = 1.0 / static_cast<double>(class_counts[k]);
    sum += alpha[k];
  }
  for (double& a : alpha) a /= sum;
  return alpha;
}

double focal_loss(std::span<const double> p, std::size_t target, double gamma,
                  std::span<const double> alpha) {
  if (target >= p.size()) throw IndexError("focal_loss: target class out of range");
  if (gamma < 0.0) throw ConfigError("focal_loss: gamma must be >= 0");
  const double pk = std::max(p[target], 1e-12);
  return -alpha[target] * std::pow(1.0 - pk, gamma) * std::log(pk);
}

std::vector<double> focal_loss_grad_p(std::span<const double> p, std::size_t target, double gamma,
                                      std::span<const double> alpha) {
  std::vector<double> g(p.size(), 0.0);
  const double pk = std::max(p[target], 1e-12);
  const double a = alpha[target];
  const double one_m = 1.0 - pk;
  double d = -a * std::pow(one_m, gamma) / pk;
  if (gamma > 0.0) d += a * gamma * std::pow(one_m, gamma - 1.0) * std::log(pk);
  g[target] = d;
  return g;
}

DomainClassifier train_classifier(const Dataset& dataset, const std::vector<std::size_t>& other_idx,
                                  const ClassifierConfig& cfg, ClassifierReport* report) {
  cfg.validate();
  const std::size_t N = dataset.schema.n_domains();
  std::vector<std::size_t> class_counts(N > 0 ? N - 1 : 0, 0);
  for (std::size_t i : other_idx) {
    const std::size_t dom = dataset.rows[i].domain;
    if (dom == 0) throw ConfigError("train_classifier: dominant row in X_o");
    ++class_counts[dom - 1];
  }
  std::size_t nonempty = 0;
  for (std::size_t c : class_counts)
    if (c > 0) ++nonempty;
  if (nonempty < 2) {
    throw ConfigError("train_classifier: need >= 2 distinct non-dominant domains, found " +
                      std::to_string(nonempty));
  }

  // Stratified train/val split of X_o.
  std::vector<std::vector<std::size_t>> by_class(N - 1);
  for (std::size_t i : other_idx) by_class[dataset.rows[i].domain - 1].push_back(i);
  std::vector<std::size_t> train_idx, val_idx;
  for (std::size_t k = 0; k < by_class.size(); ++k) {
    Rng rng(mix_seed(cfg.seed, 0xC1A5u, k));
    rng.shuffle(by_class[k]);
    const std::size_t n_val = static_cast<std::size_t>(
        std::floor(cfg.val_fraction * static_cast<double>(by_class[k].size())));
    for (std::size_t i = 0; i < by_class[k].size(); ++i) {
      (i < n_val ? val_idx : train_idx).push_back(by_class[k][i]);
    }
  }
  std::vector<std::size_t> train_counts(N - 1, 0);
  for (std::size_t i : train_idx) ++train_counts[dataset.rows[i].domain - 1];
  for (std::size_t& c : train_counts)
    if (c == 0) c = 1;  // classes absent from train still need a finite alpha
  const std::vector<double> alpha = inverse_frequency_alpha(train_counts);

  DomainClassifier clf = DomainClassifier::init(dataset.schema, cfg, mix_seed(cfg.seed, 0x11u));
  std::vector<Parameter*> params = clf.parameters();
  AdamState adam;
  if (report) {
    report->train_rows = train_idx.size();
    report->val_rows = val_idx.size();
  }

  for (std::size_t epoch = 0; epoch < cfg.epochs; ++epoch) {
    std::vector<std::size_t> order = train_idx;
    Rng shuffle_rng(mix_seed(cfg.seed, 0x13u, epoch));
    shuffle_rng.shuffle(order);
    Rng drop_rng(mix_seed(cfg.seed, 0x17u, epoch));
    double epoch_loss = 0.0;
    std::size_t steps = 0;
    for (std::size_t start = 0; start < order.size(); start += cfg.batch_size) {
      const std::size_t end = std::min(order.size(), start + cfg.batch_size);
      std::vector<std::size_t> chunk(order.begin() + start, order.begin() + end);
      Batch batch = make_batch(dataset, chunk);
      ClfTrace trace;
      Tensor probs = clf_forward(clf, batch, true, &drop_rng, &trace);
      const std::size_t b = batch.size();
      Tensor dprobs({b, clf.n_classes()});
      double loss = 0.0;
      for (std::size_t i = 0; i < b; ++i) {
        const std::size_t target = batch.domain_id[i] - 1;
        std::span<const double> prow(&probs.data[i * clf.n_classes()], clf.n_classes());
        loss += focal_loss(prow, target, cfg.focal_gamma, alpha);
        auto g = focal_loss_grad_p(prow, target, cfg.focal_gamma, alpha);
        for (std::size_t j = 0; j < g.size(); ++j) {
          dprobs.at(i, j) = g[j] / static_cast<double>(b);
        }
      }
      clf_backward(clf, batch, trace, dprobs);
      adam_step(params, adam, cfg.learning_rate);
      epoch_loss += loss / static_cast<double>(b);
      ++steps;
    }
    if (report) report->loss_per_epoch.push_back(steps ? epoch_loss / steps : 0.0);
  }

  // Held-out accuracy.
  if (report) {
    std::vector<std::size_t> correct(N - 1, 0), total(N - 1, 0);
    std::size_t all_correct = 0;
    for (std::size_t start = 0; start < val_idx.size(); start += 1024) {
      const std::size_t end = std::min(val_idx.size(), start + 1024);
      std::vector<std::size_t> chunk(val_idx.begin() + start, val_idx.begin() + end);
      Batch batch = make_batch(dataset, chunk);
      Tensor probs = clf_forward(clf, batch, false, nullptr, nullptr);
      for (std::size_t i = 0; i < batch.size(); ++i) {
        std::size_t best = 0;
        for (std::size_t j = 1; j < clf.n_classes(); ++j) {
          if (probs.at(i, j) > probs.at(i, best)) best = j;
        }
        const std::size_t target = batch.domain_id[i] - 1;
        ++total[target];
        if (best == target) {
          ++correct[target];
          ++all_correct;
        }
      }
    }
    report->per_class_accuracy.assign(N - 1, 0.0);
    for (std::size_t k = 0; k < N - 1; ++k) {
      if (total[k]) {
        report->per_class_accuracy[k] =
            static_cast<double>(correct[k]) / static_cast<double>(total[k]);
      }
    }
    report->accuracy =
        val_idx.empty() ? 0.0 : static_cast<double>(all_correct) / static_cast<double>(val_idx.size());
  }

  clf.frozen = true;
  return clf;
}

std::vector<PseudoRecord> pseudo_label(const DomainClassifier& classifier, const Dataset& dataset,
                                       const std::vector<std::size_t>& dominant_idx) {
  if (!classifier.frozen) throw ConfigError("pseudo_label: classifier must be frozen");
  std::vector<PseudoRecord> records;
  records.reserve(dominant_idx.size());
  const std::size_t k = classifier.n_classes();
  for (std::size_t start = 0; start < dominant_idx.size(); start += 4096) {
    const std::size_t end = std::min(dominant_idx.size(), start + 4096);
    std::vector<std::size_t> chunk(dominant_idx.begin() + start, dominant_idx.begin() + end);
    Batch batch = make_batch(dataset, chunk);
    Tensor probs = classifier.predict(batch);
    for (std::size_t i = 0; i < chunk.size(); ++i) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < k; ++j) {
        if (probs.at(i, j) > probs.at(i, best)) best = j;  // smallest index wins ties
      }
      PseudoRecord r;
      r.sample_index = chunk[i];
      r.pseudo_domain = best + 1;
      r.confidence = probs.at(i, best);
      r.weight = 1.0;
      records.push_back(r);
    }
  }
  return records;
}

GaussianWeightState GaussianWeightState::init(std::size_t n_domains, double momentum) {
  if (n_domains < 2) throw ConfigError("GaussianWeightState: need >= 2 domains");
  GaussianWeightState s;
  s.mu = 1.0 / static_cast<double>(n_domains - 1);
  s.sigma = 1.0;
  s.momentum = momentum;
  s.step = 0;
  return s;
}

double gaussian_weight(double confidence, const GaussianWeightState& state) {
  if (state.sigma <= 0.0) throw NumericError("gaussian_weight: sigma must be > 0");
  if (confidence >= state.mu) return 1.0;
  const double d = confidence - state.mu;
  return std::exp(-(d * d) / (2.0 * state.sigma * state.sigma));
}

void ema_update(GaussianWeightState& state, std::span<const double> confidences) {
  if (confidences.empty()) throw ConfigError("ema_update: empty batch");
  double mean = 0.0;
  for (double c : confidences) mean += c;
  mean /= static_cast<double>(confidences.size());
  double var = 0.0;
  for (double c : confidences) var += (c - mean) * (c - mean);
  var /= static_cast<double>(confidences.size());  // population form
  const double m = state.momentum;
  state.mu = m * state.mu + (1.0 - m) * mean;
  const double var_new = m * state.sigma * state.sigma + (1.0 - m) * var;
  state.sigma = std::max(std::sqrt(std::max(var_new, 0.0)), 1e-4);
  ++state.step;
}

double total_loss(double labeled_loss_sum, std::span<const double> pseudo_losses,
                  std::span<const double> pseudo_weights, double lambda) {
  if (lambda < 0.0) throw ConfigError("total_loss: lambda must be >= 0");
  if (pseudo_losses.size() != pseudo_weights.size()) {
    throw DimError("total_loss: losses/weights length mismatch");
  }
  double pseudo = 0.0;
  for (std::size_t i = 0; i < pseudo_losses.size(); ++i) {
    pseudo += pseudo_weights[i] * pseudo_losses[i];
  }
  return labeled_loss_sum + lambda * pseudo;
}

void write_pseudo_file(const std::string& path, const std::vector<PseudoRecord>& records) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write pseudo-label file: " + path);
  out << "#ssctl-pseudo v1\n";
  char buf[64];
  for (const auto& r : records) {
    std::snprintf(buf, sizeof(buf), "%.17g", r.confidence);
    out << r.sample_index << "\t" << r.pseudo_domain << "\t" << buf << "\n";
  }
}

std::vector<PseudoRecord> load_pseudo_file(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open pseudo-label file: " + path);
  std::string line;
  if (!std::getline(in, line) || line != "#ssctl-pseudo v1") {
    throw ParseError("pseudo-label file: missing '#ssctl-pseudo v1' header");
  }
  std::vector<PseudoRecord> out;
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (line.empty()) continue;
    std::istringstream ss(line);
    PseudoRecord r;
    if (!(ss >> r.sample_index >> r.pseudo_domain >> r.confidence)) {
      throw ParseError("pseudo-label file line " + std::to_string(line_no) + ": malformed record");
    }
    if (r.pseudo_domain == 0) {
      throw ParseError("pseudo-label file line " + std::to_string(line_no) +
                       ": pseudo_domain must be >= 1");
    }
    if (r.confidence <= 0.0 || r.confidence > 1.0) {
      throw ParseError("pseudo-label file line " + std::to_string(line_no) +
                       ": confidence out of (0, 1]");
    }
    out.push_back(r);
  }
  return out;
}

}  // namespace ssctl
