// ssctl: synthetic multi-domain CTR training laboratory.

#include <cstdio>
#include <filesystem>
#include <fstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"
#include "ssctl/train.hpp"

namespace fs = std::filesystem;
using nlohmann::json;
using namespace ssctl;

namespace {

Dataset load_data_dir(const std::string& dir) {
  const std::string schema_path = dir + "/schema.json";
  const std::string csv_path = dir + "/data.csv";
  if (!fs::exists(schema_path)) throw ConfigError("missing " + schema_path);
  if (!fs::exists(csv_path)) throw ConfigError("missing " + csv_path);
  return load_csv(csv_path, load_schema(schema_path));
}

void check_schema_match(const FeatureSchema& a, const FeatureSchema& b, const char* what) {
  auto fail = [&](const std::string& field, const std::string& detail) {
    throw ConfigError(std::string(what) + ": schema mismatch in field '" + field + "' (" + detail +
                      ")");
  };
  // embedding_dim is a model hyperparameter, not a property of the data.
  auto check_group = [&](const std::vector<FieldSpec>& x, const std::vector<FieldSpec>& y,
                         const char* group) {
    if (x.size() != y.size()) fail(group, "field count differs");
    for (std::size_t i = 0; i < x.size(); ++i) {
      if (x[i].name != y[i].name) fail(x[i].name, "name differs from '" + y[i].name + "'");
      if (x[i].vocab != y[i].vocab) fail(x[i].name, "vocabulary size differs");
    }
  };
  check_group(a.general, b.general, "general");
  check_group(a.contextual, b.contextual, "contextual");
  if (a.domain.name != b.domain.name || a.domain.vocab != b.domain.vocab) {
    fail(a.domain.name, "domain field differs");
  }
}

void write_text(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary | std::ios::trunc);
  if (!out) throw ConfigError("cannot write " + path);
  out << text;
}

int cmd_gen_data(const std::string& config_path, const std::string& out_dir) {
  SyntheticConfig cfg =
      config_path.empty() ? SyntheticConfig{} : SyntheticConfig::load(config_path);
  Dataset d = generate(cfg);
  fs::create_directories(out_dir);
  write_csv(d, out_dir + "/data.csv");
  write_text(out_dir + "/schema.json", schema_to_json(d.schema));
  json prov;
  prov["provenance"] = d.provenance;
  prov["n_rows"] = d.rows.size();
  prov["config"] = json::parse(cfg.to_json());
  write_text(out_dir + "/provenance.json", prov.dump(2) + "\n");
  std::vector<std::size_t> counts(cfg.n_domains, 0);
  for (const auto& r : d.rows) ++counts[r.domain];
  std::printf("wrote %zu rows to %s/data.csv\n", d.rows.size(), out_dir.c_str());
  for (std::size_t k = 0; k < counts.size(); ++k) {
    std::printf("  domain %zu: %zu rows (%.2f%%)\n", k, counts[k],
                100.0 * static_cast<double>(counts[k]) / static_cast<double>(d.rows.size()));
  }
  return 0;
}

int cmd_train_classifier(const std::string& data_dir, const std::string& config_path,
                         const std::string& out_path) {
  Dataset d = load_data_dir(data_dir);
  TrainConfig tc = config_path.empty() ? TrainConfig{} : TrainConfig::load(config_path);
  ClassifierConfig cc = tc.classifier;
  cc.seed = mix_seed(tc.seed, 3);  // matches the in-process pipeline derivation
  Splits spl = split(d, SplitSpec{});
  DatasetPartition part = partition(spl.train);
  ClassifierReport report;
  DomainClassifier clf = train_classifier(spl.train, part.other_idx, cc, &report);
  if (!out_path.empty() && fs::path(out_path).has_parent_path()) {
    fs::create_directories(fs::path(out_path).parent_path());
  }
  save_classifier(out_path, clf);
  json rep;
  rep["accuracy"] = report.accuracy;
  rep["per_class_accuracy"] = report.per_class_accuracy;
  rep["loss_per_epoch"] = report.loss_per_epoch;
  rep["train_rows"] = report.train_rows;
  rep["val_rows"] = report.val_rows;
  write_text(out_path + ".report.json", rep.dump(2) + "\n");
  std::printf("classifier held-out accuracy: %.4f (%zu train / %zu val rows)\n", report.accuracy,
              report.train_rows, report.val_rows);
  std::printf("wrote %s\n", out_path.c_str());
  return 0;
}

int cmd_pseudo_label(const std::string& classifier_path, const std::string& data_dir,
                     const std::string& out_path) {
  DomainClassifier clf = load_classifier(classifier_path);
  Dataset d = load_data_dir(data_dir);
  check_schema_match(clf.schema, d.schema, "pseudo-label");
  DatasetPartition part = partition(d);
  std::vector<PseudoRecord> records = pseudo_label(clf, d, part.dominant_idx);
  write_pseudo_file(out_path, records);
  std::printf("wrote %zu pseudo-labels (every dominant-domain row) to %s\n", records.size(),
              out_path.c_str());
  return 0;
}

int cmd_train(const std::string& data_dir, const std::string& config_path,
              const std::string& classifier_path, const std::string& pseudo_path,
              const std::string& out_dir, bool resume) {
  Dataset d = load_data_dir(data_dir);
  Splits spl = split(d, SplitSpec{});
  fs::create_directories(out_dir);
  const std::string state_path = out_dir + "/state.ckpt";

  TrainState state;
  if (resume) {
    if (!fs::exists(state_path)) throw ConfigError("--resume: no checkpoint at " + state_path);
    state = load_checkpoint(state_path);
  } else {
    TrainConfig cfg = config_path.empty() ? TrainConfig{} : TrainConfig::load(config_path);
    const bool have_clf = !classifier_path.empty();
    const bool have_pseudo = !pseudo_path.empty();
    if (have_pseudo && !have_clf) throw ConfigError("--pseudo requires --classifier");
    if (!have_clf && cfg.model.sddn_scope != SddnScope::off) {
      throw ConfigError(
          "sddn_scope '" + sddn_scope_to_string(cfg.model.sddn_scope) +
          "' needs the frozen domain classifier; pass --classifier or set sddn_scope to off");
    }
    cfg.use_pseudo = have_pseudo && cfg.lambda > 0.0;
    state = init_state(d.schema, cfg);
    if (have_clf) {
      state.classifier = load_classifier(classifier_path);
      check_schema_match(state.classifier->schema, d.schema, "train");
      if (!state.classifier->frozen) throw ConfigError("classifier checkpoint is not frozen");
    }
    if (cfg.use_pseudo) {
      // Pseudo files index the full dataset; keep the train-split rows and
      // remap onto train-split positions.
      std::vector<PseudoRecord> records = load_pseudo_file(pseudo_path);
      std::vector<std::size_t> pos(d.size(), static_cast<std::size_t>(-1));
      for (std::size_t i = 0; i < spl.train_idx.size(); ++i) pos[spl.train_idx[i]] = i;
      for (PseudoRecord r : records) {
        if (r.sample_index >= d.size()) {
          throw ParseError("pseudo-label file: sample index " + std::to_string(r.sample_index) +
                           " out of range");
        }
        if (d.rows[r.sample_index].domain != 0) {
          throw ConfigError("pseudo-label file: row " + std::to_string(r.sample_index) +
                            " is not in the dominant domain");
        }
        if (r.pseudo_domain >= d.schema.n_domains()) {
          throw ConfigError("pseudo-label file: pseudo domain " +
                            std::to_string(r.pseudo_domain) + " out of range");
        }
        if (pos[r.sample_index] != static_cast<std::size_t>(-1)) {
          r.sample_index = pos[r.sample_index];
          state.pseudo.push_back(r);
        }
      }
    }
  }

  MetricsReport report;
  continue_pipeline(state, spl, report, state_path);
  restore_best(state);
  save_checkpoint(out_dir + "/model.ckpt", state);
  write_text(out_dir + "/metrics.jsonl", report.to_json_lines());

  std::vector<DomainEval> test = evaluate(
      state.model, state.classifier ? &*state.classifier : nullptr, spl.test,
      state.cfg.batch_size);
  json rep;
  rep["lambda"] = state.cfg.lambda;
  rep["best_epoch"] = state.best_epoch;
  rep["best_val_metric"] = state.best_val_metric;
  rep["pseudo_records"] = state.pseudo.size();
  rep["config"] = json::parse(state.cfg.to_json());
  json domains = json::array();
  for (const auto& ev : test) {
    json e;
    e["domain"] = ev.domain;
    e["count"] = ev.count;
    e["auc"] = ev.auc_valid ? json(ev.auc) : json(nullptr);
    e["loss"] = ev.loss;
    domains.push_back(e);
  }
  rep["test"] = domains;
  write_text(out_dir + "/report.json", rep.dump(2) + "\n");

  std::printf("trained %zu steps, best epoch %zu (val metric %.4f)\n", state.global_step,
              state.best_epoch, state.best_val_metric);
  std::printf("wrote %s/model.ckpt, metrics.jsonl, report.json\n", out_dir.c_str());
  return 0;
}

int cmd_eval(const std::string& model_path, const std::string& data_dir,
             const std::string& report_path, const std::string& baseline_path) {
  TrainState state = load_checkpoint(model_path);
  Dataset d = load_data_dir(data_dir);
  check_schema_match(state.model.schema, d.schema, "eval");

  std::vector<double> baseline;
  if (!baseline_path.empty()) {
    std::ifstream in(baseline_path);
    if (!in) throw ConfigError("cannot open baseline file: " + baseline_path);
    std::string line;
    if (!std::getline(in, line) || line != "domain_id,auc") {
      throw ParseError("baseline file: expected header 'domain_id,auc'");
    }
    baseline.assign(d.schema.n_domains(), -1.0);
    std::size_t line_no = 1;
    while (std::getline(in, line)) {
      ++line_no;
      if (line.empty()) continue;
      const std::size_t comma = line.find(',');
      if (comma == std::string::npos) {
        throw ParseError("baseline file line " + std::to_string(line_no) + ": expected 2 columns");
      }
      const std::size_t dom = std::stoul(line.substr(0, comma));
      if (dom >= baseline.size()) {
        throw ParseError("baseline file line " + std::to_string(line_no) +
                         ": domain id out of range");
      }
      baseline[dom] = std::stod(line.substr(comma + 1));
    }
  }

  std::vector<DomainEval> evs = evaluate(
      state.model, state.classifier ? &*state.classifier : nullptr, d, state.cfg.batch_size);
  std::string out;
  char buf[160];
  for (const auto& ev : evs) {
    std::string auc_s = "null";
    if (ev.auc_valid) {
      std::snprintf(buf, sizeof(buf), "%.17g", ev.auc);
      auc_s = buf;
    } else {
      std::fprintf(stderr, "warning: domain %zu has single-class labels; auc is null\n",
                   ev.domain);
    }
    out += "{\"domain\":" + std::to_string(ev.domain) + ",\"count\":" + std::to_string(ev.count) +
           ",\"auc\":" + auc_s;
    std::snprintf(buf, sizeof(buf), "%.17g", ev.loss);
    out += ",\"loss\":" + std::string(buf);
    if (!baseline.empty()) {
      if (ev.auc_valid && ev.domain < baseline.size() && baseline[ev.domain] > 0.0) {
        std::snprintf(buf, sizeof(buf), "%.2f", rimp(ev.auc, baseline[ev.domain]));
        out += ",\"rimp\":" + std::string(buf);
      } else {
        out += ",\"rimp\":null";
      }
    }
    out += "}\n";
  }
  write_text(report_path, out);
  std::printf("%s", out.c_str());
  return 0;
}

int cmd_gradcheck(std::uint64_t seed, double corrupt) {
  std::vector<GradCheckEntry> entries = gradcheck_reference(seed, corrupt);
  std::vector<std::string> offenders;
  for (const auto& e : entries) {
    std::printf("%-28s max rel err %.3e\n", e.name.c_str(), e.max_rel_err);
    if (!(e.max_rel_err < 1e-4)) offenders.push_back(e.name);
  }
  if (!offenders.empty()) {
    std::printf("FAIL: %zu parameter group(s) exceed 1e-4:\n", offenders.size());
    for (const auto& n : offenders) std::printf("  %s\n", n.c_str());
    return 1;
  }
  std::printf("OK: all %zu parameter groups below 1e-4\n", entries.size());
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"ssctl: soft-partitioned multi-domain CTR training laboratory"};
  app.require_subcommand(1);

  std::string config_path, data_dir, out_path, classifier_path, pseudo_path, model_path;
  std::string report_path, baseline_path;
  bool resume = false;
  std::uint64_t seed = 7;
  double corrupt = 0.0;

  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic multi-domain click log");
  gen->add_option("--config", config_path, "SyntheticConfig JSON");
  gen->add_option("--out", out_path, "Output directory")->required();

  auto* tc = app.add_subcommand("train-classifier", "Train and freeze the domain classifier");
  tc->add_option("--data", data_dir, "Data directory (data.csv + schema.json)")->required();
  tc->add_option("--config", config_path, "TrainConfig JSON");
  tc->add_option("--out", out_path, "Classifier checkpoint path")->required();

  auto* pl = app.add_subcommand("pseudo-label", "Pseudo-label the dominant domain");
  pl->add_option("--classifier", classifier_path, "Frozen classifier checkpoint")->required();
  pl->add_option("--data", data_dir, "Data directory")->required();
  pl->add_option("--out", out_path, "Pseudo-label file path")->required();

  auto* tr = app.add_subcommand("train", "Train the SSCTL model");
  tr->add_option("--data", data_dir, "Data directory")->required();
  tr->add_option("--config", config_path, "TrainConfig JSON");
  tr->add_option("--classifier", classifier_path, "Frozen classifier checkpoint");
  tr->add_option("--pseudo", pseudo_path, "Pseudo-label file");
  tr->add_option("--out", out_path, "Output directory")->required();
  tr->add_flag("--resume", resume, "Resume from <out>/state.ckpt");

  auto* ev = app.add_subcommand("eval", "Per-domain AUC (and RImp) of a model checkpoint");
  ev->add_option("--model", model_path, "Model checkpoint")->required();
  ev->add_option("--data", data_dir, "Data directory")->required();
  ev->add_option("--report", report_path, "JSON-lines report path")->required();
  ev->add_option("--baseline", baseline_path, "Baseline AUC CSV (domain_id,auc)");

  auto* gc = app.add_subcommand("gradcheck", "Finite-difference check on the reference model");
  gc->add_option("--seed", seed, "RNG seed");
  gc->add_option("--corrupt", corrupt, "Corrupt this fraction of analytic gradients (test hook)")
      ->check(CLI::Range(0.0, 1.0));

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    const int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (gen->parsed()) return cmd_gen_data(config_path, out_path);
    if (tc->parsed()) return cmd_train_classifier(data_dir, config_path, out_path);
    if (pl->parsed()) return cmd_pseudo_label(classifier_path, data_dir, out_path);
    if (tr->parsed()) {
      return cmd_train(data_dir, config_path, classifier_path, pseudo_path, out_path, resume);
    }
    if (ev->parsed()) return cmd_eval(model_path, data_dir, report_path, baseline_path);
    if (gc->parsed()) return cmd_gradcheck(seed, corrupt);
  } catch (const ConfigError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const ParseError& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 2;
  } catch (const Error& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  } catch (const std::exception& e) {
    std::fprintf(stderr, "error: %s\n", e.what());
    return 1;
  }
  return 2;
}
