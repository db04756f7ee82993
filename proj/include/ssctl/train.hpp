#pragma once

#include <cstdint>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "ssctl/checkpoint.hpp"
#include "ssctl/data.hpp"
#include "ssctl/isct.hpp"
#include "ssctl/model.hpp"
#include "ssctl/optim.hpp"

namespace ssctl {

struct TrainConfig {
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 5;
  double lambda = 0.7;
  double ema_momentum = 0.999;
  std::uint64_t seed = 1;
  bool use_pseudo = true;
  /// Stage-3 global step cap; 0 means no cap (trajectory tests use this).
  std::size_t max_steps = 0;
  ModelConfig model;
  ClassifierConfig classifier;

  void validate() const;
  std::string to_json() const;
  static TrainConfig from_json(const std::string& text);
  static TrainConfig load(const std::string& path);
  /// Full-scale profile: expert widths [256,128,64], batch 4096.
  static TrainConfig paper_profile();
};

/// RImp in percent: 100 * (auc_model - auc_base) / auc_base.
double rimp(double auc_model, double auc_base);

/// Mann-Whitney AUC via rank sums, ties counted 1/2.
double auc(std::span<const double> scores, std::span<const int> labels);

struct EpochDomainMetric {
  std::size_t epoch = 0;
  std::size_t domain = 0;
  bool auc_valid = false;
  double auc = 0.0;
  double loss = 0.0;
  double mu_t = 0.0;
  double sigma_t = 0.0;
};

struct MetricsReport {
  std::vector<EpochDomainMetric> records;  // test split, one per (epoch, domain)
  std::vector<double> loss_per_step;       // stage-3 trajectory
  std::vector<double> mu_trajectory;       // EMA state at each epoch end
  std::vector<double> sigma_trajectory;
  double mean_confidence = 0.0;
  double mean_weight = 0.0;  // last recomputation
  std::size_t best_epoch = 0;
  double best_val_metric = 0.0;
  ClassifierReport classifier;

  /// JSON-lines, one object per (epoch, domain); null auc for single-class
  /// domains. Floats printed with %.17g so identical runs give identical
  /// bytes.
  std::string to_json_lines() const;
};

/// Everything stage 3 needs to keep going: resumable at epoch boundaries
/// because all per-epoch randomness is derived from (seed, epoch) counters.
struct TrainState {
  TrainConfig cfg;
  SSCTLModel model;
  std::optional<DomainClassifier> classifier;
  std::vector<PseudoRecord> pseudo;  // train-split dominant rows, if active
  AdamState adam;
  GaussianWeightState gauss;
  std::size_t next_epoch = 0;
  std::size_t global_step = 0;
  std::vector<Tensor> best_values;  // snapshot of model params at best epoch
  std::size_t best_epoch = 0;
  double best_val_metric = -1.0;
};

struct PipelineResult {
  TrainState state;  // model holds the best-validation-epoch parameters
  MetricsReport report;
};

/// Stage 1 (classifier), stage 2 (pseudo-labels), stage 3 (SSCTL). The
/// classifier is trained whenever SDDN is on or pseudo-label training is
/// active; lambda == 0 or use_pseudo == false skips the pseudo machinery
/// entirely.
PipelineResult run_pipeline(const Dataset& dataset, const TrainConfig& cfg,
                            const SplitSpec& split_spec = SplitSpec{});

/// Fresh stage-3 state: seeded model, EMA state, empty optimizer. The caller
/// attaches a classifier / pseudo records for the semi-supervised path.
TrainState init_state(const FeatureSchema& schema, const TrainConfig& cfg);

/// Runs stage-3 epochs [state.next_epoch, cfg.epochs) in place, appending to
/// `report`. Used by run_pipeline and by checkpoint resume.
void continue_pipeline(TrainState& state, const Splits& splits, MetricsReport& report,
                       const std::string& epoch_checkpoint_path = "");

struct DomainEval {
  std::size_t domain = 0;
  std::size_t count = 0;
  bool auc_valid = false;
  double auc = 0.0;
  double loss = 0.0;
};

/// Per-domain AUC / mean BCE with true-domain routing, eval mode.
std::vector<DomainEval> evaluate(SSCTLModel& model, const DomainClassifier* classifier,
                                 const Dataset& dataset, std::size_t batch_size);

/// Copies the best-validation snapshot back into the live parameters.
void restore_best(TrainState& state);

void save_checkpoint(const std::string& path, const TrainState& state);
TrainState load_checkpoint(const std::string& path);

void save_classifier(const std::string& path, const DomainClassifier& classifier);
DomainClassifier load_classifier(const std::string& path);

struct GradCheckEntry {
  std::string name;
  double max_rel_err = 0.0;
};

/// Finite-difference sweep over every parameter of the tiny reference model
/// (3 domains, 2 shared experts, widths [4,3], embedding dim 3, batch 5,
/// dropout off) under the full semi-supervised loss. `corrupt` > 0 scales
/// that fraction of analytic gradient entries (test hook).
std::vector<GradCheckEntry> gradcheck_reference(std::uint64_t seed, double corrupt = 0.0);

}  // namespace ssctl
