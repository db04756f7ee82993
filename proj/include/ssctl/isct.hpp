#pragma once

#include <cstdint>
#include <span>
#include <string>
#include <vector>

#include "ssctl/data.hpp"
#include "ssctl/model.hpp"
#include "ssctl/schema.hpp"

namespace ssctl {

struct ClassifierConfig {
  std::vector<std::size_t> hidden = {64, 32};
  double learning_rate = 1e-3;
  std::size_t batch_size = 256;
  std::size_t epochs = 5;
  double focal_gamma = 2.0;
  double dropout = 0.0;
  double val_fraction = 0.1;
  std::uint64_t seed = 1;

  void validate() const;
};

/// Non-dominant domain classifier C(.). Owns its embedding tables; once
/// frozen its parameters never change (enforced by hash checks in tests).
struct DomainClassifier {
  FeatureSchema schema;
  ClassifierConfig cfg;
  std::vector<Parameter> general_tables;
  std::vector<Parameter> contextual_tables;
  std::vector<Linear> hidden;
  Linear out;  // N-1 classes
  bool frozen = false;

  static DomainClassifier init(const FeatureSchema& schema, const ClassifierConfig& cfg,
                               std::uint64_t seed);

  std::size_t n_classes() const { return schema.n_domains() - 1; }
  std::vector<Parameter*> parameters();
  std::vector<const Parameter*> parameters() const;
  std::uint64_t param_hash() const;

  /// Softmax distribution over the N-1 non-dominant domains, B x (N-1).
  Tensor predict(const Batch& batch) const;
};

struct ClassifierReport {
  double accuracy = 0.0;                  // held-out overall
  std::vector<double> per_class_accuracy;  // index 0 == domain 1
  std::vector<double> loss_per_epoch;
  std::size_t train_rows = 0;
  std::size_t val_rows = 0;
};

struct DatasetPartition {
  std::vector<std::size_t> dominant_idx;
  std::vector<std::size_t> other_idx;
};

/// Domain 0 is dominant by convention.
DatasetPartition partition(const Dataset& dataset);

/// Trains on the non-dominant rows with focal loss, then freezes.
DomainClassifier train_classifier(const Dataset& dataset, const std::vector<std::size_t>& other_idx,
                                  const ClassifierConfig& cfg, ClassifierReport* report = nullptr);

/// FL = -alpha_k (1 - p_k)^gamma log(p_k); p_k clamped at 1e-12.
double focal_loss(std::span<const double> p, std::size_t target, double gamma,
                  std::span<const double> alpha);
/// dFL/dp (only the target entry is nonzero).
std::vector<double> focal_loss_grad_p(std::span<const double> p, std::size_t target, double gamma,
                                      std::span<const double> alpha);

/// Inverse-frequency class weights normalized to sum 1.
std::vector<double> inverse_frequency_alpha(const std::vector<std::size_t>& class_counts);

struct PseudoRecord {
  std::size_t sample_index = 0;  // row index in the labeled dataset
  std::size_t pseudo_domain = 0; // in [1, N)
  double confidence = 0.0;       // max classifier probability
  double weight = 1.0;           // truncated Gaussian weight at evaluation time
};

/// One record per dominant-domain row: k* = argmax (smallest index wins
/// ties), c = max probability. Original CTR labels are retained elsewhere.
std::vector<PseudoRecord> pseudo_label(const DomainClassifier& classifier, const Dataset& dataset,
                                       const std::vector<std::size_t>& dominant_idx);

struct GaussianWeightState {
  double mu = 0.5;
  double sigma = 1.0;
  double momentum = 0.999;
  std::size_t step = 0;

  static GaussianWeightState init(std::size_t n_domains, double momentum = 0.999);
};

/// w = exp(-(c - mu)^2 / (2 sigma^2)) below the running mean, 1 above it.
double gaussian_weight(double confidence, const GaussianWeightState& state);

/// Batch mean / population variance folded in with the state momentum;
/// sigma floored at 1e-4.
void ema_update(GaussianWeightState& state, std::span<const double> confidences);

/// L_total = sum(labeled) + lambda * sum(w_j * pseudo_j).
double total_loss(double labeled_loss_sum, std::span<const double> pseudo_losses,
                  std::span<const double> pseudo_weights, double lambda);

/// Tab-separated export: header "#ssctl-pseudo v1", then
/// sample_index <TAB> pseudo_domain <TAB> confidence. Weights are not
/// persisted; they are recomputed from the live EMA state.
void write_pseudo_file(const std::string& path, const std::vector<PseudoRecord>& records);
std::vector<PseudoRecord> load_pseudo_file(const std::string& path);

}  // namespace ssctl
