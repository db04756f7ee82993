#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssctl/schema.hpp"
#include "ssctl/tensor.hpp"

namespace ssctl {

/// Latent-factor click-log generator configuration. Defaults mirror the
/// six-domain traffic split the model is built for (81.16% dominant).
struct SyntheticConfig {
  std::size_t n_domains = 6;
  std::vector<double> proportions = {0.8116, 0.1257, 0.0352, 0.0114, 0.0106, 0.0059};
  std::size_t n_users = 2000;
  std::size_t n_items = 2000;
  // Per non-dominant domain (length n_domains - 1).
  std::vector<double> user_overlap = {0.9097, 0.9196, 0.9370, 0.9912, 0.9872};
  std::vector<double> item_overlap = {0.8261, 0.8575, 0.7493, 0.7500, 0.7453};
  std::size_t latent_dim = 4;
  double domain_shift_scale = 0.6;
  double click_noise = 0.2;
  std::size_t n_samples = 100000;
  std::uint64_t seed = 1;
  std::size_t n_user_groups = 20;
  std::size_t n_item_categories = 15;
  std::size_t n_time_slots = 12;
  /// Probability that the emitted time slot reveals the sample's domain.
  double context_domain_corr = 0.9;
  /// Share of a user's latent vector explained by its user_group (and of an
  /// item's by its category); 0 makes the observed ids pure noise.
  double user_group_coherence = 0.9;
  double item_category_coherence = 0.9;
  /// Share of dominant-domain traffic drawn from a hidden non-dominant
  /// sub-domain (its pools, shift, and context signature) but logged as
  /// domain 0. This is the sub-population pseudo-labeling can recover.
  double dominant_mixture = 0.7;

  void validate() const;
  std::string to_json() const;
  static SyntheticConfig from_json(const std::string& text);
  static SyntheticConfig load(const std::string& path);
  /// Strongly separable non-dominant domains, used by classifier tests.
  static SyntheticConfig separable_preset();
};

struct Row {
  std::vector<std::size_t> general;
  std::vector<std::size_t> contextual;
  int label = 0;
  std::size_t domain = 0;
};

struct Dataset {
  FeatureSchema schema;
  std::vector<Row> rows;
  std::string provenance;

  std::size_t size() const { return rows.size(); }
  Dataset subset(const std::vector<std::size_t>& indices) const;
};

Dataset generate(const SyntheticConfig& config);

void write_csv(const Dataset& dataset, const std::string& path);
Dataset load_csv(const std::string& path, const FeatureSchema& schema);

std::string schema_to_json(const FeatureSchema& schema);
FeatureSchema schema_from_json(const std::string& text);
FeatureSchema load_schema(const std::string& path);

struct SplitSpec {
  double train = 0.8;
  double val = 0.1;
  double test = 0.1;
  bool stratify_by_domain = true;
  std::uint64_t seed = 1;

  void validate() const;
};

struct Splits {
  Dataset train;
  Dataset val;
  Dataset test;
  // Row indices into the source dataset, sorted ascending.
  std::vector<std::size_t> train_idx;
  std::vector<std::size_t> val_idx;
  std::vector<std::size_t> test_idx;
};

Splits split(const Dataset& dataset, const SplitSpec& spec);

/// Seeded permutation of rows chunked into batches; the last short batch is
/// emitted; sample_weight starts at 1. route == true domain_id.
std::vector<Batch> batch_iter(const Dataset& dataset, std::size_t batch_size,
                              std::uint64_t shuffle_seed);

/// Builds a batch from explicit row indices (training loop plumbing).
Batch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices);

}  // namespace ssctl
