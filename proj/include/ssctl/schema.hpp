#pragma once

#include <cstddef>
#include <string>
#include <vector>

#include "ssctl/tensor.hpp"

namespace ssctl {

struct FieldSpec {
  std::string name;
  std::size_t vocab = 0;
};

/// Categorical feature layout: general / contextual groups plus the domain
/// indicator field. The domain vocabulary size equals the number of domains.
struct FeatureSchema {
  std::vector<FieldSpec> general;
  std::vector<FieldSpec> contextual;
  FieldSpec domain;
  std::size_t embedding_dim = 10;

  std::size_t n_domains() const { return domain.vocab; }
  void validate() const;
};

/// One minibatch of ids, labels and routing info. All arrays share length B.
struct Batch {
  std::vector<std::vector<std::size_t>> general_ids;     // [field][b]
  std::vector<std::vector<std::size_t>> contextual_ids;  // [field][b]
  std::vector<int> label;                                // {0,1}
  std::vector<std::size_t> domain_id;                    // [0, N)
  std::vector<double> sample_weight;                     // (0, 1]

  std::size_t size() const { return label.size(); }
  void validate(const FeatureSchema& schema) const;
};

}  // namespace ssctl
