#pragma once

#include <cstdint>
#include <optional>
#include <string>
#include <vector>

#include "ssctl/ops.hpp"
#include "ssctl/schema.hpp"

namespace ssctl {

enum class SddnScope { off, experts, experts_tower };

SddnScope sddn_scope_from_string(const std::string& s);
std::string sddn_scope_to_string(SddnScope s);

struct ModelConfig {
  std::size_t embedding_dim = 10;
  std::vector<std::size_t> expert_widths = {32, 16};
  std::size_t n_shared_experts = 3;
  std::vector<std::size_t> gate_hidden = {16};
  std::vector<std::size_t> tower_hidden = {16};
  double delta = 2.0;
  SddnScope sddn_scope = SddnScope::experts;
  double dropout = 0.2;

  void validate() const;
};

/// Two-layer differentiation network: delta * sigmoid(FC(relu(FC(x)))).
/// The final FC starts at zero so the scale opens at the neutral value 1.
struct DnPair {
  Linear fc1;
  Linear fc2;
};

struct DnTrace {
  Tensor x;
  Tensor a1;
  Tensor r1;
  Tensor sig;
};

Tensor dn_forward(const DnPair& dn, const Tensor& x, double delta, DnTrace* trace);
Tensor dn_backward(DnPair& dn, const Tensor& dgamma, double delta, const DnTrace& trace);

/// h = sqrt(gamma_d * gamma_w) (x) h_raw, elementwise.
Tensor sddn_scale(const Tensor& gamma_d, const Tensor& gamma_w, const Tensor& h_raw);
struct SddnScaleGrads {
  Tensor d_gamma_d;
  Tensor d_gamma_w;
  Tensor d_h_raw;
};
SddnScaleGrads sddn_scale_backward(const Tensor& upstream, const Tensor& gamma_d,
                                   const Tensor& gamma_w, const Tensor& h_raw);

/// e_w[b] = sum_j p[b,j] * domain_table[1+j], the soft mixture over the
/// non-dominant domain embeddings. p rows must be distributions.
Tensor soft_domain_embedding(const Tensor& p, const Tensor& domain_table);
void soft_domain_embedding_backward(const Tensor& upstream, const Tensor& p,
                                    Tensor& domain_table_grad);

struct LayerTrace {
  Tensor in;
  Tensor pre;
  Tensor scaled;  // set only when a scale was applied
  Tensor mask;    // dropout mask, empty in eval mode
};
struct StackTrace {
  std::vector<LayerTrace> layers;
};
struct HeadTrace {
  StackTrace stack;
  Tensor out_in;
};

/// MLP of relu layers; optional per-layer elementwise scale applied to the
/// pre-activation; optional inverted dropout after each activation.
Tensor relu_stack_forward(const std::vector<Linear>& layers, const Tensor& x,
                          const std::vector<Tensor>* scales, double dropout_rate, Rng* rng,
                          bool training, StackTrace* trace);
Tensor relu_stack_backward(std::vector<Linear>& layers, const Tensor& upstream,
                           const std::vector<Tensor>* scales, std::vector<Tensor>* dscales,
                           const StackTrace& trace);

/// relu stack plus a final linear projection (gate / tower / classifier head).
Tensor head_forward(const std::vector<Linear>& hidden, const Linear& out, const Tensor& x,
                    const std::vector<Tensor>* scales, double dropout_rate, Rng* rng,
                    bool training, HeadTrace* trace);
Tensor head_backward(std::vector<Linear>& hidden, Linear& out, const Tensor& upstream,
                     const std::vector<Tensor>* scales, std::vector<Tensor>* dscales,
                     const HeadTrace& trace);

struct ForwardTrace {
  bool training = false;
  std::vector<std::size_t> route;
  std::vector<std::vector<std::size_t>> re_gen_ids;  // general field ids, for backward
  std::vector<std::vector<std::size_t>> rg_ctx_ids;  // contextual field ids
  Tensor r_e, r_g, e_d, e_w, p;
  // SDDN over shared expert layers, indexed by depth.
  std::vector<DnTrace> dn_d, dn_w;
  std::vector<Tensor> gamma_d, gamma_w, scale;
  std::vector<StackTrace> shared_tr;
  std::vector<Tensor> shared_out;
  std::vector<std::vector<std::size_t>> groups;  // sample indices per domain
  std::vector<StackTrace> spec_tr;
  Tensor spec_out;
  HeadTrace gate_tr;
  Tensor gate_w;  // softmax gate weights, B x m
  Tensor mix, z;
  // SDDN over tower hidden layers (scope experts_tower only).
  std::vector<DnTrace> tdn_d, tdn_w;
  std::vector<Tensor> tgamma_d, tgamma_w, tscale;
  HeadTrace tower_tr;
  Tensor logit;  // B x 1
  Tensor yhat;   // B x 1
};

struct SSCTLModel {
  FeatureSchema schema;
  ModelConfig cfg;
  std::vector<Parameter> general_tables;
  std::vector<Parameter> contextual_tables;
  Parameter domain_table;
  std::vector<std::vector<Linear>> shared;    // [m][L]
  std::vector<std::vector<Linear>> specific;  // [N][L]
  std::vector<Linear> gate_hidden;
  Linear gate_out;
  std::vector<Linear> tower_hidden;
  Linear tower_out;
  std::vector<DnPair> dn_expert;  // [L], shared across the m experts at each depth
  std::vector<DnPair> dn_tower;   // per tower hidden layer when scope covers the tower

  static SSCTLModel init(const FeatureSchema& schema, const ModelConfig& cfg, std::uint64_t seed);

  bool sddn_enabled() const { return cfg.sddn_scope != SddnScope::off; }
  std::size_t n_domains() const { return schema.n_domains(); }
  std::vector<Parameter*> parameters();
  void zero_grad();
};

struct BuiltInputs {
  Tensor r_e;
  Tensor r_g;
  Tensor e_d;
};

/// r_e = E(general) (+) E(contextual); r_g = E(contextual) (+) E(domain);
/// e_d is the per-sample domain embedding row looked up with `route`.
BuiltInputs build_inputs(const SSCTLModel& model, const Batch& batch,
                         const std::vector<std::size_t>& route);

struct ExpertOutputs {
  std::vector<Tensor> shared;  // m tensors, B x wL
  Tensor specific;             // B x wL, rows from the routed specific expert
};

/// Forward-only expert evaluation (no SDDN scaling, eval mode); the traced
/// training path lives in model_forward.
ExpertOutputs expert_forward(const SSCTLModel& model, const Tensor& r_e,
                             const std::vector<std::size_t>& route);

/// z = (sum_i w_i h_i) (+) s with w = softmax(MLP(r_g)). Forward-only.
Tensor gate_aggregate(const SSCTLModel& model, const Tensor& r_g,
                      const std::vector<Tensor>& shared_h, const Tensor& specific_s,
                      Tensor* gate_w_out = nullptr);

/// Full forward pass. `p` is the frozen classifier's distribution over the
/// N-1 non-dominant domains (B x N-1); required unless SDDN is off. `route`
/// overrides the batch's domain ids (pseudo-labeled training).
ForwardTrace model_forward(SSCTLModel& model, const Batch& batch, const Tensor& p, bool training,
                           Rng* dropout_rng = nullptr,
                           const std::vector<std::size_t>* route_override = nullptr);

/// Accumulates parameter gradients; dlogit is dLoss/dlogit (B x 1). p is a
/// constant (no gradient to the frozen classifier).
void model_backward(SSCTLModel& model, const ForwardTrace& trace, const Tensor& dlogit);

std::uint64_t parameter_hash(const std::vector<Parameter*>& params);

}  // namespace ssctl
