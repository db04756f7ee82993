#include "ssctl/model.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>

namespace ssctl {

SddnScope sddn_scope_from_string(const std::string& s) {
  if (s == "off") return SddnScope::off;
  if (s == "experts") return SddnScope::experts;
  if (s == "experts+tower") return SddnScope::experts_tower;
  throw ConfigError("sddn_scope: expected off|experts|experts+tower, got '" + s + "'");
}

std::string sddn_scope_to_string(SddnScope s) {
  switch (s) {
    case SddnScope::off: return "off";
    case SddnScope::experts: return "experts";
    case SddnScope::experts_tower: return "experts+tower";
  }
  return "off";
}

void ModelConfig::validate() const {
  if (embedding_dim == 0) throw ConfigError("embedding_dim must be positive");
  if (expert_widths.empty()) throw ConfigError("expert_widths must be nonempty");
  for (std::size_t w : expert_widths)
    if (w == 0) throw ConfigError("expert_widths entries must be positive");
  if (n_shared_experts == 0) throw ConfigError("n_shared_experts must be positive");
  if (delta <= 0.0) throw ConfigError("delta must be > 0");
  if (dropout < 0.0 || dropout >= 1.0) throw ConfigError("dropout must be in [0, 1)");
}

namespace {

Tensor emul(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimError("elementwise multiply: shape mismatch");
  Tensor out = a;
  for (std::size_t i = 0; i < out.size(); ++i) out[i] *= b[i];
  return out;
}

void eadd_inplace(Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) throw DimError("elementwise add: shape mismatch");
  for (std::size_t i = 0; i < a.size(); ++i) a[i] += b[i];
}

std::size_t dn_hidden_width(std::size_t in) { return std::max<std::size_t>(4, in / 2); }

}  // namespace

Tensor dn_forward(const DnPair& dn, const Tensor& x, double delta, DnTrace* trace) {
  Tensor a1 = dn.fc1.forward(x);
  Tensor r1 = relu(a1);
  Tensor a2 = dn.fc2.forward(r1);
  Tensor sig = sigmoid(a2);
  Tensor gamma = sig;
  for (double& v : gamma.data) v *= delta;
  if (trace) {
    trace->x = x;
    trace->a1 = std::move(a1);
    trace->r1 = std::move(r1);
    trace->sig = std::move(sig);
  }
  return gamma;
}

Tensor dn_backward(DnPair& dn, const Tensor& dgamma, double delta, const DnTrace& trace) {
  Tensor dsig = dgamma;
  for (double& v : dsig.data) v *= delta;
  Tensor da2 = sigmoid_backward(dsig, trace.sig);
  Tensor dr1 = dn.fc2.backward(da2, trace.r1);
  Tensor da1 = relu_backward(dr1, trace.a1);
  return dn.fc1.backward(da1, trace.x);
}

Tensor sddn_scale(const Tensor& gamma_d, const Tensor& gamma_w, const Tensor& h_raw) {
  if (!gamma_d.same_shape(h_raw) || !gamma_w.same_shape(h_raw)) {
    throw DimError("sddn_scale: shape mismatch");
  }
  Tensor out = h_raw;
  for (std::size_t i = 0; i < out.size(); ++i) {
    const double g = gamma_d[i] * gamma_w[i];
    if (gamma_d[i] <= 0.0 || gamma_w[i] <= 0.0) {
      throw NumericError("sddn_scale: nonpositive scale input");
    }
    out[i] *= std::sqrt(g);
  }
  return out;
}

SddnScaleGrads sddn_scale_backward(const Tensor& upstream, const Tensor& gamma_d,
                                   const Tensor& gamma_w, const Tensor& h_raw) {
  SddnScaleGrads g{Tensor(gamma_d.shape), Tensor(gamma_w.shape), Tensor(h_raw.shape)};
  for (std::size_t i = 0; i < h_raw.size(); ++i) {
    const double s = std::sqrt(gamma_d[i] * gamma_w[i]);
    g.d_h_raw[i] = upstream[i] * s;
    const double ds = upstream[i] * h_raw[i];  // dL/ds
    g.d_gamma_d[i] = ds * s / (2.0 * gamma_d[i]);
    g.d_gamma_w[i] = ds * s / (2.0 * gamma_w[i]);
  }
  return g;
}

Tensor soft_domain_embedding(const Tensor& p, const Tensor& domain_table) {
  const std::size_t b = p.rows(), k = p.cols(), d = domain_table.cols();
  if (k + 1 != domain_table.rows()) {
    throw DimError("soft_domain_embedding: p has " + std::to_string(k) +
                   " columns but table has " + std::to_string(domain_table.rows()) + " rows");
  }
  for (std::size_t i = 0; i < b; ++i) {
    double sum = 0.0;
    for (std::size_t j = 0; j < k; ++j) {
      const double v = p.at(i, j);
      if (v < 0.0) throw ConfigError("soft_domain_embedding: negative probability");
      sum += v;
    }
    if (std::fabs(sum - 1.0) > 1e-6) {
      throw ConfigError("soft_domain_embedding: row " + std::to_string(i) +
                        " is not a distribution (sum " + std::to_string(sum) + ")");
    }
  }
  Tensor out({b, d});
  for (std::size_t i = 0; i < b; ++i) {
    for (std::size_t j = 0; j < k; ++j) {
      const double w = p.at(i, j);
      if (w == 0.0) continue;
      const double* row = &domain_table.data[(j + 1) * d];
      double* orow = &out.data[i * d];
      for (std::size_t c = 0; c < d; ++c) orow[c] += w * row[c];
    }
  }
  return out;
}

void soft_domain_embedding_backward(const Tensor& upstream, const Tensor& p,
                                    Tensor& domain_table_grad) {
  const std::size_t b = p.rows(), k = p.cols(), d = domain_table_grad.cols();
  for (std::size_t i = 0; i < b; ++i) {
    const double* urow = &upstream.data[i * d];
    for (std::size_t j = 0; j < k; ++j) {
      const double w = p.at(i, j);
      if (w == 0.0) continue;
      double* grow = &domain_table_grad.data[(j + 1) * d];
      for (std::size_t c = 0; c < d; ++c) grow[c] += w * urow[c];
    }
  }
}

Tensor relu_stack_forward(const std::vector<Linear>& layers, const Tensor& x,
                          const std::vector<Tensor>* scales, double dropout_rate, Rng* rng,
                          bool training, StackTrace* trace) {
  Tensor h = x;
  if (trace) trace->layers.resize(layers.size());
  for (std::size_t l = 0; l < layers.size(); ++l) {
    Tensor pre = layers[l].forward(h);
    Tensor scaled;
    const bool scale_here = scales && !(*scales)[l].empty();
    if (scale_here) {
      scaled = emul((*scales)[l], pre);
    }
    Tensor act = relu(scale_here ? scaled : pre);
    Tensor mask;
    Tensor out = act;
    if (training && dropout_rate > 0.0 && rng) {
      out = dropout_forward(act, dropout_rate, *rng, true, mask);
    }
    if (trace) {
      LayerTrace& lt = trace->layers[l];
      lt.in = std::move(h);
      lt.pre = std::move(pre);
      if (scale_here) lt.scaled = std::move(scaled);
      lt.mask = std::move(mask);
    }
    h = std::move(out);
  }
  return h;
}

Tensor relu_stack_backward(std::vector<Linear>& layers, const Tensor& upstream,
                           const std::vector<Tensor>* scales, std::vector<Tensor>* dscales,
                           const StackTrace& trace) {
  Tensor d = upstream;
  for (std::size_t li = layers.size(); li-- > 0;) {
    const LayerTrace& lt = trace.layers[li];
    d = dropout_backward(d, lt.mask);
    const bool scale_here = scales && !(*scales)[li].empty();
    d = relu_backward(d, scale_here ? lt.scaled : lt.pre);
    if (scale_here) {
      if (dscales) {
        if ((*dscales)[li].empty()) (*dscales)[li] = Tensor(lt.pre.shape);
        for (std::size_t i = 0; i < d.size(); ++i) (*dscales)[li][i] += d[i] * lt.pre[i];
      }
      d = emul(d, (*scales)[li]);
    }
    d = layers[li].backward(d, lt.in);
  }
  return d;
}

Tensor head_forward(const std::vector<Linear>& hidden, const Linear& out, const Tensor& x,
                    const std::vector<Tensor>* scales, double dropout_rate, Rng* rng,
                    bool training, HeadTrace* trace) {
  Tensor h = relu_stack_forward(hidden, x, scales, dropout_rate, rng, training,
                                trace ? &trace->stack : nullptr);
  if (trace) trace->out_in = h;
  return out.forward(h);
}

Tensor head_backward(std::vector<Linear>& hidden, Linear& out, const Tensor& upstream,
                     const std::vector<Tensor>* scales, std::vector<Tensor>* dscales,
                     const HeadTrace& trace) {
  Tensor dh = out.backward(upstream, trace.out_in);
  return relu_stack_backward(hidden, dh, scales, dscales, trace.stack);
}

SSCTLModel SSCTLModel::init(const FeatureSchema& schema, const ModelConfig& cfg,
                            std::uint64_t seed) {
  schema.validate();
  cfg.validate();
  if (schema.embedding_dim != cfg.embedding_dim) {
    throw ConfigError("embedding_dim mismatch between schema and model config");
  }
  SSCTLModel m;
  m.schema = schema;
  m.cfg = cfg;
  Rng rng(seed);

  auto init_table = [&](const std::string& name, const FieldSpec& f) {
    Parameter p(name, Tensor({f.vocab, cfg.embedding_dim}));
    for (double& v : p.value.data) v = rng.uniform(-0.01, 0.01);
    return p;
  };
  for (const auto& f : schema.general) {
    m.general_tables.push_back(init_table("emb/g/" + f.name, f));
  }
  for (const auto& f : schema.contextual) {
    m.contextual_tables.push_back(init_table("emb/c/" + f.name, f));
  }
  m.domain_table = init_table("emb/domain", schema.domain);

  const std::size_t d = cfg.embedding_dim;
  const std::size_t d_e = d * (schema.general.size() + schema.contextual.size());
  const std::size_t d_g = d * (schema.contextual.size() + 1);
  const std::size_t L = cfg.expert_widths.size();
  const std::size_t wL = cfg.expert_widths.back();

  auto make_stack = [&](const std::string& prefix, std::size_t in,
                        const std::vector<std::size_t>& widths) {
    std::vector<Linear> layers;
    std::size_t cur = in;
    for (std::size_t l = 0; l < widths.size(); ++l) {
      layers.emplace_back(prefix + "/l" + std::to_string(l), cur, widths[l]);
      layers.back().init_xavier(rng);
      cur = widths[l];
    }
    return layers;
  };

  for (std::size_t i = 0; i < cfg.n_shared_experts; ++i) {
    m.shared.push_back(make_stack("shared/" + std::to_string(i), d_e, cfg.expert_widths));
  }
  for (std::size_t k = 0; k < schema.n_domains(); ++k) {
    m.specific.push_back(make_stack("spec/" + std::to_string(k), d_e, cfg.expert_widths));
  }
  m.gate_hidden = make_stack("gate", d_g, cfg.gate_hidden);
  {
    const std::size_t gin = cfg.gate_hidden.empty() ? d_g : cfg.gate_hidden.back();
    m.gate_out = Linear("gate/out", gin, cfg.n_shared_experts);
    m.gate_out.init_xavier(rng);
  }
  m.tower_hidden = make_stack("tower", 2 * wL, cfg.tower_hidden);
  {
    const std::size_t tin = cfg.tower_hidden.empty() ? 2 * wL : cfg.tower_hidden.back();
    m.tower_out = Linear("tower/out", tin, 1);
    m.tower_out.init_xavier(rng);
  }

  // DNs initialized last so toggling the scope leaves every other draw alone.
  auto make_dn = [&](const std::string& name, std::size_t out_w) {
    DnPair dn;
    dn.fc1 = Linear(name + "/fc1", d, dn_hidden_width(d));
    dn.fc1.init_xavier(rng);
    dn.fc2 = Linear(name + "/fc2", dn_hidden_width(d), out_w);
    dn.fc2.init_zero();  // neutral scale 1 at init
    return dn;
  };
  if (cfg.sddn_scope != SddnScope::off) {
    if (schema.n_domains() < 2) {
      throw ConfigError("SDDN requires at least 2 domains");
    }
    for (std::size_t l = 0; l < L; ++l) {
      m.dn_expert.push_back(make_dn("dn/e/" + std::to_string(l), cfg.expert_widths[l]));
    }
    if (cfg.sddn_scope == SddnScope::experts_tower) {
      for (std::size_t l = 0; l < cfg.tower_hidden.size(); ++l) {
        m.dn_tower.push_back(make_dn("dn/t/" + std::to_string(l), cfg.tower_hidden[l]));
      }
    }
  }
  return m;
}

std::vector<Parameter*> SSCTLModel::parameters() {
  std::vector<Parameter*> out;
  for (auto& p : general_tables) out.push_back(&p);
  for (auto& p : contextual_tables) out.push_back(&p);
  out.push_back(&domain_table);
  auto add_stack = [&](std::vector<Linear>& layers) {
    for (auto& l : layers) {
      out.push_back(&l.w);
      out.push_back(&l.b);
    }
  };
  for (auto& e : shared) add_stack(e);
  for (auto& e : specific) add_stack(e);
  add_stack(gate_hidden);
  out.push_back(&gate_out.w);
  out.push_back(&gate_out.b);
  add_stack(tower_hidden);
  out.push_back(&tower_out.w);
  out.push_back(&tower_out.b);
  for (auto& dn : dn_expert) {
    out.push_back(&dn.fc1.w);
    out.push_back(&dn.fc1.b);
    out.push_back(&dn.fc2.w);
    out.push_back(&dn.fc2.b);
  }
  for (auto& dn : dn_tower) {
    out.push_back(&dn.fc1.w);
    out.push_back(&dn.fc1.b);
    out.push_back(&dn.fc2.w);
    out.push_back(&dn.fc2.b);
  }
  return out;
}

void SSCTLModel::zero_grad() {
  for (Parameter* p : parameters()) p->zero_grad();
}

namespace {

Tensor concat_cols(const std::vector<Tensor>& parts) {
  if (parts.empty()) throw DimError("concat_cols: nothing to concatenate");
  const std::size_t b = parts[0].rows();
  std::size_t total = 0;
  for (const auto& t : parts) total += t.cols();
  Tensor out({b, total});
  std::size_t off = 0;
  for (const auto& t : parts) {
    const std::size_t c = t.cols();
    for (std::size_t i = 0; i < b; ++i) {
      std::copy(&t.data[i * c], &t.data[i * c] + c, &out.data[i * total + off]);
    }
    off += c;
  }
  return out;
}

Tensor slice_cols(const Tensor& t, std::size_t start, std::size_t width) {
  const std::size_t b = t.rows(), c = t.cols();
  Tensor out({b, width});
  for (std::size_t i = 0; i < b; ++i) {
    std::copy(&t.data[i * c + start], &t.data[i * c + start] + width, &out.data[i * width]);
  }
  return out;
}

Tensor gather_rows(const Tensor& t, const std::vector<std::size_t>& idx) {
  const std::size_t c = t.cols();
  Tensor out({idx.size(), c});
  for (std::size_t i = 0; i < idx.size(); ++i) {
    std::copy(&t.data[idx[i] * c], &t.data[idx[i] * c] + c, &out.data[i * c]);
  }
  return out;
}

void scatter_rows_add(Tensor& dst, const Tensor& src, const std::vector<std::size_t>& idx) {
  const std::size_t c = dst.cols();
  for (std::size_t i = 0; i < idx.size(); ++i) {
    for (std::size_t j = 0; j < c; ++j) dst.at(idx[i], j) += src.at(i, j);
  }
}

}  // namespace

BuiltInputs build_inputs(const SSCTLModel& model, const Batch& batch,
                         const std::vector<std::size_t>& route) {
  const auto& schema = model.schema;
  if (route.size() != batch.size()) throw DimError("build_inputs: route length mismatch");
  for (std::size_t r : route) {
    if (r >= schema.n_domains()) {
      throw IndexError("embedding lookup for field '" + schema.domain.name + "': id " +
                       std::to_string(r) + " out of range [0, " +
                       std::to_string(schema.n_domains()) + ")");
    }
  }
  std::vector<Tensor> re_parts, rg_parts;
  for (std::size_t f = 0; f < schema.general.size(); ++f) {
    re_parts.push_back(embedding_forward(model.general_tables[f].value, batch.general_ids[f],
                                         schema.general[f].name));
  }
  for (std::size_t f = 0; f < schema.contextual.size(); ++f) {
    Tensor e = embedding_forward(model.contextual_tables[f].value, batch.contextual_ids[f],
                                 schema.contextual[f].name);
    rg_parts.push_back(e);
    re_parts.push_back(std::move(e));
  }
  Tensor e_d = embedding_forward(model.domain_table.value, route, schema.domain.name);
  rg_parts.push_back(e_d);
  BuiltInputs out;
  out.r_e = concat_cols(re_parts);
  out.r_g = concat_cols(rg_parts);
  out.e_d = std::move(e_d);
  return out;
}

ExpertOutputs expert_forward(const SSCTLModel& model, const Tensor& r_e,
                             const std::vector<std::size_t>& route) {
  ExpertOutputs out;
  for (const auto& expert : model.shared) {
    out.shared.push_back(relu_stack_forward(expert, r_e, nullptr, 0.0, nullptr, false, nullptr));
  }
  const std::size_t wL = model.cfg.expert_widths.back();
  out.specific = Tensor({r_e.rows(), wL});
  std::vector<std::vector<std::size_t>> groups(model.n_domains());
  for (std::size_t i = 0; i < route.size(); ++i) {
    if (route[i] >= model.n_domains()) throw IndexError("expert_forward: route out of range");
    groups[route[i]].push_back(i);
  }
  for (std::size_t k = 0; k < groups.size(); ++k) {
    if (groups[k].empty()) continue;
    Tensor x = gather_rows(r_e, groups[k]);
    Tensor y = relu_stack_forward(model.specific[k], x, nullptr, 0.0, nullptr, false, nullptr);
    for (std::size_t i = 0; i < groups[k].size(); ++i) {
      for (std::size_t j = 0; j < wL; ++j) out.specific.at(groups[k][i], j) = y.at(i, j);
    }
  }
  return out;
}

Tensor gate_aggregate(const SSCTLModel& model, const Tensor& r_g,
                      const std::vector<Tensor>& shared_h, const Tensor& specific_s,
                      Tensor* gate_w_out) {
  Tensor logits =
      head_forward(model.gate_hidden, model.gate_out, r_g, nullptr, 0.0, nullptr, false, nullptr);
  Tensor w = softmax_rows(logits);
  const std::size_t b = r_g.rows(), wL = specific_s.cols();
  Tensor mix({b, wL});
  for (std::size_t i = 0; i < shared_h.size(); ++i) {
    if (shared_h[i].cols() != wL) throw DimError("gate_aggregate: expert width mismatch");
    for (std::size_t r = 0; r < b; ++r) {
      const double wi = w.at(r, i);
      for (std::size_t j = 0; j < wL; ++j) mix.at(r, j) += wi * shared_h[i].at(r, j);
    }
  }
  if (gate_w_out) *gate_w_out = w;
  return concat_cols({mix, specific_s});
}

ForwardTrace model_forward(SSCTLModel& model, const Batch& batch, const Tensor& p, bool training,
                           Rng* dropout_rng, const std::vector<std::size_t>* route_override) {
  batch.validate(model.schema);
  const std::size_t B = batch.size();
  const std::size_t N = model.n_domains();
  const std::size_t L = model.cfg.expert_widths.size();
  const std::size_t wL = model.cfg.expert_widths.back();
  const double drop = model.cfg.dropout;

  ForwardTrace t;
  t.training = training;
  t.route = route_override ? *route_override : batch.domain_id;
  if (t.route.size() != B) throw DimError("model_forward: route length mismatch");

  BuiltInputs in = build_inputs(model, batch, t.route);
  t.r_e = std::move(in.r_e);
  t.r_g = std::move(in.r_g);
  t.e_d = std::move(in.e_d);
  t.re_gen_ids = batch.general_ids;
  t.rg_ctx_ids = batch.contextual_ids;

  const bool sddn = model.sddn_enabled();
  if (sddn) {
    if (p.empty() || p.rows() != B || p.cols() != N - 1) {
      throw DimError("model_forward: classifier distribution p must be B x (N-1)");
    }
    t.p = p;
    t.e_w = soft_domain_embedding(t.p, model.domain_table.value);
    t.dn_d.resize(L);
    t.dn_w.resize(L);
    for (std::size_t l = 0; l < L; ++l) {
      t.gamma_d.push_back(dn_forward(model.dn_expert[l], t.e_d, model.cfg.delta, &t.dn_d[l]));
      t.gamma_w.push_back(dn_forward(model.dn_expert[l], t.e_w, model.cfg.delta, &t.dn_w[l]));
      Tensor s = t.gamma_d[l];
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(s[i] * t.gamma_w[l][i]);
      t.scale.push_back(std::move(s));
    }
  } else {
    t.scale.assign(L, Tensor());
  }

  // Shared experts, SDDN-scaled.
  t.shared_tr.resize(model.shared.size());
  for (std::size_t i = 0; i < model.shared.size(); ++i) {
    t.shared_out.push_back(relu_stack_forward(model.shared[i], t.r_e, sddn ? &t.scale : nullptr,
                                              drop, dropout_rng, training, &t.shared_tr[i]));
  }

  // Specific experts, grouped by route, outputs reassembled in input order.
  t.groups.assign(N, {});
  for (std::size_t i = 0; i < B; ++i) t.groups[t.route[i]].push_back(i);
  t.spec_tr.resize(N);
  t.spec_out = Tensor({B, wL});
  for (std::size_t k = 0; k < N; ++k) {
    if (t.groups[k].empty()) continue;
    Tensor x = gather_rows(t.r_e, t.groups[k]);
    Tensor y = relu_stack_forward(model.specific[k], x, nullptr, drop, dropout_rng, training,
                                  &t.spec_tr[k]);
    for (std::size_t i = 0; i < t.groups[k].size(); ++i) {
      for (std::size_t j = 0; j < wL; ++j) t.spec_out.at(t.groups[k][i], j) = y.at(i, j);
    }
  }

  // Gate.
  Tensor logits = head_forward(model.gate_hidden, model.gate_out, t.r_g, nullptr, drop,
                               dropout_rng, training, &t.gate_tr);
  t.gate_w = softmax_rows(logits);
  t.mix = Tensor({B, wL});
  for (std::size_t i = 0; i < model.shared.size(); ++i) {
    for (std::size_t r = 0; r < B; ++r) {
      const double wi = t.gate_w.at(r, i);
      for (std::size_t j = 0; j < wL; ++j) t.mix.at(r, j) += wi * t.shared_out[i].at(r, j);
    }
  }
  t.z = concat_cols({t.mix, t.spec_out});

  // Tower (optionally SDDN-scaled).
  const bool tower_sddn = model.cfg.sddn_scope == SddnScope::experts_tower;
  if (tower_sddn) {
    const std::size_t TL = model.tower_hidden.size();
    t.tdn_d.resize(TL);
    t.tdn_w.resize(TL);
    for (std::size_t l = 0; l < TL; ++l) {
      t.tgamma_d.push_back(dn_forward(model.dn_tower[l], t.e_d, model.cfg.delta, &t.tdn_d[l]));
      t.tgamma_w.push_back(dn_forward(model.dn_tower[l], t.e_w, model.cfg.delta, &t.tdn_w[l]));
      Tensor s = t.tgamma_d[l];
      for (std::size_t i = 0; i < s.size(); ++i) s[i] = std::sqrt(s[i] * t.tgamma_w[l][i]);
      t.tscale.push_back(std::move(s));
    }
  } else {
    t.tscale.assign(model.tower_hidden.size(), Tensor());
  }
  t.logit = head_forward(model.tower_hidden, model.tower_out, t.z,
                         tower_sddn ? &t.tscale : nullptr, drop, dropout_rng, training,
                         &t.tower_tr);
  t.yhat = sigmoid(t.logit);
  if (!t.yhat.all_finite()) throw NumericError("model_forward: non-finite prediction");
  return t;
}

void model_backward(SSCTLModel& model, const ForwardTrace& t, const Tensor& dlogit) {
  const std::size_t B = t.route.size();
  const std::size_t N = model.n_domains();
  const std::size_t L = model.cfg.expert_widths.size();
  const std::size_t wL = model.cfg.expert_widths.back();
  if (dlogit.rows() != B || dlogit.cols() != 1) {
    throw DimError("model_backward: dlogit must be B x 1");
  }
  const bool sddn = model.sddn_enabled();
  const bool tower_sddn = model.cfg.sddn_scope == SddnScope::experts_tower;

  Tensor de_d({B, model.cfg.embedding_dim});
  Tensor de_w;
  if (sddn) de_w = Tensor({B, model.cfg.embedding_dim});

  // Tower.
  std::vector<Tensor> dtscale(t.tscale.size());
  Tensor dz = head_backward(model.tower_hidden, model.tower_out, dlogit,
                            tower_sddn ? &t.tscale : nullptr, tower_sddn ? &dtscale : nullptr,
                            t.tower_tr);
  if (tower_sddn) {
    for (std::size_t l = 0; l < dtscale.size(); ++l) {
      if (dtscale[l].empty()) continue;
      Tensor dgd(t.tgamma_d[l].shape), dgw(t.tgamma_w[l].shape);
      for (std::size_t i = 0; i < dgd.size(); ++i) {
        const double s = t.tscale[l][i];
        dgd[i] = dtscale[l][i] * s / (2.0 * t.tgamma_d[l][i]);
        dgw[i] = dtscale[l][i] * s / (2.0 * t.tgamma_w[l][i]);
      }
      eadd_inplace(de_d, dn_backward(model.dn_tower[l], dgd, model.cfg.delta, t.tdn_d[l]));
      eadd_inplace(de_w, dn_backward(model.dn_tower[l], dgw, model.cfg.delta, t.tdn_w[l]));
    }
  }

  Tensor dmix = slice_cols(dz, 0, wL);
  Tensor dspec = slice_cols(dz, wL, wL);

  // Gate mixture.
  const std::size_t m = model.shared.size();
  Tensor dgate_w({B, m});
  std::vector<Tensor> dshared(m, Tensor({B, wL}));
  for (std::size_t i = 0; i < m; ++i) {
    for (std::size_t r = 0; r < B; ++r) {
      double dot = 0.0;
      const double wi = t.gate_w.at(r, i);
      for (std::size_t j = 0; j < wL; ++j) {
        const double dm = dmix.at(r, j);
        dot += dm * t.shared_out[i].at(r, j);
        dshared[i].at(r, j) = wi * dm;
      }
      dgate_w.at(r, i) = dot;
    }
  }
  Tensor dgate_logits = softmax_rows_backward(dgate_w, t.gate_w);
  Tensor dr_g = head_backward(model.gate_hidden, model.gate_out, dgate_logits, nullptr, nullptr,
                              t.gate_tr);

  // Shared experts; scale gradients accumulate across experts per depth.
  Tensor dr_e({B, t.r_e.cols()});
  std::vector<Tensor> dscale(L);
  for (std::size_t i = 0; i < m; ++i) {
    Tensor dx = relu_stack_backward(model.shared[i], dshared[i], sddn ? &t.scale : nullptr,
                                    sddn ? &dscale : nullptr, t.shared_tr[i]);
    eadd_inplace(dr_e, dx);
  }
  if (sddn) {
    for (std::size_t l = 0; l < L; ++l) {
      if (dscale[l].empty()) continue;
      Tensor dgd(t.gamma_d[l].shape), dgw(t.gamma_w[l].shape);
      for (std::size_t i = 0; i < dgd.size(); ++i) {
        const double s = t.scale[l][i];
        dgd[i] = dscale[l][i] * s / (2.0 * t.gamma_d[l][i]);
        dgw[i] = dscale[l][i] * s / (2.0 * t.gamma_w[l][i]);
      }
      eadd_inplace(de_d, dn_backward(model.dn_expert[l], dgd, model.cfg.delta, t.dn_d[l]));
      eadd_inplace(de_w, dn_backward(model.dn_expert[l], dgw, model.cfg.delta, t.dn_w[l]));
    }
  }

  // Specific experts per group.
  for (std::size_t k = 0; k < N; ++k) {
    if (t.groups[k].empty()) continue;
    Tensor dk = gather_rows(dspec, t.groups[k]);
    Tensor dx = relu_stack_backward(model.specific[k], dk, nullptr, nullptr, t.spec_tr[k]);
    scatter_rows_add(dr_e, dx, t.groups[k]);
  }

  // Soft mixture reaches the non-dominant domain embedding rows; p is const.
  if (sddn) {
    soft_domain_embedding_backward(de_w, t.p, model.domain_table.grad);
  }
  embedding_backward(de_d, t.route, model.domain_table.grad);

  // Scatter dr_g into contextual tables + domain table.
  const std::size_t d = model.cfg.embedding_dim;
  std::size_t off = 0;
  for (std::size_t f = 0; f < model.contextual_tables.size(); ++f) {
    embedding_backward(slice_cols(dr_g, off, d), t.rg_ctx_ids[f], model.contextual_tables[f].grad);
    off += d;
  }
  embedding_backward(slice_cols(dr_g, off, d), t.route, model.domain_table.grad);

  // Scatter dr_e into general then contextual tables.
  off = 0;
  for (std::size_t f = 0; f < model.general_tables.size(); ++f) {
    embedding_backward(slice_cols(dr_e, off, d), t.re_gen_ids[f], model.general_tables[f].grad);
    off += d;
  }
  for (std::size_t f = 0; f < model.contextual_tables.size(); ++f) {
    embedding_backward(slice_cols(dr_e, off, d), t.rg_ctx_ids[f], model.contextual_tables[f].grad);
    off += d;
  }
}

std::uint64_t parameter_hash(const std::vector<Parameter*>& params) {
  std::uint64_t h = 1469598103934665603ULL;
  auto mix = [&](const void* ptr, std::size_t n) {
    const unsigned char* bytes = static_cast<const unsigned char*>(ptr);
    for (std::size_t i = 0; i < n; ++i) {
      h ^= bytes[i];
      h *= 1099511628211ULL;
    }
  };
  for (const Parameter* p : params) {
    mix(p->name.data(), p->name.size());
    mix(p->value.data.data(), p->value.data.size() * sizeof(double));
  }
  return h;
}

}  // namespace ssctl
