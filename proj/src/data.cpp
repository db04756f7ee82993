#include "ssctl/data.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "json.hpp"
#include "ssctl/ops.hpp"

namespace ssctl {

using nlohmann::json;

void FeatureSchema::validate() const {
  std::set<std::string> names;
  auto add = [&](const FieldSpec& f) {
    if (f.name.empty()) throw ConfigError("schema: empty field name");
    if (f.vocab == 0) throw ConfigError("schema: field '" + f.name + "' has empty vocabulary");
    if (!names.insert(f.name).second) {
      throw ConfigError("schema: duplicate field name '" + f.name + "'");
    }
  };
  for (const auto& f : general) add(f);
  for (const auto& f : contextual) add(f);
  add(domain);
  if (embedding_dim == 0) throw ConfigError("schema: embedding_dim must be positive");
  if (n_domains() < 1) throw ConfigError("schema: need at least one domain");
}

void Batch::validate(const FeatureSchema& schema) const {
  const std::size_t b = size();
  if (general_ids.size() != schema.general.size() ||
      contextual_ids.size() != schema.contextual.size()) {
    throw DimError("batch: field group count mismatch");
  }
  for (const auto& v : general_ids)
    if (v.size() != b) throw DimError("batch: ragged general ids");
  for (const auto& v : contextual_ids)
    if (v.size() != b) throw DimError("batch: ragged contextual ids");
  if (domain_id.size() != b || sample_weight.size() != b) {
    throw DimError("batch: array length mismatch");
  }
  for (std::size_t i = 0; i < b; ++i) {
    if (label[i] != 0 && label[i] != 1) throw ConfigError("batch: label must be 0/1");
    if (domain_id[i] >= schema.n_domains()) throw IndexError("batch: domain id out of range");
    if (sample_weight[i] <= 0.0 || sample_weight[i] > 1.0) {
      throw ConfigError("batch: sample_weight must be in (0, 1]");
    }
  }
}

void SyntheticConfig::validate() const {
  if (n_domains == 0) throw ConfigError("n_domains: must be positive");
  if (proportions.size() != n_domains) {
    throw ConfigError("proportions: expected " + std::to_string(n_domains) + " entries");
  }
  double sum = 0.0;
  for (double p : proportions) {
    if (p <= 0.0) throw ConfigError("proportions: all entries must be > 0");
    sum += p;
  }
  // Printed traffic shares (Table-1 style percentages) carry rounding error,
  // so allow up to a point of slack and renormalize downstream.
  if (std::fabs(sum - 1.0) > 1e-2) throw ConfigError("proportions: must sum to 1");
  if (n_domains > 1) {
    if (user_overlap.size() != n_domains - 1) {
      throw ConfigError("user_overlap: expected " + std::to_string(n_domains - 1) + " entries");
    }
    if (item_overlap.size() != n_domains - 1) {
      throw ConfigError("item_overlap: expected " + std::to_string(n_domains - 1) + " entries");
    }
    for (double o : user_overlap)
      if (o < 0.0 || o > 1.0) throw ConfigError("user_overlap: entries must be in [0, 1]");
    for (double o : item_overlap)
      if (o < 0.0 || o > 1.0) throw ConfigError("item_overlap: entries must be in [0, 1]");
  }
  if (n_users == 0 || n_items == 0) throw ConfigError("n_users/n_items: must be positive");
  if (latent_dim == 0) throw ConfigError("latent_dim: must be positive");
  if (domain_shift_scale < 0.0) throw ConfigError("domain_shift_scale: must be >= 0");
  if (click_noise < 0.0) throw ConfigError("click_noise: must be >= 0");
  if (n_samples < n_domains) {
    throw ConfigError("n_samples: need at least one sample per domain");
  }
  if (n_user_groups == 0 || n_item_categories == 0 || n_time_slots == 0) {
    throw ConfigError("n_user_groups/n_item_categories/n_time_slots: must be positive");
  }
  if (context_domain_corr < 0.0 || context_domain_corr > 1.0) {
    throw ConfigError("context_domain_corr: must be in [0, 1]");
  }
  if (user_group_coherence < 0.0 || user_group_coherence > 1.0) {
    throw ConfigError("user_group_coherence: must be in [0, 1]");
  }
  if (item_category_coherence < 0.0 || item_category_coherence > 1.0) {
    throw ConfigError("item_category_coherence: must be in [0, 1]");
  }
  if (dominant_mixture < 0.0 || dominant_mixture > 1.0) {
    throw ConfigError("dominant_mixture: must be in [0, 1]");
  }
}

std::string SyntheticConfig::to_json() const {
  json j;
  j["n_domains"] = n_domains;
  j["proportions"] = proportions;
  j["n_users"] = n_users;
  j["n_items"] = n_items;
  j["user_overlap"] = user_overlap;
  j["item_overlap"] = item_overlap;
  j["latent_dim"] = latent_dim;
  j["domain_shift_scale"] = domain_shift_scale;
  j["click_noise"] = click_noise;
  j["n_samples"] = n_samples;
  j["seed"] = seed;
  j["n_user_groups"] = n_user_groups;
  j["n_item_categories"] = n_item_categories;
  j["n_time_slots"] = n_time_slots;
  j["context_domain_corr"] = context_domain_corr;
  j["user_group_coherence"] = user_group_coherence;
  j["item_category_coherence"] = item_category_coherence;
  j["dominant_mixture"] = dominant_mixture;
  return j.dump(2);
}

SyntheticConfig SyntheticConfig::from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic config: ") + e.what());
  }
  static const std::set<std::string> known = {
      "n_domains",     "proportions",   "n_users",       "n_items",
      "user_overlap",  "item_overlap",  "latent_dim",    "domain_shift_scale",
      "click_noise",   "n_samples",     "seed",          "n_user_groups",
      "n_item_categories", "n_time_slots", "context_domain_corr",
      "user_group_coherence", "item_category_coherence", "dominant_mixture"};
  for (auto it = j.begin(); it != j.end(); ++it) {
    if (!known.count(it.key())) {
      throw ConfigError("synthetic config: unknown key '" + it.key() + "'");
    }
  }
  SyntheticConfig c;
  try {
    if (j.contains("n_domains")) c.n_domains = j["n_domains"].get<std::size_t>();
    if (j.contains("proportions")) c.proportions = j["proportions"].get<std::vector<double>>();
    if (j.contains("n_users")) c.n_users = j["n_users"].get<std::size_t>();
    if (j.contains("n_items")) c.n_items = j["n_items"].get<std::size_t>();
    if (j.contains("user_overlap")) c.user_overlap = j["user_overlap"].get<std::vector<double>>();
    if (j.contains("item_overlap")) c.item_overlap = j["item_overlap"].get<std::vector<double>>();
    if (j.contains("latent_dim")) c.latent_dim = j["latent_dim"].get<std::size_t>();
    if (j.contains("domain_shift_scale")) c.domain_shift_scale = j["domain_shift_scale"].get<double>();
    if (j.contains("click_noise")) c.click_noise = j["click_noise"].get<double>();
    if (j.contains("n_samples")) c.n_samples = j["n_samples"].get<std::size_t>();
    if (j.contains("seed")) c.seed = j["seed"].get<std::uint64_t>();
    if (j.contains("n_user_groups")) c.n_user_groups = j["n_user_groups"].get<std::size_t>();
    if (j.contains("n_item_categories")) c.n_item_categories = j["n_item_categories"].get<std::size_t>();
    if (j.contains("n_time_slots")) c.n_time_slots = j["n_time_slots"].get<std::size_t>();
    if (j.contains("context_domain_corr")) c.context_domain_corr = j["context_domain_corr"].get<double>();
    if (j.contains("user_group_coherence")) c.user_group_coherence = j["user_group_coherence"].get<double>();
    if (j.contains("item_category_coherence")) c.item_category_coherence = j["item_category_coherence"].get<double>();
    if (j.contains("dominant_mixture")) c.dominant_mixture = j["dominant_mixture"].get<double>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("synthetic config: ") + e.what());
  }
  // Default overlap vectors only fit the default domain count.
  if (!j.contains("user_overlap") && c.n_domains != 6 && c.n_domains > 1) {
    c.user_overlap.assign(c.n_domains - 1, 0.9);
  }
  if (!j.contains("item_overlap") && c.n_domains != 6 && c.n_domains > 1) {
    c.item_overlap.assign(c.n_domains - 1, 0.8);
  }
  if (!j.contains("proportions") && c.n_domains != 6) {
    throw ConfigError("proportions: required when n_domains != 6");
  }
  c.validate();
  return c;
}

SyntheticConfig SyntheticConfig::load(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open config file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return from_json(ss.str());
}

SyntheticConfig SyntheticConfig::separable_preset() {
  SyntheticConfig c;
  c.n_domains = 3;
  c.proportions = {0.6, 0.2, 0.2};
  c.user_overlap = {0.9, 0.9};
  c.item_overlap = {0.8, 0.8};
  c.n_users = 1000;
  c.n_items = 1000;
  c.domain_shift_scale = 2.0;
  c.click_noise = 0.3;
  c.n_samples = 20000;
  c.context_domain_corr = 0.97;
  c.seed = 11;
  return c;
}

Dataset Dataset::subset(const std::vector<std::size_t>& indices) const {
  Dataset out;
  out.schema = schema;
  out.provenance = provenance;
  out.rows.reserve(indices.size());
  for (std::size_t i : indices) out.rows.push_back(rows[i]);
  return out;
}

namespace {

std::uint64_t fnv1a(const std::string& s) {
  std::uint64_t h = 1469598103934665603ULL;
  for (unsigned char c : s) {
    h ^= c;
    h *= 1099511628211ULL;
  }
  return h;
}

std::vector<std::size_t> sample_pool(const std::vector<std::size_t>& base,
                                     const std::vector<std::size_t>& complement, double overlap,
                                     std::size_t pool_size, Rng& rng, const std::string& what) {
  const std::size_t n_shared =
      static_cast<std::size_t>(std::llround(overlap * static_cast<double>(pool_size)));
  const std::size_t n_fresh = pool_size - n_shared;
  if (n_fresh > complement.size()) {
    throw ConfigError(what + ": overlap " + std::to_string(overlap) +
                      " infeasible, pool too small");
  }
  std::vector<std::size_t> shared = base;
  rng.shuffle(shared);
  shared.resize(n_shared);
  std::vector<std::size_t> fresh = complement;
  rng.shuffle(fresh);
  fresh.resize(n_fresh);
  shared.insert(shared.end(), fresh.begin(), fresh.end());
  return shared;
}

}  // namespace

Dataset generate(const SyntheticConfig& config) {
  config.validate();
  const std::size_t N = config.n_domains;
  Rng rng(config.seed);

  const double lat_scale = 1.0 / std::sqrt(static_cast<double>(config.latent_dim));
  // Group/category latents give the observable ids real predictive power:
  // latent = sqrt(coh) * group + sqrt(1 - coh) * individual.
  auto draw_lat = [&](std::size_t n) {
    std::vector<std::vector<double>> lat(n);
    for (auto& v : lat) {
      v.resize(config.latent_dim);
      for (double& x : v) x = rng.normal() * lat_scale;
    }
    return lat;
  };
  std::vector<std::vector<double>> group_lat = draw_lat(config.n_user_groups);
  std::vector<std::vector<double>> cat_lat = draw_lat(config.n_item_categories);
  std::vector<std::vector<double>> user_lat = draw_lat(config.n_users);
  std::vector<std::vector<double>> item_lat = draw_lat(config.n_items);
  std::vector<std::size_t> item_cat(config.n_items);
  for (auto& c : item_cat) c = rng.below(config.n_item_categories);
  const double ug = std::sqrt(config.user_group_coherence);
  const double ui = std::sqrt(1.0 - config.user_group_coherence);
  for (std::size_t u = 0; u < config.n_users; ++u) {
    for (std::size_t j = 0; j < config.latent_dim; ++j) {
      user_lat[u][j] = ug * group_lat[u % config.n_user_groups][j] + ui * user_lat[u][j];
    }
  }
  const double ic = std::sqrt(config.item_category_coherence);
  const double ii = std::sqrt(1.0 - config.item_category_coherence);
  for (std::size_t i = 0; i < config.n_items; ++i) {
    for (std::size_t j = 0; j < config.latent_dim; ++j) {
      item_lat[i][j] = ic * cat_lat[item_cat[i]][j] + ii * item_lat[i][j];
    }
  }

  // Domain shift vectors, norm == domain_shift_scale.
  std::vector<std::vector<double>> shift(N);
  for (std::size_t k = 1; k < N; ++k) {
    shift[k].resize(config.latent_dim);
    double norm = 0.0;
    for (double& x : shift[k]) {
      x = rng.normal();
      norm += x * x;
    }
    norm = std::sqrt(norm);
    if (norm > 0.0) {
      for (double& x : shift[k]) x *= config.domain_shift_scale / norm;
    }
  }

  // Pools: dominant pool is half the universe; each non-dominant pool hits
  // the configured overlap against it exactly (rounded).
  const std::size_t item_pool_size = std::max<std::size_t>(1, config.n_items / 2);
  const std::size_t user_pool_size = std::max<std::size_t>(1, config.n_users / 2);
  std::vector<std::size_t> all_items(config.n_items), all_users(config.n_users);
  for (std::size_t i = 0; i < config.n_items; ++i) all_items[i] = i;
  for (std::size_t i = 0; i < config.n_users; ++i) all_users[i] = i;
  rng.shuffle(all_items);
  rng.shuffle(all_users);
  std::vector<std::size_t> dom_items(all_items.begin(), all_items.begin() + item_pool_size);
  std::vector<std::size_t> other_items(all_items.begin() + item_pool_size, all_items.end());
  std::vector<std::size_t> dom_users(all_users.begin(), all_users.begin() + user_pool_size);
  std::vector<std::size_t> other_users(all_users.begin() + user_pool_size, all_users.end());

  std::vector<std::vector<std::size_t>> item_pool(N), user_pool(N);
  item_pool[0] = dom_items;
  user_pool[0] = dom_users;
  for (std::size_t k = 1; k < N; ++k) {
    item_pool[k] = sample_pool(dom_items, other_items, config.item_overlap[k - 1], item_pool_size,
                               rng, "item_overlap[" + std::to_string(k - 1) + "]");
    user_pool[k] = sample_pool(dom_users, other_users, config.user_overlap[k - 1], user_pool_size,
                               rng, "user_overlap[" + std::to_string(k - 1) + "]");
  }

  std::vector<double> cumulative(N);
  double total = 0.0;
  for (double p : config.proportions) total += p;
  double acc = 0.0;
  for (std::size_t k = 0; k < N; ++k) {
    acc += config.proportions[k] / total;
    cumulative[k] = acc;
  }
  // Hidden sub-domain distribution for mixed dominant traffic, proportional
  // to the non-dominant shares.
  std::vector<double> hidden_cum;
  if (N > 1) {
    double hidden_total = total - config.proportions[0];
    double hacc = 0.0;
    for (std::size_t k = 1; k < N; ++k) {
      hacc += config.proportions[k] / hidden_total;
      hidden_cum.push_back(hacc);
    }
  }

  Dataset ds;
  ds.schema.general = {{"user_group", config.n_user_groups},
                       {"item_category", config.n_item_categories}};
  ds.schema.contextual = {{"time_slot", config.n_time_slots}};
  ds.schema.domain = {"domain", N};
  ds.schema.embedding_dim = 10;
  ds.schema.validate();
  ds.provenance = "seed=" + std::to_string(config.seed) +
                  ";config_fnv=" + std::to_string(fnv1a(config.to_json()));

  const double bias = -0.8;
  ds.rows.reserve(config.n_samples);
  for (std::size_t s = 0; s < config.n_samples; ++s) {
    std::size_t d;
    if (s < N) {
      d = s;  // coverage guarantee: every domain appears at least once
    } else {
      const double u = rng.uniform();
      d = static_cast<std::size_t>(
          std::lower_bound(cumulative.begin(), cumulative.end(), u) - cumulative.begin());
      if (d >= N) d = N - 1;
    }
    // h is the behavioral sub-domain; dominant traffic is a soft mixture
    std::size_t h = d;
    if (d == 0 && N > 1 && rng.uniform() < config.dominant_mixture) {
      const double u = rng.uniform();
      h = 1 + static_cast<std::size_t>(
                  std::lower_bound(hidden_cum.begin(), hidden_cum.end(), u) - hidden_cum.begin());
      if (h >= N) h = N - 1;
    }
    const std::size_t user = user_pool[h][rng.below(user_pool[h].size())];
    const std::size_t item = item_pool[h][rng.below(item_pool[h].size())];
    double logit = bias;
    for (std::size_t j = 0; j < config.latent_dim; ++j) {
      double iv = item_lat[item][j];
      if (h > 0) iv += shift[h][j];
      logit += user_lat[user][j] * iv;
    }
    logit += config.click_noise * rng.normal();
    const int label = rng.uniform() < sigmoid(logit) ? 1 : 0;
    const std::size_t slot = rng.uniform() < config.context_domain_corr
                                 ? h % config.n_time_slots
                                 : rng.below(config.n_time_slots);
    Row row;
    row.general = {user % config.n_user_groups, item_cat[item]};
    row.contextual = {slot};
    row.label = label;
    row.domain = d;
    ds.rows.push_back(std::move(row));
  }
  return ds;
}

void write_csv(const Dataset& dataset, const std::string& path) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw ConfigError("cannot write csv: " + path);
  out << "domain_id,label";
  for (const auto& f : dataset.schema.general) out << "," << f.name;
  for (const auto& f : dataset.schema.contextual) out << "," << f.name;
  out << "\n";
  for (const Row& r : dataset.rows) {
    out << r.domain << "," << r.label;
    for (std::size_t v : r.general) out << "," << v;
    for (std::size_t v : r.contextual) out << "," << v;
    out << "\n";
  }
}

namespace {

std::vector<std::string> split_commas(const std::string& line) {
  std::vector<std::string> out;
  std::string cur;
  for (char c : line) {
    if (c == ',') {
      out.push_back(cur);
      cur.clear();
    } else {
      cur.push_back(c);
    }
  }
  out.push_back(cur);
  return out;
}

std::size_t parse_id(const std::string& s, std::size_t line_no, const std::string& what) {
  if (s.empty()) throw ParseError("line " + std::to_string(line_no) + ": empty " + what);
  std::size_t v = 0;
  for (char c : s) {
    if (c < '0' || c > '9') {
      throw ParseError("line " + std::to_string(line_no) + ": non-integer " + what + " '" + s +
                       "'");
    }
    v = v * 10 + static_cast<std::size_t>(c - '0');
  }
  return v;
}

}  // namespace

Dataset load_csv(const std::string& path, const FeatureSchema& schema) {
  schema.validate();
  std::ifstream in(path, std::ios::binary);
  if (!in) throw ConfigError("cannot open csv: " + path);
  std::string line;
  if (!std::getline(in, line)) throw ParseError("line 1: missing header");
  if (!line.empty() && line.back() == '\r') line.pop_back();
  std::string expected = "domain_id,label";
  for (const auto& f : schema.general) expected += "," + f.name;
  for (const auto& f : schema.contextual) expected += "," + f.name;
  if (line != expected) {
    throw ParseError("line 1: unknown field layout, expected header '" + expected + "', got '" +
                     line + "'");
  }
  Dataset ds;
  ds.schema = schema;
  const std::size_t ncols = 2 + schema.general.size() + schema.contextual.size();
  std::size_t line_no = 1;
  while (std::getline(in, line)) {
    ++line_no;
    if (!line.empty() && line.back() == '\r') line.pop_back();
    if (line.empty()) continue;
    auto cells = split_commas(line);
    if (cells.size() != ncols) {
      throw ParseError("line " + std::to_string(line_no) + ": expected " + std::to_string(ncols) +
                       " columns, got " + std::to_string(cells.size()));
    }
    Row r;
    r.domain = parse_id(cells[0], line_no, "domain_id");
    if (r.domain >= schema.n_domains()) {
      throw ParseError("line " + std::to_string(line_no) + ": domain_id " +
                       std::to_string(r.domain) + " out of range [0, " +
                       std::to_string(schema.n_domains()) + ")");
    }
    const std::size_t lab = parse_id(cells[1], line_no, "label");
    if (lab > 1) {
      throw ParseError("line " + std::to_string(line_no) + ": malformed label '" + cells[1] +
                       "', expected 0 or 1");
    }
    r.label = static_cast<int>(lab);
    std::size_t col = 2;
    for (const auto& f : schema.general) {
      const std::size_t id = parse_id(cells[col], line_no, f.name);
      if (id >= f.vocab) {
        throw ParseError("line " + std::to_string(line_no) + ": " + f.name + " id " +
                         std::to_string(id) + " out of range");
      }
      r.general.push_back(id);
      ++col;
    }
    for (const auto& f : schema.contextual) {
      const std::size_t id = parse_id(cells[col], line_no, f.name);
      if (id >= f.vocab) {
        throw ParseError("line " + std::to_string(line_no) + ": " + f.name + " id " +
                         std::to_string(id) + " out of range");
      }
      r.contextual.push_back(id);
      ++col;
    }
    ds.rows.push_back(std::move(r));
  }
  return ds;
}

std::string schema_to_json(const FeatureSchema& schema) {
  json j;
  auto fields = [](const std::vector<FieldSpec>& fs) {
    json arr = json::array();
    for (const auto& f : fs) arr.push_back({{"name", f.name}, {"vocab", f.vocab}});
    return arr;
  };
  j["general"] = fields(schema.general);
  j["contextual"] = fields(schema.contextual);
  j["domain"] = {{"name", schema.domain.name}, {"vocab", schema.domain.vocab}};
  j["embedding_dim"] = schema.embedding_dim;
  return j.dump(2);
}

FeatureSchema schema_from_json(const std::string& text) {
  json j;
  try {
    j = json::parse(text);
  } catch (const json::exception& e) {
    throw ParseError(std::string("schema: ") + e.what());
  }
  FeatureSchema s;
  try {
    for (const auto& f : j.at("general")) {
      s.general.push_back({f.at("name").get<std::string>(), f.at("vocab").get<std::size_t>()});
    }
    for (const auto& f : j.at("contextual")) {
      s.contextual.push_back({f.at("name").get<std::string>(), f.at("vocab").get<std::size_t>()});
    }
    s.domain = {j.at("domain").at("name").get<std::string>(),
                j.at("domain").at("vocab").get<std::size_t>()};
    s.embedding_dim = j.at("embedding_dim").get<std::size_t>();
  } catch (const json::exception& e) {
    throw ParseError(std::string("schema: ") + e.what());
  }
  s.validate();
  return s;
}

FeatureSchema load_schema(const std::string& path) {
  std::ifstream in(path);
  if (!in) throw ConfigError("cannot open schema file: " + path);
  std::stringstream ss;
  ss << in.rdbuf();
  return schema_from_json(ss.str());
}

void SplitSpec::validate() const {
  if (train <= 0.0 || val <= 0.0 || test <= 0.0) {
    throw ConfigError("split: all fractions must be positive");
  }
  if (std::fabs(train + val + test - 1.0) > 1e-9) {
    throw ConfigError("split: fractions must sum to 1");
  }
}

Splits split(const Dataset& dataset, const SplitSpec& spec) {
  spec.validate();
  std::vector<std::vector<std::size_t>> groups;
  if (spec.stratify_by_domain) {
    groups.resize(dataset.schema.n_domains());
    for (std::size_t i = 0; i < dataset.rows.size(); ++i) {
      groups[dataset.rows[i].domain].push_back(i);
    }
  } else {
    groups.resize(1);
    groups[0].resize(dataset.rows.size());
    for (std::size_t i = 0; i < dataset.rows.size(); ++i) groups[0][i] = i;
  }
  std::vector<std::size_t> train_idx, val_idx, test_idx;
  for (std::size_t g = 0; g < groups.size(); ++g) {
    auto& idx = groups[g];
    Rng rng(mix_seed(spec.seed, 0x5B1Au, g));
    rng.shuffle(idx);
    const std::size_t n = idx.size();
    std::size_t n_val = static_cast<std::size_t>(std::floor(spec.val * static_cast<double>(n)));
    std::size_t n_test = static_cast<std::size_t>(std::floor(spec.test * static_cast<double>(n)));
    if (n > 0 && n_val + n_test >= n && n_val + n_test > 0) {
      // remainder to train, keep at least one training row
      while (n_val + n_test >= n && n_test > 0) --n_test;
      while (n_val + n_test >= n && n_val > 0) --n_val;
    }
    if (n_val == 0 && n_test == 0 && n > 0 && groups.size() > 1) {
      std::fprintf(stderr, "warning: domain %zu has too few rows (%zu) to split; all to train\n",
                   g, n);
    }
    std::size_t i = 0;
    for (; i < n - n_val - n_test; ++i) train_idx.push_back(idx[i]);
    for (; i < n - n_test; ++i) val_idx.push_back(idx[i]);
    for (; i < n; ++i) test_idx.push_back(idx[i]);
  }
  std::sort(train_idx.begin(), train_idx.end());
  std::sort(val_idx.begin(), val_idx.end());
  std::sort(test_idx.begin(), test_idx.end());
  return {dataset.subset(train_idx), dataset.subset(val_idx), dataset.subset(test_idx),
          std::move(train_idx), std::move(val_idx), std::move(test_idx)};
}

Batch make_batch(const Dataset& dataset, const std::vector<std::size_t>& indices) {
  Batch b;
  b.general_ids.resize(dataset.schema.general.size());
  b.contextual_ids.resize(dataset.schema.contextual.size());
  for (auto& v : b.general_ids) v.reserve(indices.size());
  for (auto& v : b.contextual_ids) v.reserve(indices.size());
  for (std::size_t i : indices) {
    const Row& r = dataset.rows[i];
    for (std::size_t f = 0; f < r.general.size(); ++f) b.general_ids[f].push_back(r.general[f]);
    for (std::size_t f = 0; f < r.contextual.size(); ++f) {
      b.contextual_ids[f].push_back(r.contextual[f]);
    }
    b.label.push_back(r.label);
    b.domain_id.push_back(r.domain);
    b.sample_weight.push_back(1.0);
  }
  return b;
}

std::vector<Batch> batch_iter(const Dataset& dataset, std::size_t batch_size,
                              std::uint64_t shuffle_seed) {
  if (batch_size == 0) throw ConfigError("batch_size must be >= 1");
  std::vector<std::size_t> order(dataset.rows.size());
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  Rng rng(shuffle_seed);
  rng.shuffle(order);
  std::vector<Batch> out;
  for (std::size_t start = 0; start < order.size(); start += batch_size) {
    const std::size_t end = std::min(order.size(), start + batch_size);
    std::vector<std::size_t> chunk(order.begin() + start, order.begin() + end);
    out.push_back(make_batch(dataset, chunk));
  }
  return out;
}

}  // namespace ssctl
