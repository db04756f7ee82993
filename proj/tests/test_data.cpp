#define DOCTEST_CONFIG_IMPLEMENT_WITH_MAIN
#include <cstdio>
#include <fstream>
#include <set>
#include <sstream>

#include "doctest.h"
#include "ssctl/data.hpp"

using namespace ssctl;

namespace {

std::string slurp(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  REQUIRE(in.good());
  std::stringstream ss;
  ss << in.rdbuf();
  return ss.str();
}

SyntheticConfig small_config() {
  SyntheticConfig c;
  c.n_domains = 3;
  c.proportions = {0.7, 0.2, 0.1};
  c.user_overlap = {0.8, 0.6};
  c.item_overlap = {0.7, 0.5};
  c.n_users = 400;
  c.n_items = 400;
  c.n_samples = 5000;
  c.seed = 9;
  return c;
}

}  // namespace

TEST_CASE("config validation rejects bad inputs") {
  SyntheticConfig c = small_config();
  c.proportions = {0.7, 0.2, 0.2};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("proportions"), ConfigError);
  c = small_config();
  c.user_overlap = {0.8};
  CHECK_THROWS_WITH_AS(c.validate(), doctest::Contains("user_overlap"), ConfigError);
  c = small_config();
  c.context_domain_corr = 1.5;
  CHECK_THROWS_AS(c.validate(), ConfigError);
  CHECK_NOTHROW(SyntheticConfig{}.validate());  // Table-1 defaults are valid
}

TEST_CASE("config json round trip and unknown-key rejection") {
  SyntheticConfig c = small_config();
  SyntheticConfig back = SyntheticConfig::from_json(c.to_json());
  CHECK(back.to_json() == c.to_json());
  CHECK(back.n_domains == 3);
  CHECK(back.seed == 9);
  CHECK_THROWS_WITH_AS(static_cast<void>(SyntheticConfig::from_json("{\"n_dominas\": 3}")),
                       doctest::Contains("unknown key"), ConfigError);
  CHECK_THROWS_AS(static_cast<void>(SyntheticConfig::from_json("not json")), ParseError);
}

TEST_CASE("generator: proportions, coverage, id ranges, determinism") {
  SyntheticConfig c = small_config();
  Dataset d = generate(c);
  REQUIRE(d.rows.size() == c.n_samples);

  // first N rows cover every domain
  for (std::size_t k = 0; k < c.n_domains; ++k) CHECK(d.rows[k].domain == k);

  std::vector<std::size_t> counts(c.n_domains, 0);
  std::size_t clicks = 0;
  for (const auto& r : d.rows) {
    ++counts[r.domain];
    clicks += static_cast<std::size_t>(r.label);
    REQUIRE(r.general.size() == 2);
    REQUIRE(r.contextual.size() == 1);
    REQUIRE(r.general[0] < c.n_user_groups);
    REQUIRE(r.general[1] < c.n_item_categories);
    REQUIRE(r.contextual[0] < c.n_time_slots);
  }
  // empirical shares within 2 points of the configured ones
  for (std::size_t k = 0; k < c.n_domains; ++k) {
    const double share = static_cast<double>(counts[k]) / static_cast<double>(c.n_samples);
    CHECK(std::abs(share - c.proportions[k]) < 0.02);
  }
  // click model produces both classes in volume
  CHECK(clicks > c.n_samples / 20);
  CHECK(clicks < c.n_samples * 19 / 20);

  Dataset d2 = generate(c);
  REQUIRE(d2.rows.size() == d.rows.size());
  bool identical = true;
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    identical = identical && d.rows[i].general == d2.rows[i].general &&
                d.rows[i].contextual == d2.rows[i].contextual &&
                d.rows[i].label == d2.rows[i].label && d.rows[i].domain == d2.rows[i].domain;
  }
  CHECK(identical);
  CHECK(d.provenance == d2.provenance);

  SyntheticConfig c3 = c;
  c3.seed = 10;
  Dataset d3 = generate(c3);
  bool differs = false;
  for (std::size_t i = 0; i < d.rows.size() && !differs; ++i) {
    differs = d.rows[i].label != d3.rows[i].label || d.rows[i].general != d3.rows[i].general;
  }
  CHECK(differs);
}

TEST_CASE("generator: Table-1 defaults give a >80% dominant domain") {
  SyntheticConfig c;  // defaults: 6 domains, 81.16% dominant
  c.n_samples = 20000;
  Dataset d = generate(c);
  std::vector<std::size_t> counts(6, 0);
  for (const auto& r : d.rows) ++counts[r.domain];
  const double share0 = static_cast<double>(counts[0]) / static_cast<double>(d.rows.size());
  CHECK(share0 > 0.79);
  CHECK(share0 < 0.83);
  for (std::size_t k = 0; k < 6; ++k) CHECK(counts[k] > 0);
}

TEST_CASE("csv round trip is exact and deterministic") {
  SyntheticConfig c = small_config();
  c.n_samples = 1200;
  Dataset d = generate(c);
  const std::string p1 = "/tmp/ssctl_test_data_a.csv";
  const std::string p2 = "/tmp/ssctl_test_data_b.csv";
  write_csv(d, p1);
  write_csv(d, p2);
  CHECK(slurp(p1) == slurp(p2));

  const std::string text = slurp(p1);
  CHECK(text.substr(0, text.find('\n')) == "domain_id,label,user_group,item_category,time_slot");

  Dataset back = load_csv(p1, d.schema);
  REQUIRE(back.rows.size() == d.rows.size());
  bool identical = true;
  for (std::size_t i = 0; i < d.rows.size(); ++i) {
    identical = identical && back.rows[i].general == d.rows[i].general &&
                back.rows[i].contextual == d.rows[i].contextual &&
                back.rows[i].label == d.rows[i].label && back.rows[i].domain == d.rows[i].domain;
  }
  CHECK(identical);
  std::remove(p1.c_str());
  std::remove(p2.c_str());
}

TEST_CASE("csv parser cites line numbers on malformed input") {
  FeatureSchema schema;
  schema.general = {{"user_group", 50}, {"item_category", 30}};
  schema.contextual = {{"time_slot", 12}};
  schema.domain = {"domain", 3};

  auto write_and_load = [&](const std::string& body) {
    const std::string path = "/tmp/ssctl_test_bad.csv";
    std::ofstream out(path, std::ios::binary);
    out << body;
    out.close();
    Dataset d = load_csv(path, schema);
    std::remove(path.c_str());
    return d;
  };

  CHECK_THROWS_WITH_AS(static_cast<void>(write_and_load("bogus,header\n")),
                       doctest::Contains("line 1"), ParseError);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(write_and_load(
          "domain_id,label,user_group,item_category,time_slot\n0,2,1,1,1\n")),
      doctest::Contains("malformed label"), ParseError);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(write_and_load(
          "domain_id,label,user_group,item_category,time_slot\n0,1,1,1,1\n0,1,99,1\n")),
      doctest::Contains("line 3"), ParseError);
  CHECK_THROWS_WITH_AS(
      static_cast<void>(write_and_load(
          "domain_id,label,user_group,item_category,time_slot\n7,1,1,1,1\n")),
      doctest::Contains("domain_id"), ParseError);
}

TEST_CASE("schema json round trip") {
  SyntheticConfig c = small_config();
  Dataset d = generate(c);
  FeatureSchema back = schema_from_json(schema_to_json(d.schema));
  CHECK(back.general.size() == 2);
  CHECK(back.general[0].name == "user_group");
  CHECK(back.general[0].vocab == c.n_user_groups);
  CHECK(back.contextual[0].name == "time_slot");
  CHECK(back.domain.vocab == 3);
  CHECK(back.embedding_dim == d.schema.embedding_dim);
}

TEST_CASE("stratified split: fractions, disjointness, determinism") {
  SyntheticConfig c = small_config();
  Dataset d = generate(c);
  SplitSpec spec;
  Splits s = split(d, spec);
  CHECK(s.train.size() + s.val.size() + s.test.size() == d.size());
  CHECK(std::abs(static_cast<double>(s.train.size()) / d.size() - 0.8) < 0.02);
  CHECK(std::abs(static_cast<double>(s.test.size()) / d.size() - 0.1) < 0.02);

  std::set<std::size_t> seen;
  for (std::size_t i : s.train_idx) CHECK(seen.insert(i).second);
  for (std::size_t i : s.val_idx) CHECK(seen.insert(i).second);
  for (std::size_t i : s.test_idx) CHECK(seen.insert(i).second);
  CHECK(seen.size() == d.size());

  // stratification: every domain appears in every part (domains here are big)
  for (const Dataset* part : {&s.train, &s.val, &s.test}) {
    std::vector<std::size_t> counts(3, 0);
    for (const auto& r : part->rows) ++counts[r.domain];
    for (std::size_t k = 0; k < 3; ++k) CHECK(counts[k] > 0);
  }

  Splits s2 = split(d, spec);
  CHECK(s2.train_idx == s.train_idx);
  CHECK(s2.test_idx == s.test_idx);

  SplitSpec bad;
  bad.train = 0.9;
  bad.val = 0.2;
  CHECK_THROWS_AS(static_cast<void>(split(d, bad)), ConfigError);
}

TEST_CASE("batch_iter covers every row exactly once") {
  SyntheticConfig c = small_config();
  c.n_samples = 1000;
  Dataset d = generate(c);
  std::vector<Batch> batches = batch_iter(d, 128, 77);
  CHECK(batches.size() == 8);  // 7 full + 1 short
  CHECK(batches.back().size() == 1000 - 7 * 128);
  std::size_t total = 0;
  std::vector<std::size_t> label_hist(2, 0);
  for (const auto& b : batches) {
    b.validate(d.schema);
    total += b.size();
    for (int y : b.label) ++label_hist[static_cast<std::size_t>(y)];
    for (double w : b.sample_weight) CHECK(w == 1.0);
  }
  CHECK(total == d.size());
  std::size_t want_clicks = 0;
  for (const auto& r : d.rows) want_clicks += static_cast<std::size_t>(r.label);
  CHECK(label_hist[1] == want_clicks);

  // same seed, same order; different seed shuffles
  std::vector<Batch> again = batch_iter(d, 128, 77);
  CHECK(again[0].domain_id == batches[0].domain_id);
  std::vector<Batch> other = batch_iter(d, 128, 78);
  CHECK(other[0].domain_id != batches[0].domain_id);
}

TEST_CASE("make_batch pulls the requested rows") {
  SyntheticConfig c = small_config();
  c.n_samples = 50;
  Dataset d = generate(c);
  Batch b = make_batch(d, {4, 9, 4});
  CHECK(b.size() == 3);
  CHECK(b.domain_id[0] == d.rows[4].domain);
  CHECK(b.domain_id[1] == d.rows[9].domain);
  CHECK(b.general_ids[0][2] == d.rows[4].general[0]);
  CHECK(b.label[1] == d.rows[9].label);
}

TEST_CASE("infeasible overlap is rejected with the offending field") {
  SyntheticConfig c = small_config();
  c.n_users = 4;  // pool of 2; complement of 2; overlap 0 needs 2 from complement: ok
  c.n_items = 4;
  c.user_overlap = {0.0, 0.0};
  c.item_overlap = {0.0, 0.0};
  CHECK_NOTHROW(static_cast<void>(generate(c)));
  // separable preset remains valid and small
  SyntheticConfig sep = SyntheticConfig::separable_preset();
  CHECK_NOTHROW(sep.validate());
  CHECK(sep.n_domains == 3);
}

TEST_CASE("dataset subset keeps schema and provenance") {
  SyntheticConfig c = small_config();
  c.n_samples = 20;
  Dataset d = generate(c);
  Dataset sub = d.subset({1, 3, 5});
  CHECK(sub.size() == 3);
  CHECK(sub.rows[1].domain == d.rows[3].domain);
  CHECK(sub.provenance == d.provenance);
  CHECK(sub.schema.domain.vocab == d.schema.domain.vocab);
}
