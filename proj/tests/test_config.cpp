#include <cstdlib>
#include <string>

#include <gtest/gtest.h>
#include <nlohmann/json.hpp>

#include "dacmap/config.hpp"

using namespace dacmap;
using nlohmann::json;

namespace {

std::string error_of(const json &j) {
  try {
    parse_config(j);
  } catch (const Error &e) {
    EXPECT_EQ(e.kind(), ErrorKind::Validation);
    return e.what();
  }
  return {};
}

}  // namespace

TEST(Config, MinimalDefaults) {
  Config c = parse_config(json{{"version", 1}});
  EXPECT_EQ(c.spec.prior.interaction, Interaction::IV);
  EXPECT_EQ(c.spec.prior.temporal_order, 1);
  EXPECT_EQ(c.spec.k, 0);
  EXPECT_EQ(c.spec.plan, Plan::Sequential);
}

TEST(Config, ReadsSections) {
  json j = {{"version", 1},
            {"seed", 99},
            {"model", {{"temporal", "rw2"}, {"interaction", "II"}, {"k", 2}}},
            {"plan", {{"kind", "cluster"}, {"workers", {"127.0.0.1:7001", "127.0.0.1:7002"}}}},
            {"merge", {{"strategy", "mixture"}, {"ic_samples", 300}}},
            {"engine", {{"grid_points", 3}, {"cpo_refit_ess", 0.0}}}};
  Config c = parse_config(j);
  EXPECT_EQ(c.spec.seed, 99u);
  EXPECT_EQ(c.spec.prior.temporal_order, 2);
  EXPECT_EQ(c.spec.prior.interaction, Interaction::II);
  EXPECT_EQ(c.spec.k, 2);
  EXPECT_EQ(c.spec.plan, Plan::Cluster);
  ASSERT_EQ(c.spec.workers.size(), 2u);
  EXPECT_EQ(c.spec.workers[1].port, 7002);
  EXPECT_EQ(c.spec.merge, MergeStrategy::Mixture);
  EXPECT_EQ(c.spec.ic_samples, 300);
  EXPECT_EQ(c.spec.engine.grid_points, 3);
  EXPECT_EQ(c.spec.engine.cpo_refit_ess, 0.0);

  Config back = parse_config(to_json(c));
  EXPECT_EQ(to_json(back), to_json(c));
}

TEST(Config, ErrorsNameThePath) {
  EXPECT_NE(error_of(json::object()).find("$.version"), std::string::npos);
  EXPECT_NE(error_of(json{{"version", 2}}).find("$.version"), std::string::npos);
  EXPECT_NE(error_of(json{{"version", 1}, {"model", {{"interaction", "V"}}}}).find("$.model.interaction"),
            std::string::npos);
  EXPECT_NE(error_of(json{{"version", 1}, {"engine", {{"grid_pts", 3}}}}).find("$.engine.grid_pts: unknown key"),
            std::string::npos);
  EXPECT_NE(error_of(json{{"version", 1}, {"model", {{"k", "two"}}}}).find("$.model.k"), std::string::npos);
  EXPECT_NE(error_of(json{{"version", 1}, {"colour", "red"}}).find("unknown key"), std::string::npos);
}

TEST(Config, WorkersFromEnvironment) {
  Config c = parse_config(json{{"version", 1}});
  ::setenv("DACMAP_WORKERS", "10.0.0.1:9000", 1);
  apply_environment(c);
  ::unsetenv("DACMAP_WORKERS");
  ASSERT_EQ(c.spec.workers.size(), 1u);
  EXPECT_EQ(c.spec.workers[0].host, "10.0.0.1");
}
