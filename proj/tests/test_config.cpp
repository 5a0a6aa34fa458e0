#include <gtest/gtest.h>

#include "dynn/config.hpp"

using namespace dynn;

TEST(Config, EmptyObjectGivesDefaults) {
  const RunConfig rc = run_config_from_json(nlohmann::json::object());
  EXPECT_EQ(rc.cell.n_users, 30u);
  EXPECT_EQ(rc.model.experts, 30u);
  EXPECT_EQ(rc.model.expert_cost(), 2176u);
  EXPECT_EQ(rc.train.epochs, 20000u);
  EXPECT_EQ(rc.bench.seed, 2024u);
}

TEST(Config, OverridesAndSync) {
  const auto j = nlohmann::json::parse(R"({"n_users": 8, "g0_db": -30, "experts": 4, "epochs": 5,
                                          "optimizer": "sgd", "d_max_m": 200, "eval_seed": 9})");
  const RunConfig rc = run_config_from_json(j);
  EXPECT_EQ(rc.model.n_users, 8u);
  EXPECT_EQ(rc.model.expert_out, 8u);
  EXPECT_NEAR(rc.cell.g0, 1e-3, 1e-15);
  EXPECT_EQ(rc.train.optimizer, train::Optimizer::sgd);
  EXPECT_EQ(rc.train.d_max, 200.0);
  EXPECT_EQ(rc.bench.seed, 9u);
}

TEST(Config, RejectsBadInput) {
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"bogus": 1})")), ContractError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"epochs": "many"})")), ContractError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse(R"({"b_max_hz": -1})")), ContractError);
  EXPECT_THROW(run_config_from_json(nlohmann::json::parse("[1]")), ContractError);
  EXPECT_THROW(load_run_config("/nonexistent/config.json"), IoError);
}
