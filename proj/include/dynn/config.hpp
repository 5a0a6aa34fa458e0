#pragma once

// Run configuration from a flat JSON object. Every key is optional and
// defaults reproduce the reference cell and experiment settings; unknown
// keys are rejected.
//
//   cell:   power_w, g0_db, d0_m, n0_w_per_hz, b_max_hz, n_users, alpha,
//           weight_levels
//   model:  experts, embed_dim, expert_hidden, s_norm_bits, d_norm_m
//   train:  epochs, learning_rate, batch_scenarios, optimizer, schedule,
//           train_s_max_bits, vary_task_scale, seed
//   eval:   eval_scenarios, d_max_m, fig5_trials, eval_seed

#include <cmath>
#include <filesystem>
#include <fstream>
#include <set>
#include <string>

#include <json.hpp>

#include "dynn/bench.hpp"
#include "dynn/delay_model.hpp"
#include "dynn/errors.hpp"
#include "dynn/moe.hpp"
#include "dynn/training.hpp"

namespace dynn {

struct RunConfig {
  delay::CellConfig cell;
  moe::ModelConfig model;
  train::TrainConfig train;
  bench::BenchConfig bench;

  // Copies the shared settings (user count, sampling range) between sections.
  void sync() {
    model.n_users = cell.n_users;
    model.expert_out = cell.n_users;
    model.d_norm = bench.d_max;
    train.d_max = bench.d_max;
  }

  void validate() const {
    cell.validate();
    model.validate_against(cell);
    train.validate();
  }
};

inline RunConfig run_config_from_json(const nlohmann::json& j) {
  if (!j.is_object()) throw ContractError("config: top level must be a JSON object");
  static const std::set<std::string> known{
      "power_w",        "g0_db",         "d0_m",            "n0_w_per_hz",      "b_max_hz",
      "n_users",        "alpha",         "weight_levels",   "experts",          "embed_dim",
      "expert_hidden",  "s_norm_bits",   "d_norm_m",        "epochs",           "learning_rate",
      "batch_scenarios", "optimizer",    "schedule",        "train_s_max_bits", "vary_task_scale",
      "seed",           "eval_scenarios", "d_max_m",        "fig5_trials",      "eval_seed"};
  for (const auto& [key, _] : j.items())
    if (!known.contains(key)) throw ContractError("config: unknown key '" + key + "'");

  RunConfig rc;
  auto get = [&j](const char* key, auto& out) {
    if (j.contains(key)) j.at(key).get_to(out);
  };
  try {
    get("power_w", rc.cell.power_w);
    if (j.contains("g0_db")) rc.cell.g0 = delay::db_to_linear(j.at("g0_db").get<double>());
    get("d0_m", rc.cell.d0_m);
    get("n0_w_per_hz", rc.cell.n0_w_per_hz);
    get("b_max_hz", rc.cell.b_max_hz);
    get("n_users", rc.cell.n_users);
    get("alpha", rc.cell.alpha);
    get("weight_levels", rc.cell.weight_levels);
    get("d_max_m", rc.bench.d_max);
    rc.sync();

    get("experts", rc.model.experts);
    get("embed_dim", rc.model.embed_dim);
    get("expert_hidden", rc.model.expert_hidden);
    get("s_norm_bits", rc.model.s_norm);
    get("d_norm_m", rc.model.d_norm);

    get("epochs", rc.train.epochs);
    get("learning_rate", rc.train.lr);
    get("batch_scenarios", rc.train.batch_scenarios);
    if (j.contains("optimizer")) rc.train.optimizer = train::parse_optimizer(j.at("optimizer").get<std::string>());
    if (j.contains("schedule")) rc.train.schedule = train::parse_schedule(j.at("schedule").get<std::string>());
    get("train_s_max_bits", rc.train.s_max);
    get("vary_task_scale", rc.train.vary_task_scale);
    get("seed", rc.train.seed);

    get("eval_scenarios", rc.bench.eval_scenarios);
    get("fig5_trials", rc.bench.fig5_trials);
    get("eval_seed", rc.bench.seed);
  } catch (const nlohmann::json::exception& e) {
    throw ContractError(std::string("config: ") + e.what());
  }
  rc.validate();
  return rc;
}

inline RunConfig load_run_config(const std::filesystem::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config '" + path.string() + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw IoError(path.string() + ": " + e.what());
  }
  return run_config_from_json(j);
}

}  // namespace dynn
