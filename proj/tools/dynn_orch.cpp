// dynn-orch: train, build the width knowledge base, evaluate, allocate and
// reproduce the evaluation tables/figures.

#include <cstdio>
#include <exception>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "dynn/bench.hpp"
#include "dynn/checkpoint.hpp"
#include "dynn/config.hpp"
#include "dynn/knowledge.hpp"
#include "dynn/training.hpp"

namespace fs = std::filesystem;
using namespace dynn;

namespace {

struct CommonOptions {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::string out = ".";
};

void add_common(CLI::App* app, CommonOptions& o) {
  app->add_option("--config", o.config, "JSON run configuration");
  app->add_option("--seed", o.seed, "random seed");
  app->add_option("--out", o.out, "output directory")->capture_default_str();
}

RunConfig load(const CommonOptions& o) {
  RunConfig rc = o.config.empty() ? RunConfig{} : load_run_config(o.config);
  if (o.config.empty()) {
    rc.sync();
    rc.validate();
  }
  return rc;
}

fs::path out_dir(const CommonOptions& o) {
  fs::path dir(o.out);
  std::error_code ec;
  fs::create_directories(dir, ec);
  if (ec) throw IoError("cannot create output directory '" + dir.string() + "': " + ec.message());
  return dir;
}

std::string fmt(const char* f, double v) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, v);
  return buf;
}

bench::ResultTable loss_table(const train::TrainReport& r) {
  bench::ResultTable t{{"epoch", "loss_s"}, {}};
  for (std::size_t i = 0; i < r.loss_trace.size(); ++i)
    t.rows.push_back({static_cast<std::int64_t>(i), r.loss_trace[i]});
  return t;
}

void summarize_training(const std::string& name, const train::TrainReport& r) {
  std::cout << "trained " << name << ": steps=" << r.loss_trace.size();
  for (const auto& v : r.validation) std::cout << " t_tra(K=" << v.k << ")=" << fmt("%.4f", v.t_tra * 1e3) << "ms";
  std::cout << '\n';
}

std::vector<double> parse_list(const std::string& s) {
  std::vector<double> out;
  std::stringstream ss(s);
  std::string item;
  while (std::getline(ss, item, ',')) {
    try {
      out.push_back(std::stod(item));
    } catch (const std::exception&) {
      throw ContractError("bad number '" + item + "' in list '" + s + "'");
    }
  }
  return out;
}

// Scenario CSV: header "s_bits,w,d_m", then one user per row.
delay::ScenarioBatch read_scenario(const fs::path& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open scenario file '" + path.string() + "'");
  std::string line;
  if (!std::getline(in, line) || line != "s_bits,w,d_m")
    throw IoError(path.string() + ": expected header 's_bits,w,d_m'");
  delay::ScenarioBatch b;
  while (std::getline(in, line)) {
    if (line.empty()) continue;
    const auto v = parse_list(line);
    if (v.size() != 3) throw IoError(path.string() + ": bad row '" + line + "'");
    b.s.push_back(v[0]);
    b.w.push_back(v[1]);
    b.d.push_back(v[2]);
  }
  return b;
}

struct Models {
  moe::DynnModel dynn;
  moe::DynnModel fixed;
};

Models load_models(const fs::path& dir) {
  return {moe::load_checkpoint(dir / "dynn.ckpt"), moe::load_checkpoint(dir / "static.ckpt")};
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dynn-orch: knowledge-assisted dynamic-width bandwidth allocation"};
  app.require_subcommand(1);

  // train
  CommonOptions train_opt;
  std::optional<std::size_t> epochs;
  std::string which = "both";
  std::string ckpt_out;
  auto* train_cmd = app.add_subcommand("train", "train the gated model and the static baseline");
  add_common(train_cmd, train_opt);
  train_cmd->add_option("--epochs", epochs, "optimizer steps");
  train_cmd->add_option("--model", which, "dynn, static or both")
      ->check(CLI::IsMember({"dynn", "static", "both"}))
      ->capture_default_str();
  train_cmd->add_option("--checkpoint", ckpt_out, "gated-model checkpoint path (default OUT/dynn.ckpt)");

  // build-kb
  CommonOptions kb_opt;
  std::string kb_ckpt;
  std::string s_grid = "1000,2000,3000,4000,5000,6000,7000,8000,9000,10000";
  double f_min = 20e6, f_max = 2e9;
  std::size_t f_points = 20;
  std::optional<std::size_t> kb_scenarios;
  auto* kb_cmd = app.add_subcommand("build-kb", "build the (task size, CPU frequency) -> K knowledge base");
  add_common(kb_cmd, kb_opt);
  kb_cmd->add_option("--checkpoint", kb_ckpt, "gated-model checkpoint (default OUT/dynn.ckpt)");
  kb_cmd->add_option("--s-grid", s_grid, "comma-separated mean task sizes, bits")->capture_default_str();
  kb_cmd->add_option("--f-min", f_min, "lowest CPU frequency, Hz")->capture_default_str();
  kb_cmd->add_option("--f-max", f_max, "highest CPU frequency, Hz")->capture_default_str();
  kb_cmd->add_option("--f-points", f_points, "log-spaced frequency points")->capture_default_str();
  kb_cmd->add_option("--scenarios", kb_scenarios, "evaluation scenarios per cell");

  // eval
  CommonOptions eval_opt;
  std::string eval_ckpt;
  std::string eval_widths = "1,2,5,10,20,30";
  double eval_s_mean = 10e3, eval_f = 0.5e9;
  auto* eval_cmd = app.add_subcommand("eval", "mean delay breakdown per width on a frozen scenario set");
  add_common(eval_cmd, eval_opt);
  eval_cmd->add_option("--checkpoint", eval_ckpt, "gated-model checkpoint (default OUT/dynn.ckpt)");
  eval_cmd->add_option("--widths", eval_widths, "comma-separated widths")->capture_default_str();
  eval_cmd->add_option("--s-mean", eval_s_mean, "mean task size, bits")->capture_default_str();
  eval_cmd->add_option("--f", eval_f, "CPU frequency, Hz")->capture_default_str();

  // allocate
  CommonOptions alloc_opt;
  std::string alloc_ckpt, alloc_kb, scenario_path;
  double alloc_f = 0.5e9;
  auto* alloc_cmd = app.add_subcommand("allocate", "knowledge-assisted allocation for one scenario file");
  add_common(alloc_cmd, alloc_opt);
  alloc_cmd->add_option("--checkpoint", alloc_ckpt, "gated-model checkpoint (default OUT/dynn.ckpt)");
  alloc_cmd->add_option("--kb", alloc_kb, "knowledge base (default OUT/kb.txt)");
  alloc_cmd->add_option("--scenario", scenario_path, "CSV with header s_bits,w,d_m")->required();
  alloc_cmd->add_option("--f", alloc_f, "CPU frequency, Hz")->capture_default_str();

  // reproduce
  CommonOptions rep_opt;
  std::string experiment, ckpt_dir;
  auto* rep_cmd = app.add_subcommand("reproduce", "regenerate one evaluation table or figure");
  add_common(rep_cmd, rep_opt);
  rep_cmd->add_option("experiment", experiment, "table1, table2, fig3, fig4 or fig5")
      ->required()
      ->check(CLI::IsMember({"table1", "table2", "fig3", "fig4", "fig5"}));
  rep_cmd->add_option("--checkpoint-dir", ckpt_dir, "directory with dynn.ckpt and static.ckpt (default OUT)");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (train_cmd->parsed()) {
      RunConfig rc = load(train_opt);
      if (train_opt.seed) rc.train.seed = *train_opt.seed;
      if (epochs) rc.train.epochs = *epochs;
      rc.train.validation_widths = rc.bench.widths;
      const fs::path dir = out_dir(train_opt);
      if (which != "static") {
        auto [model, report] = train::train_stage1(rc.train, rc.model, rc.cell);
        moe::save_checkpoint(model, ckpt_out.empty() ? dir / "dynn.ckpt" : fs::path(ckpt_out));
        bench::emit(loss_table(report), dir / "train_loss.csv", bench::Format::csv);
        summarize_training("dynn", report);
      }
      if (which != "dynn") {
        moe::ModelConfig mc = rc.model;
        mc.gated = false;
        rc.train.validation_widths = {rc.model.experts};
        auto [model, report] = train::train_stage1(rc.train, mc, rc.cell);
        moe::save_checkpoint(model, dir / "static.ckpt");
        bench::emit(loss_table(report), dir / "static_train_loss.csv", bench::Format::csv);
        summarize_training("static", report);
      }
    } else if (kb_cmd->parsed()) {
      RunConfig rc = load(kb_opt);
      if (kb_opt.seed) rc.bench.seed = *kb_opt.seed;
      if (kb_scenarios) rc.bench.eval_scenarios = *kb_scenarios;
      const fs::path dir = out_dir(kb_opt);
      const auto model = moe::load_checkpoint(kb_ckpt.empty() ? dir / "dynn.ckpt" : fs::path(kb_ckpt));
      const auto kb = kb::build_kb(model, parse_list(s_grid), kb::log_grid(f_min, f_max, f_points),
                                   rc.bench.kb_eval(), rc.cell);
      kb::save_kb(kb, dir / "kb.txt");
      std::cout << "knowledge base: " << kb.s_grid.size() << "x" << kb.f_grid.size() << " cells -> "
                << (dir / "kb.txt").string() << '\n';
    } else if (eval_cmd->parsed()) {
      RunConfig rc = load(eval_opt);
      if (eval_opt.seed) rc.bench.seed = *eval_opt.seed;
      const fs::path dir = out_dir(eval_opt);
      const auto model = moe::load_checkpoint(eval_ckpt.empty() ? dir / "dynn.ckpt" : fs::path(eval_ckpt));
      const auto set = bench::eval_set(rc.bench, eval_s_mean, rc.cell);
      bench::ResultTable t{{"k", "t_tra_ms", "t_com_ms", "total_ms"}, {}};
      for (double kd : parse_list(eval_widths)) {
        const auto k = static_cast<std::size_t>(kd);
        const auto d = kb::total_delay_at_k(model, k, set, eval_f, rc.cell);
        t.rows.push_back({static_cast<std::int64_t>(k), d.t_tra * 1e3, d.t_com * 1e3, d.total * 1e3});
      }
      bench::emit(t, dir / "eval.csv", bench::Format::csv);
      std::cout << bench::render(t, bench::Format::csv);
    } else if (alloc_cmd->parsed()) {
      RunConfig rc = load(alloc_opt);
      const fs::path dir = out_dir(alloc_opt);
      const auto model = moe::load_checkpoint(alloc_ckpt.empty() ? dir / "dynn.ckpt" : fs::path(alloc_ckpt));
      const auto kb = kb::load_kb(alloc_kb.empty() ? dir / "kb.txt" : fs::path(alloc_kb));
      const auto batch = read_scenario(scenario_path);
      batch.validate(rc.cell);
      const auto r = kb::allocate_on_demand(kb, model, batch, alloc_f, rc.cell);
      bench::ResultTable t{{"user", "s_bits", "w", "d_m", "b_hz"}, {}};
      for (std::size_t i = 0; i < batch.size(); ++i)
        t.rows.push_back({static_cast<std::int64_t>(i), batch.s[i], batch.w[i], batch.d[i], r.alloc.b[i]});
      bench::emit(t, dir / "allocation.csv", bench::Format::csv);
      std::cout << "K=" << r.k << " t_tra_ms=" << fmt("%.6f", r.delay.t_tra * 1e3)
                << " t_com_ms=" << fmt("%.6f", r.delay.t_com * 1e3) << " total_ms=" << fmt("%.6f", r.delay.total * 1e3)
                << '\n';
    } else if (rep_cmd->parsed()) {
      RunConfig rc = load(rep_opt);
      if (rep_opt.seed) rc.bench.seed = *rep_opt.seed;
      const fs::path dir = out_dir(rep_opt);
      const Models m = load_models(ckpt_dir.empty() ? dir : fs::path(ckpt_dir));
      if (experiment == "table1") {
        bench::emit(bench::run_table1(m.dynn, m.fixed, rc.bench, rc.cell).table(), dir / "table1.csv",
                    bench::Format::csv);
      } else if (experiment == "table2") {
        bench::emit(bench::run_table2(m.dynn, m.fixed, rc.bench, rc.cell).table(), dir / "table2.csv",
                    bench::Format::csv);
      } else if (experiment == "fig3") {
        const auto fig = bench::run_fig3(m.dynn, m.fixed, rc.bench, rc.cell).table();
        bench::emit(fig, dir / "fig3.csv", bench::Format::csv);
        bench::emit(fig, dir / "fig3.dat", bench::Format::plot_data);
      } else if (experiment == "fig4") {
        const auto kb = bench::run_fig4(m.dynn, rc.bench, rc.cell);
        kb::save_kb(kb, dir / "kb.txt");
        bench::emit(bench::surface_table(kb), dir / "fig4_surface.csv", bench::Format::csv);
      } else {
        const fs::path kb_path = dir / "kb.txt";
        const auto kb = fs::exists(kb_path) ? kb::load_kb(kb_path) : bench::run_fig4(m.dynn, rc.bench, rc.cell);
        const auto fig = bench::run_fig5(m.dynn, m.fixed, kb, rc.bench, rc.cell);
        bench::emit(fig.table(), dir / "fig5.csv", bench::Format::csv);
        bench::emit(fig.trials_table(), dir / "fig5_trials.csv", bench::Format::csv);
      }
      std::cout << "reproduced " << experiment << " -> " << dir.string() << '\n';
    }
  } catch (const ContractError& e) {
    std::cerr << "error: contract: " << e.what() << '\n';
    return 2;
  } catch (const IoError& e) {
    std::cerr << "error: io: " << e.what() << '\n';
    return 3;
  } catch (const std::exception& e) {
    std::cerr << "error: runtime: " << e.what() << '\n';
    return 1;
  }
  return 0;
}
