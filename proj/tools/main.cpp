#include <algorithm>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <sstream>
#include <string>
#include <vector>

#include "CLI11.hpp"
#include "json.hpp"

#include "exitnet/calibration.hpp"
#include "exitnet/checkpoint.hpp"
#include "exitnet/config.hpp"
#include "exitnet/data.hpp"
#include "exitnet/error.hpp"
#include "exitnet/exit_engine.hpp"
#include "exitnet/flops.hpp"
#include "exitnet/loss.hpp"
#include "exitnet/model.hpp"
#include "exitnet/rng.hpp"
#include "exitnet/train.hpp"

namespace {

using namespace exitnet;

struct Common {
  std::string preset;
  std::string config_file;
  std::string data_spec;
  std::string out_dir = ".";
  std::uint64_t seed = 0;
};

void add_model_options(CLI::App* cmd, Common& c) {
  cmd->add_option("--preset", c.preset, "named model configuration");
  cmd->add_option("--config", c.config_file, "model configuration as a json file");
}

void add_common(CLI::App* cmd, Common& c) {
  add_model_options(cmd, c);
  cmd->add_option("--data", c.data_spec,
                  "dataset: synthetic:CLASSESxPER_CLASS or idx:IMAGES,LABELS");
  cmd->add_option("--out", c.out_dir, "output directory (default .)");
  cmd->add_option("--seed", c.seed, "seed for weights, data, and shuffling");
}

ModelConfig resolve_config(const Common& c) {
  if (c.preset.empty() == c.config_file.empty()) {
    throw ConfigError("give exactly one of --preset or --config");
  }
  if (!c.preset.empty()) return ModelConfig::preset(c.preset);
  std::ifstream in(c.config_file);
  if (!in) throw ConfigError("cannot open config file '" + c.config_file + "'");
  nlohmann::json j;
  try {
    in >> j;
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError("config file '" + c.config_file + "': " + e.what());
  }
  return ModelConfig::from_json(j);
}

Dataset resolve_data(const Common& c, const ModelConfig& cfg) {
  const std::string& spec = c.data_spec;
  if (spec.empty()) throw ConfigError("--data is required for this command");

  Dataset d;
  if (spec.rfind("synthetic:", 0) == 0) {
    std::size_t classes = 0, per_class = 0;
    char x = 0;
    std::istringstream body(spec.substr(10));
    if (!(body >> classes >> x >> per_class) || x != 'x' || !body.eof()) {
      throw ConfigError("--data synthetic takes CLASSESxPER_CLASS, got '" + spec + "'");
    }
    if (classes != cfg.num_classes) {
      throw ConfigError("synthetic data declares " + std::to_string(classes) +
                        " classes but the model has " + std::to_string(cfg.num_classes));
    }
    d = make_synthetic(classes, per_class, cfg.in_channels, cfg.image_h, cfg.image_w,
                       derive_seed(c.seed, "data"));
  } else if (spec.rfind("idx:", 0) == 0) {
    std::string body = spec.substr(4);
    std::size_t comma = body.find(',');
    if (comma == std::string::npos) {
      throw ConfigError("--data idx takes IMAGES,LABELS, got '" + spec + "'");
    }
    d = load_idx(body.substr(0, comma), body.substr(comma + 1));
    if (d.channels != cfg.in_channels || d.height != cfg.image_h ||
        d.width != cfg.image_w) {
      throw ConfigError("idx data is " + std::to_string(d.channels) + "x" +
                        std::to_string(d.height) + "x" + std::to_string(d.width) +
                        " but the model expects " + std::to_string(cfg.in_channels) +
                        "x" + std::to_string(cfg.image_h) + "x" +
                        std::to_string(cfg.image_w));
    }
    if (d.num_classes > cfg.num_classes) {
      throw ConfigError("idx labels use " + std::to_string(d.num_classes) +
                        " classes but the model has only " +
                        std::to_string(cfg.num_classes));
    }
  } else {
    throw ConfigError("--data must start with synthetic: or idx:, got '" + spec + "'");
  }
  standardize(d);
  return d;
}

std::filesystem::path out_path(const Common& c, const std::string& name) {
  std::filesystem::path dir(c.out_dir);
  std::filesystem::create_directories(dir);
  return dir / name;
}

Model load_model(const Common& c, const ModelConfig& cfg, const std::string& checkpoint) {
  Model m(cfg, c.seed);
  m.load(load_checkpoint(checkpoint, cfg.hash()));
  return m;
}

std::array<double, 4> parse_thresholds(const std::string& spec) {
  std::vector<double> v;
  std::istringstream in(spec);
  std::string cell;
  while (std::getline(in, cell, ',')) v.push_back(std::stod(cell));
  if (v.size() == 3) v.push_back(0.0);
  if (v.size() != 4) {
    throw ConfigError("--thresholds takes 3 or 4 comma-separated values");
  }
  return {v[0], v[1], v[2], v[3]};
}

std::vector<double> parse_budgets(const std::string& spec, const FlopsProfile& prof) {
  auto c1 = static_cast<double>(prof.cumulative[0]);
  auto ck = static_cast<double>(prof.cumulative[3]);
  if (spec == "full") return {ck};
  if (spec.rfind("linspace:", 0) == 0) {
    std::size_t n = std::stoul(spec.substr(9));
    if (n < 2) throw ConfigError("--budgets linspace needs at least 2 points");
    std::vector<double> budgets(n);
    for (std::size_t i = 0; i < n; ++i) {
      budgets[i] =
          c1 + (ck - c1) * static_cast<double>(i) / static_cast<double>(n - 1);
    }
    return budgets;
  }
  std::vector<double> budgets;
  std::istringstream in(spec);
  std::string cell;
  while (std::getline(in, cell, ',')) budgets.push_back(std::stod(cell));
  if (budgets.empty()) throw ConfigError("--budgets is empty");
  return budgets;
}

int cmd_train(const Common& c, const TrainOptions& base, const std::string& exits_spec) {
  ModelConfig cfg = resolve_config(c);
  if (!exits_spec.empty()) {
    std::istringstream in(exits_spec);
    std::string cell;
    std::size_t k = 0;
    while (std::getline(in, cell, ',') && k < 4) cfg.exits[k++] = cell == "1";
    if (k != 4) throw ConfigError("--exits takes 4 comma-separated 0/1 flags");
    cfg.validate();
  }
  Dataset full = resolve_data(c, cfg);
  auto [train_set, eval_set] = stratified_split(full, 0.5, derive_seed(c.seed, "split"));

  Model m(cfg, c.seed);
  TrainOptions opt = base;
  opt.seed = c.seed;
  if (opt.warmup_epochs >= opt.epochs) {
    throw ConfigError("--warmup-epochs (" + std::to_string(opt.warmup_epochs) +
                      ") must be smaller than --epochs (" + std::to_string(opt.epochs) +
                      ")");
  }
  std::vector<EpochRow> rows = train(m, train_set, eval_set, opt);

  std::filesystem::path history_file = out_path(c, "history.tsv");
  std::ofstream hist(history_file);
  write_history(hist, rows);
  std::filesystem::path ckpt_file = out_path(c, "checkpoint.bin");
  save_checkpoint(ckpt_file.string(), cfg.hash(), m.parameters());

  const EpochRow& last = rows.back();
  std::cout << "trained " << opt.epochs << " epochs on " << train_set.size()
            << " samples (eval on " << eval_set.size() << ")\n";
  std::cout << "final eval accuracy per exit:";
  for (double a : last.exit_accuracy) std::cout << ' ' << a;
  std::cout << '\n';
  std::cout << "wrote " << history_file.string() << " and " << ckpt_file.string()
            << '\n';
  return 0;
}

int cmd_evaluate(const Common& c, const std::string& checkpoint,
                 const std::string& thresholds_spec, bool want_trace) {
  ModelConfig cfg = resolve_config(c);
  Model m = load_model(c, cfg, checkpoint);
  Dataset d = resolve_data(c, cfg);
  FlopsProfile prof = flops_profile(cfg);

  ExitPolicy policy;  // unreachable gates: the full model
  if (!thresholds_spec.empty()) policy.thresholds = parse_thresholds(thresholds_spec);

  EvalSummary s;
  if (want_trace) {
    std::filesystem::path trace_file = out_path(c, "trace.tsv");
    std::ofstream trace(trace_file);
    s = batch_evaluate(m, d, policy, prof, &trace);
    std::cout << "wrote " << trace_file.string() << '\n';
  } else {
    s = batch_evaluate(m, d, policy, prof);
  }
  std::cout << "accuracy " << s.accuracy << '\n';
  std::cout << "mean flops " << s.mean_flops << '\n';
  std::cout << "exit histogram";
  for (std::int64_t n : s.exit_histogram) std::cout << ' ' << n;
  std::cout << '\n';
  return 0;
}

int cmd_calibrate(const Common& c, const std::string& checkpoint, double budget) {
  ModelConfig cfg = resolve_config(c);
  Model m = load_model(c, cfg, checkpoint);
  Dataset d = resolve_data(c, cfg);
  FlopsProfile prof = flops_profile(cfg);

  CalibrationSet cal = collect_calibration(m, d, prof);
  double q = solve_q(cal.costs, budget);
  std::vector<double> theta = thresholds_from_fractions(cal, gate_mass(q, 4));

  ExitPolicy policy;
  std::copy(theta.begin(), theta.end(), policy.thresholds.begin());
  EvalSummary s = batch_evaluate(m, d, policy, prof);

  nlohmann::json j;
  j["budget"] = budget;
  j["q"] = q;
  j["thresholds"] = theta;
  std::filesystem::path file = out_path(c, "thresholds.json");
  std::ofstream out(file);
  out << j.dump(2) << '\n';

  std::cout << "q " << q << '\n';
  std::cout << "thresholds";
  for (double t : theta) std::cout << ' ' << t;
  std::cout << '\n';
  std::cout << "calibration mean flops " << s.mean_flops << " against budget " << budget
            << '\n';
  std::cout << "wrote " << file.string() << '\n';
  return 0;
}

int cmd_sweep(const Common& c, const std::string& checkpoint,
              const std::string& budgets_spec) {
  ModelConfig cfg = resolve_config(c);
  Model m = load_model(c, cfg, checkpoint);
  Dataset full = resolve_data(c, cfg);
  auto [cal_set, eval_set] = stratified_split(full, 0.5, derive_seed(c.seed, "split"));

  FlopsProfile prof = flops_profile(cfg);
  std::vector<double> budgets = parse_budgets(budgets_spec, prof);
  std::vector<CurveRow> rows = budget_sweep(m, cal_set, eval_set, budgets, prof);

  std::filesystem::path file = out_path(c, "curve.tsv");
  std::ofstream out(file);
  write_curve(out, rows);
  std::cout << "wrote " << file.string() << " (" << rows.size() << " budgets)\n";

  // endpoint sanity: the extreme budgets must reproduce the plain evaluations
  bool ok = true;
  auto c1 = static_cast<double>(prof.cumulative[0]);
  auto ck = static_cast<double>(prof.cumulative[3]);
  if (rows.front().budget == c1) {
    ExitPolicy first_only;
    first_only.thresholds = {0.0, 1.01, 1.01, 0.0};
    EvalSummary s = batch_evaluate(m, cal_set, first_only, prof);
    bool match = rows.front().cal_mean_flops == s.mean_flops &&
                 rows.front().cal_accuracy == s.accuracy;
    ok = ok && match;
    std::cout << "floor budget reproduces the all-exit-1 evaluation: "
              << (match ? "ok" : "MISMATCH") << '\n';
  }
  if (rows.back().budget == ck) {
    ExitPolicy never;
    EvalSummary s = batch_evaluate(m, cal_set, never, prof);
    bool match = rows.back().cal_mean_flops == s.mean_flops &&
                 rows.back().cal_accuracy == s.accuracy;
    ok = ok && match;
    std::cout << "ceiling budget reproduces the full-model evaluation: "
              << (match ? "ok" : "MISMATCH") << '\n';
  }
  return ok ? 0 : 1;
}

int cmd_profile(const Common& c, bool check, bool as_json) {
  ModelConfig cfg = resolve_config(c);
  FlopsProfile prof = flops_profile(cfg);
  Model m(cfg, c.seed);

  bool check_ok = true;
  std::array<std::uint64_t, 4> counted{};
  if (check) {
    Tensor img = Tensor::zeros({1, cfg.in_channels, cfg.image_h, cfg.image_w});
    for (std::size_t k = 0; k < 4; ++k) {
      StagedForward sf(m, img);
      flopcount::reset();
      sf.logits(k);
      counted[k] = flopcount::count();
      check_ok = check_ok && counted[k] == prof.cumulative[k];
    }
  }

  if (as_json) {
    nlohmann::json j;
    j["config"] = cfg.to_json();
    j["parameters"] = m.parameter_count();
    j["cumulative_flops"] = prof.cumulative;
    j["full_flops"] = prof.full;
    j["latent_stage_flops"] = prof.latent_stage;
    j["feature_stage_flops"] = prof.feature_stage;
    j["exit_head_flops"] = prof.exit_head;
    if (check) j["counter_check"] = check_ok ? "ok" : "mismatch";
    std::cout << j.dump(2) << '\n';
  } else {
    std::cout << "parameters " << m.parameter_count() << '\n';
    for (std::size_t k = 0; k < 4; ++k) {
      std::cout << "exit " << k + 1 << " cumulative flops " << prof.cumulative[k];
      if (check) {
        std::cout << (counted[k] == prof.cumulative[k] ? "  counter ok"
                                                       : "  counter MISMATCH");
        if (counted[k] != prof.cumulative[k]) std::cout << " (counted " << counted[k] << ")";
      }
      std::cout << '\n';
    }
    std::cout << "full forward flops " << prof.full << '\n';
  }
  return check_ok ? 0 : 1;
}

int cmd_gradcheck(const Common& c, double eps, double gate, bool corrupt) {
  ModelConfig cfg = resolve_config(c);
  Model m(cfg, c.seed);
  if (m.parameter_count() >= 200000) {
    std::cerr << "gradcheck: " << m.parameter_count()
              << " parameters; finite differences over a model this size would "
                 "take hours. Use a configuration under 200000 parameters.\n";
    return 2;
  }

  // re-draw every weight from one flat distribution so the probe point is
  // generic rather than whatever the init scheme favors
  ParamList params = m.parameters();
  for (auto& [path, t] : params) {
    Rng r = param_rng(derive_seed(c.seed, "gradcheck"), path);
    for (std::size_t i = 0; i < t.numel(); ++i) t.data()[i] = r.uniform(-0.5, 0.5);
  }

  Rng br(derive_seed(c.seed, "gradcheck-batch"));
  const std::size_t batch = 2;
  std::vector<double> img(batch * cfg.in_channels * cfg.image_h * cfg.image_w);
  for (double& x : img) x = br.uniform(-1.0, 1.0);
  Tensor images = Tensor::from_data({batch, cfg.in_channels, cfg.image_h, cfg.image_w},
                                    std::move(img));
  std::vector<std::size_t> labels(batch);
  for (auto& l : labels) {
    l = static_cast<std::size_t>(br.uniform_int(0, static_cast<int>(cfg.num_classes) - 1));
  }

  // the audit runs the all-hard-label objective (alpha 1): the distillation
  // estimator detaches its teacher on purpose, so for alpha < 1 the analytic
  // gradient differs from the true derivative at every parameter feeding the
  // final exit. alpha 1 still reaches every group through the exit-input chain.
  auto loss_value = [&] {
    return training_loss(full_forward(m, images), labels, 1.0, 0.1).total.data()[0];
  };

  // analytic gradients once, at the probe point
  LossTerms terms = training_loss(full_forward(m, images), labels, 1.0, 0.1);
  terms.total.backward();
  std::vector<std::vector<double>> analytic;
  analytic.reserve(params.size());
  for (auto& [path, t] : params) analytic.push_back(t.grad());

  if (corrupt) analytic[0][0] *= 1.01;  // stand-in for a broken backward rule

  Rng pr(derive_seed(c.seed, "gradcheck-probe"));
  double worst = 0.0;
  std::string worst_path;
  std::size_t worst_index = 0, probed = 0;

  for (std::size_t p = 0; p < params.size(); ++p) {
    Tensor& t = params[p].second;
    std::vector<std::size_t> idx{0, t.numel() - 1};
    while (idx.size() < std::min<std::size_t>(t.numel(), 6)) {
      idx.push_back(static_cast<std::size_t>(
          pr.uniform_int(0, static_cast<int>(t.numel()) - 1)));
    }
    std::sort(idx.begin(), idx.end());
    idx.erase(std::unique(idx.begin(), idx.end()), idx.end());

    for (std::size_t i : idx) {
      double saved = t.data()[i];
      t.data()[i] = saved + eps;
      double up = loss_value();
      t.data()[i] = saved - eps;
      double down = loss_value();
      t.data()[i] = saved;

      double fd = (up - down) / (2.0 * eps);
      double an = analytic[p][i];
      double scale = std::max({std::fabs(fd), std::fabs(an), 1e-4});
      double rel = std::fabs(fd - an) / scale;
      ++probed;
      if (rel > worst) {
        worst = rel;
        worst_path = params[p].first;
        worst_index = i;
      }
    }
  }

  std::cout << "max relative error " << worst << " at " << worst_path << "["
            << worst_index << "] (" << probed << " entries across " << params.size()
            << " tensors)\n";
  if (worst < gate) {
    std::cout << "gradcheck PASS (gate " << gate << ")\n";
    return 0;
  }
  std::cout << "gradcheck FAIL (gate " << gate << ")\n";
  return 1;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"dual-branch early-exit image classifier"};
  app.require_subcommand(1);

  Common train_c, eval_c, cal_c, sweep_c, prof_c, grad_c;

  CLI::App* train_cmd = app.add_subcommand("train", "train with self-distillation");
  add_common(train_cmd, train_c);
  TrainOptions topt;
  std::string exits_spec;
  train_cmd->add_option("--epochs", topt.epochs, "training epochs (default 30)");
  train_cmd->add_option("--batch", topt.batch_size, "batch size (default 32)");
  train_cmd->add_option("--lr", topt.peak_lr, "peak learning rate (default 1e-3)");
  train_cmd->add_option("--warmup-epochs", topt.warmup_epochs,
                        "linear warmup length (default 2)");
  train_cmd->add_option("--alpha", topt.alpha,
                        "hard-label weight in the early-exit loss (default 0.5)");
  train_cmd->add_option("--smoothing", topt.label_smoothing,
                        "label smoothing for hard-label terms (default 0.1)");
  train_cmd->add_option("--exits", exits_spec,
                        "which exits join the objective, e.g. 0,0,0,1");

  CLI::App* eval_cmd = app.add_subcommand("evaluate", "gated or full evaluation");
  add_common(eval_cmd, eval_c);
  std::string eval_ckpt, thresholds_spec;
  bool want_trace = false;
  eval_cmd->add_option("--checkpoint", eval_ckpt, "trained weights")->required();
  eval_cmd->add_option("--thresholds", thresholds_spec,
                       "confidence gates t1,t2,t3[,t4]; omit for the full model");
  eval_cmd->add_flag("--trace", want_trace, "write per-sample trace.tsv");

  CLI::App* cal_cmd =
      app.add_subcommand("calibrate", "solve confidence gates for one budget");
  add_common(cal_cmd, cal_c);
  std::string cal_ckpt;
  double budget = 0.0;
  cal_cmd->add_option("--checkpoint", cal_ckpt, "trained weights")->required();
  cal_cmd->add_option("--budget", budget, "mean-flops target")->required();

  CLI::App* sweep_cmd =
      app.add_subcommand("sweep", "accuracy-versus-flops curve over budgets");
  add_common(sweep_cmd, sweep_c);
  std::string sweep_ckpt, budgets_spec = "linspace:10";
  sweep_cmd->add_option("--checkpoint", sweep_ckpt, "trained weights")->required();
  sweep_cmd->add_option("--budgets", budgets_spec,
                        "'full', 'linspace:N', or comma-separated values");

  CLI::App* prof_cmd = app.add_subcommand("profile", "parameter and flops accounting");
  add_model_options(prof_cmd, prof_c);
  bool check = false, as_json = false;
  prof_cmd->add_flag("--check", check, "verify against the instrumented counter");
  prof_cmd->add_flag("--json", as_json, "machine-readable output");

  CLI::App* grad_cmd =
      app.add_subcommand("gradcheck", "finite-difference gradient audit");
  add_model_options(grad_cmd, grad_c);
  grad_cmd->add_option("--seed", grad_c.seed, "probe point seed");
  double eps = 1e-5, gate = 1e-4;
  bool corrupt = false;
  grad_cmd->add_option("--eps", eps, "central-difference step (default 1e-5)");
  grad_cmd->add_option("--gate", gate, "max relative error to pass (default 1e-4)");
  grad_cmd->add_flag("--corrupt-backward", corrupt)->group("");

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    int code = app.exit(e);
    return code == 0 ? 0 : 2;
  }

  try {
    if (app.got_subcommand(train_cmd)) return cmd_train(train_c, topt, exits_spec);
    if (app.got_subcommand(eval_cmd)) {
      return cmd_evaluate(eval_c, eval_ckpt, thresholds_spec, want_trace);
    }
    if (app.got_subcommand(cal_cmd)) return cmd_calibrate(cal_c, cal_ckpt, budget);
    if (app.got_subcommand(sweep_cmd)) return cmd_sweep(sweep_c, sweep_ckpt, budgets_spec);
    if (app.got_subcommand(prof_cmd)) return cmd_profile(prof_c, check, as_json);
    if (app.got_subcommand(grad_cmd)) return cmd_gradcheck(grad_c, eps, gate, corrupt);
  } catch (const NumericalError& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 1;
  }
  return 2;
}
