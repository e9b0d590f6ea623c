#include "deqfuse/cli.hpp"

#include <algorithm>
#include <cmath>
#include <cstdio>
#include <cstdlib>
#include <fstream>
#include <future>
#include <iostream>
#include <map>
#include <sstream>
#include <thread>

#include <CLI11.hpp>
#include <json.hpp>

#include "deqfuse/checkpoint.hpp"
#include "deqfuse/gradcheck.hpp"

namespace deqfuse::cli {

namespace {

using nlohmann::json;

std::string sci(double v, int digits = 6) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*e", digits, v);
  return buf;
}

std::string fixed(double v, int digits = 4) {
  char buf[40];
  std::snprintf(buf, sizeof(buf), "%.*f", digits, v);
  return buf;
}

// Config precedence: explicit flag > config-file value > built-in default.
// Unknown config keys are rejected.
void apply_config_file(CLI::App& app, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw IoError("cannot open config file " + path);
  json cfg;
  try {
    in >> cfg;
  } catch (const json::parse_error& e) {
    throw ConfigError("config file " + path + ": " + e.what());
  }
  if (!cfg.is_object()) throw ConfigError("config file must hold a JSON object");
  for (const auto& [key, value] : cfg.items()) {
    CLI::Option* opt = app.get_option_no_throw("--" + key);
    if (opt == nullptr) throw ConfigError("config file: unknown key '" + key + "'");
    if (opt->count() > 0) continue;  // flag wins
    std::string text = value.is_string() ? value.get<std::string>() : value.dump();
    opt->add_result(text);
    opt->run_callback();
  }
}

void write_text_file(const std::string& path, const std::string& text) {
  std::ofstream out(path, std::ios::binary);
  if (!out) throw IoError("cannot open " + path + " for writing");
  out << text;
  if (!out) throw IoError("failed writing " + path);
}

SolverConfig make_solver_config(const std::string& method, double tol,
                                std::size_t max_steps, std::size_t memory, double beta,
                                double lambda) {
  SolverConfig cfg;
  if (method == "naive") {
    cfg.method = SolverMethod::kNaive;
  } else if (method == "anderson") {
    cfg.method = SolverMethod::kAnderson;
  } else {
    throw ConfigError("unknown solver '" + method + "' (naive|anderson)");
  }
  cfg.tol = tol;
  cfg.max_steps = max_steps;
  cfg.anderson_memory = memory;
  cfg.beta = beta;
  cfg.ridge_lambda = lambda;
  cfg.validate();
  return cfg;
}

ModalityBundle random_bundle(RngState& rng, std::size_t n, std::size_t batch,
                             std::size_t width) {
  ModalityBundle x;
  for (std::size_t i = 0; i < n; ++i) x.features.push_back(randn(rng, batch, width, 1.0));
  return x;
}

std::string trace_csv(const SolverTrace& trace) {
  std::ostringstream os;
  trace.write_csv(os);
  return os.str();
}

std::string history_csv(const std::vector<EpochStats>& history) {
  std::ostringstream os;
  os << "epoch,train_loss,test_acc,macro_f1,weighted_f1\n";
  for (const EpochStats& e : history) {
    os << e.epoch << "," << sci(e.train_loss) << "," << fixed(e.test_accuracy, 6) << ","
       << fixed(e.macro_f1, 6) << "," << fixed(e.weighted_f1, 6) << "\n";
  }
  return os.str();
}

void print_checkpoint_values(const SolverTrace& trace) {
  std::cout << "relative difference norm by solver step:\n";
  for (std::size_t step : {1u, 10u, 20u, 40u, 100u}) {
    if (step <= trace.rel_diffs.size()) {
      std::cout << "  step " << step << ": " << sci(trace.rel_diffs[step - 1], 2) << "\n";
    }
  }
}

// ---------------------------------------------------------------------------
// converge
// ---------------------------------------------------------------------------

struct ConvergeArgs {
  std::size_t n_modalities = 3, dim = 64, batch = 8, steps = 100;
  std::string solver = "anderson";
  std::uint64_t seed = 0;
  std::string out = "trace.csv";
  std::string checkpoint;
  std::size_t memory = 5;
  double beta = 1.0, lambda = 1e-4;
  std::string gate = "affine";
};

int cmd_converge(const ConvergeArgs& a) {
  RngState rng(a.seed);
  FusionParams params;
  if (!a.checkpoint.empty()) {
    params = load_checkpoint(a.checkpoint).params;
  } else {
    params = init_fusion_params(rng, a.dim, a.n_modalities, 1,
                                gate_mode_from_name(a.gate));
  }
  const ModalityBundle x = random_bundle(rng, params.n_modalities, a.batch, params.width);
  SolverConfig cfg = make_solver_config(a.solver, 1e-30, a.steps, a.memory, a.beta, a.lambda);
  cfg.early_stop = false;  // fixed-length trace
  try {
    const EquilibriumState eq = solve_equilibrium(x, params, cfg);
    write_text_file(a.out, trace_csv(eq.trace));
    print_checkpoint_values(eq.trace);
    std::cout << "wrote " << eq.trace.rel_diffs.size() << " steps to " << a.out << "\n";
    return kExitOk;
  } catch (const DivergenceError& e) {
    SolverTrace partial;
    partial.rel_diffs = e.trace();
    partial.steps_taken = partial.rel_diffs.size();
    write_text_file(a.out, trace_csv(partial));
    std::cerr << "error: " << e.what() << " (partial trace written to " << a.out << ")\n";
    return kExitNumeric;
  }
}

// ---------------------------------------------------------------------------
// gradcheck
// ---------------------------------------------------------------------------

struct GradcheckArgs {
  std::size_t dim = 6, n_modalities = 2, batch = 2, seeds = 5;
  double tol = 1e-3;
  std::string gate = "affine";
};

int cmd_gradcheck(const GradcheckArgs& a) {
  std::map<std::string, double> worst;
  std::vector<std::string> order;
  double unrolled_dev = 0.0;
  for (std::uint64_t seed = 0; seed < a.seeds; ++seed) {
    GradCheckOptions opts;
    opts.width = a.dim;
    opts.n_modalities = a.n_modalities;
    opts.batch = a.batch;
    opts.seed = seed;
    const GradCheckReport report = run_gradcheck(opts);
    for (const GradCheckGroup& g : report.groups) {
      if (worst.find(g.name) == worst.end()) order.push_back(g.name);
      worst[g.name] = std::max(worst[g.name], g.max_rel_err);
    }
    unrolled_dev = std::max(unrolled_dev, report.unrolled_deviation);
  }
  bool pass = unrolled_dev < a.tol;
  std::cout << "gradient check: dim=" << a.dim << " n_modalities=" << a.n_modalities
            << " seeds=" << a.seeds << " tol=" << sci(a.tol, 1) << "\n";
  const auto row = [](const std::string& name, const std::string& value,
                      const std::string& status) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-28s %-14s %s\n", name.c_str(), value.c_str(),
                  status.c_str());
    std::cout << buf;
  };
  row("group", "max_rel_err", "status");
  for (const std::string& name : order) {
    const bool ok = worst[name] < a.tol;
    pass = pass && ok;
    row(name, sci(worst[name], 2), ok ? "pass" : "FAIL");
  }
  row("unrolled_vs_implicit", sci(unrolled_dev, 2), unrolled_dev < a.tol ? "pass" : "FAIL");
  std::cout << "result: " << (pass ? "PASS" : "FAIL") << "\n";
  return pass ? kExitOk : kExitNumeric;
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

struct TrainArgs {
  std::string variant = "full";
  std::size_t epochs = 30, batch_size = 32, dim = 16;
  double lr = 1e-3, gamma = 0.5, sigma = 0.3;
  std::size_t train_samples = 2000, test_samples = 1000;
  std::uint64_t seed = 0;
  std::string out = "train_metrics.csv";
  std::string ckpt_out = "checkpoint.json";
  std::string gate = "affine";
};

TrainResult run_training(const TrainArgs& a) {
  SyntheticTaskSpec spec;
  spec.width = a.dim;
  spec.sigma = a.sigma;
  spec.n_train = a.train_samples;
  spec.n_test = a.test_samples;
  RngState data_rng(a.seed ^ 0x5d7a9f4b2c6e31ULL);
  const SignProductData data = gen_signproduct(spec, data_rng);

  TrainConfig cfg;
  cfg.epochs = a.epochs;
  cfg.batch_size = a.batch_size;
  cfg.lr = a.lr;
  cfg.jacobian_reg_weight = a.gamma;
  cfg.seed = a.seed;
  cfg.variant = variant_from_name(a.variant);
  return train(data.train, data.test, cfg);
}

int cmd_train(const TrainArgs& a) {
  TrainResult r = run_training(a);
  write_text_file(a.out, history_csv(r.history));
  Checkpoint ckpt;
  ckpt.seed = a.seed;
  ckpt.params = std::move(r.params);
  ckpt.head = std::move(r.head);
  ckpt.has_head = true;
  save_checkpoint(a.ckpt_out, ckpt);
  const EpochStats& last = r.history.back();
  std::cout << "variant " << a.variant << ": final test acc " << fixed(last.test_accuracy)
            << ", macro F1 " << fixed(last.macro_f1) << ", weighted F1 "
            << fixed(last.weighted_f1) << "\n";
  std::cout << "metrics: " << a.out << "\ncheckpoint: " << a.ckpt_out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// ablate
// ---------------------------------------------------------------------------

struct AblateArgs {
  std::size_t seeds = 5;
  TrainArgs train;
  std::string out = "ablation.csv";
};

struct AblateRow {
  std::string variant;
  bool failed = false;
  double acc_mean = 0, acc_std = 0;
  double macro_mean = 0, macro_std = 0;
  double weighted_mean = 0, weighted_std = 0;
};

std::size_t thread_cap() {
  const char* env = std::getenv("DEQFUSE_THREADS");
  if (env != nullptr) {
    const long v = std::strtol(env, nullptr, 10);
    if (v >= 1) return static_cast<std::size_t>(v);
  }
  const unsigned hw = std::thread::hardware_concurrency();
  return hw == 0 ? 1 : hw;
}

int cmd_ablate(const AblateArgs& a) {
  struct Job {
    AblationVariant variant;
    std::uint64_t seed;
  };
  std::vector<Job> jobs;
  for (AblationVariant v : all_variants()) {
    for (std::uint64_t s = 0; s < a.seeds; ++s) jobs.push_back({v, s});
  }
  std::vector<EpochStats> finals(jobs.size());
  std::vector<bool> ok(jobs.size(), false);
  const std::size_t cap = thread_cap();
  for (std::size_t wave = 0; wave < jobs.size(); wave += cap) {
    std::vector<std::future<void>> futures;
    const std::size_t stop = std::min(wave + cap, jobs.size());
    for (std::size_t j = wave; j < stop; ++j) {
      futures.push_back(std::async(std::launch::async, [&, j]() {
        TrainArgs t = a.train;
        t.variant = variant_name(jobs[j].variant);
        t.seed = jobs[j].seed;
        try {
          const TrainResult r = run_training(t);
          finals[j] = r.history.back();
          ok[j] = true;
        } catch (const std::exception& e) {
          std::cerr << "ablate: " << t.variant << " seed " << t.seed
                    << " failed: " << e.what() << "\n";
        }
      }));
    }
    for (auto& f : futures) f.get();
  }

  // assemble rows in the fixed variant order, Full last
  std::vector<AblateRow> rows;
  std::size_t j = 0;
  for (AblationVariant v : all_variants()) {
    AblateRow row;
    row.variant = variant_name(v);
    std::vector<double> acc, macro, weighted;
    for (std::uint64_t s = 0; s < a.seeds; ++s, ++j) {
      if (!ok[j]) continue;
      acc.push_back(finals[j].test_accuracy);
      macro.push_back(finals[j].macro_f1);
      weighted.push_back(finals[j].weighted_f1);
    }
    if (acc.empty()) {
      row.failed = true;
    } else {
      auto stats = [](const std::vector<double>& v, double* mean, double* sd) {
        double m = 0;
        for (double x : v) m += x;
        m /= static_cast<double>(v.size());
        double s2 = 0;
        for (double x : v) s2 += (x - m) * (x - m);
        *mean = m;
        *sd = std::sqrt(s2 / static_cast<double>(v.size()));
      };
      stats(acc, &row.acc_mean, &row.acc_std);
      stats(macro, &row.macro_mean, &row.macro_std);
      stats(weighted, &row.weighted_mean, &row.weighted_std);
    }
    rows.push_back(row);
  }

  std::ostringstream csv;
  csv << "variant,acc_mean,acc_std,macro_f1_mean,macro_f1_std,weighted_f1_mean,weighted_f1_std\n";
  const auto table_row = [](const std::string& v, const std::string& a_,
                            const std::string& b_, const std::string& c_) {
    char buf[128];
    std::snprintf(buf, sizeof(buf), "%-14s %-17s %-17s %-17s\n", v.c_str(), a_.c_str(),
                  b_.c_str(), c_.c_str());
    std::cout << buf;
  };
  table_row("variant", "acc(%)", "macro_f1(%)", "weighted_f1(%)");
  for (const AblateRow& r : rows) {
    if (r.failed) {
      table_row(r.variant, "FAILED", "", "");
      csv << r.variant << ",,,,,,\n";
      continue;
    }
    auto cell = [](double mean, double sd) {
      return fixed(100.0 * mean, 2) + " +- " + fixed(100.0 * sd, 2);
    };
    table_row(r.variant, cell(r.acc_mean, r.acc_std), cell(r.macro_mean, r.macro_std),
              cell(r.weighted_mean, r.weighted_std));
    csv << r.variant << "," << fixed(100.0 * r.acc_mean, 2) << ","
        << fixed(100.0 * r.acc_std, 2) << "," << fixed(100.0 * r.macro_mean, 2) << ","
        << fixed(100.0 * r.macro_std, 2) << "," << fixed(100.0 * r.weighted_mean, 2) << ","
        << fixed(100.0 * r.weighted_std, 2) << "\n";
  }
  write_text_file(a.out, csv.str());
  std::cout << "wrote " << a.out << "\n";
  return kExitOk;
}

// ---------------------------------------------------------------------------
// solvebench
// ---------------------------------------------------------------------------

struct SolvebenchArgs {
  std::size_t dim = 64, n_modalities = 3, batch = 8, seeds = 10;
  double target_resid = 1e-3;
  std::string out;
};

constexpr std::size_t kBenchCap = 1000;

std::size_t steps_to_target(const ModalityBundle& x, const FusionParams& params,
                            SolverConfig cfg, double target) {
  cfg.tol = target;
  cfg.max_steps = kBenchCap;
  cfg.early_stop = true;
  const EquilibriumState eq = solve_equilibrium(x, params, cfg);
  for (std::size_t i = 0; i < eq.trace.rel_diffs.size(); ++i) {
    if (eq.trace.rel_diffs[i] < target) return i + 1;
  }
  return kBenchCap + 1;  // censored
}

int cmd_solvebench(const SolvebenchArgs& a) {
  std::ostringstream csv;
  csv << "seed,naive_steps,anderson_steps,anderson_m1_steps\n";
  const auto bench_row = [](const std::string& s, const std::string& n,
                            const std::string& a_, const std::string& m1) {
    char buf[96];
    std::snprintf(buf, sizeof(buf), "%-6s %-12s %-16s %-18s\n", s.c_str(), n.c_str(),
                  a_.c_str(), m1.c_str());
    std::cout << buf;
  };
  bench_row("seed", "naive", "anderson(m=5)", "anderson(m=1,b=1)");
  auto cell = [](std::size_t steps) {
    return steps > kBenchCap ? std::string(">1000") : std::to_string(steps);
  };
  SolverTrace weight_tied;
  for (std::uint64_t seed = 0; seed < a.seeds; ++seed) {
    RngState rng(seed);
    const FusionParams params = init_fusion_params(rng, a.dim, a.n_modalities);
    const ModalityBundle x = random_bundle(rng, a.n_modalities, a.batch, a.dim);

    SolverConfig naive_cfg;
    naive_cfg.method = SolverMethod::kNaive;
    const std::size_t naive_steps = steps_to_target(x, params, naive_cfg, a.target_resid);

    SolverConfig anderson_cfg;
    anderson_cfg.method = SolverMethod::kAnderson;
    const std::size_t anderson_steps =
        steps_to_target(x, params, anderson_cfg, a.target_resid);

    SolverConfig degenerate_cfg = anderson_cfg;
    degenerate_cfg.anderson_memory = 1;
    degenerate_cfg.beta = 1.0;
    const std::size_t m1_steps = steps_to_target(x, params, degenerate_cfg, a.target_resid);

    bench_row(std::to_string(seed), cell(naive_steps), cell(anderson_steps),
              cell(m1_steps));
    csv << seed << "," << cell(naive_steps) << "," << cell(anderson_steps) << ","
        << cell(m1_steps) << "\n";

    if (seed == 0) {
      // the weight-tied comparison simply iterates the fusion layer
      SolverConfig wt = naive_cfg;
      wt.max_steps = 100;
      wt.early_stop = false;
      wt.tol = 1e-30;
      weight_tied = solve_equilibrium(x, params, wt).trace;
    }
  }
  std::cout << "weight-tied iteration trace (seed 0):\n";
  print_checkpoint_values(weight_tied);
  if (!a.out.empty()) {
    write_text_file(a.out, csv.str());
    std::cout << "wrote " << a.out << "\n";
  }
  return kExitOk;
}

}  // namespace

int run(int argc, const char* const* argv) {
  CLI::App app{"deep-equilibrium multimodal fusion engine"};
  app.require_subcommand(1);

  std::string config_path;

  ConvergeArgs conv;
  CLI::App* converge = app.add_subcommand("converge", "solver convergence trace");
  converge->add_option("--config", config_path, "JSON config file");
  converge->add_option("--n-modalities", conv.n_modalities);
  converge->add_option("--dim", conv.dim);
  converge->add_option("--batch", conv.batch);
  converge->add_option("--solver", conv.solver, "naive|anderson");
  converge->add_option("--steps", conv.steps);
  converge->add_option("--seed", conv.seed);
  converge->add_option("--out", conv.out);
  converge->add_option("--checkpoint", conv.checkpoint, "load parameters instead of random init");
  converge->add_option("--anderson-memory", conv.memory);
  converge->add_option("--beta", conv.beta);
  converge->add_option("--ridge-lambda", conv.lambda);
  converge->add_option("--gate", conv.gate, "affine|sigmoid|disabled");

  GradcheckArgs gc;
  CLI::App* gradcheck = app.add_subcommand("gradcheck", "implicit gradients vs oracles");
  gradcheck->add_option("--config", config_path, "JSON config file");
  gradcheck->add_option("--dim", gc.dim);
  gradcheck->add_option("--n-modalities", gc.n_modalities);
  gradcheck->add_option("--batch", gc.batch);
  gradcheck->add_option("--seeds", gc.seeds);
  gradcheck->add_option("--tol", gc.tol);

  TrainArgs tr;
  CLI::App* train_cmd = app.add_subcommand("train", "train on the sign-product task");
  train_cmd->add_option("--config", config_path, "JSON config file");
  train_cmd->add_option("--variant", tr.variant,
                        "full|weighted_sum|no_deq|no_fuse|no_theta|no_gate");
  train_cmd->add_option("--epochs", tr.epochs);
  train_cmd->add_option("--batch-size", tr.batch_size);
  train_cmd->add_option("--dim", tr.dim);
  train_cmd->add_option("--lr", tr.lr);
  train_cmd->add_option("--gamma", tr.gamma, "Jacobian penalty weight");
  train_cmd->add_option("--sigma", tr.sigma);
  train_cmd->add_option("--train-samples", tr.train_samples);
  train_cmd->add_option("--test-samples", tr.test_samples);
  train_cmd->add_option("--seed", tr.seed);
  train_cmd->add_option("--out", tr.out);
  train_cmd->add_option("--ckpt-out", tr.ckpt_out);

  AblateArgs ab;
  CLI::App* ablate = app.add_subcommand("ablate", "train every ablation variant");
  ablate->add_option("--config", config_path, "JSON config file");
  ablate->add_option("--seeds", ab.seeds);
  ablate->add_option("--epochs", ab.train.epochs);
  ablate->add_option("--batch-size", ab.train.batch_size);
  ablate->add_option("--dim", ab.train.dim);
  ablate->add_option("--lr", ab.train.lr);
  ablate->add_option("--gamma", ab.train.gamma);
  ablate->add_option("--sigma", ab.train.sigma);
  ablate->add_option("--train-samples", ab.train.train_samples);
  ablate->add_option("--test-samples", ab.train.test_samples);
  ablate->add_option("--out", ab.out);

  SolvebenchArgs sb;
  CLI::App* solvebench = app.add_subcommand("solvebench", "naive vs Anderson steps-to-target");
  solvebench->add_option("--config", config_path, "JSON config file");
  solvebench->add_option("--dim", sb.dim);
  solvebench->add_option("--n-modalities", sb.n_modalities);
  solvebench->add_option("--batch", sb.batch);
  solvebench->add_option("--seeds", sb.seeds);
  solvebench->add_option("--target-resid", sb.target_resid);
  solvebench->add_option("--out", sb.out);

  try {
    app.parse(argc, argv);
    CLI::App* sub = app.get_subcommands().front();
    if (!config_path.empty()) apply_config_file(*sub, config_path);
    if (sub == converge) return cmd_converge(conv);
    if (sub == gradcheck) return cmd_gradcheck(gc);
    if (sub == train_cmd) return cmd_train(tr);
    if (sub == ablate) return cmd_ablate(ab);
    if (sub == solvebench) return cmd_solvebench(sb);
    return kExitValidation;
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? kExitOk : kExitValidation;
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const ShapeError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitValidation;
  } catch (const IoError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitIo;
  } catch (const DivergenceError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const NumericError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return kExitNumeric;
  }
}

}  // namespace deqfuse::cli
