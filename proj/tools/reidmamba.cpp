// Command-line front end: train, eval, gradcheck, bench, inspect-checkpoint.

#include "reidmamba/harness/bench.hpp"
#include "reidmamba/harness/checkpoint.hpp"
#include "reidmamba/harness/config.hpp"
#include "reidmamba/harness/dataset.hpp"
#include "reidmamba/harness/gradcheck.hpp"
#include "reidmamba/harness/trainer.hpp"

#include <CLI11.hpp>

#include <chrono>
#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iomanip>
#include <iostream>
#include <map>

namespace fs = std::filesystem;
using namespace reidmamba;

namespace {

constexpr const char* kOutDirEnv = "REIDMAMBA_OUT_DIR";

struct Overrides {
  std::string config_file;
  std::map<std::string, std::string> values;
};

// One --<key> option per TrainConfig setting.
void add_setting_flags(CLI::App* cmd, Overrides& o) {
  cmd->add_option("--config", o.config_file, "key = value config file (flags override it)");
  for (const std::string& key : setting_keys()) {
    cmd->add_option_function<std::string>(
        "--" + key, [&o, key](const std::string& v) { o.values[key] = v; }, "override " + key);
  }
}

TrainConfig resolve_config(const Overrides& o) {
  TrainConfig cfg = desk_scale_config();
  if (!o.config_file.empty()) load_config_file(cfg, o.config_file);
  for (const auto& [key, value] : o.values) apply_setting(cfg, key, value);
  return cfg;
}

fs::path output_dir(const std::string& flag) {
  std::string dir = flag;
  if (dir.empty()) {
    const char* env = std::getenv(kOutDirEnv);
    dir = env != nullptr ? env : ".";
  }
  fs::create_directories(dir);
  return dir;
}

void print_eval(const Evaluation& ev) {
  const RetrievalMetrics& r = ev.retrieval;
  std::cout << std::fixed << std::setprecision(4) << "mAP " << r.map << "  R@1 " << r.cmc_at(1) << "  R@5 "
            << r.cmc_at(5) << "  R@10 " << r.cmc_at(10) << "  (" << r.evaluated << " queries, " << r.excluded
            << " without a valid match)\n";
  if (ev.diversity) {
    std::cout << "branch KTau intra " << ev.diversity->intra << "  inter " << ev.diversity->inter << "\n";
  }
}

int run_train(const Overrides& o, const std::string& out_flag, const std::string& blob_type) {
  TrainConfig cfg = resolve_config(o);
  cfg.model.num_classes = cfg.data.train_identities;
  cfg.validate();
  const fs::path dir = output_dir(out_flag);
  const Dataset data = generate_synthetic_dataset(cfg.data, cfg.seed);
  std::ofstream csv(dir / "metrics.csv");
  write_metrics_header(csv);
  const auto start = std::chrono::steady_clock::now();
  const int total = cfg.total_steps();
  TrainRun run = train_model(cfg, data, [&](const StepLog& s) {
    write_metrics_row(csv, s);
    csv.flush();
    if (s.step % 25 == 0 || s.step + 1 == total) {
      std::cout << "step " << s.step << "/" << total << "  lr " << std::scientific << std::setprecision(3) << s.lr
                << "  loss " << std::fixed << std::setprecision(4) << s.loss.total << "\n";
    }
  });
  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - start).count();
  print_eval(run.final_eval);
  cfg.model = run.model.cfg;
  const fs::path ckpt = dir / "checkpoint.rmc";
  save_checkpoint(run.model, cfg, ckpt.string(), blob_type == "f64" ? BlobType::f64 : BlobType::f32);
  std::cout << "trained " << total << " steps in " << std::setprecision(1) << secs << " s; wrote "
            << (dir / "metrics.csv").string() << " and " << ckpt.string() << "\n";
  return 0;
}

int run_eval(const std::string& path, const std::string& out_flag) {
  auto [cfg, model] = load_checkpoint(path);
  const Dataset data = generate_synthetic_dataset(cfg.data, cfg.seed);
  const Evaluation ev = evaluate_model(model, data);
  print_eval(ev);
  const fs::path dir = output_dir(out_flag);
  std::ofstream csv(dir / "eval.csv");
  csv << "mAP,r1,r5,r10,ktau_intra,ktau_inter,evaluated,excluded\n";
  csv << std::setprecision(10) << ev.retrieval.map << ',' << ev.retrieval.cmc_at(1) << ',' << ev.retrieval.cmc_at(5)
      << ',' << ev.retrieval.cmc_at(10) << ',';
  if (ev.diversity) {
    csv << ev.diversity->intra << ',' << ev.diversity->inter;
  } else {
    csv << ',';
  }
  csv << ',' << ev.retrieval.evaluated << ',' << ev.retrieval.excluded << '\n';
  return 0;
}

int run_gradchecks(const std::vector<std::string>& selectors, double tolerance) {
  bool ok = true;
  for (const std::string& sel : selectors) {
    const GradcheckReport rep = run_gradcheck(sel, tolerance);
    std::cout << std::left << std::setw(8) << sel << " max rel err " << std::scientific << std::setprecision(3)
              << rep.max_rel_error << "  (" << rep.groups.size() << " groups, tolerance " << tolerance << ") "
              << (rep.passed() ? "ok" : "FAIL") << "\n";
    ok = ok && rep.passed();
  }
  return ok ? 0 : 1;
}

int run_bench(const std::vector<int>& tokens, int repeats, int dim, const std::string& out_flag) {
  BenchOptions opts;
  opts.dim = dim;
  const std::vector<BenchRow> rows = bench_scaling(tokens, repeats, opts);
  write_bench_csv(std::cout, rows);
  std::ofstream csv(output_dir(out_flag) / "bench.csv");
  write_bench_csv(csv, rows);
  return 0;
}

int run_inspect(const std::string& path) {
  std::cout << describe_checkpoint(read_checkpoint(path));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Multi-branch selective-scan person re-identification on synthetic data"};
  app.require_subcommand(1);
  std::string out_flag;
  app.add_option("--out", out_flag, std::string("output directory (default: $") + kOutDirEnv + " or .)");

  Overrides train_overrides;
  std::string blob_type = "f32";
  CLI::App* train = app.add_subcommand("train", "train on a generated synthetic dataset");
  add_setting_flags(train, train_overrides);
  train->add_option("--checkpoint-type", blob_type, "checkpoint blob type")->check(CLI::IsMember({"f32", "f64"}));

  std::string ckpt_path;
  CLI::App* eval = app.add_subcommand("eval", "evaluate a checkpoint on its synthetic test split");
  eval->add_option("checkpoint", ckpt_path, "checkpoint archive")->required();

  std::vector<std::string> selectors = gradcheck_selectors();
  double tolerance = 1e-3;
  CLI::App* grad = app.add_subcommand("gradcheck", "finite-difference gradient checks");
  grad->add_option("--selector", selectors, "subset to check")->check(CLI::IsMember(gradcheck_selectors()));
  grad->add_option("--tolerance", tolerance, "maximum relative error");

  std::vector<int> tokens{256, 512, 1024, 2048};
  int repeats = 20;
  int dim = 64;
  CLI::App* bench = app.add_subcommand("bench", "forward-time scaling: scan block vs attention");
  bench->add_option("--tokens", tokens, "sequence lengths")->delimiter(',');
  bench->add_option("--repeats", repeats, "timed repeats per length (median reported)");
  bench->add_option("--dim", dim, "model width");

  std::string inspect_path;
  CLI::App* inspect = app.add_subcommand("inspect-checkpoint", "print a checkpoint manifest");
  inspect->add_option("checkpoint", inspect_path, "checkpoint archive")->required();

  CLI11_PARSE(app, argc, argv);
  try {
    if (*train) return run_train(train_overrides, out_flag, blob_type);
    if (*eval) return run_eval(ckpt_path, out_flag);
    if (*grad) return run_gradchecks(selectors, tolerance);
    if (*bench) return run_bench(tokens, repeats, dim, out_flag);
    if (*inspect) return run_inspect(inspect_path);
  } catch (const CheckpointError& e) {
    std::cerr << "checkpoint error (" << to_string(e.code()) << "): " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
