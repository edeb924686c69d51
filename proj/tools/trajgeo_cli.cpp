#include "trajgeo/error.hpp"
#include "trajgeo/pipeline.hpp"

#include <CLI11.hpp>

#include <iostream>

using namespace trajgeo;

namespace {

struct Globals {
  std::string config;
  std::string preset;
  std::optional<std::uint64_t> seed;
  std::optional<int> jobs;
  std::string out = ".";
};

/// Lens overrides shared by fit-teacher and run.
struct LensFlags {
  std::optional<int> k;
  std::optional<double> alpha, rho;
  std::string eig_method;
};

void add_lens_flags(CLI::App* cmd, LensFlags& f) {
  cmd->add_option("--k", f.k, "lens rank")->check(CLI::PositiveNumber);
  cmd->add_option("--alpha", f.alpha, "contrastive penalty on the correct covariance");
  cmd->add_option("--rho", f.rho, "weight of post-error steps in the error moments")->check(CLI::Range(0.0, 1.0));
  cmd->add_option("--eig-method", f.eig_method, "auto, dense or randomized")
      ->check(CLI::IsMember({"auto", "dense", "randomized"}));
}

CommandContext make_context(const Globals& g, const LensFlags& lf) {
  CommandContext ctx;
  if (!g.config.empty()) {
    ctx.config = load_run_config(g.config);
  } else if (!g.preset.empty()) {
    ctx.config = load_preset(g.preset);
  } else {
    ctx.config = default_run_config();
  }
  if (g.seed) ctx.config.apply_seed(*g.seed);
  if (g.jobs) ctx.config.jobs = *g.jobs;
  if (lf.k) ctx.config.lens.k = *lf.k;
  if (lf.alpha) ctx.config.lens.alpha = *lf.alpha;
  if (lf.rho) ctx.config.lens.rho = *lf.rho;
  if (lf.eig_method == "dense") ctx.config.lens.method = EigMethod::Dense;
  if (lf.eig_method == "randomized") ctx.config.lens.method = EigMethod::Randomized;
  if (lf.eig_method == "auto") ctx.config.lens.method = EigMethod::Auto;
  ctx.config.validate();
  ctx.out = g.out;
  ctx.log = &std::cerr;
  return ctx;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"trajgeo: step-level hallucination detection from hidden-state trajectories"};
  app.require_subcommand(1);
  Globals g;
  app.add_option("--config", g.config, "run config JSON (may name a base preset)")->check(CLI::ExistingFile);
  app.add_option("--preset", g.preset, "named preset from the preset directory");
  app.add_option("--seed", g.seed, "root seed");
  app.add_option("--jobs", g.jobs, "worker threads for per-trace work")->check(CLI::PositiveNumber);
  app.add_option("--out", g.out, "output directory");

  auto* gen = app.add_subcommand("gen", "generate synthetic traces");

  std::string traces, probs, features, student, lens, featurizer, teacher, dump, dataset = "synthetic";
  auto* fit = app.add_subcommand("fit-teacher", "fit the lens and train the teacher");
  fit->add_option("--traces", traces, "trace manifest or .jsonl")->required()->check(CLI::ExistingFile);
  LensFlags lens_flags;
  add_lens_flags(fit, lens_flags);

  auto* distill = app.add_subcommand("distill-student", "train the student against teacher probabilities");
  distill->add_option("--traces", traces)->required()->check(CLI::ExistingFile);
  distill->add_option("--teacher-probs", probs, "teacher_probs.csv");
  distill->add_option("--features", features, "teacher_features.csv for the auxiliary head")->check(CLI::ExistingFile);

  double theta = 0.5;
  auto* infer = app.add_subcommand("infer", "emit per-trace decisions from the student alone");
  infer->add_option("--student", student)->required()->check(CLI::ExistingFile);
  infer->add_option("--traces", traces)->required()->check(CLI::ExistingFile);
  infer->add_option("--theta", theta)->check(CLI::Range(0.0, 1.0));

  auto* eval = app.add_subcommand("eval", "score labeled test traces");
  eval->add_option("--traces", traces)->required()->check(CLI::ExistingFile);
  eval->add_option("--lens", lens)->check(CLI::ExistingFile);
  eval->add_option("--featurizer", featurizer)->check(CLI::ExistingFile);
  eval->add_option("--teacher", teacher)->check(CLI::ExistingFile);
  eval->add_option("--student", student)->check(CLI::ExistingFile);
  eval->add_option("--feature-dump", dump, "file name for a per-step feature CSV");
  eval->add_option("--dataset", dataset);

  std::string suite = "all";
  int n = 0;
  bool inject_fault = false;
  auto* verify = app.add_subcommand("verify", "run the verification suites");
  verify->add_option("--suite", suite)->check(
      CLI::IsMember({"all", "cpca", "cloud", "bound", "perturbation", "agreement", "gradient"}));
  verify->add_option("--n", n, "instance count override");
  verify->add_flag("--inject-fault", inject_fault, "flip the sign of M (harness sanity check)");

  auto* shift = app.add_subcommand("shift-exp", "in-domain vs shifted comparison of teacher and student");
  auto* run = app.add_subcommand("run", "gen, fit-teacher, distill-student and eval in one process");
  add_lens_flags(run, lens_flags);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e) == 0 ? 0 : 2;
  }

  auto opt = [](const std::string& s) -> std::optional<std::filesystem::path> {
    if (s.empty()) return std::nullopt;
    return std::filesystem::path(s);
  };

  try {
    const CommandContext ctx = make_context(g, lens_flags);
    if (gen->parsed()) return cmd_gen(ctx);
    if (fit->parsed()) return cmd_fit_teacher(ctx, traces);
    if (distill->parsed()) {
      if (probs.empty() && ctx.config.student_train.lambda < 1.0)
        fail(ErrorCode::ConfigError, "--teacher-probs is required unless lambda = 1");
      return cmd_distill_student(ctx, traces, probs, opt(features));
    }
    if (infer->parsed()) return cmd_infer(ctx, student, traces, theta);
    if (eval->parsed()) return cmd_eval(ctx, EvalInputs{traces, opt(lens), opt(featurizer), opt(teacher), opt(student), opt(dump), dataset});
    if (verify->parsed()) return cmd_verify(ctx, suite, n, inject_fault);
    if (shift->parsed()) return cmd_shift_exp(ctx);
    if (run->parsed()) return run_monolith(ctx);
  } catch (const Error& e) {
    std::cerr << "error: " << e.what() << '\n';
    return e.code() == ErrorCode::TheoremCheck ? 3 : 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << '\n';
    return 2;
  }
  return 2;
}
