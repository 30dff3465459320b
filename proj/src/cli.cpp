#include "mx/cli.hpp"

#include <cstdio>
#include <iostream>

#include <CLI11.hpp>

#include "mx/probe.hpp"

namespace mx {

namespace {

// --data values are either a .mxds path or a "synth:..." spec.
Dataset resolve_dataset(const std::string& arg, Dataset::Split split) {
  int k, n, size;
  unsigned seed;
  double difficulty;
  if (parse_synth_spec(arg, k, n, size, seed, difficulty))
    return generate_synthetic(k, n, size, seed, difficulty, split);
  return load_dataset(arg);
}

struct ModelArgs {
  std::string backbone = "toynet";
  std::string pattern = "none";
  int classes = 0;
  int input = 0;
  int se_ratio = 16;
  bool no_reduction_bn = false;

  void attach(CLI::App* cmd) {
    cmd->add_option("--backbone", backbone, "Backbone: resnet18, vgg16 or toynet")
        ->default_val(backbone);
    cmd->add_option("--pattern", pattern,
                    "Branch levels, e.g. 4+3+2 or n+2+3 ('n' = naive); 'none' for no branches")
        ->default_val(pattern);
    cmd->add_option("--classes", classes, "Class count (0 = backbone default)");
    cmd->add_option("--input", input, "Input spatial extent (0 = backbone default)");
    cmd->add_option("--se-ratio", se_ratio, "SE reduction ratio")->default_val(16);
    cmd->add_flag("--no-reduction-bn", no_reduction_bn, "Bare reduction conv (no BN+ReLU)");
  }

  ModelSpec spec() const {
    BackboneSpec bb = backbone_by_name(backbone, classes, input);
    BranchPattern p = parse_pattern(pattern);
    if (p.empty()) return baseline_spec(bb);
    return attach_branches(bb, p, se_ratio, !no_reduction_bn);
  }
};

std::string human_flops(long long v) {
  char buf[64];
  if (v >= 1000000000LL)
    std::snprintf(buf, sizeof buf, "%.3fB", static_cast<double>(v) / 1e9);
  else if (v >= 1000000LL)
    std::snprintf(buf, sizeof buf, "%.2fM", static_cast<double>(v) / 1e6);
  else
    std::snprintf(buf, sizeof buf, "%lld", v);
  return buf;
}

std::vector<double> parse_gammas(const std::string& text) {
  std::vector<double> out;
  std::stringstream ss(text);
  std::string tok;
  while (std::getline(ss, tok, ',')) {
    try {
      out.push_back(std::stod(tok));
    } catch (const std::exception&) {
      fail("cannot parse threshold '" + tok + "' in '" + text + "'");
    }
  }
  require(!out.empty(), "no thresholds in '" + text + "'");
  return out;
}

void load_model_checkpoint(MultiExitModel<float>& model, const std::string& path) {
  CheckpointMeta meta;
  auto table = load_checkpoint(path, &meta);
  auto state = model.state();
  assign_state(state, table);
}

int cmd_gen_data(const std::string& out, int classes, int per_class, int size, unsigned seed,
                 double difficulty, const std::string& split) {
  Dataset::Split sp = Dataset::Split::train;
  if (split == "val") sp = Dataset::Split::val;
  else if (split == "test") sp = Dataset::Split::test;
  else require(split == "train", "split must be train, val or test");
  Dataset ds = generate_synthetic(classes, per_class, size, seed, difficulty, sp);
  save_dataset(out, ds);
  std::printf("wrote %s: %d samples, %d classes, %dx%dx%d (%s split)\n", out.c_str(), ds.n,
              ds.num_classes, ds.channels, ds.height, ds.width, split.c_str());
  return 0;
}

int cmd_flops(const ModelArgs& margs, const std::string& csv, bool include_cheap) {
  ModelSpec spec = margs.spec();
  CostOptions opt{include_cheap};
  FlopsReport rep = flops_report(spec, opt);
  std::printf("backbone %s, pattern %s, input %dx%d, %d exits\n", spec.backbone.name.c_str(),
              pattern_str(spec.pattern).c_str(), spec.backbone.input_spatial, spec.backbone.input_spatial,
              rep.num_exits);
  std::printf("%-8s %16s %16s %16s\n", "exit", "classifier", "branch-only", "through-stage");
  for (int m = 0; m < rep.num_exits; ++m) {
    std::printf("%-8d %16s %16s %16s\n", m + 1, human_flops(rep.classifier_flops[m]).c_str(),
                m < rep.num_exits - 1 ? human_flops(rep.branch_only_flops[m]).c_str() : "-",
                human_flops(rep.backbone_through_stage[m]).c_str());
  }
  std::printf("backbone total: %s\nbranch total:   %s\ntotal:          %s\n",
              human_flops(rep.backbone_total).c_str(), human_flops(rep.branch_total).c_str(),
              human_flops(rep.total).c_str());
  if (!csv.empty()) {
    std::vector<std::vector<std::string>> rows;
    for (int m = 0; m < rep.num_exits; ++m)
      rows.push_back({std::to_string(m + 1), std::to_string(rep.classifier_flops[m]),
                      m < rep.num_exits - 1 ? std::to_string(rep.branch_only_flops[m]) : "",
                      std::to_string(rep.backbone_through_stage[m])});
    rows.push_back({"total", std::to_string(rep.total), std::to_string(rep.branch_total),
                    std::to_string(rep.backbone_total)});
    write_csv(csv, {"exit", "classifier_flops", "branch_only_flops", "backbone_through_stage"}, rows);
    std::printf("wrote %s\n", csv.c_str());
  }
  return 0;
}

int cmd_train(const ModelArgs& margs, const std::string& data, const std::string& val,
              const TrainConfig& cfg, const std::string& out, const std::string& metrics_path,
              unsigned model_seed) {
  Dataset train_ds = resolve_dataset(data, Dataset::Split::train);
  Dataset val_ds = resolve_dataset(val.empty() ? data : val, Dataset::Split::val);
  ModelArgs args = margs;
  if (args.classes == 0) args.classes = train_ds.num_classes;
  ModelSpec spec = args.spec();
  require(spec.backbone.num_classes == train_ds.num_classes,
          "model classes do not match dataset classes");
  MultiExitModel<float> model(spec, model_seed);

  std::unique_ptr<MultiExitModel<float>> dk;
  if (cfg.teacher == TeacherKind::dk) {
    require(!cfg.dk_checkpoint.empty(), "dk teacher requires --dk-checkpoint");
    dk = std::make_unique<MultiExitModel<float>>(baseline_spec(spec.backbone), model_seed);
    load_model_checkpoint(*dk, cfg.dk_checkpoint);
  }

  auto metrics = train(model, train_ds, val_ds, cfg, dk.get());
  for (const auto& row : metrics) {
    std::printf("epoch %3d [%s] lr %.5f loss %.4f eval", row.epoch, row.phase.c_str(), row.lr, row.loss);
    for (double a : row.eval_accuracy) std::printf(" %.3f", a);
    if (row.teacher_accuracy) std::printf(" teacher %.3f", *row.teacher_accuracy);
    std::printf("\n");
  }
  if (!metrics_path.empty()) {
    write_csv(metrics_path, metrics_csv_header(model.num_exits()), metrics_csv_rows(metrics));
    std::printf("wrote %s\n", metrics_path.c_str());
  }
  if (!out.empty()) {
    save_checkpoint(out, model.state(), CheckpointMeta{static_cast<std::uint32_t>(metrics.size()), cfg.digest()});
    std::printf("wrote %s\n", out.c_str());
  }
  return 0;
}

int cmd_eval(const ModelArgs& margs, const std::string& model_path, const std::string& data, int batch) {
  Dataset ds = resolve_dataset(data, Dataset::Split::test);
  ModelArgs args = margs;
  if (args.classes == 0) args.classes = ds.num_classes;
  MultiExitModel<float> model(args.spec(), 0);
  load_model_checkpoint(model, model_path);
  EvalResult r = evaluate(model, ds, batch);
  for (std::size_t m = 0; m < r.exit_accuracy.size(); ++m)
    std::printf("exit %zu accuracy: %.4f\n", m + 1, r.exit_accuracy[m]);
  return 0;
}

int cmd_export_trace(const ModelArgs& margs, const std::string& model_path, const std::string& data,
                     const std::string& out) {
  Dataset ds = resolve_dataset(data, Dataset::Split::test);
  ModelArgs args = margs;
  if (args.classes == 0) args.classes = ds.num_classes;
  MultiExitModel<float> model(args.spec(), 0);
  load_model_checkpoint(model, model_path);
  LogitTrace trace = export_trace(model, ds);
  save_trace(out, trace);
  std::printf("wrote %s: %d samples x %d exits x %d classes (model fingerprint %016llx)\n", out.c_str(),
              trace.n, trace.m, trace.k, static_cast<unsigned long long>(trace.fingerprint));
  return 0;
}

void print_sim(const SimResult& r) {
  std::printf("adaptive accuracy: %.4f\n", r.accuracy);
  std::printf("exit rates:       ");
  for (double v : r.exit_rates) std::printf(" %.4f", v);
  std::printf("\naverage FLOPs:     %s (%.6g)\n", human_flops(static_cast<long long>(r.af)).c_str(), r.af);
}

int cmd_simulate(const ModelArgs& margs, const std::string& trace_path, const std::string& gammas,
                 const std::string& csv) {
  LogitTrace trace = load_trace(trace_path);
  ModelArgs args = margs;
  if (args.classes == 0) args.classes = trace.k;
  FlopsReport rep = flops_report(args.spec());
  ExitPolicy policy{parse_gammas(gammas)};
  SimResult r = simulate(trace, policy, rep);
  print_sim(r);
  if (!csv.empty()) {
    std::vector<std::string> header{"accuracy", "af"};
    std::vector<std::string> row{std::to_string(r.accuracy), std::to_string(r.af)};
    for (std::size_t m = 0; m < r.exit_rates.size(); ++m) {
      header.push_back("exit_rate" + std::to_string(m + 1));
      row.push_back(std::to_string(r.exit_rates[m]));
    }
    write_csv(csv, header, {row});
    std::printf("wrote %s\n", csv.c_str());
  }
  return 0;
}

int cmd_calibrate(const ModelArgs& margs, const std::string& trace_path, const std::string& objective,
                  double target, double step) {
  LogitTrace trace = load_trace(trace_path);
  ModelArgs args = margs;
  if (args.classes == 0) args.classes = trace.k;
  FlopsReport rep = flops_report(args.spec());
  CalibrationObjective obj;
  if (objective == "min-flops") {
    obj.kind = ObjectiveKind::min_flops_at_accuracy;
  } else if (objective == "max-accuracy") {
    obj.kind = ObjectiveKind::max_accuracy_at_flops;
  } else {
    fail("objective must be min-flops (at --target accuracy) or max-accuracy (at --target FLOPs)");
  }
  obj.target = target;
  CalibrationResult r = calibrate(trace, rep, obj, step);
  std::printf("gammas:");
  for (double g : r.policy.gammas) std::printf(" %.4g", g);
  std::printf("\n");
  print_sim(r.achieved);
  return 0;
}

int cmd_histogram(const std::string& trace_path, int exit_index, int bins, const std::string& out) {
  LogitTrace trace = load_trace(trace_path);
  ConfidenceHistogram h = confidence_histogram(trace, exit_index, bins);
  std::vector<std::vector<std::string>> rows;
  for (std::size_t b = 0; b < h.bin_lo.size(); ++b)
    rows.push_back({std::to_string(h.bin_lo[b]), std::to_string(h.bin_hi[b]),
                    std::to_string(h.correct[b]), std::to_string(h.incorrect[b])});
  write_csv(out, {"bin_lo", "bin_hi", "correct", "incorrect"}, rows);
  std::printf("wrote %s (exit %d, %d bins)\n", out.c_str(), exit_index, bins);
  return 0;
}

int cmd_probe(const ModelArgs& margs, const std::string& baseline_path, const std::string& branched_path,
              const std::string& fit_data, const std::string& eval_data, const std::string& stages_arg,
              const std::string& fuzz_arg, int repeats, const ProbeFitConfig& fit_cfg,
              const std::string& out) {
  Dataset fit_ds = resolve_dataset(fit_data, Dataset::Split::train);
  Dataset eval_ds = resolve_dataset(eval_data.empty() ? fit_data : eval_data, Dataset::Split::test);
  ModelArgs args = margs;
  if (args.classes == 0) args.classes = fit_ds.num_classes;
  ModelSpec branched_spec = args.spec();
  MultiExitModel<float> branched(branched_spec, 0);
  load_model_checkpoint(branched, branched_path);
  MultiExitModel<float> baseline(baseline_spec(branched_spec.backbone), 0);
  load_model_checkpoint(baseline, baseline_path);

  const double base_acc = evaluate(baseline, eval_ds).exit_accuracy.back();
  std::printf("baseline accuracy: %.4f\n", base_acc);

  auto parse_ints = [](const std::string& text) {
    std::vector<int> out_v;
    std::stringstream ss(text);
    std::string tok;
    while (std::getline(ss, tok, ',')) out_v.push_back(std::stoi(tok));
    require(!out_v.empty(), "empty list");
    return out_v;
  };
  std::vector<std::vector<std::string>> rows;
  for (int stage : parse_ints(stages_arg)) {
    for (int fuzz : parse_ints(fuzz_arg)) {
      ProbeResult r = substitute_eval(baseline, branched, stage, fuzz, fit_ds, eval_ds, repeats, fit_cfg);
      std::printf("stage %d N=%d: accuracy %.4f +/- %.4f (mse %.5g)\n", stage, fuzz, r.accuracy_mean,
                  r.accuracy_std, r.mse_mean);
      for (std::size_t rep = 0; rep < r.accuracies.size(); ++rep)
        rows.push_back({std::to_string(stage), std::to_string(fuzz), std::to_string(rep),
                        std::to_string(r.mses[rep]), std::to_string(r.accuracies[rep])});
    }
  }
  if (!out.empty()) {
    write_csv(out, {"stage", "N", "repeat", "mse", "accuracy"}, rows);
    std::printf("wrote %s\n", out.c_str());
  }
  return 0;
}

}  // namespace

int run_cli(int argc, const char* const* argv) {
  CLI::App app{"Multi-exit convolutional network engine"};
  app.require_subcommand(1);

  // gen-data
  auto* gen = app.add_subcommand("gen-data", "Generate a synthetic dataset file");
  std::string gen_out = "data.mxds", gen_split = "train";
  int gen_classes = 10, gen_per_class = 200, gen_size = 32;
  unsigned gen_seed = 1;
  double gen_difficulty = 0.5;
  gen->add_option("--out", gen_out)->required();
  gen->add_option("--classes", gen_classes)->default_val(10);
  gen->add_option("--per-class", gen_per_class)->default_val(200);
  gen->add_option("--size", gen_size)->default_val(32);
  gen->add_option("--seed", gen_seed)->default_val(1);
  gen->add_option("--difficulty", gen_difficulty)->default_val(0.5);
  gen->add_option("--split", gen_split)->default_val("train");

  // train
  auto* tr = app.add_subcommand("train", "Train a multi-exit model");
  ModelArgs tr_margs;
  tr_margs.attach(tr);
  std::string tr_data, tr_val, tr_out, tr_metrics, tr_config;
  std::string tr_strategy = "coop", tr_teacher = "none", tr_kl = "teacher_ref", tr_dk;
  TrainConfig cfg;
  unsigned tr_model_seed = 0;
  bool tr_no_flip = false;
  tr->add_option("--data", tr_data, "Training set (.mxds path or synth:... spec)")->required();
  tr->add_option("--val", tr_val, "Held-out set for per-epoch evaluation");
  tr->add_option("--config", tr_config, "Config file (flat key=value; flags override)");
  auto* o_epochs = tr->add_option("--epochs", cfg.epochs);
  auto* o_batch = tr->add_option("--batch", cfg.batch_size);
  auto* o_lr = tr->add_option("--lr", cfg.lr_initial);
  auto* o_mom = tr->add_option("--momentum", cfg.momentum);
  auto* o_wd = tr->add_option("--weight-decay", cfg.weight_decay);
  auto* o_lambda = tr->add_option("--lambda", cfg.lambda);
  auto* o_tau = tr->add_option("--tau", cfg.tau);
  auto* o_strategy = tr->add_option("--strategy", tr_strategy, "coop | branches_only | stage_wise");
  auto* o_teacher = tr->add_option("--teacher", tr_teacher, "none | dk | ofa | med | wed");
  auto* o_dk = tr->add_option("--dk-checkpoint", tr_dk);
  auto* o_kl = tr->add_option("--kl-direction", tr_kl, "teacher_ref | student_ref");
  auto* o_noflip = tr->add_flag("--no-flip", tr_no_flip, "Disable horizontal-flip augmentation");
  auto* o_seed = tr->add_option("--seed", cfg.seed);
  tr->add_option("--model-seed", tr_model_seed, "Parameter init seed (defaults to --seed)");
  tr->add_option("--out", tr_out, "Checkpoint output path");
  tr->add_option("--metrics", tr_metrics, "Per-epoch CSV output path");

  // eval
  auto* ev = app.add_subcommand("eval", "Per-exit accuracy of a checkpoint");
  ModelArgs ev_margs;
  ev_margs.attach(ev);
  std::string ev_model, ev_data;
  int ev_batch = 64;
  ev->add_option("--model", ev_model)->required();
  ev->add_option("--data", ev_data)->required();
  ev->add_option("--batch", ev_batch)->default_val(64);

  // flops
  auto* fl = app.add_subcommand("flops", "Static FLOPs report");
  ModelArgs fl_margs;
  fl_margs.attach(fl);
  std::string fl_csv;
  bool fl_cheap = false;
  fl->add_option("--csv", fl_csv, "Also write the report as CSV");
  fl->add_flag("--include-cheap-ops", fl_cheap, "Count BN/activation/pooling ops");

  // export-trace
  auto* ex = app.add_subcommand("export-trace", "Cache per-sample, per-exit logits");
  ModelArgs ex_margs;
  ex_margs.attach(ex);
  std::string ex_model, ex_data, ex_out;
  ex->add_option("--model", ex_model)->required();
  ex->add_option("--data", ex_data)->required();
  ex->add_option("--out", ex_out)->required();

  // simulate
  auto* si = app.add_subcommand("simulate", "Replay a threshold policy on a trace");
  ModelArgs si_margs;
  si_margs.attach(si);
  std::string si_trace, si_gammas, si_csv;
  si->add_option("--trace", si_trace)->required();
  si->add_option("--gammas", si_gammas, "Comma-separated thresholds, one per intermediate exit")->required();
  si->add_option("--csv", si_csv);

  // calibrate
  auto* ca = app.add_subcommand("calibrate", "Grid-search exit thresholds");
  ModelArgs ca_margs;
  ca_margs.attach(ca);
  std::string ca_trace, ca_objective = "min-flops";
  double ca_target = 0.0, ca_step = 0.05;
  ca->add_option("--trace", ca_trace)->required();
  ca->add_option("--objective", ca_objective, "min-flops | max-accuracy")->default_val("min-flops");
  ca->add_option("--target", ca_target, "Accuracy floor or FLOPs ceiling")->required();
  ca->add_option("--step", ca_step)->default_val(0.05);

  // histogram
  auto* hi = app.add_subcommand("histogram", "Max-softmax histogram split by correctness");
  std::string hi_trace, hi_out = "histogram.csv";
  int hi_exit = 1, hi_bins = 20;
  hi->add_option("--trace", hi_trace)->required();
  hi->add_option("--exit", hi_exit)->default_val(1);
  hi->add_option("--bins", hi_bins)->default_val(20);
  hi->add_option("--out", hi_out)->default_val("histogram.csv");

  // probe-consistency
  auto* pr = app.add_subcommand("probe-consistency", "Feature-substitution probe");
  ModelArgs pr_margs;
  pr_margs.attach(pr);
  std::string pr_baseline, pr_branched, pr_data, pr_eval, pr_stages = "1", pr_fuzz = "0", pr_out;
  int pr_repeats = 3;
  ProbeFitConfig pr_fit;
  pr->add_option("--baseline", pr_baseline, "Branchless baseline checkpoint")->required();
  pr->add_option("--branched", pr_branched, "Branched model checkpoint")->required();
  pr->add_option("--data", pr_data, "Reconstructor fitting set")->required();
  pr->add_option("--eval-data", pr_eval, "Evaluation set (defaults to --data)");
  pr->add_option("--stages", pr_stages, "Comma-separated stage indices")->default_val("1");
  pr->add_option("--fuzziness", pr_fuzz, "Comma-separated N values")->default_val("0");
  pr->add_option("--repeats", pr_repeats)->default_val(3);
  pr->add_option("--fit-epochs", pr_fit.epochs)->default_val(10);
  pr->add_option("--fit-lr", pr_fit.lr)->default_val(0.01);
  pr->add_option("--out", pr_out, "ProbeResult CSV path");

  // describe
  auto* de = app.add_subcommand("describe", "Layer table of an architecture");
  ModelArgs de_margs;
  de_margs.attach(de);

  try {
    app.parse(argc, argv);
  } catch (const CLI::ParseError& e) {
    return app.exit(e);
  }

  try {
    if (gen->parsed())
      return cmd_gen_data(gen_out, gen_classes, gen_per_class, gen_size, gen_seed, gen_difficulty, gen_split);
    if (tr->parsed()) {
      if (!tr_config.empty()) {
        TrainConfig file_cfg = load_config_file(tr_config);
        // flags override file values
        if (!*o_epochs) cfg.epochs = file_cfg.epochs;
        if (!*o_batch) cfg.batch_size = file_cfg.batch_size;
        if (!*o_lr) cfg.lr_initial = file_cfg.lr_initial;
        if (!*o_mom) cfg.momentum = file_cfg.momentum;
        if (!*o_wd) cfg.weight_decay = file_cfg.weight_decay;
        if (!*o_lambda) cfg.lambda = file_cfg.lambda;
        if (!*o_tau) cfg.tau = file_cfg.tau;
        if (!*o_strategy) cfg.strategy = file_cfg.strategy;
        if (!*o_teacher) cfg.teacher = file_cfg.teacher;
        if (!*o_dk) cfg.dk_checkpoint = file_cfg.dk_checkpoint;
        if (!*o_kl) cfg.kl_teacher_ref = file_cfg.kl_teacher_ref;
        if (!*o_noflip) cfg.augment_flip = file_cfg.augment_flip;
        if (!*o_seed) cfg.seed = file_cfg.seed;
      }
      if (*o_strategy) cfg.strategy = strategy_from_string(tr_strategy);
      if (*o_teacher) cfg.teacher = teacher_from_string(tr_teacher);
      if (*o_dk) cfg.dk_checkpoint = tr_dk;
      if (*o_kl) {
        require(tr_kl == "teacher_ref" || tr_kl == "student_ref",
                "--kl-direction must be teacher_ref or student_ref");
        cfg.kl_teacher_ref = tr_kl == "teacher_ref";
      }
      if (*o_noflip) cfg.augment_flip = !tr_no_flip;
      const unsigned model_seed = tr->count("--model-seed") ? tr_model_seed : cfg.seed;
      return cmd_train(tr_margs, tr_data, tr_val, cfg, tr_out, tr_metrics, model_seed);
    }
    if (ev->parsed()) return cmd_eval(ev_margs, ev_model, ev_data, ev_batch);
    if (fl->parsed()) return cmd_flops(fl_margs, fl_csv, fl_cheap);
    if (ex->parsed()) return cmd_export_trace(ex_margs, ex_model, ex_data, ex_out);
    if (si->parsed()) return cmd_simulate(si_margs, si_trace, si_gammas, si_csv);
    if (ca->parsed()) return cmd_calibrate(ca_margs, ca_trace, ca_objective, ca_target, ca_step);
    if (hi->parsed()) return cmd_histogram(hi_trace, hi_exit, hi_bins, hi_out);
    if (pr->parsed())
      return cmd_probe(pr_margs, pr_baseline, pr_branched, pr_data, pr_eval, pr_stages, pr_fuzz,
                       pr_repeats, pr_fit, pr_out);
    if (de->parsed()) {
      std::fputs(describe_model(de_margs.spec()).c_str(), stdout);
      return 0;
    }
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}

}  // namespace mx
