#include <cstdio>
#include <iostream>
#include <optional>
#include <string>

#include "CLI11.hpp"
#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/pipeline.hpp"

using namespace ctxdet;

namespace {

struct Flags {
  std::string config;
  std::optional<std::uint64_t> seed;
  std::optional<std::string> variant;
  bool inject_gt_proposals = false;
  std::optional<std::string> out;
  std::optional<std::string> detections;
};

RunConfig resolve(const Flags& f) {
  RunConfig c = f.config.empty() ? RunConfig{} : load_run_config(f.config);
  if (f.seed) c.seed = *f.seed;
  if (f.variant) c.variant = parse_variant(*f.variant);
  if (f.inject_gt_proposals) c.inject_gt_proposals = true;
  if (f.out) c.out = *f.out;
  if (f.detections) c.detections = *f.detections;
  return c;
}

void wrote(const std::filesystem::path& p) { std::cout << "wrote " << p.string() << "\n"; }

// Models a variant depends on, loaded from the model directory.
struct LoadedArtifacts {
  std::optional<ParamBundle> baseline, mil, addon;
  std::optional<RelationCodebook> codebook, coarse_codebook;

  Artifacts view() const {
    Artifacts a;
    if (baseline) a.baseline = &*baseline;
    if (mil) a.mil = &*mil;
    if (addon) a.addon = &*addon;
    if (codebook) a.codebook = &*codebook;
    if (coarse_codebook) a.coarse_codebook = &*coarse_codebook;
    return a;
  }
};

LoadedArtifacts load_artifacts(const RunConfig& c, Variant v) {
  LoadedArtifacts a;
  a.baseline = ParamBundle::load(baseline_file(c));
  if (needs_mil(v)) a.mil = ParamBundle::load(mil_file(c));
  if (needs_codebook(v)) a.codebook = load_codebook(codebook_file(c, false));
  if (needs_coarse_codebook(v)) a.coarse_codebook = load_codebook(codebook_file(c, true));
  if (needs_addon(v)) a.addon = ParamBundle::load(addon_file(c));
  return a;
}

DetectionSet eval_detections(const RunConfig& c) {
  return load_detections(c.detections.empty() ? detections_file(c, c.variant) : c.detections);
}

void cmd_synth_gen(const RunConfig& c) {
  save_dataset(generate_split(c, false), train_dir(c));
  wrote(train_dir(c));
  save_dataset(generate_split(c, true), test_dir(c));
  wrote(test_dir(c));
}

void cmd_train_mil(const RunConfig& c) {
  const Dataset train = load_dataset(train_dir(c));
  const ParamBundle baseline = ParamBundle::load(baseline_file(c));
  train_mil_model(c, train, baseline).save(mil_file(c));
  wrote(mil_file(c));
}

void cmd_fit_codebook(const RunConfig& c) {
  const Dataset train = load_dataset(train_dir(c));
  const ParamBundle mil = ParamBundle::load(mil_file(c));
  for (bool coarse : {false, true}) {
    save_codebook(fit_codebook(c, train, mil, coarse), codebook_file(c, coarse));
    wrote(codebook_file(c, coarse));
  }
}

void cmd_train_addon(const RunConfig& c) {
  train_addon_model(c, load_dataset(train_dir(c))).save(addon_file(c));
  wrote(addon_file(c));
}

void cmd_train_detector(const RunConfig& c) {
  const Dataset train = load_dataset(train_dir(c));
  LoadedArtifacts a;
  if (c.variant == Variant::NoContext) {
    a.baseline = train_baseline(c, train);
    a.baseline->save(baseline_file(c));
    wrote(baseline_file(c));
  } else {
    a = load_artifacts(c, c.variant);
  }
  train_variant(c, c.variant, train, a.view()).save(detector_file(c, c.variant));
  wrote(detector_file(c, c.variant));
}

void cmd_eval(const RunConfig& c) {
  const Dataset test = load_test_split(c);
  DetectionSet dets;
  if (!c.detections.empty()) {
    dets = load_detections(c.detections);
  } else {
    const LoadedArtifacts a = load_artifacts(c, c.variant);
    const ParamBundle model = ParamBundle::load(detector_file(c, c.variant));
    dets = run_variant(c, c.variant, model, test, a.view());
    save_detections(dets, detections_file(c, c.variant));
    wrote(detections_file(c, c.variant));
  }
  const APReport report = build_report(dets, test.scenes);
  write_file_atomic(report_file(c, c.variant), report_csv(report));
  wrote(report_file(c, c.variant));
  std::cout << "mean AP " << format_double(mean_ap(evaluate(dets, test.scenes))) << "\n";
}

void cmd_diagnose(const RunConfig& c) {
  const Dataset test = load_test_split(c);
  const DiagnosisReport r = diagnose(eval_detections(c), test.scenes);
  write_file_atomic(diagnosis_file(c, c.variant), diagnosis_to_json(r, test.scenes).dump(2) + "\n");
  wrote(diagnosis_file(c, c.variant));
}

void cmd_attach(const RunConfig& c) {
  const Dataset test = load_test_split(c);
  LoadedArtifacts a = load_artifacts(c, Variant::Person);
  const auto rows = attach_addons(c, eval_detections(c), test, a.view());
  write_file_atomic(attachments_file(c), attachments_csv(rows, test.scenes));
  wrote(attachments_file(c));
}

void cmd_score_trace(const RunConfig& c) {
  const Dataset test = load_test_split(c);
  const LoadedArtifacts a = load_artifacts(c, Variant::Linear);
  const ParamBundle model = ParamBundle::load(detector_file(c, Variant::Linear));
  std::vector<std::string> names;
  for (int id : detector_class_ids(model)) names.push_back(test.scenes.category(id).name);
  write_file_atomic(score_trace_file(c), score_trace_csv(trace_scores(c, model, test, a.view()), names));
  wrote(score_trace_file(c));
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Context-aware detection pipeline on synthetic scenes"};
  app.require_subcommand(1);
  app.fallthrough();
  Flags f;
  std::vector<std::string> variants;
  for (Variant v : all_variants()) variants.push_back(variant_name(v));
  app.add_option("--config", f.config, "JSON run config");
  app.add_option("--seed", f.seed, "Run seed (overrides the config)");
  app.add_option("--variant", f.variant, "Model variant")->check(CLI::IsMember(variants));
  app.add_flag("--inject-gt-proposals", f.inject_gt_proposals, "Add GT boxes to the test proposals");
  app.add_option("--out", f.out, "Output directory (overrides paths.out)");
  app.add_option("--detections", f.detections, "Detections CSV to score instead of running inference");

  const std::vector<std::pair<std::string, void (*)(const RunConfig&)>> commands{
      {"synth-gen", cmd_synth_gen},       {"fit-codebook", cmd_fit_codebook},
      {"train-mil", cmd_train_mil},       {"train-addon", cmd_train_addon},
      {"train-detector", cmd_train_detector}, {"eval", cmd_eval},
      {"diagnose", cmd_diagnose},         {"attach", cmd_attach},
      {"score-trace", cmd_score_trace}};
  const std::vector<std::string> help{
      "Generate the train and test splits",
      "Fit the full and coarse relation codebooks",
      "Train the Noisy-Or MIL image classifier",
      "Train the person add-on head",
      "Train a detector variant (nocontext also trains the baseline)",
      "Run a variant on the test split and write detections and the AP report",
      "Write the false-positive diagnosis of the eval detections",
      "Attach add-on detections to predicted people",
      "Trace linear-head score evolution over context regions"};
  for (size_t i = 0; i < commands.size(); ++i) app.add_subcommand(commands[i].first, help[i]);

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 2;
  }

  RunConfig c;
  try {
    c = resolve(f);
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
  try {
    for (const auto& [name, fn] : commands) {
      if (app.got_subcommand(name)) fn(c);
    }
  } catch (const ConfigError& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 1;
  }
  return 0;
}
