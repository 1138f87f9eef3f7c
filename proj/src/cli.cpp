#include "amimv/cli.hpp"

#include <algorithm>
#include <cstdlib>
#include <filesystem>
#include <optional>

#include "CLI11.hpp"
#include "json.hpp"

#include "amimv/dataset.hpp"
#include "amimv/errors.hpp"
#include "amimv/eval.hpp"
#include "amimv/fsutil.hpp"
#include "amimv/imbalance.hpp"
#include "amimv/report.hpp"
#include "amimv/trainer.hpp"

namespace amimv {

namespace {

namespace fs = std::filesystem;

// Input is well formed but outside the domain of the requested computation.
class DomainFailure : public Error {
 public:
  using Error::Error;
};

std::optional<std::uint64_t> env_seed() {
  const char* text = std::getenv("AMIMV_SEED");
  if (!text || !*text) return std::nullopt;
  const std::string s(text);
  if (!std::all_of(s.begin(), s.end(), [](unsigned char c) { return std::isdigit(c); }))
    throw ValidationError("AMIMV_SEED must be a non-negative integer, got '" + s + "'");
  return std::stoull(s);
}

std::string dataset_label(const std::string& source) {
  if (is_synthetic_spec(source)) return "synthetic";
  return fs::path(source).stem().string();
}

// "--key value" and "--key=value" pairs left over after the named flags.
std::vector<std::pair<std::string, std::string>> parse_overrides(const std::vector<std::string>& extras) {
  std::vector<std::pair<std::string, std::string>> out;
  for (std::size_t i = 0; i < extras.size(); ++i) {
    const std::string& token = extras[i];
    if (!token.starts_with("--") || token.size() == 2) throw ValidationError("unexpected argument '" + token + "'");
    const std::string body = token.substr(2);
    if (const auto eq = body.find('='); eq != std::string::npos) {
      out.emplace_back(body.substr(0, eq), body.substr(eq + 1));
      continue;
    }
    if (i + 1 >= extras.size()) throw ValidationError("config key " + body + " needs a value");
    out.emplace_back(body, extras[++i]);
  }
  return out;
}

struct AnalyzeArgs {
  std::string dataset;
  std::string split = "train";
  std::string out = ".";
  std::string name;
};

int cmd_analyze(const AnalyzeArgs& a, std::ostream& out) {
  const Split split = parse_split(a.split);
  const ImageDataset ds = open_dataset(a.dataset);
  const std::string name = a.name.empty() ? dataset_label(a.dataset) : a.name;
  ImbalanceReport report;
  try {
    report = imbalance_metrics(label_histogram(ds, split));
  } catch (const ValidationError& e) {
    throw DomainFailure(e.what());
  }
  report.category = categorize(report, CategoryThresholds::medmnist_defaults(), name);
  const std::string row = imbalance_csv_row(name, report);
  fs::create_directories(a.out);
  write_text_atomic(fs::path(a.out) / "imbalance.csv", imbalance_csv_header() + "\n" + row + "\n");
  write_text_atomic(fs::path(a.out) / "imbalance.json", imbalance_json(name, report).dump(2) + "\n");
  out << imbalance_csv_header() << '\n' << row << '\n';
  return kExitOk;
}

struct PretrainArgs {
  std::string config;
  std::string out;
  std::string mode;
  std::optional<std::uint64_t> seed;
  std::vector<std::string> extras;
};

int cmd_pretrain(const PretrainArgs& a, std::ostream& out) {
  auto overrides = parse_overrides(a.extras);
  if (!a.mode.empty()) overrides.emplace_back("mode", a.mode);
  if (!a.out.empty()) overrides.emplace_back("output", nlohmann::json(a.out).dump());
  bool seed_given = std::any_of(overrides.begin(), overrides.end(), [](const auto& kv) { return kv.first == "seed"; });
  if (a.seed) {
    overrides.emplace_back("seed", std::to_string(*a.seed));
    seed_given = true;
  }
  if (!seed_given && !a.config.empty() && fs::exists(a.config)) {
    const auto doc = nlohmann::json::parse(read_text(a.config), nullptr, false);
    seed_given = doc.is_object() && doc.contains("seed");
  }
  if (!seed_given)
    if (const auto s = env_seed()) overrides.emplace_back("seed", std::to_string(*s));

  const RunConfig config = load_run_config(a.config, overrides);
  if (config.output.empty()) throw ValidationError("pretrain needs an output directory");
  out << "pretrain mode=" << mode_name(config.mode) << " dataset=" << config.dataset << " seed=" << config.seed
      << " epochs=" << config.epochs << '\n';
  const auto result = pretrain(config, [&](const EpochLog& e) {
    out << "epoch " << e.epoch << '/' << config.epochs << " loss=" << e.mean_loss << " lr=" << e.lr
        << " alignment=" << e.alignment << " uniformity=" << e.uniformity << '\n';
  });
  out << "wrote " << (fs::path(config.output) / "log.csv").string() << ", checkpoint.bin, manifest.json, run.json ("
      << result.steps << " steps)\n";
  return kExitOk;
}

struct ProbeArgs {
  std::string checkpoint;
  std::string dataset;
  std::string out;
  std::optional<std::uint64_t> seed;
  ProbeConfig probe;
};

int cmd_probe(ProbeArgs a, std::ostream& out) {
  const fs::path ckpt_dir(a.checkpoint);
  const Checkpoint ckpt = load_checkpoint(ckpt_dir);
  if (a.dataset.empty()) {
    const fs::path run = ckpt_dir / "run.json";
    if (!fs::exists(run)) throw ValidationError("no --dataset given and " + run.string() + " is missing");
    const auto doc = nlohmann::json::parse(read_text(run), nullptr, false);
    if (!doc.is_object() || !doc.contains("dataset") || !doc["dataset"].is_string())
      throw ValidationError(run.string() + " does not name a dataset");
    a.dataset = doc["dataset"].get<std::string>();
  }
  if (a.seed) a.probe.seed = *a.seed;
  else if (const auto s = env_seed()) a.probe.seed = *s;
  a.probe.validate();

  const ImageDataset ds = open_dataset(a.dataset);
  const std::size_t view = ckpt.info.view_size ? ckpt.info.view_size : ds.height;
  const FeatureSet train = extract_features(ckpt.pair, ds, Split::train, view);
  const FeatureSet test = extract_features(ckpt.pair, ds, Split::test, view);
  const LinearProbe probe = linear_probe(train.features, train.labels, ds.num_classes, a.probe);
  const EvalReport report = classification_metrics(probe.scores(test.features), test.labels);

  nlohmann::json doc = eval_json(report);
  doc["dataset"] = a.dataset;
  doc["checkpoint_mode"] = ckpt.info.mode;
  doc["checkpoint_step"] = ckpt.info.step;
  doc["probe"] = a.probe;
  doc["warnings"] = probe.warnings;

  std::vector<EmbeddingPoint> points;
  if (test.features.size(0) >= 2 && test.features.size(1) >= 2) {
    const PcaResult pca = pca_project(test.features, 2);
    for (std::size_t i = 0; i < test.labels.size(); ++i)
      points.push_back({pca.coords[2 * i], pca.coords[2 * i + 1], test.labels[i]});
  }

  const fs::path dir = a.out.empty() ? ckpt_dir : fs::path(a.out);
  fs::create_directories(dir);
  write_text_atomic(dir / "eval.csv", eval_csv(report));
  write_text_atomic(dir / "eval.json", doc.dump(2) + "\n");
  write_text_atomic(dir / "confusion.csv", confusion_csv(report));
  write_text_atomic(dir / "embedding.csv", embedding_csv(points));
  for (const auto& w : probe.warnings) out << "warning: " << w << '\n';
  out << "accuracy=" << report.accuracy << " macro_auc=" << report.macro_auc << " test_images=" << report.num_samples
      << '\n';
  return kExitOk;
}

struct ReportArgs {
  std::vector<std::string> runs;
  std::string out;
};

int cmd_report(const ReportArgs& a, std::ostream& out) {
  if (!a.out.empty() && a.runs.size() != 1) throw ValidationError("--out applies to a single run directory");
  for (const auto& run : a.runs) {
    const fs::path dir(run);
    for (const char* name : {"eval.json", "confusion.csv", "embedding.csv"})
      if (!fs::exists(dir / name)) throw ValidationError("missing " + (dir / name).string() + "; run probe first");
    const auto doc = nlohmann::json::parse(read_text(dir / "eval.json"), nullptr, false);
    if (doc.is_discarded()) throw FormatError((dir / "eval.json").string() + " is not valid JSON");
    const EvalReport report = eval_from_json(doc);
    const auto confusion = parse_confusion_csv(read_text(dir / "confusion.csv"));
    const auto points = parse_embedding_csv(read_text(dir / "embedding.csv"));
    const fs::path target = a.out.empty() ? dir : fs::path(a.out);
    fs::create_directories(target);
    write_text_atomic(target / "per_class.svg", per_class_svg(report.per_class_accuracy));
    write_text_atomic(target / "confusion.svg", confusion_svg(confusion));
    if (!points.empty()) write_text_atomic(target / "embedding.svg", embedding_svg(points));
    out << "wrote charts to " << target.string() << '\n';
  }
  return kExitOk;
}

}  // namespace

int run_cli(const std::vector<std::string>& args, std::ostream& out, std::ostream& err) {
  CLI::App app{"Contrastive pretraining and evaluation on long-tailed image datasets", "amimv"};
  app.require_subcommand(1, 1);

  AnalyzeArgs analyze;
  auto* c_analyze = app.add_subcommand("analyze", "Class-imbalance metrics of a dataset");
  c_analyze->add_option("dataset", analyze.dataset, "NPZ path or synthetic:... spec")->required();
  c_analyze->add_option("--split", analyze.split, "Split to analyze (train, val, test)");
  c_analyze->add_option("--out", analyze.out, "Output directory");
  c_analyze->add_option("--name", analyze.name, "Dataset name used for the row and category lookup");

  PretrainArgs pretrain_args;
  auto* c_pretrain = app.add_subcommand("pretrain", "Contrastive pretraining; extra --dotted.key VALUE pairs override the config");
  c_pretrain->add_option("--config", pretrain_args.config, "JSON run config");
  c_pretrain->add_option("--out", pretrain_args.out, "Run directory");
  c_pretrain->add_option("--mode", pretrain_args.mode, "amimv or simclr_baseline");
  c_pretrain->add_option("--seed", pretrain_args.seed, "Seed (falls back to AMIMV_SEED)");
  c_pretrain->allow_extras();

  ProbeArgs probe_args;
  auto* c_probe = app.add_subcommand("probe", "Linear probe on frozen query-encoder features");
  c_probe->add_option("--checkpoint", probe_args.checkpoint, "Run directory holding manifest.json")->required();
  c_probe->add_option("--dataset", probe_args.dataset, "Dataset (default: the one in run.json)");
  c_probe->add_option("--out", probe_args.out, "Output directory (default: the checkpoint directory)");
  c_probe->add_option("--seed", probe_args.seed, "Probe seed (falls back to AMIMV_SEED)");
  c_probe->add_option("--lr", probe_args.probe.lr, "AdamW learning rate");
  c_probe->add_option("--epochs", probe_args.probe.epochs, "Probe epochs");
  c_probe->add_option("--batch-size", probe_args.probe.batch_size, "Probe batch size");
  c_probe->add_option("--weight-decay", probe_args.probe.weight_decay, "AdamW weight decay");
  c_probe->add_flag("--standardize", probe_args.probe.standardize, "z-score features with train statistics");

  ReportArgs report_args;
  auto* c_report = app.add_subcommand("report", "SVG charts from probe outputs");
  c_report->add_option("runs", report_args.runs, "Run directories")->required();
  c_report->add_option("--out", report_args.out, "Output directory (single run only)");

  try {
    std::vector<std::string> reversed(args.rbegin(), args.rend());
    app.parse(reversed);
  } catch (const CLI::CallForHelp&) {
    out << app.help();
    return kExitOk;
  } catch (const CLI::CallForAllHelp&) {
    out << app.help("", CLI::AppFormatMode::All);
    return kExitOk;
  } catch (const CLI::ParseError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  }

  try {
    if (c_analyze->parsed()) return cmd_analyze(analyze, out);
    if (c_pretrain->parsed()) {
      pretrain_args.extras = c_pretrain->remaining();
      return cmd_pretrain(pretrain_args, out);
    }
    if (c_probe->parsed()) return cmd_probe(probe_args, out);
    if (c_report->parsed()) return cmd_report(report_args, out);
  } catch (const DomainFailure& e) {
    err << "error: " << e.what() << '\n';
    return kExitDomain;
  } catch (const NumericError& e) {
    err << "numeric failure: " << e.what() << '\n';
    return kExitNumeric;
  } catch (const ValidationError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const FormatError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const DimensionError& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const nlohmann::json::exception& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const fs::filesystem_error& e) {
    err << "error: " << e.what() << '\n';
    return kExitInput;
  } catch (const std::exception& e) {
    err << "internal error: " << e.what() << '\n';
    return kExitInternal;
  }
  return kExitInternal;
}

}  // namespace amimv
