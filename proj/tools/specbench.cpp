#include <CLI11.hpp>

#include <cstdlib>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <sstream>
#include <string>

#include "specbench/harness.hpp"
#include "specbench/io.hpp"
#include "specbench/peakfit.hpp"
#include "specbench/plot.hpp"

using namespace specbench;
namespace fs = std::filesystem;

namespace {

enum ExitCode { kOk = 0, kUsage = 1, kData = 2, kNumerical = 3 };

class UsageError : public std::runtime_error {
 public:
  using std::runtime_error::runtime_error;
};

std::string one_line(std::string s) {
  for (char& c : s)
    if (c == '\n' || c == '\r') c = ' ';
  return s;
}

int fail(const char* kind, int code, const std::string& what) {
  std::cerr << "error: " << kind << ": " << one_line(what) << '\n';
  return code;
}

std::uint64_t need_seed(const std::optional<std::uint64_t>& seed, const std::string& why) {
  if (!seed) throw UsageError("--seed is required " + why);
  return *seed;
}

std::ofstream open_file(const fs::path& path) {
  if (path.has_parent_path()) fs::create_directories(path.parent_path());
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

nlohmann::json read_json(const fs::path& path) {
  try {
    return nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed JSON in " + path.string() + ": " + e.what());
  }
}

Hyperparams parse_params(const std::vector<std::string>& items) {
  Hyperparams hp;
  for (const auto& item : items) {
    const auto eq = item.find('=');
    if (eq == std::string::npos || eq == 0) throw UsageError("--param expects key=value, got '" + item + "'");
    hp[item.substr(0, eq)] = item.substr(eq + 1);
  }
  return hp;
}

constexpr std::uint64_t kDataStream = 6;

// Dataset from --in, --preset or --config. Generated data uses the same
// derived stream as a plan without an explicit dataset seed.
struct Input {
  std::string in;
  std::string preset;
  std::string config;

  void add(CLI::App* app) {
    auto* in_opt = app->add_option("--in", in, "Dataset CSV")->check(CLI::ExistingFile);
    auto* p = app->add_option("--preset", preset, "Built-in generator preset")->check(CLI::IsMember(preset_names()));
    auto* c = app->add_option("--config", config, "Generator JSON file")->check(CLI::ExistingFile);
    in_opt->excludes(p)->excludes(c);
    p->excludes(c);
  }

  bool generated() const { return !preset.empty() || !config.empty(); }

  SpectraDataset load_standard(std::uint64_t seed) const {
    if (!generated()) {
      if (in.empty()) throw UsageError("one of --in, --preset or --config is required");
      return ensure_standard(read_dataset_csv(fs::path(in)));
    }
    const GeneratorConfig cfg = preset.empty() ? generator_config_from_json(read_json(config)) : specbench::preset(preset);
    return prepared_dataset(cfg, derive_seed(seed, {kDataStream}));
  }
};

struct ModelFile {
  std::string model;
  std::vector<std::string> class_names;
  std::uint64_t seed = 0;
  std::vector<double> split;
  nlohmann::json state;
};

nlohmann::json to_json(const ModelFile& m) {
  return {{"format", "specbench-model"}, {"version", 1},     {"model", m.model}, {"class_names", m.class_names},
          {"seed", m.seed},              {"split", m.split}, {"state", m.state}};
}

ModelFile model_file_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "specbench-model" || j.at("version") != 1) throw DataError("not a specbench model file");
    return {j.at("model").get<std::string>(), j.at("class_names").get<std::vector<std::string>>(),
            j.at("seed").get<std::uint64_t>(), j.at("split").get<std::vector<double>>(), j.at("state")};
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed model file: ") + e.what());
  }
}

Labels predict_with(const ModelFile& m, const RowMatrix& x) {
  if (is_ml_kind(m.model)) return ml_model_from_json(m.state).predict(x);
  return nn::predict(nn::load_checkpoint(m.state), x).labels;
}

SplitIndices cli_split(const SpectraDataset& d, const std::vector<double>& fractions, std::uint64_t seed,
                       const std::string& model) {
  SplitIndices s = stratified_split(d, fractions, run_seeds(seed, model, 0.0, 0).split);
  std::sort(s.train.begin(), s.train.end());
  std::sort(s.val.begin(), s.val.end());
  return s;
}

void print_report(const EvalReport& r) {
  std::cout << "model=" << r.model_name() << " accuracy=" << format_double(r.accuracy()) << " n_test=" << r.n_test()
            << '\n';
}

// Reads a plan; --seed overrides master_seed, which must come from one of the two.
ExperimentPlan plan_with_seed(const std::string& path, std::optional<std::uint64_t> seed) {
  const nlohmann::json j = read_json(path);
  if (!seed && !(j.is_object() && j.contains("master_seed")))
    throw UsageError("--seed is required when the plan has no master_seed");
  ExperimentPlan p = load_plan(path);
  if (seed) p.master_seed = *seed;
  return p;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Synthetic Raman spectra, preprocessing, peak fitting, classifiers and noise-robustness experiments"};
  app.require_subcommand(1);
  app.set_help_all_flag("--help-all", "Help for every subcommand");
  std::optional<std::uint64_t> seed;
  std::string out;

  // generate
  auto* gen = app.add_subcommand("generate", "Generate a synthetic dataset CSV");
  Input gen_in;
  bool gen_raw = false;
  auto* gp = gen->add_option("--preset", gen_in.preset, "Built-in preset")->check(CLI::IsMember(preset_names()));
  gen->add_option("--config", gen_in.config, "Generator JSON file")->check(CLI::ExistingFile)->excludes(gp);
  gen->add_option("--seed", seed, "Generation seed")->required();
  gen->add_option("--out", out, "Output CSV")->required();
  gen->add_flag("--raw", gen_raw, "Keep the acquisition grid; skip despike, crop, resample and rescale");

  // preprocess
  auto* pre = app.add_subcommand("preprocess", "Despike, crop, resample to 728 bins and rescale to [0, 1]");
  std::string pre_in;
  bool no_despike = false;
  pre->add_option("--in", pre_in, "Input dataset CSV")->required()->check(CLI::ExistingFile);
  pre->add_option("--out", out, "Output CSV")->required();
  pre->add_flag("--no-despike", no_despike, "Skip the cosmic-ray filter");

  // augment
  auto* aug = app.add_subcommand("augment", "Random peak shift followed by additive noise");
  std::string aug_in, aug_mode = "replace";
  double aug_noise = 0.05, aug_shift = 30.0;
  aug->add_option("--in", aug_in, "Input dataset CSV")->required()->check(CLI::ExistingFile);
  aug->add_option("--out", out, "Output CSV")->required();
  aug->add_option("--seed", seed, "Augmentation seed")->required();
  aug->add_option("--noise", aug_noise, "Noise level, fraction of the 2D-band maximum")->capture_default_str();
  aug->add_option("--shift", aug_shift, "Maximum peak shift in cm^-1")->capture_default_str();
  aug->add_option("--mode", aug_mode, "replace: augmented rows only; append: originals then augmented rows")->capture_default_str()
      ->check(CLI::IsMember({"replace", "append"}));

  // fit-peaks
  auto* fit = app.add_subcommand("fit-peaks", "Pseudo-Voigt fits of the G and 2D bands, or a noise sensitivity study");
  std::string fit_in, study_preset = "charge_mimic";
  bool study = false;
  int study_class = 0, study_reps = 100;
  std::vector<double> study_levels{0.01, 0.02, 0.05, 0.10};
  fit->add_option("--in", fit_in, "Dataset CSV to fit, one row per spectrum")->check(CLI::ExistingFile);
  fit->add_option("--out", out, "Output CSV")->required();
  fit->add_flag("--study", study, "Run the Monte-Carlo noise sensitivity study instead");
  fit->add_option("--preset", study_preset, "Study: preset supplying the class profile")->capture_default_str()
      ->check(CLI::IsMember(preset_names()));
  fit->add_option("--class", study_class, "Study: class index within the preset")->capture_default_str();
  fit->add_option("--reps", study_reps, "Study: noisy copies per level")->capture_default_str();
  fit->add_option("--levels", study_levels, "Study: noise levels")->capture_default_str()->delimiter(',');
  fit->add_option("--seed", seed, "Study: seed");

  // train
  auto* tr = app.add_subcommand("train", "Train one classifier on the training part of a stratified split");
  Input tr_in;
  std::string tr_model, tr_split = "80/20", tr_report, tr_history;
  int tr_epochs = 30;
  std::vector<std::string> tr_params;
  tr_in.add(tr);
  tr->add_option("--model", tr_model, "FC, CNN, FullCNN, MHCNN, knn, dtree, rforest, gnb or svm")
      ->required()
      ->check(CLI::IsMember({"FC", "CNN", "FullCNN", "MHCNN", "knn", "dtree", "rforest", "gnb", "svm"}));
  tr->add_option("--seed", seed, "Seed for data generation, split and model")->required();
  tr->add_option("--split", tr_split, "80/20 or 60/20/20")->capture_default_str();
  tr->add_option("--epochs", tr_epochs, "Network epochs")->capture_default_str()->check(CLI::PositiveNumber);
  tr->add_option("--param", tr_params, "Hyperparameter key=value (repeatable)");
  tr->add_option("--out", out, "Output model JSON")->required();
  tr->add_option("--report", tr_report, "Test-split report JSON");
  tr->add_option("--history", tr_history, "Network training history CSV");

  // evaluate
  auto* ev = app.add_subcommand("evaluate", "Score a trained model file");
  std::string ev_model, ev_in, ev_rows = "test", ev_confusion;
  double ev_noise = 0.0;
  ev->add_option("--model-file", ev_model, "Model JSON written by train")->required()->check(CLI::ExistingFile);
  ev->add_option("--in", ev_in, "Dataset CSV")->required()->check(CLI::ExistingFile);
  ev->add_option("--rows", ev_rows, "test: held-out rows of the training split; all: every row")->capture_default_str()
      ->check(CLI::IsMember({"test", "all"}));
  ev->add_option("--noise", ev_noise, "Noise level applied before scoring")->capture_default_str();
  ev->add_option("--seed", seed, "Noise seed (required with --noise)");
  ev->add_option("--out", out, "Report JSON");
  ev->add_option("--confusion", ev_confusion, "Confusion matrix CSV");

  // sweep
  auto* sw = app.add_subcommand("sweep", "Accuracy versus noise level over repeated splits");
  std::string sw_plan;
  bool sw_confusion = false;
  sw->add_option("--plan", sw_plan, "Experiment plan JSON")->required()->check(CLI::ExistingFile);
  sw->add_option("--out", out, "Output directory")->required();
  sw->add_option("--seed", seed, "Master seed, overrides the plan");
  sw->add_flag("--confusion", sw_confusion, "Also write confusion_<model>.csv/json for every model");

  // stability
  auto* st = app.add_subcommand("stability", "Accuracy distribution over reshuffled splits and initialisations");
  std::string st_plan;
  st->add_option("--plan", st_plan, "Experiment plan JSON")->required()->check(CLI::ExistingFile);
  st->add_option("--out", out, "Output directory")->required();
  st->add_option("--seed", seed, "Master seed, overrides the plan");

  // pca
  auto* pc = app.add_subcommand("pca", "Principal component scores of a dataset");
  std::string pc_in, pc_summary;
  int pc_components = 2;
  pc->add_option("--in", pc_in, "Dataset CSV")->required()->check(CLI::ExistingFile);
  pc->add_option("--out", out, "Scores CSV (label, pc1, ...)")->required();
  pc->add_option("--components", pc_components, "Number of components")->capture_default_str()->check(CLI::PositiveNumber);
  pc->add_option("--summary", pc_summary, "Explained variance JSON");

  // plot
  auto* pl = app.add_subcommand("plot", "SVG chart of sweep.csv or a training history CSV");
  std::string pl_in, pl_title;
  pl->add_option("--in", pl_in, "sweep.csv or history CSV")->required()->check(CLI::ExistingFile);
  pl->add_option("--out", out, "Output SVG")->required();
  pl->add_option("--title", pl_title, "Chart title");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::CallForAllHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    return fail("usage", kUsage, e.what());
  }

  try {
    if (*gen) {
      if (gen_in.preset.empty() && gen_in.config.empty()) throw UsageError("--preset or --config is required");
      const GeneratorConfig cfg =
          gen_in.config.empty() ? preset(gen_in.preset) : generator_config_from_json(read_json(gen_in.config));
      const SpectraDataset d =
          gen_raw ? synth_dataset(cfg.profiles, acquisition_grid(), *seed) : prepared_dataset(cfg, *seed);
      write_dataset_csv(d, fs::path(out));
      std::cout << "spectra=" << d.n_spectra() << " bins=" << d.n_bins() << '\n';
    } else if (*pre) {
      const SpectraDataset d = prepare_standard(read_dataset_csv(fs::path(pre_in)), !no_despike);
      write_dataset_csv(d, fs::path(out));
      std::cout << "spectra=" << d.n_spectra() << " bins=" << d.n_bins() << '\n';
    } else if (*aug) {
      const SpectraDataset d = read_dataset_csv(fs::path(aug_in));
      Rng rng(*seed);
      const SpectraDataset a = augment_dataset(d, NoiseSpec{aug_noise}, aug_shift, rng,
                                               aug_mode == "append" ? AugmentMode::append : AugmentMode::replace);
      write_dataset_csv(a, fs::path(out));
      std::cout << "spectra=" << a.n_spectra() << '\n';
    } else if (*fit) {
      auto file = open_file(out);
      if (study) {
        const GeneratorConfig cfg = preset(study_preset);
        if (study_class < 0 || study_class >= static_cast<int>(cfg.profiles.size()))
          throw UsageError("--class must be in [0, " + std::to_string(cfg.profiles.size() - 1) + "]");
        const StudyTable t = noise_sensitivity_study(cfg.profiles[static_cast<std::size_t>(study_class)],
                                                     study_levels, study_reps, need_seed(seed, "for --study"));
        write_study_csv(t, file);
      } else {
        if (fit_in.empty()) throw UsageError("--in is required unless --study is given");
        const SpectraDataset d = read_dataset_csv(fs::path(fit_in));
        file << "row,label,band,position,fwhm,intensity,area,residual_rms,poor_fit,error\n";
        int failures = 0;
        for (Eigen::Index r = 0; r < d.n_spectra(); ++r) {
          const Spectrum s = d.spectrum(r);
          const std::string& label = d.class_names()[static_cast<std::size_t>(d.labels()[static_cast<std::size_t>(r)])];
          for (const auto& [band, window] : {std::pair{"G", kGWindow}, std::pair{"2D", k2DWindow}}) {
            file << r << ',' << label << ',' << band << ',';
            try {
              const FitResult f = fit_peak(s, window);
              const PeakReport& p = f.report;
              file << format_double(p.position) << ',' << format_double(p.fwhm) << ',' << format_double(p.intensity)
                   << ',' << format_double(p.area) << ',' << format_double(p.residual_rms) << ','
                   << (f.poor_fit ? 1 : 0) << ",\n";
            } catch (const NumericalError& e) {
              ++failures;
              file << "nan,nan,nan,nan,nan,0," << one_line(e.what()) << '\n';
            }
          }
        }
        std::cout << "fits=" << 2 * d.n_spectra() << " failures=" << failures << '\n';
      }
    } else if (*tr) {
      const std::uint64_t s = *seed;
      const SpectraDataset d = tr_in.load_standard(s);
      const std::vector<double> fractions = parse_split(tr_split);
      const SplitIndices split = cli_split(d, fractions, s, tr_model);
      const RunSeeds seeds = run_seeds(s, tr_model, 0.0, 0);
      const Hyperparams hp = parse_params(tr_params);
      ModelFile mf{tr_model, d.class_names(), s, fractions, {}};
      const SpectraDataset test = d.subset(split.test);
      Labels pred;
      if (is_ml_kind(tr_model)) {
        const ModelKind kind = parse_model_kind(tr_model);
        MlModel m(kind, ml_hyperparams(kind, hp), seeds.model);
        const SpectraDataset train = d.subset(split.train);
        m.fit(train.rows(), train.labels(), d.n_classes());
        pred = m.predict(test.rows());
        mf.state = specbench::to_json(m);
      } else {
        const nn::TrainConfig cfg = network_config(tr_model, hp, tr_epochs, seeds.model);
        const nn::TrainedModel m = nn::train(nn::build_model(tr_model, d.n_classes()), d, split, cfg);
        pred = nn::predict(m, test.rows()).labels;
        mf.state = nn::checkpoint(m);
        if (!tr_history.empty()) {
          auto h = open_file(tr_history);
          nn::write_history_csv(m.history, h);
        }
      }
      auto model_out = open_file(out);
      model_out << to_json(mf).dump() << '\n';
      const EvalReport r = evaluate(pred, test.labels(), d.n_classes(), seeds.model, tr_model, 0.0);
      if (!tr_report.empty()) {
        auto rep = open_file(tr_report);
        rep << specbench::to_json(r).dump(2) << '\n';
      }
      print_report(r);
    } else if (*ev) {
      const ModelFile mf = model_file_from_json(read_json(ev_model));
      const SpectraDataset d = ensure_standard(read_dataset_csv(fs::path(ev_in), mf.class_names));
      if (d.class_names() != mf.class_names) throw DataError("dataset classes differ from the model's classes");
      SpectraDataset rows = d;
      if (ev_rows == "test") rows = d.subset(cli_split(d, mf.split, mf.seed, mf.model).test);
      if (ev_noise != 0.0) rows = add_noise_dataset(rows, NoiseSpec{ev_noise}, need_seed(seed, "with --noise"));
      const EvalReport r = evaluate(predict_with(mf, rows.rows()), rows.labels(), d.n_classes(),
                                    seed.value_or(mf.seed), mf.model, ev_noise);
      if (!out.empty()) {
        auto rep = open_file(out);
        rep << specbench::to_json(r).dump(2) << '\n';
      }
      if (!ev_confusion.empty()) {
        auto c = open_file(ev_confusion);
        write_confusion_csv(r, d.class_names(), c);
      }
      print_report(r);
    } else if (*sw) {
      const ExperimentPlan p = plan_with_seed(sw_plan, seed);
      const SpectraDataset d = load_plan_dataset(p);
      const SweepResult r = run_noise_sweep(p, d);
      write_sweep_outputs(r, out);
      if (sw_confusion)
        for (const auto& m : p.models) write_confusion_outputs(run_confusion(p, d, m), d.class_names(), out);
      int failed = 0;
      for (const auto& c : r.cells) failed += static_cast<int>(c.accuracies.size()) - c.n;
      std::cout << "cells=" << r.cells.size() << " failed_runs=" << failed << '\n';
    } else if (*st) {
      const ExperimentPlan p = plan_with_seed(st_plan, seed);
      const StabilityResult r = run_stability_study(p);
      for (const auto& w : r.warnings) std::cerr << "warning: " << one_line(w) << '\n';
      write_stability_outputs(r, out);
      for (const auto& s : r.series)
        std::cout << s.label << " below_0.8=" << format_double(fraction_below(s.accuracies, 0.8)) << " histogram="
                  << s.histogram[0] << '/' << s.histogram[1] << '/' << s.histogram[2] << '\n';
    } else if (*pc) {
      const SpectraDataset d = read_dataset_csv(fs::path(pc_in));
      const PcaModel m = pca_fit(d.rows(), pc_components);
      const RowMatrix scores = pca_transform(m, d.rows());
      auto file = open_file(out);
      file << "label";
      for (int c = 1; c <= pc_components; ++c) file << ",pc" << c;
      file << '\n';
      for (Eigen::Index r = 0; r < scores.rows(); ++r) {
        file << d.class_names()[static_cast<std::size_t>(d.labels()[static_cast<std::size_t>(r)])];
        for (Eigen::Index c = 0; c < scores.cols(); ++c) file << ',' << format_double(scores(r, c));
        file << '\n';
      }
      if (!pc_summary.empty()) {
        auto sum = open_file(pc_summary);
        sum << nlohmann::json{{"explained_variance", std::vector<double>(m.explained_variance.begin(),
                                                                          m.explained_variance.end())},
                              {"explained_variance_ratio",
                               std::vector<double>(m.explained_variance_ratio.begin(),
                                                   m.explained_variance_ratio.end())}}
                   .dump(2)
            << '\n';
      }
      std::cout << "explained_variance_ratio=";
      for (Eigen::Index c = 0; c < m.explained_variance_ratio.size(); ++c)
        std::cout << (c ? "," : "") << format_double(m.explained_variance_ratio[c]);
      std::cout << '\n';
    } else if (*pl) {
      const std::string text = read_text(pl_in);
      std::istringstream csv(text);
      const bool history = text.rfind("epoch,", 0) == 0;
      const auto series = history ? history_series(csv) : sweep_series(csv);
      const PlotAxes axes = history ? PlotAxes{"epoch", "training loss", pl_title}
                                    : PlotAxes{"noise level", "accuracy", pl_title};
      auto file = open_file(out);
      file << emit_svg(series, axes);
      std::cout << "series=" << series.size() << '\n';
    }
  } catch (const UsageError& e) {
    return fail("usage", kUsage, e.what());
  } catch (const NumericalError& e) {
    return fail("numerical", kNumerical, e.what());
  } catch (const NotFittedError& e) {
    return fail("data", kData, e.what());
  } catch (const std::exception& e) {
    return fail("data", kData, e.what());
  }
  return kOk;
}
