#include "specbench/harness.hpp"

#include <algorithm>
#include <cmath>
#include <fstream>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>
#include <sstream>

#include "specbench/io.hpp"
#include "specbench/parallel.hpp"

namespace specbench {

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();
constexpr int kFullScaleStabilityRuns = 400;

enum Stream : std::uint64_t { kSplit = 1, kNoise = 2, kModel = 3, kAugment = 4, kSubsample = 5, kData = 6 };

std::uint64_t level_key(double level) { return static_cast<std::uint64_t>(std::llround(level * 1e6)); }

bool in_noise_range(double v) { return v >= 0.0 && v <= kMaxNoiseLevel; }

std::string mode_name(AugmentMode m) { return m == AugmentMode::append ? "append" : "replace"; }

AugmentMode parse_mode(const std::string& s) {
  if (s == "append") return AugmentMode::append;
  if (s == "replace") return AugmentMode::replace;
  throw DataError("augment mode must be append or replace, got '" + s + "'");
}

std::string hyper_value(const nlohmann::json& v) {
  if (v.is_string()) return v.get<std::string>();
  if (v.is_boolean()) return v.get<bool>() ? "true" : "false";
  if (v.is_number_integer()) return std::to_string(v.get<long long>());
  if (v.is_number()) return format_double(v.get<double>());
  throw DataError("hyperparameter values must be strings, numbers or booleans");
}

void check_keys(const nlohmann::json& j, std::initializer_list<const char*> allowed, const std::string& where) {
  if (!j.is_object()) throw DataError(where + " must be a JSON object");
  for (const auto& [key, _] : j.items()) {
    if (std::none_of(allowed.begin(), allowed.end(), [&](const char* a) { return key == a; }))
      throw DataError("unknown key '" + key + "' in " + where);
  }
}

struct NetSettings {
  int batch_size;
  double lr;
};

NetSettings net_settings(const std::string& model, const Hyperparams& hp) {
  NetSettings s{nn::default_batch_size(model), nn::AdamConfig{}.lr};
  for (const auto& [key, value] : hp) {
    try {
      std::size_t used = 0;
      if (key == "batch_size") {
        s.batch_size = std::stoi(value, &used);
      } else if (key == "lr") {
        s.lr = std::stod(value, &used);
      } else {
        throw DataError("unknown hyperparameter '" + key + "' for " + model);
      }
      if (used != value.size()) throw std::invalid_argument(value);
    } catch (const DataError&) {
      throw;
    } catch (const std::exception&) {
      throw DataError("bad value '" + value + "' for " + model + " hyperparameter " + key);
    }
  }
  if (s.batch_size < 1) throw DataError(model + " batch_size must be >= 1");
  if (!(s.lr > 0.0) || !std::isfinite(s.lr)) throw DataError(model + " lr must be positive");
  return s;
}

const Hyperparams& overrides(const ExperimentPlan& plan, const std::string& model) {
  static const Hyperparams empty;
  auto it = plan.hyperparams.find(model);
  return it == plan.hyperparams.end() ? empty : it->second;
}

void require_two_classes(const SpectraDataset& d) {
  const auto counts = d.class_counts();
  const auto populated = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; });
  if (populated < 2)
    throw DataError("dataset has " + std::to_string(populated) + " populated class(es); at least 2 are needed");
}

SpectraDataset subsample_per_class(const SpectraDataset& d, int cap, std::uint64_t seed) {
  std::vector<int> keep;
  for (int c = 0; c < d.n_classes(); ++c) {
    std::vector<int> rows;
    for (int r = 0; r < static_cast<int>(d.n_spectra()); ++r)
      if (d.labels()[static_cast<std::size_t>(r)] == c) rows.push_back(r);
    if (static_cast<int>(rows.size()) > cap) {
      Rng rng(derive_seed(seed, {static_cast<std::uint64_t>(c)}));
      std::shuffle(rows.begin(), rows.end(), rng);
      rows.resize(static_cast<std::size_t>(cap));
    }
    keep.insert(keep.end(), rows.begin(), rows.end());
  }
  std::sort(keep.begin(), keep.end());
  return d.subset(keep);
}

SpectraDataset stack(const SpectraDataset& a, const SpectraDataset& b) {
  RowMatrix rows(a.n_spectra() + b.n_spectra(), a.n_bins());
  rows.topRows(a.n_spectra()) = a.rows();
  rows.bottomRows(b.n_spectra()) = b.rows();
  Labels labels = a.labels();
  labels.insert(labels.end(), b.labels().begin(), b.labels().end());
  return SpectraDataset(a.grid(), std::move(rows), std::move(labels), a.class_names(), a.provenance());
}

int thread_count(const ExperimentPlan& plan) { return plan.threads > 0 ? plan.threads : worker_count(); }

std::ofstream open_out(const std::filesystem::path& path) {
  std::ofstream out(path);
  if (!out) throw DataError("cannot write " + path.string());
  return out;
}

// Keeps file names portable for labels such as "MHCNN+aug".
std::string file_label(const std::string& label) {
  std::string s = label;
  for (char& c : s)
    if (c == '+') c = '_';
  return s;
}

}  // namespace

std::vector<double> default_noise_levels() { return {0.0, 0.01, 0.02, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50}; }

// ---- model identities -----------------------------------------------------------

int model_id(const std::string& name) {
  static const std::vector<std::string> names{"knn", "dtree", "rforest", "gnb", "svm", "FC", "CNN", "FullCNN", "MHCNN"};
  auto it = std::find(names.begin(), names.end(), name);
  if (it == names.end()) throw DataError("unknown model '" + name + "'");
  return static_cast<int>(it - names.begin());
}

Hyperparams ml_hyperparams(ModelKind kind, const Hyperparams& overrides) {
  Hyperparams hp = default_hyperparams(kind);
  for (const auto& [k, v] : overrides) hp[k] = v;
  return hp;
}

nn::TrainConfig network_config(const std::string& model, const Hyperparams& overrides, int epochs,
                               std::uint64_t seed) {
  if (!nn::is_model_name(model)) throw DataError("unknown network '" + model + "'");
  const NetSettings s = net_settings(model, overrides);
  nn::TrainConfig cfg;
  cfg.batch_size = s.batch_size;
  cfg.epochs = epochs;
  cfg.seed = seed;
  cfg.adam.lr = s.lr;
  cfg.validate();
  return cfg;
}

bool is_known_model(const std::string& name) { return is_ml_kind(name) || nn::is_model_name(name); }

RunSeeds run_seeds(std::uint64_t master, const std::string& model, double level, int repetition) {
  const auto rep = static_cast<std::uint64_t>(repetition);
  const auto lv = level_key(level);
  const auto id = static_cast<std::uint64_t>(model_id(model));
  return {derive_seed(master, {kSplit, rep}), derive_seed(master, {kNoise, lv, rep}),
          derive_seed(master, {kAugment, lv, rep}), derive_seed(master, {kModel, id, lv, rep})};
}

// ---- plan ---------------------------------------------------------------------------

void ExperimentPlan::validate() const {
  const int sources = !dataset.preset.empty() + !dataset.config.empty() + !dataset.file.empty();
  if (sources != 1) throw DataError("dataset needs exactly one of preset, config or file");
  if (!dataset.preset.empty()) {
    const auto names = preset_names();
    if (std::find(names.begin(), names.end(), dataset.preset) == names.end())
      throw DataError("unknown preset '" + dataset.preset + "'");
  }
  if (dataset.max_per_class < 0) throw DataError("max_per_class must be >= 0");
  if (models.empty()) throw DataError("plan lists no models");
  std::set<std::string> seen;
  for (const auto& m : models) {
    if (!is_known_model(m)) throw DataError("unknown model '" + m + "'");
    if (!seen.insert(m).second) throw DataError("model '" + m + "' listed twice");
  }
  if (noise_levels.empty()) throw DataError("plan lists no noise levels");
  std::set<std::uint64_t> levels;
  for (double l : noise_levels) {
    if (!in_noise_range(l)) throw DataError("noise level " + format_double(l) + " outside [0, 0.5]");
    if (!levels.insert(level_key(l)).second) throw DataError("noise level " + format_double(l) + " listed twice");
  }
  if (repetitions < 1) throw DataError("repetitions must be >= 1");
  if (epochs < 1) throw DataError("epochs must be >= 1");
  if (threads < 0) throw DataError("threads must be >= 0");
  if (split.size() != 2 && split.size() != 3) throw DataError("split needs 2 or 3 fractions");
  double total = 0;
  for (double f : split) {
    if (!(f > 0.0)) throw DataError("split fractions must be positive");
    total += f;
  }
  if (std::abs(total - 1.0) > 1e-9) throw DataError("split fractions must sum to 1");
  if (augment) {
    if (!in_noise_range(augment->noise)) throw DataError("augment noise outside [0, 0.5]");
    if (!(augment->shift >= 0.0 && augment->shift <= kMaxShift)) throw DataError("augment shift outside [0, 30]");
  }
  if (!in_noise_range(stability_noise)) throw DataError("stability noise outside [0, 0.5]");
  for (const auto& [model, hp] : hyperparams) {
    if (!is_known_model(model)) throw DataError("hyperparameters given for unknown model '" + model + "'");
    if (is_ml_kind(model))
      MlModel(parse_model_kind(model), ml_hyperparams(parse_model_kind(model), hp));
    else
      net_settings(model, hp);
  }
}

ExperimentPlan plan_from_json(const nlohmann::json& j) {
  try {
    check_keys(j,
               {"dataset", "models", "noise_levels", "repetitions", "augment", "split", "master_seed", "epochs",
                "test_only_noise", "stability_noise", "hyperparams", "threads"},
               "plan");
    ExperimentPlan p;
    const auto& ds = j.at("dataset");
    check_keys(ds, {"preset", "config", "file", "seed", "max_per_class"}, "dataset");
    p.dataset.preset = ds.value("preset", "");
    p.dataset.config = ds.value("config", "");
    p.dataset.file = ds.value("file", "");
    if (ds.contains("seed")) p.dataset.seed = ds.at("seed").get<std::uint64_t>();
    p.dataset.max_per_class = ds.value("max_per_class", 0);
    p.models = j.at("models").get<std::vector<std::string>>();
    if (j.contains("noise_levels")) p.noise_levels = j.at("noise_levels").get<std::vector<double>>();
    p.repetitions = j.value("repetitions", 1);
    if (j.contains("augment") && !j.at("augment").is_null()) {
      const auto& a = j.at("augment");
      check_keys(a, {"noise", "shift", "mode"}, "augment");
      AugmentSpec spec;
      spec.noise = a.value("noise", spec.noise);
      spec.shift = a.value("shift", spec.shift);
      if (a.contains("mode")) spec.mode = parse_mode(a.at("mode").get<std::string>());
      p.augment = spec;
    }
    if (j.contains("split")) {
      const auto& s = j.at("split");
      p.split = s.is_string() ? parse_split(s.get<std::string>()) : s.get<std::vector<double>>();
    }
    p.master_seed = j.value("master_seed", std::uint64_t{0});
    p.epochs = j.value("epochs", 30);
    p.test_only_noise = j.value("test_only_noise", false);
    p.stability_noise = j.value("stability_noise", 0.0);
    if (j.contains("hyperparams")) {
      const auto& h = j.at("hyperparams");
      if (!h.is_object()) throw DataError("hyperparams must be a JSON object");
      for (const auto& [model, params] : h.items()) {
        if (!params.is_object()) throw DataError("hyperparams of " + model + " must be a JSON object");
        Hyperparams hp;
        for (const auto& [key, value] : params.items()) hp[key] = hyper_value(value);
        p.hyperparams[model] = std::move(hp);
      }
    }
    p.threads = j.value("threads", 0);
    p.validate();
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed plan: ") + e.what());
  }
}

nlohmann::json to_json(const ExperimentPlan& p) {
  nlohmann::json ds = nlohmann::json::object();
  if (!p.dataset.preset.empty()) ds["preset"] = p.dataset.preset;
  if (!p.dataset.config.empty()) ds["config"] = p.dataset.config;
  if (!p.dataset.file.empty()) ds["file"] = p.dataset.file;
  if (p.dataset.seed) ds["seed"] = *p.dataset.seed;
  if (p.dataset.max_per_class > 0) ds["max_per_class"] = p.dataset.max_per_class;
  nlohmann::json j{{"dataset", ds},
                   {"models", p.models},
                   {"noise_levels", p.noise_levels},
                   {"repetitions", p.repetitions},
                   {"split", p.split},
                   {"master_seed", p.master_seed},
                   {"epochs", p.epochs},
                   {"test_only_noise", p.test_only_noise},
                   {"stability_noise", p.stability_noise},
                   {"hyperparams", p.hyperparams},
                   {"threads", p.threads}};
  if (p.augment)
    j["augment"] = {{"noise", p.augment->noise}, {"shift", p.augment->shift}, {"mode", mode_name(p.augment->mode)}};
  return j;
}

ExperimentPlan load_plan(const std::filesystem::path& path) {
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(read_text(path));
  } catch (const nlohmann::json::exception& e) {
    throw DataError("malformed plan " + path.string() + ": " + e.what());
  }
  ExperimentPlan p = plan_from_json(j);
  const auto base = path.parent_path();
  auto resolve = [&](std::string& f) {
    if (!f.empty() && std::filesystem::path(f).is_relative()) f = (base / f).string();
  };
  resolve(p.dataset.config);
  resolve(p.dataset.file);
  return p;
}

SpectraDataset load_plan_dataset(const ExperimentPlan& plan) {
  plan.validate();
  const std::uint64_t seed = plan.dataset.seed.value_or(derive_seed(plan.master_seed, {kData}));
  SpectraDataset d = [&] {
    if (!plan.dataset.preset.empty()) return prepared_preset(plan.dataset.preset, seed);
    if (!plan.dataset.config.empty()) {
      nlohmann::json j;
      try {
        j = nlohmann::json::parse(read_text(plan.dataset.config));
      } catch (const nlohmann::json::exception& e) {
        throw DataError("malformed generator config " + plan.dataset.config + ": " + e.what());
      }
      return prepared_dataset(generator_config_from_json(j), seed);
    }
    return ensure_standard(read_dataset_csv(std::filesystem::path(plan.dataset.file)));
  }();
  if (plan.dataset.max_per_class > 0)
    d = subsample_per_class(d, plan.dataset.max_per_class, derive_seed(plan.master_seed, {kSubsample}));
  require_two_classes(d);
  return d;
}

// ---- single run -----------------------------------------------------------------------

RunOutcome run_single(const ExperimentPlan& plan, const SpectraDataset& d, const std::string& model, double level,
                      int repetition, bool augmented) {
  RunOutcome out;
  try {
    const RunSeeds seeds = run_seeds(plan.master_seed, model, level, repetition);
    SplitIndices split = stratified_split(d, plan.split, seeds.split);
    // Rows enter training in dataset order, as in a direct nn::train call.
    std::sort(split.train.begin(), split.train.end());
    std::sort(split.val.begin(), split.val.end());
    const SpectraDataset noisy = add_noise_dataset(d, NoiseSpec{level}, seeds.noise);
    const SpectraDataset& fit_source = plan.test_only_noise ? d : noisy;
    SpectraDataset train_set = fit_source.subset(split.train);
    if (augmented) {
      if (!plan.augment) throw DataError("augmented run requested without an augment spec");
      Rng rng(seeds.augment);
      train_set = augment_dataset(train_set, NoiseSpec{plan.augment->noise}, plan.augment->shift, rng,
                                  plan.augment->mode);
    }
    const SpectraDataset test_set = noisy.subset(split.test);
    const int k = d.n_classes();

    Labels pred;
    if (is_ml_kind(model)) {
      const ModelKind kind = parse_model_kind(model);
      MlModel m(kind, ml_hyperparams(kind, overrides(plan, model)), seeds.model);
      m.fit(train_set.rows(), train_set.labels(), k);
      pred = m.predict(test_set.rows());
    } else {
      const nn::TrainConfig cfg = network_config(model, overrides(plan, model), plan.epochs, seeds.model);
      SplitIndices fit_split;
      fit_split.train.resize(static_cast<std::size_t>(train_set.n_spectra()));
      std::iota(fit_split.train.begin(), fit_split.train.end(), 0);
      SpectraDataset fit_data = train_set;
      if (!split.val.empty()) {
        fit_data = stack(train_set, fit_source.subset(split.val));
        fit_split.val.resize(split.val.size());
        std::iota(fit_split.val.begin(), fit_split.val.end(), static_cast<int>(train_set.n_spectra()));
      }
      const nn::TrainedModel tm = nn::train(nn::build_model(model, k), fit_data, fit_split, cfg);
      out.history = tm.history;
      pred = nn::predict(tm, test_set.rows()).labels;
    }
    out.report = evaluate(pred, test_set.labels(), k, seeds.model, model, level);
    out.accuracy = out.report->accuracy();
  } catch (const std::exception& e) {
    out.accuracy = kNaN;
    out.error = e.what();
    out.report.reset();
  }
  return out;
}

// ---- noise sweep ---------------------------------------------------------------------

Aggregate aggregate(std::span<const double> values) {
  Aggregate a;
  double sum = 0;
  for (double v : values)
    if (std::isfinite(v)) {
      sum += v;
      ++a.n;
    }
  if (a.n == 0) {
    a.mean = kNaN;
    a.std = kNaN;
    return a;
  }
  a.mean = sum / a.n;
  double ss = 0;
  for (double v : values)
    if (std::isfinite(v)) ss += (v - a.mean) * (v - a.mean);
  a.std = std::sqrt(ss / a.n);
  return a;
}

const SweepCell& SweepResult::at(const std::string& model, double level) const {
  for (const auto& c : cells)
    if (c.model == model && level_key(c.level) == level_key(level)) return c;
  throw DataError("no sweep cell for " + model + " at level " + format_double(level));
}

SweepResult run_noise_sweep(const ExperimentPlan& plan, const SpectraDataset& d) {
  plan.validate();
  require_two_classes(d);
  const std::size_t n_levels = plan.noise_levels.size();
  const auto reps = static_cast<std::size_t>(plan.repetitions);
  const std::size_t n_cells = plan.models.size() * n_levels;
  std::vector<RunOutcome> runs(n_cells * reps);
  const bool augmented = plan.augment.has_value();
  parallel_for(runs.size(), thread_count(plan), [&](std::size_t i) {
    const std::size_t cell = i / reps;
    const auto rep = static_cast<int>(i % reps);
    runs[i] = run_single(plan, d, plan.models[cell / n_levels], plan.noise_levels[cell % n_levels], rep, augmented);
  });

  SweepResult r;
  for (std::size_t cell = 0; cell < n_cells; ++cell) {
    SweepCell c;
    c.model = plan.models[cell / n_levels];
    c.level = plan.noise_levels[cell % n_levels];
    for (std::size_t rep = 0; rep < reps; ++rep) {
      const RunOutcome& run = runs[cell * reps + rep];
      c.accuracies.push_back(run.accuracy);
      c.errors.push_back(run.error);
    }
    const Aggregate a = aggregate(c.accuracies);
    if (a.n == 0)
      throw NumericalError("all runs failed for " + c.model + " at noise " + format_double(c.level) + ": " +
                           c.errors.front());
    c.mean = a.mean;
    c.std = a.std;
    c.n = a.n;
    r.cells.push_back(std::move(c));
  }
  return r;
}

SweepResult run_noise_sweep(const ExperimentPlan& plan) { return run_noise_sweep(plan, load_plan_dataset(plan)); }

// ---- stability study -----------------------------------------------------------------

std::array<int, 3> accuracy_histogram(std::span<const double> accuracies) {
  std::array<int, 3> h{};
  for (double a : accuracies) {
    if (!std::isfinite(a)) continue;
    if (a < kStabilityEdges[1])
      ++h[0];
    else if (a < kStabilityEdges[2])
      ++h[1];
    else
      ++h[2];
  }
  return h;
}

double fraction_below(std::span<const double> accuracies, double threshold) {
  int n = 0;
  int below = 0;
  for (double a : accuracies) {
    if (!std::isfinite(a)) continue;
    ++n;
    if (a < threshold) ++below;
  }
  return n == 0 ? kNaN : static_cast<double>(below) / n;
}

const StabilitySeries& StabilityResult::at(const std::string& label) const {
  for (const auto& s : series)
    if (s.label == label) return s;
  throw DataError("no stability series '" + label + "'");
}

StabilityResult run_stability_study(const ExperimentPlan& plan, const SpectraDataset& d) {
  plan.validate();
  require_two_classes(d);
  StabilityResult r;
  for (const auto& m : plan.models) {
    StabilitySeries s;
    s.label = m;
    s.model = m;
    r.series.push_back(s);
    if (plan.augment) {
      s.label = m + "+aug";
      s.augmented = true;
      r.series.push_back(s);
    }
  }
  if (plan.repetitions < kFullScaleStabilityRuns)
    r.warnings.push_back("stability study with " + std::to_string(plan.repetitions) + " repetitions; at least " +
                         std::to_string(kFullScaleStabilityRuns) + " give the full-scale distribution");

  const auto reps = static_cast<std::size_t>(plan.repetitions);
  std::vector<RunOutcome> runs(r.series.size() * reps);
  parallel_for(runs.size(), thread_count(plan), [&](std::size_t i) {
    const StabilitySeries& s = r.series[i / reps];
    runs[i] = run_single(plan, d, s.model, plan.stability_noise, static_cast<int>(i % reps), s.augmented);
  });

  for (std::size_t k = 0; k < r.series.size(); ++k) {
    StabilitySeries& s = r.series[k];
    const bool network = nn::is_model_name(s.model);
    for (std::size_t rep = 0; rep < reps; ++rep) {
      RunOutcome& run = runs[k * reps + rep];
      s.accuracies.push_back(run.accuracy);
      s.errors.push_back(run.error);
      if (network) s.histories.push_back(std::move(run.history));
    }
    if (aggregate(s.accuracies).n == 0)
      throw NumericalError("all stability runs failed for " + s.label + ": " + s.errors.front());
    s.histogram = accuracy_histogram(s.accuracies);
  }
  return r;
}

StabilityResult run_stability_study(const ExperimentPlan& plan) {
  return run_stability_study(plan, load_plan_dataset(plan));
}

// ---- confusion -----------------------------------------------------------------------

EvalReport run_confusion(const ExperimentPlan& plan, const SpectraDataset& d, const std::string& model) {
  plan.validate();
  require_two_classes(d);
  if (!is_known_model(model)) throw DataError("unknown model '" + model + "'");
  RunOutcome run = run_single(plan, d, model, plan.noise_levels.front(), 0, plan.augment.has_value());
  if (!run.report) throw NumericalError(model + " run failed: " + run.error);
  return *run.report;
}

// ---- outputs -------------------------------------------------------------------------

void write_sweep_csv(const SweepResult& r, std::ostream& out) {
  out << "model,level,mean,std,n\n";
  for (const auto& c : r.cells)
    out << c.model << ',' << format_double(c.level) << ',' << format_double(c.mean) << ',' << format_double(c.std)
        << ',' << c.n << '\n';
}

void write_sweep_runs_csv(const SweepResult& r, std::ostream& out) {
  out << "model,level,rep,accuracy,error\n";
  for (const auto& c : r.cells)
    for (std::size_t rep = 0; rep < c.accuracies.size(); ++rep) {
      std::string err = c.errors[rep];
      std::replace(err.begin(), err.end(), ',', ';');
      std::replace(err.begin(), err.end(), '\n', ' ');
      out << c.model << ',' << format_double(c.level) << ',' << rep << ',' << format_double(c.accuracies[rep]) << ','
          << err << '\n';
    }
}

void write_stability_csv(const StabilityResult& r, std::ostream& out) {
  out << "model,rep,accuracy\n";
  for (const auto& s : r.series)
    for (std::size_t rep = 0; rep < s.accuracies.size(); ++rep)
      out << s.label << ',' << rep << ',' << format_double(s.accuracies[rep]) << '\n';
}

void write_stability_histogram_csv(const StabilityResult& r, std::ostream& out) {
  static const char* bins[] = {"[0,0.8)", "[0.8,0.9)", "[0.9,1]"};
  out << "model,bin,count\n";
  for (const auto& s : r.series)
    for (std::size_t b = 0; b < 3; ++b) out << s.label << ',' << bins[b] << ',' << s.histogram[b] << '\n';
}

void write_sweep_outputs(const SweepResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto sweep = open_out(dir / "sweep.csv");
  write_sweep_csv(r, sweep);
  auto runs = open_out(dir / "sweep_runs.csv");
  write_sweep_runs_csv(r, runs);
}

void write_stability_outputs(const StabilityResult& r, const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto acc = open_out(dir / "stability.csv");
  write_stability_csv(r, acc);
  auto hist = open_out(dir / "stability_histogram.csv");
  write_stability_histogram_csv(r, hist);
  for (const auto& s : r.series)
    for (std::size_t rep = 0; rep < s.histories.size(); ++rep) {
      auto h = open_out(dir / ("history_" + file_label(s.label) + "_" + std::to_string(rep) + ".csv"));
      nn::write_history_csv(s.histories[rep], h);
    }
}

void write_confusion_outputs(const EvalReport& r, const std::vector<std::string>& class_names,
                             const std::filesystem::path& dir) {
  std::filesystem::create_directories(dir);
  auto csv = open_out(dir / ("confusion_" + r.model_name() + ".csv"));
  write_confusion_csv(r, class_names, csv);
  auto json = open_out(dir / ("confusion_" + r.model_name() + ".json"));
  json << to_json(r).dump(2) << '\n';
}

}  // namespace specbench
