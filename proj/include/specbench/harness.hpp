#pragma once

#include <array>
#include <cstdint>
#include <filesystem>
#include <iosfwd>
#include <map>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include <json.hpp>

#include "specbench/core.hpp"
#include "specbench/mlkit.hpp"
#include "specbench/neural.hpp"
#include "specbench/spectragen.hpp"

namespace specbench {

/// Where a plan's spectra come from. Exactly one of preset, config, file.
struct DatasetSource {
  std::string preset;  // built-in generator preset
  std::string config;  // generator JSON file
  std::string file;    // dataset CSV; prepared to the standard grid if needed
  std::optional<std::uint64_t> seed;  // generation seed, default derived from the master seed
  int max_per_class = 0;              // keep at most this many rows per class, 0 = all
};

struct AugmentSpec {
  double noise = 0.05;
  double shift = 30.0;
  AugmentMode mode = AugmentMode::append;
};

std::vector<double> default_noise_levels();

struct ExperimentPlan {
  DatasetSource dataset;
  std::vector<std::string> models;
  std::vector<double> noise_levels = default_noise_levels();
  int repetitions = 1;
  std::optional<AugmentSpec> augment;
  std::vector<double> split{0.8, 0.2};
  std::uint64_t master_seed = 0;
  int epochs = 30;
  bool test_only_noise = false;
  double stability_noise = 0.0;
  /// Per-model overrides. ML kinds take mlkit keys; networks take
  /// batch_size and lr.
  std::map<std::string, Hyperparams> hyperparams;
  int threads = 0;  // 0: worker_count()

  void validate() const;
};

ExperimentPlan plan_from_json(const nlohmann::json& j);
nlohmann::json to_json(const ExperimentPlan& p);
/// Reads a plan file; relative dataset paths resolve against its directory.
ExperimentPlan load_plan(const std::filesystem::path& path);

/// Builds, loads or generates the plan's dataset, prepared on the standard
/// grid. Errors when fewer than two classes have rows.
SpectraDataset load_plan_dataset(const ExperimentPlan& plan);

/// Stable small integer per known model name, used in seed paths.
int model_id(const std::string& name);
bool is_known_model(const std::string& name);

/// default_hyperparams(kind) with `overrides` applied on top.
Hyperparams ml_hyperparams(ModelKind kind, const Hyperparams& overrides);
/// Training settings for a network; `overrides` may set batch_size and lr.
nn::TrainConfig network_config(const std::string& model, const Hyperparams& overrides, int epochs,
                               std::uint64_t seed);

/// Random streams of one run. Split and noise are shared by every model at
/// the same repetition so that model comparisons are paired.
struct RunSeeds {
  std::uint64_t split;
  std::uint64_t noise;
  std::uint64_t augment;
  std::uint64_t model;
};
RunSeeds run_seeds(std::uint64_t master, const std::string& model, double level, int repetition);

struct RunOutcome {
  double accuracy = 0.0;  // NaN when the run failed
  std::string error;
  std::optional<EvalReport> report;
  nn::History history;  // networks only
};

/// split -> noise at `level` -> optional augmentation of the training part
/// -> fit -> evaluate on the test part. Never throws for run-level failures.
RunOutcome run_single(const ExperimentPlan& plan, const SpectraDataset& d, const std::string& model, double level,
                      int repetition, bool augmented);

// ---- noise sweep ------------------------------------------------------------

struct SweepCell {
  std::string model;
  double level = 0.0;
  std::vector<double> accuracies;  // one per repetition, NaN for failures
  std::vector<std::string> errors;
  double mean = 0.0;  // over successful runs
  double std = 0.0;   // population standard deviation over successful runs
  int n = 0;          // successful runs
};

struct SweepResult {
  std::vector<SweepCell> cells;  // model-major, levels in plan order
  const SweepCell& at(const std::string& model, double level) const;
};

/// Mean and population standard deviation of the finite entries, and their count.
struct Aggregate {
  double mean = 0.0;
  double std = 0.0;
  int n = 0;
};
Aggregate aggregate(std::span<const double> values);

/// Throws NumericalError when every run of some cell failed.
SweepResult run_noise_sweep(const ExperimentPlan& plan, const SpectraDataset& d);
SweepResult run_noise_sweep(const ExperimentPlan& plan);

// ---- stability study --------------------------------------------------------

/// Histogram edges [0, 0.8), [0.8, 0.9), [0.9, 1.0].
inline constexpr std::array<double, 4> kStabilityEdges{0.0, 0.8, 0.9, 1.0};
std::array<int, 3> accuracy_histogram(std::span<const double> accuracies);
/// Fraction of finite accuracies strictly below `threshold`.
double fraction_below(std::span<const double> accuracies, double threshold);

struct StabilitySeries {
  std::string label;  // model, or model + "+aug"
  std::string model;
  bool augmented = false;
  std::vector<double> accuracies;
  std::vector<std::string> errors;
  std::vector<nn::History> histories;  // networks only, one per repetition
  std::array<int, 3> histogram{};
};

struct StabilityResult {
  std::vector<StabilitySeries> series;  // per model: plain, then augmented when the plan augments
  std::vector<std::string> warnings;
  const StabilitySeries& at(const std::string& label) const;
};

/// Independent reshuffles and initialisations at the plan's stability noise
/// level. With plan.augment set every model also gets an augmented series
/// over the same splits and initialisations. Fewer than 400 repetitions
/// add a warning.
StabilityResult run_stability_study(const ExperimentPlan& plan, const SpectraDataset& d);
StabilityResult run_stability_study(const ExperimentPlan& plan);

// ---- confusion --------------------------------------------------------------

/// One run (repetition 0) of `model` at the first plan noise level.
EvalReport run_confusion(const ExperimentPlan& plan, const SpectraDataset& d, const std::string& model);

// ---- outputs ----------------------------------------------------------------

void write_sweep_csv(const SweepResult& r, std::ostream& out);       // model,level,mean,std,n
void write_sweep_runs_csv(const SweepResult& r, std::ostream& out);  // model,level,rep,accuracy,error
void write_stability_csv(const StabilityResult& r, std::ostream& out);            // model,rep,accuracy
void write_stability_histogram_csv(const StabilityResult& r, std::ostream& out);  // model,bin,count

/// Writes sweep.csv and sweep_runs.csv into `dir`.
void write_sweep_outputs(const SweepResult& r, const std::filesystem::path& dir);
/// Writes stability.csv, stability_histogram.csv and history_<label>_<rep>.csv.
void write_stability_outputs(const StabilityResult& r, const std::filesystem::path& dir);
/// Writes confusion_<model>.csv and confusion_<model>.json.
void write_confusion_outputs(const EvalReport& r, const std::vector<std::string>& class_names,
                             const std::filesystem::path& dir);

}  // namespace specbench
