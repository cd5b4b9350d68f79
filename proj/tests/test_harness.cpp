#include <doctest.h>

#include <cmath>
#include <filesystem>
#include <fstream>
#include <limits>
#include <numeric>
#include <sstream>
#include <unordered_set>

#include "specbench/harness.hpp"
#include "specbench/io.hpp"

using namespace specbench;

namespace {

constexpr double kNaN = std::numeric_limits<double>::quiet_NaN();

ExperimentPlan small_plan() {
  ExperimentPlan p;
  p.dataset.preset = "charge_mimic";
  p.dataset.seed = 5;
  p.dataset.max_per_class = 15;
  p.models = {"knn", "gnb"};
  p.noise_levels = {0.0, 0.1};
  p.repetitions = 2;
  p.master_seed = 11;
  p.epochs = 2;
  p.threads = 1;
  return p;
}

const SpectraDataset& small_data() {
  static const SpectraDataset d = load_plan_dataset(small_plan());
  return d;
}

std::string sweep_text(const SweepResult& r) {
  std::ostringstream a;
  write_sweep_csv(r, a);
  write_sweep_runs_csv(r, a);
  return a.str();
}

// Four classes of constant spectra at well separated levels.
SpectraDataset separable(int per_class) {
  const int k = 4;
  RowMatrix rows(per_class * k, kStandardBins);
  Labels labels;
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < per_class; ++i) {
      rows.row(c * per_class + i).setConstant(0.2 * c + 0.001 * i);
      labels.push_back(c);
    }
  return SpectraDataset(standard_grid(), rows, labels, {"a", "b", "c", "d"});
}

std::filesystem::path scratch_dir(const std::string& name) {
  auto dir = std::filesystem::temp_directory_path() / ("specbench_harness_" + name);
  std::filesystem::remove_all(dir);
  return dir;
}

int count_lines(const std::filesystem::path& p) {
  std::ifstream in(p);
  std::string line;
  int n = 0;
  while (std::getline(in, line)) ++n;
  return n;
}

}  // namespace

TEST_CASE("derive_seed separates paths differing in one index") {
  Rng rng(2024);
  int collisions = 0;
  for (int probe = 0; probe < 1'000'000; ++probe) {
    const std::uint64_t master = rng();
    std::array<std::uint64_t, 3> a{rng() % 1000, rng() % 1000, rng() % 1000};
    auto b = a;
    const auto slot = rng() % 3;
    b[slot] = (b[slot] + 1 + rng() % 999) % 1000;
    collisions += derive_seed(master, a) == derive_seed(master, b);
  }
  CHECK(collisions == 0);
  CHECK(derive_seed(3, {1, 2}) == derive_seed(3, {1, 2}));
  CHECK(derive_seed(3, {1, 2}) != derive_seed(3, {2, 1}));
}

TEST_CASE("run seeds") {
  const RunSeeds a = run_seeds(7, "knn", 0.1, 3);
  const RunSeeds b = run_seeds(7, "CNN", 0.1, 3);
  CHECK(a.split == b.split);
  CHECK(a.noise == b.noise);
  CHECK(a.model != b.model);
  CHECK(run_seeds(7, "knn", 0.1, 4).split != a.split);
  CHECK(run_seeds(7, "knn", 0.2, 3).noise != a.noise);
  CHECK(run_seeds(8, "knn", 0.1, 3).model != a.model);
  CHECK(model_id("knn") == 0);
  CHECK(model_id("MHCNN") == 8);
  CHECK_THROWS_AS(model_id("lstm"), DataError);
}

TEST_CASE("plan validation and json") {
  ExperimentPlan p = small_plan();
  CHECK_NOTHROW(p.validate());
  CHECK(ExperimentPlan{}.noise_levels == std::vector<double>{0.0, 0.01, 0.02, 0.05, 0.10, 0.20, 0.30, 0.40, 0.50});

  p.augment = AugmentSpec{0.05, 30.0, AugmentMode::replace};
  p.hyperparams["svm"] = {{"C", "3"}};
  p.hyperparams["CNN"] = {{"batch_size", "16"}};
  const ExperimentPlan q = plan_from_json(to_json(p));
  CHECK(to_json(q) == to_json(p));
  CHECK(q.augment->mode == AugmentMode::replace);
  CHECK(q.dataset.max_per_class == 15);

  auto bad = [](auto mutate) {
    ExperimentPlan b = small_plan();
    mutate(b);
    return b;
  };
  CHECK_THROWS_AS(bad([](auto& b) { b.repetitions = 0; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.noise_levels = {0.6}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.noise_levels = {-0.01}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.models = {"knn", "knn"}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.models = {"lstm"}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.models.clear(); }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.split = {0.7, 0.2}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.dataset.file = "x.csv"; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.augment = AugmentSpec{0.05, 31.0}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.hyperparams["knn"] = {{"depth", "3"}}; }).validate(), DataError);
  CHECK_THROWS_AS(bad([](auto& b) { b.hyperparams["FC"] = {{"lr", "-1"}}; }).validate(), DataError);

  nlohmann::json j = to_json(small_plan());
  j["repetitons"] = 3;
  CHECK_THROWS_AS(plan_from_json(j), DataError);
  j = to_json(small_plan());
  j["split"] = "60/20/20";
  CHECK(plan_from_json(j).split.size() == 3);
  j["hyperparams"] = {{"knn", {{"k", 3}}}};
  CHECK(plan_from_json(j).hyperparams.at("knn").at("k") == "3");
}

TEST_CASE("plan files resolve datasets next to the plan") {
  const auto dir = scratch_dir("plan");
  std::filesystem::create_directories(dir);
  write_dataset_csv(separable(6), dir / "toy.csv");
  write_text(dir / "plan.json", R"({"dataset": {"file": "toy.csv"}, "models": ["knn"], "noise_levels": [0],
                                     "repetitions": 1, "master_seed": 1})");
  const ExperimentPlan p = load_plan(dir / "plan.json");
  CHECK(std::filesystem::path(p.dataset.file) == dir / "toy.csv");
  const SpectraDataset d = load_plan_dataset(p);
  CHECK(d.n_spectra() == 24);
  CHECK(d.rows() == separable(6).rows());
  write_text(dir / "broken.json", "{\"dataset\": ");
  CHECK_THROWS_AS(load_plan(dir / "broken.json"), DataError);
}

TEST_CASE("plan dataset subsampling") {
  const SpectraDataset& d = small_data();
  CHECK(d.n_spectra() == 60);
  CHECK(d.class_counts() == std::vector<int>{15, 15, 15, 15});
  CHECK(d.n_bins() == kStandardBins);
  CHECK(load_plan_dataset(small_plan()).rows() == d.rows());
}

TEST_CASE("aggregate") {
  const std::vector<double> v{0.5, kNaN, 0.7, 0.9};
  const Aggregate a = aggregate(v);
  CHECK(a.n == 3);
  CHECK(a.mean == doctest::Approx(0.7).epsilon(1e-15));
  CHECK(a.std == doctest::Approx(std::sqrt(0.08 / 3)).epsilon(1e-14));
  const Aggregate none = aggregate(std::vector<double>{kNaN});
  CHECK(none.n == 0);
  CHECK(std::isnan(none.mean));
}

TEST_CASE("noise sweep shape and aggregates") {
  ExperimentPlan p = small_plan();
  p.repetitions = 3;
  const SweepResult r = run_noise_sweep(p, small_data());
  REQUIRE(r.cells.size() == 4);
  CHECK(r.cells[0].model == "knn");
  CHECK(r.cells[1].level == 0.1);
  CHECK(r.cells[2].model == "gnb");
  for (const auto& c : r.cells) {
    CHECK(c.n == 3);
    CHECK(c.accuracies.size() == 3);
    CHECK(c.std >= 0.0);
    CHECK(c.mean >= 0.0);
    CHECK(c.mean <= 1.0);
    const double mean = std::accumulate(c.accuracies.begin(), c.accuracies.end(), 0.0) / 3;
    double ss = 0;
    for (double a : c.accuracies) ss += (a - mean) * (a - mean);
    CHECK(std::abs(c.mean - mean) <= 1e-12);
    CHECK(std::abs(c.std - std::sqrt(ss / 3)) <= 1e-12);
    for (const auto& e : c.errors) CHECK(e.empty());
  }
  CHECK(&r.at("gnb", 0.1) == &r.cells[3]);
  CHECK_THROWS_AS(r.at("svm", 0.1), DataError);
}

TEST_CASE("noise sweep is reproducible, order free and thread free") {
  const ExperimentPlan p = small_plan();
  const SweepResult base = run_noise_sweep(p, small_data());
  CHECK(sweep_text(run_noise_sweep(p, small_data())) == sweep_text(base));

  ExperimentPlan par = p;
  par.threads = 4;
  CHECK(sweep_text(run_noise_sweep(par, small_data())) == sweep_text(base));

  ExperimentPlan swapped = p;
  swapped.models = {"gnb", "knn"};
  swapped.noise_levels = {0.1, 0.0};
  const SweepResult s = run_noise_sweep(swapped, small_data());
  for (const auto& c : base.cells) CHECK(s.at(c.model, c.level).accuracies == c.accuracies);

  ExperimentPlan alone = p;
  alone.models = {"gnb"};
  CHECK(run_noise_sweep(alone, small_data()).at("gnb", 0.1).accuracies == base.at("gnb", 0.1).accuracies);

  ExperimentPlan other = p;
  other.master_seed = 12;
  CHECK(sweep_text(run_noise_sweep(other, small_data())) != sweep_text(base));
}

TEST_CASE("one repetition at level 0 equals a direct fit") {
  ExperimentPlan p = small_plan();
  p.models = {"knn", "FC"};
  p.noise_levels = {0.0};
  p.repetitions = 1;
  const SpectraDataset& d = small_data();
  const SweepResult r = run_noise_sweep(p, d);

  const RunSeeds ks = run_seeds(p.master_seed, "knn", 0.0, 0);
  SplitIndices split = stratified_split(d, p.split, ks.split);
  std::sort(split.train.begin(), split.train.end());
  const SpectraDataset train = d.subset(split.train);
  const SpectraDataset test = d.subset(split.test);
  MlModel knn(ModelKind::knn, default_hyperparams(ModelKind::knn), ks.model);
  knn.fit(train.rows(), train.labels(), 4);
  CHECK(r.at("knn", 0.0).accuracies[0] == evaluate(knn.predict(test.rows()), test.labels(), 4).accuracy());

  const RunSeeds fs = run_seeds(p.master_seed, "FC", 0.0, 0);
  nn::TrainConfig cfg;
  cfg.epochs = p.epochs;
  cfg.batch_size = nn::default_batch_size("FC");
  cfg.seed = fs.model;
  const nn::TrainedModel m = nn::train(nn::build_model("FC", 4), d, split, cfg);
  CHECK(r.at("FC", 0.0).accuracies[0] ==
        evaluate(nn::predict(m, test.rows()).labels, test.labels(), 4).accuracy());

  const RunOutcome single = run_single(p, d, "knn", 0.0, 0, false);
  REQUIRE(single.report);
  CHECK(single.report->seed() == ks.model);
  CHECK(single.report->model_name() == "knn");
  CHECK(single.report->n_test() == static_cast<int>(split.test.size()));
}

TEST_CASE("noise placement") {
  ExperimentPlan p = small_plan();
  p.models = {"knn"};
  p.noise_levels = {0.0, 0.3};
  ExperimentPlan test_only = p;
  test_only.test_only_noise = true;
  const SweepResult both = run_noise_sweep(p, small_data());
  const SweepResult transfer = run_noise_sweep(test_only, small_data());
  CHECK(both.at("knn", 0.0).accuracies == transfer.at("knn", 0.0).accuracies);
  CHECK(both.at("knn", 0.3).accuracies != transfer.at("knn", 0.3).accuracies);
}

TEST_CASE("augmented sweeps differ from plain ones") {
  ExperimentPlan p = small_plan();
  p.models = {"knn"};
  p.noise_levels = {0.0};
  p.repetitions = 3;
  const SweepResult plain = run_noise_sweep(p, small_data());
  p.augment = AugmentSpec{};
  const SweepResult aug = run_noise_sweep(p, small_data());
  CHECK(aug.cells[0].n == 3);
  CHECK(aug.cells[0].accuracies != plain.cells[0].accuracies);
}

TEST_CASE("failed runs") {
  ExperimentPlan p = small_plan();
  p.models = {"MHCNN"};
  p.noise_levels = {0.0};
  p.repetitions = 2;
  p.epochs = 1;
  p.hyperparams["MHCNN"] = {{"lr", "1e306"}, {"batch_size", "8"}};
  const RunOutcome run = run_single(p, small_data(), "MHCNN", 0.0, 0, false);
  CHECK(std::isnan(run.accuracy));
  CHECK(run.error.find("diverged") != std::string::npos);
  CHECK_FALSE(run.report);
  CHECK_THROWS_AS(run_noise_sweep(p, small_data()), NumericalError);
  CHECK_THROWS_AS(run_confusion(p, small_data(), "MHCNN"), NumericalError);
}

TEST_CASE("accuracy histogram") {
  const std::vector<double> a{0.3, 0.79999, 0.8, 0.85, 0.9, 1.0, kNaN};
  CHECK(accuracy_histogram(a) == std::array<int, 3>{2, 2, 2});
  CHECK(fraction_below(a, 0.8) == doctest::Approx(2.0 / 6.0));
  CHECK(std::isnan(fraction_below(std::vector<double>{kNaN}, 0.8)));
}

TEST_CASE("stability study") {
  ExperimentPlan p = small_plan();
  p.models = {"knn", "FC"};
  p.repetitions = 4;
  p.augment = AugmentSpec{};
  const StabilityResult r = run_stability_study(p, small_data());
  REQUIRE(r.series.size() == 4);
  CHECK(r.series[0].label == "knn");
  CHECK(r.series[1].label == "knn+aug");
  CHECK(r.series[1].augmented);
  CHECK(r.series[3].label == "FC+aug");
  CHECK(r.warnings.size() == 1);
  for (const auto& s : r.series) {
    CHECK(s.accuracies.size() == 4);
    CHECK(s.histogram[0] + s.histogram[1] + s.histogram[2] == 4);
    CHECK(s.histories.size() == (s.model == "FC" ? 4u : 0u));
  }
  CHECK(r.at("FC").histories[0].epochs.size() == 2);
  CHECK(r.at("knn").accuracies != r.at("knn+aug").accuracies);

  ExperimentPlan plain = p;
  plain.augment.reset();
  const StabilityResult q = run_stability_study(plain, small_data());
  CHECK(q.series.size() == 2);
  CHECK(q.at("knn").accuracies == r.at("knn").accuracies);
  CHECK(q.at("FC").accuracies == r.at("FC").accuracies);
  CHECK_THROWS_AS(q.at("knn+aug"), DataError);
}

TEST_CASE("one-class datasets are rejected before training") {
  const SpectraDataset& d = small_data();
  std::vector<int> rows;
  for (int i = 0; i < d.n_spectra(); ++i)
    if (d.labels()[static_cast<std::size_t>(i)] == 2) rows.push_back(i);
  const SpectraDataset one = d.subset(rows);
  ExperimentPlan p = small_plan();
  p.models = {"MHCNN"};
  p.epochs = 100;
  p.repetitions = 400;
  CHECK_THROWS_WITH_AS(run_stability_study(p, one), doctest::Contains("populated class"), DataError);
  CHECK_THROWS_AS(run_noise_sweep(p, one), DataError);
  CHECK_THROWS_AS(run_confusion(p, one, "MHCNN"), DataError);
}

TEST_CASE("confusion") {
  ExperimentPlan p = small_plan();
  p.noise_levels = {0.0};
  const EvalReport perfect = run_confusion(p, separable(10), "knn");
  CHECK(perfect.accuracy() == 1.0);
  CHECK(perfect.confusion() == Eigen::MatrixXi(perfect.confusion().diagonal().asDiagonal()));

  const EvalReport r = run_confusion(p, small_data(), "gnb");
  const SplitIndices split = stratified_split(small_data(), p.split, run_seeds(p.master_seed, "gnb", 0.0, 0).split);
  std::vector<int> per_class(4, 0);
  for (int i : split.test) ++per_class[static_cast<std::size_t>(small_data().labels()[static_cast<std::size_t>(i)])];
  for (int c = 0; c < 4; ++c) CHECK(r.confusion().row(c).sum() == per_class[static_cast<std::size_t>(c)]);
  CHECK(r.model_name() == "gnb");
  CHECK_THROWS_AS(run_confusion(p, small_data(), "lstm"), DataError);
}

TEST_CASE("output files") {
  const auto dir = scratch_dir("outputs");
  ExperimentPlan p = small_plan();
  p.models = {"knn", "FC"};
  const SweepResult sweep = run_noise_sweep(p, small_data());
  write_sweep_outputs(sweep, dir);
  CHECK(count_lines(dir / "sweep.csv") == 1 + 4);
  CHECK(count_lines(dir / "sweep_runs.csv") == 1 + 8);
  CHECK(read_text(dir / "sweep.csv").rfind("model,level,mean,std,n\n", 0) == 0);

  p.repetitions = 2;
  p.augment = AugmentSpec{};
  const StabilityResult st = run_stability_study(p, small_data());
  write_stability_outputs(st, dir);
  CHECK(count_lines(dir / "stability.csv") == 1 + 4 * 2);
  CHECK(count_lines(dir / "stability_histogram.csv") == 1 + 4 * 3);
  CHECK(std::filesystem::exists(dir / "history_FC_1.csv"));
  CHECK(std::filesystem::exists(dir / "history_FC_aug_0.csv"));
  CHECK_FALSE(std::filesystem::exists(dir / "history_knn_0.csv"));
  CHECK(count_lines(dir / "history_FC_0.csv") == 1 + p.epochs);

  const EvalReport r = run_confusion(p, small_data(), "knn");
  write_confusion_outputs(r, small_data().class_names(), dir);
  CHECK(std::filesystem::exists(dir / "confusion_knn.csv"));
  const EvalReport back = eval_report_from_json(nlohmann::json::parse(read_text(dir / "confusion_knn.json")));
  CHECK(back.confusion() == r.confusion());
  std::filesystem::remove_all(dir);
}
