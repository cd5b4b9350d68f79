#include <algorithm>
#include <chrono>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <functional>
#include <numeric>
#include <random>
#include <set>
#include <sstream>
#include <string>
#include <vector>

#include <CLI11.hpp>

#include "specbench/harness.hpp"
#include "specbench/io.hpp"
#include "specbench/peakfit.hpp"

using namespace specbench;
namespace fs = std::filesystem;

namespace {

// Collects the failed sub-checks of one criterion.
class Report {
 public:
  void expect(bool ok, const std::string& what) {
    ++checks_;
    if (!ok) failures_.push_back(what);
  }
  void note(const std::string& line) { notes_.push_back(line); }
  bool ok() const { return failures_.empty(); }
  int checks() const { return checks_; }
  const std::vector<std::string>& failures() const { return failures_; }
  const std::vector<std::string>& notes() const { return notes_; }

 private:
  int checks_ = 0;
  std::vector<std::string> failures_;
  std::vector<std::string> notes_;
};

std::string fmt(const char* f, double a) {
  char buf[64];
  std::snprintf(buf, sizeof buf, f, a);
  return buf;
}

template <class T>
std::string join(const std::vector<T>& v) {
  std::ostringstream s;
  for (std::size_t i = 0; i < v.size(); ++i) s << (i ? "/" : "") << v[i];
  return s.str();
}

nn::Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  nn::Tensor t(std::move(shape));
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

// ---- 1: gradients -----------------------------------------------------------

void gradients(Report& r) {
  using namespace nn;
  std::vector<std::pair<std::unique_ptr<Layer>, Tensor>> cases;
  cases.emplace_back(std::make_unique<Conv1d>(2, 3, 4), random_tensor({3, 2, 12}, 1));
  cases.emplace_back(std::make_unique<Relu>(), random_tensor({3, 2, 7}, 2));
  cases.emplace_back(std::make_unique<BatchNorm>(3), random_tensor({4, 3, 5}, 3, 2.0));
  cases.emplace_back(std::make_unique<BatchNorm>(5), random_tensor({6, 5}, 4, 2.0));
  cases.emplace_back(std::make_unique<Pool>(false, 2), random_tensor({2, 3, 9}, 5));
  cases.emplace_back(std::make_unique<Pool>(true, 2), random_tensor({2, 3, 9}, 6));
  cases.emplace_back(std::make_unique<Flatten>(), random_tensor({2, 3, 4}, 7));
  cases.emplace_back(std::make_unique<Dense>(6, 4), random_tensor({5, 6}, 8));
  cases.emplace_back(std::make_unique<GlobalAvgPool>(), random_tensor({2, 4, 6}, 9));
  for (auto& [layer, x] : cases) {
    Rng rng(11);
    layer->init(rng);
    const GradCheck g = check_layer_gradients(*layer, x, 12);
    r.expect(g.checked > 0 && g.max_rel_error < 1e-6, layer->name() + " max rel error " + fmt("%.2e", g.max_rel_error));
    r.note(layer->name() + " " + fmt("%.2e", g.max_rel_error));
  }

  const Tensor z = random_tensor({5, 4}, 13, 2.0);
  const Labels y{0, 3, 1, 1, 2};
  Tensor grad;
  softmax_cross_entropy(z, y, &grad);
  Tensor zp = z;
  double worst = 0.0;
  for (std::size_t i = 0; i < z.size(); ++i) {
    const double keep = zp[i];
    zp[i] = keep + 1e-5;
    const double up = softmax_cross_entropy(zp, y);
    zp[i] = keep - 1e-5;
    const double down = softmax_cross_entropy(zp, y);
    zp[i] = keep;
    worst = std::max(worst, relative_error(grad[i], (up - down) / 2e-5));
  }
  r.expect(worst < 1e-6, "softmax cross-entropy max rel error " + fmt("%.2e", worst));

  for (const auto& name : model_names()) {
    Network net(build_model(name));
    net.init(derive_seed(5, {0}));
    const Tensor x = to_batch(random_tensor({6, kStandardBins}, 21).matrix(6));
    const GradCheck g = check_network_gradients(net, x, {0, 1, 2, 3, 0, 1}, 22);
    r.expect(g.checked > 100 && g.max_rel_error < 1e-6, name + " max rel error " + fmt("%.2e", g.max_rel_error));
    r.note(name + " " + fmt("%.2e", g.max_rel_error) + " over " + std::to_string(g.checked) + " coordinates");
  }
}

// ---- 2: shapes --------------------------------------------------------------

void shapes(Report& r) {
  using namespace nn;
  auto shape_at = [](const ModelSpec& m, LayerKind kind, int occurrence) {
    const std::string tag = to_string(kind);
    for (const auto& s : trace_shapes(m))
      if (s.where.find(tag) != std::string::npos && occurrence-- == 0) return s.shape;
    return std::vector<int>{};
  };

  const ModelSpec full = build_model("FullCNN");
  const auto pre_pool = shape_at(full, LayerKind::conv1d, 5);
  r.expect(!pre_pool.empty() && pre_pool.back() == 19, "FullCNN pre-pool length " + join(pre_pool));
  r.expect(shape_at(full, LayerKind::global_avgpool, 0) == std::vector<int>{4}, "FullCNN global pool output");

  const ModelSpec cnn = build_model("CNN");
  const auto flat = shape_at(cnn, LayerKind::flatten, 0);
  r.expect(flat == std::vector<int>{228}, "CNN flatten " + join(flat));

  const ModelSpec mh = build_model("MHCNN");
  std::vector<int> concat;
  for (const auto& s : trace_shapes(mh))
    if (s.where == "concat") concat = s.shape;
  r.expect(concat == std::vector<int>{2144}, "MHCNN concat " + join(concat));

  std::vector<int> widths;
  for (const auto& l : build_model("FC").layers)
    if (l.kind == LayerKind::dense) widths.push_back(l.units);
  r.expect(widths == std::vector<int>{1024, 512, 256, 128, 64, 16, 4}, "FC widths " + join(widths));

  for (const auto& name : model_names()) {
    const auto out = trace_shapes(build_model(name)).back().shape;
    r.expect(out == std::vector<int>{4}, name + " output " + join(out));
  }
  r.note("FullCNN pre-pool " + join(pre_pool) + ", CNN flatten " + join(flat) + ", MHCNN concat " + join(concat) +
         ", FC " + join(widths));
}

// ---- 3: classical ML oracles --------------------------------------------------

struct Blobs {
  RowMatrix x;
  Labels y;
};

Blobs blobs(int per_class, int k, int d, double spread, std::uint64_t seed) {
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, spread);
  Blobs b;
  b.x.resize(per_class * k, d);
  for (int c = 0; c < k; ++c)
    for (int i = 0; i < per_class; ++i) {
      const int row = c * per_class + i;
      for (int j = 0; j < d; ++j) b.x(row, j) = n(rng) + (j % k == c ? 3.0 : 0.0);
      b.y.push_back(c);
    }
  return b;
}

double hit_rate(const Labels& a, const Labels& b) {
  int hit = 0;
  for (std::size_t i = 0; i < a.size(); ++i) hit += a[i] == b[i];
  return static_cast<double>(hit) / static_cast<double>(a.size());
}

void ml_oracles(Report& r) {
  {
    Rng rng(17);
    std::normal_distribution<double> n(0.0, 1.0);
    const int per = 10000;
    RowMatrix x(2 * per, 1);
    Labels y;
    for (int i = 0; i < 2 * per; ++i) {
      x(i, 0) = n(rng) + (i < per ? 0.0 : 4.0);
      y.push_back(i < per ? 0 : 1);
    }
    GaussianNB g;
    g.fit(x, y, 2);
    double lo = 0, hi = 4;
    for (int it = 0; it < 60; ++it) {
      const double mid = 0.5 * (lo + hi);
      RowMatrix q(1, 1);
      q(0, 0) = mid;
      (g.predict_proba(q)(0, 0) > 0.5 ? lo : hi) = mid;
    }
    const double boundary = 0.5 * (lo + hi);
    r.expect(std::abs(boundary - 2.0) <= 0.05, "GNB boundary " + fmt("%.4f", boundary));
    r.note("GNB boundary " + fmt("%.4f", boundary));
  }
  {
    RowMatrix x(2, 2);
    x << -1, 0, 1, 0;
    SvmClassifier svm({1e6, KernelKind::linear});
    svm.fit(x, {0, 1}, 2);
    const Vector w = svm.linear_weights(1);
    const double margin = 2.0 / w.norm();
    r.expect(std::abs(margin - 2.0) < 1e-3, "SVM margin " + fmt("%.6f", margin));
    r.expect(std::abs(svm.machines()[1].rho / w[0]) < 1e-3, "SVM boundary offset");
    r.note("SVM margin " + fmt("%.6f", margin));
  }
  {
    const Blobs b = blobs(30, 3, 5, 1.0, 1);
    MlModel m(ModelKind::knn, {{"k", "1"}});
    m.fit(b.x, b.y, 3);
    const double acc = hit_rate(m.predict(b.x), b.y);
    r.expect(acc == 1.0, "k=1 self-accuracy " + fmt("%.4f", acc));
  }
  {
    RowMatrix x(4, 2);
    x << 0, 0, 0, 1, 1, 0, 1, 1;
    const Labels y{0, 1, 1, 0};
    DecisionTree t({1, 2, 0, 0});
    t.fit(x, y, 2);
    r.expect(t.depth() == 2, "XOR tree depth " + std::to_string(t.depth()));
    r.expect(t.predict(x) == y, "XOR tree predictions");
  }
  {
    const Blobs b = blobs(30, 3, 6, 1.5, 31);
    const Blobs q = blobs(20, 3, 6, 2.0, 32);
    MlModel forest(ModelKind::rforest,
                   {{"n_estimators", "1"}, {"bootstrap", "false"}, {"max_features", "all"}, {"min_leaf", "2"}}, 5);
    MlModel tree(ModelKind::dtree, {{"min_leaf", "2"}});
    forest.fit(b.x, b.y, 3);
    tree.fit(b.x, b.y, 3);
    r.expect(forest.predict(q.x) == tree.predict(q.x), "1-tree forest differs from the tree");
    r.expect(forest.predict(b.x) == tree.predict(b.x), "1-tree forest differs from the tree on training rows");
  }
}

// ---- 4: peak fits -----------------------------------------------------------

ClassProfile band_profile(double g_center, double g_fl, double g_fg, double d_center, double d_fl) {
  ClassProfile p;
  p.name = "bands";
  p.peaks = {{"G", {g_center, g_fl, g_fg, 0.6}, {0, 0, 0, 0}}, {"2D", {d_center, d_fl, 5.0, 1.0}, {0, 0, 0, 0}}};
  p.baseline = 0.05;
  return p;
}

void peak_fits(Report& r) {
  const Vector grid = standard_grid();
  double worst_center = 0.0, worst_fwhm = 0.0;
  Rng rng(1);
  for (auto [gc, gl, gg, dc, dl] : {std::tuple{1582.3, 16.0, 4.0, 2679.4, 33.0}, std::tuple{1588.9, 8.5, 4.5, 2684.2, 24.0},
                                    std::tuple{1590.0, 12.0, 0.5, 2691.7, 18.0}}) {
    const Spectrum s = synth_spectrum(band_profile(gc, gl, gg, dc, dl), grid, rng);
    for (const auto& [window, label] : {std::pair{kGWindow, std::string("G")}, std::pair{k2DWindow, std::string("2D")}}) {
      const FitResult fit = fit_peak(s, window);
      const double center = std::stod(s.meta().at(label + ".center"));
      const double fwhm = pseudo_voigt_width(std::stod(s.meta().at(label + ".fwhm_gauss")),
                                             std::stod(s.meta().at(label + ".fwhm_lorentz")))
                              .fwhm;
      worst_center = std::max(worst_center, std::abs(fit.report.position - center));
      worst_fwhm = std::max(worst_fwhm, std::abs(fit.report.fwhm / fwhm - 1));
    }
  }
  r.expect(worst_center < 0.05, "center error " + fmt("%.2e", worst_center) + " cm-1");
  r.expect(worst_fwhm < 0.01, "relative FWHM error " + fmt("%.2e", worst_fwhm));
  r.note("worst center error " + fmt("%.2e", worst_center) + " cm-1, worst FWHM error " + fmt("%.2e", worst_fwhm));

  const std::vector<double> levels{0.01, 0.10};
  const StudyTable t = noise_sensitivity_study(band_profile(1585, 12, 4, 2680, 30), levels, 100, 8);
  for (const auto& name : study_parameter_names()) {
    const double lo = t.at(0, name).std, hi = t.at(1, name).std;
    r.expect(hi > lo, name + " std " + fmt("%.3g", lo) + " at 1% vs " + fmt("%.3g", hi) + " at 10%");
    r.note(name + " std " + fmt("%.3g", lo) + " -> " + fmt("%.3g", hi));
  }
}

// ---- 5: desk-scale benchmark --------------------------------------------------

void benchmark(Report& r) {
  const std::vector<std::uint64_t> seeds{1, 2, 3, 4, 5};
  std::vector<int> cnn_clean(5), ml_clean(5), cnn_beats_knn(5);
  for (std::size_t i = 0; i < seeds.size(); ++i) {
    ExperimentPlan p;
    p.dataset.preset = "charge_mimic";
    p.models = {"CNN", "knn", "rforest", "svm"};
    p.noise_levels = {0.0, 0.3};
    p.repetitions = 1;
    p.master_seed = seeds[i];
    p.epochs = 30;
    const SpectraDataset d = load_plan_dataset(p);
    r.expect(d.n_spectra() == 2112 && d.class_counts() == std::vector<int>{484, 633, 753, 242},
             "charge_mimic counts " + join(d.class_counts()));
    const SweepResult s = run_noise_sweep(p, d);
    const double cnn0 = s.at("CNN", 0).mean, knn0 = s.at("knn", 0).mean, rf0 = s.at("rforest", 0).mean,
                 svm0 = s.at("svm", 0).mean, cnn3 = s.at("CNN", 0.3).mean, knn3 = s.at("knn", 0.3).mean;
    cnn_clean[i] = cnn0 >= 0.95;
    ml_clean[i] = knn0 >= 0.90 && rf0 >= 0.90 && svm0 >= 0.90;
    cnn_beats_knn[i] = cnn3 - knn3 >= 0.05;
    r.note("seed " + std::to_string(seeds[i]) + ": noise 0 CNN " + fmt("%.4f", cnn0) + " knn " + fmt("%.4f", knn0) +
           " rforest " + fmt("%.4f", rf0) + " svm " + fmt("%.4f", svm0) + "; noise 0.3 CNN " + fmt("%.4f", cnn3) +
           " knn " + fmt("%.4f", knn3));
  }
  auto passes = [](const std::vector<int>& v) { return std::accumulate(v.begin(), v.end(), 0); };
  r.expect(passes(cnn_clean) >= 4, "CNN >= 0.95 at noise 0 on " + std::to_string(passes(cnn_clean)) + "/5 seeds");
  r.expect(passes(ml_clean) >= 4, "KNN/RF/SVM >= 0.90 at noise 0 on " + std::to_string(passes(ml_clean)) + "/5 seeds");
  r.expect(passes(cnn_beats_knn) >= 4,
           "CNN - KNN >= 0.05 at noise 0.3 on " + std::to_string(passes(cnn_beats_knn)) + "/5 seeds");
  r.note("seed passes: CNN clean " + std::to_string(passes(cnn_clean)) + "/5, KNN/RF/SVM clean " +
         std::to_string(passes(ml_clean)) + "/5, CNN over KNN at 0.3 " + std::to_string(passes(cnn_beats_knn)) + "/5");
}

// ---- 6: noise monotonicity ----------------------------------------------------

void monotonicity(Report& r) {
  ExperimentPlan p;
  p.dataset.preset = "charge_mimic";
  p.dataset.max_per_class = 100;
  p.models = {"knn", "dtree", "rforest", "gnb", "svm", "FC", "CNN", "FullCNN", "MHCNN"};
  p.noise_levels = {0.0, 0.5};
  p.repetitions = 10;
  p.master_seed = 1;
  p.epochs = 30;
  const SweepResult s = run_noise_sweep(p);
  for (const auto& m : p.models) {
    const SweepCell& clean = s.at(m, 0.0);
    const SweepCell& noisy = s.at(m, 0.5);
    r.expect(clean.n == 10 && noisy.n == 10, m + " successful runs " + std::to_string(clean.n) + "/" +
                                                 std::to_string(noisy.n));
    r.expect(noisy.mean <= clean.mean - 0.02, m + " mean " + fmt("%.4f", clean.mean) + " -> " + fmt("%.4f", noisy.mean));
    r.note(m + " " + fmt("%.4f", clean.mean) + " -> " + fmt("%.4f", noisy.mean));
  }
}

// ---- 7: reproducibility -------------------------------------------------------

std::string sweep_bytes(const SweepResult& s, const fs::path& dir) {
  write_sweep_outputs(s, dir);
  return read_text(dir / "sweep.csv") + read_text(dir / "sweep_runs.csv");
}

void reproducibility(Report& r) {
  const fs::path root = fs::temp_directory_path() / "specbench_acceptance_repro";
  fs::remove_all(root);
  ExperimentPlan p;
  p.dataset.preset = "charge_mimic";
  p.dataset.max_per_class = 20;
  p.models = {"knn", "rforest", "svm", "FC", "CNN"};
  p.noise_levels = {0.0, 0.2};
  p.repetitions = 2;
  p.master_seed = 42;
  p.epochs = 3;
  p.augment = AugmentSpec{};
  p.threads = 1;

  const SpectraDataset d = load_plan_dataset(p);
  const SweepResult serial = run_noise_sweep(p, d);
  const std::string a = sweep_bytes(serial, root / "a");
  const std::string b = sweep_bytes(run_noise_sweep(p, d), root / "b");
  r.expect(a == b, "repeated sweep CSV differs");
  p.threads = 4;
  const SweepResult parallel = run_noise_sweep(p, d);
  r.expect(sweep_bytes(parallel, root / "c") == a, "parallel sweep CSV differs from serial");
  for (std::size_t i = 0; i < serial.cells.size(); ++i) {
    const auto& x = serial.cells[i].accuracies;
    const auto& y = parallel.cells[i].accuracies;
    r.expect(x == y, "cell " + serial.cells[i].model + " differs between serial and parallel");
  }

  ExperimentPlan st = p;
  st.models = {"FC"};
  st.repetitions = 3;
  auto stability_bytes = [&](const ExperimentPlan& plan, const fs::path& dir) {
    write_stability_outputs(run_stability_study(plan, d), dir);
    std::string all;
    std::set<fs::path> files;
    for (const auto& e : fs::directory_iterator(dir)) files.insert(e.path());
    for (const auto& f : files) all += f.filename().string() + "\n" + read_text(f);
    return all;
  };
  const std::string s1 = stability_bytes(st, root / "s1");
  st.threads = 1;
  r.expect(stability_bytes(st, root / "s2") == s1, "stability outputs differ between parallel and serial");

  const std::vector<double> fractions{0.7, 0.1, 0.2};
  const SplitIndices split = stratified_split(d, fractions, 3);
  for (const std::string model : {"CNN", "MHCNN"}) {
    const nn::TrainConfig cfg = network_config(model, {}, 3, 9);
    const nn::TrainedModel m1 = nn::train(nn::build_model(model), d, split, cfg);
    const nn::TrainedModel m2 = nn::train(nn::build_model(model), d, split, cfg);
    std::ostringstream h1, h2;
    nn::write_history_csv(m1.history, h1);
    nn::write_history_csv(m2.history, h2);
    r.expect(nn::checkpoint(m1).dump() == nn::checkpoint(m2).dump(), model + " checkpoint differs between runs");
    r.expect(h1.str() == h2.str(), model + " history differs between runs");
  }
  MlModel f1(ModelKind::rforest, {}, 7), f2(ModelKind::rforest, {}, 7);
  f1.fit(d.rows(), d.labels(), d.n_classes());
  f2.fit(d.rows(), d.labels(), d.n_classes());
  r.expect(to_json(f1).dump() == to_json(f2).dump(), "random forest state differs between runs");
  r.note(std::to_string(serial.cells.size()) + " sweep cells compared byte for byte, serial and 4 threads");
  fs::remove_all(root);
}

// ---- 8: stability study -------------------------------------------------------

void stability(Report& r) {
  const std::vector<std::uint64_t> seeds{1, 2, 3};
  int not_worse = 0;
  for (const auto seed : seeds) {
    ExperimentPlan p;
    p.dataset.preset = "charge_mimic";
    p.dataset.max_per_class = 40;
    p.models = {"MHCNN"};
    p.repetitions = 100;
    p.master_seed = seed;
    p.epochs = 4;
    p.hyperparams["MHCNN"] = {{"batch_size", "16"}};
    p.augment = AugmentSpec{0.05, 30.0, AugmentMode::append};
    const StabilityResult s = run_stability_study(p);
    for (const auto& series : s.series) {
      int finite = 0;
      for (double a : series.accuracies) finite += std::isfinite(a);
      const int total = std::accumulate(series.histogram.begin(), series.histogram.end(), 0);
      r.expect(series.accuracies.size() == 100 && finite == 100,
               series.label + " accuracies " + std::to_string(finite) + "/" + std::to_string(series.accuracies.size()));
      r.expect(total == 100, series.label + " histogram sums to " + std::to_string(total));
    }
    const double plain = fraction_below(s.at("MHCNN").accuracies, 0.8);
    const double aug = fraction_below(s.at("MHCNN+aug").accuracies, 0.8);
    not_worse += aug <= plain;
    r.note("seed " + std::to_string(seed) + ": below 0.80 plain " + fmt("%.2f", plain) + ", augmented " +
           fmt("%.2f", aug));
  }
  r.expect(not_worse >= 2, "augmentation does not increase the low-accuracy fraction on only " +
                               std::to_string(not_worse) + "/3 seeds");
}

struct Criterion {
  int id;
  std::string title;
  double budget_s;  // 0: no runtime bound
  std::function<void(Report&)> run;
};

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"Acceptance checks; one PASS/FAIL line per criterion"};
  std::vector<int> only;
  bool verbose = false;
  app.add_option("--criterion", only, "Run only these criteria (1-8)")->check(CLI::Range(1, 8));
  app.add_flag("-v,--verbose", verbose, "Print measured values");
  CLI11_PARSE(app, argc, argv);

  const std::vector<Criterion> criteria{
      {1, "gradient check, every layer and architecture, max rel error < 1e-6", 60, gradients},
      {2, "architecture shapes from input 728", 0, shapes},
      {3, "classical ML oracles", 60, ml_oracles},
      {4, "peak-fit recovery and noise sensitivity", 120, peak_fits},
      {5, "charge_mimic benchmark over 5 seeds, 4 must pass", 1200, benchmark},
      {6, "noise degrades every model by >= 0.02 at level 0.5, n=10", 900, monotonicity},
      {7, "byte-identical reruns, parallel equals serial", 0, reproducibility},
      {8, "MHCNN stability, 100 reps, augmentation does not add low runs (2 of 3 seeds)", 0, stability},
  };

  int failed = 0;
  for (const auto& c : criteria) {
    if (!only.empty() && std::find(only.begin(), only.end(), c.id) == only.end()) continue;
    Report r;
    const auto t0 = std::chrono::steady_clock::now();
    try {
      c.run(r);
    } catch (const std::exception& e) {
      r.expect(false, std::string("threw: ") + e.what());
    }
    const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
    if (c.budget_s > 0) r.expect(secs < c.budget_s, "runtime " + fmt("%.1f", secs) + " s over " + fmt("%.0f", c.budget_s) + " s");
    std::printf("[%s] %d %s (%d checks, %.1f s)\n", r.ok() ? "PASS" : "FAIL", c.id, c.title.c_str(), r.checks(), secs);
    for (const auto& f : r.failures()) std::printf("       failed: %s\n", f.c_str());
    if (verbose)
      for (const auto& n : r.notes()) std::printf("       %s\n", n.c_str());
    std::fflush(stdout);
    failed += !r.ok();
  }
  return failed == 0 ? 0 : 1;
}
