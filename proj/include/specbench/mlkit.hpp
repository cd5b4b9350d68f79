#pragma once

#include <cstdint>
#include <iosfwd>
#include <map>
#include <memory>
#include <span>
#include <string>
#include <utility>
#include <variant>
#include <vector>

#include <json.hpp>

#include "specbench/core.hpp"
#include "specbench/seed.hpp"

namespace specbench {

enum class ModelKind { knn, dtree, rforest, gnb, svm };

std::string to_string(ModelKind k);
/// Accepts "knn", "dtree", "rforest", "gnb", "svm".
ModelKind parse_model_kind(const std::string& name);
bool is_ml_kind(const std::string& name);

/// Free-form hyperparameters as given on the command line or in a plan.
using Hyperparams = std::map<std::string, std::string>;

// ---- k-nearest neighbours ----------------------------------------------------

struct KnnParams {
  int k = 5;
  double p = 2.0;  // Minkowski order
};

/// Majority vote among the k smallest entries of each row of `distances`
/// (queries x training rows). Distance ties go to the lower training index,
/// vote ties to the lower class.
Labels knn_vote(const Eigen::MatrixXd& distances, const Labels& train_labels, int k, int n_classes);

class KnnClassifier {
 public:
  explicit KnnClassifier(KnnParams p = {}) : params_(p) {}
  void fit(const RowMatrix& x, const Labels& y, int n_classes);
  Labels predict(const RowMatrix& x) const;
  /// Minkowski distances, queries x training rows.
  Eigen::MatrixXd distances(const RowMatrix& x) const;
  const KnnParams& params() const noexcept { return params_; }

  nlohmann::json state() const;
  void load(const nlohmann::json& j, int n_classes);

 private:
  KnnParams params_;
  RowMatrix x_;
  Labels y_;
  int n_classes_ = 0;
};

// ---- CART ------------------------------------------------------------------

struct TreeParams {
  int min_leaf = 1;
  int min_split = 2;
  int max_depth = 0;     // 0: unlimited
  int max_features = 0;  // 0: all features at every split
};

class DecisionTree {
 public:
  struct Node {
    int feature = -1;  // -1 for leaves
    double threshold = 0.0;
    int left = -1;
    int right = -1;
    std::vector<int> counts;  // class counts of the training rows reaching the node
  };

  explicit DecisionTree(TreeParams p = {}) : params_(p) {}
  void fit(const RowMatrix& x, const Labels& y, int n_classes);
  /// Fits on `rows` (bootstrap multiplicity allowed); feature subsets are
  /// drawn from `rng` when max_features is below the feature count.
  void fit(const RowMatrix& x, const Labels& y, int n_classes, std::span<const int> rows, Rng* rng);
  Labels predict(const RowMatrix& x) const;
  /// Leaf class frequencies for one row.
  Vector leaf_distribution(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;

  int depth() const;
  int n_leaves() const;
  const std::vector<Node>& nodes() const noexcept { return nodes_; }
  const TreeParams& params() const noexcept { return params_; }

  nlohmann::json state() const;
  void load(const nlohmann::json& j, int n_classes);

 private:
  const Node& leaf_for(const Eigen::Ref<const Eigen::RowVectorXd>& row) const;

  TreeParams params_;
  std::vector<Node> nodes_;
  int n_classes_ = 0;
};

// ---- random forest ------------------------------------------------------------

struct ForestParams {
  int n_estimators = 100;
  int max_depth = 0;
  int min_leaf = 1;
  int min_split = 2;
  bool bootstrap = true;
  int max_features = -1;  // -1: floor(sqrt(n_features)); 0: all
};

class RandomForest {
 public:
  explicit RandomForest(ForestParams p = {}, std::uint64_t seed = 0) : params_(p), seed_(seed) {}
  void fit(const RowMatrix& x, const Labels& y, int n_classes);
  Labels predict(const RowMatrix& x) const;
  /// Mean of the trees' leaf class frequencies.
  RowMatrix predict_proba(const RowMatrix& x) const;
  const std::vector<DecisionTree>& trees() const noexcept { return trees_; }

  nlohmann::json state() const;
  void load(const nlohmann::json& j, int n_classes);

 private:
  ForestParams params_;
  std::uint64_t seed_;
  std::vector<DecisionTree> trees_;
  int n_classes_ = 0;
};

// ---- Gaussian naive Bayes -------------------------------------------------------

struct GnbParams {
  double var_smoothing = 1e-9;
};

class GaussianNB {
 public:
  explicit GaussianNB(GnbParams p = {}) : params_(p) {}
  void fit(const RowMatrix& x, const Labels& y, int n_classes);
  Labels predict(const RowMatrix& x) const;
  /// Class posteriors, one row per sample.
  RowMatrix predict_proba(const RowMatrix& x) const;
  RowMatrix log_joint(const RowMatrix& x) const;

  const RowMatrix& means() const noexcept { return mean_; }
  const RowMatrix& variances() const noexcept { return var_; }

  nlohmann::json state() const;
  void load(const nlohmann::json& j, int n_classes);

 private:
  GnbParams params_;
  RowMatrix mean_;  // classes x features
  RowMatrix var_;
  Vector log_prior_;
};

// ---- support vector machine -------------------------------------------------------

enum class KernelKind { linear, rbf, poly };

struct SvmParams {
  double c = 1.0;
  KernelKind kernel = KernelKind::rbf;
  double gamma = -1.0;  // <= 0: 1 / (n_features * Var(X))
  int degree = 3;
  double coef0 = 0.0;
  double tol = 1e-3;
  int max_passes = 1000;  // iteration cap is max_passes * n_rows
};

/// One binary problem of the one-vs-rest ensemble.
struct BinarySvm {
  std::vector<int> support;  // training row indices with alpha > 0
  Vector coef;               // y_i * alpha_i for those rows
  double rho = 0.0;          // f(x) = sum coef_i K(x_i, x) - rho
  double kkt_gap = 0.0;      // max violation m(alpha) - M(alpha) at exit
  int iterations = 0;
  bool converged = false;
};

/// Solves the C-SVM dual by SMO with second-order working-set selection.
/// `kernel` is the full Gram matrix, labels are +1/-1.
BinarySvm smo_solve(const Eigen::MatrixXd& kernel, const Vector& y, double c, double tol, long max_iterations);

class SvmClassifier {
 public:
  explicit SvmClassifier(SvmParams p = {}) : params_(p) {}
  void fit(const RowMatrix& x, const Labels& y, int n_classes);
  Labels predict(const RowMatrix& x) const;
  /// One column per class (one-vs-rest decision values).
  RowMatrix decision_function(const RowMatrix& x) const;
  const std::vector<BinarySvm>& machines() const noexcept { return machines_; }
  double gamma() const noexcept { return gamma_; }
  /// Primal weights of machine k; linear kernel only.
  Vector linear_weights(int k) const;

  nlohmann::json state() const;
  void load(const nlohmann::json& j, int n_classes);

 private:
  Eigen::MatrixXd kernel_matrix(const RowMatrix& a, const RowMatrix& b) const;

  SvmParams params_;
  double gamma_ = 0.0;
  RowMatrix support_x_;  // union of support rows over all machines
  std::vector<BinarySvm> machines_;  // support indices refer to support_x_
};

// ---- uniform model wrapper ---------------------------------------------------------

/// A classifier of any kind behind one interface. Hyperparameter keys:
///   knn     k, p
///   dtree   min_leaf, min_split, max_depth
///   rforest n_estimators, max_depth, min_leaf, min_split, bootstrap, max_features
///   gnb     var_smoothing
///   svm     C, kernel, gamma, degree, coef0, tol, max_passes
class MlModel {
 public:
  MlModel(ModelKind kind, Hyperparams hyperparams = {}, std::uint64_t seed = 0);

  ModelKind kind() const noexcept { return kind_; }
  const Hyperparams& hyperparams() const noexcept { return hyperparams_; }
  std::uint64_t seed() const noexcept { return seed_; }
  int n_classes() const noexcept { return n_classes_; }
  bool fitted() const noexcept { return n_classes_ > 0; }

  /// Trains in place; errors on K < 2, length mismatch or non-finite input.
  MlModel& fit(const RowMatrix& x, const Labels& y, int n_classes);
  Labels predict(const RowMatrix& x) const;

  template <typename T>
  const T& as() const {
    return std::get<T>(impl_);
  }

 private:
  friend nlohmann::json to_json(const MlModel& m);
  friend MlModel ml_model_from_json(const nlohmann::json& j);

  ModelKind kind_;
  Hyperparams hyperparams_;
  std::uint64_t seed_;
  int n_classes_ = 0;
  std::variant<KnnClassifier, DecisionTree, RandomForest, GaussianNB, SvmClassifier> impl_;
};

nlohmann::json to_json(const MlModel& m);
MlModel ml_model_from_json(const nlohmann::json& j);

/// Hyperparameters the experiment harness uses when none are given: the
/// grid-search winners on dielectric_mimic.
Hyperparams default_hyperparams(ModelKind kind);

// ---- PCA -------------------------------------------------------------------------

struct PcaModel {
  Vector mean;
  RowMatrix components;  // n_components x n_features, orthonormal rows
  Vector explained_variance;
  Vector explained_variance_ratio;
};

/// Top right-singular vectors of the centered data. Each component is signed
/// so that its largest-magnitude entry is positive.
PcaModel pca_fit(const RowMatrix& x, int n_components);
RowMatrix pca_transform(const PcaModel& m, const RowMatrix& x);
RowMatrix pca_inverse_transform(const PcaModel& m, const RowMatrix& scores);

// ---- hyperparameter grid search ------------------------------------------------------

/// Ordered lattice axes: name and candidate values.
using ParamGrid = std::vector<std::pair<std::string, std::vector<std::string>>>;

struct GridRow {
  Hyperparams params;
  double accuracy = 0.0;  // NaN when the cell failed
  std::string error;
};

struct GridResult {
  std::vector<std::string> param_names;
  std::vector<GridRow> rows;  // cartesian product, last axis fastest
  int best = -1;              // highest accuracy, first on ties; -1 if all failed
};

/// Every lattice point is fitted on the same stratified split of `d` and
/// scored on its held-out part. Cells run on up to `threads` workers.
GridResult grid_search(ModelKind kind, const ParamGrid& grid, const SpectraDataset& d, std::uint64_t seed,
                       std::span<const double> fractions = {}, int threads = 1);

void write_grid_csv(const GridResult& g, std::ostream& out);

}  // namespace specbench
