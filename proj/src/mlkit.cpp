#include "specbench/mlkit.hpp"

#include <algorithm>
#include <charconv>
#include <cmath>
#include <limits>
#include <numeric>
#include <ostream>
#include <set>

#include "specbench/io.hpp"
#include "specbench/parallel.hpp"

namespace specbench {

namespace {

void check_training_input(const RowMatrix& x, const Labels& y, int n_classes) {
  if (n_classes < 2) throw DataError("a classifier needs at least 2 classes, got " + std::to_string(n_classes));
  if (x.rows() != static_cast<Eigen::Index>(y.size()))
    throw DataError("feature rows (" + std::to_string(x.rows()) + ") and labels (" + std::to_string(y.size()) +
                    ") differ in length");
  if (x.rows() == 0 || x.cols() == 0) throw DataError("empty training matrix");
  if (!x.allFinite()) throw DataError("training features contain NaN or infinite values");
  for (int label : y)
    if (label < 0 || label >= n_classes) throw DataError("label " + std::to_string(label) + " outside [0, K)");
}

void check_query(const RowMatrix& x, Eigen::Index n_features) {
  if (x.cols() != n_features)
    throw DataError("query has " + std::to_string(x.cols()) + " features, model expects " + std::to_string(n_features));
  if (!x.allFinite()) throw DataError("query features contain NaN or infinite values");
}

int argmax_lowest(const auto& row) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(row.size()); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

nlohmann::json matrix_to_json(const RowMatrix& m) {
  nlohmann::json rows = nlohmann::json::array();
  for (Eigen::Index r = 0; r < m.rows(); ++r) rows.push_back(std::vector<double>(m.row(r).begin(), m.row(r).end()));
  return rows;
}

RowMatrix matrix_from_json(const nlohmann::json& j) {
  const auto n = static_cast<Eigen::Index>(j.size());
  const auto d = n > 0 ? static_cast<Eigen::Index>(j[0].size()) : 0;
  RowMatrix m(n, d);
  for (Eigen::Index r = 0; r < n; ++r) {
    const auto row = j[static_cast<std::size_t>(r)].get<std::vector<double>>();
    if (static_cast<Eigen::Index>(row.size()) != d) throw DataError("ragged matrix in model state");
    m.row(r) = Eigen::Map<const Eigen::RowVectorXd>(row.data(), d);
  }
  return m;
}

Vector vector_from_json(const nlohmann::json& j) {
  const auto v = j.get<std::vector<double>>();
  return Eigen::Map<const Vector>(v.data(), static_cast<Eigen::Index>(v.size()));
}

std::vector<double> to_std(const Vector& v) { return {v.begin(), v.end()}; }

// ---- hyperparameter parsing --------------------------------------------------

class ParamReader {
 public:
  ParamReader(const Hyperparams& hp, std::string kind) : hp_(hp), kind_(std::move(kind)) {}

  template <typename T>
  void read(const std::string& key, T& out) {
    const auto it = hp_.find(key);
    if (it == hp_.end()) return;
    used_.insert(key);
    out = parse<T>(key, it->second);
  }

  void finish() const {
    for (const auto& [key, value] : hp_)
      if (!used_.count(key)) throw DataError("unknown " + kind_ + " hyperparameter '" + key + "'");
  }

 private:
  template <typename T>
  T parse(const std::string& key, const std::string& text) const {
    const std::string bad = kind_ + " hyperparameter " + key + "='" + text + "' is not valid";
    if constexpr (std::is_same_v<T, std::string>) {
      return text;
    } else if constexpr (std::is_same_v<T, bool>) {
      if (text == "true" || text == "1") return true;
      if (text == "false" || text == "0") return false;
      throw DataError(bad);
    } else {
      T value{};
      const auto [end, ec] = std::from_chars(text.data(), text.data() + text.size(), value);
      if (ec != std::errc() || end != text.data() + text.size()) throw DataError(bad);
      return value;
    }
  }

  const Hyperparams& hp_;
  std::string kind_;
  std::set<std::string> used_;
};

KernelKind parse_kernel(const std::string& s) {
  if (s == "linear") return KernelKind::linear;
  if (s == "rbf") return KernelKind::rbf;
  if (s == "poly") return KernelKind::poly;
  throw DataError("unknown svm kernel '" + s + "' (linear, rbf, poly)");
}

}  // namespace

std::string to_string(ModelKind k) {
  switch (k) {
    case ModelKind::knn: return "knn";
    case ModelKind::dtree: return "dtree";
    case ModelKind::rforest: return "rforest";
    case ModelKind::gnb: return "gnb";
    case ModelKind::svm: return "svm";
  }
  return "knn";
}

bool is_ml_kind(const std::string& name) {
  return name == "knn" || name == "dtree" || name == "rforest" || name == "gnb" || name == "svm";
}

ModelKind parse_model_kind(const std::string& name) {
  if (name == "knn") return ModelKind::knn;
  if (name == "dtree") return ModelKind::dtree;
  if (name == "rforest") return ModelKind::rforest;
  if (name == "gnb") return ModelKind::gnb;
  if (name == "svm") return ModelKind::svm;
  throw DataError("unknown classifier '" + name + "'");
}

// ---- knn ------------------------------------------------------------------------

Labels knn_vote(const Eigen::MatrixXd& distances, const Labels& train_labels, int k, int n_classes) {
  const auto n = distances.cols();
  if (n != static_cast<Eigen::Index>(train_labels.size())) throw DataError("distance matrix and labels disagree");
  const int kk = static_cast<int>(std::min<Eigen::Index>(k, n));
  Labels out(static_cast<std::size_t>(distances.rows()));
  std::vector<int> idx(static_cast<std::size_t>(n));
  std::vector<int> votes(static_cast<std::size_t>(n_classes));
  for (Eigen::Index q = 0; q < distances.rows(); ++q) {
    std::iota(idx.begin(), idx.end(), 0);
    const auto row = distances.row(q);
    std::partial_sort(idx.begin(), idx.begin() + kk, idx.end(), [&](int a, int b) {
      return row[a] < row[b] || (row[a] == row[b] && a < b);
    });
    std::fill(votes.begin(), votes.end(), 0);
    for (int i = 0; i < kk; ++i) ++votes[static_cast<std::size_t>(train_labels[static_cast<std::size_t>(idx[static_cast<std::size_t>(i)])])];
    out[static_cast<std::size_t>(q)] = argmax_lowest(votes);
  }
  return out;
}

void KnnClassifier::fit(const RowMatrix& x, const Labels& y, int n_classes) {
  check_training_input(x, y, n_classes);
  if (params_.k < 1) throw DataError("knn k must be >= 1");
  if (!(params_.p >= 1.0)) throw DataError("knn distance order p must be >= 1");
  x_ = x;
  y_ = y;
  n_classes_ = n_classes;
}

Eigen::MatrixXd KnnClassifier::distances(const RowMatrix& x) const {
  if (n_classes_ == 0) throw NotFittedError("knn model is not fitted");
  check_query(x, x_.cols());
  Eigen::MatrixXd d(x.rows(), x_.rows());
  const double p = params_.p;
  for (Eigen::Index q = 0; q < x.rows(); ++q) {
    for (Eigen::Index t = 0; t < x_.rows(); ++t) {
      const auto diff = (x_.row(t) - x.row(q)).array().abs();
      if (p == 2.0)
        d(q, t) = std::sqrt(diff.square().sum());
      else if (p == 1.0)
        d(q, t) = diff.sum();
      else
        d(q, t) = std::pow(diff.pow(p).sum(), 1.0 / p);
    }
  }
  return d;
}

Labels KnnClassifier::predict(const RowMatrix& x) const { return knn_vote(distances(x), y_, params_.k, n_classes_); }

nlohmann::json KnnClassifier::state() const { return {{"x", matrix_to_json(x_)}, {"y", y_}}; }

void KnnClassifier::load(const nlohmann::json& j, int n_classes) {
  x_ = matrix_from_json(j.at("x"));
  y_ = j.at("y").get<Labels>();
  n_classes_ = n_classes;
}

// ---- CART -----------------------------------------------------------------------

namespace {

struct SplitChoice {
  double score = std::numeric_limits<double>::infinity();  // n_left*Gini_left + n_right*Gini_right
  int feature = -1;
  double threshold = 0.0;

  bool better(double s, int f, double t) const {
    if (s != score) return s < score;
    if (f != feature) return f < feature;
    return t < threshold;
  }
};

class TreeBuilder {
 public:
  TreeBuilder(const RowMatrix& x, const Labels& y, int n_classes, const TreeParams& p, Rng* rng,
              std::vector<DecisionTree::Node>& nodes)
      : x_(x), y_(y), k_(n_classes), p_(p), rng_(rng), nodes_(nodes) {
    const int d = static_cast<int>(x.cols());
    n_try_ = (p.max_features > 0 && p.max_features < d) ? p.max_features : d;
    features_.resize(static_cast<std::size_t>(d));
    std::iota(features_.begin(), features_.end(), 0);
  }

  int build(std::vector<int>& rows, int depth) {
    const int id = static_cast<int>(nodes_.size());
    nodes_.emplace_back();
    std::vector<int> counts(static_cast<std::size_t>(k_), 0);
    for (int r : rows) ++counts[static_cast<std::size_t>(y_[static_cast<std::size_t>(r)])];
    nodes_[static_cast<std::size_t>(id)].counts = counts;

    const int n = static_cast<int>(rows.size());
    const bool pure = std::count_if(counts.begin(), counts.end(), [](int c) { return c > 0; }) <= 1;
    if (pure || n < p_.min_split || n < 2 * p_.min_leaf || (p_.max_depth > 0 && depth >= p_.max_depth)) return id;

    const SplitChoice best = find_split(rows, counts);
    if (best.feature < 0) return id;

    std::vector<int> left, right;
    for (int r : rows) (x_(r, best.feature) <= best.threshold ? left : right).push_back(r);
    rows.clear();
    rows.shrink_to_fit();
    const int l = build(left, depth + 1);
    const int rr = build(right, depth + 1);
    auto& node = nodes_[static_cast<std::size_t>(id)];
    node.feature = best.feature;
    node.threshold = best.threshold;
    node.left = l;
    node.right = rr;
    return id;
  }

 private:
  SplitChoice find_split(const std::vector<int>& rows, const std::vector<int>& counts) {
    const int d = static_cast<int>(features_.size());
    if (n_try_ < d) {
      for (int i = 0; i < n_try_; ++i) {
        std::uniform_int_distribution<int> pick(i, d - 1);
        std::swap(features_[static_cast<std::size_t>(i)], features_[static_cast<std::size_t>(pick(*rng_))]);
      }
    }
    SplitChoice best;
    const int n = static_cast<int>(rows.size());
    std::vector<std::pair<double, int>> column(static_cast<std::size_t>(n));
    std::vector<double> left(static_cast<std::size_t>(k_)), right(static_cast<std::size_t>(k_));
    double sq_total = 0;
    for (int c : counts) sq_total += static_cast<double>(c) * c;

    for (int fi = 0; fi < n_try_; ++fi) {
      const int f = features_[static_cast<std::size_t>(fi)];
      for (int i = 0; i < n; ++i) {
        const int r = rows[static_cast<std::size_t>(i)];
        column[static_cast<std::size_t>(i)] = {x_(r, f), y_[static_cast<std::size_t>(r)]};
      }
      std::sort(column.begin(), column.end());
      if (column.front().first == column.back().first) continue;
      std::fill(left.begin(), left.end(), 0.0);
      for (int c = 0; c < k_; ++c) right[static_cast<std::size_t>(c)] = counts[static_cast<std::size_t>(c)];
      double sq_l = 0, sq_r = sq_total;
      for (int i = 0; i + 1 < n; ++i) {
        const auto c = static_cast<std::size_t>(column[static_cast<std::size_t>(i)].second);
        sq_l += 2 * left[c] + 1;
        sq_r -= 2 * right[c] - 1;
        left[c] += 1;
        right[c] -= 1;
        const double v = column[static_cast<std::size_t>(i)].first;
        const double next = column[static_cast<std::size_t>(i) + 1].first;
        const int nl = i + 1, nr = n - nl;
        if (v == next || nl < p_.min_leaf || nr < p_.min_leaf) continue;
        const double score = (nl - sq_l / nl) + (nr - sq_r / nr);
        double thr = 0.5 * (v + next);
        if (!(thr < next)) thr = v;
        if (best.better(score, f, thr)) best = {score, f, thr};
      }
    }
    return best;
  }

  const RowMatrix& x_;
  const Labels& y_;
  int k_;
  const TreeParams& p_;
  Rng* rng_;
  std::vector<DecisionTree::Node>& nodes_;
  std::vector<int> features_;
  int n_try_;
};

}  // namespace

void DecisionTree::fit(const RowMatrix& x, const Labels& y, int n_classes) {
  std::vector<int> rows(static_cast<std::size_t>(x.rows()));
  std::iota(rows.begin(), rows.end(), 0);
  fit(x, y, n_classes, rows, nullptr);
}

void DecisionTree::fit(const RowMatrix& x, const Labels& y, int n_classes, std::span<const int> rows, Rng* rng) {
  check_training_input(x, y, n_classes);
  if (params_.min_leaf < 1) throw DataError("dtree min_leaf must be >= 1");
  if (params_.min_split < 2) throw DataError("dtree min_split must be >= 2");
  if (params_.max_depth < 0) throw DataError("dtree max_depth must be >= 0");
  if (params_.max_features > 0 && params_.max_features < x.cols() && rng == nullptr)
    throw DataError("feature subsampling needs a random stream");
  nodes_.clear();
  n_classes_ = n_classes;
  std::vector<int> root(rows.begin(), rows.end());
  TreeBuilder(x, y, n_classes, params_, rng, nodes_).build(root, 0);
}

const DecisionTree::Node& DecisionTree::leaf_for(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  const Node* node = &nodes_.front();
  while (node->feature >= 0)
    node = &nodes_[static_cast<std::size_t>(row[node->feature] <= node->threshold ? node->left : node->right)];
  return *node;
}

Vector DecisionTree::leaf_distribution(const Eigen::Ref<const Eigen::RowVectorXd>& row) const {
  if (nodes_.empty()) throw NotFittedError("decision tree is not fitted");
  const Node& leaf = leaf_for(row);
  Vector p(n_classes_);
  double total = 0;
  for (int c = 0; c < n_classes_; ++c) total += leaf.counts[static_cast<std::size_t>(c)];
  for (int c = 0; c < n_classes_; ++c) p[c] = leaf.counts[static_cast<std::size_t>(c)] / total;
  return p;
}

Labels DecisionTree::predict(const RowMatrix& x) const {
  if (nodes_.empty()) throw NotFittedError("decision tree is not fitted");
  if (!x.allFinite()) throw DataError("query features contain NaN or infinite values");
  Labels out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax_lowest(leaf_for(x.row(r)).counts);
  return out;
}

int DecisionTree::depth() const {
  if (nodes_.empty()) return 0;
  std::vector<int> level(nodes_.size(), 0);
  int deepest = 0;
  for (std::size_t i = 0; i < nodes_.size(); ++i) {
    deepest = std::max(deepest, level[i]);
    if (nodes_[i].feature >= 0) {
      level[static_cast<std::size_t>(nodes_[i].left)] = level[i] + 1;
      level[static_cast<std::size_t>(nodes_[i].right)] = level[i] + 1;
    }
  }
  return deepest;
}

int DecisionTree::n_leaves() const {
  return static_cast<int>(std::count_if(nodes_.begin(), nodes_.end(), [](const Node& n) { return n.feature < 0; }));
}

nlohmann::json DecisionTree::state() const {
  nlohmann::json nodes = nlohmann::json::array();
  for (const auto& n : nodes_)
    nodes.push_back({{"feature", n.feature}, {"threshold", n.threshold}, {"left", n.left}, {"right", n.right},
                     {"counts", n.counts}});
  return {{"nodes", nodes}};
}

void DecisionTree::load(const nlohmann::json& j, int n_classes) {
  nodes_.clear();
  for (const auto& n : j.at("nodes"))
    nodes_.push_back({n.at("feature").get<int>(), n.at("threshold").get<double>(), n.at("left").get<int>(),
                      n.at("right").get<int>(), n.at("counts").get<std::vector<int>>()});
  n_classes_ = n_classes;
}

// ---- random forest ---------------------------------------------------------------

void RandomForest::fit(const RowMatrix& x, const Labels& y, int n_classes) {
  check_training_input(x, y, n_classes);
  if (params_.n_estimators < 1) throw DataError("rforest n_estimators must be >= 1");
  const int d = static_cast<int>(x.cols());
  TreeParams tp;
  tp.min_leaf = params_.min_leaf;
  tp.min_split = params_.min_split;
  tp.max_depth = params_.max_depth;
  tp.max_features = params_.max_features < 0 ? std::max(1, static_cast<int>(std::sqrt(static_cast<double>(d))))
                                             : params_.max_features;
  const auto n = static_cast<int>(x.rows());
  trees_.assign(static_cast<std::size_t>(params_.n_estimators), DecisionTree(tp));
  std::vector<int> rows(static_cast<std::size_t>(n));
  for (int t = 0; t < params_.n_estimators; ++t) {
    Rng rng(derive_seed(seed_, {static_cast<std::uint64_t>(t)}));
    if (params_.bootstrap) {
      std::uniform_int_distribution<int> pick(0, n - 1);
      for (auto& r : rows) r = pick(rng);
    } else {
      std::iota(rows.begin(), rows.end(), 0);
    }
    trees_[static_cast<std::size_t>(t)].fit(x, y, n_classes, rows, &rng);
  }
  n_classes_ = n_classes;
}

RowMatrix RandomForest::predict_proba(const RowMatrix& x) const {
  if (trees_.empty()) throw NotFittedError("random forest is not fitted");
  if (!x.allFinite()) throw DataError("query features contain NaN or infinite values");
  RowMatrix p = RowMatrix::Zero(x.rows(), n_classes_);
  for (const auto& tree : trees_)
    for (Eigen::Index r = 0; r < x.rows(); ++r) p.row(r) += tree.leaf_distribution(x.row(r)).transpose();
  p /= static_cast<double>(trees_.size());
  return p;
}

Labels RandomForest::predict(const RowMatrix& x) const {
  const RowMatrix p = predict_proba(x);
  Labels out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax_lowest(p.row(r));
  return out;
}

nlohmann::json RandomForest::state() const {
  nlohmann::json trees = nlohmann::json::array();
  for (const auto& t : trees_) trees.push_back(t.state());
  return {{"trees", trees}};
}

void RandomForest::load(const nlohmann::json& j, int n_classes) {
  trees_.clear();
  for (const auto& t : j.at("trees")) {
    DecisionTree tree;
    tree.load(t, n_classes);
    trees_.push_back(std::move(tree));
  }
  n_classes_ = n_classes;
}

// ---- Gaussian naive Bayes ----------------------------------------------------------

void GaussianNB::fit(const RowMatrix& x, const Labels& y, int n_classes) {
  check_training_input(x, y, n_classes);
  if (!(params_.var_smoothing >= 0)) throw DataError("gnb var_smoothing must be >= 0");
  const Eigen::Index d = x.cols();
  const Eigen::RowVectorXd overall_mean = x.colwise().mean();
  const double max_var = (x.rowwise() - overall_mean).array().square().colwise().mean().maxCoeff();
  const double eps = params_.var_smoothing * (max_var > 0 ? max_var : 1.0);

  mean_ = RowMatrix::Zero(n_classes, d);
  var_ = RowMatrix::Ones(n_classes, d);
  log_prior_ = Vector::Constant(n_classes, -std::numeric_limits<double>::infinity());
  std::vector<int> count(static_cast<std::size_t>(n_classes), 0);
  for (std::size_t i = 0; i < y.size(); ++i) {
    ++count[static_cast<std::size_t>(y[i])];
    mean_.row(y[i]) += x.row(static_cast<Eigen::Index>(i));
  }
  for (int c = 0; c < n_classes; ++c)
    if (count[static_cast<std::size_t>(c)] > 0) mean_.row(c) /= count[static_cast<std::size_t>(c)];
  RowMatrix sq = RowMatrix::Zero(n_classes, d);
  for (std::size_t i = 0; i < y.size(); ++i)
    sq.row(y[i]) += (x.row(static_cast<Eigen::Index>(i)) - mean_.row(y[i])).array().square().matrix();
  for (int c = 0; c < n_classes; ++c) {
    const int n_c = count[static_cast<std::size_t>(c)];
    if (n_c == 0) continue;
    var_.row(c) = (sq.row(c).array() / n_c + eps).matrix();
    log_prior_[c] = std::log(static_cast<double>(n_c) / static_cast<double>(y.size()));
  }
  if (!(var_.array() > 0).all()) throw NumericalError("gnb variance collapsed to zero; increase var_smoothing");
}

RowMatrix GaussianNB::log_joint(const RowMatrix& x) const {
  if (mean_.rows() == 0) throw NotFittedError("naive Bayes model is not fitted");
  check_query(x, mean_.cols());
  const Eigen::Index k = mean_.rows();
  Vector log_norm(k);
  for (Eigen::Index c = 0; c < k; ++c)
    log_norm[c] = -0.5 * (2.0 * std::numbers::pi * var_.row(c).array()).log().sum();
  RowMatrix out(x.rows(), k);
  for (Eigen::Index r = 0; r < x.rows(); ++r)
    for (Eigen::Index c = 0; c < k; ++c)
      out(r, c) = log_prior_[c] + log_norm[c] -
                  0.5 * ((x.row(r) - mean_.row(c)).array().square() / var_.row(c).array()).sum();
  return out;
}

RowMatrix GaussianNB::predict_proba(const RowMatrix& x) const {
  RowMatrix p = log_joint(x);
  for (Eigen::Index r = 0; r < p.rows(); ++r) {
    const double top = p.row(r).maxCoeff();
    p.row(r) = (p.row(r).array() - top).exp().matrix();
    p.row(r) /= p.row(r).sum();
  }
  return p;
}

Labels GaussianNB::predict(const RowMatrix& x) const {
  const RowMatrix lj = log_joint(x);
  Labels out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax_lowest(lj.row(r));
  return out;
}

nlohmann::json GaussianNB::state() const {
  nlohmann::json prior = nlohmann::json::array();
  for (double v : log_prior_) prior.push_back(std::isfinite(v) ? nlohmann::json(v) : nlohmann::json(nullptr));
  return {{"mean", matrix_to_json(mean_)}, {"var", matrix_to_json(var_)}, {"log_prior", prior}};
}

void GaussianNB::load(const nlohmann::json& j, int) {
  mean_ = matrix_from_json(j.at("mean"));
  var_ = matrix_from_json(j.at("var"));
  const auto& prior = j.at("log_prior");
  log_prior_.resize(static_cast<Eigen::Index>(prior.size()));
  for (std::size_t c = 0; c < prior.size(); ++c)
    log_prior_[static_cast<Eigen::Index>(c)] =
        prior[c].is_null() ? -std::numeric_limits<double>::infinity() : prior[c].get<double>();
}

// ---- SVM --------------------------------------------------------------------------

BinarySvm smo_solve(const Eigen::MatrixXd& kernel, const Vector& y, double c, double tol, long max_iterations) {
  const Eigen::Index n = y.size();
  constexpr double tau = 1e-12;
  Vector alpha = Vector::Zero(n);
  Vector grad = Vector::Constant(n, -1.0);  // Q alpha - e
  const Vector diag = kernel.diagonal();
  auto in_up = [&](Eigen::Index t) { return (y[t] > 0 && alpha[t] < c) || (y[t] < 0 && alpha[t] > 0); };
  auto in_low = [&](Eigen::Index t) { return (y[t] > 0 && alpha[t] > 0) || (y[t] < 0 && alpha[t] < c); };

  BinarySvm out;
  long iter = 0;
  double gap = 0;
  for (;;) {
    double gmax = -std::numeric_limits<double>::infinity();
    Eigen::Index i = -1;
    for (Eigen::Index t = 0; t < n; ++t)
      if (in_up(t) && -y[t] * grad[t] >= gmax) {
        gmax = -y[t] * grad[t];
        i = t;
      }
    double gmax2 = -std::numeric_limits<double>::infinity();
    Eigen::Index j = -1;
    double obj_min = std::numeric_limits<double>::infinity();
    for (Eigen::Index t = 0; t < n; ++t) {
      if (!in_low(t)) continue;
      const double ygt = y[t] * grad[t];
      gmax2 = std::max(gmax2, ygt);
      const double b = gmax + ygt;
      if (i >= 0 && b > 0) {
        double a = diag[i] + diag[t] - 2.0 * kernel(i, t);
        if (a <= 0) a = tau;
        const double obj = -(b * b) / a;
        if (obj <= obj_min) {
          obj_min = obj;
          j = t;
        }
      }
    }
    gap = gmax + gmax2;
    if (gap < tol || j < 0) {
      out.converged = true;
      break;
    }
    if (iter >= max_iterations) break;
    ++iter;

    const double ai_old = alpha[i], aj_old = alpha[j];
    double quad = diag[i] + diag[j] - 2.0 * kernel(i, j);
    if (quad <= 0) quad = tau;
    if (y[i] != y[j]) {
      const double delta = (-grad[i] - grad[j]) / quad;
      const double diff = alpha[i] - alpha[j];
      alpha[i] += delta;
      alpha[j] += delta;
      if (diff > 0) {
        if (alpha[j] < 0) {
          alpha[j] = 0;
          alpha[i] = diff;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = -diff;
      }
      if (diff > 0) {
        if (alpha[i] > c) {
          alpha[i] = c;
          alpha[j] = c - diff;
        }
      } else if (alpha[j] > c) {
        alpha[j] = c;
        alpha[i] = c + diff;
      }
    } else {
      const double delta = (grad[i] - grad[j]) / quad;
      const double sum = alpha[i] + alpha[j];
      alpha[i] -= delta;
      alpha[j] += delta;
      if (sum > c) {
        if (alpha[i] > c) {
          alpha[i] = c;
          alpha[j] = sum - c;
        }
      } else if (alpha[j] < 0) {
        alpha[j] = 0;
        alpha[i] = sum;
      }
      if (sum > c) {
        if (alpha[j] > c) {
          alpha[j] = c;
          alpha[i] = sum - c;
        }
      } else if (alpha[i] < 0) {
        alpha[i] = 0;
        alpha[j] = sum;
      }
    }
    const double di = (alpha[i] - ai_old) * y[i];
    const double dj = (alpha[j] - aj_old) * y[j];
    grad.array() += y.array() * (kernel.col(i).array() * di + kernel.col(j).array() * dj);
  }

  double ub = std::numeric_limits<double>::infinity(), lb = -ub, sum_free = 0;
  int n_free = 0;
  for (Eigen::Index t = 0; t < n; ++t) {
    const double yg = y[t] * grad[t];
    if (alpha[t] >= c) {
      if (y[t] < 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else if (alpha[t] <= 0) {
      if (y[t] > 0) ub = std::min(ub, yg);
      else lb = std::max(lb, yg);
    } else {
      ++n_free;
      sum_free += yg;
    }
  }
  out.rho = n_free > 0 ? sum_free / n_free : 0.5 * (ub + lb);
  for (Eigen::Index t = 0; t < n; ++t)
    if (alpha[t] > 0) out.support.push_back(static_cast<int>(t));
  out.coef.resize(static_cast<Eigen::Index>(out.support.size()));
  for (std::size_t s = 0; s < out.support.size(); ++s)
    out.coef[static_cast<Eigen::Index>(s)] = y[out.support[s]] * alpha[out.support[s]];
  out.kkt_gap = gap;
  out.iterations = static_cast<int>(iter);
  return out;
}

Eigen::MatrixXd SvmClassifier::kernel_matrix(const RowMatrix& a, const RowMatrix& b) const {
  Eigen::MatrixXd k = a * b.transpose();
  switch (params_.kernel) {
    case KernelKind::linear:
      break;
    case KernelKind::rbf: {
      const Vector na = a.rowwise().squaredNorm();
      const Vector nb = b.rowwise().squaredNorm();
      for (Eigen::Index j = 0; j < k.cols(); ++j)
        for (Eigen::Index i = 0; i < k.rows(); ++i)
          k(i, j) = std::exp(-gamma_ * std::max(na[i] + nb[j] - 2.0 * k(i, j), 0.0));
      break;
    }
    case KernelKind::poly:
      k = (gamma_ * k.array() + params_.coef0).pow(params_.degree).matrix();
      break;
  }
  return k;
}

void SvmClassifier::fit(const RowMatrix& x, const Labels& y, int n_classes) {
  check_training_input(x, y, n_classes);
  if (!(params_.c > 0)) throw DataError("svm C must be > 0");
  if (!(params_.tol > 0)) throw DataError("svm tol must be > 0");
  if (params_.degree < 1) throw DataError("svm degree must be >= 1");
  if (params_.gamma > 0) {
    gamma_ = params_.gamma;
  } else {
    const double var = (x.array() - x.mean()).square().mean();
    gamma_ = var > 0 ? 1.0 / (static_cast<double>(x.cols()) * var) : 1.0;
  }
  const Eigen::MatrixXd gram = kernel_matrix(x, x);
  const long cap = static_cast<long>(params_.max_passes) * static_cast<long>(x.rows());
  std::vector<BinarySvm> machines;
  std::set<int> used;
  for (int k = 0; k < n_classes; ++k) {
    Vector yk(x.rows());
    for (Eigen::Index i = 0; i < x.rows(); ++i) yk[i] = y[static_cast<std::size_t>(i)] == k ? 1.0 : -1.0;
    machines.push_back(smo_solve(gram, yk, params_.c, params_.tol, cap));
    used.insert(machines.back().support.begin(), machines.back().support.end());
  }
  std::vector<int> remap(static_cast<std::size_t>(x.rows()), -1);
  support_x_.resize(static_cast<Eigen::Index>(used.size()), x.cols());
  int s = 0;
  for (int r : used) {
    remap[static_cast<std::size_t>(r)] = s;
    support_x_.row(s++) = x.row(r);
  }
  for (auto& m : machines)
    for (auto& idx : m.support) idx = remap[static_cast<std::size_t>(idx)];
  machines_ = std::move(machines);
}

RowMatrix SvmClassifier::decision_function(const RowMatrix& x) const {
  if (machines_.empty()) throw NotFittedError("svm model is not fitted");
  check_query(x, support_x_.cols());
  const Eigen::MatrixXd k = kernel_matrix(x, support_x_);
  RowMatrix out(x.rows(), static_cast<Eigen::Index>(machines_.size()));
  for (std::size_t m = 0; m < machines_.size(); ++m) {
    const auto& mach = machines_[m];
    for (Eigen::Index r = 0; r < x.rows(); ++r) {
      double f = -mach.rho;
      for (std::size_t s = 0; s < mach.support.size(); ++s) f += mach.coef[static_cast<Eigen::Index>(s)] * k(r, mach.support[s]);
      out(r, static_cast<Eigen::Index>(m)) = f;
    }
  }
  return out;
}

Labels SvmClassifier::predict(const RowMatrix& x) const {
  const RowMatrix f = decision_function(x);
  Labels out(static_cast<std::size_t>(x.rows()));
  for (Eigen::Index r = 0; r < x.rows(); ++r) out[static_cast<std::size_t>(r)] = argmax_lowest(f.row(r));
  return out;
}

Vector SvmClassifier::linear_weights(int k) const {
  if (params_.kernel != KernelKind::linear) throw DataError("primal weights exist only for the linear kernel");
  const auto& m = machines_.at(static_cast<std::size_t>(k));
  Vector w = Vector::Zero(support_x_.cols());
  for (std::size_t s = 0; s < m.support.size(); ++s) w += m.coef[static_cast<Eigen::Index>(s)] * support_x_.row(m.support[s]).transpose();
  return w;
}

nlohmann::json SvmClassifier::state() const {
  nlohmann::json machines = nlohmann::json::array();
  for (const auto& m : machines_)
    machines.push_back({{"support", m.support},
                        {"coef", to_std(m.coef)},
                        {"rho", m.rho},
                        {"kkt_gap", m.kkt_gap},
                        {"iterations", m.iterations},
                        {"converged", m.converged}});
  return {{"gamma", gamma_}, {"support_x", matrix_to_json(support_x_)}, {"machines", machines}};
}

void SvmClassifier::load(const nlohmann::json& j, int) {
  gamma_ = j.at("gamma").get<double>();
  support_x_ = matrix_from_json(j.at("support_x"));
  machines_.clear();
  for (const auto& m : j.at("machines")) {
    BinarySvm b;
    b.support = m.at("support").get<std::vector<int>>();
    b.coef = vector_from_json(m.at("coef"));
    b.rho = m.at("rho").get<double>();
    b.kkt_gap = m.at("kkt_gap").get<double>();
    b.iterations = m.at("iterations").get<int>();
    b.converged = m.at("converged").get<bool>();
    machines_.push_back(std::move(b));
  }
}

// ---- MlModel ------------------------------------------------------------------------

namespace {

using Impl = std::variant<KnnClassifier, DecisionTree, RandomForest, GaussianNB, SvmClassifier>;

Impl make_impl(ModelKind kind, const Hyperparams& hp, std::uint64_t seed) {
  ParamReader r(hp, to_string(kind));
  switch (kind) {
    case ModelKind::knn: {
      KnnParams p;
      r.read("k", p.k);
      r.read("p", p.p);
      r.finish();
      return KnnClassifier(p);
    }
    case ModelKind::dtree: {
      TreeParams p;
      r.read("min_leaf", p.min_leaf);
      r.read("min_split", p.min_split);
      r.read("max_depth", p.max_depth);
      r.finish();
      return DecisionTree(p);
    }
    case ModelKind::rforest: {
      ForestParams p;
      r.read("n_estimators", p.n_estimators);
      r.read("max_depth", p.max_depth);
      r.read("min_leaf", p.min_leaf);
      r.read("min_split", p.min_split);
      r.read("bootstrap", p.bootstrap);
      std::string mf = "sqrt";
      r.read("max_features", mf);
      r.finish();
      if (mf == "sqrt") {
        p.max_features = -1;
      } else if (mf == "all") {
        p.max_features = 0;
      } else {
        const Hyperparams one{{"max_features", mf}};
        ParamReader(one, "rforest").read("max_features", p.max_features);
        if (p.max_features < 1) throw DataError("rforest max_features must be sqrt, all or >= 1");
      }
      return RandomForest(p, seed);
    }
    case ModelKind::gnb: {
      GnbParams p;
      r.read("var_smoothing", p.var_smoothing);
      r.finish();
      return GaussianNB(p);
    }
    case ModelKind::svm: {
      SvmParams p;
      r.read("C", p.c);
      r.read("gamma", p.gamma);
      r.read("degree", p.degree);
      r.read("coef0", p.coef0);
      r.read("tol", p.tol);
      r.read("max_passes", p.max_passes);
      std::string kernel = "rbf";
      r.read("kernel", kernel);
      r.finish();
      p.kernel = parse_kernel(kernel);
      return SvmClassifier(p);
    }
  }
  throw DataError("unknown classifier kind");
}

}  // namespace

MlModel::MlModel(ModelKind kind, Hyperparams hyperparams, std::uint64_t seed)
    : kind_(kind), hyperparams_(std::move(hyperparams)), seed_(seed), impl_(make_impl(kind, hyperparams_, seed)) {}

MlModel& MlModel::fit(const RowMatrix& x, const Labels& y, int n_classes) {
  check_training_input(x, y, n_classes);
  std::visit([&](auto& m) { m.fit(x, y, n_classes); }, impl_);
  n_classes_ = n_classes;
  return *this;
}

Labels MlModel::predict(const RowMatrix& x) const {
  if (!fitted()) throw NotFittedError(to_string(kind_) + " model is not fitted");
  return std::visit([&](const auto& m) { return m.predict(x); }, impl_);
}

nlohmann::json to_json(const MlModel& m) {
  if (!m.fitted()) throw NotFittedError("cannot serialize an unfitted model");
  nlohmann::json j;
  j["format"] = "specbench-mlmodel";
  j["version"] = 1;
  j["kind"] = to_string(m.kind_);
  j["hyperparams"] = m.hyperparams_;
  j["seed"] = m.seed_;
  j["n_classes"] = m.n_classes_;
  j["state"] = std::visit([](const auto& impl) { return impl.state(); }, m.impl_);
  return j;
}

MlModel ml_model_from_json(const nlohmann::json& j) {
  try {
    if (j.at("format") != "specbench-mlmodel") throw DataError("not a classifier document");
    if (j.at("version").get<int>() != 1) throw DataError("unsupported classifier document version");
    MlModel m(parse_model_kind(j.at("kind").get<std::string>()), j.at("hyperparams").get<Hyperparams>(),
              j.at("seed").get<std::uint64_t>());
    m.n_classes_ = j.at("n_classes").get<int>();
    std::visit([&](auto& impl) { impl.load(j.at("state"), m.n_classes_); }, m.impl_);
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed classifier document: ") + e.what());
  }
}

Hyperparams default_hyperparams(ModelKind kind) {
  switch (kind) {
    case ModelKind::knn: return {{"k", "9"}, {"p", "2"}};
    case ModelKind::dtree: return {};
    case ModelKind::rforest: return {{"n_estimators", "100"}};
    case ModelKind::gnb: return {{"var_smoothing", "1e-2"}};
    case ModelKind::svm: return {{"kernel", "rbf"}, {"C", "100"}};
  }
  return {};
}

// ---- PCA ----------------------------------------------------------------------------

PcaModel pca_fit(const RowMatrix& x, int n_components) {
  if (x.rows() < 2) throw DataError("PCA needs at least 2 rows");
  if (!x.allFinite()) throw DataError("PCA input contains NaN or infinite values");
  const auto limit = std::min(x.rows(), x.cols());
  if (n_components < 1 || n_components > limit)
    throw DataError("n_components " + std::to_string(n_components) + " outside [1, " + std::to_string(limit) + "]");
  PcaModel m;
  m.mean = x.colwise().mean().transpose();
  const Eigen::MatrixXd centered = x.rowwise() - m.mean.transpose();
  Eigen::BDCSVD<Eigen::MatrixXd> svd(centered, Eigen::ComputeThinV);
  const Vector s = svd.singularValues();
  const double total = s.squaredNorm();
  m.components = svd.matrixV().leftCols(n_components).transpose();
  for (Eigen::Index k = 0; k < m.components.rows(); ++k) {
    Eigen::Index at = 0;
    m.components.row(k).cwiseAbs().maxCoeff(&at);
    if (m.components(k, at) < 0) m.components.row(k) *= -1.0;
  }
  const Vector head = s.head(n_components);
  m.explained_variance = head.array().square() / static_cast<double>(x.rows() - 1);
  m.explained_variance_ratio = total > 0 ? Vector(head.array().square() / total) : Vector::Zero(n_components);
  return m;
}

RowMatrix pca_transform(const PcaModel& m, const RowMatrix& x) {
  if (x.cols() != m.mean.size()) throw DataError("PCA input width does not match the fitted model");
  return (x.rowwise() - m.mean.transpose()) * m.components.transpose();
}

RowMatrix pca_inverse_transform(const PcaModel& m, const RowMatrix& scores) {
  if (scores.cols() != m.components.rows()) throw DataError("score width does not match n_components");
  RowMatrix out = scores * m.components;
  out.rowwise() += m.mean.transpose();
  return out;
}

// ---- grid search ----------------------------------------------------------------------

GridResult grid_search(ModelKind kind, const ParamGrid& grid, const SpectraDataset& d, std::uint64_t seed,
                       std::span<const double> fractions, int threads) {
  if (grid.empty()) throw DataError("hyperparameter grid is empty");
  std::size_t cells = 1;
  GridResult result;
  for (const auto& [name, values] : grid) {
    if (values.empty()) throw DataError("hyperparameter axis '" + name + "' has no values");
    cells *= values.size();
    result.param_names.push_back(name);
  }
  const std::vector<double> default_fractions{0.8, 0.2};
  const SplitIndices split =
      stratified_split(d, fractions.empty() ? std::span<const double>(default_fractions) : fractions, seed);
  const SpectraDataset train = d.subset(split.train);
  const SpectraDataset test = d.subset(split.test);

  result.rows.resize(cells);
  for (std::size_t cell = 0; cell < cells; ++cell) {
    std::size_t rest = cell;
    for (std::size_t a = grid.size(); a-- > 0;) {
      const auto& values = grid[a].second;
      result.rows[cell].params[grid[a].first] = values[rest % values.size()];
      rest /= values.size();
    }
  }
  parallel_for(cells, threads, [&](std::size_t cell) {
    GridRow& row = result.rows[cell];
    try {
      MlModel model(kind, row.params, seed);
      model.fit(train.rows(), train.labels(), d.n_classes());
      row.accuracy = evaluate(model.predict(test.rows()), test.labels(), d.n_classes()).accuracy();
    } catch (const std::exception& e) {
      row.accuracy = std::numeric_limits<double>::quiet_NaN();
      row.error = e.what();
    }
  });
  for (std::size_t i = 0; i < cells; ++i) {
    const double a = result.rows[i].accuracy;
    if (std::isnan(a)) continue;
    if (result.best < 0 || a > result.rows[static_cast<std::size_t>(result.best)].accuracy) result.best = static_cast<int>(i);
  }
  return result;
}

void write_grid_csv(const GridResult& g, std::ostream& out) {
  for (const auto& name : g.param_names) out << name << ',';
  out << "accuracy\n";
  for (const auto& row : g.rows) {
    for (const auto& name : g.param_names) out << row.params.at(name) << ',';
    out << format_double(row.accuracy) << '\n';
  }
}

}  // namespace specbench
