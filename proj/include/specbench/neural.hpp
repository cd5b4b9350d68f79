#pragma once

#include <cstdint>
#include <initializer_list>
#include <iosfwd>
#include <memory>
#include <span>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "specbench/core.hpp"
#include "specbench/seed.hpp"

namespace specbench::nn {

/// Aligned allocator whose argument-less construct() leaves doubles
/// uninitialised, so buffers that are about to be overwritten skip a pass.
template <typename T>
struct UninitAllocator : Eigen::aligned_allocator<T> {
  using Eigen::aligned_allocator<T>::aligned_allocator;
  template <typename U>
  struct rebind {
    using other = UninitAllocator<U>;
  };
  template <typename U>
  void construct(U* p) noexcept(std::is_nothrow_default_constructible_v<U>) {
    ::new (static_cast<void*>(p)) U;
  }
  template <typename U, typename... Args>
  void construct(U* p, Args&&... args) {
    ::new (static_cast<void*>(p)) U(std::forward<Args>(args)...);
  }
};

/// Storage aligned for the widest vector unit, so Eigen reductions take the
/// same code path, and give the same bits, wherever the buffer lands.
using Buffer = std::vector<double, UninitAllocator<double>>;

/// Dense fp64 array, row-major. Batches are laid out [N, C, L] or [N, F].
class Tensor {
 public:
  Tensor() = default;
  explicit Tensor(std::vector<int> shape, double fill = 0.0);
  Tensor(std::vector<int> shape, std::initializer_list<double> data);
  Tensor(std::vector<int> shape, Buffer data);
  /// Contents unspecified; for outputs that are written in full.
  static Tensor uninitialized(std::vector<int> shape);

  const std::vector<int>& shape() const noexcept { return shape_; }
  int dim(std::size_t i) const { return shape_.at(i); }
  std::size_t rank() const noexcept { return shape_.size(); }
  std::size_t size() const noexcept { return data_.size(); }

  double* data() noexcept { return data_.data(); }
  const double* data() const noexcept { return data_.data(); }
  Buffer& values() noexcept { return data_; }
  const Buffer& values() const noexcept { return data_; }
  double& operator[](std::size_t i) { return data_[i]; }
  double operator[](std::size_t i) const { return data_[i]; }

  /// Row-major view as rows x (size / rows).
  Eigen::Map<RowMatrix> matrix(Eigen::Index rows);
  Eigen::Map<const RowMatrix> matrix(Eigen::Index rows) const;

  Tensor reshaped(std::vector<int> shape) const;
  bool all_finite() const;

 private:
  std::vector<int> shape_;
  Buffer data_;
};

std::string shape_string(const std::vector<int>& shape);

/// A trainable array and its gradient.
struct Param {
  std::string name;
  Tensor value;
  Tensor grad;
};

// ---- layer specifications ---------------------------------------------------

enum class LayerKind { conv1d, relu, batchnorm, avgpool, maxpool, flatten, dense, global_avgpool, softmax };

std::string to_string(LayerKind k);

struct LayerSpec {
  LayerKind kind = LayerKind::relu;
  int kernel = 0;   // conv1d
  int filters = 0;  // conv1d output channels
  int pool = 0;     // avgpool / maxpool window (stride equal to window)
  int units = 0;    // dense outputs

  static LayerSpec conv(int kernel, int filters) { return {LayerKind::conv1d, kernel, filters, 0, 0}; }
  static LayerSpec dense(int units) { return {LayerKind::dense, 0, 0, 0, units}; }
  static LayerSpec avg(int pool = 2) { return {LayerKind::avgpool, 0, 0, pool, 0}; }
  static LayerSpec max(int pool = 2) { return {LayerKind::maxpool, 0, 0, pool, 0}; }
  static LayerSpec of(LayerKind k) { return {k, 0, 0, 0, 0}; }

  void validate() const;
  std::string describe() const;
};

/// Architecture description. With `branches` non-empty, every branch runs
/// on the input, the flattened branch outputs are concatenated, and `layers`
/// form the head after the merge.
struct ModelSpec {
  std::string name;
  std::vector<std::vector<LayerSpec>> branches;
  std::vector<LayerSpec> layers;
};

/// Known architectures: "FC", "CNN", "FullCNN", "MHCNN".
std::vector<std::string> model_names();
bool is_model_name(const std::string& name);
ModelSpec build_model(const std::string& name, int n_classes = 4);

/// Per-sample shape after each layer, starting from [1, input_length].
struct ShapeStep {
  std::string where;  // "input", "b<i>.<j> <layer>", "concat", "<j> <layer>"
  std::vector<int> shape;
};
std::vector<ShapeStep> trace_shapes(const ModelSpec& spec, int input_length = kStandardBins);

// ---- layers -------------------------------------------------------------------

class Layer {
 public:
  virtual ~Layer() = default;
  virtual std::string name() const = 0;
  /// `training` selects batch statistics in batchnorm and enables caching
  /// for backward.
  virtual Tensor forward(const Tensor& x, bool training) = 0;
  /// Gradient w.r.t. the input of the last training-mode forward; parameter
  /// gradients are accumulated into Param::grad.
  virtual Tensor backward(const Tensor& grad_out) = 0;
  virtual std::vector<Param*> params() { return {}; }
  virtual void init(Rng&) {}
  /// Activation pattern of the last forward (ReLU masks, max-pool argmax);
  /// the gradient is only smooth where this pattern is locally constant.
  virtual void pattern(std::vector<int>&) const {}
  virtual nlohmann::json state() const;
  virtual void load(const nlohmann::json& j);
  virtual std::unique_ptr<Layer> clone() const = 0;
};

class Conv1d final : public Layer {
 public:
  Conv1d(int in_channels, int out_channels, int kernel);
  std::string name() const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Param*> params() override { return {&w_, &b_}; }
  void init(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Conv1d>(*this); }

 private:
  int in_, out_, k_;
  Param w_;  // [out, in * k]
  Param b_;  // [out]
  Tensor x_;
};

class Relu final : public Layer {
 public:
  std::string name() const override { return "relu"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void pattern(std::vector<int>& out) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Relu>(*this); }

 private:
  std::vector<unsigned char> mask_;
};

/// Per-channel normalisation over the batch (and length for [N, C, L]).
class BatchNorm final : public Layer {
 public:
  explicit BatchNorm(int channels, double momentum = 0.1, double eps = 1e-5);
  std::string name() const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Param*> params() override { return {&gamma_, &beta_}; }
  nlohmann::json state() const override;
  void load(const nlohmann::json& j) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<BatchNorm>(*this); }

  /// Between begin_census() and end_census(), eval-mode forwards also pool
  /// the exact mean and variance of every input seen; end_census() stores
  /// them (variance unbiased) as the running statistics.
  void begin_census();
  void end_census();
  const Vector& running_mean() const noexcept { return running_mean_; }
  const Vector& running_var() const noexcept { return running_var_; }

 private:
  int c_;
  double momentum_, eps_;
  Param gamma_, beta_;
  Vector running_mean_, running_var_;
  Tensor xhat_;
  Vector inv_std_;
  std::vector<int> in_shape_;
  bool census_ = false;
  double census_count_ = 0.0;
  Vector census_mean_, census_m2_;
};

class Pool final : public Layer {
 public:
  Pool(bool max, int window);
  std::string name() const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  void pattern(std::vector<int>& out) const override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Pool>(*this); }

 private:
  bool max_;
  int w_;
  std::vector<int> in_shape_;
  std::vector<int> argmax_;
};

class Flatten final : public Layer {
 public:
  std::string name() const override { return "flatten"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Flatten>(*this); }

 private:
  std::vector<int> in_shape_;
};

class Dense final : public Layer {
 public:
  Dense(int in, int out);
  std::string name() const override;
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::vector<Param*> params() override { return {&w_, &b_}; }
  void init(Rng& rng) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<Dense>(*this); }

 private:
  int in_, out_;
  Param w_;  // [out, in]
  Param b_;  // [out]
  Tensor x_;
};

class GlobalAvgPool final : public Layer {
 public:
  std::string name() const override { return "global_avgpool"; }
  Tensor forward(const Tensor& x, bool training) override;
  Tensor backward(const Tensor& grad_out) override;
  std::unique_ptr<Layer> clone() const override { return std::make_unique<GlobalAvgPool>(*this); }

 private:
  std::vector<int> in_shape_;
};

/// Row-wise softmax of [N, K] logits.
Tensor softmax(const Tensor& logits);

/// Mean categorical cross-entropy of softmax(logits); `grad` receives the
/// gradient w.r.t. the logits when non-null.
double softmax_cross_entropy(const Tensor& logits, const Labels& y, Tensor* grad = nullptr);

// ---- network --------------------------------------------------------------------

class Sequential {
 public:
  Sequential() = default;
  Sequential(const Sequential& other);
  Sequential& operator=(const Sequential& other);
  Sequential(Sequential&&) noexcept = default;
  Sequential& operator=(Sequential&&) noexcept = default;

  void add(std::unique_ptr<Layer> layer) { layers_.push_back(std::move(layer)); }
  Tensor forward(const Tensor& x, bool training);
  Tensor backward(const Tensor& grad);
  std::vector<Param*> params();
  void init(Rng& rng);
  void pattern(std::vector<int>& out) const;
  std::vector<std::unique_ptr<Layer>>& layers() { return layers_; }
  const std::vector<std::unique_ptr<Layer>>& layers() const { return layers_; }

 private:
  std::vector<std::unique_ptr<Layer>> layers_;
};

/// Executable form of a ModelSpec: optional parallel branches, then the
/// trunk. forward() returns logits; a trailing softmax layer is applied
/// by predict_proba and fused into the loss during training.
class Network {
 public:
  explicit Network(const ModelSpec& spec, int input_length = kStandardBins);

  const ModelSpec& spec() const noexcept { return spec_; }
  int input_length() const noexcept { return input_length_; }
  Tensor forward(const Tensor& x, bool training);
  void backward(const Tensor& grad_logits);
  std::vector<Param*> params();
  void zero_grad();
  void init(std::uint64_t seed);
  void pattern(std::vector<int>& out) const;
  std::size_t n_parameters();

  Tensor predict_proba(const Tensor& x);

  /// Sets every batchnorm running statistic to the exact statistic of its
  /// eval-mode input over `rows`, layer by layer from the input side, in
  /// chunks of `batch` rows.
  void recalibrate_batchnorm(const RowMatrix& rows, int batch);

  nlohmann::json state() const;
  void load(const nlohmann::json& j);

 private:
  ModelSpec spec_;
  int input_length_;
  std::vector<Sequential> branches_;
  std::vector<int> branch_width_;
  Sequential trunk_;
  int batch_ = 0;
};

/// Input batch [N, 1, L] from dataset rows.
Tensor to_batch(const RowMatrix& rows);
Tensor to_batch(const RowMatrix& rows, std::span<const int> indices);

// ---- optimisation -------------------------------------------------------------------

struct AdamConfig {
  double lr = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

class Adam {
 public:
  Adam(std::vector<Param*> params, AdamConfig cfg = {});
  void step();
  long steps() const noexcept { return t_; }

 private:
  std::vector<Param*> params_;
  AdamConfig cfg_;
  std::vector<Vector> m_, v_;
  long t_ = 0;
};

struct TrainConfig {
  int batch_size = 64;
  int epochs = 30;
  std::uint64_t seed = 0;
  AdamConfig adam;
  /// Recompute batchnorm running statistics over the training rows before
  /// any evaluation (after each epoch with a validation split, else once at
  /// the end). The weights are unaffected.
  bool recalibrate_batchnorm = true;

  void validate() const;
};

/// Batch size used for each architecture: CNN 64, FullCNN 16, MHCNN 128, FC 64.
int default_batch_size(const std::string& model_name);

struct EpochRecord {
  int epoch = 0;
  double train_loss = 0.0;
  double val_accuracy = 0.0;  // NaN without a validation split
};

struct History {
  std::vector<EpochRecord> epochs;
  /// Epoch with the highest validation accuracy (first on ties), -1 without
  /// a validation split.
  int best_val_epoch() const;
};

void write_history_csv(const History& h, std::ostream& out);

struct TrainedModel {
  std::shared_ptr<Network> network;
  History history;
  std::uint64_t seed = 0;
  int epochs = 0;
  int n_classes = 0;
};

/// Adam on the fused softmax cross-entropy. Rows are reshuffled every epoch
/// from derive_seed(seed, {1, epoch}); weights start from derive_seed(seed, {0}).
TrainedModel train(const ModelSpec& spec, const SpectraDataset& d, const SplitIndices& split, const TrainConfig& cfg);

struct Prediction {
  Labels labels;
  RowMatrix probabilities;
};

/// Eval-mode inference in chunks of `batch` rows.
Prediction predict(const TrainedModel& m, const RowMatrix& x, int batch = 256);

nlohmann::json checkpoint(const TrainedModel& m);
TrainedModel load_checkpoint(const nlohmann::json& j);

// ---- gradient checking ----------------------------------------------------------------

struct GradCheck {
  double max_rel_error = 0.0;
  int checked = 0;
  int skipped = 0;  // coordinates whose perturbation flipped the activation pattern
  std::string worst;
};

/// Gradient checks report |a - n| / max(|a|, |n|, f) where f is this
/// fraction of the largest analytic |gradient| in the same tensor.
inline constexpr double kTensorFloorFraction = 1e-2;

/// Central differences of loss = sum(r * layer(x)) for fixed random r,
/// against backward(), for every input and parameter coordinate.
GradCheck check_layer_gradients(Layer& layer, const Tensor& x, std::uint64_t seed, double h = 1e-5);

/// Central differences of the training loss of a whole network; at most
/// `per_tensor` randomly chosen coordinates of each parameter tensor.
GradCheck check_network_gradients(Network& net, const Tensor& x, const Labels& y, std::uint64_t seed,
                                  int per_tensor = 40, double h = 1e-5);

/// |a - n| / max(|a|, |n|, floor).
double relative_error(double analytic, double numeric, double floor = 1e-8);

}  // namespace specbench::nn
