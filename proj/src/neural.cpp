#include "specbench/neural.hpp"

#include <algorithm>
#include <cmath>
#include <cstring>
#include <functional>
#include <limits>
#include <numeric>
#include <ostream>

#include "specbench/io.hpp"

namespace specbench::nn {

namespace {

std::size_t product(const std::vector<int>& shape) {
  std::size_t n = 1;
  for (int d : shape) {
    if (d < 0) throw DataError("negative tensor dimension");
    n *= static_cast<std::size_t>(d);
  }
  return n;
}

void require_rank(const Tensor& x, std::size_t rank, const std::string& who) {
  if (x.rank() != rank) throw DataError(who + " expects a rank-" + std::to_string(rank) + " input, got " + shape_string(x.shape()));
}

Param make_param(std::string name, std::vector<int> shape) {
  Tensor value(shape);
  Tensor grad(std::move(shape));
  return {std::move(name), std::move(value), std::move(grad)};
}

void fill_uniform(Tensor& t, double bound, Rng& rng) {
  std::uniform_real_distribution<double> u(-bound, bound);
  for (auto& v : t.values()) v = u(rng);
}

int argmax_lowest(const auto& row) {
  int best = 0;
  for (int c = 1; c < static_cast<int>(row.size()); ++c)
    if (row[c] > row[best]) best = c;
  return best;
}

}  // namespace

// ---- Tensor ---------------------------------------------------------------------

Tensor::Tensor(std::vector<int> shape, double fill) : shape_(std::move(shape)), data_(product(shape_), fill) {}

Tensor::Tensor(std::vector<int> shape, std::initializer_list<double> data) : Tensor(std::move(shape), Buffer(data)) {}

Tensor::Tensor(std::vector<int> shape, Buffer data) : shape_(std::move(shape)), data_(std::move(data)) {
  if (product(shape_) != data_.size())
    throw DataError("tensor shape " + shape_string(shape_) + " does not match " + std::to_string(data_.size()) + " values");
}

Eigen::Map<RowMatrix> Tensor::matrix(Eigen::Index rows) {
  return {data_.data(), rows, rows == 0 ? 0 : static_cast<Eigen::Index>(data_.size()) / rows};
}

Eigen::Map<const RowMatrix> Tensor::matrix(Eigen::Index rows) const {
  return {data_.data(), rows, rows == 0 ? 0 : static_cast<Eigen::Index>(data_.size()) / rows};
}

Tensor Tensor::uninitialized(std::vector<int> shape) {
  Tensor t;
  t.data_.resize(product(shape));
  t.shape_ = std::move(shape);
  return t;
}

Tensor Tensor::reshaped(std::vector<int> shape) const { return Tensor(std::move(shape), data_); }

bool Tensor::all_finite() const {
  return std::all_of(data_.begin(), data_.end(), [](double v) { return std::isfinite(v); });
}

std::string shape_string(const std::vector<int>& shape) {
  std::string s = "[";
  for (std::size_t i = 0; i < shape.size(); ++i) s += (i ? ", " : "") + std::to_string(shape[i]);
  return s + "]";
}

// ---- specs ------------------------------------------------------------------------

std::string to_string(LayerKind k) {
  switch (k) {
    case LayerKind::conv1d: return "conv1d";
    case LayerKind::relu: return "relu";
    case LayerKind::batchnorm: return "batchnorm";
    case LayerKind::avgpool: return "avgpool";
    case LayerKind::maxpool: return "maxpool";
    case LayerKind::flatten: return "flatten";
    case LayerKind::dense: return "dense";
    case LayerKind::global_avgpool: return "global_avgpool";
    case LayerKind::softmax: return "softmax";
  }
  return "?";
}

void LayerSpec::validate() const {
  switch (kind) {
    case LayerKind::conv1d:
      if (kernel < 1) throw DataError("conv1d kernel must be >= 1");
      if (filters < 1) throw DataError("conv1d filter count must be >= 1");
      break;
    case LayerKind::avgpool:
    case LayerKind::maxpool:
      if (pool < 2) throw DataError("pool size must be >= 2");
      break;
    case LayerKind::dense:
      if (units < 1) throw DataError("dense units must be >= 1");
      break;
    default:
      break;
  }
}

std::string LayerSpec::describe() const {
  switch (kind) {
    case LayerKind::conv1d: return "conv1d(k=" + std::to_string(kernel) + ", filters=" + std::to_string(filters) + ")";
    case LayerKind::avgpool: return "avgpool(" + std::to_string(pool) + ")";
    case LayerKind::maxpool: return "maxpool(" + std::to_string(pool) + ")";
    case LayerKind::dense: return "dense(" + std::to_string(units) + ")";
    default: return to_string(kind);
  }
}

std::vector<std::string> model_names() { return {"FC", "CNN", "FullCNN", "MHCNN"}; }

bool is_model_name(const std::string& name) {
  const auto names = model_names();
  return std::find(names.begin(), names.end(), name) != names.end();
}

namespace {

using L = LayerSpec;

std::vector<LayerSpec> conv_stack() {
  std::vector<LayerSpec> out;
  for (auto [k, f] : {std::pair{9, 2}, {7, 2}, {7, 4}, {5, 8}, {3, 12}}) {
    out.push_back(L::conv(k, f));
    out.push_back(L::of(LayerKind::relu));
    out.push_back(L::of(LayerKind::batchnorm));
    out.push_back(L::avg(2));
  }
  return out;
}

}  // namespace

ModelSpec build_model(const std::string& name, int n_classes) {
  if (n_classes < 2) throw DataError("a network needs at least 2 classes");
  ModelSpec m;
  m.name = name;
  const auto relu = L::of(LayerKind::relu);
  const auto bn = L::of(LayerKind::batchnorm);
  if (name == "FC") {
    m.layers.push_back(L::of(LayerKind::flatten));
    for (int units : {1024, 512, 256, 128, 64, 16, n_classes}) {
      m.layers.push_back(L::dense(units));
      m.layers.push_back(relu);
      m.layers.push_back(bn);
    }
  } else if (name == "CNN") {
    m.layers = conv_stack();
    for (const auto& l : {L::of(LayerKind::flatten), L::dense(128), relu, bn, L::dense(n_classes), relu})
      m.layers.push_back(l);
  } else if (name == "FullCNN") {
    m.layers = conv_stack();
    for (const auto& l : {L::conv(1, n_classes), relu, bn, L::of(LayerKind::global_avgpool)}) m.layers.push_back(l);
  } else if (name == "MHCNN") {
    for (int k : {3, 5, 7})
      m.branches.push_back({L::conv(k, 16), relu, bn, L::max(2), L::conv(k, 4), relu, bn, L::max(2),
                            L::of(LayerKind::flatten)});
    m.layers.push_back(L::dense(n_classes));
  } else {
    throw DataError("unknown architecture '" + name + "' (FC, CNN, FullCNN, MHCNN)");
  }
  m.layers.push_back(L::of(LayerKind::softmax));
  return m;
}

namespace {

// Per-sample shape after `l`; throws DataError when the layer cannot apply.
std::vector<int> propagate(const LayerSpec& l, const std::vector<int>& in) {
  l.validate();
  const std::string where = l.describe() + " on " + shape_string(in);
  switch (l.kind) {
    case LayerKind::conv1d:
      if (in.size() != 2) throw DataError(where + ": needs [C, L]");
      if (in[1] < l.kernel) throw DataError(where + ": length shorter than kernel");
      return {l.filters, in[1] - l.kernel + 1};
    case LayerKind::avgpool:
    case LayerKind::maxpool:
      if (in.size() != 2 || in[1] < l.pool) throw DataError(where + ": length shorter than pool");
      return {in[0], in[1] / l.pool};
    case LayerKind::flatten:
      return {static_cast<int>(product(in))};
    case LayerKind::dense:
      if (in.size() != 1) throw DataError(where + ": needs a flat input");
      return {l.units};
    case LayerKind::global_avgpool:
      if (in.size() != 2) throw DataError(where + ": needs [C, L]");
      return {in[0]};
    default:
      return in;
  }
}

std::unique_ptr<Layer> instantiate(const LayerSpec& l, const std::vector<int>& in) {
  switch (l.kind) {
    case LayerKind::conv1d: return std::make_unique<Conv1d>(in[0], l.filters, l.kernel);
    case LayerKind::relu: return std::make_unique<Relu>();
    case LayerKind::batchnorm: return std::make_unique<BatchNorm>(in[0]);
    case LayerKind::avgpool: return std::make_unique<Pool>(false, l.pool);
    case LayerKind::maxpool: return std::make_unique<Pool>(true, l.pool);
    case LayerKind::flatten: return std::make_unique<Flatten>();
    case LayerKind::dense: return std::make_unique<Dense>(in[0], l.units);
    case LayerKind::global_avgpool: return std::make_unique<GlobalAvgPool>();
    case LayerKind::softmax: break;
  }
  throw DataError("softmax is only allowed as the final layer");
}

}  // namespace

std::vector<ShapeStep> trace_shapes(const ModelSpec& spec, int input_length) {
  std::vector<ShapeStep> steps{{"input", {1, input_length}}};
  std::vector<int> shape{1, input_length};
  if (!spec.branches.empty()) {
    int width = 0;
    for (std::size_t b = 0; b < spec.branches.size(); ++b) {
      std::vector<int> s{1, input_length};
      for (std::size_t j = 0; j < spec.branches[b].size(); ++j) {
        s = propagate(spec.branches[b][j], s);
        steps.push_back({"b" + std::to_string(b) + "." + std::to_string(j) + " " + spec.branches[b][j].describe(), s});
      }
      if (s.size() != 1) throw DataError("branch " + std::to_string(b) + " must end flat before the merge");
      width += s[0];
    }
    shape = {width};
    steps.push_back({"concat", shape});
  }
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    if (spec.layers[j].kind == LayerKind::softmax && j + 1 != spec.layers.size())
      throw DataError("softmax is only allowed as the final layer");
    shape = propagate(spec.layers[j], shape);
    steps.push_back({std::to_string(j) + " " + spec.layers[j].describe(), shape});
  }
  return steps;
}

// ---- Layer base --------------------------------------------------------------------

nlohmann::json Layer::state() const {
  nlohmann::json j{{"layer", name()}};
  for (Param* p : const_cast<Layer*>(this)->params()) j["params"][p->name] = p->value.values();
  return j;
}

void Layer::load(const nlohmann::json& j) {
  if (j.at("layer").get<std::string>() != name())
    throw DataError("checkpoint layer '" + j.at("layer").get<std::string>() + "' does not match '" + name() + "'");
  for (Param* p : params()) {
    auto v = j.at("params").at(p->name).get<std::vector<double>>();
    if (v.size() != p->value.size()) throw DataError("checkpoint tensor '" + p->name + "' has the wrong size");
    p->value.values().assign(v.begin(), v.end());
  }
}

// ---- Conv1d ------------------------------------------------------------------------

Conv1d::Conv1d(int in_channels, int out_channels, int kernel)
    : in_(in_channels), out_(out_channels), k_(kernel), w_(make_param("weight", {out_channels, in_channels * kernel})),
      b_(make_param("bias", {out_channels})) {
  if (in_ < 1 || out_ < 1 || k_ < 1) throw DataError("conv1d sizes must be >= 1");
}

std::string Conv1d::name() const {
  return "conv1d(" + std::to_string(in_) + "->" + std::to_string(out_) + ", k=" + std::to_string(k_) + ")";
}

void Conv1d::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_ * k_));
  fill_uniform(w_.value, bound, rng);
  fill_uniform(b_.value, bound, rng);
}

Tensor Conv1d::forward(const Tensor& x, bool training) {
  require_rank(x, 3, "conv1d");
  if (x.dim(1) != in_) throw DataError("conv1d expects " + std::to_string(in_) + " channels, got " + shape_string(x.shape()));
  const int n = x.dim(0), len = x.dim(2);
  if (len < k_) throw DataError("conv1d input length " + std::to_string(len) + " is shorter than kernel " + std::to_string(k_));
  const int lout = len - k_ + 1;
  Tensor out = Tensor::uninitialized({n, out_, lout});
  // Direct correlation, one output row at a time so that the row and the
  // input rows it reads stay in L1.
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out_; ++o) {
      Eigen::Map<Eigen::ArrayXd> y(out.data() + (static_cast<std::size_t>(s) * out_ + o) * lout, lout);
      y.setConstant(b_.value[static_cast<std::size_t>(o)]);
      const double* w = w_.value.data() + static_cast<std::size_t>(o) * in_ * k_;
      for (int c = 0; c < in_; ++c) {
        const double* xr = x.data() + (static_cast<std::size_t>(s) * in_ + c) * len;
        for (int j = 0; j < k_; ++j) y += w[c * k_ + j] * Eigen::Map<const Eigen::ArrayXd>(xr + j, lout);
      }
    }
  if (training) x_ = x;
  return out;
}

Tensor Conv1d::backward(const Tensor& grad_out) {
  if (x_.rank() != 3) throw DataError("conv1d backward without a training forward");
  const int n = x_.dim(0), len = x_.dim(2), lout = len - k_ + 1;
  Tensor dx(x_.shape());
  for (int s = 0; s < n; ++s)
    for (int o = 0; o < out_; ++o) {
      const Eigen::Map<const Eigen::ArrayXd> dy(grad_out.data() + (static_cast<std::size_t>(s) * out_ + o) * lout, lout);
      b_.grad[static_cast<std::size_t>(o)] += dy.sum();
      const double* w = w_.value.data() + static_cast<std::size_t>(o) * in_ * k_;
      double* dw = w_.grad.data() + static_cast<std::size_t>(o) * in_ * k_;
      for (int c = 0; c < in_; ++c) {
        const double* xr = x_.data() + (static_cast<std::size_t>(s) * in_ + c) * len;
        double* dxr = dx.data() + (static_cast<std::size_t>(s) * in_ + c) * len;
        for (int j = 0; j < k_; ++j) {
          dw[c * k_ + j] += (dy * Eigen::Map<const Eigen::ArrayXd>(xr + j, lout)).sum();
          Eigen::Map<Eigen::ArrayXd>(dxr + j, lout) += w[c * k_ + j] * dy;
        }
      }
    }
  return dx;
}

// ---- ReLU ---------------------------------------------------------------------------

Tensor Relu::forward(const Tensor& x, bool training) {
  Tensor out = Tensor::uninitialized(x.shape());
  const auto n = static_cast<Eigen::Index>(x.size());
  Eigen::Map<Eigen::ArrayXd>(out.data(), n) = Eigen::Map<const Eigen::ArrayXd>(x.data(), n).max(0.0);
  if (training) {
    mask_.resize(x.size());
    for (std::size_t i = 0; i < x.size(); ++i) mask_[i] = out[i] > 0.0;
  }
  return out;
}

Tensor Relu::backward(const Tensor& grad_out) {
  Tensor dx = Tensor::uninitialized(grad_out.shape());
  const auto n = static_cast<Eigen::Index>(dx.size());
  using Bytes = Eigen::Array<unsigned char, Eigen::Dynamic, 1>;
  Eigen::Map<Eigen::ArrayXd>(dx.data(), n) =
      Eigen::Map<const Eigen::ArrayXd>(grad_out.data(), n) * Eigen::Map<const Bytes>(mask_.data(), n).cast<double>();
  return dx;
}

void Relu::pattern(std::vector<int>& out) const { out.insert(out.end(), mask_.begin(), mask_.end()); }

// ---- BatchNorm ---------------------------------------------------------------------------

BatchNorm::BatchNorm(int channels, double momentum, double eps)
    : c_(channels), momentum_(momentum), eps_(eps), gamma_(make_param("gamma", {channels})),
      beta_(make_param("beta", {channels})), running_mean_(Vector::Zero(channels)),
      running_var_(Vector::Ones(channels)) {
  std::fill(gamma_.value.values().begin(), gamma_.value.values().end(), 1.0);
}

std::string BatchNorm::name() const { return "batchnorm(" + std::to_string(c_) + ")"; }

namespace {

// [N, C, L] or [N, C] viewed as N x (C * L); channel c is a column block.
Eigen::Map<const RowMatrix> channel_view(const Tensor& x) { return x.matrix(x.dim(0)); }
Eigen::Map<RowMatrix> channel_view(Tensor& x) { return x.matrix(x.dim(0)); }

}  // namespace

void BatchNorm::begin_census() {
  census_ = true;
  census_count_ = 0;
  census_mean_ = Vector::Zero(c_);
  census_m2_ = Vector::Zero(c_);
}

void BatchNorm::end_census() {
  if (!census_) return;
  census_ = false;
  if (census_count_ < 2) return;
  running_mean_ = census_mean_;
  running_var_ = census_m2_ / (census_count_ - 1);
}

Tensor BatchNorm::forward(const Tensor& x, bool training) {
  if (x.rank() != 2 && x.rank() != 3) throw DataError("batchnorm expects [N, C] or [N, C, L]");
  if (x.dim(1) != c_) throw DataError("batchnorm expects " + std::to_string(c_) + " channels, got " + shape_string(x.shape()));
  const int n = x.dim(0);
  const int len = x.rank() == 3 ? x.dim(2) : 1;
  const double m = static_cast<double>(n) * len;
  Tensor out = Tensor::uninitialized(x.shape());
  if (training) {
    xhat_ = Tensor::uninitialized(x.shape());
    inv_std_.resize(c_);
  }
  const auto xv = channel_view(x);
  auto ov = channel_view(out);
  for (int c = 0; c < c_; ++c) {
    const auto blk = xv.middleCols(static_cast<Eigen::Index>(c) * len, len).array();
    double mean, var;
    if (training || census_) {
      const double mu = blk.sum() / m;
      const double sq = (blk - mu).square().sum();
      if (training) {
        mean = mu;
        var = sq / m;
        running_mean_[c] = (1 - momentum_) * running_mean_[c] + momentum_ * mean;
        running_var_[c] = (1 - momentum_) * running_var_[c] + momentum_ * (m > 1 ? sq / (m - 1) : var);
      } else {
        // pairwise merge of the pooled moments with this chunk
        const double total = census_count_ + m;
        const double delta = mu - census_mean_[c];
        census_mean_[c] += delta * m / total;
        census_m2_[c] += sq + delta * delta * census_count_ * m / total;
      }
    }
    if (!training) {
      mean = running_mean_[c];
      var = running_var_[c];
    }
    const double inv = 1.0 / std::sqrt(var + eps_);
    const double g = gamma_.value[static_cast<std::size_t>(c)], b = beta_.value[static_cast<std::size_t>(c)];
    auto oblk = ov.middleCols(static_cast<Eigen::Index>(c) * len, len).array();
    if (training) {
      inv_std_[c] = inv;
      auto hblk = channel_view(xhat_).middleCols(static_cast<Eigen::Index>(c) * len, len).array();
      hblk = (blk - mean) * inv;
      oblk = g * hblk + b;
    } else {
      oblk = (blk - mean) * (g * inv) + b;
    }
  }
  if (census_ && !training) census_count_ += m;
  if (training) in_shape_ = x.shape();
  return out;
}

Tensor BatchNorm::backward(const Tensor& grad_out) {
  if (in_shape_.empty()) throw DataError("batchnorm backward without a training forward");
  const int n = in_shape_[0];
  const int len = in_shape_.size() == 3 ? in_shape_[2] : 1;
  const double m = static_cast<double>(n) * len;
  Tensor dx = Tensor::uninitialized(in_shape_);
  const auto dyv = channel_view(grad_out);
  const auto hv = channel_view(xhat_);
  auto dxv = channel_view(dx);
  for (int c = 0; c < c_; ++c) {
    const Eigen::Index off = static_cast<Eigen::Index>(c) * len;
    const auto dy = dyv.middleCols(off, len).array();
    const auto xh = hv.middleCols(off, len).array();
    const double sum_dy = dy.sum();
    const double sum_dy_xh = (dy * xh).sum();
    gamma_.grad[static_cast<std::size_t>(c)] += sum_dy_xh;
    beta_.grad[static_cast<std::size_t>(c)] += sum_dy;
    const double scale = gamma_.value[static_cast<std::size_t>(c)] * inv_std_[c] / m;
    dxv.middleCols(off, len).array() = scale * (m * dy - sum_dy - xh * sum_dy_xh);
  }
  return dx;
}

nlohmann::json BatchNorm::state() const {
  nlohmann::json j = Layer::state();
  j["running_mean"] = std::vector<double>(running_mean_.begin(), running_mean_.end());
  j["running_var"] = std::vector<double>(running_var_.begin(), running_var_.end());
  return j;
}

void BatchNorm::load(const nlohmann::json& j) {
  Layer::load(j);
  const auto rm = j.at("running_mean").get<std::vector<double>>();
  const auto rv = j.at("running_var").get<std::vector<double>>();
  if (static_cast<int>(rm.size()) != c_ || static_cast<int>(rv.size()) != c_)
    throw DataError("checkpoint batchnorm statistics have the wrong size");
  running_mean_ = Eigen::Map<const Vector>(rm.data(), c_);
  running_var_ = Eigen::Map<const Vector>(rv.data(), c_);
}

// ---- pooling ------------------------------------------------------------------------------

Pool::Pool(bool max, int window) : max_(max), w_(window) {
  if (w_ < 2) throw DataError("pool size must be >= 2");
}

std::string Pool::name() const { return (max_ ? "maxpool(" : "avgpool(") + std::to_string(w_) + ")"; }

Tensor Pool::forward(const Tensor& x, bool training) {
  require_rank(x, 3, name());
  const int n = x.dim(0), c = x.dim(1), len = x.dim(2), lout = len / w_;
  if (lout < 1) throw DataError(name() + " input length " + std::to_string(len) + " is shorter than the window");
  Tensor out = Tensor::uninitialized({n, c, lout});
  if (training && max_) argmax_.assign(out.size(), 0);
  for (std::size_t row = 0; row < static_cast<std::size_t>(n) * c; ++row) {
    const double* src = x.data() + row * len;
    double* dst = out.data() + row * lout;
    for (int t = 0; t < lout; ++t) {
      const double* win = src + static_cast<std::ptrdiff_t>(t) * w_;
      if (max_) {
        int best = 0;
        for (int j = 1; j < w_; ++j)
          if (win[j] > win[best]) best = j;
        dst[t] = win[best];
        if (training) argmax_[row * lout + t] = best;
      } else {
        double sum = 0;
        for (int j = 0; j < w_; ++j) sum += win[j];
        dst[t] = sum / w_;
      }
    }
  }
  if (training) in_shape_ = x.shape();
  return out;
}

Tensor Pool::backward(const Tensor& grad_out) {
  if (in_shape_.empty()) throw DataError(name() + " backward without a training forward");
  const int len = in_shape_[2], lout = len / w_;
  Tensor dx(in_shape_);
  const std::size_t rows = static_cast<std::size_t>(in_shape_[0]) * in_shape_[1];
  for (std::size_t row = 0; row < rows; ++row)
    for (int t = 0; t < lout; ++t) {
      const double g = grad_out[row * lout + t];
      double* dst = dx.data() + row * len + static_cast<std::size_t>(t) * w_;
      if (max_)
        dst[argmax_[row * lout + t]] += g;
      else
        for (int j = 0; j < w_; ++j) dst[j] += g / w_;
    }
  return dx;
}

void Pool::pattern(std::vector<int>& out) const {
  if (max_) out.insert(out.end(), argmax_.begin(), argmax_.end());
}

// ---- Flatten / Dense / GlobalAvgPool -------------------------------------------------------

Tensor Flatten::forward(const Tensor& x, bool training) {
  if (training) in_shape_ = x.shape();
  const int n = x.dim(0);
  return x.reshaped({n, n == 0 ? 0 : static_cast<int>(x.size() / static_cast<std::size_t>(n))});
}

Tensor Flatten::backward(const Tensor& grad_out) { return grad_out.reshaped(in_shape_); }

Dense::Dense(int in, int out)
    : in_(in), out_(out), w_(make_param("weight", {out, in})), b_(make_param("bias", {out})) {
  if (in_ < 1 || out_ < 1) throw DataError("dense sizes must be >= 1");
}

std::string Dense::name() const { return "dense(" + std::to_string(in_) + "->" + std::to_string(out_) + ")"; }

void Dense::init(Rng& rng) {
  const double bound = 1.0 / std::sqrt(static_cast<double>(in_));
  fill_uniform(w_.value, bound, rng);
  fill_uniform(b_.value, bound, rng);
}

Tensor Dense::forward(const Tensor& x, bool training) {
  require_rank(x, 2, name());
  if (x.dim(1) != in_) throw DataError(name() + " got input " + shape_string(x.shape()));
  const int n = x.dim(0);
  Tensor out = Tensor::uninitialized({n, out_});
  auto y = out.matrix(n);
  y.noalias() = x.matrix(n) * w_.value.matrix(out_).transpose();
  y.rowwise() += Eigen::Map<const Eigen::RowVectorXd>(b_.value.data(), out_);
  if (training) x_ = x;
  return out;
}

Tensor Dense::backward(const Tensor& grad_out) {
  const int n = x_.dim(0);
  const auto dy = grad_out.matrix(n);
  w_.grad.matrix(out_).noalias() += dy.transpose() * x_.matrix(n);
  Eigen::Map<Eigen::RowVectorXd>(b_.grad.data(), out_) += dy.colwise().sum();
  Tensor dx = Tensor::uninitialized({n, in_});
  dx.matrix(n).noalias() = dy * w_.value.matrix(out_);
  return dx;
}

Tensor GlobalAvgPool::forward(const Tensor& x, bool training) {
  require_rank(x, 3, "global_avgpool");
  const int n = x.dim(0), c = x.dim(1);
  Tensor out = Tensor::uninitialized({n, c});
  out.matrix(static_cast<Eigen::Index>(n) * c) = x.matrix(static_cast<Eigen::Index>(n) * c).rowwise().mean();
  if (training) in_shape_ = x.shape();
  return out;
}

Tensor GlobalAvgPool::backward(const Tensor& grad_out) {
  Tensor dx = Tensor::uninitialized(in_shape_);
  const int len = in_shape_[2];
  const std::size_t rows = static_cast<std::size_t>(in_shape_[0]) * in_shape_[1];
  for (std::size_t r = 0; r < rows; ++r)
    std::fill_n(dx.data() + r * len, len, grad_out[r] / len);
  return dx;
}

// ---- softmax / loss ---------------------------------------------------------------------------

Tensor softmax(const Tensor& logits) {
  require_rank(logits, 2, "softmax");
  const int n = logits.dim(0);
  Tensor p = logits;
  auto m = p.matrix(n);
  for (Eigen::Index r = 0; r < m.rows(); ++r) {
    m.row(r).array() -= m.row(r).maxCoeff();
    m.row(r) = m.row(r).array().exp().matrix();
    m.row(r) /= m.row(r).sum();
  }
  return p;
}

double softmax_cross_entropy(const Tensor& logits, const Labels& y, Tensor* grad) {
  require_rank(logits, 2, "cross-entropy");
  const int n = logits.dim(0), k = logits.dim(1);
  if (static_cast<int>(y.size()) != n) throw DataError("cross-entropy labels and logits disagree in batch size");
  const auto z = logits.matrix(n);
  double loss = 0;
  if (grad) *grad = Tensor(logits.shape());
  for (int r = 0; r < n; ++r) {
    const int label = y[static_cast<std::size_t>(r)];
    if (label < 0 || label >= k) throw DataError("label outside [0, K)");
    const double top = z.row(r).maxCoeff();
    const double lse = top + std::log((z.row(r).array() - top).exp().sum());
    loss += lse - z(r, label);
    if (grad) {
      auto g = grad->matrix(n).row(r);
      g = ((z.row(r).array() - lse).exp() / n).matrix();
      g[label] -= 1.0 / n;
    }
  }
  return loss / n;
}

// ---- Sequential / Network ------------------------------------------------------------------------

Sequential::Sequential(const Sequential& other) {
  for (const auto& l : other.layers_) layers_.push_back(l->clone());
}

Sequential& Sequential::operator=(const Sequential& other) {
  if (this != &other) {
    layers_.clear();
    for (const auto& l : other.layers_) layers_.push_back(l->clone());
  }
  return *this;
}

Tensor Sequential::forward(const Tensor& x, bool training) {
  Tensor h = x;
  for (auto& l : layers_) h = l->forward(h, training);
  return h;
}

Tensor Sequential::backward(const Tensor& grad) {
  Tensor g = grad;
  for (auto it = layers_.rbegin(); it != layers_.rend(); ++it) g = (*it)->backward(g);
  return g;
}

std::vector<Param*> Sequential::params() {
  std::vector<Param*> out;
  for (auto& l : layers_)
    for (Param* p : l->params()) out.push_back(p);
  return out;
}

void Sequential::init(Rng& rng) {
  for (auto& l : layers_) l->init(rng);
}

void Sequential::pattern(std::vector<int>& out) const {
  for (const auto& l : layers_) l->pattern(out);
}

Network::Network(const ModelSpec& spec, int input_length) : spec_(spec), input_length_(input_length) {
  trace_shapes(spec, input_length);
  std::vector<int> shape{1, input_length};
  if (!spec.branches.empty()) {
    int width = 0;
    for (const auto& branch : spec.branches) {
      Sequential seq;
      std::vector<int> s{1, input_length};
      for (const auto& l : branch) {
        seq.add(instantiate(l, s));
        s = propagate(l, s);
      }
      branches_.push_back(std::move(seq));
      branch_width_.push_back(s[0]);
      width += s[0];
    }
    shape = {width};
  }
  for (std::size_t j = 0; j < spec.layers.size(); ++j) {
    if (spec.layers[j].kind == LayerKind::softmax) continue;
    trunk_.add(instantiate(spec.layers[j], shape));
    shape = propagate(spec.layers[j], shape);
  }
  if (shape.size() != 1) throw DataError("network output must be flat, got " + shape_string(shape));
}

Tensor Network::forward(const Tensor& x, bool training) {
  require_rank(x, 3, "network");
  Tensor h;
  if (branches_.empty()) {
    h = x;
  } else {
    const int n = x.dim(0);
    const int width = std::accumulate(branch_width_.begin(), branch_width_.end(), 0);
    h = Tensor({n, width});
    int offset = 0;
    for (std::size_t b = 0; b < branches_.size(); ++b) {
      const Tensor out = branches_[b].forward(x, training);
      h.matrix(n).middleCols(offset, branch_width_[b]) = out.matrix(n);
      offset += branch_width_[b];
    }
  }
  batch_ = x.dim(0);
  return trunk_.forward(h, training);
}

void Network::backward(const Tensor& grad_logits) {
  const Tensor g = trunk_.backward(grad_logits);
  int offset = 0;
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    Tensor gb({batch_, branch_width_[b]});
    gb.matrix(batch_) = g.matrix(batch_).middleCols(offset, branch_width_[b]);
    branches_[b].backward(gb);
    offset += branch_width_[b];
  }
}

std::vector<Param*> Network::params() {
  std::vector<Param*> out;
  for (auto& b : branches_)
    for (Param* p : b.params()) out.push_back(p);
  for (Param* p : trunk_.params()) out.push_back(p);
  return out;
}

void Network::zero_grad() {
  for (Param* p : params()) std::fill(p->grad.values().begin(), p->grad.values().end(), 0.0);
}

void Network::init(std::uint64_t seed) {
  Rng rng(seed);
  for (auto& b : branches_) b.init(rng);
  trunk_.init(rng);
}

void Network::pattern(std::vector<int>& out) const {
  for (const auto& b : branches_) b.pattern(out);
  trunk_.pattern(out);
}

std::size_t Network::n_parameters() {
  std::size_t n = 0;
  for (Param* p : params()) n += p->value.size();
  return n;
}

Tensor Network::predict_proba(const Tensor& x) { return softmax(forward(x, false)); }

void Network::recalibrate_batchnorm(const RowMatrix& rows, int batch) {
  if (batch < 1) throw DataError("batch size must be >= 1");
  // Branches are independent, so the k-th batchnorm of every branch can be
  // measured in the same pass; the trunk follows branch by branch depth.
  std::vector<std::vector<BatchNorm*>> waves;
  auto collect = [&](Sequential& s, std::size_t offset) {
    std::size_t depth = offset;
    for (auto& l : s.layers())
      if (auto* bn = dynamic_cast<BatchNorm*>(l.get())) {
        if (waves.size() <= depth) waves.resize(depth + 1);
        waves[depth++].push_back(bn);
      }
    return depth;
  };
  std::size_t deepest = 0;
  for (auto& b : branches_) deepest = std::max(deepest, collect(b, 0));
  collect(trunk_, deepest);
  for (auto& wave : waves) {
    for (auto* bn : wave) bn->begin_census();
    for (Eigen::Index start = 0; start < rows.rows(); start += batch)
      forward(to_batch(rows.middleRows(start, std::min<Eigen::Index>(batch, rows.rows() - start))), false);
    for (auto* bn : wave) bn->end_census();
  }
}

nlohmann::json Network::state() const {
  nlohmann::json j;
  j["branches"] = nlohmann::json::array();
  for (const auto& b : branches_) {
    nlohmann::json layers = nlohmann::json::array();
    for (const auto& l : b.layers()) layers.push_back(l->state());
    j["branches"].push_back(layers);
  }
  j["trunk"] = nlohmann::json::array();
  for (const auto& l : trunk_.layers()) j["trunk"].push_back(l->state());
  return j;
}

void Network::load(const nlohmann::json& j) {
  const auto& branches = j.at("branches");
  if (branches.size() != branches_.size()) throw DataError("checkpoint branch count does not match the architecture");
  for (std::size_t b = 0; b < branches_.size(); ++b) {
    auto& layers = branches_[b].layers();
    if (branches[b].size() != layers.size()) throw DataError("checkpoint branch depth does not match the architecture");
    for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->load(branches[b][i]);
  }
  auto& layers = trunk_.layers();
  if (j.at("trunk").size() != layers.size()) throw DataError("checkpoint depth does not match the architecture");
  for (std::size_t i = 0; i < layers.size(); ++i) layers[i]->load(j.at("trunk")[i]);
}

Tensor to_batch(const RowMatrix& rows) {
  Tensor t({static_cast<int>(rows.rows()), 1, static_cast<int>(rows.cols())});
  t.matrix(rows.rows()) = rows;
  return t;
}

Tensor to_batch(const RowMatrix& rows, std::span<const int> indices) {
  const auto n = static_cast<Eigen::Index>(indices.size());
  Tensor t({static_cast<int>(n), 1, static_cast<int>(rows.cols())});
  auto m = t.matrix(n);
  for (Eigen::Index i = 0; i < n; ++i) m.row(i) = rows.row(indices[static_cast<std::size_t>(i)]);
  return t;
}

// ---- Adam ------------------------------------------------------------------------------------

Adam::Adam(std::vector<Param*> params, AdamConfig cfg) : params_(std::move(params)), cfg_(cfg) {
  for (Param* p : params_) {
    m_.push_back(Vector::Zero(static_cast<Eigen::Index>(p->value.size())));
    v_.push_back(Vector::Zero(static_cast<Eigen::Index>(p->value.size())));
  }
}

void Adam::step() {
  ++t_;
  const double c1 = 1.0 - std::pow(cfg_.beta1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(cfg_.beta2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params_.size(); ++i) {
    const auto n = static_cast<Eigen::Index>(params_[i]->value.size());
    Eigen::Map<Vector> w(params_[i]->value.data(), n);
    const Eigen::Map<const Vector> g(params_[i]->grad.data(), n);
    m_[i] = cfg_.beta1 * m_[i] + (1.0 - cfg_.beta1) * g;
    v_[i] = cfg_.beta2 * v_[i] + (1.0 - cfg_.beta2) * g.cwiseAbs2();
    w.array() -= cfg_.lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + cfg_.eps);
  }
}

// ---- training -----------------------------------------------------------------------------------

void TrainConfig::validate() const {
  if (batch_size < 1) throw DataError("batch size must be >= 1");
  if (epochs < 0) throw DataError("epochs must be >= 0");
  if (!(adam.lr >= 0)) throw DataError("learning rate must be >= 0");
}

int default_batch_size(const std::string& model_name) {
  if (model_name == "FullCNN") return 16;
  if (model_name == "MHCNN") return 128;
  if (model_name == "CNN" || model_name == "FC") return 64;
  throw DataError("unknown architecture '" + model_name + "'");
}

int History::best_val_epoch() const {
  int best = -1;
  double acc = -1;
  for (const auto& e : epochs)
    if (!std::isnan(e.val_accuracy) && e.val_accuracy > acc) {
      acc = e.val_accuracy;
      best = e.epoch;
    }
  return best;
}

void write_history_csv(const History& h, std::ostream& out) {
  out << "epoch,train_loss,val_accuracy\n";
  for (const auto& e : h.epochs)
    out << e.epoch << ',' << format_double(e.train_loss) << ',' << format_double(e.val_accuracy) << '\n';
}

TrainedModel train(const ModelSpec& spec, const SpectraDataset& d, const SplitIndices& split, const TrainConfig& cfg) {
  cfg.validate();
  if (split.train.empty()) throw DataError("training split is empty");
  const int k = d.n_classes();
  TrainedModel out;
  out.network = std::make_shared<Network>(spec, static_cast<int>(d.n_bins()));
  Network& net = *out.network;
  net.init(derive_seed(cfg.seed, {0}));
  Adam adam(net.params(), cfg.adam);
  out.seed = cfg.seed;
  out.n_classes = k;

  std::vector<int> order = split.train;
  std::sort(order.begin(), order.end());
  const RowMatrix train_rows = cfg.recalibrate_batchnorm ? d.subset(order).rows() : RowMatrix();
  const SpectraDataset val = d.subset(split.val);
  for (int epoch = 1; epoch <= cfg.epochs; ++epoch) {
    std::sort(order.begin(), order.end());
    Rng rng(derive_seed(cfg.seed, {1, static_cast<std::uint64_t>(epoch)}));
    std::shuffle(order.begin(), order.end(), rng);
    const std::size_t n = order.size();
    const std::size_t bs = static_cast<std::size_t>(cfg.batch_size);
    double loss_sum = 0;
    for (std::size_t start = 0; start < n;) {
      std::size_t end = std::min(n, start + bs);
      // A trailing single row joins the previous batch: batch statistics of
      // one sample are degenerate.
      if (n - end == 1) end = n;
      const std::span<const int> idx(order.data() + start, end - start);
      const Tensor x = to_batch(d.rows(), idx);
      Labels y;
      for (int r : idx) y.push_back(d.labels()[static_cast<std::size_t>(r)]);
      net.zero_grad();
      const Tensor logits = net.forward(x, true);
      Tensor grad;
      const double loss = softmax_cross_entropy(logits, y, &grad);
      if (!std::isfinite(loss)) throw NumericalError("training diverged at epoch " + std::to_string(epoch));
      net.backward(grad);
      adam.step();
      loss_sum += loss * static_cast<double>(idx.size());
      start = end;
    }
    EpochRecord rec;
    rec.epoch = epoch;
    rec.train_loss = loss_sum / static_cast<double>(n);
    rec.val_accuracy = std::numeric_limits<double>::quiet_NaN();
    if (cfg.recalibrate_batchnorm && (!split.val.empty() || epoch == cfg.epochs))
      net.recalibrate_batchnorm(train_rows, cfg.batch_size);
    if (!split.val.empty()) {
      out.epochs = epoch;
      rec.val_accuracy = evaluate(predict(out, val.rows()).labels, val.labels(), k).accuracy();
    }
    out.history.epochs.push_back(rec);
    out.epochs = epoch;
  }
  return out;
}

Prediction predict(const TrainedModel& m, const RowMatrix& x, int batch) {
  if (!m.network) throw NotFittedError("network is not trained");
  if (!x.allFinite()) throw DataError("network input contains NaN or infinite values");
  Prediction p;
  p.probabilities.resize(x.rows(), m.n_classes);
  p.labels.resize(static_cast<std::size_t>(x.rows()));
  // Eval mode only reads parameters, but layers are not thread-safe objects:
  // work on a private copy so concurrent predicts never share caches.
  Network net = *m.network;
  for (Eigen::Index start = 0; start < x.rows(); start += batch) {
    const Eigen::Index n = std::min<Eigen::Index>(batch, x.rows() - start);
    const Tensor probs = net.predict_proba(to_batch(x.middleRows(start, n)));
    p.probabilities.middleRows(start, n) = probs.matrix(n);
  }
  for (Eigen::Index r = 0; r < x.rows(); ++r) p.labels[static_cast<std::size_t>(r)] = argmax_lowest(p.probabilities.row(r));
  return p;
}

nlohmann::json checkpoint(const TrainedModel& m) {
  if (!m.network) throw NotFittedError("network is not trained");
  nlohmann::json j;
  j["format"] = "specbench-network";
  j["version"] = 1;
  j["model"] = m.network->spec().name;
  j["n_classes"] = m.n_classes;
  j["input_length"] = m.network->input_length();
  j["seed"] = m.seed;
  j["epoch"] = m.epochs;
  j["network"] = m.network->state();
  return j;
}

TrainedModel load_checkpoint(const nlohmann::json& j) {
  try {
    if (j.at("format") != "specbench-network") throw DataError("not a network checkpoint");
    if (j.at("version").get<int>() != 1) throw DataError("unsupported checkpoint version");
    TrainedModel m;
    m.n_classes = j.at("n_classes").get<int>();
    m.seed = j.at("seed").get<std::uint64_t>();
    m.epochs = j.at("epoch").get<int>();
    m.network = std::make_shared<Network>(build_model(j.at("model").get<std::string>(), m.n_classes),
                                          j.at("input_length").get<int>());
    m.network->load(j.at("network"));
    return m;
  } catch (const nlohmann::json::exception& e) {
    throw DataError(std::string("malformed network checkpoint: ") + e.what());
  }
}

// ---- gradient checks ---------------------------------------------------------------------------

double relative_error(double analytic, double numeric, double floor) {
  return std::abs(analytic - numeric) / std::max({std::abs(analytic), std::abs(numeric), floor});
}

namespace {

// Coordinates whose gradient is tiny next to the rest of their tensor are
// compared against this scale: the central difference cannot resolve them
// below ~1e-10 absolute at fp64.
double tensor_floor(const Tensor& grad) {
  double m = 0;
  for (double v : grad.values()) m = std::max(m, std::abs(v));
  return std::max(1e-8, kTensorFloorFraction * m);
}

void record(GradCheck& out, double analytic, double numeric, double floor, const std::string& where) {
  const double e = relative_error(analytic, numeric, floor);
  ++out.checked;
  if (out.worst.empty() || e > out.max_rel_error) {
    out.max_rel_error = e;
    out.worst = where + " analytic=" + format_double(analytic) + " numeric=" + format_double(numeric);
  }
}

// Perturbs *value by +-h, returning the central difference, or NaN when the
// activation pattern differs between the two evaluations and the base.
double central(double* value, double h, const std::function<double()>& loss,
               const std::function<std::vector<int>()>& pattern, const std::vector<int>& base) {
  const double keep = *value;
  *value = keep + h;
  const double up = loss();
  const bool same_up = pattern() == base;
  *value = keep - h;
  const double down = loss();
  const bool same_down = pattern() == base;
  *value = keep;
  if (!same_up || !same_down) return std::numeric_limits<double>::quiet_NaN();
  return (up - down) / (2 * h);
}

}  // namespace

GradCheck check_layer_gradients(Layer& layer, const Tensor& x_in, std::uint64_t seed, double h) {
  Tensor x = x_in;
  Rng rng(seed);
  std::normal_distribution<double> normal;
  const Tensor y0 = layer.forward(x, true);
  Tensor r(y0.shape());
  for (auto& v : r.values()) v = normal(rng);

  for (Param* p : layer.params()) std::fill(p->grad.values().begin(), p->grad.values().end(), 0.0);
  layer.forward(x, true);
  const Tensor dx = layer.backward(r);
  std::vector<Tensor> grads;
  for (Param* p : layer.params()) grads.push_back(p->grad);
  std::vector<int> base;
  layer.pattern(base);

  auto loss = [&] {
    const Tensor y = layer.forward(x, true);
    double s = 0;
    for (std::size_t i = 0; i < y.size(); ++i) s += r[i] * y[i];
    return s;
  };
  auto pattern = [&] {
    std::vector<int> p;
    layer.pattern(p);
    return p;
  };

  GradCheck out;
  const double dx_floor = tensor_floor(dx);
  for (std::size_t i = 0; i < x.size(); ++i) {
    const double num = central(&x[i], h, loss, pattern, base);
    if (std::isnan(num)) {
      ++out.skipped;
      continue;
    }
    record(out, dx[i], num, dx_floor, layer.name() + " input[" + std::to_string(i) + "]");
  }
  const auto params = layer.params();
  for (std::size_t k = 0; k < params.size(); ++k)
    for (std::size_t i = 0; i < params[k]->value.size(); ++i) {
      const double floor = tensor_floor(grads[k]);
      const double num = central(&params[k]->value[i], h, loss, pattern, base);
      if (std::isnan(num)) {
        ++out.skipped;
        continue;
      }
      record(out, grads[k][i], num, floor, layer.name() + " " + params[k]->name + "[" + std::to_string(i) + "]");
    }
  return out;
}

GradCheck check_network_gradients(Network& net, const Tensor& x, const Labels& y, std::uint64_t seed, int per_tensor,
                                  double h) {
  net.zero_grad();
  Tensor grad;
  softmax_cross_entropy(net.forward(x, true), y, &grad);
  net.backward(grad);
  const auto params = net.params();
  std::vector<Tensor> grads;
  for (Param* p : params) grads.push_back(p->grad);
  std::vector<int> base;
  net.pattern(base);

  auto loss = [&] { return softmax_cross_entropy(net.forward(x, true), y); };
  auto pattern = [&] {
    std::vector<int> p;
    net.pattern(p);
    return p;
  };

  Rng rng(seed);
  GradCheck out;
  for (std::size_t k = 0; k < params.size(); ++k) {
    const std::size_t n = params[k]->value.size();
    std::vector<std::size_t> coords(n);
    std::iota(coords.begin(), coords.end(), 0);
    if (per_tensor > 0 && n > static_cast<std::size_t>(per_tensor)) {
      std::shuffle(coords.begin(), coords.end(), rng);
      coords.resize(static_cast<std::size_t>(per_tensor));
    }
    const double floor = tensor_floor(grads[k]);
    for (std::size_t i : coords) {
      const double num = central(&params[k]->value[i], h, loss, pattern, base);
      if (std::isnan(num)) {
        ++out.skipped;
        continue;
      }
      record(out, grads[k][i], num, floor, "tensor " + std::to_string(k) + " " + params[k]->name + "[" + std::to_string(i) + "]");
    }
  }
  return out;
}

}  // namespace specbench::nn
