#include <doctest.h>

#include <cmath>
#include <random>
#include <sstream>

#include "specbench/neural.hpp"
#include "specbench/spectragen.hpp"

using namespace specbench;
using namespace specbench::nn;

namespace {

Tensor random_tensor(std::vector<int> shape, std::uint64_t seed, double scale = 1.0) {
  Tensor t(std::move(shape));
  Rng rng(seed);
  std::normal_distribution<double> n(0.0, scale);
  for (auto& v : t.values()) v = n(rng);
  return t;
}

std::vector<int> final_shape(const ModelSpec& m) { return trace_shapes(m).back().shape; }

std::vector<int> shape_at(const ModelSpec& m, LayerKind kind, int occurrence = 0) {
  const auto steps = trace_shapes(m);
  const std::string tag = to_string(kind);
  for (const auto& s : steps)
    if (s.where.find(tag) != std::string::npos && occurrence-- == 0) return s.shape;
  return {};
}

// Ten prepared charge spectra, balanced across the four classes.
SpectraDataset toy_subset() {
  const SpectraDataset d = prepared_preset("charge_mimic", 3);
  std::vector<int> pick;
  std::vector<int> seen(4, 0);
  for (int r = 0; r < static_cast<int>(d.n_spectra()) && pick.size() < 10; ++r) {
    const int c = d.labels()[static_cast<std::size_t>(r)];
    if (seen[static_cast<std::size_t>(c)] < 3 && (c < 2 || seen[static_cast<std::size_t>(c)] < 2)) {
      ++seen[static_cast<std::size_t>(c)];
      pick.push_back(r);
    }
  }
  return d.subset(pick);
}

SplitIndices all_train(const SpectraDataset& d) {
  SplitIndices s;
  for (int i = 0; i < static_cast<int>(d.n_spectra()); ++i) s.train.push_back(i);
  return s;
}

}  // namespace

TEST_CASE("conv1d forward") {
  SUBCASE("manual cross-correlation") {
    Conv1d c(1, 1, 3);
    c.params()[0]->value.values() = {1, 0, -1};
    const Tensor y = c.forward(Tensor({1, 1, 3}, {1, 2, 3}), false);
    CHECK(y.shape() == std::vector<int>{1, 1, 1});
    CHECK(y[0] == -2.0);
  }
  SUBCASE("identity kernel") {
    Conv1d c(1, 1, 1);
    c.params()[0]->value.values() = {1};
    const Tensor x = random_tensor({2, 1, 9}, 1);
    CHECK(c.forward(x, false).values() == x.values());
  }
  SUBCASE("valid length and channel mixing") {
    Conv1d c(2, 3, 9);
    Rng rng(1);
    c.init(rng);
    const Tensor x = random_tensor({2, 2, 728}, 2);
    const Tensor y = c.forward(x, false);
    CHECK(y.shape() == std::vector<int>{2, 3, 720});
    // direct sum for one output element
    const auto& w = c.params()[0]->value;
    const double b = c.params()[1]->value[1];
    double direct = b;
    for (int ci = 0; ci < 2; ++ci)
      for (int j = 0; j < 9; ++j) direct += w[static_cast<std::size_t>(1 * 18 + ci * 9 + j)] * x[static_cast<std::size_t>((1 * 2 + ci) * 728 + 100 + j)];
    CHECK(y[static_cast<std::size_t>((1 * 3 + 1) * 720 + 100)] == doctest::Approx(direct).epsilon(1e-12));
  }
  SUBCASE("input shorter than the kernel") {
    Conv1d c(1, 1, 5);
    CHECK_THROWS_AS(c.forward(Tensor({1, 1, 4}), false), DataError);
    CHECK_THROWS_AS(c.forward(Tensor({1, 2, 9}), false), DataError);
  }
}

TEST_CASE("relu and batchnorm") {
  SUBCASE("relu") {
    Relu r;
    const Tensor y = r.forward(Tensor({1, 3}, {-1, 0, 2}), true);
    CHECK(y.values() == Buffer{0, 0, 2});
    CHECK(r.backward(Tensor({1, 3}, {5, 6, 7})).values() == Buffer{0, 0, 7});
  }
  SUBCASE("train mode normalises each channel") {
    BatchNorm bn(3);
    const Tensor x = random_tensor({8, 3, 11}, 4, 5.0);
    const Tensor y = bn.forward(x, true);
    for (int c = 0; c < 3; ++c) {
      double mean = 0, sq = 0;
      for (int n = 0; n < 8; ++n)
        for (int t = 0; t < 11; ++t) mean += y[static_cast<std::size_t>((n * 3 + c) * 11 + t)];
      mean /= 88;
      for (int n = 0; n < 8; ++n)
        for (int t = 0; t < 11; ++t) sq += std::pow(y[static_cast<std::size_t>((n * 3 + c) * 11 + t)] - mean, 2);
      CHECK(std::abs(mean) < 1e-9);
      // eps = 1e-5 shrinks the variance by var / (var + eps)
      CHECK(std::abs(sq / 88 - 1.0) < 1e-5 / 4.0);
    }
  }
  SUBCASE("train mode with eps 0 gives unit variance within 1e-9") {
    BatchNorm bn(2, 0.1, 0.0);
    const Tensor y = bn.forward(random_tensor({16, 2}, 5, 3.0), true);
    for (int c = 0; c < 2; ++c) {
      double mean = 0, sq = 0;
      for (int n = 0; n < 16; ++n) mean += y[static_cast<std::size_t>(n * 2 + c)] / 16;
      for (int n = 0; n < 16; ++n) sq += std::pow(y[static_cast<std::size_t>(n * 2 + c)] - mean, 2) / 16;
      CHECK(std::abs(mean) < 1e-9);
      CHECK(std::abs(sq - 1.0) < 1e-9);
    }
  }
  SUBCASE("running statistics: momentum 0.1, unbiased variance") {
    BatchNorm bn(1);
    bn.forward(Tensor({4, 1}, {1, 2, 3, 4}), true);
    CHECK(bn.running_mean()[0] == doctest::Approx(0.25));
    CHECK(bn.running_var()[0] == doctest::Approx(0.9 + 0.1 * (5.0 / 3.0)));
  }
  SUBCASE("census over chunks equals the whole-sample statistics") {
    BatchNorm bn(3);
    const Tensor x = random_tensor({10, 3, 7}, 30, 4.0);
    bn.begin_census();
    for (int start = 0; start < 10; start += 4) {
      const int n = std::min(4, 10 - start);
      Tensor chunk({n, 3, 7});
      std::copy_n(x.data() + start * 21, n * 21, chunk.data());
      bn.forward(chunk, false);
    }
    bn.end_census();
    for (int c = 0; c < 3; ++c) {
      double mean = 0, sq = 0;
      for (int s = 0; s < 10; ++s)
        for (int t = 0; t < 7; ++t) mean += x[static_cast<std::size_t>((s * 3 + c) * 7 + t)] / 70;
      for (int s = 0; s < 10; ++s)
        for (int t = 0; t < 7; ++t) sq += std::pow(x[static_cast<std::size_t>((s * 3 + c) * 7 + t)] - mean, 2);
      CHECK(bn.running_mean()[c] == doctest::Approx(mean).epsilon(1e-12));
      CHECK(bn.running_var()[c] == doctest::Approx(sq / 69).epsilon(1e-12));
    }
  }
  SUBCASE("eval mode is independent of the batch composition") {
    BatchNorm bn(2);
    for (int i = 0; i < 5; ++i) bn.forward(random_tensor({6, 2, 4}, 10 + i), true);
    const Tensor a = random_tensor({3, 2, 4}, 20);
    const Tensor full = bn.forward(a, false);
    Tensor first({1, 2, 4});
    std::copy_n(a.data(), 8, first.data());
    const Tensor alone = bn.forward(first, false);
    for (std::size_t i = 0; i < 8; ++i) CHECK(alone[i] == full[i]);
  }
}

TEST_CASE("pooling") {
  Pool avg(false, 2), mx(true, 2);
  const Tensor x({1, 1, 5}, {1, 3, 2, 2, 9});
  CHECK(avg.forward(x, true).values() == Buffer{2, 2});
  CHECK(mx.forward(x, true).values() == Buffer{3, 2});
  // ties route the gradient to the first element
  CHECK(mx.backward(Tensor({1, 1, 2}, {1, 1})).values() == Buffer{0, 1, 1, 0, 0});
  CHECK(avg.backward(Tensor({1, 1, 2}, {1, 1})).values() == Buffer{0.5, 0.5, 0.5, 0.5, 0});
  CHECK_THROWS_AS(Pool(true, 1), DataError);
}

TEST_CASE("layer gradients match central differences") {
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
    INFO(layer->name(), ": ", g.worst);
    CHECK(g.checked > 0);
    CHECK(g.max_rel_error < 1e-6);
  }
  SUBCASE("fused softmax cross-entropy") {
    const Tensor z = random_tensor({5, 4}, 13, 2.0);
    const Labels y{0, 3, 1, 1, 2};
    Tensor grad;
    softmax_cross_entropy(z, y, &grad);
    Tensor zp = z;
    for (std::size_t i = 0; i < z.size(); ++i) {
      const double keep = zp[i];
      zp[i] = keep + 1e-5;
      const double up = softmax_cross_entropy(zp, y);
      zp[i] = keep - 1e-5;
      const double down = softmax_cross_entropy(zp, y);
      zp[i] = keep;
      CHECK(relative_error(grad[i], (up - down) / 2e-5) < 1e-6);
    }
  }
}

TEST_CASE("architectures end to end pass the gradient check") {
  for (const auto& name : model_names()) {
    Network net(build_model(name));
    net.init(derive_seed(5, {0}));
    const Tensor x = to_batch(random_tensor({6, 728}, 21).matrix(6));
    const GradCheck g = check_network_gradients(net, x, {0, 1, 2, 3, 0, 1}, 22);
    INFO(name, ": ", g.worst, " skipped ", g.skipped);
    CHECK(g.checked > 100);
    CHECK(g.max_rel_error < 1e-6);
  }
}

TEST_CASE("architecture shapes") {
  SUBCASE("CNN") {
    const ModelSpec m = build_model("CNN");
    CHECK(shape_at(m, LayerKind::conv1d) == std::vector<int>{2, 720});
    CHECK(shape_at(m, LayerKind::avgpool, 4) == std::vector<int>{12, 19});
    CHECK(shape_at(m, LayerKind::flatten) == std::vector<int>{228});
    CHECK(shape_at(m, LayerKind::dense) == std::vector<int>{128});
    CHECK(final_shape(m) == std::vector<int>{4});
  }
  SUBCASE("odd lengths floor when pooled") {
    const ModelSpec m = build_model("CNN");
    CHECK(shape_at(m, LayerKind::avgpool, 1) == std::vector<int>{2, 177});
    CHECK(shape_at(m, LayerKind::conv1d, 2) == std::vector<int>{4, 171});
    CHECK(shape_at(m, LayerKind::avgpool, 2) == std::vector<int>{4, 85});
    CHECK(shape_at(m, LayerKind::avgpool, 3) == std::vector<int>{8, 40});
  }
  SUBCASE("FullCNN pools globally over length 19") {
    const ModelSpec m = build_model("FullCNN");
    CHECK(shape_at(m, LayerKind::conv1d, 5) == std::vector<int>{4, 19});
    CHECK(shape_at(m, LayerKind::global_avgpool) == std::vector<int>{4});
    CHECK(final_shape(m) == std::vector<int>{4});
  }
  SUBCASE("MHCNN") {
    const ModelSpec m = build_model("MHCNN");
    REQUIRE(m.branches.size() == 3);
    std::vector<int> kernels;
    for (const auto& b : m.branches) kernels.push_back(b.front().kernel);
    CHECK(kernels == std::vector<int>{3, 5, 7});
    std::vector<int> flat;
    for (const auto& s : trace_shapes(m))
      if (s.where.find("flatten") != std::string::npos) flat.push_back(s.shape[0]);
    CHECK(flat == std::vector<int>{720, 716, 708});
    CHECK(shape_at(m, LayerKind::dense).empty() == false);
    for (const auto& s : trace_shapes(m))
      if (s.where == "concat") CHECK(s.shape == std::vector<int>{2144});
    CHECK(final_shape(m) == std::vector<int>{4});
  }
  SUBCASE("FC") {
    const ModelSpec m = build_model("FC");
    std::vector<int> widths;
    for (const auto& l : m.layers)
      if (l.kind == LayerKind::dense) widths.push_back(l.units);
    CHECK(widths == std::vector<int>{1024, 512, 256, 128, 64, 16, 4});
  }
  SUBCASE("invalid specs") {
    CHECK_THROWS_AS(build_model("ResNet"), DataError);
    ModelSpec bad{"bad", {}, {LayerSpec::conv(0, 2)}};
    CHECK_THROWS_AS(trace_shapes(bad), DataError);
    bad.layers = {LayerSpec::avg(1)};
    CHECK_THROWS_AS(trace_shapes(bad), DataError);
    bad.layers = {LayerSpec::conv(800, 1)};
    CHECK_THROWS_AS(trace_shapes(bad), DataError);
    bad.layers = {LayerSpec::dense(4)};
    CHECK_THROWS_AS(trace_shapes(bad), DataError);
  }
}

TEST_CASE("softmax and cross-entropy") {
  const Tensor p = softmax(Tensor({1, 4}));
  for (std::size_t i = 0; i < 4; ++i) CHECK(p[i] == doctest::Approx(0.25).epsilon(1e-15));
  CHECK(softmax_cross_entropy(Tensor({2, 4}), {1, 3}) == doctest::Approx(std::log(4.0)).epsilon(1e-15));
  CHECK(softmax_cross_entropy(Tensor({1, 4}, {800, 0, 0, 0}), {0}) < 1e-300);
  CHECK(softmax_cross_entropy(Tensor({1, 3}, {-1000, 0, 1000}), {2}) == 0.0);
  CHECK_THROWS_AS(softmax_cross_entropy(Tensor({1, 4}), {4}), DataError);
}

TEST_CASE("adam") {
  SUBCASE("first step matches the closed form") {
    Param p{"w", Tensor({3}, {0.5, -1.0, 2.0}), Tensor({3}, {0.3, -2e-3, 7.0})};
    const AdamConfig cfg;
    Adam adam({&p}, cfg);
    adam.step();
    const std::vector<double> w0{0.5, -1.0, 2.0};
    for (std::size_t i = 0; i < 3; ++i) {
      const double g = p.grad[i];
      const double m_hat = (1 - cfg.beta1) * g / (1 - cfg.beta1);
      const double v_hat = (1 - cfg.beta2) * g * g / (1 - cfg.beta2);
      CHECK(std::abs(p.value[i] - (w0[i] - cfg.lr * m_hat / (std::sqrt(v_hat) + cfg.eps))) < 1e-12);
    }
  }
  SUBCASE("zero learning rate leaves the network untouched") {
    const SpectraDataset d = toy_subset();
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.batch_size = 4;
    cfg.seed = 8;
    cfg.adam.lr = 0.0;
    TrainConfig none = cfg;
    none.epochs = 0;
    const TrainedModel a = train(build_model("CNN"), d, all_train(d), cfg);
    const TrainedModel b = train(build_model("CNN"), d, all_train(d), none);
    auto pa = a.network->params(), pb = b.network->params();
    for (std::size_t k = 0; k < pa.size(); ++k) CHECK(pa[k]->value.values() == pb[k]->value.values());
  }
}

TEST_CASE("training") {
  const SpectraDataset d = toy_subset();
  SUBCASE("CNN memorises ten spectra in 200 epochs") {
    TrainConfig cfg;
    cfg.epochs = 200;
    cfg.seed = 1;
    const TrainedModel m = train(build_model("CNN"), d, all_train(d), cfg);
    CHECK(predict(m, d.rows()).labels == d.labels());
    CHECK(m.history.epochs.size() == 200);
    CHECK(m.history.epochs.back().train_loss < m.history.epochs.front().train_loss);
  }
  SUBCASE("loss on a fixed batch falls over the first five steps") {
    int passed = 0;
    const Tensor x = to_batch(d.rows());
    for (std::uint64_t seed = 0; seed < 10; ++seed) {
      Network net(build_model("CNN"));
      net.init(seed);
      Adam adam(net.params());
      std::vector<double> losses;
      for (int step = 0; step <= 5; ++step) {
        net.zero_grad();
        Tensor grad;
        losses.push_back(softmax_cross_entropy(net.forward(x, true), d.labels(), &grad));
        net.backward(grad);
        adam.step();
      }
      bool decreasing = true;
      for (std::size_t i = 1; i < losses.size(); ++i) decreasing = decreasing && losses[i] < losses[i - 1];
      passed += decreasing;
    }
    CHECK(passed >= 9);
  }
  SUBCASE("deterministic per seed, validation history recorded") {
    SplitIndices s;
    s.train = {0, 1, 2, 3, 4, 5, 6};
    s.val = {7, 8, 9};
    TrainConfig cfg;
    cfg.epochs = 4;
    cfg.batch_size = 3;
    cfg.seed = 6;
    const TrainedModel a = train(build_model("MHCNN"), d, s, cfg);
    const TrainedModel b = train(build_model("MHCNN"), d, s, cfg);
    CHECK(checkpoint(a) == checkpoint(b));
    std::ostringstream ha, hb;
    write_history_csv(a.history, ha);
    write_history_csv(b.history, hb);
    CHECK(ha.str() == hb.str());
    CHECK(ha.str().rfind("epoch,train_loss,val_accuracy\n", 0) == 0);
    for (const auto& e : a.history.epochs) {
      CHECK(std::isfinite(e.train_loss));
      CHECK(e.val_accuracy >= 0.0);
    }
    CHECK(a.history.best_val_epoch() >= 1);
  }
  SUBCASE("bad configuration") {
    TrainConfig cfg;
    cfg.batch_size = 0;
    CHECK_THROWS_AS(train(build_model("CNN"), d, all_train(d), cfg), DataError);
    CHECK_THROWS_AS(train(build_model("CNN"), d, SplitIndices{}, TrainConfig{}), DataError);
  }
  SUBCASE("divergence names the epoch") {
    TrainConfig cfg;
    cfg.epochs = 3;
    cfg.adam.lr = 1e306;
    try {
      train(build_model("MHCNN"), d, all_train(d), cfg);
      FAIL("expected divergence");
    } catch (const NumericalError& e) {
      CHECK(std::string(e.what()).find("epoch") != std::string::npos);
    }
  }
}

TEST_CASE("network batchnorm recalibration does not depend on the chunk size") {
  const SpectraDataset d = toy_subset();
  for (const auto& name : {"CNN", "MHCNN"}) {
    Network a(build_model(name)), b(build_model(name));
    a.init(4);
    b.init(4);
    a.recalibrate_batchnorm(d.rows(), 3);
    b.recalibrate_batchnorm(d.rows(), 10);
    const Tensor pa = a.predict_proba(to_batch(d.rows())), pb = b.predict_proba(to_batch(d.rows()));
    for (std::size_t i = 0; i < pa.size(); ++i) CHECK(pa[i] == doctest::Approx(pb[i]).epsilon(1e-9));
  }
}

TEST_CASE("prediction and checkpoints") {
  const SpectraDataset d = toy_subset();
  TrainConfig cfg;
  cfg.epochs = 5;
  cfg.seed = 2;
  const TrainedModel m = train(build_model("FullCNN"), d, all_train(d), cfg);
  SUBCASE("probabilities sum to one and predict is repeatable") {
    const Prediction a = predict(m, d.rows(), 3);
    const Prediction b = predict(m, d.rows());
    CHECK(a.labels == b.labels);
    CHECK((a.probabilities - b.probabilities).cwiseAbs().maxCoeff() < 1e-12);
    for (Eigen::Index r = 0; r < a.probabilities.rows(); ++r) CHECK(std::abs(a.probabilities.row(r).sum() - 1.0) < 1e-9);
  }
  SUBCASE("checkpoint round trip") {
    const auto text = checkpoint(m).dump();
    const TrainedModel back = load_checkpoint(nlohmann::json::parse(text));
    CHECK(predict(back, d.rows()).probabilities == predict(m, d.rows()).probabilities);
    CHECK_THROWS_AS(load_checkpoint(nlohmann::json{{"format", "specbench-network"}}), DataError);
  }
  SUBCASE("untrained model and bad input") {
    CHECK_THROWS_AS(predict(TrainedModel{}, d.rows()), NotFittedError);
    RowMatrix bad = d.rows();
    bad(0, 3) = std::nan("");
    CHECK_THROWS_AS(predict(m, bad), DataError);
  }
  SUBCASE("dominant logit takes the mass") {
    const Tensor p = softmax(Tensor({2, 4}, {10, 0, 0, 0, 1, 3, 3, 0}));
    CHECK(p[0] > 0.99);
  }
}
