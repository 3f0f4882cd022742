#include <doctest.h>

#include <cmath>
#include <random>

#include "helpers.hpp"
#include "metaictal/nets.hpp"

using namespace metaictal;
using namespace metaictal::nets;

namespace {

ResNetHyper tiny_resnet() {
  ResNetHyper h;
  h.in_channels = 2;
  h.input_len = 12;
  h.widths = {3, 3};
  h.strides = {1, 2};
  h.kernel = 3;
  return h;
}

LstmHyper tiny_lstm() {
  LstmHyper h;
  h.in_features = 2;
  h.seq_len = 8;
  h.hidden = 4;
  h.frame = 2;
  return h;
}

// Main-network batch loss with random inputs and soft targets.
struct RandomBatch {
  std::vector<Matrix> xs;
  std::vector<double> targets;
  RandomBatch(Eigen::Index rows, Eigen::Index cols, int n, std::mt19937_64& rng) {
    std::uniform_real_distribution<double> u(0.0, 1.0);
    for (int i = 0; i < n; ++i) {
      xs.push_back(testutil::random_matrix(rows, cols, rng));
      targets.push_back(u(rng));
    }
  }
  MainBatchLoss loss(const MainNetwork& net) const {
    MainBatchLoss l{&net, {}, targets};
    for (const auto& x : xs) l.xs.push_back(&x);
    return l;
  }
};

double fd_ratio(const MainNetwork& net, const RandomBatch& batch) {
  const auto loss = batch.loss(net);
  const auto analytic = grad(loss, net.params);
  const auto numeric = testutil::finite_difference(
      [&](const ParamVector& p) { return loss(p, nullptr); }, net.params);
  return testutil::tolerance_ratio(analytic, numeric, 1e-4, 1e-6);
}

}  // namespace

TEST_SUITE("nets") {

TEST_CASE("fresh networks output 0.5 for any input") {
  std::mt19937_64 rng(1);
  const auto resnet = make_resnet_main(tiny_resnet(), 3);
  const auto lstm = make_lstm_main(tiny_lstm(), 3);
  const auto meta = make_meta(2, 8, 4, 4, 2, 3);
  for (int i = 0; i < 5; ++i) {
    CHECK(resnet.forward(testutil::random_matrix(2, 12, rng)) == 0.5);
    CHECK(lstm.forward(testutil::random_matrix(2, 8, rng)) == 0.5);
    CHECK(meta.forward(testutil::random_matrix(2, 8, rng), testutil::random_matrix(2, 4, rng)) ==
          0.5);
  }
}

TEST_CASE("initialization is seeded") {
  CHECK(make_resnet_main(tiny_resnet(), 4).params == make_resnet_main(tiny_resnet(), 4).params);
  CHECK_FALSE(make_resnet_main(tiny_resnet(), 4).params ==
              make_resnet_main(tiny_resnet(), 5).params);
  CHECK(make_lstm_main(tiny_lstm(), 4).params == make_lstm_main(tiny_lstm(), 4).params);
}

TEST_CASE("batched forward maps samples independently") {
  std::mt19937_64 rng(2);
  auto net = make_resnet_main(tiny_resnet(), 1);
  testutil::randomize(net.params, rng);
  const Matrix a = testutil::random_matrix(2, 12, rng);
  const Matrix b = testutil::random_matrix(2, 12, rng);
  std::vector<const Matrix*> batch{&a, &b, &a};
  const auto out = net.forward_batch(batch);
  CHECK(out[0] == out[2]);
  CHECK(out[0] == net.forward(a));
  CHECK(out[1] == net.forward(b));
  for (double p : out) CHECK((p > 0.0 && p < 1.0));
}

TEST_CASE("wrong input shapes are rejected") {
  const auto net = make_resnet_main(tiny_resnet(), 1);
  const auto meta = make_meta(2, 8, 4, 4, 2, 1);
  auto shape_error = [](auto&& f) {
    try {
      f();
    } catch (const Error& e) {
      return e.code() == Errc::shape_mismatch;
    }
    return false;
  };
  CHECK(shape_error([&] { net.forward(Matrix::Zero(2, 11)); }));
  CHECK(shape_error([&] { net.forward(Matrix::Zero(3, 12)); }));
  CHECK(shape_error([&] { meta.forward(Matrix::Zero(2, 8), Matrix::Zero(2, 5)); }));
}

TEST_CASE("resnet gradient matches finite differences on 10 seeds") {
  auto net = make_resnet_main(tiny_resnet(), 0);
  REQUIRE(net.params.size() <= 200);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed);
    net.params = net.model->init(seed);
    testutil::randomize(net.params, rng);
    const RandomBatch batch(2, 12, 3, rng);
    CHECK(fd_ratio(net, batch) <= 1.0);
  }
}

TEST_CASE("lstm gradient matches finite differences on 10 seeds") {
  auto net = make_lstm_main(tiny_lstm(), 0);
  REQUIRE(net.params.size() <= 200);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 100);
    testutil::randomize(net.params, rng);
    const RandomBatch batch(2, 8, 3, rng);
    CHECK(fd_ratio(net, batch) <= 1.0);
  }
}

TEST_CASE("meta gradient of a target loss matches finite differences") {
  auto meta = make_meta(2, 4, 2, 3, 2, 0);
  REQUIRE(meta.params.size() <= 200);
  for (std::uint64_t seed = 0; seed < 10; ++seed) {
    std::mt19937_64 rng(seed + 200);
    testutil::randomize(meta.params, rng);
    std::vector<Matrix> xs, ys;
    for (int i = 0; i < 3; ++i) {
      xs.push_back(testutil::random_matrix(2, 4, rng));
      ys.push_back(testutil::random_matrix(2, 2, rng));
    }
    MetaTargetLoss loss{&meta, {}, {}, {0.2, 0.7, 0.9}};
    for (int i = 0; i < 3; ++i) {
      loss.xs.push_back(&xs[i]);
      loss.ys.push_back(&ys[i]);
    }
    const auto analytic = grad(loss, meta.params);
    const auto numeric = testutil::finite_difference(
        [&](const ParamVector& p) { return loss(p, nullptr); }, meta.params);
    CHECK(testutil::tolerance_ratio(analytic, numeric, 1e-4, 1e-6) <= 1.0);
  }
}

TEST_CASE("meta output depends on both history and horizon") {
  std::mt19937_64 rng(9);
  auto meta = make_meta(2, 8, 4, 4, 2, 1);
  testutil::randomize(meta.params, rng, 1.0);
  const Matrix x = testutil::random_matrix(2, 8, rng);
  const Matrix y = testutil::random_matrix(2, 4, rng);
  const double base = meta.forward(x, y);
  CHECK(meta.forward(x, y) == base);
  CHECK(std::abs(meta.forward(testutil::random_matrix(2, 8, rng), y) - base) > 1e-6);
  CHECK(std::abs(meta.forward(x, testutil::random_matrix(2, 4, rng)) - base) > 1e-6);

  const Matrix joined = meta.join(x, y);
  CHECK(joined.rows() == 3);
  CHECK(joined.cols() == 12);
  CHECK(joined.row(2).head(8).isZero());
  CHECK((joined.row(2).tail(4).array() == 1.0).all());
}

TEST_CASE("bce_loss hand values") {
  const std::vector<double> p1{0.5}, t1{1.0};
  CHECK(bce_loss(p1, t1) == doctest::Approx(std::log(2.0)));
  const std::vector<double> p2{0.8}, t2{0.5};
  CHECK(bce_loss(p2, t2) == doctest::Approx(-(0.5 * std::log(0.8) + 0.5 * std::log(0.2))));
  CHECK(bce_loss(p2, t2) == doctest::Approx(0.9163).epsilon(1e-4));
  const std::vector<double> sat{0.0, 1.0}, sat_t{0.0, 1.0};
  CHECK(bce_loss(sat, sat_t) < 1e-6);
}

TEST_CASE("bce_loss symmetry and permutation invariance") {
  std::mt19937_64 rng(3);
  std::uniform_real_distribution<double> u(0.01, 0.99);
  for (int trial = 0; trial < 20; ++trial) {
    std::vector<double> p(6), t(6), pf(6), tf(6);
    for (int i = 0; i < 6; ++i) {
      p[i] = u(rng);
      t[i] = u(rng);
      pf[i] = 1 - p[i];
      tf[i] = 1 - t[i];
    }
    CHECK(bce_loss(p, t) == doctest::Approx(bce_loss(pf, tf)).epsilon(1e-12));
    std::vector<double> pr(p.rbegin(), p.rend()), tr(t.rbegin(), t.rend());
    CHECK(bce_loss(p, t) == doctest::Approx(bce_loss(pr, tr)).epsilon(1e-12));
  }
}

TEST_CASE("bce_loss rejects bad input") {
  const std::vector<double> p{0.5, 0.5}, t{1.0};
  try {
    bce_loss(p, t);
    FAIL("expected ShapeMismatch");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::shape_mismatch);
  }
  const std::vector<double> nan{std::nan("")}, one{1.0};
  try {
    bce_loss(nan, one);
    FAIL("expected NonFinite");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::non_finite);
  }
}

TEST_CASE("grad of simple objectives") {
  ParamVector w({{"w", {4}}}, {1.0, -2.0, 0.5, 3.0});
  auto half_sq = [](const ParamVector& p, ParamVector* g) {
    if (g) *g = p;
    return 0.5 * p.dot(p);
  };
  CHECK(grad(half_sq, w) == w);
  auto constant = [](const ParamVector&, ParamVector*) { return 4.0; };
  CHECK(grad(constant, w).norm() == 0.0);
  auto bad = [](const ParamVector&, ParamVector*) { return std::nan(""); };
  CHECK_THROWS_AS(grad(bad, w), Error);
}

TEST_CASE("briefly trained net is not constant") {
  std::mt19937_64 rng(4);
  auto net = make_resnet_main(tiny_resnet(), 2);
  std::vector<Matrix> xs;
  std::vector<double> targets;
  for (int i = 0; i < 16; ++i) {
    Matrix x = testutil::random_matrix(2, 12, rng);
    const int label = i % 2;
    if (label) x *= 3.0;
    xs.push_back(x);
    targets.push_back(label);
  }
  MainBatchLoss loss{&net, {}, targets};
  for (const auto& x : xs) loss.xs.push_back(&x);
  for (int step = 0; step < 200; ++step) net.params.axpy(-0.2, grad(loss, net.params));
  double lo = 1, hi = 0;
  for (const auto& x : xs) {
    lo = std::min(lo, net.forward(x));
    hi = std::max(hi, net.forward(x));
  }
  CHECK(hi - lo > 0.1);
}

TEST_CASE("checkpoints round-trip and reject corruption") {
  std::mt19937_64 rng(5);
  auto net = make_lstm_main(tiny_lstm(), 1);
  testutil::randomize(net.params, rng);
  auto meta = make_meta(2, 8, 4, 4, 2, 1);
  testutil::randomize(meta.params, rng);
  const auto dir = testutil::temp_dir("nets_ckpt");
  save_main(net, dir / "main");
  save_meta(meta, dir / "meta");
  const auto back = load_main(dir / "main");
  CHECK(back.arch == MainArch::lstm);
  CHECK(back.params == net.params);
  const Matrix x = testutil::random_matrix(2, 8, rng);
  CHECK(back.forward(x) == net.forward(x));
  const auto meta_back = load_meta(dir / "meta");
  CHECK(meta_back.params == meta.params);
  CHECK(meta_back.x_cols == 8);
  CHECK(meta_back.y_cols == 4);

  const auto file = dir / "main" / "params.bin";
  std::filesystem::resize_file(file, std::filesystem::file_size(file) - 3);
  try {
    load_params(file);
    FAIL("expected FormatError");
  } catch (const Error& e) {
    CHECK(e.code() == Errc::format_error);
  }
  CHECK_THROWS_AS(load_main(dir / "absent"), Error);
}

TEST_CASE("architecture names round-trip") {
  CHECK(main_arch_from_string(to_string(MainArch::lstm)) == MainArch::lstm);
  CHECK(main_arch_from_string(to_string(MainArch::resnet1d)) == MainArch::resnet1d);
  CHECK_THROWS_AS(main_arch_from_string("transformer"), Error);
}

}  // TEST_SUITE
