#include <cmath>
#include <filesystem>
#include <random>

#include "ctxdet/error.hpp"
#include "ctxdet/feature_map.hpp"
#include "ctxdet/io.hpp"
#include "ctxdet/nn.hpp"
#include "doctest.h"
#include "oracles.hpp"

using namespace ctxdet;

namespace {

FeatureMap random_map(std::mt19937_64& rng, int c, int h, int w, double stride) {
  FeatureMap fm(c, h, w, stride);
  std::normal_distribution<float> n(0.0f, 1.0f);
  for (float& v : fm.data) v = n(rng);
  return fm;
}

}  // namespace

TEST_CASE("roi_pool degenerate grid gives global max per channel") {
  std::mt19937_64 rng(1);
  const FeatureMap fm = random_map(rng, 3, 5, 7, 4.0);
  const RoiPoolResult r = roi_pool(fm, {0, 0, 28, 20}, 1);
  for (int c = 0; c < 3; ++c) {
    float m = -1e30f;
    for (int y = 0; y < 5; ++y)
      for (int x = 0; x < 7; ++x) m = std::max(m, fm.at(c, y, x));
    CHECK(r.values[c] == m);
  }
}

TEST_CASE("roi_pool quadrant maxima on a known 4x4 map") {
  FeatureMap fm(1, 4, 4, 1.0);
  const float vals[16] = {1, 2, 3, 4,  //
                          5, 6, 7, 8,  //
                          9, 1, 2, 3,  //
                          4, 5, 0, 1};
  std::copy(vals, vals + 16, fm.data.begin());
  const RoiPoolResult r = roi_pool(fm, {0, 0, 4, 4}, 2);
  CHECK(r.values[0] == 6.0);
  CHECK(r.values[1] == 8.0);
  CHECK(r.values[2] == 9.0);
  CHECK(r.values[3] == 3.0);
}

TEST_CASE("roi_pool rejects boxes outside the map") {
  FeatureMap fm(1, 4, 4, 2.0);
  CHECK_THROWS_AS(roi_pool(fm, {100, 100, 4, 4}, 2), Error);
  CHECK_THROWS_AS(roi_pool(fm, {-20, 0, 5, 4}, 2), Error);
}

TEST_CASE("roi_pool equals cell enumeration on random boxes and grids") {
  std::mt19937_64 rng(2);
  std::uniform_real_distribution<double> pos(-10.0, 60.0);
  std::uniform_real_distribution<double> size(1.0, 50.0);
  std::uniform_int_distribution<int> grid(1, 7);
  int trials = 0;
  while (trials < 200) {
    const FeatureMap fm = random_map(rng, 2, 13, 11, 4.0);
    const BoundingBox box{pos(rng), pos(rng), size(rng), size(rng)};
    if (box.x2() <= 0 || box.y2() <= 0 || box.x >= 44 || box.y >= 52) continue;
    const int g = grid(rng);
    const RoiPoolResult r = roi_pool(fm, box, g);
    CHECK(r.values == oracle::enumerate_roi_max(fm, box, g));
    ++trials;
  }
}

TEST_CASE("roi_pool subgradient matches finite differences") {
  std::mt19937_64 rng(3);
  FeatureMap fm = random_map(rng, 2, 6, 6, 2.0);
  const BoundingBox box{1.0, 2.5, 9.0, 7.0};
  const int g = 3;
  Eigen::VectorXd weights = Eigen::VectorXd::Random(2 * g * g);
  const RoiPoolResult base = roi_pool(fm, box, g);
  std::vector<double> analytic(fm.data.size(), 0.0);
  for (size_t o = 0; o < base.argmax.size(); ++o) {
    if (base.argmax[o] >= 0) analytic[base.argmax[o]] += weights[o];
  }
  const float h = 1e-3f;
  for (size_t i = 0; i < fm.data.size(); ++i) {
    const float saved = fm.data[i];
    fm.data[i] = saved + h;
    const double up = weights.dot(roi_pool(fm, box, g).values);
    fm.data[i] = saved - h;
    const double down = weights.dot(roi_pool(fm, box, g).values);
    fm.data[i] = saved;
    CHECK((up - down) / (2.0 * h) == doctest::Approx(analytic[i]).epsilon(1e-3));
  }
}

TEST_CASE("feature map file round trip and header layout") {
  std::mt19937_64 rng(4);
  const FeatureMap fm = random_map(rng, 3, 4, 5, 4.0);
  const auto dir = std::filesystem::temp_directory_path() / "ctxdet_test_fm";
  std::filesystem::create_directories(dir);
  save_feature_map(fm, dir / "a.bin");
  const FeatureMap back = load_feature_map(dir / "a.bin");
  CHECK(back == fm);
  const std::string raw = read_file(dir / "a.bin");
  REQUIRE(raw.size() == 16 + 60 * 4);
  CHECK(raw[0] == 3);
  CHECK(raw[4] == 4);
  CHECK(raw[8] == 5);
  CHECK(raw[12] == 4);
}

TEST_CASE("huber loss") {
  CHECK(huber(0.0).value == 0.0);
  CHECK(huber(1.0).value == 0.5);
  CHECK(huber(1.0 - 1e-12).value == doctest::Approx(0.5));
  CHECK(huber(-2.0).value == 1.5);
  CHECK(huber(-2.0).derivative == -1.0);
  for (double d : {-1.0, 1.0}) {
    const LossValue lo = huber(d * (1.0 - 1e-9));
    const LossValue hi = huber(d * (1.0 + 1e-9));
    CHECK(std::abs(lo.value - hi.value) < 1e-6);
    CHECK(std::abs(lo.derivative - hi.derivative) < 1e-6);
  }
  for (double d = -3.0; d <= 3.0; d += 0.37) {
    CHECK(std::abs(huber(d).derivative) <= 1.0);
  }
}

TEST_CASE("nll loss and gradient") {
  CHECK(nll(1, 1.0 - 1e-12).value == doctest::Approx(0.0).epsilon(1e-6));
  CHECK(nll(1, 1.0).value < 1e-6);
  CHECK(nll(0, 0.5).value == doctest::Approx(std::log(2.0)));
  CHECK(std::isfinite(nll(1, 0.0).value));
  for (double p : {0.05, 0.3, 0.5, 0.81}) {
    for (int y : {0, 1}) {
      const double h = 1e-6;
      const double numeric = (nll(y, p + h).value - nll(y, p - h).value) / (2 * h);
      CHECK(std::abs(numeric - nll(y, p).derivative) / std::abs(numeric) < 1e-6);
    }
  }
}

TEST_CASE("activations and linear layer basics") {
  Matrix z = Matrix::Zero(1, 3);
  CHECK(tanh_forward(z)(0, 0) == 0.0);
  CHECK(sigmoid_forward(z)(0, 0) == 0.5);

  LinearLayer id("id", 3, 3);
  id.weights.setIdentity();
  Matrix x(2, 3);
  x << 1, 2, 3, -4, 5, 0.5;
  CHECK(id.forward(x) == x);
  CHECK_THROWS_AS(id.forward(Matrix::Zero(2, 4)), ShapeMismatch);
}

namespace {

ParamBundle two_layer_net(std::uint64_t seed) {
  Rng rng(seed);
  ParamBundle p;
  init_uniform(p.add(LinearLayer("fc1", 5, 4)), rng);
  init_uniform(p.add(LinearLayer("fc2", 3, 5)), rng);
  p.layer("fc1").bias.setRandom();
  p.layer("fc2").bias.setRandom();
  return p;
}

// tanh hidden layer, sigmoid outputs, summed NLL against fixed labels.
double two_layer_loss(const ParamBundle& p, ParamBundle* g, const Matrix& x, const Eigen::MatrixXi& y) {
  const auto& fc1 = p.layer("fc1");
  const auto& fc2 = p.layer("fc2");
  const Matrix h = tanh_forward(fc1.forward(x));
  const Matrix out = sigmoid_forward(fc2.forward(h));
  double loss = 0.0;
  Matrix dout(out.rows(), out.cols());
  for (Eigen::Index r = 0; r < out.rows(); ++r) {
    for (Eigen::Index c = 0; c < out.cols(); ++c) {
      const LossValue l = nll(y(r, c), out(r, c));
      loss += l.value;
      dout(r, c) = l.derivative;
    }
  }
  if (g) {
    const Matrix dz2 = sigmoid_backward(out, dout);
    const Matrix dh = fc2.backward(h, dz2, g->layer("fc2"));
    fc1.backward(x, tanh_backward(h, dh), g->layer("fc1"));
  }
  return loss;
}

}  // namespace

TEST_CASE("composed two-layer net passes gradient check") {
  for (std::uint64_t seed = 0; seed < 5; ++seed) {
    const ParamBundle p = two_layer_net(seed);
    std::mt19937_64 rng(seed);
    const Matrix x = Matrix::Random(6, 4);
    Eigen::MatrixXi y(6, 3);
    for (int i = 0; i < y.size(); ++i) y.data()[i] = int(rng() % 2);
    const auto res = grad_check(p, [&](const ParamBundle& q, ParamBundle* g) { return two_layer_loss(q, g, x, y); });
    CHECK(res.checked == p.param_count());
    CHECK(res.max_rel_error < 1e-4);
  }
}

TEST_CASE("grad_check on a linear layer and on an empty bundle") {
  Rng rng(9);
  ParamBundle p;
  init_uniform(p.add(LinearLayer("lin", 3, 4)), rng);
  const Matrix x = Matrix::Random(5, 4);
  const Matrix target = Matrix::Random(5, 3);
  auto loss = [&](const ParamBundle& q, ParamBundle* g) {
    const Matrix r = q.layer("lin").forward(x) - target;
    if (g) q.layer("lin").accumulate(x, r, g->layer("lin"));
    return 0.5 * r.squaredNorm();
  };
  CHECK(grad_check(p, loss).max_rel_error < 1e-7);

  const ParamBundle empty;
  const auto res = grad_check(empty, [](const ParamBundle&, ParamBundle*) { return 1.0; });
  CHECK(res.checked == 0);
  CHECK(res.max_rel_error == 0.0);
}

TEST_CASE("sgd step") {
  ParamBundle p;
  p.add(LinearLayer("s", 1, 1, false)).weights(0, 0) = 1.0;
  ParamBundle g = p.zeros_like();
  g.layer("s").weights(0, 0) = 2.0;

  ParamBundle same = p;
  sgd_step(same, g, 0.0);
  CHECK(same.layer("s").weights(0, 0) == 1.0);
  sgd_step(p, g, 0.1);
  CHECK(p.layer("s").weights(0, 0) == doctest::Approx(0.8));

  ParamBundle other;
  other.add(LinearLayer("s", 2, 1, false));
  CHECK_THROWS_AS(sgd_step(p, other, 0.1), ShapeMismatch);
}

TEST_CASE("sgd on a convex quadratic never increases the loss at small lr") {
  Rng rng(10);
  ParamBundle p;
  init_uniform(p.add(LinearLayer("lin", 2, 3)), rng);
  const Matrix x = Matrix::Random(8, 3);
  const Matrix t = Matrix::Random(8, 2);
  auto loss = [&](const ParamBundle& q, ParamBundle* g) {
    const Matrix r = q.layer("lin").forward(x) - t;
    if (g) q.layer("lin").accumulate(x, r, g->layer("lin"));
    return 0.5 * r.squaredNorm();
  };
  double prev = loss(p, nullptr);
  for (int i = 0; i < 200; ++i) {
    ParamBundle g = p.zeros_like();
    loss(p, &g);
    sgd_step(p, g, 0.01);
    const double cur = loss(p, nullptr);
    CHECK(cur <= prev + 1e-12);
    prev = cur;
  }
}

TEST_CASE("model file save-load-save is byte identical") {
  ParamBundle p = two_layer_net(42);
  p.variant = "test";
  p.seed = 42;
  p.meta["dims"] = {4, 5, 3};
  p.add(LinearLayer("nobias", 2, 2, false)).weights << 0.1, 1.0 / 3.0, -2e-17, 12345.678;
  const auto dir = std::filesystem::temp_directory_path() / "ctxdet_test_model";
  p.save(dir / "m.json");
  const ParamBundle q = ParamBundle::load(dir / "m.json");
  q.save(dir / "m2.json");
  CHECK(read_file(dir / "m.json") == read_file(dir / "m2.json"));
  CHECK(q.layer("fc1").weights == p.layer("fc1").weights);
  CHECK(q.seed == 42);
  CHECK_FALSE(q.layer("nobias").has_bias);
}

TEST_CASE("grad_check flags a wrong gradient") {
  Rng rng(10);
  ParamBundle p;
  init_uniform(p.add(LinearLayer("lin", 2, 3)), rng);
  const Matrix x = Matrix::Random(4, 3);
  auto loss = [&](const ParamBundle& q, ParamBundle* g) {
    const Matrix y = q.layer("lin").forward(x);
    if (g) q.layer("lin").accumulate(x, 1.01 * y, g->layer("lin"));
    return 0.5 * y.squaredNorm();
  };
  const auto res = grad_check(p, loss);
  CHECK(res.max_rel_error > 5e-3);
  CHECK(res.worst_layer == "lin");
}
