#include "ctxdet/nn.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include "ctxdet/error.hpp"
#include "ctxdet/io.hpp"

namespace ctxdet {

LinearLayer::LinearLayer(std::string n, int out, int in, bool with_bias)
    : name(std::move(n)),
      weights(Matrix::Zero(out, in)),
      bias(with_bias ? Vector::Zero(out) : Vector()),
      has_bias(with_bias) {}

Matrix LinearLayer::forward(const Matrix& x) const {
  if (x.cols() != weights.cols()) {
    throw ShapeMismatch("linear '" + name + "': input has " + std::to_string(x.cols()) +
                        " columns, expected " + std::to_string(weights.cols()));
  }
  Matrix y = x * weights.transpose();
  if (has_bias) y.rowwise() += bias.transpose();
  return y;
}

void LinearLayer::accumulate(const Matrix& x, const Matrix& dy, LinearLayer& grad) const {
  if (dy.cols() != weights.rows() || dy.rows() != x.rows() || x.cols() != weights.cols()) {
    throw ShapeMismatch("linear '" + name + "': backward shape mismatch");
  }
  grad.weights.noalias() += dy.transpose() * x;
  if (has_bias) grad.bias.noalias() += dy.colwise().sum().transpose();
}

Matrix LinearLayer::backward(const Matrix& x, const Matrix& dy, LinearLayer& grad) const {
  accumulate(x, dy, grad);
  return dy * weights;
}

void LinearLayer::set_zero() {
  weights.setZero();
  if (has_bias) bias.setZero();
}

void init_uniform(LinearLayer& layer, Rng& rng) {
  const double a = std::sqrt(6.0 / static_cast<double>(layer.in_dim() + layer.out_dim()));
  std::uniform_real_distribution<double> dist(-a, a);
  // Row-major fill order so the draw sequence doesn't depend on Eigen storage.
  for (Eigen::Index r = 0; r < layer.weights.rows(); ++r) {
    for (Eigen::Index c = 0; c < layer.weights.cols(); ++c) layer.weights(r, c) = dist(rng);
  }
  if (layer.has_bias) layer.bias.setZero();
}

double sigmoid(double z) {
  if (z >= 0.0) return 1.0 / (1.0 + std::exp(-z));
  const double e = std::exp(z);
  return e / (1.0 + e);
}

Matrix tanh_forward(const Matrix& x) { return x.array().tanh().matrix(); }

Matrix tanh_backward(const Matrix& y, const Matrix& dy) {
  return (dy.array() * (1.0 - y.array().square())).matrix();
}

Matrix sigmoid_forward(const Matrix& x) { return x.unaryExpr([](double z) { return sigmoid(z); }); }

Matrix sigmoid_backward(const Matrix& y, const Matrix& dy) {
  return (dy.array() * y.array() * (1.0 - y.array())).matrix();
}

LossValue huber(double delta) {
  const double a = std::abs(delta);
  if (a < 1.0) return {0.5 * delta * delta, delta};
  return {a - 0.5, delta > 0.0 ? 1.0 : -1.0};
}

LossValue nll(int y, double p) {
  const double lo = kProbEpsilon;
  const double hi = 1.0 - kProbEpsilon;
  const bool clamped = p < lo || p > hi;
  const double q = std::clamp(p, lo, hi);
  if (y == 1) return {-std::log(q), clamped ? 0.0 : -1.0 / q};
  return {-std::log(1.0 - q), clamped ? 0.0 : 1.0 / (1.0 - q)};
}

Matrix softmax_rows(const Matrix& logits) {
  Matrix out(logits.rows(), logits.cols());
  for (Eigen::Index r = 0; r < logits.rows(); ++r) {
    const double m = logits.row(r).maxCoeff();
    out.row(r) = (logits.row(r).array() - m).exp().matrix();
    out.row(r) /= out.row(r).sum();
  }
  return out;
}

LinearLayer& ParamBundle::add(LinearLayer layer) {
  if (has(layer.name)) throw Error("duplicate layer name: " + layer.name);
  index_[layer.name] = layers_.size();
  layers_.push_back(std::move(layer));
  return layers_.back();
}

LinearLayer& ParamBundle::layer(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no such layer: " + name);
  return layers_[it->second];
}

const LinearLayer& ParamBundle::layer(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw Error("no such layer: " + name);
  return layers_[it->second];
}

size_t ParamBundle::param_count() const {
  return std::accumulate(layers_.begin(), layers_.end(), size_t{0},
                         [](size_t acc, const LinearLayer& l) { return acc + l.param_count(); });
}

ParamBundle ParamBundle::zeros_like() const {
  ParamBundle z = *this;
  z.set_zero();
  return z;
}

void ParamBundle::set_zero() {
  for (auto& l : layers_) l.set_zero();
}

void ParamBundle::add_scaled(const ParamBundle& other, double alpha) {
  if (other.layers_.size() != layers_.size()) throw ShapeMismatch("param bundles differ in layer count");
  for (size_t i = 0; i < layers_.size(); ++i) {
    LinearLayer& a = layers_[i];
    const LinearLayer& b = other.layers_[i];
    if (a.weights.rows() != b.weights.rows() || a.weights.cols() != b.weights.cols() ||
        a.bias.size() != b.bias.size()) {
      throw ShapeMismatch("param bundles differ in shape at layer '" + a.name + "'");
    }
    a.weights += alpha * b.weights;
    if (a.has_bias) a.bias += alpha * b.bias;
  }
}

nlohmann::json ParamBundle::to_json() const {
  nlohmann::json j;
  j["format"] = "ctxdet-model";
  j["version"] = kModelFormatVersion;
  j["variant"] = variant;
  j["seed"] = seed;
  j["meta"] = meta;
  nlohmann::json arr = nlohmann::json::array();
  for (const auto& l : layers_) {
    nlohmann::json lj;
    lj["name"] = l.name;
    lj["shape"] = {l.weights.rows(), l.weights.cols()};
    lj["has_bias"] = l.has_bias;
    std::vector<double> w;
    w.reserve(l.weights.size());
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) w.push_back(l.weights(r, c));
    }
    lj["weights"] = std::move(w);
    if (l.has_bias) lj["bias"] = std::vector<double>(l.bias.data(), l.bias.data() + l.bias.size());
    arr.push_back(std::move(lj));
  }
  j["layers"] = std::move(arr);
  return j;
}

ParamBundle ParamBundle::from_json(const nlohmann::json& j) {
  try {
    if (j.at("format").get<std::string>() != "ctxdet-model") throw SchemaError("format", "not a model file");
    if (j.at("version").get<int>() != kModelFormatVersion) throw SchemaError("version", "unsupported version");
    ParamBundle p;
    p.variant = j.at("variant").get<std::string>();
    p.seed = j.at("seed").get<std::uint64_t>();
    p.meta = j.at("meta");
    const auto& layers = j.at("layers");
    for (size_t i = 0; i < layers.size(); ++i) {
      const auto& lj = layers[i];
      const std::string where = "layers[" + std::to_string(i) + "]";
      const int rows = lj.at("shape").at(0).get<int>();
      const int cols = lj.at("shape").at(1).get<int>();
      LinearLayer l(lj.at("name").get<std::string>(), rows, cols, lj.at("has_bias").get<bool>());
      const auto w = lj.at("weights").get<std::vector<double>>();
      if (w.size() != static_cast<size_t>(rows) * cols) throw SchemaError(where + ".weights", "length mismatch");
      for (int r = 0; r < rows; ++r) {
        for (int c = 0; c < cols; ++c) l.weights(r, c) = w[static_cast<size_t>(r) * cols + c];
      }
      if (l.has_bias) {
        const auto b = lj.at("bias").get<std::vector<double>>();
        if (b.size() != static_cast<size_t>(rows)) throw SchemaError(where + ".bias", "length mismatch");
        l.bias = Eigen::Map<const Vector>(b.data(), rows);
      }
      p.add(std::move(l));
    }
    return p;
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("model", e.what());
  }
}

std::string ParamBundle::serialize() const { return to_json().dump() + "\n"; }

void ParamBundle::save(const std::filesystem::path& path) const { write_file_atomic(path, serialize()); }

ParamBundle ParamBundle::load(const std::filesystem::path& path) {
  const std::string text = read_file(path);
  nlohmann::json j;
  try {
    j = nlohmann::json::parse(text);
  } catch (const nlohmann::json::exception& e) {
    throw SchemaError("", std::string("invalid JSON: ") + e.what());
  }
  return from_json(j);
}

void sgd_step(ParamBundle& params, const ParamBundle& grads, double lr) { params.add_scaled(grads, -lr); }

namespace {

// Flat view of every scalar parameter as (layer index, pointer offset).
struct ParamRef {
  size_t layer;
  bool is_bias;
  Eigen::Index row, col;
};

std::vector<ParamRef> enumerate_params(const ParamBundle& p) {
  std::vector<ParamRef> refs;
  for (size_t li = 0; li < p.layers().size(); ++li) {
    const auto& l = p.layers()[li];
    for (Eigen::Index r = 0; r < l.weights.rows(); ++r) {
      for (Eigen::Index c = 0; c < l.weights.cols(); ++c) refs.push_back({li, false, r, c});
    }
    for (Eigen::Index r = 0; r < l.bias.size(); ++r) refs.push_back({li, true, r, 0});
  }
  return refs;
}

double& param_at(ParamBundle& p, const ParamRef& ref) {
  auto& l = p.layers()[ref.layer];
  return ref.is_bias ? l.bias[ref.row] : l.weights(ref.row, ref.col);
}

}  // namespace

GradCheckResult grad_check(const ParamBundle& params, const LossFunction& loss, const GradCheckOptions& opts) {
  GradCheckResult result;
  std::vector<ParamRef> refs = enumerate_params(params);
  if (refs.empty()) return result;
  if (opts.max_entries > 0 && refs.size() > opts.max_entries) {
    Rng rng(opts.seed);
    std::shuffle(refs.begin(), refs.end(), rng);
    refs.resize(opts.max_entries);
  }

  ParamBundle analytic = params.zeros_like();
  loss(params, &analytic);
  ParamBundle probe = params;
  for (const ParamRef& ref : refs) {
    double& v = param_at(probe, ref);
    const double saved = v;
    v = saved + opts.step;
    const double up = loss(probe, nullptr);
    v = saved - opts.step;
    const double down = loss(probe, nullptr);
    v = saved;
    const double numeric = (up - down) / (2.0 * opts.step);
    const double a = param_at(analytic, ref);
    const double denom = std::max({std::abs(a), std::abs(numeric), opts.denominator_floor});
    const double rel = std::abs(a - numeric) / denom;
    if (rel > result.max_rel_error) {
      result.max_rel_error = rel;
      result.worst_layer = params.layers()[ref.layer].name;
      result.worst_analytic = a;
      result.worst_numeric = numeric;
    }
    ++result.checked;
  }
  return result;
}

}  // namespace ctxdet
