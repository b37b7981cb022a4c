#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <map>
#include <string>
#include <vector>

#include <Eigen/Dense>
#include <nlohmann/json.hpp>

#include "ctxdet/rng.hpp"

namespace ctxdet {

using Matrix = Eigen::MatrixXd;
using Vector = Eigen::VectorXd;
using DenseVector = Eigen::VectorXd;

// y = W x + b. Batched calls take one sample per row: X is N x in.
struct LinearLayer {
  std::string name;
  Matrix weights;  // out x in
  Vector bias;     // out (size 0 when has_bias is false)
  bool has_bias = true;

  LinearLayer() = default;
  LinearLayer(std::string n, int out, int in, bool with_bias = true);

  int out_dim() const { return static_cast<int>(weights.rows()); }
  int in_dim() const { return static_cast<int>(weights.cols()); }
  size_t param_count() const { return weights.size() + bias.size(); }

  Matrix forward(const Matrix& x) const;
  // Accumulates dW and db into `grad` and returns dX.
  Matrix backward(const Matrix& x, const Matrix& dy, LinearLayer& grad) const;
  // Same, without computing dX.
  void accumulate(const Matrix& x, const Matrix& dy, LinearLayer& grad) const;
  void set_zero();
};

// Uniform in [-a, a], a = sqrt(6 / (in + out)); bias zeroed.
void init_uniform(LinearLayer& layer, Rng& rng);

Matrix tanh_forward(const Matrix& x);
// `y` is the forward output.
Matrix tanh_backward(const Matrix& y, const Matrix& dy);
Matrix sigmoid_forward(const Matrix& x);
Matrix sigmoid_backward(const Matrix& y, const Matrix& dy);
double sigmoid(double z);

struct LossValue {
  double value = 0.0;
  double derivative = 0.0;
};

// delta^2 / 2 for |delta| < 1, |delta| - 1/2 otherwise.
LossValue huber(double delta);

inline constexpr double kProbEpsilon = 1e-7;
// -y log p - (1 - y) log(1 - p), p clamped to [eps, 1 - eps]; derivative is
// with respect to p (zero where the clamp is active).
LossValue nll(int y, double p);

// Row-wise softmax.
Matrix softmax_rows(const Matrix& logits);

// Named layers plus metadata; the unit that is trained, saved and loaded.
class ParamBundle {
 public:
  std::string variant;
  std::uint64_t seed = 0;
  nlohmann::json meta = nlohmann::json::object();

  LinearLayer& add(LinearLayer layer);
  bool has(const std::string& name) const { return index_.count(name) > 0; }
  LinearLayer& layer(const std::string& name);
  const LinearLayer& layer(const std::string& name) const;
  std::vector<LinearLayer>& layers() { return layers_; }
  const std::vector<LinearLayer>& layers() const { return layers_; }
  size_t param_count() const;

  // Same layer shapes, all zeros; meta copied.
  ParamBundle zeros_like() const;
  void set_zero();
  // this += alpha * other (shapes must match).
  void add_scaled(const ParamBundle& other, double alpha);

  nlohmann::json to_json() const;
  static ParamBundle from_json(const nlohmann::json& j);
  std::string serialize() const;
  void save(const std::filesystem::path& path) const;
  static ParamBundle load(const std::filesystem::path& path);

 private:
  std::vector<LinearLayer> layers_;
  std::map<std::string, size_t> index_;
};

inline constexpr int kModelFormatVersion = 1;

// theta <- theta - lr * g for every layer. Throws ShapeMismatch.
void sgd_step(ParamBundle& params, const ParamBundle& grads, double lr);

// Loss evaluated at `params`; when `grads` is non-null it has the same
// shapes and receives dLoss/dparams (accumulated from zero).
using LossFunction = std::function<double(const ParamBundle& params, ParamBundle* grads)>;

struct GradCheckResult {
  double max_rel_error = 0.0;
  size_t checked = 0;
  std::string worst_layer;
  double worst_analytic = 0.0;
  double worst_numeric = 0.0;
};

struct GradCheckOptions {
  double step = 1e-4;
  // Entry-wise relative error |a - n| / max(|a|, |n|, denominator_floor).
  double denominator_floor = 1e-6;
  // 0 checks every parameter; otherwise a seeded random subset.
  size_t max_entries = 0;
  std::uint64_t seed = 0;
};

// Compares the analytic gradient with central finite differences.
GradCheckResult grad_check(const ParamBundle& params, const LossFunction& loss,
                           const GradCheckOptions& opts = {});

}  // namespace ctxdet
