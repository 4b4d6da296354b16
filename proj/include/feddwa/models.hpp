#ifndef FEDDWA_MODELS_HPP
#define FEDDWA_MODELS_HPP

#include <algorithm>
#include <cmath>
#include <cstddef>
#include <memory>
#include <optional>
#include <span>
#include <string>
#include <vector>

#include "feddwa/errors.hpp"
#include "feddwa/numkit.hpp"

namespace feddwa {

// Row-major feature matrix with integer class labels in [0, num_classes).
class Dataset {
 public:
  Dataset() = default;

  Dataset(std::size_t num_features, std::size_t num_classes, std::vector<double> features,
          std::vector<int> labels)
      : num_features_(num_features),
        num_classes_(num_classes),
        features_(std::move(features)),
        labels_(std::move(labels)) {
    if (num_features_ == 0 || num_classes_ == 0) {
      throw StructuralError("dataset needs at least one feature and one class");
    }
    if (features_.size() != labels_.size() * num_features_) {
      throw StructuralError(detail::concat("dataset: ", features_.size(), " feature values for ",
                                           labels_.size(), " rows of width ", num_features_));
    }
    for (std::size_t r = 0; r < labels_.size(); ++r) {
      if (labels_[r] < 0 || std::size_t(labels_[r]) >= num_classes_) {
        throw StructuralError(detail::concat("dataset: label ", labels_[r], " at row ", r,
                                             " outside [0, ", num_classes_, ")"));
      }
    }
    for (double v : features_) {
      if (!std::isfinite(v)) throw StructuralError("dataset: non-finite feature value");
    }
  }

  std::size_t size() const noexcept { return labels_.size(); }
  bool empty() const noexcept { return labels_.empty(); }
  std::size_t num_features() const noexcept { return num_features_; }
  std::size_t num_classes() const noexcept { return num_classes_; }

  std::span<const double> row(std::size_t r) const {
    return {features_.data() + r * num_features_, num_features_};
  }
  int label(std::size_t r) const { return labels_[r]; }
  std::span<const int> labels() const noexcept { return labels_; }
  std::span<const double> features() const noexcept { return features_; }

  Dataset subset(std::span<const std::size_t> rows) const {
    std::vector<double> f;
    std::vector<int> l;
    f.reserve(rows.size() * num_features_);
    l.reserve(rows.size());
    for (std::size_t r : rows) {
      if (r >= size()) throw StructuralError("dataset subset: row index out of range");
      auto x = row(r);
      f.insert(f.end(), x.begin(), x.end());
      l.push_back(labels_[r]);
    }
    Dataset out;
    out.num_features_ = num_features_;
    out.num_classes_ = num_classes_;
    out.features_ = std::move(f);
    out.labels_ = std::move(l);
    return out;
  }

  std::vector<std::size_t> class_histogram() const {
    std::vector<std::size_t> h(num_classes_, 0);
    for (int y : labels_) ++h[std::size_t(y)];
    return h;
  }

 private:
  std::size_t num_features_ = 0;
  std::size_t num_classes_ = 0;
  std::vector<double> features_;
  std::vector<int> labels_;
};

enum class ModelKind { softmax, mlp };

struct ModelSpec {
  ModelKind kind = ModelKind::softmax;
  std::size_t input_dim = 0;
  std::size_t num_classes = 0;
  std::size_t hidden_dim = 0;  // mlp only
  double init_scale = 0.05;

  void validate() const {
    if (input_dim == 0) throw StructuralError("model spec: input_dim must be positive");
    if (num_classes == 0) throw StructuralError("model spec: num_classes must be positive");
    if (kind == ModelKind::mlp && hidden_dim == 0) {
      throw StructuralError("model spec: mlp needs hidden_dim > 0");
    }
    if (!(init_scale >= 0.0) || !std::isfinite(init_scale)) {
      throw StructuralError("model spec: init_scale must be finite and non-negative");
    }
  }

  // Softmax: W (C x f), b (C). MLP: W1 (h x f), b1 (h), W2 (C x h), b2 (C).
  std::shared_ptr<const Layout> layout() const {
    validate();
    if (kind == ModelKind::softmax) {
      return std::make_shared<const Layout>(
          Layout{{"W", {num_classes, input_dim}}, {"b", {num_classes}}});
    }
    return std::make_shared<const Layout>(Layout{{"W1", {hidden_dim, input_dim}},
                                                 {"b1", {hidden_dim}},
                                                 {"W2", {num_classes, hidden_dim}},
                                                 {"b2", {num_classes}}});
  }

  std::size_t num_params() const { return layout_size(*layout()); }
};

// Uniform in [-init_scale, init_scale].
inline ParamVector init_params(const ModelSpec& spec, Rng& rng) {
  ParamVector params(spec.layout());
  for (double& v : params.values()) {
    v = spec.init_scale == 0.0 ? 0.0 : rng.uniform(-spec.init_scale, spec.init_scale);
  }
  return params;
}

namespace detail {

inline void check_model_inputs(const ParamVector& params, const Dataset& data,
                               const ModelSpec& spec) {
  if (data.num_features() != spec.input_dim) {
    throw StructuralError(concat("model expects ", spec.input_dim, " features, data has ",
                                 data.num_features()));
  }
  if (data.num_classes() > spec.num_classes) {
    throw StructuralError(concat("model has ", spec.num_classes, " classes, data declares ",
                                 data.num_classes()));
  }
  if (params.size() != spec.num_params()) {
    throw StructuralError(concat("model expects ", spec.num_params(), " parameters, got ",
                                 params.size()));
  }
}

// Forward pass for one sample. Writes logits (size C) and, for the MLP, the
// hidden activations (size h).
inline void forward(std::span<const double> p, const ModelSpec& spec, std::span<const double> x,
                    std::span<double> logits, std::span<double> hidden) {
  const std::size_t f = spec.input_dim;
  const std::size_t c = spec.num_classes;
  if (spec.kind == ModelKind::softmax) {
    const double* w = p.data();
    const double* b = p.data() + c * f;
    for (std::size_t k = 0; k < c; ++k) {
      double z = b[k];
      const double* wk = w + k * f;
      for (std::size_t j = 0; j < f; ++j) z += wk[j] * x[j];
      logits[k] = z;
    }
    return;
  }
  const std::size_t h = spec.hidden_dim;
  const double* w1 = p.data();
  const double* b1 = w1 + h * f;
  const double* w2 = b1 + h;
  const double* b2 = w2 + c * h;
  for (std::size_t u = 0; u < h; ++u) {
    double a = b1[u];
    const double* wu = w1 + u * f;
    for (std::size_t j = 0; j < f; ++j) a += wu[j] * x[j];
    hidden[u] = std::tanh(a);
  }
  for (std::size_t k = 0; k < c; ++k) {
    double z = b2[k];
    const double* wk = w2 + k * h;
    for (std::size_t u = 0; u < h; ++u) z += wk[u] * hidden[u];
    logits[k] = z;
  }
}

// Turns logits into probabilities in place and returns log-sum-exp.
inline double softmax_inplace(std::span<double> z) {
  const double top = *std::max_element(z.begin(), z.end());
  double total = 0.0;
  for (double& v : z) {
    v = std::exp(v - top);
    total += v;
  }
  for (double& v : z) v /= total;
  return top + std::log(total);
}

}  // namespace detail

struct LossAndGrad {
  double loss = 0.0;
  ParamVector grad;
};

// Mean cross-entropy and its gradient over the rows of `data` selected by
// `rows` (all rows when empty).
inline LossAndGrad loss_and_grad(const ParamVector& params, const Dataset& data,
                                 const ModelSpec& spec, std::span<const std::size_t> rows = {}) {
  detail::check_model_inputs(params, data, spec);
  const std::size_t n = rows.empty() ? data.size() : rows.size();
  if (n == 0) throw StructuralError("loss/grad: empty batch");

  const std::size_t f = spec.input_dim;
  const std::size_t c = spec.num_classes;
  const std::size_t h = spec.hidden_dim;
  auto p = params.values();

  LossAndGrad out{0.0, ParamVector(params.layout_ptr())};
  auto g = out.grad.values();
  std::vector<double> z(c), hidden(h), dh(h);
  const double inv_n = 1.0 / double(n);
  double total = 0.0;

  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t r = rows.empty() ? s : rows[s];
    auto x = data.row(r);
    const auto y = std::size_t(data.label(r));
    detail::forward(p, spec, x, z, hidden);
    const double zy = z[y];
    const double lse = detail::softmax_inplace(z);
    total += lse - zy;
    z[y] -= 1.0;  // z now holds dL/dlogits for this sample

    if (spec.kind == ModelKind::softmax) {
      double* gw = g.data();
      double* gb = g.data() + c * f;
      for (std::size_t k = 0; k < c; ++k) {
        const double dz = z[k] * inv_n;
        double* gwk = gw + k * f;
        for (std::size_t j = 0; j < f; ++j) gwk[j] += dz * x[j];
        gb[k] += dz;
      }
      continue;
    }

    double* gw1 = g.data();
    double* gb1 = gw1 + h * f;
    double* gw2 = gb1 + h;
    double* gb2 = gw2 + c * h;
    const double* w2 = p.data() + h * f + h;
    std::fill(dh.begin(), dh.end(), 0.0);
    for (std::size_t k = 0; k < c; ++k) {
      const double dz = z[k] * inv_n;
      double* gw2k = gw2 + k * h;
      const double* w2k = w2 + k * h;
      for (std::size_t u = 0; u < h; ++u) {
        gw2k[u] += dz * hidden[u];
        dh[u] += dz * w2k[u];
      }
      gb2[k] += dz;
    }
    for (std::size_t u = 0; u < h; ++u) {
      const double da = dh[u] * (1.0 - hidden[u] * hidden[u]);
      double* gw1u = gw1 + u * f;
      for (std::size_t j = 0; j < f; ++j) gw1u[j] += da * x[j];
      gb1[u] += da;
    }
  }
  out.loss = total * inv_n;
  return out;
}

inline double loss(const ParamVector& params, const Dataset& data, const ModelSpec& spec,
                   std::span<const std::size_t> rows = {}) {
  detail::check_model_inputs(params, data, spec);
  const std::size_t n = rows.empty() ? data.size() : rows.size();
  if (n == 0) throw StructuralError("loss: empty batch");
  std::vector<double> z(spec.num_classes), hidden(spec.hidden_dim);
  double total = 0.0;
  for (std::size_t s = 0; s < n; ++s) {
    const std::size_t r = rows.empty() ? s : rows[s];
    detail::forward(params.values(), spec, data.row(r), z, hidden);
    const double zy = z[std::size_t(data.label(r))];
    total += detail::softmax_inplace(z) - zy;
  }
  return total / double(n);
}

inline ParamVector grad(const ParamVector& params, const Dataset& data, const ModelSpec& spec,
                        std::span<const std::size_t> rows = {}) {
  return loss_and_grad(params, data, spec, rows).grad;
}

// Argmax class; ties go to the lowest index.
inline int predict(const ParamVector& params, std::span<const double> x, const ModelSpec& spec) {
  std::vector<double> z(spec.num_classes), hidden(spec.hidden_dim);
  detail::forward(params.values(), spec, x, z, hidden);
  std::size_t best = 0;
  for (std::size_t k = 1; k < z.size(); ++k) {
    if (z[k] > z[best]) best = k;
  }
  return int(best);
}

inline double accuracy(const ParamVector& params, const Dataset& data, const ModelSpec& spec) {
  detail::check_model_inputs(params, data, spec);
  if (data.empty()) throw StructuralError("accuracy: empty evaluation set");
  std::size_t correct = 0;
  for (std::size_t r = 0; r < data.size(); ++r) {
    if (predict(params, data.row(r), spec) == data.label(r)) ++correct;
  }
  return double(correct) / double(data.size());
}

}  // namespace feddwa

#endif  // FEDDWA_MODELS_HPP
