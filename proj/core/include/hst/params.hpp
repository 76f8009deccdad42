#pragma once

#include <string>
#include <vector>

#include "hst/tensor.hpp"

namespace hst {

/// Named trainable tensor. The gradient buffer lives inside the tensor and
/// always matches its shape.
struct Parameter {
  Tensor value;
  std::string name;
};

/// Registration-ordered set of parameters; the order is the serialization and
/// optimizer-state order, so construction must be deterministic.
class ParameterStore {
 public:
  Tensor add(const std::string& name, Tensor init);
  const Tensor& get(const std::string& name) const;
  bool contains(const std::string& name) const;

  std::vector<Parameter>& all() { return params_; }
  const std::vector<Parameter>& all() const { return params_; }
  size_t count() const { return params_.size(); }
  int64_t total_size() const;
  void zero_grads();

 private:
  std::vector<Parameter> params_;
};

struct AdamConfig {
  double learning_rate = 1e-3;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double epsilon = 1e-8;
};

/// Single bias-corrected Adam update of one flat parameter buffer.
void adam_step(std::vector<double>& value, const std::vector<double>& grad,
               std::vector<double>& first_moment, std::vector<double>& second_moment,
               int64_t step, const AdamConfig& cfg);

class AdamOptimizer {
 public:
  explicit AdamOptimizer(AdamConfig cfg = {}) : cfg_(cfg) {}

  /// Applies one update from the accumulated gradients, then increments the
  /// step counter. Moment buffers are lazily matched to the store layout.
  void step(ParameterStore& params);
  int64_t step_count() const { return step_; }
  AdamConfig& config() { return cfg_; }

 private:
  AdamConfig cfg_;
  int64_t step_ = 0;
  std::vector<std::vector<double>> first_;
  std::vector<std::vector<double>> second_;
};

/// Scales all gradients so their global l2 norm is at most max_norm.
/// Returns the norm before clipping.
double clip_grad_norm(ParameterStore& params, double max_norm);

/// Text checkpoint container, magic header "HSTCKPT1". Round-trips doubles
/// exactly. See docs/formats.md.
void save_checkpoint(const ParameterStore& params, const std::string& path);
/// Loads into an existing store; every name and shape must match.
void load_checkpoint(ParameterStore& params, const std::string& path);

}  // namespace hst
