#include "hst/params.hpp"

#include <cinttypes>
#include <cmath>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <sstream>

namespace hst {

Tensor ParameterStore::add(const std::string& name, Tensor init) {
  if (contains(name)) throw Error("duplicate parameter name: " + name);
  init.set_requires_grad(true);
  params_.push_back(Parameter{init, name});
  return init;
}

const Tensor& ParameterStore::get(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return p.value;
  }
  throw Error("unknown parameter: " + name);
}

bool ParameterStore::contains(const std::string& name) const {
  for (const auto& p : params_) {
    if (p.name == name) return true;
  }
  return false;
}

int64_t ParameterStore::total_size() const {
  int64_t n = 0;
  for (const auto& p : params_) n += p.value.size();
  return n;
}

void ParameterStore::zero_grads() {
  for (auto& p : params_) p.value.zero_grad();
}

void adam_step(std::vector<double>& value, const std::vector<double>& grad,
               std::vector<double>& first_moment, std::vector<double>& second_moment,
               int64_t step, const AdamConfig& cfg) {
  if (grad.size() != value.size() || first_moment.size() != value.size() ||
      second_moment.size() != value.size()) {
    throw Error("adam_step: buffer size mismatch");
  }
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(step));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(step));
  for (size_t i = 0; i < value.size(); ++i) {
    first_moment[i] = cfg.beta1 * first_moment[i] + (1.0 - cfg.beta1) * grad[i];
    second_moment[i] = cfg.beta2 * second_moment[i] + (1.0 - cfg.beta2) * grad[i] * grad[i];
    const double mhat = first_moment[i] / bc1;
    const double vhat = second_moment[i] / bc2;
    value[i] -= cfg.learning_rate * mhat / (std::sqrt(vhat) + cfg.epsilon);
  }
}

void AdamOptimizer::step(ParameterStore& params) {
  if (first_.size() != params.count()) {
    first_.resize(params.count());
    second_.resize(params.count());
    for (size_t i = 0; i < params.count(); ++i) {
      first_[i].assign(params.all()[i].value.size(), 0.0);
      second_[i].assign(params.all()[i].value.size(), 0.0);
    }
  }
  ++step_;
  for (size_t i = 0; i < params.count(); ++i) {
    auto& p = params.all()[i].value;
    adam_step(p.mutable_values(), p.grad(), first_[i], second_[i], step_, cfg_);
  }
}

double clip_grad_norm(ParameterStore& params, double max_norm) {
  double sq = 0.0;
  for (auto& p : params.all()) {
    for (double g : p.value.grad()) sq += g * g;
  }
  const double norm = std::sqrt(sq);
  if (max_norm > 0.0 && norm > max_norm) {
    const double scale = max_norm / norm;
    for (auto& p : params.all()) {
      for (double& g : p.value.mutable_grad()) g *= scale;
    }
  }
  return norm;
}

static constexpr const char* kCheckpointMagic = "HSTCKPT1";

void save_checkpoint(const ParameterStore& params, const std::string& path) {
  namespace fs = std::filesystem;
  const fs::path target(path);
  if (target.has_parent_path()) fs::create_directories(target.parent_path());
  const fs::path tmp = target.string() + ".tmp";
  {
    std::ofstream out(tmp);
    if (!out) throw Error("cannot open checkpoint file for writing: " + tmp.string());
    out << kCheckpointMagic << "\n" << params.count() << "\n";
    char buf[40];
    for (const auto& p : params.all()) {
      out << p.name << " " << p.value.rank();
      for (int d : p.value.shape()) out << " " << d;
      out << "\n";
      const auto& v = p.value.values();
      for (size_t i = 0; i < v.size(); ++i) {
        std::snprintf(buf, sizeof(buf), "%.17g", v[i]);
        if (i) out << ' ';
        out << buf;
      }
      out << "\n";
    }
    if (!out) throw Error("write failure on checkpoint file: " + tmp.string());
  }
  fs::rename(tmp, target);
}

void load_checkpoint(ParameterStore& params, const std::string& path) {
  std::ifstream in(path);
  if (!in) throw Error("cannot open checkpoint file: " + path);
  std::string magic;
  in >> magic;
  if (magic != kCheckpointMagic) {
    throw Error("bad checkpoint magic '" + magic + "' in " + path + " (expected " +
                kCheckpointMagic + ")");
  }
  size_t count = 0;
  in >> count;
  if (count != params.count()) {
    throw Error("checkpoint has " + std::to_string(count) + " parameters, model expects " +
                std::to_string(params.count()));
  }
  for (auto& p : params.all()) {
    std::string name;
    int rank = 0;
    in >> name >> rank;
    if (!in) throw Error("truncated checkpoint: " + path);
    if (name != p.name) {
      throw Error("checkpoint parameter '" + name + "' does not match expected '" + p.name + "'");
    }
    std::vector<int> shape(rank);
    for (auto& d : shape) in >> d;
    if (shape != p.value.shape()) {
      throw Error("checkpoint shape " + shape_str(shape) + " for '" + name +
                  "' does not match model shape " + shape_str(p.value.shape()));
    }
    auto& v = p.value.mutable_values();
    for (auto& x : v) {
      in >> x;
      if (!in) throw Error("truncated checkpoint values for '" + name + "'");
    }
  }
}

}  // namespace hst
