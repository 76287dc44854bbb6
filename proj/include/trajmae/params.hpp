#pragma once

#include <cstdint>
#include <map>
#include <string>
#include <vector>

#include "trajmae/autodiff.hpp"
#include "trajmae/rng.hpp"
#include "trajmae/tensor.hpp"

namespace trajmae {

struct ParamEntry {
  Tensor value;
  std::vector<double> m;  // Adam first moment
  std::vector<double> v;  // Adam second moment
};

using GradMap = std::map<std::string, std::vector<double>>;

/// Named model parameters plus Adam state. Iteration is in name order.
class ParamStore {
 public:
  void add(const std::string& name, Tensor value);
  bool contains(const std::string& name) const { return entries_.count(name) != 0; }
  ParamEntry& entry(const std::string& name);
  const ParamEntry& entry(const std::string& name) const;
  Tensor& value(const std::string& name) { return entry(name).value; }
  const Tensor& value(const std::string& name) const { return entry(name).value; }

  const std::map<std::string, ParamEntry>& entries() const noexcept { return entries_; }
  std::map<std::string, ParamEntry>& entries() noexcept { return entries_; }
  std::size_t total_size() const;

  std::uint64_t step_count() const noexcept { return step_count_; }
  void set_step_count(std::uint64_t s) noexcept { step_count_ = s; }

  bool operator==(const ParamStore& other) const;

 private:
  std::map<std::string, ParamEntry> entries_;
  std::uint64_t step_count_ = 0;
};

struct AdamConfig {
  double beta1 = 0.9;
  double beta2 = 0.999;
  double eps = 1e-8;
};

/// Bias-corrected Adam. Every parameter must have a gradient entry.
void adam_step(ParamStore& store, const GradMap& grads, double lr, const AdamConfig& cfg = {});

/// Binds store parameters as graph variables, once per name per graph.
class ParamBinding {
 public:
  /// With trainable = false parameters enter the graph as constants.
  ParamBinding(Graph& g, const ParamStore& store, bool trainable = true)
      : graph_(g), store_(store), trainable_(trainable) {}
  Var operator()(const std::string& name);
  Graph& graph() const { return graph_; }
  const ParamStore& store() const { return store_; }
  /// Gradients for every store entry after backward; unbound entries get zeros.
  GradMap gradients() const;

 private:
  Graph& graph_;
  const ParamStore& store_;
  bool trainable_ = true;
  std::map<std::string, Var> bound_;
};

/// Sum of gradient maps in argument order.
void accumulate(GradMap& into, const GradMap& other);

// Initializers.
Tensor init_uniform_fan_in(std::size_t fan_in, std::size_t fan_out, RngStream& rng);
Tensor init_normal(Shape shape, double stddev, RngStream& rng);

}  // namespace trajmae
