#include "trajmae/params.hpp"

#include <cmath>
#include <stdexcept>

namespace trajmae {

void ParamStore::add(const std::string& name, Tensor value) {
  if (entries_.count(name) != 0) throw std::invalid_argument("ParamStore: duplicate parameter '" + name + "'");
  const std::size_t n = value.size();
  entries_.emplace(name, ParamEntry{std::move(value), std::vector<double>(n, 0.0), std::vector<double>(n, 0.0)});
}

ParamEntry& ParamStore::entry(const std::string& name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

const ParamEntry& ParamStore::entry(const std::string& name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("ParamStore: unknown parameter '" + name + "'");
  return it->second;
}

std::size_t ParamStore::total_size() const {
  std::size_t n = 0;
  for (const auto& [_, e] : entries_) n += e.value.size();
  return n;
}

bool ParamStore::operator==(const ParamStore& other) const {
  if (step_count_ != other.step_count_ || entries_.size() != other.entries_.size()) return false;
  auto it = other.entries_.begin();
  for (const auto& [name, e] : entries_) {
    if (name != it->first) return false;
    const ParamEntry& o = it->second;
    if (e.value.shape() != o.value.shape() || e.value.storage() != o.value.storage() || e.m != o.m || e.v != o.v) {
      return false;
    }
    ++it;
  }
  return true;
}

void adam_step(ParamStore& store, const GradMap& grads, double lr, const AdamConfig& cfg) {
  for (const auto& [name, _] : store.entries()) {
    auto it = grads.find(name);
    if (it == grads.end()) throw std::invalid_argument("adam_step: missing gradient for '" + name + "'");
    if (it->second.size() != store.entry(name).value.size()) {
      throw std::invalid_argument("adam_step: gradient size mismatch for '" + name + "'");
    }
  }
  const std::uint64_t t = store.step_count() + 1;
  const double bc1 = 1.0 - std::pow(cfg.beta1, static_cast<double>(t));
  const double bc2 = 1.0 - std::pow(cfg.beta2, static_cast<double>(t));
  for (auto& [name, e] : store.entries()) {
    const std::vector<double>& g = grads.at(name);
    auto& w = e.value.storage();
    for (std::size_t i = 0; i < w.size(); ++i) {
      e.m[i] = cfg.beta1 * e.m[i] + (1.0 - cfg.beta1) * g[i];
      e.v[i] = cfg.beta2 * e.v[i] + (1.0 - cfg.beta2) * g[i] * g[i];
      const double mhat = e.m[i] / bc1;
      const double vhat = e.v[i] / bc2;
      w[i] -= lr * mhat / (std::sqrt(vhat) + cfg.eps);
    }
  }
  store.set_step_count(t);
}

Var ParamBinding::operator()(const std::string& name) {
  auto it = bound_.find(name);
  if (it != bound_.end()) return it->second;
  Var v = trainable_ ? graph_.variable(store_.value(name)) : graph_.constant(store_.value(name));
  bound_.emplace(name, v);
  return v;
}

GradMap ParamBinding::gradients() const {
  GradMap out;
  for (const auto& [name, e] : store_.entries()) {
    auto it = bound_.find(name);
    out[name] = it == bound_.end() ? std::vector<double>(e.value.size(), 0.0) : graph_.grad(it->second);
  }
  return out;
}

void accumulate(GradMap& into, const GradMap& other) {
  for (const auto& [name, g] : other) {
    auto& dst = into[name];
    if (dst.empty()) {
      dst = g;
      continue;
    }
    if (dst.size() != g.size()) throw std::invalid_argument("accumulate: size mismatch for '" + name + "'");
    for (std::size_t i = 0; i < g.size(); ++i) dst[i] += g[i];
  }
}

Tensor init_uniform_fan_in(std::size_t fan_in, std::size_t fan_out, RngStream& rng) {
  Tensor t(Shape{fan_in, fan_out});
  const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
  for (double& x : t.storage()) x = rng.uniform(-bound, bound);
  return t;
}

Tensor init_normal(Shape shape, double stddev, RngStream& rng) {
  Tensor t(std::move(shape));
  for (double& x : t.storage()) x = stddev * rng.normal();
  return t;
}

}  // namespace trajmae
