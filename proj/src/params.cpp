#include "fmc/params.hpp"

#include <cmath>

#include "fmc/rng.hpp"

namespace fmc {

std::size_t parameter_count(const ParamStore& store) {
  std::size_t n = 0;
  for (const auto& [name, t] : store) n += t.size();
  return n;
}

void fill_all(ParamStore& store, double value) {
  for (auto& [name, t] : store) t.fill(value);
}

Tensor init_tensor(const Shape& shape, Init init, std::size_t fan_in, std::uint64_t seed) {
  Tensor t(shape, 0.0);
  switch (init) {
    case Init::zeros:
      break;
    case Init::ones:
      t.fill(1.0);
      break;
    case Init::fan_in_uniform: {
      if (fan_in == 0) throw std::invalid_argument("fan_in_uniform init needs fan_in > 0");
      const double bound = 1.0 / std::sqrt(static_cast<double>(fan_in));
      SplitMix64 rng(seed);
      for (auto& v : t.data()) v = rng.uniform(-bound, bound);
      break;
    }
    case Init::ssm_a_log: {
      if (shape.size() != 2) throw ShapeError("ssm_a_log init expects [C,N]");
      for (std::size_t c = 0; c < shape[0]; ++c)
        for (std::size_t n = 0; n < shape[1]; ++n) t[c * shape[1] + n] = std::log(double(n + 1));
      break;
    }
  }
  return t;
}

ParamScope::ParamScope(Tape& tape, ParamStore& store, std::uint64_t seed)
    : tape_(&tape), store_(&store), seed_(seed), bound_(std::make_shared<std::map<std::string, Var>>()) {}

ParamScope ParamScope::sub(std::string_view name) const {
  ParamScope s = *this;
  s.prefix_ = prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
  return s;
}

Var ParamScope::get(std::string_view name, const Shape& shape, Init init, std::size_t fan_in) {
  const std::string full = prefix_.empty() ? std::string(name) : prefix_ + "." + std::string(name);
  if (auto it = bound_->find(full); it != bound_->end()) {
    if (it->second.shape() != shape) {
      throw ShapeError("parameter " + full + " requested as " + to_string(shape) + " but bound as " +
                       to_string(it->second.shape()));
    }
    return it->second;
  }
  auto it = store_->find(full);
  if (it == store_->end()) {
    it = store_->emplace(full, init_tensor(shape, init, fan_in, seed_ ^ fnv1a(full))).first;
  } else if (it->second.shape() != shape) {
    throw ShapeError("parameter " + full + " stored as " + to_string(it->second.shape()) +
                     " but the architecture needs " + to_string(shape));
  }
  Var v = tape_->parameter(it->second);
  bound_->emplace(full, v);
  return v;
}

void ParamScope::bind(const std::string& full_name, Var v) { (*bound_)[full_name] = v; }

std::map<std::string, Tensor> ParamScope::gradients() const {
  std::map<std::string, Tensor> out;
  for (const auto& [name, v] : *bound_) out.emplace(name, tape_->grad(v));
  return out;
}

}  // namespace fmc
