#include "pragmatix/diff/optim.hpp"

#include <algorithm>
#include <bit>
#include <cmath>
#include <cstring>
#include <numbers>

#include "pragmatix/core.hpp"

namespace pragmatix::diff {

void OptimizerConfig::validate() const {
  if (!(learning_rate > 0.0)) throw ConfigError("learning_rate must be > 0");
  if (!(clip_norm > 0.0)) throw ConfigError("clip_norm must be > 0");
  if (weight_decay < 0.0) throw ConfigError("weight_decay must be >= 0");
  if (!(beta1 >= 0.0 && beta1 < 1.0 && beta2 >= 0.0 && beta2 < 1.0))
    throw ConfigError("betas must lie in [0, 1)");
  if (!(epsilon > 0.0)) throw ConfigError("epsilon must be > 0");
  if (lr_min < 0.0 || lr_min > learning_rate)
    throw ConfigError("lr_min must lie in [0, learning_rate]");
}

double global_norm(const Gradients& grads) {
  double sq = 0.0;
  for (const Matrix& g : grads) sq += g.squaredNorm();
  return std::sqrt(sq);
}

double clip_global_norm(Gradients& grads, double max_norm) {
  const double norm = global_norm(grads);
  if (norm > max_norm) {
    const double s = max_norm / norm;
    for (Matrix& g : grads) g *= s;
  }
  return norm;
}

double cosine_lr(std::int64_t step, std::int64_t total, double lr_max, double lr_min) {
  if (total <= 0) return lr_max;
  const double frac =
      std::clamp(static_cast<double>(step) / static_cast<double>(total), 0.0, 1.0);
  return lr_min + 0.5 * (lr_max - lr_min) * (1.0 + std::cos(std::numbers::pi * frac));
}

AdamW::AdamW(const ParameterSet& params, OptimizerConfig config)
    : config_(config), m_(zeros_like(params)), v_(zeros_like(params)) {
  config_.validate();
}

void AdamW::step(ParameterSet& params, const Gradients& grads, double lr) {
  if (grads.size() != params.size()) throw ShapeMismatch("gradient count != parameter count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (grads[i].rows() != params.value(i).rows() || grads[i].cols() != params.value(i).cols())
      throw ShapeMismatch("gradient shape for " + params.name(i));
  }
  ++t_;
  const double b1 = config_.beta1, b2 = config_.beta2;
  const double c1 = 1.0 - std::pow(b1, static_cast<double>(t_));
  const double c2 = 1.0 - std::pow(b2, static_cast<double>(t_));
  for (std::size_t i = 0; i < params.size(); ++i) {
    Matrix& p = params.value(i);
    p *= (1.0 - lr * config_.weight_decay);
    m_[i] = b1 * m_[i] + (1.0 - b1) * grads[i];
    v_[i] = b2 * v_[i] + (1.0 - b2) * grads[i].cwiseProduct(grads[i]);
    p.array() -= lr * (m_[i].array() / c1) / ((v_[i].array() / c2).sqrt() + config_.epsilon);
  }
  ++params.step;
}

namespace {

static_assert(std::endian::native == std::endian::little,
              "checkpoint format is little-endian float64");

}  // namespace

void save_parameters(const ParameterSet& params, const std::filesystem::path& dir,
                     const std::string& stem) {
  std::string blob;
  json tensors = json::array();
  std::size_t offset = 0;
  for (std::size_t i = 0; i < params.size(); ++i) {
    const Matrix& v = params.value(i);
    const std::size_t bytes = static_cast<std::size_t>(v.size()) * sizeof(double);
    blob.append(reinterpret_cast<const char*>(v.data()), bytes);
    tensors.push_back({{"name", params.name(i)},
                       {"shape", {v.rows(), v.cols()}},
                       {"offset", offset}});
    offset += bytes;
  }
  json manifest = {{"format", "pragmatix-params-v1"},
                   {"dtype", "float64"},
                   {"step", params.step},
                   {"bytes", offset},
                   {"tensors", tensors}};
  write_file_atomic(dir / (stem + ".bin"), blob);
  write_file_atomic(dir / (stem + ".json"), manifest.dump(2) + "\n");
}

ParameterSet load_parameters(const std::filesystem::path& dir, const std::string& stem) {
  json manifest;
  try {
    manifest = json::parse(read_file(dir / (stem + ".json")));
  } catch (const json::parse_error& e) {
    throw ParseError(e.what());
  }
  if (manifest.value("dtype", "") != "float64") throw SchemaMismatch("checkpoint dtype");
  const std::string blob = read_file(dir / (stem + ".bin"));
  if (blob.size() != manifest.at("bytes").get<std::size_t>())
    throw SchemaMismatch("checkpoint blob size does not match manifest");
  ParameterSet params;
  for (const json& t : manifest.at("tensors")) {
    const auto shape = t.at("shape").get<std::vector<Eigen::Index>>();
    const auto offset = t.at("offset").get<std::size_t>();
    Matrix v(shape.at(0), shape.at(1));
    const std::size_t bytes = static_cast<std::size_t>(v.size()) * sizeof(double);
    if (offset + bytes > blob.size()) throw SchemaMismatch("tensor exceeds checkpoint blob");
    std::memcpy(v.data(), blob.data() + offset, bytes);
    params.add(t.at("name").get<std::string>(), std::move(v));
  }
  params.step = manifest.at("step").get<std::int64_t>();
  return params;
}

void load_parameters_into(ParameterSet& params, const std::filesystem::path& dir,
                          const std::string& stem) {
  ParameterSet loaded = load_parameters(dir, stem);
  if (loaded.size() != params.size()) throw SchemaMismatch("checkpoint tensor count");
  for (std::size_t i = 0; i < params.size(); ++i) {
    if (loaded.name(i) != params.name(i) ||
        loaded.value(i).rows() != params.value(i).rows() ||
        loaded.value(i).cols() != params.value(i).cols())
      throw SchemaMismatch("checkpoint tensor '" + loaded.name(i) + "' does not match model");
  }
  params = std::move(loaded);
}

}  // namespace pragmatix::diff
