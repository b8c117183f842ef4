#pragma once

#include <algorithm>
#include <cmath>
#include <cstdint>
#include <fstream>
#include <map>
#include <random>
#include <stdexcept>
#include <string>
#include <type_traits>
#include <utility>
#include <vector>

#include <json.hpp>

#include "tsd/io.hpp"
#include "tsd/ops.hpp"

namespace tsd {

enum class Family { kFcn, kLstm, kLinear };

inline std::string to_string(Family f) {
  switch (f) {
    case Family::kFcn: return "FCN";
    case Family::kLstm: return "LSTM";
    case Family::kLinear: return "LINEAR";
  }
  return "?";
}

inline Family family_from_string(const std::string& s) {
  if (s == "FCN") return Family::kFcn;
  if (s == "LSTM") return Family::kLstm;
  if (s == "LINEAR") return Family::kLinear;
  throw std::invalid_argument("unknown model family '" + s + "' (expected FCN, LSTM or LINEAR)");
}

/// FCN kernel widths: the 8,5,3 pattern repeated or truncated to `blocks`.
inline std::vector<std::size_t> fcn_default_kernels(std::size_t blocks) {
  static constexpr std::size_t kPattern[3] = {8, 5, 3};
  std::vector<std::size_t> k(blocks);
  for (std::size_t i = 0; i < blocks; ++i) k[i] = kPattern[i % 3];
  return k;
}

/// Output channels of FCN block i: width, 2*width, width, repeating.
inline std::size_t fcn_block_channels(std::size_t width, std::size_t block) {
  return block % 3 == 1 ? 2 * width : width;
}

struct ModelSpec {
  Family family = Family::kFcn;
  std::size_t num_blocks = 1;   // FCN conv blocks or LSTM layers
  std::size_t width = 8;        // first conv channels or LSTM hidden size
  std::vector<std::size_t> kernel_sizes;  // FCN only
  std::size_t num_classes = 2;
  std::size_t input_length = 100;
  std::size_t input_channels = 1;

  static ModelSpec fcn(std::size_t blocks, std::size_t width, std::size_t classes, std::size_t length,
                       std::size_t channels = 1) {
    return ModelSpec{Family::kFcn, blocks, width, fcn_default_kernels(blocks), classes, length, channels};
  }
  static ModelSpec lstm(std::size_t layers, std::size_t hidden, std::size_t classes, std::size_t length,
                        std::size_t channels = 1) {
    return ModelSpec{Family::kLstm, layers, hidden, {}, classes, length, channels};
  }
  static ModelSpec linear(std::size_t classes, std::size_t length, std::size_t channels = 1) {
    return ModelSpec{Family::kLinear, 1, 1, {}, classes, length, channels};
  }

  void validate() const {
    auto fail = [](const std::string& m) { throw std::invalid_argument("invalid model spec: " + m); };
    if (num_classes < 2) fail("num_classes must be >= 2");
    if (input_length < 1) fail("input_length must be positive");
    if (input_channels < 1) fail("input_channels must be positive");
    if (family == Family::kLinear) return;
    if (num_blocks < 1) fail("num_blocks must be positive");
    if (width < 1) fail("width must be positive");
    if (family == Family::kFcn) {
      if (kernel_sizes.size() != num_blocks) fail("kernel_sizes must have num_blocks entries");
      for (std::size_t k : kernel_sizes) {
        if (k < 1) fail("kernel sizes must be positive");
        if (k > input_length) fail("input_length must be >= every kernel size");
      }
    }
  }

  bool operator==(const ModelSpec&) const = default;
};

inline void to_json(nlohmann::json& j, const ModelSpec& s) {
  j = nlohmann::json{{"family", to_string(s.family)},
                     {"num_blocks", s.num_blocks},
                     {"width", s.width},
                     {"kernel_sizes", s.kernel_sizes},
                     {"num_classes", s.num_classes},
                     {"input_length", s.input_length},
                     {"input_channels", s.input_channels}};
}

inline void from_json(const nlohmann::json& j, ModelSpec& s) {
  static const std::vector<std::string> known = {"family",      "num_blocks",   "width",
                                                 "kernel_sizes", "num_classes", "input_length",
                                                 "input_channels"};
  for (const auto& [k, v] : j.items()) {
    if (std::find(known.begin(), known.end(), k) == known.end()) {
      throw std::invalid_argument("unknown model spec key '" + k + "'");
    }
  }
  s.family = family_from_string(j.at("family").get<std::string>());
  s.num_blocks = j.value("num_blocks", std::size_t{1});
  s.width = j.value("width", std::size_t{8});
  s.num_classes = j.value("num_classes", std::size_t{2});
  s.input_length = j.value("input_length", std::size_t{100});
  s.input_channels = j.value("input_channels", std::size_t{1});
  if (j.contains("kernel_sizes") && !j.at("kernel_sizes").empty()) {
    s.kernel_sizes = j.at("kernel_sizes").get<std::vector<std::size_t>>();
  } else {
    s.kernel_sizes = s.family == Family::kFcn ? fcn_default_kernels(s.num_blocks) : std::vector<std::size_t>{};
  }
}

/// Named parameter tensors, ordered by name.
struct ModelParams {
  std::map<std::string, Tensor> tensors;

  Tensor& at(const std::string& name) { return tensors.at(name); }
  const Tensor& at(const std::string& name) const { return tensors.at(name); }

  void set_requires_grad(bool on) {
    for (auto& [_, t] : tensors) t.with_grad(on);
  }
  void zero_grad() {
    for (auto& [_, t] : tensors) t.zero_grad();
  }
  bool operator==(const ModelParams& o) const {
    if (tensors.size() != o.tensors.size()) return false;
    for (const auto& [name, t] : tensors) {
      auto it = o.tensors.find(name);
      if (it == o.tensors.end() || it->second.shape != t.shape || it->second.values != t.values) return false;
    }
    return true;
  }
};

inline std::size_t parameter_count(const ModelParams& params) {
  std::size_t n = 0;
  for (const auto& [_, t] : params.tensors) n += t.size();
  return n;
}

struct Model {
  ModelSpec spec;
  ModelParams params;
};

namespace detail {

enum class Init { kHe, kLstmUniform, kZero, kOne };

struct ParamDecl {
  std::string name;
  Shape shape;
  Init init;
  std::size_t fan_in = 1;
};

inline std::vector<ParamDecl> declare_params(const ModelSpec& spec) {
  std::vector<ParamDecl> d;
  const std::size_t n = spec.input_channels, classes = spec.num_classes;
  switch (spec.family) {
    case Family::kLinear: {
      const std::size_t in = n * spec.input_length;
      d.push_back({"head.weight", {classes, in}, Init::kHe, in});
      d.push_back({"head.bias", {classes}, Init::kZero});
      break;
    }
    case Family::kFcn: {
      std::size_t cin = n;
      for (std::size_t b = 0; b < spec.num_blocks; ++b) {
        const std::size_t cout = fcn_block_channels(spec.width, b);
        const std::size_t k = spec.kernel_sizes[b];
        const std::string p = "block" + std::to_string(b);
        d.push_back({p + ".conv.weight", {cout, cin, k}, Init::kHe, cin * k});
        d.push_back({p + ".scale", {cout}, Init::kOne});
        d.push_back({p + ".shift", {cout}, Init::kZero});
        cin = cout;
      }
      d.push_back({"head.weight", {classes, cin}, Init::kHe, cin});
      d.push_back({"head.bias", {classes}, Init::kZero});
      break;
    }
    case Family::kLstm: {
      const std::size_t h = spec.width;
      std::size_t in = n;
      for (std::size_t l = 0; l < spec.num_blocks; ++l) {
        const std::string p = "lstm" + std::to_string(l);
        d.push_back({p + ".w_ih", {4 * h, in}, Init::kLstmUniform, h});
        d.push_back({p + ".w_hh", {4 * h, h}, Init::kLstmUniform, h});
        d.push_back({p + ".b_ih", {4 * h}, Init::kLstmUniform, h});
        d.push_back({p + ".b_hh", {4 * h}, Init::kLstmUniform, h});
        in = h;
      }
      d.push_back({"head.weight", {classes, h}, Init::kHe, h});
      d.push_back({"head.bias", {classes}, Init::kZero});
      break;
    }
  }
  return d;
}

inline Var bind(Tape& t, Tensor& p) { return t.leaf(p); }
inline Var bind(Tape& t, const Tensor& p) { return t.constant(p); }

}  // namespace detail

/// Deterministic initialization: He-normal for conv/linear weights,
/// U(-1/sqrt(h), 1/sqrt(h)) for LSTM weights and biases, zero biases,
/// unit scales.
inline ModelParams build_model(const ModelSpec& spec, std::uint64_t seed) {
  spec.validate();
  std::mt19937_64 rng(seed);
  ModelParams params;
  for (const auto& decl : detail::declare_params(spec)) {
    Tensor t(decl.shape);
    switch (decl.init) {
      case detail::Init::kHe: {
        std::normal_distribution<double> dist(0.0, std::sqrt(2.0 / static_cast<double>(decl.fan_in)));
        for (double& v : t.values) v = dist(rng);
        break;
      }
      case detail::Init::kLstmUniform: {
        const double r = 1.0 / std::sqrt(static_cast<double>(decl.fan_in));
        std::uniform_real_distribution<double> dist(-r, r);
        for (double& v : t.values) v = dist(rng);
        break;
      }
      case detail::Init::kZero: break;
      case detail::Init::kOne: std::fill(t.values.begin(), t.values.end(), 1.0); break;
    }
    params.tensors.emplace(decl.name, std::move(t));
  }
  return params;
}

inline Model make_model(const ModelSpec& spec, std::uint64_t seed) { return Model{spec, build_model(spec, seed)}; }

/// Logits [B,C] for a batch [B,n,T]. With a mutable Model, parameters that
/// require grad are bound as differentiable leaves; a const Model is frozen.
template <class ModelT>
  requires std::is_same_v<std::remove_const_t<ModelT>, Model>
Var forward(Tape& tape, ModelT& model, const Var& batch) {
  const ModelSpec& spec = model.spec;
  auto& p = model.params.tensors;
  const Shape s = batch.shape();
  if (s.size() != 3) throw DimensionError("forward: batch must be [batch,channels,length], got " + shape_str(s), -1);
  if (s[1] != spec.input_channels) {
    throw DimensionError("forward: expected " + std::to_string(spec.input_channels) + " channels, got " +
                             std::to_string(s[1]),
                         1);
  }
  if (s[2] != spec.input_length) {
    throw DimensionError("forward: expected length " + std::to_string(spec.input_length) + ", got " +
                             std::to_string(s[2]),
                         2);
  }
  auto P = [&](const std::string& name) { return detail::bind(tape, p.at(name)); };
  const std::size_t rows = s[0];

  switch (spec.family) {
    case Family::kLinear: {
      Var flat = reshape(batch, Shape{rows, s[1] * s[2]});
      return linear(flat, P("head.weight"), P("head.bias"));
    }
    case Family::kFcn: {
      Var h = batch;
      for (std::size_t b = 0; b < spec.num_blocks; ++b) {
        const std::string pre = "block" + std::to_string(b);
        const std::size_t k = spec.kernel_sizes[b];
        h = conv1d(h, P(pre + ".conv.weight"), 1, (k - 1) / 2);
        h = relu(channel_affine(h, P(pre + ".scale"), P(pre + ".shift")));
      }
      return linear(global_avg_pool(h), P("head.weight"), P("head.bias"));
    }
    case Family::kLstm: {
      const std::size_t hid = spec.width;
      std::vector<Var> seq;
      seq.reserve(spec.input_length);
      for (std::size_t t = 0; t < spec.input_length; ++t) seq.push_back(time_step(batch, t));
      Var h_last;
      for (std::size_t l = 0; l < spec.num_blocks; ++l) {
        const std::string pre = "lstm" + std::to_string(l);
        Var w_ih = P(pre + ".w_ih"), w_hh = P(pre + ".w_hh"), b_ih = P(pre + ".b_ih"), b_hh = P(pre + ".b_hh");
        Var h = tape.constant(Tensor(Shape{rows, hid}));
        Var c = tape.constant(Tensor(Shape{rows, hid}));
        for (std::size_t t = 0; t < seq.size(); ++t) {
          Var gates = add(linear(seq[t], w_ih, b_ih), linear(h, w_hh, b_hh));
          Var in_gate = sigmoid(slice_cols(gates, 0, hid));
          Var forget = sigmoid(slice_cols(gates, hid, hid));
          Var cand = tanh(slice_cols(gates, 2 * hid, hid));
          Var out_gate = sigmoid(slice_cols(gates, 3 * hid, hid));
          c = add(mul(forget, c), mul(in_gate, cand));
          h = mul(out_gate, tanh(c));
          seq[t] = h;
        }
        h_last = h;
      }
      return linear(h_last, P("head.weight"), P("head.bias"));
    }
  }
  throw std::logic_error("unreachable model family");
}

/// Forward pass without gradients; returns logits row-major [rows, C].
inline std::vector<double> predict_logits(const Model& model, const std::vector<double>& flat_batch,
                                          std::size_t rows) {
  Tape tape;
  Var x = tape.constant(Shape{rows, model.spec.input_channels, model.spec.input_length}, flat_batch);
  Var y = forward(tape, model, x);
  return {y.values().begin(), y.values().end()};
}

// ---------------------------------------------------------------------------
// Checkpoints: JSON container with the spec and every tensor.

inline nlohmann::json checkpoint_json(const Model& model) {
  nlohmann::json params = nlohmann::json::object();
  for (const auto& [name, t] : model.params.tensors) {
    params[name] = {{"shape", t.shape}, {"values", t.values}};
  }
  return {{"format", "tsd-checkpoint"}, {"version", 1}, {"spec", model.spec}, {"params", params}};
}

inline Model model_from_checkpoint_json(const nlohmann::json& j) {
  if (j.value("format", std::string{}) != "tsd-checkpoint") throw std::runtime_error("not a tsd checkpoint");
  Model m;
  m.spec = j.at("spec").get<ModelSpec>();
  m.spec.validate();
  const auto expected = detail::declare_params(m.spec);
  for (const auto& decl : expected) {
    const auto& e = j.at("params").at(decl.name);
    Tensor t(e.at("shape").get<Shape>(), e.at("values").get<std::vector<double>>());
    if (t.shape != decl.shape) throw std::runtime_error("checkpoint tensor '" + decl.name + "' has wrong shape");
    m.params.tensors.emplace(decl.name, std::move(t));
  }
  if (j.at("params").size() != expected.size()) throw std::runtime_error("checkpoint has unexpected tensors");
  return m;
}

inline void save_checkpoint(const Model& model, const std::string& path) {
  write_file_atomic(path, checkpoint_json(model).dump() + '\n');
}

inline Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot read checkpoint " + path);
  return model_from_checkpoint_json(nlohmann::json::parse(in));
}

}  // namespace tsd
