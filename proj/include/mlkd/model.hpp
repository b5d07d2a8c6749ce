#pragma once

// Teacher/student architecture: a small convolutional backbone (conv 3x3 ->
// relu -> 2x2 average pool per stage), a label-wise embedding encoder
// (scaled dot-product cross-attention with one learned query per class,
// followed by a feed-forward layer), and an independent linear head per
// class. Teacher and student differ only in configured capacity.

#include <cmath>
#include <string>
#include <utility>
#include <vector>

#include "mlkd/common.hpp"
#include "mlkd/tensor.hpp"

namespace mlkd {

struct ModelConfig {
  int64_t height = 32;
  int64_t width = 32;
  int64_t channels = 3;
  std::vector<int64_t> widths = {32, 64, 128};  // backbone channels per stage
  int64_t embed_dim = 32;                       // d_e
  int64_t heads = 2;
  int64_t classes = 8;  // q
  std::string capacity = "teacher";  // teacher | student
  bool positional_encoding = false;
  uint64_t seed = 1;

  void validate() const {
    if (classes < 2) throw ConfigError("model: need at least 2 classes");
    if (embed_dim < 1 || heads < 1 || embed_dim % heads != 0)
      throw ConfigError("model: embed_dim must be a positive multiple of heads");
    if (widths.empty()) throw ConfigError("model: backbone needs at least one stage");
    for (int64_t w : widths)
      if (w < 1) throw ConfigError("model: backbone widths must be positive");
    int64_t div = int64_t(1) << widths.size();
    if (height % div || width % div)
      throw ConfigError("model: grid " + std::to_string(height) + "x" + std::to_string(width) +
                        " not divisible by stride " + std::to_string(div));
    if (channels < 1) throw ConfigError("model: channels must be positive");
  }

  int64_t stages() const { return static_cast<int64_t>(widths.size()); }
  int64_t feature_height() const { return height >> stages(); }
  int64_t feature_width() const { return width >> stages(); }
  int64_t spatial_positions() const { return feature_height() * feature_width(); }
  int64_t feature_channels() const { return widths.back(); }

  static ModelConfig teacher_default(int64_t q = 8, uint64_t seed = 1) {
    ModelConfig c;
    c.classes = q;
    c.seed = seed;
    return c;
  }
  static ModelConfig student_default(int64_t q = 8, uint64_t seed = 1) {
    ModelConfig c;
    c.widths = {8, 16, 32};
    c.capacity = "student";
    c.classes = q;
    c.seed = seed;
    return c;
  }
};

/// Fixed sinusoidal positional table [positions, dim].
template <typename T>
Tensor<T> sinusoidal_positions(int64_t positions, int64_t dim) {
  auto pe = Tensor<T>::zeros({positions, dim});
  for (int64_t p = 0; p < positions; ++p)
    for (int64_t i = 0; i < dim; ++i) {
      double freq = std::pow(10000.0, -2.0 * double(i / 2) / double(dim));
      double v = i % 2 == 0 ? std::sin(p * freq) : std::cos(p * freq);
      pe.value()[p * dim + i] = static_cast<T>(v);
    }
  return pe;
}

template <typename T>
class Model {
 public:
  explicit Model(ModelConfig cfg) : cfg_(std::move(cfg)) {
    cfg_.validate();
    int64_t ci = cfg_.channels;
    for (size_t s = 0; s < cfg_.widths.size(); ++s) {
      int64_t co = cfg_.widths[s];
      std::string tag = "backbone.stage" + std::to_string(s);
      add_uniform(tag + ".w", {3, 3, ci, co}, 9 * ci);
      add_zeros(tag + ".b", {co});
      ci = co;
    }
    int64_t c = cfg_.feature_channels();
    int64_t d = cfg_.embed_dim;
    add_uniform("encoder.key.w", {c, d}, c);
    add_zeros("encoder.key.b", {d});
    add_uniform("encoder.value.w", {c, d}, c);
    add_zeros("encoder.value.b", {d});
    add_gaussian("encoder.queries", {cfg_.classes, d}, T(0.02));
    add_uniform("encoder.ffn.w1", {d, 2 * d}, d);
    add_zeros("encoder.ffn.b1", {2 * d});
    add_uniform("encoder.ffn.w2", {2 * d, d}, 2 * d);
    add_zeros("encoder.ffn.b2", {d});
    add_const("encoder.norm.gamma", {d}, T(1));
    add_zeros("encoder.norm.beta", {d});
    add_uniform("head.w", {cfg_.classes, d}, d);
    add_zeros("head.b", {cfg_.classes});
    if (cfg_.positional_encoding)
      positional_ = sinusoidal_positions<T>(cfg_.spatial_positions(), d);
  }

  const ModelConfig& config() const { return cfg_; }

  std::vector<std::pair<std::string, Tensor<T>>>& params() { return params_; }
  const std::vector<std::pair<std::string, Tensor<T>>>& params() const { return params_; }

  Tensor<T>& param(const std::string& name) {
    for (auto& [n, t] : params_)
      if (n == name) return t;
    throw ConfigError("model: unknown parameter " + name);
  }

  void set_trainable(bool trainable) {
    for (auto& [n, t] : params_) t.set_requires_grad(trainable);
  }

  void zero_grads() {
    for (auto& [n, t] : params_) t.zero_grad();
  }

  int64_t parameter_count() const {
    int64_t n = 0;
    for (const auto& [name, t] : params_) n += t.numel();
    return n;
  }

  /// [b,H,W,C] -> flattened feature map [b, s, c].
  Tensor<T> backbone_forward(const Tensor<T>& x) const {
    const Shape& s = x.shape();
    if (s.size() != 4 || s[1] != cfg_.height || s[2] != cfg_.width || s[3] != cfg_.channels)
      throw ShapeError("backbone: input " + shape_str(s) + " does not match configured grid");
    Tensor<T> h = x;
    for (size_t st = 0; st < cfg_.widths.size(); ++st) {
      std::string tag = "backbone.stage" + std::to_string(st);
      h = avgpool2x2_nhwc(relu(conv3x3_nhwc(h, cparam(tag + ".w"), cparam(tag + ".b"))));
    }
    return reshape(h, {s[0], cfg_.spatial_positions(), cfg_.feature_channels()});
  }

  /// Multi-head cross attention of the per-class queries over spatial
  /// positions; returns the concatenated head outputs [b, q, d_e].
  Tensor<T> attend(const Tensor<T>& fm) const {
    const Shape& s = fm.shape();
    if (s.size() != 3 || s[2] != cfg_.feature_channels())
      throw ShapeError("encoder: feature map " + shape_str(s) + " not projectable");
    int64_t b = s[0], sp = s[1];
    int64_t d = cfg_.embed_dim, nh = cfg_.heads, dh = d / nh, q = cfg_.classes;

    Tensor<T> keys = add(matmul(fm, cparam("encoder.key.w")), cparam("encoder.key.b"));
    if (cfg_.positional_encoding) keys = add(keys, positional_);
    Tensor<T> values = add(matmul(fm, cparam("encoder.value.w")), cparam("encoder.value.b"));

    // [b,s,d] -> [b,heads,s,dh]
    auto split_heads = [&](const Tensor<T>& t) {
      return permute(reshape(t, {b, sp, nh, dh}), {0, 2, 1, 3});
    };
    Tensor<T> kh = split_heads(keys);
    Tensor<T> vh = split_heads(values);
    // queries [q,d] -> [b,heads,q,dh]
    Tensor<T> qh = broadcast_to(
        reshape(permute(reshape(cparam("encoder.queries"), {q, nh, dh}), {1, 0, 2}),
                {1, nh, q, dh}),
        {b, nh, q, dh});

    Tensor<T> scores =
        mul(matmul(qh, transpose_last2(kh)), T(1.0 / std::sqrt(static_cast<double>(dh))));
    Tensor<T> weights = softmax_lastdim(scores);   // [b,heads,q,s]
    Tensor<T> attended = matmul(weights, vh);      // [b,heads,q,dh]
    return reshape(permute(attended, {0, 2, 1, 3}), {b, q, d});
  }

  /// Label-wise embeddings: FFN over the attended values, then layer
  /// normalization so teacher and student embeddings share a common scale,
  /// [b, q, d_e].
  Tensor<T> encode_label_embeddings(const Tensor<T>& fm) const {
    Tensor<T> a = attend(fm);
    Tensor<T> hidden = relu(add(matmul(a, cparam("encoder.ffn.w1")), cparam("encoder.ffn.b1")));
    Tensor<T> e = add(matmul(hidden, cparam("encoder.ffn.w2")), cparam("encoder.ffn.b2"));
    int64_t d = cfg_.embed_dim;
    Tensor<T> mean = mul(sum_axis(e, 2, true), T(1.0 / static_cast<double>(d)));
    Tensor<T> centered = sub(e, mean);
    Tensor<T> var = mul(sum_axis(mul(centered, centered), 2, true),
                        T(1.0 / static_cast<double>(d)));
    Tensor<T> normed = div(centered, sqrt0(add(var, T(1e-5))));
    return add(mul(normed, cparam("encoder.norm.gamma")), cparam("encoder.norm.beta"));
  }

  /// Per-class linear heads; logit k sees only embedding k.
  Tensor<T> classify(const Tensor<T>& embs) const {
    const Shape& s = embs.shape();
    if (s.size() != 3 || s[1] != cfg_.classes || s[2] != cfg_.embed_dim)
      throw ShapeError("classify: embeddings " + shape_str(s) + " do not match heads");
    return add(sum_axis(mul(embs, cparam("head.w")), 2), cparam("head.b"));
  }

  struct Output {
    Tensor<T> feature_map;    // [b,s,c]
    Tensor<T> embeddings;     // [b,q,d_e]
    Tensor<T> logits;         // [b,q]
    Tensor<T> probabilities;  // sigmoid(logits)
  };

  Output forward(const Tensor<T>& x) const {
    Output out;
    out.feature_map = backbone_forward(x);
    out.embeddings = encode_label_embeddings(out.feature_map);
    out.logits = classify(out.embeddings);
    out.probabilities = sigmoid(out.logits);
    return out;
  }

 private:
  const Tensor<T>& cparam(const std::string& name) const {
    for (const auto& [n, t] : params_)
      if (n == name) return t;
    throw ConfigError("model: unknown parameter " + name);
  }

  // Per-parameter streams keyed by (seed, name): adding a parameter never
  // perturbs the initialization of existing ones.
  void add_uniform(const std::string& name, Shape shape, int64_t fan_in) {
    Rng rng(derive_seed(cfg_.seed, name));
    T bound = static_cast<T>(1.0 / std::sqrt(static_cast<double>(fan_in)));
    auto t = Tensor<T>::zeros(shape);
    for (auto& v : t.value()) v = static_cast<T>(rng.uniform(-bound, bound));
    params_.emplace_back(name, std::move(t));
  }

  void add_gaussian(const std::string& name, Shape shape, T sigma) {
    Rng rng(derive_seed(cfg_.seed, name));
    auto t = Tensor<T>::zeros(shape);
    for (auto& v : t.value()) v = static_cast<T>(rng.normal(0.0, sigma));
    params_.emplace_back(name, std::move(t));
  }

  void add_zeros(const std::string& name, Shape shape) {
    params_.emplace_back(name, Tensor<T>::zeros(std::move(shape)));
  }

  void add_const(const std::string& name, Shape shape, T v) {
    params_.emplace_back(name, Tensor<T>::full(std::move(shape), v));
  }

  ModelConfig cfg_;
  std::vector<std::pair<std::string, Tensor<T>>> params_;
  Tensor<T> positional_;
};

}  // namespace mlkd
