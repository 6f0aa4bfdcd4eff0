// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <algorithm>
#include <cstdint>
#include <map>
#include <memory>
#include <set>
#include <span>
#include <string>
#include <vector>

#include "json.hpp"

#include "platemark/dataset.hpp"
#include "platemark/layers.hpp"
#include "platemark/plates.hpp"

namespace platemark {

enum class Extractor { RNN, LSTM, ResCNN };

/// What the 32-output auxiliary head is trained on.
enum class AuxTargets {
  Features,         // 22 logistic flags + 10 linear digit counts
  DuplicatedPrice,  // 32 linear copies of the (standardized) log price
};

inline std::string to_string(Extractor e) {
  switch (e) {
    case Extractor::RNN: return "RNN";
    case Extractor::LSTM: return "LSTM";
    case Extractor::ResCNN: return "ResCNN";
  }
  return "?";
}

inline Extractor extractor_from_string(const std::string& s) {
  if (s == "RNN") return Extractor::RNN;
  if (s == "LSTM") return Extractor::LSTM;
  if (s == "ResCNN" || s == "CNN") return Extractor::ResCNN;
  throw ConfigError("unknown extractor '" + s + "'");
}

struct ModelConfig {
  Extractor extractor = Extractor::ResCNN;
  std::size_t embedding_dim = 8;  // 0 selects one-hot encoding
  std::size_t layers = 6;
  std::size_t width = 128;
  double dropout = 0.15;
  std::vector<std::size_t> price_head{256};
  std::vector<std::size_t> aux_head{256};
  /// ResCNN only: 1-based indices of stride-2 layers. Empty means the last layer.
  std::vector<std::size_t> downsample_layers;
  bool residual = true;
  AuxTargets aux_targets = AuxTargets::Features;
  std::uint64_t seed = 0;

  bool one_hot() const { return embedding_dim == 0; }

  std::vector<std::size_t> effective_downsample() const {
    if (extractor != Extractor::ResCNN) return {};
    if (downsample_layers.empty()) return {layers};
    return downsample_layers;
  }

  /// Feature-vector width implied by the configuration.
  std::size_t feature_dim() const {
    switch (extractor) {
      case Extractor::RNN: return width;
      case Extractor::LSTM: return 2 * width;
      case Extractor::ResCNN: return width << effective_downsample().size();
    }
    return 0;
  }

  /// Throws ConfigError when out of range. `search_ranges` applies the
  /// hyperparameter ranges of the architecture searches; without it only
  /// structural validity is checked.
  void validate(bool search_ranges = true) const {
    auto need = [](bool ok, const std::string& msg) {
      if (!ok) throw ConfigError(msg);
    };
    need(layers >= 1 && width >= 1, "layers and width must be positive");
    need(dropout >= 0.0 && dropout < 1.0, "dropout must be in [0,1)");
    for (auto w : price_head) need(w > 0, "price head widths must be positive");
    for (auto w : aux_head) need(w > 0, "aux head widths must be positive");
    if (extractor == Extractor::RNN) need(width % 2 == 0, "RNN width must be even (split across directions)");
    if (extractor == Extractor::ResCNN) {
      std::set<std::size_t> seen;
      for (auto l : effective_downsample()) {
        need(l >= 1 && l <= layers, "downsample layer index out of range");
        need(seen.insert(l).second, "duplicate downsample layer");
      }
      need(seen.size() <= 3, "at most three stride-2 layers fit a length-6 plate");
    }
    if (!search_ranges) return;
    need(one_hot() || (embedding_dim >= 8 && embedding_dim <= 24), "embedding dimension must be 8-24 or one-hot");
    switch (extractor) {
      case Extractor::RNN:
        need(layers <= 7 && width >= 128 && width <= 1024, "RNN: layers 1-7, width 128-1024");
        break;
      case Extractor::LSTM:
        need(layers <= 5 && width >= 128 && width <= 1600, "LSTM: layers 1-5, width 128-1600");
        break;
      case Extractor::ResCNN:
        need(layers <= 7 && width >= 64 && width <= 1024, "ResCNN: layers 1-7, width 64-1024");
        break;
    }
  }
};

inline nlohmann::json to_json(const ModelConfig& c) {
  return {{"extractor", to_string(c.extractor)},
          {"embedding_dim", c.embedding_dim},
          {"layers", c.layers},
          {"width", c.width},
          {"dropout", c.dropout},
          {"price_head", c.price_head},
          {"aux_head", c.aux_head},
          {"downsample_layers", c.downsample_layers},
          {"residual", c.residual},
          {"aux_targets", c.aux_targets == AuxTargets::Features ? "features" : "duplicated_price"},
          {"seed", c.seed}};
}

inline ModelConfig model_config_from_json(const nlohmann::json& j) {
  ModelConfig c;
  try {
    if (j.contains("extractor")) c.extractor = extractor_from_string(j.at("extractor").get<std::string>());
    if (j.contains("embedding_dim")) c.embedding_dim = j.at("embedding_dim").get<std::size_t>();
    if (j.contains("layers")) c.layers = j.at("layers").get<std::size_t>();
    if (j.contains("width")) c.width = j.at("width").get<std::size_t>();
    if (j.contains("dropout")) c.dropout = j.at("dropout").get<double>();
    if (j.contains("price_head")) c.price_head = j.at("price_head").get<std::vector<std::size_t>>();
    if (j.contains("aux_head")) c.aux_head = j.at("aux_head").get<std::vector<std::size_t>>();
    if (j.contains("downsample_layers"))
      c.downsample_layers = j.at("downsample_layers").get<std::vector<std::size_t>>();
    if (j.contains("residual")) c.residual = j.at("residual").get<bool>();
    if (j.contains("aux_targets")) {
      auto s = j.at("aux_targets").get<std::string>();
      if (s == "features") c.aux_targets = AuxTargets::Features;
      else if (s == "duplicated_price") c.aux_targets = AuxTargets::DuplicatedPrice;
      else throw ConfigError("unknown aux_targets '" + s + "'");
    }
    if (j.contains("seed")) c.seed = j.at("seed").get<std::uint64_t>();
  } catch (const nlohmann::json::exception& e) {
    throw ConfigError(std::string("model config: ") + e.what());
  }
  return c;
}

/// Model inputs for a batch: tokens [B, 6] and standardized aux inputs [B, 7].
struct Batch {
  Tensor tokens;
  Tensor aux_in;

  std::size_t size() const { return tokens.empty() ? 0 : tokens.dim(0); }
};

inline Batch make_batch(std::span<const Example* const> examples) {
  const std::size_t n = examples.size();
  Batch b{Tensor({n, kPlateLength}), Tensor({n, kAuxInputs})};
  for (std::size_t i = 0; i < n; ++i) {
    for (std::size_t t = 0; t < kPlateLength; ++t) b.tokens[i * kPlateLength + t] = examples[i]->encoded[t];
    for (std::size_t c = 0; c < kAuxInputs; ++c) b.aux_in[i * kAuxInputs + c] = examples[i]->aux_in[c];
  }
  return b;
}

inline Batch make_batch(std::span<const Plate> plates, const AuxInput& aux_in) {
  const std::size_t n = plates.size();
  Batch b{Tensor({n, kPlateLength}), Tensor({n, kAuxInputs})};
  for (std::size_t i = 0; i < n; ++i) {
    EncodedPlate e = encode_plate(plates[i]);
    for (std::size_t t = 0; t < kPlateLength; ++t) b.tokens[i * kPlateLength + t] = e[t];
    for (std::size_t c = 0; c < kAuxInputs; ++c) b.aux_in[i * kAuxInputs + c] = aux_in[c];
  }
  return b;
}

struct ForwardOutput {
  Tensor predicted_log_price;  // [B]
  Tensor aux_predictions;      // [B, 32]
  Tensor feature_vector;       // [B, F]
};

/// Copy of every parameter and buffer value, in model order.
struct ModelState {
  std::vector<Tensor> values;
};

/// The price engine: token front end, feature-extraction unit, price head on
/// features plus auxiliary inputs, and auxiliary head on features alone.
class Model {
 public:
  explicit Model(ModelConfig cfg, bool search_ranges = true) : cfg_(std::move(cfg)) {
    cfg_.validate(search_ranges);
    Initializer init(cfg_.seed);
    std::uint64_t salt = 1;

    std::size_t channels;
    if (cfg_.one_hot()) {
      front_.emplace<OneHot>(kVocabSize);
      channels = kVocabSize;
    } else {
      front_.emplace<Embedding>("embedding", kVocabSize, cfg_.embedding_dim, init);
      channels = cfg_.embedding_dim;
    }

    switch (cfg_.extractor) {
      case Extractor::ResCNN: build_cnn(channels, init, salt); break;
      case Extractor::RNN: build_recurrent<RNNCell>("rnn", cfg_.width / 2, channels, init, salt); break;
      case Extractor::LSTM: build_recurrent<LSTMCell>("lstm", cfg_.width, channels, init, salt); break;
    }
    feature_dim_ = cfg_.feature_dim();
    Shape fs = extractor_.output_shape(front_.output_shape({kPlateLength}));
    if (fs != Shape{feature_dim_}) throw ShapeError("extractor output " + shape_str(fs) + " != feature dim");

    std::size_t in = feature_dim_ + kAuxInputs;
    for (std::size_t i = 0; i < cfg_.price_head.size(); ++i) {
      price_head_.emplace<Dense>("price/dense" + std::to_string(i + 1), in, cfg_.price_head[i], true, init);
      price_head_.emplace<Activation>(ActivationKind::ELU);
      in = cfg_.price_head[i];
    }
    price_head_.emplace<Dense>("price/output", in, 1, true, init);

    in = feature_dim_;
    for (std::size_t i = 0; i < cfg_.aux_head.size(); ++i) {
      aux_head_.emplace<Dense>("aux/dense" + std::to_string(i + 1), in, cfg_.aux_head[i], true, init);
      aux_head_.emplace<Activation>(ActivationKind::ELU);
      in = cfg_.aux_head[i];
    }
    aux_head_.emplace<Dense>("aux/output", in, kNumAuxFeatures, true, init);
    if (cfg_.aux_targets == AuxTargets::Features) aux_head_.emplace<PartialLogistic>(kNumBinaryFeatures);

    price_shift_ = Buffer{"price/shift", Tensor({1}, 0.0)};
    price_scale_ = Buffer{"price/scale", Tensor({1}, 1.0)};

    std::set<std::string> names;
    for (const auto& n : state_names())
      if (!names.insert(n).second) throw Error("duplicate tensor name " + n);
  }

  Model(const Model&) = delete;
  Model& operator=(const Model&) = delete;

  const ModelConfig& config() const { return cfg_; }
  std::size_t feature_dim() const { return feature_dim_; }

  ForwardOutput forward(const Batch& batch, const ForwardContext& ctx) {
    const std::size_t n = batch.size();
    if (batch.tokens.shape() != Shape{n, kPlateLength} || batch.aux_in.shape() != Shape{n, kAuxInputs})
      throw ShapeError("model input must be tokens [B,6] and aux_in [B,7]");
    ForwardOutput out;
    out.feature_vector = extractor_.forward(front_.forward(batch.tokens, ctx), ctx);
    Tensor joined({n, feature_dim_ + kAuxInputs});
    for (std::size_t i = 0; i < n; ++i) {
      std::copy_n(out.feature_vector.data() + i * feature_dim_, feature_dim_,
                  joined.data() + i * (feature_dim_ + kAuxInputs));
      std::copy_n(batch.aux_in.data() + i * kAuxInputs, kAuxInputs,
                  joined.data() + i * (feature_dim_ + kAuxInputs) + feature_dim_);
    }
    Tensor raw = price_head_.forward(joined, ctx);
    out.predicted_log_price = Tensor({n});
    for (std::size_t i = 0; i < n; ++i)
      out.predicted_log_price[i] = price_shift_.value[0] + price_scale_.value[0] * raw[i];
    out.aux_predictions = aux_head_.forward(out.feature_vector, ctx);
    require_finite(out.predicted_log_price, "predicted log price");
    require_finite(out.aux_predictions, "auxiliary predictions");
    return out;
  }

  /// Backpropagates loss gradients w.r.t. the predicted log price [B] and the
  /// auxiliary predictions [B, 32] through the whole network.
  void backward(const Tensor& d_price, const Tensor& d_aux) {
    const std::size_t n = d_price.size();
    Tensor d_raw({n, 1});
    for (std::size_t i = 0; i < n; ++i) d_raw[i] = d_price[i] * price_scale_.value[0];
    Tensor d_joined = price_head_.backward(d_raw);
    Tensor d_feat = aux_head_.backward(d_aux);
    for (std::size_t i = 0; i < n; ++i)
      for (std::size_t f = 0; f < feature_dim_; ++f)
        d_feat[i * feature_dim_ + f] += d_joined[i * (feature_dim_ + kAuxInputs) + f];
    front_.backward(extractor_.backward(d_feat));
  }

  /// Eval-mode feature vectors [B, F].
  Tensor features(const Tensor& tokens) {
    ForwardContext ctx{Mode::Eval, 0};
    return extractor_.forward(front_.forward(tokens, ctx), ctx);
  }

  std::vector<Param*> params() {
    std::vector<Param*> out;
    for (Layer* l : parts()) {
      auto p = l->params();
      out.insert(out.end(), p.begin(), p.end());
    }
    return out;
  }

  std::vector<Buffer*> buffers() {
    std::vector<Buffer*> out;
    for (Layer* l : parts()) {
      auto b = l->buffers();
      out.insert(out.end(), b.begin(), b.end());
    }
    out.push_back(&price_shift_);
    out.push_back(&price_scale_);
    return out;
  }

  std::size_t parameter_count() {
    std::size_t n = 0;
    for (Param* p : params()) n += p->value.size();
    return n;
  }

  void zero_grad() {
    for (Param* p : params()) p->zero_grad();
  }

  /// Every persisted tensor: parameters then buffers, with stable names.
  std::vector<std::pair<std::string, Tensor*>> named_state() {
    std::vector<std::pair<std::string, Tensor*>> out;
    for (Param* p : params()) out.emplace_back(p->name, &p->value);
    for (Buffer* b : buffers()) out.emplace_back(b->name, &b->value);
    return out;
  }

  std::vector<std::string> state_names() {
    std::vector<std::string> names;
    for (auto& [n, t] : named_state()) names.push_back(n);
    return names;
  }

  ModelState save_state() {
    ModelState s;
    for (auto& [n, t] : named_state()) s.values.push_back(*t);
    return s;
  }

  void load_state(const ModelState& s) {
    auto named = named_state();
    if (named.size() != s.values.size()) throw Error("model state size mismatch");
    for (std::size_t i = 0; i < named.size(); ++i) {
      if (named[i].second->shape() != s.values[i].shape()) throw ShapeError("model state shape mismatch");
      *named[i].second = s.values[i];
    }
  }

  /// Rounds every parameter and buffer to float precision, the persisted
  /// representation.
  void quantize() {
    for (auto& [n, t] : named_state())
      for (std::size_t i = 0; i < t->size(); ++i) (*t)[i] = double(float((*t)[i]));
  }

  void set_price_scaler(double shift, double scale) {
    price_shift_.value[0] = shift;
    price_scale_.value[0] = scale;
  }
  double price_shift() const { return price_shift_.value[0]; }
  double price_scale() const { return price_scale_.value[0]; }

 private:
  std::vector<Layer*> parts() { return {&front_, &extractor_, &price_head_, &aux_head_}; }

  void build_cnn(std::size_t in_ch, Initializer& init, std::uint64_t& salt) {
    auto down = cfg_.effective_downsample();
    auto is_down = [&](std::size_t layer) { return std::find(down.begin(), down.end(), layer) != down.end(); };
    std::size_t ch = in_ch, filters = cfg_.width;
    auto conv_bn = [&](Sequential& seq, std::size_t layer, std::size_t in, std::size_t out, std::size_t stride) {
      std::string name = "cnn/layer" + std::to_string(layer);
      seq.emplace<Conv1D>(name + "/conv", in, out, 3, stride, false, init);
      seq.emplace<BatchNorm>(name + "/bn", out);
    };
    for (std::size_t layer = 1; layer <= cfg_.layers; layer += 2) {
      const bool paired = layer + 1 <= cfg_.layers;
      std::size_t s1 = is_down(layer) ? 2 : 1;
      std::size_t f1 = s1 == 2 ? filters * 2 : filters;
      if (!paired) {
        conv_bn(extractor_, layer, ch, f1, s1);
        extractor_.emplace<Activation>(ActivationKind::ELU);
        extractor_.emplace<Dropout>(cfg_.dropout, salt++);
        ch = filters = f1;
        continue;
      }
      std::size_t s2 = is_down(layer + 1) ? 2 : 1;
      std::size_t f2 = s2 == 2 ? f1 * 2 : f1;
      auto main = std::make_unique<Sequential>();
      conv_bn(*main, layer, ch, f1, s1);
      main->emplace<Activation>(ActivationKind::ELU);
      main->emplace<Dropout>(cfg_.dropout, salt++);
      conv_bn(*main, layer + 1, f1, f2, s2);
      LayerPtr projection;
      if (ch != f2 || s1 * s2 != 1)
        projection = std::make_unique<Conv1D>("cnn/shortcut" + std::to_string(layer), ch, f2, 1, s1 * s2,
                                              false, init);
      extractor_.emplace<ResidualAdd>(std::move(main), std::move(projection), cfg_.residual);
      extractor_.emplace<Activation>(ActivationKind::ELU);
      extractor_.emplace<Dropout>(cfg_.dropout, salt++);
      ch = filters = f2;
    }
    extractor_.emplace<GlobalAveragePool>();
  }

  template <typename Cell>
  void build_recurrent(const std::string& prefix, std::size_t hidden, std::size_t in_ch, Initializer& init,
                       std::uint64_t& salt) {
    std::size_t ch = in_ch;
    for (std::size_t layer = 1; layer <= cfg_.layers; ++layer) {
      std::string name = prefix + "/layer" + std::to_string(layer);
      extractor_.emplace<BatchNorm>(name + "/bn", ch);
      extractor_.emplace<BiDirectional<Cell>>(name, ch, hidden, init);
      extractor_.emplace<Dropout>(cfg_.dropout, salt++);
      ch = 2 * hidden;
    }
    if (cfg_.extractor == Extractor::RNN) extractor_.emplace<SumOverTime>();
    else extractor_.emplace<BiDirFinalStep>(hidden);
  }

  ModelConfig cfg_;
  Sequential front_, extractor_, price_head_, aux_head_;
  Buffer price_shift_, price_scale_;
  std::size_t feature_dim_ = 0;
};

/// Eval-mode predictions in chunks.
inline std::vector<double> predict(Model& model, std::span<const Example> examples, std::size_t chunk = 1024) {
  std::vector<double> out;
  out.reserve(examples.size());
  std::vector<const Example*> ptrs;
  for (std::size_t start = 0; start < examples.size(); start += chunk) {
    ptrs.clear();
    for (std::size_t i = start; i < std::min(examples.size(), start + chunk); ++i) ptrs.push_back(&examples[i]);
    auto fo = model.forward(make_batch(ptrs), {Mode::Eval, 0});
    out.insert(out.end(), fo.predicted_log_price.values().begin(), fo.predicted_log_price.values().end());
  }
  return out;
}

}  // namespace platemark
