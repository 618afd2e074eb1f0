// SPDX-License-Identifier: Apache-2.0
#include "fslr/models.hpp"

#include <cmath>
#include <stdexcept>

namespace fslr {

namespace {

constexpr double kReluGain = 1.4142135623730951;  // sqrt(2)

std::size_t scaled_dim(std::size_t base, double multiplier, const char* what) {
  const double v = static_cast<double>(base) * multiplier;
  const double r = std::round(v);
  if (r < 1.0 || std::abs(v - r) > 1e-9) {
    throw ConfigError(std::string(what) + " " + std::to_string(base) + " x width multiplier " +
                      std::to_string(multiplier) + " is not a positive integer");
  }
  return static_cast<std::size_t>(r);
}

Tensor zeros_vec(std::size_t n) { return Tensor::zeros({n}); }

std::string block_name(std::size_t i, const std::string& local) {
  return "block" + std::to_string(i) + "." + local;
}

}  // namespace

std::string to_string(Arch arch) {
  return arch == Arch::kResMlp ? "resmlp" : "transformer";
}

std::string to_string(NormVariant variant) {
  switch (variant) {
    case NormVariant::kPostNorm: return "postnorm";
    case NormVariant::kPreNorm: return "prenorm";
    case NormVariant::kPreNormPostMod: return "prenormpostmod";
  }
  return "?";
}

Arch parse_arch(const std::string& s) {
  if (s == "resmlp") return Arch::kResMlp;
  if (s == "transformer") return Arch::kTransformer;
  throw ConfigError("unknown arch '" + s + "'");
}

NormVariant parse_norm_variant(const std::string& s) {
  if (s == "postnorm") return NormVariant::kPostNorm;
  if (s == "prenorm") return NormVariant::kPreNorm;
  if (s == "prenormpostmod") return NormVariant::kPreNormPostMod;
  throw ConfigError("unknown norm variant '" + s + "'");
}

void ModelConfig::validate() const {
  if (!(width_multiplier > 0.0)) throw ConfigError("width multiplier must be positive");
  if (depth_multiplier < 1) throw ConfigError("depth multiplier must be a positive integer");
  if (!(init_scale > 0.0)) throw ConfigError("init scale must be positive");
  if (!(norm_eps > 0.0)) throw ConfigError("layernorm epsilon must be positive");
  if (arch == Arch::kResMlp) {
    if (input_dim == 0 || num_classes == 0 || resmlp_blocks == 0) {
      throw ConfigError("resmlp dimensions must be positive");
    }
    scaled_hidden();
  } else {
    if (vocab == 0 || max_seq == 0 || transformer_blocks == 0) {
      throw ConfigError("transformer dimensions must be positive");
    }
    const std::size_t d = scaled_d_model();
    const std::size_t h = scaled_heads();
    scaled_d_ff();
    if (d % h != 0) {
      throw ConfigError("head count " + std::to_string(h) + " does not divide d_model " +
                        std::to_string(d));
    }
    if (d / h < 2) throw ConfigError("head dimension must be at least 2 for QK-norm");
  }
}

std::size_t ModelConfig::scaled_hidden() const {
  return scaled_dim(hidden, width_multiplier, "hidden");
}
std::size_t ModelConfig::scaled_d_model() const {
  return scaled_dim(d_model, width_multiplier, "d_model");
}
std::size_t ModelConfig::scaled_d_ff() const { return scaled_dim(d_ff, width_multiplier, "d_ff"); }
std::size_t ModelConfig::scaled_heads() const {
  return scaled_dim(heads, width_multiplier, "heads");
}

std::size_t ModelConfig::num_blocks() const {
  const std::size_t base = arch == Arch::kResMlp ? resmlp_blocks : transformer_blocks;
  return base * static_cast<std::size_t>(depth_multiplier);
}

std::size_t ModelConfig::output_dim() const {
  return arch == Arch::kResMlp ? num_classes : vocab;
}

Model::Model(ModelConfig config, std::vector<Parameter> params)
    : config_(std::move(config)), params_(std::move(params)) {
  for (std::size_t i = 0; i < params_.size(); ++i) {
    if (!index_.emplace(params_[i].name, i).second) {
      throw ConfigError("duplicate parameter name '" + params_[i].name + "'");
    }
  }
}

const Parameter& Model::param(const std::string& name) const {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return params_[it->second];
}

Parameter& Model::param(const std::string& name) {
  auto it = index_.find(name);
  if (it == index_.end()) throw std::out_of_range("no parameter named '" + name + "'");
  return params_[it->second];
}

bool Model::has_param(const std::string& name) const { return index_.count(name) != 0; }

std::vector<std::string> Model::names() const {
  std::vector<std::string> out;
  out.reserve(params_.size());
  for (const auto& p : params_) out.push_back(p.name);
  return out;
}

ParamValues Model::values() const {
  ParamValues out;
  for (const auto& p : params_) out.emplace(p.name, p.value);
  return out;
}

void Model::set_values(const ParamValues& values) {
  for (auto& p : params_) {
    auto it = values.find(p.name);
    if (it == values.end()) throw std::out_of_range("missing value for '" + p.name + "'");
    if (!it->second.same_shape(p.value)) {
      throw ShapeError("shape mismatch for '" + p.name + "'");
    }
    p.value = it->second;
  }
}

Var Model::forward(Tape& tape, const Tensor& inputs) const {
  std::map<std::string, Var> p;
  for (const auto& prm : params_) p.emplace(prm.name, tape.parameter(prm.name, prm.value));
  return config_.arch == Arch::kResMlp ? forward_resmlp(tape, p, inputs)
                                       : forward_transformer(tape, p, inputs);
}

Tensor Model::logits(const Tensor& inputs) const {
  Tape tape;
  return forward(tape, inputs).value();
}

Var Model::forward_resmlp(Tape& tape, const std::map<std::string, Var>& p,
                          const Tensor& x) const {
  if (x.rank() != 2 || x.dim(1) != config_.input_dim) {
    throw ShapeError("resmlp expects inputs [N x " + std::to_string(config_.input_dim) +
                     "], got " + shape_str(x.shape()));
  }
  Var h = ops::linear(tape.constant(x), p.at("input.weight"), p.at("input.bias"));
  for (std::size_t i = 0; i < config_.num_blocks(); ++i) {
    Var branch = ops::linear(ops::relu(h), p.at(block_name(i, "weight")),
                             p.at(block_name(i, "bias")));
    h = ops::add(h, branch);
  }
  return ops::linear(h, p.at("readout.weight"), p.at("readout.bias"));
}

Var Model::forward_transformer(Tape& /*tape*/, const std::map<std::string, Var>& p,
                               const Tensor& ids) const {
  if (ids.rank() != 2) {
    throw ShapeError("transformer expects token ids [B x T], got " + shape_str(ids.shape()));
  }
  const std::size_t batch = ids.dim(0);
  const std::size_t seq = ids.dim(1);
  if (seq > config_.max_seq) {
    throw ShapeError("sequence length " + std::to_string(seq) + " exceeds max_seq " +
                     std::to_string(config_.max_seq));
  }
  const std::size_t d = config_.scaled_d_model();
  const std::size_t heads = config_.scaled_heads();
  const std::size_t dh = d / heads;
  const std::size_t blocks = config_.num_blocks();
  const double eps = config_.norm_eps;
  const double branch_scale = 1.0 / std::sqrt(static_cast<double>(blocks));
  const bool affine = config_.affine_layernorm;

  std::vector<std::size_t> tok(ids.numel());
  std::vector<std::size_t> pos(ids.numel());
  for (std::size_t i = 0; i < ids.numel(); ++i) {
    const double v = ids[i];
    if (v < 0.0 || v >= static_cast<double>(config_.vocab)) {
      throw std::out_of_range("token id out of vocabulary");
    }
    tok[i] = static_cast<std::size_t>(v);
    pos[i] = i % seq;
  }
  Var x = ops::add(ops::embedding(p.at("embedding.token"), tok),
                   ops::embedding(p.at("embedding.position"), pos));

  auto norm = [&](Var v, const std::string& prefix) {
    Var y = ops::layernorm(v, eps);
    if (affine) y = ops::add(ops::mul(y, p.at(prefix + ".gain")), p.at(prefix + ".bias"));
    return y;
  };
  auto attention = [&](Var in, std::size_t i) {
    Var q = ops::linear(in, p.at(block_name(i, "attn.wq")));
    Var k = ops::linear(in, p.at(block_name(i, "attn.wk")));
    Var v = ops::linear(in, p.at(block_name(i, "attn.wv")));
    // QK-norm over each head's slice.
    const Shape per_head{batch * seq * heads, dh};
    const Shape packed{batch * seq, d};
    q = ops::reshape(ops::layernorm(ops::reshape(q, per_head), eps), packed);
    k = ops::reshape(ops::layernorm(ops::reshape(k, per_head), eps), packed);
    Var a = ops::causal_attention(q, k, v, batch, seq, heads);
    return ops::linear(a, p.at(block_name(i, "attn.wo")));
  };
  auto feedforward = [&](Var in, std::size_t i) {
    Var hdn = ops::relu(
        ops::linear(in, p.at(block_name(i, "ffn.w1")), p.at(block_name(i, "ffn.b1"))));
    return ops::linear(hdn, p.at(block_name(i, "ffn.w2")), p.at(block_name(i, "ffn.b2")));
  };

  for (std::size_t i = 0; i < blocks; ++i) {
    for (int unit = 0; unit < 2; ++unit) {
      const std::string norm_name = block_name(i, unit == 0 ? "attn_norm" : "ffn_norm");
      auto f = [&](Var in) { return unit == 0 ? attention(in, i) : feedforward(in, i); };
      switch (config_.norm) {
        case NormVariant::kPostNorm:
          x = norm(ops::add(x, ops::scale(f(x), branch_scale)), norm_name);
          break;
        case NormVariant::kPreNorm:
          x = ops::add(x, ops::scale(f(norm(x, norm_name)), branch_scale));
          break;
        case NormVariant::kPreNormPostMod:
          x = ops::add(x, ops::scale(norm(f(x), norm_name), branch_scale));
          break;
      }
    }
  }
  if (config_.norm != NormVariant::kPostNorm) x = norm(x, "final_norm");
  return ops::linear(x, p.at("readout.weight"), p.at("readout.bias"));
}

Tensor kaiming_init(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain,
                    double init_scale) {
  if (fan_in == 0) throw ConfigError("kaiming_init: fan_in must be at least 1");
  const double std = gain * init_scale / std::sqrt(static_cast<double>(fan_in));
  Tensor w({fan_out, fan_in});
  for (auto& v : w.values()) v = std * rng.normal();
  return w;
}

Model build_resmlp(const ModelConfig& config, Rng& rng) {
  if (config.arch != Arch::kResMlp) throw ConfigError("build_resmlp: arch is not resmlp");
  config.validate();
  const std::size_t h = config.scaled_hidden();
  const std::size_t blocks = config.num_blocks();
  const double depth_factor = 1.0 / std::sqrt(static_cast<double>(blocks));

  std::vector<Parameter> params;
  params.push_back({"input.weight", kaiming_init(rng, config.input_dim, h, 1.0),
                    Role::kEmbedding, ParamKind::kWeight, -1, "input.weight"});
  params.push_back({"input.bias", zeros_vec(h), Role::kEmbedding, ParamKind::kBias, -1,
                    "input.bias"});
  for (std::size_t i = 0; i < blocks; ++i) {
    // ReLU precedes the block's linear map; 1/sqrt(L) is folded into the init.
    Tensor w = kaiming_init(rng, h, h, kReluGain, config.init_scale * depth_factor);
    params.push_back({block_name(i, "weight"), std::move(w), Role::kHidden, ParamKind::kWeight,
                      static_cast<int>(i), "weight"});
    params.push_back({block_name(i, "bias"), zeros_vec(h), Role::kHidden, ParamKind::kBias,
                      static_cast<int>(i), "bias"});
  }
  params.push_back({"readout.weight", kaiming_init(rng, h, config.num_classes, 1.0),
                    Role::kReadout, ParamKind::kWeight, -1, "readout.weight"});
  params.push_back({"readout.bias", zeros_vec(config.num_classes), Role::kReadout,
                    ParamKind::kBias, -1, "readout.bias"});
  return Model(config, std::move(params));
}

Model build_transformer(const ModelConfig& config, Rng& rng) {
  if (config.arch != Arch::kTransformer) {
    throw ConfigError("build_transformer: arch is not transformer");
  }
  config.validate();
  const std::size_t d = config.scaled_d_model();
  const std::size_t dff = config.scaled_d_ff();
  const std::size_t blocks = config.num_blocks();
  const double c = config.init_scale;

  std::vector<Parameter> params;
  // One-hot inputs have unit norm, so fan_in = 1 for embedding tables.
  params.push_back({"embedding.token", kaiming_init(rng, 1, config.vocab * d, 1.0).reshaped(
                                           {config.vocab, d}),
                    Role::kEmbedding, ParamKind::kWeight, -1, "embedding.token"});
  params.push_back({"embedding.position",
                    kaiming_init(rng, 1, config.max_seq * d, 1.0).reshaped({config.max_seq, d}),
                    Role::kEmbedding, ParamKind::kWeight, -1, "embedding.position"});
  auto hidden = [&](std::size_t i, const std::string& local, Tensor value, ParamKind kind) {
    params.push_back({block_name(i, local), std::move(value), Role::kHidden, kind,
                      static_cast<int>(i), local});
  };
  for (std::size_t i = 0; i < blocks; ++i) {
    hidden(i, "attn.wq", kaiming_init(rng, d, d, 1.0, c), ParamKind::kWeight);
    hidden(i, "attn.wk", kaiming_init(rng, d, d, 1.0, c), ParamKind::kWeight);
    hidden(i, "attn.wv", kaiming_init(rng, d, d, 1.0, c), ParamKind::kWeight);
    hidden(i, "attn.wo", kaiming_init(rng, d, d, 1.0, c), ParamKind::kWeight);
    hidden(i, "ffn.w1", kaiming_init(rng, d, dff, 1.0, c), ParamKind::kWeight);
    hidden(i, "ffn.b1", zeros_vec(dff), ParamKind::kBias);
    hidden(i, "ffn.w2", kaiming_init(rng, dff, d, kReluGain, c), ParamKind::kWeight);
    hidden(i, "ffn.b2", zeros_vec(d), ParamKind::kBias);
    if (config.affine_layernorm) {
      for (const char* n : {"attn_norm", "ffn_norm"}) {
        hidden(i, std::string(n) + ".gain", Tensor::ones({d}), ParamKind::kGain);
        hidden(i, std::string(n) + ".bias", zeros_vec(d), ParamKind::kBias);
      }
    }
  }
  if (config.affine_layernorm && config.norm != NormVariant::kPostNorm) {
    params.push_back({"final_norm.gain", Tensor::ones({d}), Role::kReadout, ParamKind::kGain, -1,
                      "final_norm.gain"});
    params.push_back({"final_norm.bias", zeros_vec(d), Role::kReadout, ParamKind::kBias, -1,
                      "final_norm.bias"});
  }
  params.push_back({"readout.weight", kaiming_init(rng, d, config.vocab, 1.0), Role::kReadout,
                    ParamKind::kWeight, -1, "readout.weight"});
  params.push_back({"readout.bias", zeros_vec(config.vocab), Role::kReadout, ParamKind::kBias,
                    -1, "readout.bias"});
  return Model(config, std::move(params));
}

Model build_model(const ModelConfig& config, Rng& rng) {
  return config.arch == Arch::kResMlp ? build_resmlp(config, rng)
                                      : build_transformer(config, rng);
}

Var training_loss(const Model& model, Tape& tape, const Tensor& inputs,
                  const std::vector<int>& targets) {
  return ops::cross_entropy(model.forward(tape, inputs), targets);
}

}  // namespace fslr
