// SPDX-License-Identifier: Apache-2.0
#pragma once

#include <cstddef>
#include <map>
#include <string>
#include <vector>

#include "fslr/autodiff.hpp"
#include "fslr/rng.hpp"
#include "fslr/tensor.hpp"

namespace fslr {

class ConfigError : public std::invalid_argument {
 public:
  using std::invalid_argument::invalid_argument;
};

enum class Arch { kResMlp, kTransformer };
enum class NormVariant { kPostNorm, kPreNorm, kPreNormPostMod };

std::string to_string(Arch arch);
std::string to_string(NormVariant variant);
Arch parse_arch(const std::string& s);
NormVariant parse_norm_variant(const std::string& s);

/// Architecture and scale of a model. Base dimensions are multiplied by
/// `width_multiplier`; block counts by `depth_multiplier`.
struct ModelConfig {
  Arch arch = Arch::kResMlp;
  double width_multiplier = 1.0;
  int depth_multiplier = 1;
  NormVariant norm = NormVariant::kPreNormPostMod;
  /// Multiplier on the Kaiming std of hidden-block weight matrices.
  double init_scale = 1.0;
  bool affine_layernorm = false;
  double norm_eps = 1e-5;

  // ResMLP base dimensions.
  std::size_t input_dim = 32;
  std::size_t num_classes = 10;
  std::size_t hidden = 128;
  std::size_t resmlp_blocks = 4;

  // Transformer base dimensions.
  std::size_t vocab = 128;
  std::size_t max_seq = 64;
  std::size_t d_model = 128;
  std::size_t d_ff = 512;
  std::size_t heads = 2;
  std::size_t transformer_blocks = 2;

  /// Throws ConfigError describing the first violated constraint.
  void validate() const;

  std::size_t scaled_hidden() const;
  std::size_t scaled_d_model() const;
  std::size_t scaled_d_ff() const;
  std::size_t scaled_heads() const;
  /// Residual block count L after depth scaling.
  std::size_t num_blocks() const;
  /// Number of output logits per row (classes or vocabulary).
  std::size_t output_dim() const;

  friend bool operator==(const ModelConfig&, const ModelConfig&) = default;
};

enum class Role { kEmbedding, kHidden, kReadout };
enum class ParamKind { kWeight, kBias, kGain };

/// A named trainable tensor with the tags FLeRM uses for layer matching.
struct Parameter {
  std::string name;
  Tensor value;
  Role role = Role::kHidden;
  ParamKind kind = ParamKind::kWeight;
  /// Residual block index for Role::kHidden, -1 otherwise.
  int block = -1;
  /// Name inside the block ("attn.wq"); equals `name` outside blocks.
  std::string local;

  bool is_readout_weight() const { return role == Role::kReadout && kind == ParamKind::kWeight; }
  bool is_readout_bias() const { return role == Role::kReadout && kind == ParamKind::kBias; }
};

using ParamValues = std::map<std::string, Tensor>;

/// Parameters plus the forward procedure of one architecture. A value type:
/// copying a Model copies its weights.
class Model {
 public:
  Model(ModelConfig config, std::vector<Parameter> params);

  const ModelConfig& config() const { return config_; }
  const std::vector<Parameter>& parameters() const { return params_; }
  std::vector<Parameter>& parameters() { return params_; }

  const Parameter& param(const std::string& name) const;
  Parameter& param(const std::string& name);
  bool has_param(const std::string& name) const;
  std::vector<std::string> names() const;

  ParamValues values() const;
  void set_values(const ParamValues& values);

  /// Logits of shape [rows × output_dim]. ResMLP inputs are [N × input_dim]
  /// features; transformer inputs are [B × T] token ids stored as doubles,
  /// giving B·T rows.
  Var forward(Tape& tape, const Tensor& inputs) const;
  /// Plain evaluation without keeping the graph.
  Tensor logits(const Tensor& inputs) const;

 private:
  Var forward_resmlp(Tape& tape, const std::map<std::string, Var>& p, const Tensor& x) const;
  Var forward_transformer(Tape& tape, const std::map<std::string, Var>& p,
                          const Tensor& ids) const;

  ModelConfig config_;
  std::vector<Parameter> params_;
  std::map<std::string, std::size_t> index_;
};

/// Weight matrix [fan_out × fan_in] with IID N(0, gain²·init_scale²/fan_in) entries.
Tensor kaiming_init(Rng& rng, std::size_t fan_in, std::size_t fan_out, double gain,
                    double init_scale = 1.0);

Model build_resmlp(const ModelConfig& config, Rng& rng);
Model build_transformer(const ModelConfig& config, Rng& rng);
Model build_model(const ModelConfig& config, Rng& rng);

/// Mean cross-entropy of the model on a batch.
Var training_loss(const Model& model, Tape& tape, const Tensor& inputs,
                  const std::vector<int>& targets);

/// Checkpoint: 8-byte magic "FSLRCKPT", little-endian u64 header length, a
/// JSON header {config, tensors:[{name, shape, offset, nbytes}]}, then the
/// raw little-endian f64 payload. Offsets are relative to the payload start.
void save_checkpoint(const Model& model, const std::string& path);
Model load_checkpoint(const std::string& path);

}  // namespace fslr
