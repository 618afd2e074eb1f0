// SPDX-License-Identifier: Apache-2.0
#include <bit>
#include <cstdint>
#include <cstring>
#include <fstream>
#include <stdexcept>

#include "fslr/json_io.hpp"
#include "fslr/models.hpp"

namespace fslr {

static_assert(std::endian::native == std::endian::little,
              "checkpoint IO assumes a little-endian host");

namespace {

constexpr char kMagic[8] = {'F', 'S', 'L', 'R', 'C', 'K', 'P', 'T'};

const char* role_name(Role r) {
  switch (r) {
    case Role::kEmbedding: return "embedding";
    case Role::kHidden: return "hidden";
    case Role::kReadout: return "readout";
  }
  return "?";
}

}  // namespace

void to_json(nlohmann::json& j, const ModelConfig& c) {
  j = nlohmann::json{{"arch", to_string(c.arch)},
                     {"width_multiplier", c.width_multiplier},
                     {"depth_multiplier", c.depth_multiplier},
                     {"norm", to_string(c.norm)},
                     {"init_scale", c.init_scale},
                     {"affine_layernorm", c.affine_layernorm},
                     {"norm_eps", c.norm_eps},
                     {"input_dim", c.input_dim},
                     {"num_classes", c.num_classes},
                     {"hidden", c.hidden},
                     {"resmlp_blocks", c.resmlp_blocks},
                     {"vocab", c.vocab},
                     {"max_seq", c.max_seq},
                     {"d_model", c.d_model},
                     {"d_ff", c.d_ff},
                     {"heads", c.heads},
                     {"transformer_blocks", c.transformer_blocks}};
}

void from_json(const nlohmann::json& j, ModelConfig& c) {
  if (j.contains("arch")) c.arch = parse_arch(j.at("arch").get<std::string>());
  if (j.contains("norm")) c.norm = parse_norm_variant(j.at("norm").get<std::string>());
  auto get = [&](const char* key, auto& field) {
    if (j.contains(key)) j.at(key).get_to(field);
  };
  get("width_multiplier", c.width_multiplier);
  get("depth_multiplier", c.depth_multiplier);
  get("init_scale", c.init_scale);
  get("affine_layernorm", c.affine_layernorm);
  get("norm_eps", c.norm_eps);
  get("input_dim", c.input_dim);
  get("num_classes", c.num_classes);
  get("hidden", c.hidden);
  get("resmlp_blocks", c.resmlp_blocks);
  get("vocab", c.vocab);
  get("max_seq", c.max_seq);
  get("d_model", c.d_model);
  get("d_ff", c.d_ff);
  get("heads", c.heads);
  get("transformer_blocks", c.transformer_blocks);
}

void save_checkpoint(const Model& model, const std::string& path) {
  nlohmann::json header;
  header["config"] = model.config();
  header["tensors"] = nlohmann::json::array();
  std::uint64_t offset = 0;
  for (const auto& p : model.parameters()) {
    const std::uint64_t nbytes = p.value.numel() * sizeof(double);
    header["tensors"].push_back({{"name", p.name},
                                 {"shape", p.value.shape()},
                                 {"offset", offset},
                                 {"nbytes", nbytes},
                                 {"role", role_name(p.role)}});
    offset += nbytes;
  }
  const std::string text = header.dump();
  std::ofstream out(path, std::ios::binary);
  if (!out) throw std::runtime_error("cannot open checkpoint for writing: " + path);
  out.write(kMagic, sizeof(kMagic));
  const std::uint64_t len = text.size();
  out.write(reinterpret_cast<const char*>(&len), sizeof(len));
  out.write(text.data(), static_cast<std::streamsize>(text.size()));
  for (const auto& p : model.parameters()) {
    out.write(reinterpret_cast<const char*>(p.value.data()),
              static_cast<std::streamsize>(p.value.numel() * sizeof(double)));
  }
  if (!out) throw std::runtime_error("failed writing checkpoint: " + path);
}

Model load_checkpoint(const std::string& path) {
  std::ifstream in(path, std::ios::binary);
  if (!in) throw std::runtime_error("cannot open checkpoint: " + path);
  char magic[8];
  in.read(magic, sizeof(magic));
  if (!in || std::memcmp(magic, kMagic, sizeof(kMagic)) != 0) {
    throw std::runtime_error("not a checkpoint file: " + path);
  }
  std::uint64_t len = 0;
  in.read(reinterpret_cast<char*>(&len), sizeof(len));
  std::string text(len, '\0');
  in.read(text.data(), static_cast<std::streamsize>(len));
  if (!in) throw std::runtime_error("truncated checkpoint header: " + path);
  const auto header = nlohmann::json::parse(text);
  const ModelConfig config = header.at("config").get<ModelConfig>();
  std::vector<char> payload((std::istreambuf_iterator<char>(in)), std::istreambuf_iterator<char>());

  // Rebuild the tagged parameter list for this config, then fill in values.
  Rng rng(0);
  Model model = build_model(config, rng);
  for (const auto& t : header.at("tensors")) {
    const auto name = t.at("name").get<std::string>();
    const auto shape = t.at("shape").get<Shape>();
    const auto offset = t.at("offset").get<std::uint64_t>();
    const auto nbytes = t.at("nbytes").get<std::uint64_t>();
    if (nbytes != shape_numel(shape) * sizeof(double) || offset + nbytes > payload.size()) {
      throw std::runtime_error("corrupt checkpoint entry '" + name + "'");
    }
    Tensor value(shape);
    std::memcpy(value.data(), payload.data() + offset, nbytes);
    Parameter& p = model.param(name);
    if (!p.value.same_shape(value)) throw ShapeError("checkpoint shape mismatch for " + name);
    p.value = std::move(value);
  }
  return model;
}

}  // namespace fslr
