#pragma once

#include <cstdint>
#include <filesystem>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "amimv/tensor.hpp"

namespace amimv {

enum class EncoderArch { tiny, small_residual };

std::string_view arch_name(EncoderArch arch);
EncoderArch parse_arch(std::string_view name);

struct EncoderConfig {
  EncoderArch arch = EncoderArch::tiny;
  std::size_t input_channels = 1;
  std::size_t projector_hidden = 512;
  std::size_t projector_output = 128;
  std::size_t norm_groups = 8;

  /// 64 for tiny, 256 for small_residual.
  std::size_t feature_dim() const;
  void validate() const;
};

void to_json(nlohmann::json& j, const EncoderConfig& c);
void from_json(const nlohmann::json& j, EncoderConfig& c);

struct Parameter {
  std::string name;
  Tensor value;
};

using ParameterSet = std::vector<Parameter>;

/// Query parameters (trained) and key parameters (EMA of query, detached).
struct EncoderPair {
  EncoderConfig config;
  ParameterSet q;
  ParameterSet k;
  double momentum = 0.99;
};

/// He-uniform conv/linear weights, zero biases, unit norm gains; k copies q.
EncoderPair init_pair(const EncoderConfig& config, std::uint64_t seed, double momentum = 0.99,
                      DType dtype = DType::float32);

struct Encoded {
  Tensor features;     // [N, D] pre-projector
  Tensor projections;  // [N, projector_output], unit rows
};

Encoded encode(const EncoderConfig& config, const ParameterSet& params, const Tensor& batch);

/// k <- m k + (1 - m) q, elementwise. q is untouched.
void ema_update(EncoderPair& pair);

/// Deep copy with identical values; q keeps requires_grad, k stays detached.
EncoderPair clone_pair(const EncoderPair& pair);

struct CheckpointInfo {
  std::uint64_t step = 0;
  std::size_t view_size = 0;
  std::string mode = "amimv";
};

/// Writes <dir>/manifest.json and <dir>/checkpoint.bin (little-endian float32,
/// q parameters then k parameters in manifest order).
void save_checkpoint(const std::filesystem::path& dir, const EncoderPair& pair, const CheckpointInfo& info);

struct Checkpoint {
  EncoderPair pair;
  CheckpointInfo info;
};

Checkpoint load_checkpoint(const std::filesystem::path& dir);

}  // namespace amimv
