#pragma once

#include <cstdint>
#include <filesystem>
#include <functional>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "json.hpp"

#include "amimv/dataset.hpp"
#include "amimv/loss.hpp"
#include "amimv/model.hpp"
#include "amimv/optim.hpp"
#include "amimv/views.hpp"

namespace amimv {

enum class TrainMode { amimv, simclr_baseline };
std::string_view mode_name(TrainMode mode);
TrainMode parse_mode(std::string_view name);

enum class EmaPlacement { before_step, after_step };

struct RunConfig {
  std::string dataset = "synthetic:C=4,counts=1000:100:100:100,size=28";
  std::size_t epochs = 400;
  std::size_t batch_size = 128;
  EncoderConfig encoder;
  LossConfig loss;
  AugmentConfig augment;
  // Empty means scaled_base_lr(batch_size).
  std::optional<double> base_lr;
  double warmup_fraction = 0.1;
  double warmup_start = 1e-4;
  double sgd_momentum = 0.9;
  double weight_decay = 1e-4;
  double ema_momentum = 0.99;
  EmaPlacement ema_placement = EmaPlacement::before_step;
  TrainMode mode = TrainMode::amimv;
  std::uint64_t seed = 0;
  std::string output = "runs/default";
  // Images tracked each epoch for alignment/uniformity; 0 disables.
  std::size_t monitor_images = 256;

  void validate() const;
  double resolved_base_lr() const { return base_lr.value_or(scaled_base_lr(batch_size)); }
};

void to_json(nlohmann::json& j, const RunConfig& c);
/// Unknown keys raise ValidationError naming the dotted key.
void from_json(const nlohmann::json& j, RunConfig& c);

/// Sets a dotted key ("loss.tau") in a config document. The value text is
/// parsed as JSON when possible, otherwise taken as a string. Keys absent
/// from the default config are rejected with a ValidationError naming them.
void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value_text);

RunConfig load_run_config(const std::filesystem::path& path, const std::vector<std::pair<std::string, std::string>>& overrides = {});

struct EpochLog {
  std::size_t epoch = 0;  // 1-based
  double mean_loss = 0.0;
  double lr = 0.0;        // rate used by the epoch's last step
  double alignment = 0.0;
  double uniformity = 0.0;
};

struct PretrainResult {
  EncoderPair pair;
  std::vector<EpochLog> log;
  std::uint64_t steps = 0;
};

using EpochCallback = std::function<void(const EpochLog&)>;

/// Runs the momentum-pair contrastive loop and writes log.csv,
/// checkpoint.bin, manifest.json and run.json to config.output. A non-finite
/// loss raises NumericError naming the step.
PretrainResult pretrain(const RunConfig& config, const EpochCallback& on_epoch = {});
/// Same, on an already loaded dataset.
PretrainResult pretrain(const RunConfig& config, const ImageDataset& dataset, const EpochCallback& on_epoch = {});

std::string format_log_csv(const std::vector<EpochLog>& log);

}  // namespace amimv
