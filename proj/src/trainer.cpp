#include "amimv/trainer.hpp"

#include <array>
#include <cmath>
#include <cstdio>
#include <numeric>
#include <sstream>

#include "amimv/errors.hpp"
#include "amimv/eval.hpp"
#include "amimv/fsutil.hpp"
#include "amimv/ops.hpp"
#include "amimv/rng.hpp"
#include "amimv/tape.hpp"

namespace amimv {

namespace {

// Top-level substream keys of a run's root stream.
enum RunStream : std::uint64_t { kShuffle = 0, kAugment = 1, kMonitor = 2 };

std::string_view placement_name(EmaPlacement p) { return p == EmaPlacement::before_step ? "before_step" : "after_step"; }

EmaPlacement parse_placement(std::string_view name) {
  if (name == "before_step") return EmaPlacement::before_step;
  if (name == "after_step") return EmaPlacement::after_step;
  throw ValidationError("unknown ema_placement '" + std::string(name) + "' (expected before_step or after_step)");
}

std::vector<std::string> split_dotted(const std::string& key) {
  std::vector<std::string> parts;
  std::stringstream ss(key);
  std::string part;
  while (std::getline(ss, part, '.')) parts.push_back(part);
  return parts;
}

// The two sides of the positive pairs the training objective aligns, with
// query and key roles as in the loss.
std::array<Tensor, 2> positive_pairs(const RunConfig& config, const EncoderPair& pair, std::span<const ImageRef> refs,
                                     const ChannelStats& stats, const RngStream& rng) {
  NoGradGuard no_grad;
  const std::size_t n = refs.size();
  if (config.mode == TrainMode::amimv) {
    const auto v = build_amimv_batch(refs, stats, config.augment, rng);
    const Tensor q = encode(pair.config, pair.q, ops::concat({v.v1n, v.v2a}, 0)).projections;
    const Tensor k = encode(pair.config, pair.k, ops::concat({v.v1a, v.v2n}, 0)).projections;
    return {fuse(ops::slice_rows(q, 0, n), ops::slice_rows(q, n, n), config.loss.fusion),
            fuse(ops::slice_rows(k, 0, n), ops::slice_rows(k, n, n), config.loss.fusion)};
  }
  const auto v = build_two_view_batch(refs, stats, config.augment, rng);
  return {encode(pair.config, pair.q, v[0]).projections, encode(pair.config, pair.k, v[1]).projections};
}

}  // namespace

std::string_view mode_name(TrainMode mode) { return mode == TrainMode::amimv ? "amimv" : "simclr_baseline"; }

TrainMode parse_mode(std::string_view name) {
  if (name == "amimv") return TrainMode::amimv;
  if (name == "simclr_baseline" || name == "simclr-baseline") return TrainMode::simclr_baseline;
  throw ValidationError("unknown mode '" + std::string(name) + "' (expected amimv or simclr_baseline)");
}

void RunConfig::validate() const {
  if (dataset.empty()) throw ValidationError("dataset must be set");
  if (epochs == 0) throw ValidationError("epochs must be positive");
  if (mode == TrainMode::amimv && batch_size < 2) throw ValidationError("batch_size must be at least 2 in amimv mode");
  if (batch_size == 0) throw ValidationError("batch_size must be positive");
  if (base_lr && !(*base_lr > 0.0 && std::isfinite(*base_lr))) throw ValidationError("base_lr must be positive");
  if (!(warmup_fraction >= 0.0 && warmup_fraction < 1.0)) throw ValidationError("warmup_fraction must be in [0, 1)");
  if (!(warmup_start >= 0.0)) throw ValidationError("warmup_start must be non-negative");
  if (!(sgd_momentum >= 0.0 && sgd_momentum < 1.0)) throw ValidationError("sgd_momentum must be in [0, 1)");
  if (!(weight_decay >= 0.0)) throw ValidationError("weight_decay must be non-negative");
  if (!(ema_momentum >= 0.0 && ema_momentum <= 1.0)) throw ValidationError("ema_momentum must be in [0, 1]");
  if (monitor_images == 1) throw ValidationError("monitor_images must be 0 or at least 2");
  encoder.validate();
  loss.validate();
  augment.validate();
}

void to_json(nlohmann::json& j, const RunConfig& c) {
  j = nlohmann::json{{"dataset", c.dataset},
                     {"epochs", c.epochs},
                     {"batch_size", c.batch_size},
                     {"encoder", c.encoder},
                     {"loss", c.loss},
                     {"augment", c.augment},
                     {"base_lr", c.base_lr ? nlohmann::json(*c.base_lr) : nlohmann::json(nullptr)},
                     {"warmup_fraction", c.warmup_fraction},
                     {"warmup_start", c.warmup_start},
                     {"sgd_momentum", c.sgd_momentum},
                     {"weight_decay", c.weight_decay},
                     {"ema_momentum", c.ema_momentum},
                     {"ema_placement", placement_name(c.ema_placement)},
                     {"mode", mode_name(c.mode)},
                     {"seed", c.seed},
                     {"output", c.output},
                     {"monitor_images", c.monitor_images}};
}

void from_json(const nlohmann::json& j, RunConfig& c) {
  if (!j.is_object()) throw ValidationError("run config must be a JSON object");
  for (const auto& [key, v] : j.items()) {
    try {
      if (key == "dataset") c.dataset = v.get<std::string>();
      else if (key == "epochs") c.epochs = v.get<std::size_t>();
      else if (key == "batch_size") c.batch_size = v.get<std::size_t>();
      else if (key == "encoder") c.encoder = v.get<EncoderConfig>();
      else if (key == "loss") c.loss = v.get<LossConfig>();
      else if (key == "augment") c.augment = v.get<AugmentConfig>();
      else if (key == "base_lr") c.base_lr = v.is_null() ? std::nullopt : std::optional<double>(v.get<double>());
      else if (key == "warmup_fraction") c.warmup_fraction = v.get<double>();
      else if (key == "warmup_start") c.warmup_start = v.get<double>();
      else if (key == "sgd_momentum") c.sgd_momentum = v.get<double>();
      else if (key == "weight_decay") c.weight_decay = v.get<double>();
      else if (key == "ema_momentum") c.ema_momentum = v.get<double>();
      else if (key == "ema_placement") c.ema_placement = parse_placement(v.get<std::string>());
      else if (key == "mode") c.mode = parse_mode(v.get<std::string>());
      else if (key == "seed") c.seed = v.get<std::uint64_t>();
      else if (key == "output") c.output = v.get<std::string>();
      else if (key == "monitor_images") c.monitor_images = v.get<std::size_t>();
      else throw ValidationError("unknown config key " + key);
    } catch (const nlohmann::json::exception&) {
      throw ValidationError("bad value for config key " + key);
    }
  }
  c.validate();
}

void apply_override(nlohmann::json& doc, const std::string& dotted_key, const std::string& value_text) {
  static const nlohmann::json defaults = RunConfig{};
  const auto parts = split_dotted(dotted_key);
  if (parts.empty()) throw ValidationError("empty config key");
  const nlohmann::json* schema = &defaults;
  nlohmann::json* target = &doc;
  for (std::size_t i = 0; i < parts.size(); ++i) {
    if (!schema->is_object() || !schema->contains(parts[i])) throw ValidationError("unknown config key " + dotted_key);
    schema = &(*schema)[parts[i]];
    if (!target->is_object()) *target = nlohmann::json::object();
    target = &(*target)[parts[i]];
  }
  if (schema->is_object()) throw ValidationError("config key " + dotted_key + " names a section, not a value");
  nlohmann::json value = nlohmann::json::parse(value_text, nullptr, false);
  if (value.is_discarded() || (schema->is_string() && !value.is_string())) value = value_text;
  *target = value;
}

RunConfig load_run_config(const std::filesystem::path& path,
                          const std::vector<std::pair<std::string, std::string>>& overrides) {
  nlohmann::json doc = RunConfig{};
  if (!path.empty()) {
    if (!std::filesystem::exists(path)) throw ValidationError("config file not found: " + path.string());
    const auto parsed = nlohmann::json::parse(read_text(path), nullptr, false);
    if (parsed.is_discarded()) throw ValidationError("config file is not valid JSON: " + path.string());
    if (!parsed.is_object()) throw ValidationError("config file must hold a JSON object: " + path.string());
    doc.merge_patch(parsed);
  }
  for (const auto& [key, value] : overrides) apply_override(doc, key, value);
  return doc.get<RunConfig>();
}

std::string format_log_csv(const std::vector<EpochLog>& log) {
  std::string out = "epoch,mean_loss,lr,alignment,uniformity\n";
  char line[160];
  for (const auto& e : log) {
    std::snprintf(line, sizeof line, "%zu,%.10g,%.10g,%.10g,%.10g\n", e.epoch, e.mean_loss, e.lr, e.alignment,
                  e.uniformity);
    out += line;
  }
  return out;
}

PretrainResult pretrain(const RunConfig& config, const EpochCallback& on_epoch) {
  config.validate();
  return pretrain(config, open_dataset(config.dataset), on_epoch);
}

PretrainResult pretrain(const RunConfig& config_in, const ImageDataset& dataset, const EpochCallback& on_epoch) {
  RunConfig config = config_in;
  config.encoder.input_channels = dataset.channels;
  config.validate();
  validate(dataset);
  const auto& train = dataset.split(Split::train);
  const std::size_t batch = config.batch_size;
  if (train.size() < batch)
    throw ValidationError("batch_size " + std::to_string(batch) + " exceeds the " + std::to_string(train.size()) +
                          " training images");
  const ChannelStats stats = dataset.channel_stats.value_or(compute_channel_stats(dataset));
  const std::size_t per_epoch = train.size() / batch;

  PretrainResult result;
  result.pair = init_pair(config.encoder, config.seed, config.ema_momentum);
  EncoderPair& pair = result.pair;
  std::vector<Tensor> q_params;
  for (const auto& p : pair.q) q_params.push_back(p.value);

  Schedule schedule;
  schedule.base_lr = config.resolved_base_lr();
  schedule.warmup_fraction = config.warmup_fraction;
  schedule.warmup_start = config.warmup_start;
  schedule.total_steps = per_epoch * config.epochs;
  SgdState sgd;
  sgd.momentum = config.sgd_momentum;
  sgd.weight_decay = config.weight_decay;

  const RngStream root(config.seed);

  // Fixed images and augmentations so epoch-to-epoch monitor values compare.
  const std::size_t monitor_count = std::min(config.monitor_images, train.size());
  std::vector<ImageRef> monitor_refs;
  for (std::size_t i = 0; i < monitor_count; ++i) monitor_refs.push_back(dataset.image(Split::train, i));
  const RngStream monitor_rng = root.substream({kMonitor});

  std::vector<std::size_t> order(train.size());
  std::uint64_t step = 0;
  for (std::size_t epoch = 0; epoch < config.epochs; ++epoch) {
    std::iota(order.begin(), order.end(), std::size_t{0});
    auto shuffle_rng = root.substream({epoch, kShuffle});
    shuffle(order, shuffle_rng);
    double loss_sum = 0.0;
    double last_lr = 0.0;
    for (std::size_t b = 0; b < per_epoch; ++b) {
      std::vector<ImageRef> refs;
      refs.reserve(batch);
      for (std::size_t i = 0; i < batch; ++i) refs.push_back(dataset.image(Split::train, order[b * batch + i]));
      const RngStream batch_rng = root.substream({kAugment, epoch, b});

      Tape tape;
      Tensor loss;
      {
        Tape::Scope scope(tape);
        if (config.mode == TrainMode::amimv) {
          const auto views = build_amimv_batch(refs, stats, config.augment, batch_rng);
          const Tensor q = encode(pair.config, pair.q, ops::concat({views.v1n, views.v2a}, 0)).projections;
          Tensor k;
          {
            NoGradGuard no_grad;
            k = encode(pair.config, pair.k, ops::concat({views.v1a, views.v2n}, 0)).projections;
            if (config.ema_placement == EmaPlacement::before_step) ema_update(pair);
          }
          loss = amimv_loss(ops::slice_rows(q, 0, batch), ops::slice_rows(q, batch, batch),
                            ops::slice_rows(k, 0, batch), ops::slice_rows(k, batch, batch), config.loss);
        } else {
          const auto views = build_two_view_batch(refs, stats, config.augment, batch_rng);
          const Tensor q = encode(pair.config, pair.q, views[0]).projections;
          Tensor k;
          {
            NoGradGuard no_grad;
            k = encode(pair.config, pair.k, views[1]).projections;
            if (config.ema_placement == EmaPlacement::before_step) ema_update(pair);
          }
          loss = nt_xent(q, k, config.loss.tau);
        }
      }
      const double value = loss.item();
      if (!std::isfinite(value))
        throw NumericError("non-finite loss " + std::to_string(value) + " at epoch " + std::to_string(epoch + 1) +
                           ", step " + std::to_string(b + 1) + " (global step " + std::to_string(step) + ")");
      for (auto& p : q_params) p.zero_grad();
      backward(loss, tape);
      last_lr = lr_at(step, schedule);
      sgd_step(q_params, sgd, last_lr);
      if (config.ema_placement == EmaPlacement::after_step) ema_update(pair);
      loss_sum += value;
      ++step;
    }

    EpochLog entry;
    entry.epoch = epoch + 1;
    entry.mean_loss = loss_sum / static_cast<double>(per_epoch);
    entry.lr = last_lr;
    if (monitor_count >= 2) {
      const auto [left, right] = positive_pairs(config, pair, monitor_refs, stats, monitor_rng);
      const auto au = alignment_uniformity(left, right);
      entry.alignment = au.alignment;
      entry.uniformity = au.uniformity;
    }
    result.log.push_back(entry);
    if (on_epoch) on_epoch(entry);
  }
  result.steps = step;

  if (!config.output.empty()) {
    const std::filesystem::path out(config.output);
    std::filesystem::create_directories(out);
    write_text_atomic(out / "log.csv", format_log_csv(result.log));
    save_checkpoint(out, pair, {step, config.augment.crop_output, std::string(mode_name(config.mode))});
    nlohmann::json run = config;
    write_text_atomic(out / "run.json", run.dump(2) + "\n");
  }
  return result;
}

}  // namespace amimv
