#pragma once

#include <chrono>
#include <cstdio>
#include <cstring>
#include <fstream>
#include <string>
#include <vector>

#include <nlohmann/json.hpp>

#include "voxseg/losses.hpp"
#include "voxseg/nets.hpp"
#include "voxseg/nn.hpp"
#include "voxseg/optim.hpp"
#include "voxseg/preprocess.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

using json = nlohmann::json;

struct TrainConfig {
  double learning_rate = 5e-5;
  double weight_decay = 1e-3;
  bool amsgrad = true;
  int epochs = 20;
  int batch_size = 1;
  std::uint64_t seed = 0;
  double beta1 = 0.9;
  double beta2 = 0.999;
  double adam_eps = 1e-8;
  double aux_loss_weight = 0.0;  // per-decoder auxiliary losses (dual decoder only)
  LossConfig loss;
  AugmentPolicy augment;
  NetworkSpec model = make_segresnet_spec();

  void validate() const {
    // zero is allowed as a degenerate fixed-point probe
    if (learning_rate < 0) throw ConfigError("train: learning_rate must be >= 0");
    if (epochs < 1) throw ConfigError("train: epochs must be >= 1");
    if (batch_size < 1) throw ConfigError("train: batch_size must be >= 1");
    if (aux_loss_weight < 0) throw ConfigError("train: aux_loss_weight must be >= 0");
    loss.validate();
    augment.validate();
  }
};

struct StepRecord {
  std::int64_t step;
  int epoch;
  double loss;
  std::int64_t timestamp_ms;
};

struct TrainLog {
  std::vector<StepRecord> steps;
  std::vector<double> epoch_mean_loss;
  std::vector<double> epoch_seconds;
  std::uint64_t seed = 0;
  std::uint64_t config_hash = 0;

  void save_jsonl(const std::string& path) const {
    std::ofstream f(path);
    if (!f) throw IoError("cannot open " + path);
    for (const auto& r : steps) {
      json j{{"step", r.step}, {"epoch", r.epoch}, {"loss", r.loss}, {"ts_ms", r.timestamp_ms}};
      f << j.dump() << "\n";
    }
  }
};

struct Subject {
  std::string id;
  MultiModalVolume volume;  // preprocessed (normalized, cropped)
  LabelMask mask;
};

// ---------------------------------------------------------------------------
// network spec <-> json (shared by checkpoint and config)
// ---------------------------------------------------------------------------

inline json spec_to_json(const NetworkSpec& s) {
  return json{{"kind", to_string(s.kind)},
              {"in_channels", s.in_channels},
              {"out_channels", s.out_channels},
              {"init_filters", s.init_filters},
              {"encoder_blocks", s.encoder_blocks},
              {"encoder_convs", s.encoder_convs},
              {"decoder_blocks", s.decoder_blocks},
              {"decoder2_blocks", s.decoder2_blocks},
              {"dropout_p", s.dropout_p},
              {"concat_skips", s.concat_skips},
              {"gated_skips", s.gated_skips},
              {"dual_decoder", s.dual_decoder},
              {"use_se", s.use_se},
              {"se_reduction", s.se_reduction},
              {"per_channel_alpha", s.per_channel_alpha}};
}

inline NetworkSpec spec_from_json(const json& j) {
  NetworkSpec s;
  s.kind = net_kind_from_string(j.at("kind").get<std::string>());
  s.in_channels = j.at("in_channels").get<int>();
  s.out_channels = j.at("out_channels").get<int>();
  s.init_filters = j.at("init_filters").get<int>();
  s.encoder_blocks = j.at("encoder_blocks").get<std::vector<int>>();
  s.encoder_convs = j.at("encoder_convs").get<std::vector<int>>();
  s.decoder_blocks = j.at("decoder_blocks").get<std::vector<int>>();
  s.decoder2_blocks = j.at("decoder2_blocks").get<std::vector<int>>();
  s.dropout_p = j.at("dropout_p").get<double>();
  s.concat_skips = j.at("concat_skips").get<bool>();
  s.gated_skips = j.at("gated_skips").get<bool>();
  s.dual_decoder = j.at("dual_decoder").get<bool>();
  s.use_se = j.at("use_se").get<bool>();
  s.se_reduction = j.at("se_reduction").get<int>();
  s.per_channel_alpha = j.at("per_channel_alpha").get<bool>();
  return s;
}

// ---------------------------------------------------------------------------
// checkpoints: magic, version, json header (spec + seed + manifest), f32 blobs
// ---------------------------------------------------------------------------

inline constexpr char kCheckpointMagic[8] = {'V', 'X', 'S', 'G', 'C', 'K', 'P', 'T'};
inline constexpr std::uint32_t kCheckpointVersion = 1;

inline void save_checkpoint(Network<float>& net, const std::string& path) {
  json manifest = json::array();
  std::vector<const Tensor<float>*> params;
  net.visit_params([&](const std::string& name, Tensor<float>& p, Tensor<float>&) {
    std::vector<int> shape(p.dims.begin(), p.dims.begin() + p.rank);
    manifest.push_back(json{{"name", name}, {"shape", shape}});
    params.push_back(&p);
  });
  json header{{"format_version", kCheckpointVersion},
              {"spec", spec_to_json(net.spec())},
              {"seed", net.seed()},
              {"spec_hash", net.spec().hash()},
              {"params", manifest}};
  const std::string hs = header.dump();

  std::ofstream f(path, std::ios::binary);
  if (!f) throw IoError("cannot open " + path);
  f.write(kCheckpointMagic, 8);
  const std::uint32_t ver = kCheckpointVersion, reserved = 0;
  f.write(reinterpret_cast<const char*>(&ver), 4);
  f.write(reinterpret_cast<const char*>(&reserved), 4);
  const std::uint64_t hlen = hs.size();
  f.write(reinterpret_cast<const char*>(&hlen), 8);
  f.write(hs.data(), std::streamsize(hs.size()));
  for (const auto* p : params)
    f.write(reinterpret_cast<const char*>(p->ptr()),
            std::streamsize(p->data.size() * sizeof(float)));
  if (!f) throw IoError("short write to " + path);
}

inline Network<float> load_checkpoint(const std::string& path,
                                      const NetworkSpec* expected = nullptr) {
  std::ifstream f(path, std::ios::binary);
  if (!f) throw UnreadableFile(path);
  char magic[8];
  std::uint32_t ver = 0, reserved = 0;
  std::uint64_t hlen = 0;
  f.read(magic, 8);
  f.read(reinterpret_cast<char*>(&ver), 4);
  f.read(reinterpret_cast<char*>(&reserved), 4);
  f.read(reinterpret_cast<char*>(&hlen), 8);
  if (!f || std::memcmp(magic, kCheckpointMagic, 8) != 0)
    throw CorruptFile(path + " (bad checkpoint magic)");
  if (ver != kCheckpointVersion)
    throw CorruptFile(path + " (unsupported checkpoint version)");
  if (hlen > (1ull << 24)) throw CorruptFile(path + " (implausible header size)");
  std::string hs(hlen, '\0');
  f.read(hs.data(), std::streamsize(hlen));
  if (!f) throw CorruptFile(path + " (truncated header)");
  json header;
  try {
    header = json::parse(hs);
  } catch (const json::exception&) {
    throw CorruptFile(path + " (unparseable header)");
  }

  const NetworkSpec spec = spec_from_json(header.at("spec"));
  if (header.at("spec_hash").get<std::uint64_t>() != spec.hash())
    throw CorruptFile(path + " (spec hash does not match embedded spec)");
  if (expected && expected->hash() != spec.hash())
    throw SpecHashMismatch("checkpoint holds " + spec.canonical() + " but " +
                           expected->canonical() + " was requested");

  Network<float> net(spec, header.at("seed").get<std::uint64_t>());
  std::size_t idx = 0;
  const auto& manifest = header.at("params");
  net.visit_params([&](const std::string& name, Tensor<float>& p, Tensor<float>&) {
    if (idx >= manifest.size()) throw CorruptFile(path + " (parameter manifest too short)");
    const auto& entry = manifest[idx];
    if (entry.at("name").get<std::string>() != name)
      throw CorruptFile(path + " (parameter order mismatch at " + name + ")");
    std::int64_t n = 1;
    for (int d : entry.at("shape").get<std::vector<int>>()) n *= d;
    if (n != p.numel()) throw CorruptFile(path + " (parameter shape mismatch at " + name + ")");
    f.read(reinterpret_cast<char*>(p.ptr()), std::streamsize(p.data.size() * sizeof(float)));
    if (!f) throw CorruptFile(path + " (truncated parameter data at " + name + ")");
    ++idx;
  });
  if (idx != manifest.size()) throw CorruptFile(path + " (parameter manifest too long)");
  return net;
}

// ---------------------------------------------------------------------------
// training loop: AdamW steps over (volume, one-hot mask) pairs
// ---------------------------------------------------------------------------

inline std::int64_t now_ms() {
  return std::chrono::duration_cast<std::chrono::milliseconds>(
             std::chrono::system_clock::now().time_since_epoch())
      .count();
}

inline std::pair<Network<float>, TrainLog> train_model(const TrainConfig& cfg,
                                                       const std::vector<Subject>& dataset,
                                                       bool verbose = false) {
  cfg.validate();
  if (dataset.empty()) throw EmptyDataset("train_model requires at least one subject");

  Network<float> net(cfg.model, cfg.seed);
  AdamWConfig ocfg;
  ocfg.lr = cfg.learning_rate;
  ocfg.weight_decay = cfg.weight_decay;
  ocfg.amsgrad = cfg.amsgrad;
  ocfg.beta1 = cfg.beta1;
  ocfg.beta2 = cfg.beta2;
  ocfg.eps = cfg.adam_eps;
  AdamW<float> opt(ocfg);

  std::vector<OneHotMask> targets;
  targets.reserve(dataset.size());
  for (const auto& s : dataset) targets.push_back(one_hot_encode(s.mask));

  TrainLog log;
  log.seed = cfg.seed;
  log.config_hash = cfg.model.hash();

  std::int64_t step = 0;
  int in_batch = 0;
  for (int epoch = 0; epoch < cfg.epochs; ++epoch) {
    const auto epoch_start = std::chrono::steady_clock::now();
    double epoch_loss = 0.0;
    std::int64_t epoch_steps = 0;
    for (std::size_t si = 0; si < dataset.size(); ++si) {
      const MultiModalVolume* vol = &dataset[si].volume;
      const OneHotMask* target = &targets[si];
      MultiModalVolume aug_vol;
      OneHotMask aug_target;
      if (cfg.augment.enabled && epoch < cfg.augment.active_until_epoch) {
        const std::uint64_t aseed =
            Rng::derive(cfg.seed, Rng::tag("augment") ^ (std::uint64_t(step) * 2654435761ull + si));
        std::tie(aug_vol, aug_target) = augment(*vol, *target, cfg.augment, epoch, aseed);
        vol = &aug_vol;
        target = &aug_target;
      }

      Tensor<float> logits = net.forward(vol->data, /*train=*/true);
      Tensor<float> probs = nn::softmax_channels(logits);
      Tensor<float> gprobs;
      gprobs.resize_like(probs);
      float loss = combined_loss(probs, target->data, cfg.loss, &gprobs);

      // optional auxiliary losses on the pre-fusion decoder heads
      std::array<Tensor<float>, 2> aux_glogits;
      std::array<const Tensor<float>*, 2> aux_ptr{nullptr, nullptr};
      if (cfg.aux_loss_weight > 0.0 && cfg.model.dual_decoder) {
        for (int d = 0; d < 2; ++d) {
          const Tensor<float>& head = net.head_outputs()[std::size_t(d)];
          Tensor<float> hprobs = nn::softmax_channels(head);
          Tensor<float> ghprobs;
          ghprobs.resize_like(hprobs);
          loss += float(cfg.aux_loss_weight) *
                  combined_loss(hprobs, target->data, cfg.loss, &ghprobs);
          for (auto& v : ghprobs.data)
            v *= float(cfg.aux_loss_weight) / float(cfg.batch_size);
          aux_glogits[std::size_t(d)] = nn::softmax_channels_backward(hprobs, ghprobs);
          aux_ptr[std::size_t(d)] = &aux_glogits[std::size_t(d)];
        }
      }

      if (!std::isfinite(double(loss)))
        throw NonFiniteLoss("at step " + std::to_string(step));
      if (cfg.batch_size > 1)
        for (auto& v : gprobs.data) v /= float(cfg.batch_size);
      Tensor<float> glogits = nn::softmax_channels_backward(probs, gprobs);
      net.backward(glogits, aux_ptr);

      ++in_batch;
      if (in_batch == cfg.batch_size || si + 1 == dataset.size()) {
        opt.step(net);
        net.zero_grads();
        in_batch = 0;
      }

      log.steps.push_back({step, epoch, double(loss), now_ms()});
      epoch_loss += double(loss);
      ++epoch_steps;
      ++step;
    }
    log.epoch_mean_loss.push_back(epoch_loss / double(epoch_steps));
    log.epoch_seconds.push_back(
        std::chrono::duration<double>(std::chrono::steady_clock::now() - epoch_start).count());
    if (verbose)
      std::fprintf(stderr, "[train] %s epoch %d/%d mean_loss=%.6f (%.1fs)\n",
                   to_string(cfg.model.kind), epoch + 1, cfg.epochs,
                   log.epoch_mean_loss.back(), log.epoch_seconds.back());
  }
  return {std::move(net), std::move(log)};
}

// eval-mode forward + softmax + argmax; spatial meta copied from the input
inline LabelMask predict_subject(Network<float>& net, const MultiModalVolume& vol) {
  Tensor<float> logits = net.forward(vol.data, /*train=*/false);
  Tensor<float> probs = nn::softmax_channels(logits);
  LabelMask mask = one_hot_decode(probs);
  mask.meta = vol.meta;
  return mask;
}

// softmax probabilities, for probability-mean ensemble fusion
inline Tensor<float> predict_probs(Network<float>& net, const MultiModalVolume& vol) {
  Tensor<float> logits = net.forward(vol.data, /*train=*/false);
  return nn::softmax_channels(logits);
}

}  // namespace voxseg
