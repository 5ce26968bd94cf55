#pragma once

#include <fstream>
#include <optional>
#include <set>
#include <string>

#include <nlohmann/json.hpp>

#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/train.hpp"

namespace voxseg {

struct RunConfig {
  std::uint64_t seed = 0;
  std::string output_dir = "out";
  int jobs = 1;

  TrainConfig train;  // holds loss, augment and model sub-configs
  bool augment_enabled_set = false;  // whether the config file pinned augment.enabled

  PhantomConfig phantom;
  int phantom_count = 20;

  MetricConfig metrics;

  std::optional<Shape3> crop_target;
  bool normalize_after_crop = true;

  int ensemble_reference = 0;
  bool ensemble_probability_mean = false;
};

namespace detail {

inline void check_keys(const json& j, const std::set<std::string>& allowed,
                       const std::string& where) {
  if (!j.is_object()) throw ConfigError(where + " must be a JSON object");
  for (auto it = j.begin(); it != j.end(); ++it)
    if (!allowed.count(it.key()))
      throw ConfigError("unknown key '" + where + "." + it.key() + "'");
}

template <class T>
inline void get_if(const json& j, const char* key, T& out) {
  if (j.contains(key)) out = j.at(key).get<T>();
}

inline void get_shape(const json& j, const char* key, Shape3& out) {
  if (!j.contains(key)) return;
  const auto v = j.at(key).get<std::vector<int>>();
  if (v.size() != 3) throw ConfigError(std::string(key) + " must have 3 components");
  out = {v[0], v[1], v[2]};
}

inline void parse_loss(const json& j, LossConfig& cfg) {
  check_keys(j,
             {"lambda_dice", "lambda_focal", "gamma", "alpha", "dice_smooth", "class_weights",
              "focal_reduction"},
             "loss");
  get_if(j, "lambda_dice", cfg.lambda_dice);
  get_if(j, "lambda_focal", cfg.lambda_focal);
  get_if(j, "gamma", cfg.gamma);
  get_if(j, "alpha", cfg.alpha);
  get_if(j, "dice_smooth", cfg.dice_smooth);
  if (j.contains("class_weights")) {
    const auto v = j.at("class_weights").get<std::vector<double>>();
    if (v.size() != 4) throw ConfigError("loss.class_weights must have 4 entries");
    cfg.class_weights = std::array<double, 4>{v[0], v[1], v[2], v[3]};
  }
  if (j.contains("focal_reduction")) {
    const auto s = j.at("focal_reduction").get<std::string>();
    if (s == "mean_voxels_classes")
      cfg.focal_reduction = FocalReduction::mean_voxels_classes;
    else if (s == "mean_voxels")
      cfg.focal_reduction = FocalReduction::mean_voxels;
    else
      throw ConfigError("loss.focal_reduction must be mean_voxels_classes or mean_voxels");
  }
}

inline void parse_augment(const json& j, AugmentPolicy& cfg, bool& enabled_set) {
  check_keys(j,
             {"enabled", "scale_range", "rotate_range_rad", "noise_std", "blur_sigma_range",
              "intensity_scale_range", "per_transform_prob", "active_until_epoch"},
             "augment");
  if (j.contains("enabled")) {
    cfg.enabled = j.at("enabled").get<bool>();
    enabled_set = true;
  }
  auto get_range = [&](const char* key, std::array<double, 2>& out) {
    if (!j.contains(key)) return;
    const auto v = j.at(key).get<std::vector<double>>();
    if (v.size() != 2) throw ConfigError(std::string("augment.") + key + " must have 2 entries");
    out = {v[0], v[1]};
  };
  get_range("scale_range", cfg.scale_range);
  get_range("blur_sigma_range", cfg.blur_sigma_range);
  get_range("intensity_scale_range", cfg.intensity_scale_range);
  get_if(j, "rotate_range_rad", cfg.rotate_range_rad);
  get_if(j, "noise_std", cfg.noise_std);
  get_if(j, "per_transform_prob", cfg.per_transform_prob);
  get_if(j, "active_until_epoch", cfg.active_until_epoch);
}

inline void parse_model(const json& j, NetworkSpec& spec) {
  if (j.contains("encoder_blocks")) {  // fully spelled-out spec (effective-config form)
    check_keys(j,
               {"kind", "in_channels", "out_channels", "init_filters", "encoder_blocks",
                "encoder_convs", "decoder_blocks", "decoder2_blocks", "dropout_p",
                "concat_skips", "gated_skips", "dual_decoder", "use_se", "se_reduction",
                "per_channel_alpha"},
               "model");
    spec = spec_from_json(j);
    return;
  }
  check_keys(j, {"kind", "init_filters", "dropout_p", "per_channel_alpha", "gated_skips"},
             "model");
  std::string kind = to_string(spec.kind);
  get_if(j, "kind", kind);
  int init_filters = j.contains("init_filters") ? j.at("init_filters").get<int>() : 16;
  double dropout = j.contains("dropout_p") ? j.at("dropout_p").get<double>() : -1.0;
  spec = make_spec(net_kind_from_string(kind), init_filters, dropout);
  get_if(j, "per_channel_alpha", spec.per_channel_alpha);
  get_if(j, "gated_skips", spec.gated_skips);  // ablation hook
}

inline void parse_train(const json& j, TrainConfig& cfg) {
  check_keys(j,
             {"learning_rate", "weight_decay", "amsgrad", "epochs", "batch_size", "beta1",
              "beta2", "adam_eps", "aux_loss_weight"},
             "train");
  get_if(j, "learning_rate", cfg.learning_rate);
  get_if(j, "weight_decay", cfg.weight_decay);
  get_if(j, "amsgrad", cfg.amsgrad);
  get_if(j, "epochs", cfg.epochs);
  get_if(j, "batch_size", cfg.batch_size);
  get_if(j, "beta1", cfg.beta1);
  get_if(j, "beta2", cfg.beta2);
  get_if(j, "adam_eps", cfg.adam_eps);
  get_if(j, "aux_loss_weight", cfg.aux_loss_weight);
}

inline void parse_phantom(const json& j, PhantomConfig& cfg, int& count) {
  check_keys(j,
             {"shape", "n_lesions", "radius_range", "rim_thickness", "edema_thickness",
              "noise_std", "count"},
             "phantom");
  get_shape(j, "shape", cfg.shape);
  if (j.contains("n_lesions")) {
    const auto v = j.at("n_lesions").get<std::vector<int>>();
    if (v.size() != 2) throw ConfigError("phantom.n_lesions must be [min, max]");
    cfg.n_lesions_min = v[0];
    cfg.n_lesions_max = v[1];
  }
  if (j.contains("radius_range")) {
    const auto v = j.at("radius_range").get<std::vector<double>>();
    if (v.size() != 2) throw ConfigError("phantom.radius_range must be [min, max]");
    cfg.radius_min = v[0];
    cfg.radius_max = v[1];
  }
  get_if(j, "rim_thickness", cfg.rim_thickness);
  get_if(j, "edema_thickness", cfg.edema_thickness);
  get_if(j, "noise_std", cfg.noise_std);
  get_if(j, "count", count);
}

inline void parse_metrics(const json& j, MetricConfig& cfg) {
  check_keys(j, {"connectivity", "dilation_iters", "hd95_penalty", "min_lesion_voxels"},
             "metrics");
  get_if(j, "connectivity", cfg.connectivity);
  get_if(j, "dilation_iters", cfg.dilation_iters);
  get_if(j, "hd95_penalty", cfg.hd95_penalty);
  get_if(j, "min_lesion_voxels", cfg.min_lesion_voxels);
}

}  // namespace detail

inline RunConfig parse_run_config(const json& j) {
  RunConfig cfg;
  detail::check_keys(j,
                     {"seed", "output_dir", "jobs", "train", "loss", "augment", "model",
                      "phantom", "metrics", "preprocess", "ensemble"},
                     "config");
  detail::get_if(j, "seed", cfg.seed);
  detail::get_if(j, "output_dir", cfg.output_dir);
  detail::get_if(j, "jobs", cfg.jobs);
  if (j.contains("train")) detail::parse_train(j.at("train"), cfg.train);
  if (j.contains("loss")) detail::parse_loss(j.at("loss"), cfg.train.loss);
  if (j.contains("augment"))
    detail::parse_augment(j.at("augment"), cfg.train.augment, cfg.augment_enabled_set);
  if (j.contains("model")) detail::parse_model(j.at("model"), cfg.train.model);
  if (j.contains("phantom")) detail::parse_phantom(j.at("phantom"), cfg.phantom, cfg.phantom_count);
  if (j.contains("metrics")) detail::parse_metrics(j.at("metrics"), cfg.metrics);
  if (j.contains("preprocess")) {
    const auto& p = j.at("preprocess");
    detail::check_keys(p, {"crop_target", "normalize_after_crop"}, "preprocess");
    if (p.contains("crop_target") && !p.at("crop_target").is_null()) {
      Shape3 t{};
      detail::get_shape(p, "crop_target", t);
      cfg.crop_target = t;
    }
    detail::get_if(p, "normalize_after_crop", cfg.normalize_after_crop);
  }
  if (j.contains("ensemble")) {
    const auto& e = j.at("ensemble");
    detail::check_keys(e, {"reference_index", "probability_mean"}, "ensemble");
    detail::get_if(e, "reference_index", cfg.ensemble_reference);
    detail::get_if(e, "probability_mean", cfg.ensemble_probability_mean);
  }
  cfg.train.seed = cfg.seed;
  cfg.phantom.seed = cfg.seed;
  return cfg;
}

inline RunConfig load_run_config(const std::string& path) {
  std::ifstream f(path);
  if (!f) throw ConfigError("cannot open config file " + path);
  json j;
  try {
    j = json::parse(f);
  } catch (const json::exception& e) {
    throw ConfigError("config parse error in " + path + ": " + e.what());
  }
  return parse_run_config(j);
}

// All defaults resolved; written alongside outputs for provenance.
inline json effective_config_json(const RunConfig& cfg) {
  json j;
  j["seed"] = cfg.seed;
  j["output_dir"] = cfg.output_dir;
  j["jobs"] = cfg.jobs;
  j["train"] = {{"learning_rate", cfg.train.learning_rate},
                {"weight_decay", cfg.train.weight_decay},
                {"amsgrad", cfg.train.amsgrad},
                {"epochs", cfg.train.epochs},
                {"batch_size", cfg.train.batch_size},
                {"beta1", cfg.train.beta1},
                {"beta2", cfg.train.beta2},
                {"adam_eps", cfg.train.adam_eps},
                {"aux_loss_weight", cfg.train.aux_loss_weight}};
  const auto& l = cfg.train.loss;
  j["loss"] = {{"lambda_dice", l.lambda_dice},
               {"lambda_focal", l.lambda_focal},
               {"gamma", l.gamma},
               {"alpha", l.alpha},
               {"dice_smooth", l.dice_smooth},
               {"focal_reduction", l.focal_reduction == FocalReduction::mean_voxels_classes
                                       ? "mean_voxels_classes"
                                       : "mean_voxels"}};
  if (l.class_weights)
    j["loss"]["class_weights"] = std::vector<double>(l.class_weights->begin(),
                                                     l.class_weights->end());
  const auto& a = cfg.train.augment;
  j["augment"] = {{"enabled", a.enabled},
                  {"scale_range", a.scale_range},
                  {"rotate_range_rad", a.rotate_range_rad},
                  {"noise_std", a.noise_std},
                  {"blur_sigma_range", a.blur_sigma_range},
                  {"intensity_scale_range", a.intensity_scale_range},
                  {"per_transform_prob", a.per_transform_prob},
                  {"active_until_epoch", a.active_until_epoch}};
  j["model"] = spec_to_json(cfg.train.model);
  j["phantom"] = {{"shape", cfg.phantom.shape},
                  {"n_lesions", {cfg.phantom.n_lesions_min, cfg.phantom.n_lesions_max}},
                  {"radius_range", {cfg.phantom.radius_min, cfg.phantom.radius_max}},
                  {"rim_thickness", cfg.phantom.rim_thickness},
                  {"edema_thickness", cfg.phantom.edema_thickness},
                  {"noise_std", cfg.phantom.noise_std},
                  {"count", cfg.phantom_count}};
  j["metrics"] = {{"connectivity", cfg.metrics.connectivity},
                  {"dilation_iters", cfg.metrics.dilation_iters},
                  {"hd95_penalty", cfg.metrics.hd95_penalty},
                  {"min_lesion_voxels", cfg.metrics.min_lesion_voxels}};
  j["preprocess"] = {{"normalize_after_crop", cfg.normalize_after_crop}};
  if (cfg.crop_target)
    j["preprocess"]["crop_target"] = *cfg.crop_target;
  else
    j["preprocess"]["crop_target"] = nullptr;
  j["ensemble"] = {{"reference_index", cfg.ensemble_reference},
                   {"probability_mean", cfg.ensemble_probability_mean}};
  return j;
}

}  // namespace voxseg
