// voxseg command-line driver: phantom generation, preprocessing, training,
// prediction, ensembling and evaluation, plus an end-to-end pipeline mode.

#include <CLI11.hpp>

#include <algorithm>
#include <atomic>
#include <chrono>
#include <cstdio>
#include <filesystem>
#include <fstream>
#include <iostream>
#include <optional>
#include <string>
#include <thread>
#include <vector>

#include "voxseg/config.hpp"
#include "voxseg/ensemble.hpp"
#include "voxseg/metrics.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/train.hpp"

namespace fs = std::filesystem;
using namespace voxseg;

namespace {

void log_line(const std::string& msg) { std::cerr << "[voxseg] " << msg << "\n"; }

std::vector<std::string> list_subject_dirs(const std::string& cohort_dir) {
  std::vector<std::string> dirs;
  if (!fs::is_directory(cohort_dir)) throw UnreadableFile(cohort_dir + " is not a directory");
  for (const auto& e : fs::directory_iterator(cohort_dir)) {
    if (!e.is_directory()) continue;
    const std::string id = e.path().filename().string();
    if (!find_volume_file(e.path(), id + "-" + kModalitySuffix[0]).empty())
      dirs.push_back(e.path().string());
  }
  std::sort(dirs.begin(), dirs.end());
  if (dirs.empty()) throw UnreadableFile("no subject directories under " + cohort_dir);
  return dirs;
}

void ensure_output_layout(const std::string& out_dir) {
  for (const char* sub : {"checkpoints", "predictions", "reports", "configs"})
    fs::create_directories(fs::path(out_dir) / sub);
}

void write_effective_config(const RunConfig& cfg, const std::string& out_dir) {
  fs::create_directories(fs::path(out_dir) / "configs");
  std::ofstream f(fs::path(out_dir) / "configs" / "effective.json");
  f << effective_config_json(cfg).dump(2) << "\n";
}

MultiModalVolume preprocess_volume(const MultiModalVolume& raw, const RunConfig& cfg) {
  if (!cfg.crop_target) return zscore_normalize(raw);
  if (cfg.normalize_after_crop) return zscore_normalize(center_crop(raw, *cfg.crop_target));
  return center_crop(zscore_normalize(raw), *cfg.crop_target);
}

Subject load_training_subject(const std::string& dir, const RunConfig& cfg) {
  auto [vol, mask] = load_subject_dir(dir, /*require_mask=*/true);
  Subject s;
  s.id = fs::path(dir).filename().string();
  s.volume = preprocess_volume(vol, cfg);
  s.mask = cfg.crop_target ? center_crop(*mask, *cfg.crop_target) : std::move(*mask);
  return s;
}

// fixed-order parallel map over subjects; deterministic regardless of jobs
template <class Fn>
void parallel_subjects(std::size_t n, int jobs, Fn&& fn) {
  jobs = std::max(1, jobs);
  if (jobs == 1) {
    for (std::size_t i = 0; i < n; ++i) fn(i);
    return;
  }
  std::atomic<std::size_t> next{0};
  std::vector<std::thread> pool;
  std::vector<std::exception_ptr> errors(static_cast<std::size_t>(jobs));
  for (int t = 0; t < jobs; ++t)
    pool.emplace_back([&, t] {
      try {
        for (std::size_t i = next++; i < n; i = next++) fn(i);
      } catch (...) {
        errors[std::size_t(t)] = std::current_exception();
      }
    });
  for (auto& th : pool) th.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
}

// ---------------------------------------------------------------------------
// subcommand bodies
// ---------------------------------------------------------------------------

void cmd_phantom_gen(const RunConfig& cfg, const std::string& out_dir) {
  log_line("generating " + std::to_string(cfg.phantom_count) + " phantoms under " + out_dir);
  generate_cohort(cfg.phantom_count, cfg.seed, cfg.phantom, out_dir);
}

void cmd_preprocess(const RunConfig& cfg, const std::string& in_dir, const std::string& out_dir) {
  const auto dirs = list_subject_dirs(in_dir);
  fs::create_directories(out_dir);
  parallel_subjects(dirs.size(), cfg.jobs, [&](std::size_t i) {
    const std::string id = fs::path(dirs[i]).filename().string();
    auto [raw, mask] = load_subject_dir(dirs[i], /*require_mask=*/false);
    MultiModalVolume vol = preprocess_volume(raw, cfg);
    const fs::path dir = fs::path(out_dir) / id;
    fs::create_directories(dir);
    const Shape3 shape = vol.shape();
    const std::int64_t sp = numel(shape);
    for (int ch = 0; ch < kNumModalities; ++ch)
      write_nifti_f32((dir / (id + "-" + kModalitySuffix[std::size_t(ch)] + ".nii.gz")).string(),
                      shape, vol.meta.affine, vol.data.ptr() + std::size_t(std::int64_t(ch) * sp));
    if (mask) {
      LabelMask m = cfg.crop_target ? center_crop(*mask, *cfg.crop_target) : *mask;
      // cropped training masks are written raw (not a submission artifact)
      write_nifti_u8((dir / (id + "-seg.nii.gz")).string(), m.shape, m.meta.affine,
                     m.data.data());
    }
    json meta{{"original_shape", vol.meta.original_shape},
              {"crop_offset", vol.meta.crop_offset ? json(*vol.meta.crop_offset) : json()}};
    std::ofstream mf(dir / (id + "-meta.json"));
    mf << meta.dump(2) << "\n";
  });
  log_line("preprocessed " + std::to_string(dirs.size()) + " subjects into " + out_dir);
}

std::string cmd_train(RunConfig cfg, const std::string& data_dir, const std::string& out_dir,
                      bool verbose) {
  ensure_output_layout(out_dir);
  const auto dirs = list_subject_dirs(data_dir);
  std::vector<Subject> dataset;
  dataset.reserve(dirs.size());
  for (const auto& d : dirs) dataset.push_back(load_training_subject(d, cfg));

  // augmentation is wired into the dual-decoder model only, unless pinned by config
  if (!cfg.augment_enabled_set)
    cfg.train.augment.enabled = cfg.train.model.kind == NetKind::ddunet;

  const std::string kind = to_string(cfg.train.model.kind);
  log_line("training " + kind + " on " + std::to_string(dataset.size()) + " subjects, " +
           std::to_string(cfg.train.epochs) + " epochs");
  auto [net, tlog] = train_model(cfg.train, dataset, verbose);

  const std::string ckpt = (fs::path(out_dir) / "checkpoints" / (kind + ".ckpt")).string();
  save_checkpoint(net, ckpt);
  tlog.save_jsonl((fs::path(out_dir) / "reports" / (kind + "_train.jsonl")).string());
  write_effective_config(cfg, out_dir);
  log_line("checkpoint written to " + ckpt);
  return ckpt;
}

void cmd_predict(const RunConfig& cfg, const std::string& checkpoint,
                 const std::string& data_dir, const std::string& out_dir, bool preprocessed) {
  Network<float> net = load_checkpoint(checkpoint);
  const auto dirs = list_subject_dirs(data_dir);
  fs::create_directories(out_dir);
  parallel_subjects(dirs.size(), cfg.jobs, [&](std::size_t i) {
    const std::string id = fs::path(dirs[i]).filename().string();
    auto [raw, mask] = load_subject_dir(dirs[i], /*require_mask=*/false);
    MultiModalVolume vol = preprocessed ? std::move(raw) : preprocess_volume(raw, cfg);
    LabelMask pred = predict_subject(net, vol);
    if (pred.meta.crop_offset) pred = pad_to_original(pred);
    write_mask(pred, (fs::path(out_dir) / (id + "-seg.nii.gz")).string());
  });
  log_line("predictions for " + std::to_string(dirs.size()) + " subjects in " + out_dir);
}

void cmd_ensemble_files(const std::vector<std::string>& mask_paths,
                        const std::string& subject_volume, int reference_index,
                        const std::string& out_path) {
  EnsembleInput inp;
  inp.reference_index = reference_index;
  for (int i = 0; i < 3; ++i) inp.members[std::size_t(i)] = read_mask(mask_paths[std::size_t(i)]);
  LabelMask fused = majority_vote(inp);
  if (!subject_volume.empty()) {
    NiftiVolume ref = read_nifti(subject_volume);
    if (ref.shape != fused.shape)
      throw GridMismatch("reference volume grid differs from the fused mask");
    fused.meta.affine = ref.affine;
    fused.meta.original_shape = ref.shape;
  }
  write_mask(fused, out_path);
  log_line("fused mask written to " + out_path);
}

CohortReport cmd_evaluate(const RunConfig& cfg, const std::string& pred_dir,
                          const std::string& gt_dir, const std::string& report_path) {
  const auto gt_dirs = list_subject_dirs(gt_dir);
  std::vector<std::pair<LabelMask, LabelMask>> pairs(gt_dirs.size());
  std::vector<std::string> ids(gt_dirs.size());
  parallel_subjects(gt_dirs.size(), cfg.jobs, [&](std::size_t i) {
    const std::string id = fs::path(gt_dirs[i]).filename().string();
    const std::string gt_path = find_volume_file(gt_dirs[i], id + "-seg");
    if (gt_path.empty()) throw UnreadableFile("missing ground truth for " + id);
    std::string pred_path = find_volume_file(pred_dir, id + "-seg");
    if (pred_path.empty()) pred_path = find_volume_file(pred_dir, id);
    if (pred_path.empty()) throw UnreadableFile("missing prediction for " + id);
    pairs[i] = {read_mask(pred_path), read_mask(gt_path)};
    ids[i] = id;
  });
  // per-subject scoring is pure; merge in id order for determinism
  CohortReport report = evaluate_cohort(pairs, cfg.metrics, ids);
  const std::string csv = report_csv(report);
  if (!report_path.empty()) {
    fs::create_directories(fs::path(report_path).parent_path().empty()
                               ? fs::path(".")
                               : fs::path(report_path).parent_path());
    std::ofstream f(report_path);
    f << csv;
  }
  std::cout << csv;
  return report;
}

// Summary table mirroring the published layout: one row per model plus the
// ensemble, six metric columns.
void write_summary(const std::vector<std::pair<std::string, CohortReport>>& reports,
                   const std::string& path, bool median) {
  std::ofstream f(path);
  f << "model,dice_et,dice_tc,dice_wt,hd95_et,hd95_tc,hd95_wt\n";
  char buf[256];
  for (const auto& [name, rep] : reports) {
    const SubjectScores& s = median ? rep.median : rep.mean;
    std::snprintf(buf, sizeof(buf), "%s,%.6f,%.6f,%.6f,%.6f,%.6f,%.6f\n", name.c_str(),
                  s.dice[0], s.dice[1], s.dice[2], s.hd95[0], s.hd95[1], s.hd95[2]);
    f << buf;
  }
}

int cmd_pipeline(RunConfig cfg, const std::string& out_dir, bool verbose) {
  const auto t0 = std::chrono::steady_clock::now();
  ensure_output_layout(out_dir);
  const std::string phantom_dir = (fs::path(out_dir) / "phantoms").string();
  cmd_phantom_gen(cfg, phantom_dir);

  const auto dirs = list_subject_dirs(phantom_dir);
  std::vector<Subject> dataset;
  for (const auto& d : dirs) dataset.push_back(load_training_subject(d, cfg));

  const std::array<NetKind, 3> kinds{NetKind::segresnet, NetKind::attn_resunet,
                                     NetKind::ddunet};
  std::vector<Network<float>> nets;
  std::vector<std::pair<std::string, CohortReport>> mean_rows;
  for (NetKind kind : kinds) {
    RunConfig mcfg = cfg;
    mcfg.train.model = make_spec(kind, cfg.train.model.init_filters);
    if (!cfg.augment_enabled_set)
      mcfg.train.augment.enabled = kind == NetKind::ddunet;
    log_line(std::string("pipeline: training ") + to_string(kind));
    auto [net, tlog] = train_model(mcfg.train, dataset, verbose);
    save_checkpoint(net, (fs::path(out_dir) / "checkpoints" /
                          (std::string(to_string(kind)) + ".ckpt")).string());
    tlog.save_jsonl((fs::path(out_dir) / "reports" /
                     (std::string(to_string(kind)) + "_train.jsonl")).string());
    nets.push_back(std::move(net));
  }

  // per-model and ensemble predictions
  std::vector<std::vector<LabelMask>> preds(4);
  for (auto& p : preds) p.resize(dataset.size());
  parallel_subjects(dataset.size(), cfg.jobs, [&](std::size_t i) {
    EnsembleInput inp;
    inp.reference_index = cfg.ensemble_reference;
    for (int m = 0; m < 3; ++m) {
      LabelMask pred = predict_subject(nets[std::size_t(m)], dataset[i].volume);
      inp.members[std::size_t(m)] = pred;
      preds[std::size_t(m)][i] =
          pred.meta.crop_offset ? pad_to_original(pred) : std::move(pred);
    }
    LabelMask fused = cfg.ensemble_probability_mean
                          ? probability_mean_fusion(
                                {&nets[0], &nets[1], &nets[2]}, dataset[i].volume)
                          : majority_vote(inp);
    preds[3][i] = fused.meta.crop_offset ? pad_to_original(fused) : std::move(fused);
  });

  const std::array<std::string, 4> names{"segresnet", "attn_resunet", "ddunet", "ensemble"};
  std::vector<std::pair<LabelMask, LabelMask>> gt_pairs;
  for (int m = 0; m < 4; ++m) {
    const fs::path pdir = fs::path(out_dir) / "predictions" / names[std::size_t(m)];
    fs::create_directories(pdir);
    std::vector<std::pair<LabelMask, LabelMask>> pairs;
    std::vector<std::string> ids;
    for (std::size_t i = 0; i < dataset.size(); ++i) {
      write_mask(preds[std::size_t(m)][i],
                 (pdir / (dataset[i].id + "-seg.nii.gz")).string());
      auto [raw, gt] = load_subject_dir(dirs[i], /*require_mask=*/true);
      pairs.push_back({preds[std::size_t(m)][i], std::move(*gt)});
      ids.push_back(dataset[i].id);
    }
    CohortReport rep = evaluate_cohort(pairs, cfg.metrics, ids);
    std::ofstream f(fs::path(out_dir) / "reports" / (names[std::size_t(m)] + ".csv"));
    f << report_csv(rep);
    mean_rows.push_back({names[std::size_t(m)], std::move(rep)});
  }
  write_summary(mean_rows, (fs::path(out_dir) / "reports" / "summary_mean.csv").string(), false);
  write_summary(mean_rows, (fs::path(out_dir) / "reports" / "summary_median.csv").string(), true);
  write_effective_config(cfg, out_dir);

  const double secs = std::chrono::duration<double>(std::chrono::steady_clock::now() - t0).count();
  const auto& ens = mean_rows[3].second.mean;
  log_line("pipeline finished in " + std::to_string(secs) + "s; ensemble mean dice " +
           "ET=" + std::to_string(ens.dice[0]) + " TC=" + std::to_string(ens.dice[1]) +
           " WT=" + std::to_string(ens.dice[2]));
  return 0;
}

}  // namespace

int main(int argc, char** argv) {
  CLI::App app{"voxseg: volumetric brain-tumor segmentation toolkit", "voxseg"};
  app.require_subcommand(1);
  app.fallthrough();  // global flags may follow the subcommand

  std::string config_path;
  app.add_option("--config", config_path, "JSON config file")->envname("VOXSEG_CONFIG");

  // shared overrides (CLI flag > config file > default)
  std::optional<std::uint64_t> seed_flag;
  std::optional<std::string> out_flag;
  std::optional<int> jobs_flag;
  app.add_option("--seed", seed_flag, "top-level RNG seed");
  app.add_option("--out", out_flag, "output directory");
  app.add_option("--jobs", jobs_flag, "per-subject parallelism (default 1)");

  auto* gen = app.add_subcommand("phantom-gen", "generate a synthetic phantom cohort");
  std::optional<int> count_flag;
  gen->add_option("--count", count_flag, "number of phantoms");

  auto* prep = app.add_subcommand("preprocess", "crop and normalize a cohort");
  std::string prep_in, prep_out;
  prep->add_option("--in", prep_in, "input cohort directory")->required();
  prep->add_option("--out-dir", prep_out, "output cohort directory")->required();
  std::vector<int> crop_flag;
  prep->add_option("--crop", crop_flag, "crop target, e.g. --crop 160 160 128")->expected(3);

  auto* train_cmd = app.add_subcommand("train", "train one model");
  std::string train_data, train_model_kind = "segresnet";
  std::optional<int> epochs_flag, filters_flag;
  std::optional<double> lr_flag;
  bool verbose = false;
  train_cmd->add_option("--data", train_data, "training cohort directory")->required();
  train_cmd->add_option("--model", train_model_kind,
                        "model kind: segresnet | attn_resunet | ddunet");
  train_cmd->add_option("--epochs", epochs_flag, "override epoch count");
  train_cmd->add_option("--lr", lr_flag, "override learning rate");
  train_cmd->add_option("--init-filters", filters_flag, "override initial filters");
  train_cmd->add_flag("--verbose", verbose, "log per-epoch losses");

  auto* predict_cmd = app.add_subcommand("predict", "run single-model inference");
  std::string pred_ckpt, pred_data, pred_out;
  bool preprocessed = false;
  predict_cmd->add_option("--checkpoint", pred_ckpt, "checkpoint file")->required();
  predict_cmd->add_option("--data", pred_data, "cohort directory")->required();
  predict_cmd->add_option("--out-dir", pred_out, "prediction output directory")->required();
  predict_cmd->add_flag("--preprocessed", preprocessed,
                        "input volumes are already cropped and normalized");

  auto* ens_cmd = app.add_subcommand("ensemble", "majority-vote three mask files");
  std::vector<std::string> ens_masks;
  std::string ens_subject, ens_out;
  std::optional<int> ref_flag;
  ens_cmd->add_option("--mask", ens_masks, "member mask file (exactly three)")
      ->expected(3)
      ->required();
  ens_cmd->add_option("--subject-volume", ens_subject,
                      "reference subject volume supplying the output header");
  ens_cmd->add_option("--out-file", ens_out, "fused mask output path")->required();
  ens_cmd->add_option("--reference-index", ref_flag, "tie-break member (default 0)");

  auto* eval_cmd = app.add_subcommand("evaluate", "lesion-wise Dice/HD95 report");
  std::string eval_pred, eval_gt, eval_report;
  eval_cmd->add_option("--pred", eval_pred, "prediction directory")->required();
  eval_cmd->add_option("--gt", eval_gt, "ground-truth cohort directory")->required();
  eval_cmd->add_option("--report", eval_report, "report CSV path");

  auto* pipe_cmd = app.add_subcommand("pipeline",
                                      "phantoms -> train x3 -> predict -> ensemble -> evaluate");
  pipe_cmd->add_option("--count", count_flag, "number of phantoms");
  pipe_cmd->add_option("--epochs", epochs_flag, "epochs per model");
  pipe_cmd->add_option("--lr", lr_flag, "learning rate");
  pipe_cmd->add_option("--init-filters", filters_flag, "initial filters per model");
  pipe_cmd->add_flag("--verbose", verbose, "log per-epoch losses");

  try {
    app.parse(argc, argv);
  } catch (const CLI::CallForHelp& e) {
    return app.exit(e);
  } catch (const CLI::ParseError& e) {
    app.exit(e);
    return 1;  // bad invocation counts as a config error
  }

  try {
    RunConfig cfg;
    if (!config_path.empty()) cfg = load_run_config(config_path);
    if (app.got_subcommand(pipe_cmd) && config_path.empty()) {
      // desk-scale pipeline defaults: tiny models, small cohort, short schedule
      cfg.phantom.shape = {48, 48, 48};
      cfg.phantom.radius_max = 7.0;
      cfg.phantom.n_lesions_max = 2;
      cfg.train.model.init_filters = 8;
      cfg.train.epochs = 5;
      cfg.train.learning_rate = 1e-3;
      cfg.phantom_count = 20;
    }
    if (seed_flag) {
      cfg.seed = *seed_flag;
      cfg.train.seed = *seed_flag;
      cfg.phantom.seed = *seed_flag;
    }
    if (out_flag) cfg.output_dir = *out_flag;
    if (jobs_flag) cfg.jobs = *jobs_flag;
    if (count_flag) cfg.phantom_count = *count_flag;
    if (epochs_flag) cfg.train.epochs = *epochs_flag;
    if (lr_flag) cfg.train.learning_rate = *lr_flag;
    if (filters_flag)
      cfg.train.model = make_spec(cfg.train.model.kind, *filters_flag);

    if (app.got_subcommand(gen)) {
      cmd_phantom_gen(cfg, (fs::path(cfg.output_dir) / "phantoms").string());
      write_effective_config(cfg, cfg.output_dir);
    } else if (app.got_subcommand(prep)) {
      if (crop_flag.size() == 3) cfg.crop_target = Shape3{crop_flag[0], crop_flag[1], crop_flag[2]};
      cmd_preprocess(cfg, prep_in, prep_out);
      write_effective_config(cfg, prep_out);
    } else if (app.got_subcommand(train_cmd)) {
      cfg.train.model = make_spec(net_kind_from_string(train_model_kind),
                                  cfg.train.model.init_filters, cfg.train.model.dropout_p);
      if (filters_flag) cfg.train.model = make_spec(cfg.train.model.kind, *filters_flag);
      cmd_train(cfg, train_data, cfg.output_dir, verbose);
    } else if (app.got_subcommand(predict_cmd)) {
      cmd_predict(cfg, pred_ckpt, pred_data, pred_out, preprocessed);
      write_effective_config(cfg, pred_out);
    } else if (app.got_subcommand(ens_cmd)) {
      cmd_ensemble_files(ens_masks, ens_subject, ref_flag.value_or(cfg.ensemble_reference),
                         ens_out);
    } else if (app.got_subcommand(eval_cmd)) {
      cmd_evaluate(cfg, eval_pred, eval_gt, eval_report);
    } else if (app.got_subcommand(pipe_cmd)) {
      return cmd_pipeline(cfg, cfg.output_dir, verbose);
    }
    return 0;
  } catch (const ConfigError& e) {
    std::cerr << "config error: " << e.what() << "\n";
    return 1;
  } catch (const NumericError& e) {
    std::cerr << "numeric failure: " << e.what() << "\n";
    return 3;
  } catch (const DataError& e) {
    std::cerr << "data error: " << e.what() << "\n";
    return 2;
  } catch (const std::exception& e) {
    std::cerr << "error: " << e.what() << "\n";
    return 2;
  }
}
