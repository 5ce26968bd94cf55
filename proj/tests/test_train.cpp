#include <catch2/catch_amalgamated.hpp>

#include <filesystem>
#include <fstream>

#include "oracles.hpp"
#include "voxseg/phantom.hpp"
#include "voxseg/train.hpp"

using namespace voxseg;
namespace fs = std::filesystem;

namespace {

fs::path temp_dir() {
  static int counter = 0;
  fs::path p = fs::temp_directory_path() / ("voxseg_train_" + std::to_string(::getpid()) +
                                            "_" + std::to_string(counter++));
  fs::create_directories(p);
  return p;
}

// single-parameter "network" for optimizer unit tests
struct OneParam {
  Tensor<double> p, g;
  OneParam(double value) {
    p.resize({1});
    g.resize({1});
    p.data[0] = value;
  }
  template <class F>
  void visit_params(F&& f) {
    f("p", p, g);
  }
};

std::vector<Subject> tiny_dataset(int n, const Shape3& shape, std::uint64_t seed) {
  PhantomConfig pcfg;
  pcfg.shape = shape;
  pcfg.radius_min = 3;
  pcfg.radius_max = 4;
  pcfg.rim_thickness = 1;
  pcfg.edema_thickness = 2;
  pcfg.n_lesions_max = 1;
  std::vector<Subject> out;
  for (int i = 0; i < n; ++i) {
    pcfg.seed = seed + std::uint64_t(i);
    auto [vol, mask] = generate_phantom(pcfg);
    Subject s;
    s.id = "p" + std::to_string(i);
    s.volume = zscore_normalize(vol);
    s.mask = std::move(mask);
    out.push_back(std::move(s));
  }
  return out;
}

}  // namespace

// ---------------------------------------------------------------------------
// optimizer
// ---------------------------------------------------------------------------

TEST_CASE("optimizer matches the hand-coded reference on a quadratic, step by step") {
  for (const bool amsgrad : {true, false}) {
    AdamWConfig cfg;
    cfg.lr = 0.05;
    cfg.weight_decay = 0.01;
    cfg.amsgrad = amsgrad;
    AdamW<double> opt(cfg);
    OneParam net(3.0);
    oracle::AdamWRef ref;
    double ref_p = 3.0;
    Rng rng(7);
    for (int step = 0; step < 120; ++step) {
      // objective 0.5*a*(p-b)^2 with drifting curvature to vary gradients
      const double a = 1.0 + 0.5 * std::sin(step * 0.37);
      const double b = std::cos(step * 0.11);
      const double grad = a * (net.p.data[0] - b);
      net.g.data[0] = grad;
      // the reference consumes a gradient at the same point
      const double ref_grad = a * (ref_p - b);
      ref_p = ref.step(ref_p, ref_grad, cfg.lr, cfg.beta1, cfg.beta2, cfg.eps,
                       cfg.weight_decay, amsgrad);
      opt.step(net);
      net.g.data[0] = 0.0;
      REQUIRE_THAT(net.p.data[0], Catch::Matchers::WithinAbs(ref_p, 1e-12));
    }
  }
}

TEST_CASE("weight decay is decoupled: zero gradient still shrinks the parameter") {
  AdamWConfig cfg;
  cfg.lr = 0.1;
  cfg.weight_decay = 0.05;
  AdamW<double> opt(cfg);
  OneParam net(2.0);
  double expected = 2.0;
  for (int step = 0; step < 10; ++step) {
    net.g.data[0] = 0.0;
    opt.step(net);
    expected *= 1.0 - cfg.lr * cfg.weight_decay;
    REQUIRE_THAT(net.p.data[0], Catch::Matchers::WithinAbs(expected, 1e-15));
  }
}

// ---------------------------------------------------------------------------
// training loop
// ---------------------------------------------------------------------------

TEST_CASE("zero learning rate is a fixed point of training") {
  auto dataset = tiny_dataset(1, {16, 16, 16}, 100);
  TrainConfig cfg;
  cfg.learning_rate = 0.0;
  cfg.epochs = 1;
  cfg.seed = 5;
  cfg.model = make_segresnet_spec(2, 0.0);

  Network<float> init(cfg.model, cfg.seed);
  auto [net, log] = train_model(cfg, dataset);
  std::vector<float> before, after;
  init.visit_params([&](const std::string&, Tensor<float>& p, Tensor<float>&) {
    before.insert(before.end(), p.data.begin(), p.data.end());
  });
  net.visit_params([&](const std::string&, Tensor<float>& p, Tensor<float>&) {
    after.insert(after.end(), p.data.begin(), p.data.end());
  });
  REQUIRE(before == after);
  REQUIRE(log.steps.size() == 1);
}

TEST_CASE("training is deterministic given seed and config") {
  auto dataset = tiny_dataset(2, {16, 16, 16}, 200);
  TrainConfig cfg;
  cfg.learning_rate = 1e-3;
  cfg.epochs = 2;
  cfg.seed = 9;
  cfg.model = make_ddunet_spec(2, 0.1);
  cfg.augment.enabled = true;
  cfg.augment.active_until_epoch = 1;

  auto [net1, log1] = train_model(cfg, dataset);
  auto [net2, log2] = train_model(cfg, dataset);
  REQUIRE(log1.steps.size() == log2.steps.size());
  for (std::size_t i = 0; i < log1.steps.size(); ++i)
    REQUIRE(log1.steps[i].loss == log2.steps[i].loss);

  std::vector<float> p1, p2;
  net1.visit_params([&](const std::string&, Tensor<float>& p, Tensor<float>&) {
    p1.insert(p1.end(), p.data.begin(), p.data.end());
  });
  net2.visit_params([&](const std::string&, Tensor<float>& p, Tensor<float>&) {
    p2.insert(p2.end(), p.data.begin(), p.data.end());
  });
  REQUIRE(p1 == p2);
}

TEST_CASE("training rejects an empty dataset and logs finite losses") {
  TrainConfig cfg;
  cfg.model = make_segresnet_spec(2, 0.0);
  REQUIRE_THROWS_AS(train_model(cfg, {}), EmptyDataset);

  auto dataset = tiny_dataset(1, {16, 16, 16}, 300);
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  auto [net, log] = train_model(cfg, dataset);
  REQUIRE(log.steps.size() == 2);
  for (const auto& s : log.steps) REQUIRE(std::isfinite(s.loss));
  REQUIRE(log.epoch_mean_loss.size() == 2);
}

TEST_CASE("the training log serializes one record per step") {
  const auto dir = temp_dir();
  auto dataset = tiny_dataset(2, {16, 16, 16}, 400);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  cfg.model = make_segresnet_spec(2, 0.0);
  auto [net, log] = train_model(cfg, dataset);
  const std::string path = (dir / "train.jsonl").string();
  log.save_jsonl(path);

  std::ifstream f(path);
  std::string line;
  int lines = 0;
  while (std::getline(f, line)) {
    const json j = json::parse(line);
    REQUIRE(j.contains("step"));
    REQUIRE(j.contains("epoch"));
    REQUIRE(j.contains("loss"));
    REQUIRE(j.contains("ts_ms"));
    ++lines;
  }
  REQUIRE(lines == 4);
}

// ---------------------------------------------------------------------------
// prediction
// ---------------------------------------------------------------------------

TEST_CASE("predict_subject emits valid labels deterministically") {
  auto dataset = tiny_dataset(1, {16, 16, 16}, 500);
  Network<float> net(make_segresnet_spec(2, 0.2), 3);
  LabelMask a = predict_subject(net, dataset[0].volume);
  LabelMask b = predict_subject(net, dataset[0].volume);
  REQUIRE(a.data == b.data);
  for (auto v : a.data) REQUIRE(v <= 3);
  REQUIRE(a.shape == dataset[0].volume.shape());
  REQUIRE(a.meta.affine == dataset[0].volume.meta.affine);
}

// ---------------------------------------------------------------------------
// checkpoints
// ---------------------------------------------------------------------------

TEST_CASE("checkpoint round trip reproduces eval-mode outputs bit-exactly") {
  const auto dir = temp_dir();
  Network<float> net(make_attn_resunet_spec(2, 0.2), 11);
  Rng rng(12);
  Tensor<float> x({4, 8, 8, 8});
  for (auto& v : x.data) v = float(rng.normal());
  Tensor<float> y_before = net.forward(x);

  const std::string path = (dir / "net.ckpt").string();
  save_checkpoint(net, path);
  Network<float> loaded = load_checkpoint(path);
  REQUIRE(loaded.spec().canonical() == net.spec().canonical());
  Tensor<float> y_after = loaded.forward(x);
  REQUIRE(y_before.data == y_after.data);
}

TEST_CASE("checkpoint spec-hash validation and corruption handling") {
  const auto dir = temp_dir();
  Network<float> net(make_segresnet_spec(2, 0.2), 1);
  const std::string path = (dir / "seg.ckpt").string();
  save_checkpoint(net, path);

  const NetworkSpec wrong = make_ddunet_spec(2);
  REQUIRE_THROWS_AS(load_checkpoint(path, &wrong), SpecHashMismatch);
  const NetworkSpec right = make_segresnet_spec(2, 0.2);
  REQUIRE_NOTHROW(load_checkpoint(path, &right));

  // truncation
  const auto full_size = fs::file_size(path);
  fs::resize_file(path, full_size / 2);
  REQUIRE_THROWS_AS(load_checkpoint(path), CorruptFile);

  // garbage
  const std::string junk = (dir / "junk.ckpt").string();
  std::ofstream(junk) << "not a checkpoint";
  REQUIRE_THROWS_AS(load_checkpoint(junk), CorruptFile);
  REQUIRE_THROWS_AS(load_checkpoint((dir / "absent.ckpt").string()), UnreadableFile);
}

TEST_CASE("auxiliary head losses change dual-decoder training") {
  auto dataset = tiny_dataset(1, {16, 16, 16}, 700);
  TrainConfig cfg;
  cfg.epochs = 2;
  cfg.learning_rate = 1e-3;
  cfg.seed = 21;
  cfg.model = make_ddunet_spec(2, 0.0);
  auto [net0, log0] = train_model(cfg, dataset);
  cfg.aux_loss_weight = 0.5;
  auto [net1, log1] = train_model(cfg, dataset);
  REQUIRE(log1.steps[0].loss > log0.steps[0].loss);  // extra loss terms
  for (const auto& s : log1.steps) REQUIRE(std::isfinite(s.loss));
}

TEST_CASE("loss decreases over a short high-rate run") {
  auto dataset = tiny_dataset(1, {16, 16, 16}, 600);
  TrainConfig cfg;
  cfg.epochs = 8;
  cfg.learning_rate = 3e-3;
  cfg.seed = 13;
  cfg.model = make_segresnet_spec(4, 0.0);
  auto [net, log] = train_model(cfg, dataset);
  REQUIRE(log.epoch_mean_loss.back() < log.epoch_mean_loss.front());
}
