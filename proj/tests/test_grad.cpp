// Finite-difference verification of every analytic backward pass: the loss is
// combined dice+focal over softmax of the block (or network) output, and each
// sampled parameter/input scalar is checked against central differences.
#include <catch2/catch_amalgamated.hpp>

#include "oracles.hpp"
#include "voxseg/losses.hpp"
#include "voxseg/nets.hpp"
#include "voxseg/nn.hpp"

using namespace voxseg;

namespace {

struct GradHarness {
  Rng rng;
  LossConfig cfg;  // defaults: 0.75/0.25, gamma 2, alpha 0.25

  explicit GradHarness(std::uint64_t seed) : rng(seed) {}

  Tensor<double> random_input(std::initializer_list<int> shape, double scale = 1.0) {
    Tensor<double> t(shape);
    for (auto& v : t.data) v = rng.normal(0.0, scale);
    return t;
  }

  Tensor<double> random_target(int d, int h, int w) {
    Tensor<double> t({4, d, h, w});
    const std::int64_t sp = t.spatial();
    for (std::int64_t i = 0; i < sp; ++i)
      t.data[std::size_t(rng.uniform_int(0, 3) * sp + i)] = 1.0;
    return t;
  }

  // checks d(loss)/d(slot) for every slot; reports failures through Catch
  void run(const std::function<double()>& loss_fn, std::vector<oracle::FdSlot>& slots) {
    std::vector<oracle::FdFailure> failures;
    const bool ok = oracle::fd_check(loss_fn, slots, 1e-3, &failures);
    for (const auto& f : failures)
      UNSCOPED_INFO(f.name << ": analytic=" << f.analytic << " numeric=" << f.numeric);
    REQUIRE(ok);
  }
};

template <class Layer>
std::vector<oracle::FdSlot> param_slots(Layer& layer, const std::string& prefix,
                                        int stride = 1) {
  std::vector<oracle::FdSlot> slots;
  layer.visit_params(prefix, [&](const std::string& name, Tensor<double>& p,
                                 Tensor<double>& g) {
    for (std::size_t i = 0; i < p.data.size(); i += std::size_t(stride))
      slots.push_back({name + "[" + std::to_string(i) + "]", &p.data[i], g.data[i]});
  });
  return slots;
}

void add_input_slots(std::vector<oracle::FdSlot>& slots, Tensor<double>& x,
                     const Tensor<double>& gx, const std::string& name, int stride = 1) {
  for (std::size_t i = 0; i < x.data.size(); i += std::size_t(stride))
    slots.push_back({name + "[" + std::to_string(i) + "]", &x.data[i], gx.data[i]});
}

}  // namespace

TEST_CASE("conv3d gradients: kernel 3 stride 1") {
  GradHarness h(1001);
  for (int trial = 0; trial < 4; ++trial) {
    nn::Conv3d<double> conv;
    conv.build(4, 4, 3, 1, true, h.rng);
    Tensor<double> x = h.random_input({4, 2, 2, 2});
    Tensor<double> target = h.random_target(2, 2, 2);

    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      Tensor<double> probs = nn::softmax_channels(conv.forward(x, ctx));
      return double(combined_loss(probs, target, h.cfg));
    };

    nn::Ctx<double> train{true, nullptr};
    Tensor<double> out = conv.forward(x, train);
    Tensor<double> probs = nn::softmax_channels(out);
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    Tensor<double> gx = conv.backward(nn::softmax_channels_backward(probs, gprobs));

    auto slots = param_slots(conv, "conv", 7);
    add_input_slots(slots, x, gx, "x", 3);
    h.run(loss_fn, slots);
  }
}

TEST_CASE("conv3d gradients: kernel 3 stride 2 and kernel 1") {
  GradHarness h(1002);
  // stride-2: output (4,1,1,1) from (4,2,2,2)
  for (int trial = 0; trial < 3; ++trial) {
    nn::Conv3d<double> conv;
    conv.build(4, 4, 3, 2, true, h.rng);
    Tensor<double> x = h.random_input({4, 2, 2, 2});
    Tensor<double> target = h.random_target(1, 1, 1);
    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      return double(combined_loss(nn::softmax_channels(conv.forward(x, ctx)), target, h.cfg));
    };
    nn::Ctx<double> train{true, nullptr};
    Tensor<double> probs = nn::softmax_channels(conv.forward(x, train));
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    Tensor<double> gx = conv.backward(nn::softmax_channels_backward(probs, gprobs));
    auto slots = param_slots(conv, "down", 11);
    add_input_slots(slots, x, gx, "x", 5);
    h.run(loss_fn, slots);
  }
  // 1x1x1 projection
  for (int trial = 0; trial < 3; ++trial) {
    nn::Conv3d<double> conv;
    conv.build(6, 4, 1, 1, true, h.rng);
    Tensor<double> x = h.random_input({6, 2, 2, 2});
    Tensor<double> target = h.random_target(2, 2, 2);
    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      return double(combined_loss(nn::softmax_channels(conv.forward(x, ctx)), target, h.cfg));
    };
    nn::Ctx<double> train{true, nullptr};
    Tensor<double> probs = nn::softmax_channels(conv.forward(x, train));
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    Tensor<double> gx = conv.backward(nn::softmax_channels_backward(probs, gprobs));
    auto slots = param_slots(conv, "proj", 1);
    add_input_slots(slots, x, gx, "x", 2);
    h.run(loss_fn, slots);
  }
}

TEST_CASE("group norm gradients") {
  GradHarness h(1003);
  for (int trial = 0; trial < 5; ++trial) {
    nn::GroupNorm<double> gn;
    gn.build(4);
    // non-trivial gamma/beta
    for (auto& v : gn.gamma.data) v = h.rng.uniform(0.5, 1.5);
    for (auto& v : gn.beta.data) v = h.rng.normal(0.0, 0.2);
    Tensor<double> x = h.random_input({4, 2, 2, 2}, 2.0);
    Tensor<double> target = h.random_target(2, 2, 2);
    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      return double(combined_loss(nn::softmax_channels(gn.forward(x, ctx)), target, h.cfg));
    };
    nn::Ctx<double> train{true, nullptr};
    Tensor<double> probs = nn::softmax_channels(gn.forward(x, train));
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    Tensor<double> gx = gn.backward(nn::softmax_channels_backward(probs, gprobs));
    auto slots = param_slots(gn, "gn", 1);
    add_input_slots(slots, x, gx, "x", 2);
    h.run(loss_fn, slots);
  }
}

TEST_CASE("squeeze-excitation gradients") {
  GradHarness h(1004);
  for (int trial = 0; trial < 5; ++trial) {
    nn::SqueezeExcite<double> se;
    se.build(4, 2, h.rng);
    Tensor<double> x = h.random_input({4, 2, 2, 2});
    Tensor<double> target = h.random_target(2, 2, 2);
    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      return double(combined_loss(nn::softmax_channels(se.forward(x, ctx)), target, h.cfg));
    };
    nn::Ctx<double> train{true, nullptr};
    Tensor<double> probs = nn::softmax_channels(se.forward(x, train));
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    Tensor<double> gx = se.backward(nn::softmax_channels_backward(probs, gprobs));
    auto slots = param_slots(se, "se", 1);
    add_input_slots(slots, x, gx, "x", 1);
    h.run(loss_fn, slots);
  }
}

TEST_CASE("attention gate gradients for both inputs") {
  GradHarness h(1005);
  for (int trial = 0; trial < 5; ++trial) {
    nn::AttentionGate<double> gate;
    gate.build(4, 4, h.rng);
    Tensor<double> x = h.random_input({4, 2, 2, 2});
    Tensor<double> g = h.random_input({4, 2, 2, 2});
    Tensor<double> target = h.random_target(2, 2, 2);
    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      return double(
          combined_loss(nn::softmax_channels(gate.forward(x, g, ctx)), target, h.cfg));
    };
    nn::Ctx<double> train{true, nullptr};
    Tensor<double> probs = nn::softmax_channels(gate.forward(x, g, train));
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    auto [gx, gg] = gate.backward(nn::softmax_channels_backward(probs, gprobs));
    auto slots = param_slots(gate, "gate", 1);
    add_input_slots(slots, x, gx, "x", 2);
    add_input_slots(slots, g, gg, "g", 2);
    h.run(loss_fn, slots);
  }
}

TEST_CASE("trilinear upsampling gradients") {
  GradHarness h(1006);
  nn::TrilinearUp2<double> up;
  Tensor<double> x = h.random_input({4, 2, 2, 2});
  Tensor<double> target = h.random_target(4, 4, 4);
  auto loss_fn = [&] {
    nn::Ctx<double> ctx;
    return double(combined_loss(nn::softmax_channels(up.forward(x, ctx)), target, h.cfg));
  };
  nn::Ctx<double> train{true, nullptr};
  Tensor<double> probs = nn::softmax_channels(up.forward(x, train));
  Tensor<double> gprobs;
  gprobs.resize_like(probs);
  combined_loss(probs, target, h.cfg, &gprobs);
  Tensor<double> gx = up.backward(nn::softmax_channels_backward(probs, gprobs));
  std::vector<oracle::FdSlot> slots;
  add_input_slots(slots, x, gx, "x", 1);
  h.run(loss_fn, slots);
}

TEST_CASE("residual block gradients, with projection and squeeze-excitation") {
  GradHarness h(1007);
  for (int trial = 0; trial < 3; ++trial) {
    nn::ResidualBlock<double> block;
    block.build(6, 4, 2, /*dropout=*/0.0, /*se=*/true, 2, h.rng);
    Tensor<double> x = h.random_input({6, 2, 2, 2});
    Tensor<double> target = h.random_target(2, 2, 2);
    auto loss_fn = [&] {
      nn::Ctx<double> ctx;
      return double(combined_loss(nn::softmax_channels(block.forward(x, ctx)), target, h.cfg));
    };
    nn::Ctx<double> train{true, nullptr};
    Tensor<double> probs = nn::softmax_channels(block.forward(x, train));
    Tensor<double> gprobs;
    gprobs.resize_like(probs);
    combined_loss(probs, target, h.cfg, &gprobs);
    Tensor<double> gx = block.backward(nn::softmax_channels_backward(probs, gprobs));
    auto slots = param_slots(block, "block", 17);
    add_input_slots(slots, x, gx, "x", 5);
    h.run(loss_fn, slots);
  }
}

TEST_CASE("dropout backward uses the cached mask") {
  GradHarness h(1008);
  nn::Dropout3d<double> drop;
  drop.p = 0.5;
  Rng drop_rng(5);
  nn::Ctx<double> train{true, &drop_rng};
  Tensor<double> x = h.random_input({8, 2, 2, 2});
  Tensor<double> y = drop.forward(x, train);
  Tensor<double> go = h.random_input({8, 2, 2, 2});
  Tensor<double> gx = drop.backward(go);
  const std::int64_t sp = x.spatial();
  bool any_dropped = false, any_kept = false;
  for (int c = 0; c < 8; ++c) {
    const bool kept = drop.keep_[std::size_t(c)] != 0;
    any_dropped |= !kept;
    any_kept |= kept;
    for (std::int64_t i = 0; i < sp; ++i) {
      const double scale = kept ? 2.0 : 0.0;
      REQUIRE(y.data[std::size_t(c * sp + i)] == x.data[std::size_t(c * sp + i)] * scale);
      REQUIRE(gx.data[std::size_t(c * sp + i)] == go.data[std::size_t(c * sp + i)] * scale);
    }
  }
  REQUIRE(any_dropped);
  REQUIRE(any_kept);
}

namespace {

// full-network FD check with sampled parameters; dropout disabled
void check_full_network(NetworkSpec spec, const Shape3& input_shape, std::uint64_t seed,
                        int per_tensor) {
  spec.dropout_p = 0.0;
  GradHarness h(seed);
  Network<double> net(spec, seed);
  Tensor<double> x = h.random_input({4, input_shape[0], input_shape[1], input_shape[2]});
  Tensor<double> target = h.random_target(input_shape[0], input_shape[1], input_shape[2]);

  auto loss_fn = [&] {
    Tensor<double> probs = nn::softmax_channels(net.forward(x, false));
    return double(combined_loss(probs, target, h.cfg));
  };

  net.zero_grads();
  Tensor<double> probs = nn::softmax_channels(net.forward(x, true));
  Tensor<double> gprobs;
  gprobs.resize_like(probs);
  combined_loss(probs, target, h.cfg, &gprobs);
  Tensor<double> gx = net.backward(nn::softmax_channels_backward(probs, gprobs));

  Rng pick(seed ^ 0xabcdef);
  std::vector<oracle::FdSlot> slots;
  net.visit_params([&](const std::string& name, Tensor<double>& p, Tensor<double>& g) {
    for (int k = 0; k < per_tensor; ++k) {
      const std::size_t i = std::size_t(pick.uniform_int(0, int(p.data.size() - 1)));
      slots.push_back({name + "[" + std::to_string(i) + "]", &p.data[i], g.data[i]});
    }
  });
  add_input_slots(slots, x, gx, "input", int(x.data.size() / 8));

  std::vector<oracle::FdFailure> failures;
  const bool ok = oracle::fd_check(loss_fn, slots, 1e-3, &failures);
  for (const auto& f : failures)
    UNSCOPED_INFO(f.name << ": analytic=" << f.analytic << " numeric=" << f.numeric);
  CAPTURE(slots.size());
  REQUIRE(ok);
}

}  // namespace

TEST_CASE("full segresnet gradients match finite differences") {
  check_full_network(make_segresnet_spec(2, 0.0), {8, 8, 8}, 2001, 2);
}

TEST_CASE("full attention res-unet gradients match finite differences") {
  check_full_network(make_attn_resunet_spec(2, 0.0), {8, 8, 8}, 2002, 2);
}

TEST_CASE("full dual-decoder network gradients match finite differences") {
  check_full_network(make_ddunet_spec(2, 0.0), {16, 16, 16}, 2003, 1);
}

TEST_CASE("auxiliary decoder-head losses backpropagate correctly") {
  NetworkSpec spec = make_ddunet_spec(2, 0.0);
  GradHarness h(2004);
  Network<double> net(spec, 2004);
  Tensor<double> x = h.random_input({4, 16, 16, 16});
  Tensor<double> target = h.random_target(16, 16, 16);
  const double w = 0.3;

  auto loss_fn = [&] {
    Tensor<double> logits = net.forward(x, false);
    double total = combined_loss(nn::softmax_channels(logits), target, h.cfg);
    for (int d = 0; d < 2; ++d)
      total += w * combined_loss(nn::softmax_channels(net.head_outputs()[std::size_t(d)]),
                                 target, h.cfg);
    return total;
  };

  net.zero_grads();
  Tensor<double> logits = net.forward(x, true);
  Tensor<double> probs = nn::softmax_channels(logits);
  Tensor<double> gprobs;
  gprobs.resize_like(probs);
  combined_loss(probs, target, h.cfg, &gprobs);
  Tensor<double> glogits = nn::softmax_channels_backward(probs, gprobs);
  std::array<Tensor<double>, 2> aux;
  std::array<const Tensor<double>*, 2> aux_ptr{nullptr, nullptr};
  for (int d = 0; d < 2; ++d) {
    Tensor<double> hp = nn::softmax_channels(net.head_outputs()[std::size_t(d)]);
    Tensor<double> ghp;
    ghp.resize_like(hp);
    combined_loss(hp, target, h.cfg, &ghp);
    for (auto& v : ghp.data) v *= w;
    aux[std::size_t(d)] = nn::softmax_channels_backward(hp, ghp);
    aux_ptr[std::size_t(d)] = &aux[std::size_t(d)];
  }
  net.backward(glogits, aux_ptr);

  Rng pick(2024);
  std::vector<oracle::FdSlot> slots;
  net.visit_params([&](const std::string& name, Tensor<double>& p, Tensor<double>& g) {
    const std::size_t i = std::size_t(pick.uniform_int(0, int(p.data.size() - 1)));
    slots.push_back({name + "[" + std::to_string(i) + "]", &p.data[i], g.data[i]});
  });
  std::vector<oracle::FdFailure> failures;
  const bool ok = oracle::fd_check(loss_fn, slots, 1e-3, &failures);
  for (const auto& f : failures)
    UNSCOPED_INFO(f.name << ": analytic=" << f.analytic << " numeric=" << f.numeric);
  REQUIRE(ok);
}
