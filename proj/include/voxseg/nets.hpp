#pragma once

#include <memory>
#include <sstream>
#include <string>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/nn.hpp"
#include "voxseg/tensor.hpp"

namespace voxseg {

enum class NetKind { segresnet, attn_resunet, ddunet };

inline const char* to_string(NetKind k) {
  switch (k) {
    case NetKind::segresnet: return "segresnet";
    case NetKind::attn_resunet: return "attn_resunet";
    case NetKind::ddunet: return "ddunet";
  }
  return "?";
}

inline NetKind net_kind_from_string(const std::string& s) {
  if (s == "segresnet") return NetKind::segresnet;
  if (s == "attn_resunet") return NetKind::attn_resunet;
  if (s == "ddunet") return NetKind::ddunet;
  throw ConfigError("unknown model kind '" + s + "'");
}

struct NetworkSpec {
  NetKind kind = NetKind::segresnet;
  int in_channels = 4;
  int out_channels = 4;
  int init_filters = 16;
  std::vector<int> encoder_blocks;   // residual blocks per encoder level
  std::vector<int> encoder_convs;    // convs per encoder residual block, per level
  std::vector<int> decoder_blocks;   // residual blocks per decoder level, deepest first
  std::vector<int> decoder2_blocks;  // second decoder (dual_decoder only)
  double dropout_p = 0.2;
  bool concat_skips = false;
  bool gated_skips = false;
  bool dual_decoder = false;
  bool use_se = false;
  int se_reduction = 4;
  bool per_channel_alpha = false;

  int levels() const { return int(encoder_blocks.size()); }
  int width(int level) const { return init_filters << level; }
  int min_divisor() const { return 1 << (levels() - 1); }

  std::string canonical() const {
    auto join = [](const std::vector<int>& v) {
      std::string s;
      for (std::size_t i = 0; i < v.size(); ++i) s += (i ? "," : "") + std::to_string(v[i]);
      return s;
    };
    std::ostringstream os;
    os << "kind=" << to_string(kind) << ";in=" << in_channels << ";out=" << out_channels
       << ";f=" << init_filters << ";enc=" << join(encoder_blocks)
       << ";convs=" << join(encoder_convs) << ";dec=" << join(decoder_blocks)
       << ";dec2=" << join(decoder2_blocks) << ";drop=" << dropout_p
       << ";concat=" << concat_skips << ";gated=" << gated_skips << ";dual=" << dual_decoder
       << ";se=" << use_se << ";sered=" << se_reduction << ";pca=" << per_channel_alpha;
    return os.str();
  }
  std::uint64_t hash() const { return fnv1a64(canonical()); }
};

inline NetworkSpec make_segresnet_spec(int init_filters = 16, double dropout_p = 0.2) {
  if (init_filters < 1) throw ConfigError("init_filters must be >= 1");
  NetworkSpec s;
  s.kind = NetKind::segresnet;
  s.init_filters = init_filters;
  s.encoder_blocks = {1, 2, 2, 4};
  s.encoder_convs = {2, 2, 2, 2};
  s.decoder_blocks = {1, 1, 1};
  s.dropout_p = dropout_p;
  return s;
}

inline NetworkSpec make_attn_resunet_spec(int init_filters = 16, double dropout_p = 0.2) {
  NetworkSpec s = make_segresnet_spec(init_filters, dropout_p);
  s.kind = NetKind::attn_resunet;
  s.concat_skips = true;
  s.gated_skips = true;
  return s;
}

inline NetworkSpec make_ddunet_spec(int init_filters = 16, double dropout3d_p = 0.1) {
  if (init_filters < 1) throw ConfigError("init_filters must be >= 1");
  NetworkSpec s;
  s.kind = NetKind::ddunet;
  s.init_filters = init_filters;
  s.encoder_blocks = {1, 1, 1, 1, 1};
  s.encoder_convs = {2, 2, 3, 3, 4};  // deeper levels get more convs per block
  s.decoder_blocks = {4, 4, 3, 2};
  s.decoder2_blocks = {3, 3, 2, 2};
  s.dropout_p = dropout3d_p;
  s.concat_skips = true;
  s.gated_skips = true;
  s.dual_decoder = true;
  s.use_se = true;
  return s;
}

inline NetworkSpec make_spec(NetKind kind, int init_filters = 16, double dropout_p = -1.0) {
  switch (kind) {
    case NetKind::segresnet:
      return make_segresnet_spec(init_filters, dropout_p < 0 ? 0.2 : dropout_p);
    case NetKind::attn_resunet:
      return make_attn_resunet_spec(init_filters, dropout_p < 0 ? 0.2 : dropout_p);
    case NetKind::ddunet:
      return make_ddunet_spec(init_filters, dropout_p < 0 ? 0.1 : dropout_p);
  }
  throw ConfigError("bad net kind");
}

// ---------------------------------------------------------------------------
// the shared encoder-decoder body
// ---------------------------------------------------------------------------

namespace nn_impl {

template <class T>
struct EncoderLevel {
  nn::Conv3d<T> down;  // stride-2, absent at level 0
  bool has_down = false;
  std::vector<nn::ResidualBlock<T>> blocks;
};

template <class T>
struct DecoderLevel {
  nn::TrilinearUp2<T> up;
  nn::Conv3d<T> up_conv;   // 1x1x1 channel reduction after upsampling
  nn::AttentionGate<T> gate;
  nn::Conv3d<T> reduce;    // 1x1x1 after concatenation
  std::vector<nn::ResidualBlock<T>> blocks;
};

template <class T>
struct Decoder {
  std::vector<DecoderLevel<T>> levels;  // deepest first
  nn::Conv3d<T> head;                   // 1x1x1 -> out_channels
};

}  // namespace nn_impl

template <class T>
class Network {
 public:
  Network() = default;
  Network(const NetworkSpec& spec, std::uint64_t seed) { build(spec, seed); }

  void build(const NetworkSpec& spec, std::uint64_t seed) {
    spec_ = spec;
    seed_ = seed;
    Rng rng(Rng::derive(seed, Rng::tag("init")));
    dropout_rng_.reseed(Rng::derive(seed, Rng::tag("dropout")));

    const int L = spec.levels();
    stem_.build(spec.in_channels, spec.width(0), 3, 1, true, rng);
    enc_.clear();
    enc_.resize(std::size_t(L));
    for (int l = 0; l < L; ++l) {
      auto& level = enc_[std::size_t(l)];
      if (l > 0) {
        level.down.build(spec.width(l - 1), spec.width(l), 3, 2, true, rng);
        level.has_down = true;
      }
      level.blocks.resize(std::size_t(spec.encoder_blocks[std::size_t(l)]));
      for (auto& b : level.blocks)
        b.build(spec.width(l), spec.width(l), spec.encoder_convs[std::size_t(l)],
                spec.dropout_p, spec.use_se, spec.se_reduction, rng);
    }

    decoders_.clear();
    decoders_.resize(spec.dual_decoder ? 2 : 1);
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
      const auto& blocks_per_level =
          d == 0 ? spec.decoder_blocks : spec.decoder2_blocks;
      auto& dec = decoders_[d];
      dec.levels.resize(std::size_t(L - 1));
      for (int i = 0; i < L - 1; ++i) {  // i = 0 is the deepest decoder level
        const int l = L - 2 - i;         // encoder level it fuses with
        auto& dl = dec.levels[std::size_t(i)];
        dl.up_conv.build(spec.width(l + 1), spec.width(l), 1, 1, true, rng);
        if (spec.gated_skips)
          dl.gate.build(spec.width(l), spec.width(l), rng, 0,
                        spec.per_channel_alpha ? spec.width(l) : 1);
        if (spec.concat_skips)
          dl.reduce.build(2 * spec.width(l), spec.width(l), 1, 1, true, rng);
        dl.blocks.resize(std::size_t(blocks_per_level[std::size_t(i)]));
        for (auto& b : dl.blocks)
          b.build(spec.width(l), spec.width(l), 2, spec.dropout_p, spec.use_se,
                  spec.se_reduction, rng);
      }
      dec.head.build(spec.width(0), spec.out_channels, 1, 1, true, rng);
    }
    if (spec.dual_decoder)
      fuse_.build(2 * spec.out_channels, spec.out_channels, 1, 1, true, rng);
  }

  const NetworkSpec& spec() const { return spec_; }
  std::uint64_t seed() const { return seed_; }

  Tensor<T> forward(const Tensor<T>& input, bool train = false) {
    if (input.c() != spec_.in_channels)
      throw ShapeMismatch("expected " + std::to_string(spec_.in_channels) + " input channels");
    const int div = spec_.min_divisor();
    if (input.d() % div || input.h() % div || input.w() % div)
      throw IndivisibleShape("input spatial dims must be divisible by " + std::to_string(div));

    nn::Ctx<T> ctx{train, &dropout_rng_};
    const int L = spec_.levels();
    enc_out_.assign(std::size_t(L), Tensor<T>{});

    Tensor<T> cur = stem_.forward(input, ctx);
    nn::check_finite(cur, "stem");
    for (int l = 0; l < L; ++l) {
      auto& level = enc_[std::size_t(l)];
      if (level.has_down) cur = level.down.forward(cur, ctx);
      for (auto& b : level.blocks) cur = b.forward(cur, ctx);
      nn::check_finite(cur, ("encoder level " + std::to_string(l)).c_str());
      enc_out_[std::size_t(l)] = cur;
    }

    std::vector<Tensor<T>> heads;
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
      auto& dec = decoders_[d];
      Tensor<T> y = enc_out_[std::size_t(L - 1)];
      for (int i = 0; i < L - 1; ++i) {
        const int l = L - 2 - i;
        auto& dl = dec.levels[std::size_t(i)];
        y = dl.up.forward(y, ctx);
        y = dl.up_conv.forward(y, ctx);
        Tensor<T> skip = enc_out_[std::size_t(l)];
        if (spec_.gated_skips) skip = dl.gate.forward(skip, y, ctx);
        if (spec_.concat_skips) {
          Tensor<T> cat({2 * spec_.width(l), y.d(), y.h(), y.w()});
          std::copy(y.data.begin(), y.data.end(), cat.data.begin());
          std::copy(skip.data.begin(), skip.data.end(),
                    cat.data.begin() + std::ptrdiff_t(y.data.size()));
          y = dl.reduce.forward(cat, ctx);
        } else {
          for (std::size_t k = 0; k < y.data.size(); ++k) y.data[k] += skip.data[k];
        }
        for (auto& b : dl.blocks) y = b.forward(y, ctx);
        nn::check_finite(y, ("decoder " + std::to_string(d) + " level " + std::to_string(i)).c_str());
      }
      heads.push_back(dec.head.forward(y, ctx));
    }

    Tensor<T> logits;
    if (spec_.dual_decoder) {
      head_out_ = heads;
      Tensor<T> cat({2 * spec_.out_channels, heads[0].d(), heads[0].h(), heads[0].w()});
      std::copy(heads[0].data.begin(), heads[0].data.end(), cat.data.begin());
      std::copy(heads[1].data.begin(), heads[1].data.end(),
                cat.data.begin() + std::ptrdiff_t(heads[0].data.size()));
      logits = fuse_.forward(cat, ctx);
    } else {
      logits = std::move(heads[0]);
    }
    nn::check_finite(logits, "output head");
    if (!train) enc_out_.clear();
    return logits;
  }

  // Backpropagates dLoss/dLogits; accumulates parameter gradients.
  // Requires a preceding forward(train=true). For dual-decoder training,
  // aux_ghead optionally adds gradients flowing directly into the two
  // pre-fusion heads (auxiliary per-decoder losses).
  Tensor<T> backward(const Tensor<T>& glogits,
                     const std::array<const Tensor<T>*, 2>& aux_ghead = {nullptr, nullptr}) {
    const int L = spec_.levels();
    std::vector<Tensor<T>> genc(static_cast<std::size_t>(L));
    for (int l = 0; l < L; ++l) genc[std::size_t(l)].resize_like(enc_out_[std::size_t(l)]);

    std::vector<Tensor<T>> ghead(decoders_.size());
    if (spec_.dual_decoder) {
      Tensor<T> gcat = fuse_.backward(glogits);
      const std::size_t half = gcat.data.size() / 2;
      ghead[0].resize_like(head_out_[0]);
      ghead[1].resize_like(head_out_[1]);
      std::copy(gcat.data.begin(), gcat.data.begin() + std::ptrdiff_t(half),
                ghead[0].data.begin());
      std::copy(gcat.data.begin() + std::ptrdiff_t(half), gcat.data.end(),
                ghead[1].data.begin());
      for (int d = 0; d < 2; ++d)
        if (aux_ghead[std::size_t(d)])
          for (std::size_t k = 0; k < ghead[std::size_t(d)].data.size(); ++k)
            ghead[std::size_t(d)].data[k] += aux_ghead[std::size_t(d)]->data[k];
    } else {
      ghead[0] = glogits;
    }

    for (std::size_t d = decoders_.size(); d-- > 0;) {
      auto& dec = decoders_[d];
      Tensor<T> g = dec.head.backward(ghead[d]);
      for (int i = L - 2; i >= 0; --i) {
        const int l = L - 2 - i;
        auto& dl = dec.levels[std::size_t(i)];
        for (std::size_t b = dl.blocks.size(); b-- > 0;) g = dl.blocks[b].backward(g);
        Tensor<T> gy;  // grad w.r.t. the upsampled decoder feature
        if (spec_.concat_skips) {
          Tensor<T> gcat = dl.reduce.backward(g);
          const std::size_t half = gcat.data.size() / 2;
          gy.resize_like(genc[std::size_t(l)]);
          std::copy(gcat.data.begin(), gcat.data.begin() + std::ptrdiff_t(half),
                    gy.data.begin());
          Tensor<T> gskip;
          gskip.resize_like(genc[std::size_t(l)]);
          std::copy(gcat.data.begin() + std::ptrdiff_t(half), gcat.data.end(),
                    gskip.data.begin());
          if (spec_.gated_skips) {
            auto [gx, gg] = dl.gate.backward(gskip);
            for (std::size_t k = 0; k < gx.data.size(); ++k)
              genc[std::size_t(l)].data[k] += gx.data[k];
            for (std::size_t k = 0; k < gg.data.size(); ++k) gy.data[k] += gg.data[k];
          } else {
            for (std::size_t k = 0; k < gskip.data.size(); ++k)
              genc[std::size_t(l)].data[k] += gskip.data[k];
          }
        } else {
          gy = g;
          if (spec_.gated_skips) {
            auto [gx, gg] = dl.gate.backward(g);
            for (std::size_t k = 0; k < gx.data.size(); ++k)
              genc[std::size_t(l)].data[k] += gx.data[k];
            for (std::size_t k = 0; k < gg.data.size(); ++k) gy.data[k] += gg.data[k];
          } else {
            for (std::size_t k = 0; k < g.data.size(); ++k)
              genc[std::size_t(l)].data[k] += g.data[k];
          }
        }
        gy = dl.up_conv.backward(gy);
        g = dl.up.backward(gy);
      }
      for (std::size_t k = 0; k < g.data.size(); ++k)
        genc[std::size_t(L - 1)].data[k] += g.data[k];
    }

    Tensor<T> g = std::move(genc[std::size_t(L - 1)]);
    for (int l = L - 1; l >= 0; --l) {
      auto& level = enc_[std::size_t(l)];
      for (std::size_t b = level.blocks.size(); b-- > 0;) g = level.blocks[b].backward(g);
      if (level.has_down) g = level.down.backward(g);
      if (l > 0)
        for (std::size_t k = 0; k < g.data.size(); ++k)
          g.data[k] += genc[std::size_t(l - 1)].data[k];
    }
    return stem_.backward(g);
  }

  template <class F>
  void visit_params(F&& f) {
    stem_.visit_params("stem", f);
    for (std::size_t l = 0; l < enc_.size(); ++l) {
      const std::string p = "enc" + std::to_string(l);
      if (enc_[l].has_down) enc_[l].down.visit_params(p + ".down", f);
      for (std::size_t b = 0; b < enc_[l].blocks.size(); ++b)
        enc_[l].blocks[b].visit_params(p + ".block" + std::to_string(b), f);
    }
    for (std::size_t d = 0; d < decoders_.size(); ++d) {
      const std::string dp = "dec" + std::to_string(d);
      auto& dec = decoders_[d];
      for (std::size_t i = 0; i < dec.levels.size(); ++i) {
        const std::string p = dp + ".level" + std::to_string(i);
        auto& dl = dec.levels[i];
        dl.up_conv.visit_params(p + ".up_conv", f);
        if (spec_.gated_skips) dl.gate.visit_params(p + ".gate", f);
        if (spec_.concat_skips) dl.reduce.visit_params(p + ".reduce", f);
        for (std::size_t b = 0; b < dl.blocks.size(); ++b)
          dl.blocks[b].visit_params(p + ".block" + std::to_string(b), f);
      }
      dec.head.visit_params(dp + ".head", f);
    }
    if (spec_.dual_decoder) fuse_.visit_params("fuse", f);
  }

  std::int64_t parameter_count() {
    std::int64_t n = 0;
    visit_params([&](const std::string&, Tensor<T>& p, Tensor<T>&) { n += p.numel(); });
    return n;
  }

  void zero_grads() {
    visit_params([](const std::string&, Tensor<T>&, Tensor<T>& g) { g.zero(); });
  }

  template <class F>
  void for_each_gate(F&& f) {
    for (auto& dec : decoders_)
      for (auto& dl : dec.levels)
        if (spec_.gated_skips) f(dl.gate);
  }
  template <class F>
  void for_each_se(F&& f) {
    auto visit_blocks = [&](std::vector<nn::ResidualBlock<T>>& blocks) {
      for (auto& b : blocks)
        if (b.use_se) f(b.se);
    };
    for (auto& level : enc_) visit_blocks(level.blocks);
    for (auto& dec : decoders_)
      for (auto& dl : dec.levels) visit_blocks(dl.blocks);
  }

  // pre-fusion head logits from the last forward(train=true); dual decoder only
  const std::vector<Tensor<T>>& head_outputs() const { return head_out_; }

  Rng& dropout_rng() { return dropout_rng_; }

 private:
  NetworkSpec spec_;
  std::uint64_t seed_ = 0;
  nn::Conv3d<T> stem_;
  std::vector<nn_impl::EncoderLevel<T>> enc_;
  std::vector<nn_impl::Decoder<T>> decoders_;
  nn::Conv3d<T> fuse_;
  std::vector<Tensor<T>> enc_out_;
  std::vector<Tensor<T>> head_out_;
  Rng dropout_rng_;
};

template <class T = float>
inline Network<T> build_segresnet(int init_filters = 16, double dropout_p = 0.2,
                                  std::uint64_t seed = 0) {
  return Network<T>(make_segresnet_spec(init_filters, dropout_p), seed);
}
template <class T = float>
inline Network<T> build_attention_resunet(int init_filters = 16, double dropout_p = 0.2,
                                          std::uint64_t seed = 0) {
  return Network<T>(make_attn_resunet_spec(init_filters, dropout_p), seed);
}
template <class T = float>
inline Network<T> build_ddunet(double dropout3d_p = 0.1, int init_filters = 16,
                               std::uint64_t seed = 0) {
  return Network<T>(make_ddunet_spec(init_filters, dropout3d_p), seed);
}

}  // namespace voxseg
