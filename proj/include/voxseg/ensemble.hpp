#pragma once

#include <array>
#include <vector>

#include "voxseg/common.hpp"
#include "voxseg/train.hpp"
#include "voxseg/volume.hpp"

namespace voxseg {

struct EnsembleInput {
  std::array<LabelMask, 3> members;
  int reference_index = 0;  // tie-break authority

  void validate() const {
    if (reference_index < 0 || reference_index > 2)
      throw WrongMemberCount("reference_index must be in {0,1,2}");
    for (int i = 1; i < 3; ++i)
      if (members[std::size_t(i)].shape != members[0].shape)
        throw GridMismatch("ensemble members are on different grids");
  }
};

// Per-voxel label predicted by >= 2 members; a three-way disagreement takes the
// reference member's label. Output meta copied from the reference member.
inline LabelMask majority_vote(const EnsembleInput& inp) {
  inp.validate();
  const auto& m0 = inp.members[0];
  LabelMask out;
  out.shape = m0.shape;
  out.meta = inp.members[std::size_t(inp.reference_index)].meta;
  out.data.resize(m0.data.size());
  const std::uint8_t* a = inp.members[0].data.data();
  const std::uint8_t* b = inp.members[1].data.data();
  const std::uint8_t* c = inp.members[2].data.data();
  const std::uint8_t* ref = inp.members[std::size_t(inp.reference_index)].data.data();
  for (std::size_t i = 0; i < out.data.size(); ++i) {
    if (a[i] == b[i] || a[i] == c[i])
      out.data[i] = a[i];
    else if (b[i] == c[i])
      out.data[i] = b[i];
    else
      out.data[i] = ref[i];
  }
  return out;
}

// Mean of the member softmax outputs, argmax readout. Not the voting rule the
// ensemble normally uses; kept for ablation.
inline LabelMask probability_mean_fusion(std::array<Network<float>*, 3> nets,
                                         const MultiModalVolume& vol) {
  Tensor<float> acc;
  for (int i = 0; i < 3; ++i) {
    Tensor<float> p = predict_probs(*nets[std::size_t(i)], vol);
    if (i == 0)
      acc = std::move(p);
    else
      for (std::size_t k = 0; k < acc.data.size(); ++k) acc.data[k] += p.data[k];
  }
  for (auto& v : acc.data) v /= 3.0f;
  LabelMask mask = one_hot_decode(acc);
  mask.meta = vol.meta;
  return mask;
}

// predict with each member, vote, then pad back to the original geometry
inline LabelMask ensemble_predict(std::array<Network<float>*, 3> nets,
                                  const MultiModalVolume& vol, int reference_index = 0,
                                  bool probability_mean = false) {
  LabelMask voted;
  if (probability_mean) {
    voted = probability_mean_fusion(nets, vol);
  } else {
    EnsembleInput inp;
    inp.reference_index = reference_index;
    for (int i = 0; i < 3; ++i)
      inp.members[std::size_t(i)] = predict_subject(*nets[std::size_t(i)], vol);
    voted = majority_vote(inp);
  }
  if (!voted.meta.crop_offset) {
    // uncropped input: prediction is already at original geometry
    if (voted.meta.original_shape == voted.shape) return voted;
    throw MissingMeta("prediction shape differs from original_shape but no crop_offset is set");
  }
  return pad_to_original(voted);
}

}  // namespace voxseg
