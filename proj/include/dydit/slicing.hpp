#pragma once

#include <cstdint>
#include <vector>

#include "dydit/model.hpp"

namespace dydit {

/// Block weights restricted to the active heads and channel groups, stored
/// contiguously in ascending head/group order.
template <typename T>
struct SlicedBlock {
  BasicTensor<T> w_q, w_k, w_v;  // C x (H_active * C_H)
  BasicTensor<T> w_o;            // (H_active * C_H) x C
  BasicTensor<T> w_1;            // C x (G_active * D_H)
  BasicTensor<T> w_2;            // (G_active * D_H) x C
  int active_heads = 0;
  int active_groups = 0;
};

namespace detail {

template <typename T>
BasicTensor<T> slice_columns(const BasicTensor<T>& w, const std::vector<std::uint8_t>& mask, std::int64_t width) {
  const std::int64_t rows = w.dim(0);
  const std::int64_t cols = w.dim(1);
  std::int64_t active = 0;
  for (auto m : mask) active += m;
  BasicTensor<T> out(Shape{rows, active * width});
  auto o = out.mutable_data();
  auto src = w.data();
  std::size_t at = 0;
  for (std::int64_t r = 0; r < rows; ++r)
    for (std::size_t g = 0; g < mask.size(); ++g) {
      if (!mask[g]) continue;
      const auto base = static_cast<std::size_t>(r * cols + static_cast<std::int64_t>(g) * width);
      for (std::int64_t j = 0; j < width; ++j) o[at++] = src[base + static_cast<std::size_t>(j)];
    }
  return out;
}

template <typename T>
BasicTensor<T> slice_rows(const BasicTensor<T>& w, const std::vector<std::uint8_t>& mask, std::int64_t width) {
  const std::int64_t cols = w.dim(1);
  std::int64_t active = 0;
  for (auto m : mask) active += m;
  BasicTensor<T> out(Shape{active * width, cols});
  auto o = out.mutable_data();
  auto src = w.data();
  std::size_t at = 0;
  for (std::size_t g = 0; g < mask.size(); ++g) {
    if (!mask[g]) continue;
    const auto begin = static_cast<std::size_t>(static_cast<std::int64_t>(g) * width * cols);
    const auto len = static_cast<std::size_t>(width * cols);
    std::copy_n(src.begin() + static_cast<std::ptrdiff_t>(begin), len, o.begin() + static_cast<std::ptrdiff_t>(at));
    at += len;
  }
  return out;
}

}  // namespace detail

template <typename T>
SlicedBlock<T> slice_block(const BlockWeights<T>& block, const ModelConfig& cfg,
                           const std::vector<std::uint8_t>& head_mask, const std::vector<std::uint8_t>& channel_mask) {
  require(static_cast<int>(head_mask.size()) == cfg.heads && static_cast<int>(channel_mask.size()) == cfg.heads,
          "slice_block: masks must have ", cfg.heads, " entries");
  SlicedBlock<T> s;
  for (auto m : head_mask) s.active_heads += m ? 1 : 0;
  for (auto m : channel_mask) s.active_groups += m ? 1 : 0;
  require(s.active_heads >= 1, "slice_block: head mask has no active head");
  require(s.active_groups >= 1, "slice_block: channel mask has no active group");
  const std::int64_t ch = cfg.head_dim();
  const std::int64_t dh = cfg.group_dim();
  s.w_q = detail::slice_columns(block.w_q, head_mask, ch);
  s.w_k = detail::slice_columns(block.w_k, head_mask, ch);
  s.w_v = detail::slice_columns(block.w_v, head_mask, ch);
  s.w_o = detail::slice_rows(block.w_o, head_mask, ch);
  s.w_1 = detail::slice_columns(block.w_1, channel_mask, dh);
  s.w_2 = detail::slice_rows(block.w_2, channel_mask, dh);
  return s;
}

}  // namespace dydit
