#pragma once

#include <cmath>
#include <vector>

#include "asymdsd/common.hpp"
#include "asymdsd/geometry.hpp"
#include "asymdsd/rng.hpp"

namespace asymdsd::masking {

// Target masked-bit count. Rounding is half-up; the exact-ratio contract
// of every sampler below is defined in terms of this.
inline int masked_count(double mask_ratio, int n_patches) {
  return int(std::floor(mask_ratio * n_patches + 0.5));
}

// Number of visible blocks to sample for inverse block-wise masking:
// N_B = round(N_c * ((1 - M_r) + A_r) / B_s).
inline int block_count(int n_patches, double mask_ratio, double adjust_ratio,
                       int block_size) {
  return int(std::floor(n_patches * ((1.0 - mask_ratio) + adjust_ratio) /
                            block_size + 0.5));
}

struct MaskSample {
  std::vector<uint8_t> mask;       // true = masked
  std::vector<int> seeds;          // visible block seed patch indices
  std::vector<uint8_t> pre_swap;   // mask before the bit-swap correction
  int swaps = 0;
};

// One or more masks over the same patch set.
struct MaskSet {
  std::vector<std::vector<uint8_t>> masks;  // N_mm rows of N_c bits
  double mask_ratio = 0.7;
  int block_size = 6;
  double adjust_ratio = 0.1;

  int n_masks() const { return int(masks.size()); }
  int n_patches() const { return masks.empty() ? 0 : int(masks[0].size()); }

  std::vector<int> masked_indices(int row) const {
    std::vector<int> out;
    for (int i = 0; i < int(masks[size_t(row)].size()); ++i)
      if (masks[size_t(row)][size_t(i)]) out.push_back(i);
    return out;
  }
  std::vector<int> visible_indices(int row) const {
    std::vector<int> out;
    for (int i = 0; i < int(masks[size_t(row)].size()); ++i)
      if (!masks[size_t(row)][size_t(i)]) out.push_back(i);
    return out;
  }
};

// Exactly round(M_r * N_c) patches masked, uniformly at random.
inline std::vector<uint8_t> sample_uniform(int n_patches, double mask_ratio,
                                           Rng& rng) {
  check(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask: ratio must be in [0, 1)");
  std::vector<uint8_t> mask(size_t(n_patches), 0);
  const int m = masked_count(mask_ratio, n_patches);
  for (int idx : rng.sample_without_replacement(n_patches, m))
    mask[size_t(idx)] = 1;
  return mask;
}

// Inverse block-wise masking: keep N_B visible blocks, each the block_size
// nearest patches around a seed patch, mask everything else, then flip
// random bits of the over-represented class until the masked count is
// exactly round(M_r * N_c).
inline MaskSample sample_inverse_blockwise(const Tensor& centers,
                                           double mask_ratio, int block_size,
                                           double adjust_ratio, Rng& rng) {
  const int n = centers.rows();
  check(mask_ratio >= 0.0 && mask_ratio < 1.0, "mask: ratio must be in [0, 1)");
  check(block_size >= 1, "mask: block size must be >= 1");
  MaskSample out;
  if (mask_ratio == 0.0) {
    out.mask.assign(size_t(n), 0);
    out.pre_swap = out.mask;
    return out;
  }
  const int n_blocks = block_count(n, mask_ratio, adjust_ratio, block_size);
  if (n_blocks == 0) {
    warn("inverse block-wise mask: block count is zero for N_c=", n,
         ", falling back to uniform masking");
    out.mask = sample_uniform(n, mask_ratio, rng);
    out.pre_swap = out.mask;
    return out;
  }

  out.seeds = rng.sample_without_replacement(n, std::min(n_blocks, n));
  out.mask.assign(size_t(n), 1);
  const int ball = std::min(block_size, n);
  Tensor seed_pos({int(out.seeds.size()), 3});
  for (size_t i = 0; i < out.seeds.size(); ++i)
    std::copy(centers.row(out.seeds[i]), centers.row(out.seeds[i]) + 3,
              seed_pos.row(int(i)));
  const auto balls = geometry::knn(seed_pos, centers, ball);
  for (const auto& b : balls)
    for (int idx : b) out.mask[size_t(idx)] = 0;
  out.pre_swap = out.mask;

  const int target = masked_count(mask_ratio, n);
  int cur = 0;
  for (uint8_t b : out.mask) cur += b;
  while (cur != target) {
    const uint8_t from = cur > target ? 1 : 0;
    std::vector<int> pool;
    for (int i = 0; i < n; ++i)
      if (out.mask[size_t(i)] == from) pool.push_back(i);
    const int flip = pool[rng.uniform_int(pool.size())];
    out.mask[size_t(flip)] = !from;
    cur += from ? -1 : 1;
    ++out.swaps;
  }
  return out;
}

// N_mm independent inverse block-wise masks over the same patch set.
inline MaskSet build_multimask(const Tensor& centers, double mask_ratio,
                               int block_size, double adjust_ratio, int n_masks,
                               Rng& rng) {
  check(n_masks >= 1, "multimask: N_mm must be >= 1");
  MaskSet set;
  set.mask_ratio = mask_ratio;
  set.block_size = block_size;
  set.adjust_ratio = adjust_ratio;
  set.masks.reserve(size_t(n_masks));
  for (int i = 0; i < n_masks; ++i)
    set.masks.push_back(
        sample_inverse_blockwise(centers, mask_ratio, block_size, adjust_ratio, rng)
            .mask);
  return set;
}

}  // namespace asymdsd::masking
