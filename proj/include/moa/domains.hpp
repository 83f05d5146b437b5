#pragma once

#include <cstddef>
#include <cstdint>
#include <filesystem>
#include <span>
#include <vector>

#include "moa/image.hpp"

namespace moa {

/// Appearance transform that defines one synthetic domain. Domains never
/// change which class an image shows, only how it looks.
struct DomainSpec {
  std::size_t domain_id = 0;
  double rotation_deg = 0.0;   // centre of the rotation band
  double rotation_band = 0.0;  // +- jitter around the centre
  std::size_t channel_perm[3] = {0, 1, 2};
  double noise_scale = 0.0;  // background texture amplitude
  double noise_freq = 1.0;   // background texture frequency
  double stroke = 1.0;       // glyph stroke thickness multiplier
};

DomainSpec domain_spec(std::size_t domain_id);

struct Sample {
  Image image;
  std::size_t label = 0;
  std::size_t domain = 0;
};

struct DatasetSpec {
  std::uint64_t seed = 0;
  std::size_t domains = 4;
  std::size_t classes = 5;
  std::size_t per_cell = 20;  // samples per (domain, class)
  std::size_t image_size = 32;
};

/// Samples ordered by domain, then class, then index within the cell.
/// Pixels lie in [0, 1]. Fully determined by `spec`.
std::vector<Sample> generate_dataset(const DatasetSpec& spec);

/// Renders one sample; the dataset generator calls this for every cell.
Image render_sample(const DatasetSpec& spec, std::size_t domain, std::size_t label,
                    std::size_t index);

/// Leave-one-domain-out split: the target domain is held out entirely, every
/// source domain is shuffled and split 80/20 into train and validation.
struct SplitPlan {
  std::size_t target_domain = 0;
  std::vector<std::size_t> source_domains;
  std::vector<std::vector<std::size_t>> train;  // per source domain, dataset indices
  std::vector<std::vector<std::size_t>> val;
  std::vector<std::size_t> target;  // every index of the target domain
};

SplitPlan make_splits(std::span<const Sample> dataset, std::size_t target_domain,
                      std::uint64_t seed);

/// Writes images.bin (little-endian f64, sample-major HWC), labels.bin and
/// domains.bin (u32 each) plus manifest.json describing shapes and domains.
void dump_dataset(std::span<const Sample> dataset, const DatasetSpec& spec,
                  const std::filesystem::path& dir);

}  // namespace moa
