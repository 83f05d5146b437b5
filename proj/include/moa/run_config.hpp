#pragma once

#include <cstddef>
#include <cstdint>
#include <map>
#include <string>
#include <string_view>
#include <utility>
#include <vector>

#include "moa/domains.hpp"
#include "moa/trainer.hpp"
#include "moa/vit.hpp"

namespace moa {

/// Flat key=value experiment description. '#' starts a comment; blank lines
/// are ignored; unknown or repeated keys are rejected.
struct RunConfig {
  std::uint64_t seed = 0;
  // data
  std::size_t domains = 4;
  std::size_t classes = 5;
  std::size_t samples_per_cell = 20;
  std::size_t image_size = 32;
  std::size_t target_domain = 0;
  // model
  std::size_t patch_size = 4;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t depth = 6;
  std::size_t mlp_ratio = 4;
  // adapters
  FreezePolicy freeze_policy = FreezePolicy::AdapterOnly;
  AdapterMode adapter_mode = AdapterMode::Mixture;
  AdapterKind adapter_kind = AdapterKind::LowRank;
  std::vector<std::size_t> ranks{1, 2, 4, 8};
  std::size_t experts = 4;
  std::size_t kron_terms = 4;
  bool share_slow = false;
  std::size_t top_k = 1;
  RouterKind router = RouterKind::Cosine;
  std::size_t router_dim = 0;
  std::size_t moa_every = 2;
  bool moa_last2 = false;
  // optimization
  double aux_scale = 0.01;
  double lr = 5e-5;
  std::size_t steps = 5000;
  std::size_t eval_interval = 200;
  std::size_t batch_per_domain = 32;
  std::string out_dir = "out";

  /// Every recognized key, in canonical order.
  static const std::vector<std::string>& keys();

  static RunConfig parse(std::string_view text);
  static RunConfig from_file(const std::string& path);
  static RunConfig from_pairs(const std::vector<std::pair<std::string, std::string>>& pairs);

  /// Canonical text: every key in canonical order, one per line.
  std::string serialize() const;
  std::vector<std::pair<std::string, std::string>> to_pairs() const;

  /// Throws ConfigError naming the offending key.
  void validate() const;

  ViTConfig vit_config() const;
  DatasetSpec dataset_spec() const;
  TrainConfig train_config() const;
};

/// The synthetic benchmark is one fixed dataset; run seeds only vary
/// initialization, splits and batch order.
inline constexpr std::uint64_t kDatasetSeed = 20240601;

}  // namespace moa
