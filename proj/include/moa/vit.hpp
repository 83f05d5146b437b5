#pragma once

#include <cstddef>
#include <cstdint>
#include <optional>
#include <set>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/image.hpp"
#include "moa/moa_layer.hpp"
#include "moa/param_decl.hpp"
#include "moa/tape.hpp"

namespace moa {

enum class AdapterMode { None, Single, Mixture };

std::string_view to_string(AdapterMode mode);
AdapterMode parse_adapter_mode(std::string_view text);

/// Where adapters go and what they look like.
///
/// LowRank and Kronecker adapters wrap the fused QKV and the attention output
/// projection. Bottleneck adapters sit on the MLP output. `Single` puts one
/// adapter of rank ranks[0] on every block; `Mixture` puts a MoA layer on
/// blocks whose index is a multiple of `moa_every`, or on the last two blocks
/// when `moa_last2` is set.
struct AdapterPlan {
  AdapterMode mode = AdapterMode::Mixture;
  AdapterKind kind = AdapterKind::LowRank;
  std::vector<std::size_t> ranks{1, 2, 4, 8};
  std::size_t kron_terms = 4;
  bool share_slow = false;
  RouterKind router = RouterKind::Cosine;
  std::size_t top_k = 1;
  std::size_t router_dim = 0;
  std::size_t moa_every = 2;
  bool moa_last2 = false;
};

struct ViTConfig {
  std::size_t image_size = 32;
  std::size_t patch_size = 4;
  std::size_t channels = 3;
  std::size_t d_model = 64;
  std::size_t heads = 4;
  std::size_t depth = 6;
  std::size_t mlp_ratio = 4;
  std::size_t num_classes = 5;
  AdapterPlan plan;

  std::size_t grid_side() const { return image_size / patch_size; }
  std::size_t patches() const { return grid_side() * grid_side(); }
  std::size_t tokens() const { return patches() + 1; }
  std::size_t patch_dim() const { return patch_size * patch_size * channels; }

  void validate() const;
  /// Whether `block` carries adapters under the plan.
  bool block_has_adapter(std::size_t block) const;

  /// 32x32 images, 4x4 patches, width 64, 4 heads, depth 6.
  static ViTConfig toy(std::size_t num_classes);
  /// ViT-B/16 shapes (224 px, 16 px patches, width 768, 12 heads, 12 blocks).
  /// Used for parameter accounting only; far too large to allocate here.
  static ViTConfig vitb16_shapes(std::size_t num_classes);
};

enum class FreezePolicy {
  FullFineTune,
  LinearProbe,
  BiasMSA,
  BiasMSAMLP,
  AttentionOnly,
  AdapterOnly,
  FrozenAll,  // empty mask
};

std::string_view to_string(FreezePolicy policy);
FreezePolicy parse_freeze_policy(std::string_view text);
bool policy_trains(FreezePolicy policy, ParamRole role);

/// Full parameter layout of a configuration, in registration order.
std::vector<ParamDecl> describe_vit(const ViTConfig& config);

std::set<std::string> trainable_mask(std::span<const ParamDecl> layout, FreezePolicy policy);
std::size_t count_trainable(std::span<const ParamDecl> layout, FreezePolicy policy);
std::size_t count_total(std::span<const ParamDecl> layout);
/// Adapter and router scalars only.
std::size_t count_adapter_scalars(std::span<const ParamDecl> layout);

struct ForwardResult {
  Var logits;                          // batch x num_classes
  std::vector<RoutingRecord> records;  // one per MoA layer, in block order
};

/// Pre-norm vision transformer with a frozen base and injected adapters.
///
/// The model owns its layout, adapter wiring, and a default ParamStore.
/// `forward` can also run against any store with the same layout, which is
/// how diagnostics evaluate perturbed copies.
///
/// Backbone weights (embedding, norms, attention, MLP) stand in for a
/// pretrained checkpoint: they come from `backbone_seed`, so every run seed
/// starts from the same backbone. Head, adapters and routers use `seed`.
class ViTModel {
 public:
  static constexpr std::uint64_t kBackboneSeed = 0x7e57ba5eULL;

  ViTModel(ViTConfig config, std::uint64_t seed, FreezePolicy policy = FreezePolicy::AdapterOnly,
           std::uint64_t backbone_seed = kBackboneSeed);

  const ViTConfig& config() const noexcept { return config_; }
  std::uint64_t seed() const noexcept { return seed_; }
  std::uint64_t backbone_seed() const noexcept { return backbone_seed_; }
  const std::vector<ParamDecl>& layout() const noexcept { return layout_; }
  ParamStore& params() noexcept { return params_; }
  const ParamStore& params() const noexcept { return params_; }
  const std::vector<MoALayer>& moa_layers() const noexcept { return moa_layers_; }
  /// The MoA layers of `block` (empty when none).
  std::vector<const MoALayer*> moa_layers_at(std::size_t block) const;

  FreezePolicy policy() const noexcept { return policy_; }
  /// Sets frozen flags on the default store.
  void set_policy(FreezePolicy policy);
  /// Sets frozen flags on any store with this model's layout.
  void apply_policy(ParamStore& store, FreezePolicy policy) const;

  std::set<std::string> trainable_mask(FreezePolicy policy) const;
  std::size_t count_trainable(FreezePolicy policy) const;

  /// Patch embedding with class token and positions, (batch*tokens) x d.
  Var embed(Tape& tape, const ParamStore& store, std::span<const Image* const> images) const;

  ForwardResult forward(Tape& tape, const ParamStore& store,
                        std::span<const Image* const> images) const;
  ForwardResult forward(Tape& tape, std::span<const Image* const> images) const {
    return forward(tape, params_, images);
  }

 private:
  struct BlockWiring {
    std::optional<Adapter> qkv, proj, mlp;
    std::optional<std::size_t> qkv_moa, proj_moa, mlp_moa;  // indices into moa_layers_
  };

  Var adapted(Tape& tape, const ParamStore& store, const std::optional<Adapter>& single,
              const std::optional<std::size_t>& mixture, Var x, Var base,
              std::vector<RoutingRecord>& records) const;

  ViTConfig config_;
  std::uint64_t seed_;
  std::uint64_t backbone_seed_;
  FreezePolicy policy_;
  std::vector<ParamDecl> layout_;
  std::vector<BlockWiring> blocks_;
  std::vector<MoALayer> moa_layers_;
  ParamStore params_;
};

/// Flattens non-overlapping patches, (batch*patches) x patch_dim, patch
/// order row-major over the grid, values ordered (dy, dx, channel).
Tensor patchify(std::span<const Image* const> images, const ViTConfig& config);

}  // namespace moa
