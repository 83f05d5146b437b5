#include "moa/vit.hpp"

#include <cmath>

#include "moa/errors.hpp"
#include "moa/ops.hpp"

namespace moa {

std::string_view to_string(AdapterMode mode) {
  switch (mode) {
    case AdapterMode::None:
      return "none";
    case AdapterMode::Single:
      return "single";
    case AdapterMode::Mixture:
      return "moa";
  }
  return "?";
}

AdapterMode parse_adapter_mode(std::string_view text) {
  if (text == "none") return AdapterMode::None;
  if (text == "single") return AdapterMode::Single;
  if (text == "moa") return AdapterMode::Mixture;
  throw ArgumentError("unknown adapter mode '" + std::string(text) + "'");
}

std::string_view to_string(FreezePolicy policy) {
  switch (policy) {
    case FreezePolicy::FullFineTune:
      return "full";
    case FreezePolicy::LinearProbe:
      return "linear_probe";
    case FreezePolicy::BiasMSA:
      return "bias_msa";
    case FreezePolicy::BiasMSAMLP:
      return "bias_msa_mlp";
    case FreezePolicy::AttentionOnly:
      return "attention_only";
    case FreezePolicy::AdapterOnly:
      return "adapter_only";
    case FreezePolicy::FrozenAll:
      return "frozen";
  }
  return "?";
}

FreezePolicy parse_freeze_policy(std::string_view text) {
  for (auto p : {FreezePolicy::FullFineTune, FreezePolicy::LinearProbe, FreezePolicy::BiasMSA,
                 FreezePolicy::BiasMSAMLP, FreezePolicy::AttentionOnly, FreezePolicy::AdapterOnly,
                 FreezePolicy::FrozenAll}) {
    if (text == to_string(p)) return p;
  }
  throw ArgumentError("unknown freeze policy '" + std::string(text) + "'");
}

bool policy_trains(FreezePolicy policy, ParamRole role) {
  switch (policy) {
    case FreezePolicy::FullFineTune:
      return true;
    case FreezePolicy::LinearProbe:
      return role == ParamRole::Head;
    case FreezePolicy::BiasMSA:
      return role == ParamRole::Head || role == ParamRole::AttnBias;
    case FreezePolicy::BiasMSAMLP:
      return role == ParamRole::Head || role == ParamRole::AttnBias || role == ParamRole::MlpBias;
    case FreezePolicy::AttentionOnly:
      return role == ParamRole::Head || role == ParamRole::AttnBias ||
             role == ParamRole::AttnWeight;
    case FreezePolicy::AdapterOnly:
      return role == ParamRole::Head || role == ParamRole::Adapter || role == ParamRole::Router;
    case FreezePolicy::FrozenAll:
      return false;
  }
  return false;
}

void ViTConfig::validate() const {
  if (patch_size == 0 || image_size % patch_size != 0) {
    throw ArgumentError("image_size " + std::to_string(image_size) +
                        " is not divisible by patch_size " + std::to_string(patch_size));
  }
  if (heads == 0 || d_model % heads != 0) {
    throw ArgumentError("d_model " + std::to_string(d_model) + " is not divisible by heads " +
                        std::to_string(heads));
  }
  if (depth == 0 || mlp_ratio == 0 || channels == 0) throw ArgumentError("empty model dimensions");
  if (num_classes < 2) throw ArgumentError("need at least two classes");
  if (plan.mode != AdapterMode::None && plan.ranks.empty()) {
    throw ArgumentError("adapter plan has no ranks");
  }
  if (plan.mode == AdapterMode::Mixture) {
    if (plan.top_k < 1 || plan.top_k > plan.ranks.size()) {
      throw ArgumentError("top_k must lie in [1, experts]");
    }
    if (!plan.moa_last2 && plan.moa_every == 0) throw ArgumentError("moa_every must be positive");
  }
}

bool ViTConfig::block_has_adapter(std::size_t block) const {
  switch (plan.mode) {
    case AdapterMode::None:
      return false;
    case AdapterMode::Single:
      return true;
    case AdapterMode::Mixture:
      if (plan.moa_last2) return block + 2 >= depth;
      return block % plan.moa_every == 0;
  }
  return false;
}

ViTConfig ViTConfig::toy(std::size_t num_classes) {
  ViTConfig c;
  c.num_classes = num_classes;
  return c;
}

ViTConfig ViTConfig::vitb16_shapes(std::size_t num_classes) {
  ViTConfig c;
  c.image_size = 224;
  c.patch_size = 16;
  c.d_model = 768;
  c.heads = 12;
  c.depth = 12;
  c.num_classes = num_classes;
  return c;
}

namespace {

struct Wiring {
  std::vector<ParamDecl> layout;
  struct Block {
    std::optional<Adapter> qkv, proj, mlp;
    std::optional<std::size_t> qkv_moa, proj_moa, mlp_moa;
  };
  std::vector<Block> blocks;
  std::vector<MoALayer> moa_layers;
};

ParamDecl weight(std::string name, std::size_t out, std::size_t in, ParamRole role) {
  return {std::move(name), out, in, role, InitRule::Normal, 1.0 / std::sqrt(static_cast<double>(in))};
}
ParamDecl zeros(std::string name, std::size_t rows, std::size_t cols, ParamRole role) {
  return {std::move(name), rows, cols, role, InitRule::Zeros, 0.0};
}
ParamDecl ones(std::string name, std::size_t cols, ParamRole role) {
  return {std::move(name), 1, cols, role, InitRule::Ones, 0.0};
}

Wiring build(const ViTConfig& c) {
  c.validate();
  Wiring w;
  auto& L = w.layout;
  const std::size_t d = c.d_model;
  const auto& plan = c.plan;

  L.push_back(weight("patch_embed.weight", d, c.patch_dim(), ParamRole::Embedding));
  L.push_back(zeros("patch_embed.bias", 1, d, ParamRole::Embedding));
  L.push_back({"cls_token", 1, d, ParamRole::Embedding, InitRule::Normal, 0.02});
  L.push_back({"pos_embed", c.tokens(), d, ParamRole::Embedding, InitRule::Normal, 0.02});

  const bool kron = plan.kind == AdapterKind::Kronecker;
  const bool global_slow = kron && plan.share_slow && plan.mode != AdapterMode::None;
  const std::string global_slow_prefix = "adapters";
  bool global_slow_declared = false;
  auto want_global_slow = [&]() {
    const bool first = !global_slow_declared;
    global_slow_declared = true;
    return first;
  };

  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    Wiring::Block blk;
    L.push_back(ones(p + ".norm1.weight", d, ParamRole::Norm));
    L.push_back(zeros(p + ".norm1.bias", 1, d, ParamRole::Norm));
    L.push_back(weight(p + ".attn.qkv.weight", 3 * d, d, ParamRole::AttnWeight));
    L.push_back(zeros(p + ".attn.qkv.bias", 1, 3 * d, ParamRole::AttnBias));
    L.push_back(weight(p + ".attn.proj.weight", d, d, ParamRole::AttnWeight));
    L.push_back(zeros(p + ".attn.proj.bias", 1, d, ParamRole::AttnBias));
    L.push_back(ones(p + ".norm2.weight", d, ParamRole::Norm));
    L.push_back(zeros(p + ".norm2.bias", 1, d, ParamRole::Norm));
    const std::size_t hidden = d * c.mlp_ratio;
    L.push_back(weight(p + ".mlp.fc1.weight", hidden, d, ParamRole::MlpWeight));
    L.push_back(zeros(p + ".mlp.fc1.bias", 1, hidden, ParamRole::MlpBias));
    L.push_back(weight(p + ".mlp.fc2.weight", d, hidden, ParamRole::MlpWeight));
    L.push_back(zeros(p + ".mlp.fc2.bias", 1, d, ParamRole::MlpBias));

    if (c.block_has_adapter(b)) {
      struct Point {
        std::string name;
        std::size_t in, out;
      };
      std::vector<Point> points;
      if (plan.kind == AdapterKind::Bottleneck) {
        points.push_back({p + ".mlp", d, d});
      } else {
        points.push_back({p + ".attn.qkv", d, 3 * d});
        points.push_back({p + ".attn.proj", d, d});
      }
      for (const auto& pt : points) {
        const bool is_qkv = pt.name.ends_with(".qkv");
        const bool is_proj = pt.name.ends_with(".proj");
        if (plan.mode == AdapterMode::Single) {
          const std::string prefix = pt.name + ".adapter";
          const std::string slow_prefix = global_slow ? global_slow_prefix : prefix;
          AdapterSpec spec{plan.kind, plan.ranks.front(), plan.kron_terms, pt.in, pt.out};
          Adapter ad = make_adapter(spec, prefix, slow_prefix);
          declare_adapter_params(ad, global_slow ? want_global_slow() : true, L);
          (is_qkv ? blk.qkv : is_proj ? blk.proj : blk.mlp) = std::move(ad);
        } else {
          const std::string prefix = pt.name + ".moa";
          const std::string slow_prefix = global_slow ? global_slow_prefix : prefix;
          MoALayerSpec spec;
          spec.kind = plan.kind;
          spec.ranks = plan.ranks;
          spec.kron_terms = plan.kron_terms;
          spec.router = plan.router;
          spec.top_k = plan.top_k;
          spec.router_dim = plan.router_dim;
          spec.in_dim = pt.in;
          spec.out_dim = pt.out;
          MoALayer layer = make_moa_layer(spec, prefix, slow_prefix);
          layer.block = b;
          layer.attach = is_qkv ? "qkv" : is_proj ? "proj" : "mlp";
          declare_moa_params(layer, global_slow ? want_global_slow() : true, L);
          (is_qkv ? blk.qkv_moa : is_proj ? blk.proj_moa : blk.mlp_moa) = w.moa_layers.size();
          w.moa_layers.push_back(std::move(layer));
        }
      }
    }
    w.blocks.push_back(std::move(blk));
  }
  L.push_back(ones("norm.weight", d, ParamRole::Norm));
  L.push_back(zeros("norm.bias", 1, d, ParamRole::Norm));
  L.push_back({"head.weight", c.num_classes, d, ParamRole::Head, InitRule::Normal, 0.02});
  L.push_back(zeros("head.bias", 1, c.num_classes, ParamRole::Head));
  return w;
}

}  // namespace

std::vector<ParamDecl> describe_vit(const ViTConfig& config) { return build(config).layout; }

std::set<std::string> trainable_mask(std::span<const ParamDecl> layout, FreezePolicy policy) {
  std::set<std::string> names;
  for (const auto& d : layout) {
    if (policy_trains(policy, d.role)) names.insert(d.name);
  }
  return names;
}

std::size_t count_trainable(std::span<const ParamDecl> layout, FreezePolicy policy) {
  std::size_t n = 0;
  for (const auto& d : layout) {
    if (policy_trains(policy, d.role)) n += d.scalars();
  }
  return n;
}

std::size_t count_total(std::span<const ParamDecl> layout) {
  std::size_t n = 0;
  for (const auto& d : layout) n += d.scalars();
  return n;
}

std::size_t count_adapter_scalars(std::span<const ParamDecl> layout) {
  std::size_t n = 0;
  for (const auto& d : layout) {
    if (d.role == ParamRole::Adapter || d.role == ParamRole::Router) n += d.scalars();
  }
  return n;
}

ViTModel::ViTModel(ViTConfig config, std::uint64_t seed, FreezePolicy policy,
                   std::uint64_t backbone_seed)
    : config_(std::move(config)), seed_(seed), backbone_seed_(backbone_seed), policy_(policy) {
  Wiring w = build(config_);
  layout_ = std::move(w.layout);
  moa_layers_ = std::move(w.moa_layers);
  for (auto& b : w.blocks) {
    blocks_.push_back(BlockWiring{std::move(b.qkv), std::move(b.proj), std::move(b.mlp),
                                  b.qkv_moa, b.proj_moa, b.mlp_moa});
  }
  for (const auto& d : layout_) {
    const bool run_owned =
        d.role == ParamRole::Head || d.role == ParamRole::Adapter || d.role == ParamRole::Router;
    params_.add(d.name, initial_value(d, run_owned ? seed_ : backbone_seed_));
  }
  set_policy(policy_);
}

std::vector<const MoALayer*> ViTModel::moa_layers_at(std::size_t block) const {
  std::vector<const MoALayer*> out;
  for (const auto& l : moa_layers_) {
    if (l.block == block) out.push_back(&l);
  }
  return out;
}

void ViTModel::set_policy(FreezePolicy policy) {
  policy_ = policy;
  apply_policy(params_, policy);
}

void ViTModel::apply_policy(ParamStore& store, FreezePolicy policy) const {
  if (store.size() != layout_.size()) {
    throw ArgumentError("apply_policy: store does not match model layout");
  }
  for (std::size_t i = 0; i < layout_.size(); ++i) {
    store.entries()[i].frozen = !policy_trains(policy, layout_[i].role);
  }
}

std::set<std::string> ViTModel::trainable_mask(FreezePolicy policy) const {
  return moa::trainable_mask(layout_, policy);
}

std::size_t ViTModel::count_trainable(FreezePolicy policy) const {
  return moa::count_trainable(layout_, policy);
}

Tensor patchify(std::span<const Image* const> images, const ViTConfig& c) {
  if (images.empty()) throw ArgumentError("patchify: empty batch");
  const std::size_t ps = c.patch_size, side = c.grid_side();
  Tensor out(images.size() * c.patches(), c.patch_dim());
  for (std::size_t b = 0; b < images.size(); ++b) {
    const Image& img = *images[b];
    if (img.height != c.image_size || img.width != c.image_size || img.channels != c.channels) {
      throw DimensionError("patchify: image " + std::to_string(img.height) + "x" +
                           std::to_string(img.width) + "x" + std::to_string(img.channels) +
                           " does not match configured " + std::to_string(c.image_size) + "x" +
                           std::to_string(c.image_size) + "x" + std::to_string(c.channels));
    }
    for (std::size_t py = 0; py < side; ++py)
      for (std::size_t px = 0; px < side; ++px) {
        const std::size_t row = b * c.patches() + py * side + px;
        std::size_t col = 0;
        for (std::size_t dy = 0; dy < ps; ++dy)
          for (std::size_t dx = 0; dx < ps; ++dx)
            for (std::size_t ch = 0; ch < c.channels; ++ch)
              out(row, col++) = img.at(py * ps + dy, px * ps + dx, ch);
      }
  }
  return out;
}

Var ViTModel::embed(Tape& tape, const ParamStore& store,
                    std::span<const Image* const> images) const {
  const std::size_t batch = images.size();
  const std::size_t np = config_.patches(), nt = config_.tokens();
  Var patches = tape.constant(patchify(images, config_));
  Var emb = add_row(matmul_nt(patches, tape.param(store, "patch_embed.weight")),
                    tape.param(store, "patch_embed.bias"));
  Var cls = gather_rows(tape.param(store, "cls_token"), std::vector<std::size_t>(batch, 0));
  Var stacked = concat_rows({cls, emb});
  // stacked holds [cls_0 .. cls_{B-1}, patches of image 0, patches of image 1, ...].
  std::vector<std::size_t> order(batch * nt), pos_index(batch * nt);
  for (std::size_t b = 0; b < batch; ++b) {
    order[b * nt] = b;
    for (std::size_t p = 0; p < np; ++p) order[b * nt + 1 + p] = batch + b * np + p;
    for (std::size_t t = 0; t < nt; ++t) pos_index[b * nt + t] = t;
  }
  return add(gather_rows(stacked, order), gather_rows(tape.param(store, "pos_embed"), pos_index));
}

Var ViTModel::adapted(Tape& tape, const ParamStore& store, const std::optional<Adapter>& single,
                      const std::optional<std::size_t>& mixture, Var x, Var base,
                      std::vector<RoutingRecord>& records) const {
  if (single) return add(base, adapter_delta(tape, store, *single, x));
  if (mixture) {
    MoAOutput r = moa_forward(tape, store, moa_layers_[*mixture], x, base);
    records.push_back(std::move(r.record));
    return r.out;
  }
  return base;
}

ForwardResult ViTModel::forward(Tape& tape, const ParamStore& store,
                                std::span<const Image* const> images) const {
  if (images.empty()) throw ArgumentError("forward: empty batch");
  const std::size_t batch = images.size(), nt = config_.tokens();
  ForwardResult result;
  auto P = [&](const std::string& name) { return tape.param(store, name); };
  auto linear = [&](Var x, const std::string& prefix) {
    return add_row(matmul_nt(x, P(prefix + ".weight")), P(prefix + ".bias"));
  };

  Var x = embed(tape, store, images);
  for (std::size_t b = 0; b < config_.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    const BlockWiring& wire = blocks_[b];

    Var h = layer_norm(x, P(p + ".norm1.weight"), P(p + ".norm1.bias"));
    Var qkv = adapted(tape, store, wire.qkv, wire.qkv_moa, h, linear(h, p + ".attn.qkv"),
                      result.records);
    Var att = attention(qkv, batch, nt, config_.heads);
    Var proj = adapted(tape, store, wire.proj, wire.proj_moa, att, linear(att, p + ".attn.proj"),
                       result.records);
    x = add(x, proj);

    Var h2 = layer_norm(x, P(p + ".norm2.weight"), P(p + ".norm2.bias"));
    Var mlp = linear(gelu(linear(h2, p + ".mlp.fc1")), p + ".mlp.fc2");
    mlp = adapted(tape, store, wire.mlp, wire.mlp_moa, mlp, mlp, result.records);
    x = add(x, mlp);
  }
  Var normed = layer_norm(x, P("norm.weight"), P("norm.bias"));
  std::vector<std::size_t> cls_rows(batch);
  for (std::size_t b = 0; b < batch; ++b) cls_rows[b] = b * nt;
  result.logits = linear(gather_rows(normed, cls_rows), "head");
  return result;
}

}  // namespace moa
