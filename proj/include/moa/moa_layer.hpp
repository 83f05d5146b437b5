#pragma once

#include <cstddef>
#include <span>
#include <string>
#include <string_view>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/ops.hpp"

namespace moa {

enum class RouterKind { Cosine, Linear };

std::string_view to_string(RouterKind kind);
RouterKind parse_router_kind(std::string_view text);

/// Lower bound of the softmax temperature: tau = softplus(temp_raw) + kMinTemperature.
inline constexpr double kMinTemperature = 0.01;
/// Norm floor used by the cosine router.
inline constexpr double kRouterNormEps = 1e-12;

/// Parameter names of a router.
///
/// Cosine: embed E (e x N), proj W (e x d), temp_raw (1 x 1).
/// Linear: weight (N x d).
struct Router {
  RouterKind kind = RouterKind::Cosine;
  std::size_t num_experts = 0;
  std::size_t in_dim = 0;
  std::size_t embed_dim = 0;
  std::string embed, proj, temp_raw, weight;
};

struct MoALayerSpec {
  AdapterKind kind = AdapterKind::LowRank;
  std::vector<std::size_t> ranks{1, 2, 4, 8};
  std::size_t kron_terms = 1;
  RouterKind router = RouterKind::Cosine;
  std::size_t top_k = 1;
  std::size_t router_dim = 0;  // 0 selects in_dim / 2
  std::size_t in_dim = 0;
  std::size_t out_dim = 0;
};

/// N expert adapters of heterogeneous rank plus a router.
struct MoALayer {
  std::string prefix;
  std::size_t block = 0;
  std::string attach;
  std::vector<Adapter> experts;
  Router router;
  std::size_t top_k = 1;
};

/// Kronecker experts of one layer share the slow set named under
/// `slow_prefix` (pass prefix + ".slow_shared" for per-layer sharing).
MoALayer make_moa_layer(const MoALayerSpec& spec, const std::string& prefix,
                        const std::string& slow_prefix);
void declare_moa_params(const MoALayer& layer, bool include_slow, std::vector<ParamDecl>& out);
/// Router scalars: e*N + e*d + 1 (cosine) or N*d (linear).
std::size_t router_param_count(const Router& router);

/// Routing decisions for one MoA layer over one batch of tokens.
///
/// `gates` are the softmax probabilities at `indices`; experts not listed for
/// a token contribute nothing to it.
struct RoutingRecord {
  std::size_t block = 0;
  std::string attach;
  std::size_t num_experts = 0;
  std::size_t top_k = 0;
  std::size_t tokens = 0;
  std::vector<std::size_t> indices;  // tokens x top_k
  std::vector<double> gates;         // tokens x top_k
  Tensor probs;                      // tokens x N
  Tensor router_input;               // tokens x d, for replaying route()
  Var probs_var;                     // differentiable probs; valid while the tape lives
};

struct RouteResult {
  Var probs;  // tokens x N
  TopK top;
};

/// Cosine: probs = softmax((E_i . W x) / (tau max(|W x|, eps) max(|E_i|, eps))).
/// Linear: probs = softmax(x W^T). Followed by top_k(probs, k).
RouteResult route(Tape& tape, const ParamStore& store, const Router& router, Var x,
                  std::size_t top_k);

struct MoAOutput {
  Var out;
  RoutingRecord record;
};

/// out[t] = base_out[t] + sum over selected i of gate[t, i] * delta_i(x[t]).
/// Gates are raw softmax values and are not renormalized over the top-k set.
MoAOutput moa_forward(Tape& tape, const ParamStore& store, const MoALayer& layer, Var x,
                      Var base_out);

/// Load-balancing loss N * sum_i f_i P_i, where f_i is the fraction of tokens
/// whose top-1 expert is i (a constant) and P_i the mean probability of i.
Var aux_loss(const RoutingRecord& record);
/// Same quantity over the pooled tokens of several records, as a plain value.
double aux_loss_value(std::span<const RoutingRecord> records);

struct AllocationStats {
  std::vector<double> fractions;
  double stddev = 0.0;
};

/// Share of routed (token, expert) selections going to each expert, pooled
/// over records, with the population standard deviation of the shares.
AllocationStats allocation_stats(std::span<const RoutingRecord> records);
double population_std(std::span<const double> values);

}  // namespace moa
