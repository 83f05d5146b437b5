#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <vector>

#include "moa/param_decl.hpp"
#include "moa/tape.hpp"

namespace moa {

enum class AdapterKind { LowRank, Kronecker, Bottleneck };

std::string_view to_string(AdapterKind kind);
AdapterKind parse_adapter_kind(std::string_view text);

/// Configuration of one adapter attached to a frozen k x d weight W0.
struct AdapterSpec {
  AdapterKind kind = AdapterKind::LowRank;
  std::size_t rank = 1;
  std::size_t kron_terms = 1;  // t, Kronecker only
  std::size_t in_dim = 0;      // d
  std::size_t out_dim = 0;     // k

  /// Throws ArgumentError on rank 0, empty dims, t not dividing both k and d,
  /// or a bottleneck with k != d.
  void validate() const;
};

/// Parameter names of one adapter inside a ParamStore.
///
///   LowRank:    A (r x d), B (k x r)
///   Kronecker:  slow[i] (t x t), fast_u[i] (k/t x r), fast_v[i] (r x d/t), i < t
///   Bottleneck: down (r x d), down_bias (1 x r), up (d x r), up_bias (1 x d)
struct Adapter {
  AdapterSpec spec;
  std::string prefix;
  std::string a, b;
  std::vector<std::string> slow, fast_u, fast_v;
  std::string down, down_bias, up, up_bias;
};

/// Names the adapter's parameters under `prefix`. Kronecker slow weights are
/// named under `slow_prefix` so several adapters can share one set.
Adapter make_adapter(const AdapterSpec& spec, const std::string& prefix,
                     const std::string& slow_prefix);

/// Declarations with the zero-delta initialization: LowRank A ~ N(0, 0.02^2)
/// and B = 0; Kronecker u ~ N(0, 0.02^2), v = 0, slow = I/t; Bottleneck down ~
/// N(0, 0.02^2), up and biases 0. Slow weights are emitted only when
/// `include_slow` is set, so a shared set is declared once.
void declare_adapter_params(const Adapter& adapter, bool include_slow,
                            std::vector<ParamDecl>& out);

/// Delta added to the frozen path for tokens x (tokens x d), tokens x k.
Var adapter_delta(Tape& tape, const ParamStore& store, const Adapter& adapter, Var x);

/// Dense update matrix (k x d). Bottleneck adapters have none.
Var adapter_densify(Tape& tape, const ParamStore& store, const Adapter& adapter);

/// Trainable scalars of `attach_points` adapters of this spec. With
/// `share_slow`, one Kronecker slow set (t^3 scalars) is counted once;
/// otherwise once per point.
std::size_t adapter_param_count(const AdapterSpec& spec, std::size_t attach_points,
                                bool share_slow);

}  // namespace moa
