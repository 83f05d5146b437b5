#include "moa/adapters.hpp"

#include "moa/errors.hpp"
#include "moa/ops.hpp"

namespace moa {

namespace {
constexpr double kAdapterInitStd = 0.02;
}

std::string_view to_string(AdapterKind kind) {
  switch (kind) {
    case AdapterKind::LowRank:
      return "lowrank";
    case AdapterKind::Kronecker:
      return "kronecker";
    case AdapterKind::Bottleneck:
      return "bottleneck";
  }
  return "?";
}

AdapterKind parse_adapter_kind(std::string_view text) {
  if (text == "lowrank" || text == "lora") return AdapterKind::LowRank;
  if (text == "kronecker" || text == "kadaptation") return AdapterKind::Kronecker;
  if (text == "bottleneck" || text == "compacter") return AdapterKind::Bottleneck;
  throw ArgumentError("unknown adapter kind '" + std::string(text) + "'");
}

void AdapterSpec::validate() const {
  if (rank < 1) throw ArgumentError("adapter rank must be at least 1");
  if (in_dim == 0 || out_dim == 0) throw ArgumentError("adapter dimensions must be positive");
  if (kind == AdapterKind::Kronecker) {
    if (kron_terms < 1 || out_dim % kron_terms != 0 || in_dim % kron_terms != 0) {
      throw ArgumentError("kronecker terms t=" + std::to_string(kron_terms) +
                          " must divide both k=" + std::to_string(out_dim) +
                          " and d=" + std::to_string(in_dim));
    }
  }
  if (kind == AdapterKind::Bottleneck && in_dim != out_dim) {
    throw ArgumentError("bottleneck adapter needs equal input and output width");
  }
}

Adapter make_adapter(const AdapterSpec& spec, const std::string& prefix,
                     const std::string& slow_prefix) {
  spec.validate();
  Adapter ad;
  ad.spec = spec;
  ad.prefix = prefix;
  switch (spec.kind) {
    case AdapterKind::LowRank:
      ad.a = prefix + ".A";
      ad.b = prefix + ".B";
      break;
    case AdapterKind::Kronecker:
      for (std::size_t i = 0; i < spec.kron_terms; ++i) {
        const auto idx = std::to_string(i);
        ad.slow.push_back(slow_prefix + ".slow" + idx);
        ad.fast_u.push_back(prefix + ".u" + idx);
        ad.fast_v.push_back(prefix + ".v" + idx);
      }
      break;
    case AdapterKind::Bottleneck:
      ad.down = prefix + ".down";
      ad.down_bias = prefix + ".down_bias";
      ad.up = prefix + ".up";
      ad.up_bias = prefix + ".up_bias";
      break;
  }
  return ad;
}

void declare_adapter_params(const Adapter& ad, bool include_slow, std::vector<ParamDecl>& out) {
  const auto& s = ad.spec;
  const auto role = ParamRole::Adapter;
  switch (s.kind) {
    case AdapterKind::LowRank:
      out.push_back({ad.a, s.rank, s.in_dim, role, InitRule::Normal, kAdapterInitStd});
      out.push_back({ad.b, s.out_dim, s.rank, role, InitRule::Zeros, 0.0});
      break;
    case AdapterKind::Kronecker: {
      const std::size_t t = s.kron_terms;
      if (include_slow) {
        for (const auto& name : ad.slow) {
          out.push_back({name, t, t, role, InitRule::ScaledIdentity, 1.0 / static_cast<double>(t)});
        }
      }
      for (std::size_t i = 0; i < t; ++i) {
        out.push_back({ad.fast_u[i], s.out_dim / t, s.rank, role, InitRule::Normal,
                       kAdapterInitStd});
        out.push_back({ad.fast_v[i], s.rank, s.in_dim / t, role, InitRule::Zeros, 0.0});
      }
      break;
    }
    case AdapterKind::Bottleneck:
      out.push_back({ad.down, s.rank, s.in_dim, role, InitRule::Normal, kAdapterInitStd});
      out.push_back({ad.down_bias, 1, s.rank, role, InitRule::Zeros, 0.0});
      out.push_back({ad.up, s.in_dim, s.rank, role, InitRule::Zeros, 0.0});
      out.push_back({ad.up_bias, 1, s.in_dim, role, InitRule::Zeros, 0.0});
      break;
  }
}

Var adapter_densify(Tape& tape, const ParamStore& store, const Adapter& ad) {
  switch (ad.spec.kind) {
    case AdapterKind::LowRank:
      return matmul(tape.param(store, ad.b), tape.param(store, ad.a));
    case AdapterKind::Kronecker: {
      Var total;
      for (std::size_t i = 0; i < ad.spec.kron_terms; ++i) {
        Var fast = matmul(tape.param(store, ad.fast_u[i]), tape.param(store, ad.fast_v[i]));
        Var term = kron(tape.param(store, ad.slow[i]), fast);
        total = total.valid() ? add(total, term) : term;
      }
      return total;
    }
    case AdapterKind::Bottleneck:
      break;
  }
  throw UnsupportedError("bottleneck adapters are nonlinear and have no dense update matrix");
}

Var adapter_delta(Tape& tape, const ParamStore& store, const Adapter& ad, Var x) {
  if (x.cols() != ad.spec.in_dim) {
    throw DimensionError("adapter '" + ad.prefix + "' expects width " +
                         std::to_string(ad.spec.in_dim) + ", got input " +
                         x.value().shape_string());
  }
  switch (ad.spec.kind) {
    case AdapterKind::LowRank:
      return matmul_nt(matmul_nt(x, tape.param(store, ad.a)), tape.param(store, ad.b));
    case AdapterKind::Kronecker:
      return matmul_nt(x, adapter_densify(tape, store, ad));
    case AdapterKind::Bottleneck: {
      Var hidden = gelu(add_row(matmul_nt(x, tape.param(store, ad.down)),
                                tape.param(store, ad.down_bias)));
      return add_row(matmul_nt(hidden, tape.param(store, ad.up)), tape.param(store, ad.up_bias));
    }
  }
  throw UnsupportedError("unknown adapter kind");
}

std::size_t adapter_param_count(const AdapterSpec& spec, std::size_t attach_points,
                                bool share_slow) {
  spec.validate();
  const std::size_t r = spec.rank, k = spec.out_dim, d = spec.in_dim;
  switch (spec.kind) {
    case AdapterKind::LowRank:
      return attach_points * r * (k + d);
    case AdapterKind::Kronecker: {
      const std::size_t t = spec.kron_terms;
      const std::size_t fast = t * r * (k / t + d / t);
      const std::size_t slow = t * t * t;
      return attach_points * fast + (share_slow ? slow : attach_points * slow);
    }
    case AdapterKind::Bottleneck:
      return attach_points * (2 * r * d + r + d);
  }
  return 0;
}

}  // namespace moa
