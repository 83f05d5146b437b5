#include "moa/moa_layer.hpp"

#include <cmath>

#include "moa/errors.hpp"

namespace moa {

std::string_view to_string(RouterKind kind) {
  return kind == RouterKind::Cosine ? "cosine" : "linear";
}

RouterKind parse_router_kind(std::string_view text) {
  if (text == "cosine") return RouterKind::Cosine;
  if (text == "linear") return RouterKind::Linear;
  throw ArgumentError("unknown router '" + std::string(text) + "'");
}

MoALayer make_moa_layer(const MoALayerSpec& spec, const std::string& prefix,
                        const std::string& slow_prefix) {
  const std::size_t n = spec.ranks.size();
  if (n == 0) throw ArgumentError("a mixture layer needs at least one expert");
  if (spec.top_k < 1 || spec.top_k > n) {
    throw ArgumentError("top_k=" + std::to_string(spec.top_k) + " outside [1, " +
                        std::to_string(n) + "]");
  }
  MoALayer layer;
  layer.prefix = prefix;
  layer.top_k = spec.top_k;
  for (std::size_t i = 0; i < n; ++i) {
    AdapterSpec as{spec.kind, spec.ranks[i], spec.kron_terms, spec.in_dim, spec.out_dim};
    layer.experts.push_back(make_adapter(as, prefix + ".expert" + std::to_string(i), slow_prefix));
  }
  Router& r = layer.router;
  r.kind = spec.router;
  r.num_experts = n;
  r.in_dim = spec.in_dim;
  if (r.kind == RouterKind::Cosine) {
    r.embed_dim = spec.router_dim != 0 ? spec.router_dim : std::max<std::size_t>(1, spec.in_dim / 2);
    r.embed = prefix + ".router.embed";
    r.proj = prefix + ".router.proj";
    r.temp_raw = prefix + ".router.temp_raw";
  } else {
    r.weight = prefix + ".router.weight";
  }
  return layer;
}

void declare_moa_params(const MoALayer& layer, bool include_slow, std::vector<ParamDecl>& out) {
  for (std::size_t i = 0; i < layer.experts.size(); ++i) {
    declare_adapter_params(layer.experts[i], include_slow && i == 0, out);
  }
  const Router& r = layer.router;
  const auto role = ParamRole::Router;
  if (r.kind == RouterKind::Cosine) {
    const double e = static_cast<double>(r.embed_dim);
    const double d = static_cast<double>(r.in_dim);
    out.push_back({r.embed, r.embed_dim, r.num_experts, role, InitRule::Normal, 1.0 / std::sqrt(e)});
    out.push_back({r.proj, r.embed_dim, r.in_dim, role, InitRule::Normal, 1.0 / std::sqrt(d)});
    // softplus(raw) + tau_min == 1
    const double raw = std::log(std::expm1(1.0 - kMinTemperature));
    out.push_back({r.temp_raw, 1, 1, role, InitRule::Constant, raw});
  } else {
    const double d = static_cast<double>(r.in_dim);
    out.push_back({r.weight, r.num_experts, r.in_dim, role, InitRule::Normal, 1.0 / std::sqrt(d)});
  }
}

std::size_t router_param_count(const Router& r) {
  if (r.kind == RouterKind::Cosine) return r.embed_dim * r.num_experts + r.embed_dim * r.in_dim + 1;
  return r.num_experts * r.in_dim;
}

RouteResult route(Tape& tape, const ParamStore& store, const Router& router, Var x,
                  std::size_t k) {
  if (x.rows() == 0) throw ArgumentError("route: empty token batch");
  if (x.cols() != router.in_dim) {
    throw DimensionError("route: router expects width " + std::to_string(router.in_dim) +
                         ", got " + x.value().shape_string());
  }
  Var logits;
  if (router.kind == RouterKind::Cosine) {
    Var projected = l2_normalize_rows(matmul_nt(x, tape.param(store, router.proj)), kRouterNormEps);
    Var experts = l2_normalize_rows(transpose(tape.param(store, router.embed)), kRouterNormEps);
    Var tau = add_scalar(softplus(tape.param(store, router.temp_raw)), kMinTemperature);
    logits = div_scalar(matmul_nt(projected, experts), tau);
  } else {
    logits = matmul_nt(x, tape.param(store, router.weight));
  }
  RouteResult result;
  result.probs = softmax_rows(logits);
  result.top = top_k(result.probs, k);
  return result;
}

MoAOutput moa_forward(Tape& tape, const ParamStore& store, const MoALayer& layer, Var x,
                      Var base_out) {
  const std::size_t m = x.rows();
  for (const auto& e : layer.experts) {
    if (e.spec.in_dim != x.cols() || e.spec.out_dim != base_out.cols()) {
      throw DimensionError("moa layer '" + layer.prefix + "': expert '" + e.prefix + "' maps " +
                           shape_string(e.spec.out_dim, e.spec.in_dim) + " but tokens are " +
                           x.value().shape_string() + " -> " + base_out.value().shape_string());
    }
  }
  if (base_out.rows() != m) {
    throw DimensionError("moa layer '" + layer.prefix + "': base output " +
                         base_out.value().shape_string() + " does not match tokens " +
                         x.value().shape_string());
  }
  RouteResult routed = route(tape, store, layer.router, x, layer.top_k);
  const std::size_t k = layer.top_k;
  const std::size_t n = layer.experts.size();

  std::vector<std::vector<std::size_t>> rows_of(n);
  for (std::size_t t = 0; t < m; ++t)
    for (std::size_t j = 0; j < k; ++j) rows_of[routed.top.indices[t * k + j]].push_back(t);

  Var out = base_out;
  for (std::size_t i = 0; i < n; ++i) {
    const auto& rows = rows_of[i];
    if (rows.empty()) continue;
    std::vector<std::size_t> cols(rows.size(), i);
    Var gate = pick(routed.probs, rows, cols);
    Var delta = adapter_delta(tape, store, layer.experts[i], gather_rows(x, rows));
    out = add(out, scatter_rows(scale_rows(delta, gate), rows, m));
  }

  RoutingRecord rec;
  rec.block = layer.block;
  rec.attach = layer.attach;
  rec.num_experts = n;
  rec.top_k = k;
  rec.tokens = m;
  rec.indices = routed.top.indices;
  const Tensor& gv = routed.top.values.value();
  rec.gates.assign(gv.data().begin(), gv.data().end());
  rec.probs = routed.probs.value();
  rec.router_input = x.value();
  rec.probs_var = routed.probs;
  return MoAOutput{out, std::move(rec)};
}

namespace {
std::vector<double> top1_fractions(std::span<const RoutingRecord> records, std::size_t n,
                                   std::size_t& tokens) {
  std::vector<double> f(n, 0.0);
  tokens = 0;
  for (const auto& r : records) {
    for (std::size_t t = 0; t < r.tokens; ++t) f[r.indices[t * r.top_k]] += 1.0;
    tokens += r.tokens;
  }
  for (auto& v : f) v /= static_cast<double>(tokens);
  return f;
}
}  // namespace

Var aux_loss(const RoutingRecord& record) {
  if (!record.probs_var.valid()) throw ArgumentError("aux_loss: record has no live probabilities");
  if (record.tokens == 0) throw ArgumentError("aux_loss: no routed tokens");
  std::size_t tokens = 0;
  auto f = top1_fractions(std::span(&record, 1), record.num_experts, tokens);
  Tape& tape = record.probs_var.tape();
  Var frac = tape.constant(Tensor(1, record.num_experts, std::move(f)));
  Var mean_prob = mean_rows(record.probs_var);
  return scale(sum(mul(mean_prob, frac)), static_cast<double>(record.num_experts));
}

double aux_loss_value(std::span<const RoutingRecord> records) {
  if (records.empty()) throw ArgumentError("aux_loss: no records");
  const std::size_t n = records.front().num_experts;
  std::size_t tokens = 0;
  auto f = top1_fractions(records, n, tokens);
  if (tokens == 0) throw ArgumentError("aux_loss: no routed tokens");
  std::vector<double> p(n, 0.0);
  for (const auto& r : records) {
    if (r.num_experts != n) throw ArgumentError("aux_loss: records disagree on expert count");
    for (std::size_t t = 0; t < r.tokens; ++t)
      for (std::size_t i = 0; i < n; ++i) p[i] += r.probs(t, i);
  }
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) total += f[i] * p[i] / static_cast<double>(tokens);
  return static_cast<double>(n) * total;
}

double population_std(std::span<const double> values) {
  if (values.empty()) throw ArgumentError("population_std: no values");
  double mu = 0.0;
  for (double v : values) mu += v;
  mu /= static_cast<double>(values.size());
  double var = 0.0;
  for (double v : values) var += (v - mu) * (v - mu);
  return std::sqrt(var / static_cast<double>(values.size()));
}

AllocationStats allocation_stats(std::span<const RoutingRecord> records) {
  if (records.empty()) throw ArgumentError("allocation_stats: no records");
  const std::size_t n = records.front().num_experts;
  std::vector<double> counts(n, 0.0);
  double total = 0.0;
  for (const auto& r : records) {
    if (r.num_experts != n) throw ArgumentError("allocation_stats: records disagree on expert count");
    for (std::size_t idx : r.indices) counts[idx] += 1.0;
    total += static_cast<double>(r.indices.size());
  }
  if (total == 0.0) throw ArgumentError("allocation_stats: no routed tokens");
  AllocationStats stats;
  stats.fractions.resize(n);
  for (std::size_t i = 0; i < n; ++i) stats.fractions[i] = counts[i] / total;
  stats.stddev = population_std(stats.fractions);
  return stats;
}

}  // namespace moa
