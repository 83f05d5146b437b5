#include <gtest/gtest.h>

#include <cmath>

#include "moa/errors.hpp"
#include "moa/moa_layer.hpp"
#include "moa/numeric_grad.hpp"
#include "moa/ops.hpp"
#include "support/support.hpp"

namespace moa {
namespace {

struct Layer {
  MoALayer layer;
  ParamStore store;
};

Layer build(const MoALayerSpec& spec, std::uint64_t seed, double perturb_sd) {
  Layer l;
  l.layer = make_moa_layer(spec, "m", "m");
  std::vector<ParamDecl> decls;
  declare_moa_params(l.layer, true, decls);
  materialize(decls, seed, l.store);
  if (perturb_sd > 0) test::perturb(l.store, seed, perturb_sd);
  return l;
}

MoALayerSpec spec_for(AdapterKind kind, std::size_t top_k, RouterKind router = RouterKind::Cosine) {
  MoALayerSpec s;
  s.kind = kind;
  s.ranks = {1, 2, 3, 2};
  s.kron_terms = 2;
  s.router = router;
  s.top_k = top_k;
  s.router_dim = 3;
  s.in_dim = 6;
  s.out_dim = kind == AdapterKind::Bottleneck ? 6 : 4;
  return s;
}

TEST(Router, CosineMatchesLoopOracle) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    for (auto kind : {RouterKind::Cosine, RouterKind::Linear}) {
      Layer l = build(spec_for(AdapterKind::LowRank, 2, kind), seed, 0.3);
      Rng rng(seed);
      Tensor x = test::random_tensor(rng, 7, 6);
      Tape tape(false);
      RouteResult r = route(tape, l.store, l.layer.router, tape.constant(x), 2);
      test::RefRoute ref = test::ref_route(l.store, l.layer.router, x, 2);
      EXPECT_LE(test::max_abs_diff(r.probs.value(), ref.probs), 1e-12);
      EXPECT_EQ(r.top.indices, ref.indices);
    }
  }
}

TEST(Router, CosineIsScaleInvariant) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Layer l = build(spec_for(AdapterKind::LowRank, 2), seed, 0.3);
    Rng rng(seed);
    Tensor x = test::random_tensor(rng, 9, 6);
    const double c = std::exp(rng.uniform(-3.0, 3.0));
    Tensor xc = x;
    for (std::size_t i = 0; i < xc.size(); ++i) xc[i] *= c;
    Tape tape(false);
    RouteResult a = route(tape, l.store, l.layer.router, tape.constant(x), 2);
    RouteResult b = route(tape, l.store, l.layer.router, tape.constant(xc), 2);
    EXPECT_EQ(a.top.indices, b.top.indices);
    EXPECT_LE(test::max_abs_diff(a.probs.value(), b.probs.value()), 1e-12) << "c=" << c;
  }
}

TEST(Router, InitialTemperatureIsOne) {
  Layer l = build(spec_for(AdapterKind::LowRank, 1), 0, 0.0);
  const double raw = l.store.at("m.router.temp_raw").value.item();
  EXPECT_NEAR(std::log1p(std::exp(raw)) + kMinTemperature, 1.0, 1e-12);
}

TEST(Router, ProbabilitiesFormADistribution) {
  Layer l = build(spec_for(AdapterKind::LowRank, 1), 4, 0.3);
  Rng rng(4);
  Tape tape(false);
  RouteResult r = route(tape, l.store, l.layer.router, tape.constant(test::random_tensor(rng, 5, 6)), 1);
  for (std::size_t t = 0; t < 5; ++t) {
    double s = 0.0;
    for (std::size_t i = 0; i < 4; ++i) s += r.probs.value()(t, i);
    EXPECT_NEAR(s, 1.0, 1e-12);
  }
}

TEST(Router, ZeroInputRoutesUniformlyToExpertZero) {
  // A zero token has no direction: every logit is 0, so probabilities are
  // uniform and the lowest index wins the tie.
  Layer l = build(spec_for(AdapterKind::LowRank, 2), 2, 0.3);
  Tape tape(false);
  RouteResult r = route(tape, l.store, l.layer.router, tape.constant(Tensor(3, 6)), 2);
  for (std::size_t t = 0; t < 3; ++t) {
    EXPECT_EQ(r.top.indices[t * 2], 0u);
    EXPECT_EQ(r.top.indices[t * 2 + 1], 1u);
    for (std::size_t i = 0; i < 4; ++i) EXPECT_NEAR(r.probs.value()(t, i), 0.25, 1e-15);
  }
}

TEST(Router, DimensionMismatchThrows) {
  Layer l = build(spec_for(AdapterKind::LowRank, 1), 0, 0.0);
  Tape tape(false);
  EXPECT_THROW(route(tape, l.store, l.layer.router, tape.constant(Tensor(2, 5)), 1), DimensionError);
}

TEST(MoA, TopKOfAllEqualsDenseMixture) {
  for (auto kind : {AdapterKind::LowRank, AdapterKind::Kronecker, AdapterKind::Bottleneck}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Layer l = build(spec_for(kind, 4), seed, 0.3);
      Rng rng(seed);
      const std::size_t out = l.layer.experts[0].spec.out_dim;
      Tensor x = test::random_tensor(rng, 6, 6), base = test::random_tensor(rng, 6, out);
      Tape tape(false);
      MoAOutput got = moa_forward(tape, l.store, l.layer, tape.constant(x), tape.constant(base));
      // Dense oracle: sum over every expert weighted by its full softmax entry.
      test::RefRoute r = test::ref_route(l.store, l.layer.router, x, 4);
      Tensor dense = base;
      for (std::size_t e = 0; e < 4; ++e) {
        Tensor delta = test::ref_adapter_delta(l.store, l.layer.experts[e], x);
        for (std::size_t t = 0; t < 6; ++t)
          for (std::size_t c = 0; c < out; ++c) dense(t, c) += r.probs(t, e) * delta(t, c);
      }
      EXPECT_LE(test::max_abs_diff(got.out.value(), dense), 1e-10) << to_string(kind);
    }
  }
}

TEST(MoA, SparseForwardMatchesReference) {
  for (std::size_t k : {1u, 2u, 3u}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Layer l = build(spec_for(AdapterKind::LowRank, k), seed, 0.3);
      Rng rng(seed + 100);
      Tensor x = test::random_tensor(rng, 8, 6), base = test::random_tensor(rng, 8, 4);
      Tape tape(false);
      MoAOutput got = moa_forward(tape, l.store, l.layer, tape.constant(x), tape.constant(base));
      EXPECT_LE(test::max_abs_diff(got.out.value(), test::ref_moa(l.store, l.layer, x, base)), 1e-12);
    }
  }
}

TEST(MoA, GatesAreExactSoftmaxEntries) {
  Layer l = build(spec_for(AdapterKind::LowRank, 2), 8, 0.3);
  Rng rng(8);
  Tape tape(false);
  MoAOutput r = moa_forward(tape, l.store, l.layer, tape.constant(test::random_tensor(rng, 10, 6)),
                            tape.constant(Tensor(10, 4)));
  const auto& rec = r.record;
  ASSERT_EQ(rec.gates.size(), 20u);
  for (std::size_t t = 0; t < 10; ++t)
    for (std::size_t j = 0; j < 2; ++j) {
      EXPECT_EQ(rec.gates[t * 2 + j], rec.probs(t, rec.indices[t * 2 + j]));
      if (j > 0) EXPECT_GE(rec.gates[t * 2 + j - 1], rec.gates[t * 2 + j]);
    }
}

TEST(MoA, SingleExpertTopOneIsGateOneAdapter) {
  MoALayerSpec s = spec_for(AdapterKind::LowRank, 1);
  s.ranks = {2};
  Layer l = build(s, 5, 0.3);
  Rng rng(5);
  Tensor x = test::random_tensor(rng, 4, 6), base = test::random_tensor(rng, 4, 4);
  Tape tape(false);
  MoAOutput got = moa_forward(tape, l.store, l.layer, tape.constant(x), tape.constant(base));
  Tensor expect = base;
  expect += test::ref_adapter_delta(l.store, l.layer.experts[0], x);
  EXPECT_LE(test::max_abs_diff(got.out.value(), expect), 1e-12);
  for (double g : got.record.gates) EXPECT_EQ(g, 1.0);
}

TEST(MoA, ZeroInitLeavesBaseUnchanged) {
  for (auto kind : {AdapterKind::LowRank, AdapterKind::Kronecker, AdapterKind::Bottleneck}) {
    Layer l = build(spec_for(kind, 2), 3, 0.0);
    Rng rng(3);
    const std::size_t out = l.layer.experts[0].spec.out_dim;
    Tensor x = test::random_tensor(rng, 5, 6), base = test::random_tensor(rng, 5, out);
    Tape tape(false);
    MoAOutput got = moa_forward(tape, l.store, l.layer, tape.constant(x), tape.constant(base));
    EXPECT_EQ(got.out.value(), base);
  }
}

TEST(MoA, GradientMatchesFiniteDifferences) {
  for (auto kind : {AdapterKind::LowRank, AdapterKind::Kronecker, AdapterKind::Bottleneck}) {
    for (std::uint64_t seed = 0; seed < 20; ++seed) {
      Layer l = build(spec_for(kind, 2), seed, 0.3);
      Rng rng(seed);
      const std::size_t out = l.layer.experts[0].spec.out_dim;
      Tensor x = test::random_tensor(rng, 5, 6), base = test::random_tensor(rng, 5, out);
      Tensor w = test::random_tensor(rng, 5, out);
      auto objective = [&](Tape& tape, const ParamStore& s) {
        MoAOutput o = moa_forward(tape, s, l.layer, tape.constant(x), tape.constant(base));
        return add(sum(mul(o.out, tape.constant(w))), aux_loss(o.record));
      };
      Tape tape;
      tape.backward(objective(tape, l.store));
      l.store.zero_grad();
      tape.accumulate_param_grads(l.store);
      auto f = [&](const ParamStore& s) {
        Tape t(false);
        return objective(t, s).value().item();
      };
      auto numeric = numeric_grad(f, l.store, 1e-6);
      EXPECT_LE(max_relative_error(numeric, l.store, 1e-3), 1e-5) << to_string(kind) << " seed " << seed;
    }
  }
}

TEST(MoA, OnlySelectedExpertsAndRouterReceiveGradient) {
  for (std::uint64_t seed = 0; seed < 20; ++seed) {
    Layer l = build(spec_for(AdapterKind::LowRank, 2), seed, 0.3);
    Rng rng(seed + 7);
    // One token, so "not selected" is unambiguous.
    Tensor x = test::random_tensor(rng, 1, 6), w = test::random_tensor(rng, 1, 4);
    Tape tape;
    MoAOutput o = moa_forward(tape, l.store, l.layer, tape.constant(x), tape.constant(Tensor(1, 4)));
    tape.backward(sum(mul(o.out, tape.constant(w))));
    l.store.zero_grad();
    tape.accumulate_param_grads(l.store);
    auto norm = [&](const std::string& name) {
      double s = 0.0;
      for (double g : l.store.at(name).grad.data()) s += g * g;
      return s;
    };
    for (const auto& name : {l.layer.router.embed, l.layer.router.proj, l.layer.router.temp_raw})
      EXPECT_GT(norm(name), 0.0) << name;
    for (std::size_t e = 0; e < 4; ++e) {
      const bool selected = o.record.indices[0] == e || o.record.indices[1] == e;
      const double g = norm(l.layer.experts[e].a) + norm(l.layer.experts[e].b);
      if (selected) EXPECT_GT(g, 0.0) << e;
      else EXPECT_EQ(g, 0.0) << e;
    }
  }
}

TEST(MoA, TopKOutOfRangeRejected) {
  MoALayerSpec s = spec_for(AdapterKind::LowRank, 5);
  EXPECT_THROW(make_moa_layer(s, "m", "m"), ArgumentError);
  s.top_k = 0;
  EXPECT_THROW(make_moa_layer(s, "m", "m"), ArgumentError);
}

RoutingRecord synthetic_record(const Tensor& probs, std::size_t k = 1) {
  RoutingRecord r;
  r.num_experts = probs.cols();
  r.top_k = k;
  r.tokens = probs.rows();
  r.probs = probs;
  Tape tape(false);
  TopK top = top_k(tape.constant(probs), k);
  r.indices = top.indices;
  r.gates.assign(top.values.value().data().begin(), top.values.value().data().end());
  return r;
}

// Independent counting oracle for N * sum_i f_i P_i.
double counting_aux(const Tensor& probs) {
  const std::size_t m = probs.rows(), n = probs.cols();
  double total = 0.0;
  for (std::size_t i = 0; i < n; ++i) {
    double count = 0.0, mass = 0.0;
    for (std::size_t t = 0; t < m; ++t) {
      std::size_t best = 0;
      for (std::size_t j = 1; j < n; ++j)
        if (probs(t, j) > probs(t, best)) best = j;
      count += best == i;
      mass += probs(t, i);
    }
    total += (count / m) * (mass / m);
  }
  return static_cast<double>(n) * total;
}

Tensor random_probs(Rng& rng, std::size_t m, std::size_t n, double sharp) {
  Tensor logits = test::random_tensor(rng, m, n, sharp);
  return test::ref_softmax_rows(logits);
}

TEST(AuxLoss, MatchesCountingOracle) {
  for (std::uint64_t seed = 0; seed < 50; ++seed) {
    Rng rng(seed);
    Tensor p = random_probs(rng, 1 + rng.index(12), 2 + rng.index(5), 3.0);
    RoutingRecord rec = synthetic_record(p);
    EXPECT_NEAR(aux_loss_value(std::span(&rec, 1)), counting_aux(p), 1e-12);
    Tape tape;
    rec.probs_var = tape.leaf(p, true);
    EXPECT_NEAR(aux_loss(rec).value().item(), counting_aux(p), 1e-12);
  }
}

TEST(AuxLoss, UniformRoutingGivesOne) {
  // Uniform probabilities with tokens spread evenly over experts.
  Tensor p(4, 4);
  for (std::size_t t = 0; t < 4; ++t)
    for (std::size_t i = 0; i < 4; ++i) p(t, i) = i == t ? 0.25 + 1e-9 : 0.25 - 1e-9 / 3;
  RoutingRecord rec = synthetic_record(p);
  EXPECT_NEAR(aux_loss_value(std::span(&rec, 1)), 1.0, 1e-8);
}

TEST(AuxLoss, CollapseOntoOneExpertGivesN) {
  Tensor p(6, 4);
  for (std::size_t t = 0; t < 6; ++t) p(t, 2) = 1.0;
  RoutingRecord rec = synthetic_record(p);
  EXPECT_DOUBLE_EQ(aux_loss_value(std::span(&rec, 1)), 4.0);
}

TEST(AuxLoss, NeverExceedsN) {
  for (std::uint64_t seed = 0; seed < 200; ++seed) {
    Rng rng(seed);
    const std::size_t n = 2 + rng.index(6);
    Tensor p = random_probs(rng, 1 + rng.index(20), n, rng.uniform(0.1, 10.0));
    RoutingRecord rec = synthetic_record(p);
    EXPECT_LE(aux_loss_value(std::span(&rec, 1)), static_cast<double>(n) + 1e-12);
  }
}

TEST(AuxLoss, CanDropBelowOneWhenTopOneDisagreesWithMass) {
  // Two experts. Tokens 0 and 1 sit exactly on the tie (expert 0 wins by
  // index), token 2 puts all mass on expert 1:
  //   f = (2/3, 1/3), P = (1/3, 2/3), N * sum f P = 2 * 4/9 = 8/9.
  Tensor p(3, 2, std::vector<double>{0.5, 0.5, 0.5, 0.5, 0.0, 1.0});
  RoutingRecord rec = synthetic_record(p);
  EXPECT_NEAR(aux_loss_value(std::span(&rec, 1)), 8.0 / 9.0, 1e-15);
}

TEST(AuxLoss, RequiresLiveProbabilities) {
  RoutingRecord rec = synthetic_record(Tensor(2, 2, 0.5));
  EXPECT_THROW(aux_loss(rec), ArgumentError);
}

TEST(Allocation, PopulationStdOfReportedRows) {
  const std::vector<double> skewed{0.03, 0.14, 0.23, 0.60};
  const std::vector<double> even{0.22, 0.26, 0.32, 0.21};
  // mean 0.25; squared deviations summed then divided by N.
  EXPECT_NEAR(population_std(skewed), std::sqrt((0.0484 + 0.0121 + 0.0004 + 0.1225) / 4.0), 1e-15);
  // sqrt(E[x^2] - E[x]^2)
  const double ex2 = (0.22 * 0.22 + 0.26 * 0.26 + 0.32 * 0.32 + 0.21 * 0.21) / 4.0;
  const double ex = (0.22 + 0.26 + 0.32 + 0.21) / 4.0;
  EXPECT_NEAR(population_std(even), std::sqrt(ex2 - ex * ex), 1e-12);
  EXPECT_NEAR(population_std(even), 0.0432290, 1e-7);
  EXPECT_EQ(population_std(std::vector<double>{0.25, 0.25, 0.25, 0.25}), 0.0);
}

TEST(Allocation, FractionsCountEverySelection) {
  Tensor p(4, 3, std::vector<double>{0.6, 0.3, 0.1, 0.1, 0.6, 0.3, 0.2, 0.2, 0.6, 0.7, 0.2, 0.1});
  RoutingRecord rec = synthetic_record(p, 2);
  AllocationStats s = allocation_stats(std::span(&rec, 1));
  // top-2 selections: {0,1} {1,2} {2,0} {0,1} -> counts 3, 3, 2 of 8
  EXPECT_DOUBLE_EQ(s.fractions[0], 3.0 / 8);
  EXPECT_DOUBLE_EQ(s.fractions[1], 3.0 / 8);
  EXPECT_DOUBLE_EQ(s.fractions[2], 2.0 / 8);
  EXPECT_NEAR(s.stddev, population_std(s.fractions), 0.0);
}

TEST(Allocation, ErrorsOnEmptyInput) {
  EXPECT_THROW(allocation_stats({}), ArgumentError);
  EXPECT_THROW(population_std({}), ArgumentError);
  EXPECT_THROW(aux_loss_value({}), ArgumentError);
}

}  // namespace
}  // namespace moa
