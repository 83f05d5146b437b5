#include "support.hpp"

#include <algorithm>
#include <cmath>
#include <numeric>

#include <Eigen/Dense>

#include "moa/ops.hpp"
#include "moa/trainer.hpp"

namespace moa::test {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev) {
  Tensor t(rows, cols);
  for (std::size_t i = 0; i < t.size(); ++i) t[i] = rng.normal(stddev);
  return t;
}

double max_abs_diff(const Tensor& a, const Tensor& b) {
  if (!a.same_shape(b)) return INFINITY;
  double m = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, std::abs(a[i] - b[i]));
  return m;
}

Tensor ref_matmul(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows(), b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < b.cols(); ++j) {
      double s = 0.0;
      for (std::size_t p = 0; p < a.cols(); ++p) s += a(i, p) * b(p, j);
      out(i, j) = s;
    }
  return out;
}

Tensor ref_transpose(const Tensor& a) {
  Tensor out(a.cols(), a.rows());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j) out(j, i) = a(i, j);
  return out;
}

Tensor ref_kron(const Tensor& a, const Tensor& b) {
  Tensor out(a.rows() * b.rows(), a.cols() * b.cols());
  for (std::size_t i = 0; i < a.rows(); ++i)
    for (std::size_t j = 0; j < a.cols(); ++j)
      for (std::size_t p = 0; p < b.rows(); ++p)
        for (std::size_t q = 0; q < b.cols(); ++q)
          out(i * b.rows() + p, j * b.cols() + q) = a(i, j) * b(p, q);
  return out;
}

Tensor ref_softmax_rows(const Tensor& x) {
  Tensor out(x.rows(), x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mx = x(i, 0);
    for (std::size_t j = 1; j < x.cols(); ++j) mx = std::max(mx, x(i, j));
    double z = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) z += std::exp(x(i, j) - mx);
    for (std::size_t j = 0; j < x.cols(); ++j) out(i, j) = std::exp(x(i, j) - mx) / z;
  }
  return out;
}

Tensor ref_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps) {
  Tensor out(x.rows(), x.cols());
  const double n = static_cast<double>(x.cols());
  for (std::size_t i = 0; i < x.rows(); ++i) {
    double mu = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) mu += x(i, j);
    mu /= n;
    double var = 0.0;
    for (std::size_t j = 0; j < x.cols(); ++j) var += (x(i, j) - mu) * (x(i, j) - mu);
    var /= n;
    for (std::size_t j = 0; j < x.cols(); ++j) {
      out(i, j) = (x(i, j) - mu) / std::sqrt(var + eps) * gamma(0, j) + beta(0, j);
    }
  }
  return out;
}

double ref_gelu(double x) { return 0.5 * x * (1.0 + std::erf(x / std::sqrt(2.0))); }

Tensor ref_adapter_matrix(const ParamStore& store, const Adapter& ad) {
  const auto& s = ad.spec;
  Tensor out(s.out_dim, s.in_dim);
  if (s.kind == AdapterKind::LowRank) {
    const Tensor& A = store.at(ad.a).value;
    const Tensor& B = store.at(ad.b).value;
    for (std::size_t i = 0; i < s.out_dim; ++i)
      for (std::size_t j = 0; j < s.in_dim; ++j) {
        double v = 0.0;
        for (std::size_t r = 0; r < s.rank; ++r) v += B(i, r) * A(r, j);
        out(i, j) = v;
      }
    return out;
  }
  if (s.kind == AdapterKind::Kronecker) {
    const std::size_t t = s.kron_terms, kt = s.out_dim / t, dt = s.in_dim / t;
    for (std::size_t term = 0; term < t; ++term) {
      const Tensor& S = store.at(ad.slow[term]).value;
      const Tensor& U = store.at(ad.fast_u[term]).value;
      const Tensor& V = store.at(ad.fast_v[term]).value;
      for (std::size_t a = 0; a < t; ++a)
        for (std::size_t b = 0; b < t; ++b)
          for (std::size_t p = 0; p < kt; ++p)
            for (std::size_t q = 0; q < dt; ++q) {
              double uv = 0.0;
              for (std::size_t r = 0; r < s.rank; ++r) uv += U(p, r) * V(r, q);
              out(a * kt + p, b * dt + q) += S(a, b) * uv;
            }
    }
    return out;
  }
  throw std::logic_error("bottleneck adapters have no dense matrix");
}

Tensor ref_adapter_delta(const ParamStore& store, const Adapter& ad, const Tensor& x) {
  if (ad.spec.kind != AdapterKind::Bottleneck) {
    return ref_matmul(x, ref_transpose(ref_adapter_matrix(store, ad)));
  }
  const Tensor& down = store.at(ad.down).value;
  const Tensor& db = store.at(ad.down_bias).value;
  const Tensor& up = store.at(ad.up).value;
  const Tensor& ub = store.at(ad.up_bias).value;
  const std::size_t r = ad.spec.rank, d = ad.spec.in_dim;
  Tensor out(x.rows(), d);
  for (std::size_t t = 0; t < x.rows(); ++t) {
    std::vector<double> hidden(r);
    for (std::size_t i = 0; i < r; ++i) {
      double v = db(0, i);
      for (std::size_t j = 0; j < d; ++j) v += down(i, j) * x(t, j);
      hidden[i] = ref_gelu(v);
    }
    for (std::size_t j = 0; j < d; ++j) {
      double v = ub(0, j);
      for (std::size_t i = 0; i < r; ++i) v += up(j, i) * hidden[i];
      out(t, j) = v;
    }
  }
  return out;
}

RefRoute ref_route(const ParamStore& store, const Router& router, const Tensor& x, std::size_t k) {
  const std::size_t m = x.rows(), n = router.num_experts;
  Tensor logits(m, n);
  if (router.kind == RouterKind::Cosine) {
    const Tensor& W = store.at(router.proj).value;   // e x d
    const Tensor& E = store.at(router.embed).value;  // e x n
    const double raw = store.at(router.temp_raw).value(0, 0);
    const double tau = std::log1p(std::exp(raw)) + kMinTemperature;
    std::vector<double> enorm(n, 0.0);
    for (std::size_t i = 0; i < n; ++i) {
      for (std::size_t a = 0; a < router.embed_dim; ++a) enorm[i] += E(a, i) * E(a, i);
      enorm[i] = std::max(std::sqrt(enorm[i]), kRouterNormEps);
    }
    for (std::size_t t = 0; t < m; ++t) {
      std::vector<double> z(router.embed_dim, 0.0);
      double zn = 0.0;
      for (std::size_t a = 0; a < router.embed_dim; ++a) {
        for (std::size_t j = 0; j < x.cols(); ++j) z[a] += W(a, j) * x(t, j);
        zn += z[a] * z[a];
      }
      zn = std::max(std::sqrt(zn), kRouterNormEps);
      for (std::size_t i = 0; i < n; ++i) {
        double c = 0.0;
        for (std::size_t a = 0; a < router.embed_dim; ++a) c += z[a] * E(a, i);
        logits(t, i) = c / (zn * enorm[i]) / tau;
      }
    }
  } else {
    const Tensor& W = store.at(router.weight).value;  // n x d
    for (std::size_t t = 0; t < m; ++t)
      for (std::size_t i = 0; i < n; ++i) {
        double v = 0.0;
        for (std::size_t j = 0; j < x.cols(); ++j) v += W(i, j) * x(t, j);
        logits(t, i) = v;
      }
  }
  RefRoute out;
  out.probs = ref_softmax_rows(logits);
  for (std::size_t t = 0; t < m; ++t) {
    std::vector<std::size_t> order(n);
    std::iota(order.begin(), order.end(), 0);
    std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
      return out.probs(t, a) > out.probs(t, b);
    });
    for (std::size_t j = 0; j < k; ++j) {
      out.indices.push_back(order[j]);
      out.gates.push_back(out.probs(t, order[j]));
    }
  }
  return out;
}

Tensor ref_moa(const ParamStore& store, const MoALayer& layer, const Tensor& x, const Tensor& base) {
  RefRoute r = ref_route(store, layer.router, x, layer.top_k);
  Tensor out = base;
  for (std::size_t e = 0; e < layer.experts.size(); ++e) {
    Tensor delta = ref_adapter_delta(store, layer.experts[e], x);
    for (std::size_t t = 0; t < x.rows(); ++t) {
      double gate = 0.0;
      for (std::size_t j = 0; j < layer.top_k; ++j)
        if (r.indices[t * layer.top_k + j] == e) gate = r.gates[t * layer.top_k + j];
      for (std::size_t c = 0; c < out.cols(); ++c) out(t, c) += gate * delta(t, c);
    }
  }
  return out;
}

namespace {

Tensor linear(const ParamStore& s, const std::string& prefix, const Tensor& x) {
  const Tensor& W = s.at(prefix + ".weight").value;
  const Tensor& b = s.at(prefix + ".bias").value;
  Tensor out = ref_matmul(x, ref_transpose(W));
  for (std::size_t i = 0; i < out.rows(); ++i)
    for (std::size_t j = 0; j < out.cols(); ++j) out(i, j) += b(0, j);
  return out;
}

// Adapter or MoA contribution at one attach point, following the documented
// parameter naming.
Tensor apply_point(const ViTModel& model, const ParamStore& s, std::size_t block,
                   const std::string& attach, const std::string& point, const Tensor& x,
                   const Tensor& base) {
  const ViTConfig& c = model.config();
  if (!c.block_has_adapter(block)) return base;
  // Bottleneck adapters sit on the MLP output; the others wrap QKV and proj.
  if ((c.plan.kind == AdapterKind::Bottleneck) != (attach == "mlp")) return base;
  if (c.plan.mode == AdapterMode::Mixture) {
    for (const MoALayer* l : model.moa_layers_at(block))
      if (l->attach == attach) return ref_moa(s, *l, x, base);
    return base;
  }
  AdapterSpec spec{c.plan.kind, c.plan.ranks.front(), c.plan.kron_terms, x.cols(), base.cols()};
  const std::string prefix = point + ".adapter";
  const bool shared = c.plan.kind == AdapterKind::Kronecker && c.plan.share_slow;
  Adapter ad = make_adapter(spec, prefix, shared ? "adapters" : prefix);
  Tensor delta = ref_adapter_delta(s, ad, x);
  Tensor out = base;
  out += delta;
  return out;
}

}  // namespace

Tensor ref_vit_logits(const ViTModel& model, const ParamStore& s, const Image& image) {
  const ViTConfig& c = model.config();
  const std::size_t d = c.d_model, side = c.grid_side(), ps = c.patch_size, nt = c.tokens();
  Tensor patches(c.patches(), c.patch_dim());
  for (std::size_t py = 0; py < side; ++py)
    for (std::size_t px = 0; px < side; ++px) {
      std::size_t col = 0;
      for (std::size_t dy = 0; dy < ps; ++dy)
        for (std::size_t dx = 0; dx < ps; ++dx)
          for (std::size_t ch = 0; ch < c.channels; ++ch)
            patches(py * side + px, col++) = image.at(py * ps + dy, px * ps + dx, ch);
    }
  Tensor emb = linear(s, "patch_embed", patches);
  const Tensor& pos = s.at("pos_embed").value;
  const Tensor& cls = s.at("cls_token").value;
  Tensor x(nt, d);
  for (std::size_t j = 0; j < d; ++j) x(0, j) = cls(0, j) + pos(0, j);
  for (std::size_t p = 0; p < c.patches(); ++p)
    for (std::size_t j = 0; j < d; ++j) x(p + 1, j) = emb(p, j) + pos(p + 1, j);

  const std::size_t dh = d / c.heads;
  for (std::size_t b = 0; b < c.depth; ++b) {
    const std::string p = "blocks." + std::to_string(b);
    Tensor h = ref_layer_norm(x, s.at(p + ".norm1.weight").value, s.at(p + ".norm1.bias").value);
    Tensor qkv = apply_point(model, s, b, "qkv", p + ".attn.qkv", h, linear(s, p + ".attn.qkv", h));
    Tensor att(nt, d);
    for (std::size_t head = 0; head < c.heads; ++head) {
      Tensor scores(nt, nt);
      for (std::size_t i = 0; i < nt; ++i)
        for (std::size_t j = 0; j < nt; ++j) {
          double v = 0.0;
          for (std::size_t a = 0; a < dh; ++a) v += qkv(i, head * dh + a) * qkv(j, d + head * dh + a);
          scores(i, j) = v / std::sqrt(static_cast<double>(dh));
        }
      Tensor P = ref_softmax_rows(scores);
      for (std::size_t i = 0; i < nt; ++i)
        for (std::size_t a = 0; a < dh; ++a) {
          double v = 0.0;
          for (std::size_t j = 0; j < nt; ++j) v += P(i, j) * qkv(j, 2 * d + head * dh + a);
          att(i, head * dh + a) = v;
        }
    }
    Tensor proj = apply_point(model, s, b, "proj", p + ".attn.proj", att, linear(s, p + ".attn.proj", att));
    x += proj;
    Tensor h2 = ref_layer_norm(x, s.at(p + ".norm2.weight").value, s.at(p + ".norm2.bias").value);
    Tensor hidden = linear(s, p + ".mlp.fc1", h2);
    for (std::size_t i = 0; i < hidden.size(); ++i) hidden[i] = ref_gelu(hidden[i]);
    Tensor mlp = linear(s, p + ".mlp.fc2", hidden);
    mlp = apply_point(model, s, b, "mlp", p + ".mlp", mlp, mlp);
    x += mlp;
  }
  Tensor normed = ref_layer_norm(x, s.at("norm.weight").value, s.at("norm.bias").value);
  Tensor cls_row(1, d);
  for (std::size_t j = 0; j < d; ++j) cls_row(0, j) = normed(0, j);
  return linear(s, "head", cls_row);
}

std::vector<PrimitiveCase> primitive_cases() {
  using In = std::vector<Var>;
  auto shapes = [](std::vector<std::pair<std::size_t, std::size_t>> dims, double sd = 1.0) {
    return [dims, sd](Rng& rng) {
      std::vector<Tensor> out;
      for (auto [r, c] : dims) out.push_back(random_tensor(rng, r, c, sd));
      return out;
    };
  };
  std::vector<PrimitiveCase> cases;
  cases.push_back({"matmul", shapes({{3, 4}, {4, 2}}), [](Tape&, const In& v) { return matmul(v[0], v[1]); }});
  cases.push_back({"matmul_nt", shapes({{3, 4}, {5, 4}}), [](Tape&, const In& v) { return matmul_nt(v[0], v[1]); }});
  cases.push_back({"transpose", shapes({{3, 4}}), [](Tape&, const In& v) { return transpose(v[0]); }});
  cases.push_back({"add", shapes({{3, 4}, {3, 4}}), [](Tape&, const In& v) { return add(v[0], v[1]); }});
  cases.push_back({"sub", shapes({{3, 4}, {3, 4}}), [](Tape&, const In& v) { return sub(v[0], v[1]); }});
  cases.push_back({"mul", shapes({{3, 4}, {3, 4}}), [](Tape&, const In& v) { return mul(v[0], v[1]); }});
  cases.push_back({"scale", shapes({{3, 4}}), [](Tape&, const In& v) { return scale(v[0], 1.7); }});
  cases.push_back({"add_scalar", shapes({{3, 4}}), [](Tape&, const In& v) { return add_scalar(v[0], -0.3); }});
  cases.push_back({"add_row", shapes({{3, 4}, {1, 4}}), [](Tape&, const In& v) { return add_row(v[0], v[1]); }});
  cases.push_back({"scale_rows", shapes({{3, 4}, {3, 1}}), [](Tape&, const In& v) { return scale_rows(v[0], v[1]); }});
  cases.push_back({"div_scalar",
                   [](Rng& rng) {
                     std::vector<Tensor> out{random_tensor(rng, 3, 4)};
                     out.push_back(Tensor::scalar(0.5 + std::abs(rng.normal())));
                     return out;
                   },
                   [](Tape&, const In& v) { return div_scalar(v[0], v[1]); }});
  cases.push_back({"gelu", shapes({{3, 4}}, 2.0), [](Tape&, const In& v) { return gelu(v[0]); }});
  cases.push_back({"softplus", shapes({{3, 4}}, 2.0), [](Tape&, const In& v) { return softplus(v[0]); }});
  cases.push_back({"layer_norm", shapes({{4, 5}, {1, 5}, {1, 5}}),
                   [](Tape&, const In& v) { return layer_norm(v[0], v[1], v[2]); }});
  cases.push_back({"softmax_rows", shapes({{3, 4}}), [](Tape&, const In& v) { return softmax_rows(v[0]); }});
  cases.push_back({"cross_entropy", shapes({{4, 3}}), [](Tape&, const In& v) {
                     static const std::vector<std::size_t> labels{0, 2, 1, 2};
                     return cross_entropy(v[0], labels);
                   }});
  cases.push_back({"kron", shapes({{2, 3}, {3, 2}}), [](Tape&, const In& v) { return kron(v[0], v[1]); }});
  cases.push_back({"top_k", shapes({{3, 5}}), [](Tape&, const In& v) { return top_k(v[0], 2).values; }});
  cases.push_back({"gather_rows", shapes({{4, 3}}), [](Tape&, const In& v) {
                     static const std::vector<std::size_t> idx{2, 0, 2, 3, 1};
                     return gather_rows(v[0], idx);
                   }});
  cases.push_back({"scatter_rows", shapes({{4, 3}}), [](Tape&, const In& v) {
                     static const std::vector<std::size_t> idx{1, 3, 1, 0};
                     return scatter_rows(v[0], idx, 5);
                   }});
  cases.push_back({"pick", shapes({{3, 4}}), [](Tape&, const In& v) {
                     static const std::vector<std::size_t> rows{0, 2, 1, 2}, cols{1, 3, 0, 3};
                     return pick(v[0], rows, cols);
                   }});
  cases.push_back({"concat_rows", shapes({{2, 3}, {3, 3}}),
                   [](Tape&, const In& v) { return concat_rows({v[0], v[1]}); }});
  cases.push_back({"reshape", shapes({{3, 4}}), [](Tape&, const In& v) { return reshape(v[0], 2, 6); }});
  cases.push_back({"sum", shapes({{3, 4}}), [](Tape&, const In& v) { return sum(v[0]); }});
  cases.push_back({"mean", shapes({{3, 4}}), [](Tape&, const In& v) { return mean(v[0]); }});
  cases.push_back({"mean_rows", shapes({{3, 4}}), [](Tape&, const In& v) { return mean_rows(v[0]); }});
  cases.push_back({"l2_normalize_rows", shapes({{3, 4}}),
                   [](Tape&, const In& v) { return l2_normalize_rows(v[0]); }});
  cases.push_back({"attention", shapes({{6, 12}}),
                   [](Tape&, const In& v) { return attention(v[0], 2, 3, 2); }});
  return cases;
}

double primitive_grad_error(const PrimitiveCase& c, std::uint64_t seed) {
  Rng rng(derive_seed(seed, c.name));
  const std::vector<Tensor> inputs = c.inputs(rng);

  Tensor weights;
  auto objective = [&](Tape& tape, const std::vector<Var>& vars) {
    Var out = c.build(tape, vars);
    if (weights.empty()) weights = random_tensor(rng, out.rows(), out.cols());
    return sum(mul(out, tape.constant(weights)));
  };

  Tape tape;
  std::vector<Var> leaves;
  for (const auto& t : inputs) leaves.push_back(tape.leaf(t, true));
  Var loss = objective(tape, leaves);
  tape.backward(loss);

  auto value_at = [&](const std::vector<Tensor>& xs) {
    Tape t(false);
    std::vector<Var> vars;
    for (const auto& x : xs) vars.push_back(t.constant(x));
    return objective(t, vars).value().item();
  };

  const double h = 1e-6;
  double worst = 0.0;
  std::vector<Tensor> work = inputs;
  for (std::size_t i = 0; i < inputs.size(); ++i) {
    const Tensor* g = leaves[i].grad();
    for (std::size_t j = 0; j < inputs[i].size(); ++j) {
      const double orig = work[i][j];
      work[i][j] = orig + h;
      const double up = value_at(work);
      work[i][j] = orig - h;
      const double down = value_at(work);
      work[i][j] = orig;
      const double num = (up - down) / (2.0 * h);
      const double ana = g != nullptr ? (*g)[j] : 0.0;
      worst = std::max(worst, std::abs(ana - num) / std::max({1e-3, std::abs(ana), std::abs(num)}));
    }
  }
  return worst;
}

ViTConfig tiny_config(AdapterKind kind, AdapterMode mode) {
  ViTConfig c;
  c.image_size = 8;
  c.patch_size = 4;
  c.channels = 3;
  c.d_model = 8;
  c.heads = 2;
  c.depth = 2;
  c.mlp_ratio = 2;
  c.num_classes = 3;
  c.plan.mode = mode;
  c.plan.kind = kind;
  c.plan.ranks = {1, 2};
  c.plan.kron_terms = 2;
  c.plan.router_dim = 4;
  c.plan.moa_every = 2;
  return c;
}

std::vector<Sample> tiny_dataset(std::size_t image_size, std::size_t classes, std::size_t per_cell,
                                 std::size_t domains) {
  DatasetSpec spec;
  spec.seed = 7;
  spec.domains = domains;
  spec.classes = classes;
  spec.per_cell = per_cell;
  spec.image_size = image_size;
  return generate_dataset(spec);
}

void perturb(ParamStore& store, std::uint64_t seed, double stddev) {
  for (auto& e : store.entries()) {
    Rng rng(derive_seed(seed, e.name));
    for (std::size_t i = 0; i < e.value.size(); ++i) e.value[i] += rng.normal(stddev);
  }
}

double full_model_grad_error(const ViTConfig& config, std::uint64_t seed) {
  ViTModel model(config, seed, FreezePolicy::FullFineTune);
  ParamStore& store = model.params();
  perturb(store, derive_seed(seed, "perturb"), 0.2);

  static const std::vector<Sample> data = tiny_dataset(8, 3, 2, 2);
  DomainBatches batches(2);
  for (const auto& s : data) batches[s.domain].push_back(&s);
  const double aux_scale = 0.5;

  store.zero_grad();
  erm_loss_and_grad(model, store, batches, aux_scale);
  auto f = [&](const ParamStore& p) { return erm_loss(model, p, batches, aux_scale).total; };
  const auto numeric = numeric_grad(f, store, 1e-6);
  return max_relative_error(numeric, store, 1e-2);
}

std::vector<std::vector<double>> dense_fd_hessian(const ScalarFn& f, ParamStore& store,
                                                  const ParamSelection& sel, double h) {
  const std::vector<double> theta = sel.gather(store);
  const std::size_t n = theta.size();
  std::vector<double> work = theta;
  auto at = [&](std::size_t i, double di, std::size_t j, double dj) {
    work = theta;
    work[i] += di;
    work[j] += dj;
    sel.scatter(store, work);
    return f(store);
  };
  const double f0 = at(0, 0.0, 0, 0.0);
  std::vector<std::vector<double>> H(n, std::vector<double>(n, 0.0));
  for (std::size_t i = 0; i < n; ++i) {
    H[i][i] = (at(i, h, i, 0.0) - 2.0 * f0 + at(i, -h, i, 0.0)) / (h * h);
    for (std::size_t j = i + 1; j < n; ++j) {
      const double v = (at(i, h, j, h) - at(i, h, j, -h) - at(i, -h, j, h) + at(i, -h, j, -h)) /
                       (4.0 * h * h);
      H[i][j] = H[j][i] = v;
    }
  }
  sel.scatter(store, theta);
  return H;
}

std::vector<double> symmetric_eigenvalues(const std::vector<std::vector<double>>& m) {
  const auto n = static_cast<Eigen::Index>(m.size());
  Eigen::MatrixXd A(n, n);
  for (Eigen::Index i = 0; i < n; ++i)
    for (Eigen::Index j = 0; j < n; ++j) A(i, j) = m[i][j];
  Eigen::SelfAdjointEigenSolver<Eigen::MatrixXd> solver(A, Eigen::EigenvaluesOnly);
  std::vector<double> ev(solver.eigenvalues().data(), solver.eigenvalues().data() + n);
  std::sort(ev.begin(), ev.end(), [](double a, double b) { return std::abs(a) > std::abs(b); });
  return ev;
}

}  // namespace moa::test
