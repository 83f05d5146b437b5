#include "moa/diagnostics.hpp"

#include <algorithm>
#include <atomic>
#include <cmath>
#include <cstdio>
#include <limits>
#include <thread>

#include <nlohmann/json.hpp>

#include "moa/errors.hpp"
#include "moa/ops.hpp"
#include "moa/rng.hpp"

namespace moa {

ParamSelection::ParamSelection(const ParamStore& store, std::vector<std::string> names)
    : names_(std::move(names)) {
  for (const auto& n : names_) {
    if (!store.contains(n)) throw ArgumentError("selection: unknown parameter '" + n + "'");
    extents_.push_back(store.at(n).value.size());
    size_ += extents_.back();
  }
}

ParamSelection ParamSelection::trainable(const ParamStore& store) {
  return ParamSelection(store, store.trainable_names());
}

ParamSelection ParamSelection::all(const ParamStore& store) {
  std::vector<std::string> names;
  for (const auto& e : store.entries()) names.push_back(e.name);
  return ParamSelection(store, std::move(names));
}

std::vector<double> ParamSelection::gather(const ParamStore& store) const {
  std::vector<double> out;
  out.reserve(size_);
  for (const auto& n : names_) {
    const auto& v = store.at(n).value.storage();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

std::vector<double> ParamSelection::gather_grads(const ParamStore& store) const {
  std::vector<double> out;
  out.reserve(size_);
  for (const auto& n : names_) {
    const auto& v = store.at(n).grad.storage();
    out.insert(out.end(), v.begin(), v.end());
  }
  return out;
}

void ParamSelection::scatter(ParamStore& store, std::span<const double> values) const {
  if (values.size() != size_) {
    throw DimensionError("selection holds " + std::to_string(size_) + " scalars, got " +
                         std::to_string(values.size()));
  }
  std::size_t off = 0;
  for (std::size_t i = 0; i < names_.size(); ++i) {
    auto& v = store.at(names_[i]).value.storage();
    std::copy_n(values.begin() + static_cast<std::ptrdiff_t>(off), extents_[i], v.begin());
    off += extents_[i];
  }
}

namespace {

std::vector<Image const*> images_of(std::span<const Sample* const> samples) {
  std::vector<const Image*> out;
  for (const Sample* s : samples) out.push_back(&s->image);
  return out;
}

std::vector<std::size_t> labels_of(std::span<const Sample* const> samples) {
  std::vector<std::size_t> out;
  for (const Sample* s : samples) out.push_back(s->label);
  return out;
}

// Mean CE over all samples, accumulated chunk by chunk with chunk-size weights.
double chunked_loss(const ViTModel& model, const ParamStore& store,
                    std::span<const Sample* const> samples, std::size_t batch, ParamStore* grads) {
  if (samples.empty()) throw ArgumentError("loss: no samples");
  const double n = static_cast<double>(samples.size());
  double total = 0.0;
  for (std::size_t start = 0; start < samples.size(); start += batch) {
    const auto chunk = samples.subspan(start, std::min(batch, samples.size() - start));
    Tape tape(grads != nullptr);
    auto images = images_of(chunk);
    auto labels = labels_of(chunk);
    ForwardResult fwd = model.forward(tape, store, images);
    Var ce = scale(cross_entropy(fwd.logits, labels), static_cast<double>(chunk.size()) / n);
    total += ce.value().item();
    if (grads != nullptr) {
      tape.backward(ce);
      tape.accumulate_param_grads(*grads);
    }
  }
  return total;
}

}  // namespace

ScalarFn model_loss_fn(const ViTModel& model, std::vector<const Sample*> samples,
                       std::size_t batch) {
  if (samples.empty()) throw ArgumentError("loss: no samples");
  return [&model, samples = std::move(samples), batch](const ParamStore& store) {
    return chunked_loss(model, store, samples, batch, nullptr);
  };
}

GradientFn model_gradient_fn(const ViTModel& model, std::vector<const Sample*> samples,
                             ParamSelection selection, std::size_t batch) {
  if (samples.empty()) throw ArgumentError("gradient: no samples");
  return [&model, samples = std::move(samples), selection = std::move(selection),
          batch](const ParamStore& store) {
    ParamStore local = store;
    local.set_all_frozen(true);
    for (const auto& n : selection.names()) local.at(n).frozen = false;
    local.zero_grad();
    chunked_loss(model, local, samples, batch, &local);
    return selection.gather_grads(local);
  };
}

Directions random_directions(const ParamStore& store, const ParamSelection& selection,
                             std::uint64_t seed, bool filter_normalize) {
  Directions dirs;
  Rng r1(derive_seed(seed, "direction.1"));
  Rng r2(derive_seed(seed, "direction.2"));
  dirs.d1.resize(selection.size());
  dirs.d2.resize(selection.size());
  for (std::size_t i = 0; i < selection.size(); ++i) {
    dirs.d1[i] = r1.normal();
    dirs.d2[i] = r2.normal();
  }
  if (!filter_normalize) return dirs;
  std::size_t off = 0;
  for (std::size_t t = 0; t < selection.names().size(); ++t) {
    const auto& w = store.at(selection.names()[t]).value.storage();
    const std::size_t len = selection.extents()[t];
    double wn = 0.0;
    for (double x : w) wn += x * x;
    wn = std::sqrt(wn);
    for (auto* d : {&dirs.d1, &dirs.d2}) {
      double dn = 0.0;
      for (std::size_t i = off; i < off + len; ++i) dn += (*d)[i] * (*d)[i];
      dn = std::sqrt(dn);
      const double f = dn > 0.0 ? wn / dn : 0.0;
      for (std::size_t i = off; i < off + len; ++i) (*d)[i] *= f;
    }
    off += len;
  }
  return dirs;
}

std::vector<double> grid_coordinates(std::size_t grid_n, double range) {
  if (grid_n == 0 || grid_n % 2 == 0) throw ArgumentError("grid size must be odd");
  if (!(range > 0.0) || !std::isfinite(range)) throw ArgumentError("grid range must be positive");
  std::vector<double> out(grid_n);
  const long half = static_cast<long>(grid_n / 2);
  for (std::size_t i = 0; i < grid_n; ++i) {
    const long k = static_cast<long>(i) - half;
    // Symmetric, with an exact zero in the middle.
    out[i] = half == 0 ? 0.0 : range * static_cast<double>(k) / static_cast<double>(half);
  }
  return out;
}

std::string LandscapeGrid::to_csv() const {
  std::string out = "alpha,beta,loss\n";
  char buf[128];
  for (std::size_t i = 0; i < alphas.size(); ++i)
    for (std::size_t j = 0; j < betas.size(); ++j) {
      std::snprintf(buf, sizeof buf, "%.17g,%.17g,%.17g\n", alphas[i], betas[j], at(i, j));
      out += buf;
    }
  return out;
}

LandscapeGrid loss_landscape(const ScalarFn& loss, ParamStore& store,
                             const ParamSelection& selection, const Directions& dirs,
                             std::span<const double> alphas, std::span<const double> betas,
                             std::size_t jobs) {
  if (alphas.empty() || betas.empty()) throw ArgumentError("landscape: empty grid");
  if (dirs.d1.size() != selection.size() || dirs.d2.size() != selection.size()) {
    throw DimensionError("landscape: directions do not match the selection");
  }
  LandscapeGrid grid;
  grid.alphas.assign(alphas.begin(), alphas.end());
  grid.betas.assign(betas.begin(), betas.end());
  grid.loss.assign(alphas.size() * betas.size(), 0.0);
  const std::vector<double> theta = selection.gather(store);

  auto eval_cell = [&](ParamStore& target, std::size_t cell, std::vector<double>& buf) {
    const double a = grid.alphas[cell / betas.size()];
    const double b = grid.betas[cell % betas.size()];
    for (std::size_t i = 0; i < theta.size(); ++i) buf[i] = theta[i] + a * dirs.d1[i] + b * dirs.d2[i];
    selection.scatter(target, buf);
    double v;
    try {
      v = loss(target);
    } catch (const NumericError&) {
      v = std::numeric_limits<double>::infinity();
    }
    grid.loss[cell] = std::isfinite(v) ? v : std::numeric_limits<double>::infinity();
  };

  const std::size_t cells = grid.loss.size();
  jobs = std::clamp<std::size_t>(jobs, 1, cells);
  if (jobs == 1) {
    std::vector<double> buf(theta.size());
    try {
      for (std::size_t c = 0; c < cells; ++c) eval_cell(store, c, buf);
    } catch (...) {
      selection.scatter(store, theta);
      throw;
    }
    selection.scatter(store, theta);
    return grid;
  }

  std::atomic<std::size_t> next{0};
  std::vector<std::exception_ptr> errors(jobs);
  std::vector<std::thread> workers;
  for (std::size_t w = 0; w < jobs; ++w) {
    workers.emplace_back([&, w] {
      try {
        ParamStore local = store;
        std::vector<double> buf(theta.size());
        for (std::size_t c = next++; c < cells; c = next++) eval_cell(local, c, buf);
      } catch (...) {
        errors[w] = std::current_exception();
      }
    });
  }
  for (auto& t : workers) t.join();
  for (auto& e : errors)
    if (e) std::rethrow_exception(e);
  return grid;
}

namespace {

double dot(std::span<const double> a, std::span<const double> b) {
  double s = 0.0;
  for (std::size_t i = 0; i < a.size(); ++i) s += a[i] * b[i];
  return s;
}

double norm(std::span<const double> a) { return std::sqrt(dot(a, a)); }

}  // namespace

std::vector<double> hvp(const GradientFn& grad, ParamStore& store, const ParamSelection& selection,
                        std::span<const double> v) {
  if (v.size() != selection.size()) {
    throw DimensionError("hvp: vector has " + std::to_string(v.size()) + " entries, selection " +
                         std::to_string(selection.size()));
  }
  const double eps = 1e-3 / std::max(1.0, norm(v));
  const std::vector<double> theta = selection.gather(store);
  std::vector<double> shifted(theta.size());
  std::vector<double> gp, gm;
  try {
    for (std::size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] + eps * v[i];
    selection.scatter(store, shifted);
    gp = grad(store);
    for (std::size_t i = 0; i < theta.size(); ++i) shifted[i] = theta[i] - eps * v[i];
    selection.scatter(store, shifted);
    gm = grad(store);
  } catch (...) {
    selection.scatter(store, theta);
    throw;
  }
  selection.scatter(store, theta);
  if (gp.size() != theta.size() || gm.size() != theta.size()) {
    throw DimensionError("hvp: gradient size does not match the selection");
  }
  std::vector<double> out(theta.size());
  for (std::size_t i = 0; i < out.size(); ++i) out[i] = (gp[i] - gm[i]) / (2.0 * eps);
  return out;
}

EigenSpectrum top_eigenvalues(const LinearOperator& op, std::size_t dim,
                              const PowerIterationOptions& opt) {
  if (dim == 0) throw ArgumentError("power iteration: empty parameter selection");
  if (opt.k == 0 || opt.k > dim) {
    throw ArgumentError("power iteration: k=" + std::to_string(opt.k) + " outside [1, " +
                        std::to_string(dim) + "]");
  }
  if (opt.max_iters == 0) throw ArgumentError("power iteration: max_iters must be positive");
  EigenSpectrum spec;
  std::vector<std::vector<double>>& found = spec.eigenvectors;

  auto orthogonalize = [&](std::vector<double>& x) {
    for (const auto& q : found) {
      const double c = dot(x, q);
      for (std::size_t i = 0; i < dim; ++i) x[i] -= c * q[i];
    }
  };

  for (std::size_t j = 0; j < opt.k; ++j) {
    Rng rng(derive_seed(opt.seed, static_cast<std::uint64_t>(j)));
    std::vector<double> v(dim);
    for (auto& x : v) x = rng.normal();
    orthogonalize(v);
    double vn = norm(v);
    if (vn == 0.0) throw NumericError("power iteration: degenerate start vector");
    for (auto& x : v) x /= vn;

    double lambda = 0.0;
    std::size_t iters = 0;
    for (std::size_t it = 0; it < opt.max_iters; ++it) {
      std::vector<double> w = op(v);
      if (w.size() != dim) throw DimensionError("power iteration: operator changed dimension");
      orthogonalize(w);
      const double next = dot(v, w);
      if (!std::isfinite(next)) throw NumericError("power iteration: non-finite Rayleigh quotient");
      iters = it + 1;
      const bool settled = it > 0 && std::abs(next - lambda) <= opt.rel_tol * std::abs(next);
      lambda = next;
      const double wn = norm(w);
      if (wn == 0.0) break;
      if (settled) break;
      for (std::size_t i = 0; i < dim; ++i) v[i] = w[i] / wn;
      orthogonalize(v);
      vn = norm(v);
      for (auto& x : v) x /= vn;
    }
    std::vector<double> hv = op(v);
    std::vector<double> r(dim);
    for (std::size_t i = 0; i < dim; ++i) r[i] = hv[i] - lambda * v[i];
    spec.eigenvalues.push_back(lambda);
    spec.residuals.push_back(norm(r));
    spec.iterations.push_back(iters);
    found.push_back(std::move(v));
  }

  std::vector<std::size_t> order(opt.k);
  for (std::size_t i = 0; i < order.size(); ++i) order[i] = i;
  std::stable_sort(order.begin(), order.end(), [&](std::size_t a, std::size_t b) {
    return std::abs(spec.eigenvalues[a]) > std::abs(spec.eigenvalues[b]);
  });
  EigenSpectrum sorted;
  for (std::size_t i : order) {
    sorted.eigenvalues.push_back(spec.eigenvalues[i]);
    sorted.residuals.push_back(spec.residuals[i]);
    sorted.iterations.push_back(spec.iterations[i]);
    sorted.eigenvectors.push_back(std::move(spec.eigenvectors[i]));
  }
  return sorted;
}

EigenSpectrum top_eigenvalues(const GradientFn& grad, ParamStore& store,
                              const ParamSelection& selection,
                              const PowerIterationOptions& options) {
  LinearOperator op = [&](std::span<const double> v) { return hvp(grad, store, selection, v); };
  return top_eigenvalues(op, selection.size(), options);
}

std::string EigenSpectrum::to_json() const {
  nlohmann::json j;
  j["eigenvalues"] = eigenvalues;
  j["residuals"] = residuals;
  j["iterations"] = iterations;
  return j.dump(2);
}

std::string RoutingMap::to_json() const {
  nlohmann::json j;
  j["layer"] = layer;
  nlohmann::json rows = nlohmann::json::array();
  nlohmann::json gate_rows = nlohmann::json::array();
  for (std::size_t r = 0; r < side; ++r) {
    std::vector<std::size_t> row(grid.begin() + static_cast<std::ptrdiff_t>(r * side),
                                 grid.begin() + static_cast<std::ptrdiff_t>((r + 1) * side));
    std::vector<double> grow(gates.begin() + static_cast<std::ptrdiff_t>(r * side),
                             gates.begin() + static_cast<std::ptrdiff_t>((r + 1) * side));
    rows.push_back(row);
    gate_rows.push_back(grow);
  }
  j["grid"] = rows;
  j["gates"] = gate_rows;
  return j.dump(2);
}

RoutingMap routing_map(const ViTModel& model, const ParamStore& store, const Image& image,
                       std::size_t layer) {
  const auto layers = model.moa_layers_at(layer);
  if (layers.empty()) {
    throw ArgumentError("block " + std::to_string(layer) + " has no mixture-of-adapters layer");
  }
  const MoALayer* chosen = layers.front();
  for (const MoALayer* l : layers)
    if (l->attach == "qkv") chosen = l;

  Tape tape(false);
  const Image* img = &image;
  ForwardResult fwd = model.forward(tape, store, std::span(&img, 1));
  const RoutingRecord* rec = nullptr;
  for (const auto& r : fwd.records)
    if (r.block == chosen->block && r.attach == chosen->attach) rec = &r;
  if (rec == nullptr) throw ArgumentError("routing map: layer produced no routing record");

  RoutingMap map;
  map.layer = layer;
  map.side = model.config().grid_side();
  for (std::size_t t = 1; t < rec->tokens; ++t) {
    map.grid.push_back(rec->indices[t * rec->top_k]);
    map.gates.push_back(rec->gates[t * rec->top_k]);
  }
  return map;
}

}  // namespace moa
