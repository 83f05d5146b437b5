#pragma once

#include <cstddef>
#include <cstdint>
#include <functional>
#include <span>
#include <string>
#include <vector>

#include "moa/image.hpp"
#include "moa/numeric_grad.hpp"
#include "moa/param_store.hpp"
#include "moa/trainer.hpp"
#include "moa/vit.hpp"

namespace moa {

/// An ordered subset of a store's parameters viewed as one flat vector.
class ParamSelection {
 public:
  ParamSelection() = default;
  ParamSelection(const ParamStore& store, std::vector<std::string> names);

  static ParamSelection trainable(const ParamStore& store);
  static ParamSelection all(const ParamStore& store);

  const std::vector<std::string>& names() const noexcept { return names_; }
  std::size_t size() const noexcept { return size_; }
  /// Scalar count per selected tensor, in order.
  const std::vector<std::size_t>& extents() const noexcept { return extents_; }

  std::vector<double> gather(const ParamStore& store) const;
  std::vector<double> gather_grads(const ParamStore& store) const;
  void scatter(ParamStore& store, std::span<const double> values) const;

 private:
  std::vector<std::string> names_;
  std::vector<std::size_t> extents_;
  std::size_t size_ = 0;
};

/// Flat gradient of a loss with respect to a selection, evaluated at `store`.
using GradientFn = std::function<std::vector<double>(const ParamStore& store)>;

/// Mean cross-entropy of the model's predictions on `samples`, using
/// whichever store is passed in (no aux term).
ScalarFn model_loss_fn(const ViTModel& model, std::vector<const Sample*> samples,
                       std::size_t batch = 64);
/// Gradient of model_loss_fn over `selection`.
GradientFn model_gradient_fn(const ViTModel& model, std::vector<const Sample*> samples,
                             ParamSelection selection, std::size_t batch = 64);

struct Directions {
  std::vector<double> d1, d2;
};

/// Two seeded Gaussian directions over the selection. With filter
/// normalization every tensor slice is rescaled to the norm of the matching
/// parameter tensor (slices of all-zero tensors stay zero).
Directions random_directions(const ParamStore& store, const ParamSelection& selection,
                             std::uint64_t seed, bool filter_normalize = true);

struct LandscapeGrid {
  std::vector<double> alphas, betas;
  std::vector<double> loss;  // alphas.size() x betas.size(), row-major

  double at(std::size_t i, std::size_t j) const { return loss[i * betas.size() + j]; }
  /// Header alpha,beta,loss; reals with 17 significant digits.
  std::string to_csv() const;
};

/// Evaluates loss(theta + a*d1 + b*d2) over the coordinate grid. Non-finite
/// losses become +inf. `store` is bit-identical to its input afterwards.
/// With jobs > 1 cells are spread over worker threads, each on a private
/// copy of the store, so `loss` must be safe to call concurrently.
LandscapeGrid loss_landscape(const ScalarFn& loss, ParamStore& store,
                             const ParamSelection& selection, const Directions& dirs,
                             std::span<const double> alphas, std::span<const double> betas,
                             std::size_t jobs = 1);

/// grid_n (odd) evenly spaced coordinates over [-range, range].
std::vector<double> grid_coordinates(std::size_t grid_n, double range);

/// Hessian-vector product by central differences of the gradient with step
/// 1e-3 / max(1, |v|). `store` is restored bit-identically.
std::vector<double> hvp(const GradientFn& grad, ParamStore& store, const ParamSelection& selection,
                        std::span<const double> v);

struct PowerIterationOptions {
  std::size_t k = 5;
  std::size_t max_iters = 200;
  double rel_tol = 1e-6;
  std::uint64_t seed = 0;
};

struct EigenSpectrum {
  std::vector<double> eigenvalues;  // sorted by magnitude, descending
  std::vector<double> residuals;    // |Hv - lambda v|
  std::vector<std::size_t> iterations;
  std::vector<std::vector<double>> eigenvectors;

  std::string to_json() const;
};

/// Matrix-free operator y = H v.
using LinearOperator = std::function<std::vector<double>(std::span<const double>)>;

/// Deflated power iteration: each vector is re-orthogonalized against the
/// ones already found at every step; stops on relative Rayleigh-quotient
/// change below rel_tol or after max_iters.
EigenSpectrum top_eigenvalues(const LinearOperator& op, std::size_t dim,
                              const PowerIterationOptions& options);
EigenSpectrum top_eigenvalues(const GradientFn& grad, ParamStore& store,
                              const ParamSelection& selection,
                              const PowerIterationOptions& options);

struct RoutingMap {
  std::size_t layer = 0;  // block index
  std::size_t side = 0;
  std::vector<std::size_t> grid;  // side*side expert indices, row-major
  std::vector<double> gates;      // gate of the chosen expert per patch

  std::string to_json() const;
};

/// Top-1 expert per patch (class token excluded) at the QKV MoA layer of
/// `layer`. Throws ArgumentError when that block has no MoA layer.
RoutingMap routing_map(const ViTModel& model, const ParamStore& store, const Image& image,
                       std::size_t layer);

}  // namespace moa
