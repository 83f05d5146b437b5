#pragma once

// Oracles and fixtures shared by the unit tests and the acceptance gate.
// Everything here is written directly from the mathematical definitions with
// plain loops; none of it calls into the tape or the library's kernels
// except where a test explicitly compares the two.

#include <cstddef>
#include <cstdint>
#include <functional>
#include <string>
#include <vector>

#include "moa/adapters.hpp"
#include "moa/diagnostics.hpp"
#include "moa/domains.hpp"
#include "moa/moa_layer.hpp"
#include "moa/rng.hpp"
#include "moa/tape.hpp"
#include "moa/tensor.hpp"
#include "moa/vit.hpp"

namespace moa::test {

Tensor random_tensor(Rng& rng, std::size_t rows, std::size_t cols, double stddev = 1.0);
double max_abs_diff(const Tensor& a, const Tensor& b);

// ---- dense reference kernels ----
Tensor ref_matmul(const Tensor& a, const Tensor& b);
Tensor ref_transpose(const Tensor& a);
Tensor ref_kron(const Tensor& a, const Tensor& b);
Tensor ref_softmax_rows(const Tensor& x);
Tensor ref_layer_norm(const Tensor& x, const Tensor& gamma, const Tensor& beta, double eps = 1e-6);
double ref_gelu(double x);

/// Dense k x d update matrix of an adapter built by explicit index loops.
Tensor ref_adapter_matrix(const ParamStore& store, const Adapter& adapter);
/// Delta for tokens x (m x d) from the dense matrix or, for bottleneck
/// adapters, from the two-layer definition.
Tensor ref_adapter_delta(const ParamStore& store, const Adapter& adapter, const Tensor& x);

struct RefRoute {
  Tensor probs;
  std::vector<std::size_t> indices;  // m x k
  std::vector<double> gates;
};
RefRoute ref_route(const ParamStore& store, const Router& router, const Tensor& x, std::size_t k);

/// Every expert applied densely, weighted by the gate where selected and 0
/// elsewhere.
Tensor ref_moa(const ParamStore& store, const MoALayer& layer, const Tensor& x, const Tensor& base);

/// Tape-free forward of one image through `model`'s wiring, reading weights
/// from `store`. Returns 1 x classes logits.
Tensor ref_vit_logits(const ViTModel& model, const ParamStore& store, const Image& image);

// ---- gradient checking ----

/// One differentiable primitive under test: builds its output from leaves.
struct PrimitiveCase {
  std::string name;
  /// Random inputs for a seed.
  std::function<std::vector<Tensor>(Rng&)> inputs;
  std::function<Var(Tape&, const std::vector<Var>&)> build;
};

std::vector<PrimitiveCase> primitive_cases();

/// Max relative error (floor 1e-3) between tape gradients and central
/// differences of L = sum(out * R) for a fixed random R.
double primitive_grad_error(const PrimitiveCase& c, std::uint64_t seed);

/// Small model that still exercises every code path.
ViTConfig tiny_config(AdapterKind kind = AdapterKind::LowRank,
                      AdapterMode mode = AdapterMode::Mixture);
std::vector<Sample> tiny_dataset(std::size_t image_size, std::size_t classes, std::size_t per_cell,
                                 std::size_t domains = 2);

/// Moves every parameter away from its structured initialization so no
/// gradient path is trivially zero.
void perturb(ParamStore& store, std::uint64_t seed, double stddev);

/// Relative error (floor 1e-2) of the full-model ERM gradient (CE + aux)
/// against central differences at a perturbed point, all parameters
/// trainable.
double full_model_grad_error(const ViTConfig& config, std::uint64_t seed);

// ---- second order ----

/// Dense Hessian by second differences of function values over a selection.
std::vector<std::vector<double>> dense_fd_hessian(const ScalarFn& f, ParamStore& store,
                                                  const ParamSelection& selection, double h);
/// Eigenvalues of a symmetric matrix, sorted by magnitude, descending.
std::vector<double> symmetric_eigenvalues(const std::vector<std::vector<double>>& m);

}  // namespace moa::test
