#pragma once

#include <cstddef>
#include <cstdint>
#include <string>
#include <vector>

#include "moa/param_store.hpp"

namespace moa {

/// What a parameter is for; freeze policies select trainable sets by role.
enum class ParamRole {
  Embedding,   // patch projection, class token, positional table
  Norm,        // layer-norm gains and shifts
  AttnWeight,  // QKV and output projection matrices
  AttnBias,
  MlpWeight,
  MlpBias,
  Head,  // classifier
  Adapter,
  Router,
};

enum class InitRule { Zeros, Ones, Normal, ScaledIdentity, Constant };

/// Shape and initialization of one named parameter, independent of storage.
struct ParamDecl {
  std::string name;
  std::size_t rows = 0;
  std::size_t cols = 0;
  ParamRole role = ParamRole::Adapter;
  InitRule init = InitRule::Zeros;
  double scale = 0.0;  // stddev for Normal, diagonal for ScaledIdentity, value for Constant

  std::size_t scalars() const { return rows * cols; }
};

/// Allocates every declaration into `store`. Each parameter draws from its
/// own stream derived from (seed, name), so a parameter's initial value does
/// not depend on which other parameters exist.
void materialize(const std::vector<ParamDecl>& decls, std::uint64_t seed, ParamStore& store);

Tensor initial_value(const ParamDecl& decl, std::uint64_t seed);

}  // namespace moa
