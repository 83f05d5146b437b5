#include "moa/param_decl.hpp"

#include <algorithm>

#include "moa/rng.hpp"

namespace moa {

Tensor initial_value(const ParamDecl& decl, std::uint64_t seed) {
  Tensor t(decl.rows, decl.cols);
  switch (decl.init) {
    case InitRule::Zeros:
      break;
    case InitRule::Ones:
      t.fill(1.0);
      break;
    case InitRule::Constant:
      t.fill(decl.scale);
      break;
    case InitRule::ScaledIdentity:
      for (std::size_t i = 0; i < std::min(decl.rows, decl.cols); ++i) t(i, i) = decl.scale;
      break;
    case InitRule::Normal: {
      Rng rng(derive_seed(seed, decl.name));
      for (auto& v : t.data()) v = rng.normal(decl.scale);
      break;
    }
  }
  return t;
}

void materialize(const std::vector<ParamDecl>& decls, std::uint64_t seed, ParamStore& store) {
  for (const auto& d : decls) store.add(d.name, initial_value(d, seed));
}

}  // namespace moa
