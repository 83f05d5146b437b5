#pragma once

#include <cstddef>
#include <string>
#include <string_view>
#include <unordered_map>
#include <vector>

#include "moa/tensor.hpp"

namespace moa {

struct ParamEntry {
  std::string name;
  Tensor value;
  Tensor grad;  // zero-filled, same shape as value
  bool frozen = false;
};

/// Ordered table of named parameters.
///
/// Names are unique and iteration follows insertion order. A store is a
/// plain value: copying it snapshots every tensor, which is how diagnostics
/// and worker threads obtain private parameter copies.
class ParamStore {
 public:
  ParamEntry& add(std::string name, Tensor value, bool frozen = false);

  bool contains(std::string_view name) const;
  ParamEntry& at(std::string_view name);
  const ParamEntry& at(std::string_view name) const;
  std::size_t index_of(std::string_view name) const;

  std::vector<ParamEntry>& entries() noexcept { return entries_; }
  const std::vector<ParamEntry>& entries() const noexcept { return entries_; }
  std::size_t size() const noexcept { return entries_.size(); }

  void zero_grad();
  void set_all_frozen(bool frozen);

  std::size_t total_scalars() const;
  std::size_t trainable_scalars() const;
  std::vector<std::string> trainable_names() const;

  /// True when names, shapes and frozen flags agree.
  bool same_layout(const ParamStore& other) const;
  /// Bitwise equality of every value tensor (and layout).
  bool values_equal(const ParamStore& other) const;

 private:
  std::vector<ParamEntry> entries_;
  std::unordered_map<std::string, std::size_t> index_;
};

}  // namespace moa
