#include "moa/param_store.hpp"

#include <cstring>

#include "moa/errors.hpp"

namespace moa {

ParamEntry& ParamStore::add(std::string name, Tensor value, bool frozen) {
  if (index_.contains(name)) {
    throw ArgumentError("duplicate parameter name '" + name + "'");
  }
  Tensor grad(value.rows(), value.cols());
  index_.emplace(name, entries_.size());
  entries_.push_back(ParamEntry{std::move(name), std::move(value), std::move(grad), frozen});
  return entries_.back();
}

bool ParamStore::contains(std::string_view name) const {
  return index_.contains(std::string(name));
}

std::size_t ParamStore::index_of(std::string_view name) const {
  auto it = index_.find(std::string(name));
  if (it == index_.end()) {
    throw ArgumentError("unknown parameter '" + std::string(name) + "'");
  }
  return it->second;
}

ParamEntry& ParamStore::at(std::string_view name) { return entries_[index_of(name)]; }

const ParamEntry& ParamStore::at(std::string_view name) const {
  return entries_[index_of(name)];
}

void ParamStore::zero_grad() {
  for (auto& e : entries_) e.grad.fill(0.0);
}

void ParamStore::set_all_frozen(bool frozen) {
  for (auto& e : entries_) e.frozen = frozen;
}

std::size_t ParamStore::total_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) n += e.value.size();
  return n;
}

std::size_t ParamStore::trainable_scalars() const {
  std::size_t n = 0;
  for (const auto& e : entries_) {
    if (!e.frozen) n += e.value.size();
  }
  return n;
}

std::vector<std::string> ParamStore::trainable_names() const {
  std::vector<std::string> names;
  for (const auto& e : entries_) {
    if (!e.frozen) names.push_back(e.name);
  }
  return names;
}

bool ParamStore::same_layout(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    const auto& a = entries_[i];
    const auto& b = other.entries_[i];
    if (a.name != b.name || !a.value.same_shape(b.value) || a.frozen != b.frozen) {
      return false;
    }
  }
  return true;
}

bool ParamStore::values_equal(const ParamStore& other) const {
  if (entries_.size() != other.entries_.size()) return false;
  for (std::size_t i = 0; i < entries_.size(); ++i) {
    if (entries_[i].name != other.entries_[i].name) return false;
    const Tensor& a = entries_[i].value;
    const Tensor& b = other.entries_[i].value;
    if (!a.same_shape(b)) return false;
    if (std::memcmp(a.data().data(), b.data().data(), a.size() * sizeof(double)) != 0) {
      return false;
    }
  }
  return true;
}

}  // namespace moa
