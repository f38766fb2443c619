#pragma once

#include <algorithm>
#include <cstdint>
#include <string>
#include <string_view>
#include <vector>

#include "rosfl/tensor.hpp"

namespace rosfl {

enum class Part : std::uint8_t { Full = 0, Head = 1, Body = 2, Tail = 3 };

inline std::string_view part_name(Part p) {
  switch (p) {
    case Part::Full: return "full";
    case Part::Head: return "head";
    case Part::Body: return "body";
    case Part::Tail: return "tail";
  }
  return "?";
}

inline std::string part_prefix(Part p) { return p == Part::Full ? "" : std::string(part_name(p)) + "/"; }

template <typename S>
struct NamedTensor {
  std::string name;
  Tensor<S> value;

  friend bool operator==(const NamedTensor&, const NamedTensor&) = default;
};

/// Ordered named parameters of one model part, tagged with the round that
/// produced them.
template <typename S>
class ParamSet {
 public:
  using Entry = NamedTensor<S>;

  ParamSet() = default;
  explicit ParamSet(Part part, std::uint32_t round = 0) : part_(part), round_(round) {}

  Part part() const { return part_; }
  std::uint32_t round() const { return round_; }
  void set_round(std::uint32_t r) { round_ = r; }

  void add(std::string name, Tensor<S> value) {
    entries_.push_back({std::move(name), std::move(value)});
  }

  std::size_t size() const { return entries_.size(); }
  bool empty() const { return entries_.empty(); }
  auto begin() { return entries_.begin(); }
  auto end() { return entries_.end(); }
  auto begin() const { return entries_.begin(); }
  auto end() const { return entries_.end(); }
  Entry& operator[](std::size_t i) { return entries_[i]; }
  const Entry& operator[](std::size_t i) const { return entries_[i]; }

  const Tensor<S>* find(std::string_view name) const {
    auto it = std::find_if(entries_.begin(), entries_.end(),
                           [&](const Entry& e) { return e.name == name; });
    return it == entries_.end() ? nullptr : &it->value;
  }

  const Tensor<S>& at(std::string_view name) const {
    if (const auto* t = find(name)) return *t;
    throw ConfigError("parameter not found: " + std::string(name));
  }

  Index scalar_count() const {
    Index n = 0;
    for (const auto& e : entries_) n += e.value.size();
    return n;
  }

  // Names and shapes equal, in order.
  bool same_layout(const ParamSet& other) const {
    if (entries_.size() != other.entries_.size()) return false;
    for (std::size_t i = 0; i < entries_.size(); ++i) {
      if (entries_[i].name != other.entries_[i].name ||
          entries_[i].value.shape() != other.entries_[i].value.shape()) {
        return false;
      }
    }
    return true;
  }

  ParamSet zeros_like() const {
    ParamSet out(part_, round_);
    for (const auto& e : entries_) out.add(e.name, Tensor<S>(e.value.shape()));
    return out;
  }

  template <typename Other>
  ParamSet<Other> cast() const {
    ParamSet<Other> out(part_, round_);
    for (const auto& e : entries_) out.add(e.name, e.value.template cast<Other>());
    return out;
  }

  // Copy with every name prefixed, e.g. "head/".
  ParamSet with_prefix(const std::string& prefix, Part part) const {
    ParamSet out(part, round_);
    for (const auto& e : entries_) out.add(prefix + e.name, e.value);
    return out;
  }

  friend bool operator==(const ParamSet& a, const ParamSet& b) { return a.entries_ == b.entries_; }

 private:
  Part part_ = Part::Full;
  std::uint32_t round_ = 0;
  std::vector<Entry> entries_;
};

template <typename S>
void require_same_layout(const ParamSet<S>& a, const ParamSet<S>& b, const char* what) {
  if (!a.same_layout(b)) throw ConfigError(std::string(what) + ": parameter sets differ in names or shapes");
}

template <typename S>
S max_abs_diff(const ParamSet<S>& a, const ParamSet<S>& b) {
  require_same_layout(a, b, "max_abs_diff");
  S m = 0;
  for (std::size_t i = 0; i < a.size(); ++i) m = std::max(m, max_abs_diff(a[i].value, b[i].value));
  return m;
}

// Concatenation of all parameter values in entry order.
template <typename S>
typename Tensor<S>::Vector flatten(const ParamSet<S>& p) {
  typename Tensor<S>::Vector out(p.scalar_count());
  Index off = 0;
  for (const auto& e : p) {
    out.segment(off, e.value.size()) = e.value.values();
    off += e.value.size();
  }
  return out;
}

}  // namespace rosfl
