#pragma once

#include <cstddef>
#include <map>
#include <optional>
#include <string>
#include <string_view>
#include <vector>

#include "mtu/tensor.hpp"

namespace mtu {

/// Component tag attached to every parameter entry.
enum class Component {
  kSaQ,
  kSaK,
  kSaV,
  kSaO,
  kCaQ,
  kCaK,
  kCaV,
  kCaO,
  kFfn,
  kNorm,
  kEmbed,
  kInputConv,
  kOutputConv,
  kRouter,
  kOther,
};

/// Coarse grouping used when pooling Q/K/V/O into a block-level component.
enum class ComponentClass { kSa, kCa, kFfn, kOther };

std::string_view component_name(Component c);
/// Inverse of component_name; throws std::invalid_argument for unknown names.
Component parse_component(std::string_view name);
ComponentClass component_class(Component c);
std::string_view component_class_name(ComponentClass c);
ComponentClass parse_component_class(std::string_view name);
const std::vector<Component>& all_components();

template <class T>
struct ParamEntry {
  Tensor<T> value;
  Component tag = Component::kOther;
  bool frozen = false;
};

/// Named, component-tagged parameter leaves. Iteration order is by name.
template <class T>
class ParamTree {
 public:
  using Map = std::map<std::string, ParamEntry<T>, std::less<>>;

  /// Adds a leaf parameter; throws std::invalid_argument on a duplicate name
  /// or a name containing whitespace.
  void add(std::string name, Shape shape, std::vector<T> values, Component tag, bool frozen = false);

  bool contains(std::string_view name) const { return entries_.find(name) != entries_.end(); }
  const ParamEntry<T>& at(std::string_view name) const;
  ParamEntry<T>& at(std::string_view name);
  const Tensor<T>& tensor(std::string_view name) const { return at(name).value; }

  void set_frozen(std::string_view name, bool frozen);
  void zero_grad();

  std::size_t size() const { return entries_.size(); }
  std::size_t parameter_count() const;
  std::size_t trainable_count() const;
  std::vector<std::string> names() const;

  /// First name (or shape) at which two trees differ; nullopt when congruent.
  std::optional<std::string> first_mismatch(const ParamTree& other) const;
  bool congruent(const ParamTree& other) const { return !first_mismatch(other).has_value(); }
  /// Values and flags identical bit for bit.
  bool bitwise_equal(const ParamTree& other) const;

  /// Deep copy with fresh leaves (no shared storage, no gradients).
  ParamTree clone() const;
  template <class U>
  ParamTree<U> cast() const {
    ParamTree<U> out;
    for (const auto& [name, e] : entries_) {
      std::vector<U> v(e.value.data().begin(), e.value.data().end());
      out.add(name, e.value.shape(), std::move(v), e.tag, e.frozen);
    }
    return out;
  }

  typename Map::const_iterator begin() const { return entries_.begin(); }
  typename Map::const_iterator end() const { return entries_.end(); }
  typename Map::iterator begin() { return entries_.begin(); }
  typename Map::iterator end() { return entries_.end(); }

 private:
  Map entries_;
};

}  // namespace mtu
