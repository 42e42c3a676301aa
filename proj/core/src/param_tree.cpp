#include "mtu/param_tree.hpp"

#include <algorithm>
#include <array>
#include <cstring>
#include <stdexcept>
#include <utility>

namespace mtu {

namespace {

constexpr std::array<std::pair<Component, std::string_view>, 15> kNames{{
    {Component::kSaQ, "SA-Q"},
    {Component::kSaK, "SA-K"},
    {Component::kSaV, "SA-V"},
    {Component::kSaO, "SA-O"},
    {Component::kCaQ, "CA-Q"},
    {Component::kCaK, "CA-K"},
    {Component::kCaV, "CA-V"},
    {Component::kCaO, "CA-O"},
    {Component::kFfn, "FFN"},
    {Component::kNorm, "norm"},
    {Component::kEmbed, "embed"},
    {Component::kInputConv, "input-conv"},
    {Component::kOutputConv, "output-conv"},
    {Component::kRouter, "router"},
    {Component::kOther, "other"},
}};

}  // namespace

std::string_view component_name(Component c) {
  for (const auto& [k, n] : kNames)
    if (k == c) return n;
  return "other";
}

Component parse_component(std::string_view name) {
  for (const auto& [k, n] : kNames)
    if (n == name) return k;
  throw std::invalid_argument("unknown component tag '" + std::string(name) + "'");
}

const std::vector<Component>& all_components() {
  static const std::vector<Component> all = [] {
    std::vector<Component> v;
    for (const auto& [k, n] : kNames) v.push_back(k);
    return v;
  }();
  return all;
}

ComponentClass component_class(Component c) {
  switch (c) {
    case Component::kSaQ:
    case Component::kSaK:
    case Component::kSaV:
    case Component::kSaO:
      return ComponentClass::kSa;
    case Component::kCaQ:
    case Component::kCaK:
    case Component::kCaV:
    case Component::kCaO:
      return ComponentClass::kCa;
    case Component::kFfn:
      return ComponentClass::kFfn;
    default:
      return ComponentClass::kOther;
  }
}

std::string_view component_class_name(ComponentClass c) {
  switch (c) {
    case ComponentClass::kSa:
      return "SA";
    case ComponentClass::kCa:
      return "CA";
    case ComponentClass::kFfn:
      return "FFN";
    default:
      return "other";
  }
}

ComponentClass parse_component_class(std::string_view name) {
  if (name == "SA") return ComponentClass::kSa;
  if (name == "CA") return ComponentClass::kCa;
  if (name == "FFN") return ComponentClass::kFfn;
  throw std::invalid_argument("unknown component class '" + std::string(name) + "' (expected SA, CA or FFN)");
}

template <class T>
void ParamTree<T>::add(std::string name, Shape shape, std::vector<T> values, Component tag, bool frozen) {
  if (name.empty() || std::any_of(name.begin(), name.end(), [](char c) { return c == ' ' || c == '\n' || c == '\t'; })) {
    throw std::invalid_argument("parameter name '" + name + "' is empty or contains whitespace");
  }
  if (contains(name)) throw std::invalid_argument("duplicate parameter '" + name + "'");
  auto t = Tensor<T>::parameter(std::move(shape), std::move(values));
  t.set_requires_grad(!frozen);
  entries_.emplace(std::move(name), ParamEntry<T>{std::move(t), tag, frozen});
}

template <class T>
const ParamEntry<T>& ParamTree<T>::at(std::string_view name) const {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return it->second;
}

template <class T>
ParamEntry<T>& ParamTree<T>::at(std::string_view name) {
  auto it = entries_.find(name);
  if (it == entries_.end()) throw std::out_of_range("no parameter named '" + std::string(name) + "'");
  return it->second;
}

template <class T>
void ParamTree<T>::set_frozen(std::string_view name, bool frozen) {
  auto& e = at(name);
  e.frozen = frozen;
  e.value.set_requires_grad(!frozen);
}

template <class T>
void ParamTree<T>::zero_grad() {
  for (auto& [name, e] : entries_) e.value.zero_grad();
}

template <class T>
std::size_t ParamTree<T>::parameter_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_) n += e.value.numel();
  return n;
}

template <class T>
std::size_t ParamTree<T>::trainable_count() const {
  std::size_t n = 0;
  for (const auto& [name, e] : entries_)
    if (!e.frozen) n += e.value.numel();
  return n;
}

template <class T>
std::vector<std::string> ParamTree<T>::names() const {
  std::vector<std::string> out;
  out.reserve(entries_.size());
  for (const auto& [name, e] : entries_) out.push_back(name);
  return out;
}

template <class T>
std::optional<std::string> ParamTree<T>::first_mismatch(const ParamTree& other) const {
  auto a = entries_.begin();
  auto b = other.entries_.begin();
  while (a != entries_.end() && b != other.entries_.end()) {
    if (a->first != b->first) return std::min(a->first, b->first);
    if (a->second.value.shape() != b->second.value.shape()) {
      return a->first + " (shape " + shape_str(a->second.value.shape()) + " vs " + shape_str(b->second.value.shape()) +
             ")";
    }
    ++a;
    ++b;
  }
  if (a != entries_.end()) return a->first;
  if (b != other.entries_.end()) return b->first;
  return std::nullopt;
}

template <class T>
bool ParamTree<T>::bitwise_equal(const ParamTree& other) const {
  if (!congruent(other)) return false;
  auto b = other.entries_.begin();
  for (auto a = entries_.begin(); a != entries_.end(); ++a, ++b) {
    if (a->second.tag != b->second.tag || a->second.frozen != b->second.frozen) return false;
    const auto x = a->second.value.data();
    const auto y = b->second.value.data();
    if (std::memcmp(x.data(), y.data(), x.size() * sizeof(T)) != 0) return false;
  }
  return true;
}

template <class T>
ParamTree<T> ParamTree<T>::clone() const {
  ParamTree out;
  for (const auto& [name, e] : entries_) {
    out.add(name, e.value.shape(), std::vector<T>(e.value.data().begin(), e.value.data().end()), e.tag, e.frozen);
  }
  return out;
}

template class ParamTree<float>;
template class ParamTree<double>;

}  // namespace mtu
