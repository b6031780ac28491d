#pragma once

#include <Eigen/Core>

#include <cstdint>
#include <functional>
#include <map>
#include <memory>
#include <numeric>
#include <optional>
#include <span>
#include <sstream>
#include <string>
#include <vector>

#include "granmoe/errors.hpp"

namespace granmoe {

using Index = Eigen::Index;
using Shape = std::vector<Index>;

template <typename Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;

using Matrix = RowMatrix<double>;

inline Index shape_numel(const Shape& shape) {
  return std::accumulate(shape.begin(), shape.end(), Index{1}, std::multiplies<>());
}

inline std::string shape_string(const Shape& shape) {
  std::ostringstream os;
  os << '[';
  for (std::size_t i = 0; i < shape.size(); ++i) os << (i ? "x" : "") << shape[i];
  os << ']';
  return os.str();
}

// Rows of the 2-D view: product of every dimension but the last.
inline Index shape_rows(const Shape& shape) {
  if (shape.empty()) return 1;
  return shape_numel(shape) / (shape.back() == 0 ? 1 : shape.back());
}

inline Index shape_cols(const Shape& shape) { return shape.empty() ? 1 : shape.back(); }

// Dense row-major tensor. Storage is a 2-D Eigen matrix whose columns are the
// last dimension, so every op in the tape can work on matrices directly.
template <typename Scalar>
class BasicTensor {
 public:
  using Storage = RowMatrix<Scalar>;

  BasicTensor() = default;

  explicit BasicTensor(Shape shape)
      : shape_(std::move(shape)), values_(Storage::Zero(shape_rows(shape_), shape_cols(shape_))) {}

  BasicTensor(Shape shape, Storage values) : shape_(std::move(shape)), values_(std::move(values)) {
    if (values_.size() != shape_numel(shape_)) {
      throw DimensionError("tensor data length " + std::to_string(values_.size()) +
                           " does not match shape " + shape_string(shape_));
    }
    values_.resize(shape_rows(shape_), shape_cols(shape_));
  }

  static BasicTensor from_matrix(Storage m) {
    Shape s{m.rows(), m.cols()};
    return BasicTensor(std::move(s), std::move(m));
  }

  const Shape& shape() const noexcept { return shape_; }
  Index size() const noexcept { return values_.size(); }
  Index rows() const noexcept { return values_.rows(); }
  Index cols() const noexcept { return values_.cols(); }

  Storage& values() noexcept { return values_; }
  const Storage& values() const noexcept { return values_; }

  std::span<const Scalar> data() const noexcept {
    return {values_.data(), static_cast<std::size_t>(values_.size())};
  }
  std::span<Scalar> data() noexcept { return {values_.data(), static_cast<std::size_t>(values_.size())}; }

  bool has_grad() const noexcept { return grad_.has_value(); }

  Storage& grad() {
    if (!grad_) grad_ = Storage::Zero(values_.rows(), values_.cols());
    return *grad_;
  }
  const Storage& grad() const {
    if (!grad_) throw ContractError("tensor has no gradient buffer");
    return *grad_;
  }

  void zero_grad() { grad() = Storage::Zero(values_.rows(), values_.cols()); }
  void clear_grad() noexcept { grad_.reset(); }

 private:
  Shape shape_;
  Storage values_;
  std::optional<Storage> grad_;
};

using Tensor = BasicTensor<double>;

// Named, insertion-ordered parameter collection with a trainable flag per
// tensor. Entries have stable addresses so a tape can hold pointers to them.
template <typename Scalar>
class BasicParameterSet {
 public:
  struct Entry {
    std::string name;
    BasicTensor<Scalar> tensor;
    bool trainable = true;
  };

  BasicParameterSet() = default;
  BasicParameterSet(const BasicParameterSet& other) { *this = other; }
  BasicParameterSet& operator=(const BasicParameterSet& other) {
    if (this == &other) return *this;
    entries_.clear();
    index_.clear();
    for (const auto& e : other.entries_) add(e->name, e->tensor, e->trainable);
    return *this;
  }
  BasicParameterSet(BasicParameterSet&&) noexcept = default;
  BasicParameterSet& operator=(BasicParameterSet&&) noexcept = default;

  Entry& add(std::string name, BasicTensor<Scalar> tensor, bool trainable = true) {
    if (index_.count(name)) throw ContractError("duplicate parameter name: " + name);
    index_.emplace(name, entries_.size());
    entries_.push_back(std::make_unique<Entry>(Entry{std::move(name), std::move(tensor), trainable}));
    return *entries_.back();
  }

  bool contains(const std::string& name) const { return index_.count(name) != 0; }

  Entry& entry(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *entries_[it->second];
  }
  const Entry& entry(const std::string& name) const {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    return *entries_[it->second];
  }

  BasicTensor<Scalar>& at(const std::string& name) { return entry(name).tensor; }
  const BasicTensor<Scalar>& at(const std::string& name) const { return entry(name).tensor; }

  void erase(const std::string& name) {
    auto it = index_.find(name);
    if (it == index_.end()) throw ContractError("unknown parameter: " + name);
    entries_.erase(entries_.begin() + static_cast<std::ptrdiff_t>(it->second));
    index_.clear();
    for (std::size_t i = 0; i < entries_.size(); ++i) index_.emplace(entries_[i]->name, i);
  }

  std::size_t size() const noexcept { return entries_.size(); }

  template <typename Fn>
  void for_each(Fn&& fn) {
    for (auto& e : entries_) fn(*e);
  }
  template <typename Fn>
  void for_each(Fn&& fn) const {
    for (const auto& e : entries_) fn(static_cast<const Entry&>(*e));
  }

  std::vector<std::string> names() const {
    std::vector<std::string> out;
    out.reserve(entries_.size());
    for (const auto& e : entries_) out.push_back(e->name);
    return out;
  }

  Index count(bool trainable_only) const {
    Index n = 0;
    for (const auto& e : entries_)
      if (!trainable_only || e->trainable) n += e->tensor.size();
    return n;
  }

  void zero_grad() {
    for (auto& e : entries_) e->tensor.zero_grad();
  }

 private:
  std::vector<std::unique_ptr<Entry>> entries_;
  std::map<std::string, std::size_t> index_;
};

using ParameterSet = BasicParameterSet<double>;

}  // namespace granmoe
