#pragma once

#include <cstdint>
#include <functional>
#include <map>
#include <numeric>
#include <random>
#include <string>
#include <vector>

#include <Eigen/Core>

#include "textret/errors.hpp"

namespace textret::nn {

template <class Scalar>
using RowMatrix = Eigen::Matrix<Scalar, Eigen::Dynamic, Eigen::Dynamic, Eigen::RowMajor>;
template <class Scalar>
using Vector = Eigen::Matrix<Scalar, Eigen::Dynamic, 1>;

using Shape = std::vector<int>;

inline Eigen::Index shape_numel(const Shape& s) {
  return std::accumulate(s.begin(), s.end(), Eigen::Index{1}, [](Eigen::Index a, int b) { return a * b; });
}
std::string shape_string(const Shape& s);

/// Dense row-major n-d array (NCHW for images, [K,T,C] for sequences).
template <class Scalar>
struct Tensor {
  Shape shape;
  Vector<Scalar> data;

  Tensor() = default;
  explicit Tensor(Shape s) : shape(std::move(s)), data(Vector<Scalar>::Zero(shape_numel(shape))) {}
  Tensor(Shape s, Vector<Scalar> d) : shape(std::move(s)), data(std::move(d)) {
    if (data.size() != shape_numel(shape)) throw InvalidInput("Tensor: data size does not match shape");
  }

  int rank() const { return static_cast<int>(shape.size()); }
  int dim(int i) const { return shape[static_cast<std::size_t>(i)]; }
  Eigen::Index numel() const { return data.size(); }
  bool empty() const { return shape.empty(); }

  Scalar* ptr() { return data.data(); }
  const Scalar* ptr() const { return data.data(); }

  /// View as a rows x cols row-major matrix; rows * cols must equal numel().
  Eigen::Map<RowMatrix<Scalar>> as_matrix(Eigen::Index rows, Eigen::Index cols) {
    return Eigen::Map<RowMatrix<Scalar>>(data.data(), rows, cols);
  }
  Eigen::Map<const RowMatrix<Scalar>> as_matrix(Eigen::Index rows, Eigen::Index cols) const {
    return Eigen::Map<const RowMatrix<Scalar>>(data.data(), rows, cols);
  }

  template <class Other>
  Tensor<Other> cast() const {
    return Tensor<Other>(shape, data.template cast<Other>());
  }
};

template <class Scalar>
struct Parameter {
  Tensor<Scalar> value;
  Tensor<Scalar> grad;
  Tensor<Scalar> velocity;
  bool decay = true;  // weight decay applies (off for norms and biases)
};

/// Named learnable arrays, iterated in name order.
template <class Scalar>
class ParameterStore {
 public:
  Parameter<Scalar>& add(const std::string& name, Tensor<Scalar> init, bool decay = true);
  Parameter<Scalar>& at(const std::string& name);
  const Parameter<Scalar>& at(const std::string& name) const;
  bool contains(const std::string& name) const { return params_.count(name) != 0; }

  void zero_grad();
  std::size_t size() const { return params_.size(); }
  Eigen::Index scalar_count() const;

  std::map<std::string, Parameter<Scalar>>& items() { return params_; }
  const std::map<std::string, Parameter<Scalar>>& items() const { return params_; }

 private:
  std::map<std::string, Parameter<Scalar>> params_;
};

template <class Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::add(const std::string& name, Tensor<Scalar> init, bool decay) {
  if (params_.count(name)) throw InvalidInput("duplicate parameter " + name);
  Parameter<Scalar> p;
  p.grad = Tensor<Scalar>(init.shape);
  p.velocity = Tensor<Scalar>(init.shape);
  p.value = std::move(init);
  p.decay = decay;
  return params_.emplace(name, std::move(p)).first->second;
}

template <class Scalar>
Parameter<Scalar>& ParameterStore<Scalar>::at(const std::string& name) {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidInput("unknown parameter " + name);
  return it->second;
}

template <class Scalar>
const Parameter<Scalar>& ParameterStore<Scalar>::at(const std::string& name) const {
  auto it = params_.find(name);
  if (it == params_.end()) throw InvalidInput("unknown parameter " + name);
  return it->second;
}

template <class Scalar>
void ParameterStore<Scalar>::zero_grad() {
  for (auto& [_, p] : params_) p.grad.data.setZero();
}

template <class Scalar>
Eigen::Index ParameterStore<Scalar>::scalar_count() const {
  Eigen::Index n = 0;
  for (const auto& [_, p] : params_) n += p.value.numel();
  return n;
}

}  // namespace textret::nn
