#pragma once

#include <cstddef>

#include "bgm/matrix.hpp"

namespace bgm {

/// A mechanism v = f(cond, u) that is a bijection in u for every condition.
/// Rows are independent units; cond is n x cond_dim, u and v are n x var_dim.
class Mechanism {
 public:
  virtual ~Mechanism() = default;
  virtual std::size_t cond_dim() const = 0;
  virtual std::size_t var_dim() const = 0;
  virtual Matrix forward(const Matrix& cond, const Matrix& u) const = 0;
  virtual Matrix inverse(const Matrix& cond, const Matrix& v) const = 0;
};

}  // namespace bgm
