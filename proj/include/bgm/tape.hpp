#pragma once

// Reverse-mode automatic differentiation over dense matrices.
//
// A GradTape records every operation applied to its Vars together with a
// closure that propagates output gradients to the inputs. Parameters are
// registered by address; backward() returns one gradient per registered
// parameter. A tape built with record = false evaluates eagerly and keeps
// no closures, which is how inference paths reuse the same code.

#include <cstddef>
#include <functional>
#include <span>
#include <string>
#include <unordered_map>
#include <vector>

#include "bgm/matrix.hpp"

namespace bgm {

/// A named trainable array.
struct Param {
  std::string name;
  Matrix value;
};

class GradTape;

struct Var {
  GradTape* tape = nullptr;
  std::size_t id = 0;

  const Matrix& value() const;
  std::size_t rows() const { return value().rows(); }
  std::size_t cols() const { return value().cols(); }
};

class Gradients {
 public:
  bool has(const Param& p) const { return grads_.contains(&p); }
  /// Gradient of `p`; zeros of the right shape if `p` did not influence the loss.
  const Matrix& of(const Param& p) const;
  void set(const Param& p, Matrix g) { grads_[&p] = std::move(g); }

 private:
  std::unordered_map<const Param*, Matrix> grads_;
  mutable std::unordered_map<const Param*, Matrix> zeros_;
};

class GradTape {
 public:
  using BackwardFn = std::function<void(GradTape&, std::size_t self)>;

  explicit GradTape(bool record = true) : record_(record) {}
  GradTape(const GradTape&) = delete;
  GradTape& operator=(const GradTape&) = delete;

  bool recording() const { return record_; }

  Var constant(Matrix value);
  /// Borrows `value`; it must outlive the tape.
  Var constant_ref(const Matrix& value);
  Var parameter(const Param& p);

  /// Reverse sweep from a 1x1 loss. Throws ValidationError if the loss was
  /// not produced by this tape or the tape is not recording.
  Gradients backward(Var loss);

  // Op-author interface.
  Var push(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn);
  const Matrix& value(std::size_t id) const;
  bool needs_grad(std::size_t id) const { return nodes_[id].needs_grad; }
  /// Gradient accumulator of node `id`, zero-initialised on first access.
  Matrix& grad(std::size_t id);
  bool has_grad(std::size_t id) const { return !nodes_[id].grad.empty(); }
  std::size_t size() const { return nodes_.size(); }

 private:
  struct Node {
    Matrix own;
    const Matrix* borrowed = nullptr;
    Matrix grad;
    bool needs_grad = false;
    BackwardFn backward;
  };

  bool record_;
  std::vector<Node> nodes_;
  std::vector<std::pair<const Param*, std::size_t>> params_;
  std::unordered_map<const Param*, std::size_t> param_index_;
};

// ---- operations ---------------------------------------------------------

Var matmul(Var a, Var b);                 // (n x k)(k x m)
Var add_row(Var a, Var row);              // a + broadcast 1 x m row
Var relu(Var a);
Var add(Var a, Var b);
Var sub(Var a, Var b);
Var mul(Var a, Var b);                    // elementwise
Var scale(Var a, double c);
Var log(Var a);
Var exp(Var a);
Var sigmoid(Var a);
Var square(Var a);
Var sum(Var a);                           // -> 1 x 1
Var mean(Var a);                          // -> 1 x 1
Var sum_cols(Var a);                      // n x m -> n x 1
Var slice_cols(Var a, std::size_t begin, std::size_t count);
Var gather_cols(Var a, std::span<const std::size_t> cols);
Var concat_cols(std::span<const Var> parts);
/// Writes `values` into columns `cols` of `base` (other columns pass through).
Var scatter_cols(Var base, Var values, std::span<const std::size_t> cols);
/// (a - shift) * inv_scale with constant per-column rows.
Var standardize(Var a, std::span<const double> shift, std::span<const double> inv_scale);
/// Per-column sign * exp(log_scale) * a + shift, or its inverse. Returns the
/// transformed columns followed by one log|det| column: n x (m + 1).
Var affine_cols(Var a, Var log_scale, Var shift, std::span<const double> sign, bool inverse);
/// Elementwise spline over `input` (n x m) with raw parameters
/// (n x m * raw_param_count(bins)). Returns n x (m + 1): outputs then the
/// summed log|det| column.
Var spline_cols(Var raw, Var input, double bound, int bins, bool inverse);
/// Row-wise standard-normal log density summed over columns -> n x 1.
Var std_normal_logpdf(Var a);

}  // namespace bgm
