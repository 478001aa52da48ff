#include "bgm/tape.hpp"

#include <cmath>
#include <numbers>

#include "bgm/errors.hpp"
#include "bgm/kernels.hpp"
#include "bgm/spline.hpp"

namespace bgm {

const Matrix& Var::value() const { return tape->value(id); }

const Matrix& Gradients::of(const Param& p) const {
  if (auto it = grads_.find(&p); it != grads_.end()) return it->second;
  auto [it, inserted] = zeros_.try_emplace(&p, Matrix(p.value.rows(), p.value.cols()));
  return it->second;
}

Var GradTape::constant(Matrix value) {
  Node n;
  n.own = std::move(value);
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var GradTape::constant_ref(const Matrix& value) {
  Node n;
  n.borrowed = &value;
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

Var GradTape::parameter(const Param& p) {
  if (auto it = param_index_.find(&p); it != param_index_.end()) return {this, it->second};
  Node n;
  n.borrowed = &p.value;
  n.needs_grad = record_;
  nodes_.push_back(std::move(n));
  const std::size_t id = nodes_.size() - 1;
  params_.emplace_back(&p, id);
  param_index_.emplace(&p, id);
  return {this, id};
}

Var GradTape::push(Matrix value, std::vector<std::size_t> inputs, BackwardFn fn) {
  Node n;
  n.own = std::move(value);
  if (record_) {
    for (std::size_t i : inputs) {
      if (nodes_[i].needs_grad) {
        n.needs_grad = true;
        break;
      }
    }
    if (n.needs_grad) n.backward = std::move(fn);
  }
  nodes_.push_back(std::move(n));
  return {this, nodes_.size() - 1};
}

const Matrix& GradTape::value(std::size_t id) const {
  const Node& n = nodes_[id];
  return n.borrowed ? *n.borrowed : n.own;
}

Matrix& GradTape::grad(std::size_t id) {
  Node& n = nodes_[id];
  if (n.grad.empty()) {
    const Matrix& v = value(id);
    n.grad = Matrix(v.rows(), v.cols());
  }
  return n.grad;
}

Gradients GradTape::backward(Var loss) {
  if (loss.tape != this || loss.id >= nodes_.size()) {
    throw ValidationError("backward: loss was not recorded on this tape");
  }
  if (!record_) throw ValidationError("backward: tape is not recording");
  const Matrix& lv = value(loss.id);
  if (lv.rows() != 1 || lv.cols() != 1) throw ShapeError("backward: loss must be a 1x1 scalar");
  for (Node& n : nodes_) n.grad = Matrix();
  grad(loss.id)(0, 0) = 1.0;
  for (std::size_t id = loss.id + 1; id-- > 0;) {
    Node& n = nodes_[id];
    if (n.needs_grad && n.backward && !n.grad.empty()) n.backward(*this, id);
  }
  Gradients out;
  for (const auto& [p, id] : params_) {
    if (!nodes_[id].grad.empty()) out.set(*p, nodes_[id].grad);
  }
  return out;
}

// ---- operations ---------------------------------------------------------

namespace {

void require_same_shape(const Matrix& a, const Matrix& b, const char* op) {
  if (!a.same_shape(b)) throw ShapeError(std::string(op) + ": shape mismatch");
}

void add_into(Matrix& dst, const Matrix& src) {
  double* d = dst.data();
  const double* s = src.data();
  for (std::size_t i = 0; i < dst.size(); ++i) d[i] += s[i];
}

template <typename F, typename G>
Var unary(Var a, F f, G dfdx) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  for (std::size_t i = 0; i < av.size(); ++i) out.data()[i] = f(av.data()[i]);
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia, dfdx](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Matrix& x = t.value(ia);
    const Matrix& y = t.value(self);
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t i = 0; i < x.size(); ++i) ga.data()[i] += g.data()[i] * dfdx(x.data()[i], y.data()[i]);
  });
}

}  // namespace

Var matmul(Var a, Var b) {
  const Matrix& av = a.value();
  const Matrix& bv = b.value();
  if (av.cols() != bv.rows()) throw ShapeError("matmul: inner dimensions differ");
  const std::size_t n = av.rows(), k = av.cols(), m = bv.cols();
  Matrix out(n, m);
  kernels::gemm_nn(n, k, m, av.data(), bv.data(), out.data());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib, n, k, m](GradTape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) {
      Matrix tmp(n, k);
      kernels::gemm_nt(n, m, k, g.data(), t.value(ib).data(), tmp.data());
      add_into(t.grad(ia), tmp);
    }
    if (t.needs_grad(ib)) {
      kernels::gemm_tn_acc(n, k, m, t.value(ia).data(), g.data(), t.grad(ib).data());
    }
  });
}

Var add_row(Var a, Var row) {
  const Matrix& av = a.value();
  const Matrix& rv = row.value();
  if (rv.rows() != 1 || rv.cols() != av.cols()) throw ShapeError("add_row: row shape mismatch");
  Matrix out = av;
  for (std::size_t r = 0; r < out.rows(); ++r) {
    auto dst = out.row_span(r);
    for (std::size_t c = 0; c < dst.size(); ++c) dst[c] += rv(0, c);
  }
  const std::size_t ia = a.id, ir = row.id;
  return a.tape->push(std::move(out), {ia, ir}, [ia, ir](GradTape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) add_into(t.grad(ia), g);
    if (t.needs_grad(ir)) {
      Matrix& gr = t.grad(ir);
      for (std::size_t r = 0; r < g.rows(); ++r) {
        for (std::size_t c = 0; c < g.cols(); ++c) gr(0, c) += g(r, c);
      }
    }
  });
}

Var relu(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), av.cols());
  kernels::relu(av.size(), av.data(), out.data());
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Matrix& x = t.value(ia);
    kernels::relu_backward(x.size(), x.data(), t.grad(self).data(), t.grad(ia).data());
  });
}

Var add(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "add");
  Matrix out = a.value();
  add_into(out, b.value());
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](GradTape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) add_into(t.grad(ia), g);
    if (t.needs_grad(ib)) add_into(t.grad(ib), g);
  });
}

Var sub(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "sub");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] -= bv.data()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](GradTape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) add_into(t.grad(ia), g);
    if (t.needs_grad(ib)) {
      Matrix& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] -= g.data()[i];
    }
  });
}

Var mul(Var a, Var b) {
  require_same_shape(a.value(), b.value(), "mul");
  Matrix out = a.value();
  const Matrix& bv = b.value();
  for (std::size_t i = 0; i < out.size(); ++i) out.data()[i] *= bv.data()[i];
  const std::size_t ia = a.id, ib = b.id;
  return a.tape->push(std::move(out), {ia, ib}, [ia, ib](GradTape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    if (t.needs_grad(ia)) {
      const Matrix& bv = t.value(ib);
      Matrix& ga = t.grad(ia);
      for (std::size_t i = 0; i < g.size(); ++i) ga.data()[i] += g.data()[i] * bv.data()[i];
    }
    if (t.needs_grad(ib)) {
      const Matrix& av = t.value(ia);
      Matrix& gb = t.grad(ib);
      for (std::size_t i = 0; i < g.size(); ++i) gb.data()[i] += g.data()[i] * av.data()[i];
    }
  });
}

Var scale(Var a, double c) {
  return unary(a, [c](double x) { return c * x; }, [c](double, double) { return c; });
}

Var log(Var a) {
  return unary(a, [](double x) { return std::log(x); }, [](double x, double) { return 1.0 / x; });
}

Var exp(Var a) {
  return unary(a, [](double x) { return std::exp(x); }, [](double, double y) { return y; });
}

Var sigmoid(Var a) {
  return unary(
      a,
      [](double x) {
        return x >= 0.0 ? 1.0 / (1.0 + std::exp(-x)) : std::exp(x) / (1.0 + std::exp(x));
      },
      [](double, double y) { return y * (1.0 - y); });
}

Var square(Var a) {
  return unary(a, [](double x) { return x * x; }, [](double x, double) { return 2.0 * x; });
}

Var sum(Var a) {
  const Matrix& av = a.value();
  double s = 0.0;
  for (double x : av.storage()) s += x;
  const std::size_t ia = a.id;
  return a.tape->push(Matrix(1, 1, s), {ia}, [ia](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const double g = t.grad(self)(0, 0);
    for (double& x : t.grad(ia).storage()) x += g;
  });
}

Var mean(Var a) {
  const std::size_t n = a.value().size();
  if (n == 0) throw ShapeError("mean: empty input");
  return scale(sum(a), 1.0 / static_cast<double>(n));
}

Var sum_cols(Var a) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double x : av.row_span(r)) s += x;
    out(r, 0) = s;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < ga.rows(); ++r) {
      for (double& x : ga.row_span(r)) x += g(r, 0);
    }
  });
}

Var slice_cols(Var a, std::size_t begin, std::size_t count) {
  std::vector<std::size_t> cols(count);
  for (std::size_t c = 0; c < count; ++c) cols[c] = begin + c;
  return gather_cols(a, cols);
}

Var gather_cols(Var a, std::span<const std::size_t> cols) {
  const Matrix& av = a.value();
  Matrix out(av.rows(), cols.size());
  for (std::size_t c : cols) {
    if (c >= av.cols()) throw ShapeError("gather_cols: column out of range");
  }
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) out(r, c) = av(r, cols[c]);
  }
  const std::size_t ia = a.id;
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return a.tape->push(std::move(out), {ia}, [ia, idx](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < idx.size(); ++c) ga(r, idx[c]) += g(r, c);
    }
  });
}

Var concat_cols(std::span<const Var> parts) {
  if (parts.empty()) throw ShapeError("concat_cols: no inputs");
  GradTape* tape = parts.front().tape;
  const std::size_t n = parts.front().rows();
  std::size_t total = 0;
  for (const Var& p : parts) {
    if (p.rows() != n) throw ShapeError("concat_cols: row count mismatch");
    total += p.cols();
  }
  Matrix out(n, total);
  std::vector<std::size_t> ids, offsets;
  std::size_t off = 0;
  for (const Var& p : parts) {
    const Matrix& pv = p.value();
    for (std::size_t r = 0; r < n; ++r) {
      for (std::size_t c = 0; c < pv.cols(); ++c) out(r, off + c) = pv(r, c);
    }
    ids.push_back(p.id);
    offsets.push_back(off);
    off += pv.cols();
  }
  return tape->push(std::move(out), ids, [ids, offsets](GradTape& t, std::size_t self) {
    const Matrix& g = t.grad(self);
    for (std::size_t k = 0; k < ids.size(); ++k) {
      if (!t.needs_grad(ids[k])) continue;
      Matrix& gp = t.grad(ids[k]);
      for (std::size_t r = 0; r < gp.rows(); ++r) {
        for (std::size_t c = 0; c < gp.cols(); ++c) gp(r, c) += g(r, offsets[k] + c);
      }
    }
  });
}

Var scatter_cols(Var base, Var values, std::span<const std::size_t> cols) {
  const Matrix& bv = base.value();
  const Matrix& vv = values.value();
  if (vv.rows() != bv.rows() || vv.cols() != cols.size()) throw ShapeError("scatter_cols: shape mismatch");
  Matrix out = bv;
  std::vector<bool> replaced(bv.cols(), false);
  for (std::size_t c = 0; c < cols.size(); ++c) {
    if (cols[c] >= bv.cols()) throw ShapeError("scatter_cols: column out of range");
    replaced[cols[c]] = true;
  }
  for (std::size_t r = 0; r < bv.rows(); ++r) {
    for (std::size_t c = 0; c < cols.size(); ++c) out(r, cols[c]) = vv(r, c);
  }
  const std::size_t ib = base.id, iv = values.id;
  std::vector<std::size_t> idx(cols.begin(), cols.end());
  return base.tape->push(
      std::move(out), {ib, iv}, [ib, iv, idx, replaced](GradTape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        if (t.needs_grad(ib)) {
          Matrix& gb = t.grad(ib);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < g.cols(); ++c) {
              if (!replaced[c]) gb(r, c) += g(r, c);
            }
          }
        }
        if (t.needs_grad(iv)) {
          Matrix& gv = t.grad(iv);
          for (std::size_t r = 0; r < g.rows(); ++r) {
            for (std::size_t c = 0; c < idx.size(); ++c) gv(r, c) += g(r, idx[c]);
          }
        }
      });
}

Var standardize(Var a, std::span<const double> shift, std::span<const double> inv_scale) {
  const Matrix& av = a.value();
  if (shift.size() != av.cols() || inv_scale.size() != av.cols()) {
    throw ShapeError("standardize: per-column constants do not match input width");
  }
  Matrix out(av.rows(), av.cols());
  for (std::size_t r = 0; r < av.rows(); ++r) {
    for (std::size_t c = 0; c < av.cols(); ++c) out(r, c) = (av(r, c) - shift[c]) * inv_scale[c];
  }
  const std::size_t ia = a.id;
  std::vector<double> inv(inv_scale.begin(), inv_scale.end());
  return a.tape->push(std::move(out), {ia}, [ia, inv](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Matrix& g = t.grad(self);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < g.rows(); ++r) {
      for (std::size_t c = 0; c < g.cols(); ++c) ga(r, c) += g(r, c) * inv[c];
    }
  });
}

Var affine_cols(Var a, Var log_scale, Var shift, std::span<const double> sign, bool inverse) {
  const Matrix& av = a.value();
  const Matrix& ls = log_scale.value();
  const Matrix& sh = shift.value();
  const std::size_t n = av.rows(), m = av.cols();
  if (ls.rows() != 1 || ls.cols() != m || sh.rows() != 1 || sh.cols() != m || sign.size() != m) {
    throw ShapeError("affine_cols: parameter width mismatch");
  }
  std::vector<double> factor(m);
  double logdet = 0.0;
  for (std::size_t c = 0; c < m; ++c) {
    factor[c] = inverse ? sign[c] * std::exp(-ls(0, c)) : sign[c] * std::exp(ls(0, c));
    logdet += inverse ? -ls(0, c) : ls(0, c);
  }
  Matrix out(n, m + 1);
  for (std::size_t r = 0; r < n; ++r) {
    for (std::size_t c = 0; c < m; ++c) {
      out(r, c) = inverse ? (av(r, c) - sh(0, c)) * factor[c] : av(r, c) * factor[c] + sh(0, c);
    }
    out(r, m) = logdet;
  }
  const std::size_t ia = a.id, il = log_scale.id, is = shift.id;
  return a.tape->push(
      std::move(out), {ia, il, is},
      [ia, il, is, factor, inverse, m](GradTape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& y = t.value(self);
        const Matrix& shv = t.value(is);
        const std::size_t n = g.rows();
        if (t.needs_grad(ia)) {
          Matrix& ga = t.grad(ia);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < m; ++c) ga(r, c) += g(r, c) * factor[c];
          }
        }
        if (t.needs_grad(il)) {
          Matrix& gl = t.grad(il);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < m; ++c) {
              // d out / d log_scale: (out - shift) forward, -out inverse.
              const double d = inverse ? -y(r, c) : y(r, c) - shv(0, c);
              gl(0, c) += g(r, c) * d + (inverse ? -g(r, m) : g(r, m));
            }
          }
        }
        if (t.needs_grad(is)) {
          Matrix& gs = t.grad(is);
          for (std::size_t r = 0; r < n; ++r) {
            for (std::size_t c = 0; c < m; ++c) gs(0, c) += inverse ? -g(r, c) * factor[c] : g(r, c);
          }
        }
      });
}

Var spline_cols(Var raw, Var input, double bound, int bins, bool inverse) {
  const Matrix& rv = raw.value();
  const Matrix& iv = input.value();
  const std::size_t n = iv.rows(), m = iv.cols();
  const std::size_t per = raw_param_count(bins);
  if (rv.rows() != n || rv.cols() != m * per) {
    throw ShapeError("spline_cols: raw parameter block has the wrong shape");
  }
  Matrix out(n, m + 1);
  SplineParams p;
  for (std::size_t r = 0; r < n; ++r) {
    double ld = 0.0;
    for (std::size_t c = 0; c < m; ++c) {
      const double x = iv(r, c);
      if (!std::isfinite(x)) throw NumericInputError("spline: non-finite input");
      if (x <= -bound || x >= bound) {
        out(r, c) = x;
        continue;
      }
      raw_to_spline_into(rv.row_span(r).subspan(c * per, per), bound, bins, p);
      const SplineValue s = inverse ? spline_inverse(p, x) : spline_forward(p, x);
      out(r, c) = s.value;
      ld += s.logdet;
    }
    out(r, m) = ld;
  }
  const std::size_t ir = raw.id, ii = input.id;
  return raw.tape->push(
      std::move(out), {ir, ii}, [ir, ii, bound, bins, inverse, m, per](GradTape& t, std::size_t self) {
        const Matrix& g = t.grad(self);
        const Matrix& rv = t.value(ir);
        const Matrix& iv = t.value(ii);
        const bool want_raw = t.needs_grad(ir);
        const bool want_in = t.needs_grad(ii);
        SplineScratch scratch;
        std::vector<double> sink(per);
        for (std::size_t r = 0; r < g.rows(); ++r) {
          for (std::size_t c = 0; c < m; ++c) {
            std::span<double> g_raw =
                want_raw ? t.grad(ir).row_span(r).subspan(c * per, per) : std::span<double>(sink);
            const double gi = spline_backward(rv.row_span(r).subspan(c * per, per), bound, bins,
                                              iv(r, c), inverse, g(r, c), g(r, m), g_raw, scratch);
            if (want_in) t.grad(ii)(r, c) += gi;
          }
        }
      });
}

Var std_normal_logpdf(Var a) {
  const Matrix& av = a.value();
  const double half_log_2pi = 0.5 * std::log(2.0 * std::numbers::pi);
  Matrix out(av.rows(), 1);
  for (std::size_t r = 0; r < av.rows(); ++r) {
    double s = 0.0;
    for (double x : av.row_span(r)) s += -0.5 * x * x - half_log_2pi;
    out(r, 0) = s;
  }
  const std::size_t ia = a.id;
  return a.tape->push(std::move(out), {ia}, [ia](GradTape& t, std::size_t self) {
    if (!t.needs_grad(ia)) return;
    const Matrix& g = t.grad(self);
    const Matrix& x = t.value(ia);
    Matrix& ga = t.grad(ia);
    for (std::size_t r = 0; r < x.rows(); ++r) {
      for (std::size_t c = 0; c < x.cols(); ++c) ga(r, c) -= g(r, 0) * x(r, c);
    }
  });
}

}  // namespace bgm
